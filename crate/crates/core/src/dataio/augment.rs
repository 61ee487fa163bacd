//! Batch-level geometric augmentation.
//!
//! With probability 0.5 one transform, drawn uniformly from crop-and-resize,
//! a rotation by a multiple of 90° and a horizontal flip, is applied to every
//! image and label map of the batch. Labels are always resampled with
//! nearest neighbour so no new class ids appear.

use rand::Rng;

use super::LabeledSlice;
use crate::grid::{ImageSlice, LabelMap, Shape};

pub const AUGMENT_PROBABILITY: f64 = 0.5;
/// Crop area fraction range before resizing back.
pub const CROP_AREA: (f64, f64) = (0.70, 0.95);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// Crop the window and resize back to the original shape.
    CropResize {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    /// Clockwise rotation by `quarter_turns * 90°`.
    Rotate { quarter_turns: u8 },
    FlipHorizontal,
}

/// Draw the batch decision: `None` means the batch is left untouched.
pub fn sample_transform<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Option<Transform> {
    if !rng.gen_bool(AUGMENT_PROBABILITY) {
        return None;
    }
    Some(match rng.gen_range(0..3) {
        0 => {
            let area = rng.gen_range(CROP_AREA.0..=CROP_AREA.1);
            let side = area.sqrt();
            let height = ((shape.height as f64 * side).round() as usize).clamp(1, shape.height);
            let width = ((shape.width as f64 * side).round() as usize).clamp(1, shape.width);
            Transform::CropResize {
                top: rng.gen_range(0..=shape.height - height),
                left: rng.gen_range(0..=shape.width - width),
                height,
                width,
            }
        }
        1 if shape.height == shape.width => Transform::Rotate {
            quarter_turns: rng.gen_range(1..=3),
        },
        // Non-square grids only allow the half turn, which keeps the shape.
        1 => Transform::Rotate { quarter_turns: 2 },
        _ => Transform::FlipHorizontal,
    })
}

/// Source coordinate (fractional for resizes) feeding output pixel `(r, c)`.
fn source_coord(t: Transform, shape: Shape, r: usize, c: usize) -> (f64, f64) {
    let (h, w) = (shape.height, shape.width);
    match t {
        Transform::CropResize {
            top,
            left,
            height,
            width,
        } => (
            top as f64 + (r as f64 + 0.5) * height as f64 / h as f64 - 0.5,
            left as f64 + (c as f64 + 0.5) * width as f64 / w as f64 - 0.5,
        ),
        Transform::Rotate { quarter_turns } => {
            let (r, c) = match quarter_turns % 4 {
                0 => (r, c),
                1 => (h - 1 - c, r),
                2 => (h - 1 - r, w - 1 - c),
                _ => (c, w - 1 - r),
            };
            (r as f64, c as f64)
        }
        Transform::FlipHorizontal => (r as f64, (w - 1 - c) as f64),
    }
}

fn output_shape(t: Transform, shape: Shape) -> Shape {
    match t {
        Transform::Rotate { quarter_turns } if quarter_turns % 2 == 1 => Shape::new(shape.width, shape.height),
        _ => shape,
    }
}

fn nearest<T: Copy>(data: &[T], shape: Shape, t: Transform) -> (Shape, Vec<T>) {
    let out = output_shape(t, shape);
    let mut v = Vec::with_capacity(out.len());
    for r in 0..out.height {
        for c in 0..out.width {
            let (sr, sc) = source_coord(t, shape, r, c);
            let sr = (sr.round().max(0.0) as usize).min(shape.height - 1);
            let sc = (sc.round().max(0.0) as usize).min(shape.width - 1);
            v.push(data[sr * shape.width + sc]);
        }
    }
    (out, v)
}

fn bilinear(data: &[f32], shape: Shape, t: Transform) -> Vec<f32> {
    let mut v = Vec::with_capacity(shape.len());
    let at = |r: usize, c: usize| data[r * shape.width + c];
    for r in 0..shape.height {
        for c in 0..shape.width {
            let (sr, sc) = source_coord(t, shape, r, c);
            let sr = sr.clamp(0.0, (shape.height - 1) as f64);
            let sc = sc.clamp(0.0, (shape.width - 1) as f64);
            let (r0, c0) = (sr.floor() as usize, sc.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(shape.height - 1), (c0 + 1).min(shape.width - 1));
            let (fr, fc) = ((sr - r0 as f64) as f32, (sc - c0 as f64) as f32);
            let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
            let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
            v.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    v
}

/// Apply one transform to an image/label pair.
pub fn apply_transform(slice: &LabeledSlice, t: Transform) -> LabeledSlice {
    let shape = slice.image.shape();
    let (out, labels) = nearest(slice.labels.labels(), shape, t);
    let pixels = match t {
        Transform::CropResize { .. } => bilinear(slice.image.data(), shape, t),
        _ => nearest(slice.image.data(), shape, t).1,
    };
    LabeledSlice {
        image: ImageSlice::new(out.height, out.width, pixels).expect("resampling keeps values finite"),
        labels: LabelMap::new(out.height, out.width, slice.labels.num_classes(), labels)
            .expect("nearest resampling keeps labels in range"),
    }
}

/// Apply a pre-drawn decision to every slice of the batch.
pub fn augment_batch_with(batch: &[LabeledSlice], t: Option<Transform>) -> Vec<LabeledSlice> {
    match t {
        None => batch.to_vec(),
        Some(t) => batch.iter().map(|s| apply_transform(s, t)).collect(),
    }
}

/// Draw one decision for the whole batch and apply it.
pub fn augment_batch<R: Rng + ?Sized>(batch: &[LabeledSlice], rng: &mut R) -> Vec<LabeledSlice> {
    assert!(!batch.is_empty(), "augment_batch needs a non-empty batch");
    let t = sample_transform(batch[0].image.shape(), rng);
    augment_batch_with(batch, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabeledSlice {
        // Unique intensities make every image pixel traceable.
        let image = ImageSlice::new(h, w, (0..h * w).map(|i| i as f32).collect()).unwrap();
        let labels = LabelMap::new(h, w, 3, (0..h * w).map(|_| rng.gen_range(0..3)).collect()).unwrap();
        LabeledSlice::new(image, labels).unwrap()
    }

    #[test]
    fn no_augment_leaves_batch_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = vec![random_pair(&mut rng, 8, 8), random_pair(&mut rng, 8, 8)];
        assert_eq!(augment_batch_with(&batch, None), batch);
    }

    #[test]
    fn flip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = vec![random_pair(&mut rng, 6, 9)];
        let once = augment_batch_with(&batch, Some(Transform::FlipHorizontal));
        assert_ne!(once, batch);
        assert_eq!(augment_batch_with(&once, Some(Transform::FlipHorizontal)), batch);
    }

    #[test]
    fn rotation_moves_labels_with_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = random_pair(&mut rng, 16, 16);
        for q in 1..=3 {
            let out = apply_transform(&pair, Transform::Rotate { quarter_turns: q });
            // Locate each output pixel's origin by its unique intensity.
            let origin: HashMap<u32, usize> = (0..256).map(|i| (i as u32, i)).collect();
            let mut seen = vec![false; 256];
            for (i, &v) in out.image.data().iter().enumerate() {
                let src = origin[&(v as u32)];
                assert!(!seen[src], "pixel duplicated");
                seen[src] = true;
                assert_eq!(out.labels.labels()[i], pair.labels.labels()[src]);
            }
            assert!(seen.iter().all(|&s| s));
        }
        let four = (0..4).fold(pair.clone(), |p, _| apply_transform(&p, Transform::Rotate { quarter_turns: 1 }));
        assert_eq!(four, pair);
    }

    #[test]
    fn crop_keeps_shape_and_label_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = random_pair(&mut rng, 20, 20);
        let t = Transform::CropResize {
            top: 2,
            left: 1,
            height: 17,
            width: 17,
        };
        let out = apply_transform(&pair, t);
        assert_eq!(out.image.shape(), pair.image.shape());
        let present: std::collections::HashSet<u8> = pair.labels.labels().iter().copied().collect();
        assert!(out.labels.labels().iter().all(|l| present.contains(l)));
    }

    #[test]
    fn sampled_transforms_are_valid_and_sometimes_absent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = Shape::new(32, 32);
        let draws: Vec<_> = (0..400).map(|_| sample_transform(shape, &mut rng)).collect();
        let none = draws.iter().filter(|d| d.is_none()).count();
        assert!((150..250).contains(&none), "{none}");
        for d in draws.into_iter().flatten() {
            if let Transform::CropResize {
                top,
                left,
                height,
                width,
            } = d
            {
                let area = (height * width) as f64 / shape.len() as f64;
                assert!((0.66..=0.97).contains(&area));
                assert!(top + height <= 32 && left + width <= 32);
            }
        }
    }

    #[test]
    fn geometry_stays_in_sync_on_a_coordinate_grid() {
        // Encode each pixel's coordinates in both layers and check they agree after any transform.
        let h = 12;
        let image = ImageSlice::new(h, h, (0..h * h).map(|i| i as f32).collect()).unwrap();
        let labels = LabelMap::new(h, h, 200, (0..h * h).map(|i| (i % 144) as u8).collect()).unwrap();
        let pair = LabeledSlice::new(image, labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            if let Some(t @ (Transform::Rotate { .. } | Transform::FlipHorizontal)) =
                sample_transform(pair.image.shape(), &mut rng)
            {
                let out = apply_transform(&pair, t);
                for (v, l) in out.image.data().iter().zip(out.labels.labels()) {
                    assert_eq!(*v as usize % 144, *l as usize);
                }
            }
        }
    }
}
