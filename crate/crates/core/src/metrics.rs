//! Overlap metrics and label utilities.

use crate::error::{ensure, Error, Result};
use crate::grid::{check_same_shape, DiceCurve, LabelMap, Prediction};

/// Dice overlap `2|G ∩ P| / (|G| + |P|)` between the masks of `class_id`.
///
/// Two empty masks score 1.0: a class absent from both maps is segmented
/// perfectly.
pub fn dice(ground_truth: &LabelMap, predicted: &LabelMap, class_id: u8) -> Result<f64> {
    check_same_shape(ground_truth.shape(), predicted.shape())?;
    ensure!(
        (class_id as usize) < ground_truth.num_classes(),
        "class {class_id} outside [0, {})",
        ground_truth.num_classes()
    );
    let (mut inter, mut g, mut p) = (0usize, 0usize, 0usize);
    for (&a, &b) in ground_truth.labels().iter().zip(predicted.labels()) {
        let (in_g, in_p) = (a == class_id, b == class_id);
        g += in_g as usize;
        p += in_p as usize;
        inter += (in_g && in_p) as usize;
    }
    if g + p == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (g + p) as f64)
}

/// Per-pixel argmax, lowest class id on ties.
pub fn argmax_labels(prediction: &Prediction) -> LabelMap {
    let c = prediction.num_classes();
    let labels = prediction
        .probs()
        .chunks_exact(c)
        .map(|px| {
            let mut best = 0;
            for k in 1..c {
                if px[k] > px[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(prediction.height(), prediction.width(), c, labels)
        .expect("argmax stays within class range")
}

/// Collapse every foreground class into class 1.
pub fn fuse_binary(labels: &LabelMap) -> LabelMap {
    let fused = labels.labels().iter().map(|&l| (l > 0) as u8).collect();
    LabelMap::new(labels.height(), labels.width(), 2, fused).expect("binary labels are valid")
}

/// Arithmetic mean of one (interaction, class) entry across curves.
pub fn mean_dice(curves: &[DiceCurve], interaction: usize, class_id: u8) -> Result<f64> {
    ensure!(!curves.is_empty(), "mean_dice needs at least one curve");
    let mut sum = 0.0;
    for (i, curve) in curves.iter().enumerate() {
        sum += curve.get(interaction, class_id).ok_or_else(|| {
            Error::Contract(format!(
                "curve {i} does not cover interaction {interaction} for class {class_id}"
            ))
        })?;
    }
    Ok(sum / curves.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn map(h: usize, w: usize, c: usize, labels: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, c, labels).unwrap()
    }

    /// Independent set-based Dice used as the oracle.
    fn brute_force_dice(g: &LabelMap, p: &LabelMap, class_id: u8) -> f64 {
        let pixels = |m: &LabelMap| -> HashSet<(usize, usize)> {
            let mut s = HashSet::new();
            for r in 0..m.height() {
                for c in 0..m.width() {
                    if m.get(r, c) == class_id {
                        s.insert((r, c));
                    }
                }
            }
            s
        };
        let (sg, sp) = (pixels(g), pixels(p));
        if sg.is_empty() && sp.is_empty() {
            return 1.0;
        }
        2.0 * sg.intersection(&sp).count() as f64 / (sg.len() + sp.len()) as f64
    }

    #[test]
    fn dice_identity_disjoint_and_half_overlap() {
        let mut a = vec![0u8; 400];
        a[..50].fill(1);
        let g = map(20, 20, 2, a.clone());
        assert_eq!(dice(&g, &g, 1).unwrap(), 1.0);

        let mut b = vec![0u8; 400];
        b[100..150].fill(1);
        assert_eq!(dice(&g, &map(20, 20, 2, b), 1).unwrap(), 0.0);

        // |G| = |P| = 100 with 50 shared pixels.
        let mut g2 = vec![0u8; 400];
        g2[0..100].fill(1);
        let mut p2 = vec![0u8; 400];
        p2[50..150].fill(1);
        let (g2, p2) = (map(20, 20, 2, g2), map(20, 20, 2, p2));
        assert_eq!(brute_force_dice(&g2, &p2, 1), 0.5);
        assert_eq!(dice(&g2, &p2, 1).unwrap(), 0.5);
    }

    #[test]
    fn dice_empty_masks_is_one() {
        let z = LabelMap::filled(4, 4, 3, 0);
        assert_eq!(dice(&z, &z, 2).unwrap(), 1.0);
    }

    #[test]
    fn dice_rejects_shape_mismatch_and_bad_class() {
        let a = LabelMap::filled(4, 4, 2, 0);
        let b = LabelMap::filled(4, 5, 2, 0);
        assert!(matches!(dice(&a, &b, 0), Err(Error::ShapeMismatch { .. })));
        assert!(dice(&a, &a, 2).is_err());
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let p = Prediction::new(1, 2, 2, vec![0.1, 0.9, 0.5, 0.5]).unwrap();
        assert_eq!(argmax_labels(&p).labels(), &[1, 0]);
        let u = Prediction::uniform(3, 3, 3);
        assert!(argmax_labels(&u).labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn fuse_binary_examples() {
        let l = map(1, 3, 3, vec![0, 1, 2]);
        let f = fuse_binary(&l);
        assert_eq!(f.labels(), &[0, 1, 1]);
        assert_eq!(f.num_classes(), 2);
        let z = LabelMap::filled(2, 2, 3, 0);
        assert_eq!(fuse_binary(&z).labels(), z.labels());
        let only2 = map(2, 2, 3, vec![0, 2, 0, 2]);
        assert_eq!(fuse_binary(&only2).labels(), &[0, 1, 0, 1]);
    }

    #[test]
    fn mean_dice_examples() {
        let curve = |v: f64, n: usize| {
            let mut c = DiceCurve::new(vec![1], 0);
            for _ in 0..n {
                c.push(vec![v]);
            }
            c
        };
        assert!((mean_dice(&[curve(0.8, 4)], 3, 1).unwrap() - 0.8).abs() < 1e-12);
        assert!((mean_dice(&[curve(0.6, 4), curve(1.0, 4)], 3, 1).unwrap() - 0.8).abs() < 1e-12);
        let five: Vec<_> = (0..5).map(|_| curve(0.5, 2)).collect();
        assert_eq!(mean_dice(&five, 1, 1).unwrap(), 0.5);
        assert!(mean_dice(&[], 0, 1).is_err());
        assert!(mean_dice(&[curve(0.5, 2)], 5, 1).is_err());
    }

    fn label_map_strategy(c: usize) -> impl Strategy<Value = LabelMap> {
        proptest::collection::vec(0..c as u8, 256).prop_map(move |v| map(16, 16, c, v))
    }

    proptest! {
        #[test]
        fn dice_matches_brute_force(g in label_map_strategy(3), p in label_map_strategy(3), class in 0u8..3) {
            prop_assert_eq!(dice(&g, &p, class).unwrap(), brute_force_dice(&g, &p, class));
        }

        #[test]
        fn dice_is_symmetric(g in label_map_strategy(4), p in label_map_strategy(4), class in 0u8..4) {
            prop_assert_eq!(dice(&g, &p, class).unwrap(), dice(&p, &g, class).unwrap());
        }

        #[test]
        fn dice_self_is_one(g in label_map_strategy(3), class in 0u8..3) {
            prop_assert_eq!(dice(&g, &g, class).unwrap(), 1.0);
        }

        #[test]
        fn fuse_binary_idempotent(g in label_map_strategy(4)) {
            let once = fuse_binary(&g);
            prop_assert_eq!(fuse_binary(&once), once);
        }

        #[test]
        fn argmax_output_is_valid(raw in proptest::collection::vec(0.0f32..1.0, 16 * 3)) {
            let probs: Vec<f32> = raw
                .chunks_exact(3)
                .flat_map(|px| {
                    let s: f32 = px.iter().sum::<f32>() + 1e-3;
                    let v = [(px[0] + 1e-3) / s, px[1] / s, px[2] / s];
                    v.into_iter()
                })
                .collect();
            let p = Prediction::new(4, 4, 3, probs).unwrap();
            let l = argmax_labels(&p);
            prop_assert!(LabelMap::new(4, 4, 3, l.labels().to_vec()).is_ok());
        }
    }
}
