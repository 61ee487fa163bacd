//! Dataset handling: volumes, patient-level splits, normalization,
//! augmentation, synthetic data and on-disk formats.

mod augment;
mod io;
pub mod png_codec;
mod synthetic;

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{apply_transform, augment_batch, augment_batch_with, sample_transform, Transform};
pub use io::{load_dataset, write_png_pairs, DatasetFormat};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::error::{ensure, Error, Result};
use crate::grid::{ImageSlice, LabelMap, Shape};

/// Image slice with its ground-truth labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSlice {
    pub image: ImageSlice,
    pub labels: LabelMap,
}

impl LabeledSlice {
    pub fn new(image: ImageSlice, labels: LabelMap) -> Result<Self> {
        if image.shape() != labels.shape() {
            return Err(Error::shape(image.shape(), labels.shape()));
        }
        Ok(Self { image, labels })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientVolume {
    pub patient_id: String,
    pub slices: Vec<LabeledSlice>,
}

impl PatientVolume {
    pub fn num_classes(&self) -> usize {
        self.slices.first().map_or(0, |s| s.labels.num_classes())
    }
}

/// Group sizes used for the four patient groups.
pub const DEFAULT_SPLIT_SIZES: [usize; 4] = [15, 8, 1, 5];

/// Patient-level partition: autoCNN training (g1), autoCNN validation and
/// extra interCNN training (g2), interCNN model selection (g3), test (g4).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub g1: Vec<String>,
    pub g2: Vec<String>,
    pub g3: Vec<String>,
    pub g4: Vec<String>,
}

impl SplitSpec {
    pub fn groups(&self) -> [&[String]; 4] {
        [&self.g1, &self.g2, &self.g3, &self.g4]
    }

    /// Groups must be pairwise disjoint and together cover `patient_ids`.
    pub fn validate(&self, patient_ids: &[String]) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.groups().into_iter().flatten() {
            ensure!(seen.insert(id.as_str()), "patient {id} appears in more than one group");
        }
        let all: HashSet<&str> = patient_ids.iter().map(String::as_str).collect();
        ensure!(seen == all, "split does not cover exactly the dataset's patients");
        Ok(())
    }

    /// Volumes of one group, in split order.
    pub fn select<'a>(&self, group: &[String], volumes: &'a [PatientVolume]) -> Result<Vec<&'a PatientVolume>> {
        group
            .iter()
            .map(|id| {
                volumes
                    .iter()
                    .find(|v| &v.patient_id == id)
                    .ok_or_else(|| Error::Contract(format!("patient {id} not in dataset")))
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::load(path.as_ref(), e.to_string()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Random patient-level split with the given group sizes.
pub fn make_splits(patient_ids: &[String], sizes: [usize; 4], seed: u64) -> Result<SplitSpec> {
    ensure!(
        sizes.iter().sum::<usize>() == patient_ids.len(),
        "split sizes {sizes:?} do not sum to {} patients",
        patient_ids.len()
    );
    let unique: HashSet<&String> = patient_ids.iter().collect();
    ensure!(unique.len() == patient_ids.len(), "duplicate patient ids");
    let mut ids = patient_ids.to_vec();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = ids.into_iter();
    let mut take = |n| rest.by_ref().take(n).collect::<Vec<_>>();
    Ok(SplitSpec {
        g1: take(sizes[0]),
        g2: take(sizes[1]),
        g3: take(sizes[2]),
        g4: take(sizes[3]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub median_intensity: f64,
}

/// Corpus-wide median intensity over every pixel of the training volumes.
pub fn compute_normalization<'a>(volumes: impl IntoIterator<Item = &'a PatientVolume>) -> Result<NormalizationStats> {
    let mut pixels: Vec<f32> = volumes
        .into_iter()
        .flat_map(|v| v.slices.iter().flat_map(|s| s.image.data().iter().copied()))
        .collect();
    ensure!(!pixels.is_empty(), "no training pixels to normalize with");
    let n = pixels.len();
    let mid = n / 2;
    let (_, &mut upper, _) = pixels.select_nth_unstable_by(mid, f32::total_cmp);
    let median = if n % 2 == 1 {
        upper as f64
    } else {
        let lower = pixels[..mid].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        (lower as f64 + upper as f64) / 2.0
    };
    ensure!(
        median > 0.0 && median.is_finite(),
        "median training intensity is {median}; cannot normalize by it"
    );
    Ok(NormalizationStats {
        median_intensity: median,
    })
}

pub fn normalize(slice: &ImageSlice, stats: &NormalizationStats) -> ImageSlice {
    let m = stats.median_intensity;
    slice.map(|v| (v as f64 / m) as f32)
}

/// Normalize every image of a set of volumes.
pub fn normalize_volumes(volumes: &[PatientVolume], stats: &NormalizationStats) -> Vec<PatientVolume> {
    volumes
        .iter()
        .map(|v| PatientVolume {
            patient_id: v.patient_id.clone(),
            slices: v
                .slices
                .iter()
                .map(|s| LabeledSlice {
                    image: normalize(&s.image, stats),
                    labels: s.labels.clone(),
                })
                .collect(),
        })
        .collect()
}

/// Centered crop/pad between two grid sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub source: Shape,
    pub target: Shape,
}

impl Placement {
    pub fn new(source: Shape, target: Shape) -> Self {
        Self { source, target }
    }

    /// Map `data` (source-shaped) into the target grid, filling uncovered pixels.
    pub fn fit<T: Copy>(&self, data: &[T], fill: T) -> Vec<T> {
        resample_centered(data, self.source, self.target, fill)
    }

    /// Inverse of [`Placement::fit`] for target-shaped data.
    pub fn unfit<T: Copy>(&self, data: &[T], fill: T) -> Vec<T> {
        resample_centered(data, self.target, self.source, fill)
    }
}

fn resample_centered<T: Copy>(data: &[T], from: Shape, to: Shape, fill: T) -> Vec<T> {
    assert_eq!(data.len(), from.len());
    let mut out = vec![fill; to.len()];
    // Offset of the source origin inside the target grid (negative when cropping).
    let offset = |to: usize, from: usize| -> isize {
        if to >= from {
            ((to - from) / 2) as isize
        } else {
            -(((from - to) / 2) as isize)
        }
    };
    let dr = offset(to.height, from.height);
    let dc = offset(to.width, from.width);
    for r in 0..to.height {
        let sr = r as isize - dr;
        if sr < 0 || sr >= from.height as isize {
            continue;
        }
        for c in 0..to.width {
            let sc = c as isize - dc;
            if sc < 0 || sc >= from.width as isize {
                continue;
            }
            out[r * to.width + c] = data[sr as usize * from.width + sc as usize];
        }
    }
    out
}

/// Center-crop or zero-pad a labelled slice to `target` (labels padded with background).
pub fn fit_slice(slice: &LabeledSlice, target: Shape) -> LabeledSlice {
    if slice.image.shape() == target {
        return slice.clone();
    }
    let p = Placement::new(slice.image.shape(), target);
    LabeledSlice {
        image: ImageSlice::new(target.height, target.width, p.fit(slice.image.data(), 0.0)).expect("finite"),
        labels: LabelMap::new(
            target.height,
            target.width,
            slice.labels.num_classes(),
            p.fit(slice.labels.labels(), 0),
        )
        .expect("labels in range"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:02}")).collect()
    }

    fn volume(id: &str, values: &[f32]) -> PatientVolume {
        let image = ImageSlice::new(1, values.len(), values.to_vec()).unwrap();
        let labels = LabelMap::filled(1, values.len(), 2, 0);
        PatientVolume {
            patient_id: id.into(),
            slices: vec![LabeledSlice::new(image, labels).unwrap()],
        }
    }

    #[test]
    fn default_split_on_29_patients() {
        let all = ids(29);
        let s = make_splits(&all, DEFAULT_SPLIT_SIZES, 1).unwrap();
        assert_eq!(s.groups().map(|g| g.len()), [15, 8, 1, 5]);
        s.validate(&all).unwrap();
        assert_eq!(s, make_splits(&all, DEFAULT_SPLIT_SIZES, 1).unwrap());
    }

    #[test]
    fn singleton_groups() {
        let all = ids(4);
        let s = make_splits(&all, [1, 1, 1, 1], 3).unwrap();
        let mut flat: Vec<_> = s.groups().into_iter().flatten().cloned().collect();
        flat.sort();
        assert_eq!(flat, all);
    }

    #[test]
    fn split_size_mismatch_is_error() {
        assert!(make_splits(&ids(10), DEFAULT_SPLIT_SIZES, 0).is_err());
    }

    #[test]
    fn splits_disjoint_for_many_seeds() {
        let all = ids(29);
        for seed in 0..50 {
            make_splits(&all, DEFAULT_SPLIT_SIZES, seed).unwrap().validate(&all).unwrap();
        }
    }

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        let s = make_splits(&ids(4), [1, 1, 1, 1], 0).unwrap();
        s.save(&path).unwrap();
        let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        for key in ["g1", "g2", "g3", "g4"] {
            assert!(raw[key].is_array());
        }
        assert_eq!(SplitSpec::load(&path).unwrap(), s);
    }

    #[test]
    fn median_examples() {
        let m = compute_normalization(&[volume("a", &[7.0; 5])]).unwrap();
        assert_eq!(m.median_intensity, 7.0);
        let m = compute_normalization(&[volume("a", &[3.0, 1.0, 2.0])]).unwrap();
        assert_eq!(m.median_intensity, 2.0);
        assert!(compute_normalization(&[volume("a", &[0.0; 4])]).is_err());
    }

    #[test]
    fn median_matches_sort_oracle_on_synthetic_corpus() {
        let vols = generate_synthetic(&SyntheticConfig {
            n_patients: 3,
            slices_per_patient: 2,
            height: 32,
            width: 32,
            seed: 4,
            ..Default::default()
        });
        let mut all: Vec<f32> = vols
            .iter()
            .flat_map(|v| v.slices.iter().flat_map(|s| s.image.data().to_vec()))
            .collect();
        all.sort_by(f32::total_cmp);
        let n = all.len();
        let want = if n % 2 == 1 {
            all[n / 2] as f64
        } else {
            (all[n / 2 - 1] as f64 + all[n / 2] as f64) / 2.0
        };
        assert_eq!(compute_normalization(&vols).unwrap().median_intensity, want);
    }

    #[test]
    fn normalize_examples() {
        let stats = NormalizationStats { median_intensity: 7.0 };
        let img = ImageSlice::new(1, 3, vec![7.0, 0.0, 14.0]).unwrap();
        assert_eq!(normalize(&img, &stats).data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn placement_round_trip_when_padding() {
        let p = Placement::new(Shape::new(3, 5), Shape::new(8, 8));
        let data: Vec<u32> = (0..15).collect();
        let padded = p.fit(&data, 99);
        assert_eq!(padded.iter().filter(|&&v| v == 99).count(), 64 - 15);
        assert_eq!(p.unfit(&padded, 0), data);
    }

    #[test]
    fn fit_slice_crops_centrally() {
        let img = ImageSlice::new(4, 4, (0..16).map(|v| v as f32).collect()).unwrap();
        let s = LabeledSlice::new(img, LabelMap::filled(4, 4, 2, 1)).unwrap();
        let c = fit_slice(&s, Shape::new(2, 2));
        assert_eq!(c.image.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    proptest! {
        #[test]
        fn normalize_is_scale_invariant(vals in proptest::collection::vec(0.0f32..100.0, 1..40), m in 0.5f64..10.0, a in 0.5f64..4.0) {
            let img = ImageSlice::new(1, vals.len(), vals.clone()).unwrap();
            let scaled = img.map(|v| (v as f64 * a) as f32);
            let x = normalize(&img, &NormalizationStats { median_intensity: m });
            let y = normalize(&scaled, &NormalizationStats { median_intensity: a * m });
            for (p, q) in x.data().iter().zip(y.data()) {
                prop_assert!((p - q).abs() <= 1e-4 * (1.0 + p.abs()));
            }
        }
    }
}
