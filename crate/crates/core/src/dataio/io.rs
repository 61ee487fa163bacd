//! On-disk dataset layouts.
//!
//! * `png_pairs`: `<root>/<patient>/slice_###_img.png` with a matching
//!   `slice_###_lbl.png` whose 8-bit values are raw class ids.
//! * `nifti`: `<root>/<patient>/image.nii.gz` and `label.nii.gz`, 3D volumes
//!   sliced along the last axis; row index = first axis, column = second.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::png_codec::{decode_gray, encode_gray8};
use super::{fit_slice, LabeledSlice, PatientVolume};
use crate::error::{Error, Result};
use crate::grid::{ImageSlice, LabelMap, Shape, MAX_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Nifti,
    PngPairs,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "nifti" => Ok(Self::Nifti),
            "png_pairs" | "png" => Ok(Self::PngPairs),
            other => Err(format!("unknown dataset format {other:?} (expected nifti or png_pairs)")),
        }
    }
}

/// Raw slice before the dataset-wide class count is known.
struct RawSlice {
    image: ImageSlice,
    labels: Vec<u8>,
}

/// Load every patient under `root`.
///
/// The class count is inferred as `max label + 1` over the whole corpus.
/// With `patch` set, slices are center-cropped or zero-padded to that size.
pub fn load_dataset(root: impl AsRef<Path>, format: DatasetFormat, patch: Option<Shape>) -> Result<Vec<PatientVolume>> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::load(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::load(root, "no patient directories found"));
    }
    let mut raw = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::load(dir, "patient directory name is not UTF-8"))?
            .to_string();
        let slices = match format {
            DatasetFormat::PngPairs => load_png_patient(dir)?,
            DatasetFormat::Nifti => load_nifti_patient(dir)?,
        };
        if slices.is_empty() {
            return Err(Error::load(dir, "patient has no slices"));
        }
        raw.push((id, slices));
    }
    let max_label = raw
        .iter()
        .flat_map(|(_, s)| s.iter().flat_map(|s| s.labels.iter().copied()))
        .max()
        .unwrap_or(0) as usize;
    let num_classes = (max_label + 1).max(2);
    if num_classes > MAX_CLASSES {
        return Err(Error::load(root, format!("{num_classes} classes exceed the supported {MAX_CLASSES}")));
    }
    raw.into_iter()
        .map(|(patient_id, slices)| {
            let slices = slices
                .into_iter()
                .map(|s| {
                    let (h, w) = (s.image.height(), s.image.width());
                    let labels = LabelMap::new(h, w, num_classes, s.labels)?;
                    let slice = LabeledSlice::new(s.image, labels)?;
                    Ok(match patch {
                        Some(p) => fit_slice(&slice, p),
                        None => slice,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PatientVolume { patient_id, slices })
        })
        .collect()
}

fn load_png_patient(dir: &Path) -> Result<Vec<RawSlice>> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::load(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("slice_") && n.ends_with("_img.png"))
        })
        .collect();
    images.sort();
    images
        .into_iter()
        .map(|img_path| {
            let name = img_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let lbl_path = img_path.with_file_name(name.replace("_img.png", "_lbl.png"));
            if !lbl_path.exists() {
                return Err(Error::load(&lbl_path, "missing label file"));
            }
            let img = decode_gray(&fs::read(&img_path)?).map_err(|e| Error::load(&img_path, e.to_string()))?;
            let lbl = decode_gray(&fs::read(&lbl_path)?).map_err(|e| Error::load(&lbl_path, e.to_string()))?;
            if (img.width, img.height) != (lbl.width, lbl.height) {
                return Err(Error::load(
                    &lbl_path,
                    format!(
                        "shape mismatch: image {}x{}, label {}x{}",
                        img.height, img.width, lbl.height, lbl.width
                    ),
                ));
            }
            let labels = lbl.to_u8().map_err(|e| Error::load(&lbl_path, e.to_string()))?;
            let image = img.to_intensities()?;
            Ok(RawSlice { image, labels })
        })
        .collect()
}

fn read_nifti(path: &Path) -> Result<ndarray::ArrayD<f32>> {
    use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::load(path, e.to_string()))?;
    obj.into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| Error::load(path, e.to_string()))
}

fn load_nifti_patient(dir: &Path) -> Result<Vec<RawSlice>> {
    let img_path = dir.join("image.nii.gz");
    let lbl_path = dir.join("label.nii.gz");
    if !img_path.exists() {
        return Err(Error::load(&img_path, "missing image file"));
    }
    if !lbl_path.exists() {
        return Err(Error::load(&lbl_path, "missing label file"));
    }
    let img = read_nifti(&img_path)?;
    let lbl = read_nifti(&lbl_path)?;
    if img.shape() != lbl.shape() {
        return Err(Error::load(
            &lbl_path,
            format!("shape mismatch: image {:?}, label {:?}", img.shape(), lbl.shape()),
        ));
    }
    let shape = img.shape().to_vec();
    let (rows, cols, depth) = match shape.as_slice() {
        [r, c] => (*r, *c, 1),
        [r, c, d] => (*r, *c, *d),
        [r, c, d, 1] => (*r, *c, *d),
        other => return Err(Error::load(&img_path, format!("unsupported volume shape {other:?}"))),
    };
    let img = img.to_shape((rows, cols, depth)).map_err(|e| Error::load(&img_path, e.to_string()))?;
    let lbl = lbl.to_shape((rows, cols, depth)).map_err(|e| Error::load(&lbl_path, e.to_string()))?;
    (0..depth)
        .map(|z| {
            let mut pixels = Vec::with_capacity(rows * cols);
            let mut labels = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    pixels.push(img[[r, c, z]]);
                    let l = lbl[[r, c, z]];
                    if l.fract() != 0.0 || !(0.0..=255.0).contains(&l) {
                        return Err(Error::load(&lbl_path, format!("non-integer label value {l}")));
                    }
                    labels.push(l as u8);
                }
            }
            Ok(RawSlice {
                image: ImageSlice::new(rows, cols, pixels).map_err(|e| Error::load(&img_path, e.to_string()))?,
                labels,
            })
        })
        .collect()
}

/// Write volumes in the `png_pairs` layout. Intensities are expected in
/// `[0, 1]` and quantized to 8 bits.
pub fn write_png_pairs(root: impl AsRef<Path>, volumes: &[PatientVolume]) -> Result<()> {
    let root = root.as_ref();
    for v in volumes {
        let dir = root.join(&v.patient_id);
        fs::create_dir_all(&dir)?;
        for (i, s) in v.slices.iter().enumerate() {
            let (h, w) = (s.image.height(), s.image.width());
            let img: Vec<u8> = s
                .image
                .data()
                .iter()
                .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            fs::write(dir.join(format!("slice_{i:03}_img.png")), encode_gray8(w, h, &img)?)?;
            fs::write(
                dir.join(format!("slice_{i:03}_lbl.png")),
                encode_gray8(w, h, s.labels.labels())?,
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticConfig};

    fn write_patient(root: &Path, id: &str, slices: &[(Vec<u8>, Vec<u8>, usize, usize)]) {
        let dir = root.join(id);
        fs::create_dir_all(&dir).unwrap();
        for (i, (img, lbl, h, w)) in slices.iter().enumerate() {
            fs::write(dir.join(format!("slice_{i:03}_img.png")), encode_gray8(*w, *h, img).unwrap()).unwrap();
            if !lbl.is_empty() {
                fs::write(dir.join(format!("slice_{i:03}_lbl.png")), encode_gray8(*w, *h, lbl).unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn png_counts_and_class_inference() {
        let dir = tempfile::tempdir().unwrap();
        let s = |max: u8| (vec![10u8; 16], (0..16).map(|i| (i % (max as usize + 1)) as u8).collect(), 4, 4);
        write_patient(dir.path(), "a", &[s(1), s(2), s(1)]);
        write_patient(dir.path(), "b", &[s(3), s(1), s(1)]);
        let vols = load_dataset(dir.path(), DatasetFormat::PngPairs, None).unwrap();
        assert_eq!(vols.len(), 2);
        assert!(vols.iter().all(|v| v.slices.len() == 3));
        assert!(vols.iter().all(|v| v.num_classes() == 4));
    }

    #[test]
    fn png_missing_label_and_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_patient(dir.path(), "a", &[(vec![0; 4], vec![], 2, 2)]);
        let err = load_dataset(dir.path(), DatasetFormat::PngPairs, None).unwrap_err();
        assert!(err.to_string().contains("missing label"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a");
        fs::create_dir_all(&p).unwrap();
        fs::write(p.join("slice_000_img.png"), encode_gray8(320, 320, &vec![0; 320 * 320]).unwrap()).unwrap();
        fs::write(p.join("slice_000_lbl.png"), encode_gray8(300, 300, &vec![0; 300 * 300]).unwrap()).unwrap();
        let err = load_dataset(dir.path(), DatasetFormat::PngPairs, None).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }

    #[test]
    fn synthetic_png_round_trip_and_patch_fit() {
        let dir = tempfile::tempdir().unwrap();
        let vols = generate_synthetic(&SyntheticConfig {
            n_patients: 2,
            slices_per_patient: 3,
            height: 40,
            width: 40,
            ..Default::default()
        });
        write_png_pairs(dir.path(), &vols).unwrap();
        let back = load_dataset(dir.path(), DatasetFormat::PngPairs, Some(Shape::new(48, 48))).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in vols.iter().zip(&back) {
            assert_eq!(a.patient_id, b.patient_id);
            for (sa, sb) in a.slices.iter().zip(&b.slices) {
                assert_eq!(sb.labels.shape(), Shape::new(48, 48));
                assert_eq!(sb.labels.count(1), sa.labels.count(1));
                assert_eq!(sb.labels.count(2), sa.labels.count(2));
            }
        }
    }

    #[test]
    fn nifti_volumes_load_and_validate() {
        use nifti::writer::WriterOptions;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("case01");
        fs::create_dir_all(&p).unwrap();
        let img = ndarray::Array3::<f32>::from_shape_fn((8, 6, 3), |(r, c, z)| (r + c + z) as f32);
        let lbl = ndarray::Array3::<f32>::from_shape_fn((8, 6, 3), |(r, _, _)| (r % 3) as f32);
        WriterOptions::new(p.join("image.nii.gz")).write_nifti(&img).unwrap();
        WriterOptions::new(p.join("label.nii.gz")).write_nifti(&lbl).unwrap();
        let vols = load_dataset(dir.path(), DatasetFormat::Nifti, None).unwrap();
        assert_eq!(vols[0].slices.len(), 3);
        assert_eq!(vols[0].num_classes(), 3);
        assert_eq!(vols[0].slices[2].image.get(4, 5), 11.0);
        assert_eq!(vols[0].slices[1].labels.get(4, 0), 1);

        let bad = ndarray::Array3::<f32>::from_elem((8, 6, 3), 0.5);
        WriterOptions::new(p.join("label.nii.gz")).write_nifti(&bad).unwrap();
        let err = load_dataset(dir.path(), DatasetFormat::Nifti, None).unwrap_err();
        assert!(err.to_string().contains("non-integer"), "{err}");
    }
}
