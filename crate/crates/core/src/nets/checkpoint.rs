//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic, a little-endian `u64` header length, a JSON
//! header (network spec, normalization, tensor manifest and metadata), then
//! every tensor's values as little-endian `f32` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::input::{NetKind, PredictionEncoding};
use super::layers::ParamTensor;
use super::unet::{NetworkSpec, UNet};
use crate::dataio::NormalizationStats;
use crate::error::{Error, Result};
use crate::grid::Shape;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ICNNCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: NetKind,
    spec: NetworkSpec,
    normalization: NormalizationStats,
    patch_size: Shape,
    encoding: PredictionEncoding,
    step: u64,
    manifest: Vec<ManifestEntry>,
}

/// A trained network plus everything needed to feed it at inference time.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: NetKind,
    pub network: UNet<f32>,
    pub normalization: NormalizationStats,
    /// Spatial size the network was trained on; inputs are padded/cropped to it.
    pub patch_size: Shape,
    pub encoding: PredictionEncoding,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let params = self.network.params();
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            spec: self.network.spec().clone(),
            normalization: self.normalization.clone(),
            patch_size: self.patch_size,
            encoding: self.encoding,
            step: self.network.step,
            manifest: params
                .tensors
                .iter()
                .map(|t| ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    trainable: t.trainable,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &params.tensors {
            let mut buf = Vec::with_capacity(t.values.len() * 4);
            for v in &t.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 64 << 20 {
            return Err(Error::Checkpoint(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        // Rebuild the architecture from the stored NetworkSpec, then check the stored
        // manifest against it before reading any values.
        let mut network = UNet::<f32>::new(header.spec.clone(), 0)?;
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for entry in header.manifest {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Checkpoint(format!("truncated tensor {}: {e}", entry.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(ParamTensor {
                name: entry.name,
                shape: entry.shape,
                values,
                trainable: entry.trainable,
            });
        }
        network.load_params(tensors)?;
        network.step = header.step;
        Ok(Self {
            kind: header.kind,
            network,
            normalization: header.normalization,
            patch_size: header.patch_size,
            encoding: header.encoding,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkpoint() -> Checkpoint {
        let spec = NetworkSpec {
            base_channels: 2,
            in_channels: 8,
            num_classes: 3,
            ..Default::default()
        };
        let mut network = UNet::<f32>::new(spec, 9).unwrap();
        network.step = 17;
        Checkpoint {
            kind: NetKind::Inter,
            network,
            normalization: NormalizationStats { median_intensity: 3.5 },
            patch_size: Shape::new(32, 32),
            encoding: PredictionEncoding::Probabilities,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ck = checkpoint();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.network.params(), ck.network.params());
        assert_eq!(back.network.spec(), ck.network.spec());
        assert_eq!(back.network.step, 17);
        assert_eq!(back.kind, NetKind::Inter);
        assert_eq!(back.normalization, ck.normalization);
        assert_eq!(back.patch_size, ck.patch_size);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::read_from(&b"NOTACKPT\0\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        checkpoint().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 10);
        assert!(matches!(Checkpoint::read_from(buf.as_slice()), Err(Error::Checkpoint(_))));
    }
}
