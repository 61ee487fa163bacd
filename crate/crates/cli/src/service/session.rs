//! Editing sessions and their on-disk form.

use std::collections::HashMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use intercnn_core::dataio::{normalize, Placement};
use intercnn_core::evaluation::Editor;
use intercnn_core::grid::{ImageSlice, LabelMap, Prediction, ScribbleMask, Shape};
use intercnn_core::Result as CoreResult;
use serde::{Deserialize, Serialize};

use super::wire::{ClassConfidence, HistoryEntry, PredictionBody, SessionBody, encode_mask};
use super::ModelBundle;

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub scribbles: ScribbleMask,
    pub prediction: Prediction,
}

/// One image being edited. Everything is stored at the network's patch
/// size; `placement` maps back to the client's grid.
#[derive(Debug, Clone)]
pub struct EditSession {
    pub id: String,
    pub placement: Placement,
    pub image: ImageSlice,
    pub base: Prediction,
    pub history: Vec<Interaction>,
    /// Serialized responses by idempotency key.
    pub responses: HashMap<String, Vec<u8>>,
}

impl EditSession {
    /// Normalize and fit the raw image, then run the base network.
    pub fn create(id: String, raw: &ImageSlice, models: &ModelBundle) -> CoreResult<Self> {
        let patch = models.patch_size();
        let placement = Placement::new(raw.shape(), patch);
        let normalized = normalize(raw, models.normalization());
        let image = ImageSlice::new(patch.height, patch.width, placement.fit(normalized.data(), 0.0))?;
        let base = models.editor().base_prediction(&image)?;
        Ok(Self {
            id,
            placement,
            image,
            base,
            history: Vec::new(),
            responses: HashMap::new(),
        })
    }

    pub fn interaction_count(&self) -> usize {
        self.history.len()
    }

    pub fn current(&self) -> &Prediction {
        self.history.last().map_or(&self.base, |i| &i.prediction)
    }

    pub fn original_shape(&self) -> Shape {
        self.placement.source
    }

    /// Fit a client-grid scribble mask onto the patch, padding with the sentinel.
    pub fn fit_scribbles(&self, values: &[u8], num_classes: usize) -> CoreResult<ScribbleMask> {
        let patch = self.placement.target;
        ScribbleMask::new(
            patch.height,
            patch.width,
            num_classes,
            self.placement.fit(values, num_classes as u8),
        )
    }

    /// One editing update on the current prediction.
    pub fn apply(&mut self, editor: &Editor<'_>, scribbles: ScribbleMask) -> CoreResult<&Prediction> {
        let prediction = editor.edit(&self.image, self.current(), &scribbles)?;
        self.history.push(Interaction { scribbles, prediction });
        Ok(self.current())
    }

    pub fn reset(&mut self) {
        self.history.clear();
        self.responses.clear();
    }

    /// Labels of a patch-sized prediction on the client grid.
    pub fn client_labels(&self, prediction: &Prediction) -> LabelMap {
        let s = self.original_shape();
        let labels = self.placement.unfit(prediction.argmax().labels(), 0);
        LabelMap::new(s.height, s.width, prediction.num_classes(), labels).expect("argmax labels are in range")
    }

    fn confidence(&self, prediction: &Prediction) -> Vec<ClassConfidence> {
        let c = prediction.num_classes();
        let argmax = prediction.argmax();
        let inside = self.placement.unfit(&(0..self.placement.target.len()).collect::<Vec<_>>(), usize::MAX);
        let mut sums = vec![(0usize, 0f64); c];
        for &i in inside.iter().filter(|&&i| i != usize::MAX) {
            let l = argmax.labels()[i] as usize;
            sums[l].0 += 1;
            sums[l].1 += prediction.probs()[i * c + l] as f64;
        }
        sums.into_iter()
            .enumerate()
            .map(|(k, (n, s))| ClassConfidence {
                class_id: k as u8,
                pixel_count: n,
                mean_probability: if n == 0 { 0.0 } else { s / n as f64 },
            })
            .collect()
    }

    pub fn prediction_body(&self) -> PredictionBody {
        let current = self.current();
        let s = self.original_shape();
        PredictionBody {
            session_id: self.id.clone(),
            height: s.height,
            width: s.width,
            interaction_count: self.interaction_count(),
            mask_png: encode_mask(s, self.client_labels(current).labels()),
            confidence: self.confidence(current),
        }
    }

    pub fn session_body(&self) -> SessionBody {
        let s = self.original_shape();
        let history = self
            .history
            .iter()
            .enumerate()
            .map(|(i, step)| {
                let sentinel = step.scribbles.sentinel();
                HistoryEntry {
                    interaction: i + 1,
                    scribbles_png: encode_mask(s, &self.placement.unfit(step.scribbles.marks(), sentinel)),
                    mask_png: encode_mask(s, self.client_labels(&step.prediction).labels()),
                }
            })
            .collect();
        SessionBody {
            prediction: self.prediction_body(),
            base_mask_png: encode_mask(s, self.client_labels(&self.base).labels()),
            history,
        }
    }
}

fn f32_blob(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn f32_unblob(text: &str) -> anyhow::Result<Vec<f32>> {
    let bytes = STANDARD.decode(text)?;
    anyhow::ensure!(bytes.len() % 4 == 0, "blob length {} is not a multiple of 4", bytes.len());
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct StoredPrediction {
    num_classes: usize,
    probs: String,
}

#[derive(Serialize, Deserialize)]
struct StoredInteraction {
    scribbles_png: String,
    prediction: StoredPrediction,
}

/// On-disk session: JSON with PNG scribble masks and raw f32 blobs, so a
/// restored session continues bit-exactly.
#[derive(Serialize, Deserialize)]
struct StoredSession {
    id: String,
    source: Shape,
    target: Shape,
    image: String,
    base: StoredPrediction,
    history: Vec<StoredInteraction>,
    responses: HashMap<String, String>,
}

fn store_prediction(p: &Prediction) -> StoredPrediction {
    StoredPrediction {
        num_classes: p.num_classes(),
        probs: f32_blob(p.probs()),
    }
}

fn load_prediction(p: &StoredPrediction, shape: Shape) -> anyhow::Result<Prediction> {
    Ok(Prediction::new(shape.height, shape.width, p.num_classes, f32_unblob(&p.probs)?)?)
}

impl EditSession {
    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let t = self.placement.target;
        let stored = StoredSession {
            id: self.id.clone(),
            source: self.placement.source,
            target: t,
            image: f32_blob(self.image.data()),
            base: store_prediction(&self.base),
            history: self
                .history
                .iter()
                .map(|i| StoredInteraction {
                    scribbles_png: encode_mask(t, i.scribbles.marks()),
                    prediction: store_prediction(&i.prediction),
                })
                .collect(),
            responses: self
                .responses
                .iter()
                .map(|(k, v)| (k.clone(), STANDARD.encode(v)))
                .collect(),
        };
        let path = dir.join(format!("{}.json", self.id));
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(&stored)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let stored: StoredSession = serde_json::from_slice(&std::fs::read(path)?)?;
        let t = stored.target;
        let image = ImageSlice::new(t.height, t.width, f32_unblob(&stored.image)?)?;
        let base = load_prediction(&stored.base, t)?;
        let history = stored
            .history
            .iter()
            .map(|i| -> anyhow::Result<Interaction> {
                let (shape, marks) = super::wire::decode_mask("scribbles_png", &i.scribbles_png)
                    .map_err(|e| anyhow::anyhow!(e))?;
                anyhow::ensure!(shape == t, "stored scribble mask has shape {shape}, expected {t}");
                Ok(Interaction {
                    scribbles: ScribbleMask::new(t.height, t.width, base.num_classes(), marks)?,
                    prediction: load_prediction(&i.prediction, t)?,
                })
            })
            .collect::<anyhow::Result<_>>()?;
        let responses = stored
            .responses
            .into_iter()
            .map(|(k, v)| Ok((k, STANDARD.decode(v)?)))
            .collect::<anyhow::Result<_>>()?;
        Ok(Self {
            id: stored.id,
            placement: Placement::new(stored.source, t),
            image,
            base,
            history,
            responses,
        })
    }
}
