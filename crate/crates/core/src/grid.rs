//! Pixel-grid types shared across the crate.
//!
//! All grids are row-major with `(row, col)` addressing and the origin at the
//! top-left corner. Class ids are stored as `u8`; class 0 is background.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Largest supported class count; the scribble sentinel must still fit a `u8`.
pub const MAX_CLASSES: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

pub(crate) fn check_same_shape(a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(a, b));
    }
    Ok(())
}

/// One 2D grayscale slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSlice {
    height: usize,
    width: usize,
    intensities: Vec<f32>,
}

impl ImageSlice {
    pub fn new(height: usize, width: usize, intensities: Vec<f32>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "image must be non-empty, got {height}x{width}");
        if intensities.len() != height * width {
            return Err(Error::shape(
                format!("{} values", height * width),
                format!("{} values", intensities.len()),
            ));
        }
        ensure!(
            intensities.iter().all(|v| v.is_finite()),
            "image intensities must be finite"
        );
        Ok(Self {
            height,
            width,
            intensities,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            intensities: vec![0.0; height * width],
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.intensities
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.intensities[row * self.width + col]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            intensities: self.intensities.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Per-pixel class ids in `[0, C)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "label map must be non-empty");
        ensure!(
            (2..=MAX_CLASSES).contains(&num_classes),
            "num_classes must be in [2, {MAX_CLASSES}], got {num_classes}"
        );
        if labels.len() != height * width {
            return Err(Error::shape(
                format!("{} labels", height * width),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, class_id: u8) -> Self {
        assert!((class_id as usize) < num_classes);
        Self {
            height,
            width,
            num_classes,
            labels: vec![class_id; height * width],
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class_id: u8) {
        assert!((class_id as usize) < self.num_classes);
        self.labels[row * self.width + col] = class_id;
    }

    /// Number of pixels carrying `class_id`.
    pub fn count(&self, class_id: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class_id).count()
    }

    /// Same pixels reinterpreted under a different class count.
    pub fn with_num_classes(&self, num_classes: usize) -> Result<Self> {
        Self::new(self.height, self.width, num_classes, self.labels.clone())
    }
}

/// Per-pixel class probabilities, stored `H x W x C` (class innermost).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    height: usize,
    width: usize,
    num_classes: usize,
    probs: Vec<f32>,
}

impl Prediction {
    /// Tolerance on the per-pixel probability sum.
    pub const SUM_TOLERANCE: f32 = 1e-5;

    pub fn new(height: usize, width: usize, num_classes: usize, probs: Vec<f32>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "prediction must be non-empty");
        ensure!(
            (2..=MAX_CLASSES).contains(&num_classes),
            "num_classes must be in [2, {MAX_CLASSES}], got {num_classes}"
        );
        if probs.len() != height * width * num_classes {
            return Err(Error::shape(
                format!("{} probabilities", height * width * num_classes),
                format!("{} probabilities", probs.len()),
            ));
        }
        for (i, px) in probs.chunks_exact(num_classes).enumerate() {
            let sum: f32 = px.iter().sum();
            ensure!(
                px.iter().all(|&p| p >= 0.0 && p.is_finite()) && (sum - 1.0).abs() <= Self::SUM_TOLERANCE,
                "pixel {i} is not a probability vector (sum {sum})"
            );
        }
        Ok(Self {
            height,
            width,
            num_classes,
            probs,
        })
    }

    /// Internal constructor for softmax outputs that are normalized by construction.
    pub(crate) fn from_softmax(height: usize, width: usize, num_classes: usize, probs: Vec<f32>) -> Self {
        debug_assert_eq!(probs.len(), height * width * num_classes);
        Self {
            height,
            width,
            num_classes,
            probs,
        }
    }

    /// Degenerate prediction putting all mass on the given labels.
    pub fn one_hot(labels: &LabelMap) -> Self {
        let c = labels.num_classes();
        let mut probs = vec![0.0; labels.labels().len() * c];
        for (i, &l) in labels.labels().iter().enumerate() {
            probs[i * c + l as usize] = 1.0;
        }
        Self::from_softmax(labels.height(), labels.width(), c, probs)
    }

    pub fn uniform(height: usize, width: usize, num_classes: usize) -> Self {
        let p = 1.0 / num_classes as f32;
        Self::from_softmax(height, width, num_classes, vec![p; height * width * num_classes])
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.num_classes;
        &self.probs[start..start + self.num_classes]
    }

    /// Hard labels; ties go to the lowest class id.
    pub fn argmax(&self) -> LabelMap {
        crate::metrics::argmax_labels(self)
    }
}

/// Scribble labels in `[0, C]`; the value `C` marks "no scribble".
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScribbleMask {
    height: usize,
    width: usize,
    num_classes: usize,
    marks: Vec<u8>,
}

impl ScribbleMask {
    pub fn new(height: usize, width: usize, num_classes: usize, marks: Vec<u8>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "scribble mask must be non-empty");
        ensure!(
            (2..=MAX_CLASSES).contains(&num_classes),
            "num_classes must be in [2, {MAX_CLASSES}], got {num_classes}"
        );
        if marks.len() != height * width {
            return Err(Error::shape(
                format!("{} marks", height * width),
                format!("{} marks", marks.len()),
            ));
        }
        if let Some(bad) = marks.iter().find(|&&m| m as usize > num_classes) {
            return Err(Error::Contract(format!(
                "scribble value {bad} outside [0, {num_classes}]"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            marks,
        })
    }

    /// A mask without any scribble: every pixel holds the sentinel.
    pub fn empty(height: usize, width: usize, num_classes: usize) -> Self {
        assert!((2..=MAX_CLASSES).contains(&num_classes));
        Self {
            height,
            width,
            num_classes,
            marks: vec![num_classes as u8; height * width],
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sentinel(&self) -> u8 {
        self.num_classes as u8
    }

    pub fn marks(&self) -> &[u8] {
        &self.marks
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.marks[row * self.width + col]
    }

    pub fn mark(&mut self, row: usize, col: usize, class_id: u8) {
        assert!((class_id as usize) < self.num_classes);
        self.marks[row * self.width + col] = class_id;
    }

    pub fn is_empty(&self) -> bool {
        self.marked_count() == 0
    }

    pub fn marked_count(&self) -> usize {
        let s = self.sentinel();
        self.marks.iter().filter(|&&m| m != s).count()
    }

    /// Marked pixels carrying `class_id`.
    pub fn count(&self, class_id: u8) -> usize {
        self.marks.iter().filter(|&&m| m == class_id).count()
    }
}

/// Per-class Dice scores after each interaction.
///
/// `per_iteration[i]` holds the scores after interaction `first_interaction + i`;
/// for editing curves `first_interaction` is 0 and entry 0 scores the base
/// prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceCurve {
    pub class_ids: Vec<u8>,
    pub first_interaction: usize,
    pub per_iteration: Vec<Vec<f64>>,
}

impl DiceCurve {
    pub fn new(class_ids: Vec<u8>, first_interaction: usize) -> Self {
        Self {
            class_ids,
            first_interaction,
            per_iteration: Vec::new(),
        }
    }

    pub fn push(&mut self, scores: Vec<f64>) {
        assert_eq!(scores.len(), self.class_ids.len());
        debug_assert!(scores.iter().all(|d| (0.0..=1.0).contains(d)));
        self.per_iteration.push(scores);
    }

    pub fn len(&self) -> usize {
        self.per_iteration.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_iteration.is_empty()
    }

    /// Interaction numbers covered by the curve.
    pub fn interactions(&self) -> std::ops::Range<usize> {
        self.first_interaction..self.first_interaction + self.len()
    }

    pub fn get(&self, interaction: usize, class_id: u8) -> Option<f64> {
        let row = interaction.checked_sub(self.first_interaction)?;
        let col = self.class_ids.iter().position(|&c| c == class_id)?;
        self.per_iteration.get(row).map(|r| r[col])
    }

    /// Mean over the covered classes at one interaction.
    pub fn mean_at(&self, interaction: usize) -> Option<f64> {
        let row = self.per_iteration.get(interaction.checked_sub(self.first_interaction)?)?;
        Some(row.iter().sum::<f64>() / row.len() as f64)
    }
}
