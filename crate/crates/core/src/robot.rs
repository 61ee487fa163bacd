//! Random robot user.
//!
//! For every class the robot picks one misclassified pixel of that class
//! uniformly at random, places a square window around it and marks every
//! pixel of the window whose ground-truth label is that class. Scribbles of
//! all classes are merged into one [`ScribbleMask`]; everything else keeps the
//! sentinel value `C`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::{check_same_shape, LabelMap, ScribbleMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotUserConfig {
    /// Side length of the square scribble window; odd.
    pub region_size: usize,
    pub rng_seed: u64,
    /// Whether class 0 also receives scribbles.
    pub include_background: bool,
}

impl Default for RobotUserConfig {
    fn default() -> Self {
        Self {
            region_size: 9,
            rng_seed: 0,
            include_background: true,
        }
    }
}

impl RobotUserConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.region_size >= 1 && self.region_size % 2 == 1,
            "region_size must be odd and >= 1, got {}",
            self.region_size
        );
        Ok(())
    }
}

/// One class's scribble: the sampled center and the marked window pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scribble {
    pub class_id: u8,
    pub center: (usize, usize),
    pub pixels: Vec<(usize, usize)>,
}

/// Anything that turns a (prediction, ground truth) pair into scribbles.
///
/// Training and evaluation loops call this once per image per interaction,
/// which lets tests inject recording or scripted users.
pub trait ScribbleSource {
    fn scribble(&mut self, prediction: &LabelMap, ground_truth: &LabelMap) -> Result<ScribbleMask>;
}

impl<S: ScribbleSource + ?Sized> ScribbleSource for &mut S {
    fn scribble(&mut self, prediction: &LabelMap, ground_truth: &LabelMap) -> Result<ScribbleMask> {
        (**self).scribble(prediction, ground_truth)
    }
}

/// The random robot user with its own RNG stream.
#[derive(Debug, Clone)]
pub struct RobotUser {
    config: RobotUserConfig,
    rng: ChaCha8Rng,
}

impl RobotUser {
    pub fn new(config: RobotUserConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(Self { config, rng })
    }

    /// Same configuration with a different seed.
    pub fn with_seed(config: &RobotUserConfig, seed: u64) -> Result<Self> {
        Self::new(RobotUserConfig {
            rng_seed: seed,
            ..config.clone()
        })
    }

    pub fn config(&self) -> &RobotUserConfig {
        &self.config
    }
}

impl ScribbleSource for RobotUser {
    fn scribble(&mut self, prediction: &LabelMap, ground_truth: &LabelMap) -> Result<ScribbleMask> {
        generate_scribbles(prediction, ground_truth, &self.config, &mut self.rng)
    }
}

/// Pixels whose ground truth is `class_id` but whose prediction is not, row-major.
pub fn misclassified_pixels(
    prediction: &LabelMap,
    ground_truth: &LabelMap,
    class_id: u8,
) -> Result<Vec<(usize, usize)>> {
    check_same_shape(ground_truth.shape(), prediction.shape())?;
    let w = ground_truth.width();
    Ok(ground_truth
        .labels()
        .iter()
        .zip(prediction.labels())
        .enumerate()
        .filter(|(_, (&g, &p))| g == class_id && p != class_id)
        .map(|(i, _)| (i / w, i % w))
        .collect())
}

/// Scribble for one class, or `None` when the class has no misclassified pixel.
pub fn scribble_for_class<R: Rng + ?Sized>(
    prediction: &LabelMap,
    ground_truth: &LabelMap,
    class_id: u8,
    config: &RobotUserConfig,
    rng: &mut R,
) -> Result<Option<Scribble>> {
    config.validate()?;
    let wrong = misclassified_pixels(prediction, ground_truth, class_id)?;
    if wrong.is_empty() {
        return Ok(None);
    }
    let center = wrong[rng.gen_range(0..wrong.len())];
    let half = config.region_size / 2;
    let (h, w) = (ground_truth.height(), ground_truth.width());
    // Window clipped at the borders; the center stays where it was drawn.
    let rows = center.0.saturating_sub(half)..(center.0 + half + 1).min(h);
    let cols = center.1.saturating_sub(half)..(center.1 + half + 1).min(w);
    let mut pixels = Vec::with_capacity(config.region_size * config.region_size);
    for r in rows {
        for c in cols.clone() {
            if ground_truth.get(r, c) == class_id {
                pixels.push((r, c));
            }
        }
    }
    Ok(Some(Scribble {
        class_id,
        center,
        pixels,
    }))
}

/// Fresh scribble mask covering all classes for one interaction.
pub fn generate_scribbles<R: Rng + ?Sized>(
    prediction: &LabelMap,
    ground_truth: &LabelMap,
    config: &RobotUserConfig,
    rng: &mut R,
) -> Result<ScribbleMask> {
    check_same_shape(ground_truth.shape(), prediction.shape())?;
    ensure!(
        prediction.num_classes() == ground_truth.num_classes(),
        "prediction has {} classes, ground truth {}",
        prediction.num_classes(),
        ground_truth.num_classes()
    );
    let c = ground_truth.num_classes();
    let mut mask = ScribbleMask::empty(ground_truth.height(), ground_truth.width(), c);
    let first = if config.include_background { 0 } else { 1 };
    for class_id in first..c as u8 {
        if let Some(s) = scribble_for_class(prediction, ground_truth, class_id, config, rng)? {
            for (r, col) in s.pixels {
                mask.mark(r, col, class_id);
            }
        }
    }
    Ok(mask)
}
