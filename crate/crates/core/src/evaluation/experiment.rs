//! End-to-end experiment runner: data preparation, base training, the K
//! sweep and the from-scratch baseline.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::report::{curve_rows, summarize, ResultRow, SummaryRow};
use super::{base_dice, eval_cases, evaluate_editing, evaluate_scratch, Editor, SimulationConfig};
use crate::dataio::{
    compute_normalization, fit_slice, generate_synthetic, load_dataset, make_splits, normalize_volumes, DatasetFormat,
    NormalizationStats, PatientVolume, SplitSpec, SyntheticConfig, DEFAULT_SPLIT_SIZES,
};
use crate::error::{ensure, Result};
use crate::grid::Shape;
use crate::nets::NetworkSpec;
use crate::robot::RobotUserConfig;
use crate::training::{train_autocnn, train_intercnn, train_scratch, Trained, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Directory { root: PathBuf, format: DatasetFormat },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Every slice is center-cropped or zero-padded to this size.
    pub patch_size: Shape,
    pub split_sizes: [usize; 4],
    pub split_seed: u64,
    /// Width, dropout and normalization of all networks; channel counts are derived.
    pub network: NetworkSpec,
    pub auto: TrainingConfig,
    pub inter: TrainingConfig,
    pub robot: RobotUserConfig,
    pub simulation: SimulationConfig,
    pub k_values: Vec<usize>,
    /// Also train and evaluate the from-scratch baseline (with `inter.k_interactions`).
    pub scratch_baseline: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let size = 48;
        Self {
            data: DataSource::Synthetic(SyntheticConfig {
                height: size,
                width: size,
                ..Default::default()
            }),
            patch_size: Shape::new(size, size),
            split_sizes: DEFAULT_SPLIT_SIZES,
            split_seed: 0,
            network: NetworkSpec {
                base_channels: 8,
                ..Default::default()
            },
            auto: TrainingConfig {
                max_steps: 1000,
                optimizer: crate::training::AdamConfig {
                    learning_rate: 1e-3,
                    ..Default::default()
                },
                ..Default::default()
            },
            inter: TrainingConfig {
                optimizer: crate::training::AdamConfig {
                    learning_rate: 1e-3,
                    ..Default::default()
                },
                ..Default::default()
            },
            robot: RobotUserConfig::default(),
            simulation: SimulationConfig::default(),
            k_values: vec![1, 5, 10, 15],
            scratch_baseline: false,
        }
    }
}

impl ExperimentConfig {
    /// Derive every training, robot and simulation seed from one value.
    /// The dataset and split are left alone so runs with different seeds
    /// see the same patients.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.auto.data_seed = seed;
        self.auto.init_seed = seed;
        self.inter.data_seed = seed.wrapping_add(1);
        self.inter.init_seed = seed.wrapping_add(1);
        self.robot.rng_seed = seed.wrapping_add(2);
        self.simulation.robot.rng_seed = seed.wrapping_add(3);
        self
    }
}

/// Normalized, patch-fitted volumes with their split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub volumes: Vec<PatientVolume>,
    pub splits: SplitSpec,
    pub stats: NormalizationStats,
    pub num_classes: usize,
    pub patch_size: Shape,
}

impl PreparedData {
    fn group(&self, ids: &[&[String]]) -> Vec<&PatientVolume> {
        ids.iter()
            .flat_map(|g| {
                self.splits
                    .select(g, &self.volumes)
                    .expect("split validated against these volumes")
            })
            .collect()
    }

    /// autoCNN training data.
    pub fn g1(&self) -> Vec<&PatientVolume> {
        self.group(&[&self.splits.g1])
    }

    /// autoCNN validation data.
    pub fn g2(&self) -> Vec<&PatientVolume> {
        self.group(&[&self.splits.g2])
    }

    /// interCNN training data.
    pub fn g1_g2(&self) -> Vec<&PatientVolume> {
        self.group(&[&self.splits.g1, &self.splits.g2])
    }

    /// interCNN model selection.
    pub fn g3(&self) -> Vec<&PatientVolume> {
        self.group(&[&self.splits.g3])
    }

    /// Test data.
    pub fn g4(&self) -> Vec<&PatientVolume> {
        self.group(&[&self.splits.g4])
    }
}

/// Load or generate the data, fit it to the patch size, split by patient
/// and normalize with statistics from the base network's training group.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let raw = match &cfg.data {
        DataSource::Synthetic(s) => generate_synthetic(s),
        DataSource::Directory { root, format } => load_dataset(root, *format, None)?,
    };
    ensure!(!raw.is_empty(), "dataset is empty");
    let fitted: Vec<PatientVolume> = raw
        .into_iter()
        .map(|v| PatientVolume {
            patient_id: v.patient_id,
            slices: v.slices.iter().map(|s| fit_slice(s, cfg.patch_size)).collect(),
        })
        .collect();
    let ids: Vec<String> = fitted.iter().map(|v| v.patient_id.clone()).collect();
    let splits = make_splits(&ids, cfg.split_sizes, cfg.split_seed)?;
    let stats = compute_normalization(splits.select(&splits.g1, &fitted)?)?;
    let volumes = normalize_volumes(&fitted, &stats);
    let num_classes = volumes.iter().map(PatientVolume::num_classes).max().unwrap_or(2);
    Ok(PreparedData {
        volumes,
        splits,
        stats,
        num_classes,
        patch_size: cfg.patch_size,
    })
}

pub fn train_base(data: &PreparedData, cfg: &ExperimentConfig) -> Result<Trained> {
    train_autocnn(&data.g1(), &data.g2(), &cfg.network, &cfg.auto, &mut ())
}

#[derive(Debug, Clone)]
pub struct KSweep {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub models: Vec<(usize, Trained)>,
}

/// Train one interCNN per K on the same data and seeds, then simulate
/// editing on the test group.
pub fn run_k_sweep(data: &PreparedData, auto: &Trained, cfg: &ExperimentConfig) -> Result<KSweep> {
    ensure!(!cfg.k_values.is_empty(), "k_values is empty");
    let cases = eval_cases(&data.g4());
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for &k in &cfg.k_values {
        let inter_cfg = TrainingConfig {
            k_interactions: k,
            ..cfg.inter.clone()
        };
        let inter = train_intercnn(
            &auto.network,
            &data.g1_g2(),
            &data.g3(),
            &cfg.network,
            &inter_cfg,
            &cfg.robot,
            &mut (),
        )?;
        let editor = Editor::new(&auto.network, &inter.network, inter_cfg.encoding)?;
        let curves = evaluate_editing(&cases, &editor, &cfg.simulation)?;
        for (case, curve) in cases.iter().zip(&curves) {
            rows.extend(curve_rows("k_sweep", k, case, curve));
        }
        models.push((k, inter));
    }
    Ok(KSweep {
        summary: summarize(&rows),
        rows,
        models,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub data_stats: NormalizationStats,
    pub auto: Trained,
    /// Mean foreground Dice of autoCNN on the test group.
    pub auto_test_dice: f64,
    pub sweep: KSweep,
    pub scratch: Option<Trained>,
    /// Every result row: the K sweep followed by the baseline, if any.
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

/// Prepare data, train autoCNN, run the K sweep and optionally the baseline.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    let data = prepare_data(cfg)?;
    let auto = train_base(&data, cfg)?;
    let cases = eval_cases(&data.g4());
    let auto_test_dice = base_dice(&cases, &auto.network, cfg.simulation.fused_binary)?;
    let sweep = run_k_sweep(&data, &auto, cfg)?;
    let mut rows = sweep.rows.clone();
    let scratch = if cfg.scratch_baseline {
        let net = train_scratch(&data.g1_g2(), &data.g3(), &cfg.network, &cfg.inter, &cfg.robot, &mut ())?;
        let curves = evaluate_scratch(&cases, &net.network, &cfg.simulation)?;
        for (case, curve) in cases.iter().zip(&curves) {
            rows.extend(curve_rows("from_scratch", cfg.inter.k_interactions, case, curve));
        }
        Some(net)
    } else {
        None
    };
    Ok(PipelineOutput {
        data_stats: data.stats,
        auto,
        auto_test_dice,
        summary: summarize(&rows),
        rows,
        sweep,
        scratch,
    })
}
