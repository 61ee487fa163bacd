//! Simulated interactive editing, the from-scratch baseline, latency and
//! the K-sweep experiment.
//!
//! [`Editor`] is the single code path that turns an image, a previous
//! prediction and a scribble mask into an updated prediction. Simulation,
//! training-time validation and the HTTP service all go through it.

mod experiment;
mod report;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{LabeledSlice, PatientVolume};
use crate::error::{ensure, Result};
use crate::grid::{DiceCurve, ImageSlice, LabelMap, Prediction, ScribbleMask};
use crate::metrics::{dice, fuse_binary};
use crate::nets::{assemble_auto_input, assemble_inter_input_with, assemble_scratch_input, PredictionEncoding, UNet};
use crate::robot::{RobotUser, RobotUserConfig, ScribbleSource};

pub use experiment::{
    prepare_data, run_k_sweep, run_pipeline, train_base, DataSource, ExperimentConfig, KSweep, PipelineOutput,
    PreparedData,
};
pub use report::{
    curve_rows, read_results_csv, summarize, write_dice_plot_svg, write_results_csv, write_summary_csv, ResultRow,
    SummaryRow,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n_interactions: usize,
    pub robot: RobotUserConfig,
    /// Score the fused foreground (all non-background classes as one) instead of each class.
    pub fused_binary: bool,
    /// Stop once the robot has nothing left to mark. Off for experiments so
    /// every curve has the same length.
    pub stop_when_perfect: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_interactions: 20,
            robot: RobotUserConfig::default(),
            fused_binary: false,
            stop_when_perfect: false,
        }
    }
}

/// autoCNN plus interCNN, evaluated in inference mode.
#[derive(Debug, Clone, Copy)]
pub struct Editor<'a> {
    pub auto: &'a UNet,
    pub inter: &'a UNet,
    pub encoding: PredictionEncoding,
}

impl<'a> Editor<'a> {
    pub fn new(auto: &'a UNet, inter: &'a UNet, encoding: PredictionEncoding) -> Result<Self> {
        let (a, i) = (auto.spec(), inter.spec());
        ensure!(
            a.num_classes == i.num_classes,
            "base network has {} classes, editing network {}",
            a.num_classes,
            i.num_classes
        );
        Ok(Self { auto, inter, encoding })
    }

    pub fn num_classes(&self) -> usize {
        self.auto.spec().num_classes
    }

    pub fn base_prediction(&self, image: &ImageSlice) -> Result<Prediction> {
        Ok(self.auto.predict(&[assemble_auto_input(image)])?.remove(0))
    }

    /// One editing update.
    pub fn edit(&self, image: &ImageSlice, previous: &Prediction, scribbles: &ScribbleMask) -> Result<Prediction> {
        let x = assemble_inter_input_with(image, previous, scribbles, self.encoding)?;
        Ok(self.inter.predict(&[x])?.remove(0))
    }
}

/// Network trained from scratch on image + scribbles only.
pub fn scratch_prediction(net: &UNet, image: &ImageSlice, scribbles: &ScribbleMask) -> Result<Prediction> {
    Ok(net.predict(&[assemble_scratch_input(image, scribbles)?])?.remove(0))
}

/// Classes a curve reports: every foreground class, or the single fused one.
pub fn curve_classes(num_classes: usize, fused_binary: bool) -> Vec<u8> {
    if fused_binary {
        vec![1]
    } else {
        (1..num_classes as u8).collect()
    }
}

/// Dice per reported class, in the order of [`curve_classes`].
pub fn curve_scores(gt: &LabelMap, pred: &LabelMap, classes: &[u8], fused_binary: bool) -> Result<Vec<f64>> {
    if fused_binary {
        Ok(vec![dice(&fuse_binary(gt), &fuse_binary(pred), 1)?])
    } else {
        classes.iter().map(|&c| dice(gt, pred, c)).collect()
    }
}

/// Run the editing loop against a robot user.
///
/// Entry 0 scores the base prediction, entry `i` the prediction after `i`
/// editing updates. Each scribble mask is drawn against the immediately
/// preceding prediction.
pub fn simulate_editing(
    image: &ImageSlice,
    gt: &LabelMap,
    editor: &Editor<'_>,
    cfg: &SimulationConfig,
    robot: &mut dyn ScribbleSource,
) -> Result<DiceCurve> {
    ensure!(
        gt.num_classes() == editor.num_classes(),
        "ground truth has {} classes, networks {}",
        gt.num_classes(),
        editor.num_classes()
    );
    let classes = curve_classes(gt.num_classes(), cfg.fused_binary);
    let mut curve = DiceCurve::new(classes.clone(), 0);
    let mut current = editor.base_prediction(image)?;
    let mut labels = current.argmax();
    curve.push(curve_scores(gt, &labels, &classes, cfg.fused_binary)?);
    for _ in 0..cfg.n_interactions {
        let scribbles = robot.scribble(&labels, gt)?;
        if cfg.stop_when_perfect && scribbles.is_empty() {
            break;
        }
        current = editor.edit(image, &current, &scribbles)?;
        labels = current.argmax();
        curve.push(curve_scores(gt, &labels, &classes, cfg.fused_binary)?);
    }
    Ok(curve)
}

/// Baseline without a base prediction: the first scribbles are drawn against
/// an all-background segmentation and the curve starts at interaction 1.
pub fn simulate_from_scratch_baseline(
    image: &ImageSlice,
    gt: &LabelMap,
    net: &UNet,
    cfg: &SimulationConfig,
    robot: &mut dyn ScribbleSource,
) -> Result<DiceCurve> {
    ensure!(
        gt.num_classes() == net.spec().num_classes,
        "ground truth has {} classes, network {}",
        gt.num_classes(),
        net.spec().num_classes
    );
    let classes = curve_classes(gt.num_classes(), cfg.fused_binary);
    let mut curve = DiceCurve::new(classes.clone(), 1);
    let mut labels = LabelMap::filled(gt.height(), gt.width(), gt.num_classes(), 0);
    for _ in 0..cfg.n_interactions {
        let scribbles = robot.scribble(&labels, gt)?;
        if cfg.stop_when_perfect && scribbles.is_empty() && !curve.is_empty() {
            break;
        }
        labels = scratch_prediction(net, image, &scribbles)?.argmax();
        curve.push(curve_scores(gt, &labels, &classes, cfg.fused_binary)?);
    }
    Ok(curve)
}

/// A test slice with its provenance.
#[derive(Debug, Clone, Copy)]
pub struct EvalCase<'a> {
    pub patient_id: &'a str,
    pub slice_idx: usize,
    pub slice: &'a LabeledSlice,
}

pub fn eval_cases<'a>(volumes: &[&'a PatientVolume]) -> Vec<EvalCase<'a>> {
    volumes
        .iter()
        .flat_map(|v| {
            v.slices.iter().enumerate().map(|(slice_idx, slice)| EvalCase {
                patient_id: &v.patient_id,
                slice_idx,
                slice,
            })
        })
        .collect()
}

/// Robot seed for case `index`: each case gets its own stream so cases are
/// independent of evaluation order.
pub fn case_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn evaluate_editing(cases: &[EvalCase<'_>], editor: &Editor<'_>, cfg: &SimulationConfig) -> Result<Vec<DiceCurve>> {
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut robot = RobotUser::with_seed(&cfg.robot, case_seed(cfg.robot.rng_seed, i))?;
            simulate_editing(&case.slice.image, &case.slice.labels, editor, cfg, &mut robot)
        })
        .collect()
}

pub fn evaluate_scratch(cases: &[EvalCase<'_>], net: &UNet, cfg: &SimulationConfig) -> Result<Vec<DiceCurve>> {
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut robot = RobotUser::with_seed(&cfg.robot, case_seed(cfg.robot.rng_seed, i))?;
            simulate_from_scratch_baseline(&case.slice.image, &case.slice.labels, net, cfg, &mut robot)
        })
        .collect()
}

/// Mean Dice over cases and reported classes at each interaction covered by every curve.
pub fn mean_curve(curves: &[DiceCurve]) -> Vec<(usize, f64)> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    first
        .interactions()
        .map_while(|i| {
            let mut sum = 0.0;
            for c in curves {
                sum += c.mean_at(i)?;
            }
            Some((i, sum / curves.len() as f64))
        })
        .collect()
}

/// Mean foreground Dice of the base network's predictions.
pub fn base_dice(cases: &[EvalCase<'_>], net: &UNet, fused_binary: bool) -> Result<f64> {
    ensure!(!cases.is_empty(), "no cases to score");
    let mut sum = 0.0;
    for case in cases {
        let gt = &case.slice.labels;
        let labels = net.predict(&[assemble_auto_input(&case.slice.image)])?[0].argmax();
        let classes = curve_classes(gt.num_classes(), fused_binary);
        let s = curve_scores(gt, &labels, &classes, fused_binary)?;
        sum += s.iter().sum::<f64>() / s.len() as f64;
    }
    Ok(sum / cases.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub times_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyReport {
    pub fn from_times(times_ms: Vec<f64>) -> Self {
        let n = times_ms.len() as f64;
        let mean = times_ms.iter().sum::<f64>() / n;
        let var = times_ms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
            min_ms: times_ms.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: times_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            times_ms,
        }
    }
}

pub const MIN_LATENCY_TRIALS: usize = 10;

/// Wall-clock time of single-image editing updates: input assembly, the
/// forward pass and the argmax. `warmup` runs are discarded.
pub fn benchmark_latency(
    inter: &UNet,
    encoding: PredictionEncoding,
    image: &ImageSlice,
    previous: &Prediction,
    scribbles: &ScribbleMask,
    n_trials: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    ensure!(n_trials >= MIN_LATENCY_TRIALS, "need at least {MIN_LATENCY_TRIALS} trials, got {n_trials}");
    let run = || -> Result<f64> {
        let start = Instant::now();
        let x = assemble_inter_input_with(image, previous, scribbles, encoding)?;
        let labels = inter.predict(&[x])?[0].argmax();
        std::hint::black_box(labels);
        Ok((start.elapsed().as_secs_f64() * 1e3).max(f64::MIN_POSITIVE))
    };
    for _ in 0..warmup {
        run()?;
    }
    let times = (0..n_trials).map(|_| run()).collect::<Result<Vec<_>>>()?;
    Ok(LatencyReport::from_times(times))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{NetKind, NetworkSpec};

    fn nets(c: usize) -> (UNet, UNet) {
        let spec = |kind: NetKind| NetworkSpec {
            base_channels: 2,
            in_channels: kind.in_channels(c),
            num_classes: c,
            ..Default::default()
        };
        (UNet::new(spec(NetKind::Auto), 1).unwrap(), UNet::new(spec(NetKind::Inter), 2).unwrap())
    }

    fn case() -> (ImageSlice, LabelMap) {
        let img = ImageSlice::new(16, 16, (0..256).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let gt = LabelMap::new(16, 16, 3, (0..256).map(|i| ((i / 16) % 3) as u8).collect()).unwrap();
        (img, gt)
    }

    /// Records every call and returns an empty mask.
    struct Recorder(Vec<LabelMap>);

    impl ScribbleSource for Recorder {
        fn scribble(&mut self, prediction: &LabelMap, gt: &LabelMap) -> Result<ScribbleMask> {
            self.0.push(prediction.clone());
            Ok(ScribbleMask::empty(gt.height(), gt.width(), gt.num_classes()))
        }
    }

    #[test]
    fn curve_lengths_and_entry_zero_match_base_dice() {
        let (auto, inter) = nets(3);
        let editor = Editor::new(&auto, &inter, PredictionEncoding::Probabilities).unwrap();
        let (img, gt) = case();
        for n in [0, 1, 4] {
            let cfg = SimulationConfig {
                n_interactions: n,
                ..Default::default()
            };
            let mut robot = RobotUser::new(cfg.robot.clone()).unwrap();
            let curve = simulate_editing(&img, &gt, &editor, &cfg, &mut robot).unwrap();
            assert_eq!(curve.len(), n + 1);
            let base = editor.base_prediction(&img).unwrap().argmax();
            for c in 1..3u8 {
                assert_eq!(curve.get(0, c).unwrap(), dice(&gt, &base, c).unwrap());
            }
            assert!(curve.per_iteration.iter().flatten().all(|d| (0.0..=1.0).contains(d)));
        }
    }

    #[test]
    fn scribbles_are_drawn_against_the_previous_output() {
        let (auto, inter) = nets(3);
        let editor = Editor::new(&auto, &inter, PredictionEncoding::Probabilities).unwrap();
        let (img, gt) = case();
        let cfg = SimulationConfig {
            n_interactions: 3,
            ..Default::default()
        };
        let mut rec = Recorder(Vec::new());
        simulate_editing(&img, &gt, &editor, &cfg, &mut rec).unwrap();
        let mut expected = vec![editor.base_prediction(&img).unwrap()];
        for _ in 0..2 {
            let scr = ScribbleMask::empty(16, 16, 3);
            let next = editor.edit(&img, expected.last().unwrap(), &scr).unwrap();
            expected.push(next);
        }
        let expected: Vec<LabelMap> = expected.iter().map(Prediction::argmax).collect();
        assert_eq!(rec.0, expected);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (auto, inter) = nets(3);
        let editor = Editor::new(&auto, &inter, PredictionEncoding::Probabilities).unwrap();
        let (img, gt) = case();
        let slice = LabeledSlice::new(img, gt).unwrap();
        let cases = vec![
            EvalCase {
                patient_id: "p",
                slice_idx: 0,
                slice: &slice,
            };
            2
        ];
        let cfg = SimulationConfig {
            n_interactions: 3,
            ..Default::default()
        };
        let a = evaluate_editing(&cases, &editor, &cfg).unwrap();
        assert_eq!(a, evaluate_editing(&cases, &editor, &cfg).unwrap());
        assert_eq!(mean_curve(&a).len(), 4);
    }

    #[test]
    fn scratch_curve_starts_at_one() {
        let spec = NetworkSpec {
            base_channels: 2,
            in_channels: NetKind::Scratch.in_channels(3),
            num_classes: 3,
            ..Default::default()
        };
        let net = UNet::new(spec, 3).unwrap();
        let (img, gt) = case();
        for n in [0, 3] {
            let cfg = SimulationConfig {
                n_interactions: n,
                ..Default::default()
            };
            let mut robot = RobotUser::new(cfg.robot.clone()).unwrap();
            let curve = simulate_from_scratch_baseline(&img, &gt, &net, &cfg, &mut robot).unwrap();
            assert_eq!(curve.len(), n);
            assert_eq!(curve.first_interaction, 1);
        }
    }

    #[test]
    fn fused_scoring_reports_one_class() {
        let (auto, inter) = nets(3);
        let editor = Editor::new(&auto, &inter, PredictionEncoding::Probabilities).unwrap();
        let (img, gt) = case();
        let cfg = SimulationConfig {
            n_interactions: 1,
            fused_binary: true,
            ..Default::default()
        };
        let mut robot = RobotUser::new(cfg.robot.clone()).unwrap();
        let curve = simulate_editing(&img, &gt, &editor, &cfg, &mut robot).unwrap();
        assert_eq!(curve.class_ids, vec![1]);
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let (auto, _) = nets(3);
        let (_, inter) = nets(2);
        assert!(Editor::new(&auto, &inter, PredictionEncoding::Probabilities).is_err());
    }

    #[test]
    fn latency_report_statistics() {
        let (_, inter) = nets(3);
        let (img, _) = case();
        let prev = Prediction::uniform(16, 16, 3);
        let scr = ScribbleMask::empty(16, 16, 3);
        let r = benchmark_latency(&inter, PredictionEncoding::Probabilities, &img, &prev, &scr, 10, 1).unwrap();
        assert_eq!(r.times_ms.len(), 10);
        assert!(r.times_ms.iter().all(|&t| t > 0.0));
        assert!(r.min_ms <= r.mean_ms && r.mean_ms <= r.max_ms);
        assert!(benchmark_latency(&inter, PredictionEncoding::Probabilities, &img, &prev, &scr, 9, 0).is_err());
    }
}
