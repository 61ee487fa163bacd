//! Subcommand implementations shared by the `intercnn` binary and tests.
//!
//! Every command takes an [`ExperimentConfig`] (TOML or JSON, defaults when
//! absent) and a seed, so a checkpoint directory plus the config that produced
//! it is enough to rerun any later stage deterministically.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use intercnn_core::dataio::png_codec::{decode_gray, decode_intensities, encode_gray8};
use intercnn_core::dataio::{generate_synthetic, normalize, write_png_pairs, DatasetFormat, Placement};
use intercnn_core::evaluation::{
    base_dice, benchmark_latency, curve_classes, curve_rows, curve_scores, eval_cases, evaluate_editing,
    evaluate_scratch, mean_curve, prepare_data, run_pipeline, summarize, write_dice_plot_svg, write_results_csv,
    write_summary_csv, DataSource, Editor, ExperimentConfig, LatencyReport, PreparedData,
};
use intercnn_core::grid::{DiceCurve, ImageSlice, LabelMap, Prediction, ScribbleMask, Shape};
use intercnn_core::nets::{Checkpoint, NetKind, PredictionEncoding, UNet};
use intercnn_core::robot::{RobotUser, ScribbleSource};
use intercnn_core::training::{
    train_autocnn, train_intercnn, train_scratch, StepRecord, TrainObserver, Trained, ValidationRecord,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::service::{AUTO_CHECKPOINT, INTER_CHECKPOINT, SCRATCH_CHECKPOINT};

/// Read a config file by extension; `None` gives the defaults.
pub fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text)?,
        _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    };
    Ok(cfg)
}

/// Logs losses and validation Dice at a fixed cadence.
struct Progress {
    label: &'static str,
    every: u64,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, r: &StepRecord) {
        if r.step.is_multiple_of(self.every) {
            tracing::info!(net = self.label, step = r.step, batch = r.batch, k = r.k, loss = r.loss, "train");
        }
    }

    fn on_validation(&mut self, r: &ValidationRecord) {
        tracing::info!(net = self.label, step = r.step, dice = r.dice, "validation");
    }
}

fn checkpoint(kind: NetKind, trained: &Trained, data: &PreparedData, encoding: PredictionEncoding) -> Checkpoint {
    Checkpoint {
        kind,
        network: trained.network.clone(),
        normalization: data.stats.clone(),
        patch_size: data.patch_size,
        encoding,
    }
}

fn save_run(dir: &Path, file: &str, ck: &Checkpoint, trained: &Trained) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    ck.save(dir.join(file))?;
    let stem = file.trim_end_matches(".ckpt");
    trained.record.write_jsonl(dir.join(format!("{stem}_steps.jsonl")))?;
    trained.record.write_summary(dir.join(format!("{stem}_run.json")))?;
    Ok(())
}

fn load_kind(dir: &Path, file: &str, kind: NetKind) -> anyhow::Result<Checkpoint> {
    let ck = Checkpoint::load(dir.join(file))?;
    if ck.kind != kind {
        bail!("{file} holds a {:?} network, expected {kind:?}", ck.kind);
    }
    Ok(ck)
}

/// Write the synthetic dataset as `<out>/<patient>/<slice>_{image,label}.png`.
pub fn make_synthetic(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<usize> {
    let DataSource::Synthetic(s) = &cfg.data else {
        bail!("make-synthetic needs a synthetic data source");
    };
    let volumes = generate_synthetic(s);
    write_png_pairs(out, &volumes)?;
    Ok(volumes.len())
}

pub fn train_auto(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Trained> {
    let data = prepare_data(cfg)?;
    let mut progress = Progress { label: "autocnn", every: 50 };
    let trained = train_autocnn(&data.g1(), &data.g2(), &cfg.network, &cfg.auto, &mut progress)?;
    let ck = checkpoint(NetKind::Auto, &trained, &data, PredictionEncoding::default());
    save_run(out, AUTO_CHECKPOINT, &ck, &trained)?;
    data.splits.save(out.join("splits.json"))?;
    Ok(trained)
}

/// Train interCNN on top of `<dir>/autocnn.ckpt`, or the from-scratch
/// baseline when `scratch` is set.
pub fn train_inter(cfg: &ExperimentConfig, dir: &Path, scratch: bool) -> anyhow::Result<Trained> {
    let data = prepare_data(cfg)?;
    let mut progress = Progress {
        label: if scratch { "scratch" } else { "intercnn" },
        every: 50,
    };
    if scratch {
        let trained = train_scratch(&data.g1_g2(), &data.g3(), &cfg.network, &cfg.inter, &cfg.robot, &mut progress)?;
        let ck = checkpoint(NetKind::Scratch, &trained, &data, cfg.inter.encoding);
        save_run(dir, SCRATCH_CHECKPOINT, &ck, &trained)?;
        return Ok(trained);
    }
    let auto = load_kind(dir, AUTO_CHECKPOINT, NetKind::Auto)?;
    let trained = train_intercnn(
        &auto.network,
        &data.g1_g2(),
        &data.g3(),
        &cfg.network,
        &cfg.inter,
        &cfg.robot,
        &mut progress,
    )?;
    let ck = checkpoint(NetKind::Inter, &trained, &data, cfg.inter.encoding);
    save_run(dir, INTER_CHECKPOINT, &ck, &trained)?;
    Ok(trained)
}

fn write_reports(out: &Path, title: &str, rows: &[intercnn_core::evaluation::ResultRow]) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let summary = summarize(rows);
    write_results_csv(out.join("results.csv"), rows)?;
    write_summary_csv(out.join("summary.csv"), &summary)?;
    let mut series: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    for s in &summary {
        let name = format!("{} K={}", s.experiment, s.k);
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push((s.interaction, s.mean_dice)),
            None => series.push((name, vec![(s.interaction, s.mean_dice)])),
        }
    }
    write_dice_plot_svg(out.join("dice.svg"), title, &series)?;
    Ok(())
}

/// Simulated editing of the test group with the checkpoints in `dir`.
pub fn evaluate(cfg: &ExperimentConfig, dir: &Path, out: &Path) -> anyhow::Result<Vec<(usize, f64)>> {
    let data = prepare_data(cfg)?;
    let cases = eval_cases(&data.g4());
    let auto = load_kind(dir, AUTO_CHECKPOINT, NetKind::Auto)?;
    let inter = load_kind(dir, INTER_CHECKPOINT, NetKind::Inter)?;
    let editor = Editor::new(&auto.network, &inter.network, inter.encoding)?;
    let curves = evaluate_editing(&cases, &editor, &cfg.simulation)?;
    let mut rows: Vec<_> = cases
        .iter()
        .zip(&curves)
        .flat_map(|(case, curve)| curve_rows("intercnn", cfg.inter.k_interactions, case, curve))
        .collect();
    let scratch_path = dir.join(SCRATCH_CHECKPOINT);
    if scratch_path.exists() {
        let scratch = load_kind(dir, SCRATCH_CHECKPOINT, NetKind::Scratch)?;
        let curves = evaluate_scratch(&cases, &scratch.network, &cfg.simulation)?;
        for (case, curve) in cases.iter().zip(&curves) {
            rows.extend(curve_rows("from_scratch", cfg.inter.k_interactions, case, curve));
        }
    }
    write_reports(out, "Simulated editing on the test group", &rows)?;
    Ok(mean_curve(&curves))
}

/// Whole pipeline: autoCNN, one interCNN per K, optional baseline, reports.
/// Checkpoints go to `checkpoints` as `autocnn.ckpt` and `intercnn_k<K>.ckpt`.
pub fn k_sweep(cfg: &ExperimentConfig, out: &Path, checkpoints: &Path) -> anyhow::Result<f64> {
    let result = run_pipeline(cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::create_dir_all(checkpoints)?;
    let ck = |kind, network: &UNet| Checkpoint {
        kind,
        network: network.clone(),
        normalization: result.data_stats.clone(),
        patch_size: cfg.patch_size,
        encoding: cfg.inter.encoding,
    };
    ck(NetKind::Auto, &result.auto.network).save(checkpoints.join(AUTO_CHECKPOINT))?;
    for (k, trained) in &result.sweep.models {
        ck(NetKind::Inter, &trained.network).save(checkpoints.join(format!("intercnn_k{k}.ckpt")))?;
    }
    if let Some(scratch) = &result.scratch {
        ck(NetKind::Scratch, &scratch.network).save(checkpoints.join(SCRATCH_CHECKPOINT))?;
    }
    let data_note = serde_json::json!({
        "normalization": result.data_stats,
        "auto_test_dice": result.auto_test_dice,
        "config": cfg,
    });
    std::fs::write(out.join("run.json"), serde_json::to_vec_pretty(&data_note)?)?;
    write_reports(out, "Dice per interaction by training K", &result.rows)?;
    for (k, trained) in &result.sweep.models {
        trained.record.write_jsonl(out.join(format!("intercnn_k{k}_steps.jsonl")))?;
    }
    result.auto.record.write_jsonl(out.join("autocnn_steps.jsonl"))?;
    Ok(result.auto_test_dice)
}

/// Time single interCNN updates on a random `size` image.
pub fn latency(dir: Option<&Path>, cfg: &ExperimentConfig, size: Shape, trials: usize, seed: u64) -> anyhow::Result<LatencyReport> {
    let (inter, encoding, c): (UNet, _, _) = match dir {
        Some(d) => {
            let ck = load_kind(d, INTER_CHECKPOINT, NetKind::Inter)?;
            let c = ck.network.spec().num_classes;
            (ck.network, ck.encoding, c)
        }
        None => {
            // Untrained weights time the same arithmetic.
            let c = 3;
            let spec = intercnn_core::training::spec_for(NetKind::Inter, &cfg.network, c);
            (UNet::new(spec, seed)?, PredictionEncoding::default(), c)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = ImageSlice::new(size.height, size.width, (0..size.len()).map(|_| rng.gen::<f32>()).collect())?;
    let previous = Prediction::uniform(size.height, size.width, c);
    let gt = LabelMap::new(
        size.height,
        size.width,
        c,
        (0..size.len()).map(|_| rng.gen_range(0..c as u8)).collect(),
    )?;
    let scribbles: ScribbleMask = RobotUser::with_seed(&cfg.robot, seed)?.scribble(&previous.argmax(), &gt)?;
    Ok(benchmark_latency(&inter, encoding, &image, &previous, &scribbles, trials, 2)?)
}

/// Per-interaction Dice of one simulated editing session, plus the label
/// maps on the input grid (base prediction first).
pub struct SimulationTrace {
    pub curve: DiceCurve,
    pub masks: Vec<LabelMap>,
}

/// Simulate editing a single image/label pair with the checkpoints in `dir`.
/// The image is normalized and fitted exactly as the service does, and Dice
/// is measured on the original grid.
pub fn simulate(cfg: &ExperimentConfig, dir: &Path, image_png: &Path, label_png: &Path) -> anyhow::Result<SimulationTrace> {
    let auto = load_kind(dir, AUTO_CHECKPOINT, NetKind::Auto)?;
    let inter = load_kind(dir, INTER_CHECKPOINT, NetKind::Inter)?;
    let c = auto.network.spec().num_classes;
    let raw = decode_intensities(&std::fs::read(image_png).with_context(|| image_png.display().to_string())?)?;
    let gray = decode_gray(&std::fs::read(label_png).with_context(|| label_png.display().to_string())?)?;
    let gt = LabelMap::new(gray.height, gray.width, c, gray.to_u8()?)?;
    anyhow::ensure!(
        gt.shape() == raw.shape(),
        "label is {}x{}, image {}x{}",
        gt.height(),
        gt.width(),
        raw.height(),
        raw.width()
    );
    let patch = auto.patch_size;
    let placement = Placement::new(raw.shape(), patch);
    let image = ImageSlice::new(patch.height, patch.width, placement.fit(normalize(&raw, &auto.normalization).data(), 0.0))?;
    let fitted_gt = LabelMap::new(patch.height, patch.width, c, placement.fit(gt.labels(), 0))?;
    let editor = Editor::new(&auto.network, &inter.network, inter.encoding)?;
    let mut robot = RobotUser::new(cfg.simulation.robot.clone())?;
    let fused = cfg.simulation.fused_binary;
    let classes = curve_classes(c, fused);
    let on_input_grid = |p: &Prediction| -> anyhow::Result<LabelMap> {
        Ok(LabelMap::new(gt.height(), gt.width(), c, placement.unfit(p.argmax().labels(), 0))?)
    };

    let mut prediction = editor.base_prediction(&image)?;
    let mut masks = vec![on_input_grid(&prediction)?];
    let mut curve = DiceCurve::new(classes.clone(), 0);
    curve.push(curve_scores(&gt, &masks[0], &classes, fused)?);
    for _ in 0..cfg.simulation.n_interactions {
        let scribbles = robot.scribble(&prediction.argmax(), &fitted_gt)?;
        if cfg.simulation.stop_when_perfect && scribbles.is_empty() {
            break;
        }
        prediction = editor.edit(&image, &prediction, &scribbles)?;
        let labels = on_input_grid(&prediction)?;
        curve.push(curve_scores(&gt, &labels, &classes, fused)?);
        masks.push(labels);
    }
    Ok(SimulationTrace { curve, masks })
}

/// Write `<out>/interaction_<i>.png` with raw class ids as gray values.
pub fn write_masks(masks: &[LabelMap], out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    for (i, m) in masks.iter().enumerate() {
        std::fs::write(
            out.join(format!("interaction_{i:02}.png")),
            encode_gray8(m.width(), m.height(), m.labels())?,
        )?;
    }
    Ok(())
}

/// Base Dice of `autocnn.ckpt` on the test group.
pub fn auto_test_dice(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<f64> {
    let data = prepare_data(cfg)?;
    let auto = load_kind(dir, AUTO_CHECKPOINT, NetKind::Auto)?;
    Ok(base_dice(&eval_cases(&data.g4()), &auto.network, cfg.simulation.fused_binary)?)
}

pub fn parse_duration_secs(s: &str) -> Result<Duration, String> {
    s.parse::<u64>().map(Duration::from_secs).map_err(|e| format!("{s:?}: {e}"))
}

pub fn data_directory(root: PathBuf, format: DatasetFormat) -> DataSource {
    DataSource::Directory { root, format }
}
