//! autoCNN training and iterative interaction training of the editing network.
//!
//! Each interaction-training batch runs the editing loop K times: predict,
//! take a cross-entropy step, let the robot user scribble on the new
//! prediction and feed both into the next inner step. The previous
//! prediction enters the next step as plain data unless unrolling is
//! switched on.

mod adam;
mod loss;
mod record;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::augment_batch;
use crate::dataio::{LabeledSlice, PatientVolume};
use crate::error::{ensure, Error, Result};
use crate::evaluation::{base_dice, eval_cases, evaluate_editing, evaluate_scratch, mean_curve, Editor, SimulationConfig};
use crate::grid::{LabelMap, Prediction, ScribbleMask};
use crate::nets::{
    assemble_auto_input, assemble_inter_input_with, assemble_scratch_input, stack_inputs, unstack_predictions, Act,
    InputTensor, NetKind, NetworkSpec, PredictionEncoding, Scalar, Trace, UNet,
};
use crate::robot::{RobotUser, RobotUserConfig, ScribbleSource};

pub use adam::{Adam, AdamConfig};
pub use loss::{cross_entropy_loss, PROB_FLOOR};
pub use record::{RunSeeds, StepRecord, TrainRunRecord, ValidationRecord};

/// Iteration budget of a full-scale run.
pub const FULL_SCALE_MAX_STEPS: usize = 140_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Optimizer steps. Interaction training runs `max_steps / K` batches.
    pub max_steps: usize,
    pub k_interactions: usize,
    pub augment: bool,
    /// Validate once at least this many optimizer steps have passed since the last check.
    pub validate_every: usize,
    /// Interactions simulated by the editing validation probe.
    pub validation_interactions: usize,
    /// Also ask the robot for scribbles after the last inner step, where they go unused.
    pub generate_final_scribbles: bool,
    /// Backpropagate through the previous predictions of the current batch.
    pub unroll: bool,
    pub encoding: PredictionEncoding,
    /// Shuffling and augmentation.
    pub data_seed: u64,
    /// Weight initialization and dropout.
    pub init_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            optimizer: AdamConfig::default(),
            max_steps: 2000,
            k_interactions: 10,
            augment: true,
            validate_every: 250,
            validation_interactions: 5,
            generate_final_scribbles: true,
            unroll: false,
            encoding: PredictionEncoding::Probabilities,
            data_seed: 0,
            init_seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.k_interactions >= 1, "k_interactions must be at least 1");
        ensure!(self.max_steps >= 1, "max_steps must be at least 1");
        ensure!(self.validate_every >= 1, "validate_every must be at least 1");
        ensure!(
            self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite(),
            "learning_rate must be positive"
        );
        ensure!(
            !(self.unroll && self.encoding == PredictionEncoding::HardLabels),
            "unrolling needs the probability encoding; hard labels have no gradient"
        );
        Ok(())
    }

    /// Number of batches `B` of an interaction-training run.
    pub fn batches(&self) -> usize {
        (self.max_steps / self.k_interactions).max(1)
    }
}

/// A trained network and the log of its run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub network: UNet,
    pub record: TrainRunRecord,
}

/// What one inner step of interaction training consumed and produced.
#[derive(Debug)]
pub struct InnerStep<'a> {
    pub batch: usize,
    /// 1-based inner iteration.
    pub k: usize,
    /// Labels of the prediction fed in (the base prediction when `k == 1`).
    pub previous: &'a [LabelMap],
    pub scribbles: &'a [ScribbleMask],
    /// Argmax of the prediction produced by this step.
    pub emitted: &'a [LabelMap],
    pub loss: f64,
}

/// Hooks into a training run, for logging and instrumentation.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_inner_step(&mut self, _step: &InnerStep<'_>) {}
    fn on_validation(&mut self, _record: &ValidationRecord) {}
}

impl TrainObserver for () {}

/// The network spec a given kind needs for `num_classes`, taking width,
/// dropout and normalization from `template`.
pub fn spec_for(kind: NetKind, template: &NetworkSpec, num_classes: usize) -> NetworkSpec {
    NetworkSpec {
        in_channels: kind.in_channels(num_classes),
        num_classes,
        ..template.clone()
    }
}

fn collect_slices<'a>(volumes: &[&'a PatientVolume], what: &str) -> Result<Vec<&'a LabeledSlice>> {
    let slices: Vec<_> = volumes.iter().flat_map(|v| v.slices.iter()).collect();
    ensure!(!slices.is_empty(), "{what} split has no slices");
    let shape = slices[0].image.shape();
    ensure!(
        slices.iter().all(|s| s.image.shape() == shape),
        "{what} slices differ in shape; fit them to one patch size first"
    );
    Ok(slices)
}

fn num_classes_of(slices: &[&LabeledSlice]) -> usize {
    slices.iter().map(|s| s.labels.num_classes()).max().unwrap_or(2)
}

/// Endless epoch-shuffled stream of training slices.
struct BatchSampler<'a> {
    slices: Vec<&'a LabeledSlice>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    augment: bool,
}

impl<'a> BatchSampler<'a> {
    fn new(slices: Vec<&'a LabeledSlice>, seed: u64, augment: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..slices.len()).collect();
        order.shuffle(&mut rng);
        let mut augment_rng = ChaCha8Rng::seed_from_u64(seed);
        augment_rng.set_stream(1);
        Self {
            slices,
            order,
            cursor: 0,
            rng,
            augment_rng,
            augment,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<LabeledSlice> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.slices[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        if self.augment {
            augment_batch(&batch, &mut self.augment_rng)
        } else {
            batch
        }
    }
}

fn dropout_rng(init_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    rng.set_stream(2);
    rng
}

/// Parameter gradients of a step's loss. With a non-empty `history` the
/// gradient also follows the prediction channels of the input back through
/// the earlier steps of the batch, using the current weights throughout.
fn chain_gradients<T: Scalar>(
    net: &UNet<T>,
    trace: &Trace<T>,
    dlogits: &Act<T>,
    history: &[Trace<T>],
    num_classes: usize,
) -> Vec<Vec<T>> {
    if history.is_empty() {
        return net.backward(trace, dlogits);
    }
    let (mut grads, mut dx) = net.backward_with_input(trace, dlogits);
    for earlier in history.iter().rev() {
        let dprobs = dx.split(1).1.split(num_classes).0;
        let dl = loss::softmax_backward(earlier.probs(), &dprobs);
        let (g, d) = net.backward_with_input(earlier, &dl);
        for (acc, part) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        dx = d;
    }
    grads
}

/// One optimizer step on a stacked batch; returns the loss and the trace.
fn train_step(
    net: &mut UNet,
    adam: &mut Adam,
    x: &Act<f32>,
    labels: &[&LabelMap],
    rng: &mut ChaCha8Rng,
    history: &[Trace<f32>],
    num_classes: usize,
) -> Result<(f64, Trace<f32>)> {
    let trace = net.forward_train(x, rng)?;
    let (loss, dlogits) = loss::softmax_cross_entropy(trace.probs(), labels);
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: net.step + 1,
            loss,
        });
    }
    let grads = chain_gradients(net, &trace, &dlogits, history, num_classes);
    net.update_running_stats(&trace);
    adam.step(net.params_mut(), &grads);
    net.step += 1;
    Ok((loss, trace))
}

/// Training-mode cross-entropy of one forward pass and its parameter
/// gradients. Dropout draws come from `rng`, so gradient checks should use a
/// network without dropout or a fixed seed per evaluation.
pub fn loss_and_gradients<T: Scalar, R: rand::Rng + ?Sized>(
    net: &UNet<T>,
    x: &Act<T>,
    labels: &[&LabelMap],
    rng: &mut R,
) -> Result<(f64, Vec<Vec<T>>)> {
    let trace = net.forward_train(x, rng)?;
    let (loss, dlogits) = loss::softmax_cross_entropy(trace.probs(), labels);
    Ok((loss, net.backward(&trace, &dlogits)))
}

/// Track the best validation score and keep a copy of its weights.
struct Selector {
    best: Option<(f64, UNet)>,
}

impl Selector {
    fn offer(&mut self, record: &mut TrainRunRecord, step: u64, dice: f64, net: &UNet) {
        record.validations.push(ValidationRecord { step, dice });
        if self.best.as_ref().is_none_or(|(d, _)| dice > *d) {
            record.best_step = Some(step);
            self.best = Some((dice, net.clone()));
        }
    }
}

/// Conventional training of the base network on image-only input.
/// Validation scores the mean foreground Dice on `val`.
pub fn train_autocnn(
    train: &[&PatientVolume],
    val: &[&PatientVolume],
    template: &NetworkSpec,
    cfg: &TrainingConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Trained> {
    cfg.validate()?;
    let slices = collect_slices(train, "training")?;
    collect_slices(val, "validation")?;
    let num_classes = num_classes_of(&slices);
    let mut net = UNet::new(spec_for(NetKind::Auto, template, num_classes), cfg.init_seed)?;
    let mut adam = Adam::new(cfg.optimizer.clone(), net.params());
    let mut sampler = BatchSampler::new(slices, cfg.data_seed, cfg.augment);
    let mut rng = dropout_rng(cfg.init_seed);
    let cases = eval_cases(val);
    let mut record = TrainRunRecord::new(NetKind::Auto, RunSeeds::new(cfg, None));
    let mut selector = Selector { best: None };
    for step in 0..cfg.max_steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let inputs: Vec<InputTensor> = batch.iter().map(|s| assemble_auto_input(&s.image)).collect();
        let labels: Vec<&LabelMap> = batch.iter().map(|s| &s.labels).collect();
        let x = stack_inputs(&inputs)?;
        let (loss, _) = train_step(&mut net, &mut adam, &x, &labels, &mut rng, &[], num_classes)?;
        let rec = StepRecord {
            step: net.step,
            batch: step,
            k: 0,
            loss,
        };
        observer.on_step(&rec);
        record.steps.push(rec);
        if (step + 1) % cfg.validate_every == 0 || step + 1 == cfg.max_steps {
            let dice = base_dice(&cases, &net, false)?;
            selector.offer(&mut record, net.step, dice, &net);
            observer.on_validation(record.validations.last().expect("just pushed"));
        }
    }
    record.optimizer_steps = adam.steps();
    let (_, network) = selector.best.expect("at least one validation ran");
    Ok(Trained { network, record })
}

/// Where the editing network's first prediction comes from.
#[derive(Debug, Clone, Copy)]
pub enum EditorBase<'a> {
    /// interCNN: a frozen base network supplies `P0`.
    Auto(&'a UNet),
    /// From-scratch baseline: no prediction input, `S0` drawn against all background.
    Scratch,
}

/// Iterative interaction training of an editing network.
///
/// Per batch: `P0` from the base, `S0` from the robot, then for each of the
/// K inner steps predict with the network in training mode, take one
/// optimizer step on the cross-entropy of that prediction and let `robot`
/// scribble on its argmax. `robot` is called `K + 1` times per image and
/// batch (`K` times when final scribbles are switched off). Validation runs
/// a `validation_interactions`-step editing simulation on `val` with its own
/// robot seeded from `val_robot`, and the best-scoring weights are returned.
pub fn train_editor(
    base: EditorBase<'_>,
    train: &[&PatientVolume],
    val: &[&PatientVolume],
    template: &NetworkSpec,
    cfg: &TrainingConfig,
    robot: &mut dyn ScribbleSource,
    val_robot: &RobotUserConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Trained> {
    cfg.validate()?;
    let slices = collect_slices(train, "training")?;
    collect_slices(val, "validation")?;
    let num_classes = num_classes_of(&slices);
    let kind = match base {
        EditorBase::Auto(auto) => {
            ensure!(
                auto.spec().num_classes == num_classes,
                "base network predicts {} classes, training data has {num_classes}",
                auto.spec().num_classes
            );
            NetKind::Inter
        }
        EditorBase::Scratch => NetKind::Scratch,
    };
    let mut net = UNet::new(spec_for(kind, template, num_classes), cfg.init_seed)?;
    let mut adam = Adam::new(cfg.optimizer.clone(), net.params());
    let mut sampler = BatchSampler::new(slices, cfg.data_seed, cfg.augment);
    let mut rng = dropout_rng(cfg.init_seed);
    let cases = eval_cases(val);
    let sim = SimulationConfig {
        n_interactions: cfg.validation_interactions,
        robot: val_robot.clone(),
        fused_binary: false,
        stop_when_perfect: false,
    };
    let mut record = TrainRunRecord::new(kind, RunSeeds::new(cfg, Some(val_robot.rng_seed)));
    let mut selector = Selector { best: None };
    let mut last_validation = 0u64;
    let k_max = cfg.k_interactions;
    let n_batches = cfg.batches();

    for b in 0..n_batches {
        let batch = sampler.next_batch(cfg.batch_size);
        let gts: Vec<&LabelMap> = batch.iter().map(|s| &s.labels).collect();
        let (mut previous, mut previous_labels) = match base {
            EditorBase::Auto(auto) => {
                let inputs: Vec<_> = batch.iter().map(|s| assemble_auto_input(&s.image)).collect();
                let p = auto.predict(&inputs)?;
                let l: Vec<LabelMap> = p.iter().map(Prediction::argmax).collect();
                (Some(p), l)
            }
            EditorBase::Scratch => {
                let l = batch
                    .iter()
                    .map(|s| LabelMap::filled(s.labels.height(), s.labels.width(), num_classes, 0))
                    .collect();
                (None, l)
            }
        };
        let mut scribbles = previous_labels
            .iter()
            .zip(&gts)
            .map(|(p, g)| robot.scribble(p, g))
            .collect::<Result<Vec<_>>>()?;
        let mut history = Vec::new();
        for k in 1..=k_max {
            let inputs = batch
                .iter()
                .enumerate()
                .map(|(i, s)| match &previous {
                    Some(p) => assemble_inter_input_with(&s.image, &p[i], &scribbles[i], cfg.encoding),
                    None => assemble_scratch_input(&s.image, &scribbles[i]),
                })
                .collect::<Result<Vec<_>>>()?;
            let x = stack_inputs(&inputs)?;
            let unrolled: &[Trace<f32>] = if cfg.unroll && previous.is_some() { &history } else { &[] };
            let (loss, trace) = train_step(&mut net, &mut adam, &x, &gts, &mut rng, unrolled, num_classes)?;
            let emitted_probs = unstack_predictions(trace.probs());
            let emitted: Vec<LabelMap> = emitted_probs.iter().map(Prediction::argmax).collect();
            observer.on_inner_step(&InnerStep {
                batch: b,
                k,
                previous: &previous_labels,
                scribbles: &scribbles,
                emitted: &emitted,
                loss,
            });
            let rec = StepRecord {
                step: net.step,
                batch: b,
                k,
                loss,
            };
            observer.on_step(&rec);
            record.steps.push(rec);
            if k < k_max || cfg.generate_final_scribbles {
                scribbles = emitted
                    .iter()
                    .zip(&gts)
                    .map(|(p, g)| robot.scribble(p, g))
                    .collect::<Result<Vec<_>>>()?;
            }
            if previous.is_some() {
                previous = Some(emitted_probs);
                if cfg.unroll {
                    history.push(trace);
                }
            }
            previous_labels = emitted;
        }
        if net.step - last_validation >= cfg.validate_every as u64 || b + 1 == n_batches {
            last_validation = net.step;
            let curves = match base {
                EditorBase::Auto(auto) => evaluate_editing(&cases, &Editor::new(auto, &net, cfg.encoding)?, &sim)?,
                EditorBase::Scratch => evaluate_scratch(&cases, &net, &sim)?,
            };
            let dice = mean_curve(&curves)
                .last()
                .map(|&(_, d)| d)
                .ok_or_else(|| Error::Contract("validation produced no curve".into()))?;
            selector.offer(&mut record, net.step, dice, &net);
            observer.on_validation(record.validations.last().expect("just pushed"));
        }
    }
    record.optimizer_steps = adam.steps();
    let (_, network) = selector.best.expect("at least one validation ran");
    Ok(Trained { network, record })
}

/// interCNN training with the random robot user seeded from `robot`.
pub fn train_intercnn(
    base: &UNet,
    train: &[&PatientVolume],
    val: &[&PatientVolume],
    template: &NetworkSpec,
    cfg: &TrainingConfig,
    robot: &RobotUserConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Trained> {
    let mut user = RobotUser::new(robot.clone())?;
    train_editor(EditorBase::Auto(base), train, val, template, cfg, &mut user, robot, observer)
}

/// The from-scratch baseline, trained with the same iterative strategy.
pub fn train_scratch(
    train: &[&PatientVolume],
    val: &[&PatientVolume],
    template: &NetworkSpec,
    cfg: &TrainingConfig,
    robot: &RobotUserConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Trained> {
    let mut user = RobotUser::new(robot.clone())?;
    train_editor(EditorBase::Scratch, train, val, template, cfg, &mut user, robot, observer)
}
