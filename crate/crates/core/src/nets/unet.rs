use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    apply_mask, dropout_mask, max_pool2, max_pool2_backward, relu_backward, relu_inplace, softmax_channels, BatchNorm,
    BatchNormCache, Conv2d, Init, ParamStore, ParamTensor, UpConv,
};
use super::tensor::{Act, Scalar};
use crate::error::{ensure, Error, Result};

/// Down/up stage count of the U-Net; inputs must be divisible by `2^DEPTH`.
pub const DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub batch_norm: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            depth: DEPTH,
            base_channels: 32,
            in_channels: 1,
            num_classes: 3,
            dropout_rate: 0.2,
            batch_norm: true,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth == DEPTH, "only depth {DEPTH} is supported, got {}", self.depth);
        ensure!(self.in_channels >= 1, "in_channels must be >= 1");
        ensure!(self.base_channels >= 1, "base_channels must be >= 1");
        ensure!(self.num_classes >= 2, "num_classes must be >= 2");
        ensure!(
            (0.0..1.0).contains(&self.dropout_rate),
            "dropout_rate must be in [0, 1), got {}",
            self.dropout_rate
        );
        Ok(())
    }

    /// Width of stage `level` (0 = full resolution, `depth` = bottleneck).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    conv1: Conv2d,
    norm1: Option<BatchNorm>,
    conv2: Conv2d,
    norm2: Option<BatchNorm>,
}

#[derive(Debug, Clone)]
struct DoubleConvCache<T> {
    input: Act<T>,
    norm1: Option<BatchNormCache<T>>,
    act1: Act<T>,
    norm2: Option<BatchNormCache<T>>,
    act2: Act<T>,
}

impl DoubleConv {
    fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, cin: usize, cout: usize, batch_norm: bool) -> Self {
        let conv1 = Conv2d::new(init, &format!("{name}.conv1"), cin, cout, 3, !batch_norm);
        let norm1 = batch_norm.then(|| BatchNorm::new(init, &format!("{name}.bn1"), cout));
        let conv2 = Conv2d::new(init, &format!("{name}.conv2"), cout, cout, 3, !batch_norm);
        let norm2 = batch_norm.then(|| BatchNorm::new(init, &format!("{name}.bn2"), cout));
        Self {
            conv1,
            norm1,
            conv2,
            norm2,
        }
    }

    fn unit<T: Scalar>(
        conv: &Conv2d,
        norm: &Option<BatchNorm>,
        p: &ParamStore<T>,
        x: &Act<T>,
        train: bool,
    ) -> (Act<T>, Option<BatchNormCache<T>>) {
        let z = conv.forward(p, x);
        let (mut y, cache) = match norm {
            Some(bn) if train => {
                let (y, c) = bn.forward_train(p, &z);
                (y, Some(c))
            }
            Some(bn) => return (bn.forward_eval_relu(p, z), None),
            None => (z, None),
        };
        relu_inplace(&mut y);
        (y, cache)
    }

    fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Act<T>) -> Act<T> {
        let (a1, _) = Self::unit(&self.conv1, &self.norm1, p, x, false);
        Self::unit(&self.conv2, &self.norm2, p, &a1, false).0
    }

    fn forward_train<T: Scalar>(&self, p: &ParamStore<T>, x: &Act<T>) -> DoubleConvCache<T> {
        let (act1, norm1) = Self::unit(&self.conv1, &self.norm1, p, x, true);
        let (act2, norm2) = Self::unit(&self.conv2, &self.norm2, p, &act1, true);
        DoubleConvCache {
            input: x.clone(),
            norm1,
            act1,
            norm2,
            act2,
        }
    }

    fn backward<T: Scalar>(&self, p: &ParamStore<T>, g: &mut [Vec<T>], cache: &DoubleConvCache<T>, dout: &Act<T>) -> Act<T> {
        let mut d = relu_backward(&cache.act2, dout);
        if let (Some(bn), Some(c)) = (&self.norm2, &cache.norm2) {
            d = bn.backward(p, g, c, &d);
        }
        let d = self.conv2.backward(p, g, &cache.act1, &d);
        let mut d = relu_backward(&cache.act1, &d);
        if let (Some(bn), Some(c)) = (&self.norm1, &cache.norm1) {
            d = bn.backward(p, g, c, &d);
        }
        self.conv1.backward(p, g, &cache.input, &d)
    }

    fn update_running<T: Scalar>(&self, p: &mut ParamStore<T>, cache: &DoubleConvCache<T>) {
        let count = cache.act1.plane();
        if let (Some(bn), Some(c)) = (&self.norm1, &cache.norm1) {
            bn.update_running(p, c, count);
        }
        if let (Some(bn), Some(c)) = (&self.norm2, &cache.norm2) {
            bn.update_running(p, c, count);
        }
    }
}

/// Intermediate values of one training-mode forward pass, consumed by
/// [`UNet::backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    encoder: Vec<DoubleConvCache<T>>,
    dropout: Vec<Option<Vec<T>>>,
    pool_args: Vec<Vec<u8>>,
    bottleneck: Act<T>,
    decoder: Vec<DoubleConvCache<T>>,
    probs: Act<T>,
}

impl<T: Scalar> Trace<T> {
    /// Softmax output of the pass, `[C][N][H][W]`.
    pub fn probs(&self) -> &Act<T> {
        &self.probs
    }
}

/// Four-level U-Net with skip connections and a per-pixel softmax head.
#[derive(Debug, Clone)]
pub struct UNet<T = f32> {
    spec: NetworkSpec,
    encoder: Vec<DoubleConv>,
    upconvs: Vec<UpConv>,
    decoder: Vec<DoubleConv>,
    head: Conv2d,
    params: ParamStore<T>,
    /// Optimizer steps applied so far.
    pub step: u64,
}

impl<T: Scalar> UNet<T> {
    /// Fresh network with He-initialized weights drawn from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let bn = spec.batch_norm;
        let mut encoder = Vec::new();
        let mut cin = spec.in_channels;
        for level in 0..=spec.depth {
            let cout = spec.channels_at(level);
            encoder.push(DoubleConv::new(&mut init, &format!("enc{level}"), cin, cout, bn));
            cin = cout;
        }
        let mut upconvs = Vec::new();
        let mut decoder = Vec::new();
        for level in 0..spec.depth {
            let ch = spec.channels_at(level);
            upconvs.push(UpConv::new(&mut init, &format!("up{level}"), spec.channels_at(level + 1), ch));
            decoder.push(DoubleConv::new(&mut init, &format!("dec{level}"), 2 * ch, ch, bn));
        }
        let head = Conv2d::new(&mut init, "head", spec.base_channels, spec.num_classes, 1, true);
        Ok(Self {
            spec,
            encoder,
            upconvs,
            decoder,
            head,
            params: cast_store(&store),
            step: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replace all tensors; names and shapes must match the architecture.
    pub fn load_params(&mut self, tensors: Vec<ParamTensor<T>>) -> Result<()> {
        if tensors.len() != self.params.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.tensors.len(),
                tensors.len()
            )));
        }
        for (have, want) in tensors.iter().zip(&self.params.tensors) {
            if have.name != want.name || have.shape != want.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match manifest entry {} {:?}",
                    have.name, have.shape, want.name, want.shape
                )));
            }
        }
        self.params.tensors = tensors;
        Ok(())
    }

    /// `(name, shape)` for every tensor, in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            spec: self.spec.clone(),
            encoder: self.encoder.clone(),
            upconvs: self.upconvs.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
            params: cast_store(&self.params),
            step: self.step,
        }
    }

    fn check_input(&self, x: &Act<T>) -> Result<()> {
        let div = 1 << self.spec.depth;
        if x.channels != self.spec.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.spec.in_channels),
                format!("{} input channels", x.channels),
            ));
        }
        ensure!(
            x.height.is_multiple_of(div) && x.width.is_multiple_of(div) && x.height > 0 && x.width > 0,
            "input {}x{} is not divisible by {div}",
            x.height,
            x.width
        );
        ensure!(x.batch > 0, "empty batch");
        Ok(())
    }

    /// Evaluation-mode pass: dropout off, batch norm on running statistics.
    /// Returns per-pixel class probabilities laid out `[C][N][H][W]`.
    pub fn forward(&self, x: &Act<T>) -> Result<Act<T>> {
        self.check_input(x)?;
        let p = &self.params;
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut h = x.clone();
        for (level, block) in self.encoder.iter().enumerate() {
            let e = block.forward(p, &h);
            if level < self.spec.depth {
                h = max_pool2(&e).0;
                skips.push(e);
            } else {
                h = e;
            }
        }
        for level in (0..self.spec.depth).rev() {
            let up = self.upconvs[level].forward(p, &h);
            h = self.decoder[level].forward(p, &Act::concat(&skips[level], &up));
        }
        Ok(softmax_channels(&self.head.forward(p, &h)))
    }

    /// Training-mode pass: batch statistics, dropout masks drawn from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &Act<T>, rng: &mut R) -> Result<Trace<T>> {
        self.check_input(x)?;
        let p = &self.params;
        let depth = self.spec.depth;
        let mut encoder = Vec::with_capacity(depth + 1);
        let mut dropout = Vec::with_capacity(depth + 1);
        let mut pool_args = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for (level, block) in self.encoder.iter().enumerate() {
            let cache = block.forward_train(p, &h);
            let mut e = cache.act2.clone();
            // Dropout on the two deepest stages.
            let mask = (level + 2 > depth && self.spec.dropout_rate > 0.0)
                .then(|| dropout_mask::<T, R>(e.data.len(), self.spec.dropout_rate, rng));
            if let Some(m) = &mask {
                apply_mask(&mut e, m);
            }
            encoder.push(cache);
            dropout.push(mask);
            if level < depth {
                let (pooled, args) = max_pool2(&e);
                pool_args.push(args);
                skips.push(e);
                h = pooled;
            } else {
                h = e;
            }
        }
        let bottleneck = h.clone();
        let mut decoder: Vec<Option<DoubleConvCache<T>>> = vec![None; depth];
        for level in (0..depth).rev() {
            let up = self.upconvs[level].forward(p, &h);
            let cache = self.decoder[level].forward_train(p, &Act::concat(&skips[level], &up));
            h = cache.act2.clone();
            decoder[level] = Some(cache);
        }
        let probs = softmax_channels(&self.head.forward(p, &h));
        Ok(Trace {
            encoder,
            dropout,
            pool_args,
            bottleneck,
            decoder: decoder.into_iter().map(|c| c.expect("every level visited")).collect(),
            probs,
        })
    }

    /// Parameter gradients given the loss gradient w.r.t. the pre-softmax logits.
    pub fn backward(&self, trace: &Trace<T>, dlogits: &Act<T>) -> Vec<Vec<T>> {
        self.backward_with_input(trace, dlogits).0
    }

    /// Like [`UNet::backward`], additionally returning the gradient w.r.t. the input.
    pub fn backward_with_input(&self, trace: &Trace<T>, dlogits: &Act<T>) -> (Vec<Vec<T>>, Act<T>) {
        let p = &self.params;
        let depth = self.spec.depth;
        let mut grads = p.zero_grads();
        let mut du = self.head.backward(p, &mut grads, &trace.decoder[0].act2, dlogits);
        let mut skip_grads = Vec::with_capacity(depth);
        for level in 0..depth {
            let dcat = self.decoder[level].backward(p, &mut grads, &trace.decoder[level], &du);
            let (dskip, dup) = dcat.split(self.spec.channels_at(level));
            skip_grads.push(dskip);
            let up_input = if level + 1 == depth {
                &trace.bottleneck
            } else {
                &trace.decoder[level + 1].act2
            };
            du = self.upconvs[level].backward(p, &mut grads, up_input, &dup);
        }
        let mut de = du;
        for level in (0..=depth).rev() {
            if let Some(mask) = &trace.dropout[level] {
                apply_mask(&mut de, mask);
            }
            let dx = self.encoder[level].backward(p, &mut grads, &trace.encoder[level], &de);
            if level == 0 {
                return (grads, dx);
            }
            let below = &trace.encoder[level - 1].act2;
            let mut d = max_pool2_backward(&dx, &trace.pool_args[level - 1], below);
            for (a, &b) in d.data.iter_mut().zip(&skip_grads[level - 1].data) {
                *a += b;
            }
            de = d;
        }
        unreachable!("encoder level 0 returns")
    }

    /// Move batch-norm running statistics toward the batch seen in `trace`.
    pub fn update_running_stats(&mut self, trace: &Trace<T>) {
        for (block, cache) in self.encoder.iter().zip(&trace.encoder) {
            block.update_running(&mut self.params, cache);
        }
        for (block, cache) in self.decoder.iter().zip(&trace.decoder) {
            block.update_running(&mut self.params, cache);
        }
    }
}

fn cast_store<A: Scalar, B: Scalar>(store: &ParamStore<A>) -> ParamStore<B> {
    ParamStore {
        tensors: store
            .tensors
            .iter()
            .map(|t| ParamTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                values: t.values.iter().map(|v| B::from_f64(v.to_f64())).collect(),
                trainable: t.trainable,
            })
            .collect(),
    }
}
