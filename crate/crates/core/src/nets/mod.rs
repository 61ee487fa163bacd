//! U-Net definition, input assembly and checkpoints.
//!
//! The network is implemented directly on top of a gemm kernel: convolutions
//! are lowered with im2col, every layer carries its own backward pass, and
//! parameters live in a flat [`ParamStore`] so the optimizer, checkpointing
//! and gradient checks see one list of tensors.

mod checkpoint;
mod input;
mod layers;
mod tensor;
mod unet;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use input::{
    assemble_auto_input, assemble_inter_input, assemble_inter_input_with, assemble_scratch_input, stack_inputs,
    unstack_predictions, InputTensor, NetKind, PredictionEncoding,
};
pub use layers::{ParamStore, ParamTensor};
pub use tensor::{Act, Scalar};
#[cfg(test)]
pub(crate) use layers::softmax_channels;
pub use unet::{NetworkSpec, Trace, UNet, DEPTH};

use crate::error::Result;
use crate::grid::Prediction;

impl UNet<f32> {
    /// Evaluation-mode predictions for a batch of assembled inputs.
    pub fn predict(&self, inputs: &[InputTensor]) -> Result<Vec<Prediction>> {
        let x = stack_inputs::<f32>(inputs)?;
        Ok(unstack_predictions(&self.forward(&x)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(base: usize, in_channels: usize) -> NetworkSpec {
        NetworkSpec {
            base_channels: base,
            in_channels,
            num_classes: 3,
            ..Default::default()
        }
    }

    fn random_input(h: usize, w: usize, c: usize, seed: u64) -> InputTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        InputTensor {
            height: h,
            width: w,
            channels: c,
            data: (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn output_matches_input_resolution_and_is_normalized() {
        let net = UNet::<f32>::new(spec(4, 1), 0).unwrap();
        for &(h, w) in &[(32, 32), (16, 48), (320, 320)] {
            let preds = net.predict(&[random_input(h, w, 1, 1)]).unwrap();
            assert_eq!((preds[0].height(), preds[0].width(), preds[0].num_classes()), (h, w, 3));
            for px in preds[0].probs().chunks_exact(3) {
                assert!((px.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
                assert!(px.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn rejects_indivisible_sizes_and_wrong_channels() {
        let net = UNet::<f32>::new(spec(4, 1), 0).unwrap();
        assert!(matches!(net.predict(&[random_input(30, 32, 1, 0)]), Err(Error::Contract(_))));
        assert!(matches!(
            net.predict(&[random_input(32, 32, 2, 0)]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let net = UNet::<f32>::new(spec(4, 8), 3).unwrap();
        let x = random_input(32, 32, 8, 2);
        assert_eq!(net.predict(&[x.clone()]).unwrap(), net.predict(&[x]).unwrap());
    }

    #[test]
    fn wider_network_has_more_parameters_same_output() {
        let small = UNet::<f32>::new(spec(4, 1), 0).unwrap();
        let big = UNet::<f32>::new(spec(8, 1), 0).unwrap();
        assert!(big.num_parameters() > small.num_parameters());
        let x = random_input(32, 32, 1, 0);
        let (a, b) = (small.predict(&[x.clone()]).unwrap(), big.predict(&[x]).unwrap());
        assert_eq!(a[0].shape(), b[0].shape());
        assert_eq!(a[0].num_classes(), b[0].num_classes());
    }

    #[test]
    fn train_pass_updates_running_stats_only_on_commit() {
        let mut net = UNet::<f32>::new(spec(4, 1), 0).unwrap();
        let before = net.params().clone();
        let x = stack_inputs::<f32>(&[random_input(32, 32, 1, 0)]).unwrap();
        let trace = net.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net.params(), &before);
        net.update_running_stats(&trace);
        assert_ne!(net.params(), &before);
    }
}
