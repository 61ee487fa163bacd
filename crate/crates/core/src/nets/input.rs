//! Network input assembly.
//!
//! Channel layout, in order:
//!
//! | network     | channels                                                   |
//! |-------------|------------------------------------------------------------|
//! | autoCNN     | `[image]`                                                  |
//! | interCNN    | `[image] ++ [prediction, C] ++ [scribble one-hot, C + 1]`  |
//! | from-scratch| `[image] ++ [scribble one-hot, C + 1]`                     |
//!
//! The scribble one-hot has one channel per class id followed by the
//! sentinel channel, so an empty mask lights up only the last channel.

use serde::{Deserialize, Serialize};

use super::tensor::{Act, Scalar};
use crate::error::{ensure, Error, Result};
use crate::grid::{check_same_shape, ImageSlice, Prediction, ScribbleMask};

/// `H x W x channels` input for one image (channel innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl InputTensor {
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }
}

/// Which network an input is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Auto,
    Inter,
    Scratch,
}

impl NetKind {
    pub fn in_channels(self, num_classes: usize) -> usize {
        match self {
            NetKind::Auto => 1,
            NetKind::Inter => 1 + num_classes + num_classes + 1,
            NetKind::Scratch => 1 + num_classes + 1,
        }
    }
}

/// How the previous prediction enters interCNN.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionEncoding {
    /// Softmax probabilities passed through unchanged.
    #[default]
    Probabilities,
    /// One-hot of the argmax labels.
    HardLabels,
}

pub fn assemble_auto_input(image: &ImageSlice) -> InputTensor {
    InputTensor {
        height: image.height(),
        width: image.width(),
        channels: 1,
        data: image.data().to_vec(),
    }
}

pub fn assemble_inter_input(image: &ImageSlice, previous: &Prediction, scribbles: &ScribbleMask) -> Result<InputTensor> {
    assemble_inter_input_with(image, previous, scribbles, PredictionEncoding::Probabilities)
}

pub fn assemble_inter_input_with(
    image: &ImageSlice,
    previous: &Prediction,
    scribbles: &ScribbleMask,
    encoding: PredictionEncoding,
) -> Result<InputTensor> {
    check_same_shape(image.shape(), previous.shape())?;
    check_same_shape(image.shape(), scribbles.shape())?;
    let c = previous.num_classes();
    ensure!(
        scribbles.num_classes() == c,
        "scribble mask has {} classes, prediction {c}",
        scribbles.num_classes()
    );
    let channels = NetKind::Inter.in_channels(c);
    let mut data = Vec::with_capacity(image.shape().len() * channels);
    let hard = (encoding == PredictionEncoding::HardLabels).then(|| previous.argmax());
    for (i, (&v, &m)) in image.data().iter().zip(scribbles.marks()).enumerate() {
        data.push(v);
        match &hard {
            None => data.extend_from_slice(&previous.probs()[i * c..(i + 1) * c]),
            Some(labels) => {
                let l = labels.labels()[i] as usize;
                data.extend((0..c).map(|k| (k == l) as u8 as f32));
            }
        }
        data.extend((0..=c).map(|k| (k == m as usize) as u8 as f32));
    }
    Ok(InputTensor {
        height: image.height(),
        width: image.width(),
        channels,
        data,
    })
}

pub fn assemble_scratch_input(image: &ImageSlice, scribbles: &ScribbleMask) -> Result<InputTensor> {
    check_same_shape(image.shape(), scribbles.shape())?;
    let c = scribbles.num_classes();
    let channels = NetKind::Scratch.in_channels(c);
    let mut data = Vec::with_capacity(image.shape().len() * channels);
    for (&v, &m) in image.data().iter().zip(scribbles.marks()) {
        data.push(v);
        data.extend((0..=c).map(|k| (k == m as usize) as u8 as f32));
    }
    Ok(InputTensor {
        height: image.height(),
        width: image.width(),
        channels,
        data,
    })
}

/// Stack per-image inputs into one `[C][N][H][W]` activation.
pub fn stack_inputs<T: Scalar>(inputs: &[InputTensor]) -> Result<Act<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Contract("empty input batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut act = Act::zeros(c, inputs.len(), h, w);
    let hw = h * w;
    let plane = act.plane();
    for (n, x) in inputs.iter().enumerate() {
        if (x.height, x.width, x.channels) != (h, w, c) {
            return Err(Error::shape(
                format!("{h}x{w}x{c}"),
                format!("{}x{}x{}", x.height, x.width, x.channels),
            ));
        }
        for (p, px) in x.data.chunks_exact(c).enumerate() {
            for (k, &v) in px.iter().enumerate() {
                act.data[k * plane + n * hw + p] = T::from_f64(v as f64);
            }
        }
    }
    Ok(act)
}

/// Split a `[C][N][H][W]` softmax output into per-image predictions.
pub fn unstack_predictions<T: Scalar>(probs: &Act<T>) -> Vec<Prediction> {
    let (c, hw, plane) = (probs.channels, probs.height * probs.width, probs.plane());
    (0..probs.batch)
        .map(|n| {
            let mut data = Vec::with_capacity(hw * c);
            for p in 0..hw {
                for k in 0..c {
                    data.push(probs.data[k * plane + n * hw + p].to_f64() as f32);
                }
            }
            Prediction::from_softmax(probs.height, probs.width, c, data)
        })
        .collect()
}
