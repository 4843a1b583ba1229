use rand::Rng;

use super::layers::{join, stack_rows, Linear, ParamLookup, ParamTree};
use crate::audio::LogMelSpectrogram;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for EncoderShape {
    fn default() -> Self {
        EncoderShape {
            input_dim: 64,
            hidden: 256,
            embed_dim: 128,
        }
    }
}

/// Per-frame MLP (`in → h`, ReLU, `h → h`), mean and standard deviation
/// pooling over frames, then a linear map `2h → d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub frame_in: Linear<T>,
    pub frame_out: Linear<T>,
    pub pooled: Linear<T>,
}

impl EncoderParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(shape: EncoderShape, rng: &mut R) -> Self {
        EncoderParams {
            frame_in: Linear::init(shape.input_dim, shape.hidden, rng),
            frame_out: Linear::init(shape.hidden, shape.hidden, rng),
            pooled: Linear::init(2 * shape.hidden, shape.embed_dim, rng),
        }
    }

    pub fn shape(&self) -> EncoderShape {
        EncoderShape {
            input_dim: self.frame_in.in_dim(),
            hidden: self.frame_in.out_dim(),
            embed_dim: self.pooled.out_dim(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderParams<Var> {
        EncoderParams {
            frame_in: self.frame_in.bind(tape, trainable),
            frame_out: self.frame_out.bind(tape, trainable),
            pooled: self.pooled.bind(tape, trainable),
        }
    }

    pub fn load(lookup: &mut ParamLookup, prefix: &str) -> Result<Self> {
        Ok(EncoderParams {
            frame_in: Linear::load(lookup, &join(prefix, "frame_in"))?,
            frame_out: Linear::load(lookup, &join(prefix, "frame_out"))?,
            pooled: Linear::load(lookup, &join(prefix, "pooled"))?,
        })
    }

    /// Embeds a batch of utterances; one output row per input matrix.
    pub fn embed_batch(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let enc = self.bind(&mut tape, false);
        let z = enc.forward(&mut tape, inputs.iter().copied())?;
        Ok(tape.value(z).clone())
    }
}

impl EncoderParams<Var> {
    /// `inputs` are `frames × input_dim` matrices; returns `B × d`.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape,
        inputs: impl IntoIterator<Item = &'a Tensor>,
    ) -> Result<Var> {
        let (stacked, lengths) = stack_rows(inputs)?;
        let x = tape.constant(stacked);
        self.forward_stacked(tape, x, &lengths)
    }

    pub fn forward_stacked(&self, tape: &mut Tape, frames: Var, lengths: &[usize]) -> Result<Var> {
        let h = self.frame_in.forward(tape, frames)?;
        let h = tape.relu(h)?;
        let h = self.frame_out.forward(tape, h)?;
        let pooled = tape.segment_mean_std(h, lengths)?;
        self.pooled.forward(tape, pooled)
    }
}

impl<T> ParamTree<T> for EncoderParams<T> {
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.frame_in.leaves(&join(prefix, "frame_in"), out);
        self.frame_out.leaves(&join(prefix, "frame_out"), out);
        self.pooled.leaves(&join(prefix, "pooled"), out);
    }

    fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.frame_in.leaves_mut(out);
        self.frame_out.leaves_mut(out);
        self.pooled.leaves_mut(out);
    }
}

/// Embedding `z` of one utterance.
pub fn encode(features: &LogMelSpectrogram, enc: &EncoderParams) -> Result<Vec<f64>> {
    Ok(enc.embed_batch(&[&features.frames])?.into_data())
}
