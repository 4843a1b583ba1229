use rand::Rng;

use super::layers::{join, HiddenLayerClassifier, Linear, ParamLookup, ParamTree};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Attribute;
use crate::error::Result;

pub const PROJECTION_HIDDEN: usize = 128;
pub const PROJECTION_DIM: usize = 64;
pub const ADVERSARY_HIDDEN: usize = 64;

/// Two hidden ReLU layers then a linear map into the contrastive space.
/// Discarded after training.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<T = Tensor> {
    pub hidden1: Linear<T>,
    pub hidden2: Linear<T>,
    pub output: Linear<T>,
}

impl ProjectionHead<Tensor> {
    pub fn init<R: Rng + ?Sized>(embed_dim: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        ProjectionHead {
            hidden1: Linear::init(embed_dim, hidden, rng),
            hidden2: Linear::init(hidden, hidden, rng),
            output: Linear::init(hidden, out, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ProjectionHead<Var> {
        ProjectionHead {
            hidden1: self.hidden1.bind(tape, trainable),
            hidden2: self.hidden2.bind(tape, trainable),
            output: self.output.bind(tape, trainable),
        }
    }

    pub fn load(lookup: &mut ParamLookup, prefix: &str) -> Result<Self> {
        Ok(ProjectionHead {
            hidden1: Linear::load(lookup, &join(prefix, "hidden1"))?,
            hidden2: Linear::load(lookup, &join(prefix, "hidden2"))?,
            output: Linear::load(lookup, &join(prefix, "output"))?,
        })
    }
}

impl ProjectionHead<Var> {
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let h = self.hidden1.forward(tape, z)?;
        let h = tape.relu(h)?;
        let h = self.hidden2.forward(tape, h)?;
        let h = tape.relu(h)?;
        self.output.forward(tape, h)
    }
}

impl<T> ParamTree<T> for ProjectionHead<T> {
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.hidden1.leaves(&join(prefix, "hidden1"), out);
        self.hidden2.leaves(&join(prefix, "hidden2"), out);
        self.output.leaves(&join(prefix, "output"), out);
    }

    fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.hidden1.leaves_mut(out);
        self.hidden2.leaves_mut(out);
        self.output.leaves_mut(out);
    }
}

/// One classifier per demographic attribute, each reading the same input
/// through a gradient-reversal node.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryParams<T = Tensor> {
    pub heads: [HiddenLayerClassifier<T>; 3],
}

impl AdversaryParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(input: usize, classes: [usize; 3], rng: &mut R) -> Self {
        AdversaryParams {
            heads: classes.map(|c| HiddenLayerClassifier::init(input, ADVERSARY_HIDDEN, c, rng)),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AdversaryParams<Var> {
        AdversaryParams {
            heads: [0, 1, 2].map(|i| self.heads[i].bind(tape, trainable)),
        }
    }

    pub fn load(lookup: &mut ParamLookup, prefix: &str) -> Result<Self> {
        let mut load = |a: Attribute| HiddenLayerClassifier::load(lookup, &join(prefix, a.name()));
        Ok(AdversaryParams {
            heads: [
                load(Attribute::Gender)?,
                load(Attribute::Age)?,
                load(Attribute::Accent)?,
            ],
        })
    }
}

impl AdversaryParams<Var> {
    /// Per-attribute logits of `grl(input, grl_lambda)`.
    pub fn logits(&self, tape: &mut Tape, input: Var, grl_lambdas: [f64; 3]) -> Result<[Var; 3]> {
        let mut out = Vec::with_capacity(3);
        for (head, lambda) in self.heads.iter().zip(grl_lambdas) {
            let reversed = tape.grl(input, lambda)?;
            out.push(head.forward(tape, reversed)?);
        }
        Ok([out[0], out[1], out[2]])
    }
}

impl<T> ParamTree<T> for AdversaryParams<T> {
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (head, attr) in self.heads.iter().zip(Attribute::ALL) {
            head.leaves(&join(prefix, attr.name()), out);
        }
    }

    fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        for head in &mut self.heads {
            head.leaves_mut(out);
        }
    }
}

/// `Σ_a CE_a(logits_a)` with per-attribute class weights.
pub fn summed_cross_entropy(
    tape: &mut Tape,
    logits: [Var; 3],
    labels: &[[usize; 3]],
    class_weights: &[Vec<f64>; 3],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (a, l) in logits.into_iter().enumerate() {
        let ys: Vec<usize> = labels.iter().map(|y| y[a]).collect();
        let ce = tape.softmax_cross_entropy(l, &ys, &class_weights[a])?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    Ok(total.expect("three attributes"))
}
