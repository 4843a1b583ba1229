use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Uniform in ±√(6/(fan_in+fan_out)).
pub fn xavier_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized buffer")
}

/// Parameters stored either as owned tensors or as handles on a tape.
pub trait ParamTree<T> {
    /// Leaves in a fixed order, with dotted names under `prefix`.
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>);
    /// Same order as [`ParamTree::leaves`].
    fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>);

    fn named<'a>(&'a self, prefix: &str) -> Vec<(String, &'a T)> {
        let mut out = Vec::new();
        self.leaves(prefix, &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.leaves_mut(&mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Pulls named tensors out of a loaded checkpoint.
pub struct ParamLookup {
    map: HashMap<String, Tensor>,
}

impl ParamLookup {
    pub fn new(params: Vec<(String, Tensor)>) -> Self {
        ParamLookup {
            map: params.into_iter().collect(),
        }
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.map
            .remove(name)
            .ok_or_else(|| Error::data("<checkpoint>", format!("missing parameter `{name}`")))
    }

    pub fn contains_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.map.keys().any(|k| k.starts_with(&p))
    }
}

/// Binds every leaf as a trainable (or constant) tape node.
pub fn bind_tensor(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// Affine layer `x·W + b`, `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl Linear<Tensor> {
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: xavier_uniform(fan_in, fan_out, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Linear<Var> {
        Linear {
            weight: bind_tensor(tape, &self.weight, trainable),
            bias: bind_tensor(tape, &self.bias, trainable),
        }
    }

    pub fn load(lookup: &mut ParamLookup, prefix: &str) -> Result<Self> {
        Ok(Linear {
            weight: lookup.take(&join(prefix, "weight"))?,
            bias: lookup.take(&join(prefix, "bias"))?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Plain forward pass on one row vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.weight.row(i)) {
                *o += xi * w;
            }
        }
        out
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

impl<T> ParamTree<T> for Linear<T> {
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// One hidden ReLU layer followed by a linear output, used by every
/// attribute classifier that is not purely linear.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLayerClassifier<T = Tensor> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

impl HiddenLayerClassifier<Tensor> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        HiddenLayerClassifier {
            hidden: Linear::init(input, hidden, rng),
            output: Linear::init(hidden, classes, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HiddenLayerClassifier<Var> {
        HiddenLayerClassifier {
            hidden: self.hidden.bind(tape, trainable),
            output: self.output.bind(tape, trainable),
        }
    }

    pub fn load(lookup: &mut ParamLookup, prefix: &str) -> Result<Self> {
        Ok(HiddenLayerClassifier {
            hidden: Linear::load(lookup, &join(prefix, "hidden"))?,
            output: Linear::load(lookup, &join(prefix, "output"))?,
        })
    }
}

impl HiddenLayerClassifier<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.output.forward(tape, h)
    }
}

impl<T> ParamTree<T> for HiddenLayerClassifier<T> {
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.hidden.leaves(&join(prefix, "hidden"), out);
        self.output.leaves(&join(prefix, "output"), out);
    }

    fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.hidden.leaves_mut(out);
        self.output.leaves_mut(out);
    }
}

/// Stacks feature matrices with equal width into one tensor plus per-item
/// row counts.
pub fn stack_rows<'a>(items: impl IntoIterator<Item = &'a Tensor>) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::new();
    let mut lengths = Vec::new();
    let mut width = None;
    for t in items {
        let w = *width.get_or_insert(t.cols());
        if t.cols() != w {
            return Err(Error::Shape {
                op: "stack_rows",
                left: vec![w],
                right: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
        lengths.push(t.rows());
    }
    let rows = lengths.iter().sum();
    Ok((Tensor::matrix(rows, width.unwrap_or(0), data)?, lengths))
}
