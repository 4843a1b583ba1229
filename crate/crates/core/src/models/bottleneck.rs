//! Causal bottleneck: a demographic branch and a residual branch split off
//! the encoder embedding, tied together by a cross-covariance penalty.

use rand::Rng;

use super::heads::AdversaryParams;
use super::layers::{bind_tensor, join, xavier_uniform, Linear, ParamLookup, ParamTree};
use crate::autodiff::{Function, Tape, Tensor, Var};
use crate::data::Attribute;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CausalBottleneckParams<T = Tensor> {
    /// `d × k`.
    pub w_demo: T,
    /// `d × (d − k)`.
    pub w_res: T,
    pub demo_heads: [Linear<T>; 3],
    pub residual_adversaries: AdversaryParams<T>,
    /// GRL strength per attribute on the residual adversaries.
    pub lambdas: [f64; 3],
    /// Weight of the covariance penalty.
    pub gamma: f64,
}

impl CausalBottleneckParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(
        embed_dim: usize,
        k: usize,
        classes: [usize; 3],
        lambdas: [f64; 3],
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || k >= embed_dim {
            return Err(Error::Config(format!(
                "bottleneck needs 0 < k < d, got k = {k}, d = {embed_dim}"
            )));
        }
        let w_demo = xavier_uniform(embed_dim, k, rng);
        let w_res = xavier_uniform(embed_dim, embed_dim - k, rng);
        let demo_heads = classes.map(|c| Linear::init(k, c, rng));
        let residual_adversaries = AdversaryParams::init(embed_dim - k, classes, rng);
        Ok(CausalBottleneckParams {
            w_demo,
            w_res,
            demo_heads,
            residual_adversaries,
            lambdas,
            gamma,
        })
    }

    pub fn k(&self) -> usize {
        self.w_demo.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_demo.rows()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CausalBottleneckParams<Var> {
        CausalBottleneckParams {
            w_demo: bind_tensor(tape, &self.w_demo, trainable),
            w_res: bind_tensor(tape, &self.w_res, trainable),
            demo_heads: [0, 1, 2].map(|i| self.demo_heads[i].bind(tape, trainable)),
            residual_adversaries: self.residual_adversaries.bind(tape, trainable),
            lambdas: self.lambdas,
            gamma: self.gamma,
        }
    }

    pub fn load(
        lookup: &mut ParamLookup,
        prefix: &str,
        lambdas: [f64; 3],
        gamma: f64,
    ) -> Result<Self> {
        let w_demo = lookup.take(&join(prefix, "w_demo"))?;
        let w_res = lookup.take(&join(prefix, "w_res"))?;
        let mut head =
            |a: Attribute| Linear::load(lookup, &join(&join(prefix, "demo_head"), a.name()));
        let demo_heads = [
            head(Attribute::Gender)?,
            head(Attribute::Age)?,
            head(Attribute::Accent)?,
        ];
        let residual_adversaries =
            AdversaryParams::load(lookup, &join(prefix, "residual_adversary"))?;
        Ok(CausalBottleneckParams {
            w_demo,
            w_res,
            demo_heads,
            residual_adversaries,
            lambdas,
            gamma,
        })
    }

    /// Branch embeddings for a batch of encoder outputs (`N × d`).
    pub fn branches(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((z.matmul(&self.w_demo)?, z.matmul(&self.w_res)?))
    }
}

impl<T> ParamTree<T> for CausalBottleneckParams<T> {
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((join(prefix, "w_demo"), &self.w_demo));
        out.push((join(prefix, "w_res"), &self.w_res));
        for (h, a) in self.demo_heads.iter().zip(Attribute::ALL) {
            h.leaves(&join(&join(prefix, "demo_head"), a.name()), out);
        }
        self.residual_adversaries
            .leaves(&join(prefix, "residual_adversary"), out);
    }

    fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.w_demo);
        out.push(&mut self.w_res);
        for h in &mut self.demo_heads {
            h.leaves_mut(out);
        }
        self.residual_adversaries.leaves_mut(out);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckOutputs {
    pub z_demo: Var,
    pub z_res: Var,
    pub demo_logits: [Var; 3],
    pub residual_logits: [Var; 3],
}

/// `z_demo = z·W_demo`, `z_res = z·W_res`; residual adversaries read
/// `z_res` through a GRL carrying the per-attribute lambda.
pub fn bottleneck_forward(
    tape: &mut Tape,
    z: Var,
    bn: &CausalBottleneckParams<Var>,
) -> Result<BottleneckOutputs> {
    let z_demo = tape.matmul(z, bn.w_demo)?;
    let z_res = tape.matmul(z, bn.w_res)?;
    let mut demo_logits = Vec::with_capacity(3);
    for head in &bn.demo_heads {
        demo_logits.push(head.forward(tape, z_demo)?);
    }
    let residual_logits = bn.residual_adversaries.logits(tape, z_res, bn.lambdas)?;
    Ok(BottleneckOutputs {
        z_demo,
        z_res,
        demo_logits: [demo_logits[0], demo_logits[1], demo_logits[2]],
        residual_logits,
    })
}

struct CovariancePenalty {
    centered_a: Tensor,
    centered_b: Tensor,
    /// `k × m` cross-covariance.
    cov: Tensor,
}

impl Function for CovariancePenalty {
    fn name(&self) -> &'static str {
        "covariance_penalty"
    }

    fn backward(&self, grad: &Tensor, _inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let n = self.centered_a.rows() as f64;
        let (k, m) = (self.cov.rows(), self.cov.cols());
        // dL/dC = 2C/(k·m); centering is absorbed because centered columns sum to zero.
        let dc = self.cov.scaled(2.0 * grad.item() / (k * m) as f64 / n);
        let ga = self.centered_b.matmul(&dc.transpose()).expect("N×m · m×k");
        let gb = self.centered_a.matmul(&dc).expect("N×k · k×m");
        vec![ga, gb]
    }
}

fn center_columns(x: &Tensor) -> Tensor {
    let n = x.rows() as f64;
    let mut means = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in means.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut out = x.clone();
    for r in 0..x.rows() {
        for (o, m) in out.row_mut(r).iter_mut().zip(&means) {
            *o -= m;
        }
    }
    out
}

/// Mean squared entry of the batch cross-covariance (population
/// normalization) between `z_demo` (`N × k`) and `z_res` (`N × m`).
pub fn covariance_penalty(tape: &mut Tape, z_demo: Var, z_res: Var) -> Result<Var> {
    let (a, b) = (tape.value(z_demo), tape.value(z_res));
    if a.rows() < 2 {
        return Err(Error::TooFewSamples("covariance_penalty (N >= 2)"));
    }
    if a.rows() != b.rows() || a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape {
            op: "covariance_penalty",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let n = a.rows() as f64;
    let centered_a = center_columns(a);
    let centered_b = center_columns(b);
    let cov = centered_a.transpose().matmul(&centered_b)?.scaled(1.0 / n);
    let penalty = cov.data().iter().map(|c| c * c).sum::<f64>() / cov.len() as f64;
    let func = CovariancePenalty {
        centered_a,
        centered_b,
        cov,
    };
    tape.custom(&[z_demo, z_res], Tensor::scalar(penalty), Box::new(func))
}

/// Value of [`covariance_penalty`] without recording a graph.
pub fn covariance_penalty_value(z_demo: &Tensor, z_res: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(z_demo.clone());
    let b = tape.constant(z_res.clone());
    let p = covariance_penalty(&mut tape, a, b)?;
    Ok(tape.value(p).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn two_point_example() {
        let a = Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap();
        assert_eq!(covariance_penalty_value(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn constant_branch_has_zero_penalty() {
        let a = Tensor::matrix(3, 2, vec![1.0, 2.0, -3.0, 0.5, 4.0, 1.0]).unwrap();
        let b = Tensor::full(&[3, 2], 7.0);
        assert_eq!(covariance_penalty_value(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn needs_two_rows() {
        let a = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert!(covariance_penalty_value(&a, &a).is_err());
    }

    #[test]
    fn k_must_be_inside_embedding() {
        let mut rng = stream_rng(0, 0);
        assert!(CausalBottleneckParams::init(8, 8, [2, 3, 5], [0.1; 3], 1.0, &mut rng).is_err());
        assert!(CausalBottleneckParams::init(8, 0, [2, 3, 5], [0.1; 3], 1.0, &mut rng).is_err());
    }

    #[test]
    fn hand_set_branches() {
        let mut bn =
            CausalBottleneckParams::init(4, 2, [2, 3, 5], [0.5; 3], 1.0, &mut stream_rng(0, 0))
                .unwrap();
        bn.w_demo = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, -1.0]).unwrap();
        bn.w_res = Tensor::matrix(4, 2, vec![0.5, 0.0, 0.0, 0.0, 0.0, 3.0, 1.0, 1.0]).unwrap();
        let z = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (demo, res) = bn.branches(&z).unwrap();
        assert_eq!(demo.data(), &[7.0, -2.0]);
        assert_eq!(res.data(), &[4.5, 13.0]);
    }

    #[test]
    fn zero_residual_map_gives_constant_adversary_logits() {
        let mut bn =
            CausalBottleneckParams::init(6, 2, [2, 3, 5], [0.5; 3], 1.0, &mut stream_rng(4, 0))
                .unwrap();
        bn.w_res = Tensor::zeros(&[6, 4]);
        let mut rng = stream_rng(9, 0);
        let z = Tensor::matrix(5, 6, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let bound = bn.bind(&mut tape, false);
        let out = bottleneck_forward(&mut tape, zv, &bound).unwrap();
        assert!(tape.value(out.z_res).data().iter().all(|&v| v == 0.0));
        for l in out.residual_logits {
            let logits = tape.value(l);
            for r in 1..logits.rows() {
                assert_eq!(logits.row(r), logits.row(0));
            }
        }
    }
}
