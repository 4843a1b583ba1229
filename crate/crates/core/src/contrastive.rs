//! SimCLR view generation and the NT-Xent objective.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{crop_or_pad, Waveform};
use crate::autodiff::{Function, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub noise_std: f64,
    pub gain_range: (f64, f64),
    pub clip_seconds: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            noise_std: 0.01,
            gain_range: (0.7, 1.3),
            clip_seconds: 6.0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.gain_range;
        if self.noise_std >= 0.0 && lo > 0.0 && lo <= hi && self.clip_seconds > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid augmentation config: {self:?}"
            )))
        }
    }
}

fn augment_view<R: Rng + ?Sized>(
    wav: &Waveform,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Waveform {
    let mut view = crop_or_pad(wav, cfg.clip_seconds, rng);
    let (lo, hi) = cfg.gain_range;
    let gain = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("noise std is finite");
        for s in &mut view.samples {
            *s = *s * gain + noise.sample(rng);
        }
    } else {
        for s in &mut view.samples {
            *s *= gain;
        }
    }
    view
}

/// Two independently augmented views: crop/pad, then gain, then noise.
pub fn augment_pair<R: Rng + ?Sized>(
    wav: &Waveform,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> (Waveform, Waveform) {
    let a = augment_view(wav, cfg, rng);
    let b = augment_view(wav, cfg, rng);
    (a, b)
}

/// View generation for inputs that are already feature matrices
/// (frames × dims), used by the synthetic datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureAugmentation {
    /// Contiguous frames kept per view; inputs with fewer frames are kept whole.
    pub crop_frames: usize,
    pub noise_std: f64,
}

impl Default for FeatureAugmentation {
    fn default() -> Self {
        FeatureAugmentation {
            crop_frames: 6,
            noise_std: 0.1,
        }
    }
}

impl FeatureAugmentation {
    pub fn view<R: Rng + ?Sized>(&self, features: &Tensor, rng: &mut R) -> Tensor {
        let (t, d) = (features.rows(), features.cols());
        let keep = self.crop_frames.clamp(1, t);
        let start = rng.gen_range(0..=t - keep);
        let mut data = features.data()[start * d..(start + keep) * d].to_vec();
        if self.noise_std > 0.0 {
            let noise = Normal::new(0.0, self.noise_std).expect("noise std is finite");
            for v in &mut data {
                *v += noise.sample(rng);
            }
        }
        Tensor::matrix(keep, d, data).expect("crop keeps shape")
    }
}

/// Paired views for one batch. `view_a[i]` and `view_b[i]` are the positive
/// pair for source `source_ids[i]`.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub view_a: Vec<Tensor>,
    pub view_b: Vec<Tensor>,
    pub source_ids: Vec<String>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.view_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view_a.is_empty()
    }

    /// Views in interleaved order: a₀, b₀, a₁, b₁, …
    pub fn interleaved(&self) -> impl Iterator<Item = &Tensor> {
        self.view_a
            .iter()
            .zip(&self.view_b)
            .flat_map(|(a, b)| [a, b])
    }
}

/// Partner of row `i` under the interleaved pair layout.
pub fn partner(i: usize) -> usize {
    i ^ 1
}

const UNIT_TOLERANCE: f64 = 1e-6;

struct NtXent {
    inv_tau: f64,
    /// Softmax over k ≠ i of row i; the diagonal is zero.
    probs: Tensor,
}

impl Function for NtXent {
    fn name(&self) -> &'static str {
        "nt_xent"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let n = x.rows();
        let scale = grad.item() / n as f64;
        // dL/dS, then S = X·Xᵀ/τ gives dX = (G + Gᵀ)·X/τ.
        let mut g = self.probs.clone();
        for i in 0..n {
            g.row_mut(i)[partner(i)] -= 1.0;
        }
        let mut sym = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for k in 0..n {
                sym.row_mut(i)[k] = (g.get(i, k) + g.get(k, i)) * scale * self.inv_tau;
            }
        }
        vec![sym.matmul(x).expect("square times rows")]
    }
}

/// NT-Xent over `2N` unit rows where rows `2i` and `2i+1` are positives.
///
/// `loss = (1/2N) Σᵢ −log( exp(sᵢ,ₚ₍ᵢ₎/τ) / Σ_{k≠i} exp(sᵢₖ/τ) )` with
/// `s` the dot product of rows.
pub fn nt_xent(tape: &mut Tape, x: Var, temperature: f64) -> Result<Var> {
    let xv = tape.value(x);
    let n = xv.rows();
    if xv.rank() != 2 || n < 4 || n % 2 != 0 {
        return Err(Error::Shape {
            op: "nt_xent (needs 2N rows, N >= 2)",
            left: xv.shape().to_vec(),
            right: vec![],
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    for r in 0..n {
        let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotUnitNorm { row: r, norm });
        }
    }
    let inv_tau = 1.0 / temperature;
    let sims = xv.matmul(&xv.transpose())?;
    let mut probs = Tensor::zeros(&[n, n]);
    let mut total = 0.0;
    for i in 0..n {
        let row = sims.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &s)| s * inv_tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let p_row = probs.row_mut(i);
        for (k, &s) in row.iter().enumerate() {
            if k != i {
                let e = (s * inv_tau - max).exp();
                p_row[k] = e;
                denom += e;
            }
        }
        for p in p_row.iter_mut() {
            *p /= denom;
        }
        total += max + denom.ln() - row[partner(i)] * inv_tau;
    }
    let loss = Tensor::scalar(total / n as f64);
    tape.custom(&[x], loss, Box::new(NtXent { inv_tau, probs }))
}
