//! Demographic probes on frozen embeddings: class-weighted softmax
//! regression and one-hidden-layer MLPs trained by plain mini-batch SGD,
//! with percentile-bootstrap intervals on accuracy.

use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::data::inverse_frequency_weights;
use crate::error::{Error, Result};
use crate::models::xavier_uniform;
use crate::rng::{item_rng, stream, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProbeKind {
    Linear,
    Mlp,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(ProbeKind::Linear),
            "mlp" => Some(ProbeKind::Mlp),
            _ => None,
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds for the MLP sweep.
    pub seeds: Vec<u64>,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
    pub scaling: InputScaling,
}

/// Preprocessing applied to probe inputs, with statistics from the probe's
/// training data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputScaling {
    /// Raw embeddings.
    None,
    /// Center each feature and divide every feature by one shared RMS
    /// deviation, which keeps the relative scale of directions intact.
    Isotropic,
    /// Center and divide each feature by its own standard deviation.
    PerFeature,
}

impl InputScaling {
    pub fn name(self) -> &'static str {
        match self {
            InputScaling::None => "none",
            InputScaling::Isotropic => "isotropic",
            InputScaling::PerFeature => "per_feature",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            InputScaling::None,
            InputScaling::Isotropic,
            InputScaling::PerFeature,
        ]
        .into_iter()
        .find(|v| v.name() == s)
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            kind: ProbeKind::Linear,
            hidden: 128,
            learning_rate: 0.01,
            epochs: 100,
            batch_size: 64,
            seeds: (0..5).collect(),
            bootstrap_resamples: 1000,
            confidence: 0.95,
            scaling: InputScaling::Isotropic,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate > 0.0
            && self.batch_size >= 1
            && (self.kind == ProbeKind::Linear || self.hidden >= 1)
            && self.confidence > 0.0
            && self.confidence < 1.0
        {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid probe config: {self:?}")))
        }
    }
}

/// A trained probe. Inputs are shifted and scaled with statistics of the
/// probe's training data before the first layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub kind: ProbeKind,
    pub classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(W, b)` per layer; one layer for linear probes, two for MLPs.
    layers: Vec<(Tensor, Tensor)>,
}

fn check_labels(x: &Tensor, labels: &[usize], classes: usize) -> Result<()> {
    if x.rank() != 2 || x.rows() != labels.len() {
        return Err(Error::Shape {
            op: "probe",
            left: x.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::matrix(idx.len(), x.cols(), data).expect("gathered rows")
}

fn add_row_bias(x: &mut Tensor, b: &Tensor) {
    let b = b.data();
    for r in 0..x.rows() {
        for (v, bb) in x.row_mut(r).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

impl Probe {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    /// Returns the activations of every layer; the last one holds logits.
    fn forward(&self, x: &Tensor) -> Vec<Tensor> {
        let mut acts = vec![x.clone()];
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut z = acts.last().unwrap().matmul(w).expect("probe dims");
            add_row_bias(&mut z, b);
            if i + 1 < self.layers.len() {
                z = z.map(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "probe input",
                left: x.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        Ok(self.forward(&self.standardize(x)).pop().unwrap())
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains one probe on `(x, labels)` with class-weighted cross-entropy.
/// Deterministic per `seed`; `x` is never modified.
pub fn train_probe(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Probe> {
    cfg.validate()?;
    check_labels(x, labels, classes)?;
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(c));
    }
    let n = x.rows();
    let dim = x.cols();
    let (mean, scale) = input_statistics(x, cfg.scaling);
    let mut init_rng = item_rng(seed, stream::PROBE, 0);
    let layers = match cfg.kind {
        ProbeKind::Linear => vec![(
            xavier_uniform(dim, classes, &mut init_rng),
            Tensor::zeros(&[classes]),
        )],
        ProbeKind::Mlp => vec![
            (
                xavier_uniform(dim, cfg.hidden, &mut init_rng),
                Tensor::zeros(&[cfg.hidden]),
            ),
            (
                xavier_uniform(cfg.hidden, classes, &mut init_rng),
                Tensor::zeros(&[classes]),
            ),
        ],
    };
    let mut probe = Probe {
        kind: cfg.kind,
        classes,
        mean,
        scale,
        layers,
    };
    let xs = probe.standardize(x);
    let weights = inverse_frequency_weights(labels, classes);
    let mut order_rng = item_rng(seed, stream::PROBE, 1);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            sgd_step(
                &mut probe,
                &gather_rows(&xs, batch),
                batch,
                labels,
                &weights,
                cfg.learning_rate,
            );
        }
    }
    if probe
        .layers
        .iter()
        .any(|(w, b)| !w.is_finite() || !b.is_finite())
    {
        return Err(Error::NonFinite("probe training"));
    }
    Ok(probe)
}

fn input_statistics(x: &Tensor, scaling: InputScaling) -> (Vec<f64>, Vec<f64>) {
    let (n, dim) = (x.rows(), x.cols());
    if scaling == InputScaling::None {
        return (vec![0.0; dim], vec![1.0; dim]);
    }
    let mean: Vec<f64> = (0..dim)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let var: Vec<f64> = (0..dim)
        .map(|j| (0..n).map(|i| (x.get(i, j) - mean[j]).powi(2)).sum::<f64>() / n as f64)
        .collect();
    let floor = |v: f64| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
    let scale = match scaling {
        InputScaling::PerFeature => var.iter().map(|&v| floor(v)).collect(),
        _ => vec![floor(var.iter().sum::<f64>() / dim as f64); dim],
    };
    (mean, scale)
}

fn sgd_step(
    probe: &mut Probe,
    xb: &Tensor,
    batch: &[usize],
    labels: &[usize],
    weights: &[f64],
    lr: f64,
) {
    let acts = probe.forward(xb);
    let logits = acts.last().unwrap();
    let total_w: f64 = batch.iter().map(|&i| weights[labels[i]]).sum();
    // dL/dlogits = w_i (softmax_i - onehot_i) / Σw
    let mut delta = logits.clone();
    for (r, &i) in batch.iter().enumerate() {
        let row = delta.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        let w = weights[labels[i]] / total_w;
        for (c, v) in row.iter_mut().enumerate() {
            *v = w * (*v / z - if c == labels[i] { 1.0 } else { 0.0 });
        }
    }
    for layer in (0..probe.layers.len()).rev() {
        let input = &acts[layer];
        let grad_w = input.transpose().matmul(&delta).expect("probe dims");
        let grad_b: Vec<f64> = (0..delta.cols())
            .map(|c| (0..delta.rows()).map(|r| delta.get(r, c)).sum())
            .collect();
        if layer > 0 {
            let w = &probe.layers[layer].0;
            let mut back = delta.matmul(&w.transpose()).expect("probe dims");
            for (g, a) in back.data_mut().iter_mut().zip(input.data()) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            delta = back;
        }
        let (w, b) = &mut probe.layers[layer];
        for (p, g) in w.data_mut().iter_mut().zip(grad_w.data()) {
            *p -= lr * g;
        }
        for (p, g) in b.data_mut().iter_mut().zip(&grad_b) {
            *p -= lr * g;
        }
    }
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate_probe(probe: &Probe, x: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(x, labels, probe.classes)?;
    let preds = probe.predict(x)?;
    Ok(accuracy(&preds, labels))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for accuracy.
pub fn bootstrap_ci(
    predictions: &[usize],
    labels: &[usize],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "bootstrap_ci",
            left: vec![predictions.len()],
            right: vec![labels.len()],
        });
    }
    let n = labels.len();
    if n < 10 {
        return Err(Error::TooFewForBootstrap);
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "bootstrap needs resamples >= 1 and level in (0,1), got {resamples}, {level}"
        )));
    }
    let correct: Vec<bool> = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| p == y)
        .collect();
    let mut rng = stream_rng(seed, stream::BOOTSTRAP);
    let mut accs: Vec<f64> = (0..resamples)
        .map(|_| {
            let hits = (0..n).filter(|_| correct[rng.gen_range(0..n)]).count();
            hits as f64 / n as f64
        })
        .collect();
    accs.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&accs, tail), quantile(&accs, 1.0 - tail)))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains one MLP probe per seed on the training data and scores each on
/// the evaluation data. Returns the per-seed accuracies in seed order.
pub fn mlp_probe_accuracies(
    train: (&Tensor, &[usize]),
    eval: (&Tensor, &[usize]),
    classes: usize,
    cfg: &ProbeConfig,
    seeds: &[u64],
) -> Result<Vec<f64>> {
    if seeds.len() < 2 {
        return Err(Error::Config(
            "the MLP probe sweep needs at least two seeds".into(),
        ));
    }
    let cfg = ProbeConfig {
        kind: ProbeKind::Mlp,
        ..cfg.clone()
    };
    seeds
        .iter()
        .map(|&s| {
            let probe = train_probe(train.0, train.1, classes, &cfg, s)?;
            evaluate_probe(&probe, eval.0, eval.1)
        })
        .collect()
}

/// Mean ± population std of MLP probe accuracy across seeds.
pub fn mlp_probe_sweep(
    train: (&Tensor, &[usize]),
    eval: (&Tensor, &[usize]),
    classes: usize,
    cfg: &ProbeConfig,
    seeds: &[u64],
) -> Result<(f64, f64)> {
    Ok(mean_std(&mlp_probe_accuracies(
        train, eval, classes, cfg, seeds,
    )?))
}

/// One row of a probing table.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub attribute: String,
    pub split: String,
    pub point_accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mlp_mean: f64,
    pub mlp_std: f64,
    pub n_eval: usize,
}

pub const PROBE_CSV_HEADER: &str =
    "attribute,split,linear_acc,ci_low,ci_high,mlp_mean,mlp_std,n_eval";

impl ProbeReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.attribute,
            self.split,
            self.point_accuracy,
            self.ci_low,
            self.ci_high,
            self.mlp_mean,
            self.mlp_std,
            self.n_eval
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let cells: Vec<&str> = line.split(',').collect();
        let bad = || Error::MalformedRow {
            line: 0,
            reason: format!("probe row `{line}`"),
        };
        if cells.len() != 8 {
            return Err(bad());
        }
        let f = |i: usize| cells[i].parse::<f64>().map_err(|_| bad());
        Ok(ProbeReport {
            attribute: cells[0].to_string(),
            split: cells[1].to_string(),
            point_accuracy: f(2)?,
            ci_low: f(3)?,
            ci_high: f(4)?,
            mlp_mean: f(5)?,
            mlp_std: f(6)?,
            n_eval: cells[7].parse().map_err(|_| bad())?,
        })
    }
}

pub fn probe_reports_csv(reports: &[ProbeReport]) -> String {
    let mut out = format!("{PROBE_CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Probes one attribute: a linear probe with a bootstrap interval and an
/// MLP sweep across `cfg.seeds`, both trained on `train` and reported on
/// every named evaluation split. Without `with_mlp` the MLP columns are
/// zero.
pub fn probe_attribute(
    attribute: &str,
    classes: usize,
    train: (&Tensor, &[usize]),
    evals: &[(&str, &Tensor, &[usize])],
    cfg: &ProbeConfig,
    seed: u64,
    with_mlp: bool,
) -> Result<Vec<ProbeReport>> {
    let linear_cfg = ProbeConfig {
        kind: ProbeKind::Linear,
        ..cfg.clone()
    };
    let linear = train_probe(train.0, train.1, classes, &linear_cfg, seed)?;
    let mlps = if with_mlp {
        let mlp_cfg = ProbeConfig {
            kind: ProbeKind::Mlp,
            ..cfg.clone()
        };
        cfg.seeds
            .iter()
            .map(|&s| train_probe(train.0, train.1, classes, &mlp_cfg, s))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    evals
        .iter()
        .map(|&(split, x, y)| {
            check_labels(x, y, classes)?;
            let preds = linear.predict(x)?;
            let point = accuracy(&preds, y);
            let (ci_low, ci_high) =
                bootstrap_ci(&preds, y, cfg.bootstrap_resamples, cfg.confidence, seed)?;
            let accs = mlps
                .iter()
                .map(|p| evaluate_probe(p, x, y))
                .collect::<Result<Vec<_>>>()?;
            let (mlp_mean, mlp_std) = mean_std(&accs);
            Ok(ProbeReport {
                attribute: attribute.to_string(),
                split: split.to_string(),
                point_accuracy: point,
                ci_low,
                ci_high,
                mlp_mean,
                mlp_std,
                n_eval: y.len(),
            })
        })
        .collect()
}
