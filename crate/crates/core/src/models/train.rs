//! Baseline contrastive, adversarial, and causal-bottleneck training.

use std::fmt::Write as _;
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::Rng;

use super::bottleneck::{bottleneck_forward, covariance_penalty, CausalBottleneckParams};
use super::encoder::{EncoderParams, EncoderShape};
use super::heads::{
    summed_cross_entropy, AdversaryParams, ProjectionHead, PROJECTION_DIM, PROJECTION_HIDDEN,
};
use super::layers::{ParamLookup, ParamTree};
use crate::audio::{crop_or_pad, features_from_clip, resample, FrontendConfig, Waveform};
use crate::autodiff::{
    clip_global_norm, read_checkpoint, write_checkpoint, AdamState, Gradients, Tape, Tensor, Var,
};
use crate::contrastive::{augment_pair, nt_xent, AugmentationConfig, FeatureAugmentation};
use crate::data::{inverse_frequency_weights, CLASS_COUNTS};
use crate::error::{Error, Result};
use crate::rng::{item_rng, stream, stream_rng};

/// What the encoder consumes for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput {
    /// Precomputed `frames × dims` features (synthetic data, cached log-mels).
    Features(Tensor),
    /// Raw audio; views go through the augmentation and log-mel frontend.
    Audio(Waveform),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub speaker_id: String,
    pub input: ModelInput,
    /// Class ids for (gender, age, accent).
    pub labels: Option<[usize; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingSet {
    pub items: Vec<TrainItem>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewConfig {
    pub audio: AugmentationConfig,
    pub frontend: FrontendConfig,
    pub features: FeatureAugmentation,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            audio: AugmentationConfig::default(),
            frontend: FrontendConfig::default(),
            features: FeatureAugmentation::default(),
        }
    }
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn views<R: Rng + ?Sized>(
        &self,
        idx: usize,
        cfg: &ViewConfig,
        rng: &mut R,
    ) -> Result<(Tensor, Tensor)> {
        match &self.items[idx].input {
            ModelInput::Features(f) => Ok((cfg.features.view(f, rng), cfg.features.view(f, rng))),
            ModelInput::Audio(wav) => {
                let wav = resample(wav, cfg.frontend.target_rate)?;
                let (a, b) = augment_pair(&wav, &cfg.audio, rng);
                Ok((
                    features_from_clip(&a, &cfg.frontend)?.frames,
                    features_from_clip(&b, &cfg.frontend)?.frames,
                ))
            }
        }
    }

    /// Unaugmented encoder input. Audio is cropped or padded with a
    /// per-item deterministic offset.
    pub fn eval_input(&self, idx: usize, frontend: &FrontendConfig, seed: u64) -> Result<Tensor> {
        match &self.items[idx].input {
            ModelInput::Features(f) => Ok(f.clone()),
            ModelInput::Audio(wav) => {
                let wav = resample(wav, frontend.target_rate)?;
                let mut rng = item_rng(seed, stream::EVAL_CROP, idx as u64);
                let clip = crop_or_pad(&wav, frontend.clip_seconds, &mut rng);
                Ok(features_from_clip(&clip, frontend)?.frames)
            }
        }
    }

    fn labels(&self) -> Result<Vec<[usize; 3]>> {
        self.items
            .iter()
            .map(|it| it.labels.ok_or_else(|| Error::MissingLabel(it.id.clone())))
            .collect()
    }

    /// Per-attribute inverse-frequency class weights over labelled items.
    pub fn class_weights(&self) -> [Vec<f64>; 3] {
        let labels: Vec<[usize; 3]> = self.items.iter().filter_map(|i| i.labels).collect();
        [0, 1, 2].map(|a| {
            let ys: Vec<usize> = labels.iter().map(|l| l[a]).collect();
            inverse_frequency_weights(&ys, CLASS_COUNTS[a])
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BottleneckConfig {
    pub k: usize,
    /// (gender, age, accent) GRL weights on the residual adversaries.
    pub lambdas: [f64; 3],
    pub gamma: f64,
    pub freeze_encoder: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainMode {
    Baseline,
    Adversarial { lambda_adv: f64 },
    Bottleneck(BottleneckConfig),
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Adversarial { .. } => "adversarial",
            TrainMode::Bottleneck(_) => "bottleneck",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub temperature: f64,
    pub encoder: EncoderShape,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub views: ViewConfig,
    /// Global gradient-norm clip; off by default.
    pub clip_grad_norm: Option<f64>,
    /// Adversary learning rate as a multiple of `learning_rate`.
    pub adversary_lr_scale: f64,
    /// Extra adversary-only updates per batch on the detached embeddings,
    /// run after the joint step. Zero keeps training single-phase.
    pub adversary_steps: usize,
}

pub const CONTRASTIVE_LR: f64 = 1e-4;
pub const BOTTLENECK_LR: f64 = 1e-3;

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        let learning_rate = match mode {
            TrainMode::Bottleneck(_) => BOTTLENECK_LR,
            _ => CONTRASTIVE_LR,
        };
        TrainConfig {
            mode,
            learning_rate,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            temperature: 0.5,
            encoder: EncoderShape::default(),
            projection_hidden: PROJECTION_HIDDEN,
            projection_dim: PROJECTION_DIM,
            views: ViewConfig::default(),
            clip_grad_norm: None,
            adversary_lr_scale: 1.0,
            adversary_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0)
            || !(self.adversary_lr_scale > 0.0)
            || self.batch_size < 2
            || !(self.temperature > 0.0)
        {
            return bad(format!(
                "need learning_rate > 0, batch_size >= 2, temperature > 0 (got {}, {}, {})",
                self.learning_rate, self.batch_size, self.temperature
            ));
        }
        match self.mode {
            TrainMode::Adversarial { lambda_adv } if !(lambda_adv >= 0.0) => {
                bad(format!("lambda_adv must be >= 0, got {lambda_adv}"))
            }
            TrainMode::Bottleneck(b) if b.k == 0 || b.k >= self.encoder.embed_dim => bad(format!(
                "bottleneck needs 0 < k < d, got k = {}, d = {}",
                b.k, self.encoder.embed_dim
            )),
            TrainMode::Bottleneck(b)
                if b.lambdas.iter().any(|l| !(*l >= 0.0)) || !(b.gamma >= 0.0) =>
            {
                bad(format!("bottleneck weights must be >= 0: {b:?}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub contrastive: f64,
    pub adversarial: f64,
    pub demo: f64,
    pub residual: f64,
    pub covariance: f64,
}

impl EpochLoss {
    fn accumulate(&mut self, other: &EpochLoss) {
        self.total += other.total;
        self.contrastive += other.contrastive;
        self.adversarial += other.adversarial;
        self.demo += other.demo;
        self.residual += other.residual;
        self.covariance += other.covariance;
    }

    fn divide(&mut self, n: f64) {
        for v in [
            &mut self.total,
            &mut self.contrastive,
            &mut self.adversarial,
            &mut self.demo,
            &mut self.residual,
            &mut self.covariance,
        ] {
            *v /= n;
        }
    }
}

/// Per-epoch mean of each loss component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub epochs: Vec<EpochLoss>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,total,contrastive,adversarial,demo,residual,covariance\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
                e.epoch, e.total, e.contrastive, e.adversarial, e.demo, e.residual, e.covariance
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub encoder: EncoderParams,
    pub head: Option<ProjectionHead>,
    pub adversaries: Option<AdversaryParams>,
    pub bottleneck: Option<CausalBottleneckParams>,
    pub trace: LossTrace,
}

impl TrainedModel {
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named("encoder");
        if let Some(h) = &self.head {
            h.leaves("projection", &mut out);
        }
        if let Some(a) = &self.adversaries {
            a.leaves("adversary", &mut out);
        }
        if let Some(b) = &self.bottleneck {
            b.leaves("bottleneck", &mut out);
        }
        out
    }

    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> io::Result<()> {
        let named = self.named_params();
        write_checkpoint(out, named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Restores a model; bottleneck lambdas and gamma are not stored in the
    /// checkpoint and come from the caller.
    pub fn read_checkpoint<R: io::Read>(
        input: &mut R,
        bottleneck: Option<([f64; 3], f64)>,
    ) -> Result<Self> {
        let mut lookup = ParamLookup::new(read_checkpoint(input)?);
        let encoder = EncoderParams::load(&mut lookup, "encoder")?;
        let head = if lookup.contains_prefix("projection") {
            Some(ProjectionHead::load(&mut lookup, "projection")?)
        } else {
            None
        };
        let adversaries = if lookup.contains_prefix("adversary") {
            Some(AdversaryParams::load(&mut lookup, "adversary")?)
        } else {
            None
        };
        let bottleneck = if lookup.contains_prefix("bottleneck") {
            let (lambdas, gamma) = bottleneck.unwrap_or(([0.0; 3], 0.0));
            Some(CausalBottleneckParams::load(
                &mut lookup,
                "bottleneck",
                lambdas,
                gamma,
            )?)
        } else {
            None
        };
        Ok(TrainedModel {
            encoder,
            head,
            adversaries,
            bottleneck,
            trace: LossTrace::default(),
        })
    }
}

pub(crate) fn vars_of<P: ParamTree<Var>>(p: &P) -> Vec<Var> {
    p.named("").into_iter().map(|(_, v)| *v).collect()
}

fn collect_grads(grads: &Gradients, tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| grads.get_or_zeros(v, tape.value(v)))
        .collect()
}

fn as_diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { epoch },
        other => other,
    }
}

fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn init_encoder(cfg: &TrainConfig) -> EncoderParams {
    EncoderParams::init(cfg.encoder, &mut stream_rng(cfg.seed, stream::ENCODER_INIT))
}

fn init_head(cfg: &TrainConfig) -> ProjectionHead {
    ProjectionHead::init(
        cfg.encoder.embed_dim,
        cfg.projection_hidden,
        cfg.projection_dim,
        &mut stream_rng(cfg.seed, stream::HEAD_INIT),
    )
}

fn doubled(labels: &[[usize; 3]], batch: &[usize]) -> Vec<[usize; 3]> {
    batch.iter().flat_map(|&i| [labels[i], labels[i]]).collect()
}

/// Trains encoder and projection head on NT-Xent; returns the encoder with
/// the head kept alongside for checkpointing.
pub fn train_baseline(set: &TrainingSet, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_contrastive(set, cfg, None)
}

/// NT-Xent plus `lambda_adv · Σ_a CE_a` from per-attribute adversaries
/// reading the embedding through a unit GRL. Encoder, head and adversaries
/// share one Adam update per batch.
pub fn train_adversarial(set: &TrainingSet, cfg: &TrainConfig) -> Result<TrainedModel> {
    let TrainMode::Adversarial { lambda_adv } = cfg.mode else {
        return Err(Error::Config(
            "train_adversarial needs adversarial mode".into(),
        ));
    };
    train_contrastive(set, cfg, Some(lambda_adv))
}

fn train_contrastive(
    set: &TrainingSet,
    cfg: &TrainConfig,
    lambda_adv: Option<f64>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let labels = match lambda_adv {
        Some(_) => Some(set.labels()?),
        None => None,
    };
    let class_weights = set.class_weights();
    let mut encoder = init_encoder(cfg);
    let mut head = init_head(cfg);
    let mut adversaries = lambda_adv.map(|_| {
        AdversaryParams::init(
            cfg.encoder.embed_dim,
            CLASS_COUNTS,
            &mut stream_rng(cfg.seed, stream::ADVERSARY_INIT),
        )
    });
    let mut adam = {
        let mut all: Vec<&Tensor> = Vec::new();
        all.extend(encoder.named("").into_iter().map(|(_, t)| t));
        all.extend(head.named("").into_iter().map(|(_, t)| t));
        AdamState::new(cfg.learning_rate, all)
    };
    let n_main = encoder.named("").len() + head.named("").len();
    let mut adversary_adam = adversaries.as_ref().map(|a| {
        AdamState::new(
            cfg.learning_rate * cfg.adversary_lr_scale,
            a.named("").into_iter().map(|(_, t)| t),
        )
    });
    let mut order_rng = stream_rng(cfg.seed, stream::BATCH_ORDER);
    let mut aug_rng = stream_rng(cfg.seed, stream::AUGMENT);
    let mut trace = LossTrace::default();

    for epoch in 1..=cfg.epochs {
        let mut sum = EpochLoss {
            epoch,
            ..Default::default()
        };
        let batches = shuffled_batches(set.len(), cfg.batch_size, &mut order_rng);
        for batch in &batches {
            let mut views = Vec::with_capacity(2 * batch.len());
            for &i in batch {
                let (a, b) = set.views(i, &cfg.views, &mut aug_rng)?;
                views.push(a);
                views.push(b);
            }
            let step = (|| -> Result<(EpochLoss, Vec<Tensor>, Tensor)> {
                let mut tape = Tape::new();
                let enc = encoder.bind(&mut tape, true);
                let hd = head.bind(&mut tape, true);
                let adv = adversaries.as_ref().map(|a| a.bind(&mut tape, true));
                let z = enc.forward(&mut tape, views.iter())?;
                let proj = hd.forward(&mut tape, z)?;
                let proj = tape.l2_normalize(proj)?;
                let con = nt_xent(&mut tape, proj, cfg.temperature)?;
                let mut loss = con;
                let mut parts = EpochLoss {
                    contrastive: tape.value(con).item(),
                    ..Default::default()
                };
                if let (Some(adv), Some(lambda), Some(labels)) = (&adv, lambda_adv, &labels) {
                    let logits = adv.logits(&mut tape, z, [1.0; 3])?;
                    let ce = summed_cross_entropy(
                        &mut tape,
                        logits,
                        &doubled(labels, batch),
                        &class_weights,
                    )?;
                    parts.adversarial = tape.value(ce).item();
                    let weighted = tape.scale(ce, lambda)?;
                    loss = tape.add(loss, weighted)?;
                }
                parts.total = tape.value(loss).item();
                let grads = tape.backward(loss)?;
                let mut vars = vars_of(&enc);
                vars.extend(vars_of(&hd));
                if let Some(a) = &adv {
                    vars.extend(vars_of(a));
                }
                Ok((
                    parts,
                    collect_grads(&grads, &tape, &vars),
                    tape.value(z).clone(),
                ))
            })()
            .map_err(as_diverged(epoch))?;
            let (parts, mut grads, z_value) = step;
            if let Some(max_norm) = cfg.clip_grad_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            let adversary_grads = grads.split_off(n_main);
            let mut params = encoder.params_mut();
            params.extend(head.params_mut());
            adam.step(&mut params, &grads);
            if let (Some(a), Some(state), Some(labels)) =
                (adversaries.as_mut(), adversary_adam.as_mut(), &labels)
            {
                state.step(&mut a.params_mut(), &adversary_grads);
                refit_adversary(
                    a,
                    state,
                    &z_value,
                    &doubled(labels, batch),
                    &class_weights,
                    cfg.adversary_steps,
                )
                .map_err(as_diverged(epoch))?;
            }
            sum.accumulate(&parts);
        }
        sum.divide(batches.len().max(1) as f64);
        if !sum.total.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        log::debug!("epoch {epoch}: loss {:.6}", sum.total);
        trace.epochs.push(sum);
    }
    Ok(TrainedModel {
        encoder,
        head: Some(head),
        adversaries,
        bottleneck: None,
        trace,
    })
}

/// Adam steps on the adversaries alone, with `z` held fixed.
fn refit_adversary(
    adversaries: &mut AdversaryParams,
    state: &mut AdamState,
    z: &Tensor,
    labels: &[[usize; 3]],
    class_weights: &[Vec<f64>; 3],
    steps: usize,
) -> Result<()> {
    for _ in 0..steps {
        let mut tape = Tape::new();
        let adv = adversaries.bind(&mut tape, true);
        let input = tape.constant(z.clone());
        let logits = adv.logits(&mut tape, input, [1.0; 3])?;
        let ce = summed_cross_entropy(&mut tape, logits, labels, class_weights)?;
        let grads = tape.backward(ce)?;
        let grads = collect_grads(&grads, &tape, &vars_of(&adv));
        state.step(&mut adversaries.params_mut(), &grads);
    }
    Ok(())
}

/// Embeds every item's unaugmented input, in chunks.
pub fn embed_set(
    encoder: &EncoderParams,
    set: &TrainingSet,
    frontend: &FrontendConfig,
    seed: u64,
) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let d = encoder.shape().embed_dim;
    let mut data = Vec::with_capacity(set.len() * d);
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let inputs = chunk
            .iter()
            .map(|&i| set.eval_input(i, frontend, seed))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = inputs.iter().collect();
        data.extend_from_slice(encoder.embed_batch(&refs)?.data());
    }
    Tensor::matrix(set.len(), d, data)
}

/// Trains the causal bottleneck on top of a pretrained encoder.
///
/// Loss: `Σ_a CE(demo head_a) + Σ_a CE(residual adversary_a) + γ·L_cov`,
/// with each residual adversary behind a GRL of strength `λ_a`. With
/// `freeze_encoder = false` the encoder is updated too and NT-Xent on the
/// unit-normalized residual branch is added.
pub fn train_bottleneck(
    set: &TrainingSet,
    pretrained: &EncoderParams,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let TrainMode::Bottleneck(bcfg) = cfg.mode else {
        return Err(Error::Config(
            "train_bottleneck needs bottleneck mode".into(),
        ));
    };
    let shape = pretrained.shape();
    if bcfg.k == 0 || bcfg.k >= shape.embed_dim {
        return Err(Error::Config(format!(
            "bottleneck needs 0 < k < d, got k = {}, d = {}",
            bcfg.k, shape.embed_dim
        )));
    }
    let cfg = TrainConfig {
        encoder: shape,
        ..cfg.clone()
    };
    cfg.validate()?;
    let labels = set.labels()?;
    let class_weights = set.class_weights();
    let mut encoder = pretrained.clone();
    let mut bn = CausalBottleneckParams::init(
        shape.embed_dim,
        bcfg.k,
        CLASS_COUNTS,
        bcfg.lambdas,
        bcfg.gamma,
        &mut stream_rng(cfg.seed, stream::BOTTLENECK_INIT),
    )?;
    let frozen_z = if bcfg.freeze_encoder {
        Some(embed_set(&encoder, set, &cfg.views.frontend, cfg.seed)?)
    } else {
        None
    };
    // Residual adversaries are the trailing leaves of the bottleneck tree and
    // get their own optimizer state.
    let n_bn = bn.named("").len();
    let n_adv = bn.residual_adversaries.named("").len();
    let mut adam = {
        let bn_leaves = bn.named("");
        let mut all: Vec<&Tensor> = bn_leaves[..n_bn - n_adv].iter().map(|(_, t)| *t).collect();
        if !bcfg.freeze_encoder {
            all.extend(encoder.named("").into_iter().map(|(_, t)| t));
        }
        AdamState::new(cfg.learning_rate, all)
    };
    let mut adversary_adam = AdamState::new(
        cfg.learning_rate * cfg.adversary_lr_scale,
        bn.residual_adversaries
            .named("")
            .into_iter()
            .map(|(_, t)| t),
    );
    let mut order_rng = stream_rng(cfg.seed, stream::BATCH_ORDER);
    let mut aug_rng = stream_rng(cfg.seed, stream::AUGMENT);
    let mut trace = LossTrace::default();

    for epoch in 1..=cfg.epochs {
        let mut sum = EpochLoss {
            epoch,
            ..Default::default()
        };
        let batches = shuffled_batches(set.len(), cfg.batch_size, &mut order_rng);
        for batch in &batches {
            let views = if frozen_z.is_none() {
                let mut v = Vec::with_capacity(2 * batch.len());
                for &i in batch {
                    let (a, b) = set.views(i, &cfg.views, &mut aug_rng)?;
                    v.push(a);
                    v.push(b);
                }
                v
            } else {
                Vec::new()
            };
            let step = (|| -> Result<(EpochLoss, Vec<Tensor>, Tensor, Vec<[usize; 3]>)> {
                let mut tape = Tape::new();
                let bnv = bn.bind(&mut tape, true);
                let (z, enc_vars, batch_labels) = match &frozen_z {
                    Some(all) => {
                        let d = all.cols();
                        let data = batch
                            .iter()
                            .flat_map(|&i| all.row(i).iter().copied())
                            .collect();
                        let z = tape.constant(Tensor::matrix(batch.len(), d, data)?);
                        let ys: Vec<[usize; 3]> = batch.iter().map(|&i| labels[i]).collect();
                        (z, Vec::new(), ys)
                    }
                    None => {
                        let enc = encoder.bind(&mut tape, true);
                        let z = enc.forward(&mut tape, views.iter())?;
                        (z, vars_of(&enc), doubled(&labels, batch))
                    }
                };
                let out = bottleneck_forward(&mut tape, z, &bnv)?;
                let demo = summed_cross_entropy(
                    &mut tape,
                    out.demo_logits,
                    &batch_labels,
                    &class_weights,
                )?;
                let residual = summed_cross_entropy(
                    &mut tape,
                    out.residual_logits,
                    &batch_labels,
                    &class_weights,
                )?;
                let cov = covariance_penalty(&mut tape, out.z_demo, out.z_res)?;
                let mut parts = EpochLoss {
                    demo: tape.value(demo).item(),
                    residual: tape.value(residual).item(),
                    covariance: tape.value(cov).item(),
                    ..Default::default()
                };
                let weighted_cov = tape.scale(cov, bcfg.gamma)?;
                let mut loss = tape.add(demo, residual)?;
                loss = tape.add(loss, weighted_cov)?;
                if frozen_z.is_none() {
                    let res_unit = tape.l2_normalize(out.z_res)?;
                    let con = nt_xent(&mut tape, res_unit, cfg.temperature)?;
                    parts.contrastive = tape.value(con).item();
                    loss = tape.add(loss, con)?;
                }
                parts.total = tape.value(loss).item();
                let grads = tape.backward(loss)?;
                let mut vars = vars_of(&bnv);
                vars.extend(enc_vars);
                let z_res = tape.value(out.z_res).clone();
                Ok((
                    parts,
                    collect_grads(&grads, &tape, &vars),
                    z_res,
                    batch_labels,
                ))
            })()
            .map_err(as_diverged(epoch))?;
            let (parts, mut grads, z_res, batch_labels) = step;
            if let Some(max_norm) = cfg.clip_grad_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            let adversary_grads: Vec<Tensor> = grads.drain(n_bn - n_adv..n_bn).collect();
            let mut params = bn.params_mut();
            let mut adversary_params = params.split_off(n_bn - n_adv);
            if frozen_z.is_none() {
                params.extend(encoder.params_mut());
            }
            adam.step(&mut params, &grads);
            adversary_adam.step(&mut adversary_params, &adversary_grads);
            drop(adversary_params);
            drop(params);
            refit_adversary(
                &mut bn.residual_adversaries,
                &mut adversary_adam,
                &z_res,
                &batch_labels,
                &class_weights,
                cfg.adversary_steps,
            )
            .map_err(as_diverged(epoch))?;
            sum.accumulate(&parts);
        }
        sum.divide(batches.len().max(1) as f64);
        if !sum.total.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        log::debug!("bottleneck epoch {epoch}: loss {:.6}", sum.total);
        trace.epochs.push(sum);
    }
    Ok(TrainedModel {
        encoder,
        head: None,
        adversaries: None,
        bottleneck: Some(bn),
        trace,
    })
}

/// Dispatches on `cfg.mode`. Bottleneck mode needs `pretrained`.
pub fn train(
    set: &TrainingSet,
    cfg: &TrainConfig,
    pretrained: Option<&EncoderParams>,
) -> Result<TrainedModel> {
    match cfg.mode {
        TrainMode::Baseline => train_baseline(set, cfg),
        TrainMode::Adversarial { .. } => train_adversarial(set, cfg),
        TrainMode::Bottleneck(_) => {
            let enc = pretrained.ok_or_else(|| {
                Error::Config("bottleneck training needs a pretrained encoder".into())
            })?;
            train_bottleneck(set, enc, cfg)
        }
    }
}
