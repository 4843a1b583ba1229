//! Flat `key = value` experiment configuration.
//!
//! Keys carry a dotted section prefix (`train.epochs`, `sweep.lambdas`).
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated; lambda triples are colon-separated and joined by `;`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::audio::FrontendConfig;
use crate::contrastive::{AugmentationConfig, FeatureAugmentation};
use crate::data::{AgeSchema, SynthConfig};
use crate::error::{Error, Result};
use crate::models::{
    BottleneckConfig, EncoderShape, TrainConfig, TrainMode, ViewConfig, BOTTLENECK_LR,
    CONTRASTIVE_LR, PROJECTION_DIM, PROJECTION_HIDDEN,
};
use crate::probes::{InputScaling, ProbeConfig};
use crate::verification::TrialConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic {
        config: SynthConfig,
        waveform_seconds: Option<f64>,
    },
    Manifest {
        path: PathBuf,
        audio_root: PathBuf,
        schema: AgeSchema,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub ks: Vec<usize>,
    pub triples: Vec<[f64; 3]>,
}

impl SweepConfig {
    pub fn standard_grid() -> Self {
        SweepConfig {
            lambdas: vec![0.2, 0.5, 1.0, 2.0, 5.0],
            ks: vec![32, 64, 76, 88, 100],
            triples: vec![[0.01, 0.01, 0.01], [0.1, 0.01, 0.01], [0.5, 0.05, 0.05]],
        }
    }
}

/// Everything a run needs, resolved from a config file plus overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub dataset: DatasetSource,
    pub split_ratios: [f64; 3],
    pub frontend: FrontendConfig,
    pub augment: AugmentationConfig,
    pub feature_augment: FeatureAugmentation,
    pub encoder: EncoderShape,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub learning_rate: f64,
    pub bottleneck_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub bottleneck_epochs: usize,
    pub temperature: f64,
    pub adversary_lr_scale: f64,
    pub adversary_steps: usize,
    pub clip_grad_norm: Option<f64>,
    /// Mode for single-run `train`.
    pub mode: TrainMode,
    pub gamma: f64,
    pub freeze_encoder: bool,
    pub sweep: SweepConfig,
    pub probe: ProbeConfig,
    pub probe_mlp: bool,
    pub trials: TrialConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output: PathBuf::from("dseb_out"),
            dataset: DatasetSource::Synthetic {
                config: SynthConfig::default(),
                waveform_seconds: None,
            },
            split_ratios: [0.8, 0.1, 0.1],
            frontend: FrontendConfig::default(),
            augment: AugmentationConfig::default(),
            feature_augment: FeatureAugmentation::default(),
            encoder: EncoderShape::default(),
            projection_hidden: PROJECTION_HIDDEN,
            projection_dim: PROJECTION_DIM,
            learning_rate: CONTRASTIVE_LR,
            bottleneck_learning_rate: BOTTLENECK_LR,
            batch_size: 64,
            epochs: 10,
            bottleneck_epochs: 10,
            temperature: 0.5,
            adversary_lr_scale: 1.0,
            adversary_steps: 0,
            clip_grad_norm: None,
            mode: TrainMode::Baseline,
            gamma: 1.0,
            freeze_encoder: true,
            sweep: SweepConfig {
                lambdas: Vec::new(),
                ks: Vec::new(),
                triples: Vec::new(),
            },
            probe: ProbeConfig::default(),
            probe_mlp: true,
            trials: TrialConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected true or false, got `{value}`"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(':')
        .map(|s| parse_value(key, s.trim()))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| {
        Error::Config(format!(
            "`{key}`: a lambda triple needs three values, got `{value}`"
        ))
    })
}

fn parse_triples(key: &str, value: &str) -> Result<Vec<[f64; 3]>> {
    value
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_triple(key, s))
        .collect()
}

/// Ordered raw key/value pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawConfig {
    pub entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::MalformedRow {
                line: i + 1,
                reason: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::MalformedRow {
                    line: i + 1,
                    reason: "empty key".into(),
                });
            }
            if entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::MalformedRow {
                    line: i + 1,
                    reason: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(RawConfig { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<(Self, RawConfig)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw = RawConfig::parse(&text).map_err(|e| match e {
            Error::MalformedRow { line, reason } => {
                Error::data(path, format!("line {line}: {reason}"))
            }
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok((Self::from_raw(&raw, base)?, raw))
    }

    /// Builds a config from raw entries. Relative paths resolve against
    /// `base`. Unknown keys are rejected.
    pub fn from_raw(raw: &RawConfig, base: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut synth = SynthConfig::default();
        let mut kind = "synth".to_string();
        let mut manifest: Option<PathBuf> = None;
        let mut audio_root: Option<PathBuf> = None;
        let mut schema = AgeSchema::DecadeLabels;
        let mut waveform_seconds = None;
        let mut lambda_adv = None;
        let mut k = None;
        let mut lambdas = None;
        let mut mode = "baseline".to_string();
        let mut synth_seed_set = false;

        for (key, value) in &raw.entries {
            let v = value.as_str();
            let key = key.as_str();
            match key {
                "seed" => cfg.seed = parse_value(key, v)?,
                "output" => cfg.output = base.join(v),
                "dataset.kind" => kind = v.to_string(),
                "dataset.manifest" => manifest = Some(base.join(v)),
                "dataset.audio_root" => audio_root = Some(base.join(v)),
                "dataset.age_schema" => {
                    schema = AgeSchema::parse(v)
                        .ok_or_else(|| Error::Config(format!("`{key}`: unknown schema `{v}`")))?
                }
                "dataset.split_ratios" => {
                    let r: Vec<f64> = parse_list(key, v)?;
                    cfg.split_ratios = r
                        .try_into()
                        .map_err(|_| Error::Config(format!("`{key}` needs three ratios")))?;
                }
                "synth.n_speakers" => synth.n_speakers = parse_value(key, v)?,
                "synth.utterances_per_speaker" => {
                    synth.utterances_per_speaker = parse_value(key, v)?
                }
                "synth.feature_dim" => synth.feature_dim = parse_value(key, v)?,
                "synth.frames_per_utterance" => synth.frames_per_utterance = parse_value(key, v)?,
                "synth.gender_strength" => synth.gender_direction_strength = parse_value(key, v)?,
                "synth.age_strength" => synth.age_structure_strength = parse_value(key, v)?,
                "synth.accent_strength" => synth.accent_structure_strength = parse_value(key, v)?,
                "synth.nonlinear_age" => synth.nonlinear_age = parse_bool(key, v)?,
                "synth.speaker_spread" => synth.speaker_spread = parse_value(key, v)?,
                "synth.utterance_noise" => synth.utterance_noise = parse_value(key, v)?,
                "synth.frame_noise" => synth.frame_noise = parse_value(key, v)?,
                "synth.seed" => {
                    synth.seed = parse_value(key, v)?;
                    synth_seed_set = true;
                }
                "synth.waveform_seconds" => waveform_seconds = Some(parse_value(key, v)?),
                "frontend.sample_rate" => cfg.frontend.target_rate = parse_value(key, v)?,
                "frontend.window_ms" => cfg.frontend.window_ms = parse_value(key, v)?,
                "frontend.hop_ms" => cfg.frontend.hop_ms = parse_value(key, v)?,
                "frontend.n_mels" => cfg.frontend.n_mels = parse_value(key, v)?,
                "frontend.clip_seconds" => {
                    cfg.frontend.clip_seconds = parse_value(key, v)?;
                    cfg.augment.clip_seconds = cfg.frontend.clip_seconds;
                }
                "frontend.log_floor" => cfg.frontend.log_floor = parse_value(key, v)?,
                "frontend.per_band_mvn" => cfg.frontend.per_band_mvn = parse_bool(key, v)?,
                "augment.noise_std" => cfg.augment.noise_std = parse_value(key, v)?,
                "augment.gain_min" => cfg.augment.gain_range.0 = parse_value(key, v)?,
                "augment.gain_max" => cfg.augment.gain_range.1 = parse_value(key, v)?,
                "augment.crop_frames" => cfg.feature_augment.crop_frames = parse_value(key, v)?,
                "augment.feature_noise" => cfg.feature_augment.noise_std = parse_value(key, v)?,
                "train.mode" => mode = v.to_string(),
                "train.lambda_adv" => lambda_adv = Some(parse_value(key, v)?),
                "train.k" => k = Some(parse_value(key, v)?),
                "train.lambdas" => lambdas = Some(parse_triple(key, v)?),
                "train.gamma" => cfg.gamma = parse_value(key, v)?,
                "train.freeze_encoder" => cfg.freeze_encoder = parse_bool(key, v)?,
                "train.learning_rate" => cfg.learning_rate = parse_value(key, v)?,
                "train.bottleneck_learning_rate" => {
                    cfg.bottleneck_learning_rate = parse_value(key, v)?
                }
                "train.batch_size" => cfg.batch_size = parse_value(key, v)?,
                "train.epochs" => cfg.epochs = parse_value(key, v)?,
                "train.bottleneck_epochs" => cfg.bottleneck_epochs = parse_value(key, v)?,
                "train.temperature" => cfg.temperature = parse_value(key, v)?,
                "train.adversary_lr_scale" => cfg.adversary_lr_scale = parse_value(key, v)?,
                "train.adversary_steps" => cfg.adversary_steps = parse_value(key, v)?,
                "train.clip_grad_norm" => cfg.clip_grad_norm = Some(parse_value(key, v)?),
                "model.hidden" => cfg.encoder.hidden = parse_value(key, v)?,
                "model.embed_dim" => cfg.encoder.embed_dim = parse_value(key, v)?,
                "model.projection_hidden" => cfg.projection_hidden = parse_value(key, v)?,
                "model.projection_dim" => cfg.projection_dim = parse_value(key, v)?,
                "sweep.lambdas" => cfg.sweep.lambdas = parse_list(key, v)?,
                "sweep.ks" => cfg.sweep.ks = parse_list(key, v)?,
                "sweep.triples" => cfg.sweep.triples = parse_triples(key, v)?,
                "probe.hidden" => cfg.probe.hidden = parse_value(key, v)?,
                "probe.learning_rate" => cfg.probe.learning_rate = parse_value(key, v)?,
                "probe.epochs" => cfg.probe.epochs = parse_value(key, v)?,
                "probe.batch_size" => cfg.probe.batch_size = parse_value(key, v)?,
                "probe.seeds" => cfg.probe.seeds = parse_list(key, v)?,
                "probe.resamples" => cfg.probe.bootstrap_resamples = parse_value(key, v)?,
                "probe.confidence" => cfg.probe.confidence = parse_value(key, v)?,
                "probe.mlp" => cfg.probe_mlp = parse_bool(key, v)?,
                "probe.scaling" => {
                    cfg.probe.scaling = InputScaling::parse(v)
                        .ok_or_else(|| Error::Config(format!("`{key}`: unknown scaling `{v}`")))?
                }
                "verify.genuine_cap" => {
                    cfg.trials.genuine_cap = match v {
                        "none" | "all" => None,
                        _ => Some(parse_value(key, v)?),
                    }
                }
                "verify.impostor_ratio" => cfg.trials.impostor_ratio = parse_value(key, v)?,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
        }
        if !synth_seed_set {
            synth.seed = cfg.seed;
        }

        cfg.dataset = match kind.as_str() {
            "synth" => DatasetSource::Synthetic {
                config: synth,
                waveform_seconds,
            },
            "manifest" => {
                let path = manifest
                    .ok_or_else(|| Error::Config("`dataset.manifest` is required".into()))?;
                let audio_root = audio_root
                    .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
                DatasetSource::Manifest {
                    path,
                    audio_root,
                    schema,
                }
            }
            other => return Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        };
        if let DatasetSource::Synthetic {
            config,
            waveform_seconds: None,
        } = &cfg.dataset
        {
            cfg.encoder.input_dim = config.feature_dim;
        } else {
            cfg.encoder.input_dim = cfg.frontend.n_mels;
        }

        cfg.mode = match mode.as_str() {
            "baseline" => TrainMode::Baseline,
            "adversarial" => TrainMode::Adversarial {
                lambda_adv: lambda_adv.ok_or_else(|| {
                    Error::Config("adversarial mode needs `train.lambda_adv`".into())
                })?,
            },
            "bottleneck" => TrainMode::Bottleneck(BottleneckConfig {
                k: k.ok_or_else(|| Error::Config("bottleneck mode needs `train.k`".into()))?,
                lambdas: lambdas
                    .ok_or_else(|| Error::Config("bottleneck mode needs `train.lambdas`".into()))?,
                gamma: cfg.gamma,
                freeze_encoder: cfg.freeze_encoder,
            }),
            other => return Err(Error::Config(format!("unknown train mode `{other}`"))),
        };
        if !matches!(cfg.mode, TrainMode::Adversarial { .. }) && lambda_adv.is_some() {
            return Err(Error::Config(
                "`train.lambda_adv` only applies to adversarial mode".into(),
            ));
        }
        if !matches!(cfg.mode, TrainMode::Bottleneck(_)) && (k.is_some() || lambdas.is_some()) {
            return Err(Error::Config(
                "`train.k` and `train.lambdas` only apply to bottleneck mode".into(),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.augment.validate()?;
        self.probe.validate()?;
        if let DatasetSource::Synthetic { config, .. } = &self.dataset {
            config.validate()?;
        }
        if self
            .sweep
            .ks
            .iter()
            .any(|&k| k == 0 || k >= self.encoder.embed_dim)
        {
            return Err(Error::Config(format!(
                "every sweep k must satisfy 0 < k < {}",
                self.encoder.embed_dim
            )));
        }
        if self.probe_mlp && self.probe.seeds.len() < 2 {
            return Err(Error::Config(
                "`probe.seeds` needs at least two seeds".into(),
            ));
        }
        self.train_config(self.mode).validate()
    }

    pub fn views(&self) -> ViewConfig {
        ViewConfig {
            audio: self.augment.clone(),
            frontend: self.frontend.clone(),
            features: self.feature_augment.clone(),
        }
    }

    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        let bottleneck = matches!(mode, TrainMode::Bottleneck(_));
        TrainConfig {
            mode,
            learning_rate: if bottleneck {
                self.bottleneck_learning_rate
            } else {
                self.learning_rate
            },
            batch_size: self.batch_size,
            epochs: if bottleneck {
                self.bottleneck_epochs
            } else {
                self.epochs
            },
            seed: self.seed,
            temperature: self.temperature,
            encoder: self.encoder,
            projection_hidden: self.projection_hidden,
            projection_dim: self.projection_dim,
            views: self.views(),
            clip_grad_norm: self.clip_grad_norm,
            adversary_lr_scale: self.adversary_lr_scale,
            adversary_steps: self.adversary_steps,
        }
    }

    pub fn bottleneck_mode(&self, k: usize, lambdas: [f64; 3]) -> TrainMode {
        TrainMode::Bottleneck(BottleneckConfig {
            k,
            lambdas,
            gamma: self.gamma,
            freeze_encoder: self.freeze_encoder,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_lists() {
        let text = "# demo\nseed = 3\nsweep.lambdas = 0.2, 5.0\nsweep.ks = 32\nsweep.triples = 0.5:0.05:0.05; 0.1:0.01:0.01\ntrain.epochs = 2\n";
        let raw = RawConfig::parse(text).unwrap();
        let cfg = ExperimentConfig::from_raw(&raw, Path::new(".")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.sweep.lambdas, vec![0.2, 5.0]);
        assert_eq!(
            cfg.sweep.triples,
            vec![[0.5, 0.05, 0.05], [0.1, 0.01, 0.01]]
        );
        assert_eq!(cfg.epochs, 2);
        match cfg.dataset {
            DatasetSource::Synthetic { config, .. } => assert_eq!(config.seed, 3),
            _ => panic!("expected synthetic dataset"),
        }
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let raw = RawConfig::parse("train.epoch = 2").unwrap();
        assert!(ExperimentConfig::from_raw(&raw, Path::new(".")).is_err());
        assert!(RawConfig::parse("no equals sign").is_err());
        assert!(RawConfig::parse("a = 1\na = 2").is_err());
    }

    #[test]
    fn mode_fields_must_match() {
        let raw = RawConfig::parse("train.mode = adversarial").unwrap();
        assert!(ExperimentConfig::from_raw(&raw, Path::new(".")).is_err());
        let raw = RawConfig::parse("train.lambda_adv = 1.0").unwrap();
        assert!(ExperimentConfig::from_raw(&raw, Path::new(".")).is_err());
        let raw = RawConfig::parse(
            "train.mode = bottleneck\ntrain.k = 32\ntrain.lambdas = 0.5:0.05:0.05",
        )
        .unwrap();
        let cfg = ExperimentConfig::from_raw(&raw, Path::new(".")).unwrap();
        assert!(matches!(cfg.mode, TrainMode::Bottleneck(b) if b.k == 32));
    }

    #[test]
    fn render_round_trips() {
        let raw = RawConfig::parse("b = 2\na = 1\n").unwrap();
        assert_eq!(RawConfig::parse(&raw.render()).unwrap(), raw);
        assert_eq!(raw.render(), "a = 1\nb = 2\n");
    }
}
