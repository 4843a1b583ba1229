//! Synthetic speakers with planted demographic structure.
//!
//! Each speaker gets a random centroid; each utterance is the centroid plus
//! noise, and each frame the utterance vector plus smaller noise. Gender is
//! planted as a sign along axis 0 (linearly decodable). Age lives in axes 1
//! and 2: as concentric shells at a random angle when `nonlinear_age` is
//! set (no linear signal), otherwise as an offset along axis 1. Accent adds
//! one of five random unit directions.

use std::f64::consts::PI;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::Normal;

use super::labels::{Demographics, CLASS_COUNTS};
use crate::audio::Waveform;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{item_rng, stream, stream_rng};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub feature_dim: usize,
    pub frames_per_utterance: usize,
    pub gender_direction_strength: f64,
    pub age_structure_strength: f64,
    pub accent_structure_strength: f64,
    pub nonlinear_age: bool,
    /// Std of speaker centroids.
    pub speaker_spread: f64,
    /// Std of the per-utterance offset from the centroid.
    pub utterance_noise: f64,
    /// Std of per-frame jitter around the utterance vector.
    pub frame_noise: f64,
    /// Class priors per attribute (gender, age, accent).
    pub priors: [Vec<f64>; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_speakers: 200,
            utterances_per_speaker: 4,
            feature_dim: 16,
            frames_per_utterance: 10,
            gender_direction_strength: 5.0,
            age_structure_strength: 3.0,
            accent_structure_strength: 0.5,
            nonlinear_age: true,
            speaker_spread: 1.0,
            utterance_noise: 0.3,
            frame_noise: 0.3,
            priors: [vec![0.5; 2], vec![1.0 / 3.0; 3], vec![0.2; 5]],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let strengths = [
            self.gender_direction_strength,
            self.age_structure_strength,
            self.accent_structure_strength,
        ];
        let priors_ok = self.priors.iter().zip(CLASS_COUNTS).all(|(p, c)| {
            p.len() == c && p.iter().all(|w| *w >= 0.0) && p.iter().sum::<f64>() > 0.0
        });
        if self.n_speakers >= 4
            && self.utterances_per_speaker >= 1
            && self.feature_dim >= 4
            && self.frames_per_utterance >= 1
            && strengths.iter().all(|s| *s >= 0.0)
            && priors_ok
        {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic config: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpeaker {
    pub id: String,
    pub demographics: Demographics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub speaker: usize,
    /// Utterance-level vector (centroid plus utterance noise).
    pub vector: Vec<f64>,
    /// `frames × feature_dim`.
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub speakers: Vec<SynthSpeaker>,
    pub utterances: Vec<SynthUtterance>,
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, stream::SYNTH);
    let dim = cfg.feature_dim;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let accent_dirs: Vec<Vec<f64>> = (0..CLASS_COUNTS[2])
        .map(|_| unit_vector(dim, &mut rng))
        .collect();
    let samplers: Vec<WeightedIndex<f64>> = cfg
        .priors
        .iter()
        .map(|p| WeightedIndex::new(p).expect("validated priors"))
        .collect();

    let mut speakers = Vec::with_capacity(cfg.n_speakers);
    let mut utterances = Vec::with_capacity(cfg.n_speakers * cfg.utterances_per_speaker);
    for s in 0..cfg.n_speakers {
        let ids = [0, 1, 2].map(|a| samplers[a].sample(&mut rng));
        let demographics = Demographics::from_class_ids(ids).expect("sampled in range");
        let mut centroid: Vec<f64> = (0..dim)
            .map(|_| cfg.speaker_spread * std_normal.sample(&mut rng))
            .collect();
        let sign = if ids[0] == 0 { 1.0 } else { -1.0 };
        centroid[0] += sign * cfg.gender_direction_strength;
        if cfg.nonlinear_age {
            let radius = cfg.age_structure_strength * (1 + ids[1]) as f64;
            let angle = rng.gen_range(0.0..2.0 * PI);
            centroid[1] = radius * angle.cos();
            centroid[2] = radius * angle.sin();
        } else {
            centroid[1] += cfg.age_structure_strength * (ids[1] as f64 - 1.0);
        }
        for (c, d) in centroid.iter_mut().zip(&accent_dirs[ids[2]]) {
            *c += cfg.accent_structure_strength * d;
        }
        let speaker_id = format!("spk{s:05}");
        for u in 0..cfg.utterances_per_speaker {
            let vector: Vec<f64> = centroid
                .iter()
                .map(|c| c + cfg.utterance_noise * std_normal.sample(&mut rng))
                .collect();
            let mut data = Vec::with_capacity(cfg.frames_per_utterance * dim);
            for _ in 0..cfg.frames_per_utterance {
                data.extend(
                    vector
                        .iter()
                        .map(|v| v + cfg.frame_noise * std_normal.sample(&mut rng)),
                );
            }
            utterances.push(SynthUtterance {
                id: format!("{speaker_id}_u{u:03}"),
                speaker: s,
                vector,
                features: Tensor::matrix(cfg.frames_per_utterance, dim, data)?,
            });
        }
        speakers.push(SynthSpeaker {
            id: speaker_id,
            demographics,
        });
    }
    Ok(SynthDataset {
        config: cfg.clone(),
        speakers,
        utterances,
    })
}

impl SynthDataset {
    /// Utterance vectors stacked as `N × feature_dim`.
    pub fn raw_embeddings(&self) -> Tensor {
        let dim = self.config.feature_dim;
        let data = self
            .utterances
            .iter()
            .flat_map(|u| u.vector.iter().copied())
            .collect();
        Tensor::matrix(self.utterances.len(), dim, data).expect("consistent dims")
    }

    /// Class ids per utterance for one attribute.
    pub fn labels(&self, attribute: usize) -> Vec<usize> {
        self.utterances
            .iter()
            .map(|u| self.speakers[u.speaker].demographics.class_ids()[attribute])
            .collect()
    }

    /// Audio rendering of an utterance: one sinusoid per feature dimension,
    /// log-spaced between 200 Hz and 4 kHz, with amplitude driven by that
    /// dimension. Deterministic per (seed, utterance index).
    pub fn waveform(&self, index: usize, sample_rate: u32, seconds: f64) -> Waveform {
        let u = &self.utterances[index];
        let dim = self.config.feature_dim;
        let mut rng = item_rng(self.config.seed, stream::SYNTH, index as u64);
        let freqs: Vec<f64> = (0..dim)
            .map(|j| 200.0 * (20.0f64).powf(j as f64 / (dim.max(2) - 1) as f64))
            .collect();
        let amps: Vec<f64> = u
            .vector
            .iter()
            .map(|v| (0.5 * v.clamp(-8.0, 8.0)).exp())
            .collect();
        let total: f64 = amps.iter().sum();
        let phases: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let n = (seconds * sample_rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / sample_rate as f64;
                let s: f64 = amps
                    .iter()
                    .zip(&freqs)
                    .zip(&phases)
                    .map(|((a, f), p)| a * (2.0 * PI * f * t + p).sin())
                    .sum();
                0.8 * s / total
            })
            .collect();
        Waveform {
            samples,
            sample_rate,
        }
    }
}
