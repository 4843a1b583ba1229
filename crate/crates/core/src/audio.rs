//! Waveform handling and log-mel feature extraction.
//!
//! The frontend runs resample → crop/pad → Hann STFT power spectrum →
//! HTK mel filterbank → natural log with a floor → per-utterance
//! mean-variance normalization.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample_rate must be > 0".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub target_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub clip_seconds: f64,
    pub log_floor: f64,
    /// Normalize each mel band separately instead of the whole matrix.
    pub per_band_mvn: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            target_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 64,
            clip_seconds: 6.0,
            log_floor: 1e-10,
            per_band_mvn: false,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.target_rate > 0
            && self.hop_ms > 0.0
            && self.window_ms >= self.hop_ms
            && self.n_mels >= 1
            && self.clip_seconds > 0.0
            && self.log_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid frontend config: {self:?}")))
        }
    }

    pub fn window_len(&self) -> usize {
        (self.window_ms * self.target_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * self.target_rate as f64 / 1000.0).round() as usize
    }

    /// Smallest power of two covering one window.
    pub fn fft_size(&self) -> usize {
        self.window_len().next_power_of_two()
    }

    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * self.target_rate as f64).round() as usize
    }
}

/// Number of frames for `num_samples ≥ window`.
pub fn frame_count(num_samples: usize, window: usize, hop: usize) -> usize {
    1 + (num_samples - window) / hop
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    /// `num_frames × n_mels`.
    pub frames: Tensor,
    pub frame_rate: f64,
}

impl LogMelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}

/// Linear-interpolation resampler.
pub fn resample(wav: &Waveform, target_rate: u32) -> Result<Waveform> {
    if wav.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if target_rate == 0 {
        return Err(Error::Config("target_rate must be > 0".into()));
    }
    if wav.sample_rate == target_rate {
        return Ok(wav.clone());
    }
    let n = wav.len();
    let ratio = wav.sample_rate as f64 / target_rate as f64;
    let out_len = ((n as f64 / ratio).round() as usize).max(1);
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = pos.floor() as usize;
            if i0 + 1 >= n {
                wav.samples[n - 1]
            } else {
                let frac = pos - i0 as f64;
                wav.samples[i0] * (1.0 - frac) + wav.samples[i0 + 1] * frac
            }
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: target_rate,
    })
}

/// Random crop or end zero-padding to exactly `round(clip_seconds × rate)`
/// samples.
pub fn crop_or_pad<R: Rng + ?Sized>(wav: &Waveform, clip_seconds: f64, rng: &mut R) -> Waveform {
    let target = (clip_seconds * wav.sample_rate as f64).round() as usize;
    let n = wav.len();
    let samples = if n > target {
        let offset = rng.gen_range(0..=n - target);
        wav.samples[offset..offset + target].to_vec()
    } else {
        let mut s = wav.samples.clone();
        s.resize(target, 0.0);
        s
    };
    Waveform {
        samples,
        sample_rate: wav.sample_rate,
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters spanning 0 Hz to Nyquist, peak weight 1.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels × (n_fft/2 + 1)`.
    weights: Tensor,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = Tensor::zeros(&[n_mels, n_bins]);
        for m in 0..n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for (k, w) in weights.row_mut(m).iter_mut().enumerate() {
                let f = k as f64 * sample_rate as f64 / n_fft as f64;
                let rising = (f - lo) / (center - lo);
                let falling = (hi - f) / (hi - center);
                *w = rising.min(falling).max(0.0);
            }
        }
        MelFilterbank {
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Log-mel spectrogram of a waveform already at `cfg.target_rate`.
pub fn log_mel(wav: &Waveform, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    cfg.validate()?;
    if wav.sample_rate != cfg.target_rate {
        return Err(Error::Config(format!(
            "waveform at {} Hz, frontend expects {} Hz",
            wav.sample_rate, cfg.target_rate
        )));
    }
    let window_len = cfg.window_len();
    let hop = cfg.hop_len();
    if wav.len() < window_len {
        return Err(Error::UtteranceTooShort {
            samples: wav.len(),
            window: window_len,
        });
    }
    let n_fft = cfg.fft_size();
    let n_bins = n_fft / 2 + 1;
    let bank = MelFilterbank::new(cfg.n_mels, n_fft, cfg.target_rate);
    let window = hann(window_len);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);

    let num_frames = frame_count(wav.len(), window_len, hop);
    let mut frames = Tensor::zeros(&[num_frames, cfg.n_mels]);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_bins];
    for t in 0..num_frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < window_len {
                wav.samples[start + i] * window[i]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, out) in frames.row_mut(t).iter_mut().enumerate() {
            let energy: f64 = bank
                .weights
                .row(m)
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            *out = energy.max(cfg.log_floor).ln();
        }
    }
    Ok(LogMelSpectrogram {
        frames,
        frame_rate: cfg.target_rate as f64 / hop as f64,
    })
}

const VARIANCE_FLOOR: f64 = 1e-8;

fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std < VARIANCE_FLOOR {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
}

/// Zero mean, unit population standard deviation over every entry of the
/// utterance. A (near) constant matrix maps to zeros.
pub fn mvn_normalize(spec: &LogMelSpectrogram) -> LogMelSpectrogram {
    let mut out = spec.clone();
    standardize(out.frames.data_mut());
    out
}

/// Band-wise variant of [`mvn_normalize`].
pub fn mvn_normalize_per_band(spec: &LogMelSpectrogram) -> LogMelSpectrogram {
    let t = spec.frames.transpose();
    let mut cols = t.clone();
    for b in 0..t.rows() {
        standardize(cols.row_mut(b));
    }
    LogMelSpectrogram {
        frames: cols.transpose(),
        frame_rate: spec.frame_rate,
    }
}

/// Full feature path for one utterance: resample, crop/pad, log-mel, MVN.
pub fn extract_features<R: Rng + ?Sized>(
    wav: &Waveform,
    cfg: &FrontendConfig,
    rng: &mut R,
) -> Result<LogMelSpectrogram> {
    let wav = resample(wav, cfg.target_rate)?;
    let clip = crop_or_pad(&wav, cfg.clip_seconds, rng);
    features_from_clip(&clip, cfg)
}

/// log-mel + MVN of an already resampled, fixed-length clip.
pub fn features_from_clip(clip: &Waveform, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    let spec = log_mel(clip, cfg)?;
    Ok(if cfg.per_band_mvn {
        mvn_normalize_per_band(&spec)
    } else {
        mvn_normalize(&spec)
    })
}

/// Reads a mono 16-bit PCM WAV file; samples are divided by 32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::data(
            path,
            format!(
                "expected mono 16-bit PCM, got {} channel(s), {} bits",
                spec.channels, spec.bits_per_sample
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV file, clipping to the representable range.
pub fn write_wav(path: &Path, wav: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wav.samples {
        writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn sine(freq: f64, rate: u32, seconds: f64, amp: f64) -> Waveform {
        let n = (seconds * rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn resample_identity_when_rates_match() {
        let w = sine(440.0, 16_000, 0.1, 0.3);
        assert_eq!(resample(&w, 16_000).unwrap(), w);
    }

    #[test]
    fn resample_constant_upsampling() {
        let w = Waveform::new(vec![0.5; 8000], 8000).unwrap();
        let up = resample(&w, 16_000).unwrap();
        assert!((up.len() as i64 - 16_000).abs() <= 1);
        assert!(up.samples.iter().all(|&s| (s - 0.5).abs() < 1e-15));
    }

    #[test]
    fn resample_sine_tracks_reference() {
        let src = sine(100.0, 48_000, 0.5, 0.8);
        let out = resample(&src, 16_000).unwrap();
        let reference = sine(100.0, 16_000, 0.5, 0.8);
        let n = out.len().min(reference.len());
        let dot: f64 = (0..n).map(|i| out.samples[i] * reference.samples[i]).sum();
        let na: f64 = out.samples[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = reference.samples[..n]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(dot / (na * nb) > 0.999);
        assert!((out.duration_seconds() - src.duration_seconds()).abs() <= 1.0 / 16_000.0);
    }

    #[test]
    fn resample_rejects_empty() {
        let w = Waveform::new(vec![], 8000).unwrap();
        assert!(matches!(resample(&w, 16_000), Err(Error::EmptyWaveform)));
    }

    #[test]
    fn crop_or_pad_cases() {
        let mut rng = stream_rng(3, 0);
        let exact = Waveform::new((0..96_000).map(|i| i as f64 * 1e-6).collect(), 16_000).unwrap();
        assert_eq!(crop_or_pad(&exact, 6.0, &mut rng), exact);

        let short = Waveform::new(vec![0.25; 40_000], 16_000).unwrap();
        let padded = crop_or_pad(&short, 6.0, &mut rng);
        assert_eq!(padded.len(), 96_000);
        assert!(padded.samples[..40_000].iter().all(|&s| s == 0.25));
        assert!(padded.samples[40_000..].iter().all(|&s| s == 0.0));

        let long: Vec<f64> = (0..200_000).map(|i| i as f64).collect();
        let long = Waveform::new(long, 16_000).unwrap();
        let cropped = crop_or_pad(&long, 6.0, &mut stream_rng(11, 0));
        assert_eq!(cropped.len(), 96_000);
        // Samples are their own indices, so the first one is the offset.
        let offset = cropped.samples[0] as usize;
        assert!(offset <= 104_000);
        assert_eq!(&long.samples[offset..offset + 96_000], &cropped.samples[..]);
        let again = crop_or_pad(&long, 6.0, &mut stream_rng(11, 0));
        assert_eq!(again, cropped);
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = FrontendConfig::default();
        let silence = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let spec = log_mel(&silence, &cfg).unwrap();
        assert_eq!(spec.num_frames(), 98);
        assert_eq!(spec.n_mels(), 64);
        let floor = cfg.log_floor.ln();
        assert!(spec.frames.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_is_an_error() {
        let cfg = FrontendConfig::default();
        let w = Waveform::new(vec![0.1; 399], 16_000).unwrap();
        assert!(matches!(
            log_mel(&w, &cfg),
            Err(Error::UtteranceTooShort { .. })
        ));
    }

    #[test]
    fn fft_size_for_default_window() {
        assert_eq!(FrontendConfig::default().fft_size(), 512);
    }

    #[test]
    fn mvn_examples() {
        let constant = LogMelSpectrogram {
            frames: Tensor::full(&[4, 3], -2.5),
            frame_rate: 100.0,
        };
        assert!(mvn_normalize(&constant)
            .frames
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let two_point = LogMelSpectrogram {
            frames: Tensor::matrix(2, 2, vec![0.0, 2.0, 2.0, 0.0]).unwrap(),
            frame_rate: 100.0,
        };
        assert_eq!(
            mvn_normalize(&two_point).frames.data(),
            &[-1.0, 1.0, 1.0, -1.0]
        );
    }

    #[test]
    fn per_band_mvn_standardizes_columns() {
        let spec = LogMelSpectrogram {
            frames: Tensor::matrix(3, 2, vec![1.0, 10.0, 2.0, 10.0, 3.0, 10.0]).unwrap(),
            frame_rate: 100.0,
        };
        let out = mvn_normalize_per_band(&spec);
        let s = (2.0f64 / 3.0).sqrt();
        let expect = [-1.0 / s, 0.0, 0.0, 0.0, 1.0 / s, 0.0];
        for (a, b) in out.frames.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wav_round_trip() {
        let dir = std::env::temp_dir().join(format!("dseb-wav-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.5, -1.0, 0.25], 22_050).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back, w);
        std::fs::remove_dir_all(&dir).ok();
    }
}
