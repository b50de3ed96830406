//! Recordings and the labeled synthetic EEG generator.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{bail, Result};
use crate::signal::BandSet;
use crate::tensor::Tensor;

/// One subject's trials and self-reported ratings.
#[derive(Debug, Clone, PartialEq)]
pub struct EegRecording {
    pub subject_id: u32,
    /// `[n_trials × n_channels × n_samples]`
    pub trials: Tensor,
    pub sample_rate_hz: f64,
    /// `[n_trials × 2]`: valence, arousal on the 1–9 scale.
    pub ratings: Tensor,
}

impl EegRecording {
    /// Validates and assembles a recording. `ratings` may carry more than two
    /// columns (the DEAP layout has four); only valence and arousal are kept.
    pub fn new(subject_id: u32, trials: Tensor, sample_rate_hz: f64, ratings: Tensor) -> Result<Self> {
        if trials.rank() != 3 {
            bail!(Shape, "trials must be [trials x channels x samples], got {:?}", trials.shape());
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            bail!(Validation, "sample rate must be positive, got {sample_rate_hz}");
        }
        if trials.dim(1) < 2 {
            bail!(Validation, "need at least 2 channels, got {}", trials.dim(1));
        }
        if !trials.is_finite() {
            bail!(Validation, "signal contains NaN or infinite samples");
        }
        if ratings.rank() != 2 || ratings.dim(0) != trials.dim(0) || ratings.dim(1) < 2 {
            bail!(Shape, "ratings {:?} do not match {} trials", ratings.shape(), trials.dim(0));
        }
        let mut kept = Vec::with_capacity(ratings.dim(0) * 2);
        for t in 0..ratings.dim(0) {
            for c in 0..2 {
                let r = ratings.at2(t, c);
                if !(1.0..=9.0).contains(&r) {
                    bail!(Validation, "rating {r} of trial {t} is outside [1, 9]");
                }
                kept.push(r);
            }
        }
        let ratings = Tensor::new(vec![ratings.dim(0), 2], kept)?;
        Ok(Self { subject_id, trials, sample_rate_hz, ratings })
    }

    pub fn n_trials(&self) -> usize {
        self.trials.dim(0)
    }

    pub fn n_channels(&self) -> usize {
        self.trials.dim(1)
    }

    pub fn n_samples(&self) -> usize {
        self.trials.dim(2)
    }

    /// Trial `i` as `[n_channels × n_samples]`.
    pub fn trial(&self, i: usize) -> Tensor {
        self.trials.index0(i)
    }
}

/// The five canonical EEG bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Band {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
}

impl Band {
    pub const ALL: [Band; 5] = [Band::Delta, Band::Theta, Band::Alpha, Band::Beta, Band::Gamma];

    pub fn name(self) -> &'static str {
        match self {
            Band::Delta => "delta",
            Band::Theta => "theta",
            Band::Alpha => "alpha",
            Band::Beta => "beta",
            Band::Gamma => "gamma",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|b| b.name() == s) {
            Some(b) => Ok(*b),
            None => bail!(Config, "unknown band {s:?}"),
        }
    }

    /// Midpoint of the band in the default band set.
    pub fn center_hz(self) -> f64 {
        let set = BandSet::default();
        let b = &set.bands()[self as usize];
        0.5 * (b.lo_hz + b.hi_hz)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub n_trials: usize,
    pub n_channels: usize,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
    pub signal_band: Band,
    pub effect_strength: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            n_trials: 20,
            n_channels: 8,
            duration_s: 3.0,
            sample_rate_hz: 128.0,
            seed: 7,
            signal_band: Band::Alpha,
            effect_strength: 3.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            bail!(Validation, "need at least 2 subjects, got {}", self.n_subjects);
        }
        if self.n_trials == 0 {
            bail!(Validation, "need at least one trial per subject");
        }
        if self.n_channels < 2 {
            bail!(Validation, "need at least 2 channels, got {}", self.n_channels);
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            bail!(Validation, "sample rate must be positive");
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) || self.n_samples() == 0 {
            bail!(Validation, "duration must give at least one sample");
        }
        if !(self.effect_strength.is_finite() && self.effect_strength >= 0.0) {
            bail!(Validation, "effect strength must be finite and >= 0");
        }
        if self.signal_band.center_hz() >= self.sample_rate_hz / 2.0 {
            bail!(Validation, "{} band is above Nyquist", self.signal_band.name());
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        libm::round(self.duration_s * self.sample_rate_hz) as usize
    }
}

/// Cut-off of the background noise low-pass filter.
pub const NOISE_CUTOFF_HZ: f64 = 45.0;
const NOISE_TAPS: usize = 65;

/// Windowed-sinc (Hamming) low-pass taps with unit DC gain.
fn lowpass_taps(cutoff_hz: f64, fs: f64) -> Vec<f64> {
    let fc = cutoff_hz / fs;
    let mid = (NOISE_TAPS - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..NOISE_TAPS)
        .map(|i| {
            let x = i as f64 - mid;
            let sinc = if x == 0.0 { 2.0 * fc } else { libm::sin(2.0 * PI * fc * x) / (PI * x) };
            let w = 0.54 - 0.46 * libm::cos(2.0 * PI * i as f64 / (NOISE_TAPS - 1) as f64);
            sinc * w
        })
        .collect();
    let dc: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= dc);
    taps
}

/// Generates one recording per subject. Each trial draws a fair binary
/// label; positive trials add a sinusoid at the center of `signal_band`
/// with amplitude `effect_strength × channel noise std` to a per-subject
/// subset of channels. The background is Gaussian noise low-passed at
/// 45 Hz. Ratings are 8.0 (positive) or 2.0 (negative) on both axes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<EegRecording>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, n, fs) = (spec.n_channels, spec.n_samples(), spec.sample_rate_hz);
    let taps = (NOISE_CUTOFF_HZ < fs / 2.0).then(|| lowpass_taps(NOISE_CUTOFF_HZ, fs));
    let gain = taps.as_ref().map_or(1.0, |t| libm::sqrt(t.iter().map(|v| v * v).sum::<f64>()));
    let pad = taps.as_ref().map_or(0, |t| t.len() - 1);
    let freq = spec.signal_band.center_hz();
    let n_active = c.div_ceil(2);

    let mut recordings = Vec::with_capacity(spec.n_subjects);
    for s in 0..spec.n_subjects {
        let noise_std: Vec<f64> = (0..c).map(|_| rng.random_range(5.0..15.0)).collect();
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(&mut rng);
        let mut active = vec![false; c];
        order[..n_active].iter().for_each(|&ch| active[ch] = true);

        let mut trials = Vec::with_capacity(spec.n_trials * c * n);
        let mut ratings = Vec::with_capacity(spec.n_trials * 2);
        let mut white = vec![0.0; n + pad];
        for _ in 0..spec.n_trials {
            let positive = rng.random_bool(0.5);
            let r = if positive { 8.0 } else { 2.0 };
            ratings.extend_from_slice(&[r, r]);
            for ch in 0..c {
                white.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
                let phase = rng.random_range(0.0..2.0 * PI);
                let scale = noise_std[ch] / gain;
                let amp = if positive && active[ch] { spec.effect_strength * noise_std[ch] } else { 0.0 };
                for t in 0..n {
                    let noise = match &taps {
                        Some(h) => h.iter().zip(&white[t..t + h.len()]).map(|(a, b)| a * b).sum::<f64>(),
                        None => white[t],
                    };
                    let tone = amp * libm::sin(2.0 * PI * freq * t as f64 / fs + phase);
                    trials.push(scale * noise + tone);
                }
            }
        }
        recordings.push(EegRecording::new(
            (s + 1) as u32,
            Tensor::new(vec![spec.n_trials, c, n], trials)?,
            fs,
            Tensor::new(vec![spec.n_trials, 2], ratings)?,
        )?);
    }
    Ok(recordings)
}
