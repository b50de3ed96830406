//! Sliding windows and five-band differential-entropy features.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::dataset::EegRecording;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// STFT sub-window length in samples.
pub const STFT_LEN: usize = 128;
/// STFT hop in samples (50 % overlap).
pub const STFT_HOP: usize = 64;
/// Floor applied to band power before taking the log.
pub const DE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub sample_rate_hz: f64,
}

impl WindowConfig {
    /// 2 s windows moving in 0.125 s steps.
    pub fn standard(sample_rate_hz: f64) -> Self {
        Self { window_s: 2.0, hop_s: 0.125, sample_rate_hz }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.window_s) || !ok(self.hop_s) || !ok(self.sample_rate_hz) {
            bail!(Config, "window, hop and sample rate must be positive");
        }
        if self.hop_s > self.window_s {
            bail!(Config, "hop {} s exceeds window {} s", self.hop_s, self.window_s);
        }
        whole_samples(self.window_s * self.sample_rate_hz, "window")?;
        let hop = whole_samples(self.hop_s * self.sample_rate_hz, "hop")?;
        if hop < 1 {
            bail!(Config, "hop is shorter than one sample");
        }
        Ok(())
    }

    pub fn window_len(&self) -> Result<usize> {
        self.validate()?;
        whole_samples(self.window_s * self.sample_rate_hz, "window")
    }

    pub fn hop_len(&self) -> Result<usize> {
        self.validate()?;
        whole_samples(self.hop_s * self.sample_rate_hz, "hop")
    }
}

fn whole_samples(v: f64, what: &str) -> Result<usize> {
    let r = libm::round(v);
    if libm::fabs(v - r) > 1e-6 * v.max(1.0) || r < 1.0 {
        bail!(Config, "{what} of {v} samples is not a positive whole number");
    }
    Ok(r as usize)
}

/// Number of windows of length `w` with hop `h` that fit in `n` samples.
pub fn window_count(n: usize, w: usize, h: usize) -> usize {
    if n < w || h == 0 {
        0
    } else {
        (n - w) / h + 1
    }
}

/// Splits `signal [C × N]` into windows `[C × W]`; window `k` covers
/// samples `[k·H, k·H + W)`.
pub fn sliding_windows(signal: &Tensor, cfg: &WindowConfig) -> Result<Vec<Tensor>> {
    if signal.rank() != 2 {
        bail!(Shape, "signal must be [channels x samples], got {:?}", signal.shape());
    }
    let (w, h) = (cfg.window_len()?, cfg.hop_len()?);
    let (c, n) = (signal.dim(0), signal.dim(1));
    if n < w {
        bail!(EmptyInput, "{n} samples is shorter than one {w}-sample window");
    }
    let mut out = Vec::with_capacity(window_count(n, w, h));
    for k in 0..window_count(n, w, h) {
        let start = k * h;
        let mut data = Vec::with_capacity(c * w);
        for ch in 0..c {
            data.extend_from_slice(&signal.row(ch)[start..start + w]);
        }
        out.push(Tensor::new(vec![c, w], data)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBand {
    pub name: String,
    pub lo_hz: f64,
    pub hi_hz: f64,
}

/// Ordered, non-overlapping frequency bands.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSet {
    bands: Vec<FrequencyBand>,
}

impl BandSet {
    pub fn new(bands: Vec<FrequencyBand>) -> Result<Self> {
        if bands.is_empty() {
            bail!(Config, "band set is empty");
        }
        for b in &bands {
            if !(b.lo_hz >= 0.0 && b.lo_hz < b.hi_hz) {
                bail!(Config, "band {} has invalid edges {}..{}", b.name, b.lo_hz, b.hi_hz);
            }
        }
        for pair in bands.windows(2) {
            if pair[1].lo_hz < pair[0].hi_hz {
                bail!(Config, "bands {} and {} overlap or are out of order", pair[0].name, pair[1].name);
            }
        }
        Ok(Self { bands })
    }

    pub fn bands(&self) -> &[FrequencyBand] {
        &self.bands
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.bands.iter().position(|b| b.name == name)
    }
}

impl Default for BandSet {
    /// delta 1–4, theta 4–8, alpha 8–13, beta 13–30, gamma 30–45 Hz.
    fn default() -> Self {
        let band = |name: &str, lo, hi| FrequencyBand { name: name.into(), lo_hz: lo, hi_hz: hi };
        Self {
            bands: vec![
                band("delta", 1.0, 4.0),
                band("theta", 4.0, 8.0),
                band("alpha", 8.0, 13.0),
                band("beta", 13.0, 30.0),
                band("gamma", 30.0, 45.0),
            ],
        }
    }
}

/// Welch-style periodogram: Hann sub-windows of [`STFT_LEN`] samples with
/// hop [`STFT_HOP`], averaged into a one-sided PSD. The PSD is scaled so its
/// bins sum to the window-weighted mean square of the signal.
#[derive(Debug, Clone)]
pub struct Periodogram {
    window: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    norm: f64,
}

impl Default for Periodogram {
    fn default() -> Self {
        Self::new()
    }
}

impl Periodogram {
    pub fn new() -> Self {
        let m = STFT_LEN;
        // periodic Hann
        let window: Vec<f64> = (0..m).map(|n| 0.5 - 0.5 * libm::cos(2.0 * PI * n as f64 / m as f64)).collect();
        let cos = (0..m).map(|n| libm::cos(2.0 * PI * n as f64 / m as f64)).collect();
        let sin = (0..m).map(|n| libm::sin(2.0 * PI * n as f64 / m as f64)).collect();
        let energy: f64 = window.iter().map(|w| w * w).sum();
        Self { window, cos, sin, norm: 1.0 / (m as f64 * energy) }
    }

    /// Number of one-sided bins, `STFT_LEN / 2 + 1`.
    pub fn n_bins(&self) -> usize {
        STFT_LEN / 2 + 1
    }

    /// Center frequency of bin `k`.
    pub fn bin_hz(&self, k: usize, fs: f64) -> f64 {
        k as f64 * fs / STFT_LEN as f64
    }

    /// One-sided PSD of `x` (length ≥ [`STFT_LEN`]).
    pub fn psd(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = STFT_LEN;
        if x.len() < m {
            bail!(Shape, "{} samples is shorter than the {m}-sample STFT window", x.len());
        }
        let n_frames = window_count(x.len(), m, STFT_HOP);
        let mut psd = vec![0.0; self.n_bins()];
        let mut frame = vec![0.0; m];
        for f in 0..n_frames {
            let seg = &x[f * STFT_HOP..f * STFT_HOP + m];
            for ((o, &s), &w) in frame.iter_mut().zip(seg).zip(&self.window) {
                *o = s * w;
            }
            for (k, p) in psd.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &v) in frame.iter().enumerate() {
                    let idx = (k * n) % m;
                    re += v * self.cos[idx];
                    im -= v * self.sin[idx];
                }
                let one_sided = if k == 0 || k == m / 2 { 1.0 } else { 2.0 };
                *p += one_sided * (re * re + im * im);
            }
        }
        let scale = self.norm / n_frames as f64;
        psd.iter_mut().for_each(|p| *p *= scale);
        Ok(psd)
    }

    /// Sum of PSD bins whose center frequency lies in `[lo, hi)`.
    pub fn mass_in(&self, psd: &[f64], fs: f64, lo: f64, hi: f64) -> f64 {
        psd.iter()
            .enumerate()
            .filter(|&(k, _)| {
                let f = self.bin_hz(k, fs);
                f >= lo && f < hi
            })
            .map(|(_, p)| p)
            .sum()
    }
}

/// Per-channel band power of `window [C × W]`, returned as `[C × B]`.
pub fn band_power(window: &Tensor, fs: f64, bands: &BandSet) -> Result<Tensor> {
    band_power_with(&Periodogram::new(), window, fs, bands)
}

pub fn band_power_with(pg: &Periodogram, window: &Tensor, fs: f64, bands: &BandSet) -> Result<Tensor> {
    if window.rank() != 2 {
        bail!(Shape, "window must be [channels x samples], got {:?}", window.shape());
    }
    if let Some(b) = bands.bands().iter().find(|b| b.hi_hz > fs / 2.0) {
        bail!(Config, "band {} reaches {} Hz, above Nyquist {} Hz", b.name, b.hi_hz, fs / 2.0);
    }
    let c = window.dim(0);
    let mut out = Vec::with_capacity(c * bands.len());
    for ch in 0..c {
        let psd = pg.psd(window.row(ch))?;
        out.extend(bands.bands().iter().map(|b| pg.mass_in(&psd, fs, b.lo_hz, b.hi_hz)));
    }
    Tensor::new(vec![c, bands.len()], out)
}

/// Differential entropy of a Gaussian with variance `p`: `½ ln(2πe·p)`,
/// with `p` clamped below at [`DE_FLOOR`].
pub fn differential_entropy(p: f64) -> f64 {
    0.5 * libm::log(2.0 * PI * core::f64::consts::E * p.max(DE_FLOOR))
}

/// Which rating is binarized into the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LabelDim {
    #[default]
    Valence,
    Arousal,
}

impl LabelDim {
    pub fn column(self) -> usize {
        match self {
            LabelDim::Valence => 0,
            LabelDim::Arousal => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelDim::Valence => "valence",
            LabelDim::Arousal => "arousal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "valence" => Ok(Self::Valence),
            "arousal" => Ok(Self::Arousal),
            other => bail!(Config, "unknown label dimension {other:?}"),
        }
    }
}

/// Ratings strictly above this are the positive class.
pub const RATING_THRESHOLD: f64 = 5.0;

pub fn binarize_rating(rating: f64) -> usize {
    usize::from(rating > RATING_THRESHOLD)
}

/// One windowed example.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    /// `[C × W]`, standardized per channel.
    pub raw: Tensor,
    /// `[C × B]` differential entropy in nats.
    pub de: Tensor,
    pub label: usize,
    pub subject_id: u32,
    pub trial_id: u32,
    pub window_id: u32,
}

/// Zero mean, unit variance per channel. Constant channels become zeros.
pub fn standardize_channels(window: &Tensor) -> Tensor {
    let mut out = window.clone();
    let w = window.dim(1);
    for row in out.data_mut().chunks_mut(w) {
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let inv = if var > 0.0 { 1.0 / libm::sqrt(var) } else { 0.0 };
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

/// One [`FeatureSample`] per (trial, window) of `rec`.
pub fn featurize(
    rec: &EegRecording,
    cfg: &WindowConfig,
    bands: &BandSet,
    label_dim: LabelDim,
) -> Result<Vec<FeatureSample>> {
    if libm::fabs(cfg.sample_rate_hz - rec.sample_rate_hz) > 1e-9 {
        bail!(Config, "window config at {} Hz for a {} Hz recording", cfg.sample_rate_hz, rec.sample_rate_hz);
    }
    let pg = Periodogram::new();
    let mut out = Vec::new();
    for trial in 0..rec.n_trials() {
        let label = binarize_rating(rec.ratings.at2(trial, label_dim.column()));
        let signal = rec.trial(trial);
        for (k, window) in sliding_windows(&signal, cfg)?.into_iter().enumerate() {
            let de = band_power_with(&pg, &window, rec.sample_rate_hz, bands)?.map(differential_entropy);
            out.push(FeatureSample {
                raw: standardize_channels(&window),
                de,
                label,
                subject_id: rec.subject_id,
                trial_id: trial as u32,
                window_id: k as u32,
            });
        }
    }
    Ok(out)
}
