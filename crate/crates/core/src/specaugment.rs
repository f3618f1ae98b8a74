//! SpecAugment frequency and time masking with fractional mask counts.

use std::ops::Range;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hparam::{sample_count, HyperparamVector};

/// A `frames x bands` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram(pub Array2<f32>);

impl Spectrogram {
    pub fn zeros(frames: usize, bands: usize) -> Self {
        Self(Array2::zeros((frames, bands)))
    }

    pub fn from_elem(frames: usize, bands: usize, v: f32) -> Self {
        Self(Array2::from_elem((frames, bands), v))
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn bands(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    /// Maximum frequency-mask width in bands.
    pub fmask_f: f64,
    /// Fractional number of frequency masks.
    pub fmask_n: f64,
    /// Maximum time-mask width in frames.
    pub tmask_t: f64,
    /// Maximum time-mask width as a fraction of the utterance length.
    pub tmask_p: f64,
    /// Fractional number of time masks.
    pub tmask_n: f64,
    #[serde(default)]
    pub fill: f32,
}

/// Two frequency masks up to 27 bands and two time masks up to 100 frames.
pub const LD_POLICY: MaskPolicy = MaskPolicy {
    fmask_f: 27.0,
    fmask_n: 2.0,
    tmask_t: 100.0,
    tmask_p: 1.0,
    tmask_n: 2.0,
    fill: 0.0,
};

impl MaskPolicy {
    pub const NONE: MaskPolicy = MaskPolicy {
        fmask_f: 0.0,
        fmask_n: 0.0,
        tmask_t: 0.0,
        tmask_p: 0.0,
        tmask_n: 0.0,
        fill: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.fmask_f,
            self.fmask_n,
            self.tmask_t,
            self.tmask_p,
            self.tmask_n,
        ];
        if fields.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.tmask_p > 1.0 {
            return Err(Error::Config(format!("invalid mask policy {self:?}")));
        }
        Ok(())
    }

    /// Reads the five mask parameters by name. Missing names are an error;
    /// extra names are ignored.
    pub fn from_hparams(h: &HyperparamVector) -> Result<Self> {
        let get = |name: &str| {
            h.get(name)
                .ok_or_else(|| Error::VectorMismatch(format!("missing mask parameter `{name}`")))
        };
        let policy = Self {
            fmask_f: get("fmask_f")?,
            fmask_n: get("fmask_n")?,
            tmask_t: get("tmask_t")?,
            tmask_p: get("tmask_p")?,
            tmask_n: get("tmask_n")?,
            fill: 0.0,
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// The masks drawn in one augmentation pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskTrace {
    pub freq: Vec<Range<usize>>,
    pub time: Vec<Range<usize>>,
}

fn cap(max_width: f64) -> usize {
    if max_width.is_finite() && max_width > 0.0 {
        max_width.floor() as usize
    } else {
        0
    }
}

/// Draws `count` spans of width `U{0..=cap}` starting at `U{0..=len-width}`.
fn draw_spans<R: Rng + ?Sized>(
    len: usize,
    cap: usize,
    count: u32,
    rng: &mut R,
) -> Vec<Range<usize>> {
    let cap = cap.min(len);
    (0..count)
        .map(|_| {
            let w = rng.random_range(0..=cap);
            let start = rng.random_range(0..=len - w);
            start..start + w
        })
        .collect()
}

pub fn freq_masks_in_place<R: Rng + ?Sized>(
    s: &mut Spectrogram,
    max_width: f64,
    count: u32,
    fill: f32,
    rng: &mut R,
) -> Vec<Range<usize>> {
    let spans = draw_spans(s.bands(), cap(max_width), count, rng);
    for span in &spans {
        s.0.slice_mut(s![.., span.clone()]).fill(fill);
    }
    spans
}

/// The effective width cap is `min(floor(max_width), floor(p * frames))`.
pub fn time_masks_in_place<R: Rng + ?Sized>(
    s: &mut Spectrogram,
    max_width: f64,
    p: f64,
    count: u32,
    fill: f32,
    rng: &mut R,
) -> Vec<Range<usize>> {
    let frames = s.frames();
    let limit = cap(max_width).min(cap(p.clamp(0.0, 1.0) * frames as f64));
    let spans = draw_spans(frames, limit, count, rng);
    for span in &spans {
        s.0.slice_mut(s![span.clone(), ..]).fill(fill);
    }
    spans
}

pub fn apply_freq_masks<R: Rng + ?Sized>(
    s: &Spectrogram,
    max_width: f64,
    count: u32,
    fill: f32,
    rng: &mut R,
) -> Spectrogram {
    let mut out = s.clone();
    freq_masks_in_place(&mut out, max_width, count, fill, rng);
    out
}

pub fn apply_time_masks<R: Rng + ?Sized>(
    s: &Spectrogram,
    max_width: f64,
    p: f64,
    count: u32,
    fill: f32,
    rng: &mut R,
) -> Spectrogram {
    let mut out = s.clone();
    time_masks_in_place(&mut out, max_width, p, count, fill, rng);
    out
}

/// Samples the mask counts for this call, then applies frequency masks
/// followed by time masks.
pub fn specaugment_in_place<R: Rng + ?Sized>(
    s: &mut Spectrogram,
    policy: &MaskPolicy,
    rng: &mut R,
) -> Result<MaskTrace> {
    let nf = sample_count(policy.fmask_n, rng)?;
    let nt = sample_count(policy.tmask_n, rng)?;
    let freq = freq_masks_in_place(s, policy.fmask_f, nf, policy.fill, rng);
    let time = time_masks_in_place(s, policy.tmask_t, policy.tmask_p, nt, policy.fill, rng);
    Ok(MaskTrace { freq, time })
}

pub fn specaugment<R: Rng + ?Sized>(
    s: &Spectrogram,
    policy: &MaskPolicy,
    rng: &mut R,
) -> Result<Spectrogram> {
    let mut out = s.clone();
    specaugment_in_place(&mut out, policy, rng)?;
    Ok(out)
}
