//! EEG to time-frequency feature pipeline.
//!
//! ```text
//! raw [C, T] or epochs [N, C, T]
//!   ├─ bandpass_filter   Hamming-window FIR, delay-compensated (zero phase)
//!   ├─ resample          FFT band-limited → target rate (default 250 Hz)
//!   ├─ epoch/baseline    1 s window from onset, per-channel mean removed
//!   ├─ morlet_cwt        |x * ψ_f| for every analysis frequency f
//!   └─ crop_resize       28 rows × 100 columns → bilinear 64 × 64
//! ```

use std::path::Path;
use std::sync::Arc;

use log::warn;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};
use ndarray::parallel::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::eeg_io::{self, Compression, EpochSet, StoreKind, StoreMeta, STORE_VERSION};
use crate::error::{invalid, shape_err, Error, Result};

/// FIR band-pass specification.
///
/// Cut-offs sit in the middle of the transition bands, i.e. at
/// `low_hz - transition_hz / 2` and `high_hz + transition_hz / 2`. The tap
/// count defaults to `⌈3.3 · fs / transition_hz⌉` rounded up to odd, the
/// usual length for a Hamming window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    #[serde(default = "default_transition")]
    pub transition_hz: f64,
    #[serde(default)]
    pub taps: Option<usize>,
}

fn default_transition() -> f64 {
    0.5
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            low_hz: 2.0,
            high_hz: 30.0,
            transition_hz: default_transition(),
            taps: None,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self, sampling_rate: f64) -> Result<()> {
        let nyq = sampling_rate / 2.0;
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyq) {
            return Err(invalid!(
                "band {}-{} Hz invalid for sampling rate {} Hz",
                self.low_hz,
                self.high_hz,
                sampling_rate
            ));
        }
        if !(self.transition_hz > 0.0 && self.transition_hz < 2.0 * self.low_hz) {
            return Err(invalid!("transition width {} Hz invalid", self.transition_hz));
        }
        if self.high_hz + self.transition_hz / 2.0 >= nyq {
            return Err(invalid!("upper transition band crosses Nyquist"));
        }
        if matches!(self.taps, Some(t) if t % 2 == 0 || t < 3) {
            return Err(invalid!("tap count must be odd and >= 3"));
        }
        Ok(())
    }

    pub fn num_taps(&self, sampling_rate: f64) -> usize {
        self.taps.unwrap_or_else(|| {
            let n = (3.3 * sampling_rate / self.transition_hz).ceil() as usize;
            n | 1
        })
    }

    /// Windowed-sinc band-pass kernel, normalized to unit gain at the band
    /// centre.
    pub fn design(&self, sampling_rate: f64) -> Result<Vec<f64>> {
        self.validate(sampling_rate)?;
        let n = self.num_taps(sampling_rate);
        let m = (n - 1) as f64 / 2.0;
        let f1 = (self.low_hz - self.transition_hz / 2.0) / sampling_rate;
        let f2 = (self.high_hz + self.transition_hz / 2.0) / sampling_rate;
        let sinc = |x: f64| {
            if x == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            }
        };
        let mut h: Vec<f64> = (0..n)
            .map(|k| {
                let t = k as f64 - m;
                let ideal = 2.0 * f2 * sinc(2.0 * f2 * t) - 2.0 * f1 * sinc(2.0 * f1 * t);
                let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos();
                ideal * w
            })
            .collect();
        let f0 = (self.low_hz + self.high_hz) / 2.0 / sampling_rate;
        let gain = frequency_response(&h, f0);
        for v in &mut h {
            *v /= gain;
        }
        Ok(h)
    }
}

/// Magnitude response of `taps` at normalized frequency `f` (cycles/sample).
pub fn frequency_response(taps: &[f64], f: f64) -> f64 {
    let (re, im) = taps.iter().enumerate().fold((0.0, 0.0), |(re, im), (k, &h)| {
        let ph = -2.0 * std::f64::consts::PI * f * k as f64;
        (re + h * ph.cos(), im + h * ph.sin())
    });
    re.hypot(im)
}

/// Delay-compensated linear-phase FIR filter applied to one signal.
///
/// The signal is mirror-extended by half the kernel length on both sides,
/// convolved through the FFT, and the central `len` samples are returned.
pub struct FirFilter {
    taps: Vec<f64>,
    len: usize,
    nfft: usize,
    spectrum: Vec<Complex<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl FirFilter {
    pub fn new(taps: Vec<f64>, len: usize) -> Result<Self> {
        if len < taps.len() {
            return Err(invalid!(
                "signal of {len} samples is shorter than the {}-tap filter",
                taps.len()
            ));
        }
        let half = (taps.len() - 1) / 2;
        let nfft = (len + 2 * half + taps.len() - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(nfft);
        let inv = planner.plan_fft_inverse(nfft);
        let mut spectrum = vec![Complex::new(0.0, 0.0); nfft];
        for (s, &h) in spectrum.iter_mut().zip(&taps) {
            s.re = h;
        }
        fwd.process(&mut spectrum);
        Ok(FirFilter {
            taps,
            len,
            nfft,
            spectrum,
            fwd,
            inv,
        })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.len, "filter planned for a different length");
        let half = (self.taps.len() - 1) / 2;
        let n = self.len;
        let mut buf = vec![Complex::new(0.0, 0.0); self.nfft];
        // Mirror extension without repeating the edge sample.
        for (j, b) in buf.iter_mut().enumerate().take(n + 2 * half) {
            let i = j as isize - half as isize;
            let src = if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                (2 * (n - 1)).saturating_sub(i as usize)
            } else {
                i as usize
            };
            b.re = x[src.min(n - 1)];
        }
        self.fwd.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&self.spectrum) {
            *b *= h;
        }
        self.inv.process(&mut buf);
        let scale = 1.0 / self.nfft as f64;
        // Full convolution index j + 2*half corresponds to output sample j.
        Array1::from_iter((0..n).map(|j| buf[j + 2 * half].re * scale))
    }
}

/// Filters every channel of a continuous `[C, T]` recording.
pub fn filter_signal(data: ArrayView2<f64>, spec: &FilterSpec, sampling_rate: f64) -> Result<Array2<f64>> {
    let taps = spec.design(sampling_rate)?;
    let fir = FirFilter::new(taps, data.ncols())?;
    let rows: Vec<Array1<f64>> = data.outer_iter().into_par_iter().map(|r| fir.apply(r)).collect();
    Ok(stack_rows(&rows, data.ncols()))
}

/// Zero-phase band-pass of every epoch in a set. Shape is unchanged.
pub fn bandpass_filter(set: &EpochSet, spec: &FilterSpec) -> Result<EpochSet> {
    let taps = spec.design(set.sampling_rate)?;
    let fir = FirFilter::new(taps, set.samples())?;
    let mut out = set.clone();
    out.data
        .outer_iter_mut()
        .into_par_iter()
        .zip(set.data.outer_iter().into_par_iter())
        .for_each(|(mut dst, src)| {
            for (mut d, s) in dst.outer_iter_mut().zip(src.outer_iter()) {
                let y = fir.apply(s.mapv(f64::from).view());
                d.assign(&y.mapv(|v| v as f32));
            }
        });
    Ok(out)
}

fn stack_rows(rows: &[Array1<f64>], len: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), len));
    for (mut dst, r) in out.outer_iter_mut().zip(rows) {
        dst.assign(r);
    }
    out
}

/// FFT resampler between two fixed lengths.
pub struct Resampler {
    from: usize,
    to: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Resampler {
    pub fn new(from: usize, to: usize) -> Result<Self> {
        if from == 0 || to == 0 {
            return Err(invalid!("cannot resample between {from} and {to} samples"));
        }
        let mut planner = FftPlanner::new();
        Ok(Resampler {
            from,
            to,
            fwd: planner.plan_fft_forward(from),
            inv: planner.plan_fft_inverse(to),
        })
    }

    /// Band-limited resampling: the spectrum is truncated (or zero-padded)
    /// to the new length, splitting the Nyquist bin when it is shared.
    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let (n, m) = (self.from, self.to);
        if n == m {
            return x.to_owned();
        }
        let mut spec: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fwd.process(&mut spec);
        let mut out = vec![Complex::new(0.0, 0.0); m];
        let shared = n.min(m);
        // Non-negative bins up to and including a shared Nyquist bin.
        for k in 0..(shared / 2 + 1).min(shared) {
            out[k] = spec[k];
        }
        for k in 1..=(shared - 1) / 2 {
            out[m - k] = spec[n - k];
        }
        if shared % 2 == 0 {
            let h = shared / 2;
            if m < n {
                out[h] += spec[n - h];
            } else {
                out[h] *= 0.5;
                out[m - h] = out[h];
            }
        }
        self.inv.process(&mut out);
        let scale = 1.0 / n as f64;
        Array1::from_iter(out.iter().map(|c| c.re * scale))
    }
}

pub fn resampled_len(len: usize, from_hz: f64, to_hz: f64) -> usize {
    (len as f64 * to_hz / from_hz).round() as usize
}

fn check_rates(from_hz: f64, to_hz: f64) -> Result<()> {
    if !(to_hz > 0.0) {
        return Err(invalid!("target rate {to_hz} Hz must be positive"));
    }
    if to_hz > from_hz {
        return Err(invalid!("target rate {to_hz} Hz exceeds source rate {from_hz} Hz"));
    }
    Ok(())
}

pub fn resample_signal(data: ArrayView2<f64>, from_hz: f64, to_hz: f64) -> Result<Array2<f64>> {
    check_rates(from_hz, to_hz)?;
    let to_len = resampled_len(data.ncols(), from_hz, to_hz);
    let rs = Resampler::new(data.ncols(), to_len)?;
    let rows: Vec<Array1<f64>> = data.outer_iter().into_par_iter().map(|r| rs.apply(r)).collect();
    Ok(stack_rows(&rows, to_len))
}

/// Resamples every epoch; onset indices are rescaled to the new rate.
pub fn resample(set: &EpochSet, target_hz: f64) -> Result<EpochSet> {
    check_rates(set.sampling_rate, target_hz)?;
    if target_hz == set.sampling_rate {
        return Ok(set.clone());
    }
    let t_new = resampled_len(set.samples(), set.sampling_rate, target_hz);
    let rs = Resampler::new(set.samples(), t_new)?;
    let mut data = Array3::zeros((set.len(), set.channels(), t_new));
    data.outer_iter_mut()
        .into_par_iter()
        .zip(set.data.outer_iter().into_par_iter())
        .for_each(|(mut dst, src)| {
            for (mut d, s) in dst.outer_iter_mut().zip(src.outer_iter()) {
                d.assign(&rs.apply(s.mapv(f64::from).view()).mapv(|v| v as f32));
            }
        });
    let ratio = target_hz / set.sampling_rate;
    let onset_index = set
        .onset_index
        .iter()
        .map(|&o| ((o as f64 * ratio).round() as usize).min(t_new.saturating_sub(1)))
        .collect();
    let out = EpochSet {
        data,
        labels: set.labels.clone(),
        subject_id: set.subject_id.clone(),
        sampling_rate: target_hz,
        onset_index,
        acquisition_order: set.acquisition_order.clone(),
    };
    out.validate()?;
    Ok(out)
}

/// A continuous multichannel recording with stimulus onsets.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub data: Array2<f64>,
    pub sampling_rate: f64,
    pub onsets: Vec<usize>,
    pub labels: Vec<u8>,
    pub subject_id: String,
}

impl RawRecording {
    pub fn validate(&self) -> Result<()> {
        if self.onsets.len() != self.labels.len() {
            return Err(shape_err!(
                "{} onsets but {} labels",
                self.onsets.len(),
                self.labels.len()
            ));
        }
        if !(self.sampling_rate > 0.0) {
            return Err(invalid!("sampling rate must be positive"));
        }
        Ok(())
    }

    pub fn filtered(&self, spec: &FilterSpec) -> Result<RawRecording> {
        Ok(RawRecording {
            data: filter_signal(self.data.view(), spec, self.sampling_rate)?,
            ..self.clone()
        })
    }

    pub fn resampled(&self, target_hz: f64) -> Result<RawRecording> {
        check_rates(self.sampling_rate, target_hz)?;
        if target_hz == self.sampling_rate {
            return Ok(self.clone());
        }
        let ratio = target_hz / self.sampling_rate;
        Ok(RawRecording {
            data: resample_signal(self.data.view(), self.sampling_rate, target_hz)?,
            sampling_rate: target_hz,
            onsets: self.onsets.iter().map(|&o| (o as f64 * ratio).round() as usize).collect(),
            ..self.clone()
        })
    }
}

/// Result of cutting epochs out of a continuous recording.
#[derive(Debug, Clone)]
pub struct Epoched {
    pub set: EpochSet,
    /// Onsets dropped because less than one epoch of signal followed them.
    pub skipped: usize,
}

/// Cuts `epoch_s`-second epochs starting at every onset and removes the
/// per-channel mean of each epoch.
pub fn epoch_and_baseline(raw: &RawRecording, epoch_s: f64) -> Result<Epoched> {
    raw.validate()?;
    let len = (raw.sampling_rate * epoch_s).round() as usize;
    if len == 0 {
        return Err(invalid!("epoch of {epoch_s} s has no samples"));
    }
    let total = raw.data.ncols();
    let kept: Vec<usize> = (0..raw.onsets.len()).filter(|&i| raw.onsets[i] + len <= total).collect();
    let skipped = raw.onsets.len() - kept.len();
    if skipped > 0 {
        warn!("{}: skipped {skipped} onsets too close to the recording end", raw.subject_id);
    }
    let mut data = Array3::<f32>::zeros((kept.len(), raw.data.nrows(), len));
    for (mut dst, &i) in data.outer_iter_mut().zip(&kept) {
        let start = raw.onsets[i];
        let window = raw.data.slice(s![.., start..start + len]);
        dst.assign(&baseline_corrected(window).mapv(|v| v as f32));
    }
    let labels = kept.iter().map(|&i| raw.labels[i]).collect();
    Ok(Epoched {
        set: EpochSet::new(data, labels, raw.subject_id.clone(), raw.sampling_rate)?,
        skipped,
    })
}

/// Subtracts the per-channel mean of the window.
pub fn baseline_corrected(window: ArrayView2<f64>) -> Array2<f64> {
    let mut out = window.to_owned();
    for mut row in out.outer_iter_mut() {
        let mean = row.sum() / row.len().max(1) as f64;
        row.mapv_inplace(|v| v - mean);
    }
    out
}

/// Mother wavelet `exp(-β² t² / 2) · cos(π t)` and the analysis grid.
///
/// The wavelet for analysis frequency `f` is the mother wavelet evaluated at
/// `f · t`, sampled wherever the envelope is at least `1e-4`, and scaled to
/// unit L2 norm so magnitudes are comparable across rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorletParams {
    pub beta: f64,
    pub frequencies: Vec<f64>,
}

impl Default for MorletParams {
    fn default() -> Self {
        MorletParams {
            beta: 1.0,
            frequencies: (2..=29).map(f64::from).collect(),
        }
    }
}

pub const ENVELOPE_FLOOR: f64 = 1e-4;

impl MorletParams {
    pub fn validate(&self, sampling_rate: f64) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(invalid!("wavelet beta must be positive"));
        }
        if self.frequencies.is_empty() {
            return Err(invalid!("no analysis frequencies"));
        }
        if self.frequencies.windows(2).any(|w| w[1] <= w[0]) || self.frequencies[0] <= 0.0 {
            return Err(invalid!("analysis frequencies must be positive and strictly ascending"));
        }
        let nyq = sampling_rate / 2.0;
        if let Some(f) = self.frequencies.iter().find(|&&f| f > nyq) {
            return Err(invalid!("analysis frequency {f} Hz above Nyquist ({nyq} Hz)"));
        }
        Ok(())
    }

    /// Half-width of the sampled support in seconds at frequency `f`.
    pub fn half_support_s(&self, f: f64) -> f64 {
        (2.0 * (1.0 / ENVELOPE_FLOOR).ln()).sqrt() / (self.beta * f)
    }

    /// Samples of the L2-normalized wavelet at `f`, centred on index `half`.
    pub fn wavelet(&self, f: f64, sampling_rate: f64) -> Vec<f64> {
        let half = (self.half_support_s(f) * sampling_rate).floor() as isize;
        let mut w: Vec<f64> = (-half..=half)
            .map(|n| {
                let t = f * n as f64 / sampling_rate;
                (-(self.beta * t).powi(2) / 2.0).exp() * (std::f64::consts::PI * t).cos()
            })
            .collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut w {
            *v /= norm;
        }
        w
    }
}

/// Filter bank computing `|x * ψ_f|` for every configured frequency over
/// signals of one length.
///
/// The signal is zero-extended beyond its ends, so kernels longer than the
/// signal are effectively truncated to the overlapping part.
pub struct MorletBank {
    len: usize,
    nfft: usize,
    offsets: Vec<usize>,
    spectra: Vec<Vec<Complex<f64>>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl MorletBank {
    pub fn new(params: &MorletParams, sampling_rate: f64, len: usize) -> Result<Self> {
        params.validate(sampling_rate)?;
        if len == 0 {
            return Err(invalid!("empty signal"));
        }
        // Only lags below `len` can overlap the signal.
        let kernels: Vec<Vec<f64>> = params
            .frequencies
            .iter()
            .map(|&f| {
                let w = params.wavelet(f, sampling_rate);
                let half = (w.len() - 1) / 2;
                let keep = half.min(len - 1);
                w[half - keep..=half + keep].to_vec()
            })
            .collect();
        let longest = kernels.iter().map(Vec::len).max().unwrap_or(1);
        let nfft = (len + longest - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(nfft);
        let inv = planner.plan_fft_inverse(nfft);
        let mut offsets = Vec::with_capacity(kernels.len());
        let spectra = kernels
            .iter()
            .map(|k| {
                offsets.push((k.len() - 1) / 2);
                let mut buf = vec![Complex::new(0.0, 0.0); nfft];
                for (b, &v) in buf.iter_mut().zip(k) {
                    b.re = v;
                }
                fwd.process(&mut buf);
                buf
            })
            .collect();
        Ok(MorletBank {
            len,
            nfft,
            offsets,
            spectra,
            fwd,
            inv,
        })
    }

    pub fn rows(&self) -> usize {
        self.spectra.len()
    }

    /// `[F, T]` magnitudes for one channel.
    pub fn transform(&self, x: ArrayView1<f64>) -> Array2<f64> {
        assert_eq!(x.len(), self.len, "bank planned for a different length");
        let mut sig = vec![Complex::new(0.0, 0.0); self.nfft];
        for (b, &v) in sig.iter_mut().zip(x.iter()) {
            b.re = v;
        }
        self.fwd.process(&mut sig);
        let scale = 1.0 / self.nfft as f64;
        let mut out = Array2::zeros((self.rows(), self.len));
        let mut buf = vec![Complex::new(0.0, 0.0); self.nfft];
        for (f, spec) in self.spectra.iter().enumerate() {
            for ((b, s), h) in buf.iter_mut().zip(&sig).zip(spec) {
                *b = s * h;
            }
            self.inv.process(&mut buf);
            let off = self.offsets[f];
            for t in 0..self.len {
                out[[f, t]] = (buf[t + off].re * scale).abs();
            }
        }
        out
    }
}

/// Continuous wavelet transform magnitudes `[C, F, T]` of one epoch `[C, T]`.
pub fn morlet_cwt(epoch: ArrayView2<f64>, params: &MorletParams, sampling_rate: f64) -> Result<Array3<f64>> {
    let bank = MorletBank::new(params, sampling_rate, epoch.ncols())?;
    Ok(cwt_with(&bank, epoch))
}

fn cwt_with(bank: &MorletBank, epoch: ArrayView2<f64>) -> Array3<f64> {
    let mut out = Array3::zeros((epoch.nrows(), bank.rows(), epoch.ncols()));
    for (mut dst, ch) in out.outer_iter_mut().zip(epoch.outer_iter()) {
        dst.assign(&bank.transform(ch));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeReduction {
    /// Equally spaced columns across the whole window.
    #[default]
    Decimate,
    /// The leading columns.
    Truncate,
}

/// Crop and resize geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    pub freq_rows: usize,
    pub time_cols: usize,
    pub image_size: usize,
    #[serde(default)]
    pub time_reduction: TimeReduction,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            freq_rows: 28,
            time_cols: 100,
            image_size: 64,
            time_reduction: TimeReduction::Decimate,
        }
    }
}

/// Column indices selected when reducing `len` columns to `cols`.
pub fn time_indices(len: usize, cols: usize, mode: TimeReduction) -> Vec<usize> {
    match mode {
        TimeReduction::Truncate => (0..cols).collect(),
        TimeReduction::Decimate if cols == 1 => vec![0],
        TimeReduction::Decimate => (0..cols)
            .map(|j| ((j * (len - 1)) as f64 / (cols - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Bilinear resize of one `[H, W]` plane with corner-aligned sampling:
/// output pixel `i` reads source coordinate `i · (H - 1) / (out - 1)`.
pub fn bilinear_resize(plane: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (x.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|j| coord(j, w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = coord(i, h, out_h);
        let (x0, x1, fx) = cols[j];
        let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
        let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Crops a scalogram `[C, F, T]` to the configured rows and columns and
/// resizes every channel to `image_size × image_size`.
pub fn crop_resize(scalogram: &Array3<f64>, spec: &CropSpec) -> Result<Array3<f64>> {
    let (c, f, t) = scalogram.dim();
    if f < spec.freq_rows || t < spec.time_cols || spec.freq_rows == 0 || spec.time_cols == 0 {
        return Err(shape_err!(
            "scalogram {f}x{t} smaller than crop {}x{}",
            spec.freq_rows,
            spec.time_cols
        ));
    }
    let cols = time_indices(t, spec.time_cols, spec.time_reduction);
    let mut out = Array3::zeros((c, spec.image_size, spec.image_size));
    for (mut dst, src) in out.outer_iter_mut().zip(scalogram.outer_iter()) {
        let cropped = src.slice(s![..spec.freq_rows, ..]).select(Axis(1), &cols);
        dst.assign(&bilinear_resize(cropped.view(), spec.image_size, spec.image_size));
    }
    Ok(out)
}

/// Time-frequency features of one subject: `values` is `[N, C, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub values: Array4<f32>,
    pub labels: Vec<u8>,
    pub subject_id: String,
    pub acquisition_order: Vec<usize>,
}

/// One time-frequency feature, `[C, S, S]`, in model precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TfrFeature {
    pub values: Array3<f64>,
    pub label: u8,
    pub subject_id: String,
}

impl FeatureSet {
    pub fn empty(channels: usize, size: usize, subject_id: &str) -> Self {
        FeatureSet {
            values: Array4::zeros((0, channels, size, size)),
            labels: Vec::new(),
            subject_id: subject_id.into(),
            acquisition_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.len_of(Axis(1))
    }

    pub fn image_size(&self) -> usize {
        self.values.len_of(Axis(2))
    }

    pub fn count_class(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn input(&self, i: usize) -> Array3<f64> {
        self.values.index_axis(Axis(0), i).mapv(f64::from)
    }

    pub fn feature(&self, i: usize) -> TfrFeature {
        TfrFeature {
            values: self.input(i),
            label: self.labels[i],
            subject_id: self.subject_id.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.values.len_of(Axis(0));
        if self.labels.len() != n || self.acquisition_order.len() != n {
            return Err(shape_err!("feature set of {n} with {} labels", self.labels.len()));
        }
        if self.values.len_of(Axis(2)) != self.values.len_of(Axis(3)) {
            return Err(shape_err!("features must be square, got {:?}", self.values.shape()));
        }
        eeg_io::check_permutation(&self.acquisition_order)?;
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("non-finite feature values"));
        }
        Ok(())
    }

    /// Same semantics as [`EpochSet::select`].
    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        let keys: Vec<(usize, usize)> = indices
            .iter()
            .enumerate()
            .map(|(pos, &i)| (self.acquisition_order[i], pos))
            .collect();
        FeatureSet {
            values: self.values.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subject_id: self.subject_id.clone(),
            acquisition_order: eeg_io::rerank(&keys),
        }
    }
}

pub fn save_feature_store(set: &FeatureSet, path: &Path) -> Result<()> {
    set.validate()?;
    let meta = StoreMeta {
        version: STORE_VERSION,
        kind: StoreKind::Tfr,
        shape: set.values.shape().to_vec(),
        dtype: "float32".into(),
        compression: Compression::None,
        subject_id: set.subject_id.clone(),
        sampling_rate: None,
        labels: set.labels.clone(),
        acquisition_order: set.acquisition_order.clone(),
        onset_index: None,
    };
    let payload: Vec<f32> = set.values.iter().copied().collect();
    eeg_io::write_store(path, &meta, &payload)
}

pub fn load_feature_store(path: &Path) -> Result<FeatureSet> {
    let (meta, payload) = eeg_io::read_store(path)?;
    if meta.kind != StoreKind::Tfr {
        return Err(Error::Store(format!("{} is not a tfr store", path.display())));
    }
    let &[n, c, h, w] = meta.shape.as_slice() else {
        return Err(Error::Store(format!("tfr store shape {:?} is not 4-D", meta.shape)));
    };
    let values =
        Array4::from_shape_vec((n, c, h, w), payload).map_err(|e| Error::Store(e.to_string()))?;
    let set = FeatureSet {
        values,
        labels: meta.labels,
        subject_id: meta.subject_id,
        acquisition_order: meta.acquisition_order,
    };
    set.validate().map_err(|e| Error::Store(e.to_string()))?;
    Ok(set)
}

/// Every knob of the feature pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// `None` skips filtering.
    pub filter: Option<FilterSpec>,
    pub target_hz: f64,
    pub epoch_s: f64,
    pub morlet: MorletParams,
    pub crop: CropSpec,
    /// Multiplies the signal before the transform (e.g. `1e6` for volts).
    pub amplitude_scale: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            filter: Some(FilterSpec::default()),
            target_hz: 250.0,
            epoch_s: 1.0,
            morlet: MorletParams::default(),
            crop: CropSpec::default(),
            amplitude_scale: 1.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(f) = &self.filter {
            f.validate(self.target_hz.max(2.0 * f.high_hz + f.transition_hz + 1e-9))?;
        }
        if !(self.target_hz > 0.0 && self.epoch_s > 0.0) {
            return Err(invalid!("target rate and epoch length must be positive"));
        }
        self.morlet.validate(self.target_hz)?;
        if self.morlet.frequencies.len() < self.crop.freq_rows {
            return Err(invalid!(
                "{} analysis frequencies but {} rows kept",
                self.morlet.frequencies.len(),
                self.crop.freq_rows
            ));
        }
        let len = (self.target_hz * self.epoch_s).round() as usize;
        if len < self.crop.time_cols {
            return Err(invalid!("{len}-sample epochs cannot give {} columns", self.crop.time_cols));
        }
        if self.crop.image_size == 0 {
            return Err(invalid!("image size must be positive"));
        }
        Ok(())
    }

    fn epoch_len(&self) -> usize {
        (self.target_hz * self.epoch_s).round() as usize
    }
}

/// Pipeline input: a continuous recording or already-cut epochs. Epochs may
/// carry context around the analysis window; `onset_index` marks its start.
#[derive(Debug, Clone)]
pub enum PipelineInput {
    Raw(RawRecording),
    Epochs(EpochSet),
}

/// Feature extraction for already baseline-corrected 1 s epochs.
fn features_from_windows(windows: &EpochSet, config: &PreprocessConfig) -> Result<FeatureSet> {
    let (c, size) = (windows.channels(), config.crop.image_size);
    if windows.is_empty() {
        let mut fs = FeatureSet::empty(c, size, &windows.subject_id);
        fs.acquisition_order = Vec::new();
        return Ok(fs);
    }
    let bank = MorletBank::new(&config.morlet, windows.sampling_rate, windows.samples())?;
    let feats: Vec<Result<Array3<f64>>> = windows
        .data
        .outer_iter()
        .into_par_iter()
        .map(|ep| {
            let x = ep.mapv(|v| f64::from(v) * config.amplitude_scale);
            crop_resize(&cwt_with(&bank, x.view()), &config.crop)
        })
        .collect();
    let mut values = Array4::zeros((windows.len(), c, size, size));
    for (mut dst, f) in values.outer_iter_mut().zip(feats) {
        dst.assign(&f?.mapv(|v| v as f32));
    }
    let set = FeatureSet {
        values,
        labels: windows.labels.clone(),
        subject_id: windows.subject_id.clone(),
        acquisition_order: windows.acquisition_order.clone(),
    };
    set.validate()?;
    Ok(set)
}

/// Cuts the analysis window `[onset, onset + len)` out of every epoch and
/// baseline-corrects it.
fn analysis_windows(set: &EpochSet, len: usize) -> Result<EpochSet> {
    let mut data = Array3::<f32>::zeros((set.len(), set.channels(), len));
    for (i, mut dst) in data.outer_iter_mut().enumerate() {
        let start = set.onset_index[i];
        if start + len > set.samples() {
            return Err(invalid!(
                "epoch {i}: onset {start} leaves fewer than {len} samples of {}",
                set.samples()
            ));
        }
        let w = set.data.slice(s![i, .., start..start + len]).mapv(f64::from);
        dst.assign(&baseline_corrected(w.view()).mapv(|v| v as f32));
    }
    Ok(EpochSet {
        data,
        labels: set.labels.clone(),
        subject_id: set.subject_id.clone(),
        sampling_rate: set.sampling_rate,
        onset_index: vec![0; set.len()],
        acquisition_order: set.acquisition_order.clone(),
    })
}

/// filter → resample → epoch/baseline → CWT → crop/resize.
pub fn preprocess_pipeline(input: &PipelineInput, config: &PreprocessConfig) -> Result<FeatureSet> {
    config.validate()?;
    let len = config.epoch_len();
    let windows = match input {
        PipelineInput::Raw(raw) => {
            let mut raw = match &config.filter {
                Some(spec) => raw.filtered(spec)?,
                None => raw.clone(),
            };
            if raw.sampling_rate != config.target_hz {
                raw = raw.resampled(config.target_hz)?;
            }
            epoch_and_baseline(&raw, config.epoch_s)?.set
        }
        PipelineInput::Epochs(set) => {
            set.validate()?;
            if set.is_empty() {
                return Ok(FeatureSet::empty(set.channels(), config.crop.image_size, &set.subject_id));
            }
            let filtered = match &config.filter {
                Some(spec) => bandpass_filter(set, spec)?,
                None => set.clone(),
            };
            let resampled = resample(&filtered, config.target_hz)?;
            analysis_windows(&resampled, len)?
        }
    };
    features_from_windows(&windows, config)
}

/// Kernel of the configured filter at `sampling_rate`, for manifests.
pub fn filter_taps(config: &PreprocessConfig, sampling_rate: f64) -> Result<Option<Vec<f64>>> {
    config.filter.as_ref().map(|f| f.design(sampling_rate)).transpose()
}
