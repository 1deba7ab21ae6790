//! Light sources: model correlation functions and seeded photon-stream
//! generators for Poissonian, thermal (bunched) and antibunched light.

use std::f64::consts::LN_2;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{rng_for, seconds_to_ps, Budget, TimeTagStream, PS_PER_S};

// RNG stream ids, one per generator so a shared seed never aliases.
const RNG_POISSON: u64 = 1;
const RNG_FIELD: u64 = 2;
const RNG_COX: u64 = 3;
const RNG_ANTIBUNCHED: u64 = 4;
const RNG_SEGMENT_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Poissonian,
    ThermalBunched,
    TwoLevelAntibunched,
}

/// A light source described by its mean photon rate and the shape of its
/// second-order correlation function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    pub kind: SourceKind,
    /// Mean photon rate, events per second.
    pub mean_rate: f64,
    /// Bunching or antibunching timescale `T` in seconds. Ignored for
    /// Poissonian light.
    pub correlation_time: f64,
}

impl SourceModel {
    pub fn new(kind: SourceKind, mean_rate: f64, correlation_time: f64) -> Result<Self> {
        let model = SourceModel {
            kind,
            mean_rate,
            correlation_time,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn poissonian(mean_rate: f64) -> Result<Self> {
        Self::new(SourceKind::Poissonian, mean_rate, 0.0)
    }

    pub fn thermal(mean_rate: f64, correlation_time: f64) -> Result<Self> {
        Self::new(SourceKind::ThermalBunched, mean_rate, correlation_time)
    }

    pub fn antibunched(mean_rate: f64, correlation_time: f64) -> Result<Self> {
        Self::new(SourceKind::TwoLevelAntibunched, mean_rate, correlation_time)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean_rate > 0.0) || !self.mean_rate.is_finite() {
            return Err(Error::invalid("mean_rate", "must be positive and finite"));
        }
        if self.kind != SourceKind::Poissonian
            && (!(self.correlation_time > 0.0) || !self.correlation_time.is_finite())
        {
            return Err(Error::invalid(
                "correlation_time",
                "must be positive for bunched or antibunched light",
            ));
        }
        Ok(())
    }

    /// Same correlation shape at a different mean rate.
    pub fn with_rate(self, mean_rate: f64) -> Self {
        SourceModel { mean_rate, ..self }
    }

    /// Normalised second-order correlation at delay `tau` seconds.
    pub fn g2(&self, tau: f64) -> f64 {
        let t = self.correlation_time;
        match self.kind {
            SourceKind::Poissonian => 1.0,
            SourceKind::ThermalBunched => 1.0 + (-LN_2 * tau * tau / (t * t)).exp(),
            SourceKind::TwoLevelAntibunched => -(-tau.abs() / t).exp_m1(),
        }
    }

    pub fn g2_max(&self) -> f64 {
        match self.kind {
            SourceKind::ThermalBunched => 2.0,
            _ => 1.0,
        }
    }

    /// Delay beyond which `|g2 - 1|` is below 1e-16.
    pub fn settle_time(&self) -> f64 {
        let t = self.correlation_time;
        match self.kind {
            SourceKind::Poissonian => 0.0,
            SourceKind::ThermalBunched => t * (16.0 * std::f64::consts::LN_10 / LN_2).sqrt(),
            SourceKind::TwoLevelAntibunched => t * 16.0 * std::f64::consts::LN_10,
        }
    }
}

/// Model `g2(tau)` for a source; `tau` in seconds.
pub fn g2_model(model: &SourceModel, tau: f64) -> f64 {
    model.g2(tau)
}

/// Photon flux sampled on a uniform grid, photons per second.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityTrace {
    dt_ps: u64,
    values: Vec<f64>,
}

impl IntensityTrace {
    pub fn new(dt_ps: u64, values: Vec<f64>) -> Result<Self> {
        if dt_ps == 0 {
            return Err(Error::invalid("dt_ps", "grid step must be positive"));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(
                "values",
                format!("intensity must be finite and non-negative, found {v}"),
            ));
        }
        Ok(IntensityTrace { dt_ps, values })
    }

    pub fn constant(dt_ps: u64, cells: usize, rate: f64) -> Result<Self> {
        Self::new(dt_ps, vec![rate; cells])
    }

    pub fn dt_ps(&self) -> u64 {
        self.dt_ps
    }

    pub fn dt_s(&self) -> f64 {
        self.dt_ps as f64 / PS_PER_S
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn duration_ps(&self) -> u64 {
        self.dt_ps * self.values.len() as u64
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn check_duration(duration: f64) -> Result<u64> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::invalid("duration", "must be positive and finite"));
    }
    Ok(seconds_to_ps(duration))
}

/// Appends `t` (fractional picoseconds) unless it lands on the previous tag.
#[inline]
fn push_tag(tags: &mut Vec<u64>, t: f64) {
    let t = t as u64;
    if tags.last().is_none_or(|&last| t > last) {
        tags.push(t);
    }
}

fn poisson_tags(rng: &mut ChaCha8Rng, rate: f64, duration_ps: u64) -> Vec<u64> {
    if rate == 0.0 {
        return Vec::new();
    }
    let expected = rate * duration_ps as f64 / PS_PER_S;
    let mut tags = Vec::with_capacity((expected + 6.0 * expected.sqrt() + 16.0) as usize);
    let mean_gap_ps = PS_PER_S / rate;
    let end = duration_ps as f64;
    let mut t = 0.0;
    loop {
        t += rng.sample::<f64, _>(Exp1) * mean_gap_ps;
        if t > end {
            break;
        }
        push_tag(&mut tags, t);
    }
    tags
}

/// Homogeneous Poisson process on `[0, duration]` seconds.
pub fn sample_poisson_stream(rate: f64, duration: f64, seed: u64) -> Result<TimeTagStream> {
    sample_poisson_stream_with_budget(rate, duration, seed, Budget::default())
}

pub fn sample_poisson_stream_with_budget(
    rate: f64,
    duration: f64,
    seed: u64,
    budget: Budget,
) -> Result<TimeTagStream> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::invalid("rate", "must be non-negative and finite"));
    }
    let duration_ps = check_duration(duration)?;
    budget.check(rate * duration)?;
    let mut rng = rng_for(seed, RNG_POISSON);
    let tags = poisson_tags(&mut rng, rate, duration_ps);
    Ok(TimeTagStream::from_sorted(0, tags, duration_ps))
}

/// Poisson process generated as `segments` consecutive windows, each from
/// its own RNG stream, in parallel. The joined stream is a valid record of
/// the full duration.
pub fn sample_poisson_segmented(
    rate: f64,
    duration: f64,
    segments: usize,
    seed: u64,
) -> Result<TimeTagStream> {
    if segments == 0 {
        return Err(Error::invalid("segments", "need at least one segment"));
    }
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::invalid("rate", "must be non-negative and finite"));
    }
    let duration_ps = check_duration(duration)?;
    Budget::default().check(rate * duration)?;
    let base = duration_ps / segments as u64;
    let parts: Vec<TimeTagStream> = (0..segments)
        .into_par_iter()
        .map(|i| {
            let len = if i + 1 == segments {
                duration_ps - base * (segments as u64 - 1)
            } else {
                base
            };
            let mut rng = rng_for(seed, RNG_SEGMENT_BASE + i as u64);
            TimeTagStream::from_sorted(0, poisson_tags(&mut rng, rate, len), len)
        })
        .collect();
    Ok(TimeTagStream::concat(0, parts))
}

/// Streaming synthesis of a circular complex Gaussian field with Gaussian
/// first-order coherence `g1(tau) = exp(-ln2·tau²/(2T²))`, so that the
/// intensity `|E|²` has `g2 = 1 + |g1|²` and an exponential marginal.
///
/// White noise is filtered by overlap-save FFT convolution with a Gaussian
/// kernel whose self-convolution is `g1`, which keeps memory bounded for
/// arbitrarily long records.
struct ThermalField {
    rng: ChaCha8Rng,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    kernel_spectrum: Vec<Complex<f64>>,
    history: Vec<Complex<f64>>,
    buffer: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
    taps: usize,
    scale: f64,
}

impl ThermalField {
    fn new(mean_rate: f64, correlation_time: f64, grid_dt: f64, seed: u64) -> Self {
        // g1 has standard deviation sigma; a kernel of std sigma/sqrt(2)
        // convolved with itself reproduces it.
        let sigma = correlation_time / LN_2.sqrt();
        let kernel_sd = sigma / 2f64.sqrt() / grid_dt;
        let half = (7.0 * kernel_sd).ceil() as usize;
        let taps = 2 * half + 1;
        let kernel: Vec<f64> = (0..taps)
            .map(|i| {
                let x = (i as f64 - half as f64) / kernel_sd;
                (-0.5 * x * x).exp()
            })
            .collect();
        let norm: f64 = kernel.iter().map(|h| h * h).sum::<f64>() * 2.0;

        let len = (8 * taps).next_power_of_two().max(1 << 14);
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(len);
        let ifft = planner.plan_fft_inverse(len);
        let mut kernel_spectrum = vec![Complex::new(0.0, 0.0); len];
        for (slot, &h) in kernel_spectrum.iter_mut().zip(&kernel) {
            slot.re = h;
        }
        fft.process(&mut kernel_spectrum);
        // fold the inverse transform's 1/len into the spectrum
        for c in kernel_spectrum.iter_mut() {
            *c /= len as f64;
        }

        let mut rng = rng_for(seed, RNG_FIELD);
        let history = (0..taps - 1).map(|_| complex_normal(&mut rng)).collect();
        let scratch_len = fft.get_inplace_scratch_len().max(ifft.get_inplace_scratch_len());
        ThermalField {
            rng,
            fft,
            ifft,
            kernel_spectrum,
            history,
            buffer: vec![Complex::new(0.0, 0.0); len],
            scratch: vec![Complex::new(0.0, 0.0); scratch_len],
            taps,
            scale: mean_rate / norm,
        }
    }

    /// Number of intensity samples produced per call to `next_block`.
    fn block_len(&self) -> usize {
        self.buffer.len() - self.taps + 1
    }

    /// Fills `out` with the next `block_len()` intensity samples.
    fn next_block(&mut self, out: &mut Vec<f64>) {
        let keep = self.taps - 1;
        let fresh = self.block_len();
        self.buffer[..keep].copy_from_slice(&self.history);
        for slot in self.buffer[keep..].iter_mut() {
            *slot = complex_normal(&mut self.rng);
        }
        self.history
            .copy_from_slice(&self.buffer[self.buffer.len() - keep..]);
        self.fft.process_with_scratch(&mut self.buffer, &mut self.scratch);
        for (b, k) in self.buffer.iter_mut().zip(&self.kernel_spectrum) {
            *b *= *k;
        }
        self.ifft.process_with_scratch(&mut self.buffer, &mut self.scratch);
        out.clear();
        out.extend(self.buffer[keep..keep + fresh].iter().map(|e| e.norm_sqr() * self.scale));
    }
}

#[inline]
fn complex_normal(rng: &mut ChaCha8Rng) -> Complex<f64> {
    Complex::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn check_thermal_grid(correlation_time: f64, grid_dt: f64) -> Result<()> {
    if !(correlation_time > 0.0) || !correlation_time.is_finite() {
        return Err(Error::invalid("correlation_time", "must be positive"));
    }
    if !(grid_dt > 0.0) {
        return Err(Error::invalid("grid_dt", "must be positive"));
    }
    let limit = correlation_time / 10.0;
    if grid_dt > limit * (1.0 + 1e-9) {
        return Err(Error::GridTooCoarse { grid_dt, limit });
    }
    if seconds_to_ps(grid_dt) == 0 {
        return Err(Error::invalid("grid_dt", "must be at least 1 ps"));
    }
    Ok(())
}

/// Stationary thermal intensity trace with exponential marginal and
/// `g2(tau) = 1 + exp(-ln2·tau²/T²)`. The grid step is rounded to whole
/// picoseconds and must resolve `T/10`.
pub fn sample_thermal_intensity(
    mean_rate: f64,
    correlation_time: f64,
    duration: f64,
    grid_dt: f64,
    seed: u64,
) -> Result<IntensityTrace> {
    if !(mean_rate >= 0.0) || !mean_rate.is_finite() {
        return Err(Error::invalid("mean_rate", "must be non-negative and finite"));
    }
    check_thermal_grid(correlation_time, grid_dt)?;
    let duration_ps = check_duration(duration)?;
    let dt_ps = seconds_to_ps(grid_dt);
    let cells = duration_ps.div_ceil(dt_ps) as usize;
    Budget::default().check(cells as f64)?;
    let dt = dt_ps as f64 / PS_PER_S;

    let mut field = ThermalField::new(mean_rate, correlation_time, dt, seed);
    let mut values = Vec::with_capacity(cells);
    let mut block = Vec::with_capacity(field.block_len());
    while values.len() < cells {
        field.next_block(&mut block);
        let take = (cells - values.len()).min(block.len());
        values.extend_from_slice(&block[..take]);
    }
    IntensityTrace::new(dt_ps, values)
}

/// Inhomogeneous Poisson sampler over a piecewise-constant intensity,
/// fed one run of cells at a time. Arrivals are found by walking unit
/// exponential gaps through the integrated intensity, which places each
/// tag uniformly within its cell.
struct CoxSampler {
    rng: ChaCha8Rng,
    dt_ps: u64,
    dt_s: f64,
    cell: u64,
    pending: f64,
    tags: Vec<u64>,
}

impl CoxSampler {
    fn new(seed: u64, dt_ps: u64, capacity: usize) -> Self {
        let mut rng = rng_for(seed, RNG_COX);
        let pending = rng.sample(Exp1);
        CoxSampler {
            rng,
            dt_ps,
            dt_s: dt_ps as f64 / PS_PER_S,
            cell: 0,
            pending,
            tags: Vec::with_capacity(capacity),
        }
    }

    fn feed(&mut self, values: &[f64]) {
        let width = self.dt_ps as f64;
        for &rate in values {
            let mass = rate * self.dt_s;
            let start = (self.cell * self.dt_ps) as f64;
            let mut used = 0.0;
            while self.pending <= mass - used {
                used += self.pending;
                push_tag(&mut self.tags, start + used / mass * width);
                self.pending = self.rng.sample(Exp1);
            }
            self.pending -= mass - used;
            self.cell += 1;
        }
    }

    fn finish(self) -> TimeTagStream {
        let duration = self.cell * self.dt_ps;
        TimeTagStream::from_sorted(0, self.tags, duration)
    }
}

/// Cox process driven by `trace`: an inhomogeneous Poisson process whose
/// rate is the trace value in each grid cell.
pub fn sample_doubly_stochastic_stream(trace: &IntensityTrace, seed: u64) -> Result<TimeTagStream> {
    sample_doubly_stochastic_stream_with_budget(trace, seed, Budget::default())
}

pub fn sample_doubly_stochastic_stream_with_budget(
    trace: &IntensityTrace,
    seed: u64,
    budget: Budget,
) -> Result<TimeTagStream> {
    let expected = trace.values().iter().sum::<f64>() * trace.dt_s();
    budget.check(expected)?;
    let mut sampler = CoxSampler::new(seed, trace.dt_ps(), (expected * 1.01 + 16.0) as usize);
    sampler.feed(trace.values());
    Ok(sampler.finish())
}

/// Thermal photon stream generated without materialising the intensity
/// trace. Uses a `T/10` grid and produces exactly the stream that
/// [`sample_doubly_stochastic_stream`] yields on the trace from
/// [`sample_thermal_intensity`] with the same grid and seed.
pub fn sample_thermal_stream(
    mean_rate: f64,
    correlation_time: f64,
    duration: f64,
    seed: u64,
) -> Result<TimeTagStream> {
    sample_thermal_stream_with_budget(mean_rate, correlation_time, duration, seed, Budget::default())
}

pub fn sample_thermal_stream_with_budget(
    mean_rate: f64,
    correlation_time: f64,
    duration: f64,
    seed: u64,
    budget: Budget,
) -> Result<TimeTagStream> {
    if !(mean_rate >= 0.0) || !mean_rate.is_finite() {
        return Err(Error::invalid("mean_rate", "must be non-negative and finite"));
    }
    let grid_dt = correlation_time / 10.0;
    check_thermal_grid(correlation_time, grid_dt)?;
    let duration_ps = check_duration(duration)?;
    budget.check(mean_rate * duration)?;
    let dt_ps = seconds_to_ps(grid_dt);
    let cells = duration_ps.div_ceil(dt_ps) as usize;
    let dt = dt_ps as f64 / PS_PER_S;

    let mut field = ThermalField::new(mean_rate, correlation_time, dt, seed);
    let mut sampler = CoxSampler::new(seed, dt_ps, (mean_rate * duration * 1.05 + 16.0) as usize);
    let mut block = Vec::with_capacity(field.block_len());
    let mut done = 0;
    while done < cells {
        field.next_block(&mut block);
        let take = (cells - done).min(block.len());
        sampler.feed(&block[..take]);
        done += take;
    }
    Ok(sampler.finish())
}

/// Mean of the renewal interval for emission hazard
/// `h(u) = base·(1 - exp(-u/T))`, in units of `T`, given `a = base·T`.
fn antibunched_mean_interval(a: f64) -> f64 {
    // integrand exp(-a·(x - 1 + e^{-x})); beyond x = 20 the e^{-x} term is
    // negligible and the remainder integrates in closed form
    let upper = 20.0;
    let n = 8000;
    let h = upper / n as f64;
    let f = |x: f64| (-a * (x + (-x).exp_m1())).exp();
    let mut sum = f(0.0) + f(upper);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(i as f64 * h);
    }
    sum * h / 3.0 + (-a * (upper - 1.0)).exp() / a
}

/// Base hazard `λ₀` (per second) for which the antibunched renewal
/// process has mean rate `rate`. Requires `rate·T < 1`.
pub fn antibunched_base_rate(rate: f64, correlation_time: f64) -> Result<f64> {
    let product = rate * correlation_time;
    if !(rate > 0.0) || !(correlation_time > 0.0) {
        return Err(Error::invalid("rate", "rate and T must be positive"));
    }
    if product >= 1.0 {
        return Err(Error::InfeasibleRate { product });
    }
    let target = 1.0 / product;
    // mean interval decreases monotonically in a
    let (mut lo, mut hi) = (1e-12f64.ln(), 1e6f64.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if antibunched_mean_interval(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp() / correlation_time)
}

/// Antibunched emitter: a renewal process whose emission hazard recovers
/// as `λ₀·(1 - exp(-u/T))` after each emission, generated by thinning.
/// The stream starts in steady state.
pub fn sample_antibunched_stream(
    rate: f64,
    correlation_time: f64,
    duration: f64,
    seed: u64,
) -> Result<TimeTagStream> {
    sample_antibunched_stream_with_budget(rate, correlation_time, duration, seed, Budget::default())
}

pub fn sample_antibunched_stream_with_budget(
    rate: f64,
    correlation_time: f64,
    duration: f64,
    seed: u64,
    budget: Budget,
) -> Result<TimeTagStream> {
    let base = antibunched_base_rate(rate, correlation_time)?;
    let duration_ps = check_duration(duration)?;
    budget.check(rate * duration)?;

    let mut rng = rng_for(seed, RNG_ANTIBUNCHED);
    let t_ps = correlation_time * PS_PER_S;
    let gap_ps = PS_PER_S / base;
    let end = duration_ps as f64;
    let burn_in = (20.0 / rate + 50.0 * correlation_time) * PS_PER_S;
    let expected = rate * duration;
    let mut tags = Vec::with_capacity((expected + 6.0 * expected.sqrt() + 16.0) as usize);
    let mut t = -burn_in;
    let mut last = t;
    loop {
        t += rng.sample::<f64, _>(Exp1) * gap_ps;
        if t > end {
            break;
        }
        let accept = -(-(t - last) / t_ps).exp_m1();
        if rng.random::<f64>() < accept {
            last = t;
            if t >= 0.0 {
                push_tag(&mut tags, t);
            }
        }
    }
    Ok(TimeTagStream::from_sorted(0, tags, duration_ps))
}

/// Photon stream for any source model over `duration` seconds.
pub fn sample_source_stream(model: &SourceModel, duration: f64, seed: u64) -> Result<TimeTagStream> {
    model.validate()?;
    match model.kind {
        SourceKind::Poissonian => sample_poisson_stream(model.mean_rate, duration, seed),
        SourceKind::ThermalBunched => {
            sample_thermal_stream(model.mean_rate, model.correlation_time, duration, seed)
        }
        SourceKind::TwoLevelAntibunched => {
            sample_antibunched_stream(model.mean_rate, model.correlation_time, duration, seed)
        }
    }
}

/// Thermal intensity marginal `ξ(R) = exp(-R/⟨R⟩)/⟨R⟩`.
pub fn thermal_rate_density(rate: f64, mean_rate: f64) -> f64 {
    if rate < 0.0 {
        return 0.0;
    }
    (-rate / mean_rate).exp() / mean_rate
}
