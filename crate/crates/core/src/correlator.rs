//! Photon correlation estimators and the rate-dependent suppression
//! prediction for thermal light.
//!
//! Delay bins are centred on multiples of the bin width: bin `j` collects
//! delays in `[j·b − b/2, j·b + b/2)`, and a histogram window `max_tau`
//! keeps every bin whose centre satisfies `|j·b| ≤ max_tau`. Counts are
//! normalised by the accidental expectation built from the singles rates.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::TimeTagStream;
use crate::wtd::EfficiencyCurve;

pub const DEFAULT_BIN_PS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub order: usize,
    pub bin_ps: u64,
    /// Bin-centre delays in ps, one axis per delay coordinate.
    pub axes: Vec<Vec<i64>>,
    /// Raw coincidence counts, row-major over the axes.
    pub counts: Vec<u64>,
    /// Counts divided by the accidental expectation per bin.
    pub normalized: Vec<f64>,
    /// Per-channel detected rates, events per second.
    pub singles: Vec<f64>,
    pub duration_s: f64,
}

impl CorrelationHistogram {
    /// Normalised value at the bin nearest to zero delay on every axis.
    pub fn at_zero(&self) -> f64 {
        let mut index = 0;
        for axis in &self.axes {
            index = index * axis.len() + axis.len() / 2;
        }
        self.normalized[index]
    }

    /// Normalised value at the given bin indices along each axis.
    pub fn at(&self, idx: &[usize]) -> f64 {
        let mut index = 0;
        for (axis, &i) in self.axes.iter().zip(idx) {
            index = index * axis.len() + i;
        }
        self.normalized[index]
    }

    /// Accidental (uncorrelated) expectation per bin.
    pub fn accidentals(&self) -> f64 {
        let b = self.bin_ps as f64 * 1e-12;
        self.singles.iter().product::<f64>() * b.powi(self.order as i32 - 1) * self.duration_s
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        match self.order {
            2 => {
                writeln!(out, "tau_ps,counts,g")?;
                for (i, tau) in self.axes[0].iter().enumerate() {
                    writeln!(out, "{tau},{},{}", self.counts[i], self.normalized[i])?;
                }
            }
            3 => {
                writeln!(out, "tau1_ps,tau2_ps,counts,g")?;
                let n2 = self.axes[1].len();
                for (i, t1) in self.axes[0].iter().enumerate() {
                    for (j, t2) in self.axes[1].iter().enumerate() {
                        let k = i * n2 + j;
                        writeln!(out, "{t1},{t2},{},{}", self.counts[k], self.normalized[k])?;
                    }
                }
            }
            n => return Err(Error::invalid("order", format!("no CSV layout for order {n}"))),
        }
        out.flush()?;
        Ok(())
    }
}

fn check_bins(bin_ps: u64, max_tau_ps: u64) -> Result<usize> {
    if bin_ps == 0 {
        return Err(Error::invalid("bin_ps", "must be at least 1"));
    }
    let half = max_tau_ps / bin_ps;
    if half > 5_000_000 {
        return Err(Error::invalid("max_tau_ps", "window holds too many bins"));
    }
    Ok(half as usize)
}

fn check_streams(streams: &[&TimeTagStream]) -> Result<f64> {
    for s in streams {
        if s.is_empty() {
            return Err(Error::EmptyStream { channel: s.channel() });
        }
    }
    let d = streams[0].duration_ps();
    if streams.iter().any(|s| s.duration_ps() != d) || d == 0 {
        return Err(Error::invalid(
            "duration",
            "streams must share one positive record duration",
        ));
    }
    Ok(d as f64 * 1e-12)
}

/// Bin index of delay `tau` with centred bins, or `None` outside `±half`.
#[inline]
fn bin_of(tau: i64, bin: i64, half: i64) -> Option<usize> {
    let j = (2 * tau + bin).div_euclid(2 * bin);
    (j >= -half && j <= half).then(|| (j + half) as usize)
}

/// Widest reach of the centred window on either side, in ps.
fn reach(bin_ps: u64, half: usize) -> u64 {
    half as u64 * bin_ps + bin_ps / 2 + 1
}

/// Counts of pairs `(t_a, t_b)` per delay bin of `t_b − t_a`, using a
/// sliding window over `b`. `a` may be any contiguous slice of a stream.
fn pair_counts_slice(a: &[u64], b: &[u64], bin_ps: u64, half: usize) -> Vec<u64> {
    let mut counts = vec![0u64; 2 * half + 1];
    let reach = reach(bin_ps, half);
    let (bin, h) = (bin_ps as i64, half as i64);
    let mut start = 0usize;
    for &ta in a {
        let lo = ta.saturating_sub(reach);
        while start < b.len() && b[start] < lo {
            start += 1;
        }
        let hi = ta + reach;
        for &tb in &b[start..] {
            if tb > hi {
                break;
            }
            if let Some(j) = bin_of(tb as i64 - ta as i64, bin, h) {
                counts[j] += 1;
            }
        }
    }
    counts
}

/// Pair counts between two streams over `2·(max_tau/bin)+1` centred bins.
pub fn pair_counts(a: &TimeTagStream, b: &TimeTagStream, bin_ps: u64, max_tau_ps: u64) -> Result<Vec<u64>> {
    let half = check_bins(bin_ps, max_tau_ps)?;
    Ok(pair_counts_slice(a.tags(), b.tags(), bin_ps, half))
}

/// Same counts as [`pair_counts`], computed over `chunks` time-partitions
/// of `a` in parallel. Each chunk sees the `b` tags within `max_tau` of its
/// span, so the merged counts are exact.
pub fn pair_counts_chunked(
    a: &TimeTagStream,
    b: &TimeTagStream,
    bin_ps: u64,
    max_tau_ps: u64,
    chunks: usize,
) -> Result<Vec<u64>> {
    let half = check_bins(bin_ps, max_tau_ps)?;
    let chunks = chunks.max(1);
    let (at, bt) = (a.tags(), b.tags());
    let reach = reach(bin_ps, half);
    let bounds: Vec<(usize, usize)> = (0..chunks)
        .map(|c| (c * at.len() / chunks, (c + 1) * at.len() / chunks))
        .filter(|(lo, hi)| hi > lo)
        .collect();
    let partial: Vec<Vec<u64>> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let part = &at[lo..hi];
            let b_lo = bt.partition_point(|&t| t < part[0].saturating_sub(reach));
            let b_hi = bt.partition_point(|&t| t <= part[part.len() - 1] + reach);
            pair_counts_slice(part, &bt[b_lo..b_hi], bin_ps, half)
        })
        .collect();
    let mut counts = vec![0u64; 2 * half + 1];
    for p in partial {
        for (c, v) in counts.iter_mut().zip(p) {
            *c += v;
        }
    }
    Ok(counts)
}

/// Normalised second-order cross-correlation of `a` and `b` against
/// `τ = t_b − t_a`.
pub fn g2_histogram(a: &TimeTagStream, b: &TimeTagStream, bin_ps: u64, max_tau_ps: u64) -> Result<CorrelationHistogram> {
    let duration = check_streams(&[a, b])?;
    let half = check_bins(bin_ps, max_tau_ps)?;
    let chunks = 4 * rayon::current_num_threads();
    let counts = pair_counts_chunked(a, b, bin_ps, max_tau_ps, chunks)?;
    let singles = vec![a.rate(), b.rate()];
    let axis: Vec<i64> = (-(half as i64)..=half as i64).map(|j| j * bin_ps as i64).collect();
    let mut h = CorrelationHistogram {
        order: 2,
        bin_ps,
        axes: vec![axis],
        counts,
        normalized: Vec::new(),
        singles,
        duration_s: duration,
    };
    let acc = h.accidentals();
    h.normalized = h.counts.iter().map(|&c| c as f64 / acc).collect();
    Ok(h)
}

/// Normalised third-order correlation over `(τ₁, τ₂) = (t_b − t_a, t_c − t_a)`.
pub fn g3_surface(
    a: &TimeTagStream,
    b: &TimeTagStream,
    c: &TimeTagStream,
    bin_ps: u64,
    max_tau_ps: u64,
) -> Result<CorrelationHistogram> {
    let duration = check_streams(&[a, b, c])?;
    let half = check_bins(bin_ps, max_tau_ps)?;
    let width = 2 * half + 1;
    if width * width > 50_000_000 {
        return Err(Error::invalid("max_tau_ps", "surface holds too many bins"));
    }
    let reach = reach(bin_ps, half);
    let (bin, h) = (bin_ps as i64, half as i64);
    let at = a.tags();
    let chunks = 4 * rayon::current_num_threads();
    let partial: Vec<Vec<u64>> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let part = &at[ci * at.len() / chunks..(ci + 1) * at.len() / chunks];
            let mut counts = vec![0u64; width * width];
            let (mut sb, mut sc) = (0usize, 0usize);
            let (bt, ct) = (b.tags(), c.tags());
            if let Some(&first) = part.first() {
                sb = bt.partition_point(|&t| t < first.saturating_sub(reach));
                sc = ct.partition_point(|&t| t < first.saturating_sub(reach));
            }
            let mut jb = Vec::new();
            for &ta in part {
                let lo = ta.saturating_sub(reach);
                while sb < bt.len() && bt[sb] < lo {
                    sb += 1;
                }
                while sc < ct.len() && ct[sc] < lo {
                    sc += 1;
                }
                jb.clear();
                for &tb in bt[sb..].iter().take_while(|&&t| t <= ta + reach) {
                    if let Some(j) = bin_of(tb as i64 - ta as i64, bin, h) {
                        jb.push(j);
                    }
                }
                if jb.is_empty() {
                    continue;
                }
                for &tc in ct[sc..].iter().take_while(|&&t| t <= ta + reach) {
                    if let Some(k) = bin_of(tc as i64 - ta as i64, bin, h) {
                        for &j in &jb {
                            counts[j * width + k] += 1;
                        }
                    }
                }
            }
            counts
        })
        .collect();
    let mut counts = vec![0u64; width * width];
    for p in partial {
        for (c, v) in counts.iter_mut().zip(p) {
            *c += v;
        }
    }
    let axis: Vec<i64> = (-h..=h).map(|j| j * bin).collect();
    let mut hist = CorrelationHistogram {
        order: 3,
        bin_ps,
        axes: vec![axis.clone(), axis],
        counts,
        normalized: Vec::new(),
        singles: vec![a.rate(), b.rate(), c.rate()],
        duration_s: duration,
    };
    let acc = hist.accidentals();
    hist.normalized = hist.counts.iter().map(|&c| c as f64 / acc).collect();
    Ok(hist)
}

/// `g(n)` at zero delay with its Poisson standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnEstimate {
    pub order: usize,
    pub bin_ps: u64,
    pub value: f64,
    pub stderr: f64,
    pub coincidences: u64,
    pub accidentals: f64,
}

impl GnEstimate {
    pub fn from_counts(order: usize, bin_ps: u64, coincidences: u64, accidentals: f64) -> Self {
        let value = coincidences as f64 / accidentals;
        let stderr = if coincidences > 0 {
            value / (coincidences as f64).sqrt()
        } else {
            1.0 / accidentals
        };
        GnEstimate {
            order,
            bin_ps,
            value,
            stderr,
            coincidences,
            accidentals,
        }
    }

    /// JSON object `{order, bin_ps, value, stderr}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "order": self.order,
            "bin_ps": self.bin_ps,
            "value": self.value,
            "stderr": self.stderr,
        })
    }
}

/// Number of n-tuples, one tag per stream, that share an absolute time bin
/// `⌊t/bin⌋`.
pub fn coincidence_count(streams: &[&TimeTagStream], bin_ps: u64) -> u64 {
    let n = streams.len();
    let mut pos = vec![0usize; n];
    let mut total = 0u64;
    let first = streams[0].tags();
    while pos[0] < first.len() {
        let bin = first[pos[0]] / bin_ps;
        let mut product = 1u64;
        for (i, s) in streams.iter().enumerate() {
            let tags = s.tags();
            let p = &mut pos[i];
            while *p < tags.len() && tags[*p] / bin_ps < bin {
                *p += 1;
            }
            let mut k = 0;
            while *p + k < tags.len() && tags[*p + k] / bin_ps == bin {
                k += 1;
            }
            product *= k as u64;
            if i > 0 {
                *p += k;
            }
            if product == 0 && i > 0 {
                break;
            }
        }
        // skip the rest of stream 0's tags in this bin
        while pos[0] < first.len() && first[pos[0]] / bin_ps == bin {
            pos[0] += 1;
        }
        total += product;
    }
    total
}

/// Accidental n-fold coincidences for independent streams sharing one
/// bin: `∏Nᵢ·(bin/D)^(n−1)`.
pub fn accidental_coincidences(streams: &[&TimeTagStream], bin_ps: u64) -> f64 {
    let d = streams[0].duration_ps() as f64;
    let frac = bin_ps as f64 / d;
    streams.iter().map(|s| s.len() as f64).product::<f64>() * frac.powi(streams.len() as i32 - 1)
}

/// `g(n)(0,…,0)` from same-bin coincidences across `n ≥ 2` streams.
pub fn gn_zero(streams: &[&TimeTagStream], bin_ps: u64) -> Result<GnEstimate> {
    if streams.len() < 2 {
        return Err(Error::invalid("streams", "need at least two channels"));
    }
    if bin_ps == 0 {
        return Err(Error::invalid("bin_ps", "must be at least 1"));
    }
    check_streams(streams)?;
    let c = coincidence_count(streams, bin_ps);
    Ok(GnEstimate::from_counts(
        streams.len(),
        bin_ps,
        c,
        accidental_coincidences(streams, bin_ps),
    ))
}

/// `n!`, the ideal thermal `g(n)(0)`.
pub fn analytic_gn_ideal(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

const QUAD_LOW: f64 = 1e-4;
const QUAD_HIGH: f64 = 20.0;
const QUAD_TOL: f64 = 1e-5;

fn check_coverage(eff: &EfficiencyCurve, mean_rate: f64) -> Result<()> {
    let (need_lo, need_hi) = (0.05 * mean_rate, QUAD_HIGH * mean_rate);
    if eff.r_max() < need_hi * (1.0 - 1e-9) || eff.r_min() > need_lo {
        return Err(Error::Coverage {
            needed_min: need_lo,
            needed_max: need_hi,
            covered_min: eff.r_min(),
            covered_max: eff.r_max(),
        });
    }
    Ok(())
}

/// `∫ f(R)·ξ(R) dR` over `[⟨R⟩·1e-4, 20⟨R⟩]` for the thermal rate density
/// `ξ(R) = exp(−R/⟨R⟩)/⟨R⟩`, by trapezoid sums on a logarithmic grid whose
/// spacing is halved until the relative change drops below 1e-5.
pub fn thermal_average(f: &dyn Fn(f64) -> f64, mean_rate: f64) -> f64 {
    let (u0, u1) = ((QUAD_LOW * mean_rate).ln(), (QUAD_HIGH * mean_rate).ln());
    let g = |u: f64| {
        let r = u.exp();
        f(r) * (-r / mean_rate).exp() / mean_rate * r
    };
    let mut n = 64usize;
    let mut h = (u1 - u0) / n as f64;
    let mut sum = 0.5 * (g(u0) + g(u1)) + (1..n).map(|i| g(u0 + i as f64 * h)).sum::<f64>();
    let mut estimate = sum * h;
    for _ in 0..20 {
        // new midpoints only
        let mid: f64 = (0..n).map(|i| g(u0 + (i as f64 + 0.5) * h)).sum();
        sum += mid;
        n *= 2;
        h *= 0.5;
        let next = sum * h;
        let done = ((next - estimate) / next).abs() < QUAD_TOL;
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}

/// Mean detected rate of one detector under thermal light whose no-TER
/// rate has mean `mean_rate`.
pub fn predicted_detected_rate(eff: &EfficiencyCurve, mean_rate: f64) -> Result<f64> {
    if !(mean_rate > 0.0) {
        return Err(Error::invalid("mean_R", "must be positive"));
    }
    check_coverage(eff, mean_rate)?;
    Ok(thermal_average(&|r| eff.epsilon_at(r) * r, mean_rate))
}

/// Mean no-TER rate `⟨R⟩` for which the predicted detected rate equals
/// `detected`.
pub fn mean_rate_for_detected(eff: &EfficiencyCurve, detected: f64) -> Result<f64> {
    if !(detected > 0.0) {
        return Err(Error::invalid("detected", "must be positive"));
    }
    let rate = |mu: f64| thermal_average(&|r| eff.epsilon_at(r) * r, mu);
    let (mut lo, mut hi) = (detected, detected);
    while rate(hi) < detected {
        hi *= 2.0;
        if hi > eff.r_max() {
            return Err(Error::Coverage {
                needed_min: 0.05 * hi,
                needed_max: QUAD_HIGH * hi,
                covered_min: eff.r_min(),
                covered_max: eff.r_max(),
            });
        }
    }
    while rate(lo) > detected {
        lo *= 0.5;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < detected {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) / hi < 1e-10 {
            break;
        }
    }
    let mu = 0.5 * (lo + hi);
    check_coverage(eff, mu)?;
    Ok(mu)
}

/// Predicted `g(n)(0)` for thermal light with mean no-TER rate `mean_rate`
/// per detector, all detectors sharing the efficiency curve `eff`:
/// `∫(εR)ⁿ ξ dR / (∫ εR ξ dR)ⁿ`.
pub fn predict_gn_zero(eff: &EfficiencyCurve, mean_rate: f64, n: u32) -> Result<f64> {
    if n < 1 {
        return Err(Error::invalid("n", "order must be at least 1"));
    }
    if !(mean_rate > 0.0) {
        return Err(Error::invalid("mean_R", "must be positive"));
    }
    check_coverage(eff, mean_rate)?;
    // scale rates by the mean so moments stay O(1)
    let scaled = |r: f64| eff.epsilon_at(r) * r / mean_rate;
    let num = thermal_average(&|r| scaled(r).powi(n as i32), mean_rate);
    let den = thermal_average(&scaled, mean_rate);
    Ok(num / den.powi(n as i32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sources::sample_poisson_stream;
    use crate::wtd::log_space;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn brute_pairs(a: &[u64], b: &[u64], bin: u64, max_tau: u64) -> Vec<u64> {
        let half = (max_tau / bin) as i64;
        let mut counts = vec![0u64; (2 * half + 1) as usize];
        for &ta in a {
            for &tb in b {
                let tau = tb as f64 - ta as f64;
                let j = ((tau + bin as f64 / 2.0) / bin as f64).floor();
                if j.abs() <= half as f64 {
                    counts[(j as i64 + half) as usize] += 1;
                }
            }
        }
        counts
    }

    #[test]
    fn hand_built_pairs() {
        let a = TimeTagStream::new(0, vec![0, 1000], 3000).unwrap();
        let b = TimeTagStream::new(1, vec![0, 2000], 3000).unwrap();
        let h = g2_histogram(&a, &b, 500, 2000).unwrap();
        let at = |tau: i64| h.counts[h.axes[0].iter().position(|&t| t == tau).unwrap()];
        assert_eq!(at(0), 1);
        assert_eq!(at(1000), 1);
        assert_eq!(at(2000), 1);
        assert_eq!(at(-1000), 1);
        assert_eq!(h.counts.iter().sum::<u64>(), 4);
    }

    #[test]
    fn empty_stream_is_rejected() {
        let a = TimeTagStream::new(0, vec![1], 10).unwrap();
        let b = TimeTagStream::empty(1, 10);
        assert!(matches!(g2_histogram(&a, &b, 1, 5), Err(Error::EmptyStream { channel: 1 })));
        assert!(matches!(gn_zero(&[&a, &b], 1), Err(Error::EmptyStream { .. })));
    }

    #[test]
    fn independent_poisson_is_flat() {
        let a = sample_poisson_stream(1e6, 1.0, 1).unwrap();
        let b = sample_poisson_stream(1e6, 1.0, 2).unwrap().with_channel(1);
        let h = g2_histogram(&a, &b, 50_000, 1_000_000).unwrap();
        // 5e4 accidentals per bin, 0.45% noise
        for g in &h.normalized {
            assert!((g - 1.0).abs() < 0.02, "g = {g}");
        }
    }

    #[test]
    fn coincidence_helpers() {
        let a = TimeTagStream::new(0, vec![5, 15, 17, 30], 100).unwrap();
        let b = TimeTagStream::new(1, vec![3, 12, 18, 40], 100).unwrap();
        let c = TimeTagStream::new(2, vec![1, 19, 33], 100).unwrap();
        // bin 10: [0,10) a1 b1 c1, [10,20) a2 b2 c1, [30,40) a1 b0
        assert_eq!(coincidence_count(&[&a, &b], 10), 1 + 4);
        assert_eq!(coincidence_count(&[&a, &b, &c], 10), 1 + 4);
        assert_eq!(coincidence_count(&[&c, &a, &b], 10), 1 + 4);
        let acc = accidental_coincidences(&[&a, &b], 10);
        assert_relative_eq!(acc, 16.0 * 0.1);
    }

    #[test]
    fn gn_zero_matches_zero_bin_for_poisson() {
        let a = sample_poisson_stream(2e6, 1.0, 3).unwrap();
        let b = sample_poisson_stream(2e6, 1.0, 4).unwrap().with_channel(1);
        let g = gn_zero(&[&a, &b], 20_000).unwrap();
        assert!((g.value - 1.0).abs() < 3.0 * g.stderr + 1e-3);
        let h = g2_histogram(&a, &b, 20_000, 0).unwrap();
        assert!((h.at_zero() - g.value).abs() < 4.0 * g.stderr);
    }

    #[test]
    fn ideal_moments_are_factorials() {
        assert_eq!(analytic_gn_ideal(1), 1.0);
        assert_eq!(analytic_gn_ideal(2), 2.0);
        assert_eq!(analytic_gn_ideal(4), 24.0);
        let flat = EfficiencyCurve::new(vec![1.0, 1e12], vec![1.0, 1e12]).unwrap();
        for (n, tol) in [(2, 1e-4), (3, 1e-3), (4, 1e-3)] {
            let g = predict_gn_zero(&flat, 1e6, n).unwrap();
            assert_relative_eq!(g, analytic_gn_ideal(n), max_relative = tol);
        }
    }

    #[test]
    fn saturation_drives_prediction_to_unity() {
        let t_d = 43e-9;
        let eff = EfficiencyCurve::poisson_analytic(&log_space(1e2, 1e11, 400), t_d).unwrap();
        let mut prev = f64::INFINITY;
        for mu_td in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let g = predict_gn_zero(&eff, mu_td / t_d, 2).unwrap();
            assert!(g < prev && g > 1.0);
            prev = g;
        }
        assert!(prev < 1.05);
    }

    #[test]
    fn coverage_is_checked() {
        let eff = EfficiencyCurve::poisson_analytic(&log_space(1e3, 1e7, 50), 43e-9).unwrap();
        assert!(matches!(predict_gn_zero(&eff, 1e6, 2), Err(Error::Coverage { .. })));
        assert!(predict_gn_zero(&eff, 1e5, 2).is_ok());
    }

    #[test]
    fn detected_rate_inversion() {
        let t_d = 43e-9;
        let eff = EfficiencyCurve::poisson_analytic(&log_space(1e2, 1e11, 400), t_d).unwrap();
        let mu = mean_rate_for_detected(&eff, 1e6).unwrap();
        assert_relative_eq!(predicted_detected_rate(&eff, mu).unwrap(), 1e6, max_relative = 1e-6);
    }

    #[test]
    fn csv_layouts() {
        let a = TimeTagStream::new(0, vec![0, 1000], 3000).unwrap();
        let b = TimeTagStream::new(1, vec![0, 2000], 3000).unwrap();
        let mut buf = Vec::new();
        g2_histogram(&a, &b, 1000, 1000).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("tau_ps,counts,g\n-1000,1,"));
        let mut buf = Vec::new();
        g3_surface(&a, &b, &a, 1000, 0).unwrap().write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("tau1_ps,tau2_ps,counts,g\n0,0,1,"));
    }

    #[test]
    fn estimate_json_fields() {
        let e = GnEstimate::from_counts(2, 100, 400, 200.0);
        assert_relative_eq!(e.value, 2.0);
        assert_relative_eq!(e.stderr, 0.1);
        let v = e.to_json();
        assert_eq!(v["order"], 2);
        assert_eq!(v["bin_ps"], 100);
    }

    fn arb_tags() -> impl Strategy<Value = Vec<u64>> {
        proptest::collection::btree_set(0u64..200_000, 1..150).prop_map(|s| s.into_iter().collect())
    }

    proptest! {
        #[test]
        fn sweep_matches_brute_force(a in arb_tags(), b in arb_tags(), bin in 1u64..5000, max_tau in 0u64..40_000) {
            let sa = TimeTagStream::new(0, a.clone(), 200_000).unwrap();
            let sb = TimeTagStream::new(1, b.clone(), 200_000).unwrap();
            let fast = pair_counts(&sa, &sb, bin, max_tau).unwrap();
            prop_assert_eq!(&fast, &brute_pairs(&a, &b, bin, max_tau));
            for chunks in [2, 3, 7] {
                prop_assert_eq!(&pair_counts_chunked(&sa, &sb, bin, max_tau, chunks).unwrap(), &fast);
            }
        }

        #[test]
        fn surface_marginal_matches_pairs(a in arb_tags(), b in arb_tags(), bin in 100u64..5000) {
            // with a single reference tag and c = a, each row holds the pair count
            let sb = TimeTagStream::new(1, b, 200_000).unwrap();
            let single = TimeTagStream::new(2, vec![a[0]], 200_000).unwrap();
            let surf = g3_surface(&single, &sb, &single, bin, 10 * bin).unwrap();
            let pairs = pair_counts(&single, &sb, bin, 10 * bin).unwrap();
            let width = pairs.len();
            for (row, &expected) in surf.counts.chunks(width).zip(&pairs) {
                prop_assert_eq!(row.iter().sum::<u64>(), expected);
            }
        }
    }
}
