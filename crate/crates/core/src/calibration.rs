//! TER calibration from a detector's own time tags.
//!
//! At low count rate the histogram of intervals between consecutive
//! detections is `η(dt)·exp(−R'·dt)` up to a constant. Fitting the
//! exponential tail and dividing it out leaves the efficiency recovery
//! curve, normalised to its long-time value.

use serde::{Deserialize, Serialize};

use crate::detector::TerCurve;
use crate::error::{Error, Result};
use crate::stream::{Budget, TimeTagStream, PS_PER_S};
use crate::wtd::{WaitingTimeDistribution, WtdOrigin};

pub const DEFAULT_BIN_PS: u64 = 200;

const MIN_FIT_COUNTS: f64 = 10.0;
const MAX_RESIDUAL: f64 = 0.05;
const RESIDUAL_SEGMENTS: usize = 16;
const LOW_RATE_LIMIT: f64 = 0.05;

/// Exponential fit `counts(dt) ≈ amplitude·exp(−rate·dt)` of the waiting
/// time histogram tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailFit {
    pub rate: f64,
    /// Expected counts per bin at `dt = 0`.
    pub amplitude: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// RMS relative deviation of data from the fit, taken over
    /// contiguous segments of the window.
    pub residual: f64,
}

#[derive(Serialize, Deserialize)]
struct TailFitJson {
    rate_per_s: f64,
    amplitude: f64,
    t_min_ps: u64,
    t_max_ps: u64,
    residual: f64,
}

impl TailFit {
    pub fn model(&self, dt: f64) -> f64 {
        self.amplitude * (-self.rate * dt).exp()
    }

    pub fn to_json(&self) -> String {
        let j = TailFitJson {
            rate_per_s: self.rate,
            amplitude: self.amplitude,
            t_min_ps: (self.t_min * PS_PER_S).round() as u64,
            t_max_ps: (self.t_max * PS_PER_S).round() as u64,
            residual: self.residual,
        };
        serde_json::to_string_pretty(&j).expect("plain struct serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: TailFitJson = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(TailFit {
            rate: j.rate_per_s,
            amplitude: j.amplitude,
            t_min: j.t_min_ps as f64 / PS_PER_S,
            t_max: j.t_max_ps as f64 / PS_PER_S,
            residual: j.residual,
        })
    }
}

/// Histogram of intervals between consecutive tags. Bin `k` counts
/// intervals in `[k·bin_ps, (k+1)·bin_ps)`.
pub fn waiting_time_histogram(stream: &TimeTagStream, bin_ps: u64) -> Result<WaitingTimeDistribution> {
    if bin_ps == 0 {
        return Err(Error::invalid("bin_ps", "must be at least 1"));
    }
    if stream.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: stream.len(),
        });
    }
    let tags = stream.tags();
    let longest = tags.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
    let bins = (longest / bin_ps + 1) as usize;
    Budget::default().check(bins as f64)?;
    let mut counts = vec![0.0; bins];
    for w in tags.windows(2) {
        counts[((w[1] - w[0]) / bin_ps) as usize] += 1.0;
    }
    WaitingTimeDistribution::empirical(bin_ps, counts)
}

/// Sums histograms of time-partitioned chunks. The chunks must overlap by
/// one tag so that the interval across each boundary is counted once.
pub fn merge_histograms(parts: &[WaitingTimeDistribution]) -> Result<WaitingTimeDistribution> {
    let first = parts.first().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    let bin = first.dt_ps;
    if parts.iter().any(|p| p.dt_ps != bin || p.origin != WtdOrigin::Empirical) {
        return Err(Error::invalid("bin_ps", "histograms must share an empirical grid"));
    }
    let len = parts.iter().map(|p| p.omega.len()).max().unwrap_or(0);
    let mut counts = vec![0.0; len];
    for p in parts {
        for (c, v) in counts.iter_mut().zip(&p.omega) {
            *c += v;
        }
    }
    WaitingTimeDistribution::empirical(bin, counts)
}

fn bin_centre(k: usize, bin_ps: u64) -> f64 {
    (k as f64 + 0.5) * bin_ps as f64 / PS_PER_S
}

/// Weighted least-squares fit of `log(counts)` against bin centre, with
/// weights equal to the counts. The window starts at `t_min` and runs
/// until the first bin holding fewer than 10 counts.
pub fn fit_exponential_tail(wtd: &WaitingTimeDistribution, t_min: f64) -> Result<TailFit> {
    if wtd.origin != WtdOrigin::Empirical {
        return Err(Error::invalid("wtd", "tail fits need an empirical histogram"));
    }
    let last = wtd.omega.iter().rposition(|&c| c > 0.0);
    let t_max = last.map_or(0.0, |k| bin_centre(k, wtd.dt_ps));
    let window_empty = Error::WindowEmpty { t_min, t_max };
    let last = last.ok_or(window_empty)?;
    // contiguous run from t_min: isolated tail bins above the threshold are
    // upward fluctuations and would flatten the slope
    let bins: Vec<usize> = (0..=last)
        .skip_while(|&k| bin_centre(k, wtd.dt_ps) < t_min)
        .take_while(|&k| wtd.omega[k] >= MIN_FIT_COUNTS)
        .collect();
    if bins.len() < 3 {
        return Err(Error::WindowEmpty { t_min, t_max });
    }

    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    // centre times on the window for conditioning
    let x0 = bin_centre(bins[0], wtd.dt_ps);
    for &k in &bins {
        let w = wtd.omega[k];
        let x = bin_centre(k, wtd.dt_ps) - x0;
        let y = w.ln();
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let denom = sw * sxx - sx * sx;
    if !(denom > 0.0) {
        return Err(Error::WindowEmpty { t_min, t_max });
    }
    let slope = (sw * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / sw;
    let rate = -slope;
    let amplitude = (intercept + rate * x0).exp();
    if !(rate > 0.0) || !amplitude.is_finite() {
        return Err(Error::PoorFit { residual: f64::INFINITY });
    }
    let fit = TailFit {
        rate,
        amplitude,
        t_min,
        t_max: bin_centre(*bins.last().unwrap(), wtd.dt_ps),
        residual: 0.0,
    };

    let segments = RESIDUAL_SEGMENTS.min(bins.len());
    let mut sq = 0.0;
    for s in 0..segments {
        // every bin in the segment's span, so thresholding does not bias it
        let first = bins[s * bins.len() / segments];
        let last = bins[(s + 1) * bins.len() / segments - 1];
        let data: f64 = wtd.omega[first..=last].iter().sum();
        let model: f64 = (first..=last).map(|k| fit.model(bin_centre(k, wtd.dt_ps))).sum();
        sq += ((data - model) / model).powi(2);
    }
    let residual = (sq / segments as f64).sqrt();
    if residual >= MAX_RESIDUAL {
        return Err(Error::PoorFit { residual });
    }
    Ok(TailFit { residual, ..fit })
}

/// Moving-average width in bins for a histogram bin width: about 1 ns,
/// forced odd, so 5 bins at 200 ps.
pub fn smoothing_window(bin_ps: u64) -> usize {
    let w = ((1000.0 / bin_ps as f64).round() as usize).max(1);
    if w.is_multiple_of(2) {
        w + 1
    } else {
        w
    }
}

fn centred_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// TER from a histogram and its tail fit: `η = counts / fit` at each bin
/// centre below `t_min`, clamped to `[0, 1]` and optionally smoothed.
/// `eta_inf` is the mean ratio across the fit window, so the curve is
/// relative to the detector's long-time efficiency.
pub fn extract_ter(wtd: &WaitingTimeDistribution, fit: &TailFit, smooth: bool) -> Result<TerCurve> {
    if !(fit.rate > 0.0) || fit.residual >= MAX_RESIDUAL {
        return Err(Error::PoorFit { residual: fit.residual });
    }
    let bin = wtd.dt_ps;
    let ratio = |k: usize| wtd.omega[k] / fit.model(bin_centre(k, bin));

    let window: Vec<f64> = (0..wtd.omega.len())
        .filter(|&k| {
            let t = bin_centre(k, bin);
            t >= fit.t_min && t <= fit.t_max && wtd.omega[k] >= MIN_FIT_COUNTS
        })
        .map(ratio)
        .collect();
    if window.is_empty() {
        return Err(Error::WindowEmpty {
            t_min: fit.t_min,
            t_max: fit.t_max,
        });
    }
    let eta_inf = (window.iter().sum::<f64>() / window.len() as f64).clamp(f64::MIN_POSITIVE, 1.0);

    let table_end = wtd
        .omega
        .len()
        .min((0..).take_while(|&k| bin_centre(k, bin) < fit.t_min).count());
    if table_end == 0 {
        return Err(Error::WindowEmpty {
            t_min: fit.t_min,
            t_max: fit.t_max,
        });
    }
    let raw: Vec<f64> = (0..table_end).map(|k| ratio(k).clamp(0.0, 1.0)).collect();
    let eta = if smooth {
        centred_average(&raw, smoothing_window(bin))
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect()
    } else {
        raw
    };
    let dt_ps = (0..table_end).map(|k| k as u64 * bin + bin / 2).collect();
    TerCurve::tabulated(dt_ps, eta, eta_inf)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub bin_ps: u64,
    /// Start of the fit window in seconds; defaults to five times the
    /// dead-time estimate.
    pub t_min: Option<f64>,
    pub smooth: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            bin_ps: DEFAULT_BIN_PS,
            t_min: None,
            smooth: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub ter: TerCurve,
    pub fit: TailFit,
    pub histogram: WaitingTimeDistribution,
    /// Dead-time estimate from the raw histogram, seconds.
    pub t_d_estimate: f64,
    pub warnings: Vec<String>,
}

/// First bin centre at which the histogram reaches half its maximum.
pub fn dead_time_estimate(wtd: &WaitingTimeDistribution) -> f64 {
    let peak = wtd.omega.iter().cloned().fold(0.0, f64::max);
    let k = wtd.omega.iter().position(|&c| c >= 0.5 * peak).unwrap_or(0);
    bin_centre(k, wtd.dt_ps)
}

/// Full pipeline: histogram, tail fit, extraction and a low-rate check.
pub fn calibrate(stream: &TimeTagStream, options: &CalibrationOptions) -> Result<Calibration> {
    let histogram = waiting_time_histogram(stream, options.bin_ps)?;
    let t_d_estimate = dead_time_estimate(&histogram);
    let t_min = options.t_min.unwrap_or(5.0 * t_d_estimate);
    if !(t_min > 0.0) {
        return Err(Error::invalid("t_min", "must be positive"));
    }
    let fit = fit_exponential_tail(&histogram, t_min)?;
    let ter = extract_ter(&histogram, &fit, options.smooth)?;
    let mut warnings = Vec::new();
    let load = fit.rate * ter.recovery_time();
    if load > LOW_RATE_LIMIT {
        let msg = format!(
            "detected rate × dead time = {load:.3} exceeds {LOW_RATE_LIMIT}; extraction assumes a rate well below 1/t_d"
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(Calibration {
        ter,
        fit,
        histogram,
        t_d_estimate,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{detect, heaviside_ter, DetectorConfig};
    use crate::sources::sample_poisson_stream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn consecutive_intervals_only() {
        let s = TimeTagStream::new(0, vec![0, 100, 300], 300).unwrap();
        let h = waiting_time_histogram(&s, 100).unwrap();
        assert_eq!(h.omega, vec![0.0, 1.0, 1.0]);
        assert_eq!(h.origin, WtdOrigin::Empirical);
        let one = TimeTagStream::new(0, vec![5], 10).unwrap();
        assert!(matches!(
            waiting_time_histogram(&one, 100),
            Err(Error::InsufficientData { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn chunked_histograms_merge_exactly() {
        let s = sample_poisson_stream(1e6, 0.05, 2).unwrap();
        let whole = waiting_time_histogram(&s, 200).unwrap();
        let tags = s.tags();
        let cuts = [0, tags.len() / 3, 2 * tags.len() / 3, tags.len() - 1];
        let parts: Vec<_> = cuts
            .windows(2)
            .map(|c| {
                let chunk = tags[c[0]..=c[1]].to_vec();
                let chunk = TimeTagStream::new(0, chunk, s.duration_ps()).unwrap();
                waiting_time_histogram(&chunk, 200).unwrap()
            })
            .collect();
        let merged = merge_histograms(&parts).unwrap();
        assert_eq!(merged.omega.iter().sum::<f64>(), whole.omega.iter().sum::<f64>());
        let n = merged.omega.len().min(whole.omega.len());
        assert_eq!(merged.omega[..n], whole.omega[..n]);
    }

    #[test]
    fn exact_exponential_is_recovered() {
        let rate = 2e5;
        let counts = (0..20_000)
            .map(|k| 1e4 * (-rate * bin_centre(k, 200)).exp())
            .collect();
        let wtd = WaitingTimeDistribution::empirical(200, counts).unwrap();
        let fit = fit_exponential_tail(&wtd, 100e-9).unwrap();
        assert_relative_eq!(fit.rate, rate, max_relative = 1e-3);
        assert_relative_eq!(fit.amplitude, 1e4, max_relative = 1e-3);
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn empty_tail_is_rejected() {
        let wtd = WaitingTimeDistribution::empirical(200, vec![0.0; 100]).unwrap();
        assert!(matches!(fit_exponential_tail(&wtd, 1e-9), Err(Error::WindowEmpty { .. })));
    }

    #[test]
    fn non_exponential_tail_is_rejected() {
        let counts = (0..2000).map(|k| 1e3 + 1e5 * (k % 400) as f64).collect();
        let wtd = WaitingTimeDistribution::empirical(200, counts).unwrap();
        assert!(matches!(fit_exponential_tail(&wtd, 1e-9), Err(Error::PoorFit { .. })));
    }

    #[test]
    fn poisson_histogram_fits_true_rate() {
        let rate = 2e5;
        let s = sample_poisson_stream(rate, 20.0, 5).unwrap();
        let h = waiting_time_histogram(&s, 200).unwrap();
        let fit = fit_exponential_tail(&h, 1e-7).unwrap();
        assert!((fit.rate / rate - 1.0).abs() < 0.01, "fit {}", fit.rate);
    }

    #[test]
    fn heaviside_histogram_is_blind_then_exponential() {
        let t_d = 43e-9;
        let incident = 0.01 / t_d;
        let s = sample_poisson_stream(incident, 1e7 / incident, 6).unwrap();
        let out = detect(&s, &DetectorConfig::ideal(heaviside_ter(t_d).unwrap()), 6);
        let h = waiting_time_histogram(&out, 200).unwrap();
        assert!(h.omega[..215].iter().all(|&c| c == 0.0));
        let fit = fit_exponential_tail(&h, 5.0 * t_d).unwrap();
        let expected = out.rate() / (1.0 - out.rate() * t_d);
        assert!((fit.rate / expected - 1.0).abs() < 0.01, "{} vs {expected}", fit.rate);

        let cal = calibrate(&out, &CalibrationOptions::default()).unwrap();
        assert!((cal.ter.recovery_time() - t_d).abs() <= 200e-12);
        assert!(cal.warnings.is_empty());
    }

    #[test]
    fn flat_detector_extracts_unity() {
        let s = sample_poisson_stream(1e6, 15.0, 7).unwrap();
        let cal = calibrate(
            &s,
            &CalibrationOptions {
                t_min: Some(20e-9),
                ..CalibrationOptions::default()
            },
        )
        .unwrap();
        let worst = cal.ter.eta().iter().map(|e| (e - 1.0).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.03, "worst {worst}");
    }

    #[test]
    fn high_rate_calibration_warns() {
        let t_d = 43e-9;
        let incident = 0.5 / t_d;
        let s = sample_poisson_stream(incident, 2e6 / incident, 1).unwrap();
        let out = detect(&s, &DetectorConfig::ideal(heaviside_ter(t_d).unwrap()), 1);
        let cal = calibrate(&out, &CalibrationOptions::default()).unwrap();
        assert_eq!(cal.warnings.len(), 1);
    }

    #[test]
    fn tail_fit_json_fields() {
        let fit = TailFit {
            rate: 1e5,
            amplitude: 3.0,
            t_min: 215e-9,
            t_max: 1e-4,
            residual: 0.01,
        };
        let text = fit.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["t_min_ps"], 215_000);
        assert_eq!(v["rate_per_s"], 1e5);
        let back = TailFit::from_json(&text).unwrap();
        assert_relative_eq!(back.t_min, fit.t_min);
    }

    #[test]
    fn smoothing_window_is_odd() {
        assert_eq!(smoothing_window(200), 5);
        assert_eq!(smoothing_window(100), 11);
        assert_eq!(smoothing_window(5000), 1);
    }

    proptest! {
        #[test]
        fn extracted_eta_is_bounded(
            counts in proptest::collection::vec(0.0f64..1e4, 50..200),
            rate in 1e5f64..1e7,
            smooth in any::<bool>(),
        ) {
            let wtd = WaitingTimeDistribution::empirical(200, counts).unwrap();
            let fit = TailFit { rate, amplitude: 5e3, t_min: 5e-9, t_max: 4e-8, residual: 0.0 };
            if let Ok(ter) = extract_ter(&wtd, &fit, smooth) {
                prop_assert!(ter.eta().iter().all(|e| (0.0..=1.0).contains(e)));
                prop_assert!(ter.eta_inf() > 0.0 && ter.eta_inf() <= 1.0);
            }
        }
    }
}
