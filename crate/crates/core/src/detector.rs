//! Single-photon detectors with temporal efficiency recovery (TER), and the
//! multinomial beamsplitter tree feeding a detector array.

use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{rng_for, seconds_to_ps, TimeTagStream, PS_PER_S};

const RNG_SPLIT: u64 = 6;
const RNG_DETECT_BASE: u64 = 1 << 40;

pub const TER_CSV_HEADER: &str = "dt_ps,eta";

/// Incident rate above which solver results for tabulated curves are
/// withheld.
pub const TABULATED_RATE_CEILING: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerKind {
    /// Blind for `t_d_ps` after a detection, then fully recovered.
    Heaviside { t_d_ps: u64 },
    Tabulated,
}

/// Detector efficiency as a function of time since the last registered
/// detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerCurve {
    kind: TerKind,
    dt_ps: Vec<u64>,
    eta: Vec<f64>,
    eta_inf: f64,
    #[serde(skip)]
    uniform_step: Option<u64>,
}

fn check_eta_inf(eta_inf: f64) -> Result<()> {
    if !(eta_inf > 0.0 && eta_inf <= 1.0) {
        return Err(Error::invalid("eta_inf", format!("{eta_inf} is outside (0, 1]")));
    }
    Ok(())
}

/// Step helper for fast lookups on evenly spaced grids.
fn uniform_step(dt_ps: &[u64]) -> Option<u64> {
    let step = dt_ps.get(1)? - dt_ps[0];
    dt_ps
        .windows(2)
        .all(|w| w[1] - w[0] == step)
        .then_some(step)
}

impl TerCurve {
    pub fn heaviside(t_d: f64) -> Result<Self> {
        Self::heaviside_with_eta(t_d, 1.0)
    }

    pub fn heaviside_with_eta(t_d: f64, eta_inf: f64) -> Result<Self> {
        if !(t_d > 0.0) || !t_d.is_finite() {
            return Err(Error::invalid("t_d", "dead time must be positive"));
        }
        check_eta_inf(eta_inf)?;
        let t_d_ps = seconds_to_ps(t_d).max(1);
        Ok(TerCurve {
            kind: TerKind::Heaviside { t_d_ps },
            dt_ps: vec![0, t_d_ps],
            eta: vec![0.0, eta_inf],
            eta_inf,
            uniform_step: None,
        })
    }

    /// Tabulated curve, linearly interpolated between grid points. Values
    /// must already lie in `[0, 1]`.
    pub fn tabulated(dt_ps: Vec<u64>, eta: Vec<f64>, eta_inf: f64) -> Result<Self> {
        if dt_ps.is_empty() || dt_ps.len() != eta.len() {
            return Err(Error::invalid(
                "eta",
                format!("need matching non-empty grids, got {} and {}", dt_ps.len(), eta.len()),
            ));
        }
        if let Some(i) = dt_ps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Unsorted {
                index: i + 1,
                previous: dt_ps[i],
                current: dt_ps[i + 1],
            });
        }
        if let Some(v) = eta.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::invalid("eta", format!("{v} is outside [0, 1]")));
        }
        check_eta_inf(eta_inf)?;
        let uniform_step = uniform_step(&dt_ps);
        Ok(TerCurve {
            kind: TerKind::Tabulated,
            dt_ps,
            eta,
            eta_inf,
            uniform_step,
        })
    }

    /// A smooth-recovery curve resembling a nanowire detector with
    /// `t_d = 43 ns`: blind for 30 ns, then exponential recovery reaching
    /// half efficiency at 43 ns. 200 ps grid to 400 ns, `eta_inf = 1`.
    pub fn reference() -> Self {
        let blind = 30_000.0;
        let tau = 13_000.0 / std::f64::consts::LN_2;
        let dt_ps: Vec<u64> = (0..=2000).map(|i| i * 200).collect();
        let eta = dt_ps
            .iter()
            .map(|&t| {
                let t = t as f64;
                if t < blind {
                    0.0
                } else {
                    -(-(t - blind) / tau).exp_m1()
                }
            })
            .collect();
        Self::tabulated(dt_ps, eta, 1.0).expect("reference curve is valid")
    }

    pub fn kind(&self) -> TerKind {
        self.kind
    }

    pub fn dt_ps(&self) -> &[u64] {
        &self.dt_ps
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn eta_inf(&self) -> f64 {
        self.eta_inf
    }

    pub fn is_tabulated(&self) -> bool {
        self.kind == TerKind::Tabulated
    }

    pub fn with_eta_inf(mut self, eta_inf: f64) -> Result<Self> {
        check_eta_inf(eta_inf)?;
        if let TerKind::Heaviside { .. } = self.kind {
            self.eta[1] = eta_inf;
        }
        self.eta_inf = eta_inf;
        Ok(self)
    }

    /// Efficiency `dt` seconds after a detection.
    pub fn eta_at(&self, dt: f64) -> f64 {
        if dt <= 0.0 {
            return self.eta_at_ps(0);
        }
        let ps = dt * PS_PER_S;
        if let TerKind::Heaviside { .. } = self.kind {
            return self.eta_at_ps(ps.round() as u64);
        }
        if ps >= *self.dt_ps.last().expect("non-empty grid") as f64 {
            if ps == *self.dt_ps.last().unwrap() as f64 {
                return self.eta[self.eta.len() - 1];
            }
            return self.eta_inf;
        }
        self.interpolate(ps)
    }

    /// Efficiency at an integer-picosecond delay.
    #[inline]
    pub fn eta_at_ps(&self, dt_ps: u64) -> f64 {
        match self.kind {
            TerKind::Heaviside { t_d_ps } => {
                if dt_ps >= t_d_ps {
                    self.eta_inf
                } else {
                    0.0
                }
            }
            TerKind::Tabulated => {
                let last = *self.dt_ps.last().expect("non-empty grid");
                if dt_ps > last {
                    return self.eta_inf;
                }
                if dt_ps == last {
                    return self.eta[self.eta.len() - 1];
                }
                self.interpolate(dt_ps as f64)
            }
        }
    }

    fn interpolate(&self, ps: f64) -> f64 {
        let first = self.dt_ps[0] as f64;
        if ps <= first {
            return self.eta[0];
        }
        let i = match self.uniform_step {
            Some(step) => ((ps - first) / step as f64) as usize,
            None => self.dt_ps.partition_point(|&t| (t as f64) <= ps) - 1,
        };
        let i = i.min(self.dt_ps.len() - 2);
        let (t0, t1) = (self.dt_ps[i] as f64, self.dt_ps[i + 1] as f64);
        let w = (ps - t0) / (t1 - t0);
        (self.eta[i] + w * (self.eta[i + 1] - self.eta[i])).clamp(0.0, 1.0)
    }

    /// Delay in seconds beyond which `eta_at` returns `eta_inf`.
    pub fn settle_time(&self) -> f64 {
        match self.kind {
            TerKind::Heaviside { t_d_ps } => t_d_ps as f64 / PS_PER_S,
            TerKind::Tabulated => (*self.dt_ps.last().unwrap() + 1) as f64 / PS_PER_S,
        }
    }

    /// Recovery time `t_d`: first delay at which the efficiency reaches half
    /// of `eta_inf`, in seconds.
    pub fn recovery_time(&self) -> f64 {
        if let TerKind::Heaviside { t_d_ps } = self.kind {
            return t_d_ps as f64 / PS_PER_S;
        }
        let half = 0.5 * self.eta_inf;
        if self.eta[0] >= half {
            return self.dt_ps[0] as f64 / PS_PER_S;
        }
        for i in 1..self.eta.len() {
            if self.eta[i] >= half {
                let (t0, t1) = (self.dt_ps[i - 1] as f64, self.dt_ps[i] as f64);
                let (e0, e1) = (self.eta[i - 1], self.eta[i]);
                return (t0 + (half - e0) / (e1 - e0) * (t1 - t0)) / PS_PER_S;
            }
        }
        self.settle_time()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TER_CSV_HEADER}")?;
        match self.kind {
            TerKind::Heaviside { t_d_ps } => {
                writeln!(out, "0,0")?;
                if t_d_ps > 1 {
                    writeln!(out, "{},0", t_d_ps - 1)?;
                }
                writeln!(out, "{t_d_ps},{}", self.eta_inf)?;
            }
            TerKind::Tabulated => {
                for (t, e) in self.dt_ps.iter().zip(&self.eta) {
                    writeln!(out, "{t},{e}")?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a `dt_ps,eta` table. Without an override, `eta_inf` is the mean
    /// of the last 10% of samples.
    pub fn read_csv<R: BufRead>(input: R, eta_inf: Option<f64>) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != TER_CSV_HEADER {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{TER_CSV_HEADER}`"),
            });
        }
        let (mut dt_ps, mut eta) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let (t, e) = line
                .split_once(',')
                .ok_or_else(|| parse_err(format!("expected `dt_ps,eta`, found `{line}`")))?;
            let t: u64 = t
                .trim()
                .parse()
                .map_err(|err| parse_err(format!("bad dt_ps: {err}")))?;
            let e: f64 = e
                .trim()
                .parse()
                .map_err(|err| parse_err(format!("bad eta: {err}")))?;
            if dt_ps.last().is_some_and(|&prev| t <= prev) {
                return Err(parse_err(format!("dt_ps {t} is not ascending")));
            }
            dt_ps.push(t);
            eta.push(e);
        }
        if eta.is_empty() {
            return Err(Error::Parse {
                line: 2,
                message: "no samples".into(),
            });
        }
        let eta_inf = eta_inf.unwrap_or_else(|| {
            let tail = (eta.len() / 10).max(1);
            eta[eta.len() - tail..].iter().sum::<f64>() / tail as f64
        });
        Self::tabulated(dt_ps, eta, eta_inf)
    }
}

/// Convenience constructor for a Heaviside curve.
pub fn heaviside_ter(t_d: f64) -> Result<TerCurve> {
    TerCurve::heaviside(t_d)
}

pub fn eta_at(ter: &TerCurve, dt: f64) -> f64 {
    ter.eta_at(dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub ter: TerCurve,
    pub intrinsic_efficiency: f64,
}

impl DetectorConfig {
    pub fn new(ter: TerCurve, intrinsic_efficiency: f64) -> Result<Self> {
        if !(intrinsic_efficiency > 0.0 && intrinsic_efficiency <= 1.0) {
            return Err(Error::invalid(
                "intrinsic_efficiency",
                format!("{intrinsic_efficiency} is outside (0, 1]"),
            ));
        }
        Ok(DetectorConfig {
            ter,
            intrinsic_efficiency,
        })
    }

    pub fn ideal(ter: TerCurve) -> Self {
        DetectorConfig {
            ter,
            intrinsic_efficiency: 1.0,
        }
    }
}

/// Passes `stream` through a detector. Each photon is registered with
/// probability `intrinsic · η(t − t_last)`, where `t_last` is the previous
/// registered detection; the first photon sees `eta_inf`.
///
/// The random sequence depends on the seed and the stream's channel, so
/// the channels of a split stream may share one seed.
pub fn detect(stream: &TimeTagStream, config: &DetectorConfig, seed: u64) -> TimeTagStream {
    let mut rng = rng_for(seed, RNG_DETECT_BASE + stream.channel() as u64);
    let q = config.intrinsic_efficiency;
    let ter = &config.ter;
    let mut out = Vec::with_capacity(stream.len());
    let mut last: Option<u64> = None;
    for &t in stream.tags() {
        let eta = match last {
            Some(prev) => ter.eta_at_ps(t - prev),
            None => ter.eta_inf(),
        };
        let p = q * eta;
        let hit = if p >= 1.0 {
            true
        } else if p <= 0.0 {
            false
        } else {
            rng.random::<f64>() < p
        };
        if hit {
            out.push(t);
            last = Some(t);
        }
    }
    TimeTagStream::new(stream.channel(), out, stream.duration_ps())
        .expect("subsequence of a valid stream")
}

/// Runs `detect` on each stream concurrently.
pub fn detect_all(streams: &[TimeTagStream], config: &DetectorConfig, seed: u64) -> Vec<TimeTagStream> {
    streams.par_iter().map(|s| detect(s, config, seed)).collect()
}

/// Routes each photon independently and uniformly to one of `m` outputs,
/// labelled channels `0..m`.
pub fn split_stream(stream: &TimeTagStream, m: usize, seed: u64) -> Result<Vec<TimeTagStream>> {
    if m == 0 {
        return Err(Error::invalid("m", "need at least one output"));
    }
    if m > 256 {
        return Err(Error::invalid("m", "at most 256 channels"));
    }
    if m == 1 {
        return Ok(vec![stream.clone().with_channel(0)]);
    }
    let mut rng = rng_for(seed, RNG_SPLIT);
    let cap = stream.len() / m + stream.len() / (4 * m) + 16;
    let mut outputs: Vec<Vec<u64>> = (0..m).map(|_| Vec::with_capacity(cap)).collect();
    for &t in stream.tags() {
        outputs[rng.random_range(0..m)].push(t);
    }
    Ok(outputs
        .into_iter()
        .enumerate()
        .map(|(c, tags)| {
            TimeTagStream::new(c as u8, tags, stream.duration_ps()).expect("subsequence of a valid stream")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sources::sample_poisson_stream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn heaviside_is_closed_at_t_d() {
        let ter = heaviside_ter(43e-9).unwrap();
        assert_eq!(eta_at(&ter, 42e-9), 0.0);
        assert_eq!(eta_at(&ter, 43e-9), 1.0);
        assert_eq!(eta_at(&ter, 1e-6), 1.0);
        assert_eq!(ter.eta_at_ps(42_999), 0.0);
        assert_eq!(ter.eta_at_ps(43_000), 1.0);
        assert!(heaviside_ter(0.0).is_err());
    }

    #[test]
    fn tabulated_interpolation() {
        let ter = TerCurve::tabulated(vec![0, 100, 200], vec![0.0, 0.2, 0.4], 0.9).unwrap();
        assert_relative_eq!(ter.eta_at_ps(150), 0.3, epsilon = 1e-12);
        assert_relative_eq!(ter.eta_at(150e-12), 0.3, epsilon = 1e-12);
        assert_eq!(ter.eta_at_ps(0), 0.0);
        assert_eq!(ter.eta_at(0.0), 0.0);
        assert_eq!(ter.eta_at_ps(201), 0.9);
        assert_eq!(ter.eta_at(1e-6), 0.9);
        // same lookups on a non-uniform grid
        let ter = TerCurve::tabulated(vec![0, 100, 300], vec![0.0, 0.2, 0.6], 0.9).unwrap();
        assert_relative_eq!(ter.eta_at_ps(200), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn tabulated_validation() {
        assert!(TerCurve::tabulated(vec![0, 0], vec![0.0, 0.1], 1.0).is_err());
        assert!(TerCurve::tabulated(vec![0, 1], vec![0.0, 1.1], 1.0).is_err());
        assert!(TerCurve::tabulated(vec![0, 1], vec![0.0, 1.0], 0.0).is_err());
        assert!(TerCurve::tabulated(vec![], vec![], 1.0).is_err());
    }

    #[test]
    fn reference_curve_recovers_at_43ns() {
        let ter = TerCurve::reference();
        assert_eq!(ter.eta_at(29e-9), 0.0);
        assert!((ter.recovery_time() - 43e-9).abs() < 0.2e-9);
        assert!(ter.eta_at(399e-9) > 0.999);
    }

    #[test]
    fn csv_round_trip_and_default_eta_inf() {
        let text = "dt_ps,eta\n0,0\n100,0.5\n200,0.8\n300,0.9\n";
        let ter = TerCurve::read_csv(text.as_bytes(), None).unwrap();
        assert_relative_eq!(ter.eta_inf(), 0.9);
        let ter = TerCurve::read_csv(text.as_bytes(), Some(0.95)).unwrap();
        assert_relative_eq!(ter.eta_inf(), 0.95);
        let mut buf = Vec::new();
        ter.write_csv(&mut buf).unwrap();
        let back = TerCurve::read_csv(&buf[..], Some(0.95)).unwrap();
        assert_eq!(back, ter);
        assert!(matches!(
            TerCurve::read_csv("dt_ps,eta\n0,0\n0,1\n".as_bytes(), None),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn heaviside_csv_reads_back_as_step() {
        let ter = heaviside_ter(10e-9).unwrap();
        let mut buf = Vec::new();
        ter.write_csv(&mut buf).unwrap();
        let back = TerCurve::read_csv(&buf[..], Some(1.0)).unwrap();
        for dt in [0u64, 5_000, 9_999, 10_000, 50_000] {
            assert_eq!(back.eta_at_ps(dt), ter.eta_at_ps(dt), "dt {dt}");
        }
    }

    #[test]
    fn empty_stream_detects_nothing() {
        let s = TimeTagStream::empty(0, 1000);
        let out = detect(&s, &DetectorConfig::ideal(heaviside_ter(43e-9).unwrap()), 1);
        assert!(out.is_empty());
    }

    #[test]
    fn blind_period_drops_second_tag() {
        let s = TimeTagStream::new(0, vec![1_000, 20_000], 100_000).unwrap();
        let out = detect(&s, &DetectorConfig::ideal(heaviside_ter(43e-9).unwrap()), 1);
        assert_eq!(out.tags(), &[1_000]);
    }

    #[test]
    fn half_efficiency_at_unit_dead_time_product() {
        let t_d = 43e-9;
        let rate = 1.0 / t_d;
        let s = sample_poisson_stream(rate, 1e7 / rate, 3).unwrap();
        assert!(s.len() > 9_900_000);
        let out = detect(&s, &DetectorConfig::ideal(heaviside_ter(t_d).unwrap()), 3);
        let ratio = out.len() as f64 / s.len() as f64;
        assert!((ratio - 0.5).abs() < 0.005, "ratio {ratio}");
    }

    #[test]
    fn saturated_rate_bounded_by_inverse_dead_time() {
        let t_d = 43e-9;
        let config = DetectorConfig::ideal(heaviside_ter(t_d).unwrap());
        for k in 0..8 {
            let rate = 1e6 * 4f64.powi(k);
            let s = sample_poisson_stream(rate, 2e6 / rate, k as u64).unwrap();
            let out = detect(&s, &config, 1);
            let bound = (out.duration_s() / t_d).floor() + 1.0;
            assert!((out.len() as f64) <= bound, "rate {rate}");
        }
    }

    #[test]
    fn split_zero_is_rejected() {
        let s = TimeTagStream::empty(0, 10);
        assert!(split_stream(&s, 0, 1).is_err());
    }

    #[test]
    fn split_one_is_identity() {
        let s = sample_poisson_stream(1e6, 1e-3, 1).unwrap();
        let out = split_stream(&s, 1, 9).unwrap();
        assert_eq!(out, vec![s]);
    }

    #[test]
    fn split_counts_are_binomial() {
        let s = sample_poisson_stream(1e6, 1.0, 4).unwrap();
        let n = s.len() as f64;
        let out = split_stream(&s, 4, 2).unwrap();
        let sigma = (n * 0.25 * 0.75).sqrt();
        for (c, ch) in out.iter().enumerate() {
            assert_eq!(ch.channel() as usize, c);
            assert!((ch.len() as f64 - n / 4.0).abs() < 3.0 * sigma);
        }
        assert_eq!(out.iter().map(|c| c.len()).sum::<usize>(), s.len());
    }

    fn arb_stream() -> impl Strategy<Value = TimeTagStream> {
        proptest::collection::btree_set(0u64..2_000_000, 0..400)
            .prop_map(|set| TimeTagStream::new(0, set.into_iter().collect(), 2_000_000).unwrap())
    }

    fn is_subsequence(sub: &[u64], full: &[u64]) -> bool {
        let mut it = full.iter();
        sub.iter().all(|t| it.any(|u| u == t))
    }

    proptest! {
        #[test]
        fn detection_output_is_subsequence(s in arb_stream(), seed in any::<u64>(), q in 0.05f64..1.0) {
            let config = DetectorConfig::new(TerCurve::reference(), q).unwrap();
            let out = detect(&s, &config, seed);
            prop_assert!(is_subsequence(out.tags(), s.tags()));
            prop_assert_eq!(out.duration_ps(), s.duration_ps());
        }

        #[test]
        fn heaviside_output_respects_dead_time(s in arb_stream(), seed in any::<u64>(), t_d_ps in 1u64..50_000) {
            let config = DetectorConfig::ideal(heaviside_ter(t_d_ps as f64 * 1e-12).unwrap());
            let out = detect(&s, &config, seed);
            prop_assert!(out.tags().windows(2).all(|w| w[1] - w[0] >= t_d_ps));
        }

        #[test]
        fn perfect_detector_is_identity(s in arb_stream(), seed in any::<u64>()) {
            let ter = TerCurve::tabulated(vec![0, 1000], vec![1.0, 1.0], 1.0).unwrap();
            let out = detect(&s, &DetectorConfig::ideal(ter), seed);
            prop_assert_eq!(out, s);
        }

        #[test]
        fn split_partitions_input(s in arb_stream(), m in 1usize..9, seed in any::<u64>()) {
            let parts = split_stream(&s, m, seed).unwrap();
            prop_assert_eq!(parts.len(), m);
            let mut all: Vec<u64> = parts.iter().flat_map(|p| p.tags().iter().copied()).collect();
            all.sort_unstable();
            prop_assert_eq!(&all[..], s.tags());
        }
    }
}
