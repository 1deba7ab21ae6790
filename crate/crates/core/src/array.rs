//! Detector arrays: splitting light over `m` detectors and summing all
//! pairwise correlations to dilute per-detector saturation.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlator::{accidental_coincidences, coincidence_count, GnEstimate};
use crate::detector::{detect, split_stream, DetectorConfig, TerCurve};
use crate::error::{Error, Result};
use crate::sources::{sample_source_stream, SourceModel};
use crate::stream::TimeTagStream;
use crate::wtd::EfficiencyCurve;

pub const SWEEP_CSV_HEADER: &str = "m,g2_estimate,g2_stderr,coincidence_rate_per_bin";

/// Combinatorial prefactor for [`coincidence_rate_scaling`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prefactor {
    /// `m!/n!`
    #[default]
    Factorial,
    /// `m!/(n!(m−n)!)`, the number of n-detector subsets.
    Binomial,
}

fn factorial_ratio(m: u32, n: u32) -> f64 {
    ((n + 1)..=m).map(f64::from).product()
}

fn binomial(m: u32, n: u32) -> f64 {
    (0..n).map(|i| f64::from(m - i) / f64::from(i + 1)).product()
}

/// Relative n-fold coincidence rate of an `m`-detector array fed total
/// no-TER rate `rate`: `prefactor·[ε(R/m)·R/m]ⁿ`. Only ratios between
/// configurations are meaningful.
pub fn coincidence_rate_scaling(m: u32, n: u32, rate: f64, eff: &EfficiencyCurve, prefactor: Prefactor) -> Result<f64> {
    if n < 2 || m < n {
        return Err(Error::invalid("m", format!("need m ≥ n ≥ 2, got m = {m}, n = {n}")));
    }
    if !(rate > 0.0) {
        return Err(Error::invalid("R", "must be positive"));
    }
    let per = rate / f64::from(m);
    if per < eff.r_min() || per > eff.r_max() {
        return Err(Error::Coverage {
            needed_min: per,
            needed_max: per,
            covered_min: eff.r_min(),
            covered_max: eff.r_max(),
        });
    }
    let factor = match prefactor {
        Prefactor::Factorial => factorial_ratio(m, n),
        Prefactor::Binomial => binomial(m, n),
    };
    Ok(factor * (eff.epsilon_at(per) * per).powi(n as i32))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayPoint {
    pub m: usize,
    pub g2_estimate: f64,
    pub g2_stderr: f64,
    /// Summed zero-delay coincidences per second, within one bin width.
    pub coincidence_rate_per_bin: f64,
    pub coincidences: u64,
    pub accidentals: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySweep {
    pub n: usize,
    pub incident_rate: f64,
    pub bin_ps: u64,
    pub duration_s: f64,
    pub points: Vec<ArrayPoint>,
}

impl ArraySweep {
    pub fn m_values(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.m).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{SWEEP_CSV_HEADER}")?;
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{}",
                p.m, p.g2_estimate, p.g2_stderr, p.coincidence_rate_per_bin
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Summed-pair `g2(0)` over all unordered detector pairs: coincidences and
/// accidental expectations are each summed, then divided.
pub fn summed_pair_g2(channels: &[TimeTagStream], bin_ps: u64) -> Result<ArrayPoint> {
    if channels.len() < 2 {
        return Err(Error::invalid("m", "need at least two detectors"));
    }
    let pairs: Vec<(usize, usize)> = (0..channels.len())
        .flat_map(|i| ((i + 1)..channels.len()).map(move |j| (i, j)))
        .collect();
    let (coincidences, accidentals) = pairs
        .par_iter()
        .map(|&(i, j)| {
            let pair = [&channels[i], &channels[j]];
            if pair.iter().any(|s| s.is_empty()) {
                return (0, 0.0);
            }
            (coincidence_count(&pair, bin_ps), accidental_coincidences(&pair, bin_ps))
        })
        .reduce(|| (0u64, 0.0f64), |a, b| (a.0 + b.0, a.1 + b.1));
    if !(accidentals > 0.0) {
        return Err(Error::EmptyStream {
            channel: channels.iter().find(|c| c.is_empty()).map_or(0, |c| c.channel()),
        });
    }
    let g = coincidences as f64 / accidentals;
    let stderr = if coincidences > 0 {
        g / (coincidences as f64).sqrt()
    } else {
        1.0 / accidentals
    };
    Ok(ArrayPoint {
        m: channels.len(),
        g2_estimate: g,
        g2_stderr: stderr,
        coincidence_rate_per_bin: coincidences as f64 / channels[0].duration_s(),
        coincidences,
        accidentals,
    })
}

/// Upper bound on the number of detector subsets [`summed_gn_zero`] visits.
pub const MAX_SUBSETS: usize = 100_000;

fn subsets(m: usize, n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for last in (n - 1)..m {
        for mut c in subsets(last, n - 1) {
            c.push(last);
            out.push(c);
        }
    }
    out
}

/// Zero-delay n-fold estimate summed over every n-subset of the channels,
/// coincidences and accidentals summed separately as for pairs.
pub fn summed_gn_zero(channels: &[TimeTagStream], n: usize, bin_ps: u64) -> Result<GnEstimate> {
    if n < 2 || channels.len() < n {
        return Err(Error::invalid("n", format!("need 2 ≤ n ≤ {} channels, got {n}", channels.len())));
    }
    if bin_ps == 0 {
        return Err(Error::invalid("bin_ps", "must be at least 1"));
    }
    if binomial(channels.len() as u32, n as u32) > MAX_SUBSETS as f64 {
        return Err(Error::invalid("n", format!("more than {MAX_SUBSETS} detector subsets")));
    }
    if let Some(empty) = channels.iter().find(|c| c.is_empty()) {
        return Err(Error::EmptyStream { channel: empty.channel() });
    }
    let (coincidences, accidentals) = subsets(channels.len(), n)
        .par_iter()
        .map(|combo| {
            let refs: Vec<&TimeTagStream> = combo.iter().map(|&i| &channels[i]).collect();
            (coincidence_count(&refs, bin_ps), accidental_coincidences(&refs, bin_ps))
        })
        .reduce(|| (0u64, 0.0f64), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(GnEstimate::from_counts(n, bin_ps, coincidences, accidentals))
}

/// Splits one simulated source stream `m` ways for each `m`, detects every
/// output with the same TER and reports the summed-pair `g2(0)` at
/// coincidence bin `bin_ps`. The same source photons feed every `m`.
pub fn array_g2_sweep(
    model: &SourceModel,
    incident_rate: f64,
    ter: &TerCurve,
    m_values: &[usize],
    duration: f64,
    bin_ps: u64,
    seed: u64,
) -> Result<ArraySweep> {
    if m_values.is_empty() || m_values.iter().any(|&m| m < 2) {
        return Err(Error::invalid("m_values", "every m must be at least 2"));
    }
    if bin_ps == 0 {
        return Err(Error::invalid("bin_ps", "must be at least 1"));
    }
    let source = sample_source_stream(&model.with_rate(incident_rate), duration, seed)?;
    let config = DetectorConfig::ideal(ter.clone());
    let points = m_values
        .par_iter()
        .map(|&m| {
            let split_seed = seed ^ (m as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let channels: Vec<TimeTagStream> = split_stream(&source, m, split_seed)?
                .iter()
                .map(|c| detect(c, &config, split_seed))
                .collect();
            summed_pair_g2(&channels, bin_ps)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ArraySweep {
        n: 2,
        incident_rate,
        bin_ps,
        duration_s: source.duration_s(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlator::gn_zero;
    use crate::wtd::log_space;
    use approx::assert_relative_eq;

    fn flat() -> EfficiencyCurve {
        EfficiencyCurve::new(vec![1.0, 1e12], vec![1.0, 1e12]).unwrap()
    }

    #[test]
    fn scaling_substitution() {
        let r = 1e6;
        assert_relative_eq!(
            coincidence_rate_scaling(2, 2, r, &flat(), Prefactor::Factorial).unwrap(),
            r * r / 4.0
        );
        for m in 2..8 {
            let c = coincidence_rate_scaling(m, m, r, &flat(), Prefactor::Factorial).unwrap();
            assert_relative_eq!(c, (r / m as f64).powi(m as i32), max_relative = 1e-12);
        }
        let pairs = coincidence_rate_scaling(6, 2, r, &flat(), Prefactor::Binomial).unwrap();
        assert_relative_eq!(pairs, 15.0 * (r / 6.0).powi(2), max_relative = 1e-12);
        assert!(coincidence_rate_scaling(1, 2, r, &flat(), Prefactor::Factorial).is_err());
    }

    #[test]
    fn saturated_array_gains_rate_with_m() {
        let t_d = 43e-9;
        let eff = EfficiencyCurve::poisson_analytic(&log_space(1e3, 1e10, 300), t_d).unwrap();
        let r = 2.0 / t_d;
        let c: Vec<f64> = (2..=16)
            .map(|m| coincidence_rate_scaling(m, 2, r, &eff, Prefactor::Factorial).unwrap())
            .collect();
        assert!(c.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn coverage_error() {
        let eff = EfficiencyCurve::poisson_analytic(&log_space(1e3, 1e6, 30), 43e-9).unwrap();
        assert!(matches!(
            coincidence_rate_scaling(2, 2, 1e8, &eff, Prefactor::Factorial),
            Err(Error::Coverage { .. })
        ));
    }

    #[test]
    fn two_detectors_reduce_to_single_pair() {
        let a = crate::sources::sample_poisson_stream(1e6, 0.2, 1).unwrap();
        let b = crate::sources::sample_poisson_stream(1e6, 0.2, 2).unwrap().with_channel(1);
        let summed = summed_pair_g2(&[a.clone(), b.clone()], 1000).unwrap();
        let single = gn_zero(&[&a, &b], 1000).unwrap();
        assert_eq!(summed.coincidences, single.coincidences);
        assert_relative_eq!(summed.g2_estimate, single.value);
    }

    #[test]
    fn summed_estimate_matches_single_subset_and_counts_subsets() {
        let s: Vec<TimeTagStream> = (0..4)
            .map(|c| crate::sources::sample_poisson_stream(2e6, 0.05, 10 + c).unwrap().with_channel(c as u8))
            .collect();
        let single = gn_zero(&[&s[0], &s[1], &s[2]], 5000).unwrap();
        let summed = summed_gn_zero(&s[..3], 3, 5000).unwrap();
        assert_eq!(summed.coincidences, single.coincidences);
        let pairs = summed_gn_zero(&s, 2, 5000).unwrap();
        let by_pair = summed_pair_g2(&s, 5000).unwrap();
        assert_eq!(pairs.coincidences, by_pair.coincidences);
        assert_relative_eq!(pairs.value, by_pair.g2_estimate, max_relative = 1e-12);
        assert!(summed_gn_zero(&s, 5, 5000).is_err());
        assert_eq!(subsets(6, 3).len(), 20);
    }

    #[test]
    fn sweep_csv_layout() {
        let sweep = ArraySweep {
            n: 2,
            incident_rate: 1.0,
            bin_ps: 10,
            duration_s: 1.0,
            points: vec![ArrayPoint {
                m: 4,
                g2_estimate: 1.5,
                g2_stderr: 0.1,
                coincidence_rate_per_bin: 20.0,
                coincidences: 20,
                accidentals: 13.3,
            }],
        };
        let mut buf = Vec::new();
        sweep.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{SWEEP_CSV_HEADER}\n4,1.5,0.1,20\n"));
    }

    #[test]
    fn rejects_small_arrays() {
        let model = SourceModel::thermal(1.0, 1e-6).unwrap();
        let ter = crate::detector::heaviside_ter(43e-9).unwrap();
        assert!(array_g2_sweep(&model, 1e5, &ter, &[1, 2], 0.01, 50_000, 1).is_err());
        assert!(array_g2_sweep(&model, 1e5, &ter, &[], 0.01, 50_000, 1).is_err());
    }
}
