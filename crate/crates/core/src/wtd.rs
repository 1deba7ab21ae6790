//! Waiting-time-distribution solver.
//!
//! `Ω(dt)` is the probability that no further detection has occurred `dt`
//! after a registered detection. It obeys the forward-Euler recursion
//!
//! ```text
//! Ω(dt + δ) = Ω(dt) − Ω(dt)·η(dt)·P(dt)·δ,   P(dt) = g2(dt)·I,   Ω(0) = 1
//! ```
//!
//! and the detected rate is the inverse of the mean waiting time. The
//! waiting-time density on the grid is `w_k = Ω_k − Ω_{k+1}`, attributed to
//! the delay `(k+1)·δ` at which the detection is registered.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{TerCurve, TABULATED_RATE_CEILING};
use crate::error::{Error, Result};
use crate::sources::SourceModel;
use crate::stream::{seconds_to_ps, PS_PER_S};

pub const WTD_CSV_HEADER: &str = "dt_ps,omega";
pub const EFFICIENCY_CSV_HEADER: &str = "R_per_s,R_prime_per_s,epsilon";

const TRUNCATION_LIMIT: f64 = 1e-6;
const STABILITY_LIMIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WtdOrigin {
    Solved,
    Empirical,
}

/// `Ω` on a uniform grid. Solved curves hold `Ω(k·δ)`; empirical curves
/// hold waiting-time counts for the bin `[k·δ, (k+1)·δ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaitingTimeDistribution {
    pub dt_ps: u64,
    pub omega: Vec<f64>,
    pub origin: WtdOrigin,
}

impl WaitingTimeDistribution {
    pub fn empirical(dt_ps: u64, counts: Vec<f64>) -> Result<Self> {
        if dt_ps == 0 {
            return Err(Error::invalid("dt_ps", "bin width must be positive"));
        }
        if counts.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::invalid("omega", "counts must be non-negative"));
        }
        Ok(WaitingTimeDistribution {
            dt_ps,
            omega: counts,
            origin: WtdOrigin::Empirical,
        })
    }

    pub fn dt_s(&self) -> f64 {
        self.dt_ps as f64 / PS_PER_S
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{WTD_CSV_HEADER}")?;
        for (k, v) in self.omega.iter().enumerate() {
            writeln!(out, "{},{v}", k as u64 * self.dt_ps)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_flux(flux: f64) -> Result<()> {
    if !(flux > 0.0) || !flux.is_finite() {
        return Err(Error::invalid("I", "incident flux must be positive and finite"));
    }
    Ok(())
}

/// Integrates the recursion from `Ω(0) = 1` out to `t_max` on a grid of
/// `grid_dt` (rounded to whole picoseconds).
pub fn solve_wtd(
    ter: &TerCurve,
    model: &SourceModel,
    flux: f64,
    grid_dt: f64,
    t_max: f64,
) -> Result<WaitingTimeDistribution> {
    check_flux(flux)?;
    if !(grid_dt > 0.0) || !(t_max > grid_dt) {
        return Err(Error::invalid("grid_dt", "need 0 < grid_dt < t_max"));
    }
    let dt_ps = seconds_to_ps(grid_dt).max(1);
    let delta = dt_ps as f64 / PS_PER_S;
    let steps = (t_max / delta).ceil() as usize;
    crate::stream::Budget::default().check(steps as f64)?;

    let mut omega = Vec::with_capacity(steps + 1);
    let mut o = 1.0;
    omega.push(o);
    for k in 0..steps {
        let t = k as f64 * delta;
        let rate = ter.eta_at_ps(k as u64 * dt_ps) * model.g2(t) * flux * delta;
        if rate > STABILITY_LIMIT {
            return Err(Error::Instability { value: rate, dt: delta });
        }
        o -= o * rate;
        omega.push(o);
    }
    if o >= TRUNCATION_LIMIT {
        return Err(Error::Truncation { omega_end: o });
    }
    Ok(WaitingTimeDistribution {
        dt_ps,
        omega,
        origin: WtdOrigin::Solved,
    })
}

/// Mean waiting time in seconds. The detected rate is its inverse.
pub fn mean_waiting_time(wtd: &WaitingTimeDistribution) -> Result<f64> {
    let delta = wtd.dt_s();
    match wtd.origin {
        WtdOrigin::Solved => {
            let end = *wtd.omega.last().ok_or(Error::InsufficientData { needed: 2, got: 0 })?;
            if end >= TRUNCATION_LIMIT {
                return Err(Error::Truncation { omega_end: end });
            }
            let (mut s0, mut s1) = (0.0, 0.0);
            for (k, w) in wtd.omega.windows(2).enumerate() {
                let density = w[0] - w[1];
                s0 += density;
                s1 += density * (k + 1) as f64 * delta;
            }
            if !(s0 > 0.0) {
                return Err(Error::InsufficientData { needed: 1, got: 0 });
            }
            Ok(s1 / s0)
        }
        WtdOrigin::Empirical => {
            let (mut s0, mut s1) = (0.0, 0.0);
            for (k, &c) in wtd.omega.iter().enumerate() {
                s0 += c;
                s1 += c * (k as f64 + 0.5) * delta;
            }
            if !(s0 > 0.0) {
                return Err(Error::InsufficientData { needed: 1, got: 0 });
            }
            Ok(s1 / s0)
        }
    }
}

/// Detected rate `1/⟨dt⟩` from the recursion, run to completion. Once `η`
/// has reached `eta_inf` and `g2` has settled to 1 the recursion is a
/// geometric sequence, whose remaining contribution is summed in closed
/// form.
fn streamed_rate(
    eta: &dyn Fn(u64) -> f64,
    eta_inf: f64,
    settle: f64,
    model: &SourceModel,
    flux: f64,
    dt_ps: u64,
) -> Result<f64> {
    let delta = dt_ps as f64 / PS_PER_S;
    let settle_steps = (settle / delta).ceil() as u64;
    let (mut s0, mut s1) = (0.0, 0.0);
    let mut o = 1.0;
    let mut k = 0u64;
    while k < settle_steps && o > 1e-300 {
        let t = k as f64 * delta;
        let rate = eta(k * dt_ps) * model.g2(t) * flux * delta;
        if rate > STABILITY_LIMIT {
            return Err(Error::Instability { value: rate, dt: delta });
        }
        let w = o * rate;
        s0 += w;
        s1 += w * (k + 1) as f64 * delta;
        o -= w;
        k += 1;
    }
    let h = eta_inf * flux;
    if h * delta > STABILITY_LIMIT {
        return Err(Error::Instability {
            value: h * delta,
            dt: delta,
        });
    }
    let q = 1.0 - h * delta;
    s0 += o;
    s1 += o * ((k + 1) as f64 * delta + q / h);
    Ok(s0 / s1)
}

/// Options for [`rate_curve_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Fixed integration step in seconds; `None` picks one per point.
    pub step: Option<f64>,
    /// Largest relative change in `R'` tolerated when the step is halved.
    pub halving_tolerance: f64,
    pub max_halvings: u32,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            step: None,
            halving_tolerance: 1e-3,
            max_halvings: 6,
        }
    }
}

/// Default step: `min(t_d/1000, T/100, 0.01/(I·g2max))` in whole ps.
pub fn default_step_ps(ter: &TerCurve, model: &SourceModel, flux: f64) -> u64 {
    let mut step = ter.recovery_time() / 1000.0;
    if model.correlation_time > 0.0 {
        step = step.min(model.correlation_time / 100.0);
    }
    step = step.min(0.01 / (flux * model.g2_max()));
    ((step * PS_PER_S).floor() as u64).max(1)
}

/// One evaluated point of an efficiency curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    /// Incident flux `I`, photons per second.
    pub flux: f64,
    /// Detected rate without recovery effects (`η ≡ eta_inf`).
    pub rate: f64,
    /// Detected rate with the TER.
    pub rate_prime: f64,
    pub step_ps: u64,
}

fn converged_rate(
    eval: &dyn Fn(u64) -> Result<f64>,
    first_step: u64,
    options: &SolverOptions,
) -> Result<(f64, u64)> {
    let mut step = first_step;
    let mut value = eval(step)?;
    let mut halvings = 0;
    while step >= 2 {
        let finer = eval(step / 2)?;
        let change = ((finer - value) / finer).abs();
        value = finer;
        step /= 2;
        if change < options.halving_tolerance {
            return Ok((value, step));
        }
        halvings += 1;
        if halvings >= options.max_halvings {
            return Err(Error::NotConverged { change });
        }
    }
    // at 1 ps the grid cannot be refined further
    Ok((value, step))
}

/// Solves both simulations for a single incident flux.
pub fn rate_point(ter: &TerCurve, model: &SourceModel, flux: f64, options: &SolverOptions) -> Result<RatePoint> {
    check_flux(flux)?;
    let step = match options.step {
        Some(s) => seconds_to_ps(s).max(1),
        None => default_step_ps(ter, model, flux),
    };
    let eta_inf = ter.eta_inf();
    let settle_model = model.settle_time();
    let with_ter = |dt_ps: u64| {
        streamed_rate(
            &|t| ter.eta_at_ps(t),
            eta_inf,
            ter.settle_time().max(settle_model),
            model,
            flux,
            dt_ps,
        )
    };
    let without = |dt_ps: u64| streamed_rate(&|_| eta_inf, eta_inf, settle_model, model, flux, dt_ps);

    let (rate, _) = converged_rate(&without, step, options)?;
    if ter.is_tabulated() && rate > TABULATED_RATE_CEILING {
        return Err(Error::RateCeiling {
            rate,
            ceiling: TABULATED_RATE_CEILING,
        });
    }
    let (rate_prime, step_ps) = converged_rate(&with_ter, step, options)?;
    Ok(RatePoint {
        flux,
        rate,
        rate_prime: rate_prime.min(rate),
        step_ps,
    })
}

/// `R' = R/(1 + R·t_d)` for Poissonian light and an ideal dead time.
pub fn poisson_analytic_rate(rate: f64, t_d: f64) -> f64 {
    rate / (1.0 + rate * t_d)
}

/// Paired no-TER rates `R`, detected rates `R'` and `ε = R'/R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyCurve {
    r: Vec<f64>,
    r_prime: Vec<f64>,
    epsilon: Vec<f64>,
}

impl EfficiencyCurve {
    pub fn new(r: Vec<f64>, r_prime: Vec<f64>) -> Result<Self> {
        if r.is_empty() || r.len() != r_prime.len() {
            return Err(Error::invalid("R", "need matching non-empty rate lists"));
        }
        if r.windows(2).any(|w| !(w[1] > w[0])) || !(r[0] > 0.0) {
            return Err(Error::invalid("R", "rates must be positive and ascending"));
        }
        let mut epsilon = Vec::with_capacity(r.len());
        for (&a, &b) in r.iter().zip(&r_prime) {
            let e = b / a;
            if !(e > 0.0 && e <= 1.0 + 1e-9) {
                return Err(Error::invalid("R_prime", format!("efficiency {e} outside (0, 1]")));
            }
            epsilon.push(e.min(1.0));
        }
        let r_prime = r.iter().zip(&epsilon).map(|(a, e)| a * e).collect();
        Ok(EfficiencyCurve { r, r_prime, epsilon })
    }

    /// `ε = 1/(1 + R·t_d)` sampled at `rates`.
    pub fn poisson_analytic(rates: &[f64], t_d: f64) -> Result<Self> {
        let prime = rates.iter().map(|&r| poisson_analytic_rate(r, t_d)).collect();
        Self::new(rates.to_vec(), prime)
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn r_prime(&self) -> &[f64] {
        &self.r_prime
    }

    pub fn epsilon(&self) -> &[f64] {
        &self.epsilon
    }

    pub fn r_min(&self) -> f64 {
        self.r[0]
    }

    pub fn r_max(&self) -> f64 {
        *self.r.last().unwrap()
    }

    /// `ε(R)`, linear in `log R` between samples and flat outside them.
    pub fn epsilon_at(&self, rate: f64) -> f64 {
        if rate <= self.r[0] {
            return self.epsilon[0];
        }
        let n = self.r.len();
        if rate >= self.r[n - 1] {
            return self.epsilon[n - 1];
        }
        let i = self.r.partition_point(|&x| x <= rate) - 1;
        let (x0, x1) = (self.r[i].ln(), self.r[i + 1].ln());
        let w = (rate.ln() - x0) / (x1 - x0);
        self.epsilon[i] + w * (self.epsilon[i + 1] - self.epsilon[i])
    }

    pub fn detected_rate(&self, rate: f64) -> f64 {
        rate * self.epsilon_at(rate)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{EFFICIENCY_CSV_HEADER}")?;
        for i in 0..self.r.len() {
            writeln!(out, "{},{},{}", self.r[i], self.r_prime[i], self.epsilon[i])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != EFFICIENCY_CSV_HEADER {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{EFFICIENCY_CSV_HEADER}`"),
            });
        }
        let (mut r, mut rp) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 2,
                    message: e.to_string(),
                })?;
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            r.push(fields[0]);
            rp.push(fields[1]);
        }
        Self::new(r, rp)
    }
}

/// A flux at which [`rate_curve`] could not produce a value.
#[derive(Debug)]
pub struct PointFailure {
    pub flux: f64,
    pub error: Error,
}

#[derive(Debug)]
pub struct RateCurve {
    pub curve: EfficiencyCurve,
    pub points: Vec<RatePoint>,
    pub failures: Vec<PointFailure>,
}

/// Efficiency curve over ascending incident fluxes, one pair of
/// simulations per flux, evaluated concurrently. Failed points are
/// reported alongside the curve built from the rest.
pub fn rate_curve(ter: &TerCurve, model: &SourceModel, fluxes: &[f64]) -> Result<RateCurve> {
    rate_curve_with(ter, model, fluxes, &SolverOptions::default())
}

pub fn rate_curve_with(
    ter: &TerCurve,
    model: &SourceModel,
    fluxes: &[f64],
    options: &SolverOptions,
) -> Result<RateCurve> {
    if fluxes.is_empty() {
        return Err(Error::invalid("I_values", "need at least one flux"));
    }
    if fluxes.windows(2).any(|w| !(w[1] > w[0])) || !(fluxes[0] > 0.0) {
        return Err(Error::invalid("I_values", "fluxes must be positive and ascending"));
    }
    model.validate()?;
    let results: Vec<Result<RatePoint>> = fluxes
        .par_iter()
        .map(|&flux| rate_point(ter, model, flux, options))
        .collect();
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for (&flux, res) in fluxes.iter().zip(results) {
        match res {
            Ok(p) => points.push(p),
            Err(error) => {
                log::warn!("rate curve point I = {flux:.3e} failed: {error}");
                failures.push(PointFailure { flux, error });
            }
        }
    }
    if points.is_empty() {
        let first = failures.remove(0).error;
        return Err(Error::AllPointsFailed { first: Box::new(first) });
    }
    let curve = EfficiencyCurve::new(
        points.iter().map(|p| p.rate).collect(),
        points.iter().map(|p| p.rate_prime).collect(),
    )?;
    Ok(RateCurve {
        curve,
        points,
        failures,
    })
}

/// `n` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Efficiency curve of `ter` for Poissonian light, sampled at `points`
/// no-TER rates spanning `[r_min, r_max]`. Fails with the first failing
/// point's error.
pub fn poisson_efficiency_curve(ter: &TerCurve, r_min: f64, r_max: f64, points: usize) -> Result<EfficiencyCurve> {
    if !(r_min > 0.0 && r_max > r_min) || points < 2 {
        return Err(Error::invalid("R", "need 0 < r_min < r_max and at least two points"));
    }
    let model = SourceModel::poissonian(1.0)?;
    let fluxes: Vec<f64> = log_space(r_min, r_max, points)
        .into_iter()
        .map(|r| r / ter.eta_inf())
        .collect();
    let result = rate_curve(ter, &model, &fluxes)?;
    // a partial curve would silently shrink the covered range
    match result.failures.into_iter().next() {
        Some(f) => Err(f.error),
        None => Ok(result.curve),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::heaviside_ter;
    use approx::assert_relative_eq;

    const TD: f64 = 43e-9;

    fn poisson() -> SourceModel {
        SourceModel::poissonian(1.0).unwrap()
    }

    #[test]
    fn constant_efficiency_gives_exponential() {
        let (eta0, p0) = (0.8, 2e6);
        let ter = TerCurve::tabulated(vec![0, 1], vec![eta0, eta0], eta0).unwrap();
        let delta = 1e-4 / (eta0 * p0);
        let wtd = solve_wtd(&ter, &poisson(), p0, delta, 20.0 / (eta0 * p0)).unwrap();
        let step = wtd.dt_s();
        let mut worst: f64 = 0.0;
        for (k, &o) in wtd.omega.iter().enumerate() {
            let exact = (-eta0 * p0 * k as f64 * step).exp();
            if exact > 1e-6 {
                worst = worst.max((o - exact).abs() / exact);
            }
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn heaviside_is_flat_then_exponential() {
        let ter = heaviside_ter(TD).unwrap();
        let flux = 1e7;
        let wtd = solve_wtd(&ter, &poisson(), flux, 43e-12, TD + 20.0 / flux).unwrap();
        let k_d = 1000;
        assert!(wtd.omega[..=k_d].iter().all(|&o| o == 1.0));
        let step = wtd.dt_s();
        for k in [k_d + 100, k_d + 1000, k_d + 10_000] {
            let exact = (-flux * (k - k_d) as f64 * step).exp();
            assert_relative_eq!(wtd.omega[k], exact, max_relative = 1e-3);
        }
    }

    #[test]
    fn blind_detector_never_fires() {
        // zero efficiency across the whole integration window
        let ter = TerCurve::tabulated(vec![0, 2_000_000], vec![0.0, 0.0], 1.0).unwrap();
        let err = solve_wtd(&ter, &poisson(), 1e6, 1e-9, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Truncation { omega_end } if omega_end == 1.0));
    }

    #[test]
    fn solver_errors() {
        let ter = heaviside_ter(TD).unwrap();
        assert!(matches!(
            solve_wtd(&ter, &poisson(), 1e10, 1e-9, 1e-6),
            Err(Error::Instability { .. })
        ));
        assert!(matches!(
            solve_wtd(&ter, &poisson(), 1e6, 1e-9, 1e-6),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn mean_waiting_time_of_exponential() {
        let ter = TerCurve::tabulated(vec![0], vec![1.0], 1.0).unwrap();
        let flux = 1e6;
        let wtd = solve_wtd(&ter, &poisson(), flux, 1e-9, 20.0 / flux).unwrap();
        assert_relative_eq!(mean_waiting_time(&wtd).unwrap(), 1.0 / flux, max_relative = 1e-3);
    }

    #[test]
    fn mean_waiting_time_with_dead_time() {
        let ter = heaviside_ter(TD).unwrap();
        for flux in [1e6, 1e7, 5e7] {
            let wtd = solve_wtd(&ter, &poisson(), flux, 43e-12, TD + 20.0 / flux).unwrap();
            let mean = mean_waiting_time(&wtd).unwrap();
            assert_relative_eq!(mean, TD + 1.0 / flux, max_relative = 5e-3);
        }
    }

    #[test]
    fn mean_waiting_time_converges_under_refinement() {
        let ter = TerCurve::reference();
        let model = SourceModel::thermal(1.0, TD).unwrap();
        let coarse = solve_wtd(&ter, &model, 1e7, 43e-12, 3e-6).unwrap();
        let fine = solve_wtd(&ter, &model, 1e7, 21.5e-12, 3e-6).unwrap();
        let (a, b) = (mean_waiting_time(&coarse).unwrap(), mean_waiting_time(&fine).unwrap());
        assert!(((a - b) / b).abs() < 1e-3);
    }

    #[test]
    fn empirical_mean_uses_bin_centres() {
        let wtd = WaitingTimeDistribution::empirical(1000, vec![0.0, 1.0, 1.0]).unwrap();
        assert_relative_eq!(mean_waiting_time(&wtd).unwrap(), 2e-9);
    }

    #[test]
    fn streamed_rate_matches_full_solution() {
        let ter = TerCurve::reference();
        let model = SourceModel::antibunched(1.0, 20e-9).unwrap();
        let flux = 2e7;
        let wtd = solve_wtd(&ter, &model, flux, 10e-12, 3e-6).unwrap();
        let direct = 1.0 / mean_waiting_time(&wtd).unwrap();
        let opts = SolverOptions {
            step: Some(10e-12),
            max_halvings: 0,
            ..SolverOptions::default()
        };
        let streamed = with_ter_only(&ter, &model, flux, &opts);
        assert_relative_eq!(direct, streamed, max_relative = 1e-6);
    }

    fn with_ter_only(ter: &TerCurve, model: &SourceModel, flux: f64, opts: &SolverOptions) -> f64 {
        let dt_ps = seconds_to_ps(opts.step.unwrap());
        streamed_rate(
            &|t| ter.eta_at_ps(t),
            ter.eta_inf(),
            ter.settle_time().max(model.settle_time()),
            model,
            flux,
            dt_ps,
        )
        .unwrap()
    }

    #[test]
    fn analytic_rate_reference_points() {
        assert_eq!(poisson_analytic_rate(0.0, TD), 0.0);
        assert_relative_eq!(poisson_analytic_rate(1.0 / TD, TD), 0.5 / TD);
        assert_relative_eq!(poisson_analytic_rate(1e15, TD), 1.0 / TD, max_relative = 1e-6);
    }

    #[test]
    fn heaviside_poisson_curve_matches_analytic() {
        let ter = heaviside_ter(TD).unwrap();
        let fluxes = log_space(0.01 / TD, 10.0 / TD, 25);
        let result = rate_curve(&ter, &poisson(), &fluxes).unwrap();
        assert!(result.failures.is_empty());
        let c = &result.curve;
        for i in 0..c.r().len() {
            let expected = 1.0 / (1.0 + c.r()[i] * TD);
            assert!((c.epsilon()[i] / expected - 1.0).abs() < 0.01, "R = {}", c.r()[i]);
        }
    }

    #[test]
    fn low_flux_efficiency_tends_to_one() {
        let ter = TerCurve::reference();
        for model in [
            poisson(),
            SourceModel::thermal(1.0, TD).unwrap(),
            SourceModel::antibunched(1.0, TD).unwrap(),
        ] {
            let p = rate_point(&ter, &model, 1e3, &SolverOptions::default()).unwrap();
            assert!((p.rate_prime / p.rate - 1.0).abs() < 0.01, "{:?}", model.kind);
        }
    }

    #[test]
    fn source_ordering_at_unit_load() {
        let ter = heaviside_ter(TD).unwrap();
        let opts = SolverOptions::default();
        let eps = |model: SourceModel| {
            // find the flux whose no-TER rate is 1/t_d
            let (mut lo, mut hi) = (0.1 / TD, 10.0 / TD);
            for _ in 0..60 {
                let mid = (lo * hi).sqrt();
                if rate_point(&ter, &model, mid, &opts).unwrap().rate < 1.0 / TD {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let p = rate_point(&ter, &model, lo, &opts).unwrap();
            p.rate_prime / p.rate
        };
        let anti = eps(SourceModel::antibunched(1.0, TD).unwrap());
        let pois = eps(poisson());
        let thermal = eps(SourceModel::thermal(1.0, TD).unwrap());
        assert!(anti > pois && pois > thermal, "{anti} {pois} {thermal}");
    }

    #[test]
    fn fast_correlations_converge_to_poisson() {
        let ter = heaviside_ter(TD).unwrap();
        let opts = SolverOptions::default();
        for kind_model in [
            SourceModel::thermal(1.0, TD / 100.0).unwrap(),
            SourceModel::antibunched(1.0, TD / 100.0).unwrap(),
        ] {
            for flux in [0.1 / TD, 1.0 / TD, 3.0 / TD] {
                let p = rate_point(&ter, &kind_model, flux, &opts).unwrap();
                let eps = p.rate_prime / p.rate;
                let poisson_eps = 1.0 / (1.0 + p.rate * TD);
                assert!((eps / poisson_eps - 1.0).abs() < 0.02, "{:?} I={flux}", kind_model.kind);
            }
        }
    }

    #[test]
    fn efficiency_is_nonincreasing() {
        let ter = TerCurve::reference();
        let fluxes = log_space(1e4, 1e9, 30);
        for model in [
            poisson(),
            SourceModel::thermal(1.0, TD).unwrap(),
            SourceModel::antibunched(1.0, TD).unwrap(),
        ] {
            let c = rate_curve(&ter, &model, &fluxes).unwrap().curve;
            assert!(c.epsilon().windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", model.kind);
        }
    }

    #[test]
    fn step_halving_changes_little() {
        let ter = TerCurve::reference();
        let model = SourceModel::thermal(1.0, TD).unwrap();
        for flux in [1e6, 1e7, 5e7] {
            let step = default_step_ps(&ter, &model, flux);
            let run = |s: u64| {
                let o = SolverOptions {
                    step: Some(s as f64 * 1e-12),
                    max_halvings: 0,
                    ..SolverOptions::default()
                };
                with_ter_only(&ter, &model, flux, &o)
            };
            let (a, b) = (run(step), run(step / 2));
            assert!(((a - b) / b).abs() < 1e-3, "I={flux}");
        }
    }

    #[test]
    fn tabulated_ceiling_is_enforced() {
        let ter = TerCurve::reference();
        let err = rate_point(&ter, &poisson(), 2e9, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::RateCeiling { .. }));
        let result = rate_curve(&ter, &poisson(), &[1e6, 2e9]).unwrap();
        assert_eq!(result.curve.r().len(), 1);
        assert_eq!(result.failures.len(), 1);
        assert!(matches!(
            rate_curve(&ter, &poisson(), &[2e9, 3e9]),
            Err(Error::AllPointsFailed { .. })
        ));
    }

    #[test]
    fn rejects_unsorted_fluxes() {
        let ter = heaviside_ter(TD).unwrap();
        assert!(rate_curve(&ter, &poisson(), &[2e6, 1e6]).is_err());
        assert!(rate_curve(&ter, &poisson(), &[]).is_err());
    }

    #[test]
    fn efficiency_curve_interpolation_and_csv() {
        let c = EfficiencyCurve::poisson_analytic(&log_space(1e3, 1e9, 61), TD).unwrap();
        for r in [1e3, 3.3e5, 2.2e7, 1e9] {
            assert_relative_eq!(c.epsilon_at(r), 1.0 / (1.0 + r * TD), max_relative = 2e-3);
        }
        assert_eq!(c.epsilon_at(1.0), c.epsilon()[0]);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = EfficiencyCurve::read_csv(&buf[..]).unwrap();
        assert_eq!(back.r(), c.r());
        assert!(EfficiencyCurve::new(vec![1.0], vec![2.0]).is_err());
    }

    #[test]
    fn wtd_csv_layout() {
        let w = WaitingTimeDistribution::empirical(200, vec![3.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "dt_ps,omega\n0,3\n200,1\n");
    }
}
