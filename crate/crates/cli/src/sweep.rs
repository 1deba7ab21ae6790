//! `sweep`: runs an analysis list and writes one CSV per analysis. A failed
//! point or analysis is recorded in `sweep_summary.json` and the sweep
//! carries on.

use std::io::Write;

use serde_json::{json, Value};
use terlab::array::{array_g2_sweep, coincidence_rate_scaling, summed_gn_zero, Prefactor};
use terlab::calibration::{calibrate, CalibrationOptions};
use terlab::correlator::{g2_histogram, g3_surface, mean_rate_for_detected, predict_gn_zero};
use terlab::detector::{detect, split_stream, TerCurve, TABULATED_RATE_CEILING};
use terlab::sources::{sample_poisson_stream, sample_source_stream, sample_thermal_stream};
use terlab::wtd::{log_space, rate_curve, EfficiencyCurve};
use terlab::{SourceKind, SourceModel, TimeTagStream};

use crate::args::{Preset, SweepArgs};
use crate::commands::Globals;
use crate::config::{Analysis, DetectorSpec, ExperimentConfig, Format};
use crate::error::{CliError, Result};
use crate::output::OutputDir;

const T_D: f64 = 43e-9;

/// Built-in analysis lists at desk scale.
pub fn preset_config(preset: Preset) -> ExperimentConfig {
    let heaviside = DetectorSpec::heaviside(T_D);
    let analysis = match preset {
        Preset::Fig1b => vec![Analysis::Saturation {
            sources: vec![
                SourceKind::Poissonian,
                SourceKind::ThermalBunched,
                SourceKind::TwoLevelAntibunched,
            ],
            correlation_time: T_D,
            flux_min: 1e5,
            flux_max: 1e10,
            points: 41,
            mc_points: 6,
            detector: None,
        }],
        Preset::Fig2a => vec![
            Analysis::TerExtraction {
                detected_rate: 0.01 / T_D,
                events: 4e7,
                detector: Some(DetectorSpec::reference()),
            },
            Analysis::TerExtraction {
                detected_rate: 0.01 / T_D,
                events: 1e7,
                detector: None,
            },
        ],
        Preset::Fig2c => vec![
            Analysis::Efficiency {
                r_min: 1e4,
                r_max: 1e10,
                points: 61,
                detector: None,
            },
            Analysis::Efficiency {
                r_min: 1e4,
                r_max: 0.99 * TABULATED_RATE_CEILING,
                points: 61,
                detector: Some(DetectorSpec::reference()),
            },
        ],
        Preset::Fig3def => {
            let suppression = |detector| Analysis::Suppression {
                detected_rates: vec![1e5, 1e6, 1e7],
                correlation_times: vec![20e-6, 5e-6, 2e-6],
                durations: vec![12.0, 3.0, 0.4],
                splitter_m: 4,
                orders: vec![2, 3, 4],
                detector,
            };
            vec![suppression(None), suppression(Some(DetectorSpec::reference()))]
        }
        Preset::Fig4 => vec![Analysis::Array {
            incident_rate: 2.0 / T_D,
            correlation_time: 1e-6,
            m_values: vec![2, 4, 8, 16],
            duration_s: 0.2,
            bin_ps: 50_000,
            detector: None,
        }],
    };
    ExperimentConfig {
        seed: 0,
        duration_s: 1.0,
        splitter_m: 1,
        output_dir: "out".into(),
        format: Format::Csv,
        scale: 1.0,
        source: None,
        detector: Some(heaviside),
        analysis,
    }
}

/// Result of one analysis: files written and per-point failures.
#[derive(Default)]
struct Report {
    outputs: Vec<String>,
    failures: Vec<Value>,
    notes: serde_json::Map<String, Value>,
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    out: &'a mut OutputDir,
    prefix: String,
    seed: u64,
    report: Report,
}

impl Context<'_> {
    fn write_csv<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut dyn Write) -> terlab::Result<()>,
    {
        let file = format!("{}_{name}", self.prefix);
        self.out.write_with(&file, |w| f(w))?;
        self.report.outputs.push(file);
        Ok(())
    }

    fn fail(&mut self, point: Value, error: impl std::fmt::Display) {
        log::warn!("{}: {point} failed: {error}", self.prefix);
        self.report.failures.push(json!({"point": point, "error": error.to_string()}));
    }

    fn detector(&self, own: &Option<DetectorSpec>) -> Result<DetectorSpec> {
        Ok(self.config.detector_for(own)?.clone())
    }
}

fn experiment_channels(config: &ExperimentConfig, seed: u64) -> Result<Vec<TimeTagStream>> {
    let model = config.source_model()?;
    let source = sample_source_stream(&model, config.duration_s * config.scale, seed)?;
    let mut channels = split_stream(&source, config.splitter_m, seed.wrapping_add(1))?;
    if let Some(spec) = &config.detector {
        let det = spec.config()?;
        channels = channels.iter().map(|c| detect(c, &det, seed.wrapping_add(2))).collect();
    }
    Ok(channels)
}

/// Efficiency curve for Poissonian light, wide enough for thermal averages.
fn efficiency(ter: &TerCurve) -> terlab::Result<EfficiencyCurve> {
    let r_max = if ter.is_tabulated() {
        0.99 * TABULATED_RATE_CEILING
    } else {
        // the solver's 1 ps step bounds the usable rate
        5e10
    };
    terlab::wtd::poisson_efficiency_curve(ter, 1.0, r_max, 241)
}

fn run_analysis(ctx: &mut Context, analysis: &Analysis) -> Result<()> {
    let scale = ctx.config.scale;
    match analysis {
        Analysis::Correlation {
            orders,
            bin_ps,
            max_tau_ps,
        } => {
            let channels = experiment_channels(ctx.config, ctx.seed)?;
            if channels.len() >= 2 && orders.contains(&2) {
                let h = g2_histogram(&channels[0], &channels[1], *bin_ps, *max_tau_ps)?;
                ctx.write_csv("g2.csv", |w| h.write_csv(w))?;
            }
            if channels.len() >= 3 && orders.contains(&3) {
                match g3_surface(&channels[0], &channels[1], &channels[2], *bin_ps, *max_tau_ps) {
                    Ok(h) => ctx.write_csv("g3.csv", |w| h.write_csv(w))?,
                    Err(e) => ctx.fail(json!({"order": 3, "surface": true}), e),
                }
            }
            let mut rows = Vec::new();
            for &n in orders {
                match summed_gn_zero(&channels, n as usize, *bin_ps) {
                    Ok(e) => rows.push(e),
                    Err(e) => ctx.fail(json!({"order": n}), e),
                }
            }
            ctx.write_csv("correlation.csv", |w| {
                writeln!(w, "order,value,stderr,coincidences,accidentals")?;
                for e in &rows {
                    writeln!(w, "{},{},{},{},{}", e.order, e.value, e.stderr, e.coincidences, e.accidentals)?;
                }
                Ok(())
            })
        }

        Analysis::Calibration { bin_ps, t_min, smooth } => {
            let channels = experiment_channels(ctx.config, ctx.seed)?;
            let cal = calibrate(
                &channels[0],
                &CalibrationOptions {
                    bin_ps: *bin_ps,
                    t_min: *t_min,
                    smooth: *smooth,
                },
            )?;
            ctx.write_csv("ter.csv", |w| cal.ter.write_csv(w))?;
            let fit: Value = serde_json::from_str(&cal.fit.to_json()).expect("fit json is well formed");
            ctx.report.notes.insert("fit".into(), fit);
            ctx.report.notes.insert("warnings".into(), json!(cal.warnings));
            Ok(())
        }

        Analysis::Saturation {
            sources,
            correlation_time,
            flux_min,
            flux_max,
            points,
            mc_points,
            detector,
        } => {
            let spec = ctx.detector(detector)?;
            let det = spec.config()?;
            let fluxes = log_space(*flux_min, *flux_max, *points);
            let mut rows: Vec<(SourceKind, &str, f64, f64, f64)> = Vec::new();
            for (k, &kind) in sources.iter().enumerate() {
                let model = SourceModel::new(kind, 1.0, *correlation_time)?;
                let curve = match rate_curve(&det.ter, &model, &fluxes) {
                    Ok(c) => c,
                    Err(e) => {
                        ctx.fail(json!({"source": kind}), e);
                        continue;
                    }
                };
                for f in &curve.failures {
                    ctx.fail(json!({"source": kind, "flux": f.flux}), &f.error);
                }
                for p in &curve.points {
                    rows.push((kind, "solver", p.flux, p.rate, p.rate_prime));
                }
                if *mc_points == 0 || curve.points.is_empty() {
                    continue;
                }
                let stride = (curve.points.len() as f64 / *mc_points as f64).max(1.0);
                for i in 0..*mc_points {
                    let Some(p) = curve.points.get((i as f64 * stride) as usize) else { break };
                    let duration = 1e5 * scale / p.rate_prime;
                    let seed = ctx.seed.wrapping_add(100 * k as u64 + i as u64);
                    match sample_source_stream(&model.with_rate(p.rate / det.ter.eta_inf()), duration, seed) {
                        Ok(s) => rows.push((kind, "monte_carlo", p.flux, p.rate, detect(&s, &det, seed).rate())),
                        Err(e) => ctx.fail(json!({"source": kind, "monte_carlo_rate": p.rate}), e),
                    }
                }
            }
            ctx.write_csv("saturation.csv", |w| {
                writeln!(w, "source,method,flux,rate,rate_prime,epsilon")?;
                for (kind, method, flux, r, rp) in &rows {
                    let name = serde_json::to_value(kind).expect("source kinds serialise");
                    writeln!(w, "{},{method},{flux},{r},{rp},{}", name.as_str().unwrap_or(""), rp / r)?;
                }
                Ok(())
            })
        }

        Analysis::Efficiency {
            r_min,
            r_max,
            points,
            detector,
        } => {
            let ter = ctx.detector(detector)?.ter()?;
            let fluxes: Vec<f64> = log_space(*r_min, *r_max, *points).iter().map(|r| r / ter.eta_inf()).collect();
            let curve = rate_curve(&ter, &SourceModel::poissonian(1.0)?, &fluxes)?;
            for f in &curve.failures {
                ctx.fail(json!({"flux": f.flux}), &f.error);
            }
            ctx.write_csv("efficiency.csv", |w| curve.curve.write_csv(w))
        }

        Analysis::TerExtraction {
            detected_rate,
            events,
            detector,
        } => {
            let spec = ctx.detector(detector)?;
            let det = spec.config()?;
            let truth = det.ter.clone();
            let incident = detected_rate / (truth.eta_inf() * spec.intrinsic_efficiency)
                * (1.0 + detected_rate * truth.recovery_time());
            let duration = events * scale / detected_rate;
            let stream = detect(&sample_poisson_stream(incident, duration, ctx.seed)?, &det, ctx.seed);
            let cal = calibrate(&stream, &CalibrationOptions::default())?;
            let mut worst: f64 = 0.0;
            let rows: Vec<(u64, f64, f64)> = cal
                .ter
                .dt_ps()
                .iter()
                .map(|&dt| {
                    let (t, x) = (truth.eta_at_ps(dt), cal.ter.eta_at_ps(dt));
                    if dt > 2000 {
                        worst = worst.max((t - x).abs());
                    }
                    (dt, t, x)
                })
                .collect();
            ctx.report.notes.insert("max_abs_error_above_2ns".into(), json!(worst));
            ctx.report.notes.insert("detected_rate".into(), json!(stream.rate()));
            ctx.report.notes.insert("warnings".into(), json!(cal.warnings));
            ctx.write_csv("ter_extraction.csv", |w| {
                writeln!(w, "dt_ps,eta_true,eta_extracted")?;
                for (dt, t, x) in &rows {
                    writeln!(w, "{dt},{t},{x}")?;
                }
                Ok(())
            })
        }

        Analysis::Suppression {
            detected_rates,
            correlation_times,
            durations,
            splitter_m,
            orders,
            detector,
        } => {
            let spec = ctx.detector(detector)?;
            let det = spec.config()?;
            let eff = efficiency(&det.ter)?;
            let mut rows = Vec::new();
            for (i, ((&target, &t), &d)) in detected_rates.iter().zip(correlation_times).zip(durations).enumerate() {
                let point = json!({"detected_rate": target, "correlation_time": t});
                let mu = match mean_rate_for_detected(&eff, target) {
                    Ok(mu) => mu,
                    Err(e) => {
                        ctx.fail(point, e);
                        continue;
                    }
                };
                let seed = ctx.seed.wrapping_add(i as u64);
                let incident = *splitter_m as f64 * mu / (det.ter.eta_inf() * spec.intrinsic_efficiency);
                let channels = match sample_thermal_stream(incident, t, d * scale, seed)
                    .and_then(|s| split_stream(&s, *splitter_m, seed))
                {
                    Ok(parts) => parts.iter().map(|c| detect(c, &det, seed)).collect::<Vec<_>>(),
                    Err(e) => {
                        ctx.fail(point, e);
                        continue;
                    }
                };
                let measured_rate = channels.iter().map(|c| c.rate()).sum::<f64>() / channels.len() as f64;
                let bin = ((t / 20.0) * 1e12).round().max(1.0) as u64;
                for &n in orders {
                    let estimate = summed_gn_zero(&channels, n as usize, bin);
                    let predicted = predict_gn_zero(&eff, mu, n);
                    match (estimate, predicted) {
                        (Ok(e), Ok(p)) => rows.push((target, measured_rate, n, e.value, e.stderr, p)),
                        (Err(e), _) | (_, Err(e)) => ctx.fail(json!({"detected_rate": target, "order": n}), e),
                    }
                }
            }
            ctx.write_csv("suppression.csv", |w| {
                writeln!(w, "target_rate,detected_rate,order,measured,stderr,predicted")?;
                for (target, r, n, g, e, p) in &rows {
                    writeln!(w, "{target},{r},{n},{g},{e},{p}")?;
                }
                Ok(())
            })
        }

        Analysis::Array {
            incident_rate,
            correlation_time,
            m_values,
            duration_s,
            bin_ps,
            detector,
        } => {
            let ter = ctx.detector(detector)?.ter()?;
            let model = SourceModel::thermal(1.0, *correlation_time)?;
            let sweep = array_g2_sweep(
                &model,
                *incident_rate,
                &ter,
                m_values,
                duration_s * scale,
                *bin_ps,
                ctx.seed,
            )?;
            let eff = efficiency(&ter)?;
            let scaling: Vec<Option<f64>> = m_values
                .iter()
                .map(|&m| coincidence_rate_scaling(m as u32, 2, incident_rate * ter.eta_inf(), &eff, Prefactor::Factorial).ok())
                .collect();
            let base = scaling.iter().flatten().next().copied();
            ctx.write_csv("array.csv", |w| {
                writeln!(w, "m,g2_estimate,g2_stderr,coincidence_rate_per_bin,predicted_relative_rate")?;
                for (p, s) in sweep.points.iter().zip(&scaling) {
                    let rel = match (s, base) {
                        (Some(s), Some(b)) => (s / b).to_string(),
                        _ => String::new(),
                    };
                    writeln!(w, "{},{},{},{},{rel}", p.m, p.g2_estimate, p.g2_stderr, p.coincidence_rate_per_bin)?;
                }
                Ok(())
            })
        }
    }
}

pub fn sweep_cmd(args: &SweepArgs, globals: &Globals) -> Result<()> {
    let mut config = match (&args.config, args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(preset)) => preset_config(preset),
        (None, None) => return Err(CliError::invalid("sweep: pass --config or --preset")),
    };
    if let Some(seed) = globals.seed {
        config.seed = seed;
    }
    if let Some(dir) = &globals.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(format) = globals.format {
        config.format = format;
    }
    if let Some(scale) = args.scale {
        config.scale = scale;
    }
    config.validate(true)?;

    let mut out = OutputDir::create(&config.output_dir)?;
    let mut summaries = Vec::new();
    let mut first_error = None;
    for (i, analysis) in config.analysis.iter().enumerate() {
        let mut ctx = Context {
            config: &config,
            out: &mut out,
            prefix: format!("{i:02}_{}", analysis.name()),
            seed: config.seed.wrapping_add(1000 * i as u64),
            report: Report::default(),
        };
        log::info!("running {}", ctx.prefix);
        let result = run_analysis(&mut ctx, analysis);
        let report = ctx.report;
        let error = result.as_ref().err().map(|e| e.to_string());
        if let Err(e) = result {
            eprintln!("analysis {i} ({}) failed: {e}", analysis.name());
            first_error.get_or_insert(e);
        }
        summaries.push(json!({
            "index": i,
            "kind": analysis.name(),
            "outputs": report.outputs,
            "failures": report.failures,
            "notes": report.notes,
            "error": error,
        }));
    }
    let summary = json!({ "analyses": summaries });
    out.write_json("sweep_summary.json", &summary)?;
    out.write_manifest("sweep", config.seed, json!({ "config": config }))?;
    match first_error {
        Some(e) if summaries.iter().all(|s| !s["error"].is_null()) => Err(e),
        _ => Ok(()),
    }
}
