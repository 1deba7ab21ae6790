use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use terlab::calibration::{calibrate, CalibrationOptions};
use terlab::correlator::{g2_histogram, g3_surface, gn_zero, predict_gn_zero, predicted_detected_rate};
use terlab::detector::{detect, split_stream};
use terlab::io::{read_tags, write_tags, TagFormat};
use terlab::sources::sample_source_stream;
use terlab::stream::seconds_to_ps;
use terlab::wtd::{poisson_efficiency_curve, EfficiencyCurve};
use terlab::{correlator, TimeTagStream};

use crate::args::{CalibrateArgs, CorrelateArgs, DetectArgs, DetectorArgs, PredictArgs, SimulateArgs, SplitArgs};
use crate::config::{DetectorSpec, ExperimentConfig, Format};
use crate::error::{CliError, Result};
use crate::output::OutputDir;

/// Global settings after flags have overridden config values.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: Option<u64>,
    pub format: Option<Format>,
    pub output_dir: Option<PathBuf>,
}

impl Globals {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn format(&self) -> Format {
        self.format.unwrap_or(Format::Csv)
    }

    fn output(&self) -> Result<OutputDir> {
        OutputDir::create(self.output_dir.as_deref().unwrap_or(Path::new("out")))
    }
}

/// Reads every channel from every file, then gives all of them a common
/// duration: `duration` if given, else the latest record end.
pub fn read_inputs(paths: &[PathBuf], duration: Option<f64>) -> Result<Vec<TimeTagStream>> {
    let mut streams = Vec::new();
    for path in paths {
        let file = File::open(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        let mut part = read_tags(BufReader::new(file)).map_err(|source| match source {
            terlab::Error::Io(source) => CliError::Io {
                path: path.clone(),
                source,
            },
            source => CliError::Input {
                path: path.clone(),
                source,
            },
        })?;
        streams.append(&mut part);
    }
    if streams.is_empty() {
        return Err(CliError::invalid("input: no time tags found"));
    }
    let end = match duration {
        Some(d) if d.is_finite() && d > 0.0 => seconds_to_ps(d),
        Some(d) => return Err(CliError::invalid(format!("duration: must be positive, got {d}"))),
        None => streams.iter().map(|s| s.duration_ps()).max().unwrap_or(1),
    };
    Ok(streams
        .into_iter()
        .map(|s| s.with_duration(end))
        .collect::<terlab::Result<Vec<_>>>()?)
}

fn write_channels(out: &mut OutputDir, prefix: &str, format: TagFormat, channels: &[TimeTagStream]) -> Result<()> {
    for c in channels {
        let name = format!("{prefix}{}.{}", c.channel(), format.extension());
        out.write_with(&name, |w| write_tags(w, format, &[c]))?;
    }
    Ok(())
}

fn stream_summary(channels: &[TimeTagStream]) -> Value {
    channels
        .iter()
        .map(|c| json!({"channel": c.channel(), "events": c.len(), "rate": c.rate()}))
        .collect()
}

impl DetectorArgs {
    fn spec(&self) -> Option<DetectorSpec> {
        if self.dead_time.is_none() && self.ter.is_none() && !self.reference_ter {
            return None;
        }
        Some(DetectorSpec {
            dead_time: self.dead_time,
            ter_file: self.ter.clone(),
            reference: self.reference_ter,
            eta_inf: self.eta_inf,
            intrinsic_efficiency: self.intrinsic_efficiency,
        })
    }
}

pub fn simulate(args: &SimulateArgs, globals: &Globals) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(d) = args.duration {
        config.duration_s = d;
    }
    if let Some(m) = args.m {
        config.splitter_m = m;
    }
    if let Some(seed) = globals.seed {
        config.seed = seed;
    }
    if let Some(format) = globals.format {
        config.format = format;
    }
    if let Some(dir) = &globals.output_dir {
        config.output_dir = dir.clone();
    }
    config.validate(false)?;
    let detector = config.detector.as_ref().map(DetectorSpec::config).transpose()?;

    let model = config.source_model()?;
    let source = sample_source_stream(&model, config.duration_s, config.seed)?;
    let mut channels = split_stream(&source, config.splitter_m, config.seed.wrapping_add(1))?;
    drop(source);
    if let Some(det) = &detector {
        channels = channels.iter().map(|c| detect(c, det, config.seed.wrapping_add(2))).collect();
    }
    log::info!("simulated {} channels", channels.len());

    let mut out = OutputDir::create(&config.output_dir)?;
    write_channels(&mut out, "channel_", config.format.tag_format(), &channels)?;
    let settings = json!({
        "config": config,
        "duration_ps": channels[0].duration_ps(),
        "channels": stream_summary(&channels),
    });
    out.write_manifest("simulate", config.seed, settings)
}

pub fn detect_cmd(args: &DetectArgs, globals: &Globals) -> Result<()> {
    let spec = args
        .detector
        .spec()
        .ok_or_else(|| CliError::invalid("detector: pass --dead-time, --ter or --reference-ter"))?;
    let config = spec.config()?;
    let inputs = read_inputs(&args.inputs, args.duration)?;
    let seed = globals.seed();
    let detected: Vec<TimeTagStream> = inputs.iter().map(|s| detect(s, &config, seed)).collect();
    let mut out = globals.output()?;
    write_channels(&mut out, "detected_", globals.format().tag_format(), &detected)?;
    let settings = json!({
        "inputs": args.inputs,
        "detector": spec,
        "input_channels": stream_summary(&inputs),
        "channels": stream_summary(&detected),
    });
    out.write_manifest("detect", seed, settings)
}

fn pick_channel(streams: Vec<TimeTagStream>, channel: Option<u8>) -> Result<TimeTagStream> {
    match channel {
        None => Ok(streams.into_iter().next().expect("read_inputs returns at least one stream")),
        Some(c) => streams
            .into_iter()
            .find(|s| s.channel() == c)
            .ok_or_else(|| CliError::invalid(format!("channel: {c} not present in the input"))),
    }
}

pub fn split_cmd(args: &SplitArgs, globals: &Globals) -> Result<()> {
    let input = pick_channel(read_inputs(std::slice::from_ref(&args.input), args.duration)?, args.channel)?;
    let seed = globals.seed();
    let parts = split_stream(&input, args.m, seed)?;
    let mut out = globals.output()?;
    write_channels(&mut out, "split_", globals.format().tag_format(), &parts)?;
    let settings = json!({
        "input": args.input,
        "m": args.m,
        "channels": stream_summary(&parts),
    });
    out.write_manifest("split", seed, settings)
}

pub fn calibrate_cmd(args: &CalibrateArgs, globals: &Globals) -> Result<()> {
    let input = pick_channel(read_inputs(std::slice::from_ref(&args.input), args.duration)?, args.channel)?;
    let options = CalibrationOptions {
        bin_ps: args.bin_ps,
        t_min: args.t_min,
        smooth: !args.no_smooth,
    };
    let cal = calibrate(&input, &options)?;
    let mut out = globals.output()?;
    out.write_with("ter.csv", |w| cal.ter.write_csv(w))?;
    out.write_with("histogram.csv", |w| cal.histogram.write_csv(w))?;
    let fit: Value = serde_json::from_str(&cal.fit.to_json()).expect("fit json is well formed");
    let summary = json!({
        "fit": fit,
        "eta_inf": cal.ter.eta_inf(),
        "t_d_estimate_s": cal.t_d_estimate,
        "recovery_time_s": cal.ter.recovery_time(),
        "warnings": cal.warnings,
    });
    out.write_json("fit.json", &summary)?;
    for w in &cal.warnings {
        eprintln!("warning: {w}");
    }
    let settings = json!({
        "input": args.input,
        "channel": input.channel(),
        "bin_ps": args.bin_ps,
        "t_min": args.t_min,
        "smooth": !args.no_smooth,
    });
    out.write_manifest("calibrate", globals.seed(), settings)
}

pub fn correlate_cmd(args: &CorrelateArgs, globals: &Globals) -> Result<()> {
    let streams = read_inputs(&args.inputs, args.duration)?;
    let n = args.order as usize;
    if n < 2 {
        return Err(CliError::invalid("order: must be at least 2"));
    }
    if streams.len() < n {
        return Err(CliError::invalid(format!(
            "order: {n}-fold correlation needs {n} channels, the inputs hold {}",
            streams.len()
        )));
    }
    let used: Vec<&TimeTagStream> = streams.iter().take(n).collect();
    let mut out = globals.output()?;
    match n {
        2 => {
            let h = g2_histogram(used[0], used[1], args.bin_ps, args.max_tau_ps)?;
            out.write_with("g2.csv", |w| h.write_csv(w))?;
        }
        3 => {
            let h = g3_surface(used[0], used[1], used[2], args.bin_ps, args.max_tau_ps)?;
            out.write_with("g3.csv", |w| h.write_csv(w))?;
        }
        _ => {}
    }
    let estimate = gn_zero(&used, args.bin_ps)?;
    let summary = json!({
        "channels": used.iter().map(|s| s.channel()).collect::<Vec<_>>(),
        "singles": used.iter().map(|s| s.rate()).collect::<Vec<_>>(),
        "duration_s": used[0].duration_s(),
        "zero_delay": estimate.to_json(),
    });
    out.write_json("summary.json", &summary)?;
    println!("g{n}(0) = {:.5} ± {:.5}", estimate.value, estimate.stderr);
    let settings = json!({
        "inputs": args.inputs,
        "order": n,
        "bin_ps": args.bin_ps,
        "max_tau_ps": args.max_tau_ps,
    });
    out.write_manifest("correlate", globals.seed(), settings)
}

/// Efficiency curve either from a file or solved for the given detector,
/// spanning enough range for the thermal average at `mean_rate`.
fn efficiency_for(args: &PredictArgs) -> Result<EfficiencyCurve> {
    if let Some(path) = &args.efficiency {
        let file = File::open(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        return EfficiencyCurve::read_csv(BufReader::new(file)).map_err(|source| CliError::Input {
            path: path.clone(),
            source,
        });
    }
    let spec = args
        .detector
        .spec()
        .ok_or_else(|| CliError::invalid("predict: pass --efficiency or a detector (--dead-time, --ter, --reference-ter)"))?;
    let ter = spec.ter()?;
    let r_max = if ter.is_tabulated() {
        terlab::detector::TABULATED_RATE_CEILING * 0.99
    } else {
        // the solver's 1 ps step bounds the usable rate
        5e10
    };
    Ok(poisson_efficiency_curve(&ter, 1.0, r_max, 241)?)
}

pub fn predict_cmd(args: &PredictArgs, globals: &Globals) -> Result<()> {
    if args.orders.is_empty() || args.orders.iter().any(|&n| n < 2) {
        return Err(CliError::invalid("orders: need one or more orders, each at least 2"));
    }
    let eff = efficiency_for(args)?;
    let mean_rate = match (args.mean_rate, args.detected_rate) {
        (Some(mu), None) => mu,
        (None, Some(r)) => correlator::mean_rate_for_detected(&eff, r)?,
        _ => return Err(CliError::invalid("predict: pass exactly one of --mean-rate or --detected-rate")),
    };
    let detected = predicted_detected_rate(&eff, mean_rate)?;
    let mut values = serde_json::Map::new();
    for &n in &args.orders {
        let g = predict_gn_zero(&eff, mean_rate, n)?;
        println!("g{n}(0) = {g:.5}");
        values.insert(n.to_string(), json!(g));
    }
    let mut out = globals.output()?;
    let result = json!({
        "mean_rate": mean_rate,
        "detected_rate": detected,
        "gn_zero": values,
    });
    out.write_json("prediction.json", &result)?;
    if args.efficiency.is_none() {
        out.write_with("efficiency.csv", |w| eff.write_csv(w))?;
    }
    let settings = json!({
        "efficiency": args.efficiency,
        "detector": args.detector.spec(),
        "orders": args.orders,
        "efficiency_range": [eff.r_min(), eff.r_max()],
    });
    out.write_manifest("predict", globals.seed(), settings)
}
