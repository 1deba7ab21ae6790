//! Experiment configuration files (TOML).
//!
//! Everything is validated up front: `ExperimentConfig::load` either
//! returns a config whose parameters all satisfy the library's
//! preconditions or a list of every offending field.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use terlab::detector::{heaviside_ter, DetectorConfig, TerCurve};
use terlab::{SourceKind, SourceModel};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Bin,
}

impl Format {
    pub fn tag_format(self) -> terlab::io::TagFormat {
        match self {
            Format::Csv => terlab::io::TagFormat::Csv,
            Format::Bin => terlab::io::TagFormat::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub kind: SourceKind,
    pub mean_rate: f64,
    /// Seconds; ignored for Poissonian light.
    #[serde(default)]
    pub correlation_time: f64,
}

impl SourceSpec {
    pub fn model(&self) -> terlab::Result<SourceModel> {
        SourceModel::new(self.kind, self.mean_rate, self.correlation_time)
    }
}

/// Exactly one of `dead_time`, `ter_file` or `reference` selects the curve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    /// Heaviside dead time in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dead_time: Option<f64>,
    /// Tabulated curve with header `dt_ps,eta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ter_file: Option<PathBuf>,
    /// The built-in smooth-recovery curve with a 43 ns half-recovery time.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reference: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_inf: Option<f64>,
    #[serde(default = "one")]
    pub intrinsic_efficiency: f64,
}

fn one() -> f64 {
    1.0
}

impl DetectorSpec {
    pub fn heaviside(dead_time: f64) -> Self {
        DetectorSpec {
            dead_time: Some(dead_time),
            intrinsic_efficiency: 1.0,
            ..Default::default()
        }
    }

    pub fn reference() -> Self {
        DetectorSpec {
            reference: true,
            intrinsic_efficiency: 1.0,
            ..Default::default()
        }
    }

    /// Loads or builds the TER curve.
    pub fn ter(&self) -> Result<TerCurve> {
        let chosen = [self.dead_time.is_some(), self.ter_file.is_some(), self.reference];
        if chosen.iter().filter(|&&c| c).count() != 1 {
            return Err(CliError::invalid(
                "detector: set exactly one of dead_time, ter_file or reference",
            ));
        }
        let mut ter = if let Some(t_d) = self.dead_time {
            heaviside_ter(t_d)?
        } else if let Some(path) = &self.ter_file {
            let file = fs::File::open(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            TerCurve::read_csv(BufReader::new(file), self.eta_inf).map_err(|source| CliError::Input {
                path: path.clone(),
                source,
            })?
        } else {
            TerCurve::reference()
        };
        if let Some(eta_inf) = self.eta_inf {
            ter = ter.with_eta_inf(eta_inf)?;
        }
        Ok(ter)
    }

    pub fn config(&self) -> Result<DetectorConfig> {
        Ok(DetectorConfig::new(self.ter()?, self.intrinsic_efficiency)?)
    }

    fn check(&self, prefix: &str, errors: &mut Vec<String>) {
        if let Err(e) = self.config() {
            errors.push(format!("{prefix}: {}", flatten(&e)));
        }
    }
}

/// One requested analysis for `sweep`. Output files are prefixed with the
/// analysis position so repeated kinds never collide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Analysis {
    /// Correlate the configured experiment's detector outputs.
    Correlation {
        #[serde(default = "default_orders")]
        orders: Vec<u32>,
        #[serde(default = "default_correlation_bin")]
        bin_ps: u64,
        #[serde(default = "default_max_tau")]
        max_tau_ps: u64,
    },
    /// Calibrate the TER from channel 0 of the configured experiment.
    Calibration {
        #[serde(default = "default_calibration_bin")]
        bin_ps: u64,
        #[serde(default)]
        t_min: Option<f64>,
        #[serde(default = "yes")]
        smooth: bool,
    },
    /// Detected rate against flux for several source models, from the
    /// solver, plus optional Monte Carlo checks.
    Saturation {
        sources: Vec<SourceKind>,
        correlation_time: f64,
        flux_min: f64,
        flux_max: f64,
        points: usize,
        #[serde(default)]
        mc_points: usize,
        #[serde(default)]
        detector: Option<DetectorSpec>,
    },
    /// Poissonian efficiency curve ε(R).
    Efficiency {
        r_min: f64,
        r_max: f64,
        points: usize,
        #[serde(default)]
        detector: Option<DetectorSpec>,
    },
    /// Low-rate calibration of the detector from simulated Poissonian light,
    /// compared with the true curve.
    TerExtraction {
        detected_rate: f64,
        events: f64,
        #[serde(default)]
        detector: Option<DetectorSpec>,
    },
    /// Thermal g⁽ⁿ⁾(0) against detected rate: simulation and prediction.
    Suppression {
        detected_rates: Vec<f64>,
        correlation_times: Vec<f64>,
        durations: Vec<f64>,
        #[serde(default = "four")]
        splitter_m: usize,
        #[serde(default = "default_orders_high")]
        orders: Vec<u32>,
        #[serde(default)]
        detector: Option<DetectorSpec>,
    },
    /// Summed-pair g⁽²⁾(0) of a detector array against array size.
    Array {
        incident_rate: f64,
        correlation_time: f64,
        m_values: Vec<usize>,
        duration_s: f64,
        bin_ps: u64,
        #[serde(default)]
        detector: Option<DetectorSpec>,
    },
}

fn default_orders() -> Vec<u32> {
    vec![2]
}
fn default_orders_high() -> Vec<u32> {
    vec![2, 3, 4]
}
fn default_correlation_bin() -> u64 {
    terlab::correlator::DEFAULT_BIN_PS
}
fn default_calibration_bin() -> u64 {
    terlab::calibration::DEFAULT_BIN_PS
}
fn default_max_tau() -> u64 {
    10_000
}
fn yes() -> bool {
    true
}
fn four() -> usize {
    4
}

impl Analysis {
    pub fn name(&self) -> &'static str {
        match self {
            Analysis::Correlation { .. } => "correlation",
            Analysis::Calibration { .. } => "calibration",
            Analysis::Saturation { .. } => "saturation",
            Analysis::Efficiency { .. } => "efficiency",
            Analysis::TerExtraction { .. } => "ter_extraction",
            Analysis::Suppression { .. } => "suppression",
            Analysis::Array { .. } => "array",
        }
    }

    fn check(&self, prefix: &str, needs_source: &mut bool, errors: &mut Vec<String>) {
        let mut err = |field: &str, msg: &str| errors.push(format!("{prefix}.{field}: {msg}"));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match self {
            Analysis::Correlation {
                orders,
                bin_ps,
                max_tau_ps,
            } => {
                *needs_source = true;
                if orders.is_empty() || orders.iter().any(|&n| n < 2) {
                    err("orders", "need one or more orders, each at least 2");
                }
                if *bin_ps == 0 {
                    err("bin_ps", "must be at least 1");
                }
                if max_tau_ps < bin_ps {
                    err("max_tau_ps", "must be at least bin_ps");
                }
            }
            Analysis::Calibration { bin_ps, t_min, .. } => {
                *needs_source = true;
                if *bin_ps == 0 {
                    err("bin_ps", "must be at least 1");
                }
                if t_min.is_some_and(|t| !positive(t)) {
                    err("t_min", "must be positive");
                }
            }
            Analysis::Saturation {
                sources,
                correlation_time,
                flux_min,
                flux_max,
                points,
                detector,
                ..
            } => {
                if sources.is_empty() {
                    err("sources", "list at least one source kind");
                }
                if !positive(*correlation_time) {
                    err("correlation_time", "must be positive");
                }
                if !(positive(*flux_min) && flux_max > flux_min && flux_max.is_finite()) {
                    err("flux_min", "need 0 < flux_min < flux_max");
                }
                if *points < 2 {
                    err("points", "need at least 2");
                }
                check_detector(detector, prefix, errors);
            }
            Analysis::Efficiency {
                r_min,
                r_max,
                points,
                detector,
            } => {
                if !(positive(*r_min) && r_max > r_min && r_max.is_finite()) {
                    err("r_min", "need 0 < r_min < r_max");
                }
                if *points < 2 {
                    err("points", "need at least 2");
                }
                check_detector(detector, prefix, errors);
            }
            Analysis::TerExtraction {
                detected_rate,
                events,
                detector,
            } => {
                if !positive(*detected_rate) {
                    err("detected_rate", "must be positive");
                }
                if !(events.is_finite() && *events >= 1e4) {
                    err("events", "need at least 1e4 events");
                }
                check_detector(detector, prefix, errors);
            }
            Analysis::Suppression {
                detected_rates,
                correlation_times,
                durations,
                splitter_m,
                orders,
                detector,
            } => {
                if detected_rates.is_empty() || !detected_rates.iter().all(|&r| positive(r)) {
                    err("detected_rates", "need one or more positive rates");
                }
                if correlation_times.len() != detected_rates.len() || !correlation_times.iter().all(|&t| positive(t)) {
                    err("correlation_times", "need one positive value per detected rate");
                }
                if durations.len() != detected_rates.len() || !durations.iter().all(|&t| positive(t)) {
                    err("durations", "need one positive value per detected rate");
                }
                if orders.is_empty() || orders.iter().any(|&n| n < 2 || n as usize > *splitter_m) {
                    err("orders", "every order must lie in 2..=splitter_m");
                }
                if !(2..=256).contains(splitter_m) {
                    err("splitter_m", "must lie in 2..=256");
                }
                check_detector(detector, prefix, errors);
            }
            Analysis::Array {
                incident_rate,
                correlation_time,
                m_values,
                duration_s,
                bin_ps,
                detector,
            } => {
                if !positive(*incident_rate) {
                    err("incident_rate", "must be positive");
                }
                if !positive(*correlation_time) {
                    err("correlation_time", "must be positive");
                }
                if m_values.is_empty() || m_values.iter().any(|&m| !(2..=256).contains(&m)) {
                    err("m_values", "need one or more values in 2..=256");
                }
                if !positive(*duration_s) {
                    err("duration_s", "must be positive");
                }
                if *bin_ps == 0 {
                    err("bin_ps", "must be at least 1");
                }
                check_detector(detector, prefix, errors);
            }
        }
    }
}

fn check_detector(detector: &Option<DetectorSpec>, prefix: &str, errors: &mut Vec<String>) {
    if let Some(d) = detector {
        d.check(&format!("{prefix}.detector"), errors);
    }
}

fn flatten(e: &CliError) -> String {
    match e {
        CliError::Validation(list) => list.join("; "),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "one_channel")]
    pub splitter_m: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_format")]
    pub format: Format,
    /// Multiplies every Monte Carlo duration in sweep analyses.
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorSpec>,
    #[serde(default)]
    pub analysis: Vec<Analysis>,
}

fn one_channel() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_format() -> Format {
    Format::Csv
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config { message, .. } => CliError::Config {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })
    }

    /// Checks every field; `needs_analysis` makes an empty analysis list an
    /// error.
    pub fn validate(&self, needs_analysis: bool) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            errors.push(format!("duration_s: must be positive, got {}", self.duration_s));
        }
        if !(1..=256).contains(&self.splitter_m) {
            errors.push(format!("splitter_m: must lie in 1..=256, got {}", self.splitter_m));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            errors.push(format!("scale: must be positive, got {}", self.scale));
        }
        if needs_analysis && self.analysis.is_empty() {
            errors.push("analysis: list at least one analysis".to_string());
        }
        let mut needs_source = !needs_analysis;
        for (i, a) in self.analysis.iter().enumerate() {
            a.check(&format!("analysis[{i}]"), &mut needs_source, &mut errors);
        }
        match &self.source {
            Some(s) => {
                if let Err(e) = s.model() {
                    errors.push(format!("source: {e}"));
                }
            }
            None if needs_source => errors.push("source: required".to_string()),
            None => {}
        }
        if let Some(d) = &self.detector {
            d.check("detector", &mut errors);
        }
        let detector_needed = self.analysis.iter().any(|a| match a {
            Analysis::Saturation { detector, .. }
            | Analysis::Efficiency { detector, .. }
            | Analysis::TerExtraction { detector, .. }
            | Analysis::Suppression { detector, .. }
            | Analysis::Array { detector, .. } => detector.is_none(),
            Analysis::Calibration { .. } => true,
            Analysis::Correlation { .. } => false,
        });
        if detector_needed && self.detector.is_none() {
            errors.push("detector: required by the requested analyses".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(errors))
        }
    }

    pub fn source_model(&self) -> Result<SourceModel> {
        match &self.source {
            Some(s) => Ok(s.model()?),
            None => Err(CliError::invalid("source: required")),
        }
    }

    /// The analysis' own detector, else the experiment's.
    pub fn detector_for<'a>(&'a self, own: &'a Option<DetectorSpec>) -> Result<&'a DetectorSpec> {
        own.as_ref()
            .or(self.detector.as_ref())
            .ok_or_else(|| CliError::invalid("detector: required"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
seed = 7
duration_s = 1.5
splitter_m = 2

[source]
kind = "thermal_bunched"
mean_rate = 1e5
correlation_time = 1e-6

[detector]
dead_time = 43e-9
"#;

    #[test]
    fn parses_and_validates() {
        let c = ExperimentConfig::parse(BASIC).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.format, Format::Csv);
        assert_eq!(c.source.as_ref().unwrap().kind, SourceKind::ThermalBunched);
        c.validate(false).unwrap();
        assert!(matches!(c.validate(true), Err(CliError::Validation(_))));
    }

    #[test]
    fn reports_every_bad_field() {
        let text = BASIC.replace("duration_s = 1.5", "duration_s = 0").replace("mean_rate = 1e5", "mean_rate = -1");
        let c = ExperimentConfig::parse(&text).unwrap();
        match c.validate(false) {
            Err(CliError::Validation(list)) => {
                assert!(list.iter().any(|m| m.starts_with("duration_s")), "{list:?}");
                assert!(list.iter().any(|m| m.starts_with("source")), "{list:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{BASIC}\nunknown = 1\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config { .. })));
    }

    #[test]
    fn detector_needs_exactly_one_curve() {
        let mut d = DetectorSpec::heaviside(43e-9);
        d.reference = true;
        assert!(d.ter().is_err());
        assert!(DetectorSpec::default().ter().is_err());
        assert!(DetectorSpec::reference().ter().unwrap().is_tabulated());
    }

    #[test]
    fn analysis_fields_are_checked() {
        let text = format!(
            "{BASIC}\n[[analysis]]\nkind = \"correlation\"\norders = [1]\n\n[[analysis]]\nkind = \"array\"\nincident_rate = 1e7\ncorrelation_time = 1e-6\nm_values = [1]\nduration_s = 0.1\nbin_ps = 1000\n"
        );
        let c = ExperimentConfig::parse(&text).unwrap();
        match c.validate(true) {
            Err(CliError::Validation(list)) => {
                assert!(list.iter().any(|m| m.starts_with("analysis[0].orders")), "{list:?}");
                assert!(list.iter().any(|m| m.starts_with("analysis[1].m_values")), "{list:?}");
            }
            other => panic!("{other:?}"),
        }
    }
}
