//! Configuration ingestion: one JSON document holding the channel and the
//! problem parameters, with optional solver tolerance overrides.

use std::path::Path;

use serde::Deserialize;

use linksched::{ChannelModel, ProblemConfig};

use crate::CliError;

/// On-disk schema. Unknown fields are rejected so typos surface as parse
/// errors with field context.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    transition: Vec<Vec<f64>>,
    powers: Vec<f64>,
    arrival_rate: f64,
    buffer_size: usize,
    power_budget: f64,
    #[serde(default)]
    discount: Option<f64>,
    #[serde(default)]
    vi_tolerance: Option<f64>,
    #[serde(default)]
    bisection_tolerance: Option<f64>,
    #[serde(default)]
    lp_tolerance: Option<f64>,
}

/// Resolved run inputs.
pub struct RunSpec {
    pub model: ChannelModel,
    pub config: ProblemConfig,
}

pub fn load(path: &Path, epsilon_override: Option<f64>) -> Result<RunSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let raw: RawConfig = serde_json::from_str(&text).map_err(|e| {
        CliError::Invalid(format!(
            "{}: parse error at line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;

    let model = ChannelModel::new(raw.transition, raw.powers)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let power_budget = epsilon_override.unwrap_or(raw.power_budget);
    let mut config = ProblemConfig::new(raw.arrival_rate, raw.buffer_size, power_budget)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    if let Some(discount) = raw.discount {
        config.discount = discount;
    }
    if let Some(t) = raw.vi_tolerance {
        config.vi_tolerance = t;
    }
    if let Some(t) = raw.bisection_tolerance {
        config.bisection_tolerance = t;
    }
    if let Some(t) = raw.lp_tolerance {
        config.lp_tolerance = t;
    }
    config
        .validate()
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;

    Ok(RunSpec { model, config })
}
