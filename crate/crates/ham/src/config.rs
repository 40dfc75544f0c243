//! Run configuration: an optional TOML file overlaid by command-line flags.
//!
//! Every field is optional so that "not given" is distinguishable from a
//! default; flags win over the file. The effective configuration is written
//! next to the outputs and can be fed back through `--config`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::sim::{EstimatorKind, Heterogeneity, Scenario, Spread};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FitEstimator {
    Ham,
    Mle,
    Fe,
    Ridge,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standardize: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emit_plot_data: Option<bool>,

    // Selection.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator: Option<FitEstimator>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    /// Selects with the flipped pseudo-MSE correction sign.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flipped_pseudo_sign: Option<bool>,

    // Simulation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setting: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heterogeneity: Option<Heterogeneity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spread: Option<Spread>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    /// Substrings; a cell runs when its label contains any of them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimators: Option<Vec<EstimatorKind>>,

    // Verification.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suites: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency_replicates: Option<usize>,
    /// Fault-injection hook for the verification suites.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inject_pseudo_sign_flip: Option<bool>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($f:ident),* $(,)?) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// `self` with every field set in `top` replaced.
    pub fn overlay(mut self, top: RunConfig) -> Self {
        overlay!(self, top; input, synthetic, output_dir, seed, threads, alpha, standardize, emit_plot_data,
            estimator, restarts, tolerance, max_iterations, flipped_pseudo_sign,
            setting, heterogeneity, k, p, n, scenario, spread, reps, cells, estimators,
            suites, instances, calibration_replicates, consistency_replicates, inject_pseudo_sign_flip);
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data serializes")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("ham-out"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(0.05)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_echo_round_trips() {
        let file: RunConfig = toml::from_str("seed = 3\nalpha = 0.1\nreps = 10\nheterogeneity = \"mild\"\n").unwrap();
        let flags = RunConfig {
            seed: Some(9),
            ..Default::default()
        };
        let eff = file.overlay(flags);
        assert_eq!((eff.seed(), eff.alpha(), eff.reps), (9, 0.1, Some(10)));
        let back: RunConfig = toml::from_str(&eff.to_toml()).unwrap();
        assert_eq!(back, eff);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 3").is_err());
    }
}
