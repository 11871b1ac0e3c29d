//! Run configuration: one JSON document describing the source, detector,
//! measurement settings and analysis parameters.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::{ArmLayout, ClusterParams};
use crate::source::SourceConfig;
use crate::spatial::GridParams;
use crate::synth::{BasisPlane, DetectorConfig, MeasurementSetting, TOMOGRAPHY_LABELS};
use crate::tomo::Weighting;

pub const SCHEMA_VERSION: u32 = 1;

/// A measurement setting given either by a two-letter label or in full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SettingSpec {
    Label(String),
    Full(MeasurementSetting),
}

impl SettingSpec {
    pub fn resolve(&self, plane: BasisPlane) -> Result<MeasurementSetting> {
        match self {
            SettingSpec::Label(l) => MeasurementSetting::from_label(l, plane),
            SettingSpec::Full(s) => Ok(MeasurementSetting {
                basis_plane: plane,
                ..s.clone()
            }),
        }
    }
}

fn default_settings() -> Vec<SettingSpec> {
    TOMOGRAPHY_LABELS.iter().map(|l| SettingSpec::Label(l.to_string())).collect()
}

fn default_near_field_settings() -> Vec<SettingSpec> {
    ["HH", "HV", "VH", "VV"].iter().map(|l| SettingSpec::Label(l.to_string())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineParams {
    pub cluster: ClusterParams,
    pub window_ns: u64,
    /// Idler delay used for the accidental-coincidence estimate.
    pub accidental_offset_ns: i64,
    /// Minimum coincidences for a tomography cell to be valid.
    pub min_counts: u64,
    pub n_bootstrap: usize,
    pub weighting: Weighting,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            cluster: ClusterParams::default(),
            window_ns: 10,
            accidental_offset_ns: 1000,
            min_counts: 100,
            n_bootstrap: 100,
            weighting: Weighting::Counts,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory holding event files for the analysis commands; defaults to
    /// the output directory.
    pub events_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; overrides `detector.seed`.
    pub seed: u64,
    pub source: SourceConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    /// Far-field polarization settings (the tomography set).
    #[serde(default = "default_settings")]
    pub settings: Vec<SettingSpec>,
    /// Near-field settings; summed to form the position-basis matrix.
    #[serde(default = "default_near_field_settings")]
    pub near_field_settings: Vec<SettingSpec>,
    #[serde(default)]
    pub grid: GridParams,
    #[serde(default)]
    pub pipeline: PipelineParams,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            source: SourceConfig::default(),
            detector: DetectorConfig::default(),
            settings: default_settings(),
            near_field_settings: default_near_field_settings(),
            grid: GridParams::default(),
            pipeline: PipelineParams::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.source.validate()?;
        self.detector().validate()?;
        for (plane, specs) in [
            (BasisPlane::FarField, &self.settings),
            (BasisPlane::NearField, &self.near_field_settings),
        ] {
            let mut seen = HashSet::new();
            for s in specs {
                let s = s.resolve(plane)?;
                if !seen.insert(s.label.clone()) {
                    return Err(Error::Config(format!("duplicate setting label {:?}", s.label)));
                }
                if s.label.is_empty() || !s.label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                    return Err(Error::Config(format!("setting label {:?} must be alphanumeric", s.label)));
                }
            }
        }
        if self.pipeline.window_ns == 0 {
            return Err(Error::Config("coincidence window must be positive".into()));
        }
        if self.pipeline.accidental_offset_ns.unsigned_abs() <= self.pipeline.window_ns {
            return Err(Error::Config("accidental offset must exceed the coincidence window".into()));
        }
        Ok(())
    }

    /// Detector configuration with the master seed applied.
    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            seed: self.seed,
            ..self.detector.clone()
        }
    }

    pub fn layout(&self) -> ArmLayout {
        ArmLayout {
            signal_roi: self.detector.signal_roi,
            idler_roi: self.detector.idler_roi,
        }
    }

    pub fn far_field_settings(&self) -> Result<Vec<MeasurementSetting>> {
        self.settings.iter().map(|s| s.resolve(BasisPlane::FarField)).collect()
    }

    pub fn near_field_settings(&self) -> Result<Vec<MeasurementSetting>> {
        self.near_field_settings.iter().map(|s| s.resolve(BasisPlane::NearField)).collect()
    }

    /// Every acquisition of the run, far field first.
    pub fn all_settings(&self) -> Result<Vec<MeasurementSetting>> {
        let mut v = self.far_field_settings()?;
        v.extend(self.near_field_settings()?);
        Ok(v)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"schema_version": 1, "seed": 3, "source": {"sigma_pump": 1e-3, "sigma_pm": 1e-2, "visibility": 0.9}}"#,
        )
        .unwrap();
        assert_eq!(cfg.detector().seed, 3);
        assert_eq!(cfg.far_field_settings().unwrap().len(), 16);
        assert_eq!(cfg.near_field_settings().unwrap()[0].basis_plane, BasisPlane::NearField);
        assert_eq!(cfg.pipeline.window_ns, 10);
    }

    #[test]
    fn schema_violations_are_rejected() {
        let base = r#""seed": 0, "source": {"sigma_pump": 1e-3, "sigma_pm": 1e-2, "visibility": 0.9}"#;
        assert!(RunConfig::from_json(&format!(r#"{{"schema_version": 2, {base}}}"#)).is_err());
        assert!(RunConfig::from_json(&format!(r#"{{"schema_version": 1, "bogus": 1, {base}}}"#)).is_err());
        assert!(RunConfig::from_json(&format!(r#"{{{base}}}"#)).is_err());
        assert!(RunConfig::from_json(&format!(r#"{{"schema_version": 1, "settings": ["HH", "HH"], {base}}}"#)).is_err());
        assert!(RunConfig::from_json(&format!(r#"{{"schema_version": 1, "settings": ["XY"], {base}}}"#)).is_err());
    }

    #[test]
    fn full_settings_are_accepted() {
        let mut cfg = RunConfig::default();
        let s = MeasurementSetting::from_label("DR", BasisPlane::FarField).unwrap();
        cfg.settings = vec![SettingSpec::Full(MeasurementSetting {
            label: "custom".into(),
            ..s
        })];
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.far_field_settings().unwrap()[0].label, "custom");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
