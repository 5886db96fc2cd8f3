//! Run configuration: one TOML document covering every stage.
//!
//! Every field has a default, so an empty document is a valid configuration
//! with the published sampler settings and priors. Relative paths resolve
//! against the directory holding the configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ActivityThresholds;
use crate::io;
use crate::mem::MemSettings;
use crate::predict::{SexMode, Thresholds};
use crate::preprocess::DEFAULT_VARIANCE_FLOOR;
use crate::rfm::{RfmPriors, RfmSettings};
use crate::simgen::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Minute-level accelerometry; when absent, `days` is read instead.
    pub minutes: Option<PathBuf>,
    /// Day-level accelerometry (the ingest output format).
    pub days: PathBuf,
    pub participants: PathBuf,
    pub panels: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            minutes: None,
            days: "data/days.csv".into(),
            participants: "data/participants.csv".into(),
            panels: "data/panels.csv".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSettings {
    pub variance_floor: f64,
    pub optimizer_max_iters: u64,
    pub optimizer_tolerance: f64,
    /// Equalize risk factors by survey weight before modeling.
    pub survey_weights: bool,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        Self {
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            optimizer_max_iters: 1000,
            optimizer_tolerance: 1e-9,
            survey_weights: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectHSettings {
    pub components: Vec<usize>,
    /// Sampler settings for the scan; `rfm` settings when absent.
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
}

impl Default for SelectHSettings {
    fn default() -> Self {
        Self {
            components: (1..=6).collect(),
            iterations: None,
            burn_in: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSettings {
    pub thresholds: Thresholds,
    pub grid_max: f64,
    pub grid_step: f64,
    /// Sex used for sex-specific cut points; the female share of the risk
    /// factor cohort when absent.
    pub sex: Option<SexMode>,
    /// Simulated risk factor vectors per draw and grid point for the
    /// R-or-more curves.
    pub samples: usize,
    /// Posterior draws used, evenly spaced over the retained draws;
    /// 0 uses all.
    pub max_draws: usize,
}

impl Default for PredictSettings {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            grid_max: 60.0,
            grid_step: 1.0,
            sex: None,
            samples: 2000,
            max_draws: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub activity: ActivityThresholds,
    pub preprocess: PreprocessSettings,
    pub mem: MemSettings,
    pub rfm: RfmSettings,
    pub priors: RfmPriors,
    pub select_h: SelectHSettings,
    pub predict: PredictSettings,
    pub simulate: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            paths: Paths::default(),
            activity: ActivityThresholds::default(),
            preprocess: PreprocessSettings::default(),
            mem: MemSettings::default(),
            rfm: RfmSettings::default(),
            priors: RfmPriors::default(),
            select_h: SelectHSettings::default(),
            predict: PredictSettings::default(),
            simulate: SimConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document; relative paths are taken
    /// relative to `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| format!(" at byte {}", s.start))
                .unwrap_or_default();
            Error::Config(format!("{}{at}", e.message()))
        })?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates a JSON document.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{e}")))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.json` document as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text, base)
        } else {
            Self::from_toml(&text, base)
        };
        parsed.map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        if let Some(m) = paths.minutes.as_mut() {
            fix(m);
        }
        fix(&mut paths.days);
        fix(&mut paths.participants);
        fix(&mut paths.panels);
        fix(&mut paths.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.mem.validate()?;
        self.rfm.validate()?;
        self.priors.validate()?;
        self.simulate.validate()?;
        let p = &self.preprocess;
        if !(p.variance_floor > 0.0) || p.optimizer_max_iters == 0 || !(p.optimizer_tolerance > 0.0) {
            return bad("preprocess: floor and tolerance must be positive, max iterations nonzero".into());
        }
        if self.activity.full_day_wear as usize > crate::ingest::MINUTES_PER_DAY || self.activity.nonwear_run == 0 {
            return bad("activity: full_day_wear must be at most 1440 and nonwear_run positive".into());
        }
        let s = &self.select_h;
        if s.components.is_empty() || s.components.contains(&0) {
            return bad("select_h.components must list at least one H ≥ 1".into());
        }
        self.scan_settings()
            .validate()
            .map_err(|e| Error::Config(format!("select_h: {e}")))?;
        let pr = &self.predict;
        if !(pr.grid_max >= 0.0) || !(pr.grid_step > 0.0) || pr.samples == 0 {
            return bad("predict: grid_max ≥ 0, grid_step > 0 and samples > 0 required".into());
        }
        if let Some(sex) = pr.sex {
            sex.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with `paths` reset, so the hash
    /// names the analysis rather than where it runs. Input identity is
    /// tracked separately through file digests in the stage manifests.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            paths: Paths::default(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("configuration serializes");
        io::sha256_hex(&json)
    }

    /// RFM settings for the DIC scan.
    pub fn scan_settings(&self) -> RfmSettings {
        RfmSettings {
            iterations: self.select_h.iterations.unwrap_or(self.rfm.iterations),
            burn_in: self.select_h.burn_in.unwrap_or(self.rfm.burn_in),
            ..self.rfm.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_published_defaults() {
        let cfg = RunConfig::from_toml("", Path::new("/base")).unwrap();
        assert_eq!(cfg.mem.chains, 8);
        assert_eq!(cfg.mem.iterations, 2000);
        assert_eq!(cfg.mem.burn_in, 1000);
        assert_eq!(cfg.rfm.chains, 3);
        assert_eq!(cfg.rfm.iterations, 1_000_000);
        assert_eq!(cfg.rfm.burn_in, 10_000);
        assert_eq!(cfg.rfm.thin, 5);
        assert_eq!(cfg.paths.output_dir, Path::new("/base/out"));
    }

    #[test]
    fn schema_violations_are_config_errors() {
        let unknown = RunConfig::from_toml("[mem]\nchainz = 3\n", Path::new(".")).unwrap_err();
        assert!(matches!(unknown, Error::Config(ref m) if m.contains("chainz")), "{unknown}");
        let burn = RunConfig::from_toml("[rfm]\niterations = 100\nburn_in = 100\n", Path::new(".")).unwrap_err();
        assert!(matches!(burn, Error::Config(_)));
        assert_eq!(burn.exit_code(), 2);
        let thin = RunConfig::from_toml("[rfm]\nthin = 0\n", Path::new(".")).unwrap_err();
        assert!(matches!(thin, Error::Config(_)));
        let h = RunConfig::from_toml("[rfm]\ncomponents = 0\n", Path::new(".")).unwrap_err();
        assert!(matches!(h, Error::Config(_)));
    }

    #[test]
    fn hash_ignores_layout_but_not_values() {
        let a = RunConfig::from_toml("seed = 5\n[mem]\nchains = 4\n", Path::new(".")).unwrap();
        let b = RunConfig::from_toml("[mem]\n\nchains   = 4\n\n[paths]\n", Path::new(".")).unwrap();
        let b = RunConfig { seed: 5, ..b };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 6, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn sex_mode_round_trips_through_toml() {
        let cfg = RunConfig::from_toml(
            "[predict.sex]\nmode = \"mixed\"\nfemale_fraction = 0.4\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(cfg.predict.sex, Some(SexMode::Mixed(0.4)));
        let male = RunConfig::from_toml("[predict.sex]\nmode = \"male\"\n", Path::new(".")).unwrap();
        assert_eq!(male.predict.sex, Some(SexMode::Male));
    }

    #[test]
    fn json_and_toml_documents_agree() {
        let t = RunConfig::from_toml("seed = 9\n[rfm]\ncomponents = 3\n", Path::new(".")).unwrap();
        let j = RunConfig::from_json(r#"{"seed": 9, "rfm": {"components": 3}}"#, Path::new(".")).unwrap();
        assert_eq!(t, j);
        assert!(matches!(
            RunConfig::from_json(r#"{"sede": 9}"#, Path::new(".")),
            Err(Error::Config(_))
        ));
    }
}
