//! Run configuration: TOML file, documented defaults, CLI overrides.
//!
//! Every knob the pipeline consumes lives here, so the resolved config
//! echoed into the output directory is a complete provenance record. One
//! master seed fans out to stage seeds by name (`synth`, `split`,
//! `train:<model>:<mode>`, `ci:...`), which is why `synth.seed` in a file
//! is overwritten on resolve.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gsr_core::dsp::PreprocessConfig;
use gsr_core::error::{Error, Result};
use gsr_core::eval::{ExperimentConfig, TrainKnobs};
use gsr_core::ingest::{SourceTag, SynthConfig};
use gsr_core::models::{
    CnnParams, FeatureMode, ForestParams, GbdtParams, KnnParams, LstmParams, MlpParams,
    ModelFamily,
};
use gsr_core::seed::derive_seed;
use gsr_core::windowing::WindowConfig;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "GSR_OUT_DIR";

/// Output directory used when neither config, flag nor environment names
/// one.
pub const DEFAULT_OUT_DIR: &str = "gsr-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormatName {
    Json,
    Md,
    Csv,
}

/// The full run configuration. A config file may set any subset; omitted
/// keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every randomized stage derives its own seed from it.
    pub seed: u64,
    pub families: Vec<ModelFamily>,
    pub modes: Vec<FeatureMode>,
    pub split_fractions: [f64; 3],
    pub bootstrap_iterations: usize,
    pub confidence_level: f64,
    pub preprocess: PreprocessConfig,
    pub window: WindowConfig,
    pub train: TrainKnobs,
    pub knn: KnnParams,
    pub forest: ForestParams,
    pub gbdt: GbdtParams,
    pub mlp: MlpParams,
    pub cnn: CnnParams,
    pub lstm: LstmParams,
    /// Synthetic cohort shape; its `seed` is replaced by the master-seed
    /// fan-out when the config resolves.
    pub synth: SynthConfig,
    /// Subject data files (`.csv` or `.xml`). Empty means synthetic.
    pub inputs: Vec<PathBuf>,
    /// How csv inputs are laid out: `long` (timestamp,channel,value) or
    /// `wide` (timestamp,glucose,gsr).
    pub csv_layout: CsvLayoutName,
    /// Provenance tag attached to ingested subjects.
    pub source_tag: SourceTag,
    pub out_dir: Option<PathBuf>,
    pub formats: Vec<ReportFormatName>,
    /// Use the synthetic cohort even when `inputs` is non-empty.
    pub synthetic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvLayoutName {
    Long,
    Wide,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            families: ModelFamily::all().to_vec(),
            modes: vec![FeatureMode::Sequence, FeatureMode::Static],
            split_fractions: [0.8, 0.1, 0.1],
            bootstrap_iterations: 1000,
            confidence_level: 0.95,
            preprocess: PreprocessConfig::default(),
            window: WindowConfig::default(),
            train: TrainKnobs::default(),
            knn: KnnParams::default(),
            forest: ForestParams::default(),
            gbdt: GbdtParams::default(),
            mlp: MlpParams::default(),
            cnn: CnnParams::default(),
            lstm: LstmParams::default(),
            synth: SynthConfig::default(),
            inputs: Vec::new(),
            csv_layout: CsvLayoutName::Long,
            source_tag: SourceTag::Cohort2018,
            out_dir: None,
            formats: vec![
                ReportFormatName::Json,
                ReportFormatName::Md,
                ReportFormatName::Csv,
            ],
            synthetic: false,
        }
    }
}

/// Values taken from command-line flags; any `Some` wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub models: Option<Vec<ModelFamily>>,
    pub modes: Option<Vec<FeatureMode>>,
    pub synthetic: bool,
    pub inputs: Vec<PathBuf>,
}

impl RunConfig {
    /// The slice of this config the core experiment runner consumes.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            families: self.families.clone(),
            modes: self.modes.clone(),
            preprocess: self.preprocess.clone(),
            window: self.window.clone(),
            split_fractions: self.split_fractions,
            seed: self.seed,
            bootstrap_iterations: self.bootstrap_iterations,
            confidence_level: self.confidence_level,
            train: self.train.clone(),
            knn: self.knn,
            forest: self.forest,
            gbdt: self.gbdt,
            mlp: self.mlp,
            cnn: self.cnn,
            lstm: self.lstm,
        }
    }

    /// True when this run draws its cohort from the synthetic generator.
    pub fn uses_synthetic(&self) -> bool {
        self.synthetic || self.inputs.is_empty()
    }

    /// Output directory after the flag > config > environment > default
    /// cascade. The flag and config precedence is applied in
    /// [`load_config`]; this resolves the remaining fallbacks.
    pub fn resolved_out_dir(&self) -> PathBuf {
        if let Some(dir) = &self.out_dir {
            return dir.clone();
        }
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from(DEFAULT_OUT_DIR)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        let sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|&f| !(f > 0.0 && f < 1.0))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split_fractions {:?} must each lie in (0, 1) and sum to 1",
                self.split_fractions
            )));
        }
        if self.formats.is_empty() {
            return Err(Error::Config("formats must not be empty".into()));
        }
        Ok(())
    }
}

/// Load the config file (if any), apply defaults and CLI overrides, then
/// derive the stage seeds. Flags always win over file values.
pub fn load_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg: RunConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &ov.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(models) = &ov.models {
        cfg.families = models.clone();
    }
    if let Some(modes) = &ov.modes {
        cfg.modes = modes.clone();
    }
    if ov.synthetic {
        cfg.synthetic = true;
    }
    if !ov.inputs.is_empty() {
        cfg.inputs = ov.inputs.clone();
    }
    if cfg.seed > i64::MAX as u64 {
        return Err(Error::Config(
            "seed must be at most 2^63 - 1 so the resolved config can round-trip through TOML"
                .into(),
        ));
    }
    // Masked to 63 bits for the same TOML round-trip reason.
    cfg.synth.seed = derive_seed(cfg.seed, "synth") & (i64::MAX as u64);
    cfg.validate()?;
    Ok(cfg)
}

/// Serialize the fully-resolved config for the provenance echo.
pub fn render_resolved(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("cannot render resolved config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp_config(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_config_equals_documented_defaults() {
        let f = write_temp_config("");
        let cfg = load_config(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(cfg.split_fractions, [0.8, 0.1, 0.1]);
        assert_eq!(cfg.window.width, 12);
        assert_eq!(cfg.window.stride, 1);
        assert_eq!(cfg.window.label_threshold, 70.0);
        assert_eq!(cfg.preprocess.iqr_k, 1.5);
        assert_eq!(cfg.preprocess.filter.order, 2);
        assert_eq!(cfg.preprocess.filter.cutoff, 0.1);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.families.len(), 7);
        let fileless = load_config(None, &Overrides::default()).unwrap();
        assert_eq!(cfg, fileless);
    }

    #[test]
    fn flags_override_file_values() {
        let f = write_temp_config("split_fractions = [0.7, 0.2, 0.1]\nseed = 3\n");
        let ov = Overrides {
            seed: Some(11),
            models: Some(vec![ModelFamily::Lstm, ModelFamily::Cnn]),
            ..Overrides::default()
        };
        let cfg = load_config(Some(f.path()), &ov).unwrap();
        assert_eq!(cfg.split_fractions, [0.7, 0.2, 0.1]);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.families, vec![ModelFamily::Lstm, ModelFamily::Cnn]);
        assert_eq!(cfg.synth.seed, derive_seed(11, "synth") & (i64::MAX as u64));
    }

    #[test]
    fn unknown_key_is_a_config_error_listing_fields() {
        let f = write_temp_config("widht = 12\n");
        let err = load_config(Some(f.path()), &Overrides::default()).unwrap_err();
        match err {
            Error::Config(msg) => {
                assert!(msg.contains("widht"), "{msg}");
                assert!(msg.contains("expected one of"), "{msg}");
            }
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let f = write_temp_config("split_fractions = [0.8, 0.1, 0.2]\n");
        assert!(matches!(
            load_config(Some(f.path()), &Overrides::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn family_names_match_report_keys() {
        let f = write_temp_config("families = [\"lr\", \"rf\", \"gbdt\"]\n");
        let cfg = load_config(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(
            cfg.families,
            vec![ModelFamily::Logreg, ModelFamily::RandomForest, ModelFamily::Gbdt]
        );
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = load_config(None, &Overrides::default()).unwrap();
        let text = render_resolved(&cfg).unwrap();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, cfg);
        for key in [
            "seed", "families", "modes", "split_fractions", "bootstrap_iterations",
            "confidence_level", "[preprocess]", "[window]", "[train]", "[synth]",
        ] {
            assert!(text.contains(key), "resolved config lacks {key}:\n{text}");
        }
    }
}
