//! Experiment configuration: one TOML file describes the dataset, the flow,
//! the training schedule, and the output layout. Every run echoes its fully
//! resolved config back out, and feeding the echo in reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use altflow::data::{self, Dataset, SyntheticSpec};
use altflow::error::{Error, Result};
use altflow::evaluation::final_half_window;
use altflow::flow::FlowConfig;
use altflow::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Generated in-process from a spec; the generative density is known.
    Synthetic {
        #[serde(default)]
        synthetic: SyntheticSpec,
    },
    /// Externally extracted feature tensors via a dataset manifest.
    Features { manifest: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub depth: usize,
    /// Subnet hidden width; defaults to twice the channel count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_width: Option<usize>,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            depth: 2,
            hidden_width: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Inclusive epoch window for stability summaries; defaults to the
    /// final half of training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Epoch period of pooled KS snapshots during training.
    pub cadence_epochs: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection { cadence_epochs: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointSection {
    /// Epoch period for intermediate checkpoints; 0 writes only the final.
    pub cadence_epochs: usize,
}

impl Default for CheckpointSection {
    fn default() -> Self {
        CheckpointSection { cadence_epochs: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("altflow-out"),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

/// Top-level experiment description. Field order matters for the TOML echo:
/// plain values (`seeds`) must precede the tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed list for multi-seed commands (compare, sweep-depth).
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub checkpoints: CheckpointSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid_spec("config: seeds must be nonempty"));
        }
        if self.flow.depth == 0 {
            return Err(Error::invalid_spec("config: flow.depth must be >= 1"));
        }
        if self.flow.hidden_width == Some(0) {
            return Err(Error::invalid_spec("config: flow.hidden_width must be >= 1"));
        }
        if self.diagnostics.cadence_epochs == 0 {
            return Err(Error::invalid_spec(
                "config: diagnostics.cadence_epochs must be >= 1",
            ));
        }
        self.train.validate()?;
        if let DatasetConfig::Synthetic { synthetic } = &self.dataset {
            synthetic.validate()?;
        }
        if let Some((start, end)) = self.eval.window {
            if start > end || end >= self.train.epochs {
                return Err(Error::invalid_spec(format!(
                    "config: eval window ({start}, {end}) must be inclusive and end before epoch {}",
                    self.train.epochs
                )));
            }
        }
        Ok(())
    }

    pub fn eval_window(&self) -> (usize, usize) {
        self.eval
            .window
            .unwrap_or_else(|| final_half_window(self.train.epochs))
    }

    pub fn flow_config(&self, channels: usize) -> FlowConfig {
        FlowConfig::new(
            channels,
            self.flow.depth,
            self.flow.hidden_width.unwrap_or(2 * channels),
        )
    }

    /// Materialize the dataset; synthetic sources also hand back their spec
    /// so oracle scoring stays possible.
    pub fn build_dataset(&self, config_dir: &Path) -> Result<(Dataset, Option<SyntheticSpec>)> {
        match &self.dataset {
            DatasetConfig::Synthetic { synthetic } => {
                Ok((data::generate(synthetic)?, Some(synthetic.clone())))
            }
            DatasetConfig::Features { manifest } => {
                let path = if manifest.is_absolute() {
                    manifest.clone()
                } else {
                    config_dir.join(manifest)
                };
                Ok((data::load_features(path)?, None))
            }
        }
    }
}

/// Command-line overrides; every flag has a config-file equivalent and wins
/// over it.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub no_altub: bool,
    pub stereotype: bool,
    pub freezing_interval: Option<usize>,
    pub eta2_max: Option<f64>,
    pub depth: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.seeds = vec![seed];
        }
        if self.no_altub {
            cfg.train.altub_enabled = false;
        }
        if self.stereotype {
            cfg.train.stereotype_mode = true;
            cfg.train.altub_enabled = false;
        }
        if let Some(fi) = self.freezing_interval {
            cfg.train.freezing_interval = fi;
        }
        if let Some(e2) = self.eta2_max {
            cfg.train.eta2_max = e2;
        }
        if let Some(d) = self.depth {
            cfg.flow.depth = d;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
    }
}

/// Read, override, and validate a config in one step. The returned config
/// is fully resolved: echoing it reproduces the run without the flags.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text =
        fs::read_to_string(path).map_err(|_| {
            Error::invalid_spec(format!("config: cannot read {}", path.display()))
        })?;
    let mut cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::invalid_spec(format!("config {}: {e}", path.display())))?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub fn echo_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serialization is infallible")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> &'static str {
        "[dataset]\nsource = \"synthetic\"\n"
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.flow.depth, 2);
        assert_eq!(cfg.train.eta2_max, 0.05);
        assert_eq!(cfg.diagnostics.cadence_epochs, 10);
        match cfg.dataset {
            DatasetConfig::Synthetic { ref synthetic } => {
                assert_eq!(synthetic.channels, 4);
            }
            _ => panic!("expected synthetic"),
        }
    }

    #[test]
    fn echo_round_trips_exactly() {
        let text = "seeds = [9]\n\n[dataset]\nsource = \"synthetic\"\n\n[dataset.synthetic]\nseed = 3\nchannels = 2\n\n[train]\nepochs = 4\nwarmup_epochs = 1\n";
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        let echo = echo_toml(&cfg);
        let back: ExperimentConfig = toml::from_str(&echo).unwrap();
        assert_eq!(cfg, back);
        // echo of the echo is a fixed point
        assert_eq!(echo, echo_toml(&back));
    }

    #[test]
    fn partial_synthetic_tables_inherit_defaults() {
        let text = "[dataset]\nsource = \"synthetic\"\n[dataset.synthetic]\nchannels = 2\n";
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        match cfg.dataset {
            DatasetConfig::Synthetic { synthetic } => {
                assert_eq!(synthetic.channels, 2);
                assert_eq!(synthetic.height, 8);
                assert_eq!(synthetic.latent_mean, 2.0);
            }
            _ => panic!("expected synthetic"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = "[dataset]\nsource = \"synthetic\"\n[train]\nlearning_rate = 0.1\n";
        assert!(toml::from_str::<ExperimentConfig>(text).is_err());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut cfg: ExperimentConfig = toml::from_str(minimal_toml()).unwrap();
        assert!(cfg.train.altub_enabled);
        let ov = Overrides {
            seed: Some(42),
            no_altub: true,
            depth: Some(6),
            eta2_max: Some(0.2),
            freezing_interval: Some(7),
            out: Some(PathBuf::from("elsewhere")),
            ..Overrides::default()
        };
        ov.apply(&mut cfg);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.seeds, vec![42]);
        assert!(!cfg.train.altub_enabled);
        assert_eq!(cfg.flow.depth, 6);
        assert_eq!(cfg.train.eta2_max, 0.2);
        assert_eq!(cfg.train.freezing_interval, 7);
        assert_eq!(cfg.output.dir, PathBuf::from("elsewhere"));
        cfg.validate().unwrap();
    }

    #[test]
    fn stereotype_override_clears_the_alternating_flag() {
        let mut cfg: ExperimentConfig = toml::from_str(minimal_toml()).unwrap();
        let ov = Overrides {
            stereotype: true,
            ..Overrides::default()
        };
        ov.apply(&mut cfg);
        assert!(cfg.train.stereotype_mode);
        assert!(!cfg.train.altub_enabled);
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_windows_are_rejected() {
        let text = "[dataset]\nsource = \"synthetic\"\n[train]\nepochs = 10\n[eval]\nwindow = [8, 12]\n";
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert!(cfg.validate().is_err());

        let text = "[dataset]\nsource = \"synthetic\"\n[train]\nepochs = 10\n";
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.eval_window(), (5, 9));
    }

    #[test]
    fn features_source_parses() {
        let text = "[dataset]\nsource = \"features\"\nmanifest = \"sets/run1/manifest.json\"\n";
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        match cfg.dataset {
            DatasetConfig::Features { manifest } => {
                assert_eq!(manifest, PathBuf::from("sets/run1/manifest.json"));
            }
            _ => panic!("expected features"),
        }
    }
}
