//! Pipeline configuration: TOML file, then `key=value` overrides, then the
//! master seed fanned out to every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clf::GbtConfig;
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::io::CsvSchema;
use crate::lab::GridConfig;
use crate::rng::derive_seed;
use crate::text::EmbeddingConfig;
use crate::unet::UNetConfig;
use crate::vae::{VaeArch, VaeConfig};

/// Stages in execution order. The names double as seed-derivation keys and
/// as `--stage` values.
pub const STAGES: [&str; 10] = [
    "ingest", "tokenize", "embed", "vae", "unet", "cwgan", "quality", "pseudo", "grid", "final",
];

pub fn stage_index(name: &str) -> Result<usize> {
    STAGES
        .iter()
        .position(|s| *s == name)
        .ok_or_else(|| Error::Config(format!("unknown stage {name:?}; expected one of {}", STAGES.join(", "))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Labelled CSV files; empty means "generate the bundled corpus".
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Size of the generated corpus when no inputs are given.
    pub generate: usize,
    /// Cap on rows kept after ingest (0 keeps all).
    pub limit: usize,
    pub url_decode: bool,
    pub schema: CsvSchema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Toggles {
    pub unet: bool,
    pub cwgan: bool,
    pub quality: bool,
    pub pseudo: bool,
    pub grid: bool,
    pub final_model: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Rows drawn from each generator.
    pub unet_rows: usize,
    pub cwgan_rows: usize,
    pub noise_sigma: f64,
    /// Pairs scored by the quality reports.
    pub quality_pairs: usize,
    /// Label U-Net rows by clustering instead of inheriting the source label.
    pub pseudo_label_unet: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalConfig {
    /// Fraction of real rows held out for the final evaluation.
    pub test_fraction: f64,
    pub gbt: GbtConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub stages: Toggles,
    pub embedding: EmbeddingConfig,
    pub vae: VaeConfig,
    pub unet: UNetConfig,
    pub cwgan: GanConfig,
    pub synth: SynthConfig,
    pub grid: GridConfig,
    /// Model trained in every grid cell.
    pub grid_model: GbtConfig,
    #[serde(rename = "final")]
    pub final_model: FinalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: Paths {
                inputs: Vec::new(),
                out: PathBuf::from("run"),
            },
            corpus: CorpusConfig {
                generate: 5000,
                limit: 0,
                url_decode: true,
                schema: CsvSchema::default(),
            },
            stages: Toggles {
                unet: true,
                cwgan: true,
                quality: true,
                pseudo: true,
                grid: true,
                final_model: true,
            },
            embedding: EmbeddingConfig::default(),
            vae: VaeConfig::default(),
            unet: UNetConfig::default(),
            cwgan: GanConfig::default(),
            synth: SynthConfig {
                unet_rows: 1000,
                cwgan_rows: 1000,
                noise_sigma: crate::unet::DEFAULT_NOISE_SIGMA,
                quality_pairs: 500,
                pseudo_label_unet: true,
            },
            grid: GridConfig::default(),
            grid_model: GbtConfig::default(),
            final_model: FinalConfig {
                test_fraction: 0.2,
                gbt: GbtConfig::default(),
            },
        }
    }
}

impl PipelineConfig {
    /// Single-core desk profile: 2,000 generated queries, narrower VAE,
    /// lighter boosting in the grid and a 4×4 grid with 3 folds.
    pub fn desk() -> Self {
        let mut c = PipelineConfig::default();
        c.corpus.generate = 2000;
        c.vae = VaeConfig {
            arch: VaeArch::desk(),
            beta: 0.1,
            ..VaeConfig::default()
        };
        c.unet = UNetConfig {
            base_filters: 64,
            learning_rate: 3e-3,
            dropout: 0.03,
            epochs: 40,
            ..UNetConfig::default()
        };
        c.cwgan.epochs = 30;
        c.synth.unet_rows = 600;
        c.synth.cwgan_rows = 600;
        c.grid = GridConfig {
            p1: vec![0.25, 0.5, 0.75, 1.0],
            p2: vec![0.25, 0.5, 0.75, 1.0],
            k: 3,
            seed: 0,
        };
        c.grid_model.n_estimators = 60;
        c.final_model.gbt.n_estimators = 200;
        c
    }

    /// Seconds-scale profile for smoke and determinism tests.
    pub fn tiny() -> Self {
        let mut c = PipelineConfig::desk();
        c.corpus.generate = 240;
        c.embedding.epochs = 2;
        c.vae.arch = VaeArch {
            hidden1: 64,
            hidden2: 32,
            ..VaeArch::default()
        };
        c.vae.epochs = 2;
        c.unet.base_filters = 4;
        c.unet.epochs = 1;
        c.cwgan.gen_hidden = vec![32, 64];
        c.cwgan.critic_hidden = vec![64, 32];
        c.cwgan.epochs = 2;
        c.synth.unet_rows = 60;
        c.synth.cwgan_rows = 60;
        c.synth.quality_pairs = 40;
        c.grid.p1 = vec![0.5, 1.0];
        c.grid.p2 = vec![0.5];
        c.grid_model.n_estimators = 10;
        c.final_model.gbt.n_estimators = 20;
        c
    }

    /// Parses TOML layered over `base`; missing keys keep the base value.
    pub fn from_toml(text: &str, base: &PipelineConfig) -> Result<Self> {
        let patch: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut tree = base.to_value()?;
        merge(&mut tree, patch, "")?;
        Self::from_value(tree)
    }

    pub fn load(path: &Path, base: &PipelineConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, base)
    }

    /// Applies one `dotted.key=value` override. The value is read as TOML
    /// and falls back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value = parse_scalar(raw.trim());
        let mut patch = value;
        for part in key.trim().rsplit('.') {
            if part.is_empty() {
                return Err(Error::Config(format!("empty key segment in {key:?}")));
            }
            let mut t = toml::map::Map::new();
            t.insert(part.to_string(), patch);
            patch = toml::Value::Table(t);
        }
        let mut tree = self.to_value()?;
        merge(&mut tree, patch, "")?;
        *self = Self::from_value(tree)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    fn to_value(&self) -> Result<toml::Value> {
        toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn from_value(v: toml::Value) -> Result<Self> {
        v.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    /// Copy with every component seed replaced by its stage seed.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.embedding.seed = self.stage_seed("embed");
        c.vae.seed = self.stage_seed("vae");
        c.unet.seed = self.stage_seed("unet");
        c.cwgan.seed = self.stage_seed("cwgan");
        c.grid.seed = self.stage_seed("grid");
        c.grid_model.seed = self.stage_seed("grid");
        c.final_model.gbt.seed = self.stage_seed("final");
        c
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Deep merge that rejects keys the base does not have, so typos surface.
fn merge(base: &mut toml::Value, patch: toml::Value, path: &str) -> Result<()> {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(Error::Config(format!("unknown key {here}"))),
                }
            }
            Ok(())
        }
        (toml::Value::Float(slot), toml::Value::Integer(i)) => {
            *slot = i as f64;
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = PipelineConfig::desk();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml(), &PipelineConfig::default()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = PipelineConfig::from_toml("seed = 9\n[unet]\ndepth = 4\n", &PipelineConfig::default()).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.unet.depth, 4);
        assert_eq!(c.unet.base_filters, UNetConfig::default().base_filters);
    }

    #[test]
    fn overrides_win_and_typos_fail() {
        let mut c = PipelineConfig::default();
        c.set("unet.learning_rate=1").unwrap();
        assert_eq!(c.unet.learning_rate, 1.0);
        c.set("paths.out=elsewhere").unwrap();
        assert_eq!(c.paths.out, PathBuf::from("elsewhere"));
        c.set("grid.p1=[0.5]").unwrap();
        assert_eq!(c.grid.p1, vec![0.5]);
        assert!(c.set("unet.lerning_rate=1").is_err());
        assert!(c.set("no_equals").is_err());
        assert!(PipelineConfig::from_toml("[vae]\nbogus = 1\n", &c).is_err());
    }

    #[test]
    fn stage_seeds_differ_and_follow_master() {
        let a = PipelineConfig { seed: 1, ..PipelineConfig::default() }.seeded();
        let b = PipelineConfig { seed: 2, ..PipelineConfig::default() }.seeded();
        assert_ne!(a.vae.seed, a.unet.seed);
        assert_ne!(a.vae.seed, b.vae.seed);
        assert_eq!(a, PipelineConfig { seed: 1, ..PipelineConfig::default() }.seeded());
        assert!(stage_index("vae").is_ok() && stage_index("nope").is_err());
    }
}
