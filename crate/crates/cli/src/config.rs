//! Experiment configuration: JSON schema, validation and content hash.

use std::path::{Path, PathBuf};

use jacmatch::data::{ImageLayout, SyntheticTask};
use jacmatch::losses::LossSpec;
use jacmatch::nn::{Architecture, Head};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::optim::OptimizerSpec;

/// Where training and test examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum DataSource {
    /// Seeded synthetic task; `seed` fixes the generated splits.
    Synthetic { task: SyntheticTask, seed: u64 },
    /// Fixed-record binary image files.
    Binary {
        train: PathBuf,
        test: PathBuf,
        layout: ImageLayout,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub architecture: Architecture,
    /// Network checkpoint; its source-head size fixes the teacher's outputs.
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    pub architecture: Architecture,
    /// Adds a target head for the training labels; the source head is sized
    /// to the teacher's outputs.
    #[serde(default)]
    pub two_headed: bool,
    /// Checkpoint whose matching entries (by name) replace the initial
    /// parameters.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
}

fn default_name() -> String {
    "run".into()
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_sigmas() -> Vec<f64> {
    vec![0.0]
}
fn default_eval_examples() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataSource,
    /// Train on this many examples per class, drawn with the run seed.
    #[serde(default)]
    pub subset_per_class: Option<usize>,
    #[serde(default)]
    pub teacher: Option<TeacherSpec>,
    pub student: StudentSpec,
    #[serde(default)]
    pub loss: LossSpec,
    /// Defaults to Adam 1e-3 with a 10x drop at 80% of the epochs.
    #[serde(default)]
    pub optimizer: Option<OptimizerSpec>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// One run per seed; the seed draws the subset, the initialization and
    /// the batch order.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Test-time noise levels, in normalized input units.
    #[serde(default = "default_sigmas")]
    pub test_sigmas: Vec<f64>,
    /// Size of the fixed training batch on which Jacobian-loss reduction is
    /// measured.
    #[serde(default = "default_eval_examples")]
    pub eval_examples: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Binary { train, test, .. } = &mut self.data {
            fix(train);
            fix(test);
        }
        if let Some(t) = &mut self.teacher {
            fix(&mut t.checkpoint);
        }
        if let Some(p) = &mut self.student.init_from {
            fix(p);
        }
        if let Some(p) = &mut self.out_dir {
            fix(p);
        }
    }

    pub fn optimizer(&self) -> OptimizerSpec {
        self.optimizer
            .clone()
            .unwrap_or_else(|| OptimizerSpec::desk_default(self.epochs))
    }

    /// Structural checks that need no files or networks.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.optimizer().validate()?;
        self.loss.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_examples == 0 {
            return bad("epochs, batch_size and eval_examples must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return bad(format!("duplicate seeds in {:?}", self.seeds));
        }
        if let Some(&s) = self.test_sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return bad(format!("test sigma must be finite and >= 0, got {s}"));
        }
        if self.subset_per_class == Some(0) {
            return bad("subset_per_class must be positive".into());
        }
        if self.loss.needs_teacher() && self.teacher.is_none() {
            return bad("beta, gamma and attention need a teacher checkpoint".into());
        }
        if self.student.two_headed {
            if self.teacher.is_none() {
                return bad("a two-headed student needs a teacher to size its source head".into());
            }
            if self.loss.ce_head != Head::Target || self.loss.match_head != Head::Source {
                return bad("a two-headed student trains the target head on labels and matches the source head".into());
            }
        } else if self.loss.ce_head != Head::Source || self.loss.match_head != Head::Source {
            return bad("a one-headed student only has a source head".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON with seeds and output directory
    /// removed and every referenced file replaced by its content digest.
    pub fn hash(&self) -> CliResult<String> {
        let mut v = serde_json::to_value(self)?;
        let obj = v.as_object_mut().expect("config serializes to an object");
        obj.remove("seeds");
        obj.remove("out_dir");
        let mut files: Vec<(&str, &Path)> = Vec::new();
        if let DataSource::Binary { train, test, .. } = &self.data {
            files.push(("data.train", train));
            files.push(("data.test", test));
        }
        if let Some(t) = &self.teacher {
            files.push(("teacher.checkpoint", &t.checkpoint));
        }
        if let Some(p) = &self.student.init_from {
            files.push(("student.init_from", p));
        }
        for (key, path) in files {
            let digest = file_digest(path)?;
            let mut target = &mut v;
            let parts: Vec<&str> = key.split('.').collect();
            for p in &parts[..parts.len() - 1] {
                target = target.get_mut(*p).expect("path key present");
            }
            target[parts[parts.len() - 1]] = serde_json::Value::String(format!("sha256:{digest}"));
        }
        // serde_json maps are sorted, so this string is canonical
        let canonical = serde_json::to_string(&v)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}

pub fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"{
        "data": {"kind": "synthetic", "seed": 1,
                 "task": {"kind": {"kind": "gaussian-blobs", "k": 3, "dim": 2}, "noise": 0.5,
                          "train_per_class": 10, "test_per_class": 5}},
        "student": {"architecture": {"kind": "mlp", "hidden": [8], "activation": "relu"}},
        "loss": {"beta": 0, "gamma": 0}
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_json(MIN).unwrap();
        assert_eq!(c.epochs, 30);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.optimizer().drops, vec![24]);
    }

    #[test]
    fn hash_ignores_seeds_and_output_dir() {
        let a = ExperimentConfig::from_json(MIN).unwrap();
        let mut b = a.clone();
        b.seeds = vec![3, 4];
        b.out_dir = Some("elsewhere".into());
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.epochs = 2;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn teacher_terms_need_a_teacher() {
        let text = MIN.replace(r#""loss": {"beta": 0, "gamma": 0}"#, r#""loss": {}"#);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(CliError::Config(_))));
    }
}
