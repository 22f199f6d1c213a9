//! Run configuration: TOML file, `key=value` overrides, seed fallback, and
//! path validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{BenchmarkParams, SyntheticBenchmark};
use crate::error::{Error, Result};
use crate::sampling::EpisodeSpec;
use crate::training::{FewShotConfig, ModelConfig, PretrainConfig, SupervisedConfig};

/// Environment variable consulted when the configuration sets no `seed`.
pub const SEED_ENV: &str = "MAPRE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Corpus directory; the output directory of `gen-corpus` when set.
    pub corpus: Option<PathBuf>,
    /// Overrides `<corpus>/catalog.json`.
    pub catalog: Option<PathBuf>,
    /// Overrides `<corpus>/vocab.txt`.
    pub vocabulary: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    /// Defaults to `<run dir>/model.ckpt`.
    pub checkpoint_out: Option<PathBuf>,
    /// Defaults to `<run dir>/metrics.jsonl`.
    pub metrics_out: Option<PathBuf>,
}

/// Relations evaluated by `eval-fewshot`, `eval-zeroshot`, and the
/// evaluation that closes `finetune-fewshot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    /// Validation and test relations together.
    #[default]
    HeldOut,
    Validation,
    Test,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub spec: EpisodeSpec,
    pub episodes: usize,
    pub split: EvalSplit,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { spec: EpisodeSpec { ways: 5, shots: 1, queries: 5 }, episodes: 500, split: EvalSplit::HeldOut, seed: 99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Seeds `0..seeds` are checked.
    pub seeds: u64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seeds: 10, tolerance: crate::gradsuite::TOLERANCE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed, added to every per-stage seed. Falls back to
    /// `MAPRE_SEED`, then 0.
    pub seed: Option<u64>,
    /// Parent of the per-run output directories.
    pub run_root: PathBuf,
    /// Seed of the parameter initialization when no checkpoint is loaded.
    pub init_seed: u64,
    pub paths: PathsConfig,
    pub corpus: BenchmarkParams,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub fewshot: FewShotConfig,
    pub supervised: SupervisedConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            run_root: PathBuf::from("runs"),
            init_seed: 11,
            paths: PathsConfig::default(),
            corpus: BenchmarkParams::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            fewshot: FewShotConfig::default(),
            supervised: SupervisedConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Sets `table[dotted.key] = value`, creating intermediate tables. The value
/// is read as a TOML literal, or as a bare string when it is not one.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key is present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{}` is not a table", parts[..=i].join("."))))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`; tables merge, other values replace.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Defaults, then the file, then the overrides in order; a missing
    /// `seed` is taken from `env_seed`.
    pub fn resolve(text: Option<&str>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize to a table");
        if let Some(t) = text {
            merge(&mut table, toml::from_str(t).map_err(|e| Error::Config(one_line(&e.to_string())))?);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig =
            RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        if config.seed.is_none() {
            config.seed = Some(match env_seed {
                Some(s) => s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?,
                None => 0,
            });
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| Error::Path { path: p.to_path_buf(), message: e.to_string() })?,
            ),
            None => None,
        };
        let env_seed = std::env::var(SEED_ENV).ok();
        Self::resolve(text.as_deref(), overrides, env_seed.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.model.encoder.validate().map_err(cfg)?;
        self.pretrain.validate()?;
        self.fewshot.validate()?;
        self.supervised.validate()?;
        self.eval.spec.validate().map_err(cfg)?;
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be positive".into()));
        }
        if self.gradcheck.seeds == 0 || !(self.gradcheck.tolerance > 0.0) {
            return Err(Error::Config("gradcheck needs seeds > 0 and tolerance > 0".into()));
        }
        Ok(())
    }

    pub fn global_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// A stage seed shifted by the global seed.
    pub fn stage_seed(&self, seed: u64) -> u64 {
        seed.wrapping_add(self.global_seed())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serializable")
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.to_json()).expect("config is serializable");
        hex::encode(Sha256::digest(text.as_bytes()))[..12].to_string()
    }

    /// Fails on any input path that does not exist.
    pub fn check_inputs(&self, needs_corpus: bool) -> Result<()> {
        let missing =
            |p: &Path, what: &str| Error::Path { path: p.to_path_buf(), message: format!("{what} not found") };
        if needs_corpus {
            let dir = self.paths.corpus.as_deref().ok_or_else(|| Error::Config("paths.corpus is required".into()))?;
            if !dir.is_dir() {
                return Err(missing(dir, "corpus directory"));
            }
            for f in SyntheticBenchmark::files() {
                let p = dir.join(f);
                if !p.is_file() {
                    return Err(missing(&p, "corpus file"));
                }
            }
            let vocab = self.paths.vocabulary.clone().unwrap_or_else(|| dir.join("vocab.txt"));
            if !vocab.is_file() {
                return Err(missing(&vocab, "vocabulary"));
            }
            let catalog = self.paths.catalog.clone().unwrap_or_else(|| dir.join("catalog.json"));
            if !catalog.is_file() {
                return Err(missing(&catalog, "relation catalog"));
            }
        }
        if let Some(p) = &self.paths.checkpoint_in {
            if !p.is_file() {
                return Err(missing(p, "checkpoint"));
            }
        }
        if let (Some(i), Some(o)) = (&self.paths.checkpoint_in, &self.paths.checkpoint_out) {
            let same = i == o || matches!((i.canonicalize(), o.canonicalize()), (Ok(a), Ok(b)) if a == b);
            if same {
                return Err(Error::Config(format!(
                    "paths.checkpoint_out would overwrite the input checkpoint {}",
                    i.display()
                )));
            }
        }
        for p in [&self.paths.checkpoint_out, &self.paths.metrics_out].into_iter().flatten() {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                if !parent.is_dir() {
                    return Err(missing(parent, "output directory"));
                }
            }
        }
        Ok(())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
