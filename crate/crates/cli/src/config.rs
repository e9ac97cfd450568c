use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use v2l_core::llm::HttpConfig;
use v2l_core::protocol::{DenoiseSpec, DenoiseTask};
use v2l_core::tokenizer::{ModelConfig, TrainConfig};

use crate::error::{CliError, CliResult};

/// Seed for one stage of a run: FNV-1a 64 over the master seed's
/// little-endian bytes, a `/`, and the stage name.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&master.to_le_bytes());
    h.write(b"/");
    h.write(stage.as_bytes());
    h.finish()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Base vocabulary with local embeddings.
    pub local_embeddings: Option<PathBuf>,
    /// Filtered global codebook.
    pub global_embeddings: Option<PathBuf>,
    /// Image features keyed by image name; the toy extractor is used when absent.
    pub features: Option<PathBuf>,
    /// Directory of `.v2li` images.
    pub images: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub prediction_table: Option<PathBuf>,
    /// Output of `expand-vocab`.
    pub expanded_vocab: Option<PathBuf>,
    /// Text embeddings of the expanded vocabulary, input to `filter-vocab`.
    pub expanded_embeddings: Option<PathBuf>,
    /// Image embeddings, input to `filter-vocab`.
    pub image_embeddings: Option<PathBuf>,
    /// Few-shot episodes for the understanding tasks.
    pub episodes: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Expansion {
    /// Overrides the prediction table's own `top_m` when set.
    pub top_m: Option<usize>,
    pub top_k: usize,
}

impl Default for Expansion {
    fn default() -> Self {
        Self { top_m: None, top_k: 5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Answers with the ground truth.
    Oracle,
    /// Replays `backend.answers` in order.
    Scripted,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Backend {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: String,
    pub auth_token: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    /// Images restored concurrently.
    pub max_concurrent: usize,
    /// Completion budget for classification, captioning and VQA.
    pub max_tokens: usize,
    pub answers: Vec<String>,
}

impl Default for Backend {
    fn default() -> Self {
        let http = HttpConfig::default();
        Self {
            kind: BackendKind::Oracle,
            endpoint: None,
            model: http.model,
            auth_token: None,
            timeout_secs: http.timeout_secs,
            max_retries: http.max_retries,
            backoff_base_ms: http.backoff_base_ms,
            backoff_cap_ms: http.backoff_cap_ms,
            max_concurrent: 1,
            max_tokens: 16,
            answers: Vec::new(),
        }
    }
}

impl Backend {
    pub fn http_config(&self) -> CliResult<HttpConfig> {
        let endpoint = self.endpoint.clone().ok_or_else(|| {
            CliError::user(
                "no LLM endpoint configured: set backend.endpoint in the config, pass --endpoint, or export V2L_ENDPOINT",
            )
        })?;
        Ok(HttpConfig {
            endpoint,
            model: self.model.clone(),
            auth_token: self.auth_token.clone(),
            timeout_secs: self.timeout_secs,
            max_retries: self.max_retries,
            backoff_base_ms: self.backoff_base_ms,
            backoff_cap_ms: self.backoff_cap_ms,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Denoise {
    pub copies: usize,
    pub start_percent: usize,
    pub step_percent: usize,
    pub n: usize,
    pub m: usize,
    pub max_new_tokens: usize,
    pub blur_radius: usize,
    pub rotate_degrees: f64,
    pub shift_pixels: isize,
}

impl Default for Denoise {
    fn default() -> Self {
        let d = DenoiseSpec::default();
        Self {
            copies: d.copies,
            start_percent: d.start_percent,
            step_percent: d.step_percent,
            n: d.n,
            m: d.m,
            max_new_tokens: d.max_new_tokens,
            blur_radius: 2,
            rotate_degrees: 15.0,
            shift_pixels: 16,
        }
    }
}

impl Denoise {
    pub fn spec(&self, task: DenoiseTask, height: usize, width: usize) -> DenoiseSpec {
        DenoiseSpec {
            copies: self.copies,
            start_percent: self.start_percent,
            step_percent: self.step_percent,
            n: self.n,
            m: self.m,
            max_new_tokens: self.max_new_tokens,
            ..DenoiseSpec::for_grid(task, height, width)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Evaluation {
    /// Random draws behind the rank-percentile score.
    pub rank_draws: usize,
}

impl Default for Evaluation {
    fn default() -> Self {
        Self { rank_draws: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub expansion: Expansion,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub denoise: Denoise,
    #[serde(default)]
    pub eval: Evaluation,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::user(e.to_string()))?;
        if cfg.train.seed != 0 {
            return Err(CliError::user(
                "train.seed is derived from the top-level seed; remove it from the config",
            ));
        }
        cfg.train.seed = stage_seed(cfg.seed, "train");
        if cfg.run_dir.is_relative() {
            cfg.run_dir = base.join(&cfg.run_dir);
        }
        let p = &mut cfg.paths;
        for field in [
            &mut p.local_embeddings,
            &mut p.global_embeddings,
            &mut p.features,
            &mut p.images,
            &mut p.checkpoint,
            &mut p.prediction_table,
            &mut p.expanded_vocab,
            &mut p.expanded_embeddings,
            &mut p.image_embeddings,
            &mut p.episodes,
        ] {
            resolve(base, field);
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        if cfg.backend.max_concurrent == 0 {
            return Err(CliError::user("backend.max_concurrent must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| CliError::user(format!("config {}: {e}", path.display())))
    }

    /// An input path that must already exist.
    pub fn input(&self, key: &str, value: &Option<PathBuf>) -> CliResult<PathBuf> {
        let p = value
            .as_ref()
            .ok_or_else(|| CliError::user(format!("paths.{key} is not set in the config")))?;
        if !p.exists() {
            return Err(CliError::user(format!("paths.{key}: {} does not exist", p.display())));
        }
        Ok(p.clone())
    }

    /// An output path; its parent directory is created.
    pub fn output(&self, key: &str, value: &Option<PathBuf>) -> CliResult<PathBuf> {
        let p = value
            .as_ref()
            .ok_or_else(|| CliError::user(format!("paths.{key} is not set in the config")))?;
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p.clone())
    }

    pub fn run_subdir(&self, name: &str) -> CliResult<PathBuf> {
        let d = self.run_dir.join(name);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse("seed = 7\nrun_dir = \"out\"\n", Path::new("/cfg")).unwrap();
        assert_eq!(cfg.run_dir, Path::new("/cfg/out"));
        assert_eq!(cfg.train.beta, 0.3);
        assert_eq!(cfg.train.seed, stage_seed(7, "train"));
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.denoise.spec(DenoiseTask::Inpaint, 16, 16), DenoiseSpec::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "seed = 1\nrun_dir = \"o\"\nbogus = 2\n",
            "seed = 1\nrun_dir = \"o\"\n[train]\nlearning_rate = 1.0\n",
            "seed = 1\nrun_dir = \"o\"\n[train.adam]\nbeta3 = 1.0\n",
            "seed = 1\nrun_dir = \"o\"\n[model]\ndepth = 3\n",
            "seed = 1\nrun_dir = \"o\"\n[paths]\nimage = \"x\"\n",
        ] {
            let e = RunConfig::parse(text, Path::new(".")).unwrap_err();
            assert!(e.to_string().contains("unknown field"), "{e}");
        }
    }

    #[test]
    fn seed_is_required() {
        assert!(RunConfig::parse("run_dir = \"o\"\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("seed = 1\nrun_dir = \"o\"\n[train]\nseed = 4\n", Path::new(".")).is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(0, "init"), stage_seed(0, "train"));
        assert_ne!(stage_seed(0, "init"), stage_seed(1, "init"));
        assert_eq!(stage_seed(3, "init"), stage_seed(3, "init"));
    }
}
