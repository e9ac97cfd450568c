use std::path::{Path, PathBuf};

use v2l_core::codebook::io::{load_embeddings, Entries};
use v2l_core::codebook::{EmbeddingTable, ExpandedVocabulary, Vocabulary};
use v2l_core::numerics::Tensor;
use v2l_core::tokenizer::io::{load_checkpoint, load_image, load_token_map};
use v2l_core::tokenizer::{FeatureFile, GlobalFeatures, TokenMap, TokenizerModel, ToyExtractor};

use crate::config::{stage_seed, RunConfig};
use crate::error::{CliError, CliResult, Context};

pub const IMAGE_EXT: &str = "v2li";
pub const MAP_EXT: &str = "v2lt";
pub const TOY_PATCHES: usize = 4;

/// Files in `dir` with extension `ext`, sorted by file name.
pub fn list_files(dir: &Path, ext: &str) -> CliResult<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).ctx(dir.display())? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub struct Named<T> {
    pub names: Vec<String>,
    pub items: Vec<T>,
}

impl<T> Named<T> {
    pub fn get(&self, name: &str) -> Option<&T> {
        self.names.iter().position(|n| n == name).map(|i| &self.items[i])
    }
}

pub fn load_images(cfg: &RunConfig) -> CliResult<Named<Tensor>> {
    let dir = cfg.input("images", &cfg.paths.images)?;
    let files = list_files(&dir, IMAGE_EXT)?;
    if files.is_empty() {
        return Err(CliError::user(format!("no .{IMAGE_EXT} images in {}", dir.display())));
    }
    let mut names = Vec::new();
    let mut items = Vec::new();
    for (name, path) in files {
        items.push(load_image(&path).ctx(path.display())?);
        names.push(name);
    }
    Ok(Named { names, items })
}

pub fn load_maps(dir: &Path) -> CliResult<Named<TokenMap>> {
    if !dir.is_dir() {
        return Err(CliError::user(format!(
            "{} does not exist; run `v2l tokenize` first",
            dir.display()
        )));
    }
    let files = list_files(dir, MAP_EXT)?;
    if files.is_empty() {
        return Err(CliError::user(format!("no .{MAP_EXT} token maps in {}", dir.display())));
    }
    let mut names = Vec::new();
    let mut items = Vec::new();
    for (name, path) in files {
        items.push(load_token_map(&path).ctx(path.display())?);
        names.push(name);
    }
    Ok(Named { names, items })
}

pub fn load_local(cfg: &RunConfig) -> CliResult<(Vocabulary, EmbeddingTable)> {
    let path = cfg.input("local_embeddings", &cfg.paths.local_embeddings)?;
    let file = load_embeddings(&path).ctx(path.display())?;
    match file.entries {
        Entries::Base(v) => Ok((v, file.table)),
        _ => Err(CliError::user(format!(
            "{}: expected a base vocabulary file",
            path.display()
        ))),
    }
}

pub fn load_global(cfg: &RunConfig) -> CliResult<(ExpandedVocabulary, EmbeddingTable)> {
    let path = cfg.input("global_embeddings", &cfg.paths.global_embeddings)?;
    let file = load_embeddings(&path).ctx(path.display())?;
    match file.entries {
        Entries::Expanded(v) => Ok((v, file.table)),
        _ => Err(CliError::user(format!(
            "{}: expected an expanded vocabulary file",
            path.display()
        ))),
    }
}

/// Precomputed features when `paths.features` is set, the toy extractor otherwise.
pub fn extractor(cfg: &RunConfig) -> CliResult<Box<dyn GlobalFeatures>> {
    let ex: Box<dyn GlobalFeatures> = match &cfg.paths.features {
        Some(_) => {
            let path = cfg.input("features", &cfg.paths.features)?;
            Box::new(FeatureFile::load(&path).ctx(path.display())?)
        }
        None => Box::new(ToyExtractor::new(
            cfg.model.global_dim,
            TOY_PATCHES,
            stage_seed(cfg.seed, "features"),
        )),
    };
    if ex.dim() != cfg.model.global_dim {
        return Err(CliError::user(format!(
            "features have dim {}, model.global_dim is {}",
            ex.dim(),
            cfg.model.global_dim
        )));
    }
    Ok(ex)
}

pub fn features(ex: &dyn GlobalFeatures, images: &Named<Tensor>) -> CliResult<Vec<Vec<f64>>> {
    images
        .names
        .iter()
        .zip(&images.items)
        .map(|(n, img)| ex.feature(n, img).ctx(format!("features for {n}")))
        .collect()
}

pub fn check_tables(cfg: &RunConfig, local: &EmbeddingTable, global: &EmbeddingTable) -> CliResult<()> {
    if local.dim() != cfg.model.local_dim {
        return Err(CliError::user(format!(
            "local embeddings have dim {}, model.local_dim is {}",
            local.dim(),
            cfg.model.local_dim
        )));
    }
    if global.dim() != cfg.model.global_dim {
        return Err(CliError::user(format!(
            "global embeddings have dim {}, model.global_dim is {}",
            global.dim(),
            cfg.model.global_dim
        )));
    }
    Ok(())
}

/// The trained tokenizer from `paths.checkpoint`.
pub fn load_model(cfg: &RunConfig) -> CliResult<TokenizerModel> {
    let (_, local) = load_local(cfg)?;
    let (_, global) = load_global(cfg)?;
    let path = cfg.input("checkpoint", &cfg.paths.checkpoint)?;
    let ck = load_checkpoint(&path).ctx(path.display())?;
    if ck.model != cfg.model {
        return Err(CliError::user(format!(
            "{} was trained with a different [model] section",
            path.display()
        )));
    }
    Ok(ck.into_model(local, global).ctx(path.display())?)
}

pub fn batch_of_one(image: &Tensor) -> CliResult<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image
        .reshape(&shape)
        .map_err(|e| CliError::user(format!("image: {e}")))
}

pub fn tokenize_one(model: &TokenizerModel, image: &Tensor, feature: &[f64]) -> CliResult<TokenMap> {
    let mut maps = model.tokenize(&batch_of_one(image)?, &[feature.to_vec()])?;
    Ok(maps.pop().expect("one map per image"))
}

pub fn detokenize_one(model: &TokenizerModel, map: &TokenMap) -> CliResult<Tensor> {
    let out = model.detokenize(std::slice::from_ref(map))?;
    let shape = out.shape()[1..].to_vec();
    out.reshape(&shape)
        .map_err(|e| CliError::Internal(format!("decoder output: {e}")))
}

pub fn tokens_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join("tokens")
}
