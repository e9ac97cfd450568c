use std::path::{Path, PathBuf};

use v2l_core::tokenizer::io::{load_token_map, save_image, save_token_map};

use crate::config::RunConfig;
use crate::data::{
    detokenize_one, extractor, features, list_files, load_images, load_model, tokenize_one, tokens_dir, IMAGE_EXT,
    MAP_EXT,
};
use crate::error::{CliError, CliResult, Context};

pub fn tokenize(cfg: &RunConfig) -> CliResult<()> {
    let model = load_model(cfg)?;
    let images = load_images(cfg)?;
    let feats = features(extractor(cfg)?.as_ref(), &images)?;
    let dir = tokens_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let mut grid = None;
    for ((name, img), feat) in images.names.iter().zip(&images.items).zip(&feats) {
        let map = tokenize_one(&model, img, feat).ctx(name)?;
        let path = dir.join(format!("{name}.{MAP_EXT}"));
        save_token_map(&path, &map).ctx(path.display())?;
        grid = Some((map.height, map.width, map.k_g()));
    }
    let (h, w, k_g) = grid.expect("at least one image");
    println!(
        "tokenized {} images: {h}x{w} local grid, {k_g} global tokens each",
        images.names.len()
    );
    println!("wrote {}", dir.display());
    Ok(())
}

/// Token maps named by `input`: one file, or every map in a directory.
fn map_files(input: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    if input.is_dir() {
        let files = list_files(input, MAP_EXT)?;
        if files.is_empty() {
            return Err(CliError::user(format!("no .{MAP_EXT} token maps in {}", input.display())));
        }
        Ok(files)
    } else if input.is_file() {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        Ok(vec![(stem, input.to_path_buf())])
    } else {
        Err(CliError::user(format!("{} does not exist", input.display())))
    }
}

pub fn detokenize(cfg: &RunConfig, input: Option<PathBuf>, out: Option<PathBuf>) -> CliResult<()> {
    let model = load_model(cfg)?;
    let input = input.unwrap_or_else(|| tokens_dir(cfg));
    let out = out.unwrap_or_else(|| cfg.run_dir.join("reconstructions"));
    let files = map_files(&input)?;
    std::fs::create_dir_all(&out)?;
    for (name, path) in &files {
        let map = load_token_map(path).ctx(path.display())?;
        let img = detokenize_one(&model, &map).ctx(path.display())?;
        let dest = out.join(format!("{name}.{IMAGE_EXT}"));
        save_image(&dest, &img).ctx(dest.display())?;
    }
    println!("decoded {} token maps into {}", files.len(), out.display());
    Ok(())
}
