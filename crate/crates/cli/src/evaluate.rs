use std::collections::BTreeMap;

use v2l_core::codebook::io::{load_embeddings, Entries};
use v2l_core::eval::{
    clip_score_ids, codebook_utilization, histogram_csv, psnr, rank_percentile_score, ClipStats, EvalReport,
    PsnrStats, RunMetadata,
};
use v2l_core::protocol::Codebook;

use crate::config::{stage_seed, RunConfig};
use crate::data::{detokenize_one, load_global, load_images, load_local, load_maps, load_model, tokens_dir};
use crate::error::{CliError, CliResult, Context};

/// Codebook usage over `run_dir/tokens`, reconstruction PSNR when images
/// are configured, and CLIP scores when image embeddings are.
pub fn eval(cfg: &RunConfig) -> CliResult<()> {
    let maps = load_maps(&tokens_dir(cfg))?;
    let (lvocab, _) = load_local(cfg)?;
    let (gvocab, gtable) = load_global(cfg)?;
    let dir = cfg.run_subdir("eval")?;

    let local = codebook_utilization(&maps.items, Codebook::Local, lvocab.len())?;
    let global = codebook_utilization(&maps.items, Codebook::Global, gvocab.len())?;
    std::fs::write(dir.join("local_histogram.csv"), histogram_csv(&local))?;
    std::fs::write(dir.join("global_histogram.csv"), histogram_csv(&global))?;

    let mut extra = BTreeMap::new();
    extra.insert("maps".to_string(), maps.names.len().to_string());
    let mut report = EvalReport {
        metadata: RunMetadata {
            name: "eval".into(),
            seed: cfg.seed,
            extra,
        },
        utilization: vec![local, global],
        ..Default::default()
    };

    if cfg.paths.images.is_some() && cfg.paths.checkpoint.is_some() {
        let model = load_model(cfg)?;
        let images = load_images(cfg)?;
        let mut values = Vec::new();
        for (name, map) in maps.names.iter().zip(&maps.items) {
            if let Some(img) = images.get(name) {
                let rec = detokenize_one(&model, map).ctx(name)?;
                values.push(psnr(&rec, img).ctx(name)?);
            }
        }
        if !values.is_empty() {
            report.psnr = Some(PsnrStats::from_values(&values));
        }
    }

    if let Some(p) = &cfg.paths.image_embeddings {
        let file = load_embeddings(p).ctx(p.display())?;
        let Entries::Features(names) = &file.entries else {
            return Err(CliError::user(format!("{}: expected image feature rows", p.display())));
        };
        if file.table.dim() != gtable.dim() {
            return Err(CliError::user(format!(
                "image embeddings have dim {}, global embeddings {}",
                file.table.dim(),
                gtable.dim()
            )));
        }
        let (mut scores, mut ranks) = (Vec::new(), Vec::new());
        for (name, map) in maps.names.iter().zip(&maps.items) {
            let Some(row) = names.id_of(name) else { continue };
            let feat = file.table.row(row as usize);
            scores.push(clip_score_ids(feat, &gtable, &map.global_ids).ctx(name)?);
            let seed = stage_seed(cfg.seed, &format!("eval/rank/{name}"));
            ranks.push(rank_percentile_score(feat, &gtable, &map.global_ids, cfg.eval.rank_draws, seed).ctx(name)?);
        }
        if !scores.is_empty() {
            let n = scores.len() as f64;
            report.clip = Some(ClipStats {
                count: scores.len(),
                mean: scores.iter().sum::<f64>() / n,
                rank_percentile: Some(ranks.iter().sum::<f64>() / n),
            });
        }
    }

    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    let text = report.to_text();
    std::fs::write(dir.join("report.txt"), &text)?;
    print!("{text}");
    if !text.ends_with('\n') {
        println!();
    }
    Ok(())
}
