use serde::{Deserialize, Serialize};
use v2l_core::codebook::io::{load_embeddings, save_embeddings, write_atomic, Entries};
use v2l_core::codebook::{expand_vocabulary, filter_expanded, ExpandedEntry, ExpandedVocabulary, ExpansionConfig, PredictionTable};

use crate::config::RunConfig;
use crate::data::load_local;
use crate::error::{CliError, CliResult, Context};

/// The `expand-vocab` output, read by the embedding export tool.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpandedFile {
    pub prefix: String,
    pub top_m: usize,
    pub base_size: usize,
    pub entries: Vec<ExpandedEntry>,
}

pub fn expand(cfg: &RunConfig) -> CliResult<()> {
    let (base, _) = load_local(cfg)?;
    let table_path = cfg.input("prediction_table", &cfg.paths.prediction_table)?;
    let table = PredictionTable::load(&table_path)?;
    let top_m = cfg.expansion.top_m.unwrap_or(table.top_m);
    if top_m > table.top_m {
        return Err(CliError::user(format!(
            "expansion.top_m = {top_m} but {} only holds {} predictions per context",
            table_path.display(),
            table.top_m
        )));
    }
    let ecfg = ExpansionConfig {
        prefix: table.prefix.clone(),
        top_m,
    };
    let expanded = expand_vocabulary(&base, &table, &ecfg)?;
    let [uni, bi, tri] = expanded.arity_counts();
    let file = ExpandedFile {
        prefix: ecfg.prefix,
        top_m,
        base_size: base.len(),
        entries: expanded.entries().to_vec(),
    };
    let out = cfg.output("expanded_vocab", &cfg.paths.expanded_vocab)?;
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    write_atomic(&out, text.as_bytes()).ctx(out.display())?;
    println!(
        "expanded {} base tokens with top_m = {top_m}: {uni} unigrams, {bi} bigrams, {tri} trigrams, {} entries",
        base.len(),
        expanded.len()
    );
    println!("wrote {}", out.display());
    Ok(())
}

pub fn filter(cfg: &RunConfig) -> CliResult<()> {
    let text_path = cfg.input("expanded_embeddings", &cfg.paths.expanded_embeddings)?;
    let text = load_embeddings(&text_path).ctx(text_path.display())?;
    let Entries::Expanded(expanded) = text.entries else {
        return Err(CliError::user(format!(
            "{}: expected an expanded vocabulary file",
            text_path.display()
        )));
    };
    if let Some(p) = cfg.paths.expanded_vocab.as_ref().filter(|p| p.exists()) {
        let listed: ExpandedFile = serde_json::from_str(&std::fs::read_to_string(p)?).ctx(p.display())?;
        if ExpandedVocabulary::new(listed.entries)? != expanded {
            return Err(CliError::user(format!(
                "{} does not embed the entries listed in {}",
                text_path.display(),
                p.display()
            )));
        }
    }
    let img_path = cfg.input("image_embeddings", &cfg.paths.image_embeddings)?;
    let images = load_embeddings(&img_path).ctx(img_path.display())?;
    if !matches!(images.entries, Entries::Features(_)) {
        return Err(CliError::user(format!(
            "{}: expected image feature rows",
            img_path.display()
        )));
    }
    let top_k = cfg.expansion.top_k;
    if top_k == 0 {
        return Err(CliError::user("expansion.top_k must be at least 1"));
    }
    let kept = filter_expanded(&expanded, &text.table, &images.table, top_k)?;
    let out = cfg.output("global_embeddings", &cfg.paths.global_embeddings)?;
    save_embeddings(&out, &Entries::Expanded(kept.vocab.clone()), &kept.table, None).ctx(out.display())?;
    let [uni, bi, tri] = kept.vocab.arity_counts();
    println!(
        "kept {} of {} entries (top_k = {top_k} over {} images): {uni} unigrams, {bi} bigrams, {tri} trigrams",
        kept.vocab.len(),
        expanded.len(),
        images.table.rows()
    );
    println!("wrote {}", out.display());
    Ok(())
}
