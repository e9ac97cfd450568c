use std::collections::HashMap;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use v2l_core::codebook::io::{save_embeddings, Entries};
use v2l_core::codebook::{
    expand_vocabulary, filter_expanded, EmbeddingTable, ExpansionConfig, PredictionTable, Vocabulary,
};
use v2l_core::numerics::Tensor;
use v2l_core::protocol::FewShotSpec;
use v2l_core::tokenizer::io::save_image;
use v2l_core::tokenizer::{synthetic_images, GlobalFeatures, ModelConfig, ToyExtractor};

use crate::config::stage_seed;
use crate::data::{IMAGE_EXT, TOY_PATCHES};
use crate::error::{CliError, CliResult, Context};
use crate::tasks::{CaptionEpisode, Captioned, ClassifyEpisode, Episodes, Labeled, Qa, VqaEpisode};

pub struct SynthArgs {
    pub count: usize,
    pub image_size: usize,
    pub vocab: usize,
    pub divisor: usize,
    pub epochs: u64,
    pub top_m: usize,
    pub seed: u64,
}

const PREFIX: &str = "a photo of";
const COLORS: [&str; 3] = ["red", "green", "blue"];

fn random_table(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> CliResult<EmbeddingTable> {
    let data = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(EmbeddingTable::new(rows, dim, data)?)
}

fn dominant_color(img: &Tensor) -> &'static str {
    let plane = img.numel() / 3;
    let means: Vec<f64> = img.data().chunks(plane).map(|c| c.iter().sum::<f64>()).collect();
    let best = (0..3).fold(0, |b, c| if means[c] > means[b] { c } else { b });
    COLORS[best]
}

/// `top_m` distinct base tokens for every unigram and bigram context.
fn predictions(vocab: &Vocabulary, top_m: usize, rng: &mut ChaCha8Rng) -> PredictionTable {
    let n = vocab.len();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
        index::sample(rng, n, top_m)
            .into_iter()
            .map(|i| vocab.entries()[i].clone())
            .collect()
    };
    let mut table = HashMap::new();
    for t in vocab.entries() {
        let next = draw(rng);
        for u in &next {
            table.insert(format!("{PREFIX} {t} {u}"), draw(rng));
        }
        table.insert(format!("{PREFIX} {t}"), next);
    }
    PredictionTable {
        prefix: PREFIX.into(),
        top_m,
        predictions: table,
    }
}

fn episodes(names: &[String], colors: &[&'static str]) -> Episodes {
    let mut out = Episodes::default();
    for (q, name) in names.iter().enumerate() {
        let label = colors[q];
        let others = |want: &dyn Fn(&str) -> bool| (0..names.len()).find(|&i| i != q && want(colors[i]));
        if let (Some(same), Some(diff)) = (others(&|c| c == label), others(&|c| c != label)) {
            let mut labels = vec![label.to_string(), colors[diff].to_string()];
            labels.sort();
            let support: Vec<Labeled> = [same, diff]
                .iter()
                .map(|&i| Labeled {
                    image: names[i].clone(),
                    label: colors[i].into(),
                })
                .collect();
            out.classify.push(ClassifyEpisode {
                spec: FewShotSpec {
                    ways: 2,
                    shots: 1,
                    task_induction: true,
                    repetitions: 0,
                    labels,
                },
                support,
                query: Labeled {
                    image: name.clone(),
                    label: label.into(),
                },
            });
        }
        let support_ids: Vec<usize> = (1..=2).map(|k| (q + k) % names.len()).filter(|&i| i != q).collect();
        let caption = |i: usize| format!("a picture with a {} tint", colors[i]);
        out.caption.push(CaptionEpisode {
            support: support_ids
                .iter()
                .map(|&i| Captioned {
                    image: names[i].clone(),
                    caption: caption(i),
                })
                .collect(),
            query: Captioned {
                image: name.clone(),
                caption: caption(q),
            },
        });
        let question = "Which colour dominates?";
        out.vqa.push(VqaEpisode {
            support: support_ids
                .iter()
                .map(|&i| Qa {
                    image: names[i].clone(),
                    question: question.into(),
                    answer: colors[i].into(),
                })
                .collect(),
            query: Qa {
                image: name.clone(),
                question: question.into(),
                answer: label.into(),
            },
        });
    }
    out
}

fn config_text(a: &SynthArgs, model: &ModelConfig) -> String {
    let warmup = if a.epochs > 1 { 1 } else { 0 };
    format!(
        r#"seed = {seed}
run_dir = "run"
checkpoint_every = 0

[paths]
local_embeddings = "local.v2le"
global_embeddings = "global.v2le"
features = "image_embeddings.v2le"
images = "images"
checkpoint = "run/tokenizer.v2lm"
prediction_table = "predictions.json"
expanded_vocab = "expanded.json"
expanded_embeddings = "expanded_embeddings.v2le"
image_embeddings = "image_embeddings.v2le"
episodes = "episodes.json"

[model]
image_size = {size}
width_divisor = {divisor}
d_l = {d_l}
k_g = {k_g}
local_dim = {local_dim}
global_dim = {global_dim}

[train]
epochs = {epochs}
warmup_epochs = {warmup}
batch_size = {batch}

[expansion]
top_m = {top_m}
top_k = 5

[backend]
kind = "oracle"
"#,
        seed = a.seed,
        size = a.image_size,
        divisor = a.divisor,
        d_l = model.d_l,
        k_g = model.k_g,
        local_dim = model.local_dim,
        global_dim = model.global_dim,
        epochs = a.epochs,
        batch = a.count.min(8),
        top_m = a.top_m,
    )
}

/// A small self-consistent corpus: images, a base vocabulary, prediction
/// table, stand-in text and image embeddings, the filtered global codebook,
/// few-shot episodes and a config pointing at all of it.
pub fn synth(out: &Path, a: &SynthArgs) -> CliResult<()> {
    if a.count < 2 {
        return Err(CliError::user("--count must be at least 2"));
    }
    if a.vocab < a.top_m || a.top_m == 0 {
        return Err(CliError::user("--top-m must be between 1 and --vocab"));
    }
    let model = ModelConfig {
        image_size: a.image_size,
        width_divisor: a.divisor,
        ..Default::default()
    };
    model.validate()?;
    std::fs::create_dir_all(out.join("images"))?;

    let images = synthetic_images(a.count, a.image_size, stage_seed(a.seed, "synth/images"));
    let names: Vec<String> = (0..a.count).map(|i| format!("img-{i:03}")).collect();
    for (n, img) in names.iter().zip(&images) {
        let p = out.join("images").join(format!("{n}.{IMAGE_EXT}"));
        save_image(&p, img).ctx(p.display())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(a.seed, "synth/vocab"));
    let vocab = Vocabulary::new((0..a.vocab).map(|i| format!("▁w{i}")).collect())?;
    let local = random_table(a.vocab, model.local_dim, &mut rng)?;
    save_embeddings(&out.join("local.v2le"), &Entries::Base(vocab.clone()), &local, Some("synthetic"))?;

    let table = predictions(&vocab, a.top_m, &mut rng);
    table.save(&out.join("predictions.json"))?;
    let expanded = expand_vocabulary(
        &vocab,
        &table,
        &ExpansionConfig {
            prefix: PREFIX.into(),
            top_m: a.top_m,
        },
    )?;

    // text side: an n-gram embeds as the mean of its tokens' vectors
    let token_vecs = random_table(a.vocab, model.global_dim, &mut rng)?;
    let d = model.global_dim;
    let mut text = Vec::with_capacity(expanded.len() * d);
    for e in expanded.entries() {
        for j in 0..d {
            let s: f64 = e.sources.iter().map(|&s| token_vecs.row(s as usize)[j]).sum();
            text.push(s / e.arity() as f64);
        }
    }
    let text = EmbeddingTable::new(expanded.len(), d, text)?;
    save_embeddings(
        &out.join("expanded_embeddings.v2le"),
        &Entries::Expanded(expanded.clone()),
        &text,
        Some("synthetic"),
    )?;

    let ex = ToyExtractor::new(d, TOY_PATCHES, stage_seed(a.seed, "synth/features"));
    let mut feats = Vec::with_capacity(a.count * d);
    for (n, img) in names.iter().zip(&images) {
        feats.extend(ex.feature(n, img)?);
    }
    let feats = EmbeddingTable::new(a.count, d, feats)?;
    save_embeddings(
        &out.join("image_embeddings.v2le"),
        &Entries::Features(Vocabulary::new(names.clone())?),
        &feats,
        Some("synthetic"),
    )?;

    let kept = filter_expanded(&expanded, &text, &feats, 5)?;
    save_embeddings(&out.join("global.v2le"), &Entries::Expanded(kept.vocab.clone()), &kept.table, None)?;

    let colors: Vec<&'static str> = images.iter().map(dominant_color).collect();
    let eps = episodes(&names, &colors);
    std::fs::write(out.join("episodes.json"), serde_json::to_string_pretty(&eps)? + "\n")?;
    std::fs::write(out.join("v2l.toml"), config_text(a, &model))?;
    println!(
        "wrote {} images, {} base tokens, {} expanded and {} global entries to {}",
        a.count,
        a.vocab,
        expanded.len(),
        kept.vocab.len(),
        out.display()
    );
    Ok(())
}
