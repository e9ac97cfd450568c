use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use v2l_core::eval::{accuracy, psnr, EvalReport, PsnrStats, RunMetadata};
use v2l_core::llm::{classify_exact_match, HttpBackend, LlmBackend, LoggingBackend, OracleBackend};
use v2l_core::numerics::Tensor;
use v2l_core::protocol::pollute::{box_blur, rotate, shift};
use v2l_core::protocol::{
    build_caption_prompt, build_classification_prompt, build_vqa_prompt, clean_completion, mask_positions,
    parallel_map, plan_chunks, plan_translation, random_mask, run_map_translation, run_mask_restoration,
    run_masked_restoration, DenoiseTask, FewShotSpec, Lexicon, Restoration, RunReport,
};
use v2l_core::tokenizer::io::{save_image, save_token_map};
use v2l_core::tokenizer::TokenMap;

use crate::config::{stage_seed, BackendKind, RunConfig};
use crate::data::{
    detokenize_one, extractor, features, load_global, load_images, load_local, load_maps, load_model, tokenize_one,
    tokens_dir, Named, IMAGE_EXT, MAP_EXT,
};
use crate::error::{CliError, CliResult, Context};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Classify,
    Caption,
    Vqa,
    Inpaint,
    Outpaint,
    Deblur,
    Rotate,
    Shift,
    Masked30,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Caption => "caption",
            Task::Vqa => "vqa",
            Task::Inpaint => "inpaint",
            Task::Outpaint => "outpaint",
            Task::Deblur => "deblur",
            Task::Rotate => "rotate",
            Task::Shift => "shift",
            Task::Masked30 => "masked30",
        }
    }

    fn denoise(self) -> Option<DenoiseTask> {
        match self {
            Task::Inpaint | Task::Masked30 => Some(DenoiseTask::Inpaint),
            Task::Outpaint => Some(DenoiseTask::Outpaint),
            Task::Deblur => Some(DenoiseTask::Deblur),
            Task::Rotate => Some(DenoiseTask::Rotate),
            Task::Shift => Some(DenoiseTask::Shift),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Labeled {
    pub image: String,
    pub label: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyEpisode {
    pub spec: FewShotSpec,
    pub support: Vec<Labeled>,
    pub query: Labeled,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Captioned {
    pub image: String,
    pub caption: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionEpisode {
    pub support: Vec<Captioned>,
    pub query: Captioned,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Qa {
    pub image: String,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaEpisode {
    pub support: Vec<Qa>,
    pub query: Qa,
}

/// Contents of `paths.episodes`. Images are named by token map file stem.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episodes {
    #[serde(default)]
    pub classify: Vec<ClassifyEpisode>,
    #[serde(default)]
    pub caption: Vec<CaptionEpisode>,
    #[serde(default)]
    pub vqa: Vec<VqaEpisode>,
}

/// One prompt of an understanding task and what it should produce.
struct Question {
    image: String,
    group: String,
    prompt: String,
    truth: String,
}

#[derive(Serialize)]
struct Prediction<'a> {
    episode: usize,
    image: &'a str,
    prediction: String,
    reference: &'a str,
    correct: bool,
}

/// Ends every few-shot completion: each template output closes with a period.
const STOP: &str = ".";

enum Shared {
    /// A fresh oracle per work item, built from that item's truth.
    Oracle,
    Fixed(Box<dyn LlmBackend>),
}

fn shared_backend(cfg: &RunConfig) -> CliResult<(Shared, usize)> {
    Ok(match cfg.backend.kind {
        BackendKind::Oracle => (Shared::Oracle, cfg.backend.max_concurrent),
        // answers are consumed in order, so items run one at a time
        BackendKind::Scripted => (
            Shared::Fixed(Box::new(OracleBackend::sequence(cfg.backend.answers.clone()))),
            1,
        ),
        BackendKind::Http => (
            Shared::Fixed(Box::new(HttpBackend::new(cfg.backend.http_config()?)?)),
            cfg.backend.max_concurrent,
        ),
    })
}

fn fresh_dir(dir: &Path) -> CliResult<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).ctx(dir.display())?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn metadata(cfg: &RunConfig, task: Task, items: usize) -> RunMetadata {
    let mut extra = BTreeMap::new();
    extra.insert("backend".into(), format!("{:?}", cfg.backend.kind).to_lowercase());
    extra.insert("items".into(), items.to_string());
    if cfg.backend.kind == BackendKind::Http {
        extra.insert("model".into(), cfg.backend.model.clone());
    }
    RunMetadata {
        name: task.name().into(),
        seed: cfg.seed,
        extra,
    }
}

fn write_report(dir: &Path, report: &EvalReport) -> CliResult<()> {
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    let text = report.to_text();
    std::fs::write(dir.join("report.txt"), &text)?;
    print!("{text}");
    if !text.ends_with('\n') {
        println!();
    }
    Ok(())
}

pub fn run(cfg: &RunConfig, task: Task) -> CliResult<()> {
    let dir = cfg.run_subdir(task.name())?;
    match task.denoise() {
        Some(kind) => run_denoise(cfg, task, kind, &dir),
        None => run_understanding(cfg, task, &dir),
    }
}

fn map<'a>(maps: &'a Named<TokenMap>, image: &str) -> CliResult<&'a TokenMap> {
    maps.get(image)
        .ok_or_else(|| CliError::user(format!("episode image {image:?} has no token map; run `v2l tokenize`")))
}

fn questions(cfg: &RunConfig, task: Task) -> CliResult<Vec<Question>> {
    let path = cfg.input("episodes", &cfg.paths.episodes)?;
    let episodes: Episodes = serde_json::from_str(&std::fs::read_to_string(&path)?).ctx(path.display())?;
    let maps = load_maps(&tokens_dir(cfg))?;
    let (gvocab, _) = load_global(cfg)?;
    let global = Lexicon::from_expanded(&gvocab);
    let mut out = Vec::new();
    match task {
        Task::Classify => {
            for (i, e) in episodes.classify.iter().enumerate() {
                let support = e
                    .support
                    .iter()
                    .map(|s| Ok((map(&maps, &s.image)?.clone(), s.label.clone())))
                    .collect::<CliResult<Vec<_>>>()?;
                let doc = build_classification_prompt(&e.spec, &support, map(&maps, &e.query.image)?, &global)
                    .ctx(format!("classify episode {i}"))?;
                out.push(Question {
                    image: e.query.image.clone(),
                    group: format!("classify {}-way {}-shot", e.spec.ways, e.spec.shots),
                    prompt: doc.rendered,
                    truth: e.query.label.clone(),
                });
            }
        }
        Task::Caption => {
            for (i, e) in episodes.caption.iter().enumerate() {
                let support = e
                    .support
                    .iter()
                    .map(|s| Ok((map(&maps, &s.image)?.clone(), s.caption.clone())))
                    .collect::<CliResult<Vec<_>>>()?;
                let doc = build_caption_prompt(&support, map(&maps, &e.query.image)?, &global)
                    .ctx(format!("caption episode {i}"))?;
                out.push(Question {
                    image: e.query.image.clone(),
                    group: "caption exact".into(),
                    prompt: doc.rendered,
                    truth: e.query.caption.clone(),
                });
            }
        }
        Task::Vqa => {
            for (i, e) in episodes.vqa.iter().enumerate() {
                let support = e
                    .support
                    .iter()
                    .map(|s| Ok((map(&maps, &s.image)?.clone(), s.question.clone(), s.answer.clone())))
                    .collect::<CliResult<Vec<_>>>()?;
                let doc = build_vqa_prompt(&support, map(&maps, &e.query.image)?, &e.query.question, &global)
                    .ctx(format!("vqa episode {i}"))?;
                out.push(Question {
                    image: e.query.image.clone(),
                    group: "vqa".into(),
                    prompt: doc.rendered,
                    truth: e.query.answer.clone(),
                });
            }
        }
        _ => unreachable!("denoise tasks take the other path"),
    }
    if out.is_empty() {
        return Err(CliError::user(format!(
            "{} has no {} episodes",
            path.display(),
            task.name()
        )));
    }
    Ok(out)
}

fn run_understanding(cfg: &RunConfig, task: Task, dir: &Path) -> CliResult<()> {
    let qs = questions(cfg, task)?;
    if cfg.backend.kind == BackendKind::Scripted && cfg.backend.answers.len() < qs.len() {
        return Err(CliError::user(format!(
            "backend.answers has {} entries for {} episodes",
            cfg.backend.answers.len(),
            qs.len()
        )));
    }
    let (shared, cap) = shared_backend(cfg)?;
    let inner: Box<dyn LlmBackend> = match shared {
        // answers line up with episodes, so the oracle runs in order
        Shared::Oracle => Box::new(OracleBackend::sequence(qs.iter().map(|q| q.truth.clone()))),
        Shared::Fixed(b) => b,
    };
    let cap = if cfg.backend.kind == BackendKind::Oracle { 1 } else { cap };
    let log_path = dir.join("llm_log.jsonl");
    if log_path.exists() {
        std::fs::remove_file(&log_path)?;
    }
    let llm = LoggingBackend::new(inner, &log_path)?;
    let answers = parallel_map(&qs, cap, |q| llm.complete(&q.prompt, cfg.backend.max_tokens, Some(STOP)));

    let mut lines = String::new();
    let mut groups: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for (i, (q, a)) in qs.iter().zip(answers).enumerate() {
        let prediction = clean_completion(&a.ctx(format!("{} episode {i}", task.name()))?);
        let p = Prediction {
            episode: i,
            image: &q.image,
            correct: classify_exact_match(&prediction, &q.truth),
            prediction,
            reference: &q.truth,
        };
        lines.push_str(&serde_json::to_string(&p)?);
        lines.push('\n');
        groups
            .entry(q.group.clone())
            .or_default()
            .push((p.prediction, q.truth.clone()));
    }
    std::fs::write(dir.join("predictions.jsonl"), lines)?;
    let mut report = EvalReport {
        metadata: metadata(cfg, task, qs.len()),
        ..Default::default()
    };
    for (g, pairs) in groups {
        report.accuracy.insert(g, accuracy(&pairs)?);
    }
    write_report(dir, &report)
}

fn words(lex: &Lexicon, ids: &[u32]) -> CliResult<String> {
    Ok(lex.render(ids)?)
}

/// The completions a perfect model would give, in call order.
fn truths(task: Task, clean: &TokenMap, positions: &[usize], m: usize, n: usize, lex: &Lexicon) -> CliResult<Vec<String>> {
    match task {
        Task::Deblur | Task::Rotate | Task::Shift => plan_translation(clean.k_l(), n, m)
            .iter()
            .map(|w| words(lex, &clean.local_ids[w.start..w.start + w.len]))
            .collect(),
        _ => plan_chunks(positions, m)
            .iter()
            .map(|c| words(lex, &clean.local_ids[c.start..c.start + c.len]))
            .collect(),
    }
}

fn pollute(cfg: &RunConfig, task: Task, img: &Tensor) -> CliResult<Tensor> {
    let d = &cfg.denoise;
    Ok(match task {
        Task::Deblur => box_blur(img, d.blur_radius)?,
        Task::Rotate => rotate(img, d.rotate_degrees)?,
        Task::Shift => shift(img, d.shift_pixels, d.shift_pixels)?,
        _ => img.clone(),
    })
}

struct ImageResult {
    report: RunReport,
    psnr: f64,
    matched: usize,
    total: usize,
}

fn run_denoise(cfg: &RunConfig, task: Task, kind: DenoiseTask, dir: &Path) -> CliResult<()> {
    let model = load_model(cfg)?;
    let (lvocab, _) = load_local(cfg)?;
    let local = Lexicon::from_vocabulary(&lvocab);
    let images = load_images(cfg)?;
    let feats = features(extractor(cfg)?.as_ref(), &images)?;
    let (shared, cap) = shared_backend(cfg)?;
    let calls_dir = dir.join("calls");
    let maps_dir = dir.join("maps");
    let out_dir = dir.join("images");
    for d in [&calls_dir, &maps_dir, &out_dir] {
        fresh_dir(d)?;
    }

    let items: Vec<usize> = (0..images.names.len()).collect();
    let one = |&i: &usize| -> CliResult<ImageResult> {
        let name = &images.names[i];
        let img = &images.items[i];
        let clean = tokenize_one(&model, img, &feats[i]).ctx(name)?;
        let spec = cfg.denoise.spec(kind, clean.height, clean.width);
        spec.validate()?;
        let seed = stage_seed(cfg.seed, &format!("{}/{name}", task.name()));
        let positions = match task {
            Task::Inpaint | Task::Outpaint => mask_positions(&spec),
            Task::Masked30 => random_mask(clean.k_l(), seed),
            _ => Vec::new(),
        };
        let oracle;
        let inner: &dyn LlmBackend = match &shared {
            Shared::Oracle => {
                oracle = OracleBackend::sequence(truths(task, &clean, &positions, spec.m, spec.n, &local)?);
                &oracle
            }
            Shared::Fixed(b) => b.as_ref(),
        };
        let llm = LoggingBackend::new(inner, &calls_dir.join(format!("{name}.jsonl")))?;
        let Restoration { map, report } = match task {
            Task::Inpaint | Task::Outpaint => run_mask_restoration(&clean, &llm, &spec, &local, seed),
            Task::Masked30 => run_masked_restoration(&clean, &llm, &spec, &local, seed),
            _ => {
                let polluted_img = pollute(cfg, task, img)?;
                let polluted = tokenize_one(&model, &polluted_img, &feats[i]).ctx(name)?;
                run_map_translation(&polluted, &clean, &llm, &spec, &local, seed)
            }
        }
        .ctx(name)?;
        let restored = detokenize_one(&model, &map).ctx(name)?;
        let map_path = maps_dir.join(format!("{name}.{MAP_EXT}"));
        save_token_map(&map_path, &map).ctx(map_path.display())?;
        let img_path = out_dir.join(format!("{name}.{IMAGE_EXT}"));
        save_image(&img_path, &restored).ctx(img_path.display())?;
        let matched = map
            .local_ids
            .iter()
            .zip(&clean.local_ids)
            .filter(|(a, b)| a == b)
            .count();
        Ok(ImageResult {
            report,
            psnr: psnr(&restored, img)?,
            matched,
            total: clean.k_l(),
        })
    };
    let results = parallel_map(&items, cap, one).into_iter().collect::<CliResult<Vec<_>>>()?;

    let mut total = RunReport {
        task: task.name().into(),
        ..Default::default()
    };
    let (mut matched, mut positions) = (0, 0);
    for r in &results {
        total.calls += r.report.calls;
        total.exact += r.report.exact;
        total.snapped += r.report.snapped;
        total.fallbacks += r.report.fallbacks;
        total.elapsed_ms += r.report.elapsed_ms;
        matched += r.matched;
        positions += r.total;
    }
    let mut report = EvalReport {
        metadata: metadata(cfg, task, results.len()),
        psnr: Some(PsnrStats::from_values(&results.iter().map(|r| r.psnr).collect::<Vec<_>>())),
        runs: vec![total],
        ..Default::default()
    };
    report
        .accuracy
        .insert(format!("{} token match", task.name()), matched as f64 / positions as f64);
    write_report(dir, &report)
}
