mod common;

use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use v2l_core::llm::OracleBackend;
use v2l_core::protocol::{
    build_caption_prompt, build_classification_prompt, build_denoise_prompt, build_vqa_prompt, copy_replacements,
    make_copies, make_paired_copies, mask_positions, masked_input, random_mask, run_map_translation,
    run_mask_restoration, run_masked_restoration, run_restoration, DenoiseSpec, DenoiseTask, FewShotSpec, Lexicon,
    MaskRect, ProtocolError,
};
use v2l_core::tokenizer::TokenMap;

use common::{local_lexicon, random_map, truth_for_mask, truth_for_translation};

fn global_lexicon() -> Lexicon {
    Lexicon::new(
        ["a", "photo", "of", "dog", "cat", "grass", "sky", "bird"]
            .map(String::from)
            .to_vec(),
    )
}

fn g(ids: &[u32]) -> TokenMap {
    TokenMap::new(ids.to_vec(), 1, 1, vec![0]).unwrap()
}

fn two_way(task_induction: bool, repetitions: usize, shots: usize) -> FewShotSpec {
    FewShotSpec {
        ways: 2,
        shots,
        task_induction,
        repetitions,
        labels: vec!["A".into(), "B".into()],
    }
}

fn cls_samples() -> Vec<(TokenMap, String)> {
    vec![(g(&[3, 5, 0]), "A".into()), (g(&[4, 6, 1]), "B".into())]
}

fn test_map() -> TokenMap {
    g(&[7, 2, 0])
}

#[test]
fn classification_golden() {
    let doc = build_classification_prompt(&two_way(true, 0, 1), &cls_samples(), &test_map(), &global_lexicon()).unwrap();
    assert_eq!(doc.rendered, include_str!("golden/classification_2way_1shot.txt"));
}

#[test]
fn caption_golden() {
    let samples = vec![
        (g(&[3, 5, 0]), "A dog on the grass".to_string()),
        (g(&[4, 6, 1]), "A cat under a blue sky.".to_string()),
    ];
    let doc = build_caption_prompt(&samples, &test_map(), &global_lexicon()).unwrap();
    assert_eq!(doc.rendered, include_str!("golden/caption_2shot.txt"));
}

#[test]
fn vqa_golden() {
    let samples = vec![
        (g(&[3, 5, 0]), "What animal is this?".to_string(), "dog".to_string()),
        (g(&[4, 6, 1]), "What is above the cat?".to_string(), "sky".to_string()),
    ];
    let doc = build_vqa_prompt(&samples, &test_map(), "What animal is this?", &global_lexicon()).unwrap();
    assert_eq!(doc.rendered, include_str!("golden/vqa_2shot.txt"));
}

#[test]
fn denoise_golden() {
    let lex = Lexicon::new(["\u{2581}a", "\u{2581}b", "\u{2581}c", "d", "e"].map(String::from).to_vec());
    let examples = vec![(vec![2, 3], vec![4, 2]), (vec![3, 3], vec![2, 4])];
    let doc = build_denoise_prompt(&lex, 2, &examples, &[2, 4]).unwrap();
    assert_eq!(doc.rendered, include_str!("golden/denoise_2copies.txt"));
}

#[test]
fn zero_samples_with_induction() {
    let doc = build_classification_prompt(&two_way(true, 0, 0), &[], &test_map(), &global_lexicon()).unwrap();
    assert_eq!(
        doc.rendered,
        "For each of the following input-output pairs, output is one of [\"A\", \"B\"]. Input: bird of a, output:"
    );
    let bare = build_classification_prompt(&two_way(false, 0, 0), &[], &test_map(), &global_lexicon()).unwrap();
    assert_eq!(bare.rendered, "Input: bird of a, output:");
}

#[test]
fn repetitions_duplicate_sample_blocks() {
    let lex = global_lexicon();
    let once = build_classification_prompt(&two_way(true, 0, 1), &cls_samples(), &test_map(), &lex).unwrap();
    let twice = build_classification_prompt(&two_way(true, 1, 1), &cls_samples(), &test_map(), &lex).unwrap();
    let count = |s: &str, pat: &str| s.matches(pat).count();
    for sample in ["Input: dog grass a, output: A.", "Input: cat sky photo, output: B."] {
        assert_eq!(count(&once.rendered, sample), 1);
        assert_eq!(count(&twice.rendered, sample), 2);
    }
    assert_eq!(count(&twice.rendered, "Input: "), 5);
    let block = "Input: dog grass a, output: A. Input: cat sky photo, output: B.";
    assert!(twice.rendered.contains(&format!("{block} {block} Input: bird")));
}

#[test]
fn full_sample_list_keeps_caller_order() {
    let mut samples = cls_samples();
    samples.reverse();
    samples.extend(cls_samples());
    let doc = build_classification_prompt(&two_way(false, 1, 1), &samples, &test_map(), &global_lexicon()).unwrap();
    let b = doc.rendered.find("output: B.").unwrap();
    let a = doc.rendered.find("output: A.").unwrap();
    assert!(b < a);
}

#[test]
fn classification_rejects_bad_inputs() {
    let lex = global_lexicon();
    let three = vec![cls_samples()[0].clone(); 3];
    assert!(matches!(
        build_classification_prompt(&two_way(true, 0, 1), &three, &test_map(), &lex),
        Err(ProtocolError::SampleCount { got: 3, .. })
    ));
    let wrong = vec![(g(&[0]), "A".to_string()), (g(&[1]), "C".to_string())];
    assert!(matches!(
        build_classification_prompt(&two_way(true, 0, 1), &wrong, &test_map(), &lex),
        Err(ProtocolError::UnknownLabel(l)) if l == "C"
    ));
    let bad_spec = FewShotSpec {
        labels: vec!["A".into()],
        ..two_way(true, 0, 1)
    };
    assert!(build_classification_prompt(&bad_spec, &cls_samples(), &test_map(), &lex).is_err());
    assert!(matches!(
        build_classification_prompt(&two_way(true, 0, 0), &[], &g(&[99]), &lex),
        Err(ProtocolError::UnknownId { id: 99, .. })
    ));
}

#[test]
fn ten_caption_samples() {
    let samples: Vec<(TokenMap, String)> = (0..10).map(|i| (g(&[i % 8, 1]), format!("caption {i}"))).collect();
    let doc = build_caption_prompt(&samples, &test_map(), &global_lexicon()).unwrap();
    assert_eq!(doc.rendered.matches("Input: ").count(), 11);
    assert_eq!(doc.rendered.matches(", output: ").count(), 10);
    assert!(doc.rendered.ends_with(" Input: bird of a, output:"));
}

#[test]
fn vqa_needs_a_question() {
    let lex = global_lexicon();
    assert!(matches!(
        build_vqa_prompt(&[], &test_map(), "", &lex),
        Err(ProtocolError::Input(_))
    ));
    assert!(build_vqa_prompt(&[], &test_map(), "   ", &lex).is_err());
    let doc = build_vqa_prompt(&[], &test_map(), "What is it", &lex).unwrap();
    assert!(doc.rendered.ends_with("Condition: bird of a. Question: What is it. Answer:"));
}

#[test]
fn corruption_counts_follow_the_schedule() {
    let spec = DenoiseSpec::default();
    let repl = copy_replacements(&spec, 1000, 3).unwrap();
    assert_eq!(repl.len(), 10);
    assert_eq!(repl[0].len(), 58);
    assert_eq!(repl[9].len(), 128);
    for (s, r) in repl.iter().enumerate() {
        let pct = 23 + 3 * s;
        assert_eq!(r.len(), (pct as f64 / 100.0 * 256.0).floor() as usize);
        let mut pos: Vec<usize> = r.iter().map(|p| p.0).collect();
        pos.sort_unstable();
        pos.dedup();
        assert_eq!(pos.len(), r.len());
        assert!(r.iter().all(|&(p, id)| p < 256 && id < 1000));
    }
}

#[test]
fn copies_are_seeded() {
    let spec = DenoiseSpec::default();
    let map = random_map(16, 16, 50, 1);
    let a = make_copies(&map, &spec, 50, 9).unwrap();
    assert_eq!(a, make_copies(&map, &spec, 50, 9).unwrap());
    assert_ne!(a, make_copies(&map, &spec, 50, 10).unwrap());
    assert!(a.iter().all(|c| c.global_ids == map.global_ids));
    let small = random_map(8, 8, 50, 1);
    assert!(make_copies(&small, &spec, 50, 9).is_err());
}

fn spec_for(task: DenoiseTask, h: usize, w: usize) -> DenoiseSpec {
    DenoiseSpec::for_grid(task, h, w)
}

#[test]
fn inpaint_closure_and_call_count() {
    let lex = local_lexicon(300);
    let map = random_map(16, 16, 300, 2);
    let spec = spec_for(DenoiseTask::Inpaint, 16, 16);
    let (oracle, expected) = truth_for_mask(&map, &mask_positions(&spec), 2, &lex);
    assert_eq!(expected, 32);
    let r = run_mask_restoration(&map, &oracle, &spec, &lex, 4).unwrap();
    assert_eq!(r.map, map);
    assert_eq!(r.report.calls, 32);
    assert_eq!(oracle.calls(), 32);
    assert_eq!((r.report.exact, r.report.snapped, r.report.fallbacks), (64, 0, 0));
}

#[test]
fn outpaint_closure() {
    let lex = local_lexicon(300);
    let map = random_map(16, 16, 300, 3);
    let spec = spec_for(DenoiseTask::Outpaint, 16, 16);
    let (oracle, expected) = truth_for_mask(&map, &mask_positions(&spec), 2, &lex);
    let r = run_mask_restoration(&map, &oracle, &spec, &lex, 5).unwrap();
    assert_eq!(r.map, map);
    assert_eq!(r.report.calls, expected);
    assert_eq!(expected, 64);
}

#[test]
fn zero_size_mask_makes_no_calls() {
    let lex = local_lexicon(40);
    let map = random_map(16, 16, 40, 3);
    let mut spec = spec_for(DenoiseTask::Inpaint, 16, 16);
    spec.mask = Some(MaskRect {
        row: 3,
        col: 3,
        rows: 0,
        cols: 0,
    });
    let oracle = OracleBackend::sequence(Vec::<String>::new());
    let r = run_mask_restoration(&map, &oracle, &spec, &lex, 0).unwrap();
    assert_eq!(r.map, map);
    assert_eq!(r.report.calls, 0);
}

#[test]
fn translation_closure_for_every_task() {
    let lex = local_lexicon(300);
    let clean = random_map(16, 16, 300, 6);
    for task in [DenoiseTask::Deblur, DenoiseTask::Rotate, DenoiseTask::Shift] {
        let spec = spec_for(task, 16, 16);
        let polluted = random_map(16, 16, 300, 7);
        let (oracle, expected) = truth_for_translation(&clean, 2, &lex);
        assert_eq!(expected, 128);
        let r = run_map_translation(&polluted, &clean, &oracle, &spec, &lex, 8).unwrap();
        assert_eq!(r.map.local_ids, clean.local_ids);
        assert_eq!(r.report.calls, 128);
        assert_eq!(r.report.task, task.name());

        let (oracle, _) = truth_for_translation(&clean, 2, &lex);
        let fixed = run_map_translation(&clean, &clean, &oracle, &spec, &lex, 8).unwrap();
        assert_eq!(fixed.map, clean);
    }
}

#[test]
fn task_kind_is_checked() {
    let lex = local_lexicon(40);
    let map = random_map(16, 16, 40, 3);
    let oracle = OracleBackend::sequence(Vec::<String>::new());
    let deblur = spec_for(DenoiseTask::Deblur, 16, 16);
    assert!(run_mask_restoration(&map, &oracle, &deblur, &lex, 0).is_err());
    let inpaint = spec_for(DenoiseTask::Inpaint, 16, 16);
    assert!(run_map_translation(&map, &map, &oracle, &inpaint, &lex, 0).is_err());
}

#[test]
fn thirty_percent_masking() {
    let lex = local_lexicon(300);
    let map = random_map(16, 16, 300, 11);
    let positions = random_mask(256, 12);
    assert_eq!(positions.len(), 76);
    assert_eq!(positions, random_mask(256, 12));
    assert_ne!(positions, random_mask(256, 13));
    let zeroed = masked_input(&map, &positions);
    assert!(positions.iter().all(|&p| zeroed.local_ids[p] == 0));

    let (oracle, expected) = truth_for_mask(&map, &positions, 2, &lex);
    let r = run_masked_restoration(&map, &oracle, &spec_for(DenoiseTask::Inpaint, 16, 16), &lex, 12).unwrap();
    assert_eq!(r.map, map);
    assert_eq!(r.report.calls, expected);
}

#[test]
fn later_calls_see_earlier_predictions() {
    let lex = local_lexicon(300);
    let map = random_map(16, 16, 300, 2);
    let spec = spec_for(DenoiseTask::Inpaint, 16, 16);
    let prompts = Arc::new(Mutex::new(Vec::new()));
    let seen = prompts.clone();
    let oracle = OracleBackend::from_fn(move |p, _| {
        seen.lock().unwrap().push(p.to_string());
        "\u{2581}t7 \u{2581}t9".to_string()
    });
    let r = run_mask_restoration(&map, &oracle, &spec, &lex, 4).unwrap();
    let prompts = prompts.lock().unwrap().clone();
    let first_ctx: Vec<u32> = map.local_ids[4 * 16 + 4 - 16..4 * 16 + 4].to_vec();
    let expect_first = format!("Input: {}, output:", lex.render(&first_ctx).unwrap());
    assert!(prompts[0].ends_with(&expect_first));
    assert!(prompts[1].ends_with("\u{2581}t7 \u{2581}t9, output:"));
    assert!(prompts[0].starts_with("Learn a new language and predict 2 tokens following the examples."));
    assert_eq!(prompts[0].matches(" Input: ").count(), 11);
    for p in mask_positions(&spec) {
        assert_eq!(r.map.local_ids[p], if p % 2 == 0 { 7 } else { 9 });
    }
}

#[test]
fn unusable_completions_fall_back() {
    let lex = local_lexicon(300);
    let map = random_map(16, 16, 300, 2);
    let spec = spec_for(DenoiseTask::Inpaint, 16, 16);
    let oracle = OracleBackend::from_fn(|_, _| "\u{2581}t12. ???".to_string());
    let r = run_mask_restoration(&map, &oracle, &spec, &lex, 4).unwrap();
    assert_eq!(r.report.exact, 32);
    assert_eq!(r.report.snapped, 0);
    assert_eq!(r.report.fallbacks, 32);
    assert!(mask_positions(&spec).iter().all(|&p| r.map.local_ids[p] == 12));

    let oracle = OracleBackend::from_fn(|_, _| "\u{2581}t5x \u{2581}t1zz".to_string());
    let r = run_mask_restoration(&map, &oracle, &spec, &lex, 4).unwrap();
    assert_eq!((r.report.snapped, r.report.fallbacks), (64, 0));
}

#[test]
fn restoration_rejects_bad_positions() {
    let lex = local_lexicon(40);
    let map = random_map(16, 16, 40, 3);
    let spec = spec_for(DenoiseTask::Inpaint, 16, 16);
    let oracle = OracleBackend::sequence(Vec::<String>::new());
    assert!(run_restoration(&map, &[5, 3], &oracle, &spec, &lex, 0).is_err());
    assert!(run_restoration(&map, &[256], &oracle, &spec, &lex, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn paired_copies_share_corruption(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        let spec = spec_for(DenoiseTask::Deblur, 16, 16);
        let p = random_map(16, 16, 64, a);
        let c = random_map(16, 16, 64, b);
        let pairs = make_paired_copies(&p, &c, &spec, 64, seed).unwrap();
        let plain = make_copies(&p, &spec, 64, seed).unwrap();
        for (s, (pc, cc)) in pairs.iter().enumerate() {
            prop_assert_eq!(pc, &plain[s]);
            let repl = &copy_replacements(&spec, 64, seed).unwrap()[s];
            for &(pos, id) in repl {
                prop_assert_eq!(pc.local_ids[pos], id);
                prop_assert_eq!(cc.local_ids[pos], id);
            }
            for i in 0..256 {
                if !repl.iter().any(|r| r.0 == i) {
                    prop_assert_eq!(pc.local_ids[i], p.local_ids[i]);
                    prop_assert_eq!(cc.local_ids[i], c.local_ids[i]);
                }
            }
        }
    }

    #[test]
    fn unmasked_positions_never_change(seed in any::<u64>(), noise in proptest::collection::vec("[a-z▁0-9 .]{0,12}", 1..8)) {
        let lex = local_lexicon(30);
        let map = random_map(16, 16, 30, seed);
        let positions = random_mask(256, seed);
        let oracle = OracleBackend::from_fn(move |_, i| noise[i % noise.len()].clone());
        let r = run_restoration(&map, &positions, &oracle, &spec_for(DenoiseTask::Inpaint, 16, 16), &lex, seed).unwrap();
        for i in 0..256 {
            if positions.binary_search(&i).is_err() {
                prop_assert_eq!(r.map.local_ids[i], map.local_ids[i]);
            }
        }
        prop_assert!(r.map.local_ids.iter().all(|&id| id < 30));
        prop_assert_eq!(r.report.exact + r.report.snapped + r.report.fallbacks, positions.len());
    }

    #[test]
    fn mask_closure_on_any_grid(h in 2usize..12, w in 2usize..12, seed in any::<u64>(), m in 1usize..4, n in 0usize..20) {
        let lex = local_lexicon(50);
        let map = random_map(h, w, 50, seed);
        for task in [DenoiseTask::Inpaint, DenoiseTask::Outpaint] {
            let mut spec = spec_for(task, h, w);
            spec.m = m;
            spec.n = n;
            let (oracle, expected) = truth_for_mask(&map, &mask_positions(&spec), m, &lex);
            let r = run_mask_restoration(&map, &oracle, &spec, &lex, seed).unwrap();
            prop_assert_eq!(&r.map, &map);
            prop_assert_eq!(r.report.calls, expected);
        }
    }

    #[test]
    fn segments_render_to_the_same_text(ids in proptest::collection::vec(0u32..8, 0..6), labels in 0usize..2) {
        let lex = global_lexicon();
        let local = local_lexicon(8);
        let label = ["A", "B"][labels].to_string();
        let samples = vec![(g(&ids), "A".to_string()), (g(&ids), label)];
        let doc = build_classification_prompt(&two_way(true, 0, 1), &samples, &g(&ids), &lex).unwrap();
        prop_assert_eq!(doc.render_with(&lex, &local).unwrap(), doc.rendered.clone());
        let d2 = build_denoise_prompt(&local, 2, &[(ids.clone(), ids.clone())], &ids).unwrap();
        prop_assert_eq!(d2.render_with(&lex, &local).unwrap(), d2.rendered);
    }
}
