use std::collections::BTreeMap;

use scap_core::clique::{build_class_subsets, extract_cliques};
use scap_core::inference::{compose_image_prompt, compose_text_prompt, CombineMode};
use scap_core::learner::{learn_clique, LearnConfig, LearnedClique};
use scap_core::model::{argmax, class_probabilities, encode_image, text_features};
use scap_core::pipeline::{run_stream, BatchOutcome, SamplePrediction};
use scap_core::retention::{RetentionCache, RetentionEntry, TextRetentionState};
use scap_core::synthetic::{generate_synthetic, SyntheticSpec};
use scap_core::*;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 5,
        samples_per_class: 16,
        seed,
        ..SyntheticSpec::default()
    }
}

fn quick(config: RunConfig) -> RunConfig {
    RunConfig {
        batch_size: 20,
        steps: 10,
        ..config
    }
}

fn engine(config: &RunConfig, catalog: &ClassCatalog) -> Engine {
    Engine::with_aligned_encoders(config.clone(), catalog.clone()).unwrap()
}

fn zero_shot_probs(x: &ImageSample, e: &Engine) -> Vec<f64> {
    let p = e.params();
    let f = encode_image(x, &PromptTokens::zeros(1, p.image.token_dim()), p).unwrap();
    let t = text_features(&PromptTokens::zeros(1, p.text.token_dim()), p, e.catalog()).unwrap();
    class_probabilities(&f, &t, p.temp).unwrap()
}

/// Order-reversing threaded executor: results must not depend on scheduling.
struct Threaded;

impl Executor for Threaded {
    fn map<T: Sync, R: Send, F: Fn(&T) -> R + Sync + Send>(&self, items: &[T], f: F) -> Vec<R> {
        let f = &f;
        let mut out: Vec<(usize, R)> = std::thread::scope(|s| {
            let handles: Vec<_> = items
                .iter()
                .enumerate()
                .rev()
                .map(|(i, x)| s.spawn(move || (i, f(x))))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        out.sort_by_key(|(i, _)| *i);
        out.into_iter().map(|(_, r)| r).collect()
    }
}

struct Reference {
    caches: BTreeMap<usize, RetentionCache>,
    text: TextRetentionState,
}

/// Straight-line orchestration of one batch from the public pieces.
fn reference_batch(state: &mut Reference, batch: &[ImageSample], e: &Engine) -> Vec<(usize, Vec<f64>)> {
    let cfg = e.config();
    let params = e.params();
    let catalog = e.catalog();
    let zero_v = PromptTokens::zeros(1, params.image.token_dim());
    let zero_t = text_features(&PromptTokens::zeros(1, params.text.token_dim()), params, catalog).unwrap();
    let mut feats = Vec::new();
    let mut probs = Vec::new();
    for x in batch {
        let f = encode_image(x, &zero_v, params).unwrap();
        probs.push(class_probabilities(&f, &zero_t, params.temp).unwrap());
        feats.push(f);
    }
    let ids: Vec<u64> = batch.iter().map(|x| x.id).collect();
    let subsets = build_class_subsets(&ids, &feats, &probs, cfg.topk).unwrap();
    let lookup: BTreeMap<u64, &ImageSample> = batch.iter().map(|x| (x.id, x)).collect();
    let lc = LearnConfig {
        lambda: cfg.lambda,
        lr: cfg.lr,
        steps: cfg.steps,
        visual_tokens: cfg.prompt_tokens,
        text_tokens: cfg.prompt_tokens,
        learn_visual: cfg.image_prompting,
        learn_text: cfg.text_prompting,
        seed: cfg.seed,
    };
    let mut learned: BTreeMap<usize, Vec<LearnedClique>> = BTreeMap::new();
    for (&class, s) in &subsets {
        for (k, c) in extract_cliques(s, cfg.threshold).cliques.iter().enumerate() {
            learned
                .entry(class)
                .or_default()
                .push(learn_clique(c, k, &lookup, params, catalog, &lc).unwrap());
        }
    }
    for (&class, list) in &learned {
        for l in list {
            state.text.update(&l.prompts.text).unwrap();
            let cache = state
                .caches
                .entry(class)
                .or_insert_with(|| RetentionCache::new(class, cfg.cache_size).unwrap());
            cache
                .insert(
                    RetentionEntry {
                        key: l.attribute.clone(),
                        value: l.prompts.visual.clone(),
                    },
                    &cfg.graph(),
                )
                .unwrap();
        }
    }
    let mut out = Vec::new();
    for (j, x) in batch.iter().enumerate() {
        let mut dists: Vec<Vec<f64>> = Vec::new();
        for (&class, s) in &subsets {
            if !s.member_ids.contains(&x.id) {
                continue;
            }
            let all = learned.get(&class).map(Vec::as_slice).unwrap_or(&[]);
            let mine: Vec<&PromptTokens> = all
                .iter()
                .filter(|l| l.clique.member_ids.contains(&x.id))
                .map(|l| &l.prompts.visual)
                .collect();
            let matched = state.caches.get(&class).and_then(|c| c.best_match(&feats[j])).map(|(_, en)| &en.value);
            if mine.is_empty() && matched.is_none() {
                continue;
            }
            let image = compose_image_prompt(&mine, matched, cfg.combine_mode).unwrap();
            let texts: Vec<&PromptTokens> = all.iter().map(|l| &l.prompts.text).collect();
            let text = compose_text_prompt(&texts, &state.text, cfg.alpha_r).unwrap();
            let f = encode_image(x, &image, params).unwrap();
            let t = text_features(&text, params, catalog).unwrap();
            dists.push(class_probabilities(&f, &t, params.temp).unwrap());
        }
        if dists.is_empty() {
            out.push((argmax(&probs[j]), probs[j].clone()));
            continue;
        }
        let n = dists.len() as f64;
        let mean: Vec<f64> = (0..dists[0].len()).map(|c| dists.iter().map(|d| d[c]).sum::<f64>() / n).collect();
        out.push((argmax(&mean), mean));
    }
    out
}

fn assert_matches_reference(got: &[SamplePrediction], want: &[(usize, Vec<f64>)]) {
    assert_eq!(got.len(), want.len());
    for (g, (label, p)) in got.iter().zip(want) {
        assert_eq!(g.predicted, *label, "sample {}", g.sample_id);
        for (a, b) in g.probs.iter().zip(p) {
            assert!((a - b).abs() < 1e-12, "sample {}: {a} vs {b}", g.sample_id);
        }
    }
}

#[test]
fn three_batches_match_straight_line_reference() {
    for (alpha_r, combine) in [(1.0, CombineMode::Concat), (0.4, CombineMode::Mean)] {
        let (samples, catalog) = generate_synthetic(&small_spec(2), EncoderMode::TokenEncoder).unwrap();
        let cfg = quick(RunConfig {
            alpha_r,
            combine_mode: combine,
            cache_size: 2,
            ..RunConfig::default()
        });
        let mut e = engine(&cfg, &catalog);
        let mut reference = Reference {
            caches: BTreeMap::new(),
            text: TextRetentionState::new(cfg.prompt_tokens, cfg.token_dim),
        };
        let mut saw_cache_only = false;
        for batch in samples.chunks(cfg.batch_size).take(3) {
            let out = e.run_batch(batch, &Sequential).unwrap();
            let want = reference_batch(&mut reference, batch, &e);
            assert_matches_reference(&out.predictions, &want);
            saw_cache_only |= out.predictions.iter().any(|p| !p.contexts.is_empty() && p.cliques.is_empty());
            assert_eq!(e.state().text, reference.text);
            assert_eq!(e.state().caches, reference.caches);
        }
        assert!(saw_cache_only, "no prediction exercised a cache-only context");
    }
}

#[test]
fn no_clique_batch_is_zero_shot() {
    let (samples, catalog) = generate_synthetic(&small_spec(0), EncoderMode::TokenEncoder).unwrap();
    let cfg = quick(RunConfig {
        threshold: 1.5,
        ..RunConfig::default()
    });
    let mut e = engine(&cfg, &catalog);
    let out = e.run_batch(&samples[..20], &Sequential).unwrap();
    assert_eq!(out.stats.clique_count, 0);
    assert_eq!(out.stats.max_clique_size, 0);
    assert!(out.learned.is_empty());
    assert_eq!(e.state().text.count, 0);
    assert!(e.state().caches.is_empty());
    for (p, x) in out.predictions.iter().zip(&samples) {
        assert_eq!(p.probs, zero_shot_probs(x, &e));
        assert!(p.contexts.is_empty());
    }
}

#[test]
fn single_sample_batch_is_zero_shot() {
    let (samples, catalog) = generate_synthetic(&small_spec(0), EncoderMode::FeatureSpace).unwrap();
    let cfg = quick(RunConfig {
        mode: EncoderMode::FeatureSpace,
        ..RunConfig::default()
    });
    let mut e = engine(&cfg, &catalog);
    let out = e.run_batch(&samples[..1], &Sequential).unwrap();
    assert_eq!(out.stats.clique_count, 0);
    assert_eq!(e.state().text.count, 0);
    assert_eq!(out.predictions[0].probs, zero_shot_probs(&samples[0], &e));
    assert_eq!(e.state().batches_seen, 1);
    assert!(e.run_batch(&[], &Sequential).is_err());
}

#[test]
fn all_toggles_off_is_exact_zero_shot() {
    let (samples, catalog) = generate_synthetic(&small_spec(4), EncoderMode::TokenEncoder).unwrap();
    let cfg = quick(RunConfig::default()).zero_shot();
    let mut e = engine(&cfg, &catalog);
    let report = run_stream(&mut e, &samples, &Sequential).unwrap();
    for (p, x) in report.predictions.iter().zip(&samples) {
        let z = zero_shot_probs(x, &e);
        assert_eq!(p.probs, z);
        assert_eq!(p.predicted, argmax(&z));
    }
    let correct = samples
        .iter()
        .filter(|x| argmax(&zero_shot_probs(x, &e)) == x.label.unwrap())
        .count();
    assert_eq!(report.metrics.correct, correct);
    assert_eq!(report.metrics.labeled, samples.len());
    assert_eq!(e.state().text.count, 0);
}

#[test]
fn poisoned_labels_do_not_change_predictions() {
    let (samples, catalog) = generate_synthetic(&small_spec(5), EncoderMode::TokenEncoder).unwrap();
    let mut poisoned = samples.clone();
    for (i, x) in poisoned.iter_mut().enumerate() {
        x.label = if i % 3 == 0 { None } else { Some((x.label.unwrap() + 1) % 5) };
    }
    let cfg = quick(RunConfig::default());
    let a = run_stream(&mut engine(&cfg, &catalog), &samples, &Sequential).unwrap();
    let b = run_stream(&mut engine(&cfg, &catalog), &poisoned, &Sequential).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_ne!(a.metrics.correct, b.metrics.correct);
}

fn per_batch(e: &mut Engine, batches: &[&[ImageSample]]) -> Vec<BatchOutcome> {
    batches.iter().map(|b| e.run_batch(b, &Sequential).unwrap()).collect()
}

#[test]
fn retention_off_is_batch_order_independent() {
    let (samples, catalog) = generate_synthetic(&small_spec(6), EncoderMode::TokenEncoder).unwrap();
    let cfg = quick(RunConfig {
        retention: false,
        ..RunConfig::default()
    });
    let chunks: Vec<&[ImageSample]> = samples.chunks(20).collect();
    let forward = per_batch(&mut engine(&cfg, &catalog), &chunks);
    let reversed: Vec<&[ImageSample]> = chunks.iter().rev().copied().collect();
    let backward = per_batch(&mut engine(&cfg, &catalog), &reversed);
    for (f, b) in forward.iter().zip(backward.iter().rev()) {
        let strip = |o: &BatchOutcome| -> Vec<(u64, usize, Vec<f64>)> {
            o.predictions.iter().map(|p| (p.sample_id, p.predicted, p.probs.clone())).collect()
        };
        assert_eq!(strip(f), strip(b));
    }
}

#[test]
fn retention_on_depends_on_order_but_is_deterministic() {
    let (samples, catalog) = generate_synthetic(&small_spec(6), EncoderMode::TokenEncoder).unwrap();
    let cfg = quick(RunConfig::default());
    let chunks: Vec<&[ImageSample]> = samples.chunks(20).collect();
    let reversed: Vec<&[ImageSample]> = chunks.iter().rev().copied().collect();
    let flat = |c: &[&[ImageSample]]| -> Vec<ImageSample> { c.iter().flat_map(|b| b.iter().cloned()).collect() };
    let a1 = run_stream(&mut engine(&cfg, &catalog), &flat(&chunks), &Sequential).unwrap();
    let a2 = run_stream(&mut engine(&cfg, &catalog), &flat(&chunks), &Sequential).unwrap();
    let b1 = run_stream(&mut engine(&cfg, &catalog), &flat(&reversed), &Sequential).unwrap();
    let b2 = run_stream(&mut engine(&cfg, &catalog), &flat(&reversed), &Sequential).unwrap();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    let by_id = |r: &[SamplePrediction]| -> BTreeMap<u64, Vec<f64>> { r.iter().map(|p| (p.sample_id, p.probs.clone())).collect() };
    assert_ne!(by_id(&a1.predictions), by_id(&b1.predictions));
    for r in [&a1, &b1] {
        assert_eq!(r.metrics.samples, samples.len());
        for p in &r.predictions {
            assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.confidence == p.probs[p.predicted]);
        }
    }
}

#[test]
fn executor_choice_does_not_change_outputs() {
    let (samples, catalog) = generate_synthetic(&small_spec(7), EncoderMode::TokenEncoder).unwrap();
    let cfg = quick(RunConfig::default());
    let a = run_stream(&mut engine(&cfg, &catalog), &samples, &Sequential).unwrap();
    let b = run_stream(&mut engine(&cfg, &catalog), &samples, &Threaded).unwrap();
    assert_eq!(a, b);
}

#[test]
fn restored_state_continues_identically() {
    let (samples, catalog) = generate_synthetic(&small_spec(8), EncoderMode::TokenEncoder).unwrap();
    let cfg = quick(RunConfig::default());
    let mut e = engine(&cfg, &catalog);
    e.run_batch(&samples[..20], &Sequential).unwrap();
    let snapshot = e.state().clone();
    let cont = e.run_batch(&samples[20..40], &Sequential).unwrap();
    let mut fresh = engine(&cfg, &catalog);
    fresh.restore_state(snapshot).unwrap();
    let resumed = fresh.run_batch(&samples[20..40], &Sequential).unwrap();
    assert_eq!(cont, resumed);
    assert_eq!(resumed.batch_index, 1);
}

#[test]
fn restore_rejects_foreign_state() {
    let (samples, catalog) = generate_synthetic(&small_spec(8), EncoderMode::TokenEncoder).unwrap();
    let cfg = quick(RunConfig::default());
    let mut e = engine(&cfg, &catalog);
    e.run_batch(&samples[..20], &Sequential).unwrap();
    let snapshot = e.state().clone();
    assert!(!snapshot.caches.is_empty());

    let small = RunConfig { cache_size: 2, ..cfg.clone() };
    assert!(engine(&small, &catalog).restore_state(snapshot.clone()).is_err());
    let fewer = RunConfig { prompt_tokens: 3, ..cfg.clone() };
    assert!(engine(&fewer, &catalog).restore_state(snapshot.clone()).is_err());

    let mut moved = snapshot.clone();
    let (&k, c) = moved.caches.iter().next().unwrap();
    let c = c.clone();
    moved.caches.insert(k + 1000, c);
    let mut fresh = engine(&cfg, &catalog);
    assert!(fresh.restore_state(moved).is_err());
    assert_eq!(fresh.state().batches_seen, 0);
}

#[test]
fn single_batch_stream_equals_run_batch() {
    let (samples, catalog) = generate_synthetic(&small_spec(9), EncoderMode::TokenEncoder).unwrap();
    let cfg = RunConfig {
        batch_size: 80,
        ..quick(RunConfig::default())
    };
    let report = run_stream(&mut engine(&cfg, &catalog), &samples, &Sequential).unwrap();
    let out = engine(&cfg, &catalog).run_batch(&samples, &Sequential).unwrap();
    assert_eq!(report.predictions, out.predictions);
    assert_eq!(report.metrics.batches.len(), 1);
    assert_eq!(report.metrics.batches[0].stats, out.stats);
}

#[test]
fn entropies_stay_in_range() {
    let (samples, catalog) = generate_synthetic(&small_spec(3), EncoderMode::TokenEncoder).unwrap();
    let report = run_stream(&mut engine(&quick(RunConfig::default()), &catalog), &samples, &Sequential).unwrap();
    let (lo, hi) = report.metrics.entropy_range();
    assert!(lo >= 0.0 && hi <= (5f64).ln() + 1e-12, "{lo} {hi}");
    assert!(report.metrics.clique_count() > 0);
}

#[test]
fn invalid_configs_are_rejected() {
    let (_, catalog) = generate_synthetic(&small_spec(0), EncoderMode::TokenEncoder).unwrap();
    for bad in [
        RunConfig { batch_size: 0, ..RunConfig::default() },
        RunConfig { topk: 0, ..RunConfig::default() },
        RunConfig { lr: 0.0, ..RunConfig::default() },
        RunConfig { alpha_r: 1.5, ..RunConfig::default() },
        RunConfig { temp: -1.0, ..RunConfig::default() },
        RunConfig { sigma: 0.0, ..RunConfig::default() },
        RunConfig { cache_size: 0, ..RunConfig::default() },
        RunConfig { threshold: f64::NAN, ..RunConfig::default() },
    ] {
        assert!(matches!(Engine::with_aligned_encoders(bad, catalog.clone()), Err(Error::InvalidConfig(_))));
    }
    let wrong_dim = ClassCatalog::from_names(vec!["a".into(), "b".into()], 8).unwrap();
    let params = EncoderParams::aligned(EncoderMode::TokenEncoder, 32, 32, 0.03, 0.07, 0).unwrap();
    assert!(Engine::new(RunConfig::default(), params, wrong_dim).is_err());
}
