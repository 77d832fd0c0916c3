use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softpool::autodiff::Tape;
use softpool::compressor::{compressed_len, mean_pool, partition_blocks};
use softpool::dataset::{extract_answer, generate_corpus, Alphabet, CorpusSpec, Domain, Split};
use softpool::distillation::{clip_global_norm, global_norm};
use softpool::metrics::{exact_match, substring_accuracy, teacher_normalized, token_f1, MetricValues};
use softpool::model::{forward, AttentionMask, InputItem, ModelConfig, ModelWeights};
use softpool::{kl_divergence, softmax, ParamSet, Tensor};

fn probs(logits: &[f64]) -> Tensor<f64> {
    softmax(&Tensor::from_vec(logits.to_vec()).unwrap()).unwrap()
}

fn spec(seed: u64, pairs: usize, questions: usize, hops: usize, contexts: usize) -> CorpusSpec {
    CorpusSpec {
        n_contexts: contexts,
        pairs_per_context: pairs,
        questions_per_context: questions,
        keys: Alphabet::new("k", 16),
        values: Alphabet::new("v", 16),
        assign: ":".into(),
        separator: ";".into(),
        hops,
        seed,
        split: Split::Train,
        domain_tag: Domain::In,
        n_templates: 8,
    }
}

const WORDS: [&str; 8] = ["the", "cat", "a", "dog", "blue", "an", "sky", "red"];

fn phrase() -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len(), 0..6).prop_map(|ids| ids.into_iter().map(|i| WORDS[i]).collect::<Vec<_>>().join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(logits in prop::collection::vec(-80.0f64..80.0, 1..64)) {
        let p = probs(&logits);
        let total: f64 = p.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality(
        a in prop::collection::vec(-6.0f64..6.0, 2..24),
        shift in prop::collection::vec(-3.0f64..3.0, 24),
    ) {
        let q = probs(&a);
        let moved: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let p = probs(&moved);
        let kl = kl_divergence(&q, &p).unwrap();
        prop_assert!(kl >= -1e-12);
        prop_assert!(kl_divergence(&q, &q).unwrap().abs() < 1e-9);
        let gap = q.max_abs_diff(&p).unwrap();
        if gap > 1e-3 {
            prop_assert!(kl > 1e-9, "kl {kl} with max gap {gap}");
        }
    }

    #[test]
    fn elementwise_ops_reject_mismatched_shapes(r in 1usize..5, c in 1usize..5, extra in 1usize..3) {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![r, c]));
        let b = tape.constant(Tensor::zeros(vec![r, c + extra]));
        prop_assert!(tape.add(a, b).is_err());
        prop_assert!(tape.mul(a, b).is_err());
        prop_assert!(tape.matmul(a, a).is_err() || r == c);
        let col = tape.constant(Tensor::zeros(vec![r + extra, c]));
        prop_assert!(tape.concat(&[a, b], 0).is_err());
        prop_assert!(tape.concat(&[a, col], 1).is_err());
    }

    #[test]
    fn blocks_tile_the_context(len in 1usize..=512, r in 1usize..=128) {
        let blocks = partition_blocks(len, r);
        prop_assert_eq!(blocks.len(), compressed_len(len, r));
        prop_assert_eq!(blocks.len(), (len + r - 1) / r);
        let mut next = 0;
        for b in &blocks {
            prop_assert_eq!(b.start, next);
            prop_assert!(b.len() == r || b.end == len);
            next = b.end;
        }
        prop_assert_eq!(next, len);
    }

    #[test]
    fn pooling_preserves_the_overall_mean_on_full_blocks(k in 1usize..20, r in 1usize..9, d in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = k * r;
        let h = Tensor::new(vec![len, d], (0..len * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let z = mean_pool(&h, r).unwrap();
        for j in 0..d {
            let whole: f64 = (0..len).map(|i| h.at(i, j)).sum::<f64>() / len as f64;
            let pooled: f64 = (0..k).map(|i| z.at(i, j)).sum::<f64>() / k as f64;
            prop_assert!((whole - pooled).abs() < 1e-12);
        }
    }

    #[test]
    fn corpus_is_a_pure_function_of_its_spec(seed in any::<u64>(), pairs in 1usize..8, hops in 1usize..=2) {
        let questions = if hops == 2 { (pairs / 2).max(1) } else { pairs.min(3) };
        let pairs = if hops == 2 { pairs.max(2) } else { pairs };
        let s = spec(seed, pairs, questions, hops, 5);
        let a = generate_corpus(&s).unwrap();
        let b = generate_corpus(&s).unwrap();
        prop_assert_eq!(&a, &b);
        for rec in &a {
            prop_assert_eq!(extract_answer(&rec.context, &rec.question, ":"), Some(rec.answer.clone()));
        }
    }

    #[test]
    fn exact_match_implies_full_f1_and_containment(p in phrase(), g in phrase()) {
        if exact_match(&p, &g) == 1.0 && !softpool::metrics::normalize_answer(&g).is_empty() {
            prop_assert_eq!(token_f1(&p, &g), 1.0);
            prop_assert_eq!(substring_accuracy(&p, &g), 1.0);
        }
    }

    #[test]
    fn f1_is_symmetric_and_bounded(p in phrase(), g in phrase()) {
        let f = token_f1(&p, &g);
        prop_assert!((f - token_f1(&g, &p)).abs() < 1e-12);
        let m = MetricValues::of(&p, &g);
        for v in [m.em, m.f1, m.substring_acc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn teacher_normalized_is_affine_invariant(
        fc in 0.0f64..100.0, t in 0.0f64..100.0, none in 0.0f64..100.0,
        a in 0.01f64..10.0, b in -50.0f64..50.0,
    ) {
        prop_assume!((t - none).abs() > 1e-3);
        let plain = teacher_normalized(fc, t, none).unwrap();
        let moved = teacher_normalized(a * fc + b, a * t + b, a * none + b).unwrap();
        prop_assert!((plain - moved).abs() < 1e-6 * plain.abs().max(1.0));
    }

    #[test]
    fn clipping_bounds_the_global_norm(values in prop::collection::vec(-50.0f64..50.0, 1..40), max_norm in 0.01f64..5.0) {
        let mut g = ParamSet::new();
        g.insert("g", Tensor::from_vec(values).unwrap());
        let (before, after) = clip_global_norm(&mut g, max_norm);
        prop_assert!(after <= max_norm + 1e-6);
        prop_assert!((after - global_norm(&g)).abs() < 1e-9);
        if before <= max_norm {
            prop_assert!((before - after).abs() < 1e-12);
        }
    }
}

fn tiny_model(seed: u64, max_positions: usize) -> ModelWeights<f64> {
    let cfg = ModelConfig { vocab_size: 20, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_positions };
    ModelWeights::init_with_std(cfg, 0.2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn tokens(ids: &[usize]) -> Vec<InputItem<f64>> {
    ids.iter().map(|&t| InputItem::Token(t)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_mask_blocks_future_tokens(seed in any::<u64>(), ids in prop::collection::vec(0usize..20, 2..16), j_frac in 0.0f64..1.0) {
        let w = tiny_model(seed, 32);
        let n = ids.len();
        let j = 1 + ((n - 1) as f64 * j_frac) as usize % (n - 1);
        let mut changed = ids.clone();
        changed[j] = (changed[j] + 1) % 20;
        let mask = AttentionMask::causal(n).unwrap();
        let (a, _) = forward(&w, None, &tokens(&ids), &mask).unwrap();
        let (b, _) = forward(&w, None, &tokens(&changed), &mask).unwrap();
        for i in 0..j {
            prop_assert_eq!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn full_mask_lets_the_first_position_see_the_last(seed in any::<u64>(), ids in prop::collection::vec(0usize..20, 2..16)) {
        let w = tiny_model(seed, 32);
        let n = ids.len();
        let mut changed = ids.clone();
        changed[n - 1] = (changed[n - 1] + 1) % 20;
        let mask = AttentionMask::full(n).unwrap();
        let (a, _) = forward(&w, None, &tokens(&ids), &mask).unwrap();
        let (b, _) = forward(&w, None, &tokens(&changed), &mask).unwrap();
        let diff = a.row(0).iter().zip(b.row(0)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(diff > 1e-7, "diff {diff}");
    }
}

#[test]
fn forward_refuses_sequences_beyond_the_position_table() {
    let w = tiny_model(1, 8);
    let mask = AttentionMask::causal(9).unwrap();
    assert!(forward(&w, None, &tokens(&[1; 9]), &mask).is_err());
    let mask = AttentionMask::causal(8).unwrap();
    assert!(forward(&w, None, &tokens(&[1; 8]), &mask).is_ok());
}

#[test]
fn generated_examples_fit_the_default_budget() {
    use softpool::dataset::{TemplateLibrary, Tokenizer};
    use softpool::distillation::TrainingExample;
    let cfg = softpool::pipeline::RunConfig::default();
    let tok: Tokenizer = cfg.tokenizer();
    for domain in [Domain::In, Domain::Out] {
        let mut s = cfg.corpus_spec(Split::Eval, domain);
        s.n_contexts = 50;
        let lib = TemplateLibrary::builtin(domain);
        for rec in generate_corpus(&s).unwrap() {
            let ex = TrainingExample::from_record(&rec, &lib, &tok).unwrap();
            ex.check_budget(1024, 256).unwrap();
            ex.check_budget(cfg.distill.max_context, cfg.distill.max_answer).unwrap();
        }
    }
}
