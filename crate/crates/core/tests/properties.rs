//! Invariants that hold for any input, checked on generated cases.

use monoses::crossmap::{induce_dictionary, normalize_embeddings, self_learn, orthogonality_error, InductionMode, Retrieval, SelfLearnConfig};
use monoses::embeddings::EmbeddingSpace;
use monoses::ngram_lm::{LanguageModel, LmConfig};
use monoses::phrase_induction::{levenshtein, similarity, softmax_scores, subword_score};
use monoses::schedule::backtranslation_mix;
use monoses::{Phrase, Sentence};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn corpus() -> impl Strategy<Value = Vec<Sentence>> {
    prop::collection::vec(prop::collection::vec(0u8..6, 1..8), 1..25)
        .prop_map(|c| c.into_iter().map(|s| s.into_iter().map(|w| format!("w{w}")).collect()).collect())
}

fn histories(lm: &LanguageModel, corpus: &[Sentence]) -> Vec<Vec<u32>> {
    let mut out = std::collections::BTreeSet::new();
    for s in corpus {
        let ids: Vec<u32> = std::iter::once(lm.bos()).chain(s.iter().map(|w| lm.id(w))).collect();
        for end in 1..=ids.len() {
            for n in 0..lm.order().min(end + 1) {
                out.insert(ids[end - n..end].to_vec());
            }
        }
    }
    out.into_iter().collect()
}

fn random_space(rng: &mut ChaCha8Rng, names: &[String], dim: usize) -> EmbeddingSpace {
    let rows: Vec<Vec<f64>> = names
        .iter()
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    EmbeddingSpace::from_rows(names.iter().map(|n| Phrase::parse(n)).collect(), &rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_parts_sum_to_n(t in 0u64..100, n in 0u64..10_000_000, a in 1u64..100) {
        let mix = backtranslation_mix(t, n, a).unwrap();
        prop_assert_eq!(mix.total(), n);
        prop_assert!(mix.n_nmt_greedy >= mix.n_nmt_sampled);
        prop_assert!(mix.n_nmt_greedy - mix.n_nmt_sampled <= 1);
    }

    #[test]
    fn smt_share_never_grows_with_t(t in 0u64..100, n in 0u64..10_000_000, a in 1u64..100) {
        let now = backtranslation_mix(t, n, a).unwrap();
        let next = backtranslation_mix(t + 1, n, a).unwrap();
        prop_assert!(next.n_smt <= now.n_smt);
        if t >= a {
            prop_assert_eq!(now.n_smt, 0);
        }
    }

    #[test]
    fn kn_distributions_sum_to_one(corpus in corpus(), order in 1usize..5) {
        let lm = LanguageModel::train(&corpus, &LmConfig { order, ..Default::default() }).unwrap();
        let vocab: Vec<u32> = lm.vocabulary().map(|w| lm.id(w)).filter(|&w| w != lm.bos()).collect();
        for h in histories(&lm, &corpus) {
            let total: f64 = vocab.iter().map(|&w| 10f64.powf(lm.log10_prob(&h, w))).sum();
            prop_assert!((total - 1.0).abs() < 1e-6, "history {:?} sums to {}", h, total);
        }
    }

    #[test]
    fn trimmed_context_predicts_the_same(corpus in corpus(), order in 1usize..5, probe in prop::collection::vec(0u8..8, 0..8)) {
        let lm = LanguageModel::train(&corpus, &LmConfig { order, ..Default::default() }).unwrap();
        let mut full = vec![lm.bos()];
        let mut trimmed = full.clone();
        for w in probe.iter().map(|w| lm.id(&format!("w{w}"))).chain([lm.eos()]) {
            prop_assert_eq!(lm.log10_prob(&full, w), lm.log10_prob(&trimmed, w));
            full.push(w);
            trimmed.push(w);
            lm.trim_context(&mut trimmed);
            prop_assert!(trimmed.len() < order.max(1));
            prop_assert!(full.ends_with(&trimmed));
        }
    }

    #[test]
    fn softmax_is_a_distribution_preserving_order(cosines in prop::collection::vec(-1.0f64..1.0, 1..30), tau in 0.01f64..2.0) {
        let p = softmax_scores(&cosines, tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..p.len() {
            for j in 0..p.len() {
                if cosines[i] > cosines[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn edit_distance_is_a_metric(a in "[a-d]{0,7}", b in "[a-d]{0,7}", c in "[a-d]{0,7}") {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        let s = similarity(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn subword_scores_stay_between_floor_and_one(
        src in prop::collection::vec("[a-e]{1,6}", 1..4),
        tgt in prop::collection::vec("[a-e]{1,6}", 1..4),
        eps in 0.05f64..0.9,
    ) {
        let s = Phrase::from_tokens(&src);
        let t = Phrase::from_tokens(&tgt);
        let (fwd, bwd) = subword_score(&s, &t, eps);
        prop_assert!(fwd >= eps.powi(tgt.len() as i32) - 1e-12 && fwd <= 1.0);
        prop_assert!(bwd >= eps.powi(src.len() as i32) - 1e-12 && bwd <= 1.0);
        let (rf, rb) = subword_score(&t, &s, eps);
        prop_assert_eq!((fwd, bwd), (rb, rf));
    }

    #[test]
    fn retrieval_ignores_global_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = (0..30).map(|i| format!("p{i}")).collect();
        let a = random_space(&mut rng, &names, 6);
        let b = random_space(&mut rng, &names, 6);
        let scaled_rows: Vec<Vec<f64>> = (0..b.len()).map(|i| b.row(i).iter().map(|v| v * scale).collect()).collect();
        let scaled = EmbeddingSpace::from_rows(b.phrases().to_vec(), &scaled_rows).unwrap();
        for retrieval in [Retrieval::Cosine, Retrieval::CSLS] {
            let plain = induce_dictionary(&a, &b, InductionMode::Forward, retrieval);
            let moved = induce_dictionary(&a, &scaled, InductionMode::Forward, retrieval);
            prop_assert_eq!(plain.pairs(), moved.pairs());
        }
    }
}

#[test]
fn self_learning_keeps_maps_orthogonal_and_objective_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let names: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
    let src = random_space(&mut rng, &names, 12);
    // the target is a noisy rotation of the source with most names changed
    let q = nalgebra::DMatrix::<f64>::from_fn(12, 12, |_, _| rng.sample(StandardNormal)).qr().q();
    let rows: Vec<Vec<f64>> = (0..src.len())
        .map(|i| {
            let x = nalgebra::RowDVector::from_row_slice(src.row(i)) * &q;
            x.iter().map(|v| v + 0.01 * rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let tgt_names: Vec<Phrase> = (0..200)
        .map(|i| if i < 20 { Phrase::parse(&format!("w{i}")) } else { Phrase::parse(&format!("v{i}")) })
        .collect();
    let tgt = EmbeddingSpace::from_rows(tgt_names, &rows).unwrap();
    let src = normalize_embeddings(&src).unwrap();
    let tgt = normalize_embeddings(&tgt).unwrap();
    let result = self_learn(&src, &tgt, &SelfLearnConfig::default()).unwrap();
    assert!(orthogonality_error(&result.w_src) < 1e-6);
    assert!(orthogonality_error(&result.w_tgt) < 1e-6);
    for w in result.objectives.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "{:?}", result.objectives);
    }
    let hits = (20..200)
        .filter(|&i| result.dictionary.contains(&Phrase::parse(&format!("w{i}")), &Phrase::parse(&format!("v{i}"))))
        .count();
    assert!(hits >= 170, "{hits} of 180 recovered");
}
