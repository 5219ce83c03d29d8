use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rins_core::corpus::{Corpus, GrammarSpec, PackedRow};
use rins_core::eval::{copy_task, eval_mcq, score_option, IdTokenizer, McqItem, ScoreMode, TaskStyle, Tokenize};
use rins_core::model::RecursiveModel;
use rins_core::train::{eval_loss, train, EvalSet, TrainConfig, TrainStream};
use rins_core::{ModelDims, RecursionPolicy, Signature};

const EOS: u32 = 10;
const TOK: IdTokenizer = IdTokenizer { eos: EOS };

fn dims(seq_len: usize) -> ModelDims {
    ModelDims {
        d_model: 16,
        n_heads: 2,
        mlp_dim: 32,
        vocab: 11,
        seq_len,
        total_layers: 2,
    }
}

fn model(seq_len: usize, seed: u64) -> RecursiveModel {
    let sig = Signature::rins(2);
    RecursiveModel::new(&sig, dims(seq_len), RecursionPolicy::for_signature(&sig), seed).unwrap()
}

fn random_items(n: usize, seed: u64) -> Vec<McqItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = |len: usize| {
        (0..len)
            .map(|_| rng.random_range(0..10).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut items: Vec<McqItem> = (0..n)
        .map(|_| McqItem {
            id: None,
            context: seq(4),
            prefix: seq(2),
            options: (0..4).map(|_| seq(3)).collect(),
            gold_index: 0,
            style: TaskStyle::Plain,
        })
        .collect();
    for it in &mut items {
        it.gold_index = rng.random_range(0..4);
    }
    items
}

#[test]
fn untrained_model_is_at_chance() {
    let items = random_items(2000, 1);
    let m = model(16, 3);
    let rep = eval_mcq(&m, &TOK, &items, 1, ScoreMode::PerToken).unwrap();
    // 99% normal-approximation binomial interval around 1/4.
    let half_width = 2.576 * (0.25f64 * 0.75 / items.len() as f64).sqrt();
    assert!(
        (rep.accuracy - 0.25).abs() < half_width,
        "accuracy {} outside 0.25 +- {half_width}",
        rep.accuracy
    );
}

#[test]
fn permuting_options_keeps_accuracy() {
    let items = random_items(200, 2);
    let m = model(16, 4);
    let base = eval_mcq(&m, &TOK, &items, 2, ScoreMode::PerToken).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let permuted: Vec<McqItem> = items
        .iter()
        .map(|it| {
            let mut perm: Vec<usize> = (0..it.options.len()).collect();
            perm.shuffle(&mut rng);
            it.permuted(&perm)
        })
        .collect();
    let rep = eval_mcq(&m, &TOK, &permuted, 2, ScoreMode::PerToken).unwrap();
    assert_eq!(rep.accuracy, base.accuracy);
    // Every option's score is unchanged by its neighbours.
    let it = &items[0];
    let mut other = it.clone();
    other.options[1] = "9 9 9".into();
    let a = score_option(&m, &TOK, it, 0, 2, ScoreMode::PerToken).unwrap();
    let b = score_option(&m, &TOK, &other, 0, 2, ScoreMode::PerToken).unwrap();
    assert_eq!(a, b);
}

/// Full gold sequences of the items as training windows.
fn gold_rows(items: &[McqItem], seq_len: usize) -> Vec<PackedRow> {
    items
        .iter()
        .map(|it| {
            let mut w = vec![EOS];
            w.extend(TOK.encode(&it.context).unwrap());
            w.extend(TOK.encode(&it.prefix).unwrap());
            w.extend(TOK.encode(&it.options[it.gold_index]).unwrap());
            assert_eq!(w.len(), seq_len + 1);
            PackedRow {
                tokens: w[..seq_len].to_vec(),
                targets: w[1..].to_vec(),
                boundaries: vec![0],
                segments: vec![0; seq_len],
            }
        })
        .collect()
}

#[test]
fn memorized_copy_task_is_solved() {
    let items = copy_task(16, 8, 10, 4, 7);
    let seq_len = 16;
    let stream = TrainStream::new(gold_rows(&items, seq_len), None).unwrap();
    let cfg = TrainConfig {
        peak_lr: 1e-2,
        warmup_steps: 20,
        cooldown_steps: 50,
        batch_size: 16,
        eval_interval: 10_000,
        ..TrainConfig::with_steps(400)
    };
    let untrained = model(seq_len, 8);
    let (trained, out) = train(untrained.clone(), &stream, &[], cfg).unwrap();
    assert!(out.trace.last().unwrap().train_loss < 0.5);
    let rep = eval_mcq(&trained, &TOK, &items, 2, ScoreMode::PerToken).unwrap();
    assert_eq!(rep.accuracy, 1.0);
    // The memorized continuation scores strictly lowest.
    for it in &items {
        let scores: Vec<f64> = (0..4)
            .map(|o| score_option(&trained, &TOK, it, o, 2, ScoreMode::PerToken).unwrap())
            .collect();
        for (o, s) in scores.iter().enumerate() {
            if o != it.gold_index {
                assert!(scores[it.gold_index] < *s);
            }
        }
    }
}

#[test]
fn single_round_perplexity_equals_plain_model() {
    let g = GrammarSpec::random(4, 10, 8, 1);
    let corpus = Corpus::from_grammar(&g, 3000).unwrap();
    let set = EvalSet::from_tokens("heldout", &corpus.tokens, corpus.meta.eos, 12, 16).unwrap();
    let sig = Signature::rins(3);
    let policy = RecursionPolicy {
        p_skip: 0.5,
        ..RecursionPolicy::for_signature(&sig)
    };
    let rins = RecursiveModel::new(&sig, dims(12), policy, 2).unwrap();
    let ab = Signature::parse("AB", 1).unwrap();
    let plain = RecursiveModel::from_parts(ab.expand(), rins.dims, RecursionPolicy::for_signature(&ab), rins.params.clone()).unwrap();
    let a = eval_loss(&rins, &set, 1, false).unwrap();
    let b = eval_loss(&plain, &set, 1, false).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn stochastic_model_accepts_every_round_count() {
    let sig = Signature::rins(3);
    let policy = RecursionPolicy {
        p_skip: 0.5,
        adapters: true,
        ..RecursionPolicy::for_signature(&sig)
    };
    let m = RecursiveModel::new(&sig, dims(16), policy, 2).unwrap();
    let items = random_items(20, 3);
    for r in 1..=3 {
        assert_eq!(eval_mcq(&m, &TOK, &items, r, ScoreMode::PerToken).unwrap().n_items, 20);
    }
    assert!(eval_mcq(&m, &TOK, &items, 4, ScoreMode::PerToken).is_err());
}
