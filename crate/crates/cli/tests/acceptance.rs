//! Acceptance run: one pass/fail line per criterion.
//!
//! Criteria 12 and 13 are desk-scale demonstrations and are reported, not
//! asserted. By default they run a reduced pipeline in a temp directory.
//! `ACCEPTANCE_FULL=1` runs `experiments/desk_demo.toml` at full scale under
//! the output root instead; `RINS_DEMO_DIR=<sweep dir>` only reports on runs
//! that already exist there.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rins_core::corpus::PackedRow;
use rins_core::eval::{copy_task, eval_mcq, render_template, IdTokenizer, McqItem, ScoreMode, TaskStyle, Tokenize};
use rins_core::ledger::{matched_steps, step_cost_units};
use rins_core::model::{kv_cache_bytes, sample_rounds, LayerParams, ModelParams};
use rins_core::scaling::{fit_power_law, log_grid, optimal_r, FitResult, RCurveFamily};
use rins_core::train::{train, TrainConfig, TrainStatus, TrainStream};
use rins_core::{CostMode, ModelDims, RecursionPolicy, RecursiveModel, Signature};
use rins_lab::report::{cmd_report, summary, ReportOptions};
use rins_lab::sweep::{cmd_sweep, SweepOptions};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1, 2

fn all_strings(max_len: usize, alphabet: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut frontier = vec![String::new()];
    for _ in 0..max_len {
        let next: Vec<String> = frontier
            .iter()
            .flat_map(|s| (0..alphabet).map(move |c| format!("{s}{}", (b'A' + c as u8) as char)))
            .collect();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn brute_expand(symbols: &[usize], distinct: usize, degree: u32) -> Vec<usize> {
    if degree == 1 {
        return symbols.to_vec();
    }
    let inner = brute_expand(symbols, distinct, degree - 1);
    let width = distinct.pow(degree - 1);
    symbols
        .iter()
        .flat_map(|&s| inner.iter().map(move |&leaf| s * width + leaf))
        .collect()
}

fn relabel(seq: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    seq.iter()
        .map(|&x| {
            let n = map.len();
            *map.entry(x).or_insert(n)
        })
        .collect()
}

fn brute_mask(flat: &[usize], degree: u32, len: usize) -> Vec<bool> {
    let r = flat.len() - 1;
    let rins = degree == 1 && r >= 1 && flat[r] != flat[0] && flat[..r].iter().all(|&c| c == flat[0]);
    (0..len).map(|i| rins && i > 0 && i < r).collect()
}

fn signature_oracle() -> Check {
    let start = Instant::now();
    let mut cases = 0;
    for text in all_strings(4, 3) {
        let raw: Vec<usize> = text.bytes().map(|c| (c - b'A') as usize).collect();
        let canon = relabel(&raw);
        let distinct = canon.iter().max().unwrap() + 1;
        for degree in 1..=3 {
            let plan = Signature::parse(&text, degree).map_err(|e| format!("{text}: {e}"))?.expand();
            let want = relabel(&brute_expand(&canon, distinct, degree));
            let unique = want.iter().collect::<std::collections::BTreeSet<_>>().len();
            ensure(plan.leaf_sequence() == &want[..], || format!("{text}@d{degree}: sequence"))?;
            ensure(plan.unique_leaf_count() == unique, || format!("{text}@d{degree}: unique count"))?;
            ensure(plan.skip_eligible() == &brute_mask(&canon, degree, want.len())[..], || {
                format!("{text}@d{degree}: skip mask")
            })?;
            cases += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 1.0, || format!("took {secs:.3} s"))?;
    Ok(format!("{cases} signature/degree cases, {secs:.3} s"))
}

fn nested_literal() -> Check {
    let got = Signature::parse("ABB", 2).unwrap().expand().render();
    let spaced = got.chars().map(String::from).collect::<Vec<_>>().join(" ");
    ensure(spaced == "A B B C D D C D D", || format!("got {spaced}"))?;
    Ok(spaced)
}

// ---------------------------------------------------------------- 3

fn compute_matching() -> Check {
    let dims = ModelDims {
        d_model: 8,
        n_heads: 2,
        mlp_dim: 16,
        vocab: 11,
        seq_len: 5,
        total_layers: 4,
    };
    let plan = |s: &str| Signature::parse_tagged(s).unwrap().expand();
    let ab = plan("AB");
    let m = |v: &str| matched_steps(&ab, &plan(v), &dims, &dims, 200_000, CostMode::LayerPass).unwrap();
    // Oracle: every call of these plans has the same per-block cost, so the
    // budget scales with the call count alone.
    let by_calls = |calls: u64| 200_000 * 2 / calls;
    let got = [m("A^2B"), m("ABAB"), m("AB")];
    ensure(got == [133_333, 100_000, 200_000], || format!("got {got:?}"))?;
    ensure(got == [by_calls(3), by_calls(4), by_calls(2)], || "disagrees with call-count oracle".into())?;
    let six = ModelDims { total_layers: 6, ..dims };
    let abc = step_cost_units(&plan("ABC"), &six, CostMode::LayerPass).unwrap();
    let abbc = step_cost_units(&plan("ABBC"), &six, CostMode::LayerPass).unwrap();
    ensure(3 * abbc == 4 * abc, || format!("ABBC {abbc} vs ABC {abc}"))?;
    Ok(format!("{got:?}, ABBC/ABC = {abbc}/{abc}"))
}

// ---------------------------------------------------------------- 4 - 7

fn tiny_dims() -> ModelDims {
    ModelDims {
        d_model: 8,
        n_heads: 2,
        mlp_dim: 16,
        vocab: 11,
        seq_len: 5,
        total_layers: 4,
    }
}

const TOKENS: [u32; 5] = [3, 7, 1, 9, 4];
const TARGETS: [u32; 5] = [7, 1, 9, 4, 10];

fn jitter(params: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
    }
}

fn tiny_model(r_max: usize, adapters: bool, kv_share: bool, seed: u64) -> RecursiveModel {
    let sig = Signature::rins(r_max);
    let policy = RecursionPolicy {
        adapters,
        kv_share,
        ..RecursionPolicy::for_signature(&sig)
    };
    let mut m = RecursiveModel::new(&sig, tiny_dims(), policy, seed).unwrap();
    jitter(&mut m.params, seed + 100);
    m
}

fn max_fd_error(m: &RecursiveModel, rounds: usize) -> f64 {
    let (_, grads) = m.loss_and_grads(&TOKENS, &TARGETS, rounds).unwrap();
    let h = 1e-3;
    let mut probe = m.clone();
    let mut worst: f64 = 0.0;
    for ti in 0..grads.tensors().len() {
        for i in 0..grads.tensors()[ti].len() {
            let orig = probe.params.tensors()[ti][i];
            let mut at = |x: f64| {
                probe.params.tensors_mut()[ti][i] = x;
                probe.loss(&TOKENS, &TARGETS, rounds).unwrap()
            };
            let numeric = (-at(orig + 2.0 * h) + 8.0 * at(orig + h) - 8.0 * at(orig - h) + at(orig - 2.0 * h)) / (12.0 * h);
            probe.params.tensors_mut()[ti][i] = orig;
            let analytic = grads.tensors()[ti][i];
            let scale = analytic.abs().max(numeric.abs());
            let err = if scale < 1e-7 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}

fn gradient_check() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for rounds in 1..=3 {
        for adapters in [false, true] {
            for kv_share in [false, true] {
                let m = tiny_model(3, adapters, kv_share, 11);
                let err = max_fd_error(&m, rounds);
                ensure(err < 1e-4, || format!("rounds={rounds} adapters={adapters} kv={kv_share}: {err:e}"))?;
                worst = worst.max(err);
                configs += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{configs} configurations, max rel err {worst:.2e}, {secs:.1} s"))
}

fn layer_tensors(l: &LayerParams) -> Vec<&Vec<f64>> {
    vec![
        &l.wq, &l.wk, &l.wv, &l.wo, &l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias, &l.w1, &l.b1, &l.w2, &l.b2,
    ]
}

fn tied_gradient() -> Check {
    let tied = tiny_model(2, false, false, 21);
    let sig = Signature::parse("ABC", 1).unwrap();
    let dims = ModelDims {
        total_layers: 3 * tied.layers_per_block(),
        ..tied.dims
    };
    let mut clone = RecursiveModel::new(&sig, dims, RecursionPolicy::for_signature(&sig), 0).unwrap();
    let p = &tied.params;
    clone.params.token_embedding = p.token_embedding.clone();
    clone.params.position_embedding = p.position_embedding.clone();
    clone.params.blocks = vec![p.blocks[0].clone(), p.blocks[0].clone(), p.blocks[1].clone()];
    clone.params.final_gain = p.final_gain.clone();
    clone.params.final_bias = p.final_bias.clone();
    clone.params.head = p.head.clone();

    let (_, g_t) = tied.loss_and_grads(&TOKENS, &TARGETS, 2).unwrap();
    let (_, g_u) = clone.loss_and_grads(&TOKENS, &TARGETS, 1).unwrap();
    let mut max_diff: f64 = 0.0;
    for (l, layer) in g_t.blocks[0].iter().enumerate() {
        let (t, a1, a2) = (layer_tensors(layer), layer_tensors(&g_u.blocks[0][l]), layer_tensors(&g_u.blocks[1][l]));
        for k in 0..t.len() {
            for i in 0..t[k].len() {
                max_diff = max_diff.max((t[k][i] - (a1[k][i] + a2[k][i])).abs());
            }
        }
    }
    ensure(max_diff < 1e-10, || format!("max abs diff {max_diff:e}"))?;
    Ok(format!("max abs diff {max_diff:.2e}"))
}

fn single_round_equivalence() -> Check {
    let rins = tiny_model(3, false, false, 31);
    let ab = Signature::parse("AB", 1).unwrap();
    let plain =
        RecursiveModel::from_parts(ab.expand(), rins.dims, RecursionPolicy::for_signature(&ab), rins.params.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in 0..100 {
        let tokens: Vec<u32> = (0..5).map(|_| rng.random_range(0..11)).collect();
        let targets: Vec<u32> = (0..5).map(|_| rng.random_range(0..11)).collect();
        ensure(rins.forward(&tokens, 1).unwrap() == plain.forward(&tokens, 1).unwrap(), || format!("logits differ on input {n}"))?;
        let (la, ga) = rins.loss_and_grads(&tokens, &targets, 1).unwrap();
        let (lb, gb) = plain.loss_and_grads(&tokens, &targets, 1).unwrap();
        ensure(la.to_bits() == lb.to_bits() && ga == gb, || format!("loss or grads differ on input {n}"))?;
    }
    Ok("100 inputs bitwise equal".into())
}

fn adapter_noop() -> Check {
    let sig = Signature::rins(3);
    let off = RecursiveModel::new(&sig, tiny_dims(), RecursionPolicy::for_signature(&sig), 4).unwrap();
    let on = off
        .with_policy(RecursionPolicy {
            adapters: true,
            ..off.policy.clone()
        })
        .unwrap();
    for rounds in 1..=3 {
        let (a, b) = (off.forward(&TOKENS, rounds).unwrap(), on.forward(&TOKENS, rounds).unwrap());
        let same = a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("logits differ at rounds {rounds}"))?;
    }
    Ok(format!("{} adapter params, logits bitwise equal at rounds 1-3", on.params.adapter_count()))
}

// ---------------------------------------------------------------- 8, 9

fn random_rows(n: usize, seq_len: usize, vocab: u32, seed: u64) -> Vec<PackedRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let w: Vec<u32> = (0..=seq_len).map(|_| rng.random_range(0..vocab)).collect();
            PackedRow {
                tokens: w[..seq_len].to_vec(),
                targets: w[1..].to_vec(),
                boundaries: vec![],
                segments: vec![0; seq_len],
            }
        })
        .collect()
}

fn stochastic_sampling() -> Check {
    let sig = Signature::rins(3);
    let policy = RecursionPolicy {
        p_skip: 0.5,
        ..RecursionPolicy::for_signature(&sig)
    };
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[sample_rounds(&policy, &mut rng) - 1] += 1;
    }
    let expected = [0.25, 0.5, 0.25].map(|p| p * n as f64);
    let chi2: f64 = counts.iter().zip(expected).map(|(&o, e)| (o as f64 - e).powi(2) / e).sum();
    let critical = ChiSquared::new(2.0).unwrap().inverse_cdf(0.99);
    ensure(chi2 < critical, || format!("chi2 {chi2:.3} >= {critical:.3}"))?;
    let mean = (counts[0] + 2 * counts[1] + 3 * counts[2]) as f64 / n as f64;
    let sigma = (0.5 / n as f64).sqrt();
    ensure((mean - 2.0).abs() < 3.0 * sigma, || format!("mean {mean} outside 2 +- {}", 3.0 * sigma))?;

    let d = ModelDims {
        d_model: 2,
        n_heads: 1,
        mlp_dim: 2,
        vocab: 3,
        seq_len: 2,
        total_layers: 2,
    };
    let stream = TrainStream::new(random_rows(4, 2, 3, 2), None).unwrap();
    let mut rels = Vec::new();
    for p in [0.5, 0.8] {
        let policy = RecursionPolicy {
            p_skip: p,
            adapters: true,
            ..RecursionPolicy::for_signature(&sig)
        };
        let model = RecursiveModel::new(&sig, d, policy, 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 1,
            eval_interval: 100_000,
            seed: 3,
            divergence_factor: 1e9,
            ..TrainConfig::with_steps(10_000)
        };
        let (_, out) = train(model, &stream, &[], cfg).unwrap();
        ensure(out.status == TrainStatus::Completed, || format!("p={p}: {:?}", out.status))?;
        let rel = (out.realized_step_cost() - out.expected_step_cost).abs() / out.expected_step_cost;
        ensure(rel < 0.01, || format!("p={p}: realized cost off by {:.2}%", 100.0 * rel))?;
        rels.push(format!("p={p} {:.3}%", 100.0 * rel));
    }
    Ok(format!(
        "chi2 {chi2:.2} < {critical:.2}, mean {mean:.4}, cost error {}",
        rels.join(", ")
    ))
}

fn kv_accounting() -> Check {
    let mut sizes = Vec::new();
    for kv_share in [true, false] {
        let m = tiny_model(4, false, kv_share, 5);
        let bytes: Vec<usize> = (1..=4).map(|r| m.forward_with_cache(&TOKENS, r).unwrap().1.byte_size()).collect();
        for (i, &b) in bytes.iter().enumerate() {
            let r = i + 1;
            let want = if kv_share { bytes[0] } else { r * bytes[0] };
            ensure(b == want, || format!("kv_share={kv_share} rounds={r}: {b} bytes, want {want}"))?;
            let formula = kv_cache_bytes(&m.dims, &m.policy, r, std::mem::size_of::<f64>());
            ensure(b as u64 == formula, || format!("kv_share={kv_share} rounds={r}: {b} vs ledger {formula}"))?;
        }
        sizes.push(format!("{}: {bytes:?}", if kv_share { "shared" } else { "unshared" }));
    }
    Ok(sizes.join("; "))
}

// ---------------------------------------------------------------- 10

fn synthetic(beta: f64, c: f64, eps: f64) -> Vec<(f64, f64)> {
    log_grid(1e2, 1e6, 20).into_iter().map(|x| (x, beta * x.powf(-c) + eps)).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

fn exact_fit(beta: f64, c: f64, eps_inf: f64) -> FitResult {
    FitResult {
        beta,
        c,
        eps_inf,
        residual: 0.0,
        n_points: 20,
        x_min: 1e2,
        x_max: 1e8,
    }
}

fn scaling_recovery() -> Check {
    let clean = fit_power_law(&synthetic(2.0, 0.5, 0.1)).map_err(|e| e.to_string())?;
    let clean_err = [rel(clean.beta, 2.0), rel(clean.c, 0.5), rel(clean.eps_inf, 0.1)];
    ensure(clean_err.iter().all(|&e| e < 0.01), || format!("noiseless errors {clean_err:?}"))?;

    let noise = LogNormal::new(0.0, 0.01).unwrap();
    let mut errs = [vec![], vec![], vec![]];
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<_> = synthetic(2.0, 0.5, 0.1).into_iter().map(|(x, y)| (x, y * noise.sample(&mut rng))).collect();
        let f = fit_power_law(&pts).map_err(|e| e.to_string())?;
        errs[0].push(rel(f.beta, 2.0));
        errs[1].push(rel(f.c, 0.5));
        errs[2].push(rel(f.eps_inf, 0.1));
    }
    let medians: Vec<f64> = errs
        .into_iter()
        .map(|mut e| {
            e.sort_by(f64::total_cmp);
            0.5 * (e[9] + e[10])
        })
        .collect();
    ensure(medians.iter().all(|&m| m < 0.05), || format!("noisy medians {medians:?}"))?;

    let scaled: Vec<_> = synthetic(2.0, 0.5, 0.1).into_iter().map(|(x, y)| (1e3 * x, y)).collect();
    let f = fit_power_law(&scaled).map_err(|e| e.to_string())?;
    ensure(rel(f.c, clean.c) < 0.01, || format!("rescaled c {} vs {}", f.c, clean.c))?;

    let (a, b) = (exact_fit(1.0, 0.3, 1.0), exact_fit(4.0, 0.4, 0.8));
    let opt = optimal_r(&RCurveFamily::from([(1, a), (2, b)]), &log_grid(1e2, 1e8, 40)).map_err(|e| e.to_string())?;
    let g = |x: f64| a.predict(x) - b.predict(x);
    let (mut lo, mut hi) = (1e2f64, 1e8f64);
    let s_lo = g(lo).signum();
    for _ in 0..200 {
        let mid = ((lo.ln() + hi.ln()) / 2.0).exp();
        if g(mid).signum() == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let oracle = (lo * hi).sqrt();
    ensure(opt.breakpoints.len() == 1, || format!("{} breakpoints", opt.breakpoints.len()))?;
    let bp = opt.breakpoints[0].x_break;
    ensure(rel(bp, oracle) < 0.02, || format!("breakpoint {bp} vs bisection {oracle}"))?;
    Ok(format!(
        "noiseless max err {:.1e}, noisy medians {:.2}/{:.2}/{:.2}%, breakpoint off {:.3}%",
        clean_err.iter().fold(0.0f64, |m, &e| m.max(e)),
        100.0 * medians[0],
        100.0 * medians[1],
        100.0 * medians[2],
        100.0 * rel(bp, oracle)
    ))
}

// ---------------------------------------------------------------- 11

const EOS: u32 = 10;
const TOK: IdTokenizer = IdTokenizer { eos: EOS };

fn eval_model(seq_len: usize, seed: u64) -> RecursiveModel {
    let sig = Signature::rins(2);
    let dims = ModelDims {
        d_model: 16,
        n_heads: 2,
        mlp_dim: 32,
        vocab: 11,
        seq_len,
        total_layers: 2,
    };
    RecursiveModel::new(&sig, dims, RecursionPolicy::for_signature(&sig), seed).unwrap()
}

fn random_items(n: usize, seed: u64) -> Vec<McqItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut seq = |len: usize| (0..len).map(|_| rng.random_range(0..10).to_string()).collect::<Vec<_>>().join(" ");
            let (context, prefix) = (seq(4), seq(2));
            let options = (0..4).map(|_| seq(3)).collect();
            McqItem {
                id: None,
                context,
                prefix,
                options,
                gold_index: rng.random_range(0..4),
                style: TaskStyle::Plain,
            }
        })
        .collect()
}

fn eval_protocol() -> Check {
    let items = random_items(2000, 1);
    let chance = eval_mcq(&eval_model(16, 3), &TOK, &items, 1, ScoreMode::PerToken).map_err(|e| e.to_string())?;
    let half = 2.576 * (0.25f64 * 0.75 / items.len() as f64).sqrt();
    ensure((chance.accuracy - 0.25).abs() < half, || format!("untrained accuracy {}", chance.accuracy))?;

    let sub = &items[..200];
    let m = eval_model(16, 4);
    let base = eval_mcq(&m, &TOK, sub, 2, ScoreMode::PerToken).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let permuted: Vec<McqItem> = sub
        .iter()
        .map(|it| {
            let mut perm: Vec<usize> = (0..it.options.len()).collect();
            perm.shuffle(&mut rng);
            it.permuted(&perm)
        })
        .collect();
    let again = eval_mcq(&m, &TOK, &permuted, 2, ScoreMode::PerToken).unwrap();
    ensure(again.accuracy == base.accuracy, || format!("{} after permutation vs {}", again.accuracy, base.accuracy))?;

    let copy = copy_task(16, 8, 10, 4, 7);
    let rows: Vec<PackedRow> = copy
        .iter()
        .map(|it| {
            let mut w = vec![EOS];
            for part in [&it.context, &it.prefix, &it.options[it.gold_index]] {
                w.extend(TOK.encode(part).unwrap());
            }
            PackedRow {
                tokens: w[..16].to_vec(),
                targets: w[1..].to_vec(),
                boundaries: vec![0],
                segments: vec![0; 16],
            }
        })
        .collect();
    let cfg = TrainConfig {
        peak_lr: 1e-2,
        warmup_steps: 20,
        cooldown_steps: 50,
        batch_size: 16,
        eval_interval: 10_000,
        ..TrainConfig::with_steps(400)
    };
    let (trained, _) = train(eval_model(16, 8), &TrainStream::new(rows, None).unwrap(), &[], cfg).unwrap();
    let solved = eval_mcq(&trained, &TOK, &copy, 2, ScoreMode::PerToken).unwrap();
    ensure(solved.accuracy == 1.0, || format!("copy task accuracy {}", solved.accuracy))?;

    let boolq = McqItem {
        id: None,
        context: "P".into(),
        prefix: "Q".into(),
        options: vec!["yes".into(), "no".into()],
        gold_index: 0,
        style: TaskStyle::Boolq,
    };
    let text = render_template(TaskStyle::Boolq, &boolq, 0)?.text();
    ensure(text == "P Based on this, the answer to the question: Q, is: yes", || format!("boolq {text:?}"))?;
    let piqa = McqItem {
        context: String::new(),
        prefix: "Deep clean coffee grinder.".into(),
        options: vec!["Scrape with rice".into(), "Scrape with flour".into()],
        style: TaskStyle::Piqa,
        ..boolq
    };
    let text = render_template(TaskStyle::Piqa, &piqa, 0)?.text();
    ensure(text == "The goal is: Deep clean coffee grinder. The solution is: Scrape with rice.", || {
        format!("piqa {text:?}")
    })?;
    Ok(format!(
        "untrained {:.3} (chance 0.25 +- {half:.3}), permuted {:.3} = {:.3}, copy task {:.0}%, templates exact",
        chance.accuracy,
        again.accuracy,
        base.accuracy,
        100.0 * solved.accuracy
    ))
}

// ---------------------------------------------------------------- 12, 13

fn demo_file() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../experiments/desk_demo.toml")
}

fn set(table: &mut toml::Table, path: &[&str], value: toml::Value) {
    let (last, parents) = path.split_last().unwrap();
    let mut t = table;
    for p in parents {
        t = t.get_mut(*p).and_then(toml::Value::as_table_mut).unwrap();
    }
    t.insert(last.to_string(), value);
}

/// The demo sweep shrunk to a tiny model and a short baseline.
fn reduced_demo(out: &Path) -> PathBuf {
    let mut t: toml::Table = std::fs::read_to_string(demo_file()).unwrap().parse().unwrap();
    for (k, v) in [("d_model", 32), ("n_heads", 2), ("mlp_dim", 64), ("seq_len", 16), ("total_layers", 4)] {
        set(&mut t, &["base", "model", k], v.into());
    }
    for (k, v) in [("warmup_steps", 60), ("cooldown_steps", 150), ("eval_interval", 100), ("eval_rows", 32)] {
        set(&mut t, &["base", "train", k], v.into());
    }
    set(&mut t, &["base", "train", "peak_lr"], 3e-3.into());
    set(&mut t, &["base", "corpus", "grammar", "train_tokens"], 150_000.into());
    set(&mut t, &["base", "corpus", "grammar", "eval_tokens"], 8_000.into());
    set(&mut t, &["base", "baseline", "steps"], 1_500.into());
    set(&mut t, &["sweep", "output"], out.join("runs").display().to_string().into());
    let path = out.join("desk_demo_reduced.toml");
    std::fs::write(&path, toml::to_string(&t).unwrap()).unwrap();
    path
}

struct Demo {
    scale: &'static str,
    report: rins_lab::report::Report,
    out: PathBuf,
}

fn demo() -> Result<Demo, String> {
    let (scale, runs, out, _keep) = if let Ok(dir) = std::env::var("RINS_DEMO_DIR") {
        let dir = PathBuf::from(dir);
        ("existing runs", dir.clone(), dir.join("report"), None)
    } else if std::env::var("ACCEPTANCE_FULL").is_ok_and(|v| v == "1") {
        let m = cmd_sweep(&demo_file(), &SweepOptions { jobs: 1, ..Default::default() }).map_err(|e| e.to_string())?;
        let dir = rins_lab::output_root().join("desk_demo");
        ensure(m.failures() == 0, || format!("{} runs failed", m.failures()))?;
        ("full", dir.clone(), dir.join("report"), None)
    } else {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let file = reduced_demo(tmp.path());
        let m = cmd_sweep(&file, &SweepOptions { jobs: 1, ..Default::default() }).map_err(|e| e.to_string())?;
        ensure(m.failures() == 0, || format!("{} runs failed", m.failures()))?;
        let runs = tmp.path().join("runs");
        ("reduced", runs.clone(), runs.join("report"), Some(tmp))
    };
    let report = cmd_report(&[runs], &ReportOptions { out: Some(out.clone()), ..Default::default() }).map_err(|e| e.to_string())?;
    for f in ["comparison.csv", "curves.csv", "fits.csv"] {
        ensure(out.join(f).exists(), || format!("{f} not written"))?;
    }
    print!("{}", summary(&report).lines().map(|l| format!("       {l}\n")).collect::<String>());
    Ok(Demo { scale, report, out })
}

fn optimal_r_pattern(d: &Demo) -> Check {
    let p = d.report.pattern.as_ref().ok_or("no A^r B family was fitted")?;
    let fits: Vec<String> = p.rounds.iter().map(|r| format!("r={r} c={:.3} eps={:.3}", p.c[r], p.eps_inf[r])).collect();
    let place = if d.scale == "reduced" { "a temp dir".to_string() } else { d.out.display().to_string() };
    let detail = format!("{} scale; {}; CSVs written to {place}", d.scale, fits.join(", "));
    if p.held {
        Ok(format!("pattern held; {detail}"))
    } else {
        Err(format!(
            "pattern did not hold (cross {}, c up {}, eps down {}, r* monotone {}); {detail}",
            p.curves_cross, p.c_increases_with_r, p.eps_inf_decreases_with_r, p.rstar_nondecreasing
        ))
    }
}

fn no_regret(d: &Demo) -> Check {
    let checks = &d.report.no_regret;
    ensure(checks.len() == 2, || format!("{} stochastic runs matched to a baseline, want 2", checks.len()))?;
    let detail: Vec<String> = checks
        .iter()
        .map(|n| format!("p_s={} r1 {:.4} vs {:.4} ({:+.2}%)", n.p_skip, n.loss_r1, n.baseline_loss, 100.0 * n.relative_diff))
        .collect();
    let detail = format!("{} scale; {}", d.scale, detail.join(", "));
    ensure(checks.iter().all(|n| n.within_5_percent), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- main

fn run(n: usize, name: &str, asserted: bool, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let tag = if asserted { "" } else { " (reported)" };
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("[PASS] {n:>2} {name}{tag}: {detail} [{secs:.1} s]"),
        Err(detail) => println!("[FAIL] {n:>2} {name}{tag}: {detail} [{secs:.1} s]"),
    }
    outcome.is_ok() || !asserted
}

fn main() {
    let mut ok = true;
    ok &= run(1, "signature oracle equivalence", true, signature_oracle);
    ok &= run(2, "nested ABB expansion", true, nested_literal);
    ok &= run(3, "compute matching", true, compute_matching);
    ok &= run(4, "gradient finite differences", true, gradient_check);
    ok &= run(5, "tied gradient identity", true, tied_gradient);
    ok &= run(6, "rounds=1 equals plain AB", true, single_round_equivalence);
    ok &= run(7, "adapter no-op at init", true, adapter_noop);
    ok &= run(8, "stochastic round sampling and cost", true, stochastic_sampling);
    ok &= run(9, "KV-cache accounting", true, kv_accounting);
    ok &= run(10, "scaling-law recovery", true, scaling_recovery);
    ok &= run(11, "eval protocol", true, eval_protocol);
    match demo() {
        Ok(d) => {
            ok &= run(12, "desk-scale optimal-r pattern", false, || optimal_r_pattern(&d));
            ok &= run(13, "stochastic no-regret", false, || no_regret(&d));
        }
        Err(e) => {
            println!("[FAIL] 12 desk-scale optimal-r pattern: demo pipeline failed: {e}");
            println!("[FAIL] 13 stochastic no-regret: demo pipeline failed: {e}");
            ok = false;
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
