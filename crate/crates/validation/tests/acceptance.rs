//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (bypassing the harness capture) before asserting.

use std::io::Write;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use fairpriv_core::bias::{becpro_score, stereoset_score, weat_vectors, PermutationMode};
use fairpriv_core::cda::{OovPolicy, WordPairTable};
use fairpriv_core::corpus::{CorpusSplit, TokenSequence, Vocabulary};
use fairpriv_core::data;
use fairpriv_core::experiment::{run_matrix, ArmLabel, ExperimentConfig, MatrixOutput};
use fairpriv_core::mia::{AttackConfig, ReferenceCache};
use fairpriv_core::model::{LmSnapshot, ModelConfig, Provenance, TinyLm, TrainScope};
use fairpriv_core::trainer::{epsilon_of, gaussian_noise, train, DPConfig, OptimizerKind, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: u32, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {criterion:>2}: {verdict}  {detail}");
}

fn tiny_config(vocab_size: usize, scope: TrainScope, dropout: f64) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        context_len: 10,
        dropout,
        lora_rank: 2,
        init_std: 0.3,
        seed: 41,
        scope,
    }
}

fn random_seqs(n: usize, len: usize, vocab: u32, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TokenSequence::new((0..len).map(|_| rng.random_range(2..vocab)).collect()))
        .collect()
}

fn toy_vocab(n: usize) -> Arc<Vocabulary> {
    Arc::new(Vocabulary::from_tokens((0..n).map(|i| format!("w{i}")), true))
}

#[test]
fn c01_gradient_matches_finite_differences() {
    let start = Instant::now();
    let mut model = TinyLm::new(tiny_config(13, TrainScope::Full, 0.0)).unwrap();
    let seq = random_seqs(1, 10, 13, 3).remove(0);
    let analytic = model.per_example_gradient(&seq).unwrap();
    let base = model.trainable_params();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut idx: Vec<usize> = (0..base.len()).collect();
    idx.shuffle(&mut rng);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &i in &idx[..100] {
        let mut p = base.clone();
        p[i] = base[i] + h;
        model.set_trainable_params(&p).unwrap();
        let up = model.loss(&seq).unwrap();
        p[i] = base[i] - h;
        model.set_trainable_params(&p).unwrap();
        let down = model.loss(&seq).unwrap();
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.values()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-4 && secs < 10.0;
    report(1, ok, &format!("max relative error {worst:.2e} over 100 parameters in {secs:.2}s"));
    assert!(ok);
}

fn dp_fixture(n: usize) -> (TinyLm, Arc<Vocabulary>, CorpusSplit) {
    let vocab = toy_vocab(10);
    let model = TinyLm::new(tiny_config(vocab.len(), TrainScope::Lora, 0.0)).unwrap();
    let split = CorpusSplit {
        train: random_seqs(n, 10, vocab.len() as u32, 11),
        dev: Vec::new(),
        ratio: 1.0,
    };
    (model, vocab, split)
}

#[test]
fn c02_dp_mechanics() {
    let (model, vocab, split) = dp_fixture(24);

    let tc = TrainConfig {
        epochs: 1,
        learning_rate: 1e-2,
        batch_size: 2,
        accumulation_steps: 2,
        optimizer: OptimizerKind::Adam,
        dropout: 0.1,
        seed: 5,
        audit_clipping: true,
    };
    let dp = DPConfig {
        enabled: true,
        clip_norm: 0.05,
        noise_multiplier: 1.0,
        ..DPConfig::default()
    };
    let audited = train(model.clone(), vocab.clone(), &split, &tc, &dp, "audit");
    let max_norm = audited
        .as_ref()
        .ok()
        .and_then(|o| o.metrics[0].max_clipped_norm)
        .unwrap_or(f64::INFINITY);
    let a = max_norm <= dp.clip_norm;

    let sgd = TrainConfig {
        epochs: 1,
        learning_rate: 0.05,
        batch_size: 1,
        accumulation_steps: 2,
        optimizer: OptimizerKind::Sgd,
        dropout: 0.0,
        seed: 9,
        audit_clipping: false,
    };
    let (model, vocab, split) = dp_fixture(20);
    let no_noise = DPConfig {
        enabled: true,
        clip_norm: 1e9,
        noise_multiplier: 0.0,
        ..DPConfig::default()
    };
    let dp_run = train(model.clone(), vocab.clone(), &split, &sgd, &no_noise, "dp").unwrap();
    let plain = train(model, vocab, &split, &sgd, &DPConfig::default(), "plain").unwrap();
    let (x, y) = (dp_run.final_snapshot().model().params(), plain.final_snapshot().model().params());
    let diff = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = diff / scale;
    let b = dp_run.privacy.steps == 10 && rel <= 1e-9;

    let (sigma, c) = (2.0, 1.0);
    let noise = gaussian_noise(10_000, sigma, c, &mut ChaCha8Rng::seed_from_u64(1));
    let mean = noise.iter().sum::<f64>() / noise.len() as f64;
    let std = (noise.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / noise.len() as f64).sqrt();
    let dev = (std / (sigma * c) - 1.0).abs();
    let cc = dev <= 0.03;

    let ok = a && b && cc;
    report(
        2,
        ok,
        &format!(
            "(a) max clipped norm {max_norm:.6} <= C={}; (b) {} steps, relative diff {rel:.2e}; (c) noise std {std:.4} vs {:.1} ({:.2}%)",
            dp.clip_norm,
            dp_run.privacy.steps,
            sigma * c,
            100.0 * dev
        ),
    );
    assert!(ok);
}

fn oracle_epsilon(sigma: f64, steps: f64, delta: f64) -> f64 {
    let mut best = f64::INFINITY;
    let mut k = 1u64;
    loop {
        let alpha = 1.0 + k as f64 * 1e-3;
        if alpha > 2000.0 {
            return best;
        }
        best = best.min(steps * alpha / (2.0 * sigma * sigma) + (1.0 / delta).ln() / (alpha - 1.0));
        k += 1;
    }
}

fn three_sig(x: f64) -> String {
    format!("{x:.2e}")
}

#[test]
fn c03_accountant() {
    let cfg = |sigma: f64, delta: f64| DPConfig {
        enabled: true,
        noise_multiplier: sigma,
        delta,
        ..DPConfig::default()
    };
    let ours = epsilon_of(&cfg(1.0, 1e-5), 1).value();
    let oracle = oracle_epsilon(1.0, 1.0, 1e-5);
    let matches = three_sig(ours) == three_sig(oracle);

    let ts = [1usize, 10, 100];
    let sigmas = [0.7, 1.0, 2.0];
    let deltas = [1e-7, 1e-5, 1e-3];
    let eps = |t: usize, s: f64, d: f64| epsilon_of(&cfg(s, d), t).value();
    let mut monotone = true;
    for (i, &t) in ts.iter().enumerate() {
        for (j, &s) in sigmas.iter().enumerate() {
            for (k, &d) in deltas.iter().enumerate() {
                let e = eps(t, s, d);
                if i + 1 < ts.len() {
                    monotone &= eps(ts[i + 1], s, d) >= e;
                }
                if j + 1 < sigmas.len() {
                    monotone &= eps(t, sigmas[j + 1], d) <= e;
                }
                if k + 1 < deltas.len() {
                    monotone &= eps(t, s, deltas[k + 1]) <= e;
                }
            }
        }
    }
    let ok = matches && monotone;
    report(
        3,
        ok,
        &format!("epsilon {ours:.4} vs fine-grid {oracle:.4}; monotone over 27 points: {monotone}"),
    );
    assert!(ok);
}

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    dot / (nu.sqrt() * nv.sqrt())
}

struct OracleWeat {
    statistic: f64,
    effect: f64,
    p: f64,
}

fn oracle_weat(a: &[Vec<f64>], b: &[Vec<f64>], x: &[Vec<f64>], y: &[Vec<f64>]) -> OracleWeat {
    let s = |w: &Vec<f64>| {
        x.iter().map(|v| cos(w, v)).sum::<f64>() / x.len() as f64
            - y.iter().map(|v| cos(w, v)).sum::<f64>() / y.len() as f64
    };
    let sa: Vec<f64> = a.iter().map(s).collect();
    let sb: Vec<f64> = b.iter().map(s).collect();
    let statistic = sa.iter().sum::<f64>() - sb.iter().sum::<f64>();
    let all: Vec<f64> = sa.iter().chain(&sb).copied().collect();
    let mu = all.iter().sum::<f64>() / all.len() as f64;
    let sd = (all.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    let effect = (sa.iter().sum::<f64>() / sa.len() as f64 - sb.iter().sum::<f64>() / sb.len() as f64) / sd;

    let n = all.len();
    let mut hits = 0;
    let mut total = 0;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        total += 1;
        let (mut left, mut right) = (0.0, 0.0);
        for (i, v) in all.iter().enumerate() {
            if mask & (1 << i) != 0 {
                left += v;
            } else {
                right += v;
            }
        }
        if left - right >= statistic - 1e-12 {
            hits += 1;
        }
    }
    OracleWeat {
        statistic,
        effect,
        p: hits as f64 / total as f64,
    }
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn c04_weat_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut worst_p = 0.0f64;
    for _ in 0..5 {
        let [a, b, x, y] = [(); 4].map(|_| random_set(&mut rng, 4, 8));
        let ours = weat_vectors(&a, &b, &x, &y, PermutationMode::Exhaustive).unwrap();
        let oracle = oracle_weat(&a, &b, &x, &y);
        worst = worst
            .max((ours.statistic - oracle.statistic).abs())
            .max((ours.effect_size - oracle.effect).abs())
            .max((ours.p_value - oracle.p).abs());
        let sampled = weat_vectors(
            &a,
            &b,
            &x,
            &y,
            PermutationMode::Sampled {
                samples: 10_000,
                seed: 3,
            },
        )
        .unwrap();
        worst_p = worst_p.max((sampled.p_value - ours.p_value).abs());
    }
    let ok = worst <= 1e-9 && worst_p <= 0.02;
    report(
        4,
        ok,
        &format!("max deviation from oracle {worst:.2e}; exhaustive vs sampled p gap {worst_p:.4}"),
    );
    assert!(ok);
}

#[test]
fn c05_symmetry_suite() {
    // BEC-Pro on a model whose head is zero: every next-token distribution
    // is uniform.
    let set = data::becpro_templates();
    let mut words: Vec<String> = Vec::new();
    for t in &set.templates {
        words.extend(t.split_whitespace().filter(|w| !w.starts_with('<')).map(str::to_lowercase));
    }
    for (m, f) in &set.person_pairs {
        words.extend(m.split_whitespace().chain(f.split_whitespace()).map(str::to_lowercase));
    }
    for p in set.professions.all() {
        words.extend(p.split_whitespace().map(str::to_lowercase));
    }
    words.extend(["a", "an"].map(String::from));
    let vocab = Arc::new(Vocabulary::from_tokens(words.iter().map(String::as_str), true));
    let mut model = TinyLm::new(ModelConfig {
        context_len: 32,
        ..tiny_config(vocab.len(), TrainScope::Lora, 0.0)
    })
    .unwrap();
    let zeros = vec![0.0; model.tensor("head").unwrap().len()];
    model.set_tensor("head", &zeros).unwrap();
    let uniform = LmSnapshot::new(model, vocab, Provenance::default()).unwrap();
    let becpro = becpro_score(&uniform, &set).map(|r| r.score);
    let becpro_ok = becpro == Ok(50.0);

    // ss under a stereotype/anti-stereotype label swap.
    let items = data::stereoset_tiny();
    let mut stereo_words: Vec<String> = Vec::new();
    for it in &items {
        for s in [&it.context, &it.stereo, &it.anti, &it.meaningless] {
            stereo_words.extend(s.split_whitespace().map(str::to_lowercase));
        }
    }
    let svocab = Arc::new(Vocabulary::from_tokens(stereo_words.iter().map(String::as_str), true));
    let smodel = TinyLm::new(ModelConfig {
        context_len: 48,
        init_std: 1.0,
        seed: 3,
        ..tiny_config(svocab.len(), TrainScope::Lora, 0.0)
    })
    .unwrap();
    let snap = LmSnapshot::new(smodel, svocab, Provenance::default()).unwrap();
    let swapped: Vec<_> = items
        .iter()
        .cloned()
        .map(|mut it| {
            std::mem::swap(&mut it.stereo, &mut it.anti);
            it
        })
        .collect();
    let fwd = stereoset_score(&snap, &items).unwrap();
    let rev = stereoset_score(&snap, &swapped).unwrap();
    let ss_units_ok = rev.ss_counts.first_half_units() == 2 * fwd.ss_counts.total() - fwd.ss_counts.first_half_units();
    let ss_float_ok = rev.ss == 100.0 - fwd.ss;

    // WEAT target swap.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let [a, b, x, y] = [(); 4].map(|_| random_set(&mut rng, 5, 8));
    let f = weat_vectors(&a, &b, &x, &y, PermutationMode::Exhaustive).unwrap();
    let r = weat_vectors(&b, &a, &x, &y, PermutationMode::Exhaustive).unwrap();
    let weat_ok = r.statistic == -f.statistic && r.effect_size == -f.effect_size;

    // CDA involution with the shipped bidirectional pairs.
    let table = data::default_pair_table(true).unwrap();
    let mut bi = WordPairTable::new();
    for p in table.pairs().iter().filter(|p| p.bidirectional) {
        bi.add(p.clone(), "shipped", 0).unwrap();
    }
    let cda_words: Vec<String> = bi.sources().map(String::from).chain(["the", "of", "and"].map(String::from)).collect();
    let cvocab = Vocabulary::from_tokens(cda_words.iter().map(String::as_str), true);
    let compiled = bi.compile(&cvocab, OovPolicy::Error).unwrap();
    let seqs = random_seqs(1000, 24, cvocab.len() as u32, 8);
    let changed = seqs.iter().filter(|s| compiled.apply(s) != **s).count();
    let cda_ok = seqs.iter().all(|s| compiled.apply(&compiled.apply(s)) == *s) && changed > 0;

    let ok = becpro_ok && ss_units_ok && ss_float_ok && weat_ok && cda_ok;
    report(
        5,
        ok,
        &format!(
            "becpro(uniform) {becpro:?}; ss {:.4} -> {:.4} (half units exact: {ss_units_ok}, float exact: {ss_float_ok}); \
             weat antisymmetric: {weat_ok}; cda involution on 1000 sequences ({changed} changed): {cda_ok}",
            fwd.ss, rev.ss
        ),
    );
    assert!(ok);
}

fn overfit_matrix() -> &'static MatrixOutput {
    static OUT: OnceLock<MatrixOutput> = OnceLock::new();
    OUT.get_or_init(|| {
        let start = Instant::now();
        let out = run_matrix(&ExperimentConfig::overfit(), &ArmLabel::ALL, &[0, 1, 2]);
        let _ = writeln!(
            std::io::stderr(),
            "overfit matrix (6 arms x 3 seeds) finished in {:.1}s",
            start.elapsed().as_secs_f64()
        );
        out
    })
}

#[test]
fn c06_leakage_direction() {
    let start = Instant::now();
    let out = overfit_matrix();
    let secs = start.elapsed().as_secs_f64();
    let complete = out.records.iter().all(|r| r.is_complete());
    let end = |arm| out.report.row(arm).and_then(|r| r.leakage_end).unwrap_or(f64::NAN);
    let baseline = end(ArmLabel::Baseline);
    let dp = end(ArmLabel::Dp);
    let target = out
        .report
        .adjusted_row(ArmLabel::CdaDp)
        .and_then(|r| r.leakage_end)
        .unwrap_or(f64::NAN);
    let others: Vec<(String, f64)> = out
        .report
        .rows
        .iter()
        .chain(&out.report.adjusted)
        .filter(|r| r.arm != "cda+dp (adjusted)")
        .map(|r| (r.arm.clone(), r.leakage_end.unwrap_or(f64::NAN)))
        .collect();
    let lowest = others.iter().all(|(_, v)| target < *v);
    let ok = complete && baseline > dp && lowest && secs < 900.0;
    let listing: Vec<String> = others.iter().map(|(a, v)| format!("{a}={v:.3}")).collect();
    report(
        6,
        ok,
        &format!(
            "mean end recall baseline {baseline:.3} > dp {dp:.3}: {}; cda+dp adjusted {target:.3} is the minimum: {lowest} [{}]; {secs:.0}s",
            baseline > dp,
            listing.join(", ")
        ),
    );
    assert!(ok);
}

#[test]
fn c07_attack_calibration() {
    let out = overfit_matrix();
    let alpha = ExperimentConfig::overfit().attack.alpha;
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for r in &out.records {
        let summaries = r
            .leakage
            .iter()
            .flat_map(|l| std::iter::once(&l.standard).chain(&l.cda_adjusted))
            .chain(&r.end_attack)
            .chain(&r.end_attack_cda);
        for s in summaries {
            worst = worst.max(s.fpr);
            runs += 1;
        }
    }
    let calibrated = runs > 0 && worst <= alpha;

    let (model, vocab, split) = dp_fixture(30);
    let snap = LmSnapshot::new(model, vocab, Provenance::default()).unwrap();
    let (members, nonmembers) = split.train.split_at(20);
    let cache = ReferenceCache::new(&snap, members, nonmembers, "self").unwrap();
    let same = cache.attack(&snap, None, &AttackConfig::default()).unwrap();
    let ok = calibrated && same.recall() == 0.0;
    report(
        7,
        ok,
        &format!(
            "max FPR {worst:.3} <= {alpha} over {runs} attacks; identical snapshots recall {}",
            same.recall()
        ),
    );
    assert!(ok);
}

#[test]
fn c08_utility_direction() {
    let mut cfg = ExperimentConfig::desk();
    cfg.eval.bias = false;
    let out = run_matrix(&cfg, &[ArmLabel::Baseline, ArmLabel::Dp], &[0, 1, 2]);
    let complete = out.records.iter().all(|r| r.is_complete());
    let ppl = |arm| out.report.row(arm).and_then(|r| r.perplexity).unwrap_or(f64::NAN);
    let init = out.seeds.iter().map(|s| s.init_perplexity.perplexity).sum::<f64>() / out.seeds.len() as f64;
    let (baseline, dp) = (ppl(ArmLabel::Baseline), ppl(ArmLabel::Dp));
    let ok = complete && out.seeds.len() == 3 && baseline < init && dp >= baseline;
    report(
        8,
        ok,
        &format!(
            "mean perplexity init {init:.2}, baseline {baseline:.3}, dp {dp:.3}; {} seeds, incomplete runs: {:?}",
            out.seeds.len(),
            out.records.iter().filter(|r| !r.is_complete()).map(|r| (r.arm, r.seed, &r.status)).collect::<Vec<_>>()
        ),
    );
    assert!(ok);
}

#[test]
fn c09_lora_equivalence() {
    let cfg = ModelConfig {
        d_model: 12,
        n_heads: 3,
        lora_rank: 3,
        ..tiny_config(17, TrainScope::Lora, 0.1)
    };
    let with_adapters = TinyLm::new(cfg.clone()).unwrap();
    let mut plain = with_adapters.clone();
    for t in with_adapters.layout().tensors.iter().filter(|t| t.name.contains(".lora.")) {
        plain.set_tensor(&t.name, &vec![0.0; t.len()]).unwrap();
    }
    let mut identical = true;
    for s in random_seqs(8, 10, 17, 4) {
        let a = with_adapters.forward(&s).unwrap().logits;
        let b = plain.forward(&s).unwrap().logits;
        identical &= a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    let (d, r) = (cfg.d_model, cfg.lora_rank);
    let expected = cfg.n_layers * 2 * r * (d + d);
    let count = with_adapters.trainable_count();
    let ok = identical && count == expected;
    report(
        9,
        ok,
        &format!("zero-B logits bit-identical: {identical}; trainable {count} vs closed form {expected}"),
    );
    assert!(ok);
}

#[test]
fn c10_reproducibility() {
    let mut cfg = ExperimentConfig::overfit();
    cfg.train.epochs = 3;
    cfg.pretrain.epochs = 1;
    cfg.eval.bias = true;
    cfg.eval.permutation_samples = 200;
    let arms = [ArmLabel::Baseline, ArmLabel::CdaDp, ArmLabel::DropoutDp];
    let first = run_matrix(&cfg, &arms, &[4, 5]);
    let second = run_matrix(&cfg, &arms, &[4, 5]);
    let hashes = |m: &MatrixOutput| m.records.iter().map(|r| r.metrics_hash.clone()).collect::<Vec<_>>();
    let same_hash = hashes(&first) == hashes(&second);
    let recomputed = first.records.iter().all(|r| r.compute_metrics_hash() == r.metrics_hash);
    let ok = same_hash && recomputed && first.report == second.report && first.records.iter().all(|r| r.is_complete());
    report(
        10,
        ok,
        &format!("{} records, metrics hashes equal across repeats: {same_hash}", first.records.len()),
    );
    assert!(ok);
}
