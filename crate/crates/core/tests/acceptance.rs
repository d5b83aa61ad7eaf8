//! Acceptance gate. Each test prints one PASS/FAIL line to stderr (visible
//! without --nocapture) and then asserts it.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revlab::corpus::{Corpus, SplitLabel, Vocab};
use revlab::evalkit::{bleu, cosine_similarity, rouge_l, CountEmbedder};
use revlab::miprobe::{
    block_out_correlation, discretize, entropy, information_plane, mi_from_joint, mutual_information,
    BinningConfig, DimReduction,
};
use revlab::nn::{Graph, ParamId, ParamStore, Tensor};
use revlab::revertlm::{
    AttackerConfig, AttackerModel, DecoderShape, PurifierConfig, PurifierVariant,
};
use revlab::runner::{attack_at, execute, rerun, AttackRun, CorpusSource, RunConfig, Subcommand};
use revlab::splitproto::{deserialize_frame, run_session, serialize_frame, Transport};
use revlab::tinylm::{split, train_victim, Arch, Batch, ModelConfig, TapPoint, TapPosition, VictimModel};

const METRIC_ORACLE_TOL: f64 = 1e-9;
const MI_IDENTITY_TOL: f64 = 1e-9;
const MI_JOINT_TOL: f64 = 1e-12;
const MI_PERMUTATION_NULL_BITS: f64 = 0.05;
const UNIFORM_CE_TOL: f64 = 1e-6;
const UNIFORM_PPL_REL: f64 = 1e-3;
const BATCH_PPL_TOL: f64 = 1e-6;
const GRADCHECK_REL: f64 = 1e-3;
const GRADCHECK_SAMPLES: usize = 50;
const SPLIT_MAX_ABS: f64 = 1e-5;
const E2E_ROUGE_L: f64 = 0.35;
const E2E_COS_COUNTS: f64 = 0.7;
const SEEDS: [u64; 3] = [1, 2, 3];

fn verdict(criterion: &str, pass: bool, detail: impl AsRef<str>) {
    let line = format!(
        "[{}] criterion {criterion}: {}\n",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {criterion} failed: {}", detail.as_ref());
}

#[test]
fn thresholds_match_calibration_file() {
    let t: toml::Value = toml::from_str(include_str!("../configs/thresholds.toml")).unwrap();
    let f = |k: &str| t[k].as_float().unwrap_or_else(|| t[k].as_integer().unwrap() as f64);
    let pinned = [
        ("metric_oracle_tolerance", METRIC_ORACLE_TOL),
        ("mi_identity_tolerance", MI_IDENTITY_TOL),
        ("mi_joint_tolerance", MI_JOINT_TOL),
        ("mi_permutation_null_bits", MI_PERMUTATION_NULL_BITS),
        ("uniform_ce_tolerance", UNIFORM_CE_TOL),
        ("uniform_ppl_relative", UNIFORM_PPL_REL),
        ("batch_ppl_tolerance", BATCH_PPL_TOL),
        ("gradcheck_relative", GRADCHECK_REL),
        ("gradcheck_samples", GRADCHECK_SAMPLES as f64),
        ("split_max_abs", SPLIT_MAX_ABS),
        ("e2e_rouge_l", E2E_ROUGE_L),
        ("e2e_cos_counts", E2E_COS_COUNTS),
    ];
    for (k, v) in pinned {
        assert_eq!(f(k), v, "{k}");
    }
    let seeds: Vec<u64> = t["seeds"].as_array().unwrap().iter().map(|s| s.as_integer().unwrap() as u64).collect();
    assert_eq!(seeds, SEEDS);
}

// ---------------------------------------------------------------- shared toy runs

struct Toy {
    cfg: RunConfig,
    corpus: Corpus,
    victim: VictimModel,
}

fn toy(seed: u64) -> &'static Toy {
    static CELLS: [OnceLock<Toy>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    CELLS[(seed - 1) as usize].get_or_init(|| {
        let mut cfg = RunConfig::calibration();
        cfg.seed = seed;
        let corpus = cfg.build_corpus().unwrap();
        let train = corpus.slice(&[SplitLabel::Train]);
        let val = corpus.slice(&[SplitLabel::Val]);
        let (victim, _) = train_victim(cfg.model_config(corpus.vocab.len()), &train, &val, &cfg.victim.training).unwrap();
        Toy { cfg, corpus, victim }
    })
}

type AttackKey = (u64, TapPoint, PurifierVariant);

fn attack(seed: u64, tap: TapPoint, variant: PurifierVariant) -> AttackRun {
    static CACHE: OnceLock<Mutex<HashMap<AttackKey, Arc<OnceLock<AttackRun>>>>> = OnceLock::new();
    let cell = CACHE
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry((seed, tap, variant))
        .or_default()
        .clone();
    cell.get_or_init(|| {
        let t = toy(seed);
        let purifier = PurifierConfig {
            variant,
            ..t.cfg.attack.purifier.clone()
        };
        attack_at(&t.cfg, &t.victim, &t.corpus, tap, &purifier).unwrap()
    })
    .clone()
}

// ---------------------------------------------------------------- criterion 1

fn lcs_oracle<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn rouge_oracle(c: &[&str], r: &[&str]) -> f64 {
    let l = lcs_oracle(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, q) = (l / c.len() as f64, l / r.len() as f64);
    2.0 * p * q / (p + q)
}

fn ngrams<'a>(s: &[&'a str], n: usize) -> Vec<Vec<&'a str>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn bleu_oracle(c: &[&str], refs: &[Vec<&str>]) -> f64 {
    let mut logp = 0.0;
    for n in 1..=4 {
        let cg = ngrams(c, n);
        let mut distinct: Vec<Vec<&str>> = Vec::new();
        for g in &cg {
            if !distinct.contains(g) {
                distinct.push(g.clone());
            }
        }
        let mut matched = 0;
        for g in &distinct {
            let in_c = cg.iter().filter(|x| *x == g).count();
            let in_r = refs.iter().map(|r| ngrams(r, n).iter().filter(|x| *x == g).count()).max().unwrap();
            matched += in_c.min(in_r);
        }
        let denom = cg.len().max(1);
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / denom as f64
        } else {
            (matched as f64 + 1.0) / (denom as f64 + 1.0)
        };
        logp += 0.25 * p.ln();
    }
    let clen = c.len() as i64;
    let mut best = refs[0].len() as i64;
    for r in refs {
        let l = r.len() as i64;
        if (l - clen).abs() < (best - clen).abs() || ((l - clen).abs() == (best - clen).abs() && l < best) {
            best = l;
        }
    }
    let bp = if clen > best { 1.0 } else { (1.0 - best as f64 / clen as f64).exp() };
    bp * logp.exp()
}

fn cos_counts_oracle(a: &[&str], b: &[&str]) -> f64 {
    let count = |s: &[&str]| {
        let mut m: BTreeMap<String, f64> = BTreeMap::new();
        for w in s {
            *m.entry(w.to_string()).or_default() += 1.0;
        }
        m
    };
    let (ca, cb) = (count(a), count(b));
    let dot: f64 = ca.iter().map(|(k, v)| v * cb.get(k).copied().unwrap_or(0.0)).sum();
    let na: f64 = ca.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = cb.values().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn criterion_1_metric_oracles() {
    let start = Instant::now();
    let words = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran"];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sent = |rng: &mut ChaCha8Rng| -> Vec<&str> {
        let n = rng.gen_range(1..=12);
        (0..n).map(|_| *words.choose(rng).unwrap()).collect()
    };
    let emb = CountEmbedder::from_texts([words.join(" ").as_str()]);
    let (mut d_rouge, mut d_bleu, mut d_cos) = (0f64, 0f64, 0f64);
    for _ in 0..50 {
        let (c, r) = (sent(&mut rng), sent(&mut rng));
        d_rouge = d_rouge.max((rouge_l(&c, &r).unwrap() - rouge_oracle(&c, &r)).abs());
        let r2 = sent(&mut rng);
        let got = bleu(&c, &[&r, &r2]).unwrap();
        d_bleu = d_bleu.max((got - bleu_oracle(&c, &[r.clone(), r2])).abs());
        let cos = cosine_similarity(&c.join(" "), &r.join(" "), &emb).unwrap();
        d_cos = d_cos.max((cos - cos_counts_oracle(&c, &r)).abs());
    }
    let s: Vec<&str> = "no i just make boats on the weekend".split(' ').collect();
    let text = s.join(" ");
    let identical = rouge_l(&s, &s).unwrap() == 1.0
        && bleu(&s, &[&s]).unwrap() == 1.0
        && cosine_similarity(&text, &text, &emb).unwrap() == 1.0;
    let secs = start.elapsed().as_secs_f64();
    let pass = d_rouge <= METRIC_ORACLE_TOL
        && d_bleu <= METRIC_ORACLE_TOL
        && d_cos <= METRIC_ORACLE_TOL
        && identical
        && secs < 10.0;
    verdict(
        "1 (metric oracles)",
        pass,
        format!("max |diff| rouge {d_rouge:.1e}, bleu {d_bleu:.1e}, cos(b) {d_cos:.1e}; identical=1.0: {identical}; {secs:.2}s"),
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_mi_estimator_exactness() {
    let start = Instant::now();
    let mut worst_id = 0f64;
    let mut worst_indep = 0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 2..=6usize {
        // I(X;X) = H(X) on an enumerated sample.
        let xs: Vec<u64> = (0..k as u64).flat_map(|v| std::iter::repeat(v).take(v as usize + 1)).collect();
        worst_id = worst_id.max((mutual_information(&xs, &xs).unwrap() - entropy(&xs).unwrap()).abs());
        // Product joints have zero MI.
        for m in 2..=5usize {
            let px: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let py: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
            let (sx, sy): (f64, f64) = (px.iter().sum(), py.iter().sum());
            let joint: Vec<Vec<f64>> = px.iter().map(|a| py.iter().map(|b| a / sx * b / sy).collect()).collect();
            worst_indep = worst_indep.max(mi_from_joint(&joint).unwrap().abs());
            // Enumerated independent sample: every (x, b) pair equally often.
            let (ex, eb): (Vec<u64>, Vec<u64>) =
                (0..k as u64).flat_map(|x| (0..m as u64).map(move |b| (x, b))).unzip();
            worst_indep = worst_indep.max(mutual_information(&ex, &eb).unwrap().abs());
        }
    }
    let joint = [vec![0.4, 0.1], vec![0.1, 0.4]];
    let mut direct = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            let pi: f64 = joint[i].iter().sum();
            let pj: f64 = joint.iter().map(|r| r[j]).sum();
            direct += p * (p / (pi * pj)).log2();
        }
    }
    let d_joint = (mi_from_joint(&joint).unwrap() - direct).abs();

    let n = 10_000;
    let labels: Vec<u64> = (0..n).map(|_| rng.gen_range(0..4)).collect();
    let mut rows = Vec::with_capacity(n * 8);
    for &l in &labels {
        for d in 0..8 {
            rows.push(l as f64 * 0.5 + (d as f64) * 0.01 + rng.gen_range(-1.0..1.0));
        }
    }
    let bin = BinningConfig {
        n_bins: 4,
        dim_reduction: DimReduction::RandomProjection(3),
        ..Default::default()
    };
    let h = discretize(&Tensor::from_vec(n, 8, rows), &bin).unwrap().symbols;
    let mut shuffled = h.clone();
    shuffled.shuffle(&mut rng);
    let null = mutual_information(&labels, &shuffled).unwrap();
    let signal = mutual_information(&labels, &h).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_id <= MI_IDENTITY_TOL
        && worst_indep <= MI_IDENTITY_TOL
        && d_joint <= MI_JOINT_TOL
        && null < MI_PERMUTATION_NULL_BITS
        && secs < 30.0;
    verdict(
        "2 (MI exactness)",
        pass,
        format!(
            "|I(X;X)-H(X)| {worst_id:.1e}, independent MI {worst_indep:.1e}, 2x2 joint diff {d_joint:.1e}, \
             permutation null {null:.4} bits (unshuffled {signal:.3}) at n={n}; {secs:.2}s"
        ),
    );
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_loss_ppl_identities() {
    let t = toy(1);
    let d = t.victim.config().d_model;
    let v = t.corpus.vocab.len();
    let cfg = AttackerConfig::new(d, d, v, 32, &DecoderShape::default(), PurifierConfig::default(), 1);
    let mut a = AttackerModel::new(cfg, t.victim.model_id(), TapPoint::block_out(0), t.corpus.vocab.clone()).unwrap();
    for name in ["dec.lm_head.w", "dec.lm_head.b"] {
        let id = a.store().id(name).unwrap();
        a.store_mut().tensor_mut(id).data_mut().fill(0.0);
    }
    let (client, _) = split(&t.victim, TapPoint::block_out(0)).unwrap();
    let recs = t.corpus.slice(&[SplitLabel::Test]);
    let traces: Vec<Tensor> = recs.iter().take(64).map(|r| client.forward(&r.tokens).unwrap().to_tensor()).collect();
    let tr: Vec<&Tensor> = traces.iter().collect();
    let tk: Vec<&[u32]> = recs.iter().take(64).map(|r| r.tokens.as_slice()).collect();
    let ce = a.eval_ce(&tr, &tk).unwrap();
    let ln_v = (v as f64).ln();
    let ppl_rel = (ce.exp() - v as f64).abs() / v as f64;

    let run = attack(1, TapPoint::block_out(0), PurifierVariant::LinearProjection);
    let mut worst_ppl = 0f64;
    let mut worst_nll = 0f64;
    for b in &run.log.batches {
        worst_ppl = worst_ppl.max((b.ppl - b.ce.exp()).abs());
        worst_nll = worst_nll.max((b.ce * b.tokens as f64 - b.nll_sum).abs() / b.nll_sum.max(1.0));
    }
    let pass = (ce - ln_v).abs() <= UNIFORM_CE_TOL
        && ppl_rel <= UNIFORM_PPL_REL
        && worst_ppl <= BATCH_PPL_TOL
        && worst_nll <= BATCH_PPL_TOL
        && !run.log.batches.is_empty();
    verdict(
        "3 (loss/PPL identities)",
        pass,
        format!(
            "uniform CE {ce:.9} vs ln V {ln_v:.9}, PPL rel err {ppl_rel:.1e}; {} logged batches, \
             max |PPL - exp(CE)| {worst_ppl:.1e}, max rel |CE*t - NLL| {worst_nll:.1e}",
            run.log.batches.len()
        ),
    );
}

// ---------------------------------------------------------------- criterion 4

fn sample_scalars(store: &ParamStore, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let all: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.tensor(id).len()).map(move |i| (id, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.choose_multiple(&mut rng, n).copied().collect()
}

/// Worst relative error between analytic and central-difference gradients.
fn gradcheck(
    store: &mut ParamStore,
    samples: &[(ParamId, usize)],
    loss: impl Fn(&mut Graph) -> revlab::nn::Var,
) -> f64 {
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = loss(&mut g);
        g.value(l).item()
    };
    let mut worst = 0f64;
    for &(id, i) in samples {
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
        let eps = 1e-5;
        let orig = store.tensor(id).data()[i];
        store.tensor_mut(id).data_mut()[i] = orig + eps;
        let up = eval(store);
        store.tensor_mut(id).data_mut()[i] = orig - eps;
        let down = eval(store);
        store.tensor_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn criterion_4_gradient_checks() {
    let vocab = Vocab::from_words((0..17).map(|i| format!("w{i}")));
    assert_eq!(vocab.len(), 20);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seqs: Vec<Vec<u32>> = (0..3)
        .map(|_| {
            let n = rng.gen_range(2..8);
            let mut s = vec![0u32];
            s.extend((0..n).map(|_| rng.gen_range(3..20)));
            s.push(1);
            s
        })
        .collect();
    let mut lines = Vec::new();
    let mut worst = 0f64;
    for arch in [Arch::DecoderOnly, Arch::EncoderDecoder, Arch::EncoderMlp] {
        let m = VictimModel::new(ModelConfig::micro(arch, 20, 5)).unwrap();
        let labels = if arch == Arch::EncoderMlp { vec![0, 2, 1] } else { vec![] };
        let batch = Batch::new(seqs.clone(), labels);
        let mut store = m.store().clone();
        let samples = sample_scalars(&store, GRADCHECK_SAMPLES, 1);
        let e = gradcheck(&mut store, &samples, |g| m.loss(g, &batch).unwrap());
        lines.push(format!("victim {arch:?} {e:.1e}"));
        worst = worst.max(e);
    }
    let d = 8;
    let traces: Vec<Tensor> = seqs
        .iter()
        .map(|s| Tensor::randn(s.len(), d, 1.0, &mut rng))
        .collect();
    let tr: Vec<&Tensor> = traces.iter().collect();
    let tk: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let shape = DecoderShape {
        d_att: 8,
        n_blocks: 1,
        n_heads: 2,
        d_ff: 16,
        max_prefix: 8,
    };
    let victim_id = VictimModel::new(ModelConfig::micro(Arch::DecoderOnly, 20, 5)).unwrap().model_id();
    for variant in PurifierVariant::ALL {
        let cfg = AttackerConfig::new(d, d, 20, 12, &shape, PurifierConfig::of(variant), 2);
        let a = AttackerModel::new(cfg, victim_id, TapPoint::block_out(0), vocab.clone()).unwrap();
        let mut store = a.store().clone();
        let samples = sample_scalars(&store, GRADCHECK_SAMPLES, 2);
        let e = gradcheck(&mut store, &samples, |g| a.loss(g, &tr, &tk).unwrap());
        lines.push(format!("attacker {} {e:.1e}", variant.as_str()));
        worst = worst.max(e);
    }
    verdict(
        "4 (gradient checks)",
        worst <= GRADCHECK_REL,
        format!("{GRADCHECK_SAMPLES} sampled scalars each, worst rel err {worst:.1e} ({})", lines.join(", ")),
    );
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_split_identity_and_protocol() {
    let t = toy(1);
    let recs = t.corpus.slice(&[SplitLabel::Test]);
    let mut worst = 0f64;
    let mut n_taps = 0;
    let mut codec_ok = true;
    let mut corruption_ok = true;
    let mut transport_ok = true;
    for tap in TapPoint::all(t.victim.config()) {
        let Ok((client, server)) = split(&t.victim, tap) else { continue };
        n_taps += 1;
        for r in recs.iter().take(8) {
            let trace = client.forward(&r.tokens).unwrap();
            let full = t.victim.logits(&r.tokens).unwrap();
            worst = worst.max(server.forward(&trace).unwrap().max_abs_diff(&full));
            let bytes = serialize_frame(&trace, client.model_id()).unwrap();
            let back = deserialize_frame(&bytes).unwrap();
            codec_ok &= back.to_trace().states == trace.states && serialize_frame(&back.to_trace(), back.model_id).unwrap() == bytes;
        }
        let a = run_session(&client, &server, &recs[0].tokens, Transport::InProcess).unwrap();
        let b = run_session(&client, &server, &recs[0].tokens, Transport::LocalSocket).unwrap();
        transport_ok &= a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) && a.shape() == b.shape();
    }
    let (client, _) = split(&t.victim, TapPoint::block_out(0)).unwrap();
    let bytes = serialize_frame(&client.forward(&recs[1].tokens).unwrap(), client.model_id()).unwrap();
    for i in 0..bytes.len() {
        for flip in [0x01u8, 0x80, 0xff] {
            let mut c = bytes.clone();
            c[i] ^= flip;
            corruption_ok &= deserialize_frame(&c).is_err();
        }
    }
    let pass = worst <= SPLIT_MAX_ABS && codec_ok && corruption_ok && transport_ok && n_taps == 8;
    verdict(
        "5 (split identity & protocol)",
        pass,
        format!(
            "{n_taps} valid taps, max |server(client(x)) - full(x)| {worst:.1e}; codec bitwise {codec_ok}; \
             {} single-byte corruptions detected {corruption_ok}; transports bitwise equal {transport_ok}",
            bytes.len() * 3
        ),
    );
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_end_to_end_toy_attack() {
    let run = attack(1, TapPoint::block_out(0), PurifierVariant::LinearProjection);
    let r = &run.report;
    let v = toy(1).corpus.vocab.len() as f64;
    let ppl2 = run.log.val_ce_step2.exp();
    let pass = r.rouge_l >= E2E_ROUGE_L && r.cos_counts >= E2E_COS_COUNTS;
    verdict(
        "6 (end-to-end toy attack)",
        pass,
        format!(
            "tap 0:block_out, {} test pairs: ROUGE-L {:.4} (>= {E2E_ROUGE_L}), cosine(b) {:.4} (>= {E2E_COS_COUNTS}); \
             BLEU {:.4}, cosine(a) {:.4}; val PPL after step 2 {ppl2:.3} (vocab {v}), step 3 val CE {:.4} vs step 2 {:.4}{}",
            r.n_pairs,
            r.rouge_l,
            r.cos_counts,
            r.bleu,
            r.cos_sim,
            run.log.val_ce_step3,
            run.log.val_ce_step2,
            if run.log.step3_reverted { " (reverted)" } else { "" }
        ),
    );
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_directional_reproductions() {
    let lin = PurifierVariant::LinearProjection;
    let mut a_votes = 0;
    let mut b_votes = 0;
    let mut c_ok = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let attn = attack(seed, TapPoint::new(0, TapPosition::AttentionOut), lin).report.rouge_l;
        let ffn = attack(seed, TapPoint::new(0, TapPosition::FfnOut), lin).report.rouge_l;
        let base = attack(seed, TapPoint::block_out(0), PurifierVariant::None).report.rouge_l;
        let proj = attack(seed, TapPoint::block_out(0), lin).report.rouge_l;
        a_votes += usize::from(ffn < attn);
        b_votes += usize::from(proj >= base);
        let n = toy(seed).victim.config().n_blocks;
        let mut curve = vec![attack(seed, TapPoint::embedding(), lin).report.rouge_l];
        curve.extend((0..n).map(|b| attack(seed, TapPoint::block_out(b), lin).report.rouge_l));
        c_ok &= curve.len() == n + 1 && curve.iter().all(|x| x.is_finite());
        let curve: Vec<String> = curve.iter().map(|x| format!("{x:.3}")).collect();
        lines.push(format!(
            "seed {seed}: ffn {ffn:.3} vs attn {attn:.3}; base {base:.3} vs +linear {proj:.3}; depth [emb, b0..] {}",
            curve.join(" ")
        ));
    }
    for l in &lines {
        let _ = writeln!(std::io::stderr(), "    {l}");
    }
    let pass = a_votes >= 2 && b_votes >= 2 && c_ok;
    verdict(
        "7 (directional reproductions)",
        pass,
        format!(
            "(a) ffn_out < attention_out in {a_votes}/3 seeds; (b) +linear >= base in {b_votes}/3 seeds; \
             (c) depth curve emitted for all blocks: {c_ok}"
        ),
    );
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_mi_positive_correlation() {
    let mut positive = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let t = toy(seed);
        let recs = t.corpus.slice(&t.cfg.mi.splits);
        let taps = TapPoint::all(t.victim.config());
        let est = information_plane(&t.victim, &recs, &taps, &t.cfg.mi.binning, &t.cfg.mi.probe).unwrap();
        let r = block_out_correlation(&est);
        positive += usize::from(r.is_some_and(|r| r > 0.0));
        parts.push(format!("seed {seed}: r = {}", r.map_or("undefined".into(), |r| format!("{r:.3}"))));
    }
    verdict(
        "8 (MI positive correlation)",
        positive == SEEDS.len(),
        format!("Pearson(i_xh, i_hy) over block_out taps > 0 in {positive}/3 seeds ({})", parts.join(", ")),
    );
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::calibration();
    cfg.out_dir = dir.path().join("run");
    cfg.corpus.source = CorpusSource::Synth {
        grammar: "persona".into(),
        n_records: 300,
    };
    cfg.victim.training.epochs = 1;
    cfg.attack.recipe.step1.epochs = 2;
    cfg.attack.recipe.step2.epochs = 1;
    cfg.attack.recipe.step2.ppl_eval_every = 5;
    let mut same = Vec::new();
    for cmd in Subcommand::ALL {
        let first = execute(cmd, &cfg).unwrap();
        let path = cfg.out_dir.join("manifests").join(format!("{}.json", cmd.as_str()));
        let second = rerun(&path).unwrap();
        let identical = serde_json::to_string(&first.aggregates).unwrap() == serde_json::to_string(&second.aggregates).unwrap();
        let listed = second.artifacts.iter().all(|a| cfg.out_dir.join(a).exists());
        same.push((cmd.as_str(), identical && listed && second.config_hash == cfg.hash().unwrap()));
    }
    let failed: Vec<&str> = same.iter().filter(|(_, ok)| !ok).map(|(c, _)| *c).collect();
    verdict(
        "9 (reproducibility)",
        failed.is_empty(),
        format!(
            "{} subcommands rerun from their manifests; aggregates bitwise identical and artifacts present for all but {:?}",
            same.len(),
            failed
        ),
    );
}
