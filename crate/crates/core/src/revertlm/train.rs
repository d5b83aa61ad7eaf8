use std::collections::HashMap;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{PurifierVariant, Step1, Step2, Step3, TrainRecipe};
use super::model::{
    log_softmax, AttackerModel, DECODER_PREFIX, MAPPER_PREFIX, PURIFIER_PREFIX, TESTER_PREFIX,
};
use crate::corpus::{tokenize, SplitLabel, Vocab};
use crate::error::{Error, Result};
use crate::nn::layers::linear;
use crate::nn::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::splitproto::CaptureSet;

/// Traces paired with the token ids of their ground-truth text.
#[derive(Clone, Debug, Default)]
pub struct AttackData {
    pub record_ids: Vec<String>,
    pub traces: Vec<Tensor>,
    pub tokens: Vec<Vec<u32>>,
}

impl AttackData {
    /// Entries of `splits` that carry text. Test entries never do.
    pub fn from_captures(captures: &CaptureSet, splits: &[SplitLabel], vocab: &Vocab) -> Result<Self> {
        let mut d = Self::default();
        for (e, t) in captures.manifest.entries.iter().zip(&captures.traces) {
            if !splits.contains(&e.split) {
                continue;
            }
            let Some(text) = &e.text else { continue };
            d.record_ids.push(e.record_id.clone());
            d.traces.push(t.to_tensor());
            d.tokens.push(tokenize(text, vocab)?);
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// The last `ceil(fraction * n)` examples (at least one when
    /// `fraction > 0` and at least two examples exist) become the second part.
    pub fn split_tail(&self, fraction: f64) -> (AttackData, AttackData) {
        let n = self.len();
        let k = if fraction > 0.0 && n >= 2 {
            ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1)
        } else {
            0
        };
        let cut = n - k;
        let part = |r: std::ops::Range<usize>| AttackData {
            record_ids: self.record_ids[r.clone()].to_vec(),
            traces: self.traces[r.clone()].to_vec(),
            tokens: self.tokens[r].to_vec(),
        };
        (part(0..cut), part(cut..n))
    }

    fn refs(&self, idx: &[usize]) -> (Vec<&Tensor>, Vec<&[u32]>) {
        (
            idx.iter().map(|&i| &self.traces[i]).collect(),
            idx.iter().map(|&i| self.tokens[i].as_slice()).collect(),
        )
    }

    fn all_refs(&self) -> (Vec<&Tensor>, Vec<&[u32]>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.refs(&idx)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PurifierReport {
    pub variant: Option<PurifierVariant>,
    pub train_rows: usize,
    pub holdout_rows: usize,
    /// Mean squared error of purified rows against embedding rows.
    pub holdout_mse: f64,
    /// Mean per-dimension variance of the held-out targets, i.e. the MSE of
    /// the best constant predictor.
    pub baseline_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tester_ce: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub stage: u8,
    pub step: usize,
    /// Mean per-token cross-entropy reported by the loss node.
    pub ce: f64,
    /// Sum of per-token negative log-likelihoods recomputed from logits.
    pub nll_sum: f64,
    pub tokens: usize,
    /// `exp(nll_sum / tokens)`.
    pub ppl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplRecord {
    pub step: usize,
    pub val_ce: f64,
    pub val_ppl: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamDeltas {
    pub purifier: f64,
    pub mapper: f64,
    pub decoder: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrainLog {
    pub purifier: PurifierReport,
    pub batches: Vec<BatchRecord>,
    pub ppl: Vec<PplRecord>,
    pub val_ce_init: f64,
    pub val_ce_step2: f64,
    pub val_ce_step3: f64,
    pub step3_reverted: bool,
    pub step3_deltas: ParamDeltas,
    pub n_train: usize,
    pub n_val: usize,
}

fn trainable_mask(store: &ParamStore, prefixes: &[&str]) -> Vec<bool> {
    store
        .ids()
        .map(|id| prefixes.iter().any(|p| store.name(id).starts_with(p)))
        .collect()
}

fn check_finite(v: f64, what: &str, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} loss {v} at step {step}")))
    }
}

fn warmup_decay(lr: f64, warmup: usize, step: usize, total: usize) -> f64 {
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    lr * (1.0 - 0.9 * ((step - warmup) as f64 / span as f64).min(1.0))
}

/// Row pairs (trace row, embedding row, token id) for records present in
/// both captures.
fn row_pairs(
    aux: &AttackData,
    targets: &CaptureSet,
) -> Result<Vec<(Vec<f64>, Vec<f64>, u32)>> {
    let by_id: HashMap<&str, usize> = targets
        .manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.record_id.as_str(), i))
        .collect();
    let mut per_record = Vec::new();
    for (i, id) in aux.record_ids.iter().enumerate() {
        let Some(&j) = by_id.get(id.as_str()) else {
            return Err(Error::invalid(format!("no embedding target for aux record {id}")));
        };
        let x = &aux.traces[i];
        let y = targets.traces[j].to_tensor();
        if x.rows() != y.rows() || y.rows() != aux.tokens[i].len() {
            return Err(Error::invalid(format!("trace and target lengths differ for {id}")));
        }
        for r in 0..x.rows() {
            per_record.push((x.row(r).to_vec(), y.row(r).to_vec(), aux.tokens[i][r]));
        }
    }
    Ok(per_record)
}

fn stack(rows: &[&Vec<f64>]) -> Tensor {
    let cols = rows.first().map_or(0, |r| r.len());
    Tensor::from_vec(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
}

/// Step 1: fit the purifier on aux records, mapping trace rows onto the
/// victim's embedding rows for the same positions. Only aux data is used.
pub fn pretrain_purifier(
    attacker: &mut AttackerModel,
    aux: &AttackData,
    embedding_targets: &CaptureSet,
    step: &Step1,
) -> Result<PurifierReport> {
    if aux.is_empty() {
        return Err(Error::EmptyInput);
    }
    if embedding_targets.manifest.d_model != attacker.config.d_embed {
        return Err(Error::invalid("embedding targets do not match the attacker's d_embed"));
    }
    let (fit, hold) = aux.split_tail(step.holdout_fraction);
    let fit_rows = row_pairs(&fit, embedding_targets)?;
    let hold_rows = if hold.is_empty() {
        fit_rows.clone()
    } else {
        row_pairs(&hold, embedding_targets)?
    };
    let variant = attacker.config.purifier.variant;
    let mut rng = ChaCha8Rng::seed_from_u64(attacker.config.seed ^ 0x7374_6570_31);
    let mut report = PurifierReport {
        variant: Some(variant),
        train_rows: fit_rows.len(),
        holdout_rows: hold_rows.len(),
        ..Default::default()
    };

    let tester_weight = attacker.config.purifier.tester_weight;
    if variant == PurifierVariant::LinearWithTester {
        // The probe learns to read tokens off true embedding rows, then
        // freezes and scores how readable the purified rows are.
        fit_rows_loop(attacker, &fit_rows, step, &mut rng, &[TESTER_PREFIX], |_, g, _, y, toks| {
            let yv = g.constant(y);
            let logits = linear(g, "tester.probe", yv);
            Ok(g.cross_entropy(logits, &toks))
        })?;
    }
    if variant != PurifierVariant::None {
        fit_rows_loop(attacker, &fit_rows, step, &mut rng, &[PURIFIER_PREFIX], |m, g, x, y, toks| {
            let xv = g.constant(x);
            let p = m.purify(g, xv);
            let mse = g.mse(p, y);
            if variant == PurifierVariant::LinearWithTester && tester_weight > 0.0 {
                let logits = linear(g, "tester.probe", p);
                let ce = g.cross_entropy(logits, &toks);
                let ce = g.scale(ce, tester_weight);
                return Ok(g.add(mse, ce));
            }
            Ok(mse)
        })?;
    }

    let xs: Vec<&Vec<f64>> = hold_rows.iter().map(|r| &r.0).collect();
    let ys: Vec<&Vec<f64>> = hold_rows.iter().map(|r| &r.1).collect();
    let (x, y) = (stack(&xs), stack(&ys));
    let mut g = Graph::new(&attacker.store);
    let xv = g.constant(x);
    let p = attacker.purify(&mut g, xv);
    let pv = g.value(p).clone();
    report.holdout_mse = {
        let diff: f64 = pv.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        diff / y.len() as f64
    };
    report.baseline_mse = mean_column_variance(&y);
    if variant == PurifierVariant::LinearWithTester {
        let toks: Vec<(usize, usize)> = hold_rows.iter().enumerate().map(|(i, r)| (i, r.2 as usize)).collect();
        let pc = g.constant(pv);
        let logits = linear(&mut g, "tester.probe", pc);
        let ce = g.cross_entropy(logits, &toks);
        report.tester_ce = Some(g.value(ce).item());
    }
    info!(
        "purifier {:?}: held-out MSE {:.5} vs constant baseline {:.5}",
        variant, report.holdout_mse, report.baseline_mse
    );
    Ok(report)
}

/// Per-token mean of the embedding-tap rows over the aux records, written
/// into `dec.tok_emb`; `map.lin` becomes the identity. Tokens never seen
/// in aux keep their random rows.
pub fn warm_start_decoder(attacker: &mut AttackerModel, aux: &AttackData, embedding_targets: &CaptureSet) -> Result<()> {
    let cfg = &attacker.config;
    if cfg.d_att != cfg.d_embed {
        return Err(Error::config("warm_start_decoder needs d_att == d_embed"));
    }
    let (v, d) = (cfg.vocab_size, cfg.d_embed);
    let mut sums = Tensor::zeros(v, d);
    let mut counts = vec![0usize; v];
    for (_, y, tok) in row_pairs(aux, embedding_targets)? {
        counts[tok as usize] += 1;
        for (a, b) in sums.row_mut(tok as usize).iter_mut().zip(&y) {
            *a += b;
        }
    }
    let id = attacker.store.id("dec.tok_emb")?;
    let table = attacker.store.tensor_mut(id);
    for (t, &n) in counts.iter().enumerate() {
        if n > 0 {
            for (a, b) in table.row_mut(t).iter_mut().zip(sums.row(t)) {
                *a = b / n as f64;
            }
        }
    }
    let w = attacker.store.id("map.lin.w")?;
    let eye = attacker.store.tensor_mut(w);
    eye.data_mut().fill(0.0);
    for i in 0..d {
        eye.row_mut(i)[i] = 1.0;
    }
    let b = attacker.store.id("map.lin.b")?;
    attacker.store.tensor_mut(b).data_mut().fill(0.0);
    Ok(())
}

fn mean_column_variance(y: &Tensor) -> f64 {
    let (n, d) = y.shape();
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| y.get(i, j)).sum::<f64>() / n as f64;
        total += (0..n).map(|i| (y.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
    }
    total / d as f64
}

fn fit_rows_loop(
    attacker: &mut AttackerModel,
    rows: &[(Vec<f64>, Vec<f64>, u32)],
    step: &Step1,
    rng: &mut ChaCha8Rng,
    train: &[&str],
    loss: impl Fn(&AttackerModel, &mut Graph, Tensor, Tensor, Vec<(usize, usize)>) -> Result<Var>,
) -> Result<()> {
    let mask = trainable_mask(&attacker.store, train);
    let mut adam = Adam::new(AdamConfig::with_lr(step.lr), attacker.store.len());
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut n_step = 0;
    for epoch in 0..step.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(step.batch_rows) {
            let xs: Vec<&Vec<f64>> = chunk.iter().map(|&i| &rows[i].0).collect();
            let ys: Vec<&Vec<f64>> = chunk.iter().map(|&i| &rows[i].1).collect();
            let toks: Vec<(usize, usize)> = chunk.iter().enumerate().map(|(r, &i)| (r, rows[i].2 as usize)).collect();
            let (value, mut grads) = {
                let mut g = Graph::new(&attacker.store);
                let l = loss(attacker, &mut g, stack(&xs), stack(&ys), toks)?;
                (g.value(l).item(), g.backward(l))
            };
            check_finite(value, "purifier", n_step)?;
            adam.step(&mut attacker.store, &mut grads, |id| mask[id.0]);
            sum += value;
            batches += 1;
            n_step += 1;
        }
        debug!("step1 {:?} epoch {epoch}: loss {:.5}", train, sum / batches.max(1) as f64);
    }
    Ok(())
}

/// Brute-force sum of per-token negative log-likelihoods from raw logits.
fn nll_sum(logits: &Tensor, targets: &[(usize, usize)]) -> f64 {
    targets
        .iter()
        .map(|&(r, t)| -log_softmax(logits.row(r))[t])
        .sum()
}

struct StepOutcome {
    ce: f64,
    nll_sum: f64,
    tokens: usize,
}

/// One optimizer step on `L_Φ` (+ `lm_weight` · LM loss on `lm_tokens`).
fn attack_step(
    attacker: &mut AttackerModel,
    adam: &mut Adam,
    mask: &[bool],
    traces: &[&Tensor],
    tokens: &[&[u32]],
    lm_tokens: &[&[u32]],
    lm_weight: f64,
    step: usize,
) -> Result<StepOutcome> {
    let (out, mut grads) = {
        let mut g = Graph::new(&attacker.store);
        let (logits, targets) = attacker.teacher_forced(&mut g, Some(traces), tokens)?;
        let ce = g.cross_entropy(logits, &targets);
        let out = StepOutcome {
            ce: g.value(ce).item(),
            nll_sum: nll_sum(g.value(logits), &targets),
            tokens: targets.len(),
        };
        check_finite(out.ce, "attack", step)?;
        let total = if lm_weight > 0.0 && !lm_tokens.is_empty() {
            let (ll, lt) = attacker.teacher_forced(&mut g, None, lm_tokens)?;
            let lm = g.cross_entropy(ll, &lt);
            check_finite(g.value(lm).item(), "language-model", step)?;
            let lm = g.scale(lm, lm_weight);
            g.add(ce, lm)
        } else {
            ce
        };
        (out, g.backward(total))
    };
    adam.step(&mut attacker.store, &mut grads, |id| mask[id.0]);
    Ok(out)
}

fn record(log: &mut AttackTrainLog, stage: u8, step: usize, o: &StepOutcome) {
    log.batches.push(BatchRecord {
        stage,
        step,
        ce: o.ce,
        nll_sum: o.nll_sum,
        tokens: o.tokens,
        ppl: (o.nll_sum / o.tokens as f64).exp(),
    });
}

/// Step 2: train mapper and decoder with the purifier frozen.
pub fn train_attacker(
    attacker: &mut AttackerModel,
    fit: &AttackData,
    val: &AttackData,
    aux_text: &[Vec<u32>],
    step: &Step2,
    log: &mut AttackTrainLog,
) -> Result<()> {
    if step.train_purifier {
        return Err(Error::config("the purifier must stay frozen during step 2"));
    }
    if fit.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (vt, vk) = val.all_refs();
    log.val_ce_init = attacker.eval_ce(&vt, &vk)?;
    info!("step 2: initial val CE {:.4}", log.val_ce_init);
    let mask = trainable_mask(&attacker.store, &[MAPPER_PREFIX, DECODER_PREFIX]);
    let mut adam = Adam::new(AdamConfig::with_lr(step.lr), attacker.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(attacker.config.seed ^ 0x7374_6570_32);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let total = fit.len().div_ceil(step.batch_size) * step.epochs;
    let mut lm_cursor = 0usize;
    let mut n = 0usize;
    for epoch in 0..step.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(step.batch_size) {
            let (tr, tk) = fit.refs(chunk);
            let lm: Vec<&[u32]> = if aux_text.is_empty() {
                Vec::new()
            } else {
                (0..step.lm_batch_size)
                    .map(|i| aux_text[(lm_cursor + i) % aux_text.len()].as_slice())
                    .collect()
            };
            lm_cursor += step.lm_batch_size;
            adam.set_lr(warmup_decay(step.lr, step.warmup_steps, n, total));
            let o = attack_step(attacker, &mut adam, &mask, &tr, &tk, &lm, step.lm_weight, n)?;
            record(log, 2, n, &o);
            n += 1;
            if n % step.ppl_eval_every == 0 {
                let ce = attacker.eval_ce(&vt, &vk)?;
                debug!("step 2 batch {n} (epoch {epoch}): val CE {ce:.4}");
                log.ppl.push(PplRecord {
                    step: n,
                    val_ce: ce,
                    val_ppl: ce.exp(),
                });
            }
        }
    }
    log.val_ce_step2 = attacker.eval_ce(&vt, &vk)?;
    info!("step 2 done: val CE {:.4} (PPL {:.2})", log.val_ce_step2, log.val_ce_step2.exp());
    Ok(())
}

/// Step 3: fine-tune purifier, mapper and decoder together on `L_Φ`. If
/// validation CE ends above `(1 + tolerance)` times the step-2 value the
/// step-2 parameters are restored and the run is flagged.
pub fn joint_finetune(
    attacker: &mut AttackerModel,
    fit: &AttackData,
    val: &AttackData,
    step: &Step3,
    log: &mut AttackTrainLog,
) -> Result<()> {
    if fit.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (vt, vk) = val.all_refs();
    let before = if log.val_ce_step2 > 0.0 {
        log.val_ce_step2
    } else {
        attacker.eval_ce(&vt, &vk)?
    };
    let snapshot = attacker.store.clone();
    let mask = trainable_mask(&attacker.store, &[PURIFIER_PREFIX, MAPPER_PREFIX, DECODER_PREFIX]);
    let mut adam = Adam::new(AdamConfig::with_lr(step.lr), attacker.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(attacker.config.seed ^ 0x7374_6570_33);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut n = log.batches.len();
    for _ in 0..step.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(step.batch_size) {
            let (tr, tk) = fit.refs(chunk);
            let o = attack_step(attacker, &mut adam, &mask, &tr, &tk, &[], 0.0, n)?;
            record(log, 3, n, &o);
            n += 1;
        }
    }
    log.step3_deltas = ParamDeltas {
        purifier: attacker.store.l2_distance_with_prefix(&snapshot, PURIFIER_PREFIX),
        mapper: attacker.store.l2_distance_with_prefix(&snapshot, MAPPER_PREFIX),
        decoder: attacker.store.l2_distance_with_prefix(&snapshot, DECODER_PREFIX),
    };
    attacker.store.round_to_f32();
    let after = attacker.eval_ce(&vt, &vk)?;
    if after > before * (1.0 + step.regression_tolerance) {
        warn!("step 3 raised val CE {before:.4} -> {after:.4}; restoring step-2 parameters");
        attacker.store = snapshot;
        attacker.store.round_to_f32();
        log.step3_reverted = true;
        log.val_ce_step3 = attacker.eval_ce(&vt, &vk)?;
    } else {
        log.val_ce_step3 = after;
    }
    info!("step 3 done: val CE {:.4}", log.val_ce_step3);
    Ok(())
}

/// Inputs for the full three-step recipe.
pub struct AttackInputs<'a> {
    /// Attacker-owned aux records at the attacked tap (step 1 and LM loss).
    pub aux: &'a AttackData,
    /// The victim's embedding-tap states for the aux records.
    pub aux_embedding: &'a CaptureSet,
    /// Captured training pairs for steps 2 and 3.
    pub train: &'a AttackData,
}

/// Steps 1, 2 and 3 in order. The final parameters are rounded to f32.
pub fn run_recipe(
    attacker: &mut AttackerModel,
    inputs: &AttackInputs,
    recipe: &TrainRecipe,
) -> Result<AttackTrainLog> {
    recipe.validate()?;
    let mut log = AttackTrainLog {
        purifier: pretrain_purifier(attacker, inputs.aux, inputs.aux_embedding, &recipe.step1)?,
        ..Default::default()
    };
    if recipe.step1.warm_start_decoder {
        warm_start_decoder(attacker, inputs.aux, inputs.aux_embedding)?;
    }
    let (fit, val) = inputs.train.split_tail(recipe.step2.val_fraction);
    log.n_train = fit.len();
    log.n_val = val.len();
    train_attacker(attacker, &fit, &val, &inputs.aux.tokens, &recipe.step2, &mut log)?;
    joint_finetune(attacker, &fit, &val, &recipe.step3, &mut log)?;
    attacker.recipe = Some(recipe.clone());
    Ok(log)
}
