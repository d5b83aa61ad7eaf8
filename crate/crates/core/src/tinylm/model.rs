use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::{Arch, ModelConfig, TapPoint, TapPosition, MLP_HEAD_LAYERS};
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::layers::{
    cross_attention_residual, ffn_raw, init_cross_attention, init_ffn, init_layer_norm,
    init_linear, init_self_attention, layer_norm, linear, self_attention_residual, INIT_STD,
};
use crate::nn::{checkpoint, AttnSpec, Graph, Packed, ParamStore, Tensor, Var};

/// First 16 bytes of SHA-256 over the config JSON and the f32 parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelId(pub [u8; 16]);

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::invalid(format!("model id: {e}")))?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| Error::invalid("model id must be 16 bytes"))?;
        Ok(ModelId(arr))
    }
}

impl TryFrom<String> for ModelId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelId> for String {
    fn from(m: ModelId) -> String {
        m.to_string()
    }
}

/// Hidden states observed at one tap for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationTrace {
    pub tap: TapPoint,
    pub token_count: usize,
    pub d_model: usize,
    /// Row-major `[token_count, d_model]`.
    pub states: Vec<f32>,
    pub source_id: Option<String>,
}

impl RepresentationTrace {
    pub fn from_tensor(tap: TapPoint, t: &Tensor) -> Result<Self> {
        let tr = Self {
            tap,
            token_count: t.rows(),
            d_model: t.cols(),
            states: t.to_f32(),
            source_id: None,
        };
        tr.validate()?;
        Ok(tr)
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_id = Some(id.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.token_count * self.d_model {
            return Err(Error::invalid(format!(
                "trace holds {} values, expected {}x{}",
                self.states.len(),
                self.token_count,
                self.d_model
            )));
        }
        if self.states.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.states[t * self.d_model..(t + 1) * self.d_model]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(self.token_count, self.d_model, &self.states)
    }
}

/// A training or evaluation batch. `encoder_inputs` replaces the encoder
/// side of an encoder-decoder batch (denoising); elsewhere it is ignored.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub tokens: Vec<Vec<u32>>,
    pub labels: Vec<u32>,
    pub encoder_inputs: Option<Vec<Vec<u32>>>,
}

impl Batch {
    pub fn new(tokens: Vec<Vec<u32>>, labels: Vec<u32>) -> Self {
        Self {
            tokens,
            labels,
            encoder_inputs: None,
        }
    }
}

/// Per-tap, per-sequence states plus per-sequence logits.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub taps: Vec<TapPoint>,
    /// `states[i][j]` is tap `taps[i]` for sequence `j`.
    pub states: Vec<Vec<Tensor>>,
    /// Empty unless logits were requested.
    pub logits: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct VictimModel {
    config: ModelConfig,
    store: ParamStore,
}

const CHECKPOINT_KIND: &str = "victim";

impl VictimModel {
    /// Freshly initialised model: normal(0, 0.02) weights from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let mut store = ParamStore::new();
        store.insert("tok_emb", Tensor::randn(v, d, INIT_STD, &mut rng));
        store.insert("pos_emb", Tensor::randn(config.max_seq_len, d, INIT_STD, &mut rng));
        for b in 0..config.n_blocks {
            init_self_attention(&mut store, &format!("blocks.{b}.attn"), d, &mut rng);
            init_ffn(&mut store, &format!("blocks.{b}.ffn"), d, config.d_ff, &mut rng);
        }
        init_layer_norm(&mut store, "ln_f", d);
        match config.arch {
            Arch::DecoderOnly => init_lm_head(&mut store, d, v, &mut rng),
            Arch::EncoderMlp => {
                let c = config.n_outputs();
                for j in 0..MLP_HEAD_LAYERS {
                    let out = if j + 1 == MLP_HEAD_LAYERS { c } else { d };
                    init_linear(&mut store, &format!("head.{j}"), d, out, &mut rng);
                }
            }
            Arch::EncoderDecoder => {
                store.insert("dec.tok_emb", Tensor::randn(v, d, INIT_STD, &mut rng));
                store.insert("dec.pos_emb", Tensor::randn(config.max_seq_len, d, INIT_STD, &mut rng));
                for b in 0..config.n_blocks {
                    init_self_attention(&mut store, &format!("dec.blocks.{b}.self"), d, &mut rng);
                    init_cross_attention(&mut store, &format!("dec.blocks.{b}.cross"), d, &mut rng);
                    init_ffn(&mut store, &format!("dec.blocks.{b}.ffn"), d, config.d_ff, &mut rng);
                }
                init_layer_norm(&mut store, "dec.ln_f", d);
                init_lm_head(&mut store, d, v, &mut rng);
            }
        }
        Ok(Self { config, store })
    }

    /// Wrap existing parameters; every name a fresh model would register
    /// must be present with the same shape.
    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        for (name, t) in reference.store.iter() {
            let got = store
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if store.len() != reference.store.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Self { config, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn model_id(&self) -> ModelId {
        model_id(&self.config, &self.store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({ "kind": CHECKPOINT_KIND, "config": self.config });
        checkpoint::save(path, &meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = checkpoint::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint(format!(
                "{} is not a victim checkpoint",
                path.display()
            )));
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        Self::from_parts(config, store)
    }

    /// Full forward pass observing one tap. Logits are those of the untapped
    /// model: taps only read values.
    pub fn forward_with_tap(&self, tokens: &[u32], tap: TapPoint) -> Result<(RepresentationTrace, Tensor)> {
        let (mut traces, logits) = self.forward_with_taps(tokens, &[tap])?;
        Ok((traces.remove(0), logits))
    }

    pub fn forward_with_taps(
        &self,
        tokens: &[u32],
        taps: &[TapPoint],
    ) -> Result<(Vec<RepresentationTrace>, Tensor)> {
        let mut out = run_batch(&self.config, &self.store, &[tokens], taps, true)?;
        let traces = taps
            .iter()
            .zip(out.states.iter_mut())
            .map(|(&tap, s)| RepresentationTrace::from_tensor(tap, &s[0]))
            .collect::<Result<Vec<_>>>()?;
        Ok((traces, out.logits.remove(0)))
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        Ok(run_batch(&self.config, &self.store, &[tokens], &[], true)?
            .logits
            .remove(0))
    }

    /// Batched forward. Without `with_logits` computation stops at the
    /// deepest requested tap.
    pub fn run_batch<S: AsRef<[u32]>>(
        &self,
        seqs: &[S],
        taps: &[TapPoint],
        with_logits: bool,
    ) -> Result<BatchOutput> {
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_ref()).collect();
        run_batch(&self.config, &self.store, &refs, taps, with_logits)
    }

    /// Mean training loss of `batch` recorded on `g`, which must borrow
    /// this model's store (or a copy with identical names).
    pub fn loss(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        loss(&self.config, g, batch)
    }

    /// Mean cross-entropy per predicted token (per example for classifiers)
    /// over clean inputs, in nats.
    pub fn eval_ce(&self, tokens: &[Vec<u32>], labels: &[u32]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (chunk_i, chunk) in tokens.chunks(64).enumerate() {
            let lab = if labels.is_empty() {
                Vec::new()
            } else {
                labels[chunk_i * 64..chunk_i * 64 + chunk.len()].to_vec()
            };
            let batch = Batch::new(chunk.to_vec(), lab);
            let n = n_targets(&self.config, &batch);
            let mut g = Graph::new(&self.store);
            let l = loss(&self.config, &mut g, &batch)?;
            total += g.value(l).item() * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(total / count as f64)
    }
}

fn init_lm_head(store: &mut ParamStore, d: usize, v: usize, rng: &mut ChaCha8Rng) {
    store.insert("lm_head.w", Tensor::randn(v, d, INIT_STD, rng));
    store.insert("lm_head.b", Tensor::zeros(1, v));
}

pub(crate) fn model_id(config: &ModelConfig, store: &ParamStore) -> ModelId {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for (name, t) in store.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update((*v as f32).to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut id = [0u8; 16];
    id.copy_from_slice(&digest[..16]);
    ModelId(id)
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::invalid(format!("token id {t} outside vocabulary")));
    }
    Ok(())
}

/// The block stack is a sequence of sublayer steps: step `2b` is block b's
/// attention, step `2b + 1` its feed-forward. A tap is observed once the
/// step that produces it has run.
pub(crate) fn steps_through(tap: TapPoint) -> usize {
    let b = tap.block_index;
    match tap.position {
        TapPosition::Embedding => 0,
        TapPosition::AttentionOut => 2 * b + 1,
        TapPosition::FfnOut | TapPosition::BlockOut => 2 * b + 2,
    }
}

fn embed(g: &mut Graph, prefix: &str, p: &Packed) -> Var {
    let tok = g.named(&format!("{prefix}tok_emb"));
    let pos = g.named(&format!("{prefix}pos_emb"));
    let a = g.embed(tok, &p.ids);
    let b = g.embed(pos, &p.positions);
    g.add(a, b)
}

pub(crate) fn trunk(
    g: &mut Graph,
    mut x: Var,
    spec: &AttnSpec,
    steps: Range<usize>,
    sink: &mut dyn FnMut(TapPoint, Var),
) -> Var {
    for s in steps {
        let b = s / 2;
        if s % 2 == 0 {
            x = self_attention_residual(g, &format!("blocks.{b}.attn"), x, spec);
            sink(TapPoint::new(b, TapPosition::AttentionOut), x);
        } else {
            let f = ffn_raw(g, &format!("blocks.{b}.ffn"), x);
            sink(TapPoint::new(b, TapPosition::FfnOut), f);
            x = g.add(x, f);
            sink(TapPoint::new(b, TapPosition::BlockOut), x);
        }
    }
    x
}

fn lm_logits(g: &mut Graph, h: Var) -> Var {
    let w = g.named("lm_head.w");
    let b = g.named("lm_head.b");
    let l = g.matmul_t(h, w);
    g.add_bias(l, b)
}

fn mlp_logits(g: &mut Graph, h: Var, segments: &[(usize, usize)]) -> Var {
    let mut z = g.mean_rows(h, segments);
    for j in 0..MLP_HEAD_LAYERS {
        z = linear(g, &format!("head.{j}"), z);
        if j + 1 < MLP_HEAD_LAYERS {
            z = g.gelu(z);
        }
    }
    z
}

fn decoder_logits(g: &mut Graph, cfg: &ModelConfig, memory: Var, mem_lens: &[usize], dec: &Packed) -> Var {
    let self_spec = AttnSpec::self_attention(&dec.lens, cfg.n_heads, true);
    let cross_spec = AttnSpec::cross_attention(&dec.lens, mem_lens, cfg.n_heads);
    let mut y = embed(g, "dec.", dec);
    for b in 0..cfg.n_blocks {
        y = self_attention_residual(g, &format!("dec.blocks.{b}.self"), y, &self_spec);
        y = cross_attention_residual(g, &format!("dec.blocks.{b}.cross"), y, memory, &cross_spec);
        let f = ffn_raw(g, &format!("dec.blocks.{b}.ffn"), y);
        y = g.add(y, f);
    }
    let h = layer_norm(g, "dec.ln_f", y);
    lm_logits(g, h)
}

/// Greedy decoding from one encoder memory: one logits row per generated
/// token, stopping after EOS or at `max_seq_len - 1` steps.
fn greedy_decode(cfg: &ModelConfig, store: &ParamStore, memory: &Tensor) -> Tensor {
    let mut dec = vec![BOS];
    let mut rows = Vec::new();
    while dec.len() < cfg.max_seq_len {
        let mut g = Graph::new(store);
        let m = g.constant(memory.clone());
        let p = Packed::new(&[&dec]);
        let l = decoder_logits(&mut g, cfg, m, &[memory.rows()], &p);
        let lv = g.value(l);
        let last = lv.select_rows([lv.rows() - 1]);
        let next = argmax(last.row(0)) as u32;
        rows.push(last);
        dec.push(next);
        if next == EOS {
            break;
        }
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    Tensor::vstack(&refs)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn split_rows(t: &Tensor, lens: &[usize]) -> Vec<Tensor> {
    let mut start = 0;
    lens.iter()
        .map(|&l| {
            let part = t.select_rows(start..start + l);
            start += l;
            part
        })
        .collect()
}

/// Head over the final residual stream `x` of a packed batch.
fn head_outputs(g: &mut Graph, cfg: &ModelConfig, x: Var, lens: &[usize]) -> Vec<Tensor> {
    let h = layer_norm(g, "ln_f", x);
    match cfg.arch {
        Arch::DecoderOnly => {
            let l = lm_logits(g, h);
            split_rows(g.value(l), lens)
        }
        Arch::EncoderMlp => {
            let segs = Packed::segments_of(lens);
            let l = mlp_logits(g, h, &segs);
            let lv = g.value(l);
            (0..lens.len()).map(|i| lv.select_rows([i])).collect()
        }
        Arch::EncoderDecoder => split_rows(g.value(h), lens)
            .iter()
            .map(|m| greedy_decode(cfg, g.store(), m))
            .collect(),
    }
}

pub(crate) fn run_batch(
    cfg: &ModelConfig,
    store: &ParamStore,
    seqs: &[&[u32]],
    taps: &[TapPoint],
    with_logits: bool,
) -> Result<BatchOutput> {
    for &s in seqs {
        check_tokens(cfg, s)?;
    }
    for t in taps {
        t.validate(cfg)?;
    }
    let end = if with_logits {
        2 * cfg.n_blocks
    } else {
        taps.iter().map(|&t| steps_through(t)).max().unwrap_or(0)
    };
    let packed = Packed::new(seqs);
    let spec = AttnSpec::self_attention(&packed.lens, cfg.n_heads, cfg.is_causal());
    let mut g = Graph::new(store);
    let x0 = embed(&mut g, "", &packed);
    let mut found: Vec<Option<Var>> = vec![None; taps.len()];
    let mut note = |tap: TapPoint, v: Var| {
        for (i, t) in taps.iter().enumerate() {
            if *t == tap {
                found[i] = Some(v);
            }
        }
    };
    note(TapPoint::embedding(), x0);
    let x = trunk(&mut g, x0, &spec, 0..end, &mut note);
    let states = found
        .iter()
        .map(|v| split_rows(g.value(v.expect("tap reached")), &packed.lens))
        .collect();
    let logits = if with_logits {
        head_outputs(&mut g, cfg, x, &packed.lens)
    } else {
        Vec::new()
    };
    Ok(BatchOutput {
        taps: taps.to_vec(),
        states,
        logits,
    })
}

/// Continue a forward pass from states observed at `from` (which must be
/// a residual-stream tap) through the rest of the model.
pub(crate) fn resume_batch(
    cfg: &ModelConfig,
    store: &ParamStore,
    states: &[Tensor],
    from: TapPoint,
) -> Result<Vec<Tensor>> {
    if states.is_empty() {
        return Err(Error::EmptyInput);
    }
    for s in states {
        if s.cols() != cfg.d_model || s.rows() == 0 || s.rows() > cfg.max_seq_len {
            return Err(Error::invalid(format!(
                "state shape {:?} incompatible with d_model {} / max_seq_len {}",
                s.shape(),
                cfg.d_model,
                cfg.max_seq_len
            )));
        }
        if !s.is_finite() {
            return Err(Error::NonFinite);
        }
    }
    let lens: Vec<usize> = states.iter().map(Tensor::rows).collect();
    let refs: Vec<&Tensor> = states.iter().collect();
    let spec = AttnSpec::self_attention(&lens, cfg.n_heads, cfg.is_causal());
    let mut g = Graph::new(store);
    let x0 = g.constant(Tensor::vstack(&refs));
    let x = trunk(&mut g, x0, &spec, steps_through(from)..2 * cfg.n_blocks, &mut |_, _| {});
    Ok(head_outputs(&mut g, cfg, x, &lens))
}

fn n_targets(cfg: &ModelConfig, batch: &Batch) -> usize {
    match cfg.arch {
        Arch::EncoderMlp => batch.tokens.len(),
        _ => batch.tokens.iter().map(|t| t.len().saturating_sub(1)).sum(),
    }
}

pub(crate) fn loss(cfg: &ModelConfig, g: &mut Graph, batch: &Batch) -> Result<Var> {
    if batch.tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    for s in &batch.tokens {
        check_tokens(cfg, s)?;
    }
    match cfg.arch {
        Arch::DecoderOnly => {
            let p = Packed::new(&batch.tokens);
            let spec = AttnSpec::self_attention(&p.lens, cfg.n_heads, true);
            let x0 = embed(g, "", &p);
            let x = trunk(g, x0, &spec, 0..2 * cfg.n_blocks, &mut |_, _| {});
            let h = layer_norm(g, "ln_f", x);
            let logits = lm_logits(g, h);
            let mut targets = Vec::new();
            for ((start, len), seq) in p.segments().into_iter().zip(&batch.tokens) {
                for i in 0..len - 1 {
                    targets.push((start + i, seq[i + 1] as usize));
                }
            }
            if targets.is_empty() {
                return Err(Error::invalid("sequences need at least two tokens"));
            }
            Ok(g.cross_entropy(logits, &targets))
        }
        Arch::EncoderMlp => {
            if batch.labels.len() != batch.tokens.len() {
                return Err(Error::invalid("classifier batch needs one label per sequence"));
            }
            let n_classes = cfg.n_outputs();
            if let Some(&l) = batch.labels.iter().find(|&&l| l as usize >= n_classes) {
                return Err(Error::invalid(format!("label {l} outside {n_classes} classes")));
            }
            let p = Packed::new(&batch.tokens);
            let spec = AttnSpec::self_attention(&p.lens, cfg.n_heads, false);
            let x0 = embed(g, "", &p);
            let x = trunk(g, x0, &spec, 0..2 * cfg.n_blocks, &mut |_, _| {});
            let h = layer_norm(g, "ln_f", x);
            let logits = mlp_logits(g, h, &p.segments());
            let targets: Vec<(usize, usize)> = batch
                .labels
                .iter()
                .enumerate()
                .map(|(i, &l)| (i, l as usize))
                .collect();
            Ok(g.cross_entropy(logits, &targets))
        }
        Arch::EncoderDecoder => {
            let enc_in = batch.encoder_inputs.as_ref().unwrap_or(&batch.tokens);
            if enc_in.len() != batch.tokens.len() {
                return Err(Error::invalid("encoder inputs and targets differ in count"));
            }
            let p = Packed::new(enc_in);
            let spec = AttnSpec::self_attention(&p.lens, cfg.n_heads, false);
            let x0 = embed(g, "", &p);
            let x = trunk(g, x0, &spec, 0..2 * cfg.n_blocks, &mut |_, _| {});
            let memory = layer_norm(g, "ln_f", x);
            let dec_in: Vec<&[u32]> = batch.tokens.iter().map(|t| &t[..t.len() - 1]).collect();
            if dec_in.iter().any(|d| d.is_empty()) {
                return Err(Error::invalid("sequences need at least two tokens"));
            }
            let dp = Packed::new(&dec_in);
            let logits = decoder_logits(g, cfg, memory, &p.lens, &dp);
            let mut targets = Vec::new();
            for ((start, len), seq) in dp.segments().into_iter().zip(&batch.tokens) {
                for i in 0..len {
                    targets.push((start + i, seq[i + 1] as usize));
                }
            }
            Ok(g.cross_entropy(logits, &targets))
        }
    }
}
