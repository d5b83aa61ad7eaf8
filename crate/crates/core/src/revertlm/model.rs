use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use super::config::{AttackerConfig, DecodeStrategy, PurifierVariant, TrainRecipe};
use crate::corpus::{detokenize, Vocab, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::layers::{
    ffn_raw, init_ffn, init_layer_norm, init_linear, init_self_attention, layer_norm, linear,
    self_attention_residual, INIT_STD,
};
use crate::nn::{checkpoint, AttnSpec, Graph, ParamStore, Tensor, Var};
use crate::splitproto::{AttackKnowledge, KnowledgeLevel, RepresentationFrame};
use crate::tinylm::{argmax, ModelId, ServerPart, TapPoint};

/// Parameter-name prefixes of the three trainable submodules.
pub const PURIFIER_PREFIX: &str = "pur.";
pub const MAPPER_PREFIX: &str = "map.";
pub const DECODER_PREFIX: &str = "dec.";
/// Frozen token probe used by the linear-with-tester purifier.
pub const TESTER_PREFIX: &str = "tester.";

const INVERT_CHUNK: usize = 64;

/// Which decoder rows produce logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum LogitRows {
    /// Every token row.
    Tokens,
    /// Only the last row of each sequence.
    Last,
}

#[derive(Clone, Debug)]
pub struct AttackerModel {
    pub(crate) config: AttackerConfig,
    pub(crate) store: ParamStore,
    pub(crate) victim_id: ModelId,
    pub(crate) tap: TapPoint,
    pub(crate) vocab: Vocab,
    pub(crate) recipe: Option<TrainRecipe>,
}

const CHECKPOINT_KIND: &str = "attacker";

impl AttackerModel {
    pub fn new(config: AttackerConfig, victim_id: ModelId, tap: TapPoint, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::config(format!(
                "vocabulary has {} entries, attacker expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6174_7461_636b);
        let mut store = ParamStore::new();
        let (d_in, d_e, d_a, v) = (config.d_in, config.d_embed, config.d_att, config.vocab_size);
        match config.purifier.variant {
            PurifierVariant::None => {}
            PurifierVariant::LinearProjection => init_linear(&mut store, "pur.lin", d_in, d_e, &mut rng),
            PurifierVariant::LinearWithTester => {
                init_linear(&mut store, "pur.lin", d_in, d_e, &mut rng);
                init_linear(&mut store, "tester.probe", d_e, v, &mut rng);
            }
            PurifierVariant::Autoencoder => {
                let b = config.bottleneck();
                init_linear(&mut store, "pur.enc", d_in, b, &mut rng);
                init_linear(&mut store, "pur.dec", b, d_e, &mut rng);
            }
        }
        init_linear(&mut store, "map.lin", d_e, d_a, &mut rng);
        store.insert("dec.tok_emb", Tensor::randn(v, d_a, INIT_STD, &mut rng));
        store.insert(
            "dec.pos_emb",
            Tensor::randn(config.max_prefix + config.max_seq_len, d_a, INIT_STD, &mut rng),
        );
        for b in 0..config.n_blocks {
            init_self_attention(&mut store, &format!("dec.blocks.{b}.attn"), d_a, &mut rng);
            init_ffn(&mut store, &format!("dec.blocks.{b}.ffn"), d_a, config.d_ff, &mut rng);
        }
        init_layer_norm(&mut store, "dec.ln_f", d_a);
        store.insert("dec.lm_head.w", Tensor::randn(v, d_a, INIT_STD, &mut rng));
        store.insert("dec.lm_head.b", Tensor::zeros(1, v));
        Ok(Self {
            config,
            store,
            victim_id,
            tap,
            vocab,
            recipe: None,
        })
    }

    pub fn config(&self) -> &AttackerConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn victim_id(&self) -> ModelId {
        self.victim_id
    }

    pub fn tap(&self) -> TapPoint {
        self.tap
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn recipe(&self) -> Option<&TrainRecipe> {
        self.recipe.as_ref()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config,
            "recipe": self.recipe,
            "victim_model_id": self.victim_id,
            "tap": self.tap,
            "vocab": self.vocab.tokens(),
        });
        checkpoint::save(path, &meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = checkpoint::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint(format!(
                "{} is not an attacker checkpoint",
                path.display()
            )));
        }
        let config: AttackerConfig = serde_json::from_value(meta["config"].clone())?;
        let recipe: Option<TrainRecipe> = serde_json::from_value(meta["recipe"].clone())?;
        let victim_id: ModelId = serde_json::from_value(meta["victim_model_id"].clone())?;
        let tap: TapPoint = serde_json::from_value(meta["tap"].clone())?;
        let words: Vec<String> = serde_json::from_value(meta["vocab"].clone())?;
        let vocab = Vocab::from_lines(&(words.join("\n") + "\n"))?;
        let mut m = Self::new(config, victim_id, tap, vocab)?;
        for (name, t) in m.store.iter() {
            match store.get(name) {
                Some(s) if s.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("parameter {name} missing or misshapen"))),
            }
        }
        if store.len() != m.store.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        m.store = store;
        m.recipe = recipe;
        Ok(m)
    }

    /// Purifier output for stacked trace rows.
    pub(crate) fn purify(&self, g: &mut Graph, rows: Var) -> Var {
        match self.config.purifier.variant {
            PurifierVariant::None => rows,
            PurifierVariant::LinearProjection | PurifierVariant::LinearWithTester => {
                linear(g, "pur.lin", rows)
            }
            PurifierVariant::Autoencoder => {
                let z = linear(g, "pur.enc", rows);
                let z = g.tanh(z);
                linear(g, "pur.dec", z)
            }
        }
    }

    /// The first `max_prefix` rows of each trace, stacked, with their counts.
    pub(crate) fn prefix_rows(&self, traces: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
        let mut parts = Vec::with_capacity(traces.len());
        let mut lens = Vec::with_capacity(traces.len());
        for t in traces {
            if t.cols() != self.config.d_in || t.rows() == 0 {
                return Err(Error::invalid(format!(
                    "trace of shape {:?} does not fit attacker input width {}",
                    t.shape(),
                    self.config.d_in
                )));
            }
            let n = t.rows().min(self.config.max_prefix);
            parts.push(t.select_rows(0..n));
            lens.push(n);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok((Tensor::vstack(&refs), lens))
    }

    /// Mapped prefix rows (`[sum lens, d_att]`) for `traces`.
    pub(crate) fn condition(&self, g: &mut Graph, traces: &[&Tensor]) -> Result<(Var, Vec<usize>)> {
        let (rows, lens) = self.prefix_rows(traces)?;
        let x = g.constant(rows);
        let p = self.purify(g, x);
        Ok((linear(g, "map.lin", p), lens))
    }

    /// Run the decoder over `[prefix_i ; seq_i]` for every example. With no
    /// prefix the decoder is a plain language model. Returns logits for the
    /// rows selected by `which`, in example order.
    pub(crate) fn decode_logits(
        &self,
        g: &mut Graph,
        prefix: Option<(Var, &[usize])>,
        seqs: &[&[u32]],
        which: LogitRows,
    ) -> Var {
        let cfg = &self.config;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let tok_table = g.named("dec.tok_emb");
        let toks = g.embed(tok_table, &ids);
        let mut parts = Vec::new();
        let mut positions = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        let mut picks = Vec::new();
        let (mut p_off, mut t_off) = (0usize, 0usize);
        for (i, s) in seqs.iter().enumerate() {
            let np = prefix.map_or(0, |(_, l)| l[i]);
            if let Some((pv, _)) = prefix {
                for r in 0..np {
                    parts.push((pv, p_off + r));
                    positions.push(r);
                }
            }
            let start = parts.len();
            for j in 0..s.len() {
                parts.push((toks, t_off + j));
                positions.push(cfg.max_prefix + j);
            }
            match which {
                LogitRows::Tokens => picks.extend(start..start + s.len()),
                LogitRows::Last => picks.push(start + s.len() - 1),
            }
            lens.push(np + s.len());
            p_off += np;
            t_off += s.len();
        }
        let x = g.rows(parts);
        let pos_table = g.named("dec.pos_emb");
        let pos = g.embed(pos_table, &positions);
        let mut x = g.add(x, pos);
        let spec = AttnSpec::self_attention(&lens, cfg.n_heads, true);
        for b in 0..cfg.n_blocks {
            x = self_attention_residual(g, &format!("dec.blocks.{b}.attn"), x, &spec);
            let f = ffn_raw(g, &format!("dec.blocks.{b}.ffn"), x);
            x = g.add(x, f);
        }
        let h = layer_norm(g, "dec.ln_f", x);
        let sel = g.rows(picks.into_iter().map(|r| (h, r)).collect());
        let w = g.named("dec.lm_head.w");
        let b = g.named("dec.lm_head.b");
        let l = g.matmul_t(sel, w);
        g.add_bias(l, b)
    }

    /// Teacher-forced logits for `(trace, tokens)` pairs plus the
    /// `(row, gold)` targets: input `tokens[..n-1]`, targets `tokens[1..]`.
    pub(crate) fn teacher_forced(
        &self,
        g: &mut Graph,
        traces: Option<&[&Tensor]>,
        tokens: &[&[u32]],
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        for t in tokens {
            if t.len() < 2 || t.len() > self.config.max_seq_len {
                return Err(Error::invalid(format!(
                    "attack targets need 2..={} tokens, got {}",
                    self.config.max_seq_len,
                    t.len()
                )));
            }
            if t.iter().any(|&x| x as usize >= self.config.vocab_size) {
                return Err(Error::invalid("target token outside attacker vocabulary"));
            }
        }
        let inputs: Vec<&[u32]> = tokens.iter().map(|t| &t[..t.len() - 1]).collect();
        let prefix = match traces {
            Some(tr) => {
                if tr.len() != tokens.len() {
                    return Err(Error::invalid("traces and targets differ in count"));
                }
                Some(self.condition(g, tr)?)
            }
            None => None,
        };
        let logits = self.decode_logits(
            g,
            prefix.as_ref().map(|(v, l)| (*v, l.as_slice())),
            &inputs,
            LogitRows::Tokens,
        );
        let mut targets = Vec::new();
        let mut row = 0;
        for t in tokens {
            for &gold in &t[1..] {
                targets.push((row, gold as usize));
                row += 1;
            }
        }
        Ok((logits, targets))
    }

    /// Mean per-token sequence cross-entropy `L_Φ / t` of a batch, in nats.
    pub fn loss(&self, g: &mut Graph, traces: &[&Tensor], tokens: &[&[u32]]) -> Result<Var> {
        let (logits, targets) = self.teacher_forced(g, Some(traces), tokens)?;
        Ok(g.cross_entropy(logits, &targets))
    }

    /// Token-weighted mean cross-entropy over a dataset, in nats.
    pub fn eval_ce(&self, traces: &[&Tensor], tokens: &[&[u32]]) -> Result<f64> {
        if traces.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (mut total, mut count) = (0.0, 0usize);
        for (tc, kc) in traces.chunks(64).zip(tokens.chunks(64)) {
            let mut g = Graph::new(&self.store);
            let l = self.loss(&mut g, tc, kc)?;
            let n: usize = kc.iter().map(|t| t.len() - 1).sum();
            total += g.value(l).item() * n as f64;
            count += n;
        }
        Ok(total / count as f64)
    }

    /// Next-token logits after `seqs` for each example.
    fn next_logits(&self, mapped: &[Tensor], seqs: &[&[u32]]) -> Tensor {
        let mut g = Graph::new(&self.store);
        let lens: Vec<usize> = mapped.iter().map(Tensor::rows).collect();
        let refs: Vec<&Tensor> = mapped.iter().collect();
        let p = g.constant(Tensor::vstack(&refs));
        let l = self.decode_logits(&mut g, Some((p, &lens)), seqs, LogitRows::Last);
        g.value(l).clone()
    }

    fn mapped_prefixes(&self, traces: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new(&self.store);
        let (v, lens) = self.condition(&mut g, traces)?;
        let all = g.value(v);
        let mut out = Vec::with_capacity(lens.len());
        let mut start = 0;
        for l in lens {
            out.push(all.select_rows(start..start + l));
            start += l;
        }
        Ok(out)
    }

    /// Token ids (BOS first, EOS last when produced) for each trace.
    pub fn generate(&self, traces: &[&Tensor], strategy: DecodeStrategy) -> Result<Vec<Vec<u32>>> {
        self.generate_from(traces, strategy, 0)
    }

    /// Sampling seeds count from `offset`, so chunked calls match one call
    /// over the whole batch.
    fn generate_from(&self, traces: &[&Tensor], strategy: DecodeStrategy, offset: usize) -> Result<Vec<Vec<u32>>> {
        if traces.is_empty() {
            return Ok(Vec::new());
        }
        let mapped = self.mapped_prefixes(traces)?;
        match strategy {
            DecodeStrategy::Greedy => Ok(self.greedy(&mapped)),
            DecodeStrategy::Beam(k) => {
                if k == 0 {
                    return Err(Error::config("beam width must be positive"));
                }
                Ok(mapped.iter().map(|m| self.beam(m, k)).collect())
            }
            DecodeStrategy::Sample { temperature, seed } => {
                if !(temperature > 0.0) {
                    return Err(Error::config("sampling temperature must be positive"));
                }
                Ok(mapped
                    .iter()
                    .enumerate()
                    .map(|(i, m)| self.sample(m, temperature, seed.wrapping_add((offset + i) as u64)))
                    .collect())
            }
        }
    }

    fn greedy(&self, mapped: &[Tensor]) -> Vec<Vec<u32>> {
        let mut seqs: Vec<Vec<u32>> = vec![vec![BOS]; mapped.len()];
        let mut active: Vec<usize> = (0..mapped.len()).collect();
        while !active.is_empty() {
            let m: Vec<Tensor> = active.iter().map(|&i| mapped[i].clone()).collect();
            let s: Vec<&[u32]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
            let logits = self.next_logits(&m, &s);
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let next = argmax(logits.row(r)) as u32;
                seqs[i].push(next);
                if next != EOS && seqs[i].len() < self.config.max_seq_len {
                    still.push(i);
                }
            }
            active = still;
        }
        seqs
    }

    fn beam(&self, mapped: &Tensor, k: usize) -> Vec<u32> {
        let mut beams: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
        let mut done: Vec<(Vec<u32>, f64)> = Vec::new();
        while !beams.is_empty() && done.len() < k {
            let m: Vec<Tensor> = beams.iter().map(|_| mapped.clone()).collect();
            let s: Vec<&[u32]> = beams.iter().map(|b| b.0.as_slice()).collect();
            let logits = self.next_logits(&m, &s);
            let mut cand: Vec<(usize, u32, f64)> = Vec::new();
            for (r, (_, score)) in beams.iter().enumerate() {
                let lp = log_softmax(logits.row(r));
                for (tok, &l) in lp.iter().enumerate() {
                    cand.push((r, tok as u32, score + l));
                }
            }
            cand.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            let mut next = Vec::with_capacity(k);
            for (r, tok, score) in cand.into_iter().take(k) {
                let mut seq = beams[r].0.clone();
                seq.push(tok);
                if tok == EOS || seq.len() >= self.config.max_seq_len {
                    done.push((seq, score));
                } else {
                    next.push((seq, score));
                }
            }
            beams = next;
        }
        done.extend(beams);
        done.into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(s, _)| s)
            .unwrap_or_else(|| vec![BOS])
    }

    fn sample(&self, mapped: &Tensor, temperature: f64, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = vec![BOS];
        while seq.len() < self.config.max_seq_len {
            let logits = self.next_logits(std::slice::from_ref(mapped), &[&seq]);
            let row = logits.row(0);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().map(|l| ((l - mx) / temperature).exp()).collect();
            let next = WeightedIndex::new(&w).map_or(EOS, |d| d.sample(&mut rng) as u32);
            seq.push(next);
            if next == EOS {
                break;
            }
        }
        seq
    }

    /// Reconstruct the text behind one transmitted frame.
    pub fn invert(&self, frame: &RepresentationFrame, strategy: DecodeStrategy) -> Result<String> {
        Ok(self.invert_batch(std::slice::from_ref(frame), strategy)?.remove(0))
    }

    pub fn invert_batch(&self, frames: &[RepresentationFrame], strategy: DecodeStrategy) -> Result<Vec<String>> {
        let mut traces = Vec::with_capacity(frames.len());
        for f in frames {
            if f.model_id != self.victim_id {
                return Err(Error::ModelMismatch);
            }
            if f.tap != self.tap {
                return Err(Error::invalid(format!(
                    "frame from tap {} but attacker trained at {}",
                    f.tap, self.tap
                )));
            }
            traces.push(f.to_trace().to_tensor());
        }
        let refs: Vec<&Tensor> = traces.iter().collect();
        let chunks = refs
            .par_chunks(INVERT_CHUNK)
            .enumerate()
            .map(|(c, chunk)| self.generate_from(chunk, strategy, c * INVERT_CHUNK))
            .collect::<Result<Vec<_>>>()?;
        Ok(chunks
            .into_iter()
            .flatten()
            .map(|ids| detokenize(&ids, &self.vocab))
            .collect())
    }

    /// Confirm the attacker holds none of the server's parameters when its
    /// knowledge does not allow them: no shared names, no identical tensors.
    pub fn audit_knowledge(&self, server: &ServerPart, knowledge: AttackKnowledge) -> Result<()> {
        knowledge.validate()?;
        if knowledge.level == KnowledgeLevel::WhiteBox {
            return Ok(());
        }
        for (name, t) in self.store.iter() {
            if ![PURIFIER_PREFIX, MAPPER_PREFIX, DECODER_PREFIX, TESTER_PREFIX]
                .iter()
                .any(|p| name.starts_with(p))
            {
                return Err(Error::Policy(format!("unexpected attacker parameter {name}")));
            }
            for (sname, st) in server.store().iter() {
                // Constant tensors (fresh norm gains, zero biases) match by
                // construction and carry no server knowledge.
                let constant = t.data().windows(2).all(|w| w[0] == w[1]);
                if !constant && st.shape() == t.shape() && st.data() == t.data() {
                    return Err(Error::Policy(format!(
                        "attacker parameter {name} duplicates server parameter {sname}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    row.iter().map(|l| l - lse).collect()
}
