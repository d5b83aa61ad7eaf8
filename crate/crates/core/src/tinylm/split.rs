use super::config::{ModelConfig, TapPoint, TapPosition};
use super::model::{resume_batch, run_batch, ModelId, RepresentationTrace, VictimModel};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

/// Device-side half: embeddings and every sublayer up to the split tap.
#[derive(Clone, Debug)]
pub struct ClientPart {
    config: ModelConfig,
    tap: TapPoint,
    store: ParamStore,
    model_id: ModelId,
}

/// Server-side half: the remaining sublayers and the output head.
#[derive(Clone, Debug)]
pub struct ServerPart {
    config: ModelConfig,
    tap: TapPoint,
    store: ParamStore,
    model_id: ModelId,
}

/// Whether parameter `name` runs on the client for a split at `tap`.
fn on_client(name: &str, tap: TapPoint) -> bool {
    if name == "tok_emb" || name == "pos_emb" {
        return true;
    }
    let Some(rest) = name.strip_prefix("blocks.") else {
        return false;
    };
    let (idx, sub) = rest.split_once('.').unwrap_or((rest, ""));
    let Ok(b) = idx.parse::<usize>() else {
        return false;
    };
    b < tap.block_index
        || (b == tap.block_index
            && (sub.starts_with("attn.") || tap.position == TapPosition::BlockOut))
}

/// Cut the model at `tap`. Only residual-stream taps after block 0's
/// attention can be split: the raw feed-forward output does not carry the
/// residual stream the server would need to continue.
pub fn split(model: &VictimModel, tap: TapPoint) -> Result<(ClientPart, ServerPart)> {
    let config = model.config().clone();
    tap.validate(&config)?;
    match tap.position {
        TapPosition::Embedding => {
            return Err(Error::InvalidTap {
                tap: tap.to_string(),
                reason: "cannot split before block 0 output".into(),
            })
        }
        TapPosition::FfnOut => {
            return Err(Error::InvalidTap {
                tap: tap.to_string(),
                reason: "ffn_out is the pre-residual sublayer output; the server cannot rebuild the residual stream from it".into(),
            })
        }
        TapPosition::AttentionOut | TapPosition::BlockOut => {}
    }
    let model_id = model.model_id();
    let client = ClientPart {
        config: config.clone(),
        tap,
        store: model.store().subset(|n| on_client(n, tap)),
        model_id,
    };
    let server = ServerPart {
        config,
        tap,
        store: model.store().subset(|n| !on_client(n, tap)),
        model_id,
    };
    Ok((client, server))
}

impl ClientPart {
    pub fn tap(&self) -> TapPoint {
        self.tap
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn model_id(&self) -> ModelId {
        self.model_id
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<RepresentationTrace> {
        let t = self.forward_batch(&[tokens])?.remove(0);
        RepresentationTrace::from_tensor(self.tap, &t)
    }

    /// States at the split tap for each sequence, in f64.
    pub fn forward_batch<S: AsRef<[u32]>>(&self, seqs: &[S]) -> Result<Vec<Tensor>> {
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_ref()).collect();
        let out = run_batch(&self.config, &self.store, &refs, &[self.tap], false)?;
        Ok(out.states.into_iter().next().unwrap_or_default())
    }
}

impl ServerPart {
    pub fn tap(&self) -> TapPoint {
        self.tap
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn model_id(&self) -> ModelId {
        self.model_id
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn forward(&self, trace: &RepresentationTrace) -> Result<Tensor> {
        if trace.tap != self.tap {
            return Err(Error::invalid(format!(
                "trace from tap {} sent to server split at {}",
                trace.tap, self.tap
            )));
        }
        trace.validate()?;
        Ok(self.forward_batch(&[trace.to_tensor()])?.remove(0))
    }

    pub fn forward_batch(&self, states: &[Tensor]) -> Result<Vec<Tensor>> {
        resume_batch(&self.config, &self.store, states, self.tap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::Arch;

    #[test]
    fn ownership_rule() {
        let t = TapPoint::new(1, TapPosition::AttentionOut);
        assert!(on_client("tok_emb", t));
        assert!(on_client("blocks.0.ffn.fc1.w", t));
        assert!(on_client("blocks.1.attn.q.w", t));
        assert!(!on_client("blocks.1.ffn.fc1.w", t));
        assert!(!on_client("blocks.10.attn.q.w", TapPoint::block_out(1)));
        assert!(!on_client("dec.blocks.0.self.q.w", t));
        assert!(!on_client("lm_head.w", t));
    }

    #[test]
    fn embedding_and_ffn_splits_are_rejected() {
        let m = VictimModel::new(ModelConfig::micro(Arch::DecoderOnly, 20, 1)).unwrap();
        let e = split(&m, TapPoint::embedding()).unwrap_err();
        assert!(e.to_string().contains("cannot split before block 0 output"));
        assert!(split(&m, TapPoint::new(0, TapPosition::FfnOut)).is_err());
    }
}
