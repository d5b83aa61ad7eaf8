//! Toy transformer victims with taps at every sublayer boundary, and the
//! client/server splitter.

mod config;
mod model;
mod split;
mod train;

pub use config::{Arch, ModelConfig, TapPoint, TapPosition, MLP_HEAD_LAYERS};
pub use model::{Batch, BatchOutput, ModelId, RepresentationTrace, VictimModel};
pub use split::{split, ClientPart, ServerPart};
pub use train::{train_victim, VictimTraining, VictimTrainLog};

pub(crate) use model::argmax;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::nn::{Graph, Tensor};

    fn seqs() -> Vec<Vec<u32>> {
        vec![vec![0, 5, 9, 3, 1], vec![0, 7, 1], vec![0, 4, 4, 4, 8, 11, 1]]
    }

    fn models() -> Vec<VictimModel> {
        [Arch::DecoderOnly, Arch::EncoderDecoder, Arch::EncoderMlp]
            .into_iter()
            .map(|a| VictimModel::new(ModelConfig::micro(a, 16, 3)).unwrap())
            .collect()
    }

    #[test]
    fn taps_do_not_change_logits() {
        for m in models() {
            let s = &seqs()[0];
            let plain = m.logits(s).unwrap();
            let taps = TapPoint::all(m.config());
            let (traces, tapped) = m.forward_with_taps(s, &taps).unwrap();
            assert_eq!(plain, tapped);
            for t in &traces {
                assert_eq!((t.token_count, t.d_model), (s.len(), 8));
            }
        }
    }

    #[test]
    fn embedding_tap_is_token_plus_position() {
        let m = &models()[0];
        let s = &seqs()[2];
        let (tr, _) = m.forward_with_tap(s, TapPoint::embedding()).unwrap();
        let tok = m.store().get("tok_emb").unwrap();
        let pos = m.store().get("pos_emb").unwrap();
        for (t, &id) in s.iter().enumerate() {
            for j in 0..8 {
                let want = (tok.get(id as usize, j) + pos.get(t, j)) as f32;
                assert_eq!(tr.row(t)[j], want);
            }
        }
    }

    #[test]
    fn block_out_feeds_next_block() {
        // block_out(0) is the input of block 1, and block 1's attention_out
        // recomputed from it on the server side must match the tap.
        let m = &models()[0];
        let s = &seqs()[0];
        let taps = [TapPoint::block_out(0), TapPoint::new(0, TapPosition::AttentionOut),
            TapPoint::new(0, TapPosition::FfnOut)];
        let out = m.run_batch(&[s], &taps, false).unwrap();
        let (b0, a0, f0) = (&out.states[0][0], &out.states[1][0], &out.states[2][0]);
        let mut sum = a0.clone();
        sum.add_assign(f0);
        assert!(sum.max_abs_diff(b0) < 1e-15);
    }

    #[test]
    fn batched_traces_match_single() {
        let m = &models()[0];
        let tap = TapPoint::new(1, TapPosition::AttentionOut);
        let out = m.run_batch(&seqs(), &[tap], true).unwrap();
        for (i, s) in seqs().iter().enumerate() {
            let (tr, logits) = m.forward_with_tap(s, tap).unwrap();
            assert!(tr.to_tensor().max_abs_diff(&out.states[0][i]) < 1e-6);
            assert!(logits.max_abs_diff(&out.logits[i]) < 1e-9);
        }
    }

    #[test]
    fn split_identity_and_partition() {
        for m in models() {
            for b in 0..2 {
                for pos in [TapPosition::AttentionOut, TapPosition::BlockOut] {
                    let tap = TapPoint::new(b, pos);
                    let (c, srv) = split(&m, tap).unwrap();
                    assert_eq!(c.num_params() + srv.num_params(), m.num_params());
                    for s in seqs() {
                        let full = m.logits(&s).unwrap();
                        let via = srv.forward(&c.forward(&s).unwrap()).unwrap();
                        assert_eq!(full.shape(), via.shape());
                        assert!(full.max_abs_diff(&via) <= 1e-5, "{tap} {:?}", m.config().arch);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_split_server_starts_with_same_block_ffn() {
        let m = &models()[0];
        let (c, s) = split(m, TapPoint::new(1, TapPosition::AttentionOut)).unwrap();
        assert!(c.store().contains("blocks.1.attn.q.w"));
        assert!(!c.store().contains("blocks.1.ffn.fc1.w"));
        assert!(s.store().contains("blocks.1.ffn.fc1.w"));
        assert!(!s.store().contains("tok_emb"));
    }

    #[test]
    fn input_validation() {
        let m = &models()[0];
        assert!(matches!(m.logits(&[]), Err(Error::EmptyInput)));
        assert!(m.logits(&[0; 13]).is_err());
        assert!(m.logits(&[0, 99]).is_err());
        assert!(m.forward_with_tap(&[0, 1], TapPoint::block_out(2)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_logits_and_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = models().remove(0);
        m.store_mut().round_to_f32();
        let p = dir.path().join("victim.ckpt");
        m.save(&p).unwrap();
        let back = VictimModel::load(&p).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.model_id(), m.model_id());
        assert_eq!(back.logits(&seqs()[0]).unwrap(), m.logits(&seqs()[0]).unwrap());
        let other = VictimModel::new(ModelConfig::micro(Arch::DecoderOnly, 16, 4)).unwrap();
        assert_ne!(other.model_id(), m.model_id());
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let m = VictimModel::new(ModelConfig::toy(200, 1)).unwrap();
        let ce = m.eval_ce(&seqs(), &[]).unwrap();
        let bound = (200f64).ln();
        assert!((ce - bound).abs() / bound < 0.05, "{ce} vs {bound}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for mut m in models() {
            let labels = if m.config().arch == Arch::EncoderMlp { vec![0, 2, 1] } else { vec![] };
            let batch = Batch::new(seqs(), labels);
            let grads = {
                let mut g = Graph::new(m.store());
                let l = m.loss(&mut g, &batch).unwrap();
                g.backward(l)
            };
            let ids: Vec<_> = m.store().ids().collect();
            for (k, &id) in ids.iter().enumerate().step_by(5) {
                let idx = k % m.store().tensor(id).len();
                let analytic = grads.get(id).map_or(0.0, |t: &Tensor| t.data()[idx]);
                let eval = |m: &VictimModel| {
                    let mut g = Graph::new(m.store());
                    let l = m.loss(&mut g, &batch).unwrap();
                    g.value(l).item()
                };
                let eps = 1e-5;
                let orig = m.store().tensor(id).data()[idx];
                m.store_mut().tensor_mut(id).data_mut()[idx] = orig + eps;
                let up = eval(&m);
                m.store_mut().tensor_mut(id).data_mut()[idx] = orig - eps;
                let down = eval(&m);
                m.store_mut().tensor_mut(id).data_mut()[idx] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
                assert!(rel < 1e-3, "{} {analytic} {numeric}", m.store().name(id));
            }
        }
    }
}
