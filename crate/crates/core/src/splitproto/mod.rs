//! The device-to-server channel of a split deployment: frame codec,
//! capture files, sessions over in-process and loopback transports, and the
//! attacker's knowledge boundary.

mod capture;
mod frame;
mod knowledge;
mod session;

pub use capture::{capture_dataset, CaptureEntry, CaptureManifest, CaptureSet};
pub use frame::{
    deserialize_frame, serialize_frame, RepresentationFrame, CRC_LEN, DTYPE_F32, FRAME_MAGIC,
    FRAME_VERSION, HEADER_LEN,
};
pub use knowledge::{AttackKnowledge, AttackerView, KnowledgeLevel, ServerArchitecture};
pub use session::{run_session, Session, SessionLog, Transport};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_splits, synth_corpus, SplitLabel, TemplateGrammar};
    use crate::error::Error;
    use crate::tinylm::{split, Arch, ModelConfig, TapPoint, TapPosition, VictimModel};

    fn victim(vocab: usize) -> VictimModel {
        let mut c = ModelConfig::micro(Arch::DecoderOnly, vocab, 11);
        c.max_seq_len = 32;
        VictimModel::new(c).unwrap()
    }

    #[test]
    fn transports_agree_bitwise_and_log_one_frame_per_forward() {
        let m = victim(30);
        let (c, s) = split(&m, TapPoint::new(1, TapPosition::AttentionOut)).unwrap();
        let mut a = Session::new(c.clone(), s.clone(), Transport::InProcess).unwrap();
        let mut b = Session::new(c, s, Transport::LocalSocket).unwrap();
        for seq in [vec![0u32, 4, 5, 1], vec![0, 9, 1], vec![0, 3, 3, 3, 3, 1]] {
            let x = a.forward(&seq).unwrap();
            let y = b.forward(&seq).unwrap();
            assert_eq!(x.data().len(), y.data().len());
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
            assert!(x.max_abs_diff(&m.logits(&seq).unwrap()) <= 1e-5);
        }
        assert_eq!(a.log().len(), 3);
        assert_eq!(b.log().len(), 3);
        assert_eq!(a.log().frames, b.log().frames);
    }

    #[test]
    fn interrupted_socket_is_retriable() {
        let m = victim(30);
        let (c, s) = split(&m, TapPoint::block_out(0)).unwrap();
        let mut sess = Session::new(c, s, Transport::LocalSocket).unwrap();
        sess.forward(&[0, 4, 1]).unwrap();
        sess.interrupt();
        match sess.forward(&[0, 4, 1]) {
            Err(Error::Transport { retriable, .. }) => assert!(retriable),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn server_rejects_frames_from_another_model() {
        let m1 = victim(30);
        let m2 = VictimModel::new(ModelConfig::micro(Arch::DecoderOnly, 30, 12)).unwrap();
        let tap = TapPoint::block_out(0);
        let (c1, _) = split(&m1, tap).unwrap();
        let (_, s2) = split(&m2, tap).unwrap();
        assert!(Session::new(c1.clone(), s2.clone(), Transport::InProcess).is_err());
        let frame = serialize_frame(&c1.forward(&[0, 5, 1]).unwrap(), c1.model_id()).unwrap();
        let decoded = deserialize_frame(&frame).unwrap();
        assert_ne!(decoded.model_id, s2.model_id());
    }

    #[test]
    fn capture_roundtrip_and_text_visibility() {
        let corpus = synth_corpus(2, 200, &TemplateGrammar::persona()).unwrap();
        let corpus = make_splits(corpus, (0.8, 0.1, 0.1), 0.1, 2).unwrap();
        let m = victim(corpus.vocab.len());
        let tap = TapPoint::block_out(1);
        let all = [SplitLabel::Aux, SplitLabel::Train, SplitLabel::Test];
        let cap = capture_dataset(&m, tap, &corpus, &all).unwrap();
        assert_eq!(cap.len(), corpus.slice(&all).len());
        for e in &cap.manifest.entries {
            assert_eq!(e.text.is_some(), e.split != SplitLabel::Test);
        }
        let dir = tempfile::tempdir().unwrap();
        cap.save(dir.path()).unwrap();
        let back = CaptureSet::load(dir.path()).unwrap();
        assert_eq!(back.manifest, cap.manifest);
        for (a, b) in back.traces.iter().zip(&cap.traces) {
            assert_eq!(a, b);
        }
        // Replaying through the server reproduces the model's logits.
        let (_, server) = split(&m, tap).unwrap();
        for (t, e) in back.traces.iter().zip(&back.manifest.entries).take(10) {
            let rec = corpus.record(&e.record_id).unwrap();
            let full = m.logits(&rec.tokens).unwrap();
            assert!(server.forward(t).unwrap().max_abs_diff(&full) <= 1e-5);
        }
        std::fs::write(dir.path().join("frames/000003.slrf"), b"junk").unwrap();
        assert!(CaptureSet::load(dir.path()).is_err());
    }

    #[test]
    fn knowledge_policy() {
        assert!(AttackKnowledge {
            level: KnowledgeLevel::WhiteBox,
            server_arch_known: false,
            server_layer_traces: false
        }
        .validate()
        .is_err());
        let corpus = make_splits(synth_corpus(2, 50, &TemplateGrammar::persona()).unwrap(), (0.8, 0.1, 0.1), 0.1, 2).unwrap();
        let m = victim(corpus.vocab.len());
        let tap = TapPoint::block_out(0);
        let cap = capture_dataset(&m, tap, &corpus, &[SplitLabel::Aux]).unwrap();
        let (_, server) = split(&m, tap).unwrap();
        let bb = AttackerView::new(AttackKnowledge::black_box(), &cap, &server).unwrap();
        assert!(matches!(bb.server_parameters(), Err(Error::Policy(_))));
        assert!(matches!(bb.server_architecture(), Err(Error::Policy(_))));
        assert_eq!(bb.frames().len(), cap.len());
        let wb = AttackerView::new(AttackKnowledge::white_box(), &cap, &server).unwrap();
        assert_eq!(wb.server_parameters().unwrap().num_scalars(), server.num_params());
    }
}
