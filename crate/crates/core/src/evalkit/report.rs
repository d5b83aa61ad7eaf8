use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::metrics::{bleu, cosine, rouge_l};
use crate::corpus::{normalize, tokenize, Vocab, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::tinylm::VictimModel;

/// Maps a sentence to a fixed-width vector. Must be deterministic.
pub trait SentenceEmbedder: Sync {
    fn name(&self) -> &str;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Mean of the victim's input-embedding rows over the sentence's words.
pub struct VictimEmbedder {
    table: Tensor,
    vocab: Vocab,
}

impl VictimEmbedder {
    pub fn new(victim: &VictimModel, vocab: &Vocab) -> Result<Self> {
        let table = victim
            .store()
            .get("tok_emb")
            .ok_or_else(|| Error::invalid("victim has no tok_emb table"))?
            .clone();
        if table.rows() != vocab.len() {
            return Err(Error::ModelMismatch);
        }
        Ok(Self {
            table,
            vocab: vocab.clone(),
        })
    }
}

impl SentenceEmbedder for VictimEmbedder {
    fn name(&self) -> &str {
        "victim_embedding"
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.table.cols()];
        if normalize(text).is_empty() {
            return Ok(v);
        }
        let ids: Vec<u32> = tokenize(text, &self.vocab)?
            .into_iter()
            .filter(|&t| t != BOS && t != EOS)
            .collect();
        for &id in &ids {
            for (a, b) in v.iter_mut().zip(self.table.row(id as usize)) {
                *a += b;
            }
        }
        v.iter_mut().for_each(|a| *a /= ids.len() as f64);
        Ok(v)
    }
}

/// L2-normalized word-count vector over a vocabulary. Words outside the
/// vocabulary share the UNK slot.
pub struct CountEmbedder {
    vocab: Vocab,
}

impl CountEmbedder {
    pub fn new(vocab: &Vocab) -> Self {
        Self { vocab: vocab.clone() }
    }

    /// A vocabulary holding every word of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| normalize(t).split(' ').map(str::to_string).collect::<Vec<_>>())
            .filter(|w| !w.is_empty())
            .collect();
        Self {
            vocab: Vocab::from_words(words),
        }
    }
}

impl SentenceEmbedder for CountEmbedder {
    fn name(&self) -> &str {
        "token_counts"
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.vocab.len()];
        if normalize(text).is_empty() {
            return Ok(v);
        }
        for id in tokenize(text, &self.vocab)? {
            if id != BOS && id != EOS {
                v[id as usize] += 1.0;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    }
}

pub fn cosine_similarity(candidate: &str, reference: &str, embedder: &dyn SentenceEmbedder) -> Result<f64> {
    cosine(&embedder.embed(candidate)?, &embedder.embed(reference)?)
}

fn words(text: &str) -> Vec<String> {
    normalize(text).split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub record_id: String,
    pub truth: String,
    pub guess: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub record_id: String,
    pub rouge_l: f64,
    pub bleu: f64,
    pub cos_sim: f64,
    pub cos_counts: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rouge_l: f64,
    pub bleu: f64,
    /// Cosine under the configured embedder.
    pub cos_sim: f64,
    /// Cosine under L2-normalized word counts.
    pub cos_counts: f64,
    pub embedder: String,
    pub n_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_pair: Vec<PairScore>,
}

/// Score every inversion and average. Pairs are sorted by record id first,
/// so the result does not depend on input order. An empty guess scores 0
/// on every metric.
pub fn evaluate_run(
    inversions: &[Inversion],
    embedder: &dyn SentenceEmbedder,
    keep_pairs: bool,
) -> Result<EvalReport> {
    if inversions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted: Vec<&Inversion> = inversions.iter().collect();
    sorted.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let counts = CountEmbedder::from_texts(sorted.iter().flat_map(|i| [i.truth.as_str(), i.guess.as_str()]));
    let mut pairs = Vec::with_capacity(sorted.len());
    for inv in sorted {
        let truth = words(&inv.truth);
        if truth.is_empty() {
            return Err(Error::invalid(format!("record {} has no ground truth", inv.record_id)));
        }
        let guess = words(&inv.guess);
        let score = if guess.is_empty() {
            log::warn!("record {}: empty inversion scored 0", inv.record_id);
            PairScore {
                record_id: inv.record_id.clone(),
                rouge_l: 0.0,
                bleu: 0.0,
                cos_sim: 0.0,
                cos_counts: 0.0,
            }
        } else {
            PairScore {
                record_id: inv.record_id.clone(),
                rouge_l: rouge_l(&guess, &truth)?,
                bleu: bleu(&guess, &[&truth])?,
                cos_sim: cosine_similarity(&inv.guess, &inv.truth, embedder)?,
                cos_counts: cosine_similarity(&inv.guess, &inv.truth, &counts)?,
            }
        };
        pairs.push(score);
    }
    let n = pairs.len() as f64;
    let mean = |f: fn(&PairScore) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        rouge_l: mean(|p| p.rouge_l),
        bleu: mean(|p| p.bleu),
        cos_sim: mean(|p| p.cos_sim),
        cos_counts: mean(|p| p.cos_counts),
        embedder: embedder.name().to_string(),
        n_pairs: pairs.len(),
        ppl: None,
        per_pair: if keep_pairs { pairs } else { Vec::new() },
    })
}

/// `record_id,rouge_l,bleu,cos_sim,cos_counts` rows plus a `mean` footer.
pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("record_id,rouge_l,bleu,cos_sim,cos_counts\n");
    for p in &report.per_pair {
        s.push_str(&format!(
            "{},{:.12},{:.12},{:.12},{:.12}\n",
            p.record_id, p.rouge_l, p.bleu, p.cos_sim, p.cos_counts
        ));
    }
    s.push_str(&format!(
        "mean,{:.12},{:.12},{:.12},{:.12}\n",
        report.rouge_l, report.bleu, report.cos_sim, report.cos_counts
    ));
    s
}

/// Tab-separated `record_id, ground_truth, inverted_text`.
pub fn inversion_tsv(inversions: &[Inversion]) -> String {
    let clean = |s: &str| s.replace(['\t', '\n'], " ");
    let mut s = String::from("record_id\tground_truth\tinverted_text\n");
    for i in inversions {
        s.push_str(&format!("{}\t{}\t{}\n", clean(&i.record_id), clean(&i.truth), clean(&i.guess)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inv(id: &str, t: &str, g: &str) -> Inversion {
        Inversion {
            record_id: id.into(),
            truth: t.into(),
            guess: g.into(),
        }
    }

    #[test]
    fn count_cosine_matches_hand_computed_value() {
        let e = CountEmbedder::from_texts(["the cat sat down"]);
        // (1,1,1,0) . (1,1,1,1) / (sqrt 3 * 2)
        let c = cosine_similarity("the cat sat", "the cat sat down", &e).unwrap();
        assert!((c - 3.0 / (3f64.sqrt() * 2.0)).abs() < 1e-15);
        assert_eq!(cosine_similarity("the cat", "sat down", &e).unwrap(), 0.0);
        assert_eq!(cosine_similarity("sat the cat", "the cat sat", &e).unwrap(), 1.0);
    }

    #[test]
    fn exact_recovery_scores_one() {
        let s = "no i just make boats on the weekend . what else do you do ?";
        let e = CountEmbedder::from_texts([s]);
        let r = evaluate_run(&[inv("r1", s, s)], &e, true).unwrap();
        assert_eq!((r.rouge_l, r.bleu, r.cos_sim, r.cos_counts), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn aggregate_is_order_free_mean() {
        let runs = vec![
            inv("b", "i like to swim", "i like to run"),
            inv("a", "my dog is brown", "my cat is brown"),
            inv("c", "we went home", ""),
        ];
        let e = CountEmbedder::from_texts(runs.iter().map(|i| i.truth.as_str()));
        let r = evaluate_run(&runs, &e, true).unwrap();
        let mut rev = runs.clone();
        rev.reverse();
        assert_eq!(r, evaluate_run(&rev, &e, true).unwrap());
        let mean: f64 = r.per_pair.iter().map(|p| p.rouge_l).sum::<f64>() / 3.0;
        assert!((mean - r.rouge_l).abs() < 1e-12);
        assert_eq!(r.per_pair[0].record_id, "a");
        assert_eq!(r.per_pair[2].rouge_l, 0.0);
        assert!(report_csv(&r).lines().last().unwrap().starts_with("mean,"));
        assert!(evaluate_run(&[inv("x", " ", "a")], &e, false).is_err());
    }
}
