//! Reconstruction-quality metrics: ROUGE-L, BLEU-4 and embedding cosine.

mod metrics;
mod report;

pub use metrics::{bleu, cosine, lcs_len, rouge_l};
pub use report::{
    cosine_similarity, evaluate_run, inversion_tsv, report_csv, CountEmbedder, EvalReport,
    Inversion, PairScore, SentenceEmbedder, VictimEmbedder,
};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_matches_reference_table() {
        let table = include_str!("../../tests/fixtures/bleu_table.tsv");
        let mut n = 0;
        for line in table.lines().filter(|l| !l.starts_with('#')) {
            let cols: Vec<&str> = line.split('\t').collect();
            let c: Vec<&str> = cols[0].split(' ').collect();
            let r: Vec<&str> = cols[1].split(' ').collect();
            let want: f64 = cols[2].parse().unwrap();
            let got = bleu(&c, &[&r]).unwrap();
            assert!((got - want).abs() < 1e-12, "{line}: {got}");
            n += 1;
        }
        assert_eq!(n, 10);
    }
}
