use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{tap_dir, EmbedderKind, RunConfig};
use super::manifest::{provenance, RunManifest};
use crate::corpus::{Corpus, SplitLabel};
use crate::error::{Error, Result};
use crate::evalkit::{
    evaluate_run, inversion_tsv, report_csv, CountEmbedder, EvalReport, Inversion, SentenceEmbedder,
    VictimEmbedder,
};
use crate::miprobe::{block_out_correlation, information_plane, plane_csv, xh_non_monotone};
use crate::revertlm::{
    run_recipe, AttackData, AttackInputs, AttackTrainLog, AttackerConfig, AttackerModel,
    PurifierConfig, PurifierVariant,
};
use crate::splitproto::{capture_dataset, CaptureSet, RepresentationFrame};
use crate::tinylm::{train_victim, TapPoint, TapPosition, VictimModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    SynthData,
    TrainVictim,
    Capture,
    AttackTrain,
    AttackEval,
    MiScan,
    SublayerSweep,
    DepthSweep,
    PurifierAblation,
    Report,
}

impl Subcommand {
    pub const ALL: [Subcommand; 10] = [
        Self::SynthData,
        Self::TrainVictim,
        Self::Capture,
        Self::AttackTrain,
        Self::AttackEval,
        Self::MiScan,
        Self::SublayerSweep,
        Self::DepthSweep,
        Self::PurifierAblation,
        Self::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SynthData => "synth-data",
            Self::TrainVictim => "train-victim",
            Self::Capture => "capture",
            Self::AttackTrain => "attack-train",
            Self::AttackEval => "attack-eval",
            Self::MiScan => "mi-scan",
            Self::SublayerSweep => "sublayer-sweep",
            Self::DepthSweep => "depth-sweep",
            Self::PurifierAblation => "purifier-ablation",
            Self::Report => "report",
        }
    }
}

impl std::str::FromStr for Subcommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown subcommand {s:?}")))
    }
}

/// Files written by one subcommand.
struct Artifacts {
    root: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|_| path.to_string_lossy().into_owned())
    }

    fn write(&mut self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(&path, contents)?;
        self.files.push(self.rel(&path));
        Ok(path)
    }

    fn register(&mut self, path: &Path) {
        self.files.push(self.rel(path));
    }

    fn save_captures(&mut self, set: &CaptureSet, dir: &Path) -> Result<()> {
        set.save(dir)?;
        self.register(&dir.join("manifest.json"));
        for e in &set.manifest.entries {
            self.register(&dir.join(&e.frame));
        }
        Ok(())
    }
}

/// One trained-and-evaluated attacker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub tap: TapPoint,
    pub variant: PurifierVariant,
    pub log: AttackTrainLog,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Block index, or `None` for the embedding tap.
    pub block: Option<usize>,
    pub position: TapPosition,
    pub variant: PurifierVariant,
    pub rouge_l: f64,
    pub bleu: f64,
    pub cos_sim: f64,
    pub cos_counts: f64,
    pub val_ce: f64,
    pub step3_reverted: bool,
}

impl SweepRow {
    fn of(run: &AttackRun) -> Self {
        Self {
            block: (run.tap.position != TapPosition::Embedding).then_some(run.tap.block_index),
            position: run.tap.position,
            variant: run.variant,
            rouge_l: run.report.rouge_l,
            bleu: run.report.bleu,
            cos_sim: run.report.cos_sim,
            cos_counts: run.report.cos_counts,
            val_ce: run.log.val_ce_step3,
            step3_reverted: run.log.step3_reverted,
        }
    }
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load(&cfg.corpus_dir())
}

pub fn load_victim(cfg: &RunConfig) -> Result<VictimModel> {
    VictimModel::load(&cfg.victim_path())
}

fn embedder(cfg: &RunConfig, victim: &VictimModel, corpus: &Corpus) -> Result<Box<dyn SentenceEmbedder>> {
    Ok(match cfg.attack.embedder {
        EmbedderKind::VictimEmbedding => Box::new(VictimEmbedder::new(victim, &corpus.vocab)?),
        EmbedderKind::TokenCounts => Box::new(CountEmbedder::new(&corpus.vocab)),
    })
}

/// Captures one attacker needs: train, aux and test at `tap`, plus the
/// embedding-tap aux targets for the purifier.
pub struct AttackCaptures {
    pub train: CaptureSet,
    pub aux: CaptureSet,
    pub test: CaptureSet,
    pub aux_embedding: CaptureSet,
}

impl AttackCaptures {
    pub fn capture(victim: &VictimModel, corpus: &Corpus, tap: TapPoint) -> Result<Self> {
        Ok(Self {
            train: capture_dataset(victim, tap, corpus, &[SplitLabel::Train])?,
            aux: capture_dataset(victim, tap, corpus, &[SplitLabel::Aux])?,
            test: capture_dataset(victim, tap, corpus, &[SplitLabel::Test])?,
            aux_embedding: capture_dataset(victim, TapPoint::embedding(), corpus, &[SplitLabel::Aux])?,
        })
    }

    fn dirs(cfg: &RunConfig, tap: TapPoint) -> [PathBuf; 4] {
        let root = cfg.captures_dir();
        let at = root.join(tap_dir(tap));
        [at.join("train"), at.join("aux"), at.join("test"), root.join("embedding").join("aux")]
    }

    pub fn load(cfg: &RunConfig, tap: TapPoint) -> Result<Self> {
        let [tr, aux, te, emb] = Self::dirs(cfg, tap);
        Ok(Self {
            train: CaptureSet::load(&tr)?,
            aux: CaptureSet::load(&aux)?,
            test: CaptureSet::load(&te)?,
            aux_embedding: CaptureSet::load(&emb)?,
        })
    }
}

/// Build and train an attacker for `tap` from its captures.
pub fn train_attacker_on(
    cfg: &RunConfig,
    corpus: &Corpus,
    caps: &AttackCaptures,
    purifier: &PurifierConfig,
    recipe: &crate::revertlm::TrainRecipe,
) -> Result<(AttackerModel, AttackTrainLog)> {
    let tap = caps.train.tap();
    let acfg = AttackerConfig::new(
        caps.train.manifest.d_model,
        caps.aux_embedding.manifest.d_model,
        corpus.vocab.len(),
        cfg.victim.max_seq_len,
        &cfg.attack.decoder,
        purifier.clone(),
        cfg.seed,
    );
    let mut attacker = AttackerModel::new(acfg, caps.train.model_id(), tap, corpus.vocab.clone())?;
    let aux = AttackData::from_captures(&caps.aux, &[SplitLabel::Aux], &corpus.vocab)?;
    let train = AttackData::from_captures(&caps.train, &[SplitLabel::Train], &corpus.vocab)?;
    info!("training attacker at {tap} ({}) on {} captures", purifier.variant.as_str(), train.len());
    let log = run_recipe(
        &mut attacker,
        &AttackInputs {
            aux: &aux,
            aux_embedding: &caps.aux_embedding,
            train: &train,
        },
        recipe,
    )?;
    Ok((attacker, log))
}

/// Invert every test frame and score against the corpus text.
pub fn evaluate_attacker(
    cfg: &RunConfig,
    attacker: &AttackerModel,
    test: &CaptureSet,
    corpus: &Corpus,
    victim: &VictimModel,
) -> Result<(EvalReport, Vec<Inversion>)> {
    let frames: Vec<RepresentationFrame> = test
        .traces
        .iter()
        .map(|t| RepresentationFrame::from_trace(t, test.model_id()))
        .collect();
    let guesses = attacker.invert_batch(&frames, cfg.attack.decode)?;
    let inversions = test
        .manifest
        .entries
        .iter()
        .zip(guesses)
        .map(|(e, guess)| {
            let truth = corpus
                .record(&e.record_id)
                .ok_or_else(|| Error::invalid(format!("no ground truth for {}", e.record_id)))?;
            Ok(Inversion {
                record_id: e.record_id.clone(),
                truth: truth.text.clone(),
                guess,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let emb = embedder(cfg, victim, corpus)?;
    let report = evaluate_run(&inversions, emb.as_ref(), cfg.attack.keep_pairs)?;
    Ok((report, inversions))
}

/// Capture, train and evaluate one attacker entirely in memory.
pub fn attack_at(
    cfg: &RunConfig,
    victim: &VictimModel,
    corpus: &Corpus,
    tap: TapPoint,
    purifier: &PurifierConfig,
) -> Result<AttackRun> {
    attack_with_recipe(cfg, victim, corpus, tap, purifier, &cfg.attack.recipe)
}

fn attack_with_recipe(
    cfg: &RunConfig,
    victim: &VictimModel,
    corpus: &Corpus,
    tap: TapPoint,
    purifier: &PurifierConfig,
    recipe: &crate::revertlm::TrainRecipe,
) -> Result<AttackRun> {
    let caps = AttackCaptures::capture(victim, corpus, tap)?;
    let (attacker, log) = train_attacker_on(cfg, corpus, &caps, purifier, recipe)?;
    let (mut report, _) = evaluate_attacker(cfg, &attacker, &caps.test, corpus, victim)?;
    report.ppl = Some(log.val_ce_step3.exp());
    report.per_pair.clear();
    info!("{tap} {}: ROUGE-L {:.4}", purifier.variant.as_str(), report.rouge_l);
    Ok(AttackRun {
        tap,
        variant: purifier.variant,
        log,
        report,
    })
}

fn score_json(r: &EvalReport) -> Value {
    json!({
        "rouge_l": r.rouge_l,
        "bleu": r.bleu,
        "cos_sim": r.cos_sim,
        "cos_counts": r.cos_counts,
        "n_pairs": r.n_pairs,
        "ppl": r.ppl,
    })
}

fn rows_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("block,position,variant,rouge_l,bleu,cos_sim,cos_counts,val_ce,step3_reverted\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.12},{:.12},{:.12},{:.12},{:.12},{}",
            r.block.map_or("embedding".to_string(), |b| b.to_string()),
            r.position.as_str(),
            r.variant.as_str(),
            r.rouge_l,
            r.bleu,
            r.cos_sim,
            r.cos_counts,
            r.val_ce,
            r.step3_reverted
        );
    }
    s
}

fn synth_data(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let corpus = cfg.build_corpus()?;
    let dir = cfg.corpus_dir();
    for f in corpus.save(&dir)? {
        art.register(&dir.join(f));
    }
    let sizes: serde_json::Map<String, Value> = corpus
        .split_sizes()
        .into_iter()
        .map(|(k, v)| (k.as_str().to_string(), json!(v)))
        .collect();
    Ok(json!({
        "records": corpus.len(),
        "vocab_size": corpus.vocab.len(),
        "used_vocab": corpus.used_vocab_size(),
        "max_tokens": corpus.max_token_len(),
        "mean_words": corpus.mean_words(),
        "splits": sizes,
    }))
}

fn train_victim_cmd(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let corpus = load_corpus(cfg)?;
    let mc = cfg.model_config(corpus.vocab.len());
    let train = corpus.slice(&[SplitLabel::Train]);
    let val = corpus.slice(&[SplitLabel::Val]);
    let (victim, log) = train_victim(mc, &train, &val, &cfg.victim.training)?;
    let path = cfg.victim_path();
    victim.save(&path)?;
    art.register(&path);
    art.write("victim/train_log.json", serde_json::to_string_pretty(&log)?)?;
    Ok(json!({
        "model_id": victim.model_id().to_string(),
        "num_params": victim.num_params(),
        "val_ce_initial": log.val_ce_initial,
        "val_ce_final": log.val_ce_final,
        "ln_vocab": (corpus.vocab.len() as f64).ln(),
    }))
}

fn capture_cmd(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let corpus = load_corpus(cfg)?;
    let victim = load_victim(cfg)?;
    let mut out = serde_json::Map::new();
    let mut embedding_saved = false;
    for &tap in &cfg.taps {
        let caps = AttackCaptures::capture(&victim, &corpus, tap)?;
        let [tr, aux, te, emb] = AttackCaptures::dirs(cfg, tap);
        art.save_captures(&caps.train, &tr)?;
        art.save_captures(&caps.aux, &aux)?;
        art.save_captures(&caps.test, &te)?;
        if !embedding_saved {
            art.save_captures(&caps.aux_embedding, &emb)?;
            embedding_saved = true;
        }
        out.insert(
            tap.to_string(),
            json!({
                "train": caps.train.len(),
                "aux": caps.aux.len(),
                "test": caps.test.len(),
                "frame_bytes": caps.train.frame_bytes() + caps.aux.frame_bytes() + caps.test.frame_bytes(),
            }),
        );
    }
    Ok(Value::Object(out))
}

fn attack_train_cmd(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let corpus = load_corpus(cfg)?;
    let tap = cfg.taps[0];
    let caps = AttackCaptures::load(cfg, tap)?;
    let (attacker, log) = train_attacker_on(cfg, &corpus, &caps, &cfg.attack.purifier, &cfg.attack.recipe)?;
    let variant = cfg.attack.purifier.variant;
    let path = cfg.attacker_path(tap, variant);
    attacker.save(&path)?;
    art.register(&path);
    let dir = cfg.attack_dir(tap, variant);
    art.write(dir.join("train_log.json"), serde_json::to_string_pretty(&log)?)?;
    let mut batches = String::from("step,stage,ce,nll_sum,tokens,ppl\n");
    for b in &log.batches {
        let _ = writeln!(batches, "{},{},{:.12},{:.12},{},{:.12}", b.step, b.stage, b.ce, b.nll_sum, b.tokens, b.ppl);
    }
    art.write(dir.join("batches.csv"), batches)?;
    let mut ppl = String::from("step,val_ce,val_ppl\n");
    for p in &log.ppl {
        let _ = writeln!(ppl, "{},{:.12},{:.12}", p.step, p.val_ce, p.val_ppl);
    }
    art.write(dir.join("val_ppl.csv"), ppl)?;
    Ok(json!({
        "tap": tap.to_string(),
        "purifier": variant.as_str(),
        "purifier_holdout_mse": log.purifier.holdout_mse,
        "purifier_baseline_mse": log.purifier.baseline_mse,
        "val_ce_init": log.val_ce_init,
        "val_ce_step2": log.val_ce_step2,
        "val_ce_step3": log.val_ce_step3,
        "step3_reverted": log.step3_reverted,
    }))
}

fn attack_eval_cmd(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let corpus = load_corpus(cfg)?;
    let victim = load_victim(cfg)?;
    let variant = cfg.attack.purifier.variant;
    let attacker = AttackerModel::load(&cfg.attacker_path(cfg.taps[0], variant))?;
    let tap = attacker.tap();
    let test = CaptureSet::load(&AttackCaptures::dirs(cfg, tap)[2])?;
    let (mut report, inversions) = evaluate_attacker(cfg, &attacker, &test, &corpus, &victim)?;
    let dir = cfg.attack_dir(tap, attacker.config().purifier.variant);
    let log_path = dir.join("train_log.json");
    if log_path.exists() {
        let log: AttackTrainLog = serde_json::from_str(&fs::read_to_string(&log_path)?)?;
        report.ppl = Some(log.val_ce_step3.exp());
    }
    art.write(dir.join("inversions.tsv"), inversion_tsv(&inversions))?;
    art.write(dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    art.write(dir.join("eval.csv"), report_csv(&report))?;
    let mut v = score_json(&report);
    v["tap"] = json!(tap.to_string());
    Ok(v)
}

fn mi_scan_cmd(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let corpus = load_corpus(cfg)?;
    let victim = load_victim(cfg)?;
    let records = corpus.slice(&cfg.mi.splits);
    let taps = TapPoint::all(victim.config());
    let est = information_plane(&victim, &records, &taps, &cfg.mi.binning, &cfg.mi.probe)?;
    art.write("mi/plane.csv", plane_csv(&est))?;
    art.write("mi/estimates.json", serde_json::to_string_pretty(&est)?)?;
    let points: Vec<Value> = est
        .iter()
        .map(|e| json!({ "tap": e.tap.to_string(), "i_xh": e.i_xh, "i_hy": e.i_hy }))
        .collect();
    Ok(json!({
        "n_samples": records.len(),
        "block_out_pearson": block_out_correlation(&est),
        "xh_non_monotone": xh_non_monotone(&est),
        "points": points,
    }))
}

/// One attacker per `{attention_out, ffn_out, block_out}` at each
/// configured block.
pub fn sublayer_sweep(cfg: &RunConfig, victim: &VictimModel, corpus: &Corpus) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &b in &cfg.sweeps.sublayer_blocks {
        for pos in [TapPosition::AttentionOut, TapPosition::FfnOut, TapPosition::BlockOut] {
            let run = attack_at(cfg, victim, corpus, TapPoint::new(b, pos), &cfg.attack.purifier)?;
            rows.push(SweepRow::of(&run));
        }
    }
    Ok(rows)
}

/// `block,attention,ffn,whole` ROUGE-L table.
pub fn sublayer_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("block,attention,ffn,whole\n");
    let mut blocks: Vec<usize> = rows.iter().filter_map(|r| r.block).collect();
    blocks.dedup();
    for b in blocks {
        let get = |p| {
            rows.iter()
                .find(|r| r.block == Some(b) && r.position == p)
                .map_or(f64::NAN, |r| r.rouge_l)
        };
        let _ = writeln!(
            s,
            "{b},{:.6},{:.6},{:.6}",
            get(TapPosition::AttentionOut),
            get(TapPosition::FfnOut),
            get(TapPosition::BlockOut)
        );
    }
    s
}

/// One attacker per block_out tap, optionally preceded by the embedding tap.
pub fn depth_sweep(cfg: &RunConfig, victim: &VictimModel, corpus: &Corpus) -> Result<Vec<SweepRow>> {
    let mut taps = Vec::new();
    if cfg.sweeps.depth_include_embedding {
        taps.push(TapPoint::embedding());
    }
    taps.extend((0..victim.config().n_blocks).map(TapPoint::block_out));
    taps.iter()
        .map(|&t| attack_at(cfg, victim, corpus, t, &cfg.attack.purifier).map(|r| SweepRow::of(&r)))
        .collect()
}

/// Every purifier variant at the ablation tap, on identical captures and
/// seeds. The autoencoder gets twice the step-1 epochs; `ae_flagged` is set
/// when it still ends above the linear projection's held-out MSE.
pub fn purifier_ablation(
    cfg: &RunConfig,
    victim: &VictimModel,
    corpus: &Corpus,
) -> Result<(Vec<AttackRun>, bool)> {
    let tap = cfg.sweeps.ablation_tap;
    let caps = AttackCaptures::capture(victim, corpus, tap)?;
    let mut runs = Vec::new();
    for variant in PurifierVariant::ALL {
        let purifier = PurifierConfig {
            variant,
            ..cfg.attack.purifier.clone()
        };
        if variant == PurifierVariant::None && caps.train.manifest.d_model != caps.aux_embedding.manifest.d_model {
            return Err(Error::config("purifier none needs the tap width to equal the embedding width"));
        }
        let mut recipe = cfg.attack.recipe.clone();
        if variant == PurifierVariant::Autoencoder {
            recipe.step1.epochs *= 2;
        }
        let (attacker, log) = train_attacker_on(cfg, corpus, &caps, &purifier, &recipe)?;
        let (mut report, _) = evaluate_attacker(cfg, &attacker, &caps.test, corpus, victim)?;
        report.ppl = Some(log.val_ce_step3.exp());
        report.per_pair.clear();
        info!("ablation {}: ROUGE-L {:.4}", variant.as_str(), report.rouge_l);
        runs.push(AttackRun {
            tap,
            variant,
            log,
            report,
        });
    }
    let mse = |v| runs.iter().find(|r| r.variant == v).map(|r| r.log.purifier.holdout_mse);
    let flagged = match (mse(PurifierVariant::Autoencoder), mse(PurifierVariant::LinearProjection)) {
        (Some(ae), Some(lin)) => ae > lin,
        _ => false,
    };
    Ok((runs, flagged))
}

fn sweep_json(rows: &[SweepRow]) -> Value {
    json!(rows
        .iter()
        .map(|r| json!({
            "block": r.block,
            "position": r.position.as_str(),
            "variant": r.variant.as_str(),
            "rouge_l": r.rouge_l,
            "bleu": r.bleu,
            "cos_sim": r.cos_sim,
            "cos_counts": r.cos_counts,
        }))
        .collect::<Vec<_>>())
}

fn sublayer_cmd(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let corpus = load_corpus(cfg)?;
    let victim = load_victim(cfg)?;
    let rows = sublayer_sweep(cfg, &victim, &corpus)?;
    art.write("sweeps/sublayer.csv", rows_csv(&rows))?;
    art.write("sweeps/sublayer_table.csv", sublayer_table(&rows))?;
    art.write("sweeps/sublayer.json", serde_json::to_string_pretty(&rows)?)?;
    Ok(json!({ "rows": sweep_json(&rows) }))
}

fn depth_cmd(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let corpus = load_corpus(cfg)?;
    let victim = load_victim(cfg)?;
    let rows = depth_sweep(cfg, &victim, &corpus)?;
    art.write("sweeps/depth.csv", rows_csv(&rows))?;
    art.write("sweeps/depth.json", serde_json::to_string_pretty(&rows)?)?;
    // Recorded only: does the embedding tap leak at least as much as the
    // deepest interior block?
    let n = victim.config().n_blocks;
    let emb = rows.iter().find(|r| r.block.is_none()).map(|r| r.rouge_l);
    let interior = (n >= 3).then(|| rows.iter().find(|r| r.block == Some(n - 2)).map(|r| r.rouge_l)).flatten();
    Ok(json!({
        "rows": sweep_json(&rows),
        "embedding_ge_deepest_interior": emb.zip(interior).map(|(e, i)| e >= i),
    }))
}

fn ablation_cmd(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let corpus = load_corpus(cfg)?;
    let victim = load_victim(cfg)?;
    let (runs, flagged) = purifier_ablation(cfg, &victim, &corpus)?;
    let rows: Vec<SweepRow> = runs.iter().map(SweepRow::of).collect();
    let mut table = String::from("variant,rouge_l,bleu,cos_sim\n");
    for r in &rows {
        let _ = writeln!(table, "{},{:.6},{:.6},{:.6}", r.variant.as_str(), r.rouge_l, r.bleu, r.cos_sim);
    }
    art.write("sweeps/ablation.csv", rows_csv(&rows))?;
    art.write("sweeps/ablation_table.csv", table)?;
    art.write("sweeps/ablation.json", serde_json::to_string_pretty(&runs)?)?;
    Ok(json!({ "rows": sweep_json(&rows), "autoencoder_flagged": flagged }))
}

fn report_cmd(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let mut md = String::from("# revlab run report\n\n");
    let mut sections = Vec::new();
    for cmd in Subcommand::ALL {
        if cmd == Subcommand::Report {
            continue;
        }
        let path = RunManifest::path(&cfg.out_dir, cmd.as_str());
        if !path.exists() {
            continue;
        }
        let m = RunManifest::load(&path)?;
        let _ = writeln!(md, "## {}\n", cmd.as_str());
        let _ = writeln!(md, "- config: `{}` ({})", m.config_file, &m.config_hash[..12]);
        let _ = writeln!(md, "- finished: {}", m.finished);
        let _ = writeln!(md, "\n```json\n{}\n```\n", serde_json::to_string_pretty(&m.aggregates)?);
        sections.push(cmd.as_str());
    }
    for table in ["sweeps/sublayer_table.csv", "sweeps/depth.csv", "sweeps/ablation_table.csv", "mi/plane.csv"] {
        let p = cfg.out_dir.join(table);
        if p.exists() {
            let _ = writeln!(md, "## {table}\n\n```\n{}```\n", fs::read_to_string(&p)?);
        }
    }
    if sections.is_empty() {
        return Err(Error::MissingArtifact(cfg.out_dir.join("manifests")));
    }
    art.write("report.md", md)?;
    Ok(json!({ "sections": sections }))
}

/// Run one subcommand and write its manifest.
pub fn execute(cmd: Subcommand, cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let started = chrono::Utc::now().to_rfc3339();
    fs::create_dir_all(&cfg.out_dir)?;
    let mut art = Artifacts {
        root: cfg.out_dir.clone(),
        files: Vec::new(),
    };
    let aggregates = match cmd {
        Subcommand::SynthData => synth_data(cfg, &mut art),
        Subcommand::TrainVictim => train_victim_cmd(cfg, &mut art),
        Subcommand::Capture => capture_cmd(cfg, &mut art),
        Subcommand::AttackTrain => attack_train_cmd(cfg, &mut art),
        Subcommand::AttackEval => attack_eval_cmd(cfg, &mut art),
        Subcommand::MiScan => mi_scan_cmd(cfg, &mut art),
        Subcommand::SublayerSweep => sublayer_cmd(cfg, &mut art),
        Subcommand::DepthSweep => depth_cmd(cfg, &mut art),
        Subcommand::PurifierAblation => ablation_cmd(cfg, &mut art),
        Subcommand::Report => report_cmd(cfg, &mut art),
    }?;
    let config_hash = cfg.hash()?;
    let config_file = format!("manifests/{}.config.toml", cmd.as_str());
    art.write(&config_file, cfg.to_toml()?)?;
    let manifest_path = RunManifest::path(&cfg.out_dir, cmd.as_str());
    art.register(&manifest_path);
    let manifest = RunManifest {
        subcommand: cmd.as_str().to_string(),
        provenance: provenance(&config_hash),
        config_hash,
        config_file,
        seed: cfg.seed,
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        artifacts: art.files,
        aggregates,
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Re-execute the subcommand recorded in a manifest from its saved config.
/// Outputs land in the same run directory.
pub fn rerun(manifest_path: &Path) -> Result<RunManifest> {
    let m = RunManifest::load(manifest_path)?;
    let run_dir = manifest_path
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| Error::invalid("manifest is not inside a run directory"))?;
    let cfg = RunConfig::load(&m.config_path(run_dir))?;
    if cfg.hash()? != m.config_hash {
        return Err(Error::config("saved config does not match the manifest hash"));
    }
    execute(m.subcommand.parse()?, &cfg)
}
