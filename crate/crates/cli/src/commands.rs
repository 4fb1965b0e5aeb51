//! One function per subcommand. Each returns a JSON summary that `main`
//! prints, and writes its artifacts into the output directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use lmaug_core::align::{accumulate_confusions, finalize_confusion};
use lmaug_core::corpus::{format_sessions, parse_sessions, read_lines};
use lmaug_core::eval::{self, ppl, sppl, tppl, write_ppl_csv, write_sppl_csv, StateReset};
use lmaug_core::neural::{init_lstm, load_checkpoint, save_checkpoint, train_stage, LstmLm, TrainLog};
use lmaug_core::noise::{clean_pair, EditStats};
use lmaug_core::rescore::{
    read_nbest, read_refs, rescore_all, selections_wer, sweep_lambda, write_lambda_csv, write_nbest, write_refs,
    write_selections_jsonl,
};
use lmaug_core::synth::{generate, BenchmarkConfig};
use lmaug_core::{wer, ChannelConfig, Corpus, Error, NgramLm, Vocabulary, WordId};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Paths, Scheme, Seeds};
use crate::failure::Failure;

pub type CmdResult = Result<Value, Failure>;

/// Overrides shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig, Failure> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| Failure::Usage("this command needs --config".into()))?;
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.paths.out_dir = Some(o.clone());
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>) -> Result<PathBuf, Failure> {
        let dir = self
            .out
            .clone()
            .or_else(|| cfg.and_then(|c| c.paths.out_dir.clone()))
            .ok_or_else(|| Failure::Usage("no output directory; pass --out".into()))?;
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Data(format!("cannot create {}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Data(format!("cannot open {}: {e}", path.display())))
}

fn write_json(path: &Path, v: &Value) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v).map_err(|e| Failure::Data(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn lines(path: &Path) -> Result<Vec<String>, Failure> {
    read_lines(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_corpus(vocab: &Vocabulary, text: &Path, sessions: Option<&Path>) -> Result<Corpus, Failure> {
    let c = Corpus::from_lines(vocab, &lines(text)?);
    Ok(match sessions {
        Some(p) => c.with_sessions(parse_sessions(&fs::read_to_string(p)?)?)?,
        None => c,
    })
}

fn load_model(path: &Path) -> Result<(LstmLm, Vocabulary), Failure> {
    Ok(load_checkpoint(open(path)?)?)
}

fn save_model(path: &Path, lm: &LstmLm, vocab: &Vocabulary) -> Result<(), Failure> {
    let mut w = create(path)?;
    save_checkpoint(&mut w, lm, vocab)?;
    w.flush()?;
    Ok(())
}

/// Training words in first-occurrence order, then the extra words.
fn experiment_vocab(cfg: &ExperimentConfig) -> Result<Vocabulary, Failure> {
    let train = lines(&cfg.paths.train)?;
    let extra: Vec<String> = match &cfg.vocab.extra_words {
        Some(p) => fs::read_to_string(p)?.split_whitespace().map(str::to_string).collect(),
        None => Vec::new(),
    };
    Ok(Vocabulary::build(&train, &extra)?)
}

fn write_log(path: &Path, log: &TrainLog) -> Result<(), Failure> {
    let mut w = create(path)?;
    log.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn stage_summary(log: &TrainLog) -> Value {
    json!({
        "initial_dev_ppl": log.initial_dev_ppl,
        "epochs": log.epochs.len(),
        "best_epoch": log.best_epoch,
        "best_dev_ppl": log.best_dev_ppl,
    })
}

/// Pretraining with the scheme's augmentation, then clean finetuning.
/// Writes `pretrain.ckpt.json`, `model.ckpt.json` and `train_log.csv`.
pub fn train(common: &Common) -> CmdResult {
    let cfg = common.experiment()?;
    let out = common.out_dir(Some(&cfg))?;
    let seeds = Seeds::from_base(cfg.seed);
    let vocab = experiment_vocab(&cfg)?;
    let p = &cfg.paths;
    let train = load_corpus(&vocab, &p.train, p.train_sessions.as_deref())?;
    let dev = load_corpus(&vocab, &p.dev, p.dev_sessions.as_deref())?;
    let aug = cfg.augmentation(&vocab)?;
    let lm = init_lstm(cfg.model.lstm(vocab.len()), seeds.init)?;
    let n_params = lm.n_params();
    let log_path = out.join("train_log.csv");

    let preserve = |e: Error, so_far: Option<&TrainLog>| -> Failure {
        if let Error::Diverged { log, .. } = &e {
            let mut all = so_far.cloned().unwrap_or_default();
            all.epochs.extend(log.epochs.iter().cloned());
            if let Err(w) = write_log(&log_path, &all) {
                log::error!("could not save the training log: {w}");
            }
        }
        e.into()
    };

    log::info!("pretraining {} ({} parameters)", cfg.scheme, n_params);
    let (lm, pre_log) =
        train_stage(lm, &train, &dev, &cfg.pretrain, aug.as_ref(), seeds.pretrain).map_err(|e| preserve(e, None))?;
    save_model(&out.join("pretrain.ckpt.json"), &lm, &vocab)?;
    log::info!("finetuning");
    let (lm, fine_log) = train_stage(lm, &train, &dev, &cfg.finetune, None, seeds.finetune)
        .map_err(|e| preserve(e, Some(&pre_log)))?;
    save_model(&out.join("model.ckpt.json"), &lm, &vocab)?;

    let mut all = pre_log.clone();
    all.extend(&fine_log);
    write_log(&log_path, &all)?;
    let summary = json!({
        "scheme": cfg.scheme.to_string(),
        "vocab_size": vocab.len(),
        "parameters": n_params,
        "pretrain": stage_summary(&pre_log),
        "finetune": stage_summary(&fine_log),
    });
    write_json(&out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

/// Words of a reference file and of the hypotheses of an n-best file,
/// for building a vocabulary when none is given.
fn observed_words(nbest: &Path, refs: &Path) -> Result<Vec<String>, Failure> {
    let mut words = Vec::new();
    for line in lines(refs)? {
        words.extend(line.split_whitespace().skip(1).map(str::to_string));
    }
    for (i, line) in open(nbest)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value =
            serde_json::from_str(&line).map_err(|e| Failure::Data(format!("n-best:{}: {e}", i + 1)))?;
        for h in v["hyps"].as_array().into_iter().flatten() {
            if let Some(w) = h["words"].as_str() {
                words.extend(w.split_whitespace().map(str::to_string));
            }
        }
    }
    Ok(words)
}

/// Confusion statistics of every hypothesis against its reference.
/// Writes `confusion.tsv` and `stats.json`.
pub fn stats(common: &Common, nbest: &Path, refs: &Path, vocab: Option<&Path>) -> CmdResult {
    let out = common.out_dir(None)?;
    let words = match vocab {
        Some(v) => fs::read_to_string(v)?.split_whitespace().map(str::to_string).collect(),
        None => observed_words(nbest, refs)?,
    };
    let vocab = Vocabulary::build(&words, &[])?;
    let lists = read_nbest(open(nbest)?, &vocab)?;
    let refs = read_refs(open(refs)?, &vocab)?;
    let counts = accumulate_confusions(&refs, &lists)?;
    let summary = json!({
        "utterances": lists.len(),
        "hypotheses": lists.iter().map(|l| l.entries.len()).sum::<usize>(),
        "ref_tokens": counts.n_ref_tokens(),
        "sub_rate": counts.substitution_rate(),
        "del_rate": counts.deletion_rate(),
        "ins_rate": counts.insertion_rate(),
    });
    let table = finalize_confusion(counts)?;
    fs::write(out.join("confusion.tsv"), table.to_tsv(&vocab)?)?;
    write_json(&out.join("stats.json"), &summary)?;
    Ok(summary)
}

fn required<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, Failure> {
    p.as_deref()
        .ok_or_else(|| Failure::Usage(format!("config paths.{name} is required for this command")))
}

/// λ sweep on the development lists, then the held-out lists at the
/// development optimum. Writes `lambda.csv`, selections and `rescore.json`.
pub fn rescore(common: &Common, checkpoint: Option<&Path>) -> CmdResult {
    let cfg = common.experiment()?;
    let out = common.out_dir(Some(&cfg))?;
    let p: &Paths = &cfg.paths;
    let ckpt = checkpoint.map_or_else(|| out.join("model.ckpt.json"), Path::to_path_buf);
    let (lm, vocab) = load_model(&ckpt)?;
    let ngram = NgramLm::from_arpa(open(required(&p.firstpass, "firstpass")?)?, &vocab)?;
    let dev_lists = read_nbest(open(required(&p.dev_nbest, "dev_nbest")?)?, &vocab)?;
    let dev_refs = read_refs(open(required(&p.dev_refs, "dev_refs")?)?, &vocab)?;
    let r = &cfg.rescore;

    let sweep = sweep_lambda(&dev_lists, &dev_refs, &lm, &ngram, &r.grid, r.lm_scale, r.carry_state)?;
    let mut w = create(&out.join("lambda.csv"))?;
    write_lambda_csv(&mut w, &sweep.curve)?;
    w.flush()?;
    let mut w = create(&out.join("dev.selections.jsonl"))?;
    write_selections_jsonl(&mut w, &sweep.best_selections, &vocab)?;
    w.flush()?;
    let dev_first = sweep.curve.iter().find(|c| c.lambda == 0.0).map(|c| c.wer.wer);

    let mut summary = json!({
        "checkpoint": ckpt,
        "best_lambda": sweep.best_lambda,
        "dev_wer": sweep.best_wer,
        "dev_firstpass_wer": dev_first,
    });
    if let (Some(nb), Some(rf)) = (&p.eval_nbest, &p.eval_refs) {
        let lists = read_nbest(open(nb)?, &vocab)?;
        let refs = read_refs(open(rf)?, &vocab)?;
        let mut sel = rescore_all(&lists, &lm, &ngram, &[0.0, sweep.best_lambda], r.lm_scale, r.carry_state)?;
        let best = sel.pop().expect("two grid points");
        let first = sel.pop().expect("two grid points");
        let mut w = create(&out.join("eval.selections.jsonl"))?;
        write_selections_jsonl(&mut w, &best, &vocab)?;
        w.flush()?;
        summary["eval_wer"] = json!(selections_wer(&best, &refs)?);
        summary["eval_firstpass_wer"] = json!(selections_wer(&first, &refs)?.wer);
    }
    write_json(&out.join("rescore.json"), &summary)?;
    Ok(summary)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub corpus: &'a Path,
    pub sessions: Option<&'a Path>,
    /// JSON file holding a channel configuration.
    pub channel: Option<&'a Path>,
    pub k: usize,
}

/// Clean PPL and, given a channel, sPPL over `k` realizations and tPPL.
/// Writes `ppl.csv`, `sppl.csv` and `eval.json`.
pub fn eval_ppl(common: &Common, a: &EvalArgs<'_>) -> CmdResult {
    let out = common.out_dir(None)?;
    let seed = common.seed.unwrap_or(0);
    let (lm, vocab) = load_model(a.checkpoint)?;
    let corpus = load_corpus(&vocab, a.corpus, a.sessions)?;
    let reset = if a.sessions.is_some() {
        StateReset::PerSession
    } else {
        StateReset::PerSentence
    };
    let clean = ppl(&lm, &corpus, reset);
    let mut rows = vec![("ppl".to_string(), clean.clone())];
    let mut summary = json!({ "ppl": clean.ppl, "tokens": clean.tokens });
    if let Some(path) = a.channel {
        if a.k == 0 {
            return Err(Failure::Usage("-k must be positive".into()));
        }
        let text = fs::read_to_string(path)?;
        let mut cc: ChannelConfig =
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("bad channel config: {e}")))?;
        if let ChannelConfig::Unigram { table, .. } = &mut cc {
            if table.is_relative() {
                *table = path.parent().unwrap_or(Path::new(".")).join(&*table);
            }
        }
        let ch = cc.build(&vocab)?;
        let s = sppl(&lm, &corpus, &ch, a.k, reset, seed)?;
        let t = tppl(&lm, &corpus, &ch, reset, seed);
        let mut w = create(&out.join("sppl.csv"))?;
        write_sppl_csv(&mut w, &s)?;
        w.flush()?;
        summary["sppl_mean"] = json!(s.mean);
        summary["sppl_std"] = json!(s.std);
        summary["sppl_relative_std"] = json!(s.relative_std);
        summary["sppl_bimodality"] = json!(s.bimodality_coefficient());
        summary["sppl_histogram"] = json!(s.histogram(10));
        summary["tppl"] = json!(t.ppl);
        rows.push(("tppl".to_string(), t));
    }
    let mut w = create(&out.join("ppl.csv"))?;
    write_ppl_csv(&mut w, &rows)?;
    w.flush()?;
    write_json(&out.join("eval.json"), &summary)?;
    Ok(summary)
}

fn spell(vocab: &Vocabulary, ids: &[WordId]) -> Result<String, Failure> {
    let words: Vec<&str> = ids.iter().map(|&i| vocab.word(i)).collect::<Result<_, _>>()?;
    Ok(words.join(" "))
}

/// The training pairs of one pretraining epoch, exactly as the trainer
/// draws them. Writes `corrupted.tsv`.
pub fn corrupt(common: &Common, epoch: usize, limit: Option<usize>) -> CmdResult {
    if epoch == 0 {
        return Err(Failure::Usage("epochs count from 1".into()));
    }
    let cfg = common.experiment()?;
    let out = common.out_dir(Some(&cfg))?;
    let seeds = Seeds::from_base(cfg.seed);
    let vocab = experiment_vocab(&cfg)?;
    let train = load_corpus(&vocab, &cfg.paths.train, None)?;
    let aug = cfg.augmentation(&vocab)?;
    let n = limit.unwrap_or(usize::MAX).min(train.len());
    let mut stats = EditStats::default();
    let mut w = create(&out.join("corrupted.tsv"))?;
    writeln!(w, "index\tinputs\ttargets")?;
    for (i, s) in train.sentences().iter().enumerate().take(n) {
        let pair = match &aug {
            Some(a) => a.corrupt(s, seeds.pretrain, epoch, i),
            None => clean_pair(s),
        };
        stats.add(&pair);
        writeln!(w, "{i}\t{}\t{}", spell(&vocab, &pair.inputs)?, spell(&vocab, &pair.targets)?)?;
    }
    w.flush()?;
    if matches!(cfg.scheme, Scheme::T0Ls) {
        log::warn!("scheme t0LS changes the loss, not the data; pairs are clean");
    }
    Ok(json!({
        "scheme": cfg.scheme.to_string(),
        "epoch": epoch,
        "sentences": n,
        "sub_rate": stats.sub_rate(),
        "del_rate": stats.del_rate(),
        "ins_rate": stats.ins_rate(),
    }))
}

/// Corpus WER of a hypothesis file against a reference file, both as
/// `<utt_id> words...` lines. Every reference needs a hypothesis and
/// vice versa.
pub fn wer_cmd(common: &Common, refs: &Path, hyps: &Path) -> CmdResult {
    let mut words = Vec::new();
    for p in [refs, hyps] {
        for line in lines(p)? {
            words.extend(line.split_whitespace().skip(1).map(str::to_string));
        }
    }
    let vocab = Vocabulary::build(&words, &[])?;
    let r = read_refs(open(refs)?, &vocab)?;
    let h = read_refs(open(hyps)?, &vocab)?;
    if let Some(extra) = h.keys().find(|k| !r.contains_key(*k)) {
        return Err(Failure::Data(format!("hypothesis `{extra}` has no reference")));
    }
    let mut ids: Vec<&String> = r.keys().collect();
    ids.sort();
    let mut rs = Vec::with_capacity(ids.len());
    let mut hs = Vec::with_capacity(ids.len());
    for id in ids {
        rs.push(r[id].as_slice());
        hs.push(h.get(id).ok_or_else(|| Error::MissingReference(format!("{id} (hypothesis)")))?.as_slice());
    }
    let report = json!(wer(&rs, &hs)?);
    if common.out.is_some() {
        write_json(&common.out_dir(None)?.join("wer.json"), &report)?;
    }
    Ok(report)
}

/// Writes a synthetic benchmark plus a ready-to-use baseline experiment
/// configuration into the output directory.
pub fn synth(common: &Common) -> CmdResult {
    let mut bc: BenchmarkConfig = match &common.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Failure::Usage(format!("bad benchmark config: {e}")))?,
        None => BenchmarkConfig::default(),
    };
    if let Some(s) = common.seed {
        bc.seed = s;
    }
    let out = common.out_dir(None)?;
    let b = generate(&bc)?;
    let text = |lines: &[String]| lines.iter().map(|l| format!("{l}\n")).collect::<String>();
    fs::write(out.join("vocab.txt"), text(&b.vocab.regular_ids().map(|i| b.vocab.word(i).map(str::to_string)).collect::<Result<Vec<_>, _>>()?))?;
    for (name, lines, corpus) in [("train", &b.train_text, &b.train), ("dev", &b.dev_text, &b.dev), ("eval", &b.eval_text, &b.eval)] {
        fs::write(out.join(format!("{name}.txt")), text(lines))?;
        fs::write(out.join(format!("{name}.sessions")), format_sessions(corpus.sessions().unwrap_or_default()))?;
    }
    fs::write(out.join("firstpass.arpa"), b.firstpass.to_arpa(&b.vocab)?)?;
    for (name, lists, refs) in [
        ("stats", &b.stats_nbest, &b.stats_refs),
        ("dev", &b.dev_nbest, &b.dev_refs),
        ("eval", &b.eval_nbest, &b.eval_refs),
    ] {
        let mut w = create(&out.join(format!("{name}.nbest.jsonl")))?;
        write_nbest(&mut w, lists, &b.vocab)?;
        w.flush()?;
        let mut w = create(&out.join(format!("{name}.refs")))?;
        write_refs(&mut w, refs, &b.vocab)?;
        w.flush()?;
    }
    let mut exp = ExperimentConfig::from_json(&format!(
        r#"{{"paths":{{"train":"train.txt","train_sessions":"train.sessions","dev":"dev.txt",
        "dev_sessions":"dev.sessions","firstpass":"firstpass.arpa","dev_nbest":"dev.nbest.jsonl",
        "dev_refs":"dev.refs","eval_nbest":"eval.nbest.jsonl","eval_refs":"eval.refs","out_dir":"run"}},
        "vocab":{{"extra_words":"vocab.txt"}},"scheme":"baseline","seed":{}}}"#,
        bc.seed
    ))?;
    exp.model.embed_dim = 32;
    fs::write(out.join("experiment.json"), exp.to_json())?;
    write_json(&out.join("benchmark.json"), &serde_json::to_value(&bc).map_err(|e| Failure::Data(e.to_string()))?)?;
    Ok(json!({
        "vocab_size": b.vocab.len(),
        "train_sentences": b.train.len(),
        "dev_sentences": b.dev.len(),
        "eval_sentences": b.eval.len(),
        "firstpass_dev_ppl": eval::ppl(&b.firstpass, &b.dev, StateReset::PerSentence).ppl,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_config_is_a_usage_error() {
        let e = train(&Common::default()).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn stats_builds_vocab_from_the_files() {
        let dir = tempfile::tempdir().unwrap();
        let nb = dir.path().join("n.jsonl");
        let rf = dir.path().join("r.refs");
        fs::write(
            &nb,
            r#"{"session":"s","utt":"u1","order":0,"hyps":[{"words":"a b","ac":0,"lm":0},{"words":"a c","ac":0,"lm":0}]}"#,
        )
        .unwrap();
        fs::write(&rf, "u1 a b\n").unwrap();
        let common = Common {
            out: Some(dir.path().join("out")),
            ..Default::default()
        };
        let s = stats(&common, &nb, &rf, None).unwrap();
        assert_eq!(s["ref_tokens"], 4);
        assert_eq!(s["sub_rate"], 0.25);
        let tsv = fs::read_to_string(dir.path().join("out/confusion.tsv")).unwrap();
        assert!(tsv.contains('c'), "{tsv}");
    }

    #[test]
    fn observed_words_reads_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let nb = dir.path().join("n.jsonl");
        let rf = dir.path().join("r.refs");
        fs::write(&nb, "{\"hyps\":[{\"words\":\"x y\"}]}\n\n").unwrap();
        fs::write(&rf, "u1 z\nu2\n").unwrap();
        assert_eq!(observed_words(&nb, &rf).unwrap(), ["z", "x", "y"]);
    }

    #[test]
    fn unknown_utterances_in_wer_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path().join("r");
        let h = dir.path().join("h");
        fs::write(&r, "u1 a b\n").unwrap();
        fs::write(&h, "u2 a b\n").unwrap();
        let e = wer_cmd(&Common::default(), &r, &h).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn wer_of_identical_files_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path().join("r");
        fs::write(&r, "u1 a b\nu2 c\nu3\n").unwrap();
        let v = wer_cmd(&Common::default(), &r, &r).unwrap();
        assert_eq!(v["wer"], 0.0);
        assert_eq!(v["n_ref"], 3);
    }
}
