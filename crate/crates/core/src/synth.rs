//! Synthetic benchmark: a topic-modulated class Markov text source and a
//! simulated recognizer that emits scored n-best lists.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::align::align;
use crate::corpus::{Corpus, Session, Vocabulary, WordId};
use crate::error::{Error, Result};
use crate::ngram::{train_kn, KnOptions, NgramLm};
use crate::rescore::{NBestEntry, NBestList};
use crate::rng::{rng_for, Rng};
use crate::scorer::LmScorer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub n_words: usize,
    /// Word classes; word `i` belongs to class `i % classes`.
    pub classes: usize,
    /// Successor classes per class in each topic.
    pub successors: usize,
    /// Classes that may open a sentence in each topic.
    pub initial_successors: usize,
    /// Probability that a word follows a fixed sparse word-to-word table
    /// instead of the class chain.
    pub word_mix: f64,
    /// Successors per word in that table.
    pub word_successors: usize,
    pub topics: usize,
    /// Expected number of words per sentence.
    pub mean_len: f64,
    pub max_len: usize,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            n_words: 200,
            classes: 20,
            successors: 4,
            initial_successors: 6,
            word_mix: 0.4,
            word_successors: 4,
            topics: 4,
            mean_len: 9.0,
            max_len: 40,
        }
    }
}

type Weighted = Vec<(usize, f64)>;

/// Class chain whose transitions and word emissions both depend on a
/// per-session topic. The next-word distribution factors through the
/// class, and the topic is only recoverable from a long history.
#[derive(Clone, Debug)]
pub struct MarkovSource {
    cfg: SourceConfig,
    words: Vec<String>,
    /// `trans[topic][prev_class]`; `prev_class == classes` stands for `<s>`.
    trans: Vec<Vec<Weighted>>,
    /// `emit[topic][class]` over word indices.
    emit: Vec<Vec<Weighted>>,
    /// `succ[word]`, shared by all topics.
    succ: Vec<Weighted>,
}

fn exp_weights(rng: &mut Rng, items: impl IntoIterator<Item = usize>) -> Weighted {
    items
        .into_iter()
        .map(|j| {
            let w: f64 = Exp1.sample(rng);
            (j, w + 0.05)
        })
        .collect()
}

fn draw(row: &Weighted, rng: &mut Rng) -> usize {
    let total: f64 = row.iter().map(|e| e.1).sum();
    let mut u = rng.random::<f64>() * total;
    for e in row {
        u -= e.1;
        if u <= 0.0 {
            return e.0;
        }
    }
    row.last().expect("non-empty row").0
}

impl MarkovSource {
    pub fn new(cfg: SourceConfig, seed: u64) -> Result<Self> {
        if cfg.classes == 0 || cfg.n_words < cfg.classes {
            return Err(Error::InvalidConfig("need at least one word per class".into()));
        }
        if cfg.successors == 0 || cfg.successors > cfg.classes {
            return Err(Error::InvalidConfig("bad successor count".into()));
        }
        if cfg.initial_successors == 0 || cfg.initial_successors > cfg.classes {
            return Err(Error::InvalidConfig("bad initial successor count".into()));
        }
        if cfg.topics == 0 || !(cfg.mean_len >= 1.0) || cfg.max_len == 0 {
            return Err(Error::InvalidConfig("bad topic or length configuration".into()));
        }
        if !(0.0..=1.0).contains(&cfg.word_mix) || cfg.word_successors == 0 || cfg.word_successors > cfg.n_words {
            return Err(Error::InvalidConfig("bad word table configuration".into()));
        }
        let mut rng = rng_for(seed, &[0x5e_ed, 2]);
        let words = (0..cfg.n_words).map(|i| format!("w{i:03}")).collect();
        let mut trans = Vec::with_capacity(cfg.topics);
        let mut emit = Vec::with_capacity(cfg.topics);
        for _ in 0..cfg.topics {
            trans.push(
                (0..=cfg.classes)
                    .map(|c| {
                        let k = if c == cfg.classes { cfg.initial_successors } else { cfg.successors };
                        let picks = sample(&mut rng, cfg.classes, k).into_vec();
                        exp_weights(&mut rng, picks)
                    })
                    .collect(),
            );
            emit.push(
                (0..cfg.classes)
                    .map(|c| exp_weights(&mut rng, (c..cfg.n_words).step_by(cfg.classes)))
                    .collect(),
            );
        }
        let succ = (0..cfg.n_words)
            .map(|_| {
                let picks = sample(&mut rng, cfg.n_words, cfg.word_successors).into_vec();
                exp_weights(&mut rng, picks)
            })
            .collect();
        Ok(MarkovSource { cfg, words, trans, emit, succ })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn sentence(&self, topic: usize, rng: &mut Rng) -> Vec<&str> {
        let p_end = 1.0 / self.cfg.mean_len;
        let mut out = Vec::new();
        let mut class = self.cfg.classes;
        let mut prev = None;
        loop {
            let w = match prev {
                Some(p) if rng.random::<f64>() < self.cfg.word_mix => draw(&self.succ[p], rng),
                _ => {
                    class = draw(&self.trans[topic][class], rng);
                    draw(&self.emit[topic][class], rng)
                }
            };
            class = w % self.cfg.classes;
            prev = Some(w);
            out.push(self.words[w].as_str());
            if out.len() >= self.cfg.max_len || rng.random::<f64>() < p_end {
                return out;
            }
        }
    }

    /// `n` sentences grouped into sessions of `per_session`, each session
    /// drawn under one random topic.
    pub fn sample_text(&self, n: usize, per_session: usize, rng: &mut Rng) -> (Vec<String>, Vec<Session>) {
        let mut lines = Vec::with_capacity(n);
        let mut sessions = Vec::new();
        let per = per_session.max(1);
        while lines.len() < n {
            let topic = rng.random_range(0..self.cfg.topics);
            let start = lines.len();
            let end = (start + per).min(n);
            for _ in start..end {
                lines.push(self.sentence(topic, rng).join(" "));
            }
            sessions.push(Session {
                id: format!("S{:03}", sessions.len()),
                range: start..end,
            });
        }
        (lines, sessions)
    }
}

/// Simulated recognizer producing scored n-best lists around a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrConfig {
    pub nbest: usize,
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    /// Acoustically confusable alternatives per word.
    pub confusables: usize,
    /// Each hypothesis scales the base rates by a factor drawn from
    /// `U(min_rate_scale, max_rate_scale)`.
    pub min_rate_scale: f64,
    pub max_rate_scale: f64,
    /// Acoustic penalty per edit against the reference.
    pub ac_per_edit: f64,
    /// Standard deviation of Gaussian noise on the acoustic score.
    pub ac_noise: f64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        AsrConfig {
            nbest: 10,
            p_sub: 0.18,
            p_del: 0.09,
            p_ins: 0.04,
            confusables: 3,
            min_rate_scale: 0.2,
            max_rate_scale: 1.6,
            ac_per_edit: 1.0,
            ac_noise: 5.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AsrSimulator {
    cfg: AsrConfig,
    confusable: Vec<Vec<WordId>>,
    regular: Vec<WordId>,
}

impl AsrSimulator {
    pub fn new(cfg: AsrConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        let regular: Vec<WordId> = vocab.regular_ids().collect();
        if regular.len() <= cfg.confusables
            || cfg.confusables == 0
            || cfg.nbest == 0
            || !(0.0..=cfg.max_rate_scale).contains(&cfg.min_rate_scale)
        {
            return Err(Error::InvalidConfig("bad recognizer configuration".into()));
        }
        let mut rng = rng_for(seed, &[0xa5_12, 1]);
        let mut confusable = vec![Vec::new(); vocab.len()];
        for &w in &regular {
            let mut alts = Vec::with_capacity(cfg.confusables);
            while alts.len() < cfg.confusables {
                let x = regular[rng.random_range(0..regular.len())];
                if x != w && !alts.contains(&x) {
                    alts.push(x);
                }
            }
            confusable[w.index()] = alts;
        }
        Ok(AsrSimulator {
            cfg,
            confusable,
            regular,
        })
    }

    fn perturb(&self, reference: &[WordId], scale: f64, rng: &mut Rng) -> Vec<WordId> {
        let (ps, pd, pi) = (self.cfg.p_sub * scale, self.cfg.p_del * scale, self.cfg.p_ins * scale);
        let mut out = Vec::with_capacity(reference.len() + 2);
        for &w in reference {
            if rng.random::<f64>() < pi {
                out.push(self.regular[rng.random_range(0..self.regular.len())]);
            }
            let u: f64 = rng.random();
            if u < ps {
                let alts = &self.confusable[w.index()];
                out.push(if alts.is_empty() { w } else { alts[rng.random_range(0..alts.len())] });
            } else if u >= ps + pd {
                out.push(w);
            }
        }
        if rng.random::<f64>() < pi {
            out.push(self.regular[rng.random_range(0..self.regular.len())]);
        }
        out
    }

    /// Up to `nbest` distinct hypotheses, ranked by acoustic plus
    /// first-pass LM score.
    pub fn nbest(
        &self,
        reference: &[WordId],
        firstpass: &NgramLm,
        session: &str,
        utt: &str,
        order: usize,
        rng: &mut Rng,
    ) -> NBestList {
        let mut entries: Vec<NBestEntry> = Vec::with_capacity(self.cfg.nbest);
        let mut attempts = 0;
        while entries.len() < self.cfg.nbest && attempts < 20 * self.cfg.nbest {
            attempts += 1;
            let scale = rng.random_range(self.cfg.min_rate_scale..=self.cfg.max_rate_scale);
            let words = self.perturb(reference, scale, rng);
            if words.is_empty() || entries.iter().any(|e| e.words == words) {
                continue;
            }
            let edits = align(reference, &words).cost as f64;
            let noise: f64 = StandardNormal.sample(rng);
            entries.push(NBestEntry {
                acoustic_score: -self.cfg.ac_per_edit * edits + self.cfg.ac_noise * noise,
                firstpass_lm_score: sentence_logprob(firstpass, &words),
                words,
            });
        }
        if entries.is_empty() {
            entries.push(NBestEntry {
                firstpass_lm_score: sentence_logprob(firstpass, reference),
                words: reference.to_vec(),
                acoustic_score: 0.0,
            });
        }
        entries.sort_by(|a, b| {
            (b.acoustic_score + b.firstpass_lm_score).total_cmp(&(a.acoustic_score + a.firstpass_lm_score))
        });
        NBestList {
            session_id: session.to_string(),
            utterance_id: utt.to_string(),
            order,
            entries,
        }
    }
}

/// ln p of a word sequence plus `</s>`, starting from `<s>`.
pub fn sentence_logprob<S: LmScorer>(lm: &S, words: &[WordId]) -> f64 {
    let mut st = lm.zero_state();
    let mut input = crate::corpus::BOS;
    let mut lp = 0.0;
    for &w in words.iter().chain(std::iter::once(&crate::corpus::EOS)) {
        lp += lm.step_score(&mut st, input, w);
        input = w;
    }
    lp
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub source: SourceConfig,
    pub asr: AsrConfig,
    pub n_train: usize,
    pub n_dev: usize,
    /// Held-out sentences for the final evaluation.
    pub n_eval: usize,
    /// Training sentences decoded to harvest error statistics.
    pub n_stats: usize,
    pub per_session: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            source: SourceConfig::default(),
            asr: AsrConfig::default(),
            n_train: 5000,
            n_dev: 1000,
            n_eval: 500,
            n_stats: 1000,
            per_session: 20,
            seed: 1,
        }
    }
}

/// Everything an end-to-end experiment needs.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub vocab: Vocabulary,
    pub train_text: Vec<String>,
    pub dev_text: Vec<String>,
    pub train: Corpus,
    pub dev: Corpus,
    /// First-pass 3-gram trained on `train`.
    pub firstpass: NgramLm,
    /// N-best lists for a prefix of the training text.
    pub stats_nbest: Vec<NBestList>,
    pub stats_refs: HashMap<String, Vec<WordId>>,
    pub dev_nbest: Vec<NBestList>,
    pub dev_refs: HashMap<String, Vec<WordId>>,
    pub eval_text: Vec<String>,
    pub eval: Corpus,
    pub eval_nbest: Vec<NBestList>,
    pub eval_refs: HashMap<String, Vec<WordId>>,
}

fn decode_set(
    asr: &AsrSimulator,
    firstpass: &NgramLm,
    corpus: &Corpus,
    limit: usize,
    prefix: &str,
    rng: &mut Rng,
) -> (Vec<NBestList>, HashMap<String, Vec<WordId>>) {
    let mut lists = Vec::new();
    let mut refs = HashMap::new();
    let sessions = corpus.sessions().map(<[Session]>::to_vec).unwrap_or_default();
    for s in sessions {
        for (order, i) in s.range.clone().enumerate() {
            if i >= limit {
                return (lists, refs);
            }
            let words = corpus.sentences()[i].words();
            let utt = format!("{prefix}{i:05}");
            lists.push(asr.nbest(words, firstpass, &format!("{prefix}{}", s.id), &utt, order, rng));
            refs.insert(utt, words.to_vec());
        }
    }
    (lists, refs)
}

pub fn generate(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    let source = MarkovSource::new(cfg.source.clone(), cfg.seed)?;
    let vocab = Vocabulary::from_words(source.words().iter().map(String::as_str));
    let (train_text, train_sessions) = source.sample_text(cfg.n_train, cfg.per_session, &mut rng_for(cfg.seed, &[2]));
    let (dev_text, dev_sessions) = source.sample_text(cfg.n_dev, cfg.per_session, &mut rng_for(cfg.seed, &[3]));
    let train = Corpus::from_lines(&vocab, &train_text).with_sessions(train_sessions)?;
    let dev = Corpus::from_lines(&vocab, &dev_text).with_sessions(dev_sessions)?;
    let (eval_text, eval_sessions) = source.sample_text(cfg.n_eval, cfg.per_session, &mut rng_for(cfg.seed, &[6]));
    let eval = Corpus::from_lines(&vocab, &eval_text).with_sessions(eval_sessions)?;
    let firstpass = train_kn(&train, &vocab, KnOptions::default())?;
    let asr = AsrSimulator::new(cfg.asr.clone(), &vocab, cfg.seed)?;
    let (stats_nbest, stats_refs) = decode_set(&asr, &firstpass, &train, cfg.n_stats, "train-", &mut rng_for(cfg.seed, &[4]));
    let (dev_nbest, dev_refs) = decode_set(&asr, &firstpass, &dev, usize::MAX, "dev-", &mut rng_for(cfg.seed, &[5]));
    let (eval_nbest, eval_refs) = decode_set(&asr, &firstpass, &eval, usize::MAX, "eval-", &mut rng_for(cfg.seed, &[7]));
    Ok(Benchmark {
        vocab,
        train_text,
        dev_text,
        train,
        dev,
        firstpass,
        stats_nbest,
        stats_refs,
        dev_nbest,
        dev_refs,
        eval_text,
        eval,
        eval_nbest,
        eval_refs,
    })
}
