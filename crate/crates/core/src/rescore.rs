//! N-best rescoring with per-token linear interpolation of a neural LM and
//! an n-gram LM, recurrent state carried across the utterances of a session.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::align::{wer, WerReport};
use crate::corpus::{Vocabulary, WordId, BOS, BOS_STR, EOS, EOS_STR, EPS_STR};
use crate::error::{Error, Result};
use crate::eval::csv_err;
use crate::ngram::NgramLm;
use crate::scorer::LmScorer;

#[derive(Clone, Debug, PartialEq)]
pub struct NBestEntry {
    pub words: Vec<WordId>,
    /// Log-domain acoustic score.
    pub acoustic_score: f64,
    /// Log-domain score from the first-pass decoder; kept for diagnostics.
    pub firstpass_lm_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    pub session_id: String,
    pub utterance_id: String,
    /// Position of the utterance within its session.
    pub order: usize,
    pub entries: Vec<NBestEntry>,
}

#[derive(Serialize, Deserialize)]
struct HypRecord {
    words: String,
    ac: f64,
    lm: f64,
}

#[derive(Serialize, Deserialize)]
struct ListRecord {
    session: String,
    utt: String,
    order: usize,
    hyps: Vec<HypRecord>,
}

/// Reads JSON lines of the form
/// `{"session":..,"utt":..,"order":..,"hyps":[{"words":..,"ac":..,"lm":..}]}`.
/// Out-of-vocabulary words map to `<unk>`; boundary and ε spellings are
/// rejected.
pub fn read_nbest(reader: impl BufRead, vocab: &Vocabulary) -> Result<Vec<NBestList>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ListRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse("n-best", i + 1, e.to_string()))?;
        if rec.hyps.is_empty() {
            return Err(Error::EmptyNBest(rec.utt));
        }
        let mut entries = Vec::with_capacity(rec.hyps.len());
        for h in rec.hyps {
            if let Some(w) = h
                .words
                .split_whitespace()
                .find(|w| matches!(*w, BOS_STR | EOS_STR | EPS_STR))
            {
                return Err(Error::parse("n-best", i + 1, format!("reserved token `{w}` in hypothesis")));
            }
            entries.push(NBestEntry {
                words: vocab.encode_words(&h.words),
                acoustic_score: h.ac,
                firstpass_lm_score: h.lm,
            });
        }
        out.push(NBestList {
            session_id: rec.session,
            utterance_id: rec.utt,
            order: rec.order,
            entries,
        });
    }
    Ok(out)
}

pub fn write_nbest<W: Write>(mut w: W, lists: &[NBestList], vocab: &Vocabulary) -> Result<()> {
    for l in lists {
        let hyps = l
            .entries
            .iter()
            .map(|e| {
                Ok(HypRecord {
                    words: vocab.decode_words(&e.words)?,
                    ac: e.acoustic_score,
                    lm: e.firstpass_lm_score,
                })
            })
            .collect::<Result<_>>()?;
        let rec = ListRecord {
            session: l.session_id.clone(),
            utt: l.utterance_id.clone(),
            order: l.order,
            hyps,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads reference transcripts, one `<utt_id> word word ...` per line.
/// An id with no words is an empty reference.
pub fn read_refs(reader: impl BufRead, vocab: &Vocabulary) -> Result<HashMap<String, Vec<WordId>>> {
    let mut out = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, words) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        if out.insert(id.to_string(), vocab.encode_words(words)).is_some() {
            return Err(Error::parse("refs", i + 1, format!("duplicate utterance `{id}`")));
        }
    }
    Ok(out)
}

/// Writes references sorted by utterance id.
pub fn write_refs<W: Write>(mut w: W, refs: &HashMap<String, Vec<WordId>>, vocab: &Vocabulary) -> Result<()> {
    let mut ids: Vec<&String> = refs.keys().collect();
    ids.sort();
    for id in ids {
        let words = vocab.decode_words(&refs[id])?;
        if words.is_empty() {
            writeln!(w, "{id}")?;
        } else {
            writeln!(w, "{id} {words}")?;
        }
    }
    Ok(())
}

/// Groups lists by session (in order of first appearance) and sorts each
/// session by `order`. Duplicate positions are an error.
pub fn group_sessions(lists: &[NBestList]) -> Result<Vec<Vec<&NBestList>>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<&NBestList>> = Vec::new();
    for l in lists {
        let g = *index.entry(&l.session_id).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(l);
    }
    for g in &mut groups {
        g.sort_by_key(|l| l.order);
        if let Some(w) = g.windows(2).find(|w| w[0].order == w[1].order) {
            return Err(Error::InvalidSession(
                w[0].session_id.clone(),
                format!("utterances `{}` and `{}` share order {}", w[0].utterance_id, w[1].utterance_id, w[0].order),
            ));
        }
    }
    Ok(groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescoreConfig {
    /// Weight of the neural LM in the per-token probability mixture.
    pub lambda: f64,
    /// Weight of the combined LM score against the acoustic score.
    #[serde(default = "default_lm_scale")]
    pub lm_scale: f64,
    #[serde(default = "default_carry")]
    pub carry_state: bool,
}

fn default_lm_scale() -> f64 {
    1.0
}

fn default_carry() -> bool {
    true
}

impl RescoreConfig {
    pub fn new(lambda: f64) -> Self {
        RescoreConfig {
            lambda,
            lm_scale: default_lm_scale(),
            carry_state: default_carry(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.lm_scale > 0.0) || !self.lm_scale.is_finite() {
            return Err(Error::InvalidConfig(format!("lm_scale {} must be positive", self.lm_scale)));
        }
        Ok(())
    }
}

fn check_lambda(l: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&l) {
        return Err(Error::InvalidConfig(format!("lambda {l} outside [0, 1]")));
    }
    Ok(())
}

/// ln(λ·exp(a) + (1−λ)·exp(b)), exact at the endpoints.
pub fn mix_logprob(lambda: f64, neural: f64, ngram: f64) -> f64 {
    if lambda == 0.0 {
        return ngram;
    }
    if lambda == 1.0 {
        return neural;
    }
    let x = lambda.ln() + neural;
    let y = (1.0 - lambda).ln() + ngram;
    let m = x.max(y);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((x - m).exp() + (y - m).exp()).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Selection {
    pub session_id: String,
    pub utterance_id: String,
    /// Index of the chosen entry in its list.
    pub index: usize,
    pub score: f64,
    #[serde(skip)]
    pub words: Vec<WordId>,
}

/// Per-token log-probabilities of one hypothesis (`</s>` included).
fn score_tokens<S: LmScorer>(lm: &S, state: &mut S::State, words: &[WordId]) -> Vec<f64> {
    let mut out = Vec::with_capacity(words.len() + 1);
    let mut input = BOS;
    for &w in words.iter().chain(std::iter::once(&EOS)) {
        out.push(lm.step_score(state, input, w));
        input = w;
    }
    out
}

/// Neural scores of every entry of one utterance given the entering state.
struct Scored<St> {
    tokens: Vec<Vec<f64>>,
    finals: Vec<St>,
}

/// Rescores one session for several interpolation weights at once.
///
/// Each weight follows its own chain of selected hypotheses; neural scores
/// are cached per (utterance, chain) so weights that agree on the history
/// share work. Returns selections indexed `[lambda][utterance]`.
pub fn rescore_session_multi<S: LmScorer>(
    lists: &[&NBestList],
    neural: &S,
    ngram: &NgramLm,
    lambdas: &[f64],
    lm_scale: f64,
    carry_state: bool,
) -> Result<Vec<Vec<Selection>>> {
    for &l in lambdas {
        RescoreConfig {
            lambda: l,
            lm_scale,
            carry_state,
        }
        .validate()?;
    }
    if let Some(first) = lists.first() {
        for w in lists.windows(2) {
            if w[1].session_id != first.session_id {
                return Err(Error::InvalidSession(
                    first.session_id.clone(),
                    format!("utterance `{}` belongs to `{}`", w[1].utterance_id, w[1].session_id),
                ));
            }
            if w[1].order <= w[0].order {
                return Err(Error::InvalidSession(first.session_id.clone(), "utterances out of order".into()));
            }
        }
    }
    // Chain 0 is the session start; chain ids are interned (parent, choice).
    let mut chains: HashMap<(usize, usize), usize> = HashMap::new();
    let mut chain_state: Vec<S::State> = vec![neural.zero_state()];
    let mut current = vec![0usize; lambdas.len()];
    let mut out: Vec<Vec<Selection>> = vec![Vec::with_capacity(lists.len()); lambdas.len()];

    for list in lists {
        if list.entries.is_empty() {
            return Err(Error::EmptyNBest(list.utterance_id.clone()));
        }
        let ngram_lp: Vec<Vec<f64>> = list
            .entries
            .iter()
            .map(|e| score_tokens(ngram, &mut ngram.zero_state(), &e.words))
            .collect();
        let mut cache: HashMap<usize, Scored<S::State>> = HashMap::new();
        let mut next_current = current.clone();
        for (li, &lambda) in lambdas.iter().enumerate() {
            let chain = if carry_state { current[li] } else { 0 };
            let scored = cache.entry(chain).or_insert_with(|| {
                let mut tokens = Vec::with_capacity(list.entries.len());
                let mut finals = Vec::with_capacity(list.entries.len());
                for e in &list.entries {
                    let mut st = chain_state[chain].clone();
                    tokens.push(score_tokens(neural, &mut st, &e.words));
                    finals.push(st);
                }
                Scored { tokens, finals }
            });
            let mut best = (0usize, f64::NEG_INFINITY);
            for (k, e) in list.entries.iter().enumerate() {
                let lm: f64 = scored.tokens[k]
                    .iter()
                    .zip(&ngram_lp[k])
                    .map(|(&a, &b)| mix_logprob(lambda, a, b))
                    .sum();
                let total = e.acoustic_score + lm_scale * lm;
                // Strict comparison keeps the earlier entry on ties.
                if total > best.1 || k == 0 {
                    best = (k, total);
                }
            }
            let (k, score) = best;
            out[li].push(Selection {
                session_id: list.session_id.clone(),
                utterance_id: list.utterance_id.clone(),
                index: k,
                score,
                words: list.entries[k].words.clone(),
            });
            if carry_state {
                let n = chain_state.len();
                let id = *chains.entry((chain, k)).or_insert(n);
                if id == n {
                    chain_state.push(scored.finals[k].clone());
                }
                next_current[li] = id;
            }
        }
        current = next_current;
    }
    Ok(out)
}

pub fn rescore_session<S: LmScorer>(
    lists: &[&NBestList],
    neural: &S,
    ngram: &NgramLm,
    cfg: &RescoreConfig,
) -> Result<Vec<Selection>> {
    let mut all = rescore_session_multi(lists, neural, ngram, &[cfg.lambda], cfg.lm_scale, cfg.carry_state)?;
    Ok(all.pop().expect("one lambda"))
}

/// Rescores every session; selections come back session by session.
pub fn rescore_all<S: LmScorer>(
    lists: &[NBestList],
    neural: &S,
    ngram: &NgramLm,
    lambdas: &[f64],
    lm_scale: f64,
    carry_state: bool,
) -> Result<Vec<Vec<Selection>>> {
    let mut out: Vec<Vec<Selection>> = vec![Vec::new(); lambdas.len()];
    for session in group_sessions(lists)? {
        let per = rescore_session_multi(&session, neural, ngram, lambdas, lm_scale, carry_state)?;
        for (o, p) in out.iter_mut().zip(per) {
            o.extend(p);
        }
    }
    Ok(out)
}

pub fn selections_wer(selections: &[Selection], refs: &HashMap<String, Vec<WordId>>) -> Result<WerReport> {
    let mut r = Vec::with_capacity(selections.len());
    let mut h = Vec::with_capacity(selections.len());
    for s in selections {
        let reference = refs
            .get(&s.utterance_id)
            .ok_or_else(|| Error::MissingReference(s.utterance_id.clone()))?;
        r.push(reference.as_slice());
        h.push(s.words.as_slice());
    }
    wer(&r, &h)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub wer: WerReport,
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub best_lambda: f64,
    pub best_wer: f64,
    pub curve: Vec<LambdaPoint>,
    pub best_selections: Vec<Selection>,
}

/// WER at every grid point; the smallest λ wins ties.
pub fn sweep_lambda<S: LmScorer>(
    lists: &[NBestList],
    refs: &HashMap<String, Vec<WordId>>,
    neural: &S,
    ngram: &NgramLm,
    grid: &[f64],
    lm_scale: f64,
    carry_state: bool,
) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    for &l in grid {
        check_lambda(l)?;
    }
    let all = rescore_all(lists, neural, ngram, grid, lm_scale, carry_state)?;
    let mut curve = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, usize)> = None;
    for (i, (&lambda, sel)) in grid.iter().zip(&all).enumerate() {
        let w = selections_wer(sel, refs)?;
        let better = match best {
            None => true,
            Some((bl, bw, _)) => w.wer < bw || (w.wer == bw && lambda < bl),
        };
        if better {
            best = Some((lambda, w.wer, i));
        }
        curve.push(LambdaPoint { lambda, wer: w });
    }
    let (best_lambda, best_wer, i) = best.expect("non-empty grid");
    Ok(Sweep {
        best_lambda,
        best_wer,
        curve,
        best_selections: all.into_iter().nth(i).expect("index in range"),
    })
}

/// Columns: `lambda, wer, n_ref, subs, dels, inss`.
pub fn write_lambda_csv<W: Write>(w: W, curve: &[LambdaPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lambda", "wer", "n_ref", "subs", "dels", "inss"]).map_err(csv_err)?;
    for p in curve {
        out.write_record([
            p.lambda.to_string(),
            p.wer.wer.to_string(),
            p.wer.n_ref.to_string(),
            p.wer.subs.to_string(),
            p.wer.dels.to_string(),
            p.wer.inss.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SelectionRecord<'a> {
    session: &'a str,
    utt: &'a str,
    index: usize,
    score: f64,
    words: String,
}

pub fn write_selections_jsonl<W: Write>(mut w: W, selections: &[Selection], vocab: &Vocabulary) -> Result<()> {
    for s in selections {
        let rec = SelectionRecord {
            session: &s.session_id,
            utt: &s.utterance_id,
            index: s.index,
            score: s.score,
            words: vocab.decode_words(&s.words)?,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
