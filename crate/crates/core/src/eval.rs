//! Perplexity with clean, corrupted-history and corrupted-target streams,
//! plus the PPL-vs-WER correlation report.

use std::io::Write;

use serde::Serialize;

use crate::corpus::{Corpus, Sentence};
use crate::error::{Error, Result};
use crate::noise::{clean_pair, corrupt_for_input, corrupt_for_target, Channel, CorruptedPair, TargetMode};
use crate::rng::{rng_for, Rng};
use crate::scorer::LmScorer;

const STREAM_SPPL: u64 = 0x5070_706c;
const STREAM_TPPL: u64 = 0x7470_706c;

/// How recurrent state is handled between sentences.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum StateReset {
    /// Fresh state for every sentence.
    #[default]
    PerSentence,
    /// Carry state through each session (or the whole corpus without one).
    PerSession,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PplReport {
    pub ppl: f64,
    /// Number of predicted tokens, `</s>` included.
    pub tokens: usize,
    /// Natural-log probability summed over all tokens.
    pub log_prob: f64,
    pub sentence_log_probs: Vec<f64>,
}

impl PplReport {
    fn from_sums(log_prob: f64, tokens: usize, sentence_log_probs: Vec<f64>) -> Self {
        let ppl = if tokens == 0 {
            1.0
        } else {
            (-log_prob / tokens as f64).exp()
        };
        PplReport {
            ppl,
            tokens,
            log_prob,
            sentence_log_probs,
        }
    }
}

/// Scores aligned (input, target) streams. Every perplexity variant goes
/// through here so that they agree exactly when the pairs agree.
pub fn score_pairs<S, F>(scorer: &S, corpus: &Corpus, reset: StateReset, mut make_pair: F) -> PplReport
where
    S: LmScorer + ?Sized,
    F: FnMut(usize, &Sentence) -> CorruptedPair,
{
    let mut total = 0.0;
    let mut tokens = 0;
    let mut per_sentence = Vec::with_capacity(corpus.len());
    let ranges = match reset {
        StateReset::PerSentence => (0..corpus.len()).map(|i| i..i + 1).collect(),
        StateReset::PerSession => corpus.session_ranges(),
    };
    for range in ranges {
        let mut state = scorer.zero_state();
        for i in range {
            let pair = make_pair(i, &corpus.sentences()[i]);
            let mut lp = 0.0;
            for (&inp, &tgt) in pair.inputs.iter().zip(&pair.targets) {
                lp += scorer.step_score(&mut state, inp, tgt);
            }
            total += lp;
            tokens += pair.targets.len();
            per_sentence.push(lp);
        }
    }
    PplReport::from_sums(total, tokens, per_sentence)
}

pub fn ppl<S: LmScorer + ?Sized>(scorer: &S, corpus: &Corpus, reset: StateReset) -> PplReport {
    score_pairs(scorer, corpus, reset, |_, s| clean_pair(s))
}

/// One realization of corrupted-history perplexity. Tokens are counted on
/// the corrupted stream, so deleted positions drop out of the average.
pub fn sppl_once<S: LmScorer + ?Sized>(
    scorer: &S,
    corpus: &Corpus,
    channel: &Channel,
    reset: StateReset,
    seed: u64,
    realization: u64,
) -> PplReport {
    score_pairs(scorer, corpus, reset, |i, s| {
        let mut rng = rng_for(seed, &[STREAM_SPPL, realization, i as u64]);
        corrupt_for_input(s, channel, &mut rng)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpplReport {
    pub realizations: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single realization).
    pub std: f64,
    pub relative_std: f64,
}

impl SpplReport {
    pub fn from_values(realizations: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&realizations);
        SpplReport {
            relative_std: if mean == 0.0 { 0.0 } else { std / mean },
            realizations,
            mean,
            std,
        }
    }

    /// Counts per equal-width bin between min and max.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        histogram(&self.realizations, bins)
    }

    /// Sarle's bimodality coefficient; values below 5/9 are consistent
    /// with a unimodal distribution.
    pub fn bimodality_coefficient(&self) -> f64 {
        bimodality_coefficient(&self.realizations)
    }
}

pub fn sppl<S: LmScorer + ?Sized>(
    scorer: &S,
    corpus: &Corpus,
    channel: &Channel,
    k: usize,
    reset: StateReset,
    seed: u64,
) -> Result<SpplReport> {
    if k == 0 {
        return Err(Error::InvalidConfig("sPPL needs at least one realization".into()));
    }
    let values = (0..k as u64)
        .map(|r| sppl_once(scorer, corpus, channel, reset, seed, r).ppl)
        .collect();
    Ok(SpplReport::from_values(values))
}

/// Clean histories, targets substituted by the channel.
pub fn tppl<S: LmScorer + ?Sized>(
    scorer: &S,
    corpus: &Corpus,
    channel: &Channel,
    reset: StateReset,
    seed: u64,
) -> PplReport {
    score_pairs(scorer, corpus, reset, |i, s| {
        let mut rng: Rng = rng_for(seed, &[STREAM_TPPL, i as u64]);
        corrupt_for_target(s, channel, &mut rng, TargetMode::S)
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn histogram(xs: &[f64], bins: usize) -> Vec<usize> {
    let mut out = vec![0; bins];
    if xs.is_empty() || bins == 0 {
        return out;
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    for &x in xs {
        let b = if width > 0.0 {
            (((x - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        out[b] += 1;
    }
    out
}

pub fn bimodality_coefficient(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 4 {
        return f64::NAN;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if m2 == 0.0 {
        return 0.0;
    }
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    // Bias-corrected sample skewness and excess kurtosis.
    let g1 = m3 / m2.powf(1.5);
    let g2 = m4 / (m2 * m2) - 3.0;
    let skew = g1 * (n * (n - 1.0)).sqrt() / (n - 2.0);
    let kurt = (n - 1.0) / ((n - 2.0) * (n - 3.0)) * ((n + 1.0) * g2 + 6.0);
    (skew * skew + 1.0) / (kurt + 3.0 * (n - 1.0).powi(2) / ((n - 2.0) * (n - 3.0)))
}

pub fn write_ppl_csv<W: Write>(w: W, rows: &[(String, PplReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["label", "tokens", "log_prob", "ppl"]).map_err(csv_err)?;
    for (label, r) in rows {
        out.write_record([label.clone(), r.tokens.to_string(), r.log_prob.to_string(), r.ppl.to_string()])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per realization followed by `mean`, `std` and `relative_std`
/// summary rows.
pub fn write_sppl_csv<W: Write>(w: W, report: &SpplReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["realization", "sppl"]).map_err(csv_err)?;
    for (i, v) in report.realizations.iter().enumerate() {
        out.write_record([i.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    for (name, v) in [("mean", report.mean), ("std", report.std), ("relative_std", report.relative_std)] {
        out.write_record([name.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationEntry {
    pub label: String,
    pub ppl: f64,
    /// sPPL with a channel estimated on training data.
    pub sppl_train: f64,
    /// sPPL with a channel estimated on development data.
    pub sppl_dev: f64,
    pub wer: f64,
}

/// A min-max normalized series and its agreement with WER.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesSummary {
    pub name: &'static str,
    /// `None` when the series is constant.
    pub normalized: Option<Vec<f64>>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

impl SeriesSummary {
    pub fn is_degenerate(&self) -> bool {
        self.normalized.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub entries: Vec<CorrelationEntry>,
    pub wer_normalized: Option<Vec<f64>>,
    pub series: Vec<SeriesSummary>,
}

pub fn min_max_normalize(xs: &[f64]) -> Option<Vec<f64>> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || !(hi - lo).is_finite() {
        return None;
    }
    Some(xs.iter().map(|x| (x - lo) / (hi - lo)).collect())
}

/// `None` when either series has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties get the average of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&ranks(xs), &ranks(ys))
}

pub fn correlation_report(entries: Vec<CorrelationEntry>) -> Result<CorrelationReport> {
    if entries.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: entries.len(),
        });
    }
    let wer: Vec<f64> = entries.iter().map(|e| e.wer).collect();
    type Column = (&'static str, fn(&CorrelationEntry) -> f64);
    let columns: [Column; 3] = [
        ("ppl", |e| e.ppl),
        ("sppl_train", |e| e.sppl_train),
        ("sppl_dev", |e| e.sppl_dev),
    ];
    let series = columns
        .iter()
        .map(|&(name, get)| {
            let xs: Vec<f64> = entries.iter().map(get).collect();
            SeriesSummary {
                name,
                normalized: min_max_normalize(&xs),
                pearson: pearson(&xs, &wer),
                spearman: spearman(&xs, &wer),
            }
        })
        .collect();
    Ok(CorrelationReport {
        wer_normalized: min_max_normalize(&wer),
        entries,
        series,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Columns: `label, ppl, sppl_train, sppl_dev, wer` followed by the
/// normalized `*_norm` columns (`NA` for a constant series). Then one
/// `pearson` and one `spearman` row holding coefficients against WER.
pub fn write_correlation_csv<W: Write>(w: W, report: &CorrelationReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "label",
        "ppl",
        "sppl_train",
        "sppl_dev",
        "wer",
        "ppl_norm",
        "sppl_train_norm",
        "sppl_dev_norm",
        "wer_norm",
    ])
    .map_err(csv_err)?;
    let norm = |v: &Option<Vec<f64>>, i: usize| fmt_opt(v.as_ref().map(|v| v[i]));
    for (i, e) in report.entries.iter().enumerate() {
        let mut row = vec![
            e.label.clone(),
            e.ppl.to_string(),
            e.sppl_train.to_string(),
            e.sppl_dev.to_string(),
            e.wer.to_string(),
        ];
        row.extend(report.series.iter().map(|s| norm(&s.normalized, i)));
        row.push(norm(&report.wer_normalized, i));
        out.write_record(&row).map_err(csv_err)?;
    }
    for (name, get) in [
        ("pearson", (|s: &SeriesSummary| s.pearson) as fn(&SeriesSummary) -> Option<f64>),
        ("spearman", |s: &SeriesSummary| s.spearman),
    ] {
        let mut row = vec![name.to_string()];
        row.extend(report.series.iter().map(|s| fmt_opt(get(s))));
        row.push("NA".into());
        row.extend(std::iter::repeat_n(String::new(), 4));
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
