//! Minimum edit distance alignment, WER scoring, and confusion statistics.
//!
//! Costs are unit (1/1/1). When several alignments share the minimal cost
//! the backtrace prefers Match, then Sub, then Del, then Ins, which keeps
//! harvested confusion tables deterministic.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::Serialize;

use crate::corpus::{Vocabulary, WordId, BOS, EOS, EPS_STR};
use crate::error::{Error, Result};
use crate::rescore::NBestList;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum EditOp {
    Match,
    Sub,
    Del,
    Ins,
}

/// One column of an alignment; `None` stands for the empty symbol.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct AlignStep<T> {
    pub op: EditOp,
    pub ref_word: Option<T>,
    pub hyp_word: Option<T>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentScript<T> {
    pub steps: Vec<AlignStep<T>>,
    pub cost: usize,
}

impl<T: Copy> AlignmentScript<T> {
    pub fn count(&self, op: EditOp) -> usize {
        self.steps.iter().filter(|s| s.op == op).count()
    }

    pub fn ref_side(&self) -> Vec<T> {
        self.steps.iter().filter_map(|s| s.ref_word).collect()
    }

    pub fn hyp_side(&self) -> Vec<T> {
        self.steps.iter().filter_map(|s| s.hyp_word).collect()
    }
}

/// Levenshtein alignment of `hyp` against `reference` with a full backtrace.
pub fn align<T: PartialEq + Copy>(reference: &[T], hyp: &[T]) -> AlignmentScript<T> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0u32; (n + 1) * w];
    for (j, v) in d[..w].iter_mut().enumerate() {
        *v = j as u32;
    }
    for i in 1..=n {
        d[i * w] = i as u32;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + u32::from(reference[i - 1] != hyp[j - 1]);
            let up = d[(i - 1) * w + j] + 1;
            let left = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(up).min(left);
        }
    }

    let mut steps = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            let diag = d[(i - 1) * w + j - 1];
            if same && diag == here {
                steps.push(AlignStep {
                    op: EditOp::Match,
                    ref_word: Some(reference[i - 1]),
                    hyp_word: Some(hyp[j - 1]),
                });
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && diag + 1 == here {
                steps.push(AlignStep {
                    op: EditOp::Sub,
                    ref_word: Some(reference[i - 1]),
                    hyp_word: Some(hyp[j - 1]),
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            steps.push(AlignStep {
                op: EditOp::Del,
                ref_word: Some(reference[i - 1]),
                hyp_word: None,
            });
            i -= 1;
        } else {
            steps.push(AlignStep {
                op: EditOp::Ins,
                ref_word: None,
                hyp_word: Some(hyp[j - 1]),
            });
            j -= 1;
        }
    }
    steps.reverse();
    AlignmentScript {
        steps,
        cost: d[n * w + m] as usize,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct WerReport {
    pub n_ref: usize,
    pub subs: usize,
    pub dels: usize,
    pub inss: usize,
    pub wer: f64,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.subs + self.dels + self.inss
    }

    fn add<T: Copy>(&mut self, n_ref: usize, a: &AlignmentScript<T>) {
        self.n_ref += n_ref;
        self.subs += a.count(EditOp::Sub);
        self.dels += a.count(EditOp::Del);
        self.inss += a.count(EditOp::Ins);
    }

    fn finish(mut self) -> Self {
        self.wer = match (self.errors(), self.n_ref) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, n) => e as f64 / n as f64,
        };
        self
    }
}

/// Corpus-level WER from per-utterance minimal alignments.
pub fn wer<T: PartialEq + Copy, R: AsRef<[T]>, H: AsRef<[T]>>(
    refs: &[R],
    hyps: &[H],
) -> Result<WerReport> {
    if refs.len() != hyps.len() {
        return Err(Error::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let mut report = WerReport::default();
    for (r, h) in refs.iter().zip(hyps) {
        let a = align(r.as_ref(), h.as_ref());
        report.add(r.as_ref().len(), &a);
    }
    Ok(report.finish())
}

/// A word or the empty symbol; ε orders first.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sym {
    Eps,
    Word(WordId),
}

impl Sym {
    fn from_opt(w: Option<WordId>) -> Sym {
        w.map_or(Sym::Eps, Sym::Word)
    }

    pub fn spell(self, vocab: &Vocabulary) -> Result<&str> {
        match self {
            Sym::Eps => Ok(EPS_STR),
            Sym::Word(w) => vocab.word(w),
        }
    }
}

/// Raw (reference symbol -> hypothesis symbol) tallies.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub rows: BTreeMap<Sym, BTreeMap<Sym, u64>>,
    /// Number of (reference, hypothesis) pairs aligned.
    pub n_alignments: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, from: Sym, to: Sym, n: u64) {
        *self.rows.entry(from).or_default().entry(to).or_default() += n;
    }

    pub fn add_alignment(&mut self, script: &AlignmentScript<WordId>) {
        for s in &script.steps {
            self.add(Sym::from_opt(s.ref_word), Sym::from_opt(s.hyp_word), 1);
        }
        self.n_alignments += 1;
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (&from, row) in &other.rows {
            for (&to, &n) in row {
                self.add(from, to, n);
            }
        }
        self.n_alignments += other.n_alignments;
    }

    pub fn total(&self) -> u64 {
        self.rows.values().flat_map(|r| r.values()).sum()
    }

    /// Reference tokens seen (every one yields exactly one non-ε-row event).
    pub fn n_ref_tokens(&self) -> u64 {
        self.rows
            .iter()
            .filter(|(k, _)| **k != Sym::Eps)
            .flat_map(|(_, r)| r.values())
            .sum()
    }

    pub fn n_insertions(&self) -> u64 {
        self.rows.get(&Sym::Eps).map_or(0, |r| r.values().sum())
    }

    /// Substitutions per reference token.
    pub fn substitution_rate(&self) -> f64 {
        let subs: u64 = self
            .rows
            .iter()
            .filter_map(|(&from, r)| match from {
                Sym::Word(_) => Some(r.iter().filter(|(&to, _)| to != from && to != Sym::Eps).map(|(_, n)| n).sum::<u64>()),
                Sym::Eps => None,
            })
            .sum();
        ratio(subs, self.n_ref_tokens())
    }

    /// Deletions per reference token.
    pub fn deletion_rate(&self) -> f64 {
        let dels: u64 = self
            .rows
            .iter()
            .filter(|(&from, _)| from != Sym::Eps)
            .filter_map(|(_, r)| r.get(&Sym::Eps))
            .sum();
        ratio(dels, self.n_ref_tokens())
    }

    /// Insertions per insertion slot: one slot before every reference
    /// token and one before each sentence end.
    pub fn insertion_rate(&self) -> f64 {
        let slots = self.n_ref_tokens() + self.n_alignments;
        if slots == 0 {
            0.0
        } else {
            self.n_insertions() as f64 / slots as f64
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Aligns every hypothesis of every list against its reference and tallies
/// the aligned symbol pairs. All hypotheses count equally.
pub fn accumulate_confusions(
    refs: &HashMap<String, Vec<WordId>>,
    lists: &[NBestList],
) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for list in lists {
        let reference = refs
            .get(&list.utterance_id)
            .ok_or_else(|| Error::MissingReference(list.utterance_id.clone()))?;
        for entry in &list.entries {
            counts.add_alignment(&align(reference, &entry.words));
        }
    }
    Ok(counts)
}

/// Per-reference-symbol categorical distributions over hypothesis symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionTable {
    pub rows: BTreeMap<Sym, BTreeMap<Sym, f64>>,
    pub counts: ConfusionCounts,
}

pub fn finalize_confusion(counts: ConfusionCounts) -> Result<ConfusionTable> {
    let mut rows = BTreeMap::new();
    for (&from, row) in &counts.rows {
        let total: u64 = row.values().sum();
        if total == 0 {
            continue;
        }
        let dist = row
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(&to, &n)| (to, n as f64 / total as f64))
            .collect();
        rows.insert(from, dist);
    }
    if rows.is_empty() {
        return Err(Error::EmptyCounts);
    }
    Ok(ConfusionTable { rows, counts })
}

impl ConfusionTable {
    pub fn row(&self, from: Sym) -> Option<&BTreeMap<Sym, f64>> {
        self.rows.get(&from)
    }

    pub fn prob(&self, from: Sym, to: Sym) -> f64 {
        self.row(from)
            .and_then(|r| r.get(&to))
            .copied()
            .unwrap_or(0.0)
    }

    /// TSV: an `# alignments` comment, a header, then
    /// `ref_word<TAB>hyp_word<TAB>count<TAB>prob` rows.
    pub fn to_tsv(&self, vocab: &Vocabulary) -> Result<String> {
        let mut out = String::new();
        writeln!(out, "# alignments\t{}", self.counts.n_alignments).unwrap();
        out.push_str("ref_word\thyp_word\tcount\tprob\n");
        for (&from, row) in &self.rows {
            for (&to, &p) in row {
                let n = self.counts.rows[&from][&to];
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    from.spell(vocab)?,
                    to.spell(vocab)?,
                    n,
                    p
                )
                .unwrap();
            }
        }
        Ok(out)
    }

    /// Reads a table written by [`ConfusionTable::to_tsv`]. Words outside
    /// `vocab` fold into `<unk>`; probabilities are recomputed from counts.
    pub fn from_tsv(reader: impl BufRead, vocab: &Vocabulary) -> Result<Self> {
        let mut counts = ConfusionCounts::default();
        let mut seen_header = false;
        let sym = |s: &str, line: usize| -> Result<Sym> {
            if s == EPS_STR {
                return Ok(Sym::Eps);
            }
            let id = vocab.id_or_unk(s);
            if vocab.id(s) == Some(BOS) || vocab.id(s) == Some(EOS) {
                return Err(Error::parse("confusion table", line, "boundary symbol in table"));
            }
            Ok(Sym::Word(id))
        };
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let ln = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut f = rest.split_whitespace();
                if f.next() == Some("alignments") {
                    counts.n_alignments = f
                        .next()
                        .ok_or_else(|| Error::parse("confusion table", ln, "missing count"))?
                        .parse()
                        .map_err(|e| Error::parse("confusion table", ln, format!("{e}")))?;
                }
                continue;
            }
            if !seen_header {
                if line.split('\t').next() != Some("ref_word") {
                    return Err(Error::parse("confusion table", ln, "missing header"));
                }
                seen_header = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::parse("confusion table", ln, "expected 4 columns"));
            }
            let c: u64 = f[2]
                .parse()
                .map_err(|e| Error::parse("confusion table", ln, format!("bad count: {e}")))?;
            counts.add(sym(f[0], ln)?, sym(f[1], ln)?, c);
        }
        finalize_confusion(counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rescore::NBestEntry;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<WordId> {
        v.iter().map(|&i| WordId(i)).collect()
    }

    #[test]
    fn identity_alignment() {
        let a = align(&['a', 'b', 'c'], &['a', 'b', 'c']);
        assert_eq!(a.cost, 0);
        assert!(a.steps.iter().all(|s| s.op == EditOp::Match));
        assert_eq!(a.steps.len(), 3);
    }

    #[test]
    fn single_deletion() {
        let a = align(&['a', 'b', 'c'], &['a', 'c']);
        assert_eq!(a.cost, 1);
        assert_eq!(a.count(EditOp::Del), 1);
        let del = a.steps.iter().find(|s| s.op == EditOp::Del).unwrap();
        assert_eq!(del.ref_word, Some('b'));
    }

    #[test]
    fn empty_reference_is_all_insertions() {
        let a = align(&[], &['x', 'y']);
        assert_eq!(a.cost, 2);
        assert_eq!(a.count(EditOp::Ins), 2);
        let b = align::<char>(&[], &[]);
        assert_eq!(b.cost, 0);
        assert!(b.steps.is_empty());
    }

    #[test]
    fn ties_prefer_substitution_over_indels() {
        // [a b] vs [b a]: two subs or del+ins pairs all cost 2.
        let a = align(&['a', 'b'], &['b', 'a']);
        assert_eq!(a.cost, 2);
        assert_eq!(a.count(EditOp::Sub), 2);
    }

    #[test]
    fn wer_examples() {
        let r = wer(&[vec!['a', 'b']], &[vec!['a', 'b']]).unwrap();
        assert_eq!(r.wer, 0.0);
        let r = wer(&[vec!['a', 'b']], &[vec!['a']]).unwrap();
        assert_eq!(r.wer, 0.5);
        assert_eq!(r.dels, 1);
        assert!(matches!(
            wer(&[vec!['a']], &Vec::<Vec<char>>::new()),
            Err(Error::LengthMismatch { refs: 1, hyps: 0 })
        ));
        let r = wer(&[Vec::<char>::new()], &[vec!['x']]).unwrap();
        assert!(r.wer.is_infinite());
    }

    fn list(utt: &str, hyps: &[&[u32]]) -> NBestList {
        NBestList {
            session_id: "S".into(),
            utterance_id: utt.into(),
            order: 0,
            entries: hyps
                .iter()
                .map(|h| NBestEntry {
                    words: ids(h),
                    acoustic_score: 0.0,
                    firstpass_lm_score: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn identical_hypothesis_gives_diagonal_counts() {
        let refs = HashMap::from([("u1".to_string(), ids(&[3, 4, 5]))]);
        let c = accumulate_confusions(&refs, &[list("u1", &[&[3, 4, 5]])]).unwrap();
        for (from, row) in &c.rows {
            assert_eq!(row.len(), 1);
            assert_eq!(row.keys().next(), Some(from));
        }
        assert_eq!(c.n_ref_tokens(), 3);
        assert_eq!(c.n_insertions(), 0);
    }

    #[test]
    fn forced_tallies() {
        let (a, b) = (WordId(3), WordId(4));
        let refs = HashMap::from([("u".to_string(), vec![a])]);
        let c = accumulate_confusions(&refs, &[list("u", &[&[3], &[4]])]).unwrap();
        let row = &c.rows[&Sym::Word(a)];
        assert_eq!(row[&Sym::Word(a)], 1);
        assert_eq!(row[&Sym::Word(b)], 1);
        assert_eq!(c.n_alignments, 2);
    }

    #[test]
    fn missing_reference_names_utterance() {
        let refs = HashMap::new();
        match accumulate_confusions(&refs, &[list("u42", &[&[3]])]) {
            Err(Error::MissingReference(u)) => assert_eq!(u, "u42"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn finalize_examples() {
        let (a, b) = (Sym::Word(WordId(3)), Sym::Word(WordId(4)));
        let (x, y) = (Sym::Word(WordId(5)), Sym::Word(WordId(6)));
        let mut c = ConfusionCounts::default();
        c.add(a, a, 3);
        c.add(a, b, 1);
        let t = finalize_confusion(c).unwrap();
        assert_eq!(t.prob(a, a), 0.75);
        assert_eq!(t.prob(a, b), 0.25);

        let mut c = ConfusionCounts::default();
        c.add(a, Sym::Eps, 2);
        c.add(a, a, 2);
        assert_eq!(finalize_confusion(c).unwrap().prob(a, Sym::Eps), 0.5);

        let mut c = ConfusionCounts::default();
        c.add(Sym::Eps, x, 1);
        c.add(Sym::Eps, y, 1);
        let t = finalize_confusion(c).unwrap();
        assert_eq!(t.prob(Sym::Eps, x), 0.5);
        assert_eq!(t.prob(Sym::Eps, y), 0.5);

        let mut zero = ConfusionCounts::default();
        zero.add(a, a, 0);
        assert!(matches!(finalize_confusion(zero), Err(Error::EmptyCounts)));
        assert!(matches!(
            finalize_confusion(ConfusionCounts::default()),
            Err(Error::EmptyCounts)
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let v = Vocabulary::build(&["a b c"], &[]).unwrap();
        let (a, b) = (Sym::Word(v.id("a").unwrap()), Sym::Word(v.id("b").unwrap()));
        let mut c = ConfusionCounts::default();
        c.add(a, a, 7);
        c.add(a, b, 2);
        c.add(a, Sym::Eps, 1);
        c.add(Sym::Eps, b, 3);
        c.n_alignments = 4;
        let t = finalize_confusion(c).unwrap();
        let tsv = t.to_tsv(&v).unwrap();
        assert!(tsv.contains("ref_word\thyp_word\tcount\tprob\n"));
        assert!(tsv.contains("<eps>\tb\t3\t1\n"));
        let back = ConfusionTable::from_tsv(tsv.as_bytes(), &v).unwrap();
        assert_eq!(back, t);
        assert!(ConfusionTable::from_tsv("a\tb\t1\t1\n".as_bytes(), &v).is_err());
        assert!(ConfusionTable::from_tsv(
            "ref_word\thyp_word\tcount\tprob\n<s>\ta\t1\t1\n".as_bytes(),
            &v
        )
        .is_err());
    }

    #[test]
    fn insertion_rate_uses_reference_and_sentence_slots() {
        let refs = HashMap::from([("u".to_string(), ids(&[3, 4]))]);
        let c = accumulate_confusions(&refs, &[list("u", &[&[3, 9, 4]])]).unwrap();
        assert_eq!(c.n_insertions(), 1);
        assert!((c.insertion_rate() - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn script_reconstructs_both_sides(
            r in prop::collection::vec(0u8..4, 0..10),
            h in prop::collection::vec(0u8..4, 0..10),
        ) {
            let a = align(&r, &h);
            prop_assert_eq!(a.ref_side(), r);
            prop_assert_eq!(a.hyp_side(), h);
            let counted = a.count(EditOp::Sub) + a.count(EditOp::Del) + a.count(EditOp::Ins);
            prop_assert_eq!(counted, a.cost);
        }

        #[test]
        fn triangle_inequality(
            a in prop::collection::vec(0u8..3, 0..8),
            b in prop::collection::vec(0u8..3, 0..8),
            c in prop::collection::vec(0u8..3, 0..8),
        ) {
            prop_assert!(align(&a, &c).cost <= align(&a, &b).cost + align(&b, &c).cost);
        }

        #[test]
        fn merge_is_order_independent(
            r in prop::collection::vec(3u32..6, 1..6),
            h1 in prop::collection::vec(3u32..6, 0..6),
            h2 in prop::collection::vec(3u32..6, 0..6),
        ) {
            let (r, h1, h2) = (ids(&r), ids(&h1), ids(&h2));
            let mut x = ConfusionCounts::default();
            x.add_alignment(&align(&r, &h1));
            let mut y = ConfusionCounts::default();
            y.add_alignment(&align(&r, &h2));
            let mut xy = x.clone();
            xy.merge(&y);
            let mut yx = y.clone();
            yx.merge(&x);
            prop_assert_eq!(xy, yx);
        }
    }
}
