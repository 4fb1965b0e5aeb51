//! Interpolated Kneser-Ney n-gram model with ARPA import/export.
//!
//! Training produces the usual back-off representation: every observed
//! n-gram stores its fully interpolated probability and every observed
//! context stores the interpolation weight of its lower order. Scoring
//! walks down from the longest stored n-gram, so a model read back from
//! ARPA scores exactly like the one that was trained.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;

use crate::corpus::{Corpus, Vocabulary, WordId, BOS};
use crate::error::{Error, Result};
use crate::scorer::LmScorer;

const FALLBACK_DISCOUNT: f64 = 0.75;
const ARPA_ZERO: f64 = -99.0;

#[derive(Clone, Debug, Default)]
pub struct NgramCounts {
    /// `raw[k - 1]` holds counts of k-grams.
    raw: Vec<HashMap<Vec<WordId>, u64>>,
}

impl NgramCounts {
    pub fn from_corpus(corpus: &Corpus, order: usize) -> Self {
        let mut raw = vec![HashMap::new(); order];
        for s in corpus.sentences() {
            let t = s.tokens();
            for i in 1..t.len() {
                for k in 1..=order.min(i + 1) {
                    *raw[k - 1].entry(t[i + 1 - k..=i].to_vec()).or_insert(0) += 1;
                }
            }
        }
        NgramCounts { raw }
    }

    pub fn order(&self) -> usize {
        self.raw.len()
    }

    pub fn raw(&self, gram: &[WordId]) -> u64 {
        self.raw
            .get(gram.len().wrapping_sub(1))
            .and_then(|m| m.get(gram))
            .copied()
            .unwrap_or(0)
    }

    /// Kneser-Ney counts: raw at the top order and for n-grams starting
    /// with `<s>` (they have no left extension), continuation counts else.
    fn adjusted(&self) -> Vec<HashMap<Vec<WordId>, u64>> {
        let n = self.order();
        let mut out = Vec::with_capacity(n);
        for k in 1..=n {
            if k == n {
                out.push(self.raw[k - 1].clone());
                continue;
            }
            let mut cont: HashMap<&[WordId], u64> = HashMap::new();
            for g in self.raw[k].keys() {
                *cont.entry(&g[1..]).or_insert(0) += 1;
            }
            let adj = self.raw[k - 1]
                .iter()
                .map(|(g, &c)| {
                    let a = if g[0] == BOS { c } else { cont[g.as_slice()] };
                    (g.clone(), a)
                })
                .collect();
            out.push(adj);
        }
        out
    }
}

#[derive(Copy, Clone, Debug)]
pub struct KnOptions {
    pub order: usize,
    /// Fixed discount for every order instead of the count-of-counts estimate.
    pub discount: Option<f64>,
}

impl Default for KnOptions {
    fn default() -> Self {
        KnOptions {
            order: 3,
            discount: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NgramLm {
    order: usize,
    vocab_size: usize,
    /// `probs[k - 1]`: ln p of stored k-grams.
    probs: Vec<HashMap<Vec<WordId>, f64>>,
    /// `bows[k]`: ln back-off weight of stored contexts of length k.
    bows: Vec<HashMap<Vec<WordId>, f64>>,
    discounts: Vec<f64>,
}

fn estimate_discount(adjusted: &HashMap<Vec<WordId>, u64>, k: usize) -> f64 {
    let n1 = adjusted.values().filter(|&&c| c == 1).count() as f64;
    let n2 = adjusted.values().filter(|&&c| c == 2).count() as f64;
    let d = n1 / (n1 + 2.0 * n2);
    if d.is_finite() && d > 0.0 && d < 1.0 {
        d
    } else {
        log::warn!("cannot estimate {k}-gram discount (n1={n1}, n2={n2}); using {FALLBACK_DISCOUNT}");
        FALLBACK_DISCOUNT
    }
}

/// Trains an interpolated Kneser-Ney model over the id space of `vocab`.
pub fn train_kn(corpus: &Corpus, vocab: &Vocabulary, opts: KnOptions) -> Result<NgramLm> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if opts.order == 0 {
        return Err(Error::InvalidConfig("n-gram order must be at least 1".into()));
    }
    if let Some(d) = opts.discount {
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::InvalidConfig(format!("discount {d} outside (0, 1)")));
        }
    }
    let n = opts.order;
    let v = vocab.len();
    let adjusted = NgramCounts::from_corpus(corpus, n).adjusted();
    let discounts: Vec<f64> = adjusted
        .iter()
        .enumerate()
        .map(|(i, a)| opts.discount.unwrap_or_else(|| estimate_discount(a, i + 1)))
        .collect();

    let mut lm = NgramLm {
        order: n,
        vocab_size: v,
        probs: vec![HashMap::new(); n],
        bows: vec![HashMap::new(); n],
        discounts: discounts.clone(),
    };

    // Unigrams interpolate with the uniform distribution over predictable ids.
    let d1 = discounts[0];
    let total: u64 = adjusted[0].values().sum();
    let types = adjusted[0].len() as f64;
    let floor = d1 * types / total as f64 / (v - 1) as f64;
    for id in 1..v as u32 {
        let w = WordId(id);
        let a = adjusted[0].get(&vec![w]).copied().unwrap_or(0) as f64;
        let p = (a - d1).max(0.0) / total as f64 + floor;
        lm.probs[0].insert(vec![w], p.ln());
    }

    for k in 2..=n {
        let d = discounts[k - 1];
        let mut ctx: HashMap<&[WordId], (u64, u64)> = HashMap::new();
        for (g, &a) in &adjusted[k - 1] {
            let e = ctx.entry(&g[..k - 1]).or_insert((0, 0));
            e.0 += a;
            e.1 += 1;
        }
        let mut level = HashMap::with_capacity(adjusted[k - 1].len());
        for (g, &a) in &adjusted[k - 1] {
            let h = &g[..k - 1];
            let (s, t) = ctx[h];
            let gamma = d * t as f64 / s as f64;
            let lower = lm.logprob(&h[1..], g[k - 1]).exp();
            let p = (a as f64 - d).max(0.0) / s as f64 + gamma * lower;
            level.insert(g.clone(), p.ln());
        }
        lm.probs[k - 1] = level;
        lm.bows[k - 1] = ctx
            .into_iter()
            .map(|(h, (s, t))| (h.to_vec(), (d * t as f64 / s as f64).ln()))
            .collect();
    }
    Ok(lm)
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discounts(&self) -> &[f64] {
        &self.discounts
    }

    /// ln p(w | context). Only the last `order - 1` context tokens matter.
    pub fn logprob(&self, context: &[WordId], w: WordId) -> f64 {
        if w == BOS || w.index() >= self.vocab_size {
            return f64::NEG_INFINITY;
        }
        let keep = context.len().min(self.order - 1);
        let mut key = Vec::with_capacity(keep + 1);
        key.extend_from_slice(&context[context.len() - keep..]);
        key.push(w);
        let mut backoff = 0.0;
        for start in 0..=keep {
            let gram = &key[start..];
            if let Some(&p) = self.probs[gram.len() - 1].get(gram) {
                return backoff + p;
            }
            let h = &key[start..keep];
            if let Some(&b) = self.bows[h.len()].get(h) {
                backoff += b;
            }
        }
        f64::NEG_INFINITY
    }

    pub fn ngram_counts(&self) -> Vec<usize> {
        self.probs.iter().map(HashMap::len).collect()
    }

    /// ARPA text with log10 probabilities and back-off weights.
    pub fn to_arpa(&self, vocab: &Vocabulary) -> Result<String> {
        let mut out = String::from("\n\\data\\\n");
        let bos_key = vec![BOS];
        for k in 1..=self.order {
            let extra = usize::from(k == 1);
            writeln!(out, "ngram {}={}", k, self.probs[k - 1].len() + extra).unwrap();
        }
        let ln10 = std::f64::consts::LN_10;
        for k in 1..=self.order {
            writeln!(out, "\n\\{k}-grams:").unwrap();
            let mut grams: Vec<&Vec<WordId>> = self.probs[k - 1].keys().collect();
            if k == 1 {
                grams.push(&bos_key);
            }
            grams.sort();
            for g in grams {
                let p = self.probs[k - 1].get(g).map_or(ARPA_ZERO, |p| p / ln10);
                let words: Result<Vec<&str>> = g.iter().map(|&w| vocab.word(w)).collect();
                write!(out, "{}\t{}", p, words?.join(" ")).unwrap();
                if k < self.order {
                    if let Some(b) = self.bows[k].get(g) {
                        write!(out, "\t{}", b / ln10).unwrap();
                    }
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        Ok(out)
    }

    pub fn from_arpa(reader: impl BufRead, vocab: &Vocabulary) -> Result<Self> {
        let ln10 = std::f64::consts::LN_10;
        let mut order = 0;
        let mut section: Option<usize> = None;
        let mut probs: Vec<HashMap<Vec<WordId>, f64>> = Vec::new();
        let mut bows: Vec<HashMap<Vec<WordId>, f64>> = Vec::new();
        let err = |ln: usize, m: &str| Error::parse("arpa", ln, m);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let ln = i + 1;
            let t = line.trim();
            if t.is_empty() || t == "\\data\\" {
                continue;
            }
            if t == "\\end\\" {
                break;
            }
            if let Some(rest) = t.strip_prefix("ngram ") {
                let (k, _) = rest.split_once('=').ok_or_else(|| err(ln, "bad ngram line"))?;
                let k: usize = k.trim().parse().map_err(|_| err(ln, "bad order"))?;
                order = order.max(k);
                continue;
            }
            if let Some(k) = t.strip_prefix('\\').and_then(|s| s.strip_suffix("-grams:")) {
                let k: usize = k.parse().map_err(|_| err(ln, "bad section"))?;
                if k == 0 || k > order {
                    return Err(err(ln, "section order not declared"));
                }
                if probs.len() < order {
                    probs.resize(order, HashMap::new());
                    bows.resize(order, HashMap::new());
                }
                section = Some(k);
                continue;
            }
            let k = section.ok_or_else(|| err(ln, "entry outside a section"))?;
            let f: Vec<&str> = t.split_whitespace().collect();
            if f.len() != k + 1 && f.len() != k + 2 {
                return Err(err(ln, "wrong field count"));
            }
            let p: f64 = f[0].parse().map_err(|_| err(ln, "bad probability"))?;
            let gram = f[1..=k]
                .iter()
                .map(|w| vocab.id(w).ok_or_else(|| err(ln, &format!("word `{w}` not in vocabulary"))))
                .collect::<Result<Vec<_>>>()?;
            if let Some(b) = f.get(k + 1) {
                let b: f64 = b.parse().map_err(|_| err(ln, "bad back-off"))?;
                if k < order {
                    bows[k].insert(gram.clone(), b * ln10);
                }
            }
            if !(k == 1 && gram[0] == BOS) {
                probs[k - 1].insert(gram, p * ln10);
            }
        }
        if order == 0 {
            return Err(err(0, "no \\data\\ header"));
        }
        Ok(NgramLm {
            order,
            vocab_size: vocab.len(),
            probs,
            bows,
            discounts: Vec::new(),
        })
    }
}

impl LmScorer for NgramLm {
    type State = Vec<WordId>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn zero_state(&self) -> Vec<WordId> {
        Vec::new()
    }

    fn step(&self, state: &mut Vec<WordId>, input: WordId) -> Vec<f64> {
        self.advance(state, input);
        (0..self.vocab_size as u32)
            .map(|i| self.logprob(state, WordId(i)))
            .collect()
    }

    fn step_score(&self, state: &mut Vec<WordId>, input: WordId, target: WordId) -> f64 {
        self.advance(state, input);
        self.logprob(state, target)
    }
}

impl NgramLm {
    fn advance(&self, state: &mut Vec<WordId>, input: WordId) {
        if input == BOS {
            state.clear();
        }
        state.push(input);
        let keep = self.order - 1;
        if state.len() > keep {
            state.drain(..state.len() - keep);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(lines: &[&str], order: usize, discount: Option<f64>) -> (Vocabulary, Corpus, NgramLm) {
        let v = Vocabulary::build(lines, &[]).unwrap();
        let c = Corpus::from_lines(&v, lines);
        let m = train_kn(&c, &v, KnOptions { order, discount }).unwrap();
        (v, c, m)
    }

    fn dist_sum(m: &NgramLm, ctx: &[WordId]) -> f64 {
        (1..m.vocab_size as u32)
            .map(|i| m.logprob(ctx, WordId(i)).exp())
            .sum()
    }

    #[test]
    fn counts_dominate() {
        let lines = vec!["a b"; 100];
        let (v, _, m) = lm(&lines, 3, None);
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert!(m.logprob(&[BOS, a], b) > m.logprob(&[BOS, a], a));
        assert!(m.logprob(&[a], b) > m.logprob(&[a], a));
    }

    #[test]
    fn symmetric_corpus_has_equal_continuations() {
        let lines = ["a b", "b a", "a b", "b a"];
        let (v, _, m) = lm(&lines, 2, None);
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert!((m.logprob(&[], a).exp() - m.logprob(&[], b).exp()).abs() < 1e-9);
    }

    #[test]
    fn normalized_for_random_contexts() {
        let lines = ["a b c a", "b b c", "c a b a b", "a", "d c b a"];
        let (v, _, m) = lm(&lines, 3, None);
        let ids: Vec<WordId> = (0..v.len() as u32).map(WordId).filter(|&w| w != crate::corpus::EOS).collect();
        for x in &ids {
            for y in &ids {
                if *y == BOS && *x != BOS {
                    continue;
                }
                let s = dist_sum(&m, &[*x, *y]);
                assert!((s - 1.0).abs() < 1e-6, "ctx {x} {y}: {s}");
            }
            assert!((dist_sum(&m, &[*x]) - 1.0).abs() < 1e-6);
        }
        assert!((dist_sum(&m, &[]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unseen_trigram_context_backs_off_to_bigram() {
        let lines = ["a b c", "c b a"];
        let (v, _, m) = lm(&lines, 3, None);
        let (a, b, c) = (v.id("a").unwrap(), v.id("b").unwrap(), v.id("c").unwrap());
        // [c, c] never occurs as a context.
        for w in [a, b, c] {
            assert_eq!(m.logprob(&[c, c], w), m.logprob(&[c], w));
        }
    }

    /// Hand-derived values for "a b" / "b" with D = 0.75:
    /// continuation counts a:1 b:2 </s>:1 (total 4, 3 types), floor
    /// 0.75*3/4/4 = 0.140625 over the 4 predictable ids.
    #[test]
    fn matches_hand_computed_interpolated_kn() {
        let (v, _, m) = lm(&["a b", "b"], 2, Some(0.75));
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        let eos = crate::corpus::EOS;
        let unk = crate::corpus::UNK;
        let p = |ctx: &[WordId], w| m.logprob(ctx, w).exp();
        let cases = [
            (vec![], a, 0.203125),
            (vec![], b, 0.453125),
            (vec![], eos, 0.203125),
            (vec![], unk, 0.140625),
            (vec![BOS], a, 0.27734375),
            (vec![BOS], b, 0.46484375),
            (vec![BOS], eos, 0.15234375),
            (vec![BOS], unk, 0.10546875),
            (vec![a], b, 0.58984375),
            (vec![b], eos, 0.701171875),
            (vec![b], a, 0.076171875),
        ];
        for (ctx, w, want) in cases {
            assert!((p(&ctx, w) - want).abs() < 1e-9, "{ctx:?} {w}: {} vs {want}", p(&ctx, w));
        }
    }

    #[test]
    fn bos_never_predicted() {
        let (_, _, m) = lm(&["a b"], 3, None);
        assert_eq!(m.logprob(&[], BOS), f64::NEG_INFINITY);
    }

    #[test]
    fn degenerate_counts_fall_back_to_default_discount() {
        // Every bigram/trigram is a singleton: n2 = 0.
        let (_, _, m) = lm(&["a b c"], 3, None);
        assert_eq!(m.discounts()[2], FALLBACK_DISCOUNT);
    }

    #[test]
    fn invalid_options_rejected() {
        let v = Vocabulary::build(&["a"], &[]).unwrap();
        let c = Corpus::from_lines(&v, &["a"]);
        assert!(train_kn(&c, &v, KnOptions { order: 0, discount: None }).is_err());
        assert!(train_kn(&c, &v, KnOptions { order: 2, discount: Some(1.5) }).is_err());
        assert!(matches!(
            train_kn(&Corpus::default(), &v, KnOptions::default()),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn doubling_a_sentence_doubles_its_counts() {
        let v = Vocabulary::build(&["a b c"], &[]).unwrap();
        let once = Corpus::from_lines(&v, &["a b", "b c"]);
        let twice = Corpus::from_lines(&v, &["a b", "b c", "a b"]);
        let c1 = NgramCounts::from_corpus(&once, 3);
        let c2 = NgramCounts::from_corpus(&twice, 3);
        let s = v.encode("a b");
        let t = s.tokens();
        for k in 1..=3 {
            for i in (k - 1)..t.len() {
                let g = &t[i + 1 - k..=i];
                if g == [BOS] {
                    continue;
                }
                assert!(c2.raw(g) > c1.raw(g), "{g:?}");
            }
        }
        let other = v.encode("b c");
        assert_eq!(c1.raw(&other.tokens()[1..3]), c2.raw(&other.tokens()[1..3]));
    }

    #[test]
    fn arpa_round_trip_scores_identically() {
        let lines = ["a b c a", "b b c", "c a b a b", "a", "d c b a"];
        let (v, _, m) = lm(&lines, 3, None);
        let text = m.to_arpa(&v).unwrap();
        assert!(text.contains("\\data\\\nngram 1=7\n"));
        assert!(text.contains("\\3-grams:"));
        let back = NgramLm::from_arpa(text.as_bytes(), &v).unwrap();
        assert_eq!(back.order(), 3);
        for x in 0..v.len() as u32 {
            for y in 0..v.len() as u32 {
                for w in 1..v.len() as u32 {
                    let ctx = [WordId(x), WordId(y)];
                    let (p, q) = (m.logprob(&ctx, WordId(w)), back.logprob(&ctx, WordId(w)));
                    assert!((p - q).abs() < 1e-9, "{ctx:?} {w}: {p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn arpa_rejects_unknown_words() {
        let v = Vocabulary::build(&["a"], &[]).unwrap();
        let text = "\\data\\\nngram 1=1\n\n\\1-grams:\n-1\tzzz\n\\end\\\n";
        assert!(NgramLm::from_arpa(text.as_bytes(), &v).is_err());
    }

    #[test]
    fn scorer_state_resets_at_sentence_start() {
        let (v, _, m) = lm(&["a b c", "c b a"], 3, None);
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        let mut st = m.zero_state();
        m.step_score(&mut st, BOS, a);
        m.step_score(&mut st, a, b);
        let carried = m.step(&mut st, BOS);
        let mut fresh = m.zero_state();
        assert_eq!(carried, m.step(&mut fresh, BOS));
        assert_eq!(carried[a.index()], m.logprob(&[BOS], a));
    }
}
