//! Error-simulating channels and the input/target corruption procedures.
//!
//! A sentence `<s> w1 .. wn </s>` is turned into aligned (input, target)
//! pairs for next-word training. Input corruption edits the history the
//! model sees; target corruption edits what it must predict. Sentence
//! boundaries are never substituted, deleted or inserted.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::align::{ConfusionTable, Sym};
use crate::corpus::{Sentence, Vocabulary, WordId, BOS, EOS};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum EditAction {
    Keep,
    Substitute(WordId),
    Delete,
    /// The word is inserted before the current token, which is kept.
    Insert(WordId),
}

/// Inverse-CDF sampler over a fixed outcome list.
#[derive(Clone, Debug)]
struct Categorical<T> {
    outcomes: Vec<T>,
    cumulative: Vec<f64>,
}

impl<T: Copy> Categorical<T> {
    fn new(pairs: impl IntoIterator<Item = (T, f64)>) -> Option<Self> {
        let mut outcomes = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (o, p) in pairs {
            if p > 0.0 {
                acc += p;
                outcomes.push(o);
                cumulative.push(acc);
            }
        }
        if outcomes.is_empty() {
            return None;
        }
        for c in &mut cumulative {
            *c /= acc;
        }
        Some(Categorical {
            outcomes,
            cumulative,
        })
    }

    fn sample(&self, rng: &mut Rng) -> T {
        let u: f64 = rng.random();
        let i = self.cumulative.partition_point(|&c| c <= u);
        self.outcomes[i.min(self.outcomes.len() - 1)]
    }
}

/// Context-free four-way dice; replacements uniform over regular words.
#[derive(Clone, Debug)]
pub struct ZeroGramChannel {
    pub p_keep: f64,
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    replacements: Vec<WordId>,
}

impl ZeroGramChannel {
    pub fn new(vocab: &Vocabulary, p_sub: f64, p_del: f64, p_ins: f64) -> Result<Self> {
        let rates = [p_sub, p_del, p_ins];
        if rates.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidChannel(format!(
                "rates must be non-negative, got {rates:?}"
            )));
        }
        let p_keep = 1.0 - (p_sub + p_del + p_ins);
        if p_keep < -1e-12 {
            return Err(Error::InvalidChannel(format!(
                "rates sum to {} > 1",
                p_sub + p_del + p_ins
            )));
        }
        let replacements: Vec<WordId> = vocab.regular_ids().collect();
        if replacements.is_empty() && p_keep < 1.0 {
            return Err(Error::InvalidChannel("no regular words to sample".into()));
        }
        Ok(ZeroGramChannel {
            p_keep: p_keep.max(0.0),
            p_sub,
            p_del,
            p_ins,
            replacements,
        })
    }

    pub fn identity(vocab: &Vocabulary) -> Self {
        Self::new(vocab, 0.0, 0.0, 0.0).expect("zero rates are valid")
    }

    fn uniform_word(&self, rng: &mut Rng) -> WordId {
        self.replacements[rng.random_range(0..self.replacements.len())]
    }

    pub fn sample_edit(&self, rng: &mut Rng) -> EditAction {
        let u: f64 = rng.random();
        if u < self.p_keep {
            EditAction::Keep
        } else if u < self.p_keep + self.p_sub {
            EditAction::Substitute(self.uniform_word(rng))
        } else if u < self.p_keep + self.p_sub + self.p_del {
            EditAction::Delete
        } else {
            EditAction::Insert(self.uniform_word(rng))
        }
    }

    pub fn sample_insertion(&self, rng: &mut Rng) -> Option<WordId> {
        let u: f64 = rng.random();
        (u < self.p_ins).then(|| self.uniform_word(rng))
    }
}

/// Per-word action distributions from a confusion table, with ε treated as
/// an ordinary symbol: a row outcome of ε deletes, the ε row drives insertions.
#[derive(Clone, Debug)]
pub struct UnigramChannel {
    rows: HashMap<WordId, Categorical<EditAction>>,
    pub ins_rate: f64,
    ins_dist: Option<Categorical<WordId>>,
}

impl UnigramChannel {
    /// `ins_rate` defaults to the table's observed insertions per slot.
    pub fn new(table: &ConfusionTable, ins_rate: Option<f64>) -> Result<Self> {
        let mut rows = HashMap::new();
        for (&from, row) in &table.rows {
            let Sym::Word(w) = from else { continue };
            let sum: f64 = row.values().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidChannel(format!(
                    "row {w} sums to {sum}"
                )));
            }
            let actions = row.iter().map(|(&to, &p)| {
                let a = match to {
                    Sym::Eps => EditAction::Delete,
                    Sym::Word(x) if x == w => EditAction::Keep,
                    Sym::Word(x) => EditAction::Substitute(x),
                };
                (a, p)
            });
            if let Some(c) = Categorical::new(actions) {
                rows.insert(w, c);
            }
        }
        for c in rows.values() {
            for a in &c.outcomes {
                if let EditAction::Substitute(x) = a {
                    if *x == BOS || *x == EOS {
                        return Err(Error::InvalidChannel("boundary symbol as outcome".into()));
                    }
                }
            }
        }
        let ins_dist = table.row(Sym::Eps).and_then(|r| {
            Categorical::new(r.iter().filter_map(|(&to, &p)| match to {
                Sym::Word(x) if x != BOS && x != EOS => Some((x, p)),
                _ => None,
            }))
        });
        let ins_rate = match ins_dist {
            None => 0.0,
            Some(_) => ins_rate.unwrap_or_else(|| table.counts.insertion_rate()),
        };
        if !(0.0..1.0).contains(&ins_rate) {
            return Err(Error::InvalidChannel(format!(
                "insertion rate {ins_rate} outside [0, 1)"
            )));
        }
        Ok(UnigramChannel {
            rows,
            ins_rate,
            ins_dist,
        })
    }

    fn sample_insertion(&self, rng: &mut Rng) -> Option<WordId> {
        let dist = self.ins_dist.as_ref()?;
        let u: f64 = rng.random();
        (u < self.ins_rate).then(|| dist.sample(rng))
    }

    /// Insertion is decided first; otherwise the token's row decides.
    /// Words without a row are kept.
    pub fn sample_edit(&self, token: WordId, rng: &mut Rng) -> EditAction {
        if let Some(x) = self.sample_insertion(rng) {
            return EditAction::Insert(x);
        }
        match self.rows.get(&token) {
            Some(row) => row.sample(rng),
            None => EditAction::Keep,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Channel {
    ZeroGram(ZeroGramChannel),
    Unigram(UnigramChannel),
}

impl Channel {
    /// Action for an interior token. Boundary tokens are never passed here.
    pub fn sample_edit(&self, token: WordId, rng: &mut Rng) -> EditAction {
        debug_assert!(token != BOS && token != EOS);
        match self {
            Channel::ZeroGram(c) => c.sample_edit(rng),
            Channel::Unigram(c) => c.sample_edit(token, rng),
        }
    }

    /// Possible insertion in the slot before `</s>`.
    pub fn sample_insertion(&self, rng: &mut Rng) -> Option<WordId> {
        match self {
            Channel::ZeroGram(c) => c.sample_insertion(rng),
            Channel::Unigram(c) => c.sample_insertion(rng),
        }
    }
}

/// Aligned training pair after corruption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptedPair {
    pub inputs: Vec<WordId>,
    pub targets: Vec<WordId>,
    /// (position in the clean sentence, action). Interior positions log
    /// every action including `Keep`; the `</s>` slot logs insertions only.
    pub edit_log: Vec<(usize, EditAction)>,
    /// Insertion slots visited (interior tokens plus the `</s>` slot).
    pub slots: usize,
}

impl CorruptedPair {
    fn push(&mut self, input: WordId, target: WordId) {
        self.inputs.push(input);
        self.targets.push(target);
    }

    fn empty(capacity: usize) -> Self {
        CorruptedPair {
            inputs: Vec::with_capacity(capacity),
            targets: Vec::with_capacity(capacity),
            edit_log: Vec::new(),
            slots: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// The standard next-word shift without any edits.
pub fn clean_pair(s: &Sentence) -> CorruptedPair {
    let t = s.tokens();
    CorruptedPair {
        inputs: t[..t.len() - 1].to_vec(),
        targets: t[1..].to_vec(),
        edit_log: Vec::new(),
        slots: 0,
    }
}

/// Corrupts the history: substitutions replace the input token only,
/// deletions drop the word from both streams, insertions feed an extra
/// input whose target repeats the upcoming clean word.
pub fn corrupt_for_input(s: &Sentence, channel: &Channel, rng: &mut Rng) -> CorruptedPair {
    let tokens = s.tokens();
    if s.words().is_empty() {
        return clean_pair(s);
    }
    let mut out = CorruptedPair::empty(tokens.len() + 4);
    let mut last_input = BOS;
    let last = tokens.len() - 1;
    for (j, &w) in tokens.iter().enumerate().skip(1) {
        out.slots += 1;
        let action = if j == last {
            match channel.sample_insertion(rng) {
                Some(x) => EditAction::Insert(x),
                None => {
                    out.push(last_input, w);
                    break;
                }
            }
        } else {
            channel.sample_edit(w, rng)
        };
        out.edit_log.push((j, action));
        match action {
            EditAction::Keep => {
                out.push(last_input, w);
                last_input = w;
            }
            EditAction::Substitute(x) => {
                out.push(last_input, w);
                last_input = x;
            }
            EditAction::Delete => {}
            EditAction::Insert(x) => {
                out.push(last_input, w);
                out.push(x, w);
                last_input = w;
            }
        }
    }
    out
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetMode {
    /// Substitutions only.
    S,
    /// Substitutions, deletions and insertions.
    SDI,
}

/// Corrupts what is predicted while the history stays clean.
///
/// Substitution replaces the target. In `SDI` mode a deletion drops the
/// (input, target) pair at that position (when the input would be `<s>`
/// the word is dropped from both streams instead so `<s>` stays first),
/// and an insertion repeats the input while the sampled word becomes an
/// extra target (skipped when the input is `<s>`). In `S` mode deletions
/// and insertions are ignored.
pub fn corrupt_for_target(
    s: &Sentence,
    channel: &Channel,
    rng: &mut Rng,
    mode: TargetMode,
) -> CorruptedPair {
    let tokens = s.tokens();
    if s.words().is_empty() {
        return clean_pair(s);
    }
    let mut out = CorruptedPair::empty(tokens.len() + 4);
    let last = tokens.len() - 1;
    let mut prev = BOS;
    // Set when a word was dropped right after <s>; the next pair keeps <s>.
    let mut carry_bos = false;
    for (j, &w) in tokens.iter().enumerate().skip(1) {
        out.slots += 1;
        let input = if carry_bos { BOS } else { prev };
        let sampled = if j == last {
            channel.sample_insertion(rng).map(EditAction::Insert)
        } else {
            Some(channel.sample_edit(w, rng))
        };
        let action = match (mode, sampled) {
            (_, None) => {
                out.push(input, w);
                break;
            }
            (TargetMode::S, Some(EditAction::Delete | EditAction::Insert(_))) => EditAction::Keep,
            // Repeating <s> as an input would introduce a boundary.
            (TargetMode::SDI, Some(EditAction::Insert(_))) if input == BOS => EditAction::Keep,
            (_, Some(a)) => a,
        };
        if j != last || action != EditAction::Keep {
            out.edit_log.push((j, action));
        }
        carry_bos = false;
        match action {
            EditAction::Keep => out.push(input, w),
            EditAction::Substitute(x) => out.push(input, x),
            EditAction::Delete if input == BOS => carry_bos = true,
            EditAction::Delete => {}
            EditAction::Insert(x) => {
                out.push(input, x);
                out.push(input, w);
            }
        }
        prev = w;
    }
    out
}

/// Running tallies of applied edits.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EditStats {
    pub slots: u64,
    pub interior: u64,
    pub keep: u64,
    pub sub: u64,
    pub del: u64,
    pub ins: u64,
}

impl EditStats {
    pub fn add(&mut self, pair: &CorruptedPair) {
        if pair.slots == 0 {
            return;
        }
        self.slots += pair.slots as u64;
        self.interior += pair.slots as u64 - 1;
        for (_, a) in &pair.edit_log {
            match a {
                EditAction::Keep => self.keep += 1,
                EditAction::Substitute(_) => self.sub += 1,
                EditAction::Delete => self.del += 1,
                EditAction::Insert(_) => self.ins += 1,
            }
        }
    }

    pub fn sub_rate(&self) -> f64 {
        ratio(self.sub, self.interior)
    }

    pub fn del_rate(&self) -> f64 {
        ratio(self.del, self.interior)
    }

    pub fn ins_rate(&self) -> f64 {
        ratio(self.ins, self.slots)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Channel section of the experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ChannelConfig {
    Zerogram {
        #[serde(default)]
        p_sub: f64,
        #[serde(default)]
        p_del: f64,
        #[serde(default)]
        p_ins: f64,
    },
    Unigram {
        table: PathBuf,
        #[serde(default)]
        ins_rate: Option<f64>,
    },
}

impl ChannelConfig {
    pub fn build(&self, vocab: &Vocabulary) -> Result<Channel> {
        match self {
            ChannelConfig::Zerogram { p_sub, p_del, p_ins } => Ok(Channel::ZeroGram(
                ZeroGramChannel::new(vocab, *p_sub, *p_del, *p_ins)?,
            )),
            ChannelConfig::Unigram { table, ins_rate } => {
                let f = File::open(table)?;
                let t = ConfusionTable::from_tsv(BufReader::new(f), vocab)?;
                Ok(Channel::Unigram(UnigramChannel::new(&t, *ins_rate)?))
            }
        }
    }
}
