//! Vocabulary, sentences and session-structured corpora.
//!
//! Text is tokenized by whitespace only. Every sentence is wrapped in
//! `<s>` / `</s>`; words outside the vocabulary collapse to `<unk>`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BOS_STR: &str = "<s>";
pub const EOS_STR: &str = "</s>";
pub const UNK_STR: &str = "<unk>";
/// Spelling of the empty alignment symbol in files.
pub const EPS_STR: &str = "<eps>";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WordId(pub u32);

impl WordId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for WordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub const BOS: WordId = WordId(0);
pub const EOS: WordId = WordId(1);
pub const UNK: WordId = WordId(2);
const N_RESERVED: usize = 3;

fn is_reserved_str(s: &str) -> bool {
    matches!(s, BOS_STR | EOS_STR | UNK_STR | EPS_STR)
}

/// Bidirectional word/id map.
///
/// Ids `0..len()` form the language-model output space (with `<s>` never
/// predicted). The epsilon id sits one past the end so no LM can emit it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, WordId>,
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace-tokenized lines plus extra words,
    /// ordered by first occurrence.
    pub fn build<S: AsRef<str>>(text_lines: &[S], extra_words: &[S]) -> Result<Self> {
        if text_lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let tokens = text_lines
            .iter()
            .flat_map(|l| l.as_ref().split_whitespace())
            .chain(extra_words.iter().map(|w| w.as_ref()));
        Ok(Self::from_words(tokens))
    }

    /// Vocabulary over the given words in order; duplicates and reserved
    /// spellings are skipped.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary {
            words: vec![BOS_STR.into(), EOS_STR.into(), UNK_STR.into()],
            index: HashMap::new(),
        };
        for (i, w) in v.words.iter().enumerate() {
            v.index.insert(w.clone(), WordId(i as u32));
        }
        for w in words {
            if is_reserved_str(w) || v.index.contains_key(w) {
                continue;
            }
            let id = WordId(v.words.len() as u32);
            v.words.push(w.to_string());
            v.index.insert(w.to_string(), id);
        }
        v
    }

    /// Rebuilds a vocabulary from its full word list as returned by
    /// [`Vocabulary::words`], reserved symbols first.
    pub fn from_stored(words: Vec<String>) -> Result<Self> {
        let head: Vec<&str> = words.iter().take(N_RESERVED).map(String::as_str).collect();
        if head != [BOS_STR, EOS_STR, UNK_STR] {
            return Err(Error::InvalidConfig(format!(
                "stored vocabulary must start with {BOS_STR} {EOS_STR} {UNK_STR}"
            )));
        }
        let v = Self::from_words(words[N_RESERVED..].iter().map(String::as_str));
        if v.len() != words.len() {
            return Err(Error::InvalidConfig(
                "stored vocabulary has duplicate or reserved entries".into(),
            ));
        }
        Ok(v)
    }

    /// Size of the LM id space, reserved symbols included.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == N_RESERVED
    }

    /// Number of ids an LM may predict (everything except `<s>`).
    pub fn predictable_len(&self) -> usize {
        self.words.len() - 1
    }

    pub fn epsilon(&self) -> WordId {
        WordId(self.words.len() as u32)
    }

    /// Ids of ordinary (non-reserved) words.
    pub fn regular_ids(&self) -> impl Iterator<Item = WordId> + '_ {
        (N_RESERVED as u32..self.words.len() as u32).map(WordId)
    }

    pub fn regular_len(&self) -> usize {
        self.words.len() - N_RESERVED
    }

    pub fn is_regular(&self, id: WordId) -> bool {
        id.index() >= N_RESERVED && id.index() < self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<WordId> {
        self.index.get(word).copied()
    }

    /// Lookup for interior tokens: anything unknown or reserved maps to `<unk>`.
    pub fn id_or_unk(&self, word: &str) -> WordId {
        match self.index.get(word) {
            Some(&id) if id != BOS && id != EOS => id,
            _ => UNK,
        }
    }

    pub fn word(&self, id: WordId) -> Result<&str> {
        if id == self.epsilon() {
            return Ok(EPS_STR);
        }
        self.words
            .get(id.index())
            .map(String::as_str)
            .ok_or(Error::UnknownId(id.0))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Interior word ids of a whitespace-tokenized line (no boundaries).
    pub fn encode_words(&self, line: &str) -> Vec<WordId> {
        line.split_whitespace().map(|w| self.id_or_unk(w)).collect()
    }

    pub fn encode(&self, line: &str) -> Sentence {
        Sentence::from_words(&self.encode_words(line))
    }

    pub fn decode(&self, s: &Sentence) -> Result<String> {
        self.decode_words(s.words())
    }

    pub fn decode_words(&self, ids: &[WordId]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if id.index() >= self.words.len() {
                return Err(Error::UnknownId(id.0));
            }
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&self.words[id.index()]);
        }
        Ok(out)
    }

    /// SHA-256 over the ordered word list; ties checkpoints to a vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Token ids with a leading `<s>`, trailing `</s>` and no interior boundaries.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sentence {
    tokens: Vec<WordId>,
}

impl Sentence {
    pub fn new(tokens: Vec<WordId>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidSentence("shorter than <s> </s>".into()));
        }
        if tokens[0] != BOS || tokens[tokens.len() - 1] != EOS {
            return Err(Error::InvalidSentence("missing boundary symbols".into()));
        }
        if tokens[1..tokens.len() - 1]
            .iter()
            .any(|&t| t == BOS || t == EOS)
        {
            return Err(Error::InvalidSentence("interior boundary symbol".into()));
        }
        Ok(Sentence { tokens })
    }

    /// Wraps interior words; any boundary id among them becomes `<unk>`.
    pub fn from_words(words: &[WordId]) -> Self {
        let mut tokens = Vec::with_capacity(words.len() + 2);
        tokens.push(BOS);
        tokens.extend(
            words
                .iter()
                .map(|&w| if w == BOS || w == EOS { UNK } else { w }),
        );
        tokens.push(EOS);
        Sentence { tokens }
    }

    pub fn tokens(&self) -> &[WordId] {
        &self.tokens
    }

    pub fn words(&self) -> &[WordId] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    /// Number of predicted tokens (words plus `</s>`).
    pub fn n_targets(&self) -> usize {
        self.tokens.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub range: Range<usize>,
}

/// Ordered sentences with an optional partition into contiguous sessions.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    sentences: Vec<Sentence>,
    sessions: Option<Vec<Session>>,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>) -> Self {
        Corpus {
            sentences,
            sessions: None,
        }
    }

    pub fn from_lines<S: AsRef<str>>(vocab: &Vocabulary, lines: &[S]) -> Self {
        Corpus::new(lines.iter().map(|l| vocab.encode(l.as_ref())).collect())
    }

    pub fn with_sessions(mut self, sessions: Vec<Session>) -> Result<Self> {
        let mut next = 0;
        for s in &sessions {
            if s.range.start != next || s.range.end <= s.range.start {
                return Err(Error::InvalidSessions(format!(
                    "session `{}` covers {:?}, expected to start at {next}",
                    s.id, s.range
                )));
            }
            next = s.range.end;
        }
        if next != self.sentences.len() {
            return Err(Error::InvalidSessions(format!(
                "sessions cover {next} of {} sentences",
                self.sentences.len()
            )));
        }
        self.sessions = Some(sessions);
        Ok(self)
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sessions(&self) -> Option<&[Session]> {
        self.sessions.as_deref()
    }

    /// Session ranges; a corpus without sessions is one stream.
    pub fn session_ranges(&self) -> Vec<Range<usize>> {
        match &self.sessions {
            Some(s) => s.iter().map(|s| s.range.clone()).collect(),
            None if self.sentences.is_empty() => Vec::new(),
            None => std::iter::once(0..self.sentences.len()).collect(),
        }
    }

    pub fn n_targets(&self) -> usize {
        self.sentences.iter().map(Sentence::n_targets).sum()
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::to_string)
        .collect())
}

/// Parses `<session_id> <first_line_index> <last_line_index>` lines
/// (0-based, inclusive).
pub fn parse_sessions(text: &str) -> Result<Vec<Session>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse("sessions", n + 1, "expected 3 fields"));
        }
        let idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::parse("sessions", n + 1, e.to_string()))
        };
        let (first, last) = (idx(fields[1])?, idx(fields[2])?);
        if last < first {
            return Err(Error::parse("sessions", n + 1, "last index before first"));
        }
        out.push(Session {
            id: fields[0].to_string(),
            range: first..last + 1,
        });
    }
    Ok(out)
}

pub fn format_sessions(sessions: &[Session]) -> String {
    sessions
        .iter()
        .map(|s| format!("{} {} {}\n", s.id, s.range.start, s.range.end - 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn salad() -> Vocabulary {
        Vocabulary::build(&["it's good salad"], &[]).unwrap()
    }

    #[test]
    fn build_vocab_counts_reserved_and_words() {
        let v = salad();
        assert_eq!(v.len(), 6);
        assert_eq!(v.regular_len(), 3);
        assert_eq!(v.id("it's"), Some(WordId(3)));
        assert_eq!(v.id(BOS_STR), Some(BOS));
        assert_eq!(v.id(EOS_STR), Some(EOS));
        assert_eq!(v.id(UNK_STR), Some(UNK));
    }

    #[test]
    fn build_vocab_rejects_empty_input() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            Vocabulary::build(&empty, &empty),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn build_vocab_dedups() {
        let v = Vocabulary::build(&["a a a"], &[]).unwrap();
        assert_eq!(v.regular_len(), 1);
    }

    #[test]
    fn extra_words_extend_vocab() {
        let v = Vocabulary::build(&["a b"], &["c", "a", "<s>"]).unwrap();
        assert_eq!(v.regular_len(), 3);
        assert_eq!(v.id("c"), Some(WordId(5)));
    }

    #[test]
    fn epsilon_outside_lm_space() {
        let v = salad();
        assert_eq!(v.epsilon().index(), v.len());
        assert!(!v.is_regular(v.epsilon()));
        assert_eq!(v.word(v.epsilon()).unwrap(), EPS_STR);
    }

    #[test]
    fn encode_wraps_and_maps_unknowns() {
        let v = salad();
        let s = v.encode("it's good salad");
        assert_eq!(
            s.tokens(),
            &[BOS, WordId(3), WordId(4), WordId(5), EOS]
        );
        assert_eq!(v.encode("").tokens(), &[BOS, EOS]);
        assert_eq!(v.encode("zzz-unseen").tokens(), &[BOS, UNK, EOS]);
    }

    #[test]
    fn literal_boundaries_inside_line_become_unk() {
        let v = salad();
        let s = v.encode("<s> good </s> <eps>");
        assert_eq!(s.tokens(), &[BOS, UNK, WordId(4), UNK, UNK, EOS]);
    }

    #[test]
    fn decode_round_trip_and_errors() {
        let v = salad();
        assert_eq!(v.decode(&v.encode("it's good salad")).unwrap(), "it's good salad");
        assert_eq!(v.decode(&v.encode("")).unwrap(), "");
        let bad = Sentence::from_words(&[WordId(u32::MAX)]);
        assert!(matches!(v.decode(&bad), Err(Error::UnknownId(u32::MAX))));
    }

    #[test]
    fn sentence_invariants_enforced() {
        assert!(Sentence::new(vec![BOS]).is_err());
        assert!(Sentence::new(vec![BOS, BOS, EOS]).is_err());
        assert!(Sentence::new(vec![UNK, EOS]).is_err());
        assert!(Sentence::new(vec![BOS, UNK, EOS]).is_ok());
    }

    #[test]
    fn sessions_must_partition() {
        let v = salad();
        let c = Corpus::from_lines(&v, &["a", "b", "c"]);
        let ok = parse_sessions("S1 0 1\nS2 2 2\n").unwrap();
        let c2 = c.clone().with_sessions(ok.clone()).unwrap();
        assert_eq!(c2.session_ranges(), vec![0..2, 2..3]);
        assert_eq!(format_sessions(&ok), "S1 0 1\nS2 2 2\n");

        let gap = parse_sessions("S1 0 0\nS2 2 2\n").unwrap();
        assert!(c.clone().with_sessions(gap).is_err());
        let short = parse_sessions("S1 0 1\n").unwrap();
        assert!(c.clone().with_sessions(short).is_err());
        assert!(parse_sessions("S1 3 1").is_err());
        assert!(parse_sessions("S1 x 1").is_err());
        assert_eq!(c.session_ranges(), vec![0..3]);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(idx in prop::collection::vec(0usize..5, 0..12)) {
            let words = ["alpha", "beta", "gamma", "it's", "x-y"];
            let v = Vocabulary::build(&[words.join(" ")], &[]).unwrap();
            let line = idx.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(v.decode(&v.encode(&line)).unwrap(), line);
        }

        #[test]
        fn encode_never_emits_interior_boundaries(
            toks in prop::collection::vec(prop::sample::select(vec!["<s>", "</s>", "a", "b", "<unk>", "q"]), 0..10)
        ) {
            let v = Vocabulary::build(&["a b"], &[]).unwrap();
            let s = v.encode(&toks.join(" "));
            prop_assert!(Sentence::new(s.tokens().to_vec()).is_ok());
            prop_assert_eq!(s.words().len(), toks.len());
        }
    }
}
