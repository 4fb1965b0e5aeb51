use crate::corpus::{WordId, BOS};

/// Stateful next-token distribution shared by every language model.
///
/// `step` feeds one input token and returns natural-log probabilities over
/// the whole id space for the token that follows. `<s>` always gets -inf.
pub trait LmScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn zero_state(&self) -> Self::State;

    fn step(&self, state: &mut Self::State, input: WordId) -> Vec<f64>;

    /// ln p(target | history, input); models may avoid the full distribution.
    fn step_score(&self, state: &mut Self::State, input: WordId, target: WordId) -> f64 {
        self.step(state, input)[target.index()]
    }
}

/// Every predictable token equally likely.
#[derive(Copy, Clone, Debug)]
pub struct UniformScorer {
    pub vocab_size: usize,
}

impl LmScorer for UniformScorer {
    type State = ();

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn zero_state(&self) {}

    fn step(&self, _: &mut (), _: WordId) -> Vec<f64> {
        let lp = -((self.vocab_size - 1) as f64).ln();
        let mut out = vec![lp; self.vocab_size];
        out[BOS.index()] = f64::NEG_INFINITY;
        out
    }
}
