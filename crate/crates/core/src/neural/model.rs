use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::linalg::{dot, gemm, gemv_add, log_softmax, log_softmax_probs, sigmoid, MatRef};
use crate::corpus::{WordId, BOS};
use crate::error::{Error, Result};
use crate::noise::CorruptedPair;
use crate::rng::Rng;
use crate::scorer::LmScorer;

const INIT_RANGE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmConfig {
    pub vocab_size: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub label_smoothing: f64,
}

fn default_embed() -> usize {
    100
}
fn default_hidden() -> usize {
    64
}
fn default_layers() -> usize {
    2
}

impl LstmConfig {
    pub fn new(vocab_size: usize) -> Self {
        LstmConfig {
            vocab_size,
            embed_dim: default_embed(),
            hidden_dim: default_hidden(),
            layers: default_layers(),
            dropout: 0.0,
            label_smoothing: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} < 4", self.vocab_size));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(0.0..=0.7).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 0.7]", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }

    /// Output rows cover every id except `<s>`.
    pub fn n_outputs(&self) -> usize {
        self.vocab_size - 1
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug)]
struct Layout {
    emb: usize,
    weight: Vec<usize>,
    bias: Vec<usize>,
    out_w: usize,
    out_b: usize,
    total: usize,
    tensors: Vec<TensorInfo>,
}

impl Layout {
    fn new(cfg: &LstmConfig) -> Self {
        let mut tensors = Vec::new();
        let mut off = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let t = TensorInfo {
                name,
                offset: off,
                shape,
            };
            off += t.len();
            tensors.push(t);
            off - tensors.last().unwrap().len()
        };
        let (h, v) = (cfg.hidden_dim, cfg.vocab_size);
        let emb = add("embedding".into(), vec![v, cfg.embed_dim]);
        let mut weight = Vec::new();
        let mut bias = Vec::new();
        for l in 0..cfg.layers {
            weight.push(add(format!("lstm{l}.weight"), vec![4 * h, cfg.layer_input(l) + h]));
            bias.push(add(format!("lstm{l}.bias"), vec![4 * h]));
        }
        let out_w = add("output.weight".into(), vec![cfg.n_outputs(), h]);
        let out_b = add("output.bias".into(), vec![cfg.n_outputs()]);
        Layout {
            emb,
            weight,
            bias,
            out_w,
            out_b,
            total: off,
            tensors,
        }
    }
}

/// Recurrent (hidden, cell) activations per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(cfg: &LstmConfig) -> Self {
        LstmState {
            h: vec![vec![0.0; cfg.hidden_dim]; cfg.layers],
            c: vec![vec![0.0; cfg.hidden_dim]; cfg.layers],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.h.iter().chain(&self.c).all(|v| v.iter().all(|&x| x == 0.0))
    }
}

/// Multi-layer LSTM language model with all parameters in one flat buffer.
#[derive(Clone, Debug)]
pub struct LstmLm {
    cfg: LstmConfig,
    layout: Layout,
    pub(crate) params: Vec<f64>,
}

/// Flat gradient buffer laid out like [`LstmLm::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

impl LstmLm {
    /// Uniform U[-0.1, 0.1] initialization.
    pub fn new(cfg: LstmConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let params = (0..layout.total)
            .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        Ok(LstmLm {
            cfg,
            layout,
            params,
        })
    }

    pub fn from_params(cfg: LstmConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(LstmLm {
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(vec![0.0; self.layout.total])
    }

    fn embedding(&self, w: WordId) -> &[f64] {
        let e = self.cfg.embed_dim;
        let off = self.layout.emb + w.index() * e;
        &self.params[off..off + e]
    }

    fn weight(&self, l: usize) -> &[f64] {
        let h = self.cfg.hidden_dim;
        let n = 4 * h * (self.cfg.layer_input(l) + h);
        &self.params[self.layout.weight[l]..self.layout.weight[l] + n]
    }

    fn bias(&self, l: usize) -> &[f64] {
        let n = 4 * self.cfg.hidden_dim;
        &self.params[self.layout.bias[l]..self.layout.bias[l] + n]
    }

    fn out_weight(&self) -> &[f64] {
        let n = self.cfg.n_outputs() * self.cfg.hidden_dim;
        &self.params[self.layout.out_w..self.layout.out_w + n]
    }

    fn out_bias(&self) -> &[f64] {
        &self.params[self.layout.out_b..self.layout.out_b + self.cfg.n_outputs()]
    }

    fn dropout_mask(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        let p = self.cfg.dropout;
        let keep = 1.0 / (1.0 - p);
        (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect()
    }

    /// Feeds one token. Returns log-probabilities over all ids (`<s>` gets
    /// -inf) and the next state. Dropout touches only non-recurrent
    /// connections and is active only when `dropout` carries an RNG.
    pub fn forward_step(
        &self,
        state: &LstmState,
        input: WordId,
        mut dropout: Option<&mut Rng>,
    ) -> (Vec<f64>, LstmState) {
        let cfg = &self.cfg;
        let h = cfg.hidden_dim;
        let use_dropout = cfg.dropout > 0.0;
        let mut next = state.clone();
        let mut x = self.embedding(input).to_vec();
        let mut z = vec![0.0; 4 * h];
        let mut xh = Vec::with_capacity(cfg.embed_dim.max(h) + h);
        for l in 0..cfg.layers {
            if let (true, Some(rng)) = (use_dropout, dropout.as_deref_mut()) {
                let m = self.dropout_mask(x.len(), rng);
                x.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
            }
            xh.clear();
            xh.extend_from_slice(&x);
            xh.extend_from_slice(&state.h[l]);
            z.copy_from_slice(self.bias(l));
            gemv_add(self.weight(l), &xh, &mut z);
            let (c_new, h_new) = (&mut next.c[l], &mut next.h[l]);
            for j in 0..h {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[h + j]);
                let g = z[2 * h + j].tanh();
                let o = sigmoid(z[3 * h + j]);
                c_new[j] = f * state.c[l][j] + i * g;
                h_new[j] = o * c_new[j].tanh();
            }
            x.clear();
            x.extend_from_slice(h_new);
        }
        if let (true, Some(rng)) = (use_dropout, dropout) {
            let m = self.dropout_mask(x.len(), rng);
            x.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
        }
        let mut logits = self.out_bias().to_vec();
        gemv_add(self.out_weight(), &x, &mut logits);
        log_softmax(&mut logits);
        let mut out = Vec::with_capacity(cfg.vocab_size);
        out.push(f64::NEG_INFINITY);
        out.extend_from_slice(&logits);
        (out, next)
    }
}

impl LmScorer for LstmLm {
    type State = LstmState;

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn zero_state(&self) -> LstmState {
        LstmState::zeros(&self.cfg)
    }

    fn step(&self, state: &mut LstmState, input: WordId) -> Vec<f64> {
        let (lp, next) = self.forward_step(state, input, None);
        *state = next;
        lp
    }
}

/// Activations of one layer at one time step, one row per active sequence.
struct LayerStep {
    /// `[x; h_prev]` rows after dropout on `x`.
    xh: Vec<f64>,
    x_mask: Option<Vec<f64>>,
    c_prev: Vec<f64>,
    /// Gate activations in `i, f, g, o` order.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// One time step of a batch. Sequences are sorted by decreasing length,
/// so the active ones are always the first `n` rows.
struct BatchStep {
    n: usize,
    inputs: Vec<WordId>,
    layers: Vec<LayerStep>,
    top: Vec<f64>,
    top_mask: Option<Vec<f64>>,
    logp: Vec<f64>,
    probs: Vec<f64>,
}

struct BatchForward {
    /// Sorted row -> position in the caller's batch.
    order: Vec<usize>,
    steps: Vec<BatchStep>,
    /// Final states per layer, `rows x H` in sorted order.
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

impl BatchForward {
    fn final_states(&self, cfg: &LstmConfig) -> Vec<LstmState> {
        let hd = cfg.hidden_dim;
        let mut out = vec![LstmState::zeros(cfg); self.order.len()];
        for (r, &i) in self.order.iter().enumerate() {
            for l in 0..cfg.layers {
                out[i].h[l].copy_from_slice(&self.h[l][r * hd..(r + 1) * hd]);
                out[i].c[l].copy_from_slice(&self.c[l][r * hd..(r + 1) * hd]);
            }
        }
        out
    }
}

/// Result of a forward/backward pass over a batch of pairs.
pub struct BatchOutcome {
    /// Summed per-token loss.
    pub loss_sum: f64,
    pub tokens: usize,
    /// Gradient of `loss_sum / tokens`.
    pub grads: Gradients,
    pub final_states: Vec<LstmState>,
}

fn mask_in_place(v: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        v.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
    }
}

/// Adds the column sums of the `n x cols` matrix `d` to `g`.
fn add_column_sums(d: &[f64], cols: usize, g: &mut [f64]) {
    for row in d.chunks_exact(cols) {
        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
}

impl LstmLm {
    fn forward_batch(
        &self,
        inputs: &[&[WordId]],
        states: Option<&[LstmState]>,
        mut dropout: Option<&mut Rng>,
    ) -> BatchForward {
        let cfg = &self.cfg;
        let (hd, e, nout) = (cfg.hidden_dim, cfg.embed_dim, cfg.n_outputs());
        let b = inputs.len();
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(inputs[i].len()));
        let t_max = order.first().map_or(0, |&i| inputs[i].len());
        let mut hs = vec![vec![0.0; b * hd]; cfg.layers];
        let mut cs = vec![vec![0.0; b * hd]; cfg.layers];
        if let Some(st) = states {
            for (r, &i) in order.iter().enumerate() {
                for l in 0..cfg.layers {
                    hs[l][r * hd..(r + 1) * hd].copy_from_slice(&st[i].h[l]);
                    cs[l][r * hd..(r + 1) * hd].copy_from_slice(&st[i].c[l]);
                }
            }
        }
        let use_dropout = cfg.dropout > 0.0 && dropout.is_some();
        let mut draw_mask = |len: usize| {
            if use_dropout {
                Some(self.dropout_mask(len, dropout.as_deref_mut().unwrap()))
            } else {
                None
            }
        };
        let mut steps = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let n = order.iter().take_while(|&&i| inputs[i].len() > t).count();
            let step_inputs: Vec<WordId> = order[..n].iter().map(|&i| inputs[i][t]).collect();
            let mut x = Vec::with_capacity(n * e);
            for &w in &step_inputs {
                x.extend_from_slice(self.embedding(w));
            }
            let mut layers = Vec::with_capacity(cfg.layers);
            for l in 0..cfg.layers {
                let n_in = cfg.layer_input(l);
                let k = n_in + hd;
                let x_mask = draw_mask(n * n_in);
                mask_in_place(&mut x, &x_mask);
                let mut xh = vec![0.0; n * k];
                for r in 0..n {
                    xh[r * k..r * k + n_in].copy_from_slice(&x[r * n_in..(r + 1) * n_in]);
                    xh[r * k + n_in..(r + 1) * k].copy_from_slice(&hs[l][r * hd..(r + 1) * hd]);
                }
                let mut gates = self.bias(l).repeat(n);
                gemm(
                    MatRef::new(&xh, n, k),
                    MatRef::new(self.weight(l), 4 * hd, k).t(),
                    1.0,
                    &mut gates,
                );
                let c_prev = cs[l][..n * hd].to_vec();
                let mut tanh_c = vec![0.0; n * hd];
                for r in 0..n {
                    let g = &mut gates[r * 4 * hd..(r + 1) * 4 * hd];
                    for j in 0..hd {
                        let idx = r * hd + j;
                        g[j] = sigmoid(g[j]);
                        g[hd + j] = sigmoid(g[hd + j]);
                        g[2 * hd + j] = g[2 * hd + j].tanh();
                        g[3 * hd + j] = sigmoid(g[3 * hd + j]);
                        let c = g[hd + j] * c_prev[idx] + g[j] * g[2 * hd + j];
                        cs[l][idx] = c;
                        tanh_c[idx] = c.tanh();
                        hs[l][idx] = g[3 * hd + j] * tanh_c[idx];
                    }
                }
                x = hs[l][..n * hd].to_vec();
                layers.push(LayerStep {
                    xh,
                    x_mask,
                    c_prev,
                    gates,
                    tanh_c,
                });
            }
            let top_mask = draw_mask(n * hd);
            mask_in_place(&mut x, &top_mask);
            let mut logits = self.out_bias().repeat(n);
            gemm(
                MatRef::new(&x, n, hd),
                MatRef::new(self.out_weight(), nout, hd).t(),
                1.0,
                &mut logits,
            );
            let mut logp = vec![0.0; n * nout];
            let mut probs = vec![0.0; n * nout];
            for ((z, lp), p) in logits
                .chunks_exact(nout)
                .zip(logp.chunks_exact_mut(nout))
                .zip(probs.chunks_exact_mut(nout))
            {
                log_softmax_probs(z, lp, p);
            }
            steps.push(BatchStep {
                n,
                inputs: step_inputs,
                layers,
                top: x,
                top_mask,
                logp,
                probs,
            });
        }
        BatchForward {
            order,
            steps,
            h: hs,
            c: cs,
        }
    }

    /// Log-probabilities of `pair.targets` through the batched (training)
    /// forward path, without dropout.
    pub fn score_pair(&self, state: &LstmState, pair: &CorruptedPair) -> (Vec<f64>, LstmState) {
        let fwd = self.forward_batch(&[&pair.inputs], Some(std::slice::from_ref(state)), None);
        let nout = self.cfg.n_outputs();
        let lp = fwd
            .steps
            .iter()
            .zip(&pair.targets)
            .map(|(s, t)| s.logp[t.index() - 1])
            .collect();
        let st = fwd.final_states(&self.cfg).pop().expect("one sequence");
        debug_assert!(fwd.steps.iter().all(|s| s.logp.len() == nout));
        (lp, st)
    }

    /// Accumulates `scale` times the gradient of the summed loss into `g`
    /// and returns the summed loss.
    fn backward_batch(&self, fwd: &BatchForward, targets: &[&[WordId]], eps: f64, scale: f64, g: &mut Gradients) -> f64 {
        let cfg = &self.cfg;
        let (hd, e, nout) = (cfg.hidden_dim, cfg.embed_dim, cfg.n_outputs());
        let lay = &self.layout;
        let b = fwd.order.len();
        let uniform = eps / nout as f64;
        let mut loss = 0.0;
        let mut dh_rec = vec![vec![0.0; b * hd]; cfg.layers];
        let mut dc_rec = vec![vec![0.0; b * hd]; cfg.layers];
        // Factors of the weight gradients, multiplied out once at the end.
        let mut all_dlogits = Vec::new();
        let mut all_top = Vec::new();
        let mut all_dz = vec![Vec::new(); cfg.layers];
        let mut all_xh = vec![Vec::new(); cfg.layers];
        for (t, step) in fwd.steps.iter().enumerate().rev() {
            let n = step.n;
            let mut dlogits = vec![0.0; n * nout];
            for r in 0..n {
                let target = targets[fwd.order[r]][t];
                debug_assert!(target != BOS);
                let tgt = target.index() - 1;
                let row = r * nout..(r + 1) * nout;
                for (k, ((d, &lp), &p)) in dlogits[row.clone()]
                    .iter_mut()
                    .zip(&step.logp[row.clone()])
                    .zip(&step.probs[row])
                    .enumerate()
                {
                    let q = uniform + if k == tgt { 1.0 - eps } else { 0.0 };
                    if q > 0.0 {
                        loss -= q * lp;
                    }
                    *d = (p - q) * scale;
                }
            }
            add_column_sums(&dlogits, nout, &mut g.0[lay.out_b..lay.out_b + nout]);
            let mut dh_above = vec![0.0; n * hd];
            gemm(
                MatRef::new(&dlogits, n, nout),
                MatRef::new(self.out_weight(), nout, hd),
                0.0,
                &mut dh_above,
            );
            mask_in_place(&mut dh_above, &step.top_mask);
            all_dlogits.extend_from_slice(&dlogits);
            all_top.extend_from_slice(&step.top);
            for l in (0..cfg.layers).rev() {
                let ls = &step.layers[l];
                let n_in = cfg.layer_input(l);
                let k = n_in + hd;
                let mut dz = vec![0.0; n * 4 * hd];
                for r in 0..n {
                    let gt = &ls.gates[r * 4 * hd..(r + 1) * 4 * hd];
                    let d = &mut dz[r * 4 * hd..(r + 1) * 4 * hd];
                    for j in 0..hd {
                        let idx = r * hd + j;
                        let (i, f, gg, o) = (gt[j], gt[hd + j], gt[2 * hd + j], gt[3 * hd + j]);
                        let tc = ls.tanh_c[idx];
                        let dh = dh_above[idx] + dh_rec[l][idx];
                        let dc = dh * o * (1.0 - tc * tc) + dc_rec[l][idx];
                        d[j] = dc * gg * i * (1.0 - i);
                        d[hd + j] = dc * ls.c_prev[idx] * f * (1.0 - f);
                        d[2 * hd + j] = dc * i * (1.0 - gg * gg);
                        d[3 * hd + j] = dh * tc * o * (1.0 - o);
                        dc_rec[l][idx] = dc * f;
                    }
                }
                add_column_sums(&dz, 4 * hd, &mut g.0[lay.bias[l]..lay.bias[l] + 4 * hd]);
                let mut dxh = vec![0.0; n * k];
                gemm(
                    MatRef::new(&dz, n, 4 * hd),
                    MatRef::new(self.weight(l), 4 * hd, k),
                    0.0,
                    &mut dxh,
                );
                all_dz[l].extend_from_slice(&dz);
                all_xh[l].extend_from_slice(&ls.xh);
                let mut dx = vec![0.0; n * n_in];
                for r in 0..n {
                    dh_rec[l][r * hd..(r + 1) * hd].copy_from_slice(&dxh[r * k + n_in..(r + 1) * k]);
                    dx[r * n_in..(r + 1) * n_in].copy_from_slice(&dxh[r * k..r * k + n_in]);
                }
                mask_in_place(&mut dx, &ls.x_mask);
                if l == 0 {
                    for (w, d) in step.inputs.iter().zip(dx.chunks_exact(e)) {
                        let off = lay.emb + w.index() * e;
                        g.0[off..off + e].iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    }
                } else {
                    dh_above = dx;
                }
            }
        }
        let rows = all_top.len() / hd;
        gemm(
            MatRef::new(&all_dlogits, rows, nout).t(),
            MatRef::new(&all_top, rows, hd),
            1.0,
            &mut g.0[lay.out_w..lay.out_w + nout * hd],
        );
        for l in 0..cfg.layers {
            let k = cfg.layer_input(l) + hd;
            let w = lay.weight[l];
            gemm(
                MatRef::new(&all_dz[l], rows, 4 * hd).t(),
                MatRef::new(&all_xh[l], rows, k),
                1.0,
                &mut g.0[w..w + 4 * hd * k],
            );
        }
        loss
    }

    /// Loss and exact gradients over a batch, each pair starting from its
    /// given state (zero when `states` is `None`). Gradients do not flow
    /// into the initial states.
    pub fn loss_and_grads_with(
        &self,
        batch: &[CorruptedPair],
        label_smoothing: f64,
        states: Option<&[LstmState]>,
        dropout: Option<&mut Rng>,
    ) -> BatchOutcome {
        debug_assert!(batch.iter().all(|p| p.inputs.len() == p.targets.len()));
        let tokens: usize = batch.iter().map(|p| p.targets.len()).sum();
        let scale = if tokens == 0 { 0.0 } else { 1.0 / tokens as f64 };
        let inputs: Vec<&[WordId]> = batch.iter().map(|p| p.inputs.as_slice()).collect();
        let targets: Vec<&[WordId]> = batch.iter().map(|p| p.targets.as_slice()).collect();
        let fwd = self.forward_batch(&inputs, states, dropout);
        let mut grads = self.zero_grads();
        let loss_sum = self.backward_batch(&fwd, &targets, label_smoothing, scale, &mut grads);
        BatchOutcome {
            loss_sum,
            tokens,
            grads,
            final_states: fwd.final_states(&self.cfg),
        }
    }

    /// Mean per-token loss and its gradient, from zero states, no dropout.
    pub fn loss_and_grads(&self, batch: &[CorruptedPair], label_smoothing: f64) -> (f64, Gradients) {
        let out = self.loss_and_grads_with(batch, label_smoothing, None, None);
        let mean = if out.tokens == 0 {
            0.0
        } else {
            out.loss_sum / out.tokens as f64
        };
        (mean, out.grads)
    }

    /// Plain SGD step.
    pub fn apply(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            *p -= lr * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::clean_pair;
    use crate::corpus::Sentence;
    use rand::SeedableRng;

    fn tiny(v: usize, dropout: f64) -> LstmLm {
        let cfg = LstmConfig {
            vocab_size: v,
            embed_dim: 5,
            hidden_dim: 6,
            layers: 2,
            dropout,
            label_smoothing: 0.0,
        };
        LstmLm::new(cfg, &mut Rng::seed_from_u64(11)).unwrap()
    }

    fn ids(v: &[u32]) -> Vec<WordId> {
        v.iter().map(|&i| WordId(i)).collect()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = tiny(10, 0.0);
        let b = tiny(10, 0.0);
        assert_eq!(a.params(), b.params());
        assert!(a.params().iter().all(|p| p.abs() <= INIT_RANGE));
    }

    #[test]
    fn parameter_count_closed_form() {
        let cfg = LstmConfig {
            vocab_size: 203,
            embed_dim: 32,
            hidden_dim: 64,
            layers: 2,
            dropout: 0.0,
            label_smoothing: 0.0,
        };
        let m = LstmLm::new(cfg, &mut Rng::seed_from_u64(0)).unwrap();
        let (v, e, h) = (203, 32, 64);
        let per_layer = |inp: usize| 4 * (h * (inp + h) + h);
        let expected = v * e + per_layer(e) + per_layer(h) + (v - 1) * (h + 1);
        assert_eq!(m.n_params(), expected);
        let names: Vec<&str> = m.tensors().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(
            names,
            ["embedding", "lstm0.weight", "lstm0.bias", "lstm1.weight", "lstm1.bias", "output.weight", "output.bias"]
        );
        assert_eq!(m.tensors().iter().map(TensorInfo::len).sum::<usize>(), expected);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut rng = Rng::seed_from_u64(0);
        assert!(LstmLm::new(LstmConfig::new(3), &mut rng).is_err());
        let mut c = LstmConfig::new(10);
        c.dropout = 0.8;
        assert!(LstmLm::new(c, &mut rng).is_err());
        let mut c = LstmConfig::new(10);
        c.hidden_dim = 0;
        assert!(LstmLm::new(c, &mut rng).is_err());
    }

    #[test]
    fn fresh_state_is_zero() {
        let m = tiny(10, 0.0);
        assert!(m.zero_state().is_zero());
    }

    #[test]
    fn step_output_normalized_and_deterministic() {
        let m = tiny(10, 0.3);
        let st = m.zero_state();
        let (a, s1) = m.forward_step(&st, BOS, None);
        let (b, s2) = m.forward_step(&st, BOS, None);
        assert_eq!(a, b);
        assert_eq!(s1, s2);
        assert_eq!(a[0], f64::NEG_INFINITY);
        let total: f64 = a.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(a[1..].iter().all(|x| x.is_finite()));
        let (c, _) = m.forward_step(&st, BOS, Some(&mut Rng::seed_from_u64(1)));
        assert_ne!(a, c);
    }

    #[test]
    fn stepwise_equals_cached_path() {
        let m = tiny(10, 0.0);
        let s = Sentence::from_words(&ids(&[3, 4, 5, 9, 3]));
        let pair = clean_pair(&s);
        let (batched, st_b) = m.score_pair(&m.zero_state(), &pair);
        let mut st = m.zero_state();
        for (i, (&inp, &tgt)) in pair.inputs.iter().zip(&pair.targets).enumerate() {
            let lp = m.step(&mut st, inp);
            assert!((lp[tgt.index()] - batched[i]).abs() < 1e-10);
        }
        for l in 0..2 {
            for j in 0..6 {
                assert!((st.h[l][j] - st_b.h[l][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_zero_when_target_certain() {
        // One output row dominates everything else.
        let mut m = tiny(6, 0.0);
        let cfg = m.config().clone();
        let ob = m.layout.out_b;
        for k in 0..cfg.n_outputs() {
            m.params[ob + k] = if k == 2 { 1e3 } else { -1e3 };
        }
        let s = Sentence::new(ids(&[0, 3, 1])).unwrap();
        let mut pair = clean_pair(&s);
        pair.targets = vec![WordId(3), WordId(3)];
        let (loss, _) = m.loss_and_grads(&[pair], 0.0);
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn full_smoothing_on_uniform_model_is_log_v() {
        let mut m = tiny(10, 0.0);
        m.params.iter_mut().for_each(|p| *p = 0.0);
        let s = Sentence::from_words(&ids(&[3, 4]));
        let (loss, _) = m.loss_and_grads(&[clean_pair(&s)], 1.0 - 1e-15);
        assert!((loss - (9f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn gradient_accumulation_is_associative() {
        let m = tiny(10, 0.0);
        let a = clean_pair(&Sentence::from_words(&ids(&[3, 4, 5])));
        let b = clean_pair(&Sentence::from_words(&ids(&[6, 7])));
        let all = m.loss_and_grads_with(&[a.clone(), b.clone()], 0.0, None, None);
        let ga = m.loss_and_grads_with(&[a], 0.0, None, None);
        let gb = m.loss_and_grads_with(&[b], 0.0, None, None);
        let mut merged = ga.grads.clone();
        merged.scale(ga.tokens as f64);
        let mut gbs = gb.grads.clone();
        gbs.scale(gb.tokens as f64);
        merged.merge(&gbs);
        merged.scale(1.0 / all.tokens as f64);
        for (x, y) in merged.0.iter().zip(&all.grads.0) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!((all.loss_sum - ga.loss_sum - gb.loss_sum).abs() < 1e-12);
    }

    fn ragged_batch() -> Vec<CorruptedPair> {
        [&[3u32, 4, 5, 9][..], &[6, 7], &[8, 3, 3, 4, 5, 2]]
            .iter()
            .map(|w| clean_pair(&Sentence::from_words(&ids(w))))
            .collect()
    }

    fn warm_states(m: &LstmLm, n: usize) -> Vec<LstmState> {
        (0..n)
            .map(|i| {
                let mut st = m.zero_state();
                m.step(&mut st, WordId(3 + i as u32));
                st
            })
            .collect()
    }

    fn check_gradients(dropout: f64, eps: f64) {
        let mut m = tiny(10, dropout);
        let batch = ragged_batch();
        let states = warm_states(&m, batch.len());
        let loss = |m: &LstmLm| {
            let mut rng = Rng::seed_from_u64(5);
            let o = m.loss_and_grads_with(&batch, eps, Some(&states), Some(&mut rng));
            (o.loss_sum / o.tokens as f64, o.grads)
        };
        let (_, g) = loss(&m);
        let h = 1e-5;
        for i in 0..m.n_params() {
            let p = m.params[i];
            m.params[i] = p + h;
            let up = loss(&m).0;
            m.params[i] = p - h;
            let down = loss(&m).0;
            m.params[i] = p;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g.0[i]).abs() / fd.abs().max(g.0[i].abs()).max(1e-5);
            assert!(err < 1e-4, "param {i}: analytic {} numeric {fd}", g.0[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(0.0, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout_and_smoothing() {
        check_gradients(0.4, 0.1);
    }

    #[test]
    fn batched_forward_matches_single_sequences() {
        let m = tiny(10, 0.0);
        let batch = ragged_batch();
        let states = warm_states(&m, batch.len());
        let all = m.loss_and_grads_with(&batch, 0.0, Some(&states), None);
        let mut loss = 0.0;
        for (i, pair) in batch.iter().enumerate() {
            let (lp, st) = m.score_pair(&states[i], pair);
            loss -= lp.iter().sum::<f64>();
            let mut walk = states[i].clone();
            for &w in &pair.inputs {
                m.step(&mut walk, w);
            }
            for l in 0..2 {
                for j in 0..6 {
                    assert!((walk.h[l][j] - all.final_states[i].h[l][j]).abs() < 1e-12);
                    assert!((walk.c[l][j] - st.c[l][j]).abs() < 1e-12);
                }
            }
        }
        assert!((loss - all.loss_sum).abs() < 1e-10);
    }
}
