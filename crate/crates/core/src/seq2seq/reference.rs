//! `TinySeq2Seq`: a word-level encoder-decoder with bilinear attention and
//! a copy path.
//!
//! ```text
//! encoder   h_i = tanh(Wx e(x_i) + Wh h_{i-1} + b)             h_0 = 0
//! decoder   s_t = tanh(Wy e(y_{t-1}) + Ws s_{t-1} + b')        s_{-1} = h_L, y_{-1} = <bos>
//! attention a_t = softmax_i(h_i . (A s_t) + e(x_i) . (B s_t)),  c_t = sum_i a_ti h_i
//! generate  g_t = sigmoid(w_g . [s_t; c_t] + b_g)
//! output    p(y_t = w) = g_t softmax(Wo [s_t; c_t] + bo)_w + (1 - g_t) sum_{i: x_i = w} a_ti
//! ```
//!
//! The attention weights double as a pointer into the input, so a word seen
//! only in inputs can still be produced. Embeddings are shared by encoder and
//! decoder inputs. All parameters live in one flat `f64` vector; gradients
//! are computed by hand.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::beam;
use super::optim::{Adam, OptimizerConfig};
use super::vocab::{Vocab, BOS, EOS, UNK};
use super::{DecodeConfig, DecodeStrategy, ScoredQuery, Seq2Seq};
use crate::error::{Error, Result};

pub const BACKEND_ID: &str = "tiny-attn-rnn";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub embed: usize,
    pub hidden: usize,
    /// Longer inputs keep their most recent tokens.
    pub max_input_len: usize,
    /// Longer training targets are truncated (with a warning).
    pub max_target_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embed: 24,
            hidden: 32,
            max_input_len: 96,
            max_target_len: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    emb: Range<usize>,
    enc_wx: Range<usize>,
    enc_wh: Range<usize>,
    enc_b: Range<usize>,
    dec_wy: Range<usize>,
    dec_ws: Range<usize>,
    dec_b: Range<usize>,
    att: Range<usize>,
    att_e: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    gate_w: Range<usize>,
    gate_b: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(v: usize, d: &ModelDims) -> Self {
        let (e, h) = (d.embed, d.hidden);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let emb = take(v * e);
        let enc_wx = take(h * e);
        let enc_wh = take(h * h);
        let enc_b = take(h);
        let dec_wy = take(h * e);
        let dec_ws = take(h * h);
        let dec_b = take(h);
        let att = take(h * h);
        let att_e = take(e * h);
        let out_w = take(v * 2 * h);
        let out_b = take(v);
        let gate_w = take(2 * h);
        let gate_b = take(1);
        Layout {
            emb,
            enc_wx,
            enc_wh,
            enc_b,
            dec_wy,
            dec_ws,
            dec_b,
            att,
            att_e,
            out_w,
            out_b,
            gate_w,
            gate_b,
            total: at,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TinySeq2Seq {
    vocab: Vocab,
    dims: ModelDims,
    layout: Layout,
    params: Vec<f64>,
    seed: u64,
    opt: Adam,
}

/// Cached activations of one decoder step.
pub(super) struct Step {
    pub s: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    alpha: Vec<f64>,
    c: Vec<f64>,
    g: f64,
    /// Generation distribution before mixing with the copy distribution.
    pv: Vec<f64>,
    pub logp: Vec<f64>,
}

/// Encoder states `h_0..=h_L` for one input.
pub(super) struct Encoded {
    ids: Vec<usize>,
    hs: Vec<Vec<f64>>,
}

impl Encoded {
    pub fn last(&self) -> &[f64] {
        self.hs.last().expect("h_0 always present")
    }
}

// y = W x for row-major W (rows x cols), accumulated into y.
fn matvec_add(w: &[f64], cols: usize, x: &[f64], y: &mut [f64]) {
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *yr += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

// x += W^T y
fn matvec_t_add(w: &[f64], cols: usize, y: &[f64], x: &mut [f64]) {
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (xc, a) in x.iter_mut().zip(row) {
            *xc += a * yr;
        }
    }
}

// G += a b^T
fn outer_add(g: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (gc, bc) in row.iter_mut().zip(b) {
            *gc += ar * bc;
        }
    }
}

fn log_softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in x.iter_mut() {
        *v -= lse;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl TinySeq2Seq {
    pub fn new(vocab: Vocab, dims: ModelDims, seed: u64) -> Self {
        let layout = Layout::new(vocab.len(), &dims);
        let params = init_params(&layout, &dims, seed);
        let opt = Adam::new(OptimizerConfig::default(), layout.total);
        TinySeq2Seq {
            vocab,
            dims,
            layout,
            params,
            seed,
            opt,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    /// Zeroes the output projection and shuts the copy path, so every
    /// next-token distribution is uniform.
    pub fn zero_output_head(&mut self) {
        let (w, b) = (self.layout.out_w.clone(), self.layout.out_b.clone());
        self.params[w].fill(0.0);
        self.params[b].fill(0.0);
        self.close_copy_path();
    }

    /// Forces the generation gate to 1 (to machine precision).
    pub fn close_copy_path(&mut self) {
        let w = self.layout.gate_w.clone();
        self.params[w].fill(0.0);
        self.params[self.layout.gate_b.start] = 40.0;
    }

    /// Sets the output bias of `word` (its logit offset at every step).
    pub fn set_output_bias(&mut self, word: &str, value: f64) {
        let id = self.vocab.id(word);
        let at = self.layout.out_b.start + id;
        self.params[at] = value;
    }

    fn encode_input(&self, input: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(input);
        if ids.len() > self.dims.max_input_len {
            ids.drain(..ids.len() - self.dims.max_input_len);
        }
        if ids.is_empty() {
            ids.push(UNK);
        }
        ids
    }

    fn encode_target(&self, target: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(target);
        if ids.len() > self.dims.max_target_len {
            log::warn!(
                "target of {} tokens truncated to {}",
                ids.len(),
                self.dims.max_target_len
            );
            ids.truncate(self.dims.max_target_len);
        }
        ids.push(EOS);
        ids
    }

    fn emb(&self, id: usize) -> &[f64] {
        let e = self.dims.embed;
        let start = self.layout.emb.start + id * e;
        &self.params[start..start + e]
    }

    pub(super) fn encode(&self, ids: &[usize]) -> Encoded {
        let h = self.dims.hidden;
        let p = &self.params;
        let l = &self.layout;
        let mut hs = Vec::with_capacity(ids.len() + 1);
        hs.push(vec![0.0; h]);
        for &x in ids {
            let mut a = p[l.enc_b.clone()].to_vec();
            matvec_add(&p[l.enc_wx.clone()], self.dims.embed, self.emb(x), &mut a);
            matvec_add(&p[l.enc_wh.clone()], h, hs.last().unwrap(), &mut a);
            a.iter_mut().for_each(|v| *v = v.tanh());
            hs.push(a);
        }
        Encoded { ids: ids.to_vec(), hs }
    }

    pub(super) fn step(&self, enc: &Encoded, s_prev: &[f64], y_prev: usize) -> Step {
        let h = self.dims.hidden;
        let p = &self.params;
        let l = &self.layout;
        let mut s = p[l.dec_b.clone()].to_vec();
        matvec_add(&p[l.dec_wy.clone()], self.dims.embed, self.emb(y_prev), &mut s);
        matvec_add(&p[l.dec_ws.clone()], h, s_prev, &mut s);
        s.iter_mut().for_each(|v| *v = v.tanh());

        let mut q = vec![0.0; h];
        matvec_add(&p[l.att.clone()], h, &s, &mut q);
        let mut k = vec![0.0; self.dims.embed];
        matvec_add(&p[l.att_e.clone()], h, &s, &mut k);
        let mut alpha: Vec<f64> = enc.hs[1..]
            .iter()
            .zip(&enc.ids)
            .map(|(hi, &x)| dot(hi, &q) + dot(self.emb(x), &k))
            .collect();
        log_softmax_in_place(&mut alpha);
        alpha.iter_mut().for_each(|v| *v = v.exp());
        let mut c = vec![0.0; h];
        for (a, hi) in alpha.iter().zip(&enc.hs[1..]) {
            for (cj, hj) in c.iter_mut().zip(hi) {
                *cj += a * hj;
            }
        }

        let mut o = Vec::with_capacity(2 * h);
        o.extend_from_slice(&s);
        o.extend_from_slice(&c);
        let mut pv = p[l.out_b.clone()].to_vec();
        matvec_add(&p[l.out_w.clone()], 2 * h, &o, &mut pv);
        log_softmax_in_place(&mut pv);
        pv.iter_mut().for_each(|v| *v = v.exp());
        let g = sigmoid(dot(&p[l.gate_w.clone()], &o) + p[l.gate_b.start]);
        let mut prob: Vec<f64> = pv.iter().map(|v| g * v).collect();
        for (a, &x) in alpha.iter().zip(&enc.ids) {
            prob[x] += (1.0 - g) * a;
        }
        let logp = prob.into_iter().map(f64::ln).collect();
        Step {
            s,
            q,
            k,
            alpha,
            c,
            g,
            pv,
            logp,
        }
    }

    pub(super) fn encode_text(&self, input: &str) -> Encoded {
        self.encode(&self.encode_input(input))
    }

    /// Token ids the decoder may emit.
    pub(super) fn allowed(&self, id: usize) -> bool {
        id != UNK && id != BOS
    }

    /// Sum of token NLLs for `target` (ids ending in EOS); adds
    /// `weight * d(sum NLL)/d(params)` into `grad`.
    fn accumulate(&self, input: &[usize], target: &[usize], weight: f64, grad: &mut [f64]) -> f64 {
        let (e, h) = (self.dims.embed, self.dims.hidden);
        let p = &self.params;
        let l = &self.layout;
        let enc = self.encode(input);
        let big_l = enc.ids.len();

        let mut steps = Vec::with_capacity(target.len());
        let mut prevs: Vec<(Vec<f64>, usize)> = Vec::with_capacity(target.len());
        let mut nll = 0.0;
        let mut s_prev = enc.last().to_vec();
        let mut y_prev = BOS;
        for &y in target {
            let st = self.step(&enc, &s_prev, y_prev);
            nll -= st.logp[y];
            prevs.push((s_prev, y_prev));
            s_prev = st.s.clone();
            y_prev = y;
            steps.push(st);
        }
        if weight == 0.0 {
            return nll;
        }

        let mut dhs = vec![vec![0.0; h]; big_l + 1];
        let mut ds_next = vec![0.0; h];
        for t in (0..target.len()).rev() {
            let st = &steps[t];
            let (s_prev, y_prev) = (&prevs[t].0, prevs[t].1);
            let y = target[t];
            let py = st.logp[y].exp();
            // Share of p(y) coming from the generation distribution.
            let resp = st.g * st.pv[y] / py;
            let dlogits: Vec<f64> = st
                .pv
                .iter()
                .enumerate()
                .map(|(k, pv)| weight * resp * (pv - if k == y { 1.0 } else { 0.0 }))
                .collect();
            let mut o = Vec::with_capacity(2 * h);
            o.extend_from_slice(&st.s);
            o.extend_from_slice(&st.c);
            outer_add(&mut grad[l.out_w.clone()], &dlogits, &o);
            for (g, d) in grad[l.out_b.clone()].iter_mut().zip(&dlogits) {
                *g += d;
            }
            let mut d_o = vec![0.0; 2 * h];
            matvec_t_add(&p[l.out_w.clone()], 2 * h, &dlogits, &mut d_o);

            let copy_y: f64 = st.alpha.iter().zip(&enc.ids).filter(|(_, &x)| x == y).map(|(a, _)| a).sum();
            let dgate = -weight * (st.pv[y] - copy_y) / py * st.g * (1.0 - st.g);
            for (gw, ov) in grad[l.gate_w.clone()].iter_mut().zip(&o) {
                *gw += dgate * ov;
            }
            grad[l.gate_b.start] += dgate;
            for (d, gw) in d_o.iter_mut().zip(&p[l.gate_w.clone()]) {
                *d += dgate * gw;
            }
            let dcopy = -weight * (1.0 - st.g) / py;

            let mut ds: Vec<f64> = d_o[..h].iter().zip(&ds_next).map(|(a, b)| a + b).collect();
            let dc = &d_o[h..];

            // c = sum a_i h_i ; a = softmax(score) ; score_i = h_i . q + e(x_i) . k
            let dalpha: Vec<f64> = enc.hs[1..]
                .iter()
                .zip(&enc.ids)
                .map(|(hi, &x)| dot(hi, dc) + if x == y { dcopy } else { 0.0 })
                .collect();
            let mean: f64 = st.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
            let mut dq = vec![0.0; h];
            let mut dk = vec![0.0; e];
            for i in 0..big_l {
                let a = st.alpha[i];
                let dscore = a * (dalpha[i] - mean);
                let hi = &enc.hs[i + 1];
                let dhi = &mut dhs[i + 1];
                for j in 0..h {
                    dhi[j] += a * dc[j] + dscore * st.q[j];
                    dq[j] += dscore * hi[j];
                }
                let x = enc.ids[i];
                let emb_at = l.emb.start + x * e;
                for j in 0..e {
                    dk[j] += dscore * p[emb_at + j];
                    grad[emb_at + j] += dscore * st.k[j];
                }
            }
            outer_add(&mut grad[l.att_e.clone()], &dk, &st.s);
            matvec_t_add(&p[l.att_e.clone()], h, &dk, &mut ds);
            outer_add(&mut grad[l.att.clone()], &dq, &st.s);
            matvec_t_add(&p[l.att.clone()], h, &dq, &mut ds);

            let dz: Vec<f64> = ds.iter().zip(&st.s).map(|(d, s)| d * (1.0 - s * s)).collect();
            outer_add(&mut grad[l.dec_wy.clone()], &dz, self.emb(y_prev));
            let emb_at = l.emb.start + y_prev * e;
            matvec_t_add(&p[l.dec_wy.clone()], e, &dz, &mut grad[emb_at..emb_at + e]);
            outer_add(&mut grad[l.dec_ws.clone()], &dz, s_prev);
            for (g, d) in grad[l.dec_b.clone()].iter_mut().zip(&dz) {
                *g += d;
            }
            let mut ds_prev = vec![0.0; h];
            matvec_t_add(&p[l.dec_ws.clone()], h, &dz, &mut ds_prev);
            if t == 0 {
                for (a, b) in dhs[big_l].iter_mut().zip(&ds_prev) {
                    *a += b;
                }
            } else {
                ds_next = ds_prev;
            }
        }

        // Backprop through time in the encoder.
        let mut carry = vec![0.0; h];
        for i in (1..=big_l).rev() {
            let hi = &enc.hs[i];
            let da: Vec<f64> = dhs[i]
                .iter()
                .zip(&carry)
                .zip(hi)
                .map(|((d, c), hv)| (d + c) * (1.0 - hv * hv))
                .collect();
            let x = enc.ids[i - 1];
            outer_add(&mut grad[l.enc_wx.clone()], &da, self.emb(x));
            let emb_at = l.emb.start + x * e;
            matvec_t_add(&p[l.enc_wx.clone()], e, &da, &mut grad[emb_at..emb_at + e]);
            outer_add(&mut grad[l.enc_wh.clone()], &da, &enc.hs[i - 1]);
            for (g, d) in grad[l.enc_b.clone()].iter_mut().zip(&da) {
                *g += d;
            }
            carry = vec![0.0; h];
            matvec_t_add(&p[l.enc_wh.clone()], h, &da, &mut carry);
        }
        nll
    }

    /// Mean token NLL of the batch and its gradient, without updating.
    pub fn loss_and_gradient(&self, batch: &[(String, String)]) -> (f64, Vec<f64>) {
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = batch
            .iter()
            .map(|(i, t)| (self.encode_input(i), self.encode_target(t)))
            .collect();
        let n_tokens: usize = pairs.iter().map(|(_, t)| t.len()).sum();
        let w = 1.0 / n_tokens as f64;
        let mut grad = vec![0.0; self.layout.total];
        let nll: f64 = pairs.iter().map(|(i, t)| self.accumulate(i, t, w, &mut grad)).sum();
        (nll * w, grad)
    }

    /// Summed NLL of the batch targets (no normalization).
    pub fn batch_nll(&self, batch: &[(String, String)]) -> f64 {
        let mut sink = vec![];
        batch
            .iter()
            .map(|(i, t)| self.accumulate(&self.encode_input(i), &self.encode_target(t), 0.0, &mut sink))
            .sum()
    }
}

fn init_params(layout: &Layout, dims: &ModelDims, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; layout.total];
    let mut fill = |r: &Range<usize>, scale: f64, rng: &mut ChaCha8Rng| {
        for v in &mut params[r.clone()] {
            *v = rng.gen_range(-scale..scale);
        }
    };
    let (e, h) = (dims.embed as f64, dims.hidden as f64);
    fill(&layout.emb, 0.5, &mut rng);
    fill(&layout.enc_wx, 1.0 / e.sqrt(), &mut rng);
    fill(&layout.enc_wh, 1.0 / h.sqrt(), &mut rng);
    fill(&layout.dec_wy, 1.0 / e.sqrt(), &mut rng);
    fill(&layout.dec_ws, 1.0 / h.sqrt(), &mut rng);
    fill(&layout.att, 1.0 / h.sqrt(), &mut rng);
    fill(&layout.att_e, 1.0 / h.sqrt(), &mut rng);
    fill(&layout.gate_w, 1.0 / (2.0 * h).sqrt(), &mut rng);
    fill(&layout.out_w, 1.0 / (2.0 * h).sqrt(), &mut rng);
    params
}

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    backend_id: String,
    dims: ModelDims,
    seed: u64,
    vocab: Vocab,
    n_params: usize,
}

impl Seq2Seq for TinySeq2Seq {
    fn backend_id(&self) -> &str {
        BACKEND_ID
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn parameter_count(&self) -> usize {
        self.layout.total
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn configure_optimizer(&mut self, cfg: OptimizerConfig) {
        self.opt = Adam::new(cfg, self.layout.total);
    }

    fn train_step(&mut self, batch: &[(String, String)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Argument("train_step: empty batch".into()));
        }
        if let Some((_, t)) = batch.iter().find(|(_, t)| t.trim().is_empty()) {
            return Err(Error::Argument(format!("train_step: empty target `{t}`")));
        }
        let (loss, grad) = self.loss_and_gradient(batch);
        self.opt.update(&mut self.params, &grad);
        Ok(loss)
    }

    fn reinforce_step(&mut self, input: &str, target: &str, reward: f64) -> Result<f64> {
        if target.trim().is_empty() {
            return Err(Error::Argument("reinforce_step: empty target".into()));
        }
        let input = self.encode_input(input);
        let target = self.encode_target(target);
        if reward == 0.0 {
            // The policy gradient vanishes; leave parameters and moments alone.
            let mut sink = vec![];
            self.accumulate(&input, &target, 0.0, &mut sink);
            return Ok(0.0);
        }
        let mut grad = vec![0.0; self.layout.total];
        let nll = self.accumulate(&input, &target, reward, &mut grad);
        self.opt.update(&mut self.params, &grad);
        Ok(reward * nll)
    }

    fn generate(&self, input: &str, cfg: &DecodeConfig) -> Result<Vec<ScoredQuery>> {
        cfg.validate()?;
        let enc = self.encode_text(input);
        let hyps = match cfg.strategy {
            DecodeStrategy::Greedy => vec![beam::greedy(self, &enc, cfg.max_len)],
            DecodeStrategy::Beam => beam::search(self, &enc, cfg.beam_size, cfg.num_return, cfg.max_len),
        };
        Ok(hyps
            .into_iter()
            .map(|(ids, norm)| ScoredQuery {
                text: self.vocab.decode(&ids),
                norm_logprob: norm,
            })
            .collect())
    }

    fn score_sequence(&self, input: &str, target: &str) -> Result<f64> {
        Ok(self.score_many(input, &[target])?[0])
    }

    fn score_many(&self, input: &str, targets: &[&str]) -> Result<Vec<f64>> {
        if targets.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::Argument("score_sequence: empty target".into()));
        }
        let enc = self.encode_text(input);
        Ok(targets
            .iter()
            .map(|t| {
                let target = self.encode_target(t);
                let mut s_prev = enc.last().to_vec();
                let mut y_prev = BOS;
                let mut sum = 0.0;
                for &y in &target {
                    let st = self.step(&enc, &s_prev, y_prev);
                    sum += st.logp[y];
                    s_prev = st.s;
                    y_prev = y;
                }
                sum / target.len() as f64
            })
            .collect())
    }

    fn reinitialized(&self, seed: u64) -> Self {
        TinySeq2Seq::new(self.vocab.clone(), self.dims, seed)
    }

    fn to_blob(&self) -> Vec<u8> {
        let header = BlobHeader {
            backend_id: BACKEND_ID.to_string(),
            dims: self.dims,
            seed: self.seed,
            vocab: self.vocab.clone(),
            n_params: self.params.len(),
        };
        let json = serde_json::to_vec(&header).expect("blob header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.params.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    fn from_blob(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Integrity(format!("parameter blob: {m}"));
        if bytes.len() < 8 {
            return Err(bad("truncated"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let json = bytes.get(8..8 + n).ok_or_else(|| bad("truncated header"))?;
        let header: BlobHeader = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        if header.backend_id != BACKEND_ID {
            return Err(bad(&format!("backend `{}` is not {BACKEND_ID}", header.backend_id)));
        }
        let raw = &bytes[8 + n..];
        if raw.len() != header.n_params * 8 {
            return Err(bad("parameter count mismatch"));
        }
        let mut model = TinySeq2Seq::new(header.vocab, header.dims, header.seed);
        if model.layout.total != header.n_params {
            return Err(bad("layout does not match parameter count"));
        }
        for (p, chunk) in model.params.iter_mut().zip(raw.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_vocab() -> Vocab {
        Vocab::from_words(["user:", "hi", "there", "ireland", "bowling", "it", "<sep>", "response:"])
    }

    fn model(seed: u64) -> TinySeq2Seq {
        TinySeq2Seq::new(
            small_vocab(),
            ModelDims {
                embed: 6,
                hidden: 5,
                ..Default::default()
            },
            seed,
        )
    }

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn uniform_head_gives_ln_v() {
        // Four output symbols: <unk>, <bos>, <eos>, "a".
        let mut m = TinySeq2Seq::new(Vocab::from_words(["a"]), ModelDims::default(), 1);
        m.zero_output_head();
        let (loss, _) = m.loss_and_gradient(&pairs(&[("a", "a")]));
        assert_abs_diff_eq!(loss, 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(m.score_sequence("a a", "a a a").unwrap(), -(4f64.ln()), epsilon = 1e-12);
    }

    /// Hand-built weights that emit "ireland" after <bos> and <eos> after
    /// "ireland" with probability 1 - O(e^-100).
    fn certain_model() -> TinySeq2Seq {
        let mut m = model(3);
        m.params.fill(0.0);
        let l = m.layout.clone();
        let (e, h) = (m.dims.embed, m.dims.hidden);
        let ire = m.vocab.id("ireland");
        m.params[l.emb.start + BOS * e] = 1.0;
        m.params[l.emb.start + ire * e + 1] = 1.0;
        m.params[l.dec_wy.start] = 10.0;
        m.params[l.dec_wy.start + e + 1] = 10.0;
        m.params[l.out_w.start + ire * 2 * h] = 100.0;
        m.params[l.out_w.start + EOS * 2 * h + 1] = 100.0;
        m.close_copy_path();
        m
    }

    #[test]
    fn certain_target_has_zero_loss() {
        let m = certain_model();
        assert_abs_diff_eq!(m.score_sequence("user: hi", "ireland").unwrap(), 0.0, epsilon = 1e-12);
        let (loss, _) = m.loss_and_gradient(&pairs(&[("user: hi there", "ireland")]));
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
        let top = m.greedy("user: bowling").unwrap();
        assert_eq!(top.text, "ireland");
        assert_abs_diff_eq!(top.norm_logprob, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model(7);
        let batch = pairs(&[("user: hi there ireland", "ireland"), ("user: it bowling", "bowling it")]);
        let (_, grad) = m.loss_and_gradient(&batch);
        let l = &m.layout;
        let blocks = [
            &l.emb, &l.enc_wx, &l.enc_wh, &l.enc_b, &l.dec_wy, &l.dec_ws, &l.dec_b, &l.att, &l.att_e, &l.out_w,
            &l.out_b, &l.gate_w, &l.gate_b,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for block in blocks.iter().cycle() {
            if checked >= 52 {
                break;
            }
            let i = rng.gen_range((*block).clone());
            let h = 1e-5;
            let mut plus = m.clone();
            plus.params[i] += h;
            let mut minus = m.clone();
            minus.params[i] -= h;
            let fd = (plus.loss_and_gradient(&batch).0 - minus.loss_and_gradient(&batch).0) / (2.0 * h);
            if fd.abs() < 1e-7 && grad[i].abs() < 1e-7 {
                continue;
            }
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
            assert!(rel < 1e-4, "param {i}: analytic {} vs numeric {fd} (rel {rel})", grad[i]);
            checked += 1;
        }
    }

    #[test]
    fn copy_path_emits_words_only_seen_in_inputs() {
        let mut m = model(2);
        m.params[m.layout.gate_b.start] = -40.0;
        let w = m.layout.gate_w.clone();
        m.params[w].fill(0.0);
        let enc = m.encode_text("bowling");
        let st = m.step(&enc, enc.last(), BOS);
        assert_abs_diff_eq!(st.logp[m.vocab.id("bowling")], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn step_distribution_sums_to_one() {
        let m = model(4);
        let enc = m.encode_text("user: hi there ireland <sep> response: it bowling");
        let st = m.step(&enc, enc.last(), BOS);
        assert_abs_diff_eq!(st.logp.iter().map(|v| v.exp()).sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn memorizes_a_single_pair() {
        let mut m = model(5);
        m.configure_optimizer(OptimizerConfig { lr: 0.05, total_steps: None });
        let batch = pairs(&[("user: hi there", "ireland")]);
        let first = m.train_step(&batch).unwrap();
        let mut last = first;
        for _ in 0..199 {
            last = m.train_step(&batch).unwrap();
        }
        assert!(last < 0.01 * first, "loss {first} -> {last}");
        assert_eq!(m.greedy("user: hi there").unwrap().text, "ireland");
    }

    #[test]
    fn blob_round_trip_is_exact() {
        let m = model(9);
        let back = TinySeq2Seq::from_blob(&m.to_blob()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.vocab, m.vocab);
        let mut blob = m.to_blob();
        blob.truncate(blob.len() - 3);
        assert!(TinySeq2Seq::from_blob(&blob).is_err());
    }

    #[test]
    fn rejects_empty_batch_and_targets() {
        let mut m = model(1);
        assert!(m.train_step(&[]).is_err());
        assert!(m.train_step(&pairs(&[("hi", " ")])).is_err());
        assert!(m.score_sequence("hi", "").is_err());
    }

    #[test]
    fn long_targets_truncate() {
        let mut m = model(1);
        m.dims.max_target_len = 2;
        assert_eq!(m.encode_target("hi hi hi hi"), vec![m.vocab.id("hi"), m.vocab.id("hi"), EOS]);
    }
}
