//! GRU ranker with multi-head learnable attention over its hidden
//! trajectory. Each candidate is scored from a three-step input sequence:
//! query features, intent one-hot, candidate features.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{attention_weights, unispec_init};
use crate::error::{Error, Result};
use crate::intent::Intent;
use crate::linalg::{dot, sigmoid, Matrix};
use crate::params::ParamFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputGate {
    /// `o = (1 − u) ∘ h + r ∘ γ*`.
    Printed,
    /// `o = (1 − u) ∘ h + u ∘ γ*`.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub output_gate: OutputGate,
    /// `false` scores from the last hidden state directly (plain GRU).
    pub attention: bool,
}

impl RankerConfig {
    pub fn new(input_dim: usize) -> Self {
        Self { input_dim, hidden: 32, heads: 4, head_dim: 8, output_gate: OutputGate::Printed, attention: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub wr_x: Matrix,
    pub wr_h: Matrix,
    pub wu_x: Matrix,
    pub wu_h: Matrix,
    pub wc_x: Matrix,
    pub wc_h: Matrix,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            wr_x: Matrix::zeros(hidden, input),
            wr_h: Matrix::zeros(hidden, hidden),
            wu_x: Matrix::zeros(hidden, input),
            wu_h: Matrix::zeros(hidden, hidden),
            wc_x: Matrix::zeros(hidden, input),
            wc_h: Matrix::zeros(hidden, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wr_h.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhaLahParams {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    /// One gain per head, stored as a `1 × r` row.
    pub gains: Matrix,
    /// Maps the concatenated heads back to the hidden width.
    pub l_sigma: Matrix,
}

impl MhaLahParams {
    pub fn zeros(hidden: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            w_q: vec![Matrix::zeros(hidden, head_dim); heads],
            w_k: vec![Matrix::zeros(hidden, head_dim); heads],
            w_v: vec![Matrix::zeros(hidden, head_dim); heads],
            gains: Matrix::zeros(1, heads),
            l_sigma: Matrix::zeros(heads * head_dim, hidden),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.first().map_or(0, Matrix::cols)
    }
}

/// Reset and update gates.
pub fn gates(p: &GruParams, x: &[f64], h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let gate = |wx: &Matrix, wh: &Matrix| -> Vec<f64> {
        wx.mul_vec(x).iter().zip(wh.mul_vec(h)).map(|(a, b)| sigmoid(a + b)).collect()
    };
    let r = gate(&p.wr_x, &p.wr_h);
    let u = gate(&p.wu_x, &p.wu_h);
    if r.iter().chain(&u).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gate activation".into()));
    }
    Ok((r, u))
}

/// Candidate state `tanh(W_x x + r ∘ (W_h h))`.
pub fn candidate(p: &GruParams, x: &[f64], r: &[f64], h: &[f64]) -> Vec<f64> {
    let ch = p.wc_h.mul_vec(h);
    p.wc_x.mul_vec(x).iter().zip(r).zip(&ch).map(|((a, ri), c)| (a + ri * c).tanh()).collect()
}

pub fn output_step(u: &[f64], r: &[f64], h: &[f64], g: &[f64]) -> Vec<f64> {
    (0..h.len()).map(|i| (1.0 - u[i]) * h[i] + r[i] * g[i]).collect()
}

pub fn standard_output_step(u: &[f64], h: &[f64], g: &[f64]) -> Vec<f64> {
    (0..h.len()).map(|i| (1.0 - u[i]) * h[i] + u[i] * g[i]).collect()
}

struct HeadTrace {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
    av: Matrix,
}

fn head_forward(m: &MhaLahParams, v: usize, h: &Matrix) -> HeadTrace {
    let q = h.matmul(&m.w_q[v]);
    let k = h.matmul(&m.w_k[v]);
    let vv = h.matmul(&m.w_v[v]);
    let a = attention_weights(&q, &k);
    let av = a.matmul(&vv);
    HeadTrace { q, k, v: vv, a, av }
}

/// Per-head attention scaled by its gain, concatenated, then `L_σ`.
pub fn mha_lah(m: &MhaLahParams, h: &Matrix) -> Result<Matrix> {
    Ok(mha_forward(m, h)?.0)
}

/// Concatenated gained heads before `L_σ`.
pub fn mha_heads(m: &MhaLahParams, h: &Matrix) -> Result<Matrix> {
    Ok(mha_forward(m, h)?.1)
}

fn mha_forward(m: &MhaLahParams, h: &Matrix) -> Result<(Matrix, Matrix, Vec<HeadTrace>)> {
    if h.rows() == 0 {
        return Err(Error::InvalidInput("attention needs at least one hidden state".into()));
    }
    let (r, hd) = (m.heads(), m.head_dim());
    let traces: Vec<HeadTrace> = (0..r).map(|v| head_forward(m, v, h)).collect();
    let mut concat = Matrix::zeros(h.rows(), r * hd);
    for (v, tr) in traces.iter().enumerate() {
        let g = m.gains[(0, v)];
        for t in 0..h.rows() {
            for j in 0..hd {
                concat[(t, v * hd + j)] = g * tr.av[(t, j)];
            }
        }
    }
    let out = concat.matmul(&m.l_sigma);
    if !out.is_finite() {
        return Err(Error::NonFinite("attention output".into()));
    }
    Ok((out, concat, traces))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranker {
    pub config: RankerConfig,
    pub gru: GruParams,
    pub mha: MhaLahParams,
    /// Projects candidate features into the hidden space for scoring.
    pub proj: Matrix,
}

/// Gradients share the parameter layout.
pub type RankerGrads = Ranker;

struct StepTrace {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
    ch: Vec<f64>,
    g: Vec<f64>,
}

struct Trace {
    steps: Vec<StepTrace>,
    hs: Matrix,
    concat: Matrix,
    heads: Vec<HeadTrace>,
    final_state: Vec<f64>,
    pc: Vec<f64>,
}

/// Input sequence for one candidate.
pub fn input_sequence(query: &[f64], intent: Intent, cand: &[f64]) -> Vec<Vec<f64>> {
    let mut one_hot = vec![0.0; query.len()];
    if let Some(slot) = one_hot.get_mut(intent.index()) {
        *slot = 1.0;
    }
    vec![query.to_vec(), one_hot, cand.to_vec()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// `(candidate id, score)`, best first; equal scores keep smaller ids first.
    pub ranked: Vec<(u32, f64)>,
    pub latency_ms: f64,
}

impl RetrievalResult {
    pub fn top(&self) -> Option<u32> {
        self.ranked.first().map(|(id, _)| *id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query: Vec<f64>,
    pub intent: Intent,
    pub candidates: Vec<(u32, Vec<f64>)>,
    pub relevant: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
}

pub const MARGIN: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Rescales each step's gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.05, clip_norm: Some(5.0), seed: 0 }
    }
}

impl Ranker {
    pub fn zeros(config: RankerConfig) -> Self {
        let (d, m) = (config.input_dim, config.hidden);
        Self {
            gru: GruParams::zeros(d, m),
            mha: MhaLahParams::zeros(m, config.heads, config.head_dim),
            proj: Matrix::zeros(m, d),
            config,
        }
    }

    /// Spectrally normalized uniform draws on (−0.5, 0.5); unit head gains.
    pub fn new(config: RankerConfig, seed: u64) -> Result<Self> {
        if config.input_dim < Intent::ALL.len() || config.hidden == 0 || config.heads == 0 || config.head_dim == 0 {
            return Err(Error::Config(format!("invalid ranker dimensions {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize| unispec_init(r, c, -0.5, 0.5, rng.gen());
        let (d, m, hd) = (config.input_dim, config.hidden, config.head_dim);
        let gru = GruParams {
            wr_x: draw(m, d)?,
            wr_h: draw(m, m)?,
            wu_x: draw(m, d)?,
            wu_h: draw(m, m)?,
            wc_x: draw(m, d)?,
            wc_h: draw(m, m)?,
        };
        let mut mha = MhaLahParams::zeros(m, config.heads, hd);
        for v in 0..config.heads {
            mha.w_q[v] = draw(m, hd)?;
            mha.w_k[v] = draw(m, hd)?;
            mha.w_v[v] = draw(m, hd)?;
        }
        mha.gains = Matrix::from_vec(1, config.heads, vec![1.0; config.heads])?;
        mha.l_sigma = draw(config.heads * hd, m)?;
        let proj = draw(m, d)?;
        Ok(Self { config, gru, mha, proj })
    }

    /// Every parameter matrix with a stable name.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let g = &self.gru;
        let mut out: Vec<(String, &Matrix)> = vec![
            ("gru.wr_x".into(), &g.wr_x),
            ("gru.wr_h".into(), &g.wr_h),
            ("gru.wu_x".into(), &g.wu_x),
            ("gru.wu_h".into(), &g.wu_h),
            ("gru.wc_x".into(), &g.wc_x),
            ("gru.wc_h".into(), &g.wc_h),
        ];
        for v in 0..self.mha.heads() {
            out.push((format!("mha.w_q.{v}"), &self.mha.w_q[v]));
            out.push((format!("mha.w_k.{v}"), &self.mha.w_k[v]));
            out.push((format!("mha.w_v.{v}"), &self.mha.w_v[v]));
        }
        out.push(("mha.gains".into(), &self.mha.gains));
        out.push(("mha.l_sigma".into(), &self.mha.l_sigma));
        out.push(("proj".into(), &self.proj));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let g = &mut self.gru;
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("gru.wr_x".into(), &mut g.wr_x),
            ("gru.wr_h".into(), &mut g.wr_h),
            ("gru.wu_x".into(), &mut g.wu_x),
            ("gru.wu_h".into(), &mut g.wu_h),
            ("gru.wc_x".into(), &mut g.wc_x),
            ("gru.wc_h".into(), &mut g.wc_h),
        ];
        let m = &mut self.mha;
        for (v, ((q, k), vv)) in m.w_q.iter_mut().zip(m.w_k.iter_mut()).zip(m.w_v.iter_mut()).enumerate() {
            out.push((format!("mha.w_q.{v}"), q));
            out.push((format!("mha.w_k.{v}"), k));
            out.push((format!("mha.w_v.{v}"), vv));
        }
        out.push(("mha.gains".into(), &mut m.gains));
        out.push(("mha.l_sigma".into(), &mut m.l_sigma));
        out.push(("proj".into(), &mut self.proj));
        out
    }

    fn check_input(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.config.input_dim {
            return Err(Error::InvalidInput(format!(
                "{what} has width {}, ranker expects {}",
                v.len(),
                self.config.input_dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    fn forward(&self, query: &[f64], intent: Intent, cand: &[f64]) -> Result<(f64, Trace)> {
        self.check_input(query, "query features")?;
        self.check_input(cand, "candidate features")?;
        let seq = input_sequence(query, intent, cand);
        let m = self.config.hidden;
        let mut h = vec![0.0; m];
        let mut steps = Vec::with_capacity(seq.len());
        let mut hs = Matrix::zeros(seq.len(), m);
        for (t, x) in seq.into_iter().enumerate() {
            let (r, u) = gates(&self.gru, &x, &h)?;
            let ch = self.gru.wc_h.mul_vec(&h);
            let g: Vec<f64> =
                self.gru.wc_x.mul_vec(&x).iter().zip(&r).zip(&ch).map(|((a, ri), c)| (a + ri * c).tanh()).collect();
            let next = match self.config.output_gate {
                OutputGate::Printed => output_step(&u, &r, &h, &g),
                OutputGate::Standard => standard_output_step(&u, &h, &g),
            };
            hs.row_mut(t).copy_from_slice(&next);
            steps.push(StepTrace { x, h_prev: std::mem::replace(&mut h, next), r, u, ch, g });
        }
        let last = hs.rows() - 1;
        let (final_state, concat, heads) = if self.config.attention {
            let (out, concat, heads) = mha_forward(&self.mha, &hs)?;
            (out.row(last).to_vec(), concat, heads)
        } else {
            (hs.row(last).to_vec(), Matrix::zeros(0, 0), Vec::new())
        };
        let pc = self.proj.mul_vec(cand);
        let score = dot(&final_state, &pc);
        if !score.is_finite() {
            return Err(Error::NonFinite("ranking score".into()));
        }
        Ok((score, Trace { steps, hs, concat, heads, final_state, pc }))
    }

    pub fn score(&self, query: &[f64], intent: Intent, cand: &[f64]) -> Result<f64> {
        Ok(self.forward(query, intent, cand)?.0)
    }

    /// Gradient of `scale · score` accumulated into `grads`.
    fn backward(&self, tr: &Trace, cand: &[f64], scale: f64, grads: &mut RankerGrads) {
        let (t_len, m) = (tr.hs.rows(), self.config.hidden);
        let last = t_len - 1;
        grads.proj.add_outer(&tr.final_state, cand, scale);
        let dfinal: Vec<f64> = tr.pc.iter().map(|x| x * scale).collect();

        let mut dh_seq = Matrix::zeros(t_len, m);
        if self.config.attention {
            let mha = &self.mha;
            let (r, hd) = (mha.heads(), mha.head_dim());
            grads.mha.l_sigma.add_outer(tr.concat.row(last), &dfinal, 1.0);
            let dconcat = mha.l_sigma.mul_vec(&dfinal);
            let inv = 1.0 / (hd as f64).sqrt();
            for v in 0..r {
                let ht = &tr.heads[v];
                let gain = mha.gains[(0, v)];
                let mut d_av = Matrix::zeros(t_len, hd);
                let mut dg = 0.0;
                for j in 0..hd {
                    let d = dconcat[v * hd + j];
                    dg += d * ht.av[(last, j)];
                    d_av[(last, j)] = gain * d;
                }
                grads.mha.gains[(0, v)] += dg;
                let d_a = d_av.matmul(&ht.v.transpose());
                let d_v = ht.a.transpose().matmul(&d_av);
                let mut d_s = Matrix::zeros(t_len, t_len);
                for i in 0..t_len {
                    let inner = dot(d_a.row(i), ht.a.row(i));
                    for j in 0..t_len {
                        d_s[(i, j)] = ht.a[(i, j)] * (d_a[(i, j)] - inner) * inv;
                    }
                }
                let d_q = d_s.matmul(&ht.k);
                let d_k = d_s.transpose().matmul(&ht.q);
                let hs_t = tr.hs.transpose();
                accumulate(&mut grads.mha.w_q[v], &hs_t.matmul(&d_q));
                accumulate(&mut grads.mha.w_k[v], &hs_t.matmul(&d_k));
                accumulate(&mut grads.mha.w_v[v], &hs_t.matmul(&d_v));
                let back = d_q
                    .matmul(&mha.w_q[v].transpose())
                    .add(&d_k.matmul(&mha.w_k[v].transpose()))
                    .add(&d_v.matmul(&mha.w_v[v].transpose()));
                accumulate(&mut dh_seq, &back);
            }
        } else {
            dh_seq.row_mut(last).copy_from_slice(&dfinal);
        }

        let g = &self.gru;
        let mut carry = vec![0.0; m];
        for t in (0..t_len).rev() {
            let s = &tr.steps[t];
            let dh: Vec<f64> = dh_seq.row(t).iter().zip(&carry).map(|(a, b)| a + b).collect();
            let mut dh_prev: Vec<f64> = (0..m).map(|i| dh[i] * (1.0 - s.u[i])).collect();
            let (dg, mut dr, du): (Vec<f64>, Vec<f64>, Vec<f64>) = match self.config.output_gate {
                OutputGate::Printed => (
                    (0..m).map(|i| dh[i] * s.r[i]).collect(),
                    (0..m).map(|i| dh[i] * s.g[i]).collect(),
                    (0..m).map(|i| -dh[i] * s.h_prev[i]).collect(),
                ),
                OutputGate::Standard => (
                    (0..m).map(|i| dh[i] * s.u[i]).collect(),
                    vec![0.0; m],
                    (0..m).map(|i| dh[i] * (s.g[i] - s.h_prev[i])).collect(),
                ),
            };
            let dac: Vec<f64> = (0..m).map(|i| dg[i] * (1.0 - s.g[i] * s.g[i])).collect();
            grads.gru.wc_x.add_outer(&dac, &s.x, 1.0);
            for i in 0..m {
                dr[i] += dac[i] * s.ch[i];
            }
            let dch: Vec<f64> = (0..m).map(|i| dac[i] * s.r[i]).collect();
            grads.gru.wc_h.add_outer(&dch, &s.h_prev, 1.0);
            add_into(&mut dh_prev, &g.wc_h.tmul_vec(&dch));

            let dar: Vec<f64> = (0..m).map(|i| dr[i] * s.r[i] * (1.0 - s.r[i])).collect();
            grads.gru.wr_x.add_outer(&dar, &s.x, 1.0);
            grads.gru.wr_h.add_outer(&dar, &s.h_prev, 1.0);
            add_into(&mut dh_prev, &g.wr_h.tmul_vec(&dar));

            let dau: Vec<f64> = (0..m).map(|i| du[i] * s.u[i] * (1.0 - s.u[i])).collect();
            grads.gru.wu_x.add_outer(&dau, &s.x, 1.0);
            grads.gru.wu_h.add_outer(&dau, &s.h_prev, 1.0);
            add_into(&mut dh_prev, &g.wu_h.tmul_vec(&dau));
            carry = dh_prev;
        }
    }

    /// Score and its gradient with respect to every parameter.
    pub fn score_and_grad(&self, query: &[f64], intent: Intent, cand: &[f64]) -> Result<(f64, RankerGrads)> {
        let (s, tr) = self.forward(query, intent, cand)?;
        let mut grads = Ranker::zeros(self.config.clone());
        self.backward(&tr, cand, 1.0, &mut grads);
        Ok((s, grads))
    }

    /// Pairwise hinge loss `max(0, margin − s⁺ + s⁻)` and its gradient.
    pub fn hinge_loss_and_grad(
        &self,
        query: &[f64],
        intent: Intent,
        pos: &[f64],
        neg: &[f64],
    ) -> Result<(f64, RankerGrads)> {
        let (sp, tp) = self.forward(query, intent, pos)?;
        let (sn, tn) = self.forward(query, intent, neg)?;
        let loss = (MARGIN - sp + sn).max(0.0);
        let mut grads = Ranker::zeros(self.config.clone());
        if loss > 0.0 {
            self.backward(&tp, pos, -1.0, &mut grads);
            self.backward(&tn, neg, 1.0, &mut grads);
        }
        Ok((loss, grads))
    }

    fn apply(&mut self, grads: &RankerGrads, lr: f64, clip_norm: Option<f64>) {
        let gs: Vec<Matrix> = grads.named().into_iter().map(|(_, m)| m.clone()).collect();
        let norm = gs.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        let step = match clip_norm {
            Some(c) if norm > c => lr * c / norm,
            _ => lr,
        };
        for ((_, w), g) in self.named_mut().into_iter().zip(&gs) {
            w.sub_scaled(g, step);
        }
        self.mha.gains.data_mut().iter_mut().for_each(|g| *g = g.max(0.0));
    }

    /// Scores every candidate and sorts best first.
    pub fn process_query(&self, query: &[f64], intent: Intent, candidates: &[(u32, Vec<f64>)]) -> Result<RetrievalResult> {
        if candidates.is_empty() {
            return Err(Error::InvalidInput("no candidates to rank".into()));
        }
        let start = Instant::now();
        let mut ranked = candidates
            .par_iter()
            .map(|(id, c)| Ok((*id, self.score(query, intent, c)?)))
            .collect::<Result<Vec<_>>>()?;
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(RetrievalResult { ranked, latency_ms: start.elapsed().as_secs_f64() * 1e3 })
    }

    /// SGD on the hinge loss: every relevant candidate of every example is
    /// paired with one sampled irrelevant candidate per epoch.
    pub fn train(&mut self, examples: &[TrainingExample], cfg: &TrainConfig) -> Result<TrainReport> {
        let (epochs, lr) = (cfg.epochs, cfg.lr);
        if examples.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        if !(lr > 0.0) {
            return Err(Error::InvalidInput(format!("learning rate must be positive, got {lr}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (e, ex) in examples.iter().enumerate() {
            for (c, (id, _)) in ex.candidates.iter().enumerate() {
                if ex.relevant.contains(id) {
                    pairs.push((e, c));
                }
            }
        }
        let mut steps = 0;
        let mut final_loss = 0.0;
        for epoch in 0..epochs {
            pairs.shuffle(&mut rng);
            let mut total = 0.0;
            for &(e, c) in &pairs {
                let ex = &examples[e];
                let negatives: Vec<usize> =
                    (0..ex.candidates.len()).filter(|&k| !ex.relevant.contains(&ex.candidates[k].0)).collect();
                let Some(&n) = negatives.choose(&mut rng) else { continue };
                let (loss, grads) =
                    self.hinge_loss_and_grad(&ex.query, ex.intent, &ex.candidates[c].1, &ex.candidates[n].1)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("ranking loss at epoch {epoch}: {loss}")));
                }
                total += loss;
                if loss > 0.0 {
                    self.apply(&grads, lr, cfg.clip_norm);
                }
                steps += 1;
            }
            final_loss = if pairs.is_empty() { 0.0 } else { total / pairs.len() as f64 };
        }
        Ok(TrainReport { epochs, steps, final_loss })
    }

    /// Mean reciprocal rank of the first relevant candidate.
    pub fn mrr(&self, examples: &[TrainingExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            let res = self.process_query(&ex.query, ex.intent, &ex.candidates)?;
            if let Some(rank) = res.ranked.iter().position(|(id, _)| ex.relevant.contains(id)) {
                total += 1.0 / (rank + 1) as f64;
            }
        }
        Ok(total / examples.len().max(1) as f64)
    }

    pub fn to_params(&self, seed: u64) -> ParamFile {
        let mut p = ParamFile::new(seed);
        for (name, m) in self.named() {
            p.push(name, m.clone());
        }
        p
    }

    pub fn load_params(&mut self, p: &ParamFile) -> Result<()> {
        for (name, w) in self.named_mut() {
            let m = p.get(&name)?;
            if m.rows() != w.rows() || m.cols() != w.cols() {
                return Err(Error::Validation(format!("section `{name}` has the wrong shape")));
            }
            *w = m.clone();
        }
        Ok(())
    }
}

/// Records as `id<TAB>intent<TAB>features...`. Each record is also a query
/// whose only relevant candidate is itself; every record is a candidate.
pub fn parse_self_retrieval(raw: &str) -> Result<Vec<TrainingExample>> {
    let mut recs: Vec<(u32, Intent, Vec<f64>)> = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(Error::parse(lineno, "expected id, intent and features"));
        }
        let id = cols[0].parse::<u32>().map_err(|_| Error::parse(lineno, format!("bad id `{}`", cols[0])))?;
        let intent = cols[1].parse::<Intent>().map_err(|e| Error::parse(lineno, e.to_string()))?;
        let feats = cols[2..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| Error::parse(lineno, format!("bad feature `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        if recs.first().is_some_and(|r| r.2.len() != feats.len()) {
            return Err(Error::parse(lineno, "feature width differs from the first record"));
        }
        recs.push((id, intent, feats));
    }
    let candidates: Vec<(u32, Vec<f64>)> = recs.iter().map(|(id, _, f)| (*id, f.clone())).collect();
    Ok(recs
        .iter()
        .map(|(id, intent, f)| TrainingExample {
            query: f.clone(),
            intent: *intent,
            candidates: candidates.clone(),
            relevant: BTreeSet::from([*id]),
        })
        .collect())
}

/// Largest relative error between analytic and central-difference
/// gradients of `f` over the sampled coordinates,
/// `|a − n| / max(|a|, |n|, 1e-7)`.
pub fn gradient_check<F>(ranker: &Ranker, grads: &RankerGrads, samples: usize, step: f64, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&Ranker) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let analytic: Vec<(String, Matrix)> = grads.named().into_iter().map(|(n, m)| (n, m.clone())).collect();
    for (k, (_, g)) in analytic.iter().enumerate() {
        let len = g.data().len();
        for _ in 0..samples.min(len) {
            let idx = rng.gen_range(0..len);
            let mut probe = ranker.clone();
            let orig = probe.named()[k].1.data()[idx];
            probe.named_mut()[k].1.data_mut()[idx] = orig + step;
            let up = f(&probe)?;
            probe.named_mut()[k].1.data_mut()[idx] = orig - step;
            let down = f(&probe)?;
            let numeric = (up - down) / (2.0 * step);
            let a = g.data()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7));
        }
    }
    Ok(worst)
}

fn accumulate(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

trait MatrixAdd {
    fn add(self, other: &Matrix) -> Matrix;
}

impl MatrixAdd for Matrix {
    fn add(mut self, other: &Matrix) -> Matrix {
        accumulate(&mut self, other);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![w]).unwrap()
    }

    #[test]
    fn gate_examples() {
        let p = GruParams::zeros(3, 2);
        let (r, u) = gates(&p, &[1.0, -2.0, 3.0], &[0.5, 0.5]).unwrap();
        assert!(r.iter().chain(&u).all(|&g| g == 0.5));
        let mut p = GruParams::zeros(1, 1);
        p.wr_x = scalar(1.0);
        let (r, _) = gates(&p, &[3f64.ln()], &[0.0]).unwrap();
        assert!((r[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn candidate_examples() {
        let p = GruParams::zeros(2, 2);
        assert_eq!(candidate(&p, &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]), vec![0.0, 0.0]);
        let mut p = GruParams::zeros(1, 1);
        p.wc_x = scalar(1.0);
        p.wc_h = scalar(1.0);
        assert!((candidate(&p, &[0.0], &[1.0], &[1.0])[0] - 1f64.tanh()).abs() < 1e-15);
        assert_eq!(candidate(&p, &[0.3], &[0.0], &[5.0]), candidate(&p, &[0.3], &[0.0], &[-2.0]));
    }

    #[test]
    fn output_examples() {
        let v = [0.4, -1.2];
        assert_eq!(output_step(&[0.5; 2], &[0.5; 2], &v, &[0.0; 2]), vec![0.2, -0.6]);
        assert_eq!(output_step(&[1.0; 2], &[0.0; 2], &v, &[0.7, 0.1]), vec![0.0, 0.0]);
        assert_eq!(output_step(&[0.0; 2], &[1.0; 2], &v, &[0.1, 0.2]), vec![0.4 + 0.1, -1.2 + 0.2]);
        assert_eq!(output_step(&[0.0; 2], &[0.0; 2], &v, &[0.1, 0.2]), v.to_vec());
    }

    #[test]
    fn mha_identity_single_state() {
        let mut m = MhaLahParams::zeros(2, 1, 2);
        m.w_q[0] = Matrix::identity(2);
        m.w_k[0] = Matrix::identity(2);
        m.w_v[0] = Matrix::identity(2);
        m.gains = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        m.l_sigma = Matrix::identity(2);
        let h = Matrix::from_rows(&[vec![0.3, -0.8]]).unwrap();
        assert_eq!(mha_lah(&m, &h).unwrap(), h);
    }

    #[test]
    fn zero_gain_zero_block() {
        let mut r = Ranker::new(RankerConfig { hidden: 4, heads: 2, head_dim: 2, ..RankerConfig::new(4) }, 3).unwrap();
        r.mha.gains = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let h = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![-0.1, 0.5, 0.0, 0.2]]).unwrap();
        let c = mha_heads(&r.mha, &h).unwrap();
        assert!(c.row(0)[2..].iter().chain(&c.row(1)[2..]).all(|&x| x == 0.0));
        assert!(c.row(0)[..2].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn zero_params_score_zero() {
        let r = Ranker::zeros(RankerConfig::new(5));
        let cands: Vec<(u32, Vec<f64>)> = (0..4).rev().map(|i| (i, vec![i as f64; 5])).collect();
        let res = r.process_query(&[1.0; 5], Intent::Navigational, &cands).unwrap();
        assert!(res.ranked.iter().all(|(_, s)| *s == 0.0));
        assert_eq!(res.ranked.iter().map(|(id, _)| *id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(r.process_query(&[1.0; 5], Intent::Navigational, &[]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let r = Ranker::new(RankerConfig { hidden: 4, heads: 2, head_dim: 2, ..RankerConfig::new(5) }, 11).unwrap();
        let mut z = Ranker::zeros(r.config.clone());
        z.load_params(&r.to_params(11)).unwrap();
        assert_eq!(z, r);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for gate in [OutputGate::Printed, OutputGate::Standard] {
            for attention in [true, false] {
                let cfg = RankerConfig { hidden: 6, heads: 2, head_dim: 3, output_gate: gate, attention, ..RankerConfig::new(5) };
                let r = Ranker::new(cfg, 21).unwrap();
                let q = [0.3, -0.7, 1.1, 0.2, -0.4];
                let c = [-0.5, 0.9, 0.1, -1.3, 0.6];
                let (_, g) = r.score_and_grad(&q, Intent::Transactional, &c).unwrap();
                let err = gradient_check(&r, &g, 6, 1e-5, 4, |m| m.score(&q, Intent::Transactional, &c)).unwrap();
                assert!(err < 1e-4, "{gate:?} attention={attention}: {err}");
            }
        }
    }

    #[test]
    fn self_retrieval_fixture_overfits() {
        let ex = parse_self_retrieval(crate::fixtures::RANKER_QUERIES).unwrap();
        assert_eq!(ex.len(), 10);
        let mut r = Ranker::new(RankerConfig::new(12), 5).unwrap();
        r.train(&ex, &TrainConfig { seed: 9, ..TrainConfig::default() }).unwrap();
        assert_eq!(r.mrr(&ex).unwrap(), 1.0);
    }
}
