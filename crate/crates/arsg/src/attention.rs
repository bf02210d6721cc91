//! Hybrid location-aware attention with windowing.
//!
//! Scores combine the previous decoder state, the annotation content, and
//! convolutional features of the previous alignment:
//!     F = Q * alpha_prev
//!     e_l = w . tanh(W s_prev + V h_l + U f_l + b)
//!     alpha_l = exp(e_l) / sum over the window
//! Scoring is restricted to a window, either centered on the median of the
//! previous alignment or, during the first training epoch, a scheduled
//! range that expands linearly with the output step.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeRef, ParamId, ParamKind, ParamStore};
use crate::nn::tensor::{self, Real, Tensor};

/// Inclusive index range of annotation positions (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub lo: usize,
    pub hi: usize,
}

impl Window {
    pub fn full(l: usize) -> Self {
        Window { lo: 0, hi: l - 1 }
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false // constructed clipped and nonempty by construction
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.lo && i <= self.hi
    }
}

/// Half-widths of a median-centered window.
#[derive(Debug, Clone, Copy)]
pub struct WindowConfig {
    pub left: usize,
    pub right: usize,
}

/// Linearly expanding window used for the first training epoch:
/// step t may look at positions [s_min + t v_min, s_max + t v_max]
/// (1-based, clipped to the annotation range).
#[derive(Debug, Clone, Copy)]
pub struct SchedulePolicy {
    pub s_min: Real,
    pub s_max: Real,
    pub v_min: Real,
    pub v_max: Real,
}

impl SchedulePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.s_min > self.s_max {
            return Err(Error::Config("schedule requires s_min <= s_max".into()));
        }
        if !(self.v_min > 0.0) || self.v_min > self.v_max {
            return Err(Error::Config("schedule requires 0 < v_min <= v_max".into()));
        }
        Ok(())
    }
}

/// Which windowing rule the decoder applies per output step.
#[derive(Debug, Clone, Copy)]
pub enum WindowPolicy {
    Full,
    Scheduled(SchedulePolicy),
    Median(WindowConfig),
}

/// Attention weights over annotation positions; exactly zero outside the
/// window they were normalized in.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub weights: Vec<Real>,
    pub window: Window,
}

impl Alignment {
    /// The t = 1 convention: all mass on the first position.
    pub fn initial(l: usize) -> Self {
        let mut weights = vec![0.0; l];
        weights[0] = 1.0;
        Alignment {
            weights,
            window: Window { lo: 0, hi: 0 },
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Index of the median of a (possibly unnormalized) weight vector: the
/// smallest index whose cumulative share reaches one half.
pub fn median_index(weights: &[Real]) -> usize {
    let total: Real = weights.iter().sum();
    let half = 0.5 * total;
    let mut cum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        cum += w;
        if cum >= half {
            return i;
        }
    }
    weights.len() - 1
}

/// Median-centered window [m - left, m + right], clipped to the sequence.
pub fn median_window(weights: &[Real], cfg: &WindowConfig) -> Window {
    let l = weights.len();
    let m = median_index(weights);
    Window {
        lo: m.saturating_sub(cfg.left),
        hi: (m + cfg.right).min(l - 1),
    }
}

/// Scheduled window for output step t (t >= 1). The policy is expressed in
/// 1-based positions; the result is clipped to [1, L] and returned 0-based.
pub fn schedule_window(t: usize, policy: &SchedulePolicy, l: usize) -> Window {
    let lo1 = (policy.s_min + t as Real * policy.v_min).floor();
    let hi1 = (policy.s_max + t as Real * policy.v_max).ceil();
    let lo1 = (lo1.max(1.0) as usize).min(l);
    let hi1 = (hi1.max(1.0) as usize).min(l);
    let (lo1, hi1) = if lo1 > hi1 { (hi1, lo1) } else { (lo1, hi1) };
    Window {
        lo: lo1 - 1,
        hi: hi1 - 1,
    }
}

/// Normalize scores within a window: softmax over the window entries of a
/// full-length score vector, exactly zero outside.
pub fn normalize(scores: &Tensor, window: Window) -> Result<Alignment> {
    let l = scores.len();
    if window.lo >= l || window.hi >= l || window.lo > window.hi {
        return Err(Error::EmptyWindow);
    }
    let mut local: Vec<Real> = scores.data()[window.lo..=window.hi].to_vec();
    tensor::softmax_slice(&mut local);
    let mut weights = vec![0.0; l];
    weights[window.lo..=window.hi].copy_from_slice(&local);
    Ok(Alignment { weights, window })
}

/// Location-aware attention parameters plus a counter of score-MLP
/// evaluations (one per scored position), used to verify the windowed
/// complexity bound.
#[derive(Debug)]
pub struct Attention {
    pub state_dim: usize,
    pub annot_dim: usize,
    pub score_dim: usize,
    pub conv_width: usize,
    pub channels: usize,
    w_state: ParamId,
    v_annot: ParamId,
    u_conv: ParamId,
    q_filter: ParamId,
    w_score: ParamId,
    b_score: ParamId,
    score_evals: AtomicU64,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        state_dim: usize,
        annot_dim: usize,
        score_dim: usize,
        conv_width: usize,
        channels: usize,
    ) -> Result<Self> {
        if conv_width % 2 == 0 {
            return Err(Error::Config(format!(
                "attention filter width {conv_width} must be odd"
            )));
        }
        Ok(Attention {
            state_dim,
            annot_dim,
            score_dim,
            conv_width,
            channels,
            w_state: store.add(format!("{prefix}.w_state"), &[score_dim, state_dim], ParamKind::Weight)?,
            v_annot: store.add(format!("{prefix}.v_annot"), &[score_dim, annot_dim], ParamKind::Weight)?,
            u_conv: store.add(format!("{prefix}.u_conv"), &[score_dim, channels], ParamKind::Weight)?,
            q_filter: store.add(format!("{prefix}.q_filter"), &[conv_width, channels], ParamKind::ConvKernel)?,
            w_score: store.add(format!("{prefix}.w_score"), &[score_dim], ParamKind::Bias)?,
            b_score: store.add(format!("{prefix}.b_score"), &[score_dim], ParamKind::Bias)?,
            score_evals: AtomicU64::new(0),
        })
    }

    pub fn score_evals(&self) -> u64 {
        self.score_evals.load(Ordering::Relaxed)
    }

    pub fn reset_score_evals(&self) {
        self.score_evals.store(0, Ordering::Relaxed);
    }

    fn count_evals(&self, n: u64) {
        self.score_evals.fetch_add(n, Ordering::Relaxed);
    }

    /// F = Q * alpha_prev (graph path).
    pub fn conv_features(&self, g: &mut Graph, store: &ParamStore, alpha_prev: NodeRef) -> Result<NodeRef> {
        let q = g.param(store, self.q_filter);
        g.conv1d(q, alpha_prev)
    }

    /// Single-position score e = w . tanh(W s_prev + V h_l + U f_l + b).
    pub fn score(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s_prev: NodeRef,
        h_l: NodeRef,
        f_l: NodeRef,
    ) -> Result<NodeRef> {
        let wn = g.param(store, self.w_state);
        let ws = g.matvec(wn, s_prev)?;
        self.score_shared(g, store, ws, h_l, f_l)
    }

    fn score_shared(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ws: NodeRef,
        h_l: NodeRef,
        f_l: NodeRef,
    ) -> Result<NodeRef> {
        self.count_evals(1);
        let vn = g.param(store, self.v_annot);
        let un = g.param(store, self.u_conv);
        let bn = g.param(store, self.b_score);
        let wv = g.param(store, self.w_score);
        let vh = g.matvec(vn, h_l)?;
        let uf = g.matvec(un, f_l)?;
        let s1 = g.add(ws, vh)?;
        let s2 = g.add(uf, bn)?;
        let pre = g.add(s1, s2)?;
        let act = g.tanh(pre);
        g.dot(wv, act)
    }

    /// Full attention step on the graph: returns (alignment over all L
    /// positions, zero outside the window; context vector).
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s_prev: NodeRef,
        h: NodeRef,
        alpha_prev: NodeRef,
        window: Window,
    ) -> Result<(NodeRef, NodeRef)> {
        let l = g.value(h).rows();
        if window.lo >= l || window.hi >= l || window.lo > window.hi {
            return Err(Error::EmptyWindow);
        }
        let f = self.conv_features(g, store, alpha_prev)?;
        let wn = g.param(store, self.w_state);
        let ws = g.matvec(wn, s_prev)?;
        let mut scores = Vec::with_capacity(window.len());
        for pos in window.lo..=window.hi {
            let h_l = g.row(h, pos)?;
            let f_l = g.row(f, pos)?;
            scores.push(self.score_shared(g, store, ws, h_l, f_l)?);
        }
        let stacked = g.stack_scalars(&scores)?;
        let local = g.softmax(stacked);
        let alpha = g.scatter_span(local, window.lo, l)?;
        let context = g.weighted_rows(alpha, h, window.lo, window.hi)?;
        Ok((alpha, context))
    }

    /// Forward-only attention step used during decoding.
    pub fn attend_infer(
        &self,
        store: &ParamStore,
        s_prev: &Tensor,
        h: &Tensor,
        alpha_prev: &Alignment,
        window: Window,
    ) -> Result<(Alignment, Tensor)> {
        let l = h.rows();
        if window.lo >= l || window.hi >= l || window.lo > window.hi {
            return Err(Error::EmptyWindow);
        }
        let f = tensor::conv1d(
            store.value(self.q_filter),
            &Tensor::vector(alpha_prev.weights.clone()),
        )?;
        let ws = tensor::matvec(store.value(self.w_state), s_prev)?;
        let v = store.value(self.v_annot);
        let u = store.value(self.u_conv);
        let b = store.value(self.b_score);
        let wvec = store.value(self.w_score);
        self.count_evals(window.len() as u64);
        let mut local = Vec::with_capacity(window.len());
        for pos in window.lo..=window.hi {
            let mut pre = tensor::matvec(v, &Tensor::vector(h.row(pos).to_vec()))?;
            let uf = tensor::matvec(u, &Tensor::vector(f.row(pos).to_vec()))?;
            for i in 0..pre.len() {
                pre.data_mut()[i] += ws.data()[i] + uf.data()[i] + b.data()[i];
            }
            let act = tensor::tanh_map(&pre);
            local.push(tensor::dot(&wvec.clone(), &act)?);
        }
        tensor::softmax_slice(&mut local);
        let mut weights = vec![0.0; l];
        weights[window.lo..=window.hi].copy_from_slice(&local);
        let d = h.cols();
        let mut context = Tensor::zeros(&[d]);
        for pos in window.lo..=window.hi {
            let a = weights[pos];
            for (c, v) in context.data_mut().iter_mut().zip(h.row(pos)) {
                *c += a * v;
            }
        }
        Ok((Alignment { weights, window }, context))
    }
}
