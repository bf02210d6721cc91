//! Stacked bidirectional GRU encoder with temporal pooling between layers.
//!
//! Each layer pools its input sequence (subsample keeps the last frame of
//! every group, average takes the mean), then runs a forward and a backward
//! GRU and concatenates their states per position. Both a graph-building
//! path (training) and a plain forward path (decoding) are provided; they
//! share the same numeric kernels.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeRef, ParamId, ParamKind, ParamStore};
use crate::nn::tensor::{self, Real, Tensor};

/// Gated recurrent unit. Gates carry no bias terms by default; optional
/// biases can be enabled at construction.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden: usize,
    w_xz: ParamId,
    u_hz: ParamId,
    w_xr: ParamId,
    u_hr: ParamId,
    w_xh: ParamId,
    u_rh: ParamId,
    biases: Option<[ParamId; 3]>,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let m = |store: &mut ParamStore, name: &str, shape: &[usize]| {
            store.add(format!("{prefix}.{name}"), shape, ParamKind::Weight)
        };
        let w_xz = m(store, "w_xz", &[hidden, input_dim])?;
        let u_hz = m(store, "u_hz", &[hidden, hidden])?;
        let w_xr = m(store, "w_xr", &[hidden, input_dim])?;
        let u_hr = m(store, "u_hr", &[hidden, hidden])?;
        let w_xh = m(store, "w_xh", &[hidden, input_dim])?;
        let u_rh = m(store, "u_rh", &[hidden, hidden])?;
        let biases = if with_bias {
            Some([
                store.add(format!("{prefix}.b_z"), &[hidden], ParamKind::Bias)?,
                store.add(format!("{prefix}.b_r"), &[hidden], ParamKind::Bias)?,
                store.add(format!("{prefix}.b_h"), &[hidden], ParamKind::Bias)?,
            ])
        } else {
            None
        };
        Ok(GruCell {
            input_dim,
            hidden,
            w_xz,
            u_hz,
            w_xr,
            u_hr,
            w_xh,
            u_rh,
            biases,
        })
    }

    /// One recurrence step on the graph:
    /// z = sig(W_xz x + U_hz h), r = sig(W_xr x + U_hr h),
    /// hc = tanh(W_xh x + U_rh (r*h)), h' = (1-z) h + z hc.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeRef,
        h_prev: NodeRef,
    ) -> Result<NodeRef> {
        let gate = |g: &mut Graph, w: ParamId, u: ParamId, b: Option<ParamId>, x, h| -> Result<NodeRef> {
            let wn = g.param(store, w);
            let un = g.param(store, u);
            let wx = g.matvec(wn, x)?;
            let uh = g.matvec(un, h)?;
            let mut s = g.add(wx, uh)?;
            if let Some(b) = b {
                let bn = g.param(store, b);
                s = g.add(s, bn)?;
            }
            Ok(s)
        };
        let bz = self.biases.map(|b| b[0]);
        let br = self.biases.map(|b| b[1]);
        let bh = self.biases.map(|b| b[2]);

        let z_pre = gate(g, self.w_xz, self.u_hz, bz, x, h_prev)?;
        let z = g.sigmoid(z_pre);
        let r_pre = gate(g, self.w_xr, self.u_hr, br, x, h_prev)?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h_prev)?;
        let hc_pre = gate(g, self.w_xh, self.u_rh, bh, x, rh)?;
        let hc = g.tanh(hc_pre);
        g.blend(z, h_prev, hc)
    }

    /// Plain forward step used during decoding.
    pub fn step_infer(&self, store: &ParamStore, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
        let gate = |w: ParamId, u: ParamId, b: Option<ParamId>, xin: &Tensor, hin: &Tensor| -> Result<Tensor> {
            let mut s = tensor::matvec(store.value(w), xin)?;
            let uh = tensor::matvec(store.value(u), hin)?;
            for (a, v) in s.data_mut().iter_mut().zip(uh.data()) {
                *a += v;
            }
            if let Some(b) = b {
                for (a, v) in s.data_mut().iter_mut().zip(store.value(b).data()) {
                    *a += v;
                }
            }
            Ok(s)
        };
        let bz = self.biases.map(|b| b[0]);
        let br = self.biases.map(|b| b[1]);
        let bh = self.biases.map(|b| b[2]);

        let z = tensor::sigmoid_map(&gate(self.w_xz, self.u_hz, bz, x, h_prev)?);
        let r = tensor::sigmoid_map(&gate(self.w_xr, self.u_hr, br, x, h_prev)?);
        let mut rh = h_prev.clone();
        for (a, v) in rh.data_mut().iter_mut().zip(r.data()) {
            *a *= v;
        }
        let hc = tensor::tanh_map(&gate(self.w_xh, self.u_rh, bh, x, &rh)?);
        let mut out = Tensor::zeros(&[self.hidden]);
        for i in 0..self.hidden {
            out.data_mut()[i] =
                (1.0 - z.data()[i]) * h_prev.data()[i] + z.data()[i] * hc.data()[i];
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    /// Keep the last element of each group.
    Subsample,
    /// Emit the mean of each group.
    Average,
}

#[derive(Debug, Clone, Copy)]
pub struct PoolingSpec {
    pub factor: usize,
    pub mode: PoolMode,
}

impl PoolingSpec {
    pub fn new(factor: usize, mode: PoolMode) -> Result<Self> {
        if factor < 1 {
            return Err(Error::Config("pooling factor must be >= 1".into()));
        }
        Ok(PoolingSpec { factor, mode })
    }

    pub fn none() -> Self {
        PoolingSpec {
            factor: 1,
            mode: PoolMode::Subsample,
        }
    }

    pub fn output_len(&self, t: usize) -> usize {
        t.div_ceil(self.factor)
    }
}

/// Pool a T x d sequence down to ceil(T/factor) x d. A trailing partial
/// group is kept (its last element, or its mean).
pub fn pool(seq: &Tensor, spec: &PoolingSpec) -> Result<Tensor> {
    let t = seq.rows();
    if t == 0 || seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    let d = seq.cols();
    let out_t = spec.output_len(t);
    let mut out = Tensor::zeros(&[out_t, d]);
    for gi in 0..out_t {
        let lo = gi * spec.factor;
        let hi = (lo + spec.factor).min(t);
        let dst = &mut out.data_mut()[gi * d..(gi + 1) * d];
        match spec.mode {
            PoolMode::Subsample => dst.copy_from_slice(seq.row(hi - 1)),
            PoolMode::Average => {
                for r in lo..hi {
                    for (o, v) in dst.iter_mut().zip(seq.row(r)) {
                        *o += v;
                    }
                }
                let inv = 1.0 / (hi - lo) as Real;
                for o in dst.iter_mut() {
                    *o *= inv;
                }
            }
        }
    }
    Ok(out)
}

fn pool_nodes(g: &mut Graph, seq: &[NodeRef], spec: &PoolingSpec) -> Result<Vec<NodeRef>> {
    if spec.factor == 1 {
        return Ok(seq.to_vec());
    }
    let mut out = Vec::with_capacity(seq.len().div_ceil(spec.factor));
    for group in seq.chunks(spec.factor) {
        match spec.mode {
            PoolMode::Subsample => out.push(*group.last().unwrap()),
            PoolMode::Average => {
                let mut acc = group[0];
                for &n in &group[1..] {
                    acc = g.add(acc, n)?;
                }
                out.push(g.scale(acc, 1.0 / group.len() as Real));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BiGruLayer {
    pub fwd: GruCell,
    pub bwd: GruCell,
    pub pool: PoolingSpec,
}

/// The encoder: a stack of bidirectional GRU layers, each pooling its
/// input sequence first. Output positions hold [forward ; backward] state.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub layers: Vec<BiGruLayer>,
    pub input_dim: usize,
}

impl EncoderStack {
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: &[usize],
        pool: &[PoolingSpec],
        with_bias: bool,
    ) -> Result<Self> {
        if hidden.is_empty() || hidden.len() != pool.len() {
            return Err(Error::Config(format!(
                "encoder needs matching hidden sizes and pooling specs, got {} and {}",
                hidden.len(),
                pool.len()
            )));
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut dim = input_dim;
        for (i, (&n, p)) in hidden.iter().zip(pool).enumerate() {
            let fwd = GruCell::new(store, &format!("enc{i}.fwd"), dim, n, with_bias)?;
            let bwd = GruCell::new(store, &format!("enc{i}.bwd"), dim, n, with_bias)?;
            layers.push(BiGruLayer { fwd, bwd, pool: *p });
            dim = 2 * n;
        }
        Ok(EncoderStack { layers, input_dim })
    }

    /// Annotation dimensionality (twice the top layer's hidden size).
    pub fn output_dim(&self) -> usize {
        2 * self.layers.last().unwrap().fwd.hidden
    }

    pub fn total_pool_factor(&self) -> usize {
        self.layers.iter().map(|l| l.pool.factor).product()
    }

    /// Output length after per-layer ceil pooling.
    pub fn output_len(&self, t0: usize) -> usize {
        self.layers.iter().fold(t0, |t, l| l.pool.output_len(t))
    }

    fn check_input(&self, frames: &Tensor) -> Result<usize> {
        let t0 = frames.rows();
        if t0 == 0 || frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        if frames.cols() != self.input_dim {
            return Err(Error::Shape {
                op: "encode",
                detail: format!(
                    "frames have dimension {} but the encoder expects {}",
                    frames.cols(),
                    self.input_dim
                ),
            });
        }
        let factor = self.total_pool_factor();
        if t0 < factor {
            return Err(Error::SequenceTooShort { frames: t0, factor });
        }
        Ok(t0)
    }

    fn bigru_nodes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: &BiGruLayer,
        seq: &[NodeRef],
    ) -> Result<Vec<NodeRef>> {
        let t = seq.len();
        let mut fwd = Vec::with_capacity(t);
        let mut h = g.input(Tensor::zeros(&[layer.fwd.hidden]));
        for &x in seq {
            h = layer.fwd.step(g, store, x, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![fwd[0]; t];
        let mut hb = g.input(Tensor::zeros(&[layer.bwd.hidden]));
        for (i, &x) in seq.iter().enumerate().rev() {
            hb = layer.bwd.step(g, store, x, hb)?;
            bwd[i] = hb;
        }
        Ok((0..t).map(|i| g.concat(fwd[i], bwd[i])).collect())
    }

    /// Graph path: frames (T0 x d) to annotations (L x D).
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, frames: &Tensor) -> Result<NodeRef> {
        let t0 = self.check_input(frames)?;
        let mut seq: Vec<NodeRef> = (0..t0)
            .map(|i| g.input(Tensor::vector(frames.row(i).to_vec())))
            .collect();
        for layer in &self.layers {
            seq = pool_nodes(g, &seq, &layer.pool)?;
            seq = self.bigru_nodes(g, store, layer, &seq)?;
        }
        g.stack_rows(&seq)
    }

    /// Plain forward path used for decoding.
    pub fn encode_infer(&self, store: &ParamStore, frames: &Tensor) -> Result<Tensor> {
        self.check_input(frames)?;
        let mut seq = frames.clone();
        for layer in &self.layers {
            let pooled = pool(&seq, &layer.pool)?;
            let t = pooled.rows();
            let n = layer.fwd.hidden;
            let mut out = Tensor::zeros(&[t, 2 * n]);
            let mut h = Tensor::zeros(&[n]);
            for i in 0..t {
                let x = Tensor::vector(pooled.row(i).to_vec());
                h = layer.fwd.step_infer(store, &x, &h)?;
                out.data_mut()[i * 2 * n..i * 2 * n + n].copy_from_slice(h.data());
            }
            let mut hb = Tensor::zeros(&[n]);
            for i in (0..t).rev() {
                let x = Tensor::vector(pooled.row(i).to_vec());
                hb = layer.bwd.step_infer(store, &x, &hb)?;
                out.data_mut()[i * 2 * n + n..(i + 1) * 2 * n].copy_from_slice(hb.data());
            }
            seq = out;
        }
        Ok(seq)
    }
}
