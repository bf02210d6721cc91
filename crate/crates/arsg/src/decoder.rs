//! The recurrent generator: consumes the previous label and attention
//! context, emits the next-character distribution.
//!
//! Wiring: the GRU input is [embedding of y_prev ; context], the output
//! projection reads [state ; context], and the attention context is
//! computed from the pre-update state. The end-of-sequence label doubles
//! as the start symbol fed at the first step.

use std::collections::HashMap;

use crate::attention::{
    self, Alignment, Attention, SchedulePolicy, Window, WindowConfig, WindowPolicy,
};
use crate::encoder::{EncoderStack, GruCell, PoolMode, PoolingSpec};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeRef, ParamId, ParamKind, ParamStore};
use crate::nn::tensor::{self, Real, Tensor};

/// Ordered label set with its special tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Alphabet {
    symbols: Vec<String>,
    eos: usize,
    space: Option<usize>,
    noise: Option<usize>,
    char_index: HashMap<char, usize>,
}

pub const NOISE_SYMBOL: &str = "<noise>";
pub const EOS_SYMBOL: &str = "<eos>";

impl Alphabet {
    /// The 32-label set: 26 letters, apostrophe, period, dash, space,
    /// noise and end-of-sequence.
    pub fn standard() -> Self {
        let mut chars: Vec<char> = ('a'..='z').collect();
        chars.extend(['\'', '.', '-', ' ']);
        Alphabet::build(&chars, true)
    }

    /// Smaller alphabet over the given characters plus end-of-sequence.
    pub fn from_chars(chars: &[char]) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, c) in chars.iter().enumerate() {
            if seen.insert(*c, i).is_some() {
                return Err(Error::Config(format!(
                    "duplicate character '{c}' in alphabet"
                )));
            }
        }
        Ok(Alphabet::build(chars, false))
    }

    fn build(chars: &[char], with_noise: bool) -> Self {
        let mut symbols: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        let mut char_index = HashMap::new();
        for (i, c) in chars.iter().enumerate() {
            char_index.insert(*c, i);
        }
        let noise = if with_noise {
            symbols.push(NOISE_SYMBOL.to_string());
            Some(symbols.len() - 1)
        } else {
            None
        };
        symbols.push(EOS_SYMBOL.to_string());
        let eos = symbols.len() - 1;
        let space = char_index.get(&' ').copied();
        Alphabet {
            symbols,
            eos,
            space,
            noise,
            char_index,
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn space(&self) -> Option<usize> {
        self.space
    }

    pub fn noise(&self) -> Option<usize> {
        self.noise
    }

    pub fn symbol(&self, label: usize) -> &str {
        &self.symbols[label]
    }

    pub fn label_of_char(&self, c: char) -> Option<usize> {
        self.char_index.get(&c).copied()
    }

    /// The plain character of a label, if it has one.
    pub fn char_of(&self, label: usize) -> Option<char> {
        if Some(label) == self.noise || label == self.eos {
            None
        } else {
            self.symbols[label].chars().next()
        }
    }

    /// Characters the alphabet covers, in label order.
    pub fn chars(&self) -> Vec<char> {
        (0..self.len()).filter_map(|l| self.char_of(l)).collect()
    }

    /// Labels back to text; end-of-sequence is dropped, noise renders as
    /// its marker symbol.
    pub fn render(&self, labels: &[usize]) -> String {
        let mut out = String::new();
        for &l in labels {
            if l == self.eos {
                continue;
            }
            out.push_str(&self.symbols[l]);
        }
        out
    }

    pub fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.len() {
            return Err(Error::InvalidLabel {
                label,
                size: self.len(),
            });
        }
        Ok(())
    }
}

/// Label embedding, recurrence over [embedding ; context], and the output
/// projection over [state ; context].
#[derive(Debug, Clone)]
pub struct DecoderCell {
    pub embed: ParamId,
    pub gru: GruCell,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub vocab: usize,
    pub embed_dim: usize,
}

impl DecoderCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        embed_dim: usize,
        state_dim: usize,
        annot_dim: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let embed = store.add(
            format!("{prefix}.embed"),
            &[vocab, embed_dim],
            ParamKind::Embedding,
        )?;
        let gru = GruCell::new(
            store,
            &format!("{prefix}.gru"),
            embed_dim + annot_dim,
            state_dim,
            with_bias,
        )?;
        let w_out = store.add(
            format!("{prefix}.w_out"),
            &[vocab, state_dim + annot_dim],
            ParamKind::Weight,
        )?;
        let b_out = store.add(format!("{prefix}.b_out"), &[vocab], ParamKind::Bias)?;
        Ok(DecoderCell {
            embed,
            gru,
            w_out,
            b_out,
            vocab,
            embed_dim,
        })
    }
}

/// One decoder step on the graph.
pub struct DecodeStep {
    pub s: NodeRef,
    pub alpha: NodeRef,
    pub context: NodeRef,
    pub log_probs: NodeRef,
}

/// One decoder step on the plain forward path.
#[derive(Debug, Clone)]
pub struct InferStep {
    pub s: Tensor,
    pub alpha: Alignment,
    pub context: Tensor,
    pub log_probs: Vec<Real>,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Feature dimension as seen by the encoder (after any deltas).
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub pool_factors: Vec<usize>,
    pub pool_mode: PoolMode,
    pub dec_hidden: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub conv_width: usize,
    pub conv_channels: usize,
    pub gru_biases: bool,
}

/// Encoder, attention and decoder over one parameter store.
#[derive(Debug)]
pub struct Model {
    pub alphabet: Alphabet,
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderStack,
    pub attention: Attention,
    pub decoder: DecoderCell,
}

impl Model {
    pub fn new(alphabet: Alphabet, cfg: ModelConfig) -> Result<Self> {
        if cfg.hidden.len() != cfg.pool_factors.len() {
            return Err(Error::Config(
                "hidden sizes and pooling factors must have equal length".into(),
            ));
        }
        let mut store = ParamStore::new();
        let pool: Vec<PoolingSpec> = cfg
            .pool_factors
            .iter()
            .map(|&f| PoolingSpec::new(f, cfg.pool_mode))
            .collect::<Result<_>>()?;
        let encoder =
            EncoderStack::new(&mut store, cfg.input_dim, &cfg.hidden, &pool, cfg.gru_biases)?;
        let annot_dim = encoder.output_dim();
        let attention = Attention::new(
            &mut store,
            "attn",
            cfg.dec_hidden,
            annot_dim,
            cfg.attn_dim,
            cfg.conv_width,
            cfg.conv_channels,
        )?;
        let decoder = DecoderCell::new(
            &mut store,
            "dec",
            alphabet.len(),
            cfg.embed_dim,
            cfg.dec_hidden,
            annot_dim,
            cfg.gru_biases,
        )?;
        Ok(Model {
            alphabet,
            cfg,
            store,
            encoder,
            decoder,
            attention,
        })
    }

    pub fn annot_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    fn window_for(
        &self,
        policy: &WindowPolicy,
        t: usize,
        alpha_weights: &[Real],
        l: usize,
    ) -> Window {
        match policy {
            WindowPolicy::Full => Window::full(l),
            WindowPolicy::Scheduled(p) => attention::schedule_window(t, p, l),
            WindowPolicy::Median(cfg) => attention::median_window(alpha_weights, cfg),
        }
    }

    /// One generator step on the graph: attention from the pre-update
    /// state, recurrence over [embedding ; context], then the label
    /// log-distribution from [state ; context].
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        s_prev: NodeRef,
        y_prev: usize,
        h: NodeRef,
        alpha_prev: NodeRef,
        window: Window,
    ) -> Result<DecodeStep> {
        self.decoder_step_with(g, &self.store, s_prev, y_prev, h, alpha_prev, window)
    }

    /// `decoder_step` against an explicit store with the same parameter
    /// layout; gradient checking rebuilds graphs from perturbed copies.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_step_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s_prev: NodeRef,
        y_prev: usize,
        h: NodeRef,
        alpha_prev: NodeRef,
        window: Window,
    ) -> Result<DecodeStep> {
        self.alphabet.check_label(y_prev)?;
        let (alpha, context) = self
            .attention
            .attend(g, store, s_prev, h, alpha_prev, window)?;
        let table = g.param(store, self.decoder.embed);
        let emb = g.row(table, y_prev)?;
        let x = g.concat(emb, context);
        let s = self.decoder.gru.step(g, store, x, s_prev)?;
        let sc = g.concat(s, context);
        let w = g.param(store, self.decoder.w_out);
        let b = g.param(store, self.decoder.b_out);
        let logits = g.affine(sc, w, b)?;
        let log_probs = g.log_softmax(logits);
        Ok(DecodeStep {
            s,
            alpha,
            context,
            log_probs,
        })
    }

    /// Forward-only twin of `decoder_step`.
    pub fn decoder_step_infer(
        &self,
        s_prev: &Tensor,
        y_prev: usize,
        h: &Tensor,
        alpha_prev: &Alignment,
        window: Window,
    ) -> Result<InferStep> {
        self.alphabet.check_label(y_prev)?;
        let (alpha, context) = self
            .attention
            .attend_infer(&self.store, s_prev, h, alpha_prev, window)?;
        let table = self.store.value(self.decoder.embed);
        let emb = table.row(y_prev);
        let mut x = Vec::with_capacity(emb.len() + context.len());
        x.extend_from_slice(emb);
        x.extend_from_slice(context.data());
        let s = self
            .decoder
            .gru
            .step_infer(&self.store, &Tensor::vector(x), s_prev)?;
        let mut sc = Vec::with_capacity(s.len() + context.len());
        sc.extend_from_slice(s.data());
        sc.extend_from_slice(context.data());
        let logits = tensor::affine(
            self.store.value(self.decoder.w_out),
            &Tensor::vector(sc),
            self.store.value(self.decoder.b_out),
        )?;
        let log_probs = tensor::log_softmax(&logits).data().to_vec();
        Ok(InferStep {
            s,
            alpha,
            context,
            log_probs,
        })
    }

    pub fn encode_infer(&self, frames: &Tensor) -> Result<Tensor> {
        self.encoder.encode_infer(&self.store, frames)
    }

    /// Teacher-forced negative log-likelihood of an EOS-terminated
    /// transcript, as a graph node. Ground-truth labels are fed as inputs
    /// at every step; windows follow the active policy.
    pub fn teacher_forced_nll(
        &self,
        g: &mut Graph,
        frames: &Tensor,
        transcript: &[usize],
        policy: &WindowPolicy,
    ) -> Result<NodeRef> {
        self.teacher_forced_nll_with(g, &self.store, frames, transcript, policy)
    }

    /// `teacher_forced_nll` against an explicit store with the same layout.
    pub fn teacher_forced_nll_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &Tensor,
        transcript: &[usize],
        policy: &WindowPolicy,
    ) -> Result<NodeRef> {
        if transcript.last() != Some(&self.alphabet.eos()) {
            return Err(Error::MissingEos);
        }
        for &y in transcript {
            self.alphabet.check_label(y)?;
        }
        let h = self.encoder.encode(g, store, frames)?;
        let l = g.value(h).rows();
        let mut s = g.input(Tensor::zeros(&[self.cfg.dec_hidden]));
        let mut alpha = g.input(Tensor::one_hot(l, 0));
        let mut y_prev = self.alphabet.eos();
        let mut loss: Option<NodeRef> = None;
        for (t0, &y) in transcript.iter().enumerate() {
            let window = self.window_for(policy, t0 + 1, g.value(alpha).data(), l);
            let step = self.decoder_step_with(g, store, s, y_prev, h, alpha, window)?;
            let lp = g.pick(step.log_probs, y)?;
            let nll_t = g.scale(lp, -1.0);
            loss = Some(match loss {
                None => nll_t,
                Some(acc) => g.add(acc, nll_t)?,
            });
            s = step.s;
            alpha = step.alpha;
            y_prev = y;
        }
        Ok(loss.expect("transcript is nonempty"))
    }

    /// Greedy generation: argmax label per step fed back as the next
    /// input, stopping at EOS or `max_len`. Ties break toward the
    /// smallest label index. The window follows the median of the
    /// previous alignment.
    pub fn generate_greedy(
        &self,
        h: &Tensor,
        window: &WindowConfig,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let l = h.rows();
        let mut s = Tensor::zeros(&[self.cfg.dec_hidden]);
        let mut alpha = Alignment::initial(l);
        let mut y_prev = self.alphabet.eos();
        let mut out = Vec::new();
        for _ in 0..max_len {
            let win = attention::median_window(&alpha.weights, window);
            let step = self.decoder_step_infer(&s, y_prev, h, &alpha, win)?;
            let mut best = 0usize;
            for (i, lp) in step.log_probs.iter().enumerate() {
                if *lp > step.log_probs[best] {
                    best = i;
                }
            }
            out.push(best);
            if best == self.alphabet.eos() {
                break;
            }
            s = step.s;
            alpha = step.alpha;
            y_prev = best;
        }
        Ok(out)
    }
}

/// Scheduled window for epoch one, median window afterwards.
pub fn training_policy(
    epoch: usize,
    schedule: SchedulePolicy,
    window: WindowConfig,
) -> WindowPolicy {
    if epoch <= 1 {
        WindowPolicy::Scheduled(schedule)
    } else {
        WindowPolicy::Median(window)
    }
}
