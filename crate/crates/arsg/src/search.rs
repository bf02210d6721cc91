//! Left-to-right beam search minimizing the joint cost
//! cost = -log p_model(y|x) - beta log p_lm(y) - gamma T,
//! with optional shallow fusion of a character-level FST language model,
//! a length bonus, and an asymmetric median-centered attention window.

use crate::attention::{median_window, Alignment, WindowConfig};
use crate::decoder::{Alphabet, Model};
use crate::error::{Error, Result};
use crate::fst::build::char_label;
use crate::fst::scorer::{PrefixScorer, ScorerState};
use crate::fst::{Label, Wfst};
use crate::nn::tensor::Tensor;

/// Beam-search settings. `gamma` rewards longer transcripts; T counts
/// emitted non-EOS labels.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam: usize,
    pub beta: f64,
    pub gamma: f64,
    pub window: WindowConfig,
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(Error::Config("beam size must be >= 1".into()));
        }
        if self.max_len < 1 {
            return Err(Error::Config("max output length must be >= 1".into()));
        }
        Ok(())
    }
}

/// A character-level language model FST bound to an alphabet: maps labels
/// to FST input labels and closes out at EOS through the word separator
/// and the final weights.
pub struct LmFusion {
    fst: Wfst,
    char_labels: Vec<Option<Label>>,
    space: Option<usize>,
}

impl LmFusion {
    pub fn new(fst: Wfst, alphabet: &Alphabet) -> Self {
        let char_labels = (0..alphabet.len())
            .map(|l| {
                if l == alphabet.eos() || Some(l) == alphabet.noise() {
                    None
                } else {
                    Some(char_label(l))
                }
            })
            .collect();
        LmFusion {
            fst,
            char_labels,
            space: alphabet.space(),
        }
    }

    pub fn fst(&self) -> &Wfst {
        &self.fst
    }

    fn scorer(&self) -> PrefixScorer<'_> {
        PrefixScorer::new(&self.fst)
    }

    pub fn start(&self) -> LmState {
        LmState {
            scorer: self.scorer().start(),
            at_boundary: true,
        }
    }

    /// Cost increment for one non-EOS label; infinite when the extended
    /// prefix leaves the language.
    pub fn step(&self, state: &LmState, label: usize) -> (LmState, f64) {
        let Some(Some(flabel)) = self.char_labels.get(label) else {
            return (state.clone(), f64::INFINITY);
        };
        let (scorer, inc) = self.scorer().step(&state.scorer, *flabel);
        let at_boundary = Some(label) == self.space;
        (
            LmState {
                scorer,
                at_boundary,
            },
            inc,
        )
    }

    /// Cost of terminating: the final word is completed with the internal
    /// separator (unless one was just consumed), then the FST's final
    /// weights close the sentence. Incomplete words get infinite cost.
    pub fn eos_cost(&self, state: &LmState) -> f64 {
        let scorer = self.scorer();
        if state.at_boundary {
            scorer.final_cost(&state.scorer)
        } else {
            let Some(space) = self.space else {
                return scorer.final_cost(&state.scorer);
            };
            let flabel = self.char_labels[space].expect("space always maps");
            let (st, inc) = scorer.step(&state.scorer, flabel);
            inc + scorer.final_cost(&st)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmState {
    scorer: ScorerState,
    at_boundary: bool,
}

/// One beam entry.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    s: Tensor,
    alpha: Alignment,
    lm: Option<LmState>,
    /// accumulated -log p_model
    pub nll_model: f64,
    /// accumulated -log p_lm
    pub nll_lm: f64,
    /// emitted non-EOS labels
    pub emitted: usize,
    pub terminated: bool,
}

/// cost = nll_model + beta * nll_lm - gamma * T
pub fn joint_cost(nll_model: f64, nll_lm: f64, emitted: usize, cfg: &DecodeConfig) -> f64 {
    nll_model + cfg.beta * nll_lm - cfg.gamma * emitted as f64
}

impl Hypothesis {
    fn initial(l: usize, state_dim: usize, lm: Option<&LmFusion>) -> Self {
        Hypothesis {
            labels: Vec::new(),
            s: Tensor::zeros(&[state_dim]),
            alpha: Alignment::initial(l),
            lm: lm.map(|f| f.start()),
            nll_model: 0.0,
            nll_lm: 0.0,
            emitted: 0,
            terminated: false,
        }
    }

    pub fn cost(&self, cfg: &DecodeConfig) -> f64 {
        joint_cost(self.nll_model, self.nll_lm, self.emitted, cfg)
    }
}

/// Expand one live hypothesis: one candidate per label, sharing a single
/// decoder step. Candidates with infinite fusion cost are dropped; the
/// EOS candidate is charged the language model's final-weight closure and
/// does not count toward T.
pub fn expand(
    hyp: &Hypothesis,
    model: &Model,
    h: &Tensor,
    lm: Option<&LmFusion>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    debug_assert!(!hyp.terminated);
    let y_prev = hyp.labels.last().copied().unwrap_or(model.alphabet.eos());
    let window = median_window(&hyp.alpha.weights, &cfg.window);
    let step = model.decoder_step_infer(&hyp.s, y_prev, h, &hyp.alpha, window)?;
    let eos = model.alphabet.eos();
    let mut out = Vec::with_capacity(model.alphabet.len());
    for (label, lp) in step.log_probs.iter().enumerate() {
        let model_inc = -(*lp as f64);
        let mut labels = hyp.labels.clone();
        labels.push(label);
        let (lm_state, lm_inc) = match (&hyp.lm, lm) {
            (Some(state), Some(fusion)) => {
                if label == eos {
                    (Some(state.clone()), fusion.eos_cost(state))
                } else {
                    let (next, inc) = fusion.step(state, label);
                    (Some(next), inc)
                }
            }
            _ => (None, 0.0),
        };
        if lm_inc.is_infinite() {
            continue;
        }
        out.push(Hypothesis {
            labels,
            s: step.s.clone(),
            alpha: step.alpha.clone(),
            lm: lm_state,
            nll_model: hyp.nll_model + model_inc,
            nll_lm: hyp.nll_lm + lm_inc,
            emitted: hyp.emitted + usize::from(label != eos),
            terminated: label == eos,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub labels: Vec<usize>,
    pub nll_model: f64,
    pub nll_lm: f64,
    pub cost: f64,
    pub emitted: usize,
    /// False when the search hit the length cap with no terminated
    /// hypothesis and returned the cheapest live one.
    pub terminated: bool,
}

/// Beam search over encoder annotations. Keeps the `beam` cheapest live
/// hypotheses per step; stops once `beam` terminated hypotheses are
/// cheaper than every live one, or at the length cap. With `beta` = 0 the
/// language model is ignored entirely.
pub fn beam_search(
    model: &Model,
    h: &Tensor,
    lm: Option<&LmFusion>,
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    cfg.validate()?;
    if h.rows() == 0 || h.is_empty() {
        return Err(Error::EmptySequence);
    }
    let lm = if cfg.beta == 0.0 { None } else { lm };
    let l = h.rows();
    let mut live = vec![Hypothesis::initial(l, model.cfg.dec_hidden, lm)];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            candidates.extend(expand(hyp, model, h, lm, cfg)?);
        }
        if candidates.is_empty() {
            if finished.is_empty() {
                return Err(Error::EmptyBeam);
            }
            break;
        }
        candidates.sort_by(|a, b| a.cost(cfg).total_cmp(&b.cost(cfg)));
        // terminated candidates ranking within the beam retire to the
        // finished pool; the k cheapest non-terminated stay live
        live = Vec::with_capacity(cfg.beam);
        for (rank, cand) in candidates.into_iter().enumerate() {
            if cand.terminated {
                if rank < cfg.beam {
                    finished.push(cand);
                }
            } else if live.len() < cfg.beam {
                live.push(cand);
            }
        }
        if live.is_empty() {
            break;
        }
        let cheapest_live = live[0].cost(cfg);
        let done = finished
            .iter()
            .filter(|f| f.cost(cfg) < cheapest_live)
            .count();
        if done >= cfg.beam {
            break;
        }
    }

    let best_of = |hyps: &[Hypothesis]| -> Option<Hypothesis> {
        hyps.iter()
            .min_by(|a, b| a.cost(cfg).total_cmp(&b.cost(cfg)))
            .cloned()
    };
    let (hyp, terminated) = match best_of(&finished) {
        Some(hyp) => (hyp, true),
        None => match best_of(&live) {
            Some(hyp) => (hyp, false),
            None => return Err(Error::EmptyBeam),
        },
    };
    Ok(DecodeResult {
        cost: hyp.cost(cfg),
        nll_model: hyp.nll_model,
        nll_lm: hyp.nll_lm,
        emitted: hyp.emitted,
        terminated,
        labels: hyp.labels,
    })
}
