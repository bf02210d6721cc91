//! Weighted finite-state transducers over the log semiring.
//!
//! Weights are negative natural-log probabilities: path concatenation adds
//! weights and alternative paths combine by `log_add`. Label 0 is epsilon.
//!
//! The text format is line-based: arcs are `src dst ilabel olabel weight`,
//! final states are `state weight`, comments start with `#`, and the first
//! state mentioned on the first line is the start state.

pub mod arpa;
pub mod build;
pub mod ops;
pub mod scorer;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type StateId = usize;
pub type Label = u32;
pub const EPS: Label = 0;

/// log-semiring plus: -ln(e^-a + e^-b), stable for large magnitudes.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::INFINITY {
        return b;
    }
    if b == f64::INFINITY {
        return a;
    }
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    lo - (-(hi - lo)).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    pub ilabel: Label,
    pub olabel: Label,
    pub weight: f64,
    pub next: StateId,
}

impl Arc {
    pub fn new(ilabel: Label, olabel: Label, weight: f64, next: StateId) -> Self {
        Arc {
            ilabel,
            olabel,
            weight,
            next,
        }
    }
}

/// Weighted transducer: one initial state, per-state final weights
/// (infinity marks a non-final state).
#[derive(Debug, Clone, Default)]
pub struct Wfst {
    arcs: Vec<Vec<Arc>>,
    finals: Vec<f64>,
    start: StateId,
}

impl Wfst {
    pub fn new() -> Self {
        Wfst::default()
    }

    pub fn add_state(&mut self) -> StateId {
        self.arcs.push(Vec::new());
        self.finals.push(f64::INFINITY);
        self.arcs.len() - 1
    }

    pub fn set_start(&mut self, s: StateId) {
        debug_assert!(s < self.num_states());
        self.start = s;
    }

    pub fn start(&self) -> StateId {
        self.start
    }

    pub fn set_final(&mut self, s: StateId, weight: f64) {
        self.finals[s] = weight;
    }

    pub fn final_weight(&self, s: StateId) -> f64 {
        self.finals[s]
    }

    pub fn is_final(&self, s: StateId) -> bool {
        self.finals[s].is_finite()
    }

    pub fn add_arc(&mut self, src: StateId, arc: Arc) {
        debug_assert!(arc.next < self.num_states());
        self.arcs[src].push(arc);
    }

    pub fn num_states(&self) -> usize {
        self.arcs.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.iter().map(|a| a.len()).sum()
    }

    pub fn arcs(&self, s: StateId) -> &[Arc] {
        &self.arcs[s]
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> {
        0..self.num_states()
    }

    pub fn input_labels(&self) -> BTreeSet<Label> {
        self.arcs
            .iter()
            .flatten()
            .map(|a| a.ilabel)
            .filter(|&l| l != EPS)
            .collect()
    }

    pub fn output_labels(&self) -> BTreeSet<Label> {
        self.arcs
            .iter()
            .flatten()
            .map(|a| a.olabel)
            .filter(|&l| l != EPS)
            .collect()
    }

    pub fn is_acceptor(&self) -> bool {
        self.arcs.iter().flatten().all(|a| a.ilabel == a.olabel)
    }

    /// Deterministic: no input-epsilon arcs and at most one arc per
    /// (state, input label).
    pub fn is_deterministic(&self) -> bool {
        for arcs in &self.arcs {
            let mut seen = BTreeSet::new();
            for a in arcs {
                if a.ilabel == EPS || !seen.insert(a.ilabel) {
                    return false;
                }
            }
        }
        true
    }

    /// Acceptor over the input labels: output labels are replaced by the
    /// input labels.
    pub fn project_input(&self) -> Wfst {
        let mut out = self.clone();
        for arcs in &mut out.arcs {
            for a in arcs {
                a.olabel = a.ilabel;
            }
        }
        out
    }

    /// Drop states that are unreachable from the start or cannot reach a
    /// final state. If the language is empty the result is a single
    /// non-final start state.
    pub fn trim(&self) -> Wfst {
        let n = self.num_states();
        let mut reach = vec![false; n];
        let mut stack = vec![self.start];
        reach[self.start] = true;
        while let Some(s) = stack.pop() {
            for a in &self.arcs[s] {
                if !reach[a.next] {
                    reach[a.next] = true;
                    stack.push(a.next);
                }
            }
        }
        let mut rev: Vec<Vec<StateId>> = vec![Vec::new(); n];
        for s in 0..n {
            for a in &self.arcs[s] {
                rev[a.next].push(s);
            }
        }
        let mut coreach = vec![false; n];
        let mut stack: Vec<StateId> = (0..n).filter(|&s| self.is_final(s)).collect();
        for &s in &stack {
            coreach[s] = true;
        }
        while let Some(s) = stack.pop() {
            for &p in &rev[s] {
                if !coreach[p] {
                    coreach[p] = true;
                    stack.push(p);
                }
            }
        }
        let keep: Vec<bool> = (0..n).map(|s| reach[s] && coreach[s]).collect();
        if !keep[self.start] {
            let mut empty = Wfst::new();
            let s = empty.add_state();
            empty.set_start(s);
            return empty;
        }
        let mut remap = vec![usize::MAX; n];
        let mut out = Wfst::new();
        for s in 0..n {
            if keep[s] {
                remap[s] = out.add_state();
            }
        }
        for s in 0..n {
            if !keep[s] {
                continue;
            }
            if self.is_final(s) {
                out.set_final(remap[s], self.finals[s]);
            }
            for a in &self.arcs[s] {
                if keep[a.next] {
                    out.add_arc(remap[s], Arc::new(a.ilabel, a.olabel, a.weight, remap[a.next]));
                }
            }
        }
        out.set_start(remap[self.start]);
        out
    }

    pub fn write_text(&self) -> String {
        let mut out = String::new();
        // the start state's lines come first so parsers can recover it
        let order = std::iter::once(self.start).chain(self.states().filter(|&s| s != self.start));
        let mut finals = String::new();
        for s in order {
            for a in &self.arcs[s] {
                out.push_str(&format!(
                    "{} {} {} {} {}\n",
                    s, a.next, a.ilabel, a.olabel, a.weight
                ));
            }
        }
        // start first among the final lines as well, in case it has no arcs
        if self.is_final(self.start) {
            finals.push_str(&format!("{} {}\n", self.start, self.finals[self.start]));
        }
        for s in self.states().filter(|&s| s != self.start) {
            if self.is_final(s) {
                finals.push_str(&format!("{} {}\n", s, self.finals[s]));
            }
        }
        if self.arcs[self.start].is_empty() && !self.is_final(self.start) {
            // degenerate machine, still record the start state
            out.push_str(&format!("{} inf\n", self.start));
        }
        out + &finals
    }

    pub fn read_text(text: &str) -> Result<Wfst> {
        let mut fst = Wfst::new();
        let mut start: Option<StateId> = None;
        let ensure = |fst: &mut Wfst, s: usize| {
            while fst.num_states() <= s {
                fst.add_state();
            }
        };
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: &str| Error::FstFormat {
                line: ln + 1,
                msg: msg.to_string(),
            };
            let parse_state = |t: &str| -> Result<usize> {
                t.parse::<usize>().map_err(|_| bad("invalid state id"))
            };
            match toks.len() {
                5 => {
                    let src = parse_state(toks[0])?;
                    let dst = parse_state(toks[1])?;
                    let il: Label = toks[2].parse().map_err(|_| bad("invalid input label"))?;
                    let ol: Label = toks[3].parse().map_err(|_| bad("invalid output label"))?;
                    let w: f64 = toks[4].parse().map_err(|_| bad("invalid weight"))?;
                    ensure(&mut fst, src.max(dst));
                    fst.add_arc(src, Arc::new(il, ol, w, dst));
                    start.get_or_insert(src);
                }
                2 => {
                    let s = parse_state(toks[0])?;
                    ensure(&mut fst, s);
                    if toks[1] != "inf" {
                        let w: f64 = toks[1].parse().map_err(|_| bad("invalid final weight"))?;
                        fst.set_final(s, w);
                    }
                    start.get_or_insert(s);
                }
                1 => {
                    let s = parse_state(toks[0])?;
                    ensure(&mut fst, s);
                    fst.set_final(s, 0.0);
                    start.get_or_insert(s);
                }
                _ => return Err(bad("expected 5 (arc), 2 or 1 (final) fields")),
            }
        }
        let Some(start) = start else {
            return Err(Error::FstFormat {
                line: 0,
                msg: "empty FST description".into(),
            });
        };
        fst.set_start(start);
        Ok(fst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.write_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Wfst> {
        Wfst::read_text(&fs::read_to_string(path)?)
    }
}
