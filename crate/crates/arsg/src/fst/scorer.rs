//! Incremental prefix scoring over an FST, deterministic or not.
//!
//! The scorer state is the epsilon-closed set of (state, weight) pairs
//! reachable by the consumed input prefix, weights combined per state in
//! the log semiring. Pair weights are kept normalized (their log-sum is
//! zero) so each step returns the incremental cost, the change in the
//! total negative log mass relative to the empty prefix.

use std::collections::{HashMap, VecDeque};

use crate::fst::{log_add, Label, StateId, Wfst, EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerState {
    /// Sorted (state, relative weight) pairs; log-sum of weights is zero.
    items: Vec<(StateId, f64)>,
}

impl ScorerState {
    pub fn is_dead(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[(StateId, f64)] {
        &self.items
    }
}

pub struct PrefixScorer<'a> {
    fst: &'a Wfst,
}

impl<'a> PrefixScorer<'a> {
    pub fn new(fst: &'a Wfst) -> Self {
        PrefixScorer { fst }
    }

    pub fn fst(&self) -> &Wfst {
        self.fst
    }

    fn closure_normalized(&self, seeds: Vec<(StateId, f64)>) -> (Vec<(StateId, f64)>, f64) {
        let closed = eps_closure_pairs(self.fst, seeds);
        let total = closed
            .iter()
            .fold(f64::INFINITY, |acc, &(_, w)| log_add(acc, w));
        let items = closed.into_iter().map(|(s, w)| (s, w - total)).collect();
        (items, total)
    }

    /// State for the empty prefix.
    pub fn start(&self) -> ScorerState {
        let (items, _) = self.closure_normalized(vec![(self.fst.start(), 0.0)]);
        ScorerState { items }
    }

    /// Consume one input label. Returns the successor state and the
    /// incremental cost; a prefix that leaves the language gets an empty
    /// state and infinite cost.
    pub fn step(&self, state: &ScorerState, label: Label) -> (ScorerState, f64) {
        debug_assert_ne!(label, EPS);
        let mut seeds: HashMap<StateId, f64> = HashMap::new();
        for &(s, r) in &state.items {
            for arc in self.fst.arcs(s) {
                if arc.ilabel == label {
                    let e = seeds.entry(arc.next).or_insert(f64::INFINITY);
                    *e = log_add(*e, r + arc.weight);
                }
            }
        }
        if seeds.is_empty() {
            return (ScorerState { items: Vec::new() }, f64::INFINITY);
        }
        let mut seeds: Vec<(StateId, f64)> = seeds.into_iter().collect();
        seeds.sort_by_key(|&(s, _)| s);
        let (items, total) = self.closure_normalized(seeds);
        (ScorerState { items }, total)
    }

    /// Cost of stopping here: the log-sum of final weights over the pair
    /// set, relative to the current prefix mass. Infinite when no member
    /// state is final.
    pub fn final_cost(&self, state: &ScorerState) -> f64 {
        state
            .items
            .iter()
            .filter(|(s, _)| self.fst.is_final(*s))
            .fold(f64::INFINITY, |acc, &(s, r)| {
                log_add(acc, r + self.fst.final_weight(s))
            })
    }

    /// Total cost of a complete input string, summing incremental costs
    /// and the final closure.
    pub fn score_string(&self, labels: &[Label]) -> f64 {
        let mut st = self.start();
        let mut total = 0.0;
        for &l in labels {
            let (next, inc) = self.step(&st, l);
            if inc == f64::INFINITY {
                return f64::INFINITY;
            }
            total += inc;
            st = next;
        }
        total + self.final_cost(&st)
    }
}

/// Epsilon closure over (state, weight) pairs, mass-combining per state.
fn eps_closure_pairs(fst: &Wfst, seeds: Vec<(StateId, f64)>) -> Vec<(StateId, f64)> {
    const TOL: f64 = 1e-15;
    let mut total: HashMap<StateId, f64> = HashMap::new();
    let mut pending: HashMap<StateId, f64> = HashMap::new();
    let mut queue: VecDeque<StateId> = VecDeque::new();
    for (s, w) in seeds {
        let e = pending.entry(s).or_insert(f64::INFINITY);
        *e = log_add(*e, w);
        if !queue.contains(&s) {
            queue.push_back(s);
        }
    }
    let mut guard = 0usize;
    let limit = 100 * fst.num_states() + 10_000;
    while let Some(s) = queue.pop_front() {
        guard += 1;
        if guard > limit {
            break;
        }
        let Some(delta) = pending.remove(&s) else {
            continue;
        };
        let t = total.entry(s).or_insert(f64::INFINITY);
        let new_total = log_add(*t, delta);
        if t.is_finite() && *t - new_total < TOL {
            continue;
        }
        *t = new_total;
        for arc in fst.arcs(s) {
            if arc.ilabel == EPS {
                let e = pending.entry(arc.next).or_insert(f64::INFINITY);
                *e = log_add(*e, delta + arc.weight);
                if !queue.contains(&arc.next) {
                    queue.push_back(arc.next);
                }
            }
        }
    }
    let mut out: Vec<(StateId, f64)> = total.into_iter().collect();
    out.sort_by_key(|&(s, _)| s);
    out
}
