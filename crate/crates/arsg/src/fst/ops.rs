//! Composition, determinization, minimization and weight pushing, all in
//! the log semiring.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::fst::{log_add, Arc, Label, StateId, Wfst, EPS};

/// Residuals closer than this merge during subset construction and
/// partition refinement.
const QUANTUM: f64 = 1e-11;

/// Convergence tolerance for iterative shortest-distance computations.
const DIST_TOL: f64 = 1e-13;

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// Compose A (x -> y) with B (y -> z). Epsilon moves go through a
/// three-state sequencing filter so every epsilon interleaving between two
/// matches contributes exactly one path: A-only moves must precede B-only
/// moves within a block.
pub fn compose(a: &Wfst, b: &Wfst) -> Result<Wfst> {
    let b_inputs = b.input_labels();
    for l in a.output_labels() {
        if !b_inputs.contains(&l) {
            return Err(Error::AlphabetMismatch { label: l });
        }
    }

    // index B arcs by input label per state
    let b_index: Vec<BTreeMap<Label, Vec<usize>>> = b
        .states()
        .map(|s| {
            let mut m: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
            for (i, arc) in b.arcs(s).iter().enumerate() {
                m.entry(arc.ilabel).or_default().push(i);
            }
            m
        })
        .collect();

    let mut out = Wfst::new();
    let mut ids: HashMap<(StateId, StateId, u8), StateId> = HashMap::new();
    let mut queue: VecDeque<(StateId, StateId, u8)> = VecDeque::new();
    let key0 = (a.start(), b.start(), 0u8);
    let s0 = out.add_state();
    ids.insert(key0, s0);
    out.set_start(s0);
    queue.push_back(key0);

    while let Some((sa, sb, f)) = queue.pop_front() {
        let src = ids[&(sa, sb, f)];
        if a.is_final(sa) && b.is_final(sb) {
            out.set_final(src, a.final_weight(sa) + b.final_weight(sb));
        }
        let push = |out: &mut Wfst,
                        queue: &mut VecDeque<(StateId, StateId, u8)>,
                        ids: &mut HashMap<(StateId, StateId, u8), StateId>,
                        key: (StateId, StateId, u8)|
         -> StateId {
            *ids.entry(key).or_insert_with(|| {
                queue.push_back(key);
                out.add_state()
            })
        };
        for arc_a in a.arcs(sa) {
            if arc_a.olabel == EPS {
                // A advances alone; blocked after a B-only move
                if f <= 1 {
                    let dst = push(&mut out, &mut queue, &mut ids, (arc_a.next, sb, 1));
                    out.add_arc(src, Arc::new(arc_a.ilabel, EPS, arc_a.weight, dst));
                }
            } else if let Some(matches) = b_index[sb].get(&arc_a.olabel) {
                for &bi in matches {
                    let arc_b = &b.arcs(sb)[bi];
                    let dst = push(&mut out, &mut queue, &mut ids, (arc_a.next, arc_b.next, 0));
                    out.add_arc(
                        src,
                        Arc::new(
                            arc_a.ilabel,
                            arc_b.olabel,
                            arc_a.weight + arc_b.weight,
                            dst,
                        ),
                    );
                }
            }
        }
        for arc_b in b.arcs(sb) {
            if arc_b.ilabel == EPS {
                // B advances alone
                let dst = push(&mut out, &mut queue, &mut ids, (sa, arc_b.next, 2));
                out.add_arc(src, Arc::new(EPS, arc_b.olabel, arc_b.weight, dst));
            }
        }
    }
    Ok(out.trim())
}

// ---------------------------------------------------------------------------
// Epsilon closure and subset construction
// ---------------------------------------------------------------------------

/// Total log-semiring mass per state reachable from the seeds through
/// epsilon arcs (the seeds themselves included). Generic single-source
/// relaxation; converges for epsilon cycles with total mass below one.
fn eps_closure(fst: &Wfst, seeds: &[(StateId, f64)]) -> Vec<(StateId, f64)> {
    let mut total: HashMap<StateId, f64> = HashMap::new();
    let mut pending: HashMap<StateId, f64> = HashMap::new();
    let mut queue: VecDeque<StateId> = VecDeque::new();
    for &(s, w) in seeds {
        let e = pending.entry(s).or_insert(f64::INFINITY);
        *e = log_add(*e, w);
        if !queue.contains(&s) {
            queue.push_back(s);
        }
    }
    let mut guard = 0usize;
    let limit = 100 * (fst.num_states() + seeds.len()) + 10_000;
    while let Some(s) = queue.pop_front() {
        guard += 1;
        if guard > limit {
            break; // epsilon cycle with non-vanishing mass; remaining mass < DIST_TOL
        }
        let Some(delta) = pending.remove(&s) else {
            continue;
        };
        let t = total.entry(s).or_insert(f64::INFINITY);
        let new_total = log_add(*t, delta);
        // ignore contributions that no longer change the total materially
        if t.is_finite() && *t - new_total < DIST_TOL {
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

fn subset_key(subset: &[(StateId, f64)]) -> Vec<(StateId, i64)> {
    subset
        .iter()
        .map(|&(s, r)| (s, (r / QUANTUM).round() as i64))
        .collect()
}

/// Weighted subset construction over an acceptor. The result is
/// deterministic and epsilon-free, and every input string keeps its total
/// log-semiring weight. Fails with `StateBudget` when the subset space
/// exceeds the budget.
pub fn determinize(fst: &Wfst, state_budget: usize) -> Result<Wfst> {
    if !fst.is_acceptor() {
        return Err(Error::NotAcceptor);
    }
    let fst = fst.trim();
    let mut out = Wfst::new();
    let mut ids: HashMap<Vec<(StateId, i64)>, StateId> = HashMap::new();
    let mut subsets: Vec<Vec<(StateId, f64)>> = Vec::new();
    let mut queue: VecDeque<usize> = VecDeque::new();

    let closed = eps_closure(&fst, &[(fst.start(), 0.0)]);
    let shift = closed
        .iter()
        .fold(f64::INFINITY, |acc, &(_, w)| log_add(acc, w));
    let initial: Vec<(StateId, f64)> = closed.iter().map(|&(s, w)| (s, w - shift)).collect();
    let s0 = out.add_state();
    out.set_start(s0);
    ids.insert(subset_key(&initial), s0);
    subsets.push(initial);
    queue.push_back(0);

    while let Some(qi) = queue.pop_front() {
        let subset = subsets[qi].clone();
        let src = ids[&subset_key(&subset)];
        // final weight of the subset
        let mut fin = f64::INFINITY;
        for &(s, r) in &subset {
            if fst.is_final(s) {
                fin = log_add(fin, r + fst.final_weight(s));
            }
        }
        if fin.is_finite() {
            // the initial-mass shift is folded back through the finals so
            // per-string totals survive
            out.set_final(src, fin + shift);
        }
        // group moves by input label
        let mut by_label: BTreeMap<Label, HashMap<StateId, f64>> = BTreeMap::new();
        for &(s, r) in &subset {
            for arc in fst.arcs(s) {
                if arc.ilabel == EPS {
                    continue;
                }
                let slot = by_label
                    .entry(arc.ilabel)
                    .or_default()
                    .entry(arc.next)
                    .or_insert(f64::INFINITY);
                *slot = log_add(*slot, r + arc.weight);
            }
        }
        for (label, targets) in by_label {
            let seeds: Vec<(StateId, f64)> = {
                let mut v: Vec<(StateId, f64)> = targets.into_iter().collect();
                v.sort_by_key(|&(s, _)| s);
                v
            };
            let closed = eps_closure(&fst, &seeds);
            let total = closed
                .iter()
                .fold(f64::INFINITY, |acc, &(_, w)| log_add(acc, w));
            let next: Vec<(StateId, f64)> = closed.iter().map(|&(s, w)| (s, w - total)).collect();
            let key = subset_key(&next);
            let dst = match ids.get(&key) {
                Some(&d) => d,
                None => {
                    if out.num_states() >= state_budget {
                        return Err(Error::StateBudget {
                            budget: state_budget,
                        });
                    }
                    let d = out.add_state();
                    ids.insert(key, d);
                    subsets.push(next);
                    queue.push_back(subsets.len() - 1);
                    d
                }
            };
            out.add_arc(src, Arc::new(label, label, total, dst));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shortest distance, pushing, minimization
// ---------------------------------------------------------------------------

/// Per-state total log-semiring weight of all paths to a final state
/// (including the final weight). Jacobi iteration to a fixpoint; errors if
/// the totals diverge (a cycle carrying mass >= 1).
fn distance_to_final(fst: &Wfst) -> Result<Vec<f64>> {
    let n = fst.num_states();
    let mut d = vec![f64::INFINITY; n];
    let max_iter = 60 * n + 2000;
    for _ in 0..max_iter {
        let mut change: f64 = 0.0;
        for s in 0..n {
            let mut acc = fst.final_weight(s);
            for arc in fst.arcs(s) {
                if d[arc.next].is_finite() {
                    acc = log_add(acc, arc.weight + d[arc.next]);
                }
            }
            let delta = if d[s].is_finite() {
                (d[s] - acc).abs()
            } else if acc.is_finite() {
                f64::INFINITY
            } else {
                0.0
            };
            change = change.max(if delta.is_nan() { 0.0 } else { delta });
            d[s] = acc;
        }
        if change < DIST_TOL {
            return Ok(d);
        }
    }
    Err(Error::PushDiverged)
}

fn reweight(fst: &Wfst, d: &[f64]) -> Wfst {
    let shift = d[fst.start()];
    let mut out = Wfst::new();
    for _ in 0..fst.num_states() {
        out.add_state();
    }
    out.set_start(fst.start());
    for s in fst.states() {
        if !d[s].is_finite() {
            continue;
        }
        if fst.is_final(s) {
            // the start potential folds back through the finals, a uniform
            // constant on every complete path
            out.set_final(s, fst.final_weight(s) - d[s] + shift);
        }
        for arc in fst.arcs(s) {
            if d[arc.next].is_finite() {
                out.add_arc(
                    s,
                    Arc::new(arc.ilabel, arc.olabel, arc.weight + d[arc.next] - d[s], arc.next),
                );
            }
        }
    }
    out
}

/// Push weights toward the start: after pushing, the accumulated weight of
/// any prefix is a lower bound on the total weight of each of its
/// completions (up to the folded initial mass). Per-string totals are
/// preserved.
pub fn push_weights(fst: &Wfst) -> Result<Wfst> {
    let fst = fst.trim();
    let d = distance_to_final(&fst)?;
    Ok(reweight(&fst, &d))
}

/// Minimize a deterministic acceptor: canonicalize weights by pushing,
/// then merge states by partition refinement over (final weight,
/// per-label transitions). Per-string totals are preserved.
pub fn minimize(fst: &Wfst) -> Result<Wfst> {
    if !fst.is_acceptor() {
        return Err(Error::NotAcceptor);
    }
    if !fst.is_deterministic() {
        return Err(Error::NotDeterministic);
    }
    let fst = push_weights(fst)?;
    let n = fst.num_states();

    let quant = |w: f64| -> i64 {
        if w.is_finite() {
            (w / QUANTUM).round() as i64
        } else {
            i64::MAX
        }
    };

    // initial partition: final weight class
    let mut class: Vec<usize> = {
        let mut seen: HashMap<i64, usize> = HashMap::new();
        let mut c = Vec::with_capacity(n);
        for s in 0..n {
            let k = quant(fst.final_weight(s));
            let next = seen.len();
            c.push(*seen.entry(k).or_insert(next));
        }
        c
    };
    loop {
        let mut seen: HashMap<Vec<(Label, usize, i64)>, usize> = HashMap::new();
        let mut next_class = vec![0usize; n];
        for s in 0..n {
            let mut sig: Vec<(Label, usize, i64)> = fst
                .arcs(s)
                .iter()
                .map(|a| (a.ilabel, class[a.next], quant(a.weight)))
                .collect();
            sig.sort();
            sig.push((Label::MAX, class[s], 0)); // keep the old class split
            let fresh = seen.len();
            next_class[s] = *seen.entry(sig).or_insert(fresh);
        }
        let stable = (0..n).all(|s| {
            (0..n).all(|t| (class[s] == class[t]) == (next_class[s] == next_class[t]))
        });
        class = next_class;
        if stable {
            break;
        }
    }

    let num_classes = class.iter().max().map_or(0, |m| m + 1);
    let mut out = Wfst::new();
    for _ in 0..num_classes {
        out.add_state();
    }
    out.set_start(class[fst.start()]);
    let mut done = vec![false; num_classes];
    for s in 0..n {
        let c = class[s];
        if done[c] {
            continue;
        }
        done[c] = true;
        if fst.is_final(s) {
            out.set_final(c, fst.final_weight(s));
        }
        for a in fst.arcs(s) {
            out.add_arc(c, Arc::new(a.ilabel, a.olabel, a.weight, class[a.next]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn compose_with_identity_preserves_weights() {
        // A: "1:2/0.5 then 2:3/1.25", identity B over {2,3}
        let mut a = Wfst::new();
        let (x, y, z) = (a.add_state(), a.add_state(), a.add_state());
        a.set_start(x);
        a.add_arc(x, Arc::new(1, 2, 0.5, y));
        a.add_arc(y, Arc::new(2, 3, 1.25, z));
        a.set_final(z, 0.75);

        let mut b = Wfst::new();
        let r = b.add_state();
        b.set_start(r);
        b.set_final(r, 0.0);
        b.add_arc(r, Arc::new(2, 2, 0.0, r));
        b.add_arc(r, Arc::new(3, 3, 0.0, r));

        let c = compose(&a, &b).unwrap();
        assert_eq!(c.num_states(), 3);
        let mut s = c.start();
        let mut total = 0.0;
        for expect in [(1u32, 2u32), (2, 3)] {
            assert_eq!(c.arcs(s).len(), 1);
            let arc = &c.arcs(s)[0];
            assert_eq!((arc.ilabel, arc.olabel), expect);
            total += arc.weight;
            s = arc.next;
        }
        total += c.final_weight(s);
        assert!(close(total, 2.5, 1e-12));
    }

    #[test]
    fn compose_chain_weights_add() {
        let mut a = Wfst::new();
        let (x, y) = (a.add_state(), a.add_state());
        a.set_start(x);
        a.add_arc(x, Arc::new(1, 5, 0.3, y));
        a.set_final(y, 0.1);
        let mut b = Wfst::new();
        let (u, v) = (b.add_state(), b.add_state());
        b.set_start(u);
        b.add_arc(u, Arc::new(5, 9, 0.7, v));
        b.set_final(v, 0.2);
        let c = compose(&a, &b).unwrap();
        let arc = &c.arcs(c.start())[0];
        assert_eq!((arc.ilabel, arc.olabel), (1, 9));
        assert!(close(arc.weight, 1.0, 1e-12));
        assert!(close(c.final_weight(arc.next), 0.3, 1e-12));
    }

    #[test]
    fn compose_alphabet_mismatch_detected() {
        let mut a = Wfst::new();
        let (x, y) = (a.add_state(), a.add_state());
        a.set_start(x);
        a.add_arc(x, Arc::new(1, 7, 0.0, y));
        a.set_final(y, 0.0);
        let mut b = Wfst::new();
        let u = b.add_state();
        b.set_start(u);
        b.set_final(u, 0.0);
        b.add_arc(u, Arc::new(5, 5, 0.0, u));
        assert!(matches!(
            compose(&a, &b),
            Err(Error::AlphabetMismatch { label: 7 })
        ));
    }

    #[test]
    fn determinize_merges_parallel_arcs() {
        let w = -(0.1f64).ln();
        let mut f = Wfst::new();
        let (s0, s1) = (f.add_state(), f.add_state());
        f.set_start(s0);
        f.add_arc(s0, Arc::new(1, 1, w, s1));
        f.add_arc(s0, Arc::new(1, 1, w, s1));
        f.set_final(s1, 0.0);
        let d = determinize(&f, 1000).unwrap();
        assert!(d.is_deterministic());
        assert_eq!(d.arcs(d.start()).len(), 1);
        let arc = &d.arcs(d.start())[0];
        assert!(close(arc.weight, -(0.2f64).ln(), 1e-9));
    }

    #[test]
    fn determinize_on_deterministic_input_preserves_language() {
        let mut f = Wfst::new();
        let (s0, s1, s2) = (f.add_state(), f.add_state(), f.add_state());
        f.set_start(s0);
        f.add_arc(s0, Arc::new(1, 1, 0.25, s1));
        f.add_arc(s0, Arc::new(2, 2, 0.5, s2));
        f.add_arc(s1, Arc::new(2, 2, 0.125, s2));
        f.set_final(s2, 0.0625);
        let d = determinize(&f, 1000).unwrap();
        assert!(d.is_deterministic());
        // both strings keep their weights
        let weight_of = |fst: &Wfst, labels: &[Label]| -> f64 {
            let mut s = fst.start();
            let mut w = 0.0;
            for &l in labels {
                let arc = fst.arcs(s).iter().find(|a| a.ilabel == l).unwrap();
                w += arc.weight;
                s = arc.next;
            }
            w + fst.final_weight(s)
        };
        assert!(close(weight_of(&d, &[1, 2]), 0.4375, 1e-9));
        assert!(close(weight_of(&d, &[2]), 0.5625, 1e-9));
    }

    #[test]
    fn determinize_rejects_transducers_and_honors_budget() {
        let mut f = Wfst::new();
        let (s0, s1) = (f.add_state(), f.add_state());
        f.set_start(s0);
        f.add_arc(s0, Arc::new(1, 2, 0.0, s1));
        f.set_final(s1, 0.0);
        assert!(matches!(determinize(&f, 10), Err(Error::NotAcceptor)));

        let mut g = Wfst::new();
        let states: Vec<_> = (0..5).map(|_| g.add_state()).collect();
        g.set_start(states[0]);
        for i in 0..4 {
            g.add_arc(states[i], Arc::new(1, 1, 0.0, states[i + 1]));
        }
        g.set_final(states[4], 0.0);
        assert!(matches!(
            determinize(&g, 2),
            Err(Error::StateBudget { budget: 2 })
        ));
    }

    #[test]
    fn minimize_merges_weight_identical_states() {
        // 4 states: two equivalent middle states with identical weights
        let mut f = Wfst::new();
        let s0 = f.add_state();
        let s1 = f.add_state();
        let s2 = f.add_state();
        let s3 = f.add_state();
        f.set_start(s0);
        f.add_arc(s0, Arc::new(1, 1, 0.5, s1));
        f.add_arc(s0, Arc::new(2, 2, 0.5, s2));
        f.add_arc(s1, Arc::new(3, 3, 0.25, s3));
        f.add_arc(s2, Arc::new(3, 3, 0.25, s3));
        f.set_final(s3, 0.0);
        let m = minimize(&f).unwrap();
        assert_eq!(m.num_states(), 3);
    }

    #[test]
    fn minimize_rejects_nondeterministic() {
        let mut f = Wfst::new();
        let (s0, s1) = (f.add_state(), f.add_state());
        f.set_start(s0);
        f.add_arc(s0, Arc::new(1, 1, 0.0, s1));
        f.add_arc(s0, Arc::new(1, 1, 0.5, s1));
        f.set_final(s1, 0.0);
        assert!(matches!(minimize(&f), Err(Error::NotDeterministic)));
    }

    #[test]
    fn push_is_idempotent() {
        let mut f = Wfst::new();
        let (s0, s1, s2) = (f.add_state(), f.add_state(), f.add_state());
        f.set_start(s0);
        f.add_arc(s0, Arc::new(1, 1, 0.1, s1));
        f.add_arc(s0, Arc::new(2, 2, 2.0, s2));
        f.add_arc(s1, Arc::new(3, 3, 3.0, s2));
        f.set_final(s2, 0.5);
        let p1 = push_weights(&f).unwrap();
        let p2 = push_weights(&p1).unwrap();
        assert_eq!(p1.num_states(), p2.num_states());
        for s in p1.states() {
            for (a, b) in p1.arcs(s).iter().zip(p2.arcs(s)) {
                assert!(close(a.weight, b.weight, 1e-12));
            }
            if p1.is_final(s) {
                assert!(close(p1.final_weight(s), p2.final_weight(s), 1e-12));
            }
        }
    }
}
