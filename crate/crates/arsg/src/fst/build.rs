//! Grammar and lexicon transducer construction.
//!
//! The grammar G is the standard backoff construction: one state per
//! observed history, word arcs weighted -ln P, epsilon backoff arcs to the
//! shortened history (added only when the entry lists a backoff weight),
//! and sentence end carried by final weights. The lexicon L spells each
//! word out letter by letter, emits the word label on the first letter
//! arc, requires a trailing space as the word separator, and loops at the
//! root.

use std::collections::HashMap;
use std::f64::consts::LN_10;

use crate::decoder::Alphabet;
use crate::error::{Error, Result};
use crate::fst::arpa::{ArpaModel, SENT_END, SENT_START};
use crate::fst::ops;
use crate::fst::{Arc, Label, Wfst, EPS};

/// Word ids map to FST labels with an offset for epsilon.
pub fn word_label(word_id: u32) -> Label {
    word_id + 1
}

/// Alphabet labels map to FST input labels with an offset for epsilon.
pub fn char_label(alphabet_label: usize) -> Label {
    alphabet_label as Label + 1
}

pub fn build_grammar_fst(arpa: &ArpaModel) -> Result<Wfst> {
    let order = arpa.order();
    let start_id = arpa.word_id(SENT_START);
    let end_id = arpa.word_id(SENT_END);

    let mut fst = Wfst::new();
    let mut state_of: HashMap<Vec<u32>, usize> = HashMap::new();
    let empty_state = fst.add_state();
    state_of.insert(Vec::new(), empty_state);
    // a state per history: every n-gram below the model order that could
    // ever be conditioned on (histories containing </s> cannot)
    for n in 1..order {
        for (ids, _) in arpa.ngrams(n) {
            if end_id.is_some_and(|e| ids.contains(&e)) {
                continue;
            }
            if !state_of.contains_key(ids) {
                let s = fst.add_state();
                state_of.insert(ids.clone(), s);
            }
        }
    }

    let dest_history = |history: &[u32], word: u32, state_of: &HashMap<Vec<u32>, usize>| -> usize {
        let mut next: Vec<u32> = history.to_vec();
        next.push(word);
        if next.len() > order - 1 {
            next.remove(0);
        }
        loop {
            if let Some(&s) = state_of.get(&next) {
                return s;
            }
            next.remove(0);
        }
    };

    for n in 1..=order {
        for (ids, entry) in arpa.ngrams(n) {
            let (history, word) = (&ids[..n - 1], ids[n - 1]);
            if Some(word) == start_id {
                continue; // <s> is never emitted; its entry only carries backoff
            }
            let Some(&src) = state_of.get(history) else {
                continue; // history contains </s>; unreachable context
            };
            let weight = -entry.log10_prob * LN_10;
            if Some(word) == end_id {
                fst.set_final(src, weight);
            } else {
                let dst = dest_history(history, word, &state_of);
                let label = word_label(word);
                fst.add_arc(src, Arc::new(label, label, weight, dst));
            }
        }
    }

    // backoff arcs, only where the model lists a backoff weight
    for (history, &src) in &state_of {
        if history.is_empty() {
            continue;
        }
        if let Some(entry) = arpa.entry(history) {
            if let Some(b) = entry.backoff_log10 {
                let shorter = &history[1..];
                let mut key = shorter.to_vec();
                let dst = loop {
                    if let Some(&s) = state_of.get(&key) {
                        break s;
                    }
                    key.remove(0);
                };
                fst.add_arc(src, Arc::new(EPS, EPS, -b * LN_10, dst));
            }
        }
    }

    let start_state = start_id
        .and_then(|id| state_of.get(&vec![id]).copied())
        .unwrap_or(empty_state);
    fst.set_start(start_state);

    // without an explicit sentence-end word every history may terminate freely
    if end_id.is_none() {
        for s in 0..fst.num_states() {
            fst.set_final(s, 0.0);
        }
    }
    Ok(fst.trim())
}

/// Spelling transducer over (word, label) pairs. Each word consumes its
/// letters and then the space separator, emitting its label on the first
/// letter arc.
pub fn build_lexicon_fst(vocab: &[(String, Label)], alphabet: &Alphabet) -> Result<Wfst> {
    let space = alphabet
        .space()
        .ok_or_else(|| Error::Config("lexicon requires a space character in the alphabet".into()))?;
    let mut fst = Wfst::new();
    let root = fst.add_state();
    fst.set_start(root);
    fst.set_final(root, 0.0);
    for (word, wlabel) in vocab {
        if word.is_empty() {
            return Err(Error::Config("lexicon words must be nonempty".into()));
        }
        let mut cur = root;
        for (i, ch) in word.chars().enumerate() {
            let clabel = alphabet
                .label_of_char(ch)
                .ok_or(Error::BadSpelling {
                    word: word.clone(),
                    ch,
                })
                .map(char_label)?;
            let olabel = if i == 0 { *wlabel } else { EPS };
            let next = fst.add_state();
            fst.add_arc(cur, Arc::new(clabel, olabel, 0.0, next));
            cur = next;
        }
        fst.add_arc(cur, Arc::new(char_label(space), EPS, 0.0, root));
    }
    Ok(fst)
}

#[derive(Debug, Clone, Copy)]
pub struct CharLmOptions {
    pub determinize: bool,
    pub state_budget: usize,
}

impl Default for CharLmOptions {
    fn default() -> Self {
        CharLmOptions {
            determinize: true,
            state_budget: 1_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildStats {
    pub composed_states: usize,
    pub composed_arcs: usize,
    pub final_states: usize,
    pub final_arcs: usize,
    pub determinized: bool,
}

/// The full character-level language model: compose the lexicon with the
/// grammar, then (by default) project to the input side, determinize,
/// minimize and push weights toward the start. A closed vocabulary is
/// enforced in both directions.
pub fn build_char_lm(
    arpa: &ArpaModel,
    lexicon_words: &[String],
    alphabet: &Alphabet,
    opts: &CharLmOptions,
) -> Result<(Wfst, BuildStats)> {
    let mut vocab: Vec<(String, Label)> = Vec::with_capacity(lexicon_words.len());
    let mut spelled: HashMap<&str, ()> = HashMap::new();
    for w in lexicon_words {
        let id = arpa
            .word_id(w)
            .ok_or_else(|| Error::OovWord(w.clone()))?;
        vocab.push((w.clone(), word_label(id)));
        spelled.insert(w.as_str(), ());
    }
    for w in arpa.regular_words() {
        if !spelled.contains_key(w) {
            return Err(Error::Config(format!(
                "grammar word \"{w}\" is missing from the lexicon (closed vocabulary)"
            )));
        }
    }

    let g = build_grammar_fst(arpa)?;
    let l = build_lexicon_fst(&vocab, alphabet)?;
    let composed = ops::compose(&l, &g)?.trim();
    let stats0 = (composed.num_states(), composed.num_arcs());

    let (result, determinized) = if opts.determinize {
        let projected = composed.project_input();
        let det = ops::determinize(&projected, opts.state_budget)?;
        let min = ops::minimize(&det)?;
        (ops::push_weights(&min)?, true)
    } else {
        (composed, false)
    };
    let stats = BuildStats {
        composed_states: stats0.0,
        composed_arcs: stats0.1,
        final_states: result.num_states(),
        final_arcs: result.num_arcs(),
        determinized,
    };
    Ok((result, stats))
}
