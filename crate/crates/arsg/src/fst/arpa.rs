//! ARPA backoff n-gram models: parsing, serialization, and the standard
//! backoff probability lookup.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const SENT_START: &str = "<s>";
pub const SENT_END: &str = "</s>";

#[derive(Debug, Clone, PartialEq)]
pub struct NgramEntry {
    pub log10_prob: f64,
    pub backoff_log10: Option<f64>,
}

/// A parsed ARPA model. Words are interned; `grams[n-1]` maps a length-n
/// word-id sequence to its entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ArpaModel {
    order: usize,
    vocab: Vec<String>,
    word_ids: HashMap<String, u32>,
    grams: Vec<HashMap<Vec<u32>, NgramEntry>>,
}

impl ArpaModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn word_id(&self, w: &str) -> Option<u32> {
        self.word_ids.get(w).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    /// Vocabulary without the sentence delimiters.
    pub fn regular_words(&self) -> Vec<&str> {
        self.vocab
            .iter()
            .map(|s| s.as_str())
            .filter(|w| *w != SENT_START && *w != SENT_END)
            .collect()
    }

    pub fn ngrams(&self, n: usize) -> impl Iterator<Item = (&Vec<u32>, &NgramEntry)> {
        self.grams[n - 1].iter()
    }

    pub fn ngram_count(&self, n: usize) -> usize {
        self.grams[n - 1].len()
    }

    pub fn entry(&self, gram: &[u32]) -> Option<&NgramEntry> {
        self.grams.get(gram.len().wrapping_sub(1))?.get(gram)
    }

    /// Backoff weight of a history in log10; 0 when the history exists but
    /// lists none or does not exist at all (standard lookup semantics).
    fn backoff_log10(&self, history: &[u32]) -> f64 {
        if history.is_empty() {
            return 0.0;
        }
        self.entry(history)
            .and_then(|e| e.backoff_log10)
            .unwrap_or(0.0)
    }

    /// Conditional log10 probability with standard backoff:
    /// p(w|h) = P(h,w) if explicit, else b(h) * p(w|h[1..]).
    pub fn cond_log10(&self, history: &[u32], word: u32) -> f64 {
        let mut h = history;
        // truncate to what the model can condition on
        if h.len() > self.order - 1 {
            h = &h[h.len() - (self.order - 1)..];
        }
        let mut gram = h.to_vec();
        gram.push(word);
        if let Some(e) = self.entry(&gram) {
            return e.log10_prob;
        }
        if h.is_empty() {
            return f64::NEG_INFINITY; // out of vocabulary
        }
        self.backoff_log10(h) + self.cond_log10(&h[1..], word)
    }

    /// log10 probability of a sentence (without delimiters); `<s>` starts
    /// the context and `</s>` is scored at the end when the model has them.
    pub fn sentence_log10(&self, words: &[&str]) -> Result<f64> {
        let mut context: Vec<u32> = Vec::new();
        if let Some(id) = self.word_id(SENT_START) {
            context.push(id);
        }
        let mut total = 0.0;
        for w in words {
            let id = self
                .word_id(w)
                .ok_or_else(|| Error::OovWord(w.to_string()))?;
            total += self.cond_log10(&context, id);
            context.push(id);
            if context.len() > self.order.saturating_sub(1) {
                context.remove(0);
            }
        }
        if let Some(id) = self.word_id(SENT_END) {
            total += self.cond_log10(&context, id);
        }
        Ok(total)
    }

    /// Render back to ARPA text. Entries are sorted by word ids, so this is
    /// a canonical form; parse(serialize(parse(x))) == parse(x).
    pub fn serialize(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for n in 1..=self.order {
            out.push_str(&format!("ngram {}={}\n", n, self.grams[n - 1].len()));
        }
        for n in 1..=self.order {
            out.push_str(&format!("\n\\{n}-grams:\n"));
            let mut entries: Vec<(&Vec<u32>, &NgramEntry)> = self.grams[n - 1].iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            for (ids, e) in entries {
                let words: Vec<&str> = ids.iter().map(|&i| self.word(i)).collect();
                out.push_str(&format!("{}\t{}", e.log10_prob, words.join(" ")));
                if let Some(b) = e.backoff_log10 {
                    out.push_str(&format!("\t{b}"));
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }
}

enum Section {
    Preamble,
    Data,
    Grams(usize),
    Done,
}

/// Parse ARPA text. Declared counts must match, probabilities must be
/// nonpositive in log10, and every higher-order context must exist as a
/// lower-order entry.
pub fn parse_arpa(text: &str) -> Result<ArpaModel> {
    let mut declared: Vec<usize> = Vec::new();
    let mut vocab: Vec<String> = Vec::new();
    let mut word_ids: HashMap<String, u32> = HashMap::new();
    let mut grams: Vec<HashMap<Vec<u32>, NgramEntry>> = Vec::new();
    let mut section = Section::Preamble;
    let mut saw_end = false;

    let intern = |vocab: &mut Vec<String>, word_ids: &mut HashMap<String, u32>, w: &str| {
        if let Some(&id) = word_ids.get(w) {
            id
        } else {
            let id = vocab.len() as u32;
            vocab.push(w.to_string());
            word_ids.insert(w.to_string(), id);
            id
        }
    };

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = ln + 1;
        let err = |msg: String| Error::ArpaParse { line: lineno, msg };
        if line.is_empty() {
            continue;
        }
        if line == "\\data\\" {
            section = Section::Data;
            continue;
        }
        if line == "\\end\\" {
            saw_end = true;
            section = Section::Done;
            continue;
        }
        if let Some(rest) = line.strip_prefix('\\') {
            if let Some(n) = rest.strip_suffix("-grams:") {
                let n: usize = n
                    .parse()
                    .map_err(|_| err(format!("bad section header \\{rest}")))?;
                if n == 0 || n > declared.len() {
                    return Err(err(format!(
                        "section \\{n}-grams: not declared in \\data\\"
                    )));
                }
                section = Section::Grams(n);
                continue;
            }
            return Err(err(format!("unrecognized section header {line}")));
        }
        match section {
            Section::Preamble | Section::Done => {
                // header junk before \data\ is tolerated; content after \end\ is not
                if saw_end {
                    return Err(err("content after \\end\\".into()));
                }
            }
            Section::Data => {
                let rest = line
                    .strip_prefix("ngram ")
                    .ok_or_else(|| err(format!("expected 'ngram N=count', got {line}")))?;
                let (n, count) = rest
                    .split_once('=')
                    .ok_or_else(|| err("expected 'ngram N=count'".into()))?;
                let n: usize = n.trim().parse().map_err(|_| err("bad ngram order".into()))?;
                let count: usize = count
                    .trim()
                    .parse()
                    .map_err(|_| err("bad ngram count".into()))?;
                if n != declared.len() + 1 {
                    return Err(err("ngram orders must be declared consecutively".into()));
                }
                declared.push(count);
                grams.push(HashMap::new());
            }
            Section::Grams(n) => {
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != n + 1 && fields.len() != n + 2 {
                    return Err(err(format!(
                        "{n}-gram line needs {} or {} fields, got {}",
                        n + 1,
                        n + 2,
                        fields.len()
                    )));
                }
                let logp: f64 = fields[0]
                    .parse()
                    .map_err(|_| err("bad log10 probability".into()))?;
                if logp > 0.0 {
                    return Err(err(format!("log10 probability {logp} is positive")));
                }
                let backoff = if fields.len() == n + 2 {
                    Some(
                        fields[n + 1]
                            .parse::<f64>()
                            .map_err(|_| err("bad backoff weight".into()))?,
                    )
                } else {
                    None
                };
                let ids: Vec<u32> = fields[1..=n]
                    .iter()
                    .map(|w| intern(&mut vocab, &mut word_ids, w))
                    .collect();
                if grams[n - 1]
                    .insert(
                        ids.clone(),
                        NgramEntry {
                            log10_prob: logp,
                            backoff_log10: backoff,
                        },
                    )
                    .is_some()
                {
                    return Err(err(format!(
                        "duplicate {n}-gram \"{}\"",
                        fields[1..=n].join(" ")
                    )));
                }
            }
        }
    }

    if declared.is_empty() {
        return Err(Error::ArpaParse {
            line: 0,
            msg: "missing \\data\\ section".into(),
        });
    }
    if !saw_end {
        return Err(Error::ArpaParse {
            line: 0,
            msg: "missing \\end\\ marker".into(),
        });
    }
    for (n, &count) in declared.iter().enumerate() {
        let found = grams[n].len();
        if found != count {
            return Err(Error::ArpaCount {
                order: n + 1,
                declared: count,
                found,
            });
        }
    }
    let order = declared.len();
    let model = ArpaModel {
        order,
        vocab,
        word_ids,
        grams,
    };
    // every higher-order gram's context must exist one order below
    for n in 2..=order {
        for ids in model.grams[n - 1].keys() {
            let context = &ids[..n - 1];
            if !model.grams[n - 2].contains_key(context) {
                let gram = ids
                    .iter()
                    .map(|&i| model.word(i))
                    .collect::<Vec<_>>()
                    .join(" ");
                let ctx = context
                    .iter()
                    .map(|&i| model.word(i))
                    .collect::<Vec<_>>()
                    .join(" ");
                return Err(Error::ArpaContext {
                    order: n,
                    gram,
                    context: ctx,
                    prev: n - 1,
                });
            }
        }
    }
    Ok(model)
}
