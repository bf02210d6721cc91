//! Dataset handling: delta features, synthetic corpus generation, text
//! normalization, error-rate metrics, and the on-disk formats.
//!
//! Feature files are little-endian binary: two u32 header words (rows,
//! cols) followed by row-major f32 values. The manifest is tab-separated
//! text: id, relative feature path, transcript.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::decoder::Alphabet;
use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};

/// One utterance: feature frames plus an EOS-terminated label transcript.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub frames: Tensor,
    pub transcript: Vec<usize>,
}

/// Append first- and second-order temporal derivatives: T x d -> T x 3d.
///
/// Deltas use the regression formula with window 2,
/// d_t = sum_{n=1..2} n (x_{t+n} - x_{t-n}) / (2 (1^2 + 2^2)),
/// with boundary frames repeated at the edges.
pub fn add_deltas(features: &Tensor) -> Tensor {
    let t = features.rows();
    let d = features.cols();
    let denom: Real = 10.0; // 2 * (1 + 4)

    let delta_of = |src: &dyn Fn(usize, usize) -> Real, ti: usize, j: usize| -> Real {
        let clamp = |x: isize| -> usize { x.clamp(0, t as isize - 1) as usize };
        let ti = ti as isize;
        let mut acc = 0.0;
        for n in 1..=2isize {
            acc += n as Real * (src(clamp(ti + n), j) - src(clamp(ti - n), j));
        }
        acc / denom
    };

    let base = |ti: usize, j: usize| features.row(ti)[j];
    let mut first = Tensor::zeros(&[t, d]);
    for ti in 0..t {
        for j in 0..d {
            first.data_mut()[ti * d + j] = delta_of(&base, ti, j);
        }
    }
    let firstf = |ti: usize, j: usize| first.row(ti)[j];
    let mut second = Tensor::zeros(&[t, d]);
    for ti in 0..t {
        for j in 0..d {
            second.data_mut()[ti * d + j] = delta_of(&firstf, ti, j);
        }
    }

    let mut out = Tensor::zeros(&[t, 3 * d]);
    for ti in 0..t {
        let dst = &mut out.data_mut()[ti * 3 * d..(ti + 1) * 3 * d];
        dst[..d].copy_from_slice(features.row(ti));
        dst[d..2 * d].copy_from_slice(first.row(ti));
        dst[2 * d..].copy_from_slice(second.row(ti));
    }
    out
}

/// Lowercase and project onto the alphabet: letters, apostrophe, period,
/// dash and space are kept, a configurable noise marker maps to the noise
/// token, everything else is dropped. Runs of spaces collapse to one.
/// The end-of-sequence label is appended.
pub fn normalize_text(raw: &str, alphabet: &Alphabet, noise_marker: Option<char>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last_was_space = false;
    for c in raw.chars() {
        if Some(c) == noise_marker {
            if let Some(n) = alphabet.noise() {
                out.push(n);
                last_was_space = false;
            }
            continue;
        }
        let c = c.to_ascii_lowercase();
        if let Some(label) = alphabet.label_of_char(c) {
            if Some(label) == alphabet.space() {
                if last_was_space {
                    continue;
                }
                last_was_space = true;
            } else {
                last_was_space = false;
            }
            out.push(label);
        }
    }
    out.push(alphabet.eos());
    out
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, av) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bv) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(av != bv);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn strip_eos(labels: &[usize], eos: usize) -> Vec<usize> {
    labels.iter().copied().filter(|&l| l != eos).collect()
}

/// Character error rate: edit distance over labels (excluding EOS) divided
/// by the reference length.
pub fn cer(hyp: &[usize], reference: &[usize], alphabet: &Alphabet) -> Result<f64> {
    let h = strip_eos(hyp, alphabet.eos());
    let r = strip_eos(reference, alphabet.eos());
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64)
}

fn words_of(labels: &[usize], alphabet: &Alphabet) -> Vec<Vec<usize>> {
    let stripped = strip_eos(labels, alphabet.eos());
    let Some(space) = alphabet.space() else {
        return vec![stripped];
    };
    stripped
        .split(|&l| l == space)
        .filter(|w| !w.is_empty())
        .map(|w| w.to_vec())
        .collect()
}

/// Word error rate over space-delimited words.
pub fn wer(hyp: &[usize], reference: &[usize], alphabet: &Alphabet) -> Result<f64> {
    let h = words_of(hyp, alphabet);
    let r = words_of(reference, alphabet);
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// How utterance text is drawn.
#[derive(Debug, Clone)]
pub enum TextSource {
    /// Uniform random characters (no space handling); lengths inclusive.
    Chars { min_len: usize, max_len: usize },
    /// Space-joined words drawn uniformly from a vocabulary.
    Words {
        vocab: Vec<String>,
        min_words: usize,
        max_words: usize,
    },
}

/// Synthetic speech-like rendering: each character has a fixed orthonormal
/// base pattern, repeated for a random number of frames and corrupted by
/// Gaussian noise; silence precedes and follows.
#[derive(Debug, Clone)]
pub struct SyntheticTaskSpec {
    pub alphabet: Alphabet,
    pub text: TextSource,
    pub base_dim: usize,
    /// Frames per character, inclusive range.
    pub frames_per_char: (usize, usize),
    pub noise_std: Real,
    pub lead_silence: (usize, usize),
    pub trail_silence: (usize, usize),
    /// Pairs of characters rendered with near-identical patterns; the gap
    /// is the norm of the distinguishing component.
    pub confusable: Vec<(char, char)>,
    pub confusable_gap: Real,
    /// Render the space character as a silent gap instead of a pattern.
    pub silent_space: bool,
    /// Norm of each character's base pattern.
    pub pattern_scale: Real,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.frames_per_char;
        if a < 1 || a > b {
            return Err(Error::Config(
                "frames_per_char range must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }

    /// Orthonormal base pattern per renderable label, fixed by the seed.
    /// Confusable pairs share their pattern up to a small orthogonal
    /// component of norm `confusable_gap`.
    pub fn base_patterns(&self) -> HashMap<usize, Vec<Real>> {
        let chars = self.alphabet.chars();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e3779b97f4a7c15);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        // Gram-Schmidt over random Gaussian vectors; one extra direction
        // per confusable pair for the distinguishing component.
        let needed = chars.len() + self.confusable.len();
        let mut basis: Vec<Vec<Real>> = Vec::with_capacity(needed);
        while basis.len() < needed.min(self.base_dim) {
            let mut v: Vec<Real> = (0..self.base_dim)
                .map(|_| normal.sample(&mut rng) as Real)
                .collect();
            for b in &basis {
                let proj: Real = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
            let norm: Real = v.iter().map(|x| x * x).sum::<Real>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            for x in v.iter_mut() {
                *x /= norm;
            }
            basis.push(v);
        }
        let mut patterns = HashMap::new();
        let mut extra = chars.len();
        for (i, c) in chars.iter().enumerate() {
            let label = self.alphabet.label_of_char(*c).unwrap();
            if self.silent_space && *c == ' ' {
                patterns.insert(label, vec![0.0; self.base_dim]);
            } else {
                let p = basis[i % basis.len()].iter().map(|v| v * self.pattern_scale).collect();
                patterns.insert(label, p);
            }
        }
        for (a, b) in &self.confusable {
            let (Some(la), Some(lb)) = (
                self.alphabet.label_of_char(*a),
                self.alphabet.label_of_char(*b),
            ) else {
                continue;
            };
            let shared = patterns[&la].clone();
            let diff = basis[extra % basis.len()].clone();
            extra += 1;
            let near: Vec<Real> = shared
                .iter()
                .zip(&diff)
                .map(|(s, d)| s + self.confusable_gap * d)
                .collect();
            patterns.insert(lb, near);
        }
        patterns
    }

    fn draw_text(&self, rng: &mut ChaCha8Rng) -> String {
        match &self.text {
            TextSource::Chars { min_len, max_len } => {
                // spaces only between characters, never doubled
                let chars: Vec<char> = self.alphabet.chars();
                let nonspace: Vec<char> = chars.iter().copied().filter(|c| *c != ' ').collect();
                let n = rng.random_range(*min_len..=*max_len);
                let mut out = String::new();
                for i in 0..n {
                    let space_ok = i > 0 && i + 1 < n && !out.ends_with(' ');
                    let pool = if space_ok { &chars } else { &nonspace };
                    out.push(pool[rng.random_range(0..pool.len())]);
                }
                out
            }
            TextSource::Words {
                vocab,
                min_words,
                max_words,
            } => {
                let n = rng.random_range(*min_words..=*max_words);
                (0..n)
                    .map(|_| vocab[rng.random_range(0..vocab.len())].as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        }
    }
}

/// Generate a deterministic synthetic dataset. The character base
/// patterns depend only on `spec.seed` (the task identity); `stream`
/// varies the utterance randomness, so train and dev splits of one task
/// use different streams over the same patterns.
pub fn synth_generate_stream(
    spec: &SyntheticTaskSpec,
    count: usize,
    stream: u64,
) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let patterns = spec.base_patterns();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(stream.wrapping_mul(0x9e3779b97f4a7c15)));
    let noise = Normal::new(0.0f64, spec.noise_std.max(0.0) as f64).unwrap();
    let mut out = Vec::with_capacity(count);
    for idx in 0..count {
        let text = spec.draw_text(&mut rng);
        let transcript = normalize_text(&text, &spec.alphabet, None);
        let lead = rng.random_range(spec.lead_silence.0..=spec.lead_silence.1);
        let trail = rng.random_range(spec.trail_silence.0..=spec.trail_silence.1);
        let mut frames: Vec<Vec<Real>> = Vec::new();
        for _ in 0..lead {
            frames.push(vec![0.0; spec.base_dim]);
        }
        for &label in &transcript {
            if label == spec.alphabet.eos() {
                continue;
            }
            let pattern = patterns
                .get(&label)
                .ok_or_else(|| Error::Config(format!("label {label} has no base pattern")))?;
            let reps = rng.random_range(spec.frames_per_char.0..=spec.frames_per_char.1);
            for _ in 0..reps {
                frames.push(pattern.clone());
            }
        }
        for _ in 0..trail {
            frames.push(vec![0.0; spec.base_dim]);
        }
        let t = frames.len();
        let mut data = Vec::with_capacity(t * spec.base_dim);
        for row in frames {
            for v in row {
                data.push(v + if spec.noise_std > 0.0 {
                    noise.sample(&mut rng) as Real
                } else {
                    0.0
                });
            }
        }
        out.push(Utterance {
            id: format!("utt{idx:05}"),
            frames: Tensor::from_vec(&[t, spec.base_dim], data)?,
            transcript,
        });
    }
    Ok(out)
}

/// `synth_generate_stream` on the default stream.
pub fn synth_generate(spec: &SyntheticTaskSpec, count: usize) -> Result<Vec<Utterance>> {
    synth_generate_stream(spec, count, 0)
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Write a feature matrix: u32 rows, u32 cols, then row-major f32, all
/// little-endian.
pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + frames.len() * 4);
    buf.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    for v in frames.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Config(format!(
            "feature file {} is truncated",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expect = 8 + rows * cols * 4;
    if bytes.len() != expect {
        return Err(Error::Config(format!(
            "feature file {}: expected {} bytes, found {}",
            path.display(),
            expect,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[8..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as Real);
    }
    Tensor::from_vec(&[rows, cols], data)
}

/// Write the dataset as `manifest.tsv` plus a `features/` directory.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, utterances: &[Utterance], alphabet: &Alphabet) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let manifest = dir.join("manifest.tsv");
    let mut lines = String::new();
    for utt in utterances {
        let rel = format!("features/{}.bin", utt.id);
        write_features(&dir.join(&rel), &utt.frames)?;
        let text = alphabet.render(&utt.transcript);
        lines.push_str(&format!("{}\t{}\t{}\n", utt.id, rel, text));
    }
    fs::write(&manifest, lines)?;
    Ok(manifest)
}

/// Load a dataset from its manifest. Transcripts are re-normalized onto
/// the alphabet (a projection, so stored normalized text is unchanged).
pub fn load_dataset(manifest: &Path, alphabet: &Alphabet) -> Result<Vec<Utterance>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(manifest)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(rel)) = (parts.next(), parts.next()) else {
            return Err(Error::Config(format!(
                "manifest {} line {}: expected id<TAB>path<TAB>text",
                manifest.display(),
                ln + 1
            )));
        };
        let transcript = normalize_text(parts.next().unwrap_or(""), alphabet, None);
        let frames = read_features(&base.join(rel))?;
        out.push(Utterance {
            id: id.to_string(),
            frames,
            transcript,
        });
    }
    Ok(out)
}
