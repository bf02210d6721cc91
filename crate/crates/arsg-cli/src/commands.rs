//! Command implementations shared by the binary and the test suites.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use arsg::data;
use arsg::fst::arpa::parse_arpa;
use arsg::fst::build::{build_char_lm, CharLmOptions};
use arsg::fst::Wfst;
use arsg::search::{beam_search, DecodeConfig, LmFusion};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::trainer::{model_from_checkpoint, prepare_frames, Trainer};

/// Generate train/ and dev/ datasets under `out`. The dev split draws
/// from the same task with an offset seed.
pub fn cmd_datagen(cfg: &RunConfig, out: &Path, train_count: usize, dev_count: usize) -> Result<()> {
    let alphabet = cfg.alphabet()?;
    let spec = cfg.synth_spec()?;
    let train = data::synth_generate_stream(&spec, train_count, 0)?;
    let dev = data::synth_generate_stream(&spec, dev_count, 1)?;
    for (split, utts) in [("train", &train), ("dev", &dev)] {
        let dir = out.join(split);
        fs::create_dir_all(&dir)?;
        data::write_dataset(&dir, utts, &alphabet)?;
    }
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    println!(
        "wrote {} train / {} dev utterances to {}",
        train.len(),
        dev.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug)]
pub struct FstBuildReport {
    pub states: usize,
    pub arcs: usize,
    pub determinized: bool,
}

/// Compile the character-level language model T from an ARPA model and a
/// word list.
pub fn cmd_fst_build(
    cfg: &RunConfig,
    arpa_path: &Path,
    vocab_path: &Path,
    out: &Path,
    no_determinize: bool,
    state_budget: usize,
) -> Result<FstBuildReport> {
    let arpa_text = fs::read_to_string(arpa_path)
        .with_context(|| format!("reading ARPA model {}", arpa_path.display()))?;
    let arpa = parse_arpa(&arpa_text)?;
    let words: Vec<String> = fs::read_to_string(vocab_path)
        .with_context(|| format!("reading vocabulary {}", vocab_path.display()))?
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if words.is_empty() {
        bail!("vocabulary {} is empty", vocab_path.display());
    }
    let alphabet = cfg.alphabet()?;
    let opts = CharLmOptions {
        determinize: !no_determinize,
        state_budget,
    };
    let (fst, stats) = match build_char_lm(&arpa, &words, &alphabet, &opts) {
        Err(arsg::Error::StateBudget { budget }) => bail!(
            "determinization exceeded the budget of {budget} states; \
             rerun with --no-determinize to keep the raw composed FST \
             (scoring handles nondeterministic machines)"
        ),
        other => other?,
    };
    fst.save(out)?;
    println!(
        "composed {} states / {} arcs; wrote {} states / {} arcs to {} ({})",
        stats.composed_states,
        stats.composed_arcs,
        stats.final_states,
        stats.final_arcs,
        out.display(),
        if stats.determinized {
            "determinized + minimized + pushed"
        } else {
            "raw composition"
        }
    );
    Ok(FstBuildReport {
        states: stats.final_states,
        arcs: stats.final_arcs,
        determinized: stats.determinized,
    })
}

/// Train (optionally resuming), then run the annealing phase if
/// configured. Writes `metrics.jsonl`, `last.ckpt` and `best.ckpt` under
/// the run directory.
pub fn cmd_train(
    cfg: RunConfig,
    data_dir: &Path,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let alphabet = cfg.alphabet()?;
    let train = prepare_frames(
        &cfg,
        data::load_dataset(&data_dir.join("train/manifest.tsv"), &alphabet)?,
    );
    let dev = prepare_frames(
        &cfg,
        data::load_dataset(&data_dir.join("dev/manifest.tsv"), &alphabet)?,
    );
    if train.is_empty() || dev.is_empty() {
        bail!("training requires nonempty train and dev splits");
    }
    let input_dim = train[0].frames.cols();

    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(path, run_dir)?,
        None => Trainer::new(cfg, input_dim, run_dir)?,
    };
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(run_dir.join("metrics.jsonl"))?;

    let epochs = trainer.cfg.train.epochs;
    let anneal_epochs = trainer.cfg.train.anneal_epochs;
    trainer.train(&train, &dev, epochs, &mut log)?;
    if anneal_epochs > 0 {
        trainer.anneal()?;
        trainer.train(&train, &dev, epochs + anneal_epochs, &mut log)?;
    }
    println!(
        "trained {} epochs; best dev CER {:.4}; checkpoints in {}",
        trainer.epoch,
        trainer.best_cer.unwrap_or(f64::NAN),
        run_dir.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub id: String,
    pub text: String,
    pub nll_model: f64,
    pub nll_lm: f64,
    pub cost: f64,
    pub terminated: bool,
}

#[derive(Debug, Clone, Default)]
pub struct DecodeOverrides {
    pub beam: Option<usize>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub max_len: Option<usize>,
}

/// Beam-decode every utterance of a manifest, in parallel, writing one
/// JSON record per line.
pub fn cmd_decode(
    ckpt_path: &Path,
    manifest: &Path,
    lm_path: Option<&Path>,
    overrides: &DecodeOverrides,
    out: &Path,
) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let cfg = ckpt.config.clone();
    let model = model_from_checkpoint(&ckpt)?;
    let alphabet = cfg.alphabet()?;
    let utts = prepare_frames(&cfg, data::load_dataset(manifest, &alphabet)?);
    let lm = match lm_path {
        Some(p) => Some(LmFusion::new(Wfst::load(p)?, &model.alphabet)),
        None => None,
    };
    let beta = overrides.beta.unwrap_or(cfg.decode.beta);
    let gamma = overrides.gamma.unwrap_or(if lm.is_some() && beta != 0.0 {
        cfg.decode.gamma_with_lm
    } else {
        cfg.decode.gamma_without_lm
    });
    let dcfg = DecodeConfig {
        beam: overrides.beam.unwrap_or(cfg.decode.beam),
        beta,
        gamma,
        window: cfg.decode_window(),
        max_len: overrides.max_len.unwrap_or(cfg.decode.max_len),
    };
    let records: Vec<TranscriptRecord> = utts
        .par_iter()
        .map(|utt| {
            let h = model.encode_infer(&utt.frames)?;
            let r = beam_search(&model, &h, lm.as_ref(), &dcfg)?;
            Ok(TranscriptRecord {
                id: utt.id.clone(),
                text: model.alphabet.render(&r.labels),
                nll_model: r.nll_model,
                nll_lm: r.nll_lm,
                cost: r.cost,
                terminated: r.terminated,
            })
        })
        .collect::<Result<_>>()?;
    let mut f = fs::File::create(out)?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    println!("decoded {} utterances to {}", records.len(), out.display());
    Ok(())
}

pub struct ScoreReport {
    pub cer: f64,
    pub wer: f64,
    pub utterances: usize,
}

/// Compare hypothesis transcripts against manifest references,
/// corpus-level (total edit distance over total reference length).
pub fn cmd_score(cfg: &RunConfig, hyp_path: &Path, manifest: &Path) -> Result<ScoreReport> {
    let alphabet = cfg.alphabet()?;
    let refs = data::load_dataset(manifest, &alphabet)?;
    let text = fs::read_to_string(hyp_path)?;
    let mut hyps: std::collections::HashMap<String, String> = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: TranscriptRecord = serde_json::from_str(line)
            .with_context(|| format!("parsing transcript line: {line}"))?;
        hyps.insert(r.id, r.text);
    }
    let (mut cdist, mut clen, mut wdist, mut wlen) = (0usize, 0usize, 0usize, 0usize);
    let mut count = 0usize;
    for utt in &refs {
        let Some(hyp_text) = hyps.get(&utt.id) else {
            bail!("hypothesis file lacks utterance {}", utt.id);
        };
        let hyp = data::normalize_text(hyp_text, &alphabet, cfg.data.noise_marker);
        let eos = alphabet.eos();
        let h: Vec<usize> = hyp.iter().copied().filter(|&l| l != eos).collect();
        let r: Vec<usize> = utt
            .transcript
            .iter()
            .copied()
            .filter(|&l| l != eos)
            .collect();
        cdist += data::edit_distance(&h, &r);
        clen += r.len();
        let split = |labels: &[usize]| -> Vec<Vec<usize>> {
            match alphabet.space() {
                Some(sp) => labels
                    .split(|&l| l == sp)
                    .filter(|w| !w.is_empty())
                    .map(|w| w.to_vec())
                    .collect(),
                None => vec![labels.to_vec()],
            }
        };
        let (hw, rw) = (split(&h), split(&r));
        wdist += data::edit_distance(&hw, &rw);
        wlen += rw.len();
        count += 1;
    }
    if clen == 0 || wlen == 0 {
        bail!("references are empty; error rates undefined");
    }
    let report = ScoreReport {
        cer: cdist as f64 / clen as f64,
        wer: wdist as f64 / wlen as f64,
        utterances: count,
    };
    println!(
        "{} utterances: CER {:.4}  WER {:.4}",
        report.utterances, report.cer, report.wer
    );
    Ok(report)
}

/// Resolve the config for commands that may run against a checkpoint, a
/// config file, or plain defaults.
pub fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}
