//! Training loop: AdaDelta over teacher-forced utterances with the
//! two-phase window schedule (linearly scheduled windows for the first
//! epoch, median-centered afterwards), per-epoch dev evaluation, best
//! checkpoint tracking, and the annealing restart.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use arsg::data::{self, Utterance};
use arsg::decoder::{training_policy, Model};
use arsg::nn::tensor::Real;
use arsg::nn::Graph;
use arsg::optim::{self, AdaDelta};

use crate::checkpoint;
use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: &'static str,
    pub train_nll: f64,
    pub dev_cer: f64,
    pub best_cer: f64,
    pub annealed: bool,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub opt: AdaDelta,
    /// completed epochs
    pub epoch: usize,
    pub best_cer: Option<f64>,
    pub run_dir: PathBuf,
    annealed: bool,
}

impl Trainer {
    /// Fresh trainer with Gaussian-initialized parameters (projected onto
    /// the norm constraint, which also holds at initialization).
    pub fn new(mut cfg: RunConfig, input_dim: usize, run_dir: &Path) -> Result<Self> {
        cfg.model.input_dim = Some(input_dim);
        let alphabet = cfg.alphabet()?;
        let mut model = Model::new(alphabet, cfg.model_config(input_dim))?;
        optim::init_params(&mut model.store, cfg.optimizer.init_variance as Real, cfg.seed);
        optim::apply_norm_constraint(&mut model.store, cfg.optimizer.max_col_norm as Real);
        let opt = AdaDelta::new(
            &model.store,
            cfg.optimizer.rho as Real,
            cfg.optimizer.epsilon as Real,
        );
        std::fs::create_dir_all(run_dir)?;
        Ok(Trainer {
            cfg,
            model,
            opt,
            epoch: 0,
            best_cer: None,
            run_dir: run_dir.to_path_buf(),
            annealed: false,
        })
    }

    pub fn from_checkpoint(path: &Path, run_dir: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let model = model_from_checkpoint(&ckpt)?;
        let opt = checkpoint::restore_optimizer(&ckpt, &model.store)?;
        std::fs::create_dir_all(run_dir)?;
        Ok(Trainer {
            cfg: ckpt.config.clone(),
            model,
            opt,
            epoch: ckpt.epoch,
            best_cer: ckpt.best_cer,
            run_dir: run_dir.to_path_buf(),
            annealed: false,
        })
    }

    pub fn last_path(&self) -> PathBuf {
        self.run_dir.join("last.ckpt")
    }

    pub fn best_path(&self) -> PathBuf {
        self.run_dir.join("best.ckpt")
    }

    fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            &self.cfg,
            &self.model.store,
            &self.opt,
            self.epoch,
            self.best_cer,
        )
    }

    /// One pass over the training set (order shuffled deterministically per
    /// epoch). Returns the mean per-utterance negative log-likelihood.
    pub fn train_epoch(&mut self, train: &[Utterance]) -> Result<f64> {
        let epoch = self.epoch + 1;
        let policy = if self.cfg.train.first_epoch == "median" {
            training_policy(usize::MAX, self.cfg.schedule_policy(), self.cfg.train_window())
        } else {
            training_policy(epoch, self.cfg.schedule_policy(), self.cfg.train_window())
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.cfg
                .seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(epoch as u64),
        );
        order.shuffle(&mut rng);

        let clip = self.cfg.optimizer.clip as Real;
        let max_norm = self.cfg.optimizer.max_col_norm as Real;
        let mut total = 0.0f64;
        for &i in &order {
            let utt = &train[i];
            let mut g = Graph::new();
            let loss = self
                .model
                .teacher_forced_nll(&mut g, &utt.frames, &utt.transcript, &policy)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                bail!(
                    "training diverged (loss {value}) on {}; last good checkpoint: {}",
                    utt.id,
                    self.last_path().display()
                );
            }
            total += value;
            self.model.store.zero_grads();
            g.backward(loss, &mut self.model.store)?;
            optim::clip_gradients(&mut self.model.store, clip);
            self.opt.step(&mut self.model.store)?;
            optim::apply_norm_constraint(&mut self.model.store, max_norm);
        }
        self.epoch = epoch;
        Ok(total / train.len().max(1) as f64)
    }

    /// Greedy-decode the dev set in parallel and return the corpus
    /// character error rate (total edit distance over total reference
    /// length).
    pub fn eval_cer(&self, dev: &[Utterance]) -> Result<f64> {
        let window = self.cfg.train_window();
        let max_len = self.cfg.decode.max_len;
        let results: Vec<(usize, usize)> = dev
            .par_iter()
            .map(|utt| {
                let h = self.model.encode_infer(&utt.frames)?;
                let hyp = self.model.generate_greedy(&h, &window, max_len)?;
                let eos = self.model.alphabet.eos();
                let href: Vec<usize> = hyp.iter().copied().filter(|&l| l != eos).collect();
                let rref: Vec<usize> = utt
                    .transcript
                    .iter()
                    .copied()
                    .filter(|&l| l != eos)
                    .collect();
                Ok((data::edit_distance(&href, &rref), rref.len()))
            })
            .collect::<Result<_>>()?;
        let (dist, len) = results
            .into_iter()
            .fold((0usize, 0usize), |(d, l), (dd, ll)| (d + dd, l + ll));
        if len == 0 {
            bail!("dev set has empty references");
        }
        Ok(dist as f64 / len as f64)
    }

    /// Run epochs until `target_epochs` is reached, logging one JSON record
    /// per epoch, keeping `last.ckpt` and the best-CER checkpoint fresh.
    pub fn train(
        &mut self,
        train: &[Utterance],
        dev: &[Utterance],
        target_epochs: usize,
        log: &mut dyn Write,
    ) -> Result<()> {
        while self.epoch < target_epochs {
            let phase = if self.epoch == 0 && self.cfg.train.first_epoch != "median" {
                "scheduled"
            } else {
                "median"
            };
            let train_nll = self.train_epoch(train)?;
            let dev_cer = self.eval_cer(dev)?;
            if self.best_cer.is_none_or(|b| dev_cer < b) {
                self.best_cer = Some(dev_cer);
                self.save(&self.best_path())?;
            }
            self.save(&self.last_path())?;
            let record = EpochRecord {
                epoch: self.epoch,
                phase,
                train_nll,
                dev_cer,
                best_cer: self.best_cer.unwrap_or(f64::NAN),
                annealed: self.annealed,
            };
            writeln!(log, "{}", serde_json::to_string(&record)?)?;
        }
        Ok(())
    }

    /// The annealing restart: reload the best checkpoint, reset the
    /// AdaDelta accumulators, drop epsilon to its annealed value, continue.
    pub fn anneal(&mut self) -> Result<()> {
        let best = self.best_path();
        if !best.exists() {
            bail!("anneal requires a best checkpoint at {}", best.display());
        }
        let ckpt = checkpoint::load(&best)?;
        checkpoint::restore_params(&ckpt, &mut self.model.store)?;
        self.opt.reset_accumulators();
        self.opt.set_eps(self.cfg.optimizer.anneal_epsilon as Real);
        self.annealed = true;
        Ok(())
    }
}

/// Rebuild the model recorded in a checkpoint and restore its parameters.
pub fn model_from_checkpoint(ckpt: &checkpoint::Checkpoint) -> Result<Model> {
    let input_dim = ckpt
        .config
        .model
        .input_dim
        .context("checkpoint config lacks a resolved input dimension")?;
    let alphabet = ckpt.config.alphabet()?;
    let mut model = Model::new(alphabet, ckpt.config.model_config(input_dim))?;
    checkpoint::restore_params(ckpt, &mut model.store)?;
    Ok(model)
}

/// Apply deltas if configured; training and decoding share this.
pub fn prepare_frames(cfg: &RunConfig, utts: Vec<Utterance>) -> Vec<Utterance> {
    if !cfg.data.use_deltas {
        return utts;
    }
    utts.into_iter()
        .map(|mut u| {
            u.frames = data::add_deltas(&u.frames);
            u
        })
        .collect()
}
