//! Acceptance suite: one test per criterion, each printing a PASS or FAIL
//! line with the measured values (run with `--nocapture` to see them).

use std::time::Instant;

use arsg::attention::{median_window, Alignment, Window, WindowConfig};
use arsg::data;
use arsg::decoder::{Alphabet, Model, ModelConfig};
use arsg::encoder::{EncoderStack, PoolMode, PoolingSpec};
use arsg::fst::arpa::parse_arpa;
use arsg::fst::build::{build_char_lm, char_label, CharLmOptions};
use arsg::fst::scorer::PrefixScorer;
use arsg::nn::tensor::{Real, Tensor};
use arsg::nn::{grad_check, Graph, ParamStore};
use arsg::optim;
use arsg::search::{beam_search, DecodeConfig, LmFusion};

use arsg_cli::config::RunConfig;
use arsg_cli::trainer::{prepare_frames, Trainer};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(criterion: &str, pass: bool, detail: &str) -> bool {
    println!(
        "ACCEPTANCE {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tiny_model(seed: u64, chars: &[char], input_dim: usize) -> Model {
    let alphabet = Alphabet::from_chars(chars).unwrap();
    let mut model = Model::new(
        alphabet,
        ModelConfig {
            input_dim,
            hidden: vec![4],
            pool_factors: vec![1],
            pool_mode: PoolMode::Subsample,
            dec_hidden: 8,
            embed_dim: 4,
            attn_dim: 8,
            conv_width: 5,
            conv_channels: 1,
            gru_biases: false,
        },
    )
    .unwrap();
    optim::init_params(&mut model.store, 0.3, seed);
    model
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut worst: Real = 0.0;

    // every differentiable operation, exercised in one composite graph
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.add("w", &[3, 3], arsg::nn::ParamKind::Weight).unwrap();
        let b = store.add("b", &[3], arsg::nn::ParamKind::Bias).unwrap();
        let q = store.add("q", &[3, 2], arsg::nn::ParamKind::ConvKernel).unwrap();
        let v = store.add("v", &[5], arsg::nn::ParamKind::Bias).unwrap();
        for id in [w, b, q, v] {
            for val in store.value_mut(id).data_mut() {
                *val = rng.random_range(-0.9..0.9);
            }
        }
        let err = grad_check(&mut store, 1e-5, |g, s| {
            let wn = g.param(s, w);
            let bn = g.param(s, b);
            let qn = g.param(s, q);
            let vn = g.param(s, v);
            let f = g.conv1d(qn, vn)?;
            let r0 = g.row(f, 1)?;
            let r1 = g.row(f, 3)?;
            let cat = g.concat(r0, r1);
            let p0 = g.pick(cat, 0)?;
            let p1 = g.pick(cat, 1)?;
            let p3 = g.pick(cat, 3)?;
            let picked = g.stack_scalars(&[p0, p1, p3])?;
            let head = g.input(Tensor::vector(vec![0.3, -0.2, 0.9]));
            let x = g.add(picked, head)?;
            let wx = g.affine(x, wn, bn)?;
            let mv = g.matvec(wn, x)?;
            let t = g.tanh(wx);
            let sg = g.sigmoid(mv);
            let blended = g.blend(sg, t, x)?;
            let sm = g.softmax(blended);
            let scattered = g.scatter_span(sm, 1, 5)?;
            let m = g.stack_rows(&[x, t, blended, sg, sm])?;
            let ctx = g.weighted_rows(scattered, m, 1, 3)?;
            let prod = g.mul(ctx, x)?;
            let diff = g.sub(prod, t)?;
            let lsm = g.log_softmax(diff);
            let d = g.dot(lsm, ctx)?;
            let p = g.pick(lsm, 1)?;
            let sum = g.add(d, p)?;
            Ok(g.scale(sum, 0.7))
        })
        .unwrap();
        worst = worst.max(err);
    }

    // The full teacher-forced generator step. Central differences at
    // h = 1e-5 carry an absolute noise floor of about |loss| * eps / (2h)
    // ~ 6e-11, so elements whose true gradient sits below ~1e-4 are held
    // to that absolute resolution instead of a pure ratio (the usual
    // atol/rtol gradient check); everything larger must agree to 1e-5
    // relative.
    let mut worst_step: Real = 0.0;
    for seed in 0..20u64 {
        let mut model = tiny_model(seed, &['a', 'b', 'c'], 2);
        optim::init_params(&mut model.store, 0.3, seed.wrapping_add(77));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
        let frames = random_tensor(&mut rng, &[5, 2]);
        let transcript = vec![0, 2, 1, model.alphabet.eos()];
        let mut store = model.store.clone();
        let err = fd_check_floored(&mut store, 1e-5, 1e-4, |g, s| {
            model.teacher_forced_nll_with(
                g,
                s,
                &frames,
                &transcript,
                &arsg::attention::WindowPolicy::Full,
            )
        });
        worst_step = worst_step.max(err);
    }

    let elapsed = start.elapsed();
    let pass = worst <= 1e-5 && worst_step <= 1e-5 && elapsed.as_secs() < 60;
    let ok = verdict(
        "1 gradient suite",
        pass,
        &format!(
            "ops max relative error {worst:.3e}; ARSG step max scaled error {worst_step:.3e}; elapsed {elapsed:.2?}"
        ),
    );
    assert!(ok);
}

/// Central-difference check with the denominator floored at `floor`
/// (|analytic - numeric| / max(|a|, |n|, floor)): relative comparison for
/// healthy gradients, absolute resolution of floor * 1e-5 for tiny ones.
fn fd_check_floored<F>(store: &mut ParamStore, step: Real, floor: Real, build: F) -> Real
where
    F: Fn(&mut Graph, &ParamStore) -> arsg::Result<arsg::nn::NodeRef>,
{
    let eval = |st: &ParamStore| -> Real {
        let mut g = Graph::new();
        let l = build(&mut g, st).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let loss = build(&mut g, store).unwrap();
    store.zero_grads();
    g.backward(loss, store).unwrap();
    let analytic: Vec<Vec<Real>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    let ids: Vec<_> = store.ids().collect();
    let mut worst: Real = 0.0;
    for (pi, id) in ids.iter().enumerate() {
        for i in 0..store.value(*id).len() {
            let orig = store.value(*id).data()[i];
            store.value_mut(*id).data_mut()[i] = orig + step;
            let up = eval(store);
            store.value_mut(*id).data_mut()[i] = orig - step;
            let down = eval(store);
            store.value_mut(*id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Criterion 2: attention invariants
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_attention_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_sum: f64 = 0.0;
    let mut worst_dense: f64 = 0.0;
    for case in 0..1000u64 {
        let l = rng.random_range(2usize..=50);
        let model = tiny_model(case, &['a', 'b'], 2);
        let s = random_tensor(&mut rng, &[8]);
        let h = random_tensor(&mut rng, &[l, 8]);
        let mut weights: Vec<Real> = (0..l).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: Real = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        let alpha_prev = Alignment {
            weights,
            window: Window::full(l),
        };
        let lo = rng.random_range(0..l);
        let hi = rng.random_range(lo..l);
        let win = Window { lo, hi };
        let (alpha, _) = model
            .attention
            .attend_infer(&model.store, &s, &h, &alpha_prev, win)
            .unwrap();
        let sum: Real = alpha.weights.iter().sum();
        worst_sum = worst_sum.max(((sum - 1.0) as f64).abs());
        for (i, w) in alpha.weights.iter().enumerate() {
            assert!(*w >= 0.0, "negative attention weight");
            if !win.contains(i) {
                assert_eq!(*w, 0.0, "nonzero weight outside the window");
            }
        }

        // full window must match a dense computation exactly
        let (full, ctx) = model
            .attention
            .attend_infer(&model.store, &s, &h, &alpha_prev, Window::full(l))
            .unwrap();
        let store = &model.store;
        let get = |n: &str| store.value(store.find(n).unwrap()).data().to_vec();
        let (wst, van, uco, bsc, wsc, q) = (
            get("attn.w_state"),
            get("attn.v_annot"),
            get("attn.u_conv"),
            get("attn.b_score"),
            get("attn.w_score"),
            get("attn.q_filter"),
        );
        let k = model.cfg.conv_width;
        let half = (k - 1) as isize / 2;
        let dim = model.cfg.attn_dim;
        let mut f = vec![0.0 as Real; l];
        for pos in 0..l as isize {
            for j in 0..k as isize {
                let idx = pos + j - half;
                if idx >= 0 && (idx as usize) < l {
                    f[pos as usize] += q[j as usize] * alpha_prev.weights[idx as usize];
                }
            }
        }
        let mut scores = vec![0.0 as Real; l];
        for pos in 0..l {
            let mut e = 0.0;
            for i in 0..dim {
                let mut pre = bsc[i];
                for j in 0..8 {
                    pre += wst[i * 8 + j] * s.data()[j];
                }
                for j in 0..8 {
                    pre += van[i * 8 + j] * h.row(pos)[j];
                }
                pre += uco[i] * f[pos];
                e += wsc[i] * pre.tanh();
            }
            scores[pos] = e;
        }
        let m = scores.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let z: Real = scores.iter().map(|e| (e - m).exp()).sum();
        let mut dense_ctx = vec![0.0 as Real; 8];
        for pos in 0..l {
            let a = (scores[pos] - m).exp() / z;
            worst_dense = worst_dense.max(((full.weights[pos] - a) as f64).abs());
            for j in 0..8 {
                dense_ctx[j] += a * h.row(pos)[j];
            }
        }
        for j in 0..8 {
            worst_dense = worst_dense.max(((ctx.data()[j] - dense_ctx[j]) as f64).abs());
        }
    }
    let pass = worst_sum <= 1e-9 && worst_dense <= 1e-12;
    let ok = verdict(
        "2 attention invariants",
        pass,
        &format!("1000 cases; worst |sum-1| {worst_sum:.2e}, worst dense gap {worst_dense:.2e}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 3: windowed complexity
// ---------------------------------------------------------------------------

fn decode_eval_counts(window: WindowConfig, lengths: &[usize]) -> Vec<(usize, u64, usize)> {
    let mut out = Vec::new();
    for &l in lengths {
        // average over several random models so edge-clipping noise in the
        // per-step counts washes out
        let (mut evals, mut steps) = (0u64, 0usize);
        for seed in 0..6u64 {
            let mut model = tiny_model(seed, &['a', 'b', 'c'], 2);
            // keep the decode running to max_len: EOS never wins
            let b_out = model.store.find("dec.b_out").unwrap();
            let eos = model.alphabet.eos();
            model.store.value_mut(b_out).data_mut()[eos] -= 5.0;
            let mut rng = ChaCha8Rng::seed_from_u64(900 + l as u64 + 31 * seed);
            let h = random_tensor(&mut rng, &[l, 8]);
            model.attention.reset_score_evals();
            let hyp = model.generate_greedy(&h, &window, l / 8).unwrap();
            evals += model.attention.score_evals();
            steps += hyp.len();
        }
        out.push((l, evals, steps));
    }
    out
}

fn fit_exponent(points: &[(usize, u64, usize)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|(l, _, _)| (*l as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, e, _)| (*e as f64).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[test]
fn criterion_3_windowed_complexity() {
    let lengths = [100usize, 200, 400, 800];
    let window = WindowConfig { left: 4, right: 4 };
    let windowed = decode_eval_counts(window, &lengths);
    // per-step evaluations are bounded by the window size, independent of L
    let cap = (window.left + window.right + 1) as f64;
    let per_step: Vec<f64> = windowed
        .iter()
        .map(|(_, evals, steps)| *evals as f64 / *steps as f64)
        .collect();
    let per_step_ok = per_step.iter().all(|&p| p <= cap + 1e-9)
        && per_step
            .iter()
            .all(|&p| (p - per_step[per_step.len() - 1]).abs() <= 1.0);
    let exponent = fit_exponent(&windowed);

    // contrast: unwindowed scoring grows superlinearly
    let full = decode_eval_counts(
        WindowConfig {
            left: usize::MAX / 2,
            right: usize::MAX / 2,
        },
        &lengths,
    );
    let full_exponent = fit_exponent(&full);

    let pass = per_step_ok && exponent <= 1.1 && full_exponent >= 1.5;
    let ok = verdict(
        "3 windowed complexity",
        pass,
        &format!(
            "per-step evals {per_step:?} (cap {cap}); windowed exponent {exponent:.3}; \
             unwindowed exponent {full_exponent:.3}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 4: pooling lengths
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_pooling_lengths() {
    let mut store = ParamStore::new();
    let pool: Vec<PoolingSpec> = [1usize, 1, 2, 2]
        .iter()
        .map(|&f| PoolingSpec::new(f, PoolMode::Subsample).unwrap())
        .collect();
    let enc = EncoderStack::new(&mut store, 1, &[1, 1, 1, 1], &pool, false).unwrap();
    let mut checked = 0;
    for t0 in 4..=200usize {
        let mut expect = t0;
        for f in [1usize, 1, 2, 2] {
            expect = expect.div_ceil(f);
        }
        assert_eq!(enc.output_len(t0), expect, "T0 = {t0}");
        assert_eq!(expect, t0.div_ceil(2).div_ceil(2), "factor-of-4 reduction");
        let h = enc.encode_infer(&store, &Tensor::zeros(&[t0, 1])).unwrap();
        assert_eq!(h.rows(), expect, "realized length at T0 = {t0}");
        checked += 1;
    }
    let ok = verdict(
        "4 pooling lengths",
        checked == 197,
        &format!("{checked} lengths checked, L = ceil(ceil(T0/2)/2) throughout"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 5: FST oracle
// ---------------------------------------------------------------------------

struct HandLm {
    words: Vec<&'static str>,
    p_start: Vec<f64>,
    /// last column is P(</s> | w)
    p_next: Vec<Vec<f64>>,
}

impl HandLm {
    fn arpa(&self) -> String {
        let mut uni = String::from("-99 <s>\n-99 </s>\n");
        for w in &self.words {
            uni.push_str(&format!("{} {}\n", (0.2f64).log10(), w));
        }
        let mut bi = String::new();
        for (i, w) in self.words.iter().enumerate() {
            bi.push_str(&format!("{} <s> {}\n", self.p_start[i].log10(), w));
            for (j, w2) in self.words.iter().enumerate() {
                bi.push_str(&format!("{} {} {}\n", self.p_next[i][j].log10(), w, w2));
            }
            bi.push_str(&format!(
                "{} {} </s>\n",
                self.p_next[i][self.words.len()].log10(),
                w
            ));
        }
        format!(
            "\\data\\\nngram 1={}\nngram 2={}\n\n\\1-grams:\n{}\n\\2-grams:\n{}\n\\end\\\n",
            self.words.len() + 2,
            self.words.len() * (self.words.len() + 2),
            uni,
            bi
        )
    }

    fn prob(&self, sentence: &[usize]) -> f64 {
        let mut p = self.p_start[sentence[0]];
        for pair in sentence.windows(2) {
            p *= self.p_next[pair[0]][pair[1]];
        }
        p * self.p_next[*sentence.last().unwrap()][self.words.len()]
    }
}

#[test]
fn criterion_5_fst_oracle() {
    let start = Instant::now();
    let lm = HandLm {
        words: vec!["ab", "ba", "b", "aab"],
        p_start: vec![0.4, 0.3, 0.2, 0.1],
        p_next: vec![
            vec![0.1, 0.2, 0.3, 0.1, 0.3],
            vec![0.2, 0.2, 0.2, 0.2, 0.2],
            vec![0.05, 0.15, 0.4, 0.2, 0.2],
            vec![0.3, 0.3, 0.1, 0.2, 0.1],
        ],
    };
    let alphabet = Alphabet::from_chars(&['a', 'b', ' ']).unwrap();
    let arpa = parse_arpa(&lm.arpa()).unwrap();
    let words: Vec<String> = lm.words.iter().map(|w| w.to_string()).collect();
    let (raw, _) = build_char_lm(
        &arpa,
        &words,
        &alphabet,
        &CharLmOptions {
            determinize: false,
            state_budget: 1_000_000,
        },
    )
    .unwrap();
    let (processed, _) =
        build_char_lm(&arpa, &words, &alphabet, &CharLmOptions::default()).unwrap();

    let spell = |sentence: &[usize]| -> Vec<u32> {
        let mut labels = Vec::new();
        for &w in sentence {
            for c in lm.words[w].chars() {
                labels.push(char_label(alphabet.label_of_char(c).unwrap()));
            }
            labels.push(char_label(alphabet.space().unwrap()));
        }
        labels
    };

    let mut sentences: Vec<Vec<usize>> = Vec::new();
    let mut layer: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..4 {
        let mut next = Vec::new();
        for s in &layer {
            for w in 0..lm.words.len() {
                let mut t = s.clone();
                t.push(w);
                next.push(t);
            }
        }
        sentences.extend(next.iter().cloned());
        layer = next;
    }

    let mut worst: f64 = 0.0;
    for sentence in &sentences {
        let expect = -lm.prob(sentence).ln();
        let labels = spell(sentence);
        for fst in [&raw, &processed] {
            let got = PrefixScorer::new(fst).score_string(&labels);
            worst = worst.max((got - expect).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-6 && elapsed.as_secs() < 60;
    let ok = verdict(
        "5 fst oracle",
        pass,
        &format!(
            "{} sentences x raw+processed; worst |score - (-ln P)| = {worst:.2e}; elapsed {elapsed:.2?}",
            sentences.len()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 6: beam search oracle
// ---------------------------------------------------------------------------

fn force_nll(model: &Model, h: &Tensor, seq: &[usize], window: &WindowConfig) -> f64 {
    let mut s = Tensor::zeros(&[model.cfg.dec_hidden]);
    let mut alpha = Alignment::initial(h.rows());
    let mut y_prev = model.alphabet.eos();
    let mut nll = 0.0;
    for &y in seq {
        let win = median_window(&alpha.weights, window);
        let step = model.decoder_step_infer(&s, y_prev, h, &alpha, win).unwrap();
        nll += -(step.log_probs[y] as f64);
        s = step.s;
        alpha = step.alpha;
        y_prev = y;
    }
    nll
}

fn exhaustive_best(model: &Model, h: &Tensor, cfg: &DecodeConfig) -> (Vec<usize>, f64) {
    let eos = model.alphabet.eos();
    let labels: Vec<usize> = (0..model.alphabet.len()).filter(|&l| l != eos).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        let mut seq = prefix.clone();
        seq.push(eos);
        let nll = force_nll(model, h, &seq, &cfg.window);
        let cost = nll - cfg.gamma * prefix.len() as f64;
        if best.as_ref().is_none_or(|(_, b)| cost < *b) {
            best = Some((seq, cost));
        }
        if prefix.len() < cfg.max_len - 1 {
            for &l in &labels {
                let mut p = prefix.clone();
                p.push(l);
                stack.push(p);
            }
        }
    }
    best.unwrap()
}

#[test]
fn criterion_6_beam_oracle() {
    let window = WindowConfig {
        left: 100,
        right: 100,
    };
    // |alphabet| = 3 (two characters + EOS), max length 4, beam 81 = 3^4
    let mut worst_gap: f64 = 0.0;
    for seed in 0..5u64 {
        let model = tiny_model(seed + 600, &['a', 'b'], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 9000);
        let h = random_tensor(&mut rng, &[6, 8]);
        let cfg = DecodeConfig {
            beam: 81,
            beta: 0.0,
            gamma: 0.4,
            window,
            max_len: 4,
        };
        let beam = beam_search(&model, &h, None, &cfg).unwrap();
        let (labels, cost) = exhaustive_best(&model, &h, &cfg);
        assert_eq!(beam.labels, labels, "seed {seed}: transcript differs");
        worst_gap = worst_gap.max((beam.cost - cost).abs());
    }

    let mut monotone = true;
    for seed in 0..20u64 {
        let mut model = tiny_model(seed + 700, &['a', 'b'], 2);
        let eos = model.alphabet.eos();
        let b_out = model.store.find("dec.b_out").unwrap();
        model.store.value_mut(b_out).data_mut()[eos] += 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 9900);
        let h = random_tensor(&mut rng, &[6, 8]);
        let mut prev = f64::INFINITY;
        for k in [1usize, 2, 4, 8] {
            let cfg = DecodeConfig {
                beam: k,
                beta: 0.0,
                gamma: 0.2,
                window,
                max_len: 5,
            };
            let r = beam_search(&model, &h, None, &cfg).unwrap();
            if r.cost > prev + 1e-12 {
                monotone = false;
                println!("  seed {seed}: beam {k} cost {} exceeds {}", r.cost, prev);
            }
            prev = r.cost;
        }
    }

    let pass = worst_gap == 0.0 && monotone;
    let ok = verdict(
        "6 beam oracle",
        pass,
        &format!("beam-81 vs exhaustive gap {worst_gap:.2e}; cost non-increasing over k in {{1,2,4,8}} x 20 seeds: {monotone}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 7: end-to-end toy task + scheduled-window necessity
// ---------------------------------------------------------------------------

fn toy_task_config(first_epoch: &str) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
seed = 7

[model]
hidden = [64, 64]
pool = [1, 2]
dec_hidden = 64
embed_dim = 32
attn_dim = 64
conv_width = 11

[data]
alphabet = "abcdefgh "

[datagen]
base_dim = 10
frames_per_char = [6, 10]
noise_std = 0.3
lead_silence = [10, 30]
trail_silence = [2, 10]
text = "chars"
silent_space = true
min_len = 3
max_len = 8

[window]
w_l = 24
w_r = 24
s_min = 5.0
s_max = 15.0
v_min = 3.0
v_max = 5.0

[decode]
max_len = 60
"#,
    )
    .unwrap();
    cfg.train.first_epoch = first_epoch.into();
    cfg
}

#[test]
fn criterion_7_end_to_end_toy_task() {
    let budget = std::time::Duration::from_secs(30 * 60);
    let start = Instant::now();
    let cfg = toy_task_config("scheduled");
    let spec = cfg.synth_spec().unwrap();
    let train = prepare_frames(&cfg, data::synth_generate_stream(&spec, 2000, 0).unwrap());
    let dev = prepare_frames(&cfg, data::synth_generate_stream(&spec, 200, 1).unwrap());
    let dim = train[0].frames.cols();

    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(cfg, dim, dir.path()).unwrap();
    let mut cer = f64::INFINITY;
    let mut scheduled_nlls = Vec::new();
    for _ in 0..12 {
        scheduled_nlls.push(trainer.train_epoch(&train).unwrap());
        cer = trainer.eval_cer(&dev).unwrap();
        println!(
            "  epoch {} train NLL {:.3} dev CER {:.4} elapsed {:.1?}",
            trainer.epoch,
            scheduled_nlls.last().unwrap(),
            cer,
            start.elapsed()
        );
        if (cer <= 0.04 && trainer.epoch >= 2) || start.elapsed() > budget {
            break;
        }
    }
    let elapsed = start.elapsed();
    let pass_cer = cer <= 0.05 && elapsed <= budget;
    let ok = verdict(
        "7a toy task CER",
        pass_cer,
        &format!("dev CER {cer:.4} after {} epochs in {elapsed:.1?}", trainer.epoch),
    );

    // necessity of the scheduled first epoch: same budget, median windows
    // from the start, compared on epoch-2 NLL
    let cfg_m = toy_task_config("median");
    let dir_m = tempfile::tempdir().unwrap();
    let mut trainer_m = Trainer::new(cfg_m, dim, dir_m.path()).unwrap();
    let mut median_nlls = Vec::new();
    for _ in 0..2 {
        median_nlls.push(trainer_m.train_epoch(&train).unwrap());
    }
    let ratio = median_nlls[1] / scheduled_nlls[1];
    let pass_necessity = ratio >= 2.0;
    let ok2 = verdict(
        "7b scheduled-window necessity",
        pass_necessity,
        &format!(
            "epoch NLLs scheduled {:.3?} vs median-only {:.3?}; epoch-2 ratio {ratio:.2} (need >= 2.0)",
            &scheduled_nlls[..2.min(scheduled_nlls.len())],
            median_nlls
        ),
    );
    assert!(ok);
    assert!(
        ok2,
        "median-only training matches scheduled training at this utterance scale; \
         see the decisions ledger for the full analysis"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: language-model fusion direction
// ---------------------------------------------------------------------------

const FUSION_VOCAB: [&str; 5] = ["bac", "dec", "cab", "ced", "ace"];

/// Training text is unstructured characters, so the generator's implicit
/// language model cannot resolve the confusable pair; the dev split is
/// word-structured, where the external model can.
fn fusion_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
[model]
hidden = [32, 32]
pool = [1, 2]
dec_hidden = 32
embed_dim = 16
attn_dim = 32
conv_width = 7

[data]
alphabet = "abcde "

[datagen]
base_dim = 8
frames_per_char = [6, 10]
noise_std = 0.2
lead_silence = [4, 10]
trail_silence = [2, 6]
text = "chars"
min_len = 3
max_len = 11
confusable = ["bd"]
confusable_gap = 0.03
silent_space = false

[window]
w_l = 8
w_r = 8
s_min = 2.0
s_max = 5.0
v_min = 3.0
v_max = 5.0

[decode]
max_len = 30
"#,
    )
    .unwrap();
    cfg.seed = seed;
    cfg
}

fn uniform_bigram_arpa(words: &[&str]) -> String {
    let n = words.len();
    let mut uni = String::from("-99 <s>\n-99 </s>\n");
    for w in words {
        uni.push_str(&format!("{} {}\n", (1.0 / n as f64).log10(), w));
    }
    let mut bi = String::new();
    let p_next = (1.0 / (n + 1) as f64).log10();
    for w in words {
        bi.push_str(&format!("{} <s> {}\n", (1.0 / n as f64).log10(), w));
        for w2 in words {
            bi.push_str(&format!("{p_next} {w} {w2}\n"));
        }
        bi.push_str(&format!("{p_next} {w} </s>\n"));
    }
    format!(
        "\\data\\\nngram 1={}\nngram 2={}\n\n\\1-grams:\n{}\n\\2-grams:\n{}\n\\end\\\n",
        n + 2,
        n * (n + 2),
        uni,
        bi
    )
}

fn corpus_wer(model: &Model, dev: &[data::Utterance], lm: Option<&LmFusion>, beta: f64) -> f64 {
    let alphabet = &model.alphabet;
    let cfg = DecodeConfig {
        beam: 8,
        beta,
        gamma: 0.3,
        window: WindowConfig { left: 8, right: 8 },
        max_len: 30,
    };
    let space = alphabet.space().unwrap();
    let eos = alphabet.eos();
    let words_of = |labels: &[usize]| -> Vec<Vec<usize>> {
        labels
            .iter()
            .copied()
            .filter(|&l| l != eos)
            .collect::<Vec<_>>()
            .split(|&l| l == space)
            .filter(|w| !w.is_empty())
            .map(|w| w.to_vec())
            .collect()
    };
    let (mut dist, mut len) = (0usize, 0usize);
    for utt in dev {
        let h = model.encode_infer(&utt.frames).unwrap();
        let r = beam_search(model, &h, lm, &cfg).unwrap();
        let hyp = words_of(&r.labels);
        let rf = words_of(&utt.transcript);
        dist += data::edit_distance(&hyp, &rf);
        len += rf.len();
    }
    dist as f64 / len as f64
}

#[test]
fn criterion_8_lm_fusion_direction() {
    let arpa = parse_arpa(&uniform_bigram_arpa(&FUSION_VOCAB)).unwrap();
    let words: Vec<String> = FUSION_VOCAB.iter().map(|w| w.to_string()).collect();
    let mut all_pass = true;
    let mut details = Vec::new();
    for seed in 1..=5u64 {
        let cfg = fusion_config(seed);
        let alphabet = cfg.alphabet().unwrap();
        let spec = cfg.synth_spec().unwrap();
        let train = prepare_frames(&cfg, data::synth_generate_stream(&spec, 800, 0).unwrap());
        let mut dev_spec = spec.clone();
        dev_spec.text = arsg::data::TextSource::Words {
            vocab: FUSION_VOCAB.iter().map(|w| w.to_string()).collect(),
            min_words: 2,
            max_words: 3,
        };
        let dev = prepare_frames(&cfg, data::synth_generate_stream(&dev_spec, 60, 1).unwrap());
        let dim = train[0].frames.cols();
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(cfg, dim, dir.path()).unwrap();
        for _ in 0..5 {
            trainer.train_epoch(&train).unwrap();
        }
        let (fst, _) = build_char_lm(&arpa, &words, &alphabet, &CharLmOptions::default()).unwrap();
        let lm = LmFusion::new(fst, &trainer.model.alphabet);
        let wer_plain = corpus_wer(&trainer.model, &dev, None, 0.0);
        let wer_fused = corpus_wer(&trainer.model, &dev, Some(&lm), 0.5);
        let rel = if wer_plain > 0.0 {
            (wer_plain - wer_fused) / wer_plain
        } else {
            0.0
        };
        let seed_pass = wer_fused < wer_plain && rel >= 0.20;
        all_pass &= seed_pass;
        details.push(format!(
            "seed {seed}: WER {wer_plain:.3} -> {wer_fused:.3} ({:+.0}%)",
            -rel * 100.0
        ));
    }
    let ok = verdict("8 lm fusion direction", all_pass, &details.join("; "));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 9: regularization contract
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_regularization_contract() {
    let cfg = toy_task_config("scheduled");
    let spec = cfg.synth_spec().unwrap();
    let utts = prepare_frames(&cfg, data::synth_generate_stream(&spec, 200, 0).unwrap());
    let dim = utts[0].frames.cols();
    let alphabet = cfg.alphabet().unwrap();
    let mut model = Model::new(alphabet, cfg.model_config(dim)).unwrap();
    optim::init_params(&mut model.store, 0.1, 3);
    optim::apply_norm_constraint(&mut model.store, 1.0);
    let mut opt = optim::AdaDelta::new(&model.store, 0.95, 1e-8);
    let policy = arsg::attention::WindowPolicy::Median(WindowConfig { left: 24, right: 24 });
    let mut worst: Real = 0.0;
    for utt in utts.iter().take(200) {
        let mut g = Graph::new();
        let loss = model
            .teacher_forced_nll(&mut g, &utt.frames, &utt.transcript, &policy)
            .unwrap();
        model.store.zero_grads();
        g.backward(loss, &mut model.store).unwrap();
        optim::clip_gradients(&mut model.store, 50.0);
        opt.step(&mut model.store).unwrap();
        optim::apply_norm_constraint(&mut model.store, 1.0);
        let m = optim::max_unit_norm(&model.store);
        worst = worst.max(m);
        assert!(
            m <= 1.0 + 1e-9,
            "incoming-weight norm {m} exceeded the cap mid-run"
        );
    }
    let ok = verdict(
        "9 regularization contract",
        worst <= 1.0 + 1e-9,
        &format!("200 steps; max incoming-weight norm {worst:.12}"),
    );
    assert!(ok);
}
