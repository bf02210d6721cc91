//! AdaDelta with gradient clipping, the max-norm constraint, and Gaussian
//! initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::graph::{ParamKind, ParamStore};
use crate::nn::tensor::{Real, Tensor};

/// Gradient clipping threshold (global L2 norm) and the per-unit incoming
/// weight norm cap applied after every update.
#[derive(Debug, Clone, Copy)]
pub struct RegularizerConfig {
    pub clip_threshold: Real,
    pub max_col_norm: Real,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            clip_threshold: 50.0,
            max_col_norm: 1.0,
        }
    }
}

/// Draw every parameter i.i.d. from an isotropic Gaussian with the given
/// variance. Reproducible per seed: parameters are filled in registration
/// order from a single seeded stream.
pub fn init_params(store: &mut ParamStore, variance: Real, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, (variance as f64).sqrt()).expect("variance must be positive");
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v = normal.sample(&mut rng) as Real;
        }
    }
}

/// Global L2 norm over all parameter gradients.
pub fn global_grad_norm(store: &ParamStore) -> Real {
    store
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<Real>()
        .sqrt()
}

/// If the global gradient norm exceeds the threshold, rescale every
/// gradient by threshold/norm. Returns the pre-clip norm.
pub fn clip_gradients(store: &mut ParamStore, threshold: Real) -> Real {
    let norm = global_grad_norm(store);
    if norm > threshold {
        let scale = threshold / norm;
        for id in store.ids().collect::<Vec<_>>() {
            for g in store.get_mut(id).grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Rescale every per-unit incoming weight vector with L2 norm above
/// `max_norm` to exactly `max_norm`. For row-major `Weight` matrices the
/// incoming vector of output unit i is row i; for `ConvKernel` (k x f)
/// it is column c.
pub fn project_unit_norms(t: &mut Tensor, kind: ParamKind, max_norm: Real) {
    match kind {
        ParamKind::Weight => {
            if t.shape().len() != 2 {
                return;
            }
            let cols = t.cols();
            for row in t.data_mut().chunks_mut(cols) {
                let norm: Real = row.iter().map(|v| v * v).sum::<Real>().sqrt();
                if norm > max_norm {
                    let s = max_norm / norm;
                    for v in row {
                        *v *= s;
                    }
                }
            }
        }
        ParamKind::ConvKernel => {
            if t.shape().len() != 2 {
                return;
            }
            let (k, f) = (t.shape()[0], t.shape()[1]);
            for c in 0..f {
                let norm: Real = (0..k)
                    .map(|j| {
                        let v = t.data()[j * f + c];
                        v * v
                    })
                    .sum::<Real>()
                    .sqrt();
                if norm > max_norm {
                    let s = max_norm / norm;
                    for j in 0..k {
                        t.data_mut()[j * f + c] *= s;
                    }
                }
            }
        }
        ParamKind::Bias | ParamKind::Embedding => {}
    }
}

/// Apply the max-norm constraint to every constrained parameter.
pub fn apply_norm_constraint(store: &mut ParamStore, max_norm: Real) {
    for id in store.ids().collect::<Vec<_>>() {
        let kind = store.get(id).kind;
        project_unit_norms(store.value_mut(id), kind, max_norm);
    }
}

/// Largest per-unit incoming weight norm across constrained parameters.
pub fn max_unit_norm(store: &ParamStore) -> Real {
    let mut worst: Real = 0.0;
    for p in store.iter() {
        match p.kind {
            ParamKind::Weight => {
                let cols = p.value.cols();
                for row in p.value.data().chunks(cols) {
                    let n = row.iter().map(|v| v * v).sum::<Real>().sqrt();
                    worst = worst.max(n);
                }
            }
            ParamKind::ConvKernel => {
                let (k, f) = (p.value.shape()[0], p.value.shape()[1]);
                for c in 0..f {
                    let n: Real = (0..k)
                        .map(|j| {
                            let v = p.value.data()[j * f + c];
                            v * v
                        })
                        .sum::<Real>()
                        .sqrt();
                    worst = worst.max(n);
                }
            }
            _ => {}
        }
    }
    worst
}

/// AdaDelta state: running averages of squared gradients and squared
/// updates per parameter element.
#[derive(Debug, Clone)]
pub struct AdaDelta {
    rho: Real,
    eps: Real,
    acc_grad: Vec<Tensor>,
    acc_update: Vec<Tensor>,
}

impl AdaDelta {
    pub fn new(store: &ParamStore, rho: Real, eps: Real) -> Self {
        let acc_grad = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let acc_update = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdaDelta {
            rho,
            eps,
            acc_grad,
            acc_update,
        }
    }

    pub fn rho(&self) -> Real {
        self.rho
    }

    pub fn eps(&self) -> Real {
        self.eps
    }

    pub fn set_eps(&mut self, eps: Real) {
        self.eps = eps;
    }

    pub fn reset_accumulators(&mut self) {
        for t in self.acc_grad.iter_mut().chain(self.acc_update.iter_mut()) {
            t.data_mut().fill(0.0);
        }
    }

    pub fn accumulators(&self) -> (&[Tensor], &[Tensor]) {
        (&self.acc_grad, &self.acc_update)
    }

    pub fn restore_accumulators(&mut self, acc_grad: Vec<Tensor>, acc_update: Vec<Tensor>) -> Result<()> {
        if acc_grad.len() != self.acc_grad.len() || acc_update.len() != self.acc_update.len() {
            return Err(Error::Config(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        self.acc_grad = acc_grad;
        self.acc_update = acc_update;
        Ok(())
    }

    /// One update:
    /// Eg <- rho Eg + (1-rho) g^2
    /// dx = -sqrt(Edx + eps)/sqrt(Eg + eps) * g
    /// Edx <- rho Edx + (1-rho) dx^2
    /// x <- x + dx
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.acc_grad.len() != store.len() {
            return Err(Error::Config(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id);
            let eg = self.acc_grad[i].data_mut();
            let ed = self.acc_update[i].data_mut();
            let g = p.grad.data();
            let x = p.value.data_mut();
            for j in 0..x.len() {
                let gj = g[j];
                eg[j] = self.rho * eg[j] + (1.0 - self.rho) * gj * gj;
                let dx = -((ed[j] + self.eps).sqrt() / (eg[j] + self.eps).sqrt()) * gj;
                ed[j] = self.rho * ed[j] + (1.0 - self.rho) * dx * dx;
                x[j] += dx;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Real, b: Real, tol: Real) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn init_variance_close_to_requested() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[400, 250], ParamKind::Weight).unwrap();
        init_params(&mut store, 0.1, 42);
        let data = store.value(w).data();
        let mean: Real = data.iter().sum::<Real>() / data.len() as Real;
        let var: Real = data.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>()
            / data.len() as Real;
        assert!((var - 0.1).abs() / 0.1 < 0.05, "sample variance {var}");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let mut c = ParamStore::new();
        for s in [&mut a, &mut b, &mut c] {
            s.add("w", &[10, 10], ParamKind::Weight).unwrap();
        }
        init_params(&mut a, 0.1, 7);
        init_params(&mut b, 0.1, 7);
        init_params(&mut c, 0.1, 8);
        let id = a.find("w").unwrap();
        assert_eq!(a.value(id).data(), b.value(id).data());
        assert_ne!(a.value(id).data(), c.value(id).data());
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[2], ParamKind::Bias).unwrap();
        store.get_mut(w).grad.data_mut().copy_from_slice(&[0.3, 0.4]);
        clip_gradients(&mut store, 1.0);
        assert_eq!(store.grad(w).data(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_rescales_to_threshold() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[2], ParamKind::Bias).unwrap();
        store.get_mut(w).grad.data_mut().copy_from_slice(&[3.0, 4.0]);
        clip_gradients(&mut store, 1.0);
        assert!(close(store.grad(w).data()[0], 0.6, 1e-12));
        assert!(close(store.grad(w).data()[1], 0.8, 1e-12));
    }

    #[test]
    fn post_clip_norm_is_min_of_norm_and_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut store = ParamStore::new();
            let w = store.add("w", &[7], ParamKind::Bias).unwrap();
            for g in store.get_mut(w).grad.data_mut() {
                *g = rng.random_range(-2.0..2.0);
            }
            let threshold = rng.random_range(0.1..3.0);
            let before = global_grad_norm(&store);
            clip_gradients(&mut store, threshold);
            let after = global_grad_norm(&store);
            assert!(close(after, before.min(threshold), 1e-12));
        }
    }

    #[test]
    fn adadelta_first_step_hand_evaluated() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[1], ParamKind::Bias).unwrap();
        store.get_mut(w).grad.data_mut()[0] = 1.0;
        let mut opt = AdaDelta::new(&store, 0.95, 1e-8);
        opt.step(&mut store).unwrap();
        // Eg = 0.05; dx = -sqrt(1e-8)/sqrt(0.05 + 1e-8)
        let expect = -(1e-8f64).sqrt() / (0.05f64 + 1e-8).sqrt();
        assert!(close(opt.acc_grad[0].data()[0], 0.05, 1e-15));
        assert!(
            close(store.value(w).data()[0], expect as Real, 1e-9),
            "{} vs {}",
            store.value(w).data()[0],
            expect
        );
        assert!(close(store.value(w).data()[0], -4.4721e-4, 1e-7));
    }

    #[test]
    fn adadelta_zero_gradient_decays_accumulator_only() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[2], ParamKind::Bias).unwrap();
        store.value_mut(w).data_mut().copy_from_slice(&[1.0, -1.0]);
        store.get_mut(w).grad.data_mut().copy_from_slice(&[1.0, 2.0]);
        let mut opt = AdaDelta::new(&store, 0.9, 1e-8);
        opt.step(&mut store).unwrap();
        let after_first = store.value(w).data().to_vec();
        let eg_first = opt.acc_grad[0].data().to_vec();
        store.get_mut(w).grad.data_mut().fill(0.0);
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(w).data(), after_first.as_slice());
        for (now, was) in opt.acc_grad[0].data().iter().zip(&eg_first) {
            assert!(close(*now, 0.9 * was, 1e-15));
        }
    }

    #[test]
    fn adadelta_update_opposes_gradient() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let w = store.add("w", &[20], ParamKind::Bias).unwrap();
        let mut opt = AdaDelta::new(&store, 0.95, 1e-8);
        for _ in 0..10 {
            let before = store.value(w).data().to_vec();
            let mut gs = vec![0.0; 20];
            for g in gs.iter_mut() {
                *g = rng.random_range(-1.0..1.0f64) as Real;
            }
            store.get_mut(w).grad.data_mut().copy_from_slice(&gs);
            opt.step(&mut store).unwrap();
            for j in 0..20 {
                let delta = store.value(w).data()[j] - before[j];
                if gs[j] != 0.0 {
                    assert!(delta * gs[j] <= 0.0, "update must oppose gradient");
                }
            }
        }
    }

    #[test]
    fn project_boundary_and_rescale() {
        let mut t = Tensor::matrix(2, 2, vec![0.6, 0.8, 3.0, 4.0]).unwrap();
        project_unit_norms(&mut t, ParamKind::Weight, 1.0);
        assert!(close(t.data()[0], 0.6, 1e-12));
        assert!(close(t.data()[1], 0.8, 1e-12));
        assert!(close(t.data()[2], 0.6, 1e-12));
        assert!(close(t.data()[3], 0.8, 1e-12));
    }

    #[test]
    fn project_is_idempotent() {
        let mut t = Tensor::matrix(3, 2, vec![1.5, -2.0, 0.1, 0.1, -3.0, 0.4]).unwrap();
        project_unit_norms(&mut t, ParamKind::Weight, 1.0);
        let once = t.clone();
        project_unit_norms(&mut t, ParamKind::Weight, 1.0);
        assert_eq!(t, once);
    }

    #[test]
    fn biases_and_embeddings_exempt_from_projection() {
        let mut b = Tensor::vector(vec![5.0, 5.0]);
        project_unit_norms(&mut b, ParamKind::Bias, 1.0);
        assert_eq!(b.data(), &[5.0, 5.0]);
        let mut e = Tensor::matrix(2, 2, vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        project_unit_norms(&mut e, ParamKind::Embedding, 1.0);
        assert_eq!(e.data()[0], 5.0);
    }

    #[test]
    fn conv_kernel_projected_per_column() {
        let mut q = Tensor::matrix(3, 2, vec![3.0, 0.1, 0.0, 0.1, 4.0, 0.1]).unwrap();
        project_unit_norms(&mut q, ParamKind::ConvKernel, 1.0);
        let c0: Real = (0..3).map(|j| q.data()[j * 2] * q.data()[j * 2]).sum::<Real>().sqrt();
        assert!(close(c0, 1.0, 1e-12));
        // second column was already under the cap
        assert!(close(q.data()[1], 0.1, 1e-12));
    }
}
