//! Density-ratio and score learners, and the two learned flow updates built on them.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{batch_loss_grad, train, PointLoss, StudentNet, TrainConfig, TrainReport, Workspace};
use crate::error::{arg, Result};
use crate::flow::target::Target1D;
use crate::jet::sigmoid;
use crate::potential::{PotentialStack, ResidualFn};
use crate::seed::derive_seed;

/// A point with its class: 0 for target draws, 1 for model draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: f64,
    pub label: u8,
}

/// Optimizer settings for the learners. The defaults trade the 2000-epoch
/// distillation budget for a larger step, since each fit sees 2n points.
pub fn learner_defaults() -> TrainConfig {
    TrainConfig { widths: vec![1, 16, 16, 1], lr: 1e-2, epochs: 300, patience: 50, min_improve: 1e-8 }
}

struct Logistic {
    labels: Vec<u8>,
    /// Per-class weights so both classes count equally.
    weights: [f64; 2],
}

impl PointLoss for Logistic {
    fn needs_tangent(&self) -> bool {
        false
    }
    fn eval(&self, i: usize, h: f64, _ht: f64) -> (f64, f64, f64) {
        let l = self.labels[i];
        let w = self.weights[l as usize];
        // L log(1 + e^{−h}) + (1 − L) log(1 + e^{h})
        let (loss, grad) = if l == 1 { (crate::jet::softplus(-h), sigmoid(h) - 1.0) } else { (crate::jet::softplus(h), sigmoid(h)) };
        (w * loss, w * grad, 0.0)
    }
}

/// Balanced logistic loss of `h` on a labelled set.
pub fn logistic_loss(h: impl Fn(f64) -> f64, data: &[LabeledSample]) -> f64 {
    let n1 = data.iter().filter(|d| d.label == 1).count() as f64;
    let n0 = data.len() as f64 - n1;
    data.iter()
        .map(|d| {
            let v = h(d.x);
            if d.label == 1 {
                crate::jet::softplus(-v) / (2.0 * n1)
            } else {
                crate::jet::softplus(v) / (2.0 * n0)
            }
        })
        .sum()
}

/// Label target draws 0 and model draws 1.
pub fn label(target: &[f64], model: &[f64]) -> Vec<LabeledSample> {
    let t = target.iter().map(|&x| LabeledSample { x, label: 0 });
    t.chain(model.iter().map(|&x| LabeledSample { x, label: 1 })).collect()
}

fn logistic_problem(target: &[f64], model: &[f64]) -> (Vec<f64>, Logistic) {
    let data = label(target, model);
    let xs: Vec<f64> = data.iter().map(|d| d.x).collect();
    let n = xs.len() as f64;
    // batch_loss_grad divides by n; rescale so each class has total weight ½
    let loss = Logistic {
        labels: data.iter().map(|d| d.label).collect(),
        weights: [n / (2.0 * target.len() as f64), n / (2.0 * model.len() as f64)],
    };
    (xs, loss)
}

/// ĥ ≈ log(ρ_model/π_target), the minimizer of the balanced logistic loss.
pub fn logistic_fit(target: &[f64], model: &[f64], cfg: &TrainConfig, seed: u64) -> Result<(StudentNet, TrainReport)> {
    if target.is_empty() || model.is_empty() {
        return arg("logistic_fit needs non-empty target and model samples");
    }
    let (xs, loss) = logistic_problem(target, model);
    let mut net = StudentNet::new(&cfg.widths, seed)?;
    let report = train(&mut net, &xs, &loss, cfg)?;
    Ok((net, report))
}

/// Balanced logistic loss of `net` and its parameter gradient, as seen by the optimizer.
pub fn logistic_loss_grad(net: &StudentNet, target: &[f64], model: &[f64]) -> (f64, Vec<f64>) {
    let (xs, loss) = logistic_problem(target, model);
    let mut g = vec![0.0; net.params().len()];
    let l = batch_loss_grad(net, &xs, &loss, &mut Workspace::default(), &mut g);
    (l, g)
}

struct Hyvarinen;

impl PointLoss for Hyvarinen {
    fn needs_tangent(&self) -> bool {
        true
    }
    fn eval(&self, _i: usize, s: f64, st: f64) -> (f64, f64, f64) {
        (st + 0.5 * s * s, s, 1.0)
    }
}

/// Empirical E[σ'(X) + ½σ(X)²].
pub fn score_objective(sigma: &StudentNet, samples: &[f64]) -> f64 {
    samples
        .iter()
        .map(|&x| {
            let j = sigma.jet(x);
            j.d1 + 0.5 * j.v * j.v
        })
        .sum::<f64>()
        / samples.len() as f64
}

/// Implicit score-matching objective of `net` and its parameter gradient.
pub fn score_objective_grad(net: &StudentNet, samples: &[f64]) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; net.params().len()];
    let l = batch_loss_grad(net, samples, &Hyvarinen, &mut Workspace::default(), &mut g);
    (l, g)
}

/// σ̂ ≈ (log ρ)' by implicit score matching.
pub fn score_fit(samples: &[f64], cfg: &TrainConfig, seed: u64) -> Result<(StudentNet, TrainReport)> {
    if samples.is_empty() {
        return arg("score_fit needs samples");
    }
    let mut net = StudentNet::new(&cfg.widths, seed)?;
    let report = train(&mut net, samples, &Hyvarinen, cfg)?;
    Ok((net, report))
}

/// Draws Y ~ e^{−g} and pushes them through ψ'.
pub fn model_samples(psi: &PotentialStack, g_ref: &Target1D, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g_ref.sample_n(n, &mut rng).into_iter().map(|y| psi.map(y)).collect()
}

/// The residual −ĥ∘ψ' for already-drawn model samples.
pub fn logistic_residual(
    psi: &PotentialStack,
    target: &[f64],
    model: &[f64],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ResidualFn, Arc<StudentNet>)> {
    let (h, _) = logistic_fit(target, model, cfg, seed)?;
    let h = Arc::new(h);
    Ok((ResidualFn::NegatedClassifierComposite { classifier: h.clone(), parent: psi.clone() }, h))
}

/// ψ_{k+1} = ψ_k − η·ĥ_k∘ψ_k'.
pub fn alg1_step(psi: &PotentialStack, target: &[f64], g_ref: &Target1D, eta: f64, cfg: &TrainConfig, seed: u64) -> Result<PotentialStack> {
    let model = model_samples(psi, g_ref, target.len(), derive_seed(seed, 0))?;
    let (r, _) = logistic_residual(psi, target, &model, cfg, derive_seed(seed, 1))?;
    psi.push_residual(r, eta)
}

/// The residual with Δ' = −ψ''·(σ̂_model − σ̂_target)∘ψ'.
pub fn score_residual(
    psi: &PotentialStack,
    model: &[f64],
    target_score: Arc<StudentNet>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ResidualFn, Arc<StudentNet>)> {
    let (m, _) = score_fit(model, cfg, seed)?;
    let m = Arc::new(m);
    Ok((ResidualFn::ScoreComposite { model_score: m.clone(), target_score, parent: psi.clone() }, m))
}

/// n_{k+1} = n_k − η·n_k'·(m̂_k∘n_k), carried as a potential layer.
pub fn alg2_step(psi: &PotentialStack, target: &[f64], g_ref: &Target1D, eta: f64, cfg: &TrainConfig, seed: u64) -> Result<PotentialStack> {
    let (ts, _) = score_fit(target, cfg, derive_seed(seed, 2))?;
    let model = model_samples(psi, g_ref, target.len(), derive_seed(seed, 0))?;
    let (r, _) = score_residual(psi, &model, Arc::new(ts), cfg, derive_seed(seed, 1))?;
    psi.push_residual(r, eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::target::standard_normal;

    fn normal(mean: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Target1D::Normal { mean, sd: 1.0 }.sample_n(n, &mut rng)
    }

    #[test]
    fn logistic_recovers_gaussian_log_ratio() {
        let target = normal(1.0, 5000, 1);
        let model = normal(0.0, 5000, 2);
        let (h, _) = logistic_fit(&target, &model, &learner_defaults(), 3).unwrap();
        let err = (0..=50).map(|i| -2.0 + 0.1 * i as f64).map(|x| (h.value(x) - (0.5 - x)).abs()).fold(0.0, f64::max);
        assert!(err < 0.15, "{err}");
        let data = label(&target, &model);
        assert!(logistic_loss(|x| h.value(x), &data) <= logistic_loss(|_| 0.0, &data));
    }

    #[test]
    fn logistic_equal_distributions_gives_zero() {
        let (h, _) = logistic_fit(&normal(0.0, 2000, 4), &normal(0.0, 2000, 5), &learner_defaults(), 6).unwrap();
        let mean = (0..=40).map(|i| h.value(-2.0 + 0.1 * i as f64).abs()).sum::<f64>() / 41.0;
        assert!(mean < 0.1, "{mean}");
    }

    #[test]
    fn score_recovers_gaussian_scores() {
        for m in [0.0, 1.5] {
            let xs = normal(m, 5000, 7);
            let (s, _) = score_fit(&xs, &learner_defaults(), 8).unwrap();
            let err = (0..=40).map(|i| m - 2.0 + 0.1 * i as f64).map(|x| (s.value(x) - (m - x)).abs()).fold(0.0, f64::max);
            assert!(err < 0.15, "mean {m}: {err}");
            assert!(score_objective(&s, &xs) < -0.3);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let data = label(&normal(1.0, 40, 9), &normal(0.0, 40, 10));
        let xs: Vec<f64> = data.iter().map(|d| d.x).collect();
        let lg = Logistic { labels: data.iter().map(|d| d.label).collect(), weights: [1.0, 1.0] };
        let net = StudentNet::new(&[1, 5, 4, 1], 11).unwrap();
        for (loss, name) in [(&lg as &dyn PointLossDyn, "logistic"), (&Hyvarinen as &dyn PointLossDyn, "score")] {
            let mut ws = Workspace::default();
            let mut g = vec![0.0; net.params().len()];
            loss.grad(&net, &xs, &mut ws, &mut g);
            let h = 1e-5;
            for p in 0..net.params().len() {
                let mut a = net.clone();
                a.params_mut()[p] += h;
                let mut b = net.clone();
                b.params_mut()[p] -= h;
                let mut scratch = vec![0.0; g.len()];
                let fd = (loss.grad(&a, &xs, &mut ws, &mut scratch) - loss.grad(&b, &xs, &mut ws, &mut scratch)) / (2.0 * h);
                assert!((fd - g[p]).abs() <= 1e-4 * g[p].abs().max(1e-3), "{name} param {p}: {fd} vs {}", g[p]);
            }
        }
    }

    trait PointLossDyn {
        fn grad(&self, net: &StudentNet, xs: &[f64], ws: &mut Workspace, g: &mut [f64]) -> f64;
    }
    impl<L: PointLoss> PointLossDyn for L {
        fn grad(&self, net: &StudentNet, xs: &[f64], ws: &mut Workspace, g: &mut [f64]) -> f64 {
            batch_loss_grad(net, xs, self, ws, g)
        }
    }

    #[test]
    fn fisher_and_implicit_objectives_differ_by_a_constant() {
        // ρ = N(0.4, 1.3²) on a fine grid; two smooth score candidates
        let rho = Target1D::Normal { mean: 0.4, sd: 1.3 };
        let quad = crate::quadrature::legendre_composite(-12.0, 12.0, 1024);
        let s1 = StudentNet::new(&[1, 6, 1], 1).unwrap();
        let s2 = StudentNet::new(&[1, 6, 1], 2).unwrap();
        let fisher =
            |s: &StudentNet| quad.iter().map(|&(x, w)| w * rho.density(x) * 0.5 * (-rho.derivs(x)[1] - s.value(x)).powi(2)).sum::<f64>();
        let implicit = |s: &StudentNet| {
            quad.iter()
                .map(|&(x, w)| {
                    let j = s.jet(x);
                    w * rho.density(x) * (j.d1 + 0.5 * j.v * j.v)
                })
                .sum::<f64>()
        };
        let d1 = fisher(&s1) - implicit(&s1);
        let d2 = fisher(&s2) - implicit(&s2);
        assert!((d1 - d2).abs() < 1e-6, "{d1} vs {d2}");
    }

    #[test]
    fn tabular_logistic_optimum_is_log_ratio() {
        // two support points with known masses; per-point convex minimization by bisection on the derivative
        let (rho, pi) = ([0.3, 0.7], [0.6, 0.4]);
        for j in 0..2 {
            // d/dh [½ρ log(1+e^{−h}) + ½π log(1+e^{h})] = ½(π σ(h) − ρ(1 − σ(h)))
            let dl = |h: f64| pi[j] * sigmoid(h) - rho[j] * (1.0 - sigmoid(h));
            let (mut lo, mut hi) = (-20.0, 20.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if dl(mid) > 0.0 {
                    hi = mid
                } else {
                    lo = mid
                }
            }
            assert!((0.5 * (lo + hi) - (rho[j] / pi[j]).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn alg1_sign_matches_oracle_direction() {
        // target N(0,1), reference N(0,1), ψ = 1.5y²/2: the oracle slope moves down
        let psi = PotentialStack::new(1.5).unwrap();
        let target = normal(0.0, 4000, 12);
        let next = alg1_step(&psi, &target, &standard_normal(), 0.1, &learner_defaults(), 13).unwrap();
        let slope = |s: &PotentialStack| (s.map(1.0).unwrap() - s.map(-1.0).unwrap()) / 2.0;
        let oracle = crate::gaussian::discrete_gaussian_step(1.5, 0.1, 1.0);
        assert!(slope(&next) < 1.5 && oracle < 1.5, "{}", slope(&next));
    }

    #[test]
    fn alg1_fixed_point_barely_moves() {
        let psi = PotentialStack::identity();
        let target = normal(0.0, 10000, 14);
        let next = alg1_step(&psi, &target, &standard_normal(), 0.2, &learner_defaults(), 15).unwrap();
        // the bulk only: at |y| near 3 a 10⁴-sample log-ratio carries ~0.15 of noise
        let sup = (0..=20)
            .map(|i| -2.0 + 0.2 * i as f64)
            .map(|y| (next.jet_eval(y).unwrap().v - psi.jet_eval(y).unwrap().v).abs())
            .fold(0.0, f64::max);
        assert!(sup < 0.2 * 0.1, "{sup}");
    }

    #[test]
    fn alg2_direction_matches_xi_sign() {
        let psi = PotentialStack::new(1.5).unwrap();
        let target = normal(0.0, 4000, 16);
        let next = alg2_step(&psi, &target, &standard_normal(), 0.1, &learner_defaults(), 17).unwrap();
        let slope = |s: &PotentialStack| (s.map(1.0).unwrap() - s.map(-1.0).unwrap()) / 2.0;
        // ξ = (c² − 1)y > 0 for y > 0, so the map contracts
        assert!(slope(&next) < 1.5, "{}", slope(&next));
    }

    #[test]
    fn determinism() {
        let t = normal(0.5, 500, 18);
        let m = normal(0.0, 500, 19);
        let cfg = TrainConfig { epochs: 30, ..learner_defaults() };
        assert_eq!(logistic_fit(&t, &m, &cfg, 20).unwrap().0, logistic_fit(&t, &m, &cfg, 20).unwrap().0);
    }
}
