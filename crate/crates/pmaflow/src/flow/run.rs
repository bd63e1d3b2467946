//! Full flow runs with per-step diagnostics, regret bookkeeping and the
//! block-refresh variant.
//!
//! A plain run is a block-refresh run with a single block, so both share one
//! engine and `B ≥ T` reproduces the plain trace exactly.

use std::io::Write;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::{brenier_map_1d, median_bandwidth, mmd_sq};
use crate::error::{arg, Error, Result};
use crate::flow::cache::MapCache;
use crate::flow::oracle::{distill_slopes, oracle_residual, student_residual, DistillConfig};
use crate::flow::schedule::{adaptive_eta, AdaptiveMode, StepSchedule};
use crate::flow::target::Target1D;
use crate::jet::Jet3;
use crate::neural::{learner_defaults, logistic_fit, score_fit, StudentNet, TrainConfig};
use crate::potential::{PotentialStack, ResidualFn};
use crate::quadrature::QuadratureSpec;
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FlowMode {
    /// The analytic residual Δ_k.
    Oracle,
    /// Density-ratio learner (logistic regression).
    Logistic,
    /// Score-matching learner.
    Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    /// Domain and node count of the tabulated potential.
    pub cache_domain: (f64, f64),
    pub cache_nodes: usize,
    /// Reference-space quadrature for E_g[ψ] and B_G.
    pub quad_y: QuadratureSpec,
    /// Target-space quadrature for KL.
    pub quad_x: QuadratureSpec,
    /// Grid for the map error and the convexity margin.
    pub probe_grid: Vec<f64>,
    pub bregman: bool,
    /// Pushed and target sample counts for the per-step MMD²; 0 disables it.
    pub mmd_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            cache_domain: (-9.0, 9.0),
            cache_nodes: 3601,
            quad_y: QuadratureSpec::new(512, (-8.0, 8.0)).unwrap(),
            quad_x: QuadratureSpec::new(1024, (-12.0, 12.0)).unwrap(),
            probe_grid: crate::flow::schedule::uniform_grid(-3.0, 3.0, 1001),
            bregman: true,
            mmd_samples: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub target: Target1D,
    pub reference: Target1D,
    pub schedule: StepSchedule,
    pub t: usize,
    pub mode: FlowMode,
    /// Replace each residual by a distilled student before pushing it.
    pub distill: bool,
    pub distill_cfg: DistillConfig,
    pub learner: TrainConfig,
    /// Sample count n for the learners.
    pub samples: usize,
    pub seed: u64,
    pub diagnostics: DiagnosticsConfig,
}

impl FlowConfig {
    pub fn new(target: Target1D, reference: Target1D, schedule: StepSchedule, t: usize, mode: FlowMode) -> Self {
        Self {
            target,
            reference,
            schedule,
            t,
            mode,
            distill: mode != FlowMode::Oracle,
            distill_cfg: DistillConfig::default(),
            learner: learner_defaults(),
            samples: 10_000,
            seed: 0,
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

/// One trace row. Row k describes ρ_k and the step taken from it; the last
/// row describes ρ_T and has `eta = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub k: usize,
    pub eta: f64,
    pub kl: f64,
    pub bg: f64,
    pub min_hess: f64,
    pub sup_map_err: f64,
    pub mmd: Option<f64>,
    pub avg_identity_residual: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub records: Vec<FlowRecord>,
    /// E_g[ψ_k] for every completed iterate (first block only).
    pub mean_potential: Vec<f64>,
    /// KL of the η-weighted average iterate and its bound S_T⁻¹·E_g[ψ_0 − ψ_T].
    pub average_iterate: Option<(f64, f64)>,
    /// Final training loss of every fitted network, in order.
    pub train_losses: Vec<f64>,
}

pub const TRACE_HEADER: [&str; 8] = ["k", "eta", "kl", "bg", "min_hess", "sup_map_err", "mmd", "avg_identity_residual"];

impl FlowTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Numeric(format!("csv: {e}"));
        w.write_record(TRACE_HEADER).map_err(io)?;
        for r in &self.records {
            let f = |v: f64| format!("{v:?}");
            w.write_record([
                r.k.to_string(),
                f(r.eta),
                f(r.kl),
                f(r.bg),
                f(r.min_hess),
                f(r.sup_map_err),
                r.mmd.map(f).unwrap_or_default(),
                f(r.avg_identity_residual),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Numeric(e.to_string()))
    }

    pub fn last(&self) -> Option<&FlowRecord> {
        self.records.last()
    }
}

/// The outcome of a run: the trace so far, the final state and the error that stopped it, if any.
pub struct FlowRun {
    pub trace: FlowTrace,
    pub stack: PotentialStack,
    /// Frozen block maps followed by the current one.
    pub maps: Vec<MapCache>,
    pub failure: Option<Error>,
}

impl FlowRun {
    /// ψ'_⋆ and the composed model map on `ys`.
    pub fn final_map(&self, cfg: &FlowConfig, ys: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
        let star = brenier_map_1d(&cfg.reference, &cfg.target);
        ys.iter()
            .map(|&y| {
                let x = chain_map(&self.maps, y).map(|c| c.0).ok_or_else(|| Error::Numeric(format!("y = {y} outside the map")))?;
                Ok((y, x, star.apply(y)?))
            })
            .collect()
    }

    /// Push reference draws through the composed map.
    pub fn push_samples(&self, reference: &Target1D, n: usize, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        push_through(&self.maps, &reference.sample_n(n, &mut rng))
    }
}

pub fn write_final_map<W: Write>(rows: &[(f64, f64, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Numeric(format!("csv: {e}"));
    w.write_record(["y", "psi_prime", "psi_star_prime"]).map_err(io)?;
    for (y, a, b) in rows {
        w.write_record([format!("{y:?}"), format!("{a:?}"), format!("{b:?}")]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Numeric(e.to_string()))
}

/// Σ_k (KL_k − comparator) over the iterates that took a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub regret_sum: f64,
    pub per_step: Vec<f64>,
}

pub fn regret_report(trace: &FlowTrace, comparator_kl: f64) -> RegretReport {
    let per_step: Vec<f64> = trace.records.iter().filter(|r| r.eta > 0.0).map(|r| r.kl - comparator_kl).collect();
    RegretReport { regret_sum: per_step.iter().sum(), per_step }
}

/// (x, Σ log ψ_i'') after passing `y` through every map.
fn chain_map(maps: &[MapCache], y: f64) -> Option<(f64, f64)> {
    let mut z = y;
    let mut lj = 0.0;
    for m in maps {
        let (_, d1, d2) = m.eval(z)?;
        lj += d2.ln();
        z = d1;
    }
    Some((z, lj))
}

fn chain_inverse(maps: &[MapCache], x: f64) -> Option<f64> {
    let mut z = x;
    for m in maps.iter().rev() {
        z = m.inverse(z)?;
    }
    Some(z)
}

fn push_through(maps: &[MapCache], ys: &[f64]) -> Result<Vec<f64>> {
    ys.iter()
        .map(|&y| chain_map(maps, y).map(|c| c.0).ok_or_else(|| Error::Numeric(format!("sample {y} outside the cached map"))))
        .collect()
}

/// Precomputed reference-space and target-space data shared by all steps.
struct Context {
    target: Target1D,
    reference: Target1D,
    /// (y, w·g(y), ψ'_⋆(y)) over the reference quadrature.
    quad_y: Vec<(f64, f64, f64)>,
    quad_x: Vec<(f64, f64)>,
    probe: Vec<f64>,
    star_probe: Vec<f64>,
    bregman: bool,
}

impl Context {
    fn new(cfg: &FlowConfig) -> Result<Self> {
        let d = &cfg.diagnostics;
        let star = brenier_map_1d(&cfg.reference, &cfg.target);
        let mut quad_y = Vec::new();
        for (y, w) in d.quad_y.points() {
            let wy = w * cfg.reference.density(y);
            if wy > 1e-300 {
                quad_y.push((y, wy, star.apply(y)?));
            }
        }
        Ok(Self {
            target: cfg.target.clone(),
            reference: cfg.reference.clone(),
            quad_y,
            quad_x: d.quad_x.points(),
            probe: d.probe_grid.clone(),
            star_probe: d.probe_grid.iter().map(|&y| star.apply(y)).collect::<Result<_>>()?,
            bregman: d.bregman,
        })
    }

    /// KL(ρ|e^{−f}) in target space, also returning ρ at the x nodes.
    fn kl(&self, maps: &[MapCache]) -> Result<(f64, Vec<f64>)> {
        let mut acc = 0.0;
        let mut dens = Vec::with_capacity(self.quad_x.len());
        for &(x, w) in &self.quad_x {
            let Some(y) = chain_inverse(maps, x) else {
                dens.push(0.0);
                continue;
            };
            let lj = chain_map(maps, y).map(|c| c.1).unwrap_or(f64::NAN);
            let lr = -self.reference.f(y) - lj;
            if !lr.is_finite() {
                return Err(Error::Numeric(format!("pushforward density undefined at x = {x}")));
            }
            let r = lr.exp();
            dens.push(r);
            acc += w * r * (lr + self.target.f(x));
        }
        Ok((acc.max(0.0), dens))
    }

    /// B_G(e^{−f}|ρ) for a single block; composed maps use ∫T by Gauss–Legendre.
    fn bregman(&self, maps: &[MapCache]) -> Result<f64> {
        let mut acc = 0.0;
        for &(y, wy, t2) in &self.quad_y {
            let Some(u) = chain_inverse(maps, t2) else {
                if wy < 1e-12 {
                    continue;
                }
                return Err(Error::Numeric(format!("ψ'_⋆({y}) = {t2} outside the cached map range")));
            };
            let int = if maps.len() == 1 {
                maps[0].eval(u).unwrap().0 - maps[0].eval(y).unwrap().0
            } else {
                let mut s = 0.0;
                for (t, w) in crate::quadrature::legendre(y, u, 32) {
                    s += w * chain_map(maps, t).map(|c| c.0).ok_or_else(|| Error::Numeric("B_G outside map".into()))?;
                }
                s
            };
            acc += wy * (t2 * (u - y) - int);
        }
        Ok(acc)
    }

    fn mean_potential(&self, cache: &MapCache) -> Result<f64> {
        let mut acc = 0.0;
        for &(y, wy, _) in &self.quad_y {
            acc += wy * cache.eval(y).ok_or_else(|| Error::Numeric(format!("y = {y} outside the map cache")))?.0;
        }
        Ok(acc)
    }

    fn probe_stats(&self, maps: &[MapCache]) -> Result<(f64, f64)> {
        let cur = maps.last().unwrap();
        let mut min_hess = f64::INFINITY;
        let mut err: f64 = 0.0;
        for (&y, &s) in self.probe.iter().zip(&self.star_probe) {
            let (x, _) = chain_map(maps, y).ok_or_else(|| Error::Numeric(format!("probe {y} outside the map")))?;
            err = err.max((x - s).abs());
            min_hess = min_hess.min(cur.eval(y).map(|e| e.2).unwrap_or(f64::NAN));
        }
        Ok((min_hess, err))
    }
}

/// Everything a block needs to produce the next residual.
struct Step<'a> {
    cfg: &'a FlowConfig,
    k: usize,
    psi: &'a PotentialStack,
    cache: &'a MapCache,
    /// Draws of the block's reference measure (reference space of ψ).
    ref_samples: &'a [f64],
    target_samples: &'a [f64],
    target_score: Option<&'a Arc<StudentNet>>,
    distill_domain: (f64, f64),
    prev_student: Option<&'a StudentNet>,
}

/// Residual for this step and the student that represents it, if distilled.
fn make_residual(s: &Step, losses: &mut Vec<f64>) -> Result<(ResidualFn, Option<StudentNet>)> {
    let cfg = s.cfg;
    let seed = derive_seed(cfg.seed, 3 * s.k as u64);
    // Δ' and Δ(0) as functions of the cached jet of ψ at a point
    let slope: Box<dyn Fn(f64, Jet3) -> f64>;
    let anchor: f64;
    let exact: ResidualFn;
    match cfg.mode {
        FlowMode::Oracle => {
            exact = oracle_residual(s.psi, &cfg.target, &cfg.reference);
            let (t, g) = (cfg.target.clone(), cfg.reference.clone());
            slope = Box::new(move |y, j| -t.derivs(j.d1)[1] * j.d2 + g.derivs(y)[1] + j.d3 / j.d2);
            let j0 = s.cache.eval3(0.0).ok_or_else(|| Error::Numeric("0 outside cache".into()))?;
            anchor = -cfg.target.f(j0.d1) + cfg.reference.f(0.0) + j0.d2.ln();
        }
        FlowMode::Logistic => {
            let model = push_through(std::slice::from_ref(s.cache), s.ref_samples)?;
            let (h, rep) = logistic_fit(s.target_samples, &model, &cfg.learner, derive_seed(seed, 1))?;
            losses.push(rep.final_loss);
            let h = Arc::new(h);
            exact = ResidualFn::NegatedClassifierComposite { classifier: h.clone(), parent: s.psi.clone() };
            let j0 = s.cache.eval3(0.0).ok_or_else(|| Error::Numeric("0 outside cache".into()))?;
            anchor = -h.value(j0.d1);
            slope = Box::new(move |_, j| -h.jet(j.d1).d1 * j.d2);
        }
        FlowMode::Score => {
            let model = push_through(std::slice::from_ref(s.cache), s.ref_samples)?;
            let (m, rep) = score_fit(&model, &cfg.learner, derive_seed(seed, 1))?;
            losses.push(rep.final_loss);
            let m = Arc::new(m);
            let ts = s.target_score.expect("score mode without a target score").clone();
            exact = ResidualFn::ScoreComposite { model_score: m.clone(), target_score: ts.clone(), parent: s.psi.clone() };
            anchor = 0.0;
            slope = Box::new(move |_, j| -j.d2 * (m.value(j.d1) - ts.value(j.d1)));
        }
    }
    if !cfg.distill {
        return Ok((exact, None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let (a, b) = s.distill_domain;
    let zs: Vec<f64> = (0..cfg.distill_cfg.samples).map(|_| rng.random_range(a..b)).collect();
    let mut targets = Vec::with_capacity(zs.len());
    for &z in &zs {
        let j = s.cache.eval3(z).ok_or_else(|| Error::Numeric(format!("distillation point {z} outside cache")))?;
        if !(j.d2 > 0.0) {
            return Err(Error::Convexity { y: z, d2: j.d2 });
        }
        targets.push(slope(z, j));
    }
    let (net, rep) = distill_slopes(&zs, &targets, anchor, &cfg.distill_cfg, seed, s.prev_student)?;
    losses.push(rep.final_loss);
    Ok((student_residual(net.clone()), Some(net)))
}

/// Step size for `delta`, with ψ'' read from the cache.
fn step_size(cfg: &FlowConfig, k: usize, cache: &MapCache, delta: &ResidualFn) -> Result<f64> {
    match &cfg.schedule {
        StepSchedule::Adaptive(rule) => {
            let mut p = Vec::with_capacity(rule.grid.len());
            let mut d = Vec::with_capacity(rule.grid.len());
            for &y in &rule.grid {
                let (v, d1, d2) = cache.eval(y).ok_or_else(|| Error::Numeric(format!("grid point {y} outside cache")))?;
                p.push(Jet3::new(v, d1, d2, 0.0));
                d.push(delta.jet(y)?);
            }
            Ok(adaptive_eta(&p, &d, rule.floor, rule.safety, rule.mode))
        }
        s => Ok(s.fixed_eta(k)?.expect("fixed schedule")),
    }
}

pub fn flow_run(cfg: &FlowConfig) -> Result<FlowRun> {
    block_refresh_run(cfg, usize::MAX)
}

/// Every `block` steps the current model becomes the new reference (by
/// samples only) and the potential restarts from the identity.
pub fn block_refresh_run(cfg: &FlowConfig, block: usize) -> Result<FlowRun> {
    if cfg.t == 0 {
        return arg("a flow run needs T >= 1");
    }
    if block == 0 {
        return arg("block size must be at least 1");
    }
    if block < cfg.t && cfg.mode == FlowMode::Oracle {
        return arg("block refresh needs a sample-based learner (logistic or score)");
    }
    let ctx = Context::new(cfg)?;
    let d = &cfg.diagnostics;
    let needs_targets = cfg.mode != FlowMode::Oracle || d.mmd_samples > 0;
    let n_t = if cfg.mode != FlowMode::Oracle { cfg.samples } else { d.mmd_samples };
    let target_samples = if needs_targets {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX - 1));
        cfg.target.sample_n(n_t, &mut rng)
    } else {
        Vec::new()
    };
    let mut trace = FlowTrace::default();
    let target_score = if cfg.mode == FlowMode::Score {
        let (s, rep) = score_fit(&target_samples, &cfg.learner, derive_seed(cfg.seed, u64::MAX - 3))?;
        trace.train_losses.push(rep.final_loss);
        Some(Arc::new(s))
    } else {
        None
    };
    let mmd_ref: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX - 2));
        cfg.reference.sample_n(d.mmd_samples, &mut rng)
    };
    let mmd_h = if d.mmd_samples > 0 { Some(median_bandwidth(&target_samples[..d.mmd_samples], &mmd_ref)) } else { None };

    let mut frozen: Vec<MapCache> = Vec::new();
    let mut psi = PotentialStack::identity();
    let mut cache = MapCache::build(&psi, d.cache_domain, d.cache_nodes)?;
    let mut prev_student: Option<StudentNet> = None;
    let mut rho_bar = vec![0.0; ctx.quad_x.len()];
    let mut s_t = 0.0;
    let mut block_ref: Vec<f64> = Vec::new();
    let mut domain = cfg.distill_cfg.domain;
    let mut first_block = true;

    let mut failure = None;
    for k in 0..=cfg.t {
        if k > 0 && k % block == 0 && k < cfg.t {
            // freeze the block and restart from the identity on the pushed reference
            let mut maps = frozen.clone();
            maps.push(cache.clone());
            let lo = chain_map(&maps, d.cache_domain.0).map(|c| c.0).unwrap_or(d.cache_domain.0);
            let hi = chain_map(&maps, d.cache_domain.1).map(|c| c.0).unwrap_or(d.cache_domain.1);
            frozen = maps;
            psi = PotentialStack::identity();
            cache = MapCache::build(&psi, (lo, hi), d.cache_nodes)?;
            prev_student = None;
            first_block = false;
        }
        let mut maps = frozen.clone();
        maps.push(cache.clone());
        let step = (|| -> Result<Option<FlowRecord>> {
            let (kl, dens) = ctx.kl(&maps)?;
            let bg = if ctx.bregman { ctx.bregman(&maps)? } else { f64::NAN };
            let (min_hess, sup_map_err) = ctx.probe_stats(&maps)?;
            let mmd = match mmd_h {
                Some(h) => Some(mmd_sq(&push_through(&maps, &mmd_ref)?, &target_samples[..d.mmd_samples], h)?),
                None => None,
            };
            let mean_before = if first_block { ctx.mean_potential(&cache)? } else { f64::NAN };
            if first_block {
                trace.mean_potential.push(mean_before);
            }
            let mut rec = FlowRecord { k, eta: 0.0, kl, bg, min_hess, sup_map_err, mmd, avg_identity_residual: 0.0 };
            if k == cfg.t {
                return Ok(Some(rec));
            }
            // reference draws for this block: pushed through the frozen maps
            let n_ref = if cfg.mode == FlowMode::Oracle { 0 } else { cfg.samples };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3 * k as u64 + 1));
            let ys = cfg.reference.sample_n(n_ref, &mut rng);
            block_ref = push_through(&frozen, &ys)?;
            if !first_block {
                let mut sorted = block_ref.clone();
                sorted.sort_by(f64::total_cmp);
                let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p) as usize];
                domain = (q(0.005), q(0.995));
            }
            let st = Step {
                cfg,
                k,
                psi: &psi,
                cache: &cache,
                ref_samples: &block_ref,
                target_samples: &target_samples,
                target_score: target_score.as_ref(),
                distill_domain: domain,
                prev_student: prev_student.as_ref(),
            };
            let (delta, student) = make_residual(&st, &mut trace.train_losses)?;
            let eta = step_size(cfg, k, &cache, &delta)?;
            let next = psi.push_residual(delta.clone(), eta)?;
            let mut next_cache = cache.clone();
            next_cache.advance(&delta, eta, &next)?;
            if let StepSchedule::Adaptive(rule) = &cfg.schedule {
                if rule.mode == AdaptiveMode::Min {
                    let m = rule.grid.iter().map(|&y| next_cache.eval(y).map(|e| e.2).unwrap_or(f64::NAN)).fold(f64::INFINITY, f64::min);
                    if !(m > 0.0) {
                        return Err(Error::Numeric(format!("convexity lost after an adaptive min step at k = {k} (margin {m})")));
                    }
                }
            }
            let mean_after = if first_block {
                ctx.mean_potential(&next_cache)?
            } else {
                // identity against the empirical reference of this block
                let before: f64 = block_ref.iter().map(|&z| cache.eval(z).map(|e| e.0).unwrap_or(f64::NAN)).sum();
                let after: f64 = block_ref.iter().map(|&z| next_cache.eval(z).map(|e| e.0).unwrap_or(f64::NAN)).sum();
                (after - before) / block_ref.len() as f64
            };
            let change = if first_block { mean_after - mean_before } else { mean_after };
            rec.eta = eta;
            rec.avg_identity_residual = (change + eta * kl).abs();
            for (acc, r) in rho_bar.iter_mut().zip(&dens) {
                *acc += eta * r;
            }
            s_t += eta;
            psi = next;
            cache = next_cache;
            prev_student = student;
            Ok(Some(rec))
        })();
        match step {
            Ok(Some(rec)) => trace.records.push(rec),
            Ok(None) => {}
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    if failure.is_none() && s_t > 0.0 && frozen.is_empty() {
        let mut kl_bar = 0.0;
        for ((x, w), r) in ctx.quad_x.iter().zip(&rho_bar) {
            let r = r / s_t;
            if r > 0.0 {
                kl_bar += w * r * (r.ln() + ctx.target.f(*x));
            }
        }
        let mp = &trace.mean_potential;
        trace.average_iterate = Some((kl_bar, (mp[0] - mp[mp.len() - 1]) / s_t));
    }
    let mut maps = frozen;
    maps.push(cache);
    Ok(FlowRun { trace, stack: psi, maps, failure })
}
