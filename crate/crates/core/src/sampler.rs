//! Euler–Maruyama integration of the self-interacting diffusion
//!
//! `dY = -∇_y V dt + √2 dW`, `dZ = -∇_z V dt + ∇A_t(Z) dt + √2 dW`,
//! `A_t = A^ε[μ_t]`, with `μ_t` the occupation measure of the path.
//!
//! Step `n` first adds `x_n` to the accumulator with weight `h` (for `n = 0`
//! this is `μ_0 = δ_{x_0}`), refreshes the bias when due, records `x_n` in the
//! histogram and the reweighted sums, then moves. After `N` steps the
//! accumulator holds `x_0 … x_{N-1}` with total weight `t = N h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AbfError, Result};
use crate::estimator::BiasAccumulator;
use crate::grid::{wrap_unchecked, GridFunction, PeriodicGrid, TorusPoint};
use crate::kernel::KernelParams;
use crate::potential::PotentialSpec;
use crate::projection::{BiasFunction, GradientMode, Projector};
use crate::TAU;

/// What happens to the bias over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BiasSchedule {
    /// `A_t = A^ε[μ_t]`, refreshed every stride.
    #[default]
    Adaptive,
    /// `A ≡ 0`; the accumulator still records the path.
    FrozenZero,
    /// Adaptive until step `step`, then frozen at the last refresh.
    FreezeAfter { step: u64 },
}

/// A test function `φ(x)` for the reweighted estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observable {
    One,
    Potential,
    Cos(usize),
    Sin(usize),
}

impl Observable {
    /// `one`, `potential`, `cos_z`, `sin_y`, `cos_z2`, ... (coordinates are
    /// 1-based within the `y` or `z` block).
    pub fn parse(name: &str, spec: &PotentialSpec) -> Result<Self> {
        let unknown = || AbfError::UnknownObservable(name.to_string());
        match name {
            "one" => return Ok(Observable::One),
            "potential" => return Ok(Observable::Potential),
            _ => {}
        }
        let (func, var) = name.split_once('_').ok_or_else(unknown)?;
        let (block, idx) = var.split_at(1.min(var.len()));
        let n = spec.dim() - spec.m();
        let (offset, len) = match block {
            "y" => (0, n),
            "z" => (n, spec.m()),
            _ => return Err(unknown()),
        };
        let i = if idx.is_empty() {
            if len != 1 {
                return Err(unknown());
            }
            0
        } else {
            let k: usize = idx.parse().map_err(|_| unknown())?;
            if k == 0 || k > len {
                return Err(unknown());
            }
            k - 1
        };
        match func {
            "cos" => Ok(Observable::Cos(offset + i)),
            "sin" => Ok(Observable::Sin(offset + i)),
            _ => Err(unknown()),
        }
    }

    pub fn eval(&self, x: &[f64], spec: &PotentialSpec) -> f64 {
        match *self {
            Observable::One => 1.0,
            Observable::Potential => spec.value_at(x),
            Observable::Cos(i) => x[i].cos(),
            Observable::Sin(i) => x[i].sin(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub potential: PotentialSpec,
    pub epsilon: f64,
    pub grid_nodes: usize,
    pub h: f64,
    pub n_steps: u64,
    pub bias_refresh_stride: u64,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub observables: Vec<String>,
    pub snapshot_stride: u64,
    pub replica_count: usize,
    pub gradient_mode: GradientMode,
    pub schedule: BiasSchedule,
    /// Number of batches for batch-means standard errors.
    pub batches: usize,
    /// Diagnostics distances are measured against this bias when present.
    pub reference: Option<BiasFunction>,
}

impl SimConfig {
    pub fn new(potential: PotentialSpec) -> Self {
        let n = potential.dim() - potential.m();
        let mut x0 = vec![0.0; potential.dim()];
        x0[n..].iter_mut().for_each(|z| *z = TAU / 4.0);
        SimConfig {
            potential,
            epsilon: 0.2,
            grid_nodes: 64,
            h: 1e-3,
            n_steps: 1_000_000,
            bias_refresh_stride: 1,
            seed: 1,
            x0,
            observables: vec!["one".into()],
            snapshot_stride: 10_000,
            replica_count: 1,
            gradient_mode: GradientMode::Spectral,
            schedule: BiasSchedule::Adaptive,
            batches: 20,
            reference: None,
        }
    }

    pub fn grid(&self) -> Result<PeriodicGrid> {
        PeriodicGrid::new(self.potential.m(), self.grid_nodes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AbfError::InvalidParameter(msg));
        if !(self.h > 0.0) || !self.h.is_finite() {
            return bad(format!("step h = {} must be positive", self.h));
        }
        if self.n_steps == 0 {
            return bad("n_steps must be at least 1".into());
        }
        if self.bias_refresh_stride == 0 || self.snapshot_stride == 0 {
            return bad("strides must be at least 1".into());
        }
        if self.replica_count == 0 {
            return bad("replica_count must be at least 1".into());
        }
        if self.batches < 2 {
            return bad("batch means need at least 2 batches".into());
        }
        let drift = self.h * self.potential.grad_bound();
        if !(drift < TAU / 4.0) {
            return bad(format!(
                "h·max|∇V| = {drift} must stay below a quarter turn"
            ));
        }
        if self.x0.len() != self.potential.dim() {
            return Err(AbfError::DimensionMismatch {
                expected: self.potential.dim(),
                found: self.x0.len(),
            });
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(AbfError::NonFinite("initial point"));
        }
        KernelParams::new(self.epsilon, self.potential.m())?;
        let grid = self.grid()?;
        if let Some(r) = &self.reference {
            if *r.grid() != grid {
                return Err(AbfError::Mismatched);
            }
        }
        for name in &self.observables {
            Observable::parse(name, &self.potential)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasSnapshot {
    pub step: u64,
    pub time: f64,
    pub bias: BiasFunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub time: f64,
    pub c0: Option<f64>,
    pub w12: Option<f64>,
    /// `None` before the first sample.
    pub flat_tv: Option<f64>,
    /// `max |∇A|` over the snapshots so far.
    pub max_bias_gradient: f64,
}

/// Running sums `Σ φ e^{-A(z)} h` and `Σ e^{-A(z)} h`, total and per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSums {
    pub name: String,
    pub numerator: f64,
    pub denominator: f64,
    pub batches: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub grid: PeriodicGrid,
    pub h: f64,
    pub n_steps: u64,
    pub snapshots: Vec<BiasSnapshot>,
    /// Time-weighted cell occupation of `Z`, normalized to unit mass.
    pub histogram: Vec<f64>,
    pub observables: Vec<ObservableSums>,
    pub accumulator: BiasAccumulator,
    pub final_bias: BiasFunction,
    pub diagnostics: Vec<DiagnosticRow>,
    /// `max |∇A|` over the snapshots and the final bias.
    pub max_bias_gradient: f64,
}

impl RunRecord {
    pub fn final_time(&self) -> f64 {
        self.n_steps as f64 * self.h
    }
}

/// One explicit step; `noise` holds `d` standard normals in coordinate order.
pub fn em_step(
    x: &TorusPoint,
    spec: &PotentialSpec,
    bias: &BiasFunction,
    h: f64,
    noise: &[f64],
) -> Result<TorusPoint> {
    let d = spec.dim();
    if x.dim() != d || x.m() != spec.m() {
        return Err(AbfError::DimensionMismatch {
            expected: d,
            found: x.dim(),
        });
    }
    if noise.len() != d {
        return Err(AbfError::DimensionMismatch {
            expected: d,
            found: noise.len(),
        });
    }
    if bias.grid().dims() != spec.m() {
        return Err(AbfError::Mismatched);
    }
    let mut grad_v = vec![0.0; d];
    spec.gradient_into(x.coords(), &mut grad_v);
    let mut grad_a = vec![0.0; spec.m()];
    bias.value_and_gradient_at(x.z(), &mut grad_a);
    let mut next = x.coords().to_vec();
    advance(&mut next, &grad_v, &grad_a, h, noise)?;
    let mut out = x.clone();
    out.set_wrapped(&next);
    Ok(out)
}

fn advance(x: &mut [f64], grad_v: &[f64], grad_a: &[f64], h: f64, noise: &[f64]) -> Result<()> {
    let n = x.len() - grad_a.len();
    let sigma = (2.0 * h).sqrt();
    for i in 0..x.len() {
        let mut drift = -grad_v[i];
        if i >= n {
            drift += grad_a[i - n];
        }
        if !drift.is_finite() {
            return Err(AbfError::NonFinite("drift"));
        }
        x[i] = wrap_unchecked(x[i] + h * drift + sigma * noise[i]);
    }
    Ok(())
}

/// Per-trajectory state; replicas only meet at refresh points.
#[derive(Debug, Clone)]
struct Walker {
    x: Vec<f64>,
    grad_v: Vec<f64>,
    grad_a: Vec<f64>,
    noise: Vec<f64>,
    rng: ChaCha8Rng,
    pending: BiasAccumulator,
    histogram: Vec<f64>,
    sums: Vec<(f64, f64)>,
    batch_sums: Vec<Vec<(f64, f64)>>,
}

struct Shared<'a> {
    spec: &'a PotentialSpec,
    grid: PeriodicGrid,
    observables: &'a [Observable],
    h: f64,
    n_steps: u64,
    batches: usize,
    mode: GradientMode,
}

impl Walker {
    /// Adds `x_k` to `target`, or to the private pending accumulator.
    fn accumulate_current(&mut self, ctx: &Shared, target: Option<&mut BiasAccumulator>) -> Result<()> {
        let n = self.x.len() - ctx.grid.dims();
        ctx.spec.gradient_into(&self.x, &mut self.grad_v);
        let acc = match target {
            Some(acc) => acc,
            None => &mut self.pending,
        };
        acc.accumulate_at(&self.x[n..], &self.grad_v[n..], ctx.h)
    }

    /// Records `x_k` and moves it under the bias `a`.
    fn step(&mut self, k: u64, accumulate: bool, bias: &BiasFunction, ctx: &Shared) -> Result<()> {
        if accumulate {
            self.accumulate_current(ctx, None)?;
        }
        let n = self.x.len() - ctx.grid.dims();
        let a = match ctx.mode {
            GradientMode::Spectral => bias.value_and_gradient_at(&self.x[n..], &mut self.grad_a),
            GradientMode::Interpolated => {
                bias.interpolate_gradient(&self.x[n..], &mut self.grad_a);
                interpolate_value(bias, &self.x[n..])
            }
        };
        let w = (-a).exp() * ctx.h;
        if !w.is_finite() {
            return Err(AbfError::ExpOverflow("reweighting factor"));
        }
        let batch = ((k as u128 * ctx.batches as u128) / ctx.n_steps as u128) as usize;
        for (i, obs) in ctx.observables.iter().enumerate() {
            let phi = obs.eval(&self.x, ctx.spec);
            self.sums[i].0 += phi * w;
            self.sums[i].1 += w;
            self.batch_sums[i][batch].0 += phi * w;
            self.batch_sums[i][batch].1 += w;
        }
        self.histogram[ctx.grid.cell_of(&self.x[n..])] += ctx.h;
        for v in self.noise.iter_mut() {
            *v = self.rng.sample(StandardNormal);
        }
        advance(&mut self.x, &self.grad_v, &self.grad_a, ctx.h, &self.noise)
    }
}

fn interpolate_value(bias: &BiasFunction, z: &[f64]) -> f64 {
    let grid = *bias.grid();
    let g = grid.nodes_per_dim();
    let m = grid.dims();
    let sp = grid.spacing();
    let mut lo = vec![0usize; m];
    let mut frac = vec![0.0; m];
    for a in 0..m {
        let s = wrap_unchecked(z[a]) / sp;
        let f = s.floor();
        lo[a] = (f as usize) % g;
        frac[a] = s - f;
    }
    let mut corner = vec![0usize; m];
    let mut out = 0.0;
    for mask in 0..(1usize << m) {
        let mut w = 1.0;
        for a in 0..m {
            if mask >> a & 1 == 1 {
                corner[a] = (lo[a] + 1) % g;
                w *= frac[a];
            } else {
                corner[a] = lo[a];
                w *= 1.0 - frac[a];
            }
        }
        out += w * bias.values().values()[grid.flat_index(&corner)];
    }
    out
}

fn normalized(hist: &[f64]) -> Vec<f64> {
    let total: f64 = hist.iter().sum();
    if total > 0.0 {
        hist.iter().map(|v| v / total).collect()
    } else {
        hist.to_vec()
    }
}

/// Half the `ℓ¹` distance between cell masses and the uniform distribution.
pub fn flat_histogram_distance_of(masses: &[f64]) -> f64 {
    let u = 1.0 / masses.len() as f64;
    0.5 * masses.iter().map(|v| (v - u).abs()).sum::<f64>()
}

pub fn flat_histogram_distance(record: &RunRecord) -> f64 {
    flat_histogram_distance_of(&record.histogram)
}

/// Final ratio of the reweighted sums, with a batch-means standard error
/// (delta method for the ratio).
pub fn reweighted_estimate(record: &RunRecord, name: &str) -> Result<Estimate> {
    let sums = record
        .observables
        .iter()
        .find(|o| o.name == name)
        .ok_or_else(|| AbfError::UnknownObservable(name.to_string()))?;
    if sums.denominator == 0.0 {
        return Err(AbfError::NoSamples);
    }
    let value = sums.numerator / sums.denominator;
    let used: Vec<&(f64, f64)> = sums.batches.iter().filter(|b| b.1 > 0.0).collect();
    let nb = used.len() as f64;
    let stderr = if used.len() < 2 {
        f64::NAN
    } else {
        let mean_den = used.iter().map(|b| b.1).sum::<f64>() / nb;
        let ss: f64 = used.iter().map(|b| (b.0 - value * b.1).powi(2)).sum();
        (ss / (nb * (nb - 1.0))).sqrt() / mean_den
    };
    Ok(Estimate { value, stderr })
}

/// Runs the adaptive dynamics described by `config`.
pub fn run(config: &SimConfig) -> Result<RunRecord> {
    config.validate()?;
    let spec = &config.potential;
    let grid = config.grid()?;
    let m = grid.dims();
    let d = spec.dim();
    let kernel = KernelParams::new(config.epsilon, m)?;
    let projector = Projector::new(grid);
    let observables: Vec<Observable> = config
        .observables
        .iter()
        .map(|n| Observable::parse(n, spec))
        .collect::<Result<_>>()?;
    let ctx = Shared {
        spec,
        grid,
        observables: &observables,
        h: config.h,
        n_steps: config.n_steps,
        batches: config.batches,
        mode: config.gradient_mode,
    };
    let empty = BiasAccumulator::new(grid, kernel)?;
    let start = TorusPoint::new(config.x0.clone(), m)?;
    let mut walkers: Vec<Walker> = (0..config.replica_count)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64);
            Walker {
                x: start.coords().to_vec(),
                grad_v: vec![0.0; d],
                grad_a: vec![0.0; m],
                noise: vec![0.0; d],
                rng,
                pending: empty.clone(),
                histogram: vec![0.0; grid.len()],
                sums: vec![(0.0, 0.0); observables.len()],
                batch_sums: vec![vec![(0.0, 0.0); config.batches]; observables.len()],
            }
        })
        .collect();
    let mut acc = empty;
    let mut bias = projector.zero_bias();
    let mut max_grad: f64 = 0.0;
    let mut snapshots = Vec::new();
    let mut diagnostics = Vec::new();

    let adaptive_at = |n: u64| match config.schedule {
        BiasSchedule::Adaptive => true,
        BiasSchedule::FrozenZero => false,
        BiasSchedule::FreezeAfter { step } => n <= step,
    };

    let snapshot = |n: u64,
                        bias: &BiasFunction,
                        max_grad: f64,
                        walkers: &[Walker],
                        snapshots: &mut Vec<BiasSnapshot>,
                        diagnostics: &mut Vec<DiagnosticRow>|
     -> Result<()> {
        let time = n as f64 * config.h;
        let mut hist = vec![0.0; grid.len()];
        for w in walkers {
            for (a, b) in hist.iter_mut().zip(&w.histogram) {
                *a += b;
            }
        }
        let flat_tv = (n > 0).then(|| flat_histogram_distance_of(&normalized(&hist)));
        let (c0, w12) = match &config.reference {
            Some(r) => {
                let diff: GridFunction = bias.sub(r)?;
                (Some(diff.max_abs()), Some(projector.sobolev_norm(&diff, 2.0)?))
            }
            None => (None, None),
        };
        snapshots.push(BiasSnapshot {
            step: n,
            time,
            bias: bias.clone(),
        });
        diagnostics.push(DiagnosticRow {
            time,
            c0,
            w12,
            flat_tv,
            max_bias_gradient: max_grad,
        });
        Ok(())
    };

    let merge = |walkers: &mut [Walker], acc: &mut BiasAccumulator| -> Result<()> {
        for w in walkers.iter_mut() {
            if !w.pending.is_empty() {
                acc.merge_from(&w.pending)?;
                w.pending = w.pending.empty_like();
            }
        }
        Ok(())
    };

    let stride = config.bias_refresh_stride;
    let snap = config.snapshot_stride;
    let n_steps = config.n_steps;
    let mut n = 0u64;
    while n < n_steps {
        let refresh = n.is_multiple_of(stride) && adaptive_at(n);
        if refresh {
            merge(&mut walkers, &mut acc)?;
            for w in walkers.iter_mut() {
                w.accumulate_current(&ctx, Some(&mut acc))?;
            }
            bias = projector.project_gradient(&acc.force_estimate()?)?;
        }
        if n.is_multiple_of(snap) {
            max_grad = max_grad.max(bias.max_gradient());
            snapshot(n, &bias, max_grad, &walkers, &mut snapshots, &mut diagnostics)?;
        }
        let next_refresh = (n / stride + 1) * stride;
        let next_snap = (n / snap + 1) * snap;
        let end = next_refresh.min(next_snap).min(n_steps);
        let block = |w: &mut Walker| -> Result<()> {
            for k in n..end {
                w.step(k, !(k == n && refresh), &bias, &ctx)?;
            }
            Ok(())
        };
        if walkers.len() == 1 {
            block(&mut walkers[0])?;
        } else {
            walkers.par_iter_mut().map(block).collect::<Result<Vec<()>>>()?;
        }
        n = end;
    }
    merge(&mut walkers, &mut acc)?;
    let final_bias = if adaptive_at(n_steps) {
        projector.project_gradient(&acc.force_estimate()?)?
    } else {
        bias
    };
    max_grad = max_grad.max(final_bias.max_gradient());
    if n_steps.is_multiple_of(snap) {
        snapshot(n_steps, &final_bias, max_grad, &walkers, &mut snapshots, &mut diagnostics)?;
    }

    let mut histogram = vec![0.0; grid.len()];
    for w in &walkers {
        for (a, b) in histogram.iter_mut().zip(&w.histogram) {
            *a += b;
        }
    }
    let observables = config
        .observables
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut sums = ObservableSums {
                name: name.clone(),
                numerator: 0.0,
                denominator: 0.0,
                batches: vec![(0.0, 0.0); config.batches],
            };
            for w in &walkers {
                sums.numerator += w.sums[i].0;
                sums.denominator += w.sums[i].1;
                for (b, wb) in sums.batches.iter_mut().zip(&w.batch_sums[i]) {
                    b.0 += wb.0;
                    b.1 += wb.1;
                }
            }
            sums
        })
        .collect();
    Ok(RunRecord {
        grid,
        h: config.h,
        n_steps,
        snapshots,
        histogram: normalized(&histogram),
        observables,
        accumulator: acc,
        final_bias,
        diagnostics,
        max_bias_gradient: max_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::Family;

    fn zero_potential() -> PotentialSpec {
        PotentialSpec::new(Family::ZOnly { b: 0.0 }).unwrap()
    }

    #[test]
    fn no_dynamics_without_forces_or_noise() {
        let spec = zero_potential();
        let grid = PeriodicGrid::new(1, 32).unwrap();
        let bias = Projector::new(grid).zero_bias();
        let x = TorusPoint::new(vec![1.0, 2.0], 1).unwrap();
        let next = em_step(&x, &spec, &bias, 0.01, &[0.0, 0.0]).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn drift_follows_the_negative_gradient() {
        let spec = PotentialSpec::new(Family::Separable { a: 1.0, b: 1.0 }).unwrap();
        let grid = PeriodicGrid::new(1, 32).unwrap();
        let bias = Projector::new(grid).zero_bias();
        let q = TAU / 4.0;
        let x = TorusPoint::new(vec![q, q], 1).unwrap();
        let next = em_step(&x, &spec, &bias, 0.01, &[0.0, 0.0]).unwrap();
        assert!((next.y()[0] - (q + 0.01)).abs() < 1e-15);
        assert!((next.z()[0] - (q + 0.01)).abs() < 1e-15);
    }

    #[test]
    fn exact_bias_cancels_a_z_only_force() {
        let spec = PotentialSpec::new(Family::ZOnly { b: 1.0 }).unwrap();
        let grid = PeriodicGrid::new(1, 32).unwrap();
        let proj = Projector::new(grid);
        let a_bar = GridFunction::from_fn(grid, |z| z[0].cos()).unwrap();
        let bias = proj.bias_from_values(&a_bar).unwrap();
        let x = TorusPoint::new(vec![0.3, TAU / 4.0], 1).unwrap();
        let next = em_step(&x, &spec, &bias, 0.01, &[0.0, 0.0]).unwrap();
        assert!((next.z()[0] - TAU / 4.0).abs() < 1e-14);
    }

    #[test]
    fn em_step_rejects_bad_shapes() {
        let spec = zero_potential();
        let bias = Projector::new(PeriodicGrid::new(1, 16).unwrap()).zero_bias();
        let x = TorusPoint::new(vec![1.0, 2.0], 1).unwrap();
        assert!(em_step(&x, &spec, &bias, 0.01, &[0.0]).is_err());
        let x3 = TorusPoint::new(vec![1.0, 2.0, 3.0], 1).unwrap();
        assert!(em_step(&x3, &spec, &bias, 0.01, &[0.0; 3]).is_err());
    }

    fn small_config() -> SimConfig {
        let mut c = SimConfig::new(PotentialSpec::default_coupled_well());
        c.grid_nodes = 32;
        c.n_steps = 2_000;
        c.snapshot_stride = 500;
        c.observables = vec!["one".into(), "cos_z".into(), "sin_y".into()];
        c.batches = 10;
        c
    }

    #[test]
    fn single_step_holds_one_sample_and_zero_bias() {
        let mut c = small_config();
        c.n_steps = 1;
        let r = run(&c).unwrap();
        assert_eq!(r.snapshots.len(), 1);
        assert_eq!(r.snapshots[0].time, 0.0);
        assert_eq!(r.accumulator.sample_count(), 1);
        assert_eq!(r.final_bias.values().max_abs(), 0.0);
        assert_eq!(r.snapshots[0].bias.values().max_abs(), 0.0);
    }

    #[test]
    fn record_invariants_hold() {
        let r = run(&small_config()).unwrap();
        assert!((r.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r.snapshots.windows(2).all(|w| w[0].time < w[1].time));
        assert_eq!(r.snapshots.len(), 5);
        assert_eq!(r.accumulator.sample_count(), 2_000);
        assert!((r.accumulator.total_weight() - 2.0).abs() < 1e-12);
        for s in &r.snapshots {
            assert!(s.bias.values().mean().abs() < 1e-14);
        }
        let one = reweighted_estimate(&r, "one").unwrap();
        assert_eq!(one.value, 1.0);
        assert!(reweighted_estimate(&r, "cos_y").is_err());
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let c = small_config();
        assert_eq!(run(&c).unwrap(), run(&c).unwrap());
        let mut other = small_config();
        other.seed = 2;
        assert_ne!(run(&c).unwrap().histogram, run(&other).unwrap().histogram);
    }

    #[test]
    fn replicas_are_reproducible_and_share_one_bias() {
        let mut c = small_config();
        c.replica_count = 3;
        c.bias_refresh_stride = 10;
        let a = run(&c).unwrap();
        assert_eq!(a, run(&c).unwrap());
        assert_eq!(a.accumulator.sample_count(), 6_000);
    }

    #[test]
    fn strides_that_do_not_divide_agree_on_bookkeeping() {
        let mut c = small_config();
        c.bias_refresh_stride = 7;
        c.snapshot_stride = 300;
        c.n_steps = 1_000;
        let r = run(&c).unwrap();
        assert_eq!(r.accumulator.sample_count(), 1_000);
        let steps: Vec<u64> = r.snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![0, 300, 600, 900]);
    }

    #[test]
    fn frozen_zero_bias_never_moves() {
        let mut c = small_config();
        c.schedule = BiasSchedule::FrozenZero;
        let r = run(&c).unwrap();
        assert!(r.snapshots.iter().all(|s| s.bias.values().max_abs() == 0.0));
        let est = reweighted_estimate(&r, "cos_z").unwrap();
        let plain = &r.observables[1];
        assert!((est.value - plain.numerator / plain.denominator).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.h = 0.5;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.n_steps = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.x0 = vec![0.0];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.observables = vec!["tan_z".into()];
        assert!(matches!(c.validate(), Err(AbfError::UnknownObservable(_))));
        let mut c = small_config();
        c.epsilon = 2.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn observable_names() {
        let spec = PotentialSpec::default_coupled_well();
        assert_eq!(Observable::parse("cos_z", &spec).unwrap(), Observable::Cos(1));
        assert_eq!(Observable::parse("sin_y1", &spec).unwrap(), Observable::Sin(0));
        assert!(Observable::parse("cos_z2", &spec).is_err());
        assert!(Observable::parse("cos_w", &spec).is_err());
        let product = PotentialSpec::from_name("product_coupled_well", &[2.0, 1.0, 0.5], Some(2)).unwrap();
        assert_eq!(Observable::parse("cos_z2", &product).unwrap(), Observable::Cos(2));
        assert!(Observable::parse("cos_z", &product).is_err());
    }

    #[test]
    fn flat_histogram_distance_extremes() {
        assert_eq!(flat_histogram_distance_of(&[0.25; 4]), 0.0);
        let mut one = vec![0.0; 8];
        one[3] = 1.0;
        assert!((flat_histogram_distance_of(&one) - (1.0 - 1.0 / 8.0)).abs() < 1e-15);
    }

    #[test]
    fn interpolated_mode_runs_and_stays_on_the_torus() {
        let mut c = small_config();
        c.gradient_mode = GradientMode::Interpolated;
        let r = run(&c).unwrap();
        assert!(r.final_bias.values().max_abs() > 0.0);
    }

    #[test]
    fn brownian_motion_fills_the_circle() {
        // ∇V ≡ 0: the force estimate is identically zero and the histogram
        // is a uniform multinomial up to time correlation
        let mut c = SimConfig::new(zero_potential());
        c.grid_nodes = 16;
        c.h = 0.01;
        c.n_steps = 200_000;
        c.snapshot_stride = 100_000;
        let r = run(&c).unwrap();
        assert_eq!(r.final_bias.values().max_abs(), 0.0);
        assert!(flat_histogram_distance(&r) < 0.05);
    }
}
