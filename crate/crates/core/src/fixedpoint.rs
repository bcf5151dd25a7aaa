//! The deterministic map `B ↦ A^ε[μ_B]` on the family of tilted Gibbs
//! measures `μ_B ∝ e^{-V + B(z)}`, its Picard fixed point and the limiting
//! flow on z-marginal densities.
//!
//! For `μ_B` the y-integrals collapse onto the free energy:
//!
//! `F^ε[μ_B](z) = ∫ ∇A★(z') K_ε(z', z) e^{B - A★}(z') dz' / ∫ K_ε(z', z) e^{B - A★}(z') dz'`
//!
//! so every quantity here lives on the z-grid only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{AbfError, Result};
use crate::grid::{GridFunction, Norm, PeriodicGrid, VectorField};
use crate::kernel::KernelParams;
use crate::potential::FreeEnergyOracle;
use crate::projection::{BiasFunction, Projector};

/// A probability density `q` of the z-marginal w.r.t. the normalized measure.
#[derive(Debug, Clone, PartialEq)]
pub struct AttractorState {
    q: GridFunction,
}

impl AttractorState {
    /// Validates `q > 0` and grid mean 1 to `1e-10`.
    pub fn new(q: GridFunction) -> Result<Self> {
        if q.values().iter().any(|&v| !(v > 0.0)) {
            return Err(AbfError::InvalidParameter(
                "density must be positive at every node".into(),
            ));
        }
        let mass = q.mean();
        if (mass - 1.0).abs() > 1e-10 {
            return Err(AbfError::InvalidParameter(format!(
                "density has mass {mass}, expected 1"
            )));
        }
        Ok(AttractorState { q })
    }

    pub fn uniform(grid: PeriodicGrid) -> Self {
        AttractorState {
            q: GridFunction::from_raw(grid, vec![1.0; grid.len()]),
        }
    }

    /// `h_B = e^{-A★ + B} / Z_B`.
    pub fn from_bias(values: &GridFunction, oracle: &FreeEnergyOracle) -> Result<Self> {
        if values.grid() != oracle.grid() {
            return Err(AbfError::Mismatched);
        }
        Ok(AttractorState {
            q: tilted_density(values.values(), oracle),
        })
    }

    pub fn density(&self) -> &GridFunction {
        &self.q
    }

    pub fn mass(&self) -> f64 {
        self.q.mean()
    }

    /// `B_q = log q + A★`, centred.
    pub fn bias_values(&self, oracle: &FreeEnergyOracle) -> GridFunction {
        let raw: Vec<f64> = self
            .q
            .values()
            .iter()
            .zip(oracle.a_star().values())
            .map(|(q, a)| q.ln() + a)
            .collect();
        GridFunction::from_raw(*self.q.grid(), raw).centered()
    }
}

fn tilted_density(bias: &[f64], oracle: &FreeEnergyOracle) -> GridFunction {
    let grid = *oracle.grid();
    let log_w: Vec<f64> = bias
        .iter()
        .zip(oracle.a_star().values())
        .map(|(b, a)| b - a)
        .collect();
    let shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - shift).exp()).collect();
    let mass = w.iter().sum::<f64>() * grid.weight();
    GridFunction::from_raw(grid, w.into_iter().map(|v| v / mass).collect())
}

/// Distances of a bias to `Ā★`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorVsAstar {
    pub w12: f64,
    pub w14: f64,
    pub c0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub a_inf: BiasFunction,
    pub iterations: usize,
    pub converged: bool,
    pub update_l2: f64,
    pub update_c0: f64,
    pub error: ErrorVsAstar,
}

/// `B ↦ F^ε[μ_B]` and `B ↦ A^ε[μ_B]` with the kernel table and FFT plans
/// built once.
#[derive(Debug, Clone)]
pub struct AttractorMap {
    oracle: FreeEnergyOracle,
    kernel: KernelParams,
    projector: Projector,
    table: Vec<f64>,
}

impl AttractorMap {
    pub fn new(oracle: &FreeEnergyOracle, kernel: &KernelParams) -> Result<Self> {
        let grid = *oracle.grid();
        if kernel.dims() != grid.dims() {
            return Err(AbfError::DimensionMismatch {
                expected: grid.dims(),
                found: kernel.dims(),
            });
        }
        Ok(AttractorMap {
            oracle: oracle.clone(),
            kernel: *kernel,
            projector: Projector::new(grid),
            table: kernel.matrix_1d(&grid),
        })
    }

    pub fn grid(&self) -> &PeriodicGrid {
        self.oracle.grid()
    }

    pub fn oracle(&self) -> &FreeEnergyOracle {
        &self.oracle
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    /// Applies the separable kernel `Σ_s Π_a k(z_t,a - z_s,a) f(s)`.
    fn smooth(&self, f: &[f64]) -> Vec<f64> {
        let grid = self.grid();
        let g = grid.nodes_per_dim();
        let m = grid.dims();
        let mut cur = f.to_vec();
        let mut next = vec![0.0; cur.len()];
        for axis in 0..m {
            let stride = g.pow((m - 1 - axis) as u32);
            let block = stride * g;
            for start in (0..cur.len()).step_by(block) {
                for inner in 0..stride {
                    let base = start + inner;
                    for t in 0..g {
                        let row = &self.table[t * g..(t + 1) * g];
                        let mut acc = 0.0;
                        for (s, k) in row.iter().enumerate() {
                            acc += k * cur[base + s * stride];
                        }
                        next[base + t * stride] = acc;
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    fn check_bias(&self, values: &GridFunction) -> Result<()> {
        if values.grid() != self.grid() {
            return Err(AbfError::Mismatched);
        }
        Ok(())
    }

    /// `F^ε[μ_B]` at the nodes.
    pub fn force_of_values(&self, bias: &GridFunction) -> Result<VectorField> {
        self.check_bias(bias)?;
        let grid = *self.grid();
        let w = tilted_density(bias.values(), &self.oracle);
        let den = self.smooth(w.values());
        let mut data = Vec::with_capacity(grid.len() * grid.dims());
        for c in 0..grid.dims() {
            let weighted: Vec<f64> = w
                .values()
                .iter()
                .zip(self.oracle.grad_a_star().component(c))
                .map(|(w, f)| w * f)
                .collect();
            let num = self.smooth(&weighted);
            data.extend(num.iter().zip(&den).map(|(n, d)| n / d));
        }
        VectorField::new(grid, data)
    }

    pub fn force(&self, bias: &BiasFunction) -> Result<VectorField> {
        self.force_of_values(bias.values())
    }

    /// `A^ε[μ_B] = project(F^ε[μ_B])`.
    pub fn apply_values(&self, bias: &GridFunction) -> Result<BiasFunction> {
        self.projector.project_gradient(&self.force_of_values(bias)?)
    }

    pub fn apply(&self, bias: &BiasFunction) -> Result<BiasFunction> {
        self.apply_values(bias.values())
    }

    pub fn error_vs_astar(&self, bias: &BiasFunction) -> Result<ErrorVsAstar> {
        let diff = bias.values().sub(self.oracle.a_star_bar())?;
        Ok(ErrorVsAstar {
            w12: self.projector.sobolev_norm(&diff, 2.0)?,
            w14: self.projector.sobolev_norm(&diff, 4.0)?,
            c0: diff.max_abs(),
        })
    }

    pub fn picard(&self, b0: &BiasFunction, tol: f64, max_iter: usize) -> Result<FixedPointResult> {
        if !(tol > 0.0) {
            return Err(AbfError::InvalidParameter("tolerance must be positive".into()));
        }
        if max_iter == 0 {
            return Err(AbfError::InvalidParameter("max_iter must be at least 1".into()));
        }
        self.check_bias(b0.values())?;
        let mut b = b0.clone();
        let mut prev = f64::INFINITY;
        let mut rising = 0;
        let mut update_l2 = f64::INFINITY;
        let mut update_c0 = f64::INFINITY;
        let mut iterations = 0;
        let mut converged = false;
        while iterations < max_iter {
            let next = self.apply(&b)?;
            iterations += 1;
            let diff = next.sub(&b)?;
            update_l2 = diff.lp_norm(Norm::Lp(2.0))?;
            update_c0 = diff.max_abs();
            b = next;
            if update_l2 < tol {
                converged = true;
                break;
            }
            rising = if update_l2 > prev { rising + 1 } else { 0 };
            if rising >= 3 {
                return Err(AbfError::NonContraction {
                    iteration: iterations,
                    update: update_l2,
                });
            }
            prev = update_l2;
        }
        let error = self.error_vs_astar(&b)?;
        Ok(FixedPointResult {
            a_inf: b,
            iterations,
            converged,
            update_l2,
            update_c0,
            error,
        })
    }

    /// Largest observed `‖h_{Π B¹} - h_{Π B²}‖₂ / ‖h_{B¹} - h_{B²}‖₂` over
    /// random band-limited pairs with `‖B‖_{C⁰} ≤ radius`.
    pub fn contraction(&self, radius: f64, trials: usize, seed: u64) -> Result<f64> {
        if !(radius > 0.0) || trials == 0 {
            return Err(AbfError::InvalidParameter(
                "contraction probe needs radius > 0 and trials >= 1".into(),
            ));
        }
        let grid = *self.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let r1 = radius * rng.random_range(0.5..=1.0);
            let r2 = radius * rng.random_range(0.5..=1.0);
            let b1 = random_trig_values(&grid, 8, r1, &mut rng);
            let b2 = random_trig_values(&grid, 8, r2, &mut rng);
            let h1 = tilted_density(b1.values(), &self.oracle);
            let h2 = tilted_density(b2.values(), &self.oracle);
            let den = h1.sub(&h2)?.lp_norm(Norm::Lp(2.0))?;
            if den == 0.0 {
                continue;
            }
            let p1 = self.apply_values(&b1)?;
            let p2 = self.apply_values(&b2)?;
            let g1 = tilted_density(p1.values().values(), &self.oracle);
            let g2 = tilted_density(p2.values().values(), &self.oracle);
            let num = g1.sub(&g2)?.lp_norm(Norm::Lp(2.0))?;
            worst = worst.max(num / den);
        }
        Ok(worst)
    }

    /// `r[q]`: the tilted density of `A^ε[μ_{B_q}]`.
    fn flow_target(&self, q: &[f64]) -> Result<Vec<f64>> {
        let state = AttractorState {
            q: GridFunction::from_raw(*self.grid(), q.to_vec()),
        };
        let b = self.apply_values(&state.bias_values(&self.oracle))?;
        Ok(tilted_density(b.values().values(), &self.oracle).into_values())
    }

    /// RK4 for `q̇ = r[q] - q`; `reference` is the density distances are
    /// measured against.
    pub fn flow(
        &self,
        q0: &AttractorState,
        reference: &GridFunction,
        t_end: f64,
        dt: f64,
    ) -> Result<FlowTrajectory> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(AbfError::InvalidParameter(format!(
                "flow step {dt} must be positive and finite"
            )));
        }
        if !(t_end >= 0.0) || !t_end.is_finite() {
            return Err(AbfError::InvalidParameter("flow horizon must be finite and >= 0".into()));
        }
        if q0.q.grid() != self.grid() || reference.grid() != self.grid() {
            return Err(AbfError::Mismatched);
        }
        let grid = *self.grid();
        let n = grid.len();
        let steps = (t_end / dt).round() as usize;
        let distance = |q: &[f64]| -> f64 {
            let s: f64 = q
                .iter()
                .zip(reference.values())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            (s * grid.weight()).sqrt()
        };
        let point = |t: f64, q: &[f64]| FlowPoint {
            t,
            distance: distance(q),
            mass: q.iter().sum::<f64>() * grid.weight(),
            q: q.to_vec(),
        };
        let mut q = q0.q.values().to_vec();
        let mut points = vec![point(0.0, &q)];
        let rhs = |q: &[f64], t: f64| -> Result<Vec<f64>> {
            if q.iter().any(|&v| !(v > 0.0)) {
                return Err(AbfError::PositivityLost { time: t });
            }
            let r = self.flow_target(q)?;
            Ok(r.iter().zip(q).map(|(r, q)| r - q).collect())
        };
        let axpy = |q: &[f64], k: &[f64], a: f64| -> Vec<f64> {
            q.iter().zip(k).map(|(q, k)| q + a * k).collect()
        };
        for step in 0..steps {
            let t = step as f64 * dt;
            let k1 = rhs(&q, t)?;
            let k2 = rhs(&axpy(&q, &k1, 0.5 * dt), t + 0.5 * dt)?;
            let k3 = rhs(&axpy(&q, &k2, 0.5 * dt), t + 0.5 * dt)?;
            let k4 = rhs(&axpy(&q, &k3, dt), t + dt)?;
            for i in 0..n {
                q[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let t_next = (step + 1) as f64 * dt;
            if q.iter().any(|&v| !(v > 0.0)) {
                return Err(AbfError::PositivityLost { time: t_next });
            }
            points.push(point(t_next, &q));
        }
        Ok(FlowTrajectory { points })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowPoint {
    pub t: f64,
    pub distance: f64,
    pub mass: f64,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub points: Vec<FlowPoint>,
}

impl FlowTrajectory {
    pub fn last(&self) -> &FlowPoint {
        self.points.last().expect("trajectory holds the initial point")
    }

    /// Least-squares fit of `log distance` against `t` on `[t0, t1]`.
    pub fn log_distance_fit(&self, t0: f64, t1: f64) -> Option<crate::output::LinearFit> {
        let (ts, ls): (Vec<f64>, Vec<f64>) = self
            .points
            .iter()
            .filter(|p| p.t >= t0 - 1e-12 && p.t <= t1 + 1e-12 && p.distance > 0.0)
            .map(|p| (p.t, p.distance.ln()))
            .unzip();
        crate::output::linear_fit(&ts, &ls)
    }
}

/// Zero-mean trigonometric polynomial with every wave number `|k_a| ≤ degree`,
/// scaled to `max |B| = radius` at the nodes.
pub fn random_trig_values(
    grid: &PeriodicGrid,
    degree: usize,
    radius: f64,
    rng: &mut impl Rng,
) -> GridFunction {
    let m = grid.dims();
    let d = degree as i64;
    let span = (2 * d + 1) as usize;
    let mut waves = Vec::new();
    for flat in 0..span.pow(m as u32) {
        let mut k = vec![0i64; m];
        let mut rest = flat;
        for a in (0..m).rev() {
            k[a] = (rest % span) as i64 - d;
            rest /= span;
        }
        // one representative of each ±k pair
        let first = k.iter().find(|&&v| v != 0);
        if matches!(first, Some(&v) if v > 0) {
            let decay = 1.0 / (1.0 + k.iter().map(|v| (v * v) as f64).sum::<f64>());
            let a: f64 = rng.sample::<f64, _>(StandardNormal) * decay;
            let b: f64 = rng.sample::<f64, _>(StandardNormal) * decay;
            waves.push((k, a, b));
        }
    }
    let mut values = vec![0.0; grid.len()];
    for (node, v) in values.iter_mut().enumerate() {
        let z = grid.node_coords(node);
        *v = waves
            .iter()
            .map(|(k, a, b)| {
                let phase: f64 = k.iter().zip(&z).map(|(k, z)| *k as f64 * z).sum();
                a * phase.cos() + b * phase.sin()
            })
            .sum();
    }
    let max = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v *= radius / max);
    }
    GridFunction::from_raw(*grid, values).centered()
}

/// `F^ε[μ_B]` at the nodes.
pub fn f_of_bias(
    bias: &BiasFunction,
    oracle: &FreeEnergyOracle,
    kernel: &KernelParams,
) -> Result<VectorField> {
    AttractorMap::new(oracle, kernel)?.force(bias)
}

/// `A^ε[μ_B]`.
pub fn pi_map(
    bias: &BiasFunction,
    oracle: &FreeEnergyOracle,
    kernel: &KernelParams,
) -> Result<BiasFunction> {
    AttractorMap::new(oracle, kernel)?.apply(bias)
}

pub fn picard_iterate(
    b0: &BiasFunction,
    oracle: &FreeEnergyOracle,
    kernel: &KernelParams,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointResult> {
    AttractorMap::new(oracle, kernel)?.picard(b0, tol, max_iter)
}

pub fn contraction_estimate(
    oracle: &FreeEnergyOracle,
    kernel: &KernelParams,
    radius: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    AttractorMap::new(oracle, kernel)?.contraction(radius, trials, seed)
}

/// Integrates the limiting flow from `q0` and measures the distance to the
/// tilted density of the Picard fixed point.
pub fn flow_integrate(
    q0: &AttractorState,
    oracle: &FreeEnergyOracle,
    kernel: &KernelParams,
    t_end: f64,
    dt: f64,
) -> Result<FlowTrajectory> {
    let map = AttractorMap::new(oracle, kernel)?;
    let fixed = map.picard(&map.projector().zero_bias(), 1e-13, 20_000)?;
    let reference = tilted_density(fixed.a_inf.values().values(), oracle);
    map.flow(q0, &reference, t_end, dt)
}

/// Tilted density `e^{-A★ + B}/Z_B` of a bias.
pub fn equilibrium_density(bias: &BiasFunction, oracle: &FreeEnergyOracle) -> GridFunction {
    tilted_density(bias.values().values(), oracle)
}
