//! The von Mises regularization kernel
//! `K_ε(z, z') = Π_j k_ε(z'_j - z_j)` with
//! `k_ε(u) = Z_ε⁻¹ exp(-sin²(u/2) / (ε²/2))`, normalized so that
//! `∫ k_ε(u) du / 2π = 1`.

use crate::error::{AbfError, Result};
use crate::grid::{circle_distance, PeriodicGrid};
use crate::TAU;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    epsilon: f64,
    dims: usize,
    normalizer: f64,
    resolution: usize,
}

#[inline]
fn unnormalized(u: f64, inv_eps2: f64) -> f64 {
    let s = (0.5 * u).sin();
    (-2.0 * s * s * inv_eps2).exp()
}

impl KernelParams {
    /// Computes `Z_ε` once by the periodic trapezoid rule at
    /// `max(1024, 32/ε)` points and checks the mass on a staggered rule.
    pub fn new(epsilon: f64, dims: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(AbfError::InvalidParameter(format!(
                "kernel width epsilon must lie in (0, 1], got {epsilon}"
            )));
        }
        if dims == 0 {
            return Err(AbfError::EmptyGrid);
        }
        let resolution = 1024usize.max((32.0 / epsilon).ceil() as usize);
        let inv = 1.0 / (epsilon * epsilon);
        let h = TAU / resolution as f64;
        let z = (0..resolution)
            .map(|j| unnormalized(j as f64 * h, inv))
            .sum::<f64>()
            / resolution as f64;
        let staggered = (0..resolution)
            .map(|j| unnormalized((j as f64 + 0.5) * h, inv))
            .sum::<f64>()
            / resolution as f64;
        if !(z > 0.0) || ((staggered - z) / z).abs() > 1e-10 {
            return Err(AbfError::InvalidParameter(format!(
                "kernel normalization did not converge for epsilon = {epsilon}"
            )));
        }
        Ok(KernelParams {
            epsilon,
            dims,
            normalizer: z,
            resolution,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Per-dimension `Z_ε`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// One-dimensional factor `k_ε(u)`.
    #[inline]
    pub fn k1(&self, u: f64) -> f64 {
        unnormalized(u, 1.0 / (self.epsilon * self.epsilon)) / self.normalizer
    }

    /// `log k_ε(u)` from `cos u`; finite even where `k_ε` underflows.
    #[inline]
    pub(crate) fn log_k1_from_cos(&self, cos_u: f64) -> f64 {
        -(1.0 - cos_u) / (self.epsilon * self.epsilon) - self.normalizer.ln()
    }

    /// `K_ε(z_sample, z_target)`.
    pub fn eval(&self, z_sample: &[f64], z_target: &[f64]) -> Result<f64> {
        for len in [z_sample.len(), z_target.len()] {
            if len != self.dims {
                return Err(AbfError::DimensionMismatch {
                    expected: self.dims,
                    found: len,
                });
            }
        }
        Ok(z_sample
            .iter()
            .zip(z_target)
            .map(|(s, t)| self.k1(t - s))
            .product())
    }

    /// `G × G` table `k_ε(node_t - node_s)`, row `t`, column `s`.
    pub fn matrix_1d(&self, grid: &PeriodicGrid) -> Vec<f64> {
        let g = grid.nodes_per_dim();
        // circulant: only depends on (t - s) mod G
        let first: Vec<f64> = (0..g).map(|j| self.k1(grid.node_angle(j))).collect();
        let mut m = vec![0.0; g * g];
        for t in 0..g {
            for s in 0..g {
                m[t * g + s] = first[(t + g - s) % g];
            }
        }
        m
    }
}

/// `K_ε(z_sample, z_target)`; fails for `ε ∉ (0, 1]` or mismatched dimensions.
pub fn kernel_eval(epsilon: f64, z_sample: &[f64], z_target: &[f64]) -> Result<f64> {
    KernelParams::new(epsilon, z_sample.len())?.eval(z_sample, z_target)
}

/// Measured constants of the kernel assumption on a grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KernelReport {
    /// Largest deviation of the quadrature mass from 1, over both arguments.
    pub mass_error: f64,
    /// `sup_z ∫ |z - z'|² (K(z', z) + K(z, z')) dz'`.
    pub second_moment_sup: f64,
    /// Smallest per-target moment; equals the sup by translation invariance.
    pub second_moment_inf: f64,
    /// `second_moment_sup / ε`.
    pub c_k_estimate: f64,
}

/// Quadrature checks of normalization and the second-moment bound.
///
/// The grid must resolve the kernel: `G >= 8/ε`.
pub fn check_kernel_assumptions(params: &KernelParams, grid: &PeriodicGrid) -> Result<KernelReport> {
    if grid.dims() != params.dims() {
        return Err(AbfError::DimensionMismatch {
            expected: params.dims(),
            found: grid.dims(),
        });
    }
    let required = (8.0 / params.epsilon()).ceil() as usize;
    let g = grid.nodes_per_dim();
    if g < required {
        return Err(AbfError::KernelUnderResolved {
            nodes: g,
            epsilon: params.epsilon(),
            required,
        });
    }
    let w = 1.0 / g as f64;
    let angles = grid.angles();
    // per-dimension masses and second moments in both argument orders
    let mut mass = [vec![0.0; g], vec![0.0; g]];
    let mut moment = [vec![0.0; g], vec![0.0; g]];
    for t in 0..g {
        for s in 0..g {
            let d2 = circle_distance(angles[t], angles[s]).powi(2);
            let fwd = params.k1(angles[t] - angles[s]);
            let bwd = params.k1(angles[s] - angles[t]);
            mass[0][t] += w * fwd;
            mass[1][t] += w * bwd;
            moment[0][t] += w * d2 * fwd;
            moment[1][t] += w * d2 * bwd;
        }
    }
    let m = grid.dims();
    let mut idx = vec![0; m];
    let mut mass_error: f64 = 0.0;
    let mut sup: f64 = 0.0;
    let mut inf = f64::INFINITY;
    for flat in 0..grid.len() {
        grid.multi_index(flat, &mut idx);
        let mut total = 0.0;
        for order in 0..2 {
            let mass_t: f64 = idx.iter().map(|&j| mass[order][j]).product();
            mass_error = mass_error.max((mass_t - 1.0).abs());
            // |z - z'|² splits into coordinates; the other factors contribute their mass
            for (axis, &j) in idx.iter().enumerate() {
                let others: f64 = idx
                    .iter()
                    .enumerate()
                    .filter(|&(a, _)| a != axis)
                    .map(|(_, &i)| mass[order][i])
                    .product();
                total += moment[order][j] * others;
            }
        }
        sup = sup.max(total);
        inf = inf.min(total);
    }
    Ok(KernelReport {
        mass_error,
        second_moment_sup: sup,
        second_moment_inf: inf,
        c_k_estimate: sup / params.epsilon(),
    })
}
