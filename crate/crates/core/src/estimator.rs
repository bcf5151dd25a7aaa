//! Online kernel estimate of the mean force `F^ε[μ_t]`.
//!
//! The empirical measure is never stored. Each sample adds
//! `w · K_ε(z_s, node)` to a denominator grid and `w · ∇_z V(x_s) K_ε(z_s, node)`
//! to a numerator grid, so the nodewise ratio is exactly `F^ε` of the
//! weighted empirical measure held by the accumulator. The normalization
//! `1/t` of the measure cancels in the ratio.
//!
//! Kernel values underflow for narrow kernels far from the sample, so each
//! node keeps its sums relative to a private log-scale.

use std::io::Write;

use crate::error::{AbfError, Result};
use crate::grid::{PeriodicGrid, TorusPoint, VectorField};
use crate::kernel::KernelParams;
use crate::output::fmt_f64;

// rescale a node once a new contribution exceeds its scale by this much
const RESCALE_LOG: f64 = 600.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BiasAccumulator {
    grid: PeriodicGrid,
    kernel: KernelParams,
    /// component-major, like [`VectorField`]
    numerator: Vec<f64>,
    denominator: Vec<f64>,
    log_scale: Vec<f64>,
    total_weight: f64,
    samples: u64,
    node_cos: Vec<f64>,
    node_sin: Vec<f64>,
    // scratch: per-axis log-kernel rows
    log_rows: Vec<f64>,
}

impl BiasAccumulator {
    pub fn new(grid: PeriodicGrid, kernel: KernelParams) -> Result<Self> {
        if grid.dims() != kernel.dims() {
            return Err(AbfError::DimensionMismatch {
                expected: kernel.dims(),
                found: grid.dims(),
            });
        }
        let angles = grid.angles();
        let n = grid.len();
        Ok(BiasAccumulator {
            grid,
            kernel,
            numerator: vec![0.0; n * grid.dims()],
            denominator: vec![0.0; n],
            log_scale: vec![0.0; n],
            total_weight: 0.0,
            samples: 0,
            node_cos: angles.iter().map(|a| a.cos()).collect(),
            node_sin: angles.iter().map(|a| a.sin()).collect(),
            log_rows: vec![0.0; grid.nodes_per_dim() * grid.dims()],
        })
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    /// Accumulated time `t` (sum of all weights).
    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn sample_count(&self) -> u64 {
        self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }

    /// Adds the sample `x` with mean-force contribution `grad_z_v`.
    pub fn accumulate(&mut self, x: &TorusPoint, grad_z_v: &[f64], weight: f64) -> Result<()> {
        self.accumulate_at(x.z(), grad_z_v, weight)
    }

    /// As [`accumulate`](Self::accumulate) with the reaction coordinate given directly.
    pub fn accumulate_at(&mut self, z: &[f64], grad_z_v: &[f64], weight: f64) -> Result<()> {
        let m = self.grid.dims();
        if z.len() != m || grad_z_v.len() != m {
            return Err(AbfError::DimensionMismatch {
                expected: m,
                found: if z.len() != m { z.len() } else { grad_z_v.len() },
            });
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(AbfError::InvalidParameter(format!(
                "sample weight must be positive and finite, got {weight}"
            )));
        }
        if grad_z_v.iter().chain(z).any(|v| !v.is_finite()) {
            return Err(AbfError::NonFinite("sample"));
        }
        self.add(z, grad_z_v, weight);
        Ok(())
    }

    fn add(&mut self, z: &[f64], grad: &[f64], weight: f64) {
        let g = self.grid.nodes_per_dim();
        let m = self.grid.dims();
        let n = self.grid.len();
        for (a, &za) in z.iter().enumerate() {
            let (cz, sz) = (za.cos(), za.sin());
            for j in 0..g {
                let cos_u = self.node_cos[j] * cz + self.node_sin[j] * sz;
                self.log_rows[a * g + j] = self.kernel.log_k1_from_cos(cos_u);
            }
        }
        let first = self.samples == 0;
        for node in 0..n {
            let log_k = if m == 1 {
                self.log_rows[node]
            } else {
                let mut rest = node;
                let mut acc = 0.0;
                for a in (0..m).rev() {
                    acc += self.log_rows[a * g + rest % g];
                    rest /= g;
                }
                acc
            };
            if first {
                self.log_scale[node] = log_k;
            } else if log_k - self.log_scale[node] > RESCALE_LOG {
                let f = (self.log_scale[node] - log_k).exp();
                self.denominator[node] *= f;
                for c in 0..m {
                    self.numerator[c * n + node] *= f;
                }
                self.log_scale[node] = log_k;
            }
            let wk = weight * (log_k - self.log_scale[node]).exp();
            self.denominator[node] += wk;
            for (c, gc) in grad.iter().enumerate() {
                self.numerator[c * n + node] += wk * gc;
            }
        }
        self.total_weight += weight;
        self.samples += 1;
    }

    /// Nodewise `numerator / denominator`, i.e. `F^ε` of the held measure.
    pub fn force_estimate(&self) -> Result<VectorField> {
        if self.samples == 0 {
            return Err(AbfError::NoSamples);
        }
        let n = self.grid.len();
        let mut out = self.numerator.clone();
        for c in 0..self.grid.dims() {
            for node in 0..n {
                out[c * n + node] /= self.denominator[node];
            }
        }
        VectorField::new(self.grid, out)
    }

    /// Fieldwise sum of two accumulators on the same grid and kernel.
    pub fn merge(&self, other: &BiasAccumulator) -> Result<BiasAccumulator> {
        let mut out = self.clone();
        out.merge_from(other)?;
        Ok(out)
    }

    /// In-place [`merge`](Self::merge).
    pub fn merge_from(&mut self, other: &BiasAccumulator) -> Result<()> {
        if self.grid != other.grid || self.kernel != other.kernel {
            return Err(AbfError::Mismatched);
        }
        if other.samples == 0 {
            return Ok(());
        }
        if self.samples == 0 {
            self.numerator.copy_from_slice(&other.numerator);
            self.denominator.copy_from_slice(&other.denominator);
            self.log_scale.copy_from_slice(&other.log_scale);
        } else {
            let n = self.grid.len();
            for node in 0..n {
                let s = self.log_scale[node].max(other.log_scale[node]);
                let fa = (self.log_scale[node] - s).exp();
                let fb = (other.log_scale[node] - s).exp();
                self.denominator[node] = self.denominator[node] * fa + other.denominator[node] * fb;
                for c in 0..self.grid.dims() {
                    let i = c * n + node;
                    self.numerator[i] = self.numerator[i] * fa + other.numerator[i] * fb;
                }
                self.log_scale[node] = s;
            }
        }
        self.total_weight += other.total_weight;
        self.samples += other.samples;
        Ok(())
    }

    /// Same grid and kernel, no samples.
    pub fn empty_like(&self) -> BiasAccumulator {
        BiasAccumulator::new(self.grid, self.kernel).expect("validated at construction")
    }

    /// Unscaled denominator `Σ w K(z_s, node)` (may underflow to 0 for narrow kernels).
    pub fn denominator(&self) -> Vec<f64> {
        self.denominator
            .iter()
            .zip(&self.log_scale)
            .map(|(d, s)| d * s.exp())
            .collect()
    }

    /// Unscaled numerator, component-major.
    pub fn numerator(&self) -> Vec<f64> {
        let n = self.grid.len();
        self.numerator
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.log_scale[i % n].exp())
            .collect()
    }

    /// Writes `node, z1..zm, denominator, numerator_1..m` rows.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let m = self.grid.dims();
        let n = self.grid.len();
        let mut header = vec!["node".to_string()];
        header.extend((1..=m).map(|i| format!("z{i}")));
        header.push("denominator".into());
        header.extend((1..=m).map(|i| format!("numerator{i}")));
        writeln!(w, "{}", header.join(","))?;
        let den = self.denominator();
        let num = self.numerator();
        for node in 0..n {
            let mut row = vec![node.to_string()];
            row.extend(self.grid.node_coords(node).into_iter().map(fmt_f64));
            row.push(fmt_f64(den[node]));
            row.extend((0..m).map(|c| fmt_f64(num[c * n + node])));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Sample-list form of the empirical measure, evaluated by brute force.
///
/// Used to validate the grid accumulator on short runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleList {
    samples: Vec<(Vec<f64>, Vec<f64>, f64)>,
}

impl SampleList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, z: &[f64], grad_z_v: &[f64], weight: f64) {
        self.samples.push((z.to_vec(), grad_z_v.to_vec(), weight));
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `F^ε` at every node, with kernel values taken straight from [`KernelParams::eval`].
    pub fn force_estimate(&self, grid: &PeriodicGrid, kernel: &KernelParams) -> Result<VectorField> {
        if self.samples.is_empty() {
            return Err(AbfError::NoSamples);
        }
        let m = grid.dims();
        let n = grid.len();
        let mut out = vec![0.0; n * m];
        for node in 0..n {
            let target = grid.node_coords(node);
            let mut den = 0.0;
            let mut num = vec![0.0; m];
            for (z, g, w) in &self.samples {
                let k = w * kernel.eval(z, &target)?;
                den += k;
                for (nc, gc) in num.iter_mut().zip(g) {
                    *nc += k * gc;
                }
            }
            for c in 0..m {
                out[c * n + node] = num[c] / den;
            }
        }
        VectorField::new(*grid, out)
    }
}
