//! Helmholtz projection of a vector field on `T^m` onto gradients.
//!
//! For a field `F` the bias `A` minimizes `∫|F - ∇A|²` over zero-mean `A`,
//! equivalently `ΔA = div F`. On the periodic grid the solve is diagonal in
//! Fourier space: `Â(k) = -i k·F̂(k) / |k|²`, `Â(0) = 0`.
//!
//! For even `G` the Nyquist component of the differentiation symbol is set to
//! zero, so differentiation stays real and skew-symmetric and the projection
//! is exactly the orthogonal projection onto the range of the discrete
//! gradient.

use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{AbfError, Result};
use crate::grid::{GridFunction, Norm, PeriodicGrid, VectorField};

/// Cached FFT plans for one grid.
#[derive(Clone)]
pub struct Projector {
    grid: PeriodicGrid,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Projector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Projector").field("grid", &self.grid).finish()
    }
}

/// Signed wavenumber of 1-D FFT bin `j`; the Nyquist bin reports `+G/2`.
#[inline]
fn wavenumber(j: usize, g: usize) -> f64 {
    if 2 * j <= g {
        j as f64
    } else {
        j as f64 - g as f64
    }
}

#[inline]
fn is_nyquist(j: usize, g: usize) -> bool {
    g.is_multiple_of(2) && 2 * j == g
}

/// Differentiation symbol of bin `j` (zero on the Nyquist bin).
#[inline]
fn derivative_symbol(j: usize, g: usize) -> f64 {
    if is_nyquist(j, g) {
        0.0
    } else {
        wavenumber(j, g)
    }
}

impl Projector {
    pub fn new(grid: PeriodicGrid) -> Self {
        let mut planner = FftPlanner::new();
        let g = grid.nodes_per_dim();
        Projector {
            grid,
            forward: planner.plan_fft_forward(g),
            inverse: planner.plan_fft_inverse(g),
        }
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let g = self.grid.nodes_per_dim();
        let m = self.grid.dims();
        let plan = if inverse { &self.inverse } else { &self.forward };
        if m == 1 {
            plan.process(data);
            return;
        }
        let mut line = vec![Complex64::new(0.0, 0.0); g];
        for axis in 0..m {
            let stride = g.pow((m - 1 - axis) as u32);
            let block = stride * g;
            for base in (0..data.len()).step_by(block) {
                for offset in 0..stride {
                    let start = base + offset;
                    for (j, l) in line.iter_mut().enumerate() {
                        *l = data[start + j * stride];
                    }
                    plan.process(&mut line);
                    for (j, l) in line.iter().enumerate() {
                        data[start + j * stride] = *l;
                    }
                }
            }
        }
    }

    /// Fourier coefficients normalized so that `f(z) = Σ_k f̂(k) e^{ik·z}`.
    pub fn coefficients(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        let scale = self.grid.weight();
        buf.iter_mut().for_each(|c| *c *= scale);
        buf
    }

    /// Nodal values of a coefficient array (real part).
    pub fn synthesize(&self, coeffs: &[Complex64]) -> Vec<f64> {
        let mut buf = coeffs.to_vec();
        self.transform(&mut buf, true);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Per-mode differentiation symbol along `axis` for flat mode `flat`.
    fn symbol(&self, flat: usize, axis: usize, idx: &mut [usize]) -> f64 {
        self.grid.multi_index(flat, idx);
        derivative_symbol(idx[axis], self.grid.nodes_per_dim())
    }

    fn check_grid(&self, grid: &PeriodicGrid) -> Result<()> {
        if *grid == self.grid {
            Ok(())
        } else {
            Err(AbfError::Mismatched)
        }
    }

    /// Solves `ΔA = div F` with `∫A = 0`.
    pub fn project_gradient(&self, field: &VectorField) -> Result<BiasFunction> {
        self.check_grid(field.grid())?;
        if field.data().iter().any(|v| !v.is_finite()) {
            return Err(AbfError::NonFinite("force field"));
        }
        let m = self.grid.dims();
        let n = self.grid.len();
        let spectra: Vec<Vec<Complex64>> =
            (0..m).map(|c| self.coefficients(field.component(c))).collect();
        let mut idx = vec![0; m];
        let g = self.grid.nodes_per_dim();
        let mut coeffs = vec![Complex64::new(0.0, 0.0); n];
        for (flat, a) in coeffs.iter_mut().enumerate() {
            self.grid.multi_index(flat, &mut idx);
            let mut k2 = 0.0;
            let mut dot = Complex64::new(0.0, 0.0);
            for (c, spectrum) in spectra.iter().enumerate() {
                let d = derivative_symbol(idx[c], g);
                k2 += d * d;
                dot += spectrum[flat] * d;
            }
            if k2 > 0.0 {
                *a = Complex64::new(0.0, -1.0) * dot / k2;
            }
        }
        Ok(self.bias_from_coefficients(coeffs))
    }

    fn bias_from_coefficients(&self, coeffs: Vec<Complex64>) -> BiasFunction {
        BiasFunction {
            projector: self.clone(),
            coeffs,
            values: OnceLock::new(),
            gradient: OnceLock::new(),
        }
    }

    fn nodal_values(&self, coeffs: &[Complex64]) -> GridFunction {
        let mut values = self.synthesize(coeffs);
        let mean = values.iter().sum::<f64>() * self.grid.weight();
        values.iter_mut().for_each(|v| *v -= mean);
        GridFunction::from_raw(self.grid, values)
    }

    /// Wraps nodal values as a bias; the grid mean is removed.
    pub fn bias_from_values(&self, values: &GridFunction) -> Result<BiasFunction> {
        self.check_grid(values.grid())?;
        let mut coeffs = self.coefficients(values.values());
        coeffs[0] = Complex64::new(0.0, 0.0);
        Ok(self.bias_from_coefficients(coeffs))
    }

    /// The zero bias.
    pub fn zero_bias(&self) -> BiasFunction {
        self.bias_from_coefficients(vec![Complex64::new(0.0, 0.0); self.grid.len()])
    }

    fn gradient_from_coefficients(&self, coeffs: &[Complex64]) -> VectorField {
        let m = self.grid.dims();
        let n = self.grid.len();
        let mut out = VectorField::zeros(self.grid);
        let mut idx = vec![0; m];
        for c in 0..m {
            let spec: Vec<Complex64> = coeffs
                .iter()
                .enumerate()
                .map(|(flat, a)| Complex64::new(0.0, self.symbol(flat, c, &mut idx)) * a)
                .collect();
            let vals = self.synthesize(&spec);
            out.component_mut(c)[..n].copy_from_slice(&vals);
        }
        out
    }

    /// Spectral gradient of a bias at the nodes.
    pub fn gradient_of(&self, bias: &BiasFunction) -> VectorField {
        bias.nodal_gradient().clone()
    }

    /// Spectral gradient of arbitrary nodal values.
    pub fn gradient_of_values(&self, f: &GridFunction) -> Result<VectorField> {
        self.check_grid(f.grid())?;
        Ok(self.gradient_from_coefficients(&self.coefficients(f.values())))
    }

    /// `(‖f‖_p^p + ‖∇f‖_p^p)^{1/p}` with a spectral gradient, `p >= 2`.
    pub fn sobolev_norm(&self, f: &GridFunction, p: f64) -> Result<f64> {
        if !(p >= 2.0) || !p.is_finite() {
            return Err(AbfError::SobolevExponent(p));
        }
        let grad = self.gradient_of_values(f)?;
        let a = f.lp_norm(Norm::Lp(p))?;
        let b = grad.lp_norm(Norm::Lp(p))?;
        Ok((a.powf(p) + b.powf(p)).powf(1.0 / p))
    }
}

/// How the bias gradient is evaluated off the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Trigonometric series of the stored band (exact).
    #[default]
    Spectral,
    /// Multilinear interpolation of the nodal gradient.
    Interpolated,
}

/// A zero-mean bias `A` on the grid, held by its spectrum. Nodal values and
/// the nodal gradient are synthesized on first use.
#[derive(Clone)]
pub struct BiasFunction {
    projector: Projector,
    coeffs: Vec<Complex64>,
    values: OnceLock<GridFunction>,
    gradient: OnceLock<VectorField>,
}

impl std::fmt::Debug for BiasFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BiasFunction")
            .field("grid", self.grid())
            .field("coeffs", &self.coeffs)
            .finish()
    }
}

impl PartialEq for BiasFunction {
    fn eq(&self, other: &Self) -> bool {
        self.grid() == other.grid() && self.coeffs == other.coeffs
    }
}

impl BiasFunction {
    pub fn grid(&self) -> &PeriodicGrid {
        self.projector.grid()
    }

    pub fn values(&self) -> &GridFunction {
        self.values
            .get_or_init(|| self.projector.nodal_values(&self.coeffs))
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coeffs
    }

    /// Nodal spectral gradient.
    pub fn nodal_gradient(&self) -> &VectorField {
        self.gradient
            .get_or_init(|| self.projector.gradient_from_coefficients(&self.coeffs))
    }

    /// `max |∇A|` over the nodes.
    pub fn max_gradient(&self) -> f64 {
        self.nodal_gradient().max_abs()
    }

    /// Nodal difference `self - other`.
    pub fn sub(&self, other: &BiasFunction) -> Result<GridFunction> {
        self.values().sub(other.values())
    }

    /// Per-axis tables of `e^{i k z_axis}` indexed by FFT bin; the Nyquist bin
    /// holds `cos(G z/2)` so that real functions evaluate to real values.
    fn phase_tables(&self, z: &[f64]) -> Vec<Vec<Complex64>> {
        let g = self.grid().nodes_per_dim();
        z.iter()
            .map(|&za| {
                let step = Complex64::new(za.cos(), za.sin());
                let mut table = vec![Complex64::new(1.0, 0.0); g];
                let mut p = Complex64::new(1.0, 0.0);
                for j in 1..=g / 2 {
                    p *= step;
                    table[j] = p;
                    if g - j != j {
                        table[g - j] = p.conj();
                    }
                }
                if g.is_multiple_of(2) {
                    table[g / 2] = Complex64::new(table[g / 2].re, 0.0);
                }
                table
            })
            .collect()
    }

    /// `A(z)` and `∇A(z)` at an arbitrary point by the trigonometric series.
    pub fn value_and_gradient_at(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let grid = *self.grid();
        let g = grid.nodes_per_dim();
        let m = grid.dims();
        debug_assert_eq!(z.len(), m);
        grad.iter_mut().for_each(|v| *v = 0.0);
        if m == 1 {
            return self.series_1d(z[0], &mut grad[0]);
        }
        let tables = self.phase_tables(z);
        let mut value = 0.0;
        let mut idx = vec![0; m];
        for (flat, a) in self.coeffs.iter().enumerate() {
            if a.norm_sqr() == 0.0 {
                continue;
            }
            grid.multi_index(flat, &mut idx);
            let mut term = *a;
            for (axis, &j) in idx.iter().enumerate() {
                term *= tables[axis][j];
            }
            value += term.re;
            for (axis, gv) in grad.iter_mut().enumerate() {
                *gv -= derivative_symbol(idx[axis], g) * term.im;
            }
        }
        value
    }

    /// One-dimensional series folded over `±k` (real data has `c_{-k} = conj(c_k)`).
    fn series_1d(&self, z: f64, grad: &mut f64) -> f64 {
        let g = self.coeffs.len();
        let step = Complex64::new(z.cos(), z.sin());
        let mut p = Complex64::new(1.0, 0.0);
        let mut value = self.coeffs[0].re;
        let mut slope = 0.0;
        let half = (g - 1) / 2;
        for j in 1..=half {
            p *= step;
            let term = self.coeffs[j] * p;
            value += 2.0 * term.re;
            slope -= 2.0 * j as f64 * term.im;
        }
        if g.is_multiple_of(2) {
            p *= step;
            value += self.coeffs[g / 2].re * p.re;
        }
        *grad = slope;
        value
    }

    pub fn value_at(&self, z: &[f64]) -> f64 {
        let mut grad = vec![0.0; z.len()];
        self.value_and_gradient_at(z, &mut grad)
    }

    /// `∇A(z)` in the requested mode.
    pub fn gradient_at(&self, z: &[f64], mode: GradientMode) -> Vec<f64> {
        let mut grad = vec![0.0; z.len()];
        match mode {
            GradientMode::Spectral => {
                self.value_and_gradient_at(z, &mut grad);
            }
            GradientMode::Interpolated => self.interpolate_gradient(z, &mut grad),
        }
        grad
    }

    /// Multilinear interpolation of the nodal gradient.
    pub fn interpolate_gradient(&self, z: &[f64], out: &mut [f64]) {
        let grid = *self.grid();
        let g = grid.nodes_per_dim();
        let m = grid.dims();
        let h = grid.spacing();
        let gradient = self.nodal_gradient();
        let mut lo = vec![0usize; m];
        let mut frac = vec![0.0; m];
        for a in 0..m {
            let s = crate::grid::wrap_unchecked(z[a]) / h;
            let f = s.floor();
            lo[a] = (f as usize) % g;
            frac[a] = s - f;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut corner = vec![0usize; m];
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
            let node = grid.flat_index(&corner);
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * gradient.component(c)[node];
            }
        }
    }
}

/// `F ↦ A`; see [`Projector::project_gradient`].
pub fn project_gradient(field: &VectorField) -> Result<BiasFunction> {
    Projector::new(*field.grid()).project_gradient(field)
}

/// `‖A‖_{W^{1,p}}` of nodal values.
pub fn sobolev_norm(f: &GridFunction, p: f64) -> Result<f64> {
    Projector::new(*f.grid()).sobolev_norm(f, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::TAU;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid1(g: usize) -> PeriodicGrid {
        PeriodicGrid::new(1, g).unwrap()
    }

    fn field1(g: usize, f: impl Fn(f64) -> f64) -> VectorField {
        VectorField::from_fn(grid1(g), |z| vec![f(z[0])]).unwrap()
    }

    fn max_diff(a: &[f64], b: impl Fn(usize) -> f64) -> f64 {
        a.iter().enumerate().map(|(i, v)| (v - b(i)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn projection_examples() {
        let g = grid1(64);
        let p = Projector::new(g);
        let a = p.project_gradient(&field1(64, f64::cos)).unwrap();
        assert!(max_diff(a.values().values(), |i| g.node_angle(i).sin()) < 1e-12);
        let c = p.project_gradient(&field1(64, |_| 3.5)).unwrap();
        assert!(c.values().max_abs() < 1e-14);
        let s = p.project_gradient(&field1(64, |z| z.cos() + 7.0)).unwrap();
        assert!(max_diff(s.values().values(), |i| g.node_angle(i).sin()) < 1e-12);
        assert!(s.values().mean().abs() < 1e-15);
    }

    #[test]
    fn matches_closed_form_in_one_dimension() {
        // A(z) = ∫₀^z F - (z/2π) ∫₀^{2π} F for F = 1 + cos z + 2 sin 3z
        let g = grid1(64);
        let a = Projector::new(g)
            .project_gradient(&field1(64, |z| 1.0 + z.cos() + 2.0 * (3.0 * z).sin()))
            .unwrap();
        let prim = |z: f64| z + z.sin() - 2.0 / 3.0 * (3.0 * z).cos() + 2.0 / 3.0;
        let closed: Vec<f64> = (0..64)
            .map(|i| {
                let z = g.node_angle(i);
                prim(z) - z / TAU * prim(TAU)
            })
            .collect();
        let mean = closed.iter().sum::<f64>() / 64.0;
        assert!(max_diff(a.values().values(), |i| closed[i] - mean) < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let g = grid1(8);
        let mut data = vec![0.0; 8];
        data[3] = f64::NAN;
        // construction already refuses; exercise the projector guard directly
        let f = VectorField::from_raw(g, data);
        assert!(Projector::new(g).project_gradient(&f).is_err());
    }

    #[test]
    fn gradient_examples() {
        let g = grid1(64);
        let p = Projector::new(g);
        let sin = p.bias_from_values(&GridFunction::from_fn(g, |z| z[0].sin()).unwrap()).unwrap();
        let d = p.gradient_of(&sin);
        assert!(max_diff(d.component(0), |i| g.node_angle(i).cos()) < 1e-10);
        let zero = p.zero_bias();
        assert_eq!(p.gradient_of(&zero).max_abs(), 0.0);
        let s3 = p
            .bias_from_values(&GridFunction::from_fn(g, |z| (3.0 * z[0]).sin()).unwrap())
            .unwrap();
        assert!(max_diff(p.gradient_of(&s3).component(0), |i| 3.0 * (3.0 * g.node_angle(i)).cos()) < 1e-10);
    }

    #[test]
    fn off_grid_evaluation() {
        let g = grid1(64);
        let p = Projector::new(g);
        let sin = p.bias_from_values(&GridFunction::from_fn(g, |z| z[0].sin()).unwrap()).unwrap();
        let gr = sin.gradient_at(&[PI / 4.0], GradientMode::Spectral);
        assert_abs_diff_eq!(gr[0], (PI / 4.0).cos(), epsilon = 1e-10);
        assert_abs_diff_eq!(sin.value_at(&[1.234]), 1.234f64.sin(), epsilon = 1e-12);
        assert_eq!(p.zero_bias().gradient_at(&[2.0], GradientMode::Spectral), vec![0.0]);

        // random degree-5 trig polynomial, analytic derivative
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ca: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sa: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |z: f64| (1..6).map(|k| ca[k] * (k as f64 * z).cos() + sa[k] * (k as f64 * z).sin()).sum::<f64>();
        let df = |z: f64| {
            (1..6)
                .map(|k| k as f64 * (-ca[k] * (k as f64 * z).sin() + sa[k] * (k as f64 * z).cos()))
                .sum::<f64>()
        };
        let b = p.bias_from_values(&GridFunction::from_fn(g, |z| f(z[0])).unwrap()).unwrap();
        for _ in 0..50 {
            let z = rng.random_range(0.0..TAU);
            assert_abs_diff_eq!(b.gradient_at(&[z], GradientMode::Spectral)[0], df(z), epsilon = 1e-9);
            let lin = b.gradient_at(&[z], GradientMode::Interpolated)[0];
            // second order in the spacing
            assert!((lin - df(z)).abs() < 25.0 * 5.0 * g.spacing().powi(2), "{lin} {}", df(z));
        }
    }

    #[test]
    fn sobolev_examples() {
        let g = grid1(64);
        let p = Projector::new(g);
        let sin = GridFunction::from_fn(g, |z| z[0].sin()).unwrap();
        assert_abs_diff_eq!(p.sobolev_norm(&sin, 2.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(p.sobolev_norm(&GridFunction::zeros(g), 2.0).unwrap(), 0.0);
        // ∫sin⁴ = 3/8 by a dense independent quadrature
        let n = 4096;
        let s4: f64 = (0..n).map(|j| (TAU * j as f64 / n as f64).sin().powi(4)).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(s4, 0.375, epsilon = 1e-14);
        assert_abs_diff_eq!(
            p.sobolev_norm(&sin, 4.0).unwrap(),
            (2.0 * s4).powf(0.25),
            epsilon = 1e-12
        );
        assert!(matches!(p.sobolev_norm(&sin, 1.0), Err(AbfError::SobolevExponent(_))));
    }

    #[test]
    fn two_dimensional_projection() {
        let g = PeriodicGrid::new(2, 32).unwrap();
        let p = Projector::new(g);
        // divergence-free field
        let curl = VectorField::from_fn(g, |z| vec![-2.0 * z[1].sin(), 2.0 * z[0].sin()]).unwrap();
        assert!(p.project_gradient(&curl).unwrap().values().max_abs() < 1e-10);
        // gradient of A = sin z1 cos 2z2
        let a = |z: &[f64]| z[0].sin() * (2.0 * z[1]).cos();
        let grad = VectorField::from_fn(g, |z| {
            vec![z[0].cos() * (2.0 * z[1]).cos(), -2.0 * z[0].sin() * (2.0 * z[1]).sin()]
        })
        .unwrap();
        let mixed = VectorField::new(
            g,
            grad.data().iter().zip(curl.data()).map(|(x, y)| x + y + 1.0).collect(),
        )
        .unwrap();
        let b = p.project_gradient(&mixed).unwrap();
        let exact = GridFunction::from_fn(g, a).unwrap();
        assert!(b.values().sub(&exact).unwrap().max_abs() < 1e-10);
        let z = [0.3, 2.2];
        let mut gr = [0.0; 2];
        let v = b.value_and_gradient_at(&z, &mut gr);
        assert_abs_diff_eq!(v, a(&z), epsilon = 1e-10);
        assert_abs_diff_eq!(gr[0], z[0].cos() * (2.0 * z[1]).cos(), epsilon = 1e-10);
        let lin = b.gradient_at(&z, GradientMode::Interpolated);
        assert!((lin[1] - gr[1]).abs() < 0.05);
    }

    #[test]
    fn idempotent_on_band_limited_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for g in [16usize, 64] {
            let grid = grid1(g);
            let p = Projector::new(grid);
            for _ in 0..20 {
                let deg = g / 2 - 1;
                let c: Vec<(f64, f64)> = (0..=deg).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
                let f = GridFunction::from_fn(grid, |z| {
                    (1..=deg).map(|k| c[k].0 * (k as f64 * z[0]).cos() + c[k].1 * (k as f64 * z[0]).sin()).sum()
                })
                .unwrap();
                let a = p.bias_from_values(&f).unwrap();
                let back = p.project_gradient(&p.gradient_of(&a)).unwrap();
                assert!(back.sub(&a).unwrap().max_abs() < 1e-10);
                // coefficients reproduce the nodal values
                let re = p.synthesize(a.coefficients());
                assert!(max_diff(&re, |i| a.values().values()[i]) < 1e-10);
            }
        }
    }
}
