//! Trigonometric test potentials with exact gradients, and quadrature oracles
//! for the free energy `A★(z) = -log ∫ e^{-V(y,z)} dy`, the mean force and
//! observables of the Gibbs measure `μ★ ∝ e^{-V}`.
//!
//! Every builtin is a finite sum of `amp · cos(k·x)` with integer wave
//! vectors, so the potentials are smooth, `2π`-periodic, and the periodic
//! trapezoid rule integrates their Boltzmann factors spectrally.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AbfError, Result};
use crate::grid::{GridFunction, PeriodicGrid, TorusPoint, VectorField};

/// Named potential families; `y` is the first coordinate(s), `z` the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// `a cos y + b cos z`.
    Separable { a: f64, b: f64 },
    /// `a cos 2z + b cos(z - y) + c cos y`.
    CoupledWell { a: f64, b: f64, c: f64 },
    /// `b cos z`.
    ZOnly { b: f64 },
    /// Three-dimensional extension whose Boltzmann factor is the product of
    /// two copies of a two-dimensional base. With `m = 1` the copies share
    /// `z`: `V(y1, y2, z) = base(y1, z) + base(y2, z)`; with `m = 2` they
    /// share `y`: `V(y, z1, z2) = base(y, z1) + base(y, z2)`.
    Product { base: Box<Family>, m: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct TrigTerm {
    amp: f64,
    wave: Vec<i32>,
}

/// A closed-form potential `V: T^d -> R`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSpec {
    family: Family,
    dim: usize,
    m: usize,
    terms: Vec<TrigTerm>,
}

fn term(amp: f64, wave: &[i32]) -> TrigTerm {
    TrigTerm {
        amp,
        wave: wave.to_vec(),
    }
}

fn base_terms(family: &Family) -> Result<Vec<TrigTerm>> {
    // wave vectors are written as (y, z)
    Ok(match *family {
        Family::Separable { a, b } => vec![term(a, &[1, 0]), term(b, &[0, 1])],
        Family::CoupledWell { a, b, c } => vec![
            term(a, &[0, 2]),
            term(b, &[-1, 1]),
            term(c, &[1, 0]),
        ],
        Family::ZOnly { b } => vec![term(b, &[0, 1])],
        Family::Product { .. } => {
            return Err(AbfError::InvalidParameter(
                "product potentials cannot be nested".into(),
            ))
        }
    })
}

impl PotentialSpec {
    pub fn new(family: Family) -> Result<Self> {
        let check = |v: &[f64]| {
            if v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(AbfError::NonFinite("potential parameter"))
            }
        };
        let (dim, m, terms) = match &family {
            Family::Separable { a, b } => {
                check(&[*a, *b])?;
                (2, 1, base_terms(&family)?)
            }
            Family::CoupledWell { a, b, c } => {
                check(&[*a, *b, *c])?;
                (2, 1, base_terms(&family)?)
            }
            Family::ZOnly { b } => {
                check(&[*b])?;
                (2, 1, base_terms(&family)?)
            }
            Family::Product { base, m } => {
                let base_spec = PotentialSpec::new((**base).clone())?;
                let mut terms = Vec::new();
                for t in &base_spec.terms {
                    let (ky, kz) = (t.wave[0], t.wave[1]);
                    match m {
                        1 => {
                            terms.push(term(t.amp, &[ky, 0, kz]));
                            terms.push(term(t.amp, &[0, ky, kz]));
                        }
                        2 => {
                            terms.push(term(t.amp, &[ky, kz, 0]));
                            terms.push(term(t.amp, &[ky, 0, kz]));
                        }
                        _ => {
                            return Err(AbfError::InvalidParameter(format!(
                                "product extension supports m in {{1, 2}}, got {m}"
                            )))
                        }
                    }
                }
                (3, *m, terms)
            }
        };
        Ok(PotentialSpec {
            family,
            dim,
            m,
            terms,
        })
    }

    /// Builds a family from its configuration name and positional parameters.
    ///
    /// `m` only matters for the `product_*` names (default 1).
    pub fn from_name(name: &str, params: &[f64], m: Option<usize>) -> Result<Self> {
        let want = |n: usize| {
            if params.len() == n {
                Ok(())
            } else {
                Err(AbfError::InvalidParameter(format!(
                    "potential `{name}` takes {n} parameters, got {}",
                    params.len()
                )))
            }
        };
        let family = match name {
            "separable" => {
                want(2)?;
                Family::Separable {
                    a: params[0],
                    b: params[1],
                }
            }
            "coupled_well" => {
                want(3)?;
                Family::CoupledWell {
                    a: params[0],
                    b: params[1],
                    c: params[2],
                }
            }
            "z_only" => {
                want(1)?;
                Family::ZOnly { b: params[0] }
            }
            _ => match name.strip_prefix("product_") {
                Some(base) if base != name && !base.starts_with("product") => {
                    let base = PotentialSpec::from_name(base, params, None)?.family;
                    Family::Product {
                        base: Box::new(base),
                        m: m.unwrap_or(1),
                    }
                }
                _ => {
                    return Err(AbfError::InvalidParameter(format!(
                        "unknown potential family `{name}`"
                    )))
                }
            },
        };
        PotentialSpec::new(family)
    }

    /// Default experiment potential: coupled double well `a=2, b=1, c=0.5`.
    pub fn default_coupled_well() -> Self {
        PotentialSpec::new(Family::CoupledWell {
            a: 2.0,
            b: 1.0,
            c: 0.5,
        })
        .expect("finite parameters")
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    /// Total dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Reaction-coordinate dimension `m`.
    pub fn m(&self) -> usize {
        self.m
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found == self.dim {
            Ok(())
        } else {
            Err(AbfError::DimensionMismatch {
                expected: self.dim,
                found,
            })
        }
    }

    #[inline]
    fn phase(wave: &[i32], x: &[f64]) -> f64 {
        wave.iter().zip(x).map(|(&k, &xi)| k as f64 * xi).sum()
    }

    pub fn eval(&self, x: &TorusPoint) -> Result<f64> {
        self.check_dim(x.dim())?;
        Ok(self.value_at(x.coords()))
    }

    /// `V(x)` for raw coordinates; `x.len()` must equal `dim()`.
    #[inline]
    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.amp * Self::phase(&t.wave, x).cos())
            .sum()
    }

    /// Analytic gradient `∇V(x)` written into `out` (length `dim()`).
    #[inline]
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for t in &self.terms {
            let s = -t.amp * Self::phase(&t.wave, x).sin();
            for (o, &k) in out.iter_mut().zip(&t.wave) {
                if k != 0 {
                    *o += s * k as f64;
                }
            }
        }
    }

    pub fn gradient(&self, x: &TorusPoint) -> Result<Vec<f64>> {
        self.check_dim(x.dim())?;
        let mut g = vec![0.0; self.dim];
        self.gradient_into(x.coords(), &mut g);
        Ok(g)
    }

    /// `∇_z V(x)`, the last `m` components of the gradient.
    pub fn grad_z(&self, x: &TorusPoint) -> Result<Vec<f64>> {
        let g = self.gradient(x)?;
        Ok(g[self.dim - self.m..].to_vec())
    }

    /// Upper bound of `sup |∇V|` from the term amplitudes.
    pub fn grad_bound(&self) -> f64 {
        self.component_bound(0..self.dim)
    }

    /// Upper bound of `sup |∇_z V|` from the term amplitudes.
    pub fn grad_z_bound(&self) -> f64 {
        self.component_bound(self.dim - self.m..self.dim)
    }

    fn component_bound(&self, range: std::ops::Range<usize>) -> f64 {
        range
            .map(|i| {
                self.terms
                    .iter()
                    .map(|t| t.amp.abs() * (t.wave[i] as f64).abs())
                    .sum::<f64>()
                    .powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `max |∇_z V|` over a full tensor grid with `resolution` points per axis.
    pub fn grad_z_max_on_grid(&self, resolution: usize) -> f64 {
        let n = resolution.pow(self.dim as u32);
        let h = crate::TAU / resolution as f64;
        (0..n)
            .into_par_iter()
            .map(|flat| {
                let x = full_coords(flat, self.dim, resolution, h);
                let mut g = vec![0.0; self.dim];
                self.gradient_into(&x, &mut g);
                g[self.dim - self.m..].iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .reduce(|| 0.0, f64::max)
    }
}

fn full_coords(mut flat: usize, dim: usize, res: usize, h: f64) -> Vec<f64> {
    let mut x = vec![0.0; dim];
    for xi in x.iter_mut().rev() {
        *xi = (flat % res) as f64 * h;
        flat /= res;
    }
    x
}

/// Quadrature values of the free energy and mean force on a z-grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeEnergyOracle {
    a_star: GridFunction,
    a_star_bar: GridFunction,
    grad_a_star: VectorField,
    mean_a_star: f64,
    y_resolution: usize,
}

impl FreeEnergyOracle {
    pub fn grid(&self) -> &PeriodicGrid {
        self.a_star.grid()
    }

    /// `A★` at the nodes (normalized against `dy` with unit mass).
    pub fn a_star(&self) -> &GridFunction {
        &self.a_star
    }

    /// Zero-mean free energy `Ā★ = A★ - mean(A★)`.
    pub fn a_star_bar(&self) -> &GridFunction {
        &self.a_star_bar
    }

    /// Mean force `∇A★` from the conditional expectation of `∇_z V`.
    pub fn grad_a_star(&self) -> &VectorField {
        &self.grad_a_star
    }

    pub fn mean_a_star(&self) -> f64 {
        self.mean_a_star
    }

    pub fn y_resolution(&self) -> usize {
        self.y_resolution
    }

    /// The oracle of a potential that does not depend on `x` at all.
    pub fn flat(grid: PeriodicGrid) -> Self {
        FreeEnergyOracle {
            a_star: GridFunction::zeros(grid),
            a_star_bar: GridFunction::zeros(grid),
            grad_a_star: VectorField::zeros(grid),
            mean_a_star: 0.0,
            y_resolution: 0,
        }
    }
}

/// Tabulates `A★` and `∇A★` at every node of `grid` with a `g_y`-point
/// periodic trapezoid rule in each `y` direction.
pub fn free_energy_reference(
    spec: &PotentialSpec,
    grid: PeriodicGrid,
    g_y: usize,
) -> Result<FreeEnergyOracle> {
    if g_y < 32 {
        return Err(AbfError::InvalidParameter(format!(
            "y quadrature needs at least 32 points, got {g_y}"
        )));
    }
    if grid.dims() != spec.m() {
        return Err(AbfError::DimensionMismatch {
            expected: spec.m(),
            found: grid.dims(),
        });
    }
    let (d, m) = (spec.dim(), spec.m());
    let n_y = g_y.pow((d - m) as u32);
    let h_y = crate::TAU / g_y as f64;

    let per_node: Vec<(f64, Vec<f64>)> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let z = grid.node_coords(node);
            let mut x = vec![0.0; d];
            x[d - m..].copy_from_slice(&z);
            let mut vals = Vec::with_capacity(n_y);
            for flat in 0..n_y {
                let y = full_coords(flat, d - m, g_y, h_y);
                x[..d - m].copy_from_slice(&y);
                vals.push(x.clone());
            }
            let v: Vec<f64> = vals.iter().map(|x| spec.value_at(x)).collect();
            let v_min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            let mut force = vec![0.0; m];
            let mut g = vec![0.0; d];
            for (x, &vx) in vals.iter().zip(&v) {
                let w = (v_min - vx).exp();
                spec.gradient_into(x, &mut g);
                sum += w;
                for (f, gz) in force.iter_mut().zip(&g[d - m..]) {
                    *f += w * gz;
                }
            }
            let a = v_min - (sum / n_y as f64).ln();
            force.iter_mut().for_each(|f| *f /= sum);
            (a, force)
        })
        .collect();

    let mut a = Vec::with_capacity(grid.len());
    let mut grad = vec![0.0; grid.len() * m];
    for (node, (an, fn_)) in per_node.into_iter().enumerate() {
        if !an.is_finite() || fn_.iter().any(|f| !f.is_finite()) {
            return Err(AbfError::ExpOverflow("free energy quadrature"));
        }
        a.push(an);
        for (c, f) in fn_.into_iter().enumerate() {
            grad[c * grid.len() + node] = f;
        }
    }
    let a_star = GridFunction::new(grid, a)?;
    let mean_a_star = a_star.mean();
    Ok(FreeEnergyOracle {
        a_star_bar: a_star.centered(),
        a_star,
        grad_a_star: VectorField::new(grid, grad)?,
        mean_a_star,
        y_resolution: g_y,
    })
}

/// `∫ φ dμ★` by the periodic trapezoid rule on a `g_full^d` tensor grid.
pub fn mu_star_observable(
    spec: &PotentialSpec,
    phi: impl Fn(&[f64]) -> f64 + Sync,
    g_full: usize,
) -> Result<f64> {
    if g_full < 2 {
        return Err(AbfError::EmptyGrid);
    }
    let d = spec.dim();
    let n = g_full.pow(d as u32);
    let h = crate::TAU / g_full as f64;
    let v_min = (0..n)
        .into_par_iter()
        .map(|i| spec.value_at(&full_coords(i, d, g_full, h)))
        .reduce(|| f64::INFINITY, f64::min);
    let terms: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = full_coords(i, d, g_full, h);
            let w = (v_min - spec.value_at(&x)).exp();
            (phi(&x) * w, w)
        })
        .collect();
    let (num, den) = terms.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let r = num / den;
    if r.is_finite() {
        Ok(r)
    } else {
        Err(AbfError::ExpOverflow("observable quadrature"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn pt(c: &[f64]) -> TorusPoint {
        TorusPoint::new(c.to_vec(), 1).unwrap()
    }

    #[test]
    fn eval_examples() {
        let z = PotentialSpec::from_name("z_only", &[1.0], None).unwrap();
        assert_abs_diff_eq!(z.eval(&pt(&[2.3, 0.0])).unwrap(), 1.0, epsilon = 1e-15);
        let s = PotentialSpec::from_name("separable", &[1.0, 2.0], None).unwrap();
        assert_abs_diff_eq!(s.eval(&pt(&[PI, PI])).unwrap(), -3.0, epsilon = 1e-14);
        let c = PotentialSpec::from_name("coupled_well", &[1.0, 1.0, 0.0], None).unwrap();
        assert_abs_diff_eq!(
            c.eval(&pt(&[0.0, PI / 2.0])).unwrap(),
            -1.0,
            epsilon = 1e-14
        );
        let three = TorusPoint::new(vec![0.0, 0.0, 0.0], 1).unwrap();
        assert!(matches!(
            s.eval(&three),
            Err(AbfError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unknown_family_and_arity() {
        assert!(PotentialSpec::from_name("lennard_jones", &[], None).is_err());
        assert!(PotentialSpec::from_name("z_only", &[1.0, 2.0], None).is_err());
        assert!(PotentialSpec::from_name("product_product_z_only", &[1.0], None).is_err());
        assert!(PotentialSpec::from_name("product_z_only", &[1.0], Some(3)).is_err());
        assert!(PotentialSpec::from_name("z_only", &[f64::NAN], None).is_err());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = [
            PotentialSpec::default_coupled_well(),
            PotentialSpec::from_name("separable", &[0.7, -1.3], None).unwrap(),
            PotentialSpec::from_name("product_coupled_well", &[2.0, 1.0, 0.5], Some(1)).unwrap(),
            PotentialSpec::from_name("product_coupled_well", &[2.0, 1.0, 0.5], Some(2)).unwrap(),
        ];
        let h = 1e-5;
        for spec in &specs {
            for _ in 0..100 {
                let x: Vec<f64> = (0..spec.dim()).map(|_| rng.random_range(0.0..crate::TAU)).collect();
                let mut g = vec![0.0; spec.dim()];
                spec.gradient_into(&x, &mut g);
                for i in 0..spec.dim() {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (spec.value_at(&xp) - spec.value_at(&xm)) / (2.0 * h);
                    assert!((fd - g[i]).abs() < 1e-6, "{fd} vs {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn grad_bounds_dominate_grid_maximum() {
        let spec = PotentialSpec::default_coupled_well();
        let on_grid = spec.grad_z_max_on_grid(256);
        assert!(on_grid <= spec.grad_z_bound() + 1e-12);
        assert!(on_grid > 0.5 * spec.grad_z_bound());
    }

    #[test]
    fn z_only_free_energy_is_the_potential() {
        let grid = PeriodicGrid::new(1, 64).unwrap();
        let spec = PotentialSpec::from_name("z_only", &[1.0], None).unwrap();
        let o = free_energy_reference(&spec, grid, 64).unwrap();
        for (i, &a) in o.a_star().values().iter().enumerate() {
            let z = grid.node_angle(i);
            assert_abs_diff_eq!(a, z.cos(), epsilon = 1e-12);
            assert_abs_diff_eq!(o.a_star_bar().values()[i], z.cos(), epsilon = 1e-10);
            assert_abs_diff_eq!(o.grad_a_star().component(0)[i], -z.sin(), epsilon = 1e-12);
        }
    }

    #[test]
    fn separable_free_energy_up_to_constant() {
        let grid = PeriodicGrid::new(1, 64).unwrap();
        let spec = PotentialSpec::from_name("separable", &[1.0, 1.0], None).unwrap();
        let o = free_energy_reference(&spec, grid, 128).unwrap();
        for (i, &a) in o.a_star_bar().values().iter().enumerate() {
            assert_abs_diff_eq!(a, grid.node_angle(i).cos(), epsilon = 1e-10);
        }
        // the constant is -log I0(1)
        assert_abs_diff_eq!(o.mean_a_star(), -bessel_i(0, 1.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn coupled_well_oracle_converged_in_y() {
        let grid = PeriodicGrid::new(1, 64).unwrap();
        let spec = PotentialSpec::from_name("coupled_well", &[1.0, 1.0, 0.0], None).unwrap();
        let coarse = free_energy_reference(&spec, grid, 256).unwrap();
        let fine = free_energy_reference(&spec, grid, 512).unwrap();
        let da = coarse.a_star().sub(fine.a_star()).unwrap().max_abs();
        let dg = coarse.grad_a_star().sub(fine.grad_a_star()).unwrap().max_abs();
        assert!(da < 1e-12 && dg < 1e-12, "{da} {dg}");
        // with c = 0 the y-integral is I0(b) for every z: A★ = cos 2z - log I0(1)
        for (i, &a) in coarse.a_star().values().iter().enumerate() {
            let z = grid.node_angle(i);
            assert_abs_diff_eq!(a, (2.0 * z).cos() - bessel_i(0, 1.0).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn default_oracle_doubling_gy_and_gradient_consistency() {
        let spec = PotentialSpec::default_coupled_well();
        let mut errs = Vec::new();
        for g in [32usize, 64] {
            let grid = PeriodicGrid::new(1, g).unwrap();
            let o = free_energy_reference(&spec, grid, 128).unwrap();
            let o2 = free_energy_reference(&spec, grid, 256).unwrap();
            assert!(o.a_star().sub(o2.a_star()).unwrap().max_abs() < 1e-10);
            let a = o.a_star().values();
            let h = grid.spacing();
            let err = (0..g)
                .map(|i| {
                    let fd = (a[(i + 1) % g] - a[(i + g - 1) % g]) / (2.0 * h);
                    (fd - o.grad_a_star().component(0)[i]).abs()
                })
                .fold(0.0, f64::max);
            errs.push(err);
        }
        // centered differences are second order
        let ratio = errs[0] / errs[1];
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn product_extension_oracles() {
        // m = 1: the two copies share z, so A★ doubles the base free energy
        let base = PotentialSpec::default_coupled_well();
        let ext = PotentialSpec::from_name("product_coupled_well", &[2.0, 1.0, 0.5], Some(1)).unwrap();
        let grid = PeriodicGrid::new(1, 32).unwrap();
        let ob = free_energy_reference(&base, grid, 64).unwrap();
        let oe = free_energy_reference(&ext, grid, 64).unwrap();
        for i in 0..32 {
            assert_abs_diff_eq!(
                oe.a_star().values()[i],
                2.0 * ob.a_star().values()[i],
                epsilon = 1e-10
            );
        }
        // m = 2 runs on a 2-D grid with 2-vector mean forces
        let ext2 = PotentialSpec::from_name("product_coupled_well", &[2.0, 1.0, 0.5], Some(2)).unwrap();
        let g2 = PeriodicGrid::new(2, 16).unwrap();
        let o2 = free_energy_reference(&ext2, g2, 64).unwrap();
        assert_eq!(o2.grad_a_star().data().len(), 2 * 256);
        assert!(free_energy_reference(&ext2, grid, 64).is_err());
    }

    #[test]
    fn observable_quadrature() {
        let spec = PotentialSpec::from_name("z_only", &[1.0], None).unwrap();
        let one = mu_star_observable(&spec, |_| 1.0, 64).unwrap();
        assert_abs_diff_eq!(one, 1.0, epsilon = 1e-14);
        let c = mu_star_observable(&spec, |x| x[1].cos(), 128).unwrap();
        let bessel = -bessel_i(1, 1.0) / bessel_i(0, 1.0);
        assert_abs_diff_eq!(c, bessel, epsilon = 1e-12);
        assert_abs_diff_eq!(c, -0.4464, epsilon = 1e-4);
        let s = mu_star_observable(&spec, |x| x[1].sin(), 128).unwrap();
        assert_abs_diff_eq!(s, 0.0, epsilon = 1e-14);
    }

    /// Modified Bessel function of the first kind by its power series.
    fn bessel_i(n: u32, x: f64) -> f64 {
        let mut term = (x / 2.0).powi(n as i32) / (1..=n).map(f64::from).product::<f64>();
        let mut sum = term;
        for k in 1..60 {
            term *= (x / 2.0).powi(2) / (k as f64 * (k + n) as f64);
            sum += term;
        }
        sum
    }
}
