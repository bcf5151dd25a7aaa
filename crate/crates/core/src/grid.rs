//! Torus arithmetic and regular periodic grids over `T^m = [0, 2π)^m`.
//!
//! All integrals are taken against the normalized Lebesgue measure, so a grid
//! with `G` nodes per dimension carries the quadrature weight `1 / G^m` on
//! every node (periodic trapezoid rule).

use crate::error::{AbfError, Result};
use crate::TAU;

/// Reduces an angle to `[0, 2π)`.
pub fn wrap(angle: f64) -> Result<f64> {
    if !angle.is_finite() {
        return Err(AbfError::NonFinite("angle"));
    }
    Ok(wrap_unchecked(angle))
}

#[inline]
pub(crate) fn wrap_unchecked(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    // rem_euclid rounds tiny negative inputs up to exactly 2π
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Geodesic distance between two angles on the circle.
#[inline]
pub fn circle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Euclidean norm of the per-coordinate geodesic distances.
pub fn torus_distance(z1: &[f64], z2: &[f64]) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(AbfError::DimensionMismatch {
            expected: z1.len(),
            found: z2.len(),
        });
    }
    Ok(z1
        .iter()
        .zip(z2)
        .map(|(&a, &b)| circle_distance(a, b).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// A point `x = (y, z)` of `T^d`; the trailing `m` coordinates are the
/// reaction coordinate `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusPoint {
    coords: Vec<f64>,
    split: usize,
}

impl TorusPoint {
    pub fn new(coords: Vec<f64>, m: usize) -> Result<Self> {
        if m == 0 || m > coords.len() {
            return Err(AbfError::InvalidParameter(format!(
                "reaction-coordinate dimension m = {m} must lie in [1, {}]",
                coords.len()
            )));
        }
        let split = coords.len() - m;
        let coords = coords.into_iter().map(wrap).collect::<Result<Vec<_>>>()?;
        Ok(TorusPoint { coords, split })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Number of reaction-coordinate components.
    pub fn m(&self) -> usize {
        self.coords.len() - self.split
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn y(&self) -> &[f64] {
        &self.coords[..self.split]
    }

    pub fn z(&self) -> &[f64] {
        &self.coords[self.split..]
    }

    /// Overwrites the coordinates, wrapping every component.
    pub(crate) fn set_wrapped(&mut self, raw: &[f64]) {
        for (c, &r) in self.coords.iter_mut().zip(raw) {
            *c = wrap_unchecked(r);
        }
    }
}

/// Regular grid with `nodes` points per dimension over `T^dims`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PeriodicGrid {
    dims: usize,
    nodes: usize,
}

impl PeriodicGrid {
    pub fn new(dims: usize, nodes: usize) -> Result<Self> {
        if dims == 0 || nodes == 0 {
            return Err(AbfError::EmptyGrid);
        }
        if dims > 3 {
            return Err(AbfError::InvalidParameter(format!(
                "grids over T^{dims} are not supported (m <= 3)"
            )));
        }
        Ok(PeriodicGrid { dims, nodes })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes
    }

    /// Total number of nodes, `G^m`.
    pub fn len(&self) -> usize {
        self.nodes.pow(self.dims as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        TAU / self.nodes as f64
    }

    /// Quadrature weight of a single node.
    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn node_angle(&self, j: usize) -> f64 {
        j as f64 * self.spacing()
    }

    /// Angles of the 1-D node set.
    pub fn angles(&self) -> Vec<f64> {
        (0..self.nodes).map(|j| self.node_angle(j)).collect()
    }

    /// Row-major multi-index of a flat node index (last axis fastest).
    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for slot in out.iter_mut().rev() {
            *slot = flat % self.nodes;
            flat /= self.nodes;
        }
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &j| acc * self.nodes + j)
    }

    pub fn node_coords(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.dims];
        self.multi_index(flat, &mut idx);
        idx.iter().map(|&j| self.node_angle(j)).collect()
    }

    /// Index of the cell (centered on a node) that contains `z`.
    pub fn cell_of(&self, z: &[f64]) -> usize {
        let g = self.nodes;
        z.iter().fold(0, |acc, &a| {
            let j = (wrap_unchecked(a) / self.spacing()).round() as usize % g;
            acc * g + j
        })
    }
}

/// Choice of norm for grid functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Norm {
    Lp(f64),
    Max,
}

fn norm_of(grid: &PeriodicGrid, magnitudes: impl Iterator<Item = f64>, norm: Norm) -> Result<f64> {
    match norm {
        Norm::Max => Ok(magnitudes.fold(0.0, f64::max)),
        Norm::Lp(p) if p >= 1.0 && p.is_finite() => {
            let s: f64 = magnitudes.map(|v| v.powf(p)).sum();
            Ok((s * grid.weight()).powf(1.0 / p))
        }
        Norm::Lp(p) => Err(AbfError::InvalidParameter(format!(
            "L^p norm needs p >= 1, got {p}"
        ))),
    }
}

/// Scalar samples on a [`PeriodicGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: PeriodicGrid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: PeriodicGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(AbfError::DimensionMismatch {
                expected: grid.len(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AbfError::NonFinite("grid function"));
        }
        Ok(GridFunction { grid, values })
    }

    pub(crate) fn from_raw(grid: PeriodicGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        GridFunction { grid, values }
    }

    pub fn zeros(grid: PeriodicGrid) -> Self {
        GridFunction {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: PeriodicGrid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(&grid.node_coords(i))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.weight()
    }

    pub fn lp_norm(&self, norm: Norm) -> Result<f64> {
        norm_of(&self.grid, self.values.iter().map(|v| v.abs()), norm)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        if self.grid != other.grid {
            return Err(AbfError::Mismatched);
        }
        Ok(GridFunction::from_raw(
            self.grid,
            self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Copy with the grid mean removed.
    pub fn centered(&self) -> GridFunction {
        let mean = self.mean();
        GridFunction::from_raw(self.grid, self.values.iter().map(|v| v - mean).collect())
    }
}

/// `m`-vector samples on a [`PeriodicGrid`], stored component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: PeriodicGrid,
    data: Vec<f64>,
}

impl VectorField {
    /// `data` holds component 0 for every node, then component 1, ...
    pub fn new(grid: PeriodicGrid, data: Vec<f64>) -> Result<Self> {
        let expected = grid.len() * grid.dims();
        if data.len() != expected {
            return Err(AbfError::DimensionMismatch {
                expected,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AbfError::NonFinite("vector field"));
        }
        Ok(VectorField { grid, data })
    }

    pub(crate) fn from_raw(grid: PeriodicGrid, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len() * grid.dims());
        VectorField { grid, data }
    }

    pub fn zeros(grid: PeriodicGrid) -> Self {
        VectorField {
            grid,
            data: vec![0.0; grid.len() * grid.dims()],
        }
    }

    /// Samples a vector-valued `f` at every node.
    pub fn from_fn(grid: PeriodicGrid, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let n = grid.len();
        let mut data = vec![0.0; n * grid.dims()];
        for i in 0..n {
            let v = f(&grid.node_coords(i));
            if v.len() != grid.dims() {
                return Err(AbfError::DimensionMismatch {
                    expected: grid.dims(),
                    found: v.len(),
                });
            }
            for (c, vc) in v.into_iter().enumerate() {
                data[c * n + i] = vc;
            }
        }
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Value at one node as an `m`-vector.
    pub fn at(&self, node: usize) -> Vec<f64> {
        (0..self.grid.dims()).map(|c| self.component(c)[node]).collect()
    }

    /// Euclidean length at one node.
    pub fn magnitude(&self, node: usize) -> f64 {
        let n = self.grid.len();
        (0..self.grid.dims())
            .map(|c| self.data[c * n + node].powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn lp_norm(&self, norm: Norm) -> Result<f64> {
        norm_of(
            &self.grid,
            (0..self.grid.len()).map(|i| self.magnitude(i)),
            norm,
        )
    }

    /// Largest Euclidean magnitude `|f|` over the nodes.
    pub fn max_abs(&self) -> f64 {
        (0..self.grid.len()).fold(0.0, |m, i| m.max(self.magnitude(i)))
    }

    pub fn sub(&self, other: &VectorField) -> Result<VectorField> {
        if self.grid != other.grid {
            return Err(AbfError::Mismatched);
        }
        Ok(VectorField::from_raw(
            self.grid,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap(0.0).unwrap(), 0.0);
        assert_eq!(wrap(TAU).unwrap(), 0.0);
        assert_abs_diff_eq!(wrap(-PI / 2.0).unwrap(), 1.5 * PI, epsilon = 1e-15);
        assert!(wrap(f64::NAN).is_err());
        assert!(wrap(f64::INFINITY).is_err());
        let tiny = wrap(-1e-18).unwrap();
        assert!((0.0..TAU).contains(&tiny));
    }

    #[test]
    fn torus_distance_examples() {
        assert_eq!(torus_distance(&[0.0], &[0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(torus_distance(&[0.0], &[PI]).unwrap(), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(
            torus_distance(&[0.1], &[TAU - 0.1]).unwrap(),
            0.2,
            epsilon = 1e-14
        );
        assert!(matches!(
            torus_distance(&[0.0, 1.0], &[0.0]),
            Err(AbfError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn lp_norm_examples() {
        let g = PeriodicGrid::new(1, 64).unwrap();
        let one = GridFunction::from_fn(g, |_| 1.0).unwrap();
        assert_abs_diff_eq!(one.lp_norm(Norm::Lp(2.0)).unwrap(), 1.0, epsilon = 1e-14);
        let s = GridFunction::from_fn(g, |z| z[0].sin()).unwrap();
        assert_abs_diff_eq!(
            s.lp_norm(Norm::Lp(2.0)).unwrap(),
            0.5f64.sqrt(),
            epsilon = 1e-14
        );
        // the grid contains z = π/2 when 4 | G
        assert!((s.lp_norm(Norm::Max).unwrap() - 1.0).abs() <= 1.0 / 64.0);
        assert!(s.lp_norm(Norm::Lp(0.5)).is_err());
    }

    #[test]
    fn lp_norm_spectrally_exact_on_trig_polynomials() {
        let g = PeriodicGrid::new(1, 32).unwrap();
        // ‖2 + 3cos 4z − sin 7z‖² = 4 + 9/2 + 1/2
        let f = GridFunction::from_fn(g, |z| 2.0 + 3.0 * (4.0 * z[0]).cos() - (7.0 * z[0]).sin())
            .unwrap();
        assert_abs_diff_eq!(
            f.lp_norm(Norm::Lp(2.0)).unwrap(),
            9.0f64.sqrt(),
            epsilon = 1e-10
        );
        let g2 = PeriodicGrid::new(2, 16).unwrap();
        let f2 = GridFunction::from_fn(g2, |z| (z[0] + 2.0 * z[1]).cos()).unwrap();
        assert_abs_diff_eq!(
            f2.lp_norm(Norm::Lp(2.0)).unwrap(),
            0.5f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn vector_field_layout_is_component_major() {
        let g = PeriodicGrid::new(2, 4).unwrap();
        let v = VectorField::from_fn(g, |z| vec![z[0], 10.0 + z[1]]).unwrap();
        assert_eq!(v.component(0)[g.flat_index(&[1, 0])], g.node_angle(1));
        assert_eq!(v.component(1)[g.flat_index(&[0, 3])], 10.0 + g.node_angle(3));
        assert!(VectorField::new(g, vec![0.0; 16]).is_err());
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(PeriodicGrid::new(0, 8).is_err());
        assert!(PeriodicGrid::new(1, 0).is_err());
        let g = PeriodicGrid::new(1, 4).unwrap();
        assert!(GridFunction::new(g, vec![0.0; 3]).is_err());
        assert!(GridFunction::new(g, vec![0.0, 1.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn cell_lookup_rounds_to_nearest_node() {
        let g = PeriodicGrid::new(1, 8).unwrap();
        assert_eq!(g.cell_of(&[0.0]), 0);
        assert_eq!(g.cell_of(&[TAU - 0.01]), 0);
        assert_eq!(g.cell_of(&[g.spacing() * 3.4]), 3);
    }

    #[test]
    fn torus_point_split() {
        let p = TorusPoint::new(vec![-0.5, 7.0, 1.0], 2).unwrap();
        assert_eq!(p.y().len(), 1);
        assert_eq!(p.z().len(), 2);
        assert!(p.coords().iter().all(|c| (0.0..TAU).contains(c)));
        assert!(TorusPoint::new(vec![0.0], 2).is_err());
        assert!(TorusPoint::new(vec![0.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent(a in -1e6f64..1e6) {
            let w = wrap(a).unwrap();
            prop_assert!((0.0..TAU).contains(&w));
            prop_assert_eq!(wrap(w).unwrap(), w);
        }

        #[test]
        fn torus_distance_is_a_metric(
            a in prop::collection::vec(-10.0f64..10.0, 2),
            b in prop::collection::vec(-10.0f64..10.0, 2),
            c in prop::collection::vec(-10.0f64..10.0, 2),
        ) {
            let ab = torus_distance(&a, &b).unwrap();
            let ba = torus_distance(&b, &a).unwrap();
            let bc = torus_distance(&b, &c).unwrap();
            let ac = torus_distance(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
