//! Periodic uniform grids on the square box [-L, L)^d, d = 1 or 2.

use crate::error::{Error, Result};
use std::sync::Arc;

/// Uniform periodic grid. `n` points per axis, spacing `dx = 2L/n`, with
/// coordinates x_i = -L + i dx so that x = 0 sits exactly on the grid
/// (index n/2). Wavenumbers follow the standard signed DFT layout
/// k_j = (pi/L) * f_j with f_j = j for j < n/2 and j - n otherwise.
#[derive(Debug, Clone)]
pub struct Grid {
    dim: usize,
    n: usize,
    half_length: f64,
    dx: f64,
    /// Per-axis wavenumbers, length n, signed layout. The Nyquist entry
    /// (index n/2) carries -pi*n/(2L); only its square enters the Laplacian
    /// and first derivatives zero it explicitly.
    k: Vec<f64>,
}

impl Grid {
    /// Build a grid. `dim` must be 1 or 2, `n` a power of two >= 16, `l > 0`.
    pub fn new(dim: usize, n: usize, half_length: f64) -> Result<Arc<Grid>> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidInput(format!("dim must be 1 or 2, got {dim}")));
        }
        if n < 16 || !n.is_power_of_two() {
            return Err(Error::InvalidInput(format!(
                "n must be a power of two >= 16, got {n}"
            )));
        }
        if !(half_length > 0.0) || !half_length.is_finite() {
            return Err(Error::InvalidInput(format!(
                "box half-length must be positive and finite, got {half_length}"
            )));
        }
        let dx = 2.0 * half_length / n as f64;
        let k = (0..n)
            .map(|j| {
                let f = if j < n / 2 { j as f64 } else { j as f64 - n as f64 };
                std::f64::consts::PI / half_length * f
            })
            .collect();
        Ok(Arc::new(Grid { dim, n, half_length, dx, k }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Points per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Box half-length L; the box is [-L, L)^d.
    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Total number of points, n^dim.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight dx^dim of one cell.
    pub fn cell_volume(&self) -> f64 {
        self.dx.powi(self.dim as i32)
    }

    /// Coordinate of index i along one axis.
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        -self.half_length + i as f64 * self.dx
    }

    /// Per-axis wavenumbers in signed DFT layout.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.k
    }

    /// Decompose a flat row-major index into per-axis indices.
    /// Axis 0 is the slow axis: flat = i0 * n + i1 in 2d.
    #[inline]
    pub fn unravel(&self, flat: usize) -> [usize; 2] {
        match self.dim {
            1 => [flat, 0],
            _ => [flat / self.n, flat % self.n],
        }
    }

    /// Coordinates of a flat index (second entry 0.0 in 1d).
    #[inline]
    pub fn point(&self, flat: usize) -> [f64; 2] {
        let ij = self.unravel(flat);
        match self.dim {
            1 => [self.coord(ij[0]), 0.0],
            _ => [self.coord(ij[0]), self.coord(ij[1])],
        }
    }

    /// |x|^2 at a flat index.
    #[inline]
    pub fn radius_sq(&self, flat: usize) -> f64 {
        let p = self.point(flat);
        p[0] * p[0] + p[1] * p[1]
    }

    /// Index of the reflected point x -> -x along one axis (periodic):
    /// i -> (n - i) mod n.
    #[inline]
    pub fn reflect(&self, i: usize) -> usize {
        (self.n - i) % self.n
    }

    /// Flat index of the origin x = 0.
    pub fn origin_index(&self) -> usize {
        let h = self.n / 2;
        match self.dim {
            1 => h,
            _ => h * self.n + h,
        }
    }

    /// True when `other` describes the same discretization.
    pub fn same_as(&self, other: &Grid) -> bool {
        self.dim == other.dim && self.n == other.n && self.half_length == other.half_length
    }

    /// Error unless both grids match.
    pub fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: ({}d, n={}, L={}) vs ({}d, n={}, L={})",
                self.dim, self.n, self.half_length, other.dim, other.n, other.half_length
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(Grid::new(3, 64, 10.0).is_err());
        assert!(Grid::new(1, 48, 10.0).is_err());
        assert!(Grid::new(1, 8, 10.0).is_err());
        assert!(Grid::new(2, 64, -1.0).is_err());
    }

    #[test]
    fn origin_is_on_grid() {
        let g = Grid::new(1, 64, 10.0).unwrap();
        assert_eq!(g.coord(32), 0.0);
        assert_eq!(g.point(g.origin_index())[0], 0.0);
        let g2 = Grid::new(2, 32, 5.0).unwrap();
        let p = g2.point(g2.origin_index());
        assert_eq!(p, [0.0, 0.0]);
    }

    #[test]
    fn wavenumber_layout() {
        let g = Grid::new(1, 16, std::f64::consts::PI).unwrap();
        let k = g.wavenumbers();
        assert_eq!(k[0], 0.0);
        assert_eq!(k[1], 1.0);
        assert_eq!(k[15], -1.0);
        assert_eq!(k[8], -8.0);
    }

    #[test]
    fn reflection_is_an_involution() {
        let g = Grid::new(1, 64, 10.0).unwrap();
        for i in 0..64 {
            assert_eq!(g.reflect(g.reflect(i)), i);
            if i != 0 {
                // coord(reflect(i)) == -coord(i) away from the seam point i=0
                assert!((g.coord(g.reflect(i)) + g.coord(i)).abs() < 1e-12);
            }
        }
    }
}
