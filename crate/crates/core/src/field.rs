//! Complex scalar fields on a grid, with inner products, norms, and the
//! spectral calculus used throughout the lab.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::spectral::{self, InterpTable};
use num_complex::Complex64;
use std::sync::Arc;

/// A complex field sampled on a [`Grid`], row-major (axis 0 slow in 2d).
#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<Grid>,
    values: Vec<Complex64>,
}

impl Field {
    pub fn zero(grid: Arc<Grid>) -> Field {
        let len = grid.len();
        Field { grid, values: vec![Complex64::default(); len] }
    }

    /// Sample a closure at every grid point. The closure receives [x, y]
    /// (y = 0 in 1d).
    pub fn from_fn<F>(grid: Arc<Grid>, f: F) -> Field
    where
        F: Fn([f64; 2]) -> Complex64,
    {
        let values = (0..grid.len()).map(|j| f(grid.point(j))).collect();
        Field { grid, values }
    }

    pub fn from_values(grid: Arc<Grid>, values: Vec<Complex64>) -> Result<Field> {
        if values.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "value count {} does not match grid size {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(Field { grid, values })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// L2 pairing <v, w> = dx^d sum v conj(w): linear in self, conjugate
    /// linear in `other`.
    pub fn inner(&self, other: &Field) -> Complex64 {
        debug_assert!(self.grid.same_as(&other.grid));
        let mut acc = Complex64::default();
        for (a, b) in self.values.iter().zip(other.values.iter()) {
            acc += a * b.conj();
        }
        acc * self.grid.cell_volume()
    }

    /// Squared L2 norm (the conserved mass of a wave function).
    pub fn norm_sq(&self) -> f64 {
        let s: f64 = self.values.iter().map(|v| v.norm_sqr()).sum();
        s * self.grid.cell_volume()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Max pointwise modulus.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest modulus on the boundary ring (outermost cell layer); used to
    /// detect profiles leaking out of the box.
    pub fn boundary_max_abs(&self) -> f64 {
        let n = self.grid.n();
        let mut m: f64 = 0.0;
        match self.grid.dim() {
            1 => {
                m = m.max(self.values[0].norm());
                m = m.max(self.values[n - 1].norm());
            }
            _ => {
                for i in 0..n {
                    m = m.max(self.values[i].norm()); // row 0
                    m = m.max(self.values[(n - 1) * n + i].norm()); // last row
                    m = m.max(self.values[i * n].norm()); // column 0
                    m = m.max(self.values[i * n + n - 1].norm()); // last column
                }
            }
        }
        m
    }

    pub fn scale(&mut self, s: Complex64) {
        for v in self.values.iter_mut() {
            *v *= s;
        }
    }

    /// self <- self + s * other.
    pub fn add_scaled(&mut self, s: Complex64, other: &Field) {
        debug_assert!(self.grid.same_as(&other.grid));
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += s * b;
        }
    }

    pub fn add(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.add_scaled(Complex64::new(1.0, 0.0), other);
        out
    }

    pub fn sub(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.add_scaled(Complex64::new(-1.0, 0.0), other);
        out
    }

    /// Pointwise product self * other.
    pub fn mul_pointwise(&self, other: &Field) -> Field {
        debug_assert!(self.grid.same_as(&other.grid));
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .collect();
        Field { grid: self.grid.clone(), values }
    }

    pub fn map<F>(&self, f: F) -> Field
    where
        F: Fn(Complex64) -> Complex64,
    {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Real part as a new field.
    pub fn real_part(&self) -> Field {
        self.map(|v| Complex64::new(v.re, 0.0))
    }

    /// Imaginary part as a new (real-valued) field.
    pub fn imag_part(&self) -> Field {
        self.map(|v| Complex64::new(v.im, 0.0))
    }

    /// Spectral Laplacian.
    pub fn laplacian(&self) -> Field {
        let mut values = self.values.clone();
        spectral::apply_multiplier(&self.grid, &mut values, |k| {
            Complex64::new(-(k[0] * k[0] + k[1] * k[1]), 0.0)
        });
        Field { grid: self.grid.clone(), values }
    }

    /// Spectral gradient, one field per axis. Nyquist modes are zeroed.
    pub fn gradient(&self) -> Vec<Field> {
        (0..self.grid.dim())
            .map(|axis| {
                let mut values = self.values.clone();
                let mult = spectral::derivative_multiplier(&self.grid, axis);
                spectral::apply_multiplier(&self.grid, &mut values, mult);
                Field { grid: self.grid.clone(), values }
            })
            .collect()
    }

    /// Squared H1 seminorm: |grad u|_{L2}^2 via Parseval (no Nyquist zeroing;
    /// uses |k|^2 directly, matching the Laplacian's quadratic symbol).
    pub fn grad_norm_sq(&self) -> f64 {
        let mut hat = self.values.clone();
        spectral::forward(&self.grid, &mut hat);
        let n = self.grid.n();
        let k = self.grid.wavenumbers();
        let mut acc = 0.0;
        match self.grid.dim() {
            1 => {
                for (j, v) in hat.iter().enumerate() {
                    acc += k[j] * k[j] * v.norm_sqr();
                }
            }
            _ => {
                for i0 in 0..n {
                    for i1 in 0..n {
                        let k2 = k[i0] * k[i0] + k[i1] * k[i1];
                        acc += k2 * hat[i0 * n + i1].norm_sqr();
                    }
                }
            }
        }
        // Parseval: dx^d/n^d * sum |u_hat|^2 = |u|_{L2}^2.
        acc * self.grid.cell_volume() / self.grid.len() as f64
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad_norm_sq().sqrt()
    }

    /// (1 - Delta)^{-1} applied spectrally.
    pub fn inv_helmholtz(&self) -> Field {
        let mut values = self.values.clone();
        spectral::apply_multiplier(&self.grid, &mut values, |k| {
            Complex64::new(1.0 / (1.0 + k[0] * k[0] + k[1] * k[1]), 0.0)
        });
        Field { grid: self.grid.clone(), values }
    }

    /// Average over the reflection group x -> -x applied per axis (projects
    /// onto the even/symmetric sector used by the profile solvers).
    pub fn symmetrize_reflections(&self) -> Field {
        let n = self.grid.n();
        let g = &self.grid;
        let values = match g.dim() {
            1 => (0..n)
                .map(|i| 0.5 * (self.values[i] + self.values[g.reflect(i)]))
                .collect(),
            _ => (0..g.len())
                .map(|flat| {
                    let [i, j] = g.unravel(flat);
                    let (ri, rj) = (g.reflect(i), g.reflect(j));
                    0.25 * (self.values[i * n + j]
                        + self.values[ri * n + j]
                        + self.values[i * n + rj]
                        + self.values[ri * n + rj])
                })
                .collect(),
        };
        Field { grid: self.grid.clone(), values }
    }

    /// Band-limited evaluation table for off-grid interpolation.
    pub fn oversampled(&self, factor: usize) -> Result<InterpTable> {
        InterpTable::build(&self.grid, &self.values, factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_field(n: usize, l: f64) -> Field {
        let g = Grid::new(1, n, l).unwrap();
        Field::from_fn(g, |p| Complex64::new((-p[0] * p[0]).exp(), 0.0))
    }

    #[test]
    fn parseval_grad_norm_matches_gradient_field() {
        let f = gaussian_field(256, 10.0);
        let grad = &f.gradient()[0];
        let direct = grad.norm_sq();
        let parseval = f.grad_norm_sq();
        assert!((direct - parseval).abs() < 1e-10 * parseval.max(1.0));
    }

    #[test]
    fn gaussian_norm_matches_closed_form() {
        // int exp(-2x^2) = sqrt(pi/2)
        let f = gaussian_field(512, 12.0);
        let expect = (std::f64::consts::PI / 2.0).sqrt();
        assert!((f.norm_sq() - expect).abs() < 1e-12);
    }

    #[test]
    fn laplacian_of_gaussian() {
        // (e^{-x^2})'' = (4x^2 - 2) e^{-x^2}
        let g = Grid::new(1, 512, 12.0).unwrap();
        let f = Field::from_fn(g.clone(), |p| Complex64::new((-p[0] * p[0]).exp(), 0.0));
        let lap = f.laplacian();
        for j in 200..312 {
            let x = g.coord(j);
            let expect = (4.0 * x * x - 2.0) * (-x * x).exp();
            assert!((lap.values()[j].re - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn inner_is_conjugate_linear_in_second_slot() {
        let g = Grid::new(1, 64, 5.0).unwrap();
        let v = Field::from_fn(g.clone(), |p| Complex64::new(p[0].cos(), p[0].sin()));
        let w = Field::from_fn(g.clone(), |p| Complex64::new(0.3, p[0] * 0.1));
        let s = Complex64::new(0.7, -1.3);
        let mut ws = w.clone();
        ws.scale(s);
        let lhs = v.inner(&ws);
        let rhs = s.conj() * v.inner(&w);
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn symmetrize_is_projection() {
        let g = Grid::new(2, 32, 4.0).unwrap();
        let f = Field::from_fn(g, |p| Complex64::new(p[0] + 0.2 * p[1] * p[1], p[0] * p[1]));
        let s1 = f.symmetrize_reflections();
        let s2 = s1.symmetrize_reflections();
        for (a, b) in s1.values().iter().zip(s2.values().iter()) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn inv_helmholtz_inverts_one_minus_laplacian() {
        let f = gaussian_field(256, 10.0);
        let lhs = f.sub(&f.laplacian()); // (1 - Delta) f
        let back = lhs.inv_helmholtz();
        let err = back.sub(&f).norm();
        assert!(err < 1e-12);
    }
}
