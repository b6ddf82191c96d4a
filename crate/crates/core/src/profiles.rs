//! Soliton profiles and their deformations.
//!
//! * the ground state Q > 0 solving Delta Q - Q + Q^{1+4/d} = 0, computed by
//!   the Petviashvili normalized fixed-point iteration;
//! * the radial correction profile rho solving L_+ rho = -|x|^2 Q in the
//!   reflection-symmetric sector (preconditioned MINRES);
//! * deformed profiles w = lambda^{-d/2} Q_P((x-alpha)/lambda) e^{i theta}
//!   with Q_P(y) = Q(y) e^{i beta.y - i (gamma/4)|y|^2};
//! * the pseudo-conformal blow-up family S_T and the symmetry group of the
//!   equation (scaling, translation, Galilean boost, phase, pseudo-conformal
//!   map).

use crate::error::{Error, Result};
use crate::field::Field;
use crate::functionals;
use crate::grid::Grid;
use crate::spectral::InterpTable;
use num_complex::Complex64;
use std::sync::Arc;

/// Oversampling factor for profile evaluation tables, by dimension.
fn oversample_factor(dim: usize) -> usize {
    if dim == 1 {
        16
    } else {
        4
    }
}

// ---------------------------------------------------------------------------
// Ground state
// ---------------------------------------------------------------------------

/// Ground state of the focusing mass-critical equation on a periodic box,
/// together with evaluation tables for itself and its gradient.
pub struct GroundState {
    field: Field,
    residual: f64,
    iterations: usize,
    residual_history: Vec<f64>,
    /// Pointwise Q^{4/d}, the potential weight of the linearized operators.
    q4d: Vec<f64>,
    table: InterpTable,
    grad_tables: Vec<InterpTable>,
}

impl GroundState {
    /// Petviashvili iteration from a Gaussian seed. `tol` bounds the relative
    /// equation residual |Delta Q - Q + Q^{1+4/d}| / |Q|.
    pub fn solve(grid: Arc<Grid>, tol: f64) -> Result<GroundState> {
        if grid.dx() > 0.1 {
            return Err(Error::InvalidInput(format!(
                "ground-state grid too coarse: dx = {:.4} > 0.1",
                grid.dx()
            )));
        }
        let d = grid.dim() as f64;
        let p = functionals::nonlinear_power(grid.dim()); // 1 + 4/d
        let gamma_exp = p / (p - 1.0); // stabilizing exponent
        let mut v = Field::from_fn(grid.clone(), |x| {
            Complex64::new((-(x[0] * x[0] + x[1] * x[1])).exp(), 0.0)
        });
        let nonlin = |f: &Field| -> Field {
            // f real-valued; |f|^{p-1} f preserves sign.
            f.map(|z| Complex64::new(z.re.abs().powf(p - 1.0) * z.re, 0.0))
        };
        let mut history = Vec::new();
        let max_iters = 1000;
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        for it in 1..=max_iters {
            let vp = nonlin(&v);
            // s = <(1-Delta) v, v> / <v^p, v>
            let quad = v.norm_sq() + v.grad_norm_sq();
            let cubic = vp.inner(&v).re;
            if !(cubic > 0.0) {
                return Err(Error::Convergence {
                    solver: "petviashvili",
                    residual,
                    iters: it,
                    tol,
                });
            }
            let s = quad / cubic;
            let mut next = vp.inv_helmholtz();
            next.scale(Complex64::new(s.powf(gamma_exp), 0.0));
            v = next.symmetrize_reflections();
            // residual of the new iterate
            let r = {
                let mut eq = v.laplacian();
                eq.add_scaled(Complex64::new(-1.0, 0.0), &v);
                eq.add_scaled(Complex64::new(1.0, 0.0), &nonlin(&v));
                eq.norm() / v.norm()
            };
            history.push(r);
            residual = r;
            iterations = it;
            if r < tol {
                break;
            }
        }
        if residual >= tol {
            return Err(Error::Convergence {
                solver: "petviashvili",
                residual,
                iters: iterations,
                tol,
            });
        }
        // Strip any residual imaginary dust and negative undershoot at the
        // roundoff level, then build evaluation tables.
        let field = v.map(|z| Complex64::new(z.re, 0.0));
        let q4d: Vec<f64> = field
            .values()
            .iter()
            .map(|z| z.re.abs().powf(4.0 / d))
            .collect();
        let factor = oversample_factor(grid.dim());
        let table = field.oversampled(factor)?;
        let grad_tables = field
            .gradient()
            .iter()
            .map(|g| g.oversampled(factor))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroundState {
            field,
            residual,
            iterations,
            residual_history: history,
            q4d,
            table,
            grad_tables,
        })
    }

    /// Adopt a ground state loaded from the profile cache: rebuilds the
    /// pointwise potential and the evaluation tables from the stored field.
    /// The residual is the one recorded when the profile was solved; the
    /// per-iteration history is not persisted.
    pub(crate) fn from_stored(
        field: Field,
        residual: f64,
        iterations: usize,
    ) -> Result<GroundState> {
        let d = field.grid().dim() as f64;
        let field = field.map(|z| Complex64::new(z.re, 0.0));
        let q4d: Vec<f64> = field
            .values()
            .iter()
            .map(|z| z.re.abs().powf(4.0 / d))
            .collect();
        let factor = oversample_factor(field.grid().dim());
        let table = field.oversampled(factor)?;
        let grad_tables = field
            .gradient()
            .iter()
            .map(|g| g.oversampled(factor))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroundState {
            field,
            residual,
            iterations,
            residual_history: Vec::new(),
            q4d,
            table,
            grad_tables,
        })
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.field.grid()
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn residual_history(&self) -> &[f64] {
        &self.residual_history
    }

    pub fn mass(&self) -> f64 {
        self.field.norm_sq()
    }

    /// Q at the origin.
    pub fn peak(&self) -> f64 {
        self.field.values()[self.grid().origin_index()].re
    }

    /// Pointwise Q^{4/d} samples.
    pub fn q4d(&self) -> &[f64] {
        &self.q4d
    }

    /// Band-limited evaluation of Q at an arbitrary point.
    pub fn eval(&self, point: [f64; 2]) -> f64 {
        self.table.eval(point).re
    }

    /// Band-limited evaluation of dQ/dx_axis.
    pub fn eval_grad(&self, axis: usize, point: [f64; 2]) -> f64 {
        self.grad_tables[axis].eval(point).re
    }

    /// L_+ f = -Delta f + f - (1 + 4/d) Q^{4/d} f  (f real-valued).
    pub fn lplus(&self, f: &Field) -> Field {
        self.apply_linearized(f, functionals::nonlinear_power(self.grid().dim()))
    }

    /// L_- f = -Delta f + f - Q^{4/d} f  (f real-valued).
    pub fn lminus(&self, f: &Field) -> Field {
        self.apply_linearized(f, 1.0)
    }

    fn apply_linearized(&self, f: &Field, coeff: f64) -> Field {
        let mut out = f.laplacian();
        out.scale(Complex64::new(-1.0, 0.0));
        out.add_scaled(Complex64::new(1.0, 0.0), f);
        let vals = out.values_mut();
        for (j, v) in f.values().iter().enumerate() {
            vals[j] -= coeff * self.q4d[j] * v;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Radial correction profile rho
// ---------------------------------------------------------------------------

/// Solution of L_+ rho = -|x|^2 Q in the reflection-symmetric sector, where
/// L_+ is invertible (its kernel is spanned by the odd translations of Q).
pub struct RhoProfile {
    field: Field,
    residual: f64,
    iterations: usize,
    table: InterpTable,
}

impl RhoProfile {
    /// Preconditioned MINRES with the diagonal spectral preconditioner
    /// (1 - Delta)^{-1}; every operator application is followed by the
    /// reflection-symmetry projection so roundoff cannot reintroduce the
    /// odd kernel directions.
    pub fn solve(gs: &GroundState, tol: f64) -> Result<RhoProfile> {
        let grid = gs.grid().clone();
        let b = Field::from_fn(grid.clone(), |x| {
            Complex64::new(-(x[0] * x[0] + x[1] * x[1]), 0.0)
        })
        .mul_pointwise(gs.field())
        .symmetrize_reflections();
        let apply = |f: &Field| gs.lplus(f).symmetrize_reflections();
        let precond = |f: &Field| f.inv_helmholtz().symmetrize_reflections();
        let (x, iterations) = minres(&b, apply, precond, tol, 4000)?;
        let residual = {
            let mut r = apply(&x);
            r.add_scaled(Complex64::new(-1.0, 0.0), &b);
            r.norm() / b.norm()
        };
        if residual > 1e-8 {
            return Err(Error::Convergence {
                solver: "minres(rho)",
                residual,
                iters: iterations,
                tol: 1e-8,
            });
        }
        let table = x.oversampled(oversample_factor(grid.dim()))?;
        Ok(RhoProfile { field: x, residual, iterations, table })
    }

    /// Adopt a correction profile loaded from the profile cache.
    pub(crate) fn from_stored(
        field: Field,
        residual: f64,
        iterations: usize,
    ) -> Result<RhoProfile> {
        let field = field.map(|z| Complex64::new(z.re, 0.0));
        let table = field.oversampled(oversample_factor(field.grid().dim()))?;
        Ok(RhoProfile { field, residual, iterations, table })
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn eval(&self, point: [f64; 2]) -> f64 {
        self.table.eval(point).re
    }

    /// Least-squares exponential decay rate of |rho| fitted on radii in
    /// [L/4, L/2] along the first axis.
    pub fn decay_rate(&self) -> f64 {
        let grid = self.field.grid();
        let n = grid.n();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let x = grid.coord(i);
            if x >= grid.half_length() / 4.0 && x <= grid.half_length() / 2.0 {
                let flat = if grid.dim() == 1 { i } else { i * n + n / 2 };
                let v = self.field.values()[flat].norm();
                if v > 0.0 {
                    xs.push(x);
                    ys.push(v.ln());
                }
            }
        }
        let slope = lsq_slope(&xs, &ys);
        -slope
    }
}

/// Preconditioned MINRES for symmetric (possibly indefinite) operators.
/// Returns (solution, iterations). Convergence is judged on the
/// preconditioned residual norm estimate `phibar` relative to its start.
fn minres<A, P>(b: &Field, apply: A, precond: P, rtol: f64, max_iters: usize) -> Result<(Field, usize)>
where
    A: Fn(&Field) -> Field,
    P: Fn(&Field) -> Field,
{
    let grid = b.grid().clone();
    let inner = |u: &Field, v: &Field| -> f64 { u.inner(v).re };
    let mut x = Field::zero(grid.clone());
    let mut r1 = b.clone();
    let mut y = precond(&r1);
    let beta1 = inner(&r1, &y);
    if !(beta1 > 0.0) {
        return Ok((x, 0)); // zero right-hand side
    }
    let beta1 = beta1.sqrt();
    let mut oldb = 0.0;
    let mut beta = beta1;
    let mut dbar = 0.0;
    let mut epsln = 0.0;
    let mut phibar = beta1;
    let mut cs: f64 = -1.0;
    let mut sn: f64 = 0.0;
    let mut w = Field::zero(grid.clone());
    let mut w2 = Field::zero(grid.clone());
    let mut r2 = r1.clone();
    for itn in 1..=max_iters {
        let s = 1.0 / beta;
        let mut v = y.clone();
        v.scale(Complex64::new(s, 0.0));
        let mut ynew = apply(&v);
        if itn >= 2 {
            ynew.add_scaled(Complex64::new(-beta / oldb, 0.0), &r1);
        }
        let alfa = inner(&v, &ynew);
        ynew.add_scaled(Complex64::new(-alfa / beta, 0.0), &r2);
        r1 = r2;
        r2 = ynew;
        y = precond(&r2);
        oldb = beta;
        beta = inner(&r2, &y);
        if beta < 0.0 {
            return Err(Error::InvalidInput(
                "minres preconditioner lost positive definiteness".into(),
            ));
        }
        let beta_new = beta.sqrt();
        beta = beta_new;
        // Givens rotation applied to the new tridiagonal column.
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = (gbar * gbar + beta * beta).sqrt().max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        // Direction update.
        let w1 = w2;
        w2 = w;
        let mut wn = v;
        wn.add_scaled(Complex64::new(-oldeps, 0.0), &w1);
        wn.add_scaled(Complex64::new(-delta, 0.0), &w2);
        wn.scale(Complex64::new(1.0 / gamma, 0.0));
        w = wn;
        x.add_scaled(Complex64::new(phi, 0.0), &w);
        if phibar <= rtol * beta1 {
            return Ok((x, itn));
        }
    }
    Err(Error::Convergence {
        solver: "minres",
        residual: phibar / beta1,
        iters: max_iters,
        tol: rtol,
    })
}

fn lsq_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

// ---------------------------------------------------------------------------
// Deformed profiles
// ---------------------------------------------------------------------------

/// Soliton modulation parameters (scale, center, boost, conformal chirp,
/// phase). The second components of `alpha` and `beta` are ignored in 1d.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModParams {
    pub lambda: f64,
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    pub gamma: f64,
    pub theta: f64,
}

impl ModParams {
    pub fn new(lambda: f64, alpha: [f64; 2], beta: [f64; 2], gamma: f64, theta: f64) -> ModParams {
        ModParams { lambda, alpha, beta, gamma, theta }
    }

    /// Parameters of the exact pseudo-conformal blow-up profile S_T at time t.
    pub fn pseudo_conformal(big_t: f64, t: f64) -> ModParams {
        let s = big_t - t;
        ModParams {
            lambda: s,
            alpha: [0.0; 2],
            beta: [0.0; 2],
            gamma: s,
            theta: 1.0 / s,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!(
                "scale parameter must be positive and finite, got {}",
                self.lambda
            )));
        }
        let all = [self.alpha[0], self.alpha[1], self.beta[0], self.beta[1], self.gamma, self.theta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite modulation parameter".into()));
        }
        if dim == 1 && (self.alpha[1] != 0.0 || self.beta[1] != 0.0) {
            return Err(Error::InvalidInput(
                "second components of alpha/beta must vanish in 1d".into(),
            ));
        }
        Ok(())
    }

    /// Pack into the Newton vector (lambda, alpha.., beta.., gamma, theta),
    /// length 2 dim + 3.
    pub fn pack(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![self.lambda];
        v.extend_from_slice(&self.alpha[..dim]);
        v.extend_from_slice(&self.beta[..dim]);
        v.push(self.gamma);
        v.push(self.theta);
        v
    }

    pub fn unpack(dim: usize, v: &[f64]) -> ModParams {
        let mut alpha = [0.0; 2];
        let mut beta = [0.0; 2];
        alpha[..dim].copy_from_slice(&v[1..1 + dim]);
        beta[..dim].copy_from_slice(&v[1 + dim..1 + 2 * dim]);
        ModParams {
            lambda: v[0],
            alpha,
            beta,
            gamma: v[1 + 2 * dim],
            theta: v[2 + 2 * dim],
        }
    }
}

/// A deformed profile together with its spatial gradient and generator of
/// dilations, evaluated analytically in one pass (the pieces every
/// decomposition functional needs).
pub struct DeformedParts {
    /// w = lambda^{-d/2} Q_P((x-alpha)/lambda) e^{i theta}.
    pub w: Field,
    /// Spatial gradient of w, one field per axis.
    pub grad: Vec<Field>,
    /// (d/2) w + (x - alpha) . grad w  (the scaling generator applied to w).
    pub scaling: Field,
}

/// Build w (only); see [`deformed_parts`] for gradients as well.
pub fn deformed_profile(gs: &GroundState, params: &ModParams) -> Result<Field> {
    Ok(deformed_parts_impl(gs, params, false)?.w)
}

/// Build w together with grad w and the scaling generator.
pub fn deformed_parts(gs: &GroundState, params: &ModParams) -> Result<DeformedParts> {
    deformed_parts_impl(gs, params, true)
}

fn deformed_parts_impl(gs: &GroundState, params: &ModParams, with_grad: bool) -> Result<DeformedParts> {
    let grid = gs.grid().clone();
    let dim = grid.dim();
    params.validate(dim)?;
    let d = dim as f64;
    let lam = params.lambda;
    let pref = lam.powf(-d / 2.0);
    let mut wv = vec![Complex64::default(); grid.len()];
    let mut gv: Vec<Vec<Complex64>> = if with_grad {
        (0..dim).map(|_| vec![Complex64::default(); grid.len()]).collect()
    } else {
        Vec::new()
    };
    let mut sv = if with_grad {
        vec![Complex64::default(); grid.len()]
    } else {
        Vec::new()
    };
    for flat in 0..grid.len() {
        let x = grid.point(flat);
        let y = [
            (x[0] - params.alpha[0]) / lam,
            if dim == 2 { (x[1] - params.alpha[1]) / lam } else { 0.0 },
        ];
        let y2 = y[0] * y[0] + y[1] * y[1];
        let by = params.beta[0] * y[0] + params.beta[1] * y[1];
        let phase = Complex64::from_polar(1.0, by - 0.25 * params.gamma * y2 + params.theta);
        let q = gs.eval(y);
        let w = pref * q * phase;
        wv[flat] = w;
        if with_grad {
            let mut scaling = 0.5 * d * w;
            for axis in 0..dim {
                let gq = gs.eval_grad(axis, y);
                // d/dx_axis of Q_P(y): (dQ + i Q (beta - gamma y / 2)) / lambda
                let dq_p = Complex64::new(gq, 0.0)
                    + Complex64::i() * q * (params.beta[axis] - 0.5 * params.gamma * y[axis]);
                let dw = pref / lam * dq_p * phase;
                gv[axis][flat] = dw;
                scaling += lam * y[axis] * dw; // (x - alpha)_axis * dw
            }
            sv[flat] = scaling;
        }
    }
    let w = Field::from_values(grid.clone(), wv)?;
    let grad = gv
        .into_iter()
        .map(|v| Field::from_values(grid.clone(), v))
        .collect::<Result<Vec<_>>>()?;
    let scaling = if with_grad {
        Field::from_values(grid.clone(), sv)?
    } else {
        Field::zero(grid.clone())
    };
    Ok(DeformedParts { w, grad, scaling })
}

/// The deformed correction profile
/// rho_tilde = lambda^{-d/2} rho_P((x-alpha)/lambda) e^{i theta} with
/// rho_P(y) = rho(y) e^{i beta.y - i (gamma/4)|y|^2}.
pub fn deformed_rho(rho: &RhoProfile, params: &ModParams) -> Result<Field> {
    let grid = rho.field().grid().clone();
    let dim = grid.dim();
    params.validate(dim)?;
    let d = dim as f64;
    let lam = params.lambda;
    let pref = lam.powf(-d / 2.0);
    Ok(Field::from_fn(grid, |x| {
        let y = [
            (x[0] - params.alpha[0]) / lam,
            if dim == 2 { (x[1] - params.alpha[1]) / lam } else { 0.0 },
        ];
        let y2 = y[0] * y[0] + y[1] * y[1];
        let by = params.beta[0] * y[0] + params.beta[1] * y[1];
        let phase = Complex64::from_polar(1.0, by - 0.25 * params.gamma * y2 + params.theta);
        pref * rho.eval(y) * phase
    }))
}

/// Fraction of the profile's peak that reaches the box boundary; callers
/// treat values above their decay tolerance as a truncation warning.
pub fn truncation_fraction(f: &Field) -> f64 {
    let peak = f.max_abs();
    if peak == 0.0 {
        0.0
    } else {
        f.boundary_max_abs() / peak
    }
}

// ---------------------------------------------------------------------------
// Pseudo-conformal family and symmetries
// ---------------------------------------------------------------------------

/// S_T(t, x) = (T-t)^{-d/2} Q(x/(T-t)) e^{i/(T-t) - i |x|^2 / (4 (T-t))},
/// the minimal blow-up profile concentrating at time T with speed
/// |grad S_T| ~ (T-t)^{-1}.
pub fn pseudo_conformal_st(gs: &GroundState, big_t: f64, t: f64) -> Result<Field> {
    let s = big_t - t;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidInput(format!(
            "blow-up profile needs t < T, got T - t = {s}"
        )));
    }
    let grid = gs.grid().clone();
    let d = grid.dim() as f64;
    let pref = s.powf(-d / 2.0);
    Ok(Field::from_fn(grid, |x| {
        let r2 = x[0] * x[0] + x[1] * x[1];
        let q = gs.eval([x[0] / s, x[1] / s]);
        pref * q * Complex64::from_polar(1.0, 1.0 / s - r2 / (4.0 * s))
    }))
}

/// Fixed-time symmetry of the equation: scaling by lambda0, translation by
/// x0, Galilean boost beta0, phase theta0:
/// v(x) = lambda0^{-d/2} u((x - x0)/lambda0) e^{i (beta0/2).(x - x0) + i theta0}.
pub fn apply_symmetry(
    u: &Field,
    lambda0: f64,
    x0: [f64; 2],
    beta0: [f64; 2],
    theta0: f64,
) -> Result<Field> {
    if !(lambda0 > 0.0) || !lambda0.is_finite() {
        return Err(Error::InvalidInput(format!(
            "scaling parameter must be positive, got {lambda0}"
        )));
    }
    let grid = u.grid().clone();
    let d = grid.dim() as f64;
    let table = u.oversampled(oversample_factor(grid.dim()))?;
    let pref = lambda0.powf(-d / 2.0);
    Ok(Field::from_fn(grid, |x| {
        let sx = [x[0] - x0[0], x[1] - x0[1]];
        let val = table.eval([sx[0] / lambda0, sx[1] / lambda0]);
        let phase = 0.5 * (beta0[0] * sx[0] + beta0[1] * sx[1]) + theta0;
        pref * val * Complex64::from_polar(1.0, phase)
    }))
}

/// Pseudo-conformal map applied to a fixed-time snapshot, defined for t < 0:
/// v(x) = (-t)^{-d/2} u(x / (-t)) e^{-i |x|^2 / (4 t)}.
pub fn pseudo_conformal_transform(u: &Field, t: f64) -> Result<Field> {
    if !(t < 0.0) || !t.is_finite() {
        return Err(Error::InvalidInput(format!(
            "pseudo-conformal map is applied for t < 0 here, got t = {t}"
        )));
    }
    let grid = u.grid().clone();
    let d = grid.dim() as f64;
    let s = -t;
    let table = u.oversampled(oversample_factor(grid.dim()))?;
    let pref = s.powf(-d / 2.0);
    Ok(Field::from_fn(grid, |x| {
        let r2 = x[0] * x[0] + x[1] * x[1];
        let val = table.eval([x[0] / s, x[1] / s]);
        pref * val * Complex64::from_polar(1.0, -r2 / (4.0 * t))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{energy, mass};

    /// Closed-form 1d soliton: Q(x) = 3^{1/4} sech(2x)^{1/2}.
    fn q_closed_form(x: f64) -> f64 {
        3.0f64.powf(0.25) * (1.0 / (2.0 * x).cosh()).sqrt()
    }

    fn ground_1d() -> GroundState {
        let grid = Grid::new(1, 1024, 20.0).unwrap();
        GroundState::solve(grid, 1e-11).unwrap()
    }

    #[test]
    fn petviashvili_matches_closed_form_1d() {
        let gs = ground_1d();
        let grid = gs.grid().clone();
        let mut sup = 0.0f64;
        for j in 0..grid.n() {
            let err = (gs.field().values()[j].re - q_closed_form(grid.coord(j))).abs();
            sup = sup.max(err);
        }
        assert!(sup < 1e-8, "sup error {sup:.3e}");
        let mass_exact = 3.0f64.sqrt() * std::f64::consts::PI / 2.0;
        assert!((gs.mass() - mass_exact).abs() < 1e-8, "mass {:.12}", gs.mass());
        assert!((gs.peak() - 3.0f64.powf(0.25)).abs() < 1e-9);
        assert!(gs.residual() < 1e-11);
        assert!(energy(gs.field()).abs() < 1e-9, "E(Q) = {:.3e}", energy(gs.field()));
    }

    #[test]
    fn petviashvili_residual_monotone_after_burn_in() {
        let gs = ground_1d();
        let h = gs.residual_history();
        for i in 5..h.len() - 1 {
            if h[i] < 1e-12 {
                break;
            }
            assert!(
                h[i + 1] <= h[i] * 1.000001 + 1e-15,
                "residual rose at iter {i}: {} -> {}",
                h[i],
                h[i + 1]
            );
        }
    }

    #[test]
    fn ground_state_2d_mass_near_townes_value() {
        let grid = Grid::new(2, 256, 10.0).unwrap();
        let gs = GroundState::solve(grid, 1e-10).unwrap();
        // Townes profile mass, coarse-grid agreement only; the acceptance
        // suite pins this against an independent shooting computation.
        assert!((gs.mass() - 11.7009).abs() < 2e-3, "mass {:.6}", gs.mass());
        assert!(gs.residual() < 1e-10);
    }

    #[test]
    fn deformed_profile_identity_params_reproduce_q() {
        let gs = ground_1d();
        let p = ModParams::new(1.0, [0.0; 2], [0.0; 2], 0.0, 0.0);
        let w = deformed_profile(&gs, &p).unwrap();
        let diff = w.sub(gs.field()).max_abs();
        assert!(diff < 1e-12, "diff {diff:.3e}");
    }

    #[test]
    fn deformed_profile_preserves_mass() {
        let gs = ground_1d();
        let m0 = gs.mass();
        for p in [
            ModParams::new(0.7, [0.5, 0.0], [0.3, 0.0], 0.2, 1.1),
            ModParams::new(1.4, [-1.0, 0.0], [-0.2, 0.0], -0.5, 0.0),
        ] {
            let w = deformed_profile(&gs, &p).unwrap();
            assert!((mass(&w) - m0).abs() < 1e-10, "params {p:?}");
        }
    }

    #[test]
    fn deformed_parts_gradient_matches_spectral() {
        let gs = ground_1d();
        let p = ModParams::new(0.8, [0.4, 0.0], [0.6, 0.0], 0.3, 0.7);
        let parts = deformed_parts(&gs, &p).unwrap();
        // The FFT derivative sees the ~1e-9 jump where the rescaled profile is
        // truncated at the edge of its table, so agreement bottoms out near
        // 1e-7; that is still far below any chain-rule mistake in the analytic
        // gradient, which would show up at 1e-2 or worse.
        let spec_grad = &parts.w.gradient()[0];
        let diff = parts.grad[0].sub(spec_grad).norm() / spec_grad.norm();
        assert!(diff < 1e-6, "gradient mismatch {diff:.3e}");
        // scaling generator: d/2 w + (x - alpha) grad w
        let grid = gs.grid().clone();
        let mut expect = parts.w.clone();
        expect.scale(Complex64::new(0.5, 0.0));
        let xw = Field::from_fn(grid, |x| Complex64::new(x[0] - p.alpha[0], 0.0));
        expect.add_scaled(Complex64::new(1.0, 0.0), &xw.mul_pointwise(spec_grad));
        let sdiff = parts.scaling.sub(&expect).norm() / expect.norm();
        assert!(sdiff < 1e-6, "scaling generator mismatch {sdiff:.3e}");
    }

    #[test]
    fn st_equals_deformed_profile_with_conformal_params() {
        let gs = ground_1d();
        let (big_t, t) = (1.0, 0.4);
        let st = pseudo_conformal_st(&gs, big_t, t).unwrap();
        let w = deformed_profile(&gs, &ModParams::pseudo_conformal(big_t, t)).unwrap();
        let diff = st.sub(&w).max_abs();
        assert!(diff < 1e-12, "diff {diff:.3e}");
        assert!((mass(&st) - gs.mass()).abs() < 1e-10);
    }

    #[test]
    fn st_energy_matches_variance_formula() {
        // E(S_T(t)) = |y Q|^2 / 8, independent of t.
        let gs = ground_1d();
        let yq = Field::from_fn(gs.grid().clone(), |x| Complex64::new(x[0], 0.0))
            .mul_pointwise(gs.field());
        let expect = yq.norm_sq() / 8.0;
        for t in [0.0, 0.5] {
            let st = pseudo_conformal_st(&gs, 1.0, t).unwrap();
            let e = energy(&st);
            assert!(
                (e - expect).abs() < 1e-6 * expect,
                "t={t}: E={e:.10} expect {expect:.10}"
            );
        }
    }

    #[test]
    fn symmetry_preserves_mass_and_shifts_peak() {
        let gs = ground_1d();
        let v = apply_symmetry(gs.field(), 0.8, [1.5, 0.0], [0.4, 0.0], 0.3).unwrap();
        assert!((mass(&v) - gs.mass()).abs() < 1e-9);
        // peak moved to x0
        let grid = gs.grid().clone();
        let mut best = (0.0f64, 0usize);
        for (j, z) in v.values().iter().enumerate() {
            if z.norm() > best.0 {
                best = (z.norm(), j);
            }
        }
        assert!((grid.coord(best.1) - 1.5).abs() <= grid.dx() + 1e-12);
    }

    #[test]
    fn pseudo_conformal_of_solitary_snapshot_gives_blowup_amplitude() {
        // Feeding the solitary snapshot u(s) = Q e^{is}, s = 1/(-t), through
        // the map produces the blow-up amplitude with the conjugate chirp:
        // v = conj(S_0(t)) e^{2i s}. Moduli agree pointwise and the mass is
        // that of Q.
        let gs = ground_1d();
        let t = -0.5;
        let s = 1.0 / (-t);
        let snapshot = gs.field().map(|z| z * Complex64::from_polar(1.0, s));
        let v = pseudo_conformal_transform(&snapshot, t).unwrap();
        let st = pseudo_conformal_st(&gs, 0.0, t).unwrap();
        let twist = Complex64::from_polar(1.0, 2.0 * s);
        let expect = st.map(|z| z.conj() * twist);
        let diff = v.sub(&expect).max_abs();
        assert!(diff < 1e-10, "diff {diff:.3e}");
        assert!((mass(&v) - gs.mass()).abs() < 1e-9);
    }

    #[test]
    fn pseudo_conformal_rejects_nonnegative_time() {
        let gs = ground_1d();
        assert!(pseudo_conformal_transform(gs.field(), 0.0).is_err());
        assert!(pseudo_conformal_transform(gs.field(), 0.3).is_err());
    }

    #[test]
    fn rho_solves_even_sector_system() {
        // rho decays like a polynomial times e^{-|x|}; the polynomial factor
        // makes it noticeably fatter than Q near the boundary, so use a wider
        // box to keep the boundary values below the decay assertion.
        let grid = Grid::new(1, 1024, 30.0).unwrap();
        let gs = GroundState::solve(grid, 1e-12).unwrap();
        let rho = RhoProfile::solve(&gs, 1e-10).unwrap();
        assert!(rho.residual() < 1e-8, "residual {:.3e}", rho.residual());
        // even, real, decaying below 1e-8 at the boundary
        let f = rho.field();
        let sym_diff = f.sub(&f.symmetrize_reflections()).max_abs();
        assert!(sym_diff < 1e-10);
        assert!(f.boundary_max_abs() < 1e-8, "boundary {:.3e}", f.boundary_max_abs());
        let rate = rho.decay_rate();
        assert!(rate > 0.5, "decay rate {rate}");
    }
}
