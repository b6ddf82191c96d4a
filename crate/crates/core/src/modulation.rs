//! Modulation analysis around the deformed ground-state profile.
//!
//! This module provides the machinery that tracks how close a field is to the
//! five-parameter family of deformed solitons and how fast the parameters must
//! move to keep it there:
//!
//! * [`LinearizedOps`] — the two self-adjoint operators `L_+ = -Δ + 1 - (1+4/d) Q^{4/d}`
//!   and `L_- = -Δ + 1 - Q^{4/d}` obtained by linearizing the equation around the
//!   ground state, their algebraic kernel relations, and the quadratic coercivity
//!   form that is positive definite on the constraint set.
//! * [`decompose`] — a Newton solver for the orthogonality system that splits a
//!   field into a deformed profile plus a remainder satisfying the constraint set.
//! * [`mod_vector`] — finite-difference modulation equations: how far a parameter
//!   trajectory is from the exact self-similar flow.
//! * [`profile_residual_eta`] — the residual left when the deformed profile with
//!   prescribed parameter rates is inserted into the transformed equation
//!   (including the gradient and potential terms induced by the noise).
//! * [`generalized_energy`] — a localized Lyapunov functional of the remainder
//!   built from a Morawetz-type convex weight.

use std::f64::consts::TAU;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::functionals::nonlinear_power;
use crate::noise::{BrownianLift, NoiseBasis};
use crate::profiles::{
    deformed_parts, deformed_profile, deformed_rho, GroundState, ModParams, RhoProfile,
};

// ---------------------------------------------------------------------------
// Cutoff profiles
// ---------------------------------------------------------------------------

/// Radial weight used to localize the gradient term of the coercivity form.
///
/// `Φ(r) = 1` for `r <= 1` and `Φ(r) = e^{-r}` for `r >= 2`, joined on `(1, 2)`
/// by `Φ = e^{-q(r-1)}` with the quintic exponent `q(s) = 16 s^3 - 23 s^4 + 9 s^5`.
/// The exponent satisfies `q(0) = q'(0) = q''(0) = 0` and `q(1) = 2`, `q'(1) = 1`,
/// `q''(1) = 0`, which makes `Φ` twice continuously differentiable.  Since the
/// quadratic factor of `q'(s) = s^2 (45 s^2 - 92 s + 48)` has negative
/// discriminant, `q' >= 0`: `Φ` is monotone nonincreasing with `0 < Φ <= 1` and
/// the logarithmic derivative is bounded, `|Φ'/Φ| <= max q' ≈ 3.3375`.
pub fn coercivity_cutoff(r: f64) -> f64 {
    if r <= 1.0 {
        1.0
    } else if r >= 2.0 {
        (-r).exp()
    } else {
        let s = r - 1.0;
        let q = ((9.0 * s - 23.0) * s + 16.0) * s * s * s;
        (-q).exp()
    }
}

/// Radial derivative `ψ'` of the convex Morawetz weight.
///
/// `ψ'(r) = r` for `r <= 1` and `ψ'(r) = 2 - e^{-r}` for `r >= 2`.  Writing
/// `ψ'(r) = r u(r)`, the bridge on `(1, 2)` is the power law
/// `u(r) = 1 + (u₂ - 1)(r - 1)^a` with `u₂ = (2 - e^{-2})/2` and
/// `a = u'(2)/(u₂ - 1)` chosen so both value and slope of `u` match at `r = 2`
/// (`u'(2) = (3 e^{-2} - 2)/4`, giving `a ≈ 5.889`).  Because `u₂ < 1` and
/// `a > 2`, `u` is nonincreasing and twice differentiable at `r = 1`; hence
/// `ψ'` is nondecreasing (`ψ'' >= 0`) and the radial-convexity inequality
/// `ψ'(r)/r - ψ''(r) = -r u'(r) >= 0` holds exactly everywhere.
pub fn morawetz_slope(r: f64) -> f64 {
    if r <= 1.0 {
        r
    } else if r >= 2.0 {
        2.0 - (-r).exp()
    } else {
        let e2 = (-2.0f64).exp();
        let u2 = (2.0 - e2) / 2.0;
        let a = ((3.0 * e2 - 2.0) / 4.0) / (u2 - 1.0);
        r * (1.0 + (u2 - 1.0) * (r - 1.0).powf(a))
    }
}

/// `ψ'(ρ)/ρ` with its limit 1 at `ρ = 0`; equals 1 exactly for `ρ <= 1`.
fn morawetz_slope_ratio(rho: f64) -> f64 {
    if rho <= 1.0 {
        1.0
    } else {
        morawetz_slope(rho) / rho
    }
}

// ---------------------------------------------------------------------------
// Linearized operators and coercivity
// ---------------------------------------------------------------------------

/// Squared Sobolev norm `|f|_{H^1}^2 = |f|_{L^2}^2 + |∇f|_{L^2}^2`.
pub fn h1_norm_sq(f: &Field) -> f64 {
    f.norm_sq() + f.grad_norm_sq()
}

/// Which of the two linearized branches to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LBranch {
    /// `L_+ = -Δ + 1 - (1 + 4/d) Q^{4/d}` (acts on the real part of a perturbation).
    Plus,
    /// `L_- = -Δ + 1 - Q^{4/d}` (acts on the imaginary part).
    Minus,
}

/// The pair of operators obtained by linearizing around the ground state,
/// together with the coercivity form and the constraint-set projector.
pub struct LinearizedOps<'a> {
    gs: &'a GroundState,
}

impl<'a> LinearizedOps<'a> {
    pub fn new(gs: &'a GroundState) -> Self {
        LinearizedOps { gs }
    }

    pub fn ground_state(&self) -> &GroundState {
        self.gs
    }

    /// Apply `L_+` or `L_-` to a field.
    pub fn apply(&self, branch: LBranch, f: &Field) -> Field {
        match branch {
            LBranch::Plus => self.gs.lplus(f),
            LBranch::Minus => self.gs.lminus(f),
        }
    }

    /// The scaling generator `Λ f = (d/2) f + x · ∇f` (spectral gradient).
    pub fn scaling_generator(&self, f: &Field) -> Field {
        let grid = f.grid().clone();
        let dim = grid.dim();
        let half_d = dim as f64 / 2.0;
        let grads = f.gradient();
        let mut values: Vec<Complex64> = f.values().iter().map(|v| half_d * v).collect();
        for (axis, g) in grads.iter().enumerate() {
            let gv = g.values();
            for (flat, value) in values.iter_mut().enumerate() {
                *value += grid.point(flat)[axis] * gv[flat];
            }
        }
        Field::from_values(grid, values).expect("value count matches grid")
    }

    /// Quadratic coercivity form of a complex perturbation `f = f₁ + i f₂`:
    ///
    /// * `localized = None`: `(L f, f) = <L_+ f₁, f₁> + <L_- f₂, f₂>`.
    /// * `localized = Some(A)`: same expression written pointwise with the
    ///   gradient term damped by the cutoff,
    ///   `∫ Φ(|x|/A) |∇f|² + |f|² - (1 + 4/d) Q^{4/d} f₁² - Q^{4/d} f₂² dx`.
    ///
    /// For `A` large enough that `Φ(|x|/A) = 1` on the whole box the two
    /// expressions agree (integration by parts is exact for the spectral
    /// Laplacian).
    pub fn coercivity_form(&self, f: &Field, localized: Option<f64>) -> f64 {
        let grid = f.grid();
        let c_plus = nonlinear_power(grid.dim());
        match localized {
            None => {
                let f1 = f.real_part();
                let f2 = f.imag_part();
                let lp = self.gs.lplus(&f1);
                let lm = self.gs.lminus(&f2);
                lp.inner(&f1).re + lm.inner(&f2).re
            }
            Some(a) => {
                assert!(a > 0.0 && a.is_finite(), "cutoff scale must be positive");
                let grads = f.gradient();
                let q4d = self.gs.q4d();
                let dv = grid.cell_volume();
                let mut acc = 0.0;
                for (flat, v) in f.values().iter().enumerate() {
                    let r = grid.radius_sq(flat).sqrt();
                    let phi = coercivity_cutoff(r / a);
                    let grad_sq: f64 = grads.iter().map(|g| g.values()[flat].norm_sqr()).sum();
                    let f1 = v.re;
                    let f2 = v.im;
                    acc += phi * grad_sq + v.norm_sqr()
                        - q4d[flat] * (c_plus * f1 * f1 + f2 * f2);
                }
                acc * dv
            }
        }
    }

    /// `(L f, f) / |f|_{H^1}^2`; the infimum of this ratio over the constraint
    /// set is the coercivity constant of the linearized energy.
    pub fn coercivity_ratio(&self, f: &Field) -> f64 {
        self.coercivity_form(f, None) / h1_norm_sq(f)
    }

    /// The two families of constraint directions defining the admissible set:
    /// the real part of a perturbation must be `L²`-orthogonal to
    /// `{Q, x_a Q, |x|² Q}` and the imaginary part to `{∂_a Q, ΛQ, ρ}`,
    /// where `ρ` solves `L_+ ρ = -|x|² Q`.
    pub fn constraint_directions(&self, rho: &RhoProfile) -> (Vec<Field>, Vec<Field>) {
        let q = self.gs.field();
        let grid = q.grid().clone();
        let dim = grid.dim();
        let mut real_dirs = Vec::with_capacity(dim + 2);
        real_dirs.push(q.clone());
        for axis in 0..dim {
            let mut values = q.values().to_vec();
            for (flat, v) in values.iter_mut().enumerate() {
                *v *= grid.point(flat)[axis];
            }
            real_dirs.push(Field::from_values(grid.clone(), values).expect("sized"));
        }
        let mut values = q.values().to_vec();
        for (flat, v) in values.iter_mut().enumerate() {
            *v *= grid.radius_sq(flat);
        }
        real_dirs.push(Field::from_values(grid.clone(), values).expect("sized"));

        let mut imag_dirs = Vec::with_capacity(dim + 2);
        imag_dirs.extend(q.gradient());
        imag_dirs.push(self.scaling_generator(q));
        imag_dirs.push(rho.field().clone());
        (real_dirs, imag_dirs)
    }

    /// `L²`-orthogonal projection of `f` onto the constraint set: the real part
    /// is projected off the span of the first family, the imaginary part off
    /// the second (exact Gram solve per sector).
    pub fn project_to_constraint_set(&self, rho: &RhoProfile, f: &Field) -> Result<Field> {
        f.grid().check_same(self.gs.grid(), "projection input vs ground state")?;
        let (real_dirs, imag_dirs) = self.constraint_directions(rho);
        let p1 = project_off(&f.real_part(), &real_dirs)?;
        let p2 = project_off(&f.imag_part(), &imag_dirs)?;
        let values = p1
            .values()
            .iter()
            .zip(p2.values())
            .map(|(a, b)| Complex64::new(a.re, b.re))
            .collect();
        Field::from_values(f.grid().clone(), values)
    }
}

/// Subtract from `f` its `L²`-projection onto `span(dirs)` (real fields).
fn project_off(f: &Field, dirs: &[Field]) -> Result<Field> {
    let n = dirs.len();
    let mut gram = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        for j in i..n {
            let g = dirs[i].inner(&dirs[j]).re;
            gram[i][j] = g;
            gram[j][i] = g;
        }
        rhs[i] = f.inner(&dirs[i]).re;
    }
    let coeff = solve_dense(gram, rhs).ok_or_else(|| {
        Error::InvalidInput("constraint directions are linearly dependent".into())
    })?;
    let mut out = f.clone();
    for (c, dir) in coeff.iter().zip(dirs) {
        out.add_scaled(Complex64::new(-c, 0.0), dir);
    }
    Ok(out)
}

/// Gaussian elimination with partial pivoting; `None` if the matrix is
/// singular to working precision.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() <= 1e-13 * scale {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

// ---------------------------------------------------------------------------
// Decomposition: Newton solve of the orthogonality system
// ---------------------------------------------------------------------------

/// Result of [`decompose`]: `u = w(params) + remainder` with the rescaled
/// remainder `ε(y) = λ^{d/2} e^{-iθ} remainder(λ y + α)` satisfying the
/// orthogonality constraints.
#[derive(Debug, Clone)]
pub struct DecompositionResult {
    /// Modulation parameters at the solution of the orthogonality system.
    pub params: ModParams,
    /// Remainder in profile variables, `ε(y) = λ^{d/2} e^{-iθ} R(λ y + α)`
    /// (band-limited resampling; zero where `λ y + α` leaves the box).
    pub epsilon: Field,
    /// Remainder `R = u - w` in the original variables.
    pub remainder: Field,
    /// The orthogonality functionals at the accepted parameters, ordered as
    /// (center moments per axis, variance moment, scaling pairing,
    /// gradient pairings per axis, correction-profile pairing).
    pub ortho_residuals: Vec<f64>,
    /// Number of Newton updates performed.
    pub newton_iters: usize,
}

/// The `2d + 3` orthogonality functionals of `R = u - w(P)`:
/// `Re ∫ (x_a - α_a) w R̄`, `Re ∫ |x - α|² w R̄`, `Im ∫ ((d/2) w + (x-α)·∇w) R̄`,
/// `Im ∫ ∂_a w R̄`, and `Im ∫ ρ̃ R̄` with the phase-deformed correction profile `ρ̃`.
fn ortho_vector(u: &Field, gs: &GroundState, rho: &RhoProfile, p: &ModParams) -> Result<Vec<f64>> {
    let parts = deformed_parts(gs, p)?;
    let rho_t = deformed_rho(rho, p)?;
    let grid = u.grid();
    let dim = grid.dim();
    let dv = grid.cell_volume();
    let uv = u.values();
    let wv = parts.w.values();
    let sv = parts.scaling.values();
    let rv = rho_t.values();
    let mut f = vec![0.0; 2 * dim + 3];
    for flat in 0..grid.len() {
        let r_conj = (uv[flat] - wv[flat]).conj();
        let x = grid.point(flat);
        let w = wv[flat];
        let mut shifted_sq = 0.0;
        for (axis, dir) in f.iter_mut().take(dim).enumerate() {
            let z = x[axis] - p.alpha[axis];
            shifted_sq += z * z;
            *dir += (z * w * r_conj).re;
        }
        f[dim] += (shifted_sq * w * r_conj).re;
        f[dim + 1] += (sv[flat] * r_conj).im;
        for axis in 0..dim {
            f[dim + 2 + axis] += (parts.grad[axis].values()[flat] * r_conj).im;
        }
        f[2 * dim + 2] += (rv[flat] * r_conj).im;
    }
    for v in f.iter_mut() {
        *v *= dv;
    }
    Ok(f)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn fmt_trace(trace: &[f64]) -> String {
    trace
        .iter()
        .map(|v| format!("{v:.3e}"))
        .collect::<Vec<_>>()
        .join(" -> ")
}

/// Rescale the remainder into profile variables (see [`DecompositionResult`]).
fn rescale_remainder(remainder: &Field, p: &ModParams) -> Result<Field> {
    let grid = remainder.grid().clone();
    let dim = grid.dim();
    let factor = if dim == 1 { 16 } else { 4 };
    let table = remainder.oversampled(factor)?;
    let pref = p.lambda.powf(dim as f64 / 2.0);
    let phase = Complex64::from_polar(1.0, -p.theta);
    Ok(Field::from_fn(grid, |x| {
        let mut pt = [0.0; 2];
        for (axis, slot) in pt.iter_mut().take(dim).enumerate() {
            *slot = p.lambda * x[axis] + p.alpha[axis];
        }
        pref * phase * table.eval(pt)
    }))
}

/// Split a field into a deformed ground-state profile and an orthogonal
/// remainder by Newton iteration on the `2d + 3` orthogonality functionals.
///
/// Starting from `p_init`, each step solves the centered finite-difference
/// Jacobian system; the step is damped to keep `λ > 0`.  Iteration stops when
/// the largest functional drops below `1e-12` times the profile mass and is
/// accepted below `1e-10` times the mass.  Inputs whose iteration diverges,
/// whose Jacobian degenerates, or whose scale collapses are rejected with
/// [`Error::OutsideBasin`] carrying the residual trace.
pub fn decompose(
    u: &Field,
    p_init: &ModParams,
    gs: &GroundState,
    rho: &RhoProfile,
) -> Result<DecompositionResult> {
    let grid = u.grid().clone();
    grid.check_same(gs.grid(), "decomposition input vs ground state")?;
    grid.check_same(rho.field().grid(), "decomposition input vs correction profile")?;
    if !u.is_finite() {
        return Err(Error::NonFinite("decomposition input".into()));
    }
    let dim = grid.dim();
    p_init.validate(dim)?;

    let mass = gs.mass();
    let tol_stop = 1e-12 * mass;
    let tol_accept = 1e-10 * mass;
    let lambda_floor = 1e-3 * p_init.lambda;
    let np = 2 * dim + 3;
    let max_updates = 25;

    let mut p = p_init.pack(dim);
    let mut f = ortho_vector(u, gs, rho, &ModParams::unpack(dim, &p))?;
    let mut fmax = max_abs(&f);
    let f0 = fmax;
    let mut trace = vec![fmax];
    let mut iters = 0usize;

    while fmax >= tol_stop && iters < max_updates {
        let mut jac = vec![vec![0.0; np]; np];
        for col in 0..np {
            // Scale-aware step: λ and the centers live on the scale of λ,
            // the remaining parameters on the unit scale.
            let base = if col <= dim { p[0].abs() } else { 1.0 };
            let h = 1e-6 * base.max(p[col].abs());
            let mut pp = p.clone();
            pp[col] += h;
            let mut pm = p.clone();
            pm[col] -= h;
            let fp = ortho_vector(u, gs, rho, &ModParams::unpack(dim, &pp))?;
            let fm = ortho_vector(u, gs, rho, &ModParams::unpack(dim, &pm))?;
            for (row, j) in jac.iter_mut().enumerate() {
                j[col] = (fp[row] - fm[row]) / (2.0 * h);
            }
        }
        let neg_f: Vec<f64> = f.iter().map(|v| -v).collect();
        let delta = solve_dense(jac, neg_f).ok_or_else(|| {
            Error::OutsideBasin(format!(
                "near-singular normalization Jacobian after {iters} updates \
                 (residual trace {})",
                fmt_trace(&trace)
            ))
        })?;
        let mut step = 1.0;
        let mut halvings = 0;
        while p[0] + step * delta[0] <= 0.0 {
            step *= 0.5;
            halvings += 1;
            if halvings > 6 {
                return Err(Error::OutsideBasin(format!(
                    "scale parameter driven nonpositive (residual trace {})",
                    fmt_trace(&trace)
                )));
            }
        }
        for (slot, d) in p.iter_mut().zip(&delta) {
            *slot += step * d;
        }
        if p[0] < lambda_floor {
            return Err(Error::OutsideBasin(format!(
                "scale parameter collapsed below {:.3e} (residual trace {})",
                lambda_floor,
                fmt_trace(&trace)
            )));
        }
        iters += 1;
        f = ortho_vector(u, gs, rho, &ModParams::unpack(dim, &p))?;
        fmax = max_abs(&f);
        trace.push(fmax);
        if fmax > 1e6 * f0.max(tol_stop) {
            return Err(Error::OutsideBasin(format!(
                "orthogonality residuals diverging after {iters} updates \
                 (residual trace {})",
                fmt_trace(&trace)
            )));
        }
    }
    if fmax >= tol_accept {
        return Err(Error::OutsideBasin(format!(
            "orthogonality system not converged after {iters} updates \
             (residual trace {})",
            fmt_trace(&trace)
        )));
    }

    let params = ModParams::unpack(dim, &p);
    let w = deformed_profile(gs, &params)?;
    let remainder = u.sub(&w);
    let epsilon = rescale_remainder(&remainder, &params)?;
    Ok(DecompositionResult {
        params,
        epsilon,
        remainder,
        ortho_residuals: f,
        newton_iters: iters,
    })
}

// ---------------------------------------------------------------------------
// Modulation vector along a parameter trajectory
// ---------------------------------------------------------------------------

/// Modulation-equation residuals at one sample of a parameter trajectory.
#[derive(Debug, Clone, Copy)]
pub struct ModVectorSample {
    pub t: f64,
    /// Euclidean norm of the five components.
    pub total: f64,
    /// `|λ λ_t + γ|`, `|λ² γ_t + γ²|`, `|λ α_t - 2β|`, `|λ² β_t + γ β|`,
    /// `|λ² θ_t - 1 - |β|²|` (vector entries as Euclidean norms per component).
    pub components: [f64; 5],
    /// The finite-difference parameter rates, recorded in the same shape as
    /// the parameters (the positivity convention for `λ` does not apply here).
    pub rate: ModParams,
}

/// Three-point Lagrange derivative on possibly nonuniform nodes, evaluated at `at`.
fn three_point_derivative(t: [f64; 3], f: [f64; 3], at: f64) -> f64 {
    let wa = (2.0 * at - t[1] - t[2]) / ((t[0] - t[1]) * (t[0] - t[2]));
    let wb = (2.0 * at - t[0] - t[2]) / ((t[1] - t[0]) * (t[1] - t[2]));
    let wc = (2.0 * at - t[0] - t[1]) / ((t[2] - t[0]) * (t[2] - t[1]));
    wa * f[0] + wb * f[1] + wc * f[2]
}

/// Second-order finite-difference derivative of a sampled scalar: interior
/// points use the centered three-point window, the ends the one-sided one.
fn fd_series(times: &[f64], vals: &[f64]) -> Vec<f64> {
    let m = times.len();
    (0..m)
        .map(|i| {
            let j = if i == 0 {
                0
            } else if i == m - 1 {
                m - 3
            } else {
                i - 1
            };
            three_point_derivative(
                [times[j], times[j + 1], times[j + 2]],
                [vals[j], vals[j + 1], vals[j + 2]],
                times[i],
            )
        })
        .collect()
}

/// Evaluate the modulation equations along a sampled parameter trajectory.
///
/// Parameter rates are estimated with second-order finite differences on the
/// (possibly nonuniform) sample times; the phase is unwrapped before
/// differencing so trajectories stored modulo `2π` are handled correctly.
/// For the exact self-similar flow (`λ = γ = T - t`, `θ = 1/(T - t)`) every
/// component vanishes up to the `O(h²)` differencing error.  Requires at least
/// three samples with strictly increasing, finite times.
pub fn mod_vector(series: &[(f64, ModParams)]) -> Result<Vec<ModVectorSample>> {
    let m = series.len();
    if m < 3 {
        return Err(Error::InvalidInput(format!(
            "modulation rates need at least 3 samples, got {m}"
        )));
    }
    for (t, p) in series {
        let finite = t.is_finite()
            && p.lambda.is_finite()
            && p.alpha.iter().chain(&p.beta).all(|v| v.is_finite())
            && p.gamma.is_finite()
            && p.theta.is_finite();
        if !finite {
            return Err(Error::InvalidInput(
                "parameter trajectory contains non-finite entries".into(),
            ));
        }
        if p.lambda <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "scale parameter must stay positive along the trajectory, got {}",
                p.lambda
            )));
        }
    }
    for w in series.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::InvalidInput(format!(
                "sample times must be strictly increasing ({} then {})",
                w[0].0, w[1].0
            )));
        }
    }

    let times: Vec<f64> = series.iter().map(|(t, _)| *t).collect();
    let pull = |get: fn(&ModParams) -> f64| -> Vec<f64> {
        series.iter().map(|(_, p)| get(p)).collect()
    };
    // Unwrap the phase so stored values modulo 2π difference correctly.
    let mut theta = pull(|p| p.theta);
    for i in 1..m {
        let mut d = theta[i] - theta[i - 1];
        d -= TAU * (d / TAU).round();
        theta[i] = theta[i - 1] + d;
    }

    let d_lambda = fd_series(&times, &pull(|p| p.lambda));
    let d_alpha = [
        fd_series(&times, &pull(|p| p.alpha[0])),
        fd_series(&times, &pull(|p| p.alpha[1])),
    ];
    let d_beta = [
        fd_series(&times, &pull(|p| p.beta[0])),
        fd_series(&times, &pull(|p| p.beta[1])),
    ];
    let d_gamma = fd_series(&times, &pull(|p| p.gamma));
    let d_theta = fd_series(&times, &theta);

    let samples = (0..m)
        .map(|i| {
            let p = &series[i].1;
            let l = p.lambda;
            let rate = ModParams::new(
                d_lambda[i],
                [d_alpha[0][i], d_alpha[1][i]],
                [d_beta[0][i], d_beta[1][i]],
                d_gamma[i],
                d_theta[i],
            );
            let beta_sq = p.beta[0] * p.beta[0] + p.beta[1] * p.beta[1];
            let c1 = (l * rate.lambda + p.gamma).abs();
            let c2 = (l * l * rate.gamma + p.gamma * p.gamma).abs();
            let c3 = {
                let e0 = l * rate.alpha[0] - 2.0 * p.beta[0];
                let e1 = l * rate.alpha[1] - 2.0 * p.beta[1];
                e0.hypot(e1)
            };
            let c4 = {
                let e0 = l * l * rate.beta[0] + p.gamma * p.beta[0];
                let e1 = l * l * rate.beta[1] + p.gamma * p.beta[1];
                e0.hypot(e1)
            };
            let c5 = (l * l * rate.theta - 1.0 - beta_sq).abs();
            let components = [c1, c2, c3, c4, c5];
            let total = components.iter().map(|c| c * c).sum::<f64>().sqrt();
            ModVectorSample {
                t: times[i],
                total,
                components,
                rate,
            }
        })
        .collect();
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Profile residual under prescribed parameter rates
// ---------------------------------------------------------------------------

/// Residual `η = i ∂_t w + Δw + |w|^{4/d} w + b·∇w + c w` of the deformed
/// profile `w(x, t)` moving with the prescribed parameter `rate`, evaluated at
/// time `t` in the gauge-transformed equation.  The first-order coefficient is
/// `b = 2i Σ_k ∇φ_k B_k(t)` and the zeroth-order one
/// `c = -Σ_a (Σ_k ∂_a φ_k B_k)² + i Σ_k Δφ_k B_k`.
///
/// The Laplacian of the profile is assembled analytically through the ground
/// state identity `ΔQ = Q - Q^{1+4/d}`, so for the exact self-similar rates
/// (and silent noise) the residual vanishes to solver accuracy.  Returns the
/// residual field and its `L²` norm.
pub fn profile_residual_eta(
    params: &ModParams,
    rate: &ModParams,
    gs: &GroundState,
    basis: &NoiseBasis,
    lift: &BrownianLift,
    t: f64,
) -> Result<(Field, f64)> {
    let grid = gs.grid().clone();
    grid.check_same(basis.grid(), "ground state vs noise basis")?;
    let dim = grid.dim();
    params.validate(dim)?;
    let rate_finite = rate.lambda.is_finite()
        && rate.alpha.iter().chain(&rate.beta).all(|v| v.is_finite())
        && rate.gamma.is_finite()
        && rate.theta.is_finite();
    if !rate_finite {
        return Err(Error::InvalidInput(
            "parameter rates must be finite".into(),
        ));
    }
    if basis.n_modes() != lift.n_modes() {
        return Err(Error::InvalidInput(format!(
            "noise basis has {} modes but the lift carries {}",
            basis.n_modes(),
            lift.n_modes()
        )));
    }

    let len = grid.len();
    let n_modes = basis.n_modes();
    let bk: Vec<f64> = (0..n_modes)
        .map(|k| lift.value(k, t))
        .collect::<Result<Vec<f64>>>()?;
    // Noise combinations: G_a = Σ_k ∂_a φ_k B_k and Σ_k Δφ_k B_k.
    let mut g_combo = vec![vec![0.0f64; len]; dim];
    let mut lap_combo = vec![0.0f64; len];
    for (k, &b) in bk.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        for (axis, combo) in g_combo.iter_mut().enumerate() {
            for (dst, &v) in combo.iter_mut().zip(basis.grad(k, axis)) {
                *dst += v * b;
            }
        }
        for (dst, &v) in lap_combo.iter_mut().zip(basis.lap(k)) {
            *dst += v * b;
        }
    }

    let d = dim as f64;
    let power = 4.0 / d;
    let lam = params.lambda;
    let pref = lam.powf(-d / 2.0);
    let mut values = vec![Complex64::default(); len];
    for (flat, out) in values.iter_mut().enumerate() {
        let x = grid.point(flat);
        let mut y = [0.0f64; 2];
        let mut gq = [0.0f64; 2];
        let mut mvec = [0.0f64; 2];
        let mut ydot = [0.0f64; 2];
        let mut y_sq = 0.0;
        for axis in 0..dim {
            let ya = (x[axis] - params.alpha[axis]) / lam;
            y[axis] = ya;
            y_sq += ya * ya;
        }
        let q = gs.eval(y);
        for axis in 0..dim {
            gq[axis] = gs.eval_grad(axis, y);
            mvec[axis] = params.beta[axis] - params.gamma * y[axis] / 2.0;
            ydot[axis] = -(rate.alpha[axis] + y[axis] * rate.lambda) / lam;
        }
        let big_theta = {
            let mut s = params.theta - params.gamma * y_sq / 4.0;
            for axis in 0..dim {
                s += params.beta[axis] * y[axis];
            }
            s
        };
        let phase = Complex64::from_polar(pref, big_theta);
        let w = q * phase;

        // Δw through ΔQ = Q - Q^{1+4/d} and the phase chain rule.
        let m_sq: f64 = mvec.iter().map(|v| v * v).sum();
        let m_dot_gq: f64 = mvec.iter().zip(&gq).map(|(a, b)| a * b).sum();
        let lap_q = q - q.abs().powf(power) * q;
        let lap_w = phase
            * Complex64::new(
                lap_q - m_sq * q,
                2.0 * m_dot_gq - d * params.gamma / 2.0 * q,
            )
            / (lam * lam);

        // ∂_t w by the chain rule through λ, α, β, γ, θ.
        let theta_t = {
            let mut s = rate.theta - rate.gamma * y_sq / 4.0;
            for axis in 0..dim {
                s += rate.beta[axis] * y[axis] + params.beta[axis] * ydot[axis]
                    - params.gamma / 2.0 * y[axis] * ydot[axis];
            }
            s
        };
        let gq_dot_ydot: f64 = gq.iter().zip(&ydot).map(|(a, b)| a * b).sum();
        let dt_w = w * Complex64::new(-d / 2.0 * rate.lambda / lam, theta_t)
            + phase * gq_dot_ydot;

        let nl = (pref * q.abs()).powf(power) * w;

        let mut noise_terms = Complex64::default();
        for axis in 0..dim {
            let dw = phase * Complex64::new(gq[axis], q * mvec[axis]) / lam;
            noise_terms += Complex64::new(0.0, 2.0 * g_combo[axis][flat]) * dw;
        }
        let g_sq: f64 = (0..dim).map(|a| g_combo[a][flat] * g_combo[a][flat]).sum();
        noise_terms += Complex64::new(-g_sq, lap_combo[flat]) * w;

        *out = Complex64::new(0.0, 1.0) * dt_w + lap_w + nl + noise_terms;
    }
    let eta = Field::from_values(grid, values)?;
    let norm = eta.norm();
    Ok((eta, norm))
}

// ---------------------------------------------------------------------------
// Generalized energy of the remainder
// ---------------------------------------------------------------------------

/// Localized Lyapunov functional of the remainder `R` around the profile `w`:
///
/// `I = 1/2 ∫ |∇R|² + |R|²/λ²  -  Re ∫ F(w + R) - F(w) - f(w) R̄
///      + γ/(2λ) Im ∫ ∇χ_A((x - α)/λ) · ∇R R̄`,
///
/// with `f(z) = |z|^{4/d} z`, `F(z) = |z|^{2+4/d}/(2 + 4/d)`, and the convex
/// Morawetz weight `χ_A(z) = A² χ(z/A)` whose radial slope is
/// [`morawetz_slope`]; `∇χ_A(z) = z` on `|z| <= A`.  `cutoff_scale` is `A`.
pub fn generalized_energy(
    remainder: &Field,
    w: &Field,
    params: &ModParams,
    cutoff_scale: f64,
) -> Result<f64> {
    let grid = remainder.grid().clone();
    grid.check_same(w.grid(), "remainder vs profile")?;
    let dim = grid.dim();
    params.validate(dim)?;
    if !(cutoff_scale > 0.0) || !cutoff_scale.is_finite() {
        return Err(Error::InvalidInput(format!(
            "cutoff scale must be positive and finite, got {cutoff_scale}"
        )));
    }
    let lam = params.lambda;
    let dv = grid.cell_volume();
    let f_power = 2.0 + 4.0 / dim as f64;

    let quadratic = 0.5 * (remainder.grad_norm_sq() + remainder.norm_sq() / (lam * lam));

    let mut potential = 0.0;
    for (rv, wv) in remainder.values().iter().zip(w.values()) {
        let u_abs = (rv + wv).norm();
        let w_abs = wv.norm();
        let f_w = w_abs.powf(f_power - 2.0) * wv;
        potential += (u_abs.powf(f_power) - w_abs.powf(f_power)) / f_power
            - (f_w * rv.conj()).re;
    }
    potential *= dv;

    let grads = remainder.gradient();
    let mut transport = 0.0;
    for (flat, rv) in remainder.values().iter().enumerate() {
        let x = grid.point(flat);
        let mut z = [0.0f64; 2];
        let mut z_sq = 0.0;
        for axis in 0..dim {
            let za = (x[axis] - params.alpha[axis]) / lam;
            z[axis] = za;
            z_sq += za * za;
        }
        let ratio = morawetz_slope_ratio(z_sq.sqrt() / cutoff_scale);
        for (axis, g) in grads.iter().enumerate().take(dim) {
            transport += z[axis] * ratio * (g.values()[flat] * rv.conj()).im;
        }
    }
    transport *= dv * params.gamma / (2.0 * lam);

    Ok(quadratic - potential + transport)
}

// ---------------------------------------------------------------------------
