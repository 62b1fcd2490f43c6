//! Dense and matrix-free solvers for the Gramian systems: spectrally
//! truncated pseudo-inverse, damped Cholesky/LU solves with residual
//! verification, and conjugate gradients.

use crate::error::{Error, Result};
use faer::linalg::solvers::{Llt, PartialPivLu, SelfAdjointEigen, Solve};
use faer::{Mat, Side};

/// Tolerances for the dense solvers.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolveSpec {
    /// Relative eigenvalue cutoff for the pseudo-inverse: eigenvalues with
    /// |lambda| <= cutoff_rel * max |lambda| are treated as zero.
    pub cutoff_rel: f64,
    /// Relative residual bound verified after every damped solve.
    pub residual_rel: f64,
}

impl Default for SolveSpec {
    fn default() -> Self {
        Self {
            cutoff_rel: 1e-10,
            residual_rel: 1e-10,
        }
    }
}

/// Default Levenberg-style damping for a Gramian: 1e-8 * trace(G) / p.
pub fn default_damping(g: &Mat<f64>) -> f64 {
    let p = g.nrows();
    if p == 0 {
        return 0.0;
    }
    // |trace|: indefinite (Newton/saddle) matrices can have negative trace.
    let tr: f64 = (0..p).map(|i| g[(i, i)]).sum();
    1e-8 * tr.abs() / p as f64
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mat_vec(m: &Mat<f64>, v: &[f64]) -> Vec<f64> {
    let (r, c) = (m.nrows(), m.ncols());
    let mut out = vec![0.0; r];
    for i in 0..r {
        let mut acc = 0.0;
        for j in 0..c {
            acc += m[(i, j)] * v[j];
        }
        out[i] = acc;
    }
    out
}

fn min_abs_eig(m: &Mat<f64>) -> f64 {
    match SelfAdjointEigen::new(m.as_ref(), Side::Lower) {
        Ok(eig) => {
            let s = eig.S();
            (0..m.nrows()).fold(f64::INFINITY, |a, i| a.min(s[i].abs()))
        }
        Err(_) => f64::NAN,
    }
}

/// Spectrally truncated solve of the symmetric system G x = b by
/// eigendecomposition: x = sum_{|l_k| > cutoff} (v_k, b)/|l_k| v_k.
/// For positive-semidefinite G this is the Moore-Penrose pseudo-inverse;
/// for indefinite G (exact Newton Hessians) inverting the absolute
/// spectrum is the saddle-free Newton regularization, which keeps the
/// result a descent direction.
pub fn pseudo_solve(g: &Mat<f64>, rhs: &[f64], spec: &SolveSpec) -> Result<Vec<f64>> {
    let p = g.nrows();
    if g.ncols() != p || rhs.len() != p {
        return Err(Error::DimensionMismatch("pseudo_solve shapes".into()));
    }
    let eig = SelfAdjointEigen::new(g.as_ref(), Side::Lower).map_err(|_| {
        Error::FactorizationBreakdown {
            min_abs_eig: f64::NAN,
        }
    })?;
    let s = eig.S();
    let u = eig.U();
    let lmax = (0..p).fold(0.0f64, |a, i| a.max(s[i].abs()));
    let cutoff = spec.cutoff_rel * lmax;
    let mut x = vec![0.0; p];
    for k in 0..p {
        if s[k].abs() <= cutoff {
            continue;
        }
        let mut proj = 0.0;
        for i in 0..p {
            proj += u[(i, k)] * rhs[i];
        }
        let scale = proj / s[k].abs();
        for i in 0..p {
            x[i] += scale * u[(i, k)];
        }
    }
    for v in &x {
        if !v.is_finite() {
            return Err(Error::NonFinite("pseudo_solve output".into()));
        }
    }
    Ok(x)
}

/// Solve (G + eps I) x = b. Cholesky for the definite case with an LU
/// fallback for symmetric-indefinite (saddle) matrices; the residual is
/// verified and a breakdown error carries the minimum |eigenvalue| seen.
pub fn damped_solve(g: &Mat<f64>, rhs: &[f64], eps: f64, spec: &SolveSpec) -> Result<Vec<f64>> {
    let p = g.nrows();
    if g.ncols() != p || rhs.len() != p {
        return Err(Error::DimensionMismatch("damped_solve shapes".into()));
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::Config("damping must be finite and nonnegative".into()));
    }
    let m = Mat::from_fn(p, p, |i, j| g[(i, j)] + if i == j { eps } else { 0.0 });
    let solve: Box<dyn Fn(&[f64]) -> Vec<f64>> = match Llt::new(m.as_ref(), Side::Lower) {
        Ok(f) => Box::new(move |b: &[f64]| {
            let b = Mat::from_fn(b.len(), 1, |i, _| b[i]);
            let x = f.solve(b.as_ref());
            (0..x.nrows()).map(|i| x[(i, 0)]).collect()
        }),
        Err(_) => {
            let f = PartialPivLu::new(m.as_ref());
            Box::new(move |b: &[f64]| {
                let b = Mat::from_fn(b.len(), 1, |i, _| b[i]);
                let x = f.solve(b.as_ref());
                (0..x.nrows()).map(|i| x[(i, 0)]).collect()
            })
        }
    };
    let mut xs = solve(rhs);
    let bn = norm2(rhs);
    // iterative refinement: drives the residual of an already
    // backward-stable solve down to roundoff level, so downstream
    // normal-equation guarantees hold with margin
    let mut res = f64::INFINITY;
    for round in 0..4 {
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::FactorizationBreakdown {
                min_abs_eig: min_abs_eig(&m),
            });
        }
        let ax = mat_vec(&m, &xs);
        let r: Vec<f64> = (0..p).map(|i| rhs[i] - ax[i]).collect();
        res = norm2(&r);
        if round == 3 || res <= 1e-14 * bn.max(mat_inf_norm(&m) * norm2(&xs)) {
            break;
        }
        let dx = solve(&r);
        for i in 0..p {
            xs[i] += dx[i];
        }
    }
    // scale-aware bound: forward error of a backward-stable solve grows with
    // the condition number, so compare against |M| |x| as well as |b|
    let scale = bn.max(mat_inf_norm(&m) * norm2(&xs));
    if res > spec.residual_rel * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::FactorizationBreakdown {
            min_abs_eig: min_abs_eig(&m),
        });
    }
    Ok(xs)
}

fn mat_inf_norm(m: &Mat<f64>) -> f64 {
    let mut best = 0.0f64;
    for i in 0..m.nrows() {
        let row: f64 = (0..m.ncols()).map(|j| m[(i, j)].abs()).sum();
        best = best.max(row);
    }
    best
}

/// Conjugate gradients on (A + eps I) x = b with A given matrix-free.
/// Stops when |r| <= tol * |b|; returns (x, iterations).
pub fn cg_solve(
    matvec: impl Fn(&[f64]) -> Result<Vec<f64>>,
    rhs: &[f64],
    eps: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = rhs.len();
    let apply = |v: &[f64]| -> Result<Vec<f64>> {
        let mut av = matvec(v)?;
        if av.len() != n {
            return Err(Error::DimensionMismatch("cg matvec output length".into()));
        }
        for (a, x) in av.iter_mut().zip(v) {
            *a += eps * x;
        }
        Ok(av)
    };
    let bn = norm2(rhs);
    if bn == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    for it in 0..max_iters {
        if rs.sqrt() <= tol * bn {
            return Ok((x, it));
        }
        let ap = apply(&p)?;
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::SolverFailure(format!(
                "conjugate gradients: non-positive curvature p^T A p = {pap} at iteration {it}"
            )));
        }
        let alpha = rs / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rs.sqrt() <= tol * bn {
        return Ok((x, max_iters));
    }
    Err(Error::SolverFailure(format!(
        "conjugate gradients did not converge in {max_iters} iterations; relative residual {}",
        rs.sqrt() / bn
    )))
}
