//! Tangent-space discretization of the function-space maps T_u: Gramian
//! assembly for each metric, parameter-space gradients, Jacobian operators,
//! and matrix-free curvature products.

use crate::domain::QuadratureSet;
use crate::error::{Error, Result};
use crate::net::{NetworkSpec, ParamVector, Tape, TangentFrame};
use crate::net::FeatureBasis;
use crate::problems::{
    CpinnTapes, DeepRitzSemilinear, NavierStokesPinn, PoissonCpinn, PoissonPinn, ResidualSystem,
    ScalarField, SchrodingerRayleigh,
};
use faer::Mat;

/// The function-space metric/curvature map a Gramian discretizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Riesz isometry of L^2 on normalized wavefunctions (Fisher matrix).
    L2Fisher,
    /// T_u = D^2 E(u_theta): function-space Newton (ENGD).
    EnergyHessian,
    /// T = DR* DR: function-space Gauss-Newton.
    GaussNewton,
    /// D^2 of the Lagrangian: saddle-point block matrix.
    LagrangeNewtonBlock,
}

/// Dense (possibly block) Gramian.
#[derive(Debug, Clone)]
pub struct Gramian {
    pub mat: Mat<f64>,
    /// (p_theta, p_psi, p_xi) for the saddle block case.
    pub block_dims: Option<[usize; 3]>,
}

impl Gramian {
    pub fn p(&self) -> usize {
        self.mat.nrows()
    }
    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.mat.nrows() {
            for j in 0..self.mat.ncols() {
                m = m.max(self.mat[(i, j)].abs());
            }
        }
        m
    }
    /// max |G - G^T| over all entries.
    pub fn asymmetry(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.mat.nrows() {
            for j in 0..i {
                m = m.max((self.mat[(i, j)] - self.mat[(j, i)]).abs());
            }
        }
        m
    }

    /// Ascending eigenvalue spectrum (ill-conditioning diagnostics).
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let eig = faer::linalg::solvers::SelfAdjointEigen::new(self.mat.as_ref(), faer::Side::Lower)
            .map_err(|_| Error::FactorizationBreakdown {
                min_abs_eig: f64::NAN,
            })?;
        let s = eig.S();
        let mut out: Vec<f64> = (0..self.p()).map(|i| s[i]).collect();
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(out)
    }

    /// Dense entries as CSV (offline inspection).
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.mat.nrows() {
            for j in 0..self.mat.ncols() {
                if j > 0 {
                    s.push(',');
                }
                s.push_str(&format!("{:.17e}", self.mat[(i, j)]));
            }
            s.push('\n');
        }
        s
    }
}

/// A problem at a concrete parameter state: the dispatch point for
/// loss gradients and Gramian assembly across all model problems.
pub enum ProblemState<'a> {
    Poisson {
        prob: &'a PoissonPinn,
        spec: &'a NetworkSpec,
        theta: &'a ParamVector,
    },
    DeepRitz {
        prob: &'a DeepRitzSemilinear,
        spec: &'a NetworkSpec,
        theta: &'a ParamVector,
    },
    NavierStokes {
        prob: &'a NavierStokesPinn,
        spec_phi: &'a NetworkSpec,
        theta_phi: &'a ParamVector,
        spec_p: &'a NetworkSpec,
        theta_p: &'a ParamVector,
    },
    Rayleigh {
        prob: &'a SchrodingerRayleigh,
        spec: &'a NetworkSpec,
        theta: &'a ParamVector,
    },
    Cpinn {
        prob: &'a PoissonCpinn,
        specs: &'a [NetworkSpec; 3],
        params: &'a [ParamVector; 3],
    },
    /// Quadratic energy E = 0.5 |u - target|^2 over a linear ansatz
    /// (one-step-Newton fixture; also the "linear parametrization" checks).
    QuadraticFit {
        basis: &'a FeatureBasis,
        theta: &'a [f64],
        target: ScalarField,
    },
}

impl ProblemState<'_> {
    fn kind_name(&self) -> &'static str {
        match self {
            ProblemState::Poisson { .. } => "poisson",
            ProblemState::DeepRitz { .. } => "deep_ritz",
            ProblemState::NavierStokes { .. } => "navier_stokes",
            ProblemState::Rayleigh { .. } => "rayleigh",
            ProblemState::Cpinn { .. } => "cpinn",
            ProblemState::QuadraticFit { .. } => "quadratic_fit",
        }
    }

    /// Build the least-squares residual system, for problems that have one.
    pub fn residual_system(&self, quad: &QuadratureSet) -> Result<ResidualSystem> {
        match self {
            ProblemState::Poisson { prob, spec, theta } => {
                prob.residual_system(spec, theta, quad)
            }
            ProblemState::NavierStokes {
                prob,
                spec_phi,
                theta_phi,
                spec_p,
                theta_p,
            } => prob.residual_system(spec_phi, theta_phi, spec_p, theta_p, quad),
            other => Err(Error::IncompatibleMetric {
                metric: "least-squares residual".into(),
                problem: other.kind_name().into(),
            }),
        }
    }
}

/// Discretized loss value at the current state.
pub fn loss_value(state: &ProblemState, quad: &QuadratureSet) -> Result<f64> {
    match state {
        ProblemState::Poisson { .. } | ProblemState::NavierStokes { .. } => {
            Ok(state.residual_system(quad)?.loss())
        }
        ProblemState::DeepRitz { prob, spec, theta } => prob.energy(spec, theta, quad),
        ProblemState::Rayleigh { prob, spec, theta } => {
            let tape = Tape::build(spec, theta, &quad.interior_points, 1)?;
            prob.quotient_cotangent(&tape, quad).map(|(e, _)| e)
        }
        ProblemState::Cpinn {
            prob,
            specs,
            params,
        } => {
            let tapes = prob.tapes(specs, params, quad)?;
            prob.lagrangian(&tapes, quad)
        }
        ProblemState::QuadraticFit {
            basis,
            theta,
            target,
        } => {
            let frame = basis.feature_frame(&quad.interior_points, 0)?;
            let u = frame.apply(theta);
            let d = quad.dim;
            let w = quad.interior_weight;
            let mut acc = 0.0;
            for (pt, uv) in u.iter().enumerate() {
                let x = &quad.interior_points[pt * d..(pt + 1) * d];
                acc += 0.5 * w * (uv - target(x)).powi(2);
            }
            Ok(acc)
        }
    }
}

/// Exact gradient of the quadrature-discretized loss (chain rule through
/// the tangent frame), concatenated over parameter blocks.
pub fn loss_gradient(state: &ProblemState, quad: &QuadratureSet) -> Result<Vec<f64>> {
    match state {
        ProblemState::Poisson { .. } | ProblemState::NavierStokes { .. } => {
            residual_gradient(&state.residual_system(quad)?)
        }
        ProblemState::DeepRitz { prob, spec, theta } => {
            let tape = Tape::build(spec, theta, &quad.interior_points, 1)?;
            let cot = prob.energy_cotangent(&tape, quad);
            tape.vjp(&cot)
        }
        ProblemState::Rayleigh { prob, spec, theta } => {
            let tape = Tape::build(spec, theta, &quad.interior_points, 1)?;
            let (_, cot) = prob.quotient_cotangent(&tape, quad)?;
            tape.vjp(&cot)
        }
        ProblemState::Cpinn {
            prob,
            specs,
            params,
        } => {
            let tapes = prob.tapes(specs, params, quad)?;
            prob.gradient(&tapes, quad)
        }
        ProblemState::QuadraticFit {
            basis,
            theta,
            target,
        } => {
            let frame = basis.feature_frame(&quad.interior_points, 0)?;
            let u = frame.apply(theta);
            let d = quad.dim;
            let w = quad.interior_weight;
            let mut g = vec![0.0; frame.p];
            for pt in 0..frame.n_points {
                let x = &quad.interior_points[pt * d..(pt + 1) * d];
                let r = w * (u[pt] - target(x));
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += r * frame.entry(0, pt, i);
                }
            }
            Ok(g)
        }
    }
}

/// Assemble the Gramian of the requested metric at the current state.
pub fn assemble_gramian(
    state: &ProblemState,
    metric: MetricKind,
    quad: &QuadratureSet,
) -> Result<Gramian> {
    let incompatible = || Error::IncompatibleMetric {
        metric: format!("{metric:?}"),
        problem: state.kind_name().into(),
    };
    match (state, metric) {
        (ProblemState::Poisson { prob, spec, theta }, MetricKind::EnergyHessian) => {
            poisson_energy_hessian(prob, spec, theta, quad)
        }
        (ProblemState::Poisson { .. }, MetricKind::GaussNewton)
        | (ProblemState::NavierStokes { .. }, MetricKind::GaussNewton) => {
            gauss_newton_gramian(&state.residual_system(quad)?)
        }
        (ProblemState::DeepRitz { prob, spec, theta }, MetricKind::EnergyHessian) => {
            deep_ritz_energy_hessian(prob, spec, theta, quad)
        }
        (ProblemState::Rayleigh { prob, spec, theta }, MetricKind::L2Fisher) => {
            fisher_gramian(prob, spec, theta, quad)
        }
        (
            ProblemState::Cpinn {
                prob,
                specs,
                params,
            },
            MetricKind::LagrangeNewtonBlock,
        ) => {
            let tapes = prob.tapes(specs, params, quad)?;
            lagrange_newton_block(&tapes, quad)
        }
        (
            ProblemState::QuadraticFit { basis, .. },
            MetricKind::EnergyHessian | MetricKind::GaussNewton,
        ) => {
            let frame = basis.feature_frame(&quad.interior_points, 0)?;
            Ok(l2_gramian(&frame, quad.interior_weight))
        }
        _ => Err(incompatible()),
    }
}

/// Abstract J of the scaled discrete residual: matrix-free jvp (v -> J v) and
/// vjp (w -> J^T w); Gramian products G v = J^T (J v) without materializing G.
pub struct JacobianOperator<'a> {
    pub sys: &'a ResidualSystem,
}

impl<'a> JacobianOperator<'a> {
    pub fn new(sys: &'a ResidualSystem) -> Self {
        Self { sys }
    }

    pub fn n_rows(&self) -> usize {
        self.sys.rows.len()
    }
    pub fn p_total(&self) -> usize {
        self.sys.p_total()
    }

    /// J v by forward-mode directional parameter derivatives of the residual.
    pub fn jvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.p_total() {
            return Err(Error::DimensionMismatch("jvp direction length".into()));
        }
        let offs = self.sys.block_offsets();
        // directional jet tangents per (block, tape)
        let mut djets: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.sys.blocks.len());
        for (bi, block) in self.sys.blocks.iter().enumerate() {
            let vb = &v[offs[bi]..offs[bi] + block.p];
            let mut per_tape = Vec::with_capacity(block.tapes.len());
            for tape in &block.tapes {
                per_tape.push(tape.jvp(vb)?);
            }
            djets.push(per_tape);
        }
        let mut out = vec![0.0; self.n_rows()];
        for (row, entries) in self.sys.rows.iter().enumerate() {
            let mut acc = 0.0;
            for e in entries {
                let tape = &self.sys.blocks[e.block].tapes[e.tape];
                let k = tape.layout().len();
                let dj = &djets[e.block][e.tape][e.pt * k..(e.pt + 1) * k];
                for &(c, coeff) in &e.cot {
                    acc += coeff * dj[c];
                }
            }
            out[row] = acc;
        }
        Ok(out)
    }

    /// J^T w by reverse accumulation through the tapes.
    pub fn vjp(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.n_rows() {
            return Err(Error::DimensionMismatch("vjp cotangent length".into()));
        }
        let offs = self.sys.block_offsets();
        let mut out = vec![0.0; self.p_total()];
        for (bi, block) in self.sys.blocks.iter().enumerate() {
            for (ti, tape) in block.tapes.iter().enumerate() {
                let cot = row_cotangent_field(self.sys, bi, ti, w);
                let g = tape.vjp(&cot)?;
                for (i, v) in g.iter().enumerate() {
                    out[offs[bi] + i] += v;
                }
            }
        }
        Ok(out)
    }

    /// G v = J^T (J v): matrix-free Gauss-Newton Gramian product.
    pub fn gramian_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.vjp(&self.jvp(v)?)
    }

    /// Materialize J densely (tests and dense Gramian assembly).
    pub fn dense(&self) -> Result<Mat<f64>> {
        let offs = self.sys.block_offsets();
        let mut j = Mat::<f64>::zeros(self.n_rows(), self.p_total());
        for (bi, block) in self.sys.blocks.iter().enumerate() {
            for (ti, tape) in block.tapes.iter().enumerate() {
                let frame = tape.frame()?;
                for (row, entries) in self.sys.rows.iter().enumerate() {
                    for e in entries {
                        if e.block != bi || e.tape != ti {
                            continue;
                        }
                        for &(c, coeff) in &e.cot {
                            let m = frame.comp_matrix(c);
                            let base = e.pt * block.p;
                            for i in 0..block.p {
                                j[(row, offs[bi] + i)] += coeff * m[base + i];
                            }
                        }
                    }
                }
            }
        }
        Ok(j)
    }
}

/// Aggregate residual-weighted cotangent field for one (block, tape):
/// cot[pt] = sum over rows touching that tape of w_row * row cotangent.
pub fn row_cotangent_field(
    sys: &ResidualSystem,
    block: usize,
    tape: usize,
    w: &[f64],
) -> Vec<f64> {
    let t = &sys.blocks[block].tapes[tape];
    let k = t.layout().len();
    let mut cot = vec![0.0; t.n_points() * k];
    for (row, entries) in sys.rows.iter().enumerate() {
        for e in entries {
            if e.block == block && e.tape == tape {
                for &(c, coeff) in &e.cot {
                    cot[e.pt * k + c] += coeff * w[row];
                }
            }
        }
    }
    cot
}

/// Gradient of the least-squares loss 0.5 |r|^2: J^T r.
pub fn residual_gradient(sys: &ResidualSystem) -> Result<Vec<f64>> {
    JacobianOperator::new(sys).vjp(&sys.r)
}

/// Gauss-Newton Gramian G = J^T J (dense; same quadrature as the residual).
pub fn gauss_newton_gramian(sys: &ResidualSystem) -> Result<Gramian> {
    let j = JacobianOperator::new(sys).dense()?;
    let g = j.transpose() * &j;
    Ok(Gramian {
        mat: g,
        block_dims: None,
    })
}

/// Scaled N x p frame component as a faer matrix: row pt = scale(pt) * frame row.
fn scaled_comp_mat(frame: &TangentFrame, comp: usize, scale: impl Fn(usize) -> f64) -> Mat<f64> {
    let m = frame.comp_matrix(comp);
    Mat::from_fn(frame.n_points, frame.p, |i, j| scale(i) * m[i * frame.p + j])
}

fn scaled_laplacian_mat(frame: &TangentFrame, scale: impl Fn(usize) -> f64) -> Mat<f64> {
    let m = frame.laplacian_matrix();
    Mat::from_fn(frame.n_points, frame.p, |i, j| scale(i) * m[i * frame.p + j])
}

/// Plain L^2 Gramian of a value frame: G_ij = sum_pt w U_pt,i U_pt,j.
pub fn l2_gramian(frame: &TangentFrame, weight: f64) -> Gramian {
    let a = scaled_comp_mat(frame, 0, |_| weight.sqrt());
    Gramian {
        mat: a.transpose() * &a,
        block_dims: None,
    }
}

/// Energy-Hessian Gramian of the Poisson PINN loss:
/// G_ij = (Lap d_i u, Lap d_j u)_Omega + lambda_b (d_i u, d_j u)_dOmega.
/// For this linear residual it coincides with the Gauss-Newton Gramian.
pub fn poisson_energy_hessian(
    prob: &PoissonPinn,
    spec: &NetworkSpec,
    theta: &ParamVector,
    quad: &QuadratureSet,
) -> Result<Gramian> {
    let frame_i = Tape::build(spec, theta, &quad.interior_points, 2)?.frame()?;
    let frame_b = Tape::build(spec, theta, &quad.boundary_points, 0)?.frame()?;
    let wi = quad.interior_weight.sqrt();
    let wb = (prob.lambda_b * quad.boundary_weight).sqrt();
    let a = scaled_laplacian_mat(&frame_i, |_| wi);
    let b = scaled_comp_mat(&frame_b, 0, |_| wb);
    Ok(Gramian {
        mat: a.transpose() * &a + b.transpose() * &b,
        block_dims: None,
    })
}

/// Energy-Hessian Gramian of the semilinear deep Ritz energy:
/// G_ij = (d_i u', d_j u')_Omega + 3 (u^2 d_i u, d_j u)_Omega.
pub fn deep_ritz_energy_hessian(
    _prob: &DeepRitzSemilinear,
    spec: &NetworkSpec,
    theta: &ParamVector,
    quad: &QuadratureSet,
) -> Result<Gramian> {
    let tape = Tape::build(spec, theta, &quad.interior_points, 1)?;
    let jet = tape.output_jet();
    let frame = tape.frame()?;
    let wi = quad.interior_weight;
    let gx = frame.layout().first(0);
    let a = scaled_comp_mat(&frame, gx, |_| wi.sqrt());
    let b = scaled_comp_mat(&frame, 0, |pt| (3.0 * wi).sqrt() * jet.value(pt, 0));
    Ok(Gramian {
        mat: a.transpose() * &a + b.transpose() * &b,
        block_dims: None,
    })
}

/// Fisher matrix with respect to the normalized wavefunction:
/// G_ij = int d_i psi-hat d_j psi-hat, where (quotient rule on
/// psi-hat = psi / |psi|):
///   d_i psi-hat = d_i psi / |psi|  -  psi-hat (psi-hat, d_i psi) / |psi|.
pub fn fisher_gramian(
    prob: &SchrodingerRayleigh,
    spec: &NetworkSpec,
    theta: &ParamVector,
    quad: &QuadratureSet,
) -> Result<Gramian> {
    let tape = Tape::build(spec, theta, &quad.interior_points, 0)?;
    let jet = tape.output_jet();
    let frame = tape.frame()?;
    let n = quad.n_interior();
    let p = frame.p;
    let wi = quad.interior_weight;
    let norm_sq: f64 = (0..n).map(|pt| wi * jet.value(pt, 0).powi(2)).sum();
    if norm_sq < prob.norm_threshold() {
        return Err(Error::DegenerateNormalization {
            norm_sq,
            threshold: prob.norm_threshold(),
        });
    }
    let norm = norm_sq.sqrt();
    let u = frame.comp_matrix(0);
    // c_i = (psi-hat, d_i psi) = sum_pt w psi-hat_pt U_pt,i
    let mut c = vec![0.0; p];
    for pt in 0..n {
        let ph = jet.value(pt, 0) / norm;
        let row = &u[pt * p..(pt + 1) * p];
        for (ci, uv) in c.iter_mut().zip(row) {
            *ci += wi * ph * uv;
        }
    }
    // scaled normalized-tangent matrix, rows premultiplied by sqrt(w)
    let a = Mat::from_fn(n, p, |pt, i| {
        let ph = jet.value(pt, 0) / norm;
        wi.sqrt() * (u[pt * p + i] - ph * c[i]) / norm
    });
    Ok(Gramian {
        mat: a.transpose() * &a,
        block_dims: None,
    })
}

/// Saddle-point block Gramian of the CPINN Lagrangian:
/// [[0, A, B], [A^T, 0, 0], [B^T, 0, 0]] with
/// A_ij = (d_psi_j lambda, Lap d_theta_i u)_Omega,
/// B_ij = (d_xi_j mu, d_theta_i u)_dOmega.
pub fn lagrange_newton_block(tapes: &CpinnTapes, quad: &QuadratureSet) -> Result<Gramian> {
    let frame_u_i = tapes.u_interior.frame()?;
    let frame_u_b = tapes.u_boundary.frame()?;
    let frame_lam = tapes.lambda_interior.frame()?;
    let frame_mu = tapes.mu_boundary.frame()?;
    let (pt_, pp, px) = (frame_u_i.p, frame_lam.p, frame_mu.p);
    let wi = quad.interior_weight;
    let wb = quad.boundary_weight;
    // A = (w Lap_u)^T U_lambda
    let lap = scaled_laplacian_mat(&frame_u_i, |_| wi);
    let ulam = scaled_comp_mat(&frame_lam, 0, |_| 1.0);
    let a = lap.transpose() * &ulam;
    let ub = scaled_comp_mat(&frame_u_b, 0, |_| wb);
    let umu = scaled_comp_mat(&frame_mu, 0, |_| 1.0);
    let b = ub.transpose() * &umu;
    let p_tot = pt_ + pp + px;
    let mut g = Mat::<f64>::zeros(p_tot, p_tot);
    for i in 0..pt_ {
        for j in 0..pp {
            g[(i, pt_ + j)] = a[(i, j)];
            g[(pt_ + j, i)] = a[(i, j)];
        }
        for j in 0..px {
            g[(i, pt_ + pp + j)] = b[(i, j)];
            g[(pt_ + pp + j, i)] = b[(i, j)];
        }
    }
    Ok(Gramian {
        mat: g,
        block_dims: Some([pt_, pp, px]),
    })
}

/// Result of the Gauss-Newton decomposition check
/// D^2 L = G + C with C_ij = DE(u_theta)(d_i d_j u_theta).
#[derive(Debug, Clone)]
pub struct GgnReport {
    /// max |D^2 L| (finite-difference Hessian)
    pub hessian_scale: f64,
    /// max |D^2 L - G - C|
    pub residual_max: f64,
    /// residual_max / hessian_scale
    pub rel: f64,
}

/// Check D^2 L = G + C for the deep Ritz energy: D^2 L by central finite
/// differences of the exact gradient, G the EnergyHessian Gramian, C the exact
/// second-parameter-derivative contraction (nested tangents, not FD).
pub fn ggn_decomposition_check_deep_ritz(
    prob: &DeepRitzSemilinear,
    spec: &NetworkSpec,
    theta: &ParamVector,
    quad: &QuadratureSet,
) -> Result<GgnReport> {
    let p = spec.param_count();
    let grad = |th: &ParamVector| -> Result<Vec<f64>> {
        let tape = Tape::build(spec, th, &quad.interior_points, 1)?;
        let cot = prob.energy_cotangent(&tape, quad);
        tape.vjp(&cot)
    };
    let g = deep_ritz_energy_hessian(prob, spec, theta, quad)?;
    let tape = Tape::build(spec, theta, &quad.interior_points, 1)?;
    let cot = prob.energy_cotangent(&tape, quad);
    let c = tape.hessian_contraction(&cot)?;
    fd_hessian_vs(p, theta, grad, |i, j| g.mat[(i, j)] + c[i * p + j])
}

/// Same check for the Poisson PINN loss (G = Gauss-Newton Gramian; for this
/// linear residual G is exactly the D^2 E term).
pub fn ggn_decomposition_check_poisson(
    prob: &PoissonPinn,
    spec: &NetworkSpec,
    theta: &ParamVector,
    quad: &QuadratureSet,
) -> Result<GgnReport> {
    let p = spec.param_count();
    let grad = |th: &ParamVector| -> Result<Vec<f64>> {
        let sys = prob.residual_system(spec, th, quad)?;
        residual_gradient(&sys)
    };
    let sys = prob.residual_system(spec, theta, quad)?;
    let g = gauss_newton_gramian(&sys)?;
    let c = residual_hessian_contraction(&sys)?;
    fd_hessian_vs(p, theta, grad, |i, j| g.mat[(i, j)] + c[i * p + j])
}

/// Exact curvature-correction matrix of a least-squares system:
/// C_ij = sum_rows r_row * d2(row)/(d theta_i d theta_j), via the tapes'
/// second-order contraction. Only valid when the rows' cotangents are the
/// exact residual linearization (true for all systems built here).
///
/// Note: for rows whose cotangents depend on the state (Navier-Stokes
/// convection) this omits the d(cot)/d theta term, so it is exact only for
/// linear-in-jet residuals (Poisson); the deep Ritz path handles the
/// nonlinearity through its own cotangent.
pub fn residual_hessian_contraction(sys: &ResidualSystem) -> Result<Vec<f64>> {
    let p = sys.p_total();
    let offs = sys.block_offsets();
    let mut c = vec![0.0; p * p];
    for (bi, block) in sys.blocks.iter().enumerate() {
        for (ti, tape) in block.tapes.iter().enumerate() {
            let cot = row_cotangent_field(sys, bi, ti, &sys.r);
            if cot.iter().all(|&v| v == 0.0) {
                continue;
            }
            let cb = tape.hessian_contraction(&cot)?;
            let pb = block.p;
            for i in 0..pb {
                for j in 0..pb {
                    c[(offs[bi] + i) * p + (offs[bi] + j)] += cb[i * pb + j];
                }
            }
        }
    }
    Ok(c)
}

fn fd_hessian_vs(
    p: usize,
    theta: &ParamVector,
    grad: impl Fn(&ParamVector) -> Result<Vec<f64>>,
    model: impl Fn(usize, usize) -> f64,
) -> Result<GgnReport> {
    let h = 1e-4;
    let mut scale = 0.0f64;
    let mut res = 0.0f64;
    for q in 0..p {
        let mut tp = theta.clone();
        tp.values[q] += h;
        let gp = grad(&tp)?;
        tp.values[q] -= 2.0 * h;
        let gm = grad(&tp)?;
        for i in 0..p {
            let d2 = (gp[i] - gm[i]) / (2.0 * h);
            scale = scale.max(d2.abs());
            res = res.max((d2 - model(i, q)).abs());
        }
    }
    Ok(GgnReport {
        hessian_scale: scale,
        residual_max: res,
        rel: res / scale.max(f64::MIN_POSITIVE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{sample, BoxDomain, Sampler};
    use crate::net::{init_params, FeatureBasis};
    use crate::problems::PoissonCpinn;

    fn quad2(n: usize, m: usize) -> QuadratureSet {
        sample(&BoxDomain::unit(2), n, m, Sampler::UniformGrid).unwrap()
    }

    #[test]
    fn one_parameter_l2_gramian_is_one_third() {
        // u_theta = theta x on [0,1], L^2 metric: G = [[int x^2]] = 1/3.
        let basis = FeatureBasis::Coordinates { dim: 1 };
        let quad = sample(&BoxDomain::unit(1), 1000, 0, Sampler::UniformGrid).unwrap();
        let frame = basis.feature_frame(&quad.interior_points, 0).unwrap();
        let g = l2_gramian(&frame, quad.interior_weight);
        assert!((g.mat[(0, 0)] - 1.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn linear_model_loss_gradient_analytic() {
        // E = 0.5 |u - x|^2_{L2[0,1]}, u = theta x: dL/dtheta = (theta-1)/3.
        let basis = FeatureBasis::Coordinates { dim: 1 };
        let quad = sample(&BoxDomain::unit(1), 1000, 0, Sampler::UniformGrid).unwrap();
        let frame = basis.feature_frame(&quad.interior_points, 0).unwrap();
        let theta = [0.3];
        let u = frame.apply(&theta);
        let w = quad.interior_weight;
        let mut grad = 0.0;
        for (pt, &x) in quad.interior_points.iter().enumerate() {
            grad += w * (u[pt] - x) * frame.entry(0, pt, 0);
        }
        assert!((grad - (0.3 - 1.0) / 3.0).abs() < 1e-4, "grad {grad}");
    }

    #[test]
    fn poisson_gradient_matches_loss_finite_differences() {
        let prob = PoissonPinn::manufactured(1.0).unwrap();
        let spec = NetworkSpec::new(2, vec![5], 1).unwrap();
        let theta = init_params(&spec, 3);
        let quad = quad2(25, 8);
        let sys = prob.residual_system(&spec, &theta, &quad).unwrap();
        let grad = residual_gradient(&sys).unwrap();
        let h = 1e-6;
        for i in 0..spec.param_count() {
            let mut tp = theta.clone();
            tp.values[i] += h;
            let lp = prob.residual_system(&spec, &tp, &quad).unwrap().loss();
            tp.values[i] -= 2.0 * h;
            let lm = prob.residual_system(&spec, &tp, &quad).unwrap().loss();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "param {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn energy_hessian_equals_gauss_newton_for_linear_residual() {
        // Remark-4.5 identity: two independent assembly routes must agree.
        let prob = PoissonPinn::manufactured(1.0).unwrap();
        let spec = NetworkSpec::new(2, vec![8, 6], 1).unwrap();
        let theta = init_params(&spec, 7);
        let quad = quad2(36, 12);
        let sys = prob.residual_system(&spec, &theta, &quad).unwrap();
        let gn = gauss_newton_gramian(&sys).unwrap();
        let eh = poisson_energy_hessian(&prob, &spec, &theta, &quad).unwrap();
        let scale = gn.max_abs();
        let p = gn.p();
        let mut diff = 0.0f64;
        for i in 0..p {
            for j in 0..p {
                diff = diff.max((gn.mat[(i, j)] - eh.mat[(i, j)]).abs());
            }
        }
        assert!(diff < 1e-12 * scale, "diff {diff} scale {scale}");
        assert!(gn.asymmetry() < 1e-12 * scale);
    }

    #[test]
    fn gramians_symmetric_and_psd() {
        let prob = PoissonPinn::manufactured(1.0).unwrap();
        let spec = NetworkSpec::new(2, vec![6], 1).unwrap();
        let theta = init_params(&spec, 9);
        let quad = quad2(25, 8);
        let sys = prob.residual_system(&spec, &theta, &quad).unwrap();
        let g = gauss_newton_gramian(&sys).unwrap();
        let scale = g.max_abs();
        assert!(g.asymmetry() < 1e-12 * scale);
        let eig = faer::linalg::solvers::SelfAdjointEigen::new(g.mat.as_ref(), faer::Side::Lower)
            .unwrap();
        let s = eig.S();
        let lmax = (0..g.p()).fold(0.0f64, |m, i| m.max(s[i]));
        for i in 0..g.p() {
            assert!(s[i] >= -1e-10 * lmax, "eig {} of lmax {lmax}", s[i]);
        }
    }

    #[test]
    fn matrix_free_products_match_dense() {
        let prob = PoissonPinn::manufactured(1.0).unwrap();
        let spec = NetworkSpec::new(2, vec![6], 1).unwrap();
        let theta = init_params(&spec, 13);
        let quad = quad2(16, 8);
        let sys = prob.residual_system(&spec, &theta, &quad).unwrap();
        let op = JacobianOperator::new(&sys);
        let g = gauss_newton_gramian(&sys).unwrap();
        let p = op.p_total();
        for trial in 0..10 {
            let v: Vec<f64> = (0..p)
                .map(|i| (((i * 37 + trial * 101 + 13) % 19) as f64) * 0.1 - 0.9)
                .collect();
            let gv_free = op.gramian_vec(&v).unwrap();
            let mut gv_dense = vec![0.0; p];
            for i in 0..p {
                let mut acc = 0.0;
                for j in 0..p {
                    acc += g.mat[(i, j)] * v[j];
                }
                gv_dense[i] = acc;
            }
            let scale = gv_dense.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for i in 0..p {
                assert!(
                    (gv_free[i] - gv_dense[i]).abs() < 1e-12 * (1.0 + scale),
                    "trial {trial} comp {i}: {} vs {}",
                    gv_free[i],
                    gv_dense[i]
                );
            }
        }
        // linearity of jvp
        let v: Vec<f64> = (0..p).map(|i| (i as f64 * 0.37).sin()).collect();
        let av: Vec<f64> = v.iter().map(|x| 2.5 * x).collect();
        let jv = op.jvp(&v).unwrap();
        let jav = op.jvp(&av).unwrap();
        for (a, b) in jav.iter().zip(&jv) {
            assert!((a - 2.5 * b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn fisher_gramian_scale_invariant() {
        let prob = SchrodingerRayleigh::harmonic_oscillator().unwrap();
        let spec = NetworkSpec::new(1, vec![8], 1).unwrap();
        let theta = init_params(&spec, 19);
        let quad = sample(&prob.domain, 300, 2, Sampler::UniformGrid).unwrap();
        let g1 = fisher_gramian(&prob, &spec, &theta, &quad).unwrap();
        let mut theta2 = theta.clone();
        let off = spec.layer_offsets()[spec.n_hidden()];
        for v in theta2.values[off..].iter_mut() {
            *v *= 3.0;
        }
        let g2 = fisher_gramian(&prob, &spec, &theta2, &quad).unwrap();
        let scale = g1.max_abs();
        // tangents in directions of rescaled output parameters change, but
        // shared (hidden-layer) blocks must be invariant; compare the hidden
        // block only.
        for i in 0..off {
            for j in 0..off {
                assert!(
                    (g1.mat[(i, j)] - g2.mat[(i, j)]).abs() < 1e-10 * scale,
                    "({i},{j})"
                );
            }
        }
        assert!(g1.asymmetry() < 1e-12 * scale);
    }

    #[test]
    fn lagrange_block_structure_and_cross_hessian() {
        let prob = PoissonCpinn::manufactured().unwrap();
        let specs = [
            NetworkSpec::new(2, vec![4], 1).unwrap(),
            NetworkSpec::new(2, vec![3], 1).unwrap(),
            NetworkSpec::new(2, vec![3], 1).unwrap(),
        ];
        let quad = quad2(16, 8);
        let params = [
            init_params(&specs[0], 1),
            init_params(&specs[1], 2),
            init_params(&specs[2], 3),
        ];
        let tapes = prob.tapes(&specs, &params, &quad).unwrap();
        let g = lagrange_newton_block(&tapes, &quad).unwrap();
        let [pt_, pp, px] = g.block_dims.unwrap();
        // diagonal blocks exactly zero
        for i in 0..pt_ {
            for j in 0..pt_ {
                assert_eq!(g.mat[(i, j)], 0.0);
            }
        }
        for i in 0..pp + px {
            for j in 0..pp + px {
                assert_eq!(g.mat[(pt_ + i, pt_ + j)], 0.0);
            }
        }
        assert!(g.asymmetry() == 0.0);
        // A block vs FD cross-Hessian d2 L / d theta d psi
        let h = 1e-5;
        for i in (0..pt_).step_by(3) {
            for j in (0..pp).step_by(3) {
                let mut pp_ = params.clone();
                pp_[1].values[j] += h;
                let tp = prob.tapes(&specs, &pp_, &quad).unwrap();
                let gp = prob.gradient(&tp, &quad).unwrap();
                pp_[1].values[j] -= 2.0 * h;
                let tm = prob.tapes(&specs, &pp_, &quad).unwrap();
                let gm = prob.gradient(&tm, &quad).unwrap();
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                assert!(
                    (g.mat[(i, pt_ + j)] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                    "A[{i},{j}] = {} vs fd {fd}",
                    g.mat[(i, pt_ + j)]
                );
            }
        }
    }

    #[test]
    fn ggn_decomposition_deep_ritz() {
        let prob = DeepRitzSemilinear::manufactured().unwrap();
        let spec = NetworkSpec::new(1, vec![6], 1).unwrap();
        let theta = init_params(&spec, 29);
        let quad = sample(&BoxDomain::unit(1), 64, 2, Sampler::UniformGrid).unwrap();
        let rep = ggn_decomposition_check_deep_ritz(&prob, &spec, &theta, &quad).unwrap();
        assert!(rep.rel < 1e-4, "GGN decomposition residual {}", rep.rel);
    }

    #[test]
    fn ggn_decomposition_poisson() {
        let prob = PoissonPinn::manufactured(1.0).unwrap();
        let spec = NetworkSpec::new(2, vec![5], 1).unwrap();
        let theta = init_params(&spec, 31);
        let quad = quad2(16, 8);
        let rep = ggn_decomposition_check_poisson(&prob, &spec, &theta, &quad).unwrap();
        assert!(rep.rel < 1e-4, "GGN decomposition residual {}", rep.rel);
    }

    #[test]
    fn linear_parametrization_has_zero_curvature_correction() {
        // last-layer-only training: d_i d_j u = 0, so D^2 L = G to FD accuracy.
        let inner = NetworkSpec::new(1, vec![6], 1).unwrap();
        let basis = FeatureBasis::FrozenMlp {
            spec: inner.clone(),
            frozen: init_params(&inner, 37),
        };
        let quad = sample(&BoxDomain::unit(1), 50, 0, Sampler::UniformGrid).unwrap();
        let frame = basis.feature_frame(&quad.interior_points, 0).unwrap();
        let p = frame.p;
        let w = quad.interior_weight;
        let g = l2_gramian(&frame, w);
        // L = 0.5 |u - x|^2: FD Hessian must equal G.
        let target: Vec<f64> = quad.interior_points.clone();
        let grad = |th: &[f64]| -> Vec<f64> {
            let u = frame.apply(th);
            let mut out = vec![0.0; p];
            for pt in 0..frame.n_points {
                for i in 0..p {
                    out[i] += w * (u[pt] - target[pt]) * frame.entry(0, pt, i);
                }
            }
            out
        };
        let theta = vec![0.2; p];
        let h = 1e-5;
        for q in 0..p {
            let mut tp = theta.clone();
            tp[q] += h;
            let gp = grad(&tp);
            tp[q] -= 2.0 * h;
            let gm = grad(&tp);
            for i in 0..p {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                assert!(
                    (fd - g.mat[(i, q)]).abs() < 1e-7 * (1.0 + fd.abs()),
                    "({i},{q})"
                );
            }
        }
    }
}
