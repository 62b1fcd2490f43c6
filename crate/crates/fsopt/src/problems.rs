//! The five model problems: energies, residuals, Lagrangians, their
//! linearizations along tangent directions, and manufactured solutions.
//!
//! Each manufactured problem self-checks at construction: the stated exact
//! solution must satisfy the PDE (verified with finite differences of the
//! exact field, independently of the jet machinery) to 1e-6.

use crate::domain::{integrate, BoxDomain, QuadratureSet, Region};
use crate::error::{Error, Result};
use crate::net::{NetworkSpec, ParamVector, Tape};
use std::f64::consts::PI;

/// Scalar field given as a plain function of the point coordinates.
pub type ScalarField = fn(&[f64]) -> f64;
/// Planar vector field.
pub type VecField2 = fn(&[f64]) -> [f64; 2];

/// Problem selector used by configs and dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    PoissonPinn,
    DeepRitzSemilinear,
    NavierStokesPinn,
    SchrodingerRayleigh,
    PoissonCpinn,
}

/// Interior/boundary residual values and the (scaled) least-squares loss.
#[derive(Debug, Clone)]
pub struct ResidualEval {
    /// n_interior * channels, channel-major per point.
    pub interior: Vec<f64>,
    /// n_boundary * channels.
    pub boundary: Vec<f64>,
    pub loss: f64,
}

/// One network's parameter block in a residual system, with the forward tapes
/// it was evaluated on (e.g. interior and boundary point sets).
#[derive(Debug)]
pub struct NetBlock {
    pub p: usize,
    pub tapes: Vec<Tape>,
}

/// One scaled-residual row's dependence on one tape: the row is
/// sum over entries of cot . d(jet at pt)/d theta_block.
#[derive(Debug, Clone)]
pub struct RowEntry {
    pub block: usize,
    pub tape: usize,
    pub pt: usize,
    /// Sparse cotangent over jet components: (component index, coefficient).
    pub cot: Vec<(usize, f64)>,
}

/// Discrete least-squares structure at the current state: scaled residual r
/// with r(theta)'s Jacobian rows given as jet cotangents against the tapes.
/// Loss = 0.5 * |r|^2; the Jacobian operator and Gramians are derived from
/// this in the geometry module.
#[derive(Debug)]
pub struct ResidualSystem {
    pub blocks: Vec<NetBlock>,
    pub rows: Vec<Vec<RowEntry>>,
    pub r: Vec<f64>,
}

impl ResidualSystem {
    pub fn p_total(&self) -> usize {
        self.blocks.iter().map(|b| b.p).sum()
    }
    pub fn loss(&self) -> f64 {
        0.5 * self.r.iter().map(|v| v * v).sum::<f64>()
    }
    /// Parameter offsets of each block in the concatenated vector.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.blocks.len());
        let mut acc = 0;
        for b in &self.blocks {
            offs.push(acc);
            acc += b.p;
        }
        offs
    }
}

// ---------------------------------------------------------------------------
// Poisson PINN
// ---------------------------------------------------------------------------

/// 2-D Poisson equation -Laplace(u) = f with Dirichlet data g, as the PINN
/// least-squares loss over interior residual Delta u + f and boundary u - g.
#[derive(Debug, Clone)]
pub struct PoissonPinn {
    pub domain: BoxDomain,
    pub lambda_b: f64,
    pub forcing: ScalarField,
    pub boundary_g: ScalarField,
    pub exact: Option<ScalarField>,
}

fn poisson_u_star(x: &[f64]) -> f64 {
    (PI * x[0]).sin() * (PI * x[1]).sin()
}
fn poisson_f(x: &[f64]) -> f64 {
    2.0 * PI * PI * (PI * x[0]).sin() * (PI * x[1]).sin()
}
fn zero_field(_x: &[f64]) -> f64 {
    0.0
}

impl PoissonPinn {
    /// Manufactured problem on the unit square: u* = sin(pi x) sin(pi y).
    pub fn manufactured(lambda_b: f64) -> Result<Self> {
        Self::with_data(
            BoxDomain::unit(2),
            lambda_b,
            poisson_f,
            zero_field,
            Some(poisson_u_star),
        )
    }

    pub fn with_data(
        domain: BoxDomain,
        lambda_b: f64,
        forcing: ScalarField,
        boundary_g: ScalarField,
        exact: Option<ScalarField>,
    ) -> Result<Self> {
        if lambda_b <= 0.0 {
            return Err(Error::InvalidSpec("lambda_b must be positive".into()));
        }
        let p = Self {
            domain,
            lambda_b,
            forcing,
            boundary_g,
            exact,
        };
        if let Some(u) = exact {
            // independent FD check: Delta u* + f = 0 and u* = g on the faces
            for x in check_grid(&p.domain) {
                let res = fd_laplacian(u, &x) + (forcing)(&x);
                if res.abs() >= 1e-6 {
                    return Err(Error::InvalidSpec(format!(
                        "manufactured Poisson solution violates PDE at {x:?}: residual {res}"
                    )));
                }
            }
            for x in check_boundary(&p.domain) {
                let res = u(&x) - (boundary_g)(&x);
                if res.abs() >= 1e-6 {
                    return Err(Error::InvalidSpec(format!(
                        "manufactured Poisson solution violates boundary data at {x:?}: {res}"
                    )));
                }
            }
        }
        Ok(p)
    }

    /// Interior residual Delta u + f, boundary residual u - g, and
    /// L = 0.5 (|O|/N) sum r^2 + 0.5 lambda_b (|dO|/M) sum r_b^2.
    pub fn loss(&self, spec: &NetworkSpec, theta: &ParamVector, quad: &QuadratureSet) -> Result<ResidualEval> {
        let sys = self.residual_system(spec, theta, quad)?;
        let n = quad.n_interior();
        let wi = quad.interior_weight.sqrt();
        let wb = (self.lambda_b * quad.boundary_weight).sqrt();
        let interior: Vec<f64> = sys.r[..n].iter().map(|v| v / wi).collect();
        let boundary: Vec<f64> = sys.r[n..].iter().map(|v| v / wb).collect();
        Ok(ResidualEval {
            interior,
            boundary,
            loss: sys.loss(),
        })
    }

    /// Scaled least-squares system at theta (Jacobian rows as jet cotangents).
    pub fn residual_system(
        &self,
        spec: &NetworkSpec,
        theta: &ParamVector,
        quad: &QuadratureSet,
    ) -> Result<ResidualSystem> {
        let tape_i = Tape::build(spec, theta, &quad.interior_points, 2)?;
        let tape_b = Tape::build(spec, theta, &quad.boundary_points, 0)?;
        let jet_i = tape_i.output_jet();
        let jet_b = tape_b.output_jet();
        let li = tape_i.layout().clone();
        let n = quad.n_interior();
        let m = quad.n_boundary();
        let wi = quad.interior_weight.sqrt();
        let wb = (self.lambda_b * quad.boundary_weight).sqrt();
        let lap_comps: Vec<usize> = (0..2).map(|a| li.second(a, a)).collect();

        let mut rows = Vec::with_capacity(n + m);
        let mut r = Vec::with_capacity(n + m);
        for pt in 0..n {
            let x = &quad.interior_points[pt * 2..pt * 2 + 2];
            r.push(wi * (jet_i.laplacian(pt, 0) + (self.forcing)(x)));
            rows.push(vec![RowEntry {
                block: 0,
                tape: 0,
                pt,
                cot: lap_comps.iter().map(|&c| (c, wi)).collect(),
            }]);
        }
        for pt in 0..m {
            let x = &quad.boundary_points[pt * 2..pt * 2 + 2];
            r.push(wb * (jet_b.value(pt, 0) - (self.boundary_g)(x)));
            rows.push(vec![RowEntry {
                block: 0,
                tape: 1,
                pt,
                cot: vec![(0, wb)],
            }]);
        }
        Ok(ResidualSystem {
            blocks: vec![NetBlock {
                p: spec.param_count(),
                tapes: vec![tape_i, tape_b],
            }],
            rows,
            r,
        })
    }
}

// ---------------------------------------------------------------------------
// Deep Ritz semilinear
// ---------------------------------------------------------------------------

/// 1-D semilinear deep Ritz problem: E(u) = int 0.5|u'|^2 + 0.25 u^4 - f u,
/// with natural (Neumann) boundary conditions. Euler-Lagrange equation:
/// -u'' + u^3 = f with u' = 0 on the boundary.
#[derive(Debug, Clone)]
pub struct DeepRitzSemilinear {
    pub domain: BoxDomain,
    pub forcing: ScalarField,
    pub exact: Option<ScalarField>,
}

fn ritz_u_star(x: &[f64]) -> f64 {
    (PI * x[0]).cos()
}
fn ritz_f(x: &[f64]) -> f64 {
    let c = (PI * x[0]).cos();
    PI * PI * c + c * c * c
}

impl DeepRitzSemilinear {
    /// Manufactured problem on [0, 1]: u* = cos(pi x), natural BCs hold
    /// because u*'(0) = u*'(1) = 0.
    pub fn manufactured() -> Result<Self> {
        Self::with_data(BoxDomain::unit(1), ritz_f, Some(ritz_u_star))
    }

    pub fn with_data(
        domain: BoxDomain,
        forcing: ScalarField,
        exact: Option<ScalarField>,
    ) -> Result<Self> {
        let p = Self {
            domain,
            forcing,
            exact,
        };
        if let Some(u) = exact {
            for x in check_grid(&p.domain) {
                let res = -fd_laplacian(u, &x) + u(&x).powi(3) - (forcing)(&x);
                if res.abs() >= 1e-6 {
                    return Err(Error::InvalidSpec(format!(
                        "manufactured deep Ritz solution violates PDE at {x:?}: {res}"
                    )));
                }
            }
            for x in check_boundary(&p.domain) {
                let du = fd_grad(u, &x, 0);
                if du.abs() >= 1e-6 {
                    return Err(Error::InvalidSpec(format!(
                        "manufactured deep Ritz solution violates natural BC at {x:?}: u' = {du}"
                    )));
                }
            }
        }
        Ok(p)
    }

    /// E(theta) by quadrature.
    pub fn energy(&self, spec: &NetworkSpec, theta: &ParamVector, quad: &QuadratureSet) -> Result<f64> {
        let tape = Tape::build(spec, theta, &quad.interior_points, 1)?;
        let jet = tape.output_jet();
        let vals: Vec<f64> = (0..quad.n_interior())
            .map(|pt| {
                let u = jet.value(pt, 0);
                let du = jet.grad(pt, 0, 0);
                let x = &quad.interior_points[pt..pt + 1];
                0.5 * du * du + 0.25 * u * u * u * u - (self.forcing)(x) * u
            })
            .collect();
        integrate(&vals, quad, Region::Interior)
    }

    /// Gradient cotangent of E against the order-1 jet at every interior point:
    /// DE(u)v = int u' v' + u^3 v - f v.
    pub fn energy_cotangent(&self, tape: &Tape, quad: &QuadratureSet) -> Vec<f64> {
        let jet = tape.output_jet();
        let k = tape.layout().len();
        let gx = tape.layout().first(0);
        let w = quad.interior_weight;
        let mut cot = vec![0.0; quad.n_interior() * k];
        for pt in 0..quad.n_interior() {
            let u = jet.value(pt, 0);
            let x = &quad.interior_points[pt..pt + 1];
            cot[pt * k] = w * (u * u * u - (self.forcing)(x));
            cot[pt * k + gx] = w * jet.grad(pt, 0, 0);
        }
        cot
    }

    /// Hessian bilinear form D^2 E(u)(v, w) = (v', w') + 3 (u^2 v, w), from
    /// sampled values/derivatives of the two directions.
    #[allow(clippy::too_many_arguments)]
    pub fn hessian_form(
        &self,
        u_vals: &[f64],
        v_vals: &[f64],
        v_grads: &[f64],
        w_vals: &[f64],
        w_grads: &[f64],
        quad: &QuadratureSet,
    ) -> Result<f64> {
        let n = quad.n_interior();
        if [u_vals, v_vals, v_grads, w_vals, w_grads]
            .iter()
            .any(|a| a.len() != n)
        {
            return Err(Error::DimensionMismatch("hessian_form field lengths".into()));
        }
        let vals: Vec<f64> = (0..n)
            .map(|i| v_grads[i] * w_grads[i] + 3.0 * u_vals[i] * u_vals[i] * v_vals[i] * w_vals[i])
            .collect();
        integrate(&vals, quad, Region::Interior)
    }
}

// ---------------------------------------------------------------------------
// Navier-Stokes PINN (stream-function ansatz)
// ---------------------------------------------------------------------------

/// Stationary 2-D Navier-Stokes: -Laplace(u) + (u . grad) u + grad p = f,
/// div u = 0, u = g on the boundary. The velocity is represented through a
/// stream function phi with u = (d_y phi, -d_x phi), so div u = 0 exactly;
/// the pressure is a separate scalar network, gauge-fixed by subtracting its
/// quadrature mean in reports.
#[derive(Debug, Clone)]
pub struct NavierStokesPinn {
    pub domain: BoxDomain,
    pub lambda_b: f64,
    pub forcing: VecField2,
    pub exact_velocity: Option<VecField2>,
}

fn taylor_green_u(x: &[f64]) -> [f64; 2] {
    [
        (PI * x[0]).sin() * (PI * x[1]).cos(),
        -(PI * x[0]).cos() * (PI * x[1]).sin(),
    ]
}
fn taylor_green_f(x: &[f64]) -> [f64; 2] {
    let u = taylor_green_u(x);
    [
        2.0 * PI * PI * u[0] + 0.5 * PI * (2.0 * PI * x[0]).sin(),
        2.0 * PI * PI * u[1] + 0.5 * PI * (2.0 * PI * x[1]).sin(),
    ]
}

impl NavierStokesPinn {
    /// Taylor-Green-type manufactured flow on the unit square:
    /// u* = (sin pi x cos pi y, -cos pi x sin pi y), p* = 0,
    /// f = -Laplace(u*) + (u* . grad) u*.
    pub fn manufactured(lambda_b: f64) -> Result<Self> {
        Self::with_data(
            BoxDomain::unit(2),
            lambda_b,
            taylor_green_f,
            Some(taylor_green_u),
        )
    }

    pub fn with_data(
        domain: BoxDomain,
        lambda_b: f64,
        forcing: VecField2,
        exact_velocity: Option<VecField2>,
    ) -> Result<Self> {
        if lambda_b <= 0.0 {
            return Err(Error::InvalidSpec("lambda_b must be positive".into()));
        }
        let p = Self {
            domain,
            lambda_b,
            forcing,
            exact_velocity,
        };
        if let Some(u) = exact_velocity {
            // FD check of -Lap(u*) + (u* . grad)u* - f = 0 (p* = 0), per channel.
            for x in check_grid(&p.domain) {
                let uv = u(&x);
                let f = (forcing)(&x);
                for ch in 0..2 {
                    let comp = move |y: &[f64]| u(y)[ch];
                    let lap = fd_laplacian(comp, &x);
                    let conv = uv[0] * fd_grad(comp, &x, 0) + uv[1] * fd_grad(comp, &x, 1);
                    let res = -lap + conv - f[ch];
                    if res.abs() >= 1e-6 {
                        return Err(Error::InvalidSpec(format!(
                            "manufactured NS solution violates momentum eq (ch {ch}) at {x:?}: {res}"
                        )));
                    }
                }
                // divergence of the exact field
                let div = fd_grad(move |y: &[f64]| u(y)[0], &x, 0)
                    + fd_grad(move |y: &[f64]| u(y)[1], &x, 1);
                if div.abs() >= 1e-6 {
                    return Err(Error::InvalidSpec(format!(
                        "manufactured NS velocity is not divergence-free at {x:?}: {div}"
                    )));
                }
            }
        }
        Ok(p)
    }

    /// Velocity from the stream-function jet at one point: (phi_y, -phi_x).
    pub fn velocity_at(phi_tape: &Tape, pt: usize) -> [f64; 2] {
        let jet = phi_tape.output_jet();
        [jet.grad(pt, 0, 1), -jet.grad(pt, 0, 0)]
    }

    /// Interior momentum residual (2 channels) and boundary velocity residual
    /// (2 channels), with the least-squares loss.
    pub fn loss(
        &self,
        spec_phi: &NetworkSpec,
        theta_phi: &ParamVector,
        spec_p: &NetworkSpec,
        theta_p: &ParamVector,
        quad: &QuadratureSet,
    ) -> Result<ResidualEval> {
        let sys = self.residual_system(spec_phi, theta_phi, spec_p, theta_p, quad)?;
        let n2 = 2 * quad.n_interior();
        let wi = quad.interior_weight.sqrt();
        let wb = (self.lambda_b * quad.boundary_weight).sqrt();
        Ok(ResidualEval {
            interior: sys.r[..n2].iter().map(|v| v / wi).collect(),
            boundary: sys.r[n2..].iter().map(|v| v / wb).collect(),
            loss: sys.loss(),
        })
    }

    /// Scaled least-squares system at (theta_phi, theta_p). Blocks: stream
    /// function (order-3 interior tape, order-1 boundary tape), pressure
    /// (order-1 interior tape).
    pub fn residual_system(
        &self,
        spec_phi: &NetworkSpec,
        theta_phi: &ParamVector,
        spec_p: &NetworkSpec,
        theta_p: &ParamVector,
        quad: &QuadratureSet,
    ) -> Result<ResidualSystem> {
        let tape_phi_i = Tape::build(spec_phi, theta_phi, &quad.interior_points, 3)?;
        let tape_phi_b = Tape::build(spec_phi, theta_phi, &quad.boundary_points, 1)?;
        let tape_p_i = Tape::build(spec_p, theta_p, &quad.interior_points, 1)?;
        let l3 = tape_phi_i.layout().clone();
        let l1 = tape_p_i.layout().clone();
        let phi = tape_phi_i.output_jet();
        let pjet = tape_p_i.output_jet();
        let phib = tape_phi_b.output_jet();
        let n = quad.n_interior();
        let m = quad.n_boundary();
        let wi = quad.interior_weight.sqrt();
        let wb = (self.lambda_b * quad.boundary_weight).sqrt();

        // component indices in the order-3 layout
        let cx = l3.first(0);
        let cy = l3.first(1);
        let cxx = l3.second(0, 0);
        let cxy = l3.second(0, 1);
        let cyy = l3.second(1, 1);
        let cxxx = l3.third(0, 0, 0);
        let cxxy = l3.third(0, 0, 1);
        let cxyy = l3.third(0, 1, 1);
        let cyyy = l3.third(1, 1, 1);
        let px = l1.first(0);
        let py = l1.first(1);

        let mut rows = Vec::with_capacity(2 * (n + m));
        let mut r = Vec::with_capacity(2 * (n + m));
        for pt in 0..n {
            let x = &quad.interior_points[pt * 2..pt * 2 + 2];
            let j = phi.comps_at(pt, 0);
            let (u1, u2) = (j[cy], -j[cx]);
            let f = (self.forcing)(x);
            // R1 = -(phi_xxy + phi_yyy) + u1 phi_xy + u2 phi_yy + p_x - f1
            let r1 = -(j[cxxy] + j[cyyy]) + u1 * j[cxy] + u2 * j[cyy] + pjet.grad(pt, 0, 0) - f[0];
            r.push(wi * r1);
            rows.push(vec![
                RowEntry {
                    block: 0,
                    tape: 0,
                    pt,
                    cot: vec![
                        (cy, wi * j[cxy]),
                        (cx, -wi * j[cyy]),
                        (cxy, wi * u1),
                        (cyy, wi * u2),
                        (cxxy, -wi),
                        (cyyy, -wi),
                    ],
                },
                RowEntry {
                    block: 1,
                    tape: 0,
                    pt,
                    cot: vec![(px, wi)],
                },
            ]);
            // R2 = (phi_xxx + phi_xyy) - u1 phi_xx - u2 phi_xy + p_y - f2
            let r2 = (j[cxxx] + j[cxyy]) - u1 * j[cxx] - u2 * j[cxy] + pjet.grad(pt, 0, 1) - f[1];
            r.push(wi * r2);
            rows.push(vec![
                RowEntry {
                    block: 0,
                    tape: 0,
                    pt,
                    cot: vec![
                        (cy, -wi * j[cxx]),
                        (cx, wi * j[cxy]),
                        (cxx, -wi * u1),
                        (cxy, -wi * u2),
                        (cxxx, wi),
                        (cxyy, wi),
                    ],
                },
                RowEntry {
                    block: 1,
                    tape: 0,
                    pt,
                    cot: vec![(py, wi)],
                },
            ]);
        }
        let b1 = tape_phi_b.layout().first(0);
        let b2 = tape_phi_b.layout().first(1);
        for pt in 0..m {
            let x = &quad.boundary_points[pt * 2..pt * 2 + 2];
            let ustar = self
                .exact_velocity
                .map(|u| u(x))
                .unwrap_or([0.0, 0.0]);
            let ub = [phib.grad(pt, 0, 1), -phib.grad(pt, 0, 0)];
            r.push(wb * (ub[0] - ustar[0]));
            rows.push(vec![RowEntry {
                block: 0,
                tape: 1,
                pt,
                cot: vec![(b2, wb)],
            }]);
            r.push(wb * (ub[1] - ustar[1]));
            rows.push(vec![RowEntry {
                block: 0,
                tape: 1,
                pt,
                cot: vec![(b1, -wb)],
            }]);
        }
        Ok(ResidualSystem {
            blocks: vec![
                NetBlock {
                    p: spec_phi.param_count(),
                    tapes: vec![tape_phi_i, tape_phi_b],
                },
                NetBlock {
                    p: spec_p.param_count(),
                    tapes: vec![tape_p_i],
                },
            ],
            rows,
            r,
        })
    }
}

// ---------------------------------------------------------------------------
// Schroedinger Rayleigh quotient
// ---------------------------------------------------------------------------

/// 1-D model Hamiltonian H = -0.5 d^2/dx^2 + V(x).
#[derive(Debug, Clone, Copy)]
pub struct Hamiltonian1D {
    pub potential: ScalarField,
}

fn harmonic_potential(x: &[f64]) -> f64 {
    0.5 * x[0] * x[0]
}

impl Hamiltonian1D {
    pub fn harmonic() -> Self {
        Self {
            potential: harmonic_potential,
        }
    }
}

/// Ground-state problem as Rayleigh-quotient minimization over wavefunctions.
#[derive(Debug, Clone)]
pub struct SchrodingerRayleigh {
    pub domain: BoxDomain,
    pub hamiltonian: Hamiltonian1D,
}

impl SchrodingerRayleigh {
    /// Harmonic oscillator on [-6, 6] (exact ground energy 0.5).
    pub fn harmonic_oscillator() -> Result<Self> {
        Ok(Self {
            domain: BoxDomain::new(vec![-6.0], vec![6.0])?,
            hamiltonian: Hamiltonian1D::harmonic(),
        })
    }

    /// Degenerate-normalization threshold: |psi|^2 < 1e-12 |Omega|.
    pub fn norm_threshold(&self) -> f64 {
        1e-12 * self.domain.volume()
    }

    /// Kinetic (integrated-by-parts) and potential quadrature terms and the
    /// squared norm, from an order-1 tape: (A, B) with E = A / B.
    pub fn energy_parts(&self, tape: &Tape, quad: &QuadratureSet) -> Result<(f64, f64)> {
        let jet = tape.output_jet();
        let n = quad.n_interior();
        let mut av = Vec::with_capacity(n);
        let mut bv = Vec::with_capacity(n);
        for pt in 0..n {
            let psi = jet.value(pt, 0);
            let dpsi = jet.grad(pt, 0, 0);
            let x = &quad.interior_points[pt..pt + 1];
            av.push(0.5 * dpsi * dpsi + (self.hamiltonian.potential)(x) * psi * psi);
            bv.push(psi * psi);
        }
        Ok((
            integrate(&av, quad, Region::Interior)?,
            integrate(&bv, quad, Region::Interior)?,
        ))
    }

    /// E(psi) = (int 0.5 |psi'|^2 + V psi^2) / int psi^2.
    pub fn rayleigh_quotient(
        &self,
        spec: &NetworkSpec,
        theta: &ParamVector,
        quad: &QuadratureSet,
    ) -> Result<f64> {
        let tape = Tape::build(spec, theta, &quad.interior_points, 1)?;
        let (a, b) = self.energy_parts(&tape, quad)?;
        if b < self.norm_threshold() {
            return Err(Error::DegenerateNormalization {
                norm_sq: b,
                threshold: self.norm_threshold(),
            });
        }
        Ok(a / b)
    }

    /// Gradient cotangent of the quotient against the order-1 jets:
    /// dE . v = (A'(v) - E B'(v)) / B with A'(v) = int psi' v' + 2 V psi v,
    /// B'(v) = 2 int psi v.
    pub fn quotient_cotangent(&self, tape: &Tape, quad: &QuadratureSet) -> Result<(f64, Vec<f64>)> {
        let (a, b) = self.energy_parts(tape, quad)?;
        if b < self.norm_threshold() {
            return Err(Error::DegenerateNormalization {
                norm_sq: b,
                threshold: self.norm_threshold(),
            });
        }
        let e = a / b;
        let jet = tape.output_jet();
        let k = tape.layout().len();
        let gx = tape.layout().first(0);
        let w = quad.interior_weight;
        let mut cot = vec![0.0; quad.n_interior() * k];
        for pt in 0..quad.n_interior() {
            let psi = jet.value(pt, 0);
            let x = &quad.interior_points[pt..pt + 1];
            let v = (self.hamiltonian.potential)(x);
            cot[pt * k] = w * (2.0 * v * psi - 2.0 * e * psi) / b;
            cot[pt * k + gx] = w * jet.grad(pt, 0, 0) / b;
        }
        Ok((e, cot))
    }
}

/// Dense finite-difference eigensolver oracle for a 1-D Hamiltonian with
/// Dirichlet walls: returns (ground energy, normalized eigenvector, nodes).
pub fn fd_ground_state(
    domain: &BoxDomain,
    n: usize,
    potential: ScalarField,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if domain.dim() != 1 {
        return Err(Error::InvalidSpec("fd_ground_state is 1-D only".into()));
    }
    let (lo, hi) = (domain.lower[0], domain.upper[0]);
    let h = (hi - lo) / (n + 1) as f64;
    let xs: Vec<f64> = (1..=n).map(|i| lo + i as f64 * h).collect();
    let mut m = faer::Mat::<f64>::zeros(n, n);
    let kin = 0.5 / (h * h);
    for i in 0..n {
        m[(i, i)] = 2.0 * kin + potential(&xs[i..i + 1]);
        if i + 1 < n {
            m[(i, i + 1)] = -kin;
            m[(i + 1, i)] = -kin;
        }
    }
    let eig = faer::linalg::solvers::SelfAdjointEigen::new(m.as_ref(), faer::Side::Lower)
        .map_err(|e| Error::SolverFailure(format!("eigendecomposition failed: {e:?}")))?;
    let s = eig.S();
    let u = eig.U();
    let mut idx = 0;
    for i in 1..n {
        if s[i] < s[idx] {
            idx = i;
        }
    }
    let mut psi: Vec<f64> = (0..n).map(|i| u[(i, idx)]).collect();
    let norm: f64 = (psi.iter().map(|v| v * v).sum::<f64>() * h).sqrt();
    for v in psi.iter_mut() {
        *v /= norm;
    }
    Ok((s[idx], psi, xs))
}

// ---------------------------------------------------------------------------
// Poisson CPINN (saddle-point Lagrangian)
// ---------------------------------------------------------------------------

/// Competitive PINN for the Poisson problem: three networks u_theta (primal),
/// lambda_psi (interior multiplier), mu_xi (boundary multiplier), and the
/// Lagrangian L(u, lambda, mu) = (lambda, f + Lap u)_Omega + (mu, u - g)_dOmega.
/// Its unique saddle point is (u*, 0, 0).
#[derive(Debug, Clone)]
pub struct PoissonCpinn {
    pub domain: BoxDomain,
    pub forcing: ScalarField,
    pub boundary_g: ScalarField,
    pub exact: Option<ScalarField>,
}

impl PoissonCpinn {
    pub fn manufactured() -> Result<Self> {
        // reuse the Poisson self-check
        let p = PoissonPinn::manufactured(1.0)?;
        Ok(Self {
            domain: p.domain,
            forcing: p.forcing,
            boundary_g: p.boundary_g,
            exact: p.exact,
        })
    }

    /// Tapes for the three networks at the current state:
    /// u on interior (order 2) and boundary (order 0), lambda on interior,
    /// mu on boundary.
    pub fn tapes(
        &self,
        specs: &[NetworkSpec; 3],
        params: &[ParamVector; 3],
        quad: &QuadratureSet,
    ) -> Result<CpinnTapes> {
        Ok(CpinnTapes {
            u_interior: Tape::build(&specs[0], &params[0], &quad.interior_points, 2)?,
            u_boundary: Tape::build(&specs[0], &params[0], &quad.boundary_points, 0)?,
            lambda_interior: Tape::build(&specs[1], &params[1], &quad.interior_points, 0)?,
            mu_boundary: Tape::build(&specs[2], &params[2], &quad.boundary_points, 0)?,
        })
    }

    /// Quadrature value of the Lagrangian.
    pub fn lagrangian(&self, tapes: &CpinnTapes, quad: &QuadratureSet) -> Result<f64> {
        let u_i = tapes.u_interior.output_jet();
        let u_b = tapes.u_boundary.output_jet();
        let lam = tapes.lambda_interior.output_jet();
        let mu = tapes.mu_boundary.output_jet();
        let vi: Vec<f64> = (0..quad.n_interior())
            .map(|pt| {
                let x = &quad.interior_points[pt * 2..pt * 2 + 2];
                lam.value(pt, 0) * ((self.forcing)(x) + u_i.laplacian(pt, 0))
            })
            .collect();
        let vb: Vec<f64> = (0..quad.n_boundary())
            .map(|pt| {
                let x = &quad.boundary_points[pt * 2..pt * 2 + 2];
                mu.value(pt, 0) * (u_b.value(pt, 0) - (self.boundary_g)(x))
            })
            .collect();
        Ok(integrate(&vi, quad, Region::Interior)? + integrate(&vb, quad, Region::Boundary)?)
    }

    /// Gradient of the Lagrangian with respect to all three parameter blocks,
    /// concatenated (theta, psi, xi).
    pub fn gradient(&self, tapes: &CpinnTapes, quad: &QuadratureSet) -> Result<Vec<f64>> {
        let u_i = tapes.u_interior.output_jet();
        let u_b = tapes.u_boundary.output_jet();
        let lam = tapes.lambda_interior.output_jet();
        let mu = tapes.mu_boundary.output_jet();
        let li = tapes.u_interior.layout().clone();
        let ki = li.len();
        let wi = quad.interior_weight;
        let wb = quad.boundary_weight;
        let lap_comps: Vec<usize> = (0..2).map(|a| li.second(a, a)).collect();

        // d/d theta: (lambda, Lap d_theta u)_Omega + (mu, d_theta u)_dOmega
        let mut cot_ui = vec![0.0; quad.n_interior() * ki];
        for pt in 0..quad.n_interior() {
            for &c in &lap_comps {
                cot_ui[pt * ki + c] = wi * lam.value(pt, 0);
            }
        }
        let mut g_theta = tapes.u_interior.vjp(&cot_ui)?;
        let mut cot_ub = vec![0.0; quad.n_boundary()];
        for (pt, c) in cot_ub.iter_mut().enumerate() {
            *c = wb * mu.value(pt, 0);
        }
        let g_theta_b = tapes.u_boundary.vjp(&cot_ub)?;
        for (a, b) in g_theta.iter_mut().zip(&g_theta_b) {
            *a += b;
        }
        // d/d psi: (d_psi lambda, f + Lap u)_Omega
        let mut cot_lam = vec![0.0; quad.n_interior()];
        for (pt, c) in cot_lam.iter_mut().enumerate() {
            let x = &quad.interior_points[pt * 2..pt * 2 + 2];
            *c = wi * ((self.forcing)(x) + u_i.laplacian(pt, 0));
        }
        let g_psi = tapes.lambda_interior.vjp(&cot_lam)?;
        // d/d xi: (d_xi mu, u - g)_dOmega
        let mut cot_mu = vec![0.0; quad.n_boundary()];
        for (pt, c) in cot_mu.iter_mut().enumerate() {
            let x = &quad.boundary_points[pt * 2..pt * 2 + 2];
            *c = wb * (u_b.value(pt, 0) - (self.boundary_g)(x));
        }
        let g_xi = tapes.mu_boundary.vjp(&cot_mu)?;

        let mut g = g_theta;
        g.extend_from_slice(&g_psi);
        g.extend_from_slice(&g_xi);
        Ok(g)
    }
}

/// Forward tapes of the three CPINN networks at one state.
#[derive(Debug)]
pub struct CpinnTapes {
    pub u_interior: Tape,
    pub u_boundary: Tape,
    pub lambda_interior: Tape,
    pub mu_boundary: Tape,
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

/// Interior check grid (construction-time PDE self-checks).
fn check_grid(domain: &BoxDomain) -> Vec<Vec<f64>> {
    let d = domain.dim();
    let m = 9usize;
    let mut pts = Vec::new();
    let mut idx = vec![0usize; d];
    loop {
        let mut x = Vec::with_capacity(d);
        for a in 0..d {
            let t = (idx[a] as f64 + 0.5) / m as f64;
            x.push(domain.lower[a] + t * (domain.upper[a] - domain.lower[a]));
        }
        pts.push(x);
        let mut carry = true;
        for v in idx.iter_mut().rev() {
            if carry {
                *v += 1;
                if *v < m {
                    carry = false;
                } else {
                    *v = 0;
                }
            }
        }
        if carry {
            break;
        }
    }
    pts
}

/// A few points on each face (boundary self-checks).
fn check_boundary(domain: &BoxDomain) -> Vec<Vec<f64>> {
    let d = domain.dim();
    let mut pts = Vec::new();
    for axis in 0..d {
        for side in 0..2 {
            for s in 0..5 {
                let mut x: Vec<f64> = (0..d)
                    .map(|a| {
                        let t = (s as f64 + 0.5) / 5.0;
                        domain.lower[a] + t * (domain.upper[a] - domain.lower[a])
                    })
                    .collect();
                x[axis] = if side == 0 {
                    domain.lower[axis]
                } else {
                    domain.upper[axis]
                };
                pts.push(x);
            }
        }
    }
    pts
}

fn fd_laplacian(f: impl Fn(&[f64]) -> f64, x: &[f64], ) -> f64 {
    let h = 1e-4;
    let mut acc = 0.0;
    let f0 = f(x);
    for a in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[a] += h;
        xm[a] -= h;
        acc += (f(&xp) - 2.0 * f0 + f(&xm)) / (h * h);
    }
    acc
}

fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], axis: usize) -> f64 {
    let h = 1e-6;
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[axis] += h;
    xm[axis] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{sample, Sampler};
    use crate::net::init_params;

    fn quad2(n: usize, m: usize) -> QuadratureSet {
        sample(&BoxDomain::unit(2), n, m, Sampler::UniformGrid).unwrap()
    }

    #[test]
    fn manufactured_problems_self_check() {
        PoissonPinn::manufactured(1.0).unwrap();
        DeepRitzSemilinear::manufactured().unwrap();
        NavierStokesPinn::manufactured(1.0).unwrap();
        PoissonCpinn::manufactured().unwrap();
    }

    #[test]
    fn wrong_manufactured_forcing_is_rejected() {
        // f = pi^2 u* (instead of 2 pi^2 u*) must fail the construction check.
        fn wrong_f(x: &[f64]) -> f64 {
            PI * PI * (PI * x[0]).sin() * (PI * x[1]).sin()
        }
        let r = PoissonPinn::with_data(
            BoxDomain::unit(2),
            1.0,
            wrong_f,
            zero_field,
            Some(poisson_u_star),
        );
        assert!(r.is_err());
    }

    #[test]
    fn poisson_zero_net_zero_data_has_zero_loss() {
        // u_theta = 0 (zero params), f = 0, g = 0 -> L = 0.
        let prob =
            PoissonPinn::with_data(BoxDomain::unit(2), 1.0, zero_field, zero_field, None).unwrap();
        let spec = NetworkSpec::new(2, vec![4], 1).unwrap();
        let theta = ParamVector::zeros(spec.param_count());
        let quad = quad2(16, 8);
        let ev = prob.loss(&spec, &theta, &quad).unwrap();
        assert_eq!(ev.loss, 0.0);
        assert!(ev.interior.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn poisson_constant_one_boundary_loss() {
        // u = 1 via output bias; f = 0, g = 0: L = 0.5 * lambda_b * 4.
        let prob =
            PoissonPinn::with_data(BoxDomain::unit(2), 1.0, zero_field, zero_field, None).unwrap();
        let spec = NetworkSpec::new(2, vec![3], 1).unwrap();
        let mut theta = ParamVector::zeros(spec.param_count());
        *theta.values.last_mut().unwrap() = 1.0;
        let quad = quad2(16, 8);
        let ev = prob.loss(&spec, &theta, &quad).unwrap();
        assert!((ev.loss - 0.5 * 4.0).abs() < 1e-12, "loss {}", ev.loss);
    }

    #[test]
    fn poisson_loss_nonnegative_and_matches_system() {
        let prob = PoissonPinn::manufactured(1.0).unwrap();
        let spec = NetworkSpec::new(2, vec![6], 1).unwrap();
        let theta = init_params(&spec, 3);
        let quad = quad2(25, 8);
        let ev = prob.loss(&spec, &theta, &quad).unwrap();
        assert!(ev.loss > 0.0);
        // recompute from unscaled residuals
        let wi = quad.interior_weight;
        let wb = quad.boundary_weight;
        let li: f64 = ev.interior.iter().map(|r| r * r).sum();
        let lb: f64 = ev.boundary.iter().map(|r| r * r).sum();
        let manual = 0.5 * wi * li + 0.5 * prob.lambda_b * wb * lb;
        assert!((ev.loss - manual).abs() < 1e-12 * (1.0 + manual));
    }

    #[test]
    fn deep_ritz_constant_energy() {
        // u = c, f = 1 on [0,1]: E = c^4/4 - c.
        fn one_field(_x: &[f64]) -> f64 {
            1.0
        }
        let prob = DeepRitzSemilinear::with_data(BoxDomain::unit(1), one_field, None).unwrap();
        let spec = NetworkSpec::new(1, vec![3], 1).unwrap();
        let c = 1.7;
        let mut theta = ParamVector::zeros(spec.param_count());
        *theta.values.last_mut().unwrap() = c;
        let quad = sample(&BoxDomain::unit(1), 64, 2, Sampler::UniformGrid).unwrap();
        let e = prob.energy(&spec, &theta, &quad).unwrap();
        assert!((e - (c.powi(4) / 4.0 - c)).abs() < 1e-12, "E {e}");
    }

    #[test]
    fn deep_ritz_hessian_form_symmetric_and_psd() {
        let prob = DeepRitzSemilinear::manufactured().unwrap();
        let quad = sample(&BoxDomain::unit(1), 32, 2, Sampler::UniformGrid).unwrap();
        let n = quad.n_interior();
        let u: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let v: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos()).collect();
        let dv: Vec<f64> = (0..n).map(|i| (i as f64 * 0.2).sin() - 0.4).collect();
        let w: Vec<f64> = (0..n).map(|i| (i as f64 * 1.1).sin() + 0.1).collect();
        let dw: Vec<f64> = (0..n).map(|i| (i as f64 * 0.9).cos() * 0.6).collect();
        let ab = prob.hessian_form(&u, &v, &dv, &w, &dw, &quad).unwrap();
        let ba = prob.hessian_form(&u, &w, &dw, &v, &dv, &quad).unwrap();
        assert_eq!(ab, ba);
        let vv = prob.hessian_form(&u, &v, &dv, &v, &dv, &quad).unwrap();
        assert!(vv >= 0.0);
    }

    #[test]
    fn ns_stream_function_is_divergence_free() {
        // div u = d_x(phi_y) + d_y(-phi_x) = 0 identically for any theta.
        let spec = NetworkSpec::new(2, vec![7, 5], 1).unwrap();
        let theta = init_params(&spec, 21);
        let quad = quad2(25, 0);
        let tape = Tape::build(&spec, &theta, &quad.interior_points, 2).unwrap();
        let jet = tape.output_jet();
        for pt in 0..quad.n_interior() {
            // u1_x + u2_y = phi_yx - phi_xy
            let div = jet.hessian(pt, 0, 1, 0) - jet.hessian(pt, 0, 0, 1);
            assert!(div.abs() < 1e-10);
        }
    }

    #[test]
    fn ns_zero_state_zero_forcing_zero_residual() {
        fn zf(_x: &[f64]) -> [f64; 2] {
            [0.0, 0.0]
        }
        let prob = NavierStokesPinn::with_data(BoxDomain::unit(2), 1.0, zf, None).unwrap();
        let sphi = NetworkSpec::new(2, vec![4], 1).unwrap();
        let sp = NetworkSpec::new(2, vec![4], 1).unwrap();
        let quad = quad2(9, 8);
        let ev = prob
            .loss(
                &sphi,
                &ParamVector::zeros(sphi.param_count()),
                &sp,
                &ParamVector::zeros(sp.param_count()),
                &quad,
            )
            .unwrap();
        assert_eq!(ev.loss, 0.0);
    }

    #[test]
    fn rayleigh_scale_invariance() {
        let prob = SchrodingerRayleigh::harmonic_oscillator().unwrap();
        let spec = NetworkSpec::new(1, vec![8], 1).unwrap();
        let theta = init_params(&spec, 5);
        let quad = sample(&prob.domain, 400, 2, Sampler::UniformGrid).unwrap();
        let e1 = prob.rayleigh_quotient(&spec, &theta, &quad).unwrap();
        // psi -> 2 psi: scale the output layer (weights and bias) by 2
        let mut theta2 = theta.clone();
        let off = spec.layer_offsets()[spec.n_hidden()];
        for v in theta2.values[off..].iter_mut() {
            *v *= 2.0;
        }
        let e2 = prob.rayleigh_quotient(&spec, &theta2, &quad).unwrap();
        assert!((e1 - e2).abs() < 1e-12 * (1.0 + e1.abs()), "{e1} vs {e2}");
    }

    #[test]
    fn rayleigh_degenerate_norm_errors() {
        let prob = SchrodingerRayleigh::harmonic_oscillator().unwrap();
        let spec = NetworkSpec::new(1, vec![4], 1).unwrap();
        let theta = ParamVector::zeros(spec.param_count());
        let quad = sample(&prob.domain, 100, 2, Sampler::UniformGrid).unwrap();
        assert!(matches!(
            prob.rayleigh_quotient(&spec, &theta, &quad),
            Err(Error::DegenerateNormalization { .. })
        ));
    }

    #[test]
    fn fd_oracle_ground_energy_near_half() {
        let prob = SchrodingerRayleigh::harmonic_oscillator().unwrap();
        let (e0, psi, xs) = fd_ground_state(&prob.domain, 400, harmonic_potential).unwrap();
        assert!((e0 - 0.5).abs() < 1e-3, "oracle E0 {e0}");
        // ground state is nodeless up to sign
        let sign = psi[psi.len() / 2].signum();
        assert!(psi.iter().all(|&v| v * sign > -1e-10));
        assert_eq!(xs.len(), psi.len());
    }

    #[test]
    fn rayleigh_variational_bound_over_random_nets() {
        let prob = SchrodingerRayleigh::harmonic_oscillator().unwrap();
        let (e0, _, _) = fd_ground_state(&prob.domain, 400, harmonic_potential).unwrap();
        let spec = NetworkSpec::new(1, vec![6], 1).unwrap();
        let quad = sample(&prob.domain, 600, 2, Sampler::UniformGrid).unwrap();
        let mut checked = 0;
        for seed in 0..100 {
            let theta = init_params(&spec, seed);
            match prob.rayleigh_quotient(&spec, &theta, &quad) {
                Ok(e) => {
                    assert!(e > e0 - 1e-3, "seed {seed}: E {e} below oracle {e0}");
                    checked += 1;
                }
                Err(Error::DegenerateNormalization { .. }) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(checked > 90);
    }

    #[test]
    fn kinetic_forms_agree_for_decaying_state() {
        // int 0.5 psi'^2 vs -0.5 int psi psi'' for a Gaussian that vanishes at
        // the walls: equal up to quadrature error (integration by parts).
        let dom = BoxDomain::new(vec![-6.0], vec![6.0]).unwrap();
        let quad = sample(&dom, 4000, 2, Sampler::UniformGrid).unwrap();
        let mut sym = Vec::new();
        let mut raw = Vec::new();
        for x in quad.interior_points.iter() {
            let psi = (-0.5 * x * x).exp();
            let dpsi = -x * psi;
            let ddpsi = (x * x - 1.0) * psi;
            sym.push(0.5 * dpsi * dpsi);
            raw.push(-0.5 * psi * ddpsi);
        }
        let a = integrate(&sym, &quad, Region::Interior).unwrap();
        let b = integrate(&raw, &quad, Region::Interior).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn cpinn_lagrangian_linearity_and_zeros() {
        let prob = PoissonCpinn::manufactured().unwrap();
        let specs = [
            NetworkSpec::new(2, vec![5], 1).unwrap(),
            NetworkSpec::new(2, vec![4], 1).unwrap(),
            NetworkSpec::new(2, vec![3], 1).unwrap(),
        ];
        let quad = quad2(16, 8);
        let theta = init_params(&specs[0], 1);
        let psi = init_params(&specs[1], 2);
        let xi = init_params(&specs[2], 3);
        // zero multipliers -> L = 0
        let zero1 = ParamVector::zeros(specs[1].param_count());
        let zero2 = ParamVector::zeros(specs[2].param_count());
        let t0 = prob
            .tapes(&specs, &[theta.clone(), zero1, zero2], &quad)
            .unwrap();
        assert_eq!(prob.lagrangian(&t0, &quad).unwrap(), 0.0);
        // linearity: L(u, 2 lambda, 2 mu) = 2 L(u, lambda, mu); scaling the
        // multiplier nets' output layers doubles the fields exactly.
        let t1 = prob
            .tapes(&specs, &[theta.clone(), psi.clone(), xi.clone()], &quad)
            .unwrap();
        let l1 = prob.lagrangian(&t1, &quad).unwrap();
        let mut psi2 = psi.clone();
        let off1 = specs[1].layer_offsets()[specs[1].n_hidden()];
        for v in psi2.values[off1..].iter_mut() {
            *v *= 2.0;
        }
        let mut xi2 = xi.clone();
        let off2 = specs[2].layer_offsets()[specs[2].n_hidden()];
        for v in xi2.values[off2..].iter_mut() {
            *v *= 2.0;
        }
        let t2 = prob.tapes(&specs, &[theta, psi2, xi2], &quad).unwrap();
        let l2 = prob.lagrangian(&t2, &quad).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12 * (1.0 + l1.abs()));
    }

    #[test]
    fn cpinn_gradient_matches_finite_differences() {
        let prob = PoissonCpinn::manufactured().unwrap();
        let specs = [
            NetworkSpec::new(2, vec![4], 1).unwrap(),
            NetworkSpec::new(2, vec![3], 1).unwrap(),
            NetworkSpec::new(2, vec![3], 1).unwrap(),
        ];
        let quad = quad2(16, 8);
        let params = [
            init_params(&specs[0], 11),
            init_params(&specs[1], 12),
            init_params(&specs[2], 13),
        ];
        let tapes = prob.tapes(&specs, &params, &quad).unwrap();
        let g = prob.gradient(&tapes, &quad).unwrap();
        let ps: Vec<usize> = specs.iter().map(|s| s.param_count()).collect();
        assert_eq!(g.len(), ps.iter().sum::<usize>());
        let h = 1e-6;
        let mut flat_idx = 0;
        for b in 0..3 {
            for i in 0..ps[b] {
                let mut pp = params.clone();
                pp[b].values[i] += h;
                let lp = prob.lagrangian(&prob.tapes(&specs, &pp, &quad).unwrap(), &quad).unwrap();
                pp[b].values[i] -= 2.0 * h;
                let lm = prob.lagrangian(&prob.tapes(&specs, &pp, &quad).unwrap(), &quad).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (g[flat_idx] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                    "block {b} param {i}: grad {} fd {fd}",
                    g[flat_idx]
                );
                flat_idx += 1;
            }
        }
    }

    #[test]
    fn ns_residual_system_gradient_matches_fd() {
        // grad of 0.5|r|^2 = J^T r; check J^T r against FD of the loss using
        // the system's own rows (validates residual linearization cotangents).
        let prob = NavierStokesPinn::manufactured(1.0).unwrap();
        let sphi = NetworkSpec::new(2, vec![5], 1).unwrap();
        let sp = NetworkSpec::new(2, vec![4], 1).unwrap();
        let tphi = init_params(&sphi, 31);
        let tp = init_params(&sp, 32);
        let quad = quad2(16, 8);
        let sys = prob.residual_system(&sphi, &tphi, &sp, &tp, &quad).unwrap();
        // J^T r via tape vjp
        let offs = sys.block_offsets();
        let p_total = sys.p_total();
        let mut grad = vec![0.0; p_total];
        for (bi, block) in sys.blocks.iter().enumerate() {
            for (ti, tape) in block.tapes.iter().enumerate() {
                let k = tape.layout().len();
                let mut cot = vec![0.0; tape.n_points() * k];
                for (row, entries) in sys.rows.iter().enumerate() {
                    for e in entries {
                        if e.block == bi && e.tape == ti {
                            for &(c, coeff) in &e.cot {
                                cot[e.pt * k + c] += coeff * sys.r[row];
                            }
                        }
                    }
                }
                let g = tape.vjp(&cot).unwrap();
                for (i, v) in g.iter().enumerate() {
                    grad[offs[bi] + i] += v;
                }
            }
        }
        let h = 1e-6;
        let loss_at = |tphi: &ParamVector, tp: &ParamVector| {
            prob.residual_system(&sphi, tphi, &sp, tp, &quad)
                .unwrap()
                .loss()
        };
        for i in (0..p_total).step_by(7) {
            let (mut a, mut b) = (tphi.clone(), tp.clone());
            let fd = if i < sphi.param_count() {
                a.values[i] += h;
                let lp = loss_at(&a, &b);
                a.values[i] -= 2.0 * h;
                (lp - loss_at(&a, &b)) / (2.0 * h)
            } else {
                let j = i - sphi.param_count();
                b.values[j] += h;
                let lp = loss_at(&a, &b);
                b.values[j] -= 2.0 * h;
                (lp - loss_at(&a, &b)) / (2.0 * h)
            };
            assert!(
                (grad[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "param {i}: jtr {} fd {fd}",
                grad[i]
            );
        }
    }
}
