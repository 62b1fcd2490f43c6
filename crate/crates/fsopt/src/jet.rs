//! Truncated multivariate derivative arithmetic ("jets").
//!
//! A jet stores the value and all partial derivatives of a scalar field up to
//! a fixed order at one point, in a flat component array. The layout also
//! precomputes the chain-rule tables needed to push jets through `tanh`, which
//! is the only nonlinearity in the ansatz networks. All kernels are generic
//! over the scalar type so the same tables serve the primal pass (`f64`) and
//! the directional second-order passes (`Dual`).

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// Scalar abstraction for jet kernels: plain `f64` or a forward-mode dual.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn scale(self, s: f64) -> Self;
    fn tanh(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn zero() -> Self {
        0.0
    }
    #[inline]
    fn one() -> Self {
        1.0
    }
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn scale(self, s: f64) -> Self {
        self * s
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order dual number; carries one directional derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    #[inline]
    pub fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }
    #[inline]
    pub fn constant(re: f64) -> Self {
        Self { re, du: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}
impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}
impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}
impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}
impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.du += o.du;
    }
}

impl Real for Dual {
    #[inline]
    fn zero() -> Self {
        Dual::new(0.0, 0.0)
    }
    #[inline]
    fn one() -> Self {
        Dual::new(1.0, 0.0)
    }
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline]
    fn scale(self, s: f64) -> Self {
        Dual::new(self.re * s, self.du * s)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, (1.0 - t * t) * self.du)
    }
}

/// One term of a chain-rule expansion: `coeff * f^(f_order)(u0) * prod u_factors`.
#[derive(Debug, Clone, PartialEq)]
struct ChainTerm {
    f_order: usize,
    /// Component indices of the `u`-jet factors, sorted. All have degree >= 1.
    factors: Vec<usize>,
    coeff: f64,
}

/// Component layout for jets of a given spatial dimension and derivative order.
#[derive(Debug, Clone)]
pub struct JetLayout {
    dim: usize,
    order: usize,
    /// Multi-index (derivative counts per axis) of each stored component.
    comps: Vec<[u8; 3]>,
    /// Faà di Bruno tables: for each component, the terms of `d^comp tanh(u)`.
    chain: Vec<Vec<ChainTerm>>,
    /// Stored component indices of the pure second derivatives (a,a), a < dim.
    diag_second: Vec<usize>,
}

impl JetLayout {
    pub fn new(dim: usize, order: usize) -> Self {
        assert!(dim >= 1 && dim <= 3, "jet dim must be 1..=3");
        assert!(order <= 3, "jet order must be <= 3");
        let mut comps: Vec<[u8; 3]> = vec![[0, 0, 0]];
        // Degree-graded, non-decreasing axis tuples within each degree.
        for deg in 1..=order {
            let mut tuple = vec![0usize; deg];
            loop {
                let mut mi = [0u8; 3];
                for &a in &tuple {
                    mi[a] += 1;
                }
                comps.push(mi);
                // Next non-decreasing tuple with entries < dim.
                let mut k = deg;
                loop {
                    if k == 0 {
                        break;
                    }
                    k -= 1;
                    if tuple[k] + 1 < dim {
                        let v = tuple[k] + 1;
                        for t in tuple.iter_mut().skip(k) {
                            *t = v;
                        }
                        break;
                    }
                    if k == 0 {
                        tuple.clear();
                        break;
                    }
                }
                if tuple.is_empty() {
                    break;
                }
                if k == 0 && tuple[0] == 0 {
                    break;
                }
            }
            // restore for next degree
        }
        let index_of = |mi: [u8; 3], comps: &[[u8; 3]]| -> usize {
            comps
                .iter()
                .position(|&c| c == mi)
                .expect("component not in layout")
        };
        // Build chain tables by repeated symbolic differentiation.
        let mut chain: Vec<Vec<ChainTerm>> = Vec::with_capacity(comps.len());
        chain.push(vec![ChainTerm {
            f_order: 0,
            factors: vec![],
            coeff: 1.0,
        }]);
        for ci in 1..comps.len() {
            let mi = comps[ci];
            let axis = (0..3).find(|&a| mi[a] > 0).unwrap();
            let mut parent_mi = mi;
            parent_mi[axis] -= 1;
            let parent = index_of(parent_mi, &comps);
            let mut terms: Vec<ChainTerm> = Vec::new();
            let push = |t: ChainTerm, terms: &mut Vec<ChainTerm>| {
                if let Some(existing) = terms
                    .iter_mut()
                    .find(|e| e.f_order == t.f_order && e.factors == t.factors)
                {
                    existing.coeff += t.coeff;
                } else {
                    terms.push(t);
                }
            };
            let mut e_axis = [0u8; 3];
            e_axis[axis] = 1;
            let first_idx = index_of(e_axis, &comps);
            for t in &chain[parent] {
                // d/dx_a of f^(k)(u0): f^(k+1)(u0) * u_{e_a}
                let mut factors = t.factors.clone();
                factors.push(first_idx);
                factors.sort_unstable();
                push(
                    ChainTerm {
                        f_order: t.f_order + 1,
                        factors,
                        coeff: t.coeff,
                    },
                    &mut terms,
                );
                // d/dx_a of each u-factor
                for j in 0..t.factors.len() {
                    let mut fm = comps[t.factors[j]];
                    fm[axis] += 1;
                    let mut factors = t.factors.clone();
                    factors[j] = index_of(fm, &comps);
                    factors.sort_unstable();
                    push(
                        ChainTerm {
                            f_order: t.f_order,
                            factors,
                            coeff: t.coeff,
                        },
                        &mut terms,
                    );
                }
            }
            chain.push(terms);
        }
        let diag_second = if order >= 2 {
            (0..dim)
                .map(|a| {
                    let mut mi = [0u8; 3];
                    mi[a] = 2;
                    index_of(mi, &comps)
                })
                .collect()
        } else {
            vec![]
        };
        Self {
            dim,
            order,
            comps,
            chain,
            diag_second,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }
    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }
    /// Number of stored components per jet.
    #[inline]
    pub fn len(&self) -> usize {
        self.comps.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }
    /// Number of tanh derivative values the kernels need (f0..f_{order+1}).
    #[inline]
    pub fn n_fderivs(&self) -> usize {
        self.order + 2
    }

    pub fn comp_multi_index(&self, idx: usize) -> [u8; 3] {
        self.comps[idx]
    }

    /// Stored index of a derivative component given per-axis counts.
    pub fn index_of(&self, mi: [u8; 3]) -> usize {
        self.comps
            .iter()
            .position(|&c| c == mi)
            .expect("component not in layout")
    }

    /// Index of the first derivative along `axis`.
    #[inline]
    pub fn first(&self, axis: usize) -> usize {
        // components 1..=dim are the first derivatives in axis order
        debug_assert!(axis < self.dim);
        1 + axis
    }

    /// Index of the second derivative along axes (a, b), a and b in any order.
    pub fn second(&self, a: usize, b: usize) -> usize {
        let mut mi = [0u8; 3];
        mi[a] += 1;
        mi[b] += 1;
        self.index_of(mi)
    }

    /// Index of the third derivative along axes (a, b, c).
    pub fn third(&self, a: usize, b: usize, c: usize) -> usize {
        let mut mi = [0u8; 3];
        mi[a] += 1;
        mi[b] += 1;
        mi[c] += 1;
        self.index_of(mi)
    }

    /// Laplacian of a jet: trace of the spatial Hessian.
    pub fn laplacian<S: Real>(&self, jet: &[S]) -> S {
        let mut acc = S::zero();
        for &i in &self.diag_second {
            acc += jet[i];
        }
        acc
    }

    /// tanh and its derivatives f0..f_{n-1} at `x`.
    pub fn tanh_derivs<S: Real>(x: S, out: &mut [S]) {
        let t = x.tanh();
        out[0] = t;
        if out.len() > 1 {
            out[1] = S::one() - t * t; // sech^2
        }
        if out.len() > 2 {
            out[2] = (t * out[1]).scale(-2.0);
        }
        if out.len() > 3 {
            out[3] = (out[1] * out[1] + t * out[2]).scale(-2.0);
        }
        if out.len() > 4 {
            out[4] = (out[1] * out[2].scale(3.0) + t * out[3]).scale(-2.0);
        }
    }

    /// g = tanh(u) as jets: `f` holds tanh derivative values at `u[0]`.
    pub fn compose<S: Real>(&self, f: &[S], u: &[S], out: &mut [S]) {
        for (ci, terms) in self.chain.iter().enumerate() {
            let mut acc = S::zero();
            for t in terms {
                let mut prod = f[t.f_order];
                for &fi in &t.factors {
                    prod = prod * u[fi];
                }
                acc += prod.scale(t.coeff);
            }
            out[ci] = acc;
        }
    }

    /// Dense tangent matrix D of the composition at `u`: delta_g = D * delta_u.
    ///
    /// `out` is row-major `len() x len()`; `f` must hold f0..f_{order+1}.
    pub fn tangent_matrix<S: Real>(&self, f: &[S], u: &[S], out: &mut [S]) {
        let k = self.len();
        for v in out.iter_mut() {
            *v = S::zero();
        }
        for (ci, terms) in self.chain.iter().enumerate() {
            let row = &mut out[ci * k..(ci + 1) * k];
            for t in terms {
                // d/d(u0) via the chained f-order bump
                let mut prod = f[t.f_order + 1];
                for &fi in &t.factors {
                    prod = prod * u[fi];
                }
                row[0] += prod.scale(t.coeff);
                // d/d(u_{factor j})
                for j in 0..t.factors.len() {
                    let mut prod = f[t.f_order];
                    for (l, &fi) in t.factors.iter().enumerate() {
                        if l != j {
                            prod = prod * u[fi];
                        }
                    }
                    row[t.factors[j]] += prod.scale(t.coeff);
                }
            }
        }
    }
}

/// delta_g = D * delta_u for a row-major K x K tangent matrix.
#[inline]
pub fn tangent_apply<S: Real>(d: &[S], delta_u: &[S], out: &mut [S]) {
    let k = delta_u.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &d[r * k..(r + 1) * k];
        let mut acc = S::zero();
        for c in 0..k {
            acc += row[c] * delta_u[c];
        }
        *o = acc;
    }
}

/// lambda_u = D^T * lambda_g (adjoint transport through the composition).
#[inline]
pub fn tangent_apply_transpose<S: Real>(d: &[S], lambda_g: &[S], out: &mut [S]) {
    let k = lambda_g.len();
    for o in out.iter_mut() {
        *o = S::zero();
    }
    for (r, &lg) in lambda_g.iter().enumerate() {
        let row = &d[r * k..(r + 1) * k];
        for c in 0..k {
            out[c] += row[c] * lg;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly_jet(layout: &JetLayout, x: &[f64]) -> Vec<f64> {
        // u(x) = 0.3 x0 + 0.7 x1 - 0.2 x0^2 + 0.15 x0 x1 + 0.05 x1^3 + 0.1
        // exact jet at x (dim 2, any order <= 3)
        let (a, b) = (x[0], x[1]);
        let mut u = vec![0.0; layout.len()];
        u[0] = 0.1 + 0.3 * a + 0.7 * b - 0.2 * a * a + 0.15 * a * b + 0.05 * b * b * b;
        u[layout.first(0)] = 0.3 - 0.4 * a + 0.15 * b;
        u[layout.first(1)] = 0.7 + 0.15 * a + 0.15 * b * b;
        if layout.order() >= 2 {
            u[layout.second(0, 0)] = -0.4;
            u[layout.second(0, 1)] = 0.15;
            u[layout.second(1, 1)] = 0.3 * b;
        }
        if layout.order() >= 3 {
            u[layout.third(1, 1, 1)] = 0.3;
        }
        u
    }

    fn poly_val(x: &[f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        0.1 + 0.3 * a + 0.7 * b - 0.2 * a * a + 0.15 * a * b + 0.05 * b * b * b
    }

    #[test]
    fn component_counts() {
        assert_eq!(JetLayout::new(1, 0).len(), 1);
        assert_eq!(JetLayout::new(1, 2).len(), 3);
        assert_eq!(JetLayout::new(2, 2).len(), 6);
        assert_eq!(JetLayout::new(2, 3).len(), 10);
        assert_eq!(JetLayout::new(3, 2).len(), 10);
        assert_eq!(JetLayout::new(3, 3).len(), 20);
    }

    #[test]
    fn compose_matches_finite_differences() {
        let layout = JetLayout::new(2, 3);
        let x0 = [0.37, -0.21];
        let u = poly_jet(&layout, &x0);
        let mut f = vec![0.0; layout.n_fderivs()];
        JetLayout::tanh_derivs(u[0], &mut f);
        let mut g = vec![0.0; layout.len()];
        layout.compose(&f, &u, &mut g);

        let h = 1e-4;
        let eval = |dx: f64, dy: f64| poly_val(&[x0[0] + dx, x0[1] + dy]).tanh();
        // value / gradient / selected higher components
        assert!((g[0] - eval(0.0, 0.0)).abs() < 1e-14);
        let gx = (eval(h, 0.0) - eval(-h, 0.0)) / (2.0 * h);
        let gy = (eval(0.0, h) - eval(0.0, -h)) / (2.0 * h);
        assert!((g[layout.first(0)] - gx).abs() < 1e-8);
        assert!((g[layout.first(1)] - gy).abs() < 1e-8);
        let gxx = (eval(h, 0.0) - 2.0 * eval(0.0, 0.0) + eval(-h, 0.0)) / (h * h);
        let gyy = (eval(0.0, h) - 2.0 * eval(0.0, 0.0) + eval(0.0, -h)) / (h * h);
        let gxy = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h);
        assert!((g[layout.second(0, 0)] - gxx).abs() < 1e-6);
        assert!((g[layout.second(1, 1)] - gyy).abs() < 1e-6);
        assert!((g[layout.second(0, 1)] - gxy).abs() < 1e-6);
        // third derivatives via FD of second differences
        let sxx = |dy: f64| (eval(h, dy) - 2.0 * eval(0.0, dy) + eval(-h, dy)) / (h * h);
        let gxxy = (sxx(h) - sxx(-h)) / (2.0 * h);
        assert!(
            (g[layout.third(0, 0, 1)] - gxxy).abs() < 2e-4,
            "gxxy jet {} fd {}",
            g[layout.third(0, 0, 1)],
            gxxy
        );
    }

    #[test]
    fn tangent_matrix_matches_composition_difference() {
        let layout = JetLayout::new(2, 3);
        let x0 = [0.11, 0.43];
        let u = poly_jet(&layout, &x0);
        let k = layout.len();
        let mut f = vec![0.0; layout.n_fderivs()];
        JetLayout::tanh_derivs(u[0], &mut f);
        let mut d = vec![0.0; k * k];
        layout.tangent_matrix(&f, &u, &mut d);

        // random-ish direction
        let delta: Vec<f64> = (0..k).map(|i| ((i * 7 + 3) % 5) as f64 * 0.21 - 0.4).collect();
        let mut analytic = vec![0.0; k];
        tangent_apply(&d, &delta, &mut analytic);

        let h = 1e-6;
        let mut gp = vec![0.0; k];
        let mut gm = vec![0.0; k];
        for (sign, out) in [(1.0, &mut gp), (-1.0, &mut gm)] {
            let up: Vec<f64> = u.iter().zip(&delta).map(|(a, b)| a + sign * h * b).collect();
            let mut fp = vec![0.0; layout.n_fderivs()];
            JetLayout::tanh_derivs(up[0], &mut fp);
            layout.compose(&fp, &up, out);
        }
        for i in 0..k {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            assert!(
                (analytic[i] - fd).abs() < 1e-7 * (1.0 + fd.abs()),
                "comp {i}: analytic {} fd {}",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn dual_composition_carries_directional_derivative() {
        let layout = JetLayout::new(2, 2);
        let x0 = [-0.31, 0.22];
        let u = poly_jet(&layout, &x0);
        let k = layout.len();
        let delta: Vec<f64> = (0..k).map(|i| 0.1 * (i as f64) - 0.25).collect();

        // dual pass
        let ud: Vec<Dual> = u.iter().zip(&delta).map(|(&a, &b)| Dual::new(a, b)).collect();
        let mut fd = vec![Dual::constant(0.0); layout.n_fderivs()];
        JetLayout::tanh_derivs(ud[0], &mut fd);
        let mut gd = vec![Dual::constant(0.0); k];
        layout.compose(&fd, &ud, &mut gd);

        // tangent-matrix pass
        let mut f = vec![0.0; layout.n_fderivs()];
        JetLayout::tanh_derivs(u[0], &mut f);
        let mut d = vec![0.0; k * k];
        layout.tangent_matrix(&f, &u, &mut d);
        let mut tg = vec![0.0; k];
        tangent_apply(&d, &delta, &mut tg);

        for i in 0..k {
            assert!(
                (gd[i].du - tg[i]).abs() < 1e-13,
                "comp {i}: dual {} tangent {}",
                gd[i].du,
                tg[i]
            );
        }
    }

    #[test]
    fn transpose_is_exact_adjoint() {
        let layout = JetLayout::new(3, 2);
        let k = layout.len();
        let u: Vec<f64> = (0..k).map(|i| 0.07 * i as f64 - 0.3).collect();
        let mut f = vec![0.0; layout.n_fderivs()];
        JetLayout::tanh_derivs(u[0], &mut f);
        let mut d = vec![0.0; k * k];
        layout.tangent_matrix(&f, &u, &mut d);
        let v: Vec<f64> = (0..k).map(|i| (i as f64).sin()).collect();
        let w: Vec<f64> = (0..k).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut dv = vec![0.0; k];
        tangent_apply(&d, &v, &mut dv);
        let mut dtw = vec![0.0; k];
        tangent_apply_transpose(&d, &w, &mut dtw);
        let lhs: f64 = dv.iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = v.iter().zip(&dtw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-14 * (1.0 + lhs.abs()));
    }
}
