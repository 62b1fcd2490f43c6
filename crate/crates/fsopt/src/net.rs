//! Parametric ansatz: fully connected tanh networks (the parametrization map
//! P: theta -> u_theta) with exact spatial derivatives up to third order and
//! exact parameter tangents, plus linear-in-parameter feature ansatz classes.
//!
//! Parameter layout contract (frozen): parameters are ordered layer by layer
//! (hidden layers first, output layer last); within a layer, the weight matrix
//! comes first in row-major order (row = output neuron, column = input), then
//! the biases. This ordering fixes Gramian indices across runs.

use crate::error::{Error, Result};
use crate::jet::{tangent_apply, tangent_apply_transpose, Dual, JetLayout};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Architecture of a fully connected network with tanh hidden activations and
/// a linear output layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
}

/// (fan_in, fan_out) of one affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidSpec(
                "input_dim and output_dim must be >= 1".into(),
            ));
        }
        if hidden_widths.is_empty() {
            return Err(Error::InvalidSpec(
                "network must have at least one hidden layer".into(),
            ));
        }
        if hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidSpec("all hidden widths must be >= 1".into()));
        }
        Ok(Self {
            input_dim,
            hidden_widths,
            output_dim,
        })
    }

    /// Affine layers in order: hidden layers, then the linear output layer.
    pub fn layers(&self) -> Vec<LayerDims> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push(LayerDims {
                fan_in,
                fan_out: w,
            });
            fan_in = w;
        }
        dims.push(LayerDims {
            fan_in,
            fan_out: self.output_dim,
        });
        dims
    }

    /// Parameter offsets of each affine layer in the flat vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::new();
        let mut acc = 0;
        for d in self.layers() {
            offs.push(acc);
            acc += (d.fan_in + 1) * d.fan_out;
        }
        offs
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|d| (d.fan_in + 1) * d.fan_out)
            .sum()
    }

    #[inline]
    pub fn n_hidden(&self) -> usize {
        self.hidden_widths.len()
    }
}

/// Flat vector of all trainable weights, in the frozen layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(p: usize) -> Self {
        Self {
            values: vec![0.0; p],
        }
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Glorot-uniform weights (zero biases), deterministic per seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.param_count()];
    let offsets = spec.layer_offsets();
    for (l, d) in spec.layers().iter().enumerate() {
        let a = (6.0 / (d.fan_in + d.fan_out) as f64).sqrt();
        let w = &mut values[offsets[l]..offsets[l] + d.fan_in * d.fan_out];
        for v in w.iter_mut() {
            *v = rng.random_range(-a..a);
        }
        // biases stay zero
    }
    ParamVector { values }
}

/// Values and spatial derivatives of a network function at a point set.
#[derive(Debug, Clone)]
pub struct Jet {
    pub n_points: usize,
    pub n_channels: usize,
    pub dim: usize,
    pub order: usize,
    layout: JetLayout,
    /// comps[pt * n_channels * K + ch * K + comp]
    comps: Vec<f64>,
}

impl Jet {
    #[inline]
    pub fn layout(&self) -> &JetLayout {
        &self.layout
    }
    #[inline]
    fn base(&self, pt: usize, ch: usize) -> usize {
        (pt * self.n_channels + ch) * self.layout.len()
    }
    #[inline]
    pub fn comps_at(&self, pt: usize, ch: usize) -> &[f64] {
        let b = self.base(pt, ch);
        &self.comps[b..b + self.layout.len()]
    }
    #[inline]
    pub fn value(&self, pt: usize, ch: usize) -> f64 {
        self.comps[self.base(pt, ch)]
    }
    #[inline]
    pub fn grad(&self, pt: usize, ch: usize, axis: usize) -> f64 {
        self.comps[self.base(pt, ch) + self.layout.first(axis)]
    }
    #[inline]
    pub fn hessian(&self, pt: usize, ch: usize, a: usize, b: usize) -> f64 {
        self.comps[self.base(pt, ch) + self.layout.second(a, b)]
    }
    /// Trace of the spatial Hessian; exact by construction (symmetric storage).
    pub fn laplacian(&self, pt: usize, ch: usize) -> f64 {
        self.layout.laplacian(self.comps_at(pt, ch))
    }
    pub fn third(&self, pt: usize, ch: usize, a: usize, b: usize, c: usize) -> f64 {
        self.comps[self.base(pt, ch) + self.layout.third(a, b, c)]
    }
    pub fn all_finite(&self) -> bool {
        self.comps.iter().all(|v| v.is_finite())
    }
}

/// Per-quadrature-point parameter tangents: U[k][i] = d u_theta(x_k) / d theta_i
/// and (at order >= 1/2) the same for spatial derivatives of u.
///
/// Storage is component-major: for each jet component c, an N x p row-major
/// matrix, so Gramian assembly reduces to dense matrix products.
#[derive(Debug, Clone)]
pub struct TangentFrame {
    pub n_points: usize,
    pub p: usize,
    layout: JetLayout,
    /// data[c * n * p + pt * p + i]
    data: Vec<f64>,
}

impl TangentFrame {
    #[inline]
    pub fn layout(&self) -> &JetLayout {
        &self.layout
    }
    /// N x p row-major matrix of component `c` of every parameter tangent.
    #[inline]
    pub fn comp_matrix(&self, c: usize) -> &[f64] {
        let np = self.n_points * self.p;
        &self.data[c * np..(c + 1) * np]
    }
    #[inline]
    pub fn entry(&self, c: usize, pt: usize, i: usize) -> f64 {
        self.data[c * self.n_points * self.p + pt * self.p + i]
    }
    /// Values frame U (component 0).
    pub fn u_matrix(&self) -> &[f64] {
        self.comp_matrix(0)
    }
    /// N x p matrix of the Laplacian of every parameter tangent.
    pub fn laplacian_matrix(&self) -> Vec<f64> {
        let np = self.n_points * self.p;
        let mut out = vec![0.0; np];
        for axis in 0..self.layout.dim() {
            let c = self.layout.second(axis, axis);
            let m = self.comp_matrix(c);
            for (o, v) in out.iter_mut().zip(m) {
                *o += v;
            }
        }
        out
    }
    /// U . w at every point/component: the function-space update field of a
    /// parameter direction w.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.p);
        let k = self.layout.len();
        let mut out = vec![0.0; self.n_points * k];
        for c in 0..k {
            let m = self.comp_matrix(c);
            for pt in 0..self.n_points {
                let row = &m[pt * self.p..(pt + 1) * self.p];
                let mut acc = 0.0;
                for (a, b) in row.iter().zip(w) {
                    acc += a * b;
                }
                out[pt * k + c] = acc;
            }
        }
        out
    }
}

/// Recorded forward pass of a scalar- or vector-output MLP over a point set:
/// all intermediate jets plus per-neuron tangent matrices, enabling exact
/// parameter tangents, adjoints, and second-order contractions.
#[derive(Debug, Clone)]
pub struct Tape {
    spec: NetworkSpec,
    theta: Vec<f64>,
    layout: JetLayout,
    n: usize,
    /// Input jets: n * input_dim * K.
    x: Vec<f64>,
    /// Per hidden layer: pre-activation jets, n * width * K.
    a: Vec<Vec<f64>>,
    /// Per hidden layer: activation jets, n * width * K.
    h: Vec<Vec<f64>>,
    /// Per hidden layer: tangent matrices, n * width * K * K.
    d: Vec<Vec<f64>>,
    /// Output jets: n * output_dim * K.
    out: Vec<f64>,
}

impl Tape {
    /// Run the forward pass at derivative order `order` (0..=3).
    pub fn build(
        spec: &NetworkSpec,
        theta: &ParamVector,
        points: &[f64],
        order: usize,
    ) -> Result<Tape> {
        if theta.len() != spec.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "param vector has length {}, spec requires {}",
                theta.len(),
                spec.param_count()
            )));
        }
        if points.len() % spec.input_dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "points array length {} is not a multiple of input_dim {}",
                points.len(),
                spec.input_dim
            )));
        }
        if order > 3 {
            return Err(Error::InvalidSpec("jet order must be <= 3".into()));
        }
        let d_in = spec.input_dim;
        let n = points.len() / d_in;
        let layout = JetLayout::new(d_in, order);
        let k = layout.len();
        let nf = layout.n_fderivs();
        let dims = spec.layers();
        let offsets = spec.layer_offsets();
        let nh = spec.n_hidden();

        // Input jets: value + unit first derivative.
        let mut x = vec![0.0; n * d_in * k];
        for pt in 0..n {
            for i in 0..d_in {
                let b = (pt * d_in + i) * k;
                x[b] = points[pt * d_in + i];
                if order >= 1 {
                    x[b + layout.first(i)] = 1.0;
                }
            }
        }

        let mut a: Vec<Vec<f64>> = Vec::with_capacity(nh);
        let mut h: Vec<Vec<f64>> = Vec::with_capacity(nh);
        let mut dmats: Vec<Vec<f64>> = Vec::with_capacity(nh);

        for l in 0..nh {
            let LayerDims { fan_in, fan_out } = dims[l];
            let w = &theta.values[offsets[l]..offsets[l] + fan_in * fan_out];
            let bias = &theta.values[offsets[l] + fan_in * fan_out..offsets[l] + (fan_in + 1) * fan_out];
            let prev: &[f64] = if l == 0 { &x } else { &h[l - 1] };
            let mut al = vec![0.0; n * fan_out * k];
            let mut hl = vec![0.0; n * fan_out * k];
            let mut fl = vec![0.0; n * fan_out * nf];
            let mut dl = vec![0.0; n * fan_out * k * k];
            for pt in 0..n {
                for j in 0..fan_out {
                    let ab = (pt * fan_out + j) * k;
                    let row = &w[j * fan_in..(j + 1) * fan_in];
                    for (c, &wjc) in row.iter().enumerate() {
                        let pb = (pt * fan_in + c) * k;
                        for cm in 0..k {
                            al[ab + cm] += wjc * prev[pb + cm];
                        }
                    }
                    al[ab] += bias[j];
                    let fb = (pt * fan_out + j) * nf;
                    JetLayout::tanh_derivs(al[ab], &mut fl[fb..fb + nf]);
                    layout.compose(&fl[fb..fb + nf], &al[ab..ab + k], &mut hl[ab..ab + k]);
                    let db = (pt * fan_out + j) * k * k;
                    layout.tangent_matrix(&fl[fb..fb + nf], &al[ab..ab + k], &mut dl[db..db + k * k]);
                }
            }
            a.push(al);
            h.push(hl);
            dmats.push(dl);
        }

        // Linear output layer.
        let LayerDims { fan_in, fan_out } = dims[nh];
        let w = &theta.values[offsets[nh]..offsets[nh] + fan_in * fan_out];
        let bias = &theta.values[offsets[nh] + fan_in * fan_out..offsets[nh] + (fan_in + 1) * fan_out];
        let top = &h[nh - 1];
        let mut out = vec![0.0; n * fan_out * k];
        for pt in 0..n {
            for j in 0..fan_out {
                let ob = (pt * fan_out + j) * k;
                let row = &w[j * fan_in..(j + 1) * fan_in];
                for (c, &wjc) in row.iter().enumerate() {
                    let pb = (pt * fan_in + c) * k;
                    for cm in 0..k {
                        out[ob + cm] += wjc * top[pb + cm];
                    }
                }
                out[ob] += bias[j];
            }
        }

        Ok(Tape {
            spec: spec.clone(),
            theta: theta.values.clone(),
            layout,
            n,
            x,
            a,
            h,
            d: dmats,
            out,
        })
    }

    #[inline]
    pub fn n_points(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn layout(&self) -> &JetLayout {
        &self.layout
    }

    /// Output jets as a `Jet` value.
    pub fn output_jet(&self) -> Jet {
        Jet {
            n_points: self.n,
            n_channels: self.spec.output_dim,
            dim: self.spec.input_dim,
            order: self.layout.order(),
            layout: self.layout.clone(),
            comps: self.out.clone(),
        }
    }

    /// Input jets of layer `l` for point `pt` (x jets for l = 0).
    #[inline]
    fn layer_input(&self, l: usize, pt: usize) -> &[f64] {
        let k = self.layout.len();
        if l == 0 {
            let d_in = self.spec.input_dim;
            &self.x[pt * d_in * k..(pt + 1) * d_in * k]
        } else {
            let w = self.spec.hidden_widths[l - 1];
            &self.h[l - 1][pt * w * k..(pt + 1) * w * k]
        }
    }

    /// Exact parameter tangents of every jet component at every point
    /// (scalar-output networks only).
    pub fn frame(&self) -> Result<TangentFrame> {
        if self.spec.output_dim != 1 {
            return Err(Error::InvalidSpec(
                "tangent frames require a scalar-output network".into(),
            ));
        }
        let k = self.layout.len();
        let p = self.spec.param_count();
        let n = self.n;
        let nh = self.spec.n_hidden();
        let dims = self.spec.layers();
        let offsets = self.spec.layer_offsets();
        let max_w = *self.spec.hidden_widths.iter().max().unwrap();
        let mut data = vec![0.0; k * n * p];

        // Scratch tangent jets per layer.
        let mut dh_cur = vec![0.0; max_w * k];
        let mut dh_next = vec![0.0; max_w * k];
        let mut seed = vec![0.0; k];
        let np = n * p;

        for pt in 0..n {
            // Hidden-layer parameters.
            for lq in 0..nh {
                let LayerDims { fan_in, fan_out } = dims[lq];
                let input = self.layer_input(lq, pt);
                let dq = &self.d[lq][pt * fan_out * k * k..(pt + 1) * fan_out * k * k];
                for j in 0..fan_out {
                    let dj = &dq[j * k * k..(j + 1) * k * k];
                    for c in 0..=fan_in {
                        let idx = if c < fan_in {
                            offsets[lq] + j * fan_in + c
                        } else {
                            offsets[lq] + fan_in * fan_out + j
                        };
                        if c < fan_in {
                            seed.copy_from_slice(&input[c * k..(c + 1) * k]);
                        } else {
                            for s in seed.iter_mut() {
                                *s = 0.0;
                            }
                            seed[0] = 1.0;
                        }
                        // delta h at layer lq: only neuron j nonzero.
                        tangent_apply(dj, &seed, &mut dh_cur[j * k..(j + 1) * k]);
                        let mut support_single = Some(j);
                        let mut cur_w = fan_out;
                        // Propagate through layers lq+1 .. nh-1.
                        for l in lq + 1..nh {
                            let LayerDims {
                                fan_in: fi,
                                fan_out: fo,
                            } = dims[l];
                            let wmat = &self.theta[offsets[l]..offsets[l] + fi * fo];
                            let dl = &self.d[l][pt * fo * k * k..(pt + 1) * fo * k * k];
                            for jn in 0..fo {
                                let mut da = [0.0f64; 20];
                                match support_single {
                                    Some(s) => {
                                        let wj = wmat[jn * fi + s];
                                        for cm in 0..k {
                                            da[cm] = wj * dh_cur[s * k + cm];
                                        }
                                    }
                                    None => {
                                        for s in 0..fi {
                                            let wj = wmat[jn * fi + s];
                                            for cm in 0..k {
                                                da[cm] += wj * dh_cur[s * k + cm];
                                            }
                                        }
                                    }
                                }
                                tangent_apply(
                                    &dl[jn * k * k..(jn + 1) * k * k],
                                    &da[..k],
                                    &mut dh_next[jn * k..(jn + 1) * k],
                                );
                            }
                            std::mem::swap(&mut dh_cur, &mut dh_next);
                            support_single = None;
                            cur_w = fo;
                        }
                        // Output layer contraction.
                        let LayerDims { fan_in: fi, .. } = dims[nh];
                        let v = &self.theta[offsets[nh]..offsets[nh] + fi];
                        match support_single {
                            Some(s) => {
                                let vj = v[s];
                                for cm in 0..k {
                                    data[cm * np + pt * p + idx] = vj * dh_cur[s * k + cm];
                                }
                            }
                            None => {
                                debug_assert_eq!(cur_w, fi);
                                for cm in 0..k {
                                    let mut acc = 0.0;
                                    for s in 0..fi {
                                        acc += v[s] * dh_cur[s * k + cm];
                                    }
                                    data[cm * np + pt * p + idx] = acc;
                                }
                            }
                        }
                    }
                }
            }
            // Output-layer parameters: d u / d v_j = h_top_j; d u / d b_out = 1.
            let LayerDims { fan_in: fi, .. } = dims[nh];
            let top = self.layer_input(nh, pt);
            for j in 0..fi {
                let idx = offsets[nh] + j;
                for cm in 0..k {
                    data[cm * np + pt * p + idx] = top[j * k + cm];
                }
            }
            data[pt * p + offsets[nh] + fi] = 1.0; // value component only
        }

        Ok(TangentFrame {
            n_points: n,
            p,
            layout: self.layout.clone(),
            data,
        })
    }

    /// Directional parameter derivative of the output jets: v in R^p maps to
    /// the jet of d/d eps u_{theta + eps v} at every point (scalar output).
    pub fn jvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.spec.output_dim != 1 {
            return Err(Error::InvalidSpec("jvp requires scalar output".into()));
        }
        if v.len() != self.spec.param_count() {
            return Err(Error::DimensionMismatch("jvp direction length".into()));
        }
        let k = self.layout.len();
        let nh = self.spec.n_hidden();
        let dims = self.spec.layers();
        let offsets = self.spec.layer_offsets();
        let max_w = *self.spec.hidden_widths.iter().max().unwrap();
        let mut out = vec![0.0; self.n * k];
        let mut dh_cur = vec![0.0; max_w * k];
        let mut dh_next = vec![0.0; max_w * k];

        for pt in 0..self.n {
            for s in dh_cur.iter_mut() {
                *s = 0.0;
            }
            for l in 0..nh {
                let LayerDims { fan_in, fan_out } = dims[l];
                let input = self.layer_input(l, pt);
                let wmat = &self.theta[offsets[l]..offsets[l] + fan_in * fan_out];
                let vw = &v[offsets[l]..offsets[l] + fan_in * fan_out];
                let vb = &v[offsets[l] + fan_in * fan_out..offsets[l] + (fan_in + 1) * fan_out];
                let dl = &self.d[l][pt * fan_out * k * k..(pt + 1) * fan_out * k * k];
                for j in 0..fan_out {
                    let mut da = [0.0f64; 20];
                    // Carried tangent through the weights (zero at layer 0).
                    if l > 0 {
                        for s in 0..fan_in {
                            let wj = wmat[j * fan_in + s];
                            for cm in 0..k {
                                da[cm] += wj * dh_cur[s * k + cm];
                            }
                        }
                    }
                    // Direct dependence on this layer's parameters.
                    for c in 0..fan_in {
                        let vv = vw[j * fan_in + c];
                        if vv != 0.0 {
                            let pb = c * k;
                            for cm in 0..k {
                                da[cm] += vv * input[pb + cm];
                            }
                        }
                    }
                    da[0] += vb[j];
                    tangent_apply(
                        &dl[j * k * k..(j + 1) * k * k],
                        &da[..k],
                        &mut dh_next[j * k..(j + 1) * k],
                    );
                }
                std::mem::swap(&mut dh_cur, &mut dh_next);
            }
            // Output layer.
            let LayerDims { fan_in: fi, .. } = dims[nh];
            let wv = &self.theta[offsets[nh]..offsets[nh] + fi];
            let vw = &v[offsets[nh]..offsets[nh] + fi];
            let top = self.layer_input(nh, pt);
            let ob = pt * k;
            for s in 0..fi {
                for cm in 0..k {
                    out[ob + cm] += wv[s] * dh_cur[s * k + cm] + vw[s] * top[s * k + cm];
                }
            }
            out[ob] += v[offsets[nh] + fi];
        }
        Ok(out)
    }

    /// Adjoint of the frame: given a cotangent (one K-vector per point paired
    /// against the output jet), accumulate the parameter gradient
    /// g_i = sum_pt cot_pt . d(jet u(x_pt))/d theta_i  (scalar output).
    pub fn vjp(&self, cot: &[f64]) -> Result<Vec<f64>> {
        let (grad, _) = self.vjp_with_adjoints(cot)?;
        Ok(grad)
    }

    /// vjp that also returns the per-layer adjoint jets lambda_a (the adjoint
    /// of each pre-activation), needed by the second-order contraction.
    fn vjp_with_adjoints(&self, cot: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if self.spec.output_dim != 1 {
            return Err(Error::InvalidSpec("vjp requires scalar output".into()));
        }
        let k = self.layout.len();
        if cot.len() != self.n * k {
            return Err(Error::DimensionMismatch("cotangent length".into()));
        }
        let nh = self.spec.n_hidden();
        let dims = self.spec.layers();
        let offsets = self.spec.layer_offsets();
        let p = self.spec.param_count();
        let mut grad = vec![0.0; p];
        // lambda_a[l]: n * width_l * K
        let mut lam_a: Vec<Vec<f64>> = (0..nh)
            .map(|l| vec![0.0; self.n * self.spec.hidden_widths[l] * k])
            .collect();
        let max_w = *self.spec.hidden_widths.iter().max().unwrap();
        let mut lh_cur = vec![0.0; max_w * k];
        let mut lh_next = vec![0.0; max_w * k];

        for pt in 0..self.n {
            let lo = &cot[pt * k..(pt + 1) * k];
            // Output layer: u = sum v_s h_s + b.
            let LayerDims { fan_in: fi, .. } = dims[nh];
            let v = &self.theta[offsets[nh]..offsets[nh] + fi];
            let top = self.layer_input(nh, pt);
            for s in 0..fi {
                for cm in 0..k {
                    lh_cur[s * k + cm] = v[s] * lo[cm];
                }
                let mut acc = 0.0;
                for cm in 0..k {
                    acc += lo[cm] * top[s * k + cm];
                }
                grad[offsets[nh] + s] += acc;
            }
            grad[offsets[nh] + fi] += lo[0];
            // Hidden layers, top down.
            for l in (0..nh).rev() {
                let LayerDims { fan_in, fan_out } = dims[l];
                let wmat = &self.theta[offsets[l]..offsets[l] + fan_in * fan_out];
                let input = self.layer_input(l, pt);
                let dl = &self.d[l][pt * fan_out * k * k..(pt + 1) * fan_out * k * k];
                if l > 0 {
                    for s in lh_next.iter_mut().take(fan_in * k) {
                        *s = 0.0;
                    }
                }
                let la = &mut lam_a[l][pt * fan_out * k..(pt + 1) * fan_out * k];
                for j in 0..fan_out {
                    tangent_apply_transpose(
                        &dl[j * k * k..(j + 1) * k * k],
                        &lh_cur[j * k..(j + 1) * k],
                        &mut la[j * k..(j + 1) * k],
                    );
                    let laj = &la[j * k..(j + 1) * k];
                    for c in 0..fan_in {
                        let mut acc = 0.0;
                        for cm in 0..k {
                            acc += laj[cm] * input[c * k + cm];
                        }
                        grad[offsets[l] + j * fan_in + c] += acc;
                        if l > 0 {
                            let wj = wmat[j * fan_in + c];
                            for cm in 0..k {
                                lh_next[c * k + cm] += wj * laj[cm];
                            }
                        }
                    }
                    grad[offsets[l] + fan_in * fan_out + j] += laj[0];
                }
                std::mem::swap(&mut lh_cur, &mut lh_next);
            }
        }
        Ok((grad, lam_a))
    }

    /// Exact contraction of the second parameter derivative of the network jet
    /// against a fixed cotangent field: C_ij = sum_pt cot_pt . d2(jet)/(d theta_i d theta_j).
    ///
    /// This is the curvature-correction term of the loss Hessian (the part the
    /// Gauss-Newton approximation drops). Returned as a dense symmetric p x p
    /// row-major matrix. Cross-layer blocks are computed once for the lower
    /// (earlier-layer direction) triangle and mirrored.
    pub fn hessian_contraction(&self, cot: &[f64]) -> Result<Vec<f64>> {
        let (_, lam_a) = self.vjp_with_adjoints(cot)?;
        let k = self.layout.len();
        let nh = self.spec.n_hidden();
        let dims = self.spec.layers();
        let offsets = self.spec.layer_offsets();
        let p = self.spec.param_count();
        let nf = self.layout.n_fderivs();
        let max_w = *self.spec.hidden_widths.iter().max().unwrap();
        let mut hmat = vec![0.0; p * p];

        // Dual scratch buffers (re part unused in forward; duals only).
        let mut dh_fwd: Vec<Vec<f64>> = (0..nh).map(|_| vec![0.0; max_w * k]).collect();
        let mut dd_dual: Vec<Vec<f64>> = (0..nh).map(|_| vec![0.0; max_w * k * k]).collect();
        let mut dd_set: Vec<Vec<bool>> = (0..nh).map(|_| vec![false; max_w]).collect();
        let mut lh_dual_cur = vec![0.0; max_w * k];
        let mut lh_dual_next = vec![0.0; max_w * k];
        let mut la_dual = vec![0.0; max_w * k];
        let mut seed = vec![0.0; k];
        let mut da_dual = vec![0.0; k];
        let mut fd_scratch = vec![Dual::constant(0.0); nf];
        let mut ad_scratch = vec![Dual::constant(0.0); k];
        let mut dmat_scratch = vec![Dual::constant(0.0); k * k];

        for pt in 0..self.n {
            let lo = &cot[pt * k..(pt + 1) * k];
            // Real lambda_h per layer, reconstructed where needed:
            // lam_h[l][j] = transpose-transport is already folded into lam_a;
            // for the dD^T lam_h term we need lam_h itself. Recompute top-down
            // cheaply from lam_a of the layer above.
            // lam_h[top][j] = v_j * lo; lam_h[l-1][c] = sum_j W^l_jc lam_a[l][j].
            let mut lam_h: Vec<Vec<f64>> = (0..nh).map(|l| {
                vec![0.0; self.spec.hidden_widths[l] * k]
            }).collect();
            {
                let LayerDims { fan_in: fi, .. } = dims[nh];
                let v = &self.theta[offsets[nh]..offsets[nh] + fi];
                for j in 0..fi {
                    for cm in 0..k {
                        lam_h[nh - 1][j * k + cm] = v[j] * lo[cm];
                    }
                }
                for l in (1..nh).rev() {
                    let LayerDims { fan_in, fan_out } = dims[l];
                    let wmat = &self.theta[offsets[l]..offsets[l] + fan_in * fan_out];
                    let la = &lam_a[l][pt * fan_out * k..(pt + 1) * fan_out * k];
                    for j in 0..fan_out {
                        for c in 0..fan_in {
                            let wj = wmat[j * fan_in + c];
                            for cm in 0..k {
                                lam_h[l - 1][c * k + cm] += wj * la[j * k + cm];
                            }
                        }
                    }
                }
            }

            for lq in 0..nh {
                let LayerDims { fan_in, fan_out } = dims[lq];
                let input = self.layer_input(lq, pt);
                for jq in 0..fan_out {
                    for cq in 0..=fan_in {
                        let q = if cq < fan_in {
                            offsets[lq] + jq * fan_in + cq
                        } else {
                            offsets[lq] + fan_in * fan_out + jq
                        };
                        if cq < fan_in {
                            seed.copy_from_slice(&input[cq * k..(cq + 1) * k]);
                        } else {
                            for s in seed.iter_mut() {
                                *s = 0.0;
                            }
                            seed[0] = 1.0;
                        }
                        // ---- forward dual sweep (layers lq..nh-1) ----
                        // Layer lq: only neuron jq active.
                        {
                            let wl = self.spec.hidden_widths[lq];
                            for s in dh_fwd[lq].iter_mut().take(wl * k) {
                                *s = 0.0;
                            }
                            for s in dd_set[lq].iter_mut().take(wl) {
                                *s = false;
                            }
                            let db = (pt * fan_out + jq) * k * k;
                            let dj = &self.d[lq][db..db + k * k];
                            tangent_apply(dj, &seed, &mut dh_fwd[lq][jq * k..(jq + 1) * k]);
                            self.dual_dmat(
                                lq,
                                pt,
                                jq,
                                &seed,
                                &mut fd_scratch,
                                &mut ad_scratch,
                                &mut dmat_scratch,
                            );
                            let base = jq * k * k;
                            for (i, d) in dmat_scratch.iter().enumerate() {
                                dd_dual[lq][base + i] = d.du;
                            }
                            dd_set[lq][jq] = true;
                        }
                        for l in lq + 1..nh {
                            let LayerDims {
                                fan_in: fi,
                                fan_out: fo,
                            } = dims[l];
                            let wmat = &self.theta[offsets[l]..offsets[l] + fi * fo];
                            let (below, here) = dh_fwd.split_at_mut(l);
                            let prev = &below[l - 1];
                            let cur = &mut here[0];
                            for jn in 0..fo {
                                for s in da_dual.iter_mut() {
                                    *s = 0.0;
                                }
                                if l == lq + 1 {
                                    let wj = wmat[jn * fi + jq];
                                    for cm in 0..k {
                                        da_dual[cm] = wj * prev[jq * k + cm];
                                    }
                                } else {
                                    for s in 0..fi {
                                        let wj = wmat[jn * fi + s];
                                        for cm in 0..k {
                                            da_dual[cm] += wj * prev[s * k + cm];
                                        }
                                    }
                                }
                                let db = (pt * fo + jn) * k * k;
                                tangent_apply(
                                    &self.d[l][db..db + k * k],
                                    &da_dual,
                                    &mut cur[jn * k..(jn + 1) * k],
                                );
                                self.dual_dmat(
                                    l,
                                    pt,
                                    jn,
                                    &da_dual,
                                    &mut fd_scratch,
                                    &mut ad_scratch,
                                    &mut dmat_scratch,
                                );
                                let base = jn * k * k;
                                for (i, d) in dmat_scratch.iter().enumerate() {
                                    dd_dual[l][base + i] = d.du;
                                }
                                dd_set[l][jn] = true;
                            }
                        }
                        // ---- output-layer rows ----
                        {
                            let LayerDims { fan_in: fi, .. } = dims[nh];
                            let top_dual = &dh_fwd[nh - 1];
                            let rows = if lq == nh - 1 {
                                // only neuron jq has dual h
                                vec![jq]
                            } else {
                                (0..fi).collect()
                            };
                            for j in rows {
                                let mut acc = 0.0;
                                for cm in 0..k {
                                    acc += lo[cm] * top_dual[j * k + cm];
                                }
                                hmat[(offsets[nh] + j) * p + q] += acc;
                            }
                        }
                        // ---- reverse dual sweep (layers nh-1 down to lq) ----
                        for s in lh_dual_cur.iter_mut() {
                            *s = 0.0;
                        }
                        for l in (lq..nh).rev() {
                            let LayerDims {
                                fan_in: fi,
                                fan_out: fo,
                            } = dims[l];
                            let wmat = &self.theta[offsets[l]..offsets[l] + fi * fo];
                            let linput = self.layer_input(l, pt);
                            let la_real = &lam_a[l][pt * fo * k..(pt + 1) * fo * k];
                            if l > lq {
                                for s in lh_dual_next.iter_mut().take(fi * k) {
                                    *s = 0.0;
                                }
                            }
                            // dual(h) of the layer BELOW (inputs to layer l):
                            let in_dual: Option<&[f64]> = if l > lq {
                                if l - 1 == lq {
                                    Some(&dh_fwd[lq]) // only jq nonzero, handled below
                                } else {
                                    Some(&dh_fwd[l - 1])
                                }
                            } else {
                                None
                            };
                            for j in 0..fo {
                                // At the top of the sweep (l == lq == nh-1) the
                                // dual adjoint from above is zero, so neurons
                                // other than jq contribute nothing.
                                if l == lq && lq == nh - 1 && j != jq {
                                    continue;
                                }
                                // dual lambda_a_j = D_j^T dual lambda_h_j + dD_j^T lambda_h_j
                                let db = (pt * fo + j) * k * k;
                                tangent_apply_transpose(
                                    &self.d[l][db..db + k * k],
                                    &lh_dual_cur[j * k..(j + 1) * k],
                                    &mut la_dual[j * k..(j + 1) * k],
                                );
                                if dd_set[l][j] {
                                    let dd = &dd_dual[l][j * k * k..(j + 1) * k * k];
                                    let lh_real = &lam_h[l][j * k..(j + 1) * k];
                                    for r in 0..k {
                                        let lr = lh_real[r];
                                        if lr != 0.0 {
                                            for c in 0..k {
                                                la_dual[j * k + c] += dd[r * k + c] * lr;
                                            }
                                        }
                                    }
                                }
                                let laj_dual = &la_dual[j * k..(j + 1) * k];
                                let laj_real = &la_real[j * k..(j + 1) * k];
                                // rows: weights and bias of layer l
                                for c in 0..fi {
                                    let mut acc = 0.0;
                                    for cm in 0..k {
                                        acc += laj_dual[cm] * linput[c * k + cm];
                                    }
                                    if let Some(ind) = in_dual {
                                        // + lambda_a . dual(input_c)
                                        if !(l - 1 == lq && c != jq) {
                                            for cm in 0..k {
                                                acc += laj_real[cm] * ind[c * k + cm];
                                            }
                                        }
                                    }
                                    hmat[(offsets[l] + j * fi + c) * p + q] += acc;
                                }
                                hmat[(offsets[l] + fi * fo + j) * p + q] += laj_dual[0];
                                // push dual adjoint down (not past lq)
                                if l > lq {
                                    for c in 0..fi {
                                        let wj = wmat[j * fi + c];
                                        for cm in 0..k {
                                            lh_dual_next[c * k + cm] += wj * laj_dual[cm];
                                        }
                                    }
                                }
                            }
                            std::mem::swap(&mut lh_dual_cur, &mut lh_dual_next);
                        }
                    }
                }
            }
        }

        // Mirror cross-layer blocks: entries (i, q) with layer(i) >= layer(q)
        // were computed; copy to (q, i) where the (q-row, i-col) slot is in a
        // strictly earlier layer row. Same-layer blocks were filled fully.
        let layer_of = {
            let offsets = offsets.clone();
            let dims = dims.clone();
            move |i: usize| -> usize {
                let mut l = 0;
                for (li, off) in offsets.iter().enumerate() {
                    let sz = (dims[li].fan_in + 1) * dims[li].fan_out;
                    if i >= *off && i < off + sz {
                        l = li;
                    }
                }
                l
            }
        };
        let mut layer_idx = vec![0usize; p];
        for (i, li) in layer_idx.iter_mut().enumerate() {
            *li = layer_of(i);
        }
        for i in 0..p {
            for q in 0..p {
                if layer_idx[i] > layer_idx[q] {
                    hmat[q * p + i] = hmat[i * p + q];
                }
            }
        }
        // Symmetrize same-layer blocks (both halves computed independently;
        // averaging removes roundoff asymmetry).
        for i in 0..p {
            for q in 0..i {
                if layer_idx[i] == layer_idx[q] {
                    let avg = 0.5 * (hmat[i * p + q] + hmat[q * p + i]);
                    hmat[i * p + q] = avg;
                    hmat[q * p + i] = avg;
                }
            }
        }
        Ok(hmat)
    }

    /// Directional derivative of neuron (l, j)'s tangent matrix along a dual
    /// perturbation `da` of its pre-activation jet, written to `dmat_scratch`.
    #[allow(clippy::too_many_arguments)]
    fn dual_dmat(
        &self,
        l: usize,
        pt: usize,
        j: usize,
        da: &[f64],
        fd: &mut [Dual],
        ad: &mut [Dual],
        dmat: &mut [Dual],
    ) {
        let k = self.layout.len();
        let w = self.spec.hidden_widths[l];
        let ab = (pt * w + j) * k;
        let aj = &self.a[l][ab..ab + k];
        for cm in 0..k {
            ad[cm] = Dual::new(aj[cm], da[cm]);
        }
        JetLayout::tanh_derivs(ad[0], fd);
        self.layout.tangent_matrix(fd, ad, dmat);
    }
}

/// Network values and exact spatial derivatives (the map P evaluated with its
/// spatial jet). `order` in {0, 1, 2}; use `forward_jet3` where third-order
/// spatial derivatives are required.
pub fn forward_jet(
    spec: &NetworkSpec,
    theta: &ParamVector,
    points: &[f64],
    order: usize,
) -> Result<Jet> {
    if order > 2 {
        return Err(Error::InvalidSpec(
            "forward_jet supports order <= 2; use forward_jet3".into(),
        ));
    }
    Ok(Tape::build(spec, theta, points, order)?.output_jet())
}

/// Third-order variant (needed by stream-function ansatz residuals).
pub fn forward_jet3(spec: &NetworkSpec, theta: &ParamVector, points: &[f64]) -> Result<Jet> {
    Ok(Tape::build(spec, theta, points, 3)?.output_jet())
}

/// Tangent frame at a point set. `with_derivatives` selects whether spatial
/// derivative frames (up to second order) are included.
pub fn param_tangent(
    spec: &NetworkSpec,
    theta: &ParamVector,
    points: &[f64],
    with_derivatives: bool,
) -> Result<TangentFrame> {
    let order = if with_derivatives { 2 } else { 0 };
    Tape::build(spec, theta, points, order)?.frame()
}

/// Fixed feature fields for linear-in-parameter ansatz classes
/// u_theta(x) = sum_i theta_i phi_i(x).
#[derive(Debug, Clone)]
pub enum FeatureBasis {
    /// phi_i(x) = x_i (p = spatial dimension).
    Coordinates { dim: usize },
    /// Features are the top-hidden-layer activations of a frozen network,
    /// plus a constant feature (p = top width + 1). This is "last-layer-only"
    /// training: the parametrization is exactly linear.
    FrozenMlp {
        spec: NetworkSpec,
        frozen: ParamVector,
    },
}

impl FeatureBasis {
    pub fn param_count(&self) -> usize {
        match self {
            FeatureBasis::Coordinates { dim } => *dim,
            FeatureBasis::FrozenMlp { spec, .. } => {
                spec.hidden_widths[spec.n_hidden() - 1] + 1
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureBasis::Coordinates { dim } => *dim,
            FeatureBasis::FrozenMlp { spec, .. } => spec.input_dim,
        }
    }

    /// Jets of every feature at every point: data[c * n * p + pt * p + i],
    /// i.e. exactly a TangentFrame (the tangents of a linear model ARE the
    /// features, independent of theta).
    pub fn feature_frame(&self, points: &[f64], order: usize) -> Result<TangentFrame> {
        let d = self.input_dim();
        if points.len() % d != 0 {
            return Err(Error::DimensionMismatch("points vs feature dim".into()));
        }
        let n = points.len() / d;
        let p = self.param_count();
        let layout = JetLayout::new(d, order);
        let k = layout.len();
        let np = n * p;
        let mut data = vec![0.0; k * np];
        match self {
            FeatureBasis::Coordinates { dim } => {
                for pt in 0..n {
                    for i in 0..*dim {
                        data[pt * p + i] = points[pt * d + i];
                        if order >= 1 {
                            data[layout.first(i) * np + pt * p + i] = 1.0;
                        }
                    }
                }
            }
            FeatureBasis::FrozenMlp { spec, frozen } => {
                let tape = Tape::build(spec, frozen, points, order)?;
                let top = spec.n_hidden() - 1;
                let w = spec.hidden_widths[top];
                for pt in 0..n {
                    let hb = pt * w * k;
                    for i in 0..w {
                        for cm in 0..k {
                            data[cm * np + pt * p + i] = tape.h[top][hb + i * k + cm];
                        }
                    }
                    data[pt * p + w] = 1.0; // constant feature, value only
                }
            }
        }
        Ok(TangentFrame {
            n_points: n,
            p,
            layout,
            data,
        })
    }

    /// Evaluate the linear model: jets of u_theta at every point.
    pub fn eval(&self, theta: &[f64], points: &[f64], order: usize) -> Result<Jet> {
        if theta.len() != self.param_count() {
            return Err(Error::DimensionMismatch("linear ansatz theta length".into()));
        }
        let frame = self.feature_frame(points, order)?;
        let comps_per_pt = frame.apply(theta);
        Ok(Jet {
            n_points: frame.n_points,
            n_channels: 1,
            dim: self.input_dim(),
            order,
            layout: frame.layout.clone(),
            comps: comps_per_pt,
        })
    }
}
