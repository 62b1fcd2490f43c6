//! Geometry and quadrature: axis-aligned box domains with interior and
//! boundary point sets whose weighted sums approximate the L^2 inner products
//! used by every Gramian.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Axis-aligned box Omega = prod [lower_i, upper_i].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidSpec(
                "box bounds must be non-empty and of equal dimension".into(),
            ));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidSpec(
                "box requires lower < upper componentwise".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// |Omega|
    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .product()
    }

    /// Area of one face orthogonal to `axis` (1.0 in one dimension).
    pub fn face_area(&self, axis: usize) -> f64 {
        (0..self.dim())
            .filter(|&j| j != axis)
            .map(|j| self.upper[j] - self.lower[j])
            .product()
    }

    /// |boundary of Omega| = sum of the 2d face areas.
    pub fn boundary_area(&self) -> f64 {
        (0..self.dim()).map(|a| 2.0 * self.face_area(a)).sum()
    }
}

/// Point-placement strategy for quadrature sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampler {
    /// Tensor-product midpoint rule; n_interior must be a perfect d-th power.
    UniformGrid,
    /// Uniform random points, deterministic per seed.
    MonteCarlo { seed: u64 },
}

/// Interior and boundary quadrature with uniform scalar weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSet {
    pub dim: usize,
    /// N x d row-major interior points.
    pub interior_points: Vec<f64>,
    /// |Omega| / N
    pub interior_weight: f64,
    /// M x d row-major boundary points.
    pub boundary_points: Vec<f64>,
    /// |boundary| / M
    pub boundary_weight: f64,
    pub sampler: Sampler,
}

/// Which point set an integral runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Interior,
    Boundary,
}

impl QuadratureSet {
    #[inline]
    pub fn n_interior(&self) -> usize {
        self.interior_points.len() / self.dim
    }
    #[inline]
    pub fn n_boundary(&self) -> usize {
        self.boundary_points.len() / self.dim
    }

    /// Verification hook: scale the interior weight by `factor` to model a
    /// corrupted quadrature rule (used by the fault-injection test of the
    /// gramian verify suite; never called on production paths).
    pub fn corrupt_interior_weight(&mut self, factor: f64) {
        self.interior_weight *= factor;
    }

    /// CSV serialization (header: x0,..,x{d-1},region).
    pub fn to_csv(&self) -> String {
        let d = self.dim;
        let mut s = String::new();
        for i in 0..d {
            s.push_str(&format!("x{i},"));
        }
        s.push_str("region\n");
        for (tag, pts) in [
            ("interior", &self.interior_points),
            ("boundary", &self.boundary_points),
        ] {
            for pt in pts.chunks(d) {
                for v in pt {
                    s.push_str(&format!("{v:.17e},"));
                }
                s.push_str(tag);
                s.push('\n');
            }
        }
        s
    }
}

/// Pairwise (cascade) summation: fixed order, low roundoff.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Build a quadrature set on a box.
pub fn sample(
    domain: &BoxDomain,
    n_interior: usize,
    n_boundary: usize,
    sampler: Sampler,
) -> Result<QuadratureSet> {
    if n_interior == 0 {
        return Err(Error::InvalidQuadrature("n_interior must be >= 1".into()));
    }
    let d = domain.dim();
    let mut interior = Vec::with_capacity(n_interior * d);
    let mut boundary = Vec::with_capacity(n_boundary * d);

    match sampler {
        Sampler::UniformGrid => {
            let m = nth_root_exact(n_interior, d).ok_or_else(|| {
                Error::InvalidQuadrature(format!(
                    "uniform_grid requires n_interior = m^{d}; got {n_interior}"
                ))
            })?;
            let mut idx = vec![0usize; d];
            loop {
                for a in 0..d {
                    let t = (idx[a] as f64 + 0.5) / m as f64;
                    interior.push(domain.lower[a] + t * (domain.upper[a] - domain.lower[a]));
                }
                if !advance(&mut idx, m) {
                    break;
                }
            }
            if n_boundary > 0 {
                let counts = face_allocation(domain, n_boundary)?;
                for (face, &cnt) in counts.iter().enumerate() {
                    let axis = face / 2;
                    let side = face % 2;
                    if cnt == 0 {
                        continue;
                    }
                    if d == 1 {
                        for _ in 0..cnt {
                            boundary.push(if side == 0 {
                                domain.lower[0]
                            } else {
                                domain.upper[0]
                            });
                        }
                    } else {
                        let mf = nth_root_exact(cnt, d - 1).ok_or_else(|| {
                            Error::InvalidQuadrature(format!(
                                "grid boundary needs a perfect power per face; face {face} got {cnt}"
                            ))
                        })?;
                        let free: Vec<usize> = (0..d).filter(|&a| a != axis).collect();
                        let mut idx = vec![0usize; d - 1];
                        loop {
                            let mut pt = vec![0.0; d];
                            pt[axis] = if side == 0 {
                                domain.lower[axis]
                            } else {
                                domain.upper[axis]
                            };
                            for (fi, &a) in free.iter().enumerate() {
                                let t = (idx[fi] as f64 + 0.5) / mf as f64;
                                pt[a] = domain.lower[a] + t * (domain.upper[a] - domain.lower[a]);
                            }
                            boundary.extend_from_slice(&pt);
                            if !advance(&mut idx, mf) {
                                break;
                            }
                        }
                    }
                }
            }
        }
        Sampler::MonteCarlo { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..n_interior {
                for a in 0..d {
                    interior.push(rng.random_range(domain.lower[a]..domain.upper[a]));
                }
            }
            if n_boundary > 0 {
                let counts = face_allocation(domain, n_boundary)?;
                for (face, &cnt) in counts.iter().enumerate() {
                    let axis = face / 2;
                    let side = face % 2;
                    for _ in 0..cnt {
                        let mut pt = vec![0.0; d];
                        pt[axis] = if side == 0 {
                            domain.lower[axis]
                        } else {
                            domain.upper[axis]
                        };
                        for a in 0..d {
                            if a != axis {
                                pt[a] = rng.random_range(domain.lower[a]..domain.upper[a]);
                            }
                        }
                        boundary.extend_from_slice(&pt);
                    }
                }
            }
        }
    }

    let m_actual = boundary.len() / d;
    Ok(QuadratureSet {
        dim: d,
        interior_weight: domain.volume() / n_interior as f64,
        interior_points: interior,
        boundary_weight: if m_actual > 0 {
            domain.boundary_area() / m_actual as f64
        } else {
            0.0
        },
        boundary_points: boundary,
        sampler,
    })
}

/// Quadrature value of the integral of a sampled field over a region.
pub fn integrate(values: &[f64], quad: &QuadratureSet, region: Region) -> Result<f64> {
    let (n, w) = match region {
        Region::Interior => (quad.n_interior(), quad.interior_weight),
        Region::Boundary => (quad.n_boundary(), quad.boundary_weight),
    };
    if values.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "integrate: {} values for {} points",
            values.len(),
            n
        )));
    }
    Ok(w * pairwise_sum(values))
}

/// Proportional-to-area allocation of `m` boundary points over the 2d faces
/// (largest-remainder rounding, ties to lower face index).
fn face_allocation(domain: &BoxDomain, m: usize) -> Result<Vec<usize>> {
    let d = domain.dim();
    let total = domain.boundary_area();
    let areas: Vec<f64> = (0..2 * d).map(|f| domain.face_area(f / 2)).collect();
    let ideal: Vec<f64> = areas.iter().map(|a| m as f64 * a / total).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut rem: Vec<(usize, f64)> = ideal
        .iter()
        .enumerate()
        .map(|(i, x)| (i, x - x.floor()))
        .collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let assigned: usize = counts.iter().sum();
    for (i, _) in rem.iter().take(m - assigned) {
        counts[*i] += 1;
    }
    Ok(counts)
}

fn nth_root_exact(n: usize, d: usize) -> Option<usize> {
    if d == 0 {
        return None;
    }
    let m = (n as f64).powf(1.0 / d as f64).round() as usize;
    for c in m.saturating_sub(1)..=m + 1 {
        if c.pow(d as u32) == n {
            return Some(c);
        }
    }
    None
}

fn advance(idx: &mut [usize], m: usize) -> bool {
    for v in idx.iter_mut().rev() {
        *v += 1;
        if *v < m {
            return true;
        }
        *v = 0;
    }
    false
}
