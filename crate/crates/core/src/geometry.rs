//! Temporal geometry fusion over per-ray depth distributions.
//!
//! The previous frame's fused distribution is carried into the current
//! camera frame, blended with the new prediction through a per-ray gate
//! `η_g = sigmoid(f(cat(Ĥ_g, G)))`, and the convex combination
//! `H_g = (1 − η_g)·Ĥ_g + η_g·G` is the fused geometry used for lifting.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{RigidTransform, Tensor};

const SIMPLEX_TOL: f64 = 1e-9;

/// Centers `d_min + (k + ½)·Δ` of `K` uniform bins spanning `[d_min, d_max]`.
pub fn uniform_bin_centers(d_min: f64, d_max: f64, k: usize) -> Result<Vec<f64>> {
    if k < 2 || !(d_max > d_min) {
        return Err(Error::Argument(format!("need K ≥ 2 and d_max > d_min, got K={k}, [{d_min}, {d_max}]")));
    }
    let width = (d_max - d_min) / k as f64;
    Ok((0..k).map(|i| d_min + (i as f64 + 0.5) * width).collect())
}

/// Per-ray discrete depth distributions over shared uniform bins.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution {
    probs: Tensor,
    bin_centers: Vec<f64>,
}

impl DepthDistribution {
    /// Validates that every row is on the simplex and the bins are uniform.
    pub fn new(probs: Tensor, bin_centers: Vec<f64>) -> Result<Self> {
        let d = Self::new_unchecked(probs, bin_centers)?;
        for r in 0..d.rays() {
            let row = d.row(r);
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Argument(format!("ray {r} is not on the simplex (sum {s})")));
            }
        }
        Ok(d)
    }

    fn new_unchecked(probs: Tensor, bin_centers: Vec<f64>) -> Result<Self> {
        let (_, k) = probs.shape2()?;
        if k != bin_centers.len() {
            return Err(shape_err("DepthDistribution", bin_centers.len(), k));
        }
        if k >= 2 {
            let step = bin_centers[1] - bin_centers[0];
            let uniform = step > 0.0
                && bin_centers
                    .windows(2)
                    .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-9 * step.max(1.0));
            if !uniform {
                return Err(Error::Argument("bin centers must be strictly increasing and uniform".into()));
            }
        }
        Ok(Self { probs, bin_centers })
    }

    /// All mass at the bin nearest to each depth.
    pub fn one_hot(depth_bins: &[usize], bin_centers: Vec<f64>) -> Result<Self> {
        let k = bin_centers.len();
        let mut probs = Tensor::zeros(&[depth_bins.len(), k]);
        for (r, &b) in depth_bins.iter().enumerate() {
            if b >= k {
                return Err(Error::Argument(format!("bin {b} out of range for K={k}")));
            }
            probs.set2(r, b, 1.0);
        }
        Self::new(probs, bin_centers)
    }

    pub fn uniform(rays: usize, bin_centers: Vec<f64>) -> Result<Self> {
        let k = bin_centers.len();
        Self::new(Tensor::full(&[rays, k], 1.0 / k as f64), bin_centers)
    }

    pub fn rays(&self) -> usize {
        self.probs.dims()[0]
    }

    pub fn bins(&self) -> usize {
        self.bin_centers.len()
    }

    pub fn bin_centers(&self) -> &[f64] {
        &self.bin_centers
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_centers[1] - self.bin_centers[0]
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let k = self.bins();
        &self.probs.data()[r * k..(r + 1) * k]
    }

    pub fn argmax(&self, r: usize) -> usize {
        let row = self.row(r);
        (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
    }

    /// Largest `|row sum − 1|` and the smallest entry.
    pub fn simplex_error(&self) -> (f64, f64) {
        let mut worst: f64 = 0.0;
        let mut min = f64::INFINITY;
        for r in 0..self.rays() {
            let row = self.row(r);
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            min = row.iter().fold(min, |m, &p| m.min(p));
        }
        (worst, min)
    }

    pub fn to_tensors(&self) -> [Tensor; 2] {
        [
            self.probs.clone(),
            Tensor::new(vec![self.bins()], self.bin_centers.clone()).expect("bins non-empty"),
        ]
    }

    pub fn from_tensors(probs: Tensor, centers: Tensor) -> Result<Self> {
        Self::new(probs, centers.into_data())
    }

    fn check_pair(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.probs.dims() != other.probs.dims() {
            return Err(shape_err(op, self.probs.dims(), other.probs.dims()));
        }
        Ok(())
    }
}

/// Ray bundle of one camera, expressed in that camera's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRays {
    origins: Vec<[f64; 3]>,
    directions: Vec<[f64; 3]>,
}

impl CameraRays {
    pub fn new(origins: Vec<[f64; 3]>, directions: Vec<[f64; 3]>) -> Result<Self> {
        if origins.len() != directions.len() || origins.is_empty() {
            return Err(shape_err("CameraRays", origins.len(), directions.len()));
        }
        for (r, d) in directions.iter().enumerate() {
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(Error::Argument(format!("ray {r} direction is not unit length ({norm})")));
            }
        }
        Ok(Self { origins, directions })
    }

    /// Parallel rays along `+z` of the camera frame, one per origin.
    pub fn parallel(origins: Vec<[f64; 3]>) -> Result<Self> {
        let n = origins.len();
        Self::new(origins, vec![[0.0, 0.0, 1.0]; n])
    }

    /// Pinhole rays through the camera-frame origin.
    pub fn pinhole(directions: Vec<[f64; 3]>) -> Result<Self> {
        let n = directions.len();
        let directions = directions
            .into_iter()
            .map(|d| {
                let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                [d[0] / norm, d[1] / norm, d[2] / norm]
            })
            .collect();
        Self::new(vec![[0.0; 3]; n], directions)
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origin(&self, r: usize) -> [f64; 3] {
        self.origins[r]
    }

    pub fn direction(&self, r: usize) -> [f64; 3] {
        self.directions[r]
    }

    /// Camera-frame point at depth `d` along ray `r`.
    #[inline]
    pub fn point(&self, r: usize, d: f64) -> [f64; 3] {
        let (o, u) = (self.origins[r], self.directions[r]);
        [o[0] + d * u[0], o[1] + d * u[1], o[2] + d * u[2]]
    }

    /// Ray whose line passes closest to `q` (lowest index on ties), and the
    /// depth of `q` projected onto it.
    pub fn nearest(&self, q: [f64; 3]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY, 0.0);
        for r in 0..self.len() {
            let (o, u) = (self.origins[r], self.directions[r]);
            let rel = [q[0] - o[0], q[1] - o[1], q[2] - o[2]];
            let s = rel[0] * u[0] + rel[1] * u[1] + rel[2] * u[2];
            let perp = [rel[0] - s * u[0], rel[1] - s * u[1], rel[2] - s * u[2]];
            let dist = perp[0] * perp[0] + perp[1] * perp[1] + perp[2] * perp[2];
            if dist < best.1 {
                best = (r, dist, s);
            }
        }
        (best.0, best.2)
    }
}

/// Previous-to-current camera motion together with the camera's rays.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub transform: RigidTransform,
    pub rays: CameraRays,
}

/// Gate network `f_{η_g}`: a linear map from `cat(Ĥ_g, G)` (length `2K`) to a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl GateParams {
    pub fn zeros(k: usize) -> Self {
        Self {
            weight: vec![0.0; 2 * k],
            bias: 0.0,
        }
    }
}

/// Carry `h_prev` into the current camera frame.
///
/// Each `(ray, bin)` mass is lifted to its 3D point, moved by the pose,
/// assigned to the nearest current ray and split linearly between the two
/// bins enclosing its projected depth. Mass outside `[d_1, d_K]` is dropped.
/// Rows are renormalized afterwards; a row that received nothing becomes
/// uniform.
pub fn warp_geometry(h_prev: &DepthDistribution, pose: &CameraPose) -> Result<DepthDistribution> {
    let rays = h_prev.rays();
    if pose.rays.len() != rays {
        return Err(shape_err("warp_geometry", rays, pose.rays.len()));
    }
    let k = h_prev.bins();
    let centers = h_prev.bin_centers();
    let (d0, width) = (centers[0], h_prev.bin_width());
    let last = (k - 1) as f64;
    let mut out = Tensor::zeros(&[rays, k]);
    for r in 0..rays {
        for (b, &mass) in h_prev.row(r).iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let q = pose.transform.apply(pose.rays.point(r, centers[b]));
            let (target, depth) = pose.rays.nearest(q);
            let mut pos = (depth - d0) / width;
            // absorb round-off at the range ends
            if pos < 0.0 && pos > -1e-9 {
                pos = 0.0;
            }
            if pos > last && pos < last + 1e-9 {
                pos = last;
            }
            if !(0.0..=last).contains(&pos) {
                continue;
            }
            let lo = (pos.floor() as usize).min(k - 1);
            let frac = pos - lo as f64;
            let row = &mut out.data_mut()[target * k..(target + 1) * k];
            row[lo] += mass * (1.0 - frac);
            if frac > 0.0 {
                row[lo + 1] += mass * frac;
            }
        }
    }
    for r in 0..rays {
        let row = &mut out.data_mut()[r * k..(r + 1) * k];
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|p| *p /= s);
        } else {
            row.iter_mut().for_each(|p| *p = 1.0 / k as f64);
        }
    }
    DepthDistribution::new_unchecked(out, centers.to_vec())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-ray gate `sigmoid(weight · cat(h_row, g_row) + bias)`.
pub fn gate(h_warped: &DepthDistribution, g_now: &DepthDistribution, p: &GateParams) -> Result<Vec<f64>> {
    h_warped.check_pair(g_now, "gate")?;
    let k = g_now.bins();
    if p.weight.len() != 2 * k {
        return Err(shape_err("gate", 2 * k, p.weight.len()));
    }
    let (wh, wg) = p.weight.split_at(k);
    Ok((0..g_now.rays())
        .map(|r| {
            let mut logit = p.bias;
            for (w, h) in wh.iter().zip(h_warped.row(r)) {
                logit += w * h;
            }
            for (w, g) in wg.iter().zip(g_now.row(r)) {
                logit += w * g;
            }
            sigmoid(logit)
        })
        .collect())
}

/// Per-ray convex combination `(1 − η)·Ĥ + η·G`, evaluated as `Ĥ + η·(G − Ĥ)`
/// so that agreement (`Ĥ = G`) is reproduced exactly.
pub fn geometry_update(
    h_warped: &DepthDistribution,
    g_now: &DepthDistribution,
    gates: &[f64],
) -> Result<DepthDistribution> {
    h_warped.check_pair(g_now, "geometry_update")?;
    if gates.len() != g_now.rays() {
        return Err(shape_err("geometry_update", g_now.rays(), gates.len()));
    }
    if let Some(g) = gates.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::Argument(format!("gate {g} outside [0, 1]")));
    }
    let k = g_now.bins();
    let mut out = h_warped.probs.clone();
    for (r, &eta) in gates.iter().enumerate() {
        let row = &mut out.data_mut()[r * k..(r + 1) * k];
        for (h, &g) in row.iter_mut().zip(g_now.row(r)) {
            *h += eta * (g - *h);
        }
    }
    DepthDistribution::new_unchecked(out, g_now.bin_centers.clone())
}
