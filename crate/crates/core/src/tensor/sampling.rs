//! Trilinear sampling and its Jacobian with respect to the sampling
//! coordinates.
//!
//! The 8-corner weight vector is the Kronecker product
//! `w(p) = φx ⊗ φy ⊗ φz` with `φ(e) = (1 − e, e)`; corner `a·4 + b·2 + c`
//! is lattice point `(i0 + a, j0 + b, k0 + c)` where `i0 = ⌊x⌋` etc.
//! Corners outside the grid contribute zero with their normal weight.
//! On lattice planes the floor convention picks the cell to the right, so
//! the Jacobian there is the one-sided (right) derivative.

use super::{CoordField, Tensor, VoxelGrid};

#[inline]
fn split(x: f64) -> (i64, f64) {
    let f = x.floor();
    (f as i64, x - f)
}

#[inline]
fn kron3(x: [f64; 2], y: [f64; 2], z: [f64; 2]) -> [f64; 8] {
    let mut w = [0.0; 8];
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                w[a * 4 + b * 2 + c] = x[a] * y[b] * z[c];
            }
        }
    }
    w
}

/// Trilinear weight vector `w(p)` and the base corner `(⌊x⌋, ⌊y⌋, ⌊z⌋)`.
pub fn sampling_weights(p: [f64; 3]) -> ([i64; 3], [f64; 8]) {
    let (i0, dx) = split(p[0]);
    let (j0, dy) = split(p[1]);
    let (k0, dz) = split(p[2]);
    let w = kron3([1.0 - dx, dx], [1.0 - dy, dy], [1.0 - dz, dz]);
    ([i0, j0, k0], w)
}

/// Columns of `∇_p w(p)`: one 8-vector per axis.
pub fn weight_gradients(p: [f64; 3]) -> ([i64; 3], [[f64; 8]; 3]) {
    let (i0, dx) = split(p[0]);
    let (j0, dy) = split(p[1]);
    let (k0, dz) = split(p[2]);
    let (px, py, pz) = ([1.0 - dx, dx], [1.0 - dy, dy], [1.0 - dz, dz]);
    let d = [-1.0, 1.0];
    (
        [i0, j0, k0],
        [kron3(d, py, pz), kron3(px, d, pz), kron3(px, py, d)],
    )
}

#[inline]
fn corner(base: [i64; 3], idx: usize) -> (i64, i64, i64) {
    (
        base[0] + (idx >> 2) as i64,
        base[1] + ((idx >> 1) & 1) as i64,
        base[2] + (idx & 1) as i64,
    )
}

/// `w(p)ᵀ·H[p]` for every channel, written into `out`.
pub fn sample_point(grid: &VoxelGrid, p: [f64; 3], out: &mut [f64]) {
    let (base, w) = sampling_weights(p);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (idx, &wi) in w.iter().enumerate() {
        let (i, j, k) = corner(base, idx);
        for (ch, o) in out.iter_mut().enumerate() {
            if let Some(h) = grid.get_lattice(ch, i, j, k) {
                *o += wi * h;
            }
        }
    }
}

fn jacobian_point(grid: &VoxelGrid, p: [f64; 3], out: &mut [[f64; 3]]) {
    let (base, dw) = weight_gradients(p);
    out.iter_mut().for_each(|o| *o = [0.0; 3]);
    for idx in 0..8 {
        let (i, j, k) = corner(base, idx);
        for (ch, o) in out.iter_mut().enumerate() {
            if let Some(h) = grid.get_lattice(ch, i, j, k) {
                for axis in 0..3 {
                    o[axis] += dw[axis][idx] * h;
                }
            }
        }
    }
}

/// Sample `grid` at every coordinate of `coords`; the output has the grid's
/// channel count and the coordinate field's extents.
pub fn trilinear_sample(grid: &VoxelGrid, coords: &CoordField) -> VoxelGrid {
    let c = grid.channels();
    let mut out = VoxelGrid::zeros(c, coords.extents());
    let mut buf = vec![0.0; c];
    for v in 0..coords.voxels() {
        sample_point(grid, coords.point(v), &mut buf);
        for (ch, &val) in buf.iter().enumerate() {
            out.set(ch, v, val);
        }
    }
    out
}

/// Per-voxel `c × 3` Jacobian of the sampled features with respect to the
/// sampling coordinate: entry `(ch, axis)` is `∂ sample_ch / ∂ p_axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    channels: usize,
    data: Vec<[f64; 3]>,
}

impl Jacobian {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxels(&self) -> usize {
        self.data.len() / self.channels
    }

    /// The `c × 3` block at voxel `v`, row per channel.
    pub fn at(&self, v: usize) -> &[[f64; 3]] {
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    /// Dense `(n, c, 3)` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.voxels(), self.channels, 3],
            self.data.iter().flatten().copied().collect(),
        )
        .expect("jacobian invariant")
    }
}

/// `J[p] = (∇_p w(p))ᵀ H[p]` at every coordinate, with `φ'0 = −1`, `φ'1 = 1`.
pub fn trilinear_jacobian(grid: &VoxelGrid, coords: &CoordField) -> Jacobian {
    let c = grid.channels();
    let n = coords.voxels();
    let mut data = vec![[0.0; 3]; n * c];
    for v in 0..n {
        jacobian_point(grid, coords.point(v), &mut data[v * c..(v + 1) * c]);
    }
    Jacobian { channels: c, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(c: usize, e: [usize; 3], rng: &mut ChaCha8Rng) -> VoxelGrid {
        let n = c * e.iter().product::<usize>();
        VoxelGrid::from_data(c, e, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn single(p: [f64; 3]) -> CoordField {
        let mut c = CoordField::canonical([1, 1, 1]);
        c.set_point(0, p);
        c
    }

    #[test]
    fn canonical_coords_reproduce_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_grid(3, [4, 3, 5], &mut rng);
        let out = trilinear_sample(&g, &CoordField::canonical(g.extents()));
        assert_eq!(out, g);
    }

    #[test]
    fn midpoint_average() {
        let mut g = VoxelGrid::zeros(1, [2, 1, 1]);
        g.set(0, 1, 8.0);
        let out = trilinear_sample(&g, &single([0.5, 0.0, 0.0]));
        assert_eq!(out.get(0, 0), 4.0);
    }

    #[test]
    fn out_of_bounds_is_zero_padded() {
        let g = VoxelGrid::from_data(1, [2, 2, 2], vec![1.0; 8]).unwrap();
        // half-way past the last x plane: half the weight lands outside
        let out = trilinear_sample(&g, &single([1.5, 0.0, 0.0]));
        assert_eq!(out.get(0, 0), 0.5);
        let far = trilinear_sample(&g, &single([-10.0, 40.0, 3.0]));
        assert_eq!(far.get(0, 0), 0.0);
    }

    #[test]
    fn weights_form_partition_of_unity() {
        let (_, w) = sampling_weights([0.3, 1.7, -2.25]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let (_, dw) = weight_gradients([0.3, 1.7, -2.25]);
        for col in dw {
            assert!(col.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn constant_grid_has_zero_jacobian() {
        let g = VoxelGrid::from_data(2, [3, 3, 3], vec![4.5; 54]).unwrap();
        let j = trilinear_jacobian(&g, &single([1.2, 0.7, 1.9]));
        for row in j.at(0) {
            assert!(row.iter().all(|d| d.abs() < 1e-14));
        }
    }

    #[test]
    fn linear_ramp_jacobian() {
        let mut g = VoxelGrid::zeros(1, [4, 4, 4]);
        for v in 0..g.voxels() {
            let [i, _, _] = g.voxel_coords(v);
            g.set(0, v, 2.0 * i as f64);
        }
        for p in [[1.3, 2.1, 0.4], [0.5, 0.5, 2.9], [2.0, 1.0, 1.0]] {
            let j = trilinear_jacobian(&g, &single(p));
            let row = j.at(0)[0];
            assert!((row[0] - 2.0).abs() < 1e-14);
            assert!(row[1].abs() < 1e-14 && row[2].abs() < 1e-14);
        }
    }

    #[test]
    fn lattice_plane_uses_right_cell() {
        // g = x² sampled on the lattice: left slope 1, right slope 3 at x = 1
        let mut g = VoxelGrid::zeros(1, [3, 1, 1]);
        for i in 0..3 {
            g.set(0, i, (i * i) as f64);
        }
        let j = trilinear_jacobian(&g, &single([1.0, 0.0, 0.0]));
        assert_eq!(j.at(0)[0][0], 3.0);
    }

    #[test]
    fn tensor_view_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_grid(2, [3, 3, 3], &mut rng);
        let coords = CoordField::canonical([2, 2, 1]);
        let j = trilinear_jacobian(&g, &coords);
        let t = j.to_tensor();
        assert_eq!(t.dims(), &[4, 2, 3]);
        assert_eq!(t.data()[(3 * 2 + 1) * 3 + 2], j.at(3)[1][2]);
    }
}
