use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Rank-4 feature volume laid out as `(channels, X, Y, Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    channels: usize,
    extents: [usize; 3],
    data: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(channels: usize, extents: [usize; 3]) -> Self {
        assert!(channels >= 1 && extents.iter().all(|&e| e >= 1), "grid extents must be positive");
        Self {
            channels,
            extents,
            data: vec![0.0; channels * extents.iter().product::<usize>()],
        }
    }

    pub fn from_data(channels: usize, extents: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if channels == 0 || extents.iter().any(|&e| e == 0) {
            return Err(Error::Argument(format!(
                "grid extents must be positive: c={channels}, {extents:?}"
            )));
        }
        let len = channels * extents.iter().product::<usize>();
        if data.len() != len {
            return Err(shape_err("VoxelGrid::from_data", len, data.len()));
        }
        Ok(Self {
            channels,
            extents,
            data,
        })
    }

    /// Interpret a `(c, X, Y, Z)` tensor as a grid.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match *t.dims() {
            [c, x, y, z] => Self::from_data(c, [x, y, z], t.into_data()),
            _ => Err(shape_err("VoxelGrid::from_tensor", "rank 4", t.dims())),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let [x, y, z] = self.extents;
        Tensor::new(vec![self.channels, x, y, z], self.data.clone()).expect("grid invariant")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    /// Number of voxels `X·Y·Z`.
    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.extents[1] + j) * self.extents[2] + k
    }

    /// Inverse of [`voxel_index`](Self::voxel_index).
    #[inline]
    pub fn voxel_coords(&self, v: usize) -> [usize; 3] {
        let k = v % self.extents[2];
        let rest = v / self.extents[2];
        [rest / self.extents[1], rest % self.extents[1], k]
    }

    #[inline]
    pub fn get(&self, ch: usize, v: usize) -> f64 {
        self.data[ch * self.voxels() + v]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, v: usize, value: f64) {
        let n = self.voxels();
        self.data[ch * n + v] = value;
    }

    #[inline]
    pub fn add_at(&mut self, ch: usize, v: usize, value: f64) {
        let n = self.voxels();
        self.data[ch * n + v] += value;
    }

    /// Value at integer lattice position, `None` outside the grid.
    #[inline]
    pub fn get_lattice(&self, ch: usize, i: i64, j: i64, k: i64) -> Option<f64> {
        let [x, y, z] = self.extents;
        if i < 0 || j < 0 || k < 0 || i as usize >= x || j as usize >= y || k as usize >= z {
            return None;
        }
        Some(self.get(ch, self.voxel_index(i as usize, j as usize, k as usize)))
    }

    /// `(c, n)` view of the features; a bijection with the rank-4 layout.
    pub fn flatten(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.voxels()], self.data.clone()).expect("grid invariant")
    }

    pub fn unflatten(t: Tensor, extents: [usize; 3]) -> Result<Self> {
        let (c, n) = t.shape2()?;
        if n != extents.iter().product::<usize>() {
            return Err(shape_err("VoxelGrid::unflatten", extents, t.dims()));
        }
        Self::from_data(c, extents, t.into_data())
    }

    /// Apply a `c_out × c` channel-mixing matrix at every voxel.
    pub fn mix_channels(&self, m: &Tensor) -> Result<Self> {
        let mixed = m.matmul(&self.flatten())?;
        Self::unflatten(mixed, self.extents)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "VoxelGrid::add")?;
        Ok(Self {
            channels: self.channels,
            extents: self.extents,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            channels: self.channels,
            extents: self.extents,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.channels != other.channels || self.extents != other.extents {
            return Err(shape_err(
                op,
                (self.channels, self.extents),
                (other.channels, other.extents),
            ));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.extents, other.extents);
        assert_eq!(self.channels, other.channels);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Per-voxel 3D sampling coordinates in voxel-index units, dims `(3, X, Y, Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordField(VoxelGrid);

impl CoordField {
    /// The canonical lattice `P` with `P[:, i, j, k] = (i, j, k)`.
    pub fn canonical(extents: [usize; 3]) -> Self {
        let mut g = VoxelGrid::zeros(3, extents);
        for v in 0..g.voxels() {
            let p = g.voxel_coords(v);
            for (axis, &c) in p.iter().enumerate() {
                g.set(axis, v, c as f64);
            }
        }
        Self(g)
    }

    pub fn from_grid(g: VoxelGrid) -> Result<Self> {
        if g.channels() != 3 {
            return Err(shape_err("CoordField::from_grid", 3, g.channels()));
        }
        Ok(Self(g))
    }

    pub fn extents(&self) -> [usize; 3] {
        self.0.extents()
    }

    pub fn voxels(&self) -> usize {
        self.0.voxels()
    }

    #[inline]
    pub fn point(&self, v: usize) -> [f64; 3] {
        [self.0.get(0, v), self.0.get(1, v), self.0.get(2, v)]
    }

    #[inline]
    pub fn set_point(&mut self, v: usize, p: [f64; 3]) {
        for (axis, &c) in p.iter().enumerate() {
            self.0.set(axis, v, c);
        }
    }

    /// `P + offsets`, with the offsets given as a 3-channel grid.
    pub fn displaced(offsets: &VoxelGrid) -> Result<Self> {
        if offsets.channels() != 3 {
            return Err(shape_err("CoordField::displaced", 3, offsets.channels()));
        }
        let base = Self::canonical(offsets.extents());
        Ok(Self(base.0.add(offsets)?))
    }

    pub fn as_grid(&self) -> &VoxelGrid {
        &self.0
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.0
    }
}
