//! Volumetric data model: grids, scalar/label volumes, displacement fields,
//! interpolation primitives, and MetaImage file I/O.
//!
//! Values are stored x-fastest: `index = x + nx * (y + ny * z)`. All modules
//! assume this order.

mod io;

use std::collections::BTreeMap;

use crate::{Error, Result};

pub use io::{
    read_field, read_label_volume, read_scalar_volume, read_volume, write_field, write_volume,
    Volume,
};

/// Voxel grid geometry: counts, physical spacing (mm), world origin (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeta {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridMeta {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite origin {origin:?}")));
        }
        Ok(GridMeta {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit-spacing grid at the world origin.
    pub fn isotropic(dims: [usize; 3]) -> Self {
        GridMeta {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Iterate voxel coordinates in storage order (x fastest).
    pub fn coords(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |z| (0..ny).flat_map(move |y| (0..nx).map(move |x| [x, y, z])))
    }

    pub fn same_grid(&self, other: &GridMeta) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    fn check_same(&self, other: &GridMeta, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Clamped trilinear taps for a continuous voxel coordinate: eight
    /// flat indices and their weights. Callers that sample several channels
    /// at one coordinate compute the taps once.
    #[inline]
    pub fn trilinear_taps(&self, coord: [f64; 3]) -> TrilinearTaps {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut fr = [0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let c = coord[a].clamp(0.0, (n - 1) as f64);
            let f = c.floor();
            let i0 = f as usize;
            lo[a] = i0;
            hi[a] = (i0 + 1).min(n - 1);
            fr[a] = c - f;
        }
        let [nx, ny, _] = self.dims;
        let row = |y: usize, z: usize| nx * (y + ny * z);
        let (wx1, wy1, wz1) = (fr[0], fr[1], fr[2]);
        let (wx0, wy0, wz0) = (1.0 - wx1, 1.0 - wy1, 1.0 - wz1);
        TrilinearTaps {
            idx: [
                lo[0] + row(lo[1], lo[2]),
                hi[0] + row(lo[1], lo[2]),
                lo[0] + row(hi[1], lo[2]),
                hi[0] + row(hi[1], lo[2]),
                lo[0] + row(lo[1], hi[2]),
                hi[0] + row(lo[1], hi[2]),
                lo[0] + row(hi[1], hi[2]),
                hi[0] + row(hi[1], hi[2]),
            ],
            w: [
                wx0 * wy0 * wz0,
                wx1 * wy0 * wz0,
                wx0 * wy1 * wz0,
                wx1 * wy1 * wz0,
                wx0 * wy0 * wz1,
                wx1 * wy0 * wz1,
                wx0 * wy1 * wz1,
                wx1 * wy1 * wz1,
            ],
        }
    }

    /// Round-to-nearest voxel (ties away from zero per axis), clamped to the
    /// grid.
    #[inline]
    pub fn nearest_index(&self, coord: [f64; 3]) -> usize {
        let mut v = [0usize; 3];
        for a in 0..3 {
            let r = coord[a].round(); // f64::round ties away from zero
            v[a] = r.clamp(0.0, (self.dims[a] - 1) as f64) as usize;
        }
        self.index(v[0], v[1], v[2])
    }
}

/// Eight-corner interpolation stencil produced by [`GridMeta::trilinear_taps`].
#[derive(Debug, Clone, Copy)]
pub struct TrilinearTaps {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

/// 3D grid of real values (fat/water fractions, Jacobian maps, statistic maps).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub meta: GridMeta,
    values: Vec<f32>,
}

impl ScalarVolume {
    /// Construct from values in storage order; rejects non-finite entries.
    pub fn new(meta: GridMeta, values: Vec<f32>) -> Result<Self> {
        if values.len() != meta.voxel_count() {
            return Err(Error::InvalidGrid(format!(
                "value count {} != voxel count {}",
                values.len(),
                meta.voxel_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite voxel value".into()));
        }
        Ok(ScalarVolume { meta, values })
    }

    /// Construct without the finiteness check. Statistic maps use NaN as the
    /// invalid-voxel flag, which the file format round-trips.
    pub fn with_nan(meta: GridMeta, values: Vec<f32>) -> Result<Self> {
        if values.len() != meta.voxel_count() {
            return Err(Error::InvalidGrid(format!(
                "value count {} != voxel count {}",
                values.len(),
                meta.voxel_count()
            )));
        }
        Ok(ScalarVolume { meta, values })
    }

    pub fn constant(meta: GridMeta, value: f32) -> Self {
        let n = meta.voxel_count();
        ScalarVolume {
            meta,
            values: vec![value; n],
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.meta.index(x, y, z)]
    }

    #[inline]
    pub fn sample_taps(&self, taps: &TrilinearTaps) -> f64 {
        let v = &self.values;
        let mut acc = 0.0;
        for k in 0..8 {
            acc += taps.w[k] * v[taps.idx[k]] as f64;
        }
        acc
    }
}

/// Label storage width, preserved across file round-trips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelWidth {
    U8,
    U16,
}

/// 3D grid of integer tissue labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub meta: GridMeta,
    labels: Vec<u16>,
    pub width: LabelWidth,
    names: BTreeMap<u16, String>,
}

impl LabelVolume {
    /// Construct from labels in storage order. Foreground ids missing from
    /// `names` get a synthesized `label_<id>` entry so every foreground id
    /// resolves to a name.
    pub fn new(
        meta: GridMeta,
        labels: Vec<u16>,
        width: LabelWidth,
        mut names: BTreeMap<u16, String>,
    ) -> Result<Self> {
        if labels.len() != meta.voxel_count() {
            return Err(Error::InvalidGrid(format!(
                "label count {} != voxel count {}",
                labels.len(),
                meta.voxel_count()
            )));
        }
        if width == LabelWidth::U8 {
            if let Some(&bad) = labels.iter().find(|&&l| l > u8::MAX as u16) {
                return Err(Error::InvalidGrid(format!(
                    "label {bad} does not fit the declared 8-bit storage"
                )));
            }
        }
        for &l in &labels {
            if l != 0 {
                names.entry(l).or_insert_with(|| format!("label_{l}"));
            }
        }
        Ok(LabelVolume {
            meta,
            labels,
            width,
            names,
        })
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn names(&self) -> &BTreeMap<u16, String> {
        &self.names
    }

    pub fn name_of(&self, label: u16) -> &str {
        self.names.get(&label).map(String::as_str).unwrap_or("")
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.meta.index(x, y, z)]
    }

    /// Sorted foreground label ids present in the volume.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen = std::collections::BTreeSet::new();
        for &l in &self.labels {
            if l != 0 {
                seen.insert(l);
            }
        }
        seen.into_iter().collect()
    }
}

/// Per-voxel 3-vectors on the reference grid, in voxel units; `p + u(p)` is
/// the moving-space sample coordinate for reference voxel `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub meta: GridMeta,
    vectors: Vec<[f32; 3]>,
}

impl DisplacementField {
    pub fn new(meta: GridMeta, vectors: Vec<[f32; 3]>) -> Result<Self> {
        if vectors.len() != meta.voxel_count() {
            return Err(Error::InvalidGrid(format!(
                "vector count {} != voxel count {}",
                vectors.len(),
                meta.voxel_count()
            )));
        }
        if vectors.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidGrid("non-finite displacement".into()));
        }
        Ok(DisplacementField { meta, vectors })
    }

    pub fn zero(meta: GridMeta) -> Self {
        let n = meta.voxel_count();
        DisplacementField {
            meta,
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn vectors(&self) -> &[[f32; 3]] {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.vectors
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        self.vectors[self.meta.index(x, y, z)]
    }

    /// Moving-space coordinate sampled for reference voxel `p`.
    #[inline]
    pub fn target(&self, p: [usize; 3]) -> [f64; 3] {
        let u = self.vectors[self.meta.index(p[0], p[1], p[2])];
        [
            p[0] as f64 + u[0] as f64,
            p[1] as f64 + u[1] as f64,
            p[2] as f64 + u[2] as f64,
        ]
    }
}

/// Trilinear interpolation of the eight surrounding grid values; coordinates
/// outside the grid clamp to the border voxel.
pub fn trilinear_sample(vol: &ScalarVolume, coord: [f64; 3]) -> f64 {
    vol.sample_taps(&vol.meta.trilinear_taps(coord))
}

/// Label of the round-to-nearest voxel (ties away from zero per axis);
/// out-of-range coordinates clamp to the border.
pub fn nearest_sample(labels: &LabelVolume, coord: [f64; 3]) -> u16 {
    labels.labels[labels.meta.nearest_index(coord)]
}

/// Voxel-wise fat fraction `fat/(water+fat)` and water fraction
/// `water/(water+fat)`. Voxels with zero summed signal map to 0 in both
/// outputs.
pub fn compute_fractions(
    water: &ScalarVolume,
    fat: &ScalarVolume,
) -> Result<(ScalarVolume, ScalarVolume)> {
    water
        .meta
        .check_same(&fat.meta, "compute_fractions inputs")?;
    let n = water.meta.voxel_count();
    let mut ff = vec![0f32; n];
    let mut wf = vec![0f32; n];
    for i in 0..n {
        let w = water.values[i] as f64;
        let f = fat.values[i] as f64;
        debug_assert!(w >= 0.0 && f >= 0.0, "signal volumes must be non-negative");
        let s = w + f;
        if s > 0.0 {
            ff[i] = (f / s) as f32;
            wf[i] = (w / s) as f32;
        }
    }
    Ok((
        ScalarVolume::new(water.meta.clone(), ff)?,
        ScalarVolume::new(water.meta.clone(), wf)?,
    ))
}

pub(crate) fn check_same_grid(a: &GridMeta, b: &GridMeta, what: &str) -> Result<()> {
    a.check_same(b, what)
}
