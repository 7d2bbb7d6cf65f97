//! Gaussian resampling pyramid for channel stacks and displacement fields.
//!
//! Downsampling applies a separable 5-tap Gaussian prefilter (sigma =
//! sqrt(3)/2 voxels, the standard anti-alias sigma for factor-2 decimation,
//! renormalized to unit sum, clamped borders) and then keeps even-indexed
//! samples per axis, so level L has `ceil(dims / 2^L)` voxels per axis.

use crate::volgrid::{check_same_grid, DisplacementField, GridMeta, ScalarVolume};
use crate::{Error, Result};

/// Role of a channel in the data term; mask channels get their own weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    Intensity,
    Mask,
}

/// One registration input channel with its data-term weight.
#[derive(Debug, Clone)]
pub struct Channel {
    pub name: String,
    pub kind: ChannelKind,
    pub volume: ScalarVolume,
    pub weight: f64,
}

/// Ordered weighted channels sharing one grid; the registration's image
/// representation. Mask channels are binary at full resolution and become
/// fractional at coarser pyramid levels.
#[derive(Debug, Clone)]
pub struct ChannelStack {
    channels: Vec<Channel>,
}

impl ChannelStack {
    pub fn new(channels: Vec<Channel>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::ChannelMismatch("empty channel stack".into()));
        }
        let meta = channels[0].volume.meta.clone();
        for c in &channels[1..] {
            check_same_grid(&meta, &c.volume.meta, "channel stack")?;
        }
        for c in &channels {
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(Error::ChannelMismatch(format!(
                    "channel `{}` has invalid weight {}",
                    c.name, c.weight
                )));
            }
        }
        Ok(ChannelStack { channels })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.channels[0].volume.meta
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Set data-term weights by channel kind.
    pub fn set_weights(&mut self, intensity: f64, mask: f64) {
        for c in &mut self.channels {
            c.weight = match c.kind {
                ChannelKind::Intensity => intensity,
                ChannelKind::Mask => mask,
            };
        }
    }

    /// Drop mask channels (the intensity-based baseline).
    pub fn without_masks(&self) -> Result<ChannelStack> {
        ChannelStack::new(
            self.channels
                .iter()
                .filter(|c| c.kind == ChannelKind::Intensity)
                .cloned()
                .collect(),
        )
    }

    /// Check that `other` has the same channel names in the same order.
    pub fn check_aligned(&self, other: &ChannelStack) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ChannelMismatch(format!(
                "{} vs {} channels",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.channels.iter().zip(&other.channels) {
            if a.name != b.name {
                return Err(Error::ChannelMismatch(format!(
                    "channel `{}` vs `{}`",
                    a.name, b.name
                )));
            }
        }
        Ok(())
    }
}

/// Multi-resolution stack; index 0 is full resolution, each next level is
/// ceil-halved per axis.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<ChannelStack>,
}

impl Pyramid {
    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &ChannelStack {
        &self.levels[l]
    }
}

const KERNEL_RADIUS: usize = 2;

/// Normalized 5-tap Gaussian, sigma = sqrt(3)/2 voxels.
fn kernel() -> [f64; 2 * KERNEL_RADIUS + 1] {
    let sigma = 3f64.sqrt() / 2.0;
    let mut w = [0.0; 5];
    for (k, slot) in w.iter_mut().enumerate() {
        let d = k as f64 - KERNEL_RADIUS as f64;
        *slot = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let sum: f64 = w.iter().sum();
    for slot in &mut w {
        *slot /= sum;
    }
    w
}

fn convolve_axis(values: &mut Vec<f64>, dims: [usize; 3], axis: usize, w: &[f64; 5]) {
    let [nx, ny, nz] = dims;
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let n = dims[axis];
    let mut out = vec![0f64; values.len()];
    let mut line = vec![0f64; n];
    // iterate every 1D line along `axis`
    let (la, lb) = match axis {
        0 => (ny, nz),
        1 => (nx, nz),
        _ => (nx, ny),
    };
    let (sa, sb) = match axis {
        0 => (nx, nx * ny),
        1 => (1, nx * ny),
        _ => (1, nx),
    };
    for b in 0..lb {
        for a in 0..la {
            let base = a * sa + b * sb;
            for i in 0..n {
                line[i] = values[base + i * stride];
            }
            for i in 0..n {
                let mut acc = 0.0;
                for (k, &wk) in w.iter().enumerate() {
                    let off = i as isize + k as isize - KERNEL_RADIUS as isize;
                    let j = off.clamp(0, n as isize - 1) as usize;
                    acc += wk * line[j];
                }
                out[base + i * stride] = acc;
            }
        }
    }
    *values = out;
}

/// Gaussian-prefilter and decimate by 2 per axis (even samples kept).
/// Output dims are `ceil(dims / 2)`; spacing doubles, origin is unchanged
/// (voxel 2i maps onto coarse voxel i).
pub fn gaussian_downsample(vol: &ScalarVolume) -> ScalarVolume {
    let w = kernel();
    let dims = vol.meta.dims;
    let mut buf: Vec<f64> = vol.values().iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        if dims[axis] > 1 {
            convolve_axis(&mut buf, dims, axis, &w);
        }
    }
    let out_dims = [
        dims[0].div_ceil(2),
        dims[1].div_ceil(2),
        dims[2].div_ceil(2),
    ];
    let out_meta = GridMeta {
        dims: out_dims,
        spacing: [
            vol.meta.spacing[0] * 2.0,
            vol.meta.spacing[1] * 2.0,
            vol.meta.spacing[2] * 2.0,
        ],
        origin: vol.meta.origin,
    };
    let mut out = Vec::with_capacity(out_meta.voxel_count());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                out.push(buf[vol.meta.index(2 * x, 2 * y, 2 * z)] as f32);
            }
        }
    }
    ScalarVolume::with_nan(out_meta, out).expect("dims computed from meta")
}

/// Build a pyramid: level 0 is the input, each next level Gaussian-downsampled
/// per channel (masks become fractional); weights carried unchanged.
pub fn build_pyramid(stack: &ChannelStack, levels: usize) -> Result<Pyramid> {
    if levels == 0 {
        return Err(Error::InvalidConfig("pyramid needs at least 1 level".into()));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(stack.clone());
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let next: Vec<Channel> = prev
            .channels()
            .iter()
            .map(|c| Channel {
                name: c.name.clone(),
                kind: c.kind,
                volume: gaussian_downsample(&c.volume),
                weight: c.weight,
            })
            .collect();
        out.push(ChannelStack::new(next)?);
    }
    Ok(Pyramid { levels: out })
}

/// Interpolate a coarse-level field onto the next finer grid: each component
/// is trilinearly sampled at `(target voxel)/2` and doubled (displacements are
/// in level-local voxel units, which double when the grid doubles).
pub fn upsample_field(field: &DisplacementField, target: &GridMeta) -> Result<DisplacementField> {
    for a in 0..3 {
        if target.dims[a].div_ceil(2) != field.meta.dims[a] {
            return Err(Error::GridMismatch(format!(
                "upsample target {:?} is not the 2x refinement of {:?}",
                target.dims, field.meta.dims
            )));
        }
    }
    let mut vectors = Vec::with_capacity(target.voxel_count());
    let src = field.vectors();
    for p in target.coords() {
        let coord = [p[0] as f64 / 2.0, p[1] as f64 / 2.0, p[2] as f64 / 2.0];
        let taps = field.meta.trilinear_taps(coord);
        let mut v = [0f32; 3];
        for c in 0..3 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += taps.w[k] * src[taps.idx[k]][c] as f64;
            }
            v[c] = (2.0 * acc) as f32;
        }
        vectors.push(v);
    }
    DisplacementField::new(target.clone(), vectors)
}
