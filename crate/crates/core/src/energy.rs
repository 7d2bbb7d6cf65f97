//! The registration objective: per-voxel weighted multi-channel SSD data term
//! plus pairwise quadratic displacement regularization over 6-connected
//! neighbor pairs. Displacements and neighbor offsets are in voxel units.

use serde::Serialize;

use crate::pyramid::{Channel, ChannelStack};
use crate::volgrid::{check_same_grid, DisplacementField, ScalarVolume};
use crate::{Error, Result};

/// Regularization parameters; channel weights live on the stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    pub regularization_weight: f64,
    pub regularization_scale: f64,
    pub regularization_exponent: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            regularization_weight: 0.1,
            regularization_scale: 1.0,
            regularization_exponent: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyReport {
    pub data_term: f64,
    pub regularization_term: f64,
    pub total: f64,
}

/// Min-max rescale each channel independently to [0,1]; constant channels map
/// to all zeros. Weights are unchanged.
pub fn normalize_channels(stack: &ChannelStack) -> ChannelStack {
    let channels: Vec<Channel> = stack
        .channels()
        .iter()
        .map(|c| {
            let values = c.volume.values();
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in values {
                lo = lo.min(v as f64);
                hi = hi.max(v as f64);
            }
            let range = hi - lo;
            let out: Vec<f32> = if range > 0.0 {
                values
                    .iter()
                    .map(|&v| ((v as f64 - lo) / range) as f32)
                    .collect()
            } else {
                vec![0.0; values.len()]
            };
            Channel {
                name: c.name.clone(),
                kind: c.kind,
                volume: ScalarVolume::with_nan(c.volume.meta.clone(), out)
                    .expect("same length as input"),
                weight: c.weight,
            }
        })
        .collect();
    ChannelStack::new(channels).expect("non-empty input stack")
}

/// Weighted channel-wise SSD at reference voxel `p` displaced by `u`:
/// `sum_c w_c * (M_c(p+u) - F_c(p))^2` with the moving stack sampled
/// trilinearly.
pub fn unary_cost(
    fixed: &ChannelStack,
    moving: &ChannelStack,
    p: [usize; 3],
    u: [f64; 3],
) -> Result<f64> {
    if fixed.len() != moving.len() {
        return Err(Error::ChannelMismatch(format!(
            "{} vs {} channels",
            fixed.len(),
            moving.len()
        )));
    }
    let idx = fixed.meta().index(p[0], p[1], p[2]);
    Ok(data_cost_at(fixed, moving, idx, [
        p[0] as f64 + u[0],
        p[1] as f64 + u[1],
        p[2] as f64 + u[2],
    ]))
}

/// Hot-path form of [`unary_cost`]: fixed-stack flat index plus the
/// moving-space coordinate, channel alignment already verified.
#[inline]
pub(crate) fn data_cost_at(
    fixed: &ChannelStack,
    moving: &ChannelStack,
    fixed_idx: usize,
    coord: [f64; 3],
) -> f64 {
    let taps = moving.meta().trilinear_taps(coord);
    let mut acc = 0.0;
    for (fc, mc) in fixed.channels().iter().zip(moving.channels()) {
        let d = mc.volume.sample_taps(&taps) - fc.volume.values()[fixed_idx] as f64;
        acc += fc.weight * d * d;
    }
    acc
}

/// Regularization between two neighboring displacements:
/// `weight * (|u_p - u_q| / scale)^exponent`.
#[inline]
pub fn pairwise_cost(u_p: [f64; 3], u_q: [f64; 3], params: &EnergyParams) -> f64 {
    let dx = u_p[0] - u_q[0];
    let dy = u_p[1] - u_q[1];
    let dz = u_p[2] - u_q[2];
    let sq = dx * dx + dy * dy + dz * dz;
    let s = params.regularization_scale;
    if params.regularization_exponent == 2.0 {
        params.regularization_weight * sq / (s * s)
    } else {
        params.regularization_weight * (sq.sqrt() / s).powf(params.regularization_exponent)
    }
}

/// Full objective: data term summed over voxels, regularization summed over
/// unordered 6-connected neighbor pairs.
pub fn total_energy(
    field: &DisplacementField,
    fixed: &ChannelStack,
    moving: &ChannelStack,
    params: &EnergyParams,
) -> Result<EnergyReport> {
    check_same_grid(&field.meta, fixed.meta(), "field vs fixed stack")?;
    fixed.check_aligned(moving)?;

    let meta = fixed.meta();
    let [nx, ny, nz] = meta.dims;
    let vectors = field.vectors();

    let mut data = 0.0;
    for (idx, p) in meta.coords().enumerate() {
        let u = vectors[idx];
        data += data_cost_at(fixed, moving, idx, [
            p[0] as f64 + u[0] as f64,
            p[1] as f64 + u[1] as f64,
            p[2] as f64 + u[2] as f64,
        ]);
    }

    let mut reg = 0.0;
    let uf = |i: usize| -> [f64; 3] {
        let v = vectors[i];
        [v[0] as f64, v[1] as f64, v[2] as f64]
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = meta.index(x, y, z);
                if x + 1 < nx {
                    reg += pairwise_cost(uf(i), uf(i + 1), params);
                }
                if y + 1 < ny {
                    reg += pairwise_cost(uf(i), uf(i + nx), params);
                }
                if z + 1 < nz {
                    reg += pairwise_cost(uf(i), uf(i + nx * ny), params);
                }
            }
        }
    }

    Ok(EnergyReport {
        data_term: data,
        regularization_term: reg,
        total: data + reg,
    })
}
