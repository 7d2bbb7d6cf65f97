//! The registration driver: pyramid scheduling, axis-aligned move generation,
//! block-wise exact graph-cut optimization, convergence control.
//!
//! Each sweep tries the six +/-step moves per axis. For every move the block
//! grid is visited twice (unshifted, then shifted by half a block) so block
//! seams cannot lock in place, and within each pass blocks are split by
//! parity of their block coordinates: same-parity blocks share no 6-connected
//! voxel pair, so they can be solved concurrently and accepted moves combine
//! additively. Every accepted block solve lowers the total energy by more
//! than `block_energy_epsilon`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{
    data_cost_at, normalize_channels, pairwise_cost, total_energy, EnergyParams, EnergyReport,
};
use crate::mincut::{solve_binary, BinaryProblem, PairwiseTerm};
use crate::pyramid::{build_pyramid, upsample_field, ChannelStack};
use crate::volgrid::{check_same_grid, DisplacementField};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampler {
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostFunction {
    Ssd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    Additive,
}

/// Optimizer parameter set. File form: a JSON object with exactly these
/// field names; unknown keys are rejected, absent keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub pyramid_levels: usize,
    pub pyramid_stop_level: usize,
    pub block_size: [usize; 3],
    pub block_energy_epsilon: f64,
    pub max_iteration_count: usize,
    pub step_size: f64,
    pub regularization_scale: f64,
    pub regularization_exponent: f64,
    pub regularization_weight: f64,
    pub image_resampler: Resampler,
    pub cost_function: CostFunction,
    pub update_rule: UpdateRule,
    pub image_normalization: bool,
    pub intensity_weight: f64,
    pub mask_weight: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            pyramid_levels: 6,
            pyramid_stop_level: 0,
            block_size: [12, 12, 12],
            block_energy_epsilon: 1e-7,
            max_iteration_count: 100,
            step_size: 0.5,
            regularization_scale: 1.0,
            regularization_exponent: 2.0,
            regularization_weight: 0.1,
            image_resampler: Resampler::Gaussian,
            cost_function: CostFunction::Ssd,
            update_rule: UpdateRule::Additive,
            image_normalization: true,
            intensity_weight: 1.0,
            mask_weight: 0.6,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be >= 1".into());
        }
        if self.pyramid_stop_level >= self.pyramid_levels {
            return bad(format!(
                "pyramid_stop_level {} must be below pyramid_levels {}",
                self.pyramid_stop_level, self.pyramid_levels
            ));
        }
        if self.block_size.iter().any(|&b| b < 2) {
            return bad(format!(
                "block_size {:?} must be >= 2 per axis",
                self.block_size
            ));
        }
        if !(self.block_energy_epsilon > 0.0) {
            return bad("block_energy_epsilon must be > 0".into());
        }
        if self.max_iteration_count == 0 {
            return bad("max_iteration_count must be >= 1".into());
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return bad("step_size must be positive and finite".into());
        }
        if !(self.regularization_scale > 0.0) {
            return bad("regularization_scale must be > 0".into());
        }
        if !(self.regularization_exponent > 0.0) {
            return bad("regularization_exponent must be > 0".into());
        }
        if !(self.regularization_weight >= 0.0) {
            return bad("regularization_weight must be >= 0".into());
        }
        if !(self.intensity_weight >= 0.0) || !(self.mask_weight >= 0.0) {
            return bad("channel weights must be >= 0".into());
        }
        Ok(())
    }

    pub fn energy_params(&self) -> EnergyParams {
        EnergyParams {
            regularization_weight: self.regularization_weight,
            regularization_scale: self.regularization_scale,
            regularization_exponent: self.regularization_exponent,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RegistrationConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text =
            std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_json(&text)
    }
}

/// The six axis-aligned candidate steps of one sweep.
pub fn move_steps(step_size: f64) -> [[f64; 3]; 6] {
    [
        [step_size, 0.0, 0.0],
        [-step_size, 0.0, 0.0],
        [0.0, step_size, 0.0],
        [0.0, -step_size, 0.0],
        [0.0, 0.0, step_size],
        [0.0, 0.0, -step_size],
    ]
}

/// Half-open voxel sub-range `[lo, hi)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRange {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BlockRange {
    pub fn voxel_count(&self) -> usize {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1]) * (self.hi[2] - self.lo[2])
    }
}

fn axis_segments(n: usize, block: usize, offset: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    let mut start = 0usize;
    let mut end = if offset > 0 { offset.min(n) } else { block.min(n) };
    loop {
        v.push((start, end));
        if end == n {
            break;
        }
        start = end;
        end = (end + block).min(n);
    }
    v
}

/// Tile the grid into blocks; border blocks truncate to their natural size.
/// Returns (block, parity) with parity the block-coordinate sum mod 2;
/// same-parity blocks are never face-adjacent.
pub(crate) fn block_partition(
    dims: [usize; 3],
    block_size: [usize; 3],
    offset: [usize; 3],
) -> Vec<(BlockRange, usize)> {
    let segs: Vec<Vec<(usize, usize)>> = (0..3)
        .map(|a| axis_segments(dims[a], block_size[a], offset[a]))
        .collect();
    let mut out = Vec::with_capacity(segs[0].len() * segs[1].len() * segs[2].len());
    for (kz, &(z0, z1)) in segs[2].iter().enumerate() {
        for (ky, &(y0, y1)) in segs[1].iter().enumerate() {
            for (kx, &(x0, x1)) in segs[0].iter().enumerate() {
                out.push((
                    BlockRange {
                        lo: [x0, y0, z0],
                        hi: [x1, y1, z1],
                    },
                    (kx + ky + kz) % 2,
                ));
            }
        }
    }
    out
}

/// Accepted solve: grid indices taking the step and their new data costs.
struct BlockApply {
    moved: Vec<u32>,
    data1: Vec<f64>,
    energy_delta: f64,
}

/// Build and exactly solve the binary move problem for one block: bit 0
/// keeps `u(p)`, bit 1 applies `u(p) + delta`. Edges crossing the block
/// boundary fold into unaries with the outside displacement held fixed.
/// Returns `None` when the optimal decrease does not exceed `epsilon`.
#[allow(clippy::too_many_arguments)]
fn solve_block(
    field: &DisplacementField,
    fixed: &ChannelStack,
    moving: &ChannelStack,
    params: &EnergyParams,
    block: &BlockRange,
    delta: [f64; 3],
    epsilon: f64,
    cur_data: Option<&[f64]>,
) -> Result<Option<BlockApply>> {
    let meta = fixed.meta();
    let [nx, ny, nz] = meta.dims;
    let vectors = field.vectors();
    let m = block.voxel_count();
    let bd = [
        block.hi[0] - block.lo[0],
        block.hi[1] - block.lo[1],
        block.hi[2] - block.lo[2],
    ];
    let local = |x: usize, y: usize, z: usize| -> usize {
        (x - block.lo[0]) + bd[0] * ((y - block.lo[1]) + bd[1] * (z - block.lo[2]))
    };

    let uf = |g: usize| -> [f64; 3] {
        let v = vectors[g];
        [v[0] as f64, v[1] as f64, v[2] as f64]
    };

    let mut grid_idx = vec![0u32; m];
    let mut data1 = vec![0f64; m];
    let mut unary = vec![(0f64, 0f64); m];
    let mut edges: Vec<PairwiseTerm> = Vec::with_capacity(3 * m);

    for z in block.lo[2]..block.hi[2] {
        for y in block.lo[1]..block.hi[1] {
            for x in block.lo[0]..block.hi[0] {
                let g = meta.index(x, y, z);
                let l = local(x, y, z);
                grid_idx[l] = g as u32;
                let u = uf(g);
                let u1 = [u[0] + delta[0], u[1] + delta[1], u[2] + delta[2]];

                let c0 = match cur_data {
                    Some(cache) => cache[g],
                    None => data_cost_at(
                        fixed,
                        moving,
                        g,
                        [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]],
                    ),
                };
                let c1 = data_cost_at(
                    fixed,
                    moving,
                    g,
                    [x as f64 + u1[0], y as f64 + u1[1], z as f64 + u1[2]],
                );
                data1[l] = c1;

                // fold boundary-crossing pairwise terms into the unaries,
                // outside displacements frozen
                let mut f0 = 0.0;
                let mut f1 = 0.0;
                let mut fold = |q: usize| {
                    let uq = uf(q);
                    f0 += pairwise_cost(u, uq, params);
                    f1 += pairwise_cost(u1, uq, params);
                };
                if x == block.lo[0] && x > 0 {
                    fold(g - 1);
                }
                if x + 1 == block.hi[0] && x + 1 < nx {
                    fold(g + 1);
                }
                if y == block.lo[1] && y > 0 {
                    fold(g - nx);
                }
                if y + 1 == block.hi[1] && y + 1 < ny {
                    fold(g + nx);
                }
                if z == block.lo[2] && z > 0 {
                    fold(g - nx * ny);
                }
                if z + 1 == block.hi[2] && z + 1 < nz {
                    fold(g + nx * ny);
                }
                unary[l] = (c0 + f0, c1 + f1);

                // intra-block edges toward +x/+y/+z
                let mut link = |qg: usize, j: usize| {
                    let uq = uf(qg);
                    let uq1 = [uq[0] + delta[0], uq[1] + delta[1], uq[2] + delta[2]];
                    edges.push(PairwiseTerm {
                        i: l,
                        j,
                        v00: pairwise_cost(u, uq, params),
                        v01: pairwise_cost(u, uq1, params),
                        v10: pairwise_cost(u1, uq, params),
                        v11: pairwise_cost(u1, uq1, params),
                    });
                };
                if x + 1 < block.hi[0] {
                    link(g + 1, local(x + 1, y, z));
                }
                if y + 1 < block.hi[1] {
                    link(g + nx, local(x, y + 1, z));
                }
                if z + 1 < block.hi[2] {
                    link(g + nx * ny, local(x, y, z + 1));
                }
            }
        }
    }

    if cfg!(debug_assertions) {
        for t in &edges {
            debug_assert!(t.slack() >= 0.0, "non-submodular block edge: {}", t.slack());
        }
    }

    let problem = BinaryProblem::new(unary, edges);
    let (labeling, e_min) = solve_binary(&problem)?;
    let e0 = problem.energy(&vec![false; m]);

    if e0 - e_min > epsilon {
        let mut moved = Vec::new();
        let mut moved_data = Vec::new();
        for (l, &bit) in labeling.iter().enumerate() {
            if bit {
                moved.push(grid_idx[l]);
                moved_data.push(data1[l]);
            }
        }
        Ok(Some(BlockApply {
            moved,
            data1: moved_data,
            energy_delta: e_min - e0,
        }))
    } else {
        Ok(None)
    }
}

fn apply_block(
    field: &mut DisplacementField,
    mut cur_data: Option<&mut Vec<f64>>,
    apply: &BlockApply,
    delta: [f64; 3],
) {
    let vectors = field.vectors_mut();
    for (k, &g) in apply.moved.iter().enumerate() {
        let g = g as usize;
        let v = &mut vectors[g];
        v[0] += delta[0] as f32;
        v[1] += delta[1] as f32;
        v[2] += delta[2] as f32;
        if let Some(cache) = cur_data.as_deref_mut() {
            cache[g] = apply.data1[k];
        }
    }
}

/// One optimization attempt of a single block for a single move step.
/// Applies the bit-1 displacements only when the exact block-energy decrease
/// exceeds `block_energy_epsilon`; returns whether it did and the
/// (nonpositive) applied energy change.
pub fn block_move(
    field: &mut DisplacementField,
    fixed: &ChannelStack,
    moving: &ChannelStack,
    cfg: &RegistrationConfig,
    block: &BlockRange,
    delta: [f64; 3],
) -> Result<(bool, f64)> {
    check_same_grid(&field.meta, fixed.meta(), "field vs fixed stack")?;
    fixed.check_aligned(moving)?;
    let params = cfg.energy_params();
    match solve_block(
        field,
        fixed,
        moving,
        &params,
        block,
        delta,
        cfg.block_energy_epsilon,
        None,
    )? {
        Some(apply) => {
            apply_block(field, None, &apply, delta);
            Ok((true, apply.energy_delta))
        }
        None => Ok((false, 0.0)),
    }
}

/// Progress record for one pyramid level.
#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub level: usize,
    pub dims: [usize; 3],
    pub sweeps: usize,
    pub converged: bool,
    pub accepted_moves: Vec<usize>,
    /// Total energy before any sweep, then after each sweep.
    pub energy_trace: Vec<EnergyReport>,
}

fn regularization_total(field: &DisplacementField, params: &EnergyParams) -> f64 {
    let meta = &field.meta;
    let [nx, ny, nz] = meta.dims;
    let vectors = field.vectors();
    let uf = |i: usize| -> [f64; 3] {
        let v = vectors[i];
        [v[0] as f64, v[1] as f64, v[2] as f64]
    };
    let mut reg = 0.0;
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
    reg
}

/// Optimize one pyramid level: sweeps of 6 moves x 2 block-grid phases x 2
/// block parities until a full sweep accepts nothing or the iteration cap is
/// reached. Total energy is non-increasing across the run.
pub fn register_level(
    field: DisplacementField,
    fixed: &ChannelStack,
    moving: &ChannelStack,
    cfg: &RegistrationConfig,
    level: usize,
) -> Result<(DisplacementField, LevelReport)> {
    check_same_grid(&field.meta, fixed.meta(), "field vs fixed stack")?;
    fixed.check_aligned(moving)?;
    let params = cfg.energy_params();
    let meta = fixed.meta().clone();
    let dims = meta.dims;
    let mut field = field;

    // per-voxel data cost at the current displacement, kept in step with
    // accepted moves
    let mut cur_data: Vec<f64> = {
        let vectors = field.vectors();
        meta.coords()
            .enumerate()
            .map(|(i, p)| {
                let u = vectors[i];
                data_cost_at(
                    fixed,
                    moving,
                    i,
                    [
                        p[0] as f64 + u[0] as f64,
                        p[1] as f64 + u[1] as f64,
                        p[2] as f64 + u[2] as f64,
                    ],
                )
            })
            .collect()
    };

    let report_energy = |cur_data: &[f64], field: &DisplacementField| -> EnergyReport {
        let data: f64 = cur_data.iter().sum();
        let reg = regularization_total(field, &params);
        EnergyReport {
            data_term: data,
            regularization_term: reg,
            total: data + reg,
        }
    };

    let half = [
        cfg.block_size[0] / 2,
        cfg.block_size[1] / 2,
        cfg.block_size[2] / 2,
    ];
    let phases = [[0usize; 3], half];
    let steps = move_steps(cfg.step_size);

    let mut trace = vec![report_energy(&cur_data, &field)];
    let mut accepted_per_sweep = Vec::new();
    let mut converged = false;

    for _sweep in 0..cfg.max_iteration_count {
        let mut accepted = 0usize;
        for delta in steps {
            for offset in phases {
                let blocks = block_partition(dims, cfg.block_size, offset);
                for color in 0..2 {
                    let colored: Vec<&BlockRange> = blocks
                        .iter()
                        .filter(|(_, parity)| *parity == color)
                        .map(|(b, _)| b)
                        .collect();
                    let results: Vec<Option<BlockApply>> = colored
                        .par_iter()
                        .map(|b| {
                            solve_block(
                                &field,
                                fixed,
                                moving,
                                &params,
                                b,
                                delta,
                                cfg.block_energy_epsilon,
                                Some(&cur_data),
                            )
                        })
                        .collect::<Result<_>>()?;
                    for apply in results.into_iter().flatten() {
                        apply_block(&mut field, Some(&mut cur_data), &apply, delta);
                        accepted += 1;
                    }
                }
            }
        }
        trace.push(report_energy(&cur_data, &field));
        accepted_per_sweep.push(accepted);
        if accepted == 0 {
            converged = true;
            break;
        }
    }

    let sweeps = accepted_per_sweep.len();
    Ok((
        field,
        LevelReport {
            level,
            dims,
            sweeps,
            converged,
            accepted_moves: accepted_per_sweep,
            energy_trace: trace,
        },
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct RegistrationReport {
    /// Zero-field energy on the full-resolution normalized stacks.
    pub initial_energy: EnergyReport,
    /// Final-field energy on the same stacks.
    pub final_energy: EnergyReport,
    pub levels: Vec<LevelReport>,
}

pub struct RegistrationOutput {
    pub field: DisplacementField,
    pub report: RegistrationReport,
}

/// Full multi-resolution registration of `moving` onto `fixed`. Applies the
/// configured channel weights, normalizes both stacks, builds the pyramids,
/// optimizes coarse to fine from a zero field, and returns the
/// full-resolution displacement field.
pub fn register(
    fixed: &ChannelStack,
    moving: &ChannelStack,
    cfg: &RegistrationConfig,
) -> Result<RegistrationOutput> {
    cfg.validate()?;
    check_same_grid(fixed.meta(), moving.meta(), "fixed vs moving stack")?;
    fixed.check_aligned(moving)?;

    let mut fixed = fixed.clone();
    let mut moving = moving.clone();
    fixed.set_weights(cfg.intensity_weight, cfg.mask_weight);
    moving.set_weights(cfg.intensity_weight, cfg.mask_weight);
    if cfg.image_normalization {
        fixed = normalize_channels(&fixed);
        moving = normalize_channels(&moving);
    }

    let pyr_fixed = build_pyramid(&fixed, cfg.pyramid_levels)?;
    let pyr_moving = build_pyramid(&moving, cfg.pyramid_levels)?;

    let params = cfg.energy_params();
    let initial_energy = total_energy(
        &DisplacementField::zero(fixed.meta().clone()),
        &fixed,
        &moving,
        &params,
    )?;

    let coarsest = cfg.pyramid_levels - 1;
    let stop = cfg.pyramid_stop_level;
    let mut field = DisplacementField::zero(pyr_fixed.level(coarsest).meta().clone());
    let mut levels = Vec::new();
    for l in (stop..=coarsest).rev() {
        let (optimized, report) =
            register_level(field, pyr_fixed.level(l), pyr_moving.level(l), cfg, l)?;
        field = optimized;
        levels.push(report);
        if l > stop {
            field = upsample_field(&field, pyr_fixed.level(l - 1).meta())?;
        }
    }
    // carry a coarse stop level up to full resolution without optimizing
    for l in (0..stop).rev() {
        field = upsample_field(&field, pyr_fixed.level(l).meta())?;
    }

    let final_energy = total_energy(&field, &fixed, &moving, &params)?;

    Ok(RegistrationOutput {
        field,
        report: RegistrationReport {
            initial_energy,
            final_energy,
            levels,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{Channel, ChannelKind};
    use crate::volgrid::{GridMeta, ScalarVolume};

    fn stack1(values: Vec<f32>, dims: [usize; 3]) -> ChannelStack {
        ChannelStack::new(vec![Channel {
            name: "ff".into(),
            kind: ChannelKind::Intensity,
            volume: ScalarVolume::new(GridMeta::isotropic(dims), values).unwrap(),
            weight: 1.0,
        }])
        .unwrap()
    }

    #[test]
    fn config_defaults_match_table() {
        let cfg = RegistrationConfig::default();
        assert_eq!(cfg.pyramid_levels, 6);
        assert_eq!(cfg.pyramid_stop_level, 0);
        assert_eq!(cfg.block_size, [12, 12, 12]);
        assert_eq!(cfg.block_energy_epsilon, 1e-7);
        assert_eq!(cfg.max_iteration_count, 100);
        assert_eq!(cfg.step_size, 0.5);
        assert_eq!(cfg.regularization_scale, 1.0);
        assert_eq!(cfg.regularization_exponent, 2.0);
        assert_eq!(cfg.regularization_weight, 0.1);
        assert_eq!(cfg.image_resampler, Resampler::Gaussian);
        assert_eq!(cfg.cost_function, CostFunction::Ssd);
        assert_eq!(cfg.update_rule, UpdateRule::Additive);
        assert!(cfg.image_normalization);
        assert_eq!(cfg.intensity_weight, 1.0);
        assert_eq!(cfg.mask_weight, 0.6);
    }

    #[test]
    fn config_json_partial_and_unknown_keys() {
        let cfg = RegistrationConfig::from_json(r#"{"regularization_weight": 0.25}"#).unwrap();
        assert_eq!(cfg.regularization_weight, 0.25);
        assert_eq!(cfg.pyramid_levels, 6);

        assert!(RegistrationConfig::from_json(r#"{"not_a_key": 1}"#).is_err());
        assert!(RegistrationConfig::from_json(r#"{"image_resampler": "spline"}"#).is_err());
        assert!(RegistrationConfig::from_json(r#"{"block_size": [1, 12, 12]}"#).is_err());
    }

    #[test]
    fn partition_covers_grid_disjointly() {
        for offset in [[0usize; 3], [6, 6, 6]] {
            let blocks = block_partition([29, 13, 7], [12, 12, 12], offset);
            let meta = GridMeta::isotropic([29, 13, 7]);
            let mut seen = vec![false; meta.voxel_count()];
            for (b, _) in &blocks {
                for z in b.lo[2]..b.hi[2] {
                    for y in b.lo[1]..b.hi[1] {
                        for x in b.lo[0]..b.hi[0] {
                            let i = meta.index(x, y, z);
                            assert!(!seen[i], "voxel covered twice");
                            seen[i] = true;
                        }
                    }
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn same_parity_blocks_are_never_face_adjacent() {
        let blocks = block_partition([25, 25, 25], [12, 12, 12], [6, 6, 6]);
        for (a, pa) in &blocks {
            for (b, pb) in &blocks {
                if a == b || pa != pb {
                    continue;
                }
                let touches = (0..3)
                    .filter(|&ax| a.hi[ax] == b.lo[ax] || b.hi[ax] == a.lo[ax])
                    .count();
                let overlaps = (0..3)
                    .filter(|&ax| a.lo[ax] < b.hi[ax] && b.lo[ax] < a.hi[ax])
                    .count();
                assert!(
                    !(overlaps == 2 && touches >= 1),
                    "same-parity blocks {a:?} and {b:?} share a face"
                );
            }
        }
    }

    #[test]
    fn block_move_rejected_at_global_optimum() {
        let values: Vec<f32> = (0..64).map(|i| (i % 7) as f32 / 7.0).collect();
        let fixed = stack1(values.clone(), [4, 4, 4]);
        let moving = stack1(values, [4, 4, 4]);
        let mut field = DisplacementField::zero(GridMeta::isotropic([4, 4, 4]));
        let cfg = RegistrationConfig::default();
        let block = BlockRange {
            lo: [0, 0, 0],
            hi: [4, 4, 4],
        };
        for delta in move_steps(cfg.step_size) {
            let (accepted, d) =
                block_move(&mut field, &fixed, &moving, &cfg, &block, delta).unwrap();
            assert!(!accepted);
            assert_eq!(d, 0.0);
        }
        assert!(field.vectors().iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn block_move_matches_small_enumeration() {
        // 3x1x1 grid; shifting the tail voxels by +0.5 pays off
        let fixed = stack1(vec![0.0, 1.0, 1.0], [3, 1, 1]);
        let moving = stack1(vec![0.0, 0.5, 1.0], [3, 1, 1]);
        let mut field = DisplacementField::zero(GridMeta::isotropic([3, 1, 1]));
        let cfg = RegistrationConfig::default();
        let params = cfg.energy_params();
        let block = BlockRange {
            lo: [0, 0, 0],
            hi: [3, 1, 1],
        };
        let delta = [0.5, 0.0, 0.0];

        // enumerate all eight labelings
        let data = |x: usize, u: f64| -> f64 {
            let m = crate::volgrid::trilinear_sample(
                &moving.channels()[0].volume,
                [x as f64 + u, 0.0, 0.0],
            );
            let f = fixed.channels()[0].volume.values()[x] as f64;
            (m - f) * (m - f)
        };
        let eval = |bits: [bool; 3]| -> f64 {
            let u: Vec<f64> = bits.iter().map(|&b| if b { 0.5 } else { 0.0 }).collect();
            data(0, u[0])
                + data(1, u[1])
                + data(2, u[2])
                + pairwise_cost([u[0], 0.0, 0.0], [u[1], 0.0, 0.0], &params)
                + pairwise_cost([u[1], 0.0, 0.0], [u[2], 0.0, 0.0], &params)
        };
        let mut best = f64::INFINITY;
        let mut best_bits = [false; 3];
        for mask in 0..8u32 {
            let bits = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
            let e = eval(bits);
            if e < best {
                best = e;
                best_bits = bits;
            }
        }
        let e0 = eval([false; 3]);
        assert!(best < e0 - cfg.block_energy_epsilon, "test setup too weak");

        let (accepted, energy_delta) =
            block_move(&mut field, &fixed, &moving, &cfg, &block, delta).unwrap();
        assert!(accepted);
        assert!((energy_delta - (best - e0)).abs() < 1e-12);
        for (k, &bit) in best_bits.iter().enumerate() {
            assert_eq!(field.vectors()[k][0] > 0.0, bit, "voxel {k}");
        }
    }

    #[test]
    fn epsilon_gates_marginal_improvements() {
        // single-voxel block where the best available decrease is epsilon/2
        let a = 1e-3f32;
        let c1_target = (a as f64) * (a as f64) - 0.5e-7;
        let b = (2.0 * c1_target.sqrt() - a as f64) as f32;
        let fixed = stack1(vec![0.0, 0.0], [2, 1, 1]);
        let moving = stack1(vec![a, b], [2, 1, 1]);
        let mut field = DisplacementField::zero(GridMeta::isotropic([2, 1, 1]));
        let cfg = RegistrationConfig {
            regularization_weight: 0.0, // isolate the data term
            ..Default::default()
        };
        let block = BlockRange {
            lo: [0, 0, 0],
            hi: [1, 1, 1],
        };
        let (accepted, _) =
            block_move(&mut field, &fixed, &moving, &cfg, &block, [0.5, 0.0, 0.0]).unwrap();
        assert!(!accepted, "a decrease of epsilon/2 must not be applied");
        assert_eq!(field.vectors()[0], [0.0; 3]);
    }

    #[test]
    fn self_registration_keeps_zero_field() {
        let meta = GridMeta::isotropic([16, 12, 10]);
        let values: Vec<f32> = meta
            .coords()
            .map(|p| ((p[0] * 3 + p[1] * 5 + p[2] * 7) % 11) as f32 / 11.0)
            .collect();
        let fixed = stack1(values.clone(), meta.dims);
        let moving = stack1(values, meta.dims);
        let cfg = RegistrationConfig {
            pyramid_levels: 3,
            ..Default::default()
        };
        let out = register(&fixed, &moving, &cfg).unwrap();
        assert!(out.field.vectors().iter().all(|v| *v == [0.0; 3]));
        for level in &out.report.levels {
            assert_eq!(level.sweeps, 1);
            assert!(level.converged);
        }
        assert_eq!(out.report.final_energy.total, 0.0);
    }

    #[test]
    fn recovers_a_half_voxel_translation() {
        // triangle-wave bars (period 4, slope 0.5/voxel) whose content is
        // shifted +0.5 voxel in the moving image; piecewise-linear profiles
        // interpolate exactly, so u = +0.5 zeroes the data term
        let n = 24;
        let meta = GridMeta::isotropic([n, 8, 8]);
        let g = |x: f64| {
            let m = x.rem_euclid(4.0);
            ((m - 2.0).abs() / 2.0) as f32
        };
        let fixed_vals: Vec<f32> = meta.coords().map(|p| g(p[0] as f64)).collect();
        let moving_vals: Vec<f32> = meta.coords().map(|p| g(p[0] as f64 - 0.5)).collect();
        let fixed = stack1(fixed_vals, meta.dims);
        let moving = stack1(moving_vals, meta.dims);
        let cfg = RegistrationConfig {
            pyramid_levels: 2,
            block_size: [4, 4, 4],
            regularization_weight: 0.05,
            ..Default::default()
        };
        let out = register(&fixed, &moving, &cfg).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for p in meta.coords() {
            if p[0] >= 4 && p[0] + 4 < n {
                sum += out.field.at(p[0], p[1], p[2])[0] as f64;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!(
            (mean - 0.5).abs() < 0.2,
            "mean interior x-displacement {mean}, want ~0.5"
        );
    }

    #[test]
    fn energy_trace_is_non_increasing() {
        let meta = GridMeta::isotropic([20, 10, 10]);
        let fixed_vals: Vec<f32> = meta
            .coords()
            .map(|p| if p[0] >= 6 && p[0] < 12 { 1.0 } else { 0.0 })
            .collect();
        let moving_vals: Vec<f32> = meta
            .coords()
            .map(|p| if p[0] >= 8 && p[0] < 14 { 1.0 } else { 0.0 })
            .collect();
        let fixed = stack1(fixed_vals, meta.dims);
        let moving = stack1(moving_vals, meta.dims);
        let cfg = RegistrationConfig {
            pyramid_levels: 3,
            block_size: [6, 6, 6],
            ..Default::default()
        };
        let out = register(&fixed, &moving, &cfg).unwrap();
        for level in &out.report.levels {
            for pair in level.energy_trace.windows(2) {
                assert!(
                    pair[1].total <= pair[0].total + 1e-9,
                    "energy increased: {} -> {}",
                    pair[0].total,
                    pair[1].total
                );
            }
        }
        assert!(out.report.final_energy.total < out.report.initial_energy.total);
    }
}
