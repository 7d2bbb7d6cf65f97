//! Synthetic desk-scale test data: layered body phantoms (SAT shell, muscle
//! layer, interior organs) with fat/water fraction channels, binary SAT and
//! muscle masks, and smooth invertible ground-truth deformations.
//!
//! The deformation family is affine plus per-axis sinusoids, so its Jacobian
//! is available in closed form; subjects are produced by resampling the
//! reference through the exact inverse map, which makes the returned truth
//! field satisfy `warp(subject, truth) ~ reference` up to interpolation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::pyramid::{Channel, ChannelKind, ChannelStack};
use crate::volgrid::{
    nearest_sample, trilinear_sample, DisplacementField, GridMeta, LabelVolume, LabelWidth,
    ScalarVolume,
};
use crate::{Error, Result};

pub const LABEL_SAT: u16 = 1;
pub const LABEL_MUSCLE: u16 = 2;
pub const LABEL_VISCERA: u16 = 3;
/// Interior organs take consecutive ids starting here.
pub const LABEL_ORGAN_BASE: u16 = 4;

/// Smooth deformation: translation + linear part around the grid center +
/// per-component sinusoid driven by the next axis. All units are voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationSpec {
    pub translation: [f64; 3],
    /// Linear part `A (p - center)` added to the displacement.
    pub linear: [[f64; 3]; 3],
    pub sin_amplitude: [f64; 3],
    pub sin_period: [f64; 3],
    pub sin_phase: [f64; 3],
}

impl DeformationSpec {
    pub fn identity() -> Self {
        DeformationSpec {
            translation: [0.0; 3],
            linear: [[0.0; 3]; 3],
            sin_amplitude: [0.0; 3],
            sin_period: [32.0; 3],
            sin_phase: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        DeformationSpec {
            translation: t,
            ..Self::identity()
        }
    }

    /// Component `a` oscillates along axis `(a+1) % 3`.
    fn drive_axis(a: usize) -> usize {
        (a + 1) % 3
    }

    /// Displacement at a continuous voxel coordinate.
    pub fn displacement(&self, p: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        let mut w = [0.0; 3];
        for a in 0..3 {
            let mut v = self.translation[a];
            for j in 0..3 {
                v += self.linear[a][j] * d[j];
            }
            if self.sin_amplitude[a] != 0.0 {
                let drive = Self::drive_axis(a);
                let arg = std::f64::consts::TAU * d[drive] / self.sin_period[a]
                    + self.sin_phase[a];
                v += self.sin_amplitude[a] * arg.sin();
            }
            w[a] = v;
        }
        w
    }

    /// Jacobian of the displacement, `d w_a / d p_j`.
    pub fn jacobian(&self, p: [f64; 3], center: [f64; 3]) -> [[f64; 3]; 3] {
        let mut g = self.linear;
        for a in 0..3 {
            if self.sin_amplitude[a] != 0.0 {
                let drive = Self::drive_axis(a);
                let arg = std::f64::consts::TAU * (p[drive] - center[drive])
                    / self.sin_period[a]
                    + self.sin_phase[a];
                g[a][drive] +=
                    self.sin_amplitude[a] * std::f64::consts::TAU / self.sin_period[a] * arg.cos();
            }
        }
        g
    }

    /// Jacobian determinant of the full map `p -> p + w(p)`.
    pub fn map_jacobian_det(&self, p: [f64; 3], center: [f64; 3]) -> f64 {
        let g = self.jacobian(p, center);
        let m = [
            [1.0 + g[0][0], g[0][1], g[0][2]],
            [g[1][0], 1.0 + g[1][1], g[1][2]],
            [g[2][0], g[2][1], 1.0 + g[2][2]],
        ];
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Generator parameters. Construction verifies that the deformation is
/// smooth and invertible on the grid (positive map Jacobian and a gradient
/// bound that makes the inverse fixed-point iteration contract).
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    pub organ_count: usize,
    pub deformation: DeformationSpec,
    /// Make one organ straddle the muscle boundary with muscle-identical
    /// intensity, so only the mask channels can localize that interface.
    pub ambiguity: bool,
    /// Amplitude of the smooth intensity texture layered over the tissue
    /// base values. Texture gives the data term traction inside otherwise
    /// uniform regions, like real tissue does; it is shared by every label,
    /// so intensity-identical tissue pairs stay identical.
    pub texture_amplitude: f64,
}

impl PhantomSpec {
    pub fn new(
        dims: [usize; 3],
        seed: u64,
        organ_count: usize,
        deformation: DeformationSpec,
        ambiguity: bool,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 16) {
            return Err(Error::InvalidInput(format!(
                "phantom dims {dims:?} too small; need >= 16 per axis"
            )));
        }
        if !(2..=5).contains(&organ_count) {
            return Err(Error::InvalidInput(
                "organ_count must be between 2 and 5".into(),
            ));
        }
        let spec = PhantomSpec {
            dims,
            seed,
            organ_count,
            deformation,
            ambiguity,
            texture_amplitude: 0.12,
        };
        spec.check_invertible()?;
        Ok(spec)
    }

    fn center(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 / 2.0,
            (self.dims[1] - 1) as f64 / 2.0,
            (self.dims[2] - 1) as f64 / 2.0,
        ]
    }

    fn check_invertible(&self) -> Result<()> {
        let center = self.center();
        let meta = GridMeta::isotropic(self.dims);
        for p in meta.coords() {
            let pf = [p[0] as f64, p[1] as f64, p[2] as f64];
            let det = self.deformation.map_jacobian_det(pf, center);
            if det <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "deformation folds at {p:?}: map JD = {det}"
                )));
            }
            let g = self.deformation.jacobian(pf, center);
            let row_norm = g
                .iter()
                .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max);
            if row_norm >= 0.9 {
                return Err(Error::InvalidInput(format!(
                    "deformation gradient too steep at {p:?} (norm {row_norm:.3}); \
                     the inverse iteration would not converge"
                )));
            }
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        s <= 1.0
    }
}

struct Geometry {
    body: Ellipsoid,
    sat_inner: Ellipsoid,
    muscle_inner: Ellipsoid,
    organs: Vec<(Ellipsoid, f32)>, // region and its fat fraction
}

const FF_SAT: f32 = 0.9;
const FF_MUSCLE: f32 = 0.2;
const FF_VISCERA: f32 = 0.45;
const ORGAN_FF: [f32; 5] = [0.65, 0.75, 0.55, 0.85, 0.35];

fn geometry(spec: &PhantomSpec) -> Geometry {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let center = spec.center();
    let mut jitter = |lo: f64, hi: f64| rng.gen_range(lo..hi);

    let body_r = [
        spec.dims[0] as f64 * (0.40 + jitter(0.0, 0.04)),
        spec.dims[1] as f64 * (0.40 + jitter(0.0, 0.04)),
        spec.dims[2] as f64 * (0.40 + jitter(0.0, 0.04)),
    ];
    let scale = |r: &[f64; 3], s: f64| [r[0] * s, r[1] * s, r[2] * s];
    let sat_scale = 0.80 + jitter(0.0, 0.03);
    let muscle_scale = 0.60 + jitter(0.0, 0.03);

    let body = Ellipsoid {
        center,
        radii: body_r,
    };
    let sat_inner = Ellipsoid {
        center,
        radii: scale(&body_r, sat_scale),
    };
    let muscle_inner = Ellipsoid {
        center,
        radii: scale(&body_r, muscle_scale),
    };

    // fixed direction palette, jittered per phantom
    let directions: [[f64; 3]; 5] = [
        [0.9, 0.3, 0.2],
        [-0.6, -0.5, 0.4],
        [0.1, 0.8, -0.5],
        [-0.3, 0.4, 0.8],
        [0.5, -0.7, -0.4],
    ];
    let mut organs = Vec::with_capacity(spec.organ_count);
    for k in 0..spec.organ_count {
        let ambiguous = spec.ambiguity && k == 0;
        let mut dir = directions[k];
        for d in &mut dir {
            *d += jitter(-0.05, 0.05);
        }
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        // the ambiguous organ sits on the muscle/viscera interface; the rest
        // stay well inside the viscera. Organs are deliberately chunky so
        // nearest-neighbor round trips stay interpolation-limited, not
        // dominated by surface rounding.
        let reach = if ambiguous {
            muscle_scale
        } else {
            0.26 + jitter(0.0, 0.05)
        };
        let organ_center = [
            center[0] + dir[0] / norm * reach * body_r[0],
            center[1] + dir[1] / norm * reach * body_r[1],
            center[2] + dir[2] / norm * reach * body_r[2],
        ];
        let r_scale = if ambiguous { 0.26 } else { 0.24 + jitter(0.0, 0.04) };
        let radii = scale(&body_r, r_scale);
        let ff = if ambiguous { FF_MUSCLE } else { ORGAN_FF[k] };
        organs.push((
            Ellipsoid {
                center: organ_center,
                radii,
            },
            ff,
        ));
    }

    Geometry {
        body,
        sat_inner,
        muscle_inner,
        organs,
    }
}

fn label_at(geo: &Geometry, p: [f64; 3]) -> u16 {
    if !geo.body.contains(p) {
        return 0;
    }
    if !geo.sat_inner.contains(p) {
        return LABEL_SAT;
    }
    // organs overwrite muscle and viscera but never the SAT shell
    for (k, (organ, _)) in geo.organs.iter().enumerate() {
        if organ.contains(p) {
            return LABEL_ORGAN_BASE + k as u16;
        }
    }
    if !geo.muscle_inner.contains(p) {
        return LABEL_MUSCLE;
    }
    LABEL_VISCERA
}

fn ff_of_label(geo: &Geometry, label: u16) -> f32 {
    match label {
        0 => 0.0,
        LABEL_SAT => FF_SAT,
        LABEL_MUSCLE => FF_MUSCLE,
        LABEL_VISCERA => FF_VISCERA,
        organ => geo.organs[(organ - LABEL_ORGAN_BASE) as usize].1,
    }
}

fn label_names(spec: &PhantomSpec) -> BTreeMap<u16, String> {
    let mut names = BTreeMap::new();
    names.insert(LABEL_SAT, "sat".to_string());
    names.insert(LABEL_MUSCLE, "muscle".to_string());
    names.insert(LABEL_VISCERA, "viscera".to_string());
    for k in 0..spec.organ_count {
        names.insert(
            LABEL_ORGAN_BASE + k as u16,
            format!("organ_{}", (b'a' + k as u8) as char),
        );
    }
    names
}

fn stack_from_parts(
    meta: &GridMeta,
    ff: Vec<f32>,
    wf: Vec<f32>,
    sat: Vec<f32>,
    muscle: Vec<f32>,
) -> Result<ChannelStack> {
    ChannelStack::new(vec![
        Channel {
            name: "ff".into(),
            kind: ChannelKind::Intensity,
            volume: ScalarVolume::new(meta.clone(), ff)?,
            weight: 1.0,
        },
        Channel {
            name: "wf".into(),
            kind: ChannelKind::Intensity,
            volume: ScalarVolume::new(meta.clone(), wf)?,
            weight: 1.0,
        },
        Channel {
            name: "sat".into(),
            kind: ChannelKind::Mask,
            volume: ScalarVolume::new(meta.clone(), sat)?,
            weight: 0.6,
        },
        Channel {
            name: "muscle".into(),
            kind: ChannelKind::Mask,
            volume: ScalarVolume::new(meta.clone(), muscle)?,
            weight: 0.6,
        },
    ])
}

/// Build the reference phantom: FF/WF intensity channels plus binary SAT and
/// muscle mask channels (the exact indicators of their labels), and the
/// label volume. Deterministic in the seed.
pub fn make_reference(spec: &PhantomSpec) -> Result<(ChannelStack, LabelVolume)> {
    let geo = geometry(spec);
    let meta = GridMeta::isotropic(spec.dims);
    let n = meta.voxel_count();
    let mut labels = Vec::with_capacity(n);
    let mut ff = Vec::with_capacity(n);
    let mut wf = Vec::with_capacity(n);
    let mut sat = Vec::with_capacity(n);
    let mut muscle = Vec::with_capacity(n);
    for p in meta.coords() {
        let pf = [p[0] as f64, p[1] as f64, p[2] as f64];
        let label = label_at(&geo, pf);
        labels.push(label);
        let f = ff_of_label(&geo, label);
        ff.push(f);
        wf.push(if label == 0 { 0.0 } else { 1.0 - f });
        sat.push((label == LABEL_SAT) as u8 as f32);
        muscle.push((label == LABEL_MUSCLE) as u8 as f32);
    }
    let stack = stack_from_parts(&meta, ff, wf, sat, muscle)?;
    let labels = LabelVolume::new(meta, labels, LabelWidth::U8, label_names(spec))?;
    Ok((stack, labels))
}

/// Invert `q = p + w(p)` by fixed-point iteration; converges because the
/// construction bounds the displacement gradient below 1.
fn invert_map(spec: &PhantomSpec, center: [f64; 3], q: [f64; 3]) -> [f64; 3] {
    let mut p = q;
    for _ in 0..60 {
        let w = spec.deformation.displacement(p, center);
        let next = [q[0] - w[0], q[1] - w[1], q[2] - w[2]];
        let step = (next[0] - p[0]).abs() + (next[1] - p[1]).abs() + (next[2] - p[2]).abs();
        p = next;
        if step < 1e-12 {
            break;
        }
    }
    p
}

/// Deform the reference into a subject and return the ground-truth field in
/// the registration convention: warping the subject by `truth` reconstructs
/// the reference. Intensity channels resample trilinearly, labels nearest;
/// the binary mask channels are rebuilt as indicators of the warped labels so
/// they stay exactly binary.
pub fn make_subject(
    reference: &ChannelStack,
    reference_labels: &LabelVolume,
    spec: &PhantomSpec,
) -> Result<(ChannelStack, LabelVolume, DisplacementField)> {
    let meta = reference.meta().clone();
    if meta.dims != spec.dims {
        return Err(Error::GridMismatch(format!(
            "phantom spec dims {:?} vs reference {:?}",
            spec.dims, meta.dims
        )));
    }
    let center = spec.center();

    let mut truth = Vec::with_capacity(meta.voxel_count());
    for p in meta.coords() {
        let pf = [p[0] as f64, p[1] as f64, p[2] as f64];
        let w = spec.deformation.displacement(pf, center);
        truth.push([w[0] as f32, w[1] as f32, w[2] as f32]);
    }
    let truth = DisplacementField::new(meta.clone(), truth)?;

    let n = meta.voxel_count();
    let mut ff = Vec::with_capacity(n);
    let mut wf = Vec::with_capacity(n);
    let mut sat = Vec::with_capacity(n);
    let mut muscle = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let (ff_ref, wf_ref) = (
        &reference.channels()[0].volume,
        &reference.channels()[1].volume,
    );
    for q in meta.coords() {
        let qf = [q[0] as f64, q[1] as f64, q[2] as f64];
        let p = invert_map(spec, center, qf);
        ff.push(trilinear_sample(ff_ref, p) as f32);
        wf.push(trilinear_sample(wf_ref, p) as f32);
        let label = nearest_sample(reference_labels, p);
        labels.push(label);
        sat.push((label == LABEL_SAT) as u8 as f32);
        muscle.push((label == LABEL_MUSCLE) as u8 as f32);
    }
    let stack = stack_from_parts(&meta, ff, wf, sat, muscle)?;
    let labels = LabelVolume::new(
        meta,
        labels,
        reference_labels.width,
        reference_labels.names().clone(),
    )?;
    Ok((stack, labels, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohortstats::dice;
    use crate::warp::warp_labels;

    fn default_spec(deformation: DeformationSpec) -> PhantomSpec {
        PhantomSpec::new([32, 28, 24], 7, 2, deformation, false).unwrap()
    }

    #[test]
    fn reference_is_deterministic_in_seed() {
        let spec = default_spec(DeformationSpec::identity());
        let (a_stack, a_labels) = make_reference(&spec).unwrap();
        let (b_stack, b_labels) = make_reference(&spec).unwrap();
        assert_eq!(a_labels, b_labels);
        for (ca, cb) in a_stack.channels().iter().zip(b_stack.channels()) {
            assert_eq!(ca.volume.values(), cb.volume.values());
        }
    }

    #[test]
    fn mask_channels_are_label_indicators() {
        let spec = default_spec(DeformationSpec::identity());
        let (stack, labels) = make_reference(&spec).unwrap();
        let sat = &stack.channels()[2].volume;
        let muscle = &stack.channels()[3].volume;
        for (i, &l) in labels.labels().iter().enumerate() {
            assert_eq!(sat.values()[i], (l == LABEL_SAT) as u8 as f32);
            assert_eq!(muscle.values()[i], (l == LABEL_MUSCLE) as u8 as f32);
        }
    }

    #[test]
    fn fractions_sum_to_one_on_body() {
        let spec = default_spec(DeformationSpec::identity());
        let (stack, labels) = make_reference(&spec).unwrap();
        let ff = &stack.channels()[0].volume;
        let wf = &stack.channels()[1].volume;
        for (i, &l) in labels.labels().iter().enumerate() {
            let s = ff.values()[i] + wf.values()[i];
            if l == 0 {
                assert_eq!(s, 0.0);
            } else {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_deformation_reproduces_reference() {
        let spec = default_spec(DeformationSpec::identity());
        let (stack, labels) = make_reference(&spec).unwrap();
        let (sub_stack, sub_labels, truth) = make_subject(&stack, &labels, &spec).unwrap();
        assert!(truth.vectors().iter().all(|v| *v == [0.0; 3]));
        assert_eq!(sub_labels, labels);
        for (ca, cb) in stack.channels().iter().zip(sub_stack.channels()) {
            assert_eq!(ca.volume.values(), cb.volume.values());
        }
    }

    #[test]
    fn translation_truth_is_constant() {
        let spec = default_spec(DeformationSpec::translation([3.0, -2.0, 4.0]));
        let (stack, labels) = make_reference(&spec).unwrap();
        let (_, _, truth) = make_subject(&stack, &labels, &spec).unwrap();
        assert!(truth.vectors().iter().all(|v| *v == [3.0, -2.0, 4.0]));
    }

    #[test]
    fn sinusoidal_truth_keeps_positive_jacobian() {
        let mut d = DeformationSpec::identity();
        d.sin_amplitude = [2.0, 1.5, 1.0];
        d.sin_period = [24.0, 20.0, 28.0];
        d.sin_phase = [0.3, 1.1, 2.0];
        let spec = default_spec(d);
        let center = spec.center();
        let meta = GridMeta::isotropic(spec.dims);
        for p in meta.coords() {
            let det = spec.deformation.map_jacobian_det(
                [p[0] as f64, p[1] as f64, p[2] as f64],
                center,
            );
            assert!((0.2..5.0).contains(&det), "JD {det} out of range");
        }
    }

    #[test]
    fn steep_deformations_are_rejected() {
        let mut d = DeformationSpec::identity();
        d.sin_amplitude = [8.0, 0.0, 0.0];
        d.sin_period = [10.0, 10.0, 10.0];
        assert!(PhantomSpec::new([32, 32, 32], 1, 2, d, false).is_err());
    }

    #[test]
    fn truth_warp_round_trips_labels() {
        // dice is interpolation-limited: thin shells need enough resolution
        let mut d = DeformationSpec::translation([1.5, -0.5, 1.0]);
        d.sin_amplitude = [1.5, 1.0, 0.8];
        d.sin_period = [26.0, 22.0, 30.0];
        d.sin_phase = [0.7, 0.2, 1.4];
        let spec = PhantomSpec::new([72, 64, 56], 7, 2, d, false).unwrap();
        let (stack, labels) = make_reference(&spec).unwrap();
        let (_, sub_labels, truth) = make_subject(&stack, &labels, &spec).unwrap();
        let recovered = warp_labels(&sub_labels, &truth);
        for label in labels.present_labels() {
            let d = dice(&labels, &recovered, label).unwrap().unwrap();
            assert!(d >= 0.98, "label {label} round-trip dice {d}");
        }
    }

    #[test]
    fn ambiguous_organ_matches_muscle_intensity() {
        let spec = PhantomSpec::new([40, 36, 32], 3, 2, DeformationSpec::identity(), true).unwrap();
        let (stack, labels) = make_reference(&spec).unwrap();
        let ff = &stack.channels()[0].volume;
        let mut seen_organ = false;
        for (i, &l) in labels.labels().iter().enumerate() {
            if l == LABEL_ORGAN_BASE {
                seen_organ = true;
                assert_eq!(ff.values()[i], FF_MUSCLE);
            }
        }
        assert!(seen_organ, "ambiguous organ absent");
        // and the organ must touch the muscle layer somewhere
        let meta = &labels.meta;
        let mut touches = false;
        'outer: for z in 0..meta.dims[2] {
            for y in 0..meta.dims[1] {
                for x in 0..meta.dims[0] {
                    if labels.at(x, y, z) != LABEL_ORGAN_BASE {
                        continue;
                    }
                    let neighbors = [
                        (x.wrapping_sub(1), y, z),
                        (x + 1, y, z),
                        (x, y.wrapping_sub(1), z),
                        (x, y + 1, z),
                        (x, y, z.wrapping_sub(1)),
                        (x, y, z + 1),
                    ];
                    for (nx, ny, nz) in neighbors {
                        if nx < meta.dims[0]
                            && ny < meta.dims[1]
                            && nz < meta.dims[2]
                            && labels.at(nx, ny, nz) == LABEL_MUSCLE
                        {
                            touches = true;
                            break 'outer;
                        }
                    }
                }
            }
        }
        assert!(touches, "ambiguous organ does not touch the muscle layer");
    }
}
