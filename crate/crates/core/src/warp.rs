//! Apply displacement fields to images and labels; compute local volume
//! change (Jacobian determinant) maps.

use crate::volgrid::{
    nearest_sample, DisplacementField, LabelVolume, ScalarVolume, trilinear_sample,
};
use crate::{Error, Result};

/// Pull-back warp: `out(p) = vol(p + u(p))` with trilinear interpolation.
/// The field grid defines the output grid.
pub fn warp_scalar(vol: &ScalarVolume, field: &DisplacementField) -> ScalarVolume {
    let meta = field.meta.clone();
    let values: Vec<f32> = meta
        .coords()
        .map(|p| trilinear_sample(vol, field.target(p)) as f32)
        .collect();
    ScalarVolume::with_nan(meta, values).expect("coords() yields voxel_count items")
}

/// Pull-back warp with nearest-neighbor sampling; the output label set is a
/// subset of the input's (plus background).
pub fn warp_labels(labels: &LabelVolume, field: &DisplacementField) -> LabelVolume {
    let meta = field.meta.clone();
    let out: Vec<u16> = meta
        .coords()
        .map(|p| nearest_sample(labels, field.target(p)))
        .collect();
    LabelVolume::new(meta, out, labels.width, labels.names().clone())
        .expect("warped labels keep count and width")
}

/// Jacobian determinant map `J(p) = det(I + grad u(p))`, gradients by central
/// differences in voxel units at interior voxels and one-sided differences on
/// the faces. Values above 1 mean local expansion of the moving anatomy
/// mapped to `p`, below 1 compression.
pub fn jacobian_determinant(field: &DisplacementField) -> Result<ScalarVolume> {
    let meta = &field.meta;
    if meta.dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidInput(format!(
            "jacobian needs at least 2 voxels per axis, got {:?}",
            meta.dims
        )));
    }
    let vectors = field.vectors();
    let [nx, ny, _] = meta.dims;
    let strides = [1usize, nx, nx * ny];

    let mut values = Vec::with_capacity(meta.voxel_count());
    for p in meta.coords() {
        let i = meta.index(p[0], p[1], p[2]);
        // g[r][c] = d u_r / d x_c
        let mut g = [[0f64; 3]; 3];
        for axis in 0..3 {
            let (a, b, inv_h) = if p[axis] == 0 {
                (i + strides[axis], i, 1.0)
            } else if p[axis] == meta.dims[axis] - 1 {
                (i, i - strides[axis], 1.0)
            } else {
                (i + strides[axis], i - strides[axis], 0.5)
            };
            for comp in 0..3 {
                g[comp][axis] =
                    (vectors[a][comp] as f64 - vectors[b][comp] as f64) * inv_h;
            }
        }
        let m = [
            [1.0 + g[0][0], g[0][1], g[0][2]],
            [g[1][0], 1.0 + g[1][1], g[1][2]],
            [g[2][0], g[2][1], 1.0 + g[2][2]],
        ];
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        values.push(det as f32);
    }
    ScalarVolume::with_nan(meta.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::{GridMeta, LabelWidth};
    use std::collections::BTreeMap;

    fn ramp_volume(dims: [usize; 3]) -> ScalarVolume {
        let meta = GridMeta::isotropic(dims);
        let values: Vec<f32> = meta
            .coords()
            .map(|p| (p[0] * 100 + p[1] * 10 + p[2]) as f32)
            .collect();
        ScalarVolume::new(meta, values).unwrap()
    }

    fn uniform_field(dims: [usize; 3], u: [f32; 3]) -> DisplacementField {
        let meta = GridMeta::isotropic(dims);
        let n = meta.voxel_count();
        DisplacementField::new(meta, vec![u; n]).unwrap()
    }

    #[test]
    fn zero_field_is_identity_on_scalars_and_labels() {
        let vol = ramp_volume([4, 3, 3]);
        let field = DisplacementField::zero(vol.meta.clone());
        assert_eq!(warp_scalar(&vol, &field).values(), vol.values());

        let labels = LabelVolume::new(
            vol.meta.clone(),
            (0..vol.meta.voxel_count()).map(|i| (i % 5) as u16).collect(),
            LabelWidth::U8,
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(warp_labels(&labels, &field).labels(), labels.labels());
    }

    #[test]
    fn integer_translation_matches_index_shift() {
        let vol = ramp_volume([5, 4, 3]);
        let field = uniform_field([5, 4, 3], [1.0, 0.0, 0.0]);
        let out = warp_scalar(&vol, &field);
        for p in vol.meta.coords() {
            let sx = (p[0] + 1).min(4); // clamp at the far face
            assert_eq!(out.at(p[0], p[1], p[2]), vol.at(sx, p[1], p[2]));
        }
    }

    #[test]
    fn half_voxel_shift_interpolates() {
        let meta = GridMeta::isotropic([2, 1, 1]);
        let vol = ScalarVolume::new(meta.clone(), vec![10.0, 20.0]).unwrap();
        let field = uniform_field([2, 1, 1], [0.5, 0.0, 0.0]);
        let out = warp_scalar(&vol, &field);
        assert_eq!(out.values()[0], 15.0);
        assert_eq!(out.values()[1], 20.0);
    }

    #[test]
    fn label_warp_rounds_to_nearest() {
        let meta = GridMeta::isotropic([3, 1, 1]);
        let labels =
            LabelVolume::new(meta.clone(), vec![1, 2, 3], LabelWidth::U8, BTreeMap::new()).unwrap();
        let field = uniform_field([3, 1, 1], [0.4, 0.0, 0.0]);
        let out = warp_labels(&labels, &field);
        assert_eq!(out.labels(), &[1, 2, 3]);
        let field = uniform_field([3, 1, 1], [0.5, 0.0, 0.0]);
        let out = warp_labels(&labels, &field);
        assert_eq!(out.labels(), &[2, 3, 3]);
    }

    #[test]
    fn field_pointing_outside_clamps_to_border() {
        let meta = GridMeta::isotropic([3, 1, 1]);
        let labels =
            LabelVolume::new(meta.clone(), vec![1, 2, 3], LabelWidth::U8, BTreeMap::new()).unwrap();
        let field = uniform_field([3, 1, 1], [50.0, 0.0, 0.0]);
        assert_eq!(warp_labels(&labels, &field).labels(), &[3, 3, 3]);
    }

    #[test]
    fn jacobian_of_zero_field_is_one_exactly() {
        let field = DisplacementField::zero(GridMeta::isotropic([4, 4, 4]));
        let jd = jacobian_determinant(&field).unwrap();
        assert!(jd.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn jacobian_of_uniform_translation_is_one_exactly() {
        let field = uniform_field([4, 3, 5], [2.5, -1.0, 0.25]);
        let jd = jacobian_determinant(&field).unwrap();
        assert!(jd.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn jacobian_of_linear_scaling_field() {
        // u(p) = 0.1 * p  =>  J = det(1.1 I) = 1.331; differences are exact
        // for linear fields, including the one-sided face stencils
        let meta = GridMeta::isotropic([6, 6, 6]);
        let vectors: Vec<[f32; 3]> = meta
            .coords()
            .map(|p| [0.1 * p[0] as f32, 0.1 * p[1] as f32, 0.1 * p[2] as f32])
            .collect();
        let field = DisplacementField::new(meta, vectors).unwrap();
        let jd = jacobian_determinant(&field).unwrap();
        for &v in jd.values() {
            assert!((v as f64 - 1.331).abs() < 1e-6, "JD {v}");
        }
    }

    #[test]
    fn jacobian_rejects_thin_grids() {
        let field = DisplacementField::zero(GridMeta::isotropic([4, 1, 4]));
        assert!(jacobian_determinant(&field).is_err());
    }
}
