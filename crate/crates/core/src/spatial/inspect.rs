//! Per-voxel deformation inspection maps.

use super::field_gradient_at;
use crate::real::Real;
use crate::volume::{DisplacementField, Volume};

/// ∂u/∂x at every voxel (central differences inside, one-sided on faces).
pub fn jacobian_matrices<T: Real>(ddf: &DisplacementField<T>) -> Vec<[[f64; 3]; 3]> {
    (0..ddf.meta().len()).map(|i| field_gradient_at(ddf, i)).collect()
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `det(I + ∂u/∂x)` per voxel.
pub fn jacobian_determinant_map<T: Real>(ddf: &DisplacementField<T>) -> Volume<T> {
    let data = jacobian_matrices(ddf)
        .into_iter()
        .map(|mut g| {
            for (a, row) in g.iter_mut().enumerate() {
                row[a] += 1.0;
            }
            T::lit(det3(&g))
        })
        .collect();
    Volume::from_parts(*ddf.meta(), data)
}

pub fn negative_jacobian_count<T: Real>(ddf: &DisplacementField<T>) -> usize {
    jacobian_determinant_map(ddf)
        .data()
        .iter()
        .filter(|v| **v <= T::zero())
        .count()
}

/// Euclidean length of the displacement at each voxel.
pub fn displacement_magnitude_map<T: Real>(ddf: &DisplacementField<T>) -> Volume<T> {
    let data = (0..ddf.meta().len())
        .map(|i| {
            let v = ddf.vector(i);
            T::lit(v.iter().map(|c| c.as_f64().powi(2)).sum::<f64>().sqrt())
        })
        .collect();
    Volume::from_parts(*ddf.meta(), data)
}

/// Frobenius norm of ∂u/∂x at each voxel.
pub fn gradient_l2norm_map<T: Real>(ddf: &DisplacementField<T>) -> Volume<T> {
    let data = jacobian_matrices(ddf)
        .into_iter()
        .map(|g| T::lit(g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()))
        .collect();
    Volume::from_parts(*ddf.meta(), data)
}
