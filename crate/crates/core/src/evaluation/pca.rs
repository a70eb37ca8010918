use nalgebra::DMatrix;
use rsfme_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `[n, 2]` coordinates on the first two principal components.
    pub coords: Tensor,
    /// `[2, d]` unit component directions.
    pub components: Tensor,
    /// Sample variance along each component.
    pub variances: [f64; 2],
}

/// Mean-centres the rows of `x` (`[n, d]`, n ≥ 3, d ≥ 2) and projects them on
/// the top two principal components, found by SVD of the centred data. Each
/// component's first non-negligible loading is made positive.
pub fn feature_projection(x: &Tensor) -> Result<Projection> {
    if x.rank() != 2 || x.dim(0) < 3 || x.dim(1) < 2 {
        return Err(Error::Data(format!(
            "projection needs at least 3 vectors of dim >= 2, got {:?}",
            x.shape()
        )));
    }
    let (n, d) = (x.dim(0), x.dim(1));
    let mut m = DMatrix::from_row_slice(n, d, x.data());
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Data("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let scale = m.amax().max(1.0);
    let top = svd.singular_values[order[0]];
    if top <= 1e-12 * scale {
        return Err(Error::Undefined(
            "principal components of zero-variance data",
        ));
    }
    let mut components = vec![0.0; 2 * d];
    let mut variances = [0.0; 2];
    for k in 0..2 {
        let Some(&idx) = order.get(k) else { break };
        let mut row: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let tol = 1e-12 * row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if row.iter().find(|v| v.abs() > tol).is_some_and(|&v| v < 0.0) {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components[k * d..(k + 1) * d].copy_from_slice(&row);
        let s = svd.singular_values[idx];
        variances[k] = s * s / (n - 1) as f64;
    }
    let mut coords = vec![0.0; n * 2];
    for i in 0..n {
        for k in 0..2 {
            coords[i * 2 + k] = (0..d).map(|j| m[(i, j)] * components[k * d + j]).sum();
        }
    }
    Ok(Projection {
        coords: Tensor::new(&[n, 2], coords)?,
        components: Tensor::new(&[2, d], components)?,
        variances,
    })
}
