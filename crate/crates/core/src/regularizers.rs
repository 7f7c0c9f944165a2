//! Loss terms on a pixels x frames (Casorati) image matrix and their
//! gradients with respect to that matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayView3, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardOperator;

pub const DEFAULT_TV_EPSILON: f64 = 1e-8;
/// Singular values below this fraction of the largest one are dropped from
/// the nuclear-norm subgradient.
pub const DEFAULT_SV_FLOOR_REL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dc: f64,
    pub tv: f64,
    pub lr: f64,
    pub total: f64,
    pub lambda_d: f64,
    pub lambda_l: f64,
}

impl LossBreakdown {
    pub fn new(dc: f64, tv: f64, lr: f64, lambda_d: f64, lambda_l: f64) -> Self {
        Self { dc, tv, lr, total: dc + lambda_d * tv + lambda_l * lr, lambda_d, lambda_l }
    }

    pub fn is_finite(&self) -> bool {
        [self.dc, self.tv, self.lr, self.total].iter().all(|v| v.is_finite())
    }
}

/// `sum (Ax - y)^2` and its gradient `2 A^T (Ax - y)`.
pub fn dc_loss(op: &ForwardOperator, x: ArrayView2<'_, f64>, y: ArrayView3<'_, f64>) -> Result<(f64, Array2<f64>)> {
    let mut residual = op.forward_casorati(x)?;
    if residual.dim() != y.dim() {
        return Err(Error::DimensionMismatch(format!(
            "predicted sinogram {:?} vs measured {:?}",
            residual.dim(),
            y.dim()
        )));
    }
    residual -= &y;
    let value = residual.iter().map(|r| r * r).sum();
    let mut grad = op.adjoint_casorati(residual.view())?;
    grad *= 2.0;
    Ok((value, grad))
}

/// Charbonnier-smoothed L1 norm of first temporal differences,
/// `sum sqrt(d^2 + eps^2) - eps`.
pub fn temporal_tv(x: ArrayView2<'_, f64>, epsilon: f64) -> Result<(f64, Array2<f64>)> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon {epsilon} must be positive")));
    }
    let mut grad = Array2::zeros(x.raw_dim());
    let frames = x.ncols();
    if frames < 2 {
        return Ok((0.0, grad));
    }
    let per_pixel: Vec<f64> = grad
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .map(|(mut g, row)| {
            let mut acc = 0.0;
            for t in 0..frames - 1 {
                let d = row[t + 1] - row[t];
                let mag = (d * d + epsilon * epsilon).sqrt();
                acc += mag - epsilon;
                let slope = d / mag;
                g[t] -= slope;
                g[t + 1] += slope;
            }
            acc
        })
        .collect();
    Ok((per_pixel.iter().sum(), grad))
}

/// Nuclear norm via the eigendecomposition of the `T x T` Gram matrix.
/// The subgradient is `U V^T`, computed as `X V diag(1/sigma) V^T` over
/// singular values above `sv_floor` (default `1e-8 * sigma_max`).
pub fn nuclear_norm(x: ArrayView2<'_, f64>, sv_floor: Option<f64>) -> Result<(f64, Array2<f64>)> {
    let (rows, frames) = x.dim();
    if frames > rows {
        return Err(Error::DimensionMismatch(format!(
            "casorati matrix {rows}x{frames} has more frames than pixels"
        )));
    }
    let mut gram = Array2::<f64>::zeros((frames, frames));
    general_mat_mul(1.0, &x.t(), &x, 0.0, &mut gram);
    let eig = SymmetricEigen::try_new(
        DMatrix::from_fn(frames, frames, |i, j| 0.5 * (gram[[i, j]] + gram[[j, i]])),
        f64::EPSILON,
        10_000,
    )
    .ok_or_else(|| Error::Eigen(format!("{frames}x{frames} Gram matrix did not converge")))?;
    // eigenvalues within rounding of zero carry no signal; their square
    // roots would otherwise add ~sqrt(eps) * sigma_max each
    let lambda_max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let noise = frames as f64 * f64::EPSILON * lambda_max;
    let sigma: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| if l > noise { l.sqrt() } else { 0.0 })
        .collect();
    let value = sigma.iter().sum();
    let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
    let floor = sv_floor.unwrap_or(DEFAULT_SV_FLOOR_REL * sigma_max);

    // M = V diag(1/sigma) V^T restricted to sigma > floor
    let v = &eig.eigenvectors;
    let mut m = Array2::<f64>::zeros((frames, frames));
    for (k, &s) in sigma.iter().enumerate() {
        if s > floor && s > 0.0 {
            let inv = 1.0 / s;
            for i in 0..frames {
                for j in 0..frames {
                    m[[i, j]] += v[(i, k)] * inv * v[(j, k)];
                }
            }
        }
    }
    let mut grad = Array2::zeros((rows, frames));
    general_mat_mul(1.0, &x, &m, 0.0, &mut grad);
    Ok((value, grad))
}

/// `dst += alpha * src`, elementwise.
pub(crate) fn accumulate(dst: &mut Array2<f64>, alpha: f64, src: &Array2<f64>) {
    Zip::from(dst).and(src).for_each(|d, &s| *d += alpha * s);
}
