//! Dense linear algebra, the MLP used for encoder and decoder, Adam, and the
//! finite-difference checker that validates every analytic gradient.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckReport, ProbeOptions};
pub use matrix::Matrix;
pub use mlp::{mlp_apply, mlp_grad, Activation, Dense, MlpCache, MlpParams};

/// Norms below this are clamped when normalizing.
pub const NORM_FLOOR: f64 = 1e-12;

/// Scales each row to unit L2 norm, dividing by `max(‖row‖, 1e-12)`.
pub fn row_normalize(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = matrix::dot(row, row).sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Pulls a cotangent on `row_normalize(x)` back onto `x`.
pub fn row_normalize_backward(x: &Matrix, normalized: &Matrix, d_normalized: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let n = matrix::dot(xr, xr).sqrt();
        let de = d_normalized.row(r);
        let out = dx.row_mut(r);
        if n > NORM_FLOOR {
            let e = normalized.row(r);
            let proj = matrix::dot(e, de);
            for ((o, ei), dei) in out.iter_mut().zip(e).zip(de) {
                *o = (dei - ei * proj) / n;
            }
        } else {
            for (o, dei) in out.iter_mut().zip(de) {
                *o = dei / NORM_FLOOR;
            }
        }
    }
    dx
}
