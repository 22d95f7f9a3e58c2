use nalgebra::DMatrix;

use crate::error::{Error, Result};

type Mat = DMatrix<f64>;

/// Interleave equal-shape per-sequence matrices frame-major: row `h * B + b`
/// is row `h` of `parts[b]`.
pub fn stack_frames(parts: &[&Mat]) -> Result<Mat> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("no sequences to stack".into()))?;
    let (h, c) = first.shape();
    if parts.iter().any(|p| p.shape() != (h, c)) {
        return Err(Error::Shape(
            "sequences in a batch must share frame count and width".into(),
        ));
    }
    let b = parts.len();
    Ok(Mat::from_fn(h * b, c, |r, col| parts[r % b][(r / b, col)]))
}

/// Inverse of [`stack_frames`].
pub fn unstack_frames(m: &Mat, batch: usize) -> Vec<Mat> {
    let h = m.nrows() / batch;
    (0..batch)
        .map(|b| Mat::from_fn(h, m.ncols(), |r, c| m[(r * batch + b, c)]))
        .collect()
}

/// `B x (H*B)` matrix averaging each sequence's frames of a frame-major stack.
pub fn pooling_matrix(frames: usize, batch: usize) -> Mat {
    Mat::from_fn(batch, frames * batch, |b, r| {
        if r % batch == b {
            1.0 / frames as f64
        } else {
            0.0
        }
    })
}
