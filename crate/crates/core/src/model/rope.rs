use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rotates each adjacent pair `(x[2i], x[2i+1])` of row `r` by
/// `positions[r] · theta^(-2i/d)`.
///
/// Positions are the tokens' original indices; rotate before any gather so
/// selected tokens keep their true relative distances.
pub fn apply_rope(rows: &Tensor, positions: &[usize], theta: f64) -> Result<Tensor> {
    if rows.rank() != 2 {
        return Err(Error::shape("apply_rope", rows.shape(), &[0, 0]));
    }
    let (len, d) = (rows.shape()[0], rows.shape()[1]);
    if d % 2 != 0 {
        return Err(Error::Config(format!("rotary embedding needs an even head dim, got {d}")));
    }
    if positions.len() != len {
        return Err(Error::shape("apply_rope positions", rows.shape(), &[positions.len()]));
    }
    let inv_freq: Vec<f64> = (0..d / 2)
        .map(|i| theta.powf(-((2 * i) as f64) / d as f64))
        .collect();
    let mut out = rows.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for (i, f) in inv_freq.iter().enumerate() {
            let (sin, cos) = (pos as f64 * f).sin_cos();
            let (sin, cos) = (sin as f32, cos as f32);
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * cos - x1 * sin;
            row[2 * i + 1] = x0 * sin + x1 * cos;
        }
    }
    Ok(out)
}
