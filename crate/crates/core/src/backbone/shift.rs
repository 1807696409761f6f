use ndarray::Array5;

use crate::error::{Error, Result};

/// Number of channels moved in each direction for `channels` and `fraction`.
pub fn shift_fold(channels: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::Config(format!("shift fraction {fraction} must be in (0, 0.5]")));
    }
    let fold = (channels as f64 * fraction).floor() as usize;
    if fold == 0 {
        return Err(Error::Config(format!(
            "shift fraction {fraction} moves no channels out of {channels}"
        )));
    }
    Ok(fold)
}

/// Temporal shift over a `(batch, T, C, H, W)` array.
///
/// Channels `[0, fold)` take the value from the previous frame, channels
/// `[fold, 2 * fold)` from the next frame; the frame with no source is zero.
/// The remaining channels pass through.
pub fn temporal_shift(x: &Array5<f64>, fraction: f64) -> Result<Array5<f64>> {
    let &[batch, frames, channels, h, w] = x.shape() else { unreachable!() };
    let fold = shift_fold(channels, fraction)?;
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let per_sample = frames * channels * h * w;
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let range = b * per_sample..(b + 1) * per_sample;
        shift_into(&src[range.clone()], &mut out[range], frames, channels, h * w, fold, false);
    }
    Ok(Array5::from_shape_vec((batch, frames, channels, h, w), out).expect("shape preserved"))
}

/// Shift one sample laid out as `(T, C, plane)`. With `adjoint` set the two
/// directions swap, which is the transpose of the forward shift.
pub(crate) fn shift_into(
    src: &[f64],
    dst: &mut [f64],
    frames: usize,
    channels: usize,
    plane: usize,
    fold: usize,
    adjoint: bool,
) {
    let frame = channels * plane;
    for t in 0..frames {
        for c in 0..channels {
            let source_t = if c < fold {
                if adjoint { (t + 1 < frames).then_some(t + 1) } else { t.checked_sub(1) }
            } else if c < 2 * fold {
                if adjoint { t.checked_sub(1) } else { (t + 1 < frames).then_some(t + 1) }
            } else {
                Some(t)
            };
            let d = t * frame + c * plane;
            match source_t {
                Some(s) => {
                    let o = s * frame + c * plane;
                    dst[d..d + plane].copy_from_slice(&src[o..o + plane]);
                }
                None => dst[d..d + plane].fill(0.0),
            }
        }
    }
}
