//! 3x3 same-padded convolution and 2x2 average pooling over stacks of frames.
//! Buffers are `(T, C, H, W)` row-major; the single-frame kernels treat `T = 1`.

use ndarray::{Array2, ArrayView2};

const K: usize = 3;

/// Valid output range along one axis for kernel offset `d` in `-1..=1`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n.saturating_sub(1) } else { n };
    (lo, hi)
}

/// Neighbourhood matrix of all frames: row `ci * 9 + ky * 3 + kx`, column
/// `t * H * W + y * W + x`. Out-of-image taps stay zero.
fn im2col(input: &[f64], frames: usize, cin: usize, h: usize, w: usize) -> Array2<f64> {
    let plane = h * w;
    let n = frames * plane;
    let mut cols = vec![0.0; cin * K * K * n];
    for t in 0..frames {
        for ci in 0..cin {
            let src = &input[(t * cin + ci) * plane..(t * cin + ci + 1) * plane];
            for ky in 0..K {
                let dy = ky as isize - 1;
                let (ylo, yhi) = span(dy, h);
                for kx in 0..K {
                    let dx = kx as isize - 1;
                    let (xlo, xhi) = span(dx, w);
                    let row = (ci * K + ky) * K + kx;
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let sx = (xlo as isize + dx) as usize;
                        let d = row * n + t * plane + y * w + xlo;
                        cols[d..d + xhi - xlo].copy_from_slice(&src[sy * w + sx..sy * w + sx + xhi - xlo]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((cin * K * K, n), cols).expect("im2col shape")
}

/// Adjoint of [`im2col`], accumulated into `out`.
fn col2im_add(cols: &Array2<f64>, frames: usize, cin: usize, h: usize, w: usize, out: &mut [f64]) {
    let plane = h * w;
    let n = frames * plane;
    let cols = cols.as_slice().expect("standard layout");
    for t in 0..frames {
        for ci in 0..cin {
            let dst = &mut out[(t * cin + ci) * plane..(t * cin + ci + 1) * plane];
            for ky in 0..K {
                let dy = ky as isize - 1;
                let (ylo, yhi) = span(dy, h);
                for kx in 0..K {
                    let dx = kx as isize - 1;
                    let (xlo, xhi) = span(dx, w);
                    let row = (ci * K + ky) * K + kx;
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let sx = (xlo as isize + dx) as usize;
                        let c = row * n + t * plane + y * w + xlo;
                        for (a, b) in dst[sy * w + sx..sy * w + sx + xhi - xlo].iter_mut().zip(&cols[c..c + xhi - xlo]) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

fn weight_matrix(weight: &[f64], cout: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((cout, weight.len() / cout), weight).expect("weight shape")
}

/// Convolution of every frame as one matrix product. Returns `(T, cout, H, W)`.
pub(crate) fn conv3x3_frames_forward(
    input: &[f64],
    frames: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let cout = bias.len();
    let plane = h * w;
    let product = weight_matrix(weight, cout).dot(&im2col(input, frames, cin, h, w));
    let product = product.as_slice().expect("standard layout");
    let n = frames * plane;
    let mut out = vec![0.0; frames * cout * plane];
    for t in 0..frames {
        for co in 0..cout {
            let src = &product[co * n + t * plane..co * n + (t + 1) * plane];
            for (o, v) in out[(t * cout + co) * plane..(t * cout + co + 1) * plane].iter_mut().zip(src) {
                *o = v + bias[co];
            }
        }
    }
    out
}

/// Backward pass of [`conv3x3_frames_forward`]. Weight and bias gradients
/// are accumulated; the input gradient is accumulated into `grad_in` if given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_frames_backward(
    input: &[f64],
    frames: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    grad_in: Option<&mut [f64]>,
) {
    let cout = grad_bias.len();
    let plane = h * w;
    let n = frames * plane;
    let mut g = vec![0.0; cout * n];
    for t in 0..frames {
        for co in 0..cout {
            g[co * n + t * plane..co * n + (t + 1) * plane]
                .copy_from_slice(&grad_out[(t * cout + co) * plane..(t * cout + co + 1) * plane]);
        }
    }
    for co in 0..cout {
        grad_bias[co] += g[co * n..(co + 1) * n].iter().sum::<f64>();
    }
    let g = Array2::from_shape_vec((cout, n), g).expect("gradient shape");
    let cols = im2col(input, frames, cin, h, w);
    let gw = g.dot(&cols.t());
    for (a, b) in grad_weight.iter_mut().zip(gw.iter()) {
        *a += b;
    }
    if let Some(gi) = grad_in {
        let dcols = weight_matrix(weight, cout).t().dot(&g);
        col2im_add(&dcols, frames, cin, h, w, gi);
    }
}

#[cfg(test)]
pub(crate) fn conv3x3_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let cout = bias.len();
    let plane = h * w;
    debug_assert_eq!(input.len(), cin * plane);
    debug_assert_eq!(out.len(), cout * plane);
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias[co]);
        for ci in 0..cin {
            let src = &input[ci * plane..(ci + 1) * plane];
            let kw = &weight[(co * cin + ci) * K * K..(co * cin + ci + 1) * K * K];
            for ky in 0..K {
                let dy = ky as isize - 1;
                let (ylo, yhi) = span(dy, h);
                for kx in 0..K {
                    let dx = kx as isize - 1;
                    let (xlo, xhi) = span(dx, w);
                    let wv = kw[ky * K + kx];
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut o[y * w + xlo..y * w + xhi];
                        let srow = &src[sy * w + (xlo as isize + dx) as usize
                            ..sy * w + (xhi as isize + dx) as usize];
                        for (a, b) in orow.iter_mut().zip(srow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
}

/// Single-frame reference kernel for the matrix-product path.
#[cfg(test)]
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let cout = grad_bias.len();
    let plane = h * w;
    for co in 0..cout {
        let g = &grad_out[co * plane..(co + 1) * plane];
        grad_bias[co] += g.iter().sum::<f64>();
        for ci in 0..cin {
            let src = &input[ci * plane..(ci + 1) * plane];
            let base = (co * cin + ci) * K * K;
            for ky in 0..K {
                let dy = ky as isize - 1;
                let (ylo, yhi) = span(dy, h);
                for kx in 0..K {
                    let dx = kx as isize - 1;
                    let (xlo, xhi) = span(dx, w);
                    let wv = weight[base + ky * K + kx];
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (xlo as isize + dx) as usize;
                        let grow = &g[y * w + xlo..y * w + xhi];
                        let srow = &src[sy * w + sx0..sy * w + sx0 + (xhi - xlo)];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let irow = &mut gi[ci * plane + sy * w + sx0
                                ..ci * plane + sy * w + sx0 + (xhi - xlo)];
                            for (a, b) in irow.iter_mut().zip(grow) {
                                *a += wv * b;
                            }
                        }
                    }
                    grad_weight[base + ky * K + kx] += acc;
                }
            }
        }
    }
}

pub(crate) fn avg_pool2_forward(input: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let i = ch * h * w + 2 * y * w + 2 * x;
                out[ch * oh * ow + y * ow + x] =
                    0.25 * (input[i] + input[i + 1] + input[i + w] + input[i + w + 1]);
            }
        }
    }
}

pub(crate) fn avg_pool2_backward(grad_out: &[f64], c: usize, h: usize, w: usize, grad_in: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * grad_out[ch * oh * ow + y * ow + x];
                let i = ch * h * w + 2 * y * w + 2 * x;
                grad_in[i] = g;
                grad_in[i + 1] = g;
                grad_in[i + w] = g;
                grad_in[i + w + 1] = g;
            }
        }
    }
}
