//! Brute-force reference implementations used by several test targets.
#![allow(dead_code)]

use ndarray::Array4;
use rand::Rng;
use vcil::FrameSequence;

/// Mean of row `k`, summed left to right.
pub fn acc_oracle(rows: &[Vec<f64>], k: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for v in &rows[k] {
        sum += v;
        n += 1.0;
    }
    sum / n
}

pub fn forgetting_oracle(rows: &[Vec<f64>], k: usize, j: usize) -> f64 {
    let mut best = rows[j][j];
    for row in &rows[j + 1..k] {
        if row[j] > best {
            best = row[j];
        }
    }
    best - rows[k][j]
}

pub fn for_oracle(rows: &[Vec<f64>], k: usize) -> f64 {
    let mut sum = 0.0;
    for j in 0..k {
        sum += forgetting_oracle(rows, k, j);
    }
    sum / k as f64
}

/// Lower-triangular matrix with `tasks` rows of accuracies on a 0.5 grid or
/// uniform reals, so exact ties appear often enough to matter.
pub fn random_matrix(rng: &mut impl Rng, tasks: usize) -> Vec<Vec<f64>> {
    let grid = rng.random_bool(0.5);
    (0..tasks)
        .map(|k| {
            (0..=k)
                .map(|_| {
                    if grid {
                        rng.random_range(0..=200) as f64 * 0.5
                    } else {
                        rng.random_range(0.0..=100.0)
                    }
                })
                .collect()
        })
        .collect()
}

/// Herding by recomputing the candidate mean from scratch at every step.
pub fn herding_oracle(features: &[Vec<f64>], mean: &[f64], m: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < m.min(features.len()) {
        let t = (chosen.len() + 1) as f64;
        let mut best_i = usize::MAX;
        let mut best_d = f64::INFINITY;
        for i in 0..features.len() {
            if chosen.contains(&i) {
                continue;
            }
            let mut d = 0.0;
            for c in 0..mean.len() {
                let mut s = 0.0;
                for &p in &chosen {
                    s += features[p][c];
                }
                s += features[i][c];
                let diff = mean[c] - s / t;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best_i = i;
            }
        }
        chosen.push(best_i);
    }
    chosen
}

/// A `(T, 1, 1, 1)` sequence holding one scalar per frame.
pub fn scalar_sequence(values: &[f32], label: usize) -> FrameSequence {
    let frames = Array4::from_shape_vec((values.len(), 1, 1, 1), values.to_vec()).unwrap();
    FrameSequence::new(frames, label, "scalar").unwrap()
}

pub fn scalars(seq: &FrameSequence) -> Vec<f32> {
    seq.frames().iter().copied().collect()
}

/// Sequence whose frame `t` is filled with `values[t]`.
pub fn flat_sequence(values: &[f32], c: usize, h: usize, w: usize, label: usize) -> FrameSequence {
    let mut frames = Array4::<f32>::zeros((values.len(), c, h, w));
    for (t, v) in values.iter().enumerate() {
        frames.index_axis_mut(ndarray::Axis(0), t).fill(*v);
    }
    FrameSequence::new(frames, label, format!("flat-{label}")).unwrap()
}
