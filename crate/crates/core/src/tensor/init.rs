use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{Real, Tensor};

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [cout, cin, k] => (cin * k, cout * k),
        [rows, cols] => (*cols, *rows),
        [n] => (*n, *n),
        _ => (1, 1),
    }
}

/// Uniform in `±√(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Real, G: Rng + ?Sized>(shape: &[usize], rng: &mut G) -> Tensor<R> {
    let (fan_in, fan_out) = fans(shape);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| R::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape product")
}

/// Weight with orthonormal rows (or columns, whichever are fewer) when
/// flattened to `[shape[0], rest]`, scaled by `gain`.
pub fn orthogonal_init<R: Real, G: Rng + ?Sized>(
    shape: &[usize],
    gain: f64,
    rng: &mut G,
) -> Tensor<R> {
    let rows = shape.first().copied().unwrap_or(1);
    let cols: usize = shape.iter().skip(1).product();
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign fix makes the distribution uniform over orthogonal matrices
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows >= cols { q } else { q.transpose() };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(R::of(gain * m[(i, j)]));
        }
    }
    Tensor::new(shape, data).expect("shape product")
}
