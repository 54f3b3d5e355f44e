//! Oracles shared by the integration tests. Nothing here calls into the
//! code under test for the quantity being checked.

#![allow(dead_code)]

pub mod gradients;

use rand::Rng;
use skb_semcom::diffcore::{Matrix, ParamSet};
use skb_semcom::rng::SimRng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Loss value, analytic gradients (one per input) and the distance of the
/// nearest non-smooth point (ReLU kink) from the current inputs.
pub struct Evaluated {
    pub loss: f64,
    pub grads: Vec<Matrix>,
    pub margin: f64,
}

/// Central differences on up to `max_coords` randomly chosen coordinates
/// (all of them when `None`); returns the worst relative error.
pub fn fd_check<F>(values: &[Matrix], max_coords: Option<usize>, rng: &mut SimRng, eval: F) -> f64
where
    F: Fn(&[Matrix]) -> Evaluated,
{
    let base = eval(values);
    let mut coords: Vec<(usize, usize)> = values
        .iter()
        .enumerate()
        .flat_map(|(m, v)| (0..v.len()).map(move |j| (m, j)))
        .collect();
    if let Some(k) = max_coords {
        while coords.len() > k {
            let i = rng.random_range(0..coords.len());
            coords.swap_remove(i);
        }
    }
    let mut worst: f64 = 0.0;
    let mut shifted = values.to_vec();
    for (m, j) in coords {
        let orig = values[m].as_slice()[j];
        shifted[m].as_mut_slice()[j] = orig + FD_STEP;
        let up = eval(&shifted).loss;
        shifted[m].as_mut_slice()[j] = orig - FD_STEP;
        let down = eval(&shifted).loss;
        shifted[m].as_mut_slice()[j] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(base.grads[m].as_slice()[j], numeric));
    }
    worst
}

pub fn uniform_matrix(rng: &mut SimRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Values bounded away from zero by `gap`, with random sign.
pub fn signed_away_from_zero(rng: &mut SimRng, rows: usize, cols: usize, gap: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v = rng.random_range(gap..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

// ---------------------------------------------------------------------------
// Plain-f64 hierarchical VAE objective, written from the formula:
//
//   L(x) = -log p(x | z) + beta * sum_g KL(q(z_g | x, z_<g) || p(z_g | z_<g))
//
// with z drawn top-down through the posterior using caller-supplied noise,
// Bernoulli pixels, and the null condition (a zero embedding).
// ---------------------------------------------------------------------------

fn dense(params: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
    let w = params.get(params.find(&format!("{name}.w")).unwrap());
    let b = params.get(params.find(&format!("{name}.b")).unwrap());
    assert_eq!(w.rows(), x.len(), "{name}: input width");
    (0..w.cols())
        .map(|j| b.get(0, j) + x.iter().enumerate().map(|(i, xi)| xi * w.get(i, j)).sum::<f64>())
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| if x > 0.0 { x } else { 0.0 }).collect()
}

fn positive_scale(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.exp().max(1e-6)).collect()
}

/// KL between factorized Normals written via variance ratios.
pub fn reference_kl(mu_q: &[f64], sd_q: &[f64], mu_p: &[f64], sd_p: &[f64]) -> f64 {
    (0..mu_q.len())
        .map(|j| {
            let r = sd_q[j] / sd_p[j];
            let t = (mu_q[j] - mu_p[j]) / sd_p[j];
            0.5 * (r * r + t * t - 1.0 - 2.0 * r.ln())
        })
        .sum()
}

/// Batch-mean objective; `eps[g]` holds one row of group-`g` noise per image.
pub fn reference_hvae_loss(params: &ParamSet, widths: &[usize], images: &[Vec<f64>], eps: &[Matrix], beta: f64) -> f64 {
    let embed = params.get(params.find("cvae.cond.w").unwrap()).cols();
    let e = vec![0.0; embed];
    let mut total = 0.0;
    for (i, x) in images.iter().enumerate() {
        let feats = relu(dense(params, "cvae.feat", x));
        let mut z: Vec<f64> = Vec::new();
        let mut kl = 0.0;
        for (g, &w) in widths.iter().enumerate() {
            let prior_in: Vec<f64> = e.iter().chain(&z).copied().collect();
            let p_out = dense(
                params,
                &format!("cvae.prior{g}.out"),
                &relu(dense(params, &format!("cvae.prior{g}.h"), &prior_in)),
            );
            let (mu_p, sd_p) = (p_out[..w].to_vec(), positive_scale(&p_out[w..]));
            let post_in: Vec<f64> = feats.iter().chain(&e).chain(&z).copied().collect();
            let q_out = dense(
                params,
                &format!("cvae.post{g}.out"),
                &relu(dense(params, &format!("cvae.post{g}.h"), &post_in)),
            );
            let mu_q: Vec<f64> = (0..w).map(|j| mu_p[j] + q_out[j]).collect();
            let sd_q: Vec<f64> = positive_scale(&q_out[w..])
                .iter()
                .zip(&sd_p)
                .map(|(a, b)| a * b)
                .collect();
            kl += reference_kl(&mu_q, &sd_q, &mu_p, &sd_p);
            for j in 0..w {
                z.push(mu_q[j] + sd_q[j] * eps[g].get(i, j));
            }
        }
        let dec_in: Vec<f64> = z.iter().chain(&e).copied().collect();
        let h = relu(dense(params, "cvae.dec.h1", &dec_in));
        let h = relu(dense(params, "cvae.dec.h2", &h));
        let logits = dense(params, "cvae.dec.out", &h);
        let nll: f64 = logits
            .iter()
            .zip(x)
            .map(|(l, xi)| {
                let p = 1.0 / (1.0 + (-l).exp());
                -(xi * p.ln() + (1.0 - xi) * (1.0 - p).ln())
            })
            .sum();
        total += nll + beta * kl;
    }
    total / images.len() as f64
}

// ---------------------------------------------------------------------------
// Ridge regression from pixels to attributes, used to confirm that the
// attributes are recoverable from the images before trusting an accuracy
// threshold on the learned encoder.
// ---------------------------------------------------------------------------

/// Solves `A x = b` for symmetric positive definite `A` (row-major `n x n`).
fn cholesky_solve(a: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                l[i * n + i] = (a[i * n + i] - s).sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}

/// Fits `[pixels, 1] -> attributes` with penalty `lambda` and returns the
/// mean absolute error on the held-out pairs.
pub fn ridge_heldout_mae(train: &[(Vec<f64>, Vec<f64>)], test: &[(Vec<f64>, Vec<f64>)], lambda: f64) -> f64 {
    let p = train[0].0.len() + 1;
    let d = train[0].1.len();
    let aug = |x: &Vec<f64>| -> Vec<f64> { x.iter().copied().chain([1.0]).collect() };
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![vec![0.0; p]; d];
    for (x, y) in train {
        let xa = aug(x);
        for i in 0..p {
            for j in 0..p {
                gram[i * p + j] += xa[i] * xa[j];
            }
            for (k, yk) in y.iter().enumerate() {
                rhs[k][i] += xa[i] * yk;
            }
        }
    }
    for i in 0..p {
        gram[i * p + i] += lambda;
    }
    let coef: Vec<Vec<f64>> = rhs.iter().map(|r| cholesky_solve(&gram, p, r)).collect();
    let mut err = 0.0;
    for (x, y) in test {
        let xa = aug(x);
        for (k, yk) in y.iter().enumerate() {
            let pred: f64 = xa.iter().zip(&coef[k]).map(|(a, c)| a * c).sum();
            err += (pred - yk).abs();
        }
    }
    err / (test.len() * d) as f64
}

/// Windowed SSIM computed with two-pass (mean-then-deviation) statistics.
pub fn reference_ssim(a: &[f64], b: &[f64], w: usize, h: usize, c: usize) -> f64 {
    let (win, stride) = (8, 4);
    let c1 = 1e-4;
    let c2 = 9e-4;
    let mut scores = Vec::new();
    for ch in 0..c {
        let mut y = 0;
        while y + win <= h {
            let mut x = 0;
            while x + win <= w {
                let idx: Vec<usize> = (y..y + win)
                    .flat_map(|yy| (x..x + win).map(move |xx| (yy * w + xx) * c + ch))
                    .collect();
                let n = idx.len() as f64;
                let ma = idx.iter().map(|&i| a[i]).sum::<f64>() / n;
                let mb = idx.iter().map(|&i| b[i]).sum::<f64>() / n;
                let va = idx.iter().map(|&i| (a[i] - ma).powi(2)).sum::<f64>() / n;
                let vb = idx.iter().map(|&i| (b[i] - mb).powi(2)).sum::<f64>() / n;
                let cov = idx.iter().map(|&i| (a[i] - ma) * (b[i] - mb)).sum::<f64>() / n;
                let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                let cs = (2.0 * cov + c2) / (va + vb + c2);
                scores.push(lum * cs);
                x += stride;
            }
            y += stride;
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}
