//! Brute-force loss oracles shared by the loss tests and the acceptance suite.
#![allow(dead_code)]

use numgrad::Tensor;
use rand::Rng;

pub fn rows(psi: &Tensor) -> Vec<Vec<f64>> {
    (0..psi.rows()).map(|i| psi.row_slice(i).to_vec()).collect()
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

pub fn cov_oracle(psi: &Tensor) -> f64 {
    let r = rows(psi);
    let (n, d) = (r.len(), r[0].len());
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (mi, mj) = (r[i].iter().sum::<f64>() / d as f64, r[j].iter().sum::<f64>() / d as f64);
            let mut c = 0.0;
            for k in 0..d {
                c += (r[i][k] - mi) * (r[j][k] - mj);
            }
            off += (c / (d as f64 - 1.0)).abs();
        }
    }
    off / ((n - 1) * (n - 1)) as f64
}

pub fn corr_oracle(psi: &Tensor) -> f64 {
    let c: Vec<Vec<f64>> = rows(psi).iter().map(|r| centered(r)).collect();
    let d = c[0].len();
    let num: f64 = (0..d).map(|k| c.iter().map(|r| r[k]).product::<f64>()).sum();
    let den: f64 = c.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).product();
    num / (den + 1e-12).sqrt()
}

pub fn kld_oracle(psi: &Tensor) -> f64 {
    let r = rows(psi);
    let (n, d) = (r.len(), r[0].len());
    let mut total = 0.0;
    for k in 0..d {
        let mu = r.iter().map(|row| row[k]).sum::<f64>() / n as f64;
        let var = (r.iter().map(|row| (row[k] - mu).powi(2)).sum::<f64>() / n as f64).max(1e-12);
        total += 0.5 * (mu * mu + var - var.ln() - 1.0);
    }
    total / d as f64
}

pub fn rgb_oracle(pred: &Tensor, truth: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.rows() {
        let mut sq = 0.0;
        for c in 0..3 {
            sq += (pred.at(i, c) - truth.at(i, c)).powi(2);
        }
        s += sq.sqrt();
    }
    s
}

pub fn nsf_oracle(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum()
}

pub fn random_matrix<R: Rng>(rng: &mut R, n: usize, d: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Rows on the simplex, as blend weights are.
pub fn random_simplex<R: Rng>(rng: &mut R, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::matrix(n, d, data).unwrap()
}
