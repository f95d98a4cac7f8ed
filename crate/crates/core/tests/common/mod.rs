//! Independent scalar reference implementations used by the integration
//! tests and the acceptance harness. The oracles work on plain
//! `Vec<Vec<f64>>` with explicit loops and share no code with the crate;
//! `gradcheck` drives the crate's backward passes against finite differences.

#![allow(dead_code)]

pub mod gradcheck;

use cona::cona::{LearningType, Strategy};
use cona::numerics::Matrix;
use cona::losses::EmbeddingBatch;
use rand::Rng;
use rand_distr::StandardNormal;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(m: &Matrix<f64>) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn matrix_of(rows: &Rows) -> Matrix<f64> {
    Matrix::from_rows(rows)
}

/// Random unit-norm rows.
pub fn unit_rows<R: Rng>(n: usize, d: usize, rng: &mut R) -> Rows {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn batch(rows: &Rows) -> EmbeddingBatch<f64> {
    EmbeddingBatch::new(matrix_of(rows)).expect("unit rows")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// p_ij(a, b) computed entry by entry.
pub fn prob(a: &Rows, b: &Rows, tau: f64) -> Rows {
    let n = a.len();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| dot(&a[i], &b[j]) / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..n {
            p[i][j] = (logits[j] - m).exp() / z;
        }
    }
    p
}

pub fn infonce(a: &Rows, b: &Rows, tau: f64) -> f64 {
    let n = a.len();
    let p = prob(a, b, tau);
    let mut s = 0.0;
    for i in 0..n {
        s += p[i][i].ln();
    }
    -s / n as f64
}

pub fn fd(a: &Rows, b: &Rows) -> f64 {
    let (n, d) = (a.len(), a[0].len());
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..d {
            s += (a[i][j] - b[i][j]).powi(2);
        }
    }
    0.5 * s / (n * d) as f64
}

pub fn sd(pa: &Rows, pb: &Rows, ta: &Rows, tb: &Rows) -> f64 {
    let n = pa.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += (dot(&pa[i], &pb[j]) - dot(&ta[i], &tb[j])).powi(2);
        }
    }
    0.5 * s / (n * n) as f64
}

pub fn kl(pa: &Rows, pb: &Rows, ta: &Rows, tb: &Rows, tau: f64) -> f64 {
    let n = pa.len();
    let p = prob(pa, pb, tau);
    let q = prob(ta, tb, tau);
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += p[i][j] * (p[i][j] / q[i][j]).ln();
        }
    }
    s / n as f64
}

/// Student and teacher outputs for both modalities.
pub struct Quad {
    pub ts: Rows,
    pub is: Rows,
    pub tt: Rows,
    pub it: Rows,
}

/// Value of one grid cell, wired by hand from the learning-type table.
pub fn cell(lt: LearningType, s: Strategy, q: &Quad, tau: f64) -> Option<f64> {
    use LearningType::*;
    use Strategy::*;
    let Quad { ts, is, tt, it } = q;
    Some(match (lt, s) {
        (IntraStuStu, SD) => sd(ts, ts, tt, tt) + sd(is, is, it, it),
        (IntraStuStu, KLDiv) => kl(ts, ts, tt, tt, tau) + kl(is, is, it, it, tau),
        (IntraStuStu, SymSD) => sd(ts, ts, is, is),
        (IntraStuStu, SymKLDiv) => kl(ts, ts, is, is, tau) + kl(is, is, ts, ts, tau),

        (InterStuStu, InfoNCE) => infonce(ts, is, tau) + infonce(is, ts, tau),
        (InterStuStu, FD) => fd(ts, is),
        (InterStuStu, SD) => sd(ts, is, tt, it) + sd(is, ts, it, tt),
        (InterStuStu, KLDiv) => kl(ts, is, tt, it, tau) + kl(is, ts, it, tt, tau),

        (IntraTchStu, InfoNCE) => infonce(ts, tt, tau) + infonce(is, it, tau),
        (IntraTchStu, FD) => fd(ts, tt) + fd(is, it),
        (IntraTchStu, SD) => sd(ts, tt, tt, tt) + sd(is, it, it, it),
        (IntraTchStu, KLDiv) => kl(ts, tt, tt, tt, tau) + kl(is, it, it, it, tau),
        (IntraTchStu, SymSD) => sd(ts, tt, is, it),
        (IntraTchStu, SymKLDiv) => kl(ts, tt, is, it, tau) + kl(is, it, ts, tt, tau),

        (InterTchStu, InfoNCE) => infonce(ts, it, tau) + infonce(is, tt, tau),
        (InterTchStu, FD) => fd(ts, it) + fd(is, tt),
        (InterTchStu, SD) => sd(ts, it, tt, it) + sd(is, tt, it, tt),
        (InterTchStu, KLDiv) => kl(ts, it, tt, it, tau) + kl(is, tt, it, tt, tau),
        (InterTchStu, SymSD) => sd(ts, it, is, tt),
        (InterTchStu, SymKLDiv) => kl(ts, it, is, tt, tau) + kl(is, tt, ts, it, tau),

        _ => return None,
    })
}

/// CLIP pre-training objective on a teacher pair.
pub fn clip(t: &Rows, i: &Rows, tau: f64) -> f64 {
    infonce(t, i, tau) + infonce(i, t, tau)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Scalar AdamW with decoupled decay, one parameter.
pub struct ScalarAdamW {
    pub p: f64,
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdamW {
    pub fn new(p: f64) -> Self {
        Self { p, m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, g: f64, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) {
        self.t += 1;
        self.p -= lr * wd * self.p;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - b1.powi(self.t));
        let v_hat = self.v / (1.0 - b2.powi(self.t));
        self.p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Brute-force ranking: every gallery item scored, full sort by
/// (score desc, id asc).
pub fn brute_topk(ids: &[String], gallery: &Rows, query: &[f64], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = ids.iter().cloned().zip(gallery.iter().map(|g| dot(g, query))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub fn brute_recall(ids: &[String], gallery: &Rows, queries: &Rows, truth: &[String], k: usize) -> f64 {
    let hits = queries
        .iter()
        .zip(truth)
        .filter(|(q, t)| brute_topk(ids, gallery, q, k).iter().any(|(id, _)| id == *t))
        .count();
    hits as f64 / queries.len() as f64
}
