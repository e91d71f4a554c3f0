//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use rand::Rng;

/// Random metric instance: flat `pred [M,A,T,2]`, `gt [A,T,2]`, mask `[A,T]`.
pub struct MetricCase {
    pub m: usize,
    pub a: usize,
    pub t: usize,
    pub pred: Vec<f64>,
    pub gt: Vec<f64>,
    pub valid: Vec<bool>,
}

impl MetricCase {
    pub fn random(rng: &mut impl Rng, max_m: usize, max_a: usize, max_t: usize, masked: bool) -> Self {
        let m = rng.random_range(1..=max_m);
        let a = rng.random_range(1..=max_a);
        let t = rng.random_range(1..=max_t);
        let gt: Vec<f64> = (0..a * t * 2).map(|_| rng.random_range(-20.0..20.0)).collect();
        let pred = (0..m * a * t * 2)
            .map(|i| gt[i % (a * t * 2)] + rng.random_range(-3.0..3.0))
            .collect();
        let valid = (0..a * t).map(|_| !masked || rng.random_bool(0.85)).collect();
        MetricCase {
            m,
            a,
            t,
            pred,
            gt,
            valid,
        }
    }

    fn l2(&self, m: usize, a: usize, t: usize) -> f64 {
        let p = ((m * self.a + a) * self.t + t) * 2;
        let g = (a * self.t + t) * 2;
        let dx = self.pred[p] - self.gt[g];
        let dy = self.pred[p + 1] - self.gt[g + 1];
        (dx * dx + dy * dy).sqrt()
    }

    /// Per-mode SADE by nested loops.
    pub fn sade(&self, m: usize) -> f64 {
        let mut total = 0.0;
        let mut agents = 0usize;
        for a in 0..self.a {
            let mut s = 0.0;
            let mut n = 0usize;
            for t in 0..self.t {
                if self.valid[a * self.t + t] {
                    s += self.l2(m, a, t);
                    n += 1;
                }
            }
            if n > 0 {
                total += s / n as f64;
                agents += 1;
            }
        }
        if agents == 0 {
            0.0
        } else {
            total / agents as f64
        }
    }

    pub fn fde(&self, m: usize, a: usize) -> Option<f64> {
        let mut last = None;
        for t in 0..self.t {
            if self.valid[a * self.t + t] {
                last = Some(t);
            }
        }
        last.map(|t| self.l2(m, a, t))
    }

    pub fn sfde(&self, m: usize) -> f64 {
        let mut total = 0.0;
        let mut agents = 0usize;
        for a in 0..self.a {
            if let Some(e) = self.fde(m, a) {
                total += e;
                agents += 1;
            }
        }
        if agents == 0 {
            0.0
        } else {
            total / agents as f64
        }
    }

    pub fn min_sade(&self) -> f64 {
        let mut best = f64::INFINITY;
        for m in 0..self.m {
            best = best.min(self.sade(m));
        }
        best
    }

    pub fn min_sfde(&self) -> f64 {
        let mut best = f64::INFINITY;
        for m in 0..self.m {
            best = best.min(self.sfde(m));
        }
        best
    }

    pub fn miss(&self) -> bool {
        let mut chosen = 0;
        for m in 1..self.m {
            if self.sfde(m) < self.sfde(chosen) {
                chosen = m;
            }
        }
        (0..self.a).any(|a| self.fde(chosen, a).is_some_and(|e| e > 2.0))
    }
}

/// Dense 4×4 MGNLL: builds L·D·Lᵀ explicitly, then uses the textbook
/// determinant and inverse from nalgebra.
pub fn dense_mgnll(p: &[f64; 10], mu: &[f64; 4], x: &[f64; 4]) -> f64 {
    use nalgebra::{Matrix4, Vector4};
    let [_, _, _, _, a, b, c, d, e, f] = *p;
    let l = Matrix4::new(
        1.0, 0.0, 0.0, 0.0, //
        a, 1.0, 0.0, 0.0, //
        b, c, 1.0, 0.0, //
        d, e, f, 1.0,
    );
    let dm = Matrix4::from_diagonal(&Vector4::new(p[0] * p[0], p[1] * p[1], p[2] * p[2], p[3] * p[3]));
    let sigma = l * dm * l.transpose();
    let r = Vector4::from_row_slice(x) - Vector4::from_row_slice(mu);
    let inv = sigma.try_inverse().expect("SPD matrix inverts");
    2.0 * (2.0 * std::f64::consts::PI).ln()
        + 0.5 * sigma.determinant().ln()
        + 0.5 * (r.transpose() * inv * r)[0]
}

/// Random covariance parameters spanning the usable range.
pub fn random_params(rng: &mut impl Rng) -> [f64; 10] {
    std::array::from_fn(|k| {
        if k < 4 {
            rng.random_range(0.05..3.0)
        } else {
            rng.random_range(-2.0..2.0)
        }
    })
}
