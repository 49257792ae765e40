//! Test-only oracles built on nalgebra's own eigensolver and Gauss-Legendre
//! quadrature, independent of the crate's closed forms.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub const GL_NODES: usize = 64;

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and P_n'(x)
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - x);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// `Theta^p` through nalgebra's symmetric eigendecomposition.
pub fn power(theta: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let e = theta.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.powf(p)));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

pub fn log_m(theta: &DMatrix<f64>) -> DMatrix<f64> {
    let e = theta.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f64::ln));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `int_0^1 Theta^s (x) Theta^(1-s) ds`.
pub fn psi_quadrature(theta: &DMatrix<f64>) -> DMatrix<f64> {
    let (x, w) = gauss_legendre(GL_NODES);
    let n = theta.nrows();
    let mut acc = DMatrix::zeros(n * n, n * n);
    for (s, wk) in x.iter().zip(&w) {
        acc += power(theta, *s).kronecker(&power(theta, 1.0 - s)) * *wk;
    }
    acc
}

/// `int_0^1 [t(Theta - I) + I]^-1 (x) [t(Theta - I) + I]^-1 dt`.
pub fn h_quadrature(theta: &DMatrix<f64>) -> DMatrix<f64> {
    let (x, w) = gauss_legendre(GL_NODES);
    let n = theta.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut acc = DMatrix::zeros(n * n, n * n);
    for (t, wk) in x.iter().zip(&w) {
        let m = ((theta - &eye) * *t + &eye).try_inverse().expect("SPD");
        acc += m.kronecker(&m) * *wk;
    }
    acc
}

/// `int int Theta^(t+s-1) (x) Theta^(1-t-s) ds dt`.
pub fn xi_quadrature_product(theta: &DMatrix<f64>) -> DMatrix<f64> {
    let (x, w) = gauss_legendre(GL_NODES);
    let n = theta.nrows();
    let mut acc = DMatrix::zeros(n * n, n * n);
    for (t, wt) in x.iter().zip(&w) {
        for (s, ws) in x.iter().zip(&w) {
            let a = t + s - 1.0;
            acc += power(theta, a).kronecker(&power(theta, -a)) * (wt * ws);
        }
    }
    acc
}

/// `int int (e^(-st Omega) (x) e^(st Omega) + e^(st Omega) (x) e^(-st Omega)) t ds dt`.
pub fn xi_quadrature_weighted(theta: &DMatrix<f64>) -> DMatrix<f64> {
    let (x, w) = gauss_legendre(GL_NODES);
    let n = theta.nrows();
    let mut acc = DMatrix::zeros(n * n, n * n);
    for (t, wt) in x.iter().zip(&w) {
        for (s, ws) in x.iter().zip(&w) {
            let a = s * t;
            let (lo, hi) = (power(theta, -a), power(theta, a));
            acc += (lo.kronecker(&hi) + hi.kronecker(&lo)) * (t * wt * ws);
        }
    }
    acc
}

/// SPD matrix with eigenvalues drawn log-uniformly from `[lo, hi]`.
pub fn random_spd(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = a.qr().q();
    let lam = DVector::from_fn(n, |_, _| (rng.random_range(lo.ln()..hi.ln())).exp());
    let m = &q * DMatrix::from_diagonal(&lam) * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Random correlation matrix: a random SPD matrix rescaled to unit diagonal.
pub fn random_correlation(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let m = random_spd(rng, n, 0.2, 3.0);
    let d = m.diagonal().map(f64::sqrt);
    let mut c = DMatrix::from_fn(n, n, |i, j| m[(i, j)] / (d[i] * d[j]));
    c.fill_diagonal(1.0);
    c
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.amax()
}
