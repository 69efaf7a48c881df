//! Multinomial logistic regression fitted by accelerated proximal gradient
//! (FISTA), with optional L1 and L2 penalties. Deterministic: zero init, fixed
//! iteration count, step from a power-iteration Lipschitz bound.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub l1: f64,
    pub l2: f64,
    pub iters: usize,
    pub standardize: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { l1: 0.0, l2: 1e-4, iters: 500, standardize: true }
    }
}

#[derive(Debug, Clone)]
pub struct SoftmaxRegression {
    /// (d, k), on standardized features.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

pub fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Largest eigenvalue of XᵀX/N by power iteration.
fn gram_spectral_norm(x: &Array2<f64>) -> f64 {
    let (n, d) = x.dim();
    if d == 0 || n == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = x.t().dot(&x.dot(&v)) / n as f64;
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w / norm;
    }
    lambda
}

impl SoftmaxRegression {
    pub fn fit(x: ArrayView2<f64>, labels: &[usize], classes: usize, opts: FitOptions) -> Result<Self> {
        let (n, d) = x.dim();
        if n == 0 || n != labels.len() {
            return Err(Error::invalid("classifier: empty or misaligned training data"));
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::invalid("classifier: label out of range"));
        }
        let (mean, scale) = if opts.standardize {
            let mean = x.mean_axis(Axis(0)).expect("n > 0");
            let std = x.std_axis(Axis(0), 0.0);
            (mean, std.mapv(|s| if s > 1e-12 { s } else { 1.0 }))
        } else {
            (Array1::zeros(d), Array1::ones(d))
        };
        let xs = (&x - &mean) / &scale;
        let mut onehot = Array2::<f64>::zeros((n, classes));
        for (i, &l) in labels.iter().enumerate() {
            onehot[[i, l]] = 1.0;
        }
        // softmax CE gradient is 0.5·λmax(XᵀX/N)-Lipschitz in W (+1 for the bias)
        let lip = 0.5 * (gram_spectral_norm(&xs) + 1.0) + opts.l2;
        let step = 1.0 / lip;

        let mut w = Array2::<f64>::zeros((d, classes));
        let mut b = Array1::<f64>::zeros(classes);
        let (mut yw, mut yb) = (w.clone(), b.clone());
        let mut t = 1.0f64;
        for _ in 0..opts.iters {
            let mut p = xs.dot(&yw) + &yb;
            softmax_rows(&mut p);
            let r = (p - &onehot) / n as f64;
            let gw = xs.t().dot(&r) + &yw * opts.l2;
            let gb = r.sum_axis(Axis(0));
            let mut nw = &yw - &(gw * step);
            let nb = &yb - &(gb * step);
            if opts.l1 > 0.0 {
                let thr = opts.l1 * step;
                nw.mapv_inplace(|v| v.signum() * (v.abs() - thr).max(0.0));
            }
            let nt = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let mom = (t - 1.0) / nt;
            yw = &nw + &((&nw - &w) * mom);
            yb = &nb + &((&nb - &b) * mom);
            w = nw;
            b = nb;
            t = nt;
        }
        Ok(SoftmaxRegression { weights: w, bias: b, mean, scale })
    }

    pub fn probabilities(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let xs = (&x - &self.mean) / &self.scale;
        let mut p = xs.dot(&self.weights) + &self.bias;
        softmax_rows(&mut p);
        p
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        self.probabilities(x)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, labels: &[usize]) -> f64 {
        let pred = self.predict(x);
        pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
    }

    pub fn mean_cross_entropy(&self, x: ArrayView2<f64>, labels: &[usize]) -> f64 {
        let p = self.probabilities(x);
        labels.iter().enumerate().map(|(i, &l)| -p[[i, l]].max(1e-300).ln()).sum::<f64>() / labels.len() as f64
    }
}
