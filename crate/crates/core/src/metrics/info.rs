//! Histogram entropy and mutual information, natural log.

/// Uniform-width bin index of every value over the empirical range.
/// A constant column maps to a single bin.
pub fn discretize(values: &[f64], bins: usize) -> Vec<usize> {
    assert!(bins > 0);
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    let width = (hi - lo) / bins as f64;
    values
        .iter()
        .map(|&v| (((v - lo) / width) as usize).min(bins - 1))
        .collect()
}

fn cardinality(x: &[usize]) -> usize {
    x.iter().max().map_or(0, |m| m + 1)
}

pub fn entropy(x: &[usize]) -> f64 {
    let n = x.len() as f64;
    let mut counts = vec![0usize; cardinality(x)];
    for &v in x {
        counts[v] += 1;
    }
    counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information of two discrete sequences.
pub fn mutual_info(x: &[usize], y: &[usize]) -> f64 {
    assert_eq!(x.len(), y.len());
    if x.is_empty() {
        return 0.0;
    }
    let (kx, ky) = (cardinality(x), cardinality(y));
    let mut joint = vec![0usize; kx * ky];
    let mut px = vec![0usize; kx];
    let mut py = vec![0usize; ky];
    for (&a, &b) in x.iter().zip(y) {
        joint[a * ky + b] += 1;
        px[a] += 1;
        py[b] += 1;
    }
    let n = x.len() as f64;
    let mut mi = 0.0;
    for a in 0..kx {
        for b in 0..ky {
            let c = joint[a * ky + b];
            if c > 0 {
                // c·n / (px·py) without overflow
                let ratio = (c as f64 / n) / ((px[a] as f64 / n) * (py[b] as f64 / n));
                mi += c as f64 / n * ratio.ln();
            }
        }
    }
    mi.max(0.0)
}

/// `mi[d][k]` = I(code dim d; factor k) with `bins` bins per code dim.
pub fn mi_matrix(codes: &[Vec<f64>], factors: &[Vec<usize>], bins: usize) -> Vec<Vec<f64>> {
    let m = codes.first().map_or(0, |r| r.len());
    let nf = factors.first().map_or(0, |r| r.len());
    let columns: Vec<Vec<usize>> = (0..nf).map(|k| factors.iter().map(|r| r[k]).collect()).collect();
    (0..m)
        .map(|d| {
            let col: Vec<f64> = codes.iter().map(|r| r[d]).collect();
            let binned = discretize(&col, bins);
            columns.iter().map(|f| mutual_info(&binned, f)).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_edges() {
        assert_eq!(discretize(&[0.0, 0.5, 1.0], 2), vec![0, 1, 1]);
        assert_eq!(discretize(&[3.0, 3.0], 20), vec![0, 0]);
    }

    #[test]
    fn identical_sequences_share_all_information() {
        let x = vec![0, 1, 2, 0, 1, 2, 2];
        assert!((mutual_info(&x, &x) - entropy(&x)).abs() < 1e-12);
    }

    #[test]
    fn independent_product_has_zero_information() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for a in 0..3 {
            for b in 0..4 {
                x.push(a);
                y.push(b);
            }
        }
        assert!(mutual_info(&x, &y).abs() < 1e-12);
    }
}
