//! Small statistics helpers shared by the audits and experiment runners.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Consistency factor turning a MAD into a Gaussian standard deviation.
pub const MAD_TO_SIGMA: f64 = 1.4826;

/// Median of the values (average of the two middle elements for even counts).
/// Returns NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    let n = v.len();
    let mid = n / 2;
    let (_, hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Median absolute value, i.e. the MAD about zero.
pub fn mad_about_zero(values: &[f64]) -> f64 {
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    median(&abs)
}

/// `(1.4826 * MAD)^2` with the MAD taken about zero.
pub fn robust_mse(values: &[f64]) -> f64 {
    let s = MAD_TO_SIGMA * mad_about_zero(values);
    s * s
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance with divisor `n - 1`.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Standard error of the mean.
pub fn std_error(values: &[f64]) -> f64 {
    (variance(values) / values.len() as f64).sqrt()
}

/// Sample covariance (divisor `n - 1`) of the given vectors.
pub fn sample_covariance(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let n = samples.len();
    let d = samples[0].len();
    let mut m = DVector::zeros(d);
    for s in samples {
        m += s;
    }
    m /= n as f64;
    let mut c = DMatrix::zeros(d, d);
    for s in samples {
        let e = s - &m;
        c.ger(1.0, &e, &e, 1.0);
    }
    c / (n as f64 - 1.0)
}

/// Empirical quantile with linear interpolation, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Percentile bootstrap confidence interval of the mean.
pub fn bootstrap_mean_ci(values: &[f64], level: f64, n_boot: usize, rng: &mut impl rand::Rng) -> (f64, f64) {
    if values.len() < 2 {
        let m = values.first().copied().unwrap_or(f64::NAN);
        return (m, m);
    }
    let n = values.len();
    let means: Vec<f64> = (0..n_boot)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let a = 0.5 * (1.0 - level);
    (quantile(&means, a), quantile(&means, 1.0 - a))
}

/// Symmetric part `(A + A^T) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Symmetric eigen square root of a PSD matrix; tiny negative eigenvalues
/// from round-off are clamped to zero.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Whether `a` is symmetric and positive semi-definite up to `tol * trace`.
pub fn is_psd(a: &DMatrix<f64>, tol: f64) -> bool {
    let tr = a.trace().abs().max(f64::MIN_POSITIVE);
    let asym = (a - a.transpose()).amax();
    if asym > 1e-12 * a.amax().max(1.0) {
        return false;
    }
    SymmetricEigen::new(symmetrize(a)).eigenvalues.min() >= -tol * tr
}
