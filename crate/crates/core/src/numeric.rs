//! Finite differences, quadrature, root bracketing and seeded sampling.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Step scale for central differences of user-supplied fields.
pub const FD_FIELD: f64 = 1e-6;
/// Step scale for central differences of derived quantities (semisprays,
/// connection coefficients, dual metrics). Larger to control noise
/// amplification when the differentiated quantity is itself FD-based.
pub const FD_DERIVED: f64 = 1e-5;
/// Step scale for second differences (vertical Hessians). Kept above the
/// first-difference scales: second differences amplify roundoff by 1/h^2.
pub const FD_HESSIAN: f64 = 1e-3;

/// Scale-invariant step: `scale * max(1, |x|)`.
#[inline]
pub fn step(x: f64, scale: f64) -> f64 {
    scale * x.abs().max(1.0)
}

/// Central difference of a scalar function of one coordinate.
pub fn central<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Gradient of `f` by central differences, step scale per coordinate.
pub fn grad<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = step(x[i], scale);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Fallible variant of [`grad`].
pub fn try_grad<T, F>(f: F, x: &[f64], scale: f64) -> Result<Vec<f64>, T>
where
    F: Fn(&[f64]) -> Result<f64, T>,
{
    let mut out = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = step(x[i], scale);
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        out[i] = (fp - fm) / (2.0 * h);
    }
    Ok(out)
}

/// Symmetric second-difference Hessian of a scalar function.
pub fn hessian<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], scale: f64) -> ndarray::Array2<f64> {
    let n = x.len();
    let mut h = ndarray::Array2::zeros((n, n));
    let f0 = f(x);
    let steps: Vec<f64> = x.iter().map(|&xi| step(xi, scale)).collect();
    let mut xp = x.to_vec();
    for i in 0..n {
        // diagonal: (f(x+h) - 2 f(x) + f(x-h)) / h^2
        xp[i] = x[i] + steps[i];
        let fp = f(&xp);
        xp[i] = x[i] - steps[i];
        let fm = f(&xp);
        xp[i] = x[i];
        h[[i, i]] = (fp - 2.0 * f0 + fm) / (steps[i] * steps[i]);
        for j in (i + 1)..n {
            xp[i] = x[i] + steps[i];
            xp[j] = x[j] + steps[j];
            let fpp = f(&xp);
            xp[j] = x[j] - steps[j];
            let fpm = f(&xp);
            xp[i] = x[i] - steps[i];
            let fmm = f(&xp);
            xp[j] = x[j] + steps[j];
            let fmp = f(&xp);
            xp[i] = x[i];
            xp[j] = x[j];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * steps[i] * steps[j]);
            h[[i, j]] = v;
            h[[j, i]] = v;
        }
    }
    h
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn go<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            go(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
                + go(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(&f, a, fa, b, fb);
    go(&f, a, fa, b, fb, whole, m, fm, tol, 48)
}

/// Invert a strictly increasing function by bisection: returns `x` in
/// `[lo, hi]` with `f(x) = target` to absolute tolerance `tol` in `x`.
pub fn bisect_increasing<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, target: f64, tol: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let mut fa = f(a) - target;
    if fa.abs() <= f64::EPSILON {
        return a;
    }
    debug_assert!(fa <= 0.0, "target below bracket");
    while b - a > tol {
        let m = 0.5 * (a + b);
        let fm = f(m) - target;
        if (fm >= 0.0) != (fa >= 0.0) {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    0.5 * (a + b)
}

/// Axis-aligned sampling region.
#[derive(Debug, Clone)]
pub struct SampleBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SampleBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        SampleBox { lo, hi }
    }

    /// Centered cube `[-r, r]^dim`.
    pub fn centered(dim: usize, r: f64) -> Self {
        SampleBox {
            lo: vec![-r; dim],
            hi: vec![r; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&xi, (&lo, &hi))| xi >= lo && xi <= hi)
    }

    /// `count` points drawn uniformly from the box with a seeded generator.
    pub fn sample(&self, seed: u64, count: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                self.lo
                    .iter()
                    .zip(&self.hi)
                    .map(|(&lo, &hi)| {
                        if lo == hi {
                            lo
                        } else {
                            rng.random_range(lo..hi)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Largest absolute entry of an ndarray of any dimension.
pub fn max_abs<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Inverse of a small dense matrix by Gauss-Jordan elimination with partial
/// pivoting. Returns `None` when a pivot degenerates.
pub fn invert(a: &ndarray::Array2<f64>) -> Option<ndarray::Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut w = a.clone();
    let mut inv = ndarray::Array2::eye(n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            w[[i, col]]
                .abs()
                .partial_cmp(&w[[j, col]].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if w[[pivot, col]].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                w.swap([pivot, k], [col, k]);
                inv.swap([pivot, k], [col, k]);
            }
        }
        let d = w[[col, col]];
        for k in 0..n {
            w[[col, k]] /= d;
            inv[[col, k]] /= d;
        }
        for row in 0..n {
            if row != col {
                let factor = w[[row, col]];
                if factor != 0.0 {
                    for k in 0..n {
                        w[[row, k]] -= factor * w[[col, k]];
                        inv[[row, k]] -= factor * inv[[col, k]];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Determinant via LU with partial pivoting.
pub fn det(a: &ndarray::Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut w = a.clone();
    let mut d = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                w[[i, col]]
                    .abs()
                    .partial_cmp(&w[[j, col]].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        if w[[pivot, col]] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..n {
                w.swap([pivot, k], [col, k]);
            }
            d = -d;
        }
        d *= w[[col, col]];
        for row in (col + 1)..n {
            let factor = w[[row, col]] / w[[col, col]];
            for k in col..n {
                w[[row, k]] -= factor * w[[col, k]];
            }
        }
    }
    d
}

/// Matrix-vector product for `Array2` against a slice.
pub fn matvec(a: &ndarray::Array2<f64>, v: &[f64]) -> Vec<f64> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[[i, j]] * v[j]).sum())
        .collect()
}

/// Euclidean inner product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Quadratic form `v^T a v`.
pub fn quad_form(a: &ndarray::Array2<f64>, v: &[f64]) -> f64 {
    dot(&matvec(a, v), v)
}
