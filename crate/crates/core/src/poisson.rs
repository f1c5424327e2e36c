//! Poisson bivectors on Lie algebroids: the local self-bracket condition,
//! contravariant connection coefficients, the Poisson-making correction and
//! contravariant geodesics.
//!
//! A bivector `pi[a][b](x)` (antisymmetrized at construction) is Poisson iff
//! the cyclic sum
//!
//! ```text
//! sum_{(a,e,d)} ( pi[a][b] sigma[i][b] dpi[e][d]/dx[i]
//!                 + pi[a][b] pi[g][d] L[e][b][g] ) = 0.
//! ```
//!
//! A contravariant connection with coefficients `Gamma[a][b][g]` acts on the
//! bivector through the contravariant derivative
//!
//! ```text
//! pi[b][g]/^a = pi[a][e] sigma[i][e] dpi[b][g]/dx[i]
//!               + Gamma[b][a][e] pi[e][g] + Gamma[g][a][e] pi[b][e],
//! ```
//!
//! and `Gamma' = Gamma - 1/2 pi_{ge} (pi[a][e]/^b)` makes that derivative
//! vanish wherever the bivector is invertible. Here `pi_{ge}` is the lower
//! bivector normalized by `pi[e][g] pi_{et} = delta[g][t]` (the transposed
//! matrix inverse; for an antisymmetric matrix this is the negated inverse),
//! which is the normalization under which the correction cancels exactly.

use std::sync::Arc;

use ndarray::{Array2, Array3};

use crate::algebroid::LieAlgebroid;
use crate::error::{Error, Result};
use crate::numeric::{self, FD_FIELD};

type XFn<T> = Arc<dyn Fn(&[f64]) -> T + Send + Sync>;

/// Antisymmetric bivector field `pi[a][b](x)` with optional partials.
#[derive(Clone)]
pub struct PoissonBivector {
    n: usize,
    m: usize,
    eval: XFn<Array2<f64>>,
    partials: Option<XFn<Array3<f64>>>,
}

fn antisymmetrize(a: &Array2<f64>) -> Array2<f64> {
    let m = a.nrows();
    Array2::from_shape_fn((m, m), |(i, j)| 0.5 * (a[[i, j]] - a[[j, i]]))
}

impl PoissonBivector {
    pub fn new<F>(n: usize, m: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> Array2<f64> + Send + Sync + 'static,
    {
        PoissonBivector {
            n,
            m,
            eval: Arc::new(move |x| antisymmetrize(&f(x))),
            partials: None,
        }
    }

    /// Attach analytic partials `dpi[a][b]/dx[i]` (antisymmetrized).
    pub fn with_partials<G>(mut self, g: G) -> Self
    where
        G: Fn(&[f64]) -> Array3<f64> + Send + Sync + 'static,
    {
        self.partials = Some(Arc::new(move |x| {
            let raw = g(x);
            let (m, _, n) = raw.dim();
            let mut out = Array3::zeros((m, m, n));
            for a in 0..m {
                for b in 0..m {
                    for i in 0..n {
                        out[[a, b, i]] = 0.5 * (raw[[a, b, i]] - raw[[b, a, i]]);
                    }
                }
            }
            out
        }));
        self
    }

    pub fn constant(n: usize, matrix: Array2<f64>) -> Self {
        let m = matrix.nrows();
        let mat = matrix.clone();
        PoissonBivector::new(n, m, move |_| mat.clone())
            .with_partials(move |_| Array3::zeros((m, m, n)))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eval(&self, x: &[f64]) -> Array2<f64> {
        (self.eval)(x)
    }

    pub fn partials(&self, x: &[f64]) -> Array3<f64> {
        if let Some(p) = &self.partials {
            return p(x);
        }
        let mut out = Array3::zeros((self.m, self.m, self.n));
        let mut xp = x.to_vec();
        for i in 0..self.n {
            let h = numeric::step(x[i], FD_FIELD);
            xp[i] = x[i] + h;
            let pp = (self.eval)(&xp);
            xp[i] = x[i] - h;
            let pm = (self.eval)(&xp);
            xp[i] = x[i];
            for a in 0..self.m {
                for b in 0..self.m {
                    out[[a, b, i]] = (pp[[a, b]] - pm[[a, b]]) / (2.0 * h);
                }
            }
        }
        out
    }

    /// Lower bivector `pi_{ab}` with `pi[e][g] pi_{et} = delta[g][t]`
    /// (negated matrix inverse); errors when degenerate.
    pub fn lower(&self, x: &[f64]) -> Result<Array2<f64>> {
        let p = self.eval(x);
        let det = numeric::det(&p);
        if det.abs() < 1e-12 {
            return Err(Error::DegenerateBivector { det });
        }
        let inv = numeric::invert(&p).ok_or(Error::DegenerateBivector { det })?;
        Ok(-inv)
    }
}

/// Contravariant connection coefficients `Gamma[a][b][g](x)`.
#[derive(Clone)]
pub struct ContravariantConnection {
    m: usize,
    coeffs: XFn<Array3<f64>>,
}

impl ContravariantConnection {
    pub fn from_fn<F>(m: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> Array3<f64> + Send + Sync + 'static,
    {
        ContravariantConnection {
            m,
            coeffs: Arc::new(f),
        }
    }

    pub fn zero(m: usize) -> Self {
        ContravariantConnection::from_fn(m, move |_| Array3::zeros((m, m, m)))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn coeffs(&self, x: &[f64]) -> Array3<f64> {
        (self.coeffs)(x)
    }
}

/// Residual of the local self-bracket condition at `x`, indexed
/// `[a][e][d]`: the cyclic sum over `(a, e, d)` of
/// `pi[a][b] sigma[i][b] dpi[e][d]/dx[i] + pi[a][b] pi[g][d] L[e][b][g]`.
/// Zero iff the bivector is Poisson at `x`.
pub fn poisson_jacobi_residual(
    a: &LieAlgebroid,
    pi: &PoissonBivector,
    x: &[f64],
) -> Result<Array3<f64>> {
    if pi.m() != a.m() {
        return Err(Error::DimensionMismatch {
            context: "bivector rank vs algebroid fiber rank",
            expected: a.m(),
            got: pi.m(),
        });
    }
    let m = a.m();
    let n = a.n();
    let sigma = a.anchor.eval(x);
    let lsf = a.structure.eval(x);
    let p = pi.eval(x);
    let dp = pi.partials(x);
    // sigma-contracted derivative term: t1[a][e][d]
    //   = pi[a][b] sigma[i][b] dpi[e][d]/dx[i]
    let term = |aa: usize, e: usize, d: usize| -> f64 {
        let mut acc = 0.0;
        for b in 0..m {
            let mut sig_d = 0.0;
            for i in 0..n {
                sig_d += sigma[[i, b]] * dp[[e, d, i]];
            }
            acc += p[[aa, b]] * sig_d;
            for g in 0..m {
                acc += p[[aa, b]] * p[[g, d]] * lsf[[e, b, g]];
            }
        }
        acc
    };
    let mut out = Array3::zeros((m, m, m));
    for aa in 0..m {
        for e in 0..m {
            for d in 0..m {
                out[[aa, e, d]] = term(aa, e, d) + term(e, d, aa) + term(d, aa, e);
            }
        }
    }
    Ok(out)
}

/// The base contravariant connection `Gamma[a][b][g] = sigma[i][g]
/// dpi[a][b]/dx[i]`.
pub fn base_contravariant_connection(
    a: &LieAlgebroid,
    pi: &PoissonBivector,
) -> ContravariantConnection {
    let al = a.clone();
    let pv = pi.clone();
    ContravariantConnection::from_fn(a.m(), move |x| {
        let m = al.m();
        let n = al.n();
        let sigma = al.anchor.eval(x);
        let dp = pv.partials(x);
        Array3::from_shape_fn((m, m, m), |(aa, b, g)| {
            (0..n).map(|i| sigma[[i, g]] * dp[[aa, b, i]]).sum()
        })
    })
}

/// Contravariant derivative of the bivector, indexed `[b][g][a]`:
/// `pi[b][g]/^a = pi[a][e] sigma[i][e] dpi[b][g]/dx[i]
///               + Gamma[b][a][e] pi[e][g] + Gamma[g][a][e] pi[b][e]`.
pub fn contravariant_derivative(
    a: &LieAlgebroid,
    pi: &PoissonBivector,
    gamma: &ContravariantConnection,
    x: &[f64],
) -> Array3<f64> {
    let m = a.m();
    let n = a.n();
    let sigma = a.anchor.eval(x);
    let p = pi.eval(x);
    let dp = pi.partials(x);
    let c = gamma.coeffs(x);
    Array3::from_shape_fn((m, m, m), |(b, g, aa)| {
        let mut acc = 0.0;
        for e in 0..m {
            let mut sig_d = 0.0;
            for i in 0..n {
                sig_d += sigma[[i, e]] * dp[[b, g, i]];
            }
            acc += p[[aa, e]] * sig_d;
            acc += c[[b, aa, e]] * p[[e, g]] + c[[g, aa, e]] * p[[b, e]];
        }
        acc
    })
}

/// Correct a connection so the bivector becomes parallel:
/// `Gamma'[a][b][g] = Gamma[a][b][g] - 1/2 pi_{ge} (pi[a][e]/^b)`.
/// Requires a nondegenerate bivector.
pub fn poisson_correction(
    a: &LieAlgebroid,
    pi: &PoissonBivector,
    gamma: &ContravariantConnection,
) -> ContravariantConnection {
    let al = a.clone();
    let pv = pi.clone();
    let gm = gamma.clone();
    ContravariantConnection::from_fn(a.m(), move |x| {
        let m = al.m();
        let lower = pv
            .lower(x)
            .unwrap_or_else(|e| panic!("poisson correction at {x:?}: {e}"));
        let deriv = contravariant_derivative(&al, &pv, &gm, x);
        let c = gm.coeffs(x);
        Array3::from_shape_fn((m, m, m), |(aa, b, g)| {
            let mut v = c[[aa, b, g]];
            for e in 0..m {
                v -= 0.5 * lower[[g, e]] * deriv[[aa, e, b]];
            }
            v
        })
    })
}

/// Fallible single-point variant of [`poisson_correction`].
pub fn poisson_correction_at(
    a: &LieAlgebroid,
    pi: &PoissonBivector,
    gamma: &ContravariantConnection,
    x: &[f64],
) -> Result<Array3<f64>> {
    let m = a.m();
    let lower = pi.lower(x)?;
    let deriv = contravariant_derivative(a, pi, gamma, x);
    let c = gamma.coeffs(x);
    Ok(Array3::from_shape_fn((m, m, m), |(aa, b, g)| {
        let mut v = c[[aa, b, g]];
        for e in 0..m {
            v -= 0.5 * lower[[g, e]] * deriv[[aa, e, b]];
        }
        v
    }))
}

/// A contravariant geodesic path: base points and dual coordinates.
#[derive(Debug, Clone)]
pub struct DualPath {
    pub times: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    pub thetas: Vec<Vec<f64>>,
}

impl DualPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn endpoint(&self) -> (&[f64], &[f64]) {
        (
            self.xs.last().expect("nonempty path"),
            self.thetas.last().expect("nonempty path"),
        )
    }
}

/// Integrate the contravariant geodesic equations
/// `dx[i]/dt = sigma[i][g] pi[a][g] theta[a]`,
/// `dtheta[a]/dt = -Gamma[b][g][a] theta[b] theta[g]`.
pub fn poisson_geodesic_integrate(
    a: &LieAlgebroid,
    pi: &PoissonBivector,
    gamma: &ContravariantConnection,
    x0: &[f64],
    theta0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<DualPath> {
    if !(t_end > 0.0) || !(dt > 0.0) || dt > t_end {
        return Err(Error::Config(format!(
            "need 0 < dt <= t_end (got dt = {dt}, t_end = {t_end})"
        )));
    }
    let n = a.n();
    let m = a.m();
    let deriv = |z: &[f64]| -> Result<Vec<f64>> {
        let (x, th) = z.split_at(n);
        let sigma = a.anchor.eval(x);
        let p = pi.eval(x);
        let c = gamma.coeffs(x);
        let mut out = Vec::with_capacity(n + m);
        for i in 0..n {
            let mut acc = 0.0;
            for g in 0..m {
                for aa in 0..m {
                    acc += sigma[[i, g]] * p[[aa, g]] * th[aa];
                }
            }
            out.push(acc);
        }
        for aa in 0..m {
            let mut acc = 0.0;
            for b in 0..m {
                for g in 0..m {
                    acc -= c[[b, g, aa]] * th[b] * th[g];
                }
            }
            out.push(acc);
        }
        Ok(out)
    };
    let mut z0 = x0.to_vec();
    z0.extend_from_slice(theta0);
    match crate::flow::rk4_path(deriv, z0, t_end, dt) {
        Ok((times, raw)) => Ok(DualPath {
            times,
            xs: raw.iter().map(|v| v[..n].to_vec()).collect(),
            thetas: raw.iter().map(|v| v[n..].to_vec()).collect(),
        }),
        Err((t_last, cause, times, raw)) => {
            let energies = vec![f64::NAN; times.len()];
            let states = raw
                .iter()
                .map(|v| crate::flow::PhaseState::new(v[..n].to_vec(), v[n..].to_vec()))
                .collect();
            Err(Error::IntegrationDiverged {
                t_last,
                cause,
                partial: Box::new(crate::flow::Trajectory::from_raw(times, states, energies)),
            })
        }
    }
}
