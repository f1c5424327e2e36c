//! Fiber costs (quadratic, Randers, Kropina) and their Legendre-dual
//! Hamiltonians with analytic momentum gradients.
//!
//! The Randers cost is `F(u) = sqrt(g(u,u)) + <b, u>` with `|b|_g < 1`; its
//! dual is the squared form
//!
//! ```text
//! H(mu) = 1/2 (sqrt(gt(mu,mu)) - <bt, mu>)^2,
//! gt = g^-1 / (1 - |b|^2) + b (x) b / (1 - |b|^2)^2,   bt = b / (1 - |b|^2).
//! ```
//!
//! The degenerate (Kropina-type) cost uses the same literal formula for `F`
//! but with `|b|_g = 1`, where the Randers dual blows up; its dual is
//!
//! ```text
//! H(mu) = 1/2 (g^-1(mu,mu) / (2 <b, mu>))^2,
//! ```
//!
//! singular on the hyperplane `<b, mu> = 0`. Both duals are positively
//! 2-homogeneous in `mu`, which is what makes the arclength normalization to
//! the 1/2 level of `H` possible.

use std::sync::Arc;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::numeric::{self, FD_FIELD, FD_HESSIAN};

type XFn<T> = Arc<dyn Fn(&[f64]) -> T + Send + Sync>;
type XYFn<T> = Arc<dyn Fn(&[f64], &[f64]) -> T + Send + Sync>;

/// Relative threshold below which the Kropina dual treats `<b, mu>` as zero.
pub const KROPINA_SINGULAR_TOL: f64 = 1e-12;
/// Strong-convexity margin for Randers data: require `1 - |b|_g^2` above it.
pub const RANDERS_MARGIN: f64 = 1e-12;

/// Symmetric matrix field `g[alpha][beta](x)` with optional analytic
/// partials `dg[alpha][beta]/dx[i]` (shape `(m, m, n)`).
#[derive(Clone)]
pub struct MetricField {
    n: usize,
    m: usize,
    eval: XFn<Array2<f64>>,
    partials: Option<XFn<Array3<f64>>>,
}

impl MetricField {
    pub fn new<F>(n: usize, m: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> Array2<f64> + Send + Sync + 'static,
    {
        MetricField {
            n,
            m,
            eval: Arc::new(f),
            partials: None,
        }
    }

    pub fn with_partials<G>(mut self, g: G) -> Self
    where
        G: Fn(&[f64]) -> Array3<f64> + Send + Sync + 'static,
    {
        self.partials = Some(Arc::new(g));
        self
    }

    pub fn constant(n: usize, matrix: Array2<f64>) -> Self {
        let m = matrix.nrows();
        let mat = matrix.clone();
        MetricField::new(n, m, move |_| mat.clone())
            .with_partials(move |_| Array3::zeros((m, m, n)))
    }

    pub fn identity(n: usize, m: usize) -> Self {
        MetricField::constant(n, Array2::eye(m))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eval(&self, x: &[f64]) -> Array2<f64> {
        (self.eval)(x)
    }

    pub fn has_partials(&self) -> bool {
        self.partials.is_some()
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
            let gp = (self.eval)(&xp);
            xp[i] = x[i] - h;
            let gm = (self.eval)(&xp);
            xp[i] = x[i];
            for a in 0..self.m {
                for b in 0..self.m {
                    out[[a, b, i]] = (gp[[a, b]] - gm[[a, b]]) / (2.0 * h);
                }
            }
        }
        out
    }

    /// Pointwise matrix inverse, partials by `d(g^-1) = -g^-1 (dg) g^-1`.
    /// Singular points yield non-finite entries, which downstream
    /// regularity checks reject.
    pub fn inverse(&self) -> MetricField {
        let nan = |m: usize| Array2::from_elem((m, m), f64::NAN);
        let base = self.clone();
        let mut out = MetricField::new(self.n, self.m, {
            let base = base.clone();
            let m = self.m;
            move |x| numeric::invert(&base.eval(x)).unwrap_or_else(|| nan(m))
        });
        if self.partials.is_some() {
            let (m, n) = (self.m, self.n);
            out.partials = Some(Arc::new(move |x| {
                let inv = numeric::invert(&base.eval(x)).unwrap_or_else(|| nan(m));
                let dg = base.partials(x);
                let mut dout = Array3::zeros((m, m, n));
                for i in 0..n {
                    let slice = Array2::from_shape_fn((m, m), |(a, b)| dg[[a, b, i]]);
                    let d = inv.dot(&slice).dot(&inv);
                    for a in 0..m {
                        for b in 0..m {
                            dout[[a, b, i]] = -d[[a, b]];
                        }
                    }
                }
                dout
            }));
        }
        out
    }
}

/// Covector field `b[alpha](x)` with optional partials `(m, n)`.
#[derive(Clone)]
pub struct CovectorField {
    n: usize,
    m: usize,
    eval: XFn<Vec<f64>>,
    partials: Option<XFn<Array2<f64>>>,
}

impl CovectorField {
    pub fn new<F>(n: usize, m: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        CovectorField {
            n,
            m,
            eval: Arc::new(f),
            partials: None,
        }
    }

    pub fn with_partials<G>(mut self, g: G) -> Self
    where
        G: Fn(&[f64]) -> Array2<f64> + Send + Sync + 'static,
    {
        self.partials = Some(Arc::new(g));
        self
    }

    pub fn constant(n: usize, v: Vec<f64>) -> Self {
        let m = v.len();
        let vv = v.clone();
        CovectorField::new(n, m, move |_| vv.clone()).with_partials(move |_| Array2::zeros((m, n)))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.eval)(x)
    }

    pub fn has_partials(&self) -> bool {
        self.partials.is_some()
    }

    pub fn partials(&self, x: &[f64]) -> Array2<f64> {
        if let Some(p) = &self.partials {
            return p(x);
        }
        let mut out = Array2::zeros((self.m, self.n));
        let mut xp = x.to_vec();
        for i in 0..self.n {
            let h = numeric::step(x[i], FD_FIELD);
            xp[i] = x[i] + h;
            let bp = (self.eval)(&xp);
            xp[i] = x[i] - h;
            let bm = (self.eval)(&xp);
            xp[i] = x[i];
            for a in 0..self.m {
                out[[a, i]] = (bp[a] - bm[a]) / (2.0 * h);
            }
        }
        out
    }
}

/// Quadratic cost `F = sqrt(g(u, u))`.
#[derive(Clone)]
pub struct QuadraticCost {
    pub g: MetricField,
}

/// Randers cost `F = sqrt(g(u, u)) + <b, u>` with `|b|_g < 1`.
#[derive(Clone)]
pub struct RandersCost {
    pub g: MetricField,
    pub b: CovectorField,
}

impl RandersCost {
    /// `|b|_g = sqrt(g_{ij} b^i b^j)` at `x`.
    pub fn norm_b(&self, x: &[f64]) -> f64 {
        numeric::quad_form(&self.g.eval(x), &self.b.eval(x))
            .max(0.0)
            .sqrt()
    }
}

/// Degenerate cost `F = sqrt(g(u, u)) + <b, u>` with `|b|_g = 1`; `F`
/// vanishes along the ray `u = -g^-1 b`.
#[derive(Clone)]
pub struct KropinaCost {
    pub g: MetricField,
    pub b: CovectorField,
}

/// One of the three supported Minkowski-norm cost families.
#[derive(Clone)]
pub enum Cost {
    Quadratic(QuadraticCost),
    Randers(RandersCost),
    Kropina(KropinaCost),
}

impl Cost {
    pub fn quadratic(g: MetricField) -> Self {
        Cost::Quadratic(QuadraticCost { g })
    }

    pub fn randers(g: MetricField, b: CovectorField) -> Self {
        Cost::Randers(RandersCost { g, b })
    }

    pub fn kropina(g: MetricField, b: CovectorField) -> Self {
        Cost::Kropina(KropinaCost { g, b })
    }

    pub fn fiber_dim(&self) -> usize {
        match self {
            Cost::Quadratic(c) => c.g.m(),
            Cost::Randers(c) => c.g.m(),
            Cost::Kropina(c) => c.g.m(),
        }
    }

    fn metric(&self) -> &MetricField {
        match self {
            Cost::Quadratic(c) => &c.g,
            Cost::Randers(c) => &c.g,
            Cost::Kropina(c) => &c.g,
        }
    }

    fn drift(&self) -> Option<&CovectorField> {
        match self {
            Cost::Quadratic(_) => None,
            Cost::Randers(c) => Some(&c.b),
            Cost::Kropina(c) => Some(&c.b),
        }
    }

    /// The cost value `F(x, u)`; positively 1-homogeneous in `u`.
    pub fn cost_value(&self, x: &[f64], u: &[f64]) -> f64 {
        let root = numeric::quad_form(&self.metric().eval(x), u)
            .max(0.0)
            .sqrt();
        match self.drift() {
            None => root,
            Some(b) => root + numeric::dot(&b.eval(x), u),
        }
    }

    /// The running Lagrangian `L = F^2 / 2`; positively 2-homogeneous.
    pub fn lagrangian(&self, x: &[f64], u: &[f64]) -> f64 {
        let f = self.cost_value(x, u);
        0.5 * f * f
    }

    /// Vertical Hessian `g(x, u) = 1/2 d^2 F^2 / du du`: the fiber metric
    /// itself for quadratic costs, central second differences otherwise.
    pub fn vertical_hessian(&self, x: &[f64], u: &[f64]) -> Result<Array2<f64>> {
        match self {
            Cost::Quadratic(c) => Ok(c.g.eval(x)),
            _ => {
                if u.iter().all(|&c| c == 0.0) {
                    return Err(Error::ZeroFiberVector);
                }
                let h = numeric::hessian(|v| self.lagrangian(x, v), u, FD_HESSIAN);
                // enforce exact symmetry of the FD result
                let m = u.len();
                Ok(Array2::from_shape_fn((m, m), |(a, b)| {
                    0.5 * (h[[a, b]] + h[[b, a]])
                }))
            }
        }
    }

    /// Closed-form vertical Hessian of `L = F^2/2` for the
    /// `sqrt(g(u,u)) + <b,u>` cost families:
    /// `w (x) w + F (g/r - (g u)(g u)^T / r^3)` with `w = g u / r + b`.
    /// Used where analytic fiber curvature is wanted (connection
    /// diagnostics); the public `vertical_hessian` keeps its
    /// finite-difference contract for the non-quadratic families.
    pub(crate) fn analytic_vertical_hessian(&self, x: &[f64], u: &[f64]) -> Result<Array2<f64>> {
        match self {
            Cost::Quadratic(c) => Ok(c.g.eval(x)),
            Cost::Randers(RandersCost { g, b }) | Cost::Kropina(KropinaCost { g, b }) => {
                let gv = g.eval(x);
                let r = numeric::quad_form(&gv, u).max(0.0).sqrt();
                if r == 0.0 {
                    return Err(Error::ZeroFiberVector);
                }
                let bv = b.eval(x);
                let f = r + numeric::dot(&bv, u);
                let gu = numeric::matvec(&gv, u);
                let m = u.len();
                let w: Vec<f64> = (0..m).map(|a| gu[a] / r + bv[a]).collect();
                Ok(Array2::from_shape_fn((m, m), |(a, c)| {
                    w[a] * w[c] + f * (gv[[a, c]] / r - gu[a] * gu[c] / (r * r * r))
                }))
            }
        }
    }

    /// Fiber Legendre map `mu = dL/du`. Analytic for quadratic and Randers,
    /// central differences for the degenerate cost.
    pub fn fiber_legendre(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        match self {
            Cost::Quadratic(c) => Ok(numeric::matvec(&c.g.eval(x), u)),
            Cost::Randers(c) => {
                let g = c.g.eval(x);
                let root = numeric::quad_form(&g, u).max(0.0).sqrt();
                if root == 0.0 {
                    return Err(Error::ZeroFiberVector);
                }
                let b = c.b.eval(x);
                let f = root + numeric::dot(&b, u);
                let gu = numeric::matvec(&g, u);
                Ok((0..u.len()).map(|a| f * (gu[a] / root + b[a])).collect())
            }
            Cost::Kropina(_) => {
                if u.iter().all(|&c| c == 0.0) {
                    return Err(Error::ZeroFiberVector);
                }
                Ok(numeric::grad(|v| self.lagrangian(x, v), u, FD_FIELD))
            }
        }
    }

    /// Legendre-dual Hamiltonian of `L = F^2 / 2`.
    pub fn dual(&self, n: usize) -> Result<DualHamiltonian> {
        match self {
            Cost::Quadratic(c) => Ok(quadratic_dual(n, &c.g)),
            Cost::Randers(c) => Ok(randers_dual(n, &c.g, &c.b)),
            Cost::Kropina(c) => Ok(kropina_dual_from_inverse(n, &c.g.inverse(), c.b.clone())),
        }
    }
}

/// A 2-homogeneous Hamiltonian on the dual fiber with gradient and
/// mu-Hessian access. Evaluation is fallible: the Kropina dual is singular
/// on a hyperplane and Randers data can lose strong convexity.
#[derive(Clone)]
pub struct DualHamiltonian {
    n: usize,
    m: usize,
    eval: XYFn<Result<f64>>,
    grad_mu: XYFn<Result<Vec<f64>>>,
    grad_x: XYFn<Result<Vec<f64>>>,
    hess_mu: XYFn<Result<Array2<f64>>>,
    analytic_grad_x: bool,
}

impl DualHamiltonian {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eval(&self, x: &[f64], mu: &[f64]) -> Result<f64> {
        (self.eval)(x, mu)
    }

    /// Analytic `dH/dmu`.
    pub fn grad_mu(&self, x: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
        (self.grad_mu)(x, mu)
    }

    /// `dH/dx`: analytic when the underlying fields carry partials,
    /// central differences otherwise.
    pub fn grad_x(&self, x: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
        (self.grad_x)(x, mu)
    }

    /// Analytic mu-Hessian `d^2 H / dmu dmu` (the dual metric `g^{ab}`).
    pub fn hess_mu(&self, x: &[f64], mu: &[f64]) -> Result<Array2<f64>> {
        (self.hess_mu)(x, mu)
    }

    pub fn grad_x_is_analytic(&self) -> bool {
        self.analytic_grad_x
    }

    pub fn homogeneity_degree(&self) -> u32 {
        2
    }

    /// Embed a Hamiltonian on the first `k` dual coordinates into a larger
    /// fiber of rank `total_m`; the remaining coordinates are cyclic.
    pub fn lift(self, total_m: usize) -> DualHamiltonian {
        let k = self.m;
        assert!(k <= total_m);
        let inner = Arc::new(self);
        let h = inner.clone();
        let eval: XYFn<Result<f64>> = Arc::new(move |x, mu| h.eval(x, &mu[..k]));
        let h = inner.clone();
        let grad_mu: XYFn<Result<Vec<f64>>> = Arc::new(move |x, mu| {
            let mut g = h.grad_mu(x, &mu[..k])?;
            g.resize(total_m, 0.0);
            Ok(g)
        });
        let h = inner.clone();
        let grad_x: XYFn<Result<Vec<f64>>> = Arc::new(move |x, mu| h.grad_x(x, &mu[..k]));
        let h = inner.clone();
        let hess_mu: XYFn<Result<Array2<f64>>> = Arc::new(move |x, mu| {
            let small = h.hess_mu(x, &mu[..k])?;
            let mut big = Array2::zeros((total_m, total_m));
            for a in 0..k {
                for b in 0..k {
                    big[[a, b]] = small[[a, b]];
                }
            }
            Ok(big)
        });
        DualHamiltonian {
            n: inner.n,
            m: total_m,
            eval,
            grad_mu,
            grad_x,
            hess_mu,
            analytic_grad_x: inner.analytic_grad_x,
        }
    }
}

/// `H = 1/2 g^{ab}(x) mu_a mu_b` from the inverse metric directly.
pub fn quadratic_dual_from_inverse(n: usize, g_inv: &MetricField) -> DualHamiltonian {
    let m = g_inv.m();
    let gi = g_inv.clone();
    let eval: XYFn<Result<f64>> =
        Arc::new(move |x, mu| Ok(0.5 * numeric::quad_form(&gi.eval(x), mu)));
    let gi = g_inv.clone();
    let grad_mu: XYFn<Result<Vec<f64>>> =
        Arc::new(move |x, mu| Ok(numeric::matvec(&gi.eval(x), mu)));
    let gi = g_inv.clone();
    let hess_mu: XYFn<Result<Array2<f64>>> = Arc::new(move |x, _mu| Ok(gi.eval(x)));
    let analytic = g_inv.has_partials();
    let gi = g_inv.clone();
    let ev = eval.clone();
    let grad_x: XYFn<Result<Vec<f64>>> = Arc::new(move |x, mu| {
        if analytic {
            let dg = gi.partials(x);
            Ok((0..gi.n())
                .map(|i| {
                    let slice = Array2::from_shape_fn((m, m), |(a, b)| dg[[a, b, i]]);
                    0.5 * numeric::quad_form(&slice, mu)
                })
                .collect())
        } else {
            numeric::try_grad(|p| ev(p, mu), x, FD_FIELD)
        }
    });
    DualHamiltonian {
        n,
        m,
        eval,
        grad_mu,
        grad_x,
        hess_mu,
        analytic_grad_x: analytic,
    }
}

/// `H = 1/2 g^{ab}(x) mu_a mu_b` with `g^{ab}` the inverse of `g_{ab}`.
pub fn quadratic_dual(n: usize, g: &MetricField) -> DualHamiltonian {
    quadratic_dual_from_inverse(n, &g.inverse())
}

struct RandersParts {
    g_tilde: Array2<f64>,
    b_tilde: Vec<f64>,
}

/// Shared Randers-dual data assembled from the inverse metric, the drift
/// covector, and `|b|_g^2` (supplied separately so bases where `g` itself is
/// singular but `g^-1` is smooth still work).
#[derive(Clone)]
struct RandersDualData {
    g_inv: MetricField,
    b: CovectorField,
    b2: crate::algebroid::ScalarField,
}

impl RandersDualData {
    fn parts(&self, x: &[f64]) -> Result<RandersParts> {
        let b2 = self.b2.eval(x);
        let s = 1.0 - b2;
        if s <= RANDERS_MARGIN {
            return Err(Error::InvalidRanders {
                norm_b: b2.max(0.0).sqrt(),
            });
        }
        let gi = self.g_inv.eval(x);
        let b = self.b.eval(x);
        let m = b.len();
        let g_tilde =
            Array2::from_shape_fn((m, m), |(i, j)| gi[[i, j]] / s + b[i] * b[j] / (s * s));
        let b_tilde = b.iter().map(|&bi| bi / s).collect();
        Ok(RandersParts { g_tilde, b_tilde })
    }

    /// `d g_tilde / dx[i]` and `d b_tilde / dx[i]` by the chain rule.
    fn parts_partials(&self, x: &[f64]) -> Result<(Array3<f64>, Array2<f64>)> {
        let b2 = self.b2.eval(x);
        let s = 1.0 - b2;
        if s <= RANDERS_MARGIN {
            return Err(Error::InvalidRanders {
                norm_b: b2.max(0.0).sqrt(),
            });
        }
        let gi = self.g_inv.eval(x);
        let dgi = self.g_inv.partials(x);
        let b = self.b.eval(x);
        let db = self.b.partials(x);
        let db2 = self.b2.grad(x);
        let m = b.len();
        let n = x.len();
        let mut dgt = Array3::zeros((m, m, n));
        let mut dbt = Array2::zeros((m, n));
        for i in 0..n {
            for a in 0..m {
                dbt[[a, i]] = db[[a, i]] / s + b[a] * db2[i] / (s * s);
                for c in 0..m {
                    dgt[[a, c, i]] = dgi[[a, c, i]] / s
                        + gi[[a, c]] * db2[i] / (s * s)
                        + (db[[a, i]] * b[c] + b[a] * db[[c, i]]) / (s * s)
                        + 2.0 * b[a] * b[c] * db2[i] / (s * s * s);
                }
            }
        }
        Ok((dgt, dbt))
    }
}

fn randers_dual_core(
    n: usize,
    m: usize,
    data: RandersDualData,
    analytic_x: bool,
) -> DualHamiltonian {
    let d = data.clone();
    let eval: XYFn<Result<f64>> = Arc::new(move |x, mu| {
        let p = d.parts(x)?;
        let a = numeric::quad_form(&p.g_tilde, mu).max(0.0).sqrt();
        let b = numeric::dot(&p.b_tilde, mu);
        Ok(0.5 * (a - b) * (a - b))
    });
    // dH = (A - B)(dA - dB), the factored form that cancels stably as
    // A - B -> 0 along the zero-momentum direction.
    let d = data.clone();
    let grad_mu: XYFn<Result<Vec<f64>>> = Arc::new(move |x, mu| {
        let p = d.parts(x)?;
        let gm = numeric::matvec(&p.g_tilde, mu);
        let a = numeric::dot(&gm, mu).max(0.0).sqrt();
        if a == 0.0 {
            return Ok(vec![0.0; mu.len()]);
        }
        let diff = a - numeric::dot(&p.b_tilde, mu);
        Ok((0..mu.len())
            .map(|k| diff * (gm[k] / a - p.b_tilde[k]))
            .collect())
    });
    let d = data.clone();
    let hess_mu: XYFn<Result<Array2<f64>>> = Arc::new(move |x, mu| {
        let p = d.parts(x)?;
        let gm = numeric::matvec(&p.g_tilde, mu);
        let a = numeric::dot(&gm, mu).max(0.0).sqrt();
        if a < 1e-12 {
            return Err(Error::Regularity(
                "Randers dual has no mu-Hessian at mu = 0".into(),
            ));
        }
        let diff = a - numeric::dot(&p.b_tilde, mu);
        let mm = mu.len();
        let w: Vec<f64> = (0..mm).map(|k| gm[k] / a - p.b_tilde[k]).collect();
        Ok(Array2::from_shape_fn((mm, mm), |(i, j)| {
            w[i] * w[j] + diff * (p.g_tilde[[i, j]] / a - gm[i] * gm[j] / (a * a * a))
        }))
    });
    let d = data.clone();
    let ev = eval.clone();
    let grad_x: XYFn<Result<Vec<f64>>> = Arc::new(move |x, mu| {
        if analytic_x {
            let p = d.parts(x)?;
            let (dgt, dbt) = d.parts_partials(x)?;
            let a = numeric::quad_form(&p.g_tilde, mu).max(0.0).sqrt();
            if a == 0.0 {
                return Ok(vec![0.0; x.len()]);
            }
            let diff = a - numeric::dot(&p.b_tilde, mu);
            let m = mu.len();
            Ok((0..x.len())
                .map(|i| {
                    let slice = Array2::from_shape_fn((m, m), |(r, c)| dgt[[r, c, i]]);
                    let da = 0.5 * numeric::quad_form(&slice, mu) / a;
                    let db: f64 = (0..m).map(|k| dbt[[k, i]] * mu[k]).sum();
                    diff * (da - db)
                })
                .collect())
        } else {
            numeric::try_grad(|p| ev(p, mu), x, FD_FIELD)
        }
    });
    DualHamiltonian {
        n,
        m,
        eval,
        grad_mu,
        grad_x,
        hess_mu,
        analytic_grad_x: analytic_x,
    }
}

/// Randers dual from the fiber data `(g, b)`.
pub fn randers_dual(n: usize, g: &MetricField, b: &CovectorField) -> DualHamiltonian {
    let m = g.m();
    let g_inv = g.inverse();
    let gg = g.clone();
    let bb = b.clone();
    let mut b2 = crate::algebroid::ScalarField::new(n, move |x| {
        numeric::quad_form(&gg.eval(x), &bb.eval(x))
    });
    let analytic = g.has_partials() && b.has_partials();
    if analytic {
        let gg = g.clone();
        let bb = b.clone();
        b2 = b2.with_grad(move |x| {
            let gv = gg.eval(x);
            let dg = gg.partials(x);
            let bv = bb.eval(x);
            let db = bb.partials(x);
            let gb = numeric::matvec(&gv, &bv);
            let m = bv.len();
            (0..x.len())
                .map(|i| {
                    let mut acc = 0.0;
                    for a in 0..m {
                        for c in 0..m {
                            acc += dg[[a, c, i]] * bv[a] * bv[c];
                        }
                        acc += 2.0 * gb[a] * db[[a, i]];
                    }
                    acc
                })
                .collect()
        });
    }
    randers_dual_core(
        n,
        m,
        RandersDualData {
            g_inv,
            b: b.clone(),
            b2,
        },
        analytic,
    )
}

/// Randers dual on a base where only `g^-1` is globally smooth; `|b|_g^2`
/// must be supplied.
pub fn randers_dual_from_inverse(
    n: usize,
    g_inv: MetricField,
    b: CovectorField,
    b_norm_sq: crate::algebroid::ScalarField,
) -> DualHamiltonian {
    let m = g_inv.m();
    let analytic = g_inv.has_partials() && b.has_partials() && b_norm_sq.has_grad();
    randers_dual_core(
        n,
        m,
        RandersDualData {
            g_inv,
            b,
            b2: b_norm_sq,
        },
        analytic,
    )
}

/// Kropina-type dual `H = 1/2 (g^{ab} mu_a mu_b / (2 <b, mu>))^2`, singular
/// on `<b, mu> = 0`.
pub fn kropina_dual_from_inverse(
    n: usize,
    g_inv: &MetricField,
    b: CovectorField,
) -> DualHamiltonian {
    let m = g_inv.m();
    let check = move |d: f64, mu: &[f64]| -> Result<()> {
        let norm = numeric::dot(mu, mu).sqrt();
        if d.abs() < KROPINA_SINGULAR_TOL * norm {
            return Err(Error::SingularMomentum { pairing: d });
        }
        Ok(())
    };
    let gi = g_inv.clone();
    let bb = b.clone();
    let eval: XYFn<Result<f64>> = Arc::new(move |x, mu| {
        if mu.iter().all(|&c| c == 0.0) {
            return Ok(0.0);
        }
        let d = numeric::dot(&bb.eval(x), mu);
        check(d, mu)?;
        let q = numeric::quad_form(&gi.eval(x), mu);
        let r = q / (2.0 * d);
        Ok(0.5 * r * r)
    });
    let gi = g_inv.clone();
    let bb = b.clone();
    let grad_mu: XYFn<Result<Vec<f64>>> = Arc::new(move |x, mu| {
        if mu.iter().all(|&c| c == 0.0) {
            return Ok(vec![0.0; mu.len()]);
        }
        let bv = bb.eval(x);
        let d = numeric::dot(&bv, mu);
        check(d, mu)?;
        let gm = numeric::matvec(&gi.eval(x), mu);
        let q = numeric::dot(&gm, mu);
        Ok((0..mu.len())
            .map(|k| q / (2.0 * d * d) * gm[k] - q * q / (4.0 * d * d * d) * bv[k])
            .collect())
    });
    let gi = g_inv.clone();
    let bb = b.clone();
    let hess_mu: XYFn<Result<Array2<f64>>> = Arc::new(move |x, mu| {
        let bv = bb.eval(x);
        let d = numeric::dot(&bv, mu);
        check(d, mu)?;
        let giv = gi.eval(x);
        let gm = numeric::matvec(&giv, mu);
        let q = numeric::dot(&gm, mu);
        let mm = mu.len();
        Ok(Array2::from_shape_fn((mm, mm), |(i, j)| {
            q / (2.0 * d * d) * giv[[i, j]] + gm[i] * gm[j] / (d * d)
                - q / (d * d * d) * (gm[i] * bv[j] + bv[i] * gm[j])
                + 3.0 * q * q / (4.0 * d * d * d * d) * bv[i] * bv[j]
        }))
    });
    let analytic = g_inv.has_partials() && b.has_partials();
    let gi = g_inv.clone();
    let bb = b.clone();
    let ev = eval.clone();
    let grad_x: XYFn<Result<Vec<f64>>> = Arc::new(move |x, mu| {
        if analytic {
            if mu.iter().all(|&c| c == 0.0) {
                return Ok(vec![0.0; x.len()]);
            }
            let bv = bb.eval(x);
            let d = numeric::dot(&bv, mu);
            check(d, mu)?;
            let q = numeric::quad_form(&gi.eval(x), mu);
            let dgi = gi.partials(x);
            let db = bb.partials(x);
            let r = q / (2.0 * d);
            let mm = mu.len();
            Ok((0..x.len())
                .map(|i| {
                    let slice = Array2::from_shape_fn((mm, mm), |(a, c)| dgi[[a, c, i]]);
                    let dq = numeric::quad_form(&slice, mu);
                    let dd: f64 = (0..mm).map(|k| db[[k, i]] * mu[k]).sum();
                    // dH = r dr, dr = dq/(2 d) - q dd / (2 d^2)
                    r * (dq / (2.0 * d) - q * dd / (2.0 * d * d))
                })
                .collect())
        } else {
            numeric::try_grad(|p| ev(p, mu), x, FD_FIELD)
        }
    });
    DualHamiltonian {
        n,
        m,
        eval,
        grad_mu,
        grad_x,
        hess_mu,
        analytic_grad_x: analytic,
    }
}

/// Build a dual Hamiltonian directly from closures (used by scenario code
/// and tests that need a hand-written `H`).
pub fn dual_from_closures<E, GM>(n: usize, m: usize, eval: E, grad_mu: GM) -> DualHamiltonian
where
    E: Fn(&[f64], &[f64]) -> Result<f64> + Send + Sync + 'static,
    GM: Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
{
    let eval: XYFn<Result<f64>> = Arc::new(eval);
    let grad_mu: XYFn<Result<Vec<f64>>> = Arc::new(grad_mu);
    let ev = eval.clone();
    let grad_x: XYFn<Result<Vec<f64>>> =
        Arc::new(move |x, mu| numeric::try_grad(|p| ev(p, mu), x, FD_FIELD));
    let gm = grad_mu.clone();
    let hess_mu: XYFn<Result<Array2<f64>>> = Arc::new(move |x, mu| {
        let mm = mu.len();
        let mut out = Array2::zeros((mm, mm));
        let mut mup = mu.to_vec();
        for j in 0..mm {
            let h = numeric::step(mu[j], crate::numeric::FD_DERIVED);
            mup[j] = mu[j] + h;
            let gp = gm(x, &mup)?;
            mup[j] = mu[j] - h;
            let gmn = gm(x, &mup)?;
            mup[j] = mu[j];
            for i in 0..mm {
                out[[i, j]] = (gp[i] - gmn[i]) / (2.0 * h);
            }
        }
        // symmetrize
        let sym = Array2::from_shape_fn((mm, mm), |(i, j)| 0.5 * (out[[i, j]] + out[[j, i]]));
        Ok(sym)
    });
    DualHamiltonian {
        n,
        m,
        eval,
        grad_mu,
        grad_x,
        hess_mu,
        analytic_grad_x: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::array;

    fn flat_randers(eps: f64) -> Cost {
        Cost::randers(
            MetricField::identity(2, 2),
            CovectorField::constant(2, vec![eps, 0.0]),
        )
    }

    fn flat_kropina() -> Cost {
        Cost::kropina(
            MetricField::identity(2, 2),
            CovectorField::constant(2, vec![1.0, 0.0]),
        )
    }

    #[test]
    fn randers_cost_value() {
        let c = flat_randers(0.25);
        let x = [0.0, 0.0];
        assert_abs_diff_eq!(c.cost_value(&x, &[1.0, 0.0]), 1.25, epsilon = 1e-15);
        assert_eq!(c.cost_value(&x, &[0.0, 0.0]), 0.0);
        // positive 1-homogeneity
        let u = [0.4, -1.3];
        assert_relative_eq!(
            c.cost_value(&x, &[2.0 * u[0], 2.0 * u[1]]),
            2.0 * c.cost_value(&x, &u),
            max_relative = 1e-14
        );
    }

    #[test]
    fn kropina_cost_vanishes_on_degenerate_ray() {
        let c = flat_kropina();
        assert_abs_diff_eq!(
            c.cost_value(&[0.0, 0.0], &[-1.0, 0.0]),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn lagrangian_values() {
        let x = [0.0, 0.0];
        assert_abs_diff_eq!(
            flat_randers(0.0).lagrangian(&x, &[3.0, 4.0]),
            12.5,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            flat_randers(0.5).lagrangian(&x, &[1.0, 0.0]),
            1.125,
            epsilon = 1e-12
        );
        assert_eq!(flat_randers(0.5).lagrangian(&x, &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn randers_dual_closed_form() {
        // H(mu) = 1/2 (sqrt(mu1^2/(1-e^2)^2 + mu2^2/(1-e^2)) - e mu1/(1-e^2))^2
        let eps = 0.5;
        let h = flat_randers(eps).dual(2).unwrap();
        let x = [0.0, 0.0];
        let v = h.eval(&x, &[1.0, 0.0]).unwrap();
        assert_relative_eq!(v, 2.0 / 9.0, max_relative = 1e-13);
        // Riemannian limit
        let h0 = flat_randers(0.0).dual(2).unwrap();
        assert_abs_diff_eq!(h0.eval(&x, &[1.0, 0.0]).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn randers_limit_matches_quadratic() {
        let hq = Cost::quadratic(MetricField::identity(2, 2))
            .dual(2)
            .unwrap();
        let hr = flat_randers(0.0).dual(2).unwrap();
        let x = [0.0, 0.0];
        for mu in [[0.3, -1.2], [2.0, 0.7], [-0.4, -0.9]] {
            assert_abs_diff_eq!(
                hq.eval(&x, &mu).unwrap(),
                hr.eval(&x, &mu).unwrap(),
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn quadratic_dual_values() {
        let h = Cost::quadratic(MetricField::constant(2, array![[4.0, 0.0], [0.0, 1.0]]))
            .dual(2)
            .unwrap();
        assert_abs_diff_eq!(
            h.eval(&[0.0, 0.0], &[2.0, 0.0]).unwrap(),
            0.5,
            epsilon = 1e-14
        );

        // Grushin fiber metric g = diag(1, 1/x^2): H(mu) with x = 2, mu = (0,1)
        let g = MetricField::new(2, 2, |x: &[f64]| {
            array![[1.0, 0.0], [0.0, 1.0 / (x[0] * x[0])]]
        });
        let h = Cost::quadratic(g).dual(2).unwrap();
        assert_relative_eq!(
            h.eval(&[2.0, 0.0], &[0.0, 1.0]).unwrap(),
            2.0,
            max_relative = 1e-13
        );
    }

    #[test]
    fn kropina_dual_values_and_singularity() {
        // g^-1 = diag(1, x^2), b = (1, 0): H = ((p1^2 + x^2 p2^2) / (2 p1))^2 / 2
        let g_inv = MetricField::new(2, 2, |x: &[f64]| array![[1.0, 0.0], [0.0, x[0] * x[0]]])
            .with_partials(|x: &[f64]| {
                let mut d = Array3::zeros((2, 2, 2));
                d[[1, 1, 0]] = 2.0 * x[0];
                d
            });
        let h = kropina_dual_from_inverse(2, &g_inv, CovectorField::constant(2, vec![1.0, 0.0]));
        assert_relative_eq!(
            h.eval(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            0.5,
            max_relative = 1e-13
        );
        assert_relative_eq!(
            h.eval(&[0.0, 0.0], &[2.0, 0.0]).unwrap(),
            0.5,
            max_relative = 1e-13
        );
        assert!(matches!(
            h.eval(&[1.0, 0.0], &[0.0, 1.0]),
            Err(Error::SingularMomentum { .. })
        ));
    }

    #[test]
    fn invalid_randers_is_rejected() {
        let h = flat_randers(1.0 + 1e-13).dual(2).unwrap();
        assert!(matches!(
            h.eval(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::InvalidRanders { .. })
        ));
    }

    #[test]
    fn two_homogeneity() {
        let x = [0.3, -0.8];
        let duals = [
            flat_randers(0.37).dual(2).unwrap(),
            flat_kropina().dual(2).unwrap(),
            Cost::quadratic(MetricField::identity(2, 2))
                .dual(2)
                .unwrap(),
        ];
        for h in &duals {
            for mu in [[0.9, 0.2], [1.4, -0.6]] {
                let base = h.eval(&x, &mu).unwrap();
                for s in [0.5, 2.0, 10.0] {
                    let scaled = h.eval(&x, &[s * mu[0], s * mu[1]]).unwrap();
                    assert_relative_eq!(scaled, s * s * base, max_relative = 1e-10);
                }
            }
        }
    }

    #[test]
    fn grad_mu_matches_finite_differences() {
        let x = [0.4, 1.1];
        let duals = [
            flat_randers(0.37).dual(2).unwrap(),
            flat_kropina().dual(2).unwrap(),
        ];
        for h in &duals {
            for mu in [[0.9, 0.2], [1.4, -0.6], [2.2, 1.9]] {
                let g = h.grad_mu(&x, &mu).unwrap();
                let fd = numeric::try_grad::<Error, _>(|m| h.eval(&x, m), &mu, FD_FIELD).unwrap();
                for k in 0..2 {
                    assert_relative_eq!(g[k], fd[k], max_relative = 1e-6, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn hess_mu_matches_finite_differences() {
        let h = flat_randers(0.37).dual(2).unwrap();
        let x = [0.0, 0.0];
        let mu = [1.3, -0.4];
        let hm = h.hess_mu(&x, &mu).unwrap();
        let fd = numeric::hessian(|m| h.eval(&x, m).unwrap(), &mu, FD_HESSIAN);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(hm[[i, j]], fd[[i, j]], max_relative = 1e-5, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn fiber_legendre_and_duality() {
        let x = [0.0, 0.0];
        // quadratic identity: mu = u
        let q = Cost::quadratic(MetricField::identity(2, 2));
        assert_eq!(q.fiber_legendre(&x, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);

        // Randers: mu(1,0) = (2.25, 0) at eps = 0.5, with Fenchel equality
        let c = flat_randers(0.5);
        let u = [1.0, 0.0];
        let mu = c.fiber_legendre(&x, &u).unwrap();
        assert_abs_diff_eq!(mu[0], 2.25, epsilon = 1e-12);
        assert_abs_diff_eq!(mu[1], 0.0, epsilon = 1e-12);
        let h = c.dual(2).unwrap();
        let resid = numeric::dot(&mu, &u) - c.lagrangian(&x, &u) - h.eval(&x, &mu).unwrap();
        assert_abs_diff_eq!(resid, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn fiber_legendre_is_one_homogeneous() {
        let x = [0.0, 0.0];
        for c in [flat_randers(0.3), flat_kropina()] {
            let u = [0.7, 0.4];
            let mu = c.fiber_legendre(&x, &u).unwrap();
            let mu2 = c.fiber_legendre(&x, &[3.0 * u[0], 3.0 * u[1]]).unwrap();
            for k in 0..2 {
                assert_relative_eq!(mu2[k], 3.0 * mu[k], max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn vertical_hessian_cases() {
        let x = [0.0, 0.0];
        // quadratic: returns g exactly
        let g = array![[2.0, 0.3], [0.3, 1.0]];
        let q = Cost::quadratic(MetricField::constant(2, g.clone()));
        assert_eq!(q.vertical_hessian(&x, &[0.0, 0.0]).unwrap(), g);

        // Randers eps = 0: recovers g to FD accuracy
        let r0 = flat_randers(0.0);
        let h = r0.vertical_hessian(&x, &[0.6, -0.9]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(h[[i, j]], want, epsilon = 1e-8);
            }
        }

        // Randers eps = 0.5 at u = (1,0): positive definite, matches FD of L
        let r = flat_randers(0.5);
        let h = r.vertical_hessian(&x, &[1.0, 0.0]).unwrap();
        assert!(h[[0, 0]] > 0.0 && numeric::det(&h) > 0.0);
        let fd = numeric::hessian(|v| r.lagrangian(&x, v), &[1.0, 0.0], FD_HESSIAN);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(h[[i, j]], 0.5 * (fd[[i, j]] + fd[[j, i]]), epsilon = 1e-12);
            }
        }

        assert!(matches!(
            r.vertical_hessian(&x, &[0.0, 0.0]),
            Err(Error::ZeroFiberVector)
        ));
    }

    #[test]
    fn kropina_hess_mu_matches_finite_differences() {
        let h = flat_kropina().dual(2).unwrap();
        let x = [0.0, 0.0];
        for mu in [[1.3, -0.4], [0.8, 0.9], [2.0, 0.0]] {
            let hm = h.hess_mu(&x, &mu).unwrap();
            let fd = numeric::hessian(|m| h.eval(&x, m).unwrap(), &mu, FD_HESSIAN);
            for i in 0..2 {
                for j in 0..2 {
                    assert_relative_eq!(hm[[i, j]], fd[[i, j]], max_relative = 1e-5, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn randers_dual_with_varying_metric_and_drift() {
        // x-dependent g and b with analytic partials: the chain-rule
        // x-gradient (through g^-1, b and |b|_g^2) must match differences.
        let g = MetricField::new(2, 2, |x: &[f64]| {
            array![[1.0 + 0.3 * x[0] * x[0], 0.1 * x[1]], [0.1 * x[1], 2.0]]
        })
        .with_partials(|x: &[f64]| {
            let mut d = Array3::zeros((2, 2, 2));
            d[[0, 0, 0]] = 0.6 * x[0];
            d[[0, 1, 1]] = 0.1;
            d[[1, 0, 1]] = 0.1;
            d
        });
        let b = CovectorField::new(2, 2, |x: &[f64]| vec![0.3 + 0.1 * x[1], 0.05 * x[0]])
            .with_partials(|_x: &[f64]| {
                let mut d = Array2::zeros((2, 2));
                d[[0, 1]] = 0.1;
                d[[1, 0]] = 0.05;
                d
            });
        let h = randers_dual(2, &g, &b);
        assert!(h.grad_x_is_analytic());
        let x = [0.7, -0.5];
        for mu in [[1.1, 0.4], [-0.6, 1.3]] {
            let gx = h.grad_x(&x, &mu).unwrap();
            let fd = numeric::try_grad::<Error, _>(|p| h.eval(p, &mu), &x, FD_FIELD).unwrap();
            for k in 0..2 {
                assert_relative_eq!(gx[k], fd[k], max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn randers_dual_from_inverse_grushin_3d() {
        // g^-1 = diag(1, x^2, x^2), b = (eps, 0, 0), |b|_g^2 = eps^2
        let eps = 0.3;
        let g_inv = MetricField::new(3, 3, |x: &[f64]| {
            array![
                [1.0, 0.0, 0.0],
                [0.0, x[0] * x[0], 0.0],
                [0.0, 0.0, x[0] * x[0]]
            ]
        })
        .with_partials(|x: &[f64]| {
            let mut d = Array3::zeros((3, 3, 3));
            d[[1, 1, 0]] = 2.0 * x[0];
            d[[2, 2, 0]] = 2.0 * x[0];
            d
        });
        let h = randers_dual_from_inverse(
            3,
            g_inv,
            CovectorField::constant(3, vec![eps, 0.0, 0.0]),
            crate::algebroid::ScalarField::constant(3, eps * eps),
        );
        // closed form at x = 0: H = p1^2 / (2 (1+eps)^2)
        let p = [1.0 + eps, 0.4, -0.2];
        let want = p[0] * p[0] / (2.0 * (1.0 + eps) * (1.0 + eps));
        assert_relative_eq!(
            h.eval(&[0.0, 0.0, 0.0], &p).unwrap(),
            want,
            max_relative = 1e-12
        );
        assert!(h.grad_x_is_analytic());
        // analytic x-gradient against finite differences at a generic point
        let x = [0.8, -0.3, 0.5];
        let gx = h.grad_x(&x, &p).unwrap();
        let fd = numeric::try_grad::<Error, _>(|q| h.eval(q, &p), &x, FD_FIELD).unwrap();
        for k in 0..3 {
            assert_relative_eq!(gx[k], fd[k], max_relative = 1e-6, epsilon = 1e-9);
        }
    }
}
