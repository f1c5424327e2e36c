//! Lie algebroids in local coordinates: anchor and structure fields, the
//! structure-equation residuals that certify a candidate pair actually is a
//! Lie algebroid, and the pullback/anchor maps between base and fiber data.
//!
//! A Lie algebroid over a base region of `R^n` with fiber rank `m` is encoded
//! by the anchor components `sigma[i][alpha](x)` and the structure functions
//! `L[gamma][alpha][beta](x)` of the section bracket. The pair must satisfy
//! the Jacobi-type identity and the anchor/bracket compatibility; both are
//! exposed here as residual tensors that vanish exactly when the axioms hold.

use std::sync::Arc;

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};
use crate::numeric::{self, SampleBox, FD_FIELD};

type XFn<T> = Arc<dyn Fn(&[f64]) -> T + Send + Sync>;

/// Scalar function on the base with an optional analytic gradient.
#[derive(Clone)]
pub struct ScalarField {
    n: usize,
    eval: XFn<f64>,
    grad: Option<XFn<Vec<f64>>>,
}

impl ScalarField {
    pub fn new<F>(n: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        ScalarField {
            n,
            eval: Arc::new(f),
            grad: None,
        }
    }

    pub fn with_grad<G>(mut self, g: G) -> Self
    where
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        self.grad = Some(Arc::new(g));
        self
    }

    pub fn constant(n: usize, c: f64) -> Self {
        ScalarField::new(n, move |_| c).with_grad(move |x| vec![0.0; x.len()])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    /// Analytic gradient when supplied, central differences otherwise.
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match &self.grad {
            Some(g) => g(x),
            None => numeric::grad(|p| (self.eval)(p), x, FD_FIELD),
        }
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }
}

/// Anchor components `sigma[i][alpha](x)`, an `n x m` matrix field.
#[derive(Clone)]
pub struct AnchorField {
    n: usize,
    m: usize,
    eval: XFn<Array2<f64>>,
    partials: Option<XFn<Array3<f64>>>,
}

impl AnchorField {
    pub fn new<F>(n: usize, m: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> Array2<f64> + Send + Sync + 'static,
    {
        AnchorField {
            n,
            m,
            eval: Arc::new(f),
            partials: None,
        }
    }

    /// Attach analytic partials `d sigma[i][alpha] / d x[j]` as an
    /// `(n, m, n)` array.
    pub fn with_partials<G>(mut self, g: G) -> Self
    where
        G: Fn(&[f64]) -> Array3<f64> + Send + Sync + 'static,
    {
        self.partials = Some(Arc::new(g));
        self
    }

    pub fn constant(matrix: Array2<f64>) -> Self {
        let (n, m) = matrix.dim();
        let mat = matrix.clone();
        AnchorField::new(n, m, move |_| mat.clone())
            .with_partials(move |_| Array3::zeros((n, m, n)))
    }

    pub fn identity(n: usize) -> Self {
        AnchorField::constant(Array2::eye(n))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eval(&self, x: &[f64]) -> Array2<f64> {
        let s = (self.eval)(x);
        debug_assert_eq!(s.dim(), (self.n, self.m), "anchor shape");
        s
    }

    /// Derivatives `d sigma[i][alpha] / d x[j]`, analytic or by central
    /// differences with step `1e-6 * max(1, |x_j|)`.
    pub fn partials(&self, x: &[f64]) -> Array3<f64> {
        if let Some(p) = &self.partials {
            return p(x);
        }
        let mut out = Array3::zeros((self.n, self.m, self.n));
        let mut xp = x.to_vec();
        for j in 0..self.n {
            let h = numeric::step(x[j], FD_FIELD);
            xp[j] = x[j] + h;
            let sp = (self.eval)(&xp);
            xp[j] = x[j] - h;
            let sm = (self.eval)(&xp);
            xp[j] = x[j];
            for i in 0..self.n {
                for a in 0..self.m {
                    out[[i, a, j]] = (sp[[i, a]] - sm[[i, a]]) / (2.0 * h);
                }
            }
        }
        out
    }
}

/// Structure functions `L[gamma][alpha][beta](x)`, antisymmetrized over the
/// lower pair at construction so the bracket antisymmetry holds exactly.
#[derive(Clone)]
pub struct StructureField {
    m: usize,
    eval: XFn<Array3<f64>>,
    partials: Option<XFn<Array4<f64>>>,
}

fn antisymmetrize_lower(l: &Array3<f64>) -> Array3<f64> {
    let m = l.dim().0;
    let mut out = Array3::zeros((m, m, m));
    for g in 0..m {
        for a in 0..m {
            for b in 0..m {
                out[[g, a, b]] = 0.5 * (l[[g, a, b]] - l[[g, b, a]]);
            }
        }
    }
    out
}

impl StructureField {
    pub fn new<F>(m: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> Array3<f64> + Send + Sync + 'static,
    {
        StructureField {
            m,
            eval: Arc::new(move |x| antisymmetrize_lower(&f(x))),
            partials: None,
        }
    }

    /// Attach analytic partials `d L[gamma][alpha][beta] / d x[i]` as an
    /// `(m, m, m, n)` array; antisymmetrized like the values.
    pub fn with_partials<G>(mut self, g: G) -> Self
    where
        G: Fn(&[f64]) -> Array4<f64> + Send + Sync + 'static,
    {
        self.partials = Some(Arc::new(move |x| {
            let raw = g(x);
            let (m, _, _, n) = raw.dim();
            let mut out = Array4::zeros((m, m, m, n));
            for gg in 0..m {
                for a in 0..m {
                    for b in 0..m {
                        for i in 0..n {
                            out[[gg, a, b, i]] = 0.5 * (raw[[gg, a, b, i]] - raw[[gg, b, a, i]]);
                        }
                    }
                }
            }
            out
        }));
        self
    }

    /// Constant structure functions (zero derivatives).
    pub fn constant(n: usize, values: Array3<f64>) -> Self {
        let m = values.dim().0;
        let vals = values.clone();
        StructureField::new(m, move |_| vals.clone())
            .with_partials(move |_| Array4::zeros((m, m, m, n)))
    }

    pub fn zero(n: usize, m: usize) -> Self {
        StructureField::constant(n, Array3::zeros((m, m, m)))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eval(&self, x: &[f64]) -> Array3<f64> {
        (self.eval)(x)
    }

    pub fn partials(&self, x: &[f64], n: usize) -> Array4<f64> {
        if let Some(p) = &self.partials {
            return p(x);
        }
        let mut out = Array4::zeros((self.m, self.m, self.m, n));
        let mut xp = x.to_vec();
        for i in 0..n {
            let h = numeric::step(x[i], FD_FIELD);
            xp[i] = x[i] + h;
            let lp = (self.eval)(&xp);
            xp[i] = x[i] - h;
            let lm = (self.eval)(&xp);
            xp[i] = x[i];
            for g in 0..self.m {
                for a in 0..self.m {
                    for b in 0..self.m {
                        out[[g, a, b, i]] = (lp[[g, a, b]] - lm[[g, a, b]]) / (2.0 * h);
                    }
                }
            }
        }
        out
    }
}

/// Max-abs residuals of the two structure equations over the sample set.
#[derive(Debug, Clone, Copy)]
pub struct AxiomReport {
    pub max_jacobi: f64,
    pub max_anchor_compat: f64,
}

impl AxiomReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_jacobi <= tol && self.max_anchor_compat <= tol
    }
}

/// Tolerance used by [`LieAlgebroid::validate`] callers; the residuals of a
/// genuine algebroid are zero up to finite-difference noise.
pub const AXIOM_TOL: f64 = 1e-9;

/// A Lie algebroid in local coordinates.
#[derive(Clone)]
pub struct LieAlgebroid {
    pub anchor: AnchorField,
    pub structure: StructureField,
    pub validation_box: SampleBox,
}

impl std::fmt::Debug for LieAlgebroid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LieAlgebroid")
            .field("n", &self.n())
            .field("m", &self.m())
            .finish_non_exhaustive()
    }
}

impl LieAlgebroid {
    pub fn new(
        anchor: AnchorField,
        structure: StructureField,
        validation_box: SampleBox,
    ) -> Result<Self> {
        if anchor.m() != structure.m() {
            return Err(Error::DimensionMismatch {
                context: "anchor fiber rank vs structure fiber rank",
                expected: anchor.m(),
                got: structure.m(),
            });
        }
        if validation_box.dim() != anchor.n() {
            return Err(Error::DimensionMismatch {
                context: "validation box vs base dimension",
                expected: anchor.n(),
                got: validation_box.dim(),
            });
        }
        Ok(LieAlgebroid {
            anchor,
            structure,
            validation_box,
        })
    }

    pub fn n(&self) -> usize {
        self.anchor.n()
    }

    pub fn m(&self) -> usize {
        self.anchor.m()
    }

    /// Residual of the Jacobi-type structure equation at `x`, indexed
    /// `[alpha][beta][gamma][delta]`: the cyclic sum over `(alpha, beta,
    /// gamma)` of `sigma[i][.] dL[delta][.][.]/dx[i] + L[delta][.][eta]
    /// L[eta][.][.]`. Zero iff the identity holds at `x`.
    pub fn jacobi_residual(&self, x: &[f64]) -> Array4<f64> {
        let m = self.m();
        let n = self.n();
        let sigma = self.anchor.eval(x);
        let l = self.structure.eval(x);
        let dl = self.structure.partials(x, n);
        // sigma-contracted derivative: t1[rho][delta][sig][tau]
        //   = sigma[i][rho] * dL[delta][sig][tau]/dx[i]
        let mut t1 = Array4::zeros((m, m, m, m));
        for rho in 0..m {
            for d in 0..m {
                for s in 0..m {
                    for t in 0..m {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += sigma[[i, rho]] * dl[[d, s, t, i]];
                        }
                        t1[[rho, d, s, t]] = acc;
                    }
                }
            }
        }
        let term = |rho: usize, sig: usize, tau: usize, d: usize| -> f64 {
            let mut acc = t1[[rho, d, sig, tau]];
            for eta in 0..m {
                acc += l[[d, rho, eta]] * l[[eta, sig, tau]];
            }
            acc
        };
        let mut out = Array4::zeros((m, m, m, m));
        for a in 0..m {
            for b in 0..m {
                for g in 0..m {
                    for d in 0..m {
                        out[[a, b, g, d]] = term(a, b, g, d) + term(b, g, a, d) + term(g, a, b, d);
                    }
                }
            }
        }
        out
    }

    /// Residual of the anchor/bracket compatibility at `x`, indexed
    /// `[alpha][beta][i]`: `sigma[j][alpha] d sigma[i][beta]/dx[j] -
    /// sigma[j][beta] d sigma[i][alpha]/dx[j] - sigma[i][gamma]
    /// L[gamma][alpha][beta]`. Zero iff the anchor is a bracket homomorphism.
    pub fn anchor_compat_residual(&self, x: &[f64]) -> Array3<f64> {
        let m = self.m();
        let n = self.n();
        let sigma = self.anchor.eval(x);
        let dsigma = self.anchor.partials(x);
        let l = self.structure.eval(x);
        let mut out = Array3::zeros((m, m, n));
        for a in 0..m {
            for b in 0..m {
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc +=
                            sigma[[j, a]] * dsigma[[i, b, j]] - sigma[[j, b]] * dsigma[[i, a, j]];
                    }
                    for g in 0..m {
                        acc -= sigma[[i, g]] * l[[g, a, b]];
                    }
                    out[[a, b, i]] = acc;
                }
            }
        }
        out
    }

    /// Pull a base covector back to the fiber dual: `mu[alpha] =
    /// sigma[i][alpha] p[i]`.
    pub fn pullback_covector(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.n() {
            return Err(Error::DimensionMismatch {
                context: "pullback covector length",
                expected: self.n(),
                got: p.len(),
            });
        }
        let sigma = self.anchor.eval(x);
        Ok((0..self.m())
            .map(|a| (0..self.n()).map(|i| sigma[[i, a]] * p[i]).sum())
            .collect())
    }

    /// Push a fiber vector to a base velocity: `v[i] = sigma[i][alpha]
    /// y[alpha]`.
    pub fn anchor_apply(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.m() {
            return Err(Error::DimensionMismatch {
                context: "anchor fiber vector length",
                expected: self.m(),
                got: y.len(),
            });
        }
        let sigma = self.anchor.eval(x);
        Ok((0..self.n())
            .map(|i| (0..self.m()).map(|a| sigma[[i, a]] * y[a]).sum())
            .collect())
    }

    /// Max-abs structure-equation residuals over `count` seeded samples of
    /// the validation box.
    pub fn validate(&self, seed: u64, count: usize) -> AxiomReport {
        let mut max_jacobi = 0.0_f64;
        let mut max_anchor = 0.0_f64;
        for x in self.validation_box.sample(seed, count) {
            max_jacobi = max_jacobi.max(numeric::max_abs(&self.jacobi_residual(&x)));
            max_anchor = max_anchor.max(numeric::max_abs(&self.anchor_compat_residual(&x)));
        }
        AxiomReport {
            max_jacobi,
            max_anchor_compat: max_anchor,
        }
    }
}

/// Structure functions with a single independent constant entry
/// `L[gamma][alpha][beta] = v` (and its antisymmetric partner).
pub fn single_bracket(
    n: usize,
    m: usize,
    gamma: usize,
    alpha: usize,
    beta: usize,
    v: f64,
) -> StructureField {
    let mut l = Array3::zeros((m, m, m));
    l[[gamma, alpha, beta]] = v;
    l[[gamma, beta, alpha]] = -v;
    StructureField::constant(n, l)
}
