//! Semisprays, nonlinear connections and their diagnostic tensors on a Lie
//! algebroid, in local coordinates.
//!
//! A regular Lagrangian `L(x, y)` determines the canonical semispray
//!
//! ```text
//! S[e] = g^{eb} (sigma[i][b] dL/dx[i]
//!                - sigma[i][a] d2L/dx[i]dy[b] y[a]
//!                - L[t][b][a] y[a] dL/dy[t]),
//! ```
//!
//! with `g` the vertical Hessian of `L`, and every semispray induces a
//! torsion-free nonlinear connection `N[b][a] = 1/2 (-dS[b]/dy[a] +
//! y[e] L[b][a][e])`. The functions here evaluate the curvature, torsion,
//! tension, metric-compatibility residual, Jacobi endomorphism and local
//! Helmholtz residuals of that data, plus the symmetric connection and
//! curvature canonically attached to a regular Hamiltonian on the dual side.
//!
//! Derivatives of derived quantities (semispray and connection coefficients,
//! dual metrics) use central differences with the coarser `FD_DERIVED` step;
//! derivatives of user-supplied fields use `FD_FIELD`.

use std::sync::Arc;

use ndarray::{Array2, Array3};

use crate::algebroid::LieAlgebroid;
use crate::costs::{Cost, DualHamiltonian, MetricField};
use crate::error::{Error, Result};
use crate::numeric::{self, FD_DERIVED, FD_FIELD, FD_HESSIAN};

type XYFn<T> = Arc<dyn Fn(&[f64], &[f64]) -> T + Send + Sync>;

/// Determinant threshold below which vertical Hessians are treated as
/// singular and a regularity error is raised.
pub const REGULARITY_TOL: f64 = 1e-10;

/// A Lagrangian on the total space with optional analytic derivatives;
/// anything missing falls back to central differences.
#[derive(Clone)]
pub struct LagrangianField {
    n: usize,
    m: usize,
    eval: XYFn<f64>,
    grad_x: Option<XYFn<Vec<f64>>>,
    grad_y: Option<XYFn<Vec<f64>>>,
    cross_xy: Option<XYFn<Array2<f64>>>,
    hess_yy: Option<XYFn<Array2<f64>>>,
}

impl LagrangianField {
    pub fn from_fn<F>(n: usize, m: usize, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        LagrangianField {
            n,
            m,
            eval: Arc::new(f),
            grad_x: None,
            grad_y: None,
            cross_xy: None,
            hess_yy: None,
        }
    }

    /// Quadratic Lagrangian `L = 1/2 g_{ab}(x) y^a y^b` with every
    /// derivative analytic (the metric's x-partials are used when present).
    pub fn quadratic(n: usize, g: MetricField) -> Self {
        let m = g.m();
        let gg = g.clone();
        let eval: XYFn<f64> = Arc::new(move |x, y| 0.5 * numeric::quad_form(&gg.eval(x), y));
        let gg = g.clone();
        let grad_x: XYFn<Vec<f64>> = Arc::new(move |x, y| {
            let dg = gg.partials(x);
            (0..x.len())
                .map(|i| {
                    let slice = Array2::from_shape_fn((y.len(), y.len()), |(a, b)| dg[[a, b, i]]);
                    0.5 * numeric::quad_form(&slice, y)
                })
                .collect()
        });
        let gg = g.clone();
        let grad_y: XYFn<Vec<f64>> = Arc::new(move |x, y| numeric::matvec(&gg.eval(x), y));
        let gg = g.clone();
        let cross_xy: XYFn<Array2<f64>> = Arc::new(move |x, y| {
            let dg = gg.partials(x);
            Array2::from_shape_fn((x.len(), y.len()), |(i, a)| {
                (0..y.len()).map(|b| dg[[a, b, i]] * y[b]).sum()
            })
        });
        let gg = g.clone();
        let hess_yy: XYFn<Array2<f64>> = Arc::new(move |x, _y| gg.eval(x));
        LagrangianField {
            n,
            m,
            eval,
            grad_x: Some(grad_x),
            grad_y: Some(grad_y),
            cross_xy: Some(cross_xy),
            hess_yy: Some(hess_yy),
        }
    }

    /// Lagrangian `L = F^2 / 2` of a fiber cost; the fiber gradient and
    /// Hessian use the cost's analytic paths where it has them.
    pub fn from_cost(n: usize, cost: Cost) -> Self {
        let m = cost.fiber_dim();
        let c = cost.clone();
        let eval: XYFn<f64> = Arc::new(move |x, y| c.lagrangian(x, y));
        let c = cost.clone();
        let grad_y: XYFn<Vec<f64>> = Arc::new(move |x, y| {
            c.fiber_legendre(x, y)
                .unwrap_or_else(|_| numeric::grad(|v| c.lagrangian(x, v), y, FD_FIELD))
        });
        let c = cost.clone();
        let hess_yy: XYFn<Array2<f64>> = Arc::new(move |x, y| {
            c.analytic_vertical_hessian(x, y)
                .unwrap_or_else(|_| numeric::hessian(|v| c.lagrangian(x, v), y, FD_HESSIAN))
        });
        LagrangianField {
            n,
            m,
            eval,
            grad_x: None,
            grad_y: Some(grad_y),
            cross_xy: None,
            hess_yy: Some(hess_yy),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    fn has_analytic_second_derivatives(&self) -> bool {
        self.cross_xy.is_some() && self.hess_yy.is_some() && self.grad_x.is_some()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.eval)(x, y)
    }

    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match &self.grad_x {
            Some(f) => f(x, y),
            None => numeric::grad(|p| (self.eval)(p, y), x, FD_FIELD),
        }
    }

    pub fn grad_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match &self.grad_y {
            Some(f) => f(x, y),
            None => numeric::grad(|v| (self.eval)(x, v), y, FD_FIELD),
        }
    }

    /// `d^2 L / dx[i] dy[a]` as an `(n, m)` array; the fallback
    /// differentiates the fiber gradient in `x`.
    pub fn cross_xy(&self, x: &[f64], y: &[f64]) -> Array2<f64> {
        if let Some(f) = &self.cross_xy {
            return f(x, y);
        }
        let mut out = Array2::zeros((self.n, self.m));
        let mut xp = x.to_vec();
        for i in 0..self.n {
            let h = numeric::step(x[i], FD_DERIVED);
            xp[i] = x[i] + h;
            let gp = self.grad_y(&xp, y);
            xp[i] = x[i] - h;
            let gm = self.grad_y(&xp, y);
            xp[i] = x[i];
            for a in 0..self.m {
                out[[i, a]] = (gp[a] - gm[a]) / (2.0 * h);
            }
        }
        out
    }

    /// Vertical Hessian `g_{ab}(x, y)`.
    pub fn vertical_metric(&self, x: &[f64], y: &[f64]) -> Array2<f64> {
        match &self.hess_yy {
            Some(f) => f(x, y),
            None => numeric::hessian(|v| (self.eval)(x, v), y, FD_HESSIAN),
        }
    }

    /// Inverse vertical Hessian, or a regularity error when degenerate.
    pub fn inverse_vertical_metric(&self, x: &[f64], y: &[f64]) -> Result<Array2<f64>> {
        let g = self.vertical_metric(x, y);
        let det = numeric::det(&g);
        if det.abs() < REGULARITY_TOL {
            return Err(Error::Regularity(format!(
                "vertical Hessian is singular (|det| = {:.3e})",
                det.abs()
            )));
        }
        numeric::invert(&g).ok_or(Error::SingularMatrix {
            context: "vertical Hessian",
            det,
        })
    }
}

/// Second-order coefficients `S[a](x, y)` with optional analytic
/// derivatives.
#[derive(Clone)]
pub struct Semispray {
    n: usize,
    m: usize,
    coeffs: XYFn<Result<Vec<f64>>>,
    jac_y: Option<XYFn<Result<Array2<f64>>>>,
    grad_x: Option<XYFn<Result<Array2<f64>>>>,
}

impl Semispray {
    pub fn from_fn<F>(n: usize, m: usize, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
    {
        Semispray {
            n,
            m,
            coeffs: Arc::new(f),
            jac_y: None,
            grad_x: None,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn coeffs(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        (self.coeffs)(x, y)
    }

    /// `dS[b]/dy[a]` as `(m, m)` indexed `[b][a]`.
    pub fn jac_y(&self, x: &[f64], y: &[f64]) -> Result<Array2<f64>> {
        if let Some(f) = &self.jac_y {
            return f(x, y);
        }
        let mut out = Array2::zeros((self.m, self.m));
        let mut yp = y.to_vec();
        for a in 0..self.m {
            let h = numeric::step(y[a], FD_DERIVED);
            yp[a] = y[a] + h;
            let sp = (self.coeffs)(x, &yp)?;
            yp[a] = y[a] - h;
            let sm = (self.coeffs)(x, &yp)?;
            yp[a] = y[a];
            for b in 0..self.m {
                out[[b, a]] = (sp[b] - sm[b]) / (2.0 * h);
            }
        }
        Ok(out)
    }

    /// `dS[b]/dx[i]` as `(m, n)` indexed `[b][i]`.
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Array2<f64>> {
        if let Some(f) = &self.grad_x {
            return f(x, y);
        }
        let mut out = Array2::zeros((self.m, self.n));
        let mut xp = x.to_vec();
        for i in 0..self.n {
            let h = numeric::step(x[i], FD_DERIVED);
            xp[i] = x[i] + h;
            let sp = (self.coeffs)(&xp, y)?;
            xp[i] = x[i] - h;
            let sm = (self.coeffs)(&xp, y)?;
            xp[i] = x[i];
            for b in 0..self.m {
                out[[b, i]] = (sp[b] - sm[b]) / (2.0 * h);
            }
        }
        Ok(out)
    }

    /// Max-abs residual of 2-homogeneity `2 S[g] - y[b] dS[g]/dy[b]`;
    /// small iff the semispray is a spray at `(x, y)`.
    pub fn spray_residual(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let s = self.coeffs(x, y)?;
        let j = self.jac_y(x, y)?;
        let mut worst = 0.0_f64;
        for g in 0..self.m {
            let contracted: f64 = (0..self.m).map(|b| j[[g, b]] * y[b]).sum();
            worst = worst.max((2.0 * s[g] - contracted).abs());
        }
        Ok(worst)
    }
}

fn canonical_inner(
    a: &LieAlgebroid,
    l: &LagrangianField,
    x: &[f64],
    y: &[f64],
) -> Result<Vec<f64>> {
    let m = a.m();
    let n = a.n();
    let sigma = a.anchor.eval(x);
    let lsf = a.structure.eval(x);
    let dl_dx = l.grad_x(x, y);
    let dl_dy = l.grad_y(x, y);
    let cross = l.cross_xy(x, y);
    let v = a.anchor_apply(x, y)?;
    let mut inner = vec![0.0; m];
    for b in 0..m {
        let mut acc = 0.0;
        for i in 0..n {
            acc += sigma[[i, b]] * dl_dx[i] - v[i] * cross[[i, b]];
        }
        for t in 0..m {
            for al in 0..m {
                acc -= lsf[[t, b, al]] * y[al] * dl_dy[t];
            }
        }
        inner[b] = acc;
    }
    Ok(inner)
}

/// Canonical semispray of a regular Lagrangian. For the quadratic
/// constructor the y-Jacobian of the coefficients is assembled analytically;
/// otherwise it falls back to differences of the coefficients.
pub fn canonical_semispray(a: &LieAlgebroid, l: &LagrangianField) -> Semispray {
    let m = a.m();
    let n = a.n();
    let al = a.clone();
    let lf = l.clone();
    let coeffs: XYFn<Result<Vec<f64>>> = Arc::new(move |x, y| {
        let ginv = lf.inverse_vertical_metric(x, y)?;
        let inner = canonical_inner(&al, &lf, x, y)?;
        Ok(numeric::matvec(&ginv, &inner))
    });
    // Analytic y-Jacobian for the quadratic path (g depends on x only):
    //   d inner[b] / dy[d] = sigma[i][b] (dg_i y)[d] - sigma[i][d] (dg_i y)[b]
    //                        - v[i] dg_i[b][d]
    //                        - L[t][b][d] (g y)[t] - L[t][b][a] y[a] g[t][d]
    // where dg_i[a][d] is recovered from cross evaluations at unit fiber
    // vectors (cross[i][a] at y = e_d equals dg_i[a][d] for quadratic L).
    let jac_y: Option<XYFn<Result<Array2<f64>>>> = if l.has_analytic_second_derivatives() {
        let al = a.clone();
        let lf = l.clone();
        Some(Arc::new(move |x: &[f64], y: &[f64]| {
            let mm = al.m();
            let nn = al.n();
            let g = lf.vertical_metric(x, y);
            let ginv = lf.inverse_vertical_metric(x, y)?;
            let sigma = al.anchor.eval(x);
            let lsf = al.structure.eval(x);
            let v = al.anchor_apply(x, y)?;
            let mut dg = vec![Array2::<f64>::zeros((mm, mm)); nn];
            let mut unit = vec![0.0; mm];
            for d in 0..mm {
                unit[d] = 1.0;
                let c = lf.cross_xy(x, &unit);
                for i in 0..nn {
                    for b in 0..mm {
                        dg[i][[b, d]] = c[[i, b]];
                    }
                }
                unit[d] = 0.0;
            }
            let gy = numeric::matvec(&g, y);
            let mut dinner = Array2::zeros((mm, mm));
            for b in 0..mm {
                for d in 0..mm {
                    let mut val = 0.0;
                    for i in 0..nn {
                        let dgi_y_d: f64 = (0..mm).map(|c| dg[i][[d, c]] * y[c]).sum();
                        let dgi_y_b: f64 = (0..mm).map(|c| dg[i][[b, c]] * y[c]).sum();
                        val += sigma[[i, b]] * dgi_y_d
                            - sigma[[i, d]] * dgi_y_b
                            - v[i] * dg[i][[b, d]];
                    }
                    for t in 0..mm {
                        val -= lsf[[t, b, d]] * gy[t];
                        for alph in 0..mm {
                            val -= lsf[[t, b, alph]] * y[alph] * g[[t, d]];
                        }
                    }
                    dinner[[b, d]] = val;
                }
            }
            Ok(ginv.dot(&dinner))
        }))
    } else {
        None
    };
    Semispray {
        n,
        m,
        coeffs,
        jac_y,
        grad_x: None,
    }
}

/// Nonlinear (Ehresmann) connection coefficients `N[b][a](x, y)`.
#[derive(Clone)]
pub struct NonlinearConnection {
    n: usize,
    m: usize,
    coeffs: XYFn<Result<Array2<f64>>>,
}

impl NonlinearConnection {
    pub fn from_fn<F>(n: usize, m: usize, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> Result<Array2<f64>> + Send + Sync + 'static,
    {
        NonlinearConnection {
            n,
            m,
            coeffs: Arc::new(f),
        }
    }

    pub fn zero(n: usize, m: usize) -> Self {
        NonlinearConnection::from_fn(n, m, move |_, _| Ok(Array2::zeros((m, m))))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn coeffs(&self, x: &[f64], y: &[f64]) -> Result<Array2<f64>> {
        (self.coeffs)(x, y)
    }

    /// `dN[b][a]/dx[i]` as `(m, m, n)`.
    pub fn d_dx(&self, x: &[f64], y: &[f64]) -> Result<Array3<f64>> {
        let mut out = Array3::zeros((self.m, self.m, self.n));
        let mut xp = x.to_vec();
        for i in 0..self.n {
            let h = numeric::step(x[i], FD_DERIVED);
            xp[i] = x[i] + h;
            let np = (self.coeffs)(&xp, y)?;
            xp[i] = x[i] - h;
            let nm = (self.coeffs)(&xp, y)?;
            xp[i] = x[i];
            for b in 0..self.m {
                for a in 0..self.m {
                    out[[b, a, i]] = (np[[b, a]] - nm[[b, a]]) / (2.0 * h);
                }
            }
        }
        Ok(out)
    }

    /// `dN[b][a]/dy[e]` as `(m, m, m)`.
    pub fn d_dy(&self, x: &[f64], y: &[f64]) -> Result<Array3<f64>> {
        let mut out = Array3::zeros((self.m, self.m, self.m));
        let mut yp = y.to_vec();
        for e in 0..self.m {
            let h = numeric::step(y[e], FD_DERIVED);
            yp[e] = y[e] + h;
            let np = (self.coeffs)(x, &yp)?;
            yp[e] = y[e] - h;
            let nm = (self.coeffs)(x, &yp)?;
            yp[e] = y[e];
            for b in 0..self.m {
                for a in 0..self.m {
                    out[[b, a, e]] = (np[[b, a]] - nm[[b, a]]) / (2.0 * h);
                }
            }
        }
        Ok(out)
    }
}

/// The connection induced by a semispray:
/// `N[b][a] = 1/2 (-dS[b]/dy[a] + y[e] L[b][a][e])`.
pub fn connection_from_semispray(a: &LieAlgebroid, s: &Semispray) -> NonlinearConnection {
    let al = a.clone();
    let ss = s.clone();
    NonlinearConnection::from_fn(a.n(), a.m(), move |x, y| {
        let j = ss.jac_y(x, y)?;
        let lsf = al.structure.eval(x);
        let m = al.m();
        Ok(Array2::from_shape_fn((m, m), |(b, aa)| {
            let le: f64 = (0..m).map(|e| y[e] * lsf[[b, aa, e]]).sum();
            0.5 * (-j[[b, aa]] + le)
        }))
    })
}

/// The semispray associated to a connection, `S[b] = -N[b][a] y[a]`.
pub fn associated_semispray(a: &LieAlgebroid, nc: &NonlinearConnection) -> Semispray {
    let m = a.m();
    let nc_coeffs = nc.clone();
    let mut s = Semispray::from_fn(a.n(), m, move |x, y| {
        let n = nc_coeffs.coeffs(x, y)?;
        Ok((0..m)
            .map(|b| -(0..m).map(|aa| n[[b, aa]] * y[aa]).sum::<f64>())
            .collect())
    });
    let nc_jac = nc.clone();
    s.jac_y = Some(Arc::new(move |x: &[f64], y: &[f64]| {
        let n = nc_jac.coeffs(x, y)?;
        let dn = nc_jac.d_dy(x, y)?;
        Ok(Array2::from_shape_fn((m, m), |(b, aa)| {
            let mut v = -n[[b, aa]];
            for e in 0..m {
                v -= dn[[b, e, aa]] * y[e];
            }
            v
        }))
    }));
    s
}

/// Curvature tensor `R[g][a][b]` of a nonlinear connection:
///
/// ```text
/// sigma[i][b] dN[g][a]/dx[i] - sigma[i][a] dN[g][b]/dx[i]
///   - N[e][b] dN[g][a]/dy[e] + N[e][a] dN[g][b]/dy[e]
///   + L[e][a][b] N[g][e].
/// ```
pub fn curvature(
    a: &LieAlgebroid,
    nc: &NonlinearConnection,
    x: &[f64],
    y: &[f64],
) -> Result<Array3<f64>> {
    let m = a.m();
    let n = a.n();
    let sigma = a.anchor.eval(x);
    let lsf = a.structure.eval(x);
    let nv = nc.coeffs(x, y)?;
    let dnx = nc.d_dx(x, y)?;
    let dny = nc.d_dy(x, y)?;
    let mut out = Array3::zeros((m, m, m));
    for g in 0..m {
        for aa in 0..m {
            for b in 0..m {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += sigma[[i, b]] * dnx[[g, aa, i]] - sigma[[i, aa]] * dnx[[g, b, i]];
                }
                for e in 0..m {
                    acc += -nv[[e, b]] * dny[[g, aa, e]] + nv[[e, aa]] * dny[[g, b, e]];
                    acc += lsf[[e, aa, b]] * nv[[g, e]];
                }
                out[[g, aa, b]] = acc;
            }
        }
    }
    Ok(out)
}

/// Torsion tensor `t[g][a][b] = dN[g][a]/dy[b] - dN[g][b]/dy[a] -
/// L[g][a][b]`; vanishes for every semispray-induced connection.
pub fn torsion(
    a: &LieAlgebroid,
    nc: &NonlinearConnection,
    x: &[f64],
    y: &[f64],
) -> Result<Array3<f64>> {
    let m = a.m();
    let lsf = a.structure.eval(x);
    let dny = nc.d_dy(x, y)?;
    let mut out = Array3::zeros((m, m, m));
    for g in 0..m {
        for aa in 0..m {
            for b in 0..m {
                out[[g, aa, b]] = dny[[g, aa, b]] - dny[[g, b, aa]] - lsf[[g, aa, b]];
            }
        }
    }
    Ok(out)
}

/// Tension `N[b][a] - y[g] dN[b][a]/dy[g]`; zero iff the connection is
/// 1-homogeneous in `y`.
pub fn tension(
    a: &LieAlgebroid,
    nc: &NonlinearConnection,
    x: &[f64],
    y: &[f64],
) -> Result<Array2<f64>> {
    let m = a.m();
    let nv = nc.coeffs(x, y)?;
    let dny = nc.d_dy(x, y)?;
    Ok(Array2::from_shape_fn((m, m), |(b, aa)| {
        let mut v = nv[[b, aa]];
        for g in 0..m {
            v -= y[g] * dny[[b, aa, g]];
        }
        v
    }))
}

/// A path in the total space: base points and fiber velocities per sample.
#[derive(Debug, Clone)]
pub struct FiberPath {
    pub times: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
}

impl FiberPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn endpoint(&self) -> (&[f64], &[f64]) {
        (
            self.xs.last().expect("nonempty path"),
            self.ys.last().expect("nonempty path"),
        )
    }
}

fn run_total_space_ode<F>(
    n: usize,
    deriv: F,
    x0: &[f64],
    y0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<FiberPath>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(t_end > 0.0) || !(dt > 0.0) || dt > t_end {
        return Err(Error::Config(format!(
            "need 0 < dt <= t_end (got dt = {dt}, t_end = {t_end})"
        )));
    }
    let mut z0 = x0.to_vec();
    z0.extend_from_slice(y0);
    match crate::flow::rk4_path(deriv, z0, t_end, dt) {
        Ok((times, raw)) => Ok(FiberPath {
            times,
            xs: raw.iter().map(|v| v[..n].to_vec()).collect(),
            ys: raw.iter().map(|v| v[n..].to_vec()).collect(),
        }),
        Err((t_last, cause, times, raw)) => {
            let energies = vec![f64::NAN; times.len()];
            let states = raw
                .iter()
                .map(|v| crate::flow::PhaseState::new(v[..n].to_vec(), v[n..].to_vec()))
                .collect();
            let partial = crate::flow::Trajectory::from_raw(times, states, energies);
            Err(Error::IntegrationDiverged {
                t_last,
                cause,
                partial: Box::new(partial),
            })
        }
    }
}

/// Integrate the autoparallel equations of a connection:
/// `dx[i]/dt = sigma[i][a] y[a]`, `dy[b]/dt = -N[b][a] y[a]`.
pub fn autoparallel_integrate(
    a: &LieAlgebroid,
    nc: &NonlinearConnection,
    x0: &[f64],
    y0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<FiberPath> {
    let n = a.n();
    let m = a.m();
    run_total_space_ode(
        n,
        |z: &[f64]| {
            let (x, y) = z.split_at(n);
            let mut out = a.anchor_apply(x, y)?;
            let nv = nc.coeffs(x, y)?;
            for b in 0..m {
                out.push(-(0..m).map(|aa| nv[[b, aa]] * y[aa]).sum::<f64>());
            }
            Ok(out)
        },
        x0,
        y0,
        t_end,
        dt,
    )
}

/// Integrate the semispray equations `dx[i]/dt = sigma[i][a] y[a]`,
/// `dy[a]/dt = S[a](x, y)`.
pub fn semispray_integrate(
    a: &LieAlgebroid,
    s: &Semispray,
    x0: &[f64],
    y0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<FiberPath> {
    let n = a.n();
    run_total_space_ode(
        n,
        |z: &[f64]| {
            let (x, y) = z.split_at(n);
            let mut out = a.anchor_apply(x, y)?;
            out.extend(s.coeffs(x, y)?);
            Ok(out)
        },
        x0,
        y0,
        t_end,
        dt,
    )
}

/// Max residual of the Euler-Lagrange equations along a sampled path:
/// the interior-sample maximum of
/// `|d/dt (dL/dy[a]) - sigma[i][a] dL/dx[i] + L[t][a][b] y[b] dL/dy[t]|`
/// and of the admissibility defect `|dx[i]/dt - sigma[i][a] y[a]|`, with
/// time derivatives by centered differences.
pub fn euler_lagrange_residual(
    a: &LieAlgebroid,
    l: &LagrangianField,
    path: &FiberPath,
) -> Result<f64> {
    if path.len() < 3 {
        return Err(Error::PathTooShort {
            need: 3,
            got: path.len(),
        });
    }
    let m = a.m();
    let n = a.n();
    let momenta: Vec<Vec<f64>> = path
        .xs
        .iter()
        .zip(&path.ys)
        .map(|(x, y)| l.grad_y(x, y))
        .collect();
    let mut worst = 0.0_f64;
    for k in 1..path.len() - 1 {
        let dt_prev = path.times[k] - path.times[k - 1];
        let dt_next = path.times[k + 1] - path.times[k];
        let x = &path.xs[k];
        let y = &path.ys[k];
        let sigma = a.anchor.eval(x);
        let lsf = a.structure.eval(x);
        let dl_dx = l.grad_x(x, y);
        let dl_dy = l.grad_y(x, y);
        // centered difference, exact to second order on non-uniform grids
        let ddt = |prev: f64, cur: f64, next: f64| -> f64 {
            let a0 = -dt_next / (dt_prev * (dt_prev + dt_next));
            let a1 = (dt_next - dt_prev) / (dt_prev * dt_next);
            let a2 = dt_prev / (dt_next * (dt_prev + dt_next));
            a0 * prev + a1 * cur + a2 * next
        };
        for al in 0..m {
            let dp = ddt(momenta[k - 1][al], momenta[k][al], momenta[k + 1][al]);
            let mut rhs = 0.0;
            for i in 0..n {
                rhs += sigma[[i, al]] * dl_dx[i];
            }
            for t in 0..m {
                for b in 0..m {
                    rhs -= lsf[[t, al, b]] * y[b] * dl_dy[t];
                }
            }
            worst = worst.max((dp - rhs).abs());
        }
        let v = a.anchor_apply(x, y)?;
        for i in 0..n {
            let dx = ddt(path.xs[k - 1][i], path.xs[k][i], path.xs[k + 1][i]);
            worst = worst.max((dx - v[i]).abs());
        }
    }
    Ok(worst)
}

/// Centered directional derivative of a matrix map along `(vx, vy)`.
fn flow_directional<F>(f: F, x: &[f64], y: &[f64], vx: &[f64], vy: &[f64]) -> Result<Array2<f64>>
where
    F: Fn(&[f64], &[f64]) -> Result<Array2<f64>>,
{
    let vnorm = vx
        .iter()
        .chain(vy)
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
        .max(1.0);
    let scale = x.iter().chain(y).fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let h = FD_DERIVED * scale / vnorm;
    let shift = |sgn: f64| -> (Vec<f64>, Vec<f64>) {
        (
            x.iter().zip(vx).map(|(xi, vi)| xi + sgn * h * vi).collect(),
            y.iter().zip(vy).map(|(yi, vi)| yi + sgn * h * vi).collect(),
        )
    };
    let (xp, yp) = shift(1.0);
    let (xm, ym) = shift(-1.0);
    let fp = f(&xp, &yp)?;
    let fm = f(&xm, &ym)?;
    Ok((&fp - &fm) / (2.0 * h))
}

/// Dynamical covariant derivative of a vertical metric for an arbitrary
/// pair (semispray, connection):
/// `g_{ab/} = S(g_{ab}) + g_{gb} (N[g][a] + dS[g]/dy[a])
///            + g_{ga} (N[g][b] + dS[g]/dy[b])`.
pub fn dynamical_metric_residual(
    a: &LieAlgebroid,
    s: &Semispray,
    nc: &NonlinearConnection,
    g: &dyn Fn(&[f64], &[f64]) -> Array2<f64>,
    x: &[f64],
    y: &[f64],
) -> Result<Array2<f64>> {
    let m = a.m();
    let vx = a.anchor_apply(x, y)?;
    let vy = s.coeffs(x, y)?;
    let sg = flow_directional(|xx, yy| Ok(g(xx, yy)), x, y, &vx, &vy)?;
    let gv = g(x, y);
    let nv = nc.coeffs(x, y)?;
    let j = s.jac_y(x, y)?;
    Ok(Array2::from_shape_fn((m, m), |(aa, b)| {
        let mut acc = sg[[aa, b]];
        for gg in 0..m {
            acc += gv[[gg, b]] * (nv[[gg, aa]] + j[[gg, aa]]);
            acc += gv[[gg, aa]] * (nv[[gg, b]] + j[[gg, b]]);
        }
        acc
    }))
}

/// Metric-compatibility residual of the canonical data of a regular
/// Lagrangian:
///
/// ```text
/// S(g_{ab}) + 1/2 dS[g]/dy[a] g_{gb} + 1/2 dS[g]/dy[b] g_{ga}
///           + 1/2 (g_{gb} L[g][a][e] + g_{ga} L[g][b][e]) y[e],
/// ```
///
/// which the metric-connection theorem makes vanish.
pub fn metric_compat_residual(
    a: &LieAlgebroid,
    l: &LagrangianField,
    x: &[f64],
    y: &[f64],
) -> Result<Array2<f64>> {
    let m = a.m();
    let s = canonical_semispray(a, l);
    let vx = a.anchor_apply(x, y)?;
    let vy = s.coeffs(x, y)?;
    let sg = flow_directional(|xx, yy| Ok(l.vertical_metric(xx, yy)), x, y, &vx, &vy)?;
    let gv = l.vertical_metric(x, y);
    let j = s.jac_y(x, y)?;
    let lsf = a.structure.eval(x);
    Ok(Array2::from_shape_fn((m, m), |(aa, b)| {
        let mut acc = sg[[aa, b]];
        for gg in 0..m {
            acc += 0.5 * j[[gg, aa]] * gv[[gg, b]] + 0.5 * j[[gg, b]] * gv[[gg, aa]];
            for e in 0..m {
                acc +=
                    0.5 * (gv[[gg, b]] * lsf[[gg, aa, e]] + gv[[gg, aa]] * lsf[[gg, b, e]]) * y[e];
            }
        }
        acc
    }))
}

/// Correct a connection to a metric one for the pair `(S_N, N)` with `S_N`
/// its associated semispray: `N'[a][b] = N[a][b] - 1/2 g^{ag} g_{gb/}`.
/// Recomputing the dynamical residual with the corrected coefficients and
/// the same semispray gives zero up to roundoff.
pub fn metric_correction(
    a: &LieAlgebroid,
    nc: &NonlinearConnection,
    g: &dyn Fn(&[f64], &[f64]) -> Array2<f64>,
    x: &[f64],
    y: &[f64],
) -> Result<Array2<f64>> {
    let m = a.m();
    let s = associated_semispray(a, nc);
    let resid = dynamical_metric_residual(a, &s, nc, g, x, y)?;
    let gv = g(x, y);
    let det = numeric::det(&gv);
    if det.abs() < REGULARITY_TOL {
        return Err(Error::SingularMatrix {
            context: "vertical metric in correction",
            det,
        });
    }
    let ginv = numeric::invert(&gv).ok_or(Error::SingularMatrix {
        context: "vertical metric in correction",
        det,
    })?;
    let nv = nc.coeffs(x, y)?;
    Ok(Array2::from_shape_fn((m, m), |(aa, b)| {
        let mut v = nv[[aa, b]];
        for gg in 0..m {
            v -= 0.5 * ginv[[aa, gg]] * resid[[gg, b]];
        }
        v
    }))
}

/// Jacobi endomorphism `R[a][b]` of a semispray/connection pair:
///
/// ```text
/// -sigma[i][b] dS[a]/dx[i] - S(N[a][b]) - N[a][g] N[g][b]
///   + (L[g][e][b] N[a][g] + L[a][g][e] N[g][b]) y[e],
/// ```
///
/// with `S(.)` the derivation along `(sigma y, S)`. For a spray it equals
/// the curvature contraction `R[a][e][b] y[e]`.
pub fn jacobi_endomorphism(
    a: &LieAlgebroid,
    s: &Semispray,
    nc: &NonlinearConnection,
    x: &[f64],
    y: &[f64],
) -> Result<Array2<f64>> {
    let m = a.m();
    let n = a.n();
    let sigma = a.anchor.eval(x);
    let lsf = a.structure.eval(x);
    let dsx = s.grad_x(x, y)?;
    let nv = nc.coeffs(x, y)?;
    let vx = a.anchor_apply(x, y)?;
    let vy = s.coeffs(x, y)?;
    let sn = flow_directional(|xx, yy| nc.coeffs(xx, yy), x, y, &vx, &vy)?;
    let mut out = Array2::zeros((m, m));
    for aa in 0..m {
        for b in 0..m {
            let mut acc = 0.0;
            for i in 0..n {
                acc -= sigma[[i, b]] * dsx[[aa, i]];
            }
            acc -= sn[[aa, b]];
            for g in 0..m {
                acc -= nv[[aa, g]] * nv[[g, b]];
                for e in 0..m {
                    acc += (lsf[[g, e, b]] * nv[[aa, g]] + lsf[[aa, g, e]] * nv[[g, b]]) * y[e];
                }
            }
            out[[aa, b]] = acc;
        }
    }
    Ok(out)
}

/// The three local Helmholtz residuals of canonical Lagrangian data:
/// symmetry of the vertical metric's y-derivative, the metric condition,
/// and the metric-weighted antisymmetry of the Jacobi endomorphism.
pub fn helmholtz_residuals(
    a: &LieAlgebroid,
    l: &LagrangianField,
    x: &[f64],
    y: &[f64],
) -> Result<(Array3<f64>, Array2<f64>, Array2<f64>)> {
    let m = a.m();
    // r1: dg_{ab}/dy[e] - dg_{ae}/dy[b]
    let mut dgy = Array3::zeros((m, m, m));
    let mut yp = y.to_vec();
    for e in 0..m {
        let h = numeric::step(y[e], FD_DERIVED);
        yp[e] = y[e] + h;
        let gp = l.vertical_metric(x, &yp);
        yp[e] = y[e] - h;
        let gm = l.vertical_metric(x, &yp);
        yp[e] = y[e];
        for aa in 0..m {
            for b in 0..m {
                dgy[[aa, b, e]] = (gp[[aa, b]] - gm[[aa, b]]) / (2.0 * h);
            }
        }
    }
    let mut r1 = Array3::zeros((m, m, m));
    for aa in 0..m {
        for b in 0..m {
            for e in 0..m {
                r1[[aa, b, e]] = dgy[[aa, b, e]] - dgy[[aa, e, b]];
            }
        }
    }
    // r2: metric condition written as in the local Helmholtz display
    let s = canonical_semispray(a, l);
    let nc = connection_from_semispray(a, &s);
    let vx = a.anchor_apply(x, y)?;
    let vy = s.coeffs(x, y)?;
    let sg = flow_directional(|xx, yy| Ok(l.vertical_metric(xx, yy)), x, y, &vx, &vy)?;
    let gv = l.vertical_metric(x, y);
    let nv = nc.coeffs(x, y)?;
    let lsf = a.structure.eval(x);
    let mut r2 = Array2::zeros((m, m));
    for aa in 0..m {
        for b in 0..m {
            let mut acc = sg[[aa, b]];
            for gg in 0..m {
                acc -= gv[[gg, b]] * nv[[gg, aa]] + gv[[gg, aa]] * nv[[gg, b]];
                for e in 0..m {
                    acc -= y[e] * (gv[[gg, b]] * lsf[[gg, e, aa]] + gv[[gg, aa]] * lsf[[gg, e, b]]);
                }
            }
            r2[[aa, b]] = acc;
        }
    }
    // r3: g-weighted antisymmetry of the Jacobi endomorphism
    let phi = jacobi_endomorphism(a, &s, &nc, x, y)?;
    let gphi = gv.dot(&phi);
    let r3 = Array2::from_shape_fn((m, m), |(aa, b)| gphi[[aa, b]] - gphi[[b, aa]]);
    Ok((r1, r2, r3))
}

/// Symmetric connection coefficients `N_{ab}(q, mu)` on the dual side.
#[derive(Clone)]
pub struct DualConnection {
    n: usize,
    m: usize,
    coeffs: XYFn<Result<Array2<f64>>>,
}

impl DualConnection {
    pub fn from_fn<F>(n: usize, m: usize, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> Result<Array2<f64>> + Send + Sync + 'static,
    {
        DualConnection {
            n,
            m,
            coeffs: Arc::new(f),
        }
    }

    pub fn zero(n: usize, m: usize) -> Self {
        DualConnection::from_fn(n, m, move |_, _| Ok(Array2::zeros((m, m))))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn coeffs(&self, q: &[f64], mu: &[f64]) -> Result<Array2<f64>> {
        (self.coeffs)(q, mu)
    }

    fn d_dq(&self, q: &[f64], mu: &[f64]) -> Result<Array3<f64>> {
        let mut out = Array3::zeros((self.m, self.m, self.n));
        let mut qp = q.to_vec();
        for i in 0..self.n {
            let h = numeric::step(q[i], FD_DERIVED);
            qp[i] = q[i] + h;
            let np = (self.coeffs)(&qp, mu)?;
            qp[i] = q[i] - h;
            let nm = (self.coeffs)(&qp, mu)?;
            qp[i] = q[i];
            for aa in 0..self.m {
                for b in 0..self.m {
                    out[[aa, b, i]] = (np[[aa, b]] - nm[[aa, b]]) / (2.0 * h);
                }
            }
        }
        Ok(out)
    }

    fn d_dmu(&self, q: &[f64], mu: &[f64]) -> Result<Array3<f64>> {
        let mut out = Array3::zeros((self.m, self.m, self.m));
        let mut mp = mu.to_vec();
        for d in 0..self.m {
            let h = numeric::step(mu[d], FD_DERIVED);
            mp[d] = mu[d] + h;
            let np = (self.coeffs)(q, &mp)?;
            mp[d] = mu[d] - h;
            let nm = (self.coeffs)(q, &mp)?;
            mp[d] = mu[d];
            for aa in 0..self.m {
                for b in 0..self.m {
                    out[[aa, b, d]] = (np[[aa, b]] - nm[[aa, b]]) / (2.0 * h);
                }
            }
        }
        Ok(out)
    }

    /// Max-abs residual of the symmetry condition
    /// `N_{ab} - N_{ba} - mu_g L[g][a][b]`.
    pub fn symmetry_residual(&self, a: &LieAlgebroid, q: &[f64], mu: &[f64]) -> Result<f64> {
        let nv = self.coeffs(q, mu)?;
        let lsf = a.structure.eval(q);
        let m = self.m;
        let mut worst = 0.0_f64;
        for aa in 0..m {
            for b in 0..m {
                let mul: f64 = (0..m).map(|g| mu[g] * lsf[[g, aa, b]]).sum();
                worst = worst.max((nv[[aa, b]] - nv[[b, aa]] - mul).abs());
            }
        }
        Ok(worst)
    }
}

/// Dual metric `g_{ab}`: inverse of the mu-Hessian of `H`.
fn dual_lower_metric(h: &DualHamiltonian, q: &[f64], mu: &[f64]) -> Result<Array2<f64>> {
    let hess = h.hess_mu(q, mu)?;
    let det = numeric::det(&hess);
    if det.abs() < REGULARITY_TOL {
        return Err(Error::Regularity(format!(
            "mu-Hessian of H is singular (|det| = {:.3e})",
            det.abs()
        )));
    }
    numeric::invert(&hess).ok_or(Error::SingularMatrix {
        context: "mu-Hessian of H",
        det,
    })
}

/// The canonical symmetric nonlinear connection of a regular Hamiltonian:
///
/// ```text
/// N_{ab} = 1/2 ( sigma[i][g] ( dg_{ab}/dmu[g] dH/dq[i]
///                             - dg_{ab}/dq[i] dH/dmu[g] )
///               - d2H/dq[i]dmu[e] (sigma[i][b] g_{ae} + sigma[i][a] g_{be})
///               + mu_g L[g][e][k] dH/dmu[e] dg_{ab}/dmu[k]
///               + mu_g L[g][a][b]
///               + dH/dmu[d] (g_{ae} L[e][d][b] + g_{be} L[e][d][a]) )
/// ```
///
/// The first line is the bracket term `{g_{ab}, H}` contracted with the
/// anchor, read with the `(i, g)` summation that makes the display
/// type-correct. The result satisfies the dual symmetry condition exactly
/// (modulo the finite differences in `dg`).
pub fn dual_connection(a: &LieAlgebroid, h: &DualHamiltonian) -> DualConnection {
    let al = a.clone();
    let hh = h.clone();
    DualConnection::from_fn(a.n(), a.m(), move |q, mu| {
        dual_connection_at(&al, &hh, q, mu)
    })
}

/// One-point evaluation of the canonical dual connection.
pub fn dual_connection_at(
    a: &LieAlgebroid,
    h: &DualHamiltonian,
    q: &[f64],
    mu: &[f64],
) -> Result<Array2<f64>> {
    let m = a.m();
    let n = a.n();
    let sigma = a.anchor.eval(q);
    let lsf = a.structure.eval(q);
    let g = dual_lower_metric(h, q, mu)?;
    let dh_mu = h.grad_mu(q, mu)?;
    let dh_q = h.grad_x(q, mu)?;

    // dg/dmu and dg/dq by differences of the inverse-Hessian map
    let mut dg_dmu = Array3::zeros((m, m, m));
    let mut mp = mu.to_vec();
    for d in 0..m {
        let hstep = numeric::step(mu[d], FD_DERIVED);
        mp[d] = mu[d] + hstep;
        let gp = dual_lower_metric(h, q, &mp)?;
        mp[d] = mu[d] - hstep;
        let gm = dual_lower_metric(h, q, &mp)?;
        mp[d] = mu[d];
        for aa in 0..m {
            for b in 0..m {
                dg_dmu[[aa, b, d]] = (gp[[aa, b]] - gm[[aa, b]]) / (2.0 * hstep);
            }
        }
    }
    let mut dg_dq = Array3::zeros((m, m, n));
    let mut qp = q.to_vec();
    for i in 0..n {
        let hstep = numeric::step(q[i], FD_DERIVED);
        qp[i] = q[i] + hstep;
        let gp = dual_lower_metric(h, &qp, mu)?;
        qp[i] = q[i] - hstep;
        let gm = dual_lower_metric(h, &qp, mu)?;
        qp[i] = q[i];
        for aa in 0..m {
            for b in 0..m {
                dg_dq[[aa, b, i]] = (gp[[aa, b]] - gm[[aa, b]]) / (2.0 * hstep);
            }
        }
    }
    // d2H/dq[i]dmu[e] by differences of the analytic mu-gradient
    let mut d2h_qmu = Array2::zeros((n, m));
    let mut qp = q.to_vec();
    for i in 0..n {
        let hstep = numeric::step(q[i], FD_DERIVED);
        qp[i] = q[i] + hstep;
        let gp = h.grad_mu(&qp, mu)?;
        qp[i] = q[i] - hstep;
        let gm = h.grad_mu(&qp, mu)?;
        qp[i] = q[i];
        for e in 0..m {
            d2h_qmu[[i, e]] = (gp[e] - gm[e]) / (2.0 * hstep);
        }
    }

    let mut out = Array2::zeros((m, m));
    for aa in 0..m {
        for b in 0..m {
            let mut acc = 0.0;
            for g_idx in 0..m {
                for i in 0..n {
                    acc += sigma[[i, g_idx]]
                        * (dg_dmu[[aa, b, g_idx]] * dh_q[i] - dg_dq[[aa, b, i]] * dh_mu[g_idx]);
                }
            }
            for e in 0..m {
                for i in 0..n {
                    acc -=
                        d2h_qmu[[i, e]] * (sigma[[i, b]] * g[[aa, e]] + sigma[[i, aa]] * g[[b, e]]);
                }
            }
            for g_idx in 0..m {
                for e in 0..m {
                    for k in 0..m {
                        acc += mu[g_idx] * lsf[[g_idx, e, k]] * dh_mu[e] * dg_dmu[[aa, b, k]];
                    }
                }
                acc += mu[g_idx] * lsf[[g_idx, aa, b]];
            }
            for d in 0..m {
                for e in 0..m {
                    acc += dh_mu[d] * (g[[aa, e]] * lsf[[e, d, b]] + g[[b, e]] * lsf[[e, d, aa]]);
                }
            }
            out[[aa, b]] = 0.5 * acc;
        }
    }
    Ok(out)
}

/// Curvature `R_{abg}` of a dual connection:
///
/// ```text
/// sigma[i][a] dN_{bg}/dq[i] - sigma[i][b] dN_{ag}/dq[i]
///   + N_{ad} dN_{bg}/dmu[d] - N_{bd} dN_{ag}/dmu[d] - L[e][a][b] N_{eg}.
/// ```
///
/// Antisymmetric in `(a, b)` and subject to the cyclic Bianchi identity.
pub fn dual_curvature(
    a: &LieAlgebroid,
    dc: &DualConnection,
    q: &[f64],
    mu: &[f64],
) -> Result<Array3<f64>> {
    let m = a.m();
    let n = a.n();
    let sigma = a.anchor.eval(q);
    let lsf = a.structure.eval(q);
    let nv = dc.coeffs(q, mu)?;
    let dnq = dc.d_dq(q, mu)?;
    let dnmu = dc.d_dmu(q, mu)?;
    let mut out = Array3::zeros((m, m, m));
    for aa in 0..m {
        for b in 0..m {
            for g in 0..m {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += sigma[[i, aa]] * dnq[[b, g, i]] - sigma[[i, b]] * dnq[[aa, g, i]];
                }
                for d in 0..m {
                    acc += nv[[aa, d]] * dnmu[[b, g, d]] - nv[[b, d]] * dnmu[[aa, g, d]];
                }
                for e in 0..m {
                    acc -= lsf[[e, aa, b]] * nv[[e, g]];
                }
                out[[aa, b, g]] = acc;
            }
        }
    }
    Ok(out)
}

/// Max-abs cyclic Bianchi sum `R_{abg} + R_{bga} + R_{gab}`.
pub fn bianchi_residual(r: &Array3<f64>) -> f64 {
    let m = r.dim().0;
    let mut worst = 0.0_f64;
    for a in 0..m {
        for b in 0..m {
            for g in 0..m {
                worst = worst.max((r[[a, b, g]] + r[[b, g, a]] + r[[g, a, b]]).abs());
            }
        }
    }
    worst
}
