//! Registry of worked sub-Riemannian/sub-Finslerian systems with
//! parameters, initial data and closed-form geodesic oracles.
//!
//! Six systems are registered:
//!
//! * `heisenberg` — the Heisenberg group with a Randers-type cost, modeled
//!   on `E = TM` with the bracket-completed frame; the constraint momentum
//!   `mu_3 = lambda` is a first integral.
//! * `nonholonomic` — the nonholonomic distribution `(d/dx1, d/dx2 + x1
//!   d/dx3)` with the same cost, bracket-completed the same way.
//! * `holonomic` — an integrable rank-2 distribution in `R^3` where the
//!   algebroid is the distribution itself.
//! * `grushin` — the Grushin plane with a Randers-type cost, modeled on the
//!   cotangent bundle (identity anchor) with the pulled-back Hamiltonian;
//!   the spanning fields do not close under bracket within their span.
//! * `grushin3d` — the rank-varying 3d analogue, also on the cotangent
//!   bundle.
//! * `kropina` — the degenerate-cost plane system on the cotangent bundle;
//!   its dual Hamiltonian is singular where `b . p = 0`.
//!
//! Closed forms parameterized by an angle `theta` carry the time
//! reparameterization `t(theta)` as a quadrature; `oracle_state` inverts it
//! by bisection to `1e-12` before evaluating the state.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{array, Array2, Array3};

use crate::algebroid::{single_bracket, AnchorField, LieAlgebroid, ScalarField, StructureField};
use crate::costs::{self, CovectorField, DualHamiltonian, MetricField};
use crate::error::{Error, Result};
use crate::flow::{self, HamiltonianSystem, PhaseState, Trajectory};
use crate::numeric::{self, SampleBox};

/// Quadrature tolerance for `t(theta)` and theta-parameterized components.
const QUAD_TOL: f64 = 1e-13;
/// Bisection tolerance (in theta) for inverting `t(theta)`.
const THETA_TOL: f64 = 1e-12;

/// How a closed-form geodesic is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    /// `state_of` takes the physical time directly.
    Time,
    /// `state_of` takes an angle; `t(theta)` must be inverted first.
    Theta,
}

/// A closed-form geodesic with an optional `t(theta)` reparameterization.
#[derive(Clone)]
pub struct ClosedFormGeodesic {
    state_of: Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>,
    time_of_theta: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    theta_max: f64,
    /// Base-point components covered by the closed form.
    pub components: Vec<usize>,
}

impl ClosedFormGeodesic {
    fn time_parameterized<F>(components: Vec<usize>, state: F) -> Self
    where
        F: Fn(f64) -> Vec<f64> + Send + Sync + 'static,
    {
        ClosedFormGeodesic {
            state_of: Arc::new(state),
            time_of_theta: None,
            theta_max: f64::INFINITY,
            components,
        }
    }

    fn theta_parameterized<F, G>(components: Vec<usize>, state: F, time: G, theta_max: f64) -> Self
    where
        F: Fn(f64) -> Vec<f64> + Send + Sync + 'static,
        G: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        ClosedFormGeodesic {
            state_of: Arc::new(state),
            time_of_theta: Some(Arc::new(time)),
            theta_max,
            components,
        }
    }

    pub fn parameterization(&self) -> Parameterization {
        if self.time_of_theta.is_some() {
            Parameterization::Theta
        } else {
            Parameterization::Time
        }
    }

    /// Largest time the oracle can reach (infinite for time-parameterized
    /// forms).
    pub fn max_time(&self) -> f64 {
        match &self.time_of_theta {
            None => f64::INFINITY,
            Some(tf) => tf(self.theta_max),
        }
    }

    /// Base point at time `t`; inverts `t(theta)` by bisection when needed.
    pub fn state_at(&self, t: f64) -> Result<Vec<f64>> {
        match &self.time_of_theta {
            None => Ok((self.state_of)(t)),
            Some(tf) => {
                let t_hi = tf(self.theta_max);
                if !(0.0..=t_hi).contains(&t) {
                    return Err(Error::OutsideOracleDomain {
                        t,
                        lo: 0.0,
                        hi: t_hi,
                    });
                }
                let theta =
                    numeric::bisect_increasing(|th| tf(th), 0.0, self.theta_max, t, THETA_TOL);
                Ok((self.state_of)(theta))
            }
        }
    }

    /// `t(theta)` restricted to its stated domain, for monotonicity checks.
    pub fn time_of_theta(&self, theta: f64) -> Option<f64> {
        self.time_of_theta.as_ref().map(|tf| tf(theta))
    }

    pub fn theta_domain(&self) -> (f64, f64) {
        (0.0, self.theta_max)
    }
}

/// A named, parameterized worked system.
#[derive(Clone)]
pub struct Scenario {
    name: String,
    pub algebroid: LieAlgebroid,
    pub hamiltonian: DualHamiltonian,
    pub params: BTreeMap<String, f64>,
    pub default_initial: PhaseState,
    /// Reference integration horizon used by the benchmarks.
    pub default_t_end: f64,
    /// Max-error tolerance for oracle comparison at the reference setup.
    pub compare_tolerance: f64,
    /// Whether the comparison tolerance applies to the relative error.
    pub compare_relative: bool,
    oracle: Option<ClosedFormGeodesic>,
    /// The control distribution's anchor matrix for systems modeled on the
    /// cotangent bundle (pullback demos); `None` when the algebroid anchor
    /// is the distribution itself.
    pub distribution: Option<AnchorField>,
    diag_metric: MetricField,
    diag_metric_inv: MetricField,
    diag_state: (Vec<f64>, Vec<f64>),
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl Scenario {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn oracle(&self) -> Option<&ClosedFormGeodesic> {
        self.oracle.as_ref()
    }

    /// The Hamiltonian system ready for integration.
    pub fn system(&self) -> HamiltonianSystem {
        HamiltonianSystem::new(self.algebroid.clone(), self.hamiltonian.clone())
            .expect("scenario dimensions are consistent by construction")
    }

    /// Closed-form state at time `t`.
    pub fn oracle_state(&self, t: f64) -> Result<Vec<f64>> {
        self.oracle.as_ref().ok_or(Error::NoOracle)?.state_at(t)
    }

    /// Default state scaled to the 1/2 level of `H` (a no-op for the
    /// built-in initial covectors, which already sit there).
    pub fn normalized_initial(&self) -> Result<PhaseState> {
        flow::normalize_to_arclength(&self.system(), &self.default_initial)
    }

    /// Integrate from the default initial state.
    pub fn run(&self, t_end: f64, dt: f64) -> Result<Trajectory> {
        flow::integrate(&self.system(), &self.default_initial, t_end, dt)
    }

    /// Quadratic Lagrangian used for connection diagnostics (for the
    /// Randers-cost systems this is the quadratic part of the cost).
    pub fn diagnostic_lagrangian(&self) -> crate::connections::LagrangianField {
        crate::connections::LagrangianField::quadratic(self.algebroid.n(), self.diag_metric.clone())
    }

    /// Regular Hamiltonian paired with the diagnostic Lagrangian.
    pub fn diagnostic_hamiltonian(&self) -> DualHamiltonian {
        costs::quadratic_dual_from_inverse(self.algebroid.n(), &self.diag_metric_inv)
    }

    /// Default evaluation point for connection diagnostics.
    pub fn diagnostic_state(&self) -> (Vec<f64>, Vec<f64>) {
        self.diag_state.clone()
    }

    /// Evaluate the connection diagnostics at `(x, y)` (Lagrangian side)
    /// and `(q = x, mu = y)` (dual side).
    pub fn connection_report(&self, x: &[f64], fiber: &[f64]) -> Result<ConnectionReport> {
        let a = &self.algebroid;
        if x.len() != a.n() {
            return Err(Error::DimensionMismatch {
                context: "connection report base point",
                expected: a.n(),
                got: x.len(),
            });
        }
        if fiber.len() != a.m() {
            return Err(Error::DimensionMismatch {
                context: "connection report fiber vector",
                expected: a.m(),
                got: fiber.len(),
            });
        }
        let l = self.diagnostic_lagrangian();
        let s = crate::connections::canonical_semispray(a, &l);
        let nc = crate::connections::connection_from_semispray(a, &s);
        let n_lagrangian = nc.coeffs(x, fiber)?;
        ensure_finite(n_lagrangian.iter(), "connection coefficients")?;
        let curvature = crate::connections::curvature(a, &nc, x, fiber)?;
        let torsion = crate::connections::torsion(a, &nc, x, fiber)?;
        let h = self.diagnostic_hamiltonian();
        let dc = crate::connections::dual_connection(a, &h);
        let n_dual = dc.coeffs(x, fiber)?;
        ensure_finite(n_dual.iter(), "dual connection coefficients")?;
        let dual_symmetry_residual = dc.symmetry_residual(a, x, fiber)?;
        Ok(ConnectionReport {
            n_lagrangian,
            curvature,
            torsion,
            n_dual,
            dual_symmetry_residual,
        })
    }
}

fn ensure_finite<'a>(mut vals: impl Iterator<Item = &'a f64>, what: &str) -> Result<()> {
    if vals.any(|v| !v.is_finite()) {
        return Err(Error::Regularity(format!(
            "{what} are not finite at the requested point"
        )));
    }
    Ok(())
}

/// Connection diagnostics at one evaluation point.
#[derive(Debug, Clone)]
pub struct ConnectionReport {
    pub n_lagrangian: Array2<f64>,
    pub curvature: Array3<f64>,
    pub torsion: Array3<f64>,
    pub n_dual: Array2<f64>,
    pub dual_symmetry_residual: f64,
}

/// Comparison of a trajectory against the scenario's closed form.
#[derive(Debug, Clone, Copy)]
pub struct CompareReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub energy_drift: f64,
}

/// Componentwise max errors of the trajectory's base points against the
/// closed form, over every sample; the relative error divides by
/// `max(1, |oracle value|)`.
pub fn compare(s: &Scenario, t: &Trajectory) -> Result<CompareReport> {
    let oracle = s.oracle.as_ref().ok_or(Error::NoOracle)?;
    let mut max_abs = 0.0_f64;
    let mut max_rel = 0.0_f64;
    for (time, state) in t.times().iter().zip(t.states()) {
        let want = oracle.state_at(*time)?;
        for &c in &oracle.components {
            let diff = (state.x[c] - want[c]).abs();
            max_abs = max_abs.max(diff);
            max_rel = max_rel.max(diff / want[c].abs().max(1.0));
        }
    }
    Ok(CompareReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        energy_drift: t.energy_drift(),
    })
}

/// Registered scenario names.
pub fn names() -> &'static [&'static str] {
    &[
        "heisenberg",
        "grushin",
        "holonomic",
        "nonholonomic",
        "grushin3d",
        "kropina",
    ]
}

struct Params {
    values: BTreeMap<String, f64>,
}

impl Params {
    fn resolve(
        scenario: &str,
        defaults: &[(&str, f64)],
        overrides: &BTreeMap<String, f64>,
    ) -> Result<Params> {
        let mut values: BTreeMap<String, f64> =
            defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        for (k, v) in overrides {
            if !values.contains_key(k) {
                return Err(Error::UnknownParameter(k.clone(), scenario.to_string()));
            }
            values.insert(k.clone(), *v);
        }
        Ok(Params { values })
    }

    fn get(&self, k: &str) -> f64 {
        self.values[k]
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::ParameterDomain(format!(
            "epsilon must lie in [0, 1), got {eps}"
        )));
    }
    Ok(())
}

fn check_unit_circle(a: f64, b: f64) -> Result<()> {
    if (a * a + b * b - 1.0).abs() > 1e-12 {
        return Err(Error::ParameterDomain(format!(
            "need a^2 + b^2 = 1 (got {})",
            a * a + b * b
        )));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) {
        return Err(Error::ParameterDomain(format!(
            "{name} must be positive, got {v}"
        )));
    }
    Ok(())
}

fn check_nonzero(name: &str, v: f64) -> Result<()> {
    if v == 0.0 || !v.is_finite() {
        return Err(Error::ParameterDomain(format!(
            "{name} must be nonzero and finite, got {v}"
        )));
    }
    Ok(())
}

/// Planar Randers-type dual on the first two fiber-dual coordinates:
/// `H = 1/2 (sqrt(mu1^2/(1-e^2)^2 + mu2^2/(1-e^2)) - e mu1/(1-e^2))^2`.
fn planar_randers_dual(n: usize, eps: f64) -> DualHamiltonian {
    costs::randers_dual(
        n,
        &MetricField::identity(n, 2),
        &CovectorField::constant(n, vec![eps, 0.0]),
    )
}

/// `1 - eps (a cos A th - b sin A th)`: the denominator of the rotated
/// Randers closed forms.
fn rot_denom(eps: f64, a: f64, b: f64, big_a: f64) -> impl Fn(f64) -> f64 + Send + Sync + Copy {
    move |th: f64| 1.0 - eps * (a * (big_a * th).cos() - b * (big_a * th).sin())
}

fn build_heisenberg(overrides: &BTreeMap<String, f64>) -> Result<Scenario> {
    let p = Params::resolve(
        "heisenberg",
        &[
            ("epsilon", 0.0),
            ("lambda", 1.0),
            ("a", 1.0),
            ("b", 0.0),
            ("A", 1.0),
        ],
        overrides,
    )?;
    let eps = p.get("epsilon");
    let lam = p.get("lambda");
    let a = p.get("a");
    let b = p.get("b");
    let big_a = p.get("A");
    check_epsilon(eps)?;
    check_nonzero("lambda", lam)?;
    check_unit_circle(a, b)?;
    check_positive("A", big_a)?;

    let anchor = AnchorField::new(3, 3, |x: &[f64]| {
        array![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [-x[1] / 2.0, x[0] / 2.0, 1.0]
        ]
    })
    .with_partials(|_x: &[f64]| {
        let mut d = Array3::zeros((3, 3, 3));
        d[[2, 0, 1]] = -0.5;
        d[[2, 1, 0]] = 0.5;
        d
    });
    let algebroid = LieAlgebroid::new(
        anchor,
        single_bracket(3, 3, 2, 0, 1, 1.0),
        SampleBox::centered(3, 2.0),
    )?;
    let hamiltonian = planar_randers_dual(3, eps).lift(3);
    let mu0 = vec![
        (1.0 - eps * eps) * a / (1.0 - eps * a),
        (1.0 - eps * eps).sqrt() * b / (1.0 - eps * a),
        lam,
    ];

    let oracle = if eps == 0.0 {
        ClosedFormGeodesic::time_parameterized(vec![0, 1, 2], move |t| {
            let s = lam * t;
            vec![
                (a * s.sin() - b * (1.0 - s.cos())) / lam,
                (b * s.sin() + a * (1.0 - s.cos())) / lam,
                (s - s.sin()) / (2.0 * lam * lam),
            ]
        })
    } else {
        let d = rot_denom(eps, a, b, big_a);
        let c32 = (1.0 - eps * eps).powf(1.5);
        let time = move |th: f64| {
            c32 * big_a / lam * numeric::integrate(|u| 1.0 / (d(u) * d(u)), 0.0, th, QUAD_TOL)
        };
        let state = move |th: f64| {
            let (sn, cs) = ((big_a * th).sin(), (big_a * th).cos());
            let root = (1.0 - eps * eps).sqrt();
            let x1 = root * (a * sn + b * cs) / (lam * d(th)) - root * b / (lam * (1.0 - eps * a));
            let x2 = (1.0 - eps * eps) * (b * sn - a * cs) / (lam * d(th))
                + (1.0 - eps * eps) * a / (lam * (1.0 - eps * a));
            let x3 = c32 * big_a / (2.0 * lam * lam * (1.0 - eps * a))
                * numeric::integrate(
                    |u| (1.0 - (big_a * u).cos()) / (d(u) * d(u)),
                    0.0,
                    th,
                    QUAD_TOL,
                );
            vec![x1, x2, x3]
        };
        ClosedFormGeodesic::theta_parameterized(
            vec![0, 1, 2],
            state,
            time,
            8.0 * std::f64::consts::PI,
        )
    };

    Ok(Scenario {
        name: "heisenberg".into(),
        algebroid,
        hamiltonian,
        params: p.values,
        default_initial: PhaseState::new(vec![0.0; 3], mu0),
        default_t_end: std::f64::consts::PI,
        compare_tolerance: if eps == 0.0 { 1e-6 } else { 1e-4 },
        compare_relative: false,
        oracle: Some(oracle),
        distribution: None,
        diag_metric: MetricField::identity(3, 3),
        diag_metric_inv: MetricField::identity(3, 3),
        diag_state: (vec![0.3, -0.2, 0.5], vec![0.9, -0.4, 0.7]),
    })
}

fn build_nonholonomic(overrides: &BTreeMap<String, f64>) -> Result<Scenario> {
    let p = Params::resolve(
        "nonholonomic",
        &[
            ("epsilon", 0.0),
            ("lambda", 1.0),
            ("a", 1.0),
            ("b", 0.0),
            ("A", 1.0),
        ],
        overrides,
    )?;
    let eps = p.get("epsilon");
    let lam = p.get("lambda");
    let a = p.get("a");
    let b = p.get("b");
    check_epsilon(eps)?;
    check_nonzero("lambda", lam)?;
    check_unit_circle(a, b)?;

    let anchor = AnchorField::new(3, 3, |x: &[f64]| {
        array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, x[0], 1.0]]
    })
    .with_partials(|_x: &[f64]| {
        let mut d = Array3::zeros((3, 3, 3));
        d[[2, 1, 0]] = 1.0;
        d
    });
    let algebroid = LieAlgebroid::new(
        anchor,
        single_bracket(3, 3, 2, 0, 1, 1.0),
        SampleBox::centered(3, 2.0),
    )?;
    let hamiltonian = planar_randers_dual(3, eps).lift(3);
    let mu0 = vec![
        (1.0 - eps * eps) * a / (1.0 - eps * a),
        (1.0 - eps * eps).sqrt() * b / (1.0 - eps * a),
        lam,
    ];

    // Closed form for the quadratic (eps = 0) case; the third component is
    // the exact integral of x1 dx2/dt from the planar rotation:
    //   x3 = [s/2 + (b^2 - a^2) sin(2s)/4 - a b cos^2 s + a b cos s
    //         - b^2 sin s] / lambda^2,  s = lambda t.
    let oracle = if eps == 0.0 {
        Some(ClosedFormGeodesic::time_parameterized(
            vec![0, 1, 2],
            move |t| {
                let s = lam * t;
                let x3 = (s / 2.0 + (b * b - a * a) * (2.0 * s).sin() / 4.0
                    - a * b * s.cos() * s.cos()
                    + a * b * s.cos()
                    - b * b * s.sin())
                    / (lam * lam);
                vec![
                    (a * s.sin() - b * (1.0 - s.cos())) / lam,
                    (b * s.sin() + a * (1.0 - s.cos())) / lam,
                    x3,
                ]
            },
        ))
    } else {
        None
    };

    Ok(Scenario {
        name: "nonholonomic".into(),
        algebroid,
        hamiltonian,
        params: p.values,
        default_initial: PhaseState::new(vec![0.0; 3], mu0),
        default_t_end: std::f64::consts::PI,
        compare_tolerance: 1e-6,
        compare_relative: false,
        oracle,
        distribution: None,
        diag_metric: MetricField::identity(3, 3),
        diag_metric_inv: MetricField::identity(3, 3),
        diag_state: (vec![0.4, 0.1, -0.3], vec![0.8, 0.5, -0.6]),
    })
}

fn build_holonomic(overrides: &BTreeMap<String, f64>) -> Result<Scenario> {
    let p = Params::resolve("holonomic", &[("epsilon", 0.0)], overrides)?;
    let eps = p.get("epsilon");
    check_epsilon(eps)?;

    let anchor = AnchorField::new(3, 2, |x: &[f64]| {
        array![[1.0, x[0]], [0.0, x[1]], [0.0, 1.0]]
    })
    .with_partials(|_x: &[f64]| {
        let mut d = Array3::zeros((3, 2, 3));
        d[[0, 1, 0]] = 1.0;
        d[[1, 1, 1]] = 1.0;
        d
    });
    let algebroid = LieAlgebroid::new(
        anchor,
        single_bracket(3, 2, 0, 0, 1, 1.0),
        SampleBox::new(vec![0.5, 0.5, -2.0], vec![2.5, 2.5, 2.0]),
    )?;
    let hamiltonian = planar_randers_dual(3, eps);
    let mu0 = vec![1.0 + eps, 0.0];

    let oracle = if eps == 0.0 {
        ClosedFormGeodesic::time_parameterized(vec![0, 1, 2], |t: f64| {
            vec![t.sinh() + t.cosh(), t.cosh(), t.cosh().ln()]
        })
    } else {
        let root = (1.0 - eps * eps).sqrt();
        let time = move |th: f64| {
            root * numeric::integrate(|u: f64| 1.0 / (1.0 - eps / u.cosh()), 0.0, th, QUAD_TOL)
        };
        let state = move |th: f64| {
            let c = (th.cosh() - eps) / (1.0 - eps);
            vec![th.sinh() / root + c, c, c.ln()]
        };
        ClosedFormGeodesic::theta_parameterized(vec![0, 1, 2], state, time, 30.0)
    };

    Ok(Scenario {
        name: "holonomic".into(),
        algebroid,
        hamiltonian,
        params: p.values,
        default_initial: PhaseState::new(vec![1.0, 1.0, 0.0], mu0),
        default_t_end: 1.0,
        compare_tolerance: if eps == 0.0 { 1e-5 } else { 1e-4 },
        compare_relative: true,
        oracle: Some(oracle),
        distribution: None,
        diag_metric: MetricField::identity(3, 2),
        diag_metric_inv: MetricField::identity(3, 2),
        diag_state: (vec![1.0, 1.0, 0.0], vec![1.0, 1.0]),
    })
}

fn build_grushin(overrides: &BTreeMap<String, f64>) -> Result<Scenario> {
    let p = Params::resolve(
        "grushin",
        &[("epsilon", 0.0), ("a", 1.0), ("A", 1.0)],
        overrides,
    )?;
    let eps = p.get("epsilon");
    let a = p.get("a");
    let big_a = p.get("A");
    check_epsilon(eps)?;
    check_positive("a", a)?;
    check_positive("A", big_a)?;

    // Modeled on the cotangent bundle: identity anchor, vanishing bracket,
    // and the Hamiltonian pulled back through the distribution matrix
    // [[1, 0], [0, x1]] (the spanning fields do not close under bracket
    // within their span, so the distribution itself is not an algebroid).
    let algebroid = LieAlgebroid::new(
        AnchorField::identity(2),
        StructureField::zero(2, 2),
        SampleBox::centered(2, 2.0),
    )?;
    let g_inv = MetricField::new(2, 2, |x: &[f64]| array![[1.0, 0.0], [0.0, x[0] * x[0]]])
        .with_partials(|x: &[f64]| {
            let mut d = Array3::zeros((2, 2, 2));
            d[[1, 1, 0]] = 2.0 * x[0];
            d
        });
    let hamiltonian = costs::randers_dual_from_inverse(
        2,
        g_inv.clone(),
        CovectorField::constant(2, vec![eps, 0.0]),
        ScalarField::constant(2, eps * eps),
    );
    let p0 = vec![1.0 + eps, a];

    let oracle = if eps == 0.0 {
        ClosedFormGeodesic::time_parameterized(vec![0, 1], move |t| {
            vec![
                (a * t).sin() / a,
                t / (2.0 * a) - (2.0 * a * t).sin() / (4.0 * a * a),
            ]
        })
    } else {
        let d = rot_denom(eps, 1.0, 0.0, big_a);
        let c32 = (1.0 - eps * eps).powf(1.5);
        let time = move |th: f64| {
            big_a * c32 / a * numeric::integrate(|u| 1.0 / (d(u) * d(u)), 0.0, th, QUAD_TOL)
        };
        let state = move |th: f64| {
            let x1 = (1.0 - eps * eps).sqrt() * (big_a * th).sin() / (a * d(th));
            let x2 = big_a * c32 / a
                * numeric::integrate(
                    |u| {
                        let s = (big_a * u).sin();
                        s * s / (d(u) * d(u) * d(u))
                    },
                    0.0,
                    th,
                    QUAD_TOL,
                );
            vec![x1, x2]
        };
        ClosedFormGeodesic::theta_parameterized(vec![0, 1], state, time, 8.0 * std::f64::consts::PI)
    };

    let distribution = AnchorField::new(2, 2, |x: &[f64]| array![[1.0, 0.0], [0.0, x[0]]]);

    Ok(Scenario {
        name: "grushin".into(),
        algebroid,
        hamiltonian,
        params: p.values,
        default_initial: PhaseState::new(vec![0.0, 0.0], p0),
        default_t_end: std::f64::consts::FRAC_PI_2,
        compare_tolerance: if eps == 0.0 { 1e-6 } else { 1e-4 },
        compare_relative: false,
        oracle: Some(oracle),
        distribution: Some(distribution),
        diag_metric: g_inv.inverse(),
        diag_metric_inv: g_inv,
        diag_state: (vec![1.0, 0.0], vec![0.8, 0.5]),
    })
}

fn build_grushin3d(overrides: &BTreeMap<String, f64>) -> Result<Scenario> {
    let p = Params::resolve(
        "grushin3d",
        &[("epsilon", 0.0), ("a", 1.0), ("b", 0.0)],
        overrides,
    )?;
    let eps = p.get("epsilon");
    let a = p.get("a");
    let b = p.get("b");
    check_epsilon(eps)?;
    check_unit_circle(a, b)?;

    let algebroid = LieAlgebroid::new(
        AnchorField::identity(3),
        StructureField::zero(3, 3),
        SampleBox::centered(3, 2.0),
    )?;
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
    let hamiltonian = costs::randers_dual_from_inverse(
        3,
        g_inv.clone(),
        CovectorField::constant(3, vec![eps, 0.0, 0.0]),
        ScalarField::constant(3, eps * eps),
    );
    let p0 = vec![1.0 + eps, a, b];

    // Only the first base component has a trustworthy closed form; the
    // remaining displays are excluded and covered by energy conservation
    // and the equations of motion instead.
    let alpha = (a * a + b * b).sqrt();
    let oracle = if eps == 0.0 {
        Some(ClosedFormGeodesic::time_parameterized(vec![0], move |t| {
            vec![(alpha * t).sin() / alpha, 0.0, 0.0]
        }))
    } else {
        None
    };

    let distribution = AnchorField::new(3, 3, |x: &[f64]| {
        array![[1.0, 0.0, 0.0], [0.0, x[0], 0.0], [0.0, 0.0, x[0]]]
    });

    Ok(Scenario {
        name: "grushin3d".into(),
        algebroid,
        hamiltonian,
        params: p.values,
        default_initial: PhaseState::new(vec![0.0; 3], p0),
        default_t_end: std::f64::consts::FRAC_PI_2,
        compare_tolerance: 1e-6,
        compare_relative: false,
        oracle,
        distribution: Some(distribution),
        diag_metric: g_inv.inverse(),
        diag_metric_inv: g_inv,
        diag_state: (vec![1.0, 0.0, 0.0], vec![0.7, 0.4, -0.5]),
    })
}

fn build_kropina(overrides: &BTreeMap<String, f64>) -> Result<Scenario> {
    let p = Params::resolve("kropina", &[("a", 1.0), ("A", 1.0)], overrides)?;
    let a = p.get("a");
    let big_a = p.get("A");
    check_positive("a", a)?;
    check_positive("A", big_a)?;

    let algebroid = LieAlgebroid::new(
        AnchorField::identity(2),
        StructureField::zero(2, 2),
        SampleBox::centered(2, 2.0),
    )?;
    let g_inv = MetricField::new(2, 2, |x: &[f64]| array![[1.0, 0.0], [0.0, x[0] * x[0]]])
        .with_partials(|x: &[f64]| {
            let mut d = Array3::zeros((2, 2, 2));
            d[[1, 1, 0]] = 2.0 * x[0];
            d
        });
    let hamiltonian =
        costs::kropina_dual_from_inverse(2, &g_inv, CovectorField::constant(2, vec![1.0, 0.0]));
    let p0 = vec![2.0, a];

    // theta-parameterized closed form with
    // t(theta) = (sin 2A theta + 2A theta)/a, strictly increasing on
    // [0, pi/(2A)); the trajectory meets the singular momentum set at the
    // right endpoint.
    let time = move |th: f64| ((2.0 * big_a * th).sin() + 2.0 * big_a * th) / a;
    let state = move |th: f64| {
        vec![
            (2.0 * big_a * th).sin() / a,
            big_a * th / (a * a) - (4.0 * big_a * th).sin() / (4.0 * a * a),
        ]
    };
    let oracle = ClosedFormGeodesic::theta_parameterized(
        vec![0, 1],
        state,
        time,
        std::f64::consts::FRAC_PI_2 / big_a,
    );

    let distribution = AnchorField::new(2, 2, |x: &[f64]| array![[1.0, 0.0], [0.0, x[0]]]);

    Ok(Scenario {
        name: "kropina".into(),
        algebroid,
        hamiltonian,
        params: p.values,
        default_initial: PhaseState::new(vec![0.0, 0.0], p0),
        default_t_end: 1.0 + std::f64::consts::FRAC_PI_2,
        compare_tolerance: 1e-6,
        compare_relative: false,
        oracle: Some(oracle),
        distribution: Some(distribution),
        diag_metric: g_inv.inverse(),
        diag_metric_inv: g_inv,
        diag_state: (vec![1.0, 0.0], vec![0.9, 0.3]),
    })
}

/// Assemble a registered scenario with parameter overrides.
pub fn build(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Scenario> {
    match name {
        "heisenberg" => build_heisenberg(overrides),
        "grushin" => build_grushin(overrides),
        "holonomic" => build_holonomic(overrides),
        "nonholonomic" => build_nonholonomic(overrides),
        "grushin3d" => build_grushin3d(overrides),
        "kropina" => build_kropina(overrides),
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebroid::AXIOM_TOL;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn no_overrides() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    fn with(entries: &[(&str, f64)]) -> BTreeMap<String, f64> {
        entries.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn every_scenario_passes_axiom_validation() {
        for name in names() {
            let s = build(name, &no_overrides()).unwrap();
            let rep = s.algebroid.validate(42, 64);
            assert!(rep.passes(AXIOM_TOL), "{name}: {rep:?}");
        }
    }

    #[test]
    fn every_default_initial_sits_on_the_half_level() {
        for name in names() {
            let s = build(name, &no_overrides()).unwrap();
            let h = s.system().energy(&s.default_initial).unwrap();
            assert_abs_diff_eq!(h, 0.5, epsilon = 1e-12);
            // normalization is a no-op there
            let ns = s.normalized_initial().unwrap();
            for (av, bv) in ns.mu.iter().zip(&s.default_initial.mu) {
                assert_abs_diff_eq!(av, bv, epsilon = 1e-12);
            }
        }
        // also at eps > 0 for the Randers scenarios
        for name in ["heisenberg", "grushin", "holonomic"] {
            let s = build(name, &with(&[("epsilon", 0.3)])).unwrap();
            let h = s.system().energy(&s.default_initial).unwrap();
            assert_abs_diff_eq!(h, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn unknown_scenario_and_parameters_are_rejected() {
        assert!(matches!(
            build("torus", &no_overrides()),
            Err(Error::UnknownScenario(_))
        ));
        assert!(matches!(
            build("heisenberg", &with(&[("gamma", 1.0)])),
            Err(Error::UnknownParameter(..))
        ));
        assert!(matches!(
            build("heisenberg", &with(&[("epsilon", 1.5)])),
            Err(Error::ParameterDomain(_))
        ));
        assert!(matches!(
            build("heisenberg", &with(&[("a", 0.5), ("b", 0.5)])),
            Err(Error::ParameterDomain(_))
        ));
        assert!(matches!(
            build("grushin", &with(&[("a", 0.0)])),
            Err(Error::ParameterDomain(_))
        ));
    }

    #[test]
    fn heisenberg_oracle_closed_form_values() {
        let s = build("heisenberg", &no_overrides()).unwrap();
        let x = s.oracle_state(PI).unwrap();
        assert_abs_diff_eq!(x[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[2], PI / 2.0, epsilon = 1e-12);
        // t = 0 returns the start point
        let x0 = s.oracle_state(0.0).unwrap();
        for c in x0 {
            assert_abs_diff_eq!(c, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn kropina_oracle_closed_form_values() {
        let s = build("kropina", &no_overrides()).unwrap();
        // theta = pi/4 corresponds to t = 1 + pi/2
        let x = s.oracle_state(1.0 + FRAC_PI_2).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(x[1], std::f64::consts::FRAC_PI_4, epsilon = 1e-10);
        let x0 = s.oracle_state(0.0).unwrap();
        assert_abs_diff_eq!(x0[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x0[1], 0.0, epsilon = 1e-14);
        // outside the monotone domain
        assert!(matches!(
            s.oracle_state(10.0),
            Err(Error::OutsideOracleDomain { .. })
        ));
    }

    #[test]
    fn theta_oracles_are_strictly_increasing_in_time() {
        for (name, overrides) in [
            ("heisenberg", with(&[("epsilon", 0.3)])),
            ("grushin", with(&[("epsilon", 0.3)])),
            ("holonomic", with(&[("epsilon", 0.3)])),
            ("kropina", no_overrides()),
        ] {
            let s = build(name, &overrides).unwrap();
            let oracle = s.oracle().unwrap();
            assert_eq!(oracle.parameterization(), Parameterization::Theta);
            let (lo, hi) = oracle.theta_domain();
            // probe a 1e-3 grid over a representative prefix of the domain
            let span = (hi - lo).min(4.0);
            let steps = (span / 1e-3) as usize;
            let mut prev = oracle.time_of_theta(lo).unwrap();
            for k in 1..=steps {
                let th = lo + k as f64 * 1e-3;
                let t = oracle.time_of_theta(th).unwrap();
                assert!(t > prev, "{name}: t(theta) not increasing at theta = {th}");
                prev = t;
            }
        }
    }

    #[test]
    fn compare_heisenberg_benchmark() {
        let s = build("heisenberg", &no_overrides()).unwrap();
        let t = s.run(PI, 1e-3).unwrap();
        let rep = compare(&s, &t).unwrap();
        assert!(rep.max_abs_err <= 1e-6, "{rep:?}");
        assert!(rep.energy_drift <= 1e-8, "{rep:?}");
    }

    #[test]
    fn compare_is_deterministic() {
        let s = build("grushin", &no_overrides()).unwrap();
        let t = s.run(FRAC_PI_2, 1e-3).unwrap();
        let r1 = compare(&s, &t).unwrap();
        let r2 = compare(&s, &t).unwrap();
        assert_eq!(r1.max_abs_err.to_bits(), r2.max_abs_err.to_bits());
        assert_eq!(r1.max_rel_err.to_bits(), r2.max_rel_err.to_bits());
    }

    #[test]
    fn compare_nonholonomic_quadratic_case() {
        let s = build(
            "nonholonomic",
            &with(&[("a", 0.6), ("b", 0.8), ("lambda", 1.3)]),
        )
        .unwrap();
        let t = s.run(2.0, 1e-3).unwrap();
        let rep = compare(&s, &t).unwrap();
        assert!(rep.max_abs_err <= 1e-6, "{rep:?}");
        // no closed form at eps > 0
        let se = build("nonholonomic", &with(&[("epsilon", 0.2)])).unwrap();
        assert!(matches!(se.oracle_state(1.0), Err(Error::NoOracle)));
    }

    #[test]
    fn compare_grushin_randers_case() {
        let s = build("grushin", &with(&[("epsilon", 0.3)])).unwrap();
        let t = s.run(FRAC_PI_2, 1e-3).unwrap();
        let rep = compare(&s, &t).unwrap();
        assert!(rep.max_abs_err <= 1e-4, "{rep:?}");
        assert!(rep.energy_drift <= 1e-8, "{rep:?}");
    }

    #[test]
    fn connection_report_runs_on_every_scenario() {
        for name in names() {
            let s = build(name, &no_overrides()).unwrap();
            let (x, y) = s.diagnostic_state();
            let rep = s.connection_report(&x, &y).unwrap();
            assert!(
                rep.dual_symmetry_residual <= 1e-8,
                "{name}: dual symmetry {}",
                rep.dual_symmetry_residual
            );
            // torsion of the canonical connection vanishes
            assert!(
                numeric::max_abs(&rep.torsion) <= 1e-8,
                "{name}: torsion {}",
                numeric::max_abs(&rep.torsion)
            );
        }
    }

    #[test]
    fn holonomic_connection_closed_form() {
        let s = build("holonomic", &no_overrides()).unwrap();
        let rep = s.connection_report(&[1.0, 1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(rep.n_lagrangian[[0, 0]], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rep.n_lagrangian[[0, 1]], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rep.n_lagrangian[[1, 0]], -1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rep.n_lagrangian[[1, 1]], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn grushin_distribution_pullback_matches_hand_product() {
        let s = build("grushin", &no_overrides()).unwrap();
        let dist = s.distribution.as_ref().unwrap();
        let sigma = dist.eval(&[3.0, 0.0]);
        let mu: Vec<f64> = (0..2)
            .map(|al| (0..2).map(|i| sigma[[i, al]] * [2.0, 5.0][i]).sum())
            .collect();
        assert_eq!(mu, vec![2.0, 15.0]);
    }

    #[test]
    fn grushin3d_energy_and_x_component() {
        let s = build("grushin3d", &no_overrides()).unwrap();
        let t = s.run(FRAC_PI_2, 1e-3).unwrap();
        let rep = compare(&s, &t).unwrap();
        assert!(rep.max_abs_err <= 1e-6, "{rep:?}");
        assert!(rep.energy_drift <= 1e-8, "{rep:?}");
    }

    #[test]
    fn energy_is_conserved_on_every_builtin_scenario() {
        for name in names() {
            let s = build(name, &no_overrides()).unwrap();
            let t = s.run(s.default_t_end, 1e-3).unwrap();
            assert!(
                t.energy_drift() <= 1e-8,
                "{name}: drift {} over reference horizon",
                t.energy_drift()
            );
        }
    }

    #[test]
    fn dual_bianchi_identity_on_every_builtin_scenario() {
        for name in names() {
            let s = build(name, &no_overrides()).unwrap();
            let h = s.diagnostic_hamiltonian();
            let dc = crate::connections::dual_connection(&s.algebroid, &h);
            let (q, mu) = s.diagnostic_state();
            let r = crate::connections::dual_curvature(&s.algebroid, &dc, &q, &mu).unwrap();
            let b = crate::connections::bianchi_residual(&r);
            assert!(b <= 1e-8, "{name}: bianchi residual {b}");
        }
    }

    #[test]
    fn scenarios_integrate_concurrently() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Scenario>();
        assert_send_sync::<crate::flow::HamiltonianSystem>();
        assert_send_sync::<Trajectory>();

        let s = build("heisenberg", &no_overrides()).unwrap();
        let sys = std::sync::Arc::new(s.system());
        let s0 = s.default_initial.clone();
        let handles: Vec<_> = (1..=4)
            .map(|k| {
                let sys = sys.clone();
                let s0 = s0.clone();
                std::thread::spawn(move || {
                    flow::integrate(&sys, &s0, 0.25 * k as f64, 1e-3)
                        .unwrap()
                        .endpoint()
                        .x[0]
                })
            })
            .collect();
        let ends: Vec<f64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        // the k-th thread integrates to t = 0.25 k; endpoints are sin(t)
        for (k, x) in ends.iter().enumerate() {
            let t = 0.25 * (k + 1) as f64;
            assert_abs_diff_eq!(*x, t.sin(), epsilon = 1e-9);
        }
    }
}
