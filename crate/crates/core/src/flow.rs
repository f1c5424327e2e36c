//! The Pontryagin/Hamilton vector field on a Lie algebroid and its
//! fixed-step RK4 integration.
//!
//! The critical trajectories of a driftless control problem with a regular
//! dual Hamiltonian `H(x, mu)` solve
//!
//! ```text
//! dx[i]/dt  = sigma[i][alpha] dH/dmu[alpha]
//! dmu[a]/dt = -sigma[i][a] dH/dx[i] - mu[g] L[g][a][b] dH/dmu[b]
//! ```
//!
//! which reduce to the classical Hamilton equations when the anchor is the
//! identity and the structure functions vanish. `H` is a first integral, so
//! the recorded energies double as an integrator diagnostic.

use crate::algebroid::LieAlgebroid;
use crate::costs::DualHamiltonian;
use crate::error::{Error, Result};

/// Abort integration when any state component exceeds this magnitude.
pub const DIVERGENCE_GUARD: f64 = 1e12;
/// Hard cap on stored samples.
pub const MAX_SAMPLES: usize = 10_000_000;

/// A point of the dual phase space: base point `x` and fiber-dual covector
/// `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
}

impl PhaseState {
    pub fn new(x: Vec<f64>, mu: Vec<f64>) -> Self {
        PhaseState { x, mu }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.mu).all(|v| v.is_finite())
    }
}

/// A Lie algebroid together with a dual Hamiltonian over it.
#[derive(Clone)]
pub struct HamiltonianSystem {
    pub algebroid: LieAlgebroid,
    pub hamiltonian: DualHamiltonian,
}

impl HamiltonianSystem {
    pub fn new(algebroid: LieAlgebroid, hamiltonian: DualHamiltonian) -> Result<Self> {
        if hamiltonian.m() != algebroid.m() {
            return Err(Error::DimensionMismatch {
                context: "Hamiltonian mu-arity vs fiber rank",
                expected: algebroid.m(),
                got: hamiltonian.m(),
            });
        }
        if hamiltonian.n() != algebroid.n() {
            return Err(Error::DimensionMismatch {
                context: "Hamiltonian base arity vs base dimension",
                expected: algebroid.n(),
                got: hamiltonian.n(),
            });
        }
        Ok(HamiltonianSystem {
            algebroid,
            hamiltonian,
        })
    }

    /// The PMP/Hamilton field at `s`: `(dx, dmu)`.
    pub fn pmp_vector_field(&self, s: &PhaseState) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.algebroid.n();
        let m = self.algebroid.m();
        let sigma = self.algebroid.anchor.eval(&s.x);
        let l = self.algebroid.structure.eval(&s.x);
        let dh_mu = self.hamiltonian.grad_mu(&s.x, &s.mu)?;
        let dh_x = self.hamiltonian.grad_x(&s.x, &s.mu)?;
        let dx: Vec<f64> = (0..n)
            .map(|i| (0..m).map(|a| sigma[[i, a]] * dh_mu[a]).sum())
            .collect();
        let dmu: Vec<f64> = (0..m)
            .map(|a| {
                let mut acc = 0.0;
                for i in 0..n {
                    acc -= sigma[[i, a]] * dh_x[i];
                }
                for g in 0..m {
                    for b in 0..m {
                        acc -= s.mu[g] * l[[g, a, b]] * dh_mu[b];
                    }
                }
                acc
            })
            .collect();
        Ok((dx, dmu))
    }

    pub fn energy(&self, s: &PhaseState) -> Result<f64> {
        self.hamiltonian.eval(&s.x, &s.mu)
    }
}

/// Time-stamped phase states with the Hamiltonian recorded per sample.
/// Immutable after creation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<PhaseState>,
    energies: Vec<f64>,
}

impl Trajectory {
    pub(crate) fn from_raw(times: Vec<f64>, states: Vec<PhaseState>, energies: Vec<f64>) -> Self {
        Trajectory::new(times, states, energies)
    }

    fn new(times: Vec<f64>, states: Vec<PhaseState>, energies: Vec<f64>) -> Self {
        debug_assert_eq!(times.len(), states.len());
        debug_assert_eq!(times.len(), energies.len());
        debug_assert!(times.windows(2).all(|w| w[1] > w[0]));
        Trajectory {
            times,
            states,
            energies,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[PhaseState] {
        &self.states
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn endpoint(&self) -> &PhaseState {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("trajectory is never empty")
    }

    /// Max-abs drift of the recorded Hamiltonian from its initial value.
    pub fn energy_drift(&self) -> f64 {
        let h0 = self.energies[0];
        self.energies
            .iter()
            .fold(0.0_f64, |acc, h| acc.max((h - h0).abs()))
    }
}

/// Largest |H(t) - H(0)| along the trajectory.
pub fn energy_drift(t: &Trajectory) -> f64 {
    t.energy_drift()
}

fn rk4_step<F>(deriv: &F, y: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let k1 = deriv(y)?;
    let mid1: Vec<f64> = y.iter().zip(&k1).map(|(v, k)| v + 0.5 * dt * k).collect();
    let k2 = deriv(&mid1)?;
    let mid2: Vec<f64> = y.iter().zip(&k2).map(|(v, k)| v + 0.5 * dt * k).collect();
    let k3 = deriv(&mid2)?;
    let end: Vec<f64> = y.iter().zip(&k3).map(|(v, k)| v + dt * k).collect();
    let k4 = deriv(&end)?;
    Ok(y.iter()
        .enumerate()
        .map(|(i, v)| v + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Classical fixed-step RK4 over a flat state vector. Samples at
/// `0, dt, 2 dt, ...`; the final step is shortened to land exactly on
/// `t_end`. Every step is stored.
pub(crate) fn rk4_path<F>(
    deriv: F,
    y0: Vec<f64>,
    t_end: f64,
    dt: f64,
) -> std::result::Result<(Vec<f64>, Vec<Vec<f64>>), (f64, String, Vec<f64>, Vec<Vec<f64>>)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let approx_steps = (t_end / dt).ceil() as usize + 1;
    if approx_steps > MAX_SAMPLES {
        return Err((
            0.0,
            format!("sample cap {MAX_SAMPLES} exceeded"),
            vec![0.0],
            vec![y0],
        ));
    }
    let mut times = Vec::with_capacity(approx_steps + 1);
    let mut path = Vec::with_capacity(approx_steps + 1);
    times.push(0.0);
    path.push(y0.clone());
    let mut t = 0.0;
    let mut y = y0;
    let mut k = 0usize;
    while t < t_end {
        k += 1;
        // nominal grid point, shortened on the last step
        let t_next = (k as f64 * dt).min(t_end);
        let step = t_next - t;
        match rk4_step(&deriv, &y, step) {
            Ok(next) => {
                if next
                    .iter()
                    .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_GUARD)
                {
                    return Err((t, "state exceeded divergence guard".into(), times, path));
                }
                y = next;
            }
            Err(e) => return Err((t, e.to_string(), times, path)),
        }
        t = t_next;
        times.push(t);
        path.push(y.clone());
    }
    Ok((times, path))
}

fn pack(s: &PhaseState) -> Vec<f64> {
    let mut v = s.x.clone();
    v.extend_from_slice(&s.mu);
    v
}

fn unpack(v: &[f64], n: usize) -> PhaseState {
    PhaseState::new(v[..n].to_vec(), v[n..].to_vec())
}

fn integrate_field(
    sys: &HamiltonianSystem,
    s0: &PhaseState,
    t_end: f64,
    dt: f64,
    sign: f64,
) -> Result<Trajectory> {
    if !(t_end > 0.0) || !(dt > 0.0) || dt > t_end {
        return Err(Error::Config(format!(
            "need 0 < dt <= t_end (got dt = {dt}, t_end = {t_end})"
        )));
    }
    if !s0.is_finite() {
        return Err(Error::Config("non-finite initial state".into()));
    }
    let n = sys.algebroid.n();
    let deriv = |v: &[f64]| -> Result<Vec<f64>> {
        let s = unpack(v, n);
        let (dx, dmu) = sys.pmp_vector_field(&s)?;
        let mut out = dx;
        out.extend_from_slice(&dmu);
        if sign < 0.0 {
            for c in &mut out {
                *c = -*c;
            }
        }
        Ok(out)
    };
    let build = |times: Vec<f64>, raw: Vec<Vec<f64>>| -> Result<Trajectory> {
        let states: Vec<PhaseState> = raw.iter().map(|v| unpack(v, n)).collect();
        let mut energies = Vec::with_capacity(states.len());
        for s in &states {
            energies.push(sys.energy(s).unwrap_or(f64::NAN));
        }
        Ok(Trajectory::new(times, states, energies))
    };
    match rk4_path(deriv, pack(s0), t_end, dt) {
        Ok((times, raw)) => build(times, raw),
        Err((t_last, cause, times, raw)) => {
            let partial = build(times, raw)?;
            Err(Error::IntegrationDiverged {
                t_last,
                cause,
                partial: Box::new(partial),
            })
        }
    }
}

/// Integrate the PMP field from `s0` for `t_end` with fixed step `dt`.
pub fn integrate(
    sys: &HamiltonianSystem,
    s0: &PhaseState,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    integrate_field(sys, s0, t_end, dt, 1.0)
}

/// Integrate the negated field (one code path for time reversal).
pub fn integrate_backward(
    sys: &HamiltonianSystem,
    s0: &PhaseState,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    integrate_field(sys, s0, t_end, dt, -1.0)
}

/// Scale the covector so that `H = 1/2` exactly, using 2-homogeneity:
/// `mu -> mu / sqrt(2 H)`. The base point is unchanged.
pub fn normalize_to_arclength(sys: &HamiltonianSystem, s0: &PhaseState) -> Result<PhaseState> {
    let h = sys.energy(s0)?;
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Normalization { energy: h });
    }
    let c = 1.0 / (2.0 * h).sqrt();
    Ok(PhaseState::new(
        s0.x.clone(),
        s0.mu.iter().map(|&v| c * v).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebroid::{single_bracket, AnchorField, LieAlgebroid, StructureField};
    use crate::costs::{self, CovectorField, MetricField};
    use crate::numeric::SampleBox;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn free_system(n: usize) -> HamiltonianSystem {
        let a = LieAlgebroid::new(
            AnchorField::identity(n),
            StructureField::zero(n, n),
            SampleBox::centered(n, 2.0),
        )
        .unwrap();
        let h = costs::quadratic_dual(n, &MetricField::identity(n, n));
        HamiltonianSystem::new(a, h).unwrap()
    }

    fn heisenberg_system(eps: f64) -> HamiltonianSystem {
        let anchor = AnchorField::new(3, 3, |x: &[f64]| {
            array![
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [-x[1] / 2.0, x[0] / 2.0, 1.0]
            ]
        });
        let a = LieAlgebroid::new(
            anchor,
            single_bracket(3, 3, 2, 0, 1, 1.0),
            SampleBox::centered(3, 2.0),
        )
        .unwrap();
        let h2 = costs::randers_dual(
            3,
            &MetricField::identity(3, 2),
            &CovectorField::constant(3, vec![eps, 0.0]),
        );
        HamiltonianSystem::new(a, h2.lift(3)).unwrap()
    }

    #[test]
    fn heisenberg_field_at_reference_state() {
        let sys = heisenberg_system(0.0);
        let s = PhaseState::new(vec![0.0; 3], vec![1.0, 0.0, 1.0]);
        let (dx, dmu) = sys.pmp_vector_field(&s).unwrap();
        assert_abs_diff_eq!(dx[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dx[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dx[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dmu[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dmu[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dmu[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_momentum_is_stationary_for_quadratic() {
        let sys = free_system(2);
        let (dx, dmu) = sys
            .pmp_vector_field(&PhaseState::new(vec![0.3, -0.7], vec![0.0, 0.0]))
            .unwrap();
        assert!(dx.iter().chain(&dmu).all(|&v| v == 0.0));
    }

    #[test]
    fn reduces_to_classical_hamilton_equations() {
        let sys = free_system(2);
        let s = PhaseState::new(vec![5.0, -2.0], vec![0.3, 0.8]);
        let (dx, dmu) = sys.pmp_vector_field(&s).unwrap();
        assert_abs_diff_eq!(dx[0], 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(dx[1], 0.8, epsilon = 1e-14);
        assert_abs_diff_eq!(dmu[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(dmu[1], 0.0, epsilon = 1e-14);

        // x-dependent Hamiltonian with identity anchor and vanishing
        // bracket: the field must equal (dH/dp, -dH/dx) componentwise
        let a = LieAlgebroid::new(
            AnchorField::identity(2),
            StructureField::zero(2, 2),
            SampleBox::centered(2, 2.0),
        )
        .unwrap();
        let g_inv = MetricField::new(2, 2, |x: &[f64]| {
            array![[1.0 + x[1] * x[1], 0.2], [0.2, 2.0 + x[0] * x[0]]]
        })
        .with_partials(|x: &[f64]| {
            let mut d = ndarray::Array3::zeros((2, 2, 2));
            d[[0, 0, 1]] = 2.0 * x[1];
            d[[1, 1, 0]] = 2.0 * x[0];
            d
        });
        let h = costs::quadratic_dual_from_inverse(2, &g_inv);
        let sys = HamiltonianSystem::new(a, h).unwrap();
        for (x, mu) in [
            ([0.4, -1.1], [0.9, 0.3]),
            ([-0.7, 0.2], [-0.5, 1.4]),
            ([1.3, 0.8], [0.1, -0.9]),
        ] {
            let s = PhaseState::new(x.to_vec(), mu.to_vec());
            let (dx, dmu) = sys.pmp_vector_field(&s).unwrap();
            let want_dx = sys.hamiltonian.grad_mu(&x, &mu).unwrap();
            let want_dmu = sys.hamiltonian.grad_x(&x, &mu).unwrap();
            for k in 0..2 {
                assert_abs_diff_eq!(dx[k], want_dx[k], epsilon = 1e-14);
                assert_abs_diff_eq!(dmu[k], -want_dmu[k], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn heisenberg_benchmark_endpoint() {
        let sys = heisenberg_system(0.0);
        let s0 = PhaseState::new(vec![0.0; 3], vec![1.0, 0.0, 1.0]);
        let t = integrate(&sys, &s0, std::f64::consts::PI, 1e-3).unwrap();
        let end = t.endpoint();
        let pi = std::f64::consts::PI;
        // closed form: x = sin t, y = 1 - cos t, z = (t - sin t) / 2
        assert_abs_diff_eq!(end.x[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(end.x[1], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(end.x[2], pi / 2.0, epsilon = 1e-6);
        assert!(t.energy_drift() <= 1e-8, "drift {}", t.energy_drift());
    }

    #[test]
    fn grushin_benchmark_endpoint() {
        // T*M model: identity anchor, H from the Grushin-pulled-back dual
        let a = LieAlgebroid::new(
            AnchorField::identity(2),
            StructureField::zero(2, 2),
            SampleBox::centered(2, 2.0),
        )
        .unwrap();
        let g_inv = MetricField::new(2, 2, |x: &[f64]| array![[1.0, 0.0], [0.0, x[0] * x[0]]])
            .with_partials(|x: &[f64]| {
                let mut d = ndarray::Array3::zeros((2, 2, 2));
                d[[1, 1, 0]] = 2.0 * x[0];
                d
            });
        let h = costs::quadratic_dual_from_inverse(2, &g_inv);
        let sys = HamiltonianSystem::new(a, h).unwrap();
        let s0 = PhaseState::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let t = integrate(&sys, &s0, std::f64::consts::FRAC_PI_2, 1e-3).unwrap();
        let end = t.endpoint();
        assert_abs_diff_eq!(end.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(end.x[1], std::f64::consts::FRAC_PI_4, epsilon = 1e-6);
    }

    #[test]
    fn one_step_is_exact_for_linear_field() {
        // H = c . mu gives a constant field; RK4 reproduces the exact
        // translation in a single step.
        let a = LieAlgebroid::new(
            AnchorField::identity(2),
            StructureField::zero(2, 2),
            SampleBox::centered(2, 2.0),
        )
        .unwrap();
        let h = costs::dual_from_closures(
            2,
            2,
            |_x, mu| Ok(0.7 * mu[0] - 0.2 * mu[1]),
            |_x, _mu| Ok(vec![0.7, -0.2]),
        );
        let sys = HamiltonianSystem::new(a, h).unwrap();
        let s0 = PhaseState::new(vec![1.0, 2.0], vec![0.5, 0.5]);
        let dt = 0.25;
        let t = integrate(&sys, &s0, dt, dt).unwrap();
        assert_eq!(t.len(), 2);
        assert_abs_diff_eq!(t.endpoint().x[0], 1.0 + 0.7 * dt, epsilon = 1e-15);
        assert_abs_diff_eq!(t.endpoint().x[1], 2.0 - 0.2 * dt, epsilon = 1e-15);
    }

    #[test]
    fn final_partial_step_lands_on_t_end() {
        let sys = free_system(2);
        let s0 = PhaseState::new(vec![0.0, 0.0], vec![1.0, 0.0]);
        let t = integrate(&sys, &s0, 0.35, 0.1).unwrap();
        assert_abs_diff_eq!(t.end_time(), 0.35, epsilon = 1e-15);
        assert_eq!(t.len(), 5); // 0, .1, .2, .3, .35
        assert_abs_diff_eq!(t.endpoint().x[0], 0.35, epsilon = 1e-14);
    }

    #[test]
    fn reversibility_on_heisenberg() {
        let sys = heisenberg_system(0.0);
        let s0 = PhaseState::new(vec![0.0; 3], vec![1.0, 0.0, 1.0]);
        let fwd = integrate(&sys, &s0, 1.0, 1e-3).unwrap();
        let back = integrate_backward(&sys, fwd.endpoint(), 1.0, 1e-3).unwrap();
        let home = back.endpoint();
        for k in 0..3 {
            assert_abs_diff_eq!(home.x[k], s0.x[k], epsilon = 1e-7);
            assert_abs_diff_eq!(home.mu[k], s0.mu[k], epsilon = 1e-7);
        }
    }

    #[test]
    fn energy_drift_of_singleton_is_zero() {
        let sys = free_system(2);
        let s0 = PhaseState::new(vec![0.0, 0.0], vec![1.0, 0.0]);
        let t = integrate(&sys, &s0, 1e-3, 1e-3).unwrap();
        let single = Trajectory::new(
            vec![0.0],
            vec![t.states()[0].clone()],
            vec![t.energies()[0]],
        );
        assert_eq!(single.energy_drift(), 0.0);
    }

    #[test]
    fn normalization_reaches_half_level() {
        let sys = free_system(2);
        // H = |mu|^2 / 2 = 12.5 at mu = (3, 4); normalized to mu / 5
        let s = PhaseState::new(vec![0.0, 0.0], vec![3.0, 4.0]);
        let ns = normalize_to_arclength(&sys, &s).unwrap();
        assert_abs_diff_eq!(sys.energy(&ns).unwrap(), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(ns.mu[0], 0.6, epsilon = 1e-14);
        assert_abs_diff_eq!(ns.mu[1], 0.8, epsilon = 1e-14);

        // already at the 1/2 level: unchanged
        let heis = heisenberg_system(0.0);
        let s0 = PhaseState::new(vec![0.0; 3], vec![1.0, 0.0, 1.0]);
        let ns = normalize_to_arclength(&heis, &s0).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(ns.mu[k], s0.mu[k], epsilon = 1e-14);
        }

        // H = 2 scales by 1/2
        let s = PhaseState::new(vec![0.0, 0.0], vec![2.0, 0.0]);
        let ns = normalize_to_arclength(&sys, &s).unwrap();
        assert_abs_diff_eq!(ns.mu[0], 1.0, epsilon = 1e-14);

        let zero = PhaseState::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!(matches!(
            normalize_to_arclength(&sys, &zero),
            Err(Error::Normalization { .. })
        ));
    }

    #[test]
    fn divergence_guard_reports_partial_trajectory() {
        // dmu/dt = +mu^3-ish blowup via a hand-built H with runaway gradient
        let a = LieAlgebroid::new(
            AnchorField::identity(1),
            StructureField::zero(1, 1),
            SampleBox::centered(1, 2.0),
        )
        .unwrap();
        let h = costs::dual_from_closures(
            1,
            1,
            |x, mu| Ok(mu[0] * mu[0] * (1.0 + x[0] * x[0])),
            |x, mu| Ok(vec![2.0 * mu[0] * (1.0 + x[0] * x[0])]),
        );
        let sys = HamiltonianSystem::new(a, h).unwrap();
        let s0 = PhaseState::new(vec![1.0], vec![1.0]);
        match integrate(&sys, &s0, 50.0, 0.5) {
            Err(Error::IntegrationDiverged {
                t_last, partial, ..
            }) => {
                assert!(t_last < 50.0);
                assert!(!partial.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn sample_cap_is_enforced() {
        let sys = free_system(2);
        let s0 = PhaseState::new(vec![0.0, 0.0], vec![1.0, 0.0]);
        let err = integrate(&sys, &s0, 1e5, 1e-3).unwrap_err();
        assert!(err.to_string().contains("sample cap"), "{err}");
    }

    #[test]
    fn fourth_order_convergence_on_heisenberg() {
        let sys = heisenberg_system(0.0);
        let s0 = PhaseState::new(vec![0.0; 3], vec![1.0, 0.0, 1.0]);
        let pi = std::f64::consts::PI;
        let closed = [0.0, 2.0, pi / 2.0];
        let err = |dt: f64| {
            let t = integrate(&sys, &s0, pi, dt).unwrap();
            t.endpoint()
                .x
                .iter()
                .zip(&closed)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max)
        };
        let ratio = err(2e-3) / err(1e-3);
        assert!(
            (12.0..=20.0).contains(&ratio),
            "convergence ratio {ratio} outside [12, 20]"
        );
    }
}
