//! Trajectory and report serialization: CSV with lossless float formatting
//! and JSON shaped for plot tooling.

use algeo::flow::Trajectory;
use algeo::scenarios::{ConnectionReport, Scenario};
use ndarray_like::{array2_rows, array3_rows};
use serde_json::json;

/// 17 significant digits: lossless round-trip for f64.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn vector_text(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|c| format!("{c:.9}")).collect();
    format!("({})", parts.join(", "))
}

/// Header `t,x1..xn,mu1..mum,H`, one row per integrator step; a trailing
/// `# TRUNCATED` marker flags aborted runs.
pub fn trajectory_csv(scenario: &Scenario, traj: &Trajectory, truncated: bool) -> String {
    let n = scenario.algebroid.n();
    let m = scenario.algebroid.m();
    let mut out = String::new();
    out.push('t');
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    for a in 1..=m {
        out.push_str(&format!(",mu{a}"));
    }
    out.push_str(",H\n");
    for ((t, state), h) in traj.times().iter().zip(traj.states()).zip(traj.energies()) {
        out.push_str(&fmt(*t));
        for c in &state.x {
            out.push(',');
            out.push_str(&fmt(*c));
        }
        for c in &state.mu {
            out.push(',');
            out.push_str(&fmt(*c));
        }
        out.push(',');
        out.push_str(&fmt(*h));
        out.push('\n');
    }
    if truncated {
        out.push_str("# TRUNCATED\n");
    }
    out
}

/// Object with `meta` (scenario, params, dt), `columns`, `rows` and a
/// `truncated` flag.
pub fn trajectory_json(scenario: &Scenario, traj: &Trajectory, dt: f64, truncated: bool) -> String {
    let n = scenario.algebroid.n();
    let m = scenario.algebroid.m();
    let mut columns = vec!["t".to_string()];
    columns.extend((1..=n).map(|i| format!("x{i}")));
    columns.extend((1..=m).map(|a| format!("mu{a}")));
    columns.push("H".to_string());
    let rows: Vec<Vec<f64>> = traj
        .times()
        .iter()
        .zip(traj.states())
        .zip(traj.energies())
        .map(|((t, s), h)| {
            let mut row = vec![*t];
            row.extend_from_slice(&s.x);
            row.extend_from_slice(&s.mu);
            row.push(*h);
            row
        })
        .collect();
    let value = json!({
        "meta": {
            "scenario": scenario.name(),
            "params": scenario.params,
            "dt": dt,
        },
        "columns": columns,
        "rows": rows,
        "truncated": truncated,
    });
    let mut s = serde_json::to_string_pretty(&value).expect("trajectory serializes");
    s.push('\n');
    s
}

pub fn connection_text(
    scenario: &Scenario,
    x: &[f64],
    fiber: &[f64],
    report: &ConnectionReport,
) -> String {
    let mut out = String::new();
    out.push_str(&format!("scenario: {}\n", scenario.name()));
    out.push_str(&format!("point:    {}\n", vector_text(x)));
    out.push_str(&format!("fiber:    {}\n", vector_text(fiber)));
    out.push_str("connection N[b][a]:\n");
    for row in array2_rows(&report.n_lagrangian) {
        out.push_str(&format!("  {}\n", vector_text(&row)));
    }
    out.push_str("curvature R[g][a][b] (slices over g):\n");
    for (g, slice) in array3_rows(&report.curvature).into_iter().enumerate() {
        out.push_str(&format!("  g = {g}:\n"));
        for row in slice {
            out.push_str(&format!("    {}\n", vector_text(&row)));
        }
    }
    out.push_str("torsion t[g][a][b] (slices over g):\n");
    for (g, slice) in array3_rows(&report.torsion).into_iter().enumerate() {
        out.push_str(&format!("  g = {g}:\n"));
        for row in slice {
            out.push_str(&format!("    {}\n", vector_text(&row)));
        }
    }
    out.push_str("dual connection N[a][b]:\n");
    for row in array2_rows(&report.n_dual) {
        out.push_str(&format!("  {}\n", vector_text(&row)));
    }
    out.push_str(&format!(
        "dual symmetry residual: {:.3e}\n",
        report.dual_symmetry_residual
    ));
    out
}

pub fn connection_json(
    scenario: &Scenario,
    x: &[f64],
    fiber: &[f64],
    report: &ConnectionReport,
) -> String {
    let value = json!({
        "scenario": scenario.name(),
        "point": x,
        "fiber": fiber,
        "connection": array2_rows(&report.n_lagrangian),
        "curvature": array3_rows(&report.curvature),
        "torsion": array3_rows(&report.torsion),
        "dual_connection": array2_rows(&report.n_dual),
        "dual_symmetry_residual": report.dual_symmetry_residual,
    });
    serde_json::to_string_pretty(&value).expect("report serializes")
}

/// Nested-Vec views of ndarray results, local to the output layer.
mod ndarray_like {
    pub fn array2_rows(a: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
        (0..a.nrows())
            .map(|i| (0..a.ncols()).map(|j| a[[i, j]]).collect())
            .collect()
    }

    pub fn array3_rows(a: &ndarray::Array3<f64>) -> Vec<Vec<Vec<f64>>> {
        let (d0, d1, d2) = a.dim();
        (0..d0)
            .map(|i| {
                (0..d1)
                    .map(|j| (0..d2).map(|k| a[[i, j, k]]).collect())
                    .collect()
            })
            .collect()
    }
}
