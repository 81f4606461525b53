//! One function per subcommand. Each writes its tables into the output
//! directory and returns the numbers for the JSON report plus an optional gate.

use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use anyhow::{Context, Result};
use carleman_core::carleman::{
    draw_backward_ensemble, draw_ensemble, refinement_gate, solve_backward_sample,
    verify_backward_carleman, verify_caccioppoli, verify_carleman_forward, verify_observability,
    verify_source_carleman, Sample,
};
use carleman_core::coeff::default_probe_grid;
use carleman_core::hum::{
    null_control_backward, two_control_sweep, unique_continuation_probe, BackwardControlProblem,
    CgOptions, ControlResult, ControlSummary, TwoControlProblem,
};
use carleman_core::weights::verify_theta_bounds;
use carleman_core::{
    Backend, DegenerateOperator, EnsembleConfig, Filtration, ForwardProblem, GateOutcome,
    InequalityReport, Setup, Source, StepField, Terminal, WeightSign,
};
use clap::ValueEnum;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{interval, InitialData, Resolved, VariantName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    CheckCoeff,
    Weights,
    VerifyTheta,
    SimulateForward,
    SolveBackward,
    VerifyCarleman,
    VerifySourceCarleman,
    VerifyObservability,
    VerifyBackwardCarleman,
    VerifyCaccioppoli,
    HumBackward,
    HumTwoControls,
    UcProbe,
}

impl Command {
    pub fn name(self) -> String {
        self.to_possible_value()
            .expect("no skipped variants")
            .get_name()
            .to_string()
    }
}

/// One named condition of a gate.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct Gate {
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl Gate {
    fn new(checks: Vec<Check>) -> Self {
        Gate {
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

fn check(name: impl Into<String>, passed: bool, value: impl Serialize) -> Check {
    Check {
        name: name.into(),
        passed,
        value: serde_json::to_value(value).unwrap_or(Value::Null),
    }
}

pub struct Outcome {
    pub results: Value,
    pub gate: Option<Gate>,
    /// One line for stdout.
    pub summary: String,
}

pub fn run(command: Command, r: &Resolved, dir: &Path) -> Result<Outcome> {
    let stem = dir.join(command.name());
    let stem = stem.to_str().context("output path is not valid UTF-8")?;
    match command {
        Command::CheckCoeff => check_coeff(r, stem),
        Command::Weights => weights(r, stem),
        Command::VerifyTheta => verify_theta(r, stem),
        Command::SimulateForward => simulate_forward(r, stem),
        Command::SolveBackward => solve_backward(r, stem),
        Command::VerifyCarleman => verify_carleman(r, stem),
        Command::VerifySourceCarleman => verify_source(r, stem),
        Command::VerifyObservability => observability(r, stem),
        Command::VerifyBackwardCarleman => backward_carleman(r, stem),
        Command::VerifyCaccioppoli => caccioppoli(r, stem),
        Command::HumBackward => hum_backward(r, stem),
        Command::HumTwoControls => hum_two_controls(r, stem),
        Command::UcProbe => uc_probe(r, stem),
    }
}

fn num(v: f64) -> String {
    format!("{v:.12e}")
}

fn write_table(
    path: &str,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w =
        csv::Writer::from_writer(File::create(path).with_context(|| format!("creating {path}"))?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn gate_label(gate: &Option<Gate>) -> &'static str {
    match gate {
        Some(g) if g.passed => "gate PASS",
        Some(_) => "gate FAIL",
        None => "no gate",
    }
}

fn outcome(results: Value, gate: Option<Gate>, summary: String) -> Result<Outcome> {
    let summary = format!("{summary}; {}", gate_label(&gate));
    Ok(Outcome {
        results,
        gate,
        summary,
    })
}

fn initial_data(r: &Resolved, op: &DegenerateOperator, kind: InitialData) -> Vec<f64> {
    match kind {
        InitialData::Sine => {
            let mut v: Vec<f64> = op.nodes().iter().map(|x| (PI * x).sin()).collect();
            op.project(&mut v);
            v
        }
        InitialData::Random => {
            let cfg = EnsembleConfig {
                size: 1,
                ..r.ensemble()
            };
            draw_ensemble(&cfg, r.setup.horizon, op.boundary())[0]
                .y0
                .sample(op.nodes())
        }
    }
}

fn forward_samples(r: &Resolved, op: &DegenerateOperator) -> Vec<Sample> {
    draw_ensemble(&r.ensemble(), r.setup.horizon, op.boundary())
}

fn check_coeff(r: &Resolved, stem: &str) -> Result<Outcome> {
    let coef = &r.setup.coef;
    let probes = default_probe_grid(r.config.check.probes);
    let report = coef.validate_degeneracy(&probes)?;
    let mut rows = Vec::with_capacity(probes.len());
    for &x in &probes {
        let a = coef.eval(x)?;
        let da = coef.eval_derivative(x)?;
        rows.push(vec![
            num(x),
            num(a),
            num(da),
            num(x * da / a),
            num(coef.x2_over_a(x)),
        ]);
    }
    write_table(
        &format!("{stem}.csv"),
        &["x", "a", "da", "x_da_over_a", "x2_over_a"],
        rows,
    )?;
    let label = format!("{}, K={}", report.class.label(), coef.k());
    let results = json!({
        "coefficient": coef.describe(),
        "label": label,
        "declared_k": coef.k(),
        "validation": report,
    });
    outcome(results, None, label)
}

fn weights(r: &Resolved, stem: &str) -> Result<Outcome> {
    let ws = r.weight_system(r.config.weights.variant)?;
    let op = r.setup.operator()?;
    let count = r.config.weights.profile_times.max(1);
    let t = r.setup.horizon;
    // Midpoints keep the standard weight away from its poles.
    let times: Vec<f64> = (0..count)
        .map(|k| t * (k as f64 + 0.5) / count as f64)
        .collect();
    ws.write_profiles(&times, op.nodes(), Path::new(&format!("{stem}.csv")))?;
    let results = json!({
        "variant": ws.time_weight().variant(),
        "s": ws.s(),
        "d": ws.d(),
        "rho_inf": ws.rho_inf(),
        "theta_min": ws.theta(0.5 * t)?,
        "profile_times": times.len(),
        "nodes": op.len(),
    });
    outcome(
        results,
        None,
        format!("weights at s = {:.6e}, d = {:.6e}", ws.s(), ws.d()),
    )
}

fn verify_theta(r: &Resolved, stem: &str) -> Result<Outcome> {
    let cfg = &r.config.theta;
    let report = verify_theta_bounds(r.setup.horizon, cfg.samples)?;
    let constants = [
        report.constants.c1,
        report.constants.c2,
        report.constants.c3,
        report.constants.c4,
        report.constants.c5,
    ];
    let rows = (0..5).map(|i| {
        vec![
            report.labels[i].to_string(),
            num(constants[i]),
            num(report.residuals[i]),
            num(report.argmax[i]),
        ]
    });
    write_table(
        &format!("{stem}.csv"),
        &["inequality", "constant", "max_residual", "argmax_t"],
        rows,
    )?;
    let checks = (0..5)
        .map(|i| {
            check(
                report.labels[i],
                report.residuals[i] <= cfg.tol,
                report.residuals[i],
            )
        })
        .collect();
    let worst = report
        .residuals
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    outcome(
        serde_json::to_value(&report)?,
        Some(Gate::new(checks)),
        format!(
            "largest relative residual {worst:.3e} (tol {:.0e})",
            cfg.tol
        ),
    )
}

fn simulate_forward(r: &Resolved, stem: &str) -> Result<Outcome> {
    let fc = &r.config.forward;
    let st = &r.setup;
    let op = st.operator()?;
    let solver = st.solver(&op)?;
    let (steps, m) = (st.steps(), op.len());
    let b = StepField::constant(steps, m, fc.b);
    let c = StepField::constant(steps, m, fc.c);
    let f = StepField::constant(steps, m, fc.f);
    let g = StepField::constant(steps, m, fc.g);
    let y0 = initial_data(r, &op, fc.initial);
    let problem = ForwardProblem {
        b: &b,
        c: &c,
        f: Source::Deterministic(&f),
        g: Source::Deterministic(&g),
        y0: &y0,
    };
    // (level, t, E|y|^2, E energy) and the mean / second moment at T.
    let mut levels = Vec::with_capacity(steps + 1);
    let (mean, second) = match fc.backend {
        Backend::Tree => {
            let tree = st.tree()?;
            let y = solver.forward(&tree, &problem)?;
            for s in solver.level_statistics(&tree, &y) {
                levels.push((s.level, s.t, s.mean_sq_norm, s.mean_energy));
            }
            let (mut mean, mut second) = (vec![0.0; m], vec![0.0; m]);
            for (j, v) in y.level(steps).chunks(m).enumerate() {
                let p = tree.probability(steps, j);
                for i in 0..m {
                    mean[i] += p * v[i];
                    second[i] += p * v[i] * v[i];
                }
            }
            (mean, second)
        }
        Backend::Moments => {
            let mom = solver.forward_moments(steps, &problem)?;
            let w = op.weights();
            let kappa = op.kappa();
            let active = |i: usize| op.is_active(i);
            for (n, rr) in mom.second.iter().enumerate() {
                let sq: f64 = (0..m)
                    .filter(|&i| active(i))
                    .map(|i| w[i] * rr[(i, i)])
                    .sum();
                let en: f64 = kappa
                    .iter()
                    .enumerate()
                    .map(|(cell, k)| {
                        let (l, h) = (cell, cell + 1);
                        let at = |i: usize, j: usize| {
                            if active(i) && active(j) {
                                rr[(i, j)]
                            } else {
                                0.0
                            }
                        };
                        k * (at(h, h) - 2.0 * at(l, h) + at(l, l))
                    })
                    .sum();
                levels.push((n, n as f64 * st.dt(), sq, en));
            }
            let second = (0..m).map(|i| mom.second[steps][(i, i)]).collect();
            (mom.mean[steps].clone(), second)
        }
    };
    write_table(
        &format!("{stem}.csv"),
        &["level", "t", "mean_sq_norm", "mean_energy"],
        levels
            .iter()
            .map(|l| vec![l.0.to_string(), num(l.1), num(l.2), num(l.3)]),
    )?;
    write_table(
        &format!("{stem}_terminal.csv"),
        &["x", "mean", "second_moment"],
        (0..m).map(|i| vec![num(op.nodes()[i]), num(mean[i]), num(second[i])]),
    )?;
    let last = levels[steps];
    let results = json!({
        "backend": fc.backend,
        "terminal_mean_sq_norm": last.2,
        "terminal_mean_energy": last.3,
        "initial_sq_norm": levels[0].2,
    });
    outcome(results, None, format!("E|y(T)|^2 = {:.6e}", last.2))
}

fn solve_backward(r: &Resolved, stem: &str) -> Result<Outcome> {
    let st = &r.setup;
    let op = st.operator()?;
    let bc = &r.config.backward;
    let samples = draw_backward_ensemble(
        &r.ensemble(),
        st.horizon,
        op.boundary(),
        bc.source_bound,
        bc.random_terminal,
    );
    let solver = st.solver(&op)?;
    let stats: Vec<_> = samples
        .par_iter()
        .map(|s| -> carleman_core::Result<_> {
            let (lattice, sol, _) = solve_backward_sample(st, &op, s)?;
            Ok(solver.level_statistics(&lattice, &sol.z))
        })
        .collect::<carleman_core::Result<_>>()?;
    let mut rows = Vec::new();
    for (k, levels) in stats.iter().enumerate() {
        for l in levels {
            rows.push(vec![
                k.to_string(),
                l.level.to_string(),
                num(l.t),
                num(l.mean_sq_norm),
                num(l.mean_energy),
            ]);
        }
    }
    write_table(
        &format!("{stem}.csv"),
        &["sample", "level", "t", "mean_sq_norm", "mean_energy"],
        rows,
    )?;
    let z0: Vec<f64> = stats.iter().map(|l| l[0].mean_sq_norm).collect();
    let max_z0 = z0.iter().copied().fold(0.0, f64::max);
    let results = json!({ "samples": samples.len(), "z0_sq_norm": z0 });
    outcome(
        results,
        None,
        format!("{} samples, max |z(0)|^2 = {max_z0:.6e}", samples.len()),
    )
}

fn per_s_rows(label: &str, report: &InequalityReport) -> Vec<Vec<String>> {
    (0..report.s_values.len())
        .map(|k| {
            vec![
                label.to_string(),
                num(report.s_values[k]),
                num(report.per_s_ln_max[k]),
                num(report.per_s_max[k]),
                num(report.per_s_mean[k]),
            ]
        })
        .collect()
}

const SUMMARY_HEADER: [&str; 5] = ["run", "s", "ln_max_ratio", "max_ratio", "mean_ratio"];

/// Write the coarse (and refined) reports and build the refinement checks.
fn inequality_outputs(
    r: &Resolved,
    stem: &str,
    coarse: &InequalityReport,
    fine: Option<&InequalityReport>,
    monotone: bool,
) -> Result<(Value, Vec<Check>)> {
    coarse.write_csv(Path::new(&format!("{stem}.csv")))?;
    let mut summary = per_s_rows("coarse", coarse);
    let gc = &r.config.gate;
    let mut checks = vec![check("finite", coarse.all_finite(), coarse.violations)];
    let mut gate: Option<GateOutcome> = None;
    if let Some(fine) = fine {
        fine.write_csv(Path::new(&format!("{stem}_refined.csv")))?;
        summary.extend(per_s_rows("refined", fine));
        let g = refinement_gate(coarse, fine, gc.max_change, monotone, gc.monotone_tol);
        checks = vec![
            check("finite", g.finite, coarse.violations + fine.violations),
            check("stable_under_refinement", g.stable, g.max_relative_change),
        ];
        if monotone {
            checks.push(check(
                "top_decade_non_increasing",
                g.monotone,
                g.top_decade_increase,
            ));
        }
        gate = Some(g);
    } else if monotone {
        let g = refinement_gate(coarse, coarse, f64::INFINITY, true, gc.monotone_tol);
        checks.push(check(
            "top_decade_non_increasing",
            g.monotone,
            g.top_decade_increase,
        ));
    }
    write_table(&format!("{stem}_summary.csv"), &SUMMARY_HEADER, summary)?;
    let results = json!({
        "id": coarse.id,
        "s_values": coarse.s_values,
        "per_s_max": coarse.per_s_max,
        "per_s_mean": coarse.per_s_mean,
        "max_ratio": coarse.max_ratio,
        "refined_per_s_max": fine.map(|f| f.per_s_max.clone()),
        "refinement": gate,
    });
    Ok((results, checks))
}

fn report_line(report: &InequalityReport) -> String {
    format!(
        "max ratio {:.6e} over {} samples",
        report.max_ratio, report.ensemble_size
    )
}

fn verify_carleman(r: &Resolved, stem: &str) -> Result<Outcome> {
    let st = &r.setup;
    let op = st.operator()?;
    let ws = r.weight_system(r.config.weights.variant)?;
    let samples = forward_samples(r, &op);
    let s = r.s_grid();
    let backend = r.config.ensemble.backend;
    let coarse = verify_carleman_forward(st, &ws, &samples, &s, backend)?;
    let fine = match r.config.gate.refine {
        true => Some(verify_carleman_forward(
            &st.refined(),
            &ws,
            &samples,
            &s,
            backend,
        )?),
        false => None,
    };
    let (results, checks) =
        inequality_outputs(r, stem, &coarse, fine.as_ref(), r.config.gate.monotone)?;
    outcome(results, Some(Gate::new(checks)), report_line(&coarse))
}

fn verify_source(r: &Resolved, stem: &str) -> Result<Outcome> {
    let st = &r.setup;
    let op = st.operator()?;
    let ws = r.weight_system(r.config.weights.variant)?;
    let samples = forward_samples(r, &op);
    let s = r.s_grid();
    let spec = r.config.source.spec;
    let source_seed = r.seed.wrapping_add(1);
    let coarse = verify_source_carleman(st, &ws, &samples, spec, source_seed, &s)?;
    // Adapted sources need the full tree, so the rerun doubles M only: at
    // doubled depth the tree fields no longer fit in memory.
    let fine = match r.config.gate.refine {
        true => {
            let mut res = st.resolution.refined();
            res.steps = st.resolution.steps;
            let spatial = Setup::new(st.coef.clone(), st.horizon, res);
            Some(verify_source_carleman(
                &spatial,
                &ws,
                &samples,
                spec,
                source_seed,
                &s,
            )?)
        }
        false => None,
    };
    let (mut results, mut checks) = inequality_outputs(
        r,
        stem,
        &coarse.report,
        fine.as_ref().map(|f| &f.report),
        r.config.gate.monotone,
    )?;
    let errors: Vec<f64> = [Some(&coarse), fine.as_ref()]
        .into_iter()
        .flatten()
        .filter_map(|x| x.reproduction_error)
        .collect();
    if !errors.is_empty() {
        let worst = errors.iter().copied().fold(0.0, f64::max);
        checks.push(check(
            "reproduction",
            worst <= r.config.source.reproduction_tol,
            worst,
        ));
        results["reproduction_error"] = json!(worst);
    }
    results["sources"] = serde_json::to_value(spec)?;
    outcome(
        results,
        Some(Gate::new(checks)),
        report_line(&coarse.report),
    )
}

fn observability(r: &Resolved, stem: &str) -> Result<Outcome> {
    let st = &r.setup;
    let op = st.operator()?;
    let ws = r.weight_system(r.config.weights.variant)?;
    let samples = forward_samples(r, &op);
    let s = r.s();
    let backend = r.config.ensemble.backend;
    let coarse = verify_observability(st, &ws, &samples, s, r.omega, backend)?;
    let fine = match r.config.gate.refine {
        true => Some(verify_observability(
            &st.refined(),
            &ws,
            &samples,
            s,
            r.omega,
            backend,
        )?),
        false => None,
    };
    // A single s: the top-decade condition does not apply.
    let (mut results, mut checks) = inequality_outputs(r, stem, &coarse, fine.as_ref(), false)?;
    if let Some(shrunk) = r.config.observability.shrunk {
        let region = interval(shrunk, "observability.shrunk")?;
        let small = verify_observability(st, &ws, &samples, s, region, backend)?;
        small.write_csv(Path::new(&format!("{stem}_shrunk.csv")))?;
        let grows = small.all_finite() && small.max_ratio > coarse.max_ratio;
        checks.push(check(
            "shrinking_omega_increases_max",
            grows,
            [coarse.max_ratio, small.max_ratio],
        ));
        results["shrunk_max_ratio"] = json!(small.max_ratio);
    }
    outcome(results, Some(Gate::new(checks)), report_line(&coarse))
}

fn backward_carleman(r: &Resolved, stem: &str) -> Result<Outcome> {
    let st = &r.setup;
    let op = st.operator()?;
    // The backward estimate needs a weight that stays finite at t = 0.
    let ws = r.weight_system(VariantName::Bar)?;
    let bc = &r.config.backward;
    let samples = draw_backward_ensemble(
        &r.ensemble(),
        st.horizon,
        op.boundary(),
        bc.source_bound,
        bc.random_terminal,
    );
    let s = r.s_grid();
    let coarse = verify_backward_carleman(st, &ws, &samples, &s)?;
    let fine = match r.config.gate.refine {
        true => Some(verify_backward_carleman(&st.refined(), &ws, &samples, &s)?),
        false => None,
    };
    let (results, checks) =
        inequality_outputs(r, stem, &coarse, fine.as_ref(), r.config.gate.monotone)?;
    outcome(results, Some(Gate::new(checks)), report_line(&coarse))
}

fn caccioppoli(r: &Resolved, stem: &str) -> Result<Outcome> {
    let st = &r.setup;
    let op = st.operator()?;
    let ws = r.weight_system(r.config.weights.variant)?;
    let samples = forward_samples(r, &op);
    let cc = &r.config.caccioppoli;
    let outer = interval(cc.outer, "caccioppoli.outer")?;
    let mu = r.s_grid();
    let gc = &r.config.gate;
    let mut summary = Vec::new();
    let mut entries = Vec::new();
    let mut maxima = Vec::new();
    let mut checks = Vec::new();
    for (k, inner) in cc.inner.iter().enumerate() {
        let inner_iv = interval(*inner, "caccioppoli.inner")?;
        let coarse = verify_caccioppoli(st, &ws, &samples, inner_iv, outer, &mu, cc.sign)?;
        summary.extend(per_s_rows(&format!("inner{k}"), &coarse));
        for e in &coarse.entries {
            entries.push(vec![
                k.to_string(),
                e.sample.to_string(),
                num(e.s),
                num(e.ln_lhs),
                num(e.ln_rhs),
                num(e.ratio),
            ]);
        }
        checks.push(check(
            format!("inner{k}_finite"),
            coarse.all_finite(),
            coarse.violations,
        ));
        if gc.refine {
            let fine =
                verify_caccioppoli(&st.refined(), &ws, &samples, inner_iv, outer, &mu, cc.sign)?;
            summary.extend(per_s_rows(&format!("inner{k}_refined"), &fine));
            let g = refinement_gate(&coarse, &fine, gc.max_change, false, 0.0);
            checks.push(check(
                format!("inner{k}_stable"),
                g.stable,
                g.max_relative_change,
            ));
        }
        maxima.push(coarse.max_ratio);
    }
    write_table(
        &format!("{stem}.csv"),
        &["inner", "sample", "mu", "ln_lhs", "ln_rhs", "ratio"],
        entries,
    )?;
    write_table(&format!("{stem}_summary.csv"), &SUMMARY_HEADER, summary)?;
    let grows = maxima.windows(2).all(|w| w[1] > w[0]);
    checks.push(check("ratio_grows_as_margin_shrinks", grows, &maxima));
    let results = json!({
        "sign": cc.sign,
        "outer": cc.outer,
        "inner": cc.inner,
        "mu_values": mu,
        "max_ratio_per_inner": maxima,
    });
    // Only the e^{-2 s phi} form has finite continuum sides; the other is reported.
    let gate = (cc.sign == WeightSign::Negative).then(|| Gate::new(checks));
    let shown: Vec<String> = maxima.iter().map(|v| format!("{v:.4e}")).collect();
    let line = format!("max ratio per inner interval [{}]", shown.join(", "));
    outcome(results, gate, line)
}

fn control_rows(sweep: &[ControlSummary]) -> Vec<Vec<String>> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, num);
    sweep
        .iter()
        .map(|c| {
            vec![
                num(c.epsilon),
                num(c.achieved),
                num(c.achieved_over_epsilon),
                c.iterations.to_string(),
                num(c.residual),
                num(c.functional),
                num(c.costs.unweighted),
                opt(c.costs.weighted_bounded),
                opt(c.costs.ln_weighted_growing),
                opt(c.duality_residual),
                opt(c.optimality_residual),
            ]
        })
        .collect()
}

const CONTROL_HEADER: [&str; 11] = [
    "epsilon",
    "achieved",
    "achieved_over_epsilon",
    "iterations",
    "cg_residual",
    "functional",
    "cost_unweighted",
    "cost_weighted_bounded",
    "ln_cost_weighted_growing",
    "duality_residual",
    "optimality_residual",
];

/// Finite ratios growing by less than `sqrt(10)` over the final decade;
/// without a uniform bound `achieved / eps` grows by 10 per decade.
fn bounded_sweep(sweep: &[ControlSummary]) -> bool {
    let ratios: Vec<f64> = sweep.iter().map(|c| c.achieved_over_epsilon).collect();
    let finite = ratios.iter().all(|r| r.is_finite());
    match ratios.as_slice() {
        [.., prev, last] => {
            let decades = (sweep[sweep.len() - 2].epsilon / sweep[sweep.len() - 1].epsilon).log10();
            finite && *last < 10f64.powf(0.5 * decades) * prev
        }
        _ => finite,
    }
}

fn cg_options(r: &Resolved) -> CgOptions {
    CgOptions {
        tol: r.config.hum.cg_tol,
        max_iter: r.config.hum.cg_max_iter,
    }
}

fn hum_backward(r: &Resolved, stem: &str) -> Result<Outcome> {
    let st = &r.setup;
    let op = st.operator()?;
    let h = &r.config.hum;
    let (steps, m) = (st.steps(), op.len());
    let b = StepField::constant(steps, m, h.b);
    let c = StepField::constant(steps, m, h.c);
    let eta = initial_data(r, &op, h.data);
    let problem = BackwardControlProblem {
        b: &b,
        c: &c,
        omega: r.omega,
        terminal: Terminal::Deterministic(&eta),
    };
    let mut warm: Option<Vec<f64>> = None;
    let mut sweep = Vec::new();
    for &eps in &h.epsilons {
        let res: ControlResult =
            null_control_backward(st, &problem, eps, cg_options(r), warm.as_deref())?;
        sweep.push(res.summary());
        warm = Some(res.minimizer);
    }
    write_table(
        &format!("{stem}.csv"),
        &CONTROL_HEADER,
        control_rows(&sweep),
    )?;
    let norms: Vec<f64> = sweep.iter().map(|c| c.achieved).collect();
    let audit = sweep
        .iter()
        .map(|c| c.duality_residual.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let checks = vec![
        check(
            "z0_monotone_in_eps",
            norms.windows(2).all(|w| w[1] <= w[0]),
            &norms,
        ),
        check(
            "z0_over_eps_bounded",
            bounded_sweep(&sweep),
            sweep
                .iter()
                .map(|c| c.achieved_over_epsilon)
                .collect::<Vec<_>>(),
        ),
        check("duality_audit", audit <= h.duality_tol, audit),
    ];
    let results = json!({ "sweep": sweep });
    let line = format!(
        "|z(0)|^2 at eps = {:.0e}: {:.6e}",
        sweep.last().map_or(0.0, |c| c.epsilon),
        norms.last().copied().unwrap_or(0.0)
    );
    outcome(results, Some(Gate::new(checks)), line)
}

fn hum_two_controls(r: &Resolved, stem: &str) -> Result<Outcome> {
    let st = &r.setup;
    let op = st.operator()?;
    let h = &r.config.hum;
    let ws = r.weight_system(VariantName::Bar)?;
    let (steps, m) = (st.steps(), op.len());
    let b = StepField::constant(steps, m, h.b);
    let f = StepField::constant(steps, m, h.f);
    let g = StepField::constant(steps, m, h.g);
    let y0 = initial_data(r, &op, h.data);
    let problem = TwoControlProblem {
        b: &b,
        f: &f,
        g: &g,
        y0: &y0,
        weight_eps: h.weight_eps,
    };
    let sweep: Vec<ControlSummary> =
        two_control_sweep(st, &ws, &problem, &h.epsilons, cg_options(r))?
            .iter()
            .map(ControlResult::summary)
            .collect();
    write_table(
        &format!("{stem}.csv"),
        &CONTROL_HEADER,
        control_rows(&sweep),
    )?;
    let optimality = sweep
        .iter()
        .map(|c| c.optimality_residual.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let converged = sweep.iter().all(|c| c.residual <= h.cg_tol);
    let checks = vec![
        check(
            "yT_over_eps_bounded",
            bounded_sweep(&sweep),
            sweep
                .iter()
                .map(|c| c.achieved_over_epsilon)
                .collect::<Vec<_>>(),
        ),
        check(
            "cg_converged",
            converged,
            sweep.iter().map(|c| c.residual).collect::<Vec<_>>(),
        ),
        check(
            "optimality_relations",
            optimality <= 10.0 * h.cg_tol,
            optimality,
        ),
    ];
    let results = json!({ "sweep": sweep });
    let line = format!(
        "E|y(T)|^2 at eps = {:.0e}: {:.6e}",
        sweep.last().map_or(0.0, |c| c.epsilon),
        sweep.last().map_or(0.0, |c| c.achieved)
    );
    outcome(results, Some(Gate::new(checks)), line)
}

fn uc_probe(r: &Resolved, stem: &str) -> Result<Outcome> {
    let st: &Setup = &r.setup;
    let op = st.operator()?;
    let uc = &r.config.uc;
    let cfg = EnsembleConfig {
        size: uc.candidates,
        ..r.ensemble()
    };
    let candidates = draw_ensemble(&cfg, st.horizon, op.boundary());
    let report = unique_continuation_probe(st, &candidates, r.omega, uc.t1, uc.threshold)?;
    write_table(
        &format!("{stem}.csv"),
        &["candidate", "local", "global", "flagged"],
        report.entries.iter().map(|e| {
            vec![
                e.candidate.to_string(),
                num(e.local),
                num(e.global),
                e.flagged.to_string(),
            ]
        }),
    )?;
    let smallest = report
        .entries
        .iter()
        .map(|e| e.local / e.global)
        .fold(f64::INFINITY, f64::min);
    let checks = vec![check(
        "no_flagged_candidates",
        report.violations == 0,
        report.violations,
    )];
    let results = json!({
        "candidates": report.entries.len(),
        "violations": report.violations,
        "smallest_local_over_global": smallest,
    });
    outcome(
        results,
        Some(Gate::new(checks)),
        format!(
            "{} of {} candidates flagged",
            report.violations,
            report.entries.len()
        ),
    )
}
