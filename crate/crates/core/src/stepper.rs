//! Decoupled semi-implicit time stepping.
//!
//! Each step updates the vasculature nodewise, then solves one symmetric
//! linear system for `u = exp(-chi * Phi) * T`, then updates necrosis
//! nodewise. The tumor density is recovered as `T = exp(chi * Phi) * u`.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::mesh::{NodalField, StiffnessAssembler, TriMesh};
use crate::metrics::MetricsSample;
use crate::params::{reaction_rhs_unchecked, DimensionlessParams, FactorModel, FactorValues};
use crate::scenario::{
    generate_initial_fields, InitialFields, ScenarioConfig, SnapshotRecord, TimeSeriesRow,
};
use crate::sparse::{cg_solve, CgOptions, CgReport, CsrMatrix};

/// Relative size of a negative `u` entry, against `max(u)`, beyond which a
/// step is rejected instead of clamped.
pub const NEGATIVE_U_ABORT: f64 = 1e-8;

/// Discrete fields at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub step: usize,
    pub time: f64,
    pub u: NodalField,
    pub n_field: NodalField,
    pub phi: NodalField,
    /// `exp(chi * phi) * u`, kept in sync by the constructors.
    pub t_field: NodalField,
}

fn recover_t(u: &[f64], phi: &[f64], chi: f64) -> NodalField {
    u.iter()
        .zip(phi)
        .map(|(u, p)| (chi * p).exp() * u)
        .collect::<Vec<_>>()
        .into()
}

impl SimState {
    /// Validated state at step 0 and time 0.
    pub fn new(u: NodalField, n_field: NodalField, phi: NodalField, chi: f64) -> Result<Self> {
        let len = u.len();
        for f in [&n_field, &phi] {
            if f.len() != len {
                return Err(Error::DimensionMismatch {
                    expected: len,
                    got: f.len(),
                });
            }
        }
        let t_field = recover_t(&u, &phi, chi);
        let s = SimState {
            step: 0,
            time: 0.0,
            u,
            n_field,
            phi,
            t_field,
        };
        s.check_invariants()?;
        Ok(s)
    }

    pub fn from_initial(fields: InitialFields, chi: f64) -> Result<Self> {
        SimState::new(fields.u, fields.n, fields.phi, chi)
    }

    /// `0 <= phi <= 1`, `u >= 0`, `N >= 0`, everything finite.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |message: String| {
            Err(Error::Invariant {
                step: self.step,
                message,
            })
        };
        for (name, f) in [("u", &self.u), ("N", &self.n_field), ("T", &self.t_field)] {
            if let Some(a) = f.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return fail(format!("{name}[{a}] = {} is not a finite nonnegative value", f[a]));
            }
        }
        if let Some(a) = self.phi.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return fail(format!("Phi[{a}] = {} outside [0, 1]", self.phi[a]));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.u.len()
    }
}

/// Quantities recorded after every step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub time: f64,
    pub min_u: f64,
    pub max_u: f64,
    pub min_n: f64,
    pub max_n: f64,
    pub min_phi: f64,
    pub max_phi: f64,
    pub min_t: f64,
    pub max_t: f64,
    /// Smallest solver output before clamping.
    pub raw_min_u: f64,
    /// Number of entries clamped to zero.
    pub clamped: usize,
    /// Lumped integrals of `T` and `N` (their L1 norms).
    pub l1_t: f64,
    pub l1_n: f64,
    pub grad_phi_l2: f64,
    pub grad_n_l2: f64,
    pub grad_u_l2: f64,
    pub cg_iterations: usize,
    pub cg_residual: f64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepOptions {
    pub factor_model: FactorModel,
    pub cg: CgOptions,
}

fn evaluate_factors(state: &SimState, model: FactorModel) -> Vec<FactorValues> {
    state
        .phi
        .iter()
        .zip(state.t_field.iter())
        .map(|(p, t)| model.evaluate(*p, *t))
        .collect()
}

/// Nodewise vasculature update from factor values at the old level.
#[inline]
pub fn phi_update(
    phi: f64,
    t: f64,
    n: f64,
    f: FactorValues,
    params: &DimensionlessParams,
    dt: f64,
) -> f64 {
    if f.r == 0.0 && f.q == 0.0 {
        // (phi/dt) / (1/dt) is not always phi in floating point
        return phi;
    }
    let growth = params.gamma * f.r * phi;
    let num = phi / dt + growth;
    let den = 1.0 / dt + growth + params.gamma * f.r * (t + n) + params.delta * f.q;
    num / den
}

/// Nodewise necrosis update.
#[inline]
pub fn n_update(
    n: f64,
    t_next: f64,
    phi_next: f64,
    f: FactorValues,
    params: &DimensionlessParams,
    dt: f64,
) -> f64 {
    n + dt * (params.alpha * f.s * t_next + params.delta * f.q * phi_next)
}

fn phi_step_with(
    state: &SimState,
    factors: &[FactorValues],
    params: &DimensionlessParams,
    dt: f64,
) -> NodalField {
    (0..state.node_count())
        .map(|a| {
            phi_update(
                state.phi[a],
                state.t_field[a],
                state.n_field[a],
                factors[a],
                params,
                dt,
            )
        })
        .collect::<Vec<_>>()
        .into()
}

/// `Phi^{k+1}` by the closed-form nodewise update. Stays in `[0, 1]` when
/// the state is admissible.
pub fn step_phi(
    state: &SimState,
    params: &DimensionlessParams,
    dt: f64,
    model: FactorModel,
) -> NodalField {
    let factors = evaluate_factors(state, model);
    phi_step_with(state, &factors, params, dt)
}

/// Diagonal and right-hand side of the `u` system:
/// `A = diag + S(Phi^k)`, `b`.
fn u_system_parts(
    state: &SimState,
    phi_next: &[f64],
    factors: &[FactorValues],
    masses: &[f64],
    params: &DimensionlessParams,
    dt: f64,
) -> (Vec<f64>, Vec<f64>) {
    let chi = params.chi();
    let n = state.node_count();
    let mut diag = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for a in 0..n {
        let f = factors[a];
        let (t, nn, phi) = (state.t_field[a], state.n_field[a], state.phi[a]);
        let total = t + nn + phi;
        let w_old = (chi * phi).exp();
        let w_new = (chi * phi_next[a]).exp();
        let sink = f.p * total + params.alpha * f.s + chi * params.gamma * f.r * phi;
        let source = t * (f.p + chi * phi * (params.gamma * f.r * total + params.delta * f.q));
        let m = masses[a];
        diag.push(m * w_old / dt + m * sink * w_new);
        b.push(m * (w_old * state.u[a] / dt + source));
    }
    (diag, b)
}

/// Builds the symmetric positive-definite system for `u^{k+1}`.
pub fn assemble_u_system(
    state: &SimState,
    phi_next: &[f64],
    params: &DimensionlessParams,
    dt: f64,
    mesh: &TriMesh,
    model: FactorModel,
) -> Result<(CsrMatrix, Vec<f64>)> {
    let n = mesh.node_count();
    for len in [state.node_count(), phi_next.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: len,
            });
        }
    }
    let factors = evaluate_factors(state, model);
    let mut a = StiffnessAssembler::new(mesh)?.assemble(&state.phi, params.chi())?;
    let (diag, b) = u_system_parts(state, phi_next, &factors, mesh.lumped_masses(), params, dt);
    a.add_diagonal(&diag)?;
    Ok((a, b))
}

/// Outcome of [`step_u`] besides the new field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct USolveReport {
    pub cg: CgReport,
    pub raw_min: f64,
    pub clamped: usize,
}

/// Solves for `u^{k+1}` starting from `u_prev`. Negative entries down to
/// `-NEGATIVE_U_ABORT * max(u)` are solver noise and clamped to zero;
/// anything lower is reported as an invariant violation. Subnormal
/// entries are flushed to zero.
pub fn step_u(
    a: &CsrMatrix,
    b: &[f64],
    u_prev: &[f64],
    opts: &CgOptions,
    step: usize,
) -> Result<(NodalField, USolveReport)> {
    let (mut u, cg) = cg_solve(a, b, Some(u_prev), opts)?;
    if !cg.converged {
        return Err(Error::Solver {
            step,
            iterations: cg.iterations,
            residual: cg.relative_residual,
        });
    }
    let raw_min = u.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = u.iter().copied().fold(0.0, f64::max);
    let floor = -NEGATIVE_U_ABORT * scale;
    let mut clamped = 0;
    for (i, v) in u.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(Error::Invariant {
                step,
                message: format!("u[{i}] is not finite"),
            });
        }
        if *v < 0.0 {
            if *v < floor {
                return Err(Error::Invariant {
                    step,
                    message: format!("u[{i}] = {v:e} below the clamp floor {floor:e}"),
                });
            }
            *v = 0.0;
            clamped += 1;
        } else if *v < f64::MIN_POSITIVE {
            // subnormals carry no precision and make every later step crawl
            *v = 0.0;
        }
    }
    Ok((
        u.into(),
        USolveReport {
            cg,
            raw_min: if raw_min.is_finite() { raw_min } else { 0.0 },
            clamped,
        },
    ))
}

fn n_step_with(
    state: &SimState,
    t_next: &[f64],
    phi_next: &[f64],
    factors: &[FactorValues],
    params: &DimensionlessParams,
    dt: f64,
) -> NodalField {
    (0..state.node_count())
        .map(|a| n_update(state.n_field[a], t_next[a], phi_next[a], factors[a], params, dt))
        .collect::<Vec<_>>()
        .into()
}

/// `N^{k+1}` with factors taken at the old level.
pub fn step_n(
    state: &SimState,
    t_next: &[f64],
    phi_next: &[f64],
    params: &DimensionlessParams,
    dt: f64,
    model: FactorModel,
) -> NodalField {
    let factors = evaluate_factors(state, model);
    n_step_with(state, t_next, phi_next, &factors, params, dt)
}

/// Owns the per-mesh data reused by every step.
#[derive(Debug, Clone)]
pub struct Stepper {
    mesh: TriMesh,
    assembler: StiffnessAssembler,
    matrix: CsrMatrix,
    params: DimensionlessParams,
    options: StepOptions,
}

impl Stepper {
    pub fn new(mesh: &TriMesh, params: DimensionlessParams, options: StepOptions) -> Result<Self> {
        params.validate()?;
        let assembler = StiffnessAssembler::new(mesh)?;
        let matrix = assembler.pattern().clone();
        Ok(Stepper {
            mesh: mesh.clone(),
            assembler,
            matrix,
            params,
            options,
        })
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn params(&self) -> &DimensionlessParams {
        &self.params
    }

    /// One full step: `Phi`, then `u` (and `T`), then `N`.
    pub fn advance(&mut self, state: &SimState, dt: f64) -> Result<(SimState, StepDiagnostics)> {
        let start = Instant::now();
        let step = state.step + 1;
        if state.node_count() != self.mesh.node_count() {
            return Err(Error::DimensionMismatch {
                expected: self.mesh.node_count(),
                got: state.node_count(),
            });
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain(format!("time step must be > 0, got {dt}")));
        }
        let params = self.params;
        let chi = params.chi();
        let factors = evaluate_factors(state, self.options.factor_model);

        let phi = phi_step_with(state, &factors, &params, dt);

        self.assembler
            .assemble_into(&state.phi, chi, &mut self.matrix)?;
        let (diag, b) = u_system_parts(
            state,
            &phi,
            &factors,
            self.mesh.lumped_masses(),
            &params,
            dt,
        );
        self.matrix.add_diagonal(&diag)?;
        let (u, report) = step_u(&self.matrix, &b, &state.u, &self.options.cg, step)?;
        let t_field = recover_t(&u, &phi, chi);

        let n_field = n_step_with(state, &t_field, &phi, &factors, &params, dt);

        let next = SimState {
            step,
            time: state.time + dt,
            u,
            n_field,
            phi,
            t_field,
        };
        next.check_invariants()?;
        let mesh = &self.mesh;
        let diag = StepDiagnostics {
            step,
            time: next.time,
            min_u: next.u.min(),
            max_u: next.u.max(),
            min_n: next.n_field.min(),
            max_n: next.n_field.max(),
            min_phi: next.phi.min(),
            max_phi: next.phi.max(),
            min_t: next.t_field.min(),
            max_t: next.t_field.max(),
            raw_min_u: report.raw_min,
            clamped: report.clamped,
            l1_t: lumped_sum(mesh, &next.t_field),
            l1_n: lumped_sum(mesh, &next.n_field),
            grad_phi_l2: mesh.gradient_l2_norm(&next.phi),
            grad_n_l2: mesh.gradient_l2_norm(&next.n_field),
            grad_u_l2: mesh.gradient_l2_norm(&next.u),
            cg_iterations: report.cg.iterations,
            cg_residual: report.cg.relative_residual,
            wall_time: start.elapsed(),
        };
        Ok((next, diag))
    }
}

fn lumped_sum(mesh: &TriMesh, f: &[f64]) -> f64 {
    mesh.lumped_masses().iter().zip(f).map(|(m, v)| m * v).sum()
}

/// Everything a run produced, including partial output on failure.
#[derive(Debug)]
pub struct RunOutcome {
    pub rows: Vec<TimeSeriesRow>,
    pub snapshots: Vec<SnapshotRecord>,
    pub final_state: SimState,
    pub steps_completed: usize,
    /// Steps requested, `ceil(t_final / dt)`.
    pub steps_requested: usize,
    /// Smallest pre-clamp `u` over all steps.
    pub raw_min_u: f64,
    pub total_cg_iterations: usize,
    pub failure: Option<Error>,
}

impl RunOutcome {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    pub fn last_row(&self) -> Option<&TimeSeriesRow> {
        self.rows.last()
    }
}

fn series_row(state: &SimState, mesh: &TriMesh, cg_iters: usize) -> TimeSeriesRow {
    TimeSeriesRow {
        metrics: MetricsSample::compute(state.time, &state.t_field, &state.n_field, mesh),
        min_u: state.u.min(),
        min_n: state.n_field.min(),
        min_phi: state.phi.min(),
        max_phi: state.phi.max(),
        cg_iters,
    }
}

fn snapshot(state: &SimState, mesh: &TriMesh) -> SnapshotRecord {
    let rows = mesh
        .nodes()
        .iter()
        .enumerate()
        .map(|(a, p)| {
            [
                p[0],
                p[1],
                state.t_field[a],
                state.n_field[a],
                state.phi[a],
                state.u[a],
            ]
        })
        .collect();
    SnapshotRecord {
        time: state.time,
        rows,
    }
}

/// Runs a scenario to completion with default step options.
pub fn run(config: &ScenarioConfig) -> Result<RunOutcome> {
    run_observed(config, StepOptions::default(), |_, _| {})
}

/// Runs a scenario, calling `observe` after every accepted step.
///
/// Configuration and setup problems are returned as `Err`; a failure while
/// stepping ends the run early and is stored in [`RunOutcome::failure`].
pub fn run_observed(
    config: &ScenarioConfig,
    options: StepOptions,
    mut observe: impl FnMut(&SimState, &StepDiagnostics),
) -> Result<RunOutcome> {
    config.validate()?;
    let mesh = config.build_mesh()?;
    let fields = generate_initial_fields(config, &mesh)?;
    let chi = config.params.chi();
    let mut state = SimState::from_initial(fields, chi)?;
    let mut stepper = Stepper::new(&mesh, config.params, options)?;
    let dt = config.time.dt;
    let steps = config.step_count();
    let every = config.output.output_every;
    let mut snapshot_steps: Vec<usize> = config
        .output
        .snapshot_times
        .iter()
        .map(|t| (t / dt).round() as usize)
        .filter(|k| *k <= steps)
        .collect();
    snapshot_steps.sort_unstable();
    snapshot_steps.dedup();

    let mut rows = vec![series_row(&state, &mesh, 0)];
    let mut snapshots = Vec::new();
    let mut next_snap = snapshot_steps.iter().peekable();
    if next_snap.peek() == Some(&&0) {
        snapshots.push(snapshot(&state, &mesh));
        next_snap.next();
    }
    let mut raw_min_u = state.u.min();
    let mut total_cg = 0;
    let mut failure = None;
    for k in 1..=steps {
        match stepper.advance(&state, dt) {
            Ok((next, diag)) => {
                // index-based time avoids drift from repeated addition
                state = SimState {
                    time: k as f64 * dt,
                    ..next
                };
                raw_min_u = raw_min_u.min(diag.raw_min_u);
                total_cg += diag.cg_iterations;
                observe(&state, &diag);
                if k % every == 0 || k == steps {
                    rows.push(series_row(&state, &mesh, diag.cg_iterations));
                }
                if next_snap.peek() == Some(&&k) {
                    snapshots.push(snapshot(&state, &mesh));
                    next_snap.next();
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    Ok(RunOutcome {
        rows,
        snapshots,
        steps_completed: state.step,
        steps_requested: steps,
        final_state: state,
        raw_min_u,
        total_cg_iterations: total_cg,
        failure,
    })
}

/// Trajectory of the spatially homogeneous system, `y = (T, N, Phi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<[f64; 3]>,
}

impl OdeTrajectory {
    pub fn last(&self) -> [f64; 3] {
        *self.states.last().expect("trajectory holds the initial state")
    }
}

fn ode_rhs(y: [f64; 3], params: &DimensionlessParams) -> [f64; 3] {
    let (f1, f2, f3) = reaction_rhs_unchecked(y[0], y[1], y[2], params, FactorModel::Standard);
    [f1, f2, f3]
}

/// Classical fourth-order Runge-Kutta for the reaction system alone, with
/// the step shrunk so that `t_final` is hit exactly. Verification only.
pub fn reference_ode_solve(
    params: &DimensionlessParams,
    y0: [f64; 3],
    t_final: f64,
    dt_ref: f64,
) -> Result<OdeTrajectory> {
    params.validate()?;
    crate::params::reaction_rhs(y0[0], y0[1], y0[2], params)?;
    if !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(Error::Domain(format!("final time must be >= 0, got {t_final}")));
    }
    if !(dt_ref > 0.0 && dt_ref.is_finite()) {
        return Err(Error::Domain(format!("reference step must be > 0, got {dt_ref}")));
    }
    let steps = (t_final / dt_ref - 1e-9).ceil().max(0.0) as usize;
    let h = if steps == 0 { 0.0 } else { t_final / steps as f64 };
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut y = y0;
    times.push(0.0);
    states.push(y);
    let axpy = |y: [f64; 3], s: f64, k: [f64; 3]| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]];
    for i in 1..=steps {
        let k1 = ode_rhs(y, params);
        let k2 = ode_rhs(axpy(y, h / 2.0, k1), params);
        let k3 = ode_rhs(axpy(y, h / 2.0, k2), params);
        let k4 = ode_rhs(axpy(y, h, k3), params);
        for c in 0..3 {
            y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        times.push(i as f64 * h);
        states.push(y);
    }
    Ok(OdeTrajectory { times, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, build_mesh_with, nodal_interpolate, Diagonal, Rect};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn defaults() -> DimensionlessParams {
        DimensionlessParams::default()
    }

    fn tight() -> StepOptions {
        StepOptions {
            factor_model: FactorModel::Standard,
            cg: CgOptions {
                rel_tol: 1e-14,
                max_iter: None,
            },
        }
    }

    fn uniform_state(n: usize, t: f64, nn: f64, phi: f64, chi: f64) -> SimState {
        let u = (-chi * phi).exp() * t;
        SimState::new(
            NodalField::constant(n, u),
            NodalField::constant(n, nn),
            NodalField::constant(n, phi),
            chi,
        )
        .unwrap()
    }

    #[test]
    fn phi_update_example() {
        let p = DimensionlessParams::new(5.0, 45.0, 0.255, 2.55).unwrap();
        let f = FactorValues {
            p: 0.0,
            s: 0.0,
            r: 0.2,
            q: 0.3,
        };
        let v = phi_update(0.5, 0.1, 0.05, f, &p, 1e-3);
        assert_relative_eq!(v, 500.0255 / 1000.79815, max_relative = 1e-14);

        let zero = FactorValues::default();
        assert_eq!(phi_update(0.7, 0.0, 0.2, zero, &p, 1e-3), 0.7);
        let f = FactorValues {
            p: 0.1,
            s: 0.2,
            r: 0.3,
            q: 0.4,
        };
        assert_eq!(phi_update(0.0, 0.3, 0.2, f, &p, 1e-3), 0.0);
    }

    #[test]
    fn n_update_example() {
        let p = DimensionlessParams::new(5.0, 1.0, 0.255, 2.0).unwrap();
        let f = FactorValues {
            p: 0.0,
            s: 0.5,
            r: 0.0,
            q: 0.25,
        };
        // alpha*S*T = 1, delta*Q*Phi = 2
        assert_relative_eq!(n_update(0.0, 2.0, 4.0, f, &p, 1e-3), 0.003, max_relative = 1e-14);
        let f = FactorValues { q: 0.0, ..f };
        assert_eq!(n_update(0.4, 0.0, 0.9, f, &p, 1e-3), 0.4);
    }

    #[test]
    fn zero_state_is_fixed() {
        let mesh = build_mesh(Rect::square(2.0), 4, 4).unwrap();
        let n = mesh.node_count();
        let s0 = uniform_state(n, 0.0, 0.0, 0.0, 5.0);
        let mut st = Stepper::new(&mesh, defaults(), tight()).unwrap();
        let (s1, d) = st.advance(&s0, 1e-3).unwrap();
        assert_eq!(s1.u.max(), 0.0);
        assert_eq!(s1.n_field.max(), 0.0);
        assert_eq!(s1.phi.max(), 0.0);
        assert_eq!(d.cg_iterations, 0);
        assert_eq!(s1.step, 1);
    }

    #[test]
    fn uniform_state_matches_scalar_step() {
        let mesh = build_mesh(Rect::square(3.0), 6, 6).unwrap();
        let params = defaults();
        let (chi, dt) = (params.chi(), 1e-3);
        let (t0, n0, p0) = (0.2, 0.05, 0.6);
        let s0 = uniform_state(mesh.node_count(), t0, n0, p0, chi);
        let mut st = Stepper::new(&mesh, params, tight()).unwrap();
        let (s1, _) = st.advance(&s0, dt).unwrap();

        // scalar evaluation written out independently
        let (g, a, d) = (params.gamma, params.alpha, params.delta);
        let eps = 1e-12;
        let pp = p0 / (p0 + t0 + eps);
        let ss = (1.0 - p0) / (t0 + p0 + 1.0);
        let rr = t0 / (t0 * t0 + p0 + 1.0);
        let qq = t0 / (p0 + t0 + eps);
        let phi1 = (p0 / dt + g * rr * p0) / (1.0 / dt + g * rr * p0 + g * rr * (t0 + n0) + d * qq);
        let u0 = (-chi * p0).exp() * t0;
        let sum = t0 + n0 + p0;
        let c = pp * sum + a * ss + chi * g * rr * p0;
        let src = t0 * (pp + chi * p0 * (g * rr * sum + d * qq));
        let u1 = ((chi * p0).exp() * u0 / dt + src)
            / ((chi * p0).exp() / dt + c * (chi * phi1).exp());
        let t1 = (chi * phi1).exp() * u1;
        let n1 = n0 + dt * (a * ss * t1 + d * qq * phi1);

        for k in 0..mesh.node_count() {
            assert_relative_eq!(s1.phi[k], phi1, max_relative = 1e-12);
            assert_relative_eq!(s1.u[k], u1, max_relative = 1e-12);
            assert_relative_eq!(s1.t_field[k], t1, max_relative = 1e-12);
            assert_relative_eq!(s1.n_field[k], n1, max_relative = 1e-12);
        }
    }

    fn bump_state(mesh: &TriMesh, chi: f64) -> SimState {
        let t = nodal_interpolate(|x, y| 0.6 * (-(x * x + 0.5 * y * y)).exp(), mesh).unwrap();
        let phi = nodal_interpolate(|x, y| 0.3 + 0.4 * (0.7 * x + 0.2 * y).sin().abs(), mesh).unwrap();
        let n = nodal_interpolate(|x, _| 0.02 * (x + 3.0), mesh).unwrap();
        let u: Vec<f64> = t.iter().zip(phi.iter()).map(|(t, p)| (-chi * p).exp() * t).collect();
        SimState::new(u.into(), n, phi, chi).unwrap()
    }

    #[test]
    fn u_step_matches_dense_solve() {
        let mesh = build_mesh(Rect::square(2.0), 5, 5).unwrap();
        let params = defaults();
        let dt = 1e-2;
        let s0 = bump_state(&mesh, params.chi());
        let phi1 = step_phi(&s0, &params, dt, FactorModel::Standard);
        let (a, b) = assemble_u_system(&s0, &phi1, &params, dt, &mesh, FactorModel::Standard).unwrap();
        assert!(a.is_symmetric(0.0));
        assert!(b.iter().all(|v| *v >= 0.0));
        for i in 0..a.dim() {
            for (j, v) in a.row(i) {
                assert!(i == j || v <= 0.0);
            }
        }

        let n = a.dim();
        let dense = nalgebra::DMatrix::from_fn(n, n, |i, j| a.get(i, j));
        let rhs = nalgebra::DVector::from_column_slice(&b);
        let exact = dense.cholesky().expect("SPD").solve(&rhs);
        let (u1, rep) = step_u(&a, &b, &s0.u, &CgOptions::default(), 1).unwrap();
        assert!(rep.cg.converged);
        let scale = exact.amax();
        for i in 0..n {
            assert!((u1[i] - exact[i]).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn u_system_diagonal_by_hand() {
        // two triangles on the unit square, Phi constant so the weight is e^{chi c}
        let mesh = TriMesh::from_parts(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let params = DimensionlessParams::new(2.0, 10.0, 0.5, 1.0).unwrap();
        let chi = params.chi();
        let (t, phi, dt) = (0.3, 0.4, 0.1);
        let s0 = uniform_state(4, t, 0.0, phi, chi);
        let phi1 = step_phi(&s0, &params, dt, FactorModel::Standard);
        let (a, _) = assemble_u_system(&s0, &phi1, &params, dt, &mesh, FactorModel::Standard).unwrap();
        // node 1 is the right-angle corner of one triangle: mass 1/6, stiffness 1
        let f = crate::params::factors(phi, t).unwrap();
        let c = f.p * (t + phi) + params.alpha * f.s + chi * params.gamma * f.r * phi;
        let w = (chi * phi).exp();
        let expected = w / (6.0 * dt) + c * (chi * phi1[1]).exp() / 6.0 + w;
        assert_relative_eq!(a.get(1, 1), expected, max_relative = 1e-14);
    }

    #[test]
    fn clamp_and_abort() {
        let a = CsrMatrix::identity(3);
        let (u, rep) = step_u(&a, &[1.0, 0.5, -1e-12], &[0.0; 3], &CgOptions::default(), 4).unwrap();
        assert_eq!(u.as_ref(), &[1.0, 0.5, 0.0]);
        assert_eq!(rep.clamped, 1);
        assert_eq!(rep.raw_min, -1e-12);
        let e = step_u(&a, &[1.0, 0.5, -1e-6], &[0.0; 3], &CgOptions::default(), 4).unwrap_err();
        assert!(matches!(e, Error::Invariant { step: 4, .. }), "{e}");
        let (u, _) = step_u(&a, &[0.0; 3], &[0.3; 3], &CgOptions::default(), 1).unwrap();
        assert_eq!(u.max(), 0.0);
        let (u, rep) = step_u(&a, &[1e-300, 1e-310, 0.0], &[0.0; 3], &CgOptions::default(), 1).unwrap();
        assert_eq!(u.as_ref(), &[1e-300, 0.0, 0.0]);
        assert_eq!(rep.clamped, 0);
    }

    #[test]
    fn solver_failure_carries_step() {
        let mesh = build_mesh(Rect::square(2.0), 8, 8).unwrap();
        let params = defaults();
        let s0 = bump_state(&mesh, params.chi());
        let opts = StepOptions {
            cg: CgOptions {
                rel_tol: 1e-14,
                max_iter: Some(1),
            },
            ..Default::default()
        };
        let mut st = Stepper::new(&mesh, params, opts).unwrap();
        let e = st.advance(&s0, 1e-1).unwrap_err();
        assert!(matches!(e, Error::Solver { step: 1, .. }), "{e}");
    }

    #[test]
    fn tumor_free_state_is_invariant() {
        let mesh = build_mesh(Rect::square(3.0), 6, 6).unwrap();
        let params = defaults();
        let phi = nodal_interpolate(|x, y| 0.5 + 0.4 * (x * y).sin(), &mesh).unwrap();
        let n = nodal_interpolate(|x, _| 0.1 + 0.01 * x, &mesh).unwrap();
        let s0 = SimState::new(NodalField::zeros(mesh.node_count()), n.clone(), phi.clone(), params.chi()).unwrap();
        let mut st = Stepper::new(&mesh, params, StepOptions::default()).unwrap();
        let mut s = s0;
        for _ in 0..20 {
            s = st.advance(&s, 1e-2).unwrap().0;
            assert_eq!(s.t_field.max(), 0.0);
            assert_eq!(s.phi, phi);
            assert_eq!(s.n_field, n);
        }
    }

    #[test]
    fn reactions_off_conserves_weighted_mass() {
        let mesh = build_mesh(Rect::square(3.0), 8, 8).unwrap();
        let params = defaults();
        let chi = params.chi();
        let s0 = bump_state(&mesh, chi);
        let weighted = |s: &SimState| -> f64 {
            (0..s.node_count())
                .map(|a| mesh.lumped_masses()[a] * (chi * s.phi[a]).exp() * s.u[a])
                .sum()
        };
        let opts = StepOptions {
            factor_model: FactorModel::Zero,
            cg: CgOptions {
                rel_tol: 1e-13,
                max_iter: None,
            },
        };
        let mut st = Stepper::new(&mesh, params, opts).unwrap();
        let m0 = weighted(&s0);
        let mut s = s0.clone();
        for _ in 0..50 {
            s = st.advance(&s, 1e-2).unwrap().0;
            for a in 0..s.node_count() {
                assert_relative_eq!(s.phi[a], s0.phi[a], max_relative = 1e-14);
            }
            assert_relative_eq!(weighted(&s), m0, max_relative = 1e-10);
        }
        assert!(s.u.max() < s0.u.max());
    }

    #[test]
    fn mirrored_mesh_gives_mirrored_trajectory() {
        let bounds = Rect::square(3.0);
        let fwd = build_mesh_with(bounds, 10, 10, Diagonal::Forward).unwrap();
        let bwd = build_mesh_with(bounds, 10, 10, Diagonal::Backward).unwrap();
        let params = defaults();
        let chi = params.chi();
        // data not symmetric in x, so the comparison is nontrivial
        let init = |mesh: &TriMesh, sign: f64| {
            let t = nodal_interpolate(|x, y| 0.5 * (-((x - sign * 0.7).powi(2) + y * y)).exp(), mesh).unwrap();
            let phi = nodal_interpolate(|x, y| 0.4 + 0.3 * (sign * 0.5 * x + 0.2 * y).sin(), mesh).unwrap();
            let u: Vec<f64> = t.iter().zip(phi.iter()).map(|(t, p)| (-chi * p).exp() * t).collect();
            SimState::new(u.into(), NodalField::zeros(mesh.node_count()), phi, chi).unwrap()
        };
        let mut a = init(&fwd, 1.0);
        let mut b = init(&bwd, -1.0);
        let mut sa = Stepper::new(&fwd, params, tight()).unwrap();
        let mut sb = Stepper::new(&bwd, params, tight()).unwrap();
        for _ in 0..20 {
            a = sa.advance(&a, 1e-2).unwrap().0;
            b = sb.advance(&b, 1e-2).unwrap().0;
        }
        for k in 0..fwd.node_count() {
            let m = fwd.mirror_x(k);
            assert!((a.t_field[k] - b.t_field[m]).abs() <= 1e-10);
            assert!((a.phi[k] - b.phi[m]).abs() <= 1e-10);
            assert!((a.n_field[k] - b.n_field[m]).abs() <= 1e-10);
        }
    }

    fn fem_uniform_error(dt: f64) -> f64 {
        let mesh = build_mesh(Rect::square(1.0), 2, 2).unwrap();
        let params = defaults();
        let y0 = [0.1, 0.0, 0.3];
        let mut s = uniform_state(mesh.node_count(), y0[0], y0[1], y0[2], params.chi());
        let mut st = Stepper::new(&mesh, params, tight()).unwrap();
        let steps = (1.0 / dt).round() as usize;
        for _ in 0..steps {
            s = st.advance(&s, dt).unwrap().0;
        }
        let reference = reference_ode_solve(&params, y0, 1.0, 1e-4).unwrap().last();
        (0..s.node_count())
            .map(|a| {
                (s.t_field[a] - reference[0])
                    .abs()
                    .max((s.n_field[a] - reference[1]).abs())
                    .max((s.phi[a] - reference[2]).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn homogeneous_error_is_first_order() {
        let e2 = fem_uniform_error(2e-3);
        let e1 = fem_uniform_error(1e-3);
        let ratio = e2 / e1;
        assert!((1.7..=2.3).contains(&ratio), "errors {e2:e} {e1:e} ratio {ratio}");
    }

    #[test]
    fn ode_without_tumor_keeps_phi() {
        let traj = reference_ode_solve(&defaults(), [0.0, 0.0, 0.5], 5.0, 1e-3).unwrap();
        assert!(traj.states.iter().all(|y| *y == [0.0, 0.0, 0.5]));
        assert_eq!(*traj.times.last().unwrap(), 5.0);
    }

    #[test]
    fn ode_rejects_inadmissible_start() {
        assert!(reference_ode_solve(&defaults(), [0.1, 0.0, 1.5], 1.0, 1e-3).is_err());
        assert!(reference_ode_solve(&defaults(), [-0.1, 0.0, 0.5], 1.0, 1e-3).is_err());
    }

    // Frozen fixture: (T, N, Phi) for y0 = (0.1, 0, 0.3) and the default
    // coefficients, computed by an independent RK4 at dt = 1e-5.
    const ODE_FIXTURE: [(f64, [f64; 3]); 3] = [
        (0.1, [9.746_295_370_300_992e-3, 1.007_468_333_893_453_7e-1, 2.916_394_926_393_476e-1]),
        (0.25, [2.632_939_062_764_693_4e-4, 1.114_515_340_908_541_8e-1, 2.906_633_576_993_950_5e-1]),
        (1.0, [3.623_504_059_551_665e-12, 1.117_491_541_151_498_8e-1, 2.906_359_232_861_147e-1]),
    ];

    #[test]
    fn ode_regression_fixture() {
        let params = defaults();
        let coarse = reference_ode_solve(&params, [0.1, 0.0, 0.3], 1.0, 2e-4).unwrap();
        let fine = reference_ode_solve(&params, [0.1, 0.0, 0.3], 1.0, 1e-4).unwrap();
        for (t, expected) in ODE_FIXTURE {
            let i = (t / 1e-4_f64).round() as usize;
            let ic = (t / 2e-4_f64).round() as usize;
            assert_relative_eq!(fine.times[i], t, max_relative = 1e-12);
            for c in 0..3 {
                // Richardson: the coarse/fine gap bounds the fine error
                assert!((coarse.states[ic][c] - fine.states[i][c]).abs() <= 1e-8 * expected[c]);
                assert!(
                    (fine.states[i][c] - expected[c]).abs() <= 1e-9 * expected[c],
                    "t={t} c={c}: {} vs {}",
                    fine.states[i][c],
                    expected[c]
                );
            }
        }
    }

    #[test]
    fn ode_total_stays_bounded() {
        let traj = reference_ode_solve(&defaults(), [0.1, 0.0, 0.3], 20.0, 1e-3).unwrap();
        for y in &traj.states {
            assert!(y[0] >= -1e-12 && y[1] >= 0.0 && (0.0..=1.0).contains(&y[2]));
            assert!(y[0] + y[1] + y[2] <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn run_with_zero_final_time_records_initial_metrics() {
        let mut cfg = ScenarioConfig::with_params(defaults());
        cfg.domain.cells_per_axis = 6;
        cfg.time.t_final = 0.0;
        cfg.output.snapshot_times = vec![0.0, 3.0];
        let out = run(&cfg).unwrap();
        assert!(out.is_ok());
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].metrics.t, 0.0);
        assert_eq!(out.snapshots.len(), 1);
        assert_eq!(out.steps_completed, 0);
    }

    #[test]
    fn run_schedule() {
        let mut cfg = ScenarioConfig::with_params(defaults());
        cfg.domain.cells_per_axis = 6;
        cfg.time.dt = 0.01;
        cfg.time.t_final = 0.255;
        cfg.output.output_every = 10;
        cfg.output.snapshot_times = vec![0.1, 0.2];
        let out = run(&cfg).unwrap();
        assert!(out.is_ok());
        assert_eq!(out.steps_requested, 26);
        let times: Vec<f64> = out.rows.iter().map(|r| r.metrics.t).collect();
        assert_eq!(times.len(), 4);
        assert_relative_eq!(times[3], 0.26, max_relative = 1e-12);
        assert_eq!(out.snapshots.len(), 2);
        assert_relative_eq!(out.snapshots[1].time, 0.2, max_relative = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn trajectories_respect_bounds_and_n_grows(
            cx in -1.0f64..1.0, amp in 0.05f64..1.0, width in 0.3f64..2.0,
            phi_base in 0.0f64..0.9, phi_amp in 0.0f64..0.5,
            kappa in 0.0f64..10.0, alpha in 0.0f64..60.0, dt in 1e-3f64..5e-2,
        ) {
            let mesh = build_mesh(Rect::square(3.0), 8, 8).unwrap();
            let params = DimensionlessParams::new(kappa, alpha, 0.255, 2.55).unwrap();
            let chi = params.chi();
            let t = nodal_interpolate(|x, y| amp * (-((x - cx).powi(2) + y * y) / (width * width)).exp(), &mesh).unwrap();
            let phi = nodal_interpolate(|x, y| (phi_base + phi_amp * (x + y).cos()).clamp(0.0, 1.0), &mesh).unwrap();
            let u: Vec<f64> = t.iter().zip(phi.iter()).map(|(t, p)| (-chi * p).exp() * t).collect();
            let mut s = SimState::new(u.into(), NodalField::zeros(mesh.node_count()), phi, chi).unwrap();
            let mut st = Stepper::new(&mesh, params, StepOptions::default()).unwrap();
            for _ in 0..15 {
                let (next, d) = st.advance(&s, dt).unwrap();
                prop_assert!(d.min_u >= 0.0 && d.min_n >= 0.0 && d.min_phi >= 0.0 && d.max_phi <= 1.0);
                prop_assert!(d.raw_min_u >= -1e-12 * d.max_u.max(1.0));
                for a in 0..s.node_count() {
                    prop_assert!(next.n_field[a] >= s.n_field[a]);
                }
                s = next;
            }
        }
    }
}
