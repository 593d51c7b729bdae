use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gbm_core::mesh::nonobtuse_check;
use gbm_core::params::{check_hypotheses, DimensionlessParams};
use gbm_core::scenario::{
    read_config, write_effective_config, write_snapshot, write_sweep_summary, write_timeseries,
    ScenarioConfig, SweepSummaryRow, TumorIcKind, VasculatureKind,
};
use gbm_core::stepper::{reference_ode_solve, run, RunOutcome, SimState, StepOptions, Stepper};
use gbm_core::Error;
use rayon::prelude::*;

/// Final time of a full-length run.
const FULL_T_FINAL: f64 = 500.0;

/// `oracle` fails when the max-norm discrepancy exceeds this multiple of dt.
const ORACLE_BOUND_PER_DT: f64 = 1.0;

/// Accepted range of the error ratio under dt halving (first order gives 2).
const ORACLE_RATIO_RANGE: (f64, f64) = (1.5, 2.5);

#[derive(Parser, Debug)]
#[command(name = "gbm", version, about = "Tumor growth simulator with chemotaxis toward vasculature")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run one scenario per value of a coefficient.
    Sweep {
        /// Base scenario; without it the built-in defaults are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values; defaults depend on the parameter.
        #[arg(long)]
        values: Option<String>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Report the structural constants of the reaction factors.
    Check {
        /// Take the coefficients from a scenario file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 201)]
        phi_samples: usize,
        #[arg(long, default_value_t = 10.0)]
        t_max: f64,
        #[arg(long, default_value_t = 1001)]
        t_samples: usize,
    },
    /// Compare a spatially uniform run with an ODE reference solution.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print mesh statistics for a scenario.
    MeshInfo {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct Overrides {
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Seed for the vasculature blobs.
    #[arg(long)]
    seed: Option<u64>,
    /// Run to the full-length final time (t = 500).
    #[arg(long, conflicts_with = "t_final")]
    full: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut ScenarioConfig) -> Result<(), Error> {
        if let Some(t) = self.t_final {
            cfg.time.t_final = t;
        }
        if self.full {
            cfg.time.t_final = FULL_T_FINAL;
        }
        if let Some(dt) = self.dt {
            cfg.time.dt = dt;
        }
        if let Some(seed) = self.seed {
            cfg.vasculature_ic.seed = seed;
        }
        cfg.validate()
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SweepParam {
    Kappa,
    Alpha,
    Gamma,
    Delta,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Kappa => "kappa",
            SweepParam::Alpha => "alpha",
            SweepParam::Gamma => "gamma",
            SweepParam::Delta => "delta",
        }
    }

    fn default_values(self) -> &'static [f64] {
        match self {
            SweepParam::Kappa => &[1.0, 5.0, 10.0],
            SweepParam::Alpha => &[10.0, 45.0, 100.0],
            SweepParam::Gamma => &[0.01, 0.255, 0.5],
            SweepParam::Delta => &[0.1, 2.55, 5.0],
        }
    }

    /// Base scenario when no config is given: uniform vasculature for the
    /// ring coefficients, blobs for the vascular ones.
    fn default_config(self) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::with_params(DimensionlessParams::default());
        if matches!(self, SweepParam::Gamma | SweepParam::Delta) {
            cfg.vasculature_ic.kind = VasculatureKind::Blobs;
        }
        cfg
    }

    fn set(self, params: &mut DimensionlessParams, v: f64) {
        match self {
            SweepParam::Kappa => params.kappa = v,
            SweepParam::Alpha => params.alpha = v,
            SweepParam::Gamma => params.gamma = v,
            SweepParam::Delta => params.delta = v,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invariant { .. } => 2,
        Error::Solver { .. } => 3,
        _ => 1,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs `cfg` and writes everything under `out`. Returns the outcome even
/// when the run itself failed part way.
fn run_to_dir(cfg: &ScenarioConfig, out: &Path) -> Result<RunOutcome, Error> {
    create_dir(out)?;
    write_effective_config(cfg, &out.join("effective_config.toml"))?;
    let outcome = run(cfg)?;
    write_timeseries(&outcome.rows, &out.join("timeseries.csv"))?;
    for snap in &outcome.snapshots {
        write_snapshot(snap, &out.join(format!("snapshot_t{}.csv", snap.time)))?;
    }
    if let Some(e) = &outcome.failure {
        write_text(&out.join("error.txt"), &format!("{e}\n"))?;
    }
    Ok(outcome)
}

fn cmd_run(config: &Path, out: &Path, overrides: &Overrides) -> ExitCode {
    let result = read_config(config).and_then(|mut cfg| {
        overrides.apply(&mut cfg)?;
        run_to_dir(&cfg, out)
    });
    match result {
        Ok(outcome) => {
            if let Some(last) = outcome.last_row() {
                let m = &last.metrics;
                println!(
                    "t = {}  RQ = {:.6}  SQ = {:.6}  int(T+N) = {:.6}  steps = {}/{}",
                    m.t, m.rq, m.sq, m.int_total, outcome.steps_completed, outcome.steps_requested
                );
            }
            match outcome.failure {
                Some(e) => fail(e),
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => fail(e),
    }
}

fn parse_values(text: &str) -> Result<Vec<f64>, Error> {
    let usage = |message: String| Error::Config {
        key: "--values".into(),
        message,
    };
    let values = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| usage(format!("`{s}` is not a nonnegative number")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(usage("no values given".into()));
    }
    Ok(values)
}

struct SweepArgs<'a> {
    config: Option<&'a Path>,
    out: &'a Path,
    param: SweepParam,
    values: Option<&'a str>,
    jobs: Option<usize>,
    overrides: &'a Overrides,
}

fn cmd_sweep(args: SweepArgs) -> ExitCode {
    let setup = || -> Result<(ScenarioConfig, Vec<f64>), Error> {
        let values = match args.values {
            Some(text) => parse_values(text)?,
            None => args.param.default_values().to_vec(),
        };
        let mut base = match args.config {
            Some(path) => read_config(path)?,
            None => args.param.default_config(),
        };
        args.overrides.apply(&mut base)?;
        create_dir(args.out)?;
        Ok((base, values))
    };
    let (base, values) = match setup() {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };
    let name = args.param.name();
    let rows: Vec<SweepSummaryRow> = pool.install(|| {
        values
            .par_iter()
            .map(|&v| {
                let mut cfg = base.clone();
                args.param.set(&mut cfg.params, v);
                let dir = args.out.join(format!("{name}_{v}"));
                let result = cfg.validate().and_then(|_| run_to_dir(&cfg, &dir));
                let (last, status) = match result {
                    Ok(outcome) => {
                        let status = match &outcome.failure {
                            Some(e) => e.to_string(),
                            None => "ok".to_string(),
                        };
                        (outcome.last_row().copied(), status)
                    }
                    Err(e) => (None, e.to_string()),
                };
                eprintln!("{name} = {v}: {status}");
                let m = last.map(|r| r.metrics);
                SweepSummaryRow {
                    param: name.to_string(),
                    value: v,
                    final_rq: m.map_or(f64::NAN, |m| m.rq),
                    final_sq: m.map_or(f64::NAN, |m| m.sq),
                    final_int_total: m.map_or(f64::NAN, |m| m.int_total),
                    status,
                }
            })
            .collect()
    });
    if let Err(e) = write_sweep_summary(&rows, &args.out.join("summary.csv")) {
        return fail(e);
    }
    for r in &rows {
        println!(
            "{}={}  RQ={:.6}  SQ={:.6}  int(T+N)={:.6}  {}",
            r.param, r.value, r.final_rq, r.final_sq, r.final_int_total, r.status
        );
    }
    if rows.iter().all(|r| r.status == "ok") {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

struct CheckArgs {
    config: Option<PathBuf>,
    overrides: [Option<f64>; 4],
    phi_samples: usize,
    t_max: f64,
    t_samples: usize,
}

fn cmd_check(args: CheckArgs) -> ExitCode {
    let result = (|| {
        let mut params = match &args.config {
            Some(path) => read_config(path)?.params,
            None => DimensionlessParams::default(),
        };
        let [k, a, g, d] = args.overrides;
        params = DimensionlessParams::new(
            k.unwrap_or(params.kappa),
            a.unwrap_or(params.alpha),
            g.unwrap_or(params.gamma),
            d.unwrap_or(params.delta),
        )?;
        let report = check_hypotheses(&params, args.phi_samples, args.t_max, args.t_samples)?;
        Ok::<_, Error>((params, report))
    })();
    let (params, r) = match result {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    println!(
        "params: kappa = {}, alpha = {}, gamma = {}, delta = {}",
        params.kappa, params.alpha, params.gamma, params.delta
    );
    println!(
        "grid: {} x {} samples, Phi in [0, 1], T in [0, {}]",
        r.grid.phi_samples, r.grid.t_samples, r.grid.t_max
    );
    println!(
        "c1 = max R Phi / P = {:.12} at (Phi, T) = ({}, {})",
        r.c1, r.c1_at.0, r.c1_at.1
    );
    println!(
        "growth condition kappa * gamma * c1 = {:.12} <= 1: {}",
        params.kappa * params.gamma * r.c1,
        if r.rho_condition_holds { "holds" } else { "fails" }
    );
    println!("c2 = max |grad(R Phi)| = {:.12}", r.c2);
    println!("c3 = max |grad(Q Phi)| = {:.12}", r.c3);
    println!("c4 = max |grad(S T)| = {:.12}", r.c4);
    ExitCode::SUCCESS
}

/// Max-norm distance between a uniform FEM run and the ODE reference at the
/// config's final time.
fn uniform_error(cfg: &ScenarioConfig, dt: f64, y0: [f64; 3]) -> Result<f64, Error> {
    let mesh = cfg.build_mesh()?;
    let n = mesh.node_count();
    let chi = cfg.params.chi();
    let u0 = (-chi * y0[2]).exp() * y0[0];
    let mut state = SimState::new(
        vec![u0; n].into(),
        vec![y0[1]; n].into(),
        vec![y0[2]; n].into(),
        chi,
    )?;
    let mut stepper = Stepper::new(&mesh, cfg.params, StepOptions::default())?;
    let steps = (cfg.time.t_final / dt).round() as usize;
    for _ in 0..steps {
        state = stepper.advance(&state, dt)?.0;
    }
    let t_end = steps as f64 * dt;
    let reference = reference_ode_solve(&cfg.params, y0, t_end, 1e-4)?.last();
    let mut err: f64 = 0.0;
    for a in 0..n {
        err = err
            .max((state.t_field[a] - reference[0]).abs())
            .max((state.n_field[a] - reference[1]).abs())
            .max((state.phi[a] - reference[2]).abs());
    }
    Ok(err)
}

fn cmd_oracle(config: &Path, overrides: &Overrides) -> ExitCode {
    let result = (|| {
        let mut cfg = read_config(config)?;
        overrides.apply(&mut cfg)?;
        if cfg.tumor_ic.kind != TumorIcKind::Uniform
            || cfg.vasculature_ic.kind != VasculatureKind::Uniform
        {
            return Err(Error::Config {
                key: "tumor_ic.kind".into(),
                message: "oracle needs uniform tumor and vasculature initial data".into(),
            });
        }
        let y0 = [
            cfg.tumor_ic.amplitude,
            cfg.tumor_ic.necrosis,
            cfg.vasculature_ic.value,
        ];
        let dt = cfg.time.dt;
        let coarse = uniform_error(&cfg, dt, y0)?;
        let fine = uniform_error(&cfg, dt / 2.0, y0)?;
        Ok((cfg, coarse, fine))
    })();
    let (cfg, coarse, fine) = match result {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let dt = cfg.time.dt;
    println!("t_final = {}", cfg.time.t_final);
    println!("max-norm discrepancy at dt = {dt}: {coarse:.6e}");
    println!("max-norm discrepancy at dt = {}: {fine:.6e}", dt / 2.0);
    let bound = ORACLE_BOUND_PER_DT * dt;
    // an exact match at both resolutions has no measurable order
    let exact = coarse <= 1e-14 && fine <= 1e-14;
    let ratio = coarse / fine;
    let ratio_ok = exact || (ORACLE_RATIO_RANGE.0..=ORACLE_RATIO_RANGE.1).contains(&ratio);
    if exact {
        println!("error ratio: n/a (discrepancy at round-off level)");
    } else {
        println!("error ratio: {ratio:.4} (observed order {:.4})", ratio.log2());
    }
    println!("bound: discrepancy <= {ORACLE_BOUND_PER_DT} * dt = {bound:e}");
    if coarse <= bound && ratio_ok {
        println!("oracle: pass");
        ExitCode::SUCCESS
    } else {
        println!("oracle: FAIL");
        ExitCode::from(1)
    }
}

fn cmd_mesh_info(config: Option<&Path>) -> ExitCode {
    let cfg = match config {
        Some(path) => match read_config(path) {
            Ok(c) => c,
            Err(e) => return fail(e),
        },
        None => ScenarioConfig::with_params(DimensionlessParams::default()),
    };
    let mesh = match cfg.build_mesh() {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let angles = nonobtuse_check(&mesh);
    let d = &cfg.domain;
    println!(
        "domain: [{}, {}] x [{}, {}], {} cells per axis",
        d.xmin, d.xmax, d.ymin, d.ymax, d.cells_per_axis
    );
    println!("nodes: {}", mesh.node_count());
    println!("triangles: {}", mesh.triangle_count());
    println!("edges: {}", mesh.edge_count());
    println!("h: {} x {}", mesh.hx(), mesh.hy());
    println!("area: {}", mesh.total_area());
    println!(
        "largest angle: {:.6} deg (element {}), nonobtuse: {}",
        angles.worst_angle.to_degrees(),
        angles.worst_element,
        if angles.nonobtuse { "yes" } else { "no" }
    );
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run {
            config,
            out,
            overrides,
        } => cmd_run(&config, &out, &overrides),
        Command::Sweep {
            config,
            out,
            param,
            values,
            jobs,
            overrides,
        } => cmd_sweep(SweepArgs {
            config: config.as_deref(),
            out: &out,
            param,
            values: values.as_deref(),
            jobs,
            overrides: &overrides,
        }),
        Command::Check {
            config,
            kappa,
            alpha,
            gamma,
            delta,
            phi_samples,
            t_max,
            t_samples,
        } => cmd_check(CheckArgs {
            config,
            overrides: [kappa, alpha, gamma, delta],
            phi_samples,
            t_max,
            t_samples,
        }),
        Command::Oracle { config, overrides } => cmd_oracle(&config, &overrides),
        Command::MeshInfo { config } => cmd_mesh_info(config.as_deref()),
    }
}
