//! Scenario files, initial conditions and CSV output.
//!
//! A scenario is a sectioned `key = value` file:
//!
//! ```toml
//! [domain]
//! xmin = -9.0
//! xmax = 9.0
//! ymin = -9.0
//! ymax = 9.0
//! cells_per_axis = 45
//!
//! [time]
//! dt = 0.001
//! t_final = 10.0
//!
//! [params]          # required, all four keys
//! kappa = 5.0
//! alpha = 45.0
//! gamma = 0.255
//! delta = 2.55
//!
//! [tumor_ic]
//! kind = "gaussian" # or "uniform"
//! center_x = 0.0
//! center_y = 0.0
//! amplitude = 0.5
//! width = 1.0
//! necrosis = 0.0
//!
//! [vasculature_ic]
//! kind = "uniform"  # or "blobs"
//! value = 0.5
//! count = 8
//! amplitude = 0.8
//! width = 1.5
//! base = 0.0
//! seed = 42
//!
//! [output]
//! output_every = 100
//! snapshot_times = [0.0, 10.0]
//! ```
//!
//! Every section except `[params]` may be omitted; the values above are the
//! defaults. Unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{build_mesh, nodal_interpolate, NodalField, Rect, StructuredTriMesh, TriMesh};
use crate::params::DimensionlessParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSection {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub cells_per_axis: usize,
}

impl Default for DomainSection {
    fn default() -> Self {
        DomainSection {
            xmin: -9.0,
            xmax: 9.0,
            ymin: -9.0,
            ymax: 9.0,
            cells_per_axis: 45,
        }
    }
}

impl DomainSection {
    pub fn rect(&self) -> Rect {
        Rect::new(self.xmin, self.xmax, self.ymin, self.ymax)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSection {
    pub dt: f64,
    pub t_final: f64,
}

impl Default for TimeSection {
    fn default() -> Self {
        TimeSection {
            dt: 1e-3,
            t_final: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TumorIcKind {
    /// `amplitude * exp(-|x - center|^2 / width^2)`.
    #[default]
    Gaussian,
    /// `amplitude` everywhere.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TumorIc {
    pub kind: TumorIcKind,
    pub center_x: f64,
    pub center_y: f64,
    pub amplitude: f64,
    pub width: f64,
    /// Constant initial necrosis.
    pub necrosis: f64,
}

impl Default for TumorIc {
    fn default() -> Self {
        TumorIc {
            kind: TumorIcKind::Gaussian,
            center_x: 0.0,
            center_y: 0.0,
            amplitude: 0.5,
            width: 1.0,
            necrosis: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VasculatureKind {
    #[default]
    Uniform,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VasculatureIc {
    pub kind: VasculatureKind,
    /// Level of the uniform field.
    pub value: f64,
    /// Number of Gaussian blobs.
    pub count: usize,
    pub amplitude: f64,
    pub width: f64,
    /// Constant added under the blobs before clamping.
    pub base: f64,
    /// Seed of the SplitMix64 stream placing the blob centers.
    pub seed: u64,
}

impl Default for VasculatureIc {
    fn default() -> Self {
        VasculatureIc {
            kind: VasculatureKind::Uniform,
            value: 0.5,
            count: 8,
            amplitude: 0.8,
            width: 1.5,
            base: 0.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Metrics are recorded every this many steps (and at the last step).
    pub output_every: usize,
    pub snapshot_times: Vec<f64>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            output_every: 100,
            snapshot_times: Vec::new(),
        }
    }
}

/// A complete, validated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub domain: DomainSection,
    #[serde(default)]
    pub time: TimeSection,
    pub params: DimensionlessParams,
    #[serde(default)]
    pub tumor_ic: TumorIc,
    #[serde(default)]
    pub vasculature_ic: VasculatureIc,
    #[serde(default)]
    pub output: OutputSection,
}

impl ScenarioConfig {
    /// Defaults everywhere with the given coefficients.
    pub fn with_params(params: DimensionlessParams) -> Self {
        ScenarioConfig {
            domain: DomainSection::default(),
            time: TimeSection::default(),
            params,
            tumor_ic: TumorIc::default(),
            vasculature_ic: VasculatureIc::default(),
            output: OutputSection::default(),
        }
    }

    /// Number of time steps, `ceil(t_final / dt)`.
    pub fn step_count(&self) -> usize {
        let ratio = self.time.t_final / self.time.dt;
        // absorb the round-off of e.g. 10 / 0.001
        (ratio - 1e-9 * ratio.max(1.0)).ceil().max(0.0) as usize
    }

    pub fn build_mesh(&self) -> Result<StructuredTriMesh> {
        let n = self.domain.cells_per_axis;
        build_mesh(self.domain.rect(), n, n)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.domain;
        for (key, v) in [
            ("domain.xmin", d.xmin),
            ("domain.xmax", d.xmax),
            ("domain.ymin", d.ymin),
            ("domain.ymax", d.ymax),
        ] {
            if !v.is_finite() {
                return Err(Error::config(key, "must be finite"));
            }
        }
        if d.xmax <= d.xmin {
            return Err(Error::config("domain.xmax", "must exceed domain.xmin"));
        }
        if d.ymax <= d.ymin {
            return Err(Error::config("domain.ymax", "must exceed domain.ymin"));
        }
        if d.cells_per_axis == 0 {
            return Err(Error::config("domain.cells_per_axis", "must be >= 1"));
        }
        if !(self.time.dt > 0.0 && self.time.dt.is_finite()) {
            return Err(Error::config("time.dt", format!("must be > 0, got {}", self.time.dt)));
        }
        if !(self.time.t_final >= 0.0 && self.time.t_final.is_finite()) {
            return Err(Error::config(
                "time.t_final",
                format!("must be >= 0, got {}", self.time.t_final),
            ));
        }
        for (key, v) in [
            ("params.kappa", self.params.kappa),
            ("params.alpha", self.params.alpha),
            ("params.gamma", self.params.gamma),
            ("params.delta", self.params.delta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be >= 0, got {v}")));
            }
        }
        let t = &self.tumor_ic;
        if !(t.amplitude > 0.0 && t.amplitude <= 1.0) {
            return Err(Error::config(
                "tumor_ic.amplitude",
                format!("must be in (0, 1], got {}", t.amplitude),
            ));
        }
        if t.kind == TumorIcKind::Gaussian && !(t.width > 0.0 && t.width.is_finite()) {
            return Err(Error::config("tumor_ic.width", "must be > 0"));
        }
        if !(t.center_x.is_finite() && t.center_y.is_finite()) {
            return Err(Error::config("tumor_ic.center_x", "center must be finite"));
        }
        if !(0.0..=1.0).contains(&t.necrosis) {
            return Err(Error::config("tumor_ic.necrosis", "must be in [0, 1]"));
        }
        let v = &self.vasculature_ic;
        if !(0.0..=1.0).contains(&v.value) {
            return Err(Error::config(
                "vasculature_ic.value",
                format!("must be in [0, 1], got {}", v.value),
            ));
        }
        if v.kind == VasculatureKind::Blobs {
            if !(v.amplitude >= 0.0 && v.amplitude.is_finite()) {
                return Err(Error::config("vasculature_ic.amplitude", "must be >= 0"));
            }
            if !(v.width > 0.0 && v.width.is_finite()) {
                return Err(Error::config("vasculature_ic.width", "must be > 0"));
            }
            if !(0.0..=1.0).contains(&v.base) {
                return Err(Error::config("vasculature_ic.base", "must be in [0, 1]"));
            }
        }
        if self.output.output_every == 0 {
            return Err(Error::config("output.output_every", "must be >= 1"));
        }
        if let Some(bad) = self
            .output
            .snapshot_times
            .iter()
            .find(|s| !(**s >= 0.0 && s.is_finite()))
        {
            return Err(Error::config(
                "output.snapshot_times",
                format!("times must be >= 0, got {bad}"),
            ));
        }
        Ok(())
    }

    /// Serializes to the scenario format; parsing the result gives back an
    /// equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config is always serializable")
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a scenario file.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
        let key = match e.span() {
            Some(span) => format!("line {}", line_of(text, span.start)),
            None => "<input>".to_string(),
        };
        Error::config(key, e.message().trim())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config { key, message } => Error::Config {
            key: format!("{}: {key}", path.display()),
            message,
        },
        other => other,
    })
}

/// Initial `(u, N, Phi)` on the nodes of `mesh`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialFields {
    pub u: NodalField,
    pub n: NodalField,
    pub phi: NodalField,
    pub t: NodalField,
}

/// Uniform variate in `[0, 1)` from the top 53 bits of the stream.
fn unit_f64(rng: &mut SplitMix64) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Blob centers drawn uniformly over the domain from a SplitMix64 stream.
/// Each center consumes two draws, x then y.
pub fn blob_centers(cfg: &ScenarioConfig) -> Vec<[f64; 2]> {
    let d = &cfg.domain;
    let mut rng = SplitMix64::seed_from_u64(cfg.vasculature_ic.seed);
    (0..cfg.vasculature_ic.count)
        .map(|_| {
            let x = d.xmin + unit_f64(&mut rng) * (d.xmax - d.xmin);
            let y = d.ymin + unit_f64(&mut rng) * (d.ymax - d.ymin);
            [x, y]
        })
        .collect()
}

/// Interpolates the configured initial data. All three densities are
/// clamped to `[0, 1]` and `u = exp(-chi * Phi) * T`.
pub fn generate_initial_fields(cfg: &ScenarioConfig, mesh: &TriMesh) -> Result<InitialFields> {
    let ti = &cfg.tumor_ic;
    let t = match ti.kind {
        TumorIcKind::Gaussian => {
            let w2 = ti.width * ti.width;
            nodal_interpolate(
                |x, y| {
                    let r2 = (x - ti.center_x).powi(2) + (y - ti.center_y).powi(2);
                    (ti.amplitude * (-r2 / w2).exp()).clamp(0.0, 1.0)
                },
                mesh,
            )?
        }
        TumorIcKind::Uniform => NodalField::constant(mesh.node_count(), ti.amplitude),
    };
    let vi = &cfg.vasculature_ic;
    let phi = match vi.kind {
        VasculatureKind::Uniform => NodalField::constant(mesh.node_count(), vi.value),
        VasculatureKind::Blobs => {
            let centers = blob_centers(cfg);
            let w2 = vi.width * vi.width;
            nodal_interpolate(
                |x, y| {
                    let s: f64 = centers
                        .iter()
                        .map(|c| (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) / w2).exp())
                        .sum();
                    (vi.base + vi.amplitude * s).clamp(0.0, 1.0)
                },
                mesh,
            )?
        }
    };
    let n = NodalField::constant(mesh.node_count(), ti.necrosis);
    let chi = cfg.params.chi();
    let u: NodalField = t
        .iter()
        .zip(phi.iter())
        .map(|(t, p)| (-chi * p).exp() * t)
        .collect::<Vec<_>>()
        .into();
    Ok(InitialFields { u, n, phi, t })
}

/// Per-node values at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRecord {
    pub time: f64,
    /// `(x, y, T, N, Phi, u)` per node.
    pub rows: Vec<[f64; 6]>,
}

pub const SNAPSHOT_HEADER: &str = "x,y,T,N,Phi,u";
pub const TIMESERIES_HEADER: &str =
    "t,RQ,SQ,int_T,int_N,int_total,area,r_max,min_u,min_N,min_Phi,max_Phi,cg_iters";
pub const SWEEP_HEADER: &str = "param,value,final_RQ,final_SQ,final_int_total,status";

/// 17 significant digits, enough to round-trip any f64.
fn push_num(line: &mut String, v: f64) {
    write!(line, "{v:.16e}").unwrap();
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write_all = || -> std::io::Result<()> {
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        for line in lines {
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write_all().map_err(|e| Error::io(path, e))
}

fn join_nums(values: &[f64]) -> String {
    let mut line = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        push_num(&mut line, *v);
    }
    line
}

pub fn write_snapshot(record: &SnapshotRecord, path: &Path) -> Result<()> {
    write_lines(path, SNAPSHOT_HEADER, record.rows.iter().map(|r| join_nums(r)))
}

/// Reads a file written by [`write_snapshot`]. The time is not stored in the
/// file and is passed through.
pub fn read_snapshot(path: &Path, time: f64) -> Result<SnapshotRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SNAPSHOT_HEADER) {
        return Err(Error::config(path.display().to_string(), "bad snapshot header"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut row = [0.0; 6];
        let mut count = 0;
        for (k, tok) in line.split(',').enumerate() {
            if k >= 6 {
                count = 7;
                break;
            }
            row[k] = tok.parse().map_err(|_| {
                Error::config(format!("{} line {}", path.display(), i + 2), "bad number")
            })?;
            count += 1;
        }
        if count != 6 {
            return Err(Error::config(
                format!("{} line {}", path.display(), i + 2),
                "expected 6 columns",
            ));
        }
        rows.push(row);
    }
    Ok(SnapshotRecord { time, rows })
}

/// One line of the metrics time series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSeriesRow {
    pub metrics: crate::metrics::MetricsSample,
    pub min_u: f64,
    pub min_n: f64,
    pub min_phi: f64,
    pub max_phi: f64,
    /// CG iterations of the step that produced this state (0 initially).
    pub cg_iters: usize,
}

pub fn format_timeseries_row(r: &TimeSeriesRow) -> String {
    let m = &r.metrics;
    let mut line = join_nums(&[
        m.t,
        m.rq,
        m.sq,
        m.int_t,
        m.int_n,
        m.int_total,
        m.area,
        m.r_max,
        r.min_u,
        r.min_n,
        r.min_phi,
        r.max_phi,
    ]);
    write!(line, ",{}", r.cg_iters).unwrap();
    line
}

pub fn write_timeseries(samples: &[TimeSeriesRow], path: &Path) -> Result<()> {
    write_lines(path, TIMESERIES_HEADER, samples.iter().map(format_timeseries_row))
}

/// Final values of one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummaryRow {
    pub param: String,
    pub value: f64,
    pub final_rq: f64,
    pub final_sq: f64,
    pub final_int_total: f64,
    /// `ok` or a one-line failure description.
    pub status: String,
}

pub fn write_sweep_summary(rows: &[SweepSummaryRow], path: &Path) -> Result<()> {
    write_lines(
        path,
        SWEEP_HEADER,
        rows.iter().map(|r| {
            let mut line = format!("{},", r.param);
            line.push_str(&join_nums(&[r.value, r.final_rq, r.final_sq, r.final_int_total]));
            let status = r.status.replace([',', '\n', '\r'], ";");
            write!(line, ",{status}").unwrap();
            line
        }),
    )
}

pub fn write_effective_config(cfg: &ScenarioConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.to_toml()).map_err(|e| Error::io(path, e))
}
