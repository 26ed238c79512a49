//! CSV persistence for point sets, particle snapshots, trajectories and
//! response sweeps.
//!
//! Every numeric cell is written with Rust's shortest round-trip float
//! formatting, so parsing a file and writing it back reproduces it byte for
//! byte.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{ParticleSystem, Trajectory, TrajectoryRecord};
use crate::model::PointCloud;
use crate::response::OdePoint;

pub const TRAJECTORY_HEADER: [&str; 7] = ["t", "lambda", "kl1", "kl2", "cost", "l2_mu", "l2_nu"];
pub const SWEEP_HEADER: [&str; 5] = ["lambda", "Z", "V", "dV_dlambda", "E_d"];
pub const ODE_HEADER: [&str; 3] = ["t", "lambda", "V"];

/// One CSV field.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Text(_) => None,
        }
    }

    fn parse(s: &str) -> Self {
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Cell::Num(v),
            _ => Cell::Text(s.to_string()),
        }
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

/// A header plus rows of cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Csv {
            line,
            reason: format!("{other:?}"),
        },
    }
}

fn parse_cell(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Csv {
        line,
        reason: format!("`{s}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Csv {
            line,
            reason: format!("non-finite value `{s}`"),
        });
    }
    Ok(v)
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Appends a row of numbers.
    pub fn push(&mut self, row: Vec<f64>) {
        self.push_cells(row.into_iter().map(Cell::Num).collect());
    }

    pub fn push_cells(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Index of a named column.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric value at `(row, named column)`.
    pub fn number(&self, row: usize, name: &str) -> Option<f64> {
        self.rows.get(row)?.get(self.column(name)?)?.as_f64()
    }

    /// Row `i` as numbers; fails on text cells.
    pub fn numeric_row(&self, i: usize) -> Result<Vec<f64>> {
        self.rows[i]
            .iter()
            .map(|c| {
                c.as_f64().ok_or_else(|| Error::Csv {
                    line: i + 2,
                    reason: format!("`{c}` is not a number"),
                })
            })
            .collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header: Vec<String> = r
            .headers()
            .map_err(csv_error)?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_error)?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != header.len() {
                return Err(Error::Csv {
                    line,
                    reason: format!("expected {} fields, got {}", header.len(), rec.len()),
                });
            }
            rows.push(rec.iter().map(Cell::parse).collect());
        }
        Ok(Self { header, rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut s = String::new();
        File::open(path)?.read_to_string(&mut s)?;
        Self::from_csv_str(&s)
    }
}

/// Reads a headerless file with one point per row.
pub fn read_points_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    parse_points_csv(&s)
}

pub fn parse_points_csv(text: &str) -> Result<PointCloud> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut dim = None;
    let mut coords = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let d = *dim.get_or_insert(rec.len());
        if rec.len() != d {
            return Err(Error::Csv {
                line,
                reason: format!("expected {d} coordinates, got {}", rec.len()),
            });
        }
        for c in rec.iter() {
            coords.push(parse_cell(c, line)?);
        }
    }
    let dim = dim.ok_or(Error::EmptyPoints)?;
    PointCloud::new(dim, coords)
}

pub fn write_points_csv(path: impl AsRef<Path>, points: &PointCloud) -> Result<()> {
    let mut out = String::new();
    for p in points.iter() {
        let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

pub fn trajectory_table(traj: &Trajectory) -> Table {
    let mut t = Table::new(&TRAJECTORY_HEADER);
    for r in &traj.records {
        t.push(vec![r.t, r.lambda, r.kl1, r.kl2, r.cost, r.l2_mu, r.l2_nu]);
    }
    t
}

/// Rebuilds the persisted columns of a trajectory. Step indices are
/// recovered from row order; reverse divergences are not stored and read
/// back as zero.
pub fn trajectory_from_table(table: &Table) -> Result<Trajectory> {
    if table.header != TRAJECTORY_HEADER {
        return Err(Error::Csv {
            line: 1,
            reason: format!("unexpected trajectory header {:?}", table.header),
        });
    }
    let records = (0..table.rows.len())
        .map(|step| {
            let r = table.numeric_row(step)?;
            Ok(TrajectoryRecord {
                step,
                t: r[0],
                lambda: r[1],
                kl1: r[2],
                kl2: r[3],
                reverse_kl1: 0.0,
                reverse_kl2: 0.0,
                cost: r[4],
                l2_mu: r[5],
                l2_nu: r[6],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { records })
}

/// Snapshot with columns `x_1..x_d, y_1..y_d, family`.
pub fn particles_table(ps: &ParticleSystem) -> Table {
    let (dx, dy) = (ps.dim_x(), ps.dim_y());
    let mut header: Vec<String> = (1..=dx).map(|k| format!("x_{k}")).collect();
    header.extend((1..=dy).map(|k| format!("y_{k}")));
    header.push("family".into());
    let mut t = Table::new(&header);
    for (family, xs, ys) in [(1.0, &ps.x1, &ps.y1), (2.0, &ps.x2, &ps.y2)] {
        for (x, y) in xs.iter().zip(ys.iter()) {
            let mut row = Vec::with_capacity(dx + dy + 1);
            row.extend_from_slice(x);
            row.extend_from_slice(y);
            row.push(family);
            t.push(row);
        }
    }
    t
}

/// Interpolated points with columns `z_1..z_d, family`; the first half of
/// `points` belongs to family 1.
pub fn interpolant_table(points: &PointCloud) -> Table {
    let d = points.dim();
    let mut header: Vec<String> = (1..=d).map(|k| format!("z_{k}")).collect();
    header.push("family".into());
    let mut t = Table::new(&header);
    let half = points.len() / 2;
    for (i, p) in points.iter().enumerate() {
        let mut row = p.to_vec();
        row.push(if i < half { 1.0 } else { 2.0 });
        t.push(row);
    }
    t
}

pub fn ode_table(trace: &[OdePoint]) -> Table {
    let mut t = Table::new(&ODE_HEADER);
    for p in trace {
        t.push(vec![p.t, p.lambda, p.v]);
    }
    t
}
