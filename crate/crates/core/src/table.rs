//! Versioned CSV tables for fringe, CHSH and aperture-sweep output.
//!
//! Every file starts with `# schema=<name>/v<version>` followed by a header
//! row. Floats carry nine significant digits; counts are written as integers.

use thiserror::Error;

use crate::analysis::FringePoint;
use crate::detection::{ChshRun, FringeScan};

pub const FRINGE_SCHEMA: &str = "fringe";
pub const CHSH_SCHEMA: &str = "chsh";
pub const SWEEP_SCHEMA: &str = "sweep";
pub const SCHEMA_VERSION: u32 = 1;

const FRINGE_COLUMNS: [&str; 6] = [
    "theta1_deg",
    "singles1",
    "singles2",
    "raw_coinc",
    "accidentals",
    "corrected",
];
const CHSH_COLUMNS: [&str; 10] = [
    "setting",
    "outcome",
    "theta1_deg",
    "theta2_deg",
    "singles1",
    "singles2",
    "raw_coinc",
    "accidentals",
    "corrected",
    "duration_s",
];
const SWEEP_COLUMNS: [&str; 5] = [
    "divergence_mrad",
    "coherence",
    "fitted_V",
    "sigma_V",
    "flux_pairs_per_s_per_mw",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TableError {
    #[error("line {line}: {reason}")]
    Row { line: usize, reason: String },
    #[error("bad schema line: {0}")]
    Schema(String),
}

fn row_err(line: usize, reason: impl Into<String>) -> TableError {
    TableError::Row {
        line,
        reason: reason.into(),
    }
}

/// `%.9g`-style formatting.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn schema_line(name: &str) -> String {
    format!("# schema={name}/v{SCHEMA_VERSION}\n")
}

pub fn write_fringe(scan: &FringeScan) -> String {
    let mut out = schema_line(FRINGE_SCHEMA);
    out.push_str(&format!("# theta2_deg={}\n", fmt_sig9(scan.theta2().to_degrees())));
    out.push_str(&FRINGE_COLUMNS.join(","));
    out.push('\n');
    for p in scan.points() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_sig9(p.theta1.to_degrees()),
            p.singles_1,
            p.singles_2,
            p.coincidences_raw,
            fmt_sig9(p.accidental_estimate),
            fmt_sig9(p.coincidences_raw as f64 - p.accidental_estimate),
        ));
    }
    out
}

pub fn write_chsh(run: &ChshRun) -> String {
    let mut out = schema_line(CHSH_SCHEMA);
    out.push_str(&CHSH_COLUMNS.join(","));
    out.push('\n');
    for (i, o, r) in run.labeled() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            i + 1,
            o.label(),
            fmt_sig9(r.theta1.to_degrees()),
            fmt_sig9(r.theta2.to_degrees()),
            r.singles_1,
            r.singles_2,
            r.coincidences_raw,
            fmt_sig9(r.accidental_estimate),
            fmt_sig9(r.coincidences_raw as f64 - r.accidental_estimate),
            fmt_sig9(r.duration),
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub divergence_mrad: f64,
    pub coherence: f64,
    pub fitted_v: f64,
    pub sigma_v: f64,
    pub flux_per_mw: f64,
}

pub fn write_sweep(rows: &[SweepRow]) -> String {
    let mut out = schema_line(SWEEP_SCHEMA);
    out.push_str(&SWEEP_COLUMNS.join(","));
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_sig9(r.divergence_mrad),
            fmt_sig9(r.coherence),
            fmt_sig9(r.fitted_v),
            fmt_sig9(r.sigma_v),
            fmt_sig9(r.flux_per_mw),
        ));
    }
    out
}

fn check_schema(line: Option<&str>, name: &str) -> Result<(), TableError> {
    let line = line.ok_or_else(|| TableError::Schema("empty file".into()))?;
    let tag = line
        .trim()
        .strip_prefix("# schema=")
        .ok_or_else(|| TableError::Schema(format!("expected `# schema={name}/v{SCHEMA_VERSION}`, got `{line}`")))?;
    let (found, version) = tag
        .split_once("/v")
        .ok_or_else(|| TableError::Schema(format!("malformed schema tag `{tag}`")))?;
    if found != name {
        return Err(TableError::Schema(format!("expected schema `{name}`, got `{found}`")));
    }
    match version.parse::<u32>() {
        Ok(SCHEMA_VERSION) => Ok(()),
        _ => Err(TableError::Schema(format!(
            "unsupported {name} schema version `{version}`; this build reads v{SCHEMA_VERSION}"
        ))),
    }
}

/// Parsed fringe table.
#[derive(Debug, Clone, PartialEq)]
pub struct FringeTable {
    /// rad, when present in the file.
    pub theta2: Option<f64>,
    pub points: Vec<FringePoint>,
}

/// Reads a table written by [`write_fringe`]. Errors name the 1-based line.
pub fn read_fringe(text: &str) -> Result<FringeTable, TableError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    check_schema(lines.next().map(|(_, l)| l), FRINGE_SCHEMA)?;
    let mut theta2 = None;
    let mut header_seen = false;
    let mut points = Vec::new();
    for (n, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("theta2_deg=") {
                let deg: f64 = v.parse().map_err(|_| row_err(n, format!("bad theta2_deg `{v}`")))?;
                theta2 = Some(deg.to_radians());
            }
            continue;
        }
        if !header_seen {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols != FRINGE_COLUMNS {
                return Err(row_err(
                    n,
                    format!("expected header `{}`, got `{line}`", FRINGE_COLUMNS.join(",")),
                ));
            }
            header_seen = true;
            continue;
        }
        points.push(parse_fringe_row(n, line)?);
    }
    if !header_seen {
        return Err(TableError::Schema("missing header row".into()));
    }
    Ok(FringeTable { theta2, points })
}

fn parse_fringe_row(n: usize, line: &str) -> Result<FringePoint, TableError> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != FRINGE_COLUMNS.len() {
        return Err(row_err(
            n,
            format!("expected {} fields, got {}", FRINGE_COLUMNS.len(), fields.len()),
        ));
    }
    let num = |i: usize| -> Result<f64, TableError> {
        let v: f64 = fields[i].parse().map_err(|_| {
            row_err(
                n,
                format!("column {}: `{}` is not a number", FRINGE_COLUMNS[i], fields[i]),
            )
        })?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(row_err(n, format!("column {}: non-finite value", FRINGE_COLUMNS[i])))
        }
    };
    let count = |i: usize| -> Result<u64, TableError> {
        fields[i].parse().map_err(|_| {
            row_err(
                n,
                format!(
                    "column {}: `{}` is not a non-negative integer",
                    FRINGE_COLUMNS[i], fields[i]
                ),
            )
        })
    };
    let theta1 = num(0)?.to_radians();
    count(1)?;
    count(2)?;
    let raw = count(3)?;
    let acc = num(4)?;
    if acc < 0.0 {
        return Err(row_err(n, "column accidentals: negative value"));
    }
    let corrected = num(5)?;
    Ok(FringePoint {
        theta1,
        corrected,
        raw: raw as f64,
    })
}
