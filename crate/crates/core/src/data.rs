//! Observation schema, CSV ingestion and dataset validation.
//!
//! The right side of the cutoff is `x >= x0` and the left side is `x < x0`;
//! an observation sitting exactly on the cutoff is treated.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which design the dataset is analysed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Design {
    SharpRdd,
    FuzzyRdd,
    SharpKink,
    FuzzyKink,
}

impl Design {
    pub fn is_kink(self) -> bool {
        matches!(self, Design::SharpKink | Design::FuzzyKink)
    }
}

/// Estimation window relative to the cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    /// `x < x0`
    Left,
    /// `x >= x0`
    Right,
    /// Both sides pooled, used where the target is continuous at the cutoff.
    Both,
}

impl Side {
    #[inline]
    pub fn contains(self, x: f64, cutoff: f64) -> bool {
        match self {
            Side::Left => x < cutoff,
            Side::Right => x >= cutoff,
            Side::Both => true,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Both => "pooled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Running variable.
    pub x: f64,
    /// Treatment indicator, absent for kink designs.
    pub a: Option<u8>,
    /// Outcome.
    pub y: f64,
    /// Continuous treatment / benefit level (kink designs).
    pub t: Option<f64>,
}

impl Observation {
    pub fn new(x: f64, a: Option<u8>, y: f64, t: Option<f64>) -> Self {
        Self { x, a, y, t }
    }

    /// Treatment indicator as a real number, zero when absent.
    #[inline]
    pub fn treated(&self) -> f64 {
        f64::from(self.a.unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    observations: Vec<Observation>,
    cutoff: f64,
    design: Design,
    benefit_slopes: Option<(f64, f64)>,
    dropped_rows: Vec<usize>,
}

impl Dataset {
    /// Build a dataset, checking the invariants of the declared design.
    pub fn new(observations: Vec<Observation>, cutoff: f64, design: Design) -> Result<Self> {
        Self::build(observations, cutoff, design, None, Vec::new())
    }

    /// A sharp kink dataset whose benefit rule is declared through its one-sided
    /// slopes `(b'(x0-), b'(x0+))` instead of an observed `t` column.
    pub fn with_benefit_slopes(
        observations: Vec<Observation>,
        cutoff: f64,
        left_slope: f64,
        right_slope: f64,
    ) -> Result<Self> {
        Self::build(
            observations,
            cutoff,
            Design::SharpKink,
            Some((left_slope, right_slope)),
            Vec::new(),
        )
    }

    /// The same observations as a sharp kink with declared benefit slopes.
    pub fn declare_benefit_slopes(&self, left_slope: f64, right_slope: f64) -> Result<Self> {
        Self::build(
            self.observations.clone(),
            self.cutoff,
            Design::SharpKink,
            Some((left_slope, right_slope)),
            self.dropped_rows.clone(),
        )
    }

    fn build(
        observations: Vec<Observation>,
        cutoff: f64,
        design: Design,
        benefit_slopes: Option<(f64, f64)>,
        dropped_rows: Vec<usize>,
    ) -> Result<Self> {
        if !cutoff.is_finite() {
            return Err(Error::InvalidDataset(format!("cutoff {cutoff} is not finite")));
        }
        if let Some((l, r)) = benefit_slopes {
            if !(l.is_finite() && r.is_finite()) {
                return Err(Error::InvalidDataset("benefit slopes must be finite".into()));
            }
        }
        for (i, o) in observations.iter().enumerate() {
            if !(o.x.is_finite() && o.y.is_finite()) {
                return Err(Error::InvalidDataset(format!("row {}: non-finite x or y", i + 1)));
            }
            if let Some(a) = o.a {
                if a > 1 {
                    return Err(Error::InvalidDataset(format!("row {}: a must be 0 or 1", i + 1)));
                }
            }
            if let Some(t) = o.t {
                if !t.is_finite() {
                    return Err(Error::InvalidDataset(format!("row {}: non-finite t", i + 1)));
                }
            }
            match design {
                Design::FuzzyRdd if o.a.is_none() => {
                    return Err(Error::InvalidDataset(format!(
                        "row {}: fuzzy design requires a treatment indicator",
                        i + 1
                    )));
                }
                Design::FuzzyKink if o.t.is_none() => {
                    return Err(Error::InvalidDataset(format!(
                        "row {}: fuzzy kink design requires a treatment level",
                        i + 1
                    )));
                }
                Design::SharpKink if o.t.is_none() && benefit_slopes.is_none() => {
                    return Err(Error::InvalidDataset(format!(
                        "row {}: sharp kink design requires a treatment level or declared slopes",
                        i + 1
                    )));
                }
                _ => {}
            }
        }
        let n_right = observations.iter().filter(|o| o.x >= cutoff).count();
        let n_left = observations.len() - n_right;
        if n_left < 2 {
            return Err(Error::EmptySide { side: Side::Left, count: n_left });
        }
        if n_right < 2 {
            return Err(Error::EmptySide { side: Side::Right, count: n_right });
        }
        Ok(Self {
            observations,
            cutoff,
            design,
            benefit_slopes,
            dropped_rows,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn design(&self) -> Design {
        self.design
    }

    /// Declared `(b'(x0-), b'(x0+))`, if any.
    pub fn benefit_slopes(&self) -> Option<(f64, f64)> {
        self.benefit_slopes
    }

    /// 1-based data rows dropped at ingestion because a required cell was empty.
    pub fn dropped_rows(&self) -> &[usize] {
        &self.dropped_rows
    }

    /// Same observations analysed under another design.
    pub fn with_design(&self, design: Design) -> Result<Self> {
        Self::build(
            self.observations.clone(),
            self.cutoff,
            design,
            self.benefit_slopes,
            self.dropped_rows.clone(),
        )
    }

    pub fn side_count(&self, side: Side) -> usize {
        self.observations
            .iter()
            .filter(|o| side.contains(o.x, self.cutoff))
            .count()
    }

    pub fn xs(&self) -> impl Iterator<Item = f64> + '_ {
        self.observations.iter().map(|o| o.x)
    }

    pub fn ys(&self) -> impl Iterator<Item = f64> + '_ {
        self.observations.iter().map(|o| o.y)
    }
}

/// Mapping from dataset fields to CSV header names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub x: String,
    pub y: String,
    pub a: Option<String>,
    pub t: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            x: "x".into(),
            y: "y".into(),
            a: Some("a".into()),
            t: None,
        }
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "na" | "NaN" | "nan" | "null")
}

fn parse_real(cell: &str, row: usize, column: &str) -> Result<f64> {
    let parse_err = || Error::Parse {
        row,
        column: column.to_owned(),
        value: cell.to_owned(),
    };
    let v: f64 = cell.trim().parse().map_err(|_| parse_err())?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(parse_err())
    }
}

fn parse_indicator(cell: &str, row: usize, column: &str) -> Result<u8> {
    let v = parse_real(cell, row, column)?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::Parse {
            row,
            column: column.to_owned(),
            value: cell.to_owned(),
        })
    }
}

/// Read a CSV file with a header row into a [`Dataset`].
///
/// Rows with an empty (or `NA`) required cell are dropped and listed in
/// [`Dataset::dropped_rows`]; a non-empty cell that does not parse is an error
/// naming the 1-based data row.
pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &ColumnMap,
    design: Design,
    cutoff: f64,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let x_idx = find(&schema.x)?;
    let y_idx = find(&schema.y)?;
    let a_idx = match &schema.a {
        Some(name) if design == Design::FuzzyRdd || headers.iter().any(|h| h == name) => {
            Some(find(name)?)
        }
        _ => None,
    };
    if design == Design::FuzzyRdd && a_idx.is_none() {
        return Err(Error::MissingColumn("treatment indicator".into()));
    }
    let t_idx = match &schema.t {
        Some(name) => Some(find(name)?),
        None => None,
    };

    let needs_a = design == Design::FuzzyRdd;
    let needs_t = design.is_kink();
    let mut observations = Vec::new();
    let mut dropped = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |idx: usize| record.get(idx).unwrap_or("");
        let mut required = vec![x_idx, y_idx];
        if needs_a {
            required.extend(a_idx);
        }
        if needs_t {
            required.extend(t_idx);
        }
        if required.iter().any(|&idx| is_missing(cell(idx))) {
            dropped.push(row);
            continue;
        }
        let x = parse_real(cell(x_idx), row, &schema.x)?;
        let y = parse_real(cell(y_idx), row, &schema.y)?;
        let a = match (a_idx, &schema.a) {
            (Some(idx), Some(name)) if !is_missing(cell(idx)) => {
                Some(parse_indicator(cell(idx), row, name)?)
            }
            _ => None,
        };
        let t = match (t_idx, &schema.t) {
            (Some(idx), Some(name)) if !is_missing(cell(idx)) => {
                Some(parse_real(cell(idx), row, name)?)
            }
            _ => None,
        };
        observations.push(Observation { x, a, y, t });
    }
    Dataset::build(observations, cutoff, design, None, dropped)
}

/// Format a float with 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write the numeric fields back out as CSV using the `x,a,y,t` layout.
pub fn write_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "a", "y", "t"])?;
    for o in d.observations() {
        w.write_record([
            format_float(o.x),
            o.a.map(|a| a.to_string()).unwrap_or_default(),
            format_float(o.y),
            o.t.map(format_float).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Summary of a dataset's side counts and treatment rates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_left: usize,
    pub n_right: usize,
    /// Fraction treated left / right of the cutoff, when an indicator is present.
    pub side_treatment_rates: Option<(f64, f64)>,
    pub dropped_rows: usize,
    pub warnings: Vec<String>,
}

/// Default minimum jump in raw treatment rates before a fuzzy design is flagged.
pub const DEFAULT_FIRST_STAGE_WARNING: f64 = 0.05;

/// Check a dataset against its design. Never fails; problems become warnings.
pub fn validate(d: &Dataset, first_stage_threshold: f64) -> ValidationReport {
    let x0 = d.cutoff();
    let n_right = d.side_count(Side::Right);
    let n_left = d.len() - n_right;

    let with_a: Vec<&Observation> = d.observations().iter().filter(|o| o.a.is_some()).collect();
    let side_treatment_rates = if with_a.is_empty() {
        None
    } else {
        let rate = |side: Side| {
            let (n, k) = with_a
                .iter()
                .filter(|o| side.contains(o.x, x0))
                .fold((0usize, 0usize), |(n, k), o| (n + 1, k + usize::from(o.a == Some(1))));
            if n == 0 {
                f64::NAN
            } else {
                k as f64 / n as f64
            }
        };
        Some((rate(Side::Left), rate(Side::Right)))
    };

    let mut warnings = Vec::new();
    if !d.dropped_rows().is_empty() {
        warnings.push(format!(
            "{} rows dropped for missing required fields",
            d.dropped_rows().len()
        ));
    }
    match d.design() {
        Design::SharpRdd => {
            for (i, o) in d.observations().iter().enumerate() {
                if let Some(a) = o.a {
                    let expected = u8::from(o.x >= x0);
                    if a != expected {
                        warnings.push(format!("sharp rule violated at row {}", i + 1));
                    }
                }
            }
        }
        Design::FuzzyRdd => {
            if let Some((l, r)) = side_treatment_rates {
                if !((r - l).abs() >= first_stage_threshold) {
                    warnings.push(format!(
                        "weak first stage: treated fraction {l:.4} left vs {r:.4} right"
                    ));
                }
            }
        }
        Design::SharpKink | Design::FuzzyKink => {
            if let Some((l, r)) = d.benefit_slopes() {
                if l == r {
                    warnings.push("declared benefit slopes do not kink".into());
                }
            }
        }
    }

    ValidationReport {
        n_left,
        n_right,
        side_treatment_rates,
        dropped_rows: d.dropped_rows().len(),
        warnings,
    }
}
