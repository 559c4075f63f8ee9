use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use distrdd::data::format_float;
use distrdd::report::{CurveTable, LMomentRow, Stage, StageError};
use distrdd::simlab::McConfig;
use distrdd::Error;
use serde::Serialize;

/// Contents of `error.json`.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub stage: String,
    pub kind: String,
    pub message: String,
}

impl Failure {
    fn new(stage: &str, error: &Error) -> Self {
        Self {
            stage: stage.to_string(),
            kind: error.kind().to_string(),
            message: error.to_string(),
        }
    }

    pub fn at(stage: Stage) -> impl Fn(Error) -> Failure {
        move |e| Failure::from(StageError { stage, error: e })
    }

    pub fn at_output(e: Error) -> Failure {
        Failure::new("output", &e)
    }

    pub fn at_simulation(e: Error) -> Failure {
        Failure::new("simulation", &e)
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        let stage = match e.error {
            Error::WeakFirstStage { .. } => Stage::FirstStage,
            _ => e.stage,
        };
        Failure::new(stage.name(), &e.error)
    }
}

#[derive(Debug, Serialize)]
pub struct SimulationManifest<'a> {
    pub version: &'static str,
    pub seed: u64,
    pub reps: usize,
    pub config: &'a McConfig,
    pub bandwidth_rule: String,
    pub runtime_seconds: f64,
}

impl<'a> SimulationManifest<'a> {
    pub fn new(cfg: &'a McConfig, runtime_seconds: f64) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            reps: cfg.reps,
            config: cfg,
            bandwidth_rule: cfg.bandwidth.to_string(),
            runtime_seconds,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialise {}: {e}", path.display())))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_error(path: &Path, f: &Failure) -> Result<(), Error> {
    write_json(path, f)
}

pub fn write_curves(path: &Path, c: &CurveTable, effect_label: &str) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "u,q0,q1,{effect_label},contribution,band_lo,band_hi")?;
    for i in 0..c.u.len() {
        let row = [
            c.u[i],
            c.q0[i],
            c.q1[i],
            c.effect[i],
            c.contribution[i],
            c.band_lo[i],
            c.band_hi[i],
        ];
        let cells: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_lmoments(path: &Path, rows: &[LMomentRow]) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "k,share")?;
    for r in rows {
        writeln!(w, "{},{}", r.k, format_float(r.share))?;
    }
    w.flush()?;
    Ok(())
}
