//! CSV training logs.
//!
//! `train_log.csv`: `step,L_id_g,L_id_l,L_tri_g,L_tri_l,L_cen_g,L_cen_l,total`,
//! one row per optimization step; global columns are empty when the global
//! branch is off. `epochs.csv`: `epoch,steps,mean_total,seconds`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use plr_core::trainer::StepLog;

use crate::error::{io_err, ReidError, Result};

pub const STEP_LOG: &str = "train_log.csv";
pub const EPOCH_LOG: &str = "epochs.csv";
pub const STEP_HEADER: &str = "step,L_id_g,L_id_l,L_tri_g,L_tri_l,L_cen_g,L_cen_l,total";
pub const EPOCH_HEADER: &str = "epoch,steps,mean_total,seconds";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn step_row(s: &StepLog) -> String {
    let l = &s.losses;
    format!(
        "{},{},{},{},{},{},{},{}",
        s.step,
        opt(l.id_global),
        l.id_local,
        opt(l.triplet_global),
        l.triplet_local,
        opt(l.center_global),
        l.center_local,
        l.total
    )
}

struct Sink {
    path: PathBuf,
    file: File,
}

impl Sink {
    /// Appends when `resume` is set and the file exists, truncates otherwise.
    fn open(path: PathBuf, header: &str, resume: bool) -> Result<Self> {
        let append = resume && path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(io_err(&path))?;
        if !append {
            writeln!(file, "{header}").map_err(io_err(&path))?;
        }
        Ok(Sink { path, file })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.file, "{s}").map_err(io_err(&self.path))
    }
}

pub struct TrainLog {
    steps: Sink,
    epochs: Sink,
}

impl TrainLog {
    pub fn create(dir: &Path, resume: bool) -> Result<Self> {
        Ok(TrainLog {
            steps: Sink::open(dir.join(STEP_LOG), STEP_HEADER, resume)?,
            epochs: Sink::open(dir.join(EPOCH_LOG), EPOCH_HEADER, resume)?,
        })
    }

    pub fn step(&mut self, s: &StepLog) -> Result<()> {
        self.steps.line(&step_row(s))
    }

    pub fn epoch(&mut self, epoch: usize, steps: usize, mean_total: f64, seconds: f64) -> Result<()> {
        self.epochs.line(&format!("{epoch},{steps},{mean_total},{seconds:.3}"))?;
        self.steps.file.flush().map_err(io_err(&self.steps.path))
    }
}

/// `(step, total)` pairs from a step log.
pub fn read_totals(path: &Path) -> Result<Vec<(u64, f64)>> {
    let f = File::open(path).map_err(io_err(path))?;
    let bad = |line: &str| ReidError::Corrupt { path: path.to_path_buf(), reason: format!("bad log line {line:?}") };
    let mut out = Vec::new();
    for line in BufReader::new(f).lines().skip(1) {
        let line = line.map_err(io_err(path))?;
        let cols: Vec<&str> = line.split(',').collect();
        let (Some(s), Some(t)) = (cols.first(), cols.last()) else { return Err(bad(&line)) };
        out.push((s.parse().map_err(|_| bad(&line))?, t.parse().map_err(|_| bad(&line))?));
    }
    Ok(out)
}
