//! Run logs and output directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

use pgcert_core::{RunRecord, RunStatus};

/// One logged iterate. The log ends with a row for the final iterate, which
/// took no step and so has no `eta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub t: u64,
    pub eta: Option<f64>,
    pub j: f64,
    pub gap: f64,
    pub grad_j_sq: f64,
    pub grad_jh_sq: f64,
    pub objective: f64,
    pub grad_obj_sq: f64,
    pub trajectories: u64,
    pub env_steps: u64,
}

pub const LOG_COLUMNS: [&str; 10] = [
    "t",
    "eta",
    "j",
    "gap",
    "grad_j_sq",
    "grad_jh_sq",
    "objective",
    "grad_obj_sq",
    "trajectories",
    "env_steps",
];

pub fn log_rows(run: &RunRecord, j_star: f64) -> Vec<LogRow> {
    let mut rows: Vec<LogRow> = run
        .rows
        .iter()
        .map(|r| LogRow {
            t: r.t,
            eta: Some(r.eta),
            j: r.j,
            gap: j_star - r.j,
            grad_j_sq: r.grad_j_sq,
            grad_jh_sq: r.grad_jh_sq,
            objective: r.objective,
            grad_obj_sq: r.grad_obj_sq,
            trajectories: r.trajectories,
            env_steps: r.env_steps,
        })
        .collect();
    let e = &run.final_eval;
    rows.push(LogRow {
        t: run.final_t,
        eta: None,
        j: e.j,
        gap: j_star - e.j,
        grad_j_sq: e.grad_j_sq,
        grad_jh_sq: e.grad_jh_sq,
        objective: e.objective,
        grad_obj_sq: e.grad_obj_sq,
        trajectories: run.trajectories(),
        env_steps: run.env_steps(),
    });
    rows
}

pub fn jsonl<T: Serialize>(rows: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn pretty<T: Serialize + ?Sized>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// Per-seed outcome recorded in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    #[serde(flatten)]
    pub status: RunStatus,
    pub final_t: u64,
    pub final_j: f64,
    pub j_star: f64,
    pub gap: f64,
    pub final_grad_j_sq: f64,
    pub min_grad_j_sq: Option<f64>,
    pub min_grad_t: Option<u64>,
    pub mean_grad_j_sq: Option<f64>,
    pub trajectories: u64,
    pub env_steps: u64,
}

impl SeedSummary {
    pub fn new(seed: u64, run: &RunRecord, j_star: f64) -> Self {
        let best = run.min_grad_j_sq();
        Self {
            seed,
            status: run.status.clone(),
            final_t: run.final_t,
            final_j: run.final_eval.j,
            j_star,
            gap: j_star - run.final_eval.j,
            final_grad_j_sq: run.final_eval.grad_j_sq,
            min_grad_j_sq: best.map(|b| b.1),
            min_grad_t: best.map(|b| b.0),
            mean_grad_j_sq: run.mean_grad_j_sq(),
            trajectories: run.trajectories(),
            env_steps: run.env_steps(),
        }
    }

    pub fn aborted(&self) -> bool {
        matches!(self.status, RunStatus::Aborted { .. })
    }
}

/// Run metadata, kept apart from the reproducible outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub created_unix: u64,
    pub jobs: usize,
}

impl Meta {
    pub fn new(command: &str, jobs: usize) -> Self {
        Self {
            tool: "pgcert",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            jobs,
        }
    }
}

/// Files assembled in memory and written only once everything succeeded.
#[derive(Debug, Default)]
pub struct OutputSet {
    files: Vec<(String, Vec<u8>)>,
}

impl OutputSet {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    /// Writes each file beside its final name and renames it into place.
    pub fn commit(&self, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            let tmp = dir.join(format!(".{name}.partial"));
            fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
            fs::rename(&tmp, &path).with_context(|| format!("cannot move {} into place", path.display()))?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Pair {
        a: u32,
        b: Option<f64>,
    }

    #[test]
    fn csv_leaves_missing_values_empty() {
        let bytes = csv_bytes(&[Pair { a: 1, b: Some(0.5) }, Pair { a: 2, b: None }], &["a", "b"]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "a,b\n1,0.5\n2,\n");
    }

    #[test]
    fn jsonl_is_one_object_per_line() {
        let bytes = jsonl(&[Pair { a: 1, b: None }, Pair { a: 2, b: Some(1.0) }]).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            "{\"a\":1,\"b\":null}\n{\"a\":2,\"b\":1.0}\n"
        );
    }

    #[test]
    fn commit_writes_every_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = OutputSet::default();
        set.add("x.txt", b"x".to_vec());
        set.add("y.txt", b"y".to_vec());
        let target = dir.path().join("out");
        set.commit(&target).unwrap();
        assert_eq!(fs::read(target.join("y.txt")).unwrap(), b"y");
        assert_eq!(fs::read_dir(&target).unwrap().count(), 2);
    }
}
