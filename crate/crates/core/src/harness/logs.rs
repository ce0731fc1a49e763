//! CSV run logs. Every file opens with a `# asg <kind> v<N>` schema line,
//! then a header row; rows use LF endings and shortest round-trip floats.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::l2o::PolicyEpochLog;
use crate::training::RunRecord;

pub const SCHEMA_VERSION: u32 = 1;
const TRACE_HEADER: &str = "step,coord_name,action_index,scale";

fn open_with_schema(path: &Path, kind: &str) -> Result<csv::Writer<File>> {
    let mut f = File::create(path)?;
    writeln!(f, "# asg {kind} v{SCHEMA_VERSION}")?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(f))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Appends the new rows of a growing [`RunRecord`] to `steps.csv`,
/// `epochs.csv` and `actions.csv`.
pub struct RunLogWriter {
    steps: csv::Writer<File>,
    epochs: csv::Writer<File>,
    actions: csv::Writer<File>,
    coordinates: Vec<String>,
    steps_done: usize,
    epochs_done: usize,
}

impl RunLogWriter {
    pub fn create(dir: &Path, coordinates: &[String]) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut steps = open_with_schema(&dir.join("steps.csv"), "steps")?;
        let mut header: Vec<String> = [
            "step",
            "epoch",
            "batch",
            "loss_total",
            "loss_xe",
            "loss_kl",
            "reward",
            "train_accuracy",
        ]
        .map(String::from)
        .to_vec();
        header.extend(coordinates.iter().map(|c| format!("scale_{c}")));
        steps.write_record(&header).map_err(csv_err)?;

        let mut epochs = open_with_schema(&dir.join("epochs.csv"), "epochs")?;
        epochs
            .write_record(["epoch", "mean_loss", "target_accuracy", "retention", "wall_time_s"])
            .map_err(csv_err)?;

        let mut actions = open_with_schema(&dir.join("actions.csv"), "actions")?;
        actions
            .write_record(["step", "coord_name", "action_index", "scale"])
            .map_err(csv_err)?;

        let mut w = RunLogWriter {
            steps,
            epochs,
            actions,
            coordinates: coordinates.to_vec(),
            steps_done: 0,
            epochs_done: 0,
        };
        w.flush()?;
        Ok(w)
    }

    /// Write every row not yet written and flush.
    pub fn append(&mut self, rec: &RunRecord) -> Result<()> {
        if rec.coordinate_names != self.coordinates {
            return Err(Error::arg("run record coordinates do not match the log header"));
        }
        for s in &rec.steps[self.steps_done..] {
            let mut row = vec![
                s.step.to_string(),
                s.epoch.to_string(),
                s.batch.to_string(),
                s.loss_total.to_string(),
                s.loss_xe.to_string(),
                s.loss_kl.to_string(),
                s.reward.to_string(),
                s.batch_accuracy.to_string(),
            ];
            row.extend(s.action.scales().iter().map(|v| v.to_string()));
            self.steps.write_record(&row).map_err(csv_err)?;
            for (c, name) in self.coordinates.iter().enumerate() {
                self.actions
                    .write_record([
                        s.step.to_string(),
                        name.clone(),
                        s.action.indices[c].to_string(),
                        s.action.scale(c).to_string(),
                    ])
                    .map_err(csv_err)?;
            }
        }
        self.steps_done = rec.steps.len();
        for e in &rec.epochs[self.epochs_done..] {
            self.epochs
                .write_record([
                    e.epoch.to_string(),
                    e.mean_loss.to_string(),
                    e.target_accuracy.to_string(),
                    e.retention.to_string(),
                    format!("{:.3}", e.elapsed_s),
                ])
                .map_err(csv_err)?;
        }
        self.epochs_done = rec.epochs.len();
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        self.steps.flush()?;
        self.epochs.flush()?;
        self.actions.flush()?;
        Ok(())
    }
}

/// Per-policy-epoch statistics of REINFORCE training.
pub fn write_policy_log(path: &Path, logs: &[PolicyEpochLog]) -> Result<()> {
    let mut w = open_with_schema(path, "policy_epochs")?;
    w.write_record(["policy_epoch", "updates", "mean_reward", "final_target"])
        .map_err(csv_err)?;
    for l in logs {
        w.write_record([
            l.epoch.to_string(),
            l.updates.to_string(),
            l.mean_reward.to_string(),
            l.final_target.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Write a generic table with a schema line.
pub fn write_table(path: &Path, kind: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = open_with_schema(path, kind)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-coordinate action scales read back from `actions.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTrace {
    pub coordinates: Vec<String>,
    /// `scales[c][t]`.
    pub scales: Vec<Vec<f64>>,
}

impl ActionTrace {
    pub fn steps(&self) -> usize {
        self.scales.first().map(Vec::len).unwrap_or(0)
    }
}

/// Parse an action trace. Rows must come in step order with every
/// coordinate once per step; any violation is reported with its line number.
pub fn read_action_trace(path: &Path) -> Result<ActionTrace> {
    let text = std::fs::read_to_string(path)?;
    parse_action_trace(&text)
}

pub fn parse_action_trace(text: &str) -> Result<ActionTrace> {
    let bad = |line: usize, msg: String| Error::Format(format!("action trace line {line}: {msg}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut header_seen = false;
    let mut coordinates: Vec<String> = Vec::new();
    let mut scales: Vec<Vec<f64>> = Vec::new();
    // first pass discovers the coordinate set from the step-0 rows
    let mut rows: Vec<(usize, usize, String, f64)> = Vec::new();
    for (n, line) in lines.by_ref() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line.trim() != TRACE_HEADER {
                return Err(bad(n, format!("expected header {TRACE_HEADER}, found {line:?}")));
            }
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(n, format!("expected 4 fields, found {}", f.len())));
        }
        let step: usize = f[0].parse().map_err(|_| bad(n, format!("bad step {:?}", f[0])))?;
        let _action: usize = f[2].parse().map_err(|_| bad(n, format!("bad action index {:?}", f[2])))?;
        let scale: f64 = f[3].parse().map_err(|_| bad(n, format!("bad scale {:?}", f[3])))?;
        if !(0.0..=1.0).contains(&scale) {
            return Err(bad(n, format!("scale {scale} outside [0, 1]")));
        }
        rows.push((n, step, f[1].to_string(), scale));
    }
    if !header_seen {
        return Err(Error::Format("action trace has no header".into()));
    }
    for &(_, step, ref name, _) in &rows {
        if step != 0 {
            break;
        }
        coordinates.push(name.clone());
    }
    if coordinates.is_empty() {
        return Err(Error::Format("action trace has no rows".into()));
    }
    let c = coordinates.len();
    scales.resize(c, Vec::new());
    for (i, (n, step, name, scale)) in rows.into_iter().enumerate() {
        let (want_step, want_c) = (i / c, i % c);
        if step != want_step || name != coordinates[want_c] {
            return Err(bad(
                n,
                format!("expected step {want_step} coordinate {}, found step {step} coordinate {name}", coordinates[want_c]),
            ));
        }
        scales[want_c].push(scale);
    }
    if scales[c - 1].len() != scales[0].len() {
        return Err(Error::Format("action trace ends in the middle of a step".into()));
    }
    Ok(ActionTrace { coordinates, scales })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRACE: &str = "# asg actions v1\nstep,coord_name,action_index,scale\n0,a,10,1\n0,b,0,0\n1,a,5,0.5\n1,b,1,0.1\n";

    #[test]
    fn trace_round_trip() {
        let t = parse_action_trace(TRACE).unwrap();
        assert_eq!(t.coordinates, vec!["a", "b"]);
        assert_eq!(t.scales, vec![vec![1.0, 0.5], vec![0.0, 0.1]]);
    }

    #[test]
    fn malformed_trace_names_line() {
        let broken = TRACE.replace("1,a,5,0.5", "1,a,5,zero");
        let err = parse_action_trace(&broken).unwrap_err().to_string();
        assert!(err.contains("line 5"), "{err}");
        let reordered = TRACE.replace("1,b,1,0.1", "2,b,1,0.1");
        let err = parse_action_trace(&reordered).unwrap_err().to_string();
        assert!(err.contains("line 6"), "{err}");
    }
}
