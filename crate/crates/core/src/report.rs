//! Machine-readable run artifacts: `stages.csv`, `nc_trace.csv` and `summary.json`.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::session::{NcCheckpoint, StageReport, Summary};

pub const STAGES_HEADER: [&str; 4] = ["t", "acc_all", "acc_old", "acc_new"];
pub const NC_TRACE_HEADER: [&str; 6] = ["stage", "epoch", "nc1", "nc2", "nc3", "nc4"];

/// One row per stage; `acc_new` is empty at stage 0.
pub fn write_stages_csv<W: Write>(reports: &[StageReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(STAGES_HEADER).map_err(csv_error)?;
    for r in reports {
        let new = r.acc_new.map(|v| v.to_string()).unwrap_or_default();
        out.write_record([r.t.to_string(), r.acc_all.to_string(), r.acc_old.to_string(), new])
            .map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_nc_trace_csv<W: Write>(trace: &[NcCheckpoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(NC_TRACE_HEADER).map_err(csv_error)?;
    for c in trace {
        out.write_record([
            c.stage.to_string(),
            c.epoch.to_string(),
            c.nc.nc1.to_string(),
            c.nc.nc2.to_string(),
            c.nc.nc3.to_string(),
            c.nc.nc4.to_string(),
        ])
        .map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// Contents of `summary.json`. `wall_time_s` is the only field that varies between identical runs.
#[derive(Clone, Debug, Serialize)]
pub struct SummaryRecord<'a, C: Serialize> {
    pub m_f: Option<f64>,
    pub m_d: Option<f64>,
    pub seed: u64,
    pub wall_time_s: f64,
    pub config: &'a C,
}

impl<'a, C: Serialize> SummaryRecord<'a, C> {
    pub fn new(summary: Summary, seed: u64, wall_time_s: f64, config: &'a C) -> Self {
        Self {
            m_f: summary.m_f,
            m_d: summary.m_d,
            seed,
            wall_time_s,
            config,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| Error::Inconsistent(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Inconsistent(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{AccuracyTriple, NcDiagnostics};

    fn report(t: usize, all: f64, new: Option<f64>) -> StageReport {
        StageReport {
            t,
            acc_all: all,
            acc_old: 100.0,
            acc_new: new,
            accuracy: AccuracyTriple {
                all,
                old: 100.0,
                new: new.unwrap_or(0.0),
                n_all: 4,
                n_old: 2,
                n_new: 2,
            },
            loss_trace: Vec::new(),
            nc_diag: None,
            nc_trace: Vec::new(),
            selection_stats: None,
        }
    }

    #[test]
    fn stages_layout() {
        let mut buf = Vec::new();
        write_stages_csv(&[report(0, 100.0, None), report(1, 92.5, Some(85.0))], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t,acc_all,acc_old,acc_new\n0,100,100,\n1,92.5,100,85\n"
        );
    }

    #[test]
    fn nc_trace_layout() {
        let nc = NcDiagnostics {
            nc1: 0.5,
            nc2: 0.25,
            nc3: 0.9,
            nc4: 1.0,
        };
        let mut buf = Vec::new();
        write_nc_trace_csv(&[NcCheckpoint { stage: 0, epoch: 3, nc }], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "stage,epoch,nc1,nc2,nc3,nc4\n0,3,0.5,0.25,0.9,1\n"
        );
    }

    #[test]
    fn summary_fields() {
        let cfg = serde_json::json!({ "alpha": 0.7 });
        let rec = SummaryRecord::new(
            Summary {
                m_f: Some(1.5),
                m_d: None,
            },
            9,
            0.25,
            &cfg,
        );
        let mut buf = Vec::new();
        rec.write(&mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["m_f"], 1.5);
        assert!(v["m_d"].is_null());
        assert_eq!(v["seed"], 9);
        assert_eq!(v["config"]["alpha"], 0.7);
    }
}
