//! CSV tables and the JSON summary.
//!
//! | file | columns |
//! |------|---------|
//! | `h1_follow.csv` | rating, follows, count, frequency |
//! | `h2_participants.csv` | s, rounds, follows, follow_frequency, cumulative_follow_frequency, terminal_rating, homogeneity |
//! | `h3_defection.csv` | s, then `p_i_j` per tracked entry |
//! | `h4_points.csv` | s, k, rating, u_hat, m_hat, retained |
//! | `summary.json` | the report without per-round points |

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::HypothesisReport;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ExportPaths {
    pub h1: PathBuf,
    pub h2: PathBuf,
    pub h3: PathBuf,
    pub h4: PathBuf,
    pub summary: PathBuf,
}

#[derive(Serialize)]
struct PointRow {
    s: usize,
    k: usize,
    rating: f64,
    u_hat: f64,
    m_hat: f64,
    retained: bool,
}

pub fn write_exports(report: &HypothesisReport, dir: impl AsRef<Path>) -> Result<ExportPaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let paths = ExportPaths {
        h1: dir.join("h1_follow.csv"),
        h2: dir.join("h2_participants.csv"),
        h3: dir.join("h3_defection.csv"),
        h4: dir.join("h4_points.csv"),
        summary: dir.join("summary.json"),
    };

    let mut w = csv::Writer::from_path(&paths.h1)?;
    for row in &report.h1.table {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.h2)?;
    for row in &report.h2 {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.h3)?;
    let mut header = vec!["s".to_string()];
    header.extend(report.h3.pairs.iter().map(|(i, j)| format!("p_{i}_{j}")));
    w.write_record(&header)?;
    for (row, summary) in report.h3.series.iter().zip(&report.h2) {
        let mut fields = vec![summary.s.to_string()];
        fields.extend(row.iter().map(f64::to_string));
        w.write_record(&fields)?;
    }
    w.flush()?;

    let f = &report.filters;
    let mut w = csv::Writer::from_path(&paths.h4)?;
    for p in &report.regret_points {
        w.serialize(PointRow {
            s: p.s,
            k: p.k,
            rating: p.rating,
            u_hat: p.u_hat,
            m_hat: p.m_hat,
            retained: p.rating >= f.min_rating && p.m_hat >= f.min_regret,
        })?;
    }
    w.flush()?;

    std::fs::write(&paths.summary, serde_json::to_vec_pretty(report)?)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{hypothesis_report, Filters};
    use crate::config::reference_experiment;
    use crate::protocol::{run_batch, Protocol};

    #[test]
    fn exports_have_one_row_per_item() {
        let exp = reference_experiment();
        let p = Protocol::from_experiment(&exp).unwrap();
        let mut lineage = p.new_lineage();
        let logs = run_batch(&p, &mut lineage, &exp.agents, 3, 1, None).unwrap();
        let report =
            hypothesis_report(&logs, &exp.protocol.initial_defection, 5.0, &Filters::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_exports(&report, dir.path()).unwrap();

        let count = |p: &Path| csv::Reader::from_path(p).unwrap().records().count();
        assert_eq!(count(&paths.h1), report.h1.table.len());
        assert_eq!(count(&paths.h2), 3);
        assert_eq!(count(&paths.h3), 3);
        assert_eq!(count(&paths.h4), 300);
        let header = csv::Reader::from_path(&paths.h3).unwrap().headers().unwrap().clone();
        assert_eq!(header.iter().collect::<Vec<_>>(), ["s", "p_0_1", "p_1_2", "p_2_0"]);

        let summary: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&paths.summary).unwrap()).unwrap();
        assert_eq!(summary["schema_version"], 1);
        assert_eq!(summary["participants"], 3);
        assert!(summary.get("regret_points").is_none());
    }
}
