//! Benchmark summaries: one CSV for everything, one aligned text table per
//! system with a row per model.

use mechbench_core::datasets::ModelKind;
use mechbench_core::evaluation::MetricsRecord;
use mechbench_core::systems::SystemKind;

#[derive(Clone, Debug, PartialEq)]
pub enum RowOutcome {
    Done(MetricsRecord),
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRow {
    pub system: SystemKind,
    pub model: ModelKind,
    pub outcome: RowOutcome,
}

const METRIC_HEADERS: [&str; 5] = ["MSE", "MAE", "RMSE", "STD", "VAR"];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4e}"))
}

/// `system,model,mse,mae,rmse,std,var,n_points,n_failed,status`.
pub fn summary_csv(rows: &[BenchmarkRow]) -> csv::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["system", "model", "mse", "mae", "rmse", "std", "var", "n_points", "n_failed", "status"])?;
    for r in rows {
        let mut rec = vec![r.system.to_string(), r.model.to_string()];
        match &r.outcome {
            RowOutcome::Done(m) => {
                rec.extend(m.values().iter().map(|v| v.map_or_else(String::new, |v| v.to_string())));
                rec.extend([m.n_points.to_string(), m.n_failed.to_string(), "ok".to_string()]);
            }
            RowOutcome::Failed(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 7));
                rec.push(format!("failed: {e}"));
            }
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One block per system in first-seen order.
pub fn text_tables(rows: &[BenchmarkRow]) -> String {
    let mut systems: Vec<SystemKind> = Vec::new();
    for r in rows {
        if !systems.contains(&r.system) {
            systems.push(r.system);
        }
    }
    let mut out = String::new();
    for sys in systems {
        let mut lines: Vec<Vec<String>> = vec![std::iter::once("Model".to_string())
            .chain(METRIC_HEADERS.iter().map(|s| s.to_string()))
            .collect()];
        let mut notes = Vec::new();
        for r in rows.iter().filter(|r| r.system == sys) {
            let name = r.model.name().to_uppercase();
            let mut line = vec![name.clone()];
            match &r.outcome {
                RowOutcome::Done(m) => {
                    line.extend(m.values().into_iter().map(cell));
                    if m.n_failed > 0 {
                        notes.push(format!("{name}: {} of {} test rollouts failed", m.n_failed, m.n_trajectories));
                    }
                }
                RowOutcome::Failed(e) => {
                    line.extend(std::iter::repeat_n("-".to_string(), 5));
                    notes.push(format!("{name}: {e}"));
                }
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        out.push_str(&format!("{sys}\n"));
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        for n in notes {
            out.push_str(&format!("  note: {n}\n"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(mse: f64) -> MetricsRecord {
        MetricsRecord {
            preset: "mass-spring/hnn".into(),
            system: "mass-spring".into(),
            model: "hnn".into(),
            seed: 42,
            mse: Some(mse),
            mae: Some(0.1),
            rmse: Some(mse.sqrt()),
            std: Some(0.2),
            var: Some(0.04),
            n_points: 10,
            n_trajectories: 2,
            n_failed: 0,
        }
    }

    fn rows() -> Vec<BenchmarkRow> {
        vec![
            BenchmarkRow {
                system: SystemKind::MassSpring,
                model: ModelKind::Hnn,
                outcome: RowOutcome::Done(record(0.01)),
            },
            BenchmarkRow {
                system: SystemKind::MassSpring,
                model: ModelKind::Lnn,
                outcome: RowOutcome::Failed("diverged".into()),
            },
            BenchmarkRow {
                system: SystemKind::Pendulum,
                model: ModelKind::Srnn,
                outcome: RowOutcome::Done(record(0.5)),
            },
        ]
    }

    #[test]
    fn one_table_per_system() {
        let text = text_tables(&rows());
        assert!(text.starts_with("mass-spring\nModel"));
        assert!(text.contains("\npendulum\n"));
        assert!(text.lines().any(|l| l.split_whitespace().take(2).eq(["HNN", "1.0000e-2"])));
        assert!(text.contains("note: LNN: diverged"));
        let header = text.lines().nth(1).unwrap();
        assert_eq!(header.split_whitespace().collect::<Vec<_>>(), ["Model", "MSE", "MAE", "RMSE", "STD", "VAR"]);
    }

    #[test]
    fn csv_has_a_row_per_preset() {
        let csv = summary_csv(&rows()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("mass-spring,hnn,0.01,0.1,"));
        assert!(lines[2].ends_with("failed: diverged"));
    }
}
