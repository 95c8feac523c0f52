use super::{EvalReport, EvalRow};
use crate::error::{Error, Result};

fn check_layout(reports: &[EvalReport]) -> Result<&EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Data("no reports to tabulate".into()))?;
    for r in reports {
        let same = r.rows.len() == first.rows.len()
            && r.rows
                .iter()
                .zip(&first.rows)
                .all(|(a, b)| a.task_id == b.task_id && a.view == b.view);
        if !same {
            return Err(Error::Data(format!(
                "report of {} has a different row layout than {}",
                r.model, first.model
            )));
        }
    }
    Ok(first)
}

fn table(reports: &[EvalReport], cell: impl Fn(&EvalRow) -> String) -> Result<String> {
    let first = check_layout(reports)?;
    let mut s = String::from("| Task | View |");
    for r in reports {
        s.push_str(&format!(" {} |", r.model));
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---:|".repeat(reports.len()));
    s.push('\n');
    for (i, row) in first.rows.iter().enumerate() {
        s.push_str(&format!("| {} | {} |", row.task_id, row.view));
        for r in reports {
            s.push_str(&format!(" {} |", cell(&r.rows[i])));
        }
        s.push('\n');
    }
    s.push_str("| **Average** | |");
    for r in reports {
        s.push_str(&format!(" {} |", cell(&r.average)));
    }
    s.push('\n');
    Ok(s)
}

/// Pairwise accuracy (%), one column per model.
pub fn accuracy_markdown(reports: &[EvalReport]) -> Result<String> {
    table(reports, |r| format!("{:.2}", r.accuracy))
}

/// VOC (%) as `mean ± SEM`, one column per model.
pub fn voc_markdown(reports: &[EvalReport]) -> Result<String> {
    table(reports, |r| format!("{:.2} ± {:.2}", r.voc, r.voc_sem))
}

/// Long form: `model,task,view,metric,value,stderr`.
pub fn results_csv(reports: &[EvalReport]) -> Result<String> {
    check_layout(reports)?;
    let mut s = String::from("model,task,view,metric,value,stderr\n");
    for r in reports {
        for row in r.rows.iter().chain(std::iter::once(&r.average)) {
            let view = if row.view.is_empty() {
                "all"
            } else {
                &row.view
            };
            s.push_str(&format!(
                "{},{},{},accuracy,{:.6},\n",
                r.model, row.task_id, view, row.accuracy
            ));
            s.push_str(&format!(
                "{},{},{},voc,{:.6},{:.6}\n",
                r.model, row.task_id, view, row.voc, row.voc_sem
            ));
        }
    }
    Ok(s)
}

/// `timestep,ground_truth,<model>...` for one trajectory.
pub fn curves_csv(ground_truth: &[f64], models: &[(String, Vec<f64>)]) -> Result<String> {
    if models.iter().any(|(_, c)| c.len() != ground_truth.len()) {
        return Err(Error::Data("curve lengths differ".into()));
    }
    let mut s = String::from("timestep,ground_truth");
    for (name, _) in models {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (t, gt) in ground_truth.iter().enumerate() {
        s.push_str(&format!("{t},{gt:.6}"));
        for (_, c) in models {
            s.push_str(&format!(",{:.6}", c[t]));
        }
        s.push('\n');
    }
    Ok(s)
}
