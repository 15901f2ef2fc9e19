use super::PipelineOutcome;
use crate::error::{Error, Result};

const HEADER: [&str; 5] = ["architecture", "converted_prefix", "method", "before_ft", "after_ft"];

fn rows(outcomes: &[&PipelineOutcome]) -> Vec<[String; 5]> {
    let pct = |a: f64| format!("{:.2}", 100.0 * a);
    outcomes
        .iter()
        .flat_map(|o| {
            o.stages.iter().map(move |s| {
                [
                    o.architecture.clone(),
                    s.converted_prefix.clone(),
                    o.method.to_string(),
                    pct(s.before_ft.accuracy),
                    s.after_ft.as_ref().map(|r| pct(r.accuracy)).unwrap_or_default(),
                ]
            })
        })
        .collect()
}

/// Per-stage accuracies (percent of the test split), one row per stage.
pub fn results_csv(outcomes: &[&PipelineOutcome]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    w.write_record(HEADER).map_err(fail)?;
    for r in rows(outcomes) {
        w.write_record(&r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn results_markdown(outcomes: &[&PipelineOutcome]) -> String {
    let mut out = format!("| {} |\n|{}\n", HEADER.join(" | "), "---|".repeat(HEADER.len()));
    for r in rows(outcomes) {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out
}
