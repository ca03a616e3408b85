use std::fs;
use std::path::Path;

use super::state::{IterationRecord, PruneCampaignState};
use super::CampaignError;
use crate::robustness::format_delta;
use crate::robustness::plot::{tradeoff_svg, Series};

pub const REPORT_CSV: &str = "report.csv";
pub const TRADEOFF_SVG: &str = "tradeoff.svg";

/// Delta columns in a fixed order: clean, each attack, then the corruption mean.
fn delta_keys(first: &IterationRecord) -> Vec<String> {
    let r = &first.robustness;
    let mut keys = vec!["clean".to_string()];
    keys.extend(r.accuracy.keys().cloned());
    if r.mean_corruption_acc.is_some() {
        keys.push("mean_corruption".into());
    }
    keys
}

/// Writes `report.csv` and `tradeoff.svg` for a campaign state.
pub fn write_report(dir: &Path, state: &PruneCampaignState) -> Result<(), CampaignError> {
    state.check()?;
    let keys = delta_keys(&state.records[0]);
    let mut w = csv::Writer::from_path(dir.join(REPORT_CSV))?;
    let mut header: Vec<String> = ["iteration", "victim", "flops", "flop_reduction_pct", "params", "clean_acc"]
        .map(String::from)
        .to_vec();
    header.extend(keys.iter().map(|k| format!("delta_pp_{k}")));
    header.extend(["co2_kg", "latency_ms"].map(String::from));
    w.write_record(&header)?;
    for rec in &state.records {
        let deltas = rec
            .robustness
            .delta_pp
            .as_ref()
            .ok_or_else(|| CampaignError::Report(format!("iteration {} has no deltas", rec.iteration)))?;
        let mut row = vec![
            rec.iteration.to_string(),
            rec.victim.map(|v| v.to_string()).unwrap_or_default(),
            rec.cost.flops.to_string(),
            format!("{:.2}", rec.cost.flop_reduction_pct),
            rec.cost.params.to_string(),
            format!("{:.2}", rec.robustness.clean_acc),
        ];
        for k in &keys {
            let d = deltas
                .get(k)
                .ok_or_else(|| CampaignError::Report(format!("iteration {} lacks {k}", rec.iteration)))?;
            row.push(format_delta(*d));
        }
        row.push(format!("{:.6}", rec.carbon.co2_kg));
        row.push(rec.cost.latency_ms.map(|l| format!("{l:.3}")).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;

    let series: Vec<Series> = keys
        .iter()
        .map(|k| Series {
            label: k.clone(),
            points: state
                .records
                .iter()
                .map(|r| (r.cost.flop_reduction_pct, r.robustness.delta_pp.as_ref().and_then(|d| d.get(k)).copied().unwrap_or(0.0)))
                .collect(),
        })
        .collect();
    fs::write(
        dir.join(TRADEOFF_SVG),
        tradeoff_svg("Accuracy change vs FLOP reduction", &series),
    )?;
    Ok(())
}

/// Regenerates the report of a campaign directory from its saved state.
pub fn cmd_report(dir: &Path) -> Result<PruneCampaignState, CampaignError> {
    let state = PruneCampaignState::load(dir)?;
    write_report(dir, &state)?;
    Ok(state)
}
