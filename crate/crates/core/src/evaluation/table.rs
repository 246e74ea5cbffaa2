use std::fmt::Write;

use super::{MetricsReport, ScenarioId};

/// Reference numbers from the published tables: (scenario, CCR %, MAE average degrees).
pub type PaperRow = (ScenarioId, f64, f64);

/// UPNA.
pub const PAPER_TABLE_UPNA: [PaperRow; 4] = [
    (ScenarioId::Unconstrained, 99.97, 0.69),
    (ScenarioId::AttackI, 10.23, 2.251),
    (ScenarioId::AttackII, 23.31, 1.811),
    (ScenarioId::AttackIII, 21.33, 2.212),
];

/// UPNA synthetic.
pub const PAPER_TABLE_SYNTHETIC: [PaperRow; 4] = [
    (ScenarioId::Unconstrained, 100.00, 0.60),
    (ScenarioId::AttackI, 10.06, 2.27),
    (ScenarioId::AttackII, 26.51, 1.74),
    (ScenarioId::AttackIII, 24.49, 2.10),
];

/// Scenario rows x {CCR, MAE} in table order, with the UPNA reference
/// values alongside. Scenarios without a report are omitted.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>10} {:>9} {:>9} {:>9} {:>12} | {:>10} {:>10}",
        "Scenario", "CCR (%)", "Yaw (°)", "Pitch (°)", "Roll (°)", "MAE Avg (°)", "UPNA CCR", "UPNA MAE"
    );
    for (scenario, paper_ccr, paper_mae) in PAPER_TABLE_UPNA {
        let Some(r) = reports.iter().find(|r| r.scenario == scenario) else {
            continue;
        };
        let _ = writeln!(
            out,
            "{:<24} {:>10.2} {:>9.3} {:>9.3} {:>9.3} {:>12.3} | {:>10.2} {:>10.3}",
            scenario.label(),
            r.identification_ccr,
            r.pose_mae_deg[0],
            r.pose_mae_deg[1],
            r.pose_mae_deg[2],
            r.pose_mae_average,
            paper_ccr,
            paper_mae
        );
    }
    out
}
