//! Seven-row component ablation: the fusion variants plus both single-stream
//! baselines, trained with one shared seed and budget.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::Result;
use crate::metrics::EvalReport;
use crate::model::train::PreparedSet;
use crate::model::{EpochLog, Modality, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub modality: Modality,
    pub deca: bool,
    pub depa: bool,
    pub focus: bool,
}

const fn row(name: &'static str, modality: Modality, deca: bool, depa: bool, focus: bool) -> AblationRow {
    AblationRow {
        name,
        modality,
        deca,
        depa,
        focus,
    }
}

pub const ROWS: [AblationRow; 7] = [
    row("baseline", Modality::Cross, false, false, false),
    row("+deca", Modality::Cross, true, false, false),
    row("+depa", Modality::Cross, false, true, false),
    row("+deca+depa", Modality::Cross, true, true, false),
    row("+deca+depa+focus", Modality::Cross, true, true, true),
    row("visible_only", Modality::Visible, false, false, true),
    row("infrared_only", Modality::Infrared, false, false, true),
];

impl AblationRow {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = *base;
        cfg.model.modality = self.modality;
        cfg.model.use_deca = self.deca;
        cfg.model.use_depa = self.depa;
        cfg.model.use_focus = self.focus;
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct RowResult {
    pub row: AblationRow,
    pub report: EvalReport,
    pub log: Vec<EpochLog>,
    pub seconds: f64,
}

/// Trains and evaluates every row in order. `on_row` sees each finished row.
pub fn run(
    base: &TrainConfig,
    train: &PreparedSet,
    val: &PreparedSet,
    mut on_row: impl FnMut(&RowResult) -> Result<()>,
) -> Result<Vec<RowResult>> {
    let mut out = Vec::with_capacity(ROWS.len());
    for row in ROWS {
        let start = Instant::now();
        let mut trainer = Trainer::new(row.apply(base))?;
        trainer.run(train, None, |_, _| Ok(()))?;
        let report = trainer.evaluate(val)?;
        let result = RowResult {
            row,
            report,
            log: trainer.log,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_row(&result)?;
        out.push(result);
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "row,modality,deca,depa,focus,map50,map50_95,lamr";

/// One line per row; numbers printed with full round-trip precision.
pub fn to_csv(results: &[RowResult]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in results {
        let x = |b: bool| if b { "x" } else { "" };
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.row.name,
            r.row.modality,
            x(r.row.deca),
            x(r.row.depa),
            x(r.row.focus),
            r.report.map50,
            r.report.map50_95,
            r.report.lamr
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_follow_the_component_grid() {
        let cross: Vec<_> = ROWS.iter().filter(|r| r.modality == Modality::Cross).collect();
        assert_eq!(cross.len(), 5);
        let marks: Vec<_> = cross.iter().map(|r| (r.deca, r.depa, r.focus)).collect();
        assert_eq!(
            marks,
            [
                (false, false, false),
                (true, false, false),
                (false, true, false),
                (true, true, false),
                (true, true, true)
            ]
        );
        let full = ROWS[4].apply(&TrainConfig::default());
        let vis = ROWS[5].apply(&TrainConfig::default());
        assert_eq!((full.epochs, full.seed), (vis.epochs, vis.seed));
    }
}
