//! Paired comparison of two metrics files on their common step grid.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{read_metrics, MetricsRecord};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedStep {
    pub step: u64,
    pub a: f64,
    pub b: f64,
    /// `a − b`.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    /// `loss`, `lr`, `wall_time_s`, or an extras key such as `val_loss`.
    pub column: String,
    pub warmup: u64,
    pub steps: Vec<PairedStep>,
    /// `a ≤ b` at every common step from `warmup` on.
    pub a_le_b_after_warmup: bool,
    /// `a / b` at the last common step.
    pub final_ratio: f64,
}

impl Comparison {
    pub fn verdicts(&self) -> Vec<(String, bool)> {
        vec![
            ("A <= B after warmup".to_string(), self.a_le_b_after_warmup),
            (
                format!("final A/B = {:.4} <= 0.8", self.final_ratio),
                self.final_ratio <= 0.8,
            ),
        ]
    }
}

fn column(records: &[MetricsRecord], name: &str, label: &str) -> Result<Vec<(u64, f64)>> {
    let pick = |r: &MetricsRecord| -> Option<f64> {
        match name {
            "loss" => Some(r.loss),
            "lr" => Some(r.lr),
            "wall_time_s" => Some(r.wall_time_s),
            key => r.extra(key),
        }
    };
    let out: Vec<(u64, f64)> = records.iter().filter_map(|r| pick(r).map(|v| (r.step, v))).collect();
    if out.is_empty() {
        return Err(Error::Schema(format!("run {label} has no `{name}` column")));
    }
    Ok(out)
}

/// Compares `column` of two record lists on the steps both contain.
pub fn compare_records(a: &[MetricsRecord], b: &[MetricsRecord], name: &str, warmup: u64) -> Result<Comparison> {
    let ca = column(a, name, "A")?;
    let cb = column(b, name, "B")?;
    let mut steps = Vec::new();
    let mut j = 0;
    for &(s, va) in &ca {
        while j < cb.len() && cb[j].0 < s {
            j += 1;
        }
        if j < cb.len() && cb[j].0 == s {
            let vb = cb[j].1;
            steps.push(PairedStep {
                step: s,
                a: va,
                b: vb,
                delta: va - vb,
            });
        }
    }
    let last = steps
        .last()
        .ok_or_else(|| Error::Input(format!("runs share no step with a `{name}` value")))?;
    let final_ratio = last.a / last.b;
    let a_le_b_after_warmup = steps.iter().filter(|p| p.step >= warmup).all(|p| p.a <= p.b);
    Ok(Comparison {
        column: name.to_string(),
        warmup,
        a_le_b_after_warmup,
        final_ratio,
        steps,
    })
}

/// [`compare_records`] over two metrics files.
pub fn compare_runs(a: &Path, b: &Path, name: &str, warmup: u64) -> Result<Comparison> {
    compare_records(&read_metrics(a)?, &read_metrics(b)?, name, warmup)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(vals: &[(u64, f64)]) -> Vec<MetricsRecord> {
        vals.iter()
            .map(|&(s, v)| MetricsRecord::new(s, "finetune", v, 1e-3).with_extra("val_loss", v))
            .collect()
    }

    #[test]
    fn identical_runs_have_zero_deltas() {
        let a = run(&[(0, 2.0), (10, 1.0), (20, 0.5)]);
        let c = compare_records(&a, &a, "val_loss", 0).unwrap();
        assert!(c.steps.iter().all(|p| p.delta == 0.0));
        assert!(c.a_le_b_after_warmup);
        assert_eq!(c.final_ratio, 1.0);
    }

    #[test]
    fn warmup_steps_are_ignored() {
        let a = run(&[(0, 3.0), (10, 1.0), (20, 0.4)]);
        let b = run(&[(0, 2.0), (10, 1.5), (20, 1.0), (30, 0.9)]);
        let c = compare_records(&a, &b, "val_loss", 5).unwrap();
        assert_eq!(c.steps.len(), 3);
        assert!(c.a_le_b_after_warmup);
        assert!((c.final_ratio - 0.4).abs() < 1e-12);
        assert!(!compare_records(&a, &b, "val_loss", 0).unwrap().a_le_b_after_warmup);
    }

    #[test]
    fn disjoint_grids_and_missing_columns() {
        let a = run(&[(1, 1.0)]);
        let b = run(&[(2, 1.0)]);
        assert!(matches!(compare_records(&a, &b, "val_loss", 0), Err(Error::Input(_))));
        assert!(matches!(compare_records(&a, &a, "gap_l1", 0), Err(Error::Schema(_))));
    }
}
