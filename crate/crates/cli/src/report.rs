//! Paired comparisons between arms and grid-search tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use structreg::regularize::TransformKind;

use crate::config::point_label;
use crate::experiment::Finished;
use crate::svg::{line_plot, Series};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedDiff {
    pub seed: u64,
    pub d_test_err: f64,
    pub d_label_quality: Option<f64>,
    pub d_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmComparison {
    pub arm: String,
    pub reference: String,
    pub per_seed: Vec<SeedDiff>,
    pub d_test_err: Stat,
    pub d_label_quality: Option<Stat>,
    pub d_entropy: Stat,
    /// `(step, mean ΔQ, mean ΔH)` over seeds at each logged step.
    pub series: Vec<(u64, Option<f64>, f64)>,
}

fn by_arm(runs: &[Finished]) -> BTreeMap<&str, BTreeMap<u64, &Finished>> {
    let mut m: BTreeMap<&str, BTreeMap<u64, &Finished>> = BTreeMap::new();
    for f in runs {
        m.entry(f.job.arm.as_str()).or_default().insert(f.job.seed, f);
    }
    m
}

fn diff_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// Paired per-seed differences `arm − reference` for every other arm.
pub fn compare(runs: &[Finished], reference: &str) -> Vec<ArmComparison> {
    let arms = by_arm(runs);
    let Some(base) = arms.get(reference) else {
        return vec![];
    };
    let mut out = Vec::new();
    for (&name, seeds) in &arms {
        if name == reference {
            continue;
        }
        let mut per_seed = Vec::new();
        let mut steps: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (&seed, f) in seeds {
            let Some(r) = base.get(&seed) else { continue };
            let (a, b) = (&f.result.summary, &r.result.summary);
            per_seed.push(SeedDiff {
                seed,
                d_test_err: a.final_test_err - b.final_test_err,
                d_label_quality: diff_opt(a.final_label_quality, b.final_label_quality),
                d_entropy: a.final_mean_entropy - b.final_mean_entropy,
            });
            for (x, y) in f.result.log.iter().zip(&r.result.log) {
                if x.step != y.step {
                    continue;
                }
                let e = steps.entry(x.step).or_default();
                if let Some(dq) = diff_opt(x.label_quality, y.label_quality) {
                    e.0.push(dq);
                }
                e.1.push(x.mean_entropy - y.mean_entropy);
            }
        }
        let Some(d_test_err) = Stat::of(&per_seed.iter().map(|d| d.d_test_err).collect::<Vec<_>>()) else {
            continue;
        };
        let dq: Vec<f64> = per_seed.iter().filter_map(|d| d.d_label_quality).collect();
        let d_entropy = Stat::of(&per_seed.iter().map(|d| d.d_entropy).collect::<Vec<_>>()).expect("non-empty");
        let series = steps
            .into_iter()
            .map(|(s, (q, h))| (s, Stat::of(&q).map(|x| x.mean), Stat::of(&h).map_or(0.0, |x| x.mean)))
            .collect();
        out.push(ArmComparison {
            arm: name.to_string(),
            reference: reference.to_string(),
            per_seed,
            d_test_err,
            d_label_quality: (dq.len() == seeds.len()).then(|| Stat::of(&dq)).flatten(),
            d_entropy,
            series,
        });
    }
    out
}

fn fmt_stat(s: Option<Stat>) -> String {
    s.map_or_else(|| "n/a".into(), |s| format!("{:+.4} ± {:.4}", s.mean, s.sd))
}

pub fn compare_markdown(rows: &[ArmComparison]) -> String {
    let mut s = String::from("| arm | reference | seeds | Δ test error | Δ label quality | Δ entropy |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            r.arm,
            r.reference,
            r.d_test_err.n,
            fmt_stat(Some(r.d_test_err)),
            fmt_stat(r.d_label_quality),
            fmt_stat(Some(r.d_entropy)),
        );
    }
    s
}

/// `(ΔQ plot, ΔH plot)` over steps, one line per arm.
pub fn compare_plots(rows: &[ArmComparison]) -> (String, String) {
    let q: Vec<Series> = rows
        .iter()
        .map(|r| Series {
            name: r.arm.clone(),
            points: r
                .series
                .iter()
                .filter_map(|&(s, q, _)| q.map(|q| (s as f64, q)))
                .collect(),
        })
        .collect();
    let h: Vec<Series> = rows
        .iter()
        .map(|r| Series {
            name: r.arm.clone(),
            points: r.series.iter().map(|&(s, _, h)| (s as f64, h)).collect(),
        })
        .collect();
    (
        line_plot("Label quality difference vs reference", "step", "ΔQ", &q),
        line_plot("Entropy difference vs reference", "step", "ΔH (nats)", &h),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub point: String,
    pub validation_err: Stat,
    pub test_err: Stat,
    pub epsilon: Stat,
    pub eps_pct: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub arm: String,
    pub transform: TransformKind,
    pub best: GridCell,
    pub cells: Vec<GridCell>,
}

/// Per arm, the grid point with the lowest mean validation error (first wins ties).
pub fn grid_table(runs: &[Finished]) -> Vec<GridRow> {
    let mut groups: BTreeMap<(&str, String), Vec<&Finished>> = BTreeMap::new();
    let mut order: Vec<(&str, String)> = Vec::new();
    for f in runs {
        let key = (f.job.arm.as_str(), point_label(&f.job.point));
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(f);
    }
    let mut rows: Vec<GridRow> = Vec::new();
    for key in order {
        let fs = &groups[&key];
        let col = |g: &dyn Fn(&Finished) -> Option<f64>| -> Vec<f64> { fs.iter().filter_map(|f| g(f)).collect() };
        let val = col(&|f| f.result.summary.final_validation_err.or(Some(f.result.summary.final_test_err)));
        let cell = GridCell {
            point: key.1.clone(),
            validation_err: Stat::of(&val).expect("non-empty"),
            test_err: Stat::of(&col(&|f| Some(f.result.summary.final_test_err))).expect("non-empty"),
            epsilon: Stat::of(&col(&|f| Some(f.result.summary.final_epsilon))).expect("non-empty"),
            eps_pct: Stat::of(&col(&|f| f.result.summary.final_eps_pct)),
        };
        match rows.iter_mut().find(|r| r.arm == key.0) {
            Some(r) => {
                if cell.validation_err.mean < r.best.validation_err.mean {
                    r.best = cell.clone();
                }
                r.cells.push(cell);
            }
            None => rows.push(GridRow {
                arm: key.0.to_string(),
                transform: fs[0].job.config.transform,
                best: cell.clone(),
                cells: vec![cell],
            }),
        }
    }
    rows
}

pub fn grid_markdown(rows: &[GridRow]) -> String {
    let mut s = String::from(
        "| arm | transform | selected | validation error | test error | Avg. learned ε | % of Avg. Inter-Image Distance |\n",
    );
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let emu = r.transform == TransformKind::Emu;
        let eps = if emu {
            format!("{:.4} ± {:.4}", r.best.epsilon.mean, r.best.epsilon.sd)
        } else {
            "n/a".into()
        };
        let pct = match (emu, r.best.eps_pct) {
            (true, Some(p)) => format!("{:.1}% ± {:.1}", p.mean, p.sd),
            _ => "n/a".into(),
        };
        let _ = writeln!(
            s,
            "| {} | {:?} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {} | {} |",
            r.arm,
            r.transform,
            r.best.point,
            r.best.validation_err.mean,
            r.best.validation_err.sd,
            r.best.test_err.mean,
            r.best.test_err.sd,
            eps,
            pct
        );
    }
    s.push_str("\n| arm | point | validation error | test error | ε | % of distance |\n|---|---|---|---|---|---|\n");
    for r in rows {
        for c in &r.cells {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:.4} | {} |",
                r.arm,
                c.point,
                c.validation_err.mean,
                c.validation_err.sd,
                c.test_err.mean,
                c.test_err.sd,
                c.epsilon.mean,
                c.eps_pct.map_or_else(|| "n/a".into(), |p| format!("{:.1}%", p.mean)),
            );
        }
    }
    s
}
