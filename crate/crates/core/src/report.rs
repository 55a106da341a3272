//! Block reports, loss traces and their text renderings.
//!
//! Machine-readable output is tab-separated with one record per line; the
//! table renderings are for people.

use std::fmt::Write as _;

use crate::config::Method;
use crate::eval::{ContinualEval, Metric, MetricResult};

/// Evaluation of one model after one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    /// `teacher`, `student`, `distilled`, or `student@s{j}` for sub-block views.
    pub name: String,
    pub parameters: usize,
    pub eval: ContinualEval,
    /// Slice name (`new_users`, `dormant`) and its metric.
    pub slices: Vec<(String, MetricResult)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub block: usize,
    pub models: Vec<ModelReport>,
}

impl BlockReport {
    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.name == name)
    }

    /// The deployed view: the student when one exists, else the teacher.
    pub fn primary(&self) -> Option<&ModelReport> {
        self.model("student").or_else(|| self.model("teacher"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub block: usize,
    pub stage: &'static str,
    pub sub_block: usize,
    pub epoch: usize,
    pub component: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub block: usize,
    pub stage: &'static str,
    pub seconds: f64,
}

/// Everything one method run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub method: Method,
    pub reports: Vec<BlockReport>,
    pub losses: Vec<LossRecord>,
    pub timings: Vec<StageTiming>,
}

const METRICS: [Metric; 2] = [Metric::Recall, Metric::Ndcg];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.6}"))
}

/// One line per block/model/metric/K/scope.
pub fn reports_tsv(method: Method, reports: &[BlockReport]) -> String {
    let mut out = String::from("method\tblock\tmodel\tmetric\tk\tscope\tvalue\tusers\n");
    for r in reports {
        for m in &r.models {
            let _ = writeln!(out, "{method}\t{}\t{}\tparameters\t0\tcount\t{}\t0", r.block, m.name, m.parameters);
            for metric in METRICS {
                for &k in &m.eval.ks {
                    let la = m.eval.la(metric, k);
                    let ra = m.eval.ra(metric, k);
                    let h = m.eval.h_mean(metric, k);
                    let la_users = m
                        .eval
                        .per_block
                        .iter()
                        .find(|s| s.block == m.eval.current)
                        .map_or(0, |s| s.users);
                    let head = format!("{method}\t{}\t{}\t{}\t{k}", r.block, m.name, metric.as_str());
                    let _ = writeln!(out, "{head}\tLA\t{la:.6}\t{la_users}");
                    let _ = writeln!(out, "{head}\tRA\t{}\t0", fmt_opt(ra));
                    let _ = writeln!(out, "{head}\tH\t{h:.6}\t0");
                    for s in &m.eval.per_block {
                        let v = match metric {
                            Metric::Recall => s.recall[m.eval.ks.iter().position(|&x| x == k).unwrap()],
                            Metric::Ndcg => s.ndcg[m.eval.ks.iter().position(|&x| x == k).unwrap()],
                        };
                        let _ = writeln!(out, "{head}\tblock{}\t{v:.6}\t{}", s.block, s.users);
                    }
                }
            }
            for (slice, res) in &m.slices {
                let _ = writeln!(
                    out,
                    "{method}\t{}\t{}\t{}\t{}\t{slice}\t{:.6}\t{}",
                    r.block,
                    m.name,
                    res.metric.as_str(),
                    res.k,
                    res.value,
                    res.users
                );
            }
        }
    }
    out
}

/// Fixed-width table of LA / RA / H-mean per block and model.
pub fn reports_table(method: Method, reports: &[BlockReport]) -> String {
    let mut out = format!("method: {method}\n");
    let Some(ks) = reports.first().and_then(|r| r.models.first()).map(|m| m.eval.ks.clone()) else {
        return out;
    };
    let _ = write!(out, "{:>5}  {:<12} {:>9}", "block", "model", "params");
    for metric in METRICS {
        for k in &ks {
            let tag = format!("{}@{k}", metric.as_str());
            let _ = write!(out, "  {:>26}", format!("{tag} LA/RA/H"));
        }
    }
    out.push('\n');
    for r in reports {
        for m in &r.models {
            let _ = write!(out, "{:>5}  {:<12} {:>9}", r.block, m.name, m.parameters);
            for metric in METRICS {
                for &k in &ks {
                    let ra = m.eval.ra(metric, k).map_or_else(|| "  -   ".to_owned(), |x| format!("{x:.4}"));
                    let cell = format!("{:.4}/{ra}/{:.4}", m.eval.la(metric, k), m.eval.h_mean(metric, k));
                    let _ = write!(out, "  {cell:>26}");
                }
            }
            out.push('\n');
            for (slice, res) in &m.slices {
                let _ = writeln!(
                    out,
                    "{:>5}  {:<12}   {slice} {}@{} = {:.4} ({} users)",
                    "",
                    "",
                    res.metric.as_str(),
                    res.k,
                    res.value,
                    res.users
                );
            }
        }
    }
    out
}

pub fn losses_tsv(method: Method, losses: &[LossRecord]) -> String {
    let mut out = String::from("method\tblock\tstage\tsub_block\tepoch\tcomponent\tvalue\n");
    for l in losses {
        let _ = writeln!(
            out,
            "{method}\t{}\t{}\t{}\t{}\t{}\t{:?}",
            l.block, l.stage, l.sub_block, l.epoch, l.component, l.value
        );
    }
    out
}

pub fn timings_tsv(method: Method, timings: &[StageTiming]) -> String {
    let mut out = String::from("method\tblock\tstage\tseconds\n");
    for t in timings {
        let _ = writeln!(out, "{method}\t{}\t{}\t{:.3}", t.block, t.stage, t.seconds);
    }
    out
}

/// Per-block H-mean of CCD's deployed model minus the best other method.
/// Blocks where a side is missing yield `None`.
pub fn gain_series(runs: &[RunOutput], metric: Metric, k: usize) -> Vec<(usize, Option<f64>)> {
    let Some(ccd) = runs.iter().find(|r| r.method == Method::Ccd) else {
        return Vec::new();
    };
    ccd.reports
        .iter()
        .map(|r| {
            let mine = r.primary().map(|m| m.eval.h_mean(metric, k));
            let best = runs
                .iter()
                .filter(|o| o.method != Method::Ccd)
                .filter_map(|o| o.reports.iter().find(|x| x.block == r.block))
                .filter_map(|x| x.primary().map(|m| m.eval.h_mean(metric, k)))
                .reduce(f64::max);
            (r.block, mine.zip(best).map(|(a, b)| a - b))
        })
        .collect()
}

pub fn gain_tsv(series: &[(usize, Option<f64>)]) -> String {
    let mut out = String::from("block\tgain\n");
    for (b, g) in series {
        let _ = writeln!(out, "{b}\t{}", fmt_opt(*g));
    }
    out
}

/// Side-by-side primary-model LA/RA/H per block.
pub fn compare_table(runs: &[RunOutput], metric: Metric, k: usize) -> String {
    let mut out = format!("{}@{k}: LA / RA / H-mean of the deployed model\n", metric.as_str());
    let _ = write!(out, "{:>5}", "block");
    for r in runs {
        let _ = write!(out, "  {:>26}", r.method.as_str());
    }
    out.push('\n');
    let blocks = runs.iter().map(|r| r.reports.len()).max().unwrap_or(0);
    for b in 0..blocks {
        let _ = write!(out, "{b:>5}");
        for r in runs {
            let cell = r.reports.get(b).and_then(BlockReport::primary).map_or_else(
                || "-".to_owned(),
                |m| {
                    let ra = m.eval.ra(metric, k).map_or_else(|| "  -   ".to_owned(), |x| format!("{x:.4}"));
                    format!("{:.4}/{ra}/{:.4}", m.eval.la(metric, k), m.eval.h_mean(metric, k))
                },
            );
            let _ = write!(out, "  {cell:>26}");
        }
        out.push('\n');
    }
    out
}

/// Final-block H-mean of student and teacher for the baseline and each
/// ablated run, with deltas against the baseline.
pub fn ablation_table(baseline: &RunOutput, rows: &[(String, RunOutput)], metric: Metric, k: usize) -> String {
    let last_h = |run: &RunOutput, model: &str| -> Option<f64> {
        run.reports
            .last()
            .and_then(|r| r.model(model))
            .map(|m| m.eval.h_mean(metric, k))
    };
    let base_s = last_h(baseline, "student");
    let base_t = last_h(baseline, "teacher");
    let mut out = format!("final-block H-mean {}@{k}\n", metric.as_str());
    let _ = writeln!(out, "{:<28} {:>9} {:>9} {:>9} {:>9}", "variant", "student", "delta", "teacher", "delta");
    let delta = |v: Option<f64>, b: Option<f64>| fmt_opt(v.zip(b).map(|(x, y)| x - y));
    let _ = writeln!(
        out,
        "{:<28} {:>9} {:>9} {:>9} {:>9}",
        "CCD",
        fmt_opt(base_s),
        "",
        fmt_opt(base_t),
        ""
    );
    for (label, run) in rows {
        let s = last_h(run, "student");
        let t = last_h(run, "teacher");
        let _ = writeln!(
            out,
            "{label:<28} {:>9} {:>9} {:>9} {:>9}",
            fmt_opt(s),
            delta(s, base_s),
            fmt_opt(t),
            delta(t, base_t)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::BlockScore;

    fn eval(current: usize, values: &[f64]) -> ContinualEval {
        ContinualEval {
            current,
            ks: vec![20],
            per_block: values
                .iter()
                .enumerate()
                .map(|(b, &v)| BlockScore {
                    block: b,
                    users: 5,
                    recall: vec![v],
                    ndcg: vec![v],
                })
                .collect(),
        }
    }

    fn run(method: Method, la: &[f64]) -> RunOutput {
        RunOutput {
            method,
            reports: la
                .iter()
                .enumerate()
                .map(|(b, &v)| BlockReport {
                    block: b,
                    models: vec![ModelReport {
                        name: "student".into(),
                        parameters: 10,
                        eval: eval(0, &[v]),
                        slices: Vec::new(),
                    }],
                })
                .collect(),
            losses: Vec::new(),
            timings: Vec::new(),
        }
    }

    #[test]
    fn gain_series_has_one_entry_per_block() {
        let runs = [
            run(Method::Ccd, &[0.5, 0.6, 0.7]),
            run(Method::FineTune, &[0.5, 0.4, 0.3]),
            run(Method::FullBatch, &[0.5, 0.65, 0.2]),
        ];
        let g = gain_series(&runs, Metric::Recall, 20);
        assert_eq!(g.len(), 3);
        assert!((g[1].1.unwrap() - (0.6 - 0.65)).abs() < 1e-12);
        assert!((g[2].1.unwrap() - 0.4).abs() < 1e-12);
        assert!(gain_series(&runs[1..], Metric::Recall, 20).is_empty());
    }

    #[test]
    fn tsv_marks_missing_ra() {
        let text = reports_tsv(Method::Ccd, &run(Method::Ccd, &[0.5]).reports);
        assert!(text.contains("\tRA\tNA\t"));
        assert!(text.lines().all(|l| l.split('\t').count() == 8));
    }
}
