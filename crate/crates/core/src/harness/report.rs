//! Aggregation over trials, the text tables and the pipeline-level checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::{Method, TrialOutcome};

pub const REPORT_VERSION: u32 = 1;

/// Slack allowed on each step of the YONO ≤ PQ-MOpt ≤ PQ-M drop ordering.
pub const ORDERING_SLACK: f64 = 0.005;
/// Minimum suite compression ratio.
pub const MIN_RATIO: f64 = 8.0;
/// A held-out model must add less than this fraction of its f32 size.
pub const MAX_GROWTH_FRACTION: f64 = 0.2;
pub const MAX_SUITE_ESCAPES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std, n }
    }

    fn pct(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub test: Stat,
    pub holdout: Stat,
    /// Original minus compressed accuracy on the test split.
    pub drop: Stat,
    pub holdout_drop: Stat,
    pub max_escapes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub held_out: bool,
    pub params: usize,
    pub original_f32_bytes: usize,
    pub methods: Vec<MethodSummary>,
}

impl TaskSummary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub method: Method,
    pub bytes: Stat,
    pub ratio: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub model: String,
    pub arena_bytes: usize,
    pub bytes_read: Stat,
    pub raw_bytes_read: Stat,
    pub int8_test_accuracy: Stat,
    pub agreement: Stat,
    pub weights_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub k: usize,
    pub epsilon: f64,
    pub arena_bytes: usize,
    pub tasks: Vec<TaskSummary>,
    pub sizes: Vec<SizeRow>,
    /// Bytes the held-out models add to the suite bundle.
    pub growth_bytes: Stat,
    pub growth_original_bytes: usize,
    pub runtime: Vec<RuntimeRow>,
    pub trials: Vec<TrialOutcome>,
}

impl ExperimentReport {
    pub fn build(cfg: &ExperimentConfig, trials: Vec<TrialOutcome>) -> ExperimentReport {
        let mut tasks = Vec::new();
        if let Some(first) = trials.first() {
            for (ti, t) in first.tasks.iter().enumerate() {
                let rows: Vec<_> = trials.iter().map(|tr| &tr.tasks[ti]).collect();
                let orig = |f: &dyn Fn(&super::pipeline::Accuracy) -> f64| -> Vec<f64> {
                    rows.iter()
                        .map(|r| f(&r.get(Method::Original).unwrap().accuracy))
                        .collect()
                };
                let (ot, oh) = (orig(&|a| a.test), orig(&|a| a.holdout));
                let methods = t
                    .outcomes
                    .iter()
                    .map(|o| {
                        let outs: Vec<_> = rows.iter().map(|r| r.get(o.method).unwrap()).collect();
                        let test: Vec<f64> = outs.iter().map(|o| o.accuracy.test).collect();
                        let hold: Vec<f64> = outs.iter().map(|o| o.accuracy.holdout).collect();
                        let diff = |a: &[f64], b: &[f64]| {
                            a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()
                        };
                        MethodSummary {
                            method: o.method,
                            test: Stat::of(&test),
                            holdout: Stat::of(&hold),
                            drop: Stat::of(&diff(&ot, &test)),
                            holdout_drop: Stat::of(&diff(&oh, &hold)),
                            max_escapes: outs.iter().map(|o| o.escapes.len()).max().unwrap_or(0),
                        }
                    })
                    .collect();
                tasks.push(TaskSummary {
                    task: t.task.clone(),
                    held_out: t.held_out,
                    params: t.params,
                    original_f32_bytes: t.original_f32_bytes,
                    methods,
                });
            }
        }
        let mut per_method: BTreeMap<Method, Vec<(f64, f64)>> = BTreeMap::new();
        // An empty suite has nothing to compress; its header-only bundles are not a size.
        for tr in trials.iter().filter(|t| t.suite_original_bytes > 0) {
            for (&m, &b) in &tr.sizes {
                per_method
                    .entry(m)
                    .or_default()
                    .push((b as f64, tr.suite_original_bytes as f64 / b.max(1) as f64));
            }
        }
        let sizes = per_method
            .into_iter()
            .map(|(method, v)| SizeRow {
                method,
                bytes: Stat::of(&v.iter().map(|p| p.0).collect::<Vec<_>>()),
                ratio: Stat::of(&v.iter().map(|p| p.1).collect::<Vec<_>>()),
            })
            .collect();
        let mut runtime = Vec::new();
        let checks: Vec<_> = trials.iter().filter_map(|t| t.runtime.as_ref()).collect();
        if let Some(first) = checks.first() {
            for (mi, m) in first.models.iter().enumerate() {
                let col = |f: &dyn Fn(&super::pipeline::RuntimeModelCheck) -> f64| {
                    Stat::of(&checks.iter().map(|c| f(&c.models[mi])).collect::<Vec<_>>())
                };
                runtime.push(RuntimeRow {
                    model: m.model.clone(),
                    arena_bytes: checks
                        .iter()
                        .map(|c| c.models[mi].arena_bytes)
                        .max()
                        .unwrap_or(0),
                    bytes_read: col(&|r| r.bytes_read as f64),
                    raw_bytes_read: col(&|r| r.raw_bytes_read as f64),
                    int8_test_accuracy: col(&|r| r.int8_test_accuracy),
                    agreement: col(&|r| r.agreement),
                    weights_match: checks.iter().all(|c| c.models[mi].weights_match),
                });
            }
        }
        ExperimentReport {
            version: REPORT_VERSION,
            name: cfg.name.clone(),
            seed: cfg.seed,
            k: cfg.k,
            epsilon: cfg.epsilon,
            arena_bytes: cfg.arena_bytes,
            tasks,
            sizes,
            growth_bytes: Stat::of(
                &trials
                    .iter()
                    .map(|t| t.growth_bytes as f64)
                    .collect::<Vec<_>>(),
            ),
            growth_original_bytes: trials.first().map_or(0, |t| t.growth_original_bytes),
            runtime,
            trials,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    /// Fixed-width tables; identical reports render identically.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "experiment {} (seed {}, {} trials, K={}, epsilon={})",
            self.name,
            self.seed,
            self.trials.len(),
            self.k,
            self.epsilon
        );
        let methods: Vec<Method> = Method::ALL.to_vec();
        let header = |out: &mut String, title: &str| {
            let _ = writeln!(out, "\n{title}");
            let _ = write!(out, "{:<14}", "task");
            for m in &methods {
                let _ = write!(out, " {:>15}", m.name());
            }
            out.push('\n');
        };
        type Column = fn(&MethodSummary) -> &Stat;
        let tables: [(&str, Column); 3] = [
            ("test accuracy (%)", |s| &s.test),
            ("drop vs original, test split (pp)", |s| &s.drop),
            ("holdout accuracy (%)", |s| &s.holdout),
        ];
        for (title, pick) in tables {
            header(&mut out, title);
            for t in &self.tasks {
                let name = if t.held_out {
                    format!("{}*", t.task)
                } else {
                    t.task.clone()
                };
                let _ = write!(out, "{name:<14}");
                for m in &methods {
                    let cell = t.method(*m).map_or("-".to_string(), |s| pick(s).pct());
                    let _ = write!(out, " {cell:>15}");
                }
                out.push('\n');
            }
        }
        if self.tasks.iter().any(|t| t.held_out) {
            out.push_str("* held out from codebook learning\n");
        }

        let _ = writeln!(out, "\nsuite size");
        let _ = writeln!(out, "{:<10} {:>12} {:>16}", "method", "bytes", "ratio");
        for r in &self.sizes {
            let _ = writeln!(
                out,
                "{:<10} {:>12.0} {:>16}",
                r.method.name(),
                r.bytes.mean,
                format!("{:.2}x ± {:.2}", r.ratio.mean, r.ratio.std)
            );
        }
        if self.growth_original_bytes > 0 {
            let _ = writeln!(
                out,
                "held-out growth: {:.0} bytes for {} f32 bytes ({:.3} of original)",
                self.growth_bytes.mean,
                self.growth_original_bytes,
                self.growth_bytes.mean / self.growth_original_bytes as f64
            );
        }

        let _ = writeln!(
            out,
            "\nruntime (yono bundle, arena {} bytes)",
            self.arena_bytes
        );
        let _ = writeln!(
            out,
            "{:<14} {:>8} {:>10} {:>10} {:>10} {:>10} {:>7}",
            "model", "arena", "read", "raw read", "int8 acc", "agree", "weights"
        );
        for r in &self.runtime {
            let _ = writeln!(
                out,
                "{:<14} {:>8} {:>10.0} {:>10.0} {:>10.2} {:>10.2} {:>7}",
                r.model,
                r.arena_bytes,
                r.bytes_read.mean,
                r.raw_bytes_read.mean,
                100.0 * r.int8_test_accuracy.mean,
                100.0 * r.agreement.mean,
                if r.weights_match { "match" } else { "DIFFER" }
            );
        }
        out
    }

    pub fn task(&self, name: &str) -> Option<&TaskSummary> {
        self.tasks.iter().find(|t| t.task == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: u32,
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] criterion {:>2} {}: {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

/// Checks that only need the report (accuracy, generalization, size,
/// runtime safety, ablation traces).
pub fn pipeline_checks(r: &ExperimentReport) -> Vec<Check> {
    let mut checks = Vec::new();
    let eps = r.epsilon;

    // Accuracy retention and ordering on the suite.
    let mut pass = !r.tasks.is_empty();
    let mut detail = Vec::new();
    for t in r.tasks.iter().filter(|t| !t.held_out) {
        let d = |m| t.method(m).map_or(f64::NAN, |s| s.drop.mean);
        let (y, o, m) = (d(Method::Yono), d(Method::PqMOpt), d(Method::PqM));
        let ok = y <= eps && y <= o + ORDERING_SLACK && o <= m + ORDERING_SLACK;
        pass &= ok;
        detail.push(format!(
            "{} yono {:.2} mopt {:.2} m {:.2}",
            t.task,
            100.0 * y,
            100.0 * o,
            100.0 * m
        ));
    }
    checks.push(Check {
        id: 4,
        name: "suite accuracy retention".into(),
        pass,
        detail: format!("drops (pp): {}", detail.join("; ")),
    });

    let held: Vec<_> = r.tasks.iter().filter(|t| t.held_out).collect();
    let fp_same = r
        .trials
        .iter()
        .all(|t| t.fingerprint == t.fingerprint_after);
    let mut pass = !held.is_empty() && fp_same;
    let mut detail = Vec::new();
    for t in &held {
        let y = t.method(Method::Yono).map_or(f64::NAN, |s| s.drop.mean);
        pass &= y <= eps;
        detail.push(format!("{} yono drop {:.2} pp", t.task, 100.0 * y));
    }
    checks.push(Check {
        id: 5,
        name: "held-out generalization".into(),
        pass,
        detail: format!("{}; codebook hash unchanged: {fp_same}", detail.join("; ")),
    });

    let ratio = r.sizes.iter().find(|s| s.method == Method::Yono);
    let escapes = r
        .tasks
        .iter()
        .filter(|t| !t.held_out)
        .filter_map(|t| t.method(Method::Yono))
        .map(|s| s.max_escapes)
        .max()
        .unwrap_or(0);
    let min_ratio = r
        .trials
        .iter()
        .filter_map(|t| t.ratio.as_ref())
        .map(|c| c.ratio)
        .fold(f64::INFINITY, f64::min);
    let growth_ok = r.growth_original_bytes == 0
        || r.trials.iter().all(|t| {
            (t.growth_bytes as f64) < MAX_GROWTH_FRACTION * t.growth_original_bytes as f64
        });
    checks.push(Check {
        id: 6,
        name: "compression ratio".into(),
        pass: ratio.is_some()
            && min_ratio >= MIN_RATIO
            && escapes <= MAX_SUITE_ESCAPES
            && growth_ok,
        detail: format!(
            "min ratio {min_ratio:.2}x, max escapes {escapes}, growth {:.0}/{} bytes",
            r.growth_bytes.mean, r.growth_original_bytes
        ),
    });

    let rt: Vec<_> = r.trials.iter().filter_map(|t| t.runtime.as_ref()).collect();
    let weights = rt.iter().all(|c| c.models.iter().all(|m| m.weights_match));
    let safe = rt.iter().all(|c| {
        c.within_capacity
            && c.high_water <= c.capacity
            && c.flash_bytes <= c.flash_capacity
            && c.capacity_error_clean
            && c.failed_swap_kept_previous
            && c.truncated_image_rejected
    });
    let reads = rt
        .iter()
        .all(|c| c.models.iter().all(|m| m.bytes_read < m.raw_bytes_read));
    let hw = rt.iter().map(|c| c.high_water).max().unwrap_or(0);
    checks.push(Check {
        id: 9,
        name: "runtime equivalence and safety".into(),
        pass: rt.iter().any(|c| !c.models.is_empty()) && weights && safe && reads,
        detail: format!("weights match {weights}, safe {safe} (high water {hw}), compressed reads smaller {reads}"),
    });

    let (mut pass, mut traced) = (true, false);
    for tr in &r.trials {
        for t in &tr.tasks {
            let trace = |m| t.get(m).and_then(|o| o.trace.as_ref());
            if let Some(pm) = trace(Method::PqM) {
                traced = true;
                pass &= pm.iterations.is_empty();
            }
            if let Some(po) = trace(Method::PqMOpt) {
                let ends = po.iterations.first().map(|i| i.finetuned.clone());
                pass &= po
                    .iterations
                    .iter()
                    .all(|i| Some(&i.finetuned) == ends.as_ref() && i.finetuned.len() == 2);
            }
        }
    }
    checks.push(Check {
        id: 10,
        name: "ablation flag fidelity".into(),
        pass: pass && traced,
        detail: "pq-m traces empty, pq-mopt finetune set constant {1, L}".into(),
    });
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stat::of(&[7.0]).std, 0.0);
        assert_eq!(Stat::of(&[]).n, 0);
    }
}
