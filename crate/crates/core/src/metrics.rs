//! F1-family scores: micro, macro, support-weighted, micro excluding a
//! neutral class, plus grouped breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::head::Prediction;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupScore {
    pub group: String,
    pub micro_f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub instances: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub micro_f1_excl_neutral: Option<f64>,
    pub f1c: Option<f64>,
    pub per_class: Vec<ClassScore>,
    /// Grouping name → per-group scores.
    pub groups: BTreeMap<String, Vec<GroupScore>>,
}

/// `2·tp / (2·tp + fp + fn)`, zero when nothing was counted.
fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

fn ratio(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

/// Square confusion matrix, `[gold][predicted]`.
pub fn confusion_matrix(preds: &[Prediction], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut cm = vec![vec![0usize; num_classes]; num_classes];
    for p in preds {
        if p.gold >= num_classes || p.predicted >= num_classes {
            return Err(Error::ShapeMismatch(format!(
                "label pair ({}, {}) outside {num_classes} classes",
                p.gold, p.predicted
            )));
        }
        cm[p.gold][p.predicted] += 1;
    }
    Ok(cm)
}

pub fn f1_scores(
    preds: &[Prediction],
    num_classes: usize,
    neutral: Option<usize>,
) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let cm = confusion_matrix(preds, num_classes)?;
    let mut per_class = Vec::with_capacity(num_classes);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    let (mut tp_ex, mut fp_ex, mut fn_ex) = (0, 0, 0);
    for c in 0..num_classes {
        let tp = cm[c][c];
        let support: usize = cm[c].iter().sum();
        let predicted: usize = cm.iter().map(|row| row[c]).sum();
        let (fp, fn_) = (predicted - tp, support - tp);
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        if Some(c) != neutral {
            tp_ex += tp;
            fp_ex += fp;
            fn_ex += fn_;
        }
        per_class.push(ClassScore {
            precision: ratio(tp, predicted),
            recall: ratio(tp, support),
            f1: f1_from_counts(tp, fp, fn_),
            support,
            predicted,
        });
    }
    let total = preds.len() as f64;
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / num_classes as f64;
    let weighted_f1 = per_class
        .iter()
        .map(|c| c.support as f64 / total * c.f1)
        .sum();
    Ok(MetricReport {
        instances: preds.len(),
        micro_f1: f1_from_counts(tp_all, fp_all, fn_all),
        macro_f1,
        weighted_f1,
        micro_f1_excl_neutral: neutral.map(|_| f1_from_counts(tp_ex, fp_ex, fn_ex)),
        f1c: None,
        per_class,
        groups: BTreeMap::new(),
    })
}

/// Default length bucket boundaries, in dialogue tokens.
pub const DEFAULT_LENGTH_BUCKETS: [usize; 6] = [0, 100, 200, 300, 400, 500];

/// How predictions are split into groups for [`group_report`].
#[derive(Debug, Clone)]
pub enum Grouping<'a> {
    /// Group by gold class; `assignment[c]` names class `c`'s group.
    ByClass {
        name: &'a str,
        class_names: &'a [String],
        assignment: &'a BTreeMap<String, String>,
    },
    /// Group by per-instance length, into `[b_i, b_{i+1})` with the last
    /// bucket open-ended.
    ByLength {
        bounds: &'a [usize],
        lengths: &'a [usize],
    },
}

pub fn bucket_label(bounds: &[usize], i: usize) -> String {
    match bounds.get(i + 1) {
        Some(hi) => format!("[{},{})", bounds[i], hi),
        None => format!("[{},inf)", bounds[i]),
    }
}

fn group_keys(
    preds: &[Prediction],
    grouping: &Grouping<'_>,
) -> Result<(String, Vec<String>, Vec<String>)> {
    match grouping {
        Grouping::ByClass {
            name,
            class_names,
            assignment,
        } => {
            let mut order: Vec<String> = assignment.values().cloned().collect();
            order.sort();
            order.dedup();
            let keys = preds
                .iter()
                .map(|p| {
                    let class = class_names
                        .get(p.gold)
                        .ok_or_else(|| Error::UnmappedClass(format!("#{}", p.gold)))?;
                    assignment
                        .get(class)
                        .cloned()
                        .ok_or_else(|| Error::UnmappedClass(class.clone()))
                })
                .collect::<Result<_>>()?;
            Ok((name.to_string(), order, keys))
        }
        Grouping::ByLength { bounds, lengths } => {
            if lengths.len() != preds.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} lengths for {} predictions",
                    lengths.len(),
                    preds.len()
                )));
            }
            if bounds.is_empty() || bounds[0] != 0 || bounds.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "length buckets {bounds:?} must start at 0 and increase"
                )));
            }
            let order = (0..bounds.len()).map(|i| bucket_label(bounds, i)).collect();
            let keys = lengths
                .iter()
                .map(|&len| {
                    let i = bounds.iter().rposition(|&b| b <= len).unwrap_or(0);
                    bucket_label(bounds, i)
                })
                .collect();
            Ok(("length".to_string(), order, keys))
        }
    }
}

/// Global report plus per-group micro-F1 for `grouping`. Empty groups are
/// listed with support 0 and score 0.
pub fn group_report(
    preds: &[Prediction],
    num_classes: usize,
    neutral: Option<usize>,
    grouping: &Grouping<'_>,
) -> Result<MetricReport> {
    let mut report = f1_scores(preds, num_classes, neutral)?;
    add_groups(&mut report, preds, num_classes, grouping)?;
    Ok(report)
}

pub fn add_groups(
    report: &mut MetricReport,
    preds: &[Prediction],
    num_classes: usize,
    grouping: &Grouping<'_>,
) -> Result<()> {
    let (name, order, keys) = group_keys(preds, grouping)?;
    let mut scores = Vec::with_capacity(order.len());
    for group in order {
        let members: Vec<Prediction> = preds
            .iter()
            .zip(&keys)
            .filter(|(_, k)| **k == group)
            .map(|(p, _)| p.clone())
            .collect();
        let micro_f1 = if members.is_empty() {
            0.0
        } else {
            f1_scores(&members, num_classes, None)?.micro_f1
        };
        scores.push(GroupScore {
            group,
            micro_f1,
            support: members.len(),
        });
    }
    report.groups.insert(name, scores);
    Ok(())
}

impl MetricReport {
    /// Stable `key = value` text, one entry per line.
    pub fn render(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
        writeln!(out, "instances = {}", self.instances).unwrap();
        writeln!(out, "micro_f1 = {}", self.micro_f1).unwrap();
        writeln!(out, "macro_f1 = {}", self.macro_f1).unwrap();
        writeln!(out, "weighted_f1 = {}", self.weighted_f1).unwrap();
        writeln!(
            out,
            "micro_f1_excl_neutral = {}",
            opt(self.micro_f1_excl_neutral)
        )
        .unwrap();
        writeln!(out, "f1c = {}", opt(self.f1c)).unwrap();
        for (c, s) in self.per_class.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            writeln!(out, "class.{name}.precision = {}", s.precision).unwrap();
            writeln!(out, "class.{name}.recall = {}", s.recall).unwrap();
            writeln!(out, "class.{name}.f1 = {}", s.f1).unwrap();
            writeln!(out, "class.{name}.support = {}", s.support).unwrap();
        }
        for (grouping, scores) in &self.groups {
            for g in scores {
                writeln!(
                    out,
                    "group.{grouping}.{}.micro_f1 = {}",
                    g.group, g.micro_f1
                )
                .unwrap();
                writeln!(out, "group.{grouping}.{}.support = {}", g.group, g.support).unwrap();
            }
        }
        out
    }
}
