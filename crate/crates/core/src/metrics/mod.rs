//! Displacement, rotation, uncertainty and behaviour-coupling metrics.

mod report;

pub use report::{
    read_table1, read_table2, read_table3, write_table1, write_table2, write_table3, Table1Row, Table2Row,
    Table3Row,
};

use serde::{Deserialize, Serialize};

use crate::episodes::{BehaviorLabel, LabelKind, LabelSet};
use crate::error::{Error, Result};
use crate::geometry::Rot6D;

/// Behaviours counted as difficulty events.
pub const DIFFICULTY: [BehaviorLabel; 5] = BehaviorLabel::DIFFICULTY;

fn check_pair<T>(op: &'static str, a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::shape(op, "empty input"));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean Euclidean distance over steps.
pub fn ade(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_pair("ade", pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| dist(*p, *g)).sum::<f64>() / pred.len() as f64)
}

/// Euclidean distance at the last step.
pub fn fde(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_pair("fde", pred, gt)?;
    Ok(dist(*pred.last().expect("non-empty"), *gt.last().expect("non-empty")))
}

/// Mean relative rotation L1, identical to the training head loss.
pub fn head_l1(pred: &[Rot6D], gt: &[Rot6D]) -> Result<f64> {
    crate::training::head_loss(pred, gt)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("mae", pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::DegenerateInput("constant input to rank correlation".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("spearman", a, b)?;
    if a.len() < 3 {
        return Err(Error::TooFew { needed: 3, got: a.len() });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "spearman" });
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Indices of the `ceil(fraction * N)` largest values, ties in input order.
pub fn top_fraction(values: &[f64], fraction: f64) -> Vec<usize> {
    let k = (fraction * values.len() as f64).ceil() as usize;
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*b].total_cmp(&values[*a]));
    idx.truncate(k);
    idx
}

pub fn is_difficulty(set: LabelSet) -> bool {
    set.intersects(LabelSet::of(&DIFFICULTY))
}

/// Fraction of the top-20% `u_hat` windows whose behaviour set holds a
/// difficulty event.
pub fn high_u_precision(u_hat: &[f64], behavior: &[LabelSet]) -> Result<f64> {
    if u_hat.len() != behavior.len() {
        return Err(Error::shape("high_u_precision", format!("{} vs {}", u_hat.len(), behavior.len())));
    }
    if u_hat.len() < 5 {
        return Err(Error::TooFew { needed: 5, got: u_hat.len() });
    }
    let top = top_fraction(u_hat, 0.2);
    let hits = top.iter().filter(|i| is_difficulty(behavior[**i])).count();
    Ok(hits as f64 / top.len() as f64)
}

/// Predicted and reported uncertainty at one prediction step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub episode_id: String,
    pub step: usize,
    pub u_hat: f64,
    pub u_human: f64,
    pub behavior: LabelSet,
}

/// Marks records that start a run of non-empty behaviour sets. Runs are
/// contiguous in step order within an episode.
pub fn onset_flags(records: &[UncertaintyRecord]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|a, b| {
        let (ra, rb) = (&records[*a], &records[*b]);
        ra.episode_id.cmp(&rb.episode_id).then(ra.step.cmp(&rb.step))
    });
    let mut flags = vec![false; records.len()];
    let mut prev: Option<usize> = None;
    for &i in &order {
        let r = &records[i];
        let continues = prev.is_some_and(|p| {
            let q = &records[p];
            q.episode_id == r.episode_id && !q.behavior.is_empty()
        });
        flags[i] = !r.behavior.is_empty() && !continues;
        prev = Some(i);
    }
    flags
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean `u_hat` at behaviour onsets minus mean `u_hat` at neutral steps.
pub fn delta_u(records: &[UncertaintyRecord]) -> Result<f64> {
    let flags = onset_flags(records);
    let onset: Vec<f64> = records.iter().zip(&flags).filter(|(_, f)| **f).map(|(r, _)| r.u_hat).collect();
    let neutral: Vec<f64> = records.iter().filter(|r| r.behavior.is_empty()).map(|r| r.u_hat).collect();
    if onset.is_empty() {
        return Err(Error::EmptyGroup("onset".into()));
    }
    if neutral.is_empty() {
        return Err(Error::EmptyGroup("neutral".into()));
    }
    Ok(mean(&onset) - mean(&neutral))
}

/// Cohen's d with pooled (n - 1) standard deviation.
pub fn effect_size(a: &[f64], b: &[f64]) -> Result<f64> {
    for g in [a, b] {
        if g.len() < 2 {
            return Err(Error::TooFew { needed: 2, got: g.len() });
        }
    }
    let (ma, mb) = (mean(a), mean(b));
    let ssa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let ssb: f64 = b.iter().map(|x| (x - mb).powi(2)).sum();
    let pooled = ((ssa + ssb) / (a.len() + b.len() - 2) as f64).sqrt();
    if !(pooled > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok((ma - mb) / pooled)
}

/// One row of the behaviour-conditioned uncertainty table.
#[derive(Debug, Clone, PartialEq)]
pub struct BreakdownRow {
    pub behavior: String,
    pub count: usize,
    pub mean_u: f64,
    /// Cohen's d against the neutral group; `None` for the neutral row or
    /// when it is undefined.
    pub effect: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorBreakdown {
    pub rows: Vec<BreakdownRow>,
    /// Groups with no records.
    pub absent: Vec<String>,
}

/// Mean `u_hat` per behaviour (all labeled steps), the union of difficulty
/// behaviours ("Any") and its complement ("Neutral").
pub fn behavior_breakdown(records: &[UncertaintyRecord]) -> BehaviorBreakdown {
    let neutral: Vec<f64> = records.iter().filter(|r| !is_difficulty(r.behavior)).map(|r| r.u_hat).collect();
    let mut groups: Vec<(String, Vec<f64>)> = DIFFICULTY
        .iter()
        .map(|l| {
            let u = records.iter().filter(|r| r.behavior.has(*l)).map(|r| r.u_hat).collect();
            (l.name().to_string(), u)
        })
        .collect();
    groups.push((
        "Any".into(),
        records.iter().filter(|r| is_difficulty(r.behavior)).map(|r| r.u_hat).collect(),
    ));
    let mut out = BehaviorBreakdown {
        rows: Vec::new(),
        absent: Vec::new(),
    };
    for (name, u) in groups {
        if u.is_empty() {
            out.absent.push(name);
            continue;
        }
        out.rows.push(BreakdownRow {
            behavior: name,
            count: u.len(),
            mean_u: mean(&u),
            effect: effect_size(&u, &neutral).ok(),
        });
    }
    if neutral.is_empty() {
        out.absent.push("Neutral".into());
    } else {
        out.rows.push(BreakdownRow {
            behavior: "Neutral".into(),
            count: neutral.len(),
            mean_u: mean(&neutral),
            effect: None,
        });
    }
    out
}
