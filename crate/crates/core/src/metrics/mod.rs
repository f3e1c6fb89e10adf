//! Quantitative assessment: overlap metrics, ROC/AUC, paired t-tests, and
//! grouped cross-validation splits.

pub mod special;

use crate::error::{Error, Result};
use crate::labels::{LabelVector, NUM_CLASSES};
use crate::lrg::BinaryMask;
use crate::rng::Rng;

// ── Overlap metrics ─────────────────────────────────────────────────────

fn overlap_counts(x: &BinaryMask, y: &BinaryMask) -> Result<(usize, usize, usize)> {
    if x.width() != y.width() || x.height() != y.height() {
        return Err(Error::ShapeMismatch(format!(
            "mask extents {}x{} vs {}x{}",
            x.width(),
            x.height(),
            y.width(),
            y.height()
        )));
    }
    let mut inter = 0usize;
    let (mut nx, mut ny) = (0usize, 0usize);
    for (&a, &b) in x.bits().iter().zip(y.bits()) {
        inter += usize::from(a && b);
        nx += usize::from(a);
        ny += usize::from(b);
    }
    Ok((inter, nx, ny))
}

/// Dice similarity coefficient 2|X∩Y|/(|X|+|Y|); 1.0 when both masks are empty.
pub fn dice(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    let (inter, nx, ny) = overlap_counts(x, y)?;
    if nx + ny == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (nx + ny) as f64)
}

/// Intersection over union |X∩Y|/|X∪Y|; 1.0 when both masks are empty.
pub fn iou(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    let (inter, nx, ny) = overlap_counts(x, y)?;
    let union = nx + ny - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

// ── ROC / AUC ───────────────────────────────────────────────────────────

/// One operating point of a ROC curve: predicting positive for scores
/// >= `threshold` yields this (fpr, tpr).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Tie-aware ROC curve, anchored at (0,0) and (1,1).
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Area under the curve by trapezoidal integration.
    pub fn trapezoid_area(&self) -> f64 {
        let mut area = 0.0;
        for w in self.points.windows(2) {
            area += (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0;
        }
        area
    }
}

/// Rank-statistic AUC with midranks for ties, plus the induced ROC curve.
///
/// Errors when only one class is present: a silent 0.5 would corrupt any
/// mean over classes.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(RocCurve, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores must be finite".into()));
    }

    // Sort ascending by score; assign midranks to tied groups; AUC from the
    // positive-rank sum (Mann-Whitney).
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based: the tied block [i, j] shares the midrank.
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;

    // Tie-aware curve: walk unique scores descending; each unique score is
    // the threshold "predict positive when score >= t".
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = order.len();
    while k > 0 {
        let mut j = k;
        let threshold = scores[order[k - 1]];
        while j > 0 && scores[order[j - 1]] == threshold {
            j -= 1;
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
        k = j;
    }
    Ok((RocCurve { points }, auc))
}

/// Arithmetic mean of the 14 per-class AUCs.
pub fn mean_auc(per_class: &[f64]) -> Result<f64> {
    if per_class.len() != NUM_CLASSES {
        return Err(Error::WrongArity(format!(
            "mean_auc expects {NUM_CLASSES} values, got {}",
            per_class.len()
        )));
    }
    if per_class.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("per-class AUC must be finite".into()));
    }
    Ok(per_class.iter().sum::<f64>() / NUM_CLASSES as f64)
}

// ── Paired t-test ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub p_two_tailed: f64,
    /// All differences identical and nonzero: sd = 0, p forced to 0.
    pub degenerate: bool,
}

/// Paired t-test of a against b: d = a - b, t = mean(d)/(sd(d)/sqrt(n)) with
/// the sample standard deviation, p from Student-t with n-1 df.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(format!("{} vs {} samples", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::WrongArity("paired t-test needs n >= 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let ss = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    let sd = (ss / (n - 1) as f64).sqrt();

    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTestResult { t: 0.0, p_two_tailed: 1.0, degenerate: false }
        } else {
            TTestResult {
                t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                p_two_tailed: 0.0,
                degenerate: true,
            }
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let p = special::student_t_two_tailed(t, (n - 1) as f64);
    Ok(TTestResult { t, p_two_tailed: p, degenerate: false })
}

// ── Grouped k-fold splitting ────────────────────────────────────────────

/// Partition items into k folds such that no group key spans two folds.
///
/// Groups are shuffled by seed, then assigned largest-first to the smallest
/// fold, keeping fold sizes within one group size of each other. Returns,
/// per fold, the indices of the input items.
pub fn kfold_split(group_keys: &[String], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k must be >= 2, got {k}")));
    }
    // Group items by key, first-seen order.
    let mut names: Vec<&str> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut index: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for (i, key) in group_keys.iter().enumerate() {
        match index.get(key.as_str()) {
            Some(&g) => members[g].push(i),
            None => {
                index.insert(key.as_str(), names.len());
                names.push(key);
                members.push(vec![i]);
            }
        }
    }
    if members.len() < k {
        return Err(Error::InvalidConfig(format!(
            "need at least {k} distinct groups, got {}",
            members.len()
        )));
    }

    let mut order: Vec<usize> = (0..members.len()).collect();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut order);
    // Largest groups first; the shuffled position breaks size ties.
    let mut ranked: Vec<(usize, usize)> =
        order.iter().enumerate().map(|(pos, &g)| (pos, g)).collect();
    ranked.sort_by(|a, b| members[b.1].len().cmp(&members[a.1].len()).then(a.0.cmp(&b.0)));

    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (_, g) in ranked {
        let target = (0..k).min_by_key(|&f| (folds[f].len(), f)).unwrap();
        folds[target].extend_from_slice(&members[g]);
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

// ── Evaluation report ───────────────────────────────────────────────────

/// Per-class AUC for one model column.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelColumn {
    pub name: String,
    pub per_class_auc: [f64; NUM_CLASSES],
    pub mean_auc: f64,
}

/// A named pairwise model comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub result: TTestResult,
}

/// Full evaluation output: model columns in canonical class order, paired
/// t-tests between them, and the fold assignment that produced the split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub columns: Vec<ModelColumn>,
    pub comparisons: Vec<Comparison>,
    pub fold_assignments: Vec<(String, usize)>,
}

impl ModelColumn {
    pub fn new(name: &str, per_class_auc: [f64; NUM_CLASSES]) -> Result<Self> {
        let mean = mean_auc(&per_class_auc)?;
        Ok(ModelColumn { name: name.to_string(), per_class_auc, mean_auc: mean })
    }
}

/// Per-class AUC over a prediction matrix (rows = items, 14 columns).
pub fn per_class_auc(
    probs: &[LabelVector],
    truth: &[LabelVector],
) -> Result<[f64; NUM_CLASSES]> {
    if probs.len() != truth.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} truths",
            probs.len(),
            truth.len()
        )));
    }
    let mut aucs = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let labels: Vec<bool> = truth.iter().map(|t| t[c] != 0.0).collect();
        let (_, auc) = roc_auc(&scores, &labels)?;
        aucs[c] = auc;
    }
    Ok(aucs)
}
