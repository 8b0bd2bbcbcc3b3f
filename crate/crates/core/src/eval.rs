//! Scoring predictions against adjudicated human labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adjudication::{self, AdjudicationError, DirectionalJudgment, Realizations, Verdict};
use crate::label::EntailmentLabel;
use crate::par;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("truth and prediction keys differ: {missing} without prediction, {unexpected} without truth (e.g. `{example}`)")]
    KeyMismatch { missing: usize, unexpected: usize, example: String },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error(transparent)]
    Adjudication(#[from] AdjudicationError),
}

/// What to do with UNRESOLVED model outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnresolvedPolicy {
    /// Drop the pair from the matrix; it is counted in `excluded_pairs`.
    #[default]
    Exclude,
    /// Keep the pair as an error against its true class.
    CountAsWrong,
}

/// Rows are true labels, columns predicted labels, both in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub cells: [[u64; 3]; 3],
    /// Pairs kept under [`UnresolvedPolicy::CountAsWrong`], by true label.
    #[serde(default)]
    pub abstained: [u64; 3],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: EntailmentLabel, pred: Option<EntailmentLabel>) {
        match pred {
            Some(p) => self.cells[truth.index()][p.index()] += 1,
            None => self.abstained[truth.index()] += 1,
        }
    }

    pub fn cell(&self, truth: EntailmentLabel, pred: EntailmentLabel) -> u64 {
        self.cells[truth.index()][pred.index()]
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().sum::<u64>() + self.abstained.iter().sum::<u64>()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.cells[i][i]).sum()
    }

    /// True-label count for a class.
    pub fn support(&self, l: EntailmentLabel) -> u64 {
        self.cells[l.index()].iter().sum::<u64>() + self.abstained[l.index()]
    }

    fn predicted(&self, l: EntailmentLabel) -> u64 {
        self.cells.iter().map(|row| row[l.index()]).sum()
    }

    /// Precision and recall of one class; 0 when the denominator is 0.
    pub fn class_scores(&self, l: EntailmentLabel) -> (f64, f64) {
        let tp = self.cell(l, l) as f64;
        let ratio = |d: u64| if d == 0 { 0.0 } else { tp / d as f64 };
        (ratio(self.predicted(l)), ratio(self.support(l)))
    }
}

/// Builds a matrix over identical key sets.
pub fn confusion(
    truth: &BTreeMap<String, EntailmentLabel>,
    preds: &BTreeMap<String, EntailmentLabel>,
) -> Result<ConfusionMatrix, EvalError> {
    check_keys(truth.keys(), preds.keys(), |k| truth.contains_key(k), |k| preds.contains_key(k))?;
    let mut cm = ConfusionMatrix::default();
    for (k, t) in truth {
        cm.add(*t, Some(preds[k]));
    }
    Ok(cm)
}

fn check_keys<'a>(
    truth: impl Iterator<Item = &'a String>,
    preds: impl Iterator<Item = &'a String>,
    in_truth: impl Fn(&str) -> bool,
    in_preds: impl Fn(&str) -> bool,
) -> Result<(), EvalError> {
    let missing: Vec<&String> = truth.filter(|k| !in_preds(k)).collect();
    let unexpected: Vec<&String> = preds.filter(|k| !in_truth(k)).collect();
    if missing.is_empty() && unexpected.is_empty() {
        return Ok(());
    }
    let example = missing.first().or(unexpected.first()).map(|s| s.to_string()).unwrap_or_default();
    Err(EvalError::KeyMismatch { missing: missing.len(), unexpected: unexpected.len(), example })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub accuracy: f64,
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let (mut p, mut r) = (0.0, 0.0);
    for l in EntailmentLabel::ALL {
        let (pl, rl) = cm.class_scores(l);
        p += pl;
        r += rl;
    }
    Ok(Metrics { macro_precision: p / 3.0, macro_recall: r / 3.0, accuracy: cm.trace() as f64 / total as f64 })
}

/// Mean and population standard deviation. Computed around the first value,
/// so a constant series yields exactly that value and exactly 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let Some(&x0) = xs.first() else { return (0.0, 0.0) };
    let n = xs.len() as f64;
    let shift = xs.iter().map(|x| x - x0).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - x0 - shift).powi(2)).sum::<f64>() / n;
    (x0 + shift, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub support: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_precision_mean: f64,
    pub macro_precision_std: f64,
    pub macro_recall_mean: f64,
    pub macro_recall_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub n_draws: usize,
    pub excluded_pairs: usize,
    pub policy: UnresolvedPolicy,
    /// Means across draws.
    pub per_class: BTreeMap<EntailmentLabel, ClassScores>,
}

struct DrawScores {
    metrics: Metrics,
    per_class: [(f64, f64, f64); 3],
}

/// Metrics for every tie-break realization, then mean and std across draws.
/// UNRESOLVED predictions follow `policy`.
pub fn monte_carlo_evaluate(
    votes: &[DirectionalJudgment],
    preds: &BTreeMap<String, Verdict>,
    n_draws: usize,
    base_seed: u64,
    policy: UnresolvedPolicy,
) -> Result<EvalReport, EvalError> {
    let real = adjudication::realize_labels(votes, n_draws, base_seed)?;
    evaluate_realizations(&real, preds, policy)
}

pub fn evaluate_realizations(
    real: &Realizations,
    preds: &BTreeMap<String, Verdict>,
    policy: UnresolvedPolicy,
) -> Result<EvalReport, EvalError> {
    let ids = &real.pair_ids;
    check_keys(
        ids.iter(),
        preds.keys(),
        |k| ids.binary_search_by(|p| p.as_str().cmp(k)).is_ok(),
        |k| preds.contains_key(k),
    )?;
    let aligned: Vec<Option<EntailmentLabel>> = ids.iter().map(|k| preds[k].label()).collect();
    let excluded_pairs = match policy {
        UnresolvedPolicy::Exclude => aligned.iter().filter(|p| p.is_none()).count(),
        UnresolvedPolicy::CountAsWrong => 0,
    };
    let scores: Vec<DrawScores> = par::try_map(&real.draws, |d| {
        let mut cm = ConfusionMatrix::default();
        for (t, p) in d.labels.iter().zip(&aligned) {
            if p.is_some() || policy == UnresolvedPolicy::CountAsWrong {
                cm.add(*t, *p);
            }
        }
        let metrics = macro_metrics(&cm)?;
        let per_class = EntailmentLabel::ALL.map(|l| {
            let (p, r) = cm.class_scores(l);
            (p, r, cm.support(l) as f64)
        });
        Ok::<_, EvalError>(DrawScores { metrics, per_class })
    })?;
    let col = |f: &dyn Fn(&DrawScores) -> f64| mean_std(&scores.iter().map(f).collect::<Vec<_>>());
    let (pm, ps) = col(&|s| s.metrics.macro_precision);
    let (rm, rs) = col(&|s| s.metrics.macro_recall);
    let (am, as_) = col(&|s| s.metrics.accuracy);
    let per_class = EntailmentLabel::ALL
        .into_iter()
        .map(|l| {
            let i = l.index();
            let c = ClassScores {
                precision: col(&|s| s.per_class[i].0).0,
                recall: col(&|s| s.per_class[i].1).0,
                support: col(&|s| s.per_class[i].2).0,
            };
            (l, c)
        })
        .collect();
    Ok(EvalReport {
        macro_precision_mean: pm,
        macro_precision_std: ps,
        macro_recall_mean: rm,
        macro_recall_std: rs,
        accuracy_mean: am,
        accuracy_std: as_,
        n_draws: real.draws.len(),
        excluded_pairs,
        policy,
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub mean_count: f64,
    pub mean_percentage: f64,
}

/// Mean label counts across realizations and their share of all pairs.
pub fn class_distribution(real: &Realizations) -> BTreeMap<EntailmentLabel, ClassShare> {
    let n_pairs = real.pair_ids.len();
    let draws = real.draws.len().max(1) as f64;
    let mut sums = [0u64; 3];
    for d in &real.draws {
        for l in &d.labels {
            sums[l.index()] += 1;
        }
    }
    EntailmentLabel::ALL
        .into_iter()
        .map(|l| {
            let mean_count = sums[l.index()] as f64 / draws;
            let mean_percentage = if n_pairs == 0 { 0.0 } else { 100.0 * mean_count / n_pairs as f64 };
            (l, ClassShare { mean_count, mean_percentage })
        })
        .collect()
}

pub fn format_distribution(dist: &BTreeMap<EntailmentLabel, ClassShare>) -> String {
    let mut s = format!("{:<15}{:>10}{:>10}\n", "Label", "Count", "Share");
    let mut total = (0.0, 0.0);
    for (l, c) in dist {
        let _ = writeln!(s, "{:<15}{:>10.1}{:>9.1}%", l.keyword(), c.mean_count, c.mean_percentage);
        total.0 += c.mean_count;
        total.1 += c.mean_percentage;
    }
    let _ = writeln!(s, "{:<15}{:>10.1}{:>9.1}%", "TOTAL", total.0, total.1);
    s
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub condition: String,
    pub report: EvalReport,
}

/// Plain-text table: model, condition, then mean ± std for macro precision,
/// macro recall and accuracy.
pub fn format_table(rows: &[ReportRow], condition_header: &str) -> String {
    let mw = rows.iter().map(|r| r.model.len()).chain([5]).max().unwrap_or(5) + 2;
    let cw = rows.iter().map(|r| r.condition.len()).chain([condition_header.len()]).max().unwrap_or(0) + 2;
    let mut s = format!(
        "{:<mw$}{:<cw$}{:>17}{:>17}{:>17}{:>10}\n",
        "Model", condition_header, "Precision", "Recall", "Accuracy", "Excluded"
    );
    for r in rows {
        let e = &r.report;
        let cell = |m: f64, sd: f64| format!("{m:.4} ± {sd:.4}");
        let _ = writeln!(
            s,
            "{:<mw$}{:<cw$}{:>17}{:>17}{:>17}{:>10}",
            r.model,
            r.condition,
            cell(e.macro_precision_mean, e.macro_precision_std),
            cell(e.macro_recall_mean, e.macro_recall_std),
            cell(e.accuracy_mean, e.accuracy_std),
            e.excluded_pairs
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{PresentationOrder, Vote};
    use proptest::prelude::*;
    use EntailmentLabel::*;

    fn map(ls: &[EntailmentLabel]) -> BTreeMap<String, EntailmentLabel> {
        ls.iter().enumerate().map(|(i, l)| (format!("p{i}"), *l)).collect()
    }

    #[test]
    fn confusion_counts() {
        let cm = confusion(&map(&[E, E, N, C]), &map(&[E, N, N, C])).unwrap();
        assert_eq!(cm.cell(E, E), 1);
        assert_eq!(cm.cell(E, N), 1);
        assert_eq!(cm.cell(N, N), 1);
        assert_eq!(cm.cell(C, C), 1);
        assert_eq!(cm.total(), 4);
        let same = map(&[E, N, C, C, E]);
        assert_eq!(confusion(&same, &same).unwrap().trace(), 5);
        let other: BTreeMap<String, EntailmentLabel> = [("x".to_string(), E)].into();
        assert!(matches!(confusion(&same, &other), Err(EvalError::KeyMismatch { missing: 5, unexpected: 1, .. })));
    }

    const E: EntailmentLabel = Entailment;
    const N: EntailmentLabel = Neutral;
    const C: EntailmentLabel = Contradiction;

    #[test]
    fn metric_hand_check() {
        let m = macro_metrics(&confusion(&map(&[E, E, N, C]), &map(&[E, N, N, C])).unwrap()).unwrap();
        assert!((m.macro_precision - 2.5 / 3.0).abs() < 1e-12);
        assert!((m.macro_recall - 2.5 / 3.0).abs() < 1e-12);
        assert!((m.accuracy - 0.75).abs() < 1e-12);
        let t = map(&[E, N, C]);
        assert_eq!(macro_metrics(&confusion(&t, &t).unwrap()).unwrap(), Metrics { macro_precision: 1.0, macro_recall: 1.0, accuracy: 1.0 });
        let cm = confusion(&map(&[E, N, C, E]), &map(&[N, N, N, N])).unwrap();
        assert_eq!(cm.class_scores(N).1, 1.0);
        assert_eq!(cm.class_scores(E), (0.0, 0.0));
        assert_eq!(cm.class_scores(C), (0.0, 0.0));
        assert!(matches!(macro_metrics(&ConfusionMatrix::default()), Err(EvalError::EmptyMatrix)));
    }

    #[test]
    fn mean_std_constant_is_exact() {
        let xs = vec![2.5 / 3.0; 1000];
        assert_eq!(mean_std(&xs), (2.5 / 3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    fn judgments(pair: &str, pc: [Vote; 5], cp: [Vote; 5]) -> Vec<DirectionalJudgment> {
        let mut v = Vec::new();
        for (order, vs) in [(PresentationOrder::PostFirst, pc), (PresentationOrder::ClaimFirst, cp)] {
            for (i, label) in vs.into_iter().enumerate() {
                v.push(DirectionalJudgment { pair_id: pair.into(), order, rater_id: format!("r{i}"), label });
            }
        }
        v
    }

    use Vote::{Contradiction as VC, Entailment as VE, Neutral as VN};

    #[test]
    fn no_ties_zero_std() {
        let mut v = judgments("a", [VE, VE, VE, VN, VC], [VN; 5]);
        v.extend(judgments("b", [VC; 5], [VC, VC, VC, VN, VE]));
        v.extend(judgments("c", [VN; 5], [VN; 5]));
        let preds: BTreeMap<String, Verdict> =
            [("a", Verdict::Entailment), ("b", Verdict::Neutral), ("c", Verdict::Neutral)].map(|(k, v)| (k.to_string(), v)).into();
        let r = monte_carlo_evaluate(&v, &preds, 1000, 11, UnresolvedPolicy::Exclude).unwrap();
        assert_eq!((r.macro_precision_std, r.macro_recall_std, r.accuracy_std), (0.0, 0.0, 0.0));
        let one = monte_carlo_evaluate(&v, &preds, 1, 11, UnresolvedPolicy::Exclude).unwrap();
        assert_eq!(one.accuracy_mean, r.accuracy_mean);
        assert_eq!(one.macro_precision_mean, r.macro_precision_mean);
        assert!((r.accuracy_mean - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r, monte_carlo_evaluate(&v, &preds, 1000, 11, UnresolvedPolicy::Exclude).unwrap());
    }

    #[test]
    fn single_tie_accuracy() {
        let v = judgments("p", [VE, VE, VN, VN, VC], [VN, VN, VN, VC, VE]);
        let preds: BTreeMap<String, Verdict> = [("p".to_string(), Verdict::Entailment)].into();
        let r = monte_carlo_evaluate(&v, &preds, 1000, 0, UnresolvedPolicy::Exclude).unwrap();
        assert!((r.accuracy_mean - 0.5).abs() <= 3.0 * (0.25f64 / 1000.0).sqrt());
        assert!(r.accuracy_std > 0.0);
    }

    #[test]
    fn unresolved_policies() {
        let mut v = judgments("a", [VE; 5], [VE; 5]);
        v.extend(judgments("b", [VN; 5], [VN; 5]));
        let preds: BTreeMap<String, Verdict> =
            [("a".to_string(), Verdict::Entailment), ("b".to_string(), Verdict::Unresolved)].into();
        let ex = monte_carlo_evaluate(&v, &preds, 3, 0, UnresolvedPolicy::Exclude).unwrap();
        assert_eq!(ex.excluded_pairs, 1);
        assert_eq!(ex.accuracy_mean, 1.0);
        let wrong = monte_carlo_evaluate(&v, &preds, 3, 0, UnresolvedPolicy::CountAsWrong).unwrap();
        assert_eq!(wrong.excluded_pairs, 0);
        assert_eq!(wrong.accuracy_mean, 0.5);
        assert_eq!(wrong.per_class[&Neutral].recall, 0.0);
        let missing: BTreeMap<String, Verdict> = [("a".to_string(), Verdict::Entailment)].into();
        assert!(matches!(
            monte_carlo_evaluate(&v, &missing, 3, 0, UnresolvedPolicy::Exclude),
            Err(EvalError::KeyMismatch { missing: 1, .. })
        ));
    }

    #[test]
    fn distribution() {
        let mut v = judgments("a", [VE; 5], [VE; 5]);
        v.extend(judgments("b", [VE; 5], [VN; 5]));
        v.extend(judgments("c", [VN; 5], [VN; 5]));
        v.extend(judgments("d", [VC; 5], [VC; 5]));
        let real = adjudication::realize_labels(&v, 1, 0).unwrap();
        let d = class_distribution(&real);
        assert_eq!(d[&Entailment].mean_count, 2.0);
        assert_eq!(d[&Entailment].mean_percentage, 50.0);
        assert!(format_distribution(&d).contains("ENTAILMENT"));

        // tie {E, N} in post-first with C/C elsewhere gives E or N at half each
        let t = judgments("t", [VE, VE, VN, VN, VC], [VC; 5]);
        let real = adjudication::realize_labels(&t, 4000, 3).unwrap();
        let d = class_distribution(&real);
        assert!((d[&Entailment].mean_count - 0.5).abs() < 3.0 * (0.25f64 / 4000.0).sqrt());
        assert!((d[&Entailment].mean_count + d[&Neutral].mean_count - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_layout() {
        let mut v = judgments("a", [VE; 5], [VE; 5]);
        v.extend(judgments("b", [VN; 5], [VN; 5]));
        let preds: BTreeMap<String, Verdict> =
            [("a".to_string(), Verdict::Entailment), ("b".to_string(), Verdict::Neutral)].into();
        let report = monte_carlo_evaluate(&v, &preds, 2, 0, UnresolvedPolicy::Exclude).unwrap();
        let t = format_table(&[ReportRow { model: "m".into(), condition: "zero-shot".into(), report }], "Prompt Style");
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Model") && lines[0].contains("Prompt Style") && lines[0].contains("Accuracy"));
        assert!(lines[1].contains("1.0000 ± 0.0000"));
    }

    fn label() -> impl Strategy<Value = EntailmentLabel> {
        (0usize..3).prop_map(|i| EntailmentLabel::from_index(i).unwrap())
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_permutation_invariant(
            pairs in proptest::collection::vec((label(), label()), 1..60),
            rot in 0usize..60,
        ) {
            let truth = map(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let preds = map(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let cm = confusion(&truth, &preds).unwrap();
            let m = macro_metrics(&cm).unwrap();
            for x in [m.macro_precision, m.macro_recall, m.accuracy] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            let diag = pairs.iter().filter(|p| p.0 == p.1).count();
            prop_assert_eq!(m.accuracy, diag as f64 / pairs.len() as f64);
            let mut rotated = pairs.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let m2 = macro_metrics(&confusion(
                &map(&rotated.iter().map(|p| p.0).collect::<Vec<_>>()),
                &map(&rotated.iter().map(|p| p.1).collect::<Vec<_>>()),
            ).unwrap()).unwrap();
            prop_assert_eq!(m, m2);
        }

        #[test]
        fn distribution_sums_to_100(seed in any::<u64>(), ties in 0usize..4) {
            let mut v = Vec::new();
            for i in 0..6 {
                let pc = if i < ties { [VE, VE, VN, VN, VC] } else { [VC; 5] };
                v.extend(judgments(&format!("p{i}"), pc, [VN, VN, VC, VC, VE]));
            }
            let real = adjudication::realize_labels(&v, 50, seed).unwrap();
            let total: f64 = class_distribution(&real).values().map(|c| c.mean_percentage).sum();
            prop_assert!((total - 100.0).abs() < 1e-9);
        }
    }
}
