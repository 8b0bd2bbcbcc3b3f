//! Turning per-order votes into final pair labels.
//!
//! Each (pair, order) is decided by majority vote, ties broken uniformly at
//! random from a seeded source; the two order-level labels are then combined:
//! ENTAILMENT if either order says so, CONTRADICTION if both do, otherwise
//! NEUTRAL.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::{parse_entailment, ChatProvider, Completion, GatewayError};
use crate::label::{EntailmentLabel, PresentationOrder, PromptStyle, Vote};
use crate::par;
use crate::prompts::{PromptError, TemplateSet};

#[derive(Debug, thiserror::Error)]
pub enum AdjudicationError {
    #[error("no votes to tally")]
    NoVotes,
    #[error("pair `{pair_id}` has no valid votes in order {order}")]
    MissingOrder { pair_id: String, order: PresentationOrder },
    #[error("duplicate judgment for pair `{pair_id}`, order {order}, rater `{rater_id}`")]
    DuplicateJudgment { pair_id: String, order: PresentationOrder, rater_id: String },
    #[error("n_draws must be at least 1")]
    NoDraws,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionalJudgment {
    pub pair_id: String,
    pub order: PresentationOrder,
    pub rater_id: String,
    pub label: Vote,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTally {
    /// Indexed by [`EntailmentLabel::index`].
    pub counts: [u32; 3],
    /// Labels sharing the maximum count, in canonical order.
    pub top: Vec<EntailmentLabel>,
}

impl VoteTally {
    pub fn count(&self, l: EntailmentLabel) -> u32 {
        self.counts[l.index()]
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn is_tie(&self) -> bool {
        self.top.len() > 1
    }
}

/// Counts valid votes. Unparsable votes are ignored; `top` is empty only if
/// every vote was unparsable.
pub fn tally<'a>(votes: impl IntoIterator<Item = &'a Vote>) -> Result<VoteTally, AdjudicationError> {
    let mut counts = [0u32; 3];
    let mut seen = 0usize;
    for v in votes {
        seen += 1;
        if let Some(l) = v.label() {
            counts[l.index()] += 1;
        }
    }
    if seen == 0 {
        return Err(AdjudicationError::NoVotes);
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let top = if max == 0 {
        Vec::new()
    } else {
        EntailmentLabel::ALL.into_iter().filter(|l| counts[l.index()] == max).collect()
    };
    Ok(VoteTally { counts, top })
}

/// Majority label; ties drawn uniformly from `rng`. A clear majority consumes
/// no randomness.
///
/// Panics if `tally.top` is empty.
pub fn resolve<R: Rng + ?Sized>(tally: &VoteTally, rng: &mut R) -> EntailmentLabel {
    match tally.top.as_slice() {
        [] => panic!("resolve called on a tally without valid votes"),
        [only] => *only,
        many => many[rng.random_range(0..many.len())],
    }
}

pub fn aggregate_bidirectional(label_pc: EntailmentLabel, label_cp: EntailmentLabel) -> EntailmentLabel {
    use EntailmentLabel::*;
    match (label_pc, label_cp) {
        (Entailment, _) | (_, Entailment) => Entailment,
        (Contradiction, Contradiction) => Contradiction,
        _ => Neutral,
    }
}

/// Seed for draw `i`.
pub fn draw_seed(base_seed: u64, draw_index: usize) -> u64 {
    base_seed.wrapping_add(draw_index as u64)
}

/// Tallies for every pair, both orders, keyed by pair id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairTallies {
    pairs: Vec<(String, VoteTally, VoteTally)>,
}

impl PairTallies {
    pub fn from_judgments(votes: &[DirectionalJudgment]) -> Result<Self, AdjudicationError> {
        let mut seen = BTreeSet::new();
        let mut grouped: BTreeMap<&str, [Vec<Vote>; 2]> = BTreeMap::new();
        for j in votes {
            if !seen.insert((&j.pair_id, j.order, &j.rater_id)) {
                return Err(AdjudicationError::DuplicateJudgment {
                    pair_id: j.pair_id.clone(),
                    order: j.order,
                    rater_id: j.rater_id.clone(),
                });
            }
            let slot = match j.order {
                PresentationOrder::PostFirst => 0,
                PresentationOrder::ClaimFirst => 1,
            };
            grouped.entry(&j.pair_id).or_default()[slot].push(j.label);
        }
        let mut pairs = Vec::with_capacity(grouped.len());
        for (pair_id, [pc, cp]) in grouped {
            let t = |v: &[Vote], order| {
                tally(v)
                    .ok()
                    .filter(|t| !t.top.is_empty())
                    .ok_or_else(|| AdjudicationError::MissingOrder { pair_id: pair_id.to_string(), order })
            };
            let tpc = t(&pc, PresentationOrder::PostFirst)?;
            let tcp = t(&cp, PresentationOrder::ClaimFirst)?;
            pairs.push((pair_id.to_string(), tpc, tcp));
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair_ids(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.0.clone()).collect()
    }

    /// Number of order-level tallies with a tie.
    pub fn tie_count(&self) -> usize {
        self.pairs.iter().map(|(_, a, b)| a.is_tie() as usize + b.is_tie() as usize).sum()
    }

    /// One realization: ties resolved in pair-id order, post-first before
    /// claim-first, from a generator seeded with `seed`.
    pub fn realize(&self, seed: u64) -> Vec<EntailmentLabel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pairs
            .iter()
            .map(|(_, pc, cp)| {
                let a = resolve(pc, &mut rng);
                let b = resolve(cp, &mut rng);
                aggregate_bidirectional(a, b)
            })
            .collect()
    }
}

/// Final labels for one tie-break draw, aligned with [`Realizations::pair_ids`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRealization {
    pub draw_index: usize,
    pub labels: Vec<EntailmentLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Realizations {
    pub pair_ids: Vec<String>,
    pub draws: Vec<LabelRealization>,
}

impl Realizations {
    pub fn label(&self, draw: usize, pair_id: &str) -> Option<EntailmentLabel> {
        let i = self.pair_ids.binary_search_by(|p| p.as_str().cmp(pair_id)).ok()?;
        self.draws.get(draw).map(|d| d.labels[i])
    }

    /// Draw `i` as a map keyed by pair id.
    pub fn as_map(&self, draw: usize) -> BTreeMap<String, EntailmentLabel> {
        self.pair_ids.iter().cloned().zip(self.draws[draw].labels.iter().copied()).collect()
    }
}

/// Draw `i` uses seed `base_seed + i`. Draws are independent and computed in
/// parallel when enabled; the result does not depend on scheduling.
pub fn realize_labels(
    votes: &[DirectionalJudgment],
    n_draws: usize,
    base_seed: u64,
) -> Result<Realizations, AdjudicationError> {
    if n_draws == 0 {
        return Err(AdjudicationError::NoDraws);
    }
    let tallies = PairTallies::from_judgments(votes)?;
    Ok(realize_from_tallies(&tallies, n_draws, base_seed))
}

pub fn realize_from_tallies(tallies: &PairTallies, n_draws: usize, base_seed: u64) -> Realizations {
    let draws = par::map_range(n_draws, |i| LabelRealization {
        draw_index: i,
        labels: tallies.realize(draw_seed(base_seed, i)),
    });
    Realizations { pair_ids: tallies.pair_ids(), draws }
}

/// A model's label for a pair, or UNRESOLVED when it could not be parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Entailment,
    Neutral,
    Contradiction,
    Unresolved,
}

impl Verdict {
    pub fn label(self) -> Option<EntailmentLabel> {
        Vote::from(self).label()
    }
}

impl From<Verdict> for Vote {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Entailment => Vote::Entailment,
            Verdict::Neutral => Vote::Neutral,
            Verdict::Contradiction => Vote::Contradiction,
            Verdict::Unresolved => Vote::Unparsable,
        }
    }
}

impl From<Option<EntailmentLabel>> for Verdict {
    fn from(l: Option<EntailmentLabel>) -> Self {
        match l {
            Some(EntailmentLabel::Entailment) => Verdict::Entailment,
            Some(EntailmentLabel::Neutral) => Verdict::Neutral,
            Some(EntailmentLabel::Contradiction) => Verdict::Contradiction,
            None => Verdict::Unresolved,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnnotation {
    pub pair_id: String,
    pub label_pc: Option<Vote>,
    pub label_cp: Option<Vote>,
    #[serde(rename = "final")]
    pub final_label: Verdict,
    pub flagged: bool,
    pub completions: Vec<Completion>,
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Texts of one pair as presented to a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairTexts<'a> {
    pub pair_id: &'a str,
    pub post_text: &'a str,
    pub claim_text: &'a str,
}

fn annotate_order(
    texts: &PairTexts<'_>,
    style: PromptStyle,
    order: PresentationOrder,
    provider: &dyn ChatProvider,
    templates: &TemplateSet,
    log: &mut Vec<Completion>,
) -> Result<Vote, AnnotateError> {
    let prompt = templates.render_annotation(style, order, texts.post_text, texts.claim_text)?;
    // One re-ask on an unparsable answer.
    for _ in 0..2 {
        let c = provider.complete(&prompt)?;
        let parsed = parse_entailment(&c.text).ok();
        log.push(c);
        if let Some(l) = parsed {
            return Ok(l.into());
        }
    }
    Ok(Vote::Unparsable)
}

/// Labels a pair with a model in the requested orders and combines them.
/// With both orders the bidirectional rule applies; with one order that
/// order's label is final. Any order left unparsable after the re-ask makes
/// the pair UNRESOLVED and flagged.
pub fn annotate_pair_with_model(
    texts: &PairTexts<'_>,
    style: PromptStyle,
    orders: &[PresentationOrder],
    provider: &dyn ChatProvider,
    templates: &TemplateSet,
) -> Result<ModelAnnotation, AnnotateError> {
    let mut completions = Vec::new();
    let mut label_pc = None;
    let mut label_cp = None;
    for &order in orders {
        let v = annotate_order(texts, style, order, provider, templates, &mut completions)?;
        match order {
            PresentationOrder::PostFirst => label_pc = Some(v),
            PresentationOrder::ClaimFirst => label_cp = Some(v),
        }
    }
    let labels: Vec<Option<EntailmentLabel>> =
        [label_pc, label_cp].iter().flatten().map(|v| v.label()).collect();
    let final_label = match labels.as_slice() {
        [Some(a), Some(b)] => Verdict::from(Some(aggregate_bidirectional(*a, *b))),
        [Some(a)] => Verdict::from(Some(*a)),
        _ => Verdict::Unresolved,
    };
    Ok(ModelAnnotation {
        pair_id: texts.pair_id.to_string(),
        label_pc,
        label_cp,
        final_label,
        flagged: final_label == Verdict::Unresolved,
        completions,
    })
}

/// Annotates many pairs, in parallel when enabled; output order matches input.
pub fn annotate_pairs(
    pairs: &[PairTexts<'_>],
    style: PromptStyle,
    orders: &[PresentationOrder],
    provider: &dyn ChatProvider,
    templates: &TemplateSet,
) -> Result<Vec<ModelAnnotation>, AnnotateError> {
    par::try_map(pairs, |p| annotate_pair_with_model(p, style, orders, provider, templates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatProviderSpec, MockChat, ScriptEntry};
    use crate::prompts::render_annotation_prompt;
    use proptest::prelude::*;
    use EntailmentLabel::*;

    fn votes(s: &str) -> Vec<Vote> {
        s.chars()
            .map(|c| match c {
                'E' => Vote::Entailment,
                'N' => Vote::Neutral,
                'C' => Vote::Contradiction,
                _ => Vote::Unparsable,
            })
            .collect()
    }

    fn judgments(pair: &str, pc: &str, cp: &str) -> Vec<DirectionalJudgment> {
        let mk = |order, vs: &str| {
            votes(vs).into_iter().enumerate().map(move |(i, label)| DirectionalJudgment {
                pair_id: pair.to_string(),
                order,
                rater_id: format!("r{i}"),
                label,
            })
        };
        mk(PresentationOrder::PostFirst, pc).chain(mk(PresentationOrder::ClaimFirst, cp)).collect()
    }

    #[test]
    fn tally_examples() {
        assert_eq!(tally(&votes("EEENC")).unwrap().top, vec![Entailment]);
        assert_eq!(tally(&votes("EENNC")).unwrap().top, vec![Entailment, Neutral]);
        assert_eq!(tally(&votes("CCCCC")).unwrap().top, vec![Contradiction]);
        let t = tally(&votes("EN?")).unwrap();
        assert_eq!(t.total(), 2);
        assert!(tally(&votes("??")).unwrap().top.is_empty());
        assert!(matches!(tally(&[]), Err(AdjudicationError::NoVotes)));
    }

    #[test]
    fn resolve_without_tie_ignores_rng() {
        let t = tally(&votes("EEENC")).unwrap();
        for s in 0..20 {
            assert_eq!(resolve(&t, &mut ChaCha8Rng::seed_from_u64(s)), Entailment);
        }
    }

    #[test]
    fn resolve_tie_deterministic_per_seed() {
        let t = tally(&votes("EENNC")).unwrap();
        let a = resolve(&t, &mut ChaCha8Rng::seed_from_u64(7));
        for _ in 0..10 {
            assert_eq!(resolve(&t, &mut ChaCha8Rng::seed_from_u64(7)), a);
        }
    }

    #[test]
    fn resolve_tie_is_uniform() {
        let t = tally(&votes("EENNC")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let e = (0..n).filter(|_| resolve(&t, &mut rng) == Entailment).count();
        let freq = e as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "freq {freq}");
    }

    #[test]
    fn bidirectional_truth_table() {
        let expected = |a, b| {
            if a == Entailment || b == Entailment {
                Entailment
            } else if a == Contradiction && b == Contradiction {
                Contradiction
            } else {
                Neutral
            }
        };
        for a in EntailmentLabel::ALL {
            for b in EntailmentLabel::ALL {
                assert_eq!(aggregate_bidirectional(a, b), expected(a, b));
                assert_eq!(aggregate_bidirectional(a, b), aggregate_bidirectional(b, a));
            }
        }
        assert_eq!(aggregate_bidirectional(Entailment, Neutral), Entailment);
        assert_eq!(aggregate_bidirectional(Contradiction, Contradiction), Contradiction);
        assert_eq!(aggregate_bidirectional(Contradiction, Neutral), Neutral);
        assert_eq!(aggregate_bidirectional(Neutral, Neutral), Neutral);
        assert_eq!(aggregate_bidirectional(Contradiction, Entailment), Entailment);
    }

    #[test]
    fn no_ties_means_identical_realizations() {
        let mut v = judgments("p1", "EEENC", "NNNEC");
        v.extend(judgments("p2", "CCCNN", "CCCCE"));
        let r = realize_labels(&v, 50, 9).unwrap();
        assert_eq!(r.draws.len(), 50);
        assert!(r.draws.iter().all(|d| d.labels == r.draws[0].labels));
        assert_eq!(r.label(0, "p1"), Some(Entailment));
        assert_eq!(r.label(0, "p2"), Some(Contradiction));
        assert_eq!(realize_labels(&v, 1, 0).unwrap().draws.len(), 1);
    }

    #[test]
    fn single_tie_mixture() {
        // post-first tie {E, N}; claim-first majority N → final E or N, half each.
        let v = judgments("p", "EENNC", "NNNCE");
        let n = 1000;
        let r = realize_labels(&v, n, 0).unwrap();
        let e = r.draws.iter().filter(|d| d.labels[0] == Entailment).count();
        assert!(r.draws.iter().all(|d| matches!(d.labels[0], Entailment | Neutral)));
        let sigma = (0.25 / n as f64).sqrt();
        assert!((e as f64 / n as f64 - 0.5).abs() <= 3.0 * sigma);
        assert_eq!(r, realize_labels(&v, n, 0).unwrap());
    }

    #[test]
    fn missing_order_and_duplicates() {
        let mut v = judgments("p", "EEE", "");
        assert!(matches!(realize_labels(&v, 1, 0), Err(AdjudicationError::MissingOrder { .. })));
        v = judgments("p", "E", "??");
        assert!(matches!(realize_labels(&v, 1, 0), Err(AdjudicationError::MissingOrder { .. })));
        // down to one valid vote per order is fine
        v = judgments("p", "E", "?N");
        assert!(realize_labels(&v, 1, 0).is_ok());
        let mut d = judgments("p", "E", "N");
        d.push(d[0].clone());
        assert!(matches!(realize_labels(&d, 1, 0), Err(AdjudicationError::DuplicateJudgment { .. })));
        assert!(matches!(realize_labels(&judgments("p", "E", "N"), 0, 0), Err(AdjudicationError::NoDraws)));
    }

    fn mock_for(pairs: &[(&str, &str, &str, &str)], style: PromptStyle) -> MockChat {
        // (post, claim, post-first answer, claim-first answer); answers split by '|' become a sequence
        let mut script = Vec::new();
        for (post, claim, pc, cp) in pairs {
            for (order, ans) in [(PresentationOrder::PostFirst, pc), (PresentationOrder::ClaimFirst, cp)] {
                let p = render_annotation_prompt(style, order, post, claim).unwrap();
                for a in ans.split('|') {
                    script.push(ScriptEntry { prompt_sha256: p.sha256(), response_text: a.into(), model: None });
                }
            }
        }
        MockChat::new("mock", ChatProviderSpec::mock("m", "unused"), script)
    }

    fn texts<'a>(post: &'a str, claim: &'a str) -> PairTexts<'a> {
        PairTexts { pair_id: "c::p", post_text: post, claim_text: claim }
    }

    #[test]
    fn model_annotation_rule() {
        let style = PromptStyle::ZeroShotCot;
        let m = mock_for(
            &[
                ("t1", "c1", "So the final answer is ENTAILMENT.", "NEUTRAL"),
                ("t2", "c2", "CONTRADICTION", "contradiction"),
                ("t3", "c3", "no idea|still no idea", "ENTAILMENT"),
                ("t4", "c4", "hmm|NEUTRAL", "NEUTRAL"),
            ],
            style,
        );
        let set = TemplateSet::builtin();
        let both = PresentationOrder::BOTH;
        let a = annotate_pair_with_model(&texts("t1", "c1"), style, &both, &m, set).unwrap();
        assert_eq!(a.final_label, Verdict::Entailment);
        assert_eq!(a.completions.len(), 2);
        let b = annotate_pair_with_model(&texts("t2", "c2"), style, &both, &m, set).unwrap();
        assert_eq!(b.final_label, Verdict::Contradiction);
        let c = annotate_pair_with_model(&texts("t3", "c3"), style, &both, &m, set).unwrap();
        assert_eq!(c.final_label, Verdict::Unresolved);
        assert!(c.flagged);
        assert_eq!(c.label_pc, Some(Vote::Unparsable));
        assert_eq!(c.completions.len(), 3);
        let d = annotate_pair_with_model(&texts("t4", "c4"), style, &both, &m, set).unwrap();
        assert_eq!(d.final_label, Verdict::Neutral);
        assert!(!d.flagged);
        let single = annotate_pair_with_model(&texts("t1", "c1"), style, &[PresentationOrder::ClaimFirst], &m, set)
            .unwrap();
        assert_eq!(single.final_label, Verdict::Neutral);
        assert_eq!(single.label_pc, None);
    }

    #[test]
    fn script_miss_propagates() {
        let m = mock_for(&[], PromptStyle::ZeroShot);
        let r = annotate_pair_with_model(&texts("x", "y"), PromptStyle::ZeroShot, &PresentationOrder::BOTH, &m, TemplateSet::builtin());
        assert!(matches!(r, Err(AnnotateError::Gateway(GatewayError::ScriptMiss { .. }))));
    }

    fn five_votes() -> impl Strategy<Value = Vec<Vote>> {
        proptest::collection::vec(
            prop_oneof![Just(Vote::Entailment), Just(Vote::Neutral), Just(Vote::Contradiction)],
            5,
        )
    }

    proptest! {
        #[test]
        fn five_votes_never_three_way_tie(v in five_votes()) {
            let t = tally(&v).unwrap();
            prop_assert!(t.top.len() <= 2);
            prop_assert_eq!(t.total(), 5);
            if t.top.len() == 2 {
                let mut c = t.counts;
                c.sort();
                prop_assert_eq!(c, [1, 2, 2]);
            }
        }

        #[test]
        fn realizations_reproducible(pc in five_votes(), cp in five_votes(), seed in any::<u64>()) {
            let mut j = Vec::new();
            for (order, vs) in [(PresentationOrder::PostFirst, &pc), (PresentationOrder::ClaimFirst, &cp)] {
                for (i, label) in vs.iter().enumerate() {
                    j.push(DirectionalJudgment { pair_id: "p".into(), order, rater_id: format!("r{i}"), label: *label });
                }
            }
            let a = realize_labels(&j, 20, seed).unwrap();
            prop_assert_eq!(&a, &realize_labels(&j, 20, seed).unwrap());
            let tallies = PairTallies::from_judgments(&j).unwrap();
            if tallies.tie_count() == 0 {
                prop_assert!(a.draws.iter().all(|d| d.labels == a.draws[0].labels));
            }
        }
    }
}
