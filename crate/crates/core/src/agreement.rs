//! Pairwise choices from metric scores and human annotations, and
//! Krippendorff's alpha agreement tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cite::Aggregation;
use crate::model::{AdClass, Component, ScoreCard};
use crate::{Scalar, Score};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgreementError {
    #[error("expected disagreement is zero (all ratings identical)")]
    DegenerateData,
    #[error("no unit has two or more ratings")]
    NoPairableUnits,
    #[error("no annotation records for pair {0}")]
    NoRecords(String),
}

/// The ten annotation questions, in presentation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Alignment,
    Persuasiveness,
    Creativity,
    Audience,
    Appeal,
    Benefit,
    Originality,
    Imagination,
    Elaboration,
    Synthesis,
}

impl Criterion {
    pub const ALL: [Criterion; 10] = [
        Criterion::Alignment,
        Criterion::Persuasiveness,
        Criterion::Creativity,
        Criterion::Audience,
        Criterion::Appeal,
        Criterion::Benefit,
        Criterion::Originality,
        Criterion::Imagination,
        Criterion::Elaboration,
        Criterion::Synthesis,
    ];

    /// Question shown to annotators.
    pub fn label(self) -> &'static str {
        match self {
            Criterion::Alignment => "Alignment with action and reason",
            Criterion::Persuasiveness => "Persuasiveness",
            Criterion::Creativity => "Creativity",
            Criterion::Audience => "Targeting of the correct audience",
            Criterion::Appeal => "Targeting correct appeal category",
            Criterion::Benefit => "Effective conversion of features into customer benefits",
            Criterion::Originality => "Originality",
            Criterion::Imagination => "Imagination",
            Criterion::Elaboration => "Elaboration",
            Criterion::Synthesis => "Synthesis",
        }
    }

    pub fn component(self) -> Option<Component> {
        Some(match self {
            Criterion::Audience => Component::Audience,
            Criterion::Appeal => Component::Appeal,
            Criterion::Benefit => Component::Benefit,
            Criterion::Originality => Component::Originality,
            Criterion::Imagination => Component::Imagination,
            Criterion::Elaboration => Component::Elaboration,
            Criterion::Synthesis => Component::Synthesis,
            _ => return None,
        })
    }

    pub fn for_component(c: Component) -> Criterion {
        match c {
            Component::Elaboration => Criterion::Elaboration,
            Component::Synthesis => Criterion::Synthesis,
            Component::Originality => Criterion::Originality,
            Component::Imagination => Criterion::Imagination,
            Component::Audience => Criterion::Audience,
            Component::Benefit => Criterion::Benefit,
            Component::Appeal => Criterion::Appeal,
        }
    }
}

/// A forced choice between the two images of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn flip(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// A derived choice, which may be undecided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Left,
    Right,
    Tie,
}

impl From<Side> for Choice {
    fn from(s: Side) -> Self {
        match s {
            Side::Left => Choice::Left,
            Side::Right => Choice::Right,
        }
    }
}

/// One annotator's answer for one criterion on one pair. `choice` refers to
/// the canonical orientation of the pair, not the shuffled presentation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub pair_id: String,
    pub annotator_id: String,
    pub criterion: Criterion,
    pub choice: Side,
}

/// Nominal Krippendorff's alpha over units of values, one value per rater.
/// Units with fewer than two values are not pairable and are ignored.
pub fn krippendorff_alpha<T, V>(units: &[Vec<V>]) -> Result<T, AgreementError>
where
    T: Scalar,
    V: Eq + Hash + Clone,
{
    let mut index: HashMap<V, usize> = HashMap::new();
    for v in units.iter().filter(|u| u.len() >= 2).flatten() {
        let next = index.len();
        index.entry(v.clone()).or_insert(next);
    }
    let k = index.len();
    if k == 0 {
        return Err(AgreementError::NoPairableUnits);
    }
    let mut o = vec![vec![T::zero(); k]; k];
    for unit in units.iter().filter(|u| u.len() >= 2) {
        let w = T::one() / T::lit((unit.len() - 1) as f64);
        for (i, a) in unit.iter().enumerate() {
            for (j, b) in unit.iter().enumerate() {
                if i != j {
                    let (c, d) = (index[a], index[b]);
                    o[c][d] = o[c][d] + w;
                }
            }
        }
    }
    let n_c: Vec<T> = o.iter().map(|row| row.iter().fold(T::zero(), |s, &x| s + x)).collect();
    let n = n_c.iter().fold(T::zero(), |s, &x| s + x);
    let mut observed = T::zero();
    let mut expected = T::zero();
    for c in 0..k {
        for d in 0..k {
            if c != d {
                observed = observed + o[c][d];
                expected = expected + n_c[c] * n_c[d];
            }
        }
    }
    if expected == T::zero() {
        return Err(AgreementError::DegenerateData);
    }
    Ok(T::one() - (n - T::one()) * observed / expected)
}

/// Alpha from `(unit_id, rater_id, value)` triples. A rater's later value
/// for the same unit replaces an earlier one.
pub fn alpha_from_ratings<T, U, R, V>(ratings: &[(U, R, V)]) -> Result<T, AgreementError>
where
    T: Scalar,
    U: Ord + Clone,
    R: Ord + Clone,
    V: Eq + Hash + Clone,
{
    let mut grouped: BTreeMap<U, BTreeMap<R, V>> = BTreeMap::new();
    for (u, r, v) in ratings {
        grouped.entry(u.clone()).or_default().insert(r.clone(), v.clone());
    }
    let units: Vec<Vec<V>> = grouped.into_values().map(|m| m.into_values().collect()).collect();
    krippendorff_alpha(&units)
}

pub const DEFAULT_TIE_EPS: Score = 1e-9;

pub fn metric_choice(score_left: Score, score_right: Score, tie_eps: Score) -> Choice {
    let d = score_left - score_right;
    if d > tie_eps {
        Choice::Left
    } else if d < -tie_eps {
        Choice::Right
    } else {
        Choice::Tie
    }
}

fn majority<'a>(sides: impl Iterator<Item = &'a Side>) -> Option<Choice> {
    let (mut l, mut r) = (0usize, 0usize);
    for s in sides {
        match s {
            Side::Left => l += 1,
            Side::Right => r += 1,
        }
    }
    match (l + r, l.cmp(&r)) {
        (0, _) => None,
        (_, std::cmp::Ordering::Greater) => Some(Choice::Left),
        (_, std::cmp::Ordering::Less) => Some(Choice::Right),
        _ => Some(Choice::Tie),
    }
}

/// Majority vote over every record whose criterion is in `criteria`.
/// `records` should already be restricted to one pair.
pub fn human_choice(records: &[AnnotationRecord], criteria: &[Criterion]) -> Result<Choice, AgreementError> {
    majority(records.iter().filter(|r| criteria.contains(&r.criterion)).map(|r| &r.choice))
        .ok_or_else(|| AgreementError::NoRecords(records.first().map(|r| r.pair_id.clone()).unwrap_or_default()))
}

/// How metric or human ties enter the alpha computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieMode {
    /// A unit with any tie is left out.
    #[default]
    Drop,
    /// Tie is a third nominal category.
    Category,
}

/// Column grouping of the agreement tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Commercial,
    #[serde(rename = "PSA")]
    Psa,
    All,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Commercial, Group::Psa, Group::All];

    pub fn label(self) -> &'static str {
        match self {
            Group::Commercial => "Commercial",
            Group::Psa => "PSA",
            Group::All => "All",
        }
    }

    pub fn contains(self, class: AdClass) -> bool {
        match self {
            Group::Commercial => class == AdClass::Commercial,
            Group::Psa => class == AdClass::Psa,
            Group::All => true,
        }
    }
}

/// Alpha between two raters over the pairs in `pair_classes` that belong to
/// `group`. `None` when no unit survives or the data is degenerate.
pub fn two_rater_alpha(
    pair_classes: &BTreeMap<String, AdClass>,
    group: Group,
    a: &BTreeMap<String, Choice>,
    b: &BTreeMap<String, Choice>,
    ties: TieMode,
) -> Option<Score> {
    let units: Vec<Vec<Choice>> = pair_classes
        .iter()
        .filter(|(_, &class)| group.contains(class))
        .filter_map(|(id, _)| Some(vec![*a.get(id)?, *b.get(id)?]))
        .filter(|u| ties == TieMode::Category || !u.contains(&Choice::Tie))
        .collect();
    krippendorff_alpha(&units).ok()
}

/// Criterion set behind one human column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HumanView {
    pub criteria: Vec<Criterion>,
}

impl HumanView {
    pub fn single(c: Criterion) -> Self {
        Self { criteria: vec![c] }
    }

    pub fn all_components() -> Self {
        Self {
            criteria: Component::ALL.iter().map(|&c| Criterion::for_component(c)).collect(),
        }
    }
}

/// Annotation records grouped per pair and per annotator.
#[derive(Debug, Clone, Default)]
pub struct Annotations {
    by_pair: BTreeMap<String, BTreeMap<String, Vec<AnnotationRecord>>>,
}

impl Annotations {
    pub fn new(records: impl IntoIterator<Item = AnnotationRecord>) -> Self {
        let mut by_pair: BTreeMap<String, BTreeMap<String, Vec<AnnotationRecord>>> = BTreeMap::new();
        for r in records {
            by_pair
                .entry(r.pair_id.clone())
                .or_default()
                .entry(r.annotator_id.clone())
                .or_default()
                .push(r);
        }
        Self { by_pair }
    }

    pub fn pair_ids(&self) -> impl Iterator<Item = &String> {
        self.by_pair.keys()
    }

    /// Majority over all annotators per pair; pairs without records for the
    /// view are absent.
    pub fn majority(&self, view: &HumanView) -> BTreeMap<String, Choice> {
        self.by_pair
            .iter()
            .filter_map(|(pid, per)| {
                let records: Vec<AnnotationRecord> = per.values().flatten().cloned().collect();
                human_choice(&records, &view.criteria).ok().map(|c| (pid.clone(), c))
            })
            .collect()
    }

    /// Each annotator's own majority, for pairs with exactly two annotators,
    /// as two rater maps in annotator-id order.
    pub fn two_annotators(&self, view: &HumanView) -> (BTreeMap<String, Choice>, BTreeMap<String, Choice>) {
        let mut h1 = BTreeMap::new();
        let mut h2 = BTreeMap::new();
        for (pid, per) in &self.by_pair {
            if per.len() != 2 {
                continue;
            }
            let mut it = per.values();
            let (a, b) = (it.next().expect("two"), it.next().expect("two"));
            if let (Ok(ca), Ok(cb)) = (human_choice(a, &view.criteria), human_choice(b, &view.criteria)) {
                h1.insert(pid.clone(), ca);
                h2.insert(pid.clone(), cb);
            }
        }
        (h1, h2)
    }
}

/// Per-image scores pooled over the image's statements.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub cite: Option<Score>,
    pub c_obj: Option<Score>,
    pub pa: Option<Score>,
    pub pc: Option<Score>,
    pub components: BTreeMap<Component, Score>,
}

impl ImageScores {
    pub fn pool(cards: &[&ScoreCard], agg: Aggregation) -> Self {
        let collect = |f: &dyn Fn(&ScoreCard) -> Option<Score>| -> Option<Score> {
            let v: Vec<Score> = cards.iter().filter_map(|c| f(c)).collect();
            agg.pool(&v)
        };
        let components = Component::ALL
            .iter()
            .filter_map(|&comp| {
                collect(&|c: &ScoreCard| c.components.as_ref()?.get(&comp).map(|&v| Score::from(v))).map(|v| (comp, v))
            })
            .collect();
        Self {
            cite: collect(&|c| Some(c.cite)),
            c_obj: collect(&|c| c.c_obj),
            pa: collect(&|c| c.pa),
            pc: collect(&|c| c.pc),
            components,
        }
    }

    /// Mean of the available component scores.
    pub fn component_mean(&self) -> Option<Score> {
        if self.components.is_empty() {
            return None;
        }
        Some(self.components.values().sum::<Score>() / self.components.len() as Score)
    }
}

/// Pools score cards per record id.
pub fn pool_by_record(cards: &[ScoreCard], agg: Aggregation) -> BTreeMap<String, ImageScores> {
    let mut grouped: BTreeMap<&str, Vec<&ScoreCard>> = BTreeMap::new();
    for c in cards {
        grouped.entry(c.record_id.as_str()).or_default().push(c);
    }
    grouped
        .into_iter()
        .map(|(id, cs)| (id.to_string(), ImageScores::pool(&cs, agg)))
        .collect()
}

/// A pair of scored images in canonical orientation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub pair_id: String,
    pub left_record: String,
    pub right_record: String,
}

/// Metric choices per pair for one scalar extracted from [`ImageScores`].
pub fn metric_choices(
    pairs: &[PairSpec],
    scores: &BTreeMap<String, ImageScores>,
    tie_eps: Score,
    f: impl Fn(&ImageScores) -> Option<Score>,
) -> BTreeMap<String, Choice> {
    pairs
        .iter()
        .filter_map(|p| {
            let l = f(scores.get(&p.left_record)?)?;
            let r = f(scores.get(&p.right_record)?)?;
            Some((p.pair_id.clone(), metric_choice(l, r, tie_eps)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub label: String,
    /// One cell per table column; `None` marks a cell without usable data.
    pub cells: Vec<Option<Score>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<AgreementRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgreementConfig {
    pub tie_eps: Score,
    pub ties: TieMode,
}

impl Default for AgreementConfig {
    fn default() -> Self {
        Self {
            tie_eps: DEFAULT_TIE_EPS,
            ties: TieMode::Drop,
        }
    }
}

/// Everything needed to build the agreement tables.
pub struct AgreementInputs<'a> {
    pub pairs: &'a [PairSpec],
    /// Class of each pair, normally taken from its left record.
    pub pair_classes: BTreeMap<String, AdClass>,
    pub scores: &'a BTreeMap<String, ImageScores>,
    pub annotations: &'a Annotations,
    pub config: AgreementConfig,
}

impl AgreementInputs<'_> {
    fn grouped_row(&self, label: &str, a: &BTreeMap<String, Choice>, b: &BTreeMap<String, Choice>) -> AgreementRow {
        AgreementRow {
            label: label.to_string(),
            cells: Group::ALL
                .iter()
                .map(|&g| two_rater_alpha(&self.pair_classes, g, a, b, self.config.ties))
                .collect(),
        }
    }

    fn metric(&self, f: impl Fn(&ImageScores) -> Option<Score>) -> BTreeMap<String, Choice> {
        metric_choices(self.pairs, self.scores, self.config.tie_eps, f)
    }

    fn grouped_table(&self, name: &str, view: HumanView, metrics: &[(&str, BTreeMap<String, Choice>)]) -> AgreementTable {
        let human = self.annotations.majority(&view);
        let mut rows: Vec<AgreementRow> = metrics
            .iter()
            .map(|(label, m)| self.grouped_row(&format!("H, {label}"), &human, m))
            .collect();
        let (h1, h2) = self.annotations.two_annotators(&view);
        rows.push(self.grouped_row("H1, H2", &h1, &h2));
        AgreementTable {
            name: name.to_string(),
            columns: Group::ALL.iter().map(|g| g.label().to_string()).collect(),
            rows,
        }
    }

    pub fn alignment_table(&self) -> AgreementTable {
        let cite = self.metric(|s| s.cite);
        self.grouped_table("alignment", HumanView::single(Criterion::Alignment), &[("CITE", cite)])
    }

    pub fn creativity_table(&self) -> AgreementTable {
        let c = self.metric(|s| s.c_obj);
        self.grouped_table("creativity", HumanView::single(Criterion::Creativity), &[("C_obj", c)])
    }

    pub fn persuasiveness_table(&self) -> AgreementTable {
        let pc = self.metric(|s| s.pc);
        let pa = self.metric(|s| s.pa);
        self.grouped_table(
            "persuasiveness",
            HumanView::single(Criterion::Persuasiveness),
            &[("PC", pc), ("PA", pa)],
        )
    }

    /// Per-component agreement over all pairs, plus an `All` column where the
    /// human side is the majority over the seven component questions and
    /// the metric side compares mean component scores.
    pub fn components_table(&self) -> AgreementTable {
        let mut columns: Vec<String> = Component::ALL.iter().map(|c| c.abbrev().to_string()).collect();
        columns.push("All".into());
        let mut metric_row = Vec::new();
        let mut human_row = Vec::new();
        let mut views: Vec<(HumanView, BTreeMap<String, Choice>)> = Component::ALL
            .iter()
            .map(|&comp| {
                (
                    HumanView::single(Criterion::for_component(comp)),
                    self.metric(|s| s.components.get(&comp).copied()),
                )
            })
            .collect();
        views.push((HumanView::all_components(), self.metric(ImageScores::component_mean)));
        for (view, metric) in views {
            let human = self.annotations.majority(&view);
            metric_row.push(two_rater_alpha(&self.pair_classes, Group::All, &human, &metric, self.config.ties));
            let (h1, h2) = self.annotations.two_annotators(&view);
            human_row.push(two_rater_alpha(&self.pair_classes, Group::All, &h1, &h2, self.config.ties));
        }
        AgreementTable {
            name: "components".into(),
            columns,
            rows: vec![
                AgreementRow {
                    label: "H, PA*".into(),
                    cells: metric_row,
                },
                AgreementRow {
                    label: "H1, H2".into(),
                    cells: human_row,
                },
            ],
        }
    }

    pub fn all_tables(&self) -> Vec<AgreementTable> {
        vec![
            self.alignment_table(),
            self.creativity_table(),
            self.persuasiveness_table(),
            self.components_table(),
        ]
    }
}

/// Pair class from the left record, or `Unclassified` when the two records
/// disagree or are unknown.
pub fn pair_classes(pairs: &[PairSpec], classes: &BTreeMap<String, AdClass>) -> BTreeMap<String, AdClass> {
    pairs
        .iter()
        .map(|p| {
            let l = classes.get(&p.left_record).copied();
            let r = classes.get(&p.right_record).copied();
            let class = match (l, r) {
                (Some(a), Some(b)) if a == b => a,
                _ => AdClass::Unclassified,
            };
            (p.pair_id.clone(), class)
        })
        .collect()
}

/// Distinct annotators seen per pair.
pub fn annotators_per_pair(records: &[AnnotationRecord]) -> BTreeMap<String, BTreeSet<String>> {
    let mut m: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in records {
        m.entry(r.pair_id.clone()).or_default().insert(r.annotator_id.clone());
    }
    m
}
