//! Ensemble ranking rules, top-X accuracy and the next-season protocol.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{temp_softmax, ClassifierParams};
use crate::data::{DomainSequence, SeasonDataset};
use crate::distill::TransferSet;
use crate::error::{Result, RkdError};
use crate::rkd::{init_first_season, season_step, EnsembleState, RkdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EnsembleRule {
    #[serde(rename = "averaging")]
    Averaging,
    #[serde(rename = "merge+sort")]
    MergeSort,
}

impl EnsembleRule {
    pub const ALL: [EnsembleRule; 2] = [EnsembleRule::Averaging, EnsembleRule::MergeSort];

    pub fn name(self) -> &'static str {
        match self {
            EnsembleRule::Averaging => "averaging",
            EnsembleRule::MergeSort => "merge+sort",
        }
    }

    pub fn rank(self, member_probs: &[Vec<f64>]) -> RankedList {
        match self {
            EnsembleRule::Averaging => rank_averaging_probs(member_probs),
            EnsembleRule::MergeSort => rank_merge_sort_probs(member_probs),
        }
    }
}

impl fmt::Display for EnsembleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnsembleRule {
    type Err = RkdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "averaging" => Ok(EnsembleRule::Averaging),
            "merge+sort" => Ok(EnsembleRule::MergeSort),
            other => Err(RkdError::invalid(format!(
                "unknown ensemble rule `{other}`"
            ))),
        }
    }
}

/// Classes by descending score, ties by ascending class id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub entries: Vec<(usize, f64)>,
}

impl RankedList {
    fn from_scores(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by(by_score_then_class);
        RankedList { entries }
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn position(&self, class: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.0 == class)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn by_score_then_class(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// T=1 softmax of every member for one input.
pub fn member_probabilities(
    members: &[ClassifierParams],
    features: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if members.is_empty() {
        return Err(RkdError::invalid("ensemble has no members"));
    }
    members
        .iter()
        .map(|m| temp_softmax(&m.logits(features)?, 1.0))
        .collect()
}

/// Mean member probability per class.
pub fn rank_averaging_probs(member_probs: &[Vec<f64>]) -> RankedList {
    let n = member_probs.len() as f64;
    let classes = member_probs.first().map_or(0, Vec::len);
    let mut sums = vec![0.0; classes];
    for p in member_probs {
        sums.iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    RankedList::from_scores(sums.into_iter().map(|s| s / n).enumerate().collect())
}

/// Pools every member's `(class, confidence)` pairs, sorts them by
/// confidence and keeps each class at its first (highest) appearance.
pub fn rank_merge_sort_probs(member_probs: &[Vec<f64>]) -> RankedList {
    let mut pooled: Vec<(usize, f64)> = member_probs
        .iter()
        .flat_map(|p| p.iter().copied().enumerate())
        .collect();
    pooled.sort_by(by_score_then_class);
    let classes = member_probs.first().map_or(0, Vec::len);
    let mut seen = vec![false; classes];
    let entries = pooled
        .into_iter()
        .filter(|&(c, _)| !std::mem::replace(&mut seen[c], true))
        .collect();
    RankedList { entries }
}

pub fn rank_averaging(members: &[ClassifierParams], features: &[f64]) -> Result<RankedList> {
    Ok(rank_averaging_probs(&member_probabilities(
        members, features,
    )?))
}

pub fn rank_merge_sort(members: &[ClassifierParams], features: &[f64]) -> Result<RankedList> {
    Ok(rank_merge_sort_probs(&member_probabilities(
        members, features,
    )?))
}

/// Fraction of `test` whose true class is within the first `min(x, C)` ranks.
pub fn top_x_accuracy(
    members: &[ClassifierParams],
    rule: EnsembleRule,
    test: &SeasonDataset,
    x: usize,
) -> Result<f64> {
    let rows = evaluate_ensemble(members, test, &[rule], &[x], 0)?;
    Ok(rows[0].accuracy())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    /// Season whose ensemble was evaluated (tested on the following season).
    pub season: usize,
    pub rule: EnsembleRule,
    pub x: usize,
    pub hits: usize,
    pub count: usize,
}

impl AccuracyRow {
    pub fn accuracy(&self) -> f64 {
        self.hits as f64 / self.count as f64
    }
}

/// Scores `members` on `test` for every rule and X, tagging rows with `season`.
pub fn evaluate_ensemble(
    members: &[ClassifierParams],
    test: &SeasonDataset,
    rules: &[EnsembleRule],
    xs: &[usize],
    season: usize,
) -> Result<Vec<AccuracyRow>> {
    if test.is_empty() {
        return Err(RkdError::UndefinedMetric(format!(
            "season {} has no test samples",
            test.season_index
        )));
    }
    if xs.contains(&0) {
        return Err(RkdError::invalid("X must be at least 1"));
    }
    let labeled = test.labeled()?;
    let mut hits = vec![vec![0usize; xs.len()]; rules.len()];
    for (features, class) in labeled {
        let probs = member_probabilities(members, features)?;
        for (r, rule) in rules.iter().enumerate() {
            let rank = rule.rank(&probs).position(class).ok_or_else(|| {
                RkdError::invalid(format!("label {class} outside the ensemble's classes"))
            })?;
            for (k, &x) in xs.iter().enumerate() {
                if rank < x {
                    hits[r][k] += 1;
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(rules.len() * xs.len());
    for (r, &rule) in rules.iter().enumerate() {
        for (k, &x) in xs.iter().enumerate() {
            rows.push(AccuracyRow {
                season,
                rule,
                x,
                hits: hits[r][k],
                count: test.len(),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
}

pub const ACCURACY_HEADER: &str = "season,rule,X,accuracy,count";

impl AccuracyTable {
    pub fn new(mut rows: Vec<AccuracyRow>) -> Self {
        rows.sort_by_key(|r| (r.season, r.rule, r.x));
        AccuracyTable { rows }
    }

    pub fn get(&self, season: usize, rule: EnsembleRule, x: usize) -> Option<&AccuracyRow> {
        self.rows
            .iter()
            .find(|r| r.season == season && r.rule == rule && r.x == x)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(ACCURACY_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.season,
                r.rule,
                r.x,
                r.accuracy(),
                r.count
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| RkdError::Parse {
                row: 1,
                message: e.to_string(),
            })?
            .iter()
            .map(str::to_string)
            .collect();
        if header.join(",") != ACCURACY_HEADER {
            return Err(RkdError::Parse {
                row: 1,
                message: format!("expected header `{ACCURACY_HEADER}`"),
            });
        }
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 2;
            let record = record.map_err(|e| RkdError::Parse {
                row,
                message: e.to_string(),
            })?;
            let bad = |what: &str| RkdError::Parse {
                row,
                message: format!("invalid {what}"),
            };
            let season = record[0].parse().map_err(|_| bad("season"))?;
            let rule = record[1].parse().map_err(|_| bad("rule"))?;
            let x = record[2].parse().map_err(|_| bad("X"))?;
            let accuracy: f64 = record[3].parse().map_err(|_| bad("accuracy"))?;
            let count: usize = record[4].parse().map_err(|_| bad("count"))?;
            let hits = (accuracy * count as f64).round() as usize;
            rows.push(AccuracyRow {
                season,
                rule,
                x,
                hits,
                count,
            });
        }
        Ok(AccuracyTable::new(rows))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| RkdError::io(path, e))
    }
}

/// Runs the recursion over `seq`. After adapting to season `t` the ensemble
/// is scored on season `t + 1`; the last season is only ever a test set.
/// `observe` sees every ensemble right after it is built.
pub fn evaluate_sequence_with(
    seq: &DomainSequence,
    transfer: &TransferSet,
    cfg: &RkdConfig,
    xs: &[usize],
    mut observe: impl FnMut(&EnsembleState),
) -> Result<AccuracyTable> {
    let n = seq.seasons.len();
    if n < 2 {
        return Err(RkdError::invalid(format!(
            "evaluation needs at least 2 seasons, got {n}"
        )));
    }
    let mut rows = Vec::new();
    let mut state = init_first_season(cfg, &seq.seasons[0])?;
    for t in 1..n {
        if t > 1 {
            state = season_step(
                state,
                &seq.seasons[t - 1],
                transfer,
                cfg,
                &mut cfg.tsa_rng(t),
            )?;
        }
        observe(&state);
        rows.extend(evaluate_ensemble(
            &state.members,
            &seq.seasons[t],
            &EnsembleRule::ALL,
            xs,
            t,
        )?);
    }
    Ok(AccuracyTable::new(rows))
}

pub fn evaluate_sequence(
    seq: &DomainSequence,
    transfer: &TransferSet,
    cfg: &RkdConfig,
    xs: &[usize],
) -> Result<AccuracyTable> {
    evaluate_sequence_with(seq, transfer, cfg, xs, |_| {})
}
