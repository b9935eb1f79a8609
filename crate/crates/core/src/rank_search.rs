//! Per-layer LoRA rank search by repeated doubling.
//!
//! Each round doubles every rank (capped at its threshold), trains the adapters for a
//! fixed number of epochs and scores the result. The search stops once the score gets
//! worse or every rank is saturated, and reports the ranks at the best score. Results
//! over several probe concepts are combined by elementwise maximum.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::RankSpec;

pub const DEFAULT_EPOCHS_PER_ROUND: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs_per_round: usize,
    pub thresholds: BTreeMap<String, usize>,
}

impl SearchConfig {
    pub fn new(epochs_per_round: usize, thresholds: BTreeMap<String, usize>) -> Result<Self> {
        let cfg = Self { epochs_per_round, thresholds };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round == 0 {
            return Err(Error::Config("epochs_per_round must be at least 1".into()));
        }
        if self.thresholds.is_empty() {
            return Err(Error::Config("rank search needs at least one layer threshold".into()));
        }
        if let Some((id, _)) = self.thresholds.iter().find(|(_, &t)| t == 0) {
            return Err(Error::Config(format!("threshold for {id} must be positive")));
        }
        Ok(())
    }

    /// Upper bound on rounds per concept: one plus the doublings needed to reach the
    /// largest threshold.
    pub fn max_rounds(&self) -> usize {
        let widest = self.thresholds.values().copied().max().unwrap_or(1);
        1 + ceil_log2(widest)
    }
}

fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Doubles every rank, capping at its threshold.
pub fn rank_schedule_step(
    ranks: &BTreeMap<String, usize>,
    thresholds: &BTreeMap<String, usize>,
) -> Result<BTreeMap<String, usize>> {
    if ranks.len() != thresholds.len() || ranks.keys().any(|k| !thresholds.contains_key(k)) {
        let extra: Vec<_> = ranks.keys().filter(|k| !thresholds.contains_key(*k)).collect();
        let missing: Vec<_> = thresholds.keys().filter(|k| !ranks.contains_key(*k)).collect();
        return Err(Error::RankKeys(format!("without threshold: {extra:?}; without rank: {missing:?}")));
    }
    Ok(ranks
        .iter()
        .map(|(id, &r)| (id.clone(), (2 * r).min(thresholds[id])))
        .collect())
}

/// One training-and-scoring round of a concept search. Implementations keep their
/// adapters between calls; `ranks` never decreases from one call to the next.
pub trait RankTrial {
    /// Trains with `ranks` for `epochs` epochs and returns the score (lower is better).
    fn run_round(&mut self, round: usize, ranks: &BTreeMap<String, usize>, epochs: usize) -> Result<f64>;
}

impl<F> RankTrial for F
where
    F: FnMut(usize, &BTreeMap<String, usize>, usize) -> Result<f64>,
{
    fn run_round(&mut self, round: usize, ranks: &BTreeMap<String, usize>, epochs: usize) -> Result<f64> {
        self(round, ranks, epochs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub concept: String,
    pub round: usize,
    pub ranks: BTreeMap<String, usize>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSearch {
    pub concept: String,
    pub ranks: BTreeMap<String, usize>,
    pub best_score: f64,
    pub trace: Vec<TraceRecord>,
}

fn describe(ranks: &BTreeMap<String, usize>) -> String {
    ranks.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
}

/// Runs the doubling search for one concept.
pub fn search_concept_rank(concept: &str, cfg: &SearchConfig, trial: &mut dyn RankTrial) -> Result<ConceptSearch> {
    cfg.validate()?;
    let mut ranks: BTreeMap<String, usize> = cfg.thresholds.keys().map(|k| (k.clone(), 1)).collect();
    let mut trace = Vec::new();
    let mut best: Option<(f64, BTreeMap<String, usize>)> = None;
    let mut previous = f64::INFINITY;
    for round in 0.. {
        ranks = rank_schedule_step(&ranks, &cfg.thresholds)?;
        let score = trial
            .run_round(round, &ranks, cfg.epochs_per_round)
            .map_err(|e| Error::Scorer { round, ranks: describe(&ranks), message: e.to_string() })?;
        if !score.is_finite() {
            return Err(Error::Scorer { round, ranks: describe(&ranks), message: format!("score is {score}") });
        }
        trace.push(TraceRecord { concept: concept.to_string(), round, ranks: ranks.clone(), score });
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, ranks.clone()));
        }
        let unsaturated = ranks.iter().any(|(id, &r)| r < cfg.thresholds[id]);
        if !(unsaturated && score <= previous) {
            break;
        }
        previous = score;
    }
    let (best_score, ranks) = best.expect("at least one round runs");
    Ok(ConceptSearch { concept: concept.to_string(), ranks, best_score, trace })
}

/// Elementwise maximum over per-concept rank maps.
pub fn elementwise_max<'a>(results: impl IntoIterator<Item = &'a BTreeMap<String, usize>>) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = BTreeMap::new();
    for m in results {
        for (k, &v) in m {
            let e = out.entry(k.clone()).or_insert(v);
            *e = (*e).max(v);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSearch {
    pub spec: RankSpec,
    pub per_concept: Vec<ConceptSearch>,
}

/// Searches every probe concept and combines the results by elementwise maximum.
/// `make_trial` builds a fresh trial for each concept id.
pub fn search_global_rank<'t, F>(concepts: &[String], cfg: &SearchConfig, mut make_trial: F) -> Result<GlobalSearch>
where
    F: FnMut(&str) -> Result<Box<dyn RankTrial + 't>>,
{
    if concepts.is_empty() {
        return Err(Error::Config("rank search needs at least one probe concept".into()));
    }
    let mut per_concept = Vec::with_capacity(concepts.len());
    for c in concepts {
        let wrap = |e: Error| Error::Concept { concept: c.clone(), source: Box::new(e) };
        let mut trial = make_trial(c).map_err(wrap)?;
        per_concept.push(search_concept_rank(c, cfg, trial.as_mut()).map_err(wrap)?);
    }
    let ranks = elementwise_max(per_concept.iter().map(|s| &s.ranks));
    let spec = RankSpec::new(ranks, cfg.thresholds.clone())?;
    Ok(GlobalSearch { spec, per_concept })
}

/// Appends trace records as JSON lines.
pub fn append_trace(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taus(v: &[usize]) -> BTreeMap<String, usize> {
        v.iter().enumerate().map(|(i, &t)| (format!("l{i}"), t)).collect()
    }

    fn vals(m: &BTreeMap<String, usize>) -> Vec<usize> {
        m.values().copied().collect()
    }

    #[test]
    fn schedule_doubles_and_caps() {
        let t = taus(&[1, 4, 16, 32]);
        let r = taus(&[1, 1, 1, 1]);
        assert_eq!(vals(&rank_schedule_step(&r, &t).unwrap()), [1, 2, 2, 2]);
        assert_eq!(vals(&rank_schedule_step(&taus(&[1, 4, 8, 8]), &t).unwrap()), [1, 4, 16, 16]);
        assert_eq!(vals(&rank_schedule_step(&t, &t).unwrap()), [1, 4, 16, 32]);
    }

    #[test]
    fn schedule_rejects_key_mismatch() {
        let t = taus(&[1, 4]);
        let r = taus(&[1]);
        assert!(matches!(rank_schedule_step(&r, &t), Err(Error::RankKeys(_))));
    }

    #[test]
    fn max_rounds_bound() {
        let cfg = SearchConfig::new(1, taus(&[1, 4, 16, 32])).unwrap();
        assert_eq!(cfg.max_rounds(), 6);
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(5), 3);
    }

    #[test]
    fn all_unit_thresholds_take_one_round() {
        let cfg = SearchConfig::new(1, taus(&[1, 1, 1])).unwrap();
        let mut calls = 0;
        let mut trial = |_: usize, _: &BTreeMap<String, usize>, _: usize| {
            calls += 1;
            Ok(1.0)
        };
        let out = search_concept_rank("c", &cfg, &mut trial).unwrap();
        assert_eq!(vals(&out.ranks), [1, 1, 1]);
        assert_eq!(out.trace.len(), 1);
        assert_eq!(calls, 1);
    }

    #[test]
    fn ties_continue_the_search() {
        let cfg = SearchConfig::new(1, taus(&[1, 4, 16, 32])).unwrap();
        let scores = [2.0, 2.0, 3.0];
        let mut trial = |round: usize, _: &BTreeMap<String, usize>, _: usize| Ok(scores[round]);
        let out = search_concept_rank("c", &cfg, &mut trial).unwrap();
        assert_eq!(out.trace.len(), 3);
        assert_eq!(vals(&out.ranks), [1, 2, 2, 2]);
    }

    #[test]
    fn scorer_failure_carries_round_context() {
        let cfg = SearchConfig::new(1, taus(&[1, 4])).unwrap();
        let mut trial = |round: usize, _: &BTreeMap<String, usize>, _: usize| {
            if round == 1 {
                Err(Error::Numerical("boom".into()))
            } else {
                Ok(1.0)
            }
        };
        match search_concept_rank("c", &cfg, &mut trial) {
            Err(Error::Scorer { round, message, .. }) => {
                assert_eq!(round, 1);
                assert!(message.contains("boom"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
