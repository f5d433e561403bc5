use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::cosine_sim;
use crate::toyworld::{Detection, ItemId, Scenario};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScfConfig {
    pub sim_threshold: f64,
    /// Detections below this confidence are treated as background noise.
    pub conf_floor: f64,
}

impl Default for ScfConfig {
    fn default() -> Self {
        ScfConfig {
            sim_threshold: 0.5,
            conf_floor: 0.1,
        }
    }
}

impl ScfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sim_threshold) || !(0.0..=1.0).contains(&self.conf_floor) {
            return Err(Error::contract("SCF thresholds must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Embedding similarity; bitwise-equal vectors score exactly one.
fn similarity(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        1.0
    } else {
        cosine_sim(a, b)
    }
}

/// Semantic coverage of `gt` by `detections`.
///
/// Noise below `conf_floor` is dropped, then (gt, detection) pairs are matched
/// one-to-one greedily by descending similarity. Each matched pair above
/// `sim_threshold` adds `similarity × confidence`; the sum is divided by the
/// number of ground-truth events.
pub fn scf<E: AsRef<[f64]>>(
    detections: &[Detection],
    gt: &[ItemId],
    embed: impl Fn(ItemId) -> E,
    cfg: &ScfConfig,
) -> Result<f64> {
    cfg.validate()?;
    if gt.is_empty() {
        return Err(Error::contract("SCF is undefined without ground-truth events"));
    }
    if let Some(d) = detections.iter().find(|d| !(0.0..=1.0).contains(&d.confidence)) {
        return Err(Error::contract(format!("detection confidence {} outside [0, 1]", d.confidence)));
    }
    let kept: Vec<&Detection> = detections.iter().filter(|d| d.confidence >= cfg.conf_floor).collect();
    let gt_emb: Vec<E> = gt.iter().map(|&g| embed(g)).collect();
    let det_emb: Vec<E> = kept.iter().map(|d| embed(d.label)).collect();
    let mut pairs = Vec::with_capacity(gt.len() * kept.len());
    for (i, ge) in gt_emb.iter().enumerate() {
        for (j, de) in det_emb.iter().enumerate() {
            pairs.push((similarity(ge.as_ref(), de.as_ref()), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut det_used = vec![false; kept.len()];
    let mut total = 0.0;
    for (sim, i, j) in pairs {
        if sim <= cfg.sim_threshold {
            break;
        }
        if gt_used[i] || det_used[j] {
            continue;
        }
        gt_used[i] = true;
        det_used[j] = true;
        total += sim * kept[j].confidence;
    }
    Ok(total / gt.len() as f64)
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn payload_wer(hyp: &[u32], reference: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("WER needs a nonempty reference"));
    }
    Ok(levenshtein(hyp, reference) as f64 / reference.len() as f64)
}

/// Mean per-step cosine between a predicted plan and its target.
pub fn latent_fidelity(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() || pred.iter().zip(target).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Dimension {
            op: "latent_fidelity",
            left: vec![pred.len(), pred.first().map_or(0, Vec::len)],
            right: vec![target.len(), target.first().map_or(0, Vec::len)],
        });
    }
    Ok(pred.iter().zip(target).map(|(a, b)| cosine_sim(a, b)).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

/// Min-max normalisation of one metric across strategies, oriented so that
/// 1 is best. A constant column maps to 0.5 everywhere.
pub fn normalize_column(values: &[f64], orientation: Orientation) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if hi == lo {
                0.5
            } else {
                match orientation {
                    Orientation::HigherBetter => (v - lo) / (hi - lo),
                    Orientation::LowerBetter => (hi - v) / (hi - lo),
                }
            }
        })
        .collect()
}

/// Values keyed by (strategy, scenario, metric) with declared orientations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTable {
    values: BTreeMap<(String, Scenario, String), f64>,
    orientation: BTreeMap<String, Orientation>,
}

impl MetricTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, metric: &str, o: Orientation) {
        self.orientation.insert(metric.to_string(), o);
    }

    pub fn insert(&mut self, strategy: &str, scenario: Scenario, metric: &str, value: f64) -> Result<()> {
        if !self.orientation.contains_key(metric) {
            return Err(Error::contract(format!("metric `{metric}` has no declared orientation")));
        }
        self.values
            .insert((strategy.to_string(), scenario, metric.to_string()), value);
        Ok(())
    }

    pub fn get(&self, strategy: &str, scenario: Scenario, metric: &str) -> Option<f64> {
        self.values
            .get(&(strategy.to_string(), scenario, metric.to_string()))
            .copied()
    }

    pub fn strategies(&self) -> BTreeSet<String> {
        self.values.keys().map(|k| k.0.clone()).collect()
    }

    /// Per strategy, the mean over the scenario's metrics of the min-max
    /// normalised value.
    pub fn normalized_score(&self, scenario: Scenario) -> Result<BTreeMap<String, f64>> {
        let mut by_metric: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
        for ((s, sc, m), v) in &self.values {
            if *sc == scenario {
                by_metric.entry(m.as_str()).or_default().push((s.as_str(), *v));
            }
        }
        if by_metric.is_empty() {
            return Err(Error::contract(format!("scenario {scenario} is absent from the table")));
        }
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (m, col) in by_metric {
            let vals: Vec<f64> = col.iter().map(|c| c.1).collect();
            for ((s, _), n) in col.iter().zip(normalize_column(&vals, self.orientation[m])) {
                let e = sums.entry(s.to_string()).or_default();
                e.0 += n;
                e.1 += 1;
            }
        }
        Ok(sums.into_iter().map(|(s, (t, n))| (s, t / n as f64)).collect())
    }

    /// `strategy,scenario,metric,value,normalized` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,scenario,metric,value,normalized\n");
        let mut norm: BTreeMap<(&str, Scenario, &str), f64> = BTreeMap::new();
        let mut cols: BTreeMap<(Scenario, &str), Vec<(&str, f64)>> = BTreeMap::new();
        for ((s, sc, m), v) in &self.values {
            cols.entry((*sc, m.as_str())).or_default().push((s.as_str(), *v));
        }
        for ((sc, m), col) in &cols {
            let vals: Vec<f64> = col.iter().map(|c| c.1).collect();
            for ((s, _), n) in col.iter().zip(normalize_column(&vals, self.orientation[*m])) {
                norm.insert((s, *sc, m), n);
            }
        }
        for ((s, sc, m), v) in &self.values {
            let n = norm[&(s.as_str(), *sc, m.as_str())];
            out.push_str(&format!("{s},{sc},{m},{v},{n}\n"));
        }
        out
    }
}
