//! The sixteen expert-importance criteria and drop selection.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{token_similarity_matrix, CalibrationStats, CountMatrix, LayerStats, OUTLIER_C};
use crate::error::{Error, Result};
use crate::linalg::{cosine, dot, l2_norm, outlier_count, stable_rank};
use crate::model::{Expert, MoEModel};

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Weight,
    Inference,
    Activation,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub enum Criterion {
    EWS,
    RWN,
    WSR,
    EWN,
    EUF,
    ECC,
    EVTC,
    ETS,
    EAS,
    EAE,
    EAO,
    EAN,
    EGS,
    EGE,
    EGO,
    EGN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Min,
    Max,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Min => "min",
            Direction::Max => "max",
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min" => Ok(Direction::Min),
            "max" => Ok(Direction::Max),
            _ => Err(Error::Selection(format!("direction must be `min` or `max`, got `{s}`"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Criterion {
    pub const ALL: [Criterion; 16] = [
        Criterion::EWS,
        Criterion::RWN,
        Criterion::WSR,
        Criterion::EWN,
        Criterion::EUF,
        Criterion::ECC,
        Criterion::EVTC,
        Criterion::ETS,
        Criterion::EAS,
        Criterion::EAE,
        Criterion::EAO,
        Criterion::EAN,
        Criterion::EGS,
        Criterion::EGE,
        Criterion::EGO,
        Criterion::EGN,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::EWS => "EWS",
            Criterion::RWN => "RWN",
            Criterion::WSR => "WSR",
            Criterion::EWN => "EWN",
            Criterion::EUF => "EUF",
            Criterion::ECC => "ECC",
            Criterion::EVTC => "EVTC",
            Criterion::ETS => "ETS",
            Criterion::EAS => "EAS",
            Criterion::EAE => "EAE",
            Criterion::EAO => "EAO",
            Criterion::EAN => "EAN",
            Criterion::EGS => "EGS",
            Criterion::EGE => "EGE",
            Criterion::EGO => "EGO",
            Criterion::EGN => "EGN",
        }
    }

    pub fn family(self) -> Family {
        use Criterion::*;
        match self {
            EWS | RWN | WSR | EWN => Family::Weight,
            EUF | ECC | EVTC | ETS => Family::Inference,
            EAS | EAE | EAO | EAN => Family::Activation,
            EGS | EGE | EGO | EGN => Family::Gradient,
        }
    }

    /// Direction used when none is given.
    pub fn default_direction(self) -> Direction {
        use Criterion::*;
        match self {
            RWN | ETS | EWS | ECC | EAS | EGS => Direction::Max,
            EGE | EAN | WSR | EUF | EVTC | EAE | EAO | EGO | EWN | EGN => Direction::Min,
        }
    }

    pub fn needs_stats(self) -> bool {
        self.family() != Family::Weight
    }

    pub fn needs_gradients(self) -> bool {
        self.family() == Family::Gradient
    }

    /// Pair-based criteria drop one member of an extreme pair.
    pub fn is_pairwise(self) -> bool {
        matches!(self, Criterion::ECC | Criterion::ETS)
    }

    pub fn names() -> Vec<&'static str> {
        Criterion::ALL.iter().map(|c| c.name()).collect()
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownCriterion(s.to_string()))
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for CriterionId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("CriterionId", 3)?;
        st.serialize_field("name", self.criterion.name())?;
        st.serialize_field("family", &self.criterion.family())?;
        st.serialize_field("direction", &self.direction)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for CriterionId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            name: String,
            family: Option<Family>,
            direction: Direction,
        }
        let raw = Raw::deserialize(d)?;
        let criterion: Criterion = raw.name.parse().map_err(serde::de::Error::custom)?;
        if raw.family.is_some_and(|f| f != criterion.family()) {
            return Err(serde::de::Error::custom(format!("{} is not in family {:?}", criterion, raw.family.unwrap())));
        }
        Ok(CriterionId { criterion, direction: raw.direction })
    }
}

/// A criterion together with an explicit direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CriterionId {
    pub criterion: Criterion,
    pub direction: Direction,
}

impl CriterionId {
    pub fn new(criterion: Criterion, direction: Direction) -> Self {
        CriterionId { criterion, direction }
    }

    pub fn with_default(criterion: Criterion) -> Self {
        CriterionId { criterion, direction: criterion.default_direction() }
    }
}

impl fmt::Display for CriterionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.direction, self.criterion)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierOrientation {
    /// μ_j, σ_j per output dimension over routed tokens.
    #[default]
    PerDimension,
    /// μ, σ per token over its output dimensions.
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreOptions {
    pub outlier_orientation: OutlierOrientation,
}

/// Scores of one layer, aligned with its retained experts.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    /// Counting matrix behind pairwise criteria.
    pub pair_matrix: Option<CountMatrix>,
}

impl ScoreVector {
    fn plain(scores: Vec<f64>) -> Self {
        ScoreVector { scores, pair_matrix: None }
    }
}

fn expert_stats<'a>(criterion: Criterion, model: &MoEModel, stats: Option<&'a CalibrationStats>, layer: usize) -> Result<&'a LayerStats> {
    let stats = stats.ok_or(Error::MissingStats { criterion: criterion.name(), missing: "calibration statistics" })?;
    let ls = stats.layer(layer)?;
    if ls.expert_ids != model.layers()[layer].router.expert_ids {
        return Err(Error::MissingStats { criterion: criterion.name(), missing: "statistics for the current set of retained experts" });
    }
    Ok(ls)
}

fn grads(criterion: Criterion, ls: &LayerStats) -> Result<Vec<&Expert>> {
    ls.experts
        .iter()
        .map(|e| e.grad_sum.as_ref().ok_or(Error::MissingStats { criterion: criterion.name(), missing: "accumulated gradients" }))
        .collect()
}

/// Σ_{q≠p} sim(p, q) for a symmetric similarity.
fn row_sums_off_diagonal(n: usize, sim: impl Fn(usize, usize) -> Result<f64>) -> Result<Vec<f64>> {
    let mut m = vec![0.0; n * n];
    for p in 0..n {
        for q in p + 1..n {
            let s = sim(p, q)?;
            m[p * n + q] = s;
            m[q * n + p] = s;
        }
    }
    Ok((0..n).map(|p| (0..n).filter(|&q| q != p).map(|q| m[p * n + q]).sum()).collect())
}

fn log_std_sum(stds: impl Iterator<Item = f64>) -> f64 {
    stds.map(|s| s.max(LOG_FLOOR).ln()).sum()
}

fn population_std(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mu = v.clone().sum::<f64>() / n;
    (v.map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt()
}

/// Gradient "hidden dimension" entropy: for each hidden unit h, the std of the
/// 2d entries of column h of `w_up^g` and row h of `w_down^g`.
pub fn gradient_entropy(g: &Expert) -> f64 {
    let h = g.w_up.cols;
    log_std_sum((0..h).map(|j| {
        let col = (0..g.w_up.rows).map(move |i| g.w_up.get(i, j));
        let row = g.w_down.row(j).iter().copied();
        population_std(col.chain(row))
    }))
}

/// Mean of unit vectors; zero vectors stay zero.
fn unit_mean(samples: &[Vec<f64>], d: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; d];
    if samples.is_empty() {
        return Ok(acc);
    }
    for s in samples {
        let n = l2_norm(s)?;
        if n >= crate::linalg::COSINE_EPS {
            for (a, x) in acc.iter_mut().zip(s) {
                *a += x / n;
            }
        }
    }
    let m = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    Ok(acc)
}

/// Mean cosine over the cross product of two sample sets.
pub fn mean_pairwise_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().or(b.first()).map_or(0, Vec::len);
    Ok(dot(&unit_mean(a, d)?, &unit_mean(b, d)?))
}

pub fn score_layer(model: &MoEModel, stats: Option<&CalibrationStats>, criterion: Criterion, layer: usize, opts: &ScoreOptions) -> Result<ScoreVector> {
    if layer >= model.n_layers() {
        return Err(Error::Dimension(format!("layer {layer} out of range")));
    }
    let ml = &model.layers()[layer];
    let n = ml.router.n_active();
    use Criterion::*;
    let sv = match criterion {
        EWS => {
            let flat: Vec<Vec<f64>> = ml.experts.iter().map(Expert::flatten).collect();
            ScoreVector::plain(row_sums_off_diagonal(n, |p, q| cosine(&flat[p], &flat[q]))?)
        }
        RWN => ScoreVector::plain((0..n).map(|p| l2_norm(&ml.router.w_gate.column(p))).collect::<Result<_>>()?),
        WSR => ScoreVector::plain(ml.experts.iter().map(|e| Ok(stable_rank(&e.w_up)? + stable_rank(&e.w_down)?)).collect::<Result<_>>()?),
        EWN => ScoreVector::plain(ml.experts.iter().map(|e| l2_norm(&e.flatten())).collect::<Result<_>>()?),
        EUF => {
            let ls = expert_stats(criterion, model, stats, layer)?;
            let t = stats.unwrap().token_total.max(1) as f64;
            ScoreVector::plain(ls.usage.iter().map(|&u| u as f64 / t).collect())
        }
        ECC => {
            let ls = expert_stats(criterion, model, stats, layer)?;
            let m = ls.collaboration.clone();
            ScoreVector { scores: (0..n).map(|p| m.off_diagonal_sum(p) as f64).collect(), pair_matrix: Some(m) }
        }
        EVTC => {
            let ls = expert_stats(criterion, model, stats, layer)?;
            let v = stats.unwrap().vocab_size as f64;
            ScoreVector::plain(ls.experts.iter().map(|e| e.unique_tokens() as f64 / v).collect())
        }
        ETS => {
            expert_stats(criterion, model, stats, layer)?;
            let m = token_similarity_matrix(stats.unwrap(), layer)?;
            ScoreVector { scores: (0..n).map(|p| m.off_diagonal_sum(p) as f64).collect(), pair_matrix: Some(m) }
        }
        EAS => {
            let ls = expert_stats(criterion, model, stats, layer)?;
            let d = model.config.d_model;
            let means: Vec<Vec<f64>> = ls.experts.iter().map(|e| unit_mean(&e.reservoir, d)).collect::<Result<_>>()?;
            ScoreVector::plain(row_sums_off_diagonal(n, |p, q| Ok(dot(&means[p], &means[q])))?)
        }
        EAE => {
            let ls = expert_stats(criterion, model, stats, layer)?;
            ScoreVector::plain(ls.experts.iter().map(|e| log_std_sum(e.activations.std().into_iter())).collect())
        }
        EAO => {
            let ls = expert_stats(criterion, model, stats, layer)?;
            ScoreVector::plain(
                ls.experts
                    .iter()
                    .map(|e| match opts.outlier_orientation {
                        OutlierOrientation::PerDimension => e.outliers_per_dim.iter().sum::<u64>() as f64,
                        OutlierOrientation::PerToken => e.outliers_per_token as f64,
                    })
                    .collect(),
            )
        }
        EAN => {
            let ls = expert_stats(criterion, model, stats, layer)?;
            ScoreVector::plain(ls.experts.iter().map(|e| e.activations.dim_norms().iter().sum()).collect())
        }
        EGS => {
            let g = grads(criterion, expert_stats(criterion, model, stats, layer)?)?;
            let flat: Vec<Vec<f64>> = g.iter().map(|e| e.flatten()).collect();
            ScoreVector::plain(row_sums_off_diagonal(n, |p, q| cosine(&flat[p], &flat[q]))?)
        }
        EGE => {
            let g = grads(criterion, expert_stats(criterion, model, stats, layer)?)?;
            ScoreVector::plain(g.iter().map(|e| gradient_entropy(e)).collect())
        }
        EGO => {
            let g = grads(criterion, expert_stats(criterion, model, stats, layer)?)?;
            ScoreVector::plain(g.iter().map(|e| Ok(outlier_count(&e.flatten(), OUTLIER_C)? as f64)).collect::<Result<_>>()?)
        }
        EGN => {
            let g = grads(criterion, expert_stats(criterion, model, stats, layer)?)?;
            ScoreVector::plain(g.iter().map(|e| l2_norm(&e.flatten())).collect::<Result<_>>()?)
        }
    };
    if let Some(i) = sv.scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    Ok(sv)
}

/// The `m` most extreme indices per direction, ties to the lowest index.
pub fn select_drop(scores: &[f64], direction: Direction, exclude: &BTreeSet<usize>, m: usize, top_k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    let available = n.saturating_sub(exclude.iter().filter(|&&i| i < n).count());
    if m > available {
        return Err(Error::Selection(format!("cannot drop {m} of {available} selectable experts")));
    }
    if n < m + top_k {
        return Err(Error::Selection(format!("dropping {m} of {n} experts leaves fewer than top_k = {top_k}")));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let mut idx: Vec<usize> = (0..n).filter(|i| !exclude.contains(i)).collect();
    idx.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        let o = if direction == Direction::Max { o.reverse() } else { o };
        o.then(a.cmp(&b))
    });
    idx.truncate(m);
    Ok(idx)
}

/// Greedy pair rule: repeatedly take the extreme off-diagonal pair among the
/// remaining candidates and drop its lower-usage member. When every candidate
/// pair has the same count, the lowest-usage candidate is dropped instead.
pub fn select_pair_drops(matrix: &CountMatrix, usage: &[u64], direction: Direction, exclude: &BTreeSet<usize>, m: usize, top_k: usize) -> Result<Vec<usize>> {
    let n = matrix.n;
    select_drop(&vec![0.0; n], direction, exclude, m, top_k)?;
    let mut cand: Vec<usize> = (0..n).filter(|i| !exclude.contains(i)).collect();
    let lower_usage = |a: usize, b: usize| match usage[a].cmp(&usage[b]) {
        std::cmp::Ordering::Less => a,
        std::cmp::Ordering::Greater => b,
        std::cmp::Ordering::Equal => a.min(b),
    };
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best: Option<(u64, usize, usize)> = None;
        let mut uniform = true;
        let mut first: Option<u64> = None;
        for (i, &p) in cand.iter().enumerate() {
            for &q in &cand[i + 1..] {
                let v = matrix.get(p, q);
                match first {
                    None => first = Some(v),
                    Some(f) if f != v => uniform = false,
                    _ => {}
                }
                let better = match best {
                    None => true,
                    Some((bv, _, _)) => match direction {
                        Direction::Max => v > bv,
                        Direction::Min => v < bv,
                    },
                };
                if better {
                    best = Some((v, p, q));
                }
            }
        }
        let pick = match best {
            Some((_, p, q)) if !uniform => lower_usage(p, q),
            _ => *cand.iter().min_by_key(|&&i| (usage[i], i)).expect("candidates remain"),
        };
        out.push(pick);
        cand.retain(|&i| i != pick);
    }
    Ok(out)
}

/// Drop slots for one layer under a criterion.
pub fn select_layer_drops(
    model: &MoEModel,
    stats: Option<&CalibrationStats>,
    id: CriterionId,
    layer: usize,
    m: usize,
    opts: &ScoreOptions,
) -> Result<(ScoreVector, Vec<usize>)> {
    let sv = score_layer(model, stats, id.criterion, layer, opts)?;
    let k = model.config.top_k;
    let none = BTreeSet::new();
    let drops = match &sv.pair_matrix {
        Some(mat) => {
            let usage = &expert_stats(id.criterion, model, stats, layer)?.usage;
            select_pair_drops(mat, usage, id.direction, &none, m, k)?
        }
        None => select_drop(&sv.scores, id.direction, &none, m, k)?,
    };
    Ok((sv, drops))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub layer: usize,
    pub expert_ids: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub criterion: CriterionId,
    pub layers: Vec<LayerScores>,
    pub model_digest: String,
    pub stats_digest: Option<String>,
}

impl ScoreTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,expert_original_id,criterion,direction,score\n");
        for l in &self.layers {
            for (id, v) in l.expert_ids.iter().zip(&l.scores) {
                s.push_str(&format!("{},{},{},{},{:?}\n", l.layer, id, self.criterion.criterion, self.criterion.direction, v));
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score tables serialize")
    }
}

pub fn score_table(model: &MoEModel, stats: Option<&CalibrationStats>, id: CriterionId, opts: &ScoreOptions) -> Result<ScoreTable> {
    let layers = (0..model.n_layers())
        .map(|l| {
            Ok(LayerScores { layer: l, expert_ids: model.layers()[l].router.expert_ids.clone(), scores: score_layer(model, stats, id.criterion, l, opts)?.scores })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable {
        criterion: id,
        layers,
        model_digest: crate::checkpoint::model_digest(model),
        stats_digest: stats.map(stats_digest),
    })
}

pub fn stats_digest(stats: &CalibrationStats) -> String {
    crate::persistence::sha256_hex(&crate::calibration::stats_to_container(stats).encode().expect("stats encode"))
}
