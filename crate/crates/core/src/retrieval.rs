//! Exact inner-product retrieval, ground-truth matching and recall@k.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean Earth radius used by the haversine distance.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Default metric threshold for a correct match.
pub const DEFAULT_THRESHOLD_M: f64 = 25.0;
/// Stored descriptors must have unit norm within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Ground-truth position of a record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Location {
    /// Latitude and longitude in degrees.
    Geodetic { lat: f64, lon: f64 },
    /// Metric coordinates in meters.
    Planar { x: f64, y: f64 },
    /// Index into an aligned image sequence.
    Frame(i64),
}

impl Location {
    pub fn kind(&self) -> &'static str {
        match self {
            Location::Geodetic { .. } => "latlon",
            Location::Planar { .. } => "planar",
            Location::Frame(_) => "frame",
        }
    }
}

/// Rule deciding whether a reference is a correct match for a query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MatchRule {
    Distance { threshold_m: f64 },
    Frames { threshold: u64 },
}

impl Default for MatchRule {
    fn default() -> Self {
        MatchRule::Distance {
            threshold_m: DEFAULT_THRESHOLD_M,
        }
    }
}

/// Great-circle distance on a spherical Earth.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Distance in meters between two positions of the same metric kind.
pub fn distance_m(a: &Location, b: &Location) -> Result<f64> {
    match (a, b) {
        (Location::Planar { x: x1, y: y1 }, Location::Planar { x: x2, y: y2 }) => Ok((x1 - x2).hypot(y1 - y2)),
        (Location::Geodetic { lat: a1, lon: o1 }, Location::Geodetic { lat: a2, lon: o2 }) => {
            Ok(haversine_m(*a1, *o1, *a2, *o2))
        }
        _ => Err(Error::manifest(
            None,
            format!("cannot measure distance between {} and {} positions", a.kind(), b.kind()),
        )),
    }
}

/// Indices of the references within `threshold_m` of the query.
pub fn match_by_distance(query: &Location, refs: &[Location], threshold_m: f64) -> Result<Vec<usize>> {
    if !(threshold_m > 0.0) {
        return Err(Error::Contract(format!("distance threshold must be positive, got {threshold_m}")));
    }
    let mut out = Vec::new();
    for (i, r) in refs.iter().enumerate() {
        if distance_m(query, r)? <= threshold_m {
            out.push(i);
        }
    }
    Ok(out)
}

/// Indices of the references at most `threshold` frames from the query.
pub fn match_by_frame(query: i64, refs: &[i64], threshold: u64) -> Vec<usize> {
    refs.iter()
        .enumerate()
        .filter(|(_, r)| r.abs_diff(query) <= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Row-normalized descriptors with unique record ids.
#[derive(Debug)]
pub struct DescriptorIndex {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
    inner_products: AtomicU64,
}

impl DescriptorIndex {
    pub fn new(ids: Vec<String>, rows: &[Tensor]) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::Contract(format!("{} ids for {} descriptors", ids.len(), rows.len())));
        }
        let dim = rows.first().map(Tensor::len).unwrap_or(0);
        let mut seen = HashSet::with_capacity(ids.len());
        let mut data = Vec::with_capacity(dim * rows.len());
        for (id, row) in ids.iter().zip(rows) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Contract(format!("duplicate descriptor id `{id}`")));
            }
            if row.len() != dim {
                return Err(Error::dim("descriptor_index", format!("row `{id}` has {} values, expected {dim}", row.len())));
            }
            if (row.norm() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!("descriptor `{id}` is not unit-norm ({})", row.norm())));
            }
            data.extend_from_slice(row.data());
        }
        Ok(DescriptorIndex {
            dim,
            ids,
            data,
            inner_products: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Inner products evaluated by searches so far.
    pub fn inner_products_computed(&self) -> u64 {
        self.inner_products.load(AtomicOrdering::Relaxed)
    }

    /// Positions of the `k` rows with the largest inner product, best first.
    /// Equal scores rank by ascending id. `k > len` returns every row.
    pub fn top_k_indices(&self, query: &[f64], k: usize) -> Result<Vec<usize>> {
        if self.ids.is_empty() {
            return Err(Error::EmptyInput("top_k"));
        }
        if k == 0 {
            return Err(Error::Contract("top_k needs k >= 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::dim("top_k", format!("query of length {} for index of dim {}", query.len(), self.dim)));
        }
        let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!("query is not unit-norm ({qn})")));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            // `+ 0.0` folds -0.0 into +0.0 so that exact zero scores tie
            .map(|i| (self.row(i).iter().zip(query).map(|(a, b)| a * b).sum::<f64>() + 0.0, i))
            .collect();
        self.inner_products.fetch_add(self.len() as u64, AtomicOrdering::Relaxed);
        let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored.into_iter().map(|(_, i)| i).collect())
    }

    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<&str>> {
        Ok(self
            .top_k_indices(query, k)?
            .into_iter()
            .map(|i| self.ids[i].as_str())
            .collect())
    }
}

/// Correct reference ids for each query, in query order.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub rule: MatchRule,
    pub correct: Vec<BTreeSet<String>>,
}

impl GroundTruth {
    pub fn build(queries: &[Location], refs: &[(String, Location)], rule: MatchRule) -> Result<Self> {
        let positions: Vec<Location> = refs.iter().map(|(_, l)| *l).collect();
        let frames: Option<Vec<i64>> = positions
            .iter()
            .map(|l| match l {
                Location::Frame(f) => Some(*f),
                _ => None,
            })
            .collect();
        let mut correct = Vec::with_capacity(queries.len());
        for q in queries {
            let hits = match (rule, q) {
                (MatchRule::Frames { threshold }, Location::Frame(f)) => {
                    let frames = frames
                        .as_ref()
                        .ok_or_else(|| Error::manifest(None, "frame rule needs frame-indexed references"))?;
                    match_by_frame(*f, frames, threshold)
                }
                (MatchRule::Distance { threshold_m }, Location::Planar { .. } | Location::Geodetic { .. }) => {
                    match_by_distance(q, &positions, threshold_m)?
                }
                (rule, q) => {
                    return Err(Error::manifest(
                        None,
                        format!("{rule:?} cannot be applied to {} positions", q.kind()),
                    ))
                }
            };
            correct.push(hits.into_iter().map(|i| refs[i].0.clone()).collect());
        }
        Ok(GroundTruth { rule, correct })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// k → fraction of evaluated queries with a correct reference in the top k.
    pub recall: BTreeMap<usize, f64>,
    /// Ranked predictions per query, as given.
    pub predictions: Vec<Vec<String>>,
    /// Queries without any correct reference; left out of the denominator.
    pub excluded: usize,
    pub evaluated: usize,
}

pub fn recall_at_k(predictions: &[Vec<String>], gt: &GroundTruth, ks: &[usize]) -> Result<EvalResult> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract(format!("ks must be positive and strictly ascending, got {ks:?}")));
    }
    if predictions.len() != gt.correct.len() {
        return Err(Error::Contract(format!(
            "{} prediction lists for {} ground-truth entries",
            predictions.len(),
            gt.correct.len()
        )));
    }
    let mut hits = vec![0usize; ks.len()];
    let mut excluded = 0;
    for (preds, correct) in predictions.iter().zip(&gt.correct) {
        if correct.is_empty() {
            excluded += 1;
            continue;
        }
        // rank of the first correct prediction
        if let Some(first) = preds.iter().position(|p| correct.contains(p)) {
            for (h, k) in hits.iter_mut().zip(ks) {
                if first < *k {
                    *h += 1;
                }
            }
        }
    }
    let evaluated = predictions.len() - excluded;
    let recall = ks
        .iter()
        .zip(&hits)
        .map(|(k, h)| (*k, if evaluated == 0 { 0.0 } else { *h as f64 / evaluated as f64 }))
        .collect();
    Ok(EvalResult {
        recall,
        predictions: predictions.to_vec(),
        excluded,
        evaluated,
    })
}

/// Searches every query against `index` and scores the rankings.
pub fn evaluate(index: &DescriptorIndex, queries: &[Tensor], gt: &GroundTruth, ks: &[usize]) -> Result<EvalResult> {
    let depth = *ks.last().ok_or_else(|| Error::Contract("no k values".into()))?;
    let predictions = queries
        .iter()
        .map(|q| Ok(index.top_k(q.data(), depth)?.into_iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>>>()?;
    recall_at_k(&predictions, gt, ks)
}

/// `query_id,rank1_id,...` rows followed by one `recall@k=value` line per k.
pub fn format_results(query_ids: &[String], result: &EvalResult) -> String {
    let depth = result.predictions.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = String::from("query_id");
    for r in 1..=depth {
        let _ = write!(out, ",rank{r}_id");
    }
    out.push('\n');
    for (q, preds) in query_ids.iter().zip(&result.predictions) {
        out.push_str(q);
        for p in preds {
            out.push(',');
            out.push_str(p);
        }
        out.push('\n');
    }
    out.push('\n');
    for (k, v) in &result.recall {
        let _ = writeln!(out, "recall@{k}={v:.4}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Tensor {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::from_vec(v.iter().map(|x| x / n).collect())
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i:03}")).collect()
    }

    #[test]
    fn planar_3_4_5() {
        let q = Location::Planar { x: 0.0, y: 0.0 };
        let refs = [Location::Planar { x: 30.0, y: 40.0 }, Location::Planar { x: 0.0, y: 0.0 }];
        assert_eq!(match_by_distance(&q, &refs, 25.0).unwrap(), vec![1]);
        assert_eq!(match_by_distance(&q, &refs, 50.0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn geodetic_nearby_point_matches() {
        let q = Location::Geodetic { lat: 48.0, lon: -71.0 };
        let r = Location::Geodetic { lat: 48.0002, lon: -71.0 };
        let d = distance_m(&q, &r).unwrap();
        assert!((d - 22.239).abs() < 0.01, "{d}");
        assert_eq!(match_by_distance(&q, &[r], 25.0).unwrap(), vec![0]);
    }

    #[test]
    fn mixed_kinds_are_rejected() {
        let q = Location::Planar { x: 0.0, y: 0.0 };
        let r = Location::Geodetic { lat: 0.0, lon: 0.0 };
        assert!(matches!(match_by_distance(&q, &[r], 25.0), Err(Error::Manifest { .. })));
        assert!(match_by_distance(&q, &[q], 0.0).is_err());
    }

    #[test]
    fn frame_windows() {
        let refs: Vec<i64> = (0..200).collect();
        assert_eq!(match_by_frame(100, &refs, 0), vec![100]);
        assert_eq!(match_by_frame(100, &refs, 10), (90..=110).collect::<Vec<_>>());
        assert_eq!(match_by_frame(100, &refs, 1), vec![99, 100, 101]);
    }

    #[test]
    fn query_equal_to_row_ranks_first() {
        let rows = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.6, 0.8, 0.0]), unit(&[0.0, 0.0, 1.0])];
        let index = DescriptorIndex::new(ids(3), &rows).unwrap();
        assert_eq!(index.top_k(rows[1].data(), 1).unwrap(), vec!["r001"]);
        let all = index.top_k(rows[1].data(), 10).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(index.inner_products_computed(), 6);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let row = unit(&[1.0, 1.0]);
        let rows = vec![row.clone(), row.clone(), row.clone()];
        let index = DescriptorIndex::new(vec!["c".into(), "a".into(), "b".into()], &rows).unwrap();
        assert_eq!(index.top_k(row.data(), 2).unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn signed_zero_scores_tie() {
        let rows = vec![unit(&[0.0, 1.0]), unit(&[-0.0, 1.0]), unit(&[1.0, 0.0])];
        let index = DescriptorIndex::new(vec!["b".into(), "a".into(), "c".into()], &rows).unwrap();
        // both first rows score ±0 against this query
        assert_eq!(index.top_k(&[-1.0, 0.0], 3).unwrap(), vec!["a", "b", "c"]);
    }

    #[test]
    fn index_validation() {
        let rows = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        assert!(DescriptorIndex::new(vec!["a".into(), "a".into()], &rows).is_err());
        assert!(DescriptorIndex::new(ids(1), &[Tensor::from_vec(vec![2.0, 0.0])]).is_err());
        let empty = DescriptorIndex::new(vec![], &[]).unwrap();
        assert!(matches!(empty.top_k(&[1.0], 1), Err(Error::EmptyInput(_))));
        let index = DescriptorIndex::new(ids(2), &rows).unwrap();
        assert!(index.top_k(&[2.0, 0.0], 1).is_err());
        assert!(index.top_k(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn recall_edge_cases() {
        let gt = GroundTruth {
            rule: MatchRule::default(),
            correct: vec![
                ["a".to_string()].into(),
                ["b".to_string()].into(),
                BTreeSet::new(),
            ],
        };
        let perfect = vec![vec!["a".into(), "x".into()], vec!["b".into(), "y".into()], vec!["z".into()]];
        let r = recall_at_k(&perfect, &gt, &[1, 2]).unwrap();
        assert_eq!(r.recall[&1], 1.0);
        assert_eq!(r.excluded, 1);
        assert_eq!(r.evaluated, 2);

        let wrong = vec![vec!["x".into()], vec!["y".into()], vec!["z".into()]];
        let r = recall_at_k(&wrong, &gt, &[1, 5]).unwrap();
        assert!(r.recall.values().all(|v| *v == 0.0));

        let late = vec![vec!["x".into(), "a".into()], vec!["b".into()], vec![]];
        let r = recall_at_k(&late, &gt, &[1, 2]).unwrap();
        assert_eq!((r.recall[&1], r.recall[&2]), (0.5, 1.0));
        assert!(recall_at_k(&late, &gt, &[2, 1]).is_err());
    }

    #[test]
    fn ground_truth_by_frames_and_distance() {
        let refs: Vec<(String, Location)> = (0..5).map(|i| (format!("f{i}"), Location::Frame(i * 10))).collect();
        let gt = GroundTruth::build(&[Location::Frame(21)], &refs, MatchRule::Frames { threshold: 1 }).unwrap();
        assert_eq!(gt.correct[0], BTreeSet::from(["f2".to_string()]));
        assert!(GroundTruth::build(&[Location::Frame(21)], &refs, MatchRule::default()).is_err());

        let refs = vec![("p".to_string(), Location::Planar { x: 10.0, y: 0.0 })];
        let gt = GroundTruth::build(&[Location::Planar { x: 0.0, y: 0.0 }], &refs, MatchRule::default()).unwrap();
        assert_eq!(gt.correct[0].len(), 1);
    }

    #[test]
    fn results_format() {
        let result = EvalResult {
            recall: BTreeMap::from([(1, 0.5), (2, 1.0)]),
            predictions: vec![vec!["a".into(), "b".into()], vec!["c".into(), "d".into()]],
            excluded: 0,
            evaluated: 2,
        };
        let text = format_results(&["q0".into(), "q1".into()], &result);
        assert_eq!(text, "query_id,rank1_id,rank2_id\nq0,a,b\nq1,c,d\n\nrecall@1=0.5000\nrecall@2=1.0000\n");
    }
}
