//! Guide rejection: per-embedder dimensionality reduction, local outlier
//! factor scoring, trust-weighted aggregation, and a threshold test.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::GuideId;
use crate::retrieval::GuideEmbedding;
use crate::trust::TopicWeights;

/// Below this many surviving guides the whole pass is skipped.
pub const MIN_GUIDES: usize = 4;
pub const DEFAULT_TAU: f64 = 1.5;
pub const DEFAULT_MAX_REDUCED_DIM: usize = 5;
/// Floor on the mean reachability distance, caps the density of duplicates.
const MIN_MEAN_REACH: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum AnomalyError {
    #[error("tau must be positive, got {0}")]
    Tau(f64),
    #[error("guide {guide} lacks an embedding from {embedder}")]
    MissingEmbedding { guide: GuideId, embedder: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReducerKind {
    #[default]
    Pca,
    /// Raw vectors go straight to LOF.
    None,
}

/// Maps a batch of points to a lower dimension. `None` means the batch is too
/// small for the reducer and the raw points should be used.
pub trait Reducer: Send + Sync {
    fn reduce(&self, points: &[Vec<f64>], dim: usize) -> Option<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Pca;

impl Reducer for Pca {
    fn reduce(&self, points: &[Vec<f64>], dim: usize) -> Option<Vec<Vec<f64>>> {
        pca(points, dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyConfig {
    pub enabled: bool,
    /// Reduced dimension; `None` picks `min(5, m - 1)`.
    pub d_r: Option<usize>,
    /// LOF neighbourhood size; `None` picks `max(2, ceil(m / 2))`.
    pub k_lof: Option<usize>,
    pub tau: f64,
    pub reducer: ReducerKind,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            d_r: None,
            k_lof: None,
            tau: DEFAULT_TAU,
            reducer: ReducerKind::Pca,
        }
    }
}

impl AnomalyConfig {
    pub fn validate(&self) -> Result<(), AnomalyError> {
        if !(self.tau > 0.0) {
            return Err(AnomalyError::Tau(self.tau));
        }
        Ok(())
    }

    pub fn reduced_dim(&self, m: usize) -> usize {
        self.d_r
            .unwrap_or_else(|| DEFAULT_MAX_REDUCED_DIM.min(m.saturating_sub(1)))
            .max(1)
    }

    /// Neighbour count, clamped to `m - 1`.
    pub fn neighbours(&self, m: usize) -> usize {
        let k = self.k_lof.unwrap_or_else(|| 2.max(m.div_ceil(2)));
        k.min(m.saturating_sub(1)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedEmbedding {
    pub guide_id: GuideId,
    pub embedder_id: String,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideAnomaly {
    pub guide_id: GuideId,
    pub lof: BTreeMap<String, f64>,
    pub score: f64,
    /// `score > tau`.
    pub flagged: bool,
    /// Flagged and not rescued by the keep-at-least-one rule.
    pub discarded: bool,
}

impl GuideAnomaly {
    pub fn reason(&self, tau: f64) -> String {
        format!("lof_score={:.4}, tau={tau}", self.score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub skipped: bool,
    /// Embedders whose batch was too small to reduce.
    pub reduction_skipped: Vec<String>,
    /// Embedders whose batch was too small to score.
    pub lof_skipped: Vec<String>,
    pub d_r: usize,
    pub k_lof: usize,
    pub tau: f64,
    pub reducer: ReducerKind,
    pub guides: Vec<GuideAnomaly>,
}

impl AnomalyReport {
    pub fn discarded(&self) -> BTreeSet<GuideId> {
        self.guides.iter().filter(|g| g.discarded).map(|g| g.guide_id).collect()
    }
}

/// Principal component scores of `points` on the top `dim` components.
///
/// Computed from the centred Gram matrix, which is `m x m` and so cheap for
/// guide batches regardless of the embedding dimension. Each component's sign
/// is fixed so that its first nonzero loading is positive. Components with no
/// variance yield zero coordinates. Returns `None` when `m < dim + 1`.
pub fn pca(points: &[Vec<f64>], dim: usize) -> Option<Vec<Vec<f64>>> {
    let m = points.len();
    if m < dim + 1 || dim == 0 {
        return None;
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (a, x) in mean.iter_mut().zip(p) {
            *a += x;
        }
    }
    for a in &mut mean {
        *a /= m as f64;
    }
    let centred = DMatrix::from_fn(m, d, |i, j| points[i][j] - mean[j]);
    let gram = &centred * centred.transpose();
    let eig = SymmetricEigen::new(gram);

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let tol = scale * 1e-12 * m as f64;
    let mut coords = vec![vec![0.0; dim]; m];
    for (c, &idx) in order.iter().take(dim).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda <= tol {
            continue;
        }
        let u = eig.eigenvectors.column(idx);
        // Loadings are proportional to centred^T u.
        let loadings = centred.transpose() * u;
        let lmax = loadings.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        let sign = loadings
            .iter()
            .find(|x| x.abs() > lmax * 1e-9)
            .map_or(1.0, |x| x.signum());
        // Score of point i on the component is u_i * sqrt(lambda).
        let s = lambda.sqrt() * sign;
        for (i, row) in coords.iter_mut().enumerate() {
            row[c] = u[i] * s;
        }
    }
    Some(coords)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Local outlier factor of every point with neighbourhood size `k`.
///
/// Neighbourhoods include every point tied at the k-distance. A point whose
/// neighbours all coincide with it scores 1. Returns `None` when there are
/// fewer than `k + 1` points.
pub fn lof_scores(points: &[Vec<f64>], k: usize) -> Option<Vec<f64>> {
    let n = points.len();
    if k == 0 || n < k + 1 {
        return None;
    }
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(&points[i], &points[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut kdist = vec![0.0; n];
    let mut neigh: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]).then(a.cmp(&b)));
        let kd = dist[i][others[k - 1]];
        kdist[i] = kd;
        neigh.push(others.into_iter().take_while(|&j| dist[i][j] <= kd).collect());
    }
    let mean_reach: Vec<f64> = (0..n)
        .map(|i| {
            let s: f64 = neigh[i].iter().map(|&o| kdist[o].max(dist[i][o])).sum();
            s / neigh[i].len() as f64
        })
        .collect();
    let lrd: Vec<f64> = mean_reach.iter().map(|&r| 1.0 / r.max(MIN_MEAN_REACH)).collect();
    Some(
        (0..n)
            .map(|i| {
                if mean_reach[i] == 0.0 {
                    return 1.0;
                }
                let s: f64 = neigh[i].iter().map(|&o| lrd[o]).sum();
                s / neigh[i].len() as f64 / lrd[i]
            })
            .collect(),
    )
}

/// Trust-weighted sum of per-embedder LOF scores for each guide. Embedders
/// missing from `weights` count with weight zero.
pub fn aggregate_outlier(lof: &BTreeMap<String, Vec<f64>>, weights: &TopicWeights) -> Vec<f64> {
    let m = lof.values().map(Vec::len).max().unwrap_or(0);
    let mut out = vec![0.0; m];
    for (embedder, scores) in lof {
        let w = weights.get(embedder).copied().unwrap_or(0.0);
        for (o, s) in out.iter_mut().zip(scores) {
            *o += w * s;
        }
    }
    out
}

/// Indices of guides with score strictly above `tau`. When every guide is
/// above `tau`, the lowest-scoring one (first on ties) is kept.
pub fn flag_anomalies(scores: &[f64], tau: f64) -> BTreeSet<usize> {
    let mut flagged: BTreeSet<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tau)
        .map(|(i, _)| i)
        .collect();
    if !scores.is_empty() && flagged.len() == scores.len() {
        let keep = (0..scores.len())
            .min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)))
            .expect("non-empty");
        flagged.remove(&keep);
    }
    flagged
}

/// Runs the full pass over the surviving guides for each embedder in
/// `embedder_ids`.
pub fn detect(
    guides: &[GuideEmbedding],
    embedder_ids: &[String],
    weights: &TopicWeights,
    config: &AnomalyConfig,
) -> Result<AnomalyReport, AnomalyError> {
    detect_with(guides, embedder_ids, weights, config, &Pca)
}

pub fn detect_with(
    guides: &[GuideEmbedding],
    embedder_ids: &[String],
    weights: &TopicWeights,
    config: &AnomalyConfig,
    reducer: &dyn Reducer,
) -> Result<AnomalyReport, AnomalyError> {
    config.validate()?;
    let m = guides.len();
    let mut report = AnomalyReport {
        skipped: true,
        reduction_skipped: Vec::new(),
        lof_skipped: Vec::new(),
        d_r: config.reduced_dim(m),
        k_lof: config.neighbours(m),
        tau: config.tau,
        reducer: config.reducer,
        guides: Vec::new(),
    };
    if !config.enabled || m < MIN_GUIDES {
        return Ok(report);
    }
    report.skipped = false;

    let mut lof: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for embedder in embedder_ids {
        let raw = guides
            .iter()
            .map(|g| {
                g.for_embedder(embedder)
                    .map(|v| v.values().iter().map(|&x| f64::from(x)).collect::<Vec<f64>>())
                    .ok_or_else(|| AnomalyError::MissingEmbedding {
                        guide: g.guide_id,
                        embedder: embedder.clone(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let points = match config.reducer {
            ReducerKind::None => raw,
            ReducerKind::Pca => match reducer.reduce(&raw, report.d_r) {
                Some(p) => p,
                None => {
                    report.reduction_skipped.push(embedder.clone());
                    raw
                }
            },
        };
        let scores = lof_scores(&points, report.k_lof).unwrap_or_else(|| {
            report.lof_skipped.push(embedder.clone());
            vec![1.0; m]
        });
        lof.insert(embedder.clone(), scores);
    }

    let scores = aggregate_outlier(&lof, weights);
    let discarded = flag_anomalies(&scores, config.tau);
    report.guides = guides
        .iter()
        .enumerate()
        .map(|(j, g)| GuideAnomaly {
            guide_id: g.guide_id,
            lof: lof.iter().map(|(e, s)| (e.clone(), s[j])).collect(),
            score: scores[j],
            flagged: scores[j] > config.tau,
            discarded: discarded.contains(&j),
        })
        .collect();
    Ok(report)
}
