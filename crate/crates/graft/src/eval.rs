//! Retrieval evaluation: embedding extraction, pairwise distances, CMC
//! ranks and mAP.
//!
//! Ranking is by ascending distance with ties broken by gallery index, so
//! results are deterministic. Queries without any relevant gallery item are
//! excluded from the metrics and counted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::dataset::MultimodalSample;
use crate::data::image::ImageBuf;
use crate::error::{Error, Result};
use crate::model::{ForwardOpts, GraftModel};
use crate::numerics::{no_grad, SeededRng};

#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub ids: Vec<u64>,
    pub views: Vec<u64>,
    pub vectors: Vec<Vec<f64>>,
}

/// M-major image references for a batch of samples.
pub fn batch_refs<'a>(samples: &[&'a MultimodalSample], m: usize) -> Vec<Vec<&'a ImageBuf>> {
    (0..m)
        .map(|mi| samples.iter().map(|s| &s.images[mi]).collect())
        .collect()
}

/// Embeds samples in inference mode (running BN stats, no augmentation, no
/// graph). Deterministic and batch-size independent.
pub fn embed_dataset(
    model: &GraftModel,
    samples: &[MultimodalSample],
    batch_size: usize,
) -> Result<EmbeddingSet> {
    if batch_size == 0 {
        return Err(Error::config("embed_dataset: batch_size must be >= 1"));
    }
    let m = model.cfg.n_modalities;
    let mut set = EmbeddingSet {
        ids: Vec::with_capacity(samples.len()),
        views: Vec::with_capacity(samples.len()),
        vectors: Vec::with_capacity(samples.len()),
    };
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&MultimodalSample> = chunk.iter().collect();
        let batch = batch_refs(&refs, m);
        let out = no_grad(|| model.forward(&batch, &mut ForwardOpts::infer()))?;
        let width = out.embed.shape()[1];
        let flat = out.embed.data_vec();
        for (i, s) in chunk.iter().enumerate() {
            let row = flat[i * width..(i + 1) * width].to_vec();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "embed_dataset: non-finite embedding for sample {:?}",
                    s.key()
                )));
            }
            set.ids.push(s.id);
            set.views.push(s.view);
            set.vectors.push(row);
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Cosine,
}

/// `[Nq, Ng]` distances. Euclidean is the L2 norm; cosine is
/// `1 - cos similarity` and rejects zero vectors.
pub fn pairwise_distances(
    q: &[Vec<f64>],
    g: &[Vec<f64>],
    metric: DistanceMetric,
) -> Result<Vec<Vec<f64>>> {
    let dim = q.first().or(g.first()).map(|v| v.len()).unwrap_or(0);
    if q.iter().chain(g).any(|v| v.len() != dim) {
        return Err(Error::numeric("pairwise_distances: ragged embedding widths"));
    }
    match metric {
        DistanceMetric::Euclidean => Ok(q
            .iter()
            .map(|qv| {
                g.iter()
                    .map(|gv| {
                        qv.iter()
                            .zip(gv)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect()
            })
            .collect()),
        DistanceMetric::Cosine => {
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let qn: Vec<f64> = q.iter().map(|v| norm(v)).collect();
            let gn: Vec<f64> = g.iter().map(|v| norm(v)).collect();
            if qn.iter().chain(&gn).any(|&n| n == 0.0) {
                return Err(Error::numeric("pairwise_distances: zero vector under cosine"));
            }
            Ok(q.iter()
                .zip(&qn)
                .map(|(qv, &nq)| {
                    g.iter()
                        .zip(&gn)
                        .map(|(gv, &ng)| {
                            let dot: f64 = qv.iter().zip(gv).map(|(a, b)| a * b).sum();
                            1.0 - dot / (nq * ng)
                        })
                        .collect()
                })
                .collect())
        }
    }
}

/// Per-query gallery ordering with relevance flags.
#[derive(Debug, Clone)]
pub struct RankingResult {
    /// Gallery indices by ascending distance (ties by index), with excluded
    /// items removed.
    pub order: Vec<Vec<usize>>,
    /// Relevance flag aligned with `order`.
    pub relevant: Vec<Vec<bool>>,
}

/// Builds rankings from a distance matrix. With `exclude_same_view`, gallery
/// items sharing both id and view with the query are dropped from that
/// query's ranking (the standard ReID junk-filtering protocol).
pub fn rank_gallery(
    dists: &[Vec<f64>],
    query_ids: &[u64],
    gallery_ids: &[u64],
    query_views: &[u64],
    gallery_views: &[u64],
    exclude_same_view: bool,
) -> Result<RankingResult> {
    if dists.len() != query_ids.len() {
        return Err(Error::numeric("rank_gallery: query count mismatch"));
    }
    let mut order = Vec::with_capacity(dists.len());
    let mut relevant = Vec::with_capacity(dists.len());
    for (qi, row) in dists.iter().enumerate() {
        if row.len() != gallery_ids.len() {
            return Err(Error::numeric("rank_gallery: gallery count mismatch"));
        }
        let mut idx: Vec<usize> = (0..row.len())
            .filter(|&gi| {
                !(exclude_same_view
                    && gallery_ids[gi] == query_ids[qi]
                    && gallery_views[gi] == query_views[qi])
            })
            .collect();
        idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let rel: Vec<bool> = idx.iter().map(|&gi| gallery_ids[gi] == query_ids[qi]).collect();
        order.push(idx);
        relevant.push(rel);
    }
    Ok(RankingResult { order, relevant })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub map: f64,
    /// Rank-k hit rates for the requested ks.
    pub rank_hits: BTreeMap<usize, f64>,
    /// Queries dropped for having no relevant gallery item.
    pub excluded_queries: usize,
    pub scored_queries: usize,
}

impl MetricReport {
    pub fn rank(&self, k: usize) -> f64 {
        *self.rank_hits.get(&k).unwrap_or(&f64::NAN)
    }
}

/// CMC rank-k rates and mAP. AP per query is the mean over relevant ranks r
/// of `(relevant items in top r) / r`; mAP averages AP over scored queries.
pub fn cmc_and_map(result: &RankingResult, ks: &[usize]) -> MetricReport {
    let mut ap_sum = 0.0;
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut scored = 0usize;
    let mut excluded = 0usize;
    for (order, rel) in result.order.iter().zip(&result.relevant) {
        let n_rel = rel.iter().filter(|r| **r).count();
        if n_rel == 0 {
            excluded += 1;
            continue;
        }
        scored += 1;
        let mut seen_rel = 0usize;
        let mut ap = 0.0;
        for (pos, &is_rel) in rel.iter().enumerate() {
            if is_rel {
                seen_rel += 1;
                ap += seen_rel as f64 / (pos + 1) as f64;
            }
        }
        ap /= n_rel as f64;
        ap_sum += ap;
        for (&k, h) in hits.iter_mut() {
            let top = rel.iter().take(k).any(|r| *r);
            if top {
                *h += 1;
            }
        }
        let _ = order;
    }
    let denom = scored.max(1) as f64;
    MetricReport {
        map: if scored == 0 { 0.0 } else { ap_sum / denom },
        rank_hits: hits
            .into_iter()
            .map(|(k, h)| (k, if scored == 0 { 0.0 } else { h as f64 / denom }))
            .collect(),
        excluded_queries: excluded,
        scored_queries: scored,
    }
}

/// End-to-end evaluation of a model on query/gallery samples.
pub fn evaluate(
    model: &GraftModel,
    query: &[MultimodalSample],
    gallery: &[MultimodalSample],
    metric: DistanceMetric,
    exclude_same_view: bool,
    batch_size: usize,
) -> Result<MetricReport> {
    let q = embed_dataset(model, query, batch_size)?;
    let g = embed_dataset(model, gallery, batch_size)?;
    let dists = pairwise_distances(&q.vectors, &g.vectors, metric)?;
    let ranking = rank_gallery(&dists, &q.ids, &g.ids, &q.views, &g.views, exclude_same_view)?;
    Ok(cmc_and_map(&ranking, &[1, 5, 10]))
}

/// Monte-Carlo estimate of the mAP a uniformly random ranking would score on
/// the given gallery composition (per-query relevant counts against the
/// gallery size). Deterministic under the seed.
pub fn chance_map(relevant_per_query: &[usize], gallery_size: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::derive(seed, "chance-map");
    let mut total = 0.0;
    let mut scored = 0usize;
    for &n_rel in relevant_per_query {
        if n_rel == 0 || gallery_size == 0 {
            continue;
        }
        scored += 1;
        let mut acc = 0.0;
        for _ in 0..draws {
            // Sample the relevant items' positions without building the
            // whole permutation: reservoir over gallery positions.
            let mut positions: Vec<usize> = Vec::with_capacity(n_rel);
            let mut chosen = std::collections::HashSet::new();
            while positions.len() < n_rel {
                let p = rng.below(gallery_size);
                if chosen.insert(p) {
                    positions.push(p);
                }
            }
            positions.sort_unstable();
            let mut ap = 0.0;
            for (j, &pos) in positions.iter().enumerate() {
                ap += (j + 1) as f64 / (pos + 1) as f64;
            }
            acc += ap / n_rel as f64;
        }
        total += acc / draws as f64;
    }
    if scored == 0 {
        0.0
    } else {
        total / scored as f64
    }
}
