//! Pairwise relatedness scoring and cluster-sampling graph pruning.
//!
//! Every directional pair (i, j), i != j, gets a score combining a learned
//! geometric weight (ReLU of a linear map over positionally-encoded relative
//! box geometry) with a frozen semantic weight (cosine between label
//! embeddings). Scores are normalized per target column, then each target's
//! incoming edges are clustered and only the per-cluster maxima survive.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffValue, Tape};
use crate::error::{invalid, Result};

/// Clamp applied to coordinate differences before the log.
pub const EPS_GEO: f64 = 1e-3;
/// Guard added to the score-normalization denominator.
pub const EPS_DEN: f64 = 1e-8;
/// Positional-encoding depth per scalar component.
pub const DEFAULT_D_PE: usize = 16;
/// Label-embedding width.
pub const EMBED_DIM: usize = 32;

/// Detected 2D box: pixel center, extents, class and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Box2D {
    pub fn new(x: f64, y: f64, w: f64, h: f64, class_id: usize, score: f64) -> Result<Self> {
        if w <= 0.0 || h <= 0.0 {
            return Err(invalid("2D box extents must be positive"));
        }
        Ok(Self {
            x,
            y,
            w,
            h,
            class_id,
            score,
        })
    }
}

/// Frozen per-class embedding table standing in for a language model.
///
/// Rows start orthonormal (Gram-Schmidt over seeded Gaussians) and related
/// class pairs are then remixed so their cosine is exactly 0.8.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelEmbeddingTable {
    pub table: Vec<Vec<f64>>,
}

impl LabelEmbeddingTable {
    /// Deterministic table for `n_classes` labels. `related` lists class-id
    /// pairs that should score as semantically close.
    pub fn build(n_classes: usize, related: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Self {
        assert!(n_classes <= EMBED_DIM, "more classes than embedding dims");
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
        while rows.len() < n_classes {
            let mut v: Vec<f64> = (0..EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r.iter()).map(|(a, b)| a * b).sum();
                for (vi, ri) in v.iter_mut().zip(r.iter()) {
                    *vi -= dot * ri;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
        for &(a, b) in related {
            // cos(a, b) = 0.8 once b is remixed inside the (a, b) plane
            let (ea, eb): (Vec<f64>, Vec<f64>) = (rows[a].clone(), rows[b].clone());
            rows[b] = ea
                .iter()
                .zip(eb.iter())
                .map(|(x, y)| 0.8 * x + 0.6 * y)
                .collect();
        }
        Self { table: rows }
    }

    pub fn embedding(&self, class_id: usize) -> &[f64] {
        &self.table[class_id]
    }
}

/// Dense n x n relatedness scores plus the raw geometric and semantic
/// weights they were built from. `scores[i][j]` is the impact of node `i`
/// on target `j`; the diagonal is zero.
#[derive(Debug, Clone)]
pub struct RelatednessMatrix {
    pub scores: Vec<Vec<f64>>,
    pub geometry_w: Vec<Vec<f64>>,
    pub semantic_w: Vec<Vec<f64>>,
}

impl RelatednessMatrix {
    pub fn n(&self) -> usize {
        self.scores.len()
    }
}

/// Directed edge retained after pruning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub score: f64,
}

/// Pruned scene graph; per-target edges sorted by descending score, retained
/// scores renormalized to sum 1 per target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseSceneGraph {
    pub n_nodes: usize,
    pub edges: Vec<Edge>,
}

impl SparseSceneGraph {
    /// Incoming edges of `target`, descending by score.
    pub fn incoming(&self, target: usize) -> Vec<&Edge> {
        self.edges.iter().filter(|e| e.target == target).collect()
    }

    /// Structured-text export: one header line, then `source target score`
    /// triples.
    pub fn to_records(&self) -> String {
        let mut out = format!("nodes {}\n", self.n_nodes);
        for e in &self.edges {
            out.push_str(&format!("{} {} {:.9}\n", e.source, e.target, e.score));
        }
        out
    }
}

/// Translation- and scale-invariant relative geometry of a box pair.
pub fn augmented_geometry(g_i: &Box2D, g_j: &Box2D) -> [f64; 4] {
    let dx = (g_i.x - g_j.x).abs().max(EPS_GEO);
    let dy = (g_i.y - g_j.y).abs().max(EPS_GEO);
    [
        (dx / g_i.w).ln(),
        (dy / g_i.h).ln(),
        (g_i.w / g_j.w).ln(),
        (g_i.h / g_j.h).ln(),
    ]
}

/// Sinusoidal encoding: per scalar, interleaved sin/cos at `d_pe / 2`
/// geometric wavelengths spanning [1, 1000].
pub fn positional_encode(v: &[f64], d_pe: usize) -> Vec<f64> {
    assert!(d_pe >= 2 && d_pe % 2 == 0, "d_pe must be even");
    let half = d_pe / 2;
    let mut out = Vec::with_capacity(v.len() * d_pe);
    for &x in v {
        for k in 0..half {
            let exponent = if half > 1 {
                k as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let wavelength = 1000f64.powf(exponent);
            out.push((x / wavelength).sin());
            out.push((x / wavelength).cos());
        }
    }
    out
}

/// ReLU of the learned linear map over an encoded geometry feature, on the
/// tape so the weight row receives gradient.
pub fn geometry_weight(tape: &mut Tape, eps: DiffValue, w_g: DiffValue) -> Result<DiffValue> {
    let (rows, cols) = tape.shape(w_g);
    if rows != 1 || cols != tape.len(eps) {
        return Err(invalid(format!(
            "geometry weight shape mismatch: w_g {rows}x{cols} vs eps {}",
            tape.len(eps)
        )));
    }
    let lin = tape.matvec(w_g, eps)?;
    Ok(tape.relu(lin))
}

/// Plain-valued counterpart of [`geometry_weight`].
pub fn geometry_weight_f64(eps: &[f64], w_g: &[f64]) -> Result<f64> {
    if eps.len() != w_g.len() {
        return Err(invalid("geometry weight dimension mismatch"));
    }
    Ok(eps
        .iter()
        .zip(w_g.iter())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        .max(0.0))
}

/// Cosine similarity between two label embeddings.
pub fn semantic_weight(e_i: &[f64], e_j: &[f64]) -> Result<f64> {
    let ni: f64 = e_i.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nj: f64 = e_j.iter().map(|x| x * x).sum::<f64>().sqrt();
    if ni < 1e-12 || nj < 1e-12 {
        return Err(invalid("zero-norm label embedding"));
    }
    let dot: f64 = e_i.iter().zip(e_j.iter()).map(|(a, b)| a * b).sum();
    Ok(dot / (ni * nj))
}

/// Scoring options resolving the normalization ambiguity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Apply an extra elementwise sigmoid after normalization.
    pub sigmoid_rescale: bool,
    pub d_pe: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            sigmoid_rescale: false,
            d_pe: DEFAULT_D_PE,
        }
    }
}

/// Dense relatedness matrix:
/// `r[i][j] = wG[i][j] exp(wC[i][j]) / max(eps, sum_k wG[k][j] exp(wC[k][j]))`
/// with the diagonal excluded throughout.
pub fn relatedness_matrix(
    boxes: &[Box2D],
    table: &LabelEmbeddingTable,
    w_g: &[f64],
    opts: &ScoreOptions,
) -> Result<RelatednessMatrix> {
    let n = boxes.len();
    if n == 0 {
        return Err(invalid("relatedness matrix needs at least one box"));
    }
    let mut geometry_w = vec![vec![0.0; n]; n];
    let mut semantic_w = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let eps = positional_encode(&augmented_geometry(&boxes[i], &boxes[j]), opts.d_pe);
            geometry_w[i][j] = geometry_weight_f64(&eps, w_g)?;
            semantic_w[i][j] = semantic_weight(
                table.embedding(boxes[i].class_id),
                table.embedding(boxes[j].class_id),
            )?;
        }
    }
    let mut scores = vec![vec![0.0; n]; n];
    for j in 0..n {
        // The floor only engages for (near-)dead columns, so live columns
        // normalize to an exact unit sum.
        let denom: f64 = (0..n)
            .filter(|&k| k != j)
            .map(|k| geometry_w[k][j] * semantic_w[k][j].exp())
            .sum::<f64>()
            .max(EPS_DEN);
        for i in 0..n {
            if i == j {
                continue;
            }
            let mut r = geometry_w[i][j] * semantic_w[i][j].exp() / denom;
            if opts.sigmoid_rescale {
                r = 1.0 / (1.0 + (-r).exp());
            }
            scores[i][j] = r;
        }
    }
    Ok(RelatednessMatrix {
        scores,
        geometry_w,
        semantic_w,
    })
}

/// Optimal 1-D k-means assignment (clusters contiguous in sorted order),
/// via dynamic programming over prefix sums. Returns a cluster label per
/// input position; labels are ordered by ascending cluster value.
pub fn cluster_scores(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(invalid("cannot cluster an empty score list"));
    }
    if k == 0 {
        return Err(invalid("cluster count must be at least 1"));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let mut distinct = 1usize;
    for w in sorted.windows(2) {
        if w[1] != w[0] {
            distinct += 1;
        }
    }
    let k_eff = k.min(distinct);

    // prefix sums for O(1) within-cluster SSE
    let mut p1 = vec![0.0; n + 1];
    let mut p2 = vec![0.0; n + 1];
    for (i, &v) in sorted.iter().enumerate() {
        p1[i + 1] = p1[i] + v;
        p2[i + 1] = p2[i] + v * v;
    }
    let sse = |i: usize, j: usize| {
        // cost of one cluster over sorted[i..=j]
        let men = (j + 1 - i) as f64;
        let s = p1[j + 1] - p1[i];
        (p2[j + 1] - p2[i]) - s * s / men
    };

    // dp[c][j]: best cost of grouping sorted[0..=j] into c+1 clusters
    let inf = f64::INFINITY;
    let mut dp = vec![vec![inf; n]; k_eff];
    let mut split = vec![vec![0usize; n]; k_eff];
    for j in 0..n {
        dp[0][j] = sse(0, j);
    }
    for c in 1..k_eff {
        for j in c..n {
            for s in c..=j {
                let cost = dp[c - 1][s - 1] + sse(s, j);
                // strict < keeps the lowest split index on ties
                if cost < dp[c][j] {
                    dp[c][j] = cost;
                    split[c][j] = s;
                }
            }
        }
    }

    // recover boundaries
    let mut labels_sorted = vec![0usize; n];
    let mut end = n - 1;
    for c in (0..k_eff).rev() {
        let start = if c == 0 { 0 } else { split[c][end] };
        for l in labels_sorted.iter_mut().take(end + 1).skip(start) {
            *l = c;
        }
        if c > 0 {
            end = start - 1;
        }
    }
    let mut labels = vec![0usize; n];
    for (pos, &orig) in order.iter().enumerate() {
        labels[orig] = labels_sorted[pos];
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruneMode {
    /// Cluster each target's incoming scores independently.
    PerTarget,
    /// Cluster all directional scores at once.
    Global,
}

/// Cluster-sampling prune: per cluster of similar scores only the strongest
/// edge survives; survivors are renormalized to sum 1 per target.
pub fn prune(m: &RelatednessMatrix, k: usize, mode: PruneMode) -> Result<SparseSceneGraph> {
    if k == 0 {
        return Err(invalid("prune cluster count must be at least 1"));
    }
    let n = m.n();
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    match mode {
        PruneMode::PerTarget => {
            for j in 0..n {
                let sources: Vec<usize> = (0..n).filter(|&i| i != j).collect();
                if sources.is_empty() {
                    continue;
                }
                let scores: Vec<f64> = sources.iter().map(|&i| m.scores[i][j]).collect();
                kept.extend(
                    select_cluster_maxima(&sources, &scores, k)?
                        .into_iter()
                        .map(|(i, s)| (i, j, s)),
                );
            }
        }
        PruneMode::Global => {
            let mut pairs: Vec<(usize, usize)> = Vec::new();
            let mut scores: Vec<f64> = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        pairs.push((i, j));
                        scores.push(m.scores[i][j]);
                    }
                }
            }
            if !pairs.is_empty() {
                let idx: Vec<usize> = (0..pairs.len()).collect();
                for (flat, s) in select_cluster_maxima(&idx, &scores, k)? {
                    let (i, j) = pairs[flat];
                    kept.push((i, j, s));
                }
            }
        }
    }

    // renormalize survivors per target and order edges (target, -score)
    let mut edges: Vec<Edge> = Vec::new();
    for j in 0..n {
        let mut mine: Vec<(usize, f64)> = kept
            .iter()
            .filter(|&&(_, t, _)| t == j)
            .map(|&(i, _, s)| (i, s))
            .collect();
        if mine.is_empty() {
            continue;
        }
        mine.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let total: f64 = mine.iter().map(|&(_, s)| s).sum();
        for (i, s) in mine {
            let score = if total > 0.0 { s / total } else { 0.0 };
            edges.push(Edge {
                source: i,
                target: j,
                score,
            });
        }
    }
    Ok(SparseSceneGraph { n_nodes: n, edges })
}

/// Keep the best-scoring member of each cluster; ties toward lower index.
fn select_cluster_maxima(
    ids: &[usize],
    scores: &[f64],
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let labels = cluster_scores(scores, k)?;
    let n_clusters = labels.iter().max().map(|&m| m + 1).unwrap_or(0);
    let mut out = Vec::with_capacity(n_clusters);
    for c in 0..n_clusters {
        let mut best: Option<(usize, f64)> = None;
        for (pos, &label) in labels.iter().enumerate() {
            if label != c {
                continue;
            }
            let candidate = (ids[pos], scores[pos]);
            best = match best {
                None => Some(candidate),
                Some(b) if candidate.1 > b.1 => Some(candidate),
                Some(b) => Some(b),
            };
        }
        if let Some(b) = best {
            out.push(b);
        }
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(out)
}
