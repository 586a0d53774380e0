//! Single-query retrieval: distances, CMC/mAP evaluation with junk
//! handling, k-reciprocal re-ranking and descriptor combination.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::Descriptor;
use crate::tensor::{gemm, l2_normalize, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    #[default]
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::Config(format!("unknown metric {s:?} (euclidean or cosine)"))),
        }
    }
}

/// Which side of the comparison a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseDistances {
    /// `[q×g]`
    pub matrix: Tensor,
    /// Zero-norm rows met under the cosine metric; their distances are 1.
    pub zero_norm: Vec<(Side, usize)>,
}

fn rows(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        _ => Err(Error::dim(format!("{what} must be a matrix, got {:?}", t.shape()))),
    }
}

pub fn pairwise_distance(q: &Tensor, g: &Tensor, metric: Metric) -> Result<PairwiseDistances> {
    let (nq, d) = rows(q, "queries")?;
    let (ng, dg) = rows(g, "gallery")?;
    if d != dg {
        return Err(Error::dim(format!("query dimension {d} vs gallery dimension {dg}")));
    }
    q.ensure_finite("query descriptors")?;
    g.ensure_finite("gallery descriptors")?;
    let mut dot = vec![0.0; nq * ng];
    gemm(nq, d, ng, 1.0, q.data(), (d, 1), g.data(), (1, d), 0.0, &mut dot, ng);
    let sq = |t: &Tensor| -> Vec<f64> { t.data().chunks_exact(d).map(|r| r.iter().map(|v| v * v).sum()).collect() };
    let (qn, gn) = (sq(q), sq(g));
    let mut zero_norm = Vec::new();
    if metric == Metric::Cosine {
        zero_norm.extend(qn.iter().enumerate().filter(|(_, &n)| n == 0.0).map(|(i, _)| (Side::Query, i)));
        zero_norm.extend(gn.iter().enumerate().filter(|(_, &n)| n == 0.0).map(|(i, _)| (Side::Gallery, i)));
    }
    let out = dot
        .iter()
        .enumerate()
        .map(|(k, &ip)| {
            let (i, j) = (k / ng, k % ng);
            match metric {
                Metric::Euclidean => (qn[i] + gn[j] - 2.0 * ip).max(0.0).sqrt(),
                Metric::Cosine if qn[i] == 0.0 || gn[j] == 0.0 => 1.0,
                Metric::Cosine => 1.0 - ip / (qn[i].sqrt() * gn[j].sqrt()),
            }
        })
        .collect();
    Ok(PairwiseDistances {
        matrix: Tensor::new(&[nq, ng], out)?,
        zero_norm,
    })
}

/// An immutable gallery for repeated querying.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    descriptors: Tensor,
    identities: Vec<i64>,
    cameras: Vec<u32>,
    metric: Metric,
}

impl GalleryIndex {
    pub fn new(descriptors: Tensor, identities: Vec<i64>, cameras: Vec<u32>, metric: Metric) -> Result<Self> {
        let (n, _) = rows(&descriptors, "gallery")?;
        if identities.len() != n || cameras.len() != n {
            return Err(Error::dim(format!(
                "{n} gallery rows with {} identities and {} cameras",
                identities.len(),
                cameras.len()
            )));
        }
        descriptors.ensure_finite("gallery descriptors")?;
        Ok(Self {
            descriptors,
            identities,
            cameras,
            metric,
        })
    }

    pub fn from_descriptors(items: &[Descriptor], metric: Metric) -> Result<Self> {
        let (m, ids, cams) = stack_descriptors(items)?;
        Self::new(m, ids, cams, metric)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn descriptors(&self) -> &Tensor {
        &self.descriptors
    }

    pub fn identities(&self) -> &[i64] {
        &self.identities
    }

    pub fn cameras(&self) -> &[u32] {
        &self.cameras
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn distances(&self, queries: &Tensor) -> Result<PairwiseDistances> {
        pairwise_distance(queries, &self.descriptors, self.metric)
    }

    pub fn evaluate(&self, queries: &Tensor, q_ids: &[i64], q_cams: &[u32]) -> Result<EvalReport> {
        let d = self.distances(queries)?;
        let mut r = evaluate(&d.matrix, q_ids, &self.identities, q_cams, &self.cameras)?;
        r.settings.metric = Some(self.metric);
        Ok(r)
    }
}

/// Stacks descriptors into a matrix plus parallel identity/camera arrays.
pub fn stack_descriptors(items: &[Descriptor]) -> Result<(Tensor, Vec<i64>, Vec<u32>)> {
    let d = items.first().map_or(0, |x| x.vector.len());
    if d == 0 {
        return Err(Error::dim("no descriptors"));
    }
    if items.iter().any(|x| x.vector.len() != d) {
        return Err(Error::dim("descriptors differ in length"));
    }
    let data = items.iter().flat_map(|x| x.vector.iter().copied()).collect();
    Ok((
        Tensor::new(&[items.len(), d], data)?,
        items.iter().map(|x| x.identity).collect(),
        items.iter().map(|x| x.camera).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > self.k2 && self.k2 >= 1) {
            return Err(Error::Parameter(format!(
                "re-ranking needs k1 > k2 ≥ 1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Parameter(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSettings {
    pub metric: Option<Metric>,
    pub rerank: Option<RerankConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[k-1]` = fraction of evaluated queries with a good match in the top `k`.
    pub cmc: Vec<f64>,
    /// `None` for skipped queries.
    pub per_query_ap: Vec<Option<f64>>,
    /// Queries with no good match in the gallery.
    pub skipped: usize,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub settings: EvalSettings,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        if k == 0 || self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("rank,cmc\n");
        for (k, v) in self.cmc.iter().enumerate() {
            let _ = writeln!(s, "{},{}", k + 1, v);
        }
        s
    }
}

/// Ranks one query's gallery: ascending distance, ties by gallery index.
fn ranking(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx
}

/// Per-query result: `(ap, first good rank (0-based))`, or `None` when the
/// query has no good match.
fn score_query(row: &[f64], qid: i64, qcam: u32, g_ids: &[i64], g_cams: &[u32]) -> Option<(f64, usize)> {
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut kept = 0usize;
    let mut first = None;
    for j in ranking(row) {
        let junk = g_ids[j] == -1 || (g_ids[j] == qid && g_cams[j] == qcam);
        if junk {
            continue;
        }
        kept += 1;
        if g_ids[j] == qid && qid != -1 {
            hits += 1;
            precision_sum += hits as f64 / kept as f64;
            first.get_or_insert(kept - 1);
        }
    }
    first.map(|f| (precision_sum / hits as f64, f))
}

/// Scores a `[q×g]` distance matrix. Gallery entries of the query's own
/// identity under the query's camera are ignored, as are entries labelled
/// `-1`. AP is the mean of the precision values at each good match.
pub fn evaluate(dist: &Tensor, q_ids: &[i64], g_ids: &[i64], q_cams: &[u32], g_cams: &[u32]) -> Result<EvalReport> {
    let (nq, ng) = rows(dist, "distance matrix")?;
    if q_ids.len() != nq || q_cams.len() != nq || g_ids.len() != ng || g_cams.len() != ng {
        return Err(Error::dim(format!(
            "distance matrix {nq}×{ng} vs {} query ids, {} query cameras, {} gallery ids, {} gallery cameras",
            q_ids.len(),
            q_cams.len(),
            g_ids.len(),
            g_cams.len()
        )));
    }
    dist.ensure_finite("distance matrix")?;
    let scored: Vec<Option<(f64, usize)>> = (0..nq)
        .into_par_iter()
        .map(|i| score_query(&dist.data()[i * ng..(i + 1) * ng], q_ids[i], q_cams[i], g_ids, g_cams))
        .collect();
    let valid: Vec<(f64, usize)> = scored.iter().flatten().copied().collect();
    let mut cmc = vec![0.0; ng];
    for &(_, first) in &valid {
        cmc[first] += 1.0;
    }
    let n = valid.len().max(1) as f64;
    let mut acc = 0.0;
    for v in cmc.iter_mut() {
        acc += *v;
        *v = acc / n;
    }
    if valid.is_empty() {
        cmc.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(EvalReport {
        map: valid.iter().map(|v| v.0).sum::<f64>() / n,
        cmc,
        per_query_ap: scored.iter().map(|s| s.map(|v| v.0)).collect(),
        skipped: nq - valid.len(),
        num_queries: nq,
        num_gallery: ng,
        settings: EvalSettings::default(),
    })
}

/// k-reciprocal re-ranking on descriptors; see [`rerank_distances`].
pub fn k_reciprocal_rerank(q: &Tensor, g: &Tensor, metric: Metric, cfg: &RerankConfig) -> Result<Tensor> {
    let (nq, d) = rows(q, "queries")?;
    let (ng, dg) = rows(g, "gallery")?;
    if d != dg {
        return Err(Error::dim(format!("query dimension {d} vs gallery dimension {dg}")));
    }
    let all = Tensor::new(&[nq + ng, d], [q.data(), g.data()].concat())?;
    let full = pairwise_distance(&all, &all, metric)?.matrix;
    rerank_distances(&full, nq, cfg)
}

/// Re-ranks from a `[(q+g)×(q+g)]` distance matrix over the union of
/// queries (first `nq` rows) and gallery. Returns revised `[q×g]` distances
/// `λ·d + (1−λ)·d_J`.
///
/// Distances are squared and each row divided by its maximum. For every
/// sample the k-reciprocal set `R(i, k1)` (forward top-`k1+1` neighbours that
/// also hold `i` in their own top `k1+1`) is expanded by each member's
/// `R(c, ⌊k1/2⌉)` when at least two thirds of that set already lies in
/// `R(i, k1)`. The expanded set is encoded as a vector with weights
/// `exp(−d)`, normalized to sum 1, averaged over the top-`k2` neighbours,
/// and compared with the generalized Jaccard distance
/// `1 − Σmin / Σmax = 1 − Σmin / (2 − Σmin)`.
pub fn rerank_distances(full: &Tensor, nq: usize, cfg: &RerankConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, n2) = rows(full, "distance matrix")?;
    if n != n2 || nq == 0 || nq >= n {
        return Err(Error::dim(format!("need a square matrix over queries and gallery, got {n}×{n2} with {nq} queries")));
    }
    if cfg.k1 >= n {
        return Err(Error::Parameter(format!("k1 = {} must be below q+g = {n}", cfg.k1)));
    }
    full.ensure_finite("distance matrix")?;
    let ng = n - nq;
    let mut dist: Vec<f64> = full.data().iter().map(|v| v * v).collect();
    for row in dist.chunks_exact_mut(n) {
        let m = row.iter().cloned().fold(0.0, f64::max);
        if m > 0.0 {
            row.iter_mut().for_each(|v| *v /= m);
        }
    }
    let rank: Vec<Vec<usize>> = dist.par_chunks_exact(n).map(ranking).collect();

    let reciprocal = |i: usize, k: usize| -> Vec<usize> {
        rank[i][..=k].iter().copied().filter(|&c| rank[c][..=k].contains(&i)).collect()
    };
    let half = (cfg.k1 as f64 / 2.0).round() as usize;
    let v: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let base = reciprocal(i, cfg.k1);
            let mut expanded = base.clone();
            for &c in &base {
                let cand = reciprocal(c, half);
                let common = cand.iter().filter(|x| base.contains(x)).count();
                if common as f64 > 2.0 / 3.0 * cand.len() as f64 {
                    expanded.extend(cand);
                }
            }
            expanded.sort_unstable();
            expanded.dedup();
            let mut row = vec![0.0; n];
            let w: Vec<f64> = expanded.iter().map(|&j| (-dist[i * n + j]).exp()).collect();
            let s: f64 = w.iter().sum();
            for (&j, wj) in expanded.iter().zip(&w) {
                row[j] = wj / s;
            }
            row
        })
        .collect();
    let v: Vec<Vec<f64>> = if cfg.k2 > 1 {
        (0..n)
            .map(|i| {
                let mut row = vec![0.0; n];
                for &j in &rank[i][..cfg.k2] {
                    row.iter_mut().zip(&v[j]).for_each(|(a, b)| *a += b);
                }
                row.iter_mut().for_each(|a| *a /= cfg.k2 as f64);
                row
            })
            .collect()
    } else {
        v
    };
    let v = &v;
    let dist = &dist;
    let out: Vec<f64> = (0..nq)
        .into_par_iter()
        .flat_map_iter(|i| {
            (nq..n).map(move |j| {
                let m: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a.min(*b)).sum();
                let jac = 1.0 - m / (2.0 - m);
                cfg.lambda * dist[i * n + j] + (1.0 - cfg.lambda) * jac
            })
        })
        .collect();
    Tensor::new(&[nq, ng], out)
}

/// Row-wise ℓ2 normalization of both inputs followed by concatenation.
pub fn combine_descriptors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, da) = rows(a, "first descriptor set")?;
    let (nb, db) = rows(b, "second descriptor set")?;
    if na != nb {
        return Err(Error::dim(format!("{na} rows vs {nb} rows")));
    }
    let mut out = Vec::with_capacity(na * (da + db));
    for i in 0..na {
        out.extend(l2_normalize(&a.data()[i * da..(i + 1) * da])?.values);
        out.extend(l2_normalize(&b.data()[i * db..(i + 1) * db])?.values);
    }
    Tensor::new(&[na, da + db], out)
}

/// Descriptor files are JSON lines, one [`Descriptor`] per line.
pub fn save_descriptors(path: impl AsRef<Path>, items: &[Descriptor]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for d in items {
        serde_json::to_writer(&mut out, d)?;
        out.push(b'\n');
    }
    crate::output::write_atomic(path, &out)
}

pub fn load_descriptors(path: impl AsRef<Path>) -> Result<Vec<Descriptor>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
