//! Retrieval metrics, alignment consistency, spread statistics and round-trip probes.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{covariance_matrix, dot, logdet_psd, norm, Matrix, RankCorrelation};

/// Cosine similarities between every query and every target, with ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// n_queries × n_targets
    pub values: Matrix,
    pub query_ids: Vec<u64>,
    pub target_ids: Vec<u64>,
}

fn row_norms(m: &Matrix, what: &str) -> Result<Vec<f64>> {
    m.iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::ZeroNorm(format!("{what} row {i}")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Ids default to row positions.
pub fn similarity_matrix(q: &Matrix, t: &Matrix) -> Result<SimilarityMatrix> {
    similarity_matrix_with_ids(q, t, (0..q.rows() as u64).collect(), (0..t.rows() as u64).collect())
}

pub fn similarity_matrix_with_ids(
    q: &Matrix,
    t: &Matrix,
    query_ids: Vec<u64>,
    target_ids: Vec<u64>,
) -> Result<SimilarityMatrix> {
    if q.cols() != t.cols() {
        return Err(Error::Shape(format!("queries have width {}, targets {}", q.cols(), t.cols())));
    }
    ensure(query_ids.len() == q.rows() && target_ids.len() == t.rows(), || {
        "one id per row is required".into()
    })?;
    for (ids, what) in [(&query_ids, "query"), (&target_ids, "target")] {
        let unique: HashSet<&u64> = ids.iter().collect();
        ensure(unique.len() == ids.len(), || format!("{what} ids are not unique"))?;
    }
    let nq = row_norms(q, "query")?;
    let nt = row_norms(t, "target")?;
    let mut values = Matrix::zeros(q.rows(), t.rows());
    for i in 0..q.rows() {
        for j in 0..t.rows() {
            let c = dot(q.row(i), t.row(j)) / (nq[i] * nt[j]);
            values.set(i, j, c.clamp(-1.0, 1.0));
        }
    }
    Ok(SimilarityMatrix {
        values,
        query_ids,
        target_ids,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct RecallAt {
    #[serde(rename = "1")]
    pub r1: f64,
    #[serde(rename = "5")]
    pub r5: f64,
    #[serde(rename = "10")]
    pub r10: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall_at: RecallAt,
    pub mrr: f64,
}

/// 1-based rank of column `gold` in `row`: higher similarity first, then ascending id.
pub fn gold_rank(row: &[f64], ids: &[u64], gold: usize) -> usize {
    let (gs, gid) = (row[gold], ids[gold]);
    1 + row
        .iter()
        .zip(ids)
        .filter(|&(&s, &id)| s > gs || (s == gs && id < gid))
        .count()
}

/// `gold[i]` is the target id that query `i` should retrieve.
pub fn retrieval_metrics(s: &SimilarityMatrix, gold: &[u64]) -> Result<RetrievalMetrics> {
    let nq = s.values.rows();
    ensure(nq > 0, || "no queries".into())?;
    ensure(gold.len() == nq, || format!("{} gold ids for {nq} queries", gold.len()))?;
    let col: BTreeMap<u64, usize> = s.target_ids.iter().enumerate().map(|(j, &id)| (id, j)).collect();
    let (mut r1, mut r5, mut r10, mut mrr) = (0usize, 0usize, 0usize, 0.0);
    for (i, g) in gold.iter().enumerate() {
        let &j = col.get(g).ok_or_else(|| {
            Error::InvalidArgument(format!("gold target {g} of query {i} is not among the targets"))
        })?;
        let rank = gold_rank(s.values.row(i), &s.target_ids, j);
        r1 += (rank <= 1) as usize;
        r5 += (rank <= 5) as usize;
        r10 += (rank <= 10) as usize;
        mrr += 1.0 / rank as f64;
    }
    let n = nq as f64;
    Ok(RetrievalMetrics {
        recall_at: RecallAt {
            r1: r1 as f64 / n,
            r5: r5 as f64 / n,
            r10: r10 as f64 / n,
        },
        mrr: mrr / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcReport {
    pub ac: f64,
    pub evaluated: usize,
    /// Queries whose similarity list was constant.
    pub skipped: usize,
}

/// Mean rank correlation between `cos(a_i, b_j)` and `cos(b_i, b_j)` over `j ≠ i`.
///
/// With `(a, b) = (Zv, Zt)` this asks whether each vision embedding ranks the
/// texts the way its own caption does.
pub fn alignment_consistency_with(a: &Matrix, b: &Matrix, method: RankCorrelation) -> Result<AcReport> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.rows();
    ensure(n >= 3, || format!("alignment consistency needs n >= 3, got {n}"))?;
    let cross = similarity_matrix(a, b)?.values;
    let within = similarity_matrix(b, b)?.values;
    let (mut sum, mut evaluated, mut skipped) = (0.0, 0, 0);
    for i in 0..n {
        let x: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| cross.get(i, j)).collect();
        let y: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| within.get(i, j)).collect();
        match method.compute(&x, &y) {
            Ok(r) => {
                sum += r;
                evaluated += 1;
            }
            Err(Error::InvalidArgument(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    ensure(evaluated > 0, || "every query had a constant similarity list".into())?;
    Ok(AcReport {
        ac: sum / evaluated as f64,
        evaluated,
        skipped,
    })
}

/// Vision-query-first alignment consistency with Spearman correlation.
pub fn alignment_consistency(zv: &Matrix, zt: &Matrix) -> Result<AcReport> {
    alignment_consistency_with(zv, zt, RankCorrelation::Spearman)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceStats {
    pub trace: f64,
    pub logdet: f64,
    pub mean_norm: f64,
}

pub fn space_stats(z: &Matrix) -> Result<SpaceStats> {
    let cov = covariance_matrix(z)?;
    Ok(SpaceStats {
        trace: cov.trace(),
        logdet: logdet_psd(&cov.cov)?,
        mean_norm: z.iter_rows().map(norm).sum::<f64>() / z.rows() as f64,
    })
}

/// Row of `bank` with the highest cosine to `z`; the lowest index wins ties.
pub fn nearest_decode(z: &[f64], bank: &Matrix) -> Result<usize> {
    ensure(bank.rows() > 0, || "empty caption bank".into())?;
    if z.len() != bank.cols() {
        return Err(Error::Shape(format!("query width {} vs bank width {}", z.len(), bank.cols())));
    }
    let nz = norm(z);
    if nz == 0.0 {
        return Err(Error::ZeroNorm("query embedding".into()));
    }
    let nb = row_norms(bank, "bank")?;
    let mut best = (0, f64::NEG_INFINITY);
    for (j, r) in bank.iter_rows().enumerate() {
        let c = dot(z, r) / (nz * nb[j]);
        if c > best.1 {
            best = (j, c);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct GroupReport {
    pub recall_at: RecallAt,
    pub mrr: f64,
    /// Mean `cos(zv_i, q_i)`.
    pub mean_cos: f64,
    /// Mean `‖zv_i − q_i‖`.
    pub mean_dist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct RoundTripReport {
    pub groups: BTreeMap<String, GroupReport>,
    pub n: usize,
}

/// Each group holds one caption embedding per video; captions query the video set.
pub fn roundtrip_groups(zv: &Matrix, groups: &[(String, Matrix)]) -> Result<RoundTripReport> {
    let n = zv.rows();
    let ids: Vec<u64> = (0..n as u64).collect();
    let mut out = BTreeMap::new();
    for (name, q) in groups {
        if q.shape() != zv.shape() {
            return Err(Error::Shape(format!(
                "caption group {name} is {:?}, videos are {:?}",
                q.shape(),
                zv.shape()
            )));
        }
        let s = similarity_matrix(q, zv)?;
        let m = retrieval_metrics(&s, &ids)?;
        let mean_cos = (0..n).map(|i| s.values.get(i, i)).sum::<f64>() / n as f64;
        let mean_dist = (0..n)
            .map(|i| norm(&q.row(i).iter().zip(zv.row(i)).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .sum::<f64>()
            / n as f64;
        out.insert(
            name.clone(),
            GroupReport {
                recall_at: m.recall_at,
                mrr: m.mrr,
                mean_cos,
                mean_dist,
            },
        );
    }
    Ok(RoundTripReport { groups: out, n })
}

/// Decodes every video embedding to its nearest bank caption.
pub fn decode_all(zv: &Matrix, bank: &Matrix) -> Result<(Vec<usize>, Matrix)> {
    let ids = zv.iter_rows().map(|r| nearest_decode(r, bank)).collect::<Result<Vec<_>>>()?;
    let decoded = bank.select_rows(&ids);
    Ok((ids, decoded))
}

/// Groups `groundtruth` (the gold captions) and `decoded` (nearest bank caption of each video).
pub fn roundtrip_retrieval(zv: &Matrix, bank: &Matrix, gold: &[usize]) -> Result<RoundTripReport> {
    ensure(gold.len() == zv.rows(), || format!("{} gold ids for {} videos", gold.len(), zv.rows()))?;
    ensure(gold.iter().all(|&g| g < bank.rows()), || "gold id outside the bank".into())?;
    let (_, decoded) = decode_all(zv, bank)?;
    roundtrip_groups(
        zv,
        &[
            ("groundtruth".to_string(), bank.select_rows(gold)),
            ("decoded".to_string(), decoded),
        ],
    )
}

/// Writes `index,cos_gold,cos_decoded,dist_gold,dist_decoded`, one line per row.
pub fn drift_export(zv: &Matrix, z_gold: &Matrix, z_decoded: &Matrix, path: &Path) -> Result<()> {
    if zv.shape() != z_gold.shape() || zv.shape() != z_decoded.shape() {
        return Err(Error::Shape(format!(
            "drift export needs equal shapes: {:?}, {:?}, {:?}",
            zv.shape(),
            z_gold.shape(),
            z_decoded.shape()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["index", "cos_gold", "cos_decoded", "dist_gold", "dist_decoded"])
        .map_err(|e| Error::csv(path, e))?;
    let dist = |a: &[f64], b: &[f64]| norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
    for i in 0..zv.rows() {
        let (v, g, d) = (zv.row(i), z_gold.row(i), z_decoded.row(i));
        let cg = crate::numerics::cosine_similarity(v, g)?;
        let cd = crate::numerics::cosine_similarity(v, d)?;
        w.write_record([
            i.to_string(),
            format!("{cg:e}"),
            format!("{cd:e}"),
            format!("{:e}", dist(v, g)),
            format!("{:e}", dist(v, d)),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Aggregate report for a set of paired vision/text embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct SpaceReport {
    pub recall_at: RecallAt,
    pub mrr: f64,
    pub ac: f64,
    pub ac_text_first: f64,
    pub ac_skipped: usize,
    pub v_trace: f64,
    pub t_trace: f64,
    pub v_logdet: f64,
    pub t_logdet: f64,
    pub v_norm_mean: f64,
    pub t_norm_mean: f64,
    pub n: usize,
    pub config: serde_json::Value,
}

/// Retrieval runs video-to-caption over the distinct captions present (`caption_ids`
/// gives each video's caption; `zt` rows are the per-video caption embeddings).
pub fn space_report(zv: &Matrix, zt: &Matrix, caption_ids: &[u64], config: serde_json::Value) -> Result<SpaceReport> {
    if zv.shape() != zt.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", zv.shape(), zt.shape())));
    }
    ensure(caption_ids.len() == zv.rows(), || "one caption id per video is required".into())?;
    let mut first: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, &id) in caption_ids.iter().enumerate() {
        first.entry(id).or_insert(i);
    }
    let gallery_ids: Vec<u64> = first.keys().copied().collect();
    let gallery = zt.select_rows(&first.values().copied().collect::<Vec<_>>());
    let s = similarity_matrix_with_ids(zv, &gallery, (0..zv.rows() as u64).collect(), gallery_ids)?;
    let m = retrieval_metrics(&s, caption_ids)?;
    let ac = alignment_consistency(zv, zt)?;
    let ac_t = alignment_consistency(zt, zv)?;
    let vs = space_stats(zv)?;
    let ts = space_stats(zt)?;
    Ok(SpaceReport {
        recall_at: m.recall_at,
        mrr: m.mrr,
        ac: ac.ac,
        ac_text_first: ac_t.ac,
        ac_skipped: ac.skipped,
        v_trace: vs.trace,
        t_trace: ts.trace,
        v_logdet: vs.logdet,
        t_logdet: ts.logdet,
        v_norm_mean: vs.mean_norm,
        t_norm_mean: ts.mean_norm,
        n: zv.rows(),
        config,
    })
}
