//! Retrieval evaluation: feature extraction, protocol masks, CMC and mAP.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::data::{DatasetManifest, Sample, Split};
use crate::error::{contract, Error, Result};
use crate::loader::SampleLoader;
use crate::model::EncoderHandle;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::seeding::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    General,
    SameClothes,
    ClothChanging,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::General, Protocol::SameClothes, Protocol::ClothChanging];
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::General => "general",
            Protocol::SameClothes => "same-clothes",
            Protocol::ClothChanging => "cloth-changing",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Protocol::General),
            "same-clothes" => Ok(Protocol::SameClothes),
            "cloth-changing" => Ok(Protocol::ClothChanging),
            other => Err(Error::Config(format!(
                "unknown protocol `{other}` (expected general, same-clothes or cloth-changing)"
            ))),
        }
    }
}

/// Metadata the protocol predicates look at.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub path: PathBuf,
    pub identity: usize,
    pub clothes_id: usize,
    pub camera_id: usize,
}

impl From<&Sample> for SampleMeta {
    fn from(s: &Sample) -> Self {
        Self {
            path: s.image_path.clone(),
            identity: s.identity,
            clothes_id: s.clothes_id,
            camera_id: s.camera_id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Positive,
    Negative,
    Junk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolRule {
    pub protocol: Protocol,
    /// Keep every valid positive. When off, only the first positive in
    /// gallery order counts and later ones become junk.
    pub multi_shot: bool,
}

impl ProtocolRule {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            multi_shot: true,
        }
    }

    /// Relation of one gallery entry to one query, before shot filtering.
    pub fn relation(&self, q: &SampleMeta, g: &SampleMeta) -> Relation {
        if q.path == g.path {
            return Relation::Junk;
        }
        if q.identity != g.identity {
            return Relation::Negative;
        }
        let same_cam = q.camera_id == g.camera_id;
        let same_clothes = q.clothes_id == g.clothes_id;
        let junk = match self.protocol {
            Protocol::General => same_cam,
            Protocol::ClothChanging => same_cam || same_clothes,
            Protocol::SameClothes => same_cam || !same_clothes,
        };
        if junk {
            Relation::Junk
        } else {
            Relation::Positive
        }
    }

    /// Relations of a whole gallery to one query.
    pub fn relations(&self, q: &SampleMeta, gallery: &[SampleMeta]) -> Vec<Relation> {
        let mut out: Vec<Relation> = gallery.iter().map(|g| self.relation(q, g)).collect();
        if !self.multi_shot {
            let mut seen = false;
            for r in out.iter_mut() {
                if *r == Relation::Positive {
                    if seen {
                        *r = Relation::Junk;
                    }
                    seen = true;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    /// Gallery indices ranked by ascending distance, junk removed.
    pub ranked: Vec<usize>,
    /// 1-based ranks of the positives within `ranked`.
    pub positive_ranks: Vec<usize>,
    pub junk: usize,
    /// `None` when the query had no valid positive and was dropped.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub protocol: Protocol,
    /// `[n_q, n_g]`, 1 - cosine.
    pub distances: Tensor<f64>,
    pub queries: Vec<QueryOutcome>,
    /// `cmc[k]` is the fraction of scored queries with a hit within rank k+1.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub scored: usize,
    pub dropped: usize,
    pub junk: usize,
}

impl RetrievalResult {
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }

    /// Expected Rank-1 of features carrying no information: per query, the
    /// share of positives among its valid gallery entries.
    pub fn chance_rank1(&self) -> (f64, f64) {
        let ps: Vec<f64> = self
            .queries
            .iter()
            .filter(|q| q.ap.is_some())
            .map(|q| q.positive_ranks.len() as f64 / q.ranked.len() as f64)
            .collect();
        let n = ps.len().max(1) as f64;
        let mean = ps.iter().sum::<f64>() / n;
        let var = ps.iter().map(|p| p * (1.0 - p)).sum::<f64>() / (n * n);
        (mean, var.sqrt())
    }
}

fn normalized_rows(t: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            contract!(n > 0.0, "feature row {i} has zero norm");
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// Cosine distance matrix between query and gallery rows.
pub fn cosine_distances(query: &Tensor<f64>, gallery: &Tensor<f64>) -> Result<Tensor<f64>> {
    contract!(
        query.shape().len() == 2 && gallery.shape().len() == 2 && query.cols() == gallery.cols(),
        "feature dims differ: {:?} vs {:?}",
        query.shape(),
        gallery.shape()
    );
    let q = normalized_rows(query)?;
    let g = normalized_rows(gallery)?;
    let (nq, ng) = (q.len(), g.len());
    Tensor::new(
        [nq, ng],
        q.iter()
            .flat_map(|qr| g.iter().map(move |gr| 1.0 - qr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>()))
            .collect(),
    )
}

/// Score a distance row against its relations.
pub fn score_query(distances: &[f64], relations: &[Relation]) -> QueryOutcome {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].partial_cmp(&distances[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let junk = relations.iter().filter(|r| **r == Relation::Junk).count();
    let ranked: Vec<usize> = order.into_iter().filter(|&g| relations[g] != Relation::Junk).collect();
    let positive_ranks: Vec<usize> = ranked
        .iter()
        .enumerate()
        .filter(|(_, &g)| relations[g] == Relation::Positive)
        .map(|(r, _)| r + 1)
        .collect();
    let ap = if positive_ranks.is_empty() {
        None
    } else {
        let s: f64 = positive_ranks
            .iter()
            .enumerate()
            .map(|(hits, &rank)| (hits + 1) as f64 / rank as f64)
            .sum();
        Some(s / positive_ranks.len() as f64)
    };
    QueryOutcome {
        ranked,
        positive_ranks,
        junk,
        ap,
    }
}

/// Aggregate CMC and mAP from a distance matrix and per-query relations.
pub fn score_relations(protocol: Protocol, distances: Tensor<f64>, relations: &[Vec<Relation>]) -> Result<RetrievalResult> {
    let (nq, ng) = (distances.rows(), distances.cols());
    contract!(nq > 0 && ng > 0, "need a non-empty query and gallery");
    contract!(relations.len() == nq, "one relation row per query");
    let queries: Vec<QueryOutcome> = (0..nq).map(|i| score_query(distances.row(i), &relations[i])).collect();
    let scored: Vec<&QueryOutcome> = queries.iter().filter(|q| q.ap.is_some()).collect();
    if scored.is_empty() {
        return Err(Error::Evaluation(format!(
            "no query has a valid positive under the {protocol} protocol"
        )));
    }
    let mut cmc = vec![0.0; ng];
    for q in &scored {
        for c in cmc.iter_mut().skip(q.positive_ranks[0] - 1) {
            *c += 1.0;
        }
    }
    let n = scored.len() as f64;
    cmc.iter_mut().for_each(|c| *c /= n);
    let map = scored.iter().map(|q| q.ap.unwrap()).sum::<f64>() / n;
    let n_scored = scored.len();
    let junk = queries.iter().map(|q| q.junk).sum();
    let dropped = nq - n_scored;
    Ok(RetrievalResult {
        protocol,
        distances,
        queries,
        cmc,
        map,
        scored: n_scored,
        dropped,
        junk,
    })
}

pub fn score(
    query_feats: &Tensor<f64>,
    gallery_feats: &Tensor<f64>,
    query_meta: &[SampleMeta],
    gallery_meta: &[SampleMeta],
    rule: ProtocolRule,
) -> Result<RetrievalResult> {
    contract!(
        query_feats.rows() == query_meta.len() && gallery_feats.rows() == gallery_meta.len(),
        "feature and metadata counts differ"
    );
    contract!(!query_meta.is_empty() && !gallery_meta.is_empty(), "need a non-empty query and gallery");
    let distances = cosine_distances(query_feats, gallery_feats)?;
    let relations: Vec<Vec<Relation>> = query_meta.iter().map(|q| rule.relations(q, gallery_meta)).collect();
    score_relations(rule.protocol, distances, &relations)
}

/// Does any query have a valid positive under `rule`?
pub fn protocol_applicable(query: &[SampleMeta], gallery: &[SampleMeta], rule: ProtocolRule) -> bool {
    query
        .iter()
        .any(|q| rule.relations(q, gallery).contains(&Relation::Positive))
}

/// Features with the metadata of the samples they came from, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor<f64>,
    pub meta: Vec<SampleMeta>,
}

/// Encode `indices` of the manifest with `encoder` (no gradients, no
/// augmentation), `batch_size` images at a time.
pub fn extract_features<T: Scalar>(
    encoder: &EncoderHandle,
    store: &ParamStore<T>,
    manifest: &DatasetManifest,
    indices: &[usize],
    loader: &SampleLoader,
    batch_size: usize,
) -> Result<FeatureSet> {
    let mut rows: Vec<f64> = Vec::with_capacity(indices.len() * encoder.feature_dim);
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples = loader.get_many(manifest, chunk)?;
        let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
        let f = encoder.encode_images(store, &images)?;
        rows.extend(f.data().iter().map(|v| v.to_f64_exact()));
    }
    Ok(FeatureSet {
        features: Tensor::new([indices.len(), encoder.feature_dim], rows)?,
        meta: indices.iter().map(|&i| SampleMeta::from(&manifest.records[i])).collect(),
    })
}

/// Feature sources that need no trained encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StubEncoder {
    /// One-hot identity features: perfect retrieval.
    Oracle,
    /// Gaussian features seeded by sample path: chance-level retrieval.
    Random { seed: u64 },
}

impl FromStr for StubEncoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(StubEncoder::Oracle),
            "random" => Ok(StubEncoder::Random { seed: 0 }),
            other => Err(Error::Config(format!("unknown stub `{other}` (oracle or random)"))),
        }
    }
}

fn path_key(p: &Path) -> String {
    let d = Sha256::digest(p.to_string_lossy().as_bytes());
    d.iter().map(|b| format!("{b:02x}")).collect()
}

impl StubEncoder {
    pub fn features(&self, manifest: &DatasetManifest, indices: &[usize], dim: usize) -> FeatureSet {
        let meta: Vec<SampleMeta> = indices.iter().map(|&i| SampleMeta::from(&manifest.records[i])).collect();
        let data = match *self {
            StubEncoder::Oracle => {
                let dim = dim.max(manifest.records.iter().map(|s| s.identity + 1).max().unwrap_or(1));
                let rows: Vec<f64> = meta
                    .iter()
                    .flat_map(|m| (0..dim).map(move |j| if j == m.identity { 1.0 } else { 0.0 }))
                    .collect();
                Tensor::new([meta.len(), dim], rows)
            }
            StubEncoder::Random { seed } => {
                let rows: Vec<f64> = meta
                    .iter()
                    .flat_map(|m| {
                        let mut rng = stream_rng(seed, &format!("stub:{}", path_key(&m.path)), &[]);
                        (0..dim).map(move |_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()
                    })
                    .collect();
                Tensor::new([meta.len(), dim], rows)
            }
        }
        .expect("rows match shape");
        FeatureSet { features: data, meta }
    }
}

/// Store features keyed by the SHA-256 of each sample path.
pub fn save_feature_cache(set: &FeatureSet, source: &str, path: &Path) -> Result<String> {
    let mut a = Archive::new();
    a.set_meta("source", source);
    a.set_meta("count", set.meta.len());
    for (i, m) in set.meta.iter().enumerate() {
        a.insert(format!("feat/{}", path_key(&m.path)), &Tensor::new([set.features.cols()], set.features.row(i).to_vec())?);
    }
    a.save(path)
}

/// Reload cached features for `meta`; returns `None` if the cache lacks any
/// of them or was built from a different source.
pub fn load_feature_cache(meta: &[SampleMeta], source: &str, path: &Path) -> Result<Option<FeatureSet>> {
    if !path.exists() {
        return Ok(None);
    }
    let (a, _) = Archive::load(path)?;
    if a.meta("source")? != source {
        return Ok(None);
    }
    let mut rows = Vec::new();
    let mut dim = 0;
    for m in meta {
        let Some(t) = a.tensors.get(&format!("feat/{}", path_key(&m.path))) else {
            return Ok(None);
        };
        dim = t.numel();
        rows.extend_from_slice(t.data());
    }
    Ok(Some(FeatureSet {
        features: Tensor::new([meta.len(), dim], rows)?,
        meta: meta.to_vec(),
    }))
}

pub fn split_indices(manifest: &DatasetManifest, split: Split) -> Vec<usize> {
    (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split == split)
        .collect()
}

/// Machine-readable summary of one protocol run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub queries: usize,
    pub dropped: usize,
    pub junk: usize,
}

impl From<&RetrievalResult> for EvalReport {
    fn from(r: &RetrievalResult) -> Self {
        Self {
            protocol: r.protocol,
            rank1: r.rank(1),
            rank5: r.rank(5),
            rank10: r.rank(10),
            map: r.map,
            queries: r.scored,
            dropped: r.dropped,
            junk: r.junk,
        }
    }
}

impl EvalReport {
    pub fn to_lines(&self) -> Vec<String> {
        vec![
            format!("protocol={}", self.protocol),
            format!("rank1={:.4}", self.rank1),
            format!("rank5={:.4}", self.rank5),
            format!("rank10={:.4}", self.rank10),
            format!("mAP={:.4}", self.map),
            format!("queries={}", self.queries),
            format!("dropped_queries={}", self.dropped),
            format!("junk_excluded={}", self.junk),
        ]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.to_lines().join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// CSV histogram of positive (intra-identity) and negative (inter-identity)
/// distances over the valid entries, on `[0, 2]`.
pub fn distance_histogram_csv(result: &RetrievalResult, relations: &[Vec<Relation>], bins: usize) -> String {
    let bins = bins.max(1);
    let mut intra = vec![0usize; bins];
    let mut inter = vec![0usize; bins];
    for (i, rel) in relations.iter().enumerate() {
        for (j, r) in rel.iter().enumerate() {
            let d = result.distances.at2(i, j).clamp(0.0, 2.0);
            let b = ((d / 2.0 * bins as f64) as usize).min(bins - 1);
            match r {
                Relation::Positive => intra[b] += 1,
                Relation::Negative => inter[b] += 1,
                Relation::Junk => {}
            }
        }
    }
    let mut out = String::from("bin_lo,bin_hi,intra,inter\n");
    for b in 0..bins {
        let lo = 2.0 * b as f64 / bins as f64;
        let hi = 2.0 * (b + 1) as f64 / bins as f64;
        out.push_str(&format!("{lo:.4},{hi:.4},{},{}\n", intra[b], inter[b]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(path: &str, id: usize, clothes: usize, cam: usize) -> SampleMeta {
        SampleMeta {
            path: PathBuf::from(path),
            identity: id,
            clothes_id: clothes,
            camera_id: cam,
        }
    }

    #[test]
    fn perfect_single_positive() {
        let q = score_query(&[0.1, 0.5, 0.9], &[Relation::Positive, Relation::Negative, Relation::Negative]);
        assert_eq!(q.positive_ranks, vec![1]);
        assert_eq!(q.ap, Some(1.0));
    }

    #[test]
    fn ap_for_hits_at_one_and_three() {
        let q = score_query(&[0.1, 0.2, 0.3], &[Relation::Positive, Relation::Negative, Relation::Positive]);
        let oracle = (1.0 / 1.0 + 2.0 / 3.0) / 2.0;
        assert!((q.ap.unwrap() - oracle).abs() < 1e-12);
        assert!((q.ap.unwrap() - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn cloth_changing_excludes_same_clothes() {
        let q = meta("q", 0, 5, 0);
        let same_outfit = meta("g1", 0, 5, 1);
        let changed = meta("g2", 0, 6, 1);
        let cc = ProtocolRule::new(Protocol::ClothChanging);
        assert_eq!(cc.relation(&q, &same_outfit), Relation::Junk);
        assert_eq!(cc.relation(&q, &changed), Relation::Positive);
        let gen = ProtocolRule::new(Protocol::General);
        assert_eq!(gen.relation(&q, &same_outfit), Relation::Positive);
        let sc = ProtocolRule::new(Protocol::SameClothes);
        assert_eq!(sc.relation(&q, &same_outfit), Relation::Positive);
        assert_eq!(sc.relation(&q, &changed), Relation::Junk);
        for p in Protocol::ALL {
            assert_eq!(ProtocolRule::new(p).relation(&q, &q.clone()), Relation::Junk);
        }
    }

    #[test]
    fn ranked_list_excludes_junk() {
        let qf = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let gf = Tensor::new([3, 2], vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0]).unwrap();
        let qm = vec![meta("q", 0, 0, 0)];
        let gm = vec![meta("a", 0, 0, 1), meta("b", 0, 1, 1), meta("c", 1, 2, 1)];
        let r = score(&qf, &gf, &qm, &gm, ProtocolRule::new(Protocol::ClothChanging)).unwrap();
        assert_eq!(r.queries[0].ranked, vec![1, 2]);
        assert_eq!(r.rank(1), 1.0);
        assert_eq!(r.junk, 1);
    }

    #[test]
    fn all_queries_without_positives_is_an_error() {
        let qf = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let gf = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let err = score(&qf, &gf, &[meta("q", 0, 0, 0)], &[meta("g", 1, 1, 1)], ProtocolRule::new(Protocol::General));
        assert!(matches!(err, Err(Error::Evaluation(_))));
    }

    #[test]
    fn dropped_queries_are_counted() {
        let qf = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let gf = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let r = score(
            &qf,
            &gf,
            &[meta("q1", 0, 0, 0), meta("q2", 3, 9, 0)],
            &[meta("g", 0, 0, 1)],
            ProtocolRule::new(Protocol::General),
        )
        .unwrap();
        assert_eq!((r.scored, r.dropped), (1, 1));
    }

    #[test]
    fn single_shot_keeps_first_positive() {
        let rule = ProtocolRule {
            protocol: Protocol::General,
            multi_shot: false,
        };
        let rel = rule.relations(&meta("q", 0, 0, 0), &[meta("a", 0, 0, 1), meta("b", 0, 0, 2), meta("c", 1, 1, 1)]);
        assert_eq!(rel, vec![Relation::Positive, Relation::Junk, Relation::Negative]);
    }

    #[test]
    fn histogram_counts_every_valid_pair() {
        let qf = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let gf = Tensor::new([2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let qm = vec![meta("q", 0, 0, 0)];
        let gm = vec![meta("a", 0, 0, 1), meta("b", 1, 1, 1)];
        let rule = ProtocolRule::new(Protocol::General);
        let rel: Vec<_> = qm.iter().map(|q| rule.relations(q, &gm)).collect();
        let r = score(&qf, &gf, &qm, &gm, rule).unwrap();
        let csv = distance_histogram_csv(&r, &rel, 4);
        assert!(csv.starts_with("bin_lo,bin_hi,intra,inter\n0.0000,0.5000,1,0\n"));
        assert!(csv.trim_end().ends_with("1.5000,2.0000,0,1"));
    }
}
