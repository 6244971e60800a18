//! Training objectives as graph builders.
//!
//! Each function records its computation on a [`Graph`] and returns the
//! scalar loss node. Which parameters a loss reaches is decided by what the
//! caller feeds in: detached inputs and constants never receive gradients.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Once;

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::model::{HEAD_ID, HEAD_ID_S, PROJ_C, PROMPT_BANK, RAW_ENCODER, SHIELD_ENCODER};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityConfig {
    pub temperature: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self { temperature: 0.07 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub name: String,
    pub value: f64,
    pub grad_targets: BTreeSet<String>,
}

impl LossReport {
    pub fn new(name: &str, value: f64, targets: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            value,
            grad_targets: targets.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn value<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().to_f64_exact()
}

/// Mean of `-log softmax(logits)[label]`.
pub fn ce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

/// Batch-hard triplet loss on Euclidean distances. Each anchor's hardest
/// positive may be itself (distance 0) when its identity has one sample.
pub fn triplet_loss<T: Scalar>(g: &mut Graph<T>, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let n = g.shape(features)[0];
    contract!(labels.len() == n, "{} labels for {n} features", labels.len());
    contract!(
        labels.iter().collect::<BTreeSet<_>>().len() >= 2,
        "triplet loss needs at least two identities in the batch"
    );
    let d = g.pairwise_distance(features)?;
    let dist = g.value(d).clone();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for i in 0..n {
        let mut hp = (T::neg_infinity(), i);
        let mut hn = (T::infinity(), i);
        for j in 0..n {
            let v = dist.at2(i, j);
            if labels[j] == labels[i] {
                if v > hp.0 {
                    hp = (v, j);
                }
            } else if v < hn.0 {
                hn = (v, j);
            }
        }
        pos.push(i * n + hp.1);
        neg.push(i * n + hn.1);
    }
    let dp = g.select(d, &pos)?;
    let dn = g.select(d, &neg)?;
    let diff = g.sub(dp, dn)?;
    let shifted = g.add_scalar(diff, T::lit(margin));
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

/// `cos(a_i, b_j) / tau` as an `[n_a, n_b]` matrix.
pub fn similarity<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, sim: SimilarityConfig) -> Result<Var> {
    contract!(sim.temperature > 0.0, "temperature must be positive");
    let na = g.l2_normalize_rows(a)?;
    let nb = g.l2_normalize_rows(b)?;
    let bt = g.transpose(nb)?;
    let s = g.matmul(na, bt)?;
    Ok(g.scale(s, T::lit(1.0 / sim.temperature)))
}

/// Image/prompt contrastive loss over a batch.
///
/// `prompt_feats[i]` is the prompt of `labels[i]`. Image-to-text normalizes
/// each image over the distinct prompts present in the batch. Text-to-image
/// normalizes each sample's prompt over all images of the batch, its own
/// image being the positive.
pub fn prompt_contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    image_feats: Var,
    prompt_feats: Var,
    labels: &[usize],
    direction: Direction,
    sim: SimilarityConfig,
) -> Result<Var> {
    let n = g.shape(image_feats)[0];
    contract!(
        g.shape(prompt_feats)[0] == n && labels.len() == n,
        "need one prompt and one label per image"
    );
    match direction {
        Direction::ImageToText => {
            let mut first: BTreeMap<usize, usize> = BTreeMap::new();
            let mut order = Vec::new();
            for (i, &l) in labels.iter().enumerate() {
                if !first.contains_key(&l) {
                    first.insert(l, order.len());
                    order.push(i);
                }
            }
            let unique = g.gather_rows(prompt_feats, &order)?;
            let logits = similarity(g, image_feats, unique, sim)?;
            let targets: Vec<usize> = labels.iter().map(|l| first[l]).collect();
            g.softmax_cross_entropy(logits, &targets)
        }
        Direction::TextToImage => {
            let logits = similarity(g, prompt_feats, image_feats, sim)?;
            let targets: Vec<usize> = (0..n).collect();
            g.softmax_cross_entropy(logits, &targets)
        }
    }
}

/// Cross-entropy of each image against the full prompt vocabulary.
pub fn i2tce_loss<T: Scalar>(
    g: &mut Graph<T>,
    image_feats: Var,
    all_prompt_feats: Var,
    labels: &[usize],
    sim: SimilarityConfig,
) -> Result<Var> {
    let k = g.shape(all_prompt_feats)[0];
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(crate::Error::Contract(format!("no prompt for class {bad} ({k} prompts)")));
    }
    let logits = similarity(g, image_feats, all_prompt_feats, sim)?;
    g.softmax_cross_entropy(logits, labels)
}

/// Prompt rows for a sampled i2tce denominator: every class in `labels`
/// plus up to `extra` other classes drawn without replacement. Returns the
/// rows (ascending) and `labels` re-indexed into them.
pub fn sample_prompt_rows(labels: &[usize], num_classes: usize, extra: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let present: BTreeSet<usize> = labels.iter().copied().collect();
    let others: Vec<usize> = (0..num_classes).filter(|c| !present.contains(c)).collect();
    let take = extra.min(others.len());
    let mut rows: Vec<usize> = present.into_iter().collect();
    rows.extend(rand::seq::index::sample(rng, others.len(), take).into_iter().map(|i| others[i]));
    rows.sort_unstable();
    let remapped = labels
        .iter()
        .map(|l| rows.binary_search(l).expect("label is among the rows"))
        .collect();
    (rows, remapped)
}

/// Row-averaging matrix `[P, n]` for a PK batch and the identity order.
fn centroid_matrix<T: Scalar>(labels: &[usize]) -> Result<Tensor<T>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let kp = groups.values().next().map_or(0, Vec::len);
    contract!(
        kp > 0 && groups.values().all(|v| v.len() == kp),
        "centroid loss needs a PK batch (equal count per identity)"
    );
    let n = labels.len();
    let mut a = vec![T::zero(); groups.len() * n];
    let w = T::one() / T::from_usize_lossy(kp);
    for (p, members) in groups.values().enumerate() {
        for &i in members {
            a[p * n + i] = w;
        }
    }
    Tensor::new([groups.len(), n], a)
}

/// `(1/P) sum_i ||c_i - c_i^s||^2` over per-identity centroids.
pub fn centroid_consistency_loss<T: Scalar>(g: &mut Graph<T>, raw: Var, shield: Var, labels: &[usize]) -> Result<Var> {
    contract!(g.shape(raw) == g.shape(shield), "stream feature shapes differ");
    contract!(labels.len() == g.shape(raw)[0], "label count");
    let a = centroid_matrix::<T>(labels)?;
    let p = a.rows();
    let a = g.constant(a);
    let cr = g.matmul(a, raw)?;
    let cs = g.matmul(a, shield)?;
    let diff = g.sub(cr, cs)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq);
    Ok(g.scale(s, T::one() / T::from_usize_lossy(p)))
}

static SIGN_NOTE: Once = Once::new();

/// Mean cosine between pedestrian features and clothes features. The clothes
/// side is detached here so only the pedestrian side moves.
pub fn disentangle_loss<T: Scalar>(g: &mut Graph<T>, ped: Var, clothes: Var) -> Result<Var> {
    SIGN_NOTE.call_once(|| {
        log::warn!("disentangle loss minimizes +mean(cos(f, f^c)); the opposite sign would pull features toward clothes");
    });
    contract!(g.shape(ped) == g.shape(clothes), "feature shapes differ");
    let c = g.detach(clothes);
    let np = g.l2_normalize_rows(ped)?;
    let nc = g.l2_normalize_rows(c)?;
    let prod = g.mul(np, nc)?;
    let cos = g.sum_rows(prod)?;
    Ok(g.mean(cos))
}

/// Stage-1 prompt losses for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms {
    pub i2t: Var,
    pub t2i: Var,
    pub i2t_c: Var,
    pub t2i_c: Var,
}

/// Sum of the four prompt losses; returns the total node and one report per
/// term followed by the total.
pub fn stage1_total<T: Scalar>(g: &mut Graph<T>, t: &Stage1Terms) -> Result<(Var, Vec<LossReport>)> {
    let targets = [PROMPT_BANK];
    let reports = vec![
        LossReport::new("i2t", value(g, t.i2t), &targets),
        LossReport::new("t2i", value(g, t.t2i), &targets),
        LossReport::new("i2t_c", value(g, t.i2t_c), &targets),
        LossReport::new("t2i_c", value(g, t.t2i_c), &targets),
    ];
    let a = g.add(t.i2t, t.t2i)?;
    let b = g.add(t.i2t_c, t.t2i_c)?;
    let total = g.add(a, b)?;
    let mut reports = reports;
    reports.push(LossReport::new("stage1_total", value(g, total), &targets));
    Ok((total, reports))
}

/// Stage-2 loss terms. Absent terms are switched off by the ablation flags.
/// `i2tce_c` lives on the projection pass and is reported but not summed
/// into the encoder objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stage2Terms {
    pub id: Option<Var>,
    pub i2tce: Option<Var>,
    pub id_s: Option<Var>,
    pub i2tce_s: Option<Var>,
    pub con: Option<Var>,
    pub dis: Option<Var>,
    pub i2tce_c: Option<f64>,
}

pub struct Stage2Total {
    /// Everything except the projection term, weighted.
    pub encoder_objective: Var,
    pub reports: Vec<LossReport>,
    pub total: f64,
}

pub fn stage2_total<T: Scalar>(g: &mut Graph<T>, t: &Stage2Terms, lambda1: f64, lambda2: f64) -> Result<Stage2Total> {
    let raw: &[&str] = &[RAW_ENCODER, HEAD_ID];
    let shield: &[&str] = &[SHIELD_ENCODER, HEAD_ID_S];
    let both: &[&str] = &[RAW_ENCODER, SHIELD_ENCODER];
    let terms: [(&str, Option<Var>, f64, &[&str]); 6] = [
        ("id", t.id, 1.0, raw),
        ("i2tce", t.i2tce, 1.0, &[RAW_ENCODER]),
        ("id_s", t.id_s, 1.0, shield),
        ("i2tce_s", t.i2tce_s, 1.0, &[SHIELD_ENCODER]),
        ("con", t.con, lambda1, both),
        ("dis", t.dis, lambda2, &[RAW_ENCODER]),
    ];
    let mut reports = Vec::new();
    let mut acc: Option<Var> = None;
    let mut total = 0.0;
    for (name, var, w, targets) in terms {
        let Some(v) = var else { continue };
        let val = value(g, v);
        reports.push(LossReport::new(name, val, targets));
        total += w * val;
        let weighted = if w == 1.0 { v } else { g.scale(v, T::lit(w)) };
        acc = Some(match acc {
            None => weighted,
            Some(a) => g.add(a, weighted)?,
        });
    }
    if let Some(c) = t.i2tce_c {
        reports.push(LossReport::new("i2tce_c", c, &[PROJ_C]));
        total += c;
    }
    let encoder_objective = match acc {
        Some(a) => a,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    let mut targets: BTreeSet<String> = BTreeSet::new();
    for r in &reports {
        targets.extend(r.grad_targets.iter().cloned());
    }
    reports.push(LossReport {
        name: "stage2_total".into(),
        value: total,
        grad_targets: targets,
    });
    Ok(Stage2Total {
        encoder_objective,
        reports,
        total,
    })
}
