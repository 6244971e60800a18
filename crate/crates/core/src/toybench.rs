//! Synthetic cloth-changing benchmark.
//!
//! Each identity has a fixed "biometric" appearance (hair, face, arm and leg
//! colours plus a leg texture) and `outfits` clothing styles painted on the
//! torso and pants regions. Outfit `o` of identity `i` uses palette colour
//! `(i + o) mod K`, striped when `o` is odd. So a changed outfit of identity
//! `i` has the colour of identity `i + 1`'s original outfit, and a model that
//! leans on clothes colour is drawn to the wrong person.
//!
//! Outfit `o` is seen by cameras `2o` and `2o + 1`. The first `K - K/2`
//! identities put all their images in train, so training shows outfit
//! changes. The remaining identities split as
//! * train: outfit 0, even camera
//! * gallery: every outfit on odd cameras
//! * query: later outfits on even cameras
//!
//! so each query wears clothes never seen in training and has both a
//! changed-outfit and a same-outfit positive on another camera.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::ToySection;
use crate::data::{labels, load_manifest, save_manifest, DatasetManifest, Image, ParsingMap, Sample, Split};
use crate::error::{Error, Result};
use crate::seeding::stream_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub identities: usize,
    pub outfits: usize,
    pub images_per_outfit: usize,
    pub height: usize,
    pub width: usize,
    /// Pixel noise standard deviation is `50 * noise`.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self::from(&ToySection::default())
    }
}

impl From<&ToySection> for ToySpec {
    fn from(t: &ToySection) -> Self {
        Self {
            identities: t.identities,
            outfits: t.outfits,
            images_per_outfit: t.images_per_outfit,
            height: t.height,
            width: t.width,
            noise: t.noise,
            seed: t.seed,
        }
    }
}

/// Body-part rectangles on the 64x32 reference canvas:
/// `(label, row0, row1, col0, col1)`, half-open.
const PARTS: [(u8, usize, usize, usize, usize); 8] = [
    (labels::HAIR, 2, 8, 10, 22),
    (labels::FACE, 8, 14, 11, 21),
    (labels::UPPER_CLOTHES, 14, 36, 8, 24),
    (labels::LEFT_ARM, 14, 34, 5, 8),
    (labels::RIGHT_ARM, 14, 34, 24, 27),
    (labels::PANTS, 36, 50, 9, 23),
    (labels::LEFT_LEG, 50, 62, 10, 15),
    (labels::RIGHT_LEG, 50, 62, 17, 22),
];

/// Labels a toy parsing map may contain.
pub const TOY_LABELS: [u8; 9] = [
    labels::BACKGROUND,
    labels::HAIR,
    labels::FACE,
    labels::UPPER_CLOTHES,
    labels::PANTS,
    labels::LEFT_ARM,
    labels::RIGHT_ARM,
    labels::LEFT_LEG,
    labels::RIGHT_LEG,
];

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

struct Biometric {
    hair: [f64; 3],
    skin: [f64; 3],
    leg: [f64; 3],
    leg_period: usize,
}

fn biometric(i: usize, k: usize) -> Biometric {
    let t = (i as f64 + 0.5) / k as f64;
    Biometric {
        hair: hsv(0.08 + 0.5 * t, 0.5, 0.15 + 0.5 * ((i * 5) % k) as f64 / k as f64),
        skin: hsv(0.02 + 0.12 * t, 0.3 + 0.4 * ((i * 3) % k) as f64 / k as f64, 0.55 + 0.4 * t),
        leg: hsv(0.55 + 0.4 * ((i * 7) % k) as f64 / k as f64, 0.35, 0.5 + 0.4 * (1.0 - t)),
        leg_period: 2 + i % 3,
    }
}

fn outfit_colours(identity: usize, outfit: usize, k: usize) -> ([f64; 3], [f64; 3]) {
    let c = (identity + outfit) % k;
    let h = c as f64 / k as f64;
    (hsv(h, 0.9, 0.95), hsv(h + 0.5, 0.8, 0.55))
}

/// Camera id of image `j` of `outfit`.
pub fn camera_of(outfit: usize, j: usize) -> usize {
    2 * outfit + j % 2
}

/// Identities whose every outfit is in the train split. The others are
/// trained on their first outfit only and queried in later ones.
pub fn changing_identities(spec: &ToySpec) -> usize {
    spec.identities - spec.identities / 2
}

/// Train: all images of the first `changing_identities` identities plus
/// outfit 0 on even cameras for the rest. For the rest, outfit 0 on odd
/// cameras and later outfits on odd cameras form the gallery; later outfits
/// on even cameras are the queries.
pub fn split_of(spec: &ToySpec, identity: usize, outfit: usize, camera: usize) -> Split {
    if identity < changing_identities(spec) {
        return Split::Train;
    }
    match (outfit, camera % 2) {
        (0, 0) => Split::Train,
        (_, 0) => Split::Query,
        _ => Split::Gallery,
    }
}

/// Render one image and its parsing map. Deterministic in
/// `(spec.seed, identity, outfit, j)`; the pose depends on `j` only, so the
/// biometric regions agree across outfits at zero noise.
pub fn render(spec: &ToySpec, identity: usize, outfit: usize, j: usize) -> (Image, ParsingMap) {
    let (h, w) = (spec.height, spec.width);
    let sy = |r: usize| r * h / 64;
    let sx = |c: usize| c * w / 32;
    let mut pose = stream_rng(spec.seed, "toy-pose", &[identity as u64, j as u64]);
    let max_shift = (2 * w / 32) as i64;
    let shift = pose.random_range(-max_shift..=max_shift) as isize;
    let bio = biometric(identity, spec.identities);
    let (upper, pants) = outfit_colours(identity, outfit, spec.identities);
    let striped = outfit % 2 == 1;

    let mut labels_map = vec![labels::BACKGROUND; h * w];
    let mut img = vec![0.0f64; h * w * 3];
    for px in img.chunks_exact_mut(3) {
        px.copy_from_slice(&[90.0, 90.0, 90.0]);
    }
    for &(label, r0, r1, c0, c1) in &PARTS {
        for y in sy(r0)..sy(r1) {
            for x0 in sx(c0)..sx(c1) {
                let x = x0 as isize + shift;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let x = x as usize;
                let local_y = y - sy(r0);
                let colour = match label {
                    labels::HAIR => bio.hair,
                    labels::FACE => {
                        let (cy, cx) = (y * 64 / h, x0 * 32 / w);
                        let eye = cy == 10 && (cx == 13 || cx == 18);
                        if eye {
                            bio.hair
                        } else {
                            bio.skin
                        }
                    }
                    labels::LEFT_ARM | labels::RIGHT_ARM => bio.skin,
                    labels::LEFT_LEG | labels::RIGHT_LEG => {
                        if (local_y * 64 / h / bio.leg_period) % 2 == 0 {
                            bio.leg
                        } else {
                            bio.leg.map(|v| v * 0.6)
                        }
                    }
                    labels::UPPER_CLOTHES | labels::PANTS => {
                        let base = if label == labels::PANTS { pants } else { upper };
                        if striped && (local_y * 64 / h / 3) % 2 == 1 {
                            base.map(|v| v * 0.55)
                        } else {
                            base
                        }
                    }
                    _ => continue,
                };
                labels_map[y * w + x] = label;
                img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&colour);
            }
        }
    }
    if spec.noise > 0.0 {
        let mut rng = stream_rng(spec.seed, "toy-noise", &[identity as u64, outfit as u64, j as u64]);
        let normal = Normal::new(0.0, 50.0 * spec.noise).expect("finite std");
        for v in img.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let data = img.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    (
        Image::new(h, w, data).expect("canvas size"),
        ParsingMap::new(h, w, labels_map).expect("toy labels are in the vocabulary"),
    )
}

pub fn validate_spec(spec: &ToySpec) -> Result<()> {
    if spec.outfits < 2 {
        return Err(Error::Config(format!(
            "cloth-changing split needs at least 2 outfits per identity, got {}",
            spec.outfits
        )));
    }
    if spec.identities < 4 {
        return Err(Error::Config(format!(
            "need at least 4 identities (half of them queried), got {}",
            spec.identities
        )));
    }
    if spec.images_per_outfit < 2 {
        return Err(Error::Config("need at least 2 images per outfit (one per camera)".into()));
    }
    if spec.height < 64 || spec.width < 32 || spec.height % 32 != 0 || spec.width % 16 != 0 {
        return Err(Error::Config(format!(
            "toy canvas {}x{} must be at least 64x32 and a multiple of 32x16",
            spec.height, spec.width
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config("noise must be a non-negative number".into()));
    }
    Ok(())
}

/// Write images, parsing maps and `manifest.tsv` under `out_dir`, then load
/// the manifest back.
pub fn generate(spec: &ToySpec, out_dir: &Path) -> Result<DatasetManifest> {
    validate_spec(spec)?;
    for sub in ["images", "parsing"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let jobs: Vec<(usize, usize, usize)> = (0..spec.identities)
        .flat_map(|i| (0..spec.outfits).flat_map(move |o| (0..spec.images_per_outfit).map(move |j| (i, o, j))))
        .collect();
    let records: Vec<Sample> = jobs
        .par_iter()
        .map(|&(i, o, j)| {
            let stem = format!("{i:03}_{o}_{j:03}");
            let image_path = PathBuf::from("images").join(format!("{stem}.png"));
            let parsing_path = PathBuf::from("parsing").join(format!("{stem}.png"));
            let (img, parsing) = render(spec, i, o, j);
            img.save_png(&out_dir.join(&image_path))?;
            parsing.save_png(&out_dir.join(&parsing_path))?;
            let camera_id = camera_of(o, j);
            Ok(Sample {
                image_path,
                identity: i,
                clothes_id: i * spec.outfits + o,
                camera_id,
                parsing_path,
                split: split_of(spec, i, o, camera_id),
            })
        })
        .collect::<Result<_>>()?;
    let path = out_dir.join("manifest.tsv");
    save_manifest(&records, &path)?;
    load_manifest(&path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfoundReport {
    /// Leave-one-out nearest-centroid accuracy of torso statistics for
    /// predicting the clothes id.
    pub clothes_accuracy: f64,
    /// Same classifier on biometric-region statistics for the identity.
    pub biometric_accuracy: f64,
    pub cloth_changing_testable: bool,
    pub same_clothes_testable: bool,
    pub flags: Vec<String>,
}

impl ConfoundReport {
    pub fn to_lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("clothes_accuracy={:.4}", self.clothes_accuracy),
            format!("biometric_accuracy={:.4}", self.biometric_accuracy),
            format!("cloth_changing_testable={}", self.cloth_changing_testable),
            format!("same_clothes_testable={}", self.same_clothes_testable),
        ];
        out.extend(self.flags.iter().map(|f| format!("flag={f}")));
        out
    }
}

fn region_stats(img: &Image, parsing: &ParsingMap, parts: &[u8], with_std: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for &part in parts {
        let px: Vec<[u8; 3]> = (0..parsing.height)
            .flat_map(|y| (0..parsing.width).map(move |x| (y, x)))
            .filter(|&(y, x)| parsing.at(y, x) == part)
            .map(|(y, x)| img.pixel(y, x))
            .collect();
        let n = px.len().max(1) as f64;
        for c in 0..3 {
            let mean = px.iter().map(|p| f64::from(p[c])).sum::<f64>() / n;
            out.push(mean);
            if with_std {
                let var = px.iter().map(|p| (f64::from(p[c]) - mean).powi(2)).sum::<f64>() / n;
                out.push(var.sqrt());
            }
        }
    }
    out
}

fn loo_nearest_centroid(features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, &l) in features.iter().zip(labels) {
        let e = sums.entry(l).or_insert_with(|| (vec![0.0; f.len()], 0));
        e.0.iter_mut().zip(f).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let mut correct = 0;
    for (f, &l) in features.iter().zip(labels) {
        let mut best = (f64::INFINITY, usize::MAX);
        for (&c, (sum, n)) in &sums {
            let (sum, n): (Vec<f64>, usize) = if c == l {
                if *n < 2 {
                    continue;
                }
                (sum.iter().zip(f).map(|(a, b)| a - b).collect(), n - 1)
            } else {
                (sum.clone(), *n)
            };
            let d: f64 = sum.iter().zip(f).map(|(s, v)| (s / n as f64 - v).powi(2)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        correct += usize::from(best.1 == l);
    }
    correct as f64 / features.len().max(1) as f64
}

/// Certify the planted signals of a toy manifest with pixel statistics.
pub fn plant_confound_check(manifest: &DatasetManifest) -> Result<ConfoundReport> {
    let loaded: Vec<(Image, ParsingMap)> = manifest
        .records
        .par_iter()
        .map(|s| {
            let img = crate::data::load_image(&manifest.resolve(&s.image_path))?;
            let parsing = ParsingMap::load_png(&manifest.resolve(&s.parsing_path))?;
            Ok((img, parsing))
        })
        .collect::<Result<_>>()?;
    let torso = [labels::UPPER_CLOTHES, labels::PANTS];
    let bio = [
        labels::HAIR,
        labels::FACE,
        labels::LEFT_ARM,
        labels::RIGHT_ARM,
        labels::LEFT_LEG,
        labels::RIGHT_LEG,
    ];
    let clothes_feats: Vec<Vec<f64>> = loaded.iter().map(|(i, p)| region_stats(i, p, &torso, true)).collect();
    let bio_feats: Vec<Vec<f64>> = loaded.iter().map(|(i, p)| region_stats(i, p, &bio, false)).collect();
    let clothes_labels: Vec<usize> = manifest.records.iter().map(|s| s.clothes_id).collect();
    let id_labels: Vec<usize> = manifest.records.iter().map(|s| s.identity).collect();

    let gallery: Vec<&Sample> = manifest.split(Split::Gallery).collect();
    let queries: Vec<&Sample> = manifest.split(Split::Query).collect();
    let cc = queries.iter().any(|q| {
        gallery
            .iter()
            .any(|g| g.identity == q.identity && g.clothes_id != q.clothes_id && g.camera_id != q.camera_id)
    });
    let sc = queries.iter().any(|q| {
        gallery
            .iter()
            .any(|g| g.identity == q.identity && g.clothes_id == q.clothes_id && g.camera_id != q.camera_id)
    });
    let mut flags = Vec::new();
    if !cc {
        flags.push("cloth-changing untestable".to_string());
    }
    if !sc {
        flags.push("same-clothes untestable".to_string());
    }
    let outfits: BTreeSet<usize> = manifest.records.iter().map(|s| s.clothes_id).collect();
    let ids: BTreeSet<usize> = manifest.records.iter().map(|s| s.identity).collect();
    if outfits.len() <= ids.len() {
        flags.push("no outfit variation".to_string());
    }
    Ok(ConfoundReport {
        clothes_accuracy: loo_nearest_centroid(&clothes_feats, &clothes_labels),
        biometric_accuracy: loo_nearest_centroid(&bio_feats, &id_labels),
        cloth_changing_testable: cc,
        same_clothes_testable: sc,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ToySpec {
        ToySpec {
            identities: 4,
            outfits: 2,
            images_per_outfit: 4,
            noise: 0.0,
            ..ToySpec::default()
        }
    }

    #[test]
    fn deterministic_at_zero_noise() {
        let s = spec();
        assert_eq!(render(&s, 1, 0, 2), render(&s, 1, 0, 2));
        let noisy = ToySpec { noise: 0.3, ..s.clone() };
        assert_eq!(render(&noisy, 1, 1, 2), render(&noisy, 1, 1, 2));
        assert_ne!(render(&noisy, 1, 1, 2).0, render(&noisy, 1, 1, 3).0);
    }

    #[test]
    fn only_toy_labels_and_biometrics_match_across_outfits() {
        let s = spec();
        let allowed: BTreeSet<u8> = TOY_LABELS.into_iter().collect();
        for i in 0..4 {
            for j in 0..4 {
                let (a, pa) = render(&s, i, 0, j);
                let (b, pb) = render(&s, i, 1, j);
                assert!(pa.labels.iter().all(|l| allowed.contains(l)));
                assert_eq!(pa, pb);
                for (k, &l) in pa.labels.iter().enumerate() {
                    let clothes = l == labels::UPPER_CLOTHES || l == labels::PANTS;
                    if !clothes {
                        assert_eq!(a.data[k * 3..k * 3 + 3], b.data[k * 3..k * 3 + 3]);
                    }
                }
            }
        }
    }

    #[test]
    fn torso_and_biometric_regions_disjoint() {
        let (_, p) = render(&spec(), 0, 0, 0);
        let count = |l: u8| p.labels.iter().filter(|&&x| x == l).count();
        assert!(count(labels::UPPER_CLOTHES) > 0 && count(labels::FACE) > 0 && count(labels::LEFT_LEG) > 0);
    }

    #[test]
    fn too_few_outfits_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = ToySpec { outfits: 1, ..spec() };
        assert!(matches!(generate(&s, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn generated_counts_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let s = ToySpec {
            identities: 8,
            images_per_outfit: 10,
            ..spec()
        };
        let m = generate(&s, dir.path()).unwrap();
        assert_eq!(m.records.len(), 160);
        assert_eq!((m.num_identities, m.num_clothes), (8, 16));
        let train_clothes: BTreeSet<usize> = m.split(Split::Train).map(|r| r.clothes_id).collect();
        assert!(m.split(Split::Query).all(|q| !train_clothes.contains(&q.clothes_id)));
        let report = plant_confound_check(&m).unwrap();
        assert_eq!(report.clothes_accuracy, 1.0);
        assert_eq!(report.biometric_accuracy, 1.0);
        assert!(report.cloth_changing_testable && report.same_clothes_testable);
        assert!(report.flags.is_empty());
    }
}
