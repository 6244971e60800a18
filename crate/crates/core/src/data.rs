//! Dataset records, manifest files, image/parsing-map loading and PK batching.
//!
//! A manifest is a tab-separated text file with one record per line:
//!
//! ```text
//! image_path <TAB> identity <TAB> clothes_id <TAB> camera_id <TAB> parsing_path <TAB> split
//! ```
//!
//! Relative paths are resolved against the manifest's directory. Blank lines
//! and lines starting with `#` are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::seeding::stream_rng;

/// The 20-category human-parsing vocabulary.
pub mod labels {
    pub const BACKGROUND: u8 = 0;
    pub const HAT: u8 = 1;
    pub const HAIR: u8 = 2;
    pub const GLOVE: u8 = 3;
    pub const SUNGLASSES: u8 = 4;
    pub const UPPER_CLOTHES: u8 = 5;
    pub const DRESS: u8 = 6;
    pub const COAT: u8 = 7;
    pub const SOCKS: u8 = 8;
    pub const PANTS: u8 = 9;
    pub const JUMPSUIT: u8 = 10;
    pub const SCARF: u8 = 11;
    pub const SKIRT: u8 = 12;
    pub const FACE: u8 = 13;
    pub const LEFT_ARM: u8 = 14;
    pub const RIGHT_ARM: u8 = 15;
    pub const LEFT_LEG: u8 = 16;
    pub const RIGHT_LEG: u8 = 17;
    pub const LEFT_SHOE: u8 = 18;
    pub const RIGHT_SHOE: u8 = 19;

    pub const COUNT: u8 = 20;

    pub const NAMES: [&str; COUNT as usize] = [
        "background",
        "hat",
        "hair",
        "glove",
        "sunglasses",
        "upper-clothes",
        "dress",
        "coat",
        "socks",
        "pants",
        "jumpsuit",
        "scarf",
        "skirt",
        "face",
        "left-arm",
        "right-arm",
        "left-leg",
        "right-leg",
        "left-shoe",
        "right-shoe",
    ];

    /// Categories erased by default when building clothes masks.
    pub const DEFAULT_CLOTHES: [u8; 5] = [UPPER_CLOTHES, DRESS, COAT, PANTS, SKIRT];

    pub fn by_name(name: &str) -> Option<u8> {
        NAMES.iter().position(|n| *n == name).map(|i| i as u8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image_path: PathBuf,
    pub identity: usize,
    pub clothes_id: usize,
    pub camera_id: usize,
    pub parsing_path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRemap {
    pub identity: BTreeMap<usize, usize>,
    pub clothes: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    /// Directory that relative record paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<Sample>,
    /// Number of identities seen in the train split (classifier rows).
    /// Identities that only occur in query/gallery are numbered from here on.
    pub num_identities: usize,
    pub num_clothes: usize,
    /// Original-to-dense mapping, present when the source labels had gaps.
    pub remap: Option<LabelRemap>,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.records.iter().filter(move |s| s.split == split)
    }

    pub fn split_records(&self, split: Split) -> Vec<Sample> {
        self.split(split).cloned().collect()
    }

    /// Check the structural invariants of a manifest already in memory.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.records.is_empty() {
            problems.push("no records".to_string());
        }
        let train_ids: BTreeSet<usize> = self.split(Split::Train).map(|s| s.identity).collect();
        for id in 0..self.num_identities {
            if !train_ids.contains(&id) {
                problems.push(format!("identity {id} has no train record"));
            }
        }
        let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &self.records {
            if s.split == Split::Train && s.identity >= self.num_identities {
                problems.push(format!("train identity {} >= K={}", s.identity, self.num_identities));
            }
            if s.clothes_id >= self.num_clothes {
                problems.push(format!("clothes id {} >= K_c={}", s.clothes_id, self.num_clothes));
            }
            match owner.get(&s.clothes_id) {
                Some(&id) if id != s.identity => problems.push(format!(
                    "clothes id {} shared by identities {} and {}",
                    s.clothes_id, id, s.identity
                )),
                _ => {
                    owner.insert(s.clothes_id, s.identity);
                }
            }
        }
        problems.dedup();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

fn parse_line(path: &Path, lineno: usize, line: &str) -> Result<Sample> {
    let err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        msg,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(err(format!("expected 6 tab-separated fields, found {}", fields.len())));
    }
    let num = |i: usize, what: &str| {
        fields[i]
            .trim()
            .parse::<usize>()
            .map_err(|_| err(format!("{what} `{}` is not a non-negative integer", fields[i])))
    };
    Ok(Sample {
        image_path: PathBuf::from(fields[0]),
        identity: num(1, "identity")?,
        clothes_id: num(2, "clothes_id")?,
        camera_id: num(3, "camera_id")?,
        parsing_path: PathBuf::from(fields[4]),
        split: fields[5].trim().parse().map_err(err)?,
    })
}

/// Path of the label-mapping file written next to a manifest whose labels
/// had to be re-indexed.
pub fn remap_path(manifest_path: &Path) -> PathBuf {
    let mut s = manifest_path.as_os_str().to_owned();
    s.push(".labelmap.tsv");
    PathBuf::from(s)
}

/// Dense index: labels in `primary` first (sorted), then the rest (sorted).
fn dense_index(primary: &BTreeSet<usize>, all: &BTreeSet<usize>) -> BTreeMap<usize, usize> {
    primary
        .iter()
        .chain(all.difference(primary))
        .enumerate()
        .map(|(dense, &orig)| (orig, dense))
        .collect()
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        records.push(parse_line(path, i + 1, trimmed)?);
    }
    if records.is_empty() {
        return Err(Error::Validation(vec!["no records".into()]));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let missing: Vec<String> = records
        .iter()
        .flat_map(|s| [&s.image_path, &s.parsing_path])
        .map(|p| if p.is_absolute() { p.clone() } else { root.join(p) })
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(
            missing.into_iter().map(|p| format!("missing file {p}")).collect(),
        ));
    }

    let train_ids: BTreeSet<usize> = records
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| s.identity)
        .collect();
    if train_ids.is_empty() {
        return Err(Error::Validation(vec!["no train records".into()]));
    }
    let all_ids: BTreeSet<usize> = records.iter().map(|s| s.identity).collect();
    let train_clothes: BTreeSet<usize> = records
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| s.clothes_id)
        .collect();
    let all_clothes: BTreeSet<usize> = records.iter().map(|s| s.clothes_id).collect();
    let id_map = dense_index(&train_ids, &all_ids);
    let clothes_map = dense_index(&train_clothes, &all_clothes);
    let is_identity = |m: &BTreeMap<usize, usize>| m.iter().all(|(a, b)| a == b);

    let remap = if is_identity(&id_map) && is_identity(&clothes_map) {
        None
    } else {
        for s in &mut records {
            s.identity = id_map[&s.identity];
            s.clothes_id = clothes_map[&s.clothes_id];
        }
        let mut out = String::from("# kind\toriginal\tdense\n");
        for (a, b) in &id_map {
            out.push_str(&format!("identity\t{a}\t{b}\n"));
        }
        for (a, b) in &clothes_map {
            out.push_str(&format!("clothes\t{a}\t{b}\n"));
        }
        let map_path = remap_path(path);
        fs::write(&map_path, out).map_err(|e| Error::io(&map_path, e))?;
        log::info!("labels re-indexed densely; mapping written to {}", map_path.display());
        Some(LabelRemap {
            identity: id_map,
            clothes: clothes_map,
        })
    };

    let manifest = DatasetManifest {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        root,
        records,
        num_identities: train_ids.len(),
        num_clothes: all_clothes.len(),
        remap,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Read a label-mapping file written by [`load_manifest`].
pub fn load_remap(path: &Path) -> Result<LabelRemap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut remap = LabelRemap {
        identity: BTreeMap::new(),
        clothes: BTreeMap::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "malformed mapping line".into(),
        };
        if f.len() != 3 {
            return Err(bad());
        }
        let a: usize = f[1].parse().map_err(|_| bad())?;
        let b: usize = f[2].parse().map_err(|_| bad())?;
        match f[0] {
            "identity" => remap.identity.insert(a, b),
            "clothes" => remap.clothes.insert(a, b),
            _ => return Err(bad()),
        };
    }
    Ok(remap)
}

pub fn save_manifest(records: &[Sample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            s.image_path.display(),
            s.identity,
            s.clothes_id,
            s.camera_id,
            s.parsing_path.display(),
            s.split
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// 8-bit RGB image, row-major HWC.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        contract!(data.len() == height * width * 3, "image buffer size");
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn from_rgb8(img: image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.into_raw(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
    }

    /// Bilinear resize.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.size() {
            return self.clone();
        }
        let out = image::imageops::resize(&self.to_rgb8(), width as u32, height as u32, FilterType::Triangle);
        Self::from_rgb8(out)
    }
}

/// Single-channel label map with values in the 20-class vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsingMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl ParsingMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        contract!(labels.len() == height * width, "parsing map buffer size");
        if let Some(bad) = labels.iter().find(|&&l| l >= labels::COUNT) {
            return Err(Error::Contract(format!("parsing label {bad} outside the 20-class vocabulary")));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Nearest-neighbour resize; each output pixel copies the source pixel
    /// whose centre is closest to its own (ties go to the higher index).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.size() {
            return self.clone();
        }
        let src_index = |dst: usize, dst_n: usize, src_n: usize| ((2 * dst + 1) * src_n / (2 * dst_n)).min(src_n - 1);
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = src_index(y, height, self.height);
            for x in 0..width {
                labels.push(self.at(sy, src_index(x, width, self.width)));
            }
        }
        Self { height, width, labels }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("buffer matches dimensions")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let gray = img.to_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        Self::new(h, w, gray.into_raw()).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(Image::from_rgb8(img.to_rgb8()))
}

/// Load a record's image (bilinear) and parsing map (nearest neighbour) at
/// `target = (height, width)`.
pub fn load_sample(manifest: &DatasetManifest, sample: &Sample, target: (usize, usize)) -> Result<(Image, ParsingMap)> {
    let image = load_image(&manifest.resolve(&sample.image_path))?.resize(target.0, target.1);
    let parsing = ParsingMap::load_png(&manifest.resolve(&sample.parsing_path))?.resize_nearest(target.0, target.1);
    Ok((image, parsing))
}

/// Identity-balanced batch sampler: every batch holds `p` distinct train
/// identities with `k` records each.
#[derive(Clone, Debug)]
pub struct PkSampler {
    /// Record indices (into the manifest) per train identity.
    by_identity: Vec<(usize, Vec<usize>)>,
    pub p: usize,
    pub k: usize,
    num_train: usize,
}

impl PkSampler {
    pub fn new(manifest: &DatasetManifest, p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::Config("P and K_p must be positive".into()));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in manifest.records.iter().enumerate() {
            if s.split == Split::Train {
                groups.entry(s.identity).or_default().push(i);
            }
        }
        if p > groups.len() {
            return Err(Error::Config(format!(
                "P={p} exceeds the {} train identities",
                groups.len()
            )));
        }
        let num_train = groups.values().map(Vec::len).sum();
        Ok(Self {
            by_identity: groups.into_iter().collect(),
            p,
            k,
            num_train,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.num_train / self.batch_size()).max(1)
    }

    /// All batches of one epoch as manifest record indices, identity-major
    /// (`k` consecutive entries per identity). Depends only on `(seed, epoch)`.
    pub fn epoch(&self, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = stream_rng(seed, "pk-sampler", &[epoch as u64]);
        (0..self.batches_per_epoch())
            .map(|_| {
                let chosen: Vec<&(usize, Vec<usize>)> =
                    self.by_identity.choose_multiple(&mut rng, self.p).collect();
                let mut batch = Vec::with_capacity(self.batch_size());
                for (_, members) in chosen {
                    if members.len() >= self.k {
                        batch.extend(members.choose_multiple(&mut rng, self.k).copied());
                    } else {
                        for _ in 0..self.k {
                            batch.push(members[rng.random_range(0..members.len())]);
                        }
                    }
                }
                batch
            })
            .collect()
    }
}

/// One epoch of PK batches as owned records.
pub fn make_pk_batches(
    manifest: &DatasetManifest,
    p: usize,
    k: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<Sample>> + '_> {
    let sampler = PkSampler::new(manifest, p, k)?;
    Ok(sampler
        .epoch(seed, 0)
        .into_iter()
        .map(move |b| b.into_iter().map(|i| manifest.records[i].clone()).collect()))
}
