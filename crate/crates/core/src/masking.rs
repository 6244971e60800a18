//! Clothes masks, shielding images and clothes images.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::data::{Image, ParsingMap};
use crate::error::{contract, Error, Result};

pub const FILL: u8 = 255;

const LABELS_KEY: &str = "clothes_labels";

/// 1 marks a clothes-irrelevant pixel, 0 a clothes pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        contract!(values.len() == height * width, "mask buffer size");
        contract!(values.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Ok(Self { height, width, values })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    /// Number of clothes pixels.
    pub fn clothes_pixels(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }
}

pub fn build_clothes_mask(parsing: &ParsingMap, clothes_labels: &BTreeSet<u8>) -> BinaryMask {
    BinaryMask {
        height: parsing.height,
        width: parsing.width,
        values: parsing
            .labels
            .iter()
            .map(|l| u8::from(!clothes_labels.contains(l)))
            .collect(),
    }
}

/// Per-pixel blend over an interleaved buffer: where `mask == keep_where`
/// the source value is kept, elsewhere it becomes [`FILL`].
pub fn fill_masked(pixels: &[u8], channels: usize, mask: &BinaryMask, keep_where: u8) -> Result<Vec<u8>> {
    contract!(
        channels > 0 && pixels.len() == mask.values.len() * channels,
        "image has {} values, mask expects {}x{}x{}",
        pixels.len(),
        mask.height,
        mask.width,
        channels
    );
    Ok(pixels
        .chunks_exact(channels)
        .zip(&mask.values)
        .flat_map(|(px, &m)| px.iter().map(move |&v| if m == keep_where { v } else { FILL }))
        .collect())
}

fn check_shape(image: &Image, mask: &BinaryMask) -> Result<()> {
    contract!(
        image.size() == mask.size(),
        "image {:?} and mask {:?} differ in size",
        image.size(),
        mask.size()
    );
    Ok(())
}

/// Clothes pixels replaced by white.
pub fn make_shielding_image(image: &Image, mask: &BinaryMask) -> Result<Image> {
    check_shape(image, mask)?;
    Image::new(image.height, image.width, fill_masked(&image.data, 3, mask, 1)?)
}

/// Everything except clothes pixels replaced by white.
pub fn make_clothes_image(image: &Image, mask: &BinaryMask) -> Result<Image> {
    check_shape(image, mask)?;
    Image::new(image.height, image.width, fill_masked(&image.data, 3, mask, 0)?)
}

/// Sibling path of a parsing map where its mask is cached:
/// `<dir>/<stem>.<ext>` with `ext` defaulting to `mask.png`.
pub fn mask_cache_path(parsing_path: &Path, ext: &str) -> PathBuf {
    let stem = parsing_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parsing_path.with_file_name(format!("{stem}.{ext}"))
}

fn labels_text(labels: &BTreeSet<u8>) -> String {
    labels.iter().map(u8::to_string).collect::<Vec<_>>().join(",")
}

/// Write a mask as a 1-bit grayscale PNG tagged with the label set it was
/// built from.
pub fn save_mask(mask: &BinaryMask, clothes_labels: &BTreeSet<u8>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let io = |e: std::io::Error| Error::io(path, e);
    let enc_err = |e: png::EncodingError| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    {
        let file = File::create(&tmp).map_err(io)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), mask.width as u32, mask.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        enc.add_text_chunk(LABELS_KEY.into(), labels_text(clothes_labels)).map_err(enc_err)?;
        let mut writer = enc.write_header().map_err(enc_err)?;
        let stride = mask.width.div_ceil(8);
        let mut packed = vec![0u8; stride * mask.height];
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.at(y, x) == 1 {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        writer.write_image_data(&packed).map_err(enc_err)?;
        writer.finish().map_err(enc_err)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

/// Read a cached mask and the label set recorded with it.
pub fn load_mask(path: &Path) -> Result<(BinaryMask, Option<String>)> {
    let dec_err = |msg: String| Error::Decode {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| dec_err(e.to_string()))?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
        return Err(dec_err("mask must be 1-bit grayscale".into()));
    }
    let tag = info
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == LABELS_KEY)
        .map(|t| t.text.clone());
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| dec_err("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| dec_err(e.to_string()))?;
    let stride = frame.line_size;
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            values.push((buf[y * stride + x / 8] >> (7 - x % 8)) & 1);
        }
    }
    Ok((BinaryMask::new(h, w, values)?, tag))
}

/// Mask for `parsing`, served from the sibling cache file when it was built
/// from the same label set at the same size, rebuilt and rewritten otherwise.
pub fn cached_clothes_mask(
    parsing_path: &Path,
    parsing: &ParsingMap,
    clothes_labels: &BTreeSet<u8>,
    ext: &str,
) -> Result<BinaryMask> {
    let cache = mask_cache_path(parsing_path, ext);
    if let Ok((mask, Some(tag))) = load_mask(&cache) {
        if tag == labels_text(clothes_labels) && mask.size() == parsing.size() {
            return Ok(mask);
        }
    }
    let mask = build_clothes_mask(parsing, clothes_labels);
    if let Err(e) = save_mask(&mask, clothes_labels, &cache) {
        log::warn!("could not cache mask: {e}");
    }
    Ok(mask)
}
