//! The counting-patches dataset, pixel normalization and binary pixmap I/O.
//!
//! Each image is a `g x g` grid of uniformly colored square patches. `n` of
//! them are red and the rest draw from six distractor colors; the label is
//! `n`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::maskgen::SaliencyMap;
use crate::numerics::Tensor;
use crate::{Error, Result};

pub type Rgb = [u8; 3];

pub const RED: Rgb = [230, 25, 25];
pub const DISTRACTORS: [Rgb; 6] = [
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [70, 240, 240],
    [240, 50, 230],
    [255, 255, 255],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Patches per side.
    pub grid: usize,
    /// Pixels per patch side.
    pub patch_px: usize,
    pub red: Rgb,
    pub distractors: Vec<Rgb>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            grid: 3,
            patch_px: 16,
            red: RED,
            distractors: DISTRACTORS.to_vec(),
        }
    }
}

impl GridSpec {
    pub fn image_size(&self) -> usize {
        self.grid * self.patch_px
    }

    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn n_classes(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.patch_px == 0 {
            return Err(Error::Config("grid and patch size must be positive".into()));
        }
        if self.distractors.is_empty() {
            return Err(Error::Config("palette needs at least one distractor".into()));
        }
        let distinct: BTreeSet<Rgb> = self.distractors.iter().copied().collect();
        if distinct.len() != self.distractors.len() || distinct.contains(&self.red) {
            return Err(Error::Config("palette colors must be pairwise distinct and differ from red".into()));
        }
        Ok(())
    }
}

/// Raw RGB image with its red-patch ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImage {
    pub size: usize,
    /// Row-major `size x size x 3`.
    pub pixels: Vec<u8>,
    pub label: usize,
    /// Row-major patch indices, ascending.
    pub red_set: Vec<usize>,
}

impl LabeledImage {
    /// Patch indices whose pixels are all exactly `color`.
    pub fn patches_of_color(&self, spec: &GridSpec, color: Rgb) -> Vec<usize> {
        let p = spec.patch_px;
        (0..spec.n_patches())
            .filter(|&k| {
                let (r, c) = (k / spec.grid, k % spec.grid);
                (r * p..(r + 1) * p).all(|y| {
                    (c * p..(c + 1) * p).all(|x| {
                        let o = (y * self.size + x) * 3;
                        self.pixels[o..o + 3] == color
                    })
                })
            })
            .collect()
    }
}

/// Deterministic stream for image `index` of a split.
fn image_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn render(spec: &GridSpec, colors: &[Rgb]) -> Vec<u8> {
    let size = spec.image_size();
    let mut pixels = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let k = (y / spec.patch_px) * spec.grid + x / spec.patch_px;
            let o = (y * size + x) * 3;
            pixels[o..o + 3].copy_from_slice(&colors[k]);
        }
    }
    pixels
}

fn gen_one(spec: &GridSpec, rng: &mut ChaCha8Rng) -> LabeledImage {
    let n_patches = spec.n_patches();
    let label = rng.gen_range(0..=n_patches);
    let mut red_set = index::sample(rng, n_patches, label).into_vec();
    red_set.sort_unstable();
    let mut colors = Vec::with_capacity(n_patches);
    for k in 0..n_patches {
        if red_set.binary_search(&k).is_ok() {
            colors.push(spec.red);
        } else {
            colors.push(spec.distractors[rng.gen_range(0..spec.distractors.len())]);
        }
    }
    LabeledImage {
        size: spec.image_size(),
        pixels: render(spec, &colors),
        label,
        red_set,
    }
}

/// `count` images; image `i` depends only on `(seed, i)`.
pub fn gen_counting_dataset(seed: u64, count: usize, spec: &GridSpec) -> Result<Vec<LabeledImage>> {
    gen_stream(seed, 0, count, spec)
}

fn gen_stream(seed: u64, offset: u64, count: usize, spec: &GridSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset count must be positive".into()));
    }
    Ok((0..count as u64)
        .map(|i| gen_one(spec, &mut image_rng(seed, offset + i)))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Eval,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Eval => "eval",
        }
    }

    fn stream_base(self) -> u64 {
        (self as u64) << 40
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub eval: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 5000,
            val: 1000,
            eval: 1000,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.train,
            SplitName::Val => self.val,
            SplitName::Eval => self.eval,
        }
    }
}

/// Generated train/val/eval splits sharing one seed, each with its own stream.
#[derive(Clone, Debug, PartialEq)]
pub struct CountingData {
    pub spec: GridSpec,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub eval: Vec<LabeledImage>,
}

impl CountingData {
    pub fn generate(seed: u64, sizes: SplitSizes, spec: &GridSpec) -> Result<Self> {
        let split = |s: SplitName| gen_stream(seed, s.stream_base(), sizes.get(s), spec);
        Ok(Self {
            spec: spec.clone(),
            train: split(SplitName::Train)?,
            val: split(SplitName::Val)?,
            eval: split(SplitName::Eval)?,
        })
    }

    pub fn split(&self, split: SplitName) -> &[LabeledImage] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Eval => &self.eval,
        }
    }
}

pub fn normalize(byte: u8) -> f32 {
    (byte as f32 / 255.0 - 0.5) / 0.5
}

pub fn denormalize(value: f32) -> u8 {
    ((value * 0.5 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Normalized images `[B, H, W, 3]` and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl TensorSet {
    pub fn from_images(images: &[LabeledImage]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Config("empty image set".into()))?;
        let size = first.size;
        let mut data = Vec::with_capacity(images.len() * size * size * 3);
        for img in images {
            if img.size != size {
                return Err(Error::Dimension(format!("mixed image sizes {size} and {}", img.size)));
            }
            data.extend(img.pixels.iter().map(|&b| normalize(b)));
        }
        Ok(Self {
            images: Tensor::new(&[images.len(), size, size, 3], data)?,
            labels: images.iter().map(|i| i.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_numel(&self) -> usize {
        self.images.numel() / self.len()
    }

    /// Images at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        Ok(self.images.select_rows(indices)?)
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Per-channel mean of the normalized pixels.
    pub fn mean_color(&self) -> [f32; 3] {
        let mut sum = [0f64; 3];
        for px in self.images.data().chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
            }
        }
        let n = (self.images.numel() / 3) as f64;
        sum.map(|s| (s / n) as f32)
    }
}

/// Binary pixmap, `channels` 1 (P5) or 3 (P6), maxval 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Pixmap {
    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::with_channels(width, height, 3, data)
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::with_channels(width, height, 1, data)
    }

    fn with_channels(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{} bytes for a {width}x{height}x{channels} pixmap",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor {
            bytes,
            pos: 0,
            token_start: 0,
        };
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(cur.error("expected magic P5 or P6")),
        };
        cur.pos = 2;
        let width = cur.header_number()?;
        let height = cur.header_number()?;
        let maxval = cur.header_number()?;
        if maxval != 255 {
            cur.pos = cur.token_start;
            return Err(cur.error(&format!("unsupported maxval {maxval}")));
        }
        if width == 0 || height == 0 {
            return Err(cur.error("zero image dimension"));
        }
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(cur.error("expected one whitespace byte before pixel data")),
        }
        let need = width * height * channels;
        let body = &bytes[cur.pos..];
        if body.len() != need {
            return Err(cur.error(&format!("pixel data has {} bytes, expected {need}", body.len())));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: body.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    token_start: usize,
}

impl Cursor<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn header_number(&mut self) -> Result<usize> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(self.error("expected whitespace in header"));
        }
        let start = self.pos;
        self.token_start = start;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.error("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                message: "number out of range".into(),
            })
    }
}

impl LabeledImage {
    pub fn to_pixmap(&self) -> Pixmap {
        Pixmap::rgb(self.size, self.size, self.pixels.clone()).expect("square RGB image")
    }
}

/// `[0, 1] -> [0, 255]` with round-half-up.
pub fn saliency_byte(value: f64) -> u8 {
    (value.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn saliency_pixmap(map: &SaliencyMap) -> Pixmap {
    Pixmap::gray(map.size, map.size, map.values.iter().map(|&v| saliency_byte(v)).collect()).expect("square map")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
    pub red_set: Vec<usize>,
}

/// Writes `dir/<split>/NNNNN.ppm` and `dir/<split>.jsonl`.
pub fn write_split(dir: &Path, split: SplitName, images: &[LabeledImage]) -> Result<()> {
    let sub = dir.join(split.as_str());
    fs::create_dir_all(&sub)?;
    let mut manifest = fs::File::create(dir.join(format!("{}.jsonl", split.as_str())))?;
    for (i, img) in images.iter().enumerate() {
        let file = format!("{}/{i:05}.ppm", split.as_str());
        img.to_pixmap().save(&dir.join(&file))?;
        let entry = ManifestEntry {
            file,
            label: img.label,
            red_set: img.red_set.clone(),
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_split(dir: &Path, split: SplitName) -> Result<Vec<LabeledImage>> {
    let manifest = BufReader::new(fs::File::open(dir.join(format!("{}.jsonl", split.as_str())))?);
    let mut out = Vec::new();
    for line in manifest.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)?;
        let pix = Pixmap::load(&dir.join(&entry.file))?;
        if pix.channels != 3 || pix.width != pix.height {
            return Err(Error::Dimension(format!("{}: expected a square RGB image", entry.file)));
        }
        out.push(LabeledImage {
            size: pix.width,
            pixels: pix.data,
            label: entry.label,
            red_set: entry.red_set,
        });
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, data: &CountingData) -> Result<()> {
    for split in SplitName::ALL {
        write_split(dir, split, data.split(split))?;
    }
    fs::write(dir.join("grid.json"), serde_json::to_vec_pretty(&data.spec)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<CountingData> {
    let spec: GridSpec = serde_json::from_slice(&fs::read(dir.join("grid.json"))?)?;
    Ok(CountingData {
        train: read_split(dir, SplitName::Train)?,
        val: read_split(dir, SplitName::Val)?,
        eval: read_split(dir, SplitName::Eval)?,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_full_counts() {
        let spec = GridSpec::default();
        let images = gen_counting_dataset(3, 400, &spec).unwrap();
        let empty = images.iter().find(|i| i.label == 0).unwrap();
        assert!(empty.pixels.chunks(3).all(|px| px != RED));
        let full = images.iter().find(|i| i.label == 9).unwrap();
        assert!(full.pixels.chunks(3).all(|px| px == RED));
        assert_eq!(full.size, 48);
    }

    #[test]
    fn ground_truth_matches_pixels() {
        let spec = GridSpec::default();
        for img in gen_counting_dataset(11, 300, &spec).unwrap() {
            assert_eq!(img.patches_of_color(&spec, spec.red), img.red_set);
            assert_eq!(img.red_set.len(), img.label);
        }
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let spec = GridSpec::default();
        let a = gen_counting_dataset(5, 50, &spec).unwrap();
        let b = gen_counting_dataset(5, 80, &spec).unwrap();
        assert_eq!(a[..], b[..50]);
        assert_ne!(a, gen_counting_dataset(6, 50, &spec).unwrap());
    }

    #[test]
    fn splits_are_disjoint_streams() {
        let sizes = SplitSizes {
            train: 20,
            val: 20,
            eval: 20,
        };
        let d = CountingData::generate(1, sizes, &GridSpec::default()).unwrap();
        assert_ne!(d.train, d.val);
        assert_ne!(d.val, d.eval);
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(matches!(
            gen_counting_dataset(0, 0, &GridSpec::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn palette_validation() {
        let mut spec = GridSpec::default();
        spec.distractors[2] = RED;
        assert!(spec.validate().is_err());
        spec.distractors[2] = spec.distractors[0];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn normalization_endpoints_and_round_trip() {
        assert_eq!(normalize(255), 1.0);
        assert_eq!(normalize(0), -1.0);
        for b in 0..=255u8 {
            assert_eq!(denormalize(normalize(b)), b);
        }
    }

    #[test]
    fn one_pixel_p6_body() {
        let pix = Pixmap::rgb(1, 1, vec![255, 0, 0]).unwrap();
        let bytes = pix.encode();
        assert_eq!(&bytes[bytes.len() - 3..], &[0xFF, 0x00, 0x00]);
        assert_eq!(Pixmap::decode(&bytes).unwrap(), pix);
    }

    #[test]
    fn saliency_rounds_half_up() {
        assert_eq!(saliency_byte(0.5), 128);
        assert_eq!(saliency_byte(0.0), 0);
        assert_eq!(saliency_byte(1.0), 255);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5 # a comment\n2 1\n255\n\x01\x02";
        let pix = Pixmap::decode(bytes).unwrap();
        assert_eq!((pix.width, pix.height, pix.channels), (2, 1, 1));
        assert_eq!(pix.data, vec![1, 2]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let cases: [(&[u8], usize); 5] = [
            (b"P3\n1 1\n255\n\x00", 0),
            (b"P6\nx 1\n255\n\x00\x00\x00", 3),
            (b"P6\n1 1\n65535\n\x00\x00\x00", 7),
            (b"P6\n1 1\n255\n\x00", 11),
            (b"P61 1\n255\n\x00\x00\x00", 2),
        ];
        for (bytes, offset) in cases {
            match Pixmap::decode(bytes) {
                Err(Error::Parse { offset: got, .. }) => assert_eq!(got, offset, "{:?}", String::from_utf8_lossy(bytes)),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn tensor_set_mean_color() {
        let spec = GridSpec {
            grid: 1,
            patch_px: 2,
            ..GridSpec::default()
        };
        let images = gen_counting_dataset(0, 10, &spec).unwrap();
        let set = TensorSet::from_images(&images).unwrap();
        let mean = set.mean_color();
        let expected: Vec<f64> = (0..3)
            .map(|c| images.iter().map(|i| normalize(i.pixels[c]) as f64).sum::<f64>() / 10.0)
            .collect();
        for c in 0..3 {
            assert!((mean[c] as f64 - expected[c]).abs() < 1e-6);
        }
        let picked = set.gather(&[3, 1]).unwrap();
        assert_eq!(picked.shape(), &[2, 2, 2, 3]);
        assert_eq!(set.labels_at(&[3, 1]), vec![images[3].label, images[1].label]);
    }
}
