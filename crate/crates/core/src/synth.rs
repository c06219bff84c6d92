//! Procedural 16×16 grayscale images: four in-distribution classes, four
//! visually disjoint out-of-distribution families, and the on-disk dataset
//! format that carries them between pipeline stages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ByteReader;
use crate::rng::{splitmix64, Rng};
use crate::tensor::Tensor;
use rand::SeedableRng;

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Foreground/background level before intensity jitter.
const AMPLITUDE: f32 = 0.75;
const MAX_SHIFT: i32 = 2;
const SCALE_RANGE: (f32, f32) = (0.8, 1.2);
const PIXEL_NOISE: f32 = 0.05;

pub const ID_TAG: &str = "id";
pub const OOD_PREFIX: &str = "ood:";

/// A single-channel 16×16 image with pixels in [−1, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pixels: Vec<f32>,
}

impl ImageGrid {
    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != IMAGE_PIXELS {
            return Err(Error::Dimension {
                op: "image",
                left: vec![IMAGE_SIDE, IMAGE_SIDE],
                right: vec![pixels.len()],
            });
        }
        if let Some(bad) = pixels.iter().find(|p| !(-1.0..=1.0).contains(*p)) {
            return Err(Error::domain(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(ImageGrid { pixels })
    }

    /// Clamps every value into [−1, 1]; non-finite values become 0.
    pub fn from_clamped(mut pixels: Vec<f32>) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_finite() { p.clamp(-1.0, 1.0) } else { 0.0 };
        }
        Self::new(pixels)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * IMAGE_SIDE + col]
    }

    /// The image as a `1×256` row.
    pub fn to_row(&self) -> Tensor {
        Tensor::matrix(1, IMAGE_PIXELS, self.pixels.clone()).expect("fixed image size")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    Disk,
    PlusCross,
    HorizontalStripes,
    Checkerboard,
    Ring,
    Triangle,
    VerticalStripes,
    UniformNoise,
}

/// In-distribution classes, indexed by class id.
pub const ID_CLASSES: [Pattern; 4] = [
    Pattern::Disk,
    Pattern::PlusCross,
    Pattern::HorizontalStripes,
    Pattern::Checkerboard,
];

pub const OOD_FAMILIES: [Pattern; 4] = [
    Pattern::Ring,
    Pattern::Triangle,
    Pattern::VerticalStripes,
    Pattern::UniformNoise,
];

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::Disk => "disk",
            Pattern::PlusCross => "plus-cross",
            Pattern::HorizontalStripes => "horizontal-stripes",
            Pattern::Checkerboard => "checkerboard",
            Pattern::Ring => "ring",
            Pattern::Triangle => "triangle",
            Pattern::VerticalStripes => "vertical-stripes",
            Pattern::UniformNoise => "uniform-noise",
        }
    }

    pub fn from_name(name: &str) -> Option<Pattern> {
        ID_CLASSES
            .iter()
            .chain(OOD_FAMILIES.iter())
            .copied()
            .find(|p| p.name() == name)
    }

    /// Foreground membership at integer template coordinates.
    fn covers(self, x: i32, y: i32) -> bool {
        let (cx, cy) = (x as f32 - 7.5, y as f32 - 7.5);
        let r2 = cx * cx + cy * cy;
        match self {
            Pattern::Disk => r2 <= 25.0,
            Pattern::PlusCross => {
                cx.abs() <= 1.5 || cy.abs() <= 1.5
            }
            Pattern::HorizontalStripes => y.div_euclid(4) % 2 == 0,
            Pattern::Checkerboard => (x.div_euclid(8) + y.div_euclid(8)) % 2 == 0,
            Pattern::Ring => (12.25..=42.25).contains(&r2),
            Pattern::Triangle => (2..=13).contains(&y) && cx.abs() <= (y - 2) as f32 * 0.5,
            Pattern::VerticalStripes => x.div_euclid(4) % 2 == 0,
            Pattern::UniformNoise => false,
        }
    }
}

/// Per-render perturbation: integer shift, intensity scale and pixel noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub dx: i32,
    pub dy: i32,
    pub scale: f32,
    pub noise_sigma: f32,
}

impl Jitter {
    pub fn none() -> Self {
        Jitter {
            dx: 0,
            dy: 0,
            scale: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn sample(rng: &mut Rng) -> Self {
        Jitter {
            dx: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            dy: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            noise_sigma: PIXEL_NOISE,
        }
    }
}

/// Renders a pattern under an explicit jitter; `rng` feeds the pixel noise
/// (and the base field of [`Pattern::UniformNoise`]).
pub fn render_with(pattern: Pattern, jitter: &Jitter, rng: &mut Rng) -> ImageGrid {
    let mut pixels = Vec::with_capacity(IMAGE_PIXELS);
    for row in 0..IMAGE_SIDE as i32 {
        for col in 0..IMAGE_SIDE as i32 {
            let base = if pattern == Pattern::UniformNoise {
                // Intensity scaling and shifts are meaningless for i.i.d. noise.
                rng.random_range(-1.0f32..=1.0)
            } else {
                let on = pattern.covers(col - jitter.dx, row - jitter.dy);
                let level = if on { AMPLITUDE } else { -AMPLITUDE };
                level * jitter.scale
            };
            let noise = if jitter.noise_sigma > 0.0 {
                let z: f32 = StandardNormal.sample(rng);
                z * jitter.noise_sigma
            } else {
                0.0
            };
            pixels.push((base + noise).clamp(-1.0, 1.0));
        }
    }
    ImageGrid { pixels }
}

fn render_seeded(pattern: Pattern, jitter_seed: u64) -> ImageGrid {
    let mut rng = Rng::seed_from_u64(jitter_seed);
    let jitter = Jitter::sample(&mut rng);
    render_with(pattern, &jitter, &mut rng)
}

/// Deterministic jittered render of in-distribution class `class_id`.
pub fn render_class(class_id: usize, jitter_seed: u64) -> Result<ImageGrid> {
    let pattern = ID_CLASSES.get(class_id).ok_or_else(|| {
        Error::domain(format!("class id {class_id} outside [0, {})", ID_CLASSES.len()))
    })?;
    Ok(render_seeded(*pattern, jitter_seed))
}

/// Deterministic jittered render of an out-of-distribution family.
pub fn render_ood(family: &str, jitter_seed: u64) -> Result<ImageGrid> {
    let pattern = OOD_FAMILIES
        .iter()
        .find(|p| p.name() == family)
        .ok_or_else(|| Error::domain(format!("unknown OOD family `{family}`")))?;
    Ok(render_seeded(*pattern, jitter_seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: ImageGrid,
    /// Class index for ID samples, −1 for OOD samples.
    pub class_id: i32,
    /// `"id"` or `"ood:<family>"`.
    pub family_tag: String,
}

impl LabeledSample {
    pub fn is_id(&self) -> bool {
        self.family_tag == ID_TAG
    }

    /// Family name without the `ood:` prefix, or `"id"`.
    pub fn family(&self) -> &str {
        self.family_tag.strip_prefix(OOD_PREFIX).unwrap_or(&self.family_tag)
    }
}

/// A sample together with its dataset-wide id.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub sample_id: u64,
    pub sample: LabeledSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Calibration, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calibration => "calibration",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Calibration => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub train_per_class: usize,
    pub calibration_per_class: usize,
    pub test_id_per_class: usize,
    pub test_ood_per_family: usize,
    pub classes: Vec<String>,
    pub families: Vec<String>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            name: "synth".into(),
            seed: 42,
            train_per_class: 100,
            calibration_per_class: 25,
            test_id_per_class: 50,
            test_ood_per_family: 200,
            classes: ID_CLASSES.iter().map(|p| p.name().to_string()).collect(),
            families: OOD_FAMILIES.iter().map(|p| p.name().to_string()).collect(),
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.train_per_class,
            self.calibration_per_class,
            self.test_id_per_class,
            self.test_ood_per_family,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("dataset counts must be positive".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid dataset name `{}`", self.name)));
        }
        if self.classes.is_empty() || self.families.is_empty() {
            return Err(Error::Config("class and family rosters must be non-empty".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if ID_CLASSES.get(i).map(|p| p.name()) != Some(c.as_str()) {
                return Err(Error::Config(format!(
                    "class roster entry {i} is `{c}`; classes must be a prefix of {:?}",
                    ID_CLASSES.map(|p| p.name())
                )));
            }
        }
        for f in &self.families {
            if !OOD_FAMILIES.iter().any(|p| p.name() == f) {
                return Err(Error::Config(format!("unknown OOD family `{f}`")));
            }
            if self.classes.contains(f) {
                return Err(Error::Config(format!("`{f}` is both an ID class and an OOD family")));
            }
        }
        let mut seen = self.families.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.families.len() {
            return Err(Error::Config("duplicate OOD family".into()));
        }
        Ok(())
    }

    pub fn split_len(&self, split: Split) -> usize {
        let k = self.classes.len();
        match split {
            Split::Train => k * self.train_per_class,
            Split::Calibration => k * self.calibration_per_class,
            Split::Test => k * self.test_id_per_class + self.families.len() * self.test_ood_per_family,
        }
    }

    /// Id of the first record of `split`; ids are contiguous across splits in
    /// train, calibration, test order.
    pub fn split_offset(&self, split: Split) -> u64 {
        Split::ALL
            .iter()
            .take_while(|&&s| s != split)
            .map(|&s| self.split_len(s) as u64)
            .sum()
    }

    pub fn split_path(&self, dir: &Path, split: Split) -> PathBuf {
        dir.join(format!("{}.{}.rds", self.name, split.name()))
    }

    pub fn manifest_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.manifest.json", self.name))
    }

    /// Jitter seed for the `index`-th render of `group` in `split`. Distinct
    /// (split, group, index) triples always give distinct seeds.
    pub fn jitter_seed(&self, split: Split, group: u64, index: u64) -> u64 {
        splitmix64(self.seed) ^ ((split.code() << 56) | (group << 40) | index)
    }

    /// Renders every record of a split in file order.
    pub fn render_split(&self, split: Split) -> Result<Vec<LabeledSample>> {
        let mut out = Vec::with_capacity(self.split_len(split));
        let per_class = match split {
            Split::Train => self.train_per_class,
            Split::Calibration => self.calibration_per_class,
            Split::Test => self.test_id_per_class,
        };
        for class_id in 0..self.classes.len() {
            for i in 0..per_class {
                let seed = self.jitter_seed(split, class_id as u64, i as u64);
                out.push(LabeledSample {
                    image: render_class(class_id, seed)?,
                    class_id: class_id as i32,
                    family_tag: ID_TAG.into(),
                });
            }
        }
        if split == Split::Test {
            for (f, family) in self.families.iter().enumerate() {
                for i in 0..self.test_ood_per_family {
                    let seed = self.jitter_seed(split, 16 + f as u64, i as u64);
                    out.push(LabeledSample {
                        image: render_ood(family, seed)?,
                        class_id: -1,
                        family_tag: format!("{OOD_PREFIX}{family}"),
                    });
                }
            }
        }
        Ok(out)
    }
}

const DATASET_MAGIC: &[u8; 4] = b"RDS1";

pub fn encode_records(samples: &[LabeledSample]) -> Result<Vec<u8>> {
    let count = u32::try_from(samples.len()).map_err(|_| Error::format("too many records"))?;
    let mut out = Vec::with_capacity(8 + samples.len() * (IMAGE_PIXELS * 4 + 16));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for s in samples {
        let tag = s.family_tag.as_bytes();
        let len = u8::try_from(tag.len()).map_err(|_| Error::format(format!("family tag too long: {}", s.family_tag)))?;
        out.push(len);
        out.extend_from_slice(tag);
        out.extend_from_slice(&s.class_id.to_le_bytes());
        for p in s.image.pixels() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<LabeledSample>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::format("bad dataset magic"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.take(1)?[0] as usize;
        let family_tag = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("family tag is not UTF-8"))?
            .to_string();
        let class_id = r.i32()?;
        let mut pixels = Vec::with_capacity(IMAGE_PIXELS);
        for _ in 0..IMAGE_PIXELS {
            pixels.push(r.f32()?);
        }
        let sample = LabeledSample {
            image: ImageGrid::new(pixels)?,
            class_id,
            family_tag,
        };
        if sample.is_id() != (sample.class_id >= 0) {
            return Err(Error::format(format!(
                "record tag `{}` inconsistent with class id {}",
                sample.family_tag, sample.class_id
            )));
        }
        out.push(sample);
    }
    if !r.is_done() {
        return Err(Error::format("trailing bytes after last dataset record"));
    }
    Ok(out)
}

/// Paths written by [`build_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub manifest: PathBuf,
    pub splits: Vec<(Split, PathBuf)>,
}

/// Renders all splits and writes them, plus the manifest JSON, into `dir`.
pub fn build_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<DatasetFiles> {
    manifest.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let path = manifest.split_path(dir, split);
        let bytes = encode_records(&manifest.render_split(split)?)?;
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        splits.push((split, path));
    }
    let manifest_path = manifest.manifest_path(dir);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(DatasetFiles {
        manifest: manifest_path,
        splits,
    })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    m.validate()?;
    Ok(m)
}

/// Dataset reader that counts every record it hands out, keyed by family tag,
/// so callers can prove which families a stage has seen.
#[derive(Debug)]
pub struct DatasetReader {
    dir: PathBuf,
    manifest: DatasetManifest,
    audit: BTreeMap<String, usize>,
}

impl DatasetReader {
    pub fn open(dir: &Path, manifest: DatasetManifest) -> Self {
        DatasetReader {
            dir: dir.to_path_buf(),
            manifest,
            audit: BTreeMap::new(),
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn read(&mut self, split: Split) -> Result<Vec<Record>> {
        let path = self.manifest.split_path(&self.dir, split);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let samples = decode_records(&bytes)?;
        if samples.len() != self.manifest.split_len(split) {
            return Err(Error::format(format!(
                "{} holds {} records, manifest expects {}",
                path.display(),
                samples.len(),
                self.manifest.split_len(split)
            )));
        }
        let offset = self.manifest.split_offset(split);
        Ok(samples
            .into_iter()
            .enumerate()
            .map(|(i, sample)| {
                *self.audit.entry(sample.family_tag.clone()).or_default() += 1;
                Record {
                    sample_id: offset + i as u64,
                    sample,
                }
            })
            .collect())
    }

    /// Records handed out so far, per family tag.
    pub fn audit(&self) -> &BTreeMap<String, usize> {
        &self.audit
    }
}
