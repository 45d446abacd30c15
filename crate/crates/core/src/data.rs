//! Dataset manifests, tile loading, dense crop scoring, seeded splits and a
//! synthetic blur-ramp generator.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{EvalReport, SamplePrediction};
use crate::model::{ModelParams, SharpnessScore};
use crate::tensor::ImageTensor;
use crate::{CROP_SIZE, DENSE_STRIDE};

/// Largest absolute z-level in a focal-stack dataset.
pub const MAX_ZLEVEL: f64 = 14.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    /// Absolute z-level in `0..=14`; 0 is in focus.
    ZLevel,
    /// 1 = in focus, 0 = out of focus.
    Binary,
}

impl LabelKind {
    pub fn name(self) -> &'static str {
        match self {
            LabelKind::ZLevel => "Z_LEVEL",
            LabelKind::Binary => "BINARY",
        }
    }

    fn check(self, label: f64) -> std::result::Result<(), String> {
        match self {
            LabelKind::ZLevel if label.fract() != 0.0 || !(0.0..=MAX_ZLEVEL).contains(&label) => {
                Err(format!("z-level {label} is not an integer in [0, 14]"))
            }
            LabelKind::Binary if label != 0.0 && label != 1.0 => {
                Err(format!("binary label {label} is not 0 or 1"))
            }
            _ => Ok(()),
        }
    }

    /// Metric class for a stored label; `true` means blurry.
    ///
    /// Z-levels above `sharp_max` are blurry. Binary manifests mark in-focus
    /// tiles with 1, so the class is inverted.
    pub fn is_blurry(self, label: f64, sharp_max: i64) -> bool {
        match self {
            LabelKind::ZLevel => label > sharp_max as f64,
            LabelKind::Binary => label == 0.0,
        }
    }
}

impl std::str::FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Z_LEVEL" => Ok(LabelKind::ZLevel),
            "BINARY" => Ok(LabelKind::Binary),
            other => Err(Error::Argument(format!("unknown manifest kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub label: f64,
    pub tag: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub kind: LabelKind,
    pub records: Vec<SampleRecord>,
    pub source: String,
    /// Directory relative image paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(kind: LabelKind, source: impl Into<String>) -> Self {
        Self {
            kind,
            records: Vec::new(),
            source: source.into(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        let p = Path::new(&record.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn with_records(&self, records: Vec<SampleRecord>) -> Self {
        Self {
            kind: self.kind,
            records,
            source: self.source.clone(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Writes the manifest CSV. Image paths are written as stored.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "# kind={}", self.kind.name())?;
        if !self.source.is_empty() {
            writeln!(file, "# source={}", self.source)?;
        }
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(file);
        w.write_record(["id", "image_path", "label", "tag"])?;
        for r in &self.records {
            w.write_record([
                r.id.as_str(),
                r.image_path.as_str(),
                &format_label(r.label),
                r.tag.as_deref().unwrap_or(""),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn format_label(label: f64) -> String {
    if label.fract() == 0.0 {
        format!("{}", label as i64)
    } else {
        label.to_string()
    }
}

/// Parses a manifest:
///
/// ```text
/// # kind=Z_LEVEL
/// id,image_path,label,tag
/// fp_0001,tiles/fp_0001.png,3,HE
/// ```
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let parse_err = |line: u64, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };

    let mut kind = None;
    let mut source = String::new();
    for (i, line) in text.lines().enumerate() {
        let Some(comment) = line.trim().strip_prefix('#') else {
            if !line.trim().is_empty() {
                break;
            }
            continue;
        };
        let comment = comment.trim();
        if let Some(k) = comment.strip_prefix("kind=") {
            kind = Some(
                k.parse::<LabelKind>()
                    .map_err(|e| parse_err(i as u64 + 1, e.to_string()))?,
            );
        } else if let Some(s) = comment.strip_prefix("source=") {
            source = s.to_string();
        }
    }
    let kind = kind.ok_or_else(|| parse_err(1, "missing `# kind=Z_LEVEL|BINARY` line".into()))?;

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let header_line = text
        .lines()
        .position(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map_or(1, |i| i as u64 + 1);
    let column = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id_col), Some(path_col), Some(label_col)) =
        (column("id"), column("image_path"), column("label"))
    else {
        return Err(parse_err(
            header_line,
            format!("header must contain id,image_path,label[,tag], got {headers:?}"),
        ));
    };
    let tag_col = column("tag");

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |col: usize, name: &str| {
            row.get(col)
                .ok_or_else(|| parse_err(line, format!("missing {name} column")))
        };
        let id = field(id_col, "id")?.to_string();
        let image_path = field(path_col, "image_path")?.to_string();
        if image_path.is_empty() {
            return Err(parse_err(line, "empty image_path".into()));
        }
        let raw_label = field(label_col, "label")?;
        let label: f64 = raw_label
            .parse()
            .map_err(|_| parse_err(line, format!("non-numeric label {raw_label:?}")))?;
        kind.check(label).map_err(|e| parse_err(line, e))?;
        let tag = tag_col
            .and_then(|c| row.get(c))
            .filter(|t| !t.is_empty())
            .map(str::to_string);
        records.push(SampleRecord {
            id,
            image_path,
            label,
            tag,
        });
    }

    Ok(DatasetManifest {
        kind,
        records,
        source,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

/// An interleaved 8-bit RGB raster as decoded from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8Tile {
    pub height: usize,
    pub width: usize,
    pub bytes: Vec<u8>,
}

impl Rgb8Tile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        Ok(Self {
            height: img.height() as usize,
            width: img.width() as usize,
            bytes: img.into_raw(),
        })
    }

    pub fn to_tensor(&self) -> Result<ImageTensor> {
        ImageTensor::from_u8(self.height, self.width, 3, &self.bytes)
    }
}

pub fn load_tile(path: impl AsRef<Path>) -> Result<ImageTensor> {
    Rgb8Tile::load(path)?.to_tensor()
}

/// Writes an RGB or grayscale tensor as an 8-bit image; format from extension.
pub fn save_tile(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    match image.channels() {
        3 => image::RgbImage::from_raw(w, h, image.to_u8())
            .expect("buffer size matches")
            .save(path)?,
        1 => image::GrayImage::from_raw(w, h, image.to_u8())
            .expect("buffer size matches")
            .save(path)?,
        c => {
            return Err(Error::Shape(format!(
                "can only save 1- or 3-channel images, got {c}"
            )))
        }
    }
    Ok(())
}

/// A decoded tile with its ground truth.
#[derive(Clone, Debug)]
pub struct LabeledTile {
    pub id: String,
    pub image: ImageTensor,
    pub label: f64,
}

pub fn load_tiles(manifest: &DatasetManifest) -> Result<Vec<LabeledTile>> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            Ok(LabeledTile {
                id: r.id.clone(),
                image: load_tile(manifest.resolve(r))?,
                label: r.label,
            })
        })
        .collect()
}

/// Crop offsets along one axis: `0, stride, 2·stride, …` while the crop fits,
/// plus a final offset `len − crop` if the regular grid leaves a remainder.
pub fn crop_positions(len: usize, crop: usize, stride: usize) -> Result<Vec<usize>> {
    if crop == 0 || stride == 0 {
        return Err(Error::Argument("crop size and stride must be positive".into()));
    }
    if len < crop {
        return Err(Error::Dimension(format!(
            "tile side {len} is smaller than the {crop} crop"
        )));
    }
    let mut positions: Vec<usize> = (0..=(len - crop)).step_by(stride).collect();
    let last = *positions.last().expect("offset 0 always fits");
    if last + crop < len {
        positions.push(len - crop);
    }
    Ok(positions)
}

/// Per-crop scores of a dense sampling pass, row-major over the crop lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct CropScores {
    pub row_offsets: Vec<usize>,
    pub col_offsets: Vec<usize>,
    pub scores: Vec<f64>,
}

impl CropScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Arithmetic mean, summed sequentially in lattice order.
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

/// Scores every dense crop of `tile` with `score(tile, top, left)`.
///
/// Crops fan out over `pool` when given; results are gathered in lattice order
/// either way, so the output does not depend on the thread count.
pub fn score_crops_with<F>(
    tile: &ImageTensor,
    pool: Option<&rayon::ThreadPool>,
    score: F,
) -> Result<CropScores>
where
    F: Fn(&ImageTensor, usize, usize) -> Result<f64> + Sync,
{
    let row_offsets = crop_positions(tile.height(), CROP_SIZE, DENSE_STRIDE)?;
    let col_offsets = crop_positions(tile.width(), CROP_SIZE, DENSE_STRIDE)?;
    let anchors: Vec<(usize, usize)> = row_offsets
        .iter()
        .flat_map(|&r| col_offsets.iter().map(move |&c| (r, c)))
        .collect();
    let scores = match pool {
        Some(pool) => pool.install(|| {
            anchors
                .par_iter()
                .map(|&(r, c)| score(tile, r, c))
                .collect::<Result<Vec<_>>>()
        })?,
        None => anchors
            .iter()
            .map(|&(r, c)| score(tile, r, c))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(CropScores {
        row_offsets,
        col_offsets,
        scores,
    })
}

pub fn score_crops(
    params: &ModelParams,
    tile: &ImageTensor,
    pool: Option<&rayon::ThreadPool>,
) -> Result<CropScores> {
    if tile.channels() != 3 {
        return Err(Error::Shape(format!(
            "tiles must be RGB, got {} channels",
            tile.channels()
        )));
    }
    score_crops_with(tile, pool, |img, top, left| {
        Ok(params
            .score_region(img, top, left, CROP_SIZE, CROP_SIZE)?
            .value)
    })
}

/// Tile score: mean of the model's scores over all dense 235×235 crops taken
/// at stride 128, with the last row/column of crops clamped to the border.
pub fn dense_score(params: &ModelParams, tile: &ImageTensor) -> Result<SharpnessScore> {
    dense_score_in(params, tile, None).map(|(s, _)| s)
}

/// [`dense_score`] on an optional thread pool; also returns the crop count.
pub fn dense_score_in(
    params: &ModelParams,
    tile: &ImageTensor,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(SharpnessScore, usize)> {
    let crops = score_crops(params, tile, pool)?;
    Ok((SharpnessScore { value: crops.mean() }, crops.len()))
}

/// Scores tiles densely and computes all metrics against their labels.
pub fn evaluate(
    params: &ModelParams,
    tiles: &[LabeledTile],
    kind: LabelKind,
    sharp_max: i64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<EvalReport> {
    let score_one = |t: &LabeledTile| -> Result<SamplePrediction> {
        Ok(SamplePrediction {
            id: t.id.clone(),
            prediction: dense_score(params, &t.image)?.value,
            label: t.label,
            positive: kind.is_blurry(t.label, sharp_max),
        })
    };
    let samples = match pool {
        Some(pool) => pool.install(|| tiles.par_iter().map(score_one).collect::<Result<Vec<_>>>())?,
        None => tiles.iter().map(score_one).collect::<Result<Vec<_>>>()?,
    };
    Ok(EvalReport::from_samples(samples))
}

/// Shuffles `0..n` with a seeded generator and cuts it into contiguous parts
/// sized by `fractions` (largest-remainder rounding, every part with a
/// positive fraction gets at least one index).
pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::Argument(format!("invalid split fractions {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }
    let needed = fractions.iter().filter(|&&f| f > 0.0).count();
    if n < needed {
        return Err(Error::Argument(format!(
            "{n} records cannot fill {needed} partitions"
        )));
    }

    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..fractions.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in by_remainder.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    for i in 0..sizes.len() {
        if fractions[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..sizes.len()).max_by_key(|&j| (sizes[j], usize::MAX - j)).unwrap();
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        parts.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(parts)
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.6, 0.2, 0.2];

/// Seeded train / validation / test partition of a manifest.
pub fn split_dataset(
    manifest: &DatasetManifest,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[DatasetManifest; 3]> {
    let parts = split_indices(manifest.len(), &fractions, seed)?;
    let pick = |idx: &[usize]| {
        manifest.with_records(idx.iter().map(|&i| manifest.records[i].clone()).collect())
    };
    Ok([pick(&parts[0]), pick(&parts[1]), pick(&parts[2])])
}

/// Normalized 1D Gaussian truncated at `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with edge replication. `sigma = 0` returns the input.
pub fn gaussian_blur(image: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Argument(format!("invalid blur sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as isize;
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;

    let mut horizontal = vec![0.0f64; h * w * c];
    for r in 0..h {
        for col in 0..w {
            for k in 0..c {
                let mut acc = 0.0;
                for (t, &wt) in taps.iter().enumerate() {
                    let x = clamp(col as isize + t as isize - radius, w);
                    acc += wt * f64::from(image.get(r, x, k));
                }
                horizontal[(r * w + col) * c + k] = acc;
            }
        }
    }
    let mut out = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            for k in 0..c {
                let mut acc = 0.0;
                for (t, &wt) in taps.iter().enumerate() {
                    let y = clamp(r as isize + t as isize - radius, h);
                    acc += wt * horizontal[(y * w + col) * c + k];
                }
                out.push(acc as f32);
            }
        }
    }
    ImageTensor::new(h, w, c, out)
}

/// Seeded tissue-like RGB textures: a stained background with fine noise and
/// scattered dark nuclei-like blobs, quantized to 8 bits.
pub fn procedural_textures(count: usize, size: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    if count == 0 || size == 0 {
        return Err(Error::Argument("need at least one texture of positive size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let background = [
                rng.gen_range(0.75..0.95f32),
                rng.gen_range(0.55..0.8f32),
                rng.gen_range(0.7..0.9f32),
            ];
            let stain = [
                rng.gen_range(0.2..0.5f32),
                rng.gen_range(0.05..0.3f32),
                rng.gen_range(0.35..0.6f32),
            ];
            let mut img = ImageTensor::zeros(size, size, 3)?;
            for v in img.data_mut().chunks_exact_mut(3) {
                let grain: f32 = rng.gen_range(-0.06..0.06);
                for k in 0..3 {
                    v[k] = background[k] + grain;
                }
            }
            let blobs = size * size / rng.gen_range(150..400);
            for _ in 0..blobs {
                let cy = rng.gen_range(0.0..size as f32);
                let cx = rng.gen_range(0.0..size as f32);
                let radius: f32 = rng.gen_range(1.5..6.0);
                let shade: f32 = rng.gen_range(0.7..1.2);
                let r0 = (cy - radius).floor().max(0.0) as usize;
                let r1 = ((cy + radius).ceil() as usize).min(size - 1);
                let c0 = (cx - radius).floor().max(0.0) as usize;
                let c1 = ((cx + radius).ceil() as usize).min(size - 1);
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        let (dy, dx) = (r as f32 - cy, c as f32 - cx);
                        if dy * dy + dx * dx <= radius * radius {
                            for (k, s) in stain.iter().enumerate() {
                                img.set(r, c, k, s * shade);
                            }
                        }
                    }
                }
            }
            let bytes = img.to_u8();
            ImageTensor::from_u8(size, size, 3, &bytes)
        })
        .collect()
}

/// A generated blur-ramp dataset held in memory.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    /// Records reference `<id>.png`; labels are sigma indices.
    pub manifest: DatasetManifest,
    pub images: Vec<ImageTensor>,
    pub sigmas: Vec<f64>,
}

impl SynthDataset {
    pub fn tiles(&self) -> Vec<LabeledTile> {
        self.manifest
            .records
            .iter()
            .zip(&self.images)
            .map(|(r, img)| LabeledTile {
                id: r.id.clone(),
                image: img.clone(),
                label: r.label,
            })
            .collect()
    }

    /// Writes every image as PNG plus `manifest.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (r, img) in self.manifest.records.iter().zip(&self.images) {
            save_tile(img, dir.join(&r.image_path))?;
        }
        let path = dir.join("manifest.csv");
        self.manifest.write(&path)?;
        Ok(path)
    }
}

/// Blurs every texture with every sigma. Record `t<texture>_s<index>` has
/// label equal to the sigma index, so labels behave like z-levels.
pub fn synth_blur_dataset(textures: &[ImageTensor], sigmas: &[f64]) -> Result<SynthDataset> {
    if textures.is_empty() || sigmas.is_empty() {
        return Err(Error::Argument("need at least one texture and one sigma".into()));
    }
    if sigmas.iter().any(|s| !(*s >= 0.0)) || sigmas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Argument(format!(
            "sigmas must be non-negative and ascending, got {sigmas:?}"
        )));
    }
    if sigmas.len() as f64 > MAX_ZLEVEL + 1.0 {
        return Err(Error::Argument(format!(
            "at most {} sigma levels fit the z-level label range",
            MAX_ZLEVEL + 1.0
        )));
    }
    let mut manifest = DatasetManifest::new(LabelKind::ZLevel, "synthetic-blur");
    let mut images = Vec::with_capacity(textures.len() * sigmas.len());
    for (t, texture) in textures.iter().enumerate() {
        for (s, &sigma) in sigmas.iter().enumerate() {
            let id = format!("t{t:03}_s{s:02}");
            images.push(gaussian_blur(texture, sigma)?);
            manifest.records.push(SampleRecord {
                image_path: format!("{id}.png"),
                id,
                label: s as f64,
                tag: Some(format!("texture{t:03}")),
            });
        }
    }
    Ok(SynthDataset {
        manifest,
        images,
        sigmas: sigmas.to_vec(),
    })
}
