//! Dataset ingestion, disjoint splits and query-construction perturbations.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

/// Stable identity of a record within its source dataset.
pub type PointId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Continuous,
    Binary,
    ImagePixel,
}

/// Channels-last image geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub kinds: Vec<FeatureKind>,
    pub image_shape: Option<ImageShape>,
    pub num_classes: usize,
}

impl FeatureSchema {
    pub fn image(shape: ImageShape, num_classes: usize) -> Self {
        Self {
            kinds: vec![FeatureKind::ImagePixel; shape.len()],
            image_shape: Some(shape),
            num_classes,
        }
    }

    pub fn tabular(kinds: Vec<FeatureKind>, num_classes: usize) -> Result<Self> {
        let s = Self {
            kinds,
            image_shape: None,
            num_classes,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::Schema("num_classes must be at least 1".into()));
        }
        let has_pixels = self.kinds.contains(&FeatureKind::ImagePixel);
        match self.image_shape {
            Some(shape) if shape.len() != self.kinds.len() => Err(Error::Schema(format!(
                "image shape {}x{}x{} does not match {} features",
                shape.height,
                shape.width,
                shape.channels,
                self.kinds.len()
            ))),
            None if has_pixels => Err(Error::Schema(
                "image-pixel features require an image shape".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.kinds.len()
    }

    pub fn has_kind(&self, kind: FeatureKind) -> bool {
        self.kinds.contains(&kind)
    }

    /// Per-coordinate bounds: unit range for pixels and binary features,
    /// empirical range for continuous ones.
    pub fn feature_box(&self, records: &[ExampleRecord]) -> Vec<(f64, f64)> {
        self.kinds
            .iter()
            .enumerate()
            .map(|(j, kind)| match kind {
                FeatureKind::Binary | FeatureKind::ImagePixel => (0.0, 1.0),
                FeatureKind::Continuous => {
                    let (lo, hi) = records
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                            (lo.min(r.x[j]), hi.max(r.x[j]))
                        });
                    if lo.is_finite() {
                        (lo, hi)
                    } else {
                        (0.0, 1.0)
                    }
                }
            })
            .collect()
    }

    /// Checks a record against the schema invariants.
    pub fn check(&self, r: &ExampleRecord) -> Result<()> {
        if r.x.len() != self.dim() {
            return Err(Error::Schema(format!(
                "record {} has {} features, schema has {}",
                r.id,
                r.x.len(),
                self.dim()
            )));
        }
        if r.y >= self.num_classes {
            return Err(Error::Schema(format!(
                "record {} label {} outside [0, {})",
                r.id, r.y, self.num_classes
            )));
        }
        for (v, k) in r.x.iter().zip(&self.kinds) {
            let ok = match k {
                FeatureKind::Continuous => v.is_finite(),
                FeatureKind::Binary => *v == 0.0 || *v == 1.0,
                FeatureKind::ImagePixel => (0.0..=1.0).contains(v),
            };
            if !ok {
                return Err(Error::Schema(format!("record {} value {v} violates {k:?}", r.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: PointId,
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub records: Vec<ExampleRecord>,
}

/// Four equal, pairwise-disjoint splits plus whatever records were left over.
#[derive(Clone, Debug)]
pub struct SplitBundle {
    pub target_train: Vec<ExampleRecord>,
    pub target_test: Vec<ExampleRecord>,
    pub shadow_train: Vec<ExampleRecord>,
    pub shadow_test: Vec<ExampleRecord>,
    pub remainder: Vec<ExampleRecord>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AugmentationSpec {
    /// Source image plus rotations by `+r` and `-r` degrees.
    Rotation { r: f64 },
    /// Source image plus every shift with `|i| + |j| = d`.
    Translation { d: usize },
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentationSpec::Rotation { r } if !(1.0..=15.0).contains(&r) => {
                Err(Error::Config(format!("rotation magnitude {r} outside [1, 15]")))
            }
            AugmentationSpec::Translation { d: 0 } => {
                Err(Error::Config("translation bound d must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Number of queries per point, source included.
    pub fn num_queries(&self) -> usize {
        match *self {
            AugmentationSpec::Rotation { .. } => 3,
            AugmentationSpec::Translation { d } => 4 * d + 1,
        }
    }
}

#[derive(Debug, Deserialize)]
struct SchemaFile {
    label: String,
    num_classes: usize,
    columns: Vec<SchemaColumn>,
}

#[derive(Debug, Deserialize)]
struct SchemaColumn {
    name: String,
    kind: FeatureKind,
}

/// Column layout of a tabular CSV, read from the JSON sidecar.
#[derive(Clone, Debug)]
pub struct TabularSchema {
    pub label: String,
    pub columns: Vec<(String, FeatureKind)>,
    pub features: FeatureSchema,
}

impl TabularSchema {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: SchemaFile = serde_json::from_str(text)?;
        if file.columns.iter().any(|c| c.kind == FeatureKind::ImagePixel) {
            return Err(Error::Schema(
                "tabular schemas cannot contain image-pixel columns".into(),
            ));
        }
        let features =
            FeatureSchema::tabular(file.columns.iter().map(|c| c.kind).collect(), file.num_classes)?;
        Ok(Self {
            label: file.label,
            columns: file.columns.into_iter().map(|c| (c.name, c.kind)).collect(),
            features,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

/// Reads a headed CSV whose columns are described by `schema`.
///
/// Record ids are the zero-based data-row index. Line numbers in errors are
/// one-based file lines, so the header is line 1.
pub fn load_tabular(path: &Path, schema: &TabularSchema) -> Result<Vec<ExampleRecord>> {
    parse_tabular(open_maybe_gz(path)?, schema)
}

pub fn parse_tabular<R: Read>(reader: R, schema: &TabularSchema) -> Result<Vec<ExampleRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` missing from header")))
    };
    let feature_cols = schema
        .columns
        .iter()
        .map(|(name, _)| find(name))
        .collect::<Result<Vec<_>>>()?;
    let label_col = find(&schema.label)?;
    if header.len() != feature_cols.len() + 1 {
        return Err(Error::Schema(format!(
            "header has {} columns, schema describes {}",
            header.len(),
            feature_cols.len() + 1
        )));
    }

    let mut out = Vec::new();
    for (row_idx, row) in rdr.records().enumerate() {
        let line = row_idx + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |col: usize| -> Result<f64> {
            let raw = row.get(col).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing column {col}"),
            })?;
            raw.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("`{raw}` is not a number"),
            })
        };
        let mut x = Vec::with_capacity(feature_cols.len());
        for (&col, (name, kind)) in feature_cols.iter().zip(&schema.columns) {
            let v = field(col)?;
            let ok = match kind {
                FeatureKind::Binary => v == 0.0 || v == 1.0,
                _ => v.is_finite(),
            };
            if !ok {
                return Err(Error::Parse {
                    line,
                    message: format!("value {v} invalid for {kind:?} column `{name}`"),
                });
            }
            x.push(v);
        }
        let y = field(label_col)?;
        if y < 0.0 || y.fract() != 0.0 || y as usize >= schema.features.num_classes {
            return Err(Error::Parse {
                line,
                message: format!("label {y} outside [0, {})", schema.features.num_classes),
            });
        }
        out.push(ExampleRecord {
            id: row_idx as PointId,
            x,
            y: y as usize,
        });
    }
    Ok(out)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open_maybe_gz(path)?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Loads an IDX image/label pair (plain or gzip). Pixels are scaled to `[0, 1]`.
pub fn load_idx_images(images: &Path, labels: &Path) -> Result<Dataset> {
    parse_idx(&read_all(images)?, &read_all(labels)?)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32_be(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32_be(images, 4, "images")? as usize;
    let h = read_u32_be(images, 8, "images")? as usize;
    let w = read_u32_be(images, 12, "images")? as usize;
    let pixels = &images[16..];
    if pixels.len() != n * h * w {
        return Err(Error::Format(format!(
            "image payload has {} bytes, header implies {}",
            pixels.len(),
            n * h * w
        )));
    }

    let magic = read_u32_be(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let nl = read_u32_be(labels, 4, "labels")? as usize;
    let ys = &labels[8..];
    if nl != n || ys.len() != n {
        return Err(Error::Format(format!(
            "label file holds {} labels (header {nl}), image file {n}",
            ys.len()
        )));
    }

    let num_classes = ys.iter().copied().max().map_or(1, |m| m as usize + 1);
    let shape = ImageShape {
        height: h,
        width: w,
        channels: 1,
    };
    let records = pixels
        .chunks_exact(h * w)
        .zip(ys)
        .enumerate()
        .map(|(i, (img, &y))| ExampleRecord {
            id: i as PointId,
            x: img.iter().map(|&p| f64::from(p) / 255.0).collect(),
            y: y as usize,
        })
        .collect();
    Ok(Dataset {
        schema: FeatureSchema::image(shape, num_classes),
        records,
    })
}

/// Draws four disjoint splits of `n` records each, uniformly at random.
pub fn split_disjoint(records: &[ExampleRecord], n: usize, rng: &mut RngStream) -> Result<SplitBundle> {
    if 4 * n > records.len() {
        return Err(Error::Size {
            needed: 4 * n,
            available: records.len(),
        });
    }
    let perm = rng.permutation(records.len());
    let take = |k: usize| -> Vec<ExampleRecord> {
        perm[k * n..(k + 1) * n]
            .iter()
            .map(|&i| records[i].clone())
            .collect()
    };
    Ok(SplitBundle {
        target_train: take(0),
        target_test: take(1),
        shadow_train: take(2),
        shadow_test: take(3),
        remainder: perm[4 * n..].iter().map(|&i| records[i].clone()).collect(),
        seed: rng.seed(),
    })
}

fn require_image(schema: &FeatureSchema, x: &[f64]) -> Result<ImageShape> {
    let shape = schema
        .image_shape
        .ok_or_else(|| Error::Schema("operation requires an image schema".into()))?;
    if x.len() != shape.len() {
        return Err(Error::InvalidInput(format!(
            "image has {} values, shape needs {}",
            x.len(),
            shape.len()
        )));
    }
    Ok(shape)
}

/// Rotates counter-clockwise (as displayed, rows growing downward) about the
/// image center with bilinear sampling and zero fill.
pub fn rotate(x: &[f64], schema: &FeatureSchema, degrees: f64) -> Result<Vec<f64>> {
    let shape = require_image(schema, x)?;
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let pixel = |r: isize, col: isize, ch: usize| -> f64 {
        if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
            0.0
        } else {
            x[(r as usize * w + col as usize) * c + ch]
        }
    };

    let mut out = vec![0.0; x.len()];
    for r in 0..h {
        for col in 0..w {
            let dx = col as f64 - cx;
            let dy = r as f64 - cy;
            let sx = dx * cos - dy * sin + cx;
            let sy = dx * sin + dy * cos + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * pixel(y0, x0, ch) + fx * pixel(y0, x0 + 1, ch))
                    + fy * ((1.0 - fx) * pixel(y0 + 1, x0, ch) + fx * pixel(y0 + 1, x0 + 1, ch));
                out[(r * w + col) * c + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Integer shift by `i` columns (positive = right) and `j` rows (positive =
/// down), zero padded.
pub fn translate(x: &[f64], schema: &FeatureSchema, i: isize, j: isize) -> Result<Vec<f64>> {
    let shape = require_image(schema, x)?;
    let (h, w, c) = (shape.height as isize, shape.width as isize, shape.channels);
    if i.abs() >= w || j.abs() >= h {
        return Err(Error::InvalidInput(format!(
            "shift ({i}, {j}) exceeds image size {w}x{h}"
        )));
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..h {
        let sr = r - j;
        if sr < 0 || sr >= h {
            continue;
        }
        for col in 0..w {
            let sc = col - i;
            if sc < 0 || sc >= w {
                continue;
            }
            let dst = ((r * w + col) as usize) * c;
            let src = ((sr * w + sc) as usize) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    Ok(out)
}

/// Offsets with `|i| + |j| = d`, clockwise on screen starting at `(+d, 0)`.
pub fn translation_offsets(d: usize) -> Vec<(isize, isize)> {
    let d = d as isize;
    let mut out = Vec::with_capacity(4 * d as usize);
    let (mut i, mut j) = (d, 0);
    for (di, dj) in [(-1, 1), (-1, -1), (1, -1), (1, 1)] {
        for _ in 0..d {
            out.push((i, j));
            i += di;
            j += dj;
        }
    }
    out
}

/// Ordered augmentation queries for one point; the source image comes first.
pub fn augmentation_set(x: &[f64], schema: &FeatureSchema, spec: &AugmentationSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    require_image(schema, x)?;
    let mut out = Vec::with_capacity(spec.num_queries());
    out.push(x.to_vec());
    match *spec {
        AugmentationSpec::Rotation { r } => {
            out.push(rotate(x, schema, r)?);
            out.push(rotate(x, schema, -r)?);
        }
        AugmentationSpec::Translation { d } => {
            for (i, j) in translation_offsets(d) {
                out.push(translate(x, schema, i, j)?);
            }
        }
    }
    Ok(out)
}

/// Random perturbation family used by the noise-robustness proxy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Isotropic Gaussian on continuous and pixel coordinates.
    Gaussian { sigma: f64 },
    /// Independent flips of binary coordinates.
    Bernoulli { p: f64 },
    /// Both at once, for schemas mixing continuous and binary columns.
    Mixed { sigma: f64, p: f64 },
}

impl NoiseKind {
    pub fn perturb(
        &self,
        x: &[f64],
        schema: &FeatureSchema,
        n: usize,
        rng: &mut RngStream,
    ) -> Result<Matrix> {
        match *self {
            NoiseKind::Gaussian { sigma } => gaussian_perturb(x, schema, sigma, n, rng),
            NoiseKind::Bernoulli { p } => bernoulli_perturb(x, schema, p, n, rng),
            NoiseKind::Mixed { sigma, p } => {
                check_sigma(sigma)?;
                check_p(p)?;
                let cont = continuous_coords(schema);
                let bin = binary_coords(schema);
                if cont.is_empty() || bin.is_empty() {
                    return Err(Error::Schema(
                        "mixed noise needs both continuous and binary features".into(),
                    ));
                }
                Ok(perturb_rows(x, n, |row| {
                    for &j in &cont {
                        row[j] += sigma * rng.normal();
                    }
                    for &j in &bin {
                        if rng.uniform() < p {
                            row[j] = 1.0 - row[j];
                        }
                    }
                }))
            }
        }
    }
}

fn continuous_coords(schema: &FeatureSchema) -> Vec<usize> {
    schema
        .kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| matches!(k, FeatureKind::Continuous | FeatureKind::ImagePixel))
        .map(|(j, _)| j)
        .collect()
}

fn binary_coords(schema: &FeatureSchema) -> Vec<usize> {
    schema
        .kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == FeatureKind::Binary)
        .map(|(j, _)| j)
        .collect()
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "sigma must be positive, got {sigma}"
        )))
    }
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "flip probability {p} outside (0, 1]"
        )))
    }
}

fn perturb_rows(x: &[f64], n: usize, mut f: impl FnMut(&mut [f64])) -> Matrix {
    let dim = x.len();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let start = data.len();
        data.extend_from_slice(x);
        f(&mut data[start..]);
    }
    Matrix::from_vec_unchecked(n, dim, data)
}

/// `n` copies of `x` with `N(0, sigma²)` added to each continuous or pixel coordinate.
pub fn gaussian_perturb(
    x: &[f64],
    schema: &FeatureSchema,
    sigma: f64,
    n: usize,
    rng: &mut RngStream,
) -> Result<Matrix> {
    check_sigma(sigma)?;
    let coords = continuous_coords(schema);
    if coords.is_empty() {
        return Err(Error::Schema("gaussian noise needs continuous features".into()));
    }
    Ok(perturb_rows(x, n, |row| {
        for &j in &coords {
            row[j] += sigma * rng.normal();
        }
    }))
}

/// `n` copies of `x` with each binary coordinate flipped with probability `p`.
pub fn bernoulli_perturb(
    x: &[f64],
    schema: &FeatureSchema,
    p: f64,
    n: usize,
    rng: &mut RngStream,
) -> Result<Matrix> {
    check_p(p)?;
    let coords = binary_coords(schema);
    if coords.is_empty() {
        return Err(Error::Schema("bernoulli noise needs binary features".into()));
    }
    Ok(perturb_rows(x, n, |row| {
        for &j in &coords {
            if rng.uniform() < p {
                row[j] = 1.0 - row[j];
            }
        }
    }))
}
