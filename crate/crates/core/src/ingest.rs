//! Image datasets: IDX parsing, per-image CSV directories, flattening.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated stream: needed {needed} bytes, have {have}")]
    TruncatedStream { needed: usize, have: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("{context}: expected {expected} pixels, found {found}")]
    BadDimensions {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("{context}: pixel {index} = {value} outside [0,1]")]
    OutOfRangePixel {
        context: String,
        index: usize,
        value: f64,
    },
    #[error("invalid time series: {0}")]
    InvalidSeries(String),
    #[error("dataset {name}: image {id} is {h}x{w}, expected {eh}x{ew}")]
    MixedDimensions {
        name: String,
        id: String,
        h: usize,
        w: usize,
        eh: usize,
        ew: usize,
    },
    #[error("bad provenance string {0:?}")]
    BadProvenance(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Where an image came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Legitimate,
    Adversarial {
        attack: String,
        targeted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<u8>,
    },
    Noisy {
        model: String,
        /// L2 norm of the applied perturbation after clipping, when known.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        post_clip_l2: Option<f64>,
    },
}

impl Provenance {
    pub fn noisy(model: impl Into<String>) -> Self {
        Provenance::Noisy {
            model: model.into(),
            post_clip_l2: None,
        }
    }

    pub fn is_adversarial(&self) -> bool {
        matches!(self, Provenance::Adversarial { .. })
    }

    /// Attack family name, if adversarial.
    pub fn attack(&self) -> Option<&str> {
        match self {
            Provenance::Adversarial { attack, .. } => Some(attack),
            _ => None,
        }
    }
}

/// Compact form used in CSV columns: `legitimate`, `noisy:<model>`,
/// `adversarial:<attack>:untargeted`, `adversarial:<attack>:targeted[:<class>]`.
impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Legitimate => write!(f, "legitimate"),
            Provenance::Noisy { model, .. } => write!(f, "noisy:{model}"),
            Provenance::Adversarial {
                attack,
                targeted: false,
                ..
            } => write!(f, "adversarial:{attack}:untargeted"),
            Provenance::Adversarial {
                attack,
                targeted: true,
                target: Some(t),
            } => write!(f, "adversarial:{attack}:targeted:{t}"),
            Provenance::Adversarial {
                attack,
                targeted: true,
                target: None,
            } => write!(f, "adversarial:{attack}:targeted"),
        }
    }
}

impl FromStr for Provenance {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || IngestError::BadProvenance(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["legitimate"] => Ok(Provenance::Legitimate),
            ["noisy", model] if !model.is_empty() => Ok(Provenance::noisy(*model)),
            ["adversarial", attack, "untargeted"] if !attack.is_empty() => {
                Ok(Provenance::Adversarial {
                    attack: attack.to_string(),
                    targeted: false,
                    target: None,
                })
            }
            ["adversarial", attack, "targeted"] if !attack.is_empty() => Ok(Provenance::Adversarial {
                attack: attack.to_string(),
                targeted: true,
                target: None,
            }),
            ["adversarial", attack, "targeted", t] if !attack.is_empty() => {
                let t: u8 = t.parse().map_err(|_| bad())?;
                Ok(Provenance::Adversarial {
                    attack: attack.to_string(),
                    targeted: true,
                    target: Some(t),
                })
            }
            _ => Err(bad()),
        }
    }
}

/// Normalized grayscale image, pixels row-major in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    id: String,
    pixels: Vec<f64>,
    height: usize,
    width: usize,
    label: Option<u8>,
    provenance: Provenance,
}

impl Image {
    pub fn new(
        id: impl Into<String>,
        pixels: Vec<f64>,
        height: usize,
        width: usize,
        label: Option<u8>,
        provenance: Provenance,
    ) -> Result<Self, IngestError> {
        let id = id.into();
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(IngestError::BadDimensions {
                context: id,
                expected: height * width,
                found: pixels.len(),
            });
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(IngestError::OutOfRangePixel {
                context: id,
                index,
                value,
            });
        }
        Ok(Image {
            id,
            pixels,
            height,
            width,
            label,
            provenance,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label(&self) -> Option<u8> {
        self.label
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Same image with new pixels (validated) and provenance.
    pub fn derive(
        &self,
        id: impl Into<String>,
        pixels: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Image, IngestError> {
        Image::new(id, pixels, self.height, self.width, self.label, provenance)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Image {
        self.id = id.into();
        self
    }
}

/// Finite, non-empty real sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>) -> Result<Self, IngestError> {
        if values.is_empty() {
            return Err(IngestError::InvalidSeries("empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(IngestError::InvalidSeries(format!(
                "non-finite value at {i}"
            )));
        }
        Ok(TimeSeries { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Row-major flattening: pixel (i, j) lands at `i * width + j`.
pub fn flatten(image: &Image) -> TimeSeries {
    TimeSeries {
        values: image.pixels.clone(),
    }
}

/// Inverse of [`flatten`].
pub fn unflatten(
    series: &TimeSeries,
    height: usize,
    width: usize,
    id: impl Into<String>,
) -> Result<Image, IngestError> {
    Image::new(
        id,
        series.values.clone(),
        height,
        width,
        None,
        Provenance::Legitimate,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    images: Vec<Image>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Vec<Image>) -> Result<Self, IngestError> {
        let name = name.into();
        if let Some(first) = images.first() {
            let (eh, ew) = (first.height, first.width);
            if let Some(bad) = images.iter().find(|im| im.height != eh || im.width != ew) {
                return Err(IngestError::MixedDimensions {
                    name,
                    id: bad.id.clone(),
                    h: bad.height,
                    w: bad.width,
                    eh,
                    ew,
                });
            }
        }
        Ok(Dataset { name, images })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn into_images(self) -> Vec<Image> {
        self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Images `start..end` (clamped), keeping ids.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let end = end.min(self.images.len());
        let start = start.min(end);
        Dataset {
            name: self.name.clone(),
            images: self.images[start..end].to_vec(),
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IngestError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IngestError::TruncatedStream {
            needed: offset + 4,
            have: bytes.len(),
        })
}

/// Parse an IDX unsigned-byte image stream (and optional label stream).
///
/// Pixel bytes map to `b / 255`. Image ids are `<name>-<index:05>`.
pub fn parse_idx(
    name: &str,
    image_bytes: &[u8],
    label_bytes: Option<&[u8]>,
) -> Result<Dataset, IngestError> {
    let magic = read_u32(image_bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IngestError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(image_bytes, 4)? as usize;
    let height = read_u32(image_bytes, 8)? as usize;
    let width = read_u32(image_bytes, 12)? as usize;
    let pixels_per = height * width;
    let needed = 16 + count * pixels_per;
    if image_bytes.len() < needed {
        return Err(IngestError::TruncatedStream {
            needed,
            have: image_bytes.len(),
        });
    }

    let labels = match label_bytes {
        None => None,
        Some(lb) => {
            let magic = read_u32(lb, 0)?;
            if magic != IDX_LABELS_MAGIC {
                return Err(IngestError::BadMagic {
                    expected: IDX_LABELS_MAGIC,
                    found: magic,
                });
            }
            let n = read_u32(lb, 4)? as usize;
            if n != count {
                return Err(IngestError::CountMismatch {
                    images: count,
                    labels: n,
                });
            }
            if lb.len() < 8 + n {
                return Err(IngestError::TruncatedStream {
                    needed: 8 + n,
                    have: lb.len(),
                });
            }
            Some(&lb[8..8 + n])
        }
    };

    let images = (0..count)
        .map(|k| {
            let raw = &image_bytes[16 + k * pixels_per..16 + (k + 1) * pixels_per];
            let pixels = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
            Image::new(
                format!("{name}-{k:05}"),
                pixels,
                height,
                width,
                labels.map(|l| l[k]),
                Provenance::Legitimate,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(name, images)
}

/// Read an IDX image file and optional label file from disk.
pub fn read_idx_files(
    name: &str,
    images: &Path,
    labels: Option<&Path>,
) -> Result<Dataset, IngestError> {
    let read = |p: &Path| {
        fs::read(p).map_err(|e| IngestError::UnreadableFile {
            path: p.to_path_buf(),
            reason: e.to_string(),
        })
    };
    let image_bytes = read(images)?;
    let label_bytes = labels.map(read).transpose()?;
    parse_idx(name, &image_bytes, label_bytes.as_deref())
}

/// Serialize back to IDX. Labels are emitted only when every image has one.
pub fn write_idx(dataset: &Dataset) -> (Vec<u8>, Option<Vec<u8>>) {
    let (h, w) = dataset
        .images
        .first()
        .map(|im| (im.height, im.width))
        .unwrap_or((0, 0));
    let mut out = Vec::with_capacity(16 + dataset.len() * h * w);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    for im in &dataset.images {
        out.extend(im.pixels.iter().map(|&p| (p * 255.0).round() as u8));
    }
    let labels: Option<Vec<u8>> = dataset.images.iter().map(|im| im.label).collect();
    let labels = labels.map(|ls| {
        let mut lb = Vec::with_capacity(8 + ls.len());
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(ls.len() as u32).to_be_bytes());
        lb.extend_from_slice(&ls);
        lb
    });
    (out, labels)
}

/// Declared value scaling of externally produced image files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Values are already in `[0,1]`.
    #[default]
    None,
    /// Values are byte intensities, divided by 255.
    Byte255,
}

/// How to interpret an image directory. A provenance given here overrides
/// the one in each sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DirDescriptor {
    pub scaling: Scaling,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

/// Per-image JSON sidecar next to each `<id>.csv` / `<id>.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub label: Option<u8>,
    pub provenance: Provenance,
}

fn unreadable(path: &Path, reason: impl ToString) -> IngestError {
    IngestError::UnreadableFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn read_csv_row(path: &Path) -> Result<Vec<f64>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| unreadable(path, e))?;
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| unreadable(path, e))?;
        for field in record.iter().filter(|f| !f.is_empty()) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| unreadable(path, format!("{field:?}: {e}")))?,
            );
        }
    }
    Ok(values)
}

/// Load every `<stem>.csv` or `<stem>.bin` with its `<stem>.json` sidecar,
/// in file-name order. `.bin` files hold one byte per pixel.
pub fn load_image_dir(dir: &Path, descriptor: &DirDescriptor) -> Result<Dataset, IngestError> {
    let entries = fs::read_dir(dir).map_err(|e| unreadable(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "bin")))
        .collect();
    files.sort();

    let mut images = Vec::with_capacity(files.len());
    for path in files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| unreadable(&path, "non UTF-8 file name"))?
            .to_string();
        let sidecar_path = path.with_extension("json");
        let sidecar_text = fs::read_to_string(&sidecar_path).map_err(|e| unreadable(&sidecar_path, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&sidecar_text).map_err(|e| unreadable(&sidecar_path, e))?;

        let raw = if path.extension().and_then(|e| e.to_str()) == Some("bin") {
            fs::read(&path)
                .map_err(|e| unreadable(&path, e))?
                .into_iter()
                .map(f64::from)
                .collect()
        } else {
            read_csv_row(&path)?
        };
        let expected = sidecar.height * sidecar.width;
        if raw.len() != expected || expected == 0 {
            return Err(IngestError::BadDimensions {
                context: path.display().to_string(),
                expected,
                found: raw.len(),
            });
        }
        let pixels: Vec<f64> = match descriptor.scaling {
            Scaling::None => raw,
            Scaling::Byte255 => raw.into_iter().map(|v| v / 255.0).collect(),
        };
        let provenance = descriptor
            .provenance
            .clone()
            .unwrap_or(sidecar.provenance);
        let image = Image::new(stem, pixels, sidecar.height, sidecar.width, sidecar.label, provenance)
            .map_err(|e| match e {
                IngestError::OutOfRangePixel { index, value, .. } => IngestError::OutOfRangePixel {
                    context: path.display().to_string(),
                    index,
                    value,
                },
                other => other,
            })?;
        images.push(image);
    }
    let name = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("images")
        .to_string();
    Dataset::new(name, images)
}

/// Write images as `<id>.csv` + `<id>.json` (scaling `none`).
pub fn write_image_dir(dataset: &Dataset, dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let io = |path: &Path, source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut written = Vec::new();
    for im in &dataset.images {
        let csv_path = dir.join(format!("{}.csv", im.id));
        let row: Vec<String> = im.pixels.iter().map(|p| p.to_string()).collect();
        fs::write(&csv_path, row.join(",") + "\n").map_err(|e| io(&csv_path, e))?;
        let sidecar = Sidecar {
            height: im.height,
            width: im.width,
            label: im.label,
            provenance: im.provenance.clone(),
        };
        let json_path = dir.join(format!("{}.json", im.id));
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&json_path, text + "\n").map_err(|e| io(&json_path, e))?;
        written.push(csv_path);
        written.push(json_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_stream(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn parses_hand_built_stream() {
        let bytes = idx_stream(0x803, &[1, 2, 2], &[0, 255, 0, 255]);
        let ds = parse_idx("t", &bytes, None).unwrap();
        assert_eq!(ds.len(), 1);
        let im = &ds.images()[0];
        assert_eq!((im.height(), im.width()), (2, 2));
        assert_eq!(im.pixels(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(im.pixel(0, 1), 1.0);
        assert_eq!(im.pixel(1, 0), 0.0);
    }

    #[test]
    fn rejects_wrong_magic() {
        let bytes = idx_stream(0x802, &[1, 2, 2], &[0, 0, 0, 0]);
        assert!(matches!(
            parse_idx("t", &bytes, None),
            Err(IngestError::BadMagic { found: 0x802, .. })
        ));
        let images = idx_stream(0x803, &[1, 1, 1], &[3]);
        let labels = idx_stream(0x803, &[1], &[3]);
        assert!(matches!(
            parse_idx("t", &images, Some(&labels)),
            Err(IngestError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_and_mismatched_streams() {
        let bytes = idx_stream(0x803, &[2, 2, 2], &[0, 0, 0, 0, 0]);
        assert!(matches!(
            parse_idx("t", &bytes, None),
            Err(IngestError::TruncatedStream { needed: 24, have: 21 })
        ));
        assert!(matches!(
            parse_idx("t", &[0, 0, 8], None),
            Err(IngestError::TruncatedStream { .. })
        ));
        let images = idx_stream(0x803, &[1, 1, 1], &[3]);
        let labels = idx_stream(0x801, &[2], &[3, 4]);
        assert!(matches!(
            parse_idx("t", &images, Some(&labels)),
            Err(IngestError::CountMismatch { images: 1, labels: 2 })
        ));
    }

    #[test]
    fn labels_attach_in_order() {
        let images = idx_stream(0x803, &[2, 1, 1], &[0, 51]);
        let labels = idx_stream(0x801, &[2], &[7, 2]);
        let ds = parse_idx("t", &images, Some(&labels)).unwrap();
        assert_eq!(ds.images()[0].label(), Some(7));
        assert_eq!(ds.images()[1].label(), Some(2));
        assert_eq!(ds.images()[1].pixels(), &[0.2]);
        let (img_out, lab_out) = write_idx(&ds);
        assert_eq!(img_out, images);
        assert_eq!(lab_out.unwrap(), labels);
    }

    #[test]
    fn flatten_is_row_major() {
        let im = Image::new("a", vec![0.1, 0.2, 0.3, 0.4], 2, 2, None, Provenance::Legitimate).unwrap();
        assert_eq!(flatten(&im).values(), &[0.1, 0.2, 0.3, 0.4]);

        let mut px = vec![0.0; 28 * 28];
        px[28] = 1.0;
        let im = Image::new("b", px, 28, 28, None, Provenance::Legitimate).unwrap();
        assert_eq!(im.pixel(1, 0), 1.0);
        assert_eq!(flatten(&im).values()[28], 1.0);

        let im = Image::new("c", vec![0.5; 784], 28, 28, None, Provenance::Legitimate).unwrap();
        let ts = flatten(&im);
        assert_eq!(ts.len(), 784);
        assert!(ts.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn non_square_images_are_accepted() {
        let im = Image::new("r", vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5], 2, 3, None, Provenance::Legitimate)
            .unwrap();
        assert_eq!(im.pixel(1, 0), 0.3);
        assert_eq!(flatten(&im).values()[3], 0.3);
    }

    #[test]
    fn image_invariants_enforced() {
        assert!(matches!(
            Image::new("x", vec![0.0, 1.5], 1, 2, None, Provenance::Legitimate),
            Err(IngestError::OutOfRangePixel { index: 1, .. })
        ));
        assert!(matches!(
            Image::new("x", vec![0.0; 3], 2, 2, None, Provenance::Legitimate),
            Err(IngestError::BadDimensions { .. })
        ));
        assert!(TimeSeries::new(vec![]).is_err());
        assert!(TimeSeries::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn provenance_strings_round_trip() {
        let cases = [
            Provenance::Legitimate,
            Provenance::noisy("gaussian"),
            Provenance::Adversarial {
                attack: "fgsm".into(),
                targeted: false,
                target: None,
            },
            Provenance::Adversarial {
                attack: "cw".into(),
                targeted: true,
                target: Some(3),
            },
        ];
        for p in cases {
            let back: Provenance = p.to_string().parse().unwrap();
            assert_eq!(back, p);
        }
        assert!("adversarial:fgsm".parse::<Provenance>().is_err());
        assert!("bogus".parse::<Provenance>().is_err());
    }

    fn write_one(dir: &Path, stem: &str, csv: &str, h: usize, w: usize) {
        fs::write(dir.join(format!("{stem}.csv")), csv).unwrap();
        let side = serde_json::json!({
            "height": h, "width": w, "label": 4,
            "provenance": {"kind": "adversarial", "attack": "cw", "targeted": true, "target": 1}
        });
        fs::write(dir.join(format!("{stem}.json")), side.to_string()).unwrap();
    }

    #[test]
    fn loads_csv_directory() {
        let tmp = tempfile::tempdir().unwrap();
        write_one(tmp.path(), "img0", "0.0,1.0,0.0,1.0\n", 2, 2);
        let ds = load_image_dir(tmp.path(), &DirDescriptor::default()).unwrap();
        let im = &ds.images()[0];
        assert_eq!(im.pixels(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(im.label(), Some(4));
        assert_eq!(im.provenance().attack(), Some("cw"));
    }

    #[test]
    fn csv_directory_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let row = vec!["0.5"; 783].join(",");
        write_one(tmp.path(), "short", &row, 28, 28);
        assert!(matches!(
            load_image_dir(tmp.path(), &DirDescriptor::default()),
            Err(IngestError::BadDimensions { expected: 784, found: 783, .. })
        ));

        let tmp = tempfile::tempdir().unwrap();
        write_one(tmp.path(), "hot", "0.0,1.5,0.0,1.0", 2, 2);
        assert!(matches!(
            load_image_dir(tmp.path(), &DirDescriptor::default()),
            Err(IngestError::OutOfRangePixel { value, .. }) if value == 1.5
        ));
        // byte scaling brings it in range
        let ds = load_image_dir(
            tmp.path(),
            &DirDescriptor {
                scaling: Scaling::Byte255,
                provenance: Some(Provenance::Legitimate),
            },
        )
        .unwrap();
        assert_eq!(ds.images()[0].provenance(), &Provenance::Legitimate);

        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("lonely.csv"), "0.1").unwrap();
        assert!(matches!(
            load_image_dir(tmp.path(), &DirDescriptor::default()),
            Err(IngestError::UnreadableFile { .. })
        ));
    }

    #[test]
    fn image_dir_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let im = Image::new(
            "z-1",
            vec![0.1, 1.0 / 3.0, 0.0, 1.0],
            2,
            2,
            Some(9),
            Provenance::noisy("speckle"),
        )
        .unwrap();
        let ds = Dataset::new("set", vec![im]).unwrap();
        write_image_dir(&ds, tmp.path()).unwrap();
        let back = load_image_dir(tmp.path(), &DirDescriptor::default()).unwrap();
        assert_eq!(back.images(), ds.images());
    }

    #[test]
    fn bin_files_use_declared_scaling() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("b.bin"), [0u8, 255, 51, 0]).unwrap();
        let side = serde_json::json!({"height": 2, "width": 2, "provenance": {"kind": "legitimate"}});
        fs::write(tmp.path().join("b.json"), side.to_string()).unwrap();
        let ds = load_image_dir(
            tmp.path(),
            &DirDescriptor {
                scaling: Scaling::Byte255,
                provenance: None,
            },
        )
        .unwrap();
        assert_eq!(ds.images()[0].pixels(), &[0.0, 1.0, 0.2, 0.0]);
        assert!(load_image_dir(tmp.path(), &DirDescriptor::default()).is_err());
    }
}
