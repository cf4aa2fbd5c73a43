//! Dataset model and ingestion: PNG images referenced from a CSV manifest
//! with `path`, `split`, and one column per binary label.

pub mod synthetic;

pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// In-memory labeled image set. Labels are an n x L binary matrix.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<Vec<u8>>,
    pub label_names: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            label_names: self.label_names.clone(),
        }
    }

    /// Label matrix as f64 rows (for metric code).
    pub fn labels_f64(&self) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .map(|row| row.iter().map(|&v| v as f64).collect())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SplitDataset<T: Scalar> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory image paths are resolved against.
    pub root: PathBuf,
    /// CSV with columns: path, split, then one column per binary label.
    pub csv: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, csv: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            root: root.into(),
            csv: csv.into(),
        }
    }
}

/// Target geometry for ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Decode every manifest row to a float image in [0,1], resized with
/// bilinear interpolation, channel count adapted (gray replicated to RGB,
/// RGB collapsed by luminance).
pub fn load_dataset<T: Scalar>(manifest: &DatasetManifest, spec: LoadSpec) -> Result<SplitDataset<T>> {
    if spec.channels != 1 && spec.channels != 3 {
        return Err(Error::Config(format!(
            "target channels must be 1 or 3, got {}",
            spec.channels
        )));
    }
    let file = File::open(&manifest.csv).map_err(|e| Error::io(&manifest.csv, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("manifest header unreadable: {e}")))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "path" || cols[1] != "split" {
        return Err(Error::Data(format!(
            "manifest must start with path,split and carry at least one label column, got {cols:?}"
        )));
    }
    let label_names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();

    let mut splits: [Dataset<T>; 3] = std::array::from_fn(|_| Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        label_names: label_names.clone(),
    });
    let mut seen_paths = BTreeSet::new();
    let mut rows = 0usize;
    for (row_idx, record) in reader.records().enumerate() {
        let row_no = row_idx + 2; // header is line 1
        let record =
            record.map_err(|e| Error::Data(format!("manifest row {row_no}: {e}")))?;
        if record.len() != cols.len() {
            return Err(Error::Data(format!(
                "manifest row {row_no}: expected {} fields, got {}",
                cols.len(),
                record.len()
            )));
        }
        let rel = &record[0];
        let split = match &record[1] {
            "train" => 0,
            "val" => 1,
            "test" => 2,
            other => {
                return Err(Error::Data(format!(
                    "manifest row {row_no}: split must be train/val/test, got {other:?}"
                )))
            }
        };
        if !seen_paths.insert(rel.to_string()) {
            return Err(Error::Data(format!(
                "manifest row {row_no}: duplicate path {rel:?} (splits must be disjoint)"
            )));
        }
        let mut label_row = Vec::with_capacity(label_names.len());
        for (ci, field) in record.iter().skip(2).enumerate() {
            match field {
                "0" => label_row.push(0u8),
                "1" => label_row.push(1u8),
                other => {
                    return Err(Error::Data(format!(
                        "manifest row {row_no}: label {:?} must be 0 or 1, got {other:?}",
                        label_names[ci]
                    )))
                }
            }
        }
        let path = manifest.root.join(rel);
        let image = load_png_image::<T>(&path, spec)
            .map_err(|e| Error::Data(format!("manifest row {row_no}: {e}")))?;
        splits[split].images.push(image);
        splits[split].labels.push(label_row);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!(
            "manifest {} contains no data rows",
            manifest.csv.display()
        )));
    }
    let [train, val, test] = splits;
    Ok(SplitDataset { train, val, test })
}

/// 8-bit grayscale or RGB PNG -> C x H x W floats in [0,1], resized.
pub fn load_png_image<T: Scalar>(path: &Path, spec: LoadSpec) -> Result<Tensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("{}: png decode failed: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: png frame failed: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: only 8-bit PNGs are supported",
            path.display()
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported png color type {other:?} (need 8-bit gray or rgb)",
                path.display()
            )))
        }
    };
    // interleaved u8 -> planar f64 in [0,1]
    let mut planes = vec![0.0f64; src_channels * h * w];
    for p in 0..h * w {
        for c in 0..src_channels {
            planes[c * h * w + p] = buf[p * src_channels + c] as f64 / 255.0;
        }
    }
    // adapt channel count
    let adapted: Vec<f64> = match (src_channels, spec.channels) {
        (a, b) if a == b => planes,
        (1, 3) => {
            let mut out = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                out.extend_from_slice(&planes[..h * w]);
            }
            out
        }
        (3, 1) => (0..h * w)
            .map(|p| {
                0.299 * planes[p] + 0.587 * planes[h * w + p] + 0.114 * planes[2 * h * w + p]
            })
            .collect(),
        _ => unreachable!("channels validated to 1 or 3"),
    };
    let resized = resize_bilinear(&adapted, spec.channels, h, w, spec.height, spec.width);
    let data = resized.into_iter().map(T::from_f64).collect();
    Tensor::new(&[spec.channels, spec.height, spec.width], data)
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(
    px: &[f64],
    c: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Vec<f64> {
    if h == th && w == tw {
        return px.to_vec();
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = vec![0.0; c * th * tw];
    for ch in 0..c {
        let src = &px[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * th * tw..(ch + 1) * th * tw];
        for y in 0..th {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for x in 0..tw {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                dst[y * tw + x] = (1.0 - wy) * (1.0 - wx) * src[y0 * w + x0]
                    + (1.0 - wy) * wx * src[y0 * w + x1]
                    + wy * (1.0 - wx) * src[y1 * w + x0]
                    + wy * wx * src[y1 * w + x1];
            }
        }
    }
    out
}
