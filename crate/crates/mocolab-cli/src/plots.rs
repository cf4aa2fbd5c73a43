//! Minimal PNG plot rendering: loss curves as polylines, CKA grids as
//! heatmaps. No text; the JSON/CSV artifacts next to the plots carry the
//! numbers.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use mocolab_core::error::{Error, Result};

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[u8; 3]>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas {
            w,
            h,
            px: vec![[255, 255, 255]; w * h],
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.px[y as usize * self.w + x as usize] = c;
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            self.set(
                (x0 + t * (x1 - x0)).round() as i64,
                (y0 + t * (y1 - y0)).round() as i64,
                c,
            );
        }
    }

    fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, c: [u8; 3]) {
        for y in y0..y1.min(self.h) {
            for x in x0..x1.min(self.w) {
                self.px[y * self.w + x] = c;
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.w as u32, self.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Data(format!("png header: {e}")))?;
        let data: Vec<u8> = self.px.iter().flatten().copied().collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Data(format!("png write: {e}")))
    }
}

/// Train (blue) and validation (red) InfoNCE per epoch.
pub fn plot_loss_curves(csv: &str, path: &Path) -> Result<()> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 2 {
            continue;
        }
        if let Ok(v) = cells[1].parse::<f64>() {
            train.push(v);
        }
        if cells.len() > 2 {
            if let Ok(v) = cells[2].parse::<f64>() {
                val.push(v);
            }
        }
    }
    if train.is_empty() {
        return Err(Error::Data("loss curve csv has no rows".into()));
    }
    let (w, h, margin) = (640usize, 400usize, 40.0f64);
    let mut canvas = Canvas::new(w, h);
    let all: Vec<f64> = train.iter().chain(&val).copied().collect();
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let n = train.len().max(2) as f64;
    let sx = |i: usize| margin + (w as f64 - 2.0 * margin) * i as f64 / (n - 1.0);
    let sy = |v: f64| (h as f64 - margin) - (h as f64 - 2.0 * margin) * (v - lo) / span;
    // axes
    canvas.line(margin, h as f64 - margin, w as f64 - margin, h as f64 - margin, [0, 0, 0]);
    canvas.line(margin, margin, margin, h as f64 - margin, [0, 0, 0]);
    for (series, color) in [(&train, [30u8, 80, 200]), (&val, [200u8, 60, 30])] {
        for pair in (0..series.len()).collect::<Vec<_>>().windows(2) {
            let (a, b) = (pair[0], pair[1]);
            canvas.line(sx(a), sy(series[a]), sx(b), sy(series[b]), color);
        }
    }
    canvas.save(path)
}

/// One colored cell per block, shading from white (0) to blue (1).
pub fn plot_cka_heatmap(grid: &serde_json::Value, path: &Path) -> Result<()> {
    let rows = grid["rows"]
        .as_array()
        .ok_or_else(|| Error::Data("cka grid has no rows".into()))?;
    if rows.is_empty() {
        return Err(Error::Data("cka grid is empty".into()));
    }
    let cell = 80usize;
    let mut canvas = Canvas::new(cell * rows.len(), cell);
    for (i, row) in rows.iter().enumerate() {
        let v = row["cka"].as_f64().unwrap_or(0.0).clamp(0.0, 1.0);
        let shade = (255.0 * (1.0 - v)) as u8;
        canvas.fill_rect(i * cell + 2, 2, (i + 1) * cell - 2, cell - 2, [shade, shade, 255]);
    }
    canvas.save(path)
}
