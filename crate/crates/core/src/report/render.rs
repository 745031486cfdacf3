//! PNG figures. Figures carry no text; the CSV written next to each one
//! gives the row and column order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::matrix::Matrix;
use crate::model::FeatureMap;

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, background: [u8; 3]) -> Self {
        Self {
            width,
            height,
            rgb: background.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, c: [u8; 3]) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.put(xx, yy, c);
            }
        }
    }

    /// PNG bytes; the run hash, when given, goes into a `run_hash` text
    /// chunk.
    pub fn encode(&self, run_hash: Option<&str>) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            if let Some(h) = run_hash {
                enc.add_text_chunk(PNG_RUN_HASH_KEY.into(), h.into())?;
            }
            let mut w = enc.write_header()?;
            w.write_image_data(&self.rgb)?;
            w.finish()?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, run_hash: Option<&str>) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Data(format!("refusing to write an empty image to {}", path.display())));
        }
        write_atomic(path, &self.encode(run_hash)?)
    }
}

const PNG_RUN_HASH_KEY: &str = "run_hash";

/// Reads the run hash stored by [`Canvas::save`].
pub fn png_run_hash(path: &Path) -> Result<Option<String>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let reader = png::Decoder::new(file)
        .read_info()
        .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == PNG_RUN_HASH_KEY)
        .map(|t| t.text.clone()))
}

/// Perceptually ordered dark-blue to yellow ramp; `t` in [0, 1].
pub fn ramp(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f64;
    let mut c = [0u8; 3];
    for k in 0..3 {
        c[k] = (STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f).round() as u8;
    }
    c
}

/// Distinct colours for categorical data.
pub const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// Marker colours for galleries: red, green, blue, cyan, magenta, yellow.
pub const MARKER_COLOURS: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Every column divided by its own maximum.
    Column,
    /// Values used as they are, clamped to [0, 1].
    Unit,
}

/// Heatmap with one `cell x cell` square per matrix entry.
pub fn heatmap_canvas(values: &Matrix, scale: Scale, cell: usize) -> Canvas {
    let mut c = Canvas::new(values.cols * cell, values.rows * cell, [255, 255, 255]);
    let col_max: Vec<f32> = (0..values.cols)
        .map(|j| values.iter_rows().map(|r| r[j]).fold(0.0f32, f32::max))
        .collect();
    for (i, row) in values.iter_rows().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = match scale {
                Scale::Column if col_max[j] > 0.0 => v / col_max[j],
                Scale::Column => 0.0,
                Scale::Unit => v,
            };
            c.fill_rect(j * cell, i * cell, cell, cell, ramp(t as f64));
        }
    }
    c
}

/// Maps plane coordinates into a `size x size` panel with a margin.
fn to_pixels(coords: &[[f32; 2]], size: usize) -> Vec<(usize, usize)> {
    let (mut lo, mut hi) = ([f32::INFINITY; 2], [f32::NEG_INFINITY; 2]);
    for p in coords {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let margin = 4.0;
    let span = (size as f32 - 2.0 * margin - 1.0).max(1.0);
    coords
        .iter()
        .map(|p| {
            let f = |k: usize| {
                let r = hi[k] - lo[k];
                if r > 0.0 { (p[k] - lo[k]) / r } else { 0.5 }
            };
            ((margin + f(0) * span) as usize, (margin + (1.0 - f(1)) * span) as usize)
        })
        .collect()
}

fn dot(c: &mut Canvas, x: usize, y: usize, colour: [u8; 3]) {
    c.fill_rect(x.saturating_sub(1), y.saturating_sub(1), 3, 3, colour);
}

/// Grid of scatter panels, one per column of `values`, each point coloured
/// by that column (scaled between its 1st and 99th percentile). Points are
/// drawn in ascending order of value so high values stay visible.
pub fn scatter_by_value(coords: &[[f32; 2]], values: &Matrix, panel: usize) -> Result<Canvas> {
    if values.rows != coords.len() {
        return Err(Error::Shape(format!("{} points but {} value rows", coords.len(), values.rows)));
    }
    let g = values.cols.max(1);
    let per_row = (g as f64).sqrt().ceil() as usize;
    let rows = g.div_ceil(per_row);
    let mut c = Canvas::new(per_row * panel, rows * panel, [255, 255, 255]);
    let px = to_pixels(coords, panel);
    for j in 0..values.cols {
        let (ox, oy) = ((j % per_row) * panel, (j / per_row) * panel);
        let mut col: Vec<f32> = values.iter_rows().map(|r| r[j]).collect();
        let mut sorted = col.clone();
        sorted.sort_by(f32::total_cmp);
        let q = |f: f64| sorted[((sorted.len() - 1) as f64 * f).round() as usize];
        let (lo, hi) = (q(0.01), q(0.99));
        let mut order: Vec<usize> = (0..col.len()).collect();
        order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        for v in col.iter_mut() {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.5 };
        }
        for i in order {
            dot(&mut c, ox + px[i].0, oy + px[i].1, ramp(col[i] as f64));
        }
    }
    Ok(c)
}

/// Scatter coloured by cluster; unknown (negative) labels in light grey.
pub fn scatter_by_label(coords: &[[f32; 2]], labels: &[i64], size: usize) -> Result<Canvas> {
    if labels.len() != coords.len() {
        return Err(Error::Shape(format!("{} points but {} labels", coords.len(), labels.len())));
    }
    let mut c = Canvas::new(size, size, [255, 255, 255]);
    let px = to_pixels(coords, size);
    // unknowns first so clusters draw on top
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[i] >= 0, i));
    for i in order {
        let colour = if labels[i] < 0 { [200, 200, 200] } else { PALETTE[labels[i] as usize % PALETTE.len()] };
        dot(&mut c, px[i].0, px[i].1, colour);
    }
    Ok(c)
}

/// Gallery: one row of tiles per entry of `rows`, each tile a patch with
/// up to six `channels` blended in [`MARKER_COLOURS`]. Every channel is
/// divided by its maximum over all shown patches.
pub fn gallery_canvas(patches: &[&FeatureMap], rows: &[Vec<usize>], channels: &[usize], zoom: usize) -> Result<Canvas> {
    if channels.is_empty() || channels.len() > MARKER_COLOURS.len() {
        return Err(Error::config("report.gallery_markers", "between 1 and 6 markers are required"));
    }
    let first = patches.first().ok_or_else(|| Error::Data("gallery has no patches".into()))?;
    if let Some(&c) = channels.iter().find(|&&c| c >= first.channels) {
        return Err(Error::Shape(format!("channel {c} out of range for {} channels", first.channels)));
    }
    let (ph, pw) = (first.height, first.width);
    let max_cols = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let gap = 2;
    let tile_w = pw * zoom + gap;
    let tile_h = ph * zoom + gap;
    let mut canvas = Canvas::new(max_cols * tile_w, rows.len().max(1) * tile_h, [255, 255, 255]);
    let mut maxima = vec![0.0f32; channels.len()];
    for &i in rows.iter().flatten() {
        for (m, &ch) in maxima.iter_mut().zip(channels) {
            *m = patches[i].data[ch * ph * pw..(ch + 1) * ph * pw].iter().fold(*m, |a, &v| a.max(v));
        }
    }
    for (r, row) in rows.iter().enumerate() {
        for (col, &i) in row.iter().enumerate() {
            let p = patches[i];
            for y in 0..ph {
                for x in 0..pw {
                    let mut rgb = [0.0f32; 3];
                    for (k, &ch) in channels.iter().enumerate() {
                        let v = if maxima[k] > 0.0 { p.data[(ch * ph + y) * pw + x] / maxima[k] } else { 0.0 };
                        for (o, w) in rgb.iter_mut().zip(MARKER_COLOURS[k]) {
                            *o += v * w;
                        }
                    }
                    let colour = rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    canvas.fill_rect(col * tile_w + x * zoom, r * tile_h + y * zoom, zoom, zoom, colour);
                }
            }
        }
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_clamping() {
        assert_eq!(ramp(0.0), [68, 1, 84]);
        assert_eq!(ramp(1.0), [253, 231, 37]);
        assert_eq!(ramp(-3.0), ramp(0.0));
        assert_eq!(ramp(f64::NAN), ramp(0.0));
    }

    #[test]
    fn heatmap_pixels_follow_values() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 4.0]]).unwrap();
        let c = heatmap_canvas(&m, Scale::Column, 3);
        assert_eq!((c.width, c.height), (6, 6));
        let px = |x: usize, y: usize| [c.rgb[(y * 6 + x) * 3], c.rgb[(y * 6 + x) * 3 + 1], c.rgb[(y * 6 + x) * 3 + 2]];
        assert_eq!(px(0, 0), ramp(0.5));
        assert_eq!(px(1, 4), ramp(1.0));
        assert_eq!(px(4, 1), ramp(0.0));
    }

    #[test]
    fn png_round_trips_through_the_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Canvas::new(4, 3, [0, 0, 0]);
        c.put(2, 1, [10, 20, 30]);
        let path = dir.path().join("x.png");
        c.save(&path, Some("abc123")).unwrap();
        assert_eq!(png_run_hash(&path).unwrap().as_deref(), Some("abc123"));
        let dec = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (4, 3));
        assert_eq!(&buf[(4 + 2) * 3..(4 + 2) * 3 + 3], &[10, 20, 30]);
    }

    #[test]
    fn gallery_normalizes_each_marker() {
        let a = FeatureMap::from_vec(2, 1, 1, vec![2.0, 0.0]);
        let b = FeatureMap::from_vec(2, 1, 1, vec![1.0, 5.0]);
        let c = gallery_canvas(&[&a, &b], &[vec![0, 1]], &[0, 1], 1).unwrap();
        // tiles are 1 px plus a 2 px gap
        assert_eq!(&c.rgb[0..3], &[255, 0, 0]);
        assert_eq!(&c.rgb[9..12], &[128, 255, 0]);
        assert!(gallery_canvas(&[&a], &[vec![0]], &[0, 1, 0, 1, 0, 1, 0], 1).is_err());
        assert!(gallery_canvas(&[&a], &[vec![0]], &[2], 1).is_err());
    }

    #[test]
    fn scatter_shapes() {
        let coords = vec![[0.0, 0.0], [1.0, 1.0], [0.5, 0.2]];
        let v = Matrix::from_rows(&[vec![0.0, 1.0, 2.0], vec![1.0, 1.0, 0.0], vec![0.5, 0.0, 1.0]]).unwrap();
        let c = scatter_by_value(&coords, &v, 20).unwrap();
        assert_eq!((c.width, c.height), (40, 40));
        assert!(scatter_by_label(&coords, &[0, -1], 20).is_err());
        assert!(scatter_by_label(&coords, &[0, -1, 3], 20).is_ok());
    }
}
