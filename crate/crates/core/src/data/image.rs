use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};

use super::panel::MarkerPanel;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::FeatureMap;

/// One multiplex image. Pixels are stored channel-major (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelImage {
    pub image_id: String,
    pub panel: MarkerPanel,
    pub pixel_size_um: Option<f64>,
    pub pixels: FeatureMap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    image_id: String,
    panel: MarkerPanel,
    #[serde(default)]
    pixel_size_um: Option<f64>,
}

impl MultichannelImage {
    pub fn new(image_id: impl Into<String>, panel: MarkerPanel, pixels: FeatureMap, pixel_size_um: Option<f64>) -> Result<Self> {
        let image = Self {
            image_id: image_id.into(),
            panel,
            pixel_size_um,
            pixels,
        };
        image.validate()?;
        Ok(image)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.channels != self.panel.len() {
            return Err(Error::PanelMismatch(format!(
                "image `{}` has {} channels but its panel has {}",
                self.image_id,
                self.pixels.channels,
                self.panel.len()
            )));
        }
        if let Some(i) = self.pixels.data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(format!(
                "image `{}` has invalid intensity {} at flat index {i}",
                self.image_id, self.pixels.data[i]
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    /// Writes a multi-page float TIFF (one page per channel) and a JSON
    /// sidecar next to it with the same stem.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Cursor::new(Vec::new());
        {
            let mut enc = TiffEncoder::new(&mut buf)?;
            for c in 0..self.pixels.channels {
                enc.write_image::<colortype::Gray32Float>(
                    self.width() as u32,
                    self.height() as u32,
                    self.pixels.plane(c),
                )?;
            }
        }
        let sidecar = Sidecar {
            image_id: self.image_id.clone(),
            panel: self.panel.clone(),
            pixel_size_um: self.pixel_size_um,
        };
        write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
        write_atomic(path, &buf.into_inner())
    }

    /// Reads an image written by [`Self::save`]. When `expected` is given the
    /// image must carry exactly that panel.
    pub fn load(path: &Path, expected: Option<&MarkerPanel>) -> Result<Self> {
        let side = sidecar_path(path);
        for p in [path, side.as_path()] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
        }
        let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(&side)?)?;
        let pages = read_pages(path)?;
        let (h, w) = pages.first().map(|p| (p.0, p.1)).unwrap_or((0, 0));
        let panel_len = sidecar.panel.len();
        if pages.len() != panel_len {
            return Err(Error::PanelMismatch(format!(
                "{} has {} pages but its sidecar lists {panel_len} markers",
                path.display(),
                pages.len()
            )));
        }
        if let Some(expected) = expected {
            expected.ensure_same(&sidecar.panel, &format!("image {}", path.display()))?;
        }
        let mut data = Vec::with_capacity(pages.len() * h * w);
        for (ph, pw, page) in pages {
            if (ph, pw) != (h, w) {
                return Err(Error::Corrupt(format!("{}: pages differ in size", path.display())));
            }
            data.extend(page);
        }
        Self::new(
            sidecar.image_id,
            sidecar.panel,
            FeatureMap::from_vec(panel_len, h, w, data),
            sidecar.pixel_size_um,
        )
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn open_decoder(path: &Path) -> Result<Decoder<std::io::BufReader<std::fs::File>>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut limits = Limits::default();
    limits.decoding_buffer_size = 1 << 31;
    Ok(Decoder::new(file)?.with_limits(limits))
}

/// Every page of a float TIFF as `(height, width, values)`.
fn read_pages(path: &Path) -> Result<Vec<(usize, usize, Vec<f32>)>> {
    let mut dec = open_decoder(path)?;
    let mut pages = Vec::new();
    loop {
        let (w, h) = dec.dimensions()?;
        let values = match dec.read_image()? {
            DecodingResult::F32(v) => v,
            DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
            _ => return Err(Error::Data(format!("{}: unsupported sample format", path.display()))),
        };
        if values.len() != (w as usize) * (h as usize) {
            return Err(Error::Data(format!("{}: only single-sample grayscale pages are supported", path.display())));
        }
        pages.push((h as usize, w as usize, values));
        if !dec.more_images() {
            break;
        }
        dec.next_image()?;
    }
    Ok(pages)
}

/// Loads every `*.tif` / `*.tiff` image in `dir`, sorted by file name.
pub fn load_images(dir: &Path, expected: Option<&MarkerPanel>) -> Result<Vec<MultichannelImage>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("tif") || e.eq_ignore_ascii_case("tiff"))
        })
        .filter(|p| sidecar_path(p).exists())
        .collect();
    paths.sort();
    paths.iter().map(|p| MultichannelImage::load(p, expected)).collect()
}

/// Cell label image: 0 is background, `i > 0` is one cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {}x{} needs {} labels, got {}",
                height,
                width,
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Writes a 16-bit single-page TIFF.
    pub fn save(&self, path: &Path) -> Result<()> {
        let labels: Vec<u16> = self
            .labels
            .iter()
            .map(|&l| u16::try_from(l).map_err(|_| Error::Data(format!("mask label {l} does not fit 16 bits"))))
            .collect::<Result<_>>()?;
        let mut buf = Cursor::new(Vec::new());
        TiffEncoder::new(&mut buf)?.write_image::<colortype::Gray16>(self.width as u32, self.height as u32, &labels)?;
        write_atomic(path, &buf.into_inner())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut dec = open_decoder(path)?;
        let (w, h) = dec.dimensions()?;
        let labels: Vec<u32> = match dec.read_image()? {
            DecodingResult::U8(v) => v.into_iter().map(u32::from).collect(),
            DecodingResult::U16(v) => v.into_iter().map(u32::from).collect(),
            DecodingResult::U32(v) => v,
            _ => return Err(Error::Data(format!("{}: mask must hold unsigned integers", path.display()))),
        };
        Self::new(h as usize, w as usize, labels)
    }
}
