//! 8-bit rasters: binary PGM/PPM I/O, exact crops and heatmap rendering.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Rect, SaliencyGrid};

/// Row-major interleaved 8-bit raster with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "{} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Self {
        let n = width as usize * height as usize * channels as usize;
        RasterImage::new(width, height, channels, vec![value; n]).expect("consistent dims")
    }

    pub fn rect(&self) -> Rect {
        Rect::of_size(self.width, self.height)
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    /// Samples of one pixel (1 or 3 bytes).
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let o = self.offset(x, y);
        &self.data[o..o + self.channels as usize]
    }

    pub fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let p = self.pixel(x, y);
        if self.channels == 1 {
            [p[0]; 3]
        } else {
            [p[0], p[1], p[2]]
        }
    }

    pub fn set_rgb(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        if self.channels == 1 {
            self.data[o] = luma(rgb);
        } else {
            self.data[o..o + 3].copy_from_slice(&rgb);
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_pixmap(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, write_pixmap(self))?;
        Ok(())
    }
}

fn luma(rgb: [u8; 3]) -> u8 {
    ((rgb[0] as u32 * 299 + rgb[1] as u32 * 587 + rgb[2] as u32 * 114 + 500) / 1000) as u8
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn skip_whitespace(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_whitespace();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse::<u32>() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.fail(format!("{what} out of range"))
            }
        }
    }
}

/// Parses a binary P5 (gray) or P6 (RGB) pixmap with maxval 255.
pub fn read_pixmap(bytes: &[u8]) -> Result<RasterImage> {
    let mut r = HeaderReader { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1u8,
        Some(b"P6") => 3u8,
        _ => return r.fail("expected P5 or P6 magic"),
    };
    r.pos = 2;
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return r.fail("expected whitespace after magic");
    }
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return r.fail("zero image dimension");
    }
    if maxval != 255 {
        return r.fail(format!("maxval {maxval} unsupported; expected 255"));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return r.fail("expected single whitespace after maxval"),
    }
    let expected = width as usize * height as usize * channels as usize;
    let payload = &bytes[r.pos..];
    if payload.len() < expected {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!(
                "truncated payload: header declares {expected} samples, found {}",
                payload.len()
            ),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format {
            offset: r.pos + expected,
            message: format!("{} trailing bytes after payload", payload.len() - expected),
        });
    }
    RasterImage::new(width, height, channels, payload.to_vec())
}

/// Serializes as `P5`/`P6`, `"{magic}\n{w} {h}\n255\n"` followed by the samples.
pub fn write_pixmap(image: &RasterImage) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

/// Exact pixel copy of the half-open `rect`.
pub fn crop(image: &RasterImage, rect: &Rect) -> Result<RasterImage> {
    if rect.is_empty() || !image.rect().contains(rect) {
        return Err(Error::invalid(format!(
            "crop {rect:?} outside {}x{} image",
            image.width, image.height
        )));
    }
    let ch = image.channels as usize;
    let row_len = rect.w as usize * ch;
    let mut data = Vec::with_capacity(row_len * rect.h as usize);
    for y in rect.y..rect.y + rect.h {
        let o = image.offset(rect.x, y);
        data.extend_from_slice(&image.data[o..o + row_len]);
    }
    RasterImage::new(rect.w, rect.h, image.channels, data)
}

const OUTLINE: [u8; 3] = [255, 255, 0];

/// Renders a saliency grid at the pixel size of its view.
///
/// Without `base` the result is min-max normalized grayscale (a constant map
/// renders as 128), upscaled nearest-neighbor. With `base` (the view's pixels)
/// the heat is blended 50/50 over it as a blue-to-red ramp and every rect in
/// `outlines` (original-image coordinates) is drawn as a 1 px frame.
pub fn render_heatmap(map: &SaliencyGrid, base: Option<&RasterImage>, outlines: &[Rect]) -> RasterImage {
    let view = map.grid.view_rect;
    let (lo, hi) = (map.min(), map.max());
    let levels: Vec<u8> = map
        .scores
        .iter()
        .map(|&s| {
            if hi - lo > 0.0 {
                ((s - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();
    let level_at = |x: u32, y: u32| {
        let col = (x as usize * map.grid.cols) / view.w as usize;
        let row = (y as usize * map.grid.rows) / view.h as usize;
        levels[map.grid.index(row, col)]
    };

    let Some(base) = base else {
        let mut data = Vec::with_capacity(view.w as usize * view.h as usize);
        for y in 0..view.h {
            for x in 0..view.w {
                data.push(level_at(x, y));
            }
        }
        return RasterImage::new(view.w, view.h, 1, data).expect("consistent dims");
    };

    let mut out = RasterImage::filled(view.w, view.h, 3, 0);
    for y in 0..view.h {
        for x in 0..view.w {
            let bx = (x as u64 * base.width as u64 / view.w as u64) as u32;
            let by = (y as u64 * base.height as u64 / view.h as u64) as u32;
            let b = base.rgb(bx, by);
            let v = level_at(x, y);
            let heat = [v, 0, 255 - v];
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = (b[c] as u16 + heat[c] as u16).div_ceil(2) as u8;
            }
            out.set_rgb(x, y, px);
        }
    }
    for r in outlines {
        let Some(clip) = r.intersection(&view) else {
            continue;
        };
        let local = clip.relative_to(&view).expect("clipped to view");
        let (x0, y0) = (local.x, local.y);
        let (x1, y1) = (local.x + local.w - 1, local.y + local.h - 1);
        for x in x0..=x1 {
            out.set_rgb(x, y0, OUTLINE);
            out.set_rgb(x, y1, OUTLINE);
        }
        for y in y0..=y1 {
            out.set_rgb(x0, y, OUTLINE);
            out.set_rgb(x1, y, OUTLINE);
        }
    }
    out
}
