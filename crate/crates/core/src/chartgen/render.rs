use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::font::{self, ADVANCE, GLYPH_H};
use super::palette::{BACKGROUND, INK, PALETTE};
use super::spec::{ChartSpec, ChartType, LineStyle, RESOLUTIONS};
use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl RasterImage {
    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Self {
        let pixels = color.iter().copied().cycle().take((width * height * 3) as usize).collect();
        Self { width, height, pixels }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = ((y as u32 * self.width + x as u32) * 3) as usize;
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.put(x, y, color);
            }
        }
    }

    fn text(&mut self, text: &str, x: i64, y: i64, scale: u32) {
        let mut pts = Vec::new();
        font::for_each_pixel(text, x, y, scale, |px, py| pts.push((px, py)));
        for (px, py) in pts {
            self.put(px, py, INK);
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width, self.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Png { path: path.to_path_buf(), detail: e.to_string() };
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&self.pixels).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let png_err = |detail: String| Error::Png { path: path.to_path_buf(), detail };
        let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| png_err(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(png_err(format!("expected 8-bit RGB, got {:?}/{:?}", info.color_type, info.bit_depth)));
        }
        buf.truncate(info.buffer_size());
        Ok(Self { width: info.width, height: info.height, pixels: buf })
    }
}

/// Pixel geometry of a rendered chart. The plot area spans columns
/// `plot_left..plot_right` and rows `plot_top..=baseline`; a value at the
/// bottom of the y-range sits on `baseline`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub resolution: u32,
    pub scale: u32,
    pub plot_left: i64,
    pub plot_right: i64,
    pub plot_top: i64,
    pub baseline: i64,
}

impl Layout {
    pub fn plot_width(&self) -> i64 {
        self.plot_right - self.plot_left
    }

    /// Number of pixel rows a full-range bar covers.
    pub fn plot_height(&self) -> i64 {
        self.baseline - self.plot_top + 1
    }

    /// Horizontal extent `[start, end)` of category slot `i` of `n`.
    pub fn slot(&self, i: usize, n: usize) -> (i64, i64) {
        let w = self.plot_width();
        (self.plot_left + i as i64 * w / n as i64, self.plot_left + (i as i64 + 1) * w / n as i64)
    }

    /// Bar height in pixels for a value.
    pub fn bar_pixels(&self, value: f64, range: (f64, f64)) -> i64 {
        let frac = (value - range.0) / (range.1 - range.0);
        (frac * self.plot_height() as f64).round() as i64
    }

    /// Row of a line-chart point.
    pub fn point_row(&self, value: f64, range: (f64, f64)) -> i64 {
        let frac = (value - range.0) / (range.1 - range.0);
        self.baseline - (frac * (self.plot_height() - 1) as f64).round() as i64
    }
}

fn axis_label(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        super::fmt1(v)
    }
}

fn truncate_to(text: &str, width: i64, scale: u32) -> String {
    let fit = ((width + 1) / (ADVANCE * scale) as i64).max(0) as usize;
    text.chars().take(fit).collect()
}

/// Compute the layout for `spec` at `resolution`, rejecting layouts whose
/// plot area or bar slots are too small.
pub fn layout(spec: &ChartSpec, resolution: u32) -> Result<Layout> {
    if !RESOLUTIONS.contains(&resolution) {
        return Err(Error::Layout { resolution, detail: format!("supported resolutions are {RESOLUTIONS:?}") });
    }
    let scale = if resolution >= 224 { 2 } else { 1 };
    let th = (GLYPH_H * scale) as i64;
    let r = resolution as i64;
    let mut top = 1 + th + 2;
    if spec.series.len() > 1 {
        top += th + 1;
    }
    let (lo, hi) = spec.y_range;
    let label_w = font::text_width(&axis_label(lo), scale).max(font::text_width(&axis_label(hi), scale)) as i64;
    let l = Layout {
        resolution,
        scale,
        plot_left: 1 + label_w + 3,
        plot_right: r - 3,
        plot_top: top + th / 2,
        baseline: r - th - 5,
    };
    if l.plot_width() < 16 || l.plot_height() < 16 {
        return Err(Error::Layout {
            resolution,
            detail: format!("plot area {}x{} is below 16x16", l.plot_width(), l.plot_height()),
        });
    }
    let slot_w = l.plot_width() / spec.categories.len() as i64;
    if spec.chart_type == ChartType::Bar && slot_w - 1 < spec.series.len() as i64 {
        return Err(Error::Layout {
            resolution,
            detail: format!("{} bars do not fit a {slot_w}px slot", spec.series.len()),
        });
    }
    Ok(l)
}

/// Bar rectangles `(x0, y0, x1, y1)` (half-open) per series, per category.
pub fn bar_rects(spec: &ChartSpec, l: &Layout) -> Vec<Vec<(i64, i64, i64, i64)>> {
    let n_cat = spec.categories.len();
    let n_ser = spec.series.len() as i64;
    spec.series
        .iter()
        .enumerate()
        .map(|(j, s)| {
            (0..n_cat)
                .map(|i| {
                    let (gx0, gx1) = l.slot(i, n_cat);
                    let gw = gx1 - gx0;
                    let bw = ((gw * 4 / 5) / n_ser).max(1).min((gw - 1) / n_ser);
                    let off = (gw - bw * n_ser) / 2;
                    let x0 = gx0 + off + j as i64 * bw;
                    let h = l.bar_pixels(s.values[i], spec.y_range);
                    (x0, l.baseline - h + 1, x0 + bw, l.baseline + 1)
                })
                .collect()
        })
        .collect()
}

fn pattern_on(style: LineStyle, k: u64) -> bool {
    match style {
        LineStyle::Solid => true,
        LineStyle::Dashed => k % 6 < 4,
        LineStyle::Dotted => k.is_multiple_of(2),
    }
}

/// Bresenham segment; `k` counts pixels along the whole polyline so the
/// dash pattern continues across vertices.
fn segment(img: &mut RasterImage, a: (i64, i64), b: (i64, i64), style: LineStyle, color: [u8; 3], k: &mut u64) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if pattern_on(style, *k) {
            img.put(x, y, color);
        }
        if (x, y) == b {
            break;
        }
        *k += 1;
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Rasterize a chart. Bit-identical for identical `(spec, resolution)`.
pub fn render_chart(spec: &ChartSpec, resolution: u32) -> Result<RasterImage> {
    spec.validate()?;
    let l = layout(spec, resolution)?;
    let s = l.scale;
    let th = (GLYPH_H * s) as i64;
    let r = resolution as i64;
    let mut img = RasterImage::filled(resolution, resolution, BACKGROUND);

    // title band
    let title = truncate_to(&spec.title, r - 4, s);
    let tw = font::text_width(&title, s) as i64;
    img.text(&title, (r - tw) / 2, 1, s);

    // legend band: swatch plus as much of the name as fits
    if spec.series.len() > 1 {
        let y = 1 + th + 2;
        let item_w = (r - 4) / spec.series.len() as i64;
        for (j, ser) in spec.series.iter().enumerate() {
            let x = 2 + j as i64 * item_w;
            let sw = th - 2;
            img.fill_rect(x, y + 1, x + sw, y + 1 + sw, PALETTE[ser.color_index]);
            let name = truncate_to(&ser.name, item_w - sw - 3, s);
            img.text(&name, x + sw + 2, y, s);
        }
    }

    // axes and ticks
    let (lo, hi) = spec.y_range;
    let axis_x = l.plot_left - 1;
    img.fill_rect(axis_x, l.plot_top, axis_x + 1, l.baseline + 2, INK);
    img.fill_rect(axis_x, l.baseline + 1, l.plot_right, l.baseline + 2, INK);
    for (v, row) in [(lo, l.baseline), (hi, l.plot_top)] {
        img.fill_rect(axis_x - 2, row, axis_x, row + 1, INK);
        let label = axis_label(v);
        let w = font::text_width(&label, s) as i64;
        let y = (row - th / 2).clamp(0, r - th);
        img.text(&label, axis_x - 3 - w, y, s);
    }
    let n_cat = spec.categories.len();
    for (i, cat) in spec.categories.iter().enumerate() {
        let (x0, x1) = l.slot(i, n_cat);
        let cx = (x0 + x1) / 2;
        img.fill_rect(cx, l.baseline + 2, cx + 1, l.baseline + 4, INK);
        let label = truncate_to(cat, x1 - x0, s);
        let w = font::text_width(&label, s) as i64;
        img.text(&label, cx - w / 2, l.baseline + 4, s);
    }

    // data marks
    match spec.chart_type {
        ChartType::Bar => {
            for (j, rects) in bar_rects(spec, &l).into_iter().enumerate() {
                let color = PALETTE[spec.series[j].color_index];
                for (x0, y0, x1, y1) in rects {
                    img.fill_rect(x0, y0, x1, y1, color);
                }
            }
        }
        ChartType::Line | ChartType::Dotline => {
            for ser in &spec.series {
                let color = PALETTE[ser.color_index];
                let style = ser.line_style.unwrap_or(LineStyle::Solid);
                let pts: Vec<(i64, i64)> = (0..n_cat)
                    .map(|i| {
                        let (x0, x1) = l.slot(i, n_cat);
                        ((x0 + x1) / 2, l.point_row(ser.values[i], spec.y_range))
                    })
                    .collect();
                let mut k = 0u64;
                for w in pts.windows(2) {
                    segment(&mut img, w[0], w[1], style, color, &mut k);
                }
                if spec.chart_type == ChartType::Dotline {
                    let m = s as i64;
                    for &(x, y) in &pts {
                        img.fill_rect(x - m, y - m, x + m + 1, y + m + 1, color);
                    }
                }
            }
        }
    }
    Ok(img)
}
