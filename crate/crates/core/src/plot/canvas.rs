use std::io::BufWriter;
use std::path::Path;

use super::font::{self, ADVANCE, GLYPH_H, GLYPH_W};

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GRAY: Rgb = [128, 128, 128];
pub const LIGHT_GRAY: Rgb = [225, 225, 225];

/// Ten distinguishable series colors.
pub const PALETTE: [Rgb; 10] = [
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

pub fn palette(i: usize) -> Rgb {
    PALETTE[i % PALETTE.len()]
}

/// 150 dots per inch expressed in pixels per metre.
pub const PIXELS_PER_METRE: u32 = 5906;

#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pixels: Vec<Rgb>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Align {
    Left,
    Center,
    Right,
}

impl Canvas {
    pub fn new(width: usize, height: usize, background: Rgb) -> Self {
        Self { width, height, pixels: vec![background; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: Rgb) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, c);
            }
        }
    }

    pub fn stroke_rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: Rgb) {
        self.line(x, y, x + w - 1, y, c, 1);
        self.line(x, y + h - 1, x + w - 1, y + h - 1, c, 1);
        self.line(x, y, x, y + h - 1, c, 1);
        self.line(x + w - 1, y, x + w - 1, y + h - 1, c, 1);
    }

    /// Bresenham line stamped with a `thickness`-wide square.
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb, thickness: i64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        let lo = -(thickness - 1) / 2;
        loop {
            self.fill_rect(x + lo, y + lo, thickness, thickness, c);
            if x == x1 && y == y1 {
                break;
            }
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

    pub fn disc(&mut self, cx: i64, cy: i64, r: i64, c: Rgb) {
        for y in -r..=r {
            for x in -r..=r {
                if x * x + y * y <= r * r {
                    self.set(cx + x, cy + y, c);
                }
            }
        }
    }

    pub fn text_width(s: &str, scale: usize) -> i64 {
        let n = s.chars().count();
        if n == 0 {
            0
        } else {
            ((n * ADVANCE - 1) * scale) as i64
        }
    }

    pub fn text_height(scale: usize) -> i64 {
        (GLYPH_H * scale) as i64
    }

    /// Horizontal text with its top edge at `y`.
    pub fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb, scale: usize, align: Align) {
        let w = Self::text_width(s, scale);
        let x0 = match align {
            Align::Left => x,
            Align::Center => x - w / 2,
            Align::Right => x - w,
        };
        let sc = scale as i64;
        for (i, ch) in s.chars().enumerate() {
            let gx = x0 + (i * ADVANCE * scale) as i64;
            for col in 0..GLYPH_W {
                for row in 0..GLYPH_H {
                    if font::pixel(ch, col, row) {
                        self.fill_rect(gx + col as i64 * sc, y + row as i64 * sc, sc, sc, c);
                    }
                }
            }
        }
    }

    /// Text rotated a quarter turn counter-clockwise (reads bottom to top),
    /// with its left edge at `x`; `y` is the anchor along the baseline.
    pub fn text_vertical(&mut self, x: i64, y: i64, s: &str, c: Rgb, scale: usize, align: Align) {
        let w = Self::text_width(s, scale);
        let y0 = match align {
            Align::Left => y,
            Align::Center => y + w / 2,
            Align::Right => y + w,
        };
        let sc = scale as i64;
        for (i, ch) in s.chars().enumerate() {
            let gy = y0 - (i * ADVANCE * scale) as i64;
            for col in 0..GLYPH_W {
                for row in 0..GLYPH_H {
                    if font::pixel(ch, col, row) {
                        self.fill_rect(x + row as i64 * sc, gy - (col as i64 + 1) * sc, sc, sc, c);
                    }
                }
            }
        }
    }

    /// 8-bit RGB PNG tagged with a 150 dpi physical size.
    pub fn write_png(&self, path: &Path) -> Result<(), png::EncodingError> {
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_pixel_dims(Some(png::PixelDimensions {
            xppu: PIXELS_PER_METRE,
            yppu: PIXELS_PER_METRE,
            unit: png::Unit::Meter,
        }));
        let mut writer = enc.write_header()?;
        let data: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        writer.write_image_data(&data)?;
        writer.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_endpoints_are_drawn() {
        let mut c = Canvas::new(10, 10, WHITE);
        c.line(1, 2, 8, 7, BLACK, 1);
        assert_eq!(c.get(1, 2), BLACK);
        assert_eq!(c.get(8, 7), BLACK);
        assert_eq!(c.get(0, 9), WHITE);
    }

    #[test]
    fn drawing_outside_is_clipped() {
        let mut c = Canvas::new(4, 4, WHITE);
        c.fill_rect(-10, -10, 100, 2, BLACK);
        c.text(-3, 10, "clipped", BLACK, 3, Align::Left);
        assert_eq!(c.get(3, 3), WHITE);
    }

    #[test]
    fn text_width_matches_glyph_count() {
        assert_eq!(Canvas::text_width("abc", 2), (3 * 6 - 1) * 2);
        let mut c = Canvas::new(40, 20, WHITE);
        c.text(0, 0, "I", BLACK, 1, Align::Left);
        assert_eq!(c.get(2, 0), BLACK);
        assert_eq!(c.get(0, 3), WHITE);
    }

    #[test]
    fn png_carries_150_dpi() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        Canvas::new(3, 2, [10, 20, 30]).write_png(&path).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
        let reader = decoder.read_info().unwrap();
        let dims = reader.info().pixel_dims.unwrap();
        assert_eq!((dims.xppu, dims.unit), (5906, png::Unit::Meter));
        assert_eq!((reader.info().width, reader.info().height), (3, 2));
    }
}
