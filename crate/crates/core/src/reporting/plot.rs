//! Minimal deterministic line-chart rasteriser (axes, light grid, one series).

use image::{Rgb, RgbImage};

#[derive(Debug, Clone, Copy)]
pub struct PlotStyle {
    pub width: u32,
    pub height: u32,
    pub margin: u32,
    pub colour: [u8; 3],
}

impl Default for PlotStyle {
    fn default() -> Self {
        Self { width: 640, height: 400, margin: 40, colour: [0, 0, 0] }
    }
}

impl PlotStyle {
    pub fn with_colour(mut self, colour: [u8; 3]) -> Self {
        self.colour = colour;
        self
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), colour: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, colour);
        }
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

/// Plots `ys` against `xs`; non-finite points break the polyline.
pub fn line_plot(xs: &[f64], ys: &[f64], style: &PlotStyle) -> RgbImage {
    let mut img = RgbImage::from_pixel(style.width, style.height, Rgb([255, 255, 255]));
    let m = style.margin as i64;
    let (w, h) = (style.width as i64, style.height as i64);
    let (left, right, top, bottom) = (m, w - m / 2, m / 2, h - m);

    let grid = Rgb([225, 225, 225]);
    for k in 1..5 {
        let y = top + (bottom - top) * k / 5;
        draw_line(&mut img, (left, y), (right, y), grid);
    }
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (left, top), (left, bottom), axis);
    draw_line(&mut img, (left, bottom), (right, bottom), axis);

    let finite = |v: &f64| v.is_finite();
    let (xmin, xmax) = bounds(xs.iter().copied().filter(finite));
    let (ymin, ymax) = bounds(ys.iter().copied().filter(finite));
    let px = |x: f64| left + ((x - xmin) / (xmax - xmin) * (right - left) as f64).round() as i64;
    let py = |y: f64| bottom - ((y - ymin) / (ymax - ymin) * (bottom - top) as f64).round() as i64;

    let colour = Rgb(style.colour);
    let mut prev: Option<(i64, i64)> = None;
    for (&x, &y) in xs.iter().zip(ys) {
        if !(x.is_finite() && y.is_finite()) {
            prev = None;
            continue;
        }
        let p = (px(x), py(y));
        match prev {
            Some(q) => draw_line(&mut img, q, p, colour),
            None => draw_line(&mut img, p, p, colour),
        }
        prev = Some(p);
    }
    img
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}
