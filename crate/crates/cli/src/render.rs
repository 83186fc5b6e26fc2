//! Binary PPM rasters with a baked heat ramp, and hand-written SVG line plots.

use std::fmt::Write as _;

use rfga_core::wsol::BoundingBox;
use rfga_core::Tensor;

/// Viridis sampled at 0.0, 0.1, …, 1.0.
const RAMP: [[f64; 3]; 11] = [
    [0.267, 0.005, 0.329],
    [0.283, 0.141, 0.458],
    [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553],
    [0.164, 0.471, 0.558],
    [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518],
    [0.267, 0.749, 0.441],
    [0.478, 0.821, 0.318],
    [0.741, 0.873, 0.150],
    [0.993, 0.906, 0.144],
];

pub const GT_COLOR: [u8; 3] = [230, 30, 30];
pub const PRED_COLOR: [u8; 3] = [30, 210, 60];

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Ramp colour for `v` in `[0,1]`.
pub fn heat(v: f64) -> [u8; 3] {
    let x = v.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    [0, 1, 2].map(|c| to_byte(a[c] + (b[c] - a[c]) * f))
}

pub fn gray(v: f64) -> [u8; 3] {
    [to_byte(v); 3]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    /// A `[h,w]` map stretched to `size x size` by nearest neighbour.
    pub fn from_map(map: &Tensor, size: usize, color: fn(f64) -> [u8; 3]) -> Self {
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let mut r = Self::filled(size, size, [0; 3]);
        for y in 0..size {
            for x in 0..size {
                r.pixels[y * size + x] = color(map.at(&[y * h / size, x * w / size]));
            }
        }
        r
    }

    /// An RGB `[3,S,S]` image in `[0,1]`.
    pub fn from_image(image: &Tensor) -> Self {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let d = image.data();
        let mut r = Self::filled(w, h, [0; 3]);
        for i in 0..h * w {
            r.pixels[i] = [0, 1, 2].map(|c| to_byte(d[c * h * w + i]));
        }
        r
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = c;
        }
    }

    /// One-pixel outline.
    pub fn draw_box(&mut self, b: &BoundingBox, c: [u8; 3]) {
        for x in b.x_min..=b.x_max {
            self.set(x, b.y_min, c);
            self.set(x, b.y_max, c);
        }
        for y in b.y_min..=b.y_max {
            self.set(b.x_min, y, c);
            self.set(b.x_max, y, c);
        }
    }

    pub fn blit(&mut self, src: &Raster, x0: usize, y0: usize) {
        for y in 0..src.height {
            for x in 0..src.width {
                self.set(x0 + x, y0 + y, src.get(x, y));
            }
        }
    }

    /// Row-major grid of equally sized panels separated by `gap` pixels.
    pub fn grid(panels: &[Raster], columns: usize, gap: usize) -> Raster {
        let columns = columns.max(1);
        let pw = panels.iter().map(|p| p.width).max().unwrap_or(0);
        let ph = panels.iter().map(|p| p.height).max().unwrap_or(0);
        let rows = panels.len().div_ceil(columns).max(1);
        let mut out = Raster::filled(
            columns * pw + (columns + 1) * gap,
            rows * ph + (rows + 1) * gap,
            [0; 3],
        );
        for (i, p) in panels.iter().enumerate() {
            let (r, c) = (i / columns, i % columns);
            out.blit(p, gap + c * (pw + gap), gap + r * (ph + gap));
        }
        out
    }

    /// Binary `P6` encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

pub const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot of `(x, y)` series on the unit square.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 60.0;
    const R: f64 = 170.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let px = |x: f64| L + x.clamp(0.0, 1.0) * (W - L - R);
    let py = |y: f64| H - B - y.clamp(0.0, 1.0) * (H - T - B);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (L + W - R) / 2.0,
        escape(title)
    );
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let _ = writeln!(
            s,
            r##"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="#ddd"/><line x1="{3:.1}" y1="{4:.1}" x2="{5:.1}" y2="{4:.1}" stroke="#ddd"/>"##,
            px(v),
            py(0.0),
            py(1.0),
            px(0.0),
            py(v),
            px(1.0)
        );
        if i % 2 == 0 {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
                px(v),
                py(0.0) + 18.0,
                px(0.0) - 6.0,
                py(v) + 4.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<rect x="{L}" y="{T}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - L - R,
        H - T - B
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (L + W - R) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (T + H - B) / 2.0,
        escape(y_label)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
            path.join(" ")
        );
        let ly = T + 14.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="3"/><text x="{3}" y="{4}">{5}</text>"#,
            W - R + 12.0,
            ly,
            W - R + 36.0,
            W - R + 42.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(heat(0.0), [68, 1, 84]);
        assert_eq!(heat(1.0), [253, 231, 37]);
        assert_eq!(heat(2.0), heat(1.0));
        assert_eq!(gray(0.5), [128; 3]);
    }

    #[test]
    fn ppm_header_and_size() {
        let r = Raster::filled(3, 2, [1, 2, 3]);
        let bytes = r.to_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), "P6\n3 2\n255\n".len() + 18);
    }

    #[test]
    fn box_outline_stays_on_border() {
        let mut r = Raster::filled(6, 6, [0; 3]);
        r.draw_box(&BoundingBox::new(1, 1, 4, 3).unwrap(), GT_COLOR);
        assert_eq!(r.get(1, 1), GT_COLOR);
        assert_eq!(r.get(4, 3), GT_COLOR);
        assert_eq!(r.get(2, 2), [0; 3]);
        assert_eq!(r.pixels.iter().filter(|&&p| p == GT_COLOR).count(), 10);
    }

    #[test]
    fn grid_layout() {
        let p = Raster::filled(4, 4, [9; 3]);
        let g = Raster::grid(&[p.clone(), p.clone(), p], 2, 1);
        assert_eq!((g.width, g.height), (11, 11));
        assert_eq!(g.get(6, 6), [0; 3]);
        assert_eq!(g.get(1, 6), [9; 3]);
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let s = line_plot_svg(
            "t",
            "x",
            "y",
            &[("a<b".into(), vec![(0.0, 0.0), (1.0, 1.0)]), ("c".into(), vec![(0.5, 0.2)])],
        );
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.contains("a&lt;b"));
    }
}
