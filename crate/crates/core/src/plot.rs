//! Grouped bar chart of per-class PSNR (noisy vs restored) with the
//! improvement drawn as a line on a secondary axis.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::eval::{EvalReport, PSNR_DISPLAY_CAP};

const NOISY: [u8; 3] = [0x9e, 0xb3, 0xc2];
const RESTORED: [u8; 3] = [0x1f, 0x5f, 0x8b];
const DELTA: [u8; 3] = [0xd9, 0x48, 0x1f];

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn cap(v: f64) -> f64 {
    if v.is_finite() { v } else { PSNR_DISPLAY_CAP }.min(PSNR_DISPLAY_CAP)
}

struct Layout {
    width: f64,
    height: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    y_max: f64,
    d_min: f64,
    d_max: f64,
    groups: usize,
}

impl Layout {
    fn new(reports: &[EvalReport]) -> Layout {
        let groups = reports.len();
        let y_max = reports
            .iter()
            .flat_map(|r| [cap(r.mean_noisy), cap(r.mean_restored)])
            .fold(1.0f64, f64::max);
        let deltas: Vec<f64> = reports.iter().map(|r| cap(r.mean_restored) - cap(r.mean_noisy)).collect();
        let d_min = deltas.iter().copied().fold(0.0f64, f64::min);
        let mut d_max = deltas.iter().copied().fold(0.0f64, f64::max);
        if d_max - d_min < 1e-9 {
            d_max = d_min + 1.0;
        }
        Layout {
            width: (120.0 + 28.0 * groups as f64).max(480.0),
            height: 360.0,
            left: 60.0,
            right: 60.0,
            top: 30.0,
            bottom: 60.0,
            y_max: (y_max / 5.0).ceil() * 5.0,
            d_min,
            d_max,
            groups,
        }
    }

    fn plot_w(&self) -> f64 {
        self.width - self.left - self.right
    }

    fn plot_h(&self) -> f64 {
        self.height - self.top - self.bottom
    }

    fn group_x(&self, i: usize) -> f64 {
        self.left + self.plot_w() * (i as f64 + 0.5) / self.groups as f64
    }

    fn bar_w(&self) -> f64 {
        (self.plot_w() / self.groups as f64 * 0.35).max(1.0)
    }

    fn y(&self, db: f64) -> f64 {
        self.top + self.plot_h() * (1.0 - db / self.y_max)
    }

    fn y_delta(&self, d: f64) -> f64 {
        self.top + self.plot_h() * (1.0 - (d - self.d_min) / (self.d_max - self.d_min))
    }
}

fn check(reports: &[EvalReport]) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("plot needs at least one report".into()));
    }
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the chart as an SVG document. Each report becomes one group of
/// two bars and one point of the delta line.
pub fn render_svg(reports: &[EvalReport]) -> Result<String> {
    check(reports)?;
    let l = Layout::new(reports);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#,
        w = l.width,
        h = l.height
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1, yb) = (l.left, l.width - l.right, l.top + l.plot_h());
    let _ = writeln!(s, r#"<line class="axis" x1="{x0}" y1="{yb}" x2="{x1}" y2="{yb}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line class="axis" x1="{x0}" y1="{}" x2="{x0}" y2="{yb}" stroke="black"/>"#, l.top);
    let mut tick = 0.0;
    while tick <= l.y_max + 1e-9 {
        let y = l.y(tick);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{tick:.0}</text>"#, x0 - 4.0, y + 4.0);
        tick += (l.y_max / 5.0).max(1.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">PSNR (dB)</text>"#,
        l.top + l.plot_h() / 2.0,
        l.top + l.plot_h() / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" transform="rotate(90 {} {})" text-anchor="middle">improvement (dB)</text>"#,
        l.width - 14.0,
        l.top + l.plot_h() / 2.0,
        l.width - 14.0,
        l.top + l.plot_h() / 2.0
    );
    for (i, d) in [l.d_min, l.d_max].iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{}">{d:.1}</text>"#, x1 + 4.0, l.y_delta(*d) + 4.0 * i as f64, hex(DELTA));
    }
    let bw = l.bar_w();
    let mut points = Vec::with_capacity(reports.len());
    for (i, r) in reports.iter().enumerate() {
        let cx = l.group_x(i);
        for (class, v, x, color) in [
            ("noisy", cap(r.mean_noisy), cx - bw, NOISY),
            ("restored", cap(r.mean_restored), cx, RESTORED),
        ] {
            let y = l.y(v.max(0.0));
            let _ = writeln!(
                s,
                r#"<rect class="bar {class}" x="{x:.2}" y="{y:.2}" width="{bw:.2}" height="{:.2}" fill="{}"><title>{} {class}: {v:.2} dB</title></rect>"#,
                yb - y,
                hex(color),
                escape(&r.name)
            );
        }
        let _ = writeln!(
            s,
            r#"<text class="label" x="{cx:.2}" y="{}" text-anchor="end" transform="rotate(-60 {cx:.2} {})">{}</text>"#,
            yb + 12.0,
            yb + 12.0,
            escape(&r.name)
        );
        points.push((cx, l.y_delta(cap(r.mean_restored) - cap(r.mean_noisy))));
    }
    let path: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        s,
        r#"<polyline class="delta" points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
        path.join(" "),
        hex(DELTA)
    );
    for (x, y) in &points {
        let _ = writeln!(s, r#"<circle class="delta-point" cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{}"/>"#, hex(DELTA));
    }
    let lx = x0 + 8.0;
    for (k, (label, color)) in [("noisy", NOISY), ("restored", RESTORED), ("improvement", DELTA)].iter().enumerate() {
        let ly = l.top + 4.0 + 14.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{lx}" y="{ly}" width="10" height="10" fill="{}"/>"#, hex(*color));
        let _ = writeln!(s, r#"<text x="{}" y="{}">{label}</text>"#, lx + 14.0, ly + 9.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Raster version of the chart (bars, axes and the delta line, no text).
pub fn render_png(reports: &[EvalReport]) -> Result<RgbImage> {
    check(reports)?;
    let l = Layout::new(reports);
    let mut img = RgbImage::from_pixel(l.width as u32, l.height as u32, Rgb([255, 255, 255]));
    let yb = l.top + l.plot_h();
    let bw = l.bar_w();
    for (i, r) in reports.iter().enumerate() {
        let cx = l.group_x(i);
        for (v, x, color) in [(cap(r.mean_noisy), cx - bw, NOISY), (cap(r.mean_restored), cx, RESTORED)] {
            let y = l.y(v.max(0.0));
            for py in y.round() as u32..yb.round() as u32 {
                for px in x.round() as u32..(x + bw).round().max(x.round() + 1.0) as u32 {
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, Rgb(color));
                    }
                }
            }
        }
    }
    let black = Rgb([0, 0, 0]);
    draw_line(&mut img, (l.left, yb), (l.width - l.right, yb), black);
    draw_line(&mut img, (l.left, l.top), (l.left, yb), black);
    let pts: Vec<(f64, f64)> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| (l.group_x(i), l.y_delta(cap(r.mean_restored) - cap(r.mean_noisy))))
        .collect();
    for w in pts.windows(2) {
        draw_line(&mut img, w[0], w[1], Rgb(DELTA));
    }
    for &(x, y) in &pts {
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                let (px, py) = (x as i32 + dx, y as i32 + dy);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, Rgb(DELTA));
                }
            }
        }
    }
    Ok(img)
}

/// Writes `<stem>.svg` and `<stem>.png` next to each other.
pub fn write_plot(reports: &[EvalReport], dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let svg = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg, render_svg(reports)?).map_err(|e| Error::io(&svg, e))?;
    let png = dir.join(format!("{stem}.png"));
    render_png(reports)?
        .save_with_format(&png, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: png, source })
}
