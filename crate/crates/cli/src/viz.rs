//! Per-subspace scatter exports: a CSV of projected coordinates and a small
//! self-contained SVG. Points from the subspace's own class are drawn red,
//! everything else green; longer capsules sit further from the origin.

use std::io::Write;
use std::path::Path;

pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub own_class: bool,
    pub length: f64,
}

pub fn write_csv(points: &[ScatterPoint], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x,y,is_own_class,length")?;
    for p in points {
        writeln!(f, "{},{},{},{}", p.x, p.y, u8::from(p.own_class), p.length)?;
    }
    Ok(())
}

pub fn write_svg(points: &[ScatterPoint], title: &str, path: &Path) -> std::io::Result<()> {
    const SIZE: f64 = 640.0;
    const MARGIN: f64 = 40.0;
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for p in points {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let span_x = (max_x - min_x).max(1e-9);
    let span_y = (max_y - min_y).max(1e-9);
    let sx = |v: f64| MARGIN + (v - min_x) / span_x * (SIZE - 2.0 * MARGIN);
    let sy = |v: f64| SIZE - MARGIN - (v - min_y) / span_y * (SIZE - 2.0 * MARGIN);

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">"
    )?;
    writeln!(f, "<rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>")?;
    writeln!(
        f,
        "<text x=\"{MARGIN}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>"
    )?;
    // Axes through the origin, when it lies inside the plotted range.
    if min_x <= 0.0 && 0.0 <= max_x {
        writeln!(
            f,
            "<line x1=\"{0}\" y1=\"{MARGIN}\" x2=\"{0}\" y2=\"{1}\" stroke=\"#cccccc\"/>",
            sx(0.0),
            SIZE - MARGIN
        )?;
    }
    if min_y <= 0.0 && 0.0 <= max_y {
        writeln!(
            f,
            "<line x1=\"{MARGIN}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#cccccc\"/>",
            sy(0.0),
            SIZE - MARGIN
        )?;
    }
    // Draw other-class points first so own-class stays visible on top.
    for own in [false, true] {
        let fill = if own { "#d62728" } else { "#2ca02c" };
        for p in points.iter().filter(|p| p.own_class == own) {
            writeln!(
                f,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{fill}\" fill-opacity=\"0.6\"/>",
                sx(p.x),
                sy(p.y)
            )?;
        }
    }
    writeln!(f, "</svg>")?;
    Ok(())
}
