//! Inspection exports: colored PLY point clouds and bird's-eye-view SVGs.

use std::fmt::Write as _;

use crate::geom::{box_corners, OrientedBox3D};

pub const FOREGROUND_RGB: [u8; 3] = [220, 40, 40];
pub const BACKGROUND_RGB: [u8; 3] = [160, 160, 160];

/// ASCII PLY with one vertex per point, red where `foreground` is set.
pub fn ply_string(coords: &[[f64; 3]], foreground: &[bool]) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        coords.len()
    );
    for (p, &fg) in coords.iter().zip(foreground) {
        let [r, g, b] = if fg { FOREGROUND_RGB } else { BACKGROUND_RGB };
        let _ = writeln!(s, "{:.6} {:.6} {:.6} {r} {g} {b}", p[0], p[1], p[2]);
    }
    s
}

/// Window of the ground plane drawn in the SVG. Forward (`+x`) points up the
/// page and left (`+y`) points left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevView {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Pixels per meter.
    pub scale: f64,
}

impl Default for BevView {
    fn default() -> Self {
        Self {
            x_range: (0.0, 70.0),
            y_range: (-40.0, 40.0),
            scale: 10.0,
        }
    }
}

impl BevView {
    pub fn size(&self) -> (f64, f64) {
        (
            (self.y_range.1 - self.y_range.0) * self.scale,
            (self.x_range.1 - self.x_range.0) * self.scale,
        )
    }

    /// SVG coordinates of a ground-plane point.
    pub fn to_svg(&self, x: f64, y: f64) -> (f64, f64) {
        ((self.y_range.1 - y) * self.scale, (self.x_range.1 - x) * self.scale)
    }
}

fn polygon(s: &mut String, view: &BevView, b: &OrientedBox3D, class: &str, color: &str) {
    let pts: Vec<String> = box_corners(b)[..4]
        .iter()
        .map(|c| {
            let (u, v) = view.to_svg(c[0], c[1]);
            format!("{u:.3},{v:.3}")
        })
        .collect();
    let _ = writeln!(
        s,
        "<polygon class=\"{class}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
        pts.join(" ")
    );
}

/// BEV plot of the cloud with ground-truth footprints in green and
/// predictions in red. Each footprint lists the bottom corners of the box.
pub fn bev_svg(view: &BevView, coords: &[[f64; 3]], gts: &[OrientedBox3D], preds: &[OrientedBox3D]) -> String {
    let (w, h) = view.size();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(s, "<g fill=\"#888888\">");
    for p in coords {
        let (u, v) = view.to_svg(p[0], p[1]);
        if (0.0..=w).contains(&u) && (0.0..=h).contains(&v) {
            let _ = writeln!(s, "<circle cx=\"{u:.1}\" cy=\"{v:.1}\" r=\"1\"/>");
        }
    }
    let _ = writeln!(s, "</g>");
    for b in gts {
        polygon(&mut s, view, b, "gt", "green");
    }
    for b in preds {
        polygon(&mut s, view, b, "pred", "red");
    }
    s.push_str("</svg>\n");
    s
}

/// Corner lists of every `<polygon>` of the given class, in document order.
pub fn svg_polygons(svg: &str, class: &str) -> Vec<Vec<(f64, f64)>> {
    let tag = format!("<polygon class=\"{class}\" points=\"");
    svg.lines()
        .filter_map(|l| l.strip_prefix(tag.as_str()))
        .map(|rest| {
            rest.split('"')
                .next()
                .unwrap_or("")
                .split_whitespace()
                .filter_map(|pair| {
                    let (u, v) = pair.split_once(',')?;
                    Some((u.parse().ok()?, v.parse().ok()?))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car() -> OrientedBox3D {
        OrientedBox3D::new([15.0, 2.0, -0.9], [1.5, 1.6, 3.9], 0.4).unwrap()
    }

    #[test]
    fn ply_header_and_colors() {
        let s = ply_string(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], &[true, false]);
        assert!(s.starts_with("ply\nformat ascii 1.0\nelement vertex 2\n"));
        let body: Vec<&str> = s.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body, ["1.000000 2.000000 3.000000 220 40 40", "4.000000 5.000000 6.000000 160 160 160"]);
    }

    #[test]
    fn empty_predictions_draw_ground_truth_only() {
        let s = bev_svg(&BevView::default(), &[], &[car()], &[]);
        assert_eq!(svg_polygons(&s, "gt").len(), 1);
        assert!(svg_polygons(&s, "pred").is_empty());
    }

    #[test]
    fn matching_prediction_coincides_with_ground_truth() {
        let s = bev_svg(&BevView::default(), &[], &[car()], &[car()]);
        assert_eq!(svg_polygons(&s, "gt"), svg_polygons(&s, "pred"));
    }

    #[test]
    fn polygon_corners_follow_box_corners() {
        let view = BevView::default();
        let b = car();
        let s = bev_svg(&view, &[], &[b], &[]);
        let poly = &svg_polygons(&s, "gt")[0];
        let corners = box_corners(&b);
        assert_eq!(poly.len(), 4);
        for (got, c) in poly.iter().zip(&corners[..4]) {
            // forward is up, left is left, 10 px per meter from (x 70, y 40)
            let want = ((40.0 - c[1]) * 10.0, (70.0 - c[0]) * 10.0);
            assert!((got.0 - want.0).abs() <= 5e-4 && (got.1 - want.1).abs() <= 5e-4);
        }
    }
}
