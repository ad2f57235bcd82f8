use std::cmp::Ordering;

use super::boxes::OrientedBox3D;

/// Intersection areas below this are treated as empty.
pub const AREA_FLOOR: f64 = 1e-9;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive for counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        twice += a[0] * b[1] - a[1] * b[0];
    }
    twice / 2.0
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let (dp, dq) = (cross(a, b, p), cross(a, b, q));
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland–Hodgman: clips `subject` by the convex, counter-clockwise
/// polygon `clip`.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        let mut prev = *input.last().unwrap();
        let mut prev_in = cross(a, b, prev) >= 0.0;
        for &cur in &input {
            let cur_in = cross(a, b, cur) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
            prev = cur;
            prev_in = cur_in;
        }
    }
    output
}

/// Area of the overlap of two boxes' bird's-eye-view footprints.
pub fn bev_intersection_area(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let pa = a.bev_polygon();
    let pb = b.bev_polygon();
    if polygon_area(&pa) < AREA_FLOOR || polygon_area(&pb) < AREA_FLOOR {
        return 0.0;
    }
    let area = polygon_area(&clip_polygon(&pa, &pb));
    if area < AREA_FLOOR {
        0.0
    } else {
        area
    }
}

fn total_order(a: &OrientedBox3D, b: &OrientedBox3D) -> Ordering {
    let key = |x: &OrientedBox3D| {
        [
            x.center[0], x.center[1], x.center[2], x.size[0], x.size[1], x.size[2], x.yaw,
        ]
        .map(f64::to_bits)
    };
    key(a).cmp(&key(b))
}

/// Bird's-eye-view IoU of the two footprints.
pub fn iou_bev(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let (a, b) = match total_order(a, b) {
        Ordering::Equal => return 1.0,
        Ordering::Less => (a, b),
        Ordering::Greater => (b, a),
    };
    let inter = bev_intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.length() * a.width() + b.length() * b.width() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU of two yaw-oriented boxes: BEV polygon intersection times vertical
/// overlap, over the union volume.
///
/// The arguments are put into a canonical order first so the result is
/// bit-for-bit symmetric; identical boxes short-circuit to exactly 1.
pub fn iou_3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let (a, b) = match total_order(a, b) {
        Ordering::Equal => return 1.0,
        Ordering::Less => (a, b),
        Ordering::Greater => (b, a),
    };
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    let area = bev_intersection_area(a, b);
    if area == 0.0 {
        return 0.0;
    }
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
