use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::BinaryMask;

/// Parametric shape in continuous pixel coordinates: `x` grows right, `y`
/// down, and pixel `(row, col)` has its center at `(col + 0.5, row + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeSpec {
    Circle {
        cx: f64,
        cy: f64,
        radius: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        #[serde(default)]
        angle_deg: f64,
    },
    Rectangle {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    Polygon {
        vertices: Vec<(f64, f64)>,
    },
    Star {
        cx: f64,
        cy: f64,
        outer: f64,
        inner: f64,
        points: usize,
        #[serde(default)]
        rotation_deg: f64,
    },
}

const FRAME_TOL: f64 = 1e-9;

impl ShapeSpec {
    /// Vertices of the star polygon, alternating outer and inner radius,
    /// first outer tip pointing up (−y) before rotation.
    fn star_vertices(cx: f64, cy: f64, outer: f64, inner: f64, points: usize, rotation_deg: f64) -> Vec<(f64, f64)> {
        let rot = rotation_deg.to_radians();
        (0..2 * points)
            .map(|i| {
                let r = if i % 2 == 0 { outer } else { inner };
                let a = rot - std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / points as f64;
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect()
    }

    /// Axis-aligned bounding box `(xmin, ymin, xmax, ymax)`.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            ShapeSpec::Circle { cx, cy, radius } => (cx - radius, cy - radius, cx + radius, cy + radius),
            ShapeSpec::Ellipse { cx, cy, rx, ry, angle_deg } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                let hx = ((rx * c).powi(2) + (ry * s).powi(2)).sqrt();
                let hy = ((rx * s).powi(2) + (ry * c).powi(2)).sqrt();
                (cx - hx, cy - hy, cx + hx, cy + hy)
            }
            ShapeSpec::Rectangle { x0, y0, x1, y1 } => (x0.min(*x1), y0.min(*y1), x0.max(*x1), y0.max(*y1)),
            ShapeSpec::Polygon { vertices } => poly_bounds(vertices),
            ShapeSpec::Star {
                cx,
                cy,
                outer,
                inner,
                points,
                rotation_deg,
            } => poly_bounds(&Self::star_vertices(*cx, *cy, *outer, *inner, *points, *rotation_deg)),
        }
    }

    fn validate(&self, side: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        match self {
            ShapeSpec::Circle { radius, .. } if !(*radius >= 1.0) => return bad(format!("circle radius {radius} < 1 pixel")),
            ShapeSpec::Ellipse { rx, ry, .. } if !(rx.min(*ry) >= 1.0) => {
                return bad(format!("ellipse radii ({rx}, {ry}) below 1 pixel"))
            }
            ShapeSpec::Rectangle { x0, y0, x1, y1 } if (x1 - x0).abs().min((y1 - y0).abs()) < 2.0 => {
                return bad("rectangle thinner than 2 pixels".into())
            }
            ShapeSpec::Polygon { vertices } => {
                if vertices.len() < 3 {
                    return bad("polygon needs at least 3 vertices".into());
                }
                if polygon_self_intersects(vertices) {
                    return bad("polygon is self-intersecting".into());
                }
                let (x0, y0, x1, y1) = poly_bounds(vertices);
                if (x1 - x0).min(y1 - y0) < 2.0 || polygon_area(vertices).abs() < 1.0 {
                    return bad("polygon smaller than 2 pixels".into());
                }
            }
            ShapeSpec::Star { outer, inner, points, .. } => {
                if *points < 3 {
                    return bad(format!("star needs at least 3 points, got {points}"));
                }
                if !(*outer >= 1.0) || !(*inner > 0.0) || inner >= outer {
                    return bad(format!("star radii must satisfy 0 < inner < outer, outer ≥ 1 (got {inner}, {outer})"));
                }
            }
            _ => {}
        }
        let (x0, y0, x1, y1) = self.bounds();
        let s = side as f64;
        if !(x0 >= -FRAME_TOL && y0 >= -FRAME_TOL && x1 <= s + FRAME_TOL && y1 <= s + FRAME_TOL) {
            return bad(format!("shape bounds ({x0:.2}, {y0:.2}) to ({x1:.2}, {y1:.2}) leave the {side}×{side} frame"));
        }
        Ok(())
    }

    /// Whether the point `(x, y)` lies inside the analytic boundary.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            ShapeSpec::Circle { cx, cy, radius } => (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius,
            ShapeSpec::Ellipse { cx, cy, rx, ry, angle_deg } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            ShapeSpec::Rectangle { x0, y0, x1, y1 } => {
                x >= x0.min(*x1) && x <= x0.max(*x1) && y >= y0.min(*y1) && y <= y0.max(*y1)
            }
            ShapeSpec::Polygon { vertices } => point_in_polygon(vertices, x, y),
            ShapeSpec::Star {
                cx,
                cy,
                outer,
                inner,
                points,
                rotation_deg,
            } => point_in_polygon(&Self::star_vertices(*cx, *cy, *outer, *inner, *points, *rotation_deg), x, y),
        }
    }
}

fn poly_bounds(v: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    v.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
    )
}

fn polygon_area(v: &[(f64, f64)]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        / 2.0
}

/// Even-odd rule.
fn point_in_polygon(v: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = v.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = v[i];
        let (xj, yj) = v[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn segments_cross(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// True if any two non-adjacent edges properly intersect.
fn polygon_self_intersects(v: &[(f64, f64)]) -> bool {
    let n = v.len();
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]) {
                return true;
            }
        }
    }
    false
}

/// Rasterize `spec` on a `side × side` frame: a pixel is foreground iff its
/// center is inside the shape.
pub fn make_geometric_mask(spec: &ShapeSpec, side: usize) -> Result<BinaryMask> {
    if side == 0 {
        return Err(Error::Argument("side must be at least 1".into()));
    }
    spec.validate(side)?;
    Ok(BinaryMask::from_fn(side, side, |r, c| spec.contains(c as f64 + 0.5, r as f64 + 0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rotate a square mask about the frame center by `deg` (nearest neighbour, backward map).
    fn rotate_mask(m: &BinaryMask, deg: f64) -> BinaryMask {
        let n = m.height();
        let c = n as f64 / 2.0;
        let (s, co) = deg.to_radians().sin_cos();
        BinaryMask::from_fn(n, n, |r, col| {
            let (x, y) = (col as f64 + 0.5 - c, r as f64 + 0.5 - c);
            let sx = co * x + s * y + c;
            let sy = -s * x + co * y + c;
            let (ix, iy) = (sx.floor(), sy.floor());
            ix >= 0.0 && iy >= 0.0 && (ix as usize) < n && (iy as usize) < n && m.get(iy as usize, ix as usize) == 1
        })
    }

    #[test]
    fn full_frame_rectangle_is_all_ones() {
        let m = make_geometric_mask(&ShapeSpec::Rectangle { x0: 0.0, y0: 0.0, x1: 32.0, y1: 32.0 }, 32).unwrap();
        assert_eq!(m.foreground_count(), 32 * 32);
    }

    #[test]
    fn circle_area_close_to_analytic() {
        let m = make_geometric_mask(&ShapeSpec::Circle { cx: 64.0, cy: 64.0, radius: 30.0 }, 128).unwrap();
        let analytic = std::f64::consts::PI * 900.0;
        let rel = (m.foreground_count() as f64 - analytic).abs() / analytic;
        assert!(rel < 0.02, "count {} vs {analytic}", m.foreground_count());
    }

    #[test]
    fn star_is_invariant_under_fifth_turn() {
        let spec = ShapeSpec::Star { cx: 64.0, cy: 64.0, outer: 40.0, inner: 16.0, points: 5, rotation_deg: 0.0 };
        let m = make_geometric_mask(&spec, 128).unwrap();
        let rotated = rotate_mask(&m, 72.0);
        let frac = m.disagreement(&rotated) as f64 / (128.0 * 128.0);
        assert!(frac < 0.01, "disagreement {frac}");
        // and the shape is not trivially symmetric under other angles
        assert!(m.disagreement(&rotate_mask(&m, 36.0)) > m.disagreement(&rotated));
    }

    #[test]
    fn degenerate_shapes_rejected() {
        assert!(make_geometric_mask(&ShapeSpec::Circle { cx: 8.0, cy: 8.0, radius: 0.5 }, 16).is_err());
        let bowtie = ShapeSpec::Polygon { vertices: vec![(2.0, 2.0), (12.0, 12.0), (12.0, 2.0), (2.0, 12.0)] };
        assert!(make_geometric_mask(&bowtie, 16).is_err());
        assert!(make_geometric_mask(&ShapeSpec::Circle { cx: 4.0, cy: 8.0, radius: 6.0 }, 16).is_err());
        let tri = ShapeSpec::Polygon { vertices: vec![(2.0, 2.0), (14.0, 2.0), (8.0, 14.0)] };
        assert!(make_geometric_mask(&tri, 16).unwrap().foreground_count() > 0);
    }

    #[test]
    fn rotated_ellipse_matches_swapped_axes() {
        let a = make_geometric_mask(&ShapeSpec::Ellipse { cx: 32.0, cy: 32.0, rx: 20.0, ry: 10.0, angle_deg: 90.0 }, 64).unwrap();
        let b = make_geometric_mask(&ShapeSpec::Ellipse { cx: 32.0, cy: 32.0, rx: 10.0, ry: 20.0, angle_deg: 0.0 }, 64).unwrap();
        assert!(a.disagreement(&b) <= 8);
    }
}
