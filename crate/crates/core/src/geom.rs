//! Shared planar geometry: rigid transforms, angle wrapping, polyline
//! arc-length walks, and oriented-rectangle overlap tests.

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = a % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a <= -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

/// Rigid 2-D transform (rotation then translation): p' = R(theta) * p + t.
#[derive(Debug, Clone, Copy)]
pub struct RigidTransform {
    pub cos: f64,
    pub sin: f64,
    pub tx: f64,
    pub ty: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { cos: 1.0, sin: 0.0, tx: 0.0, ty: 0.0 }
    }

    pub fn new(theta: f64, tx: f64, ty: f64) -> Self {
        RigidTransform { cos: theta.cos(), sin: theta.sin(), tx, ty }
    }

    /// Transform that maps the pose (x, y, heading) to the origin with
    /// heading zero.
    pub fn into_frame_of(x: f64, y: f64, heading: f64) -> Self {
        let (sin, cos) = (-heading).sin_cos();
        RigidTransform { cos, sin, tx: -(cos * x - sin * y), ty: -(sin * x + cos * y) }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.cos * p[0] - self.sin * p[1] + self.tx,
            self.sin * p[0] + self.cos * p[1] + self.ty,
        ]
    }

    /// Rotates a vector (velocities, directions) without translating.
    pub fn rotate(&self, v: [f64; 2]) -> [f64; 2] {
        [self.cos * v[0] - self.sin * v[1], self.sin * v[0] + self.cos * v[1]]
    }

    pub fn angle(&self) -> f64 {
        self.sin.atan2(self.cos)
    }

    pub fn inverse(&self) -> Self {
        // R' = R^T, t' = -R^T t
        RigidTransform {
            cos: self.cos,
            sin: -self.sin,
            tx: -(self.cos * self.tx + self.sin * self.ty),
            ty: -(-self.sin * self.tx + self.cos * self.ty),
        }
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Cumulative arc lengths of a polyline; first entry is 0.
pub fn cumulative_lengths(points: &[[f64; 2]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    let mut s = 0.0;
    out.push(0.0);
    for w in points.windows(2) {
        s += dist(w[0], w[1]);
        out.push(s);
    }
    out
}

/// Point at arc length `s` along a polyline, extrapolating along the last
/// segment direction when `s` exceeds the total length.
pub fn point_at_arc_length(points: &[[f64; 2]], cum: &[f64], s: f64) -> [f64; 2] {
    debug_assert!(points.len() >= 2 && cum.len() == points.len());
    if s <= 0.0 {
        return points[0];
    }
    let total = *cum.last().unwrap();
    if s >= total {
        let n = points.len();
        let [ax, ay] = points[n - 2];
        let [bx, by] = points[n - 1];
        let len = dist(points[n - 2], points[n - 1]);
        let extra = s - total;
        return [bx + (bx - ax) / len * extra, by + (by - ay) / len * extra];
    }
    // binary search for the segment containing s
    let mut lo = 0usize;
    let mut hi = cum.len() - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if cum[mid] <= s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let seg_len = cum[hi] - cum[lo];
    let t = if seg_len > 0.0 { (s - cum[lo]) / seg_len } else { 0.0 };
    let [ax, ay] = points[lo];
    let [bx, by] = points[hi];
    [ax + (bx - ax) * t, ay + (by - ay) * t]
}

/// Tangent direction (unit vector) of the segment containing arc length `s`.
pub fn tangent_at_arc_length(points: &[[f64; 2]], cum: &[f64], s: f64) -> [f64; 2] {
    let n = points.len();
    let mut idx = match cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
        Ok(i) => i,
        Err(i) => i.saturating_sub(1),
    };
    if idx >= n - 1 {
        idx = n - 2;
    }
    let d = [points[idx + 1][0] - points[idx][0], points[idx + 1][1] - points[idx][1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    [d[0] / len, d[1] / len]
}

/// Projection of `p` onto a polyline: (arc length, signed lateral offset,
/// segment index). Lateral sign is positive to the left of travel.
pub fn project_to_polyline(points: &[[f64; 2]], cum: &[f64], p: [f64; 2]) -> (f64, f64, usize) {
    let mut best = (f64::INFINITY, 0.0, 0.0, 0usize);
    for i in 0..points.len() - 1 {
        let a = points[i];
        let b = points[i + 1];
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let ap = [p[0] - a[0], p[1] - a[1]];
        let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let q = [a[0] + ab[0] * t, a[1] + ab[1] * t];
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        if d2 < best.0 {
            let s = cum[i] + t * (cum[i + 1] - cum[i]);
            // sign from cross product of segment direction with (p - q)
            let cross = ab[0] * (p[1] - q[1]) - ab[1] * (p[0] - q[0]);
            let l = d2.sqrt() * if cross >= 0.0 { 1.0 } else { -1.0 };
            best = (d2, s, l, i);
        }
    }
    (best.1, best.2, best.3)
}

/// Axis-aligned-in-body-frame rectangle footprint at a pose.
#[derive(Debug, Clone, Copy)]
pub struct OrientedRect {
    pub cx: f64,
    pub cy: f64,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        let mut out = [[0.0; 2]; 4];
        for (i, (dx, dy)) in [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)].iter().enumerate() {
            out[i] = [self.cx + c * dx - s * dy, self.cy + s * dx + c * dy];
        }
        out
    }
}

/// Separating-axis overlap test for two oriented rectangles. Returns the
/// penetration depth (> 0) when they overlap, `None` otherwise.
pub fn rect_overlap_depth(a: &OrientedRect, b: &OrientedRect) -> Option<f64> {
    let ca = a.corners();
    let cb = b.corners();
    let mut min_overlap = f64::INFINITY;
    for rect in [a, b] {
        let (s, c) = rect.heading.sin_cos();
        for axis in [[c, s], [-s, c]] {
            let proj = |corners: &[[f64; 2]; 4]| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for p in corners {
                    let v = p[0] * axis[0] + p[1] * axis[1];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo, hi)
            };
            let (alo, ahi) = proj(&ca);
            let (blo, bhi) = proj(&cb);
            let overlap = ahi.min(bhi) - alo.max(blo);
            if overlap <= 0.0 {
                return None;
            }
            min_overlap = min_overlap.min(overlap);
        }
    }
    Some(min_overlap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert_eq!(wrap_angle(0.5), 0.5);
    }

    #[test]
    fn into_frame_maps_pose_to_origin() {
        let tf = RigidTransform::into_frame_of(5.0, 3.0, PI / 2.0);
        let p = tf.apply([5.0, 3.0]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
        // point one meter "ahead" of the pose lands on +x
        let q = tf.apply([5.0, 4.0]);
        assert!((q[0] - 1.0).abs() < 1e-12 && q[1].abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trips() {
        let tf = RigidTransform::new(0.7, 3.0, -2.0);
        let inv = tf.inverse();
        let p = [1.2, -4.5];
        let q = inv.apply(tf.apply(p));
        assert!(dist(p, q) < 1e-12);
    }

    #[test]
    fn arc_length_walk() {
        let pts = [[0.0, 0.0], [3.0, 4.0], [3.0, 9.0]];
        let cum = cumulative_lengths(&pts);
        assert_eq!(cum, vec![0.0, 5.0, 10.0]);
        let p = point_at_arc_length(&pts, &cum, 7.5);
        assert!(dist(p, [3.0, 6.5]) < 1e-12);
        // extrapolation past the end continues straight
        let p = point_at_arc_length(&pts, &cum, 12.0);
        assert!(dist(p, [3.0, 11.0]) < 1e-12);
    }

    #[test]
    fn projection_sign() {
        let pts = [[0.0, 0.0], [10.0, 0.0]];
        let cum = cumulative_lengths(&pts);
        let (s, l, _) = project_to_polyline(&pts, &cum, [4.0, 2.0]);
        assert!((s - 4.0).abs() < 1e-12);
        assert!((l - 2.0).abs() < 1e-12);
        let (_, l, _) = project_to_polyline(&pts, &cum, [4.0, -2.0]);
        assert!((l + 2.0).abs() < 1e-12);
    }

    #[test]
    fn rect_overlap() {
        let a = OrientedRect { cx: 0.0, cy: 0.0, heading: 0.0, length: 4.0, width: 2.0 };
        let b = OrientedRect { cx: 3.0, cy: 0.0, heading: 0.0, length: 4.0, width: 2.0 };
        let d = rect_overlap_depth(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let c = OrientedRect { cx: 0.0, cy: 4.0, heading: 0.3, length: 4.0, width: 2.0 };
        assert!(rect_overlap_depth(&a, &c).is_none());
    }
}
