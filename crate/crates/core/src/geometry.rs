//! Planar polyline helpers shared by the generator, the rasterizers and the losses.

pub type Point = [f64; 2];

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Euclidean distance from `p` to the closed segment `a`-`b`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

pub fn polyline_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Inserts evenly spaced points on every segment so that consecutive points are at
/// most `max_spacing` apart. The original vertices are kept.
pub fn densify(points: &[Point], max_spacing: f64) -> Vec<Point> {
    let mut out = Vec::with_capacity(points.len() * 4);
    if let Some(&first) = points.first() {
        out.push(first);
    }
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = (dist(a, b) / max_spacing).ceil().max(1.0) as usize;
        for k in 1..=n {
            let t = k as f64 / n as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

/// Resamples a polyline to `n` points spaced equally by arc length, endpoints included.
pub fn resample(points: &[Point], n: usize) -> Vec<Point> {
    if points.is_empty() || n == 0 {
        return Vec::new();
    }
    if n == 1 || points.len() == 1 {
        return vec![points[0]; n];
    }
    let mut cum = Vec::with_capacity(points.len());
    cum.push(0.0);
    for w in points.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return vec![points[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        let s = total * k as f64 / (n - 1) as f64;
        while seg + 2 < points.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let span = cum[seg + 1] - cum[seg];
        let t = if span > 0.0 {
            ((s - cum[seg]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (a, b) = (points[seg], points[seg + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_distance_cases() {
        assert_eq!(point_segment_distance([0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]), 1.0);
        assert_eq!(point_segment_distance([3.0, 4.0], [0.0, 0.0], [0.0, 0.0]), 5.0);
        assert_eq!(point_segment_distance([2.0, 0.0], [-1.0, 0.0], [1.0, 0.0]), 1.0);
    }

    #[test]
    fn densify_respects_spacing() {
        let pts = densify(&[[0.0, 0.0], [0.0, 2.1], [1.0, 2.1]], 0.5);
        assert_eq!(pts.first(), Some(&[0.0, 0.0]));
        assert_eq!(pts.last(), Some(&[1.0, 2.1]));
        for w in pts.windows(2) {
            assert!(dist(w[0], w[1]) <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn resample_is_equidistant_on_a_bent_line() {
        let pts = resample(&[[0.0, 0.0], [0.0, 3.0], [3.0, 3.0]], 7);
        assert_eq!(pts.len(), 7);
        for w in pts.windows(2) {
            assert!((dist(w[0], w[1]) - 1.0).abs() < 1e-12 || w[0][0] < 1.0);
        }
        assert!((pts[3][0] - 0.0).abs() < 1e-12 && (pts[3][1] - 3.0).abs() < 1e-12);
        assert_eq!(pts[6], [3.0, 3.0]);
    }
}
