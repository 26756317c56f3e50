//! Natural cubic interpolating spline in 3D, chord-length parameterized.

use nalgebra::Vector3;

#[derive(Clone, Debug)]
pub struct CubicSpline {
    knots: Vec<f64>,
    points: Vec<Vector3<f64>>,
    /// Second derivatives at the knots.
    m: Vec<Vector3<f64>>,
}

impl CubicSpline {
    pub fn through(points: &[Vector3<f64>]) -> Self {
        let n = points.len();
        assert!(n >= 2, "spline needs two points");
        let mut knots = vec![0.0; n];
        for i in 1..n {
            knots[i] = knots[i - 1] + (points[i] - points[i - 1]).norm().max(1e-12);
        }
        let mut m = vec![Vector3::zeros(); n];
        if n > 2 {
            // Thomas algorithm on the interior second-derivative system
            let k = n - 2;
            let h: Vec<f64> = (0..n - 1).map(|i| knots[i + 1] - knots[i]).collect();
            let mut diag = vec![0.0; k];
            let mut rhs = vec![Vector3::zeros(); k];
            let mut upper = vec![0.0; k];
            for j in 0..k {
                let i = j + 1;
                diag[j] = 2.0 * (h[i - 1] + h[i]);
                upper[j] = h[i];
                rhs[j] = ((points[i + 1] - points[i]) / h[i] - (points[i] - points[i - 1]) / h[i - 1]) * 6.0;
            }
            for j in 1..k {
                let w = h[j] / diag[j - 1];
                diag[j] -= w * upper[j - 1];
                let prev = rhs[j - 1];
                rhs[j] -= prev * w;
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for j in (0..k - 1).rev() {
                m[j + 1] = (rhs[j] - m[j + 2] * upper[j]) / diag[j];
            }
        }
        Self { knots, points: points.to_vec(), m }
    }

    pub fn length_param(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn eval(&self, t: f64) -> Vector3<f64> {
        let n = self.points.len();
        let t = t.clamp(0.0, self.length_param());
        let mut i = match self.knots.binary_search_by(|k| k.total_cmp(&t)) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        i = i.min(n - 2);
        let h = self.knots[i + 1] - self.knots[i];
        let a = (self.knots[i + 1] - t) / h;
        let b = (t - self.knots[i]) / h;
        self.points[i] * a
            + self.points[i + 1] * b
            + (self.m[i] * (a * a * a - a) + self.m[i + 1] * (b * b * b - b)) * (h * h / 6.0)
    }

    /// `count` points equally spaced in arc length, endpoints included.
    pub fn resample_by_arc_length(&self, count: usize) -> Vec<Vector3<f64>> {
        let dense = 256 * (self.points.len() - 1);
        let total_t = self.length_param();
        let ts: Vec<f64> = (0..=dense).map(|i| total_t * i as f64 / dense as f64).collect();
        let pts: Vec<Vector3<f64>> = ts.iter().map(|&t| self.eval(t)).collect();
        let mut arc = vec![0.0; pts.len()];
        for i in 1..pts.len() {
            arc[i] = arc[i - 1] + (pts[i] - pts[i - 1]).norm();
        }
        let total = arc[dense];
        let mut out = Vec::with_capacity(count);
        let mut j = 0;
        for q in 0..count {
            let target = if count == 1 { 0.0 } else { total * q as f64 / (count - 1) as f64 };
            while j + 1 < dense && arc[j + 1] < target {
                j += 1;
            }
            let span = arc[j + 1] - arc[j];
            let u = if span > 0.0 { ((target - arc[j]) / span).clamp(0.0, 1.0) } else { 0.0 };
            out.push(self.eval(ts[j] + u * (ts[j + 1] - ts[j])));
        }
        out
    }
}
