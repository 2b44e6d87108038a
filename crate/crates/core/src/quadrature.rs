//! Gauss rules on intervals and triangles.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights mapped to `[0, 1]`, nodes ascending.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1, "Gauss rule needs at least one point");
    let mut out = vec![(0.0, 0.0); n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
            }
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let w = 1.0 / ((1.0 - z * z) * dp * dp);
        out[i] = (0.5 * (1.0 - z), w);
        out[n - 1 - i] = (0.5 * (1.0 + z), w);
    }
    out
}

/// Quadrature rule on a triangle in barycentric coordinates; weights sum to 1
/// (multiply by the area).
#[derive(Clone, Debug)]
pub struct TriangleRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl TriangleRule {
    /// Symmetric rules with 1, 3, 6, 7 or 12 points (degrees 1, 2, 4, 5, 6).
    /// Other point counts fall back to the collapsed Gauss product rule with
    /// at least that many points.
    pub fn dunavant(points: usize) -> Self {
        let mut rule = TriangleRule { points: Vec::new(), weights: Vec::new() };
        match points {
            1 => rule.centroid(1.0),
            3 => rule.orbit3(2.0 / 3.0, 1.0 / 3.0),
            6 => {
                rule.orbit3(0.108103018168070, 0.223381589678011);
                rule.orbit3(0.816847572980459, 0.109951743655322);
            }
            7 => {
                rule.centroid(0.225);
                rule.orbit3(0.059715871789770, 0.132394152788506);
                rule.orbit3(0.797426985353087, 0.125939180544827);
            }
            12 => {
                rule.orbit3(0.501426509658179, 0.116786275726379);
                rule.orbit3(0.873821971016996, 0.050844906370207);
                rule.orbit6(0.053145049844817, 0.310352451033784, 0.082851075618374);
            }
            n => {
                let k = (n as f64).sqrt().ceil() as usize;
                return TriangleRule::collapsed(k.max(1));
            }
        }
        rule
    }

    /// Collapsed (Duffy) product of two `n`-point Gauss rules.
    pub fn collapsed(n: usize) -> Self {
        let g = gauss_legendre(n);
        let mut rule = TriangleRule { points: Vec::with_capacity(n * n), weights: Vec::with_capacity(n * n) };
        for &(s, ws) in &g {
            for &(e, we) in &g {
                let u = s;
                let v = e * (1.0 - s);
                rule.points.push([1.0 - u - v, u, v]);
                rule.weights.push(2.0 * ws * we * (1.0 - s));
            }
        }
        rule
    }

    /// Applies `rule` on each of the `4^depth` congruent sub-triangles.
    pub fn subdivided(&self, depth: usize) -> Self {
        let mut tris: Vec<[[f64; 3]; 3]> = vec![[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]];
        for _ in 0..depth {
            let mut next = Vec::with_capacity(4 * tris.len());
            for [a, b, c] in tris {
                let mid = |p: [f64; 3], q: [f64; 3]| [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1]), 0.5 * (p[2] + q[2])];
                let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
                next.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
            }
            tris = next;
        }
        let scale = 1.0 / tris.len() as f64;
        let mut out = TriangleRule { points: Vec::new(), weights: Vec::new() };
        for [a, b, c] in &tris {
            for (p, w) in self.points.iter().zip(&self.weights) {
                let mut q = [0.0; 3];
                for k in 0..3 {
                    q[k] = p[0] * a[k] + p[1] * b[k] + p[2] * c[k];
                }
                out.points.push(q);
                out.weights.push(w * scale);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn centroid(&mut self, w: f64) {
        self.points.push([1.0 / 3.0; 3]);
        self.weights.push(w);
    }

    fn orbit3(&mut self, a: f64, w: f64) {
        let b = 0.5 * (1.0 - a);
        for p in [[a, b, b], [b, a, b], [b, b, a]] {
            self.points.push(p);
            self.weights.push(w);
        }
    }

    fn orbit6(&mut self, a: f64, b: f64, w: f64) {
        let c = 1.0 - a - b;
        for p in [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
            self.points.push(p);
            self.weights.push(w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact `∫ u^i v^j` over the reference triangle divided by its area 1/2.
    fn monomial_mean(i: u32, j: u32) -> f64 {
        let fact = |n: u32| (1..=n).map(|k| k as f64).product::<f64>();
        2.0 * fact(i) * fact(j) / fact(i + j + 2)
    }

    #[test]
    fn gauss_exactness() {
        for n in 1..12 {
            let g = gauss_legendre(n);
            assert!((g.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-14);
            for k in 0..(2 * n) as i32 {
                let s: f64 = g.iter().map(|(x, w)| w * x.powi(k)).sum();
                assert!((s - 1.0 / (k as f64 + 1.0)).abs() < 1e-14, "n={n} k={k}");
            }
            assert!(g.windows(2).all(|p| p[0].0 < p[1].0));
        }
    }

    #[test]
    fn triangle_exactness() {
        for (points, degree) in [(1, 1), (3, 2), (6, 4), (7, 5), (12, 6), (25, 8)] {
            let rule = TriangleRule::dunavant(points);
            for d in 0..=degree {
                for i in 0..=d {
                    let j = d - i;
                    let s: f64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .map(|(p, w)| w * p[1].powi(i as i32) * p[2].powi(j as i32))
                        .sum();
                    assert!((s - monomial_mean(i, j)).abs() < 1e-13, "{points} pts: u^{i} v^{j}");
                }
            }
        }
    }

    #[test]
    fn subdivision_keeps_exactness() {
        let rule = TriangleRule::dunavant(7).subdivided(2);
        assert_eq!(rule.len(), 7 * 16);
        let s: f64 = rule.points.iter().zip(&rule.weights).map(|(p, w)| w * p[1].powi(3) * p[2].powi(2)).sum();
        assert!((s - monomial_mean(3, 2)).abs() < 1e-14);
    }
}
