//! Quadrature on the reference triangle (0,0),(1,0),(0,1).

use crate::error::{Error, Result};
use crate::mesh::Point;

pub const MAX_DEGREE: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl QuadratureRule {
    /// A rule exact for polynomials of total degree `degree`.
    pub fn new(degree: usize) -> Result<Self> {
        match degree {
            1 => Ok(QuadratureRule {
                points: vec![[1.0 / 3.0, 1.0 / 3.0]],
                weights: vec![0.5],
                degree,
            }),
            2 => {
                let (a, b) = (1.0 / 6.0, 2.0 / 3.0);
                Ok(QuadratureRule {
                    points: vec![[a, a], [b, a], [a, b]],
                    weights: vec![1.0 / 6.0; 3],
                    degree,
                })
            }
            _ => Self::collapsed(degree, 1),
        }
    }

    /// Conical-product Gauss rule whose points cluster at reference vertex
    /// `vertex`. The Jacobian of the collapse vanishes at that vertex, which
    /// tames integrands with a point singularity there.
    pub fn collapsed(degree: usize, vertex: usize) -> Result<Self> {
        if degree == 0 || degree > MAX_DEGREE {
            return Err(Error::invalid(format!(
                "quadrature degree {degree} outside 1..={MAX_DEGREE}"
            )));
        }
        if vertex > 2 {
            return Err(Error::invalid(format!("reference vertex {vertex} out of range")));
        }
        // (u, v) in the unit square -> (ξ, η) = (u, (1-u) v), Jacobian 1-u.
        let (xu, wu) = gauss_legendre_unit((degree + 2).div_ceil(2));
        let (xv, wv) = gauss_legendre_unit((degree + 1).div_ceil(2));
        let mut points = Vec::with_capacity(xu.len() * xv.len());
        let mut weights = Vec::with_capacity(xu.len() * xv.len());
        for (u, wu) in xu.iter().zip(&wu) {
            for (v, wv) in xv.iter().zip(&wv) {
                let xi = u;
                let eta = (1.0 - u) * v;
                // barycentrics with the collapse at local vertex 1
                let b = [1.0 - xi - eta, *xi, eta];
                // rotate so the collapse lands on `vertex`
                let mut r = [0.0; 3];
                for k in 0..3 {
                    r[(vertex + k) % 3] = b[(1 + k) % 3];
                }
                points.push([r[1], r[2]]);
                weights.push(wu * wv * (1.0 - u));
            }
        }
        Ok(QuadratureRule {
            points,
            weights,
            degree,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn integrate<F: Fn(Point) -> f64>(&self, f: F) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * f(*p)).sum()
    }
}

/// Gauss–Legendre nodes and weights on [0, 1].
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    (
        x.iter().map(|t| 0.5 * (t + 1.0)).collect(),
        w.iter().map(|w| 0.5 * w).collect(),
    )
}

/// Gauss–Legendre nodes and weights on [-1, 1], ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, t);
            dp = d;
            let dt = p / d;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, t);
        if d != 0.0 {
            dp = d;
        }
        let weight = 2.0 / ((1.0 - t * t) * dp * dp);
        x[i] = -t;
        x[n - 1 - i] = t;
        w[i] = weight;
        w[n - 1 - i] = weight;
    }
    (x, w)
}

/// P_n(t) and P_n'(t) by the three-term recurrence.
fn legendre(n: usize, t: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, t);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (t * p1 - p0) / (t * t - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// ∫_T x^i y^j = i! j! / (i + j + 2)!
    fn monomial_integral(i: u32, j: u32) -> f64 {
        let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
        fact(i) * fact(j) / fact(i + j + 2)
    }

    #[test]
    fn midpoint_rule_area() {
        let q = QuadratureRule::new(1).unwrap();
        assert_eq!(q.len(), 1);
        assert_relative_eq!(q.integrate(|_| 1.0), 0.5);
    }

    #[test]
    fn frozen_monomials() {
        let q2 = QuadratureRule::new(2).unwrap();
        assert_relative_eq!(q2.integrate(|p| p[0] * p[0]), 1.0 / 12.0, max_relative = 1e-14);
        let q5 = QuadratureRule::new(5).unwrap();
        assert_relative_eq!(
            q5.integrate(|p| p[0] * p[0] * p[1] * p[1]),
            1.0 / 180.0,
            max_relative = 1e-13
        );
    }

    #[test]
    fn exact_for_all_monomials_up_to_degree() {
        for degree in 1..=MAX_DEGREE {
            for vertex in 0..3 {
                let q = if vertex == 1 {
                    QuadratureRule::new(degree).unwrap()
                } else {
                    QuadratureRule::collapsed(degree, vertex).unwrap()
                };
                assert_relative_eq!(q.weights.iter().sum::<f64>(), 0.5, max_relative = 1e-13);
                assert!(q.weights.iter().all(|&w| w > 0.0));
                for i in 0..=degree as u32 {
                    for j in 0..=(degree as u32 - i) {
                        let got = q.integrate(|p| p[0].powi(i as i32) * p[1].powi(j as i32));
                        assert_relative_eq!(got, monomial_integral(i, j), max_relative = 1e-11);
                    }
                }
            }
        }
    }

    #[test]
    fn points_are_interior() {
        for degree in 1..=MAX_DEGREE {
            let q = QuadratureRule::new(degree).unwrap();
            for p in &q.points {
                assert!(p[0] > 0.0 && p[1] > 0.0 && p[0] + p[1] < 1.0);
            }
        }
    }

    #[test]
    fn unsupported_degrees() {
        assert!(QuadratureRule::new(0).is_err());
        assert!(QuadratureRule::new(21).is_err());
    }
}
