//! Implicit constitutive relations `G(S, D) = 0` in explicit orientations,
//! their analytic tangents, and sampled checks of the graph axioms.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::par::{map_indexed, Execution};

/// Frobenius weights of the stored components (t11, t22, t12).
pub const WEIGHTS: [f64; 3] = [1.0, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymTensor2 {
    pub xx: f64,
    pub yy: f64,
    pub xy: f64,
}

impl SymTensor2 {
    pub const ZERO: SymTensor2 = SymTensor2 { xx: 0.0, yy: 0.0, xy: 0.0 };

    pub const fn new(xx: f64, yy: f64, xy: f64) -> Self {
        SymTensor2 { xx, yy, xy }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        SymTensor2::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.xx, self.yy, self.xy]
    }

    /// Symmetric part of a velocity gradient `g[i][j] = ∂_j u_i`.
    pub fn sym_grad(g: [[f64; 2]; 2]) -> Self {
        SymTensor2::new(g[0][0], g[1][1], 0.5 * (g[0][1] + g[1][0]))
    }

    pub fn dot(self, o: SymTensor2) -> f64 {
        self.xx * o.xx + self.yy * o.yy + 2.0 * self.xy * o.xy
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn trace(self) -> f64 {
        self.xx + self.yy
    }

    pub fn scale(self, a: f64) -> Self {
        SymTensor2::new(a * self.xx, a * self.yy, a * self.xy)
    }

    /// `Q T Qᵀ` for the rotation by `angle`.
    pub fn rotate(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let q = [[c, -s], [s, c]];
        let t = [[self.xx, self.xy], [self.xy, self.yy]];
        let mut r = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        r[i][j] += q[i][k] * t[k][l] * q[j][l];
                    }
                }
            }
        }
        SymTensor2::new(r[0][0], r[1][1], 0.5 * (r[0][1] + r[1][0]))
    }
}

impl std::ops::Add for SymTensor2 {
    type Output = SymTensor2;
    fn add(self, o: SymTensor2) -> SymTensor2 {
        SymTensor2::new(self.xx + o.xx, self.yy + o.yy, self.xy + o.xy)
    }
}

impl std::ops::Sub for SymTensor2 {
    type Output = SymTensor2;
    fn sub(self, o: SymTensor2) -> SymTensor2 {
        SymTensor2::new(self.xx - o.xx, self.yy - o.yy, self.xy - o.xy)
    }
}

/// Derivative of a component triple with respect to a component triple:
/// `self.0[i][j] = ∂out_i / ∂in_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tangent4(pub [[f64; 3]; 3]);

impl Tangent4 {
    pub fn scaled_identity(a: f64) -> Self {
        Tangent4([[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]])
    }

    /// Directional derivative along `t`.
    pub fn apply(&self, t: SymTensor2) -> SymTensor2 {
        let v = t.to_array();
        let m = &self.0;
        SymTensor2::from_array([0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2]))
    }

    pub fn scale(self, a: f64) -> Self {
        Tangent4(self.0.map(|row| row.map(|v| a * v)))
    }

    /// `a·I + b·(u ⊗ W v)` where `W` is the Frobenius weight.
    fn isotropic(a: f64, b: f64, u: SymTensor2, v: SymTensor2) -> Self {
        let (u, v) = (u.to_array(), v.to_array());
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = b * u[i] * WEIGHTS[j] * v[j];
            }
            m[i][i] += a;
        }
        Tangent4(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// `G = S - Ŝ(D)`.
    StressExplicit,
    /// `G = D̂(S) - D`.
    StrainExplicit,
}

/// A closed disk `|x - center|² ≤ radius_sq`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    pub center: Point,
    pub radius_sq: f64,
}

impl Disk {
    pub fn contains(&self, x: Point) -> bool {
        let (dx, dy) = (x[0] - self.center[0], x[1] - self.center[1]);
        dx * dx + dy * dy <= self.radius_sq
    }
}

impl Default for Disk {
    /// Center of the unit square, squared radius (3/8)⁴.
    fn default() -> Self {
        Disk {
            center: [0.5, 0.5],
            radius_sq: 0.375f64.powi(4),
        }
    }
}

/// A regularized explicit selection of a maximal monotone graph.
pub trait ConstitutiveLaw: Send + Sync {
    fn orientation(&self) -> Orientation;

    /// `Ŝ(D)` for stress-explicit laws, `D̂(S)` for strain-explicit ones.
    fn response(&self, input: SymTensor2, x: Point) -> SymTensor2;

    /// Derivative of [`ConstitutiveLaw::response`] with respect to its input.
    fn response_tangent(&self, input: SymTensor2, x: Point) -> Tangent4;

    /// Growth exponent r of the graph (r' governs the stress).
    fn growth_exponent(&self) -> f64;

    /// Point used when sampling the graph; laws that vary in space override it.
    fn sample_point(&self, rng: &mut dyn RngCore) -> Point {
        [rng.gen(), rng.gen()]
    }

    fn residual(&self, s: SymTensor2, d: SymTensor2, x: Point) -> SymTensor2 {
        match self.orientation() {
            Orientation::StressExplicit => s - self.response(d, x),
            Orientation::StrainExplicit => self.response(s, x) - d,
        }
    }

    /// `(∂G/∂S, ∂G/∂D)`.
    fn tangents(&self, s: SymTensor2, d: SymTensor2, x: Point) -> (Tangent4, Tangent4) {
        match self.orientation() {
            Orientation::StressExplicit => (
                Tangent4::scaled_identity(1.0),
                self.response_tangent(d, x).scale(-1.0),
            ),
            Orientation::StrainExplicit => {
                (self.response_tangent(s, x), Tangent4::scaled_identity(-1.0))
            }
        }
    }

    /// A point `(D, S)` on the graph generated from `input`.
    fn graph_point(&self, input: SymTensor2, x: Point) -> (SymTensor2, SymTensor2) {
        let out = self.response(input, x);
        match self.orientation() {
            Orientation::StressExplicit => (input, out),
            Orientation::StrainExplicit => (out, input),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstitutiveModel {
    Newtonian { nu: f64 },
    /// `S = 2ν (ε² + |D|²)^{(r-2)/2} D`.
    Carreau { nu: f64, eps: f64, r: f64 },
    /// Nondimensional `S = (Bn (1 - e^{-M|D|})/|D| + 1) D`.
    BinghamPapanastasiou { bn: f64, m: f64 },
    /// Strain-explicit Navier–Stokes/Euler switch, regularized inside `region`.
    ActivatedEulerNs { nu: f64, delta_s: f64, m: f64, region: Disk },
}

impl ConstitutiveModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("constitutive parameter {what}")));
        match *self {
            ConstitutiveModel::Newtonian { nu } if !(nu > 0.0) => bad("ν must be positive"),
            ConstitutiveModel::Carreau { nu, eps, r } => {
                if !(nu > 0.0) {
                    bad("ν must be positive")
                } else if !(eps >= 0.0) {
                    bad("ε must be non-negative")
                } else if !(r > 1.0) {
                    bad("r must exceed 1")
                } else {
                    Ok(())
                }
            }
            ConstitutiveModel::BinghamPapanastasiou { bn, m } => {
                if !(bn >= 0.0) {
                    bad("Bn must be non-negative")
                } else if !(m > 0.0) {
                    bad("M must be positive")
                } else {
                    Ok(())
                }
            }
            ConstitutiveModel::ActivatedEulerNs { nu, delta_s, m, region } => {
                if !(nu > 0.0) {
                    bad("ν must be positive")
                } else if !(delta_s >= 0.0) {
                    bad("δ_s must be non-negative")
                } else if !(m > 0.0) {
                    bad("M must be positive")
                } else if !(region.radius_sq >= 0.0) {
                    bad("activation radius must be non-negative")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConstitutiveModel::Newtonian { .. } => "newtonian",
            ConstitutiveModel::Carreau { .. } => "carreau",
            ConstitutiveModel::BinghamPapanastasiou { .. } => "bingham",
            ConstitutiveModel::ActivatedEulerNs { .. } => "activated",
        }
    }
}

impl ConstitutiveLaw for ConstitutiveModel {
    fn orientation(&self) -> Orientation {
        match self {
            ConstitutiveModel::ActivatedEulerNs { .. } => Orientation::StrainExplicit,
            _ => Orientation::StressExplicit,
        }
    }

    fn response(&self, input: SymTensor2, x: Point) -> SymTensor2 {
        match *self {
            ConstitutiveModel::Newtonian { nu } => input.scale(2.0 * nu),
            ConstitutiveModel::Carreau { nu, eps, r } => carreau_stress(input, nu, eps, r),
            ConstitutiveModel::BinghamPapanastasiou { bn, m } => {
                bingham_papanastasiou_stress(input, bn, m)
            }
            ConstitutiveModel::ActivatedEulerNs { nu, delta_s, m, region } => {
                activated_strain(input, x, nu, delta_s, m, &region)
            }
        }
    }

    fn response_tangent(&self, input: SymTensor2, x: Point) -> Tangent4 {
        match *self {
            ConstitutiveModel::Newtonian { nu } => Tangent4::scaled_identity(2.0 * nu),
            ConstitutiveModel::Carreau { nu, eps, r } => {
                let base = eps * eps + input.norm_sq();
                if base == 0.0 {
                    // ε = 0 at D = 0: the limit is singular for r < 2
                    let a = if r > 2.0 { 0.0 } else if r == 2.0 { 2.0 * nu } else { f64::INFINITY };
                    return Tangent4::scaled_identity(a);
                }
                let phi = base.powf(0.5 * (r - 2.0));
                let psi = phi / base;
                Tangent4::isotropic(2.0 * nu * phi, 2.0 * nu * (r - 2.0) * psi, input, input)
            }
            ConstitutiveModel::BinghamPapanastasiou { bn, m } => {
                saturating_tangent(input, bn, m, 1.0)
            }
            ConstitutiveModel::ActivatedEulerNs { nu, delta_s, m, region } => {
                if region.contains(x) {
                    saturating_tangent(input, delta_s, m, 0.5 / nu)
                } else {
                    Tangent4::scaled_identity(0.5 / nu)
                }
            }
        }
    }

    fn growth_exponent(&self) -> f64 {
        match *self {
            ConstitutiveModel::Carreau { r, .. } => r,
            _ => 2.0,
        }
    }

    fn sample_point(&self, rng: &mut dyn RngCore) -> Point {
        match self {
            ConstitutiveModel::ActivatedEulerNs { region, .. } if rng.gen_bool(0.5) => {
                let radius = region.radius_sq.sqrt() * rng.gen::<f64>().sqrt();
                let angle = std::f64::consts::TAU * rng.gen::<f64>();
                [
                    region.center[0] + radius * angle.cos(),
                    region.center[1] + radius * angle.sin(),
                ]
            }
            _ => [rng.gen(), rng.gen()],
        }
    }
}

/// `S = 2ν (ε² + |D|²)^{(r-2)/2} D`.
pub fn carreau_stress(d: SymTensor2, nu: f64, eps: f64, r: f64) -> SymTensor2 {
    let base = eps * eps + d.norm_sq();
    if base == 0.0 {
        return SymTensor2::ZERO;
    }
    d.scale(2.0 * nu * base.powf(0.5 * (r - 2.0)))
}

/// `S = (Bn (1 - e^{-M|D|})/|D| + 1) D`.
pub fn bingham_papanastasiou_stress(d: SymTensor2, bn: f64, m: f64) -> SymTensor2 {
    let (g, _) = saturation(m, d.norm());
    d.scale(bn * g + 1.0)
}

/// `D = (δ_s (1 - e^{-M|S|})/|S| + 1/(2ν)) S` inside `region`, `S/(2ν)` outside.
pub fn activated_strain(
    s: SymTensor2,
    x: Point,
    nu: f64,
    delta_s: f64,
    m: f64,
    region: &Disk,
) -> SymTensor2 {
    if region.contains(x) {
        let (g, _) = saturation(m, s.norm());
        s.scale(delta_s * g + 0.5 / nu)
    } else {
        s.scale(0.5 / nu)
    }
}

/// `g(t) = (1 - e^{-Mt})/t` and `g'(t)`, with the series used for small `Mt`
/// so both stay accurate and continuous through `t = 0` (where g = M).
pub fn saturation(m: f64, t: f64) -> (f64, f64) {
    let z = m * t;
    if z < 1e-2 {
        // g = M Σ (-z)^k/(k+1)!, g' = M² Σ (-1)^{k+1} (k+1) z^k/(k+2)!
        let (mut g, mut dg) = (0.0, 0.0);
        let mut zk = 1.0;
        let mut fact = 1.0; // (k+1)!
        for k in 0..8 {
            let kf = k as f64;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            g += sign * zk / fact;
            dg -= sign * (kf + 1.0) * zk / (fact * (kf + 2.0));
            zk *= z;
            fact *= kf + 2.0;
        }
        (m * g, m * m * dg)
    } else {
        let em1 = (-z).exp_m1(); // e^{-z} - 1
        let g = -em1 / t;
        let dg = (z * (-z).exp() + em1) / (t * t);
        (g, dg)
    }
}

/// Tangent of `T ↦ (a·g(|T|) + b) T`.
fn saturating_tangent(t: SymTensor2, a: f64, m: f64, b: f64) -> Tangent4 {
    let n = t.norm();
    let (g, dg) = saturation(m, n);
    if n == 0.0 {
        return Tangent4::scaled_identity(a * g + b);
    }
    Tangent4::isotropic(a * g + b, a * dg / n, t, t)
}

/// A random symmetric tensor with log-uniform norm in `[lo, hi]`.
pub fn random_tensor(rng: &mut dyn RngCore, lo: f64, hi: f64, traceless: bool) -> SymTensor2 {
    let dir = if traceless {
        SymTensor2::new(1.0, -1.0, 0.0).rotate(rng.gen::<f64>() * std::f64::consts::PI)
    } else {
        SymTensor2::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    };
    let n = dir.norm();
    if n == 0.0 {
        return SymTensor2::new(lo, 0.0, 0.0);
    }
    let mag = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
    dir.scale(mag / n)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Outcome of sampling `(S₁-S₂):(D₁-D₂) ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub samples: usize,
    pub min_inner: f64,
    pub passed: bool,
    /// `((D₁, S₁), (D₂, S₂), x)` of the worst pair when the check fails.
    pub witness: Option<((SymTensor2, SymTensor2), (SymTensor2, SymTensor2), Point)>,
}

pub const MONOTONICITY_TOLERANCE: f64 = 1e-12;

/// Samples pairs on the graph at common points, with input magnitudes up to
/// `max_norm`. Half of the pairs are close neighbours to probe local monotonicity.
pub fn check_monotone<L: ConstitutiveLaw + ?Sized>(
    law: &L,
    samples: usize,
    seed: u64,
    max_norm: f64,
    exec: Execution,
) -> MonotonicityReport {
    let results = map_indexed(exec, samples, |i| {
        let mut rng = sample_rng(seed, i);
        let x = law.sample_point(&mut rng);
        let traceless = rng.gen_bool(0.5);
        let a = random_tensor(&mut rng, 1e-4, max_norm, traceless);
        let b = if i % 2 == 0 {
            random_tensor(&mut rng, 1e-4, max_norm, traceless)
        } else {
            a + random_tensor(&mut rng, 1e-6 * a.norm().max(1e-6), 1e-2 * a.norm().max(1e-4), traceless)
        };
        let p1 = law.graph_point(a, x);
        let p2 = law.graph_point(b, x);
        let inner = (p1.1 - p2.1).dot(p1.0 - p2.0);
        (inner, p1, p2, x)
    });
    let worst = results
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .cloned();
    let min_inner = worst.as_ref().map_or(f64::INFINITY, |w| w.0);
    let passed = min_inner >= -MONOTONICITY_TOLERANCE;
    MonotonicityReport {
        samples,
        min_inner,
        passed,
        witness: if passed { None } else { worst.map(|w| (w.1, w.2, w.3)) },
    }
}

/// Fitted constants of `S:D ≥ -m + c(|D|^r + |S|^{r'})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoercivityReport {
    pub c: f64,
    pub m: f64,
    pub passed: bool,
}

/// Fits `c` on the upper half of the samples (ranked by `|D|^r + |S|^{r'}`),
/// where the offset is negligible, then the smallest `m` making the
/// inequality hold for every sample with that `c`. Fails when `c = 0`.
pub fn check_coercive<L: ConstitutiveLaw + ?Sized>(
    law: &L,
    r: f64,
    samples: usize,
    seed: u64,
    norm_range: (f64, f64),
    exec: Execution,
) -> CoercivityReport {
    let rp = r / (r - 1.0);
    let mut pairs = map_indexed(exec, samples, |i| {
        let mut rng = sample_rng(seed, i);
        let x = law.sample_point(&mut rng);
        let traceless = rng.gen_bool(0.5);
        let input = random_tensor(&mut rng, norm_range.0, norm_range.1, traceless);
        let (d, s) = law.graph_point(input, x);
        (s.dot(d), d.norm().powf(r) + s.norm().powf(rp))
    });
    pairs.sort_by(|a, b| a.1.total_cmp(&b.1));
    let tail = &pairs[pairs.len() / 2..];
    let c = tail
        .iter()
        .filter(|p| p.1 > 0.0)
        .map(|p| p.0 / p.1)
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    let c = if c.is_finite() { c } else { 0.0 };
    let m = pairs.iter().map(|p| c * p.1 - p.0).fold(0.0, f64::max);
    CoercivityReport {
        c,
        m,
        passed: c > 0.0,
    }
}
