use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest absolute coordinate of a generated shape.
pub const SHAPE_EXTENT: f64 = 0.9;
pub const PARAM_MIN: f64 = 0.2;
pub const PARAM_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Cone,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] =
        [ShapeFamily::Sphere, ShapeFamily::Box, ShapeFamily::Cylinder, ShapeFamily::Torus, ShapeFamily::Cone];

    /// Number of parameters the family takes.
    pub fn arity(self) -> usize {
        match self {
            ShapeFamily::Sphere => 1,
            ShapeFamily::Box => 3,
            ShapeFamily::Cylinder | ShapeFamily::Torus | ShapeFamily::Cone => 2,
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|f| *f == self).expect("family listed in ALL")
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Cone => "cone",
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Spec(format!("unknown shape family `{s}`")))
    }
}

/// Parametric description of one synthetic shape.
///
/// Parameters per family:
/// - sphere: `[radius]`
/// - box: `[half_x, half_y, half_z]`
/// - cylinder: `[radius, half_height]` (axis z, capped)
/// - torus: `[major_radius, minor_radius]` (axis z)
/// - cone: `[base_radius, height]` (axis z, apex up, base disk included)
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    pub params: Vec<f64>,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(family: ShapeFamily, params: Vec<f64>, seed: u64) -> Result<Self> {
        let spec = Self { family, params, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        validate_params(self.family, &self.params)
    }

    /// Half-extents of the un-normalised analytic shape along x, y, z.
    fn half_extents(&self) -> [f64; 3] {
        let p = &self.params;
        match self.family {
            ShapeFamily::Sphere => [p[0]; 3],
            ShapeFamily::Box => [p[0], p[1], p[2]],
            ShapeFamily::Cylinder => [p[0], p[0], p[1]],
            ShapeFamily::Torus => [p[0] + p[1], p[0] + p[1], p[1]],
            ShapeFamily::Cone => [p[0], p[0], p[1] / 2.0],
        }
    }

    /// Factor mapping analytic coordinates into the normalised cube.
    pub fn normalization_scale(&self) -> f64 {
        let e = self.half_extents();
        SHAPE_EXTENT / e[0].max(e[1]).max(e[2])
    }
}

pub fn validate_params(family: ShapeFamily, params: &[f64]) -> Result<()> {
    if params.len() != family.arity() {
        return Err(Error::Spec(format!(
            "{family} takes {} parameter(s), got {}",
            family.arity(),
            params.len()
        )));
    }
    if let Some(bad) = params.iter().find(|p| !(PARAM_MIN..=PARAM_MAX).contains(*p)) {
        return Err(Error::Spec(format!("{family} parameter {bad} outside [{PARAM_MIN}, {PARAM_MAX}]")));
    }
    Ok(())
}

/// A finite point set inside `[-1, 1]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudShape {
    pub points: Vec<[f64; 3]>,
}

impl PointCloudShape {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        let cloud = Self { points };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Shape("point cloud is empty".into()));
        }
        for p in &self.points {
            if p.iter().any(|c| !c.is_finite() || c.abs() > 1.0) {
                return Err(Error::Shape(format!("point {p:?} is non-finite or outside [-1, 1]")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        c
    }
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)]
}

/// Index drawn proportionally to `weights`.
fn pick<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn sample_disk<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> (f64, f64) {
    let rho = radius * rng.random::<f64>().sqrt();
    let phi = rng.random::<f64>() * 2.0 * PI;
    (rho * phi.cos(), rho * phi.sin())
}

/// One point uniformly distributed on the analytic surface, in analytic
/// (un-normalised, bbox-centred) coordinates.
fn sample_surface<R: Rng + ?Sized>(spec: &ShapeSpec, rng: &mut R) -> [f64; 3] {
    let p = &spec.params;
    match spec.family {
        ShapeFamily::Sphere => loop {
            let g = gaussian3(rng);
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if norm > 1e-12 {
                break [p[0] * g[0] / norm, p[0] * g[1] / norm, p[0] * g[2] / norm];
            }
        },
        ShapeFamily::Box => {
            let (a, b, c) = (p[0], p[1], p[2]);
            let axis = pick(rng, &[b * c, a * c, a * b]);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mut u = |h: f64| rng.random_range(-h..=h);
            match axis {
                0 => [sign * a, u(b), u(c)],
                1 => [u(a), sign * b, u(c)],
                _ => [u(a), u(b), sign * c],
            }
        }
        ShapeFamily::Cylinder => {
            let (r, h) = (p[0], p[1]);
            match pick(rng, &[2.0 * PI * r * 2.0 * h, PI * r * r, PI * r * r]) {
                0 => {
                    let phi = rng.random::<f64>() * 2.0 * PI;
                    [r * phi.cos(), r * phi.sin(), rng.random_range(-h..=h)]
                }
                cap => {
                    let (x, y) = sample_disk(rng, r);
                    [x, y, if cap == 1 { h } else { -h }]
                }
            }
        }
        ShapeFamily::Torus => {
            let (major, minor) = (p[0], p[1]);
            // Rejection on the area element |major + minor cos v|.
            let v = loop {
                let v = rng.random::<f64>() * 2.0 * PI;
                if rng.random::<f64>() * (major + minor) <= (major + minor * v.cos()).abs() {
                    break v;
                }
            };
            let u = rng.random::<f64>() * 2.0 * PI;
            let ring = major + minor * v.cos();
            [ring * u.cos(), ring * u.sin(), minor * v.sin()]
        }
        ShapeFamily::Cone => {
            let (r, h) = (p[0], p[1]);
            let slant = (r * r + h * h).sqrt();
            match pick(rng, &[PI * r * slant, PI * r * r]) {
                0 => {
                    // Fraction of the way from apex to base; area grows linearly.
                    let s = rng.random::<f64>().sqrt();
                    let phi = rng.random::<f64>() * 2.0 * PI;
                    [r * s * phi.cos(), r * s * phi.sin(), h / 2.0 - h * s]
                }
                _ => {
                    let (x, y) = sample_disk(rng, r);
                    [x, y, -h / 2.0]
                }
            }
        }
    }
}

/// Samples `n_points` points uniformly on the surface described by `spec`,
/// centred on the analytic bounding box and scaled so the largest analytic
/// half-extent maps to [`SHAPE_EXTENT`].
pub fn generate_shape<R: Rng + ?Sized>(spec: &ShapeSpec, n_points: usize, rng: &mut R) -> Result<PointCloudShape> {
    spec.validate()?;
    if n_points < 8 {
        return Err(Error::Spec(format!("n_points must be at least 8, got {n_points}")));
    }
    let e = spec.half_extents();
    let max_extent = e[0].max(e[1]).max(e[2]);
    let points = (0..n_points)
        .map(|_| {
            let p = sample_surface(spec, rng);
            p.map(|v| (v / max_extent * SHAPE_EXTENT).clamp(-SHAPE_EXTENT, SHAPE_EXTENT))
        })
        .collect();
    Ok(PointCloudShape { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen(family: ShapeFamily, params: &[f64], n: usize, seed: u64) -> PointCloudShape {
        let spec = ShapeSpec::new(family, params.to_vec(), seed).unwrap();
        generate_shape(&spec, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn sphere_points_sit_on_the_normalised_radius() {
        let cloud = gen(ShapeFamily::Sphere, &[1.0], 256, 1);
        assert_eq!(cloud.len(), 256);
        for p in &cloud.points {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 0.9).abs() < 1e-12, "radius {r}");
        }
    }

    #[test]
    fn cube_points_lie_on_faces() {
        let cloud = gen(ShapeFamily::Box, &[0.5, 0.5, 0.5], 64, 3);
        let mut max = [0.0f64; 3];
        for p in &cloud.points {
            let on_face = p.iter().any(|c| (c.abs() - 0.9).abs() < 1e-12);
            assert!(on_face, "{p:?} not on a face");
            for k in 0..3 {
                max[k] = max[k].max(p[k].abs());
            }
        }
        for m in max {
            assert!((m - 0.9).abs() < 1e-12, "axis max {m}");
        }
    }

    #[test]
    fn torus_points_satisfy_the_implicit_equation() {
        let spec = ShapeSpec::new(ShapeFamily::Torus, vec![0.8, 0.3], 7).unwrap();
        let cloud = generate_shape(&spec, 512, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let s = spec.normalization_scale();
        let (major, minor) = (0.8 * s, 0.3 * s);
        for p in &cloud.points {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let dist = ((rho - major).powi(2) + p[2] * p[2]).sqrt();
            assert!((dist - minor).abs() < 1e-6, "residual {}", (dist - minor).abs());
        }
    }

    #[test]
    fn cylinder_and_cone_points_lie_on_their_surfaces() {
        let cyl = ShapeSpec::new(ShapeFamily::Cylinder, vec![0.4, 0.9], 0).unwrap();
        let s = cyl.normalization_scale();
        let (r, h) = (0.4 * s, 0.9 * s);
        for p in generate_shape(&cyl, 300, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().points {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let lateral = (rho - r).abs() < 1e-9 && p[2].abs() <= h + 1e-12;
            let cap = (p[2].abs() - h).abs() < 1e-9 && rho <= r + 1e-9;
            assert!(lateral || cap, "{p:?}");
        }
        let cone = ShapeSpec::new(ShapeFamily::Cone, vec![0.6, 1.0], 0).unwrap();
        let s = cone.normalization_scale();
        let (r, h) = (0.6 * s, 1.0 * s);
        for p in generate_shape(&cone, 300, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().points {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let expected_rho = r * (h / 2.0 - p[2]) / h;
            let lateral = (rho - expected_rho).abs() < 1e-9;
            let base = (p[2] + h / 2.0).abs() < 1e-9 && rho <= r + 1e-9;
            assert!(lateral || base, "{p:?}");
        }
    }

    #[test]
    fn symmetric_families_have_centroid_near_origin() {
        for (family, params) in [
            (ShapeFamily::Sphere, vec![0.7]),
            (ShapeFamily::Box, vec![0.3, 0.8, 0.5]),
            (ShapeFamily::Torus, vec![0.7, 0.25]),
        ] {
            let c = gen(family, &params, 1024, 11).centroid();
            let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            assert!(norm < 0.05, "{family}: centroid {c:?}");
        }
    }

    #[test]
    fn regeneration_is_bit_exact() {
        let a = gen(ShapeFamily::Cone, &[0.5, 0.9], 128, 42);
        let b = gen(ShapeFamily::Cone, &[0.5, 0.9], 128, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ShapeSpec::new(ShapeFamily::Box, vec![0.5, 0.5], 0).is_err());
        assert!(ShapeSpec::new(ShapeFamily::Sphere, vec![1.5], 0).is_err());
        assert!(ShapeSpec::new(ShapeFamily::Torus, vec![0.1, 0.5], 0).is_err());
        let spec = ShapeSpec::new(ShapeFamily::Sphere, vec![0.5], 0).unwrap();
        assert!(generate_shape(&spec, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!("pyramid".parse::<ShapeFamily>().is_err());
        assert_eq!("Torus".parse::<ShapeFamily>().unwrap(), ShapeFamily::Torus);
    }

    proptest::proptest! {
        #[test]
        fn every_coordinate_stays_in_the_extent(
            family_idx in 0usize..5,
            raw in proptest::collection::vec(0.2f64..=1.0, 3),
            seed in 0u64..1000,
        ) {
            let family = ShapeFamily::ALL[family_idx];
            let params = raw[..family.arity()].to_vec();
            let cloud = gen(family, &params, 64, seed);
            for p in &cloud.points {
                for c in p {
                    proptest::prop_assert!(c.abs() <= SHAPE_EXTENT);
                }
            }
        }
    }
}
