//! A tiny diffuse path tracer written over primary sample space, so that a
//! rendered image can serve as a target density: `f(u)` is the RGB path
//! contribution and `p(u)` its luminance.
//!
//! Paths have a fixed number of bounces and no Russian roulette, which keeps
//! `p` a plain function on a torus of fixed dimension `2 + 2 * max_depth`.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::drivers::render_independent;
use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::target::{ImageGrid, TargetDensity, TargetEvaluation, MAX_DIM};

/// Self-intersection offset along the shading normal.
const RAY_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self([x, y, z])
    }

    pub fn dot(self, o: Self) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(self, o: Self) -> Self {
        let [a, b, c] = self.0;
        let [x, y, z] = o.0;
        Self([b * z - c * y, c * x - a * z, a * y - b * x])
    }

    pub fn length(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        self * (1.0 / self.length())
    }
}

impl Add for Vec3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for Vec3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Mul<f64> for Vec3 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
}

impl Neg for Vec3 {
    type Output = Self;
    fn neg(self) -> Self {
        self * -1.0
    }
}

/// Parallelogram `corner + s * edge_u + t * edge_v`, `s, t ∈ [0, 1]`, with
/// diffuse albedo and emitted radiance (either may be zero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quad {
    pub corner: [f64; 3],
    pub edge_u: [f64; 3],
    pub edge_v: [f64; 3],
    #[serde(default)]
    pub albedo: [f64; 3],
    #[serde(default)]
    pub emission: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    #[serde(default)]
    pub albedo: [f64; 3],
    #[serde(default)]
    pub emission: [f64; 3],
}

/// Pinhole camera; `fov` is the vertical field of view in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    pub fov: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDesc {
    pub width: usize,
    pub height: usize,
    pub max_depth: usize,
    pub camera: Camera,
    #[serde(default)]
    pub quads: Vec<Quad>,
    #[serde(default)]
    pub spheres: Vec<Sphere>,
}

#[derive(Clone, Copy, Debug)]
struct QuadGeom {
    corner: Vec3,
    u: Vec3,
    v: Vec3,
    normal: Vec3,
    // Dual basis for solving the in-plane coordinates.
    w: Vec3,
    material: usize,
}

#[derive(Clone, Copy, Debug)]
struct SphereGeom {
    center: Vec3,
    radius: f64,
    material: usize,
}

/// A validated scene ready for tracing.
#[derive(Clone, Debug)]
pub struct Scene {
    desc: SceneDesc,
    quads: Vec<QuadGeom>,
    spheres: Vec<SphereGeom>,
    materials: Vec<(Rgb, Rgb)>,
    origin: Vec3,
    // Camera frame scaled so that direction = forward + sx * right + sy * up.
    forward: Vec3,
    right: Vec3,
    up: Vec3,
}

struct Hit {
    t: f64,
    normal: Vec3,
    material: usize,
}

fn vec3(a: [f64; 3]) -> Vec3 {
    Vec3(a)
}

fn check_material(albedo: &[f64; 3], emission: &[f64; 3]) -> Result<()> {
    let ok = albedo.iter().all(|a| (0.0..=1.0).contains(a))
        && emission.iter().all(|e| e.is_finite() && *e >= 0.0);
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "material needs albedo in [0, 1] and finite nonnegative emission, got {albedo:?} / {emission:?}"
        )))
    }
}

impl Scene {
    pub fn new(desc: SceneDesc) -> Result<Self> {
        if desc.width == 0 || desc.height == 0 {
            return Err(Error::Config("scene image must have at least one pixel".into()));
        }
        if 2 + 2 * desc.max_depth > MAX_DIM {
            return Err(Error::Config(format!(
                "max_depth {} exceeds the supported {}",
                desc.max_depth,
                (MAX_DIM - 2) / 2
            )));
        }
        let cam = &desc.camera;
        if !(cam.fov > 0.0 && cam.fov < 180.0) {
            return Err(Error::Config(format!("camera fov {} must lie in (0, 180)", cam.fov)));
        }
        let mut materials = Vec::new();
        let mut quads = Vec::new();
        for q in &desc.quads {
            check_material(&q.albedo, &q.emission)?;
            let (u, v) = (vec3(q.edge_u), vec3(q.edge_v));
            let n = u.cross(v);
            if !(n.length() > 0.0) {
                return Err(Error::Config("degenerate quad".into()));
            }
            let w = n * (1.0 / n.dot(n));
            quads.push(QuadGeom {
                corner: vec3(q.corner),
                u,
                v,
                normal: n.normalized(),
                w,
                material: materials.len(),
            });
            materials.push((Rgb(q.albedo), Rgb(q.emission)));
        }
        let mut spheres = Vec::new();
        for s in &desc.spheres {
            check_material(&s.albedo, &s.emission)?;
            if !(s.radius > 0.0) {
                return Err(Error::Config("sphere radius must be positive".into()));
            }
            spheres.push(SphereGeom {
                center: vec3(s.center),
                radius: s.radius,
                material: materials.len(),
            });
            materials.push((Rgb(s.albedo), Rgb(s.emission)));
        }
        let origin = vec3(cam.position);
        let forward = vec3(cam.look_at) - origin;
        if !(forward.length() > 0.0) {
            return Err(Error::Config("camera look_at equals its position".into()));
        }
        let forward = forward.normalized();
        let right = forward.cross(vec3(cam.up));
        if !(right.length() > 1e-12) {
            return Err(Error::Config("camera up is parallel to the view direction".into()));
        }
        let right = right.normalized();
        let up = right.cross(forward);
        let half = (cam.fov.to_radians() * 0.5).tan();
        let aspect = desc.width as f64 / desc.height as f64;
        Ok(Self {
            quads,
            spheres,
            materials,
            origin,
            forward,
            right: right * (half * aspect),
            up: up * half,
            desc,
        })
    }

    pub fn desc(&self) -> &SceneDesc {
        &self.desc
    }

    pub fn max_depth(&self) -> usize {
        self.desc.max_depth
    }

    /// Upper bound on any path contribution: `Σ_{k≤D} a_max^k E_max`.
    pub fn contribution_bound(&self) -> f64 {
        let a = self
            .materials
            .iter()
            .flat_map(|(a, _)| a.0)
            .fold(0.0, f64::max);
        let e = self
            .materials
            .iter()
            .flat_map(|(_, e)| e.0)
            .fold(0.0, f64::max);
        (0..=self.desc.max_depth as i32).map(|k| a.powi(k)).sum::<f64>() * e
    }

    fn intersect(&self, o: Vec3, d: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut t_max = f64::INFINITY;
        for q in &self.quads {
            let denom = q.normal.dot(d);
            if denom.abs() < 1e-14 {
                continue;
            }
            let t = q.normal.dot(q.corner - o) / denom;
            if !(t > RAY_EPS && t < t_max) {
                continue;
            }
            let rel = o + d * t - q.corner;
            let s = q.w.dot(rel.cross(q.v));
            let r = q.w.dot(q.u.cross(rel));
            if (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&r) {
                t_max = t;
                best = Some(Hit { t, normal: q.normal, material: q.material });
            }
        }
        for s in &self.spheres {
            let oc = o - s.center;
            let b = oc.dot(d);
            let c = oc.dot(oc) - s.radius * s.radius;
            let disc = b * b - c;
            if disc < 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > RAY_EPS { -b - sq } else { -b + sq };
            if t > RAY_EPS && t < t_max {
                t_max = t;
                let normal = (oc + d * t) * (1.0 / s.radius);
                best = Some(Hit { t, normal, material: s.material });
            }
        }
        best
    }

    /// Follows the path encoded by `u`: `u[0], u[1]` give the image-plane
    /// position (column from `u[0]`, row from `u[1]`, row 0 at the top), and
    /// each following pair picks a cosine-weighted bounce direction.
    pub fn trace(&self, u: &[f64]) -> TargetEvaluation {
        debug_assert_eq!(u.len(), 2 + 2 * self.desc.max_depth);
        let grid = self.grid();
        let pixel = grid.pixel_of(u[0], u[1]);
        let sx = 2.0 * u[0] - 1.0;
        let sy = 1.0 - 2.0 * u[1];
        let mut dir = (self.forward + self.right * sx + self.up * sy).normalized();
        let mut origin = self.origin;
        let mut throughput = Rgb::splat(1.0);
        let mut f = Rgb::ZERO;
        for bounce in 0..=self.desc.max_depth {
            let Some(hit) = self.intersect(origin, dir) else {
                break;
            };
            let (albedo, emission) = self.materials[hit.material];
            f += throughput.hadamard(emission);
            if bounce == self.desc.max_depth {
                break;
            }
            // Cosine sampling cancels the BRDF cosine / pdf ratio down to the albedo.
            throughput = throughput.hadamard(albedo);
            if throughput.max_channel() == 0.0 {
                break;
            }
            let n = if hit.normal.dot(dir) < 0.0 { hit.normal } else { -hit.normal };
            let pair = &u[2 + 2 * bounce..4 + 2 * bounce];
            origin = origin + dir * hit.t + n * RAY_EPS;
            dir = cosine_direction(n, pair[0], pair[1]);
        }
        TargetEvaluation { f, p: f.luminance(), pixel }
    }
}

/// Concentric square-to-disk map followed by projection onto the hemisphere.
pub fn concentric_disk(u0: f64, u1: f64) -> (f64, f64) {
    let a = 2.0 * u0 - 1.0;
    let b = 2.0 * u1 - 1.0;
    if a == 0.0 && b == 0.0 {
        return (0.0, 0.0);
    }
    let (r, theta) = if a.abs() > b.abs() {
        (a, std::f64::consts::FRAC_PI_4 * (b / a))
    } else {
        (b, std::f64::consts::FRAC_PI_2 - std::f64::consts::FRAC_PI_4 * (a / b))
    };
    (r * theta.cos(), r * theta.sin())
}

fn cosine_direction(n: Vec3, u0: f64, u1: f64) -> Vec3 {
    let (x, y) = concentric_disk(u0, u1);
    let z = (1.0 - x * x - y * y).max(0.0).sqrt();
    // Branchless orthonormal basis (Duff et al.).
    let [nx, ny, nz] = n.0;
    let sign = 1.0f64.copysign(nz);
    let a = -1.0 / (sign + nz);
    let b = nx * ny * a;
    let t = Vec3::new(1.0 + sign * nx * nx * a, sign * b, -sign * nx);
    let s = Vec3::new(b, sign + ny * ny * a, -ny);
    t * x + s * y + n * z
}

impl TargetDensity for Scene {
    fn dim(&self) -> usize {
        2 + 2 * self.desc.max_depth
    }

    fn grid(&self) -> ImageGrid {
        ImageGrid::new(self.desc.width, self.desc.height)
    }

    fn eval(&self, x: &[f64]) -> TargetEvaluation {
        self.trace(x)
    }
}

/// Per-pixel mean of `spp` independent samples of the path contribution.
pub fn render_reference(scene: &Scene, spp: u64, threads: usize, seed: u64) -> Result<Image> {
    if spp == 0 {
        return Err(Error::Config("reference render needs at least one sample per pixel".into()));
    }
    render_independent(scene, spp, threads, seed)
}

fn wall(corner: [f64; 3], edge_u: [f64; 3], edge_v: [f64; 3], albedo: [f64; 3], emission: [f64; 3]) -> Quad {
    Quad { corner, edge_u, edge_v, albedo, emission }
}

/// Unit Cornell-style box, open towards the camera, with a small ceiling
/// light and one diffuse sphere. Two bounces (`d = 6`), 32 x 32 pixels.
pub fn cornell_box() -> SceneDesc {
    let white = [0.75, 0.75, 0.75];
    let black = [0.0; 3];
    SceneDesc {
        width: 32,
        height: 32,
        max_depth: 2,
        camera: Camera {
            position: [0.5, 0.5, -1.4],
            look_at: [0.5, 0.5, 0.0],
            up: [0.0, 1.0, 0.0],
            fov: 40.0,
        },
        quads: vec![
            wall([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], white, black),
            wall([0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], white, black),
            wall([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], white, black),
            wall([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.75, 0.15, 0.15], black),
            wall([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.15, 0.75, 0.15], black),
            wall([0.35, 0.999, 0.35], [0.3, 0.0, 0.0], [0.0, 0.0, 0.3], black, [8.0, 8.0, 8.0]),
        ],
        spheres: vec![Sphere {
            center: [0.32, 0.2, 0.6],
            radius: 0.2,
            albedo: white,
            emission: black,
        }],
    }
}

/// Closed box seen from inside; every wall has albedo `a` and emission `e`.
pub fn furnace_box(a: f64, e: f64, max_depth: usize) -> SceneDesc {
    let faces = [
        ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        ([0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
        ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
        ([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
        ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
    ];
    SceneDesc {
        width: 8,
        height: 8,
        max_depth,
        camera: Camera {
            position: [0.5, 0.5, 0.5],
            look_at: [0.5, 0.5, 1.0],
            up: [0.0, 1.0, 0.0],
            fov: 60.0,
        },
        quads: faces
            .iter()
            .map(|&(corner, edge_u, edge_v)| Quad { corner, edge_u, edge_v, albedo: [a; 3], emission: [e; 3] })
            .collect(),
        spheres: vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Philox;

    fn emitter_wall(e: f64, depth: usize) -> Scene {
        Scene::new(SceneDesc {
            width: 4,
            height: 4,
            max_depth: depth,
            camera: Camera { position: [0.0, 0.0, 0.0], look_at: [0.0, 0.0, 1.0], up: [0.0, 1.0, 0.0], fov: 60.0 },
            quads: vec![wall([-10.0, -10.0, 1.0], [20.0, 0.0, 0.0], [0.0, 20.0, 0.0], [0.0; 3], [e, 2.0 * e, 0.5 * e])],
            spheres: vec![],
        })
        .unwrap()
    }

    fn random_points(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Philox::for_chain(seed, 0, 0);
        (0..n).map(|_| (0..d).map(|_| rng.uniform()).collect()).collect()
    }

    #[test]
    fn full_screen_emitter_is_constant() {
        let s = emitter_wall(2.0, 2);
        assert_eq!(s.dim(), 6);
        let e = Rgb([2.0, 4.0, 1.0]);
        for u in random_points(6, 500, 1) {
            let ev = s.trace(&u);
            assert_eq!(ev.f, e);
            assert_eq!(ev.p, e.luminance());
        }
        let a = render_reference(&s, 1, 1, 3).unwrap();
        let b = render_reference(&s, 4, 1, 9).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert!(render_reference(&s, 0, 1, 3).is_err());
    }

    #[test]
    fn black_scene_is_zero() {
        let mut d = cornell_box();
        for q in &mut d.quads {
            q.emission = [0.0; 3];
        }
        let s = Scene::new(d).unwrap();
        for u in random_points(6, 2000, 2) {
            assert_eq!(s.trace(&u).f, Rgb::ZERO);
        }
    }

    #[test]
    fn trace_is_pure_and_respects_energy_bound() {
        let s = Scene::new(cornell_box()).unwrap();
        let bound = s.contribution_bound();
        assert!((bound - 8.0 * (1.0 + 0.75 + 0.75 * 0.75)).abs() < 1e-12);
        let mut lit = 0;
        for u in random_points(6, 50_000, 3) {
            let a = s.trace(&u);
            assert_eq!(a, s.trace(&u));
            assert!(a.f.0.iter().all(|c| (0.0..=bound).contains(c)), "{:?}", a.f);
            lit += usize::from(a.p > 0.0);
            let mut score = [0.0; 6];
            s.score(&u, &mut score);
            assert!(score.iter().all(|v| v.is_finite()));
        }
        assert!(lit > 1500, "{lit}");
    }

    #[test]
    fn pixel_follows_first_pair() {
        let s = Scene::new(cornell_box()).unwrap();
        assert_eq!(s.trace(&[0.0, 0.0, 0.5, 0.5, 0.5, 0.5]).pixel, 0);
        assert_eq!(s.trace(&[0.99, 0.99, 0.5, 0.5, 0.5, 0.5]).pixel, 32 * 32 - 1);
        assert_eq!(s.trace(&[0.99, 0.01, 0.5, 0.5, 0.5, 0.5]).pixel, 31);
    }

    #[test]
    fn cosine_directions_are_unit_and_upper() {
        for n in [Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0), Vec3::new(1.0, 2.0, -3.0).normalized()] {
            for u in random_points(2, 200, 4) {
                let d = cosine_direction(n, u[0], u[1]);
                assert!((d.length() - 1.0).abs() < 1e-12);
                assert!(d.dot(n) >= -1e-12);
            }
        }
        // Mean cosine of a cosine-weighted hemisphere is 2/3.
        let n = Vec3::new(0.0, 1.0, 0.0);
        let pts = random_points(2, 200_000, 5);
        let mean = pts.iter().map(|u| cosine_direction(n, u[0], u[1]).dot(n)).sum::<f64>() / pts.len() as f64;
        assert!((mean - 2.0 / 3.0).abs() < 3e-3, "{mean}");
    }

    #[test]
    fn furnace_per_sample_is_geometric_series() {
        // Inside a closed box every bounce hits a wall, so the value is deterministic.
        let (a, e) = (0.5, 1.0);
        for depth in 0..4 {
            let s = Scene::new(furnace_box(a, e, depth)).unwrap();
            let expect: f64 = (0..=depth as i32).map(|k| a.powi(k) * e).sum();
            for u in random_points(s.dim(), 300, 6) {
                let f = s.trace(&u).f;
                assert!((f.0[0] - expect).abs() < 1e-12, "{depth}: {f:?}");
            }
        }
    }

    #[test]
    fn invalid_scenes_are_rejected() {
        let mut d = cornell_box();
        d.quads[0].albedo = [1.2, 0.0, 0.0];
        assert!(Scene::new(d).is_err());
        let mut d = cornell_box();
        d.camera.fov = 0.0;
        assert!(Scene::new(d).is_err());
        let mut d = cornell_box();
        d.spheres[0].radius = -1.0;
        assert!(Scene::new(d).is_err());
        let mut d = cornell_box();
        d.max_depth = 20;
        assert!(Scene::new(d).is_err());
    }
}
