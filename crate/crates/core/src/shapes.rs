//! Analytic test shapes: uniform surface samplers with exact normals and area
//! weights, inside oracles, and reference meshes.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::pcio::{PointCloud, TriMesh};
use crate::Vec3;

/// Inside/outside test for a solid, used to place interior outliers.
pub trait InsideOracle: Sync {
    fn contains(&self, p: &Vec3) -> bool;
    /// Axis-aligned box enclosing the solid.
    fn bounds(&self) -> (Vec3, Vec3);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// Ring around the z axis with major radius `major` and tube radius `minor`.
    Torus {
        center: Vec3,
        major: f64,
        minor: f64,
    },
}

impl Shape {
    pub fn unit_sphere() -> Self {
        Shape::Sphere {
            center: Vec3::zeros(),
            radius: 1.0,
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Torus { major, minor, .. } => 4.0 * PI * PI * major * minor,
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            Shape::Sphere { radius, .. } => 4.0 / 3.0 * PI * radius.powi(3),
            Shape::Torus { major, minor, .. } => 2.0 * PI * PI * major * minor * minor,
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Shape::Torus {
                center,
                major,
                minor,
            } => {
                let d = p - center;
                let ring = (d.x * d.x + d.y * d.y).sqrt() - major;
                ((ring * ring + d.z * d.z).sqrt() - minor).abs()
            }
        }
    }

    pub fn normal_at(&self, p: &Vec3) -> Vec3 {
        match *self {
            Shape::Sphere { center, .. } => (p - center).normalize(),
            Shape::Torus { center, major, .. } => {
                let d = p - center;
                let rho = (d.x * d.x + d.y * d.y).sqrt().max(1e-300);
                let ring_pt = Vec3::new(d.x / rho * major, d.y / rho * major, 0.0);
                (d - ring_pt).normalize()
            }
        }
    }

    /// Surface point sampled uniformly by area, with its outward normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec3, Vec3) {
        match *self {
            Shape::Sphere { center, radius } => {
                let n = random_unit(rng);
                (center + n * radius, n)
            }
            Shape::Torus {
                center,
                major,
                minor,
            } => loop {
                let u = rng.random::<f64>() * 2.0 * PI;
                let v = rng.random::<f64>() * 2.0 * PI;
                // area element is proportional to (major + minor cos v)
                let accept = (major + minor * v.cos()) / (major + minor);
                if rng.random::<f64>() <= accept {
                    let n = Vec3::new(v.cos() * u.cos(), v.cos() * u.sin(), v.sin());
                    let p = center + Vec3::new(u.cos() * major, u.sin() * major, 0.0) + n * minor;
                    break (p, n);
                }
            },
        }
    }

    /// `n` area-uniform samples with outward normals and exact area weights
    /// `area / n`.
    pub fn sample_cloud<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> PointCloud {
        let (pos, nrm): (Vec<_>, Vec<_>) = (0..n).map(|_| self.sample(rng)).unzip();
        let a = vec![self.area() / n as f64; n];
        PointCloud::with_state(pos, nrm, a, vec![1.0; n]).expect("equal lengths")
    }
}

impl InsideOracle for Shape {
    fn contains(&self, p: &Vec3) -> bool {
        match *self {
            Shape::Sphere { center, radius } => (p - center).norm() < radius,
            Shape::Torus {
                center,
                major,
                minor,
            } => {
                let d = p - center;
                let ring = (d.x * d.x + d.y * d.y).sqrt() - major;
                ring * ring + d.z * d.z < minor * minor
            }
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match *self {
            Shape::Sphere { center, radius } => {
                (center.add_scalar(-radius), center.add_scalar(radius))
            }
            Shape::Torus {
                center,
                major,
                minor,
            } => {
                let e = Vec3::new(major + minor, major + minor, minor);
                (center - e, center + e)
            }
        }
    }
}

/// Oracle that applies a uniform scale + translation to another oracle:
/// `p` is inside iff `(p - offset) / scale` is inside `inner`.
pub struct ScaledOracle<'a> {
    pub inner: &'a dyn InsideOracle,
    pub offset: Vec3,
    pub scale: f64,
}

impl InsideOracle for ScaledOracle<'_> {
    fn contains(&self, p: &Vec3) -> bool {
        self.inner.contains(&((p - self.offset) / self.scale))
    }
    fn bounds(&self) -> (Vec3, Vec3) {
        let (lo, hi) = self.inner.bounds();
        (lo * self.scale + self.offset, hi * self.scale + self.offset)
    }
}

pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let len = v.norm();
        if len > 1e-12 {
            return v / len;
        }
    }
}

/// Icosphere with vertices projected onto the sphere after each subdivision.
pub fn icosphere(radius: f64, subdivisions: usize) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|v| Vec3::from(*v).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *mids.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriMesh {
        vertices: vertices.into_iter().map(|v| v * radius).collect(),
        faces,
    }
}

/// Regular `nx` by `ny` lattice in the z = 0 plane with spacing `h`.
pub fn square_lattice(nx: usize, ny: usize, h: f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push(Vec3::new(i as f64 * h, j as f64 * h, 0.0));
        }
    }
    out
}
