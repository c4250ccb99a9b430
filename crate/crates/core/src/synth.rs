//! Synthetic test fixtures: seeded uniform-area samplers for analytic
//! surfaces, paired meshes, and patch-pair generators for training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{Point3, PointCloud, TriMesh};
use crate::error::{Error, Result};
use crate::knn::SpatialIndex;
use crate::sampling::fps;

/// Analytic shapes with known surface samplers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Unit sphere centered at the origin.
    Sphere,
    /// Torus with major radius 1 and minor radius 0.3, axis z.
    Torus,
    /// Axis-aligned cube surface spanning [-1, 1]^3.
    Box,
    /// Segment from (-1, 0, 0) to (1, 0, 0).
    Line,
}

impl Shape {
    pub fn parse(s: &str) -> Result<Shape> {
        match s {
            "sphere" => Ok(Shape::Sphere),
            "torus" => Ok(Shape::Torus),
            "box" => Ok(Shape::Box),
            "line" => Ok(Shape::Line),
            other => Err(Error::InvalidArgument(format!(
                "unknown shape `{other}`; valid: sphere, torus, box, line"
            ))),
        }
    }
}

pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.3;

/// Uniform-area samples of the shape surface, seeded.
pub fn sample_shape(shape: Shape, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid stddev");
    let mut pts = Vec::with_capacity(n);
    match shape {
        Shape::Sphere => {
            while pts.len() < n {
                let v = Point3::new(
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                );
                let r = v.norm();
                if r > 1e-9 {
                    pts.push(v.scale(1.0 / r));
                }
            }
        }
        Shape::Torus => {
            // rejection on the minor angle keeps the sampling area-uniform
            while pts.len() < n {
                let u = rng.gen_range(0.0..std::f64::consts::TAU);
                let v = rng.gen_range(0.0..std::f64::consts::TAU);
                let accept = (TORUS_MAJOR + TORUS_MINOR * v.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.gen_range(0.0..1.0) <= accept {
                    let w = TORUS_MAJOR + TORUS_MINOR * v.cos();
                    pts.push(Point3::new(
                        w * u.cos(),
                        w * u.sin(),
                        TORUS_MINOR * v.sin(),
                    ));
                }
            }
        }
        Shape::Box => {
            // six faces of equal area
            for _ in 0..n {
                let face = rng.gen_range(0..6u8);
                let a = rng.gen_range(-1.0..1.0);
                let b = rng.gen_range(-1.0..1.0);
                pts.push(match face {
                    0 => Point3::new(1.0, a, b),
                    1 => Point3::new(-1.0, a, b),
                    2 => Point3::new(a, 1.0, b),
                    3 => Point3::new(a, -1.0, b),
                    4 => Point3::new(a, b, 1.0),
                    _ => Point3::new(a, b, -1.0),
                });
            }
        }
        Shape::Line => {
            for _ in 0..n {
                pts.push(Point3::new(rng.gen_range(-1.0..1.0), 0.0, 0.0));
            }
        }
    }
    PointCloud::new(pts)
}

/// Triangulated surface of the shape, when it has one.
pub fn shape_mesh(shape: Shape) -> Option<TriMesh> {
    match shape {
        Shape::Sphere => Some(icosphere(3)),
        Shape::Torus => Some(torus_mesh(96, 48)),
        Shape::Box => Some(box_mesh()),
        Shape::Line => None,
    }
}

fn box_mesh() -> TriMesh {
    let mut verts = Vec::with_capacity(8);
    for &x in &[-1.0, 1.0] {
        for &y in &[-1.0, 1.0] {
            for &z in &[-1.0, 1.0] {
                verts.push(Point3::new(x, y, z));
            }
        }
    }
    // vertex index = x*4 + y*2 + z with -1 -> 0, 1 -> 1
    let quads = [
        [0, 1, 3, 2], // x = -1
        [4, 6, 7, 5], // x = +1
        [0, 4, 5, 1], // y = -1
        [2, 3, 7, 6], // y = +1
        [0, 2, 6, 4], // z = -1
        [1, 5, 7, 3], // z = +1
    ];
    let mut faces = Vec::with_capacity(12);
    for q in quads {
        faces.push([q[0], q[1], q[2]]);
        faces.push([q[0], q[2], q[3]]);
    }
    TriMesh::new(verts, faces).expect("box mesh is valid")
}

fn icosphere(subdivisions: u32) -> TriMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<Point3> = vec![
        Point3::new(-1.0, phi, 0.0),
        Point3::new(1.0, phi, 0.0),
        Point3::new(-1.0, -phi, 0.0),
        Point3::new(1.0, -phi, 0.0),
        Point3::new(0.0, -1.0, phi),
        Point3::new(0.0, 1.0, phi),
        Point3::new(0.0, -1.0, -phi),
        Point3::new(0.0, 1.0, -phi),
        Point3::new(phi, 0.0, -1.0),
        Point3::new(phi, 0.0, 1.0),
        Point3::new(-phi, 0.0, -1.0),
        Point3::new(-phi, 0.0, 1.0),
    ]
    .into_iter()
    .map(|p| p.scale(1.0 / p.norm()))
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
    use std::collections::HashMap;
    for _ in 0..subdivisions {
        let mut midcache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midcache.entry(key).or_insert_with(|| {
                    let m = verts[a].midpoint(verts[b]);
                    verts.push(m.scale(1.0 / m.norm()));
                    verts.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    TriMesh::new(verts, faces).expect("icosphere is valid")
}

fn torus_mesh(major_segments: usize, minor_segments: usize) -> TriMesh {
    let mut verts = Vec::with_capacity(major_segments * minor_segments);
    for i in 0..major_segments {
        let u = std::f64::consts::TAU * i as f64 / major_segments as f64;
        for j in 0..minor_segments {
            let v = std::f64::consts::TAU * j as f64 / minor_segments as f64;
            let w = TORUS_MAJOR + TORUS_MINOR * v.cos();
            verts.push(Point3::new(
                w * u.cos(),
                w * u.sin(),
                TORUS_MINOR * v.sin(),
            ));
        }
    }
    let mut faces = Vec::with_capacity(major_segments * minor_segments * 2);
    for i in 0..major_segments {
        for j in 0..minor_segments {
            let a = i * minor_segments + j;
            let b = ((i + 1) % major_segments) * minor_segments + j;
            let c = ((i + 1) % major_segments) * minor_segments + (j + 1) % minor_segments;
            let d = i * minor_segments + (j + 1) % minor_segments;
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    TriMesh::new(verts, faces).expect("torus mesh is valid")
}

/// A low/high-res patch pair cut from one shape: `n_high` surface samples
/// around a seed point, with the low-res side an FPS subset optionally
/// perturbed by Gaussian noise of scale `noise`.
pub fn patch_pair(
    shape: Shape,
    n_low: usize,
    n_high: usize,
    noise: f64,
    seed: u64,
) -> Result<(PointCloud, PointCloud)> {
    use rand::SeedableRng;
    if n_low == 0 || n_high < n_low {
        return Err(Error::InvalidArgument(
            "patch pair needs 0 < n_low <= n_high".into(),
        ));
    }
    let dense = sample_shape(shape, n_high * 4, seed)?;
    let index = SpatialIndex::build(&dense)?;
    let seed_pt = dense[0];
    let nbrs = index.knn(seed_pt, n_high, false)?;
    let high: Vec<Point3> = nbrs.iter().map(|(i, _)| dense[*i]).collect();
    let low_sel = fps(&high, n_low, 0)?;
    let mut low: Vec<Point3> = low_sel.into_iter().map(|i| high[i]).collect();
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        let normal = Normal::new(0.0, noise).expect("valid stddev");
        for p in &mut low {
            *p = Point3::new(
                p.x + normal.sample(&mut rng),
                p.y + normal.sample(&mut rng),
                p.z + normal.sample(&mut rng),
            );
        }
    }
    Ok((PointCloud::new(low)?, PointCloud::new(high)?))
}
