//! Core point, cloud and mesh types plus normalization transforms.

use crate::error::{Error, Result};

/// A 3D point (or vector) with finite coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(self, o: Point3) -> f64 {
        self.sub(o).norm_sq()
    }

    pub fn dist(self, o: Point3) -> f64 {
        self.dist_sq(o).sqrt()
    }

    /// Midpoint of two points. Commutative down to the bit pattern, which the
    /// midpoint pool deduplication relies on.
    pub fn midpoint(self, o: Point3) -> Point3 {
        Point3::new(
            (self.x + o.x) * 0.5,
            (self.y + o.y) * 0.5,
            (self.z + o.z) * 0.5,
        )
    }

    /// Coordinate bit patterns, used for exact-equality hashing.
    pub fn bits(self) -> [u64; 3] {
        [self.x.to_bits(), self.y.to_bits(), self.z.to_bits()]
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// An ordered list of 3D points, optionally carrying per-point feature rows of
/// uniform dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    features: Option<Vec<Vec<f64>>>,
}

impl PointCloud {
    /// Creates a cloud from points. Fails on an empty list or non-finite
    /// coordinates.
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("point cloud has no points".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "point {i} has non-finite coordinates"
            )));
        }
        Ok(PointCloud {
            points,
            features: None,
        })
    }

    /// Attaches per-point feature rows. Row count must equal the point count
    /// and all rows must have identical length.
    pub fn with_features(mut self, features: Vec<Vec<f64>>) -> Result<Self> {
        if features.len() != self.points.len() {
            return Err(Error::InvalidArgument(format!(
                "feature count {} != point count {}",
                features.len(),
                self.points.len()
            )));
        }
        if let Some(first) = features.first() {
            let d = first.len();
            if features.iter().any(|r| r.len() != d) {
                return Err(Error::InvalidArgument(
                    "feature rows have differing lengths".into(),
                ));
            }
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn features(&self) -> Option<&[Vec<f64>]> {
        self.features.as_deref()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }
}

impl std::ops::Index<usize> for PointCloud {
    type Output = Point3;
    fn index(&self, i: usize) -> &Point3 {
        &self.points[i]
    }
}

/// A triangle mesh with validated face indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point3>,
    faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let nv = vertices.len();
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= nv) {
                return Err(Error::InvalidMesh(format!(
                    "face {i} references vertex {} but mesh has {nv} vertices",
                    f.iter().max().unwrap()
                )));
            }
            if f[0] == f[1] && f[1] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {i} is degenerate (three identical indices)"
                )));
            }
        }
        Ok(TriMesh { vertices, faces })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn triangle(&self, i: usize) -> [Point3; 3] {
        let f = self.faces[i];
        [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]]
    }
}

/// Centroid + max-radius normalization: maps a cloud to centroid 0 and peak
/// point norm 1, and back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeTransform {
    pub centroid: Point3,
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn identity() -> Self {
        NormalizeTransform {
            centroid: Point3::ZERO,
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        p.sub(self.centroid).scale(1.0 / self.scale)
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        p.scale(self.scale).add(self.centroid)
    }
}

/// Translates the centroid to the origin and scales the farthest point onto
/// the unit sphere. Fails when every point coincides (scale would be zero).
pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, NormalizeTransform)> {
    let n = cloud.len() as f64;
    let mut c = Point3::ZERO;
    for p in cloud.iter() {
        c = c.add(*p);
    }
    c = c.scale(1.0 / n);
    let scale = cloud
        .iter()
        .map(|p| p.sub(c).norm())
        .fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Err(Error::DegenerateInput(
            "all points identical; normalization scale would be 0".into(),
        ));
    }
    let t = NormalizeTransform { centroid: c, scale };
    let pts = cloud.iter().map(|p| t.apply(*p)).collect();
    Ok((PointCloud::new(pts)?, t))
}

/// Exact inverse of [`normalize`] for the transform it returned.
pub fn denormalize(cloud: &PointCloud, t: &NormalizeTransform) -> PointCloud {
    let pts = cloud.iter().map(|p| t.invert(*p)).collect();
    PointCloud::new(pts).expect("denormalize preserves cardinality and finiteness")
}
