//! Point-to-point distance fields: the behavioral contract shared by the
//! exact oracle and the learned network, plus exact point-to-mesh distance.

use crate::cloud::{Point3, PointCloud, TriMesh};
use crate::error::Result;
use crate::knn::SpatialIndex;

/// A nonnegative scalar field with a gradient, queried pointwise.
pub trait DistanceField {
    /// Field value at `q`; always >= 0.
    fn value(&self, q: Point3) -> f64;

    /// Gradient of the field at `q`. Where the field is exactly zero a zero
    /// vector is returned and refinement treats the point as converged.
    fn gradient(&self, q: Point3) -> Point3;

    fn value_and_gradient(&self, q: Point3) -> (f64, Point3) {
        (self.value(q), self.gradient(q))
    }

    /// Batched evaluation; the default loops, implementations may override
    /// with something faster. Row `i` of the output depends only on `qs[i]`.
    fn batch_value_and_gradient(&self, qs: &[Point3]) -> (Vec<f64>, Vec<Point3>) {
        let mut vals = Vec::with_capacity(qs.len());
        let mut grads = Vec::with_capacity(qs.len());
        for &q in qs {
            let (v, g) = self.value_and_gradient(q);
            vals.push(v);
            grads.push(g);
        }
        (vals, grads)
    }

    /// A per-point probe with query-side features frozen at `p`, when the
    /// field distinguishes refreshed from frozen feature interpolation.
    fn frozen_probe(&self, _p: Point3) -> Option<Box<dyn DistanceField + '_>> {
        None
    }
}

/// Ground-truth distance field: Euclidean distance from a query to its
/// nearest neighbor in the reference cloud.
#[derive(Debug)]
pub struct ExactOracle {
    index: SpatialIndex,
}

impl ExactOracle {
    pub fn new(ground_truth: &PointCloud) -> Result<Self> {
        Ok(ExactOracle {
            index: SpatialIndex::build(ground_truth)?,
        })
    }

    /// The indexed ground-truth points.
    pub fn ground_truth(&self) -> &[Point3] {
        self.index.points()
    }

    /// Ground-truth cloud as a `PointCloud`.
    pub fn ground_truth_cloud(&self) -> PointCloud {
        PointCloud::new(self.index.points().to_vec()).expect("oracle cloud is nonempty")
    }
}

impl DistanceField for ExactOracle {
    fn value(&self, q: Point3) -> f64 {
        self.index.nearest(q).1
    }

    fn gradient(&self, q: Point3) -> Point3 {
        let (i, d) = self.index.nearest(q);
        if d == 0.0 {
            return Point3::ZERO;
        }
        q.sub(self.index.points()[i]).scale(1.0 / d)
    }

    fn value_and_gradient(&self, q: Point3) -> (f64, Point3) {
        let (i, d) = self.index.nearest(q);
        if d == 0.0 {
            return (0.0, Point3::ZERO);
        }
        (d, q.sub(self.index.points()[i]).scale(1.0 / d))
    }
}

/// Closest point on triangle `[a, b, c]` to `q` (Ericson's region method).
fn closest_point_on_triangle(q: Point3, a: Point3, b: Point3, c: Point3) -> Point3 {
    let ab = b.sub(a);
    let ac = c.sub(a);
    let aq = q.sub(a);

    let d1 = ab.dot(aq);
    let d2 = ac.dot(aq);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }

    let bq = q.sub(b);
    let d3 = ab.dot(bq);
    let d4 = ac.dot(bq);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a.add(ab.scale(v));
    }

    let cq = q.sub(c);
    let d5 = ab.dot(cq);
    let d6 = ac.dot(cq);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a.add(ac.scale(w));
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b.add(c.sub(b).scale(w));
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a.add(ab.scale(v)).add(ac.scale(w))
}

/// Exact minimum Euclidean distance from `q` to the mesh surface.
pub fn mesh_distance(mesh: &TriMesh, q: Point3) -> f64 {
    let mut best = f64::INFINITY;
    for (i, f) in mesh.faces().iter().enumerate() {
        let [a, b, c] = mesh.triangle(i);
        // cheap reject: triangle AABB distance against current best
        let lo = Point3::new(
            a.x.min(b.x).min(c.x),
            a.y.min(b.y).min(c.y),
            a.z.min(b.z).min(c.z),
        );
        let hi = Point3::new(
            a.x.max(b.x).max(c.x),
            a.y.max(b.y).max(c.y),
            a.z.max(b.z).max(c.z),
        );
        let dx = (lo.x - q.x).max(0.0).max(q.x - hi.x);
        let dy = (lo.y - q.y).max(0.0).max(q.y - hi.y);
        let dz = (lo.z - q.z).max(0.0).max(q.z - hi.z);
        if dx * dx + dy * dy + dz * dz >= best {
            continue;
        }
        let _ = f;
        let cp = closest_point_on_triangle(q, a, b, c);
        best = best.min(q.dist_sq(cp));
    }
    best.sqrt()
}
