//! Exact k-nearest-neighbor queries over a fixed point set.
//!
//! The index is a kd-tree whose queries return exactly what a brute-force
//! scan would: distances sorted ascending, ties broken by lower point index.
//! Everything downstream (the oracle distance field, FPS verification,
//! metrics) leans on that exactness.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

#[derive(Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable nearest-neighbor structure over a point cloud snapshot.
#[derive(Debug)]
pub struct SpatialIndex {
    pts: Vec<Point3>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    d2: f64,
    idx: usize,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        // d2 is always finite; lexicographic (d2, idx)
        self.d2
            .partial_cmp(&other.d2)
            .expect("finite distance")
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn coord(p: Point3, axis: usize) -> f64 {
    match axis {
        0 => p.x,
        1 => p.y,
        _ => p.z,
    }
}

impl SpatialIndex {
    /// Builds the index over a snapshot of the given points.
    pub fn build_from_points(points: &[Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("cannot index an empty cloud".into()));
        }
        let pts = points.to_vec();
        let mut order: Vec<u32> = (0..pts.len() as u32).collect();
        let mut nodes = Vec::new();
        let root = Self::build_rec(&pts, &mut order, 0, pts.len(), &mut nodes);
        Ok(SpatialIndex {
            pts,
            order,
            nodes,
            root,
        })
    }

    /// Builds the index over a cloud snapshot.
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::build_from_points(cloud.points())
    }

    fn build_rec(
        pts: &[Point3],
        order: &mut [u32],
        start: usize,
        end: usize,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let span = &order[start..end];
        if span.len() <= LEAF_SIZE {
            nodes.push(Node::Leaf { start, end });
            return nodes.len() - 1;
        }
        // split along the widest axis at the median
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in span.iter() {
            let p = pts[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(coord(p, a));
                hi[a] = hi[a].max(coord(p, a));
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
            .unwrap();
        let mid = span.len() / 2;
        order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            coord(pts[a as usize], axis)
                .partial_cmp(&coord(pts[b as usize], axis))
                .unwrap()
                .then(a.cmp(&b))
        });
        let value = coord(pts[order[start + mid] as usize], axis);
        let me = nodes.len();
        nodes.push(Node::Split {
            axis,
            value,
            left: 0,
            right: 0,
        });
        let left = Self::build_rec(pts, order, start, start + mid, nodes);
        let right = Self::build_rec(pts, order, start + mid, end, nodes);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut nodes[me]
        {
            *l = left;
            *r = right;
        }
        me
    }

    /// Number of indexed points.
    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// The indexed point set, in source order.
    pub fn points(&self) -> &[Point3] {
        &self.pts
    }

    /// The k nearest neighbors of `query`, sorted by (distance, index).
    /// With `exclude_self`, source points exactly equal to the query are
    /// skipped.
    pub fn knn(&self, query: Point3, k: usize, exclude_self: bool) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        self.search(self.root, query, k, exclude_self, &mut heap);
        if heap.len() < k {
            let equal = if exclude_self {
                self.pts.iter().filter(|p| p.dist_sq(query) == 0.0).count()
            } else {
                0
            };
            return Err(Error::KTooLarge {
                k,
                available: self.pts.len() - equal,
            });
        }
        let mut out: Vec<Cand> = heap.into_vec();
        out.sort();
        Ok(out.into_iter().map(|c| (c.idx, c.d2.sqrt())).collect())
    }

    /// The nearest neighbor of `query`; equals `knn(query, 1, false)[0]`.
    pub fn nearest(&self, query: Point3) -> (usize, f64) {
        self.knn(query, 1, false)
            .expect("index is nonempty")
            .into_iter()
            .next()
            .unwrap()
    }

    fn search(
        &self,
        node: usize,
        q: Point3,
        k: usize,
        exclude_self: bool,
        heap: &mut BinaryHeap<Cand>,
    ) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let idx = i as usize;
                    let d2 = self.pts[idx].dist_sq(q);
                    if exclude_self && d2 == 0.0 {
                        continue;
                    }
                    let cand = Cand { d2, idx };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let qa = coord(q, *axis);
                let (near, far) = if qa <= *value {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, q, k, exclude_self, heap);
                let plane_d2 = (qa - value) * (qa - value);
                // an equal-distance, lower-index point can still displace the
                // current worst, so explore on <= rather than <
                if heap.len() < k || plane_d2 <= heap.peek().unwrap().d2 {
                    self.search(far, q, k, exclude_self, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(
        pts: &[Point3],
        q: Point3,
        k: usize,
        exclude_self: bool,
    ) -> Vec<(usize, f64)> {
        let mut cands: Vec<Cand> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| Cand {
                d2: p.dist_sq(q),
                idx: i,
            })
            .filter(|c| !(exclude_self && c.d2 == 0.0))
            .collect();
        cands.sort();
        cands
            .into_iter()
            .take(k)
            .map(|c| (c.idx, c.d2.sqrt()))
            .collect()
    }

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn empty_errors() {
        assert!(SpatialIndex::build_from_points(&[]).is_err());
    }

    #[test]
    fn single_point() {
        let idx = SpatialIndex::build_from_points(&[Point3::ZERO]).unwrap();
        let (i, d) = idx.nearest(Point3::new(3.0, 4.0, 0.0));
        assert_eq!(i, 0);
        assert_eq!(d, 5.0);
    }

    #[test]
    fn axis_example_with_exclusion() {
        let pts = vec![
            Point3::ZERO,
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(3.0, 0.0, 0.0),
        ];
        let idx = SpatialIndex::build_from_points(&pts).unwrap();
        let r = idx.knn(Point3::ZERO, 2, true).unwrap();
        assert_eq!(r, vec![(1, 1.0), (2, 3.0)]);
    }

    #[test]
    fn tie_broken_by_lower_index() {
        let pts = vec![
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(-1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let idx = SpatialIndex::build_from_points(&pts).unwrap();
        let r = idx.knn(Point3::ZERO, 1, false).unwrap();
        assert_eq!(r[0].0, 0);
    }

    #[test]
    fn coincident_query_distance_zero() {
        let pts = random_points(50, 3);
        let idx = SpatialIndex::build_from_points(&pts).unwrap();
        let (i, d) = idx.nearest(pts[17]);
        assert_eq!(i, 17);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn k_too_large() {
        let pts = random_points(5, 4);
        let idx = SpatialIndex::build_from_points(&pts).unwrap();
        match idx.knn(pts[0], 5, true) {
            Err(Error::KTooLarge { k, available }) => {
                assert_eq!(k, 5);
                assert_eq!(available, 4);
            }
            other => panic!("expected KTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn matches_brute_force_random() {
        let pts = random_points(500, 11);
        let idx = SpatialIndex::build_from_points(&pts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let q = Point3::new(
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
            );
            for &k in &[1usize, 4, 16] {
                let got = idx.knn(q, k, false).unwrap();
                let want = brute_knn(&pts, q, k, false);
                assert_eq!(got, want, "k={k} q={q:?}");
            }
        }
        // probe source points with self-exclusion
        for i in (0..500).step_by(37) {
            let got = idx.knn(pts[i], 16, true).unwrap();
            let want = brute_knn(&pts, pts[i], 16, true);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn duplicated_points_handled() {
        let mut pts = random_points(60, 5);
        for i in 0..20 {
            pts.push(pts[i]); // exact duplicates
        }
        let idx = SpatialIndex::build_from_points(&pts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let q = pts[rng.gen_range(0..pts.len())];
            let got = idx.knn(q, 8, true).unwrap();
            let want = brute_knn(&pts, q, 8, true);
            assert_eq!(got, want);
            let got_incl = idx.knn(q, 8, false).unwrap();
            let want_incl = brute_knn(&pts, q, 8, false);
            assert_eq!(got_incl, want_incl);
        }
    }
}
