//! Farthest point sampling, midpoint interpolation, patch extraction and
//! merging — the point-generation half of the pipeline, decoupled from
//! learning.

use std::collections::HashSet;

use crate::cloud::{normalize, NormalizeTransform, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::knn::SpatialIndex;

/// Midpoint interpolation settings.
#[derive(Debug, Clone)]
pub struct InterpolationConfig {
    /// Neighbors considered per source point when generating midpoints.
    pub k_neighbors: usize,
    /// Desired upsampling rate, any rational >= 1.
    pub rate: f64,
    /// Index of the first FPS pick.
    pub fps_seed: usize,
    /// Emit midpoints only instead of retaining the source points.
    pub drop_original: bool,
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        InterpolationConfig {
            k_neighbors: 16,
            rate: 4.0,
            fps_seed: 0,
            drop_original: false,
        }
    }
}

/// Patch extraction settings.
#[derive(Debug, Clone)]
pub struct PatchConfig {
    /// Points per patch.
    pub patch_size: usize,
    /// Average number of patches covering a point.
    pub overlap_factor: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_size: 256,
            overlap_factor: 3.0,
        }
    }
}

/// A normalized patch with its inverse transform and source indices.
#[derive(Debug, Clone)]
pub struct Patch {
    pub cloud: PointCloud,
    pub transform: NormalizeTransform,
    pub indices: Vec<usize>,
}

/// Greedy farthest point sampling over `points`, starting from `seed`.
/// Each subsequent pick maximizes the minimum squared distance to all
/// previous picks; ties go to the lowest index.
pub fn fps(points: &[Point3], m: usize, seed: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "fps asked for {m} samples from {n} points"
        )));
    }
    if seed >= n {
        return Err(Error::InvalidArgument(format!(
            "fps seed {seed} out of range for {n} points"
        )));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut selected = Vec::with_capacity(m);
    selected.push(seed);
    let mut min_d2: Vec<f64> = points.iter().map(|p| p.dist_sq(points[seed])).collect();
    while selected.len() < m {
        let mut best = 0usize;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            if d2 > best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        selected.push(best);
        let bp = points[best];
        for (i, d2) in min_d2.iter_mut().enumerate() {
            let nd = points[i].dist_sq(bp);
            if nd < *d2 {
                *d2 = nd;
            }
        }
    }
    Ok(selected)
}

/// Upsamples a cloud to `round(rate * n)` points by generating midpoints of
/// each point and its k nearest neighbors, deduplicating them exactly, and
/// selecting the required count by FPS.
pub fn midpoint_interpolate(p_l: &PointCloud, cfg: &InterpolationConfig) -> Result<PointCloud> {
    let n = p_l.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "midpoint interpolation needs at least 2 points".into(),
        ));
    }
    if cfg.rate < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "upsampling rate {} must be >= 1",
            cfg.rate
        )));
    }
    if cfg.k_neighbors == 0 || cfg.k_neighbors >= n {
        return Err(Error::InvalidArgument(format!(
            "k_neighbors {} must be in [1, {})",
            cfg.k_neighbors, n
        )));
    }
    let target = (cfg.rate * n as f64).round() as usize;
    let needed = if cfg.drop_original {
        target
    } else {
        target.saturating_sub(n)
    };

    let mut out: Vec<Point3> = if cfg.drop_original {
        Vec::with_capacity(target)
    } else {
        p_l.points().to_vec()
    };

    if needed > 0 {
        let index = SpatialIndex::build(p_l)?;
        // midpoints of deduplicated unordered pairs; (i,j) and (j,i) produce
        // bitwise-identical midpoints, so exact-equality dedup suffices
        let mut seen: HashSet<[u64; 3]> = HashSet::new();
        let mut pool: Vec<Point3> = Vec::new();
        for (_, p) in p_l.iter().enumerate() {
            let nbrs = index.knn(*p, cfg.k_neighbors, true)?;
            for (j, _) in nbrs {
                let m = p.midpoint(p_l[j]);
                if seen.insert(m.bits()) {
                    pool.push(m);
                }
            }
        }
        if pool.len() < needed {
            return Err(Error::PoolExhausted {
                needed,
                available: pool.len(),
            });
        }
        let picks = fps(&pool, needed, cfg.fps_seed.min(pool.len() - 1))?;
        out.extend(picks.into_iter().map(|i| pool[i]));
    }
    if cfg.drop_original {
        out.truncate(target);
    }
    PointCloud::new(out)
}

/// Splits a cloud into normalized, overlapping patches. Seeds are chosen by
/// FPS; each patch is the `patch_size` nearest neighbors of its seed.
pub fn extract_patches(cloud: &PointCloud, cfg: &PatchConfig) -> Result<Vec<Patch>> {
    let n = cloud.len();
    if cfg.patch_size > n {
        return Err(Error::InvalidArgument(format!(
            "patch_size {} exceeds cloud size {n}",
            cfg.patch_size
        )));
    }
    if cfg.overlap_factor < 1.0 {
        return Err(Error::InvalidArgument(
            "overlap_factor must be >= 1".into(),
        ));
    }
    let seed_count = ((cfg.overlap_factor * n as f64) / cfg.patch_size as f64).ceil() as usize;
    let seed_count = seed_count.max(1);
    let seeds = fps(cloud.points(), seed_count.min(n), 0)?;
    let index = SpatialIndex::build(cloud)?;
    let mut patches = Vec::with_capacity(seeds.len());
    for s in seeds {
        let nbrs = index.knn(cloud[s], cfg.patch_size, false)?;
        let indices: Vec<usize> = nbrs.iter().map(|(i, _)| *i).collect();
        let pts: Vec<Point3> = indices.iter().map(|&i| cloud[i]).collect();
        let (normalized, transform) = normalize(&PointCloud::new(pts)?)?;
        patches.push(Patch {
            cloud: normalized,
            transform,
            indices,
        });
    }
    Ok(patches)
}

/// Concatenates denormalized patches and FPS-downsamples to exactly
/// `target_count` points.
pub fn merge_patches(patches: &[PointCloud], target_count: usize) -> Result<PointCloud> {
    let total: usize = patches.iter().map(|p| p.len()).sum();
    if total < target_count {
        return Err(Error::InvalidArgument(format!(
            "merge needs {target_count} points but patches hold only {total}"
        )));
    }
    let mut all: Vec<Point3> = Vec::with_capacity(total);
    for p in patches {
        all.extend_from_slice(p.points());
    }
    let picks = fps(&all, target_count, 0)?;
    PointCloud::new(picks.into_iter().map(|i| all[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fps_collinear() {
        let pts: Vec<Point3> = [0.0, 1.0, 2.0, 3.0]
            .iter()
            .map(|&x| Point3::new(x, 0.0, 0.0))
            .collect();
        let sel = fps(&pts, 2, 0).unwrap();
        assert_eq!(sel, vec![0, 3]);
    }

    #[test]
    fn fps_full_permutation() {
        let c = random_cloud(37, 5);
        let sel = fps(c.points(), 37, 0).unwrap();
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn fps_greedy_rule_brute_force() {
        let c = random_cloud(200, 9);
        let pts = c.points();
        let sel = fps(pts, 50, 0).unwrap();
        for step in 1..sel.len() {
            let prior = &sel[..step];
            // recompute the pick from scratch
            let mut best = 0usize;
            let mut best_d2 = f64::NEG_INFINITY;
            for (i, p) in pts.iter().enumerate() {
                let d2 = prior
                    .iter()
                    .map(|&s| p.dist_sq(pts[s]))
                    .fold(f64::INFINITY, f64::min);
                if d2 > best_d2 {
                    best_d2 = d2;
                    best = i;
                }
            }
            assert_eq!(sel[step], best, "prefix {step}");
        }
    }

    #[test]
    fn midpoint_two_points() {
        let c = PointCloud::new(vec![Point3::ZERO, Point3::new(2.0, 0.0, 0.0)]).unwrap();
        let cfg = InterpolationConfig {
            k_neighbors: 1,
            rate: 1.5,
            ..Default::default()
        };
        let p_i = midpoint_interpolate(&c, &cfg).unwrap();
        assert_eq!(p_i.len(), 3);
        assert_eq!(p_i.points()[2], Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn midpoint_rate_one_is_identity() {
        let c = random_cloud(64, 2);
        let cfg = InterpolationConfig {
            rate: 1.0,
            ..Default::default()
        };
        let p_i = midpoint_interpolate(&c, &cfg).unwrap();
        assert_eq!(p_i, c);
    }

    #[test]
    fn midpoint_rate_4_membership() {
        let c = random_cloud(256, 3);
        let cfg = InterpolationConfig::default();
        let p_i = midpoint_interpolate(&c, &cfg).unwrap();
        assert_eq!(p_i.len(), 1024);
        // originals retained in order
        for i in 0..256 {
            assert_eq!(p_i[i], c[i]);
        }
        // every added point is the midpoint of a source point and one of its
        // k nearest neighbors (brute-force membership check)
        let idx = SpatialIndex::build(&c).unwrap();
        let mut valid: HashSet<[u64; 3]> = HashSet::new();
        for p in c.iter() {
            for (j, _) in idx.knn(*p, cfg.k_neighbors, true).unwrap() {
                valid.insert(p.midpoint(c[j]).bits());
            }
        }
        for p in &p_i.points()[256..] {
            assert!(valid.contains(&p.bits()));
        }
    }

    #[test]
    fn midpoint_fractional_rates() {
        let c = random_cloud(100, 4);
        for rate in [1.0, 1.3, 2.5, 3.0] {
            let cfg = InterpolationConfig {
                rate,
                ..Default::default()
            };
            let p_i = midpoint_interpolate(&c, &cfg).unwrap();
            assert_eq!(p_i.len(), (rate * 100.0).round() as usize);
        }
    }

    #[test]
    fn midpoint_pool_exhausted() {
        // 3 collinear points with k=1 give only 1 distinct midpoint... the
        // middle point pairs with one side; pool stays tiny vs rate 4
        let c = PointCloud::new(vec![
            Point3::ZERO,
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ])
        .unwrap();
        let cfg = InterpolationConfig {
            k_neighbors: 1,
            rate: 4.0,
            ..Default::default()
        };
        match midpoint_interpolate(&c, &cfg) {
            Err(Error::PoolExhausted { needed, available }) => {
                assert_eq!(needed, 9);
                assert!(available < 9);
            }
            other => panic!("expected PoolExhausted, got {other:?}"),
        }
    }

    #[test]
    fn midpoint_drop_original() {
        let c = random_cloud(64, 8);
        let cfg = InterpolationConfig {
            rate: 2.0,
            drop_original: true,
            ..Default::default()
        };
        let p_i = midpoint_interpolate(&c, &cfg).unwrap();
        assert_eq!(p_i.len(), 128);
        let originals: HashSet<[u64; 3]> = c.iter().map(|p| p.bits()).collect();
        assert!(p_i.iter().all(|p| !originals.contains(&p.bits())));
    }

    #[test]
    fn patches_single_when_cloud_is_patch_sized() {
        let c = random_cloud(64, 6);
        let cfg = PatchConfig {
            patch_size: 64,
            overlap_factor: 1.0,
        };
        let patches = extract_patches(&c, &cfg).unwrap();
        assert_eq!(patches.len(), 1);
        let mut idx = patches[0].indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn patches_cover_all_points() {
        let c = random_cloud(2048, 7);
        let cfg = PatchConfig {
            patch_size: 256,
            overlap_factor: 3.0,
        };
        let patches = extract_patches(&c, &cfg).unwrap();
        assert_eq!(patches.len(), 24);
        let mut covered = vec![false; c.len()];
        for p in &patches {
            for &i in &p.indices {
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|&b| b), "every input point in a patch");
        // denormalizing a patch reproduces its source points
        let p0 = &patches[0];
        let denorm = crate::cloud::denormalize(&p0.cloud, &p0.transform);
        for (out, &src) in denorm.iter().zip(&p0.indices) {
            assert!(out.dist(c[src]) < 1e-9);
        }
    }

    #[test]
    fn patch_size_too_large() {
        let c = random_cloud(10, 1);
        let cfg = PatchConfig {
            patch_size: 11,
            overlap_factor: 1.0,
        };
        assert!(extract_patches(&c, &cfg).is_err());
    }

    #[test]
    fn merge_single_patch_identity_set() {
        let c = random_cloud(50, 11);
        let merged = merge_patches(&[c.clone()], 50).unwrap();
        let a: HashSet<[u64; 3]> = c.iter().map(|p| p.bits()).collect();
        let b: HashSet<[u64; 3]> = merged.iter().map(|p| p.bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn merge_spreads_duplicates() {
        let c = random_cloud(80, 12);
        let merged = merge_patches(&[c.clone(), c.clone()], 80).unwrap();
        // min pairwise distance of the FPS merge should not be below that of
        // naive truncation (which would keep duplicates at distance 0)
        let min_pair = |pts: &[Point3]| -> f64 {
            let mut m = f64::INFINITY;
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    m = m.min(pts[i].dist(pts[j]));
                }
            }
            m
        };
        assert!(min_pair(merged.points()) > 0.0);
        let mut naive: Vec<Point3> = c.points().to_vec();
        naive.extend_from_slice(c.points());
        naive.truncate(80);
        assert!(min_pair(merged.points()) >= min_pair(&naive));
    }

    #[test]
    fn merge_insufficient_points() {
        let c = random_cloud(10, 13);
        assert!(merge_patches(&[c], 11).is_err());
    }
}
