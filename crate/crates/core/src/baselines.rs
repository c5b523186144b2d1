//! Comparison algorithms: K-means placement (Lloyd's iterations with
//! k-means++ seeding) and the plain-DQN agent configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{AgentConfig, Algorithm};
use crate::error::{Error, Result};
use crate::geom::Point2D;

const RESTARTS: usize = 10;
const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Point2D>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
    pub within_cluster_ss: f64,
}

/// Places `n_clusters` stations at the centroids of the GU clusters.
/// Best of 10 k-means++ restarts by within-cluster sum of squares;
/// deterministic for a fixed seed.
pub fn kmeans_place(gus: &[Point2D], n_clusters: usize, seed: u64) -> Result<KMeansResult> {
    if n_clusters == 0 {
        return Err(Error::InvalidParam("n_clusters must be >= 1".into()));
    }
    if gus.len() < n_clusters {
        return Err(Error::DegenerateClustering {
            n_points: gus.len(),
            n_clusters,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..RESTARTS {
        let run = lloyd(gus, n_clusters, &mut rng);
        if best
            .as_ref()
            .is_none_or(|b| run.within_cluster_ss < b.within_cluster_ss)
        {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn lloyd(points: &[Point2D], k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut assignment = vec![0usize; points.len()];
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let nearest = nearest_centroid(*p, &centroids);
            if assignment[i] != nearest {
                assignment[i] = nearest;
                changed = true;
            }
        }

        let mut sums = vec![(0.0f64, 0.0f64, 0usize); k];
        for (i, p) in points.iter().enumerate() {
            let s = &mut sums[assignment[i]];
            s.0 += p.x;
            s.1 += p.y;
            s.2 += 1;
        }
        for (c, &(sx, sy, n)) in centroids.iter_mut().zip(&sums) {
            if n > 0 {
                *c = Point2D::new(sx / n as f64, sy / n as f64);
            }
        }
        // Re-seed any emptied cluster from the point farthest from its
        // assigned centroid.
        for cluster in 0..k {
            if sums[cluster].2 == 0 {
                let farthest = points
                    .iter()
                    .enumerate()
                    .max_by(|(i, p), (j, q)| {
                        let da = p.distance(centroids[assignment[*i]]);
                        let db = q.distance(centroids[assignment[*j]]);
                        da.total_cmp(&db)
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[cluster] = points[farthest];
                assignment[farthest] = cluster;
                changed = true;
            }
        }
        if !changed && iterations > 1 {
            break;
        }
    }
    let within_cluster_ss = wcss(points, &centroids, &assignment);
    KMeansResult {
        centroids,
        assignment,
        iterations,
        within_cluster_ss,
    }
}

fn seed_plus_plus(points: &[Point2D], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point2D> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| p.distance(centroids[0]).powi(2))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining mass collapsed (duplicate points); any pick works.
            rng.gen_range(0..points.len())
        } else {
            let mut mass = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if mass < w {
                    pick = i;
                    break;
                }
                mass -= w;
            }
            pick
        };
        centroids.push(points[next]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(p.distance(points[next]).powi(2));
        }
    }
    centroids
}

fn nearest_centroid(p: Point2D, centroids: &[Point2D]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = p.distance(*c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn wcss(points: &[Point2D], centroids: &[Point2D], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| p.distance(centroids[a]).powi(2))
        .sum()
}

/// The benchmark DQN: same network and environment, the single-network
/// bootstrap target, and uniform unweighted replay (both replay
/// exponents zero).
pub fn dqn_variant_config(mut cfg: AgentConfig) -> AgentConfig {
    cfg.algorithm = Algorithm::Dqn;
    cfg.priority_exponent = 0.0;
    cfg.correction_exponent = 0.0;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cluster_per_point_when_k_equals_n() {
        let gus = vec![
            Point2D::new(10.0, 20.0),
            Point2D::new(500.0, 400.0),
            Point2D::new(900.0, 100.0),
        ];
        let res = kmeans_place(&gus, 3, 1).unwrap();
        assert!(res.within_cluster_ss < 1e-12);
        let mut centroids: Vec<(i64, i64)> = res
            .centroids
            .iter()
            .map(|c| (c.x as i64, c.y as i64))
            .collect();
        centroids.sort_unstable();
        assert_eq!(centroids, vec![(10, 20), (500, 400), (900, 100)]);
    }

    #[test]
    fn two_separated_clusters_recovered() {
        let mut gus = Vec::new();
        for i in 0..10 {
            gus.push(Point2D::new(100.0 + i as f64, 100.0));
            gus.push(Point2D::new(900.0 + i as f64, 900.0));
        }
        let res = kmeans_place(&gus, 2, 7).unwrap();
        let mut xs: Vec<f64> = res.centroids.iter().map(|c| c.x).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] - 104.5).abs() < 1e-9);
        assert!((xs[1] - 904.5).abs() < 1e-9);
        // Centroids must be the means of their assigned points.
        for (cluster, centroid) in res.centroids.iter().enumerate() {
            let members: Vec<&Point2D> = gus
                .iter()
                .zip(&res.assignment)
                .filter(|(_, &a)| a == cluster)
                .map(|(p, _)| p)
                .collect();
            let mx = members.iter().map(|p| p.x).sum::<f64>() / members.len() as f64;
            let my = members.iter().map(|p| p.y).sum::<f64>() / members.len() as f64;
            assert!((centroid.x - mx).abs() < 1e-9);
            assert!((centroid.y - my).abs() < 1e-9);
        }
        // And every point assigned to its nearest centroid.
        for (p, &a) in gus.iter().zip(&res.assignment) {
            assert_eq!(nearest_centroid(*p, &res.centroids), a);
        }
    }

    #[test]
    fn beats_random_centroid_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let gus: Vec<Point2D> = (0..30)
            .map(|_| Point2D::new(rng.gen_range(0.0..1000.0), rng.gen_range(0.0..1000.0)))
            .collect();
        let res = kmeans_place(&gus, 4, 5).unwrap();
        for _ in 0..1000 {
            let centroids: Vec<Point2D> = (0..4)
                .map(|_| Point2D::new(rng.gen_range(0.0..1000.0), rng.gen_range(0.0..1000.0)))
                .collect();
            let assignment: Vec<usize> =
                gus.iter().map(|p| nearest_centroid(*p, &centroids)).collect();
            let random_ss = wcss(&gus, &centroids, &assignment);
            assert!(res.within_cluster_ss <= random_ss + 1e-9);
        }
    }

    #[test]
    fn wcss_never_increases_across_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let gus: Vec<Point2D> = (0..40)
            .map(|_| Point2D::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0)))
            .collect();
        // Instrumented Lloyd run: recompute WCSS after each full pass.
        let mut centroids = seed_plus_plus(&gus, 5, &mut rng);
        let mut assignment: Vec<usize> = gus
            .iter()
            .map(|p| nearest_centroid(*p, &centroids))
            .collect();
        let mut prev = wcss(&gus, &centroids, &assignment);
        for _ in 0..20 {
            let mut sums = vec![(0.0, 0.0, 0usize); 5];
            for (i, p) in gus.iter().enumerate() {
                let s = &mut sums[assignment[i]];
                s.0 += p.x;
                s.1 += p.y;
                s.2 += 1;
            }
            for (c, &(sx, sy, n)) in centroids.iter_mut().zip(&sums) {
                if n > 0 {
                    *c = Point2D::new(sx / n as f64, sy / n as f64);
                }
            }
            for (i, p) in gus.iter().enumerate() {
                assignment[i] = nearest_centroid(*p, &centroids);
            }
            let now = wcss(&gus, &centroids, &assignment);
            assert!(now <= prev + 1e-9);
            prev = now;
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let gus: Vec<Point2D> = (0..25)
            .map(|_| Point2D::new(rng.gen_range(0.0..800.0), rng.gen_range(0.0..800.0)))
            .collect();
        assert_eq!(
            kmeans_place(&gus, 3, 9).unwrap(),
            kmeans_place(&gus, 3, 9).unwrap()
        );
    }

    #[test]
    fn rejects_more_clusters_than_points() {
        let gus = vec![Point2D::new(1.0, 1.0)];
        assert!(matches!(
            kmeans_place(&gus, 2, 0),
            Err(Error::DegenerateClustering { .. })
        ));
    }
}
