//! Privileged observation construction: occupancy rasterization, k-means
//! obstacle clustering, and body-frame feature assembly.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sim::{bearing_to, world_to_body, RobotState, RoomLayout};

/// Occupancy cell edge length in meters.
pub const CELL_SIZE: f32 = 0.05;
/// Number of obstacle clusters in the privileged observation.
pub const NUM_CLUSTERS: usize = 50;
/// Base navigation state dimensionality.
pub const BASE_DIM: usize = 9;
/// Full privileged observation dimensionality.
pub const OBS_DIM: usize = BASE_DIM + 3 * NUM_CLUSTERS;
/// Distance used to normalize obstacle triples, meters.
pub const D_MAX: f32 = 5.0;

/// Binary occupancy raster covering a layout's bounds.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    origin: [f32; 2],
    cell_size: f32,
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_occupied(&self, i: usize, j: usize) -> bool {
        self.cells[j * self.width + i]
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, i: usize, j: usize) -> [f32; 2] {
        [
            (self.origin[0] as f64 + (i as f64 + 0.5) * self.cell_size as f64) as f32,
            (self.origin[1] as f64 + (j as f64 + 0.5) * self.cell_size as f64) as f32,
        ]
    }

    /// Geometric center of the covered area.
    pub fn center(&self) -> [f32; 2] {
        [
            (self.origin[0] as f64 + 0.5 * self.width as f64 * self.cell_size as f64) as f32,
            (self.origin[1] as f64 + 0.5 * self.height as f64 * self.cell_size as f64) as f32,
        ]
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    /// Centers of all occupied cells.
    pub fn occupied_cell_centers(&self) -> Vec<[f32; 2]> {
        let mut out = Vec::with_capacity(self.occupied_count());
        for j in 0..self.height {
            for i in 0..self.width {
                if self.is_occupied(i, j) {
                    out.push(self.cell_center(i, j));
                }
            }
        }
        out
    }
}

/// Rasterizes a layout's obstacles onto a 0.05 m grid.
///
/// A cell counts as occupied when its rectangle and the obstacle overlap
/// with positive area; overlaps thinner than 1e-6 m are treated as touching
/// rather than intersecting so representation noise in cell edges cannot
/// smear an aligned obstacle across neighbours.
pub fn rasterize_occupancy(layout: &RoomLayout) -> OccupancyGrid {
    let b = layout.bounds;
    let cell = CELL_SIZE as f64;
    let width = (((b[2] - b[0]) as f64 / cell) - 1e-9).ceil().max(1.0) as usize;
    let height = (((b[3] - b[1]) as f64 / cell) - 1e-9).ceil().max(1.0) as usize;
    let mut cells = vec![false; width * height];
    for o in &layout.obstacles {
        let r = o.rect;
        let i0 = (((r[0] - b[0]) as f64 / cell).floor().max(0.0)) as usize;
        let j0 = (((r[1] - b[1]) as f64 / cell).floor().max(0.0)) as usize;
        let i1 = ((((r[2] - b[0]) as f64 / cell).ceil()) as usize).min(width);
        let j1 = ((((r[3] - b[1]) as f64 / cell).ceil()) as usize).min(height);
        for j in j0..j1 {
            for i in i0..i1 {
                let x0 = b[0] as f64 + i as f64 * cell;
                let y0 = b[1] as f64 + j as f64 * cell;
                let ox = (x0 + cell).min(r[2] as f64) - x0.max(r[0] as f64);
                let oy = (y0 + cell).min(r[3] as f64) - y0.max(r[1] as f64);
                if ox > 1e-6 && oy > 1e-6 {
                    cells[j * width + i] = true;
                }
            }
        }
    }
    OccupancyGrid {
        origin: [b[0], b[1]],
        cell_size: CELL_SIZE,
        width,
        height,
        cells,
    }
}

/// Fixed-size obstacle representation: K centroid positions in world frame.
///
/// When a layout has no obstacles at all there is nothing to cluster; the
/// sentinel flag records that case so observation building can emit
/// max-distance triples instead of phantom obstacles at the room center.
#[derive(Debug, Clone)]
pub struct ObstacleClusters {
    pub centroids: Vec<[f32; 2]>,
    pub is_sentinel: bool,
}

fn squared_dist(a: [f32; 2], b: [f32; 2]) -> f64 {
    let dx = (a[0] - b[0]) as f64;
    let dy = (a[1] - b[1]) as f64;
    dx * dx + dy * dy
}

/// Lloyd iterations with k-means++ seeding; returns the centroids and the
/// inertia after each update so convergence behaviour is observable.
pub fn kmeans_with_trace(
    points: &[[f32; 2]],
    k: usize,
    seed: u64,
) -> (Vec<[f32; 2]>, Vec<f64>) {
    assert!(k > 0 && !points.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if points.len() <= k {
        let mut centroids = Vec::with_capacity(k);
        for i in 0..k {
            centroids.push(points[i % points.len()]);
        }
        return (centroids, vec![0.0]);
    }

    // k-means++ seeding: first centroid uniform, the rest proportional to
    // squared distance from the nearest chosen centroid.
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_dist(*p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            points[rng.gen_range(0..points.len())]
        } else {
            let idx = WeightedIndex::new(d2.iter().copied())
                .map(|w| w.sample(&mut rng))
                .unwrap_or_else(|_| rng.gen_range(0..points.len()));
            points[idx]
        };
        centroids.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_dist(*p, next));
        }
    }

    let mut trace = Vec::new();
    let mut assign = vec![0usize; points.len()];
    for _ in 0..100 {
        // Assignment step.
        let mut inertia = 0.0f64;
        for (pi, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centroids.iter().enumerate() {
                let d = squared_dist(*p, *c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            assign[pi] = best;
            inertia += best_d;
        }
        trace.push(inertia);

        // Update step; empty clusters keep their previous centroid.
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (pi, p) in points.iter().enumerate() {
            sums[assign[pi]][0] += p[0] as f64;
            sums[assign[pi]][1] += p[1] as f64;
            counts[assign[pi]] += 1;
        }
        let mut max_shift = 0.0f64;
        for ci in 0..k {
            if counts[ci] == 0 {
                continue;
            }
            let new = [
                (sums[ci][0] / counts[ci] as f64) as f32,
                (sums[ci][1] / counts[ci] as f64) as f32,
            ];
            max_shift = max_shift.max(squared_dist(new, centroids[ci]).sqrt());
            centroids[ci] = new;
        }
        if max_shift < 1e-4 {
            break;
        }
    }
    (centroids, trace)
}

/// Clusters a grid's occupied cells into exactly `k` centroids.
///
/// Fewer occupied cells than `k` duplicates cells to fill the quota. An
/// entirely free grid yields sentinel clusters parked at the grid center.
pub fn kmeans_cluster(grid: &OccupancyGrid, k: usize, seed: u64) -> ObstacleClusters {
    let points = grid.occupied_cell_centers();
    if points.is_empty() {
        return ObstacleClusters {
            centroids: vec![grid.center(); k],
            is_sentinel: true,
        };
    }
    let (centroids, _) = kmeans_with_trace(&points, k, seed);
    ObstacleClusters {
        centroids,
        is_sentinel: false,
    }
}

/// Rasterizes and clusters a layout in one step.
pub fn layout_clusters(layout: &RoomLayout, k: usize, seed: u64) -> ObstacleClusters {
    kmeans_cluster(&rasterize_occupancy(layout), k, seed)
}

/// Assembles the privileged observation vector.
///
/// Layout: `[g_x, g_y, sin b, cos b, v_x, v_y, w, q_L, q_R]` followed by one
/// `[o_x, o_y, d]` triple per cluster. Goal coordinates are body-frame
/// meters; obstacle triples are body-frame, radially clipped to `D_MAX` so
/// direction survives the clip, normalized by `D_MAX`, and sorted by
/// ascending distance.
pub fn build_privileged_obs(
    state: &RobotState,
    goal: [f32; 2],
    clusters: &ObstacleClusters,
) -> Vec<f32> {
    let mut obs = Vec::with_capacity(BASE_DIM + 3 * clusters.centroids.len());
    let g = world_to_body(&state.pose, goal[0], goal[1]);
    let beta = bearing_to(&state.pose, goal[0], goal[1]);
    obs.push(g[0]);
    obs.push(g[1]);
    obs.push(beta.sin());
    obs.push(beta.cos());
    obs.push(state.body_vel[0]);
    obs.push(state.body_vel[1]);
    obs.push(state.yaw_rate);
    obs.push(state.wheel_vel[0]);
    obs.push(state.wheel_vel[1]);

    let mut triples: Vec<[f32; 3]> = Vec::with_capacity(clusters.centroids.len());
    if clusters.is_sentinel {
        triples.resize(clusters.centroids.len(), [0.0, 0.0, 1.0]);
    } else {
        for c in &clusters.centroids {
            let p = world_to_body(&state.pose, c[0], c[1]);
            let (mut ox, mut oy) = (p[0], p[1]);
            let mut d = (ox * ox + oy * oy).sqrt();
            if d > D_MAX {
                let scale = D_MAX / d;
                ox *= scale;
                oy *= scale;
                d = D_MAX;
            }
            triples.push([ox / D_MAX, oy / D_MAX, d / D_MAX]);
        }
        triples.sort_by(|a, b| a[2].partial_cmp(&b[2]).expect("finite distances"));
    }
    for t in &triples {
        obs.extend_from_slice(t);
    }
    obs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Obstacle, Pose2D, RoomLayout};

    fn bare_layout(obstacles: Vec<Obstacle>) -> RoomLayout {
        RoomLayout {
            name: "raster-test".into(),
            bounds: [-1.0, -1.0, 1.0, 1.0],
            start: [0.0, 0.0],
            obstacles,
            goals: vec![],
        }
    }

    fn boxed(rect: [f32; 4]) -> Obstacle {
        Obstacle {
            name: "o".into(),
            rect,
            color: [0.5, 0.5, 0.5],
            height: 1.0,
        }
    }

    #[test]
    fn empty_layout_rasterizes_all_free() {
        let g = rasterize_occupancy(&bare_layout(vec![]));
        assert_eq!(g.width(), 40);
        assert_eq!(g.height(), 40);
        assert_eq!(g.occupied_count(), 0);
    }

    #[test]
    fn cell_aligned_obstacle_occupies_exactly_one_cell() {
        let g = rasterize_occupancy(&bare_layout(vec![boxed([0.0, 0.0, 0.05, 0.05])]));
        assert_eq!(g.occupied_count(), 1);
        assert!(g.is_occupied(20, 20));
    }

    #[test]
    fn occupied_count_matches_brute_force_oracle() {
        let rect = [-0.33, 0.11, 0.67, 0.94];
        let g = rasterize_occupancy(&bare_layout(vec![boxed(rect)]));
        let mut oracle = 0;
        for j in 0..g.height() {
            for i in 0..g.width() {
                let x0 = -1.0f64 + i as f64 * 0.05;
                let y0 = -1.0f64 + j as f64 * 0.05;
                let ox = (x0 + 0.05).min(rect[2] as f64) - x0.max(rect[0] as f64);
                let oy = (y0 + 0.05).min(rect[3] as f64) - y0.max(rect[1] as f64);
                let hit = ox > 1e-6 && oy > 1e-6;
                assert_eq!(g.is_occupied(i, j), hit, "cell ({i},{j})");
                if hit {
                    oracle += 1;
                }
            }
        }
        assert_eq!(g.occupied_count(), oracle);
        assert!(oracle > 0);
    }

    #[test]
    fn kmeans_with_k_equal_to_point_count_hits_every_point() {
        let g = rasterize_occupancy(&bare_layout(vec![
            boxed([-0.9, -0.9, -0.85, -0.85]),
            boxed([0.4, 0.4, 0.45, 0.45]),
            boxed([-0.5, 0.7, -0.45, 0.75]),
        ]));
        assert_eq!(g.occupied_count(), 3);
        let c = kmeans_cluster(&g, 3, 0);
        let mut expect = g.occupied_cell_centers();
        let mut got = c.centroids.clone();
        let key = |p: &[f32; 2]| (p[0].to_bits(), p[1].to_bits());
        expect.sort_by_key(key);
        got.sort_by_key(key);
        assert_eq!(got, expect);
    }

    #[test]
    fn two_separated_blobs_yield_blob_means() {
        let g = rasterize_occupancy(&bare_layout(vec![
            boxed([-0.9, -0.9, -0.8, -0.8]),
            boxed([0.7, 0.7, 0.8, 0.8]),
        ]));
        let (centroids, _) = kmeans_with_trace(&g.occupied_cell_centers(), 2, 1);
        let mut blob_means: Vec<[f32; 2]> = Vec::new();
        for sign in [-1.0f32, 1.0] {
            let pts: Vec<[f32; 2]> = g
                .occupied_cell_centers()
                .into_iter()
                .filter(|p| p[0] * sign > 0.0)
                .collect();
            let n = pts.len() as f32;
            blob_means.push([
                pts.iter().map(|p| p[0]).sum::<f32>() / n,
                pts.iter().map(|p| p[1]).sum::<f32>() / n,
            ]);
        }
        for m in blob_means {
            assert!(
                centroids.iter().any(|c| squared_dist(*c, m).sqrt() < 1e-4),
                "no centroid near blob mean {m:?}"
            );
        }
    }

    #[test]
    fn kmeans_beats_random_assignments() {
        let g = rasterize_occupancy(&bare_layout(vec![
            boxed([-0.7, -0.7, -0.4, -0.5]),
            boxed([0.2, 0.3, 0.5, 0.6]),
        ]));
        let points = g.occupied_cell_centers();
        assert!(points.len() >= 30);
        let k = 4;
        let (centroids, trace) = kmeans_with_trace(&points, k, 7);
        let mut inertia = 0.0f64;
        for p in &points {
            inertia += centroids
                .iter()
                .map(|c| squared_dist(*p, *c))
                .fold(f64::INFINITY, f64::min);
        }

        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            // Random partition into k groups scored by its own group means.
            let assign: Vec<usize> = (0..points.len()).map(|_| rng.gen_range(0..k)).collect();
            let mut sums = vec![[0.0f64; 2]; k];
            let mut counts = vec![0usize; k];
            for (p, a) in points.iter().zip(&assign) {
                sums[*a][0] += p[0] as f64;
                sums[*a][1] += p[1] as f64;
                counts[*a] += 1;
            }
            let means: Vec<[f32; 2]> = (0..k)
                .map(|ci| {
                    if counts[ci] == 0 {
                        [0.0, 0.0]
                    } else {
                        [
                            (sums[ci][0] / counts[ci] as f64) as f32,
                            (sums[ci][1] / counts[ci] as f64) as f32,
                        ]
                    }
                })
                .collect();
            let random_inertia: f64 = points
                .iter()
                .zip(&assign)
                .map(|(p, a)| squared_dist(*p, means[*a]))
                .sum();
            assert!(inertia <= random_inertia + 1e-9);
        }
        // Lloyd inertia must also never increase across iterations.
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn duplicate_fill_when_fewer_points_than_k() {
        let g = rasterize_occupancy(&bare_layout(vec![boxed([0.0, 0.0, 0.05, 0.05])]));
        let c = kmeans_cluster(&g, 50, 0);
        assert_eq!(c.centroids.len(), 50);
        assert!(!c.is_sentinel);
        let first = c.centroids[0];
        assert!(c.centroids.iter().all(|p| *p == first));
    }

    #[test]
    fn sentinel_clusters_for_empty_grid() {
        let g = rasterize_occupancy(&bare_layout(vec![]));
        let c = kmeans_cluster(&g, 50, 0);
        assert!(c.is_sentinel);
        assert_eq!(c.centroids.len(), 50);
        let s = RobotState::at_rest(Pose2D::new(0.3, -0.2, 1.0));
        let obs = build_privileged_obs(&s, [0.5, 0.5], &c);
        for t in obs[BASE_DIM..].chunks(3) {
            assert_eq!(t, [0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn goal_straight_ahead_has_zero_bearing() {
        let clusters = ObstacleClusters {
            centroids: vec![[5.0, 5.0]],
            is_sentinel: false,
        };
        let s = RobotState::at_rest(Pose2D::new(1.0, 1.0, std::f32::consts::FRAC_PI_2));
        let obs = build_privileged_obs(&s, [1.0, 3.0], &clusters);
        assert!((obs[0] - 2.0).abs() < 1e-6);
        assert!(obs[1].abs() < 1e-6);
        assert!(obs[2].abs() < 1e-6);
        assert!((obs[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn observation_has_exactly_159_entries_with_default_clusters() {
        let clusters = ObstacleClusters {
            centroids: vec![[1.0, 0.0]; NUM_CLUSTERS],
            is_sentinel: false,
        };
        let s = RobotState::at_rest(Pose2D::new(0.0, 0.0, 0.0));
        let obs = build_privileged_obs(&s, [2.0, 0.0], &clusters);
        assert_eq!(obs.len(), OBS_DIM);
        assert_eq!(obs.len(), 159);
    }

    #[test]
    fn rigid_world_motion_leaves_observation_unchanged() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut centroids = Vec::new();
            for _ in 0..12 {
                centroids.push([rng.gen_range(-4.0f32..4.0), rng.gen_range(-4.0f32..4.0)]);
            }
            let goal = [rng.gen_range(-4.0f32..4.0), rng.gen_range(-4.0f32..4.0)];
            let mut state = RobotState::at_rest(Pose2D::new(
                rng.gen_range(-2.0f32..2.0),
                rng.gen_range(-2.0f32..2.0),
                rng.gen_range(-3.0f32..3.0),
            ));
            state.body_vel = [rng.gen_range(-0.5f32..0.5), 0.0];
            state.yaw_rate = rng.gen_range(-2.0f32..2.0);
            state.wheel_vel = [rng.gen_range(-20.0f32..20.0), rng.gen_range(-20.0f32..20.0)];

            let clusters = ObstacleClusters {
                centroids: centroids.clone(),
                is_sentinel: false,
            };
            let base = build_privileged_obs(&state, goal, &clusters);

            let theta = 37.0f64.to_radians();
            let (sin_t, cos_t) = (theta.sin() as f32, theta.cos() as f32);
            let (tx, ty) = (1.7f32, -2.3f32);
            let rot = |p: [f32; 2]| {
                [
                    cos_t * p[0] - sin_t * p[1] + tx,
                    sin_t * p[0] + cos_t * p[1] + ty,
                ]
            };
            let mut moved = state;
            let rp = rot([state.pose.x, state.pose.y]);
            moved.pose.x = rp[0];
            moved.pose.y = rp[1];
            moved.pose.yaw = crate::sim::wrap_angle(state.pose.yaw + theta as f32);
            let moved_clusters = ObstacleClusters {
                centroids: centroids.iter().map(|c| rot(*c)).collect(),
                is_sentinel: false,
            };
            let moved_obs = build_privileged_obs(&moved, rot(goal), &moved_clusters);
            for (a, b) in base.iter().zip(&moved_obs) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn triples_are_normalized_clipped_and_sorted() {
        let clusters = ObstacleClusters {
            centroids: vec![[10.0, 0.0], [0.5, 0.0], [0.0, -2.0], [2.4, 3.2]],
            is_sentinel: false,
        };
        let s = RobotState::at_rest(Pose2D::new(0.0, 0.0, 0.0));
        let obs = build_privileged_obs(&s, [1.0, 0.0], &clusters);
        let triples: Vec<&[f32]> = obs[BASE_DIM..].chunks(3).collect();
        let mut last = 0.0f32;
        for t in &triples {
            assert!(t[0].abs() <= 1.0 && t[1].abs() <= 1.0);
            assert!((0.0..=1.0).contains(&t[2]));
            assert!(t[2] >= last);
            last = t[2];
        }
        // The 10 m centroid is radially clipped: direction preserved,
        // distance pinned at 1.0.
        let far = triples.last().unwrap();
        assert!((far[0] - 1.0).abs() < 1e-6);
        assert!(far[1].abs() < 1e-6);
        assert_eq!(far[2], 1.0);
        // sin/cos encoding of the bearing stays on the unit circle.
        assert!((obs[2] * obs[2] + obs[3] * obs[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn room_a_clusters_lie_inside_bounds() {
        let layout = crate::sim::room_a();
        let c = layout_clusters(&layout, NUM_CLUSTERS, 0);
        assert_eq!(c.centroids.len(), NUM_CLUSTERS);
        assert!(!c.is_sentinel);
        for p in &c.centroids {
            assert!(layout.contains(p[0], p[1]), "centroid {p:?} escaped");
        }
    }
}
