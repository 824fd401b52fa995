//! Grid shortest-path oracle for SPL.
//!
//! The room is rasterized into a fixed-resolution occupancy grid, obstacle
//! rectangles are inflated by the robot radius, and Dijkstra with
//! 8-connected moves measures the shortest collision-free path from the
//! start pose to the success disc around a goal. Diagonal moves may not cut
//! corners past a blocked cell.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::sim::{disc_rect_distance, RoomLayout};

/// Grid cell size in meters.
pub const PLAN_RESOLUTION: f32 = 0.05;

/// Path cost ordered by value; needed because f64 is not `Ord`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cost(f64);

impl Eq for Cost {}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Occupancy grid over a room with inflated obstacles.
#[derive(Debug, Clone)]
pub struct PlanGrid {
    cols: usize,
    rows: usize,
    res: f32,
    origin: [f32; 2],
    blocked: Vec<bool>,
}

impl PlanGrid {
    /// Rasterizes the layout at `resolution`, blocking every cell whose
    /// center lies within `inflate` of an obstacle rectangle.
    pub fn new(layout: &RoomLayout, resolution: f32, inflate: f32) -> Self {
        let [xmin, ymin, xmax, ymax] = layout.bounds;
        let cols = (((xmax - xmin) / resolution).ceil() as usize).max(1);
        let rows = (((ymax - ymin) / resolution).ceil() as usize).max(1);
        let mut blocked = vec![false; cols * rows];
        for j in 0..rows {
            for i in 0..cols {
                let [cx, cy] = center(xmin, ymin, resolution, i, j);
                blocked[j * cols + i] = layout
                    .obstacles
                    .iter()
                    .any(|o| disc_rect_distance(cx, cy, &o.rect) < inflate);
            }
        }
        PlanGrid {
            cols,
            rows,
            res: resolution,
            origin: [xmin, ymin],
            blocked,
        }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[j * self.cols + i]
    }

    fn cell_of(&self, p: [f32; 2]) -> (usize, usize) {
        let i = ((p[0] - self.origin[0]) / self.res).floor() as isize;
        let j = ((p[1] - self.origin[1]) / self.res).floor() as isize;
        (
            i.clamp(0, self.cols as isize - 1) as usize,
            j.clamp(0, self.rows as isize - 1) as usize,
        )
    }

    fn center(&self, i: usize, j: usize) -> [f32; 2] {
        center(self.origin[0], self.origin[1], self.res, i, j)
    }

    /// Shortest path length from `start` to the open disc of radius `disc`
    /// around `goal`.
    ///
    /// The start cell is treated as free even when the inflation covers it,
    /// since the robot demonstrably occupies that pose. Degenerate queries
    /// (start already inside the disc, disc fully blocked, goal unreachable)
    /// are planner errors.
    pub fn geodesic_to_disc(&self, start: [f32; 2], goal: [f32; 2], disc: f32) -> Result<f32> {
        let direct = (start[0] - goal[0]).hypot(start[1] - goal[1]);
        if direct < disc {
            return Err(Error::Planner(format!(
                "start ({:.2}, {:.2}) already inside the {disc:.2} m success disc",
                start[0], start[1]
            )));
        }

        let mut target = vec![false; self.cols * self.rows];
        let mut any_target = false;
        for j in 0..self.rows {
            for i in 0..self.cols {
                let [cx, cy] = self.center(i, j);
                if !self.is_blocked(i, j) && (cx - goal[0]).hypot(cy - goal[1]) < disc {
                    target[j * self.cols + i] = true;
                    any_target = true;
                }
            }
        }
        if !any_target {
            return Err(Error::Planner(format!(
                "no free cell inside the success disc at ({:.2}, {:.2})",
                goal[0], goal[1]
            )));
        }

        let (si, sj) = self.cell_of(start);
        let free = |i: usize, j: usize| !self.is_blocked(i, j) || (i == si && j == sj);

        let mut dist = vec![f64::INFINITY; self.cols * self.rows];
        let mut heap = BinaryHeap::new();
        dist[sj * self.cols + si] = 0.0;
        heap.push(Reverse((Cost(0.0), si, sj)));

        while let Some(Reverse((Cost(d), i, j))) = heap.pop() {
            let idx = j * self.cols + i;
            if d > dist[idx] {
                continue;
            }
            if target[idx] {
                return Ok(d as f32);
            }
            for dj in -1i32..=1 {
                for di in -1i32..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let ni = i as i32 + di;
                    let nj = j as i32 + dj;
                    if ni < 0 || nj < 0 || ni >= self.cols as i32 || nj >= self.rows as i32 {
                        continue;
                    }
                    let (ni, nj) = (ni as usize, nj as usize);
                    if !free(ni, nj) {
                        continue;
                    }
                    let diagonal = di != 0 && dj != 0;
                    if diagonal && (!free(ni, j) || !free(i, nj)) {
                        continue;
                    }
                    let step = if diagonal {
                        self.res as f64 * std::f64::consts::SQRT_2
                    } else {
                        self.res as f64
                    };
                    let nd = d + step;
                    let nidx = nj * self.cols + ni;
                    if nd < dist[nidx] {
                        dist[nidx] = nd;
                        heap.push(Reverse((Cost(nd), ni, nj)));
                    }
                }
            }
        }

        Err(Error::Planner(format!(
            "goal at ({:.2}, {:.2}) unreachable from ({:.2}, {:.2})",
            goal[0], goal[1], start[0], start[1]
        )))
    }
}

fn center(xmin: f32, ymin: f32, res: f32, i: usize, j: usize) -> [f32; 2] {
    [
        xmin + (i as f32 + 0.5) * res,
        ymin + (j as f32 + 0.5) * res,
    ]
}
