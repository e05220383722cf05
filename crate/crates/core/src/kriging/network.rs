use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use super::DistanceMetric;
use crate::grid::RoadMask;

/// Shortest-path distance over the road-cell graph. Orthogonal steps cost one
/// cell size, diagonal steps `sqrt(2)` cell sizes. Points in the same cell,
/// off the road network, or in disconnected components use the straight-line
/// distance.
pub struct NetworkDistance {
    mask: RoadMask,
    cell_size_km: f64,
    cache: RefCell<HashMap<usize, Vec<f64>>>,
}

#[derive(PartialEq)]
struct Dist(f64);

impl Eq for Dist {}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl NetworkDistance {
    pub fn new(mask: RoadMask, cell_size_km: f64) -> Self {
        NetworkDistance { mask, cell_size_km, cache: RefCell::new(HashMap::new()) }
    }

    fn cell_index(&self, p: (f64, f64)) -> Option<usize> {
        let (rows, cols) = self.mask.mask.dim();
        let c = (p.0 / self.cell_size_km).floor();
        let r = (p.1 / self.cell_size_km).floor();
        if r < 0.0 || c < 0.0 || r >= rows as f64 || c >= cols as f64 {
            return None;
        }
        let (r, c) = (r as usize, c as usize);
        self.mask.is_road(r, c).then_some(r * cols + c)
    }

    fn dijkstra(&self, source: usize) -> Vec<f64> {
        let (rows, cols) = self.mask.mask.dim();
        let mut dist = vec![f64::INFINITY; rows * cols];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Reverse((Dist(0.0), source)));
        while let Some(Reverse((Dist(d), u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            let (r, c) = ((u / cols) as i64, (u % cols) as i64);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                        continue;
                    }
                    if !self.mask.is_road(nr as usize, nc as usize) {
                        continue;
                    }
                    let step = if dr != 0 && dc != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
                    let v = nr as usize * cols + nc as usize;
                    let nd = d + step * self.cell_size_km;
                    if nd < dist[v] {
                        dist[v] = nd;
                        heap.push(Reverse((Dist(nd), v)));
                    }
                }
            }
        }
        dist
    }

    fn path_length(&self, from: usize, to: usize) -> f64 {
        let mut cache = self.cache.borrow_mut();
        if let Some(d) = cache.get(&from) {
            return d[to];
        }
        if let Some(d) = cache.get(&to) {
            return d[from];
        }
        let d = self.dijkstra(from);
        let out = d[to];
        cache.insert(from, d);
        out
    }
}

impl DistanceMetric for NetworkDistance {
    fn distance(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        let straight = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        match (self.cell_index(a), self.cell_index(b)) {
            (Some(ca), Some(cb)) if ca != cb => {
                let d = self.path_length(ca, cb);
                if d.is_finite() {
                    d
                } else {
                    straight
                }
            }
            _ => straight,
        }
    }
}
