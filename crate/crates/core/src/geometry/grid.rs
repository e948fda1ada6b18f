use super::{neighbor_order, GeoPoint};
use crate::error::{DmspError, Result};

/// Uniform bucket grid answering exact k-nearest queries.
///
/// Results match the exhaustive scan exactly, including the smaller-id tie
/// break, because the search only stops once every unvisited cell is
/// strictly farther than the current k-th candidate.
#[derive(Debug, Clone)]
pub struct GridIndex {
    points: Vec<GeoPoint>,
    min: GeoPoint,
    cell: f64,
    nx: usize,
    ny: usize,
    /// CSR layout: points of cell `c` are `items[starts[c]..starts[c + 1]]`.
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl GridIndex {
    pub fn new(points: Vec<GeoPoint>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(DmspError::InvalidGeometry(format!(
                "non-finite coordinate ({}, {})",
                p.x, p.y
            )));
        }
        let n = points.len().max(1);
        let (mut min, mut max) = (
            GeoPoint::new(f64::INFINITY, f64::INFINITY),
            GeoPoint::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        );
        for p in &points {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        if points.is_empty() {
            min = GeoPoint::new(0.0, 0.0);
            max = min;
        }
        let width = max.x - min.x;
        let height = max.y - min.y;
        // Aim for roughly two points per cell.
        let area = width * height;
        let mut cell = if area > 0.0 {
            (2.0 * area / n as f64).sqrt()
        } else {
            width.max(height) / n as f64
        };
        if !(cell.is_finite() && cell > 0.0) {
            cell = 1.0;
        }
        let nx = ((width / cell).floor() as usize + 1).min(4 * n);
        let ny = ((height / cell).floor() as usize + 1).min(4 * n);

        let mut grid = GridIndex {
            points,
            min,
            cell,
            nx,
            ny,
            starts: Vec::new(),
            items: Vec::new(),
        };
        let cells: Vec<usize> = grid
            .points
            .iter()
            .map(|p| {
                let (cx, cy) = grid.cell_of(p);
                cy * nx + cx
            })
            .collect();
        let mut counts = vec![0usize; nx * ny + 1];
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for c in 0..nx * ny {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut items = vec![0usize; cells.len()];
        for (id, &c) in cells.iter().enumerate() {
            items[fill[c]] = id;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.items = items;
        Ok(grid)
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn cell_of(&self, p: &GeoPoint) -> (usize, usize) {
        let fx = ((p.x - self.min.x) / self.cell).floor();
        let fy = ((p.y - self.min.y) / self.cell).floor();
        let cx = fx.clamp(0.0, (self.nx - 1) as f64) as usize;
        let cy = fy.clamp(0.0, (self.ny - 1) as f64) as usize;
        (cx, cy)
    }

    /// Up to `k` nearest indexed points to `query` as `(squared distance, id)`,
    /// skipping ids for which `exclude` returns true. Sorted nearest first,
    /// ties by smaller id.
    pub fn nearest<F>(&self, query: GeoPoint, k: usize, mut exclude: F) -> Vec<(f64, usize)>
    where
        F: FnMut(usize) -> bool,
    {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return best;
        }
        let (cx, cy) = self.cell_of(&query);
        let (cx, cy) = (cx as isize, cy as isize);
        let (nx, ny) = (self.nx as isize, self.ny as isize);
        let mut r: isize = 0;
        loop {
            let x0 = cx - r;
            let x1 = cx + r;
            let y0 = cy - r;
            let y1 = cy + r;
            for gy in y0.max(0)..=y1.min(ny - 1) {
                let edge_row = gy == y0 || gy == y1;
                for gx in x0.max(0)..=x1.min(nx - 1) {
                    // Inner rows of the ring contribute only their end cells.
                    if !edge_row && gx != x0 && gx != x1 {
                        continue;
                    }
                    let c = gy as usize * self.nx + gx as usize;
                    for &id in &self.items[self.starts[c]..self.starts[c + 1]] {
                        if exclude(id) {
                            continue;
                        }
                        let cand = (query.distance_sq(&self.points[id]), id);
                        if best.len() == k {
                            if !neighbor_order(&cand, &best[k - 1]).is_lt() {
                                continue;
                            }
                            best.pop();
                        }
                        let pos = best.partition_point(|b| neighbor_order(b, &cand).is_lt());
                        best.insert(pos, cand);
                    }
                }
            }

            // Distance from the query to the nearest cell not yet visited.
            let mut margin = f64::INFINITY;
            let mut covered = true;
            if x0 > 0 {
                covered = false;
                margin = margin.min(query.x - (self.min.x + x0 as f64 * self.cell));
            }
            if x1 < nx - 1 {
                covered = false;
                margin = margin.min(self.min.x + (x1 + 1) as f64 * self.cell - query.x);
            }
            if y0 > 0 {
                covered = false;
                margin = margin.min(query.y - (self.min.y + y0 as f64 * self.cell));
            }
            if y1 < ny - 1 {
                covered = false;
                margin = margin.min(self.min.y + (y1 + 1) as f64 * self.cell - query.y);
            }
            if covered {
                return best;
            }
            if best.len() == k && margin > 0.0 && best[k - 1].0 < margin * margin {
                return best;
            }
            r += 1;
        }
    }
}
