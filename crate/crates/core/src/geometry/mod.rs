//! Spatial K-nearest-neighbor graphs and the raw edge geometry (distance and
//! clockwise angle) consumed by the spatial relationship encoder.
//!
//! Every node of a graph receives exactly `k` directed edges, one from each of
//! its `k` nearest other nodes. Ties in distance are broken by the smaller node
//! id, and all orderings use squared Euclidean distance so the exhaustive scan
//! and the grid index agree bit for bit.

mod grid;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{DmspError, Result};

pub use grid::GridIndex;

/// A location in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub x: f64,
    pub y: f64,
}

impl GeoPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance_sq(&self, other: &GeoPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn distance(&self, other: &GeoPoint) -> f64 {
        self.distance_sq(other).sqrt()
    }

    /// Rotates counter-clockwise by `theta` about the origin, then translates.
    pub fn rigid_motion(&self, theta: f64, shift: GeoPoint) -> GeoPoint {
        let (s, c) = theta.sin_cos();
        GeoPoint::new(
            c * self.x - s * self.y + shift.x,
            s * self.x + c * self.y + shift.y,
        )
    }

    fn check(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(DmspError::InvalidGeometry(format!(
                "non-finite coordinate ({}, {})",
                self.x, self.y
            )))
        }
    }
}

/// Distance and angle of one directed edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeGeometry {
    pub distance: f64,
    /// Clockwise angle in `[-π, π)`.
    pub angle: f64,
}

impl EdgeGeometry {
    pub fn is_valid(&self) -> bool {
        self.distance.is_finite()
            && self.distance >= 0.0
            && self.angle.is_finite()
            && (-PI..PI).contains(&self.angle)
    }
}

/// Directed edge `source -> target`: the target node aggregates a message
/// from the source node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub geometry: EdgeGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub location: GeoPoint,
    pub attributes: Vec<f64>,
}

/// KNN graph over a prediction location and the simultaneous samples of one
/// source. Node 0 is the prediction location; sample `j` is node `j + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialKnnGraph {
    k: usize,
    target_node: usize,
    nodes: Vec<GraphNode>,
    /// Grouped by target node: edges `[o * k, (o + 1) * k)` point into node `o`,
    /// ordered by ascending distance then source id.
    edges: Vec<Edge>,
}

impl SpatialKnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn target_node(&self) -> usize {
        self.target_node
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn in_edges(&self, node: usize) -> &[Edge] {
        &self.edges[node * self.k..(node + 1) * self.k]
    }

    pub fn find_edge(&self, source: usize, target: usize) -> Option<&Edge> {
        if target >= self.nodes.len() {
            return None;
        }
        self.in_edges(target).iter().find(|e| e.source == source)
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut wrapped = angle - two_pi * ((angle + PI) / two_pi).floor();
    if wrapped >= PI {
        wrapped -= two_pi;
    }
    if wrapped < -PI {
        wrapped += two_pi;
    }
    wrapped
}

/// Clockwise rotation at `origin` from the ray toward `toward` to the first
/// ray toward one of `neighbors` met while sweeping clockwise, wrapped into
/// `[-π, π)`.
///
/// Zero-length rays are ignored. A neighbor lying on the starting ray counts
/// as a full turn. Returns 0 when the starting ray has zero length or no
/// usable neighbor remains.
pub fn clockwise_angle<I>(origin: GeoPoint, toward: GeoPoint, neighbors: I) -> f64
where
    I: IntoIterator<Item = GeoPoint>,
{
    if origin.distance_sq(&toward) == 0.0 {
        return 0.0;
    }
    let heading = (toward.y - origin.y).atan2(toward.x - origin.x);
    let two_pi = 2.0 * PI;
    let mut best: Option<f64> = None;
    for p in neighbors {
        if origin.distance_sq(&p) == 0.0 {
            continue;
        }
        let theta = (p.y - origin.y).atan2(p.x - origin.x);
        let mut cw = (heading - theta).rem_euclid(two_pi);
        if cw <= 0.0 {
            cw = two_pi;
        }
        best = Some(best.map_or(cw, |b: f64| b.min(cw)));
    }
    best.map_or(0.0, wrap_angle)
}

/// Angle at the source node of `source -> target`, with the source node's
/// own in-neighbors as the candidate "next" rays. Graphs with `k < 2` use the
/// constant 0.
pub(crate) fn angle_from_neighbors<I>(k: usize, origin: GeoPoint, toward: GeoPoint, others: I) -> f64
where
    I: IntoIterator<Item = GeoPoint>,
{
    if k < 2 {
        return 0.0;
    }
    clockwise_angle(origin, toward, others)
}

/// Orders `(squared distance, id)` pairs: nearer first, then smaller id.
pub(crate) fn neighbor_order(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` nearest other points to `points[query]` by exhaustive scan.
pub fn knn_indices(points: &[GeoPoint], query: usize, k: usize) -> Result<Vec<usize>> {
    for p in points {
        p.check()?;
    }
    if query >= points.len() {
        return Err(DmspError::InvalidGeometry(format!(
            "query index {query} out of range for {} points",
            points.len()
        )));
    }
    let available = points.len() - 1;
    if k == 0 || k > available {
        return Err(DmspError::InsufficientNeighbors { k, available });
    }
    Ok(knn_scan(points, query, k))
}

fn knn_scan(points: &[GeoPoint], query: usize, k: usize) -> Vec<usize> {
    let origin = points[query];
    let mut cand: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(id, _)| id != query)
        .map(|(id, p)| (origin.distance_sq(p), id))
        .collect();
    let order = neighbor_order;
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_by(order);
    cand.into_iter().map(|(_, id)| id).collect()
}

/// Builds the KNN graph over `target_location` (node 0, carrying
/// `target_attributes`) and `samples` (nodes `1..`).
pub fn build_knn_graph(
    target_location: GeoPoint,
    target_attributes: Vec<f64>,
    samples: &[(GeoPoint, Vec<f64>)],
    k: usize,
) -> Result<SpatialKnnGraph> {
    if samples.is_empty() {
        return Err(DmspError::InsufficientNeighbors { k, available: 0 });
    }
    let mut nodes = Vec::with_capacity(samples.len() + 1);
    nodes.push(GraphNode {
        id: 0,
        location: target_location,
        attributes: target_attributes,
    });
    for (j, (loc, attrs)) in samples.iter().enumerate() {
        nodes.push(GraphNode {
            id: j + 1,
            location: *loc,
            attributes: attrs.clone(),
        });
    }
    let points: Vec<GeoPoint> = nodes.iter().map(|n| n.location).collect();
    let neighbors = points
        .iter()
        .enumerate()
        .map(|(o, _)| knn_indices(&points, o, k))
        .collect::<Result<Vec<_>>>()?;

    let mut edges = Vec::with_capacity(k * nodes.len());
    for (o, ins) in neighbors.iter().enumerate() {
        for &src in ins {
            let origin = points[src];
            let others = neighbors[src]
                .iter()
                .filter(|&&n| n != o)
                .map(|&n| points[n]);
            edges.push(Edge {
                source: src,
                target: o,
                geometry: EdgeGeometry {
                    distance: origin.distance(&points[o]),
                    angle: angle_from_neighbors(k, origin, points[o], others),
                },
            });
        }
    }
    Ok(SpatialKnnGraph {
        k,
        target_node: 0,
        nodes,
        edges,
    })
}

/// Recomputes the angle of `source -> target` from the graph's node positions.
pub fn edge_angle(graph: &SpatialKnnGraph, source: usize, target: usize) -> Result<f64> {
    if source >= graph.node_count() || graph.find_edge(source, target).is_none() {
        return Err(DmspError::EdgeNotInGraph {
            source_node: source,
            target_node: target,
        });
    }
    let origin = graph.nodes[source].location;
    let toward = graph.nodes[target].location;
    let others = graph
        .in_edges(source)
        .iter()
        .filter(|e| e.source != target)
        .map(|e| graph.nodes[e.source].location);
    Ok(angle_from_neighbors(graph.k, origin, toward, others))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(coords: &[(f64, f64)]) -> Vec<GeoPoint> {
        coords.iter().map(|&(x, y)| GeoPoint::new(x, y)).collect()
    }

    fn brute_force(points: &[GeoPoint], q: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = Vec::new();
        for (i, p) in points.iter().enumerate() {
            if i != q {
                let dx = p.x - points[q].x;
                let dy = p.y - points[q].y;
                all.push((dx * dx + dy * dy, i));
            }
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn collinear_neighbors() {
        let p = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (5.0, 0.0)]);
        assert_eq!(knn_indices(&p, 0, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn ties_break_by_id() {
        let p = pts(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        assert_eq!(knn_indices(&p, 0, 2).unwrap(), vec![1, 2]);
        let p = pts(&[(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (-1.0, 0.0)]);
        assert_eq!(knn_indices(&p, 0, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn random_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p: Vec<GeoPoint> = (0..50)
            .map(|_| GeoPoint::new(rng.random(), rng.random()))
            .collect();
        for q in 0..p.len() {
            assert_eq!(knn_indices(&p, q, 3).unwrap(), brute_force(&p, q, 3));
        }
    }

    #[test]
    fn knn_errors() {
        let p = pts(&[(0.0, 0.0), (1.0, 0.0)]);
        assert!(matches!(
            knn_indices(&p, 0, 1).map(|v| v.len()),
            Ok(1)
        ));
        assert!(matches!(
            knn_indices(&p, 0, 2),
            Err(DmspError::InsufficientNeighbors { .. })
        ));
        let bad = pts(&[(0.0, 0.0), (f64::NAN, 0.0), (1.0, 1.0)]);
        assert!(matches!(
            knn_indices(&bad, 0, 1),
            Err(DmspError::InvalidGeometry(_))
        ));
    }

    #[test]
    fn triangle_graph_counts() {
        let samples: Vec<(GeoPoint, Vec<f64>)> = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
            .iter()
            .map(|&(x, y)| (GeoPoint::new(x, y), vec![]))
            .collect();
        let g = build_knn_graph(GeoPoint::new(0.0, 0.0), vec![], &samples, 1).unwrap();
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.edge_count(), 4);
    }

    #[test]
    fn random_graph_in_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<(GeoPoint, Vec<f64>)> = (0..10)
            .map(|_| (GeoPoint::new(rng.random(), rng.random()), vec![1.0]))
            .collect();
        let g = build_knn_graph(GeoPoint::new(0.5, 0.5), vec![0.0], &samples, 3).unwrap();
        assert_eq!(g.node_count(), 11);
        assert_eq!(g.edge_count(), 33);
        let points: Vec<GeoPoint> = g.nodes().iter().map(|n| n.location).collect();
        for o in 0..g.node_count() {
            let ins: Vec<usize> = g.in_edges(o).iter().map(|e| e.source).collect();
            assert_eq!(ins, brute_force(&points, o, 3));
            for e in g.in_edges(o) {
                assert_eq!(e.target, o);
                assert_ne!(e.source, o);
                let d = points[e.source].distance(&points[o]);
                assert!((e.geometry.distance - d).abs() <= 1e-9 * d.max(1.0));
                assert!(e.geometry.is_valid());
            }
        }
    }

    #[test]
    fn coincident_target_and_sample() {
        let samples: Vec<(GeoPoint, Vec<f64>)> = [(0.0, 0.0), (3.0, 0.0), (0.0, 4.0)]
            .iter()
            .map(|&(x, y)| (GeoPoint::new(x, y), vec![]))
            .collect();
        let g = build_knn_graph(GeoPoint::new(0.0, 0.0), vec![], &samples, 1).unwrap();
        assert_eq!(g.in_edges(0)[0].source, 1);
        assert_eq!(g.in_edges(1)[0].source, 0);
        assert_eq!(g.in_edges(0)[0].geometry.distance, 0.0);
        assert_eq!(g.in_edges(0)[0].geometry.angle, 0.0);
    }

    #[test]
    fn east_then_north_is_minus_half_pi() {
        // Node 0 at the origin draws from an east and a north neighbor.
        let origin = GeoPoint::new(0.0, 0.0);
        let east = GeoPoint::new(1.0, 0.0);
        let north = GeoPoint::new(0.0, 1.0);
        let a = clockwise_angle(origin, east, [north]);
        assert!((a + PI / 2.0).abs() < 1e-12, "{a}");

        // Same configuration through a built graph: target (0,0) with k = 2.
        let samples = vec![(east, vec![]), (north, vec![])];
        let g = build_knn_graph(origin, vec![], &samples, 2).unwrap();
        let a = edge_angle(&g, 0, 1).unwrap();
        assert!((a + PI / 2.0).abs() < 1e-12, "{a}");
        let b = edge_angle(&g, 0, 2).unwrap();
        assert!((b - PI / 2.0).abs() < 1e-12, "{b}");
    }

    #[test]
    fn single_neighbor_falls_back_to_zero() {
        let samples = vec![(GeoPoint::new(1.0, 0.0), vec![]), (GeoPoint::new(5.0, 5.0), vec![])];
        let g = build_knn_graph(GeoPoint::new(0.0, 0.0), vec![], &samples, 1).unwrap();
        for e in g.edges() {
            assert_eq!(edge_angle(&g, e.source, e.target).unwrap(), 0.0);
            assert_eq!(e.geometry.angle, 0.0);
        }
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let samples = vec![(GeoPoint::new(1.0, 0.0), vec![]), (GeoPoint::new(5.0, 5.0), vec![])];
        let g = build_knn_graph(GeoPoint::new(0.0, 0.0), vec![], &samples, 1).unwrap();
        assert!(matches!(
            edge_angle(&g, 2, 1),
            Err(DmspError::EdgeNotInGraph { .. })
        ));
        assert!(edge_angle(&g, 7, 0).is_err());
    }

    #[test]
    fn angles_invariant_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let samples: Vec<(GeoPoint, Vec<f64>)> = (0..15)
                .map(|_| (GeoPoint::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)), vec![]))
                .collect();
            let target = GeoPoint::new(rng.random(), rng.random());
            let theta = rng.random_range(-PI..PI);
            let shift = GeoPoint::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let moved: Vec<(GeoPoint, Vec<f64>)> = samples
                .iter()
                .map(|(p, a)| (p.rigid_motion(theta, shift), a.clone()))
                .collect();
            let g1 = build_knn_graph(target, vec![], &samples, 3).unwrap();
            let g2 = build_knn_graph(target.rigid_motion(theta, shift), vec![], &moved, 3).unwrap();
            for (e1, e2) in g1.edges().iter().zip(g2.edges()) {
                assert_eq!((e1.source, e1.target), (e2.source, e2.target));
                let da = wrap_angle(e1.geometry.angle - e2.geometry.angle).abs();
                assert!(da < 1e-9, "angle drift {da}");
                assert!((e1.geometry.distance - e2.geometry.distance).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_angle(0.0), 0.0);
        assert_eq!(wrap_angle(2.0 * PI), 0.0);
    }
}
