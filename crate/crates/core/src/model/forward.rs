//! Forward pass and its reverse-mode gradient.
//!
//! A prediction only depends on the `L`-hop in-neighborhood of the query
//! node, so each source builds just that part of its KNN graph (through a
//! per-timestamp grid index) instead of the whole graph. The result is
//! identical to running the same layers over the full graph.

use std::collections::{BTreeMap, HashMap};

use crate::data::{Observation, ObservationStore};
use crate::error::{DmspError, Result};
use crate::fidelity::softmax;
use crate::geometry::{
    angle_from_neighbors, neighbor_order, Edge, EdgeGeometry, GeoPoint, GridIndex,
    SpatialKnnGraph,
};
use crate::model::dense::tanh_in_place;
use crate::model::{ConvLayer, Dense, ModelParams};

/// Output of the spatial relationship encoder for one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEmbedding(pub Vec<f64>);

/// Per-source estimates and their fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePrediction {
    /// `None` for sources that could not form a graph.
    pub per_source: Vec<Option<f64>>,
    /// Fusion weights: fidelity scores renormalized over usable sources,
    /// zero elsewhere.
    pub weights: Vec<f64>,
    pub fused: f64,
    /// Set when at least one source was unusable.
    pub partial: bool,
}

/// Node attributes `[features ; target value ; mask flag]`.
pub fn node_inputs(features: &[f64], observation: Observation) -> Vec<f64> {
    let (value, flag) = observation.channels();
    let mut v = Vec::with_capacity(features.len() + 2);
    v.extend_from_slice(features);
    v.push(value);
    v.push(flag);
    v
}

fn query_inputs(feature_dim: usize, own: Option<&[f64]>) -> Vec<f64> {
    match own {
        Some(f) => node_inputs(f, Observation::Masked),
        None => node_inputs(&vec![0.0; feature_dim], Observation::Masked),
    }
}

pub fn encode_edge(params: &ModelParams, geometry: EdgeGeometry) -> Result<EdgeEmbedding> {
    if !(geometry.distance.is_finite() && geometry.angle.is_finite()) {
        return Err(DmspError::InvalidGeometry(format!(
            "edge geometry ({}, {})",
            geometry.distance, geometry.angle
        )));
    }
    Ok(EdgeEmbedding(encode(&params.encoder, &geometry)))
}

fn encode(encoder: &Dense, g: &EdgeGeometry) -> Vec<f64> {
    let mut e = encoder.affine(&[g.distance, g.angle]);
    tanh_in_place(&mut e);
    e
}

struct DecoderTrace {
    a1: Vec<f64>,
    a2: Vec<f64>,
    y: f64,
}

fn decoder_forward(decoder: &[Dense], h: &[f64]) -> DecoderTrace {
    let mut a1 = decoder[0].affine(h);
    tanh_in_place(&mut a1);
    let mut a2 = decoder[1].affine(&a1);
    tanh_in_place(&mut a2);
    let y = decoder[2].affine(&a2)[0];
    DecoderTrace { a1, a2, y }
}

pub fn decode(params: &ModelParams, embedding: &[f64]) -> Result<f64> {
    if embedding.len() != params.hidden_dim() {
        return Err(DmspError::Dimension(format!(
            "embedding width {} but hidden_dim {}",
            embedding.len(),
            params.hidden_dim()
        )));
    }
    Ok(decoder_forward(&params.decoder, embedding).y)
}

/// Part of one source's KNN graph around the query node (local index 0).
#[derive(Debug, Clone)]
struct LocalGraph {
    inputs: Vec<Vec<f64>>,
    edges: Vec<Edge>,
    /// Edge indices into each node; empty for nodes whose state is never updated.
    in_edges: Vec<Vec<usize>>,
    /// `hop_le[h]` = number of nodes within `h` hops of the query, `h = 0..=L`.
    /// Nodes are ordered by hop, so layer `l` updates the prefix `hop_le[L - 1 - l]`.
    hop_le: Vec<usize>,
}

impl LocalGraph {
    fn from_full(graph: &SpatialKnnGraph, layers: usize) -> Self {
        let n = graph.node_count();
        let in_edges = (0..n)
            .map(|o| (o * graph.k()..(o + 1) * graph.k()).collect())
            .collect();
        LocalGraph {
            inputs: graph.nodes().iter().map(|n| n.attributes.clone()).collect(),
            edges: graph.edges().to_vec(),
            in_edges,
            hop_le: vec![n; layers + 1],
        }
    }
}

struct LayerTrace {
    /// `messages[o][q]` for the `q`-th in-edge of node `o`.
    messages: Vec<Vec<Vec<f64>>>,
    agg: Vec<Vec<f64>>,
}

struct SourcePass {
    graph: LocalGraph,
    embeddings: Vec<Vec<f64>>,
    /// `states[l]` = node states entering layer `l`; `states[L]` is the output.
    states: Vec<Vec<Vec<f64>>>,
    layers: Vec<LayerTrace>,
    decoder: DecoderTrace,
}

fn conv_forward(
    conv: &ConvLayer,
    inputs: &[Vec<f64>],
    n_out: usize,
    graph: &LocalGraph,
    embeddings: &[Vec<f64>],
) -> (Vec<Vec<f64>>, LayerTrace) {
    let h = conv.update.outputs();
    let mut outputs = Vec::with_capacity(n_out);
    let mut messages = Vec::with_capacity(n_out);
    let mut aggs = Vec::with_capacity(n_out);
    for (o, input) in inputs.iter().enumerate().take(n_out) {
        let ins = &graph.in_edges[o];
        let mut agg = vec![0.0; h];
        let mut node_msgs = Vec::with_capacity(ins.len());
        for &e in ins {
            let src = graph.edges[e].source;
            let mut m = conv.message.affine2(&inputs[src], &embeddings[e]);
            tanh_in_place(&mut m);
            for (a, v) in agg.iter_mut().zip(&m) {
                *a += v;
            }
            node_msgs.push(m);
        }
        if !ins.is_empty() {
            let inv = 1.0 / ins.len() as f64;
            agg.iter_mut().for_each(|a| *a *= inv);
        }
        let mut out = conv.update.affine2(input, &agg);
        tanh_in_place(&mut out);
        outputs.push(out);
        messages.push(node_msgs);
        aggs.push(agg);
    }
    (
        outputs,
        LayerTrace {
            messages,
            agg: aggs,
        },
    )
}

fn source_forward(params: &ModelParams, source: usize, graph: LocalGraph) -> SourcePass {
    let layers = params.num_layers();
    let embeddings: Vec<Vec<f64>> = graph
        .edges
        .iter()
        .map(|e| encode(&params.encoder, &e.geometry))
        .collect();
    let mut states = Vec::with_capacity(layers + 1);
    let mut traces = Vec::with_capacity(layers);
    states.push(graph.inputs.clone());
    for (l, conv) in params.convs[source].iter().enumerate() {
        let n_out = graph.hop_le[layers - 1 - l];
        let (out, trace) = conv_forward(conv, &states[l], n_out, &graph, &embeddings);
        states.push(out);
        traces.push(trace);
    }
    let decoder = decoder_forward(&params.decoder, &states[layers][0]);
    SourcePass {
        graph,
        embeddings,
        states,
        layers: traces,
        decoder,
    }
}

fn tanh_grad(upstream: &[f64], activated: &[f64]) -> Vec<f64> {
    upstream
        .iter()
        .zip(activated)
        .map(|(g, a)| g * (1.0 - a * a))
        .collect()
}

impl SourcePass {
    fn backward(&self, params: &ModelParams, source: usize, dy: f64, grads: &mut ModelParams) {
        let h = params.hidden_dim();
        let dec = &self.decoder;
        // Decoder.
        let mut da2 = vec![0.0; h];
        params.decoder[2].backward2(&dec.a2, &[], &[dy], &mut grads.decoder[2], &mut da2, &mut []);
        let dz2 = tanh_grad(&da2, &dec.a2);
        let mut da1 = vec![0.0; h];
        params.decoder[1].backward2(&dec.a1, &[], &dz2, &mut grads.decoder[1], &mut da1, &mut []);
        let dz1 = tanh_grad(&da1, &dec.a1);
        let layers = params.num_layers();
        let mut d_top = vec![0.0; h];
        params.decoder[0].backward2(
            &self.states[layers][0],
            &[],
            &dz1,
            &mut grads.decoder[0],
            &mut d_top,
            &mut [],
        );

        let graph = &self.graph;
        let mut d_emb: Vec<Vec<f64>> = vec![vec![0.0; h]; self.embeddings.len()];
        let mut d_states: Vec<Vec<f64>> = vec![vec![0.0; h]; self.states[layers].len()];
        d_states[0] = d_top;
        for l in (0..layers).rev() {
            let conv = &params.convs[source][l];
            let gconv = &mut grads.convs[source][l];
            let inputs = &self.states[l];
            let outputs = &self.states[l + 1];
            let trace = &self.layers[l];
            let width = conv.input_dim();
            let mut d_in: Vec<Vec<f64>> = vec![vec![0.0; width]; inputs.len()];
            for o in 0..outputs.len() {
                let dz = tanh_grad(&d_states[o], &outputs[o]);
                let mut d_agg = vec![0.0; h];
                conv.update
                    .backward2(&inputs[o], &trace.agg[o], &dz, &mut gconv.update, &mut d_in[o], &mut d_agg);
                let ins = &graph.in_edges[o];
                if ins.is_empty() {
                    continue;
                }
                let inv = 1.0 / ins.len() as f64;
                d_agg.iter_mut().for_each(|g| *g *= inv);
                for (q, &e) in ins.iter().enumerate() {
                    let src = graph.edges[e].source;
                    let dzm = tanh_grad(&d_agg, &trace.messages[o][q]);
                    let mut d_src = vec![0.0; width];
                    conv.message.backward2(
                        &inputs[src],
                        &self.embeddings[e],
                        &dzm,
                        &mut gconv.message,
                        &mut d_src,
                        &mut d_emb[e],
                    );
                    for (a, b) in d_in[src].iter_mut().zip(&d_src) {
                        *a += b;
                    }
                }
            }
            d_states = d_in;
        }

        for (e, edge) in graph.edges.iter().enumerate() {
            if d_emb[e].iter().all(|g| *g == 0.0) {
                continue;
            }
            let dz = tanh_grad(&d_emb[e], &self.embeddings[e]);
            let g = &edge.geometry;
            let mut unused = [0.0; 2];
            params
                .encoder
                .backward2(&[g.distance, g.angle], &[], &dz, &mut grads.encoder, &mut unused, &mut []);
        }
    }
}

/// Runs one graph convolution layer of `source` over every node of `graph`.
pub fn graph_conv_layer(
    params: &ModelParams,
    source: usize,
    layer: usize,
    node_features: &[Vec<f64>],
    graph: &SpatialKnnGraph,
) -> Result<Vec<Vec<f64>>> {
    let conv = params
        .convs
        .get(source)
        .and_then(|c| c.get(layer))
        .ok_or_else(|| DmspError::Dimension(format!("no conv block ({source}, {layer})")))?;
    if node_features.len() != graph.node_count() {
        return Err(DmspError::Dimension(format!(
            "{} feature rows for {} nodes",
            node_features.len(),
            graph.node_count()
        )));
    }
    if let Some(row) = node_features.iter().find(|r| r.len() != conv.input_dim()) {
        return Err(DmspError::Dimension(format!(
            "node feature width {} but layer expects {}",
            row.len(),
            conv.input_dim()
        )));
    }
    let local = LocalGraph::from_full(graph, params.num_layers());
    let embeddings: Vec<Vec<f64>> = local
        .edges
        .iter()
        .map(|e| encode(&params.encoder, &e.geometry))
        .collect();
    Ok(conv_forward(conv, node_features, graph.node_count(), &local, &embeddings).0)
}

/// Prediction location plus what is known about it.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub location: GeoPoint,
    pub timestamp: i64,
    /// Features of the query for the source it belongs to, if any.
    pub own_features: Option<(usize, &'a [f64])>,
    /// Dataset sample the query stands in for; it is left out of the graph.
    pub exclude: Option<(usize, usize)>,
}

impl<'a> Query<'a> {
    /// A bare location without features.
    pub fn at(location: GeoPoint, timestamp: i64) -> Self {
        Self {
            location,
            timestamp,
            own_features: None,
            exclude: None,
        }
    }

    /// The hidden sample of a masked store.
    pub fn masked<S: ObservationStore + ?Sized>(store: &'a S) -> Option<Self> {
        let (source, index) = store.masked()?;
        Some(Self {
            location: store.location(source, index),
            timestamp: store.timestamp(source, index),
            own_features: Some((source, store.features(source, index))),
            exclude: Some((source, index)),
        })
    }

    /// A sample of `source` that is not part of the context dataset.
    pub fn external(source: usize, features: &'a [f64], location: GeoPoint, timestamp: i64) -> Self {
        Self {
            location,
            timestamp,
            own_features: Some((source, features)),
            exclude: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Slice {
    indices: Vec<usize>,
    grid: GridIndex,
}

/// Per-source, per-timestamp spatial indexes over a context dataset.
#[derive(Debug, Clone)]
pub struct ContextIndex {
    slices: Vec<BTreeMap<i64, Slice>>,
}

impl ContextIndex {
    pub fn build<S: ObservationStore + ?Sized>(store: &S) -> Result<Self> {
        let mut slices = Vec::with_capacity(store.source_count());
        for s in 0..store.source_count() {
            let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
            for j in 0..store.sample_count(s) {
                groups.entry(store.timestamp(s, j)).or_default().push(j);
            }
            let mut per_ts = BTreeMap::new();
            for (t, indices) in groups {
                let points = indices.iter().map(|&j| store.location(s, j)).collect();
                per_ts.insert(
                    t,
                    Slice {
                        grid: GridIndex::new(points)?,
                        indices,
                    },
                );
            }
            slices.push(per_ts);
        }
        Ok(Self { slices })
    }

    pub fn source_count(&self) -> usize {
        self.slices.len()
    }
}

fn neighborhood<S: ObservationStore + ?Sized>(
    store: &S,
    slice: &Slice,
    source: usize,
    query: &Query<'_>,
    k: usize,
    layers: usize,
) -> Option<LocalGraph> {
    let excluded = match query.exclude {
        Some((s, j)) if s == source => slice.indices.binary_search(&j).ok(),
        _ => None,
    };
    let members = slice.indices.len() - usize::from(excluded.is_some());
    if k == 0 || members < k {
        return None;
    }
    let points = slice.grid.points();
    // Node ids: 0 is the query, `r + 1` is slice position `r`.
    let location = |g: usize| if g == 0 { query.location } else { points[g - 1] };
    let knn = |g: usize| -> Vec<usize> {
        let origin = location(g);
        let own = g.checked_sub(1);
        let mut cand: Vec<(f64, usize)> = slice
            .grid
            .nearest(origin, k, |r| Some(r) == own || Some(r) == excluded)
            .into_iter()
            .map(|(d, r)| (d, r + 1))
            .collect();
        if g != 0 {
            cand.push((origin.distance_sq(&query.location), 0));
            cand.sort_by(neighbor_order);
            cand.truncate(k);
        }
        cand.into_iter().map(|(_, id)| id).collect()
    };

    let mut ids = vec![0usize];
    let mut local_of: HashMap<usize, usize> = HashMap::from([(0, 0)]);
    let mut neighbors: Vec<Option<Vec<usize>>> = vec![None];
    let mut hop_le = Vec::with_capacity(layers + 1);
    let mut start = 0;
    for hop in 0..=layers {
        let end = ids.len();
        hop_le.push(end);
        if hop == layers {
            break;
        }
        for local in start..end {
            let ns = knn(ids[local]);
            for &g in &ns {
                local_of.entry(g).or_insert_with(|| {
                    ids.push(g);
                    neighbors.push(None);
                    ids.len() - 1
                });
            }
            neighbors[local] = Some(ns);
        }
        start = end;
    }
    if k >= 2 {
        for local in 0..ids.len() {
            if neighbors[local].is_none() {
                neighbors[local] = Some(knn(ids[local]));
            }
        }
    }

    let mut edges = Vec::new();
    let mut in_edges = vec![Vec::new(); ids.len()];
    for o in 0..hop_le[layers - 1] {
        let target_loc = location(ids[o]);
        for &g in neighbors[o].as_ref().expect("inner nodes have neighbor lists") {
            let src = local_of[&g];
            let origin = location(g);
            let angle = match &neighbors[src] {
                Some(ns) => angle_from_neighbors(
                    k,
                    origin,
                    target_loc,
                    ns.iter().filter(|&&n| n != ids[o]).map(|&n| location(n)),
                ),
                None => 0.0,
            };
            in_edges[o].push(edges.len());
            edges.push(Edge {
                source: src,
                target: o,
                geometry: EdgeGeometry {
                    distance: origin.distance(&target_loc),
                    angle,
                },
            });
        }
    }

    let own = match query.own_features {
        Some((s, f)) if s == source => Some(f),
        _ => None,
    };
    let inputs = ids
        .iter()
        .map(|&g| {
            if g == 0 {
                query_inputs(store.feature_dim(source), own)
            } else {
                let j = slice.indices[g - 1];
                node_inputs(store.features(source, j), store.observation(source, j))
            }
        })
        .collect();
    Some(LocalGraph {
        inputs,
        edges,
        in_edges,
        hop_le,
    })
}

/// A forward pass with everything needed to backpropagate.
pub struct ForwardTrace {
    passes: Vec<Option<SourcePass>>,
    prediction: SourcePrediction,
}

impl ForwardTrace {
    pub fn prediction(&self) -> &SourcePrediction {
        &self.prediction
    }

    /// Adds `d_fused * d(fused)/d(params)` into `grads`, covering every
    /// network weight and the fidelity logits through the fusion weights.
    pub fn backward(&self, params: &ModelParams, d_fused: f64, grads: &mut ModelParams) {
        let pred = &self.prediction;
        let logit_grads = grads.fidelity.as_mut_slice();
        for (s, y) in pred.per_source.iter().enumerate() {
            if let Some(y) = y {
                logit_grads[s] += d_fused * pred.weights[s] * (y - pred.fused);
            }
        }
        for (s, pass) in self.passes.iter().enumerate() {
            if let Some(pass) = pass {
                let dy = d_fused * pred.weights[s];
                if dy != 0.0 {
                    pass.backward(params, s, dy, grads);
                }
            }
        }
    }
}

fn fuse(params: &ModelParams, per_source: Vec<Option<f64>>) -> Result<SourcePrediction> {
    let usable: Vec<usize> = (0..per_source.len())
        .filter(|&s| per_source[s].is_some())
        .collect();
    if usable.is_empty() {
        return Err(DmspError::NoUsableSource);
    }
    let logits = params.fidelity.as_slice();
    let sub: Vec<f64> = usable.iter().map(|&s| logits[s]).collect();
    let mut weights = vec![0.0; per_source.len()];
    for (&s, w) in usable.iter().zip(softmax(&sub)) {
        weights[s] = w;
    }
    let fused = usable
        .iter()
        .map(|&s| weights[s] * per_source[s].expect("usable"))
        .sum();
    Ok(SourcePrediction {
        partial: usable.len() < per_source.len(),
        per_source,
        weights,
        fused,
    })
}

fn check_store<S: ObservationStore + ?Sized>(
    params: &ModelParams,
    store: &S,
    index: &ContextIndex,
    query: &Query<'_>,
) -> Result<()> {
    if store.source_count() != params.source_count() || index.source_count() != params.source_count()
    {
        return Err(DmspError::Dimension(format!(
            "model has {} sources, data has {}",
            params.source_count(),
            store.source_count()
        )));
    }
    for s in 0..store.source_count() {
        if store.feature_dim(s) != params.feature_dims()[s] {
            return Err(DmspError::Dimension(format!(
                "source {s} has {} features, model expects {}",
                store.feature_dim(s),
                params.feature_dims()[s]
            )));
        }
    }
    if let Some((s, f)) = query.own_features {
        if s >= params.source_count() || f.len() != params.feature_dims()[s] {
            return Err(DmspError::Dimension(format!(
                "query features of width {} for source {s}",
                f.len()
            )));
        }
    }
    if !query.location.is_finite() {
        return Err(DmspError::InvalidGeometry("non-finite query location".into()));
    }
    Ok(())
}

/// Forward pass keeping intermediate values for [`ForwardTrace::backward`].
pub fn forward_traced<S: ObservationStore + ?Sized>(
    params: &ModelParams,
    store: &S,
    index: &ContextIndex,
    query: &Query<'_>,
    k: usize,
) -> Result<ForwardTrace> {
    check_store(params, store, index, query)?;
    let mut passes = Vec::with_capacity(params.source_count());
    for s in 0..params.source_count() {
        let pass = if params.enabled_sources()[s] {
            index.slices[s]
                .get(&query.timestamp)
                .and_then(|slice| neighborhood(store, slice, s, query, k, params.num_layers()))
                .map(|g| source_forward(params, s, g))
        } else {
            None
        };
        passes.push(pass);
    }
    let per_source = passes
        .iter()
        .map(|p| p.as_ref().map(|p| p.decoder.y))
        .collect();
    let prediction = fuse(params, per_source)?;
    Ok(ForwardTrace { passes, prediction })
}

/// Predicts at `query` from the context `store`, indexed by `index`.
pub fn forward<S: ObservationStore + ?Sized>(
    params: &ModelParams,
    store: &S,
    index: &ContextIndex,
    query: &Query<'_>,
    k: usize,
) -> Result<SourcePrediction> {
    Ok(forward_traced(params, store, index, query, k)?.prediction)
}

/// Predicts at an arbitrary location, building the spatial index on the fly.
pub fn predict_at<S: ObservationStore + ?Sized>(
    params: &ModelParams,
    store: &S,
    location: GeoPoint,
    timestamp: i64,
    k: usize,
) -> Result<SourcePrediction> {
    let index = ContextIndex::build(store)?;
    forward(params, store, &index, &Query::at(location, timestamp), k)
}

/// Runs every source over a fully materialized KNN graph (target at node 0);
/// `None` marks an unusable source.
pub fn forward_on_graphs(
    params: &ModelParams,
    graphs: &[Option<SpatialKnnGraph>],
) -> Result<SourcePrediction> {
    if graphs.len() != params.source_count() {
        return Err(DmspError::Dimension(format!(
            "{} graphs for {} sources",
            graphs.len(),
            params.source_count()
        )));
    }
    let mut per_source = Vec::with_capacity(graphs.len());
    for (s, g) in graphs.iter().enumerate() {
        let y = match g {
            Some(g) if params.enabled_sources()[s] => {
                let width = params.convs[s][0].input_dim();
                if g.nodes().iter().any(|n| n.attributes.len() != width) {
                    return Err(DmspError::Dimension(format!(
                        "source {s} node attributes must have width {width}"
                    )));
                }
                let local = LocalGraph::from_full(g, params.num_layers());
                Some(source_forward(params, s, local).decoder.y)
            }
            _ => None,
        };
        per_source.push(y);
    }
    fuse(params, per_source)
}
