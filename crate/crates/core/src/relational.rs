//! Collaborative-filtering embeddings over bipartite graphs.
//!
//! Linear neighbor aggregation with symmetric degree normalization, layer
//! averaging, and a pairwise-ranking training loop. Item-side aggregated
//! embeddings are exported as the user-level and bundle-level relational
//! feature tables.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::linalg::{dot, Mat};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{substream, Rng};

#[derive(Debug, Clone)]
pub struct BipartiteGraph {
    pub left_count: usize,
    pub right_count: usize,
    pub edges: Vec<(u32, u32)>,
    left_adj: Vec<Vec<u32>>,
    right_adj: Vec<Vec<u32>>,
}

impl BipartiteGraph {
    pub fn from_edges(
        left_count: usize,
        right_count: usize,
        edges: Vec<(u32, u32)>,
    ) -> Result<Self> {
        let mut left_adj = vec![Vec::new(); left_count];
        let mut right_adj = vec![Vec::new(); right_count];
        let mut seen = std::collections::BTreeSet::new();
        for &(l, r) in &edges {
            if l as usize >= left_count || r as usize >= right_count {
                return Err(Error::Validation(format!(
                    "edge ({l}, {r}) out of range for {left_count}x{right_count} graph"
                )));
            }
            if !seen.insert((l, r)) {
                return Err(Error::Validation(format!("duplicate edge ({l}, {r})")));
            }
            left_adj[l as usize].push(r);
            right_adj[r as usize].push(l);
        }
        Ok(BipartiteGraph {
            left_count,
            right_count,
            edges,
            left_adj,
            right_adj,
        })
    }

    pub fn left_degree(&self, n: usize) -> usize {
        self.left_adj[n].len()
    }

    pub fn right_degree(&self, n: usize) -> usize {
        self.right_adj[n].len()
    }

    pub fn neighbors_of_left(&self, n: usize) -> &[u32] {
        &self.left_adj[n]
    }
}

/// Layer-0 embeddings for both sides plus the propagation depth used when
/// exporting features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub left_emb: Mat,
    pub right_emb: Mat,
    pub k_layers: usize,
    pub include_layer0: bool,
    pub log: TrainLog,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub init_sigma: f64,
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationalHyper {
    pub dim: usize,
    pub k_layers: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub include_layer0: bool,
    pub init_sigma: f64,
}

impl Default for RelationalHyper {
    fn default() -> Self {
        RelationalHyper {
            dim: 64,
            k_layers: 2,
            learning_rate: 1e-2,
            l2: 1e-5,
            epochs: 30,
            batch_size: 256,
            seed: 0,
            include_layer0: false,
            init_sigma: 0.1,
        }
    }
}

/// One propagation sweep: every node receives the degree-normalized sum of
/// its neighbors' previous-layer embeddings. Isolated nodes go to zero.
fn propagate_once(graph: &BipartiteGraph, left: &Mat, right: &Mat) -> (Mat, Mat) {
    let d = left.cols;
    let mut new_left = Mat::zeros(graph.left_count, d);
    let mut new_right = Mat::zeros(graph.right_count, d);
    for l in 0..graph.left_count {
        let deg_l = graph.left_adj[l].len();
        if deg_l == 0 {
            continue;
        }
        let row = new_left.row_mut(l);
        for &r in &graph.left_adj[l] {
            let deg_r = graph.right_adj[r as usize].len();
            let w = 1.0 / ((deg_l as f64).sqrt() * (deg_r as f64).sqrt());
            crate::linalg::axpy(row, w, right.row(r as usize));
        }
    }
    for r in 0..graph.right_count {
        let deg_r = graph.right_adj[r].len();
        if deg_r == 0 {
            continue;
        }
        let row = new_right.row_mut(r);
        for &l in &graph.right_adj[r] {
            let deg_l = graph.left_adj[l as usize].len();
            let w = 1.0 / ((deg_r as f64).sqrt() * (deg_l as f64).sqrt());
            crate::linalg::axpy(row, w, left.row(l as usize));
        }
    }
    (new_left, new_right)
}

/// Layers 1..=K of message passing.
pub fn propagate(
    graph: &BipartiteGraph,
    left0: &Mat,
    right0: &Mat,
    k: usize,
) -> Result<Vec<(Mat, Mat)>> {
    if k == 0 {
        return Err(Error::Config("propagation needs K >= 1".into()));
    }
    left0.check_shape(graph.left_count, left0.cols, "left embeddings")?;
    right0.check_shape(graph.right_count, right0.cols, "right embeddings")?;
    if left0.cols != right0.cols {
        return Err(Error::Shape(format!(
            "left dim {} != right dim {}",
            left0.cols, right0.cols
        )));
    }
    let mut layers = Vec::with_capacity(k);
    let (mut l, mut r) = propagate_once(graph, left0, right0);
    layers.push((l.clone(), r.clone()));
    for _ in 1..k {
        let (nl, nr) = propagate_once(graph, &l, &r);
        layers.push((nl.clone(), nr.clone()));
        l = nl;
        r = nr;
    }
    Ok(layers)
}

/// Mean of the given layer embeddings.
pub fn aggregate_layers(layers: &[&Mat]) -> Result<Mat> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Config("aggregate_layers needs at least one layer".into()))?;
    let mut out = Mat::zeros(first.rows, first.cols);
    for layer in layers {
        out.add_assign(layer);
    }
    out.scale(1.0 / layers.len() as f64);
    Ok(out)
}

/// Aggregated (layer-averaged) embeddings for both sides, honoring the
/// include_layer0 variant.
pub fn aggregated_embeddings(
    graph: &BipartiteGraph,
    left0: &Mat,
    right0: &Mat,
    k: usize,
    include_layer0: bool,
) -> Result<(Mat, Mat)> {
    let layers = propagate(graph, left0, right0, k)?;
    let mut lefts: Vec<&Mat> = Vec::new();
    let mut rights: Vec<&Mat> = Vec::new();
    if include_layer0 {
        lefts.push(left0);
        rights.push(right0);
    }
    for (l, r) in &layers {
        lefts.push(l);
        rights.push(r);
    }
    Ok((aggregate_layers(&lefts)?, aggregate_layers(&rights)?))
}

/// Adjoint of `aggregated_embeddings` with respect to the layer-0
/// embeddings. The normalized adjacency is symmetric, so the adjoint of one
/// propagation sweep is the sweep itself.
fn aggregate_backward(
    graph: &BipartiteGraph,
    grad_left: &Mat,
    grad_right: &Mat,
    k: usize,
    include_layer0: bool,
) -> (Mat, Mat) {
    let denom = if include_layer0 { k + 1 } else { k } as f64;
    let mut acc_left = if include_layer0 {
        grad_left.clone()
    } else {
        grad_left.zeros_like()
    };
    let mut acc_right = if include_layer0 {
        grad_right.clone()
    } else {
        grad_right.zeros_like()
    };
    let mut term = (grad_left.clone(), grad_right.clone());
    for _ in 0..k {
        term = propagate_once(graph, &term.0, &term.1);
        acc_left.add_assign(&term.0);
        acc_right.add_assign(&term.1);
    }
    acc_left.scale(1.0 / denom);
    acc_right.scale(1.0 / denom);
    (acc_left, acc_right)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pairwise ranking loss over explicit (left, pos, neg) triples, plus an
/// L2 penalty on the layer-0 embeddings. Returns the loss and its exact
/// gradients; the trainer and the finite-difference tests share this path.
pub fn bpr_loss_and_grad(
    graph: &BipartiteGraph,
    left0: &Mat,
    right0: &Mat,
    k: usize,
    include_layer0: bool,
    l2: f64,
    triples: &[(u32, u32, u32)],
) -> Result<(f64, Mat, Mat)> {
    if triples.is_empty() {
        return Err(Error::Sampling("no triples".into()));
    }
    let (agg_left, agg_right) =
        aggregated_embeddings(graph, left0, right0, k, include_layer0)?;
    let inv_b = 1.0 / triples.len() as f64;
    let mut loss = 0.0;
    let mut g_left = agg_left.zeros_like();
    let mut g_right = agg_right.zeros_like();
    for &(u, i, j) in triples {
        let zu = agg_left.row(u as usize);
        let zi = agg_right.row(i as usize);
        let zj = agg_right.row(j as usize);
        let x = dot(zu, zi) - dot(zu, zj);
        loss += -sigmoid(x).ln();
        // d(-ln sigma(x))/dx = sigma(x) - 1
        let coef = (sigmoid(x) - 1.0) * inv_b;
        for c in 0..agg_left.cols {
            g_left.data[u as usize * g_left.cols + c] += coef * (zi[c] - zj[c]);
            g_right.data[i as usize * g_right.cols + c] += coef * zu[c];
            g_right.data[j as usize * g_right.cols + c] -= coef * zu[c];
        }
    }
    loss *= inv_b;
    let (mut d_left0, mut d_right0) =
        aggregate_backward(graph, &g_left, &g_right, k, include_layer0);
    if l2 > 0.0 {
        let squared: f64 = left0.data.iter().map(|v| v * v).sum::<f64>()
            + right0.data.iter().map(|v| v * v).sum::<f64>();
        loss += 0.5 * l2 * squared;
        for (d, p) in d_left0.data.iter_mut().zip(left0.data.iter()) {
            *d += l2 * p;
        }
        for (d, p) in d_right0.data.iter_mut().zip(right0.data.iter()) {
            *d += l2 * p;
        }
    }
    Ok((loss, d_left0, d_right0))
}

fn sample_negative(graph: &BipartiteGraph, left: u32, rng: &mut Rng) -> u32 {
    let neighbors = &graph.left_adj[left as usize];
    loop {
        let cand = rng.gen_range(0..graph.right_count) as u32;
        if !neighbors.contains(&cand) {
            return cand;
        }
    }
}

pub fn train_relational(graph: &BipartiteGraph, hyper: &RelationalHyper) -> Result<EmbeddingTable> {
    if graph.edges.is_empty() {
        return Err(Error::Config("graph has no edges".into()));
    }
    if graph.right_count < 2 {
        return Err(Error::Config("need at least two right nodes".into()));
    }
    let mut rng = substream(hyper.seed, "relational");
    let mut left0 = Mat::randn(graph.left_count, hyper.dim, hyper.init_sigma, &mut rng);
    let mut right0 = Mat::randn(graph.right_count, hyper.dim, hyper.init_sigma, &mut rng);
    let mut adam = Adam::for_mats(AdamConfig::default(), &[&left0, &right0]);
    let mut log = TrainLog {
        init_sigma: hyper.init_sigma,
        epoch_loss: Vec::new(),
    };

    let mut step = 0usize;
    for _epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..graph.edges.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let triples: Vec<(u32, u32, u32)> = chunk
                .iter()
                .map(|&e| {
                    let (u, i) = graph.edges[e];
                    (u, i, sample_negative(graph, u, &mut rng))
                })
                .collect();
            let (loss, g_left, g_right) = bpr_loss_and_grad(
                graph,
                &left0,
                &right0,
                hyper.k_layers,
                hyper.include_layer0,
                hyper.l2,
                &triples,
            )?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("pairwise ranking loss became {loss}"),
                });
            }
            adam.step(
                &mut [&mut left0, &mut right0],
                &[&g_left, &g_right],
                hyper.learning_rate,
            );
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        log.epoch_loss.push(epoch_loss / batches as f64);
    }

    Ok(EmbeddingTable {
        left_emb: left0,
        right_emb: right0,
        k_layers: hyper.k_layers,
        include_layer0: hyper.include_layer0,
        log,
    })
}

/// Aggregated item-side (right-side) features, row order = item id.
pub fn export_features(graph: &BipartiteGraph, table: &EmbeddingTable) -> Result<FeatureTable> {
    let (_, agg_right) = aggregated_embeddings(
        graph,
        &table.left_emb,
        &table.right_emb,
        table.k_layers,
        table.include_layer0,
    )?;
    Ok(FeatureTable {
        dim: agg_right.cols,
        rows: (0..agg_right.rows)
            .map(|r| agg_right.row(r).to_vec())
            .collect(),
    })
}
