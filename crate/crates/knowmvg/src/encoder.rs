//! Knowledge encoder: per-node text embeddings, symmetric-normalized GCN
//! propagation, and cosine top-k selection of knowledge prompts.
//!
//! Propagation uses Â = D^{-1/2}(A + I)D^{-1/2} with entries computed as
//! a_ij / sqrt(d_i · d_j) — pure integer degrees under the square root — and
//! the Â·H product runs through the order-canonical matmul kernel. Together
//! these make the whole forward bit-exactly equivariant under node
//! permutation, not just equivariant up to rounding.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{normalize_text, KnowledgeGraph};
use crate::numerics::kernels::{matmul, matmul_sorted};
use crate::numerics::rng::fnv1a64;
use crate::numerics::{Graph, Real, Tensor, Var};

/// Where a set of node embeddings sits in the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Initial,
    Propagated,
}

#[derive(Clone, Debug)]
pub struct NodeEmbeddings<T: Real> {
    pub matrix: Tensor<T>,
    pub stage: Stage,
}

pub trait TextEmbedder<T: Real> {
    fn dim(&self) -> usize;
    /// Deterministic embedding of arbitrary text into `dim()` reals.
    fn embed(&self, text: &str) -> Vec<T>;
}

/// Seeded feature-hashing bag of tokens: each normalized token lands in one
/// of `dim` buckets with a ±1 sign, counts are L2-normalized. No model
/// weights, no downloads, bit-reproducible from (seed, text) alone.
#[derive(Clone, Copy, Debug)]
pub struct HashedBagEmbedder {
    dim: usize,
    seed: u64,
}

/// splitmix64 finalizer — avalanches the token hash so bucket index and sign
/// bit are decorrelated.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl HashedBagEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedder dimension must be positive");
        HashedBagEmbedder { dim, seed }
    }
}

impl<T: Real> TextEmbedder<T> for HashedBagEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<T> {
        let mut v = vec![T::zero(); self.dim];
        for token in normalize_text(text).split_whitespace() {
            let h = mix(fnv1a64(token.as_bytes()) ^ self.seed);
            let idx = (h % self.dim as u64) as usize;
            if h >> 63 == 1 {
                v[idx] -= T::one();
            } else {
                v[idx] += T::one();
            }
        }
        let norm = v.iter().map(|&x| x * x).fold(T::zero(), |a, b| a + b).sqrt();
        if norm > T::zero() {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

pub fn embed_nodes<T: Real>(
    kg: &KnowledgeGraph,
    embedder: &dyn TextEmbedder<T>,
) -> Result<NodeEmbeddings<T>> {
    let d = embedder.dim();
    let mut data = Vec::with_capacity(kg.node_count() * d);
    for node in kg.nodes() {
        let row = embedder.embed(&node.text);
        if row.len() != d {
            return Err(Error::Config(format!(
                "embedder returned {} values for a {d}-dim configuration",
                row.len()
            )));
        }
        data.extend(row);
    }
    Ok(NodeEmbeddings {
        matrix: Tensor::new(kg.node_count(), d, data)?,
        stage: Stage::Initial,
    })
}

#[derive(Clone, Debug)]
pub struct GcnLayer<T: Real> {
    pub w: Tensor<T>,
    /// 1 × d_out bias row.
    pub b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct GcnWeights<T: Real> {
    pub layers: Vec<GcnLayer<T>>,
}

impl<T: Real> GcnWeights<T> {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Square identity weights, zero bias — useful as a propagation-only GCN.
    pub fn identity(dim: usize, depth: usize) -> Self {
        let mut w = Tensor::zeros(dim, dim);
        for i in 0..dim {
            w[(i, i)] = T::one();
        }
        let layers = (0..depth)
            .map(|_| GcnLayer {
                w: w.clone(),
                b: Tensor::zeros(1, dim),
            })
            .collect();
        GcnWeights { layers }
    }

    pub fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let layers = dims
            .windows(2)
            .map(|d| GcnLayer {
                w: Tensor::randn(d[0], d[1], 1.0 / (d[0] as f64).sqrt(), rng),
                b: Tensor::zeros(1, d[1]),
            })
            .collect();
        GcnWeights { layers }
    }

    pub fn validate(&self, d_in: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("GCN must have at least one layer"));
        }
        let mut prev = d_in;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.w.rows() != prev {
                return Err(Error::contract(format!(
                    "layer {i} expects {} inputs, previous width is {prev}",
                    layer.w.rows()
                )));
            }
            if layer.b.rows() != 1 || layer.b.cols() != layer.w.cols() {
                return Err(Error::contract(format!(
                    "layer {i} bias must be 1x{}",
                    layer.w.cols()
                )));
            }
            if !layer.w.all_finite() || !layer.b.all_finite() {
                return Err(Error::contract(format!("layer {i} has non-finite entries")));
            }
            prev = layer.w.cols();
        }
        Ok(())
    }
}

/// Â = D^{-1/2}(A + I)D^{-1/2} for a binary adjacency with zero diagonal.
/// Each entry is 1/sqrt(d_i·d_j), with d_i the integer-valued degree of
/// (A + I), so permuting nodes permutes entries bit-exactly.
pub fn normalized_adjacency<T: Real>(adj: &Tensor<T>) -> Tensor<T> {
    assert_eq!(adj.rows(), adj.cols(), "adjacency must be square");
    let n = adj.rows();
    let mut degree = vec![T::zero(); n];
    for i in 0..n {
        let mut d = T::one(); // the self-loop
        for j in 0..n {
            if adj[(i, j)] != T::zero() {
                assert!(i != j, "adjacency must have a zero diagonal");
                d += T::one();
            }
        }
        degree[i] = d;
    }
    let mut a_hat = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j || adj[(i, j)] != T::zero() {
                a_hat[(i, j)] = T::one() / (degree[i] * degree[j]).sqrt();
            }
        }
    }
    a_hat
}

/// Propagate embeddings through the GCN: ReLU between layers, linear final
/// layer. A zero-node graph propagates to an empty matrix.
pub fn gcn_forward<T: Real>(
    embeds: &NodeEmbeddings<T>,
    adjacency: &Tensor<T>,
    weights: &GcnWeights<T>,
) -> Result<NodeEmbeddings<T>> {
    if embeds.stage != Stage::Initial {
        return Err(Error::contract("gcn_forward expects initial-stage embeddings"));
    }
    if adjacency.rows() != embeds.matrix.rows() || adjacency.cols() != embeds.matrix.rows() {
        return Err(Error::contract(format!(
            "adjacency is {}x{}, embeddings have {} rows",
            adjacency.rows(), adjacency.cols(), embeds.matrix.rows()
        )));
    }
    weights.validate(embeds.matrix.cols())?;
    if embeds.matrix.rows() == 0 {
        let out_dim = weights.layers.last().map(|l| l.w.cols()).unwrap_or(0);
        return Ok(NodeEmbeddings {
            matrix: Tensor::zeros(0, out_dim),
            stage: Stage::Propagated,
        });
    }
    let a_hat = normalized_adjacency(adjacency);
    let depth = weights.depth();
    let mut h = embeds.matrix.clone();
    for (li, layer) in weights.layers.iter().enumerate() {
        h = matmul(&matmul_sorted(&a_hat, &h), &layer.w);
        for i in 0..h.rows() {
            for j in 0..h.cols() {
                h[(i, j)] += layer.b[(0, j)];
            }
        }
        if li + 1 < depth {
            h = h.map(|x| if x > T::zero() { x } else { T::zero() });
        }
    }
    if !h.all_finite() {
        return Err(Error::contract("GCN produced non-finite embeddings"));
    }
    Ok(NodeEmbeddings {
        matrix: h,
        stage: Stage::Propagated,
    })
}

/// Tape-based twin of [`gcn_forward`] for training: same kernels, gradients
/// flow to the layer weights and the input embeddings.
pub fn gcn_forward_graph<T: Real>(
    g: &mut Graph<T>,
    a_hat: Var,
    h0: Var,
    layers: &[(Var, Var)],
) -> Var {
    let depth = layers.len();
    let mut h = h0;
    for (li, &(w, b)) in layers.iter().enumerate() {
        h = g.matmul_sorted(a_hat, h);
        h = g.matmul(h, w);
        h = g.add_row(h, b);
        if li + 1 < depth {
            h = g.relu(h);
        }
    }
    h
}

/// Cosine similarity, defined as exactly 0 when either vector has zero norm.
/// Returns (value, degenerate-flag).
pub fn score_similarity<T: Real>(node_embed: &[T], query: &[T]) -> (T, bool) {
    assert_eq!(node_embed.len(), query.len(), "vector lengths must match");
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&a, &b) in node_embed.iter().zip(query) {
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == T::zero() || nb == T::zero() {
        return (T::zero(), true);
    }
    let c = dot / (na.sqrt() * nb.sqrt());
    // guard against |c| creeping past 1 by rounding
    ((-T::one()).max(T::one().min(c)), false)
}

#[derive(Clone, Debug)]
pub struct KnowledgePrompts<T: Real> {
    /// k × d matrix of selected propagated embeddings.
    pub embeddings: Tensor<T>,
    pub source_indices: Vec<usize>,
    /// Non-increasing cosine scores, each in [-1, 1].
    pub scores: Vec<T>,
}

impl<T: Real> KnowledgePrompts<T> {
    pub fn effective_k(&self) -> usize {
        self.source_indices.len()
    }

    pub fn empty(dim: usize) -> Self {
        KnowledgePrompts {
            embeddings: Tensor::zeros(0, dim),
            source_indices: Vec::new(),
            scores: Vec::new(),
        }
    }
}

/// Pick the k nodes most similar to the query; ties prefer the lower index,
/// and k is clamped to the node count.
pub fn select_topk<T: Real>(
    embeds: &NodeEmbeddings<T>,
    query: &[T],
    k: usize,
) -> KnowledgePrompts<T> {
    assert_eq!(
        embeds.stage,
        Stage::Propagated,
        "select_topk expects propagated embeddings"
    );
    let n = embeds.matrix.rows();
    let d = embeds.matrix.cols();
    let mut scored: Vec<(usize, T)> = (0..n)
        .map(|i| (i, score_similarity(embeds.matrix.row(i), query).0))
        .collect();
    scored.sort_by(|a, b| T::total_order(&b.1, &a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k.min(n));

    let mut data = Vec::with_capacity(scored.len() * d);
    for &(i, _) in &scored {
        data.extend_from_slice(embeds.matrix.row(i));
    }
    KnowledgePrompts {
        embeddings: Tensor::new(scored.len(), d, data).expect("rows copied verbatim"),
        source_indices: scored.iter().map(|&(i, _)| i).collect(),
        scores: scored.iter().map(|&(_, s)| s).collect(),
    }
}
