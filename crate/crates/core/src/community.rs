//! Rounding a relaxed observation matrix to a partition.
//!
//! The off-diagonal entries of `H*` above a threshold form an undirected
//! weighted graph. Natural communities are grown greedily around seeds by the
//! cluster fitness `k_in / (k_in + k_out)^alpha`, where `k_in` counts every
//! internal edge twice (total in-cluster degree) and `k_out` is the weight
//! crossing the boundary. The resulting cover may overlap; overlaps are
//! resolved by node fitness gain and undersized blocks are merged until every
//! block has at least `L` members.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::partition::Partition;

pub const DEFAULT_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Width given to the heaviest edge in DOT output.
pub const MAX_PEN_WIDTH: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    weights: DMatrix<f64>,
    degree: Vec<f64>,
}

impl WeightedGraph {
    /// Keeps off-diagonal entries strictly above `threshold`; the matrix is
    /// symmetrised first.
    pub fn from_matrix(h: &DMatrix<f64>, threshold: f64) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::NotSquare {
                rows: h.nrows(),
                cols: h.ncols(),
            });
        }
        let n = h.nrows();
        let weights = DMatrix::from_fn(n, n, |i, j| {
            let w = 0.5 * (h[(i, j)] + h[(j, i)]);
            if i != j && w > threshold {
                w
            } else {
                0.0
            }
        });
        let degree = (0..n).map(|i| weights.row(i).sum()).collect();
        Ok(WeightedGraph { weights, degree })
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let w = self.weights[(i, j)];
                if w > 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }
}

fn fitness_of(k_in: f64, k_out: f64, alpha: f64) -> f64 {
    let total = k_in + k_out;
    if total <= 0.0 {
        0.0
    } else {
        k_in / total.powf(alpha)
    }
}

/// `k_in / (k_in + k_out)^alpha`; 0 for a cluster with no incident edges.
pub fn cluster_fitness(graph: &WeightedGraph, cluster: &[usize], alpha: f64) -> f64 {
    let mut member = vec![false; graph.n()];
    for &c in cluster {
        member[c] = true;
    }
    let (mut k_in, mut k_out) = (0.0, 0.0);
    for &i in cluster {
        for j in 0..graph.n() {
            let w = graph.weight(i, j);
            if member[j] {
                k_in += w;
            } else {
                k_out += w;
            }
        }
    }
    fitness_of(k_in, k_out, alpha)
}

/// Fitness gain of `v` for `cluster`: `f(C + v) - f(C)` if `v` is outside,
/// `f(C) - f(C - v)` if inside.
pub fn node_gain(graph: &WeightedGraph, cluster: &[usize], v: usize, alpha: f64) -> f64 {
    let with: Vec<usize>;
    let without: Vec<usize>;
    if cluster.contains(&v) {
        with = cluster.to_vec();
        without = cluster.iter().copied().filter(|&u| u != v).collect();
    } else {
        without = cluster.to_vec();
        with = cluster.iter().copied().chain(std::iter::once(v)).collect();
    }
    cluster_fitness(graph, &with, alpha) - cluster_fitness(graph, &without, alpha)
}

/// Incremental bookkeeping for one growing cluster.
struct Grower<'a> {
    graph: &'a WeightedGraph,
    alpha: f64,
    member: Vec<bool>,
    /// Weight from each node into the cluster.
    inward: Vec<f64>,
    k_in: f64,
    k_out: f64,
}

impl<'a> Grower<'a> {
    fn new(graph: &'a WeightedGraph, seed: usize, alpha: f64) -> Self {
        let n = graph.n();
        let mut g = Grower {
            graph,
            alpha,
            member: vec![false; n],
            inward: vec![0.0; n],
            k_in: 0.0,
            k_out: 0.0,
        };
        g.add(seed);
        g
    }

    fn fitness(&self) -> f64 {
        fitness_of(self.k_in, self.k_out, self.alpha)
    }

    fn gain_add(&self, v: usize) -> f64 {
        let a = self.inward[v];
        let d = self.graph.degree[v];
        fitness_of(self.k_in + 2.0 * a, self.k_out + d - 2.0 * a, self.alpha) - self.fitness()
    }

    fn gain_member(&self, v: usize) -> f64 {
        let a = self.inward[v];
        let d = self.graph.degree[v];
        self.fitness() - fitness_of(self.k_in - 2.0 * a, self.k_out - d + 2.0 * a, self.alpha)
    }

    fn add(&mut self, v: usize) {
        let a = self.inward[v];
        self.k_in += 2.0 * a;
        self.k_out += self.graph.degree[v] - 2.0 * a;
        self.member[v] = true;
        for j in 0..self.graph.n() {
            self.inward[j] += self.graph.weight(j, v);
        }
    }

    fn remove(&mut self, v: usize) {
        let a = self.inward[v];
        self.k_in -= 2.0 * a;
        self.k_out -= self.graph.degree[v] - 2.0 * a;
        self.member[v] = false;
        for j in 0..self.graph.n() {
            self.inward[j] -= self.graph.weight(j, v);
        }
    }

    fn members(&self) -> Vec<usize> {
        (0..self.member.len()).filter(|&i| self.member[i]).collect()
    }
}

fn grow_natural_community(graph: &WeightedGraph, seed: usize, alpha: f64) -> Vec<usize> {
    let n = graph.n();
    let mut g = Grower::new(graph, seed, alpha);
    let mut budget = 4 * n * n + 16;
    loop {
        let mut best: Option<(usize, f64)> = None;
        for v in 0..n {
            if g.member[v] || g.inward[v] <= 0.0 {
                continue;
            }
            let gain = g.gain_add(v);
            if gain > 0.0 && best.is_none_or(|(_, bg)| gain > bg) {
                best = Some((v, gain));
            }
        }
        let Some((v, _)) = best else { break };
        g.add(v);
        budget -= 1;

        loop {
            let mut worst: Option<(usize, f64)> = None;
            for u in g.members() {
                if u == seed {
                    continue;
                }
                let gain = g.gain_member(u);
                if gain < 0.0 && worst.is_none_or(|(_, wg)| gain < wg) {
                    worst = Some((u, gain));
                }
            }
            let Some((u, _)) = worst else { break };
            g.remove(u);
            budget = budget.saturating_sub(1);
        }
        if budget == 0 {
            break;
        }
    }
    g.members()
}

/// Natural-community cover of the graph; seeds are the lowest-index
/// uncovered nodes. Clusters may overlap.
pub fn detect_communities(graph: &WeightedGraph, alpha: f64) -> Vec<Vec<usize>> {
    let n = graph.n();
    let mut covered = vec![false; n];
    let mut clusters = Vec::new();
    while let Some(seed) = covered.iter().position(|c| !c) {
        let cluster = grow_natural_community(graph, seed, alpha);
        for &v in &cluster {
            covered[v] = true;
        }
        clusters.push(cluster);
    }
    clusters
}

/// Assigns every node of a cover to exactly one cluster: the one where its
/// fitness gain is largest, ties to the earlier cluster.
pub fn resolve_overlaps(
    graph: &WeightedGraph,
    cover: &[Vec<usize>],
    alpha: f64,
) -> Vec<Vec<usize>> {
    let n = graph.n();
    let mut owner = vec![usize::MAX; n];
    for v in 0..n {
        let mut best: Option<(usize, f64)> = None;
        let holders: Vec<usize> = (0..cover.len())
            .filter(|&k| cover[k].contains(&v))
            .collect();
        if holders.len() == 1 {
            owner[v] = holders[0];
            continue;
        }
        for k in holders {
            let gain = node_gain(graph, &cover[k], v, alpha);
            if best.is_none_or(|(_, bg)| gain > bg) {
                best = Some((k, gain));
            }
        }
        if let Some((k, _)) = best {
            owner[v] = k;
        }
    }
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); cover.len()];
    for (v, &k) in owner.iter().enumerate() {
        blocks[k].push(v);
    }
    blocks.retain(|b| !b.is_empty());
    blocks.sort_by_key(|b| b[0]);
    blocks
}

/// Merges undersized blocks until all have at least `min_block` members.
///
/// The smallest undersized block (earliest on ties) is merged into the block
/// it is most strongly connected to in `h`, earliest on ties.
pub fn repair_block_sizes(
    h: &DMatrix<f64>,
    mut blocks: Vec<Vec<usize>>,
    min_block: usize,
) -> Result<Vec<Vec<usize>>> {
    let n: usize = blocks.iter().map(Vec::len).sum();
    if min_block > n {
        return Err(Error::InvalidArgument(format!(
            "cannot form blocks of size >= {min_block} from {n} agents"
        )));
    }
    loop {
        blocks.sort_by_key(|b| b[0]);
        let Some(small) = (0..blocks.len())
            .filter(|&k| blocks[k].len() < min_block)
            .min_by_key(|&k| (blocks[k].len(), k))
        else {
            break;
        };
        let mut target: Option<(usize, f64)> = None;
        for k in 0..blocks.len() {
            if k == small {
                continue;
            }
            let link: f64 = blocks[small]
                .iter()
                .flat_map(|&i| blocks[k].iter().map(move |&j| (i, j)))
                .map(|(i, j)| 0.5 * (h[(i, j)] + h[(j, i)]).max(0.0))
                .sum();
            if target.is_none_or(|(_, best)| link > best) {
                target = Some((k, link));
            }
        }
        let (k, _) = target.expect("at least two blocks while one is undersized");
        let moved = std::mem::take(&mut blocks[small]);
        blocks[k].extend(moved);
        blocks[k].sort_unstable();
        blocks.remove(small);
    }
    Ok(blocks)
}

#[derive(Debug, Clone, Copy)]
pub struct RoundingOptions {
    pub min_block: usize,
    pub threshold: f64,
    pub alpha: f64,
}

impl Default for RoundingOptions {
    fn default() -> Self {
        RoundingOptions {
            min_block: 1,
            threshold: DEFAULT_THRESHOLD,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rounding {
    pub partition: Partition,
    pub graph: WeightedGraph,
    /// Raw community cover before overlap resolution.
    pub cover: Vec<Vec<usize>>,
}

/// Rounds a relaxed `H*` to a partition with all blocks of size `>= min_block`.
pub fn round_to_partition(h_star: &DMatrix<f64>, opts: &RoundingOptions) -> Result<Rounding> {
    let graph = WeightedGraph::from_matrix(h_star, opts.threshold)?;
    let n = graph.n();
    if n == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    if opts.min_block == 0 || opts.min_block > n {
        return Err(Error::InvalidArgument(format!(
            "minimum block size {} must lie in 1..={n}",
            opts.min_block
        )));
    }
    let cover = detect_communities(&graph, opts.alpha);
    let blocks = resolve_overlaps(&graph, &cover, opts.alpha);
    let blocks = repair_block_sizes(h_star, blocks, opts.min_block)?;
    let partition = Partition::from_blocks(n, &blocks)?;
    Ok(Rounding {
        partition,
        graph,
        cover,
    })
}

/// Graphviz rendering: edge `penwidth` scaled so the heaviest edge is
/// [`MAX_PEN_WIDTH`], nodes filled by block.
pub fn to_dot(graph: &WeightedGraph, partition: Option<&Partition>) -> String {
    let edges = graph.edges();
    let max_w = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    let blocks = partition.map_or(1, Partition::num_blocks).max(1);
    let mut out = String::from("graph H {\n  node [shape=circle, style=filled];\n");
    for v in 0..graph.n() {
        let k = partition.map_or(0, |p| p.block_of(v));
        let hue = k as f64 / blocks as f64;
        let _ = writeln!(
            out,
            "  {} [fillcolor=\"{:.3} 0.450 0.950\", block={}];",
            v + 1,
            hue,
            k + 1
        );
    }
    for (i, j, w) in edges {
        let width = if max_w > 0.0 {
            MAX_PEN_WIDTH * w / max_w
        } else {
            0.0
        };
        let _ = writeln!(
            out,
            "  {} -- {} [penwidth={:.3}, weight={:.6}];",
            i + 1,
            j + 1,
            width,
            w
        );
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::h_matrix;

    fn path3() -> WeightedGraph {
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        WeightedGraph::from_matrix(&m, 0.0).unwrap()
    }

    #[test]
    fn fitness_examples() {
        let g = path3();
        assert!((cluster_fitness(&g, &[0, 1], 1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(cluster_fitness(&g, &[0], 1.0), 0.0);
        assert_eq!(cluster_fitness(&g, &[0, 1, 2], 1.0), 1.0);
        let empty = WeightedGraph::from_matrix(&DMatrix::zeros(2, 2), 0.0).unwrap();
        assert_eq!(cluster_fitness(&empty, &[0], 1.0), 0.0);
    }

    #[test]
    fn incremental_gains_match_direct_computation() {
        let m = DMatrix::from_fn(6, 6, |i, j| {
            if i == j {
                0.0
            } else {
                (((i + 1) * (j + 1)) % 5) as f64 / 7.0
            }
        });
        let g = WeightedGraph::from_matrix(&m, 0.0).unwrap();
        let mut grower = Grower::new(&g, 0, 1.0);
        grower.add(3);
        let cluster = grower.members();
        for v in 0..6 {
            let direct = node_gain(&g, &cluster, v, 1.0);
            let inc = if grower.member[v] {
                grower.gain_member(v)
            } else {
                grower.gain_add(v)
            };
            assert!((direct - inc).abs() < 1e-12, "v={v}");
        }
    }

    #[test]
    fn edgeless_graph_gives_singletons() {
        let g = WeightedGraph::from_matrix(&DMatrix::identity(4, 4), 1e-6).unwrap();
        assert_eq!(
            detect_communities(&g, 1.0),
            vec![vec![0], vec![1], vec![2], vec![3]]
        );
    }

    #[test]
    fn exact_block_matrix_is_recovered() {
        let p: Partition = "{1,4,6},{2,7},{3},{5,8,9}".parse().unwrap();
        let r = round_to_partition(h_matrix(&p).matrix(), &RoundingOptions::default()).unwrap();
        assert_eq!(r.partition, p);
    }

    #[test]
    fn overlap_goes_to_larger_gain() {
        // node 2 bridges {0,1,2} and {2,3}; it is more tightly bound to the first
        let mut m = DMatrix::zeros(4, 4);
        for (i, j, w) in [(0, 1, 1.0), (0, 2, 1.0), (1, 2, 1.0), (2, 3, 0.5)] {
            m[(i, j)] = w;
            m[(j, i)] = w;
        }
        let g = WeightedGraph::from_matrix(&m, 0.0).unwrap();
        let cover = vec![vec![0, 1, 2], vec![2, 3]];
        assert_eq!(
            resolve_overlaps(&g, &cover, 1.0),
            vec![vec![0, 1, 2], vec![3]]
        );
    }

    #[test]
    fn repair_merges_into_strongest_neighbor() {
        let mut h = DMatrix::zeros(5, 5);
        h[(4, 2)] = 0.3;
        h[(2, 4)] = 0.3;
        h[(4, 0)] = 0.1;
        h[(0, 4)] = 0.1;
        let blocks = repair_block_sizes(&h, vec![vec![0, 1], vec![2, 3], vec![4]], 2).unwrap();
        assert_eq!(blocks, vec![vec![0, 1], vec![2, 3, 4]]);
        assert!(repair_block_sizes(&h, vec![vec![0, 1, 2, 3, 4]], 6).is_err());
    }

    #[test]
    fn dot_output_scales_widths() {
        let p: Partition = "{1,2},{3}".parse().unwrap();
        let mut m = DMatrix::zeros(3, 3);
        m[(0, 1)] = 0.4;
        m[(1, 0)] = 0.4;
        m[(1, 2)] = 0.1;
        m[(2, 1)] = 0.1;
        let g = WeightedGraph::from_matrix(&m, 1e-6).unwrap();
        let dot = to_dot(&g, Some(&p));
        assert!(dot.contains("1 -- 2 [penwidth=5.000"));
        assert!(dot.contains("2 -- 3 [penwidth=1.250"));
        assert!(dot.starts_with("graph H {"));
    }
}
