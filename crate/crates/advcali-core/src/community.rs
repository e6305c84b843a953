//! Louvain community detection by greedy modularity optimization.
//!
//! Standard two-phase scheme: local moving (seeded-shuffled node order, move
//! to the neighboring community with the largest positive modularity gain,
//! ties to the lowest community id) followed by graph aggregation, repeated
//! until the per-level modularity gain drops below 1e-7. Deterministic for a
//! fixed seed.

use crate::graph::Graph;
use crate::rng::stream;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

/// Assignment of every node to a community, ids dense in
/// `[0, num_communities)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    community: Vec<usize>,
    num_communities: usize,
}

impl Partition {
    /// Build from raw per-node ids, renumbering them densely in order of
    /// first appearance (node 0's community becomes id 0).
    pub fn from_assignment(raw: &[usize]) -> Self {
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        let mut community = Vec::with_capacity(raw.len());
        for &c in raw {
            let next = remap.len();
            let id = *remap.entry(c).or_insert(next);
            community.push(id);
        }
        Partition {
            community,
            num_communities: remap.len(),
        }
    }

    /// Every node in its own community.
    pub fn singletons(n: usize) -> Self {
        Partition {
            community: (0..n).collect(),
            num_communities: n,
        }
    }

    pub fn community_of(&self, node: usize) -> usize {
        self.community[node]
    }

    pub fn num_communities(&self) -> usize {
        self.num_communities
    }

    pub fn num_nodes(&self) -> usize {
        self.community.len()
    }

    pub fn assignments(&self) -> &[usize] {
        &self.community
    }

    /// Size of each community.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_communities];
        for &c in &self.community {
            sizes[c] += 1;
        }
        sizes
    }

    /// Largest community by node count, ties to the lowest community id.
    pub fn largest_community(&self) -> usize {
        let sizes = self.sizes();
        let mut best = 0;
        for (c, &s) in sizes.iter().enumerate().skip(1) {
            if s > sizes[best] {
                best = c;
            }
        }
        best
    }
}

/// Modularity `Q = sum_c [ e_c/m - gamma (d_c / 2m)^2 ]` of a partition;
/// `None` for a graph with zero total edge weight.
pub fn modularity(g: &Graph, p: &Partition, resolution: f64) -> Option<f64> {
    let m = g.total_weight();
    if m <= 0.0 {
        return None;
    }
    let k = p.num_communities();
    let mut intra = vec![0.0f64; k];
    let mut degree = vec![0.0f64; k];
    for i in 0..g.num_nodes() {
        let ci = p.community_of(i);
        degree[ci] += g.weighted_degree(i);
        for (j, w) in g.neighbors(i) {
            if j > i && p.community_of(j) == ci {
                intra[ci] += w;
            }
        }
    }
    let mut q = 0.0;
    for c in 0..k {
        let frac = degree[c] / (2.0 * m);
        q += intra[c] / m - resolution * frac * frac;
    }
    Some(q)
}

/// Working graph for the aggregation levels: adjacency maps (deterministic
/// iteration) plus per-node self-loop weight accumulated from contracted
/// communities.
struct LevelGraph {
    adj: Vec<BTreeMap<usize, f64>>,
    self_loop: Vec<f64>,
}

impl LevelGraph {
    fn from_graph(g: &Graph) -> Self {
        let n = g.num_nodes();
        let mut adj = vec![BTreeMap::new(); n];
        for i in 0..n {
            for (j, w) in g.neighbors(i) {
                adj[i].insert(j, w);
            }
        }
        LevelGraph {
            adj,
            self_loop: vec![0.0; n],
        }
    }

    fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    /// Weighted degree including the self-loop counted twice.
    fn degree(&self, i: usize) -> f64 {
        self.adj[i].values().sum::<f64>() + 2.0 * self.self_loop[i]
    }
}

/// Per-level modularity trace of one Louvain run.
#[derive(Debug, Clone)]
pub struct LouvainTrace {
    /// Modularity of the full-graph partition after each level.
    pub level_modularity: Vec<f64>,
}

/// Louvain with the default resolution of 1 and a per-level trace.
pub fn louvain_with_trace(g: &Graph, resolution: f64, seed: u64) -> (Partition, LouvainTrace) {
    let n = g.num_nodes();
    let total = g.total_weight();
    if total <= 0.0 {
        // Edgeless graph: every node its own community.
        return (
            Partition::singletons(n),
            LouvainTrace {
                level_modularity: Vec::new(),
            },
        );
    }
    let m = total;
    let mut rng = stream(seed, "louvain");
    let mut level = LevelGraph::from_graph(g);
    // node_to_final[i]: community of original node i expressed in the
    // current level's node ids.
    let mut node_to_level: Vec<usize> = (0..n).collect();
    let mut trace = Vec::new();
    let mut previous_q = f64::NEG_INFINITY;

    loop {
        let ln = level.num_nodes();
        let mut comm: Vec<usize> = (0..ln).collect();
        let mut tot: Vec<f64> = (0..ln).map(|i| level.degree(i)).collect();

        // Local moving sweeps until no node moves.
        let mut moved_any = true;
        while moved_any {
            moved_any = false;
            let order = rng.permutation(ln);
            for &i in &order {
                let ki = level.degree(i);
                let old = comm[i];
                tot[old] -= ki;

                // Edge weight from i to each adjacent community.
                let mut links: BTreeMap<usize, f64> = BTreeMap::new();
                links.insert(old, 0.0);
                for (&j, &w) in &level.adj[i] {
                    *links.entry(comm[j]).or_insert(0.0) += w;
                }

                let gain = |c: usize, k_ic: f64| {
                    k_ic / m - resolution * tot[c] * ki / (2.0 * m * m)
                };
                let mut best_c = old;
                let mut best_gain = gain(old, *links.get(&old).unwrap_or(&0.0));
                for (&c, &k_ic) in &links {
                    let gc = gain(c, k_ic);
                    if gc > best_gain || (gc == best_gain && c < best_c) {
                        best_c = c;
                        best_gain = gc;
                    }
                }
                tot[best_c] += ki;
                if best_c != old {
                    comm[i] = best_c;
                    moved_any = true;
                }
            }
        }

        // Express the full-graph partition and measure this level.
        let raw: Vec<usize> = node_to_level.iter().map(|&v| comm[v]).collect();
        let partition = Partition::from_assignment(&raw);
        let q = modularity(g, &partition, resolution).unwrap();
        trace.push(q);
        if q - previous_q < 1e-7 {
            return (
                partition,
                LouvainTrace {
                    level_modularity: trace,
                },
            );
        }
        previous_q = q;

        // Aggregate: communities become nodes, renumbered by ascending old id.
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        for &c in comm.iter() {
            let next = remap.len();
            remap.entry(c).or_insert(next);
        }
        let k = remap.len();
        if k == ln {
            return (
                partition,
                LouvainTrace {
                    level_modularity: trace,
                },
            );
        }
        let mut next = LevelGraph {
            adj: vec![BTreeMap::new(); k],
            self_loop: vec![0.0; k],
        };
        for i in 0..ln {
            let ci = remap[&comm[i]];
            next.self_loop[ci] += level.self_loop[i];
            for (&j, &w) in &level.adj[i] {
                let cj = remap[&comm[j]];
                if ci == cj {
                    if i < j {
                        next.self_loop[ci] += w;
                    }
                } else {
                    *next.adj[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        for v in node_to_level.iter_mut() {
            *v = remap[&comm[*v]];
        }
        level = next;
    }
}

/// Louvain partition of `g`. Deterministic for a fixed seed; an edgeless
/// graph yields singleton communities.
pub fn louvain(g: &Graph, resolution: f64, seed: u64) -> Partition {
    louvain_with_trace(g, resolution, seed).0
}
