//! Hierarchical navigable small-world graph over a [`VecStore`]'s vectors.
//!
//! Standard HNSW construction: geometric level assignment with
//! `mL = 1 / ln(M)`, greedy descent through the upper layers, beam search of
//! width `ef_construction` per layer, and the neighbour-selection heuristic
//! for both new links and pruning. Layer 0 keeps up to `2M` links.
//! Level assignment uses a fixed-seed RNG, so a given store always yields the
//! same graph.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{result_order, KnnResult, VecStore};
use crate::embedding::dot;

const LEVEL_SEED: u64 = 0x6e65_6564_6c65_0001;
const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Max links per node on layers above 0.
    #[serde(rename = "M")]
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 100,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    dist: f64,
    idx: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.idx.cmp(&other.idx))
    }
}

struct Visited {
    bits: Vec<u64>,
    touched: Vec<usize>,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            bits: vec![0; n.div_ceil(64)],
            touched: Vec::new(),
        }
    }

    /// Marks `i`; returns false if it was already marked.
    fn insert(&mut self, i: usize) -> bool {
        let (w, b) = (i / 64, 1u64 << (i % 64));
        if self.bits[w] & b != 0 {
            return false;
        }
        if self.bits[w] == 0 {
            self.touched.push(w);
        }
        self.bits[w] |= b;
        true
    }

    fn clear(&mut self) {
        for w in self.touched.drain(..) {
            self.bits[w] = 0;
        }
    }
}

#[derive(Debug)]
pub(crate) struct HnswGraph {
    /// `links[layer][node]`; only populated for nodes whose level >= layer.
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
    max_level: usize,
    params: HnswParams,
}

impl HnswGraph {
    pub(crate) fn build(store: &VecStore, params: HnswParams) -> Self {
        let n = store.len();
        let m = params.m.max(2);
        let ml = 1.0 / (m as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(LEVEL_SEED);
        let levels: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL)
            })
            .collect();
        let top = levels.iter().copied().max().unwrap_or(0);
        let mut links: Vec<Vec<Vec<u32>>> = (0..=top).map(|_| vec![Vec::new(); n]).collect();

        let mut graph = Self {
            links: Vec::new(),
            entry: 0,
            max_level: levels.first().copied().unwrap_or(0),
            params: HnswParams { m, ..params },
        };
        let mut visited = Visited::new(n);

        for q in 1..n {
            let level = levels[q];
            let dist_q = |i: usize| store.distance_between(q, i);
            let mut ep = Scored {
                dist: dist_q(graph.entry as usize),
                idx: graph.entry,
            };
            for layer in ((level + 1)..=graph.max_level).rev() {
                ep = greedy(&links[layer], ep, &dist_q);
            }
            let mut eps = vec![ep];
            for layer in (0..=level.min(graph.max_level)).rev() {
                let found = search_layer(&links[layer], &eps, params.ef_construction.max(m), &dist_q, &mut visited);
                let chosen = select_neighbors(store, &found, m);
                let cap = if layer == 0 { 2 * m } else { m };
                for &nb in &chosen {
                    links[layer][q].push(nb);
                    let nb_links = &mut links[layer][nb as usize];
                    nb_links.push(q as u32);
                    if nb_links.len() > cap {
                        let owner = nb as usize;
                        let mut cand: Vec<Scored> = nb_links
                            .iter()
                            .map(|&c| Scored {
                                dist: store.distance_between(owner, c as usize),
                                idx: c,
                            })
                            .collect();
                        cand.sort_unstable();
                        links[layer][owner] = select_neighbors(store, &cand, cap);
                    }
                }
                eps = found;
            }
            if level > graph.max_level {
                graph.max_level = level;
                graph.entry = q as u32;
            }
        }
        graph.links = links;
        graph
    }

    pub(crate) fn search(&self, store: &VecStore, query: &[f32], k: usize, ef_search: usize) -> Vec<KnnResult> {
        if store.is_empty() {
            return Vec::new();
        }
        let qn = dot(query, query);
        let dist_q = |i: usize| store.distance_to(query, qn, i);
        let mut ep = Scored {
            dist: dist_q(self.entry as usize),
            idx: self.entry,
        };
        for layer in (1..=self.max_level).rev() {
            ep = greedy(&self.links[layer], ep, &dist_q);
        }
        let mut visited = Visited::new(store.len());
        let ef = ef_search.max(k).max(self.params.m);
        let found = search_layer(&self.links[0], &[ep], ef, &dist_q, &mut visited);
        let mut out: Vec<KnnResult> = found
            .into_iter()
            .map(|s| KnnResult {
                tile_id: store.tile_id(s.idx as usize),
                image_id: store.image_id(s.idx as usize),
                distance: s.dist,
            })
            .collect();
        out.sort_unstable_by(result_order);
        out.truncate(k);
        out
    }
}

fn greedy(layer: &[Vec<u32>], mut cur: Scored, dist: &impl Fn(usize) -> f64) -> Scored {
    loop {
        let mut improved = false;
        for &nb in &layer[cur.idx as usize] {
            let d = dist(nb as usize);
            let cand = Scored { dist: d, idx: nb };
            if cand < cur {
                cur = cand;
                improved = true;
            }
        }
        if !improved {
            return cur;
        }
    }
}

/// Beam search on one layer; returns up to `ef` nodes sorted ascending.
fn search_layer(
    layer: &[Vec<u32>],
    entry: &[Scored],
    ef: usize,
    dist: &impl Fn(usize) -> f64,
    visited: &mut Visited,
) -> Vec<Scored> {
    visited.clear();
    let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
    let mut best: BinaryHeap<Scored> = BinaryHeap::new();
    for &e in entry {
        if visited.insert(e.idx as usize) {
            candidates.push(Reverse(e));
            best.push(e);
        }
    }
    while best.len() > ef {
        best.pop();
    }
    while let Some(Reverse(c)) = candidates.pop() {
        if let Some(worst) = best.peek() {
            if best.len() >= ef && c > *worst {
                break;
            }
        }
        for &nb in &layer[c.idx as usize] {
            if !visited.insert(nb as usize) {
                continue;
            }
            let s = Scored {
                dist: dist(nb as usize),
                idx: nb,
            };
            if best.len() < ef || s < *best.peek().expect("non-empty") {
                candidates.push(Reverse(s));
                best.push(s);
                if best.len() > ef {
                    best.pop();
                }
            }
        }
    }
    let mut out = best.into_vec();
    out.sort_unstable();
    out
}

/// Neighbour-selection heuristic: walk candidates nearest-first and keep one
/// only if it is closer to the base than to every neighbour already kept.
/// `candidates` must be sorted ascending by distance to the base.
fn select_neighbors(store: &VecStore, candidates: &[Scored], m: usize) -> Vec<u32> {
    let mut kept: Vec<Scored> = Vec::with_capacity(m);
    for &c in candidates {
        if kept.len() >= m {
            break;
        }
        let diverse = kept
            .iter()
            .all(|r| c.dist < store.distance_between(c.idx as usize, r.idx as usize));
        if diverse {
            kept.push(c);
        }
    }
    kept.into_iter().map(|s| s.idx).collect()
}
