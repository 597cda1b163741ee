//! Predefined stock-relation graphs: industry membership, DTW nearest
//! neighbours, correlation thresholds, and conversions between pairwise and
//! hypergraph form, plus a plain-text exchange format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{PricePanel, FEATURE_START};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("series must be non-empty")]
    EmptySeries,
    #[error("k = {k} must be smaller than the number of stocks ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("no sector recorded for ticker {0}")]
    UnmappedTicker(String),
    #[error("window covers {len} usable days, need at least {need}")]
    WindowTooShort { len: usize, need: usize },
    #[error("{path}:{line}: cannot parse graph file")]
    Parse { path: String, line: usize },
    #[error("member index {value} out of range for {n} nodes")]
    BadMember { value: usize, n: usize },
    #[error("{edges} hyperedges exceed the node count {nodes}")]
    TooManyEdges { edges: usize, nodes: usize },
}

// ── Pairwise graphs ─────────────────────────────────────────────────────

/// Undirected binary relation on `n` nodes: symmetric adjacency with a zero
/// diagonal (propagation operators add self-loops themselves).
#[derive(Debug, Clone, PartialEq)]
pub struct PairGraph {
    n: usize,
    adj: Vec<f64>,
}

impl PairGraph {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            adj: vec![0.0; n * n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut g = Self::empty(n);
        for &(i, j) in edges {
            g.add_edge(i, j);
        }
        g
    }

    pub fn add_edge(&mut self, i: usize, j: usize) {
        assert!(i < self.n && j < self.n, "edge out of range");
        if i != j {
            self.adj[i * self.n + j] = 1.0;
            self.adj[j * self.n + i] = 1.0;
        }
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j] != 0.0
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        let mut e = 0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    e += 1;
                }
            }
        }
        e
    }

    /// Row-major `n x n` adjacency of zeros and ones.
    pub fn adjacency(&self) -> &[f64] {
        &self.adj
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

// ── Hypergraphs ─────────────────────────────────────────────────────────

/// Relation connecting arbitrary node subsets. Each live hyperedge has at
/// least one member; the number of hyperedges never exceeds the number of
/// nodes, and an all-zero incidence row is never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGraph {
    n: usize,
    edges: Vec<Vec<usize>>,
}

impl HyperGraph {
    /// Builds from member lists; empty lists are dropped, members are
    /// sorted and deduplicated.
    pub fn new(n: usize, edges: Vec<Vec<usize>>) -> Result<Self, GraphError> {
        let mut cleaned = Vec::with_capacity(edges.len());
        for mut e in edges {
            e.sort_unstable();
            e.dedup();
            if let Some(&max) = e.last() {
                if max >= n {
                    return Err(GraphError::BadMember { value: max, n });
                }
                cleaned.push(e);
            }
        }
        if cleaned.len() > n {
            return Err(GraphError::TooManyEdges {
                edges: cleaned.len(),
                nodes: n,
            });
        }
        Ok(Self { n, edges: cleaned })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Vec<usize>] {
        &self.edges
    }

    /// Row-major `E x n` incidence matrix of zeros and ones.
    pub fn incidence(&self) -> Vec<f64> {
        let mut h = vec![0.0; self.edges.len() * self.n];
        for (r, edge) in self.edges.iter().enumerate() {
            for &m in edge {
                h[r * self.n + m] = 1.0;
            }
        }
        h
    }
}

/// Clique expansion: every pair of nodes sharing a hyperedge becomes an
/// edge. Adding hyperedges can only add pairwise edges, never remove them.
pub fn hyper_to_pairwise(h: &HyperGraph) -> PairGraph {
    let mut g = PairGraph::empty(h.num_nodes());
    for edge in h.edges() {
        for (a, &i) in edge.iter().enumerate() {
            for &j in &edge[a + 1..] {
                g.add_edge(i, j);
            }
        }
    }
    g
}

// ── Constructors ────────────────────────────────────────────────────────

/// One hyperedge per sector, holding that sector's tickers; sectors with a
/// single member contribute nothing. Sectors are ordered by name and
/// members by ticker index, so the result is reproducible.
pub fn industry_graph(
    tickers: &[String],
    membership: &HashMap<String, String>,
) -> Result<HyperGraph, GraphError> {
    let mut by_sector: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in tickers.iter().enumerate() {
        let sector = membership
            .get(t)
            .ok_or_else(|| GraphError::UnmappedTicker(t.clone()))?;
        by_sector.entry(sector).or_default().push(i);
    }
    let edges = by_sector
        .into_values()
        .filter(|members| members.len() >= 2)
        .collect();
    HyperGraph::new(tickers.len(), edges)
}

/// Dynamic-time-warping distance: the cheapest monotone alignment of the
/// two series under a squared-difference local cost, unconstrained (no
/// warping band).
pub fn dtw_distance(x: &[f64], y: &[f64]) -> Result<f64, GraphError> {
    if x.is_empty() || y.is_empty() {
        return Err(GraphError::EmptySeries);
    }
    // Two-row DP over the |x| x |y| cost table.
    let cols = y.len();
    let mut prev = vec![0.0f64; cols];
    let mut cur = vec![0.0f64; cols];
    for (i, &xi) in x.iter().enumerate() {
        for (j, &yj) in y.iter().enumerate() {
            let cost = (xi - yj) * (xi - yj);
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[cols - 1])
}

/// Nearest-neighbour hypergraph: one candidate hyperedge per stock holding
/// the stock and its `k` DTW-nearest peers on normalized closes over
/// `window` (clamped to days that have features). Distance ties at the k-th
/// position are all included, and identical member sets are merged, so the
/// result is deterministic and has at most one hyperedge per stock.
pub fn dtw_k_hypergraph(
    panel: &PricePanel,
    window: Range<usize>,
    k: usize,
) -> Result<HyperGraph, GraphError> {
    let n = panel.num_stocks();
    if k >= n {
        return Err(GraphError::KTooLarge { k, n });
    }
    let lo = window.start.max(FEATURE_START);
    let hi = window.end.min(panel.num_days());
    if lo >= hi {
        return Err(GraphError::WindowTooShort {
            len: hi.saturating_sub(lo),
            need: 1,
        });
    }
    let series: Vec<Vec<f64>> = (0..n)
        .map(|s| (lo..hi).map(|d| panel.feature(s, d, 0)).collect())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| dtw_distance(&series[i], &series[j]).expect("series are non-empty"))
        .collect();
    let mut dist = vec![0.0; n * n];
    for (&(i, j), &d) in pairs.iter().zip(&dists) {
        dist[i * n + j] = d;
        dist[j * n + i] = d;
    }

    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            dist[i * n + a]
                .partial_cmp(&dist[i * n + b])
                .unwrap()
                .then(a.cmp(&b))
        });
        let cutoff = dist[i * n + order[k - 1]];
        let mut edge: Vec<usize> = vec![i];
        edge.extend(order.iter().copied().take_while(|&j| dist[i * n + j] <= cutoff));
        edge.sort_unstable();
        if seen.insert(edge.clone()) {
            edges.push(edge);
        }
    }
    HyperGraph::new(n, edges)
}

/// Threshold graph: an edge wherever the Pearson correlation of the two
/// stocks' daily returns over `window` is strictly greater than
/// `threshold`. A zero-variance return series correlates with nothing.
pub fn correlation_graph(
    panel: &PricePanel,
    window: Range<usize>,
    threshold: f64,
) -> Result<PairGraph, GraphError> {
    let n = panel.num_stocks();
    let lo = window.start.max(1);
    let hi = window.end.min(panel.num_days());
    if hi.saturating_sub(lo) < 2 {
        return Err(GraphError::WindowTooShort {
            len: hi.saturating_sub(lo),
            need: 2,
        });
    }
    let returns: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            (lo..hi)
                .map(|d| (panel.close(s, d) - panel.close(s, d - 1)) / panel.close(s, d - 1))
                .collect()
        })
        .collect();
    let len = hi - lo;
    let means: Vec<f64> = returns.iter().map(|r| r.iter().sum::<f64>() / len as f64).collect();
    let vars: Vec<f64> = returns
        .iter()
        .zip(&means)
        .map(|(r, m)| r.iter().map(|v| (v - m) * (v - m)).sum::<f64>())
        .collect();

    let mut g = PairGraph::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            if vars[i] == 0.0 || vars[j] == 0.0 {
                continue;
            }
            let cov: f64 = returns[i]
                .iter()
                .zip(&returns[j])
                .map(|(a, b)| (a - means[i]) * (b - means[j]))
                .sum();
            let rho = cov / (vars[i] * vars[j]).sqrt();
            if rho > threshold {
                g.add_edge(i, j);
            }
        }
    }
    Ok(g)
}

/// Symmetric random graph: each unordered pair becomes an edge with
/// probability `p`, reproducibly for a given seed.
pub fn random_pair_graph(n: usize, p: f64, seed: u64) -> PairGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = PairGraph::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < p {
                g.add_edge(i, j);
            }
        }
    }
    g
}

// ── Text exchange format ────────────────────────────────────────────────
//
// First line `N E`; then one line per hyperedge listing its member indices
// separated by spaces. Pairwise graphs are written as size-2 hyperedges.

pub fn write_members(path: &Path, n: usize, edges: &[Vec<usize>]) -> Result<(), GraphError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{} {}", n, edges.len())?;
    for edge in edges {
        let line: Vec<String> = edge.iter().map(usize::to_string).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_members(path: &Path) -> Result<(usize, Vec<Vec<usize>>), GraphError> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let parse_err = |line| GraphError::Parse {
        path: display.clone(),
        line,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1))?;
    let mut it = header.split_whitespace();
    let n: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(1))?;
    let e: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(1))?;
    let mut edges = Vec::with_capacity(e);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let members: Result<Vec<usize>, _> =
            line.split_whitespace().map(str::parse).collect();
        edges.push(members.map_err(|_| parse_err(i + 2))?);
    }
    if edges.len() != e {
        return Err(parse_err(1));
    }
    for edge in &edges {
        for &m in edge {
            if m >= n {
                return Err(GraphError::BadMember { value: m, n });
            }
        }
    }
    Ok((n, edges))
}

impl HyperGraph {
    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        write_members(path, self.n, &self.edges)
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let (n, edges) = read_members(path)?;
        Self::new(n, edges)
    }
}

impl PairGraph {
    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        let edges: Vec<Vec<usize>> = self.edges().iter().map(|&(i, j)| vec![i, j]).collect();
        write_members(path, self.n, &edges)
    }

    /// Loads any graph file as a pairwise graph; hyperedges of size above
    /// two are clique-expanded.
    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let (n, edges) = read_members(path)?;
        let mut g = PairGraph::empty(n);
        for edge in edges {
            for (a, &i) in edge.iter().enumerate() {
                for &j in &edge[a + 1..] {
                    g.add_edge(i, j);
                }
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_panel;
    use proptest::prelude::*;
    use rand::Rng;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn membership(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs
            .iter()
            .map(|(t, s)| (t.to_string(), s.to_string()))
            .collect()
    }

    #[test]
    fn industry_pairs_form_two_edges() {
        let h = industry_graph(
            &names(&["A", "B", "C", "D"]),
            &membership(&[("A", "x"), ("B", "x"), ("C", "y"), ("D", "y")]),
        )
        .unwrap();
        assert_eq!(h.edges(), &[vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn industry_single_sector_and_all_singletons() {
        let one = industry_graph(
            &names(&["A", "B", "C"]),
            &membership(&[("A", "x"), ("B", "x"), ("C", "x")]),
        )
        .unwrap();
        assert_eq!(one.edges(), &[vec![0, 1, 2]]);

        let none = industry_graph(
            &names(&["A", "B", "C"]),
            &membership(&[("A", "x"), ("B", "y"), ("C", "z")]),
        )
        .unwrap();
        assert_eq!(none.num_edges(), 0);
    }

    #[test]
    fn industry_requires_every_ticker_mapped() {
        let err = industry_graph(&names(&["A", "B"]), &membership(&[("A", "x")])).unwrap_err();
        assert!(matches!(err, GraphError::UnmappedTicker(t) if t == "B"));
    }

    #[test]
    fn dtw_identical_series_is_zero() {
        let x = [0.3, -0.1, 2.0, 0.7];
        assert_eq!(dtw_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn dtw_single_points_square_their_gap() {
        assert_eq!(dtw_distance(&[3.0], &[5.0]).unwrap(), 4.0);
        assert_eq!(dtw_distance(&[0.0, 2.0], &[1.0]).unwrap(), 2.0);
    }

    #[test]
    fn dtw_matches_a_hand_filled_table() {
        // For [0,1,0] vs [0,0,1,0] the cheapest alignment duplicates the
        // leading zero and costs nothing.
        assert_eq!(dtw_distance(&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn dtw_rejects_empty_series() {
        assert!(matches!(dtw_distance(&[], &[1.0]), Err(GraphError::EmptySeries)));
        assert!(matches!(dtw_distance(&[1.0], &[]), Err(GraphError::EmptySeries)));
    }

    /// Independent full-table DP used to cross-check the two-row version.
    fn dtw_full_table(x: &[f64], y: &[f64]) -> f64 {
        let (rows, cols) = (x.len(), y.len());
        let mut d = vec![f64::INFINITY; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let cost = (x[i] - y[j]).powi(2);
                let best = match (i, j) {
                    (0, 0) => 0.0,
                    (0, _) => d[j - 1],
                    (_, 0) => d[(i - 1) * cols],
                    _ => d[(i - 1) * cols + j]
                        .min(d[i * cols + j - 1])
                        .min(d[(i - 1) * cols + j - 1]),
                };
                d[i * cols + j] = cost + best;
            }
        }
        d[rows * cols - 1]
    }

    proptest! {
        #[test]
        fn dtw_is_symmetric_nonnegative_and_matches_full_table(
            x in proptest::collection::vec(-5.0f64..5.0, 1..10),
            y in proptest::collection::vec(-5.0f64..5.0, 1..10),
        ) {
            let a = dtw_distance(&x, &y).unwrap();
            let b = dtw_distance(&y, &x).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert_eq!(a, b);
            prop_assert_eq!(a, dtw_full_table(&x, &y));
            prop_assert_eq!(dtw_distance(&x, &x).unwrap(), 0.0);
        }

        #[test]
        fn clique_expansion_is_monotone(
            n in 3usize..8,
            seed in 0u64..500,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut edges: Vec<Vec<usize>> = Vec::new();
            for _ in 0..(n - 1) {
                let size = rng.gen_range(1..=n);
                let mut edge: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    let j = rng.gen_range(0..=i);
                    edge.swap(i, j);
                }
                edge.truncate(size);
                edges.push(edge);
            }
            let mut grown: Vec<Vec<usize>> = Vec::new();
            let mut prev_edges: Vec<(usize, usize)> = Vec::new();
            for e in edges {
                grown.push(e);
                let g = hyper_to_pairwise(&HyperGraph::new(n, grown.clone()).unwrap());
                let cur = g.edges();
                for pe in &prev_edges {
                    prop_assert!(cur.contains(pe), "edge {pe:?} vanished");
                }
                prev_edges = cur;
            }
        }
    }

    #[test]
    fn merged_neighbourhoods_of_identical_series_collapse() {
        let (panel, _) = synth_panel(3, 80, 1, 0.0, 7).unwrap();
        let split = panel.split();
        let h = dtw_k_hypergraph(&panel, 0..split.train_end, 1).unwrap();
        // All series identical: every distance ties at zero, so each
        // neighbourhood includes everyone and the copies merge.
        assert_eq!(h.edges(), &[vec![0, 1, 2]]);
    }

    #[test]
    fn separated_clusters_recover_their_blocks() {
        let (panel, labels) = synth_panel(8, 100, 2, 0.0, 13).unwrap();
        let split = panel.split();
        let h = dtw_k_hypergraph(&panel, 0..split.train_end, 3).unwrap();
        assert_eq!(h.num_edges(), 2);
        assert_eq!(h.edges()[0], vec![0, 1, 2, 3]);
        assert_eq!(h.edges()[1], vec![4, 5, 6, 7]);
        assert_eq!(labels, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn knn_membership_matches_brute_force() {
        let (panel, _) = synth_panel(6, 86, 3, 0.25, 21).unwrap();
        let split = panel.split();
        let window = 0..split.train_end;
        let k = 2;
        let h = dtw_k_hypergraph(&panel, window.clone(), k).unwrap();

        // Oracle: single-threaded exhaustive distances, same tie policy.
        let lo = window.start.max(FEATURE_START);
        let series: Vec<Vec<f64>> = (0..6)
            .map(|s| (lo..window.end).map(|d| panel.feature(s, d, 0)).collect())
            .collect();
        let mut seen = HashSet::new();
        let mut expected = Vec::new();
        for i in 0..6 {
            let mut cand: Vec<(f64, usize)> = (0..6)
                .filter(|&j| j != i)
                .map(|j| (dtw_full_table(&series[i], &series[j]), j))
                .collect();
            cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let cutoff = cand[k - 1].0;
            let mut edge: Vec<usize> = cand
                .iter()
                .filter(|(d, _)| *d <= cutoff)
                .map(|&(_, j)| j)
                .collect();
            edge.push(i);
            edge.sort_unstable();
            if seen.insert(edge.clone()) {
                expected.push(edge);
            }
        }
        assert_eq!(h.edges(), expected.as_slice());
    }

    #[test]
    fn knn_rejects_k_at_or_above_n() {
        let (panel, _) = synth_panel(4, 80, 2, 0.1, 3).unwrap();
        assert!(matches!(
            dtw_k_hypergraph(&panel, 0..60, 4),
            Err(GraphError::KTooLarge { k: 4, n: 4 })
        ));
    }

    #[test]
    fn correlated_twins_connect_and_mirrors_do_not() {
        // Stock 1 doubles stock 0's returns (correlation exactly 1); stock 2
        // mirrors them (correlation -1).
        let t = 60;
        let mut closes = vec![0.0; 3 * t];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        closes[0] = 100.0;
        closes[t] = 100.0;
        closes[2 * t] = 100.0;
        for d in 1..t {
            let r: f64 = rng.gen_range(-0.01..0.01);
            closes[d] = closes[d - 1] * (1.0 + r);
            closes[t + d] = closes[t + d - 1] * (1.0 + 2.0 * r);
            closes[2 * t + d] = closes[2 * t + d - 1] * (1.0 - r);
        }
        let panel = crate::data::PricePanel::new(
            names(&["A", "B", "C"]),
            crate::data::business_days(chrono::NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(), t),
            closes,
            &crate::data::SplitSpec::Ratios([6.0, 2.0, 2.0]),
        )
        .unwrap();
        let g = correlation_graph(&panel, 1..t, 0.9).unwrap();
        assert!(g.has_edge(0, 1));
        assert!(!g.has_edge(0, 2));
        assert!(!g.has_edge(1, 2));

        let loose = correlation_graph(&panel, 1..t, -1.0).unwrap();
        assert!(loose.has_edge(0, 2));
    }

    #[test]
    fn correlation_matches_direct_oracle() {
        let (panel, _) = synth_panel(5, 90, 1, 0.02, 17).unwrap();
        let split = panel.split();
        let g = correlation_graph(&panel, 0..split.train_end, 0.3).unwrap();

        let lo = 1;
        let hi = split.train_end;
        let rets: Vec<Vec<f64>> = (0..5)
            .map(|s| {
                (lo..hi)
                    .map(|d| panel.close(s, d) / panel.close(s, d - 1) - 1.0)
                    .collect()
            })
            .collect();
        let pearson = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
            cov / (va * vb).sqrt()
        };
        for i in 0..5 {
            for j in i + 1..5 {
                assert_eq!(g.has_edge(i, j), pearson(&rets[i], &rets[j]) > 0.3, "pair ({i},{j})");
            }
        }
    }

    #[test]
    fn constant_series_gets_no_edges() {
        let t = 60;
        let mut closes = vec![100.0; 2 * t];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in 1..t {
            let r: f64 = rng.gen_range(-0.01..0.01);
            closes[t + d] = closes[t + d - 1] * (1.0 + r);
        }
        let panel = crate::data::PricePanel::new(
            names(&["FLAT", "MOVE"]),
            crate::data::business_days(chrono::NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(), t),
            closes,
            &crate::data::SplitSpec::Ratios([6.0, 2.0, 2.0]),
        )
        .unwrap();
        let g = correlation_graph(&panel, 0..t, -2.0).unwrap();
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn clique_expansion_counts() {
        let h = HyperGraph::new(3, vec![vec![0, 1, 2]]).unwrap();
        let g = hyper_to_pairwise(&h);
        assert_eq!(g.num_edges(), 3);
        assert!(g.has_edge(0, 1) && g.has_edge(0, 2) && g.has_edge(1, 2));

        let h5 = HyperGraph::new(5, vec![vec![0, 1, 2, 3, 4]]).unwrap();
        assert_eq!(hyper_to_pairwise(&h5).num_edges(), 5 * 4 / 2);

        let blocks = HyperGraph::new(4, vec![vec![0, 1], vec![2, 3]]).unwrap();
        let g = hyper_to_pairwise(&blocks);
        assert!(g.has_edge(0, 1) && g.has_edge(2, 3));
        assert!(!g.has_edge(0, 2) && !g.has_edge(1, 3) && !g.has_edge(0, 3));
    }

    #[test]
    fn hypergraph_drops_empty_rows_and_caps_edge_count() {
        let h = HyperGraph::new(3, vec![vec![], vec![1, 0], vec![]]).unwrap();
        assert_eq!(h.edges(), &[vec![0, 1]]);
        assert!(matches!(
            HyperGraph::new(2, vec![vec![0], vec![1], vec![0, 1]]),
            Err(GraphError::TooManyEdges { edges: 3, nodes: 2 })
        ));
    }

    #[test]
    fn text_format_round_trips_both_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let h = HyperGraph::new(5, vec![vec![0, 2, 4], vec![1, 3]]).unwrap();
        let hp = dir.path().join("h.graph");
        h.save(&hp).unwrap();
        assert_eq!(HyperGraph::load(&hp).unwrap(), h);

        let g = PairGraph::from_edges(4, &[(0, 1), (2, 3), (1, 3)]);
        let gp = dir.path().join("g.graph");
        g.save(&gp).unwrap();
        assert_eq!(PairGraph::load(&gp).unwrap(), g);

        // A pairwise load of the hyper file is its clique expansion.
        assert_eq!(PairGraph::load(&hp).unwrap(), hyper_to_pairwise(&h));
    }

    #[test]
    fn malformed_graph_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.graph");
        std::fs::write(&p, "3 1\n0 9\n").unwrap();
        assert!(matches!(
            HyperGraph::load(&p),
            Err(GraphError::BadMember { value: 9, n: 3 })
        ));
        std::fs::write(&p, "not a header\n").unwrap();
        assert!(matches!(HyperGraph::load(&p), Err(GraphError::Parse { .. })));
    }

    #[test]
    fn random_graph_is_reproducible() {
        let a = random_pair_graph(10, 0.3, 99);
        let b = random_pair_graph(10, 0.3, 99);
        assert_eq!(a, b);
        assert!(a.num_edges() > 0 && a.num_edges() < 45);
    }
}
