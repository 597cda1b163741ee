//! Score-producing models downstream of the realized graph: a two-round
//! graph convolution for pairwise graphs, a normalized hypergraph
//! convolution, and a graph-free per-node MLP control. All three share the
//! same parameter set (node encoder, two propagation matrices, scalar
//! head), so switching backbones never changes initialization.

use thiserror::Error;

use crate::params::{ParamStore, WatchedParams};
use crate::realize::{GraphMode, Realized};
use crate::scalar::Scalar;
use crate::spl::LEAK;
use crate::tensor::{ShapeError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("{kind} backbone needs a {expected} graph, got {got}")]
    WrongMode {
        kind: &'static str,
        expected: &'static str,
        got: &'static str,
    },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Gcn,
    Hgcn,
    Mlp,
}

impl BackboneKind {
    pub fn name(&self) -> &'static str {
        match self {
            BackboneKind::Gcn => "gcn",
            BackboneKind::Hgcn => "hgcn",
            BackboneKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gcn" => Some(BackboneKind::Gcn),
            "hgcn" => Some(BackboneKind::Hgcn),
            "mlp" => Some(BackboneKind::Mlp),
            _ => None,
        }
    }

    /// Graph form this backbone consumes, if any.
    pub fn mode(&self) -> Option<GraphMode> {
        match self {
            BackboneKind::Gcn => Some(GraphMode::Pairwise),
            BackboneKind::Hgcn => Some(GraphMode::Hyper),
            BackboneKind::Mlp => None,
        }
    }
}

fn mode_name(mode: GraphMode) -> &'static str {
    match mode {
        GraphMode::Pairwise => "pairwise",
        GraphMode::Hyper => "hyper",
    }
}

/// Registers encoder, propagation, and head parameters under `bb.`.
pub fn register_params<S: Scalar>(
    store: &mut ParamStore<S>,
    hidden: usize,
    lookback: usize,
    features: usize,
) {
    let flat = lookback * features;
    store.add_uniform("bb.enc.w", &[flat, hidden], flat);
    store.add_zeros("bb.enc.b", &[hidden]);
    store.add_uniform("bb.prop1.w", &[hidden, hidden], hidden);
    store.add_uniform("bb.prop2.w", &[hidden, hidden], hidden);
    store.add_uniform("bb.head.w", &[hidden, 1], hidden);
    store.add_zeros("bb.head.b", &[1]);
}

fn p<'a, S: Scalar>(params: &'a WatchedParams<S>, name: &str) -> &'a Tensor<S> {
    params
        .get(name)
        .unwrap_or_else(|| panic!("parameter {name} was never registered"))
}

/// Flattens each node's window and applies the linear encoder:
/// `[n,l,m] -> [n,hidden]`.
fn node_embed<S: Scalar>(
    tape: &Tape<S>,
    params: &WatchedParams<S>,
    x: &Tensor<S>,
) -> Result<Tensor<S>, ShapeError> {
    let shape = x.shape();
    let flat = tape.reshape(x, &[shape[0], shape[1] * shape[2]])?;
    tape.add(&tape.matmul(&flat, p(params, "bb.enc.w"))?, p(params, "bb.enc.b"))
}

/// Two propagation rounds with a leaky rectifier between, then the scalar
/// head: `scores_i = head(prop(prop(embed(x))))`.
fn propagate<S: Scalar>(
    tape: &Tape<S>,
    params: &WatchedParams<S>,
    operator: &Tensor<S>,
    h0: &Tensor<S>,
) -> Result<Tensor<S>, ShapeError> {
    let n = h0.shape()[0];
    let h1 = tape.leaky_relu(
        &tape.matmul(&tape.matmul(operator, h0)?, p(params, "bb.prop1.w"))?,
        LEAK,
    );
    let h2 = tape.matmul(&tape.matmul(operator, &h1)?, p(params, "bb.prop2.w"))?;
    let scored = tape.add(&tape.matmul(&h2, p(params, "bb.head.w"))?, p(params, "bb.head.b"))?;
    tape.reshape(&scored, &[n])
}

/// Degree-normalized propagation matrix with learned edge weights:
/// `A' = A * (1 + mean_z masked)`, then `D^{-1/2} (A' + I) D^{-1/2}` with
/// the degrees of `A' + I` (clamped away from zero). Differentiable in the
/// masked attributes; an empty graph yields the exact identity.
pub fn normalized_adjacency<S: Scalar>(
    tape: &Tape<S>,
    graph: &Realized<S>,
) -> Result<Tensor<S>, ShapeError> {
    let n = graph.num_nodes();
    let binary = Tensor::from_f64_slice(&[n, n], &graph.binary)?;
    let mean_attr = tape.mean_axis(&graph.masked, 0)?;
    let weighted = tape.mul(&binary, &tape.add_scalar(&mean_attr, 1.0))?;
    let with_self = tape.add(&weighted, &Tensor::eye(n))?;
    let deg = tape.sum_axis(&with_self, 1, true)?;
    let dinv = tape.powf(&tape.clamp_min(&deg, 1e-6), -0.5);
    let dinv_row = tape.transpose(&dinv, &[1, 0])?;
    tape.mul(&tape.mul(&dinv, &with_self)?, &dinv_row)
}

/// Graph convolution over a realized pairwise graph.
pub fn gcn_forward<S: Scalar>(
    tape: &Tape<S>,
    params: &WatchedParams<S>,
    x: &Tensor<S>,
    graph: &Realized<S>,
) -> Result<Tensor<S>, BackboneError> {
    if graph.mode != GraphMode::Pairwise {
        return Err(BackboneError::WrongMode {
            kind: "gcn",
            expected: "pairwise",
            got: mode_name(graph.mode),
        });
    }
    let ahat = normalized_adjacency(tape, graph)?;
    let h0 = node_embed(tape, params, x)?;
    Ok(propagate(tape, params, &ahat, &h0)?)
}

/// Graph-free control: the same encoder/head with the identity operator,
/// so no cross-node mixing occurs.
pub fn mlp_forward<S: Scalar>(
    tape: &Tape<S>,
    params: &WatchedParams<S>,
    x: &Tensor<S>,
) -> Result<Tensor<S>, BackboneError> {
    let n = x.shape()[0];
    let h0 = node_embed(tape, params, x)?;
    Ok(propagate(tape, params, &Tensor::eye(n), &h0)?)
}

/// Dense normalized hypergraph operator
/// `D_v^{-1/2} H W_e D_e^{-1} H^T D_v^{-1/2}` with identity edge weights,
/// assembled from the live incidence rows (`rows[e*n + j] = 1` if node `j`
/// belongs to live hyperedge `e`). Zero-degree nodes pass through
/// unchanged; with no live hyperedges the operator is the identity.
pub fn hyper_operator(n: usize, rows: &[f64]) -> Vec<f64> {
    let e = if n == 0 { 0 } else { rows.len() / n };
    debug_assert_eq!(rows.len(), e * n);
    let mut dv = vec![0.0; n];
    let mut de = vec![0.0; e];
    for r in 0..e {
        for j in 0..n {
            let v = rows[r * n + j];
            dv[j] += v;
            de[r] += v;
        }
    }
    let dvs: Vec<f64> = dv.iter().map(|&d| if d > 0.0 { d.powf(-0.5) } else { 0.0 }).collect();
    let mut g = vec![0.0; n * n];
    for r in 0..e {
        if de[r] == 0.0 {
            continue;
        }
        for i in 0..n {
            if rows[r * n + i] == 0.0 {
                continue;
            }
            for j in 0..n {
                if rows[r * n + j] != 0.0 {
                    g[i * n + j] += dvs[i] * dvs[j] / de[r];
                }
            }
        }
    }
    for i in 0..n {
        if dv[i] == 0.0 {
            g[i * n + i] = 1.0;
        }
    }
    g
}

/// Hypergraph convolution over a realized hypergraph. The propagation
/// operator depends only on the binary membership (attributes do not enter
/// it); with zero live hyperedges this degrades to the per-node MLP.
pub fn hgcn_forward<S: Scalar>(
    tape: &Tape<S>,
    params: &WatchedParams<S>,
    x: &Tensor<S>,
    graph: &Realized<S>,
) -> Result<Tensor<S>, BackboneError> {
    if graph.mode != GraphMode::Hyper {
        return Err(BackboneError::WrongMode {
            kind: "hgcn",
            expected: "hyper",
            got: mode_name(graph.mode),
        });
    }
    let n = graph.num_nodes();
    let live = graph.live_rows();
    let mut rows = Vec::with_capacity(live.len() * n);
    for &r in &live {
        rows.extend_from_slice(&graph.binary[r * n..(r + 1) * n]);
    }
    let op = Tensor::from_f64_slice(&[n, n], &hyper_operator(n, &rows))?;
    let h0 = node_embed(tape, params, x)?;
    Ok(propagate(tape, params, &op, &h0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{central_diff, max_rel_error, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn store_for(n_hidden: usize, l: usize, m: usize, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new(seed);
        register_params(&mut store, n_hidden, l, m);
        store
    }

    fn realized_pairwise(n: usize, edges: &[(usize, usize)], attrs: Option<Tensor<f64>>) -> Realized<f64> {
        let g = crate::graphs::PairGraph::from_edges(n, edges);
        let mut r = Realized::from_binary(GraphMode::Pairwise, n, g.adjacency().to_vec());
        if let Some(a) = attrs {
            r.masked = a;
        }
        r
    }

    #[test]
    fn empty_graph_equals_the_mlp_exactly() {
        let store = store_for(6, 4, 3, 1);
        let x = random_tensor(&[5, 4, 3], 2);
        let tape = Tape::new();
        let params = store.watch_all(&tape);
        let empty = realized_pairwise(5, &[], None);
        let via_gcn = gcn_forward(&tape, &params, &x, &empty).unwrap();
        let via_mlp = mlp_forward(&tape, &params, &x).unwrap();
        assert_eq!(via_gcn.to_vec(), via_mlp.to_vec());
    }

    #[test]
    fn isolated_nodes_do_not_mix() {
        let store = store_for(6, 4, 3, 3);
        let x = random_tensor(&[4, 4, 3], 4);
        let tape = Tape::new();
        let params = store.watch_all(&tape);
        let empty = realized_pairwise(4, &[], None);
        let base = gcn_forward(&tape, &params, &x, &empty).unwrap().to_vec();

        // Perturb node 3's features; scores of nodes 0..2 must not move.
        let mut data = x.to_vec();
        for v in data[3 * 12..].iter_mut() {
            *v += 0.5;
        }
        let x2 = Tensor::from_vec(vec![4, 4, 3], data).unwrap();
        let bumped = gcn_forward(&tape, &params, &x2, &empty).unwrap().to_vec();
        for i in 0..3 {
            assert_eq!(base[i], bumped[i]);
        }
        assert_ne!(base[3], bumped[3]);
    }

    #[test]
    fn complete_graph_with_identical_features_scores_identically() {
        let store = store_for(5, 3, 2, 5);
        let row = random_tensor(&[1, 3, 2], 6).to_vec();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let x = Tensor::from_vec(vec![4, 3, 2], data).unwrap();
        let edges: Vec<(usize, usize)> = (0..4)
            .flat_map(|i| ((i + 1)..4).map(move |j| (i, j)))
            .collect();
        let tape = Tape::new();
        let params = store.watch_all(&tape);
        let g = realized_pairwise(4, &edges, None);
        let s = gcn_forward(&tape, &params, &x, &g).unwrap().to_vec();
        for v in &s {
            assert!((v - s[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_adjacency_matches_direct_oracle() {
        let n = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 4)];
        let attrs = Tensor::from_vec(
            vec![2, n, n],
            (0..2 * n * n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let mut graph = realized_pairwise(n, &edges, None);
        // Mask the raw attributes to the structure the same way training does.
        let tape = Tape::new();
        graph.masked = crate::realize::mask_attributes(&tape, &attrs, &graph.binary).unwrap();
        let ahat = normalized_adjacency(&tape, &graph).unwrap().to_vec();

        // Oracle: scalar loops over the stated formula.
        let masked = graph.masked.to_vec();
        let mut aprime = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mean = (masked[i * n + j] + masked[n * n + i * n + j]) / 2.0;
                aprime[i * n + j] = graph.binary[i * n + j] * (1.0 + mean);
                if i == j {
                    aprime[i * n + j] += 1.0;
                }
            }
        }
        let deg: Vec<f64> = (0..n)
            .map(|i| aprime[i * n..(i + 1) * n].iter().sum::<f64>().max(1e-6))
            .collect();
        for i in 0..n {
            for j in 0..n {
                let want = deg[i].powf(-0.5) * aprime[i * n + j] * deg[j].powf(-0.5);
                assert!((ahat[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_rejects_hyper_graphs_and_vice_versa() {
        let store = store_for(4, 3, 2, 8);
        let x = random_tensor(&[3, 3, 2], 9);
        let tape = Tape::new();
        let params = store.watch_all(&tape);
        let hyper = Realized::from_binary(GraphMode::Hyper, 3, vec![1.0; 9]);
        assert!(matches!(
            gcn_forward(&tape, &params, &x, &hyper),
            Err(BackboneError::WrongMode { kind: "gcn", .. })
        ));
        let pair = realized_pairwise(3, &[(0, 1)], None);
        assert!(matches!(
            hgcn_forward(&tape, &params, &x, &pair),
            Err(BackboneError::WrongMode { kind: "hgcn", .. })
        ));
    }

    #[test]
    fn hyper_operator_matches_assembled_oracle() {
        let n = 5;
        // Three live hyperedges over five nodes; node 4 uncovered.
        let rows = [
            1.0, 1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 1.0, 1.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, 0.0,
        ];
        let got = hyper_operator(n, &rows);

        // Oracle: dense matrix products D_v^{-1/2} H D_e^{-1} H^T D_v^{-1/2}.
        let e = 3;
        let mut h = vec![0.0; n * e]; // nodes x edges
        for r in 0..e {
            for j in 0..n {
                h[j * e + r] = rows[r * n + j];
            }
        }
        let dv: Vec<f64> = (0..n).map(|i| (0..e).map(|r| h[i * e + r]).sum()).collect();
        let de: Vec<f64> = (0..e).map(|r| (0..n).map(|i| h[i * e + r]).sum()).collect();
        let mut want = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for r in 0..e {
                    acc += h[i * e + r] * h[j * e + r] / de[r];
                }
                let di = if dv[i] > 0.0 { dv[i].powf(-0.5) } else { 0.0 };
                let dj = if dv[j] > 0.0 { dv[j].powf(-0.5) } else { 0.0 };
                want[i * n + j] = di * acc * dj;
            }
        }
        want[4 * n + 4] = 1.0; // uncovered node passes through
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_hyperedges_make_an_identity_operator() {
        let n = 4;
        let mut rows = vec![0.0; n * n];
        for i in 0..n {
            rows[i * n + i] = 1.0;
        }
        let g = hyper_operator(n, &rows);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(g[i * n + j], want);
            }
        }
    }

    #[test]
    fn no_live_hyperedges_degrades_to_the_mlp() {
        let store = store_for(5, 3, 2, 10);
        let x = random_tensor(&[4, 3, 2], 11);
        let tape = Tape::new();
        let params = store.watch_all(&tape);
        let dead = Realized::from_binary(GraphMode::Hyper, 4, vec![0.0; 16]);
        let via_hgcn = hgcn_forward(&tape, &params, &x, &dead).unwrap();
        let via_mlp = mlp_forward(&tape, &params, &x).unwrap();
        assert_eq!(via_hgcn.to_vec(), via_mlp.to_vec());
    }

    #[test]
    fn one_covering_hyperedge_with_identical_features_scores_identically() {
        let store = store_for(5, 3, 2, 12);
        let row = random_tensor(&[1, 3, 2], 13).to_vec();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let x = Tensor::from_vec(vec![4, 3, 2], data).unwrap();
        let mut binary = vec![0.0; 16];
        for j in 0..4 {
            binary[j] = 1.0; // row 0 covers everyone; rows 1..3 dead
        }
        let tape = Tape::new();
        let params = store.watch_all(&tape);
        let g = Realized::from_binary(GraphMode::Hyper, 4, binary);
        let s = hgcn_forward(&tape, &params, &x, &g).unwrap().to_vec();
        for v in &s {
            assert!((v - s[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_are_permutation_equivariant() {
        let n = 5;
        let store = store_for(6, 4, 3, 14);
        let x = random_tensor(&[n, 4, 3], 15);
        let edges = [(0, 1), (1, 2), (0, 3), (3, 4)];
        let perm = [3, 0, 4, 1, 2]; // new index of each old node

        let tape = Tape::new();
        let params = store.watch_all(&tape);
        let base = gcn_forward(&tape, &params, &x, &realized_pairwise(n, &edges, None))
            .unwrap()
            .to_vec();

        let xv = x.to_vec();
        let mut permuted = vec![0.0; xv.len()];
        for old in 0..n {
            let new = perm[old];
            permuted[new * 12..(new + 1) * 12].copy_from_slice(&xv[old * 12..(old + 1) * 12]);
        }
        let xp = Tensor::from_vec(vec![n, 4, 3], permuted).unwrap();
        let pedges: Vec<(usize, usize)> = edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        let moved = gcn_forward(&tape, &params, &xp, &realized_pairwise(n, &pedges, None))
            .unwrap()
            .to_vec();
        for old in 0..n {
            assert!((base[old] - moved[perm[old]]).abs() < 1e-12);
        }
    }

    #[test]
    fn gcn_parameter_gradients_match_finite_differences() {
        let n = 5;
        let (l, m, hidden) = (4, 3, 6);
        let x = random_tensor(&[n, l, m], 16);
        let raw_attr = random_tensor(&[2, n, n], 17);
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)];
        let target = random_tensor(&[n], 18);

        let build = |theta: &[f64]| -> ParamStore<f64> {
            let mut s = store_for(hidden, l, m, 19);
            let mut at = 0;
            for name in s.names() {
                let shape = s.get(&name).shape().to_vec();
                let count: usize = shape.iter().product();
                s.set(&name, Tensor::from_vec(shape, theta[at..at + count].to_vec()).unwrap());
                at += count;
            }
            s
        };
        let forward = |s: &ParamStore<f64>| -> (Tape<f64>, WatchedParams<f64>, Tensor<f64>) {
            let tape = Tape::new();
            let params = s.watch_all(&tape);
            let mut g = realized_pairwise(n, &edges, None);
            g.masked = crate::realize::mask_attributes(&tape, &raw_attr, &g.binary).unwrap();
            let scores = gcn_forward(&tape, &params, &x, &g).unwrap();
            let loss = crate::loss::ranking_loss(&tape, &scores, &target, 1.0).unwrap();
            (tape, params, loss)
        };

        let base = store_for(hidden, l, m, 19);
        let theta: Vec<f64> = base
            .names()
            .iter()
            .flat_map(|name| base.get(name).to_f64_vec())
            .collect();

        let (tape, params, loss) = forward(&base);
        let grads = tape.backward(&loss).unwrap();
        let analytic: Vec<f64> = base
            .names()
            .iter()
            .flat_map(|name| grads.grad_or_zeros(params.get(name).unwrap()).to_f64_vec())
            .collect();

        let numeric = central_diff(&theta, FD_STEP, |t| {
            let s = build(t);
            let (_tape, _params, loss) = forward(&s);
            loss.item()
        });
        assert!(max_rel_error(&analytic, &numeric) < 1e-4);
    }
}
