//! Discretizing learned edge attributes: threshold the per-pair mean
//! magnitude to a binary structure, then mask the attributes so only
//! surviving entries keep their values (and their gradients). The binary
//! decision itself is constant for gradients — no straight-through
//! estimator is used.

use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphMode {
    Pairwise,
    Hyper,
}

/// A realized graph: binary structure plus the attribute tensor masked to
/// it. In pairwise mode `binary` is an adjacency matrix; in hyper mode row
/// `i` lists the members of hyperedge `i`, and an all-zero row means the
/// hyperedge does not exist.
#[derive(Debug, Clone)]
pub struct Realized<S: Scalar> {
    pub mode: GraphMode,
    n: usize,
    /// Row-major `n x n` zeros and ones.
    pub binary: Vec<f64>,
    /// `[z,n,n]`; zero wherever `binary` is zero.
    pub masked: Tensor<S>,
}

impl<S: Scalar> Realized<S> {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Hyper mode: indices of rows with at least one member.
    pub fn live_rows(&self) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| self.binary[i * self.n..(i + 1) * self.n].iter().any(|&v| v != 0.0))
            .collect()
    }

    /// A realized graph carrying the prior structure unchanged: binary from
    /// the given matrix, attributes all zero (so attribute-aware backbones
    /// reduce to plain binary propagation).
    pub fn from_binary(mode: GraphMode, n: usize, binary: Vec<f64>) -> Self {
        assert_eq!(binary.len(), n * n);
        Self {
            mode,
            n,
            binary,
            masked: Tensor::zeros(&[1, n, n]),
        }
    }
}

fn check_attr_shape<S: Scalar>(adj_attr: &Tensor<S>) -> Result<usize, ShapeError> {
    let shape = adj_attr.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(ShapeError::Mismatch {
            expected: vec![0, shape.get(1).copied().unwrap_or(0), shape.get(1).copied().unwrap_or(0)],
            actual: shape.to_vec(),
        });
    }
    Ok(shape[1])
}

/// Per-pair score: `|mean over z of adj_attr[:,i,j]|`, row-major `n x n`.
pub fn mean_magnitude<S: Scalar>(adj_attr: &Tensor<S>) -> Result<Vec<f64>, ShapeError> {
    let n = check_attr_shape(adj_attr)?;
    let z = adj_attr.shape()[0];
    let data = adj_attr.to_f64_vec();
    let mut out = vec![0.0; n * n];
    for (cell, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for zi in 0..z {
            acc += data[zi * n * n + cell];
        }
        *slot = (acc / z as f64).abs();
    }
    Ok(out)
}

/// Binary structure: entry 1 exactly where the mean magnitude strictly
/// exceeds `tau`. Raising `tau` can only remove entries.
pub fn threshold_edges<S: Scalar>(adj_attr: &Tensor<S>, tau: f64) -> Result<Vec<f64>, ShapeError> {
    Ok(mean_magnitude(adj_attr)?
        .into_iter()
        .map(|m| if m > tau { 1.0 } else { 0.0 })
        .collect())
}

/// Elementwise product with the binary structure, broadcast across the
/// channel axis. Gradients flow through retained entries only; the binary
/// matrix is a constant.
pub fn mask_attributes<S: Scalar>(
    tape: &Tape<S>,
    adj_attr: &Tensor<S>,
    binary: &[f64],
) -> Result<Tensor<S>, ShapeError> {
    let n = check_attr_shape(adj_attr)?;
    let mask = Tensor::from_f64_slice(&[n, n], binary)?;
    tape.mul(adj_attr, &mask)
}

/// Threshold + mask in pairwise mode.
pub fn realize_pairwise<S: Scalar>(
    tape: &Tape<S>,
    adj_attr: &Tensor<S>,
    tau: f64,
) -> Result<Realized<S>, ShapeError> {
    let n = check_attr_shape(adj_attr)?;
    let binary = threshold_edges(adj_attr, tau)?;
    let masked = mask_attributes(tape, adj_attr, &binary)?;
    Ok(Realized {
        mode: GraphMode::Pairwise,
        n,
        binary,
        masked,
    })
}

/// Threshold + mask in hyper mode: the same entry rule, but row `i` is read
/// as hyperedge `i`'s membership; rows that threshold to all zeros are dead
/// hyperedges. The live count can never exceed the node count.
pub fn realize_hypergraph<S: Scalar>(
    tape: &Tape<S>,
    adj_attr: &Tensor<S>,
    tau: f64,
) -> Result<Realized<S>, ShapeError> {
    let n = check_attr_shape(adj_attr)?;
    let binary = threshold_edges(adj_attr, tau)?;
    let masked = mask_attributes(tape, adj_attr, &binary)?;
    Ok(Realized {
        mode: GraphMode::Hyper,
        n,
        binary,
        masked,
    })
}
