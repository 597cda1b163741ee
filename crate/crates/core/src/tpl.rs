//! Long-horizon relation memory: an LSTM-style gated recurrence over the
//! daily edge-attribute tensors. Each step fuses the day's temporary
//! attributes with the remembered adjacency, updates a cell state, and
//! emits the day's final attributes, which become the next day's memory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graphs::{hyper_to_pairwise, HyperGraph, PairGraph};
use crate::params::{ParamStore, WatchedParams};
use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tape, Tensor};

/// Recurrent state: the remembered adjacency attributes and the cell, both
/// `[z,n,n]`. The cell starts at zero for every sequence.
#[derive(Debug, Clone)]
pub struct TplState<S: Scalar> {
    pub memory: Tensor<S>,
    pub cell: Tensor<S>,
}

impl<S: Scalar> TplState<S> {
    /// Copies the state values off whatever tape produced them, so a new
    /// truncation window starts with constants.
    pub fn detach(&self) -> Self {
        Self {
            memory: self.memory.detach(),
            cell: self.cell.detach(),
        }
    }
}

/// Where the initial adjacency memory comes from.
#[derive(Debug, Clone)]
pub enum MemoryInit {
    /// Binary adjacency of a pairwise prior graph.
    Pairwise(PairGraph),
    /// Hypergraph prior, clique-expanded to pairwise form first.
    Hyper(HyperGraph),
    /// Uniform values in [-0.1, 0.1), reproducible from the seed.
    Random { seed: u64 },
}

/// Builds the day-zero state: the prior adjacency (or random values)
/// replicated across all `z` channels, and a zero cell.
pub fn init_state<S: Scalar>(
    init: &MemoryInit,
    z: usize,
    n: usize,
) -> Result<TplState<S>, ShapeError> {
    let slice: Vec<f64> = match init {
        MemoryInit::Pairwise(g) => {
            if g.num_nodes() != n {
                return Err(ShapeError::Mismatch {
                    expected: vec![n, n],
                    actual: vec![g.num_nodes(), g.num_nodes()],
                });
            }
            g.adjacency().to_vec()
        }
        MemoryInit::Hyper(h) => {
            if h.num_nodes() != n {
                return Err(ShapeError::Mismatch {
                    expected: vec![n, n],
                    actual: vec![h.num_nodes(), h.num_nodes()],
                });
            }
            hyper_to_pairwise(h).adjacency().to_vec()
        }
        MemoryInit::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..n * n).map(|_| rng.gen_range(-0.1..0.1)).collect()
        }
    };
    let mut data = Vec::with_capacity(z * n * n);
    for _ in 0..z {
        data.extend_from_slice(&slice);
    }
    Ok(TplState {
        memory: Tensor::from_f64_slice(&[z, n, n], &data)?,
        cell: Tensor::zeros(&[z, n, n]),
    })
}

/// Registers the four gate weight matrices (`[n, 2n]`) and biases (`[n]`)
/// under the `tpl.` namespace.
pub fn register_params<S: Scalar>(store: &mut ParamStore<S>, n: usize) {
    for gate in ["f", "i", "c", "o"] {
        store.add_uniform(&format!("tpl.w_{gate}"), &[n, 2 * n], 2 * n);
        store.add_zeros(&format!("tpl.b_{gate}"), &[n]);
    }
}

/// One recurrence step. The day's temporary attributes and the remembered
/// adjacency concatenate along the column axis; each gate right-multiplies
/// by its weight transpose (bias shared across rows):
///
/// ```text
/// A      = [adj_temp ; memory]            [z,n,2n]
/// f,i,o  = sigmoid(A W^T + b)             [z,n,n]
/// c_hat  = tanh(A W_c^T + b_c)
/// C_t    = f * C_{t-1} + i * c_hat
/// out    = o * tanh(C_t)
/// ```
///
/// The output doubles as the next state's memory.
pub fn tpl_step<S: Scalar>(
    tape: &Tape<S>,
    params: &WatchedParams<S>,
    adj_temp: &Tensor<S>,
    state: &TplState<S>,
) -> Result<(Tensor<S>, TplState<S>), ShapeError> {
    let a = tape.concat(&[adj_temp, &state.memory], 2)?;
    let gate = |name: &str| -> Result<Tensor<S>, ShapeError> {
        let w = params
            .get(&format!("tpl.w_{name}"))
            .expect("gate weights registered");
        let b = params
            .get(&format!("tpl.b_{name}"))
            .expect("gate bias registered");
        tape.add(&tape.matmul(&a, &tape.transpose(w, &[1, 0])?)?, b)
    };
    let f = tape.sigmoid(&gate("f")?);
    let i = tape.sigmoid(&gate("i")?);
    let c_hat = tape.tanh(&gate("c")?);
    let o = tape.sigmoid(&gate("o")?);

    let c_t = tape.add(&tape.mul(&f, &state.cell)?, &tape.mul(&i, &c_hat)?)?;
    let out = tape.mul(&o, &tape.tanh(&c_t))?;
    let next = TplState {
        memory: out.clone(),
        cell: c_t,
    };
    Ok((out, next))
}

/// Chronological fold of [`tpl_step`] over a day sequence. Gradients flow
/// through at most `bptt_window` consecutive steps: each window runs on a
/// fresh tape and the state is detached at window boundaries (`0` means no
/// truncation). Forward values do not depend on the window size.
pub fn run_sequence<S: Scalar>(
    store: &ParamStore<S>,
    adj_temps: &[Tensor<S>],
    init: &TplState<S>,
    bptt_window: usize,
) -> Result<(Vec<Tensor<S>>, TplState<S>), ShapeError> {
    let window = if bptt_window == 0 {
        adj_temps.len().max(1)
    } else {
        bptt_window
    };
    let mut outputs = Vec::with_capacity(adj_temps.len());
    let mut state = init.detach();
    for chunk in adj_temps.chunks(window) {
        let tape: Tape<S> = Tape::new();
        let params = store.watch_all(&tape);
        let mut local = state.clone();
        for adj in chunk {
            let (out, next) = tpl_step(&tape, &params, &adj.detach(), &local)?;
            outputs.push(out.detach());
            local = next;
        }
        state = local.detach();
    }
    Ok((outputs, state))
}
