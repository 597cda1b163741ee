//! Short-horizon relation encoder: multi-scale residual convolutions over
//! each stock's lookback window, inter-node self-attention treating stocks
//! as tokens, and a per-channel Gram product that emits the day's temporary
//! edge-attribute tensor.
//!
//! Shape chain for `n` stocks, lookback `l`, `m` features, kernel set of
//! size `K`, `z` channels and `h` heads:
//! `[n,l,m] -> [n,z,K*l] -> [z,n,h*K*l] -> [z,n,n]`.

use rand_chacha::ChaCha8Rng;

use crate::params::WatchedParams;
use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tape, Tensor};

/// Negative slope shared by every leaky rectifier in the model.
pub const LEAK: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct SplConfig {
    /// Odd convolution widths, one multi-scale branch per entry.
    pub kernel_sizes: Vec<usize>,
    /// Channels per branch (`z`).
    pub channels_z: usize,
    /// Independent single-head encoder layers whose outputs concatenate.
    pub heads: usize,
    /// Hidden width of each encoder's feed-forward pair.
    pub ffn_dim: usize,
    /// Dropout probability on the attention and feed-forward write-backs;
    /// active only when a training RNG is supplied.
    pub dropout: f64,
}

impl Default for SplConfig {
    fn default() -> Self {
        Self {
            kernel_sizes: vec![3, 5, 7],
            channels_z: 4,
            heads: 1,
            ffn_dim: 128,
            dropout: 0.1,
        }
    }
}

impl SplConfig {
    /// Length of the concatenated temporal axis after the conv branches.
    pub fn encoded_len(&self, lookback: usize) -> usize {
        self.kernel_sizes.len() * lookback
    }

    /// Feature width of the attention output (heads concatenated).
    pub fn out_dim(&self, lookback: usize) -> usize {
        self.heads * self.encoded_len(lookback)
    }
}

/// Registers every encoder parameter under the `spl.` namespace.
pub fn register_params<S: Scalar>(
    store: &mut crate::params::ParamStore<S>,
    cfg: &SplConfig,
    features: usize,
    lookback: usize,
) {
    let z = cfg.channels_z;
    for &k in &cfg.kernel_sizes {
        store.add_uniform(&format!("spl.k{k}.conv0.w"), &[z, features, k], features * k);
        store.add_zeros(&format!("spl.k{k}.conv0.b"), &[z]);
        for i in 1..4 {
            store.add_uniform(&format!("spl.k{k}.conv{i}.w"), &[z, z, k], z * k);
            store.add_zeros(&format!("spl.k{k}.conv{i}.b"), &[z]);
        }
    }
    let d = cfg.encoded_len(lookback);
    for h in 0..cfg.heads {
        for w in ["wq", "wk", "wv", "wo"] {
            store.add_uniform(&format!("spl.h{h}.{w}"), &[d, d], d);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            store.add_zeros(&format!("spl.h{h}.{b}"), &[d]);
        }
        store.add_uniform(&format!("spl.h{h}.ff1.w"), &[d, cfg.ffn_dim], d);
        store.add_zeros(&format!("spl.h{h}.ff1.b"), &[cfg.ffn_dim]);
        store.add_uniform(&format!("spl.h{h}.ff2.w"), &[cfg.ffn_dim, d], cfg.ffn_dim);
        store.add_zeros(&format!("spl.h{h}.ff2.b"), &[d]);
    }
}

fn p<'a, S: Scalar>(params: &'a WatchedParams<S>, name: &str) -> &'a Tensor<S> {
    params
        .get(name)
        .unwrap_or_else(|| panic!("parameter {name} was never registered"))
}

/// `x + leaky_relu(layer_norm(conv(x)))` with the inner convolution
/// preserving both channel count and length, so the skip connection is
/// well-formed. Zero conv weights make the block an exact identity.
pub fn res_conv_block<S: Scalar>(
    tape: &Tape<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>, ShapeError> {
    let c = tape.conv1d(x, w, b)?;
    let normed = tape.layer_norm(&c, 2)?;
    tape.add(x, &tape.leaky_relu(&normed, LEAK))
}

/// Per kernel size: entry conv (`m` -> `z`), residual block, mid conv
/// (`z` -> `z`), residual block; branch outputs concatenate along time.
/// Input `[n,l,m]`, output `[n,z,K*l]`.
pub fn multi_scale_encode<S: Scalar>(
    tape: &Tape<S>,
    params: &WatchedParams<S>,
    cfg: &SplConfig,
    x: &Tensor<S>,
) -> Result<Tensor<S>, ShapeError> {
    let xt = tape.transpose(x, &[0, 2, 1])?; // [n, m, l] for temporal convs
    let mut branches = Vec::with_capacity(cfg.kernel_sizes.len());
    for &k in &cfg.kernel_sizes {
        let get = |i: usize, kind: &str| p(params, &format!("spl.k{k}.conv{i}.{kind}"));
        let mut h = tape.conv1d(&xt, get(0, "w"), get(0, "b"))?;
        h = res_conv_block(tape, &h, get(1, "w"), get(1, "b"))?;
        h = tape.conv1d(&h, get(2, "w"), get(2, "b"))?;
        h = res_conv_block(tape, &h, get(3, "w"), get(3, "b"))?;
        branches.push(h);
    }
    let refs: Vec<&Tensor<S>> = branches.iter().collect();
    tape.concat(&refs, 2)
}

/// One pre-norm encoder layer for head `h` over tokens along axis 1 of
/// `x: [z,n,d]`. Returns the layer output `x + attention + feed-forward`
/// together with the row-stochastic attention weights `[z,n,n]`.
pub fn encode_head<S: Scalar>(
    tape: &Tape<S>,
    params: &WatchedParams<S>,
    cfg: &SplConfig,
    h: usize,
    x: &Tensor<S>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<S>, Tensor<S>), ShapeError> {
    let d = *x.shape().last().expect("rank 3 input");
    let g = |name: &str| p(params, &format!("spl.h{h}.{name}"));
    let drop = |t: &Tensor<S>, rng: &mut Option<&mut ChaCha8Rng>| match rng {
        Some(r) if cfg.dropout > 0.0 => tape.dropout(t, cfg.dropout, *r),
        _ => t.clone(),
    };

    let ln1 = tape.layer_norm(x, 2)?;
    let q = tape.add(&tape.matmul(&ln1, g("wq"))?, g("bq"))?;
    let k = tape.add(&tape.matmul(&ln1, g("wk"))?, g("bk"))?;
    let v = tape.add(&tape.matmul(&ln1, g("wv"))?, g("bv"))?;
    let scores = tape.scale(
        &tape.matmul(&q, &tape.transpose(&k, &[0, 2, 1])?)?,
        1.0 / (d as f64).sqrt(),
    );
    let probs = tape.softmax(&scores, 2)?;
    let ctx = tape.matmul(&probs, &v)?;
    let a = drop(&tape.add(&tape.matmul(&ctx, g("wo"))?, g("bo"))?, &mut rng);

    let u = tape.add(x, &a)?;
    let ln2 = tape.layer_norm(&u, 2)?;
    let mid = tape.relu(&tape.add(&tape.matmul(&ln2, g("ff1.w"))?, g("ff1.b"))?);
    let f = drop(&tape.add(&tape.matmul(&mid, g("ff2.w"))?, g("ff2.b"))?, &mut rng);
    Ok((tape.add(&u, &f)?, probs))
}

/// Transposes `x_conv: [n,z,d]` so channels lead and stocks are tokens,
/// runs each head's encoder layer, and concatenates the head outputs along
/// the feature axis: output `[z,n,heads*d]`.
pub fn attend_nodes<S: Scalar>(
    tape: &Tape<S>,
    params: &WatchedParams<S>,
    cfg: &SplConfig,
    x_conv: &Tensor<S>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<S>, ShapeError> {
    let x = tape.transpose(x_conv, &[1, 0, 2])?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (y, _probs) = encode_head(tape, params, cfg, h, &x, rng.as_deref_mut())?;
        heads.push(y);
    }
    let refs: Vec<&Tensor<S>> = heads.iter().collect();
    tape.concat(&refs, 2)
}

/// Batched Gram product: `adj[z] = y[z] * y[z]^T`, symmetric per channel
/// with non-negative diagonal.
pub fn temp_adj<S: Scalar>(tape: &Tape<S>, x_enc: &Tensor<S>) -> Result<Tensor<S>, ShapeError> {
    tape.matmul(x_enc, &tape.transpose(x_enc, &[0, 2, 1])?)
}

/// Full encoder: lookback window `[n,l,m]` to temporary edge attributes
/// `[z,n,n]`.
pub fn spl_forward<S: Scalar>(
    tape: &Tape<S>,
    params: &WatchedParams<S>,
    cfg: &SplConfig,
    x: &Tensor<S>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<S>, ShapeError> {
    let conv = multi_scale_encode(tape, params, cfg, x)?;
    let enc = attend_nodes(tape, params, cfg, &conv, rng)?;
    temp_adj(tape, &enc)
}
