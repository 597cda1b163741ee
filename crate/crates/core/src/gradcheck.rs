//! Runnable finite-difference audit of every gradient in the crate, from
//! single tape ops through module forwards up to the full
//! encode→recur→realize→propagate→loss composite.
//!
//! Each check reruns the forward pass with inputs nudged by ±1e-5 and
//! compares the differenced slope against the tape's reverse sweep; the
//! oracle never touches the backward code. The suite backs the `gradcheck`
//! command, which exits nonzero if any check is out of tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneKind};
use crate::loss::ranking_loss;
use crate::model::{forward_day, Model, ModelConfig, Paradigm};
use crate::params::{ParamStore, WatchedParams};
use crate::realize::{self, GraphMode, Realized};
use crate::scalar::Scalar;
use crate::spl::{self, SplConfig};
use crate::tensor::gradcheck::{central_diff, max_rel_error, FD_STEP};
use crate::tensor::{Tape, Tensor};
use crate::tpl::{self, MemoryInit};

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// All checks of one suite run.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub results: Vec<CheckResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failed(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }

    /// One aligned line per check, worst offenders intact.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "{:<44} max rel err {:>12.4e}  tol {:>8.1e}  {}\n",
                r.name,
                r.max_rel_error,
                r.tolerance,
                if r.passed() { "pass" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "{} checks, {} failed\n",
            self.results.len(),
            self.failed().len()
        ));
        out
    }
}

/// Runs everything: per-op checks at 1e-6, module forwards at their stated
/// tolerances, and the full composite at 1e-4.
pub fn run_full_suite(seed: u64) -> Report {
    let mut results = Vec::new();
    op_checks(seed, &mut results);
    module_checks(seed, &mut results);
    results.push(composite_check(seed));
    Report { results }
}

// ── Harness ─────────────────────────────────────────────────────────────

/// Fixed, non-degenerate readout weights so ops with constrained outputs
/// (softmax rows summing to one, normalized layers) still produce
/// informative gradients.
fn readout_weights(len: usize) -> Vec<f64> {
    (0..len).map(|i| (i as f64 * 0.739_085_133_2).sin() + 0.1).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform in [-1,1] but at least `margin` from zero, keeping piecewise
/// ops (relu, abs, clamp) away from their kinks under ±1e-5 probes.
fn uniform_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(margin..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Checks `d readout(f(inputs)) / d inputs` against finite differences,
/// treating all inputs as one flattened parameter vector.
fn check_inputs<F>(
    results: &mut Vec<CheckResult>,
    name: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    f: F,
) where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Tensor<f64> + Sync,
{
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let theta0: Vec<f64> = inputs.iter().flat_map(Tensor::to_f64_vec).collect();

    let rebuild = |theta: &[f64]| -> Vec<Tensor<f64>> {
        let mut out = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (shape, &len) in shapes.iter().zip(&sizes) {
            out.push(Tensor::from_f64_slice(shape, &theta[offset..offset + len]).unwrap());
            offset += len;
        }
        out
    };

    let probe_tape = Tape::new();
    let c = readout_weights(f(&probe_tape, inputs).numel());

    let numeric = central_diff(&theta0, FD_STEP, |theta| {
        let tape = Tape::new();
        let y = f(&tape, &rebuild(theta));
        dot(&y.to_f64_vec(), &c)
    });

    let tape = Tape::new();
    let watched: Vec<Tensor<f64>> = rebuild(&theta0).iter().map(|t| tape.watch(t)).collect();
    let y = f(&tape, &watched);
    let cw = Tensor::from_f64_slice(y.shape(), &c).unwrap();
    let loss = tape.sum(&tape.mul(&y, &cw).unwrap());
    let grads = tape.backward(&loss).unwrap();
    let analytic: Vec<f64> = watched
        .iter()
        .flat_map(|t| grads.grad_or_zeros(t).to_f64_vec())
        .collect();

    results.push(CheckResult {
        name: name.to_string(),
        max_rel_error: max_rel_error(&analytic, &numeric),
        tolerance,
    });
}

fn flatten_store(store: &ParamStore<f64>) -> Vec<f64> {
    store
        .names()
        .iter()
        .flat_map(|n| store.get(n).to_f64_vec())
        .collect()
}

fn store_from_flat(template: &ParamStore<f64>, theta: &[f64]) -> ParamStore<f64> {
    let mut out = ParamStore::new(template.seed());
    let mut offset = 0;
    for name in template.names() {
        let shape = template.get(&name).shape().to_vec();
        let len: usize = shape.iter().product();
        out.insert(
            &name,
            Tensor::from_f64_slice(&shape, &theta[offset..offset + len]).unwrap(),
        );
        offset += len;
    }
    out
}

/// Checks `d readout(f(params)) / d every parameter` against finite
/// differences over the flattened store.
fn check_params<F>(
    results: &mut Vec<CheckResult>,
    name: &str,
    store: &ParamStore<f64>,
    tolerance: f64,
    f: F,
) where
    F: Fn(&Tape<f64>, &WatchedParams<f64>) -> Tensor<f64> + Sync,
{
    let theta0 = flatten_store(store);
    let probe_tape = Tape::new();
    let c = readout_weights(f(&probe_tape, &store.watch_all(&probe_tape)).numel());

    let numeric = central_diff(&theta0, FD_STEP, |theta| {
        let tape = Tape::new();
        let s = store_from_flat(store, theta);
        let y = f(&tape, &s.watch_all(&tape));
        dot(&y.to_f64_vec(), &c)
    });

    let tape = Tape::new();
    let watched = store.watch_all(&tape);
    let y = f(&tape, &watched);
    let cw = Tensor::from_f64_slice(y.shape(), &c).unwrap();
    let loss = tape.sum(&tape.mul(&y, &cw).unwrap());
    let grads = tape.backward(&loss).unwrap();
    let analytic: Vec<f64> = store
        .names()
        .iter()
        .flat_map(|n| watched.grad_by_name(&grads, n).to_f64_vec())
        .collect();

    results.push(CheckResult {
        name: name.to_string(),
        max_rel_error: max_rel_error(&analytic, &numeric),
        tolerance,
    });
}

/// Midpoint of the widest gap in the mean attribute magnitudes: a
/// threshold no ±1e-5 probe can push an edge across.
fn kink_free_tau(attrs: &Tensor<f64>) -> f64 {
    let mut mags = realize::mean_magnitude(attrs).unwrap();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best = (0.0, mags[0] + 1.0);
    for w in mags.windows(2) {
        let gap = w[1] - w[0];
        if gap > best.0 {
            best = (gap, 0.5 * (w[0] + w[1]));
        }
    }
    best.1
}

// ── Per-op checks (tolerance 1e-6) ──────────────────────────────────────

const OP_TOL: f64 = 1e-6;

fn op_checks(seed: u64, results: &mut Vec<CheckResult>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
    let r = &mut rng;

    let a = uniform(r, &[3, 4], -1.0, 1.0);
    let b = uniform(r, &[4, 2], -1.0, 1.0);
    check_inputs(results, "op.matmul", &[a, b], OP_TOL, |t, i| {
        t.matmul(&i[0], &i[1]).unwrap()
    });

    let a = uniform(r, &[2, 3, 4], -1.0, 1.0);
    let b = uniform(r, &[4, 2], -1.0, 1.0);
    check_inputs(results, "op.matmul_batched", &[a, b], OP_TOL, |t, i| {
        t.matmul(&i[0], &i[1]).unwrap()
    });

    let x = uniform(r, &[2, 3, 8], -1.0, 1.0);
    let w = uniform(r, &[4, 3, 5], -1.0, 1.0);
    let bias = uniform(r, &[4], -1.0, 1.0);
    check_inputs(results, "op.conv1d", &[x, w, bias], OP_TOL, |t, i| {
        t.conv1d(&i[0], &i[1], &i[2]).unwrap()
    });

    let a = uniform(r, &[3, 4], -1.0, 1.0);
    let b = uniform(r, &[3, 4], -1.0, 1.0);
    check_inputs(results, "op.add", &[a, b], OP_TOL, |t, i| {
        t.add(&i[0], &i[1]).unwrap()
    });

    let a = uniform(r, &[3, 4], -1.0, 1.0);
    let b = uniform(r, &[4], -1.0, 1.0);
    check_inputs(results, "op.add_broadcast", &[a, b], OP_TOL, |t, i| {
        t.add(&i[0], &i[1]).unwrap()
    });

    let a = uniform(r, &[3, 4], -1.0, 1.0);
    let b = uniform(r, &[3, 4], -1.0, 1.0);
    check_inputs(results, "op.sub", &[a, b], OP_TOL, |t, i| {
        t.sub(&i[0], &i[1]).unwrap()
    });

    let a = uniform(r, &[3, 4], -1.0, 1.0);
    let b = uniform(r, &[3, 1], -1.0, 1.0);
    check_inputs(results, "op.mul_broadcast", &[a, b], OP_TOL, |t, i| {
        t.mul(&i[0], &i[1]).unwrap()
    });

    let a = uniform(r, &[2, 3], -1.0, 1.0);
    let b = uniform(r, &[2, 2], -1.0, 1.0);
    check_inputs(results, "op.concat", &[a, b], OP_TOL, |t, i| {
        t.concat(&[&i[0], &i[1]], 1).unwrap()
    });

    let x = uniform(r, &[2, 3, 4], -1.0, 1.0);
    check_inputs(results, "op.transpose", &[x], OP_TOL, |t, i| {
        t.transpose(&i[0], &[2, 0, 1]).unwrap()
    });

    let x = uniform(r, &[2, 6], -1.0, 1.0);
    check_inputs(results, "op.reshape", &[x], OP_TOL, |t, i| {
        t.reshape(&i[0], &[3, 4]).unwrap()
    });

    let x = uniform(r, &[3, 4], -1.0, 1.0);
    check_inputs(results, "op.sigmoid", &[x], OP_TOL, |t, i| t.sigmoid(&i[0]));

    let x = uniform(r, &[3, 4], -1.0, 1.0);
    check_inputs(results, "op.tanh", &[x], OP_TOL, |t, i| t.tanh(&i[0]));

    let x = uniform_off_zero(r, &[3, 4], 0.05);
    check_inputs(results, "op.relu", &[x], OP_TOL, |t, i| t.relu(&i[0]));

    let x = uniform_off_zero(r, &[3, 4], 0.05);
    check_inputs(results, "op.leaky_relu", &[x], OP_TOL, |t, i| {
        t.leaky_relu(&i[0], 0.01)
    });

    let x = uniform_off_zero(r, &[3, 4], 0.05);
    check_inputs(results, "op.abs", &[x], OP_TOL, |t, i| t.abs(&i[0]));

    let x = uniform(r, &[2, 5], -1.0, 1.0);
    check_inputs(results, "op.softmax", &[x], OP_TOL, |t, i| {
        t.softmax(&i[0], 1).unwrap()
    });

    let x = uniform(r, &[2, 3, 6], -1.0, 1.0);
    check_inputs(results, "op.layer_norm", &[x], OP_TOL, |t, i| {
        t.layer_norm(&i[0], 2).unwrap()
    });

    let a = uniform(r, &[7], -1.0, 1.0);
    let b = uniform(r, &[7], -1.0, 1.0);
    check_inputs(results, "op.mse", &[a, b], OP_TOL, |t, i| {
        t.mse(&i[0], &i[1]).unwrap()
    });

    let x = uniform(r, &[3, 4], -1.0, 1.0);
    check_inputs(results, "op.mean", &[x], OP_TOL, |t, i| t.mean(&i[0]));

    let x = uniform(r, &[3, 4], -1.0, 1.0);
    check_inputs(results, "op.sum", &[x], OP_TOL, |t, i| t.sum(&i[0]));

    let x = uniform(r, &[2, 3, 4], -1.0, 1.0);
    check_inputs(results, "op.mean_axis", &[x], OP_TOL, |t, i| {
        t.mean_axis(&i[0], 1).unwrap()
    });

    let x = uniform(r, &[2, 3, 4], -1.0, 1.0);
    check_inputs(results, "op.sum_axis_keepdim", &[x], OP_TOL, |t, i| {
        t.sum_axis(&i[0], 1, true).unwrap()
    });

    let x = uniform(r, &[3, 4], -1.0, 1.0);
    check_inputs(results, "op.scale", &[x], OP_TOL, |t, i| t.scale(&i[0], 1.7));

    let x = uniform(r, &[3, 4], -1.0, 1.0);
    check_inputs(results, "op.add_scalar", &[x], OP_TOL, |t, i| {
        t.add_scalar(&i[0], 0.3)
    });

    let x = uniform(r, &[3, 4], 0.4, 1.4);
    check_inputs(results, "op.powf", &[x], OP_TOL, |t, i| t.powf(&i[0], 1.7));

    let x = uniform_off_zero(r, &[3, 4], 0.05);
    check_inputs(results, "op.clamp_min", &[x], OP_TOL, |t, i| {
        t.clamp_min(&i[0], 0.0)
    });

    let x = uniform(r, &[4, 5], -1.0, 1.0);
    check_inputs(results, "op.dropout", &[x], OP_TOL, |t, i| {
        // Same seed every probe: the mask is part of the function.
        let mut mask_rng = ChaCha8Rng::seed_from_u64(1234);
        t.dropout(&i[0], 0.4, &mut mask_rng)
    });
}

// ── Module checks ───────────────────────────────────────────────────────

fn module_checks(seed: u64, results: &mut Vec<CheckResult>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x85EB_CA6B).wrapping_add(2));

    // Spatial encoder, gradients through every SPL parameter.
    {
        let (n, l, m) = (5, 6, 4);
        let cfg = SplConfig {
            kernel_sizes: vec![3],
            channels_z: 2,
            heads: 1,
            ffn_dim: 8,
            dropout: 0.0,
        };
        let mut store: ParamStore<f64> = ParamStore::new(seed);
        spl::register_params(&mut store, &cfg, m, l);
        let x = uniform(&mut rng, &[n, l, m], -1.0, 1.0);
        check_params(results, "module.spl_forward", &store, 1e-4, |t, p| {
            spl::spl_forward(t, p, &cfg, &x, None).unwrap()
        });
    }

    // Recurrence step, gradients through the gate parameters.
    {
        let (n, z) = (4, 2);
        let mut store: ParamStore<f64> = ParamStore::new(seed);
        tpl::register_params(&mut store, n);
        let adj = uniform(&mut rng, &[z, n, n], -1.0, 1.0);
        let state = tpl::init_state(&MemoryInit::Random { seed: seed ^ 5 }, z, n).unwrap();
        check_params(results, "module.tpl_step", &store, 1e-4, |t, p| {
            let (out, _) = tpl::tpl_step(t, p, &adj, &state).unwrap();
            out
        });
    }

    // Realization mask: linear in the attributes at a kink-free threshold.
    {
        let attrs = uniform(&mut rng, &[2, 4, 4], -1.0, 1.0);
        let tau = kink_free_tau(&attrs);
        check_inputs(results, "module.realize_mask", &[attrs], OP_TOL, |t, i| {
            realize::realize_pairwise(t, &i[0], tau).unwrap().masked
        });
    }

    // Backbones over fixed graphs, gradients through their parameters.
    {
        let (n, l, m, hidden) = (5, 6, 4, 8);
        let mut store: ParamStore<f64> = ParamStore::new(seed);
        backbone::register_params(&mut store, hidden, l, m);
        let x = uniform(&mut rng, &[n, l, m], -1.0, 1.0);

        let mut binary = vec![0.0; n * n];
        for (i, j) in [(0usize, 1usize), (1, 2), (3, 4)] {
            binary[i * n + j] = 1.0;
            binary[j * n + i] = 1.0;
        }
        let graph: Realized<f64> = Realized::from_binary(GraphMode::Pairwise, n, binary);
        check_params(results, "module.backbone_gcn", &store, 1e-4, |t, p| {
            backbone::gcn_forward(t, p, &x, &graph).unwrap()
        });

        let mut rows = vec![0.0; n * n];
        for j in [0usize, 1, 4] {
            rows[j] = 1.0; // hyperedge 0
        }
        for j in [2usize, 3] {
            rows[n + j] = 1.0; // hyperedge 1
        }
        let hyper: Realized<f64> = Realized::from_binary(GraphMode::Hyper, n, rows);
        check_params(results, "module.backbone_hgcn", &store, 1e-4, |t, p| {
            backbone::hgcn_forward(t, p, &x, &hyper).unwrap()
        });

        check_params(results, "module.backbone_mlp", &store, 1e-4, |t, p| {
            backbone::mlp_forward(t, p, &x).unwrap()
        });
    }

    // Ranking loss wrt both arguments.
    {
        let pred = uniform(&mut rng, &[8], -1.0, 1.0);
        let target = uniform(&mut rng, &[8], -1.0, 1.0);
        check_inputs(
            results,
            "module.ranking_loss",
            &[pred, target],
            OP_TOL,
            |t, i| ranking_loss(t, &i[0], &i[1], 0.7).unwrap(),
        );
    }
}

// ── Composite check ─────────────────────────────────────────────────────

/// The deepest check: six stocks, an eight-day window, five channels, two
/// conv scales, two attribute channels, one attention head. Every
/// parameter's gradient through encoder → recurrence → realization →
/// graph propagation → ranking loss must match finite differences.
pub fn composite_check(seed: u64) -> CheckResult {
    let (n, l, m) = (6, 8, 5);
    let cfg = ModelConfig {
        paradigm: Paradigm::EndToEnd,
        backbone: BackboneKind::Gcn,
        use_tpl: true,
        spl: SplConfig {
            kernel_sizes: vec![3, 5],
            channels_z: 2,
            heads: 1,
            ffn_dim: 16,
            dropout: 0.0,
        },
        tau: 0.0, // replaced below by a kink-free threshold
        hidden: 8,
        lookback: l,
        features: m,
    };
    let model: Model<f64> = Model::build(cfg, n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xC2B2_AE35).wrapping_add(3));
    let x = uniform(&mut rng, &[n, l, m], -1.0, 1.0);
    let target = uniform(&mut rng, &[n], -0.1, 0.1);
    let init = MemoryInit::Random { seed };
    let z = model.cfg.spl.channels_z;

    // Fix tau where no probe can flip an edge, so the loss stays smooth.
    let tau = {
        let tape = Tape::new();
        let watched = model.store.watch_all(&tape);
        let adj = spl::spl_forward(&tape, &watched, &model.cfg.spl, &x, None).unwrap();
        let state = tpl::init_state(&init, z, n).unwrap();
        let (attrs, _) = tpl::tpl_step(&tape, &watched, &adj, &state).unwrap();
        kink_free_tau(&attrs)
    };
    let mut cfg = model.cfg.clone();
    cfg.tau = tau;

    let forward = |tape: &Tape<f64>, params: &WatchedParams<f64>| -> f64 {
        let state = tpl::init_state(&init, z, n).unwrap();
        let out = forward_day(tape, params, &cfg, &x, Some(&state), None, None).unwrap();
        ranking_loss(tape, &out.scores, &target, 1.0)
            .unwrap()
            .item()
            .as_f64()
    };

    let theta0 = flatten_store(&model.store);
    let numeric = central_diff(&theta0, FD_STEP, |theta| {
        let tape = Tape::new();
        let s = store_from_flat(&model.store, theta);
        forward(&tape, &s.watch_all(&tape))
    });

    let tape = Tape::new();
    let watched = model.store.watch_all(&tape);
    let state = tpl::init_state(&init, z, n).unwrap();
    let out = forward_day(&tape, &watched, &cfg, &x, Some(&state), None, None).unwrap();
    let loss = ranking_loss(&tape, &out.scores, &target, 1.0).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let analytic: Vec<f64> = model
        .store
        .names()
        .iter()
        .flat_map(|name| watched.grad_by_name(&grads, name).to_f64_vec())
        .collect();

    CheckResult {
        name: "composite.encode_recur_realize_propagate_loss".to_string(),
        max_rel_error: max_rel_error(&analytic, &numeric),
        tolerance: 1e-4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_checks_pass() {
        let mut results = Vec::new();
        op_checks(7, &mut results);
        assert!(results.len() >= 25);
        for r in &results {
            assert!(
                r.passed(),
                "{} out of tolerance: {} >= {}",
                r.name,
                r.max_rel_error,
                r.tolerance
            );
        }
    }

    #[test]
    fn module_checks_pass() {
        let mut results = Vec::new();
        module_checks(7, &mut results);
        assert_eq!(results.len(), 7);
        for r in &results {
            assert!(
                r.passed(),
                "{} out of tolerance: {} >= {}",
                r.name,
                r.max_rel_error,
                r.tolerance
            );
        }
    }

    #[test]
    fn composite_check_passes_at_the_desk_config() {
        let r = composite_check(7);
        assert!(
            r.passed(),
            "composite gradient off: {} >= {}",
            r.max_rel_error,
            r.tolerance
        );
    }

    #[test]
    fn report_renders_one_line_per_check_plus_summary() {
        let report = Report {
            results: vec![
                CheckResult {
                    name: "a".into(),
                    max_rel_error: 1e-9,
                    tolerance: 1e-6,
                },
                CheckResult {
                    name: "b".into(),
                    max_rel_error: 2e-3,
                    tolerance: 1e-4,
                },
            ],
        };
        assert!(!report.all_passed());
        assert_eq!(report.failed().len(), 1);
        let text = report.render();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("FAIL"));
        assert!(text.contains("pass"));
        assert!(text.contains("1 failed"));
    }
}
