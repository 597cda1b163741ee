//! Whole-model assembly: which parameters exist for a given configuration
//! and how one trading day flows through them.
//!
//! Two paradigms share the scoring backbone. The adaptive paradigm encodes
//! the day's window into edge attributes, optionally folds them through the
//! recurrent memory, realizes a graph, and propagates over it. The fixed
//! paradigm skips all of that and propagates over a prior graph supplied up
//! front. The per-node MLP backbone consumes no graph, so under it both
//! paradigms collapse to plain per-stock regression.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneKind};
use crate::error::Error;
use crate::graphs::{HyperGraph, PairGraph};
use crate::params::{ParamStore, WatchedParams};
use crate::realize::{self, GraphMode, Realized};
use crate::scalar::Scalar;
use crate::spl::{self, SplConfig};
use crate::tensor::{Tape, Tensor};
use crate::tpl::{self, MemoryInit, TplState};

/// How the relation graph is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Paradigm {
    /// Graph learned jointly with the model, one realization per day.
    EndToEnd,
    /// Fixed prior graph; only the backbone trains.
    TwoStep,
}

impl Paradigm {
    pub fn name(&self) -> &'static str {
        match self {
            Paradigm::EndToEnd => "end2end",
            Paradigm::TwoStep => "twostep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "end2end" => Some(Paradigm::EndToEnd),
            "twostep" => Some(Paradigm::TwoStep),
            _ => None,
        }
    }
}

/// A prior relation graph in either form.
#[derive(Debug, Clone)]
pub enum PriorGraph {
    Pairwise(PairGraph),
    Hyper(HyperGraph),
}

impl PriorGraph {
    pub fn num_nodes(&self) -> usize {
        match self {
            PriorGraph::Pairwise(g) => g.num_nodes(),
            PriorGraph::Hyper(h) => h.num_nodes(),
        }
    }

    /// Memory seed for the recurrence: adjacency, clique-expanding
    /// hypergraphs first.
    pub fn memory_init(&self) -> MemoryInit {
        match self {
            PriorGraph::Pairwise(g) => MemoryInit::Pairwise(g.clone()),
            PriorGraph::Hyper(h) => MemoryInit::Hyper(h.clone()),
        }
    }

    /// Converts to the form a backbone of the given mode consumes:
    /// hyperedges clique-expand into pairs, pair edges become two-member
    /// hyperedges. Already-matching graphs pass through unchanged.
    pub fn adapt(&self, mode: GraphMode) -> PriorGraph {
        match (self, mode) {
            (PriorGraph::Pairwise(_), GraphMode::Pairwise)
            | (PriorGraph::Hyper(_), GraphMode::Hyper) => self.clone(),
            (PriorGraph::Hyper(h), GraphMode::Pairwise) => {
                PriorGraph::Pairwise(crate::graphs::hyper_to_pairwise(h))
            }
            (PriorGraph::Pairwise(g), GraphMode::Hyper) => {
                let edges = g.edges().iter().map(|&(i, j)| vec![i, j]).collect();
                PriorGraph::Hyper(
                    HyperGraph::new(g.num_nodes(), edges).expect("pair edges are valid"),
                )
            }
        }
    }

    /// The prior as a realized graph with zero attributes, the form the
    /// fixed paradigm feeds straight to a backbone. Hyper incidence rows
    /// pad with dead rows up to `n`.
    pub fn realize<S: Scalar>(&self) -> Realized<S> {
        match self {
            PriorGraph::Pairwise(g) => Realized::from_binary(
                GraphMode::Pairwise,
                g.num_nodes(),
                g.adjacency().to_vec(),
            ),
            PriorGraph::Hyper(h) => {
                let n = h.num_nodes();
                let mut binary = h.incidence();
                binary.resize(n * n, 0.0);
                Realized::from_binary(GraphMode::Hyper, n, binary)
            }
        }
    }
}

/// Everything that determines the parameter set and the forward pass,
/// except the stock universe size.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub paradigm: Paradigm,
    pub backbone: BackboneKind,
    /// Run the recurrence between encoding and realization. Ignored by the
    /// fixed paradigm and the MLP backbone; turning it off sends each day's
    /// temporary attributes straight to realization.
    pub use_tpl: bool,
    pub spl: SplConfig,
    /// Realization threshold on the mean attribute magnitude.
    pub tau: f64,
    pub hidden: usize,
    pub lookback: usize,
    pub features: usize,
}

impl ModelConfig {
    /// True when the configuration learns its graph (and therefore carries
    /// encoder parameters).
    pub fn learns_graph(&self) -> bool {
        self.paradigm == Paradigm::EndToEnd && self.backbone != BackboneKind::Mlp
    }
}

/// A configured model: the parameter store plus the fixed universe size.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    n: usize,
}

impl<S: Scalar> Model<S> {
    /// Registers exactly the parameters the configuration uses. Names are
    /// seeded individually, so configurations sharing a seed initialize
    /// shared parameters identically regardless of what else exists.
    pub fn build(cfg: ModelConfig, n: usize, seed: u64) -> Self {
        let mut store = ParamStore::new(seed);
        backbone::register_params(&mut store, cfg.hidden, cfg.lookback, cfg.features);
        if cfg.learns_graph() {
            spl::register_params(&mut store, &cfg.spl, cfg.features, cfg.lookback);
            if cfg.use_tpl {
                tpl::register_params(&mut store, n);
            }
        }
        Self { cfg, store, n }
    }

    /// Wraps an existing store (typically loaded from a checkpoint).
    pub fn from_store(cfg: ModelConfig, n: usize, store: ParamStore<S>) -> Self {
        Self { cfg, store, n }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Day-zero recurrent state for the adaptive paradigm, or `None` when
    /// the configuration has no recurrence.
    pub fn initial_state(&self, init: &MemoryInit) -> Result<Option<TplState<S>>, Error> {
        if self.cfg.learns_graph() && self.cfg.use_tpl {
            Ok(Some(tpl::init_state(init, self.cfg.spl.channels_z, self.n)?))
        } else {
            Ok(None)
        }
    }
}

/// One day's forward result.
pub struct DayOutput<S: Scalar> {
    /// Per-stock return scores, `[n]`.
    pub scores: Tensor<S>,
    /// Recurrent state to carry to the next day, when the model has one.
    pub state: Option<TplState<S>>,
    /// Entries (pairwise) or live rows (hyper) in the day's realized graph;
    /// zero for graph-free configurations.
    pub live: usize,
}

/// Runs one trading day. `x` is the `[n, lookback, features]` window,
/// `state` the recurrent state carried from the previous day (`None` where
/// the configuration has none), `prior` the realized prior for the fixed
/// paradigm, and `rng` enables dropout when supplied.
pub fn forward_day<S: Scalar>(
    tape: &Tape<S>,
    params: &WatchedParams<S>,
    cfg: &ModelConfig,
    x: &Tensor<S>,
    state: Option<&TplState<S>>,
    prior: Option<&Realized<S>>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<DayOutput<S>, Error> {
    if cfg.backbone == BackboneKind::Mlp {
        return Ok(DayOutput {
            scores: backbone::mlp_forward(tape, params, x)?,
            state: None,
            live: 0,
        });
    }

    if cfg.paradigm == Paradigm::TwoStep {
        let realized = prior.expect("fixed paradigm needs a realized prior");
        let scores = match cfg.backbone {
            BackboneKind::Gcn => backbone::gcn_forward(tape, params, x, realized)?,
            BackboneKind::Hgcn => backbone::hgcn_forward(tape, params, x, realized)?,
            BackboneKind::Mlp => unreachable!("handled above"),
        };
        return Ok(DayOutput {
            scores,
            state: None,
            live: live_count(realized),
        });
    }

    let adj_temp = spl::spl_forward(tape, params, &cfg.spl, x, rng)?;
    let (attrs, next_state) = match state {
        Some(s) => {
            let (out, next) = tpl::tpl_step(tape, params, &adj_temp, s)?;
            (out, Some(next))
        }
        None => (adj_temp, None),
    };
    let realized = match cfg.backbone {
        BackboneKind::Gcn => realize::realize_pairwise(tape, &attrs, cfg.tau)?,
        BackboneKind::Hgcn => realize::realize_hypergraph(tape, &attrs, cfg.tau)?,
        BackboneKind::Mlp => unreachable!("handled above"),
    };
    let scores = match cfg.backbone {
        BackboneKind::Gcn => backbone::gcn_forward(tape, params, x, &realized)?,
        BackboneKind::Hgcn => backbone::hgcn_forward(tape, params, x, &realized)?,
        BackboneKind::Mlp => unreachable!("handled above"),
    };
    Ok(DayOutput {
        scores,
        state: next_state,
        live: live_count(&realized),
    })
}

fn live_count<S: Scalar>(r: &Realized<S>) -> usize {
    match r.mode {
        GraphMode::Pairwise => r.binary.iter().filter(|&&v| v != 0.0).count(),
        GraphMode::Hyper => r.live_rows().len(),
    }
}
