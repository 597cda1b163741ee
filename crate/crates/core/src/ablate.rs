//! Component-knockout matrix: every prior-graph initialization crossed
//! with the model variants, each cell trained, evaluated on the test
//! segment, and backtested. The output is a small CSV comparing annualised
//! return and Sharpe ratio across cells.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::backtest::{annualised_irr, run_backtest, sharpe, ReturnMode};
use crate::data::{PricePanel, Segment};
use crate::error::Error;
use crate::model::{Model, ModelConfig, Paradigm, PriorGraph};
use crate::realize::Realized;
use crate::scalar::Scalar;
use crate::train::{evaluate, train, TrainConfig};
use crate::tpl::MemoryInit;

/// Model variant being ablated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    /// Adaptive graph with the recurrence: encoder output feeds the
    /// memory cell, whose output is realized and propagated.
    Full,
    /// Recurrence removed: the encoder's temporal adjacency goes straight
    /// to realization, so only short-range structure survives.
    WithoutTpl,
    /// No adaptation at all: the prior graph is used as-is.
    TwoStep,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Full, Component::WithoutTpl, Component::TwoStep];

    pub fn label(self) -> &'static str {
        match self {
            Component::Full => "full",
            Component::WithoutTpl => "w.o. TPL",
            Component::TwoStep => "twostep",
        }
    }
}

/// One trained-and-backtested cell of the matrix.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub component: &'static str,
    pub initialization: String,
    pub irr: f64,
    pub sharpe: f64,
}

/// Everything a cell run needs besides the prior.
pub struct AblationSetup<'a> {
    pub panel: &'a PricePanel,
    /// Base configuration; paradigm and recurrence flags are overridden
    /// per component.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Portfolio size for the backtest.
    pub k: usize,
    pub capital: f64,
    pub return_mode: ReturnMode,
}

/// Trains one cell and backtests it on the test segment.
pub fn run_cell<S: Scalar>(
    setup: &AblationSetup,
    component: Component,
    init_name: &str,
    prior: &PriorGraph,
) -> Result<AblationRow, Error> {
    let mut cfg = setup.model.clone();
    let adapted = match cfg.backbone.mode() {
        Some(mode) => Some(prior.adapt(mode)),
        None => None,
    };

    let mut init: Option<MemoryInit> = None;
    let mut fixed: Option<Realized<S>> = None;
    match component {
        Component::Full => {
            cfg.paradigm = Paradigm::EndToEnd;
            cfg.use_tpl = true;
            init = adapted.as_ref().map(PriorGraph::memory_init);
        }
        Component::WithoutTpl => {
            cfg.paradigm = Paradigm::EndToEnd;
            cfg.use_tpl = false;
        }
        Component::TwoStep => {
            cfg.paradigm = Paradigm::TwoStep;
            cfg.use_tpl = false;
            fixed = adapted.as_ref().map(PriorGraph::realize);
        }
    }

    let outcome = train::<S>(setup.panel, &cfg, &setup.train, init.as_ref(), fixed.as_ref())?;
    if let Some(abort) = outcome.abort {
        return Err(Error::Train(abort));
    }
    let model = Model::from_store(cfg, setup.panel.num_stocks(), outcome.best);
    let eval = evaluate(
        setup.panel,
        &model,
        Segment::Test,
        init.as_ref(),
        fixed.as_ref(),
        setup.train.alpha,
    )?;
    let ledger = run_backtest(
        &eval.preds,
        &eval.targets,
        setup.k,
        setup.capital,
        setup.return_mode,
    )
    .map_err(Error::Backtest)?;
    let returns = ledger.returns();
    Ok(AblationRow {
        component: component.label(),
        initialization: init_name.to_string(),
        irr: annualised_irr(&returns).map_err(Error::Backtest)?,
        sharpe: sharpe(&returns).map_err(Error::Backtest)?,
    })
}

/// Runs the full cross product of priors × components, priors outermost so
/// the CSV groups by initialization.
pub fn run_matrix<S: Scalar>(
    setup: &AblationSetup,
    priors: &[(String, PriorGraph)],
) -> Result<Vec<AblationRow>, Error> {
    let mut rows = Vec::with_capacity(priors.len() * Component::ALL.len());
    for (name, prior) in priors {
        for component in Component::ALL {
            rows.push(run_cell::<S>(setup, component, name, prior)?);
        }
    }
    Ok(rows)
}

pub fn render_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("component,initialization,IRR,SR\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.component, r.initialization, r.irr, r.sharpe).unwrap();
    }
    out
}

pub fn write_csv(path: &Path, rows: &[AblationRow]) -> io::Result<()> {
    fs::write(path, render_csv(rows))
}
