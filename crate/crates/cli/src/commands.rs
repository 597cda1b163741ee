//! Subcommand implementations. Each returns through [`CmdError`], which
//! folds library errors and flag-level mistakes into the documented exit
//! codes: 2 for configuration, 3 for data and files, 4 for numeric trouble.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use thiserror::Error;

use gapnet::ablate::{run_matrix, write_csv as write_ablation_csv, AblationSetup};
use gapnet::backtest::{
    annualised_irr, ic_series, run_backtest, sharpe, BacktestError, IcMode, ReturnMode,
};
use gapnet::checkpoint::{self, CheckpointError};
use gapnet::config::{ConfigError, PriorSection, RunConfig};
use gapnet::data::{
    self, load_csv_dir, synth_closes, write_csv_dir, DataError, PricePanel, Segment, FEATURE_START,
};
use gapnet::gradcheck::run_full_suite;
use gapnet::graphs::{self, GraphError};
use gapnet::model::{Model, Paradigm, PriorGraph};
use gapnet::realize::{self, GraphMode, Realized};
use gapnet::tensor::{ShapeError, Tape};
use gapnet::train::{evaluate, train, write_epoch_log};
use gapnet::{spl, tpl, Error};

use crate::artifacts;
use crate::Command;

#[derive(Debug, Error)]
pub enum CmdError {
    #[error(transparent)]
    Core(#[from] Error),
    /// A flag value the library never sees: wrong date, missing section.
    #[error("{0}")]
    Flag(String),
    #[error("{0} gradient check(s) out of tolerance")]
    GradFail(usize),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Core(e) => e.exit_code(),
            CmdError::Flag(_) => 2,
            CmdError::GradFail(_) => 4,
        }
    }
}

macro_rules! via_core {
    ($($t:ty),* $(,)?) => {$(
        impl From<$t> for CmdError {
            fn from(e: $t) -> Self {
                CmdError::Core(Error::from(e))
            }
        }
    )*};
}
via_core!(
    ConfigError,
    DataError,
    GraphError,
    CheckpointError,
    BacktestError,
    ShapeError,
    std::io::Error,
);

fn flag(msg: impl Into<String>) -> CmdError {
    CmdError::Flag(msg.into())
}

pub fn run(command: Command) -> Result<(), CmdError> {
    match command {
        Command::SynthData {
            stocks,
            days,
            clusters,
            noise,
            seed,
            out,
        } => synth_data(stocks, days, clusters, noise, seed, &out),
        Command::BuildGraph { config, out } => build_graph(&config, &out),
        Command::Train { config, out } => run_train(&config, &out),
        Command::Evaluate {
            config,
            checkpoint,
            segment,
            out,
        } => run_evaluate(&config, &checkpoint, &segment, &out),
        Command::Backtest {
            preds,
            panel,
            k,
            capital,
            return_mode,
            ic_mode,
            out,
            emit_curve,
            benchmark,
        } => run_backtest_cmd(
            &preds,
            &panel,
            k,
            capital,
            &return_mode,
            &ic_mode,
            &out,
            emit_curve.as_deref(),
            benchmark.as_deref(),
        ),
        Command::DumpGraph {
            config,
            checkpoint,
            date,
            out,
        } => dump_graph(&config, &checkpoint, &date, &out),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Ablate { config, out } => run_ablate(&config, &out),
    }
}

// ── Shared loading steps ────────────────────────────────────────────────

struct LoadedRun {
    cfg: RunConfig,
    panel: PricePanel,
    labels: Option<Vec<usize>>,
    prior: Option<PriorGraph>,
}

fn load_run(config: &Path) -> Result<LoadedRun, CmdError> {
    let cfg = RunConfig::from_path(config)?;
    cfg.validate()?;
    let (panel, labels) = cfg.build_panel().map_err(CmdError::Core)?;
    let prior = cfg.build_prior(&panel).map_err(CmdError::Core)?;
    Ok(LoadedRun {
        cfg,
        panel,
        labels,
        prior,
    })
}

/// The fixed graph the two-step paradigm propagates over, if that is what
/// the config asks for.
fn fixed_prior(run: &LoadedRun) -> Option<Realized<f64>> {
    if run.cfg.model_config().paradigm == Paradigm::TwoStep {
        run.prior.as_ref().map(PriorGraph::realize)
    } else {
        None
    }
}

fn load_model(run: &LoadedRun, checkpoint: &Path) -> Result<Model<f64>, CmdError> {
    let model_cfg = run.cfg.model_config();
    let n = run.panel.num_stocks();
    let store = checkpoint::load::<f64>(checkpoint, run.cfg.seed)?;
    let fresh = Model::<f64>::build(model_cfg.clone(), n, run.cfg.seed);
    checkpoint::check_compatible(&store, &fresh.store)?;
    Ok(Model::from_store(model_cfg, n, store))
}

// ── synth-data ──────────────────────────────────────────────────────────

fn synth_data(
    stocks: usize,
    days: usize,
    clusters: usize,
    noise: f64,
    seed: u64,
    out: &Path,
) -> Result<(), CmdError> {
    let (tickers, calendar, closes, labels) = synth_closes(stocks, days, clusters, noise, seed)?;
    artifacts::ensure_dir(out)?;
    write_csv_dir(out, &tickers, &calendar, &closes)?;
    let mut membership = String::from("ticker,sector\n");
    for (t, l) in tickers.iter().zip(&labels) {
        membership.push_str(&format!("{t},C{l}\n"));
    }
    artifacts::write_text(&out.join("clusters.csv"), &membership).map_err(CmdError::Core)?;
    println!(
        "wrote {stocks} tickers x {days} days ({clusters} clusters, noise {noise}) to {}",
        out.display()
    );
    Ok(())
}

// ── build-graph ─────────────────────────────────────────────────────────

fn build_graph(config: &Path, out: &Path) -> Result<(), CmdError> {
    let run = load_run(config)?;
    let graph = run
        .prior
        .as_ref()
        .ok_or_else(|| flag("config has no `prior` section to build"))?;
    match graph {
        PriorGraph::Pairwise(g) => {
            g.save(out)?;
            println!(
                "pairwise graph: {} nodes, {} edges -> {}",
                g.num_nodes(),
                g.num_edges(),
                out.display()
            );
        }
        PriorGraph::Hyper(h) => {
            h.save(out)?;
            println!(
                "hypergraph: {} nodes, {} hyperedges -> {}",
                h.num_nodes(),
                h.edges().len(),
                out.display()
            );
        }
    }
    run.cfg.write_resolved(&artifacts::resolved_sibling(out))?;
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

fn run_train(config: &Path, out: &Path) -> Result<(), CmdError> {
    let run = load_run(config)?;
    let init = run.cfg.memory_init(run.prior.as_ref()).map_err(CmdError::Core)?;
    let fixed = fixed_prior(&run);
    let outcome = train::<f64>(
        &run.panel,
        &run.cfg.model_config(),
        &run.cfg.train_config(),
        Some(&init),
        fixed.as_ref(),
    )
    .map_err(CmdError::Core)?;

    artifacts::ensure_dir(out)?;
    checkpoint::save(&outcome.best, &out.join("checkpoint.bin"))?;
    write_epoch_log(&out.join("epochs.csv"), &outcome.records)?;
    run.cfg.write_resolved(&out.join("resolved.json"))?;

    if let Some(abort) = outcome.abort {
        // Last-good checkpoint and logs are on disk; surface the failure.
        eprintln!(
            "aborted after epoch {}; best checkpoint (epoch {}) retained",
            outcome.records.len(),
            outcome.best_epoch
        );
        return Err(CmdError::Core(Error::Train(abort)));
    }
    println!(
        "trained {} epoch(s); best epoch {} with validation loss {}{}",
        outcome.records.len(),
        outcome.best_epoch,
        outcome.best_valid_loss,
        if outcome.stopped_early {
            " (stopped early)"
        } else {
            ""
        }
    );
    println!("checkpoint, epochs.csv, resolved.json -> {}", out.display());
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────────

fn run_evaluate(
    config: &Path,
    checkpoint: &Path,
    segment: &str,
    out: &Path,
) -> Result<(), CmdError> {
    let run = load_run(config)?;
    let model = load_model(&run, checkpoint)?;
    let init = run.cfg.memory_init(run.prior.as_ref()).map_err(CmdError::Core)?;
    let fixed = fixed_prior(&run);
    let seg = Segment::parse(segment).expect("clap validates the segment");
    let eval = evaluate(
        &run.panel,
        &model,
        seg,
        Some(&init),
        fixed.as_ref(),
        run.cfg.train.alpha,
    )
    .map_err(CmdError::Core)?;

    let dates: Vec<NaiveDate> = eval.days.iter().map(|&d| run.panel.calendar()[d]).collect();
    artifacts::write_preds(out, run.panel.tickers(), &dates, &eval.preds).map_err(CmdError::Core)?;
    run.cfg
        .write_resolved(&artifacts::resolved_sibling(out))?;
    println!(
        "scored {} {} day(s), mean ranking loss {} -> {}",
        eval.days.len(),
        seg.name(),
        eval.mean_loss,
        out.display()
    );
    Ok(())
}

// ── backtest ────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn run_backtest_cmd(
    preds_path: &Path,
    panel_dir: &Path,
    k: usize,
    capital: f64,
    return_mode: &str,
    ic_mode: &str,
    out: &Path,
    emit_curve: Option<&Path>,
    benchmark: Option<&Path>,
) -> Result<(), CmdError> {
    let preds = artifacts::read_preds(preds_path).map_err(CmdError::Core)?;
    let load = load_csv_dir(panel_dir, &panel_dir.join("tickers.txt"))?;
    let realized = realized_returns(&preds, &load)?;

    let mode = ReturnMode::parse(return_mode).expect("clap validates the mode");
    let icm = IcMode::parse(ic_mode).expect("clap validates the mode");
    let ledger = run_backtest(&preds.rows, &realized, k, capital, mode)?;
    let ic = ic_series(&preds.rows, &realized, icm)?;
    let returns = ledger.returns();
    let irr = annualised_irr(&returns)?;
    let sr = sharpe(&returns)?;

    artifacts::ensure_dir(out)?;
    artifacts::write_ledger(&out.join("ledger.csv"), &preds.dates, &preds.tickers, &ledger)
        .map_err(CmdError::Core)?;
    artifacts::write_summary(
        &out.join("summary.json"),
        irr,
        sr,
        ic.mean,
        ic.icir,
        k,
        ledger.rows.len(),
    )
    .map_err(CmdError::Core)?;

    if let Some(curve_path) = emit_curve {
        let bench = benchmark
            .map(|p| benchmark_wealth(p, &preds.dates, capital))
            .transpose()?;
        artifacts::write_curve(curve_path, &preds.dates, &ledger, bench.as_deref())
            .map_err(CmdError::Core)?;
    }

    println!(
        "{} day(s), top-{k}: IRR {irr:.4}, SR {sr:.4}, IC {:.4}, ICIR {}",
        ledger.rows.len(),
        ic.mean,
        match ic.icir {
            Some(v) => format!("{v:.4}"),
            None => "n/a".to_string(),
        }
    );
    println!("ledger.csv, summary.json -> {}", out.display());
    Ok(())
}

/// Same-day realized returns for every prediction row, aligned by date and
/// ticker against the price directory.
fn realized_returns(
    preds: &artifacts::PredsFile,
    load: &data::CsvLoad,
) -> Result<Vec<Vec<f64>>, CmdError> {
    let misaligned = |msg: String| CmdError::Core(Error::Backtest(BacktestError::Alignment(msg)));
    let stock_of: HashMap<&str, usize> = load
        .tickers
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let columns: Vec<usize> = preds
        .tickers
        .iter()
        .map(|t| {
            stock_of
                .get(t.as_str())
                .copied()
                .ok_or_else(|| misaligned(format!("ticker {t:?} is not in the panel")))
        })
        .collect::<Result<_, _>>()?;
    let day_of: HashMap<NaiveDate, usize> = load
        .calendar
        .iter()
        .enumerate()
        .map(|(i, d)| (*d, i))
        .collect();

    let t = load.calendar.len();
    let mut rows = Vec::with_capacity(preds.dates.len());
    for date in &preds.dates {
        let di = *day_of
            .get(date)
            .ok_or_else(|| misaligned(format!("{date} is not in the panel calendar")))?;
        if di == 0 {
            return Err(misaligned(format!("{date} has no previous close")));
        }
        let mut row = Vec::with_capacity(columns.len());
        for &s in &columns {
            let prev = load.closes[s * t + di - 1];
            let cur = load.closes[s * t + di];
            if prev <= 0.0 {
                return Err(misaligned(format!(
                    "non-positive close for {:?} before {date}",
                    load.tickers[s]
                )));
            }
            row.push((cur - prev) / prev);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Benchmark wealth per prediction date: the supplied series rebased to the
/// starting capital at the first date.
fn benchmark_wealth(
    path: &Path,
    dates: &[NaiveDate],
    capital: f64,
) -> Result<Vec<f64>, CmdError> {
    let series = artifacts::read_series(path).map_err(CmdError::Core)?;
    let by_date: HashMap<NaiveDate, f64> = series.into_iter().collect();
    let misaligned = |d: &NaiveDate| {
        CmdError::Core(Error::Backtest(BacktestError::Alignment(format!(
            "benchmark series has no value for {d}"
        ))))
    };
    let first = *by_date.get(&dates[0]).ok_or_else(|| misaligned(&dates[0]))?;
    if first <= 0.0 {
        return Err(CmdError::Core(Error::Backtest(BacktestError::Alignment(
            "benchmark series must start positive".to_string(),
        ))));
    }
    dates
        .iter()
        .map(|d| {
            by_date
                .get(d)
                .map(|v| capital * v / first)
                .ok_or_else(|| misaligned(d))
        })
        .collect()
}

// ── dump-graph ──────────────────────────────────────────────────────────

fn dump_graph(config: &Path, checkpoint: &Path, date: &str, out: &Path) -> Result<(), CmdError> {
    let run = load_run(config)?;
    let model = load_model(&run, checkpoint)?;
    let cfg = model.cfg.clone();
    let date = NaiveDate::parse_from_str(date, "%Y-%m-%d")
        .map_err(|_| flag(format!("cannot parse --date {date:?}; expected YYYY-MM-DD")))?;
    let idx = run
        .panel
        .calendar()
        .iter()
        .position(|d| *d == date)
        .ok_or_else(|| flag(format!("{date} is not a panel trading day")))?;
    let first = FEATURE_START + cfg.lookback;
    if idx < first {
        return Err(flag(format!(
            "{date} is before the first usable day ({})",
            run.panel.calendar()[first.min(run.panel.num_days() - 1)]
        )));
    }

    let realized: Realized<f64> = match cfg.paradigm {
        Paradigm::TwoStep => run
            .prior
            .as_ref()
            .map(PriorGraph::realize)
            .ok_or_else(|| flag("two-step config has no `prior` section to dump"))?,
        Paradigm::EndToEnd => {
            if !cfg.learns_graph() {
                return Err(flag("the mlp backbone does not build a graph"));
            }
            let init = run.cfg.memory_init(run.prior.as_ref()).map_err(CmdError::Core)?;
            let mut state = model.initial_state(&init).map_err(CmdError::Core)?;
            let mut snapshot = None;
            // Replay the recurrence exactly as evaluation does, realizing
            // only at the requested day.
            for day in first..=idx {
                let tape = Tape::<f64>::new();
                let watched = model.store.watch_all(&tape);
                let x = run.panel.window(day, cfg.lookback).x_tensor::<f64>();
                let adj = spl::spl_forward(&tape, &watched, &cfg.spl, &x, None)?;
                let attrs = match state.as_ref() {
                    Some(s) => {
                        let (a, next) = tpl::tpl_step(&tape, &watched, &adj, s)?;
                        state = Some(next.detach());
                        a
                    }
                    None => adj,
                };
                if day == idx {
                    snapshot = Some(match cfg.backbone.mode().expect("graph backbone") {
                        GraphMode::Pairwise => realize::realize_pairwise(&tape, &attrs, cfg.tau)?,
                        GraphMode::Hyper => realize::realize_hypergraph(&tape, &attrs, cfg.tau)?,
                    });
                }
            }
            snapshot.expect("loop covers idx")
        }
    };

    let n = realized.num_nodes();
    let members: Vec<Vec<usize>> = match realized.mode {
        GraphMode::Pairwise => {
            // The exchange format is undirected; collapse directions and
            // keep self-edges as single-member lines. Exact directed values
            // are in the sidecar.
            let mut out = Vec::new();
            for i in 0..n {
                if realized.binary[i * n + i] != 0.0 {
                    out.push(vec![i]);
                }
                for j in i + 1..n {
                    if realized.binary[i * n + j] != 0.0 || realized.binary[j * n + i] != 0.0 {
                        out.push(vec![i, j]);
                    }
                }
            }
            out
        }
        GraphMode::Hyper => realized
            .live_rows()
            .into_iter()
            .map(|r| {
                (0..n)
                    .filter(|&j| realized.binary[r * n + j] != 0.0)
                    .collect()
            })
            .collect(),
    };

    let graph_path = suffixed(out, ".graph.txt");
    let attrs_path = suffixed(out, ".attrs.csv");
    graphs::write_members(&graph_path, n, &members)?;

    let data = realized.masked.to_f64_vec();
    let z = realized.masked.shape()[0];
    let mut sidecar = String::from("channel,i,j,value\n");
    for zi in 0..z {
        for i in 0..n {
            for j in 0..n {
                let v = data[(zi * n + i) * n + j];
                if v != 0.0 {
                    sidecar.push_str(&format!("{zi},{i},{j},{v}\n"));
                }
            }
        }
    }
    artifacts::write_text(&attrs_path, &sidecar).map_err(CmdError::Core)?;
    run.cfg
        .write_resolved(&suffixed(out, ".resolved.json"))?;
    println!(
        "realized graph for {date}: {} member line(s) -> {} + {}",
        members.len(),
        graph_path.display(),
        attrs_path.display()
    );
    Ok(())
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

// ── gradcheck ───────────────────────────────────────────────────────────

fn gradcheck(seed: u64) -> Result<(), CmdError> {
    let report = run_full_suite(seed);
    print!("{}", report.render());
    let failed = report.failed().len();
    if failed > 0 {
        return Err(CmdError::GradFail(failed));
    }
    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────────

fn run_ablate(config: &Path, out: &Path) -> Result<(), CmdError> {
    let run = load_run(config)?;
    let panel = &run.panel;
    let n = panel.num_stocks();
    if n < 2 {
        return Err(flag("ablation needs at least two stocks"));
    }
    artifacts::ensure_dir(out)?;

    let configured = run.cfg.prior.as_ref();
    let kind = |want: &str| configured.filter(|p| p.kind == want);

    // Industry membership: the configured file if there is one, otherwise
    // the planted clusters of a synthetic panel.
    let membership: PathBuf = match kind("industry").and_then(|p| p.membership.clone()) {
        Some(path) => path,
        None => match &run.labels {
            Some(labels) => {
                let mut text = String::from("ticker,sector\n");
                for (t, l) in panel.tickers().iter().zip(labels) {
                    text.push_str(&format!("{t},C{l}\n"));
                }
                let path = out.join("membership.csv");
                artifacts::write_text(&path, &text).map_err(CmdError::Core)?;
                path
            }
            None => {
                return Err(flag(
                    "industry cell needs `prior.membership` (or a synthetic panel with planted clusters)",
                ))
            }
        },
    };

    let dtw_k = kind("dtw_knn")
        .and_then(|p| p.k)
        .unwrap_or(2)
        .min(n - 1)
        .max(1);
    let random_p = kind("random").and_then(|p| p.p).unwrap_or(0.2);
    let random_seed = kind("random").and_then(|p| p.seed).unwrap_or(run.cfg.seed);

    let recipes = [
        (
            "industry",
            PriorSection {
                kind: "industry".to_string(),
                membership: Some(membership),
                k: None,
                threshold: None,
                p: None,
                seed: None,
                path: None,
            },
        ),
        (
            "dtw_knn",
            PriorSection {
                kind: "dtw_knn".to_string(),
                membership: None,
                k: Some(dtw_k),
                threshold: None,
                p: None,
                seed: None,
                path: None,
            },
        ),
        (
            "random",
            PriorSection {
                kind: "random".to_string(),
                membership: None,
                k: None,
                threshold: None,
                p: Some(random_p),
                seed: Some(random_seed),
                path: None,
            },
        ),
    ];
    let mut priors = Vec::new();
    for (name, recipe) in recipes {
        priors.push((name.to_string(), recipe.build(panel).map_err(CmdError::Core)?));
    }

    let setup = AblationSetup {
        panel,
        model: run.cfg.model_config(),
        train: run.cfg.train_config(),
        k: run.cfg.backtest.k,
        capital: run.cfg.backtest.capital,
        return_mode: run.cfg.return_mode()?,
    };
    let rows = run_matrix::<f64>(&setup, &priors).map_err(CmdError::Core)?;

    write_ablation_csv(&out.join("ablate.csv"), &rows)?;
    run.cfg.write_resolved(&out.join("resolved.json"))?;
    println!("component      initialization  IRR        SR");
    for r in &rows {
        println!(
            "{:<14} {:<15} {:>9.4} {:>9.4}",
            r.component, r.initialization, r.irr, r.sharpe
        );
    }
    println!("ablate.csv, resolved.json -> {}", out.display());
    Ok(())
}
