//! Run configuration: one JSON document covering data source, split,
//! model architecture, recurrence, prior graph, training, and backtest.
//!
//! Parsing is strict — unknown keys are errors, so typos surface instead
//! of silently falling back to defaults — and every run can write the
//! fully-resolved document next to its outputs for provenance.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneKind;
use crate::backtest::{IcMode, ReturnMode};
use crate::data::{
    self, load_csv_dir, load_membership_csv, PricePanel, SplitSpec, FEATURE_START, NUM_FEATURES,
};
use crate::error::Error;
use crate::graphs::{
    correlation_graph, dtw_k_hypergraph, industry_graph, random_pair_graph, PairGraph,
};
use crate::model::{ModelConfig, Paradigm, PriorGraph};
use crate::tpl::MemoryInit;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config key {key}: {reason}")]
    BadValue { key: &'static str, reason: String },
}

fn bad(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key,
        reason: reason.into(),
    }
}

// ── Document sections ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub tpl: TplSection,
    #[serde(default)]
    pub prior: Option<PriorSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub backtest: BacktestSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory of per-ticker CSVs; requires `tickers`.
    #[serde(default)]
    pub csv_dir: Option<PathBuf>,
    /// Ticker list file, one name per line.
    #[serde(default)]
    pub tickers: Option<PathBuf>,
    /// Generated panel with planted cluster structure.
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub split: SplitSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub stocks: usize,
    pub days: usize,
    pub clusters: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    /// Proportional split weights, train/valid/test.
    #[serde(default)]
    pub ratios: Option<[f64; 3]>,
    /// Explicit inclusive date ranges, `YYYY-MM-DD`.
    #[serde(default)]
    pub dates: Option<DateRangesSection>,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            ratios: Some([6.0, 2.0, 2.0]),
            dates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateRangesSection {
    pub train: [String; 2],
    pub valid: [String; 2],
    pub test: [String; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_paradigm")]
    pub paradigm: String,
    #[serde(default = "default_backbone")]
    pub backbone: String,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_lookback")]
    pub lookback: usize,
    /// Edge-realization threshold on mean attribute magnitude.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub spl: SplSection,
}

fn default_paradigm() -> String {
    "end2end".into()
}
fn default_backbone() -> String {
    "gcn".into()
}
fn default_hidden() -> usize {
    16
}
fn default_lookback() -> usize {
    16
}
fn default_tau() -> f64 {
    0.05
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            paradigm: default_paradigm(),
            backbone: default_backbone(),
            hidden: default_hidden(),
            lookback: default_lookback(),
            tau: default_tau(),
            spl: SplSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplSection {
    #[serde(default = "default_kernels")]
    pub kernel_sizes: Vec<usize>,
    #[serde(default = "default_channels")]
    pub channels_z: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn")]
    pub ffn_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_kernels() -> Vec<usize> {
    vec![3, 5, 7]
}
fn default_channels() -> usize {
    4
}
fn default_heads() -> usize {
    1
}
fn default_ffn() -> usize {
    128
}
fn default_dropout() -> f64 {
    0.1
}

impl Default for SplSection {
    fn default() -> Self {
        Self {
            kernel_sizes: default_kernels(),
            channels_z: default_channels(),
            heads: default_heads(),
            ffn_dim: default_ffn(),
            dropout: default_dropout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TplSection {
    /// Set false for the "attributes go straight to realization" ablation.
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Days per optimizer step; 0 means the whole epoch.
    #[serde(default = "default_bptt")]
    pub bptt_window: usize,
    /// Memory initialization: `graph:<path>`, `random:<seed>`, or `prior`
    /// to reuse the prior section. Absent: the prior if one is configured,
    /// otherwise `random:<run seed>`.
    #[serde(default)]
    pub init: Option<String>,
}

fn default_true() -> bool {
    true
}
fn default_bptt() -> usize {
    16
}

impl Default for TplSection {
    fn default() -> Self {
        Self {
            enabled: true,
            bptt_window: default_bptt(),
            init: None,
        }
    }
}

/// Prior-graph recipe; `kind` selects which other keys apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    /// One of `industry`, `dtw_knn`, `correlation`, `random`, `file`.
    pub kind: String,
    /// `industry`: ticker→sector CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub membership: Option<PathBuf>,
    /// `dtw_knn`: neighbours per stock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// `correlation`: minimum return correlation for an edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// `random`: edge probability.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// `random`: generator seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// `file`: a saved member-list graph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_max_lr")]
    pub max_lr: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    50
}
fn default_max_lr() -> f64 {
    1e-4
}
fn default_patience() -> usize {
    10
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            epochs: default_epochs(),
            max_lr: default_max_lr(),
            patience: default_patience(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_capital")]
    pub capital: f64,
    /// `mean` (equal-weight) or `sum` (literal per-stock sum).
    #[serde(default = "default_return_mode")]
    pub return_mode: String,
    /// `spearman` or `pearson`.
    #[serde(default = "default_ic_mode")]
    pub ic_mode: String,
}

fn default_k() -> usize {
    5
}
fn default_capital() -> f64 {
    10000.0
}
fn default_return_mode() -> String {
    "mean".into()
}
fn default_ic_mode() -> String {
    "spearman".into()
}

impl Default for BacktestSection {
    fn default() -> Self {
        Self {
            k: default_k(),
            capital: default_capital(),
            return_mode: default_return_mode(),
            ic_mode: default_ic_mode(),
        }
    }
}

// ── Loading, validation, resolution ─────────────────────────────────────

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the fully-resolved document (defaults filled in) for
    /// provenance.
    pub fn write_resolved(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_pretty_json() + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        // Data source: synthetic or CSV directory, exactly one.
        let has_csv = self.data.csv_dir.is_some() || self.data.tickers.is_some();
        let has_synth = self.data.synth.is_some();
        if has_csv && has_synth {
            return Err(bad("data", "give either csv_dir+tickers or synth, not both"));
        }
        if !has_csv && !has_synth {
            return Err(bad("data", "one of csv_dir+tickers or synth is required"));
        }
        if has_csv && (self.data.csv_dir.is_none() || self.data.tickers.is_none()) {
            return Err(bad("data", "csv_dir and tickers must be given together"));
        }
        if let Some(s) = &self.data.synth {
            if s.stocks == 0 || s.clusters == 0 || s.stocks % s.clusters != 0 {
                return Err(bad(
                    "data.synth",
                    format!("{} stocks must split into {} equal clusters", s.stocks, s.clusters),
                ));
            }
            if !(s.noise >= 0.0) {
                return Err(bad("data.synth.noise", "must be non-negative"));
            }
        }
        match (&self.data.split.ratios, &self.data.split.dates) {
            (Some(_), Some(_)) => {
                return Err(bad("data.split", "give ratios or dates, not both"));
            }
            (None, None) => return Err(bad("data.split", "ratios or dates is required")),
            _ => {}
        }
        self.split_spec()?;

        Paradigm::parse(&self.model.paradigm)
            .ok_or_else(|| bad("model.paradigm", "expected end2end or twostep"))?;
        BackboneKind::parse(&self.model.backbone)
            .ok_or_else(|| bad("model.backbone", "expected gcn, hgcn or mlp"))?;
        if self.model.hidden == 0 {
            return Err(bad("model.hidden", "must be at least 1"));
        }
        if self.model.lookback == 0 {
            return Err(bad("model.lookback", "must be at least 1"));
        }
        if !(self.model.tau >= 0.0) {
            return Err(bad("model.tau", "must be non-negative"));
        }
        let spl = &self.model.spl;
        if spl.kernel_sizes.is_empty() {
            return Err(bad("model.spl.kernel_sizes", "needs at least one kernel"));
        }
        if spl.kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(bad("model.spl.kernel_sizes", "kernels must be odd"));
        }
        if spl.channels_z == 0 || spl.heads == 0 || spl.ffn_dim == 0 {
            return Err(bad("model.spl", "channels_z, heads and ffn_dim must be at least 1"));
        }
        if !(0.0..1.0).contains(&spl.dropout) {
            return Err(bad("model.spl.dropout", "must lie in [0, 1)"));
        }

        if let Some(init) = &self.tpl.init {
            parse_init_string(init)?;
        }
        if let Some(prior) = &self.prior {
            prior.validate()?;
        }
        if self.tpl.init.as_deref() == Some("prior") && self.prior.is_none() {
            return Err(bad("tpl.init", "`prior` requires a prior section"));
        }

        self.train_config().validate().map_err(|e| bad("train", e.to_string()))?;

        if self.backtest.k == 0 {
            return Err(bad("backtest.k", "must be at least 1"));
        }
        if !(self.backtest.capital > 0.0) {
            return Err(bad("backtest.capital", "must be positive"));
        }
        self.return_mode()?;
        self.ic_mode()?;
        Ok(())
    }

    pub fn split_spec(&self) -> Result<SplitSpec, ConfigError> {
        if let Some(r) = self.data.split.ratios {
            if r.iter().any(|&v| !(v > 0.0)) {
                return Err(bad("data.split.ratios", "weights must be positive"));
            }
            return Ok(SplitSpec::Ratios(r));
        }
        let d = self.data.split.dates.as_ref().expect("validated");
        let parse = |s: &str| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map_err(|_| bad("data.split.dates", format!("cannot parse date {s:?}")))
        };
        let range = |r: &[String; 2]| Ok::<_, ConfigError>((parse(&r[0])?, parse(&r[1])?));
        Ok(SplitSpec::Dates {
            train: range(&d.train)?,
            valid: range(&d.valid)?,
            test: range(&d.test)?,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            paradigm: Paradigm::parse(&self.model.paradigm).expect("validated"),
            backbone: BackboneKind::parse(&self.model.backbone).expect("validated"),
            use_tpl: self.tpl.enabled,
            spl: crate::spl::SplConfig {
                kernel_sizes: self.model.spl.kernel_sizes.clone(),
                channels_z: self.model.spl.channels_z,
                heads: self.model.spl.heads,
                ffn_dim: self.model.spl.ffn_dim,
                dropout: self.model.spl.dropout,
            },
            tau: self.model.tau,
            hidden: self.model.hidden,
            lookback: self.model.lookback,
            features: NUM_FEATURES,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.train.alpha,
            epochs: self.train.epochs,
            max_lr: self.train.max_lr,
            patience: self.train.patience,
            bptt_window: self.tpl.bptt_window,
            seed: self.seed,
        }
    }

    pub fn return_mode(&self) -> Result<ReturnMode, ConfigError> {
        ReturnMode::parse(&self.backtest.return_mode)
            .ok_or_else(|| bad("backtest.return_mode", "expected mean or sum"))
    }

    pub fn ic_mode(&self) -> Result<IcMode, ConfigError> {
        IcMode::parse(&self.backtest.ic_mode)
            .ok_or_else(|| bad("backtest.ic_mode", "expected spearman or pearson"))
    }

    /// Loads or generates the panel. The second value is the planted
    /// cluster label per stock for synthetic panels.
    pub fn build_panel(&self) -> Result<(PricePanel, Option<Vec<usize>>), Error> {
        let spec = self.split_spec().map_err(Error::Config)?;
        if let Some(s) = &self.data.synth {
            let (tickers, calendar, closes, labels) =
                data::synth_closes(s.stocks, s.days, s.clusters, s.noise, s.seed)?;
            let panel = PricePanel::new(tickers, calendar, closes, &spec)?;
            return Ok((panel, Some(labels)));
        }
        let dir = self.data.csv_dir.as_ref().expect("validated");
        let tickers = self.data.tickers.as_ref().expect("validated");
        let load = load_csv_dir(dir, tickers)?;
        let panel = PricePanel::new(load.tickers, load.calendar, load.closes, &spec)?;
        Ok((panel, None))
    }

    /// Builds the configured prior graph against a loaded panel, already
    /// adapted to the backbone's graph mode.
    pub fn build_prior(&self, panel: &PricePanel) -> Result<Option<PriorGraph>, Error> {
        let Some(section) = &self.prior else {
            return Ok(None);
        };
        let graph = section.build(panel)?;
        let adapted = match self.model_config().backbone.mode() {
            Some(mode) => graph.adapt(mode),
            None => graph,
        };
        Ok(Some(adapted))
    }

    /// Resolves the memory initialization for recurrent configurations.
    pub fn memory_init(&self, prior: Option<&PriorGraph>) -> Result<MemoryInit, Error> {
        match self.tpl.init.as_deref() {
            Some("prior") => {
                let p = prior.ok_or_else(|| {
                    Error::Config(bad("tpl.init", "`prior` requires a prior section"))
                })?;
                Ok(p.memory_init())
            }
            Some(s) => match parse_init_string(s).map_err(Error::Config)? {
                InitSpec::Random(seed) => Ok(MemoryInit::Random { seed }),
                InitSpec::Graph(path) => {
                    // Clique expansion happens at load, so hyper and pair
                    // files both arrive as pairwise memory.
                    let g = PairGraph::load(&path)?;
                    Ok(MemoryInit::Pairwise(g))
                }
            },
            None => match prior {
                Some(p) => Ok(p.memory_init()),
                None => Ok(MemoryInit::Random { seed: self.seed }),
            },
        }
    }
}

enum InitSpec {
    Random(u64),
    Graph(PathBuf),
}

fn parse_init_string(s: &str) -> Result<InitSpec, ConfigError> {
    if s == "prior" {
        // Handled by the caller, which knows the prior; parse-only callers
        // treat it as valid.
        return Ok(InitSpec::Random(0));
    }
    if let Some(seed) = s.strip_prefix("random:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| bad("tpl.init", format!("cannot parse seed in {s:?}")))?;
        return Ok(InitSpec::Random(seed));
    }
    if let Some(path) = s.strip_prefix("graph:") {
        if path.is_empty() {
            return Err(bad("tpl.init", "graph: needs a path"));
        }
        return Ok(InitSpec::Graph(PathBuf::from(path)));
    }
    Err(bad(
        "tpl.init",
        format!("expected graph:<path>, random:<seed> or prior, got {s:?}"),
    ))
}

impl PriorSection {
    fn validate(&self) -> Result<(), ConfigError> {
        let used: &[(&str, bool)] = &[
            ("membership", self.membership.is_some()),
            ("k", self.k.is_some()),
            ("threshold", self.threshold.is_some()),
            ("p", self.p.is_some()),
            ("seed", self.seed.is_some()),
            ("path", self.path.is_some()),
        ];
        let allow: &[&str] = match self.kind.as_str() {
            "industry" => &["membership"],
            "dtw_knn" => &["k"],
            "correlation" => &["threshold"],
            "random" => &["p", "seed"],
            "file" => &["path"],
            other => {
                return Err(bad(
                    "prior.kind",
                    format!("unknown kind {other:?}; expected industry, dtw_knn, correlation, random or file"),
                ));
            }
        };
        for (name, set) in used {
            let allowed = allow.contains(name);
            if *set && !allowed {
                return Err(bad(
                    "prior",
                    format!("key {name:?} does not apply to kind {:?}", self.kind),
                ));
            }
            if !*set && allowed && *name != "seed" {
                return Err(bad(
                    "prior",
                    format!("kind {:?} requires key {name:?}", self.kind),
                ));
            }
        }
        if let Some(p) = self.p {
            if !(0.0..=1.0).contains(&p) {
                return Err(bad("prior.p", "must lie in [0, 1]"));
            }
        }
        if self.k == Some(0) {
            return Err(bad("prior.k", "must be at least 1"));
        }
        Ok(())
    }

    /// Builds the described graph against a loaded panel. Windowed
    /// constructors (DTW, correlation) see training-segment days only.
    pub fn build(&self, panel: &PricePanel) -> Result<PriorGraph, Error> {
        let train_window = FEATURE_START..panel.split().train_end;
        match self.kind.as_str() {
            "industry" => {
                let path = self.membership.as_ref().expect("validated");
                let membership: HashMap<String, String> = load_membership_csv(path)?;
                let h = industry_graph(panel.tickers(), &membership)?;
                Ok(PriorGraph::Hyper(h))
            }
            "dtw_knn" => {
                let k = self.k.expect("validated");
                let h = dtw_k_hypergraph(panel, train_window, k)?;
                Ok(PriorGraph::Hyper(h))
            }
            "correlation" => {
                let t = self.threshold.expect("validated");
                let g = correlation_graph(panel, train_window, t)?;
                Ok(PriorGraph::Pairwise(g))
            }
            "random" => {
                let p = self.p.expect("validated");
                let seed = self.seed.unwrap_or(0);
                Ok(PriorGraph::Pairwise(random_pair_graph(
                    panel.num_stocks(),
                    p,
                    seed,
                )))
            }
            "file" => {
                let path = self.path.as_ref().expect("validated");
                Ok(PriorGraph::Pairwise(PairGraph::load(path)?))
            }
            _ => unreachable!("validated"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::realize::GraphMode;

    fn synth_json() -> &'static str {
        r#"{
            "seed": 7,
            "data": {"synth": {"stocks": 6, "days": 120, "clusters": 2}}
        }"#
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_json(synth_json()).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.backbone, "gcn");
        assert_eq!(cfg.model.spl.kernel_sizes, vec![3, 5, 7]);
        assert!(cfg.tpl.enabled);
        assert_eq!(cfg.tpl.bptt_window, 16);
        assert_eq!(cfg.train.max_lr, 1e-4);
        assert_eq!(cfg.backtest.k, 5);
        assert_eq!(cfg.data.split.ratios, Some([6.0, 2.0, 2.0]));
        let tc = cfg.train_config();
        assert_eq!(tc.seed, 7);
        assert_eq!(tc.bptt_window, 16);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let err = RunConfig::from_json(
            r#"{"data": {"synth": {"stocks": 4, "days": 60, "clusters": 2}}, "modle": {}}"#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("modle"), "message should name the bad key: {msg}");
    }

    #[test]
    fn nested_unknown_keys_are_rejected_too() {
        let err = RunConfig::from_json(
            r#"{"data": {"synth": {"stocks": 4, "days": 60, "clusters": 2}},
                "model": {"hiden": 3}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("hiden"));
    }

    #[test]
    fn data_source_must_be_exactly_one() {
        let err = RunConfig::from_json(r#"{"data": {}}"#).unwrap_err();
        assert!(err.to_string().contains("csv_dir"));
        let err = RunConfig::from_json(
            r#"{"data": {"csv_dir": "x", "tickers": "y",
                         "synth": {"stocks": 4, "days": 60, "clusters": 2}}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("not both"));
    }

    #[test]
    fn split_accepts_dates_and_rejects_ambiguity() {
        let cfg = RunConfig::from_json(
            r#"{"data": {"synth": {"stocks": 4, "days": 60, "clusters": 2},
                "split": {"dates": {
                    "train": ["2015-01-02", "2015-06-30"],
                    "valid": ["2015-07-01", "2015-09-30"],
                    "test":  ["2015-10-01", "2015-12-31"]}}}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.split_spec().unwrap(), SplitSpec::Dates { .. }));

        let err = RunConfig::from_json(
            r#"{"data": {"synth": {"stocks": 4, "days": 60, "clusters": 2},
                "split": {"ratios": [6, 2, 2], "dates": {
                    "train": ["2015-01-02", "2015-06-30"],
                    "valid": ["2015-07-01", "2015-09-30"],
                    "test":  ["2015-10-01", "2015-12-31"]}}}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("not both"));

        let err = RunConfig::from_json(
            r#"{"data": {"synth": {"stocks": 4, "days": 60, "clusters": 2},
                "split": {}}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("required"));
    }

    #[test]
    fn bad_enum_strings_are_named() {
        let err = RunConfig::from_json(
            r#"{"data": {"synth": {"stocks": 4, "days": 60, "clusters": 2}},
                "model": {"backbone": "transformer"}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("model.backbone"));
    }

    #[test]
    fn even_kernels_are_rejected() {
        let err = RunConfig::from_json(
            r#"{"data": {"synth": {"stocks": 4, "days": 60, "clusters": 2}},
                "model": {"spl": {"kernel_sizes": [4]}}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("odd"));
    }

    #[test]
    fn init_string_forms_parse() {
        let mut cfg = RunConfig::from_json(synth_json()).unwrap();
        cfg.tpl.init = Some("random:99".into());
        cfg.validate().unwrap();
        let init = cfg.memory_init(None).unwrap();
        assert!(matches!(init, MemoryInit::Random { seed: 99 }));

        cfg.tpl.init = Some("warfarin".into());
        assert!(cfg.validate().is_err());

        cfg.tpl.init = Some("prior".into());
        assert!(cfg.validate().is_err(), "prior init without prior section");
    }

    #[test]
    fn absent_init_uses_prior_then_seed() {
        let mut cfg = RunConfig::from_json(synth_json()).unwrap();
        assert!(matches!(
            cfg.memory_init(None).unwrap(),
            MemoryInit::Random { seed: 7 }
        ));
        cfg.prior = Some(PriorSection {
            kind: "random".into(),
            membership: None,
            k: None,
            threshold: None,
            p: Some(0.5),
            seed: Some(3),
            path: None,
        });
        cfg.validate().unwrap();
        let (panel, _) = cfg.build_panel().unwrap();
        let prior = cfg.build_prior(&panel).unwrap().unwrap();
        assert!(matches!(
            cfg.memory_init(Some(&prior)).unwrap(),
            MemoryInit::Pairwise(_)
        ));
    }

    #[test]
    fn prior_sections_reject_mismatched_keys() {
        let mut cfg = RunConfig::from_json(synth_json()).unwrap();
        cfg.prior = Some(PriorSection {
            kind: "random".into(),
            membership: None,
            k: Some(3), // does not belong to `random`
            threshold: None,
            p: Some(0.5),
            seed: None,
            path: None,
        });
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("\"k\""));

        cfg.prior = Some(PriorSection {
            kind: "dtw_knn".into(),
            membership: None,
            k: None, // required
            threshold: None,
            p: None,
            seed: None,
            path: None,
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn priors_build_on_a_synthetic_panel() {
        let mut cfg = RunConfig::from_json(synth_json()).unwrap();
        let (panel, labels) = cfg.build_panel().unwrap();
        assert_eq!(panel.num_stocks(), 6);
        assert_eq!(labels.unwrap().len(), 6);

        cfg.prior = Some(PriorSection {
            kind: "dtw_knn".into(),
            membership: None,
            k: Some(2),
            threshold: None,
            p: None,
            seed: None,
            path: None,
        });
        cfg.validate().unwrap();
        let prior = cfg.build_prior(&panel).unwrap().unwrap();
        // gcn backbone wants pairwise, so the hypergraph arrives expanded.
        assert!(matches!(prior, PriorGraph::Pairwise(_)));

        cfg.model.backbone = "hgcn".into();
        let prior = cfg.build_prior(&panel).unwrap().unwrap();
        assert!(matches!(prior, PriorGraph::Hyper(_)));
        assert_eq!(prior.realize::<f64>().mode, GraphMode::Hyper);
    }

    #[test]
    fn industry_prior_reads_a_membership_file() {
        let dir = tempfile::tempdir().unwrap();
        let members = dir.path().join("sectors.csv");
        std::fs::write(
            &members,
            "S0000,tech\nS0001,tech\nS0002,energy\nS0003,energy\nS0004,tech\nS0005,energy\n",
        )
        .unwrap();
        let mut cfg = RunConfig::from_json(synth_json()).unwrap();
        cfg.prior = Some(PriorSection {
            kind: "industry".into(),
            membership: Some(members),
            k: None,
            threshold: None,
            p: None,
            seed: None,
            path: None,
        });
        cfg.validate().unwrap();
        let (panel, _) = cfg.build_panel().unwrap();
        let prior = cfg.build_prior(&panel).unwrap().unwrap();
        match prior {
            PriorGraph::Pairwise(g) => {
                // Two sectors of three members, clique-expanded: 3+3 edges.
                assert_eq!(g.num_edges(), 6);
            }
            PriorGraph::Hyper(_) => panic!("gcn backbone expects the pairwise expansion"),
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::from_json(synth_json()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.json");
        cfg.write_resolved(&path).unwrap();
        let back = RunConfig::from_path(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_json_reports_parse_error() {
        let err = RunConfig::from_json("{not json").unwrap_err();
        assert!(matches!(err, ConfigError::Json(_)));
    }
}
