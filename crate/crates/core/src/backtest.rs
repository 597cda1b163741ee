//! Daily-rebalanced top-k portfolio simulation and the ranking metrics:
//! annualised compounded return, Sharpe ratio, and per-day cross-sectional
//! information coefficients.

use thiserror::Error;

/// Trading days per year used for annualization.
pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("cannot select top {k} of {n} stocks")]
    KTooLarge { k: usize, n: usize },
    #[error("no days to evaluate")]
    Empty,
    #[error("need at least {need} days, got {have}")]
    TooFewDays { have: usize, need: usize },
    #[error("{0} is undefined: zero variance")]
    ZeroVariance(&'static str),
    #[error("predictions contain non-finite values")]
    NonFinitePrediction,
    #[error("daily return {0} wipes out the portfolio (must stay above -1)")]
    ReturnBelowNegOne(f64),
    #[error("non-positive price {0} in backtest input")]
    NonPositivePrice(f64),
    #[error("prediction and return rows disagree: {0}")]
    Alignment(String),
}

impl BacktestError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BacktestError::KTooLarge { .. } => 2,
            BacktestError::ZeroVariance(_)
            | BacktestError::NonFinitePrediction
            | BacktestError::ReturnBelowNegOne(_)
            | BacktestError::NonPositivePrice(_) => 4,
            _ => 3,
        }
    }
}

/// How the k selected returns aggregate into the portfolio return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnMode {
    /// Equal-weight: the mean of the selected returns.
    Mean,
    /// Literal sum of the selected returns (k-times-levered variant).
    Sum,
}

impl ReturnMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(ReturnMode::Mean),
            "sum" => Some(ReturnMode::Sum),
            _ => None,
        }
    }
}

/// Which correlation the information coefficient uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcMode {
    Spearman,
    Pearson,
}

impl IcMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "spearman" => Some(IcMode::Spearman),
            "pearson" => Some(IcMode::Pearson),
            _ => None,
        }
    }
}

/// Indices of the `k` largest predictions, ties going to the lower index;
/// returned in ascending index order. Adding a constant to every
/// prediction cannot change the selection.
pub fn select_topk(preds: &[f64], k: usize) -> Result<Vec<usize>, BacktestError> {
    let n = preds.len();
    if k > n {
        return Err(BacktestError::KTooLarge { k, n });
    }
    if preds.iter().any(|v| !v.is_finite()) {
        return Err(BacktestError::NonFinitePrediction);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| preds[b].partial_cmp(&preds[a]).unwrap().then(a.cmp(&b)));
    let mut picks = order[..k].to_vec();
    picks.sort_unstable();
    Ok(picks)
}

/// Portfolio return of one holding day from entry and exit prices.
pub fn daily_return(
    closes_t: &[f64],
    closes_t1: &[f64],
    mode: ReturnMode,
) -> Result<f64, BacktestError> {
    if closes_t.is_empty() || closes_t.len() != closes_t1.len() {
        return Err(BacktestError::Alignment(format!(
            "{} entry prices vs {} exit prices",
            closes_t.len(),
            closes_t1.len()
        )));
    }
    let mut acc = 0.0;
    for (&c0, &c1) in closes_t.iter().zip(closes_t1) {
        if c0 <= 0.0 {
            return Err(BacktestError::NonPositivePrice(c0));
        }
        acc += (c1 - c0) / c0;
    }
    Ok(match mode {
        ReturnMode::Mean => acc / closes_t.len() as f64,
        ReturnMode::Sum => acc,
    })
}

/// Compounded return scaled to a 252-day year:
/// `(prod(1 + r))^(252/T) - 1`.
pub fn annualised_irr(returns: &[f64]) -> Result<f64, BacktestError> {
    if returns.is_empty() {
        return Err(BacktestError::Empty);
    }
    let mut wealth = 1.0;
    for &r in returns {
        if r <= -1.0 {
            return Err(BacktestError::ReturnBelowNegOne(r));
        }
        wealth *= 1.0 + r;
    }
    Ok(wealth.powf(TRADING_DAYS / returns.len() as f64) - 1.0)
}

fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Annualized mean-over-volatility at zero risk-free rate, with the sample
/// (n-1) standard deviation.
pub fn sharpe(returns: &[f64]) -> Result<f64, BacktestError> {
    if returns.len() < 2 {
        return Err(BacktestError::TooFewDays {
            have: returns.len(),
            need: 2,
        });
    }
    // A constant series has zero variance by definition; check equality
    // directly because the accumulated mean of an unrepresentable constant
    // leaves the computed deviations a few ulps away from zero.
    if returns.iter().all(|&r| r == returns[0]) {
        return Err(BacktestError::ZeroVariance("sharpe ratio"));
    }
    let (mean, std) = mean_and_sample_std(returns);
    if std == 0.0 {
        return Err(BacktestError::ZeroVariance("sharpe ratio"));
    }
    Ok(mean / std * TRADING_DAYS.sqrt())
}

/// Ranks with ties sharing their average position (1-based).
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

/// Cross-sectional correlation of one day's predictions against realized
/// returns. `None` when undefined (constant inputs).
pub fn day_ic(preds: &[f64], realized: &[f64], mode: IcMode) -> Option<f64> {
    match mode {
        IcMode::Pearson => pearson(preds, realized),
        IcMode::Spearman => pearson(&average_ranks(preds), &average_ranks(realized)),
    }
}

/// Per-day information coefficients and their aggregates.
#[derive(Debug, Clone)]
pub struct IcSummary {
    /// One entry per evaluated day, in order.
    pub daily: Vec<f64>,
    /// Days dropped for having fewer than three finite stock pairs or an
    /// undefined correlation.
    pub skipped: usize,
    pub mean: f64,
    /// `mean / sample std` of the daily series; `None` when the series is
    /// too short or has zero variance.
    pub icir: Option<f64>,
}

/// Computes the daily IC series over aligned `days x stocks` matrices.
pub fn ic_series(
    preds: &[Vec<f64>],
    realized: &[Vec<f64>],
    mode: IcMode,
) -> Result<IcSummary, BacktestError> {
    if preds.len() != realized.len() {
        return Err(BacktestError::Alignment(format!(
            "{} prediction days vs {} return days",
            preds.len(),
            realized.len()
        )));
    }
    let mut daily = Vec::with_capacity(preds.len());
    let mut skipped = 0;
    for (p_row, r_row) in preds.iter().zip(realized) {
        if p_row.len() != r_row.len() {
            return Err(BacktestError::Alignment(format!(
                "{} predictions vs {} returns in one day",
                p_row.len(),
                r_row.len()
            )));
        }
        let pairs: (Vec<f64>, Vec<f64>) = p_row
            .iter()
            .zip(r_row)
            .filter(|(p, r)| p.is_finite() && r.is_finite())
            .map(|(&p, &r)| (p, r))
            .unzip();
        if pairs.0.len() < 3 {
            skipped += 1;
            continue;
        }
        match day_ic(&pairs.0, &pairs.1, mode) {
            Some(ic) => daily.push(ic),
            None => skipped += 1,
        }
    }
    if daily.is_empty() {
        return Err(BacktestError::Empty);
    }
    let mean = daily.iter().sum::<f64>() / daily.len() as f64;
    let icir = if daily.len() < 2 {
        None
    } else {
        let (m, s) = mean_and_sample_std(&daily);
        if s == 0.0 {
            None
        } else {
            Some(m / s)
        }
    };
    Ok(IcSummary {
        daily,
        skipped,
        mean,
        icir,
    })
}

/// One simulated holding day.
#[derive(Debug, Clone)]
pub struct LedgerRow {
    /// Position within the evaluated day sequence.
    pub day: usize,
    /// Selected stock indices, ascending.
    pub picks: Vec<usize>,
    /// Portfolio return for the day.
    pub ret: f64,
    /// Wealth after compounding this day.
    pub wealth: f64,
}

/// Full simulation record: exactly `k` picks per day and the wealth
/// recurrence `wealth_t = wealth_{t-1} * (1 + R_t)` from the initial
/// capital.
#[derive(Debug, Clone)]
pub struct Ledger {
    pub initial_capital: f64,
    pub rows: Vec<LedgerRow>,
}

impl Ledger {
    pub fn returns(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.ret).collect()
    }

    pub fn final_wealth(&self) -> f64 {
        self.rows
            .last()
            .map(|r| r.wealth)
            .unwrap_or(self.initial_capital)
    }
}

/// Runs the simulation over aligned `days x stocks` predictions and
/// realized per-stock returns: rank, hold the top k for the day, compound.
/// Transaction costs are zero.
pub fn run_backtest(
    preds: &[Vec<f64>],
    realized: &[Vec<f64>],
    k: usize,
    initial_capital: f64,
    mode: ReturnMode,
) -> Result<Ledger, BacktestError> {
    if preds.is_empty() {
        return Err(BacktestError::Empty);
    }
    if preds.len() != realized.len() {
        return Err(BacktestError::Alignment(format!(
            "{} prediction days vs {} return days",
            preds.len(),
            realized.len()
        )));
    }
    let mut wealth = initial_capital;
    let mut rows = Vec::with_capacity(preds.len());
    for (day, (p_row, r_row)) in preds.iter().zip(realized).enumerate() {
        if p_row.len() != r_row.len() {
            return Err(BacktestError::Alignment(format!(
                "day {day}: {} predictions vs {} returns",
                p_row.len(),
                r_row.len()
            )));
        }
        let picks = select_topk(p_row, k)?;
        let mut acc = 0.0;
        for &i in &picks {
            let r = r_row[i];
            if r <= -1.0 {
                return Err(BacktestError::ReturnBelowNegOne(r));
            }
            acc += r;
        }
        let ret = match mode {
            ReturnMode::Mean => acc / k as f64,
            ReturnMode::Sum => acc,
        };
        wealth *= 1.0 + ret;
        rows.push(LedgerRow {
            day,
            picks,
            ret,
            wealth,
        });
    }
    Ok(Ledger {
        initial_capital,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn topk_picks_largest_with_index_ties() {
        assert_eq!(select_topk(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_topk(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(select_topk(&[0.5, 0.1, 0.9], 3).unwrap(), vec![0, 1, 2]);
        assert!(matches!(
            select_topk(&[1.0], 2),
            Err(BacktestError::KTooLarge { k: 2, n: 1 })
        ));
    }

    #[test]
    fn topk_ignores_constant_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let preds: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = preds.iter().map(|p| p + 123.0).collect();
        assert_eq!(select_topk(&preds, 4).unwrap(), select_topk(&shifted, 4).unwrap());
    }

    #[test]
    fn daily_return_examples() {
        let r = daily_return(&[100.0, 50.0], &[110.0, 55.0], ReturnMode::Mean).unwrap();
        assert!((r - 0.10).abs() < 1e-15);
        let r = daily_return(&[100.0, 100.0], &[110.0, 90.0], ReturnMode::Mean).unwrap();
        assert_eq!(r, 0.0);
        let r = daily_return(&[100.0, 50.0, 20.0], &[110.0, 55.0, 19.0], ReturnMode::Mean).unwrap();
        assert!((r - 0.05).abs() < 1e-15);
        assert!(matches!(
            daily_return(&[0.0], &[1.0], ReturnMode::Mean),
            Err(BacktestError::NonPositivePrice(_))
        ));
    }

    #[test]
    fn sum_mode_levers_the_mean() {
        let mean = daily_return(&[100.0, 50.0], &[110.0, 60.0], ReturnMode::Mean).unwrap();
        let sum = daily_return(&[100.0, 50.0], &[110.0, 60.0], ReturnMode::Sum).unwrap();
        assert!((sum - 2.0 * mean).abs() < 1e-15);
    }

    #[test]
    fn irr_of_flat_returns_is_zero() {
        assert_eq!(annualised_irr(&[0.0; 30]).unwrap(), 0.0);
    }

    #[test]
    fn irr_matches_closed_form_over_a_year() {
        let r = 0.001;
        let got = annualised_irr(&vec![r; 252]).unwrap();
        let want = (1.0f64 + r).powi(252) - 1.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn irr_matches_log_domain_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rets: Vec<f64> = (0..237).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let got = annualised_irr(&rets).unwrap();
        let log_sum: f64 = rets.iter().map(|r| (1.0 + r).ln()).sum();
        let want = ((TRADING_DAYS / 237.0) * log_sum).exp() - 1.0;
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn irr_rejects_total_losses() {
        assert!(matches!(
            annualised_irr(&[0.01, -1.0]),
            Err(BacktestError::ReturnBelowNegOne(_))
        ));
    }

    #[test]
    fn sharpe_of_symmetric_returns_is_zero() {
        let r = [0.02, -0.02, 0.02, -0.02];
        assert!(sharpe(&r).unwrap().abs() < 1e-12);
    }

    #[test]
    fn sharpe_rejects_constant_series() {
        assert!(matches!(
            sharpe(&[0.01; 10]),
            Err(BacktestError::ZeroVariance(_))
        ));
    }

    #[test]
    fn sharpe_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rets: Vec<f64> = (0..100).map(|_| rng.gen_range(-0.03..0.03)).collect();
        let got = sharpe(&rets).unwrap();
        let mean = rets.iter().sum::<f64>() / 100.0;
        let var = rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 99.0;
        let want = mean / var.sqrt() * 252.0_f64.sqrt();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn ranks_average_over_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 30.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn perfect_agreement_and_reversal() {
        let preds = vec![vec![0.1, 0.5, -0.2, 0.9], vec![1.0, 2.0, 3.0, 4.0]];
        let same = preds.clone();
        let s = ic_series(&preds, &same, IcMode::Spearman).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-12);
        assert!(s.icir.is_none(), "constant IC series has no ICIR");

        let flipped: Vec<Vec<f64>> = preds
            .iter()
            .map(|row| row.iter().map(|v| -v).collect())
            .collect();
        let s = ic_series(&preds, &flipped, IcMode::Spearman).unwrap();
        assert!((s.mean + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_ic_ignores_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let preds: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let realized: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let warped: Vec<Vec<f64>> = preds
            .iter()
            .map(|row| row.iter().map(|v| v.exp() * 3.0 + 1.0).collect())
            .collect();
        let a = ic_series(&preds, &realized, IcMode::Spearman).unwrap();
        let b = ic_series(&warped, &realized, IcMode::Spearman).unwrap();
        for (x, y) in a.daily.iter().zip(&b.daily) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn daily_ics_match_rank_then_pearson_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let preds: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let realized: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let s = ic_series(&preds, &realized, IcMode::Spearman).unwrap();

        // Oracle: rank by sorting positions (no shared code), then Pearson.
        let rank = |xs: &[f64]| -> Vec<f64> {
            let mut idx: Vec<usize> = (0..xs.len()).collect();
            idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
            let mut out = vec![0.0; xs.len()];
            for (pos, &i) in idx.iter().enumerate() {
                out[i] = pos as f64 + 1.0;
            }
            out
        };
        for (day, ic) in s.daily.iter().enumerate() {
            let ra = rank(&preds[day]);
            let rb = rank(&realized[day]);
            let n = 10.0;
            let ma = ra.iter().sum::<f64>() / n;
            let mb = rb.iter().sum::<f64>() / n;
            let cov: f64 = ra.iter().zip(&rb).map(|(a, b)| (a - ma) * (b - mb)).sum();
            let va: f64 = ra.iter().map(|a| (a - ma).powi(2)).sum();
            let vb: f64 = rb.iter().map(|b| (b - mb).powi(2)).sum();
            let want = cov / (va * vb).sqrt();
            assert!((ic - want).abs() < 1e-12, "day {day}");
        }
    }

    #[test]
    fn degenerate_days_are_skipped() {
        let preds = vec![
            vec![1.0, 2.0, 3.0, 4.0],
            vec![f64::NAN, 1.0, 2.0, f64::NAN], // two finite pairs: skipped
            vec![1.0, 1.0, 1.0, 1.0],           // zero variance: skipped
        ];
        let realized = vec![vec![0.1, 0.2, 0.3, 0.4]; 3];
        let s = ic_series(&preds, &realized, IcMode::Spearman).unwrap();
        assert_eq!(s.daily.len(), 1);
        assert_eq!(s.skipped, 2);
    }

    #[test]
    fn constant_returns_keep_wealth_at_capital() {
        let preds = vec![vec![0.3, 0.1, 0.2]; 10];
        let realized = vec![vec![0.0, 0.0, 0.0]; 10];
        let ledger = run_backtest(&preds, &realized, 2, 10_000.0, ReturnMode::Mean).unwrap();
        assert_eq!(ledger.final_wealth(), 10_000.0);
    }

    #[test]
    fn doubling_stock_triples_compound() {
        let preds = vec![vec![1.0]; 3];
        let realized = vec![vec![1.0]; 3]; // +100% each day
        let ledger = run_backtest(&preds, &realized, 1, 10_000.0, ReturnMode::Mean).unwrap();
        assert_eq!(ledger.final_wealth(), 80_000.0);
    }

    #[test]
    fn ledger_matches_a_naive_simulator() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let days = 20;
        let n = 8;
        let preds: Vec<Vec<f64>> = (0..days)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let realized: Vec<Vec<f64>> = (0..days)
            .map(|_| (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect())
            .collect();
        let k = 3;
        let ledger = run_backtest(&preds, &realized, k, 10_000.0, ReturnMode::Mean).unwrap();

        // Oracle: independent day loop with its own selection sort.
        let mut wealth = 10_000.0;
        for day in 0..days {
            let mut best: Vec<usize> = Vec::new();
            for _ in 0..k {
                let mut arg = None;
                for i in 0..n {
                    if best.contains(&i) {
                        continue;
                    }
                    arg = match arg {
                        None => Some(i),
                        Some(j) if preds[day][i] > preds[day][j] => Some(i),
                        keep => keep,
                    };
                }
                best.push(arg.unwrap());
            }
            let r: f64 = best.iter().map(|&i| realized[day][i]).sum::<f64>() / k as f64;
            wealth *= 1.0 + r;
            assert_eq!(ledger.rows[day].picks.len(), k);
            assert!((ledger.rows[day].wealth - wealth).abs() < 1e-9 * wealth.abs());
        }
        assert!((ledger.final_wealth() - wealth).abs() < 1e-9 * wealth.abs());

        // Wealth recurrence against the product form.
        let product: f64 = ledger.returns().iter().map(|r| 1.0 + r).product();
        assert!((ledger.final_wealth() - 10_000.0 * product).abs() < 1e-6);
    }

    #[test]
    fn full_universe_selection_is_the_market_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let days = 10;
        let n = 6;
        let preds: Vec<Vec<f64>> = (0..days)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let realized: Vec<Vec<f64>> = (0..days)
            .map(|_| (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect())
            .collect();
        let ledger = run_backtest(&preds, &realized, n, 10_000.0, ReturnMode::Mean).unwrap();
        for (day, row) in ledger.rows.iter().enumerate() {
            let market: f64 = realized[day].iter().sum::<f64>() / n as f64;
            assert!((row.ret - market).abs() < 1e-15);
        }
    }
}
