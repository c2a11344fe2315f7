//! PnL with commissions, Sharpe ratio, maximum drawdown and equity curves.
//!
//! All metrics are per-period; nothing is annualized.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{compute_returns, CandleSeries};

/// Market stance: short, out of the market, or long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Position {
    Short,
    #[default]
    Flat,
    Long,
}

impl Position {
    pub const ALL: [Position; 3] = [Position::Short, Position::Flat, Position::Long];

    pub fn value(self) -> f64 {
        f64::from(i8::from(self))
    }

    /// Index into `[short, flat, long]` action/class vectors.
    pub fn index(self) -> usize {
        match self {
            Position::Short => 0,
            Position::Flat => 1,
            Position::Long => 2,
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Position::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::Domain(format!("action index {index} outside 0..3")))
    }

    pub fn from_signed(v: i64) -> Result<Self> {
        match v {
            -1 => Ok(Position::Short),
            0 => Ok(Position::Flat),
            1 => Ok(Position::Long),
            _ => Err(Error::Domain(format!("position {v} is not one of -1, 0, 1"))),
        }
    }

    /// Number of units traded when moving from `self` to `next`.
    pub fn change_to(self, next: Position) -> f64 {
        (next.value() - self.value()).abs()
    }
}

impl From<Position> for i8 {
    fn from(p: Position) -> i8 {
        match p {
            Position::Short => -1,
            Position::Flat => 0,
            Position::Long => 1,
        }
    }
}

impl TryFrom<i8> for Position {
    type Error = Error;

    fn try_from(v: i8) -> Result<Self> {
        Position::from_signed(i64::from(v))
    }
}

/// Returns and the position held over each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestInput {
    pub returns: Vec<f64>,
    pub positions: Vec<Position>,
    /// Position held before the first step.
    pub prior: Position,
    pub commission: f64,
}

impl BacktestInput {
    pub fn new(returns: Vec<f64>, positions: Vec<Position>, commission: f64) -> Self {
        BacktestInput {
            returns,
            positions,
            prior: Position::Flat,
            commission,
        }
    }

    pub fn with_prior(mut self, prior: Position) -> Self {
        self.prior = prior;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.returns.len() != self.positions.len() {
            return Err(Error::Shape(format!(
                "{} returns but {} positions",
                self.returns.len(),
                self.positions.len()
            )));
        }
        if !(self.commission >= 0.0) {
            return Err(Error::Domain(format!(
                "commission must be non-negative, got {}",
                self.commission
            )));
        }
        if let Some(r) = self.returns.iter().find(|r| !(**r > -1.0) || !r.is_finite()) {
            return Err(Error::Domain(format!("return {r} must be finite and > -1")));
        }
        Ok(())
    }

    /// Commission paid at each step for changing position.
    pub fn fees(&self) -> Vec<f64> {
        let mut prev = self.prior;
        self.positions
            .iter()
            .map(|&p| {
                let fee = prev.change_to(p) * self.commission;
                prev = p;
                fee
            })
            .collect()
    }

    /// Per-step `position * return - fee`.
    pub fn net_returns(&self) -> Vec<f64> {
        self.returns
            .iter()
            .zip(&self.positions)
            .zip(self.fees())
            .map(|((r, p), fee)| p.value() * r - fee)
            .collect()
    }

    pub fn trade_count(&self) -> usize {
        let mut prev = self.prior;
        self.positions
            .iter()
            .filter(|&&p| {
                let changed = p != prev;
                prev = p;
                changed
            })
            .count()
    }
}

/// Additive PnL: `sum_t position_t * r_t - |position_t - position_{t-1}| * c`.
pub fn pnl(input: &BacktestInput) -> Result<f64> {
    input.validate()?;
    Ok(input.net_returns().iter().sum())
}

/// `(mean - risk_free) / sample_std`.
pub fn sharpe(returns: &[f64], risk_free: f64) -> Result<f64> {
    if returns.len() < 2 {
        return Err(Error::UndefinedSharpe(format!(
            "need at least 2 returns, got {}",
            returns.len()
        )));
    }
    if returns.iter().all(|r| *r == returns[0]) {
        return Err(Error::UndefinedSharpe("returns have zero variance".into()));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::UndefinedSharpe("returns have zero variance".into()));
    }
    Ok((mean - risk_free) / sd)
}

/// Largest fractional decline from a running peak, `max_t 1 - equity_t / peak_t`.
pub fn max_drawdown(equity: &[f64]) -> Result<f64> {
    if equity.is_empty() {
        return Err(Error::Empty("equity curve".into()));
    }
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &e in equity {
        peak = peak.max(e);
        if peak > 0.0 {
            worst = worst.max(1.0 - e / peak);
        }
    }
    Ok(worst)
}

/// Multiplicative account value starting at 1, floored at 0 (ruin).
pub fn equity_curve(net_returns: &[f64]) -> Vec<f64> {
    let mut curve = Vec::with_capacity(net_returns.len() + 1);
    let mut equity = 1.0f64;
    curve.push(equity);
    for r in net_returns {
        equity = (equity * (1.0 + r)).max(0.0);
        curve.push(equity);
    }
    curve
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub pnl: f64,
    /// `None` when the per-step returns have zero variance.
    pub sharpe: Option<f64>,
    pub max_drawdown: f64,
    pub n_trades: usize,
    #[serde(skip)]
    pub equity_curve: Vec<f64>,
}

/// The structured-text summary written next to every backtest.
#[derive(Serialize)]
struct ReportSummary<'a> {
    pnl: f64,
    sharpe: Option<f64>,
    max_drawdown: f64,
    n_trades: usize,
    final_equity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'a str>,
}

impl BacktestReport {
    pub fn final_equity(&self) -> f64 {
        self.equity_curve.last().copied().unwrap_or(1.0)
    }

    pub fn summary_json(&self, label: Option<&str>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ReportSummary {
            pnl: self.pnl,
            sharpe: self.sharpe,
            max_drawdown: self.max_drawdown,
            n_trades: self.n_trades,
            final_equity: self.final_equity(),
            label,
        })?)
    }

    pub fn equity_csv(&self) -> String {
        let mut out = String::from("step,equity\n");
        for (i, e) in self.equity_curve.iter().enumerate() {
            let _ = writeln!(out, "{i},{e}");
        }
        out
    }

    pub fn write_equity_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.equity_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn backtest_input(input: &BacktestInput, risk_free: f64) -> Result<BacktestReport> {
    input.validate()?;
    let net = input.net_returns();
    let curve = equity_curve(&net);
    let sharpe = match sharpe(&net, risk_free) {
        Ok(s) => Some(s),
        Err(Error::UndefinedSharpe(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(BacktestReport {
        pnl: net.iter().sum(),
        sharpe,
        max_drawdown: max_drawdown(&curve)?,
        n_trades: input.trade_count(),
        equity_curve: curve,
    })
}

/// Backtests positions against the close-to-close returns of `series`;
/// `positions[t]` is held over the return from candle `t` to `t + 1`.
pub fn backtest(
    series: &CandleSeries,
    positions: &[Position],
    commission: f64,
    risk_free: f64,
) -> Result<BacktestReport> {
    let returns = compute_returns(series)?.values;
    backtest_input(
        &BacktestInput::new(returns, positions.to_vec(), commission),
        risk_free,
    )
}

/// One row per labelled report, same columns as [`BacktestReport`].
pub fn comparison_table(rows: &[(String, BacktestReport)]) -> String {
    let mut out = String::from("name,pnl,sharpe,max_drawdown,n_trades\n");
    for (name, r) in rows {
        let sharpe = r.sharpe.map_or_else(|| "NA".to_string(), |s| s.to_string());
        let _ = writeln!(
            out,
            "{name},{},{sharpe},{},{}",
            r.pnl, r.max_drawdown, r.n_trades
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use Position::*;

    #[test]
    fn pnl_examples() {
        assert_abs_diff_eq!(pnl(&BacktestInput::new(vec![0.1], vec![Long], 0.0)).unwrap(), 0.1);
        assert_abs_diff_eq!(
            pnl(&BacktestInput::new(vec![0.1], vec![Long], 0.001)).unwrap(),
            0.099,
            epsilon = 1e-15
        );
        let held = BacktestInput::new(vec![0.05, -0.05], vec![Short, Short], 0.37).with_prior(Short);
        assert_abs_diff_eq!(pnl(&held).unwrap(), 0.0, epsilon = 1e-15);
        assert!(matches!(
            pnl(&BacktestInput::new(vec![0.1, 0.2], vec![Long], 0.0)).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn consecutive_positions_pay_once() {
        let input = BacktestInput::new(vec![0.0; 4], vec![Long, Long, Long, Flat], 0.01);
        assert_eq!(input.fees(), vec![0.01, 0.0, 0.0, 0.01]);
        assert_eq!(input.trade_count(), 2);
        let flip = BacktestInput::new(vec![0.0], vec![Long], 0.01).with_prior(Short);
        assert_eq!(flip.fees(), vec![0.02]);
    }

    #[test]
    fn sharpe_examples() {
        // mean 0.02, sample sd sqrt(2e-4)
        assert_abs_diff_eq!(sharpe(&[0.01, 0.03], 0.0).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
        assert!(matches!(sharpe(&[0.1, 0.1, 0.1], 0.0), Err(Error::UndefinedSharpe(_))));
        assert!(matches!(sharpe(&[0.1], 0.0), Err(Error::UndefinedSharpe(_))));
        assert_abs_diff_eq!(sharpe(&[0.0, 0.5, 1.0], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn drawdown_examples() {
        assert_abs_diff_eq!(max_drawdown(&[1.0, 1.2, 0.9, 1.1]).unwrap(), 0.25, epsilon = 1e-15);
        assert_eq!(max_drawdown(&[1.0, 1.1, 1.3]).unwrap(), 0.0);
        assert_eq!(max_drawdown(&[1.0, 0.5]).unwrap(), 0.5);
        assert!(max_drawdown(&[]).is_err());
    }

    #[test]
    fn out_of_market_report() {
        let r = backtest_input(&BacktestInput::new(vec![0.01, -0.02, 0.03], vec![Flat; 3], 0.001), 0.0).unwrap();
        assert_eq!(r.pnl, 0.0);
        assert_eq!(r.n_trades, 0);
        assert!(r.equity_curve.iter().all(|e| *e == 1.0));
        assert_eq!(r.sharpe, None);
    }

    #[test]
    fn report_matches_pnl_and_table_has_one_row_each() {
        let input = BacktestInput::new(vec![0.01, -0.02, 0.03], vec![Long, Short, Long], 0.001);
        let r = backtest_input(&input, 0.0).unwrap();
        assert_eq!(r.pnl, pnl(&input).unwrap());
        assert_eq!(r.equity_curve.len(), 4);
        let table = comparison_table(&[("a".into(), r.clone()), ("b".into(), r)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 5));
        let json: serde_json::Value = serde_json::from_str(&backtest_input(&input, 0.0).unwrap().summary_json(None).unwrap()).unwrap();
        for key in ["pnl", "sharpe", "max_drawdown", "n_trades"] {
            assert!(json.get(key).is_some());
        }
    }

    #[test]
    fn position_conversions() {
        assert_eq!(Position::from_signed(-1).unwrap(), Short);
        assert!(Position::from_signed(2).is_err());
        assert_eq!(Position::from_index(2).unwrap(), Long);
        assert!(Position::from_index(3).is_err());
        assert_eq!(serde_json::to_string(&Short).unwrap(), "-1");
    }
}
