//! Research engine for deep-learning trading agents.
//!
//! The pipeline runs from candle ingestion ([`market_data`]) and sentiment
//! fusion ([`sentiment`]) through normalization ([`normalization`]) and
//! feed-forward models ([`nn`]) to supervised training with online knowledge
//! distillation ([`supervised`]), reinforcement-learning agents ([`rl`]) in a
//! simulated market ([`env`]), and backtest metrics ([`backtest`]).

pub mod backtest;
pub mod env;
pub mod error;
pub mod market_data;
pub mod nn;
pub mod normalization;
pub mod rl;
pub mod seed;
pub mod sentiment;
pub mod supervised;

pub use error::{Error, Result};
