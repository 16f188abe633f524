//! Federated model marketplace simulator.
//!
//! Sellers train a buyer's model with federated averaging, every round of
//! gradient deltas is recorded on a simulated proof-of-work ledger, and the
//! buyer's escrowed deposit is paid out in proportion to each seller's
//! Shapley value.  Valuation is available by exact retraining (SFSV), by
//! replaying the recorded deltas (Single-Cal, Multi-Cal) and by truncated
//! Monte-Carlo sampling over replayed models (AFS).
//!
//! Module map:
//!
//! * [`learner`]: datasets, small classifiers, SGD and the accuracy utility.
//! * [`federation`]: FedAvg rounds, the round log and subset replay.
//! * [`shapley`]: every valuation method plus normalization, `D_max` and the
//!   permutation-count bound.
//! * [`ledger`]: blocks, transactions, mining, fork resolution, gas and the
//!   content-addressed blob store.
//! * [`market`]: the deal state machine, token escrow and settlement.
//! * [`scenarios`]: synthetic data and the four partitioning scenarios.
//! * [`experiment`]: the end-to-end driver used by the command line tool.

pub mod experiment;
pub mod federation;
pub mod learner;
pub mod ledger;
pub mod market;
pub mod scenarios;
pub mod seed;
pub mod shapley;

pub use federation::{ClientId, Coalition, FederationConfig, RoundDelta, RoundLog};
pub use learner::{Architecture, Dataset, Hyperparams, ModelParams, UtilityScore};
pub use shapley::{Method, ShapleyVector, TmcConfig};
