//! Shapley-value valuation of federated clients.
//!
//! Every method reduces to a utility oracle over coalitions:
//!
//! * [`sfsv`] retrains a full federation for each coalition.
//! * [`single_cal`] replays the logged deltas of each coalition once.
//! * [`multi_cal`] values each round separately against that round's global
//!   model and sums the per-round values.
//! * [`afs`] samples permutations over replayed prefix models with
//!   truncation (truncated Monte-Carlo).
//!
//! Exact values use `phi_i = 1/n * sum_{S ⊆ N\{i}} [U(S∪{i}) - U(S)] / C(n-1,|S|)`,
//! which satisfies efficiency: `sum_i phi_i = U(N) - U(∅)`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::{
    self, Coalition, FederationConfig, FederationError, RoundLog, MAX_CLIENTS,
};
use crate::learner::{self, Dataset, LearnerError, ModelParams};
use crate::seed;

/// Exact enumeration touches `2^n` coalitions.
pub const MAX_EXACT_PLAYERS: usize = 20;
/// SFSV retrains one federation per coalition.
pub const MAX_SFSV_PLAYERS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapleyError {
    #[error("{method} supports at most {max} players, got {n}")]
    Capacity {
        method: &'static str,
        n: usize,
        max: usize,
    },
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("cannot normalize a vector whose entries sum to zero")]
    ZeroSum,
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("vector is not normalized")]
    NotNormalized,
    #[error("invalid argument: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, ShapleyError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    Sfsv,
    SingleCal,
    MultiCal,
    Afs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Sfsv => "sfsv",
            Method::SingleCal => "single-cal",
            Method::MultiCal => "multi-cal",
            Method::Afs => "afs",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(Method::Exact),
            "sfsv" => Ok(Method::Sfsv),
            "single-cal" => Ok(Method::SingleCal),
            "multi-cal" => Ok(Method::MultiCal),
            "afs" => Ok(Method::Afs),
            other => Err(format!("unknown valuation method `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyVector {
    pub values: Vec<f64>,
    pub method: Method,
    pub normalized: bool,
}

impl ShapleyVector {
    pub fn raw(values: Vec<f64>, method: Method) -> Self {
        Self {
            values,
            method,
            normalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// A valuation plus the work it took.
#[derive(Clone, Debug, PartialEq)]
pub struct Valuation {
    pub vector: ShapleyVector,
    pub permutations_used: usize,
    pub utility_evaluations: usize,
}

/// Maps a coalition to its utility.  Must be deterministic per coalition.
pub trait UtilityOracle: Sync {
    fn num_players(&self) -> usize;
    fn utility(&self, coalition: Coalition) -> Result<f64>;
}

/// Utilities listed by coalition bitmask.
#[derive(Clone, Debug)]
pub struct TableOracle {
    n: usize,
    values: Vec<f64>,
}

impl TableOracle {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n > MAX_EXACT_PLAYERS || values.len() != 1 << n {
            return Err(ShapleyError::Domain(format!(
                "table for {n} players needs {} entries, got {}",
                1usize << n.min(MAX_EXACT_PLAYERS),
                values.len()
            )));
        }
        Ok(Self { n, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl UtilityOracle for TableOracle {
    fn num_players(&self) -> usize {
        self.n
    }

    fn utility(&self, coalition: Coalition) -> Result<f64> {
        self.values
            .get(coalition.bits() as usize)
            .copied()
            .ok_or_else(|| ShapleyError::Domain(format!("coalition {coalition:?} out of range")))
    }
}

/// Closure-backed oracle.
pub struct FnOracle<F> {
    n: usize,
    f: F,
}

impl<F: Fn(Coalition) -> f64 + Sync> FnOracle<F> {
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F: Fn(Coalition) -> f64 + Sync> UtilityOracle for FnOracle<F> {
    fn num_players(&self) -> usize {
        self.n
    }

    fn utility(&self, coalition: Coalition) -> Result<f64> {
        Ok((self.f)(coalition))
    }
}

/// `U(S)` = test accuracy of the model replayed from the log with only
/// `S`'s deltas.
pub struct ReplayOracle<'a> {
    log: &'a RoundLog,
    test: &'a Dataset,
}

impl<'a> ReplayOracle<'a> {
    pub fn new(log: &'a RoundLog, test: &'a Dataset) -> Self {
        Self { log, test }
    }
}

impl UtilityOracle for ReplayOracle<'_> {
    fn num_players(&self) -> usize {
        self.log.num_clients
    }

    fn utility(&self, coalition: Coalition) -> Result<f64> {
        let model = federation::reconstruct_subset_model(self.log, coalition)?;
        Ok(learner::utility(&model, self.test)?.value())
    }
}

/// `U(S)` = test accuracy after running FedAvg from scratch on `S` alone.
/// `U(∅)` is the accuracy of the initial model.
pub struct RetrainOracle<'a> {
    config: &'a FederationConfig,
    init: &'a ModelParams,
    partitions: &'a [Dataset],
    test: &'a Dataset,
}

impl<'a> RetrainOracle<'a> {
    pub fn new(
        config: &'a FederationConfig,
        init: &'a ModelParams,
        partitions: &'a [Dataset],
        test: &'a Dataset,
    ) -> Self {
        Self {
            config,
            init,
            partitions,
            test,
        }
    }

    /// Final model of the federation restricted to `coalition`.
    pub fn train(&self, coalition: Coalition) -> Result<ModelParams> {
        if coalition.is_empty() {
            return Ok(self.init.clone());
        }
        let parts: Vec<Dataset> = coalition
            .members()
            .map(|i| {
                self.partitions
                    .get(i)
                    .cloned()
                    .ok_or(FederationError::UnknownClient(i))
            })
            .collect::<std::result::Result<_, _>>()?;
        let k = parts.len();
        let sub = FederationConfig {
            num_clients: k,
            clients_per_round: if self.config.clients_per_round >= self.config.num_clients {
                k
            } else {
                self.config.clients_per_round.min(k)
            },
            ..*self.config
        };
        let out = federation::run_training(&sub, self.init, &parts, self.test)?;
        Ok(out.final_model)
    }
}

impl UtilityOracle for RetrainOracle<'_> {
    fn num_players(&self) -> usize {
        self.partitions.len()
    }

    fn utility(&self, coalition: Coalition) -> Result<f64> {
        let model = self.train(coalition)?;
        Ok(learner::utility(&model, self.test)?.value())
    }
}

/// Memoizes another oracle by coalition bitmask and counts underlying calls.
/// Concurrent misses on one key may compute twice; the stored value is the
/// same either way since oracles are deterministic.
pub struct CachedOracle<'a, O: ?Sized> {
    inner: &'a O,
    cache: Mutex<HashMap<u64, f64>>,
    evaluations: AtomicUsize,
}

impl<'a, O: UtilityOracle + ?Sized> CachedOracle<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
            evaluations: AtomicUsize::new(0),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }
}

impl<O: UtilityOracle + ?Sized> UtilityOracle for CachedOracle<'_, O> {
    fn num_players(&self) -> usize {
        self.inner.num_players()
    }

    fn utility(&self, coalition: Coalition) -> Result<f64> {
        if let Some(&v) = self.cache.lock().expect("cache lock").get(&coalition.bits()) {
            return Ok(v);
        }
        let v = self.inner.utility(coalition)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(coalition.bits(), v);
        Ok(v)
    }
}

/// `w[s] = s! (n-s-1)! / n!`, the weight of a marginal against a coalition
/// of size `s`.
fn coalition_weights(n: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(n);
    let mut cur = 1.0 / n as f64;
    for s in 0..n {
        w.push(cur);
        if s + 1 < n {
            cur *= (s + 1) as f64 / (n - 1 - s) as f64;
        }
    }
    w
}

/// Exact Shapley values from a full table of `2^n` utilities.
pub fn shapley_from_table(table: &[f64], n: usize) -> Result<Vec<f64>> {
    if n > MAX_EXACT_PLAYERS {
        return Err(ShapleyError::Capacity {
            method: "exact",
            n,
            max: MAX_EXACT_PLAYERS,
        });
    }
    if table.len() != 1 << n {
        return Err(ShapleyError::LengthMismatch(table.len(), 1 << n));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let w = coalition_weights(n);
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let bit = 1usize << i;
            (0..table.len())
                .filter(|mask| mask & bit == 0)
                .map(|mask| w[mask.count_ones() as usize] * (table[mask | bit] - table[mask]))
                .sum()
        })
        .collect())
}

/// Evaluates the oracle on every coalition (in parallel).
pub fn utility_table<O: UtilityOracle + ?Sized>(oracle: &O, n: usize) -> Result<Vec<f64>> {
    (0..1u64 << n)
        .into_par_iter()
        .map(|bits| oracle.utility(Coalition::from_bits(bits)))
        .collect()
}

fn check_capacity(method: &'static str, n: usize, max: usize) -> Result<()> {
    if n > max {
        return Err(ShapleyError::Capacity { method, n, max });
    }
    Ok(())
}

/// Exact Shapley values by full enumeration of `2^n` coalitions.
pub fn exact_shapley<O: UtilityOracle + ?Sized>(oracle: &O, n: usize) -> Result<Valuation> {
    check_capacity("exact", n, MAX_EXACT_PLAYERS)?;
    let table = utility_table(oracle, n)?;
    Ok(Valuation {
        vector: ShapleyVector::raw(shapley_from_table(&table, n)?, Method::Exact),
        permutations_used: 0,
        utility_evaluations: table.len(),
    })
}

fn retag(mut v: Valuation, method: Method) -> Valuation {
    v.vector.method = method;
    v
}

/// Standard federated Shapley: retrain FedAvg for every coalition.
pub fn sfsv(
    config: &FederationConfig,
    init: &ModelParams,
    partitions: &[Dataset],
    test: &Dataset,
) -> Result<Valuation> {
    let n = partitions.len();
    check_capacity("sfsv", n, MAX_SFSV_PLAYERS)?;
    let oracle = RetrainOracle::new(config, init, partitions, test);
    exact_shapley(&oracle, n).map(|v| retag(v, Method::Sfsv))
}

/// Single-Cal: exact Shapley over replay-reconstructed coalition models.
pub fn single_cal(log: &RoundLog, test: &Dataset) -> Result<Valuation> {
    log.validate()?;
    check_capacity("single-cal", log.num_clients, MAX_EXACT_PLAYERS)?;
    let oracle = ReplayOracle::new(log, test);
    exact_shapley(&oracle, log.num_clients).map(|v| retag(v, Method::SingleCal))
}

/// Multi-Cal: per-round exact Shapley with `U_t(S)` the accuracy of `M^t`
/// plus `S`'s renormalized round-`t` deltas, summed over rounds.  The
/// per-round baseline `U_t(∅) = U(M^t)` makes the totals telescope to
/// `U(M^T) - U(M^0)`.
pub fn multi_cal(log: &RoundLog, test: &Dataset) -> Result<Valuation> {
    log.validate()?;
    let n = log.num_clients;
    check_capacity("multi-cal", n, MAX_EXACT_PLAYERS)?;
    let globals = log.global_models()?;
    let mut phi = vec![0.0; n];
    let mut evaluations = 0;
    for (record, global) in log.rounds.iter().zip(&globals) {
        let round_oracle = FnResultOracle {
            n,
            f: |s: Coalition| -> Result<f64> {
                let model = record.apply_subset(global, s)?;
                let model = model.as_ref().unwrap_or(global);
                Ok(learner::utility(model, test)?.value())
            },
        };
        let table = utility_table(&round_oracle, n)?;
        evaluations += table.len();
        for (p, v) in phi.iter_mut().zip(shapley_from_table(&table, n)?) {
            *p += v;
        }
    }
    Ok(Valuation {
        vector: ShapleyVector::raw(phi, Method::MultiCal),
        permutations_used: 0,
        utility_evaluations: evaluations,
    })
}

struct FnResultOracle<F> {
    n: usize,
    f: F,
}

impl<F: Fn(Coalition) -> Result<f64> + Sync> UtilityOracle for FnResultOracle<F> {
    fn num_players(&self) -> usize {
        self.n
    }

    fn utility(&self, coalition: Coalition) -> Result<f64> {
        (self.f)(coalition)
    }
}

/// Truncated Monte-Carlo settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmcConfig {
    /// Skip evaluating a prefix once the running value is within this
    /// distance of the full-coalition utility.
    pub truncation_threshold: f64,
    /// Stop once the mean relative change of the estimates over one
    /// permutation drops below this.
    pub convergence_tolerance: f64,
    pub max_permutations: usize,
    pub seed: u64,
}

impl TmcConfig {
    pub const DEFAULT_TRUNCATION: f64 = 0.01;
    pub const DEFAULT_TOLERANCE: f64 = 0.01;
    pub const PERMUTATIONS_PER_PLAYER: usize = 500;

    pub fn defaults_for(n: usize, seed: u64) -> Self {
        Self {
            truncation_threshold: Self::DEFAULT_TRUNCATION,
            convergence_tolerance: Self::DEFAULT_TOLERANCE,
            max_permutations: Self::PERMUTATIONS_PER_PLAYER * n.max(1),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.truncation_threshold >= 0.0) {
            return Err(ShapleyError::Domain(
                "truncation threshold must be non-negative".into(),
            ));
        }
        if !(self.convergence_tolerance > 0.0) {
            return Err(ShapleyError::Domain(
                "convergence tolerance must be positive".into(),
            ));
        }
        if self.max_permutations == 0 {
            return Err(ShapleyError::Domain(
                "max_permutations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Truncated Monte-Carlo permutation sampling over any oracle.
///
/// For each sampled permutation the prefix utilities `v_0 = U(∅), v_1, ...`
/// are scanned; a prefix is only evaluated while `|U(N) - v_{k-1}| >= PT`,
/// otherwise `v_k = v_{k-1}`.  Estimates are running means of the
/// marginals `v_k - v_{k-1}`.
pub fn tmc_shapley<O: UtilityOracle + ?Sized>(oracle: &O, cfg: &TmcConfig) -> Result<Valuation> {
    cfg.validate()?;
    let n = oracle.num_players();
    check_capacity("afs", n, MAX_CLIENTS)?;
    let cached = CachedOracle::new(oracle);
    let u_empty = cached.utility(Coalition::EMPTY)?;
    let u_full = cached.utility(Coalition::full(n))?;
    let mut rng = seed::rng(cfg.seed);
    let mut base: Vec<usize> = (0..n).collect();
    let mut order = base.clone();
    let mut phi = vec![0.0; n];
    let mut previous = vec![0.0; n];
    let mut used = 0;
    // A sweep is the n rotations of one random permutation, so every player
    // is scanned first once per sweep.  Players that were only ever
    // truncated would otherwise sit at zero and read as converged.
    'sweeps: while used < cfg.max_permutations && n > 0 {
        base.shuffle(&mut rng);
        previous.copy_from_slice(&phi);
        for r in 0..n {
            if used == cfg.max_permutations {
                break 'sweeps;
            }
            used += 1;
            let m = used as f64;
            order.clear();
            order.extend(base[r..].iter().chain(&base[..r]));
            let mut prefix = Coalition::EMPTY;
            let mut v_prev = u_empty;
            for &i in &order {
                prefix = prefix.with(i);
                let v = if (u_full - v_prev).abs() < cfg.truncation_threshold {
                    v_prev
                } else {
                    cached.utility(prefix)?
                };
                phi[i] = (m - 1.0) / m * phi[i] + (v - v_prev) / m;
                v_prev = v;
            }
        }
        if used > n && mean_relative_change(&phi, &previous) < cfg.convergence_tolerance {
            break;
        }
    }
    Ok(Valuation {
        vector: ShapleyVector::raw(phi, Method::Afs),
        permutations_used: used,
        utility_evaluations: cached.evaluations(),
    })
}

/// `mean_i |new_i - old_i| / max(|new_i|, 1e-9)`.
pub fn mean_relative_change(new: &[f64], old: &[f64]) -> f64 {
    if new.is_empty() {
        return 0.0;
    }
    new.iter()
        .zip(old)
        .map(|(a, b)| (a - b).abs() / a.abs().max(1e-9))
        .sum::<f64>()
        / new.len() as f64
}

/// AFS: truncated Monte-Carlo over replay-reconstructed prefix models.
pub fn afs(log: &RoundLog, test: &Dataset, cfg: &TmcConfig) -> Result<Valuation> {
    log.validate()?;
    let oracle = ReplayOracle::new(log, test);
    tmc_shapley(&oracle, cfg)
}

/// Scales values to sum to one.  Already-normalized input is returned as is.
pub fn normalize(sv: &ShapleyVector) -> Result<ShapleyVector> {
    if sv.normalized {
        return Ok(sv.clone());
    }
    let sum = sv.sum();
    if sum == 0.0 || !sum.is_finite() {
        return Err(ShapleyError::ZeroSum);
    }
    Ok(ShapleyVector {
        values: sv.values.iter().map(|v| v / sum).collect(),
        method: sv.method,
        normalized: true,
    })
}

/// Largest per-client gap between two normalized vectors.
pub fn d_max(a: &ShapleyVector, b: &ShapleyVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ShapleyError::LengthMismatch(a.len(), b.len()));
    }
    for v in [a, b] {
        if !v.normalized || (v.sum() - 1.0).abs() > 1e-9 {
            return Err(ShapleyError::NotNormalized);
        }
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Permutation-count bound for a target error and confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingBound {
    pub epsilon: f64,
    pub alpha: f64,
    pub range: f64,
    pub required_permutations: u64,
}

impl SamplingBound {
    pub fn new(epsilon: f64, alpha: f64, range: f64) -> Result<Self> {
        Ok(Self {
            epsilon,
            alpha,
            range,
            required_permutations: min_permutations(epsilon, alpha, range)?,
        })
    }
}

/// Hoeffding tail `2 exp(-2 k eps^2 / v^2)` for `k` permutations.
pub fn hoeffding_tail(k: u64, epsilon: f64, range: f64) -> f64 {
    2.0 * (-2.0 * k as f64 * epsilon * epsilon / (range * range)).exp()
}

/// Smallest `k >= 1` with `2 exp(-2 k eps^2 / v^2) <= alpha`, i.e.
/// `ceil(v^2 ln(2/alpha) / (2 eps^2))`.
pub fn min_permutations(epsilon: f64, alpha: f64, range: f64) -> Result<u64> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(ShapleyError::Domain(format!("epsilon {epsilon} not in (0, 1]")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ShapleyError::Domain(format!("alpha {alpha} not in (0, 1]")));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(ShapleyError::Domain(format!("range {range} must be positive")));
    }
    let closed_form = range * range * (2.0 / alpha).ln() / (2.0 * epsilon * epsilon);
    let mut k = (closed_form.ceil() as u64).max(1);
    // the closed form can land one off after rounding; settle on the exact
    // boundary of the defining inequality
    while k > 1 && hoeffding_tail(k - 1, epsilon, range) <= alpha {
        k -= 1;
    }
    while hoeffding_tail(k, epsilon, range) > alpha {
        k += 1;
    }
    Ok(k)
}

/// Heuristic marginal-contribution range: spread of the singleton
/// marginals `U({i}) - U(∅)`.
pub fn estimate_marginal_range<O: UtilityOracle + ?Sized>(oracle: &O) -> Result<f64> {
    let base = oracle.utility(Coalition::EMPTY)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..oracle.num_players() {
        let m = oracle.utility(Coalition::singleton(i))? - base;
        lo = lo.min(m);
        hi = hi.max(m);
    }
    Ok(if hi >= lo { hi - lo } else { 0.0 })
}

/// Structured valuation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValuationReport {
    pub method: Method,
    pub phi: Vec<f64>,
    pub phi_normalized: Option<Vec<f64>>,
    pub permutations_used: usize,
    pub utility_evaluations: usize,
    pub wall_time_ms: f64,
}

impl ValuationReport {
    pub fn new(valuation: &Valuation, wall_time_ms: f64) -> Self {
        Self {
            method: valuation.vector.method,
            phi: valuation.vector.values.clone(),
            phi_normalized: normalize(&valuation.vector).ok().map(|v| v.values),
            permutations_used: valuation.permutations_used,
            utility_evaluations: valuation.utility_evaluations,
            wall_time_ms,
        }
    }
}
