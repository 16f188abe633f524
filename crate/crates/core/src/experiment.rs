//! End-to-end driver: scenario, federated training on the ledger, every
//! requested valuation method, settlement and report files.
//!
//! Reports never contain wall-clock times, so reruns are byte-identical;
//! times go to a separate timings file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::{self, FederationConfig, FederationError, RoundLog};
use crate::learner::{self, Architecture, Hyperparams, ModelParams, ModelShape};
use crate::ledger::{Chain, ChainConfig, GasTotals, LedgerError, TxKind};
use crate::market::{self, AccuracyTarget, DealState, Market, MarketConfig, MarketError, SettlementReport};
use crate::scenarios::{self, ScenarioError, ScenarioSpec};
use crate::seed;
use crate::shapley::{
    self, Method, ReplayOracle, SamplingBound, ShapleyError, ShapleyVector, TmcConfig, Valuation,
    MAX_EXACT_PLAYERS, MAX_SFSV_PLAYERS,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl ExperimentError {
    /// Process exit status for the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Capacity(_) => 3,
            ExperimentError::Invariant(_) | ExperimentError::Io { .. } => 4,
        }
    }
}

impl From<ScenarioError> for ExperimentError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Learner(_) => ExperimentError::Invariant(e.to_string()),
            _ => ExperimentError::Config(e.to_string()),
        }
    }
}

impl From<ShapleyError> for ExperimentError {
    fn from(e: ShapleyError) -> Self {
        match e {
            ShapleyError::Capacity { .. } => ExperimentError::Capacity(e.to_string()),
            _ => ExperimentError::Invariant(e.to_string()),
        }
    }
}

impl From<FederationError> for ExperimentError {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::InvalidConfig(_) => ExperimentError::Config(e.to_string()),
            FederationError::Learner(learner::LearnerError::InvalidHyperparams(_)) => {
                ExperimentError::Config(e.to_string())
            }
            _ => ExperimentError::Invariant(e.to_string()),
        }
    }
}

impl From<MarketError> for ExperimentError {
    fn from(e: MarketError) -> Self {
        match e {
            MarketError::InvalidTarget(_) => ExperimentError::Config(e.to_string()),
            MarketError::Ledger(LedgerError::Difficulty(_)) => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Invariant(e.to_string()),
        }
    }
}

impl From<LedgerError> for ExperimentError {
    fn from(e: LedgerError) -> Self {
        match e {
            LedgerError::Difficulty(_) => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Invariant(e.to_string()),
        }
    }
}

impl From<learner::LearnerError> for ExperimentError {
    fn from(e: learner::LearnerError) -> Self {
        ExperimentError::Invariant(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_arch")]
    pub architecture: Architecture,
    /// Initial weights are uniform in `[-init_scale, init_scale]`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_arch() -> Architecture {
    Architecture::LinearSoftmax
}

fn default_init_scale() -> f64 {
    0.01
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: default_arch(),
            init_scale: default_init_scale(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    /// Defaults to every client.
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AfsConfig {
    #[serde(default = "default_truncation")]
    pub truncation_threshold: f64,
    #[serde(default = "default_tolerance")]
    pub convergence_tolerance: f64,
    /// Defaults to 500 per client.
    #[serde(default)]
    pub max_permutations: Option<usize>,
}

fn default_truncation() -> f64 {
    TmcConfig::DEFAULT_TRUNCATION
}

fn default_tolerance() -> f64 {
    TmcConfig::DEFAULT_TOLERANCE
}

impl Default for AfsConfig {
    fn default() -> Self {
        Self {
            truncation_threshold: default_truncation(),
            convergence_tolerance: default_tolerance(),
            max_permutations: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSettings {
    /// Buyer deposit in micro-tokens.
    #[serde(default = "default_deposit")]
    pub deposit: u64,
    #[serde(default = "default_buyer_tokens")]
    pub buyer_tokens: u64,
    #[serde(default)]
    pub accuracy_target: f64,
    #[serde(default = "default_difficulty")]
    pub difficulty: u32,
    #[serde(default = "default_miners")]
    pub miners: usize,
    /// Seal this round's transactions through a two-way fork.
    #[serde(default)]
    pub fork_round: Option<usize>,
}

fn default_deposit() -> u64 {
    1_000_000
}

fn default_buyer_tokens() -> u64 {
    10_000_000
}

fn default_difficulty() -> u32 {
    crate::ledger::DEFAULT_DIFFICULTY
}

fn default_miners() -> usize {
    5
}

impl Default for MarketSettings {
    fn default() -> Self {
        Self {
            deposit: default_deposit(),
            buyer_tokens: default_buyer_tokens(),
            accuracy_target: 0.0,
            difficulty: default_difficulty(),
            miners: default_miners(),
            fork_round: None,
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Sfsv, Method::SingleCal, Method::MultiCal, Method::Afs]
}

fn default_reference() -> Method {
    Method::Sfsv
}

fn default_settlement() -> Method {
    Method::Afs
}

/// Experiment description, read from TOML.
///
/// All randomness derives from `seed`; the seeds inside `[scenario]` are
/// replaced by derived values when the experiment runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Exact method the others are compared against.
    #[serde(default = "default_reference")]
    pub reference: Method,
    /// Method whose values settle the deal.
    #[serde(default = "default_settlement")]
    pub settlement_method: Method,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub afs: AfsConfig,
    #[serde(default)]
    pub market: MarketSettings,
}

/// `exact` names the retraining method here.
fn canonical(m: Method) -> Method {
    if m == Method::Exact {
        Method::Sfsv
    } else {
        m
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.normalize_methods();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!(
            "cannot read {}: {e}",
            path.display()
        )))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative data paths are relative to the config file
        if let scenarios::DataSource::Csv { path: p, .. } = &mut cfg.scenario.data {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    fn normalize_methods(&mut self) {
        let mut seen = Vec::new();
        for m in self.methods.iter().copied().map(canonical) {
            if !seen.contains(&m) {
                seen.push(m);
            }
        }
        self.methods = seen;
        self.reference = canonical(self.reference);
        self.settlement_method = canonical(self.settlement_method);
    }

    pub fn with_methods(mut self, methods: Vec<Method>) -> Self {
        self.methods = methods;
        self.normalize_methods();
        self
    }

    pub fn num_clients(&self) -> usize {
        self.scenario.num_clients
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(ExperimentError::Config("no valuation methods requested".into()));
        }
        if self.reference != Method::Sfsv && self.reference != Method::SingleCal {
            return Err(ExperimentError::Config(format!(
                "reference must be an exact method, got {}",
                self.reference
            )));
        }
        self.scenario.validate()?;
        AccuracyTarget::new(self.market.accuracy_target)?;
        if self.market.miners == 0 {
            return Err(ExperimentError::Config("at least one miner is required".into()));
        }
        if let Some(r) = self.market.fork_round {
            if r >= self.training.rounds {
                return Err(ExperimentError::Config(format!(
                    "fork_round {r} beyond {} rounds",
                    self.training.rounds
                )));
            }
        }
        if !(self.model.init_scale >= 0.0) {
            return Err(ExperimentError::Config("init_scale must be non-negative".into()));
        }
        self.federation().validate()?;
        self.tmc().validate()?;
        let n = self.num_clients();
        for m in self.methods.iter().chain([&self.settlement_method]) {
            let cap = match m {
                Method::Sfsv | Method::Exact => MAX_SFSV_PLAYERS,
                Method::SingleCal | Method::MultiCal => MAX_EXACT_PLAYERS,
                Method::Afs => federation::MAX_CLIENTS,
            };
            if n > cap {
                return Err(ExperimentError::Capacity(format!(
                    "{m} supports at most {cap} clients, config has {n}"
                )));
            }
        }
        Ok(())
    }

    /// Seeds derived from the master seed.
    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            master: s,
            data: seed::mix(s, 1),
            partition: seed::mix(s, 2),
            init: seed::mix(s, 3),
            training: seed::mix(s, 4),
            selection: seed::mix(s, 5),
            afs: seed::mix(s, 6),
            fork: seed::mix(s, 7),
        }
    }

    /// Scenario with derived seeds filled in.
    pub fn seeded_scenario(&self) -> ScenarioSpec {
        let seeds = self.seeds();
        let mut spec = self.scenario.clone();
        spec.seed = seeds.partition;
        if let scenarios::DataSource::Synthetic { seed, .. } = &mut spec.data {
            *seed = seeds.data;
        }
        spec
    }

    pub fn federation(&self) -> FederationConfig {
        let n = self.num_clients();
        let seeds = self.seeds();
        FederationConfig {
            num_clients: n,
            clients_per_round: self.training.clients_per_round.unwrap_or(n),
            rounds: self.training.rounds,
            hyper: Hyperparams {
                learning_rate: self.training.learning_rate,
                batch_size: self.training.batch_size,
                local_epochs: self.training.local_epochs,
                seed: seeds.training,
            },
            client_selection_seed: seeds.selection,
        }
    }

    pub fn tmc(&self) -> TmcConfig {
        let n = self.num_clients();
        TmcConfig {
            truncation_threshold: self.afs.truncation_threshold,
            convergence_tolerance: self.afs.convergence_tolerance,
            max_permutations: self
                .afs
                .max_permutations
                .unwrap_or(TmcConfig::PERMUTATIONS_PER_PLAYER * n),
            seed: self.seeds().afs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub data: u64,
    pub partition: u64,
    pub init: u64,
    pub training: u64,
    pub selection: u64,
    pub afs: u64,
    pub fork: u64,
}

/// One valuation method's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub phi: Vec<f64>,
    pub phi_normalized: Option<Vec<f64>>,
    pub utility_evaluations: usize,
    pub permutations_used: usize,
    /// Against the reference method; `None` without a reference or when a
    /// vector cannot be normalized.
    pub d_max: Option<f64>,
    /// Kept out of serialized reports so that reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GasLine {
    pub kind: TxKind,
    pub count: usize,
    pub gas: u64,
    pub ether: f64,
    pub usd: f64,
}

/// Per-kind and total gas over a chain's main path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GasReport {
    pub lines: Vec<GasLine>,
    pub gas: u64,
    pub ether: f64,
    pub usd: f64,
}

pub fn gas_report(chain: &Chain) -> Result<GasReport> {
    let totals = GasTotals::of_txs(chain.main_path_txs(), chain.schedule())?;
    Ok(GasReport {
        lines: totals
            .per_kind
            .iter()
            .map(|(k, t)| GasLine {
                kind: *k,
                count: t.count,
                gas: t.gas,
                ether: t.ether,
                usd: t.usd,
            })
            .collect(),
        gas: totals.gas,
        ether: totals.ether,
        usd: totals.usd,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub scenario: scenarios::ScenarioKind,
    pub seeds: Seeds,
    pub num_clients: usize,
    pub client_sizes: Vec<usize>,
    pub reference: Option<Method>,
    pub methods: Vec<MethodResult>,
    /// Test utility of `M^0 .. M^T`.
    pub utility_curve: Vec<f64>,
    pub final_accuracy: f64,
    pub verified: bool,
    pub deal_state: DealState,
    pub settlement: Option<SettlementReport>,
    pub gas: GasReport,
    pub afs_bound: Option<SamplingBound>,
    pub chain_height: u64,
}

impl ExperimentReport {
    pub fn method(&self, m: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }

    /// Line-delimited records: a summary line, then one line per method,
    /// round, payout and gas kind.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        #[serde(tag = "record", rename_all = "kebab-case")]
        enum Line<'a> {
            Summary {
                name: &'a str,
                scenario: scenarios::ScenarioKind,
                seeds: &'a Seeds,
                num_clients: usize,
                client_sizes: &'a [usize],
                reference: Option<Method>,
                final_accuracy: f64,
                verified: bool,
                deal_state: DealState,
                gas_total: u64,
                ether_total: f64,
                usd_total: f64,
                chain_height: u64,
                afs_bound: Option<&'a SamplingBound>,
            },
            Method(&'a MethodResult),
            Round { round: usize, utility: f64 },
            Payout { seller: &'a str, amount: u64 },
            Refund { amount: u64, flagged: bool },
            Gas(&'a GasLine),
        }
        let mut lines = vec![Line::Summary {
            name: &self.name,
            scenario: self.scenario,
            seeds: &self.seeds,
            num_clients: self.num_clients,
            client_sizes: &self.client_sizes,
            reference: self.reference,
            final_accuracy: self.final_accuracy,
            verified: self.verified,
            deal_state: self.deal_state,
            gas_total: self.gas.gas,
            ether_total: self.gas.ether,
            usd_total: self.gas.usd,
            chain_height: self.chain_height,
            afs_bound: self.afs_bound.as_ref(),
        }];
        lines.extend(self.methods.iter().map(Line::Method));
        lines.extend(
            self.utility_curve
                .iter()
                .enumerate()
                .map(|(round, &utility)| Line::Round { round, utility }),
        );
        if let Some(s) = &self.settlement {
            lines.extend(s.payouts.iter().map(|(seller, amount)| Line::Payout {
                seller,
                amount: *amount,
            }));
            lines.push(Line::Refund {
                amount: s.refund,
                flagged: s.flagged,
            });
        }
        lines.extend(self.gas.lines.iter().map(Line::Gas));
        let mut out = String::new();
        for l in lines {
            out.push_str(&serde_json::to_string(&l).expect("report line serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub method: Method,
    pub wall_time_ms: f64,
    pub d_max: f64,
}

/// Methods sorted by `d_max` against the reference, then by time.
pub fn compare_methods(report: &ExperimentReport) -> Result<Vec<RankingRow>> {
    let reference = report
        .reference
        .filter(|r| report.method(*r).is_some())
        .ok_or_else(|| ExperimentError::Config("report has no exact reference method".into()))?;
    let mut rows: Vec<RankingRow> = report
        .methods
        .iter()
        .map(|m| RankingRow {
            method: m.method,
            wall_time_ms: m.wall_time_ms,
            d_max: if m.method == reference {
                0.0
            } else {
                m.d_max.unwrap_or(f64::INFINITY)
            },
        })
        .collect();
    rows.sort_by(|a, b| {
        a.d_max
            .total_cmp(&b.d_max)
            .then(a.wall_time_ms.total_cmp(&b.wall_time_ms))
    });
    Ok(rows)
}

/// Everything a run produces.
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub market: Market,
    pub round_log: RoundLog,
    pub deal: market::DealId,
}

impl ExperimentOutcome {
    pub fn timings_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.report.methods {
            out.push_str(
                &serde_json::json!({"method": m.method, "wall_time_ms": m.wall_time_ms}).to_string(),
            );
            out.push('\n');
        }
        out
    }

    /// Writes `report.jsonl`, `summary.json`, `timings.jsonl`,
    /// `chain.jsonl`, `round_log.jsonl`, `settlement.json` and `blobs/`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let io = |p: &Path, e: &dyn std::fmt::Display| ExperimentError::Io {
            path: p.to_path_buf(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| io(&p, &e))
        };
        write("report.jsonl", self.report.to_jsonl())?;
        write(
            "summary.json",
            serde_json::to_string_pretty(&self.report).expect("report serializes") + "\n",
        )?;
        write("timings.jsonl", self.timings_jsonl())?;
        write("chain.jsonl", self.market.chain().to_jsonl())?;
        write("round_log.jsonl", self.round_log.to_jsonl())?;
        write(
            "settlement.json",
            serde_json::to_string_pretty(&self.report.settlement).expect("settlement serializes") + "\n",
        )?;
        let blobs = dir.join("blobs");
        self.market
            .chain()
            .blobs()
            .persist(&blobs)
            .map_err(|e| io(&blobs, &e))?;
        Ok(())
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64() * 1e3)
}

fn seller_name(i: usize) -> String {
    format!("seller-{}", i + 1)
}

/// Runs the whole workflow in memory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let seeds = config.seeds();
    let n = config.num_clients();
    let spec = config.seeded_scenario();
    let data = scenarios::build(&spec)?;
    let fed = config.federation();
    let (d, k) = (data.test.n_features(), data.test.n_classes());
    let shape = match config.model.architecture {
        Architecture::LinearSoftmax => ModelShape::linear(d, k),
        Architecture::Mlp { hidden } => ModelShape::mlp(d, hidden, k),
    };
    let init = ModelParams::random(shape, seeds.init, config.model.init_scale)?;

    // steps 1-3: publish and register
    let mut market = Market::new(MarketConfig {
        chain: ChainConfig {
            difficulty: config.market.difficulty,
            ..ChainConfig::default()
        },
        miners: (1..=config.market.miners).map(|i| format!("miner-{i}")).collect(),
        auto_seal: true,
    })?;
    market.open_account("buyer", config.market.buyer_tokens)?;
    for i in 0..n {
        market.open_account(&seller_name(i), 0)?;
    }
    let model_digest = market.store_model(&init);
    let test_digest = market.store_dataset(&data.test);
    let deal = market.publish_model(
        "buyer",
        model_digest,
        test_digest,
        AccuracyTarget::new(config.market.accuracy_target)?,
        config.market.deposit,
    )?;
    for i in 0..n {
        market.register_seller(deal, &seller_name(i))?;
    }

    // steps 4-7: train, then record every round on the ledger
    let training = federation::run_training(&fed, &init, &data.partitions, &data.test)?;
    for record in &training.log.rounds {
        let updates: Vec<(String, _)> = record
            .deltas
            .iter()
            .map(|dl| {
                let bytes: Vec<u8> = dl.delta.iter().flat_map(|x| x.to_le_bytes()).collect();
                (seller_name(dl.client_id), market.store_blob(&bytes))
            })
            .collect();
        let fork_here = config.market.fork_round == Some(record.round);
        market.set_auto_seal(!fork_here);
        market.record_round(deal, record.round, &updates)?;
        if fork_here {
            market.seal_with_fork(seeds.fork)?;
            market.set_auto_seal(true);
        }
    }

    // step 8: miners cross-verify the final model
    let final_digest = market.store_model(&training.final_model);
    let verified = market.verify_and_close(deal, final_digest)? == DealState::Verified;

    // contribution evaluation
    let reference = config
        .methods
        .contains(&config.reference)
        .then_some(config.reference);
    let mut results: Vec<(Valuation, f64)> = Vec::new();
    let mut valuations: BTreeMap<Method, ShapleyVector> = BTreeMap::new();
    let mut methods = config.methods.clone();
    if !methods.contains(&config.settlement_method) && verified {
        methods.push(config.settlement_method);
    }
    for &m in &methods {
        let (v, ms) = timed(|| -> Result<Valuation> {
            Ok(match m {
                Method::Sfsv | Method::Exact => {
                    shapley::sfsv(&fed, &init, &data.partitions, &data.test)?
                }
                Method::SingleCal => shapley::single_cal(&training.log, &data.test)?,
                Method::MultiCal => shapley::multi_cal(&training.log, &data.test)?,
                Method::Afs => shapley::afs(&training.log, &data.test, &config.tmc())?,
            })
        });
        let v = v?;
        valuations.insert(m, v.vector.clone());
        results.push((v, ms));
    }
    let normalized = |m: Method| valuations.get(&m).and_then(|v| shapley::normalize(v).ok());
    let ref_norm = reference.and_then(normalized);
    let method_results: Vec<MethodResult> = results
        .iter()
        .filter(|(v, _)| config.methods.contains(&v.vector.method))
        .map(|(v, ms)| {
            let norm = shapley::normalize(&v.vector).ok();
            MethodResult {
                method: v.vector.method,
                phi: v.vector.values.clone(),
                d_max: match (&norm, &ref_norm) {
                    (Some(a), Some(b)) => shapley::d_max(a, b).ok(),
                    _ => None,
                },
                phi_normalized: norm.map(|x| x.values),
                utility_evaluations: v.utility_evaluations,
                permutations_used: v.permutations_used,
                wall_time_ms: *ms,
            }
        })
        .collect();

    // steps 8-10: settle, or abort when the target was missed or no
    // contribution vector can be normalized
    let settle_with = normalized(config.settlement_method);
    let settlement = match (verified, settle_with) {
        (true, Some(sv)) => match market.settle(deal, &sv) {
            Ok(_) => Some(SettlementReport::from_receipt(&market.receipt(deal)?)),
            Err(MarketError::SettlementPolicy(_)) => {
                market.abort(deal)?;
                None
            }
            Err(e) => return Err(e.into()),
        },
        _ => {
            market.abort(deal)?;
            None
        }
    };
    if let Some(s) = &settlement {
        let paid: u64 = s.payouts.iter().map(|(_, a)| a).sum();
        if paid + s.refund != config.market.deposit {
            return Err(ExperimentError::Invariant(format!(
                "payouts {paid} + refund {} != deposit {}",
                s.refund, config.market.deposit
            )));
        }
    }
    if let Err(v) = market.chain().validate_chain() {
        return Err(ExperimentError::Invariant(format!("chain invalid: {v:?}")));
    }
    if market.tokens().total() != market.tokens().minted() {
        return Err(ExperimentError::Invariant("token supply changed".into()));
    }

    let afs_bound = {
        let oracle = ReplayOracle::new(&training.log, &data.test);
        let range = shapley::estimate_marginal_range(&oracle)?;
        (range > 0.0)
            .then(|| SamplingBound::new(0.1, 0.05, range).ok())
            .flatten()
    };
    let report = ExperimentReport {
        name: config.name.clone(),
        scenario: config.scenario.scenario,
        seeds,
        num_clients: n,
        client_sizes: data.partitions.iter().map(|p| p.len()).collect(),
        reference,
        methods: method_results,
        final_accuracy: *training.utility_curve.last().expect("curve has M^0"),
        utility_curve: training.utility_curve,
        verified,
        deal_state: market.deal(deal)?.state,
        settlement,
        gas: gas_report(market.chain())?,
        afs_bound,
        chain_height: market.chain().height(),
    };
    Ok(ExperimentOutcome {
        report,
        market,
        round_log: training.log,
        deal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ExperimentConfig {
        ExperimentConfig::from_toml(
            r#"
            name = "tiny"
            seed = 3
            [scenario]
            scenario = "S1"
            num_clients = 3
            [scenario.data]
            source = "synthetic"
            n_samples = 150
            n_features = 3
            n_classes = 3
            seed = 0
            [training]
            rounds = 3
            learning_rate = 0.3
            batch_size = 8
            local_epochs = 1
            [market]
            difficulty = 4
            fork_round = 1
            "#,
        )
        .unwrap()
    }

    #[test]
    fn small_run_is_consistent() {
        let cfg = small_config();
        let out = run_experiment(&cfg).unwrap();
        let r = &out.report;
        assert_eq!(r.methods.len(), 4);
        for m in &r.methods {
            let s: f64 = m.phi_normalized.as_ref().unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(m.wall_time_ms >= 0.0);
        }
        assert_eq!(r.method(Method::Sfsv).unwrap().d_max, Some(0.0));
        let s = r.settlement.as_ref().unwrap();
        let paid: u64 = s.payouts.iter().map(|x| x.1).sum();
        assert_eq!(paid + s.refund, 1_000_000);
        assert_eq!(out.market.chain().orphans().len(), 1);
        // utility curve matches a replay of the exported log
        let log = RoundLog::from_jsonl(&out.round_log.to_jsonl()).unwrap();
        let test = out
            .market
            .fetch_dataset(&out.market.deal(out.deal).unwrap().test_digest)
            .unwrap();
        let curve: Vec<f64> = log
            .global_models()
            .unwrap()
            .iter()
            .map(|m| learner::utility(m, &test).unwrap().value())
            .collect();
        assert_eq!(curve, r.utility_curve);
    }

    #[test]
    fn ranking() {
        let out = run_experiment(&small_config()).unwrap();
        let rows = compare_methods(&out.report).unwrap();
        assert_eq!(rows.len(), 4);
        let sfsv = rows.iter().find(|r| r.method == Method::Sfsv).unwrap();
        assert_eq!(sfsv.d_max, 0.0);
        for w in rows.windows(2) {
            assert!(w[0].d_max <= w[1].d_max);
        }
        let mut no_ref = out.report.clone();
        no_ref.methods.retain(|m| m.method != Method::Sfsv);
        assert!(compare_methods(&no_ref).is_err());

        let mut tie = out.report.clone();
        tie.methods = vec![tie.methods[0].clone(), tie.methods[0].clone()];
        tie.methods[1].method = Method::Afs;
        tie.methods[0].wall_time_ms = 5.0;
        tie.methods[1].wall_time_ms = 1.0;
        tie.methods[1].d_max = Some(0.0);
        let rows = compare_methods(&tie).unwrap();
        assert_eq!(rows[0].method, Method::Afs);
    }

    #[test]
    fn config_errors() {
        let mut cfg = small_config();
        cfg.scenario.num_clients = 12;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 3);
        let afs_only = cfg.clone().with_methods(vec![Method::Afs]);
        assert!(afs_only.validate().is_ok());
        assert_eq!(
            ExperimentConfig::from_toml("name = 1").unwrap_err().exit_code(),
            2
        );
        let mut cfg = small_config();
        cfg.market.accuracy_target = 1.01;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let exact = small_config().with_methods(vec![Method::Exact, Method::Sfsv]);
        assert_eq!(exact.methods, vec![Method::Sfsv]);
    }

    #[test]
    fn gas_report_of_empty_chain() {
        let m = Market::new(MarketConfig::default()).unwrap();
        let g = gas_report(m.chain()).unwrap();
        assert_eq!(g.gas, 0);
        assert!(g.lines.is_empty());
    }

    fn chain_with(per_block: usize, txs: &[(TxKind, usize)]) -> Chain {
        use crate::ledger::{BlobStore, GasSchedule, Transaction};
        let mut c = Chain::new(
            ChainConfig {
                difficulty: 2,
                max_txs_per_block: per_block,
            },
            GasSchedule::standard(),
            std::sync::Arc::new(BlobStore::new()),
        )
        .unwrap();
        c.register_account("a");
        for (i, &(kind, slot)) in txs.iter().enumerate() {
            let d = c.blobs().store(&[i as u8]);
            c.submit_tx(Transaction::new(kind, "a", d, i as u64).with_gas_slot(slot))
                .unwrap();
        }
        while !c.pool().is_empty() {
            c.mine_block("m").unwrap();
        }
        c
    }

    #[test]
    fn gas_report_of_one_registry() {
        let g = gas_report(&chain_with(8, &[(TxKind::ContractRegistry, 0)])).unwrap();
        assert_eq!(g.gas, 1_459_430);
        assert!((g.usd - 0.0723).abs() < 1e-12);
        assert_eq!(g.lines.len(), 1);
        assert_eq!(g.lines[0].count, 1);
    }

    #[test]
    fn gas_report_ignores_packing() {
        let txs: Vec<(TxKind, usize)> = TxKind::ALL
            .iter()
            .flat_map(|&k| (0..3).map(move |s| (k, s)))
            .collect();
        let loose = gas_report(&chain_with(1, &txs)).unwrap();
        let tight = gas_report(&chain_with(64, &txs)).unwrap();
        assert_eq!(loose, tight);
        assert!(loose.gas > 0);
    }
}
