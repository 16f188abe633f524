//! Federated averaging with a complete per-round delta log.
//!
//! The log is the raw material for every replay-based valuation method:
//! [`reconstruct_subset_model`] rebuilds the model a coalition of clients
//! would have produced by re-applying only that coalition's logged deltas,
//! renormalized by the coalition's dataset sizes.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{self, Dataset, Hyperparams, LearnerError, ModelParams, ModelShape};
use crate::ledger::Digest;
use crate::seed;

/// Zero-based client index.
pub type ClientId = usize;

/// Largest federation a [`Coalition`] bitmask can describe.
pub const MAX_CLIENTS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FederationError {
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("aggregation needs at least one delta")]
    EmptyDeltas,
    #[error("unknown client id {0}")]
    UnknownClient(ClientId),
    #[error("incomplete round log: {0}")]
    IncompleteLog(String),
    #[error("round log format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, FederationError>;

/// A set of clients stored as a bitmask.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Coalition(u64);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn from_bits(bits: u64) -> Self {
        Coalition(bits)
    }

    pub fn full(n: usize) -> Self {
        assert!(n <= MAX_CLIENTS);
        if n == MAX_CLIENTS {
            Coalition(u64::MAX)
        } else {
            Coalition((1u64 << n) - 1)
        }
    }

    pub fn singleton(i: ClientId) -> Self {
        Coalition::EMPTY.with(i)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, i: ClientId) -> bool {
        i < MAX_CLIENTS && self.0 & (1 << i) != 0
    }

    pub fn with(self, i: ClientId) -> Self {
        assert!(i < MAX_CLIENTS, "client id {i} exceeds coalition capacity");
        Coalition(self.0 | (1 << i))
    }

    pub fn without(self, i: ClientId) -> Self {
        Coalition(self.0 & !(1u64 << i))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn members(self) -> impl Iterator<Item = ClientId> {
        (0..MAX_CLIENTS).filter(move |&i| self.contains(i))
    }

    /// Highest member id plus one (0 for the empty set).
    pub fn span(self) -> usize {
        MAX_CLIENTS - self.0.leading_zeros() as usize
    }
}

impl FromIterator<ClientId> for Coalition {
    fn from_iter<I: IntoIterator<Item = ClientId>>(iter: I) -> Self {
        iter.into_iter().fold(Coalition::EMPTY, Coalition::with)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub hyper: Hyperparams,
    pub client_selection_seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.num_clients > MAX_CLIENTS {
            return Err(FederationError::InvalidConfig(format!(
                "num_clients must be in 1..={MAX_CLIENTS}, got {}",
                self.num_clients
            )));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(FederationError::InvalidConfig(format!(
                "clients_per_round must be in 1..={}, got {}",
                self.num_clients, self.clients_per_round
            )));
        }
        if self.rounds == 0 {
            return Err(FederationError::InvalidConfig("rounds must be >= 1".into()));
        }
        self.hyper.validate()?;
        Ok(())
    }

    /// Hyperparameters used by every client in round `t`.  The shuffle seed
    /// depends on the round only, so clients holding identical data produce
    /// identical updates.
    pub fn round_hyper(&self, t: usize) -> Hyperparams {
        self.hyper.with_seed(seed::mix(self.hyper.seed, t as u64))
    }
}

/// Deterministic `m`-subset of clients for round `t`, sorted ascending.
pub fn select_clients(config: &FederationConfig, t: usize) -> Vec<ClientId> {
    let n = config.num_clients;
    let m = config.clients_per_round.min(n);
    if m == n {
        return (0..n).collect();
    }
    let mut rng = seed::rng(seed::mix(config.client_selection_seed, t as u64));
    let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    picked
}

/// One client's update in one round: `M_i^t - M^t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDelta {
    pub client_id: ClientId,
    pub round: usize,
    pub delta: Vec<f64>,
    pub dataset_size: usize,
}

/// `global + sum_i w_i * delta_i` with `w_i = |D_i| / sum_j |D_j|`.
///
/// Deltas are summed in client-id order regardless of input order, so the
/// result is independent of arrival order.
pub fn aggregate(global: &ModelParams, deltas: &[RoundDelta]) -> Result<ModelParams> {
    if deltas.is_empty() {
        return Err(FederationError::EmptyDeltas);
    }
    let mut ordered: Vec<&RoundDelta> = deltas.iter().collect();
    ordered.sort_by_key(|d| d.client_id);
    aggregate_sorted(global, &ordered)
}

fn aggregate_sorted(global: &ModelParams, ordered: &[&RoundDelta]) -> Result<ModelParams> {
    let total: usize = ordered.iter().map(|d| d.dataset_size).sum();
    if total == 0 {
        return Err(FederationError::IncompleteLog(
            "delta with zero dataset size".into(),
        ));
    }
    let mut sum = vec![0.0; global.len()];
    for d in ordered {
        if d.delta.len() != global.len() {
            return Err(LearnerError::Dimension {
                what: "round delta",
                expected: global.len(),
                found: d.delta.len(),
            }
            .into());
        }
        let w = d.dataset_size as f64 / total as f64;
        for (s, v) in sum.iter_mut().zip(&d.delta) {
            *s += w * v;
        }
    }
    Ok(global.offset(&sum)?)
}

/// Deltas recorded for one round, sorted by client id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Hex SHA-256 of the round's starting global model weights.
    pub global_hash: String,
    pub deltas: Vec<RoundDelta>,
}

impl RoundRecord {
    /// Applies the deltas of coalition members only, renormalized over
    /// their dataset sizes; returns `None` when no member participated.
    pub fn apply_subset(
        &self,
        model: &ModelParams,
        coalition: Coalition,
    ) -> Result<Option<ModelParams>> {
        let members: Vec<&RoundDelta> = self
            .deltas
            .iter()
            .filter(|d| coalition.contains(d.client_id))
            .collect();
        if members.is_empty() {
            return Ok(None);
        }
        aggregate_sorted(model, &members).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub initial: ModelParams,
    pub rounds: Vec<RoundRecord>,
    pub final_model: ModelParams,
}

/// Result of [`run_training`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingOutcome {
    pub final_model: ModelParams,
    pub log: RoundLog,
    /// Test utility of `M^0, M^1, ..., M^T`.
    pub utility_curve: Vec<f64>,
}

fn model_hash(m: &ModelParams) -> String {
    Digest::of(&m.weights_le_bytes()).to_hex()
}

/// Runs `T` FedAvg rounds from `init` and logs every client delta.
pub fn run_training(
    config: &FederationConfig,
    init: &ModelParams,
    partitions: &[Dataset],
    test: &Dataset,
) -> Result<TrainingOutcome> {
    config.validate()?;
    if partitions.len() != config.num_clients {
        return Err(FederationError::InvalidConfig(format!(
            "{} partitions for {} clients",
            partitions.len(),
            config.num_clients
        )));
    }
    if let Some(i) = partitions.iter().position(Dataset::is_empty) {
        return Err(FederationError::InvalidConfig(format!(
            "client {i} has an empty dataset"
        )));
    }
    let mut global = init.clone();
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut curve = vec![learner::utility(&global, test)?.value()];
    for t in 0..config.rounds {
        let selected = select_clients(config, t);
        let hyper = config.round_hyper(t);
        let deltas = selected
            .par_iter()
            .map(|&i| {
                let local = learner::local_train(&global, &partitions[i], &hyper)?;
                Ok(RoundDelta {
                    client_id: i,
                    round: t,
                    delta: local.difference(&global)?,
                    dataset_size: partitions[i].len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let next = aggregate(&global, &deltas)?;
        rounds.push(RoundRecord {
            round: t,
            global_hash: model_hash(&global),
            deltas,
        });
        global = next;
        curve.push(learner::utility(&global, test)?.value());
    }
    let log = RoundLog {
        num_clients: config.num_clients,
        clients_per_round: config.clients_per_round,
        initial: init.clone(),
        rounds,
        final_model: global.clone(),
    };
    Ok(TrainingOutcome {
        final_model: global,
        log,
        utility_curve: curve,
    })
}

/// Replays the log with only the coalition's deltas, starting from `M^0`.
/// Rounds in which no member participated leave the model unchanged.
pub fn reconstruct_subset_model(log: &RoundLog, coalition: Coalition) -> Result<ModelParams> {
    if coalition.span() > log.num_clients {
        return Err(FederationError::UnknownClient(coalition.span() - 1));
    }
    let mut model = log.initial.clone();
    for record in &log.rounds {
        if let Some(next) = record.apply_subset(&model, coalition)? {
            model = next;
        }
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Header {
        num_clients: usize,
        clients_per_round: usize,
        rounds: usize,
        shape: ModelShape,
        initial: String,
    },
    Delta {
        round: usize,
        client_id: ClientId,
        dataset_size: usize,
        delta: String,
    },
}

pub(crate) fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub(crate) fn decode_f64s(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!("{} bytes is not a whole number of f64s", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl RoundLog {
    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Checks contiguity, participation counts and delta shapes.
    pub fn validate(&self) -> Result<()> {
        if self.rounds.is_empty() {
            return Err(FederationError::IncompleteLog("no rounds".into()));
        }
        for (t, r) in self.rounds.iter().enumerate() {
            if r.round != t {
                return Err(FederationError::IncompleteLog(format!(
                    "expected round {t}, found {}",
                    r.round
                )));
            }
            if r.deltas.len() != self.clients_per_round {
                return Err(FederationError::IncompleteLog(format!(
                    "round {t} has {} deltas, expected {}",
                    r.deltas.len(),
                    self.clients_per_round
                )));
            }
            let mut prev = None;
            for d in &r.deltas {
                if d.client_id >= self.num_clients {
                    return Err(FederationError::UnknownClient(d.client_id));
                }
                if prev.is_some_and(|p| p >= d.client_id) {
                    return Err(FederationError::IncompleteLog(format!(
                        "round {t}: deltas not strictly ordered by client"
                    )));
                }
                prev = Some(d.client_id);
                if d.round != t || d.dataset_size == 0 || d.delta.len() != self.initial.len() {
                    return Err(FederationError::IncompleteLog(format!(
                        "round {t}: malformed delta for client {}",
                        d.client_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Global models `M^0 .. M^T` replayed from the log.
    pub fn global_models(&self) -> Result<Vec<ModelParams>> {
        let mut models = Vec::with_capacity(self.rounds.len() + 1);
        let mut m = self.initial.clone();
        models.push(m.clone());
        for r in &self.rounds {
            m = aggregate(&m, &r.deltas)?;
            models.push(m.clone());
        }
        Ok(models)
    }

    /// Line-delimited JSON: a header followed by one record per
    /// (round, client).  Deltas are base64 of little-endian f64s.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = LogLine::Header {
            num_clients: self.num_clients,
            clients_per_round: self.clients_per_round,
            rounds: self.rounds.len(),
            shape: *self.initial.shape(),
            initial: encode_f64s(self.initial.weights()),
        };
        out.push_str(&serde_json::to_string(&header).expect("serializable"));
        out.push('\n');
        for r in &self.rounds {
            for d in &r.deltas {
                let line = LogLine::Delta {
                    round: d.round,
                    client_id: d.client_id,
                    dataset_size: d.dataset_size,
                    delta: encode_f64s(&d.delta),
                };
                out.push_str(&serde_json::to_string(&line).expect("serializable"));
                out.push('\n');
            }
        }
        out
    }

    /// Parses [`RoundLog::to_jsonl`] output and replays it to recover the
    /// per-round global hashes and the final model.
    pub fn from_jsonl(text: &str) -> Result<RoundLog> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines
            .next()
            .ok_or_else(|| FederationError::Format("empty log".into()))?;
        let header: LogLine =
            serde_json::from_str(first).map_err(|e| FederationError::Format(e.to_string()))?;
        let LogLine::Header {
            num_clients,
            clients_per_round,
            rounds,
            shape,
            initial,
        } = header
        else {
            return Err(FederationError::Format("first record must be the header".into()));
        };
        let initial = ModelParams::from_weights(
            shape,
            decode_f64s(&initial).map_err(FederationError::Format)?,
        )?;
        let mut by_round: BTreeMap<usize, Vec<RoundDelta>> =
            (0..rounds).map(|t| (t, Vec::new())).collect();
        for line in lines {
            let rec: LogLine =
                serde_json::from_str(line).map_err(|e| FederationError::Format(e.to_string()))?;
            let LogLine::Delta {
                round,
                client_id,
                dataset_size,
                delta,
            } = rec
            else {
                return Err(FederationError::Format("duplicate header".into()));
            };
            let slot = by_round.get_mut(&round).ok_or_else(|| {
                FederationError::IncompleteLog(format!("delta for round {round} beyond {rounds}"))
            })?;
            slot.push(RoundDelta {
                client_id,
                round,
                delta: decode_f64s(&delta).map_err(FederationError::Format)?,
                dataset_size,
            });
        }
        let mut global = initial.clone();
        let mut records = Vec::with_capacity(rounds);
        for (round, mut deltas) in by_round {
            deltas.sort_by_key(|d| d.client_id);
            let record = RoundRecord {
                round,
                global_hash: model_hash(&global),
                deltas,
            };
            if record.deltas.is_empty() {
                return Err(FederationError::IncompleteLog(format!(
                    "round {round} has no deltas"
                )));
            }
            global = aggregate(&global, &record.deltas)?;
            records.push(record);
        }
        let log = RoundLog {
            num_clients,
            clients_per_round,
            initial,
            rounds: records,
            final_model: global,
        };
        log.validate()?;
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::ModelShape;
    use rand::Rng;

    fn hyper() -> Hyperparams {
        Hyperparams {
            learning_rate: 0.1,
            batch_size: 4,
            local_epochs: 1,
            seed: 3,
        }
    }

    fn config(n: usize, m: usize, t: usize) -> FederationConfig {
        FederationConfig {
            num_clients: n,
            clients_per_round: m,
            rounds: t,
            hyper: hyper(),
            client_selection_seed: 11,
        }
    }

    fn blobs(n_clients: usize, per: usize, seed_base: u64) -> (Vec<Dataset>, Dataset) {
        let make = |s: u64, n: usize| {
            let mut rng = seed::rng(s);
            let mut feats = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let y = i % 2;
                let centre = if y == 0 { -1.0 } else { 1.0 };
                feats.push(centre + rng.random_range(-0.5..0.5));
                feats.push(rng.random_range(-0.5..0.5));
                labels.push(y);
            }
            Dataset::new(feats, labels, 2, 2).unwrap()
        };
        let parts = (0..n_clients)
            .map(|i| make(seed_base + i as u64, per))
            .collect();
        (parts, make(seed_base + 1000, 40))
    }

    fn delta(client: usize, size: usize, v: Vec<f64>) -> RoundDelta {
        RoundDelta {
            client_id: client,
            round: 0,
            delta: v,
            dataset_size: size,
        }
    }

    #[test]
    fn full_participation_selects_everyone() {
        assert_eq!(select_clients(&config(5, 5, 1), 0), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn selection_is_deterministic_and_fair() {
        let c = config(5, 2, 1000);
        assert_eq!(select_clients(&c, 17), select_clients(&c, 17));
        let mut counts = [0usize; 5];
        for t in 0..1000 {
            let s = select_clients(&c, t);
            assert_eq!(s.len(), 2);
            for i in s {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / 1000.0;
            assert!((f - 0.4).abs() <= 0.05, "frequency {f}");
        }
    }

    #[test]
    fn aggregation_arithmetic() {
        let g = ModelParams::from_weights(ModelShape::linear(1, 1), vec![1.0, 2.0]).unwrap();
        let single = aggregate(&g, &[delta(0, 5, vec![0.5, -1.0])]).unwrap();
        assert_eq!(single.weights(), &[1.5, 1.0]);
        let cancel = aggregate(
            &g,
            &[delta(0, 3, vec![0.5, -1.0]), delta(1, 3, vec![-0.5, 1.0])],
        )
        .unwrap();
        assert_eq!(cancel.weights(), g.weights());
        let g1 = ModelParams::from_weights(ModelShape::linear(1, 1), vec![0.0, 0.0]).unwrap();
        let weighted = aggregate(
            &g1,
            &[delta(0, 3, vec![4.0, 4.0]), delta(1, 1, vec![0.0, 0.0])],
        )
        .unwrap();
        assert_eq!(weighted.weights(), &[3.0, 3.0]);
        assert_eq!(aggregate(&g, &[]), Err(FederationError::EmptyDeltas));
        assert!(aggregate(&g, &[delta(0, 1, vec![1.0])]).is_err());
    }

    #[test]
    fn aggregation_ignores_arrival_order() {
        let g = ModelParams::from_weights(ModelShape::linear(1, 1), vec![0.1, 0.2]).unwrap();
        let a = delta(0, 3, vec![0.1, 0.7]);
        let b = delta(1, 5, vec![0.3, -0.2]);
        let c = delta(2, 7, vec![-0.9, 0.4]);
        let x = aggregate(&g, &[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = aggregate(&g, &[c, a, b]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn degenerate_federation_equals_local_training() {
        let (parts, test) = blobs(1, 20, 1);
        let init = ModelParams::random(ModelShape::linear(2, 2), 5, 0.1).unwrap();
        let c = config(1, 1, 1);
        let out = run_training(&c, &init, &parts, &test).unwrap();
        let local = learner::local_train(&init, &parts[0], &c.round_hyper(0)).unwrap();
        assert_eq!(out.final_model, local);
    }

    #[test]
    fn replay_reproduces_final_model_exactly() {
        let (parts, test) = blobs(4, 15, 2);
        let init = ModelParams::random(ModelShape::mlp(2, 3, 2), 5, 0.3).unwrap();
        for m in [4, 2] {
            let c = config(4, m, 6);
            let out = run_training(&c, &init, &parts, &test).unwrap();
            let full = reconstruct_subset_model(&out.log, Coalition::full(4)).unwrap();
            assert_eq!(full.weights(), out.final_model.weights());
            let replayed = out.log.global_models().unwrap();
            assert_eq!(replayed.last().unwrap(), &out.final_model);
        }
    }

    #[test]
    fn logged_deltas_match_learner() {
        let (parts, test) = blobs(3, 12, 3);
        let init = ModelParams::random(ModelShape::linear(2, 2), 5, 0.1).unwrap();
        let c = config(3, 3, 3);
        let out = run_training(&c, &init, &parts, &test).unwrap();
        let globals = out.log.global_models().unwrap();
        for (t, r) in out.log.rounds.iter().enumerate() {
            for d in &r.deltas {
                let local =
                    learner::local_train(&globals[t], &parts[d.client_id], &c.round_hyper(t))
                        .unwrap();
                assert_eq!(d.delta, local.difference(&globals[t]).unwrap());
            }
        }
    }

    #[test]
    fn subset_reconstruction_edge_cases() {
        let (parts, test) = blobs(3, 10, 4);
        let init = ModelParams::random(ModelShape::linear(2, 2), 5, 0.1).unwrap();
        let out = run_training(&config(3, 3, 4), &init, &parts, &test).unwrap();
        assert_eq!(
            reconstruct_subset_model(&out.log, Coalition::EMPTY).unwrap(),
            init
        );
        let single = reconstruct_subset_model(&out.log, Coalition::singleton(1)).unwrap();
        let mut expected = init.clone();
        for r in &out.log.rounds {
            expected = expected.offset(&r.deltas[1].delta).unwrap();
        }
        assert_eq!(single, expected);
        assert_eq!(
            reconstruct_subset_model(&out.log, Coalition::singleton(5)),
            Err(FederationError::UnknownClient(5))
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (parts, test) = blobs(4, 10, 5);
        let init = ModelParams::random(ModelShape::linear(2, 2), 5, 0.1).unwrap();
        let c = config(4, 3, 5);
        let a = run_training(&c, &init, &parts, &test).unwrap();
        let b = run_training(&c, &init, &parts, &test).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn federation_improves_separable_task() {
        let (parts, test) = blobs(5, 20, 6);
        let init = ModelParams::zeros(ModelShape::linear(2, 2)).unwrap();
        let out = run_training(&config(5, 5, 10), &init, &parts, &test).unwrap();
        let (u0, ut) = (out.utility_curve[0], *out.utility_curve.last().unwrap());
        assert!(ut > u0 + 0.2, "{u0} -> {ut}");
    }

    #[test]
    fn jsonl_round_trip() {
        let (parts, test) = blobs(3, 10, 7);
        let init = ModelParams::random(ModelShape::linear(2, 2), 5, 0.1).unwrap();
        let out = run_training(&config(3, 2, 4), &init, &parts, &test).unwrap();
        let text = out.log.to_jsonl();
        let back = RoundLog::from_jsonl(&text).unwrap();
        assert_eq!(back, out.log);
        // dropping a record leaves a round short
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(RoundLog::from_jsonl(&truncated).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(config(0, 1, 1).validate().is_err());
        assert!(config(3, 4, 1).validate().is_err());
        assert!(config(3, 0, 1).validate().is_err());
        assert!(config(3, 3, 0).validate().is_err());
    }

    #[test]
    fn coalition_basics() {
        let c: Coalition = [0, 3].into_iter().collect();
        assert_eq!(c.bits(), 0b1001);
        assert_eq!(c.len(), 2);
        assert_eq!(c.span(), 4);
        assert_eq!(c.members().collect::<Vec<_>>(), vec![0, 3]);
        assert_eq!(Coalition::full(64).len(), 64);
        assert!(c.without(3).contains(0) && !c.without(3).contains(3));
    }
}
