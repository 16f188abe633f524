//! Deal state machine, token escrow and Shapley-proportional settlement.
//!
//! Every operation validates fully before touching anything, then records
//! its transactions and (by default) seals them into a block.  Receipts are
//! rebuilt from the chain and blob store alone.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{self, Dataset, ModelParams};
use crate::ledger::{
    self, Chain, ChainConfig, Digest, GasSchedule, GasTotals, LedgerError, Transaction, TxKind,
};
use crate::shapley::ShapleyVector;

pub type DealId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("account `{0}` does not exist")]
    UnknownAccount(String),
    #[error("account `{0}` already exists")]
    DuplicateAccount(String),
    #[error("deal {0} does not exist")]
    UnknownDeal(DealId),
    #[error("`{account}` holds {available} but {needed} is required")]
    InsufficientBalance {
        account: String,
        needed: u64,
        available: u64,
    },
    #[error("deal {deal} is {state:?}; `{op}` is not allowed")]
    WrongState {
        deal: DealId,
        state: DealState,
        op: &'static str,
    },
    #[error("seller `{0}` is already registered")]
    DuplicateSeller(String),
    #[error("seller `{0}` is not registered for this deal")]
    UnregisteredSeller(String),
    #[error("expected round {expected}, got {got}")]
    RoundOutOfOrder { expected: usize, got: usize },
    #[error("a round needs at least one update")]
    EmptyRound,
    #[error("accuracy target {0} not in [0, 1]")]
    InvalidTarget(f64),
    #[error("invalid contribution vector: {0}")]
    InvalidShapley(String),
    #[error("settlement policy: {0}")]
    SettlementPolicy(String),
    #[error("deal {0} is still open")]
    DealOpen(DealId),
    #[error("cannot decode {what}: {message}")]
    Decode { what: &'static str, message: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, MarketError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DealState {
    Published,
    Training,
    Aggregated,
    Verified,
    Settled,
    Aborted,
}

impl DealState {
    pub fn is_closed(self) -> bool {
        matches!(self, DealState::Settled | DealState::Aborted)
    }
}

/// Test accuracy a deal must reach, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize)]
pub struct AccuracyTarget(f64);

impl AccuracyTarget {
    pub fn new(v: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&v) {
            Ok(Self(v))
        } else {
            Err(MarketError::InvalidTarget(v))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl<'de> Deserialize<'de> for AccuracyTarget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        AccuracyTarget::new(f64::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deal {
    pub deal_id: DealId,
    pub buyer: String,
    /// In registration order; index `i` is client `i`.
    pub sellers: Vec<String>,
    pub model_digest: Digest,
    pub test_digest: Digest,
    pub accuracy_target: AccuracyTarget,
    pub deposit: u64,
    pub state: DealState,
    pub rounds_recorded: usize,
    /// Every state the deal has passed through, in order.
    pub history: Vec<DealState>,
}

/// Balances and escrow in integer micro-tokens.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenLedger {
    balances: BTreeMap<String, u64>,
    escrow: BTreeMap<DealId, u64>,
    minted: u128,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates tokens for a new account.  The only operation that changes
    /// the total supply.
    pub fn mint(&mut self, account: &str, amount: u64) -> Result<()> {
        if self.balances.contains_key(account) {
            return Err(MarketError::DuplicateAccount(account.to_string()));
        }
        self.balances.insert(account.to_string(), amount);
        self.minted += amount as u128;
        Ok(())
    }

    pub fn balance(&self, account: &str) -> Option<u64> {
        self.balances.get(account).copied()
    }

    pub fn escrowed(&self, deal: DealId) -> u64 {
        self.escrow.get(&deal).copied().unwrap_or(0)
    }

    pub fn minted(&self) -> u128 {
        self.minted
    }

    /// Sum of all balances and escrow.
    pub fn total(&self) -> u128 {
        self.balances.values().map(|&b| b as u128).sum::<u128>()
            + self.escrow.values().map(|&e| e as u128).sum::<u128>()
    }

    pub fn balances(&self) -> &BTreeMap<String, u64> {
        &self.balances
    }

    fn check_lock(&self, account: &str, amount: u64) -> Result<()> {
        let available = self
            .balance(account)
            .ok_or_else(|| MarketError::UnknownAccount(account.to_string()))?;
        if available < amount {
            return Err(MarketError::InsufficientBalance {
                account: account.to_string(),
                needed: amount,
                available,
            });
        }
        Ok(())
    }

    fn lock(&mut self, account: &str, deal: DealId, amount: u64) -> Result<()> {
        self.check_lock(account, amount)?;
        *self.balances.get_mut(account).expect("checked") -= amount;
        *self.escrow.entry(deal).or_default() += amount;
        Ok(())
    }

    /// Drains a deal's escrow into the given transfers, which must add up
    /// to the escrowed amount exactly.
    fn release(&mut self, deal: DealId, transfers: &[(String, u64)]) -> Result<()> {
        let held = self.escrowed(deal);
        let paid: u128 = transfers.iter().map(|(_, a)| *a as u128).sum();
        if paid != held as u128 {
            return Err(MarketError::Invariant(format!(
                "deal {deal} releases {paid} of {held} escrowed"
            )));
        }
        if let Some((who, _)) = transfers.iter().find(|(w, _)| !self.balances.contains_key(w)) {
            return Err(MarketError::UnknownAccount(who.clone()));
        }
        self.escrow.remove(&deal);
        for (who, amount) in transfers {
            *self.balances.get_mut(who).expect("checked") += amount;
        }
        Ok(())
    }
}

/// Result of settling a deal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Payout {
    pub deal_id: DealId,
    /// `(seller, amount)` in seller order.
    pub payments: Vec<(String, u64)>,
    pub refund: u64,
    /// Set when negative contributions were clamped.
    pub flagged: bool,
    /// Contribution shares actually paid out.
    pub shares: Vec<f64>,
}

/// `floor(phi_i * deposit)` per seller plus the rounding dust.  A tiny
/// epsilon keeps exact products such as `0.3 * 10` from flooring one low.
pub fn split_deposit(shares: &[f64], deposit: u64) -> Result<(Vec<u64>, u64)> {
    let amounts: Vec<u64> = shares
        .iter()
        .map(|&s| (s * deposit as f64 + 1e-6).floor().max(0.0) as u64)
        .collect();
    let paid: u128 = amounts.iter().map(|&a| a as u128).sum();
    if paid > deposit as u128 {
        return Err(MarketError::Invariant(format!(
            "payouts {paid} exceed deposit {deposit}"
        )));
    }
    Ok((amounts, deposit - paid as u64))
}

/// Clamps negative contributions to zero and renormalizes.
pub fn settlement_shares(sv: &ShapleyVector) -> Result<(Vec<f64>, bool)> {
    if !sv.normalized {
        return Err(MarketError::InvalidShapley("vector is not normalized".into()));
    }
    if sv.values.iter().any(|v| !v.is_finite()) {
        return Err(MarketError::InvalidShapley("non-finite entry".into()));
    }
    if sv.values.iter().all(|&v| v >= 0.0) {
        return Ok((sv.values.clone(), false));
    }
    let clamped: Vec<f64> = sv.values.iter().map(|&v| v.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    if sum <= 0.0 {
        return Err(MarketError::SettlementPolicy(
            "no seller has a positive contribution".into(),
        ));
    }
    Ok((clamped.iter().map(|v| v / sum).collect(), true))
}

/// Blob payload of every deal transaction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub deal_id: DealId,
    pub event: Event,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Event {
    Publish {
        buyer: String,
        model: Digest,
        test: Digest,
        target: f64,
        deposit: u64,
    },
    AddWorker {
        seller: String,
    },
    LocalUpdate {
        round: usize,
        seller: String,
        delta: Digest,
    },
    Aggregate {
        round: usize,
        deltas: Vec<Digest>,
    },
    Verify {
        model: Digest,
        accuracy: f64,
        target: f64,
        passed: bool,
    },
    Settlement {
        method: String,
        phi_raw: Vec<f64>,
        shares: Vec<f64>,
        flagged: bool,
        payouts: Vec<(String, u64)>,
        refund: u64,
    },
    Pay {
        transfers: Vec<(String, u64)>,
    },
    Abort {
        refund: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub chain: ChainConfig,
    pub miners: Vec<String>,
    /// Seal pending transactions into a block after every operation.
    pub auto_seal: bool,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            chain: ChainConfig::default(),
            miners: (1..=5).map(|i| format!("miner-{i}")).collect(),
            auto_seal: true,
        }
    }
}

pub struct Market {
    chain: Chain,
    tokens: TokenLedger,
    deals: BTreeMap<DealId, Deal>,
    next_deal: DealId,
    miners: Vec<String>,
    next_miner: usize,
    auto_seal: bool,
    nonces: BTreeMap<String, u64>,
    gas_slots: BTreeMap<(DealId, TxKind), usize>,
}

impl Market {
    pub fn new(config: MarketConfig) -> Result<Self> {
        if config.miners.is_empty() {
            return Err(MarketError::Invariant("at least one miner is required".into()));
        }
        let chain = Chain::new(
            config.chain,
            GasSchedule::standard(),
            Arc::new(ledger::BlobStore::new()),
        )?;
        Ok(Self {
            chain,
            tokens: TokenLedger::new(),
            deals: BTreeMap::new(),
            next_deal: 0,
            miners: config.miners,
            next_miner: 0,
            auto_seal: config.auto_seal,
            nonces: BTreeMap::new(),
            gas_slots: BTreeMap::new(),
        })
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn chain_mut(&mut self) -> &mut Chain {
        &mut self.chain
    }

    pub fn set_auto_seal(&mut self, on: bool) {
        self.auto_seal = on;
    }

    pub fn tokens(&self) -> &TokenLedger {
        &self.tokens
    }

    pub fn deal(&self, id: DealId) -> Result<&Deal> {
        self.deals.get(&id).ok_or(MarketError::UnknownDeal(id))
    }

    pub fn deals(&self) -> impl Iterator<Item = &Deal> {
        self.deals.values()
    }

    /// Registers an account on the ledger with an initial token grant.
    pub fn open_account(&mut self, id: &str, tokens: u64) -> Result<()> {
        self.tokens.mint(id, tokens)?;
        self.chain.register_account(id);
        Ok(())
    }

    pub fn store_blob(&self, bytes: &[u8]) -> Digest {
        self.chain.blobs().store(bytes)
    }

    pub fn store_model(&self, model: &ModelParams) -> Digest {
        self.store_blob(&serde_json::to_vec(model).expect("model serializes"))
    }

    pub fn store_dataset(&self, data: &Dataset) -> Digest {
        self.store_blob(&serde_json::to_vec(data).expect("dataset serializes"))
    }

    pub fn fetch_model(&self, digest: &Digest) -> Result<ModelParams> {
        decode_model(&self.chain.blobs().fetch(digest)?)
    }

    pub fn fetch_dataset(&self, digest: &Digest) -> Result<Dataset> {
        decode_dataset(&self.chain.blobs().fetch(digest)?)
    }

    fn check_blob(&self, d: &Digest) -> Result<()> {
        if self.chain.blobs().contains(d) {
            Ok(())
        } else {
            Err(LedgerError::DanglingPayload(*d).into())
        }
    }

    fn open_deal(&self, id: DealId, op: &'static str, allowed: &[DealState]) -> Result<&Deal> {
        let deal = self.deal(id)?;
        if !allowed.contains(&deal.state) {
            return Err(MarketError::WrongState {
                deal: id,
                state: deal.state,
                op,
            });
        }
        Ok(deal)
    }

    /// Submits one deal transaction.  Callers have already validated, so a
    /// failure here is an invariant violation.
    fn record(&mut self, kind: TxKind, sender: &str, envelope: &Envelope) -> Result<Digest> {
        let payload = self.store_blob(&serde_json::to_vec(envelope).expect("envelope serializes"));
        let nonce = self.nonces.entry(sender.to_string()).or_default();
        let slot = self.gas_slots.entry((envelope.deal_id, kind)).or_default();
        let tx = Transaction::new(kind, sender, payload, *nonce).with_gas_slot(*slot);
        *nonce += 1;
        *slot += 1;
        self.chain
            .submit_tx(tx)
            .map_err(|e| MarketError::Invariant(format!("recording {kind}: {e}")))
    }

    fn next_miner(&mut self) -> String {
        let m = self.miners[self.next_miner % self.miners.len()].clone();
        self.next_miner += 1;
        m
    }

    fn after_op(&mut self) -> Result<()> {
        if self.auto_seal {
            self.seal()?;
        }
        Ok(())
    }

    /// Mines blocks until the pool is empty.
    pub fn seal(&mut self) -> Result<()> {
        while !self.chain.pool().is_empty() {
            let miner = self.next_miner();
            self.chain.mine_block(&miner)?;
        }
        Ok(())
    }

    /// Seals the pool through a two-way fork: one candidate carries the
    /// whole pool, the other the first half.  Every miner acknowledges one
    /// candidate by a seeded draw; the loser's extra transactions go back
    /// to the pool and are sealed normally afterwards.
    pub fn seal_with_fork(&mut self, seed: u64) -> Result<Digest> {
        let a_miner = self.next_miner();
        let b_miner = self.next_miner();
        let cap = self.chain.config().max_txs_per_block;
        let pool = self.chain.pool();
        let full = pool[..pool.len().min(cap)].to_vec();
        let half = full[..full.len() / 2].to_vec();
        let a = self.chain.mine_candidate_with(&a_miner, full).block;
        let b = self.chain.mine_candidate_with(&b_miner, half).block;
        let candidates = vec![a, b];
        let acks = ledger::simulate_acks(&self.miners, &candidates, seed);
        let winner = self.chain.resolve_fork(candidates, &acks)?;
        self.seal()?;
        Ok(winner)
    }

    /// Escrows the deposit and opens a deal.
    pub fn publish_model(
        &mut self,
        buyer: &str,
        model: Digest,
        test: Digest,
        target: AccuracyTarget,
        deposit: u64,
    ) -> Result<DealId> {
        self.tokens.check_lock(buyer, deposit)?;
        self.check_blob(&model)?;
        self.check_blob(&test)?;
        decode_model(&self.chain.blobs().fetch(&model)?)?;
        decode_dataset(&self.chain.blobs().fetch(&test)?)?;

        let id = self.next_deal;
        self.next_deal += 1;
        self.tokens.lock(buyer, id, deposit)?;
        self.deals.insert(
            id,
            Deal {
                deal_id: id,
                buyer: buyer.to_string(),
                sellers: Vec::new(),
                model_digest: model,
                test_digest: test,
                accuracy_target: target,
                deposit,
                state: DealState::Published,
                rounds_recorded: 0,
                history: vec![DealState::Published],
            },
        );
        let env = Envelope {
            deal_id: id,
            event: Event::Publish {
                buyer: buyer.to_string(),
                model,
                test,
                target: target.value(),
                deposit,
            },
        };
        self.record(TxKind::Publish, buyer, &env)?;
        self.after_op()?;
        Ok(id)
    }

    pub fn register_seller(&mut self, deal: DealId, seller: &str) -> Result<()> {
        let d = self.open_deal(deal, "register_seller", &[DealState::Published, DealState::Training])?;
        if d.sellers.iter().any(|s| s == seller) {
            return Err(MarketError::DuplicateSeller(seller.to_string()));
        }
        if !self.chain.is_registered(seller) {
            return Err(MarketError::UnknownAccount(seller.to_string()));
        }
        let d = self.deals.get_mut(&deal).expect("checked");
        d.sellers.push(seller.to_string());
        if d.state == DealState::Published {
            d.state = DealState::Training;
            d.history.push(DealState::Training);
        }
        let env = Envelope {
            deal_id: deal,
            event: Event::AddWorker {
                seller: seller.to_string(),
            },
        };
        self.record(TxKind::AddWorker, seller, &env)?;
        self.after_op()
    }

    /// Records one training round: a `ModelTraining` transaction per
    /// submitting seller and one `ModelAggregation`.
    pub fn record_round(&mut self, deal: DealId, round: usize, updates: &[(String, Digest)]) -> Result<()> {
        let d = self.open_deal(deal, "record_round", &[DealState::Training])?;
        if round != d.rounds_recorded {
            return Err(MarketError::RoundOutOfOrder {
                expected: d.rounds_recorded,
                got: round,
            });
        }
        if updates.is_empty() {
            return Err(MarketError::EmptyRound);
        }
        let mut seen = BTreeSet::new();
        for (seller, delta) in updates {
            if !d.sellers.contains(seller) {
                return Err(MarketError::UnregisteredSeller(seller.clone()));
            }
            if !seen.insert(seller) {
                return Err(MarketError::DuplicateSeller(seller.clone()));
            }
            self.check_blob(delta)?;
        }
        let buyer = d.buyer.clone();
        for (seller, delta) in updates {
            let env = Envelope {
                deal_id: deal,
                event: Event::LocalUpdate {
                    round,
                    seller: seller.clone(),
                    delta: *delta,
                },
            };
            self.record(TxKind::ModelTraining, seller, &env)?;
        }
        let env = Envelope {
            deal_id: deal,
            event: Event::Aggregate {
                round,
                deltas: updates.iter().map(|(_, d)| *d).collect(),
            },
        };
        self.record(TxKind::ModelAggregation, &buyer, &env)?;
        self.deals.get_mut(&deal).expect("checked").rounds_recorded += 1;
        self.after_op()
    }

    /// Miners evaluate the submitted model on the buyer's published test
    /// set.  On success the deal moves through `Aggregated` to `Verified`;
    /// otherwise it stays in `Training`.  Either way the decision is
    /// recorded as a `Commit` transaction.
    pub fn verify_and_close(&mut self, deal: DealId, model: Digest) -> Result<DealState> {
        let d = self.open_deal(deal, "verify_and_close", &[DealState::Training])?;
        let (target, test_digest, buyer) = (d.accuracy_target, d.test_digest, d.buyer.clone());
        let params = self.fetch_model(&model)?;
        let test = self.fetch_dataset(&test_digest)?;
        let accuracy = learner::utility(&params, &test)
            .map_err(|e| MarketError::Decode {
                what: "model",
                message: e.to_string(),
            })?
            .value();
        let passed = accuracy >= target.value();
        let d = self.deals.get_mut(&deal).expect("checked");
        if passed {
            d.state = DealState::Verified;
            d.history.extend([DealState::Aggregated, DealState::Verified]);
        }
        let state = d.state;
        let env = Envelope {
            deal_id: deal,
            event: Event::Verify {
                model,
                accuracy,
                target: target.value(),
                passed,
            },
        };
        self.record(TxKind::Commit, &buyer, &env)?;
        self.after_op()?;
        Ok(state)
    }

    /// Pays sellers `floor(phi_i * P_d)` and refunds the dust to the buyer.
    pub fn settle(&mut self, deal: DealId, sv: &ShapleyVector) -> Result<Payout> {
        let d = self.open_deal(deal, "settle", &[DealState::Verified])?;
        if sv.len() != d.sellers.len() {
            return Err(MarketError::InvalidShapley(format!(
                "{} values for {} sellers",
                sv.len(),
                d.sellers.len()
            )));
        }
        let (shares, flagged) = settlement_shares(sv)?;
        let (amounts, refund) = split_deposit(&shares, d.deposit)?;
        let payments: Vec<(String, u64)> = d.sellers.iter().cloned().zip(amounts).collect();
        let buyer = d.buyer.clone();
        let mut transfers = payments.clone();
        transfers.push((buyer.clone(), refund));
        self.tokens.release(deal, &transfers)?;

        let d = self.deals.get_mut(&deal).expect("checked");
        d.state = DealState::Settled;
        d.history.push(DealState::Settled);
        let settlement = Envelope {
            deal_id: deal,
            event: Event::Settlement {
                method: sv.method.name().to_string(),
                phi_raw: sv.values.clone(),
                shares: shares.clone(),
                flagged,
                payouts: payments.clone(),
                refund,
            },
        };
        self.record(TxKind::Settlement, &buyer, &settlement)?;
        let pay = Envelope {
            deal_id: deal,
            event: Event::Pay { transfers },
        };
        self.record(TxKind::PayChannelExecute, &buyer, &pay)?;
        self.after_op()?;
        Ok(Payout {
            deal_id: deal,
            payments,
            refund,
            flagged,
            shares,
        })
    }

    /// Cancels an open deal and refunds the whole deposit.
    pub fn abort(&mut self, deal: DealId) -> Result<u64> {
        let d = self.open_deal(
            deal,
            "abort",
            &[
                DealState::Published,
                DealState::Training,
                DealState::Aggregated,
                DealState::Verified,
            ],
        )?;
        let buyer = d.buyer.clone();
        let refund = self.tokens.escrowed(deal);
        self.tokens.release(deal, &[(buyer.clone(), refund)])?;
        let d = self.deals.get_mut(&deal).expect("checked");
        d.state = DealState::Aborted;
        d.history.push(DealState::Aborted);
        let env = Envelope {
            deal_id: deal,
            event: Event::Abort { refund },
        };
        self.record(TxKind::Settle, &buyer, &env)?;
        self.after_op()?;
        Ok(refund)
    }

    /// On-ledger trail of a closed deal.
    pub fn receipt(&self, deal: DealId) -> Result<Receipt> {
        let d = self.deal(deal)?;
        if !d.state.is_closed() {
            return Err(MarketError::DealOpen(deal));
        }
        receipt_from_chain(&self.chain, deal)
    }
}

fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let err = |m: String| MarketError::Decode {
        what: "model",
        message: m,
    };
    let m: ModelParams = serde_json::from_slice(bytes).map_err(|e| err(e.to_string()))?;
    ModelParams::from_weights(*m.shape(), m.weights().to_vec()).map_err(|e| err(e.to_string()))
}

fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let err = |m: String| MarketError::Decode {
        what: "test set",
        message: m,
    };
    let d: Dataset = serde_json::from_slice(bytes).map_err(|e| err(e.to_string()))?;
    Dataset::new(d.features().to_vec(), d.labels().to_vec(), d.n_features(), d.n_classes())
        .map_err(|e| err(e.to_string()))
}

/// Everything the ledger knows about one deal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub deal_id: DealId,
    pub final_state: DealState,
    pub tx_ids: Vec<Digest>,
    pub tx_counts: BTreeMap<TxKind, usize>,
    pub gas: GasTotals,
    pub method: Option<String>,
    pub phi_raw: Vec<f64>,
    pub shares: Vec<f64>,
    pub flagged: bool,
    pub payouts: Vec<(String, u64)>,
    pub refund: u64,
}

impl Receipt {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("receipt serializes")
    }
}

/// Rebuilds a deal's receipt by scanning the main path and decoding each
/// transaction's payload from the blob store.
pub fn receipt_from_chain(chain: &Chain, deal: DealId) -> Result<Receipt> {
    let mut r = Receipt {
        deal_id: deal,
        final_state: DealState::Published,
        tx_ids: Vec::new(),
        tx_counts: BTreeMap::new(),
        gas: GasTotals::default(),
        method: None,
        phi_raw: Vec::new(),
        shares: Vec::new(),
        flagged: false,
        payouts: Vec::new(),
        refund: 0,
    };
    let mut closed = false;
    for tx in chain.main_path_txs() {
        let Ok(bytes) = chain.blobs().fetch(&tx.payload_hash) else {
            return Err(LedgerError::DanglingPayload(tx.payload_hash).into());
        };
        let Ok(env) = serde_json::from_slice::<Envelope>(&bytes) else {
            continue;
        };
        if env.deal_id != deal {
            continue;
        }
        r.tx_ids.push(tx.id());
        *r.tx_counts.entry(tx.kind).or_default() += 1;
        r.gas.add(tx.kind, chain.schedule().row(tx.kind, tx.gas_slot)?);
        match env.event {
            Event::Settlement {
                method,
                phi_raw,
                shares,
                flagged,
                payouts,
                refund,
            } => {
                r.method = Some(method);
                r.phi_raw = phi_raw;
                r.shares = shares;
                r.flagged = flagged;
                r.payouts = payouts;
                r.refund = refund;
                r.final_state = DealState::Settled;
                closed = true;
            }
            Event::Abort { refund } => {
                r.refund = refund;
                r.final_state = DealState::Aborted;
                closed = true;
            }
            _ => {}
        }
    }
    if r.tx_ids.is_empty() {
        return Err(MarketError::UnknownDeal(deal));
    }
    if !closed {
        return Err(MarketError::DealOpen(deal));
    }
    Ok(r)
}

/// Structured settlement record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettlementReport {
    pub deal_id: DealId,
    pub method: String,
    pub phi_normalized: Vec<f64>,
    pub flagged: bool,
    pub payouts: Vec<(String, u64)>,
    pub refund: u64,
    pub deposit: u64,
    pub gas_total: u64,
    pub ether_total: f64,
    pub usd_total: f64,
}

impl SettlementReport {
    pub fn from_receipt(receipt: &Receipt) -> Self {
        let paid: u64 = receipt.payouts.iter().map(|(_, a)| a).sum();
        Self {
            deal_id: receipt.deal_id,
            method: receipt.method.clone().unwrap_or_default(),
            phi_normalized: receipt.phi_raw.clone(),
            flagged: receipt.flagged,
            payouts: receipt.payouts.clone(),
            refund: receipt.refund,
            deposit: paid + receipt.refund,
            gas_total: receipt.gas.gas,
            ether_total: receipt.gas.ether,
            usd_total: receipt.gas.usd,
        }
    }
}
