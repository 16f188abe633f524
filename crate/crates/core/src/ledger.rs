//! Simulated proof-of-work ledger with gas accounting and a
//! content-addressed off-chain blob store.
//!
//! Every digest is SHA-256.  A transaction's id is the digest of its
//! canonical JSON encoding, and that encoding is itself stored as a blob, so
//! an exported chain (which lists tx ids only) can be rebuilt from the blob
//! directory alone.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::seed;

/// Highest supported mining difficulty, in leading zero bits.
pub const MAX_DIFFICULTY: u32 = 20;
pub const DEFAULT_DIFFICULTY: u32 = 8;
pub const DEFAULT_MAX_TXS_PER_BLOCK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("blob {0} not found")]
    BlobNotFound(Digest),
    #[error("unknown transaction kind `{0}`")]
    UnknownKind(String),
    #[error("payload {0} is not in the blob store")]
    DanglingPayload(Digest),
    #[error("sender `{0}` is not registered")]
    UnknownSender(String),
    #[error("transaction {0} already submitted")]
    DuplicateTx(Digest),
    #[error("difficulty {0} exceeds the supported maximum of {MAX_DIFFICULTY}")]
    Difficulty(u32),
    #[error("fork resolution needs at least one candidate")]
    NoCandidates,
    #[error("invalid block: {0}")]
    InvalidBlock(String),
    #[error("gas schedule entry for {0} must be positive")]
    NonPositiveGas(TxKind),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed data: {0}")]
    Format(String),
}

impl From<std::io::Error> for LedgerError {
    fn from(e: std::io::Error) -> Self {
        LedgerError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LedgerError>;

/// 32-byte SHA-256 digest.  Serialized as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| LedgerError::Format(format!("digest `{s}`: {e}")))?;
        Ok(Digest(out))
    }

    pub fn leading_zero_bits(&self) -> u32 {
        let mut n = 0;
        for b in self.0 {
            if b == 0 {
                n += 8;
            } else {
                return n + b.leading_zeros();
            }
        }
        n
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Content-addressed store standing in for IPFS.  Safe for concurrent
/// inserts; storing the same bytes twice is a no-op.
#[derive(Debug, Default)]
pub struct BlobStore {
    blobs: RwLock<HashMap<Digest, Arc<[u8]>>>,
}

impl BlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&self, bytes: &[u8]) -> Digest {
        let digest = Digest::of(bytes);
        let mut map = self.blobs.write().expect("blob store lock");
        map.entry(digest).or_insert_with(|| Arc::from(bytes));
        digest
    }

    pub fn fetch(&self, digest: &Digest) -> Result<Vec<u8>> {
        self.blobs
            .read()
            .expect("blob store lock")
            .get(digest)
            .map(|b| b.to_vec())
            .ok_or(LedgerError::BlobNotFound(*digest))
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.blobs.read().expect("blob store lock").contains_key(digest)
    }

    pub fn len(&self) -> usize {
        self.blobs.read().expect("blob store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorted list of stored digests.
    pub fn digests(&self) -> Vec<Digest> {
        let mut v: Vec<Digest> = self
            .blobs
            .read()
            .expect("blob store lock")
            .keys()
            .copied()
            .collect();
        v.sort();
        v
    }

    /// Drops a blob, simulating lost off-chain data.
    pub fn evict(&self, digest: &Digest) -> bool {
        self.blobs
            .write()
            .expect("blob store lock")
            .remove(digest)
            .is_some()
    }

    /// Writes one file per blob, named by lowercase hex digest.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let map = self.blobs.read().expect("blob store lock");
        for (digest, bytes) in map.iter() {
            std::fs::write(dir.join(digest.to_hex()), bytes)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let store = Self::new();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let name = name
                .to_str()
                .ok_or_else(|| LedgerError::Format("non-utf8 blob file name".into()))?;
            let expected = Digest::from_hex(name)?;
            let bytes = std::fs::read(entry.path())?;
            if store.store(&bytes) != expected {
                return Err(LedgerError::Format(format!(
                    "blob file {name} does not match its content"
                )));
            }
        }
        Ok(store)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TxKind {
    ContractRegistry,
    AddWorker,
    ModelTransmission,
    ModelTraining,
    ModelAggregation,
    Settlement,
    PayChannelExecute,
    Publish,
    Commit,
    Deploy,
    Update,
    Settle,
}

impl TxKind {
    pub const ALL: [TxKind; 12] = [
        TxKind::ContractRegistry,
        TxKind::AddWorker,
        TxKind::ModelTransmission,
        TxKind::ModelTraining,
        TxKind::ModelAggregation,
        TxKind::Settlement,
        TxKind::PayChannelExecute,
        TxKind::Publish,
        TxKind::Commit,
        TxKind::Deploy,
        TxKind::Update,
        TxKind::Settle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TxKind::ContractRegistry => "ContractRegistry",
            TxKind::AddWorker => "AddWorker",
            TxKind::ModelTransmission => "ModelTransmission",
            TxKind::ModelTraining => "ModelTraining",
            TxKind::ModelAggregation => "ModelAggregation",
            TxKind::Settlement => "Settlement",
            TxKind::PayChannelExecute => "PayChannelExecute",
            TxKind::Publish => "Publish",
            TxKind::Commit => "Commit",
            TxKind::Deploy => "Deploy",
            TxKind::Update => "Update",
            TxKind::Settle => "Settle",
        }
    }
}

impl fmt::Display for TxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TxKind {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<Self> {
        TxKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LedgerError::UnknownKind(s.to_string()))
    }
}

/// Gas units plus the historical Ether and USD prices quoted for them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GasRow {
    pub gas: u64,
    pub ether: f64,
    pub usd: f64,
}

/// Gwei per Ether.
pub const GWEI_PER_ETHER: f64 = 1e9;
/// Gwei per US dollar at the historical exchange rate.
pub const GWEI_PER_USD: f64 = 246_940.5627;

pub fn gwei_to_ether(gwei: f64) -> f64 {
    gwei / GWEI_PER_ETHER
}

pub fn gwei_to_usd(gwei: f64) -> f64 {
    gwei / GWEI_PER_USD
}

pub fn ether_to_usd(ether: f64) -> f64 {
    gwei_to_usd(ether * GWEI_PER_ETHER)
}

/// Cost of `gas` units at `price_gwei` per unit, in Ether.
pub fn gas_to_ether(gas: u64, price_gwei: f64) -> f64 {
    gwei_to_ether(gas as f64 * price_gwei)
}

/// Gas cost per transaction kind.  A kind may carry several measured rows;
/// the `n`-th transaction of that kind within one deal is charged row
/// `n mod rows`, and [`GasSchedule::charge_gas`] quotes the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GasSchedule {
    rows: BTreeMap<TxKind, Vec<GasRow>>,
}

const fn row(gas: u64, ether_e5: f64, usd: f64) -> GasRow {
    GasRow {
        gas,
        ether: ether_e5 * 1e-5,
        usd,
    }
}

const MEASURED_ROWS: [(TxKind, GasRow); 23] = [
    (TxKind::ContractRegistry, row(1_459_430, 15.9, 0.0723)),
    (TxKind::AddWorker, row(452_467, 45.2, 0.0692)),
    (TxKind::AddWorker, row(452_545, 45.2, 0.0692)),
    (TxKind::AddWorker, row(452_436, 45.2, 0.0692)),
    (TxKind::AddWorker, row(452_545, 45.2, 0.0692)),
    (TxKind::AddWorker, row(452_436, 45.2, 0.0692)),
    (TxKind::ModelTransmission, row(19_374, 19.3, 0.1621)),
    (TxKind::ModelTransmission, row(243_482, 24.3, 0.0902)),
    (TxKind::ModelTransmission, row(228_779, 22.3, 0.1121)),
    (TxKind::ModelTransmission, row(253_924, 25.3, 0.0951)),
    (TxKind::ModelTransmission, row(263_924, 19.3, 0.0571)),
    (TxKind::ModelTraining, row(223_924, 22.3, 0.1021)),
    (TxKind::ModelTraining, row(253_924, 25.3, 0.0951)),
    (TxKind::ModelTraining, row(193_924, 19.3, 0.0571)),
    (TxKind::ModelTraining, row(253_924, 25.3, 0.0951)),
    (TxKind::ModelTraining, row(253_924, 19.3, 0.0571)),
    (TxKind::ModelAggregation, row(324_942, 32.4, 0.0766)),
    (TxKind::ModelAggregation, row(283_445, 22.4, 0.0408)),
    (TxKind::ModelAggregation, row(214_939, 21.4, 0.0709)),
    (TxKind::ModelAggregation, row(253_924, 25.3, 0.0951)),
    (TxKind::ModelAggregation, row(193_924, 19.3, 0.0571)),
    (TxKind::Settlement, row(212_559, 21.3, 0.0712)),
    (TxKind::PayChannelExecute, row(212_538, 21.2, 0.0702)),
];

impl GasSchedule {
    pub fn new(rows: BTreeMap<TxKind, Vec<GasRow>>) -> Result<Self> {
        for (kind, rs) in &rows {
            if rs.is_empty() || rs.iter().any(|r| r.gas == 0) {
                return Err(LedgerError::NonPositiveGas(*kind));
            }
        }
        Ok(Self { rows })
    }

    /// The measured contract costs, one entry per measured row, in table
    /// order.
    pub fn measured_rows() -> &'static [(TxKind, GasRow)] {
        &MEASURED_ROWS
    }

    /// Only the kinds with measured costs.
    pub fn measured() -> Self {
        let mut rows: BTreeMap<TxKind, Vec<GasRow>> = BTreeMap::new();
        for (kind, r) in MEASURED_ROWS {
            rows.entry(kind).or_default().push(r);
        }
        Self { rows }
    }

    /// Measured kinds plus the lifecycle kinds, which borrow the cost of
    /// the closest measured contract call.
    pub fn standard() -> Self {
        let mut s = Self::measured();
        let alias = |s: &Self, k: TxKind| s.rows[&k].clone();
        let registry = alias(&s, TxKind::ContractRegistry);
        let settlement = alias(&s, TxKind::Settlement);
        let worker = vec![s.rows[&TxKind::AddWorker][0]];
        s.rows.insert(TxKind::Publish, registry.clone());
        s.rows.insert(TxKind::Deploy, registry);
        s.rows.insert(TxKind::Update, worker);
        s.rows.insert(TxKind::Commit, settlement.clone());
        s.rows.insert(TxKind::Settle, settlement);
        s
    }

    pub fn rows(&self, kind: TxKind) -> Result<&[GasRow]> {
        self.rows
            .get(&kind)
            .map(Vec::as_slice)
            .ok_or_else(|| LedgerError::UnknownKind(kind.name().to_string()))
    }

    pub fn row(&self, kind: TxKind, slot: usize) -> Result<GasRow> {
        let rows = self.rows(kind)?;
        Ok(rows[slot % rows.len()])
    }

    pub fn charge_gas(&self, kind: TxKind) -> Result<u64> {
        Ok(self.rows(kind)?[0].gas)
    }

    pub fn kinds(&self) -> impl Iterator<Item = TxKind> + '_ {
        self.rows.keys().copied()
    }
}

impl Default for GasSchedule {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transaction {
    pub kind: TxKind,
    pub sender: String,
    pub payload_hash: Digest,
    pub nonce: u64,
    /// Which measured gas row this transaction is charged.
    pub gas_slot: usize,
    /// Set by [`Chain::submit_tx`].
    pub gas_used: u64,
}

impl Transaction {
    pub fn new(kind: TxKind, sender: impl Into<String>, payload_hash: Digest, nonce: u64) -> Self {
        Self {
            kind,
            sender: sender.into(),
            payload_hash,
            nonce,
            gas_slot: 0,
            gas_used: 0,
        }
    }

    pub fn with_gas_slot(mut self, slot: usize) -> Self {
        self.gas_slot = slot;
        self
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("transaction serializes")
    }

    pub fn id(&self) -> Digest {
        Digest::of(&self.canonical_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest,
    pub nonce: u64,
    pub miner: String,
    pub txs: Vec<Transaction>,
    pub block_hash: Digest,
}

impl Block {
    pub fn body_digest(&self) -> Digest {
        let mut h = Sha256::new();
        for tx in &self.txs {
            h.update(tx.id().0);
        }
        Digest(h.finalize().into())
    }

    fn header_hash(height: u64, prev: &Digest, nonce: u64, miner: &str, body: &Digest) -> Digest {
        let mut h = Sha256::new();
        h.update(height.to_le_bytes());
        h.update(prev.0);
        h.update(nonce.to_le_bytes());
        h.update((miner.len() as u64).to_le_bytes());
        h.update(miner.as_bytes());
        h.update(body.0);
        Digest(h.finalize().into())
    }

    /// Recomputes the hash from the current header and body.
    pub fn compute_hash(&self) -> Digest {
        Self::header_hash(
            self.height,
            &self.prev_hash,
            self.nonce,
            &self.miner,
            &self.body_digest(),
        )
    }

    pub fn tx_ids(&self) -> Vec<Digest> {
        self.txs.iter().map(Transaction::id).collect()
    }
}

/// A freshly mined block plus the number of nonces tried.
#[derive(Clone, Debug, PartialEq)]
pub struct Mined {
    pub block: Block,
    pub attempts: u64,
}

fn mine(height: u64, prev: Digest, miner: &str, txs: Vec<Transaction>, difficulty: u32) -> Mined {
    let mut block = Block {
        height,
        prev_hash: prev,
        nonce: 0,
        miner: miner.to_string(),
        txs,
        block_hash: Digest::ZERO,
    };
    let body = block.body_digest();
    let start = {
        let mut h = Sha256::new();
        h.update(miner.as_bytes());
        h.update(height.to_le_bytes());
        h.update(prev.0);
        let d: [u8; 32] = h.finalize().into();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    };
    let mut nonce = start;
    let mut attempts = 0;
    loop {
        attempts += 1;
        let hash = Block::header_hash(height, &prev, nonce, miner, &body);
        if hash.leading_zero_bits() >= difficulty {
            block.nonce = nonce;
            block.block_hash = hash;
            return Mined { block, attempts };
        }
        nonce = nonce.wrapping_add(1);
    }
}

/// One miner's acknowledgement of a candidate block.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Ack {
    pub miner: String,
    pub block: Digest,
}

/// Picks the candidate with the most distinct acknowledging miners; ties
/// go to the lexicographically smallest block hash.  Independent of the
/// order of both arguments.
pub fn choose_fork_winner(candidates: &[Block], acks: &[Ack]) -> Result<Digest> {
    if candidates.is_empty() {
        return Err(LedgerError::NoCandidates);
    }
    let votes: BTreeSet<(&Digest, &str)> = acks.iter().map(|a| (&a.block, a.miner.as_str())).collect();
    let count = |h: &Digest| votes.iter().filter(|(b, _)| *b == h).count();
    candidates
        .iter()
        .map(|b| (count(&b.block_hash), std::cmp::Reverse(b.block_hash)))
        .max()
        .map(|(_, std::cmp::Reverse(h))| h)
        .ok_or(LedgerError::NoCandidates)
}

/// Each miner acknowledges one candidate, chosen by a seeded draw.
pub fn simulate_acks(miners: &[String], candidates: &[Block], seed: u64) -> Vec<Ack> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<Digest> = candidates.iter().map(|b| b.block_hash).collect();
    sorted.sort();
    let mut rng = seed::rng(seed);
    miners
        .iter()
        .map(|m| Ack {
            miner: m.clone(),
            block: sorted[rng.random_range(0..sorted.len())],
        })
        .collect()
}

/// One structural problem found by [`Chain::validate_chain`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    HashMismatch { height: u64 },
    InsufficientWork { height: u64 },
    BrokenLink { height: u64 },
    HeightMismatch { height: u64 },
    DanglingPayload { height: u64, tx: Digest },
    DuplicateTx { height: u64, tx: Digest },
    ZeroGas { height: u64, tx: Digest },
    GenesisMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub difficulty: u32,
    pub max_txs_per_block: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            difficulty: DEFAULT_DIFFICULTY,
            max_txs_per_block: DEFAULT_MAX_TXS_PER_BLOCK,
        }
    }
}

/// Single-writer chain state.  The blob store is shared and may be filled
/// concurrently.
#[derive(Debug)]
pub struct Chain {
    config: ChainConfig,
    schedule: GasSchedule,
    blobs: Arc<BlobStore>,
    blocks: HashMap<Digest, Block>,
    genesis: Digest,
    tip: Digest,
    pool: Vec<Transaction>,
    included: HashSet<Digest>,
    accounts: BTreeSet<String>,
    orphans: Vec<Digest>,
}

impl Chain {
    pub fn new(config: ChainConfig, schedule: GasSchedule, blobs: Arc<BlobStore>) -> Result<Self> {
        if config.difficulty > MAX_DIFFICULTY {
            return Err(LedgerError::Difficulty(config.difficulty));
        }
        if config.max_txs_per_block == 0 {
            return Err(LedgerError::InvalidBlock("max_txs_per_block must be >= 1".into()));
        }
        let genesis = mine(0, Digest::ZERO, "genesis", Vec::new(), config.difficulty).block;
        let hash = genesis.block_hash;
        let mut blocks = HashMap::new();
        blocks.insert(hash, genesis);
        Ok(Self {
            config,
            schedule,
            blobs,
            blocks,
            genesis: hash,
            tip: hash,
            pool: Vec::new(),
            included: HashSet::new(),
            accounts: BTreeSet::new(),
            orphans: Vec::new(),
        })
    }

    pub fn config(&self) -> ChainConfig {
        self.config
    }

    pub fn schedule(&self) -> &GasSchedule {
        &self.schedule
    }

    pub fn blobs(&self) -> &Arc<BlobStore> {
        &self.blobs
    }

    pub fn genesis(&self) -> &Block {
        &self.blocks[&self.genesis]
    }

    pub fn tip(&self) -> &Block {
        &self.blocks[&self.tip]
    }

    pub fn height(&self) -> u64 {
        self.tip().height
    }

    pub fn block(&self, hash: &Digest) -> Option<&Block> {
        self.blocks.get(hash)
    }

    /// Test hook for simulating tampering with stored blocks.
    #[doc(hidden)]
    pub fn block_mut(&mut self, hash: &Digest) -> Option<&mut Block> {
        self.blocks.get_mut(hash)
    }

    pub fn pool(&self) -> &[Transaction] {
        &self.pool
    }

    /// Hashes of blocks that lost a fork.
    pub fn orphans(&self) -> &[Digest] {
        &self.orphans
    }

    pub fn register_account(&mut self, id: impl Into<String>) {
        self.accounts.insert(id.into());
    }

    pub fn is_registered(&self, id: &str) -> bool {
        self.accounts.contains(id)
    }

    /// Checks a transaction, fixes its gas from the schedule, stores its
    /// canonical record as a blob and queues it.
    pub fn submit_tx(&mut self, mut tx: Transaction) -> Result<Digest> {
        if !self.accounts.contains(&tx.sender) {
            return Err(LedgerError::UnknownSender(tx.sender));
        }
        if !self.blobs.contains(&tx.payload_hash) {
            return Err(LedgerError::DanglingPayload(tx.payload_hash));
        }
        tx.gas_used = self.schedule.row(tx.kind, tx.gas_slot)?.gas;
        let id = tx.id();
        if self.included.contains(&id) || self.pool.iter().any(|p| p.id() == id) {
            return Err(LedgerError::DuplicateTx(id));
        }
        self.blobs.store(&tx.canonical_bytes());
        self.pool.push(tx);
        Ok(id)
    }

    /// Mines a block on the tip from the front of the pool without
    /// committing it.
    pub fn mine_candidate(&self, miner: &str) -> Mined {
        let n = self.pool.len().min(self.config.max_txs_per_block);
        self.mine_candidate_with(miner, self.pool[..n].to_vec())
    }

    /// Mines a block on the tip carrying exactly `txs`.
    pub fn mine_candidate_with(&self, miner: &str, txs: Vec<Transaction>) -> Mined {
        let tip = self.tip();
        mine(tip.height + 1, tip.block_hash, miner, txs, self.config.difficulty)
    }

    pub fn mine_block(&mut self, miner: &str) -> Result<Mined> {
        let mined = self.mine_candidate(miner);
        self.commit(mined.block.clone())?;
        Ok(mined)
    }

    fn check_candidate(&self, block: &Block) -> Result<()> {
        let tip = self.tip();
        if block.prev_hash != tip.block_hash {
            return Err(LedgerError::InvalidBlock(format!(
                "block {} does not extend the tip",
                block.block_hash
            )));
        }
        if block.height != tip.height + 1 {
            return Err(LedgerError::InvalidBlock(format!(
                "height {} after {}",
                block.height, tip.height
            )));
        }
        if block.compute_hash() != block.block_hash {
            return Err(LedgerError::InvalidBlock("hash mismatch".into()));
        }
        if block.block_hash.leading_zero_bits() < self.config.difficulty {
            return Err(LedgerError::InvalidBlock("insufficient work".into()));
        }
        let mut seen = HashSet::new();
        for tx in &block.txs {
            let id = tx.id();
            if self.included.contains(&id) || !seen.insert(id) {
                return Err(LedgerError::DuplicateTx(id));
            }
            if !self.blobs.contains(&tx.payload_hash) {
                return Err(LedgerError::DanglingPayload(tx.payload_hash));
            }
            if tx.gas_used == 0 {
                return Err(LedgerError::InvalidBlock(format!("tx {id} has no gas")));
            }
        }
        Ok(())
    }

    /// Appends a valid block to the tip and drops its transactions from the
    /// pool.
    pub fn commit(&mut self, block: Block) -> Result<()> {
        self.check_candidate(&block)?;
        let ids: HashSet<Digest> = block.txs.iter().map(Transaction::id).collect();
        self.pool.retain(|t| !ids.contains(&t.id()));
        self.included.extend(ids);
        self.tip = block.block_hash;
        self.blocks.insert(block.block_hash, block);
        Ok(())
    }

    /// Resolves competing blocks at the next height.  All candidates are
    /// checked before anything changes; the winner is committed, losers are
    /// kept as orphans and their transactions stay in the pool.
    pub fn resolve_fork(&mut self, candidates: Vec<Block>, acks: &[Ack]) -> Result<Digest> {
        for c in &candidates {
            self.check_candidate(c)?;
        }
        let winner = choose_fork_winner(&candidates, acks)?;
        let mut losers = Vec::new();
        for c in candidates {
            if c.block_hash == winner {
                self.commit(c)?;
            } else {
                losers.push(c);
            }
        }
        for l in losers {
            if !self.blocks.contains_key(&l.block_hash) {
                self.orphans.push(l.block_hash);
                self.blocks.insert(l.block_hash, l);
            }
        }
        Ok(winner)
    }

    /// Blocks from genesis to tip.  Stops early at a missing parent.
    pub fn main_path(&self) -> Vec<&Block> {
        let mut path = Vec::new();
        let mut cur = self.blocks.get(&self.tip);
        while let Some(b) = cur {
            path.push(b);
            if b.height == 0 {
                break;
            }
            cur = self.blocks.get(&b.prev_hash);
        }
        path.reverse();
        path
    }

    pub fn main_path_txs(&self) -> impl Iterator<Item = &Transaction> {
        self.main_path().into_iter().flat_map(|b| b.txs.iter())
    }

    /// Every structural problem on the main path.
    pub fn validate_chain(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let path = self.main_path();
        match path.first() {
            Some(g) if g.block_hash == self.genesis && g.height == 0 => {}
            Some(g) => {
                out.push(Violation::BrokenLink { height: g.height });
                if g.height == 0 {
                    out.push(Violation::GenesisMismatch);
                }
            }
            None => out.push(Violation::GenesisMismatch),
        }
        let mut seen = HashSet::new();
        let mut parent: Option<&Block> = None;
        for b in &path {
            let h = b.height;
            if b.compute_hash() != b.block_hash {
                out.push(Violation::HashMismatch { height: h });
            }
            if b.block_hash.leading_zero_bits() < self.config.difficulty {
                out.push(Violation::InsufficientWork { height: h });
            }
            if let Some(p) = parent {
                if b.prev_hash != p.block_hash {
                    out.push(Violation::BrokenLink { height: h });
                }
                if b.height != p.height + 1 {
                    out.push(Violation::HeightMismatch { height: h });
                }
            }
            for tx in &b.txs {
                let id = tx.id();
                if !seen.insert(id) {
                    out.push(Violation::DuplicateTx { height: h, tx: id });
                }
                if !self.blobs.contains(&tx.payload_hash) {
                    out.push(Violation::DanglingPayload { height: h, tx: id });
                }
                if tx.gas_used == 0 {
                    out.push(Violation::ZeroGas { height: h, tx: id });
                }
            }
            parent = Some(b);
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    /// One JSON line per main-path block.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for b in self.main_path() {
            let rec = ExportedBlock {
                height: b.height,
                prev_hash: b.prev_hash,
                block_hash: b.block_hash,
                nonce: b.nonce,
                miner: b.miner.clone(),
                tx_ids: b.tx_ids(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("block serializes"));
            out.push('\n');
        }
        out
    }

    /// Rebuilds a chain from an export, fetching each transaction record
    /// from `blobs`.  Block hashes and work are re-checked on the way in.
    pub fn from_jsonl(
        text: &str,
        config: ChainConfig,
        schedule: GasSchedule,
        blobs: Arc<BlobStore>,
    ) -> Result<Self> {
        if config.difficulty > MAX_DIFFICULTY {
            return Err(LedgerError::Difficulty(config.difficulty));
        }
        let mut blocks = HashMap::new();
        let mut included = HashSet::new();
        let mut accounts = BTreeSet::new();
        let mut genesis = None;
        let mut tip = None;
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: ExportedBlock = serde_json::from_str(line)
                .map_err(|e| LedgerError::Format(format!("line {}: {e}", lineno + 1)))?;
            let txs = rec
                .tx_ids
                .iter()
                .map(|id| {
                    let bytes = blobs.fetch(id)?;
                    let tx: Transaction = serde_json::from_slice(&bytes)
                        .map_err(|e| LedgerError::Format(format!("tx {id}: {e}")))?;
                    if tx.id() != *id {
                        return Err(LedgerError::Format(format!("tx record {id} altered")));
                    }
                    Ok(tx)
                })
                .collect::<Result<Vec<_>>>()?;
            for tx in &txs {
                accounts.insert(tx.sender.clone());
                included.insert(tx.id());
            }
            let block = Block {
                height: rec.height,
                prev_hash: rec.prev_hash,
                nonce: rec.nonce,
                miner: rec.miner,
                txs,
                block_hash: rec.block_hash,
            };
            if block.compute_hash() != block.block_hash {
                return Err(LedgerError::InvalidBlock(format!(
                    "height {} hash mismatch",
                    block.height
                )));
            }
            if genesis.is_none() {
                genesis = Some(block.block_hash);
            }
            tip = Some(block.block_hash);
            blocks.insert(block.block_hash, block);
        }
        let (genesis, tip) = genesis
            .zip(tip)
            .ok_or_else(|| LedgerError::Format("empty chain export".into()))?;
        let chain = Self {
            config,
            schedule,
            blobs,
            blocks,
            genesis,
            tip,
            pool: Vec::new(),
            included,
            accounts,
            orphans: Vec::new(),
        };
        if let Err(v) = chain.validate_chain() {
            return Err(LedgerError::InvalidBlock(format!("{v:?}")));
        }
        Ok(chain)
    }
}

#[derive(Serialize, Deserialize)]
struct ExportedBlock {
    height: u64,
    prev_hash: Digest,
    block_hash: Digest,
    nonce: u64,
    miner: String,
    tx_ids: Vec<Digest>,
}

/// Gas and historical price totals per kind over a chain's main path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GasTotals {
    pub per_kind: BTreeMap<TxKind, KindTotals>,
    pub gas: u64,
    pub ether: f64,
    pub usd: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindTotals {
    pub count: usize,
    pub gas: u64,
    pub ether: f64,
    pub usd: f64,
}

impl GasTotals {
    pub fn add(&mut self, kind: TxKind, row: GasRow) {
        let e = self.per_kind.entry(kind).or_default();
        e.count += 1;
        e.gas += row.gas;
        e.ether += row.ether;
        e.usd += row.usd;
        self.gas += row.gas;
        self.ether += row.ether;
        self.usd += row.usd;
    }

    pub fn of_txs<'a>(
        txs: impl IntoIterator<Item = &'a Transaction>,
        schedule: &GasSchedule,
    ) -> Result<Self> {
        let mut t = Self::default();
        for tx in txs {
            t.add(tx.kind, schedule.row(tx.kind, tx.gas_slot)?);
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain(difficulty: u32) -> Chain {
        let mut c = Chain::new(
            ChainConfig {
                difficulty,
                max_txs_per_block: 4,
            },
            GasSchedule::standard(),
            Arc::new(BlobStore::new()),
        )
        .unwrap();
        c.register_account("alice");
        c
    }

    fn submit(c: &mut Chain, kind: TxKind, payload: &[u8], nonce: u64) -> Digest {
        let d = c.blobs().store(payload);
        c.submit_tx(Transaction::new(kind, "alice", d, nonce)).unwrap()
    }

    #[test]
    fn reference_digests() {
        assert_eq!(
            Digest::of(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            Digest::of(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let store = BlobStore::new();
        assert_eq!(store.store(b""), Digest::of(b""));
    }

    #[test]
    fn blob_round_trip_and_idempotence() {
        let s = BlobStore::new();
        let a = s.store(b"payload");
        assert_eq!(s.store(b"payload"), a);
        assert_eq!(s.len(), 1);
        assert_eq!(s.fetch(&a).unwrap(), b"payload");
        assert_eq!(
            s.fetch(&Digest::of(b"other")),
            Err(LedgerError::BlobNotFound(Digest::of(b"other")))
        );
    }

    #[test]
    fn blob_store_concurrent_inserts() {
        use rayon::prelude::*;
        let s = BlobStore::new();
        (0..1000u32).into_par_iter().for_each(|i| {
            s.store(&(i % 250).to_le_bytes());
        });
        assert_eq!(s.len(), 250);
    }

    #[test]
    fn blob_store_persists() {
        let dir = tempfile::tempdir().unwrap();
        let s = BlobStore::new();
        let d = s.store(b"hello");
        s.persist(dir.path()).unwrap();
        assert!(dir.path().join(d.to_hex()).exists());
        let loaded = BlobStore::load(dir.path()).unwrap();
        assert_eq!(loaded.fetch(&d).unwrap(), b"hello");
        std::fs::write(dir.path().join(d.to_hex()), b"tampered").unwrap();
        assert!(BlobStore::load(dir.path()).is_err());
    }

    #[test]
    fn leading_zero_bits() {
        let mut d = [0xffu8; 32];
        assert_eq!(Digest(d).leading_zero_bits(), 0);
        d[0] = 0;
        d[1] = 0x1f;
        assert_eq!(Digest(d).leading_zero_bits(), 11);
        assert_eq!(Digest::ZERO.leading_zero_bits(), 256);
    }

    #[test]
    fn digest_hex_round_trip() {
        let d = Digest::of(b"x");
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, format!("\"{}\"", d.to_hex()));
        assert_eq!(serde_json::from_str::<Digest>(&json).unwrap(), d);
        assert!(Digest::from_hex("zz").is_err());
    }

    #[test]
    fn submit_checks() {
        let mut c = chain(0);
        submit(&mut c, TxKind::ModelTransmission, b"m", 0);
        assert_eq!(c.pool().len(), 1);
        assert_eq!(c.pool()[0].gas_used, 19_374);
        let dangling = Transaction::new(TxKind::ModelTransmission, "alice", Digest::of(b"nope"), 1);
        assert_eq!(
            c.submit_tx(dangling),
            Err(LedgerError::DanglingPayload(Digest::of(b"nope")))
        );
        let d = c.blobs().store(b"m2");
        let stranger = Transaction::new(TxKind::ModelTraining, "mallory", d, 0);
        assert!(matches!(c.submit_tx(stranger), Err(LedgerError::UnknownSender(_))));
        let dup = Transaction::new(TxKind::ModelTransmission, "alice", Digest::of(b"m"), 0);
        assert!(matches!(c.submit_tx(dup), Err(LedgerError::DuplicateTx(_))));
        assert_eq!(c.pool().len(), 1);
    }

    #[test]
    fn unknown_kinds() {
        assert_eq!(
            "Mint".parse::<TxKind>(),
            Err(LedgerError::UnknownKind("Mint".into()))
        );
        assert!(GasSchedule::measured().charge_gas(TxKind::Publish).is_err());
        let mut c = Chain::new(
            ChainConfig::default(),
            GasSchedule::measured(),
            Arc::new(BlobStore::new()),
        )
        .unwrap();
        c.register_account("a");
        let d = c.blobs().store(b"x");
        assert!(matches!(
            c.submit_tx(Transaction::new(TxKind::Commit, "a", d, 0)),
            Err(LedgerError::UnknownKind(_))
        ));
        for k in TxKind::ALL {
            assert_eq!(k.name().parse::<TxKind>().unwrap(), k);
        }
    }

    #[test]
    fn gas_schedule_rows() {
        let s = GasSchedule::standard();
        assert_eq!(s.charge_gas(TxKind::ContractRegistry).unwrap(), 1_459_430);
        assert_eq!(s.charge_gas(TxKind::AddWorker).unwrap(), 452_467);
        assert_eq!(s.row(TxKind::AddWorker, 6).unwrap().gas, 452_545);
        for k in TxKind::ALL {
            assert!(s.charge_gas(k).unwrap() > 0);
        }
        let mut bad = BTreeMap::new();
        bad.insert(TxKind::Publish, vec![GasRow { gas: 0, ether: 0.0, usd: 0.0 }]);
        assert_eq!(GasSchedule::new(bad), Err(LedgerError::NonPositiveGas(TxKind::Publish)));
    }

    #[test]
    fn measured_table_totals() {
        let rows = GasSchedule::measured_rows();
        assert_eq!(rows.len(), 23);
        let total: u64 = rows.iter().map(|(_, r)| r.gas).sum();
        // independent column sums of the measured table
        let groups: [&[u64]; 7] = [
            &[1459430],
            &[452467, 452545, 452436, 452545, 452436],
            &[19374, 243482, 228779, 253924, 263924],
            &[223924, 253924, 193924, 253924, 253924],
            &[324942, 283445, 214939, 253924, 193924],
            &[212559],
            &[212538],
        ];
        let expected: u64 = groups.iter().flat_map(|g| g.iter()).sum();
        assert_eq!(total, expected);
        assert_eq!(groups[1].iter().sum::<u64>(), 2_262_429);
    }

    #[test]
    fn conversions() {
        assert_eq!(gwei_to_ether(1e9), 1.0);
        assert!((gwei_to_usd(246_940.5627) - 1.0).abs() < 1e-15);
        assert!((ether_to_usd(1.0) - 1e9 / 246_940.5627).abs() < 1e-9);
        assert!((gas_to_ether(21_000, 2.0) - 4.2e-5).abs() < 1e-18);
    }

    #[test]
    fn difficulty_zero_takes_first_nonce() {
        let mut c = chain(0);
        let m = c.mine_block("m1").unwrap();
        assert_eq!(m.attempts, 1);
    }

    #[test]
    fn mean_attempts_track_difficulty() {
        // attempts are geometric with p = 2^-8
        let total: u64 = (0..100)
            .map(|i| mine(1, Digest::of(&[i as u8]), "m", Vec::new(), 8).attempts)
            .sum();
        let mean = total as f64 / 100.0;
        assert!((128.0..=384.0).contains(&mean), "{mean}");
    }

    #[test]
    fn difficulty_eight_first_byte_zero() {
        let mut c = chain(8);
        for i in 0..3 {
            submit(&mut c, TxKind::ModelTraining, &[i], i as u64);
            let m = c.mine_block("m1").unwrap();
            assert_eq!(m.block.block_hash.0[0], 0);
        }
        assert_eq!(c.genesis().block_hash.0[0], 0);
    }

    #[test]
    fn difficulty_cap() {
        assert_eq!(
            Chain::new(
                ChainConfig {
                    difficulty: 21,
                    max_txs_per_block: 1
                },
                GasSchedule::standard(),
                Arc::new(BlobStore::new())
            )
            .unwrap_err(),
            LedgerError::Difficulty(21)
        );
    }

    #[test]
    fn mining_drains_pool_up_to_cap() {
        let mut c = chain(4);
        for i in 0..6u8 {
            submit(&mut c, TxKind::ModelTraining, &[i], i as u64);
        }
        let b = c.mine_block("m").unwrap().block;
        assert_eq!(b.txs.len(), 4);
        assert_eq!(c.pool().len(), 2);
        c.mine_block("m").unwrap();
        assert!(c.pool().is_empty());
        assert_eq!(c.height(), 2);
    }

    #[test]
    fn five_block_chain_validates_and_detects_tampering() {
        let mut c = chain(6);
        let mut hashes = Vec::new();
        for i in 0..5u8 {
            submit(&mut c, TxKind::ModelAggregation, &[i, 1], i as u64);
            hashes.push(c.mine_block("m").unwrap().block.block_hash);
        }
        assert_eq!(c.validate_chain(), Ok(()));

        let payload = c.block(&hashes[1]).unwrap().txs[0].payload_hash;
        c.blobs().evict(&payload);
        let v = c.validate_chain().unwrap_err();
        assert!(matches!(v[0], Violation::DanglingPayload { height: 2, .. }));
        c.blobs().store(&[1, 1]);
        assert_eq!(c.validate_chain(), Ok(()));

        c.block_mut(&hashes[2]).unwrap().txs[0].nonce ^= 1;
        let v = c.validate_chain().unwrap_err();
        assert!(v.contains(&Violation::HashMismatch { height: 3 }));
    }

    #[test]
    fn fork_resolution_rules() {
        let mut c = chain(4);
        for i in 0..4u8 {
            submit(&mut c, TxKind::ModelTraining, &[i], i as u64);
        }
        let a = c.mine_candidate("a").block;
        let b = c.mine_candidate_with("b", c.pool()[..2].to_vec()).block;
        assert_eq!(choose_fork_winner(std::slice::from_ref(&a), &[]).unwrap(), a.block_hash);

        let acks = |h: Digest, n: usize| {
            (0..n)
                .map(|i| Ack {
                    miner: format!("m{i}"),
                    block: h,
                })
                .collect::<Vec<_>>()
        };
        let mut votes = acks(a.block_hash, 2);
        votes.extend(acks(b.block_hash, 3));
        assert_eq!(choose_fork_winner(&[a.clone(), b.clone()], &votes).unwrap(), b.block_hash);
        // duplicate votes from one miner count once
        let mut stuffed: Vec<Ack> = std::iter::repeat_n(acks(a.block_hash, 1).remove(0), 5).collect();
        stuffed.extend(acks(b.block_hash, 2));
        assert_eq!(choose_fork_winner(&[a.clone(), b.clone()], &stuffed).unwrap(), b.block_hash);

        let tie = choose_fork_winner(&[a.clone(), b.clone()], &[]).unwrap();
        assert_eq!(tie, a.block_hash.min(b.block_hash));
        for _ in 0..5 {
            assert_eq!(choose_fork_winner(&[b.clone(), a.clone()], &[]).unwrap(), tie);
        }

        let winner = c.resolve_fork(vec![a.clone(), b.clone()], &votes).unwrap();
        assert_eq!(winner, b.block_hash);
        // the two transactions only the loser carried are back in the pool
        assert_eq!(c.pool().len(), 2);
        assert_eq!(c.orphans(), &[a.block_hash]);
        c.mine_block("a").unwrap();
        assert!(c.pool().is_empty());
        assert_eq!(c.validate_chain(), Ok(()));
    }

    #[test]
    fn invalid_candidate_rejected_before_resolution() {
        let mut c = chain(4);
        submit(&mut c, TxKind::ModelTraining, b"x", 0);
        let good = c.mine_candidate("a").block;
        let mut bad = c.mine_candidate("b").block;
        bad.nonce = bad.nonce.wrapping_add(1);
        let before = c.tip().block_hash;
        assert!(c.resolve_fork(vec![good, bad], &[]).is_err());
        assert_eq!(c.tip().block_hash, before);
        assert_eq!(c.pool().len(), 1);
        assert!(c.resolve_fork(vec![], &[]).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let mut c = chain(4);
        for i in 0..5u8 {
            submit(&mut c, TxKind::ModelTraining, &[i], i as u64);
            c.mine_block("m").unwrap();
        }
        let text = c.to_jsonl();
        assert_eq!(text.lines().count(), 6);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["height", "prev_hash", "block_hash", "nonce", "miner", "tx_ids"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        let back = Chain::from_jsonl(&text, c.config(), GasSchedule::standard(), c.blobs().clone())
            .unwrap();
        assert_eq!(back.to_jsonl(), text);
        assert_eq!(back.tip().txs, c.tip().txs);
    }

    #[test]
    fn gas_totals_follow_slots() {
        let mut c = chain(0);
        for slot in 0..5 {
            let d = c.blobs().store(&[slot as u8]);
            c.submit_tx(Transaction::new(TxKind::AddWorker, "alice", d, slot).with_gas_slot(slot as usize))
                .unwrap();
        }
        c.mine_block("m").unwrap();
        c.mine_block("m").unwrap();
        let t = GasTotals::of_txs(c.main_path_txs(), c.schedule()).unwrap();
        assert_eq!(t.gas, 2_262_429);
        assert_eq!(t.per_kind[&TxKind::AddWorker].count, 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn content_addressing(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let s = BlobStore::new();
            let d = s.store(&bytes);
            prop_assert_eq!(d, Digest::of(&bytes));
            prop_assert_eq!(s.fetch(&d).unwrap(), bytes);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fork_winner_ignores_arrival_order(
            seed in any::<u64>(),
            k in 1usize..5,
            rot in 0usize..5,
        ) {
            let mut c = chain(0);
            for i in 0..6u8 {
                submit(&mut c, TxKind::ModelTraining, &[i], i as u64);
            }
            let cands: Vec<Block> = (0..k)
                .map(|i| c.mine_candidate_with(&format!("m{i}"), c.pool()[..=i].to_vec()).block)
                .collect();
            let miners: Vec<String> = (0..7).map(|i| format!("v{i}")).collect();
            let acks = simulate_acks(&miners, &cands, seed);
            let w = choose_fork_winner(&cands, &acks).unwrap();
            let mut rotated = cands.clone();
            rotated.rotate_left(rot % k);
            let mut rev_acks = acks.clone();
            rev_acks.reverse();
            prop_assert_eq!(choose_fork_winner(&rotated, &rev_acks).unwrap(), w);
        }

        #[test]
        fn mined_sequences_with_forks_validate(ops in proptest::collection::vec(0u8..3, 1..12)) {
            let mut c = chain(2);
            let mut n = 0u64;
            for op in ops {
                submit(&mut c, TxKind::ModelTraining, &n.to_le_bytes(), n);
                n += 1;
                match op {
                    0 => { c.mine_block("x").unwrap(); }
                    1 => {
                        let a = c.mine_candidate("a").block;
                        let b = c.mine_candidate_with("b", Vec::new()).block;
                        let acks = simulate_acks(&["p".into(), "q".into(), "r".into()], &[a.clone(), b.clone()], n);
                        c.resolve_fork(vec![a, b], &acks).unwrap();
                    }
                    _ => {}
                }
            }
            prop_assert_eq!(c.validate_chain(), Ok(()));
        }
    }
}
