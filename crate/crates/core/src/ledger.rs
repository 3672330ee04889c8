//! Deterministic single-node ledger.
//!
//! Transactions are queued FIFO by [`Ledger::submit`] and executed when a
//! block is mined. Execution is all-or-nothing: a failing transaction is
//! still mined with a receipt carrying the error and its metered gas, but
//! leaves balances, HTLCs and contract state untouched.
//!
//! A transaction mined into block `H` executes at height `H`. HTLC claims
//! are accepted while `H < timeout_height`; refunds once `H >= timeout_height`.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authz_contract::{
    self, AuthzContract, CallEnv, ContractCall, ContractError, EventLog, Policy, RequestId,
};
use crate::crypto::{self, Address, Digest, Secret, ADDRESS_LEN};
use crate::storage;
use crate::{Amount, Height};

pub type TxId = Digest;
pub type HtlcId = Digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GasSchedule {
    pub base_tx: u64,
    pub per_byte: u64,
    pub per_storage_word: u64,
}

impl Default for GasSchedule {
    fn default() -> Self {
        Self { base_tx: 21_000, per_byte: 16, per_storage_word: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LedgerConfig {
    pub txs_per_block: usize,
    pub gas: GasSchedule,
    /// Debit `gas_used * gas_price` from the sender into the fee pool.
    pub charge_gas: bool,
    pub gas_price: u64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self { txs_per_block: 1, gas: GasSchedule::default(), charge_gas: false, gas_price: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Transfer,
    RecordHash,
    HtlcCreate,
    HtlcDeposit,
    HtlcClaim,
    HtlcRefund,
    ContractDeploy,
    ContractCall,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TxPayload {
    Transfer {
        to: Address,
        amount: Amount,
    },
    RecordHash {
        #[serde(default)]
        topic: String,
        value: Digest,
    },
    /// Creates an HTLC and, in the same transaction, records any number of
    /// hash commitments.
    HtlcCreate {
        payer: Address,
        payee: Address,
        amount: Amount,
        hash_lock: Digest,
        timeout_height: Height,
        #[serde(default)]
        commitments: Vec<Digest>,
    },
    HtlcDeposit {
        id: HtlcId,
    },
    HtlcClaim {
        id: HtlcId,
        preimage: Secret,
    },
    HtlcRefund {
        id: HtlcId,
    },
    ContractDeploy {
        policy: Policy,
    },
    ContractCall {
        contract: Address,
        call: ContractCall,
    },
}

impl TxPayload {
    pub fn kind(&self) -> TxKind {
        match self {
            Self::Transfer { .. } => TxKind::Transfer,
            Self::RecordHash { .. } => TxKind::RecordHash,
            Self::HtlcCreate { .. } => TxKind::HtlcCreate,
            Self::HtlcDeposit { .. } => TxKind::HtlcDeposit,
            Self::HtlcClaim { .. } => TxKind::HtlcClaim,
            Self::HtlcRefund { .. } => TxKind::HtlcRefund,
            Self::ContractDeploy { .. } => TxKind::ContractDeploy,
            Self::ContractCall { .. } => TxKind::ContractCall,
        }
    }

    /// Bytes charged at `per_byte`. Transfer recipient and value, and the
    /// target contract address, travel in the envelope and are not counted.
    pub fn calldata(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Self::Transfer { .. } => {}
            Self::RecordHash { topic, value } => {
                out.extend_from_slice(&value.0);
                out.extend_from_slice(topic.as_bytes());
            }
            Self::HtlcCreate { payer, payee, amount, hash_lock, timeout_height, commitments } => {
                out.extend_from_slice(&payer.0);
                out.extend_from_slice(&payee.0);
                out.extend_from_slice(&amount.to_be_bytes());
                out.extend_from_slice(&hash_lock.0);
                out.extend_from_slice(&timeout_height.to_be_bytes());
                for c in commitments {
                    out.extend_from_slice(&c.0);
                }
            }
            Self::HtlcDeposit { id } | Self::HtlcRefund { id } => out.extend_from_slice(&id.0),
            Self::HtlcClaim { id, preimage } => {
                out.extend_from_slice(&id.0);
                out.extend_from_slice(&preimage.0);
            }
            Self::ContractDeploy { policy } => out = authz_contract::deploy_calldata(policy),
            Self::ContractCall { call, .. } => out = call.calldata(),
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTx {
    pub sender: Address,
    /// Global submission sequence number; makes every tx id unique.
    pub seq: u64,
    pub payload: TxPayload,
}

impl LedgerTx {
    pub fn id(&self) -> TxId {
        let payload = serde_json::to_vec(&self.payload).expect("payload serializes");
        crypto::hash_concat([
            &b"authchain/tx"[..],
            &self.sender.0,
            &self.seq.to_be_bytes(),
            &payload,
        ])
    }
}

pub fn htlc_id_for(tx_id: &TxId) -> HtlcId {
    crypto::hash_concat([&b"authchain/htlc"[..], &tx_id.0])
}

pub fn contract_address_for(tx_id: &TxId) -> Address {
    let d = crypto::hash_concat([&b"authchain/contract"[..], &tx_id.0]);
    Address(d.0[..ADDRESS_LEN].try_into().expect("digest is 32 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HtlcState {
    Created,
    Deposited,
    Claimed,
    Refunded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Htlc {
    pub id: HtlcId,
    pub payer: Address,
    pub payee: Address,
    pub amount: Amount,
    pub hash_lock: Digest,
    pub timeout_height: Height,
    pub state: HtlcState,
    pub revealed_preimage: Option<Secret>,
    pub created_height: Height,
}

/// Storage words of a freshly created HTLC: payer, payee, amount,
/// hash_lock, timeout, state.
pub const HTLC_WORDS: u64 = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashRecord {
    pub submitter: Address,
    pub value: Digest,
    pub height: Height,
    pub topic: String,
    pub tx_id: TxId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum LedgerError {
    #[error("insufficient funds: need {needed}, have {available}")]
    InsufficientFunds { needed: Amount, available: Amount },
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("timeout height {timeout} is not after height {height}")]
    InvalidTimeout { timeout: Height, height: Height },
    #[error("unknown HTLC")]
    UnknownHtlc,
    #[error("HTLC is in state {0:?}")]
    WrongState(HtlcState),
    #[error("sender is not the HTLC payer")]
    NotPayer,
    #[error("preimage does not hash to the lock")]
    BadPreimage,
    #[error("HTLC claim window closed")]
    Expired,
    #[error("HTLC refund window not open yet")]
    NotYetExpired,
    #[error("unknown contract")]
    UnknownContract,
    #[error("contract: {0}")]
    Contract(#[from] ContractError),
    #[error("unknown transaction")]
    UnknownTx,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TxStatus {
    Success,
    Failed { error: LedgerError },
}

impl TxStatus {
    pub fn is_success(&self) -> bool {
        matches!(self, Self::Success)
    }

    pub fn into_result(self) -> Result<(), LedgerError> {
        match self {
            Self::Success => Ok(()),
            Self::Failed { error } => Err(error),
        }
    }
}

/// Itemized gas: `gas_used = base + calldata_gas + storage_gas`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GasReceipt {
    pub tx_id: TxId,
    pub payer: Address,
    pub base: u64,
    pub calldata_bytes: u64,
    pub calldata_gas: u64,
    pub storage_words: u64,
    pub storage_gas: u64,
    pub gas_used: u64,
}

impl GasReceipt {
    pub fn is_consistent(&self) -> bool {
        self.gas_used == self.base + self.calldata_gas + self.storage_gas
    }
}

pub fn meter(schedule: &GasSchedule, tx: &LedgerTx, new_words: u64) -> GasReceipt {
    let calldata_bytes = tx.payload.calldata().len() as u64;
    let calldata_gas = calldata_bytes * schedule.per_byte;
    let storage_gas = new_words * schedule.per_storage_word;
    GasReceipt {
        tx_id: tx.id(),
        payer: tx.sender,
        base: schedule.base_tx,
        calldata_bytes,
        calldata_gas,
        storage_words: new_words,
        storage_gas,
        gas_used: schedule.base_tx + calldata_gas + storage_gas,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub tx_id: TxId,
    pub height: Height,
    pub index: usize,
    pub kind: TxKind,
    #[serde(flatten)]
    pub status: TxStatus,
    pub gas: GasReceipt,
    /// HTLC, contract or request id created by this transaction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<Digest>,
    #[serde(default)]
    pub fee: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: Height,
    pub prev: Digest,
    pub txs: Vec<LedgerTx>,
    pub receipts: Vec<Receipt>,
    pub block_hash: Digest,
}

impl Block {
    pub fn compute_hash(height: Height, prev: &Digest, txs: &[LedgerTx], receipts: &[Receipt]) -> Digest {
        let mut parts: Vec<Vec<u8>> = vec![
            b"authchain/block".to_vec(),
            height.to_be_bytes().to_vec(),
            prev.0.to_vec(),
        ];
        for tx in txs {
            parts.push(tx.id().0.to_vec());
        }
        for r in receipts {
            parts.push(serde_json::to_vec(r).expect("receipt serializes"));
        }
        crypto::hash_concat(parts.iter().map(Vec::as_slice))
    }

    pub fn verify_hash(&self) -> bool {
        self.block_hash == Self::compute_hash(self.height, &self.prev, &self.txs, &self.receipts)
    }
}

/// Where value currently sits. Used for the conservation check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SupplyBreakdown {
    pub balances: Amount,
    pub htlc_escrow: Amount,
    pub contract_escrow: Amount,
    pub fees: Amount,
}

impl SupplyBreakdown {
    pub fn total(&self) -> Amount {
        self.balances + self.htlc_escrow + self.contract_escrow + self.fees
    }
}

#[derive(Debug, Clone)]
pub struct Ledger {
    config: LedgerConfig,
    genesis: BTreeMap<Address, Amount>,
    total_supply: Amount,
    blocks: Vec<Block>,
    pending: VecDeque<LedgerTx>,
    next_seq: u64,
    balances: BTreeMap<Address, Amount>,
    htlcs: BTreeMap<HtlcId, Htlc>,
    records: Vec<HashRecord>,
    contracts: BTreeMap<Address, AuthzContract>,
    receipts: BTreeMap<TxId, (Height, usize)>,
    fees: Amount,
}

struct Events<'a>(&'a [HashRecord]);

impl EventLog for Events<'_> {
    fn has_event(&self, topic: &str) -> bool {
        self.0.iter().any(|r| r.topic == topic)
    }
}

/// Outcome of executing one transaction against the state.
struct Applied {
    new_words: u64,
    created: Option<Digest>,
}

impl Ledger {
    pub fn new(config: LedgerConfig, genesis: impl IntoIterator<Item = (Address, Amount)>) -> Self {
        let mut alloc = BTreeMap::new();
        for (a, v) in genesis {
            *alloc.entry(a).or_insert(0) += v;
        }
        let total_supply = alloc.values().sum();
        let prev = Digest([0; 32]);
        let genesis_block = Block {
            height: 0,
            prev,
            txs: vec![],
            receipts: vec![],
            block_hash: Block::compute_hash(0, &prev, &[], &[]),
        };
        Self {
            config,
            balances: alloc.clone(),
            genesis: alloc,
            total_supply,
            blocks: vec![genesis_block],
            pending: VecDeque::new(),
            next_seq: 0,
            htlcs: BTreeMap::new(),
            records: Vec::new(),
            contracts: BTreeMap::new(),
            receipts: BTreeMap::new(),
            fees: 0,
        }
    }

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    pub fn height(&self) -> Height {
        self.blocks.last().expect("genesis block always present").height
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn balance(&self, who: &Address) -> Amount {
        self.balances.get(who).copied().unwrap_or(0)
    }

    pub fn total_supply(&self) -> Amount {
        self.total_supply
    }

    pub fn supply(&self) -> SupplyBreakdown {
        SupplyBreakdown {
            balances: self.balances.values().sum(),
            htlc_escrow: self
                .htlcs
                .values()
                .filter(|h| h.state == HtlcState::Deposited)
                .map(|h| h.amount)
                .sum(),
            contract_escrow: self.contracts.values().map(AuthzContract::escrowed).sum(),
            fees: self.fees,
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.supply().total() == self.total_supply
    }

    pub fn htlc(&self, id: &HtlcId) -> Option<&Htlc> {
        self.htlcs.get(id)
    }

    pub fn htlcs(&self) -> impl Iterator<Item = &Htlc> {
        self.htlcs.values()
    }

    pub fn contract(&self, address: &Address) -> Option<&AuthzContract> {
        self.contracts.get(address)
    }

    pub fn hash_records(&self) -> &[HashRecord] {
        &self.records
    }

    /// All records of `value`, in mining order.
    pub fn find_records(&self, value: &Digest) -> Vec<&HashRecord> {
        self.records.iter().filter(|r| r.value == *value).collect()
    }

    pub fn has_event(&self, topic: &str) -> bool {
        Events(&self.records).has_event(topic)
    }

    pub fn read_preimage(&self, id: &HtlcId) -> Result<Option<Secret>, LedgerError> {
        let h = self.htlcs.get(id).ok_or(LedgerError::UnknownHtlc)?;
        Ok(if h.state == HtlcState::Claimed { h.revealed_preimage } else { None })
    }

    pub fn read_request(
        &self,
        contract: &Address,
        id: &RequestId,
    ) -> Result<&authz_contract::AuthRequest, LedgerError> {
        let c = self.contracts.get(contract).ok_or(LedgerError::UnknownContract)?;
        Ok(c.read_request(id)?)
    }

    pub fn receipt(&self, tx_id: &TxId) -> Option<&Receipt> {
        let (h, i) = self.receipts.get(tx_id)?;
        self.blocks.get(*h as usize)?.receipts.get(*i)
    }

    pub fn receipts(&self) -> impl Iterator<Item = &Receipt> {
        self.blocks.iter().flat_map(|b| b.receipts.iter())
    }

    /// Value leaving `sender`'s balance if `payload` succeeds.
    fn outgoing_value(&self, sender: &Address, payload: &TxPayload) -> Amount {
        match payload {
            TxPayload::Transfer { amount, .. } => *amount,
            TxPayload::HtlcDeposit { id } => {
                self.htlcs.get(id).filter(|h| h.payer == *sender).map_or(0, |h| h.amount)
            }
            TxPayload::ContractCall { call, .. } => call.value(),
            _ => 0,
        }
    }

    fn precheck(&self, sender: &Address, payload: &TxPayload) -> Result<(), LedgerError> {
        match payload {
            TxPayload::Transfer { amount: 0, .. } => {
                return Err(LedgerError::InvalidPayload("zero-value transfer".into()))
            }
            TxPayload::HtlcCreate { amount, timeout_height, commitments, .. } => {
                if *amount == 0 {
                    return Err(LedgerError::InvalidPayload("zero-value HTLC".into()));
                }
                if commitments.len() > u8::MAX as usize {
                    return Err(LedgerError::InvalidPayload("too many commitments".into()));
                }
                if *timeout_height <= self.height() {
                    return Err(LedgerError::InvalidTimeout {
                        timeout: *timeout_height,
                        height: self.height(),
                    });
                }
            }
            TxPayload::ContractDeploy { policy } => policy.validate()?,
            _ => {}
        }
        let value = self.outgoing_value(sender, payload);
        if value > 0 {
            let queued: Amount = self
                .pending
                .iter()
                .filter(|t| t.sender == *sender)
                .map(|t| self.outgoing_value(sender, &t.payload))
                .sum();
            let available = self.balance(sender).saturating_sub(queued);
            if available < value {
                return Err(LedgerError::InsufficientFunds { needed: value, available });
            }
        }
        Ok(())
    }

    /// Queues a transaction. Only balance and payload shape are checked
    /// here; state-dependent rules are enforced at execution.
    pub fn submit(&mut self, sender: Address, payload: TxPayload) -> Result<TxId, LedgerError> {
        self.precheck(&sender, &payload)?;
        let tx = LedgerTx { sender, seq: self.next_seq, payload };
        self.next_seq += 1;
        let id = tx.id();
        self.pending.push_back(tx);
        Ok(id)
    }

    pub fn transfer(&mut self, from: Address, to: Address, amount: Amount) -> Result<TxId, LedgerError> {
        self.submit(from, TxPayload::Transfer { to, amount })
    }

    pub fn record_hash(&mut self, sender: Address, value: Digest) -> Result<TxId, LedgerError> {
        self.submit(sender, TxPayload::RecordHash { topic: String::new(), value })
    }

    /// Records an IoT event: a hash record carrying a topic.
    pub fn record_event(&mut self, sender: Address, topic: &str, value: Digest) -> Result<TxId, LedgerError> {
        self.submit(sender, TxPayload::RecordHash { topic: topic.to_string(), value })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn htlc_create(
        &mut self,
        sender: Address,
        payer: Address,
        payee: Address,
        amount: Amount,
        hash_lock: Digest,
        timeout_height: Height,
        commitments: Vec<Digest>,
    ) -> Result<(TxId, HtlcId), LedgerError> {
        let tx = self.submit(
            sender,
            TxPayload::HtlcCreate { payer, payee, amount, hash_lock, timeout_height, commitments },
        )?;
        Ok((tx, htlc_id_for(&tx)))
    }

    pub fn htlc_deposit(&mut self, sender: Address, id: HtlcId) -> Result<TxId, LedgerError> {
        self.submit(sender, TxPayload::HtlcDeposit { id })
    }

    pub fn htlc_claim(&mut self, sender: Address, id: HtlcId, preimage: Secret) -> Result<TxId, LedgerError> {
        self.submit(sender, TxPayload::HtlcClaim { id, preimage })
    }

    pub fn htlc_refund(&mut self, sender: Address, id: HtlcId) -> Result<TxId, LedgerError> {
        self.submit(sender, TxPayload::HtlcRefund { id })
    }

    pub fn deploy_contract(&mut self, owner: Address, policy: Policy) -> Result<(TxId, Address), LedgerError> {
        let tx = self.submit(owner, TxPayload::ContractDeploy { policy })?;
        Ok((tx, contract_address_for(&tx)))
    }

    pub fn call_contract(
        &mut self,
        sender: Address,
        contract: Address,
        call: ContractCall,
    ) -> Result<TxId, LedgerError> {
        self.submit(sender, TxPayload::ContractCall { contract, call })
    }

    /// Submits, mines until the transaction is included, and returns its
    /// execution outcome.
    pub fn transact(&mut self, sender: Address, payload: TxPayload) -> Result<TxId, LedgerError> {
        let id = self.submit(sender, payload)?;
        self.mine_until_included(&id)?.into_result().map(|_| id)
    }

    pub fn mine_until_included(&mut self, id: &TxId) -> Result<TxStatus, LedgerError> {
        while self.receipt(id).is_none() {
            if self.pending.is_empty() {
                return Err(LedgerError::UnknownTx);
            }
            self.mine_block();
        }
        Ok(self.receipt(id).expect("just included").status.clone())
    }

    pub fn mine_block(&mut self) -> &Block {
        let take = self.config.txs_per_block.max(1).min(self.pending.len());
        let txs: Vec<LedgerTx> = self.pending.drain(..take).collect();
        self.append_block(txs)
    }

    fn append_block(&mut self, txs: Vec<LedgerTx>) -> &Block {
        let height = self.height() + 1;
        let prev = self.blocks.last().expect("genesis").block_hash;
        let mut receipts = Vec::with_capacity(txs.len());
        for (index, tx) in txs.iter().enumerate() {
            let tx_id = tx.id();
            let (status, applied) = match self.execute(tx, &tx_id, height) {
                Ok(a) => (TxStatus::Success, a),
                Err(error) => (TxStatus::Failed { error }, Applied { new_words: 0, created: None }),
            };
            let gas = meter(&self.config.gas, tx, applied.new_words);
            let fee = if self.config.charge_gas {
                let bal = self.balances.entry(tx.sender).or_insert(0);
                let fee = (gas.gas_used * self.config.gas_price).min(*bal);
                *bal -= fee;
                self.fees += fee;
                fee
            } else {
                0
            };
            self.receipts.insert(tx_id, (height, index));
            receipts.push(Receipt {
                tx_id,
                height,
                index,
                kind: tx.payload.kind(),
                status,
                gas,
                created: applied.created,
                fee,
            });
        }
        let block_hash = Block::compute_hash(height, &prev, &txs, &receipts);
        self.blocks.push(Block { height, prev, txs, receipts, block_hash });
        self.blocks.last().expect("just pushed")
    }

    fn debit(&mut self, who: &Address, amount: Amount) -> Result<(), LedgerError> {
        let available = self.balance(who);
        if available < amount {
            return Err(LedgerError::InsufficientFunds { needed: amount, available });
        }
        *self.balances.entry(*who).or_insert(0) -= amount;
        Ok(())
    }

    fn credit(&mut self, who: &Address, amount: Amount) {
        *self.balances.entry(*who).or_insert(0) += amount;
    }

    fn execute(&mut self, tx: &LedgerTx, tx_id: &TxId, height: Height) -> Result<Applied, LedgerError> {
        let sender = tx.sender;
        let none = |new_words| Applied { new_words, created: None };
        match &tx.payload {
            TxPayload::Transfer { to, amount } => {
                self.debit(&sender, *amount)?;
                self.credit(to, *amount);
                Ok(none(0))
            }
            TxPayload::RecordHash { topic, value } => {
                self.records.push(HashRecord {
                    submitter: sender,
                    value: *value,
                    height,
                    topic: topic.clone(),
                    tx_id: *tx_id,
                });
                let topic_words = if topic.is_empty() { 0 } else { storage::bytes_words(topic.len()) };
                Ok(none(1 + topic_words))
            }
            TxPayload::HtlcCreate { payer, payee, amount, hash_lock, timeout_height, commitments } => {
                if *timeout_height <= height {
                    return Err(LedgerError::InvalidTimeout { timeout: *timeout_height, height });
                }
                let id = htlc_id_for(tx_id);
                for c in commitments {
                    self.records.push(HashRecord {
                        submitter: sender,
                        value: *c,
                        height,
                        topic: String::new(),
                        tx_id: *tx_id,
                    });
                }
                self.htlcs.insert(
                    id,
                    Htlc {
                        id,
                        payer: *payer,
                        payee: *payee,
                        amount: *amount,
                        hash_lock: *hash_lock,
                        timeout_height: *timeout_height,
                        state: HtlcState::Created,
                        revealed_preimage: None,
                        created_height: height,
                    },
                );
                Ok(Applied { new_words: HTLC_WORDS + commitments.len() as u64, created: Some(id) })
            }
            TxPayload::HtlcDeposit { id } => {
                let h = self.htlcs.get(id).ok_or(LedgerError::UnknownHtlc)?;
                if h.payer != sender {
                    return Err(LedgerError::NotPayer);
                }
                if h.state != HtlcState::Created {
                    return Err(LedgerError::WrongState(h.state));
                }
                let amount = h.amount;
                self.debit(&sender, amount)?;
                self.htlcs.get_mut(id).expect("checked").state = HtlcState::Deposited;
                Ok(none(0))
            }
            TxPayload::HtlcClaim { id, preimage } => {
                let h = self.htlcs.get(id).ok_or(LedgerError::UnknownHtlc)?;
                if h.state != HtlcState::Deposited {
                    return Err(LedgerError::WrongState(h.state));
                }
                if height >= h.timeout_height {
                    return Err(LedgerError::Expired);
                }
                if crypto::hash(&preimage.0) != h.hash_lock {
                    return Err(LedgerError::BadPreimage);
                }
                let (payee, amount) = (h.payee, h.amount);
                let h = self.htlcs.get_mut(id).expect("checked");
                h.state = HtlcState::Claimed;
                h.revealed_preimage = Some(*preimage);
                self.credit(&payee, amount);
                Ok(none(1))
            }
            TxPayload::HtlcRefund { id } => {
                let h = self.htlcs.get(id).ok_or(LedgerError::UnknownHtlc)?;
                if h.state != HtlcState::Deposited {
                    return Err(LedgerError::WrongState(h.state));
                }
                if h.payer != sender {
                    return Err(LedgerError::NotPayer);
                }
                if height < h.timeout_height {
                    return Err(LedgerError::NotYetExpired);
                }
                let (payer, amount) = (h.payer, h.amount);
                self.htlcs.get_mut(id).expect("checked").state = HtlcState::Refunded;
                self.credit(&payer, amount);
                Ok(none(0))
            }
            TxPayload::ContractDeploy { policy } => {
                if policy.owner != sender {
                    return Err(ContractError::NotOwner.into());
                }
                let address = contract_address_for(tx_id);
                let (contract, words) = AuthzContract::deploy(address, policy.clone())?;
                self.contracts.insert(address, contract);
                let mut created = [0u8; 32];
                created[..ADDRESS_LEN].copy_from_slice(&address.0);
                Ok(Applied { new_words: words, created: Some(Digest(created)) })
            }
            TxPayload::ContractCall { contract, call } => {
                let value = call.value();
                let available = self.balance(&sender);
                if available < value {
                    return Err(LedgerError::InsufficientFunds { needed: value, available });
                }
                let mut c = self.contracts.remove(contract).ok_or(LedgerError::UnknownContract)?;
                let env = CallEnv { sender, height, tx_id: *tx_id, events: &Events(&self.records) };
                let result = c.call(&env, call);
                self.contracts.insert(*contract, c);
                let effect = result?;
                if let Some((from, amount)) = effect.escrow_in {
                    self.debit(&from, amount).expect("balance checked before the call");
                }
                if let Some((to, amount)) = effect.escrow_out {
                    self.credit(&to, amount);
                }
                Ok(Applied { new_words: effect.new_words, created: effect.request_id })
            }
        }
    }

    /// Every block links to its predecessor and its hash recomputes.
    pub fn verify_chain(&self) -> bool {
        self.blocks.iter().all(Block::verify_hash)
            && self.blocks.windows(2).all(|w| w[1].prev == w[0].block_hash && w[1].height == w[0].height + 1)
    }

    /// Newline-delimited JSON: a header line, then for every block a
    /// `block` line followed by one `tx` line per transaction.
    pub fn export(&self) -> String {
        let mut out = String::new();
        let header = DumpLine::Header {
            format: DUMP_FORMAT.to_string(),
            config: self.config.clone(),
            genesis: self.genesis.iter().map(|(a, v)| GenesisAlloc { address: *a, amount: *v }).collect(),
        };
        push_line(&mut out, &header);
        for b in &self.blocks {
            push_line(
                &mut out,
                &DumpLine::Block {
                    height: b.height,
                    prev: b.prev,
                    block_hash: b.block_hash,
                    tx_count: b.txs.len(),
                },
            );
            for (tx, receipt) in b.txs.iter().zip(&b.receipts) {
                push_line(&mut out, &DumpLine::Tx { tx: Box::new(tx.clone()), receipt: Box::new(receipt.clone()) });
            }
        }
        out
    }

    /// Rebuilds a ledger by replaying a dump. Every block hash and receipt
    /// must come out identical.
    pub fn import(dump: &str) -> Result<Self, DumpError> {
        let mut lines = dump.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(DumpError::Empty)?;
        let DumpLine::Header { format, config, genesis } =
            serde_json::from_str(first).map_err(|e| DumpError::Parse { line: 1, msg: e.to_string() })?
        else {
            return Err(DumpError::Structure("first line must be the header".into()));
        };
        if format != DUMP_FORMAT {
            return Err(DumpError::Structure(format!("unsupported format {format}")));
        }
        let mut ledger = Ledger::new(config, genesis.into_iter().map(|g| (g.address, g.amount)));

        let mut current: Option<DumpBlock> = None;
        let finish = |ledger: &mut Ledger, cur: Option<DumpBlock>| -> Result<(), DumpError> {
            let Some(DumpBlock { height, hash, count, txs, receipts }) = cur else { return Ok(()) };
            if txs.len() != count {
                return Err(DumpError::Structure(format!("block {height} lists {count} txs, found {}", txs.len())));
            }
            if height == 0 {
                if ledger.blocks[0].block_hash != hash {
                    return Err(DumpError::Mismatch { height });
                }
                return Ok(());
            }
            if height != ledger.height() + 1 {
                return Err(DumpError::Structure(format!("unexpected block height {height}")));
            }
            ledger.next_seq = txs.iter().map(|t| t.seq + 1).max().unwrap_or(ledger.next_seq).max(ledger.next_seq);
            let block = ledger.append_block(txs);
            if block.block_hash != hash || block.receipts != receipts {
                return Err(DumpError::Mismatch { height });
            }
            Ok(())
        };

        for (n, line) in lines {
            let parsed: DumpLine =
                serde_json::from_str(line).map_err(|e| DumpError::Parse { line: n + 1, msg: e.to_string() })?;
            match parsed {
                DumpLine::Header { .. } => return Err(DumpError::Structure("duplicate header".into())),
                DumpLine::Block { height, block_hash, tx_count, .. } => {
                    finish(&mut ledger, current.take())?;
                    current = Some(DumpBlock { height, hash: block_hash, count: tx_count, txs: vec![], receipts: vec![] });
                }
                DumpLine::Tx { tx, receipt } => {
                    let Some(cur) = current.as_mut() else {
                        return Err(DumpError::Structure("tx before any block".into()));
                    };
                    cur.txs.push(*tx);
                    cur.receipts.push(*receipt);
                }
            }
        }
        finish(&mut ledger, current.take())?;
        Ok(ledger)
    }
}

/// A block being reassembled during import.
struct DumpBlock {
    height: Height,
    hash: Digest,
    count: usize,
    txs: Vec<LedgerTx>,
    receipts: Vec<Receipt>,
}

pub const DUMP_FORMAT: &str = "authchain-chain/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenesisAlloc {
    pub address: Address,
    pub amount: Amount,
}

/// One line of a chain dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum DumpLine {
    Header { format: String, config: LedgerConfig, genesis: Vec<GenesisAlloc> },
    Block { height: Height, prev: Digest, block_hash: Digest, tx_count: usize },
    Tx { tx: Box<LedgerTx>, receipt: Box<Receipt> },
}

fn push_line<T: Serialize>(out: &mut String, v: &T) {
    out.push_str(&serde_json::to_string(v).expect("dump line serializes"));
    out.push('\n');
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DumpError {
    #[error("empty chain dump")]
    Empty,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("malformed dump: {0}")]
    Structure(String),
    #[error("replay diverged at block {height}")]
    Mismatch { height: Height },
}
