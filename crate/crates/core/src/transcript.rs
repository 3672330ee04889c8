//! Newline-delimited JSON record of everything that happens in a run.
//!
//! Every line is one [`Event`] object with an `event` discriminator:
//!
//! | event        | meaning                                                    |
//! |--------------|------------------------------------------------------------|
//! | `header`     | model, seed and the addresses of the parties               |
//! | `message`    | an off-ledger message; `channel` is `secure` or `insecure` |
//! | `tx`         | a mined transaction with its status and gas                |
//! | `block`      | a mined block                                              |
//! | `disclosure` | plaintext a party discloses for later audit                |
//! | `error`      | a protocol step that failed, recorded instead of thrown    |
//!
//! Byte strings are lowercase hex. Field names are stable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authz_contract::GrantArtifacts;
use crate::crypto::{hex_vec, Address, Ciphertext, Digest, PublicKey, SymmetricKey};
use crate::ledger::{Block, TxKind};
use crate::thing::{PopChallenge, PopResponse};
use crate::{Amount, Height};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Client,
    AuthServer,
    Owner,
    Thing,
    Ledger,
    Adversary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Confidential client/AS link.
    Secure,
    /// Observable link, e.g. client to Thing.
    Insecure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessageBody {
    AccessRequest {
        client: Address,
        client_pub: PublicKey,
        scope: String,
    },
    GrantPackage {
        pop_key: SymmetricKey,
        e_thing_pop: Ciphertext,
        e_s_token: Ciphertext,
        hash_lock: Digest,
        price: Amount,
        htlc_id: Digest,
        commit1: Digest,
        commit2: Digest,
    },
    TokenPresentation {
        #[serde(with = "hex_vec")]
        token: Vec<u8>,
        e_thing_pop: Ciphertext,
    },
    Challenge {
        challenge: PopChallenge,
    },
    PopProof {
        challenge: PopChallenge,
        response: PopResponse,
    },
    AccessResult {
        granted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "item", rename_all = "snake_case")]
pub enum Disclosure {
    /// The decrypted canonical signed token.
    Token {
        #[serde(with = "hex_vec")]
        token: Vec<u8>,
    },
    /// Contract-flow artifacts as the client read them.
    Artifacts { request_id: Digest, artifacts: Box<GrantArtifacts> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parties {
    pub client: Address,
    pub auth_server: Address,
    pub owner: Address,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contract: Option<Address>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Header {
        model: u8,
        seed: u64,
        parties: Parties,
    },
    Message {
        seq: u64,
        height: Height,
        channel: Channel,
        from: Role,
        to: Role,
        body: MessageBody,
    },
    Tx {
        seq: u64,
        height: Height,
        role: Role,
        tx_id: Digest,
        kind: TxKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        method: Option<String>,
        ok: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        gas_used: u64,
    },
    Block {
        seq: u64,
        height: Height,
        tx_count: usize,
        block_hash: Digest,
    },
    Disclosure {
        seq: u64,
        height: Height,
        role: Role,
        #[serde(flatten)]
        disclosure: Disclosure,
    },
    Error {
        seq: u64,
        height: Height,
        role: Role,
        message: String,
    },
}

#[derive(Debug, Error)]
#[error("transcript line {line}: {source}")]
pub struct ParseError {
    pub line: usize,
    #[source]
    pub source: serde_json::Error,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    events: Vec<Event>,
    next_seq: u64,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    fn seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    pub fn header(&mut self, model: u8, seed: u64, parties: Parties) {
        self.events.push(Event::Header { model, seed, parties });
    }

    pub fn message(&mut self, height: Height, channel: Channel, from: Role, to: Role, body: MessageBody) {
        let seq = self.seq();
        self.events.push(Event::Message { seq, height, channel, from, to, body });
    }

    pub fn disclose(&mut self, height: Height, role: Role, disclosure: Disclosure) {
        let seq = self.seq();
        self.events.push(Event::Disclosure { seq, height, role, disclosure });
    }

    pub fn error(&mut self, height: Height, role: Role, message: impl Into<String>) {
        let seq = self.seq();
        self.events.push(Event::Error { seq, height, role, message: message.into() });
    }

    /// Records a block and its transactions, attributing each to `role_of`.
    pub fn block(&mut self, block: &Block, role_of: impl Fn(&Address) -> Role) {
        for (tx, r) in block.txs.iter().zip(&block.receipts) {
            let seq = self.seq();
            let method = match &tx.payload {
                crate::ledger::TxPayload::ContractCall { call, .. } => Some(call.name().to_string()),
                _ => None,
            };
            let error = match &r.status {
                crate::ledger::TxStatus::Success => None,
                crate::ledger::TxStatus::Failed { error } => Some(error.to_string()),
            };
            self.events.push(Event::Tx {
                seq,
                height: block.height,
                role: role_of(&tx.sender),
                tx_id: r.tx_id,
                kind: r.kind,
                method,
                ok: error.is_none(),
                error,
                gas_used: r.gas.gas_used,
            });
        }
        let seq = self.seq();
        self.events.push(Event::Block {
            seq,
            height: block.height,
            tx_count: block.txs.len(),
            block_hash: block.block_hash,
        });
    }

    pub fn messages(&self) -> impl Iterator<Item = (&Channel, &Role, &Role, &MessageBody)> {
        self.events.iter().filter_map(|e| match e {
            Event::Message { channel, from, to, body, .. } => Some((channel, from, to, body)),
            _ => None,
        })
    }

    pub fn tx_count(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, Event::Tx { .. })).count()
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(s: &str) -> Result<Self, ParseError> {
        let mut events = Vec::new();
        for (i, line) in s.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(line).map_err(|source| ParseError { line: i + 1, source })?);
        }
        let next_seq = events.len() as u64;
        Ok(Self { events, next_seq })
    }
}
