//! On-ledger authorization contract for the contract-mediated flow.
//!
//! The contract records the resource owner's policy, accepts client requests
//! together with their deposit, stores the grant artifacts posted by the
//! authorization server, and releases or refunds the deposit through an
//! embedded hash time-locked escrow.
//!
//! Request lifecycle:
//!
//! ```text
//! Requested --post_grant--> Granted --acknowledge--> Granted(escrow active)
//!     |                        |                          |
//!     | timeout                | timeout                  | reveal_secret
//!     v                        v                          v
//! Refunded                 Refunded                    Claimed
//! ```
//!
//! Methods validate everything before touching state: a rejected call leaves
//! the contract exactly as it was.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Address, Ciphertext, Digest, PublicKey, Secret};
use crate::storage;
use crate::{Amount, Height};

pub type RequestId = Digest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventPredicate {
    pub event_topic: String,
    /// `true`: an event with this topic must be on the ledger.
    /// `false`: it must not be (a blocking event such as a tamper alarm).
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub owner: Address,
    pub prices: BTreeMap<String, Amount>,
    pub allowlist: Option<BTreeSet<Address>>,
    #[serde(default)]
    pub required_events: Vec<EventPredicate>,
    pub timeout_blocks: u64,
    pub as_address: Address,
}

impl Policy {
    pub fn validate(&self) -> Result<(), ContractError> {
        if self.prices.is_empty() {
            return Err(ContractError::InvalidPolicy("no prices".into()));
        }
        if self.prices.keys().any(String::is_empty) {
            return Err(ContractError::InvalidPolicy("empty scope name".into()));
        }
        if self.timeout_blocks == 0 {
            return Err(ContractError::InvalidPolicy("timeout_blocks must be at least 1".into()));
        }
        Ok(())
    }

    pub fn price(&self, scope: &str) -> Option<Amount> {
        self.prices.get(scope).copied()
    }

    fn storage_words(&self) -> u64 {
        // owner, as_address, timeout_blocks
        let mut words = 3;
        for scope in self.prices.keys() {
            words += storage::bytes_words(scope.len()) + 1;
        }
        if let Some(list) = &self.allowlist {
            words += list.len() as u64;
        }
        for ev in &self.required_events {
            words += storage::bytes_words(ev.event_topic.len()) + 1;
        }
        words
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.owner.0);
        out.extend_from_slice(&self.as_address.0);
        out.extend_from_slice(&self.timeout_blocks.to_be_bytes());
        out.extend_from_slice(&(self.prices.len() as u16).to_be_bytes());
        for (scope, price) in &self.prices {
            put_bytes(&mut out, scope.as_bytes());
            out.extend_from_slice(&price.to_be_bytes());
        }
        let list = self.allowlist.as_ref();
        out.push(list.is_some() as u8);
        if let Some(list) = list {
            out.extend_from_slice(&(list.len() as u16).to_be_bytes());
            for a in list {
                out.extend_from_slice(&a.0);
            }
        }
        out.extend_from_slice(&(self.required_events.len() as u16).to_be_bytes());
        for ev in &self.required_events {
            put_bytes(&mut out, ev.event_topic.as_bytes());
            out.push(ev.required as u8);
        }
        out
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u16).to_be_bytes());
    out.extend_from_slice(b);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Requested,
    Granted,
    Claimed,
    Refunded,
}

impl RequestState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Claimed | Self::Refunded)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantArtifacts {
    pub e_thing_pop: Ciphertext,
    pub e_client_pop: Ciphertext,
    pub e_s_token: Ciphertext,
    pub hash_lock: Digest,
}

impl GrantArtifacts {
    fn storage_words(&self) -> u64 {
        [&self.e_thing_pop, &self.e_client_pop, &self.e_s_token]
            .into_iter()
            .map(|c| 2 + storage::bytes_words(c.body.len()))
            .sum::<u64>()
            + 1
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for c in [&self.e_thing_pop, &self.e_client_pop, &self.e_s_token] {
            put_bytes(&mut out, &c.to_bytes());
        }
        out.extend_from_slice(&self.hash_lock.0);
        out
    }

    /// Named digests of each artifact, in posting order.
    pub fn digests(&self) -> [(&'static str, Digest); 4] {
        [
            ("e_thing_pop", crypto::hash(&self.e_thing_pop.to_bytes())),
            ("e_client_pop", crypto::hash(&self.e_client_pop.to_bytes())),
            ("e_s_token", crypto::hash(&self.e_s_token.to_bytes())),
            ("hash_lock", self.hash_lock),
        ]
    }
}

/// Hash time-locked escrow embedded in a request once the client
/// acknowledges the grant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscrowLock {
    pub payer: Address,
    pub payee: Address,
    pub amount: Amount,
    pub hash_lock: Digest,
    pub timeout_height: Height,
    pub activated_at: Height,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthRequest {
    pub request_id: RequestId,
    pub client: Address,
    pub client_pub: PublicKey,
    pub scope: String,
    pub deposit: Amount,
    pub state: RequestState,
    pub artifacts: Option<GrantArtifacts>,
    pub escrow: Option<EscrowLock>,
    pub revealed_preimage: Option<Secret>,
    pub created_height: Height,
    pub timeout_height: Height,
}

impl AuthRequest {
    pub fn acknowledged(&self) -> bool {
        self.escrow.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ContractCall {
    RequestAccess { client_pub: PublicKey, scope: String, deposit: Amount },
    PostGrant { request_id: RequestId, artifacts: GrantArtifacts },
    Acknowledge { request_id: RequestId },
    RevealSecret { request_id: RequestId, preimage: Secret },
    Refund { request_id: RequestId },
    UpdatePolicy { policy: Policy },
}

impl ContractCall {
    pub fn selector(&self) -> u8 {
        match self {
            Self::RequestAccess { .. } => 1,
            Self::PostGrant { .. } => 2,
            Self::Acknowledge { .. } => 3,
            Self::RevealSecret { .. } => 4,
            Self::Refund { .. } => 5,
            Self::UpdatePolicy { .. } => 6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::RequestAccess { .. } => "request_access",
            Self::PostGrant { .. } => "post_grant",
            Self::Acknowledge { .. } => "acknowledge",
            Self::RevealSecret { .. } => "reveal_secret",
            Self::Refund { .. } => "refund",
            Self::UpdatePolicy { .. } => "update_policy",
        }
    }

    /// Value the caller attaches to the call.
    pub fn value(&self) -> Amount {
        match self {
            Self::RequestAccess { deposit, .. } => *deposit,
            _ => 0,
        }
    }

    /// Selector byte followed by the arguments.
    pub fn calldata(&self) -> Vec<u8> {
        let mut out = vec![self.selector()];
        match self {
            Self::RequestAccess { client_pub, scope, deposit } => {
                out.extend_from_slice(&client_pub.to_bytes());
                put_bytes(&mut out, scope.as_bytes());
                out.extend_from_slice(&deposit.to_be_bytes());
            }
            Self::PostGrant { request_id, artifacts } => {
                out.extend_from_slice(&request_id.0);
                out.extend_from_slice(&artifacts.encode());
            }
            Self::Acknowledge { request_id } | Self::Refund { request_id } => {
                out.extend_from_slice(&request_id.0);
            }
            Self::RevealSecret { request_id, preimage } => {
                out.extend_from_slice(&request_id.0);
                out.extend_from_slice(&preimage.0);
            }
            Self::UpdatePolicy { policy } => out.extend_from_slice(&policy.encode()),
        }
        out
    }
}

pub fn deploy_calldata(policy: &Policy) -> Vec<u8> {
    policy.encode()
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ContractError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("only the owner may update the policy")]
    NotOwner,
    #[error("scope {0:?} is not priced")]
    UnknownScope(String),
    #[error("deposit {offered} does not match price {expected}")]
    WrongPrice { expected: Amount, offered: Amount },
    #[error("client is not on the allowlist")]
    NotAllowed,
    #[error("event predicate on {0:?} not satisfied")]
    EventNotSatisfied(String),
    #[error("unknown request")]
    UnknownRequest,
    #[error("sender is not the authorization server")]
    NotAuthorizedAS,
    #[error("sender is not the requesting client")]
    NotRequester,
    #[error("request is in state {0:?}")]
    WrongState(RequestState),
    #[error("request timed out")]
    Expired,
    #[error("refund window not open yet")]
    NotYetExpired,
    #[error("preimage does not match the hash-lock")]
    BadPreimage,
}

/// Read access to ledger-recorded IoT events.
pub trait EventLog {
    fn has_event(&self, topic: &str) -> bool;
}

pub struct CallEnv<'a> {
    pub sender: Address,
    pub height: Height,
    pub tx_id: Digest,
    pub events: &'a dyn EventLog,
}

/// Value movements and storage growth resulting from a successful call.
/// The ledger applies the movements.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CallEffect {
    pub escrow_in: Option<(Address, Amount)>,
    pub escrow_out: Option<(Address, Amount)>,
    pub new_words: u64,
    pub request_id: Option<RequestId>,
}

pub fn request_id_for(tx_id: &Digest) -> RequestId {
    crypto::hash_concat([&b"authchain/request"[..], &tx_id.0])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthzContract {
    pub address: Address,
    pub policy: Policy,
    pub requests: BTreeMap<RequestId, AuthRequest>,
}

impl AuthzContract {
    pub fn deploy(address: Address, policy: Policy) -> Result<(Self, u64), ContractError> {
        policy.validate()?;
        let words = policy.storage_words();
        Ok((Self { address, policy, requests: BTreeMap::new() }, words))
    }

    /// Amount currently held for requests that have not terminated.
    pub fn escrowed(&self) -> Amount {
        self.requests.values().filter(|r| !r.state.is_terminal()).map(|r| r.deposit).sum()
    }

    pub fn read_request(&self, id: &RequestId) -> Result<&AuthRequest, ContractError> {
        self.requests.get(id).ok_or(ContractError::UnknownRequest)
    }

    pub fn call(&mut self, env: &CallEnv<'_>, call: &ContractCall) -> Result<CallEffect, ContractError> {
        match call {
            ContractCall::RequestAccess { client_pub, scope, deposit } => {
                self.request_access(env, *client_pub, scope, *deposit)
            }
            ContractCall::PostGrant { request_id, artifacts } => {
                self.post_grant(env, request_id, artifacts)
            }
            ContractCall::Acknowledge { request_id } => self.acknowledge(env, request_id),
            ContractCall::RevealSecret { request_id, preimage } => {
                self.reveal_secret(env, request_id, preimage)
            }
            ContractCall::Refund { request_id } => self.refund(env, request_id),
            ContractCall::UpdatePolicy { policy } => self.update_policy(env, policy),
        }
    }

    fn update_policy(&mut self, env: &CallEnv<'_>, policy: &Policy) -> Result<CallEffect, ContractError> {
        if env.sender != self.policy.owner {
            return Err(ContractError::NotOwner);
        }
        policy.validate()?;
        if policy.owner != self.policy.owner {
            return Err(ContractError::InvalidPolicy("ownership cannot be transferred".into()));
        }
        let new_words = policy.storage_words().saturating_sub(self.policy.storage_words());
        self.policy = policy.clone();
        Ok(CallEffect { new_words, ..Default::default() })
    }

    fn request_access(
        &mut self,
        env: &CallEnv<'_>,
        client_pub: PublicKey,
        scope: &str,
        deposit: Amount,
    ) -> Result<CallEffect, ContractError> {
        let price = self
            .policy
            .price(scope)
            .ok_or_else(|| ContractError::UnknownScope(scope.to_string()))?;
        if deposit != price {
            return Err(ContractError::WrongPrice { expected: price, offered: deposit });
        }
        if let Some(list) = &self.policy.allowlist {
            if !list.contains(&env.sender) {
                return Err(ContractError::NotAllowed);
            }
        }
        for ev in &self.policy.required_events {
            if env.events.has_event(&ev.event_topic) != ev.required {
                return Err(ContractError::EventNotSatisfied(ev.event_topic.clone()));
            }
        }
        let request_id = request_id_for(&env.tx_id);
        let req = AuthRequest {
            request_id,
            client: env.sender,
            client_pub,
            scope: scope.to_string(),
            deposit,
            state: RequestState::Requested,
            artifacts: None,
            escrow: None,
            revealed_preimage: None,
            created_height: env.height,
            timeout_height: env.height + self.policy.timeout_blocks,
        };
        // client, client_pub (2), scope, deposit, state, created, timeout
        let new_words = 1 + 2 + storage::bytes_words(scope.len()) + 4;
        self.requests.insert(request_id, req);
        Ok(CallEffect {
            escrow_in: Some((env.sender, deposit)),
            new_words,
            request_id: Some(request_id),
            ..Default::default()
        })
    }

    fn post_grant(
        &mut self,
        env: &CallEnv<'_>,
        id: &RequestId,
        artifacts: &GrantArtifacts,
    ) -> Result<CallEffect, ContractError> {
        if env.sender != self.policy.as_address {
            return Err(ContractError::NotAuthorizedAS);
        }
        let req = self.requests.get_mut(id).ok_or(ContractError::UnknownRequest)?;
        if req.state != RequestState::Requested {
            return Err(ContractError::WrongState(req.state));
        }
        if env.height >= req.timeout_height {
            return Err(ContractError::Expired);
        }
        req.artifacts = Some(artifacts.clone());
        req.state = RequestState::Granted;
        Ok(CallEffect { new_words: artifacts.storage_words(), ..Default::default() })
    }

    fn acknowledge(&mut self, env: &CallEnv<'_>, id: &RequestId) -> Result<CallEffect, ContractError> {
        let owner = self.policy.owner;
        let req = self.requests.get_mut(id).ok_or(ContractError::UnknownRequest)?;
        if env.sender != req.client {
            return Err(ContractError::NotRequester);
        }
        if req.state != RequestState::Granted || req.acknowledged() {
            return Err(ContractError::WrongState(req.state));
        }
        if env.height >= req.timeout_height {
            return Err(ContractError::Expired);
        }
        let hash_lock = req.artifacts.as_ref().expect("Granted carries artifacts").hash_lock;
        req.escrow = Some(EscrowLock {
            payer: req.client,
            payee: owner,
            amount: req.deposit,
            hash_lock,
            timeout_height: req.timeout_height,
            activated_at: env.height,
        });
        // payer, payee, amount, hash_lock, timeout, activation height
        Ok(CallEffect { new_words: 6, ..Default::default() })
    }

    fn reveal_secret(
        &mut self,
        env: &CallEnv<'_>,
        id: &RequestId,
        preimage: &Secret,
    ) -> Result<CallEffect, ContractError> {
        if env.sender != self.policy.as_address {
            return Err(ContractError::NotAuthorizedAS);
        }
        let req = self.requests.get_mut(id).ok_or(ContractError::UnknownRequest)?;
        let Some(escrow) = req.escrow.as_ref().filter(|_| req.state == RequestState::Granted) else {
            return Err(ContractError::WrongState(req.state));
        };
        if env.height >= escrow.timeout_height {
            return Err(ContractError::Expired);
        }
        if crypto::hash(&preimage.0) != escrow.hash_lock {
            return Err(ContractError::BadPreimage);
        }
        let payout = (escrow.payee, escrow.amount);
        req.revealed_preimage = Some(*preimage);
        req.state = RequestState::Claimed;
        Ok(CallEffect { escrow_out: Some(payout), new_words: 1, ..Default::default() })
    }

    fn refund(&mut self, env: &CallEnv<'_>, id: &RequestId) -> Result<CallEffect, ContractError> {
        let req = self.requests.get_mut(id).ok_or(ContractError::UnknownRequest)?;
        if env.sender != req.client {
            return Err(ContractError::NotRequester);
        }
        if req.state.is_terminal() {
            return Err(ContractError::WrongState(req.state));
        }
        if env.height < req.timeout_height {
            return Err(ContractError::NotYetExpired);
        }
        req.state = RequestState::Refunded;
        Ok(CallEffect { escrow_out: Some((req.client, req.deposit)), ..Default::default() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;

    struct Events(Vec<&'static str>);
    impl EventLog for Events {
        fn has_event(&self, topic: &str) -> bool {
            self.0.contains(&topic)
        }
    }

    fn addr(b: u8) -> Address {
        Address([b; 20])
    }

    fn policy() -> Policy {
        Policy {
            owner: addr(1),
            prices: [("read".to_string(), 10), ("write".to_string(), 25)].into(),
            allowlist: Some([addr(3)].into()),
            required_events: vec![],
            timeout_blocks: 5,
            as_address: addr(2),
        }
    }

    fn env<'a>(sender: Address, height: Height, tx: u8, events: &'a Events) -> CallEnv<'a> {
        CallEnv { sender, height, tx_id: Digest([tx; 32]), events }
    }

    fn artifacts(secret: &Secret) -> GrantArtifacts {
        let c = Ciphertext { nonce: [0; 12], body: vec![1; 32], tag: [0; 16] };
        GrantArtifacts {
            e_thing_pop: c.clone(),
            e_client_pop: c.clone(),
            e_s_token: c,
            hash_lock: crypto::hash(&secret.0),
        }
    }

    fn contract() -> AuthzContract {
        AuthzContract::deploy(addr(9), policy()).unwrap().0
    }

    fn client_pub() -> PublicKey {
        KeyPair::from_seed(&[3; 32]).public()
    }

    fn requested(c: &mut AuthzContract, ev: &Events) -> RequestId {
        let call = ContractCall::RequestAccess { client_pub: client_pub(), scope: "read".into(), deposit: 10 };
        c.call(&env(addr(3), 1, 1, ev), &call).unwrap().request_id.unwrap()
    }

    #[test]
    fn deploy_validates_policy() {
        let c = contract();
        assert_eq!(c.policy.price("read"), Some(10));
        let mut p = policy();
        p.prices.clear();
        assert!(matches!(AuthzContract::deploy(addr(9), p), Err(ContractError::InvalidPolicy(_))));
        let mut p = policy();
        p.timeout_blocks = 0;
        assert!(matches!(AuthzContract::deploy(addr(9), p), Err(ContractError::InvalidPolicy(_))));
    }

    #[test]
    fn only_owner_updates_policy() {
        let ev = Events(vec![]);
        let mut c = contract();
        let mut p = policy();
        p.prices.insert("read".into(), 11);
        let call = ContractCall::UpdatePolicy { policy: p.clone() };
        assert_eq!(c.call(&env(addr(3), 1, 1, &ev), &call), Err(ContractError::NotOwner));
        assert_eq!(c.policy.price("read"), Some(10));
        c.call(&env(addr(1), 1, 2, &ev), &call).unwrap();
        assert_eq!(c.policy.price("read"), Some(11));
    }

    #[test]
    fn request_preconditions() {
        let ev = Events(vec![]);
        let mut c = contract();
        let req = |scope: &str, deposit| ContractCall::RequestAccess {
            client_pub: client_pub(),
            scope: scope.into(),
            deposit,
        };
        assert_eq!(
            c.call(&env(addr(3), 1, 1, &ev), &req("read", 9)),
            Err(ContractError::WrongPrice { expected: 10, offered: 9 })
        );
        assert_eq!(
            c.call(&env(addr(3), 1, 1, &ev), &req("admin", 9)),
            Err(ContractError::UnknownScope("admin".into()))
        );
        assert_eq!(c.call(&env(addr(4), 1, 1, &ev), &req("read", 10)), Err(ContractError::NotAllowed));
        assert!(c.requests.is_empty());

        let eff = c.call(&env(addr(3), 1, 1, &ev), &req("read", 10)).unwrap();
        assert_eq!(eff.escrow_in, Some((addr(3), 10)));
        let r = c.read_request(&eff.request_id.unwrap()).unwrap();
        assert_eq!(r.state, RequestState::Requested);
        assert_eq!(r.timeout_height, 6);
        assert!(r.artifacts.is_none());
    }

    #[test]
    fn event_predicates() {
        let mut p = policy();
        p.required_events = vec![
            EventPredicate { event_topic: "door/armed".into(), required: true },
            EventPredicate { event_topic: "door/tampered".into(), required: false },
        ];
        let mut c = AuthzContract::deploy(addr(9), p).unwrap().0;
        let call = ContractCall::RequestAccess { client_pub: client_pub(), scope: "read".into(), deposit: 10 };
        let none = Events(vec![]);
        assert_eq!(
            c.call(&env(addr(3), 1, 1, &none), &call),
            Err(ContractError::EventNotSatisfied("door/armed".into()))
        );
        let tampered = Events(vec!["door/armed", "door/tampered"]);
        assert_eq!(
            c.call(&env(addr(3), 1, 1, &tampered), &call),
            Err(ContractError::EventNotSatisfied("door/tampered".into()))
        );
        let armed = Events(vec!["door/armed"]);
        assert!(c.call(&env(addr(3), 1, 1, &armed), &call).is_ok());
    }

    #[test]
    fn grant_ack_reveal_happy_path() {
        let ev = Events(vec![]);
        let mut c = contract();
        let id = requested(&mut c, &ev);
        let s = Secret([5; 32]);

        let post = ContractCall::PostGrant { request_id: id, artifacts: artifacts(&s) };
        assert_eq!(c.call(&env(addr(3), 2, 2, &ev), &post), Err(ContractError::NotAuthorizedAS));
        c.call(&env(addr(2), 2, 2, &ev), &post).unwrap();
        assert_eq!(c.read_request(&id).unwrap().state, RequestState::Granted);

        let reveal = ContractCall::RevealSecret { request_id: id, preimage: s };
        // reveal before the client acknowledges is out of order
        assert_eq!(
            c.call(&env(addr(2), 3, 3, &ev), &reveal),
            Err(ContractError::WrongState(RequestState::Granted))
        );
        let ack = ContractCall::Acknowledge { request_id: id };
        c.call(&env(addr(3), 3, 3, &ev), &ack).unwrap();
        assert_eq!(
            c.call(&env(addr(3), 3, 3, &ev), &ack),
            Err(ContractError::WrongState(RequestState::Granted))
        );

        let bad = ContractCall::RevealSecret { request_id: id, preimage: Secret([6; 32]) };
        assert_eq!(c.call(&env(addr(2), 4, 4, &ev), &bad), Err(ContractError::BadPreimage));
        assert_eq!(c.escrowed(), 10);

        let eff = c.call(&env(addr(2), 4, 4, &ev), &reveal).unwrap();
        assert_eq!(eff.escrow_out, Some((addr(1), 10)));
        let r = c.read_request(&id).unwrap();
        assert_eq!(r.state, RequestState::Claimed);
        assert_eq!(crypto::hash(&r.revealed_preimage.unwrap().0), r.artifacts.as_ref().unwrap().hash_lock);
        assert_eq!(c.escrowed(), 0);

        let refund = ContractCall::Refund { request_id: id };
        assert_eq!(
            c.call(&env(addr(3), 50, 5, &ev), &refund),
            Err(ContractError::WrongState(RequestState::Claimed))
        );
    }

    #[test]
    fn ack_before_grant_is_wrong_state() {
        let ev = Events(vec![]);
        let mut c = contract();
        let id = requested(&mut c, &ev);
        assert_eq!(
            c.call(&env(addr(3), 2, 2, &ev), &ContractCall::Acknowledge { request_id: id }),
            Err(ContractError::WrongState(RequestState::Requested))
        );
    }

    #[test]
    fn timeouts_and_refunds() {
        let ev = Events(vec![]);
        let mut c = contract();
        let id = requested(&mut c, &ev); // timeout at 6
        let s = Secret([5; 32]);
        let refund = ContractCall::Refund { request_id: id };
        assert_eq!(c.call(&env(addr(3), 5, 2, &ev), &refund), Err(ContractError::NotYetExpired));
        let post = ContractCall::PostGrant { request_id: id, artifacts: artifacts(&s) };
        assert_eq!(c.call(&env(addr(2), 6, 3, &ev), &post), Err(ContractError::Expired));
        assert_eq!(c.call(&env(addr(2), 6, 3, &ev), &refund), Err(ContractError::NotRequester));
        let eff = c.call(&env(addr(3), 6, 3, &ev), &refund).unwrap();
        assert_eq!(eff.escrow_out, Some((addr(3), 10)));
        assert_eq!(c.read_request(&id).unwrap().state, RequestState::Refunded);
        let reveal = ContractCall::RevealSecret { request_id: id, preimage: s };
        assert_eq!(
            c.call(&env(addr(2), 7, 4, &ev), &reveal),
            Err(ContractError::WrongState(RequestState::Refunded))
        );
    }

    #[test]
    fn unknown_request() {
        let ev = Events(vec![]);
        let mut c = contract();
        let id = Digest([0xee; 32]);
        assert_eq!(c.read_request(&id).unwrap_err(), ContractError::UnknownRequest);
        assert_eq!(
            c.call(&env(addr(3), 1, 1, &ev), &ContractCall::Refund { request_id: id }),
            Err(ContractError::UnknownRequest)
        );
    }
}
