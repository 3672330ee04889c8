//! Contract-mediated authorization: every exchange between the client and
//! the authorization server goes through the authorization contract.
//!
//! ```text
//! C  -> contract : request_access{client_pub, scope} + deposit    T1
//! AS            : watches the ledger and sees the request
//! AS -> contract : post_grant{E_Thing(PoP), E_C(PoP), E_s(token), h}  T2
//! C  -> contract : acknowledge (locks the deposit under h)         T3
//! AS -> contract : reveal_secret{s}                                 T4
//! C             : reads s, decrypts the token and the PoP key
//! ```
//!
//! With `token_pk_wrap` the token is first encrypted to the client's public
//! key, so the revealed secret alone does not expose it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authz_contract::{ContractCall, ContractError, GrantArtifacts, RequestId, RequestState};
use crate::crypto::{self, Address, Ciphertext, DetRng, KeyPair, Secret, SymmetricKey};
use crate::ledger::{Ledger, LedgerError, TxId, TxPayload, TxStatus};
use crate::roles_model1::{AsBehavior, ClientOutcome, Credentials};
use crate::thing::AAD_THING_POP;
use crate::tokens::{issue_token, EncodingError, SignedToken};
use crate::{Amount, Height};

pub use crate::roles_model1::AsParams;

pub const AAD_S_TOKEN: &[u8] = b"authchain/model2/E_s(token)";
pub const AAD_CLIENT_POP: &[u8] = b"authchain/model2/E_C(PoP)";
pub const AAD_TOKEN_WRAP: &[u8] = b"authchain/model2/E_C(token)";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Model2Error {
    #[error("price {price} exceeds the client's limit {max}")]
    PriceRejected { price: Amount, max: Amount },
    #[error("unknown scope {0:?}")]
    UnknownScope(String),
    #[error("request not granted (state {0:?})")]
    NotGranted(RequestState),
    #[error("request not claimed (state {0:?})")]
    NotClaimed(RequestState),
    #[error("malformed grant: {0}")]
    BadArtifacts(&'static str),
    #[error("token: {0}")]
    Token(#[from] EncodingError),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
}

impl From<ContractError> for Model2Error {
    fn from(e: ContractError) -> Self {
        Self::Ledger(e.into())
    }
}

fn tx_status(ledger: &Ledger, tx: &TxId) -> Option<TxStatus> {
    ledger.receipt(tx).map(|r| r.status.clone())
}

/// Ledger cursor of the authorization server: the last height scanned for
/// new requests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatcherState {
    pub scanned_to: Height,
}

impl WatcherState {
    /// Successful `request_access` calls to `contract` mined since the last scan.
    pub fn poll(&mut self, ledger: &Ledger, contract: &Address) -> Vec<RequestId> {
        let mut found = Vec::new();
        for b in ledger.blocks().iter().filter(|b| b.height > self.scanned_to) {
            for (tx, r) in b.txs.iter().zip(&b.receipts) {
                let is_request = matches!(
                    &tx.payload,
                    TxPayload::ContractCall { contract: c, call: ContractCall::RequestAccess { .. } } if c == contract
                );
                if is_request && r.status.is_success() {
                    found.extend(r.created);
                }
            }
        }
        self.scanned_to = ledger.height();
        found
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AsPhase {
    Serving(TxId),
    Granted,
    Revealing(TxId),
    Done,
    Abandoned,
}

#[derive(Debug, Clone)]
struct AsSession {
    secret: Secret,
    phase: AsPhase,
}

#[derive(Debug)]
pub struct AuthServer2 {
    keys: KeyPair,
    k_thing_as: SymmetricKey,
    contract: Address,
    params: AsParams,
    behavior: AsBehavior,
    token_pk_wrap: bool,
    rng: DetRng,
    watcher: WatcherState,
    sessions: BTreeMap<RequestId, AsSession>,
}

impl AuthServer2 {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        keys: KeyPair,
        k_thing_as: SymmetricKey,
        contract: Address,
        params: AsParams,
        behavior: AsBehavior,
        token_pk_wrap: bool,
        rng: DetRng,
        watch_from: Height,
    ) -> Self {
        Self {
            keys,
            k_thing_as,
            contract,
            params,
            behavior,
            token_pk_wrap,
            rng,
            watcher: WatcherState { scanned_to: watch_from },
            sessions: BTreeMap::new(),
        }
    }

    pub fn address(&self) -> Address {
        self.keys.address()
    }

    pub fn secret(&self, id: &RequestId) -> Option<Secret> {
        self.sessions.get(id).map(|s| s.secret)
    }

    /// Builds the grant artifacts for a request and posts them.
    pub fn serve(&mut self, ledger: &mut Ledger, id: &RequestId) -> Result<TxId, Model2Error> {
        let req = ledger.read_request(&self.contract, id)?.clone();
        if req.state != RequestState::Requested {
            return Err(Model2Error::NotGranted(req.state));
        }
        let pop_key = SymmetricKey::random(&mut self.rng);
        let secret = Secret::random(&mut self.rng);
        let claims = self.params.claims(&req.scope, ledger.height(), &self.behavior, &mut self.rng);
        let token = issue_token(claims, &pop_key, &self.k_thing_as)?.encode()?;
        let token = if self.token_pk_wrap {
            crypto::pk_encrypt(&req.client_pub, &token, AAD_TOKEN_WRAP, &mut self.rng).to_bytes()
        } else {
            token
        };
        let pop_recipient = if self.behavior.tamper_package {
            KeyPair::generate(&mut self.rng).public()
        } else {
            req.client_pub
        };
        let artifacts = GrantArtifacts {
            e_thing_pop: crypto::encrypt(&self.k_thing_as, &pop_key.0, AAD_THING_POP, &mut self.rng),
            e_client_pop: crypto::pk_encrypt(&pop_recipient, &pop_key.0, AAD_CLIENT_POP, &mut self.rng),
            e_s_token: crypto::encrypt(&secret.as_key(), &token, AAD_S_TOKEN, &mut self.rng),
            hash_lock: secret.hash_lock(),
        };
        let tx = ledger.call_contract(
            self.address(),
            self.contract,
            ContractCall::PostGrant { request_id: *id, artifacts },
        )?;
        self.sessions.insert(*id, AsSession { secret, phase: AsPhase::Serving(tx) });
        Ok(tx)
    }

    pub fn reveal(&mut self, ledger: &mut Ledger, id: &RequestId) -> Result<TxId, Model2Error> {
        let session = self.sessions.get_mut(id).ok_or(ContractError::UnknownRequest)?;
        let preimage = if self.behavior.wrong_preimage { Secret::random(&mut self.rng) } else { session.secret };
        let tx = ledger.call_contract(
            self.keys.address(),
            self.contract,
            ContractCall::RevealSecret { request_id: *id, preimage },
        )?;
        session.phase = AsPhase::Revealing(tx);
        Ok(tx)
    }

    /// Serves new requests and reveals for acknowledged ones.
    pub fn step(&mut self, ledger: &mut Ledger) -> Vec<TxId> {
        let mut submitted = Vec::new();
        for id in self.watcher.poll(ledger, &self.contract) {
            if !self.sessions.contains_key(&id) {
                submitted.extend(self.serve(ledger, &id).ok());
            }
        }
        let mut to_reveal = Vec::new();
        for (id, s) in self.sessions.iter_mut() {
            match s.phase {
                AsPhase::Serving(tx) => match tx_status(ledger, &tx) {
                    Some(TxStatus::Success) => s.phase = AsPhase::Granted,
                    Some(TxStatus::Failed { .. }) => s.phase = AsPhase::Abandoned,
                    None => {}
                },
                AsPhase::Granted => {
                    let Ok(req) = ledger.read_request(&self.contract, id) else { continue };
                    let open = ledger.height() + 1 < req.timeout_height;
                    if req.state != RequestState::Granted || !open {
                        s.phase = AsPhase::Abandoned;
                    } else if req.acknowledged() && !self.behavior.withhold_secret {
                        to_reveal.push(*id);
                    }
                }
                AsPhase::Revealing(tx) => match tx_status(ledger, &tx) {
                    Some(TxStatus::Success) => s.phase = AsPhase::Done,
                    Some(TxStatus::Failed { .. }) => s.phase = AsPhase::Abandoned,
                    None => {}
                },
                AsPhase::Done | AsPhase::Abandoned => {}
            }
        }
        for id in to_reveal {
            submitted.extend(self.reveal(ledger, &id).ok());
        }
        submitted
    }

    pub fn is_idle(&self) -> bool {
        self.sessions.values().all(|s| matches!(s.phase, AsPhase::Done | AsPhase::Abandoned))
    }
}

pub fn client_request(
    ledger: &mut Ledger,
    keys: &KeyPair,
    contract: &Address,
    scope: &str,
    max_price: Option<Amount>,
) -> Result<TxId, Model2Error> {
    let price = ledger
        .contract(contract)
        .ok_or(LedgerError::UnknownContract)?
        .policy
        .price(scope)
        .ok_or_else(|| Model2Error::UnknownScope(scope.to_string()))?;
    if let Some(max) = max_price {
        if price > max {
            return Err(Model2Error::PriceRejected { price, max });
        }
    }
    let call = ContractCall::RequestAccess { client_pub: keys.public(), scope: scope.to_string(), deposit: price };
    Ok(ledger.call_contract(keys.address(), *contract, call)?)
}

/// Checks what can be checked before paying: the PoP key opens under the
/// client's key and is bound to nothing else yet.
pub fn validate_artifacts(keys: &KeyPair, a: &GrantArtifacts) -> Result<SymmetricKey, Model2Error> {
    let pop = crypto::pk_decrypt(keys, &a.e_client_pop, AAD_CLIENT_POP)
        .map_err(|_| Model2Error::BadArtifacts("E_C(PoP) does not open"))?;
    SymmetricKey::from_slice(&pop).map_err(|_| Model2Error::BadArtifacts("PoP key length"))
}

pub fn client_acknowledge(
    ledger: &mut Ledger,
    keys: &KeyPair,
    contract: &Address,
    id: &RequestId,
) -> Result<TxId, Model2Error> {
    let req = ledger.read_request(contract, id)?;
    let Some(a) = req.artifacts.as_ref().filter(|_| req.state == RequestState::Granted) else {
        return Err(Model2Error::NotGranted(req.state));
    };
    validate_artifacts(keys, a)?;
    Ok(ledger.call_contract(keys.address(), *contract, ContractCall::Acknowledge { request_id: *id })?)
}

pub fn client_finalize(
    ledger: &Ledger,
    keys: &KeyPair,
    contract: &Address,
    id: &RequestId,
    token_pk_wrap: bool,
) -> Result<Credentials, Model2Error> {
    let req = ledger.read_request(contract, id)?;
    let (Some(s), Some(a)) = (req.revealed_preimage, req.artifacts.as_ref()) else {
        return Err(Model2Error::NotClaimed(req.state));
    };
    let pop_key = validate_artifacts(keys, a)?;
    let inner = crypto::decrypt(&s.as_key(), &a.e_s_token, AAD_S_TOKEN)
        .map_err(|_| Model2Error::BadArtifacts("E_s(token) does not open"))?;
    let bytes = if token_pk_wrap {
        let c = Ciphertext::from_bytes(&inner).map_err(|_| Model2Error::BadArtifacts("wrapped token"))?;
        crypto::pk_decrypt(keys, &c, AAD_TOKEN_WRAP).map_err(|_| Model2Error::BadArtifacts("wrapped token"))?
    } else {
        inner
    };
    let token = SignedToken::decode(&bytes)?;
    if token.token.pop_binding != crypto::hash(&pop_key.0) {
        return Err(Model2Error::BadArtifacts("PoP binding"));
    }
    Ok(Credentials { token, pop_key, e_thing_pop: a.e_thing_pop.clone() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ClientPhase {
    Idle,
    Requesting(TxId),
    Open { id: RequestId, ack: Option<TxId>, rejected: bool },
    Refunding { id: RequestId, tx: TxId },
    Done(ClientOutcome),
}

/// Client state machine for the contract flow.
#[derive(Debug)]
pub struct Client2 {
    keys: KeyPair,
    contract: Address,
    scope: String,
    max_price: Option<Amount>,
    token_pk_wrap: bool,
    phase: ClientPhase,
    request_id: Option<RequestId>,
}

impl Client2 {
    pub fn new(
        keys: KeyPair,
        contract: Address,
        scope: impl Into<String>,
        max_price: Option<Amount>,
        token_pk_wrap: bool,
    ) -> Self {
        Self {
            keys,
            contract,
            scope: scope.into(),
            max_price,
            token_pk_wrap,
            phase: ClientPhase::Idle,
            request_id: None,
        }
    }

    pub fn address(&self) -> Address {
        self.keys.address()
    }

    pub fn request_id(&self) -> Option<RequestId> {
        self.request_id
    }

    pub fn outcome(&self) -> Option<&ClientOutcome> {
        match &self.phase {
            ClientPhase::Done(o) => Some(o),
            _ => None,
        }
    }

    fn finish(&mut self, o: ClientOutcome) -> Option<TxId> {
        self.phase = ClientPhase::Done(o);
        None
    }

    /// Advances one tick; returns the transaction submitted, if any.
    pub fn step(&mut self, ledger: &mut Ledger) -> Option<TxId> {
        match self.phase.clone() {
            ClientPhase::Idle => {
                match client_request(ledger, &self.keys, &self.contract, &self.scope, self.max_price) {
                    Ok(tx) => {
                        self.phase = ClientPhase::Requesting(tx);
                        Some(tx)
                    }
                    Err(e) => self.finish(ClientOutcome::Aborted(e.to_string())),
                }
            }
            ClientPhase::Requesting(tx) => match ledger.receipt(&tx) {
                Some(r) if r.status.is_success() => {
                    let id = r.created.expect("request_access creates a request");
                    self.request_id = Some(id);
                    self.phase = ClientPhase::Open { id, ack: None, rejected: false };
                    self.step(ledger)
                }
                Some(r) => {
                    let msg = r.status.clone().into_result().unwrap_err().to_string();
                    self.finish(ClientOutcome::Aborted(msg))
                }
                None => None,
            },
            ClientPhase::Open { id, ack, rejected } => {
                let req = ledger.read_request(&self.contract, &id).expect("own request exists").clone();
                match req.state {
                    RequestState::Claimed => {
                        return match client_finalize(ledger, &self.keys, &self.contract, &id, self.token_pk_wrap) {
                            Ok(c) => self.finish(ClientOutcome::Finalized(Box::new(c))),
                            Err(e) => self.finish(ClientOutcome::Disputed(e.to_string())),
                        };
                    }
                    RequestState::Refunded => return self.finish(ClientOutcome::Refunded),
                    _ => {}
                }
                if ledger.height() + 1 >= req.timeout_height {
                    let call = ContractCall::Refund { request_id: id };
                    return match ledger.call_contract(self.address(), self.contract, call) {
                        Ok(tx) => {
                            self.phase = ClientPhase::Refunding { id, tx };
                            Some(tx)
                        }
                        Err(_) => None,
                    };
                }
                if req.state != RequestState::Granted || rejected {
                    return None;
                }
                match ack.map(|tx| tx_status(ledger, &tx)) {
                    None => match client_acknowledge(ledger, &self.keys, &self.contract, &id) {
                        Ok(tx) => {
                            self.phase = ClientPhase::Open { id, ack: Some(tx), rejected };
                            Some(tx)
                        }
                        Err(_) => {
                            self.phase = ClientPhase::Open { id, ack, rejected: true };
                            None
                        }
                    },
                    Some(_) => None,
                }
            }
            ClientPhase::Refunding { id, tx } => match tx_status(ledger, &tx) {
                Some(TxStatus::Success) => self.finish(ClientOutcome::Refunded),
                Some(TxStatus::Failed { .. }) => {
                    self.phase = ClientPhase::Open { id, ack: None, rejected: true };
                    self.step(ledger)
                }
                None => None,
            },
            ClientPhase::Done(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::authz_contract::Policy;
    use crate::crypto::seeded_rng;
    use crate::ledger::LedgerConfig;
    use crate::tokens;

    const K: SymmetricKey = SymmetricKey([7; 32]);

    struct World {
        ledger: Ledger,
        auth: AuthServer2,
        client: KeyPair,
        contract: Address,
        owner: Address,
    }

    fn world(behavior: AsBehavior, wrap: bool) -> World {
        let client = KeyPair::from_seed(&[1; 32]);
        let as_keys = KeyPair::from_seed(&[2; 32]);
        let owner = KeyPair::from_seed(&[3; 32]).address();
        let mut ledger = Ledger::new(LedgerConfig::default(), [(client.address(), 100)]);
        let policy = Policy {
            owner,
            prices: [("read".to_string(), 10)].into(),
            allowlist: None,
            required_events: vec![],
            timeout_blocks: 10,
            as_address: as_keys.address(),
        };
        let (tx, contract) = ledger.deploy_contract(owner, policy).unwrap();
        ledger.mine_until_included(&tx).unwrap().into_result().unwrap();
        let params = AsParams {
            issuer: "as-1".into(),
            audience: "thing-01".into(),
            prices: [("read".to_string(), 10)].into(),
            owner,
            timeout_blocks: 10,
            token_lifetime: 100,
        };
        let h = ledger.height();
        let auth = AuthServer2::new(as_keys, K, contract, params, behavior, wrap, seeded_rng(5), h);
        World { ledger, auth, client, contract, owner }
    }

    fn run(w: &mut World, wrap: bool, max_ticks: usize) -> Client2 {
        let mut c = Client2::new(w.client.clone(), w.contract, "read", None, wrap);
        for _ in 0..max_ticks {
            c.step(&mut w.ledger);
            w.auth.step(&mut w.ledger);
            if c.outcome().is_some() {
                break;
            }
            w.ledger.mine_block();
        }
        c
    }

    #[test]
    fn honest_flow_four_transactions() {
        for wrap in [false, true] {
            let mut w = world(AsBehavior::default(), wrap);
            let start = w.ledger.height();
            let c = run(&mut w, wrap, 20);
            let Some(ClientOutcome::Finalized(creds)) = c.outcome() else { panic!("{:?}", c.outcome()) };
            assert!(tokens::verify_token(&creds.token, &K, 5, "read", "thing-01").is_valid());
            assert_eq!(w.ledger.balance(&w.owner), 10);
            let txs: usize = w.ledger.blocks().iter().filter(|b| b.height > start).map(|b| b.txs.len()).sum();
            assert_eq!(txs, 4);
            assert!(w.ledger.is_conserved());
        }
    }

    #[test]
    fn withheld_secret_refunds() {
        let mut w = world(AsBehavior { withhold_secret: true, ..Default::default() }, false);
        let c = run(&mut w, false, 30);
        assert_eq!(c.outcome(), Some(&ClientOutcome::Refunded));
        assert_eq!(w.ledger.balance(&w.client.address()), 100);
        assert_eq!(w.ledger.balance(&w.owner), 0);
    }

    #[test]
    fn undecryptable_pop_is_never_acknowledged() {
        let mut w = world(AsBehavior { tamper_package: true, ..Default::default() }, false);
        let c = run(&mut w, false, 30);
        assert_eq!(c.outcome(), Some(&ClientOutcome::Refunded));
        let req = w.ledger.read_request(&w.contract, &c.request_id().unwrap()).unwrap();
        assert!(!req.acknowledged());
    }

    #[test]
    fn price_limit_stops_request() {
        let mut w = world(AsBehavior::default(), false);
        let err = client_request(&mut w.ledger, &w.client, &w.contract, "read", Some(5)).unwrap_err();
        assert_eq!(err, Model2Error::PriceRejected { price: 10, max: 5 });
    }

    #[test]
    fn wrapped_token_needs_client_key() {
        let mut w = world(AsBehavior::default(), true);
        let c = run(&mut w, true, 20);
        let id = c.request_id().unwrap();
        let req = w.ledger.read_request(&w.contract, &id).unwrap();
        let s = req.revealed_preimage.unwrap();
        let inner = crypto::decrypt(&s.as_key(), &req.artifacts.as_ref().unwrap().e_s_token, AAD_S_TOKEN).unwrap();
        assert!(SignedToken::decode(&inner).is_err());
        let stranger = KeyPair::from_seed(&[9; 32]);
        assert!(client_finalize(&w.ledger, &stranger, &w.contract, &id, true).is_err());
    }
}
