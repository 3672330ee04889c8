//! Off-chain authorization with on-chain payment: the client and the
//! authorization server talk over a secure channel and settle through a
//! hash time-locked contract whose creation also records two commitments.
//!
//! ```text
//! C  -> AS : AccessRequest                                   (secure)
//! AS -> L  : HtlcCreate{payer C, payee owner, h = H(s),
//!                       commitments [commit1, commit2]}      tx 1
//! AS -> C  : GrantPackage{PoP, E_Thing(PoP), E_s(token), h}  (secure)
//! C  -> L  : HtlcDeposit                                     tx 2
//! AS -> L  : HtlcClaim{s}                                    tx 3
//! C        : reads s, decrypts the token
//! ```
//!
//! `commit1 = H(signed token)` and
//! `commit2 = H(E_Thing(PoP) ∥ PoP ∥ E_s(token))`, with ciphertexts in their
//! `nonce ∥ body ∥ tag` form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Address, Ciphertext, DetRng, Digest, KeyPair, Secret, SymmetricKey};
use crate::ledger::{self, HtlcId, HtlcState, Ledger, LedgerError, TxId, TxStatus};
use crate::thing::AAD_THING_POP;
use crate::tokens::{issue_token, EncodingError, SignedToken, TokenClaims, SESSION_NONCE_LEN};
use crate::transcript::MessageBody;
use crate::{Amount, Height};

pub const AAD_S_TOKEN: &[u8] = b"authchain/model1/E_s(token)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRequest {
    pub client: Address,
    pub client_pub: crypto::PublicKey,
    pub scope: String,
}

impl AccessRequest {
    pub fn to_message(&self) -> MessageBody {
        MessageBody::AccessRequest { client: self.client, client_pub: self.client_pub, scope: self.scope.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantPackage {
    pub pop_key: SymmetricKey,
    pub e_thing_pop: Ciphertext,
    pub e_s_token: Ciphertext,
    pub hash_lock: Digest,
    pub price: Amount,
    pub htlc_id: HtlcId,
    pub commit1: Digest,
    pub commit2: Digest,
}

impl GrantPackage {
    pub fn to_message(&self) -> MessageBody {
        MessageBody::GrantPackage {
            pop_key: self.pop_key,
            e_thing_pop: self.e_thing_pop.clone(),
            e_s_token: self.e_s_token.clone(),
            hash_lock: self.hash_lock,
            price: self.price,
            htlc_id: self.htlc_id,
            commit1: self.commit1,
            commit2: self.commit2,
        }
    }

    pub fn from_message(body: &MessageBody) -> Option<Self> {
        match body {
            MessageBody::GrantPackage { pop_key, e_thing_pop, e_s_token, hash_lock, price, htlc_id, commit1, commit2 } => {
                Some(Self {
                    pop_key: *pop_key,
                    e_thing_pop: e_thing_pop.clone(),
                    e_s_token: e_s_token.clone(),
                    hash_lock: *hash_lock,
                    price: *price,
                    htlc_id: *htlc_id,
                    commit1: *commit1,
                    commit2: *commit2,
                })
            }
            _ => None,
        }
    }

    /// commit2 recomputed from the package contents.
    pub fn recompute_commit2(&self) -> Digest {
        commitment2(&self.e_thing_pop, &self.pop_key, &self.e_s_token)
    }
}

pub fn commitment2(e_thing_pop: &Ciphertext, pop_key: &SymmetricKey, e_s_token: &Ciphertext) -> Digest {
    crypto::hash_concat([&e_thing_pop.to_bytes()[..], &pop_key.0, &e_s_token.to_bytes()])
}

/// A commitment that does not match what was recorded on the ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitEvidence {
    pub commitment: String,
    pub on_chain: Option<Digest>,
    pub recomputed: Digest,
    pub htlc_id: HtlcId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Model1Error {
    #[error("unknown scope {0:?}")]
    UnknownScope(String),
    #[error("price {price} exceeds the client's limit {max}")]
    PriceRejected { price: Amount, max: Amount },
    #[error("{} does not match the ledger", .0.commitment)]
    CommitMismatch(Box<CommitEvidence>),
    #[error("HTLC does not match the package: {0}")]
    HtlcMismatch(&'static str),
    #[error("HTLC not claimed (state {0:?})")]
    NotClaimed(HtlcState),
    #[error("token ciphertext does not decrypt under the revealed secret")]
    Decrypt,
    #[error("token: {0}")]
    Token(#[from] EncodingError),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
}

/// Misbehaviour switches for the authorization server.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsBehavior {
    /// Never publish the secret.
    pub withhold_secret: bool,
    /// Publish a secret that does not open the lock.
    pub wrong_preimage: bool,
    /// Hand the client a token ciphertext other than the committed one.
    pub tamper_package: bool,
    /// Issue the token for another audience.
    pub wrong_audience: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsParams {
    pub issuer: String,
    pub audience: String,
    pub prices: BTreeMap<String, Amount>,
    pub owner: Address,
    pub timeout_blocks: u64,
    pub token_lifetime: u64,
}

impl AsParams {
    pub(crate) fn claims(&self, scope: &str, now: Height, behavior: &AsBehavior, rng: &mut DetRng) -> TokenClaims {
        let mut session_nonce = [0u8; SESSION_NONCE_LEN];
        rand::RngCore::fill_bytes(rng, &mut session_nonce);
        let audience =
            if behavior.wrong_audience { format!("{}-other", self.audience) } else { self.audience.clone() };
        TokenClaims {
            issuer: self.issuer.clone(),
            audience,
            scopes: [scope.to_string()].into(),
            issued_at: now,
            expires_at: now + self.token_lifetime.max(1),
            session_nonce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AsPhase {
    Offered,
    Claiming(TxId),
    Done,
    Abandoned,
}

#[derive(Debug, Clone)]
struct AsSession {
    secret: Secret,
    phase: AsPhase,
}

#[derive(Debug)]
pub struct AuthServer1 {
    keys: KeyPair,
    k_thing_as: SymmetricKey,
    params: AsParams,
    behavior: AsBehavior,
    rng: DetRng,
    sessions: BTreeMap<HtlcId, AsSession>,
}

impl AuthServer1 {
    pub fn new(keys: KeyPair, k_thing_as: SymmetricKey, params: AsParams, behavior: AsBehavior, rng: DetRng) -> Self {
        Self { keys, k_thing_as, params, behavior, rng, sessions: BTreeMap::new() }
    }

    pub fn address(&self) -> Address {
        self.keys.address()
    }

    pub fn secret(&self, id: &HtlcId) -> Option<Secret> {
        self.sessions.get(id).map(|s| s.secret)
    }

    /// Issues the token, submits the composite HTLC creation and returns
    /// the package for the client.
    pub fn handle_request(&mut self, ledger: &mut Ledger, req: &AccessRequest) -> Result<GrantPackage, Model1Error> {
        let price = *self.params.prices.get(&req.scope).ok_or_else(|| Model1Error::UnknownScope(req.scope.clone()))?;
        let now = ledger.height();
        let pop_key = SymmetricKey::random(&mut self.rng);
        let secret = Secret::random(&mut self.rng);
        let claims = self.params.claims(&req.scope, now, &self.behavior, &mut self.rng);
        let token = issue_token(claims, &pop_key, &self.k_thing_as)?;
        let e_thing_pop = crypto::encrypt(&self.k_thing_as, &pop_key.0, AAD_THING_POP, &mut self.rng);
        let e_s_token = crypto::encrypt(&secret.as_key(), &token.encode()?, AAD_S_TOKEN, &mut self.rng);
        let hash_lock = secret.hash_lock();
        let commit1 = token.digest()?;
        let commit2 = commitment2(&e_thing_pop, &pop_key, &e_s_token);
        let (_, htlc_id) = ledger.htlc_create(
            self.address(),
            req.client,
            self.params.owner,
            price,
            hash_lock,
            now + self.params.timeout_blocks,
            vec![commit1, commit2],
        )?;
        let e_s_token = if self.behavior.tamper_package {
            let mut other = token.clone();
            other.tag.0[0] ^= 1;
            crypto::encrypt(&secret.as_key(), &other.encode()?, AAD_S_TOKEN, &mut self.rng)
        } else {
            e_s_token
        };
        self.sessions.insert(htlc_id, AsSession { secret, phase: AsPhase::Offered });
        Ok(GrantPackage { pop_key, e_thing_pop, e_s_token, hash_lock, price, htlc_id, commit1, commit2 })
    }

    /// Claims the deposit by publishing the secret.
    pub fn reveal(&mut self, ledger: &mut Ledger, id: &HtlcId) -> Result<TxId, Model1Error> {
        let session = self.sessions.get_mut(id).ok_or(LedgerError::UnknownHtlc)?;
        let preimage = if self.behavior.wrong_preimage { Secret::random(&mut self.rng) } else { session.secret };
        let tx = ledger.htlc_claim(self.keys.address(), *id, preimage)?;
        session.phase = AsPhase::Claiming(tx);
        Ok(tx)
    }

    /// Claims every deposited HTLC whose claim window is still open.
    pub fn step(&mut self, ledger: &mut Ledger) -> Vec<TxId> {
        let mut to_claim = Vec::new();
        for (id, s) in self.sessions.iter_mut() {
            match s.phase {
                AsPhase::Offered => {
                    let Some(h) = ledger.htlc(id) else { continue };
                    let open = ledger.height() + 1 < h.timeout_height;
                    match h.state {
                        HtlcState::Deposited if open && !self.behavior.withhold_secret => to_claim.push(*id),
                        HtlcState::Created | HtlcState::Deposited if open => {}
                        _ => s.phase = AsPhase::Abandoned,
                    }
                }
                AsPhase::Claiming(tx) => match ledger.receipt(&tx).map(|r| &r.status) {
                    Some(TxStatus::Success) => s.phase = AsPhase::Done,
                    Some(TxStatus::Failed { .. }) => s.phase = AsPhase::Abandoned,
                    None => {}
                },
                AsPhase::Done | AsPhase::Abandoned => {}
            }
        }
        to_claim.into_iter().filter_map(|id| self.reveal(ledger, &id).ok()).collect()
    }

    pub fn is_idle(&self) -> bool {
        self.sessions.values().all(|s| matches!(s.phase, AsPhase::Done | AsPhase::Abandoned))
    }
}

/// Commitments recorded by the transaction that created `htlc_id`.
pub fn recorded_commitments(ledger: &Ledger, htlc_id: &HtlcId) -> Vec<Digest> {
    ledger.hash_records().iter().filter(|r| ledger::htlc_id_for(&r.tx_id) == *htlc_id).map(|r| r.value).collect()
}

fn check_commit(
    name: &str,
    on_chain: Option<Digest>,
    recomputed: Digest,
    htlc_id: HtlcId,
) -> Result<(), Model1Error> {
    if on_chain == Some(recomputed) {
        Ok(())
    } else {
        Err(Model1Error::CommitMismatch(Box::new(CommitEvidence {
            commitment: name.to_string(),
            on_chain,
            recomputed,
            htlc_id,
        })))
    }
}

/// Checks the package against the HTLC and commitments on the ledger
/// before any money moves.
pub fn verify_package(ledger: &Ledger, client: &Address, pkg: &GrantPackage) -> Result<(), Model1Error> {
    let h = ledger.htlc(&pkg.htlc_id).ok_or(LedgerError::UnknownHtlc)?;
    if h.payer != *client {
        return Err(Model1Error::HtlcMismatch("payer"));
    }
    if h.hash_lock != pkg.hash_lock {
        return Err(Model1Error::HtlcMismatch("hash lock"));
    }
    if h.amount != pkg.price {
        return Err(Model1Error::HtlcMismatch("amount"));
    }
    let recorded = recorded_commitments(ledger, &pkg.htlc_id);
    check_commit("commit2", recorded.get(1).copied(), pkg.recompute_commit2(), pkg.htlc_id)?;
    if recorded.first() != Some(&pkg.commit1) {
        return Err(Model1Error::HtlcMismatch("commit1"));
    }
    Ok(())
}

pub fn client_deposit(
    ledger: &mut Ledger,
    client: &Address,
    pkg: &GrantPackage,
    max_price: Option<Amount>,
) -> Result<TxId, Model1Error> {
    if let Some(max) = max_price {
        if pkg.price > max {
            return Err(Model1Error::PriceRejected { price: pkg.price, max });
        }
    }
    Ok(ledger.htlc_deposit(*client, pkg.htlc_id)?)
}

/// Reads the revealed secret, decrypts the token and checks both
/// commitments. A mismatch comes back with the ledger-side value as
/// evidence.
pub fn client_finalize(ledger: &Ledger, pkg: &GrantPackage) -> Result<SignedToken, Model1Error> {
    let h = ledger.htlc(&pkg.htlc_id).ok_or(LedgerError::UnknownHtlc)?;
    let Some(secret) = ledger.read_preimage(&pkg.htlc_id)? else {
        return Err(Model1Error::NotClaimed(h.state));
    };
    if secret.hash_lock() != pkg.hash_lock {
        return Err(Model1Error::HtlcMismatch("hash lock"));
    }
    let recorded = recorded_commitments(ledger, &pkg.htlc_id);
    check_commit("commit2", recorded.get(1).copied(), pkg.recompute_commit2(), pkg.htlc_id)?;
    let bytes = crypto::decrypt(&secret.as_key(), &pkg.e_s_token, AAD_S_TOKEN).map_err(|_| Model1Error::Decrypt)?;
    check_commit("commit1", recorded.first().copied(), crypto::hash(&bytes), pkg.htlc_id)?;
    Ok(SignedToken::decode(&bytes)?)
}

/// What the client ends up holding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientOutcome {
    Finalized(Box<Credentials>),
    Refunded,
    /// Stopped before paying.
    Aborted(String),
    /// Paid, then found the delivered material inconsistent.
    Disputed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credentials {
    pub token: SignedToken,
    pub pop_key: SymmetricKey,
    pub e_thing_pop: Ciphertext,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ClientPhase {
    Idle,
    Requested { at: Height },
    Depositing(TxId),
    Deposited,
    Refunding(TxId),
    Done(ClientOutcome),
}

/// Client state machine, advanced once per scheduler tick.
#[derive(Debug)]
pub struct Client1 {
    keys: KeyPair,
    scope: String,
    max_price: Option<Amount>,
    patience: u64,
    phase: ClientPhase,
    package: Option<GrantPackage>,
}

/// What a client tick produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientAction {
    None,
    Send(AccessRequest),
    Submitted(TxId),
    Finished,
}

impl Client1 {
    /// `patience` is how many blocks to wait for a grant before giving up.
    pub fn new(keys: KeyPair, scope: impl Into<String>, max_price: Option<Amount>, patience: u64) -> Self {
        Self { keys, scope: scope.into(), max_price, patience, phase: ClientPhase::Idle, package: None }
    }

    pub fn address(&self) -> Address {
        self.keys.address()
    }

    pub fn package(&self) -> Option<&GrantPackage> {
        self.package.as_ref()
    }

    pub fn outcome(&self) -> Option<&ClientOutcome> {
        match &self.phase {
            ClientPhase::Done(o) => Some(o),
            _ => None,
        }
    }

    pub fn receive(&mut self, pkg: GrantPackage) {
        if matches!(self.phase, ClientPhase::Requested { .. }) && self.package.is_none() {
            self.package = Some(pkg);
        }
    }

    fn finish(&mut self, o: ClientOutcome) -> ClientAction {
        self.phase = ClientPhase::Done(o);
        ClientAction::Finished
    }

    pub fn step(&mut self, ledger: &mut Ledger) -> ClientAction {
        let me = self.address();
        match self.phase.clone() {
            ClientPhase::Idle => {
                self.phase = ClientPhase::Requested { at: ledger.height() };
                ClientAction::Send(AccessRequest { client: me, client_pub: self.keys.public(), scope: self.scope.clone() })
            }
            ClientPhase::Requested { at } => {
                let Some(pkg) = self.package.clone() else {
                    if ledger.height() > at + self.patience {
                        return self.finish(ClientOutcome::Aborted("no grant received".into()));
                    }
                    return ClientAction::None;
                };
                if ledger.htlc(&pkg.htlc_id).is_none() {
                    if ledger.height() > at + self.patience {
                        return self.finish(ClientOutcome::Aborted("HTLC never appeared".into()));
                    }
                    return ClientAction::None;
                }
                if let Err(e) = verify_package(ledger, &me, &pkg) {
                    return self.finish(ClientOutcome::Aborted(e.to_string()));
                }
                match client_deposit(ledger, &me, &pkg, self.max_price) {
                    Ok(tx) => {
                        self.phase = ClientPhase::Depositing(tx);
                        ClientAction::Submitted(tx)
                    }
                    Err(e) => self.finish(ClientOutcome::Aborted(e.to_string())),
                }
            }
            ClientPhase::Depositing(tx) => match ledger.receipt(&tx).map(|r| r.status.clone()) {
                Some(TxStatus::Success) => {
                    self.phase = ClientPhase::Deposited;
                    self.step(ledger)
                }
                Some(TxStatus::Failed { error }) => self.finish(ClientOutcome::Aborted(error.to_string())),
                None => ClientAction::None,
            },
            ClientPhase::Deposited => {
                let pkg = self.package.clone().expect("deposited implies package");
                let h = ledger.htlc(&pkg.htlc_id).expect("deposited HTLC exists").clone();
                match h.state {
                    HtlcState::Claimed => match client_finalize(ledger, &pkg) {
                        Ok(token) => self.finish(ClientOutcome::Finalized(Box::new(Credentials {
                            token,
                            pop_key: pkg.pop_key,
                            e_thing_pop: pkg.e_thing_pop,
                        }))),
                        Err(e) => self.finish(ClientOutcome::Disputed(e.to_string())),
                    },
                    HtlcState::Refunded => self.finish(ClientOutcome::Refunded),
                    _ if ledger.height() + 1 >= h.timeout_height => match ledger.htlc_refund(me, pkg.htlc_id) {
                        Ok(tx) => {
                            self.phase = ClientPhase::Refunding(tx);
                            ClientAction::Submitted(tx)
                        }
                        Err(_) => ClientAction::None,
                    },
                    _ => ClientAction::None,
                }
            }
            ClientPhase::Refunding(tx) => match ledger.receipt(&tx).map(|r| r.status.is_success()) {
                Some(true) => self.finish(ClientOutcome::Refunded),
                Some(false) => {
                    self.phase = ClientPhase::Deposited;
                    ClientAction::None
                }
                None => ClientAction::None,
            },
            ClientPhase::Done(_) => ClientAction::None,
        }
    }
}
