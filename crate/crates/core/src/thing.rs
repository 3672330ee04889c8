//! The constrained resource server.
//!
//! After provisioning with the key it shares with its authorization server,
//! a `Thing` needs nothing else: tokens are verified locally and possession
//! of the PoP key is proven with a one-round challenge-response bound to the
//! presented token:
//!
//! ```text
//! client -> thing : SignedToken, E_Thing(PoP)
//! thing  -> client: nonce (16 bytes)
//! client -> thing : HMAC-SHA-256(PoP, nonce ∥ token tag)
//! thing  -> client: payload | deny
//! ```
//!
//! The type holds no handle to the ledger or to any server, so every
//! decision is made from its own state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, hex_array, Ciphertext, DetRng, Digest, SymmetricKey};
use crate::tokens::{self, InvalidReason, SignedToken, Verdict};
use crate::Height;

pub const CHALLENGE_LEN: usize = 16;

/// Associated data binding the Thing's copy of the PoP key.
pub const AAD_THING_POP: &[u8] = b"authchain/E_Thing(PoP)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PopChallenge(#[serde(with = "hex_array")] pub [u8; CHALLENGE_LEN]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopResponse(pub Digest);

impl PopResponse {
    /// What an honest holder of `pop_key` answers.
    pub fn compute(pop_key: &SymmetricKey, challenge: &PopChallenge, token: &SignedToken) -> Self {
        Self(crypto::mac(pop_key, &pop_input(challenge, token)))
    }
}

fn pop_input(challenge: &PopChallenge, token: &SignedToken) -> Vec<u8> {
    let mut data = Vec::with_capacity(CHALLENGE_LEN + 32);
    data.extend_from_slice(&challenge.0);
    data.extend_from_slice(&token.tag.0);
    data
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error, Serialize, Deserialize)]
pub enum DenyReason {
    #[error("token MAC does not verify")]
    BadMac,
    #[error("token is for another audience")]
    WrongAudience,
    #[error("PoP key does not match the token binding")]
    PopBindingMismatch,
    #[error("token expired")]
    Expired,
    #[error("proof of possession failed")]
    BadPop,
    #[error("scope not granted")]
    ScopeDenied,
    #[error("challenge already used")]
    ReplayedChallenge,
    #[error("challenge was never issued")]
    UnknownChallenge,
    #[error("no such resource")]
    NoResource,
}

impl From<InvalidReason> for DenyReason {
    fn from(r: InvalidReason) -> Self {
        match r {
            InvalidReason::BadMac => Self::BadMac,
            InvalidReason::Expired => Self::Expired,
            InvalidReason::ScopeDenied => Self::ScopeDenied,
            InvalidReason::WrongAudience => Self::WrongAudience,
        }
    }
}

#[derive(Debug, Clone)]
struct Pending {
    token: SignedToken,
    pop_key: SymmetricKey,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ThingStats {
    pub challenges_issued: u64,
    pub grants: u64,
    pub denials: BTreeMap<String, u64>,
}

#[derive(Debug)]
pub struct Thing {
    thing_id: String,
    k_thing_as: SymmetricKey,
    clock: Height,
    resources: BTreeMap<String, Vec<u8>>,
    rng: DetRng,
    outstanding: BTreeMap<PopChallenge, Pending>,
    consumed: BTreeSet<PopChallenge>,
    stats: ThingStats,
}

impl Thing {
    pub fn new(
        thing_id: impl Into<String>,
        k_thing_as: SymmetricKey,
        resources: BTreeMap<String, Vec<u8>>,
        rng: DetRng,
    ) -> Self {
        Self {
            thing_id: thing_id.into(),
            k_thing_as,
            clock: 0,
            resources,
            rng,
            outstanding: BTreeMap::new(),
            consumed: BTreeSet::new(),
            stats: ThingStats::default(),
        }
    }

    pub fn id(&self) -> &str {
        &self.thing_id
    }

    /// Fed by the harness with the current block height.
    pub fn set_clock(&mut self, now: Height) {
        self.clock = now;
    }

    pub fn clock(&self) -> Height {
        self.clock
    }

    pub fn stats(&self) -> &ThingStats {
        &self.stats
    }

    fn deny<T>(&mut self, reason: DenyReason) -> Result<T, DenyReason> {
        *self.stats.denials.entry(format!("{reason:?}")).or_insert(0) += 1;
        Err(reason)
    }

    pub fn begin_access(
        &mut self,
        st: &SignedToken,
        e_thing_pop: &Ciphertext,
    ) -> Result<PopChallenge, DenyReason> {
        if let Verdict::Invalid(r) = tokens::verify_integrity(st, &self.k_thing_as, self.clock, &self.thing_id) {
            return self.deny(r.into());
        }
        let pop_key = match crypto::decrypt(&self.k_thing_as, e_thing_pop, AAD_THING_POP)
            .ok()
            .and_then(|b| SymmetricKey::from_slice(&b).ok())
        {
            Some(k) if crypto::hash(&k.0) == st.token.pop_binding => k,
            _ => return self.deny(DenyReason::PopBindingMismatch),
        };
        let mut nonce = [0u8; CHALLENGE_LEN];
        loop {
            rand::RngCore::fill_bytes(&mut self.rng, &mut nonce);
            let c = PopChallenge(nonce);
            if !self.consumed.contains(&c) && !self.outstanding.contains_key(&c) {
                break;
            }
        }
        let challenge = PopChallenge(nonce);
        self.outstanding.insert(challenge, Pending { token: st.clone(), pop_key });
        self.stats.challenges_issued += 1;
        Ok(challenge)
    }

    /// Consumes the challenge whatever the outcome.
    pub fn complete_access(
        &mut self,
        challenge: &PopChallenge,
        response: &PopResponse,
        required_scope: &str,
    ) -> Result<Vec<u8>, DenyReason> {
        if self.consumed.contains(challenge) {
            return self.deny(DenyReason::ReplayedChallenge);
        }
        let Some(pending) = self.outstanding.remove(challenge) else {
            return self.deny(DenyReason::UnknownChallenge);
        };
        self.consumed.insert(*challenge);
        if !crypto::mac_verify(&pending.pop_key, &pop_input(challenge, &pending.token), &response.0) {
            return self.deny(DenyReason::BadPop);
        }
        if self.clock >= pending.token.token.expires_at {
            return self.deny(DenyReason::Expired);
        }
        if !pending.token.token.has_scope(required_scope) {
            return self.deny(DenyReason::ScopeDenied);
        }
        match self.resources.get(required_scope).cloned() {
            Some(payload) => {
                self.stats.grants += 1;
                Ok(payload)
            }
            None => self.deny(DenyReason::NoResource),
        }
    }
}
