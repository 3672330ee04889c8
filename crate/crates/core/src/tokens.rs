//! Self-contained access tokens, integrity-protected with the key the Thing
//! shares with its authorization server.
//!
//! # Canonical layout
//!
//! All integers are big-endian. Strings are UTF-8 prefixed with a `u16`
//! byte length.
//!
//! ```text
//! version        u8        = 0x01
//! issuer         u16 len ∥ bytes
//! audience       u16 len ∥ bytes
//! scope count    u16
//! scopes         (u16 len ∥ bytes)*   strictly ascending byte order
//! issued_at      u64
//! expires_at     u64
//! pop_binding    [u8; 32]  SHA-256 of the PoP key
//! session_nonce  [u8; 16]
//! ```
//!
//! A [`SignedToken`] is the canonical token followed by its 32-byte
//! HMAC-SHA-256 tag.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, hex_array, Digest, SymmetricKey, DIGEST_LEN};

pub const TOKEN_VERSION: u8 = 1;
pub const SESSION_NONCE_LEN: usize = 16;

pub use crate::Height;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodingError {
    #[error("token has no scopes")]
    NoScopes,
    #[error("empty scope string")]
    EmptyScope,
    #[error("expires_at {expires_at} is not after issued_at {issued_at}")]
    BadLifetime { issued_at: Height, expires_at: Height },
    #[error("{field} is {len} bytes, limit is 65535")]
    TooLong { field: &'static str, len: usize },
    #[error("input truncated while reading {0}")]
    Truncated(&'static str),
    #[error("unsupported token version {0}")]
    Version(u8),
    #[error("{0} is not valid UTF-8")]
    Utf8(&'static str),
    #[error("scopes are not in strictly ascending order")]
    NonCanonicalScopes,
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

/// Claims chosen by the authorization server before the PoP key is bound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenClaims {
    pub issuer: String,
    pub audience: String,
    pub scopes: BTreeSet<String>,
    pub issued_at: Height,
    pub expires_at: Height,
    pub session_nonce: [u8; SESSION_NONCE_LEN],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessToken {
    pub issuer: String,
    pub audience: String,
    pub scopes: BTreeSet<String>,
    pub issued_at: Height,
    pub expires_at: Height,
    pub pop_binding: Digest,
    #[serde(with = "hex_array")]
    pub session_nonce: [u8; SESSION_NONCE_LEN],
}

impl AccessToken {
    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.scopes.is_empty() {
            return Err(EncodingError::NoScopes);
        }
        if self.scopes.iter().any(String::is_empty) {
            return Err(EncodingError::EmptyScope);
        }
        if self.expires_at <= self.issued_at {
            return Err(EncodingError::BadLifetime {
                issued_at: self.issued_at,
                expires_at: self.expires_at,
            });
        }
        check_len("issuer", self.issuer.len())?;
        check_len("audience", self.audience.len())?;
        check_len("scope count", self.scopes.len())?;
        for s in &self.scopes {
            check_len("scope", s.len())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodingError> {
        self.validate()?;
        let mut out = Vec::with_capacity(128);
        out.push(TOKEN_VERSION);
        put_str(&mut out, &self.issuer);
        put_str(&mut out, &self.audience);
        out.extend_from_slice(&(self.scopes.len() as u16).to_be_bytes());
        // BTreeSet iterates in ascending byte order, which is the canonical order.
        for s in &self.scopes {
            put_str(&mut out, s);
        }
        out.extend_from_slice(&self.issued_at.to_be_bytes());
        out.extend_from_slice(&self.expires_at.to_be_bytes());
        out.extend_from_slice(&self.pop_binding.0);
        out.extend_from_slice(&self.session_nonce);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EncodingError> {
        let mut r = Reader(bytes);
        let t = Self::read(&mut r)?;
        if !r.0.is_empty() {
            return Err(EncodingError::Trailing(r.0.len()));
        }
        Ok(t)
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, EncodingError> {
        let version = r.take(1, "version")?[0];
        if version != TOKEN_VERSION {
            return Err(EncodingError::Version(version));
        }
        let issuer = r.string("issuer")?;
        let audience = r.string("audience")?;
        let count = r.u16("scope count")?;
        let mut scopes = BTreeSet::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let s = r.string("scope")?;
            if last.as_ref().is_some_and(|l| l.as_bytes() >= s.as_bytes()) {
                return Err(EncodingError::NonCanonicalScopes);
            }
            last = Some(s.clone());
            scopes.insert(s);
        }
        let issued_at = r.u64("issued_at")?;
        let expires_at = r.u64("expires_at")?;
        let pop_binding = Digest(r.array("pop_binding")?);
        let session_nonce = r.array("session_nonce")?;
        let t = Self { issuer, audience, scopes, issued_at, expires_at, pop_binding, session_nonce };
        t.validate()?;
        Ok(t)
    }

    pub fn has_scope(&self, scope: &str) -> bool {
        self.scopes.contains(scope)
    }
}

fn check_len(field: &'static str, len: usize) -> Result<(), EncodingError> {
    if len > u16::MAX as usize {
        return Err(EncodingError::TooLong { field, len });
    }
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], EncodingError> {
        if self.0.len() < n {
            return Err(EncodingError::Truncated(what));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], EncodingError> {
        Ok(self.take(N, what)?.try_into().expect("took N bytes"))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, EncodingError> {
        Ok(u16::from_be_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, EncodingError> {
        Ok(u64::from_be_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &'static str) -> Result<String, EncodingError> {
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| EncodingError::Utf8(what))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedToken {
    pub token: AccessToken,
    pub tag: Digest,
}

impl SignedToken {
    /// Canonical token bytes followed by the tag.
    pub fn encode(&self) -> Result<Vec<u8>, EncodingError> {
        let mut out = self.token.encode()?;
        out.extend_from_slice(&self.tag.0);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EncodingError> {
        if bytes.len() < DIGEST_LEN {
            return Err(EncodingError::Truncated("tag"));
        }
        let (body, tag) = bytes.split_at(bytes.len() - DIGEST_LEN);
        Ok(Self { token: AccessToken::decode(body)?, tag: Digest::from_slice(tag).expect("32 bytes") })
    }

    /// Hash of the canonical signed encoding; the value committed on-chain.
    pub fn digest(&self) -> Result<Digest, EncodingError> {
        Ok(crypto::hash(&self.encode()?))
    }
}

pub fn issue_token(
    claims: TokenClaims,
    pop_key: &SymmetricKey,
    k_thing_as: &SymmetricKey,
) -> Result<SignedToken, EncodingError> {
    let token = AccessToken {
        issuer: claims.issuer,
        audience: claims.audience,
        scopes: claims.scopes,
        issued_at: claims.issued_at,
        expires_at: claims.expires_at,
        pop_binding: crypto::hash(&pop_key.0),
        session_nonce: claims.session_nonce,
    };
    let tag = crypto::mac(k_thing_as, &token.encode()?);
    Ok(SignedToken { token, tag })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InvalidReason {
    BadMac,
    Expired,
    ScopeDenied,
    WrongAudience,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    Invalid(InvalidReason),
}

impl Verdict {
    pub fn is_valid(self) -> bool {
        self == Verdict::Valid
    }
}

/// Integrity, audience and expiry, in that order. Integrity is checked
/// first so that no claim of a forged token is ever acted upon.
pub fn verify_integrity(
    st: &SignedToken,
    k_thing_as: &SymmetricKey,
    now: Height,
    expected_audience: &str,
) -> Verdict {
    let Ok(bytes) = st.token.encode() else {
        return Verdict::Invalid(InvalidReason::BadMac);
    };
    if !crypto::mac_verify(k_thing_as, &bytes, &st.tag) {
        return Verdict::Invalid(InvalidReason::BadMac);
    }
    if st.token.audience != expected_audience {
        return Verdict::Invalid(InvalidReason::WrongAudience);
    }
    if now >= st.token.expires_at {
        return Verdict::Invalid(InvalidReason::Expired);
    }
    Verdict::Valid
}

/// Offline token check: valid iff the MAC verifies, the audience matches,
/// `now < expires_at` and `required_scope` was granted.
pub fn verify_token(
    st: &SignedToken,
    k_thing_as: &SymmetricKey,
    now: Height,
    required_scope: &str,
    expected_audience: &str,
) -> Verdict {
    match verify_integrity(st, k_thing_as, now, expected_audience) {
        Verdict::Valid if !st.token.has_scope(required_scope) => {
            Verdict::Invalid(InvalidReason::ScopeDenied)
        }
        v => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn claims(scopes: &[&str]) -> TokenClaims {
        TokenClaims {
            issuer: "as-alpha".into(),
            audience: "thing-01".into(),
            scopes: scopes.iter().map(|s| s.to_string()).collect(),
            issued_at: 10,
            expires_at: 110,
            session_nonce: [7; 16],
        }
    }

    const K: SymmetricKey = SymmetricKey([0x11; 32]);
    const POP: SymmetricKey = SymmetricKey([0x22; 32]);

    #[test]
    fn issue_then_verify() {
        let st = issue_token(claims(&["read"]), &POP, &K).unwrap();
        assert_eq!(verify_token(&st, &K, 50, "read", "thing-01"), Verdict::Valid);
        assert_eq!(st.token.pop_binding, crypto::hash(&POP.0));
    }

    #[test]
    fn wrong_key_is_bad_mac() {
        let st = issue_token(claims(&["read"]), &POP, &K).unwrap();
        let other = SymmetricKey([0x12; 32]);
        assert_eq!(
            verify_token(&st, &other, 50, "read", "thing-01"),
            Verdict::Invalid(InvalidReason::BadMac)
        );
    }

    #[test]
    fn expiry_boundary_is_exclusive() {
        let st = issue_token(claims(&["read"]), &POP, &K).unwrap();
        assert!(verify_token(&st, &K, 109, "read", "thing-01").is_valid());
        assert_eq!(
            verify_token(&st, &K, 110, "read", "thing-01"),
            Verdict::Invalid(InvalidReason::Expired)
        );
    }

    #[test]
    fn read_scope_does_not_grant_write() {
        let st = issue_token(claims(&["read"]), &POP, &K).unwrap();
        assert_eq!(
            verify_token(&st, &K, 50, "write", "thing-01"),
            Verdict::Invalid(InvalidReason::ScopeDenied)
        );
    }

    #[test]
    fn audience_mismatch() {
        let st = issue_token(claims(&["read"]), &POP, &K).unwrap();
        assert_eq!(
            verify_token(&st, &K, 50, "read", "thing-02"),
            Verdict::Invalid(InvalidReason::WrongAudience)
        );
    }

    #[test]
    fn altered_claim_breaks_mac() {
        let mut st = issue_token(claims(&["read"]), &POP, &K).unwrap();
        st.token.scopes.insert("write".into());
        assert_eq!(
            verify_token(&st, &K, 50, "write", "thing-01"),
            Verdict::Invalid(InvalidReason::BadMac)
        );
    }

    #[test]
    fn scope_insertion_order_is_irrelevant() {
        let a = issue_token(claims(&["write", "read"]), &POP, &K).unwrap();
        let b = issue_token(claims(&["read", "write"]), &POP, &K).unwrap();
        assert_eq!(a.encode().unwrap(), b.encode().unwrap());
    }

    // Independent length formula over the documented layout:
    // version + 2 strings + scope count + each scope + two u64 + binding + nonce.
    fn expected_len(issuer: usize, audience: usize, scopes: &[usize]) -> usize {
        1 + (2 + issuer) + (2 + audience) + 2 + scopes.iter().map(|s| 2 + s).sum::<usize>()
            + 8
            + 8
            + 32
            + 16
    }

    #[test]
    fn one_scope_eight_char_names_length() {
        let st = issue_token(claims(&["read"]), &POP, &K).unwrap();
        let n = expected_len(8, 8, &[4]);
        assert_eq!(n, 93);
        assert_eq!(st.token.encode().unwrap().len(), n);
        assert_eq!(st.encode().unwrap().len(), n + 32);
    }

    #[test]
    fn pinned_layout_prefix() {
        let st = issue_token(claims(&["read"]), &POP, &K).unwrap();
        let bytes = st.token.encode().unwrap();
        // 01 | 0008 "as-alpha" | 0008 "thing-01" | 0001 | 0004 "read"
        assert_eq!(
            hex::encode(&bytes[..29]),
            "01000861732d616c70686100087468696e672d30310001000472656164"
        );
        assert_eq!(&bytes[29..37], &10u64.to_be_bytes());
        assert_eq!(&bytes[37..45], &110u64.to_be_bytes());
    }

    #[test]
    fn invalid_claims_are_rejected() {
        assert_eq!(issue_token(claims(&[]), &POP, &K).unwrap_err(), EncodingError::NoScopes);
        let mut c = claims(&["read"]);
        c.expires_at = c.issued_at;
        assert!(matches!(
            issue_token(c, &POP, &K).unwrap_err(),
            EncodingError::BadLifetime { .. }
        ));
        assert_eq!(issue_token(claims(&[""]), &POP, &K).unwrap_err(), EncodingError::EmptyScope);
    }

    #[test]
    fn decode_rejects_unsorted_scopes_and_trailing_bytes() {
        let st = issue_token(claims(&["read", "write"]), &POP, &K).unwrap();
        let mut bytes = st.token.encode().unwrap();
        // swap "read" and "write" entries in place: 0004 read 0005 write -> 0005 write 0004 read
        let start = 1 + 10 + 10 + 2;
        let mut swapped = vec![0, 5];
        swapped.extend_from_slice(b"write");
        swapped.extend_from_slice(&[0, 4]);
        swapped.extend_from_slice(b"read");
        bytes.splice(start..start + 15, swapped);
        assert_eq!(AccessToken::decode(&bytes).unwrap_err(), EncodingError::NonCanonicalScopes);

        let mut good = st.token.encode().unwrap();
        good.push(0);
        assert_eq!(AccessToken::decode(&good).unwrap_err(), EncodingError::Trailing(1));
        assert!(matches!(AccessToken::decode(&good[..40]), Err(EncodingError::Truncated(_))));
    }

    #[test]
    fn signed_round_trip() {
        let st = issue_token(claims(&["read", "write"]), &POP, &K).unwrap();
        assert_eq!(SignedToken::decode(&st.encode().unwrap()).unwrap(), st);
    }
}
