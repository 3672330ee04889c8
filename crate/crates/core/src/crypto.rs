//! Deterministic cryptographic primitives.
//!
//! Everything here is a thin, fixed choice over well-vectored algorithms:
//! SHA-256 for hashing and hash-locks, HMAC-SHA-256 for token integrity,
//! ChaCha20-Poly1305 for symmetric authenticated encryption, Ed25519 for
//! signatures and an X25519 ephemeral-static hybrid for public-key
//! encryption. All randomness is drawn from a caller-supplied RNG so that
//! complete protocol runs can be replayed from a seed.

use std::fmt;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Nonce, Tag};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;
pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const ADDRESS_LEN: usize = 20;

/// The single RNG type threaded through every simulation run.
pub type DetRng = ChaCha20Rng;

pub fn seeded_rng(seed: u64) -> DetRng {
    ChaCha20Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CryptoError {
    /// Tampering, truncation or a wrong key. No plaintext is ever returned.
    #[error("authenticated decryption failed")]
    AuthFailure,
    #[error("expected {expected} bytes, got {actual}")]
    BadLength { expected: usize, actual: usize },
}

/// Serde adapter: fixed-size byte arrays as lowercase hex strings.
pub(crate) mod hex_array {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(D::Error::custom)?;
        bytes
            .try_into()
            .map_err(|b: Vec<u8>| D::Error::custom(format!("expected {N} bytes, got {}", b.len())))
    }
}

/// Serde adapter: variable byte strings as lowercase hex strings.
pub(crate) mod hex_vec {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map_err(D::Error::custom)
    }
}

macro_rules! byte_newtype {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(#[serde(with = "hex_array")] pub [u8; $len]);

        impl $name {
            pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
                bytes
                    .try_into()
                    .map(Self)
                    .map_err(|_| CryptoError::BadLength { expected: $len, actual: bytes.len() })
            }

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl AsRef<[u8]> for $name {
            fn as_ref(&self) -> &[u8] {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }
    };
}

byte_newtype!(
    /// SHA-256 output; also the hash-lock value `h`.
    Digest,
    DIGEST_LEN
);
byte_newtype!(
    /// 32-byte symmetric key: the Thing/AS shared key or a PoP key.
    SymmetricKey,
    KEY_LEN
);
byte_newtype!(
    /// One-time hash-lock preimage. Doubles as the key for the encrypted token.
    Secret,
    KEY_LEN
);
byte_newtype!(
    /// Ledger account identifier: the first 20 bytes of the public key hash.
    Address,
    ADDRESS_LEN
);

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({})", self.to_hex())
    }
}

// Key material never prints its bytes.
impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(..)")
    }
}

impl SymmetricKey {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; KEY_LEN];
        rng.fill_bytes(&mut k);
        Self(k)
    }
}

impl Secret {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; KEY_LEN];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    /// The preimage is used directly as the AEAD key for `E_s(token)`.
    pub fn as_key(&self) -> SymmetricKey {
        SymmetricKey(self.0)
    }

    pub fn hash_lock(&self) -> Digest {
        hash(&self.0)
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hash over the concatenation of several byte strings.
pub fn hash_concat<'a, I: IntoIterator<Item = &'a [u8]>>(parts: I) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Authenticated ciphertext with a detached tag.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ciphertext {
    #[serde(with = "hex_array")]
    pub nonce: [u8; NONCE_LEN],
    #[serde(with = "hex_vec")]
    pub body: Vec<u8>,
    #[serde(with = "hex_array")]
    pub tag: [u8; TAG_LEN],
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({} bytes)", self.encoded_len())
    }
}

impl Ciphertext {
    pub fn encoded_len(&self) -> usize {
        NONCE_LEN + self.body.len() + TAG_LEN
    }

    /// `nonce ∥ body ∥ tag`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < NONCE_LEN + TAG_LEN {
            return Err(CryptoError::AuthFailure);
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (body, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(Self {
            nonce: nonce.try_into().expect("split at NONCE_LEN"),
            body: body.to_vec(),
            tag: tag.try_into().expect("split at TAG_LEN"),
        })
    }
}

pub fn encrypt<R: RngCore + CryptoRng>(
    key: &SymmetricKey,
    plaintext: &[u8],
    aad: &[u8],
    rng: &mut R,
) -> Ciphertext {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    seal(key, nonce, plaintext, aad)
}

fn seal(key: &SymmetricKey, nonce: [u8; NONCE_LEN], plaintext: &[u8], aad: &[u8]) -> Ciphertext {
    let cipher = ChaCha20Poly1305::new((&key.0).into());
    let mut body = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), aad, &mut body)
        .expect("plaintext within ChaCha20-Poly1305 length limit");
    Ciphertext { nonce, body, tag: tag.into() }
}

pub fn decrypt(key: &SymmetricKey, c: &Ciphertext, aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    let cipher = ChaCha20Poly1305::new((&key.0).into());
    let mut body = c.body.clone();
    cipher
        .decrypt_in_place_detached(Nonce::from_slice(&c.nonce), aad, &mut body, Tag::from_slice(&c.tag))
        .map_err(|_| CryptoError::AuthFailure)?;
    Ok(body)
}

type HmacSha256 = Hmac<Sha256>;

pub fn mac(key: &SymmetricKey, data: &[u8]) -> Digest {
    let mut m = <HmacSha256 as Mac>::new_from_slice(&key.0).expect("HMAC accepts any key length");
    m.update(data);
    Digest(m.finalize().into_bytes().into())
}

/// Constant-time tag comparison.
pub fn mac_verify(key: &SymmetricKey, data: &[u8], tag: &Digest) -> bool {
    mac(key, data).0.ct_eq(&tag.0).into()
}

/// Public half of a ledger account: an Ed25519 verification key plus an
/// X25519 encryption key.
#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKey {
    #[serde(with = "hex_array")]
    pub verify: [u8; 32],
    #[serde(with = "hex_array")]
    pub encrypt: [u8; 32],
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &hex::encode(self.verify)[..16])
    }
}

impl PublicKey {
    pub const LEN: usize = 64;

    pub fn to_bytes(&self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        out[..32].copy_from_slice(&self.verify);
        out[32..].copy_from_slice(&self.encrypt);
        out
    }

    pub fn address(&self) -> Address {
        let d = hash(&self.to_bytes());
        Address(d.0[..ADDRESS_LEN].try_into().expect("digest is 32 bytes"))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", &hex::encode(self.0)[..16])
    }
}

#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
    decrypt: x25519_dalek::StaticSecret,
    public: PublicKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl KeyPair {
    /// Both private halves are derived from one seed, domain-separated.
    pub fn from_seed(seed: &[u8; 32]) -> Self {
        let signing = SigningKey::from_bytes(&hash_concat([&b"authchain/ed25519"[..], seed]).0);
        let decrypt =
            x25519_dalek::StaticSecret::from(hash_concat([&b"authchain/x25519"[..], seed]).0);
        let public = PublicKey {
            verify: signing.verifying_key().to_bytes(),
            encrypt: x25519_dalek::PublicKey::from(&decrypt).to_bytes(),
        };
        Self { signing, decrypt, public }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(&seed)
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn address(&self) -> Address {
        self.public.address()
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes())
    }
}

pub fn verify_signature(public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&public.verify) else {
        return false;
    };
    vk.verify(msg, &ed25519_dalek::Signature::from_bytes(&sig.0)).is_ok()
}

const PK_INFO: &[u8] = b"authchain/pk-encrypt/v1";

fn pk_shared_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> SymmetricKey {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; KEY_LEN];
    hk.expand(PK_INFO, &mut okm).expect("32 bytes is a valid HKDF-SHA256 output length");
    SymmetricKey(okm)
}

/// Hybrid encryption to `recipient`. The ephemeral X25519 public key is
/// carried as the first 32 bytes of the ciphertext body.
pub fn pk_encrypt<R: RngCore + CryptoRng>(
    recipient: &PublicKey,
    plaintext: &[u8],
    aad: &[u8],
    rng: &mut R,
) -> Ciphertext {
    let mut eph_bytes = [0u8; 32];
    rng.fill_bytes(&mut eph_bytes);
    let eph = x25519_dalek::StaticSecret::from(eph_bytes);
    let eph_pub = x25519_dalek::PublicKey::from(&eph).to_bytes();
    let shared = eph.diffie_hellman(&x25519_dalek::PublicKey::from(recipient.encrypt));
    let key = pk_shared_key(shared.as_bytes(), &eph_pub, &recipient.encrypt);

    let mut c = encrypt(&key, plaintext, aad, rng);
    let mut body = Vec::with_capacity(32 + c.body.len());
    body.extend_from_slice(&eph_pub);
    body.append(&mut c.body);
    c.body = body;
    c
}

pub fn pk_decrypt(keys: &KeyPair, c: &Ciphertext, aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if c.body.len() < 32 {
        return Err(CryptoError::AuthFailure);
    }
    let (eph, inner) = c.body.split_at(32);
    let eph: [u8; 32] = eph.try_into().expect("split at 32");
    let shared = keys.decrypt.diffie_hellman(&x25519_dalek::PublicKey::from(eph));
    let key = pk_shared_key(shared.as_bytes(), &eph, &keys.public.encrypt);
    let inner = Ciphertext { nonce: c.nonce, body: inner.to_vec(), tag: c.tag };
    decrypt(&key, &inner, aad)
}
