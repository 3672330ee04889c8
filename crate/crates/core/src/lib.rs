//! Delegated authorization for constrained devices, linked to hash
//! time-locked payments on a deterministic simulated ledger.
//!
//! Two flows are provided. In the direct flow ([`roles_model1`]) the client
//! talks to the authorization server over a secure channel and pays through
//! an HTLC whose preimage decrypts the access token. In the contract flow
//! ([`roles_model2`]) every exchange goes through an on-ledger
//! [`authz_contract`]. The [`thing`] verifies tokens and proof-of-possession
//! entirely offline, and [`harness`] drives complete scenarios.

pub mod authz_contract;
pub mod crypto;
pub mod harness;
pub mod ledger;
pub mod roles_model1;
pub mod roles_model2;
pub mod storage;
pub mod thing;
pub mod tokens;
pub mod transcript;

/// Logical time: a ledger block height.
pub type Height = u64;

/// Currency units.
pub type Amount = u64;
