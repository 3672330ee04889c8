use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use serde::Serialize;
use serde_json::Value;

use authchain_core::crypto::{self, seeded_rng, Address, Ciphertext, Digest, PublicKey, Secret, SymmetricKey};
use authchain_core::harness::{self, ScenarioConfig};
use authchain_core::ledger::{self, LedgerConfig};
use authchain_core::tokens::{self, SignedToken, TokenClaims, Verdict, SESSION_NONCE_LEN};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn bytes<'py>(py: Python<'py>, b: &[u8]) -> Bound<'py, PyBytes> {
    PyBytes::new(py, b)
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (s,))
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let s: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(err)
}

fn rng(seed: Option<u64>) -> crypto::DetRng {
    seeded_rng(seed.unwrap_or_else(rand::random))
}

fn key(b: &[u8]) -> PyResult<SymmetricKey> {
    SymmetricKey::from_slice(b).map_err(err)
}

fn hex_bytes(s: &str) -> PyResult<Vec<u8>> {
    hex::decode(s).map_err(err)
}

fn address(s: &str) -> PyResult<Address> {
    Address::from_slice(&hex_bytes(s)?).map_err(err)
}

fn digest(s: &str) -> PyResult<Digest> {
    Digest::from_slice(&hex_bytes(s)?).map_err(err)
}

/// SHA-256.
#[pyfunction]
fn hash<'py>(py: Python<'py>, data: &[u8]) -> Bound<'py, PyBytes> {
    bytes(py, &crypto::hash(data).0)
}

/// AEAD encryption under a 32-byte key. Pass `seed` for a reproducible nonce.
#[pyfunction]
#[pyo3(signature = (key_bytes, plaintext, aad=b"".as_slice(), seed=None))]
fn encrypt<'py>(py: Python<'py>, key_bytes: &[u8], plaintext: &[u8], aad: &[u8], seed: Option<u64>) -> PyResult<Bound<'py, PyBytes>> {
    let c = crypto::encrypt(&key(key_bytes)?, plaintext, aad, &mut rng(seed));
    Ok(bytes(py, &c.to_bytes()))
}

#[pyfunction]
#[pyo3(signature = (key_bytes, ciphertext, aad=b"".as_slice()))]
fn decrypt<'py>(py: Python<'py>, key_bytes: &[u8], ciphertext: &[u8], aad: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let c = Ciphertext::from_bytes(ciphertext).map_err(err)?;
    let pt = crypto::decrypt(&key(key_bytes)?, &c, aad).map_err(err)?;
    Ok(bytes(py, &pt))
}

/// Public-key encryption to a 64-byte public key.
#[pyfunction]
#[pyo3(signature = (public_key, plaintext, aad=b"".as_slice(), seed=None))]
fn pk_encrypt<'py>(py: Python<'py>, public_key: &[u8], plaintext: &[u8], aad: &[u8], seed: Option<u64>) -> PyResult<Bound<'py, PyBytes>> {
    if public_key.len() != PublicKey::LEN {
        return Err(err(format!("public key must be {} bytes", PublicKey::LEN)));
    }
    let pk = PublicKey {
        verify: public_key[..32].try_into().expect("checked"),
        encrypt: public_key[32..].try_into().expect("checked"),
    };
    Ok(bytes(py, &crypto::pk_encrypt(&pk, plaintext, aad, &mut rng(seed)).to_bytes()))
}

#[pyclass(name = "KeyPair", module = "authchain", frozen)]
struct PyKeyPair(crypto::KeyPair);

#[pymethods]
impl PyKeyPair {
    #[new]
    fn new(seed: &[u8]) -> PyResult<Self> {
        let seed: [u8; 32] = seed.try_into().map_err(|_| err("seed must be 32 bytes"))?;
        Ok(Self(crypto::KeyPair::from_seed(&seed)))
    }

    #[getter]
    fn address(&self) -> String {
        self.0.address().to_hex()
    }

    #[getter]
    fn public_key<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        bytes(py, &self.0.public().to_bytes())
    }

    fn sign<'py>(&self, py: Python<'py>, msg: &[u8]) -> Bound<'py, PyBytes> {
        bytes(py, &self.0.sign(msg).0)
    }

    #[pyo3(signature = (ciphertext, aad=b"".as_slice()))]
    fn pk_decrypt<'py>(&self, py: Python<'py>, ciphertext: &[u8], aad: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
        let c = Ciphertext::from_bytes(ciphertext).map_err(err)?;
        Ok(bytes(py, &crypto::pk_decrypt(&self.0, &c, aad).map_err(err)?))
    }

    fn __repr__(&self) -> String {
        format!("KeyPair({})", self.address())
    }
}

/// Issues a MAC'd token bound to `pop_key` and returns its encoding.
#[pyfunction]
#[pyo3(signature = (k_thing_as, pop_key, issuer, audience, scopes, issued_at, expires_at, session_nonce=None))]
#[allow(clippy::too_many_arguments)]
fn issue_token<'py>(
    py: Python<'py>,
    k_thing_as: &[u8],
    pop_key: &[u8],
    issuer: String,
    audience: String,
    scopes: Vec<String>,
    issued_at: u64,
    expires_at: u64,
    session_nonce: Option<&[u8]>,
) -> PyResult<Bound<'py, PyBytes>> {
    let session_nonce: [u8; SESSION_NONCE_LEN] = match session_nonce {
        Some(n) => n.try_into().map_err(|_| err(format!("session_nonce must be {SESSION_NONCE_LEN} bytes")))?,
        None => [0; SESSION_NONCE_LEN],
    };
    let claims = TokenClaims { issuer, audience, scopes: scopes.into_iter().collect(), issued_at, expires_at, session_nonce };
    let st = tokens::issue_token(claims, &key(pop_key)?, &key(k_thing_as)?).map_err(err)?;
    Ok(bytes(py, &st.encode().map_err(err)?))
}

/// Returns "valid" or the rejection reason.
#[pyfunction]
fn verify_token(token: &[u8], k_thing_as: &[u8], now: u64, scope: &str, audience: &str) -> PyResult<String> {
    let st = SignedToken::decode(token).map_err(err)?;
    Ok(match tokens::verify_token(&st, &key(k_thing_as)?, now, scope, audience) {
        Verdict::Valid => "valid".into(),
        Verdict::Invalid(r) => format!("{r:?}"),
    })
}

#[pyfunction]
fn decode_token<'py>(py: Python<'py>, token: &[u8]) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &SignedToken::decode(token).map_err(err)?)
}

/// The simulated ledger. Addresses and ids are hex strings.
#[pyclass(name = "Ledger", module = "authchain")]
struct PyLedger(ledger::Ledger);

#[pymethods]
impl PyLedger {
    #[new]
    #[pyo3(signature = (balances, txs_per_block=1, charge_gas=false))]
    fn new(balances: std::collections::BTreeMap<String, u64>, txs_per_block: usize, charge_gas: bool) -> PyResult<Self> {
        let genesis = balances.iter().map(|(a, v)| Ok((address(a)?, *v))).collect::<PyResult<Vec<_>>>()?;
        let config = LedgerConfig { txs_per_block, charge_gas, ..Default::default() };
        Ok(Self(ledger::Ledger::new(config, genesis)))
    }

    #[staticmethod]
    fn from_dump(dump: &str) -> PyResult<Self> {
        Ok(Self(ledger::Ledger::import(dump).map_err(err)?))
    }

    fn export(&self) -> String {
        self.0.export()
    }

    #[getter]
    fn height(&self) -> u64 {
        self.0.height()
    }

    #[getter]
    fn pending(&self) -> usize {
        self.0.pending()
    }

    fn balance(&self, addr: &str) -> PyResult<u64> {
        Ok(self.0.balance(&address(addr)?))
    }

    fn total_supply(&self) -> u64 {
        self.0.total_supply()
    }

    fn is_conserved(&self) -> bool {
        self.0.is_conserved()
    }

    /// Mines one block and returns its height.
    fn mine(&mut self) -> u64 {
        self.0.mine_block().height
    }

    /// Queues an HTLC creation; returns (tx_id, htlc_id).
    #[pyo3(signature = (sender, payee, amount, hash_lock, timeout_height, payer=None, commitments=vec![]))]
    #[allow(clippy::too_many_arguments)]
    fn htlc_create(
        &mut self,
        sender: &str,
        payee: &str,
        amount: u64,
        hash_lock: &[u8],
        timeout_height: u64,
        payer: Option<&str>,
        commitments: Vec<Vec<u8>>,
    ) -> PyResult<(String, String)> {
        let sender = address(sender)?;
        let payer = payer.map(address).transpose()?.unwrap_or(sender);
        let commitments = commitments.iter().map(|c| Digest::from_slice(c).map_err(err)).collect::<PyResult<_>>()?;
        let lock = Digest::from_slice(hash_lock).map_err(err)?;
        let (tx, id) = self
            .0
            .htlc_create(sender, payer, address(payee)?, amount, lock, timeout_height, commitments)
            .map_err(err)?;
        Ok((tx.to_hex(), id.to_hex()))
    }

    fn htlc_deposit(&mut self, sender: &str, htlc_id: &str) -> PyResult<String> {
        Ok(self.0.htlc_deposit(address(sender)?, digest(htlc_id)?).map_err(err)?.to_hex())
    }

    fn htlc_claim(&mut self, sender: &str, htlc_id: &str, preimage: &[u8]) -> PyResult<String> {
        let s = Secret::from_slice(preimage).map_err(err)?;
        Ok(self.0.htlc_claim(address(sender)?, digest(htlc_id)?, s).map_err(err)?.to_hex())
    }

    fn htlc_refund(&mut self, sender: &str, htlc_id: &str) -> PyResult<String> {
        Ok(self.0.htlc_refund(address(sender)?, digest(htlc_id)?).map_err(err)?.to_hex())
    }

    fn htlc<'py>(&self, py: Python<'py>, htlc_id: &str) -> PyResult<Option<Bound<'py, PyAny>>> {
        self.0.htlc(&digest(htlc_id)?).map(|h| to_py(py, h)).transpose()
    }

    fn read_preimage<'py>(&self, py: Python<'py>, htlc_id: &str) -> PyResult<Option<Bound<'py, PyBytes>>> {
        Ok(self.0.read_preimage(&digest(htlc_id)?).map_err(err)?.map(|s| bytes(py, &s.0)))
    }

    fn receipt<'py>(&self, py: Python<'py>, tx_id: &str) -> PyResult<Option<Bound<'py, PyAny>>> {
        self.0.receipt(&digest(tx_id)?).map(|r| to_py(py, r)).transpose()
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn scenario(config: Option<&str>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<ScenarioConfig> {
    let base = ScenarioConfig::from_toml(config.unwrap_or("")).map_err(err)?;
    let Some(o) = overrides else { return Ok(base) };
    let mut v = serde_json::to_value(&base).map_err(err)?;
    merge(&mut v, from_py(o.as_any())?);
    let cfg: ScenarioConfig = serde_json::from_value(v).map_err(err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Runs one scenario from TOML text and/or keyword overrides. Returns a dict
/// with `metrics`, `transcript` (NDJSON) and `chain` (NDJSON dump).
#[pyfunction]
#[pyo3(signature = (config=None, **overrides))]
fn run_scenario<'py>(py: Python<'py>, config: Option<&str>, overrides: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = scenario(config, overrides)?;
    let out = harness::run(&cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("metrics", to_py(py, &out.metrics)?)?;
    d.set_item("transcript", out.transcript.to_ndjson())?;
    d.set_item("chain", out.chain_dump())?;
    Ok(d)
}

/// Honest runs of both flows with the same seed.
#[pyfunction]
#[pyo3(signature = (seed=1, config=None))]
fn compare<'py>(py: Python<'py>, seed: u64, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let base = scenario(config, None)?;
    to_py(py, &harness::compare(&ScenarioConfig { seed, ..base }).map_err(err)?)
}

/// Audits a transcript against a chain dump.
#[pyfunction]
fn audit<'py>(py: Python<'py>, transcript: &str, chain: &str) -> PyResult<Bound<'py, PyAny>> {
    let report = harness::audit(transcript, chain).map_err(err)?;
    let v = to_py(py, &report)?;
    v.set_item("passed", report.passed())?;
    Ok(v)
}

#[pymodule]
fn authchain(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hash, m)?)?;
    m.add_function(wrap_pyfunction!(encrypt, m)?)?;
    m.add_function(wrap_pyfunction!(decrypt, m)?)?;
    m.add_function(wrap_pyfunction!(pk_encrypt, m)?)?;
    m.add_function(wrap_pyfunction!(issue_token, m)?)?;
    m.add_function(wrap_pyfunction!(verify_token, m)?)?;
    m.add_function(wrap_pyfunction!(decode_token, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_class::<PyKeyPair>()?;
    m.add_class::<PyLedger>()?;
    Ok(())
}
