//! Deterministic scenario runner.
//!
//! A run provisions every party from one seed, then advances a scheduler
//! tick by tick: client step, authorization server step, mine one block.
//! Everything observable goes to a [`Transcript`]; the chain is exported
//! separately. Metrics and invariant checks are derived from both.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authz_contract::{EventPredicate, Policy, RequestId};
use crate::crypto::{self, seeded_rng, Address, Ciphertext, DetRng, Digest, KeyPair, SymmetricKey};
use crate::ledger::{DumpError, GasReceipt, GasSchedule, Ledger, LedgerConfig, TxPayload};
use crate::roles_model1::{self, AsBehavior, AsParams, AuthServer1, Client1, ClientAction, ClientOutcome, Credentials, GrantPackage};
use crate::roles_model2::{self, AuthServer2, Client2};
use crate::thing::{PopChallenge, PopResponse, Thing};
use crate::tokens::{issue_token, SignedToken, TokenClaims};
use crate::transcript::{Channel, Disclosure, Event, MessageBody, Parties, Role, Transcript};
use crate::{Amount, Height};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub as_withholds_secret: bool,
    pub wrong_preimage: bool,
    pub tampered_package: bool,
    /// Token issued for another Thing; payment completes, access does not.
    pub wrong_audience: bool,
    /// The contract policy carries an allowlist without the client.
    pub non_allowlisted_client: bool,
    /// Passive observer of the chain and the client/Thing link who then
    /// tries to get access.
    pub eavesdropper: bool,
    pub eavesdrop_attempts: usize,
}

impl AdversaryConfig {
    pub fn as_behavior(&self) -> AsBehavior {
        AsBehavior {
            withhold_secret: self.as_withholds_secret,
            wrong_preimage: self.wrong_preimage,
            tamper_package: self.tampered_package,
            wrong_audience: self.wrong_audience,
        }
    }

    pub fn is_honest(&self) -> bool {
        self.as_behavior() == AsBehavior::default() && !self.non_allowlisted_client
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: u8,
    pub seed: u64,
    pub scope: String,
    pub prices: BTreeMap<String, Amount>,
    pub timeout_blocks: u64,
    pub token_lifetime: u64,
    pub issuer: String,
    pub audience: String,
    pub txs_per_block: usize,
    pub charge_gas: bool,
    pub gas: GasSchedule,
    pub token_pk_wrap: bool,
    pub client_balance: Amount,
    pub client_max_price: Option<Amount>,
    /// Give the contract policy an allowlist (owner and client).
    pub allowlist: bool,
    pub required_events: Vec<EventPredicate>,
    /// Event topics recorded on the ledger before the scenario starts.
    pub recorded_events: Vec<String>,
    pub max_ticks: u64,
    pub adversary: AdversaryConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            model: 1,
            seed: 1,
            scope: "read".into(),
            prices: [("read".to_string(), 10), ("write".to_string(), 25)].into(),
            timeout_blocks: 20,
            token_lifetime: 1000,
            issuer: "as.example".into(),
            audience: "thing-01".into(),
            txs_per_block: 1,
            charge_gas: false,
            gas: GasSchedule::default(),
            token_pk_wrap: false,
            client_balance: 1000,
            client_max_price: None,
            allowlist: false,
            required_events: vec![],
            recorded_events: vec![],
            max_ticks: 0,
            adversary: AdversaryConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("setup: {0}")]
    Setup(String),
    #[error("transcript: {0}")]
    Transcript(#[from] crate::transcript::ParseError),
    #[error("chain dump: {0}")]
    Dump(#[from] DumpError),
}

impl ScenarioConfig {
    pub fn from_toml(s: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !matches!(self.model, 1 | 2) {
            return Err(HarnessError::Config(format!("model must be 1 or 2, got {}", self.model)));
        }
        if self.timeout_blocks == 0 {
            return Err(HarnessError::Config("timeout_blocks must be at least 1".into()));
        }
        if self.txs_per_block == 0 {
            return Err(HarnessError::Config("txs_per_block must be at least 1".into()));
        }
        if self.model != 2 && (self.token_pk_wrap || self.allowlist || self.adversary.non_allowlisted_client) {
            return Err(HarnessError::Config("token_pk_wrap and allowlists apply to model 2 only".into()));
        }
        Ok(())
    }

    fn ticks(&self) -> u64 {
        if self.max_ticks > 0 {
            self.max_ticks
        } else {
            2 * self.timeout_blocks + 20
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Paid, token delivered, Thing granted access.
    Completed,
    /// Paid and token delivered, but the Thing refused it.
    Denied,
    Refunded,
    /// The client stopped before paying.
    Aborted,
    /// Paid, then the delivered material did not check out.
    Disputed,
    /// The scheduler ran out of ticks.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryReport {
    pub attempts: usize,
    pub grants: usize,
    pub denials: BTreeMap<String, usize>,
    /// A valid token was seen on the client/Thing link.
    pub token_observed: bool,
    /// A token could be decrypted from public chain data.
    pub token_from_chain: bool,
    /// The PoP key appeared in anything the observer saw.
    pub pop_exposed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: u8,
    pub seed: u64,
    pub tx_count: usize,
    pub failed_txs: usize,
    pub total_gas: u64,
    pub receipts: Vec<GasReceipt>,
    /// Blocks from the first scenario transaction to the last, inclusive.
    pub delay_blocks: u64,
    pub outcome: Outcome,
    pub client_detail: String,
    pub thing_access: Option<String>,
    pub owner_paid: Amount,
    pub client_spent: Amount,
    pub chain_accesses: BTreeMap<Role, u64>,
    pub adversary: Option<AdversaryReport>,
    pub invariants: Vec<InvariantCheck>,
}

impl MetricsReport {
    pub fn invariants_hold(&self) -> bool {
        self.invariants.iter().all(|c| c.passed)
    }

    pub fn invariant(&self, name: &str) -> Option<&InvariantCheck> {
        self.invariants.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub transcript: Transcript,
    pub ledger: Ledger,
    pub metrics: MetricsReport,
}

impl RunOutput {
    pub fn chain_dump(&self) -> String {
        self.ledger.export()
    }
}

struct Keys {
    client: KeyPair,
    auth: KeyPair,
    owner: KeyPair,
    k_thing_as: SymmetricKey,
    as_rng: DetRng,
    thing_rng: DetRng,
    adversary_rng: DetRng,
}

impl Keys {
    fn provision(seed: u64) -> Self {
        let mut master = seeded_rng(seed);
        Self {
            client: KeyPair::generate(&mut master),
            auth: KeyPair::generate(&mut master),
            owner: KeyPair::generate(&mut master),
            k_thing_as: SymmetricKey::random(&mut master),
            as_rng: seeded_rng(master.next_u64()),
            thing_rng: seeded_rng(master.next_u64()),
            adversary_rng: seeded_rng(master.next_u64()),
        }
    }
}

struct World {
    cfg: ScenarioConfig,
    ledger: Ledger,
    thing: Thing,
    transcript: Transcript,
    roles: BTreeMap<Address, Role>,
    chain_accesses: BTreeMap<Role, u64>,
    start_height: Height,
}

impl World {
    fn new(cfg: &ScenarioConfig, keys: &mut Keys) -> Self {
        let ledger_cfg = LedgerConfig {
            txs_per_block: cfg.txs_per_block,
            gas: cfg.gas,
            charge_gas: cfg.charge_gas,
            gas_price: 1,
        };
        let ledger = Ledger::new(ledger_cfg, [(keys.client.address(), cfg.client_balance)]);
        let resources = cfg.prices.keys().map(|s| (s.clone(), format!("{}:{s}", cfg.audience).into_bytes())).collect();
        let thing_rng = std::mem::replace(&mut keys.thing_rng, seeded_rng(0));
        let thing = Thing::new(cfg.audience.clone(), keys.k_thing_as, resources, thing_rng);
        let roles = [
            (keys.client.address(), Role::Client),
            (keys.auth.address(), Role::AuthServer),
            (keys.owner.address(), Role::Owner),
        ]
        .into();
        Self {
            cfg: cfg.clone(),
            ledger,
            thing,
            transcript: Transcript::new(),
            roles,
            chain_accesses: BTreeMap::new(),
            start_height: 0,
        }
    }

    /// Hands the ledger to `role`, counting the access.
    fn chain(&mut self, role: Role) -> &mut Ledger {
        *self.chain_accesses.entry(role).or_insert(0) += 1;
        &mut self.ledger
    }

    fn mine(&mut self) {
        let block = self.ledger.mine_block().clone();
        let roles = &self.roles;
        self.transcript.block(&block, |a| roles.get(a).copied().unwrap_or(Role::Adversary));
    }

    fn setup(&mut self, owner: &Address, policy: Option<Policy>) -> Result<Option<Address>, HarnessError> {
        for topic in &self.cfg.recorded_events.clone() {
            let tx = self
                .ledger
                .record_event(*owner, topic, crypto::hash(topic.as_bytes()))
                .map_err(|e| HarnessError::Setup(e.to_string()))?;
            while self.ledger.receipt(&tx).is_none() {
                self.mine();
            }
        }
        let mut contract = None;
        if let Some(policy) = policy {
            let (tx, addr) = self.ledger.deploy_contract(*owner, policy).map_err(|e| HarnessError::Setup(e.to_string()))?;
            while self.ledger.receipt(&tx).is_none() {
                self.mine();
            }
            if !self.ledger.receipt(&tx).expect("mined").status.is_success() {
                return Err(HarnessError::Setup("contract deployment failed".into()));
            }
            contract = Some(addr);
        }
        self.start_height = self.ledger.height();
        Ok(contract)
    }

    fn message(&mut self, channel: Channel, from: Role, to: Role, body: MessageBody) {
        let h = self.ledger.height();
        self.transcript.message(h, channel, from, to, body);
    }

    /// Token presentation and PoP round over the insecure link. The clock
    /// is pushed to the Thing; it never reads the ledger itself.
    fn access_thing(&mut self, who: Role, creds: &Credentials, token_bytes: Vec<u8>) -> Result<Vec<u8>, String> {
        self.thing.set_clock(self.ledger.height());
        let body = MessageBody::TokenPresentation { token: token_bytes, e_thing_pop: creds.e_thing_pop.clone() };
        self.message(Channel::Insecure, who, Role::Thing, body);
        let result = self.thing.begin_access(&creds.token, &creds.e_thing_pop).and_then(|challenge| {
            self.message(Channel::Insecure, Role::Thing, who, MessageBody::Challenge { challenge });
            let response = PopResponse::compute(&creds.pop_key, &challenge, &creds.token);
            self.message(Channel::Insecure, who, Role::Thing, MessageBody::PopProof { challenge, response });
            self.thing.complete_access(&challenge, &response, &self.cfg.scope.clone())
        });
        let reason = result.as_ref().err().map(|r| format!("{r:?}"));
        self.message(
            Channel::Insecure,
            Role::Thing,
            who,
            MessageBody::AccessResult { granted: result.is_ok(), reason: reason.clone() },
        );
        result.map_err(|_| reason.expect("error has a reason"))
    }

    fn scenario_blocks(&self) -> impl Iterator<Item = &crate::ledger::Block> {
        self.ledger.blocks().iter().filter(move |b| b.height > self.start_height)
    }
}

fn as_params(cfg: &ScenarioConfig, owner: Address) -> AsParams {
    AsParams {
        issuer: cfg.issuer.clone(),
        audience: cfg.audience.clone(),
        prices: cfg.prices.clone(),
        owner,
        timeout_blocks: cfg.timeout_blocks,
        token_lifetime: cfg.token_lifetime,
    }
}

/// Secrets held by the authorization server, for the hygiene checks.
struct Secrets {
    preimages: Vec<crypto::Secret>,
    pop: Option<SymmetricKey>,
}

pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    match cfg.model {
        1 => run_model1(cfg),
        _ => run_model2(cfg),
    }
}

pub fn run_model1(cfg: &ScenarioConfig) -> Result<RunOutput, HarnessError> {
    let mut keys = Keys::provision(cfg.seed);
    let mut w = World::new(cfg, &mut keys);
    let owner = keys.owner.address();
    w.setup(&owner, None)?;
    w.transcript.header(
        1,
        cfg.seed,
        Parties { client: keys.client.address(), auth_server: keys.auth.address(), owner, contract: None },
    );
    let as_rng = std::mem::replace(&mut keys.as_rng, seeded_rng(0));
    let mut auth =
        AuthServer1::new(keys.auth.clone(), keys.k_thing_as, as_params(cfg, owner), cfg.adversary.as_behavior(), as_rng);
    let mut client = Client1::new(keys.client.clone(), cfg.scope.clone(), cfg.client_max_price, cfg.timeout_blocks);

    for _ in 0..cfg.ticks() {
        match client.step(w.chain(Role::Client)) {
            ClientAction::Send(req) => {
                w.message(Channel::Secure, Role::Client, Role::AuthServer, req.to_message());
                match auth.handle_request(w.chain(Role::AuthServer), &req) {
                    Ok(pkg) => {
                        w.message(Channel::Secure, Role::AuthServer, Role::Client, pkg.to_message());
                        client.receive(pkg);
                    }
                    Err(e) => {
                        let h = w.ledger.height();
                        w.transcript.error(h, Role::AuthServer, e.to_string());
                    }
                }
            }
            ClientAction::None | ClientAction::Submitted(_) | ClientAction::Finished => {}
        }
        auth.step(w.chain(Role::AuthServer));
        if client.outcome().is_some() && w.ledger.pending() == 0 {
            break;
        }
        w.mine();
    }

    let pkg = client.package().cloned();
    let secrets = Secrets {
        preimages: pkg.iter().filter_map(|p| auth.secret(&p.htlc_id)).collect(),
        pop: pkg.as_ref().map(|p| p.pop_key),
    };
    let recoverable = pkg
        .as_ref()
        .map(|p| w.ledger.read_preimage(&p.htlc_id).ok().flatten().is_some())
        .unwrap_or(false);
    finish(w, client.outcome().cloned(), secrets, recoverable, keys, None)
}

pub fn run_model2(cfg: &ScenarioConfig) -> Result<RunOutput, HarnessError> {
    let mut keys = Keys::provision(cfg.seed);
    let mut w = World::new(cfg, &mut keys);
    let owner = keys.owner.address();
    let allowlist = (cfg.allowlist || cfg.adversary.non_allowlisted_client).then(|| {
        let mut list = BTreeSet::from([owner]);
        if !cfg.adversary.non_allowlisted_client {
            list.insert(keys.client.address());
        }
        list
    });
    let policy = Policy {
        owner,
        prices: cfg.prices.clone(),
        allowlist,
        required_events: cfg.required_events.clone(),
        timeout_blocks: cfg.timeout_blocks,
        as_address: keys.auth.address(),
    };
    let contract = w.setup(&owner, Some(policy))?.expect("model 2 deploys");
    w.roles.insert(contract, Role::Ledger);
    w.transcript.header(
        2,
        cfg.seed,
        Parties { client: keys.client.address(), auth_server: keys.auth.address(), owner, contract: Some(contract) },
    );
    let as_rng = std::mem::replace(&mut keys.as_rng, seeded_rng(0));
    let mut auth = AuthServer2::new(
        keys.auth.clone(),
        keys.k_thing_as,
        contract,
        as_params(cfg, owner),
        cfg.adversary.as_behavior(),
        cfg.token_pk_wrap,
        as_rng,
        w.start_height,
    );
    let mut client = Client2::new(keys.client.clone(), contract, cfg.scope.clone(), cfg.client_max_price, cfg.token_pk_wrap);

    let mut disclosed = false;
    for _ in 0..cfg.ticks() {
        client.step(w.chain(Role::Client));
        if !disclosed {
            if let Some(id) = client.request_id() {
                let req = w.chain(Role::Client).read_request(&contract, &id).expect("own request").clone();
                if let (true, Some(a)) = (req.acknowledged(), req.artifacts) {
                    let h = w.ledger.height();
                    w.transcript.disclose(h, Role::Client, Disclosure::Artifacts { request_id: id, artifacts: Box::new(a) });
                    disclosed = true;
                }
            }
        }
        auth.step(w.chain(Role::AuthServer));
        if client.outcome().is_some() && w.ledger.pending() == 0 {
            break;
        }
        w.mine();
    }

    let id = client.request_id();
    let req = id.and_then(|id| w.ledger.read_request(&contract, &id).ok().cloned());
    let pop = req.as_ref().and_then(|r| r.artifacts.as_ref()).and_then(|a| roles_model2::validate_artifacts(&keys.client, a).ok());
    let secrets = Secrets { preimages: id.iter().filter_map(|i| auth.secret(i)).collect(), pop };
    let recoverable = req.map(|r| r.revealed_preimage.is_some()).unwrap_or(false);
    finish(w, client.outcome().cloned(), secrets, recoverable, keys, Some(contract))
}

fn finish(
    mut w: World,
    client_outcome: Option<ClientOutcome>,
    secrets: Secrets,
    secret_public: bool,
    mut keys: Keys,
    contract: Option<Address>,
) -> Result<RunOutput, HarnessError> {
    let cfg = w.cfg.clone();
    let client = keys.client.address();
    let owner = keys.owner.address();

    let mut thing_access = None;
    let (outcome, client_detail) = match &client_outcome {
        Some(ClientOutcome::Finalized(creds)) => {
            let bytes = creds.token.encode().expect("decoded token re-encodes");
            let h = w.ledger.height();
            w.transcript.disclose(h, Role::Client, Disclosure::Token { token: bytes.clone() });
            let r = w.access_thing(Role::Client, creds, bytes);
            thing_access = Some(match &r {
                Ok(_) => "granted".to_string(),
                Err(reason) => format!("denied: {reason}"),
            });
            (if r.is_ok() { Outcome::Completed } else { Outcome::Denied }, "finalized".to_string())
        }
        Some(ClientOutcome::Refunded) => (Outcome::Refunded, "refunded".to_string()),
        Some(ClientOutcome::Aborted(why)) => (Outcome::Aborted, why.clone()),
        Some(ClientOutcome::Disputed(why)) => (Outcome::Disputed, why.clone()),
        None => (Outcome::Stalled, "no outcome".to_string()),
    };

    let adversary = cfg
        .adversary
        .eavesdropper
        .then(|| eavesdrop(&mut w, &mut keys.adversary_rng, contract, secrets.pop.as_ref()));

    let receipts: Vec<GasReceipt> = w.scenario_blocks().flat_map(|b| b.receipts.iter().map(|r| r.gas.clone())).collect();
    let failed_txs = w.scenario_blocks().flat_map(|b| &b.receipts).filter(|r| !r.status.is_success()).count();
    let heights: Vec<Height> = w.scenario_blocks().filter(|b| !b.txs.is_empty()).map(|b| b.height).collect();
    let delay_blocks = match (heights.first(), heights.last()) {
        (Some(a), Some(b)) => b - a + 1,
        _ => 0,
    };
    let fees_of = |who: &Address| -> Amount {
        w.ledger.receipts().filter(|r| r.gas.payer == *who).map(|r| r.fee).sum()
    };
    let client_spent = cfg.client_balance - w.ledger.balance(&client) - fees_of(&client);
    let owner_paid = w.ledger.balance(&owner) + fees_of(&owner);

    let mut metrics = MetricsReport {
        model: cfg.model,
        seed: cfg.seed,
        tx_count: receipts.len(),
        failed_txs,
        total_gas: receipts.iter().map(|r| r.gas_used).sum(),
        receipts,
        delay_blocks,
        outcome,
        client_detail,
        thing_access,
        owner_paid,
        client_spent,
        chain_accesses: w.chain_accesses.clone(),
        adversary,
        invariants: vec![],
    };
    metrics.invariants = check_invariants(&w, &metrics, &secrets, secret_public, &client_outcome);
    Ok(RunOutput { transcript: w.transcript, ledger: w.ledger, metrics })
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> InvariantCheck {
    InvariantCheck { name: name.to_string(), passed, detail: detail.into() }
}

fn check_invariants(
    w: &World,
    m: &MetricsReport,
    secrets: &Secrets,
    secret_public: bool,
    client_outcome: &Option<ClientOutcome>,
) -> Vec<InvariantCheck> {
    let cfg = &w.cfg;
    let price = cfg.prices.get(&cfg.scope).copied().unwrap_or(0);
    let mut out = Vec::new();

    let supply = w.ledger.supply();
    out.push(check(
        "conservation",
        w.ledger.is_conserved() && supply.total() == cfg.client_balance,
        format!("supply {supply:?}, genesis {}", cfg.client_balance),
    ));

    let reimported = Ledger::import(&w.ledger.export()).map(|l| l.export() == w.ledger.export());
    out.push(check(
        "chain_integrity",
        w.ledger.verify_chain() && matches!(reimported, Ok(true)),
        "hash links, receipts and replay",
    ));

    let has_token = matches!(client_outcome, Some(ClientOutcome::Finalized(_)));
    let paid = m.owner_paid == price && m.client_spent == price;
    let whole = m.owner_paid == 0 && m.client_spent == 0;
    let atomic = (paid && has_token) || (whole && !has_token && !secret_public);
    out.push(check(
        "atomicity",
        atomic,
        format!(
            "owner_paid={} client_spent={} token={} secret_public={}",
            m.owner_paid, m.client_spent, has_token, secret_public
        ),
    ));

    let ok = m.receipts.iter().all(GasReceipt::is_consistent) && m.tx_count == count_scenario_tx_events(w);
    out.push(check("receipts", ok, format!("{} receipts", m.tx_count)));

    // The preimage stays off every secure message and off the chain until
    // the transaction that claims with it.
    let mut leaked = Vec::new();
    for s in &secrets.preimages {
        let hex = s.to_hex();
        for (ch, _, _, body) in w.transcript.messages() {
            if *ch == Channel::Secure && serde_json::to_string(body).expect("serializes").contains(&hex) {
                leaked.push("secure message");
            }
        }
        'blocks: for b in w.ledger.blocks() {
            for tx in &b.txs {
                let is_reveal = matches!(
                    &tx.payload,
                    TxPayload::HtlcClaim { preimage, .. } if preimage == s
                ) || matches!(
                    &tx.payload,
                    TxPayload::ContractCall { call: crate::authz_contract::ContractCall::RevealSecret { preimage, .. }, .. }
                        if preimage == s
                );
                if is_reveal {
                    break 'blocks;
                }
                if serde_json::to_string(&tx.payload).expect("serializes").contains(&hex) {
                    leaked.push("chain before reveal");
                }
            }
        }
    }
    out.push(check("secret_hygiene", leaked.is_empty(), format!("{leaked:?}")));

    let pop_leak = secrets.pop.map(|p| {
        let hex = p.to_hex();
        let insecure = w
            .transcript
            .messages()
            .filter(|(ch, ..)| **ch == Channel::Insecure)
            .any(|(.., b)| serde_json::to_string(b).expect("serializes").contains(&hex));
        insecure || w.ledger.export().contains(&hex)
    });
    out.push(check("pop_confidentiality", pop_leak != Some(true), "PoP key absent from chain and insecure link"));

    if cfg.model == 2 {
        let direct = w
            .transcript
            .messages()
            .filter(|(_, f, t, _)| {
                matches!((f, t), (Role::Client, Role::AuthServer) | (Role::AuthServer, Role::Client))
            })
            .count();
        out.push(check("mediation", direct == 0, format!("{direct} direct client/AS messages")));
    }

    let thing_reads = m.chain_accesses.get(&Role::Thing).copied().unwrap_or(0);
    let thing_online = w
        .transcript
        .messages()
        .filter(|(_, f, t, _)| {
            (**f == Role::Thing || **t == Role::Thing) && matches!((f, t), (Role::AuthServer | Role::Ledger, _) | (_, Role::AuthServer | Role::Ledger))
        })
        .count();
    out.push(check(
        "offline_thing",
        thing_reads == 0 && thing_online == 0,
        format!("ledger accesses {thing_reads}, server messages {thing_online}"),
    ));

    if let Some(adv) = &m.adversary {
        out.push(check(
            "thing_soundness",
            adv.grants == 0 && !adv.pop_exposed,
            format!("{} attempts, {} grants", adv.attempts, adv.grants),
        ));
    }

    let honest = cfg.adversary.is_honest()
        && cfg.client_max_price.is_none_or(|m| m >= price)
        && cfg.client_balance >= price
        && cfg.required_events.iter().all(|e| cfg.recorded_events.contains(&e.event_topic) == e.required);
    if honest && cfg.prices.contains_key(&cfg.scope) {
        out.push(check("completeness", m.outcome == Outcome::Completed, format!("{:?}", m.outcome)));
    }
    out
}

fn count_scenario_tx_events(w: &World) -> usize {
    w.transcript
        .events()
        .iter()
        .filter(|e| matches!(e, Event::Tx { height, .. } if *height > w.start_height))
        .count()
}

/// Passive observer of the chain and the client/Thing link, then active
/// against the Thing with whatever it collected.
fn eavesdrop(
    w: &mut World,
    rng: &mut DetRng,
    contract: Option<Address>,
    pop: Option<&SymmetricKey>,
) -> AdversaryReport {
    let attempts = w.cfg.adversary.eavesdrop_attempts.max(1);
    let mut report = AdversaryReport { attempts, ..Default::default() };
    let mut tokens: Vec<SignedToken> = Vec::new();
    let mut e_pops: Vec<Ciphertext> = Vec::new();
    let mut proofs: Vec<(PopChallenge, PopResponse)> = Vec::new();
    for (ch, _, _, body) in w.transcript.messages() {
        if *ch != Channel::Insecure {
            continue;
        }
        match body {
            MessageBody::TokenPresentation { token, e_thing_pop } => {
                if let Ok(t) = SignedToken::decode(token) {
                    tokens.push(t);
                    report.token_observed = true;
                }
                e_pops.push(e_thing_pop.clone());
            }
            MessageBody::PopProof { challenge, response } => proofs.push((*challenge, *response)),
            _ => {}
        }
    }
    if let Some(contract) = contract {
        for req in w.ledger.contract(&contract).map(|c| c.requests.values().cloned().collect::<Vec<_>>()).unwrap_or_default() {
            let Some(a) = req.artifacts else { continue };
            e_pops.push(a.e_thing_pop.clone());
            if let Some(s) = req.revealed_preimage {
                if let Some(t) = crypto::decrypt(&s.as_key(), &a.e_s_token, roles_model2::AAD_S_TOKEN)
                    .ok()
                    .and_then(|b| SignedToken::decode(&b).ok())
                {
                    report.token_from_chain = true;
                    tokens.push(t);
                }
            }
        }
    }
    if let Some(p) = pop {
        let hex = p.to_hex();
        let seen = w.ledger.export().contains(&hex)
            || w.transcript
                .messages()
                .filter(|(ch, ..)| **ch == Channel::Insecure)
                .any(|(.., b)| serde_json::to_string(b).expect("serializes").contains(&hex));
        report.pop_exposed = seen;
    }

    let scope = w.cfg.scope.clone();
    w.thing.set_clock(w.ledger.height());
    for i in 0..attempts {
        let own_pop = SymmetricKey::random(rng);
        let token = tokens.get(i % tokens.len().max(1)).cloned().unwrap_or_else(|| {
            let claims = TokenClaims {
                issuer: w.cfg.issuer.clone(),
                audience: w.cfg.audience.clone(),
                scopes: [scope.clone()].into(),
                issued_at: 0,
                expires_at: w.ledger.height() + 100,
                session_nonce: [0; 16],
            };
            issue_token(claims, &own_pop, &SymmetricKey::random(rng)).expect("valid claims")
        });
        let e_pop = e_pops
            .get(i % e_pops.len().max(1))
            .cloned()
            .unwrap_or_else(|| crypto::encrypt(&SymmetricKey::random(rng), &own_pop.0, b"", rng));
        let result = match i % 4 {
            // fresh challenge, guessed answer
            0 => w.thing.begin_access(&token, &e_pop).and_then(|ch| {
                let mut guess = [0u8; 32];
                rng.fill_bytes(&mut guess);
                w.thing.complete_access(&ch, &PopResponse(Digest(guess)), &scope)
            }),
            // fresh challenge, replayed answer
            1 => w.thing.begin_access(&token, &e_pop).and_then(|ch| {
                let resp = proofs.first().map(|p| p.1).unwrap_or(PopResponse(Digest([0; 32])));
                w.thing.complete_access(&ch, &resp, &scope)
            }),
            // replay of a whole observed round
            2 => match proofs.get(i % proofs.len().max(1)) {
                Some((ch, resp)) => w.thing.complete_access(ch, resp, &scope),
                None => w.thing.complete_access(&PopChallenge([0; 16]), &PopResponse(Digest([0; 32])), &scope),
            },
            // rebind the token to a key of its own choosing
            _ => {
                let mut forged = token.clone();
                forged.token.pop_binding = crypto::hash(&own_pop.0);
                let e_own = crypto::encrypt(&SymmetricKey::random(rng), &own_pop.0, b"", rng);
                w.thing.begin_access(&forged, &e_own).and_then(|ch| {
                    let resp = PopResponse::compute(&own_pop, &ch, &forged);
                    w.thing.complete_access(&ch, &resp, &scope)
                })
            }
        };
        match result {
            Ok(_) => report.grants += 1,
            Err(r) => *report.denials.entry(format!("{r:?}")).or_insert(0) += 1,
        }
    }
    let h = w.ledger.height();
    w.transcript.message(
        h,
        Channel::Insecure,
        Role::Adversary,
        Role::Thing,
        MessageBody::AccessResult { granted: report.grants > 0, reason: Some(format!("{} attempts", attempts)) },
    );
    report
}

/// Side-by-side honest runs of both flows under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub model1: MetricsReport,
    pub model2: MetricsReport,
    pub gas_ratio: f64,
    pub delay_ratio: f64,
}

/// Gas figures published for the original deployment, shown for context
/// only; the cost table here is a simplified meter and does not reproduce
/// them.
pub const REFERENCE_GAS: (u64, u64) = (102_476, 366_277);

pub fn compare(base: &ScenarioConfig) -> Result<Comparison, HarnessError> {
    let honest = ScenarioConfig { adversary: AdversaryConfig::default(), token_pk_wrap: false, ..base.clone() };
    let m1 = run(&ScenarioConfig { model: 1, ..honest.clone() })?.metrics;
    let m2 = run(&ScenarioConfig { model: 2, ..honest })?.metrics;
    Ok(Comparison {
        seed: base.seed,
        gas_ratio: m2.total_gas as f64 / m1.total_gas as f64,
        delay_ratio: m2.delay_blocks as f64 / m1.delay_blocks as f64,
        model1: m1,
        model2: m2,
    })
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("seed {}\n", self.seed));
        s.push_str(&format!("{:<24}{:>14}{:>14}{:>10}\n", "", "model 1", "model 2", "ratio"));
        s.push_str(&format!(
            "{:<24}{:>14}{:>14}{:>10.3}\n",
            "transactions",
            self.model1.tx_count,
            self.model2.tx_count,
            self.model2.tx_count as f64 / self.model1.tx_count as f64
        ));
        s.push_str(&format!(
            "{:<24}{:>14}{:>14}{:>10.3}\n",
            "delay (blocks)", self.model1.delay_blocks, self.model2.delay_blocks, self.delay_ratio
        ));
        s.push_str(&format!(
            "{:<24}{:>14}{:>14}{:>10.3}\n",
            "gas (simulated)", self.model1.total_gas, self.model2.total_gas, self.gas_ratio
        ));
        s.push_str(&format!(
            "{:<24}{:>14}{:>14}{:>10.3}   (reference only, not reproduced)\n",
            "gas (published)",
            REFERENCE_GAS.0,
            REFERENCE_GAS.1,
            REFERENCE_GAS.1 as f64 / REFERENCE_GAS.0 as f64
        ));
        for (label, m) in [("model 1", &self.model1), ("model 2", &self.model2)] {
            s.push_str(&format!("\n{label} receipts\n"));
            for r in &m.receipts {
                s.push_str(&format!(
                    "  {} base {:>6} calldata {:>4} B {:>6} storage {:>3} w {:>7} total {:>7}\n",
                    &r.tx_id.to_hex()[..8],
                    r.base,
                    r.calldata_bytes,
                    r.calldata_gas,
                    r.storage_words,
                    r.storage_gas,
                    r.gas_used
                ));
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AuditStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub commitment: String,
    pub status: AuditStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub model: u8,
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.status != AuditStatus::Fail)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| e.status == AuditStatus::Fail).map(|e| e.commitment.as_str()).collect()
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                let status = match e.status {
                    AuditStatus::Pass => "PASS",
                    AuditStatus::Fail => "FAIL",
                    AuditStatus::Skipped => "SKIP",
                };
                format!("{:<12} {status} {}\n", e.commitment, e.detail)
            })
            .collect()
    }
}

fn entry(name: &str, ok: Option<bool>, detail: impl Into<String>) -> AuditEntry {
    let status = match ok {
        Some(true) => AuditStatus::Pass,
        Some(false) => AuditStatus::Fail,
        None => AuditStatus::Skipped,
    };
    AuditEntry { commitment: name.to_string(), status, detail: detail.into() }
}

/// Recomputes every commitment from the plaintexts in the transcript and
/// compares it with what the chain recorded.
pub fn audit(transcript: &str, chain: &str) -> Result<AuditReport, HarnessError> {
    let t = Transcript::from_ndjson(transcript)?;
    let (model, parties) = t
        .events()
        .iter()
        .find_map(|e| match e {
            Event::Header { model, parties, .. } => Some((*model, parties.clone())),
            _ => None,
        })
        .ok_or_else(|| HarnessError::Config("transcript has no header".into()))?;
    let disclosed_token = t.events().iter().rev().find_map(|e| match e {
        Event::Disclosure { disclosure: Disclosure::Token { token }, .. } => Some(token.clone()),
        _ => None,
    });
    let ledger = match Ledger::import(chain) {
        Ok(l) => l,
        Err(e) => {
            let entries = vec![entry("chain", Some(false), format!("dump does not replay: {e}; records missing or altered"))];
            return Ok(AuditReport { model, entries });
        }
    };
    let mut entries = vec![entry("chain", Some(ledger.verify_chain()), "block hashes and links")];
    if model == 1 {
        let pkg = t.messages().find_map(|(ch, _, _, b)| (*ch == Channel::Secure).then(|| GrantPackage::from_message(b)).flatten());
        let Some(pkg) = pkg else {
            entries.push(entry("package", None, "no grant package in transcript"));
            return Ok(AuditReport { model, entries });
        };
        let recorded = roles_model1::recorded_commitments(&ledger, &pkg.htlc_id);
        let on1 = recorded.first().copied();
        let on2 = recorded.get(1).copied();
        entries.push(match &disclosed_token {
            Some(tok) => {
                let h = crypto::hash(tok);
                entry("commit1", Some(on1 == Some(h)), format!("H(token) {} vs {}", &h.to_hex()[..16], hex_opt(on1)))
            }
            None => entry("commit1", None, "token not disclosed"),
        });
        let h2 = pkg.recompute_commit2();
        entries.push(entry("commit2", Some(on2 == Some(h2)), format!("{} vs {}", &h2.to_hex()[..16], hex_opt(on2))));
        let htlc = ledger.htlc(&pkg.htlc_id);
        let lock_ok = htlc.map(|h| {
            h.hash_lock == pkg.hash_lock && h.revealed_preimage.is_none_or(|s| s.hash_lock() == h.hash_lock)
        });
        entries.push(entry("hash_lock", Some(lock_ok == Some(true)), "package lock, HTLC lock and revealed secret"));
    } else {
        let Some(contract) = parties.contract else {
            return Err(HarnessError::Config("model 2 transcript without contract".into()));
        };
        let seen = t.events().iter().find_map(|e| match e {
            Event::Disclosure { disclosure: Disclosure::Artifacts { request_id, artifacts }, .. } => {
                Some((*request_id, artifacts.clone()))
            }
            _ => None,
        });
        let Some((id, seen)) = seen else {
            entries.push(entry("artifacts", None, "no artifacts disclosed"));
            return Ok(AuditReport { model, entries });
        };
        let req = ledger.read_request(&contract, &id).ok();
        let posted = req.and_then(|r| r.artifacts.clone());
        let posted_digests = posted.as_ref().map(|a| a.digests());
        for (i, (name, d)) in seen.digests().into_iter().enumerate() {
            let on = posted_digests.map(|p| p[i].1);
            entries.push(entry(name, Some(on == Some(d)), format!("{} vs {}", &d.to_hex()[..16], hex_opt(on))));
        }
        let revealed = req.and_then(|r| r.revealed_preimage);
        if let (Some(s), Some(a)) = (revealed, posted.as_ref()) {
            entries.push(entry("preimage", Some(s.hash_lock() == a.hash_lock), "H(s) against the posted lock"));
        }
        let token_entry = match (&disclosed_token, revealed, posted.as_ref()) {
            (Some(tok), Some(s), Some(a)) => match crypto::decrypt(&s.as_key(), &a.e_s_token, roles_model2::AAD_S_TOKEN) {
                Ok(inner) if SignedToken::decode(&inner).is_ok() => {
                    entry("token", Some(crypto::hash(&inner) == crypto::hash(tok)), "disclosed token against E_s(token)")
                }
                Ok(_) => entry("token", None, "token is wrapped to the client key"),
                Err(_) => entry("token", Some(false), "E_s(token) does not open under s"),
            },
            (None, ..) => entry("token", None, "token not disclosed"),
            _ => entry("token", None, "secret not revealed"),
        };
        entries.push(token_entry);
    }
    Ok(AuditReport { model, entries })
}

fn hex_opt(d: Option<Digest>) -> String {
    d.map(|d| d.to_hex()[..16].to_string()).unwrap_or_else(|| "no record on chain".into())
}

/// Which request ids a run created, for tests.
pub fn request_ids(ledger: &Ledger, contract: &Address) -> Vec<RequestId> {
    ledger.contract(contract).map(|c| c.requests.keys().copied().collect()).unwrap_or_default()
}
