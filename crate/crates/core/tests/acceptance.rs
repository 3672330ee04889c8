//! One PASS/FAIL line per acceptance criterion. Every criterion is also an
//! assertion, so `cargo test` fails if any line is red.

use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use authchain_core::crypto::{Address, Secret};
use authchain_core::harness::{self, AdversaryConfig, AuditStatus, Outcome, RunOutput, ScenarioConfig};
use authchain_core::ledger::{HtlcState, Ledger, LedgerConfig, LedgerError, TxStatus};
use authchain_core::transcript::{Disclosure, Event, MessageBody, Role, Transcript};

fn report(n: u32, name: &str, ok: bool, detail: String) -> bool {
    println!("criterion {n:>2} {:<28} {}  {detail}", name, if ok { "PASS" } else { "FAIL" });
    ok
}

fn run(cfg: ScenarioConfig) -> RunOutput {
    harness::run(&cfg).expect("scenario runs")
}

fn honest(model: u8) -> ScenarioConfig {
    ScenarioConfig { model, ..Default::default() }
}

fn c1_transaction_counts() -> bool {
    let t = Instant::now();
    let m1 = run(honest(1)).metrics;
    let t1 = t.elapsed();
    let t = Instant::now();
    let m2 = run(honest(2)).metrics;
    let t2 = t.elapsed();
    let ok = m1.tx_count == 3
        && m2.tx_count == 4
        && m1.outcome == Outcome::Completed
        && m2.outcome == Outcome::Completed
        && t1 < Duration::from_secs(1)
        && t2 < Duration::from_secs(1);
    report(1, "transaction counts", ok, format!("model1={} ({t1:.2?}) model2={} ({t2:.2?})", m1.tx_count, m2.tx_count))
}

fn c2_delay_ratio() -> bool {
    let cmp = harness::compare(&ScenarioConfig::default()).unwrap();
    // exact rational comparison: 3 * d2 == 4 * d1
    let (d1, d2) = (cmp.model1.delay_blocks, cmp.model2.delay_blocks);
    let ok = d1 > 0 && 3 * d2 == 4 * d1;
    report(2, "delay ratio 4/3", ok, format!("{d2}/{d1} blocks"))
}

fn c3_gas_ratio() -> bool {
    let cmp = harness::compare(&ScenarioConfig::default()).unwrap();
    let rendered = cmp.render();
    let labelled = rendered.contains("102476") && rendered.contains("366277") && rendered.contains("not reproduced");
    let (g1, g2) = (cmp.model1.total_gas, cmp.model2.total_gas);
    let ok = g2 > 3 * g1 && labelled;
    report(3, "gas ratio > 3", ok, format!("{g2}/{g1} = {:.3}", g2 as f64 / g1 as f64))
}

fn token_recoverable(out: &RunOutput) -> bool {
    let l = &out.ledger;
    l.htlcs().any(|h| h.revealed_preimage.is_some())
        || l.contract(&contract_of(out)).is_some_and(|c| c.requests.values().any(|r| r.revealed_preimage.is_some()))
}

fn contract_of(out: &RunOutput) -> Address {
    out.transcript
        .events()
        .iter()
        .find_map(|e| match e {
            Event::Header { parties, .. } => parties.contract,
            _ => None,
        })
        .unwrap_or(Address([0; 20]))
}

fn party(out: &RunOutput, role: Role) -> Address {
    out.transcript
        .events()
        .iter()
        .find_map(|e| match e {
            Event::Header { parties, .. } => Some(match role {
                Role::Client => parties.client,
                Role::Owner => parties.owner,
                _ => parties.auth_server,
            }),
            _ => None,
        })
        .expect("header")
}

fn random_scenario(rng: &mut ChaCha8Rng) -> ScenarioConfig {
    let model = rng.gen_range(1..=2);
    let adversary = AdversaryConfig {
        as_withholds_secret: rng.gen_bool(0.3),
        wrong_preimage: rng.gen_bool(0.3),
        tampered_package: rng.gen_bool(0.3),
        ..Default::default()
    };
    ScenarioConfig {
        model,
        seed: rng.next_u64(),
        timeout_blocks: rng.gen_range(1..=12),
        txs_per_block: rng.gen_range(1..=2),
        token_pk_wrap: model == 2 && rng.gen_bool(0.5),
        scope: if rng.gen_bool(0.5) { "read".into() } else { "write".into() },
        adversary,
        ..Default::default()
    }
}

/// Classifies a finished run using ledger state only.
fn atomic_side(out: &RunOutput, price: u64, initial: u64) -> Result<&'static str, String> {
    let l = &out.ledger;
    let client = party(out, Role::Client);
    let owner = party(out, Role::Owner);
    let owner_paid = l.balance(&owner) == price;
    let client_whole = l.balance(&client) == initial;
    let escrow = l.supply().htlc_escrow + l.supply().contract_escrow;
    let recoverable = token_recoverable(out);
    let decrypts = out.transcript.events().iter().any(|e| matches!(e, Event::Disclosure { disclosure: Disclosure::Token { .. }, .. }));
    match (owner_paid, client_whole, escrow, recoverable, decrypts) {
        (true, false, 0, true, true) if l.balance(&client) == initial - price => Ok("paid"),
        (false, true, 0, false, false) => Ok("refunded"),
        other => Err(format!("{other:?} outcome {:?}", out.metrics.outcome)),
    }
}

fn c4_atomicity() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa70c);
    let start = Instant::now();
    let (mut paid, mut refunded, mut violations) = (0, 0, Vec::new());
    let n = 240;
    for _ in 0..n {
        let cfg = random_scenario(&mut rng);
        let price = cfg.prices[&cfg.scope];
        let out = run(cfg.clone());
        match atomic_side(&out, price, cfg.client_balance) {
            Ok("paid") => paid += 1,
            Ok(_) => refunded += 1,
            Err(e) => violations.push(format!("seed {} model {}: {e}", cfg.seed, cfg.model)),
        }
        if !out.metrics.invariant("atomicity").is_some_and(|c| c.passed) {
            violations.push(format!("seed {}: harness atomicity check", cfg.seed));
        }
    }
    let elapsed = start.elapsed();
    for v in violations.iter().take(5) {
        println!("    violation: {v}");
    }
    let ok = violations.is_empty() && elapsed < Duration::from_secs(30) && paid > 0 && refunded > 0;
    report(
        4,
        "atomic exchange",
        ok,
        format!("{n} runs, {paid} paid, {refunded} refunded, {} violations, {elapsed:.2?}", violations.len()),
    )
}

/// Independent model of the windows: claim iff height < timeout,
/// refund iff height >= timeout, first success wins.
fn expected(attempts: &[(bool, u64)], timeout: u64) -> Vec<bool> {
    let mut done = false;
    attempts
        .iter()
        .map(|&(claim, h)| {
            let ok = !done && if claim { h < timeout } else { h >= timeout };
            done |= ok;
            ok
        })
        .collect()
}

fn c5_htlc_interleavings() -> bool {
    let payer = Address([1; 20]);
    let payee = Address([2; 20]);
    let s = Secret([9; 32]);
    let timeout = 6;
    let heights = [timeout - 1, timeout, timeout + 1];
    let mut cases = 0;
    let mut violations = 0;
    // every sequence of up to three attempts, each a claim or a refund at
    // one of the three heights, in non-decreasing height order
    let mut seqs: Vec<Vec<(bool, u64)>> = vec![vec![]];
    for _ in 0..3 {
        let mut next = Vec::new();
        for seq in &seqs {
            for claim in [true, false] {
                for &h in &heights {
                    if seq.last().is_none_or(|&(_, last)| h >= last) {
                        let mut v = seq.clone();
                        v.push((claim, h));
                        next.push(v);
                    }
                }
            }
        }
        seqs.extend(next.clone());
        seqs.retain(|v| !v.is_empty());
        seqs.sort();
        seqs.dedup();
    }
    for seq in &seqs {
        cases += 1;
        let cfg = LedgerConfig { txs_per_block: 8, ..Default::default() };
        let mut l = Ledger::new(cfg, [(payer, 100)]);
        let (_, id) = l.htlc_create(payer, payer, payee, 40, s.hash_lock(), timeout, vec![]).unwrap();
        l.mine_block();
        let dep = l.htlc_deposit(payer, id).unwrap();
        l.mine_block();
        assert!(l.receipt(&dep).unwrap().status.is_success());
        // attempts sharing a height go into the same block, in order
        let mut txs = Vec::new();
        for &h in &heights {
            let group: Vec<_> = seq.iter().filter(|a| a.1 == h).collect();
            if group.is_empty() {
                continue;
            }
            while l.height() + 1 < h {
                l.mine_block();
            }
            for &&(claim, _) in &group {
                txs.push(if claim { l.htlc_claim(payee, id, s).unwrap() } else { l.htlc_refund(payer, id).unwrap() });
            }
            l.mine_block();
        }
        let got: Vec<bool> = txs.iter().map(|t| l.receipt(t).unwrap().status.is_success()).collect();
        let landed: Vec<u64> = txs.iter().map(|t| l.receipt(t).unwrap().height).collect();
        let want = expected(seq, timeout);
        let h = l.htlc(&id).unwrap();
        let terminal_ok = match h.state {
            HtlcState::Claimed => l.balance(&payee) == 40 && l.balance(&payer) == 60 && h.revealed_preimage == Some(s),
            HtlcState::Refunded => l.balance(&payee) == 0 && l.balance(&payer) == 100,
            HtlcState::Deposited => l.balance(&payer) == 60 && l.balance(&payee) == 0,
            HtlcState::Created => false,
        };
        let heights_ok = landed.iter().zip(seq).all(|(got, want)| *got == want.1);
        if got != want || got.iter().filter(|x| **x).count() > 1 || !terminal_ok || !heights_ok || !l.is_conserved() {
            violations += 1;
            println!("    violation: {seq:?} landed {landed:?} got {got:?} want {want:?}");
        }
    }
    // single-attempt boundary spot checks against the exact ledger errors
    let mut spot = Vec::new();
    for (claim, h, want) in [
        (true, timeout - 1, None),
        (true, timeout, Some(LedgerError::Expired)),
        (true, timeout + 1, Some(LedgerError::Expired)),
        (false, timeout - 1, Some(LedgerError::NotYetExpired)),
        (false, timeout, None),
        (false, timeout + 1, None),
    ] {
        let mut l = Ledger::new(LedgerConfig::default(), [(payer, 100)]);
        let (_, id) = l.htlc_create(payer, payer, payee, 40, s.hash_lock(), timeout, vec![]).unwrap();
        l.mine_block();
        l.htlc_deposit(payer, id).unwrap();
        l.mine_block();
        while l.height() + 1 < h {
            l.mine_block();
        }
        let tx = if claim { l.htlc_claim(payee, id, s).unwrap() } else { l.htlc_refund(payer, id).unwrap() };
        l.mine_block();
        let r = l.receipt(&tx).unwrap();
        let got = match &r.status {
            TxStatus::Success => None,
            TxStatus::Failed { error } => Some(error.clone()),
        };
        spot.push(r.height == h && got == want);
    }
    let ok = violations == 0 && spot.iter().all(|x| *x);
    report(5, "HTLC interleavings", ok, format!("{cases} sequences + 6 boundary cases, {violations} violations"))
}

fn c6_conservation() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    let mut bad = 0;
    let n = 120;
    for _ in 0..n {
        let mut cfg = random_scenario(&mut rng);
        cfg.charge_gas = rng.gen_bool(0.3);
        let out = run(cfg.clone());
        let s = out.ledger.supply();
        if s.balances + s.htlc_escrow + s.contract_escrow + s.fees != cfg.client_balance || !out.ledger.is_conserved() {
            bad += 1;
        }
    }
    report(6, "conservation", bad == 0, format!("{n} runs, {bad} mismatches"))
}

fn c7_confidentiality() -> bool {
    let mut lines = Vec::new();
    let mut ok = true;
    for wrap in [false, true] {
        let cfg = ScenarioConfig {
            model: 2,
            seed: 77,
            token_pk_wrap: wrap,
            adversary: AdversaryConfig { eavesdropper: true, eavesdrop_attempts: 120, ..Default::default() },
            ..Default::default()
        };
        let out = run(cfg);
        let adv = out.metrics.adversary.clone().unwrap();
        let pop_on_chain = out.metrics.invariant("pop_confidentiality").is_some_and(|c| c.passed);
        let this = adv.attempts >= 100
            && adv.grants == 0
            && !adv.pop_exposed
            && pop_on_chain
            && adv.token_from_chain == !wrap
            && out.metrics.outcome == Outcome::Completed;
        ok &= this;
        lines.push(format!(
            "wrap={wrap}: token_from_chain={} grants {}/{}",
            adv.token_from_chain, adv.grants, adv.attempts
        ));
    }
    report(7, "confidentiality", ok, lines.join("; "))
}

fn c8_offline() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ff1);
    let mut bad = 0;
    let n = 60;
    for _ in 0..n {
        let mut cfg = random_scenario(&mut rng);
        cfg.adversary.eavesdropper = rng.gen_bool(0.3);
        cfg.adversary.eavesdrop_attempts = 8;
        let out = run(cfg);
        let reads = out.metrics.chain_accesses.get(&Role::Thing).copied().unwrap_or(0);
        let to_servers = out
            .transcript
            .messages()
            .filter(|(_, f, t, _)| **f == Role::Thing && matches!(t, Role::AuthServer | Role::Ledger))
            .count();
        if reads != 0 || to_servers != 0 || !out.metrics.invariant("offline_thing").is_some_and(|c| c.passed) {
            bad += 1;
        }
    }
    report(8, "offline verification", bad == 0, format!("{n} runs, {bad} with Thing ledger/AS calls"))
}

/// Flips one byte inside a hex field of the named message or disclosure and
/// returns the commitment the audit should blame.
fn mutate(t: &Transcript, model: u8, rng: &mut ChaCha8Rng) -> (String, &'static str) {
    let mut events: Vec<Event> = t.events().to_vec();
    fn flip(bytes: &mut [u8], rng: &mut ChaCha8Rng) {
        let i = rng.gen_range(0..bytes.len());
        bytes[i] ^= 1 << rng.gen_range(0..8);
    }
    let target;
    if model == 1 {
        let pick = rng.gen_range(0..4);
        target = if pick == 3 { "commit1" } else { "commit2" };
        for e in events.iter_mut() {
            match e {
                Event::Message { body: MessageBody::GrantPackage { pop_key, e_thing_pop, e_s_token, .. }, .. } => {
                    match pick {
                        0 => flip(&mut pop_key.0, rng),
                        1 => flip(&mut e_thing_pop.body, rng),
                        2 => flip(&mut e_s_token.body, rng),
                        _ => {}
                    }
                }
                Event::Disclosure { disclosure: Disclosure::Token { token }, .. } if pick == 3 => flip(token, rng),
                _ => {}
            }
        }
    } else {
        let pick = rng.gen_range(0..5);
        target = ["e_thing_pop", "e_client_pop", "e_s_token", "hash_lock", "token"][pick];
        for e in events.iter_mut() {
            match e {
                Event::Disclosure { disclosure: Disclosure::Artifacts { artifacts, .. }, .. } => match pick {
                    0 => flip(&mut artifacts.e_thing_pop.body, rng),
                    1 => flip(&mut artifacts.e_client_pop.body, rng),
                    2 => flip(&mut artifacts.e_s_token.body, rng),
                    3 => flip(&mut artifacts.hash_lock.0, rng),
                    _ => {}
                },
                Event::Disclosure { disclosure: Disclosure::Token { token }, .. } if pick == 4 => flip(token, rng),
                _ => {}
            }
        }
    }
    let text: String = events.iter().map(|e| serde_json::to_string(e).unwrap() + "\n").collect();
    (text, target)
}

fn c9_audit() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa0d1);
    let mut honest_ok = true;
    let mut wrong = Vec::new();
    let mut total = 0;
    for model in [1u8, 2] {
        let out = run(ScenarioConfig { model, seed: 5, ..Default::default() });
        let (t, chain) = (out.transcript.to_ndjson(), out.chain_dump());
        let rep = harness::audit(&t, &chain).unwrap();
        honest_ok &= rep.passed() && rep.entries.iter().filter(|e| e.status == AuditStatus::Pass).count() >= 3;
        for _ in 0..60 {
            total += 1;
            let (mutated, target) = mutate(&out.transcript, model, &mut rng);
            let rep = harness::audit(&mutated, &chain).unwrap();
            if rep.failed() != vec![target] {
                wrong.push(format!("model {model}: expected {target}, got {:?}", rep.failed()));
            }
        }
        // a chain dump with one transaction line removed
        let lines: Vec<&str> = chain.lines().collect();
        let cut = lines.iter().position(|l| l.contains("\"htlc_create\"") || l.contains("\"post_grant\"")).unwrap();
        let truncated: String = lines.iter().enumerate().filter(|(i, _)| *i != cut).map(|(_, l)| format!("{l}\n")).collect();
        let rep = harness::audit(&t, &truncated).unwrap();
        total += 1;
        if rep.passed() {
            wrong.push(format!("model {model}: missing record not detected"));
        }
    }
    for w in wrong.iter().take(5) {
        println!("    {w}");
    }
    let ok = honest_ok && wrong.is_empty() && total >= 100;
    report(9, "audit", ok, format!("honest PASS={honest_ok}, {total} mutations, {} misattributed", wrong.len()))
}

fn c10_determinism() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(0xde7);
    let mut same = 0;
    let n = 20;
    for _ in 0..n {
        let mut cfg = random_scenario(&mut rng);
        cfg.adversary.eavesdropper = rng.gen_bool(0.5);
        cfg.adversary.eavesdrop_attempts = 4;
        let a = run(cfg.clone());
        let b = run(cfg);
        if a.transcript.to_ndjson() == b.transcript.to_ndjson() && a.chain_dump() == b.chain_dump() {
            same += 1;
        }
    }
    report(10, "determinism", same == n, format!("{same}/{n} runs byte-identical"))
}

fn main() {
    let results = [
        c1_transaction_counts(),
        c2_delay_ratio(),
        c3_gas_ratio(),
        c4_atomicity(),
        c5_htlc_interleavings(),
        c6_conservation(),
        c7_confidentiality(),
        c8_offline(),
        c9_audit(),
        c10_determinism(),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    if !failed.is_empty() {
        eprintln!("criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
