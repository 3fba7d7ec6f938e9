mod common;

use common::*;
use proptest::prelude::*;

use qkdnet::harness::{RunOptions, Scenario};
use qkdnet::protocol::{otp_xor, Channel, Message};
use qkdnet::qusec::compute_relay_path;
use qkdnet::{KmsId, Status, WeightPolicy};

fn policy() -> impl Strategy<Value = WeightPolicy> {
    prop_oneof![Just(WeightPolicy::HopCount), Just(WeightPolicy::InverseKeyRate), Just(WeightPolicy::Distance)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relayed_keys_arrive_intact(g in arb_graph(7), s in 0usize..7, d in 0usize..7, pol in policy(), seed in any::<u64>()) {
        let (s, d) = (s % g.n, d % g.n);
        prop_assume!(s != d);
        let t = g.topology(pol, &[("APP_S", s), ("APP_T", d)], 3);
        // Neighbours always share keys directly, even when a detour is cheaper.
        let links = match t.shared_link(&node(s), &node(d), pol) {
            Some(l) => vec![l.id.clone()],
            None => compute_relay_path(&t, &node(s), &node(d), pol).unwrap().links,
        };
        let out = run(t, &pair_scenario("APP_S", "APP_T"), seed);
        prop_assert!(out.report.passed(), "{:?}", out.report.failures);
        prop_assert!(out.report.quiescent);

        // One key per traversed link, none elsewhere.
        prop_assert_eq!(out.report.total_keys_used, links.len() as u64);
        for (link, usage) in &out.report.link_usage {
            let want = u64::from(links.contains(link));
            prop_assert_eq!(usage.keys_used, want, "link {}", link);
            prop_assert_eq!(usage.pool_a.consumed, want);
            prop_assert_eq!(usage.pool_b.consumed, want);
        }

        let hops = links.len();
        prop_assert_eq!(count(&out.trace, "RelayPathInstall"), if hops > 1 { 2 * hops } else { 0 });
        prop_assert_eq!(count(&out.trace, "KeyRelay"), hops.saturating_sub(1));

        // Every relay payload is K1 under the pad of its own link.
        let k1 = out.outcome("initiator").unwrap().material.unwrap();
        for (payload, k2, k1) in key_relay_triples(&out, k1.as_bytes()) {
            prop_assert_eq!(otp_xor(&payload, &k2).unwrap(), k1.clone());
            prop_assert_ne!(payload, k1);
        }

        prop_assert!(controller_key_leaks(&out.trace).is_empty());
        let topo = out.network.topology();
        for e in &out.trace {
            if e.msg.carries_plaintext_key() {
                prop_assert_eq!(e.channel, Channel::IntraNode, "{} -> {}", e.from, e.to);
            }
            match &e.msg {
                Message::KeyRelay(m) => {
                    let (from, to) = (KmsId::from(e.from.as_str()), KmsId::from(e.to.as_str()));
                    prop_assert_eq!(topo.kms_peer(&from), Some(to.clone()));
                    let link = topo.kms_endpoint(&to).unwrap().1.clone();
                    prop_assert!(out.network.kms(&to).unwrap().pool().contains(&m.id_key_encryption));
                    prop_assert_eq!(out.network.kms(&to).unwrap().link(), &link);
                }
                Message::RelayProcessRequest(m) => {
                    let to = KmsId::from(e.to.as_str());
                    prop_assert_eq!(topo.kms_peer(&KmsId::from(e.from.as_str())), Some(to.clone()));
                    prop_assert!(out.network.kms(&to).unwrap().pool().contains(&m.id_relay_key));
                }
                _ => {}
            }
        }
    }

    #[test]
    fn cache_never_changes_key_material(g in arb_graph(6), s in 0usize..6, d in 0usize..6, seed in any::<u64>(), ttl in 1u64..100_000) {
        let (s, d) = (s % g.n, d % g.n);
        prop_assume!(s != d);
        let t = g.topology(WeightPolicy::HopCount, &[("APP_S", s), ("APP_T", d)], 6);
        let sc = Scenario::parse(r#"{"events":[
            {"event":"get_key","at":0,"app":"APP_S","target":"APP_T","label":"k1"},
            {"event":"get_key_with_id","at":10,"app":"APP_T","target":"APP_S","key_of":"k1","label":"t1"},
            {"event":"get_key","at":20,"app":"APP_S","target":"APP_T","label":"k2"},
            {"event":"get_key_with_id","at":30,"app":"APP_T","target":"APP_S","key_of":"k2","label":"t2"}]}"#).unwrap();
        let off = run_with(t.clone(), &sc, RunOptions { cache_ttl_ms: Some(0), ..RunOptions::seeded(seed) });
        let on = run_with(t, &sc, RunOptions { cache_ttl_ms: Some(ttl), ..RunOptions::seeded(seed) });
        let keys = |o: &qkdnet::harness::RunOutput| o.network.outcomes().into_iter()
            .map(|x| (x.label, x.status, x.material)).collect::<Vec<_>>();
        prop_assert_eq!(keys(&off), keys(&on));
        prop_assert!(keys(&on).iter().all(|(_, st, _)| *st == Status::Ok));
        prop_assert!(count(&on.trace, "KmsDiscoveryRequest") <= count(&off.trace, "KmsDiscoveryRequest"));
    }

    #[test]
    fn same_seed_same_bytes(g in arb_graph(6), seed in any::<u64>()) {
        let t = g.topology(WeightPolicy::Distance, &[("APP_S", 0), ("APP_T", g.n - 1)], 2);
        let a = run(t.clone(), &pair_scenario("APP_S", "APP_T"), seed);
        let b = run(t, &pair_scenario("APP_S", "APP_T"), seed);
        prop_assert_eq!(a.trace_text(), b.trace_text());
    }

    #[test]
    fn different_seeds_same_shape(seed_a in any::<u64>(), seed_b in any::<u64>()) {
        let a = run_file("mesh4.json", "relay1hop.json", seed_a);
        let b = run_file("mesh4.json", "relay1hop.json", seed_b);
        prop_assert!(qkdnet::harness::diff_records(&a.trace, &b.trace).is_empty());
    }
}

#[test]
fn shipped_scenarios_pass() {
    for (topology, scenario) in [
        ("mesh4-direct.json", "direct.json"),
        ("mesh4.json", "relay1hop.json"),
        ("chain32.json", "linear32.json"),
        ("mesh4-dry-d.json", "exhausted.json"),
        ("mesh4.json", "drop-keyrelay.json"),
        ("mesh4.json", "corrupt-keyrelay.json"),
        ("mesh4-direct.json", "cached-direct.json"),
        ("mesh4.json", "expired-session.json"),
    ] {
        for seed in [0, 1, 0xDEAD_BEEF] {
            let out = run_file(topology, scenario, seed);
            assert!(out.report.passed(), "{scenario} seed {seed}: {:?}", out.report.failures);
            assert!(controller_key_leaks(&out.trace).is_empty(), "{scenario}");
        }
    }
}

#[test]
fn dropped_key_relay_times_out_at_the_initiator() {
    let out = run_file("mesh4.json", "drop-keyrelay.json", 4);
    let o = out.outcome("a").unwrap();
    assert_eq!(o.status, Status::FailedTimeout);
    assert_eq!(o.completed_at, 1000);
    assert_eq!(out.report.faults.len(), 1);
    // Nothing was stored for the target.
    let kms4d = out.network.kms(&KmsId::from("KMS_4d")).unwrap();
    assert_eq!(kms4d.delivered_keys().count(), 0);
}

#[test]
fn corrupted_relay_breaks_key_equality_only() {
    let out = run_file("mesh4.json", "corrupt-keyrelay.json", 4);
    let a = out.outcome("a").unwrap().material.unwrap();
    let b = out.outcome("b").unwrap().material.unwrap();
    assert_ne!(a, b);
    let mut diff = otp_xor(a.as_bytes(), b.as_bytes()).unwrap();
    assert_eq!(diff.remove(0), 0xFF);
    assert!(diff.iter().all(|&x| x == 0));
}

#[test]
fn expired_session_fails_the_target_request() {
    let out = run_file("mesh4.json", "expired-session.json", 2);
    assert_eq!(out.outcome("a").unwrap().status, Status::Ok);
    assert!(!out.outcome("b").unwrap().status.is_ok());
}

#[test]
fn exhausted_link_fails_cleanly() {
    let out = run_file("mesh4-dry-d.json", "exhausted.json", 9);
    assert_eq!(out.outcome("a").unwrap().status, Status::FailedNoKey);
    assert_eq!(count(&out.trace, "KeyRelay"), 0);
    for kms in out.network.all_kms() {
        assert_eq!(kms.delivered_keys().count(), 0, "{}", kms.id());
    }
    // The target never learned a key id, so its request was not issued.
    assert_eq!(out.report.not_run, ["b"]);
}

#[test]
fn linear32_uses_one_key_per_link() {
    let out = run_file("chain32.json", "linear32.json", 11);
    assert!(out.report.passed(), "{:?}", out.report.failures);
    assert_eq!(out.report.total_keys_used, 31);
    assert!(out.report.link_usage.values().all(|u| u.keys_used == 1));
}
