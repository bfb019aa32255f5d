//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line. Run with `cargo test --test acceptance -- --nocapture`
//! to see every line; a failing criterion also fails its test.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::path::PathBuf;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestError, TestRunner};

use lockstep::oracle::{
    brute_force_count, check_legal, classify_race, count_protocols, enumerate_executions,
    probe_alignment, Simulation, TraceEvent,
};
use lockstep::order::{
    apply_channel_rules, derive_orders, saturate, AtomicEvent, CommTriple, PropagationRules,
};
use lockstep::program::parse_program;
use lockstep::project::{project_endpoints, project_party, projection_context, ProjectionContext};
use lockstep::protocol::{Capacity, Channel, EventRef, Global, Index, Kind, Party};
use lockstep::transform::insert_order_guards;
use lockstep::verify::{verify, PartyOutcome, PartyReport};

fn criterion(name: &str, body: impl FnOnce() + UnwindSafe) {
    let result = catch_unwind(body);
    println!("[{}] {name}", if result.is_ok() { "pass" } else { "FAIL" });
    if let Err(panic) = result {
        resume_unwind(panic);
    }
}

/// Renders a program whose parties act in the protocol's textual order:
/// each transmission contributes a send to its sender and a receive to
/// its receiver, and each cross-party guard contributes the rendezvous
/// pair standing in for it. Guard channels are declared after the
/// protocol's own, so they bind in introduction order; the `~` marking
/// fresh names is dropped for the source text.
fn canonical_program(ctx: &ProjectionContext) -> String {
    fn program_name(channel: &str) -> String {
        channel.trim_start_matches('~').to_string()
    }
    fn walk(
        g: &Global,
        ctx: &ProjectionContext,
        guard_at: &mut usize,
        stmts: &mut BTreeMap<Party, Vec<String>>,
    ) {
        match g {
            Global::Emp => {}
            Global::Transmission { sender, channel, receiver, .. } => {
                stmts.get_mut(sender).unwrap().push(format!("\t{} <- 0", channel.name));
                stmts.get_mut(receiver).unwrap().push(format!("\t<-{}", channel.name));
            }
            Global::Guard { .. } => {
                let at = *guard_at;
                *guard_at += 1;
                if let Some(ins) = &ctx.insertions[at] {
                    let name = program_name(&ins.channel.name);
                    stmts.get_mut(&ins.from).unwrap().push(format!("\t{name} <- 0"));
                    stmts.get_mut(&ins.to).unwrap().push(format!("\t<-{name}"));
                }
            }
            Global::Seq(l, r) | Global::Par(l, r) => {
                walk(l, ctx, guard_at, stmts);
                walk(r, ctx, guard_at, stmts);
            }
        }
    }

    let mut src = String::from("package main\n\n");
    for (name, cap) in ctx.global.channels() {
        let Capacity::Exact(k) = cap else { panic!("channel {name} has no concrete capacity") };
        src.push_str(&format!("var {name} = make(chan int, {k})\n"));
    }
    for channel in ctx.guard_channels() {
        src.push_str(&format!("var {} = make(chan int, 0)\n", program_name(&channel.name)));
    }
    let mut stmts: BTreeMap<Party, Vec<String>> =
        ctx.global.parties().into_iter().map(|p| (p, Vec::new())).collect();
    walk(&ctx.global, ctx, &mut 0, &mut stmts);
    for (party, stmts) in &stmts {
        src.push_str(&format!("\nfunc {party}() {{\n{}\n}}\n", stmts.join("\n")));
    }
    src.push_str("\nfunc main() {\n");
    for party in stmts.keys() {
        src.push_str(&format!("\tgo {party}()\n"));
    }
    src.push_str("}\n");
    src
}

fn fixture(name: &str) -> String {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "testdata", name]
        .iter()
        .collect();
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn protocol(name: &str) -> Global {
    Global::parse(&fixture(name)).expect("fixture parses")
}

fn no_bindings() -> BTreeMap<String, String> {
    BTreeMap::new()
}

fn states(p: &PartyReport) -> Vec<String> {
    p.steps.iter().map(|s| s.after.render()).collect()
}

fn ev(party: &str, index: &[u32], kind: Kind) -> TraceEvent {
    TraceEvent {
        atom: AtomicEvent::new(EventRef::new(party, Index(index.to_vec())), kind),
        channel: Channel::new("c", Capacity::Any),
    }
}

#[test]
fn criterion_01_sequential_protocol_counts() {
    criterion("counting: totals 1, 7, 87, 1657 and brute force agrees", || {
        let totals: Vec<u128> = (1..=4).map(|n| count_protocols(n).unwrap()).collect();
        assert_eq!(totals, [1, 7, 87, 1657]);
        for n in 1..=3 {
            assert_eq!(brute_force_count(n).unwrap(), count_protocols(n).unwrap(), "n = {n}");
        }
    });
}

#[test]
fn criterion_02_verification_succeeds_on_the_faithful_program() {
    criterion("verification: faithful program leaves no obligations", || {
        let g = protocol("simple_guarded.gp");
        let p = parse_program(&fixture("verified.go")).unwrap();
        let report = verify(&g, &p, &no_bindings()).unwrap();
        assert!(report.success);

        let a = &report.parties[0];
        assert_eq!(a.entry.render(), "{c: !A.1, d: guard(A.1) ; !A.1.1}");
        assert_eq!(
            states(a),
            ["{c: emp, d: !A.1.1} knows {A.1}", "{c: emp, d: emp} knows {A.1, A.1.1}"]
        );

        let b = &report.parties[1];
        assert_eq!(
            b.entry.render(),
            "{c: ?B.1 ; !B.2, d: ?B.1.1 ; guard(B.2), e: guard(B.1) ; !B.1.2}"
        );
        assert_eq!(
            states(b),
            [
                "{c: !B.2, d: ?B.1.1 ; guard(B.2), e: !B.1.2} knows {B.1}",
                "{c: !B.2, d: guard(B.2), e: !B.1.2} knows {B.1, B.1.1}",
                "{c: !B.2, d: guard(B.2), e: emp} knows {B.1, B.1.1, B.1.2}",
                "{c: emp, d: emp, e: emp} knows {B.1, B.1.1, B.1.2, B.2}",
            ]
        );

        let c = &report.parties[2];
        assert_eq!(c.entry.render(), "{c: ?C.2, e: ?C.1.2 ; guard(C.2)}");
        assert_eq!(
            states(c),
            ["{c: ?C.2, e: guard(C.2)} knows {C.1.2}", "{c: emp, e: emp} knows {C.1.2, C.2}"]
        );

        for p in &report.parties {
            assert!(p.outcome.is_success());
            assert_eq!(p.residue.render(), "emp");
        }
    });
}

#[test]
fn criterion_03_verification_pinpoints_the_broken_program() {
    criterion("verification: broken program fails with exact residues", || {
        let g = protocol("simple_guarded.gp");
        let p = parse_program(&fixture("failed.go")).unwrap();
        let report = verify(&g, &p, &no_bindings()).unwrap();
        assert!(!report.success);

        let a = &report.parties[0];
        match &a.outcome {
            PartyOutcome::FailPrecondition { stmt, reason, .. } => {
                assert_eq!(stmt, "e <- 0");
                assert!(reason.contains("no endpoint protocol"), "{reason}");
            }
            other => panic!("expected a precondition failure, got {other:?}"),
        }
        assert_eq!(a.final_assertion.render(), "{c: emp, d: !A.1.1} knows {A.1}");
        assert_eq!(a.residue.render(), "d!A.1.1");

        let b = &report.parties[1];
        assert!(matches!(b.outcome, PartyOutcome::FailUnconsumed));
        assert_eq!(
            b.final_assertion.render(),
            "{c: !B.2, d: guard(B.2), e: !B.1.2} knows {B.1, B.1.1}"
        );
        assert_eq!(b.residue.render(), "c!B.2 || guard(d, B.2) || e!B.1.2");

        let c = &report.parties[2];
        assert!(c.outcome.is_success());
        assert_eq!(c.final_assertion.render(), "{c: emp, e: emp} knows {C.1.2, C.2}");
    });
}

#[test]
fn criterion_04_guard_insertion_matches_the_expected_guards() {
    criterion("transformation: inserted guards and their positions", || {
        let simple = insert_order_guards(&protocol("simple.gp")).unwrap();
        assert_eq!(simple.output.render(), fixture("simple_guarded.gp").lines().last().unwrap());
        let placed: Vec<(String, String, String)> = simple
            .inserted
            .iter()
            .map(|i| {
                (format!("[{} < {}]", i.lhs, i.rhs), i.between.0.to_string(), i.between.1.to_string())
            })
            .collect();
        assert_eq!(
            placed,
            [
                ("[A.1 < B.2]".into(), "1".into(), "2".into()),
                ("[B.1 < C.2]".into(), "1".into(), "2".into()),
            ]
        );

        let triple = insert_order_guards(&protocol("triple.gp")).unwrap();
        let guards: Vec<String> = triple
            .inserted
            .iter()
            .map(|i| format!("[{} < {}]", i.lhs, i.rhs))
            .collect();
        assert_eq!(guards, ["[A.1 < B.2]", "[B.1 < C.2]", "[B.2 < C.3]", "[C.2 < A.3]"]);
        assert!(simple.warnings.is_empty() && triple.warnings.is_empty());
    });
}

#[test]
fn criterion_05_projection_matches_the_expected_local_protocols() {
    criterion("projection: per-party and per-endpoint protocols", || {
        let ctx = projection_context(&protocol("simple_guarded.gp")).unwrap();
        let party = |name: &str| project_party(&ctx, &Party::new(name)).unwrap();
        assert_eq!(party("A").render(), "c!A.1 ; guard(~g1, A.1) ; ~g1!A.1.1");
        assert_eq!(
            party("B").render(),
            "c?B.1 ; ~g1?B.1.1 ; guard(~g1, B.2) ; guard(~g2, B.1) ; ~g2!B.1.2 ; c!B.2"
        );
        assert_eq!(party("C").render(), "~g2?C.1.2 ; guard(~g2, C.2) ; c?C.2");

        let b = project_endpoints(&ctx, &Party::new("B")).unwrap();
        assert_eq!(b["c"].1.render(), "?B.1 ; !B.2");
        assert_eq!(b["~g1"].1.render(), "?B.1.1 ; guard(B.2)");
        assert_eq!(b["~g2"].1.render(), "guard(B.1) ; !B.1.2");
    });
}

#[test]
fn criterion_06_enumeration_finds_the_race_and_the_guards_remove_it() {
    criterion("oracle: two executions, one racy; guarded admits one", || {
        let g = protocol("simple.gp").index_transmissions().unwrap();
        let sim = Simulation::from_protocol(&g).unwrap();
        let e = enumerate_executions(&sim, 100);
        assert_eq!(e.executions.len(), 2);

        let intended = derive_orders(&g).unwrap().comm;
        let classes: Vec<bool> = e
            .executions
            .iter()
            .map(|x| classify_race(x, &intended).race_free)
            .collect();
        assert_eq!(classes, [true, false]);
        let witness = classify_race(&e.executions[1], &intended).witness.unwrap();
        assert_eq!(witness.recv, EventRef::new("C", Index::top(2)));
        assert_eq!(witness.actual, Some(EventRef::new("A", Index::top(1))));

        let guarded = protocol("simple_guarded.gp");
        let sim = Simulation::from_protocol(&guarded).unwrap();
        let e = enumerate_executions(&sim, 100);
        assert_eq!(e.executions.len(), 1);
        let intended = derive_orders(&guarded.index_transmissions().unwrap()).unwrap().comm;
        assert!(classify_race(&e.executions[0], &intended).race_free);
    });
}

#[test]
fn criterion_07_legality_rejects_the_out_of_order_delivery() {
    criterion("legality: out-of-order delivery rejected with a cycle", || {
        let order = [
            ev("B", &[1], Kind::Recv),
            ev("B", &[2], Kind::Send),
            ev("A", &[1], Kind::Send),
            ev("C", &[2], Kind::Recv),
        ];
        let matching = [CommTriple {
            send: EventRef::new("A", Index::top(1)),
            channel: Channel::new("c", Capacity::Any),
            recv: EventRef::new("C", Index::top(2)),
        }];
        let legality = check_legal(&order, &matching);
        assert!(!legality.is_legal());
        assert!(legality.violations.iter().any(|v| v.cycle.is_some()));

        let g = protocol("simple.gp");
        let sim = Simulation::from_protocol(&g).unwrap();
        for x in enumerate_executions(&sim, 100).executions {
            assert!(check_legal(&x.order, &x.matching).is_legal(), "{x}");
        }
    });
}

#[test]
fn criterion_08_guard_cycle_is_flagged_before_running_anything() {
    criterion("deadlock screen: guard cycle detected, guarded protocol clean", || {
        let cyclic = protocol("guarded_cycle.gp").index_transmissions().unwrap();
        let orders = derive_orders(&cyclic).unwrap();
        let cycle = orders.order.detect_cycle().expect("cycle expected");
        let events: Vec<String> =
            cycle.iter().map(|p| p.atom().event.to_string()).collect();
        assert!(events.contains(&"B.1".to_string()), "{events:?}");
        assert!(events.contains(&"C.2".to_string()), "{events:?}");

        let clean = protocol("simple_guarded.gp").index_transmissions().unwrap();
        assert!(derive_orders(&clean).unwrap().order.detect_cycle().is_none());
    });
}

#[test]
fn criterion_09_unsound_propagation_is_caught_by_the_oracle() {
    criterion("propagation probe: unsound rule contradicted by a racy run", || {
        let probes = probe_alignment(&protocol("simple.gp"), 100).unwrap();
        let c = probes.iter().find(|p| p.channel == "c").expect("probe for c");
        assert!(c.aligned);
        assert!(c.racy.is_some());
        assert!(c.discrepancy);
    });
}

#[test]
fn criterion_10_random_protocols_uphold_the_invariants() {
    criterion("properties: 500 random protocols uphold the invariants", || {
        let mut runner = TestRunner::new(Config { cases: 500, ..Config::default() });
        let result = runner.run(&common::arb_protocol(), |g| {
            let indexed = g.clone().index_transmissions().unwrap();

            // (a) The derived order is acyclic, before and after guard
            // insertion.
            let mut orders = derive_orders(&indexed).unwrap();
            apply_channel_rules(&mut orders).unwrap();
            saturate(&mut orders.order, &orders.comm, PropagationRules::sound());
            prop_assert!(orders.order.detect_cycle().is_none());

            let transformed = insert_order_guards(&g).unwrap();
            let t_indexed = transformed.output.clone().index_transmissions().unwrap();
            let mut t_orders = derive_orders(&t_indexed).unwrap();
            apply_channel_rules(&mut t_orders).unwrap();
            saturate(&mut t_orders.order, &t_orders.comm, PropagationRules::sound());
            prop_assert!(t_orders.order.detect_cycle().is_none());

            // (b) A verified canonical implementation admits no racy
            // execution.
            if transformed.warnings.is_empty() {
                let ctx = projection_context(&transformed.output).unwrap();
                let src = canonical_program(&ctx);
                let program = parse_program(&src).unwrap();
                let report = verify(&transformed.output, &program, &no_bindings()).unwrap();
                prop_assert!(report.success, "canonical program fails to verify:\n{src}");
                let sim =
                    Simulation::from_program(&transformed.output, &program, &no_bindings())
                        .unwrap();
                let e = enumerate_executions(&sim, 4000);
                prop_assert!(!e.executions.is_empty());
                let intended = derive_orders(&ctx.global).unwrap().comm;
                for x in &e.executions {
                    prop_assert!(
                        classify_race(x, &intended).race_free,
                        "racy execution of a verified program: {x}\n{src}"
                    );
                }
            }

            // (c) Normalization and indexing are idempotent.
            let normalized = g.normalize();
            prop_assert_eq!(normalized.normalize(), normalized);
            let once = g.clone().index_transmissions().unwrap();
            prop_assert_eq!(once.clone().index_transmissions().unwrap(), once);

            // (d) Rendezvous pairs are adjacent in every execution.
            let sim = Simulation::from_protocol(&indexed).unwrap();
            for x in enumerate_executions(&sim, 4000).executions {
                for t in &x.matching {
                    if t.channel.capacity != Capacity::Exact(0) {
                        continue;
                    }
                    let send = x
                        .order
                        .iter()
                        .position(|e| e.atom == t.send_atom())
                        .unwrap();
                    let recv = x
                        .order
                        .iter()
                        .position(|e| e.atom == t.recv_atom())
                        .unwrap();
                    prop_assert_eq!(recv, send + 1, "rendezvous split in {}", &x);
                }
            }
            Ok(())
        });
        if let Err(TestError::Fail(reason, value)) = &result {
            panic!("property failed: {reason}\nprotocol: {}", value.render());
        }
        result.unwrap();
    });
}
