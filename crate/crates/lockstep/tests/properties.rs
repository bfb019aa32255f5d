//! Randomized invariants over generated protocols, beyond the acceptance
//! criteria: text round trips, transformation idempotence, projection
//! completeness, and agreement between the execution enumerator and a
//! brute-force legality filter over all interleavings.

mod common;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use proptest::prelude::*;
use proptest::test_runner::Config;

use lockstep::oracle::{check_legal, enumerate_executions, Simulation, TraceEvent};
use lockstep::order::CommTriple;
use lockstep::protocol::{Capacity, EventRef, Global, Kind};
use lockstep::transform::insert_order_guards;

/// Every interleaving of the per-party traces, in some order.
fn interleavings(traces: &[Vec<TraceEvent>]) -> Vec<Vec<TraceEvent>> {
    fn go(
        traces: &[Vec<TraceEvent>],
        next: &mut Vec<usize>,
        acc: &mut Vec<TraceEvent>,
        out: &mut Vec<Vec<TraceEvent>>,
    ) {
        let mut fired = false;
        for p in 0..traces.len() {
            if next[p] < traces[p].len() {
                fired = true;
                acc.push(traces[p][next[p]].clone());
                next[p] += 1;
                go(traces, next, acc, out);
                next[p] -= 1;
                acc.pop();
            }
        }
        if !fired {
            out.push(acc.clone());
        }
    }
    let mut out = Vec::new();
    go(traces, &mut vec![0; traces.len()], &mut Vec::new(), &mut out);
    out
}

/// The only matching FIFO channels allow for a given order: rendezvous
/// sends pair with the immediately following receive on their channel,
/// buffered sends queue up and receives pop the head.
fn forced_matching(order: &[TraceEvent]) -> Vec<CommTriple> {
    let mut matching = Vec::new();
    let mut buffers: BTreeMap<&str, VecDeque<EventRef>> = BTreeMap::new();
    let mut claimed: BTreeSet<usize> = BTreeSet::new();
    for (i, e) in order.iter().enumerate() {
        match e.atom.kind {
            Kind::Send if e.channel.capacity == Capacity::Exact(0) => {
                if let Some(next) = order.get(i + 1) {
                    if next.atom.kind == Kind::Recv && next.channel.name == e.channel.name {
                        claimed.insert(i + 1);
                        matching.push(CommTriple {
                            send: e.atom.event.clone(),
                            channel: e.channel.clone(),
                            recv: next.atom.event.clone(),
                        });
                    }
                }
            }
            Kind::Send => {
                buffers.entry(&e.channel.name).or_default().push_back(e.atom.event.clone());
            }
            Kind::Recv => {
                if claimed.contains(&i) {
                    continue;
                }
                if let Some(send) = buffers.get_mut(e.channel.name.as_str()).and_then(VecDeque::pop_front)
                {
                    matching.push(CommTriple {
                        send,
                        channel: e.channel.clone(),
                        recv: e.atom.event.clone(),
                    });
                }
            }
        }
    }
    matching
}

fn fingerprint(order: &[TraceEvent], matching: &[CommTriple]) -> (String, String) {
    let trace: Vec<String> = order.iter().map(TraceEvent::to_string).collect();
    let pairs: Vec<String> =
        matching.iter().map(|t| format!("{} <- {}", t.recv, t.send)).collect();
    (trace.join(" "), pairs.join(", "))
}

proptest! {
    #![proptest_config(Config { cases: 500, ..Config::default() })]

    #[test]
    fn rendered_text_reparses_to_the_same_protocol(g in common::arb_protocol()) {
        let reparsed = Global::parse(&g.render()).unwrap();
        prop_assert_eq!(reparsed.normalize(), g.normalize());
    }

    #[test]
    fn guard_insertion_is_idempotent(g in common::arb_protocol()) {
        let first = insert_order_guards(&g).unwrap();
        let second = insert_order_guards(&first.output).unwrap();
        prop_assert!(second.inserted.is_empty(), "second pass inserted {:?}", second.inserted);
        prop_assert_eq!(second.output, first.output);
    }

    #[test]
    fn every_transmission_projects_to_one_send_and_one_receive(g in common::arb_protocol()) {
        let indexed = g.clone().index_transmissions().unwrap();
        let sim = Simulation::from_protocol(&indexed).unwrap();
        let mut by_kind: BTreeMap<(String, Kind), usize> = BTreeMap::new();
        for trace in &sim.parties {
            for e in &trace.events {
                *by_kind.entry((e.atom.event.party.to_string(), e.atom.kind)).or_default() += 1;
            }
        }
        for t in indexed.transmissions().unwrap() {
            let sends = by_kind.get(&(t.sender.to_string(), Kind::Send)).copied().unwrap_or(0);
            let recvs = by_kind.get(&(t.receiver.to_string(), Kind::Recv)).copied().unwrap_or(0);
            prop_assert!(sends >= 1 && recvs >= 1);
        }
        let total: usize = by_kind.values().sum();
        prop_assert_eq!(total, indexed.transmissions().unwrap().len() * 2);
    }
}

proptest! {
    #![proptest_config(Config { cases: 100, ..Config::default() })]

    #[test]
    fn enumeration_agrees_with_the_legality_filter(g in common::arb_protocol()) {
        let indexed = g.clone().index_transmissions().unwrap();
        let sim = Simulation::from_protocol(&indexed).unwrap();

        let enumeration = enumerate_executions(&sim, 100_000);
        prop_assert!(!enumeration.truncated);
        let enumerated: BTreeSet<(String, String)> = enumeration
            .executions
            .iter()
            .map(|e| fingerprint(&e.order, &e.matching))
            .collect();
        prop_assert_eq!(enumerated.len(), enumeration.executions.len());

        let traces: Vec<Vec<TraceEvent>> =
            sim.parties.iter().map(|p| p.events.clone()).collect();
        let mut filtered = BTreeSet::new();
        for order in interleavings(&traces) {
            let matching = forced_matching(&order);
            if check_legal(&order, &matching).is_legal() {
                filtered.insert(fingerprint(&order, &matching));
            }
        }
        prop_assert_eq!(enumerated, filtered);
    }
}
