//! Guard insertion that removes communication races.
//!
//! On each channel, consecutive transmissions compete for the same buffer
//! slots; a receive can pick up the wrong send unless their order is pinned
//! down. For every consecutive pair on a channel that the protocol already
//! sequences, two guards are inserted immediately before the later
//! transmission: sends in index order, then receives in index order. Pairs
//! related only by concurrent composition have no sequencing to strengthen,
//! so they are reported as warnings instead.

use std::collections::BTreeSet;

use crate::protocol::{EventRef, Global, Index, ProtocolError};

/// One guard the transformation added.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertedGuard {
    pub lhs: EventRef,
    pub rhs: EventRef,
    /// Indexes of the transmission pair this guard orders.
    pub between: (Index, Index),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransformWarning {
    /// Consecutive transmissions on one channel that no `;` orders. Guards
    /// cannot fix their race; the protocol needs restructuring.
    UnorderedAdjacentPair { channel: String, first: Index, second: Index },
}

impl std::fmt::Display for TransformWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransformWarning::UnorderedAdjacentPair { channel, first, second } => write!(
                f,
                "transmissions {first} and {second} on channel {channel} are consecutive but only concurrently composed; no guard inserted"
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransformReport {
    /// The indexed input protocol.
    pub input: Global,
    /// The guarded protocol, flattened with transmissions kept in their
    /// textual order.
    pub output: Global,
    pub inserted: Vec<InsertedGuard>,
    pub warnings: Vec<TransformWarning>,
}

/// Inserts ordering guards for every sequenced consecutive pair on each
/// channel. Guards that the protocol already contains are not duplicated,
/// so the transformation is idempotent.
pub fn insert_order_guards(g: &Global) -> Result<TransformReport, ProtocolError> {
    let input = g.index_transmissions()?;
    let transmissions = input.transmissions()?;
    let sequenced: BTreeSet<(Index, Index)> = input
        .sequential_pairs()?
        .into_iter()
        .map(|(a, b)| (a.index, b.index))
        .collect();
    let existing: BTreeSet<(EventRef, EventRef)> = input.guards().into_iter().collect();

    let channels: BTreeSet<String> =
        transmissions.iter().map(|t| t.channel.name.clone()).collect();

    let mut inserted = Vec::new();
    let mut warnings = Vec::new();
    // Guards to splice in, keyed by the transmission they go in front of.
    let mut plan: Vec<(Index, Vec<(EventRef, EventRef)>)> = Vec::new();

    for channel in channels {
        let chain: Vec<_> =
            transmissions.iter().filter(|t| t.channel.name == channel).collect();
        for pair in chain.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if !sequenced.contains(&(a.index.clone(), b.index.clone())) {
                warnings.push(TransformWarning::UnorderedAdjacentPair {
                    channel: channel.clone(),
                    first: a.index.clone(),
                    second: b.index.clone(),
                });
                continue;
            }
            let mut guards = Vec::new();
            for (lhs, rhs) in [
                (a.send_event(), b.send_event()),
                (a.recv_event(), b.recv_event()),
            ] {
                if existing.contains(&(lhs.clone(), rhs.clone())) {
                    continue;
                }
                inserted.push(InsertedGuard {
                    lhs: lhs.clone(),
                    rhs: rhs.clone(),
                    between: (a.index.clone(), b.index.clone()),
                });
                guards.push((lhs, rhs));
            }
            if !guards.is_empty() {
                plan.push((b.index.clone(), guards));
            }
        }
    }

    let output = splice(&input, &plan).flattened();
    Ok(TransformReport { input, output, inserted, warnings })
}

/// Rebuilds the tree with each planned guard list spliced in directly
/// before its target transmission.
fn splice(g: &Global, plan: &[(Index, Vec<(EventRef, EventRef)>)]) -> Global {
    match g {
        Global::Transmission { index: Some(index), .. } => {
            let Some((_, guards)) = plan.iter().find(|(target, _)| target == index) else {
                return g.clone();
            };
            guards.iter().rev().fold(g.clone(), |acc, (lhs, rhs)| {
                Global::seq(Global::guard(lhs.clone(), rhs.clone()), acc)
            })
        }
        Global::Seq(l, r) => Global::seq(splice(l, plan), splice(r, plan)),
        Global::Par(l, r) => Global::par(splice(l, plan), splice(r, plan)),
        other => other.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transformed(text: &str) -> TransformReport {
        insert_order_guards(&Global::parse(text).unwrap()).unwrap()
    }

    fn normal(text: &str) -> Global {
        Global::parse(text).unwrap().index_transmissions().unwrap().normalize()
    }

    #[test]
    fn guards_pin_down_consecutive_sequenced_pair() {
        let r = transformed("A -c-> B ; B -c-> C");
        assert_eq!(r.output, normal("A -c-> B ; [A.1 < B.2] ; [B.1 < C.2] ; B -c-> C"));
        assert_eq!(r.output.render(), "A -c-> B ; [A.1 < B.2] ; [B.1 < C.2] ; B -c-> C");
        assert_eq!(r.inserted.len(), 2);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn three_transmission_chain_gets_four_guards() {
        let r = transformed("A -c-> B ; B -c-> C ; C -c-> A");
        assert_eq!(
            r.output.render(),
            "A -c-> B ; [A.1 < B.2] ; [B.1 < C.2] ; B -c-> C ; [B.2 < C.3] ; [C.2 < A.3] ; C -c-> A"
        );
        let pairs: Vec<(String, String)> = r
            .inserted
            .iter()
            .map(|ig| (ig.lhs.to_string(), ig.rhs.to_string()))
            .collect();
        assert_eq!(
            pairs,
            [
                ("A.1".to_string(), "B.2".to_string()),
                ("B.1".to_string(), "C.2".to_string()),
                ("B.2".to_string(), "C.3".to_string()),
                ("C.2".to_string(), "A.3".to_string()),
            ]
        );
    }

    #[test]
    fn transformation_is_idempotent() {
        let first = transformed("A -c-> B ; B -c-> C");
        let second = insert_order_guards(&first.output).unwrap();
        assert!(second.inserted.is_empty());
        assert_eq!(second.output, first.output);
    }

    #[test]
    fn existing_guards_are_not_duplicated() {
        let r = transformed("A -c-> B ; [A.1 < B.2] ; B -c-> C");
        assert_eq!(r.inserted.len(), 1);
        assert_eq!(r.inserted[0].lhs.to_string(), "B.1");
        assert_eq!(r.inserted[0].rhs.to_string(), "C.2");
        assert_eq!(r.output.render(), "A -c-> B ; [A.1 < B.2] ; [B.1 < C.2] ; B -c-> C");
    }

    #[test]
    fn concurrent_pair_warns_instead_of_guarding() {
        let r = transformed("A -c-> B || C -c-> D");
        assert!(r.inserted.is_empty());
        assert_eq!(r.warnings.len(), 1);
        assert!(matches!(
            &r.warnings[0],
            TransformWarning::UnorderedAdjacentPair { channel, .. } if channel == "c"
        ));
        assert_eq!(r.output, normal("A -c-> B || C -c-> D"));
    }

    #[test]
    fn interleaved_channels_are_chained_separately() {
        let r = transformed("A -c-> B ; B -d-> C ; C -c-> A");
        let pairs: Vec<(String, String)> = r
            .inserted
            .iter()
            .map(|ig| (ig.lhs.to_string(), ig.rhs.to_string()))
            .collect();
        assert_eq!(
            pairs,
            [("A.1".to_string(), "C.3".to_string()), ("B.1".to_string(), "A.3".to_string())]
        );
        assert_eq!(
            r.output.render(),
            "A -c-> B ; B -d-> C ; [A.1 < C.3] ; [B.1 < A.3] ; C -c-> A"
        );
    }

    #[test]
    fn same_party_guards_are_still_inserted() {
        let r = transformed("A -c-> B ; A -c-> C");
        let pairs: Vec<(String, String)> = r
            .inserted
            .iter()
            .map(|ig| (ig.lhs.to_string(), ig.rhs.to_string()))
            .collect();
        assert_eq!(
            pairs,
            [("A.1".to_string(), "A.2".to_string()), ("B.1".to_string(), "C.2".to_string())]
        );
    }

    #[test]
    fn guard_positions_name_the_bridged_pair() {
        let r = transformed("A -c-> B ; B -c-> C");
        for ig in &r.inserted {
            assert_eq!(ig.between, (Index::top(1), Index::top(2)));
        }
    }

    #[test]
    fn capacities_survive_the_transformation() {
        let r = transformed("chan c cap 2\nA -c-> B ; B -c-> C");
        assert_eq!(r.output.channels()["c"], crate::protocol::Capacity::Exact(2));
        assert!(r.output.render().starts_with("chan c cap 2\n"));
    }
}
