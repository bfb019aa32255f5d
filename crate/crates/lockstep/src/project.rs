//! Projection of a global protocol onto parties and endpoints.
//!
//! A transmission projects to a send for its sender, a receive for its
//! receiver, and nothing for everyone else. A guard between events of two
//! different parties cannot be discharged locally, so projection inserts a
//! fresh rendezvous channel for it: the party owning the left event proves
//! the guard and sends a token; the party owning the right event receives
//! the token and gains the guard's fact. Guards whose two events belong to
//! one party are dropped; that party's program order already contains them.
//!
//! Endpoint projection then restricts a party protocol to one channel,
//! which is the unit the verifier consumes. Residual endpoint protocols can
//! be joined back into a party protocol for reporting.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::protocol::{
    Capacity, Channel, EndpointProtocol, EventRef, Global, Index, Party, PartyProtocol,
    ProtocolError,
};

/// The rendezvous standing in for one cross-party guard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertedTransmission {
    pub channel: Channel,
    pub index: Index,
    pub from: Party,
    pub to: Party,
    pub lhs: EventRef,
    pub rhs: EventRef,
}

/// A global protocol prepared for projection: indexed, with one inserted
/// rendezvous planned per cross-party guard. `insertions` is aligned with
/// the textual order of the guards; a `None` entry is a same-party guard.
#[derive(Debug, Clone)]
pub struct ProjectionContext {
    pub global: Global,
    pub insertions: Vec<Option<InsertedTransmission>>,
}

impl ProjectionContext {
    /// The inserted rendezvous channels, in introduction order.
    pub fn guard_channels(&self) -> Vec<Channel> {
        self.insertions
            .iter()
            .flatten()
            .map(|ins| ins.channel.clone())
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("party {party} does not appear in the protocol")]
    UnknownParty { party: Party },
    #[error("channel {channel} is used in both branches of a concurrent composition; its endpoint has no sequential protocol")]
    ChannelSplitAcrossBranches { channel: String },
}

/// Indexes the protocol and plans the guard rendezvous. Fresh channels are
/// named `~g1, ~g2, ...` in guard order and carry capacity 0. An inserted
/// transmission reuses the index of the last transmission before its guard
/// as a base, extended by a counter of insertions at that base, so the
/// rendezvous for the first guard after transmission 1 has index 1.1.
pub fn projection_context(g: &Global) -> Result<ProjectionContext, ProjectError> {
    let global = g.index_transmissions()?;
    let mut insertions = Vec::new();
    let mut base = 0u32;
    let mut per_site: BTreeMap<u32, u32> = BTreeMap::new();
    let mut fresh = 0usize;
    fn walk(
        g: &Global,
        base: &mut u32,
        per_site: &mut BTreeMap<u32, u32>,
        fresh: &mut usize,
        insertions: &mut Vec<Option<InsertedTransmission>>,
    ) {
        match g {
            Global::Transmission { index: Some(index), .. } => *base = index.0[0],
            Global::Guard { lhs, rhs } => {
                if lhs.party == rhs.party {
                    insertions.push(None);
                    return;
                }
                let n = per_site.entry(*base).or_insert(0);
                *n += 1;
                *fresh += 1;
                insertions.push(Some(InsertedTransmission {
                    channel: Channel::new(format!("~g{fresh}"), Capacity::Exact(0)),
                    index: Index::sub(*base, *n),
                    from: lhs.party.clone(),
                    to: rhs.party.clone(),
                    lhs: lhs.clone(),
                    rhs: rhs.clone(),
                }));
            }
            Global::Seq(l, r) | Global::Par(l, r) => {
                walk(l, base, per_site, fresh, insertions);
                walk(r, base, per_site, fresh, insertions);
            }
            _ => {}
        }
    }
    walk(&global, &mut base, &mut per_site, &mut fresh, &mut insertions);
    Ok(ProjectionContext { global, insertions })
}

/// Projects the global protocol onto one party, normalized.
pub fn project_party(ctx: &ProjectionContext, party: &Party) -> Result<PartyProtocol, ProjectError> {
    if !ctx.global.parties().contains(party) {
        return Err(ProjectError::UnknownParty { party: party.clone() });
    }
    fn go(g: &Global, party: &Party, ctx: &ProjectionContext, guard_at: &mut usize) -> PartyProtocol {
        match g {
            Global::Emp => PartyProtocol::Emp,
            Global::Transmission { sender, channel, index, receiver } => {
                let index = index.clone().expect("context is indexed");
                if sender == party {
                    PartyProtocol::Send {
                        event: EventRef { party: party.clone(), index },
                        channel: channel.clone(),
                    }
                } else if receiver == party {
                    PartyProtocol::Recv {
                        channel: channel.clone(),
                        event: EventRef { party: party.clone(), index },
                    }
                } else {
                    PartyProtocol::Emp
                }
            }
            Global::Guard { lhs, rhs } => {
                let at = *guard_at;
                *guard_at += 1;
                let Some(ins) = &ctx.insertions[at] else {
                    return PartyProtocol::Emp;
                };
                if *party == ins.from {
                    PartyProtocol::seq(
                        PartyProtocol::Guard { channel: ins.channel.clone(), event: lhs.clone() },
                        PartyProtocol::Send {
                            event: EventRef { party: party.clone(), index: ins.index.clone() },
                            channel: ins.channel.clone(),
                        },
                    )
                } else if *party == ins.to {
                    PartyProtocol::seq(
                        PartyProtocol::Recv {
                            channel: ins.channel.clone(),
                            event: EventRef { party: party.clone(), index: ins.index.clone() },
                        },
                        PartyProtocol::Guard { channel: ins.channel.clone(), event: rhs.clone() },
                    )
                } else {
                    PartyProtocol::Emp
                }
            }
            Global::Seq(l, r) => PartyProtocol::seq(
                go(l, party, ctx, guard_at),
                go(r, party, ctx, guard_at),
            ),
            Global::Par(l, r) => PartyProtocol::par(
                go(l, party, ctx, guard_at),
                go(r, party, ctx, guard_at),
            ),
        }
    }
    let mut guard_at = 0;
    Ok(go(&ctx.global, party, ctx, &mut guard_at).normalize())
}

/// Restricts a party protocol to one channel: its sends, receives, and
/// guards on that channel, with the channel name dropped.
pub fn project_endpoint(p: &PartyProtocol, channel: &str) -> Result<EndpointProtocol, ProjectError> {
    fn go(p: &PartyProtocol, channel: &str) -> Result<EndpointProtocol, ProjectError> {
        Ok(match p {
            PartyProtocol::Emp => EndpointProtocol::Emp,
            PartyProtocol::Send { event, channel: c } => {
                if c.name == channel {
                    EndpointProtocol::send(event.clone())
                } else {
                    EndpointProtocol::Emp
                }
            }
            PartyProtocol::Recv { channel: c, event } => {
                if c.name == channel {
                    EndpointProtocol::recv(event.clone())
                } else {
                    EndpointProtocol::Emp
                }
            }
            PartyProtocol::Guard { channel: c, event } => {
                if c.name == channel {
                    EndpointProtocol::Guard { event: event.clone() }
                } else {
                    EndpointProtocol::Emp
                }
            }
            PartyProtocol::Seq(l, r) => {
                EndpointProtocol::seq(go(l, channel)?, go(r, channel)?)
            }
            PartyProtocol::Par(l, r) => {
                let le = go(l, channel)?;
                let re = go(r, channel)?;
                match (le.is_emp(), re.is_emp()) {
                    (false, false) => {
                        return Err(ProjectError::ChannelSplitAcrossBranches {
                            channel: channel.to_string(),
                        })
                    }
                    (true, _) => re,
                    (_, true) => le,
                }
            }
        })
    }
    Ok(go(p, channel)?.normalize())
}

/// All endpoint protocols of one party, keyed by channel name.
pub fn project_endpoints(
    ctx: &ProjectionContext,
    party: &Party,
) -> Result<BTreeMap<String, (Channel, EndpointProtocol)>, ProjectError> {
    let p = project_party(ctx, party)?;
    let mut out = BTreeMap::new();
    for (name, channel) in p.channels() {
        let e = project_endpoint(&p, &name)?;
        out.insert(name, (channel, e));
    }
    Ok(out)
}

/// Joins endpoint protocols back into a party protocol: each non-empty
/// endpoint regains its channel, and the results are composed concurrently
/// in channel-name order. Delegated payloads are dropped; the join reports
/// shape, not delegation bookkeeping.
pub fn unproject(parts: &[(Channel, EndpointProtocol)]) -> PartyProtocol {
    let mut parts: Vec<&(Channel, EndpointProtocol)> = parts.iter().collect();
    parts.sort_by(|a, b| a.0.name.cmp(&b.0.name));
    let mut lifted = Vec::new();
    for (channel, e) in parts {
        if e.is_emp() {
            continue;
        }
        let atoms: Vec<PartyProtocol> = e
            .atoms()
            .into_iter()
            .map(|a| match a {
                EndpointProtocol::Send { event, .. } => {
                    PartyProtocol::Send { event, channel: channel.clone() }
                }
                EndpointProtocol::Recv { event, .. } => {
                    PartyProtocol::Recv { channel: channel.clone(), event }
                }
                EndpointProtocol::Guard { event } => {
                    PartyProtocol::Guard { channel: channel.clone(), event }
                }
                EndpointProtocol::Emp | EndpointProtocol::Seq(..) => unreachable!("atoms are atomic"),
            })
            .collect();
        lifted.push(PartyProtocol::seq_all(atoms));
    }
    let mut it = lifted.into_iter();
    let Some(first) = it.next() else { return PartyProtocol::Emp };
    it.fold(first, PartyProtocol::par)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GUARDED: &str = "A -c-> B ; [A.1 < B.2] ; [B.1 < C.2] ; B -c-> C";

    fn ctx(text: &str) -> ProjectionContext {
        projection_context(&Global::parse(text).unwrap()).unwrap()
    }

    fn party(ctx: &ProjectionContext, name: &str) -> PartyProtocol {
        project_party(ctx, &Party::new(name)).unwrap()
    }

    #[test]
    fn guard_rendezvous_get_fresh_channels_and_subindexes() {
        let c = ctx(GUARDED);
        let names: Vec<String> =
            c.guard_channels().iter().map(|ch| ch.name.clone()).collect();
        assert_eq!(names, ["~g1", "~g2"]);
        let indexes: Vec<String> = c
            .insertions
            .iter()
            .flatten()
            .map(|ins| ins.index.to_string())
            .collect();
        assert_eq!(indexes, ["1.1", "1.2"]);
        for ins in c.insertions.iter().flatten() {
            assert_eq!(ins.channel.capacity, Capacity::Exact(0));
        }
    }

    #[test]
    fn party_projections_of_guarded_protocol() {
        let c = ctx(GUARDED);
        assert_eq!(party(&c, "A").render(), "c!A.1 ; guard(~g1, A.1) ; ~g1!A.1.1");
        assert_eq!(
            party(&c, "B").render(),
            "c?B.1 ; ~g1?B.1.1 ; guard(~g1, B.2) ; guard(~g2, B.1) ; ~g2!B.1.2 ; c!B.2"
        );
        assert_eq!(party(&c, "C").render(), "~g2?C.1.2 ; guard(~g2, C.2) ; c?C.2");
    }

    #[test]
    fn endpoint_projections_split_a_party_by_channel() {
        let c = ctx(GUARDED);
        let a = party(&c, "A");
        assert_eq!(project_endpoint(&a, "c").unwrap().render(), "!A.1");
        assert_eq!(project_endpoint(&a, "~g1").unwrap().render(), "guard(A.1) ; !A.1.1");
        assert_eq!(project_endpoint(&a, "~g2").unwrap().render(), "emp");
    }

    #[test]
    fn all_endpoints_of_a_party() {
        let c = ctx(GUARDED);
        let eps = project_endpoints(&c, &Party::new("B")).unwrap();
        let keys: Vec<&String> = eps.keys().collect();
        assert_eq!(keys, ["c", "~g1", "~g2"]);
        assert_eq!(eps["c"].1.render(), "?B.1 ; !B.2");
        assert_eq!(eps["~g1"].1.render(), "?B.1.1 ; guard(B.2)");
        assert_eq!(eps["~g2"].1.render(), "guard(B.1) ; !B.1.2");
    }

    #[test]
    fn unguarded_protocol_projects_without_fresh_channels() {
        let c = ctx("A -c-> B ; B -c-> C");
        assert!(c.guard_channels().is_empty());
        assert_eq!(party(&c, "A").render(), "c!A.1");
        assert_eq!(party(&c, "B").render(), "c?B.1 ; c!B.2");
        assert_eq!(party(&c, "C").render(), "c?C.2");
    }

    #[test]
    fn same_party_guards_vanish_and_do_not_consume_names() {
        let c = ctx("A -c-> B ; [A.1 < A.2] ; [B.1 < C.2] ; A -c-> C");
        let names: Vec<String> =
            c.guard_channels().iter().map(|ch| ch.name.clone()).collect();
        assert_eq!(names, ["~g1"]);
        assert_eq!(party(&c, "A").render(), "c!A.1 ; c!A.2");
        assert_eq!(party(&c, "B").render(), "c?B.1 ; guard(~g1, B.1) ; ~g1!B.1.1");
        assert_eq!(party(&c, "C").render(), "~g1?C.1.1 ; guard(~g1, C.2) ; c?C.2");
    }

    #[test]
    fn unknown_party_is_rejected() {
        let c = ctx("A -c-> B");
        let err = project_party(&c, &Party::new("Z")).unwrap_err();
        assert!(matches!(err, ProjectError::UnknownParty { .. }));
    }

    #[test]
    fn concurrent_branches_with_disjoint_channels_project_cleanly() {
        let c = ctx("A -c-> B || A -d-> C");
        let a = party(&c, "A");
        assert_eq!(a.render(), "c!A.1 || d!A.2");
        assert_eq!(project_endpoint(&a, "c").unwrap().render(), "!A.1");
        assert_eq!(project_endpoint(&a, "d").unwrap().render(), "!A.2");
    }

    #[test]
    fn channel_split_across_branches_is_rejected() {
        let c = ctx("A -c-> B || A -c-> D");
        let a = party(&c, "A");
        let err = project_endpoint(&a, "c").unwrap_err();
        assert!(matches!(err, ProjectError::ChannelSplitAcrossBranches { .. }));
    }

    #[test]
    fn unproject_joins_residues_in_channel_order() {
        let c = ctx(GUARDED);
        let eps = project_endpoints(&c, &Party::new("B")).unwrap();
        let parts: Vec<(Channel, EndpointProtocol)> =
            eps.values().cloned().collect();
        let joined = unproject(&parts);
        assert_eq!(
            joined.render(),
            "c?B.1 ; c!B.2 || ~g1?B.1.1 ; guard(~g1, B.2) || guard(~g2, B.1) ; ~g2!B.1.2"
        );
        assert_eq!(unproject(&[]), PartyProtocol::Emp);
    }

    #[test]
    fn guard_before_any_transmission_uses_base_zero() {
        let c = ctx("[A.1 < B.1] ; A -c-> B");
        // The guard names events of transmission 1 but sits before it.
        let ins = c.insertions[0].as_ref().unwrap();
        assert_eq!(ins.index.to_string(), "0.1");
    }
}
