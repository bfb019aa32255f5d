//! Operational execution oracle.
//!
//! Protocols and verified programs are run under a small-step channel
//! semantics: parties walk their event traces, buffered channels hold
//! in-flight sends in FIFO order, rendezvous channels fire send and
//! receive as one adjacent pair, and a receive on an empty channel waits
//! while another party still has a send for it, or completes empty-handed
//! otherwise. Enumerating every interleaving gives the full set of legal
//! executions, each with the matching of receives to sends it induces.
//!
//! [`check_legal`] is the converse direction: given a claimed execution
//! order and matching, replay it against the channel semantics and report
//! each violation, with a happens-before cycle as witness where one
//! exists. [`classify_race`] compares an execution's matching against the
//! protocol's intended transmissions. The module also counts how many
//! sequentially composed protocols exist for a given number of
//! transmissions, with a brute-force enumerator as cross-check.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::order::{
    derive_orders, fifo_alignment, minimal_cycle, saturate, AtomicEvent, CommTriple, OrderError,
    PropagationRules,
};
use crate::program::Program;
use crate::protocol::{Capacity, Channel, EventRef, Global, Kind, Party, ProtocolError};
use crate::verify::{verify, VerifyError};

/// One step of a party's trace: an atomic event on a channel.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TraceEvent {
    pub atom: AtomicEvent,
    pub channel: Channel,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.atom, self.channel.name)
    }
}

#[derive(Debug, Clone)]
pub struct PartyTrace {
    pub party: Party,
    pub events: Vec<TraceEvent>,
}

/// A closed system ready for enumeration: per-party traces, plus the
/// ordering guards that constrain when events may fire.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub parties: Vec<PartyTrace>,
    pub guards: Vec<(EventRef, EventRef)>,
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Order(#[from] OrderError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("program does not verify against the protocol: party {party} fails")]
    Unverified { party: Party },
    #[error("trace dump line {line}: {msg}")]
    BadDump { line: usize, msg: String },
}

impl Simulation {
    /// Builds the simulation of a global protocol: each transmission
    /// contributes a send to its sender's trace and a receive to its
    /// receiver's, in textual order, and guards carry over as ordering
    /// constraints.
    pub fn from_protocol(g: &Global) -> Result<Simulation, ProtocolError> {
        let g = g.index_transmissions()?;
        let mut traces: BTreeMap<Party, Vec<TraceEvent>> = BTreeMap::new();
        for t in g.transmissions()? {
            traces.entry(t.sender.clone()).or_default().push(TraceEvent {
                atom: AtomicEvent::new(t.send_event(), Kind::Send),
                channel: t.channel.clone(),
            });
            traces.entry(t.receiver.clone()).or_default().push(TraceEvent {
                atom: AtomicEvent::new(t.recv_event(), Kind::Recv),
                channel: t.channel.clone(),
            });
        }
        Ok(Simulation {
            parties: traces
                .into_iter()
                .map(|(party, events)| PartyTrace { party, events })
                .collect(),
            guards: g.guards(),
        })
    }

    /// Builds the simulation of a verified program: each party's trace is
    /// the sequence of events its statements consumed, on program-side
    /// channels. Guards need no constraints here; the program realizes
    /// them as rendezvous communications.
    pub fn from_program(
        g: &Global,
        program: &Program,
        bindings: &BTreeMap<String, String>,
    ) -> Result<Simulation, OracleError> {
        let report = verify(g, program, bindings)?;
        if let Some(failed) = report.parties.iter().find(|p| !p.outcome.is_success()) {
            return Err(OracleError::Unverified { party: failed.party.clone() });
        }
        Ok(Simulation {
            parties: report
                .parties
                .into_iter()
                .map(|p| PartyTrace {
                    party: p.party,
                    events: p
                        .steps
                        .into_iter()
                        .map(|s| TraceEvent {
                            atom: AtomicEvent::new(s.consumed.event, s.consumed.kind),
                            channel: s.consumed.channel,
                        })
                        .collect(),
                })
                .collect(),
            guards: Vec::new(),
        })
    }
}

/// One complete run: the linearized event order, which receive took data
/// from which send, and the receives that completed empty-handed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub order: Vec<TraceEvent>,
    pub matching: Vec<CommTriple>,
    pub starved: Vec<EventRef>,
}

impl Execution {
    pub fn trace_line(&self) -> String {
        let parts: Vec<String> = self.order.iter().map(TraceEvent::to_string).collect();
        parts.join(" ")
    }

    pub fn matching_line(&self) -> String {
        let parts: Vec<String> = self
            .matching
            .iter()
            .map(|t| format!("{} <- {}", t.recv, t.send))
            .collect();
        parts.join(", ")
    }

    /// Dump form: one event per line as `Party.index.{S|R}@channel`,
    /// followed by one `recv <- send` line per delivery.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for ev in &self.order {
            out.push_str(&ev.to_string());
            out.push('\n');
        }
        for t in &self.matching {
            out.push_str(&format!("{} <- {}\n", t.recv, t.send));
        }
        out
    }

    /// Parses dump form. Capacities are not recorded in a dump, so the
    /// channels come back with capacity `any`; starved receives are the
    /// receives without a matching line.
    pub fn parse_dump(text: &str) -> Result<Execution, OracleError> {
        fn event_ref(text: &str, line: usize) -> Result<EventRef, OracleError> {
            let bad = || OracleError::BadDump {
                line,
                msg: format!("malformed event reference {text}"),
            };
            let mut parts = text.split('.');
            let party = parts.next().filter(|p| !p.is_empty()).ok_or_else(bad)?;
            let index: Vec<u32> = parts
                .map(|p| p.parse().map_err(|_| bad()))
                .collect::<Result<_, _>>()?;
            if index.is_empty() {
                return Err(bad());
            }
            Ok(EventRef::new(party, crate::protocol::Index(index)))
        }

        let mut order: Vec<TraceEvent> = Vec::new();
        let mut pairs: Vec<(EventRef, EventRef, usize)> = Vec::new();
        for (at, raw) in text.lines().enumerate() {
            let line = at + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some((recv, send)) = trimmed.split_once(" <- ") {
                pairs.push((event_ref(send.trim(), line)?, event_ref(recv.trim(), line)?, line));
            } else {
                let (head, channel) = trimmed.split_once('@').ok_or_else(|| {
                    OracleError::BadDump { line, msg: format!("expected event@channel, got {trimmed}") }
                })?;
                let (event, kind) = head.rsplit_once('.').ok_or_else(|| {
                    OracleError::BadDump { line, msg: format!("event {head} lacks a kind suffix") }
                })?;
                let kind = match kind {
                    "S" => Kind::Send,
                    "R" => Kind::Recv,
                    other => {
                        return Err(OracleError::BadDump {
                            line,
                            msg: format!("unknown event kind {other}"),
                        })
                    }
                };
                order.push(TraceEvent {
                    atom: AtomicEvent::new(event_ref(event, line)?, kind),
                    channel: Channel::new(channel.trim(), Capacity::Any),
                });
            }
        }

        let mut matching = Vec::new();
        for (send, recv, line) in pairs {
            let channel = order
                .iter()
                .find(|e| e.atom.event == send && e.atom.kind == Kind::Send)
                .map(|e| e.channel.clone())
                .ok_or_else(|| OracleError::BadDump {
                    line,
                    msg: format!("matching references unknown send {send}"),
                })?;
            if !order.iter().any(|e| e.atom.event == recv && e.atom.kind == Kind::Recv) {
                return Err(OracleError::BadDump {
                    line,
                    msg: format!("matching references unknown receive {recv}"),
                });
            }
            matching.push(CommTriple { send, channel, recv });
        }
        let matched: BTreeSet<&EventRef> = matching.iter().map(|t| &t.recv).collect();
        let starved = order
            .iter()
            .filter(|e| e.atom.kind == Kind::Recv && !matched.contains(&e.atom.event))
            .map(|e| e.atom.event.clone())
            .collect();
        Ok(Execution { order, matching, starved })
    }
}

impl fmt::Display for Execution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {}", self.trace_line(), self.matching_line())?;
        if !self.starved.is_empty() {
            let parts: Vec<String> = self.starved.iter().map(EventRef::to_string).collect();
            write!(f, " | starved: {}", parts.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Enumeration {
    pub executions: Vec<Execution>,
    /// More executions existed than the collection limit.
    pub truncated: bool,
    /// Branches that got stuck with parties still holding events.
    pub deadlocked: usize,
}

#[derive(Clone)]
struct SimState {
    positions: Vec<usize>,
    buffers: BTreeMap<String, VecDeque<EventRef>>,
    occurred: BTreeSet<EventRef>,
    order: Vec<TraceEvent>,
    matching: Vec<CommTriple>,
    starved: Vec<EventRef>,
}

enum Move {
    Send { party: usize },
    Pop { party: usize },
    Phantom { party: usize },
    Pair { sender: usize, receiver: usize },
}

fn guard_blocked(sim: &Simulation, occurred: &BTreeSet<EventRef>, event: &EventRef) -> bool {
    sim.guards.iter().any(|(lhs, rhs)| rhs == event && !occurred.contains(lhs))
}

fn enabled_moves(sim: &Simulation, st: &SimState) -> Vec<Move> {
    let mut moves = Vec::new();
    for (p, trace) in sim.parties.iter().enumerate() {
        let Some(ev) = trace.events.get(st.positions[p]) else { continue };
        if guard_blocked(sim, &st.occurred, &ev.atom.event) {
            continue;
        }
        let name = &ev.channel.name;
        let buffered = st.buffers.get(name).map_or(0, VecDeque::len);
        match (ev.atom.kind, ev.channel.capacity) {
            (Kind::Send, Capacity::Any) => moves.push(Move::Send { party: p }),
            (Kind::Send, Capacity::Exact(0)) => {
                for (q, other) in sim.parties.iter().enumerate() {
                    if q == p {
                        continue;
                    }
                    let Some(head) = other.events.get(st.positions[q]) else { continue };
                    if head.atom.kind == Kind::Recv
                        && head.channel.name == *name
                        && !guard_blocked(sim, &st.occurred, &head.atom.event)
                    {
                        moves.push(Move::Pair { sender: p, receiver: q });
                    }
                }
            }
            (Kind::Send, Capacity::Exact(k)) => {
                if buffered < k as usize {
                    moves.push(Move::Send { party: p });
                }
            }
            (Kind::Recv, _) => {
                if buffered > 0 {
                    moves.push(Move::Pop { party: p });
                } else {
                    // Wait while another party still has a send for this
                    // channel; a party's own later sends cannot feed it.
                    let pending = sim.parties.iter().enumerate().any(|(q, other)| {
                        q != p
                            && other.events[st.positions[q]..].iter().any(|e| {
                                e.atom.kind == Kind::Send && e.channel.name == *name
                            })
                    });
                    if !pending {
                        moves.push(Move::Phantom { party: p });
                    }
                }
            }
        }
    }
    moves
}

fn apply_move(sim: &Simulation, mut st: SimState, m: &Move) -> SimState {
    match *m {
        Move::Send { party } => {
            let ev = sim.parties[party].events[st.positions[party]].clone();
            st.buffers
                .entry(ev.channel.name.clone())
                .or_default()
                .push_back(ev.atom.event.clone());
            st.occurred.insert(ev.atom.event.clone());
            st.order.push(ev);
            st.positions[party] += 1;
        }
        Move::Pop { party } => {
            let ev = sim.parties[party].events[st.positions[party]].clone();
            let send = st
                .buffers
                .get_mut(&ev.channel.name)
                .and_then(VecDeque::pop_front)
                .expect("pop is only enabled on a non-empty buffer");
            st.matching.push(CommTriple {
                send,
                channel: ev.channel.clone(),
                recv: ev.atom.event.clone(),
            });
            st.occurred.insert(ev.atom.event.clone());
            st.order.push(ev);
            st.positions[party] += 1;
        }
        Move::Phantom { party } => {
            let ev = sim.parties[party].events[st.positions[party]].clone();
            st.starved.push(ev.atom.event.clone());
            st.occurred.insert(ev.atom.event.clone());
            st.order.push(ev);
            st.positions[party] += 1;
        }
        Move::Pair { sender, receiver } => {
            let sev = sim.parties[sender].events[st.positions[sender]].clone();
            let rev = sim.parties[receiver].events[st.positions[receiver]].clone();
            st.matching.push(CommTriple {
                send: sev.atom.event.clone(),
                channel: sev.channel.clone(),
                recv: rev.atom.event.clone(),
            });
            st.occurred.insert(sev.atom.event.clone());
            st.occurred.insert(rev.atom.event.clone());
            st.order.push(sev);
            st.order.push(rev);
            st.positions[sender] += 1;
            st.positions[receiver] += 1;
        }
    }
    st
}

/// Enumerates every execution of the simulation, stopping after `limit`
/// executions have been collected.
pub fn enumerate_executions(sim: &Simulation, limit: usize) -> Enumeration {
    let mut out = Enumeration { executions: Vec::new(), truncated: false, deadlocked: 0 };
    let start = SimState {
        positions: vec![0; sim.parties.len()],
        buffers: BTreeMap::new(),
        occurred: BTreeSet::new(),
        order: Vec::new(),
        matching: Vec::new(),
        starved: Vec::new(),
    };
    explore(sim, start, limit, &mut out);
    out
}

fn explore(sim: &Simulation, st: SimState, limit: usize, out: &mut Enumeration) {
    if out.truncated {
        return;
    }
    let moves = enabled_moves(sim, &st);
    if moves.is_empty() {
        let done = st
            .positions
            .iter()
            .zip(&sim.parties)
            .all(|(&pos, trace)| pos == trace.events.len());
        if !done {
            out.deadlocked += 1;
        } else if out.executions.len() == limit {
            out.truncated = true;
        } else {
            out.executions.push(Execution {
                order: st.order,
                matching: st.matching,
                starved: st.starved,
            });
        }
        return;
    }
    for m in &moves {
        explore(sim, apply_move(sim, st.clone(), m), limit, out);
    }
}

/// Why a claimed execution cannot happen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    /// A send fires while the channel buffer is already full.
    BufferOverflow { channel: String },
    /// A rendezvous send and its claimed receive are not adjacent.
    RendezvousNotAdjacent { channel: String },
    /// A rendezvous send claims a receive of the sending party itself: the
    /// send cannot complete before its own later receive starts.
    SelfRendezvous { channel: String },
    /// A rendezvous send with no claimed receive.
    RendezvousUndelivered { channel: String },
    /// A receive claims a send other than the buffer head.
    WrongHead { channel: String, expected: EventRef, claimed: EventRef },
    /// A receive completes empty-handed while data sits in the buffer.
    RefusedDelivery { channel: String },
    /// A receive claims a send that has not happened yet.
    ReceiveBeforeSend { channel: String, claimed: EventRef },
    /// A receive completes empty-handed although another party still
    /// sends on the channel later.
    StarvationRefusal { channel: String, pending: EventRef },
    /// The matching itself is inconsistent with the order.
    MalformedClaim { detail: String },
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::BufferOverflow { channel } => {
                write!(f, "send overflows the full buffer of {channel}")
            }
            ViolationKind::RendezvousNotAdjacent { channel } => {
                write!(f, "rendezvous on {channel} is not adjacent to its receive")
            }
            ViolationKind::SelfRendezvous { channel } => {
                write!(f, "rendezvous on {channel} pairs a party with itself")
            }
            ViolationKind::RendezvousUndelivered { channel } => {
                write!(f, "rendezvous send on {channel} is never received")
            }
            ViolationKind::WrongHead { channel, expected, claimed } => write!(
                f,
                "receive on {channel} claims {claimed} but the buffer head is {expected}"
            ),
            ViolationKind::RefusedDelivery { channel } => {
                write!(f, "receive ignores buffered data on {channel}")
            }
            ViolationKind::ReceiveBeforeSend { channel, claimed } => {
                write!(f, "receive on {channel} claims {claimed}, which has not been sent")
            }
            ViolationKind::StarvationRefusal { channel, pending } => write!(
                f,
                "receive on {channel} completes empty although {pending} still sends"
            ),
            ViolationKind::MalformedClaim { detail } => write!(f, "{detail}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub at: AtomicEvent,
    pub kind: ViolationKind,
    /// A happens-before cycle proving the order impossible, when the
    /// violation induces one.
    pub cycle: Option<Vec<AtomicEvent>>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at {}: {}", self.at, self.kind)?;
        if let Some(cycle) = &self.cycle {
            let parts: Vec<String> = cycle.iter().map(AtomicEvent::to_string).collect();
            write!(f, " [cycle {}]", parts.join(" -> "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Legality {
    pub violations: Vec<Violation>,
}

impl Legality {
    pub fn is_legal(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Builds the happens-before graph of the claimed execution (consecutive
/// order edges plus matching edges plus the violation's forced edges) and
/// returns its shortest cycle.
fn witness_cycle(
    order: &[TraceEvent],
    matching: &[CommTriple],
    forced: &[(AtomicEvent, AtomicEvent)],
) -> Option<Vec<AtomicEvent>> {
    let mut succ: BTreeMap<AtomicEvent, BTreeSet<AtomicEvent>> = BTreeMap::new();
    for w in order.windows(2) {
        succ.entry(w[0].atom.clone()).or_default().insert(w[1].atom.clone());
    }
    for t in matching {
        succ.entry(t.send_atom()).or_default().insert(t.recv_atom());
    }
    for (from, to) in forced {
        succ.entry(from.clone()).or_default().insert(to.clone());
    }
    minimal_cycle(&succ)
}

/// Replays a claimed execution order and matching against the channel
/// semantics, collecting every violation.
pub fn check_legal(order: &[TraceEvent], matching: &[CommTriple]) -> Legality {
    let mut violations = Vec::new();

    let mut position: BTreeMap<EventRef, usize> = BTreeMap::new();
    for (i, ev) in order.iter().enumerate() {
        if position.insert(ev.atom.event.clone(), i).is_some() {
            violations.push(Violation {
                at: ev.atom.clone(),
                kind: ViolationKind::MalformedClaim {
                    detail: format!("event {} occurs twice in the order", ev.atom.event),
                },
                cycle: None,
            });
        }
    }

    let mut claimed_by_send: BTreeMap<EventRef, &CommTriple> = BTreeMap::new();
    let mut claimed_by_recv: BTreeMap<EventRef, &CommTriple> = BTreeMap::new();
    for t in matching {
        let send_ok = order.iter().any(|e| {
            e.atom.event == t.send
                && e.atom.kind == Kind::Send
                && e.channel.name == t.channel.name
        });
        let recv_ok = order.iter().any(|e| {
            e.atom.event == t.recv
                && e.atom.kind == Kind::Recv
                && e.channel.name == t.channel.name
        });
        if !send_ok || !recv_ok {
            violations.push(Violation {
                at: t.recv_atom(),
                kind: ViolationKind::MalformedClaim {
                    detail: format!("matching {t} does not correspond to the order"),
                },
                cycle: None,
            });
            continue;
        }
        if claimed_by_send.insert(t.send.clone(), t).is_some()
            || claimed_by_recv.insert(t.recv.clone(), t).is_some()
        {
            violations.push(Violation {
                at: t.recv_atom(),
                kind: ViolationKind::MalformedClaim {
                    detail: format!("matching {t} reuses an already matched event"),
                },
                cycle: None,
            });
        }
    }
    if !violations.is_empty() {
        return Legality { violations };
    }

    let mut buffers: BTreeMap<String, VecDeque<EventRef>> = BTreeMap::new();
    let mut pair_partner: Option<EventRef> = None;

    for (i, ev) in order.iter().enumerate() {
        let name = ev.channel.name.clone();
        match ev.atom.kind {
            Kind::Send => match ev.channel.capacity {
                Capacity::Exact(0) => match claimed_by_send.get(&ev.atom.event) {
                    None => violations.push(Violation {
                        at: ev.atom.clone(),
                        kind: ViolationKind::RendezvousUndelivered { channel: name },
                        cycle: None,
                    }),
                    Some(t) => {
                        let rpos = position[&t.recv];
                        if rpos == i + 1 && t.recv.party == ev.atom.event.party {
                            let cycle = witness_cycle(
                                order,
                                matching,
                                &[(t.recv_atom(), ev.atom.clone())],
                            );
                            violations.push(Violation {
                                at: ev.atom.clone(),
                                kind: ViolationKind::SelfRendezvous { channel: name },
                                cycle,
                            });
                        } else if rpos == i + 1 {
                            pair_partner = Some(t.recv.clone());
                        } else {
                            let cycle = if rpos < i {
                                witness_cycle(order, matching, &[])
                            } else {
                                None
                            };
                            violations.push(Violation {
                                at: ev.atom.clone(),
                                kind: ViolationKind::RendezvousNotAdjacent { channel: name },
                                cycle,
                            });
                        }
                    }
                },
                capacity => {
                    if let Capacity::Exact(k) = capacity {
                        let buffer = buffers.entry(name.clone()).or_default();
                        if buffer.len() >= k as usize {
                            let head = buffer.front().cloned();
                            let forced: Vec<(AtomicEvent, AtomicEvent)> = head
                                .as_ref()
                                .and_then(|h| claimed_by_send.get(h))
                                .map(|t| vec![(t.recv_atom(), ev.atom.clone())])
                                .unwrap_or_default();
                            let cycle = if forced.is_empty() {
                                None
                            } else {
                                witness_cycle(order, matching, &forced)
                            };
                            violations.push(Violation {
                                at: ev.atom.clone(),
                                kind: ViolationKind::BufferOverflow { channel: name.clone() },
                                cycle,
                            });
                        }
                    }
                    buffers.entry(name).or_default().push_back(ev.atom.event.clone());
                }
            },
            Kind::Recv => {
                if pair_partner.as_ref() == Some(&ev.atom.event) {
                    pair_partner = None;
                    continue;
                }
                if ev.channel.capacity == Capacity::Exact(0) {
                    // A claimed but non-adjacent rendezvous was already
                    // reported at its send.
                    if claimed_by_recv.contains_key(&ev.atom.event) {
                        continue;
                    }
                    check_starvation(order, matching, i, ev, &mut violations);
                    continue;
                }
                let buffer = buffers.entry(name.clone()).or_default();
                match claimed_by_recv.get(&ev.atom.event) {
                    Some(t) => {
                        if buffer.is_empty() {
                            let cycle = if position[&t.send] > i {
                                witness_cycle(order, matching, &[])
                            } else {
                                None
                            };
                            violations.push(Violation {
                                at: ev.atom.clone(),
                                kind: ViolationKind::ReceiveBeforeSend {
                                    channel: name,
                                    claimed: t.send.clone(),
                                },
                                cycle,
                            });
                        } else if *buffer.front().expect("non-empty") == t.send {
                            buffer.pop_front();
                        } else {
                            let head = buffer.front().cloned().expect("non-empty");
                            if let Some(at) = buffer.iter().position(|s| *s == t.send) {
                                buffer.remove(at);
                            }
                            let cycle = if position[&t.send] > i {
                                witness_cycle(order, matching, &[])
                            } else {
                                wrong_head_cycle(order, matching, &claimed_by_recv, &head, &name)
                            };
                            violations.push(Violation {
                                at: ev.atom.clone(),
                                kind: ViolationKind::WrongHead {
                                    channel: name,
                                    expected: head,
                                    claimed: t.send.clone(),
                                },
                                cycle,
                            });
                        }
                    }
                    None => {
                        if let Some(head) = buffer.front() {
                            let head_atom = AtomicEvent::new(head.clone(), Kind::Send);
                            let forced = [(ev.atom.clone(), head_atom)];
                            violations.push(Violation {
                                at: ev.atom.clone(),
                                kind: ViolationKind::RefusedDelivery { channel: name.clone() },
                                cycle: witness_cycle(order, matching, &forced),
                            });
                        } else {
                            check_starvation(order, matching, i, ev, &mut violations);
                        }
                    }
                }
            }
        }
    }

    Legality { violations }
}

/// An empty-handed receive is only believable when no other party sends
/// on the channel afterwards; its own later sends cannot feed it.
fn check_starvation(
    order: &[TraceEvent],
    matching: &[CommTriple],
    i: usize,
    ev: &TraceEvent,
    violations: &mut Vec<Violation>,
) {
    let pending = order[i + 1..].iter().find(|e| {
        e.atom.kind == Kind::Send
            && e.channel.name == ev.channel.name
            && e.atom.event.party != ev.atom.event.party
    });
    if let Some(send) = pending {
        let forced = [(send.atom.clone(), ev.atom.clone())];
        violations.push(Violation {
            at: ev.atom.clone(),
            kind: ViolationKind::StarvationRefusal {
                channel: ev.channel.name.clone(),
                pending: send.atom.event.clone(),
            },
            cycle: witness_cycle(order, matching, &forced),
        });
    }
}

/// For a wrong-head violation whose claimed send already happened: the
/// head message must have been consumed earlier, which only an earlier
/// unmatched receive on the channel could do. If one exists before the
/// head's send, forcing that consumption closes a cycle.
fn wrong_head_cycle(
    order: &[TraceEvent],
    matching: &[CommTriple],
    claimed_by_recv: &BTreeMap<EventRef, &CommTriple>,
    head: &EventRef,
    channel: &str,
) -> Option<Vec<AtomicEvent>> {
    let head_pos = order.iter().position(|e| e.atom.event == *head)?;
    let hypothetical = order[..head_pos].iter().find(|e| {
        e.atom.kind == Kind::Recv
            && e.channel.name == channel
            && !claimed_by_recv.contains_key(&e.atom.event)
    })?;
    let head_atom = AtomicEvent::new(head.clone(), Kind::Send);
    witness_cycle(order, matching, &[(head_atom, hypothetical.atom.clone())])
}

/// How an execution relates to the protocol's intended transmissions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaceClassification {
    pub race_free: bool,
    pub witness: Option<RaceWitness>,
}

/// A receive that did not get the data the protocol intended for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaceWitness {
    pub recv: EventRef,
    pub expected: EventRef,
    /// The send it actually received from; `None` when it starved.
    pub actual: Option<EventRef>,
    /// Every intended receive that completed empty-handed.
    pub starved: Vec<EventRef>,
}

impl fmt::Display for RaceWitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.actual {
            Some(actual) => write!(
                f,
                "receive {} expected data from {}, actually received from {actual}",
                self.recv, self.expected
            )?,
            None => write!(f, "receive {} expected data from {}", self.recv, self.expected)?,
        }
        for starved in &self.starved {
            write!(f, "; {starved} received nothing")?;
        }
        Ok(())
    }
}

/// Checks that the execution realizes every intended transmission: each
/// protocol triple's receive took its data from that triple's send.
pub fn classify_race(execution: &Execution, intended: &[CommTriple]) -> RaceClassification {
    let actual_of: BTreeMap<&EventRef, &EventRef> =
        execution.matching.iter().map(|t| (&t.recv, &t.send)).collect();
    let race_free = intended.iter().all(|t| {
        actual_of.get(&t.recv).is_some_and(|s| **s == t.send)
    });
    if race_free {
        return RaceClassification { race_free, witness: None };
    }
    let starved: Vec<EventRef> = intended
        .iter()
        .filter(|t| !actual_of.contains_key(&t.recv))
        .map(|t| t.recv.clone())
        .collect();
    let wrong_data = intended.iter().find(|t| {
        actual_of.get(&t.recv).is_some_and(|s| **s != t.send)
    });
    let witness = wrong_data
        .map(|t| RaceWitness {
            recv: t.recv.clone(),
            expected: t.send.clone(),
            actual: actual_of.get(&t.recv).map(|s| (*s).clone()),
            starved: starved.clone(),
        })
        .or_else(|| {
            intended
                .iter()
                .find(|t| !actual_of.contains_key(&t.recv))
                .map(|t| RaceWitness {
                    recv: t.recv.clone(),
                    expected: t.send.clone(),
                    actual: None,
                    starved: starved.clone(),
                })
        });
    RaceClassification { race_free, witness }
}

/// The static analysis' verdict on one channel next to what the oracle
/// actually finds.
#[derive(Debug, Clone)]
pub struct AlignmentProbe {
    pub channel: String,
    /// The saturated order claims sends and receives form matching FIFO
    /// chains on this channel.
    pub aligned: bool,
    /// A legal execution in which the channel's transmissions go wrong.
    pub racy: Option<Execution>,
    pub discrepancy: bool,
}

/// Runs the order-saturation analysis with send-side propagation enabled
/// on every channel, then asks the oracle for a counterexample. A probe
/// with `discrepancy` set shows the analysis claiming alignment that real
/// executions break.
pub fn probe_alignment(g: &Global, limit: usize) -> Result<Vec<AlignmentProbe>, OracleError> {
    let g = g.index_transmissions()?;
    let mut orders = derive_orders(&g)?;
    orders.order.add_transmission_edges(&orders.comm);
    saturate(&mut orders.order, &orders.comm, PropagationRules::with_unsound_send());

    let sim = Simulation::from_protocol(&g)?;
    let enumeration = enumerate_executions(&sim, limit);

    let mut channels: Vec<String> =
        orders.comm.iter().map(|t| t.channel.name.clone()).collect();
    channels.sort();
    channels.dedup();

    let mut probes = Vec::new();
    for channel in channels {
        let alignment = fifo_alignment(&orders.order, &orders.comm, &channel);
        let intended: Vec<CommTriple> = orders
            .comm
            .iter()
            .filter(|t| t.channel.name == channel)
            .cloned()
            .collect();
        let racy = enumeration
            .executions
            .iter()
            .find(|e| !classify_race(e, &intended).race_free)
            .cloned();
        let discrepancy = alignment.aligned && racy.is_some();
        probes.push(AlignmentProbe { channel, aligned: alignment.aligned, racy, discrepancy });
    }
    Ok(probes)
}

#[derive(Debug, Error)]
pub enum CountError {
    #[error("transmission count must be at least 1")]
    Empty,
    #[error("count overflows 128-bit arithmetic at {n} transmissions")]
    Overflow { n: u32 },
}

/// Distinct sequential protocols with `n` transmissions, counted up to
/// party renaming, split by how many parties they use. Index 0 holds the
/// two-party count.
pub fn count_vector(n: u32) -> Result<Vec<u128>, CountError> {
    if n == 0 {
        return Err(CountError::Empty);
    }
    let mut v: Vec<u128> = vec![1];
    for step in 2..=n {
        let mut next: Vec<u128> = vec![0; v.len() + 2];
        for (i, &count) in v.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let p = (i + 2) as u128;
            // A new transmission picks sender and receiver: both already
            // used, one fresh, or both fresh.
            let both_old = count.checked_mul(p * (p - 1));
            let one_new = count.checked_mul(2 * p);
            let add = |slot: &mut u128, v: Option<u128>| {
                v.and_then(|v| slot.checked_add(v)).map(|sum| *slot = sum)
            };
            if add(&mut next[i], both_old).is_none()
                || add(&mut next[i + 1], one_new).is_none()
                || add(&mut next[i + 2], Some(count)).is_none()
            {
                return Err(CountError::Overflow { n: step });
            }
        }
        v = next;
    }
    Ok(v)
}

/// Total number of distinct sequential protocols with `n` transmissions.
pub fn count_protocols(n: u32) -> Result<u128, CountError> {
    let mut total: u128 = 0;
    for count in count_vector(n)? {
        total = total.checked_add(count).ok_or(CountError::Overflow { n })?;
    }
    Ok(total)
}

/// Counts by enumerating every canonical transmission list: parties are
/// numbered in order of first appearance, the sender of a transmission
/// before its receiver. Exponential; useful as a cross-check for small
/// `n`.
pub fn brute_force_count(n: u32) -> Result<u128, CountError> {
    fn go(remaining: u32, used: u64) -> u128 {
        if remaining == 0 {
            return 1;
        }
        let mut total = 0;
        for sender in 0..=used {
            let after_sender = if sender == used { used + 1 } else { used };
            for receiver in 0..=after_sender {
                if receiver == sender {
                    continue;
                }
                let after = if receiver == after_sender { after_sender + 1 } else { after_sender };
                total += go(remaining - 1, after);
            }
        }
        total
    }
    if n == 0 {
        return Err(CountError::Empty);
    }
    Ok(go(n, 0))
}
