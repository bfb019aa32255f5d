//! Event orders derived from a protocol.
//!
//! Every transmission contributes two atomic events (its send and its
//! receive), and every atomic event has two points: a start and a
//! completion. Orders are directed graphs over points. Two orders matter:
//! the communication pairing (which send feeds which receive) and
//! happens-before (which points are forced to precede which). The graph
//! starts from program order and guards, can be extended with the channel
//! rules for concrete capacities, and can be closed under propagation
//! through communication pairings.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::protocol::{Capacity, Channel, EventRef, Global, Kind, ProtocolError};

/// An occurrence of a send or receive, identified by its protocol event.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AtomicEvent {
    pub event: EventRef,
    pub kind: Kind,
}

impl AtomicEvent {
    pub fn new(event: EventRef, kind: Kind) -> Self {
        AtomicEvent { event, kind }
    }

    pub fn start(&self) -> Point {
        Point { event: self.event.clone(), kind: self.kind, phase: Phase::Start }
    }

    pub fn completion(&self) -> Point {
        Point { event: self.event.clone(), kind: self.kind, phase: Phase::Completion }
    }
}

impl fmt::Display for AtomicEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.event, self.kind)
    }
}

/// Start or completion of an atomic event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Start,
    Completion,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Start => "s",
            Phase::Completion => "c",
        })
    }
}

/// One endpoint of an order edge. Rendered `A.1.S.s`: party, index, kind,
/// phase.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Point {
    pub event: EventRef,
    pub kind: Kind,
    pub phase: Phase,
}

impl Point {
    pub fn atom(&self) -> AtomicEvent {
        AtomicEvent { event: self.event.clone(), kind: self.kind }
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.event, self.kind, self.phase)
    }
}

/// Why an edge is in the graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeLabel {
    /// Intra-event (start before completion), intra-party sequencing, or
    /// sequencing imposed by `;` between events of one party.
    ProgramOrder,
    /// Asserted by a guard.
    Guard,
    /// The i-th send on a channel starts before the i-th receive completes.
    Channel(String),
    /// On a channel of capacity k, the i-th receive starts before the
    /// (i+k)-th send completes.
    CapacityRule(String),
    /// Added by closure through a communication pairing.
    Derived,
}

impl fmt::Display for EdgeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeLabel::ProgramOrder => f.write_str("program-order"),
            EdgeLabel::Guard => f.write_str("guard"),
            EdgeLabel::Channel(c) => write!(f, "channel({c})"),
            EdgeLabel::CapacityRule(c) => write!(f, "capacity({c})"),
            EdgeLabel::Derived => f.write_str("derived"),
        }
    }
}

/// One communication pairing: the send event feeds the receive event over
/// the channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommTriple {
    pub send: EventRef,
    pub channel: Channel,
    pub recv: EventRef,
}

impl CommTriple {
    pub fn send_atom(&self) -> AtomicEvent {
        AtomicEvent { event: self.send.clone(), kind: Kind::Send }
    }

    pub fn recv_atom(&self) -> AtomicEvent {
        AtomicEvent { event: self.recv.clone(), kind: Kind::Recv }
    }
}

impl fmt::Display for CommTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.send, self.channel, self.recv)
    }
}

#[derive(Debug, Error)]
pub enum OrderError {
    #[error("channel {channel} has capacity `any`; the capacity rules need a concrete capacity")]
    UnresolvedCapacity { channel: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Directed graph over points with labeled edges.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OrderGraph {
    points: BTreeSet<Point>,
    edges: BTreeMap<Point, BTreeSet<(Point, EdgeLabel)>>,
}

impl OrderGraph {
    pub fn new() -> Self {
        OrderGraph::default()
    }

    pub fn add_point(&mut self, p: Point) {
        self.points.insert(p);
    }

    /// Adds an edge; returns false if that exact labeled edge was already
    /// present.
    pub fn add_edge(&mut self, from: Point, to: Point, label: EdgeLabel) -> bool {
        self.points.insert(from.clone());
        self.points.insert(to.clone());
        self.edges.entry(from).or_default().insert((to, label))
    }

    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.points.iter()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&Point, &Point, &EdgeLabel)> {
        self.edges
            .iter()
            .flat_map(|(from, tos)| tos.iter().map(move |(to, label)| (from, to, label)))
    }

    /// The atomic events underlying the points.
    pub fn atomic_events(&self) -> BTreeSet<AtomicEvent> {
        self.points.iter().map(Point::atom).collect()
    }

    fn successors(&self, p: &Point) -> impl Iterator<Item = &Point> {
        self.edges.get(p).into_iter().flat_map(|s| s.iter().map(|(to, _)| to))
    }

    /// True if a directed path with at least one edge leads from `from` to
    /// `to`.
    pub fn reaches(&self, from: &Point, to: &Point) -> bool {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<&Point> = self.successors(from).collect();
        while let Some(p) = queue.pop_front() {
            if p == to {
                return true;
            }
            if seen.insert(p.clone()) {
                queue.extend(self.successors(p));
            }
        }
        false
    }

    /// Happens-before between atomic events: the completion of `a` must
    /// precede the start of `b`.
    pub fn happens_before(&self, a: &AtomicEvent, b: &AtomicEvent) -> bool {
        let (ca, sb) = (a.completion(), b.start());
        ca == sb || self.reaches(&ca, &sb)
    }

    /// Shortest directed cycle, or None when the order is a strict partial
    /// order. Ties between equally short cycles break lexicographically;
    /// the returned cycle starts at its smallest point.
    pub fn detect_cycle(&self) -> Option<Vec<Point>> {
        let succ: BTreeMap<Point, BTreeSet<Point>> = self
            .edges
            .iter()
            .map(|(from, tos)| {
                (from.clone(), tos.iter().map(|(to, _)| to.clone()).collect())
            })
            .collect();
        minimal_cycle(&succ)
    }

    /// Sorted `from -> to [label]` lines.
    pub fn dump(&self) -> String {
        let mut lines: Vec<String> = self
            .edges()
            .map(|(from, to, label)| format!("{from} -> {to} [{label}]"))
            .collect();
        lines.sort();
        lines.join("\n")
    }
}

/// Shortest directed cycle in an adjacency map, reported as its node
/// sequence starting from the smallest node on the cycle. Equal-length
/// candidates compare lexicographically.
pub(crate) fn minimal_cycle<N: Ord + Clone>(succ: &BTreeMap<N, BTreeSet<N>>) -> Option<Vec<N>> {
    let mut best: Option<Vec<N>> = None;
    for s in succ.keys() {
        // dist_back[x]: fewest edges from x to s, via reverse BFS from s.
        let mut dist_back: BTreeMap<&N, usize> = BTreeMap::new();
        dist_back.insert(s, 0);
        let mut queue = VecDeque::from([s]);
        while let Some(x) = queue.pop_front() {
            let dx = dist_back[x];
            for (from, tos) in succ {
                if tos.contains(x) && !dist_back.contains_key(from) {
                    dist_back.insert(from, dx + 1);
                    queue.push_back(from);
                }
            }
        }
        let Some(len) = succ[s]
            .iter()
            .filter_map(|y| dist_back.get(y).map(|d| d + 1))
            .min()
        else {
            continue;
        };
        if let Some(b) = &best {
            if b.len() < len {
                continue;
            }
        }
        // Walk the cycle, always taking the smallest next node that still
        // closes it in the remaining number of edges.
        let mut path = vec![s.clone()];
        let mut cur = s;
        let mut need = len;
        while need > 1 {
            let next = succ[cur]
                .iter()
                .find(|y| dist_back.get(*y) == Some(&(need - 1)))
                .expect("cycle walk matches BFS distances");
            path.push(next.clone());
            cur = next;
            need -= 1;
        }
        match &best {
            Some(b) if (b.len(), b) <= (path.len(), &path) => {}
            _ => best = Some(path),
        }
    }
    best
}

/// The two base orders of an indexed protocol: communication pairings and
/// the happens-before graph from program order and guards.
#[derive(Debug, Clone)]
pub struct Orders {
    pub comm: Vec<CommTriple>,
    pub order: OrderGraph,
}

/// Builds the base orders. The happens-before graph contains, for every
/// atomic event, its start-before-completion edge; for every pair of
/// transmissions ordered by `;` and sharing a party, the edge from the
/// shared party's earlier event to its later one; and for every guard, the
/// edge it asserts.
pub fn derive_orders(g: &Global) -> Result<Orders, OrderError> {
    let events = g.events()?;
    let kind_of: BTreeMap<EventRef, Kind> =
        events.iter().map(|e| (e.event.clone(), e.kind)).collect();

    let mut order = OrderGraph::new();
    for e in &events {
        let atom = AtomicEvent::new(e.event.clone(), e.kind);
        order.add_edge(atom.start(), atom.completion(), EdgeLabel::ProgramOrder);
    }

    for (a, b) in g.sequential_pairs()? {
        let mut connect = |x: AtomicEvent, y: AtomicEvent| {
            order.add_edge(x.completion(), y.start(), EdgeLabel::ProgramOrder);
        };
        let (s1, r1) = (a.send_event(), a.recv_event());
        let (s2, r2) = (b.send_event(), b.recv_event());
        if a.sender == b.sender {
            connect(AtomicEvent::new(s1.clone(), Kind::Send), AtomicEvent::new(s2.clone(), Kind::Send));
        }
        if a.sender == b.receiver {
            connect(AtomicEvent::new(s1, Kind::Send), AtomicEvent::new(r2.clone(), Kind::Recv));
        }
        if a.receiver == b.sender {
            connect(AtomicEvent::new(r1.clone(), Kind::Recv), AtomicEvent::new(s2, Kind::Send));
        }
        if a.receiver == b.receiver {
            connect(AtomicEvent::new(r1, Kind::Recv), AtomicEvent::new(r2, Kind::Recv));
        }
    }

    for (lhs, rhs) in g.guards() {
        let (Some(lk), Some(rk)) = (kind_of.get(&lhs), kind_of.get(&rhs)) else {
            return Err(OrderError::Protocol(ProtocolError::GuardRefUnresolved {
                event: if kind_of.contains_key(&lhs) { rhs } else { lhs },
            }));
        };
        let l = AtomicEvent::new(lhs, *lk);
        let r = AtomicEvent::new(rhs, *rk);
        order.add_edge(l.completion(), r.start(), EdgeLabel::Guard);
    }

    let comm = g
        .transmissions()?
        .into_iter()
        .map(|t| CommTriple { send: t.send_event(), channel: t.channel.clone(), recv: t.recv_event() })
        .collect();

    Ok(Orders { comm, order })
}

impl OrderGraph {
    /// For every pairing, the edge that holds on any channel: the send
    /// starts before the receive completes.
    pub fn add_transmission_edges(&mut self, comm: &[CommTriple]) {
        for t in comm {
            self.add_edge(
                t.send_atom().start(),
                t.recv_atom().completion(),
                EdgeLabel::Channel(t.channel.name.clone()),
            );
        }
    }
}

/// Pairs (receive i, send i+k) the capacity rule relates, over positional
/// send and receive sequences of one channel.
pub(crate) fn capacity_rule_pairs(
    sends: &[AtomicEvent],
    recvs: &[AtomicEvent],
    k: u32,
) -> Vec<(AtomicEvent, AtomicEvent)> {
    let k = k as usize;
    recvs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| sends.get(i + k).map(|s| (r.clone(), s.clone())))
        .collect()
}

/// Extends the happens-before graph with both channel rules for every
/// channel. All capacities must be concrete.
pub fn apply_channel_rules(orders: &mut Orders) -> Result<(), OrderError> {
    let mut per_channel: BTreeMap<String, (Capacity, Vec<CommTriple>)> = BTreeMap::new();
    for t in &orders.comm {
        per_channel
            .entry(t.channel.name.clone())
            .or_insert_with(|| (t.channel.capacity, Vec::new()))
            .1
            .push(t.clone());
    }
    for (name, (cap, _)) in &per_channel {
        if *cap == Capacity::Any {
            return Err(OrderError::UnresolvedCapacity { channel: name.clone() });
        }
    }
    for (name, (cap, triples)) in per_channel {
        let sends: Vec<AtomicEvent> = triples.iter().map(CommTriple::send_atom).collect();
        let recvs: Vec<AtomicEvent> = triples.iter().map(CommTriple::recv_atom).collect();
        orders.order.add_transmission_edges(&triples);
        let Capacity::Exact(k) = cap else { unreachable!() };
        for (r, s) in capacity_rule_pairs(&sends, &recvs, k) {
            orders.order.add_edge(r.start(), s.completion(), EdgeLabel::CapacityRule(name.clone()));
        }
    }
    Ok(())
}

/// Which closure rules to run when saturating an order through
/// communication pairings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PropagationRules {
    /// If the receive of a pairing happens before an event, so does the
    /// send. Holds for every channel.
    pub through_receive: bool,
    /// If an event happens before the send of a pairing, it happens before
    /// the receive. Holds only for rendezvous channels; unsound when the
    /// channel buffers.
    pub through_send: bool,
}

impl PropagationRules {
    pub fn sound() -> Self {
        PropagationRules { through_receive: true, through_send: false }
    }

    pub fn with_unsound_send() -> Self {
        PropagationRules { through_receive: true, through_send: true }
    }
}

/// Edges the saturation added, split by rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PropagationOutcome {
    pub through_receive_added: usize,
    pub through_send_added: usize,
}

/// Closes the happens-before graph under the selected propagation rules,
/// to a fixpoint. An edge is added only when its endpoints are not already
/// ordered.
pub fn saturate(
    order: &mut OrderGraph,
    comm: &[CommTriple],
    rules: PropagationRules,
) -> PropagationOutcome {
    let atoms: Vec<AtomicEvent> = order.atomic_events().into_iter().collect();
    let mut outcome = PropagationOutcome::default();
    loop {
        let mut changed = false;
        for t in comm {
            let (s, r) = (t.send_atom(), t.recv_atom());
            for e in &atoms {
                if rules.through_receive
                    && *e != r
                    && *e != s
                    && order.happens_before(&r, e)
                    && !order.happens_before(&s, e)
                {
                    order.add_edge(s.completion(), e.start(), EdgeLabel::Derived);
                    outcome.through_receive_added += 1;
                    changed = true;
                }
                if rules.through_send
                    && *e != s
                    && *e != r
                    && order.happens_before(e, &s)
                    && !order.happens_before(e, &r)
                {
                    order.add_edge(e.completion(), r.start(), EdgeLabel::Derived);
                    outcome.through_send_added += 1;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    outcome
}

/// What a linear reading of one channel's sends and receives looks like in
/// an order graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FifoAlignment {
    /// Sends in the order the graph forces, if it forces one.
    pub send_chain: Option<Vec<EventRef>>,
    /// Receives in the order the graph forces, if it forces one.
    pub recv_chain: Option<Vec<EventRef>>,
    /// True when both chains exist and the i-th send of the chain is paired
    /// with the i-th receive. A static analysis reading the graph this way
    /// concludes the pairing is the FIFO one.
    pub aligned: bool,
}

/// Orders one channel's sends and receives by start-point reachability and
/// checks the result against the declared pairings.
pub fn fifo_alignment(order: &OrderGraph, comm: &[CommTriple], channel: &str) -> FifoAlignment {
    let triples: Vec<&CommTriple> = comm.iter().filter(|t| t.channel.name == channel).collect();
    let chain = |atoms: Vec<AtomicEvent>| -> Option<Vec<AtomicEvent>> {
        for i in 0..atoms.len() {
            for j in i + 1..atoms.len() {
                let fwd = order.reaches(&atoms[i].start(), &atoms[j].start());
                let back = order.reaches(&atoms[j].start(), &atoms[i].start());
                if fwd == back {
                    return None;
                }
            }
        }
        let mut sorted = atoms;
        sorted.sort_by(|a, b| {
            if order.reaches(&a.start(), &b.start()) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        });
        Some(sorted)
    };
    let send_chain = chain(triples.iter().map(|t| t.send_atom()).collect());
    let recv_chain = chain(triples.iter().map(|t| t.recv_atom()).collect());
    let aligned = match (&send_chain, &recv_chain) {
        (Some(ss), Some(rs)) => ss.iter().zip(rs).all(|(s, r)| {
            triples
                .iter()
                .any(|t| t.send == s.event && t.recv == r.event)
        }),
        _ => false,
    };
    FifoAlignment {
        send_chain: send_chain.map(|c| c.into_iter().map(|a| a.event).collect()),
        recv_chain: recv_chain.map(|c| c.into_iter().map(|a| a.event).collect()),
        aligned,
    }
}
