//! Protocol ASTs and their concrete syntax.
//!
//! Three layers share this module: the global protocol (what all parties do
//! together), the per-party protocol (one party's slice, produced by
//! projection), and the per-endpoint protocol (one channel of one party, the
//! shape the verifier consumes). The global layer has a parseable DSL:
//!
//! ```text
//! chan c cap 2            # optional capacity headers
//! A -c-> B ; [A.1 < B.2] ; B -c-> C || D -d:0-> E
//! ```
//!
//! `;` composes sequentially and binds tighter than `||`; `[P.i < Q.j]` is a
//! guard asserting that event i of P happens before event j of Q; `-c:k->`
//! fixes the capacity of `c` inline. Undeclared channels default to capacity
//! `any`, which later stages must resolve before applying capacity-sensitive
//! rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Serialize, Serializer};
use thiserror::Error;

/// A sequentially executing participant of a protocol.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Party(pub String);

impl Party {
    pub fn new(name: impl Into<String>) -> Self {
        Party(name.into())
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for Party {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

/// Channel buffer capacity. `Exact(0)` is unbuffered (rendezvous), `Exact(k)`
/// buffered, and `Any` is a protocol-level wildcard that unifies with every
/// concrete capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Capacity {
    Exact(u32),
    Any,
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Capacity::Exact(k) => write!(f, "{k}"),
            Capacity::Any => f.write_str("any"),
        }
    }
}

impl Serialize for Capacity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Channel {
    pub name: String,
    pub capacity: Capacity,
}

impl Channel {
    pub fn new(name: impl Into<String>, capacity: Capacity) -> Self {
        Channel { name: name.into(), capacity }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Transmission index: a nonempty path of integers ordered lexicographically,
/// so `1 < 1.1 < 1.2 < 2`. Top-level transmissions get single-component
/// indexes; rendezvous inserted by projection get two-component ones.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Index(pub Vec<u32>);

impl Index {
    pub fn top(n: u32) -> Self {
        Index(vec![n])
    }

    pub fn sub(base: u32, n: u32) -> Self {
        Index(vec![base, n])
    }
}

impl fmt::Display for Index {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        f.write_str(&parts.join("."))
    }
}

impl Serialize for Index {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// One side of a transmission: the event of `party` in the transmission with
/// the given index. Rendered `A.1`, `B.1.2`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct EventRef {
    pub party: Party,
    pub index: Index,
}

impl EventRef {
    pub fn new(party: impl Into<String>, index: Index) -> Self {
        EventRef { party: Party::new(party), index }
    }
}

impl fmt::Display for EventRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.party, self.index)
    }
}

/// Whether an event is the sending or the receiving half of a transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Kind {
    Send,
    Recv,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Send => "S",
            Kind::Recv => "R",
        })
    }
}

/// Global protocol AST.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Global {
    Emp,
    Transmission {
        sender: Party,
        channel: Channel,
        index: Option<Index>,
        receiver: Party,
    },
    Guard {
        lhs: EventRef,
        rhs: EventRef,
    },
    Seq(Box<Global>, Box<Global>),
    Par(Box<Global>, Box<Global>),
}

impl Global {
    pub fn seq(l: Global, r: Global) -> Global {
        Global::Seq(Box::new(l), Box::new(r))
    }

    pub fn par(l: Global, r: Global) -> Global {
        Global::Par(Box::new(l), Box::new(r))
    }

    pub fn transmission(sender: &str, channel: Channel, receiver: &str) -> Global {
        Global::Transmission {
            sender: Party::new(sender),
            channel,
            index: None,
            receiver: Party::new(receiver),
        }
    }

    pub fn guard(lhs: EventRef, rhs: EventRef) -> Global {
        Global::Guard { lhs, rhs }
    }
}

/// A transmission of an indexed protocol, flattened out of the AST.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransmissionView {
    pub sender: Party,
    pub channel: Channel,
    pub index: Index,
    pub receiver: Party,
}

impl TransmissionView {
    pub fn send_event(&self) -> EventRef {
        EventRef { party: self.sender.clone(), index: self.index.clone() }
    }

    pub fn recv_event(&self) -> EventRef {
        EventRef { party: self.receiver.clone(), index: self.index.clone() }
    }
}

/// An event of an indexed protocol together with its kind and channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolEvent {
    pub event: EventRef,
    pub kind: Kind,
    pub channel: Channel,
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("{line}:{col}: {msg}")]
    Syntax { line: u32, col: u32, msg: String },
    #[error("{line}:{col}: party {party} transmits to itself")]
    SelfTransmission { line: u32, col: u32, party: Party },
    #[error("channel {channel} declared with conflicting capacities {first} and {second}")]
    CapacityConflict { channel: String, first: Capacity, second: Capacity },
    #[error("guard event {event} does not name an event of the protocol")]
    GuardRefUnresolved { event: EventRef },
    #[error("protocol has unassigned transmission indexes")]
    Unindexed,
}

/// Validation findings. An empty list means the protocol is accepted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Diagnostic {
    /// A transmission whose sender and receiver coincide.
    SelfTransmission { party: Party },
    /// A party sends and receives on one channel across the two branches of
    /// a concurrent composition; implementations of such protocols deadlock
    /// or race on the branch order.
    CrossParSendRecv { party: Party, channel: String },
    /// A party uses one channel in both branches of a concurrent composition
    /// (same direction on both sides). The party's endpoint then has no
    /// faithful sequential protocol, so this is conservatively rejected.
    CrossParSharedChannel { party: Party, channel: String },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::SelfTransmission { party } => {
                write!(f, "party {party} transmits to itself")
            }
            Diagnostic::CrossParSendRecv { party, channel } => write!(
                f,
                "party {party} both sends and receives on channel {channel} across concurrent branches"
            ),
            Diagnostic::CrossParSharedChannel { party, channel } => write!(
                f,
                "party {party} uses channel {channel} in both concurrent branches"
            ),
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(u32),
    Semi,
    ParOp,
    LParen,
    RParen,
    LBrack,
    RBrack,
    Less,
    Minus,
    Arrow,
    Colon,
    Dot,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Int(n) => write!(f, "`{n}`"),
            Tok::Semi => f.write_str("`;`"),
            Tok::ParOp => f.write_str("`||`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::LBrack => f.write_str("`[`"),
            Tok::RBrack => f.write_str("`]`"),
            Tok::Less => f.write_str("`<`"),
            Tok::Minus => f.write_str("`-`"),
            Tok::Arrow => f.write_str("`->`"),
            Tok::Colon => f.write_str("`:`"),
            Tok::Dot => f.write_str("`.`"),
        }
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
}

type Spanned = (Tok, u32, u32);

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src: src.as_bytes(), pos: 0, line: 1, col: 1 }
    }

    fn bump(&mut self) -> Option<u8> {
        let b = *self.src.get(self.pos)?;
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(b)
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn err(&self, msg: impl Into<String>) -> ProtocolError {
        ProtocolError::Syntax { line: self.line, col: self.col, msg: msg.into() }
    }

    fn tokens(mut self) -> Result<Vec<Spanned>, ProtocolError> {
        let mut out = Vec::new();
        loop {
            while let Some(b) = self.peek() {
                if b == b'#' {
                    while let Some(b) = self.peek() {
                        if b == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                } else if b.is_ascii_whitespace() {
                    self.bump();
                } else {
                    break;
                }
            }
            let (line, col) = (self.line, self.col);
            let Some(b) = self.peek() else { break };
            let tok = match b {
                b';' => {
                    self.bump();
                    Tok::Semi
                }
                b'|' => {
                    self.bump();
                    if self.peek() == Some(b'|') {
                        self.bump();
                        Tok::ParOp
                    } else {
                        return Err(self.err("expected `||`"));
                    }
                }
                b'(' => {
                    self.bump();
                    Tok::LParen
                }
                b')' => {
                    self.bump();
                    Tok::RParen
                }
                b'[' => {
                    self.bump();
                    Tok::LBrack
                }
                b']' => {
                    self.bump();
                    Tok::RBrack
                }
                b'<' => {
                    self.bump();
                    Tok::Less
                }
                b':' => {
                    self.bump();
                    Tok::Colon
                }
                b'.' => {
                    self.bump();
                    Tok::Dot
                }
                b'-' => {
                    self.bump();
                    if self.peek() == Some(b'>') {
                        self.bump();
                        Tok::Arrow
                    } else {
                        Tok::Minus
                    }
                }
                b'0'..=b'9' => {
                    let mut n: u32 = 0;
                    while let Some(d) = self.peek() {
                        if !d.is_ascii_digit() {
                            break;
                        }
                        n = n
                            .checked_mul(10)
                            .and_then(|n| n.checked_add(u32::from(d - b'0')))
                            .ok_or_else(|| self.err("number too large"))?;
                        self.bump();
                    }
                    Tok::Int(n)
                }
                b if b.is_ascii_alphabetic() || b == b'_' => {
                    let start = self.pos;
                    while let Some(c) = self.peek() {
                        if c.is_ascii_alphanumeric() || c == b'_' {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                    Tok::Ident(text.to_string())
                }
                other => return Err(self.err(format!("unexpected character `{}`", other as char))),
            };
            out.push((tok, line, col));
        }
        Ok(out)
    }
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    /// Explicit capacity declarations seen so far (headers and inline).
    declared: BTreeMap<String, Capacity>,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _, _)| t)
    }

    fn loc(&self) -> (u32, u32) {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map(|(_, l, c)| (*l, *c))
            .unwrap_or((1, 1))
    }

    fn err(&self, msg: impl Into<String>) -> ProtocolError {
        let (line, col) = self.loc();
        ProtocolError::Syntax { line, col, msg: msg.into() }
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> Result<(), ProtocolError> {
        match self.peek() {
            Some(t) if *t == want => {
                self.bump();
                Ok(())
            }
            Some(t) => Err(self.err(format!("expected {want}, found {t}"))),
            None => Err(self.err(format!("expected {want}, found end of input"))),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ProtocolError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            Some(t) => Err(self.err(format!("expected {what}, found {t}"))),
            None => Err(self.err(format!("expected {what}, found end of input"))),
        }
    }

    fn declare(&mut self, channel: &str, cap: Capacity) -> Result<(), ProtocolError> {
        match self.declared.get(channel) {
            Some(prev) if *prev != cap => Err(ProtocolError::CapacityConflict {
                channel: channel.to_string(),
                first: *prev,
                second: cap,
            }),
            _ => {
                self.declared.insert(channel.to_string(), cap);
                Ok(())
            }
        }
    }

    fn capacity(&mut self) -> Result<Capacity, ProtocolError> {
        match self.peek() {
            Some(Tok::Int(k)) => {
                let k = *k;
                self.bump();
                Ok(Capacity::Exact(k))
            }
            Some(Tok::Ident(s)) if s == "any" => {
                self.bump();
                Ok(Capacity::Any)
            }
            _ => Err(self.err("expected a capacity (integer or `any`)")),
        }
    }

    fn headers(&mut self) -> Result<(), ProtocolError> {
        while matches!(self.peek(), Some(Tok::Ident(s)) if s == "chan") {
            self.bump();
            let name = self.ident("channel name")?;
            match self.peek() {
                Some(Tok::Ident(s)) if s == "cap" => {
                    self.bump();
                }
                _ => return Err(self.err("expected `cap`")),
            }
            let cap = self.capacity()?;
            self.declare(&name, cap)?;
        }
        Ok(())
    }

    fn par(&mut self) -> Result<Global, ProtocolError> {
        let mut acc = self.seq()?;
        while self.peek() == Some(&Tok::ParOp) {
            self.bump();
            let rhs = self.seq()?;
            acc = Global::par(acc, rhs);
        }
        Ok(acc)
    }

    fn seq(&mut self) -> Result<Global, ProtocolError> {
        let mut acc = self.atom()?;
        while self.peek() == Some(&Tok::Semi) {
            self.bump();
            let rhs = self.atom()?;
            acc = Global::seq(acc, rhs);
        }
        Ok(acc)
    }

    fn atom(&mut self) -> Result<Global, ProtocolError> {
        match self.peek() {
            Some(Tok::LParen) => {
                self.bump();
                let inner = self.par()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Some(Tok::LBrack) => self.guard(),
            Some(Tok::Ident(s)) if s == "emp" => {
                self.bump();
                Ok(Global::Emp)
            }
            Some(Tok::Ident(_)) => self.transmission(),
            Some(t) => Err(self.err(format!("expected a protocol term, found {t}"))),
            None => Err(self.err("expected a protocol term, found end of input")),
        }
    }

    fn transmission(&mut self) -> Result<Global, ProtocolError> {
        let (line, col) = self.loc();
        let sender = self.ident("party name")?;
        self.expect(Tok::Minus)?;
        let channel = self.ident("channel name")?;
        if self.peek() == Some(&Tok::Colon) {
            self.bump();
            let cap = self.capacity()?;
            self.declare(&channel, cap)?;
        }
        self.expect(Tok::Arrow)?;
        let receiver = self.ident("party name")?;
        if sender == receiver {
            return Err(ProtocolError::SelfTransmission { line, col, party: Party::new(sender) });
        }
        // Capacity is patched in after parsing, once all declarations are known.
        Ok(Global::transmission(&sender, Channel::new(channel, Capacity::Any), &receiver))
    }

    fn event_ref(&mut self) -> Result<EventRef, ProtocolError> {
        let party = self.ident("party name")?;
        self.expect(Tok::Dot)?;
        let mut path = Vec::new();
        loop {
            match self.peek() {
                Some(Tok::Int(n)) => {
                    path.push(*n);
                    self.bump();
                }
                _ => return Err(self.err("expected an index component")),
            }
            if self.peek() == Some(&Tok::Dot) {
                self.bump();
            } else {
                break;
            }
        }
        Ok(EventRef { party: Party::new(party), index: Index(path) })
    }

    fn guard(&mut self) -> Result<Global, ProtocolError> {
        self.expect(Tok::LBrack)?;
        let lhs = self.event_ref()?;
        self.expect(Tok::Less)?;
        let rhs = self.event_ref()?;
        self.expect(Tok::RBrack)?;
        Ok(Global::Guard { lhs, rhs })
    }
}

fn patch_capacities(g: &mut Global, declared: &BTreeMap<String, Capacity>) {
    match g {
        Global::Transmission { channel, .. } => {
            if let Some(cap) = declared.get(&channel.name) {
                channel.capacity = *cap;
            }
        }
        Global::Seq(l, r) | Global::Par(l, r) => {
            patch_capacities(l, declared);
            patch_capacities(r, declared);
        }
        Global::Emp | Global::Guard { .. } => {}
    }
}

impl Global {
    /// Parses the protocol DSL. Transmission indexes are left unassigned;
    /// call [`Global::index_transmissions`] next.
    pub fn parse(text: &str) -> Result<Global, ProtocolError> {
        let toks = Lexer::new(text).tokens()?;
        let mut p = Parser { toks, pos: 0, declared: BTreeMap::new() };
        p.headers()?;
        let mut g = p.par()?;
        if p.peek().is_some() {
            return Err(p.err("trailing input after protocol"));
        }
        patch_capacities(&mut g, &p.declared);
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// Rendering

fn render_expr(g: &Global, out: &mut String) {
    match g {
        Global::Emp => out.push_str("emp"),
        Global::Transmission { sender, channel, receiver, .. } => {
            out.push_str(&format!("{sender} -{channel}-> {receiver}"));
        }
        Global::Guard { lhs, rhs } => {
            out.push_str(&format!("[{lhs} < {rhs}]"));
        }
        Global::Seq(l, r) => {
            // Left operand keeps the chain flat; parenthesize only when the
            // shape would otherwise be lost on reparse.
            wrap_if(l, matches!(**l, Global::Par(..)), out);
            out.push_str(" ; ");
            wrap_if(r, matches!(**r, Global::Seq(..) | Global::Par(..)), out);
        }
        Global::Par(l, r) => {
            wrap_if(l, false, out);
            out.push_str(" || ");
            wrap_if(r, matches!(**r, Global::Par(..)), out);
        }
    }
}

fn wrap_if(g: &Global, parens: bool, out: &mut String) {
    if parens {
        out.push('(');
        render_expr(g, out);
        out.push(')');
    } else {
        render_expr(g, out);
    }
}

impl Global {
    /// Renders back to DSL text: capacity headers for every channel with an
    /// exact capacity, then the protocol expression. The output reparses to
    /// this exact AST (transmission indexes excepted; those are reassigned).
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, cap) in self.channels() {
            if let Capacity::Exact(k) = cap {
                out.push_str(&format!("chan {name} cap {k}\n"));
            }
        }
        out.push_str(&self.render_expr());
        out
    }

    /// Renders the protocol expression without capacity headers.
    pub fn render_expr(&self) -> String {
        let mut s = String::new();
        render_expr(self, &mut s);
        s
    }
}

// ---------------------------------------------------------------------------
// Indexing, events, validation

impl Global {
    /// Assigns consecutive single-component indexes 1, 2, ... to the
    /// transmissions in textual (left-to-right) order, then checks that every
    /// guard names an event some transmission actually has. Idempotent.
    pub fn index_transmissions(&self) -> Result<Global, ProtocolError> {
        fn assign(g: &Global, next: &mut u32) -> Global {
            match g {
                Global::Transmission { sender, channel, receiver, .. } => {
                    let index = Index::top(*next);
                    *next += 1;
                    Global::Transmission {
                        sender: sender.clone(),
                        channel: channel.clone(),
                        index: Some(index),
                        receiver: receiver.clone(),
                    }
                }
                Global::Seq(l, r) => {
                    let l = assign(l, next);
                    let r = assign(r, next);
                    Global::seq(l, r)
                }
                Global::Par(l, r) => {
                    let l = assign(l, next);
                    let r = assign(r, next);
                    Global::par(l, r)
                }
                other => other.clone(),
            }
        }
        let mut next = 1;
        let indexed = assign(self, &mut next);
        let events: BTreeSet<EventRef> =
            indexed.events()?.into_iter().map(|e| e.event).collect();
        fn check_guards(
            g: &Global,
            events: &BTreeSet<EventRef>,
        ) -> Result<(), ProtocolError> {
            match g {
                Global::Guard { lhs, rhs } => {
                    for e in [lhs, rhs] {
                        if !events.contains(e) {
                            return Err(ProtocolError::GuardRefUnresolved { event: e.clone() });
                        }
                    }
                    Ok(())
                }
                Global::Seq(l, r) | Global::Par(l, r) => {
                    check_guards(l, events)?;
                    check_guards(r, events)
                }
                _ => Ok(()),
            }
        }
        check_guards(&indexed, &events)?;
        Ok(indexed)
    }

    /// All transmissions in textual order. Requires indexes to be assigned.
    pub fn transmissions(&self) -> Result<Vec<TransmissionView>, ProtocolError> {
        fn walk(g: &Global, out: &mut Vec<TransmissionView>) -> Result<(), ProtocolError> {
            match g {
                Global::Transmission { sender, channel, index, receiver } => {
                    let index = index.clone().ok_or(ProtocolError::Unindexed)?;
                    out.push(TransmissionView {
                        sender: sender.clone(),
                        channel: channel.clone(),
                        index,
                        receiver: receiver.clone(),
                    });
                    Ok(())
                }
                Global::Seq(l, r) | Global::Par(l, r) => {
                    walk(l, out)?;
                    walk(r, out)
                }
                _ => Ok(()),
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out)?;
        Ok(out)
    }

    /// The two events of every transmission, in textual order (send before
    /// receive within a transmission).
    pub fn events(&self) -> Result<Vec<ProtocolEvent>, ProtocolError> {
        let mut out = Vec::new();
        for t in self.transmissions()? {
            out.push(ProtocolEvent {
                event: t.send_event(),
                kind: Kind::Send,
                channel: t.channel.clone(),
            });
            out.push(ProtocolEvent {
                event: t.recv_event(),
                kind: Kind::Recv,
                channel: t.channel,
            });
        }
        Ok(out)
    }

    /// Every pair of transmissions (a, b) such that a and b are ordered by a
    /// sequential composition: a sits in the left operand of some `Seq` node
    /// and b in its right operand. This is the raw material for program-order
    /// edges and for the race-free transformation.
    pub fn sequential_pairs(&self) -> Result<Vec<(TransmissionView, TransmissionView)>, ProtocolError> {
        fn walk(
            g: &Global,
            pairs: &mut Vec<(TransmissionView, TransmissionView)>,
        ) -> Result<Vec<TransmissionView>, ProtocolError> {
            match g {
                Global::Transmission { sender, channel, index, receiver } => {
                    let index = index.clone().ok_or(ProtocolError::Unindexed)?;
                    Ok(vec![TransmissionView {
                        sender: sender.clone(),
                        channel: channel.clone(),
                        index,
                        receiver: receiver.clone(),
                    }])
                }
                Global::Seq(l, r) => {
                    let lv = walk(l, pairs)?;
                    let rv = walk(r, pairs)?;
                    for a in &lv {
                        for b in &rv {
                            pairs.push((a.clone(), b.clone()));
                        }
                    }
                    Ok(lv.into_iter().chain(rv).collect())
                }
                Global::Par(l, r) => {
                    let lv = walk(l, pairs)?;
                    let rv = walk(r, pairs)?;
                    Ok(lv.into_iter().chain(rv).collect())
                }
                _ => Ok(Vec::new()),
            }
        }
        let mut pairs = Vec::new();
        walk(self, &mut pairs)?;
        Ok(pairs)
    }

    /// All guards in textual order.
    pub fn guards(&self) -> Vec<(EventRef, EventRef)> {
        fn walk(g: &Global, out: &mut Vec<(EventRef, EventRef)>) {
            match g {
                Global::Guard { lhs, rhs } => out.push((lhs.clone(), rhs.clone())),
                Global::Seq(l, r) | Global::Par(l, r) => {
                    walk(l, out);
                    walk(r, out);
                }
                _ => {}
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    /// Channel capacities, keyed by channel name.
    pub fn channels(&self) -> BTreeMap<String, Capacity> {
        fn walk(g: &Global, out: &mut BTreeMap<String, Capacity>) {
            match g {
                Global::Transmission { channel, .. } => {
                    out.insert(channel.name.clone(), channel.capacity);
                }
                Global::Seq(l, r) | Global::Par(l, r) => {
                    walk(l, out);
                    walk(r, out);
                }
                _ => {}
            }
        }
        let mut out = BTreeMap::new();
        walk(self, &mut out);
        out
    }

    /// Parties appearing in transmissions, sorted by name.
    pub fn parties(&self) -> BTreeSet<Party> {
        fn walk(g: &Global, out: &mut BTreeSet<Party>) {
            match g {
                Global::Transmission { sender, receiver, .. } => {
                    out.insert(sender.clone());
                    out.insert(receiver.clone());
                }
                Global::Seq(l, r) | Global::Par(l, r) => {
                    walk(l, out);
                    walk(r, out);
                }
                _ => {}
            }
        }
        let mut out = BTreeSet::new();
        walk(self, &mut out);
        out
    }

    /// Checks the protocol. An empty result means accepted; diagnostics are
    /// sorted and deduplicated.
    pub fn validate(&self) -> Vec<Diagnostic> {
        fn usage(g: &Global, out: &mut BTreeSet<(Party, String, Kind)>) {
            match g {
                Global::Transmission { sender, channel, receiver, .. } => {
                    out.insert((sender.clone(), channel.name.clone(), Kind::Send));
                    out.insert((receiver.clone(), channel.name.clone(), Kind::Recv));
                }
                Global::Seq(l, r) | Global::Par(l, r) => {
                    usage(l, out);
                    usage(r, out);
                }
                _ => {}
            }
        }
        fn walk(g: &Global, out: &mut BTreeSet<Diagnostic>) {
            match g {
                Global::Transmission { sender, receiver, .. } if sender == receiver => {
                    out.insert(Diagnostic::SelfTransmission { party: sender.clone() });
                }
                Global::Seq(l, r) => {
                    walk(l, out);
                    walk(r, out);
                }
                Global::Par(l, r) => {
                    walk(l, out);
                    walk(r, out);
                    let mut lu = BTreeSet::new();
                    let mut ru = BTreeSet::new();
                    usage(l, &mut lu);
                    usage(r, &mut ru);
                    for (party, channel, kind) in &lu {
                        let opposite = (
                            party.clone(),
                            channel.clone(),
                            if *kind == Kind::Send { Kind::Recv } else { Kind::Send },
                        );
                        let same = (party.clone(), channel.clone(), *kind);
                        if ru.contains(&opposite) {
                            out.insert(Diagnostic::CrossParSendRecv {
                                party: party.clone(),
                                channel: channel.clone(),
                            });
                        } else if ru.contains(&same) {
                            out.insert(Diagnostic::CrossParSharedChannel {
                                party: party.clone(),
                                channel: channel.clone(),
                            });
                        }
                    }
                }
                _ => {}
            }
        }
        let mut out = BTreeSet::new();
        walk(self, &mut out);
        out.into_iter().collect()
    }

    /// Structural normal form: `emp` units dropped, `;` and `||` chains
    /// flattened and rebuilt left-associated, `||` operands sorted by their
    /// rendered text. Idempotent; preserves the event set.
    pub fn normalize(&self) -> Global {
        self.canonical(true)
    }

    /// Like [`Global::normalize`] but keeps `||` operands in their textual
    /// order, so assigned transmission indexes stay aligned with the text.
    pub(crate) fn flattened(&self) -> Global {
        self.canonical(false)
    }

    fn canonical(&self, sort: bool) -> Global {
        fn collect(g: Global, seq: bool, parts: &mut Vec<Global>) {
            match g {
                Global::Emp => {}
                Global::Seq(l, r) if seq => {
                    collect(*l, true, parts);
                    collect(*r, true, parts);
                }
                Global::Par(l, r) if !seq => {
                    collect(*l, false, parts);
                    collect(*r, false, parts);
                }
                other => parts.push(other),
            }
        }
        fn rebuild(parts: Vec<Global>, seq: bool) -> Global {
            let mut it = parts.into_iter();
            let Some(first) = it.next() else { return Global::Emp };
            it.fold(first, |acc, g| if seq { Global::seq(acc, g) } else { Global::par(acc, g) })
        }
        match self {
            Global::Seq(l, r) => {
                let mut parts = Vec::new();
                collect(l.canonical(sort), true, &mut parts);
                collect(r.canonical(sort), true, &mut parts);
                rebuild(parts, true)
            }
            Global::Par(l, r) => {
                let mut parts = Vec::new();
                collect(l.canonical(sort), false, &mut parts);
                collect(r.canonical(sort), false, &mut parts);
                if sort {
                    parts.sort_by_key(Global::render_expr);
                }
                rebuild(parts, false)
            }
            other => other.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Per-party protocols

/// One party's slice of a global protocol. Sends and receives carry their
/// endpoint channel; guards carry the endpoint that will discharge them.
/// `Par` appears only as a projection artifact (a party whose channels live
/// in concurrent branches); parties themselves are sequential.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartyProtocol {
    Emp,
    Send { event: EventRef, channel: Channel },
    Recv { channel: Channel, event: EventRef },
    Guard { channel: Channel, event: EventRef },
    Seq(Box<PartyProtocol>, Box<PartyProtocol>),
    Par(Box<PartyProtocol>, Box<PartyProtocol>),
}

impl PartyProtocol {
    pub fn seq(l: PartyProtocol, r: PartyProtocol) -> PartyProtocol {
        PartyProtocol::Seq(Box::new(l), Box::new(r))
    }

    pub fn par(l: PartyProtocol, r: PartyProtocol) -> PartyProtocol {
        PartyProtocol::Par(Box::new(l), Box::new(r))
    }

    /// Sequences a list of parts, dropping nothing. Convenience for tests
    /// and projection.
    pub fn seq_all(parts: Vec<PartyProtocol>) -> PartyProtocol {
        let mut it = parts.into_iter();
        let Some(first) = it.next() else { return PartyProtocol::Emp };
        it.fold(first, PartyProtocol::seq)
    }

    pub fn render(&self) -> String {
        fn go(p: &PartyProtocol, out: &mut String) {
            match p {
                PartyProtocol::Emp => out.push_str("emp"),
                PartyProtocol::Send { event, channel } => {
                    out.push_str(&format!("{channel}!{event}"));
                }
                PartyProtocol::Recv { channel, event } => {
                    out.push_str(&format!("{channel}?{event}"));
                }
                PartyProtocol::Guard { channel, event } => {
                    out.push_str(&format!("guard({channel}, {event})"));
                }
                PartyProtocol::Seq(l, r) => {
                    go(l, out);
                    out.push_str(" ; ");
                    if matches!(**r, PartyProtocol::Seq(..) | PartyProtocol::Par(..)) {
                        out.push('(');
                        go(r, out);
                        out.push(')');
                    } else {
                        go(r, out);
                    }
                }
                PartyProtocol::Par(l, r) => {
                    go(l, out);
                    out.push_str(" || ");
                    if matches!(**r, PartyProtocol::Par(..)) {
                        out.push('(');
                        go(r, out);
                        out.push(')');
                    } else {
                        go(r, out);
                    }
                }
            }
        }
        let mut s = String::new();
        go(self, &mut s);
        s
    }

    /// Same normal form as the global layer: unit removal, chain flattening,
    /// `||` operands sorted by rendered text.
    pub fn normalize(&self) -> PartyProtocol {
        fn collect(p: PartyProtocol, seq: bool, parts: &mut Vec<PartyProtocol>) {
            match p {
                PartyProtocol::Emp => {}
                PartyProtocol::Seq(l, r) if seq => {
                    collect(*l, true, parts);
                    collect(*r, true, parts);
                }
                PartyProtocol::Par(l, r) if !seq => {
                    collect(*l, false, parts);
                    collect(*r, false, parts);
                }
                other => parts.push(other),
            }
        }
        fn rebuild(parts: Vec<PartyProtocol>, seq: bool) -> PartyProtocol {
            let mut it = parts.into_iter();
            let Some(first) = it.next() else { return PartyProtocol::Emp };
            it.fold(first, |acc, g| {
                if seq {
                    PartyProtocol::seq(acc, g)
                } else {
                    PartyProtocol::par(acc, g)
                }
            })
        }
        match self {
            PartyProtocol::Seq(l, r) => {
                let mut parts = Vec::new();
                collect(l.normalize(), true, &mut parts);
                collect(r.normalize(), true, &mut parts);
                rebuild(parts, true)
            }
            PartyProtocol::Par(l, r) => {
                let mut parts = Vec::new();
                collect(l.normalize(), false, &mut parts);
                collect(r.normalize(), false, &mut parts);
                parts.sort_by_key(PartyProtocol::render);
                rebuild(parts, false)
            }
            other => other.clone(),
        }
    }

    /// The channels this per-party protocol touches, in name order.
    pub fn channels(&self) -> BTreeMap<String, Channel> {
        fn walk(p: &PartyProtocol, out: &mut BTreeMap<String, Channel>) {
            match p {
                PartyProtocol::Send { channel, .. }
                | PartyProtocol::Recv { channel, .. }
                | PartyProtocol::Guard { channel, .. } => {
                    out.insert(channel.name.clone(), channel.clone());
                }
                PartyProtocol::Seq(l, r) | PartyProtocol::Par(l, r) => {
                    walk(l, out);
                    walk(r, out);
                }
                PartyProtocol::Emp => {}
            }
        }
        let mut out = BTreeMap::new();
        walk(self, &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Per-endpoint protocols

/// An endpoint delegated over a channel: the carried channel together with
/// the suffix of its protocol that the new holder must carry out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelegatedEndpoint {
    pub channel: Channel,
    pub protocol: Box<EndpointProtocol>,
}

/// One channel of one party, as consumed by the verifier. Straight-line:
/// endpoints have no concurrent composition. Payload-carrying sends and
/// receives are the delegation extension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndpointProtocol {
    Emp,
    Send { event: EventRef, payload: Option<DelegatedEndpoint> },
    Recv { event: EventRef, payload: Option<DelegatedEndpoint> },
    Guard { event: EventRef },
    Seq(Box<EndpointProtocol>, Box<EndpointProtocol>),
}

impl EndpointProtocol {
    pub fn seq(l: EndpointProtocol, r: EndpointProtocol) -> EndpointProtocol {
        EndpointProtocol::Seq(Box::new(l), Box::new(r))
    }

    pub fn seq_all(parts: Vec<EndpointProtocol>) -> EndpointProtocol {
        let mut it = parts.into_iter();
        let Some(first) = it.next() else { return EndpointProtocol::Emp };
        it.fold(first, EndpointProtocol::seq)
    }

    pub fn send(event: EventRef) -> EndpointProtocol {
        EndpointProtocol::Send { event, payload: None }
    }

    pub fn recv(event: EventRef) -> EndpointProtocol {
        EndpointProtocol::Recv { event, payload: None }
    }

    pub fn render(&self) -> String {
        fn go(p: &EndpointProtocol, out: &mut String) {
            match p {
                EndpointProtocol::Emp => out.push_str("emp"),
                EndpointProtocol::Send { event, payload } => {
                    out.push_str(&format!("!{event}"));
                    if let Some(d) = payload {
                        out.push_str(&format!("[{}: {}]", d.channel, d.protocol.render()));
                    }
                }
                EndpointProtocol::Recv { event, payload } => {
                    out.push_str(&format!("?{event}"));
                    if let Some(d) = payload {
                        out.push_str(&format!("[{}: {}]", d.channel, d.protocol.render()));
                    }
                }
                EndpointProtocol::Guard { event } => {
                    out.push_str(&format!("guard({event})"));
                }
                EndpointProtocol::Seq(l, r) => {
                    go(l, out);
                    out.push_str(" ; ");
                    if matches!(**r, EndpointProtocol::Seq(..)) {
                        out.push('(');
                        go(r, out);
                        out.push(')');
                    } else {
                        go(r, out);
                    }
                }
            }
        }
        let mut s = String::new();
        go(self, &mut s);
        s
    }

    /// Unit removal and left-associated chain flattening.
    pub fn normalize(&self) -> EndpointProtocol {
        fn collect(p: EndpointProtocol, parts: &mut Vec<EndpointProtocol>) {
            match p {
                EndpointProtocol::Emp => {}
                EndpointProtocol::Seq(l, r) => {
                    collect(*l, parts);
                    collect(*r, parts);
                }
                other => parts.push(other),
            }
        }
        let mut parts = Vec::new();
        collect(self.clone(), &mut parts);
        EndpointProtocol::seq_all(parts)
    }

    /// Splits into a flat list of atoms (normalized view of the Seq chain).
    pub fn atoms(&self) -> Vec<EndpointProtocol> {
        fn collect(p: &EndpointProtocol, parts: &mut Vec<EndpointProtocol>) {
            match p {
                EndpointProtocol::Emp => {}
                EndpointProtocol::Seq(l, r) => {
                    collect(l, parts);
                    collect(r, parts);
                }
                other => parts.push(other.clone()),
            }
        }
        let mut parts = Vec::new();
        collect(self, &mut parts);
        parts
    }

    pub fn is_emp(&self) -> bool {
        self.atoms().is_empty()
    }
}
