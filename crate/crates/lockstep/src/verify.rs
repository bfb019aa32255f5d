//! Per-party verification of programs against endpoint protocols.
//!
//! Each party's projected endpoint protocols become its entry assertion:
//! one remaining protocol per channel, plus the set of events the party
//! knows to have happened. Every send or receive statement consumes the
//! head of the matching endpoint protocol and records its event as known;
//! guards at the head of any endpoint are discharged eagerly as soon as
//! their event is known. A statement the assertion cannot justify stops
//! that party with a precondition failure; leftover protocol after the
//! last statement is an unconsumed failure. Residues are unprojected back
//! to a party protocol for reporting.
//!
//! Protocol channels bind to program channels by name and must agree on
//! capacity. Rendezvous channels inserted for guards have no protocol
//! name; they bind to the program's leftover capacity-0 channels in
//! declaration order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::program::{extract_parties, Payload, Program, ProgramError, Stmt, StmtKind};
use crate::project::{project_endpoints, projection_context, unproject, ProjectError};
use crate::protocol::{
    Capacity, Channel, EndpointProtocol, EventRef, Global, Kind, Party, PartyProtocol,
    ProtocolError, ProtocolEvent,
};

/// A party's verification state: remaining endpoint protocols by channel
/// and the events known to have happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assertion {
    pub endpoints: BTreeMap<String, EndpointProtocol>,
    pub known: BTreeSet<EventRef>,
}

impl Assertion {
    pub fn new(endpoints: BTreeMap<String, EndpointProtocol>) -> Self {
        Assertion { endpoints, known: BTreeSet::new() }
    }

    /// Pops every endpoint-head guard whose event is known. Eager: run
    /// after every step.
    fn prove_guards(&mut self) {
        for protocol in self.endpoints.values_mut() {
            let mut atoms = protocol.atoms();
            let mut at = 0;
            while let Some(EndpointProtocol::Guard { event }) = atoms.get(at) {
                if self.known.contains(event) {
                    at += 1;
                } else {
                    break;
                }
            }
            if at > 0 {
                *protocol = EndpointProtocol::seq_all(atoms.split_off(at));
            }
        }
    }

    fn all_consumed(&self) -> bool {
        self.endpoints.values().all(EndpointProtocol::is_emp)
    }

    /// One-line rendering: endpoint protocols in channel order, then the
    /// known events.
    pub fn render(&self) -> String {
        let mut out = String::from("{");
        for (i, (name, p)) in self.endpoints.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{name}: {}", p.render());
        }
        out.push('}');
        if !self.known.is_empty() {
            let known: Vec<String> = self.known.iter().map(EventRef::to_string).collect();
            let _ = write!(out, " knows {{{}}}", known.join(", "));
        }
        out
    }
}

/// Assertion state after one verified statement.
#[derive(Debug, Clone)]
pub struct StepSnapshot {
    pub stmt: String,
    pub line: u32,
    /// The protocol event the statement consumed, on the program-side
    /// channel.
    pub consumed: ProtocolEvent,
    pub after: Assertion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartyOutcome {
    Success,
    /// The statement at `line` is not justified by the current assertion.
    /// Verification of this party stops there.
    FailPrecondition { line: u32, stmt: String, reason: String },
    /// All statements verified but protocol remains unconsumed.
    FailUnconsumed,
}

impl PartyOutcome {
    pub fn is_success(&self) -> bool {
        *self == PartyOutcome::Success
    }
}

#[derive(Debug, Clone)]
pub struct PartyReport {
    /// Protocol party name.
    pub party: Party,
    /// Program function the party was bound to.
    pub function: String,
    pub entry: Assertion,
    pub steps: Vec<StepSnapshot>,
    pub outcome: PartyOutcome,
    /// Unconsumed endpoint protocols joined back into a party protocol;
    /// `emp` on success.
    pub residue: PartyProtocol,
    pub final_assertion: Assertion,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub parties: Vec<PartyReport>,
    pub success: bool,
    /// Fresh guard channels bound to program channels, in guard order.
    pub guard_bindings: Vec<(String, String)>,
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Project(#[from] ProjectError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error("binding names unknown protocol party {party}")]
    UnknownBindingParty { party: String },
    #[error("protocol party {party} is not implemented by any communicating function")]
    UnboundParty { party: Party },
    #[error("function {function} communicates but implements no protocol party")]
    UnboundFunction { function: String },
    #[error("two protocol parties are bound to function {function}")]
    DuplicateBinding { function: String },
    #[error("protocol channel {name} is not declared by the program")]
    MissingChannel { name: String },
    #[error("channel {name}: protocol capacity {expected} does not match program capacity {actual}")]
    CapacityMismatch { name: String, expected: Capacity, actual: u32 },
}

/// Runs one party's statements against its entry assertion. `channels`
/// supplies capacities for lifting residues back to a party protocol.
pub fn execute_party(
    party: Party,
    function: String,
    mut assertion: Assertion,
    stmts: &[Stmt],
    channels: &BTreeMap<String, Channel>,
) -> PartyReport {
    assertion.prove_guards();
    let entry = assertion.clone();
    let mut steps = Vec::new();
    let mut outcome = PartyOutcome::Success;

    for stmt in stmts {
        match step(&mut assertion, stmt) {
            Ok((event, kind, channel)) => {
                assertion.prove_guards();
                let channel = channels
                    .get(&channel)
                    .cloned()
                    .unwrap_or_else(|| Channel::new(channel, Capacity::Exact(0)));
                steps.push(StepSnapshot {
                    stmt: stmt.to_string(),
                    line: stmt.line,
                    consumed: ProtocolEvent { event, kind, channel },
                    after: assertion.clone(),
                });
            }
            Err(reason) => {
                outcome = PartyOutcome::FailPrecondition {
                    line: stmt.line,
                    stmt: stmt.to_string(),
                    reason,
                };
                break;
            }
        }
    }
    if outcome.is_success() && !assertion.all_consumed() {
        outcome = PartyOutcome::FailUnconsumed;
    }

    let residue_parts: Vec<(Channel, EndpointProtocol)> = assertion
        .endpoints
        .iter()
        .filter(|(_, p)| !p.is_emp())
        .map(|(name, p)| {
            let channel = channels
                .get(name)
                .cloned()
                .unwrap_or_else(|| Channel::new(name.clone(), Capacity::Exact(0)));
            (channel, p.clone())
        })
        .collect();
    let residue = unproject(&residue_parts);

    PartyReport { party, function, entry, steps, outcome, residue, final_assertion: assertion }
}

/// Applies one statement to the assertion, returning the consumed event,
/// or explains why it cannot.
fn step(assertion: &mut Assertion, stmt: &Stmt) -> Result<(EventRef, Kind, String), String> {
    let channel = match &stmt.kind {
        StmtKind::Send { channel, .. } | StmtKind::Recv { channel } => channel.clone(),
        StmtKind::Spawn { .. } | StmtKind::Call { .. } => {
            return Err("only sends and receives can be verified".to_string())
        }
    };
    let Some(protocol) = assertion.endpoints.get(&channel) else {
        return Err(format!("no endpoint protocol for channel {channel}"));
    };
    let mut atoms = protocol.atoms();
    if atoms.is_empty() {
        return Err(format!("endpoint protocol for channel {channel} is already consumed"));
    }
    let head = atoms.remove(0);
    let rest = EndpointProtocol::seq_all(atoms);

    match (&stmt.kind, head) {
        (StmtKind::Send { .. }, EndpointProtocol::Send { event, payload: None }) => {
            // A send of a channel value against a payload-free protocol
            // head is an ordinary data send.
            assertion.known.insert(event.clone());
            assertion.endpoints.insert(channel.clone(), rest);
            Ok((event, Kind::Send, channel))
        }
        (
            StmtKind::Send { payload: Payload::ChannelRef(sent), .. },
            EndpointProtocol::Send { event, payload: Some(delegated) },
        ) => {
            if delegated.channel.name != *sent {
                return Err(format!(
                    "endpoint {channel} delegates {}, but the statement sends {sent}",
                    delegated.channel
                ));
            }
            let held = assertion.endpoints.get(sent);
            if held.map(EndpointProtocol::normalize) != Some(delegated.protocol.normalize()) {
                return Err(format!(
                    "delegating {sent} requires holding its endpoint at {}",
                    delegated.protocol.render()
                ));
            }
            assertion.endpoints.remove(sent);
            assertion.known.insert(event.clone());
            assertion.endpoints.insert(channel.clone(), rest);
            Ok((event, Kind::Send, channel))
        }
        (
            StmtKind::Send { payload: Payload::Value(_), .. },
            EndpointProtocol::Send { payload: Some(delegated), .. },
        ) => Err(format!(
            "endpoint {channel} delegates {}, but the statement sends plain data",
            delegated.channel
        )),
        (StmtKind::Recv { .. }, EndpointProtocol::Recv { event, payload }) => {
            if let Some(delegated) = &payload {
                let name = &delegated.channel.name;
                if assertion.endpoints.get(name).is_some_and(|p| !p.is_emp()) {
                    return Err(format!("already holding an endpoint for {name}"));
                }
            }
            assertion.known.insert(event.clone());
            assertion.endpoints.insert(channel.clone(), rest);
            if let Some(delegated) = payload {
                assertion
                    .endpoints
                    .insert(delegated.channel.name.clone(), (*delegated.protocol).clone());
            }
            Ok((event, Kind::Recv, channel))
        }
        (_, head) => Err(format!("endpoint {channel} expects {}", head.render())),
    }
}

fn rename_party_channels(p: &PartyProtocol, renames: &BTreeMap<String, String>) -> PartyProtocol {
    let fix = |c: &Channel| match renames.get(&c.name) {
        Some(name) => Channel::new(name.clone(), c.capacity),
        None => c.clone(),
    };
    match p {
        PartyProtocol::Emp => PartyProtocol::Emp,
        PartyProtocol::Send { event, channel } => {
            PartyProtocol::Send { event: event.clone(), channel: fix(channel) }
        }
        PartyProtocol::Recv { channel, event } => {
            PartyProtocol::Recv { channel: fix(channel), event: event.clone() }
        }
        PartyProtocol::Guard { channel, event } => {
            PartyProtocol::Guard { channel: fix(channel), event: event.clone() }
        }
        PartyProtocol::Seq(l, r) => PartyProtocol::seq(
            rename_party_channels(l, renames),
            rename_party_channels(r, renames),
        ),
        PartyProtocol::Par(l, r) => PartyProtocol::par(
            rename_party_channels(l, renames),
            rename_party_channels(r, renames),
        ),
    }
}

/// Verifies a program against a global protocol. `bindings` maps protocol
/// party names to program function names; parties without an explicit
/// binding use the function of the same name.
pub fn verify(
    global: &Global,
    program: &Program,
    bindings: &BTreeMap<String, String>,
) -> Result<VerifyReport, VerifyError> {
    let ctx = projection_context(global)?;
    let protocol_parties = ctx.global.parties();
    for party in bindings.keys() {
        if !protocol_parties.contains(&Party::new(party.clone())) {
            return Err(VerifyError::UnknownBindingParty { party: party.clone() });
        }
    }

    let program_parties = extract_parties(program)?;

    // Protocol channels bind by name; capacities must be compatible.
    let protocol_channels = ctx.global.channels();
    for (name, cap) in &protocol_channels {
        let Some(decl) = program.channel(name) else {
            return Err(VerifyError::MissingChannel { name: name.clone() });
        };
        if let Capacity::Exact(k) = cap {
            if *k != decl.capacity {
                return Err(VerifyError::CapacityMismatch {
                    name: name.clone(),
                    expected: *cap,
                    actual: decl.capacity,
                });
            }
        }
    }

    // Fresh guard channels bind to leftover capacity-0 program channels in
    // declaration order. Unbound guard channels keep their fresh names and
    // can never be consumed.
    let spare: Vec<&str> = program
        .channels
        .iter()
        .filter(|c| !protocol_channels.contains_key(&c.name) && c.capacity == 0)
        .map(|c| c.name.as_str())
        .collect();
    let mut renames: BTreeMap<String, String> = BTreeMap::new();
    let mut guard_bindings = Vec::new();
    for (fresh, program_name) in ctx.guard_channels().iter().zip(spare) {
        renames.insert(fresh.name.clone(), program_name.to_string());
        guard_bindings.push((fresh.name.clone(), program_name.to_string()));
    }

    // Party binding: explicit first, then by name.
    let mut bound: BTreeMap<Party, String> = BTreeMap::new();
    let mut used: BTreeSet<String> = BTreeSet::new();
    for party in &protocol_parties {
        let function = bindings.get(&party.0).cloned().unwrap_or_else(|| party.0.clone());
        if program_parties.iter().all(|pc| pc.party.0 != function) {
            return Err(VerifyError::UnboundParty { party: party.clone() });
        }
        if !used.insert(function.clone()) {
            return Err(VerifyError::DuplicateBinding { function });
        }
        bound.insert(party.clone(), function);
    }
    for pc in &program_parties {
        if !used.contains(&pc.party.0) {
            return Err(VerifyError::UnboundFunction { function: pc.party.0.clone() });
        }
    }

    // Channel metadata on program-side names, for residues.
    let mut channel_meta: BTreeMap<String, Channel> = BTreeMap::new();
    for decl in &program.channels {
        channel_meta
            .insert(decl.name.clone(), Channel::new(decl.name.clone(), Capacity::Exact(decl.capacity)));
    }

    let mut parties = Vec::new();
    for (party, function) in &bound {
        let endpoints = project_endpoints(&ctx, party)?;
        let mut renamed: BTreeMap<String, EndpointProtocol> = BTreeMap::new();
        for (name, (_, protocol)) in endpoints {
            let name = renames.get(&name).cloned().unwrap_or(name);
            renamed.insert(name, protocol);
        }
        let stmts = &program_parties
            .iter()
            .find(|pc| pc.party.0 == *function)
            .expect("binding checked above")
            .stmts;
        parties.push(execute_party(
            party.clone(),
            function.clone(),
            Assertion::new(renamed),
            stmts,
            &channel_meta,
        ));
    }

    let success = parties.iter().all(|p| p.outcome.is_success());
    Ok(VerifyReport { parties, success, guard_bindings })
}

/// The residue of a party report with guard channels renamed to their
/// program-side names. Residues from [`verify`] are already program-side;
/// this helps when rendering contexts that kept fresh names.
pub fn rename_residue(residue: &PartyProtocol, renames: &BTreeMap<String, String>) -> PartyProtocol {
    rename_party_channels(residue, renames)
}
