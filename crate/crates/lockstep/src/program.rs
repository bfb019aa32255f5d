//! Front end for the message-passing program subset.
//!
//! Accepted programs are single files shaped like Go: a `package main`
//! header, top-level channel declarations via `make(chan int, k)` (capacity
//! 0 when the capacity is omitted), and niladic function declarations whose
//! bodies contain only channel sends, channel receives, calls, and `go`
//! spawns. `main` may only spawn and call. Control flow, select, defer,
//! and undeclared channels are rejected with their line number.
//!
//! Party extraction resolves this to straight-line code per goroutine:
//! calls are inlined, and every spawned function (transitively) that
//! communicates becomes a party named after the function.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::protocol::Party;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelDecl {
    pub name: String,
    pub capacity: u32,
    pub line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub body: Vec<Stmt>,
    pub line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stmt {
    pub kind: StmtKind,
    pub line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StmtKind {
    Send { channel: String, payload: Payload },
    Recv { channel: String },
    Spawn { function: String },
    Call { function: String },
}

/// What a send puts on the channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// Plain data; the text is kept for display only.
    Value(String),
    /// A declared channel, i.e. endpoint delegation.
    ChannelRef(String),
}

impl fmt::Display for Stmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            StmtKind::Send { channel, payload: Payload::Value(v) } => {
                write!(f, "{channel} <- {v}")
            }
            StmtKind::Send { channel, payload: Payload::ChannelRef(d) } => {
                write!(f, "{channel} <- {d}")
            }
            StmtKind::Recv { channel } => write!(f, "<-{channel}"),
            StmtKind::Spawn { function } => write!(f, "go {function}()"),
            StmtKind::Call { function } => write!(f, "{function}()"),
        }
    }
}

/// A parsed program: channels in declaration order, functions in
/// definition order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub channels: Vec<ChannelDecl>,
    pub functions: Vec<Function>,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelDecl> {
        self.channels.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("{line}: {msg}")]
    Syntax { line: u32, msg: String },
    #[error("{line}: unsupported construct `{what}`")]
    Unsupported { line: u32, what: String },
    #[error("{line}: channel {name} is not declared")]
    UndeclaredChannel { line: u32, name: String },
    #[error("{line}: function {name} is not defined")]
    UndefinedFunction { line: u32, name: String },
    #[error("channel {name} is declared more than once")]
    DuplicateChannel { name: String },
    #[error("function {name} is defined more than once")]
    DuplicateFunction { name: String },
    #[error("program has no func main")]
    NoMain,
    #[error("{line}: main may only spawn or call functions")]
    MainCommunicates { line: u32 },
    #[error("{line}: call cycle through {name}")]
    RecursiveCall { line: u32, name: String },
    #[error("{line}: {name} both communicates and spawns; parties must be straight-line")]
    SpawnInParty { line: u32, name: String },
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parses a program and checks its structural obligations: every used
/// channel is declared, every spawned or called function is defined, main
/// exists and only spawns or calls.
pub fn parse_program(src: &str) -> Result<Program, ProgramError> {
    let mut channels: Vec<ChannelDecl> = Vec::new();
    let mut functions: Vec<Function> = Vec::new();
    let mut current: Option<Function> = None;
    let mut saw_package = false;

    for (i, raw) in src.lines().enumerate() {
        let line = (i + 1) as u32;
        let text = match raw.find("//") {
            Some(at) => &raw[..at],
            None => raw,
        };
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        let syntax = |msg: &str| ProgramError::Syntax { line, msg: msg.to_string() };

        if !saw_package {
            if text == "package main" {
                saw_package = true;
                continue;
            }
            return Err(syntax("expected `package main`"));
        }

        if let Some(f) = &mut current {
            if text == "}" {
                functions.push(current.take().unwrap());
                continue;
            }
            let kind = parse_stmt(text, line)?;
            f.body.push(Stmt { kind, line });
            continue;
        }

        if let Some(rest) = text.strip_prefix("var ") {
            let (name, cap) = parse_channel_decl(rest).ok_or_else(|| {
                syntax("expected `var <name> = make(chan int)` or `var <name> = make(chan int, <cap>)`")
            })?;
            if channels.iter().any(|c| c.name == name) {
                return Err(ProgramError::DuplicateChannel { name });
            }
            channels.push(ChannelDecl { name, capacity: cap, line });
            continue;
        }

        if let Some(rest) = text.strip_prefix("func ") {
            let name = rest
                .strip_suffix("() {")
                .map(str::trim)
                .filter(|n| is_ident(n))
                .ok_or_else(|| syntax("expected `func <name>() {`"))?;
            if functions.iter().any(|f| f.name == name) {
                return Err(ProgramError::DuplicateFunction { name: name.to_string() });
            }
            current = Some(Function { name: name.to_string(), body: Vec::new(), line });
            continue;
        }

        return Err(syntax("expected a declaration"));
    }
    if let Some(f) = current {
        return Err(ProgramError::Syntax {
            line: src.lines().count() as u32,
            msg: format!("unclosed body of {}", f.name),
        });
    }
    if !saw_package {
        return Err(ProgramError::Syntax { line: 1, msg: "expected `package main`".into() });
    }

    let mut program = Program { channels, functions };
    classify_payloads(&mut program);
    check_references(&program)?;
    Ok(program)
}

fn parse_channel_decl(rest: &str) -> Option<(String, u32)> {
    let (name, init) = rest.split_once('=')?;
    let name = name.trim();
    if !is_ident(name) {
        return None;
    }
    let init = init.trim();
    let inner = init.strip_prefix("make(")?.strip_suffix(')')?;
    let mut parts = inner.splitn(2, ',');
    if parts.next()?.trim() != "chan int" {
        return None;
    }
    let cap = match parts.next() {
        None => 0,
        Some(n) => n.trim().parse().ok()?,
    };
    Some((name.to_string(), cap))
}

fn parse_stmt(text: &str, line: u32) -> Result<StmtKind, ProgramError> {
    for keyword in ["for", "if", "select", "switch", "defer", "return", "else"] {
        if text == keyword
            || text.starts_with(&format!("{keyword} "))
            || text.starts_with(&format!("{keyword}{{"))
        {
            return Err(ProgramError::Unsupported { line, what: keyword.to_string() });
        }
    }
    let syntax = |msg: String| ProgramError::Syntax { line, msg };

    if let Some(rest) = text.strip_prefix("go ") {
        let name = rest
            .trim()
            .strip_suffix("()")
            .filter(|n| is_ident(n))
            .ok_or_else(|| syntax("expected `go <function>()`".into()))?;
        return Ok(StmtKind::Spawn { function: name.to_string() });
    }
    if let Some(rest) = text.strip_prefix("<-") {
        let name = rest.trim();
        if !is_ident(name) {
            return Err(syntax("expected `<-<channel>`".into()));
        }
        return Ok(StmtKind::Recv { channel: name.to_string() });
    }
    if let Some((lhs, rhs)) = text.split_once(":=") {
        if !is_ident(lhs.trim()) {
            return Err(syntax("expected a variable name before `:=`".into()));
        }
        let rhs = rhs.trim();
        let name = rhs
            .strip_prefix("<-")
            .map(str::trim)
            .filter(|n| is_ident(n))
            .ok_or_else(|| syntax("only `<-<channel>` may follow `:=`".into()))?;
        return Ok(StmtKind::Recv { channel: name.to_string() });
    }
    if let Some((lhs, rhs)) = text.split_once("<-") {
        let channel = lhs.trim();
        let value = rhs.trim();
        if !is_ident(channel) || value.is_empty() {
            return Err(syntax("expected `<channel> <- <value>`".into()));
        }
        return Ok(StmtKind::Send {
            channel: channel.to_string(),
            payload: Payload::Value(value.to_string()),
        });
    }
    if let Some(name) = text.strip_suffix("()") {
        if is_ident(name) {
            return Ok(StmtKind::Call { function: name.to_string() });
        }
    }
    Err(ProgramError::Unsupported { line, what: text.to_string() })
}

/// Rewrites send payloads that name a declared channel into delegations.
fn classify_payloads(p: &mut Program) {
    let names: BTreeSet<String> = p.channels.iter().map(|c| c.name.clone()).collect();
    for f in &mut p.functions {
        for stmt in &mut f.body {
            if let StmtKind::Send { payload, .. } = &mut stmt.kind {
                if let Payload::Value(v) = payload {
                    if names.contains(v.as_str()) {
                        *payload = Payload::ChannelRef(v.clone());
                    }
                }
            }
        }
    }
}

fn check_references(p: &Program) -> Result<(), ProgramError> {
    for f in &p.functions {
        for stmt in &f.body {
            match &stmt.kind {
                StmtKind::Send { channel, .. } | StmtKind::Recv { channel } => {
                    if p.channel(channel).is_none() {
                        return Err(ProgramError::UndeclaredChannel {
                            line: stmt.line,
                            name: channel.clone(),
                        });
                    }
                    if f.name == "main" {
                        return Err(ProgramError::MainCommunicates { line: stmt.line });
                    }
                }
                StmtKind::Spawn { function } | StmtKind::Call { function } => {
                    if p.function(function).is_none() {
                        return Err(ProgramError::UndefinedFunction {
                            line: stmt.line,
                            name: function.clone(),
                        });
                    }
                }
            }
        }
    }
    if p.function("main").is_none() {
        return Err(ProgramError::NoMain);
    }
    Ok(())
}

/// One goroutine's straight-line communication code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartyCode {
    pub party: Party,
    /// Sends and receives only, in execution order.
    pub stmts: Vec<Stmt>,
}

/// Resolves the program to its communicating parties. Starting from main,
/// calls are inlined depth-first and spawns are followed transitively;
/// every reached function whose inlined body communicates becomes a party
/// named after the function. A function that both communicates and spawns
/// has no straight-line reading and is rejected, as is recursion.
pub fn extract_parties(p: &Program) -> Result<Vec<PartyCode>, ProgramError> {
    fn inline(
        p: &Program,
        name: &str,
        at: u32,
        stack: &mut Vec<String>,
        comm: &mut Vec<Stmt>,
        spawns: &mut Vec<(String, u32)>,
    ) -> Result<(), ProgramError> {
        if stack.iter().any(|n| n == name) {
            return Err(ProgramError::RecursiveCall { line: at, name: name.to_string() });
        }
        let f = p
            .function(name)
            .ok_or_else(|| ProgramError::UndefinedFunction { line: at, name: name.to_string() })?;
        stack.push(name.to_string());
        for stmt in &f.body {
            match &stmt.kind {
                StmtKind::Send { .. } | StmtKind::Recv { .. } => comm.push(stmt.clone()),
                StmtKind::Spawn { function } => spawns.push((function.clone(), stmt.line)),
                StmtKind::Call { function } => {
                    inline(p, function, stmt.line, stack, comm, spawns)?
                }
            }
        }
        stack.pop();
        Ok(())
    }

    if p.function("main").is_none() {
        return Err(ProgramError::NoMain);
    }
    let mut queue = VecDeque::from(["main".to_string()]);
    let mut seen = BTreeSet::new();
    let mut parties = Vec::new();
    while let Some(name) = queue.pop_front() {
        if !seen.insert(name.clone()) {
            continue;
        }
        let mut comm = Vec::new();
        let mut spawns = Vec::new();
        let at = p.function(&name).map(|f| f.line).unwrap_or(0);
        inline(p, &name, at, &mut Vec::new(), &mut comm, &mut spawns)?;
        for (f, _) in &spawns {
            queue.push_back(f.clone());
        }
        if !comm.is_empty() {
            if let Some((_, line)) = spawns.first() {
                return Err(ProgramError::SpawnInParty { line: *line, name });
            }
            parties.push(PartyCode { party: Party::new(name), stmts: comm });
        }
    }
    parties.sort_by(|a, b| a.party.cmp(&b.party));
    Ok(parties)
}

#[cfg(test)]
mod tests {
    use super::*;

    const VERIFIED: &str = "\
package main

var c = make(chan int, 2)
var d = make(chan int)
var e = make(chan int)

func A() {
	c <- 1
	d <- 0
}

func B() {
	<-c
	<-d
	e <- 0
	c <- 2
}

func C() {
	<-e
	<-c
}

func main() {
	go A()
	go B()
	go C()
}
";

    #[test]
    fn parses_channels_in_declaration_order() {
        let p = parse_program(VERIFIED).unwrap();
        let decls: Vec<(String, u32)> =
            p.channels.iter().map(|c| (c.name.clone(), c.capacity)).collect();
        assert_eq!(
            decls,
            [("c".into(), 2), ("d".into(), 0), ("e".into(), 0)]
        );
        assert_eq!(p.functions.len(), 4);
        assert_eq!(p.function("A").unwrap().body.len(), 2);
    }

    #[test]
    fn extracts_spawned_communicating_functions_as_parties() {
        let p = parse_program(VERIFIED).unwrap();
        let parties = extract_parties(&p).unwrap();
        let summary: Vec<(String, usize)> = parties
            .iter()
            .map(|pc| (pc.party.to_string(), pc.stmts.len()))
            .collect();
        assert_eq!(
            summary,
            [("A".into(), 2), ("B".into(), 4), ("C".into(), 2)]
        );
        assert_eq!(parties[0].stmts[0].to_string(), "c <- 1");
        assert_eq!(parties[2].stmts[0].to_string(), "<-e");
    }

    #[test]
    fn calls_are_inlined_into_the_caller() {
        let src = "\
package main
var c = make(chan int)
func helper() {
	c <- 1
}
func A() {
	helper()
	<-c
}
func main() {
	go A()
}
";
        let parties = extract_parties(&parse_program(src).unwrap()).unwrap();
        assert_eq!(parties.len(), 1);
        let stmts: Vec<String> = parties[0].stmts.iter().map(Stmt::to_string).collect();
        assert_eq!(stmts, ["c <- 1", "<-c"]);
    }

    #[test]
    fn main_calling_communicating_code_is_itself_a_party() {
        let src = "\
package main
var c = make(chan int, 1)
func fill() {
	c <- 1
}
func drain() {
	<-c
}
func main() {
	fill()
	drain()
}
";
        let parties = extract_parties(&parse_program(src).unwrap()).unwrap();
        let names: Vec<String> = parties.iter().map(|pc| pc.party.to_string()).collect();
        assert_eq!(names, ["main"]);
        assert_eq!(parties[0].stmts.len(), 2);
    }

    #[test]
    fn main_mixing_spawns_and_communication_is_rejected() {
        let src = "\
package main
var c = make(chan int)
func work() {
	<-c
}
func A() {
	c <- 1
}
func main() {
	go A()
	work()
}
";
        let err = extract_parties(&parse_program(src).unwrap()).unwrap_err();
        assert!(matches!(err, ProgramError::SpawnInParty { name, .. } if name == "main"));
    }

    #[test]
    fn transitive_spawns_are_followed() {
        let src = "\
package main
var c = make(chan int)
func boot() {
	go A()
	go B()
}
func A() {
	c <- 1
}
func B() {
	<-c
}
func main() {
	go boot()
}
";
        let parties = extract_parties(&parse_program(src).unwrap()).unwrap();
        let names: Vec<String> = parties.iter().map(|pc| pc.party.to_string()).collect();
        assert_eq!(names, ["A", "B"]);
    }

    #[test]
    fn recursion_is_rejected() {
        let src = "\
package main
var c = make(chan int)
func A() {
	c <- 1
	A()
}
func main() {
	go A()
}
";
        let err = extract_parties(&parse_program(src).unwrap()).unwrap_err();
        assert!(matches!(err, ProgramError::RecursiveCall { name, .. } if name == "A"));
    }

    #[test]
    fn communicating_spawner_is_rejected() {
        let src = "\
package main
var c = make(chan int)
func A() {
	c <- 1
	go B()
}
func B() {
	<-c
}
func main() {
	go A()
}
";
        let err = extract_parties(&parse_program(src).unwrap()).unwrap_err();
        assert!(matches!(err, ProgramError::SpawnInParty { name, .. } if name == "A"));
    }

    #[test]
    fn undeclared_channel_is_rejected_with_line() {
        let src = "\
package main
func A() {
	c <- 1
}
func main() {
	go A()
}
";
        let err = parse_program(src).unwrap_err();
        assert!(matches!(err, ProgramError::UndeclaredChannel { line: 3, ref name } if name == "c"));
    }

    #[test]
    fn control_flow_is_rejected() {
        let src = "\
package main
var c = make(chan int)
func A() {
	for {
	}
}
func main() {
	go A()
}
";
        let err = parse_program(src).unwrap_err();
        assert!(matches!(err, ProgramError::Unsupported { ref what, .. } if what == "for"));
    }

    #[test]
    fn main_must_not_communicate_directly() {
        let src = "\
package main
var c = make(chan int)
func main() {
	c <- 1
}
";
        let err = parse_program(src).unwrap_err();
        assert!(matches!(err, ProgramError::MainCommunicates { line: 4 }));
    }

    #[test]
    fn sends_of_declared_channels_are_delegations() {
        let src = "\
package main
var c = make(chan int)
var d = make(chan int)
func A() {
	c <- d
	c <- x
}
func main() {
	go A()
}
";
        let p = parse_program(src).unwrap();
        let body = &p.function("A").unwrap().body;
        assert_eq!(
            body[0].kind,
            StmtKind::Send { channel: "c".into(), payload: Payload::ChannelRef("d".into()) }
        );
        assert_eq!(
            body[1].kind,
            StmtKind::Send { channel: "c".into(), payload: Payload::Value("x".into()) }
        );
    }

    #[test]
    fn receive_bindings_parse_as_receives() {
        let src = "\
package main
var c = make(chan int)
func A() {
	x := <-c
}
func main() {
	go A()
}
";
        let p = parse_program(src).unwrap();
        assert_eq!(p.function("A").unwrap().body[0].kind, StmtKind::Recv { channel: "c".into() });
    }

    #[test]
    fn structural_errors_are_reported() {
        assert!(matches!(
            parse_program("var c = make(chan int)").unwrap_err(),
            ProgramError::Syntax { line: 1, .. }
        ));
        assert!(matches!(
            parse_program("package main\nfunc main() {\n}\nfunc main() {\n}").unwrap_err(),
            ProgramError::DuplicateFunction { .. }
        ));
        assert!(matches!(
            parse_program("package main\nvar c = make(chan int)\nvar c = make(chan int)")
                .unwrap_err(),
            ProgramError::DuplicateChannel { .. }
        ));
        assert!(matches!(
            parse_program("package main\nvar c = make(chan int)").unwrap_err(),
            ProgramError::NoMain
        ));
        assert!(matches!(
            parse_program("package main\nfunc A() {\n\tgo B()\n}\nfunc main() {\n}").unwrap_err(),
            ProgramError::UndefinedFunction { line: 3, .. }
        ));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let src = "\
// a pipeline
package main

var c = make(chan int, 1) // buffered

func A() {
	c <- 1 // fill the buffer
}

func main() {
	go A()
}
";
        let p = parse_program(src).unwrap();
        assert_eq!(p.channel("c").unwrap().capacity, 1);
        assert_eq!(p.function("A").unwrap().body.len(), 1);
    }
}
