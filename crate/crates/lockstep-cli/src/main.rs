//! Command-line driver.
//!
//! Exit codes: 0 when the command succeeds and finds nothing wrong, 1 when
//! verification or simulation finds violations, 2 for input errors.

mod diagram;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use lockstep::oracle::{
    brute_force_count, classify_race, count_protocols, count_vector, enumerate_executions,
    Enumeration, Execution, Simulation,
};
use lockstep::order::{derive_orders, CommTriple};
use lockstep::program::parse_program;
use lockstep::project::{project_endpoints, project_party, projection_context};
use lockstep::protocol::{Global, Party};
use lockstep::transform::insert_order_guards;
use lockstep::verify::{verify, PartyOutcome, VerifyReport};

#[derive(Parser)]
#[command(name = "lockstep", version, about = "Race analysis for message-passing programs")]
struct Cli {
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Output::Text)]
    output: Output,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Output {
    Text,
    Structured,
}

#[derive(Subcommand)]
enum Command {
    /// Verify a program against a global protocol.
    Verify {
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long)]
        program: PathBuf,
        /// Bind a protocol party to a program function, as PARTY=FUNCTION.
        #[arg(long = "bind", value_name = "PARTY=FUNCTION")]
        bind: Vec<String>,
    },
    /// Insert ordering guards so every channel delivers in protocol order.
    Transform {
        #[arg(long)]
        protocol: PathBuf,
    },
    /// Project a protocol onto one party, or onto one of its endpoints.
    Project {
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long)]
        party: String,
        /// Restrict the output to this channel's endpoint protocol.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Enumerate executions and classify each as race-free or racy.
    Simulate {
        #[arg(long)]
        protocol: PathBuf,
        /// Run this program's executions instead of the protocol's.
        #[arg(long)]
        program: Option<PathBuf>,
        #[arg(long = "bind", value_name = "PARTY=FUNCTION")]
        bind: Vec<String>,
        /// Maximum number of executions to collect.
        #[arg(long, default_value_t = 100)]
        bound: usize,
        /// Print only the n-th execution (1-based) as a raw trace dump.
        #[arg(long)]
        pick: Option<usize>,
    },
    /// Count the sequential protocols with a given number of transmissions.
    Count {
        #[arg(long)]
        n: u32,
        /// Cross-check the closed form against direct enumeration.
        #[arg(long)]
        brute_force: bool,
    },
    /// Render a protocol or a trace dump as a diagram.
    Render {
        #[arg(long, conflicts_with = "trace")]
        protocol: Option<PathBuf>,
        /// A trace dump file: events one per line, then `recv <- send` lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Dialect::Mermaid)]
        format: Dialect,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Dialect {
    Dot,
    Mermaid,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Report { text, violations }) => {
            print!("{text}");
            if violations {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

struct Report {
    text: String,
    violations: bool,
}

impl Report {
    fn clean(text: String) -> Report {
        Report { text, violations: false }
    }
}

type Error = Box<dyn std::error::Error>;

fn run(cli: &Cli) -> Result<Report, Error> {
    match &cli.command {
        Command::Verify { protocol, program, bind } => {
            cmd_verify(protocol, program, bind, cli.output)
        }
        Command::Transform { protocol } => cmd_transform(protocol, cli.output),
        Command::Project { protocol, party, endpoint } => {
            cmd_project(protocol, party, endpoint.as_deref(), cli.output)
        }
        Command::Simulate { protocol, program, bind, bound, pick } => {
            cmd_simulate(protocol, program.as_deref(), bind, *bound, *pick, cli.output)
        }
        Command::Count { n, brute_force } => cmd_count(*n, *brute_force, cli.output),
        Command::Render { protocol, trace, format } => {
            cmd_render(protocol.as_deref(), trace.as_deref(), *format)
        }
    }
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn load_protocol(path: &Path) -> Result<Global, Error> {
    Ok(Global::parse(&read(path)?)?)
}

fn parse_bindings(bind: &[String]) -> Result<BTreeMap<String, String>, Error> {
    let mut out = BTreeMap::new();
    for b in bind {
        let (party, function) = b
            .split_once('=')
            .ok_or_else(|| format!("binding `{b}` is not of the form PARTY=FUNCTION"))?;
        out.insert(party.to_string(), function.to_string());
    }
    Ok(out)
}

fn emit(value: &Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    text
}

// ---------------------------------------------------------------------------
// verify

fn cmd_verify(
    protocol: &Path,
    program: &Path,
    bind: &[String],
    output: Output,
) -> Result<Report, Error> {
    let g = load_protocol(protocol)?;
    let p = parse_program(&read(program)?)?;
    let report = verify(&g, &p, &parse_bindings(bind)?)?;
    let text = match output {
        Output::Text => verify_text(&report),
        Output::Structured => emit(&verify_json(&report)),
    };
    Ok(Report { text, violations: !report.success })
}

fn verify_text(report: &VerifyReport) -> String {
    let mut s = String::new();
    if !report.guard_bindings.is_empty() {
        let pairs: Vec<String> = report
            .guard_bindings
            .iter()
            .map(|(fresh, name)| format!("{fresh} -> {name}"))
            .collect();
        s.push_str(&format!("guard channels: {}\n\n", pairs.join(", ")));
    }
    for p in &report.parties {
        s.push_str(&format!("party {} (function {})\n", p.party, p.function));
        s.push_str(&format!("  entry {}\n", p.entry.render()));
        for step in &p.steps {
            s.push_str(&format!("  {}\n", step.stmt));
            s.push_str(&format!("    {}\n", step.after.render()));
        }
        match &p.outcome {
            PartyOutcome::Success => s.push_str("  ok\n"),
            PartyOutcome::FailPrecondition { line, stmt, reason } => {
                s.push_str(&format!("  FAIL at line {line} `{stmt}`: {reason}\n"));
            }
            PartyOutcome::FailUnconsumed => {
                s.push_str("  FAIL: protocol obligations left over\n");
            }
        }
        if !p.outcome.is_success() {
            s.push_str(&format!("  residue {}\n", p.residue.render()));
        }
        s.push('\n');
    }
    s.push_str(if report.success { "verdict: verified\n" } else { "verdict: FAILED\n" });
    s
}

fn verify_json(report: &VerifyReport) -> Value {
    let parties: Vec<Value> = report
        .parties
        .iter()
        .map(|p| {
            let steps: Vec<Value> = p
                .steps
                .iter()
                .map(|s| json!({ "stmt": s.stmt, "line": s.line, "after": s.after.render() }))
                .collect();
            let outcome = match &p.outcome {
                PartyOutcome::Success => json!({ "kind": "success" }),
                PartyOutcome::FailPrecondition { line, stmt, reason } => json!({
                    "kind": "precondition",
                    "line": line,
                    "stmt": stmt,
                    "reason": reason,
                }),
                PartyOutcome::FailUnconsumed => json!({ "kind": "unconsumed" }),
            };
            json!({
                "party": p.party.to_string(),
                "function": p.function,
                "entry": p.entry.render(),
                "steps": steps,
                "outcome": outcome,
                "residue": p.residue.render(),
                "final": p.final_assertion.render(),
            })
        })
        .collect();
    let guards: Vec<Value> = report
        .guard_bindings
        .iter()
        .map(|(fresh, name)| json!({ "fresh": fresh, "channel": name }))
        .collect();
    json!({ "success": report.success, "guard_channels": guards, "parties": parties })
}

// ---------------------------------------------------------------------------
// transform

fn cmd_transform(protocol: &Path, output: Output) -> Result<Report, Error> {
    let report = insert_order_guards(&load_protocol(protocol)?)?;
    let text = match output {
        Output::Text => {
            let mut s = format!("{}\n", report.output.render());
            for i in &report.inserted {
                s.push_str(&format!(
                    "inserted [{} < {}] between transmissions {} and {}\n",
                    i.lhs, i.rhs, i.between.0, i.between.1
                ));
            }
            for w in &report.warnings {
                s.push_str(&format!("warning: {w}\n"));
            }
            s
        }
        Output::Structured => {
            let inserted: Vec<Value> = report
                .inserted
                .iter()
                .map(|i| {
                    json!({
                        "guard": format!("[{} < {}]", i.lhs, i.rhs),
                        "between": [i.between.0.to_string(), i.between.1.to_string()],
                    })
                })
                .collect();
            let warnings: Vec<Value> =
                report.warnings.iter().map(|w| json!(w.to_string())).collect();
            emit(&json!({
                "protocol": report.output.render(),
                "inserted": inserted,
                "warnings": warnings,
            }))
        }
    };
    Ok(Report::clean(text))
}

// ---------------------------------------------------------------------------
// project

fn cmd_project(
    protocol: &Path,
    party: &str,
    endpoint: Option<&str>,
    output: Output,
) -> Result<Report, Error> {
    let g = load_protocol(protocol)?;
    let ctx = projection_context(&g)?;
    let party = Party::new(party);
    let text = match endpoint {
        Some(channel) => {
            let endpoints = project_endpoints(&ctx, &party)?;
            let (_, e) = endpoints
                .get(channel)
                .ok_or_else(|| format!("party {party} has no endpoint for channel {channel}"))?;
            match output {
                Output::Text => format!("{}\n", e.render()),
                Output::Structured => emit(&json!({
                    "party": party.to_string(),
                    "channel": channel,
                    "endpoint": e.render(),
                })),
            }
        }
        None => match output {
            Output::Text => format!("{}\n", project_party(&ctx, &party)?.render()),
            Output::Structured => {
                let endpoints = project_endpoints(&ctx, &party)?;
                let by_channel: Vec<Value> = endpoints
                    .iter()
                    .map(|(name, (_, e))| json!({ "channel": name, "endpoint": e.render() }))
                    .collect();
                emit(&json!({
                    "party": party.to_string(),
                    "protocol": project_party(&ctx, &party)?.render(),
                    "endpoints": by_channel,
                }))
            }
        },
    };
    Ok(Report::clean(text))
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(
    protocol: &Path,
    program: Option<&Path>,
    bind: &[String],
    bound: usize,
    pick: Option<usize>,
    output: Output,
) -> Result<Report, Error> {
    let g = load_protocol(protocol)?;
    let sim = match program {
        Some(path) => {
            let p = parse_program(&read(path)?)?;
            Simulation::from_program(&g, &p, &parse_bindings(bind)?)?
        }
        None => Simulation::from_protocol(&g)?,
    };
    let enumeration = enumerate_executions(&sim, bound);
    let intended = derive_orders(&g.clone().index_transmissions()?)?.comm;

    if let Some(n) = pick {
        let execution = enumeration
            .executions
            .get(n.checked_sub(1).ok_or("--pick is 1-based")?)
            .ok_or_else(|| format!("only {} executions", enumeration.executions.len()))?;
        return Ok(Report::clean(execution.dump()));
    }

    let racy = enumeration
        .executions
        .iter()
        .filter(|e| !classify_race(e, &intended).race_free)
        .count();
    let text = match output {
        Output::Text => simulate_text(&enumeration, &intended),
        Output::Structured => emit(&simulate_json(&enumeration, &intended)),
    };
    Ok(Report { text, violations: racy > 0 })
}

fn simulate_text(enumeration: &Enumeration, intended: &[CommTriple]) -> String {
    let mut s = String::new();
    let mut racy = 0;
    for (i, e) in enumeration.executions.iter().enumerate() {
        s.push_str(&format!("execution {}\n", i + 1));
        for line in e.dump().lines() {
            s.push_str(&format!("  {line}\n"));
        }
        let class = classify_race(e, intended);
        match class.witness {
            None => s.push_str("  race-free\n"),
            Some(w) => {
                racy += 1;
                s.push_str(&format!("  racy: {w}\n"));
            }
        }
        s.push('\n');
    }
    s.push_str(&format!(
        "{} executions, {racy} racy\n",
        enumeration.executions.len()
    ));
    if enumeration.deadlocked > 0 {
        s.push_str(&format!("{} deadlocked branches\n", enumeration.deadlocked));
    }
    if enumeration.truncated {
        s.push_str("bound reached; enumeration truncated\n");
    }
    s
}

fn simulate_json(enumeration: &Enumeration, intended: &[CommTriple]) -> Value {
    let executions: Vec<Value> = enumeration
        .executions
        .iter()
        .map(|e| {
            let class = classify_race(e, intended);
            json!({
                "trace": e.trace_line(),
                "matching": e.matching_line(),
                "starved": e.starved.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
                "race_free": class.race_free,
                "witness": class.witness.map(|w| w.to_string()),
            })
        })
        .collect();
    let racy = enumeration
        .executions
        .iter()
        .filter(|e| !classify_race(e, intended).race_free)
        .count();
    json!({
        "executions": executions,
        "racy": racy,
        "deadlocked": enumeration.deadlocked,
        "truncated": enumeration.truncated,
    })
}

// ---------------------------------------------------------------------------
// count

fn cmd_count(n: u32, brute_force: bool, output: Output) -> Result<Report, Error> {
    let total = count_protocols(n)?;
    let vector = count_vector(n)?;
    let brute = if brute_force { Some(brute_force_count(n)?) } else { None };
    let text = match output {
        Output::Text => {
            let mut s = format!("{n} -> {total}\n");
            let by_parties: Vec<String> = vector
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 0)
                .map(|(i, v)| format!("{} parties: {v}", i + 2))
                .collect();
            s.push_str(&format!("{}\n", by_parties.join(", ")));
            if let Some(b) = brute {
                s.push_str(&format!(
                    "brute force -> {b} ({})\n",
                    if b == total { "agrees" } else { "MISMATCH" }
                ));
            }
            s
        }
        Output::Structured => {
            let by_parties: BTreeMap<String, String> = vector
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 0)
                .map(|(i, v)| ((i + 2).to_string(), v.to_string()))
                .collect();
            emit(&json!({
                "n": n,
                "total": total.to_string(),
                "by_parties": by_parties,
                "brute_force": brute.map(|b| b.to_string()),
            }))
        }
    };
    let violations = brute.is_some_and(|b| b != total);
    Ok(Report { text, violations })
}

// ---------------------------------------------------------------------------
// render

fn cmd_render(
    protocol: Option<&Path>,
    trace: Option<&Path>,
    format: Dialect,
) -> Result<Report, Error> {
    let text = match (protocol, trace) {
        (Some(path), None) => {
            let g = load_protocol(path)?.index_transmissions()?;
            let orders = derive_orders(&g)?;
            match format {
                Dialect::Mermaid => diagram::protocol_mermaid(&orders),
                Dialect::Dot => diagram::protocol_dot(&orders),
            }
        }
        (None, Some(path)) => {
            let e = Execution::parse_dump(&read(path)?)?;
            match format {
                Dialect::Mermaid => diagram::execution_mermaid(&e),
                Dialect::Dot => diagram::execution_dot(&e),
            }
        }
        _ => return Err("render needs exactly one of --protocol or --trace".into()),
    };
    Ok(Report::clean(text))
}
