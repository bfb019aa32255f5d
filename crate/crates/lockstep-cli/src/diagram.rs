//! Diagram rendering for protocols and execution traces.
//!
//! Both dialects draw the same picture: one lifeline per party holding
//! that party's events top to bottom, solid edges for ordering within and
//! across parties, and dotted edges labelled with the channel for each
//! communication pairing. Output is deterministic: identical input yields
//! byte-identical text.

use std::collections::BTreeSet;

use lockstep::oracle::Execution;
use lockstep::order::{EdgeLabel, Orders};
use lockstep::protocol::{EventRef, Party};

struct View {
    /// Parties in first-appearance order, each with its events top to bottom.
    lanes: Vec<(Party, Vec<EventRef>)>,
    solid: Vec<(EventRef, EventRef)>,
    dotted: Vec<(EventRef, String, EventRef)>,
}

impl View {
    fn of_orders(orders: &Orders) -> View {
        let mut lanes: Vec<(Party, Vec<EventRef>)> = Vec::new();
        let mut seen = BTreeSet::new();
        for t in &orders.comm {
            for party in [&t.send.party, &t.recv.party] {
                if seen.insert(party.clone()) {
                    lanes.push((party.clone(), Vec::new()));
                }
            }
        }
        let events: BTreeSet<EventRef> = orders
            .comm
            .iter()
            .flat_map(|t| [t.send.clone(), t.recv.clone()])
            .collect();
        for (party, list) in &mut lanes {
            list.extend(events.iter().filter(|e| &e.party == party).cloned());
        }

        let mut solid = BTreeSet::new();
        for (from, to, label) in orders.order.edges() {
            let (a, b) = (from.atom().event, to.atom().event);
            if a == b {
                continue;
            }
            match label {
                EdgeLabel::ProgramOrder | EdgeLabel::Guard | EdgeLabel::Derived => {
                    solid.insert((a, b));
                }
                EdgeLabel::Channel(_) | EdgeLabel::CapacityRule(_) => {}
            }
        }
        let dotted = orders
            .comm
            .iter()
            .map(|t| (t.send.clone(), t.channel.name.clone(), t.recv.clone()))
            .collect();
        View { lanes, solid: solid.into_iter().collect(), dotted }
    }

    fn of_execution(e: &Execution) -> View {
        let mut lanes: Vec<(Party, Vec<EventRef>)> = Vec::new();
        for ev in &e.order {
            let party = &ev.atom.event.party;
            match lanes.iter_mut().find(|(p, _)| p == party) {
                Some((_, list)) => list.push(ev.atom.event.clone()),
                None => lanes.push((party.clone(), vec![ev.atom.event.clone()])),
            }
        }
        let mut solid = Vec::new();
        for (_, list) in &lanes {
            for pair in list.windows(2) {
                solid.push((pair[0].clone(), pair[1].clone()));
            }
        }
        let dotted = e
            .matching
            .iter()
            .map(|t| (t.send.clone(), t.channel.name.clone(), t.recv.clone()))
            .collect();
        View { lanes, solid, dotted }
    }
}

fn node_id(e: &EventRef) -> String {
    e.to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn mermaid(view: &View) -> String {
    let mut s = String::from("graph TD\n");
    for (party, events) in &view.lanes {
        s.push_str(&format!("  subgraph {party}\n"));
        for e in events {
            s.push_str(&format!("    {}[\"{e}\"]\n", node_id(e)));
        }
        s.push_str("  end\n");
    }
    for (a, b) in &view.solid {
        s.push_str(&format!("  {} --> {}\n", node_id(a), node_id(b)));
    }
    for (a, ch, b) in &view.dotted {
        s.push_str(&format!("  {} -. {ch} .-> {}\n", node_id(a), node_id(b)));
    }
    s
}

fn dot(view: &View) -> String {
    let mut s = String::from("digraph {\n  rankdir=TB;\n");
    for (i, (party, events)) in view.lanes.iter().enumerate() {
        s.push_str(&format!("  subgraph cluster_{i} {{\n    label=\"{party}\";\n"));
        for e in events {
            s.push_str(&format!("    \"{e}\";\n"));
        }
        s.push_str("  }\n");
    }
    for (a, b) in &view.solid {
        s.push_str(&format!("  \"{a}\" -> \"{b}\";\n"));
    }
    for (a, ch, b) in &view.dotted {
        s.push_str(&format!("  \"{a}\" -> \"{b}\" [style=dotted, label=\"{ch}\"];\n"));
    }
    s.push_str("}\n");
    s
}

pub fn protocol_mermaid(orders: &Orders) -> String {
    mermaid(&View::of_orders(orders))
}

pub fn protocol_dot(orders: &Orders) -> String {
    dot(&View::of_orders(orders))
}

pub fn execution_mermaid(e: &Execution) -> String {
    mermaid(&View::of_execution(e))
}

pub fn execution_dot(e: &Execution) -> String {
    dot(&View::of_execution(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lockstep::oracle::{enumerate_executions, Simulation};
    use lockstep::order::derive_orders;
    use lockstep::protocol::Global;

    fn orders_of(text: &str) -> Orders {
        let g = Global::parse(text).unwrap().index_transmissions().unwrap();
        derive_orders(&g).unwrap()
    }

    #[test]
    fn protocol_mermaid_shows_lifelines_and_edge_styles() {
        let m = protocol_mermaid(&orders_of("A -c-> B ; B -c-> C"));
        assert!(m.starts_with("graph TD\n"));
        assert!(m.contains("subgraph A\n"));
        assert!(m.contains("A_1[\"A.1\"]"));
        assert!(m.contains("B_1 --> B_2"));
        assert!(m.contains("A_1 -. c .-> B_1"));
        assert!(m.contains("B_2 -. c .-> C_2"));
    }

    #[test]
    fn protocol_dot_labels_pairings_with_the_channel() {
        let d = protocol_dot(&orders_of("A -c-> B ; B -c-> C"));
        assert!(d.contains("label=\"A\";"));
        assert!(d.contains("\"B.1\" -> \"B.2\";"));
        assert!(d.contains("\"A.1\" -> \"B.1\" [style=dotted, label=\"c\"];"));
    }

    #[test]
    fn empty_protocol_renders_headers_only() {
        assert_eq!(protocol_mermaid(&orders_of("emp")), "graph TD\n");
        assert_eq!(protocol_dot(&orders_of("emp")), "digraph {\n  rankdir=TB;\n}\n");
    }

    #[test]
    fn execution_diagram_follows_the_trace() {
        let g = Global::parse("A -c-> B ; B -c-> C").unwrap();
        let sim = Simulation::from_protocol(&g).unwrap();
        let racy = enumerate_executions(&sim, 100).executions.remove(1);
        let m = execution_mermaid(&racy);
        assert!(m.contains("A_1 -. c .-> C_2"));
        assert!(m.contains("B_1 --> B_2"));
        assert!(!m.contains("A_1 -. c .-> B_1"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = protocol_mermaid(&orders_of("A -c-> B ; B -d-> C || C -c-> A"));
        let b = protocol_mermaid(&orders_of("A -c-> B ; B -d-> C || C -c-> A"));
        assert_eq!(a, b);
    }
}
