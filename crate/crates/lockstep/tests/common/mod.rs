//! Shared test helper: a random generator of small guard-free protocols.

use proptest::prelude::*;

use lockstep::protocol::{Capacity, Channel, Global};

const PARTIES: [&str; 4] = ["A", "B", "C", "D"];
const CHANNELS: [&str; 2] = ["c", "d"];

/// Guard-free protocols with up to four transmissions over parties A to D
/// and channels c and d, each channel with a capacity from {0, 1, 2}.
/// Transmissions are composed by a left fold of `;` and `||`, so trees of
/// both shapes and mixtures appear.
pub fn arb_protocol() -> impl Strategy<Value = Global> {
    let transmission = (0..PARTIES.len(), 0..PARTIES.len() - 1, 0..CHANNELS.len());
    let caps = (0..3u32, 0..3u32);
    (prop::collection::vec((transmission, any::<bool>()), 1..=4), caps).prop_map(
        |(parts, (cap_c, cap_d))| {
            let caps = [cap_c, cap_d];
            let mut protocol: Option<Global> = None;
            for ((s, hop, ch), concurrent) in parts {
                let sender = PARTIES[s];
                let receiver = PARTIES[(s + 1 + hop) % PARTIES.len()];
                let channel = Channel::new(CHANNELS[ch], Capacity::Exact(caps[ch]));
                let t = Global::transmission(sender, channel, receiver);
                protocol = Some(match protocol {
                    None => t,
                    Some(p) if concurrent => Global::par(p, t),
                    Some(p) => Global::seq(p, t),
                });
            }
            protocol.expect("at least one transmission")
        },
    )
}
