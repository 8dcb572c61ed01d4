use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::cache::hex;
use super::{BackendReply, ChatBackend};
use crate::error::Result;
use crate::protocol::{self, header, header_list};

/// Deterministic stand-in for a chat model.
///
/// Replies are derived from the prompt's `TASK:` and header lines with an RNG
/// seeded by the prompt hash, so identical prompts always get identical
/// replies. Plans are sometimes malformed or contain undersized groups and
/// boundary proposals are sometimes invalid, which exercises the repair paths.
#[derive(Clone, Debug, Default)]
pub struct SyntheticBackend {
    seed: u64,
}

impl SyntheticBackend {
    pub fn new(seed: u64) -> Self {
        SyntheticBackend { seed }
    }

    /// Reply for a prompt; exposed for inspection in tests.
    pub fn reply(&self, prompt: &str) -> String {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(prompt.as_bytes())
            .finalize();
        let tag = hex(&digest[..4]);
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let num = |name: &str| header(prompt, name).and_then(|v| v.parse::<usize>().ok());
        match protocol::task_of(prompt).unwrap_or_default() {
            protocol::WINDOW_SUMMARY => format!(
                "SUMMARY: items {} share topic {tag}.",
                header(prompt, "WINDOW").unwrap_or("?")
            ),
            protocol::TABLE_THEME => format!("THEME: topic {tag} progressing through {} items.", num("ITEMS").unwrap_or(0)),
            protocol::CONCEPTUAL_MAP => {
                let n = num("ITEMS").unwrap_or(0);
                let b = num("FANOUT").unwrap_or(2).max(2);
                let m = num("MIN-GROUP").unwrap_or(1).max(1);
                let ordered = header(prompt, "ORDERED") != Some("no");
                plan_reply(&mut rng, n, b, m, ordered)
            }
            protocol::BOUNDARY_REFINEMENT => {
                let m = num("MIN-GROUP").unwrap_or(1).max(1);
                let mut lines = Vec::new();
                for b in header_list(prompt, "BOUNDARIES") {
                    let Ok(b) = b.parse::<usize>() else { continue };
                    if rng.gen_bool(0.5) {
                        // occasionally far too large a move
                        let delta = if rng.gen_bool(0.2) { 3 * m } else { rng.gen_range(1..=m.div_ceil(2)) };
                        let to = if rng.gen_bool(0.5) { b + delta } else { b.saturating_sub(delta) };
                        lines.push(format!("MOVE {b} -> {to}"));
                    }
                }
                if lines.is_empty() {
                    "NONE".to_string()
                } else {
                    lines.join("\n")
                }
            }
            protocol::NODE_SUMMARY => format!(
                "SUMMARY: {} node about topic {tag}.",
                header(prompt, "LEVEL").unwrap_or("tree")
            ),
            protocol::SIBLING_RELATIONS => {
                let tags = header_list(prompt, "SIBLINGS");
                tags.windows(2)
                    .map(|w| format!("{} introduces concepts that {} builds on.", w[0], w[1]))
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            protocol::DIFFERENTIATION => {
                let mut out = format!("Summary: these columns share topic {tag} and differ in scope.\n");
                for (i, cid) in header_list(prompt, "MEMBERS").into_iter().enumerate() {
                    out.push_str(&format!("- cid {cid}: variant {} of topic {tag}.\n", i + 1));
                }
                out
            }
            protocol::SHORTLIST => {
                let keep = num("KEEP").unwrap_or(1);
                let cids = header_list(prompt, "CANDIDATES");
                format!("SHORTLIST: {}", cids[..keep.min(cids.len())].join(", "))
            }
            protocol::FORCED_CHOICE => {
                let first = header_list(prompt, "CANDIDATES").first().copied().unwrap_or("C1");
                format!("The first candidate fits best.\nANSWER: {first}")
            }
            _ => format!("SUMMARY: text {tag}."),
        }
    }
}

fn plan_reply(rng: &mut ChaCha8Rng, n: usize, b: usize, m: usize, ordered: bool) -> String {
    if n == 0 || rng.gen_bool(0.1) {
        return "I am not sure how to split these items.".to_string();
    }
    let max_groups = (n / m).max(1);
    let count = rng.gen_range(b.saturating_sub(1).max(2)..=b + 1).min(max_groups).max(1);
    if !ordered {
        let mut positions: Vec<usize> = (0..n).collect();
        positions.shuffle(rng);
        let mut groups = vec![Vec::new(); count];
        for (i, p) in positions.into_iter().enumerate() {
            groups[i % count].push(p.to_string());
        }
        return groups
            .into_iter()
            .enumerate()
            .map(|(g, members)| format!("[{}]=theme {}", members.join(", "), g + 1))
            .collect::<Vec<_>>()
            .join("\n");
    }
    let step = n as f64 / count as f64;
    let jitter = (step / 4.0) as i64;
    let mut cuts: Vec<usize> = (1..count)
        .map(|i| {
            let base = (i as f64 * step) as i64;
            let j = if jitter > 0 { rng.gen_range(-jitter..=jitter) } else { 0 };
            (base + j).clamp(1, n as i64 - 1) as usize
        })
        .collect();
    // sometimes an undersized sliver after the first cut
    if m > 1 && !cuts.is_empty() && rng.gen_bool(0.25) {
        let c = cuts[0] + m / 2;
        if c < n {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    cuts.dedup();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(n);
    bounds
        .windows(2)
        .enumerate()
        .map(|(g, w)| format!("[{}..{}]=section {}", w[0], w[1] - 1, g + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

impl ChatBackend for SyntheticBackend {
    fn id(&self) -> String {
        format!("synthetic:{}", self.seed)
    }

    fn complete(&self, prompt: &str, _timeout: Duration) -> Result<BackendReply> {
        let words = prompt.split_whitespace().count() as u64;
        Ok(BackendReply {
            text: self.reply(prompt),
            prompt_tokens: None,
            completion_tokens: None,
            simulated_latency: Some(Duration::from_millis(200 + words / 10)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{parse_plan, GroupingPlan};

    #[test]
    fn replies_are_deterministic() {
        let b = SyntheticBackend::new(7);
        let p = "TASK: node-summary\nLEVEL: leaf\nItems: a b c";
        assert_eq!(b.reply(p), b.reply(p));
        assert!(b.reply(p).starts_with("SUMMARY: leaf node"));
    }

    #[test]
    fn plans_are_parseable_partitions_most_of_the_time() {
        let b = SyntheticBackend::new(0);
        let mut valid = 0;
        for i in 0..50 {
            let p = format!("TASK: conceptual-map\nITEMS: 300\nFANOUT: 5\nMIN-GROUP: 10\nORDERED: yes\nrun {i}");
            if parse_plan(&b.reply(&p)).is_some_and(|plan: GroupingPlan| plan.is_contiguous_partition_of(300)) {
                valid += 1;
            }
        }
        assert!(valid >= 35, "{valid}");
    }

    #[test]
    fn forced_choice_names_first_candidate() {
        let b = SyntheticBackend::default();
        let reply = b.reply("TASK: forced-choice\nCANDIDATES: C4, C9\n...");
        assert!(reply.ends_with("ANSWER: C4"));
    }
}
