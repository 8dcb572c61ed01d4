//! Grouping plans: a labeled partition of a span's item positions.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanGroup {
    pub label: String,
    /// Item positions (0-based within the span), ascending.
    pub positions: Vec<usize>,
}

impl PlanGroup {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn start(&self) -> usize {
        self.positions[0]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingPlan {
    pub groups: Vec<PlanGroup>,
}

impl GroupingPlan {
    pub fn from_spans(spans: &[(usize, usize, &str)]) -> Self {
        GroupingPlan {
            groups: spans
                .iter()
                .map(|&(start, end, label)| PlanGroup {
                    label: label.to_string(),
                    positions: (start..end).collect(),
                })
                .collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(PlanGroup::len).collect()
    }

    /// Half-open `(start, end)` per group; meaningful for contiguous plans.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.groups
            .iter()
            .map(|g| (g.start(), g.start() + g.len()))
            .collect()
    }

    /// Groups are non-empty and together cover `0..n` exactly once.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for g in &self.groups {
            if g.is_empty() {
                return false;
            }
            for &p in &g.positions {
                if p >= n || std::mem::replace(&mut seen[p], true) {
                    return false;
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Partition of `0..n` into contiguous spans listed in order.
    pub fn is_contiguous_partition_of(&self, n: usize) -> bool {
        let mut next = 0;
        for g in &self.groups {
            if g.is_empty() {
                return false;
            }
            for (k, &p) in g.positions.iter().enumerate() {
                if p != next + k {
                    return false;
                }
            }
            next += g.len();
        }
        next == n
    }

    /// Merge group `from` into group `into`, keeping `into`'s label.
    fn merge(&mut self, from: usize, into: usize) {
        let moved = self.groups[from].positions.clone();
        self.groups[into].positions.extend(moved);
        self.groups[into].positions.sort_unstable();
        self.groups.remove(from);
    }
}

fn plan_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([0-9\s,.]+)\]\s*=\s*([^,\n\[\]]*)").expect("valid regex"))
}

/// Parse `[a..b]=label` / `[1, 4, 7..9]=label` entries (inclusive ranges).
///
/// Returns `None` when no entry is found or an entry is malformed. Groups
/// come back sorted by their first position; validity is checked separately.
pub fn parse_plan(reply: &str) -> Option<GroupingPlan> {
    let mut groups = Vec::new();
    for (i, cap) in plan_regex().captures_iter(reply).enumerate() {
        let mut positions = Vec::new();
        for part in cap[1].split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some((a, b)) = part.split_once("..") {
                let a: usize = a.trim().parse().ok()?;
                let b: usize = b.trim().trim_start_matches('=').parse().ok()?;
                if b < a {
                    return None;
                }
                positions.extend(a..=b);
            } else {
                positions.push(part.parse().ok()?);
            }
        }
        if positions.is_empty() {
            return None;
        }
        positions.sort_unstable();
        positions.dedup();
        let label = cap[2].trim().trim_matches(|c| c == '"' || c == '\'').trim();
        groups.push(PlanGroup {
            label: if label.is_empty() {
                format!("group {}", i + 1)
            } else {
                label.to_string()
            },
            positions,
        });
    }
    if groups.is_empty() {
        return None;
    }
    groups.sort_by_key(PlanGroup::start);
    Some(GroupingPlan { groups })
}

/// Greedy left-to-right repair for contiguous plans: the first group smaller
/// than `min_group` merges into its smaller adjacent neighbour (left on ties),
/// until no undersized group remains or a single group is left.
pub fn repair_ordered(plan: &mut GroupingPlan, min_group: usize) {
    while plan.groups.len() > 1 {
        let Some(i) = plan.groups.iter().position(|g| g.len() < min_group) else {
            break;
        };
        let last = plan.groups.len() - 1;
        let into = if i == 0 {
            1
        } else if i == last || plan.groups[i - 1].len() <= plan.groups[i + 1].len() {
            i - 1
        } else {
            i + 1
        };
        plan.merge(i, into);
    }
}

/// Repair for order-free plans: undersized groups merge into the group whose
/// centroid is most similar. `similarity(a, b)` compares two position sets.
pub(crate) fn repair_unordered(
    plan: &mut GroupingPlan,
    min_group: usize,
    similarity: &dyn Fn(&[usize], &[usize]) -> f64,
) {
    while plan.groups.len() > 1 {
        let Some(i) = plan.groups.iter().position(|g| g.len() < min_group) else {
            break;
        };
        let mut best: Option<(usize, f64)> = None;
        for j in (0..plan.groups.len()).filter(|&j| j != i) {
            let s = similarity(&plan.groups[i].positions, &plan.groups[j].positions);
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((j, s));
            }
        }
        let (into, _) = best.expect("at least two groups");
        plan.merge(i, into);
        plan.groups.sort_by_key(PlanGroup::start);
    }
}

/// Reduce a plan to at most `max_groups` by merging the adjacent pair with
/// the smallest combined size (first such pair on ties).
pub(crate) fn cap_groups(plan: &mut GroupingPlan, max_groups: usize) {
    while plan.groups.len() > max_groups.max(1) {
        let i = (0..plan.groups.len() - 1)
            .min_by_key(|&i| plan.groups[i].len() + plan.groups[i + 1].len())
            .expect("at least two groups");
        let label = plan.groups[i].label.clone();
        plan.merge(i + 1, i);
        plan.groups[i].label = label;
    }
}

/// Uniform split of `n` items into `min(fan_out, n / min_group)` (at least 2)
/// near-equal contiguous groups; earlier groups take the remainder.
pub fn fallback_plan(n: usize, fan_out: usize, min_group: usize) -> GroupingPlan {
    let count = fan_out.min(n / min_group.max(1)).max(2).min(n.max(1));
    let base = n / count;
    let extra = n % count;
    let mut start = 0;
    let groups = (0..count)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let g = PlanGroup {
                label: format!("part {}", i + 1),
                positions: (start..start + len).collect(),
            };
            start += len;
            g
        })
        .collect();
    GroupingPlan { groups }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_form() {
        let plan = parse_plan("groups: [0..119]=demographics, [120..249]=pensions").unwrap();
        assert_eq!(plan.sizes(), vec![120, 130]);
        assert_eq!(plan.groups[0].label, "demographics");
        assert_eq!(plan.groups[1].label, "pensions");
        assert!(plan.is_contiguous_partition_of(250));
    }

    #[test]
    fn parses_sets_and_sorts_groups() {
        let plan = parse_plan("[4, 1..2]=b\n[0,3]=a").unwrap();
        assert_eq!(plan.groups[0].positions, vec![0, 3]);
        assert_eq!(plan.groups[1].positions, vec![1, 2, 4]);
        assert!(plan.is_partition_of(5));
        assert!(!plan.is_contiguous_partition_of(5));
    }

    #[test]
    fn garbage_is_none() {
        assert!(parse_plan("I could not decide.").is_none());
        assert!(parse_plan("[9..3]=backwards").is_none());
    }

    #[test]
    fn gaps_and_overlaps_are_not_partitions() {
        let gap = GroupingPlan::from_spans(&[(0, 5, "a"), (6, 10, "b")]);
        assert!(!gap.is_partition_of(10));
        let overlap = GroupingPlan::from_spans(&[(0, 6, "a"), (5, 10, "b")]);
        assert!(!overlap.is_partition_of(10));
    }

    #[test]
    fn repair_merges_into_smaller_neighbour() {
        let mut plan = GroupingPlan::from_spans(&[(0, 40, "a"), (40, 43, "b"), (43, 63, "c")]);
        repair_ordered(&mut plan, 10);
        assert_eq!(plan.spans(), vec![(0, 40), (40, 63)]);
        assert_eq!(plan.groups[1].label, "c");
    }

    #[test]
    fn cap_merges_smallest_adjacent_pair() {
        let mut plan =
            GroupingPlan::from_spans(&[(0, 10, "a"), (10, 30, "b"), (30, 35, "c"), (35, 40, "d")]);
        cap_groups(&mut plan, 3);
        assert_eq!(plan.spans(), vec![(0, 10), (10, 30), (30, 40)]);
        assert_eq!(plan.groups[2].label, "c");
    }

    #[test]
    fn fallback_is_uniform() {
        let plan = fallback_plan(250, 5, 10);
        assert_eq!(plan.sizes(), vec![50; 5]);
        let plan = fallback_plan(11, 5, 10);
        assert_eq!(plan.sizes(), vec![6, 5]);
        assert!(plan.is_contiguous_partition_of(11));
    }

    #[test]
    fn unordered_repair_uses_similarity() {
        let mut plan = GroupingPlan {
            groups: vec![
                PlanGroup { label: "a".into(), positions: vec![0, 2, 4, 6] },
                PlanGroup { label: "b".into(), positions: vec![1] },
                PlanGroup { label: "c".into(), positions: vec![3, 5, 7, 8] },
            ],
        };
        // position 1 is "closest" to the group containing 3
        let sim = |a: &[usize], b: &[usize]| -> f64 {
            if a.contains(&1) && b.contains(&3) { 1.0 } else { 0.0 }
        };
        repair_unordered(&mut plan, 2, &sim);
        assert_eq!(plan.groups.len(), 2);
        assert_eq!(plan.groups[1].positions, vec![1, 3, 5, 7, 8]);
    }
}
