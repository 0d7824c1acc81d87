//! Schedule linting over text dumps: a frame dump (see
//! [`crate::slotframe::dump_frames`]) and a channel-plan table (see
//! [`crate::channels::ChannelPlan::to_table`]).

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::channels::{validate_channel_plan, ChannelPlan, Violation};
use crate::slotframe::{lint_frame, lint_pairs, parse_frames, FrameViolation, SlotframeError};
use crate::topology::{Dodag, NodeId, RankRule, TopologyError};

#[derive(Debug, Error)]
pub enum LintError {
    #[error("frame dump: {0}")]
    Frames(#[from] SlotframeError),
    #[error("plan dump: {0}")]
    Plan(String),
    #[error("plan dump: {0}")]
    Topology(#[from] TopologyError),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LintReport {
    pub channel: Vec<Violation>,
    pub frames: Vec<FrameViolation>,
}

impl LintReport {
    pub fn is_clean(&self) -> bool {
        self.channel.is_empty() && self.frames.is_empty()
    }
}

impl fmt::Display for LintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.channel {
            writeln!(f, "channel: {v}")?;
        }
        for v in &self.frames {
            writeln!(f, "frame: {v}")?;
        }
        Ok(())
    }
}

/// Splits a parent map into one DODAG per root.
pub fn dodags_from_parents(
    parents: &BTreeMap<NodeId, NodeId>,
    max_children: usize,
) -> Result<Vec<Dodag>, TopologyError> {
    let root_of = |mut n: NodeId| -> Result<NodeId, TopologyError> {
        for _ in 0..=parents.len() {
            match parents.get(&n) {
                Some(&p) => n = p,
                None => return Ok(n),
            }
        }
        Err(TopologyError::Invalid(format!(
            "parent cycle through node {n}"
        )))
    };
    let mut groups: BTreeMap<NodeId, BTreeMap<NodeId, NodeId>> = BTreeMap::new();
    for (&c, &p) in parents {
        groups.entry(root_of(c)?).or_default().insert(c, p);
    }
    groups
        .into_iter()
        .map(|(root, map)| Dodag::from_parents(root, &map, RankRule::default(), max_children))
        .collect()
}

pub fn lint_dumps(frame_text: &str, plan_text: &str) -> Result<LintReport, LintError> {
    let frames = parse_frames(frame_text)?;
    let (plan, parents) = ChannelPlan::from_table(plan_text).map_err(LintError::Plan)?;
    let max_children = (plan.num_channels as usize).saturating_sub(3).max(1);
    let dodags = dodags_from_parents(&parents, max_children)?;

    let mut report = LintReport::default();
    for d in &dodags {
        report.channel.extend(validate_channel_plan(d, &plan));
    }
    for (n, sf) in &frames {
        let is_root = !parents.contains_key(n);
        report.frames.extend(lint_frame(sf, is_root, plan.f_bcast));
    }
    report.frames.extend(lint_pairs(&frames));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{allocate_channels, ViolationKind};
    use crate::slotframe::{build_gt_frames, dump_frames};
    use crate::topology::{build_dodag, seven_node_tree_links};

    fn dumps() -> (String, String, BTreeMap<NodeId, NodeId>, ChannelPlan) {
        let d = build_dodag(7, &seven_node_tree_links(), NodeId(0), 5).unwrap();
        let plan = allocate_channels(&d, 8).unwrap();
        let frames = build_gt_frames(&d, &plan, 32, 4).unwrap();
        (
            dump_frames(frames.values()),
            plan.to_table(d.parents()),
            d.parents().clone(),
            plan,
        )
    }

    #[test]
    fn clean_schedule_passes() {
        let (f, p, _, _) = dumps();
        let r = lint_dumps(&f, &p).unwrap();
        assert!(r.is_clean(), "{r}");
    }

    #[test]
    fn corrupted_sibling_is_reported() {
        let (f, _, parents, mut plan) = dumps();
        let siblings: Vec<NodeId> = parents
            .iter()
            .filter(|(_, p)| **p == NodeId(0))
            .map(|(c, _)| *c)
            .collect();
        let c = plan.to_children(siblings[0]).unwrap();
        plan.to_children.insert(siblings[1], c);
        let r = lint_dumps(&f, &plan.to_table(&parents)).unwrap();
        assert!(r
            .channel
            .iter()
            .any(|v| v.kind == ViolationKind::SiblingConflict));
        assert!(r.to_string().contains("SiblingConflict"));
    }

    #[test]
    fn empty_inputs_are_errors() {
        let (f, p, _, _) = dumps();
        assert!(lint_dumps("", &p).is_err());
        assert!(lint_dumps("# nothing\n", &p).is_err());
        assert!(lint_dumps(&f, "").is_err());
    }

    #[test]
    fn forest_split() {
        let parents: BTreeMap<NodeId, NodeId> = [(1, 0), (2, 0), (4, 3), (5, 4)]
            .iter()
            .map(|&(c, p)| (NodeId(c), NodeId(p)))
            .collect();
        let ds = dodags_from_parents(&parents, 5).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[1].root(), NodeId(3));
        assert_eq!(ds[1].hops(NodeId(5)), Some(2));
    }
}
