//! Per-agent published state with monotone version stamps.

use nalgebra::Vector2;

use super::ConsensusSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub enum Phase {
    #[default]
    Init,
    /// X-update results.
    X,
    /// Z-update and dual results.
    Z,
    /// Time shift between MPC steps.
    Shift,
}

/// Lexicographic `(mpc_step, round, phase)` version of a published value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Stamp {
    pub mpc_step: u64,
    pub round: usize,
    pub phase: Phase,
}

impl Stamp {
    pub fn new(mpc_step: u64, round: usize, phase: Phase) -> Self {
        Self {
            mpc_step,
            round,
            phase,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSlot {
    /// Planned positions from the latest X-update.
    pub plan: Vec<Vector2<f64>>,
    pub consensus: ConsensusSet,
    pub plan_stamp: Stamp,
    pub consensus_stamp: Stamp,
}

/// Written only between phases, one slot per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedBoard {
    slots: Vec<AgentSlot>,
}

impl SharedBoard {
    pub fn new(slots: Vec<AgentSlot>) -> Self {
        Self { slots }
    }

    pub fn slots(&self) -> &[AgentSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Panics if a reader in a phase stamped `at` could see a value from that phase or later.
    pub fn assert_readable(&self, at: Stamp) {
        for (i, s) in self.slots.iter().enumerate() {
            assert!(
                s.plan_stamp < at && s.consensus_stamp < at,
                "agent {i} published ahead of {at:?}"
            );
        }
    }

    pub fn publish_plan(&mut self, agent: usize, plan: Vec<Vector2<f64>>, stamp: Stamp) {
        let slot = &mut self.slots[agent];
        assert!(stamp > slot.plan_stamp, "plan stamps must increase");
        slot.plan = plan;
        slot.plan_stamp = stamp;
    }

    pub fn publish_consensus(&mut self, agent: usize, set: ConsensusSet, stamp: Stamp) {
        let slot = &mut self.slots[agent];
        assert!(stamp > slot.consensus_stamp, "consensus stamps must increase");
        slot.consensus = set;
        slot.consensus_stamp = stamp;
    }

    pub(super) fn shift_all(&mut self, stamp: Stamp) {
        for slot in &mut self.slots {
            assert!(stamp > slot.consensus_stamp && stamp > slot.plan_stamp);
            slot.consensus.shift();
            if slot.plan.len() > 1 {
                slot.plan.rotate_left(1);
                let n = slot.plan.len();
                slot.plan[n - 1] = slot.plan[n - 2];
            }
            slot.consensus_stamp = stamp;
            slot.plan_stamp = stamp;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamps_order_lexicographically() {
        assert!(Stamp::new(0, 49, Phase::Z) < Stamp::new(1, 0, Phase::X));
        assert!(Stamp::new(1, 0, Phase::X) < Stamp::new(1, 0, Phase::Z));
        assert!(Stamp::new(1, 19, Phase::Z) < Stamp::new(1, 20, Phase::Shift));
        assert!(Stamp::new(1, 20, Phase::Shift) < Stamp::new(2, 0, Phase::X));
    }

    #[test]
    #[should_panic(expected = "plan stamps must increase")]
    fn stale_publish_panics() {
        let plans = vec![vec![Vector2::zeros(); 2]];
        let mut b = SharedBoard::new(vec![AgentSlot {
            plan: plans[0].clone(),
            consensus: ConsensusSet::from_plans(0, &plans),
            plan_stamp: Stamp::default(),
            consensus_stamp: Stamp::default(),
        }]);
        b.publish_plan(0, plans[0].clone(), Stamp::new(1, 0, Phase::X));
        b.publish_plan(0, plans[0].clone(), Stamp::new(1, 0, Phase::X));
    }
}
