use crate::{Error, Result};

/// How worker processes are placed onto cluster nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Policy {
    /// Round-robin: process `r` goes to node `r mod nodes`.
    #[default]
    ByNode,
    /// Fill each node's cores before moving on: node `floor(r / cores)`.
    BySlot,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bynode" => Ok(Policy::ByNode),
            "byslot" => Ok(Policy::BySlot),
            other => Err(Error::InvalidArgument(format!(
                "unknown scheduling policy `{other}` (expected bynode or byslot)"
            ))),
        }
    }
}

/// Placement of processes `0..P` onto node indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotAssignment {
    /// `(process rank, node index)`, ordered by rank.
    pub slots: Vec<(usize, usize)>,
}

impl SlotAssignment {
    pub fn nodes(&self) -> Vec<usize> {
        self.slots.iter().map(|&(_, n)| n).collect()
    }

    pub fn per_node_counts(&self, nodes: usize) -> Vec<usize> {
        let mut counts = vec![0; nodes];
        for &(_, n) in &self.slots {
            counts[n] += 1;
        }
        counts
    }
}

pub fn schedule_slots(
    nodes: usize,
    cores_per_node: usize,
    processes: usize,
    policy: Policy,
) -> Result<SlotAssignment> {
    if nodes == 0 || cores_per_node == 0 || processes == 0 {
        return Err(Error::InvalidArgument(format!(
            "nodes, cores per node and processes must all be at least 1 \
             (got {nodes}, {cores_per_node}, {processes})"
        )));
    }
    let capacity = nodes * cores_per_node;
    if processes > capacity {
        return Err(Error::Oversubscribed {
            processes,
            capacity,
        });
    }
    let slots = (0..processes)
        .map(|r| {
            let node = match policy {
                Policy::ByNode => r % nodes,
                Policy::BySlot => r / cores_per_node,
            };
            (r, node)
        })
        .collect();
    Ok(SlotAssignment { slots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Placement by explicit simulation of the two policies, independent of
    /// the closed forms used above.
    fn oracle(nodes: usize, cores: usize, procs: usize, policy: Policy) -> Vec<usize> {
        let mut free = vec![cores; nodes];
        let mut out = Vec::new();
        let mut cursor = 0;
        for _ in 0..procs {
            match policy {
                Policy::ByNode => {
                    out.push(cursor);
                    free[cursor] -= 1;
                    cursor = (cursor + 1) % nodes;
                }
                Policy::BySlot => {
                    while free[cursor] == 0 {
                        cursor += 1;
                    }
                    out.push(cursor);
                    free[cursor] -= 1;
                }
            }
        }
        out
    }

    #[test]
    fn worked_examples() {
        assert_eq!(schedule_slots(2, 4, 5, Policy::ByNode).unwrap().nodes(), [0, 1, 0, 1, 0]);
        assert_eq!(schedule_slots(2, 4, 5, Policy::BySlot).unwrap().nodes(), [0, 0, 0, 0, 1]);
        for p in [Policy::ByNode, Policy::BySlot] {
            assert_eq!(schedule_slots(1, 4, 4, p).unwrap().nodes(), [0, 0, 0, 0]);
        }
        assert_eq!(schedule_slots(2, 4, 4, Policy::BySlot).unwrap().nodes(), [0, 0, 0, 0]);
        assert_eq!(Policy::default(), Policy::ByNode);
    }

    #[test]
    fn oversubscription_and_degenerate_inputs() {
        assert!(matches!(
            schedule_slots(2, 4, 9, Policy::ByNode),
            Err(Error::Oversubscribed { processes: 9, capacity: 8 })
        ));
        assert!(schedule_slots(0, 4, 1, Policy::ByNode).is_err());
        assert!(schedule_slots(1, 0, 1, Policy::ByNode).is_err());
        assert!(schedule_slots(1, 1, 0, Policy::ByNode).is_err());
    }

    #[test]
    fn policy_parses() {
        assert_eq!("byslot".parse::<Policy>().unwrap(), Policy::BySlot);
        assert!("fill".parse::<Policy>().is_err());
    }

    fn arb_policy() -> impl Strategy<Value = Policy> {
        prop_oneof![Just(Policy::ByNode), Just(Policy::BySlot)]
    }

    proptest! {
        #[test]
        fn assignment_invariants(nodes in 1usize..12, cores in 1usize..12, frac in 0.0f64..1.0, policy in arb_policy()) {
            let cap = nodes * cores;
            let procs = 1 + ((cap - 1) as f64 * frac) as usize;
            let a = schedule_slots(nodes, cores, procs, policy).unwrap();
            let ranks: Vec<_> = a.slots.iter().map(|&(r, _)| r).collect();
            prop_assert_eq!(ranks, (0..procs).collect::<Vec<_>>());
            prop_assert!(a.per_node_counts(nodes).iter().all(|&c| c <= cores));
            prop_assert_eq!(a.nodes(), oracle(nodes, cores, procs, policy));
        }

        #[test]
        fn full_load_fills_every_core(nodes in 1usize..10, cores in 1usize..10, policy in arb_policy()) {
            let a = schedule_slots(nodes, cores, nodes * cores, policy).unwrap();
            prop_assert_eq!(a.per_node_counts(nodes), vec![cores; nodes]);
        }
    }
}
