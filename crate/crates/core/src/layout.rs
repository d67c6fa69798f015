//! Partitioning of ranks into named operation groups.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// A named, ordered set of ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub name: String,
    pub members: Vec<usize>,
}

/// Partition of `P` ranks into disjoint, non-empty groups plus a mapping of
/// every operation to exactly one group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    total_ranks: usize,
    groups: Vec<Group>,
    op_map: BTreeMap<String, usize>,
    group_of_rank: Vec<usize>,
}

impl GroupLayout {
    /// Builds a layout from explicit member lists.
    pub fn new<N, O>(total_ranks: usize, groups: Vec<(N, Vec<usize>)>, ops: &[(O, &str)]) -> Result<Self>
    where
        N: Into<String>,
        O: AsRef<str>,
    {
        if total_ranks == 0 {
            return Err(Error::invalid("layout needs at least one rank"));
        }
        let mut group_of_rank = vec![usize::MAX; total_ranks];
        let mut out = Vec::with_capacity(groups.len());
        for (gi, (name, members)) in groups.into_iter().enumerate() {
            let name = name.into();
            if members.is_empty() {
                return Err(Error::invalid(format!("group `{name}` is empty")));
            }
            if out.iter().any(|g: &Group| g.name == name) {
                return Err(Error::invalid(format!("group `{name}` defined twice")));
            }
            for &r in &members {
                if r >= total_ranks {
                    return Err(Error::invalid(format!(
                        "group `{name}` names rank {r} but the layout has {total_ranks} ranks"
                    )));
                }
                if group_of_rank[r] != usize::MAX {
                    return Err(Error::invalid(format!("rank {r} belongs to two groups")));
                }
                group_of_rank[r] = gi;
            }
            out.push(Group { name, members });
        }
        if let Some(r) = group_of_rank.iter().position(|&g| g == usize::MAX) {
            return Err(Error::invalid(format!("rank {r} is not in any group")));
        }
        let mut layout = GroupLayout {
            total_ranks,
            groups: out,
            op_map: BTreeMap::new(),
            group_of_rank,
        };
        for (op, group) in ops {
            layout.map_op(op.as_ref(), group)?;
        }
        Ok(layout)
    }

    /// Splits `0..P` into consecutive blocks of the given sizes.
    pub fn contiguous(sizes: &[(&str, usize)]) -> Result<Self> {
        let total: usize = sizes.iter().map(|(_, n)| n).sum();
        let mut next = 0;
        let groups = sizes
            .iter()
            .map(|&(name, n)| {
                let members = (next..next + n).collect();
                next += n;
                (name.to_string(), members)
            })
            .collect();
        Self::new::<String, &str>(total, groups, &[])
    }

    /// Every rank in a single group.
    pub fn single(total_ranks: usize, name: &str) -> Result<Self> {
        Self::contiguous(&[(name, total_ranks)])
    }

    /// Maps an operation to a group. Remapping an operation is rejected.
    pub fn map_op(&mut self, op: &str, group: &str) -> Result<()> {
        let gi = self.group_index(group)?;
        if let Some(&prev) = self.op_map.get(op) {
            if prev != gi {
                return Err(Error::invalid(format!(
                    "operation `{op}` already mapped to group `{}`",
                    self.groups[prev].name
                )));
            }
        }
        self.op_map.insert(op.to_string(), gi);
        Ok(())
    }

    pub fn with_op(mut self, op: &str, group: &str) -> Result<Self> {
        self.map_op(op, group)?;
        Ok(self)
    }

    pub fn total_ranks(&self) -> usize {
        self.total_ranks
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group_index(&self, name: &str) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g.name == name)
            .ok_or_else(|| Error::usage(format!("no group named `{name}`")))
    }

    pub fn group(&self, name: &str) -> Result<&Group> {
        Ok(&self.groups[self.group_index(name)?])
    }

    pub fn members(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.group(name)?.members)
    }

    pub fn group_of(&self, rank: usize) -> Option<&Group> {
        self.group_of_rank.get(rank).map(|&gi| &self.groups[gi])
    }

    pub fn group_for_op(&self, op: &str) -> Option<&Group> {
        self.op_map.get(op).map(|&gi| &self.groups[gi])
    }

    pub fn ops(&self) -> impl Iterator<Item = (&str, &str)> {
        self.op_map
            .iter()
            .map(|(op, &gi)| (op.as_str(), self.groups[gi].name.as_str()))
    }

    /// Fraction of all ranks that belong to `group`.
    pub fn alpha(&self, group: &str) -> Result<f64> {
        Ok(self.group(group)?.members.len() as f64 / self.total_ranks as f64)
    }

    /// Index of `rank` within its group's member list.
    pub fn index_in_group(&self, rank: usize) -> Option<usize> {
        self.group_of(rank)
            .and_then(|g| g.members.iter().position(|&r| r == rank))
    }
}

/// Number of ranks to dedicate to a decoupled operation: `round(alpha * P)`,
/// at least one, and leaving at least one rank for the rest.
pub fn decoupled_rank_count(total_ranks: usize, alpha: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0,1), got {alpha}")));
    }
    if total_ranks < 2 {
        return Err(Error::invalid("decoupling needs at least two ranks"));
    }
    let n = (alpha * total_ranks as f64).round() as usize;
    Ok(n.clamp(1, total_ranks - 1))
}
