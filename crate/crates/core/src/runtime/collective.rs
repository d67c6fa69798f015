//! Collectives over an explicit member list, built on point-to-point
//! messages. Every collective uses a binomial tree rooted at `members[0]`
//! with a fixed, rank-ascending combination order, so floating-point
//! reductions are reproducible across runs and variants.

use super::engine::Tag;
use super::rank::Rank;
use crate::codec::{fnv1a64, Reader, Writer};
use crate::error::{Error, Result};

type Combine<'a, R> = dyn FnMut(&mut R, Vec<u8>, Vec<u8>) -> Result<Vec<u8>> + 'a;

fn group_key(members: &[usize]) -> u64 {
    let mut bytes = Vec::with_capacity(members.len() * 8);
    for &m in members {
        bytes.extend_from_slice(&(m as u64).to_le_bytes());
    }
    fnv1a64(&bytes)
}

impl Rank<'_> {
    fn collective_setup(&mut self, members: &[usize]) -> Result<(usize, Tag)> {
        let idx = members
            .iter()
            .position(|&m| m == self.id())
            .ok_or_else(|| Error::usage(format!("rank {} is not a member of the collective", self.id())))?;
        let group = group_key(members);
        let seq = self.next_collective_seq(group);
        Ok((idx, Tag::Collective { group, seq }))
    }

    fn tree_reduce(
        &mut self,
        members: &[usize],
        idx: usize,
        tag: Tag,
        mut acc: Vec<u8>,
        combine: &mut Combine<'_, Self>,
    ) -> Result<Option<Vec<u8>>> {
        let n = members.len();
        let mut step = 1;
        while step < n {
            if idx.is_multiple_of(2 * step) {
                if idx + step < n {
                    let right = self.recv(tag, Some(members[idx + step]))?;
                    acc = combine(self, acc, right.body)?;
                }
            } else {
                self.send(members[idx - step], tag, acc)?;
                return Ok(None);
            }
            step *= 2;
        }
        Ok(Some(acc))
    }

    fn tree_bcast(&mut self, members: &[usize], idx: usize, tag: Tag, data: Option<Vec<u8>>) -> Result<Vec<u8>> {
        let n = members.len();
        let mut top = 1;
        while top < n {
            top *= 2;
        }
        let data = if idx == 0 {
            data.expect("root supplies the broadcast payload")
        } else {
            // receive from the parent: clear the lowest set bit of idx
            let parent = idx & (idx - 1);
            self.recv(tag, Some(members[parent]))?.body
        };
        // forward to children idx + s for every s below idx's lowest set bit
        let low = if idx == 0 { top } else { idx & idx.wrapping_neg() };
        let mut s = low / 2;
        while s >= 1 {
            if idx + s < n {
                self.send(members[idx + s], tag, data.clone())?;
            }
            s /= 2;
        }
        Ok(data)
    }

    /// Reduces byte payloads to `members[0]` with `combine(left, right)`.
    /// Returns the result on the root and `None` elsewhere.
    pub fn reduce_bytes(
        &mut self,
        members: &[usize],
        value: Vec<u8>,
        mut combine: impl FnMut(&mut Self, Vec<u8>, Vec<u8>) -> Result<Vec<u8>>,
    ) -> Result<Option<Vec<u8>>> {
        let (idx, tag) = self.collective_setup(members)?;
        self.tree_reduce(members, idx, tag, value, &mut combine)
    }

    /// Broadcasts `data` from `members[0]` to every member.
    pub fn bcast_bytes(&mut self, members: &[usize], data: Option<Vec<u8>>) -> Result<Vec<u8>> {
        let (idx, tag) = self.collective_setup(members)?;
        if idx == 0 && data.is_none() {
            return Err(Error::usage("broadcast root must supply data"));
        }
        self.tree_bcast(members, idx, tag, data)
    }

    pub fn allreduce_bytes(
        &mut self,
        members: &[usize],
        value: Vec<u8>,
        combine: impl FnMut(&mut Self, Vec<u8>, Vec<u8>) -> Result<Vec<u8>>,
    ) -> Result<Vec<u8>> {
        let reduced = self.reduce_bytes(members, value, combine)?;
        self.bcast_bytes(members, reduced)
    }

    pub fn barrier(&mut self, members: &[usize]) -> Result<()> {
        self.allreduce_bytes(members, Vec::new(), |_, _, _| Ok(Vec::new()))?;
        Ok(())
    }

    /// Sum of one `f64` per member, combined left-to-right up the tree.
    pub fn allreduce_sum_f64(&mut self, members: &[usize], value: f64) -> Result<f64> {
        let out = self.allreduce_bytes(members, value.to_le_bytes().to_vec(), |_, a, b| {
            let a = f64::from_le_bytes(a[..8].try_into().expect("8 bytes"));
            let b = f64::from_le_bytes(b[..8].try_into().expect("8 bytes"));
            Ok((a + b).to_le_bytes().to_vec())
        })?;
        Ok(f64::from_le_bytes(out[..8].try_into().expect("8 bytes")))
    }

    pub fn allreduce_sum_u64(&mut self, members: &[usize], value: u64) -> Result<u64> {
        let out = self.allreduce_bytes(members, value.to_le_bytes().to_vec(), |_, a, b| {
            let a = u64::from_le_bytes(a[..8].try_into().expect("8 bytes"));
            let b = u64::from_le_bytes(b[..8].try_into().expect("8 bytes"));
            Ok((a + b).to_le_bytes().to_vec())
        })?;
        Ok(u64::from_le_bytes(out[..8].try_into().expect("8 bytes")))
    }

    /// Gathers one variable-length block per member at `members[0]`, in
    /// member order.
    pub fn gatherv(&mut self, members: &[usize], block: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>> {
        let (idx, tag) = self.collective_setup(members)?;
        let mut w = Writer::new();
        w.u64(1);
        w.bytes(&block);
        let framed = self.tree_reduce(members, idx, tag, w.finish(), &mut |_, left, right| {
            // left holds blocks of lower member indices
            let mut l = Reader::new(&left);
            let mut r = Reader::new(&right);
            let (nl, nr) = (l.u64()?, r.u64()?);
            let mut w = Writer::new();
            w.u64(nl + nr);
            w.raw(l.rest());
            w.raw(r.rest());
            Ok(w.finish())
        })?;
        framed.map(|f| decode_blocks(&f)).transpose()
    }

    /// Every member receives every member's block, in member order.
    pub fn allgatherv(&mut self, members: &[usize], block: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        let gathered = self.gatherv(members, block)?;
        let framed = gathered.map(|blocks| {
            let mut w = Writer::new();
            w.u64(blocks.len() as u64);
            for b in &blocks {
                w.bytes(b);
            }
            w.finish()
        });
        let out = self.bcast_bytes(members, framed)?;
        decode_blocks(&out)
    }
}

fn decode_blocks(framed: &[u8]) -> Result<Vec<Vec<u8>>> {
    let mut r = Reader::new(framed);
    let n = r.u64()? as usize;
    (0..n).map(|_| r.bytes().map(<[u8]>::to_vec)).collect()
}
