//! Cartesian process grids.

use crate::error::{Error, Result};

/// One of the six faces of a box, ordered `-x, +x, -y, +y, -z, +z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Face {
    MinusX,
    PlusX,
    MinusY,
    PlusY,
    MinusZ,
    PlusZ,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::MinusX, Face::PlusX, Face::MinusY, Face::PlusY, Face::MinusZ, Face::PlusZ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Face> {
        Face::ALL.get(i).copied()
    }

    pub fn axis(self) -> usize {
        self.index() / 2
    }

    pub fn is_positive(self) -> bool {
        self.index() % 2 == 1
    }

    pub fn opposite(self) -> Face {
        Face::ALL[self.index() ^ 1]
    }
}

impl std::fmt::Display for Face {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = ["-x", "+x", "-y", "+y", "-z", "+z"][self.index()];
        f.write_str(s)
    }
}

/// A `dims[0] x dims[1] x dims[2]` grid of ranks in row-major order
/// (z fastest).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridTopology {
    dims: [usize; 3],
}

impl GridTopology {
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("grid dims must be positive, got {dims:?}")));
        }
        Ok(GridTopology { dims })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn ranks(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn coords(&self, rank: usize) -> [usize; 3] {
        let [_, dy, dz] = self.dims;
        [rank / (dy * dz), (rank / dz) % dy, rank % dz]
    }

    pub fn rank_at(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Neighbor across `face`, or `None` at the domain boundary.
    pub fn neighbor(&self, rank: usize, face: Face) -> Option<usize> {
        let mut c = self.coords(rank);
        let a = face.axis();
        if face.is_positive() {
            if c[a] + 1 == self.dims[a] {
                return None;
            }
            c[a] += 1;
        } else {
            c[a] = c[a].checked_sub(1)?;
        }
        Some(self.rank_at(c))
    }

    /// Neighbor across `face` with periodic wrap.
    pub fn periodic_neighbor(&self, rank: usize, face: Face) -> usize {
        let mut c = self.coords(rank);
        let a = face.axis();
        let d = self.dims[a];
        c[a] = if face.is_positive() { (c[a] + 1) % d } else { (c[a] + d - 1) % d };
        self.rank_at(c)
    }
}

/// Balanced factorization of `n` into three dims, largest first.
pub fn dims_create(n: usize) -> Result<[usize; 3]> {
    if n == 0 {
        return Err(Error::invalid("cannot build a grid of zero ranks"));
    }
    let mut best = [n, 1, 1];
    let score = |d: &[usize; 3]| d[0] - d[2];
    for a in 1..=n {
        if !n.is_multiple_of(a) {
            continue;
        }
        for b in 1..=n / a {
            if !(n / a).is_multiple_of(b) {
                continue;
            }
            let mut d = [a, b, n / a / b];
            d.sort_unstable_by(|x, y| y.cmp(x));
            if score(&d) < score(&best) {
                best = d;
            }
        }
    }
    Ok(best)
}

/// Parses `X,Y,Z`.
pub fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::usage(format!("bad dims `{s}`: {e}")))?;
    let dims: [usize; 3] = parts
        .try_into()
        .map_err(|_| Error::usage(format!("dims `{s}` must have three entries")))?;
    GridTopology::new(dims)?;
    Ok(dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coords_round_trip() {
        let g = GridTopology::new([3, 4, 5]).unwrap();
        for r in 0..g.ranks() {
            assert_eq!(g.rank_at(g.coords(r)), r);
        }
        assert_eq!(g.coords(59), [2, 3, 4]);
    }

    #[test]
    fn neighbors_are_symmetric() {
        let g = GridTopology::new([2, 3, 2]).unwrap();
        for r in 0..g.ranks() {
            for f in Face::ALL {
                if let Some(n) = g.neighbor(r, f) {
                    assert_eq!(g.neighbor(n, f.opposite()), Some(r));
                }
                assert_eq!(g.periodic_neighbor(g.periodic_neighbor(r, f), f.opposite()), r);
            }
        }
        assert_eq!(g.neighbor(0, Face::MinusX), None);
        assert_eq!(g.periodic_neighbor(0, Face::MinusX), g.rank_at([1, 0, 0]));
        let one = GridTopology::new([1, 1, 1]).unwrap();
        assert!(Face::ALL.iter().all(|&f| one.neighbor(0, f).is_none()));
    }

    #[test]
    fn factorization() {
        assert_eq!(dims_create(8).unwrap(), [2, 2, 2]);
        assert_eq!(dims_create(64).unwrap(), [4, 4, 4]);
        assert_eq!(dims_create(30).unwrap(), [5, 3, 2]);
        assert_eq!(dims_create(7).unwrap(), [7, 1, 1]);
        assert_eq!(parse_dims("2, 3,4").unwrap(), [2, 3, 4]);
        assert!(parse_dims("2,3").is_err());
        assert!(parse_dims("0,1,1").is_err());
    }
}
