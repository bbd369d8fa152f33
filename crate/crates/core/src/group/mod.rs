//! Finite rotation/flip groups of the square lattice.
//!
//! Every element is stored as an integer 2x2 matrix acting on centered
//! `(row, col)` coordinates; the Cayley table is derived from matrix products,
//! so `cayley[a][b]` is the element "apply `b`, then `a`". Rotations are
//! counter-clockwise (`(row, col) -> (n-1-col, row)`) and the flip is horizontal
//! (`(row, col) -> (row, n-1-col)`).

mod action;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use action::{apply_grid, GridAction, LabelAction};

/// The group vocabulary accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKind {
    /// Only the identity; used for the non-equivariant baseline.
    Trivial,
    /// Rotations by multiples of 90 degrees, |G| = 4.
    Rot4,
    /// 180 degree rotation and horizontal flip, |G| = 4.
    Rot2Flip,
    /// Dihedral group of the square, |G| = 8.
    Rot4Flip,
}

impl GroupKind {
    pub const ALL: [GroupKind; 4] = [
        GroupKind::Trivial,
        GroupKind::Rot4,
        GroupKind::Rot2Flip,
        GroupKind::Rot4Flip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupKind::Trivial => "trivial",
            GroupKind::Rot4 => "rot4",
            GroupKind::Rot2Flip => "rot2_flip",
            GroupKind::Rot4Flip => "rot4_flip",
        }
    }

    pub fn order(self) -> usize {
        match self {
            GroupKind::Trivial => 1,
            GroupKind::Rot4 | GroupKind::Rot2Flip => 4,
            GroupKind::Rot4Flip => 8,
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroupKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Group(format!("unknown group kind `{s}`")))
    }
}

/// Orthogonal integer matrix `[[a, b], [c, d]]` acting on `(y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Transform([[i8; 2]; 2]);

impl Transform {
    pub const IDENTITY: Transform = Transform([[1, 0], [0, 1]]);
    /// 90 degrees counter-clockwise: `(y, x) -> (-x, y)`.
    pub const ROT: Transform = Transform([[0, -1], [1, 0]]);
    /// Horizontal flip: `(y, x) -> (y, -x)`.
    pub const FLIP: Transform = Transform([[1, 0], [0, -1]]);

    /// `self * other`, i.e. apply `other` first.
    pub fn compose(self, other: Transform) -> Transform {
        let (a, b) = (self.0, other.0);
        let mut m = [[0i8; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Transform(m)
    }

    pub fn pow(self, k: usize) -> Transform {
        (0..k).fold(Transform::IDENTITY, |acc, _| self.compose(acc))
    }

    /// Image of `(row, col)` on an `n x n` grid.
    pub fn map_point(self, n: usize, row: usize, col: usize) -> (usize, usize) {
        // doubled centered coordinates stay integral for even n
        let c = n as i64 - 1;
        let y = 2 * row as i64 - c;
        let x = 2 * col as i64 - c;
        let m = self.0;
        let y2 = m[0][0] as i64 * y + m[0][1] as i64 * x;
        let x2 = m[1][0] as i64 * y + m[1][1] as i64 * x;
        (((y2 + c) / 2) as usize, ((x2 + c) / 2) as usize)
    }
}

/// A finite group given by its Cayley table, plus the lattice transform
/// realizing each element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiniteGroup {
    kind: Option<GroupKind>,
    names: Vec<String>,
    cayley: Vec<Vec<usize>>,
    inverse: Vec<usize>,
    identity: usize,
    transforms: Vec<Transform>,
}

fn element_name(rot: usize, flip: bool) -> String {
    let r = match rot {
        0 => String::new(),
        1 => "r".to_string(),
        k => format!("r{k}"),
    };
    match (r.is_empty(), flip) {
        (true, false) => "e".into(),
        (true, true) => "m".into(),
        (false, false) => r,
        (false, true) => format!("{r}m"),
    }
}

impl FiniteGroup {
    pub fn new(kind: GroupKind) -> Self {
        let elems: Vec<(usize, bool)> = match kind {
            GroupKind::Trivial => vec![(0, false)],
            GroupKind::Rot4 => (0..4).map(|r| (r, false)).collect(),
            GroupKind::Rot2Flip => vec![(0, false), (2, false), (0, true), (2, true)],
            GroupKind::Rot4Flip => [false, true]
                .into_iter()
                .flat_map(|f| (0..4).map(move |r| (r, f)))
                .collect(),
        };
        let transforms: Vec<Transform> = elems
            .iter()
            .map(|&(r, f)| {
                let m = if f { Transform::FLIP } else { Transform::IDENTITY };
                Transform::ROT.pow(r).compose(m)
            })
            .collect();
        let names = elems.iter().map(|&(r, f)| element_name(r, f)).collect();
        Self::from_transforms(Some(kind), names, transforms)
            .expect("built-in groups are closed under composition")
    }

    /// Builds a group from lattice transforms; fails if they are not closed.
    pub fn from_transforms(
        kind: Option<GroupKind>,
        names: Vec<String>,
        transforms: Vec<Transform>,
    ) -> Result<Self> {
        let n = transforms.len();
        let lookup = |t: Transform| {
            transforms
                .iter()
                .position(|&u| u == t)
                .ok_or_else(|| Error::Group(format!("transform set not closed: {t:?}")))
        };
        let mut cayley = vec![vec![0; n]; n];
        for a in 0..n {
            for b in 0..n {
                cayley[a][b] = lookup(transforms[a].compose(transforms[b]))?;
            }
        }
        let identity = lookup(Transform::IDENTITY)?;
        let inverse = (0..n)
            .map(|a| {
                (0..n)
                    .find(|&b| cayley[a][b] == identity)
                    .ok_or_else(|| Error::Group(format!("element {a} has no inverse")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            names,
            cayley,
            inverse,
            identity,
            transforms,
        })
    }

    pub fn kind(&self) -> Option<GroupKind> {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.cayley.len()
    }

    pub fn identity(&self) -> usize {
        self.identity
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, g: usize) -> &str {
        &self.names[g]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn cayley(&self) -> &[Vec<usize>] {
        &self.cayley
    }

    /// `a ∘ b` (apply `b` first).
    pub fn compose(&self, a: usize, b: usize) -> usize {
        self.cayley[a][b]
    }

    pub fn inverse(&self, a: usize) -> usize {
        self.inverse[a]
    }

    pub fn transform(&self, a: usize) -> Transform {
        self.transforms[a]
    }

    pub fn elements(&self) -> std::ops::Range<usize> {
        0..self.order()
    }

    /// Replaces the Cayley table without any validation. Intended for
    /// negative-control fixtures of the axiom checker.
    pub fn with_cayley_unchecked(mut self, cayley: Vec<Vec<usize>>) -> Self {
        self.cayley = cayley;
        self
    }

    /// Lists every violated group axiom (empty when the table is a group).
    pub fn axiom_violations(&self) -> Vec<String> {
        check_cayley_table(&self.cayley, self.identity, &self.inverse)
    }
}

/// Exhaustive group-axiom check: Latin square, identity row/column,
/// two-sided inverses and associativity over all |G|^3 triples.
pub fn check_cayley_table(cayley: &[Vec<usize>], identity: usize, inverse: &[usize]) -> Vec<String> {
    let n = cayley.len();
    let mut bad = Vec::new();
    if cayley.iter().any(|row| row.len() != n || row.iter().any(|&v| v >= n)) {
        bad.push("table is not an n x n table over 0..n".to_string());
        return bad;
    }
    for a in 0..n {
        let mut row_seen = vec![false; n];
        let mut col_seen = vec![false; n];
        for b in 0..n {
            row_seen[cayley[a][b]] = true;
            col_seen[cayley[b][a]] = true;
        }
        if row_seen.contains(&false) {
            bad.push(format!("row {a} is not a permutation"));
        }
        if col_seen.contains(&false) {
            bad.push(format!("column {a} is not a permutation"));
        }
    }
    if identity >= n {
        bad.push(format!("identity index {identity} out of range"));
        return bad;
    }
    for a in 0..n {
        if cayley[identity][a] != a || cayley[a][identity] != a {
            bad.push(format!("identity does not fix element {a}"));
        }
        match inverse.get(a) {
            Some(&inv) if inv < n && cayley[a][inv] == identity && cayley[inv][a] == identity => {}
            _ => bad.push(format!("element {a} lacks a two-sided inverse")),
        }
    }
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                if cayley[cayley[a][b]][c] != cayley[a][cayley[b][c]] {
                    bad.push(format!("associativity fails at ({a},{b},{c})"));
                }
            }
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rot4_is_cyclic() {
        let g = FiniteGroup::new(GroupKind::Rot4);
        let r = g.index_of("r").unwrap();
        let r2 = g.index_of("r2").unwrap();
        assert_eq!(g.compose(r, r), r2);
        let r4 = (0..4).fold(g.identity(), |acc, _| g.compose(r, acc));
        assert_eq!(r4, g.identity());
    }

    #[test]
    fn dihedral_relation_holds() {
        let g = FiniteGroup::new(GroupKind::Rot4Flip);
        let (r, m) = (g.index_of("r").unwrap(), g.index_of("m").unwrap());
        assert_eq!(g.compose(m, r), g.compose(g.inverse(r), m));
        assert_eq!(g.order(), 8);
    }

    #[test]
    fn orders_and_axioms() {
        for kind in GroupKind::ALL {
            let g = FiniteGroup::new(kind);
            assert_eq!(g.order(), kind.order());
            assert!(g.axiom_violations().is_empty(), "{kind}");
            assert_eq!(kind.name().parse::<GroupKind>().unwrap(), kind);
        }
        assert!("rot8".parse::<GroupKind>().is_err());
    }

    #[test]
    fn rot2_flip_is_klein() {
        let g = FiniteGroup::new(GroupKind::Rot2Flip);
        for a in g.elements() {
            assert_eq!(g.compose(a, a), g.identity());
            for b in g.elements() {
                assert_eq!(g.compose(a, b), g.compose(b, a));
            }
        }
    }

    #[test]
    fn corrupted_table_is_detected() {
        let g = FiniteGroup::new(GroupKind::Rot4);
        let mut table = g.cayley().to_vec();
        table[1][2] = 0;
        let bad = g.with_cayley_unchecked(table);
        assert!(!bad.axiom_violations().is_empty());
    }

    #[test]
    fn point_maps_follow_conventions() {
        assert_eq!(Transform::ROT.map_point(3, 0, 0), (2, 0));
        assert_eq!(Transform::ROT.map_point(3, 1, 2), (0, 1));
        assert_eq!(Transform::FLIP.map_point(4, 1, 0), (1, 3));
        assert_eq!(Transform::IDENTITY.map_point(5, 3, 4), (3, 4));
    }
}
