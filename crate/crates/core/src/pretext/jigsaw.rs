use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PatchGrid;
use crate::error::{Error, Result};
use crate::group::{FiniteGroup, GridAction, GroupKind, LabelAction};
use crate::tensor::{Scalar, Tensor};

/// Candidates drawn per greedy step of the subset search.
pub const CANDIDATE_POOL: usize = 10_000;

/// A puzzle permutation: slot `k` shows the patch from grid cell `perm[k]`.
pub type Permutation = [u8; 9];

fn pack(p: &Permutation) -> u64 {
    p.iter().enumerate().fold(0, |acc, (i, &v)| acc | (v as u64) << (4 * i))
}

const NIBBLE_LOW: u64 = 0x1_1111_1111;

fn packed_hamming(a: u64, b: u64) -> u32 {
    let x = a ^ b;
    ((x | x >> 1 | x >> 2 | x >> 3) & NIBBLE_LOW).count_ones()
}

/// Number of slots where two permutations disagree.
pub fn hamming(a: &Permutation, b: &Permutation) -> u32 {
    packed_hamming(pack(a), pack(b))
}

fn check_puzzle(p: &[usize]) -> Result<Permutation> {
    crate::tensor::check_permutation(p, 9)?;
    let mut out = [0u8; 9];
    out.iter_mut().zip(p).for_each(|(o, &v)| *o = v as u8);
    Ok(out)
}

/// Permutation of the nine grid cells induced by element `g`.
pub fn grid_permutation(group: &FiniteGroup, g: usize) -> Permutation {
    let cells = GridAction::new(group, 3).expect("extent 3");
    let mut out = [0u8; 9];
    out.iter_mut()
        .zip(cells.forward_map(g))
        .for_each(|(o, &v)| *o = v as u8);
    out
}

fn compose(pi: &Permutation, sigma: &Permutation) -> Permutation {
    let mut out = [0u8; 9];
    for k in 0..9 {
        out[k] = pi[sigma[k] as usize];
    }
    out
}

/// Nine patches in slot order plus the permutation that placed them.
#[derive(Debug, Clone, PartialEq)]
pub struct JigsawSample<T> {
    /// `[9, C, P, P]`
    pub patches: Tensor<T>,
    pub perm: Permutation,
}

/// Slot `k` receives the patch at grid cell `sigma[k]`.
pub fn extract_jigsaw<T: Scalar>(image: &Tensor<T>, sigma: &[usize], grid: &PatchGrid) -> Result<JigsawSample<T>> {
    let perm = check_puzzle(sigma)?;
    let patches: Vec<Tensor<T>> = perm
        .iter()
        .map(|&cell| grid.patch_at::<T, ChaCha8Rng>(image, cell as usize, None))
        .collect::<Result<_>>()?;
    Ok(JigsawSample {
        patches: Tensor::stack(&patches)?,
        perm,
    })
}

/// An ordered set of puzzle permutations closed under `σ ↦ π_g∘σ`.
///
/// Labels are orbit-major: label `o * |G| + g` is `π_g∘σ_o` for the orbit
/// representative `σ_o`.
#[derive(Debug, Clone)]
pub struct PermutationSubset {
    group: FiniteGroup,
    perms: Vec<Permutation>,
    index: HashMap<u64, usize>,
    seed: u64,
    min_hamming: u32,
}

impl PartialEq for PermutationSubset {
    fn eq(&self, other: &Self) -> bool {
        self.group.kind() == other.group.kind() && self.perms == other.perms && self.seed == other.seed
    }
}

impl PermutationSubset {
    /// Builds a subset from orbit-major permutations and validates closure,
    /// freeness and uniqueness.
    pub fn from_perms(group: &FiniteGroup, perms: Vec<Permutation>, seed: u64) -> Result<Self> {
        let n = group.order();
        if perms.is_empty() || !perms.len().is_multiple_of(n) {
            return Err(Error::Structure(format!(
                "{} permutations do not form whole orbits of size {n}",
                perms.len()
            )));
        }
        let pis: Vec<Permutation> = group.elements().map(|g| grid_permutation(group, g)).collect();
        let mut index = HashMap::with_capacity(perms.len());
        for (i, p) in perms.iter().enumerate() {
            check_puzzle(&p.map(usize::from))?;
            if index.insert(pack(p), i).is_some() {
                return Err(Error::Structure(format!("duplicate permutation {p:?}")));
            }
        }
        for chunk in perms.chunks(n) {
            let rep = chunk[group.identity()];
            for g in group.elements() {
                if chunk[g] != compose(&pis[g], &rep) {
                    return Err(Error::ClosureViolation(chunk[g].to_vec()));
                }
            }
        }
        let min_hamming = min_pairwise(&perms);
        Ok(Self {
            group: group.clone(),
            perms,
            index,
            seed,
            min_hamming,
        })
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn n_orbits(&self) -> usize {
        self.perms.len() / self.group.order()
    }

    pub fn perms(&self) -> &[Permutation] {
        &self.perms
    }

    pub fn get(&self, label: usize) -> &Permutation {
        &self.perms[label]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Smallest Hamming distance between two distinct members.
    pub fn min_hamming(&self) -> u32 {
        self.min_hamming
    }

    pub fn label_of(&self, p: &Permutation) -> Option<usize> {
        self.index.get(&pack(p)).copied()
    }

    /// Label of `π_g∘σ` for `σ = perms[label]`, looked up by value so that a
    /// corrupted subset is detected. Any group may act; only the subset's own
    /// group is guaranteed to stay inside.
    pub fn act(&self, group: &FiniteGroup, g: usize, label: usize) -> Result<usize> {
        let moved = compose(&grid_permutation(group, g), &self.perms[label]);
        self.label_of(&moved)
            .ok_or_else(|| Error::ClosureViolation(moved.to_vec()))
    }

    /// The induced action on labels as a [`LabelAction`].
    pub fn label_action(&self) -> Result<LabelAction> {
        let perms = self
            .group
            .elements()
            .map(|g| (0..self.len()).map(|l| self.act(&self.group, g, l)).collect())
            .collect::<Result<Vec<Vec<usize>>>>()?;
        LabelAction::new(&self.group, perms)
    }

    /// Header line plus one permutation per line.
    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        let kind = self.group.kind().map_or("custom", |k| k.name());
        writeln!(
            out,
            "group={kind} orbits={} seed={} min_hamming={}",
            self.n_orbits(),
            self.seed,
            self.min_hamming
        )?;
        let mut line = String::with_capacity(18);
        for p in &self.perms {
            line.clear();
            for (i, v) in p.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v}").expect("writing to a string");
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty subset file".into()))??;
        let mut fields = HashMap::new();
        for kv in header.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {kv:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("header lacks {k}")))
        };
        let kind: GroupKind = get("group")?.parse()?;
        let orbits: usize = get("orbits")?.parse().map_err(|e| Error::Format(format!("orbits: {e}")))?;
        let seed: u64 = get("seed")?.parse().map_err(|e| Error::Format(format!("seed: {e}")))?;
        let mut perms = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| Error::Format(format!("{line:?}: {e}"))))
                .collect::<Result<_>>()?;
            perms.push(check_puzzle(&p)?);
        }
        let group = FiniteGroup::new(kind);
        if perms.len() != orbits * group.order() {
            return Err(Error::Format(format!(
                "header announces {orbits} orbits, file holds {} permutations",
                perms.len()
            )));
        }
        Self::from_perms(&group, perms, seed)
    }
}

fn min_pairwise(perms: &[Permutation]) -> u32 {
    let packed: Vec<u64> = perms.iter().map(pack).collect();
    let mut best = 9;
    for (i, &a) in packed.iter().enumerate() {
        for &b in &packed[i + 1..] {
            best = best.min(packed_hamming(a, b));
        }
    }
    best
}

/// Greedy maximal-Hamming subset of `n_orbits` whole orbits.
///
/// Each step draws [`CANDIDATE_POOL`] uniform permutations and keeps the one
/// farthest (in minimum Hamming distance) from everything selected so far,
/// then adds its full orbit `{π_g∘σ}`. Since the selection is closed, the
/// distance of a candidate equals the distance of its whole orbit.
pub fn generate_closed_subset(group: &FiniteGroup, n_orbits: usize, seed: u64) -> Result<PermutationSubset> {
    const FACT9: usize = 362_880;
    if n_orbits == 0 || n_orbits * group.order() > FACT9 {
        return Err(Error::Parameter(format!(
            "{n_orbits} orbits of size {} do not fit in 9!",
            group.order()
        )));
    }
    let pis: Vec<Permutation> = group.elements().map(|g| grid_permutation(group, g)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perms: Vec<Permutation> = Vec::with_capacity(n_orbits * pis.len());
    let mut packed: Vec<u64> = Vec::with_capacity(n_orbits * pis.len());
    let mut base: Permutation = [0, 1, 2, 3, 4, 5, 6, 7, 8];
    while perms.len() < n_orbits * pis.len() {
        let mut best: Option<(u32, Permutation)> = None;
        for _ in 0..CANDIDATE_POOL {
            base.shuffle(&mut rng);
            let c = pack(&base);
            let floor = best.map_or(0, |(d, _)| d);
            let mut d = 9;
            for &s in &packed {
                d = d.min(packed_hamming(c, s));
                if d <= floor {
                    break;
                }
            }
            if d > floor {
                best = Some((d, base));
            }
        }
        let Some((_, rep)) = best else {
            // every candidate was already selected; draw again
            continue;
        };
        for pi in &pis {
            let p = compose(pi, &rep);
            perms.push(p);
            packed.push(pack(&p));
        }
    }
    PermutationSubset::from_perms(group, perms, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_distance_matches_slotwise_count() {
        let a: Permutation = [0, 1, 2, 3, 4, 5, 6, 7, 8];
        let b: Permutation = [1, 0, 2, 3, 4, 5, 6, 8, 7];
        assert_eq!(hamming(&a, &b), 4);
        assert_eq!(hamming(&a, &a), 0);
        let c: Permutation = [8, 7, 6, 5, 4, 3, 2, 1, 0];
        assert_eq!(hamming(&a, &c), 8);
    }

    #[test]
    fn quarter_turn_cell_map() {
        let g = FiniteGroup::new(GroupKind::Rot4);
        // cell (row, col) -> (2 - col, row)
        assert_eq!(grid_permutation(&g, 1), [6, 3, 0, 7, 4, 1, 8, 5, 2]);
    }
}
