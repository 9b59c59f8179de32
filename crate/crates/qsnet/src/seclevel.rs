//! Security-level algebra for combined key-generation technologies.
//!
//! A label is an ideal base level (ITS for quantum key distribution,
//! MC — mathematical complexity — for post-quantum crypto) minus a set
//! of side-channel tags standing for everything an implementation loses
//! against its ideal protocol. Combining technologies in parallel takes
//! the union of the guarantees; chaining them in series takes the
//! intersection. Expressions are kept in a canonical normal form:
//! same-base atoms collapse by tag intersection (set algebra:
//! `(B\A) ∪ (B\C) = B\(A∩C)`), dominated atoms are dropped, atoms are
//! sorted. Serial composition of multi-atom unions distributes over all
//! atom pairs; the paper's tables only cover single atoms, so the
//! distribution rule is this module's extrapolation.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::core::wire::{Canonical, Reader, Writer, WireError};

/// Ideal security base of a key-exchange technology. `Mc < Its`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SecurityBase {
    Mc,
    Its,
}

impl SecurityBase {
    fn wire_code(self) -> u8 {
        match self {
            SecurityBase::Mc => 0,
            SecurityBase::Its => 1,
        }
    }

    fn from_wire(code: u8) -> Result<Self, WireError> {
        match code {
            0 => Ok(SecurityBase::Mc),
            1 => Ok(SecurityBase::Its),
            other => Err(WireError::invalid("base", format!("unknown code {other}"))),
        }
    }
}

impl fmt::Display for SecurityBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecurityBase::Its => write!(f, "ITS"),
            SecurityBase::Mc => write!(f, "MC"),
        }
    }
}

/// One `base \ side_channels` atom.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SecurityLabel {
    pub base: SecurityBase,
    pub side_channels: BTreeSet<String>,
}

impl SecurityLabel {
    pub fn new<I, S>(base: SecurityBase, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let side_channels = tags
            .into_iter()
            .map(Into::into)
            .filter(|t| !t.is_empty())
            .collect();
        Self {
            base,
            side_channels,
        }
    }

    pub fn its<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(SecurityBase::Its, tags)
    }

    pub fn mc<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(SecurityBase::Mc, tags)
    }

    /// `self` dominates `other` when it is at least as good on both axes:
    /// higher-or-equal base and a subset of the side channels.
    pub fn dominates(&self, other: &SecurityLabel) -> bool {
        self.base >= other.base && self.side_channels.is_subset(&other.side_channels)
    }
}

impl fmt::Display for SecurityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.base)?;
        if !self.side_channels.is_empty() {
            let tags: Vec<&str> = self.side_channels.iter().map(String::as_str).collect();
            write!(f, "\\{{{}}}", tags.join(","))?;
        }
        Ok(())
    }
}

/// Using a PQC signature to authenticate a QKD link caps the whole
/// exchange at the authentication method's level: ITS drops to MC, the
/// side channels stay. Already-MC labels pass through unchanged.
pub fn label_with_pqc_auth(label: &SecurityLabel) -> SecurityLabel {
    SecurityLabel {
        base: SecurityBase::Mc,
        side_channels: label.side_channels.clone(),
    }
}

/// Union of atoms in normal form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SecurityExpr {
    atoms: Vec<SecurityLabel>,
}

impl SecurityExpr {
    pub fn atom(label: SecurityLabel) -> Self {
        Self::normalize(vec![label])
    }

    pub fn atoms(&self) -> &[SecurityLabel] {
        &self.atoms
    }

    /// Canonical form: merge same-base atoms via tag intersection, drop
    /// dominated atoms, sort ITS before MC.
    pub fn normalize(atoms: Vec<SecurityLabel>) -> Self {
        assert!(!atoms.is_empty(), "security expression needs >= 1 atom");
        let mut merged: Vec<SecurityLabel> = Vec::with_capacity(2);
        for base in [SecurityBase::Its, SecurityBase::Mc] {
            let of_base: Vec<&SecurityLabel> = atoms.iter().filter(|a| a.base == base).collect();
            if let Some((first, rest)) = of_base.split_first() {
                let mut tags = first.side_channels.clone();
                for a in rest {
                    tags = tags.intersection(&a.side_channels).cloned().collect();
                }
                merged.push(SecurityLabel {
                    base,
                    side_channels: tags,
                });
            }
        }
        // Post-merge there is at most one atom per base; only the ITS
        // atom can dominate the MC one.
        if let [its, mc] = &merged[..] {
            if its.dominates(mc) {
                merged.truncate(1);
            }
        }
        Self { atoms: merged }
    }

    /// Parallel combination: the adversary must defeat every component,
    /// so guarantees accumulate (set union).
    pub fn parallel(&self, other: &SecurityExpr) -> SecurityExpr {
        let mut atoms = self.atoms.clone();
        atoms.extend(other.atoms.iter().cloned());
        Self::normalize(atoms)
    }

    /// Serial combination: the weakest link bounds the chain, so
    /// guarantees intersect — pairwise minimum base, union of tags.
    pub fn serial(&self, other: &SecurityExpr) -> SecurityExpr {
        let mut atoms = Vec::with_capacity(self.atoms.len() * other.atoms.len());
        for a in &self.atoms {
            for b in &other.atoms {
                atoms.push(SecurityLabel {
                    base: a.base.min(b.base),
                    side_channels: a.side_channels.union(&b.side_channels).cloned().collect(),
                });
            }
        }
        Self::normalize(atoms)
    }

    /// Every guarantee of `other` is covered by some atom here.
    pub fn dominates(&self, other: &SecurityExpr) -> bool {
        other
            .atoms
            .iter()
            .all(|o| self.atoms.iter().any(|s| s.dominates(o)))
    }
}

impl From<SecurityLabel> for SecurityExpr {
    fn from(label: SecurityLabel) -> Self {
        Self::atom(label)
    }
}

impl fmt::Display for SecurityExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.atoms.iter().enumerate() {
            if i > 0 {
                write!(f, " ∪ ")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

impl Canonical for SecurityLabel {
    fn encode_into(&self, w: &mut Writer) {
        w.put_u8(self.base.wire_code());
        w.put_u32(self.side_channels.len() as u32);
        for tag in &self.side_channels {
            w.put_str(tag);
        }
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let base = SecurityBase::from_wire(r.u8()?)?;
        let n = r.count("side_channels", 4)?;
        let mut side_channels = BTreeSet::new();
        for _ in 0..n {
            let tag = r.string("side_channel")?;
            if tag.is_empty() {
                return Err(WireError::invalid("side_channel", "empty tag"));
            }
            side_channels.insert(tag);
        }
        Ok(Self {
            base,
            side_channels,
        })
    }
}

impl Canonical for SecurityExpr {
    fn encode_into(&self, w: &mut Writer) {
        w.put_u32(self.atoms.len() as u32);
        for a in &self.atoms {
            a.encode_into(w);
        }
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let n = r.count("atoms", 5)?;
        if n == 0 {
            return Err(WireError::invalid("atoms", "empty expression"));
        }
        let mut atoms = Vec::new();
        for _ in 0..n {
            atoms.push(SecurityLabel::decode_from(r)?);
        }
        Ok(Self::normalize(atoms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn its(tags: &[&str]) -> SecurityExpr {
        SecurityExpr::atom(SecurityLabel::its(tags.iter().copied()))
    }

    fn mc(tags: &[&str]) -> SecurityExpr {
        SecurityExpr::atom(SecurityLabel::mc(tags.iter().copied()))
    }

    #[test]
    fn parallel_same_base_intersects_tags() {
        let combined = its(&["s1", "shared"]).parallel(&its(&["s2", "shared"]));
        assert_eq!(combined, its(&["shared"]));
    }

    #[test]
    fn parallel_mixed_base_stays_union() {
        let combined = its(&["qkd-det"]).parallel(&mc(&["lattice"]));
        assert_eq!(combined.atoms().len(), 2);
        assert_eq!(combined.atoms()[0], SecurityLabel::its(["qkd-det"]));
        assert_eq!(combined.atoms()[1], SecurityLabel::mc(["lattice"]));
    }

    #[test]
    fn serial_takes_min_base_and_tag_union() {
        let combined = mc(&["s1"]).serial(&its(&["s2"]));
        assert_eq!(combined, mc(&["s1", "s2"]));
    }

    #[test]
    fn pqc_auth_downgrades_its() {
        let l = SecurityLabel::its(["s1"]);
        assert_eq!(label_with_pqc_auth(&l), SecurityLabel::mc(["s1"]));
        let m = SecurityLabel::mc(["s"]);
        assert_eq!(label_with_pqc_auth(&m), m);
    }

    #[test]
    fn normalization_drops_dominated_mixed_atoms() {
        // ITS with no side channels covers anything MC can offer.
        let e = its(&[]).parallel(&mc(&["x"]));
        assert_eq!(e, its(&[]));
    }

    #[test]
    fn serial_distributes_over_unions() {
        let u = its(&["a"]).parallel(&mc(&["b"]));
        let s = u.serial(&mc(&["c"]));
        // (ITS\a ∪ MC\b) ∘ MC\c = MC\(a∪c) ∪ MC\(b∪c) = MC\((a∪c)∩(b∪c)) = MC\c
        assert_eq!(s, mc(&["c"]));
    }

    #[test]
    fn display_renders_set_notation() {
        let e = its(&["s1"]).parallel(&mc(&["s2"]));
        assert_eq!(e.to_string(), "ITS\\{s1} ∪ MC\\{s2}");
    }
}
