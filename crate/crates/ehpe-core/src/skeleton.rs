//! Hand joint taxonomy, ordering, and kinematic adjacency shared by the data
//! generator, both model stages, and the metrics.
//!
//! Joint order is fixed as: wrist (index 0), then per finger — thumb, index,
//! middle, ring, pinky — the chain MCP, PIP, DIP, TIP. So joint
//! `1 + 4*finger + k` is the k-th link of that finger with k = 0..4 mapping
//! MCP→PIP→DIP→TIP, and the fingertips are indices 4, 8, 12, 16, 20.

use crate::autodiff::GraphEdges;
use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 21;
pub const NUM_FINGERS: usize = 5;
pub const WRIST: usize = 0;
pub const TIP_JOINTS: [usize; 5] = [4, 8, 12, 16, 20];

pub const FINGER_NAMES: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];
const LINK_NAMES: [&str; 4] = ["mcp", "pip", "dip", "tip"];

/// The five-way joint classification.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub enum Category {
    Tip,
    Dip,
    Pip,
    Mcp,
    Wrist,
}

impl Category {
    pub const ALL: [Category; 5] = [Category::Tip, Category::Dip, Category::Pip, Category::Mcp, Category::Wrist];

    /// Single-letter code used in configs and the dataset records.
    pub fn letter(self) -> char {
        match self {
            Category::Tip => 'T',
            Category::Dip => 'D',
            Category::Pip => 'P',
            Category::Mcp => 'M',
            Category::Wrist => 'W',
        }
    }

    pub fn from_letter(c: char) -> Result<Category> {
        match c.to_ascii_uppercase() {
            'T' => Ok(Category::Tip),
            'D' => Ok(Category::Dip),
            'P' => Ok(Category::Pip),
            'M' => Ok(Category::Mcp),
            'W' => Ok(Category::Wrist),
            other => Err(Error::config(format!("unknown joint category letter '{other}' (expected one of T, D, P, M, W)"))),
        }
    }

    /// Number of joints carrying this label.
    pub fn count(self) -> usize {
        if self == Category::Wrist {
            1
        } else {
            5
        }
    }
}

/// Category of a joint index.
pub fn category_of(joint: usize) -> Category {
    assert!(joint < NUM_JOINTS, "joint index {joint} out of range");
    if joint == WRIST {
        return Category::Wrist;
    }
    match (joint - 1) % 4 {
        0 => Category::Mcp,
        1 => Category::Pip,
        2 => Category::Dip,
        _ => Category::Tip,
    }
}

/// Parent joint in the kinematic tree; the wrist is the root.
pub fn parent_of(joint: usize) -> Option<usize> {
    assert!(joint < NUM_JOINTS, "joint index {joint} out of range");
    match joint {
        0 => None,
        j if (j - 1) % 4 == 0 => Some(WRIST), // MCPs hang off the wrist
        j => Some(j - 1),
    }
}

/// The 20 bones as (parent, child), ordered by child index.
pub fn bones() -> [(usize, usize); 20] {
    let mut out = [(0usize, 0usize); 20];
    for (i, o) in out.iter_mut().enumerate() {
        let child = i + 1;
        *o = (parent_of(child).expect("non-root"), child);
    }
    out
}

/// Undirected kinematic edges (wrist–MCP spokes plus the finger chains).
pub fn kinematic_edges() -> Vec<(usize, usize)> {
    bones().to_vec()
}

/// One-hop adjacency over the kinematic edges, with self-loops.
pub fn one_hop() -> GraphEdges {
    GraphEdges::from_undirected(NUM_JOINTS, &kinematic_edges(), true).expect("static graph is valid")
}

/// Human-readable joint name, e.g. "wrist", "thumb_tip", "index_mcp".
pub fn joint_name(joint: usize) -> String {
    assert!(joint < NUM_JOINTS, "joint index {joint} out of range");
    if joint == WRIST {
        return "wrist".to_string();
    }
    let finger = (joint - 1) / 4;
    let link = (joint - 1) % 4;
    format!("{}_{}", FINGER_NAMES[finger], LINK_NAMES[link])
}

/// Sorted joint indices for a category-letter string such as "WTD"
/// (wrist + all tips + all dips). Repeated letters are tolerated.
pub fn joints_for_letters(letters: &str) -> Result<Vec<usize>> {
    if letters.is_empty() {
        return Err(Error::config("empty joint-category selection"));
    }
    let mut cats = Vec::new();
    for c in letters.chars() {
        if c == '+' || c.is_whitespace() {
            continue;
        }
        cats.push(Category::from_letter(c)?);
    }
    let mut joints: Vec<usize> = (0..NUM_JOINTS).filter(|&j| cats.contains(&category_of(j))).collect();
    joints.sort_unstable();
    joints.dedup();
    Ok(joints)
}

/// Default supervised set of the first stage: the five tips plus the wrist.
pub fn tw_default_joints() -> Vec<usize> {
    let mut v = vec![WRIST];
    v.extend_from_slice(&TIP_JOINTS);
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_counts_are_5_5_5_5_1() {
        let mut counts = std::collections::BTreeMap::new();
        for j in 0..NUM_JOINTS {
            *counts.entry(category_of(j)).or_insert(0usize) += 1;
        }
        assert_eq!(counts[&Category::Tip], 5);
        assert_eq!(counts[&Category::Dip], 5);
        assert_eq!(counts[&Category::Pip], 5);
        assert_eq!(counts[&Category::Mcp], 5);
        assert_eq!(counts[&Category::Wrist], 1);
    }

    #[test]
    fn parent_array_is_acyclic_with_single_root() {
        let mut roots = 0;
        for j in 0..NUM_JOINTS {
            match parent_of(j) {
                None => roots += 1,
                Some(p) => assert!(p < j, "parents precede children"),
            }
        }
        assert_eq!(roots, 1);
    }

    #[test]
    fn tips_are_where_expected() {
        for &t in &TIP_JOINTS {
            assert_eq!(category_of(t), Category::Tip);
        }
        assert_eq!(joint_name(4), "thumb_tip");
        assert_eq!(joint_name(8), "index_tip");
        assert_eq!(joint_name(1), "thumb_mcp");
        assert_eq!(joint_name(0), "wrist");
    }

    #[test]
    fn adjacency_matches_bone_structure() {
        let g = one_hop();
        // wrist connects to the five MCPs plus itself
        assert_eq!(g.neighbors(WRIST), &[0, 1, 5, 9, 13, 17]);
        // a tip connects to its DIP and itself
        assert_eq!(g.neighbors(4), &[3, 4]);
        // a PIP connects to MCP, itself, DIP
        assert_eq!(g.neighbors(2), &[1, 2, 3]);
    }

    #[test]
    fn two_hop_adjacency_superset() {
        let one = one_hop();
        let two = one.two_hop();
        for i in 0..NUM_JOINTS {
            for &j in one.neighbors(i) {
                assert!(two.contains(i, j));
            }
        }
        // wrist now reaches PIPs through the MCPs
        assert!(two.contains(WRIST, 2));
        // opposing MCPs are mutually two-hop via the wrist
        assert!(two.contains(1, 17));
        // but a tip still cannot see the wrist
        assert!(!two.contains(4, WRIST));
    }

    #[test]
    fn letters_select_categories() {
        assert_eq!(joints_for_letters("W").unwrap(), vec![0]);
        assert_eq!(joints_for_letters("WT").unwrap(), tw_default_joints());
        assert_eq!(joints_for_letters("W+T").unwrap(), tw_default_joints());
        assert_eq!(joints_for_letters("WTDPM").unwrap(), (0..21).collect::<Vec<_>>());
        assert!(joints_for_letters("X").is_err());
        assert!(joints_for_letters("").is_err());
    }
}
