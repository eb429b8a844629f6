//! Verification tree: the main draft chain plus one leaf per shallow-verifier
//! correction, with its ancestor attention mask and position ids.
//!
//! Node ids are dense: main nodes `0..gamma` first, then corrections in
//! ascending draft index. The implicit root (depth 0) is the last committed
//! token, which the cycle forwards alongside the tree.
//!
//! Only one candidate per position besides the draft is supported; the node
//! `kind` is where wider per-position branching would plug in.

use serde::Serialize;

use crate::engine::policy::{accept, check_distribution, AcceptancePolicy};
use crate::error::{invalid, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Main,
    Correction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TreeNode {
    pub id: usize,
    pub token: u32,
    /// `None` means the node hangs off the root.
    pub parent: Option<usize>,
    /// Root children have depth 1.
    pub depth: usize,
    pub kind: NodeKind,
    /// Draft index this node competes for; also the shallow-verifier row that proposed it.
    pub source_row: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerificationTree {
    pub nodes: Vec<TreeNode>,
    pub committed_len: usize,
    pub gamma: usize,
}

impl VerificationTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn main_tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Main).map(|n| n.token)
    }

    /// Correction node competing with draft index `i`, if any.
    pub fn correction_at(&self, i: usize) -> Option<&TreeNode> {
        self.nodes[self.gamma..].iter().find(|n| n.source_row == i)
    }
}

/// Square boolean matrix over node ids; `(i, j)` is true iff `j` is `i` or an ancestor of `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeMask {
    n: usize,
    bits: Vec<bool>,
}

impl TreeMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && self.bits[i * self.n + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        self.bits.chunks(self.n.max(1)).take(self.n).map(<[bool]>::to_vec).collect()
    }
}

impl Serialize for TreeMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

/// A straight chain of drafts with no correction branches.
pub fn chain_tree(drafts: &[u32], committed_len: usize) -> Result<VerificationTree> {
    build_tree(drafts, &[], committed_len)
}

/// Main chain `drafts` plus a leaf sibling of `drafts[i]` for each `(i, token)` correction.
pub fn build_tree(drafts: &[u32], corrections: &[(usize, u32)], committed_len: usize) -> Result<VerificationTree> {
    let gamma = drafts.len();
    if gamma == 0 {
        return Err(invalid("empty draft"));
    }
    let mut sorted = corrections.to_vec();
    sorted.sort_by_key(|&(i, _)| i);
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(invalid(format!("duplicate correction index {}", w[0].0)));
        }
    }
    if let Some(&(i, _)) = sorted.iter().find(|&&(i, _)| i >= gamma) {
        return Err(invalid(format!("correction index {i} outside 0..{gamma}")));
    }

    let mut nodes: Vec<TreeNode> = drafts
        .iter()
        .enumerate()
        .map(|(i, &token)| TreeNode {
            id: i,
            token,
            parent: i.checked_sub(1),
            depth: i + 1,
            kind: NodeKind::Main,
            source_row: i,
        })
        .collect();
    for (k, &(i, token)) in sorted.iter().enumerate() {
        nodes.push(TreeNode {
            id: gamma + k,
            token,
            parent: i.checked_sub(1),
            depth: i + 1,
            kind: NodeKind::Correction,
            source_row: i,
        });
    }
    Ok(VerificationTree { nodes, committed_len, gamma })
}

/// Ancestor-or-self closure of the parent relation.
pub fn tree_mask(t: &VerificationTree) -> TreeMask {
    let n = t.nodes.len();
    let mut bits = vec![false; n * n];
    for node in &t.nodes {
        let mut cur = Some(node.id);
        while let Some(j) = cur {
            bits[node.id * n + j] = true;
            cur = t.nodes[j].parent;
        }
    }
    TreeMask { n, bits }
}

/// Position of every node: `committed_len + depth`. Siblings share a position.
pub fn position_ids(t: &VerificationTree) -> Vec<usize> {
    t.nodes.iter().map(|n| t.committed_len + n.depth).collect()
}

/// Result of walking a verified tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalkOutcome {
    pub accepted: Vec<u32>,
    /// Node ids of `accepted`, root to leaf.
    pub path: Vec<usize>,
    /// Node whose output distribution supplies the bonus token; `None` is the root context.
    pub terminal: Option<usize>,
    pub used_correction: bool,
}

impl WalkOutcome {
    /// Row of the distribution matrix that the bonus token is drawn from.
    pub fn terminal_row(&self) -> usize {
        self.terminal.map_or(0, |id| id + 1)
    }
}

/// Finds the longest accepted prefix.
///
/// `dists` has one row per forwarded position: row 0 is the root context's
/// next-token distribution and row `id + 1` is node `id`'s output. Draft
/// index `i` is judged against the distribution that conditions on the path
/// ending at `d[i-1]`, i.e. row `i` (row 0 for `i = 0`). A correction is
/// judged against that same row and, if accepted, ends the walk.
pub fn walk_longest_prefix(
    t: &VerificationTree,
    dists: &Matrix,
    policy: &AcceptancePolicy,
) -> Result<WalkOutcome> {
    if dists.rows() != t.len() + 1 {
        return Err(invalid(format!(
            "expected {} distribution rows, got {}",
            t.len() + 1,
            dists.rows()
        )));
    }
    for r in 0..dists.rows() {
        check_distribution(dists.row(r))?;
    }
    let mut out = WalkOutcome { accepted: Vec::new(), path: Vec::new(), terminal: None, used_correction: false };
    for i in 0..t.gamma {
        let cond = dists.row(i);
        let main = &t.nodes[i];
        if accept(main.token, cond, policy)? {
            out.accepted.push(main.token);
            out.path.push(main.id);
            out.terminal = Some(main.id);
            continue;
        }
        if let Some(c) = t.correction_at(i) {
            if accept(c.token, cond, policy)? {
                out.accepted.push(c.token);
                out.path.push(c.id);
                out.terminal = Some(c.id);
                out.used_correction = true;
            }
        }
        break;
    }
    Ok(out)
}

/// JSON debug view of one cycle's tree.
#[derive(Debug, Clone, Serialize)]
pub struct TreeDump {
    pub cycle: usize,
    pub tree: VerificationTree,
    pub positions: Vec<usize>,
    pub mask: TreeMask,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(m: &TreeMask) -> Vec<Vec<u8>> {
        m.to_rows().iter().map(|r| r.iter().map(|&b| b as u8).collect()).collect()
    }

    #[test]
    fn chain_cases() {
        let t = chain_tree(&[5], 0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.nodes[0].depth, 1);
        assert_eq!(rows(&tree_mask(&t)), vec![vec![1]]);

        let t = chain_tree(&[1, 2, 3], 10).unwrap();
        assert_eq!(rows(&tree_mask(&t)), vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]]);
        assert_eq!(position_ids(&t), vec![11, 12, 13]);
        assert!(chain_tree(&[], 0).is_err());
    }

    #[test]
    fn single_correction_tree() {
        // d = [a, b, c], correction x at index 1: x hangs off a.
        let t = build_tree(&[10, 11, 12], &[(1, 99)], 0).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.nodes[3].parent, Some(0));
        assert_eq!(t.nodes[3].kind, NodeKind::Correction);
        assert_eq!(
            rows(&tree_mask(&t)),
            vec![vec![1, 0, 0, 0], vec![1, 1, 0, 0], vec![1, 1, 1, 0], vec![1, 0, 0, 1]]
        );
        let pos = position_ids(&t);
        assert_eq!(pos[3], 2);
        assert_eq!(pos[3], pos[1]);
    }

    #[test]
    fn two_corrections_tree() {
        let t = build_tree(&[10, 11], &[(1, 8), (0, 7)], 4).unwrap();
        assert_eq!(t.len(), 4);
        // sorted by index: x=(0,7) is node 2 off the root, y=(1,8) is node 3 off node 0
        assert_eq!((t.nodes[2].token, t.nodes[2].parent), (7, None));
        assert_eq!((t.nodes[3].token, t.nodes[3].parent), (8, Some(0)));
        assert_eq!(position_ids(&t), vec![5, 6, 5, 6]);
    }

    #[test]
    fn empty_corrections_equal_chain() {
        assert_eq!(build_tree(&[3, 4, 5], &[], 2).unwrap(), chain_tree(&[3, 4, 5], 2).unwrap());
    }

    #[test]
    fn bad_corrections_rejected() {
        assert!(build_tree(&[1, 2], &[(0, 3), (0, 4)], 0).is_err());
        assert!(build_tree(&[1, 2], &[(2, 3)], 0).is_err());
    }

    fn one_hot(v: usize, hot: usize) -> Vec<f32> {
        let mut r = vec![0.0; v];
        r[hot] = 1.0;
        r
    }

    #[test]
    fn walk_full_accept_and_reject() {
        let t = chain_tree(&[1, 2, 3], 0).unwrap();
        let dists = Matrix::from_rows(&[one_hot(4, 1), one_hot(4, 2), one_hot(4, 3), one_hot(4, 0)]).unwrap();
        let w = walk_longest_prefix(&t, &dists, &AcceptancePolicy::Greedy).unwrap();
        assert_eq!(w.accepted, vec![1, 2, 3]);
        assert_eq!(w.terminal, Some(2));

        let dists = Matrix::from_rows(&[one_hot(4, 0), one_hot(4, 2), one_hot(4, 3), one_hot(4, 0)]).unwrap();
        let w = walk_longest_prefix(&t, &dists, &AcceptancePolicy::Greedy).unwrap();
        assert!(w.accepted.is_empty());
        assert_eq!(w.terminal, None);
        assert_eq!(w.terminal_row(), 0);
    }

    #[test]
    fn walk_rejects_unnormalized_rows() {
        let t = chain_tree(&[1], 0).unwrap();
        let dists = Matrix::from_rows(&[vec![0.5, 0.4], vec![1.0, 0.0]]).unwrap();
        assert!(walk_longest_prefix(&t, &dists, &AcceptancePolicy::Greedy).is_err());
    }

    /// Every accept/reject pattern for gamma = 2 with a correction at each
    /// index, checked against a hand-written table.
    #[test]
    fn walk_gamma_two_enumeration() {
        // drafts d0=0, d1=1; corrections c0=2 (node 2), c1=3 (node 3)
        let t = build_tree(&[0, 1], &[(0, 2), (1, 3)], 0).unwrap();
        let v = 4;
        // The greedy winner at each conditioning row decides the outcome:
        // row 0 picks between d0 (0), c0 (2) or neither (1 is a stand-in for "other");
        // row 1 (after d0) picks between d1 (1), c1 (3) or neither (0).
        let row0 = [(0usize, "d0"), (2, "c0"), (1, "none")];
        let row1 = [(1usize, "d1"), (3, "c1"), (0, "none")];
        for &(w0, l0) in &row0 {
            for &(w1, l1) in &row1 {
                let dists = Matrix::from_rows(&[
                    one_hot(v, w0),
                    one_hot(v, w1),
                    one_hot(v, 0),
                    one_hot(v, 0),
                    one_hot(v, 0),
                ])
                .unwrap();
                let w = walk_longest_prefix(&t, &dists, &AcceptancePolicy::Greedy).unwrap();
                let expected: (Vec<u32>, Option<usize>) = match (l0, l1) {
                    ("d0", "d1") => (vec![0, 1], Some(1)),
                    ("d0", "c1") => (vec![0, 3], Some(3)),
                    ("d0", "none") => (vec![0], Some(0)),
                    ("c0", _) => (vec![2], Some(2)),
                    ("none", _) => (vec![], None),
                    _ => unreachable!(),
                };
                assert_eq!((w.accepted.clone(), w.terminal), expected, "pattern {l0}/{l1}");
                assert_eq!(w.used_correction, l0 == "c0" || (l0 == "d0" && l1 == "c1"));
            }
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        /// Reflexive-transitive closure of the parent relation by repeated squaring
        /// of the adjacency matrix, independent of the parent-chasing in `tree_mask`.
        fn closure(t: &VerificationTree) -> Vec<bool> {
            let n = t.len();
            let mut r = vec![false; n * n];
            for node in &t.nodes {
                r[node.id * n + node.id] = true;
                if let Some(p) = node.parent {
                    r[node.id * n + p] = true;
                }
            }
            loop {
                let mut changed = false;
                for i in 0..n {
                    for k in 0..n {
                        if !r[i * n + k] {
                            continue;
                        }
                        for j in 0..n {
                            if r[k * n + j] && !r[i * n + j] {
                                r[i * n + j] = true;
                                changed = true;
                            }
                        }
                    }
                }
                if !changed {
                    return r;
                }
            }
        }

        fn arb_tree() -> impl Strategy<Value = VerificationTree> {
            (1usize..12).prop_flat_map(|gamma| {
                (
                    proptest::collection::vec(0u32..50, gamma),
                    proptest::collection::btree_map(0..gamma, 0u32..50, 0..=gamma),
                    0usize..100,
                )
                    .prop_map(|(d, c, s)| build_tree(&d, &c.into_iter().collect::<Vec<_>>(), s).unwrap())
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn mask_equals_brute_force_closure(t in arb_tree()) {
                let m = tree_mask(&t);
                let n = t.len();
                let c = closure(&t);
                for i in 0..n {
                    for j in 0..n {
                        prop_assert_eq!(m.allows(i, j), c[i * n + j]);
                    }
                }
            }

            #[test]
            fn tree_shape_invariants(t in arb_tree()) {
                prop_assert!(t.len() >= t.gamma && t.len() <= 2 * t.gamma);
                prop_assert_eq!(t.nodes.iter().filter(|n| n.kind == NodeKind::Main).count(), t.gamma);
                let pos = position_ids(&t);
                prop_assert!(pos.iter().all(|&p| p <= t.committed_len + t.gamma));
                let m = tree_mask(&t);
                for c in t.nodes.iter().filter(|n| n.kind == NodeKind::Correction) {
                    // corrections are leaves and see no main node at or below their depth
                    prop_assert!(t.nodes.iter().all(|n| n.parent != Some(c.id)));
                    for mnode in t.nodes.iter().filter(|n| n.kind == NodeKind::Main && n.depth >= c.depth) {
                        prop_assert!(!m.allows(c.id, mnode.id));
                    }
                    prop_assert_eq!(pos[c.id], pos[c.source_row]);
                }
            }
        }
    }
}
