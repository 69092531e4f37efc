//! Rooted phylogenetic tree with branch lengths.
//!
//! Nodes are stored in a flat vector with parent links; children lists are
//! derived. Leaves are keyed by their label (the taxon identifier).

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::Violation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub parent: Option<usize>,
    /// Length of the edge to the parent (ignored for the root).
    pub branch_length: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeRepr", into = "TreeRepr")]
pub struct PhyloTree {
    nodes: Vec<TreeNode>,
    children: Vec<Vec<usize>>,
    root: usize,
}

#[derive(Serialize, Deserialize)]
struct TreeRepr {
    nodes: Vec<TreeNode>,
}

impl TryFrom<TreeRepr> for PhyloTree {
    type Error = Error;

    fn try_from(repr: TreeRepr) -> Result<Self> {
        PhyloTree::from_nodes(repr.nodes)
    }
}

impl From<PhyloTree> for TreeRepr {
    fn from(tree: PhyloTree) -> Self {
        TreeRepr { nodes: tree.nodes }
    }
}

impl PhyloTree {
    /// Builds a tree from parent links. Checks that there is exactly one root
    /// and no cycle; label uniqueness and branch lengths are left to
    /// [`PhyloTree::check`].
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<PhyloTree> {
        if nodes.is_empty() {
            return Err(Error::data("tree has no nodes"));
        }
        let n = nodes.len();
        let mut children = vec![Vec::new(); n];
        let mut root = None;
        for (i, node) in nodes.iter().enumerate() {
            match node.parent {
                None if root.is_some() => return Err(Error::data("tree has more than one root")),
                None => root = Some(i),
                Some(p) if p >= n || p == i => {
                    return Err(Error::data(format!("node {i} has invalid parent {p}")))
                }
                Some(p) => children[p].push(i),
            }
        }
        let root = root.ok_or_else(|| Error::data("tree has no root (cycle)"))?;
        let mut seen = 0usize;
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            seen += 1;
            stack.extend(children[v].iter().copied());
        }
        if seen != n {
            return Err(Error::data("tree contains a cycle or unreachable nodes"));
        }
        Ok(PhyloTree { nodes, children, root })
    }

    /// Invariant violations: unlabeled or duplicated leaves and invalid
    /// branch lengths.
    pub fn check(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut reported = HashSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if self.is_leaf(i) {
                match &node.label {
                    None => out.push(Violation {
                        rule: "tree-leaf-label",
                        id: format!("node {i}"),
                        message: "leaf has no label".into(),
                    }),
                    Some(l) if !seen.insert(l.as_str()) && reported.insert(l.as_str()) => {
                        out.push(Violation {
                            rule: "tree-unique-leaves",
                            id: l.clone(),
                            message: "leaf label appears more than once".into(),
                        })
                    }
                    Some(_) => {}
                }
            }
            if !(node.branch_length.is_finite() && node.branch_length >= 0.0) {
                out.push(Violation {
                    rule: "tree-branch-length",
                    id: node.label.clone().unwrap_or_else(|| format!("node {i}")),
                    message: format!("branch length {} is not finite and non-negative", node.branch_length),
                });
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, i: usize) -> &TreeNode {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.children[i].is_empty()
    }

    /// (node index, label) for every labeled leaf, in node order.
    pub fn leaves(&self) -> impl Iterator<Item = (usize, &str)> + '_ {
        (0..self.nodes.len())
            .filter(|&i| self.is_leaf(i))
            .filter_map(|i| self.nodes[i].label.as_deref().map(|l| (i, l)))
    }

    pub fn leaf_index(&self) -> HashMap<&str, usize> {
        self.leaves().map(|(i, l)| (l, i)).collect()
    }

    /// Children before parents.
    pub fn postorder(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            order.push(v);
            stack.extend(self.children[v].iter().copied());
        }
        order.reverse();
        order
    }

    /// Root-to-node path lengths.
    pub fn depths(&self) -> Vec<f64> {
        let mut depth = vec![0.0; self.nodes.len()];
        let mut order = self.postorder();
        order.reverse();
        for v in order {
            if let Some(p) = self.nodes[v].parent {
                depth[v] = depth[p] + self.nodes[v].branch_length;
            }
        }
        depth
    }

    /// Patristic distance between two labeled leaves.
    pub fn path_length(&self, a: &str, b: &str) -> Option<f64> {
        let index = self.leaf_index();
        let (&ia, &ib) = (index.get(a)?, index.get(b)?);
        let mut ancestors = HashSet::new();
        let mut v = Some(ia);
        while let Some(x) = v {
            ancestors.insert(x);
            v = self.nodes[x].parent;
        }
        let mut lca = ib;
        while !ancestors.contains(&lca) {
            lca = self.nodes[lca].parent?;
        }
        let depth = self.depths();
        Some(depth[ia] + depth[ib] - 2.0 * depth[lca])
    }

    /// Tree restricted to the leaves whose labels are in `keep`. Internal
    /// nodes left with a single child are collapsed (edge lengths summed), so
    /// leaf-to-leaf path lengths are preserved. `None` when no leaf survives.
    pub fn prune_to(&self, keep: &HashSet<&str>) -> Option<PhyloTree> {
        let mut kept = vec![false; self.nodes.len()];
        for v in self.postorder() {
            kept[v] = if self.is_leaf(v) {
                self.nodes[v].label.as_deref().is_some_and(|l| keep.contains(l))
            } else {
                self.children[v].iter().any(|&c| kept[c])
            };
        }
        if !kept[self.root] {
            return None;
        }
        let mut out = Vec::new();
        // (old node, accumulated extra length, new parent)
        let mut stack = vec![(self.root, 0.0, None::<usize>)];
        while let Some((v, extra, parent)) = stack.pop() {
            let live: Vec<usize> = self.children[v].iter().copied().filter(|&c| kept[c]).collect();
            let own = if parent.is_none() && out.is_empty() { 0.0 } else { self.nodes[v].branch_length };
            if live.len() == 1 && !self.is_leaf(v) {
                stack.push((live[0], extra + own, parent));
                continue;
            }
            let id = out.len();
            out.push(TreeNode {
                parent,
                branch_length: extra + own,
                label: self.nodes[v].label.clone(),
            });
            for &c in live.iter().rev() {
                stack.push((c, 0.0, Some(id)));
            }
        }
        if let Some(root) = out.first_mut() {
            root.branch_length = 0.0;
        }
        Some(PhyloTree::from_nodes(out).expect("pruning preserves tree structure"))
    }

    /// Same unrooted tree, re-rooted at a new node placed on the edge above
    /// `node`, at `fraction` of the edge length from `node`.
    pub fn reroot_on_edge(&self, node: usize, fraction: f64) -> Result<PhyloTree> {
        let parent = self.nodes[node]
            .parent
            .ok_or_else(|| Error::data("cannot re-root on the edge above the root"))?;
        let len = self.nodes[node].branch_length;
        let n = self.nodes.len();
        let new_root = n;
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n + 1];
        for (v, tn) in self.nodes.iter().enumerate() {
            if let Some(p) = tn.parent {
                if v == node {
                    continue;
                }
                adj[v].push((p, tn.branch_length));
                adj[p].push((v, tn.branch_length));
            }
        }
        let f = fraction.clamp(0.0, 1.0);
        adj[new_root].push((node, f * len));
        adj[node].push((new_root, f * len));
        adj[new_root].push((parent, (1.0 - f) * len));
        adj[parent].push((new_root, (1.0 - f) * len));

        let mut out = Vec::with_capacity(n + 1);
        let mut stack = vec![(new_root, None::<usize>, 0.0, usize::MAX)];
        while let Some((v, new_parent, blen, old_parent)) = stack.pop() {
            let id = out.len();
            out.push(TreeNode {
                parent: new_parent,
                branch_length: blen,
                label: if v < n { self.nodes[v].label.clone() } else { None },
            });
            for &(w, l) in adj[v].iter().rev() {
                if w != old_parent {
                    stack.push((w, Some(id), l, v));
                }
            }
        }
        PhyloTree::from_nodes(out)
    }

    /// Newick rendering with branch lengths at full precision.
    pub fn to_newick(&self) -> String {
        let mut s = String::new();
        self.write_node(self.root, &mut s);
        s.push(';');
        s
    }

    fn write_node(&self, v: usize, s: &mut String) {
        if !self.children[v].is_empty() {
            s.push('(');
            for (i, &c) in self.children[v].iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                self.write_node(c, s);
            }
            s.push(')');
        }
        if let Some(label) = &self.nodes[v].label {
            s.push_str(&quote_label(label));
        }
        s.push(':');
        s.push_str(&format!("{:?}", self.nodes[v].branch_length));
    }
}

fn quote_label(label: &str) -> String {
    if label.is_empty() || label.chars().any(|c| c.is_whitespace() || "()[]':;,".contains(c)) {
        format!("'{}'", label.replace('\'', "''"))
    } else {
        label.to_string()
    }
}

/// Parses a Newick string. Missing branch lengths default to 0.
pub fn parse_newick(text: &str) -> Result<PhyloTree> {
    NewickParser::new(text).parse()
}

struct NewickParser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> NewickParser<'a> {
    fn new(text: &'a str) -> Self {
        NewickParser {
            text,
            bytes: text.as_bytes(),
            pos: 0,
        }
    }

    fn error(&self, at: usize, message: impl Into<String>) -> Error {
        let before = &self.text[..at.min(self.text.len())];
        let line = before.matches('\n').count() + 1;
        let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        Error::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    fn skip_blank(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'[') => {
                    let start = self.pos;
                    match self.text[self.pos..].find(']') {
                        Some(off) => self.pos += off + 1,
                        None => return Err(self.error(start, "unterminated comment")),
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn parse(mut self) -> Result<PhyloTree> {
        let mut nodes: Vec<TreeNode> = Vec::new();
        let mut open: Vec<usize> = Vec::new();
        let mut expect_node = true;
        let mut leaf_seen: HashMap<String, usize> = HashMap::new();
        loop {
            self.skip_blank()?;
            let at = self.pos;
            match self.bytes.get(self.pos) {
                None if !open.is_empty() => {
                    return Err(self.error(at, "unbalanced parentheses: missing ')'"))
                }
                None => return Err(self.error(at, "missing terminating ';'")),
                Some(b'(') => {
                    if !expect_node || (open.is_empty() && !nodes.is_empty()) {
                        return Err(self.error(at, "unexpected '('"));
                    }
                    nodes.push(TreeNode {
                        parent: open.last().copied(),
                        branch_length: 0.0,
                        label: None,
                    });
                    open.push(nodes.len() - 1);
                    self.pos += 1;
                }
                Some(b',') => {
                    if open.is_empty() {
                        return Err(self.error(at, "',' outside parentheses"));
                    }
                    if expect_node {
                        return Err(self.error(at, "empty leaf"));
                    }
                    expect_node = true;
                    self.pos += 1;
                }
                Some(b')') => {
                    let Some(v) = open.pop() else {
                        return Err(self.error(at, "unbalanced parentheses: unexpected ')'"));
                    };
                    if expect_node {
                        return Err(self.error(at, "empty leaf"));
                    }
                    self.pos += 1;
                    self.label_and_length(&mut nodes[v])?;
                    expect_node = false;
                }
                Some(b';') => {
                    if !open.is_empty() {
                        return Err(self.error(at, "unbalanced parentheses: missing ')'"));
                    }
                    if nodes.is_empty() {
                        return Err(self.error(at, "empty tree"));
                    }
                    self.pos += 1;
                    self.skip_blank()?;
                    if self.pos < self.bytes.len() {
                        return Err(self.error(self.pos, "trailing characters after ';'"));
                    }
                    break;
                }
                Some(_) => {
                    if !expect_node || (open.is_empty() && !nodes.is_empty()) {
                        return Err(self.error(at, "unexpected label"));
                    }
                    let mut leaf = TreeNode {
                        parent: open.last().copied(),
                        branch_length: 0.0,
                        label: None,
                    };
                    self.label_and_length(&mut leaf)?;
                    let label = leaf
                        .label
                        .clone()
                        .ok_or_else(|| self.error(at, "leaf without a label"))?;
                    if leaf_seen.insert(label.clone(), at).is_some() {
                        return Err(self.error(at, format!("duplicate leaf label '{label}'")));
                    }
                    nodes.push(leaf);
                    expect_node = false;
                }
            }
        }
        PhyloTree::from_nodes(nodes)
    }

    fn label_and_length(&mut self, node: &mut TreeNode) -> Result<()> {
        self.skip_blank()?;
        if let Some(label) = self.label()? {
            node.label = Some(label);
        }
        self.skip_blank()?;
        if self.bytes.get(self.pos) == Some(&b':') {
            self.pos += 1;
            self.skip_blank()?;
            let start = self.pos;
            while self
                .bytes
                .get(self.pos)
                .is_some_and(|b| b.is_ascii_digit() || b"+-.eE".contains(b))
            {
                self.pos += 1;
            }
            let token = &self.text[start..self.pos];
            let value: f64 = token
                .parse()
                .map_err(|_| self.error(start, format!("invalid branch length '{token}'")))?;
            if !(value.is_finite() && value >= 0.0) {
                return Err(self.error(start, format!("branch length {token} must be finite and non-negative")));
            }
            node.branch_length = value;
        }
        Ok(())
    }

    fn label(&mut self) -> Result<Option<String>> {
        if self.bytes.get(self.pos) == Some(&b'\'') {
            let start = self.pos;
            self.pos += 1;
            let mut out = String::new();
            loop {
                let rest = &self.text[self.pos..];
                let Some(off) = rest.find('\'') else {
                    return Err(self.error(start, "unterminated quoted label"));
                };
                out.push_str(&rest[..off]);
                self.pos += off + 1;
                if self.bytes.get(self.pos) == Some(&b'\'') {
                    out.push('\'');
                    self.pos += 1;
                } else {
                    return Ok(Some(out));
                }
            }
        }
        let start = self.pos;
        let rest = &self.text[self.pos..];
        let end = rest
            .find(|c: char| c.is_whitespace() || "()[]':;,".contains(c))
            .unwrap_or(rest.len());
        self.pos += end;
        Ok((end > 0).then(|| self.text[start..start + end].to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_leaf_depths() {
        let t = parse_newick("(A:1,B:2):0;").unwrap();
        assert_eq!(t.leaves().count(), 2);
        let depth = t.depths();
        let idx = t.leaf_index();
        assert_eq!(depth[idx["A"]], 1.0);
        assert_eq!(depth[idx["B"]], 2.0);
    }

    #[test]
    fn path_length_sums_edges() {
        let t = parse_newick("((A:1,B:1):1,C:2);").unwrap();
        assert_eq!(t.path_length("A", "C"), Some(4.0));
        assert_eq!(t.path_length("A", "B"), Some(2.0));
    }

    #[test]
    fn grammar_errors() {
        let msg = |s: &str| parse_newick(s).unwrap_err().to_string();
        assert!(msg("(A,B").contains("unbalanced"));
        assert!(msg("(A,B));").contains("unbalanced"));
        assert!(msg("(A,A);").contains("duplicate leaf label 'A'"));
        assert!(msg("(A,B); x").contains("trailing"));
        assert!(msg("(A,B)").contains("';'"));
        assert!(msg("(A,);").contains("empty leaf"));
        assert!(msg("(A:-1,B);").contains("non-negative"));
        assert!(msg("(A:x,B);").contains("invalid branch length"));
    }

    #[test]
    fn quoted_labels_comments_and_internal_labels() {
        let t = parse_newick("('a b':1.5,[note](C,'D''s')inner:0.25)root;").unwrap();
        let labels: Vec<&str> = t.leaves().map(|(_, l)| l).collect();
        assert_eq!(labels, vec!["a b", "C", "D's"]);
        assert_eq!(t.node(t.root()).label.as_deref(), Some("root"));
        let back = parse_newick(&t.to_newick()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn missing_lengths_default_to_zero() {
        let t = parse_newick("(A,B);").unwrap();
        assert!(t.nodes().iter().all(|n| n.branch_length == 0.0));
    }

    #[test]
    fn pruning_keeps_path_lengths() {
        let t = parse_newick("((A:1,B:2):3,(C:4,D:5):6);").unwrap();
        let keep: HashSet<&str> = ["A", "C", "D"].into_iter().collect();
        let p = t.prune_to(&keep).unwrap();
        let labels: HashSet<&str> = p.leaves().map(|(_, l)| l).collect();
        assert_eq!(labels, keep);
        assert_eq!(p.path_length("A", "C"), t.path_length("A", "C"));
        assert_eq!(p.path_length("C", "D"), t.path_length("C", "D"));
        assert!(p.check().is_empty());
        assert!(t.prune_to(&HashSet::new()).is_none());
    }

    #[test]
    fn rerooting_preserves_leaf_distances() {
        let t = parse_newick("((A:1,B:2):3,(C:4,D:5):6);").unwrap();
        let c = t.leaf_index()["C"];
        let r = t.reroot_on_edge(c, 0.25).unwrap();
        for a in ["A", "B", "C", "D"] {
            for b in ["A", "B", "C", "D"] {
                let (x, y) = (t.path_length(a, b).unwrap(), r.path_length(a, b).unwrap());
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn arb_tree() -> impl Strategy<Value = PhyloTree> {
        // Random binary tree by repeatedly splitting leaves.
        (2usize..12, proptest::collection::vec((0usize..1000, 0.0f64..10.0), 40)).prop_map(|(n, draws)| {
            let mut nodes = vec![TreeNode { parent: None, branch_length: 0.0, label: None }];
            let mut leaves = vec![0usize];
            let mut d = draws.into_iter().cycle();
            while leaves.len() < n {
                let (pick, _) = d.next().unwrap();
                let v = leaves.swap_remove(pick % leaves.len());
                for _ in 0..2 {
                    let (_, len) = d.next().unwrap();
                    nodes.push(TreeNode { parent: Some(v), branch_length: len, label: None });
                    leaves.push(nodes.len() - 1);
                }
            }
            leaves.sort();
            for (k, &v) in leaves.iter().enumerate() {
                nodes[v].label = Some(format!("L{k}"));
            }
            PhyloTree::from_nodes(nodes).unwrap()
        })
    }

    proptest! {
        #[test]
        fn newick_round_trip(tree in arb_tree()) {
            let text = tree.to_newick();
            let back = parse_newick(&text).unwrap();
            prop_assert_eq!(back.to_newick(), text);
            let labels: Vec<&str> = tree.leaves().map(|(_, l)| l).collect();
            for a in &labels {
                for b in &labels {
                    prop_assert_eq!(tree.path_length(a, b), back.path_length(a, b));
                }
            }
        }
    }
}
