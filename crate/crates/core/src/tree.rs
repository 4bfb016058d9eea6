//! Rooted aggregation trees over observed features.
//!
//! Every node of the tree stands for one aggregated feature: a leaf is an
//! observed column of `X`, an internal node is the sum of the leaves below it.
//! The leaf-membership matrix `A` (nodes × leaves) maps raw rows to aggregated
//! rows through `X̃ = X Aᵀ`.
//!
//! Node indices are dense (`0..node_count`) and double as row indices of `A`
//! and column indices of the aggregated matrix. Trees built from a parent list
//! put the leaves first (in `leaf_order`) and then the internal nodes sorted by
//! height and leftmost leaf, so children always precede their parents.

use std::collections::{BTreeSet, HashMap};

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("cycle detected through node `{0}`")]
    CycleDetected(String),
    #[error("multiple roots: {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("node `{0}` is not connected to the root")]
    DisconnectedNode(String),
    #[error("leaf order mismatch: {0}")]
    LeafOrderMismatch(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("dimension mismatch: expected {expected} columns, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("membership matrix is not a tree: {0}")]
    InvalidMembership(String),
    #[error("empty tree")]
    Empty,
}

/// Relatives of a single node, all as sets of node indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relations {
    pub parent: BTreeSet<usize>,
    pub ancestors: BTreeSet<usize>,
    pub descendants: BTreeSet<usize>,
    /// Excludes the node itself.
    pub siblings: BTreeSet<usize>,
    /// Leaf nodes at or below the node.
    pub leaves: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationTree {
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    /// Feature column -> leaf node.
    leaf_nodes: Vec<usize>,
    /// Node -> feature column, for leaves.
    leaf_column: Vec<Option<usize>>,
    /// Node -> sorted feature columns of its leaves.
    leaf_columns_of: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
}

impl AggregationTree {
    /// Builds a tree from `(node, parent)` pairs. The root is the single node
    /// whose parent is `None`; nodes that only appear as a parent are added
    /// implicitly. Non-root internal nodes with a single child are removed and
    /// their child re-attached to the grandparent.
    pub fn from_parent_list(
        parents: &[(String, Option<String>)],
        leaf_order: &[String],
    ) -> Result<Self, TreeError> {
        if parents.is_empty() && leaf_order.is_empty() {
            return Err(TreeError::Empty);
        }
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut names: Vec<String> = Vec::new();
        let mut parent_of: Vec<Option<usize>> = Vec::new();
        let mut declared: Vec<bool> = Vec::new();

        let mut intern = |name: &str, names: &mut Vec<String>, parent_of: &mut Vec<Option<usize>>, declared: &mut Vec<bool>| -> usize {
            if let Some(&id) = ids.get(name) {
                return id;
            }
            let id = names.len();
            ids.insert(name.to_string(), id);
            names.push(name.to_string());
            parent_of.push(None);
            declared.push(false);
            id
        };

        for (node, parent) in parents {
            let id = intern(node, &mut names, &mut parent_of, &mut declared);
            if declared[id] {
                return Err(TreeError::DuplicateNode(node.clone()));
            }
            declared[id] = true;
            if let Some(p) = parent {
                if p == node {
                    return Err(TreeError::CycleDetected(node.clone()));
                }
                let pid = intern(p, &mut names, &mut parent_of, &mut declared);
                parent_of[id] = Some(pid);
            }
        }
        for leaf in leaf_order {
            intern(leaf, &mut names, &mut parent_of, &mut declared);
        }

        let n = names.len();
        let roots: Vec<usize> = (0..n).filter(|&v| parent_of[v].is_none()).collect();

        // Cycle / connectivity check: every node must reach a root.
        for start in 0..n {
            let mut steps = 0usize;
            let mut cur = start;
            while let Some(p) = parent_of[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(TreeError::CycleDetected(names[start].clone()));
                }
            }
        }
        if roots.len() > 1 {
            // A node listed only in leaf_order with no parent is disconnected
            // rather than a second root.
            let isolated: Vec<usize> = roots
                .iter()
                .copied()
                .filter(|&r| !parent_of.iter().any(|p| *p == Some(r)) && !declared[r])
                .collect();
            if let Some(&r) = isolated.first() {
                return Err(TreeError::DisconnectedNode(names[r].clone()));
            }
            return Err(TreeError::MultipleRoots(
                roots.iter().map(|&r| names[r].clone()).collect(),
            ));
        }
        let root = roots[0];

        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for v in 0..n {
            if let Some(p) = parent_of[v] {
                children[p].push(v);
            }
        }

        // Leaf order must list exactly the childless nodes.
        let childless: BTreeSet<usize> = (0..n).filter(|&v| children[v].is_empty()).collect();
        let mut listed = BTreeSet::new();
        for leaf in leaf_order {
            let id = ids[leaf.as_str()];
            if !listed.insert(id) {
                return Err(TreeError::LeafOrderMismatch(format!("leaf `{leaf}` listed twice")));
            }
            if !childless.contains(&id) {
                return Err(TreeError::LeafOrderMismatch(format!("`{leaf}` is not a leaf")));
            }
        }
        if let Some(&missing) = childless.difference(&listed).next() {
            return Err(TreeError::LeafOrderMismatch(format!(
                "leaf `{}` missing from leaf order",
                names[missing]
            )));
        }

        // Collapse single-child chains below the root.
        let mut alive = vec![true; n];
        let mut changed = true;
        while changed {
            changed = false;
            for v in 0..n {
                if !alive[v] || v == root || children[v].len() != 1 {
                    continue;
                }
                let child = children[v][0];
                let p = parent_of[v].expect("non-root has a parent");
                let pos = children[p].iter().position(|&c| c == v).expect("child link");
                children[p][pos] = child;
                parent_of[child] = Some(p);
                children[v].clear();
                alive[v] = false;
                changed = true;
            }
        }

        // Canonical layout: leaves in leaf_order, then internal nodes by
        // (height, leftmost leaf column).
        let leaf_ids: Vec<usize> = leaf_order.iter().map(|l| ids[l.as_str()]).collect();
        let mut column_of = vec![usize::MAX; n];
        for (c, &id) in leaf_ids.iter().enumerate() {
            column_of[id] = c;
        }
        let mut height = vec![0usize; n];
        let mut min_col = vec![usize::MAX; n];
        fn visit(v: usize, children: &[Vec<usize>], column_of: &[usize], height: &mut [usize], min_col: &mut [usize]) {
            if children[v].is_empty() {
                height[v] = 0;
                min_col[v] = column_of[v];
                return;
            }
            let mut h = 0;
            let mut m = usize::MAX;
            for &c in &children[v] {
                visit(c, children, column_of, height, min_col);
                h = h.max(height[c] + 1);
                m = m.min(min_col[c]);
            }
            height[v] = h;
            min_col[v] = m;
        }
        visit(root, &children, &column_of, &mut height, &mut min_col);

        let mut internal: Vec<usize> = (0..n)
            .filter(|&v| alive[v] && !children[v].is_empty())
            .collect();
        internal.sort_by_key(|&v| (height[v], min_col[v]));

        let order: Vec<usize> = leaf_ids.iter().copied().chain(internal).collect();
        let mut new_id = vec![usize::MAX; n];
        for (k, &old) in order.iter().enumerate() {
            new_id[old] = k;
        }
        let t = order.len();
        let mut out_names = Vec::with_capacity(t);
        let mut out_parent = Vec::with_capacity(t);
        let mut out_children = Vec::with_capacity(t);
        for &old in &order {
            out_names.push(names[old].clone());
            out_parent.push(parent_of[old].map(|p| new_id[p]));
            out_children.push(children[old].iter().map(|&c| new_id[c]).collect());
        }
        let leaf_nodes: Vec<usize> = (0..leaf_ids.len()).collect();
        Self::from_parts(out_names, out_parent, out_children, leaf_nodes)
    }

    /// Reconstructs the tree encoded by a 0/1 membership matrix (one row per
    /// node, one column per leaf). Rows must form a laminar family; leaf rows
    /// are the unit vectors. Row order is kept as given. Several top-level rows
    /// are accepted, which is what block-diagonal augmentation produces.
    pub fn from_membership(
        node_names: &[String],
        a: ArrayView2<'_, u8>,
    ) -> Result<Self, TreeError> {
        let (t, p) = a.dim();
        if t == 0 || p == 0 {
            return Err(TreeError::Empty);
        }
        if node_names.len() != t {
            return Err(TreeError::DimensionMismatch { expected: t, found: node_names.len() });
        }
        let mut sets: Vec<BTreeSet<usize>> = Vec::with_capacity(t);
        for (r, row) in a.outer_iter().enumerate() {
            let mut s = BTreeSet::new();
            for (c, &x) in row.iter().enumerate() {
                match x {
                    0 => {}
                    1 => {
                        s.insert(c);
                    }
                    other => {
                        return Err(TreeError::InvalidMembership(format!(
                            "row `{}` has entry {other}; only 0/1 allowed",
                            node_names[r]
                        )))
                    }
                }
            }
            if s.is_empty() {
                return Err(TreeError::InvalidMembership(format!(
                    "row `{}` has no leaves",
                    node_names[r]
                )));
            }
            sets.push(s);
        }
        let mut leaf_nodes = vec![usize::MAX; p];
        for (r, s) in sets.iter().enumerate() {
            if s.len() == 1 {
                let c = *s.iter().next().unwrap();
                if leaf_nodes[c] != usize::MAX {
                    return Err(TreeError::InvalidMembership(format!(
                        "rows `{}` and `{}` are identical",
                        node_names[leaf_nodes[c]], node_names[r]
                    )));
                }
                leaf_nodes[c] = r;
            }
        }
        if let Some(c) = leaf_nodes.iter().position(|&x| x == usize::MAX) {
            return Err(TreeError::InvalidMembership(format!("column {c} has no leaf row")));
        }
        let mut parent = vec![None; t];
        for v in 0..t {
            let mut best: Option<usize> = None;
            for u in 0..t {
                if u == v {
                    continue;
                }
                let (a_set, b_set) = (&sets[v], &sets[u]);
                let inter = a_set.intersection(b_set).count();
                if inter == 0 {
                    continue;
                }
                if a_set == b_set {
                    return Err(TreeError::InvalidMembership(format!(
                        "rows `{}` and `{}` are identical",
                        node_names[v], node_names[u]
                    )));
                }
                if inter == a_set.len() {
                    // u strictly contains v
                    if best.is_none_or(|b| sets[u].len() < sets[b].len()) {
                        best = Some(u);
                    }
                } else if inter != b_set.len() {
                    return Err(TreeError::InvalidMembership(format!(
                        "rows `{}` and `{}` overlap without nesting",
                        node_names[v], node_names[u]
                    )));
                }
            }
            parent[v] = best;
        }
        let mut children = vec![Vec::new(); t];
        for v in 0..t {
            if let Some(pa) = parent[v] {
                children[pa].push(v);
            }
        }
        for (v, ch) in children.iter().enumerate() {
            let covered: usize = ch.iter().map(|&c| sets[c].len()).sum();
            if !ch.is_empty() && covered != sets[v].len() {
                return Err(TreeError::InvalidMembership(format!(
                    "children of `{}` do not cover its leaves",
                    node_names[v]
                )));
            }
        }
        Self::from_parts(node_names.to_vec(), parent, children, leaf_nodes)
    }

    fn from_parts(
        names: Vec<String>,
        parent: Vec<Option<usize>>,
        children: Vec<Vec<usize>>,
        leaf_nodes: Vec<usize>,
    ) -> Result<Self, TreeError> {
        let t = names.len();
        let mut index = HashMap::with_capacity(t);
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(TreeError::DuplicateNode(name.clone()));
            }
        }
        let mut leaf_column = vec![None; t];
        for (c, &v) in leaf_nodes.iter().enumerate() {
            leaf_column[v] = Some(c);
        }
        let mut leaf_columns_of = vec![Vec::new(); t];
        for (c, &leaf) in leaf_nodes.iter().enumerate() {
            let mut cur = Some(leaf);
            while let Some(v) = cur {
                leaf_columns_of[v].push(c);
                cur = parent[v];
            }
        }
        for cols in &mut leaf_columns_of {
            cols.sort_unstable();
        }
        Ok(Self { names, parent, children, leaf_nodes, leaf_column, leaf_columns_of, index })
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_nodes.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, v: usize) -> &str {
        &self.names[v]
    }

    pub fn node(&self, name: &str) -> Result<usize, TreeError> {
        self.index.get(name).copied().ok_or_else(|| TreeError::UnknownNode(name.to_string()))
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    /// Nodes without a parent. A tree built from a parent list has exactly one.
    pub fn roots(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&v| self.parent[v].is_none()).collect()
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        self.leaf_column[v].is_some()
    }

    /// Leaf node owning feature column `c`.
    pub fn leaf_node(&self, column: usize) -> usize {
        self.leaf_nodes[column]
    }

    /// Feature column of leaf node `v`.
    pub fn leaf_column(&self, v: usize) -> Option<usize> {
        self.leaf_column[v]
    }

    /// Leaf names in feature-column order.
    pub fn leaf_names(&self) -> Vec<String> {
        self.leaf_nodes.iter().map(|&v| self.names[v].clone()).collect()
    }

    /// Feature columns of the leaves at or below `v`, ascending.
    pub fn leaf_columns(&self, v: usize) -> &[usize] {
        &self.leaf_columns_of[v]
    }

    /// Sibling nodes of `v` (sharing its parent, `v` excluded). Top-level
    /// nodes of a forest are siblings of each other.
    pub fn siblings(&self, v: usize) -> Vec<usize> {
        match self.parent[v] {
            Some(p) => self.children[p].iter().copied().filter(|&c| c != v).collect(),
            None => self.roots().into_iter().filter(|&r| r != v).collect(),
        }
    }

    pub fn ancestors(&self, v: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.parent[v];
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent[p];
        }
        out
    }

    pub fn descendants(&self, v: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack: Vec<usize> = self.children[v].clone();
        while let Some(u) = stack.pop() {
            out.push(u);
            stack.extend_from_slice(&self.children[u]);
        }
        out.sort_unstable();
        out
    }

    pub fn relations(&self, v: usize) -> Result<Relations, TreeError> {
        if v >= self.node_count() {
            return Err(TreeError::UnknownNode(v.to_string()));
        }
        Ok(Relations {
            parent: self.parent[v].into_iter().collect(),
            ancestors: self.ancestors(v).into_iter().collect(),
            descendants: self.descendants(v).into_iter().collect(),
            siblings: self.siblings(v).into_iter().collect(),
            leaves: self.leaf_columns_of[v].iter().map(|&c| self.leaf_nodes[c]).collect(),
        })
    }

    pub fn relations_by_name(&self, name: &str) -> Result<Relations, TreeError> {
        self.relations(self.node(name)?)
    }

    /// The `T × p` leaf-membership matrix.
    pub fn membership(&self) -> Array2<u8> {
        let mut a = Array2::zeros((self.node_count(), self.leaf_count()));
        for (v, cols) in self.leaf_columns_of.iter().enumerate() {
            for &c in cols {
                a[[v, c]] = 1;
            }
        }
        a
    }

    /// Aggregated features `X̃ = X Aᵀ`; column `v` is the sum of the leaf
    /// columns under node `v`.
    pub fn aggregate(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, TreeError> {
        let (n, p) = x.dim();
        if p != self.leaf_count() {
            return Err(TreeError::DimensionMismatch { expected: self.leaf_count(), found: p });
        }
        let t = self.node_count();
        let mut out = Array2::zeros((n, t));
        for (mut dst, src) in out.outer_iter_mut().zip(x.outer_iter()) {
            for (v, cols) in self.leaf_columns_of.iter().enumerate() {
                dst[v] = cols.iter().map(|&c| src[c]).sum();
            }
        }
        Ok(out)
    }

    /// Appends `count` stand-alone leaves (columns `p..p+count`) that take part
    /// in no aggregation, giving the block-diagonal membership `[[A, 0], [0, I]]`.
    /// They are named `free_1, free_2, ...`.
    pub fn augment_with_free_variables(&self, count: usize) -> Self {
        let names: Vec<String> = (1..=count).map(|k| format!("free_{k}")).collect();
        self.augment_with_named_variables(&names)
            .expect("generated names are fresh unless the tree already uses them")
    }

    pub fn augment_with_named_variables(&self, new_names: &[String]) -> Result<Self, TreeError> {
        let mut names = self.names.clone();
        let mut parent = self.parent.clone();
        let mut children = self.children.clone();
        let mut leaf_nodes = self.leaf_nodes.clone();
        for name in new_names {
            leaf_nodes.push(names.len());
            names.push(name.clone());
            parent.push(None);
            children.push(Vec::new());
        }
        Self::from_parts(names, parent, children, leaf_nodes)
    }

    /// Pairs `(v, d)` with both `v` and its descendant `d` in `selected`.
    pub fn nested_pairs(&self, selected: &[usize]) -> Vec<(usize, usize)> {
        let chosen: BTreeSet<usize> = selected.iter().copied().collect();
        let mut out = Vec::new();
        for &v in &chosen {
            for d in self.descendants(v) {
                if chosen.contains(&d) {
                    out.push((v, d));
                }
            }
        }
        out
    }
}
