//! Category hierarchy, novel-path classification, and the tree-to-DAG
//! transformation.
//!
//! The graph is built from gold paths: node identity is the exact label
//! string, edges are (parent, child) pairs, and level status is positional
//! (a label is top-level if it ever opens a gold path, leaf if it ever closes
//! one). Because decoding is unconstrained, predicted paths may be existing,
//! novel, or defective; [`TaxonomyGraph::classify_path`] sorts them into five
//! verdict kinds and [`TaxonomyGraph::apply_novel_paths`] grafts accepted
//! novel paths onto the graph while keeping it acyclic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CategoryPath;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("graph contains a cycle through {0:?}")]
    CycleDetected(String),
}

/// Where an edge came from: the original gold tree or an accepted novel path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeOrigin {
    Tree,
    Novel,
}

impl fmt::Display for EdgeOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeOrigin::Tree => write!(f, "tree"),
            EdgeOrigin::Novel => write!(f, "novel"),
        }
    }
}

/// Verdict kind for one predicted path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Existing,
    NovelAccepted,
    RejectedUnknownNode,
    RejectedCycle,
    RejectedMalformed,
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VerdictKind::Existing => "existing",
            VerdictKind::NovelAccepted => "novel_accepted",
            VerdictKind::RejectedUnknownNode => "rejected_unknown_node",
            VerdictKind::RejectedCycle => "rejected_cycle",
            VerdictKind::RejectedMalformed => "rejected_malformed",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PathVerdict {
    pub kind: VerdictKind,
    pub detail: String,
}

impl PathVerdict {
    fn new(kind: VerdictKind, detail: impl Into<String>) -> Self {
        PathVerdict {
            kind,
            detail: detail.into(),
        }
    }
}

/// A predicted path together with its verdict.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifiedPath {
    pub path: CategoryPath,
    pub verdict: PathVerdict,
}

/// Result of applying accepted novel paths to a graph.
#[derive(Debug)]
pub struct ApplyOutcome {
    pub graph: TaxonomyGraph,
    pub edges_added: usize,
    /// NOVEL_ACCEPTED entries that would have closed a cycle against the
    /// evolving graph (possible when verdicts from independent
    /// classifications are combined) are skipped and counted here.
    pub rejected_cycles: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaxonomyGraph {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    /// Positional level flags derived from gold paths only.
    ever_first: Vec<bool>,
    ever_last: Vec<bool>,
    children: Vec<Vec<usize>>,
    edges: BTreeMap<(usize, usize), EdgeOrigin>,
    /// Gold paths plus accepted novel paths.
    known_paths: BTreeSet<String>,
    gold_path_count: usize,
}

impl TaxonomyGraph {
    /// Build from gold paths. Identical labels merge into one node wherever
    /// they occur.
    pub fn from_paths<'a, I>(paths: I) -> Self
    where
        I: IntoIterator<Item = &'a CategoryPath>,
    {
        let mut g = TaxonomyGraph {
            labels: Vec::new(),
            index: HashMap::new(),
            ever_first: Vec::new(),
            ever_last: Vec::new(),
            children: Vec::new(),
            edges: BTreeMap::new(),
            known_paths: BTreeSet::new(),
            gold_path_count: 0,
        };
        for path in paths {
            debug_assert!(path.is_well_formed(), "gold path {path} is malformed");
            let ids: Vec<usize> = path.nodes().iter().map(|n| g.intern(n)).collect();
            g.ever_first[ids[0]] = true;
            g.ever_last[*ids.last().unwrap()] = true;
            for w in ids.windows(2) {
                g.add_edge(w[0], w[1], EdgeOrigin::Tree);
            }
            if g.known_paths.insert(path.serialize()) {
                g.gold_path_count += 1;
            }
        }
        g
    }

    fn intern(&mut self, label: &str) -> usize {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len();
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), id);
        self.ever_first.push(false);
        self.ever_last.push(false);
        self.children.push(Vec::new());
        id
    }

    fn add_edge(&mut self, parent: usize, child: usize, origin: EdgeOrigin) -> bool {
        if self.edges.contains_key(&(parent, child)) {
            return false;
        }
        self.edges.insert((parent, child), origin);
        self.children[parent].push(child);
        true
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn known_path_count(&self) -> usize {
        self.known_paths.len()
    }

    pub fn contains_node(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    pub fn contains_edge(&self, parent: &str, child: &str) -> bool {
        match (self.index.get(parent), self.index.get(child)) {
            (Some(&p), Some(&c)) => self.edges.contains_key(&(p, c)),
            _ => false,
        }
    }

    pub fn contains_path(&self, path: &CategoryPath) -> bool {
        self.known_paths.contains(&path.serialize())
    }

    /// Did this label ever open a gold path?
    pub fn is_top_level(&self, label: &str) -> bool {
        self.index.get(label).is_some_and(|&i| self.ever_first[i])
    }

    /// Did this label ever close a gold path?
    pub fn is_leaf(&self, label: &str) -> bool {
        self.index.get(label).is_some_and(|&i| self.ever_last[i])
    }

    /// Edges as (parent, child, origin) sorted by labels.
    pub fn edges(&self) -> Vec<(&str, &str, EdgeOrigin)> {
        let mut out: Vec<(&str, &str, EdgeOrigin)> = self
            .edges
            .iter()
            .map(|(&(p, c), &o)| (self.labels[p].as_str(), self.labels[c].as_str(), o))
            .collect();
        out.sort();
        out
    }

    /// All node labels in insertion order.
    pub fn node_labels(&self) -> &[String] {
        &self.labels
    }

    /// Kahn-style peeling; returns a topological order or the labels stuck in
    /// a cycle.
    pub fn topo_order(&self) -> Result<Vec<String>, TaxonomyError> {
        let n = self.labels.len();
        let mut indeg = vec![0usize; n];
        for &(_, c) in self.edges.keys() {
            indeg[c] += 1;
        }
        let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop() {
            order.push(i);
            for &c in &self.children[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push(c);
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap();
            return Err(TaxonomyError::CycleDetected(self.labels[stuck].clone()));
        }
        Ok(order.into_iter().map(|i| self.labels[i].clone()).collect())
    }

    pub fn is_acyclic(&self) -> bool {
        self.topo_order().is_ok()
    }

    /// True when every node has at most one parent and the graph is acyclic —
    /// the shape a clean gold catalog produces.
    pub fn is_forest(&self) -> bool {
        let mut parent_count = vec![0usize; self.labels.len()];
        for &(_, c) in self.edges.keys() {
            parent_count[c] += 1;
        }
        parent_count.iter().all(|&n| n <= 1) && self.is_acyclic()
    }

    /// Would adding all of `new_edges` (on top of the current edges) create a
    /// cycle?
    fn would_cycle(&self, new_edges: &[(usize, usize)]) -> bool {
        let n = self.labels.len();
        let mut indeg = vec![0usize; n];
        for &(_, c) in self.edges.keys() {
            indeg[c] += 1;
        }
        for &(_, c) in new_edges {
            indeg[c] += 1;
        }
        let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0usize;
        while let Some(i) = queue.pop() {
            seen += 1;
            let extra = new_edges.iter().filter(|&&(p, _)| p == i).map(|&(_, c)| c);
            for c in self.children[i].iter().copied().chain(extra) {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push(c);
                }
            }
        }
        seen < n
    }

    /// Consecutive (parent, child) id pairs of `path` that are not yet edges.
    /// Only call with paths whose nodes all exist.
    fn missing_edges(&self, path: &CategoryPath) -> Vec<(usize, usize)> {
        path.nodes()
            .windows(2)
            .map(|w| (self.index[&w[0]], self.index[&w[1]]))
            .filter(|key| !self.edges.contains_key(key))
            .collect()
    }

    /// Classify one predicted path against this graph.
    pub fn classify_path(&self, path: &CategoryPath) -> PathVerdict {
        if !path.is_well_formed() {
            let detail = if path.is_empty() {
                "empty path".to_owned()
            } else {
                "repeated or invalid node label".to_owned()
            };
            return PathVerdict::new(VerdictKind::RejectedMalformed, detail);
        }
        let serialized = path.serialize();
        if self.known_paths.contains(&serialized) {
            return PathVerdict::new(VerdictKind::Existing, "path already known");
        }
        if let Some(node) = path.nodes().iter().find(|n| !self.contains_node(n)) {
            return PathVerdict::new(
                VerdictKind::RejectedUnknownNode,
                format!("unknown node {node:?}"),
            );
        }
        let new_edges = self.missing_edges(path);
        if self.would_cycle(&new_edges) {
            let (p, c) = new_edges[0];
            return PathVerdict::new(
                VerdictKind::RejectedCycle,
                format!(
                    "adding {} -> {} would close a cycle",
                    self.labels[p], self.labels[c]
                ),
            );
        }
        PathVerdict::new(
            VerdictKind::NovelAccepted,
            format!("{} new edge(s)", new_edges.len()),
        )
    }

    /// Add the edges of all NOVEL_ACCEPTED paths, returning the updated graph.
    /// Acyclicity is preserved by construction: an entry that would close a
    /// cycle against the evolving graph is skipped and counted instead.
    pub fn apply_novel_paths(&self, classified: &[ClassifiedPath]) -> ApplyOutcome {
        let mut graph = self.clone();
        let mut edges_added = 0usize;
        let mut rejected_cycles = 0usize;
        for cp in classified {
            if cp.verdict.kind != VerdictKind::NovelAccepted {
                continue;
            }
            if cp.path.nodes().iter().any(|n| !graph.contains_node(n)) {
                // Foreign verdict produced against some other graph; there is
                // no sound way to apply it here.
                rejected_cycles += 1;
                continue;
            }
            let new_edges = graph.missing_edges(&cp.path);
            if graph.would_cycle(&new_edges) {
                rejected_cycles += 1;
                continue;
            }
            for (p, c) in new_edges {
                graph.add_edge(p, c, EdgeOrigin::Novel);
                edges_added += 1;
            }
            graph.known_paths.insert(cp.path.serialize());
        }
        ApplyOutcome {
            graph,
            edges_added,
            rejected_cycles,
        }
    }

    /// Classify a prediction batch sequentially: each verdict is computed
    /// against the gold graph plus all previously accepted novel paths, so a
    /// duplicate novel prediction reads as EXISTING and a permutation that
    /// closes a cycle with an earlier acceptance reads as REJECTED_CYCLE.
    /// Returns the verdicts and the final DAG.
    pub fn classify_and_apply<'a, I>(&self, paths: I) -> (Vec<ClassifiedPath>, TaxonomyGraph)
    where
        I: IntoIterator<Item = &'a CategoryPath>,
    {
        let mut graph = self.clone();
        let mut out = Vec::new();
        for path in paths {
            let verdict = graph.classify_path(path);
            if verdict.kind == VerdictKind::NovelAccepted {
                for (p, c) in graph.missing_edges(path) {
                    graph.add_edge(p, c, EdgeOrigin::Novel);
                }
                graph.known_paths.insert(path.serialize());
            }
            out.push(ClassifiedPath {
                path: path.clone(),
                verdict,
            });
        }
        (out, graph)
    }

    /// Edge-list TSV `parent<TAB>child<TAB>origin`, preceded by `"# "`
    /// metadata lines.
    pub fn export_edges_tsv(&self, meta: &[String]) -> String {
        let mut out = String::new();
        for m in meta {
            out.push_str("# ");
            out.push_str(m);
            out.push('\n');
        }
        for (p, c, o) in self.edges() {
            out.push_str(&format!("{p}\t{c}\t{o}\n"));
        }
        out
    }
}

/// Aggregate verdict counts and the positional shape of accepted novel paths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathShapeReport {
    pub count_existing: usize,
    pub count_novel: usize,
    pub count_rejected_unknown_node: usize,
    pub count_rejected_cycle: usize,
    pub count_rejected_malformed: usize,
    /// Fraction of NOVEL_ACCEPTED paths whose first node is a gold top-level
    /// label. Zero novel paths yields 0.0.
    pub fraction_top_first: f64,
    /// Fraction of NOVEL_ACCEPTED paths whose last node is a gold leaf label.
    pub fraction_leaf_last: f64,
}

impl PathShapeReport {
    pub fn total(&self) -> usize {
        self.count_existing
            + self.count_novel
            + self.count_rejected_unknown_node
            + self.count_rejected_cycle
            + self.count_rejected_malformed
    }
}

/// Summarize a classified batch against the graph whose gold paths define
/// top-level and leaf status.
pub fn path_shape_report(classified: &[ClassifiedPath], gold: &TaxonomyGraph) -> PathShapeReport {
    let mut report = PathShapeReport {
        count_existing: 0,
        count_novel: 0,
        count_rejected_unknown_node: 0,
        count_rejected_cycle: 0,
        count_rejected_malformed: 0,
        fraction_top_first: 0.0,
        fraction_leaf_last: 0.0,
    };
    let mut top_first = 0usize;
    let mut leaf_last = 0usize;
    for cp in classified {
        match cp.verdict.kind {
            VerdictKind::Existing => report.count_existing += 1,
            VerdictKind::NovelAccepted => {
                report.count_novel += 1;
                if cp.path.root().is_some_and(|r| gold.is_top_level(r)) {
                    top_first += 1;
                }
                if cp.path.leaf().is_some_and(|l| gold.is_leaf(l)) {
                    leaf_last += 1;
                }
            }
            VerdictKind::RejectedUnknownNode => report.count_rejected_unknown_node += 1,
            VerdictKind::RejectedCycle => report.count_rejected_cycle += 1,
            VerdictKind::RejectedMalformed => report.count_rejected_malformed += 1,
        }
    }
    if report.count_novel > 0 {
        report.fraction_top_first = top_first as f64 / report.count_novel as f64;
        report.fraction_leaf_last = leaf_last as f64 / report.count_novel as f64;
    }
    report
}
