//! Hierarchical symptom collection.
//!
//! A symptom implies all of its ancestors: a patient with "Upper Abdominal
//! Pain" also has "Abdominal Pain", "Pain" and the root symptom. The
//! [`SymptomOntology`] provides this closure together with a tree distance
//! used to rank how hard two symptoms are to tell apart.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Identifier of a symptom node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymptomId(pub String);

impl SymptomId {
    pub fn new(id: impl Into<String>) -> Self {
        SymptomId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SymptomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SymptomId {
    fn from(s: &str) -> Self {
        SymptomId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymptomNode {
    pub id: SymptomId,
    pub name: String,
    /// Layman description used as the query text of the symptom model.
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<SymptomId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OntologyError {
    #[error("failed to read ontology document: {0}")]
    Io(String),
    #[error("malformed ontology document: {0}")]
    Parse(String),
    #[error("ontology document contains no nodes")]
    Empty,
    #[error("duplicate symptom id `{0}`")]
    DuplicateId(SymptomId),
    #[error("symptom `{node}` refers to unknown parent `{parent}`")]
    DanglingParent { node: SymptomId, parent: SymptomId },
    #[error("multiple roots: `{0}` and `{1}`")]
    MultipleRoots(SymptomId, SymptomId),
    #[error("no root node (every node has a parent)")]
    NoRoot,
    #[error("cycle through symptom `{0}`")]
    Cycle(SymptomId),
    #[error("symptom `{0}` has an empty description")]
    EmptyDescription(SymptomId),
    #[error("unknown symptom id `{0}`")]
    UnknownId(SymptomId),
}

#[derive(Debug, Deserialize, Serialize)]
struct OntologyDocument {
    #[serde(default)]
    node: Vec<SymptomNode>,
}

/// Immutable, validated symptom tree.
#[derive(Debug, Clone)]
pub struct SymptomOntology {
    nodes: Vec<SymptomNode>,
    index: HashMap<SymptomId, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    root: usize,
}

impl SymptomOntology {
    /// Parses and validates an ontology document (TOML, one `[[node]]` table per symptom).
    pub fn from_toml_str(source: &str) -> Result<Self, OntologyError> {
        let doc: OntologyDocument = toml::from_str(source).map_err(|e| OntologyError::Parse(e.to_string()))?;
        Self::from_nodes(doc.node)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OntologyError> {
        let source = std::fs::read_to_string(path.as_ref())
            .map_err(|e| OntologyError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&source)
    }

    pub fn from_nodes(nodes: Vec<SymptomNode>) -> Result<Self, OntologyError> {
        if nodes.is_empty() {
            return Err(OntologyError::Empty);
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.id.clone(), i).is_some() {
                return Err(OntologyError::DuplicateId(node.id.clone()));
            }
            if node.description.trim().is_empty() {
                return Err(OntologyError::EmptyDescription(node.id.clone()));
            }
        }

        let mut parent = Vec::with_capacity(nodes.len());
        let mut root = None;
        for (i, node) in nodes.iter().enumerate() {
            match &node.parent {
                Some(p) => {
                    let &pi = index.get(p).ok_or_else(|| OntologyError::DanglingParent {
                        node: node.id.clone(),
                        parent: p.clone(),
                    })?;
                    parent.push(Some(pi));
                }
                None => {
                    if let Some(r) = root {
                        let r: usize = r;
                        return Err(OntologyError::MultipleRoots(nodes[r].id.clone(), node.id.clone()));
                    }
                    root = Some(i);
                    parent.push(None);
                }
            }
        }

        // Cycle detection doubles as depth computation: every walk must reach
        // the root within `n` steps.
        let n = nodes.len();
        let mut depth = vec![usize::MAX; n];
        for start in 0..n {
            let mut path = Vec::new();
            let mut cur = start;
            loop {
                if depth[cur] != usize::MAX {
                    break;
                }
                if path.len() > n || path.contains(&cur) {
                    return Err(OntologyError::Cycle(nodes[cur].id.clone()));
                }
                path.push(cur);
                match parent[cur] {
                    Some(p) => cur = p,
                    None => {
                        depth[cur] = 0;
                        path.pop();
                        break;
                    }
                }
            }
            while let Some(node) = path.pop() {
                let p = parent[node].expect("non-root on path");
                depth[node] = depth[p] + 1;
            }
        }
        let root = root.ok_or(OntologyError::NoRoot)?;

        let mut children = vec![Vec::new(); n];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }

        Ok(SymptomOntology {
            nodes,
            index,
            parent,
            children,
            depth,
            root,
        })
    }

    /// Canonical TOML serialization; nodes in load order.
    pub fn to_toml_string(&self) -> String {
        let doc = OntologyDocument {
            node: self.nodes.clone(),
        };
        toml::to_string(&doc).expect("ontology serializes")
    }

    /// SHA-256 over a canonical, order-independent rendering of all nodes.
    pub fn content_hash(&self) -> String {
        let mut ids: Vec<usize> = (0..self.nodes.len()).collect();
        ids.sort_by(|&a, &b| self.nodes[a].id.cmp(&self.nodes[b].id));
        let mut hasher = Sha256::new();
        for i in ids {
            let node = &self.nodes[i];
            let parent = node.parent.as_ref().map(|p| p.as_str()).unwrap_or("");
            hasher.update(node.id.as_str().as_bytes());
            hasher.update([0x1f]);
            hasher.update(node.name.as_bytes());
            hasher.update([0x1f]);
            hasher.update(node.description.as_bytes());
            hasher.update([0x1f]);
            hasher.update(parent.as_bytes());
            hasher.update([0x1e]);
        }
        hex::encode(hasher.finalize())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> &SymptomId {
        &self.nodes[self.root].id
    }

    pub fn contains(&self, id: &SymptomId) -> bool {
        self.index.contains_key(id)
    }

    pub fn node(&self, id: &SymptomId) -> Result<&SymptomNode, OntologyError> {
        Ok(&self.nodes[self.idx(id)?])
    }

    /// All nodes in document order.
    pub fn nodes(&self) -> impl Iterator<Item = &SymptomNode> {
        self.nodes.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &SymptomId> {
        self.nodes.iter().map(|n| &n.id)
    }

    pub fn depth(&self, id: &SymptomId) -> Result<usize, OntologyError> {
        Ok(self.depth[self.idx(id)?])
    }

    pub fn parent(&self, id: &SymptomId) -> Result<Option<&SymptomId>, OntologyError> {
        Ok(self.parent[self.idx(id)?].map(|p| &self.nodes[p].id))
    }

    pub fn children(&self, id: &SymptomId) -> Result<Vec<&SymptomId>, OntologyError> {
        Ok(self.children[self.idx(id)?]
            .iter()
            .map(|&c| &self.nodes[c].id)
            .collect())
    }

    pub fn is_leaf(&self, id: &SymptomId) -> Result<bool, OntologyError> {
        Ok(self.children[self.idx(id)?].is_empty())
    }

    pub fn leaves(&self) -> Vec<&SymptomId> {
        (0..self.nodes.len())
            .filter(|&i| self.children[i].is_empty())
            .map(|i| &self.nodes[i].id)
            .collect()
    }

    /// Ancestors of `id`, nearest parent first and the root last.
    pub fn ancestors(&self, id: &SymptomId) -> Result<Vec<SymptomId>, OntologyError> {
        let mut cur = self.idx(id)?;
        let mut out = Vec::with_capacity(self.depth[cur]);
        while let Some(p) = self.parent[cur] {
            out.push(self.nodes[p].id.clone());
            cur = p;
        }
        Ok(out)
    }

    /// Input symptoms together with all of their ancestors.
    pub fn label_closure<'a, I>(&self, ids: I) -> Result<BTreeSet<SymptomId>, OntologyError>
    where
        I: IntoIterator<Item = &'a SymptomId>,
    {
        let mut out = BTreeSet::new();
        for id in ids {
            let mut cur = self.idx(id)?;
            loop {
                if !out.insert(self.nodes[cur].id.clone()) {
                    // Remaining ancestors are already present.
                    break;
                }
                match self.parent[cur] {
                    Some(p) => cur = p,
                    None => break,
                }
            }
        }
        Ok(out)
    }

    /// Number of edges on the tree path between `a` and `b`.
    pub fn hierarchy_distance(&self, a: &SymptomId, b: &SymptomId) -> Result<usize, OntologyError> {
        let (mut x, mut y) = (self.idx(a)?, self.idx(b)?);
        let mut dist = 0;
        while self.depth[x] > self.depth[y] {
            x = self.parent[x].expect("deeper node has a parent");
            dist += 1;
        }
        while self.depth[y] > self.depth[x] {
            y = self.parent[y].expect("deeper node has a parent");
            dist += 1;
        }
        while x != y {
            x = self.parent[x].expect("distinct nodes at equal depth are below the root");
            y = self.parent[y].expect("distinct nodes at equal depth are below the root");
            dist += 2;
        }
        Ok(dist)
    }

    /// Smallest distance from `id` to any symptom in `targets`.
    pub fn min_distance<'a, I>(&self, id: &SymptomId, targets: I) -> Result<Option<usize>, OntologyError>
    where
        I: IntoIterator<Item = &'a SymptomId>,
    {
        let mut best: Option<usize> = None;
        for t in targets {
            let d = self.hierarchy_distance(id, t)?;
            best = Some(best.map_or(d, |b| b.min(d)));
        }
        Ok(best)
    }

    fn idx(&self, id: &SymptomId) -> Result<usize, OntologyError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| OntologyError::UnknownId(id.clone()))
    }
}
