//! Concept forest for radiological findings, differential diagnoses and
//! anatomical localizations, plus the flat group of special labels.
//!
//! A taxonomy is read from a small indentation-based text document:
//!
//! ```text
//! # comment
//! [findings]
//! findings | Radiological findings
//!   infiltrates | infiltrates
//!     interstitial-pattern | interstitial pattern
//!     alveolar-pattern | alveolar pattern
//!   air-bronchogram | air bronchogram | parent=alveolar-pattern
//! [diagnoses]
//! differential-diagnosis | Differential diagnosis
//! [localizations]
//! localization | Localization
//! [special]
//! normal | normal
//! ```
//!
//! Each node line is `id | display name`, optionally followed by
//! `| parent=<id>`, which overrides the parent implied by indentation. A line
//! at indentation zero without an explicit parent is the root of its tree.
//! Canonical indices follow document order.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Identifier of a taxonomy node: a CUI code or a slug.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(String);

impl NodeId {
    pub fn new(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        let bad = value.is_empty()
            || value
                .chars()
                .any(|c| c.is_whitespace() || c == '|' || c == ',');
        if bad {
            return Err(Error::InvalidNodeId(value));
        }
        Ok(NodeId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NodeId::new(s)
    }
}

impl TryFrom<String> for NodeId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        NodeId::new(value)
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> String {
        id.0
    }
}

impl AsRef<str> for NodeId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Findings,
    Diagnoses,
    Localizations,
    /// normal, exclude, unchanged, suboptimal study
    Special,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::Findings,
        Group::Diagnoses,
        Group::Localizations,
        Group::Special,
    ];

    pub fn section_name(self) -> &'static str {
        match self {
            Group::Findings => "findings",
            Group::Diagnoses => "diagnoses",
            Group::Localizations => "localizations",
            Group::Special => "special",
        }
    }

    fn from_section(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.section_name() == name)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.section_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub id: NodeId,
    pub name: String,
    pub parent: Option<NodeId>,
    pub group: Group,
}

impl TaxonomyNode {
    pub fn new(id: NodeId, name: impl Into<String>, parent: Option<NodeId>, group: Group) -> Self {
        TaxonomyNode {
            id,
            name: name.into(),
            parent,
            group,
        }
    }

    pub fn is_special(&self) -> bool {
        self.group == Group::Special
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaxonomyErrorKind {
    Syntax(String),
    Empty,
    DuplicateId,
    UnknownParent(NodeId),
    Cycle,
    MultipleRoots(Group),
    SpecialWithParent,
    ParentIsSpecial(NodeId),
    CrossGroupParent(NodeId),
}

impl fmt::Display for TaxonomyErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaxonomyErrorKind::Syntax(msg) => write!(f, "syntax error: {msg}"),
            TaxonomyErrorKind::Empty => f.write_str("empty document"),
            TaxonomyErrorKind::DuplicateId => f.write_str("duplicate id"),
            TaxonomyErrorKind::UnknownParent(p) => write!(f, "unknown parent reference `{p}`"),
            TaxonomyErrorKind::Cycle => f.write_str("cycle detected"),
            TaxonomyErrorKind::MultipleRoots(g) => write!(f, "second root in tree `{g}`"),
            TaxonomyErrorKind::SpecialWithParent => {
                f.write_str("special labels cannot have a parent")
            }
            TaxonomyErrorKind::ParentIsSpecial(p) => {
                write!(f, "special label `{p}` cannot have children")
            }
            TaxonomyErrorKind::CrossGroupParent(p) => {
                write!(f, "parent `{p}` belongs to a different tree")
            }
        }
    }
}

/// One invariant violation. `position` is the 0-based declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub position: usize,
    pub id: NodeId,
    pub kind: TaxonomyErrorKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "entry {} `{}`: {}", self.position + 1, self.id, self.kind)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

/// Checks the forest invariants over raw node declarations.
pub fn validate_nodes(nodes: &[TaxonomyNode]) -> ValidationReport {
    let mut violations = Vec::new();
    if nodes.is_empty() {
        return ValidationReport { violations };
    }

    let mut first_pos: HashMap<&NodeId, usize> = HashMap::with_capacity(nodes.len());
    for (pos, node) in nodes.iter().enumerate() {
        if first_pos.contains_key(&node.id) {
            violations.push(Violation {
                position: pos,
                id: node.id.clone(),
                kind: TaxonomyErrorKind::DuplicateId,
            });
        } else {
            first_pos.insert(&node.id, pos);
        }
    }

    let mut parent_pos: Vec<Option<usize>> = vec![None; nodes.len()];
    let mut roots_seen: HashMap<Group, usize> = HashMap::new();
    for (pos, node) in nodes.iter().enumerate() {
        match &node.parent {
            None => {
                if node.is_special() {
                    continue;
                }
                if roots_seen.insert(node.group, pos).is_some() {
                    violations.push(Violation {
                        position: pos,
                        id: node.id.clone(),
                        kind: TaxonomyErrorKind::MultipleRoots(node.group),
                    });
                }
            }
            Some(parent) => {
                if node.is_special() {
                    violations.push(Violation {
                        position: pos,
                        id: node.id.clone(),
                        kind: TaxonomyErrorKind::SpecialWithParent,
                    });
                    continue;
                }
                let Some(&p) = first_pos.get(parent) else {
                    violations.push(Violation {
                        position: pos,
                        id: node.id.clone(),
                        kind: TaxonomyErrorKind::UnknownParent(parent.clone()),
                    });
                    continue;
                };
                if nodes[p].is_special() {
                    violations.push(Violation {
                        position: pos,
                        id: node.id.clone(),
                        kind: TaxonomyErrorKind::ParentIsSpecial(parent.clone()),
                    });
                    continue;
                }
                if nodes[p].group != node.group {
                    violations.push(Violation {
                        position: pos,
                        id: node.id.clone(),
                        kind: TaxonomyErrorKind::CrossGroupParent(parent.clone()),
                    });
                }
                parent_pos[pos] = Some(p);
            }
        }
    }

    // 0 = unvisited, 1 = on current path, 2 = finished
    let mut state = vec![0u8; nodes.len()];
    for start in 0..nodes.len() {
        if state[start] != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut cur = Some(start);
        while let Some(i) = cur {
            match state[i] {
                2 => break,
                1 => {
                    let cycle_start = path.iter().position(|&j| j == i).unwrap_or(0);
                    let first = path[cycle_start..].iter().copied().min().unwrap_or(i);
                    violations.push(Violation {
                        position: first,
                        id: nodes[first].id.clone(),
                        kind: TaxonomyErrorKind::Cycle,
                    });
                    break;
                }
                _ => {
                    state[i] = 1;
                    path.push(i);
                    cur = parent_pos[i];
                }
            }
        }
        for i in path {
            state[i] = 2;
        }
    }

    violations.sort_by_key(|v| v.position);
    ValidationReport { violations }
}

/// A validated, immutable concept forest with canonical dense indexing.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    nodes: Vec<TaxonomyNode>,
    index: HashMap<NodeId, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    checksum: String,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
    }
}

impl Taxonomy {
    /// Builds a taxonomy from declarations in canonical order. Errors carry the
    /// 1-based declaration position in place of a line number.
    pub fn from_nodes(nodes: Vec<TaxonomyNode>) -> Result<Self> {
        let lines: Vec<usize> = (1..=nodes.len()).collect();
        Self::build(nodes, &lines, 0)
    }

    fn build(nodes: Vec<TaxonomyNode>, lines: &[usize], last_line: usize) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Taxonomy {
                line: last_line,
                id: None,
                kind: TaxonomyErrorKind::Empty,
            });
        }
        if let Some(v) = validate_nodes(&nodes).violations.into_iter().next() {
            return Err(Error::Taxonomy {
                line: lines[v.position],
                id: Some(v.id.to_string()),
                kind: v.kind,
            });
        }

        let index: HashMap<NodeId, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        let parent: Vec<Option<usize>> = nodes
            .iter()
            .map(|n| n.parent.as_ref().map(|p| index[p]))
            .collect();
        let mut children = vec![Vec::new(); nodes.len()];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }

        let mut canonical = String::new();
        for n in &nodes {
            canonical.push_str(n.group.section_name());
            canonical.push('\t');
            canonical.push_str(n.id.as_str());
            canonical.push('\t');
            if let Some(p) = &n.parent {
                canonical.push_str(p.as_str());
            }
            canonical.push('\n');
        }
        let digest = Sha256::digest(canonical.as_bytes());
        let checksum = digest.iter().map(|b| format!("{b:02x}")).collect();

        Ok(Taxonomy {
            nodes,
            index,
            parent,
            children,
            checksum,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TaxonomyNode] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> &TaxonomyNode {
        &self.nodes[index]
    }

    pub fn index_of(&self, id: &NodeId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require_index(&self, id: &NodeId) -> Result<usize> {
        self.index_of(id).ok_or_else(|| Error::UnknownNode(id.clone()))
    }

    pub fn id_of(&self, index: usize) -> &NodeId {
        &self.nodes[index].id
    }

    pub fn get(&self, id: &NodeId) -> Option<&TaxonomyNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    pub fn parent_index(&self, index: usize) -> Option<usize> {
        self.parent[index]
    }

    pub fn children_indices(&self, index: usize) -> &[usize] {
        &self.children[index]
    }

    /// SHA-256 over group, id and parent of every node in canonical order.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Parent-to-child edges as (child, parent) index pairs in child order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (c, p)))
    }

    /// Roots of the three trees, in canonical order.
    pub fn roots(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.parent[i].is_none() && !self.nodes[i].is_special())
            .collect()
    }

    /// Childless tree nodes (special labels excluded).
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.children[i].is_empty() && !self.nodes[i].is_special())
            .collect()
    }

    pub fn specials(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.nodes[i].is_special())
            .collect()
    }

    pub(crate) fn ancestor_indices(&self, index: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.parent[index];
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent[p];
        }
        out
    }

    /// Parent, grandparent, ... up to the tree root, excluding `id` itself.
    pub fn ancestors(&self, id: &NodeId) -> Result<Vec<NodeId>> {
        let i = self.require_index(id)?;
        Ok(self
            .ancestor_indices(i)
            .into_iter()
            .map(|a| self.nodes[a].id.clone())
            .collect())
    }

    /// Indices of all strict descendants, in canonical order.
    pub(crate) fn descendant_indices(&self, index: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut queue: VecDeque<usize> = self.children[index].iter().copied().collect();
        while let Some(i) = queue.pop_front() {
            out.push(i);
            queue.extend(self.children[i].iter().copied());
        }
        out.sort_unstable();
        out
    }

    /// Transitive closure of children, excluding `id`, in canonical order.
    pub fn descendants(&self, id: &NodeId) -> Result<Vec<NodeId>> {
        let i = self.require_index(id)?;
        Ok(self
            .descendant_indices(i)
            .into_iter()
            .map(|d| self.nodes[d].id.clone())
            .collect())
    }

    /// Node ids used as model outputs, in canonical order.
    pub fn output_ids(&self, include_specials: bool) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| include_specials || !n.is_special())
            .map(|n| n.id.clone())
            .collect()
    }

    /// Always empty for a constructed taxonomy; kept for symmetry with
    /// [`validate_nodes`].
    pub fn validate(&self) -> ValidationReport {
        validate_nodes(&self.nodes)
    }

    /// Serializes to the taxonomy document format. Parsing the result yields
    /// an identical taxonomy.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        let mut order: Vec<Group> = Vec::new();
        for n in &self.nodes {
            if !order.contains(&n.group) {
                order.push(n.group);
            }
        }
        for group in order {
            out.push('[');
            out.push_str(group.section_name());
            out.push_str("]\n");
            let mut stack: Vec<(usize, usize)> = Vec::new();
            for (i, n) in self.nodes.iter().enumerate().filter(|(_, n)| n.group == group) {
                let line_start = out.len();
                match self.parent[i] {
                    None => {
                        stack.clear();
                        stack.push((0, i));
                        push_node_line(&mut out, 0, n, false);
                    }
                    Some(p) => {
                        if let Some(d) = stack.iter().position(|&(_, s)| s == p) {
                            let indent = stack[d].0 + 2;
                            stack.truncate(d + 1);
                            stack.push((indent, i));
                            push_node_line(&mut out, indent, n, false);
                        } else {
                            stack.retain(|&(ind, _)| ind < 2);
                            stack.push((2, i));
                            push_node_line(&mut out, 2, n, true);
                        }
                    }
                }
                debug_assert!(out.len() > line_start);
            }
        }
        out
    }

    /// Renders the forest with box-drawing branches, one tree per block.
    pub fn render_tree(&self) -> String {
        fn walk(t: &Taxonomy, i: usize, prefix: &str, last: bool, out: &mut String) {
            out.push_str(prefix);
            out.push_str(if last { "└── " } else { "├── " });
            out.push_str(&t.nodes[i].name);
            out.push_str(&format!("  [{}]\n", t.nodes[i].id));
            let child_prefix = format!("{prefix}{}", if last { "    " } else { "│   " });
            let kids = &t.children[i];
            for (k, &c) in kids.iter().enumerate() {
                walk(t, c, &child_prefix, k + 1 == kids.len(), out);
            }
        }

        let mut out = String::new();
        for r in self.roots() {
            out.push_str(&format!("{}  [{}]\n", self.nodes[r].name, self.nodes[r].id));
            let kids = &self.children[r];
            for (k, &c) in kids.iter().enumerate() {
                walk(self, c, "", k + 1 == kids.len(), &mut out);
            }
        }
        let specials = self.specials();
        if !specials.is_empty() {
            out.push_str("Special labels\n");
            for (k, &s) in specials.iter().enumerate() {
                let branch = if k + 1 == specials.len() { "└── " } else { "├── " };
                out.push_str(&format!(
                    "{branch}{}  [{}]\n",
                    self.nodes[s].name, self.nodes[s].id
                ));
            }
        }
        out
    }
}

fn push_node_line(out: &mut String, indent: usize, n: &TaxonomyNode, explicit_parent: bool) {
    out.extend(std::iter::repeat_n(' ', indent));
    out.push_str(n.id.as_str());
    out.push_str(" | ");
    out.push_str(&n.name);
    if explicit_parent {
        if let Some(p) = &n.parent {
            out.push_str(" | parent=");
            out.push_str(p.as_str());
        }
    }
    out.push('\n');
}

impl FromStr for Taxonomy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_taxonomy(s)
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> Error {
    Error::Taxonomy {
        line,
        id: None,
        kind: TaxonomyErrorKind::Syntax(msg.into()),
    }
}

/// Parses and validates a taxonomy document. Errors carry the 1-based line.
pub fn parse_taxonomy(source: &str) -> Result<Taxonomy> {
    let mut nodes = Vec::new();
    let mut lines = Vec::new();
    let mut group: Option<Group> = None;
    let mut seen_sections: Vec<Group> = Vec::new();
    let mut stack: Vec<(usize, NodeId)> = Vec::new();
    let mut last_line = 0;

    for (lineno, raw) in source.lines().enumerate() {
        let line_no = lineno + 1;
        last_line = line_no;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let indent_str: &str = &raw[..raw.len() - raw.trim_start().len()];
        if indent_str.contains('\t') {
            return Err(syntax(line_no, "tabs are not allowed in indentation"));
        }
        let indent = indent_str.len();

        if let Some(rest) = trimmed.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return Err(syntax(line_no, "unterminated section header"));
            };
            let g = Group::from_section(name.trim()).ok_or_else(|| {
                syntax(
                    line_no,
                    format!(
                        "unknown section `{name}` (expected findings, diagnoses, localizations or special)"
                    ),
                )
            })?;
            if seen_sections.contains(&g) {
                return Err(syntax(line_no, format!("section `{g}` declared twice")));
            }
            seen_sections.push(g);
            group = Some(g);
            stack.clear();
            continue;
        }

        let Some(g) = group else {
            return Err(syntax(line_no, "node declared before any section header"));
        };

        let mut fields = trimmed.split('|').map(str::trim);
        let id_text = fields.next().unwrap_or_default();
        let id = NodeId::new(id_text).map_err(|_| {
            syntax(line_no, format!("invalid node id `{id_text}`"))
        })?;
        let name = match fields.next() {
            Some(n) if !n.is_empty() => n.to_string(),
            _ => id.to_string(),
        };
        let mut explicit_parent = None;
        for attr in fields {
            match attr.split_once('=') {
                Some((key, value)) if key.trim() == "parent" => {
                    let value = value.trim();
                    explicit_parent = Some(NodeId::new(value).map_err(|_| {
                        syntax(line_no, format!("invalid parent id `{value}`"))
                    })?);
                }
                _ => return Err(syntax(line_no, format!("unrecognized attribute `{attr}`"))),
            }
        }

        while stack.last().is_some_and(|(ind, _)| *ind >= indent) {
            stack.pop();
        }
        let nested_parent = stack.last().map(|(_, id)| id.clone());
        let parent = explicit_parent.or(nested_parent);
        stack.push((indent, id.clone()));

        nodes.push(TaxonomyNode {
            id,
            name,
            parent,
            group: g,
        });
        lines.push(line_no);
    }

    Taxonomy::build(nodes, &lines, last_line)
}

pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<Taxonomy> {
    let text = std::fs::read_to_string(path)?;
    parse_taxonomy(&text)
}
