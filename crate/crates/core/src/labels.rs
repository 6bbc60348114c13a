//! Label semantics over the taxonomy.
//!
//! Training targets are *ancestor-closed*: a report label switches on its
//! node and every node up to the tree root. Evaluation positives are
//! *descendant-closed*: an image is positive for a node if any of its report
//! labels is that node or lies below it. Images labelled with a sibling are
//! negatives, e.g. an image with only `reticular interstitial pattern` counts
//! as a negative for `ground glass pattern` even though both are interstitial
//! infiltrates. This is stricter than schemes that drop siblings from the
//! negative class and lowers AUC accordingly.

use std::collections::BTreeSet;
use std::io::Write;

use crate::error::{Error, Result};
use crate::predictions::PredictionMatrix;
use crate::taxonomy::{NodeId, Taxonomy};

/// Labels extracted from one report.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct LabelSet(BTreeSet<NodeId>);

impl LabelSet {
    pub fn new() -> Self {
        LabelSet(BTreeSet::new())
    }

    /// Parses a pipe-separated list; an empty string is the empty set.
    pub fn parse_pipe(text: &str) -> Result<Self> {
        text.split('|')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(NodeId::new)
            .collect()
    }

    pub fn to_pipe_string(&self) -> String {
        self.0
            .iter()
            .map(NodeId::as_str)
            .collect::<Vec<_>>()
            .join("|")
    }

    pub fn insert(&mut self, id: NodeId) -> bool {
        self.0.insert(id)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.0.contains(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NodeId> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_subset(&self, other: &LabelSet) -> bool {
        self.0.is_subset(&other.0)
    }

    /// First label that the taxonomy does not know, if any.
    pub fn check(&self, taxonomy: &Taxonomy) -> Result<()> {
        match self.0.iter().find(|id| taxonomy.index_of(id).is_none()) {
            Some(id) => Err(Error::UnknownNode(id.clone())),
            None => Ok(()),
        }
    }
}

impl FromIterator<NodeId> for LabelSet {
    fn from_iter<I: IntoIterator<Item = NodeId>>(iter: I) -> Self {
        LabelSet(iter.into_iter().collect())
    }
}

/// Dense 0/1 vector over every taxonomy node, in canonical index order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetVector {
    bits: Vec<bool>,
}

impl TargetVector {
    pub fn zeros(n: usize) -> Self {
        TargetVector { bits: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// The set of nodes whose bit is on.
    pub fn to_label_set(&self, taxonomy: &Taxonomy) -> LabelSet {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| taxonomy.id_of(i).clone())
            .collect()
    }

    /// Every on bit has its parent on.
    pub fn is_ancestor_closed(&self, taxonomy: &Taxonomy) -> bool {
        taxonomy
            .edges()
            .all(|(child, parent)| !self.bits[child] || self.bits[parent])
    }

    /// Values for the given output columns, as 0.0 / 1.0.
    pub fn select(&self, taxonomy: &Taxonomy, columns: &[NodeId]) -> Result<Vec<f32>> {
        columns
            .iter()
            .map(|c| {
                taxonomy
                    .require_index(c)
                    .map(|i| if self.bits[i] { 1.0 } else { 0.0 })
            })
            .collect()
    }
}

/// Marks each labelled node and all of its ancestors. Special labels only
/// set their own bit.
pub fn propagate(taxonomy: &Taxonomy, labels: &LabelSet) -> Result<TargetVector> {
    let mut out = TargetVector::zeros(taxonomy.len());
    for id in labels.iter() {
        let mut cur = Some(taxonomy.require_index(id)?);
        while let Some(i) = cur {
            if out.bits[i] {
                break;
            }
            out.bits[i] = true;
            cur = taxonomy.parent_index(i);
        }
    }
    Ok(out)
}

/// True iff the labels contain `target` or one of its descendants.
pub fn evaluation_positive(taxonomy: &Taxonomy, target: &NodeId, labels: &LabelSet) -> Result<bool> {
    let t = taxonomy.require_index(target)?;
    for id in labels.iter() {
        let i = taxonomy.require_index(id)?;
        if i == t || taxonomy.ancestor_indices(i).contains(&t) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Writes target vectors as CSV rows keyed by image id, one 0/1 column per
/// node in canonical order.
pub fn write_targets_csv<W: Write>(
    writer: W,
    taxonomy: &Taxonomy,
    rows: &[(String, TargetVector)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["image_id".to_string()];
    header.extend(taxonomy.nodes().iter().map(|n| n.id.to_string()));
    w.write_record(&header)?;
    for (image_id, target) in rows {
        if target.len() != taxonomy.len() {
            return Err(Error::DimensionMismatch(format!(
                "target for `{image_id}` has {} bits, taxonomy has {} nodes",
                target.len(),
                taxonomy.len()
            )));
        }
        let mut rec = Vec::with_capacity(target.len() + 1);
        rec.push(image_id.clone());
        rec.extend(target.bits.iter().map(|b| if *b { "1" } else { "0" }.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConsistency {
    pub child: NodeId,
    pub parent: NodeId,
    pub violations: usize,
    pub rate: f64,
}

/// Fraction of (image, edge) pairs where the child clears the threshold but
/// its parent does not.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub threshold: f64,
    pub images: usize,
    pub edges: Vec<EdgeConsistency>,
    pub violations: usize,
    pub pairs: usize,
    pub rate: f64,
}

pub const DEFAULT_CONSISTENCY_THRESHOLD: f64 = 0.5;

pub fn consistency_report(
    taxonomy: &Taxonomy,
    scores: &PredictionMatrix,
    threshold: f64,
) -> Result<ConsistencyReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} must lie in (0, 1)")));
    }
    scores.check_alignment(taxonomy)?;

    let rows = scores.n_rows();
    let mut edges = Vec::new();
    let mut total = 0;
    for (child, parent) in taxonomy.edges() {
        let child_id = taxonomy.id_of(child);
        let parent_id = taxonomy.id_of(parent);
        let (Some(c), Some(p)) = (scores.column_of(child_id), scores.column_of(parent_id)) else {
            continue;
        };
        let violations = (0..rows)
            .filter(|&r| scores.get(r, c) >= threshold && scores.get(r, p) < threshold)
            .count();
        total += violations;
        edges.push(EdgeConsistency {
            child: child_id.clone(),
            parent: parent_id.clone(),
            violations,
            rate: if rows == 0 { 0.0 } else { violations as f64 / rows as f64 },
        });
    }
    let pairs = rows * edges.len();
    Ok(ConsistencyReport {
        threshold,
        images: rows,
        rate: if pairs == 0 { 0.0 } else { total as f64 / pairs as f64 },
        edges,
        violations: total,
        pairs,
    })
}
