//! Generators and brute-force oracles shared by the property and acceptance
//! suites.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use taxonet::dataset::{ImageRecord, Projection};
use taxonet::imaging::Photometric;
use taxonet::labels::LabelSet;
use taxonet::predictions::PredictionMatrix;
use taxonet::taxonomy::{Group, NodeId, Taxonomy, TaxonomyNode};

const TREES: [Group; 3] = [Group::Findings, Group::Diagnoses, Group::Localizations];

/// A forest of `n` nodes (three roots plus random attachments) and up to two
/// special labels. Declaration order is shuffled so children may precede
/// their parents.
pub fn random_taxonomy(n: usize, rng: &mut dyn RngCore) -> Taxonomy {
    assert!(n >= 3);
    let mut nodes: Vec<TaxonomyNode> = Vec::with_capacity(n + 2);
    for (i, g) in TREES.iter().enumerate() {
        nodes.push(TaxonomyNode::new(id(&format!("root-{i}")), format!("root {i}"), None, *g));
    }
    for i in 3..n {
        let p = rng.random_range(0..i);
        let parent = &nodes[p];
        nodes.push(TaxonomyNode::new(
            id(&format!("n-{i}")),
            format!("node {i}"),
            Some(parent.id.clone()),
            parent.group,
        ));
    }
    for s in 0..rng.random_range(0..3) {
        nodes.push(TaxonomyNode::new(id(&format!("special-{s}")), "special", None, Group::Special));
    }
    nodes.shuffle(rng);
    Taxonomy::from_nodes(nodes).expect("generated forest is valid")
}

pub fn id(s: &str) -> NodeId {
    NodeId::new(s).unwrap()
}

/// Each node independently with probability `p`.
pub fn random_label_set(tax: &Taxonomy, p: f64, rng: &mut dyn RngCore) -> LabelSet {
    tax.nodes()
        .iter()
        .filter(|_| rng.random_bool(p))
        .map(|n| n.id.clone())
        .collect()
}

/// Ancestor closure by walking parents, independent of the library.
pub fn closure(tax: &Taxonomy, labels: &LabelSet) -> Vec<bool> {
    let mut bits = vec![false; tax.len()];
    for l in labels.iter() {
        let mut cur = tax.index_of(l);
        while let Some(i) = cur {
            bits[i] = true;
            cur = tax.parent_index(i);
        }
    }
    bits
}

/// Pair-counting AUC with ties counted as one half.
pub fn pair_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

/// Scores on a coarse grid so ties are common, with both classes present.
pub fn random_instance(n: usize, rng: &mut dyn RngCore) -> (Vec<f64>, Vec<bool>) {
    assert!(n >= 2);
    let levels = rng.random_range(2..=50u32);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    labels.shuffle(rng);
    let shift: f64 = rng.random_range(0.0..0.5);
    let scores = labels
        .iter()
        .map(|&l| {
            let base = rng.random_range(0..levels) as f64 / levels as f64;
            if l { (base + shift).min(1.0) } else { base }
        })
        .collect();
    (scores, labels)
}

/// Number of (image, edge) pairs with child >= t > parent over all edges.
pub fn brute_force_violations(tax: &Taxonomy, m: &PredictionMatrix, t: f64) -> usize {
    let mut count = 0;
    for r in 0..m.n_rows() {
        for c in 0..tax.len() {
            let Some(p) = tax.parent_index(c) else { continue };
            let cc = m.column_of(tax.id_of(c)).unwrap();
            let pc = m.column_of(tax.id_of(p)).unwrap();
            if m.get(r, cc) >= t && m.get(r, pc) < t {
                count += 1;
            }
        }
    }
    count
}

/// Manifest of `n` images from `patients` patients, every patient present.
pub fn random_manifest(n: usize, patients: usize, rng: &mut dyn RngCore) -> Vec<ImageRecord> {
    assert!(n >= patients && patients > 0);
    let mut owners: Vec<usize> = (0..patients).chain((patients..n).map(|_| rng.random_range(0..patients))).collect();
    owners.shuffle(rng);
    owners
        .into_iter()
        .enumerate()
        .map(|(i, p)| ImageRecord {
            image_id: format!("img-{i:04}"),
            patient_id: format!("pat-{p:03}"),
            path: format!("img-{i:04}.png").into(),
            projection: Projection::Pa,
            photometric: Photometric::Monochrome2,
            labels: LabelSet::new(),
            split: None,
        })
        .collect()
}
