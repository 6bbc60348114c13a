//! Image manifests and patient-disjoint splitting.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Photometric;
use crate::labels::LabelSet;
use crate::taxonomy::{NodeId, Taxonomy};

pub const MANIFEST_HEADER: [&str; 7] = [
    "image_id",
    "patient_id",
    "path",
    "projection",
    "photometric",
    "labels",
    "split",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Projection {
    Pa,
    Ap,
    ApSupine,
    Decubitus,
    Lordotic,
    Standing,
}

impl Projection {
    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Pa => "PA",
            Projection::Ap => "AP",
            Projection::ApSupine => "AP-supine",
            Projection::Decubitus => "decubitus",
            Projection::Lordotic => "lordotic",
            Projection::Standing => "standing",
        }
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "pa" => Ok(Projection::Pa),
            "ap" => Ok(Projection::Ap),
            "ap-supine" | "supine" | "ap-horizontal" => Ok(Projection::ApSupine),
            "decubitus" => Ok(Projection::Decubitus),
            "lordotic" => Ok(Projection::Lordotic),
            "standing" => Ok(Projection::Standing),
            other => Err(Error::invalid(format!("unknown projection `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub path: PathBuf,
    pub projection: Projection,
    pub photometric: Photometric,
    pub labels: LabelSet,
    pub split: Option<Split>,
}

/// Reads a manifest CSV. Relative image paths are resolved against
/// `base_dir` when given.
pub fn load_manifest<R: Read>(
    reader: R,
    taxonomy: &Taxonomy,
    base_dir: Option<&Path>,
) -> Result<Vec<ImageRecord>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut cols = [0usize; 6];
    for (slot, name) in cols.iter_mut().zip(&MANIFEST_HEADER[..6]) {
        *slot = col(name).ok_or_else(|| Error::Manifest {
            row: 1,
            message: format!("missing required column `{name}`"),
        })?;
    }
    let split_col = col("split");

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |message: String| Error::Manifest { row, message };

        let image_id = field(cols[0]).to_string();
        if image_id.is_empty() {
            return Err(bad("empty image_id".into()));
        }
        if !seen.insert(image_id.clone()) {
            return Err(bad(format!("duplicate image_id `{image_id}`")));
        }
        let patient_id = field(cols[1]).to_string();
        if patient_id.is_empty() {
            return Err(bad(format!("image `{image_id}` has no patient_id")));
        }
        let mut path = PathBuf::from(field(cols[2]));
        if let Some(base) = base_dir {
            if path.is_relative() {
                path = base.join(path);
            }
        }
        let projection = field(cols[3]).parse().map_err(|e: Error| bad(e.to_string()))?;
        let photometric = field(cols[4]).parse().map_err(|e: Error| bad(e.to_string()))?;
        let labels = LabelSet::parse_pipe(field(cols[5])).map_err(|e| bad(e.to_string()))?;
        labels.check(taxonomy).map_err(|e| match e {
            Error::UnknownNode(id) => bad(format!("unknown label id `{id}`")),
            other => other,
        })?;
        let split = match split_col.map(field) {
            None | Some("") => None,
            Some(s) => Some(s.parse().map_err(|e: Error| bad(e.to_string()))?),
        };
        out.push(ImageRecord {
            image_id,
            patient_id,
            path,
            projection,
            photometric,
            labels,
            split,
        });
    }
    Ok(out)
}

pub fn load_manifest_file(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)?;
    load_manifest(f, taxonomy, path.parent())
}

/// Writes a manifest; paths under `base_dir` are written relative to it.
pub fn write_manifest<W: Write>(
    writer: W,
    records: &[ImageRecord],
    base_dir: Option<&Path>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        let path = base_dir
            .and_then(|b| r.path.strip_prefix(b).ok())
            .unwrap_or(&r.path);
        w.write_record([
            r.image_id.as_str(),
            r.patient_id.as_str(),
            &path.to_string_lossy(),
            r.projection.as_str(),
            r.photometric.as_str(),
            &r.labels.to_pipe_string(),
            r.split.map(Split::as_str).unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_manifest(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_manifest(f, records, path.parent())
}

/// Removes records carrying the given special label (typically `exclude`).
pub fn drop_labelled(records: Vec<ImageRecord>, label: &NodeId) -> Vec<ImageRecord> {
    records
        .into_iter()
        .filter(|r| !r.labels.contains(label))
        .collect()
}

pub fn records_in(records: &[ImageRecord], split: Split) -> Vec<ImageRecord> {
    records
        .iter()
        .filter(|r| r.split == Some(split))
        .cloned()
        .collect()
}

/// Target image fractions for train/val/test plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train,
            val,
            test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("split fractions must be finite and non-negative"));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions must sum to 1, got {}",
                f.iter().sum::<f64>()
            )));
        }
        Ok(())
    }

    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Assigns splits by patient: patients are shuffled with `spec.seed` and
/// each is given to the split with the largest remaining image deficit
/// (ties go to train, then val). Every split with a non-zero fraction
/// receives at least one patient.
pub fn patient_split(mut records: Vec<ImageRecord>, spec: &SplitSpec) -> Result<Vec<ImageRecord>> {
    spec.validate()?;
    let fractions = spec.fractions();
    let active: Vec<usize> = (0..3).filter(|&s| fractions[s] > 0.0).collect();

    let mut patients: Vec<&str> = Vec::new();
    let mut sizes: HashMap<&str, usize> = HashMap::new();
    for r in &records {
        let e = sizes.entry(r.patient_id.as_str()).or_insert(0);
        if *e == 0 {
            patients.push(r.patient_id.as_str());
        }
        *e += 1;
    }
    if patients.len() < active.len() {
        return Err(Error::invalid(format!(
            "{} distinct patients cannot fill {} non-empty splits",
            patients.len(),
            active.len()
        )));
    }
    patients.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    patients.shuffle(&mut rng);

    let total = records.len() as f64;
    let target: Vec<f64> = fractions.iter().map(|f| f * total).collect();
    let mut filled = [0usize; 3];
    let mut count = [0usize; 3];
    let mut assignment: HashMap<String, Split> = HashMap::with_capacity(patients.len());
    for (k, p) in patients.iter().enumerate() {
        let remaining = patients.len() - k;
        let empty: Vec<usize> = active.iter().copied().filter(|&s| count[s] == 0).collect();
        let candidates = if remaining <= empty.len() { &empty } else { &active };
        let mut best = candidates[0];
        for &s in &candidates[1..] {
            let deficit = |i: usize| target[i] - filled[i] as f64;
            if deficit(s) > deficit(best) {
                best = s;
            }
        }
        filled[best] += sizes[p];
        count[best] += 1;
        assignment.insert(p.to_string(), Split::ALL[best]);
    }

    for r in &mut records {
        r.split = Some(assignment[&r.patient_id]);
    }
    Ok(records)
}
