use rayon::prelude::*;

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::imaging::{preprocess_with, InputCache, ModelInput, NormalizeMode, RawImage};
use crate::labels::propagate;
use crate::taxonomy::{NodeId, Taxonomy};

/// Indexed collection of model inputs.
pub trait InputSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn image_id(&self, index: usize) -> &str;

    fn load(&self, index: usize) -> Result<ModelInput>;
}

/// Inputs decoded and preprocessed from manifest records on demand.
#[derive(Debug, Clone)]
pub struct RecordSource<'a> {
    records: &'a [ImageRecord],
    mode: NormalizeMode,
    cache: Option<InputCache>,
}

impl<'a> RecordSource<'a> {
    pub fn new(records: &'a [ImageRecord], mode: NormalizeMode) -> Self {
        RecordSource {
            records,
            mode,
            cache: None,
        }
    }

    /// Reuse preprocessed inputs stored in `cache`, filling it on misses.
    pub fn with_cache(mut self, cache: InputCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn records(&self) -> &'a [ImageRecord] {
        self.records
    }
}

impl InputSource for RecordSource<'_> {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn image_id(&self, index: usize) -> &str {
        &self.records[index].image_id
    }

    fn load(&self, index: usize) -> Result<ModelInput> {
        let rec = &self.records[index];
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.load(&rec.image_id)? {
                return Ok(hit);
            }
        }
        let raw = RawImage::load_png(&rec.path, rec.photometric).map_err(|e| match e {
            Error::Image { .. } => e,
            other => Error::Image {
                image_id: rec.image_id.clone(),
                message: other.to_string(),
            },
        })?;
        let input = preprocess_with(raw, self.mode);
        if let Some(cache) = &self.cache {
            cache.store(&rec.image_id, &input)?;
        }
        Ok(input)
    }
}

/// Inputs held in memory.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    ids: Vec<String>,
    inputs: Vec<ModelInput>,
}

impl MemorySource {
    pub fn new(ids: Vec<String>, inputs: Vec<ModelInput>) -> Result<Self> {
        if ids.len() != inputs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids for {} inputs",
                ids.len(),
                inputs.len()
            )));
        }
        Ok(MemorySource { ids, inputs })
    }

    /// Loads every input of `source` up front.
    pub fn preload(source: &dyn InputSource) -> Result<Self> {
        let inputs = (0..source.len())
            .into_par_iter()
            .map(|i| source.load(i))
            .collect::<Result<Vec<_>>>()?;
        let ids = (0..source.len()).map(|i| source.image_id(i).to_string()).collect();
        Ok(MemorySource { ids, inputs })
    }

    pub fn inputs(&self) -> &[ModelInput] {
        &self.inputs
    }
}

impl InputSource for MemorySource {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn image_id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn load(&self, index: usize) -> Result<ModelInput> {
        Ok(self.inputs[index].clone())
    }
}

/// Inputs paired with their propagated training targets.
pub struct LabeledSet<'a> {
    pub source: &'a dyn InputSource,
    pub targets: Vec<Vec<f32>>,
}

impl<'a> LabeledSet<'a> {
    pub fn new(source: &'a dyn InputSource, targets: Vec<Vec<f32>>) -> Result<Self> {
        if source.len() != targets.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs but {} target rows",
                source.len(),
                targets.len()
            )));
        }
        Ok(LabeledSet { source, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Ancestor-closed targets of each record, restricted to `columns`.
pub fn targets_for(taxonomy: &Taxonomy, records: &[ImageRecord], columns: &[NodeId]) -> Result<Vec<Vec<f32>>> {
    records
        .iter()
        .map(|r| propagate(taxonomy, &r.labels)?.select(taxonomy, columns))
        .collect()
}
