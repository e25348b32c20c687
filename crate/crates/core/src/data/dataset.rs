//! In-memory datasets of model inputs with place labels and positions.

use std::collections::BTreeMap;

use super::image::load_image;
use super::manifest::{Manifest, Role};
use super::tensorfile::read_tensor_file;
use crate::error::{Error, Result};
use crate::model::{InputMode, ModelInput};
use crate::retrieval::{GroundTruth, Location, MatchRule};

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub place_id: u64,
    pub location: Location,
    pub role: Role,
    pub input: ModelInput,
}

#[derive(Clone, Debug, Default)]
pub struct PlaceDataset {
    pub samples: Vec<Sample>,
}

/// Query and reference positions within a dataset plus their ground truth.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    pub queries: Vec<usize>,
    pub references: Vec<usize>,
    pub ground_truth: GroundTruth,
}

impl PlaceDataset {
    /// Loads every payload named by `manifest`: P6 images in image mode,
    /// single-entry tensor files in feature mode.
    pub fn from_manifest(manifest: &Manifest, mode: &InputMode) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let path = manifest.resolve(r);
            let input = match mode {
                InputMode::Image { height, width, .. } => {
                    let img = load_image(&path)?;
                    if img.shape() != [3, *height, *width] {
                        return Err(Error::Dataset(format!(
                            "{}: image is {:?}, model expects [3, {height}, {width}]",
                            path.display(),
                            img.shape()
                        )));
                    }
                    ModelInput::Image(img)
                }
                InputMode::Features { feature_dim, .. } => {
                    let table = read_tensor_file(&path)?;
                    let t = match &table.entries[..] {
                        [(_, t)] => t.clone(),
                        e => {
                            return Err(Error::Dataset(format!(
                                "{}: feature file holds {} tensors, expected 1",
                                path.display(),
                                e.len()
                            )))
                        }
                    };
                    if !matches!(t.shape(), [_, d] if d == feature_dim) {
                        return Err(Error::Dataset(format!(
                            "{}: features {:?} do not have {feature_dim} columns",
                            path.display(),
                            t.shape()
                        )));
                    }
                    ModelInput::Features(t)
                }
            };
            samples.push(Sample {
                id: r.id.clone(),
                place_id: r.place_id,
                location: r.location,
                role: r.role,
                input,
            });
        }
        Ok(PlaceDataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].role == role).collect()
    }

    /// Place id → sample positions with the given role, in dataset order.
    pub fn places(&self, role: Role) -> BTreeMap<u64, Vec<usize>> {
        let mut out: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for i in self.indices(role) {
            out.entry(self.samples[i].place_id).or_default().push(i);
        }
        out
    }

    pub fn eval_split(&self, rule: MatchRule) -> Result<EvalSplit> {
        let queries = self.indices(Role::Query);
        let references = self.indices(Role::Reference);
        if queries.is_empty() || references.is_empty() {
            return Err(Error::Dataset(format!(
                "evaluation needs queries and references, found {} and {}",
                queries.len(),
                references.len()
            )));
        }
        let qpos: Vec<Location> = queries.iter().map(|&i| self.samples[i].location).collect();
        let refs: Vec<(String, Location)> = references
            .iter()
            .map(|&i| (self.samples[i].id.clone(), self.samples[i].location))
            .collect();
        Ok(EvalSplit {
            ground_truth: GroundTruth::build(&qpos, &refs, rule)?,
            queries,
            references,
        })
    }
}
