//! Place-balanced batches: `P` distinct places, `K` distinct images each.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub places_per_batch: usize,
    pub images_per_place: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            places_per_batch: 16,
            images_per_place: 4,
        }
    }
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.places_per_batch * self.images_per_place
    }
}

/// Sample positions grouped by place, `K` consecutive entries per place.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub place_ids: Vec<u64>,
}

fn eligible(places: &BTreeMap<u64, Vec<usize>>, spec: &BatchSpec) -> Result<Vec<u64>> {
    if spec.places_per_batch == 0 || spec.images_per_place == 0 {
        return Err(Error::Config(format!("empty batch specification {spec:?}")));
    }
    let ok: Vec<u64> = places
        .iter()
        .filter(|(_, v)| v.len() >= spec.images_per_place)
        .map(|(p, _)| *p)
        .collect();
    if ok.len() < spec.places_per_batch {
        return Err(Error::Dataset(format!(
            "batches need {} places with at least {} images each; found {} ({} short of the requirement, {} places have too few images)",
            spec.places_per_batch,
            spec.images_per_place,
            ok.len(),
            spec.places_per_batch - ok.len(),
            places.len() - ok.len()
        )));
    }
    Ok(ok)
}

fn assemble<R: Rng + ?Sized>(chosen: &[u64], places: &BTreeMap<u64, Vec<usize>>, k: usize, rng: &mut R) -> Batch {
    let mut batch = Batch {
        indices: Vec::with_capacity(chosen.len() * k),
        place_ids: Vec::with_capacity(chosen.len() * k),
    };
    for &p in chosen {
        batch.indices.extend(places[&p].choose_multiple(rng, k));
        batch.place_ids.extend(std::iter::repeat_n(p, k));
    }
    batch
}

/// One batch of places drawn without replacement.
pub fn sample_batch<R: Rng + ?Sized>(places: &BTreeMap<u64, Vec<usize>>, spec: &BatchSpec, rng: &mut R) -> Result<Batch> {
    let ok = eligible(places, spec)?;
    let chosen: Vec<u64> = ok.choose_multiple(rng, spec.places_per_batch).copied().collect();
    Ok(assemble(&chosen, places, spec.images_per_place, rng))
}

/// A shuffled pass over the eligible places; a trailing partial batch is dropped.
pub fn epoch_batches<R: Rng + ?Sized>(
    places: &BTreeMap<u64, Vec<usize>>,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    let mut ok = eligible(places, spec)?;
    ok.shuffle(rng);
    Ok(ok
        .chunks_exact(spec.places_per_batch)
        .map(|chosen| assemble(chosen, places, spec.images_per_place, rng))
        .collect())
}
