//! Offline expert consolidation: pairwise expert distances, similarity
//! ranking of (layer, expert) locations and the round-robin expert map that
//! decides which model's expert occupies each device slot. Also the
//! weight-averaging merge used as the static-merge baseline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{to_canonical_json, write_atomic};
use crate::model::{common_config, ExpertWeights, ModelId, ModelWeights};
use crate::tensor::accumulate_sq_diff;

/// A (layer, expert) position in the MoE stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Location {
    pub layer: usize,
    pub expert: usize,
}

impl Location {
    pub const fn new(layer: usize, expert: usize) -> Self {
        Self { layer, expert }
    }
}

/// Distance between two experts, each flattened as `gate_proj ++ up ++ down`.
pub fn expert_distance(a: &ExpertWeights, b: &ExpertWeights) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.parts().iter().zip(b.parts()) {
        accumulate_sq_diff(&mut acc, x.data(), y.data());
    }
    acc.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    /// `values[layer][expert]`.
    pub values: Vec<Vec<f64>>,
    pub model_ids: Vec<ModelId>,
}

impl DistanceTable {
    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    pub fn n_experts(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, loc: Location) -> f64 {
        self.values[loc.layer][loc.expert]
    }

    /// Mean distance per layer.
    pub fn layer_means(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }
}

/// Sum, over all ordered model pairs `(i, j)` with `i != j`, of the distance
/// between their experts at each location.
///
/// Pair terms are summed in ascending order, which makes every entry
/// independent of the order of `models`.
pub fn pairwise_distance_table(models: &[&ModelWeights]) -> Result<DistanceTable> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "distance table needs at least 2 models, got {}",
            models.len()
        )));
    }
    let cfg = common_config(models)?;
    let mut values = vec![vec![0.0; cfg.n_experts]; cfg.n_layers];
    for (l, row) in values.iter_mut().enumerate() {
        for (e, cell) in row.iter_mut().enumerate() {
            let mut terms = Vec::with_capacity(models.len() * (models.len() - 1));
            for (i, a) in models.iter().enumerate() {
                for (j, b) in models.iter().enumerate() {
                    if i != j {
                        terms.push(expert_distance(a.expert(l, e), b.expert(l, e)));
                    }
                }
            }
            terms.sort_by(f64::total_cmp);
            *cell = terms.iter().sum();
        }
    }
    Ok(DistanceTable {
        values,
        model_ids: models.iter().map(|m| m.id.clone()).collect(),
    })
}

/// Locations ordered from most to least similar (ascending distance); ties go
/// to the lexicographically smaller (layer, expert).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRanking {
    pub order: Vec<(Location, f64)>,
}

pub fn rank_locations(table: &DistanceTable) -> SimilarityRanking {
    let mut order: Vec<(Location, f64)> = table
        .values
        .iter()
        .enumerate()
        .flat_map(|(l, row)| row.iter().enumerate().map(move |(e, d)| (Location::new(l, e), *d)))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    SimilarityRanking { order }
}

/// One occupied device slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assignment {
    pub layer: usize,
    pub expert: usize,
    pub model_id: ModelId,
    /// 1-based similarity rank.
    pub rank: usize,
    pub distance: f64,
}

/// Consolidated device image: which model's expert sits in each of up to
/// `capacity` slots. Unlisted locations are host-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExpertMapDoc")]
pub struct ExpertMap {
    capacity: usize,
    model_ids: Vec<ModelId>,
    assignments: Vec<Assignment>,
    #[serde(skip)]
    owners: BTreeMap<Location, usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertMapDoc {
    capacity: usize,
    model_ids: Vec<ModelId>,
    assignments: Vec<Assignment>,
}

impl TryFrom<ExpertMapDoc> for ExpertMap {
    type Error = Error;

    fn try_from(doc: ExpertMapDoc) -> Result<Self> {
        if doc.model_ids.is_empty() {
            return Err(Error::InvalidArgument("expert map lists no models".into()));
        }
        let mut owners = BTreeMap::new();
        for (i, a) in doc.assignments.iter().enumerate() {
            if a.rank != i + 1 {
                return Err(Error::InvalidArgument(format!(
                    "assignment {i} has rank {}, expected {}",
                    a.rank,
                    i + 1
                )));
            }
            let idx = doc
                .model_ids
                .iter()
                .position(|m| *m == a.model_id)
                .ok_or_else(|| Error::UnknownModel(a.model_id.to_string()))?;
            if owners.insert(Location::new(a.layer, a.expert), idx).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "slot ({}, {}) assigned twice",
                    a.layer, a.expert
                )));
            }
        }
        if doc.assignments.len() > doc.capacity {
            return Err(Error::InvalidArgument(format!(
                "{} assignments exceed capacity {}",
                doc.assignments.len(),
                doc.capacity
            )));
        }
        Ok(Self {
            capacity: doc.capacity,
            model_ids: doc.model_ids,
            assignments: doc.assignments,
            owners,
        })
    }
}

impl ExpertMap {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn model_ids(&self) -> &[ModelId] {
        &self.model_ids
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.assignments
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Owner of a resident slot, if any.
    pub fn owner(&self, loc: Location) -> Option<&ModelId> {
        self.owners.get(&loc).map(|&i| &self.model_ids[i])
    }

    pub fn slots(&self) -> impl Iterator<Item = (Location, &ModelId)> {
        self.owners.iter().map(|(loc, &i)| (*loc, &self.model_ids[i]))
    }

    /// Number of slots per model, in `model_ids` order.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.model_ids.len()];
        for &i in self.owners.values() {
            counts[i] += 1;
        }
        counts
    }

    pub fn to_json(&self) -> Result<String> {
        to_canonical_json(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Walks the ranking from most similar, handing slots out round-robin until
/// `capacity` slots are filled.
///
/// Rank `r` (1-based) goes to `model_ids[(r - 1) % |M|]`, so with two models
/// odd ranks land on the first model.
pub fn build_expert_map(
    ranking: &SimilarityRanking,
    capacity: usize,
    model_ids: &[ModelId],
) -> Result<ExpertMap> {
    if model_ids.is_empty() {
        return Err(Error::InvalidArgument("expert map needs at least one model".into()));
    }
    let n = capacity.min(ranking.order.len());
    let mut owners = BTreeMap::new();
    let assignments = ranking.order[..n]
        .iter()
        .enumerate()
        .map(|(i, (loc, distance))| {
            let idx = i % model_ids.len();
            owners.insert(*loc, idx);
            Assignment {
                layer: loc.layer,
                expert: loc.expert,
                model_id: model_ids[idx].clone(),
                rank: i + 1,
                distance: *distance,
            }
        })
        .collect();
    Ok(ExpertMap {
        capacity,
        model_ids: model_ids.to_vec(),
        assignments,
        owners,
    })
}

/// Distance table, ranking and map in one call.
pub fn consolidate(models: &[&ModelWeights], capacity: usize) -> Result<(DistanceTable, ExpertMap)> {
    let table = pairwise_distance_table(models)?;
    let map = build_expert_map(&rank_locations(&table), capacity, &table.model_ids)?;
    Ok((table, map))
}

/// Elementwise arithmetic mean of all parameters.
pub fn average_merge(models: &[&ModelWeights]) -> Result<ModelWeights> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "averaging needs at least 2 models, got {}",
            models.len()
        )));
    }
    let cfg = common_config(models)?;
    let ids: Vec<&str> = models.iter().map(|m| m.id.as_str()).collect();
    let mut merged = ModelWeights::zeros(ModelId(format!("avg({})", ids.join(","))), cfg)?;
    let sources: Vec<_> = models.iter().map(|m| m.tensors()).collect();
    let n = models.len() as f64;
    for (ti, (_, dst)) in merged.tensors_mut().into_iter().enumerate() {
        for (k, out) in dst.data_mut().iter_mut().enumerate() {
            let sum: f64 = sources.iter().map(|s| f64::from(s[ti].2.data()[k])).sum();
            *out = (sum / n) as f32;
        }
    }
    Ok(merged)
}

/// Writes the table as CSV: header `layer,expert_0,..,expert_{E-1}`, one row
/// per layer.
pub fn export_distance_csv(table: &DistanceTable, path: &Path) -> Result<()> {
    write_atomic(path, &distance_csv_bytes(table)?)
}

pub fn distance_csv_bytes(table: &DistanceTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["layer".to_owned()];
    header.extend((0..table.n_experts()).map(|e| format!("expert_{e}")));
    w.write_record(&header)?;
    for (l, row) in table.values.iter().enumerate() {
        let mut rec = vec![l.to_string()];
        rec.extend(row.iter().map(|d| d.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// Reads a CSV produced by [`export_distance_csv`] back into `values[layer][expert]`.
pub fn read_distance_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad distance `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}
