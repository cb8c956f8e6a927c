//! Explanations read off a trained model: per-patch activation maps,
//! stitched prototype surfaces and cross-model prototype overlap.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::surface::{Dataset, PatchPartition, Split};
use crate::tensor::Tensor;
use crate::train::{PreparedData, DECISION_THRESHOLD};

/// Decoder read-out of one sample in `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub probability: f64,
    /// `a_i = w_i · cos(x_i, ξ_i)`
    pub activations: Vec<f64>,
    pub weights: Vec<f64>,
    pub similarities: Vec<f64>,
}

/// Activation map of one sample, patches `[H·N, M, F]`.
pub fn activation_map(model: &Model, patches: &Tensor<f32>) -> Result<ActivationMap> {
    let score = model.predict(patches)?;
    Ok(ActivationMap {
        probability: score.probability as f64,
        activations: score.activations().iter().map(|&a| a as f64).collect(),
        weights: score.weights.iter().map(|&w| w as f64).collect(),
        similarities: score.similarities.iter().map(|&c| c as f64).collect(),
    })
}

/// Spread per-patch values over the `H·V` vertices; vertices on patch
/// boundaries get the mean of their patches.
pub fn patch_to_vertex_map(
    partition: &PatchPartition,
    hemispheres: usize,
    per_patch: &[f64],
) -> Result<Vec<f64>> {
    let n = partition.n_patches();
    if per_patch.len() != n * hemispheres {
        return Err(Error::Shape(format!(
            "{} patch values for {} hemispheres of {} patches",
            per_patch.len(),
            hemispheres,
            n
        )));
    }
    Ok(per_patch
        .chunks(n)
        .flat_map(|h| partition.patch_values_to_vertices(h))
        .collect())
}

/// Which samples enter a group mean.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupFilter {
    pub split: Split,
    /// Only samples with this true label.
    pub label: Option<u8>,
    /// Only correctly classified samples.
    pub correct_only: bool,
}

impl Default for GroupFilter {
    fn default() -> Self {
        GroupFilter {
            split: Split::Test,
            label: Some(1),
            correct_only: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub subject_ids: Vec<String>,
    pub activations: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Elementwise mean of activation maps over the filtered samples.
pub fn group_mean_map(model: &Model, data: &PreparedData, filter: &GroupFilter) -> Result<GroupMean> {
    let split = data.split(filter.split);
    let maps: Vec<ActivationMap> =
        crate::parallel::try_map(&split.patches, |p| activation_map(model, p))?;
    let chosen: Vec<usize> = (0..split.len())
        .filter(|&i| filter.label.is_none_or(|y| split.labels[i] == y))
        .filter(|&i| {
            !filter.correct_only
                || (maps[i].probability >= DECISION_THRESHOLD) == (split.labels[i] == 1)
        })
        .collect();
    if chosen.is_empty() {
        return Err(Error::Invalid(format!(
            "no {} samples match the group filter",
            filter.split
        )));
    }
    let n = model.n_patches();
    let mut mean = vec![0.0; n];
    for &i in &chosen {
        for (m, a) in mean.iter_mut().zip(&maps[i].activations) {
            *m += a;
        }
    }
    for m in &mut mean {
        *m /= chosen.len() as f64;
    }
    Ok(GroupMean {
        subject_ids: chosen.iter().map(|&i| split.subject_ids[i].clone()).collect(),
        activations: mean,
        weights: maps[chosen[0]].weights.clone(),
    })
}

/// Prototype patches in input space.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSurface {
    /// Per patch, the provenance subject's values at the patch's vertices, or
    /// `None` for ignored patches (`w_i = 0`).
    pub patches: Vec<Option<Vec<f64>>>,
    /// Stitched `H·V` surface: mean over the unmasked patches containing each
    /// vertex, NaN where every containing patch is ignored.
    pub vertices: Vec<f64>,
}

/// Stitch the provenance subjects' `channel` values into one surface.
/// `dataset` should be loaded without normalization for raw values.
pub fn export_prototype_surface(
    model: &Model,
    dataset: &Dataset,
    partition: &PatchPartition,
    channel: usize,
) -> Result<PrototypeSurface> {
    let h = dataset.manifest.hemispheres;
    let (n, v) = (partition.n_patches(), partition.vertex_count());
    let f = dataset.manifest.n_channels();
    if channel >= f {
        return Err(Error::Invalid(format!(
            "channel {channel} out of range for {f} channels"
        )));
    }
    if model.n_patches() != h * n {
        return Err(Error::Shape(format!(
            "model has {} patches, dataset partition {}",
            model.n_patches(),
            h * n
        )));
    }
    let weights = model.scaler.weights()?;
    let mut patches = Vec::with_capacity(h * n);
    for (i, &w) in weights.iter().enumerate() {
        let prov = model.bank.provenance[i].as_ref().ok_or_else(|| {
            Error::Invalid(format!(
                "prototype {i} has no provenance; the checkpoint was never projected"
            ))
        })?;
        if w <= 0.0 {
            patches.push(None);
            continue;
        }
        let subject = dataset.find(&prov.subject_id).ok_or_else(|| {
            Error::Dataset(format!(
                "provenance subject {} of prototype {i} is not in the dataset",
                prov.subject_id
            ))
        })?;
        let data = subject.features.data();
        let hemi = i / n;
        patches.push(Some(
            partition.patches[i % n]
                .iter()
                .map(|&vi| data[(hemi * v + vi as usize) * f + channel] as f64)
                .collect(),
        ));
    }
    let mut vertices = Vec::with_capacity(h * v);
    for hemi in 0..h {
        let (geom, vals): (Vec<Vec<u32>>, Vec<Vec<f64>>) = (0..n)
            .filter_map(|j| {
                patches[hemi * n + j]
                    .as_ref()
                    .map(|p: &Vec<f64>| (partition.patches[j].clone(), p.clone()))
            })
            .unzip();
        let sub = PatchPartition {
            patches: geom,
            ..partition.clone()
        };
        vertices.extend(sub.scatter_mean(&vals));
    }
    Ok(PrototypeSurface { patches, vertices })
}

/// Active patches and provenance subjects of one model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProvenanceTable {
    pub subjects: Vec<Option<String>>,
    pub active: Vec<bool>,
}

impl ProvenanceTable {
    pub fn from_model(model: &Model) -> Result<Self> {
        Ok(ProvenanceTable {
            subjects: model
                .bank
                .provenance
                .iter()
                .map(|p| p.as_ref().map(|p| p.subject_id.clone()))
                .collect(),
            active: model.scaler.weights()?.iter().map(|&w| w > 0.0).collect(),
        })
    }
}

/// Agreement of one pair: over patches active in either model, the share
/// where both name the same provenance subject.
pub fn pair_overlap(a: &ProvenanceTable, b: &ProvenanceTable) -> Result<f64> {
    if a.subjects.len() != b.subjects.len() || a.active.len() != a.subjects.len() {
        return Err(Error::Shape(format!(
            "provenance tables cover {} and {} patches",
            a.subjects.len(),
            b.subjects.len()
        )));
    }
    let mut considered = 0usize;
    let mut agree = 0usize;
    for i in 0..a.subjects.len() {
        if !(a.active[i] || b.active[i]) {
            continue;
        }
        considered += 1;
        if a.subjects[i].is_some() && a.subjects[i] == b.subjects[i] {
            agree += 1;
        }
    }
    Ok(if considered == 0 {
        0.0
    } else {
        agree as f64 / considered as f64
    })
}

/// Mean pairwise overlap in percent over all unordered pairs.
pub fn prototype_overlap(tables: &[ProvenanceTable]) -> Result<f64> {
    if tables.len() < 2 {
        return Err(Error::Invalid(
            "prototype overlap needs at least two models".into(),
        ));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..tables.len() {
        for j in i + 1..tables.len() {
            total += pair_overlap(&tables[i], &tables[j])?;
            pairs += 1;
        }
    }
    Ok(100.0 * total / pairs as f64)
}

/// `patch_index,value,w_i,provenance_subject` rows; missing values and
/// subjects are left empty.
pub fn patch_csv(values: &[f64], weights: &[f64], provenance: &[Option<String>]) -> String {
    let mut s = String::from("patch_index,value,w_i,provenance_subject\n");
    for (i, (&v, &w)) in values.iter().zip(weights).enumerate() {
        let value = if v.is_nan() { String::new() } else { v.to_string() };
        let subject = provenance.get(i).cloned().flatten().unwrap_or_default();
        writeln!(s, "{i},{value},{w},{subject}").unwrap();
    }
    s
}
