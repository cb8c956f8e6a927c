//! Synthetic surface datasets with planted regional effects.
//!
//! Every subject shares one smooth baseline (a mixture of low-frequency
//! cosines of the vertex coordinates) plus iid Gaussian noise. Positive
//! subjects additionally lose `δ·σ` on channel 0 over the lesion patches.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surface::{
    build_icosphere, build_partition, compute_stats, save_sample, write_manifest, DatasetManifest,
    IcosphereMesh, PatchPartition, Split, SubjectEntry, SurfaceSample,
};
use crate::tensor::Tensor;
use crate::{parallel, seed};

/// Where the planted effect sits relative to the nominal lesion patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionPlacement {
    /// Exactly the vertices of each lesion patch.
    #[default]
    Aligned,
    /// Each lesion region rotated half way towards the neighbouring patch
    /// across its first edge, so it straddles two patches.
    HalfPatchOffset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub mesh_order: u32,
    pub patch_order: u32,
    pub hemispheres: usize,
    pub channels: usize,
    /// Indices into the `H·N` patch sequence.
    pub lesion_patches: Vec<usize>,
    /// Effect size in units of `noise_std`.
    pub effect_size: f64,
    pub lesion_placement: LesionPlacement,
    pub baseline_terms: usize,
    pub baseline_amplitude: f64,
    pub noise_std: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Share of positive subjects in every split.
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            mesh_order: 4,
            patch_order: 1,
            hemispheres: 1,
            channels: 3,
            lesion_patches: (0..8).collect(),
            effect_size: 3.0,
            lesion_placement: LesionPlacement::Aligned,
            baseline_terms: 6,
            baseline_amplitude: 1.0,
            noise_std: 1.0,
            train: 200,
            val: 50,
            test: 50,
            positive_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_patches(&self) -> usize {
        self.hemispheres * PatchPartition::patch_count_for(self.patch_order)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("synthetic spec: {m}")));
        if self.patch_order > self.mesh_order {
            return bad(format!(
                "patch order {} exceeds mesh order {}",
                self.patch_order, self.mesh_order
            ));
        }
        if self.mesh_order > 7 {
            return bad(format!("mesh order {} is too large", self.mesh_order));
        }
        if self.hemispheres == 0 || self.channels == 0 {
            return bad("hemispheres and channels must be positive".into());
        }
        if self.lesion_patches.is_empty() {
            return bad("lesion patch set is empty".into());
        }
        if let Some(&p) = self.lesion_patches.iter().find(|&&p| p >= self.n_patches()) {
            return bad(format!(
                "lesion patch {p} outside 0..{}",
                self.n_patches()
            ));
        }
        if !(self.effect_size >= 0.0) || !self.effect_size.is_finite() {
            return bad(format!("effect size {} must be >= 0", self.effect_size));
        }
        if !(self.noise_std > 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise std {} must be positive", self.noise_std));
        }
        if !(self.baseline_amplitude >= 0.0) || !self.baseline_amplitude.is_finite() {
            return bad("baseline amplitude must be >= 0".into());
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return bad("per-split sample counts must be positive".into());
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!(
                "positive fraction {} outside (0, 1)",
                self.positive_fraction
            ));
        }
        Ok(())
    }

    /// Number of positives in a split of `count` samples.
    pub fn positives(&self, count: usize) -> usize {
        ((count as f64 * self.positive_fraction).round() as usize).clamp(1, count.max(1) - 1)
    }
}

/// 1 on lesion patches, else 0, over the `H·N` patch sequence.
pub fn lesion_ground_truth(spec: &SynthSpec) -> Vec<u8> {
    let mut mask = vec![0u8; spec.n_patches()];
    for &p in &spec.lesion_patches {
        if let Some(m) = mask.get_mut(p) {
            *m = 1;
        }
    }
    mask
}

/// A generated dataset held in memory.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub manifest: DatasetManifest,
    /// In manifest order.
    pub samples: Vec<SurfaceSample>,
}

const BASELINE_STREAM: u64 = 0;
const LABEL_STREAM: u64 = 1;
const SUBJECT_STREAM: u64 = 2;

fn smooth_baseline(spec: &SynthSpec, mesh: &IcosphereMesh) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[BASELINE_STREAM]));
    let scale = spec.baseline_amplitude / (spec.baseline_terms.max(1) as f64).sqrt();
    // one field per (hemisphere, channel), values per vertex
    (0..spec.hemispheres * spec.channels)
        .map(|_| {
            let terms: Vec<([f64; 3], f64, f64, f64)> = (0..spec.baseline_terms)
                .map(|_| {
                    let mut u = [0.0f64; 3];
                    for x in &mut u {
                        *x = StandardNormal.sample(&mut rng);
                    }
                    let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt().max(1e-12);
                    let u = [u[0] / n, u[1] / n, u[2] / n];
                    let freq = rng.random_range(1.0..3.0);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let amp: f64 = StandardNormal.sample(&mut rng);
                    (u, freq, phase, amp * scale)
                })
                .collect();
            mesh.vertices
                .iter()
                .map(|v| {
                    terms
                        .iter()
                        .map(|(u, f, ph, a)| {
                            a * (f * (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) + ph).cos()
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Rotate `v` about unit `axis` by `angle` (Rodrigues).
fn rotate(v: [f64; 3], axis: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let kxv = cross(axis, v);
    let kv = dot(axis, v);
    [
        v[0] * c + kxv[0] * s + axis[0] * kv * (1.0 - c),
        v[1] * c + kxv[1] * s + axis[1] * kv * (1.0 - c),
        v[2] * c + kxv[2] * s + axis[2] * kv * (1.0 - c),
    ]
}

/// Whether `v` lies in the spherical triangle `(a, b, c)` (counter-clockwise).
fn in_spherical_triangle(v: [f64; 3], [a, b, c]: [[f64; 3]; 3]) -> bool {
    const TOL: f64 = 1e-9;
    dot(cross(a, b), v) >= -TOL
        && dot(cross(b, c), v) >= -TOL
        && dot(cross(c, a), v) >= -TOL
        && dot(v, [a[0] + b[0] + c[0], a[1] + b[1] + c[1], a[2] + b[2] + c[2]]) > 0.0
}

/// Per hemisphere, the vertices carrying the planted effect.
pub fn lesion_vertices(spec: &SynthSpec) -> Result<Vec<Vec<u32>>> {
    spec.validate()?;
    let partition = build_partition(spec.mesh_order, spec.patch_order)?;
    lesion_vertices_in(spec, &partition, &build_icosphere(spec.mesh_order)?)
}

fn lesion_vertices_in(
    spec: &SynthSpec,
    partition: &PatchPartition,
    mesh: &IcosphereMesh,
) -> Result<Vec<Vec<u32>>> {
    let n = partition.n_patches();
    let mut out = vec![Vec::new(); spec.hemispheres];
    let coarse = build_icosphere(spec.patch_order)?;
    for &lp in &spec.lesion_patches {
        let (h, i) = (lp / n, lp % n);
        match spec.lesion_placement {
            LesionPlacement::Aligned => out[h].extend(&partition.patches[i]),
            LesionPlacement::HalfPatchOffset => {
                let corners = coarse.faces[i].map(|v| coarse.vertices[v as usize]);
                let [a, b, _] = coarse.faces[i];
                let neighbour = coarse
                    .faces
                    .iter()
                    .enumerate()
                    .find(|&(j, f)| j != i && f.contains(&a) && f.contains(&b))
                    .map(|(_, f)| f.map(|v| coarse.vertices[v as usize]))
                    .ok_or_else(|| Error::Invalid(format!("patch {i} has no neighbour")))?;
                let centroid = |t: [[f64; 3]; 3]| {
                    unit([
                        t[0][0] + t[1][0] + t[2][0],
                        t[0][1] + t[1][1] + t[2][1],
                        t[0][2] + t[1][2] + t[2][2],
                    ])
                };
                let (c0, c1) = (centroid(corners), centroid(neighbour));
                let axis = unit(cross(c0, c1));
                let angle = dot(c0, c1).clamp(-1.0, 1.0).acos() / 2.0;
                out[h].extend(
                    mesh.vertices
                        .iter()
                        .enumerate()
                        .filter(|&(_, &v)| in_spherical_triangle(rotate(v, axis, -angle), corners))
                        .map(|(k, _)| k as u32),
                );
            }
        }
    }
    for v in &mut out {
        v.sort_unstable();
        v.dedup();
    }
    Ok(out)
}

/// Generate all samples in memory. Subject `k` (counting across splits in
/// train, val, test order) draws its noise from its own derived seed.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mesh = build_icosphere(spec.mesh_order)?;
    let partition = build_partition(spec.mesh_order, spec.patch_order)?;
    let baseline = smooth_baseline(spec, &mesh);
    let lesions = lesion_vertices_in(spec, &partition, &mesh)?;
    let v = mesh.vertex_count();
    let f = spec.channels;

    let mut label_rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[LABEL_STREAM]));
    let mut plan: Vec<(Split, u8)> = Vec::new();
    for (split, count) in [
        (Split::Train, spec.train),
        (Split::Val, spec.val),
        (Split::Test, spec.test),
    ] {
        let pos = spec.positives(count);
        let mut labels: Vec<u8> = (0..count).map(|i| u8::from(i < pos)).collect();
        labels.shuffle(&mut label_rng);
        plan.extend(labels.into_iter().map(|y| (split, y)));
    }

    let shift = (spec.effect_size * spec.noise_std) as f32;
    let samples: Vec<SurfaceSample> = parallel::map_range(plan.len(), |k| {
        let (_, label) = plan[k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[SUBJECT_STREAM, k as u64]));
        let mut data = Vec::with_capacity(spec.hemispheres * v * f);
        for h in 0..spec.hemispheres {
            for vi in 0..v {
                for c in 0..f {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push((baseline[h * f + c][vi] + spec.noise_std * z) as f32);
                }
            }
        }
        if label == 1 {
            for (h, verts) in lesions.iter().enumerate() {
                for &vi in verts {
                    data[(h * v + vi as usize) * f] -= shift;
                }
            }
        }
        SurfaceSample {
            subject_id: subject_id(k),
            label,
            features: Tensor::new(vec![spec.hemispheres * v, f], data)
                .expect("sample length matches shape"),
        }
    });

    let train: Vec<SurfaceSample> = samples
        .iter()
        .zip(&plan)
        .filter(|(_, (s, _))| *s == Split::Train)
        .map(|(x, _)| x.clone())
        .collect();
    let manifest = DatasetManifest {
        mesh_order: spec.mesh_order,
        patch_order: spec.patch_order,
        hemispheres: spec.hemispheres,
        channels: (0..f).map(|c| format!("ch{c}")).collect(),
        normalization: compute_stats(&train)?,
        subjects: samples
            .iter()
            .zip(&plan)
            .map(|(s, (split, _))| SubjectEntry {
                id: s.subject_id.clone(),
                label: s.label,
                split: split.as_str().to_string(),
                path: format!("samples/{}.f32", s.subject_id),
            })
            .collect(),
    };
    Ok(SynthData { manifest, samples })
}

pub fn subject_id(k: usize) -> String {
    format!("sub-{k:04}")
}

pub const SPEC_FILE: &str = "synth_spec.json";

/// Generate and write `manifest.json`, `synth_spec.json` and one raw
/// little-endian f32 file per subject under `samples/`.
pub fn generate_to(spec: &SynthSpec, dir: &Path) -> Result<DatasetManifest> {
    let data = generate(spec)?;
    parallel::try_map(&data.samples, |s| {
        save_sample(&dir.join("samples").join(format!("{}.f32", s.subject_id)), s)
    })?;
    crate::io::write_json_atomic(&dir.join(SPEC_FILE), spec)?;
    write_manifest(dir, &data.manifest)?;
    Ok(data.manifest)
}
