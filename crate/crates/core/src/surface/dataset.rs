//! Dataset directories: `manifest.json` plus one raw float file per subject.
//!
//! Each sample file holds `V_total × F` little-endian `f32` values in
//! row-major order (vertex-major, channel-minor). With two hemispheres the
//! second hemisphere's vertices follow the first's, so `V_total = H · V`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::partition::PatchPartition;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub label: u8,
    /// One of `train`, `val`, `test`; validated on load.
    pub split: String,
    /// Relative to the manifest's directory.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub mesh_order: u32,
    pub patch_order: u32,
    pub hemispheres: usize,
    pub channels: Vec<String>,
    /// Per-channel statistics of the training split.
    pub normalization: ChannelStats,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn vertices_per_hemisphere(&self) -> usize {
        10 * 4usize.pow(self.mesh_order) + 2
    }

    pub fn total_vertices(&self) -> usize {
        self.vertices_per_hemisphere() * self.hemispheres
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.patch_order > self.mesh_order {
            return bad(format!(
                "patch order {} exceeds mesh order {}",
                self.patch_order, self.mesh_order
            ));
        }
        if self.hemispheres == 0 || self.channels.is_empty() {
            return bad("manifest needs at least one hemisphere and one channel".into());
        }
        let f = self.channels.len();
        if self.normalization.mean.len() != f || self.normalization.std.len() != f {
            return bad(format!(
                "normalization statistics must have {f} entries per field"
            ));
        }
        if self.normalization.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return bad("normalization std must be positive and finite".into());
        }
        let mut ids = std::collections::HashSet::new();
        for s in &self.subjects {
            s.split.parse::<Split>()?;
            if s.label > 1 {
                return bad(format!("subject {}: label must be 0 or 1", s.id));
            }
            if !ids.insert(&s.id) {
                return bad(format!("duplicate subject id {}", s.id));
            }
        }
        Ok(())
    }
}

/// Per-vertex features of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSample {
    pub subject_id: String,
    pub label: u8,
    /// `[V_total, F]`
    pub features: Tensor<f32>,
}

/// A loaded dataset, samples grouped by split in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: Vec<SurfaceSample>,
    pub val: Vec<SurfaceSample>,
    pub test: Vec<SurfaceSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SurfaceSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn find(&self, subject_id: &str) -> Option<&SurfaceSample> {
        Split::ALL
            .iter()
            .flat_map(|&s| self.split(s))
            .find(|s| s.subject_id == subject_id)
    }
}

/// Accept either a dataset directory or a path to its `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(path);
    let m: DatasetManifest = crate::io::read_json(&path)?;
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    crate::io::write_json_atomic(&dir.join("manifest.json"), manifest)
}

pub fn save_sample(path: &Path, sample: &SurfaceSample) -> Result<()> {
    let bytes: Vec<u8> = sample
        .features
        .data()
        .iter()
        .flat_map(|x| x.to_le_bytes())
        .collect();
    crate::io::write_atomic(path, &bytes)
}

pub fn read_sample(
    path: &Path,
    entry: &SubjectEntry,
    vertices: usize,
    channels: usize,
) -> Result<SurfaceSample> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Dataset(format!(
            "subject {}: cannot read {}: {e}",
            entry.id,
            path.display()
        ))
    })?;
    let expected = vertices * channels * 4;
    if bytes.len() != expected {
        return Err(Error::Dataset(format!(
            "subject {}: {} has {} bytes, expected {} ({} vertices x {} channels x 4)",
            entry.id,
            path.display(),
            bytes.len(),
            expected,
            vertices,
            channels
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Dataset(format!(
            "subject {}: non-finite feature values",
            entry.id
        )));
    }
    Ok(SurfaceSample {
        subject_id: entry.id.clone(),
        label: entry.label,
        features: Tensor::new(vec![vertices, channels], data)?,
    })
}

/// Load a dataset. With `normalize`, features are z-scored per channel using
/// the manifest's training statistics.
pub fn load_dataset(path: &Path, normalize: bool) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let manifest = read_manifest(&mpath)?;
    let root = mpath
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let (v, f) = (manifest.total_vertices(), manifest.n_channels());
    let loaded = crate::parallel::try_map(&manifest.subjects, |entry| {
        let mut s = read_sample(&root.join(&entry.path), entry, v, f)?;
        if normalize {
            normalize_sample(&mut s, &manifest.normalization)?;
        }
        Ok::<_, Error>((entry.split.parse::<Split>()?, s))
    })?;
    let mut ds = Dataset {
        root,
        manifest,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (split, s) in loaded {
        match split {
            Split::Train => ds.train.push(s),
            Split::Val => ds.val.push(s),
            Split::Test => ds.test.push(s),
        }
    }
    Ok(ds)
}

/// In-place per-channel z-normalization.
pub fn normalize_sample(sample: &mut SurfaceSample, stats: &ChannelStats) -> Result<()> {
    let f = stats.mean.len();
    if sample.features.shape().get(1) != Some(&f) {
        return Err(Error::Shape(format!(
            "sample {} has shape {:?}, statistics cover {} channels",
            sample.subject_id,
            sample.features.shape(),
            f
        )));
    }
    for row in sample.features.data_mut().chunks_mut(f) {
        for (c, x) in row.iter_mut().enumerate() {
            *x = ((*x as f64 - stats.mean[c]) / stats.std[c]) as f32;
        }
    }
    Ok(())
}

/// Per-channel mean and population standard deviation over all vertices of
/// all given samples.
pub fn compute_stats(samples: &[SurfaceSample]) -> Result<ChannelStats> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dataset("cannot compute statistics of an empty split".into()))?;
    let f = first.features.shape()[1];
    let mut sum = vec![0.0f64; f];
    let mut n = 0usize;
    for s in samples {
        for row in s.features.data().chunks(f) {
            for (c, &x) in row.iter().enumerate() {
                sum[c] += x as f64;
            }
            n += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut sq = vec![0.0f64; f];
    for s in samples {
        for row in s.features.data().chunks(f) {
            for (c, &x) in row.iter().enumerate() {
                let d = x as f64 - mean[c];
                sq[c] += d * d;
            }
        }
    }
    let std = sq
        .iter()
        .map(|s| (s / n as f64).sqrt().max(1e-12))
        .collect();
    Ok(ChannelStats { mean, std })
}

/// Gather a sample into its patch sequence `[H·N, M, F]`, hemisphere-major.
pub fn patchify(
    sample: &SurfaceSample,
    partition: &PatchPartition,
    hemispheres: usize,
) -> Result<Tensor<f32>> {
    let v = partition.vertex_count();
    let shape = sample.features.shape();
    if shape.len() != 2 || shape[0] != v * hemispheres {
        return Err(Error::Shape(format!(
            "sample {} has shape {:?}; expected [{} vertices x {} hemispheres, F]",
            sample.subject_id, shape, v, hemispheres
        )));
    }
    let f = shape[1];
    let (n, m) = (partition.n_patches(), partition.patch_size());
    let src = sample.features.data();
    let mut out = Vec::with_capacity(hemispheres * n * m * f);
    for h in 0..hemispheres {
        for patch in &partition.patches {
            for &vi in patch {
                let row = h * v + vi as usize;
                out.extend_from_slice(&src[row * f..(row + 1) * f]);
            }
        }
    }
    Tensor::new(vec![hemispheres * n, m, f], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::build_partition;

    fn sample(v: usize, f: usize, fill: impl Fn(usize, usize) -> f32) -> SurfaceSample {
        let data = (0..v * f).map(|i| fill(i / f, i % f)).collect();
        SurfaceSample {
            subject_id: "s".into(),
            label: 0,
            features: Tensor::new(vec![v, f], data).unwrap(),
        }
    }

    #[test]
    fn patchify_gathers_vertex_indices() {
        let p = build_partition(2, 0).unwrap();
        let s = sample(p.vertex_count(), 1, |v, _| v as f32);
        let t = patchify(&s, &p, 1).unwrap();
        assert_eq!(t.shape(), &[20, 15, 1]);
        for (i, patch) in p.patches.iter().enumerate() {
            for (j, &v) in patch.iter().enumerate() {
                assert_eq!(t.data()[i * 15 + j], v as f32);
            }
        }
    }

    #[test]
    fn second_hemisphere_is_offset() {
        let p = build_partition(2, 0).unwrap();
        let v = p.vertex_count();
        let s = sample(2 * v, 1, |i, _| i as f32);
        let t = patchify(&s, &p, 2).unwrap();
        assert_eq!(t.shape(), &[40, 15, 1]);
        for (i, patch) in p.patches.iter().enumerate() {
            for (j, &vi) in patch.iter().enumerate() {
                assert_eq!(t.data()[(20 + i) * 15 + j], (v + vi as usize) as f32);
            }
        }
    }

    #[test]
    fn constant_field_stays_constant() {
        let p = build_partition(3, 1).unwrap();
        let s = sample(p.vertex_count(), 3, |_, _| 2.5);
        let t = patchify(&s, &p, 1).unwrap();
        assert!(t.data().iter().all(|&x| x == 2.5));
    }

    #[test]
    fn patchify_rejects_wrong_vertex_count() {
        let p = build_partition(2, 0).unwrap();
        let s = sample(p.vertex_count() + 1, 1, |_, _| 0.0);
        assert!(patchify(&s, &p, 1).is_err());
    }

    #[test]
    fn identity_normalization() {
        let mut s = sample(10, 2, |v, c| (v * 3 + c) as f32 * 0.37);
        let before = s.clone();
        normalize_sample(&mut s, &ChannelStats::identity(2)).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn unknown_split_is_reported() {
        let err = "holdout".parse::<Split>().unwrap_err().to_string();
        assert!(err.contains("holdout"));
    }
}
