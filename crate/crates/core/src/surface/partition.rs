use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::icosphere::build_levels;
use crate::error::{Error, Result};

/// Triangular patches of an order-`mesh_order` icosphere, one per face of the
/// order-`patch_order` icosphere.
///
/// Vertices on a patch edge belong to every patch sharing that edge, so all
/// patches hold exactly `M = (k+1)(k+2)/2` vertices with `k = 2^(d-p)`.
/// Within a patch, vertices are listed in barycentric lattice order: row by
/// row from the face's `a-b` edge towards corner `c`, each row from the `a`
/// side to the `b` side. The same lattice position therefore sits at the same
/// slot in every patch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPartition {
    pub mesh_order: u32,
    pub patch_order: u32,
    pub patches: Vec<Vec<u32>>,
}

impl PatchPartition {
    pub fn patch_count_for(patch_order: u32) -> usize {
        20 * 4usize.pow(patch_order)
    }

    pub fn patch_size_for(mesh_order: u32, patch_order: u32) -> usize {
        let k = 1usize << (mesh_order - patch_order);
        (k + 1) * (k + 2) / 2
    }

    /// Patches per hemisphere.
    pub fn n_patches(&self) -> usize {
        self.patches.len()
    }

    /// Vertices per patch.
    pub fn patch_size(&self) -> usize {
        self.patches.first().map_or(0, Vec::len)
    }

    /// Vertices per hemisphere.
    pub fn vertex_count(&self) -> usize {
        10 * 4usize.pow(self.mesh_order) + 2
    }

    /// Number of patches each vertex belongs to.
    pub fn multiplicity(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.vertex_count()];
        for p in &self.patches {
            for &v in p {
                counts[v as usize] += 1;
            }
        }
        counts
    }

    /// Spread one value per patch onto vertices of one hemisphere; vertices
    /// shared by several patches get the mean of those patches' values.
    pub fn patch_values_to_vertices(&self, per_patch: &[f64]) -> Vec<f64> {
        let mut acc = RunningMean::new(self.vertex_count());
        for (p, &value) in self.patches.iter().zip(per_patch) {
            for &v in p {
                acc.push(v as usize, value);
            }
        }
        acc.finish()
    }

    /// Inverse of gathering: average per-patch-vertex values back onto the
    /// vertices of one hemisphere. `values[i][j]` belongs to vertex
    /// `patches[i][j]`.
    pub fn scatter_mean(&self, values: &[Vec<f64>]) -> Vec<f64> {
        let mut acc = RunningMean::new(self.vertex_count());
        for (p, vals) in self.patches.iter().zip(values) {
            for (&v, &x) in p.iter().zip(vals) {
                acc.push(v as usize, x);
            }
        }
        acc.finish()
    }
}

/// Per-vertex running mean. Equal contributions reproduce the value exactly,
/// which a sum-then-divide would not.
struct RunningMean {
    mean: Vec<f64>,
    count: Vec<u32>,
}

impl RunningMean {
    fn new(n: usize) -> Self {
        RunningMean {
            mean: vec![0.0; n],
            count: vec![0; n],
        }
    }

    fn push(&mut self, i: usize, x: f64) {
        self.count[i] += 1;
        if self.count[i] == 1 {
            self.mean[i] = x;
        } else {
            self.mean[i] += (x - self.mean[i]) / self.count[i] as f64;
        }
    }

    /// Vertices that received nothing are NaN.
    fn finish(self) -> Vec<f64> {
        self.mean
            .into_iter()
            .zip(self.count)
            .map(|(m, c)| if c == 0 { f64::NAN } else { m })
            .collect()
    }
}

/// Build the patch partition of an order-`mesh_order` mesh by the faces of
/// the order-`patch_order` mesh.
pub fn build_partition(mesh_order: u32, patch_order: u32) -> Result<PatchPartition> {
    if patch_order > mesh_order {
        return Err(Error::Invalid(format!(
            "patch order {patch_order} exceeds mesh order {mesh_order}"
        )));
    }
    let (_, levels) = build_levels(mesh_order)?;
    let k = 1u32 << (mesh_order - patch_order);
    let m = PatchPartition::patch_size_for(mesh_order, patch_order);

    let mut patches = Vec::with_capacity(levels[patch_order as usize].len());
    for (f, &corners) in levels[patch_order as usize].iter().enumerate() {
        // lattice coordinates (beta, gamma) in units of 1/k
        let mut lattice: HashMap<u32, (u32, u32)> = HashMap::with_capacity(m);
        let mut stack = vec![(patch_order, f, [(0u32, 0u32), (k, 0), (0, k)])];
        while let Some((level, face, coords)) = stack.pop() {
            let verts = if level == patch_order {
                corners
            } else {
                levels[level as usize][face]
            };
            for (&v, &c) in verts.iter().zip(&coords) {
                if let Some(prev) = lattice.insert(v, c) {
                    debug_assert_eq!(prev, c);
                }
            }
            if level == mesh_order {
                continue;
            }
            let [pa, pb, pc] = coords;
            let half = |x: (u32, u32), y: (u32, u32)| ((x.0 + y.0) / 2, (x.1 + y.1) / 2);
            let (pab, pbc, pca) = (half(pa, pb), half(pb, pc), half(pc, pa));
            let base = face * 4;
            stack.push((level + 1, base, [pa, pab, pca]));
            stack.push((level + 1, base + 1, [pab, pb, pbc]));
            stack.push((level + 1, base + 2, [pca, pbc, pc]));
            stack.push((level + 1, base + 3, [pab, pbc, pca]));
        }
        let mut entries: Vec<(u32, u32, u32)> =
            lattice.into_iter().map(|(v, (b, g))| (g, b, v)).collect();
        entries.sort_unstable();
        if entries.len() != m {
            return Err(Error::Invalid(format!(
                "patch {f} collected {} vertices, expected {m}",
                entries.len()
            )));
        }
        patches.push(entries.into_iter().map(|(_, _, v)| v).collect());
    }
    Ok(PatchPartition {
        mesh_order,
        patch_order,
        patches,
    })
}
