//! Icosphere counts and the patch partition against a brute-force
//! spherical-triangle containment oracle.

use std::collections::{BTreeSet, HashSet};

use xsit::surface::{build_icosphere, build_partition, PatchPartition};

fn det(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * c[1] - b[1] * c[0])
}

#[test]
fn vertex_face_and_edge_counts() {
    for d in 0..=6u32 {
        let m = build_icosphere(d).unwrap();
        let v = 10 * 4usize.pow(d) + 2;
        assert_eq!(m.vertex_count(), v, "order {d}");
        assert_eq!(m.face_count(), 20 * 4usize.pow(d), "order {d}");
        let edges: HashSet<(u32, u32)> = m
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        assert_eq!(v as i64 - edges.len() as i64 + m.face_count() as i64, 2, "Euler, order {d}");
        for p in &m.vertices {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(build_icosphere(6).unwrap().vertex_count(), 40_962);
}

#[test]
fn patch_counts_and_sizes() {
    for p in 0..=3u32 {
        assert_eq!(PatchPartition::patch_count_for(p), 20 * 4usize.pow(p));
    }
    let part = build_partition(6, 2).unwrap();
    assert_eq!((part.n_patches(), part.patch_size()), (320, 153));
    assert_eq!(PatchPartition::patch_size_for(4, 1), 45);
}

/// Order-`d` vertices inside or on the spherical triangle of each order-`p`
/// face. Lower-order vertices keep their indices at higher orders.
fn containment_oracle(d: u32, p: u32) -> Vec<BTreeSet<u32>> {
    let fine = build_icosphere(d).unwrap();
    let coarse = build_icosphere(p).unwrap();
    coarse
        .faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| coarse.vertices[i as usize]);
            fine.vertices
                .iter()
                .enumerate()
                .filter(|(_, &v)| {
                    det(a, b, v) >= -1e-12 && det(b, c, v) >= -1e-12 && det(c, a, v) >= -1e-12
                })
                .map(|(i, _)| i as u32)
                .collect()
        })
        .collect()
}

#[test]
fn patches_match_brute_force_containment() {
    for (d, p) in [(1, 0), (2, 0), (3, 1), (4, 1), (4, 2), (5, 3)] {
        let part = build_partition(d, p).unwrap();
        let oracle = containment_oracle(d, p);
        assert_eq!(part.n_patches(), oracle.len());
        for (f, (got, want)) in part.patches.iter().zip(&oracle).enumerate() {
            let got_set: BTreeSet<u32> = got.iter().copied().collect();
            assert_eq!(got_set.len(), got.len(), "duplicate vertex in patch {f}");
            assert_eq!(&got_set, want, "d={d} p={p} patch {f}");
        }
    }
}

#[test]
fn coverage_and_valence() {
    for (d, p) in [(2, 0), (3, 1), (4, 1), (4, 2)] {
        let part = build_partition(d, p).unwrap();
        let coarse = build_icosphere(p).unwrap();
        let fine = build_icosphere(d).unwrap();
        let mult = part.multiplicity();
        let total: u32 = mult.iter().sum();
        assert_eq!(total as usize, part.n_patches() * part.patch_size());
        // corners: coarse valence; coarse-edge interiors: 2; face interiors: 1
        let mut valence = vec![0u32; coarse.vertex_count()];
        for f in &coarse.faces {
            for &v in f {
                valence[v as usize] += 1;
            }
        }
        for (i, &m) in mult.iter().enumerate() {
            let v = fine.vertices[i];
            let want = if i < coarse.vertex_count() {
                valence[i]
            } else {
                // number of coarse great-circle edges through v
                let on_edge = coarse.faces.iter().any(|f| {
                    let [a, b, c] = f.map(|j| coarse.vertices[j as usize]);
                    [(a, b), (b, c), (c, a)].iter().any(|&(x, y)| {
                        det(x, y, v).abs() < 1e-12
                            && det(a, b, v) >= -1e-12
                            && det(b, c, v) >= -1e-12
                            && det(c, a, v) >= -1e-12
                    })
                });
                if on_edge { 2 } else { 1 }
            };
            assert_eq!(m, want, "d={d} p={p} vertex {i}");
        }
        assert!(valence.iter().all(|&k| k == 5 || k == 6));
    }
}

#[test]
fn lattice_slots_line_up_across_patches() {
    // Slot 0, slot k and the last slot are the three face corners, in order.
    let (d, p) = (4, 1);
    let part = build_partition(d, p).unwrap();
    let coarse = build_icosphere(p).unwrap();
    let k = 1usize << (d - p);
    for (f, face) in coarse.faces.iter().enumerate() {
        let patch = &part.patches[f];
        assert_eq!([patch[0], patch[k], patch[patch.len() - 1]], *face);
    }
}
