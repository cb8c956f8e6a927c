//! Synthetic generator: planted effect sizes, null case and determinism.

use std::fs;
use std::path::Path;

use xsit::surface::{build_partition, load_dataset, Split, SurfaceSample};
use xsit::synth::{generate, generate_to, lesion_ground_truth, lesion_vertices, LesionPlacement, SynthSpec};

fn spec(effect: f64) -> SynthSpec {
    SynthSpec {
        mesh_order: 3,
        patch_order: 1,
        lesion_patches: vec![2, 17, 40],
        effect_size: effect,
        train: 160,
        val: 40,
        test: 40,
        seed: 21,
        ..SynthSpec::default()
    }
}

/// Per vertex of channel `c`, mean over positives minus mean over negatives.
fn class_difference(samples: &[SurfaceSample], c: usize) -> Vec<f64> {
    let f = samples[0].features.shape()[1];
    let v = samples[0].features.shape()[0];
    let mut sums = [vec![0.0; v], vec![0.0; v]];
    let mut counts = [0usize; 2];
    for s in samples {
        counts[s.label as usize] += 1;
        for (i, x) in sums[s.label as usize].iter_mut().enumerate() {
            *x += s.features.data()[i * f + c] as f64;
        }
    }
    (0..v)
        .map(|i| sums[1][i] / counts[1] as f64 - sums[0][i] / counts[0] as f64)
        .collect()
}

fn mean_over(values: &[f64], idx: impl Iterator<Item = usize>) -> f64 {
    let (s, n) = idx.fold((0.0, 0usize), |(s, n), i| (s + values[i], n + 1));
    s / n as f64
}

#[test]
fn planted_effect_has_its_size() {
    let sp = spec(3.0);
    let data = generate(&sp).unwrap();
    let lesion: Vec<usize> = lesion_vertices(&sp).unwrap()[0].iter().map(|&v| v as usize).collect();
    let outside: Vec<usize> = (0..data.samples[0].features.shape()[0]).filter(|i| !lesion.contains(i)).collect();
    let diff = class_difference(&data.samples, 0);
    let inside = mean_over(&diff, lesion.iter().copied());
    let out = mean_over(&diff, outside.iter().copied());
    assert!((inside + 3.0).abs() < 0.1, "inside {inside}");
    assert!(out.abs() < 0.05, "outside {out}");
    for c in 1..sp.channels {
        let d = class_difference(&data.samples, c);
        assert!(mean_over(&d, lesion.iter().copied()).abs() < 0.1);
    }
}

#[test]
fn null_effect_leaves_classes_alike() {
    let sp = spec(0.0);
    let data = generate(&sp).unwrap();
    let n = data.samples.len() as f64;
    for c in 0..sp.channels {
        let d = class_difference(&data.samples, c);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        assert!(m.abs() <= 4.0 * sp.noise_std / n.sqrt(), "channel {c}: {m}");
    }
}

#[test]
fn lesion_mask_and_vertices_agree() {
    let sp = spec(3.0);
    let mask = lesion_ground_truth(&sp);
    assert_eq!(mask.len(), 80);
    assert_eq!(mask.iter().map(|&m| m as usize).sum::<usize>(), 3);
    let part = build_partition(sp.mesh_order, sp.patch_order).unwrap();
    let mut want: Vec<u32> = sp.lesion_patches.iter().flat_map(|&p| part.patches[p].clone()).collect();
    want.sort_unstable();
    want.dedup();
    assert_eq!(lesion_vertices(&sp).unwrap()[0], want);
}

#[test]
fn offset_lesion_straddles_patches() {
    let mut sp = spec(3.0);
    sp.lesion_patches = vec![5];
    let aligned = lesion_vertices(&sp).unwrap()[0].clone();
    sp.lesion_placement = LesionPlacement::HalfPatchOffset;
    let shifted = lesion_vertices(&sp).unwrap()[0].clone();
    assert_ne!(aligned, shifted);
    let ratio = shifted.len() as f64 / aligned.len() as f64;
    assert!((0.6..1.4).contains(&ratio), "{} vs {}", shifted.len(), aligned.len());
    let part = build_partition(sp.mesh_order, sp.patch_order).unwrap();
    let touched = part
        .patches
        .iter()
        .filter(|p| p.iter().filter(|v| shifted.contains(v)).count() >= 3)
        .count();
    assert!(touched >= 2);
}

#[test]
fn patch_mean_classifier_is_near_perfect() {
    // Known separation: mean of channel 0 over lesion vertices, threshold half
    // way between the class means estimated on train.
    let sp = spec(3.0);
    let data = generate(&sp).unwrap();
    let lesion = lesion_vertices(&sp).unwrap()[0].clone();
    let stat = |s: &SurfaceSample| {
        lesion.iter().map(|&v| s.features.data()[v as usize * sp.channels] as f64).sum::<f64>()
            / lesion.len() as f64
    };
    let train = &data.samples[..sp.train];
    let mean = |y: u8| {
        let v: Vec<f64> = train.iter().filter(|s| s.label == y).map(stat).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let thr = (mean(0) + mean(1)) / 2.0;
    let rest = &data.samples[sp.train..];
    let correct = rest.iter().filter(|s| (stat(s) < thr) == (s.label == 1)).count();
    assert!(correct as f64 / rest.len() as f64 > 0.99);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("samples")] {
        for e in fs::read_dir(&sub).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_same_bytes_and_loadable() {
    let mut sp = spec(3.0);
    sp.mesh_order = 2;
    sp.patch_order = 0;
    sp.lesion_patches = vec![1];
    sp.positive_fraction = 0.1;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_to(&sp, a.path()).unwrap();
    generate_to(&sp, b.path()).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(fa.len(), 2 + 240);
    assert_eq!(fa, fb);

    let ds = load_dataset(a.path(), true).unwrap();
    for (split, count) in [(Split::Train, 160), (Split::Val, 40), (Split::Test, 40)] {
        let s = ds.split(split);
        assert_eq!(s.len(), count);
        let pos = s.iter().filter(|x| x.label == 1).count();
        assert_eq!(pos, count / 10);
    }
    // training statistics standardize the training split
    let f = sp.channels;
    let train = ds.split(Split::Train);
    for c in 0..f {
        let vals: Vec<f64> = train
            .iter()
            .flat_map(|s| s.features.data().chunks(f).map(move |r| r[c] as f64))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-4, "channel {c} mean {m}");
    }

    sp.seed += 1;
    let c = tempfile::tempdir().unwrap();
    generate_to(&sp, c.path()).unwrap();
    assert_ne!(dir_bytes(c.path()), fa);
}
