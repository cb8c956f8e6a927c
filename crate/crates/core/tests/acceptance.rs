//! Acceptance criteria, one `PASS`/`FAIL` line each.
//!
//! Criteria 1, 2, 3, 6 and 8 run with every `cargo test`. The training
//! benchmarks (4, 5, 7 and 9) take about half an hour on one core and are
//! ignored by default:
//!
//! ```text
//! cargo test -p xsit-core --test acceptance -- --include-ignored
//! ```
//!
//! Lines go straight to stderr so they show without `--nocapture`.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xsit::explain::{
    export_prototype_surface, group_mean_map, prototype_overlap, GroupFilter, ProvenanceTable,
};
use xsit::psp::{class_probability, patch_similarities, rectified_cosine, sparse_weights, PrototypeBank, SparseScaler};
use xsit::surface::{build_icosphere, build_partition, load_dataset, Dataset, PatchPartition};
use xsit::synth::{generate_to, lesion_ground_truth, SynthSpec};
use xsit::tensor::Tensor;
use xsit::train::{
    evaluate, train_run, write_outputs, ClassWeighting, MetricsReport, PreparedData, RunConfig,
    TrainOutcome,
};

const ACCEPTANCE_CONFIG: &str = include_str!("../../../configs/acceptance.json");
const ACCEPTANCE_SPEC: &str = include_str!("../../../configs/synth_acceptance.json");

const C1_TIME_LIMIT: Duration = Duration::from_secs(120);
const C3_CASES: usize = 10_000;
const C4_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const C4_MIN_BACC: f64 = 0.95;
const C4_MIN_F1: f64 = 0.95;
const C5_MIN_MASS: f64 = 0.60;
const C7_MIN_OVERLAP: f64 = 50.0;
const C9_SEEDS: [u64; 3] = [0, 1, 2];
const C9_POSITIVE_FRACTION: f64 = 0.1;
const C9_EFFECT_SIZE: f64 = 0.5;
const C9_TEST_SAMPLES: usize = 100;
const C9_MIN_GAIN: f64 = 0.10;

fn report(criterion: u32, pass: bool, detail: impl AsRef<str>) -> bool {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "acceptance C{criterion} {status}: {}", detail.as_ref());
    pass
}

#[test]
fn c1_autodiff_matches_finite_differences() {
    let t = Instant::now();
    let mut ops = 0;
    let mut worst = (0.0f64, String::new());
    let mut failed = Vec::new();
    for (name, inputs, op) in common::op_cases() {
        let r = common::check_op(&inputs, op);
        ops += 1;
        if r.worst_ratio > worst.0 {
            worst = (r.worst_ratio, format!("{name} {}", r.worst));
        }
        if !r.passed() {
            failed.push(name);
        }
    }
    let model = common::check_tiny_model();
    if model.worst_ratio > worst.0 {
        worst = (model.worst_ratio, format!("model {}", model.worst));
    }
    let elapsed = t.elapsed();
    let pass = failed.is_empty() && model.passed() && elapsed < C1_TIME_LIMIT;
    let detail = format!(
        "{ops} ops and {} tiny-model parameters, worst error/tolerance {:.3} ({}), failed ops {failed:?}, {:.1}s",
        model.checked,
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    );
    assert!(report(1, pass, detail));
}

/// Vertex multiplicities of a partition against the closed forms: face
/// interiors 1, coarse edge interiors 2, coarse corners 5 or 6.
fn multiplicity_identities(part: &PatchPartition) -> bool {
    let (d, p) = (part.mesh_order, part.patch_order);
    let k = 1usize << (d - p);
    let n = part.n_patches();
    let coarse_v = 10 * 4usize.pow(p) + 2;
    let coarse_e = 30 * 4usize.pow(p);
    let mult = part.multiplicity();
    let count = |m: u32| mult[coarse_v..].iter().filter(|&&x| x == m).count();
    let corners_ok = mult[..coarse_v].iter().filter(|&&x| x == 5).count() == 12
        && mult[..coarse_v].iter().filter(|&&x| x == 6).count() == coarse_v - 12;
    corners_ok
        && count(1) == n * (k - 1) * k.saturating_sub(2) / 2
        && count(2) == coarse_e * (k - 1)
        && count(1) + count(2) == mult.len() - coarse_v
        && mult.iter().map(|&m| m as usize).sum::<usize>() == n * part.patch_size()
}

#[test]
fn c2_geometry_identities() {
    let mut bad = Vec::new();
    for d in 0..=6u32 {
        let m = build_icosphere(d).unwrap();
        if m.vertex_count() != 10 * 4usize.pow(d) + 2 || m.face_count() != 20 * 4usize.pow(d) {
            bad.push(format!("order {d}"));
        }
        if PatchPartition::patch_count_for(d) != 20 * 4usize.pow(d) {
            bad.push(format!("patch order {d}"));
        }
    }
    let v6 = build_icosphere(6).unwrap().vertex_count();
    let big = build_partition(6, 2).unwrap();
    let mut partitions = 0;
    for d in 0..=6u32 {
        for p in 0..=d.min(3) {
            let part = build_partition(d, p).unwrap();
            partitions += 1;
            if !multiplicity_identities(&part) {
                bad.push(format!("partition d={d} p={p}"));
            }
        }
    }
    let pass = bad.is_empty() && v6 == 40_962 && big.patch_size() == 153 && big.n_patches() == 320;
    let detail = format!(
        "V(6) = {v6}, M(6,2) = {}, {partitions} partitions checked, mismatches {bad:?}",
        big.patch_size()
    );
    assert!(report(2, pass, detail));
}

#[test]
fn c3_decoder_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let entry = |rng: &mut ChaCha8Rng| -> f32 {
        if rng.random_bool(0.1) {
            0.0
        } else {
            rng.random_range(-3.0..3.0)
        }
    };
    let (mut worst_sum, mut worst_scale, mut worst_recon) = (0.0f64, 0.0f64, 0.0f64);
    let (mut p_out, mut mask_bad) = (0usize, 0usize);
    for _ in 0..C3_CASES {
        let n = rng.random_range(1..=80usize);
        let d = rng.random_range(1..=16usize);
        let x: Vec<f32> = (0..n * d).map(|_| entry(&mut rng)).collect();
        let xi: Vec<f32> = (0..n * d).map(|_| entry(&mut rng)).collect();
        let logits: Vec<f32> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();

        let w = sparse_weights(&logits).unwrap();
        worst_sum = worst_sum.max((w.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
        let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let thr = 1.0 / n as f64;
        for (&wi, &ei) in w.iter().zip(&e) {
            let dense = ei / z;
            if (dense - thr).abs() > 1e-5 * thr && ((dense < thr) != (wi == 0.0)) {
                mask_bad += 1;
            }
        }

        let s: f32 = rng.random_range(1e-2..1e2);
        let scaled: Vec<f32> = x[..d].iter().map(|v| v * s).collect();
        let a = rectified_cosine(&x[..d], &xi[..d], true).unwrap();
        let b = rectified_cosine(&scaled, &xi[..d], true).unwrap();
        worst_scale = worst_scale.max((a - b).abs() as f64);

        let xt = Tensor::new(vec![n, d], x).unwrap();
        let bank = PrototypeBank::new(Tensor::new(vec![n, d], xi).unwrap()).unwrap();
        let scaler = SparseScaler { logits: Tensor::new(vec![n], logits).unwrap() };
        let p = class_probability(&xt, &bank, &scaler, true).unwrap() as f64;
        if !(0.0..=1.0).contains(&p) {
            p_out += 1;
        }
        let cos = patch_similarities(&xt, &bank, true).unwrap();
        let recon: f64 = w.iter().zip(&cos).map(|(&w, &c)| w as f64 * c as f64).sum();
        worst_recon = worst_recon.max((recon - p).abs());
    }
    let pass = p_out == 0 && mask_bad == 0 && worst_sum <= 1e-6 && worst_scale <= 1e-5 && worst_recon <= 1e-6;
    let detail = format!(
        "{C3_CASES} cases: P outside [0,1] {p_out}, mask mismatches {mask_bad}, max |sum w - 1| {worst_sum:.1e}, \
         max scale drift {worst_scale:.1e}, max |sum a - P| {worst_recon:.1e}"
    );
    assert!(report(3, pass, detail));
}

struct TinyRun {
    raw: Dataset,
    data: PreparedData,
    outcome: TrainOutcome,
}

fn tiny_run(seed: u64) -> TinyRun {
    let dir = tempfile::tempdir().unwrap();
    generate_to(&common::tiny_synth_spec(seed), dir.path()).unwrap();
    let data = PreparedData::new(&load_dataset(dir.path(), true).unwrap()).unwrap();
    let raw = load_dataset(dir.path(), false).unwrap();
    let outcome = train_run(&common::tiny_run_config(seed, 4), &data).unwrap();
    TinyRun { raw, data, outcome }
}

/// Active prototypes equal their provenance embeddings; exported patches
/// equal raw provenance features; masked patches are exactly `w_i = 0`.
fn fidelity_failures(run: &TinyRun) -> (usize, usize, usize, usize) {
    let model = &run.outcome.model;
    let d = model.bank.dim();
    let weights = model.scaler.weights().unwrap();
    let train = &run.data.train;
    let (mut embed_bad, mut export_bad, mut mask_bad, mut active) = (0, 0, 0, 0);
    let surface = export_prototype_surface(model, &run.raw, &run.data.partition, 0).unwrap();
    let f = run.raw.manifest.n_channels();
    for (i, w) in weights.iter().enumerate() {
        let prov = model.bank.provenance[i].as_ref().unwrap();
        if (*w == 0.0) != surface.patches[i].is_none() {
            mask_bad += 1;
        }
        if *w == 0.0 {
            continue;
        }
        active += 1;
        let k = train.subject_ids.iter().position(|s| *s == prov.subject_id).unwrap();
        let e = model.embed(&train.patches[k]).unwrap();
        if e.data()[i * d..(i + 1) * d] != model.bank.xi.data()[i * d..(i + 1) * d] {
            embed_bad += 1;
        }
        let src = run.raw.find(&prov.subject_id).unwrap().features.data();
        let want: Vec<f64> = run.data.partition.patches[i]
            .iter()
            .map(|&v| src[v as usize * f] as f64)
            .collect();
        if surface.patches[i].as_ref() != Some(&want) {
            export_bad += 1;
        }
    }
    (active, embed_bad, export_bad, mask_bad)
}

#[test]
fn c6_prototype_fidelity() {
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in [0, 1] {
        let run = tiny_run(seed);
        let (active, e, x, m) = fidelity_failures(&run);
        pass &= active > 0 && e == 0 && x == 0 && m == 0;
        lines.push(format!("seed {seed}: {active} active, embedding mismatches {e}, export mismatches {x}, mask mismatches {m}"));
    }
    assert!(report(6, pass, lines.join("; ")));
}

#[test]
fn c8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    generate_to(&common::tiny_synth_spec(8), dir.path()).unwrap();
    let data = PreparedData::new(&load_dataset(dir.path(), true).unwrap()).unwrap();
    let cfg = common::tiny_run_config(8, 3);
    let outs: Vec<tempfile::TempDir> = (0..2)
        .map(|_| {
            let out = tempfile::tempdir().unwrap();
            write_outputs(out.path(), &cfg, &train_run(&cfg, &data).unwrap()).unwrap();
            out
        })
        .collect();
    let mut same = Vec::new();
    for f in ["best.ckpt", "best.ckpt.provenance.json", "metrics.csv"] {
        let a = std::fs::read(outs[0].path().join(f)).unwrap();
        let b = std::fs::read(outs[1].path().join(f)).unwrap();
        same.push((f, a == b));
    }
    let pass = same.iter().all(|(_, s)| *s);
    assert!(report(8, pass, format!("byte-identical {same:?}")));
}

struct SeedRun {
    seed: u64,
    test: MetricsReport,
    lesion_mass: f64,
    best_epoch: usize,
    provenance: ProvenanceTable,
}

fn acceptance_config() -> RunConfig {
    RunConfig::from_json(ACCEPTANCE_CONFIG).unwrap()
}

/// Prepared data of the acceptance spec with `edit` applied.
fn prepared(edit: impl FnOnce(&mut SynthSpec)) -> (SynthSpec, PreparedData) {
    let mut spec: SynthSpec = serde_json::from_str(ACCEPTANCE_SPEC).unwrap();
    edit(&mut spec);
    let dir = tempfile::tempdir().unwrap();
    generate_to(&spec, dir.path()).unwrap();
    let data = PreparedData::new(&load_dataset(dir.path(), true).unwrap()).unwrap();
    (spec, data)
}

/// The five benchmark runs shared by criteria 4, 5 and 7.
fn benchmark_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let (spec, data) = prepared(|_| {});
        let truth = lesion_ground_truth(&spec);
        C4_SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = acceptance_config();
                cfg.train.seed = seed;
                let out = train_run(&cfg, &data).unwrap();
                let test = evaluate(&out.model, &data.test).unwrap();
                let lesion_mass = match group_mean_map(&out.model, &data, &GroupFilter::default()) {
                    Ok(g) => {
                        let total: f64 = g.activations.iter().sum();
                        let on: f64 = g
                            .activations
                            .iter()
                            .zip(&truth)
                            .filter(|(_, &t)| t == 1)
                            .map(|(a, _)| a)
                            .sum();
                        on / total
                    }
                    Err(_) => 0.0,
                };
                SeedRun {
                    seed,
                    test,
                    lesion_mass,
                    best_epoch: out.best_epoch,
                    provenance: ProvenanceTable::from_model(&out.model).unwrap(),
                }
            })
            .collect()
    })
}

#[test]
#[ignore = "trains five models on the benchmark spec"]
fn c4_c5_c7_synthetic_benchmark() {
    let t = Instant::now();
    let runs = benchmark_runs();
    let per_seed = |f: &dyn Fn(&SeedRun) -> String| runs.iter().map(f).collect::<Vec<_>>().join(", ");

    let c4 = runs.iter().all(|r| r.test.balanced_accuracy >= C4_MIN_BACC && r.test.f1 >= C4_MIN_F1);
    let c4 = report(
        4,
        c4,
        format!(
            "test Bacc/F1 per seed [{}] (need >= {C4_MIN_BACC}/{C4_MIN_F1}), {:.0}s per seed",
            per_seed(&|r| format!("{}: {:.3}/{:.3} @ epoch {}", r.seed, r.test.balanced_accuracy, r.test.f1, r.best_epoch)),
            t.elapsed().as_secs_f64() / runs.len() as f64
        ),
    );
    let c5 = report(
        5,
        runs.iter().all(|r| r.lesion_mass >= C5_MIN_MASS),
        format!(
            "lesion share of group-mean activation [{}] (need >= {C5_MIN_MASS})",
            per_seed(&|r| format!("{}: {:.3}", r.seed, r.lesion_mass))
        ),
    );
    let tables: Vec<ProvenanceTable> = runs.iter().map(|r| r.provenance.clone()).collect();
    let overlap = prototype_overlap(&tables).unwrap();
    let c7 = report(
        7,
        overlap >= C7_MIN_OVERLAP,
        format!(
            "mean pairwise prototype overlap {overlap:.1}% over {} seeds (need >= {C7_MIN_OVERLAP}%), active patches [{}]",
            runs.len(),
            per_seed(&|r| format!("{}: {}", r.seed, r.provenance.active.iter().filter(|&&a| a).count()))
        ),
    );
    assert!(c4 && c5 && c7, "criteria 4/5/7: {c4}/{c5}/{c7}");
}

#[test]
#[ignore = "trains six models on an imbalanced spec"]
fn c9_class_weighting() {
    let (_, data) = prepared(|s| {
        s.positive_fraction = C9_POSITIVE_FRACTION;
        s.effect_size = C9_EFFECT_SIZE;
        s.test = C9_TEST_SAMPLES;
    });
    let mean_bacc = |weighting: ClassWeighting| -> (f64, Vec<f64>) {
        let b: Vec<f64> = C9_SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = acceptance_config();
                cfg.train.seed = seed;
                cfg.train.class_weighting = weighting;
                let out = train_run(&cfg, &data).unwrap();
                evaluate(&out.model, &data.test).unwrap().balanced_accuracy
            })
            .collect();
        (b.iter().sum::<f64>() / b.len() as f64, b)
    };
    let (inv, inv_seeds) = mean_bacc(ClassWeighting::InverseFrequency);
    let (uni, uni_seeds) = mean_bacc(ClassWeighting::Uniform);
    let pass = report(
        9,
        inv - uni >= C9_MIN_GAIN,
        format!(
            "9:1 split, effect {C9_EFFECT_SIZE}: mean test Bacc inverse-frequency {inv:.3} {inv_seeds:.3?} vs uniform {uni:.3} {uni_seeds:.3?}, gain {:.1} points (need >= {:.0})",
            100.0 * (inv - uni),
            100.0 * C9_MIN_GAIN
        ),
    );
    assert!(pass);
}
