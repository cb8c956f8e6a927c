//! `xsit`: generate synthetic data, train, evaluate and export explanations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use xsit::explain::{
    activation_map, export_prototype_surface, group_mean_map, pair_overlap, patch_csv,
    patch_to_vertex_map, prototype_overlap, GroupFilter, ProvenanceTable,
};
use xsit::io::{write_atomic, write_json_atomic};
use xsit::model::Model;
use xsit::surface::{build_icosphere, build_partition, load_dataset, write_ply, Split};
use xsit::synth::{generate_to, SynthSpec};
use xsit::train::{
    evaluate, train_run_with, trained_normalized, write_outputs, PreparedData, RunConfig,
};

#[derive(Parser)]
#[command(name = "xsit", version, about = "Prototype-based surface vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted lesions.
    GenData {
        /// Synthetic spec JSON; omitted keys take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write best.ckpt, metrics.csv and config.resolved.json.
    Train {
        /// Run config JSON; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on one split and print the metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also write the full per-subject report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export activation maps, prototype surfaces or cross-model overlap.
    Explain {
        /// Repeat for `--mode overlap`.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Required by every mode except overlap.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Individual mode: only these subjects (default: the whole split).
        #[arg(long)]
        subject: Vec<String>,
        /// Group mode: true label to average over, or "any".
        #[arg(long, default_value = "1")]
        label: String,
        /// Group mode: keep misclassified samples too.
        #[arg(long)]
        include_incorrect: bool,
        /// Prototypes mode: feature channel to export.
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
    /// Write an icosphere mesh as PLY.
    Mesh {
        #[arg(long)]
        order: u32,
        #[arg(long, default_value_t = 1)]
        hemispheres: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Individual,
    Group,
    Prototypes,
    Overlap,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("xsit: usage error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    xsit::parallel::init_from_env();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("xsit: error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out } => gen_data(spec.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            seed,
            epochs,
        } => train(config.as_deref(), &data, &out, seed, epochs),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => eval(&checkpoint, &data, split, out.as_deref()),
        Command::Explain {
            checkpoint,
            data,
            mode,
            out,
            split,
            subject,
            label,
            include_incorrect,
            channel,
        } => {
            if mode == Mode::Overlap {
                return overlap(&checkpoint, &out);
            }
            let [ckpt] = checkpoint.as_slice() else {
                bail!("--mode {mode:?} takes exactly one --checkpoint");
            };
            let data = data.with_context(|| format!("--mode {mode:?} needs --data"))?;
            match mode {
                Mode::Individual => individual(ckpt, &data, split, &subject, &out),
                Mode::Group => {
                    let label = match label.as_str() {
                        "any" => None,
                        "0" => Some(0),
                        "1" => Some(1),
                        other => bail!("--label must be 0, 1 or any, got '{other}'"),
                    };
                    let filter = GroupFilter {
                        split,
                        label,
                        correct_only: !include_incorrect,
                    };
                    group(ckpt, &data, &filter, &out)
                }
                Mode::Prototypes => prototypes(ckpt, &data, channel, &out),
                Mode::Overlap => unreachable!(),
            }
        }
        Command::Mesh {
            order,
            hemispheres,
            out,
        } => {
            let mesh = build_icosphere(order)?;
            write_ply(&out, &mesh, hemispheres, None)?;
            println!("{}", json!({ "vertices": mesh.vertex_count() * hemispheres, "out": out }));
            Ok(())
        }
    }
}

fn gen_data(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: SynthSpec = match spec {
        Some(p) => xsit::io::read_json(p)?,
        None => SynthSpec::default(),
    };
    let manifest = generate_to(&spec, out)?;
    println!(
        "{}",
        json!({ "subjects": manifest.subjects.len(), "out": out })
    );
    Ok(())
}

fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut rc = match config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    if let Some(e) = epochs {
        rc.train.epochs = e;
    }
    rc.validate()?;
    let dataset = load_dataset(data, rc.data.normalize)?;
    let prepared = PreparedData::new(&dataset)?;
    let total = rc.train.epochs;
    let outcome = train_run_with(&rc, &prepared, |r| {
        eprintln!(
            "epoch {}/{total} loss {:.4} val_bacc {:.3} val_f1 {:.3}",
            r.epoch, r.train_loss, r.val_bacc, r.val_f1
        );
    })?;
    write_outputs(out, &rc, &outcome)?;
    let val = outcome.final_val.as_ref();
    println!(
        "{}",
        json!({
            "best_epoch": outcome.best_epoch,
            "val_bacc": val.map(|m| m.balanced_accuracy),
            "val_f1": val.map(|m| m.f1),
            "out": out,
        })
    );
    Ok(())
}

/// Checkpoint plus the dataset preprocessed the way it was trained.
fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Model, PreparedData)> {
    let (model, extra) = Model::load(checkpoint)?;
    let dataset = load_dataset(data, trained_normalized(&extra))?;
    let prepared = PreparedData::new(&dataset)?;
    if prepared.dims != model.config.dims {
        bail!(
            "checkpoint expects input {:?}, dataset gives {:?}",
            model.config.dims,
            prepared.dims
        );
    }
    Ok((model, prepared))
}

fn eval(checkpoint: &Path, data: &Path, split: Split, out: Option<&Path>) -> Result<()> {
    let (model, prepared) = load_pair(checkpoint, data)?;
    let report = evaluate(&model, prepared.split(split))?;
    if let Some(out) = out {
        write_json_atomic(out, &report)?;
    }
    println!(
        "{}",
        json!({
            "split": split.as_str(),
            "n": report.len(),
            "balanced_accuracy": report.balanced_accuracy,
            "f1": report.f1,
            "tp": report.tp,
            "fp": report.fp,
            "tn": report.tn,
            "fn": report.fn_,
        })
    );
    Ok(())
}

fn hemispheres(model: &Model, prepared: &PreparedData) -> usize {
    model.n_patches() / prepared.partition.n_patches()
}

/// `<stem>.csv` with per-patch values and `<stem>.ply` with them spread over
/// the vertices.
fn write_patch_outputs(
    out: &Path,
    stem: &str,
    model: &Model,
    prepared: &PreparedData,
    values: &[f64],
    weights: &[f64],
) -> Result<()> {
    let provenance = ProvenanceTable::from_model(model)?.subjects;
    write_atomic(
        &out.join(format!("{stem}.csv")),
        patch_csv(values, weights, &provenance).as_bytes(),
    )?;
    let h = hemispheres(model, prepared);
    let per_vertex = patch_to_vertex_map(&prepared.partition, h, values)?;
    let mesh = build_icosphere(prepared.partition.mesh_order)?;
    write_ply(
        &out.join(format!("{stem}.ply")),
        &mesh,
        h,
        Some(("activation", &per_vertex)),
    )?;
    Ok(())
}

fn individual(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    subjects: &[String],
    out: &Path,
) -> Result<()> {
    let (model, prepared) = load_pair(checkpoint, data)?;
    let s = prepared.split(split);
    let chosen: Vec<usize> = if subjects.is_empty() {
        (0..s.len()).collect()
    } else {
        subjects
            .iter()
            .map(|id| {
                s.subject_ids
                    .iter()
                    .position(|x| x == id)
                    .with_context(|| format!("subject {id} is not in the {split} split"))
            })
            .collect::<Result<_>>()?
    };
    let mut summary = Vec::with_capacity(chosen.len());
    for i in chosen {
        let map = activation_map(&model, &s.patches[i])?;
        let id = &s.subject_ids[i];
        write_patch_outputs(out, id, &model, &prepared, &map.activations, &map.weights)?;
        summary.push(json!({
            "subject_id": id,
            "label": s.labels[i],
            "probability": map.probability,
        }));
    }
    write_json_atomic(&out.join("individual.json"), &summary)?;
    println!("{}", json!({ "maps": summary.len(), "out": out }));
    Ok(())
}

fn group(checkpoint: &Path, data: &Path, filter: &GroupFilter, out: &Path) -> Result<()> {
    let (model, prepared) = load_pair(checkpoint, data)?;
    let g = group_mean_map(&model, &prepared, filter)?;
    write_patch_outputs(out, "group", &model, &prepared, &g.activations, &g.weights)?;
    write_json_atomic(
        &out.join("group.json"),
        &json!({ "split": filter.split.as_str(), "subject_ids": g.subject_ids }),
    )?;
    println!("{}", json!({ "samples": g.subject_ids.len(), "out": out }));
    Ok(())
}

fn prototypes(checkpoint: &Path, data: &Path, channel: usize, out: &Path) -> Result<()> {
    let (model, _) = Model::load(checkpoint)?;
    let raw = load_dataset(data, false)?;
    let m = &raw.manifest;
    let partition = build_partition(m.mesh_order, m.patch_order)?;
    let surface = export_prototype_surface(&model, &raw, &partition, channel)?;
    let means: Vec<f64> = surface
        .patches
        .iter()
        .map(|p| match p {
            Some(v) => v.iter().sum::<f64>() / v.len() as f64,
            None => f64::NAN,
        })
        .collect();
    let weights: Vec<f64> = model.scaler.weights()?.iter().map(|&w| w as f64).collect();
    let provenance = ProvenanceTable::from_model(&model)?.subjects;
    write_atomic(
        &out.join("prototypes.csv"),
        patch_csv(&means, &weights, &provenance).as_bytes(),
    )?;
    let mesh = build_icosphere(m.mesh_order)?;
    let name = format!("channel{channel}");
    write_ply(
        &out.join("prototypes.ply"),
        &mesh,
        m.hemispheres,
        Some((&name, &surface.vertices)),
    )?;
    let active = surface.patches.iter().filter(|p| p.is_some()).count();
    println!("{}", json!({ "active_patches": active, "out": out }));
    Ok(())
}

fn overlap(checkpoints: &[PathBuf], out: &Path) -> Result<()> {
    let tables = checkpoints
        .iter()
        .map(|p| {
            let (model, _) = Model::load(p)?;
            Ok(ProvenanceTable::from_model(&model)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let percent = prototype_overlap(&tables)?;
    let mut pairs = Vec::new();
    for i in 0..tables.len() {
        for j in i + 1..tables.len() {
            pairs.push(json!({
                "a": checkpoints[i],
                "b": checkpoints[j],
                "overlap_percent": 100.0 * pair_overlap(&tables[i], &tables[j])?,
            }));
        }
    }
    write_json_atomic(
        &out.join("overlap.json"),
        &json!({ "overlap_percent": percent, "pairs": pairs }),
    )?;
    println!("{}", json!({ "overlap_percent": percent, "out": out }));
    Ok(())
}
