//! Command-line surface for the depth-sequence pipeline.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 3 numeric
//! divergence during training.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use depthseq::error::Error;
use depthseq::gradsuite;
use depthseq::hemisplit::{separate_hemispheres_with, Connectivity};
use depthseq::metrics::LandmarkSet;
use depthseq::model::{estimate_flops, load_checkpoint, ModelConfig};
use depthseq::phantom::{
    self, generate_classification_case, generate_phantom, make_folds, save_case, DataManifest,
    PhantomCase, PhantomSpec,
};
use depthseq::pipeline::{
    assign_segments, evaluate, infer, run_ablation, train, AblationAxis, CaseRow, TrainConfig,
};
use depthseq::volume::{
    load_mask, load_volume, save_label_mask, save_mask,
};

#[derive(Parser)]
#[command(name = "depthseq", about = "Depth-sequence ICA landmark pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a versioned manifest.
    Phantom(PhantomArgs),
    /// Split a skull volume into left/right hemisphere masks.
    SplitHemispheres(SplitArgs),
    /// Train one fold and persist the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a fold's test split (JSON + CSV).
    Eval(EvalArgs),
    /// Run inference on a single volume.
    Infer(InferArgs),
    /// Label calcified voxels with ICA segments 1-8.
    AssignSegments(SegmentsArgs),
    /// Train baseline and variant arms and compare.
    Ablate(AblateArgs),
    /// Print the FLOP breakdown for a model config and input dims.
    Flops(FlopsArgs),
    /// Run the gradient-check suite and print per-op max relative error.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// H,W,D
    #[arg(long, default_value = "32,32,24")]
    dims: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also generate 3-class classification cases (one per class per
    /// count unit).
    #[arg(long, default_value_t = false)]
    classification: bool,
    /// Max per-case depth reduction (anatomy stays end-anchored).
    #[arg(long, default_value_t = 0)]
    depth_jitter: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_left: PathBuf,
    #[arg(long)]
    out_right: PathBuf,
    #[arg(long, default_value_t = 300.0)]
    hu_min: f32,
    /// 6 or 26
    #[arg(long, default_value_t = 26)]
    connectivity: u8,
}

#[derive(Args)]
struct TrainArgs {
    /// TrainConfig JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the manifest path in the config; defaults further to
    /// $DEPTHSEQ_DATA_DIR/manifest.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, default_value_t = 5)]
    folds_k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, default_value_t = 5)]
    folds_k: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    out_json: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentsArgs {
    #[arg(long)]
    calc_mask: PathBuf,
    /// Source volume, used for the hemisphere split and geometry.
    #[arg(long)]
    volume: PathBuf,
    /// LandmarkSet JSON ({"indices": [..6 slice indices..]}).
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300.0)]
    hu_min: f32,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// wo_attention | right_padding | layers
    #[arg(long)]
    axis: String,
    #[arg(long, default_value_t = 5)]
    folds_k: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    work_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    /// ModelConfig JSON.
    #[arg(long)]
    config: PathBuf,
    /// H,W,D
    #[arg(long)]
    dims: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), Error> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Argument(format!("bad dims '{s}', expected H,W,D")))?;
    if parts.len() != 3 {
        return Err(Error::Argument(format!("bad dims '{s}', expected H,W,D")));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn resolve_manifest(flag: &Option<PathBuf>, cfg_path: &std::path::Path) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    if cfg_path.as_os_str().is_empty() {
        phantom::data_dir(std::path::Path::new("data")).join("manifest.json")
    } else {
        cfg_path.to_path_buf()
    }
}

fn load_cases(manifest_path: &std::path::Path) -> Result<(DataManifest, Vec<PhantomCase>), Error> {
    let manifest = DataManifest::load(manifest_path)?;
    let dir = manifest_path
        .parent()
        .unwrap_or_else(|| std::path::Path::new("."));
    let cases = manifest
        .cases
        .iter()
        .map(|e| phantom::load_case(e, dir))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, cases))
}

fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<(), Error> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_case_csv(path: &std::path::Path, rows: &[CaseRow]) -> Result<(), Error> {
    let mut out = String::from("case_id,landmark,z_true,z_pred,abs_err,top1,top2,within_tau1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.case_id, r.landmark, r.z_true, r.z_pred, r.abs_err, r.top1, r.top2, r.within_tau1
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Phantom(a) => {
            let dims = parse_dims(&a.dims)?;
            let spec = PhantomSpec {
                dims,
                seed: a.seed,
                depth_jitter: a.depth_jitter,
                ..PhantomSpec::default()
            };
            spec.validate()?;
            let mut manifest = DataManifest::new(spec.clone());
            for i in 0..a.count as u64 {
                let case = if a.classification {
                    generate_classification_case(&spec, (i % 3) as u8, i)?
                } else {
                    generate_phantom(&spec, i)?
                };
                manifest.cases.push(save_case(&case, &a.out)?);
            }
            let mpath = a.out.join("manifest.json");
            manifest.save(&mpath)?;
            println!("wrote {} cases to {}", a.count, a.out.display());
        }
        Command::SplitHemispheres(a) => {
            let conn = match a.connectivity {
                6 => Connectivity::Six,
                26 => Connectivity::TwentySix,
                other => {
                    return Err(Error::Argument(format!(
                        "connectivity must be 6 or 26, got {other}"
                    )))
                }
            };
            let v = load_volume(&a.input)?;
            let hemi = separate_hemispheres_with(&v, a.hu_min, conn)?;
            save_mask(&hemi.left, &v, &a.out_left)?;
            save_mask(&hemi.right, &v, &a.out_right)?;
            println!(
                "left {} voxels, right {} voxels",
                hemi.left.count(),
                hemi.right.count()
            );
        }
        Command::Train(a) => {
            let mut cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(&a.config)?)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(f) = a.fold {
                cfg.fold = f;
            }
            cfg.manifest_path = resolve_manifest(&a.manifest, &cfg.manifest_path);
            cfg.validate()?;
            let (_, cases) = load_cases(&cfg.manifest_path)?;
            let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
            let plan = make_folds(&ids, a.folds_k, cfg.seed)?;
            let split = plan
                .folds
                .get(cfg.fold)
                .ok_or_else(|| Error::Argument(format!("fold {} out of range", cfg.fold)))?;
            let report = train(&cfg, &cases, split, &a.out)?;
            println!(
                "best epoch {} (val metric {:.4}), checkpoint {}",
                report.best_epoch,
                report.best_val_metric,
                a.out.display()
            );
            if let Some(rp) = a.report {
                write_json(&rp, &report)?;
            }
        }
        Command::Eval(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let manifest_path = resolve_manifest(&a.manifest, std::path::Path::new(""));
            let (_, cases) = load_cases(&manifest_path)?;
            let selected: Vec<&PhantomCase> = match a.fold {
                Some(f) => {
                    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
                    let plan = make_folds(&ids, a.folds_k, a.split_seed)?;
                    let split = plan
                        .folds
                        .get(f)
                        .ok_or_else(|| Error::Argument(format!("fold {f} out of range")))?;
                    cases
                        .iter()
                        .filter(|c| split.test.contains(&c.case_id))
                        .collect()
                }
                None => cases.iter().collect(),
            };
            let out = evaluate(&ckpt.model, &selected)?;
            write_json(&a.out_json, &out.report)?;
            write_case_csv(&a.out_csv, &out.rows)?;
            println!(
                "aggregate mae {:.4}, acc_tau1 {:.4}",
                out.report.aggregate.mae, out.report.aggregate.acc_tau1
            );
        }
        Command::Infer(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let v = load_volume(&a.input)?;
            let out = infer(&ckpt.model, &v)?;
            write_json(&a.out, &out)?;
            println!("landmarks: {:?}", out.landmarks.indices);
        }
        Command::AssignSegments(a) => {
            let calc = load_mask(&a.calc_mask)?;
            let v = load_volume(&a.volume)?;
            let lm: LandmarkSet = serde_json::from_str(&fs::read_to_string(&a.landmarks)?)?;
            let hemi = separate_hemispheres_with(&v, a.hu_min, Connectivity::TwentySix)?;
            let labels = assign_segments(&calc, &lm, &hemi)?;
            save_label_mask(&labels, &v, &a.out)?;
            let vols = depthseq::metrics::per_segment_volume(&labels, v.spacing);
            println!("per-segment volume (mm^3): {vols:?}");
        }
        Command::Ablate(a) => {
            let mut cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(&a.config)?)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.manifest_path = resolve_manifest(&a.manifest, &cfg.manifest_path);
            cfg.validate()?;
            let axis: AblationAxis = a.axis.parse()?;
            let (_, cases) = load_cases(&cfg.manifest_path)?;
            let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
            let plan = make_folds(&ids, a.folds_k, cfg.seed)?;
            let report = run_ablation(&cfg, axis, &cases, &plan.folds, &a.work_dir)?;
            write_json(&a.out, &report)?;
            for arm in &report.arms {
                println!(
                    "{}: {} {:.4} +/- {:.4}",
                    arm.name, report.metric, arm.mean, arm.std
                );
            }
        }
        Command::Flops(a) => {
            let cfg: ModelConfig = serde_json::from_str(&fs::read_to_string(&a.config)?)?;
            cfg.validate()?;
            let dims = parse_dims(&a.dims)?;
            let fl = estimate_flops(&cfg, dims);
            println!("{}", serde_json::to_string_pretty(&fl)?);
        }
        Command::Gradcheck(a) => {
            let results = gradsuite::run_suite(a.seed)?;
            let mut worst = 0.0f64;
            for r in &results {
                println!("{:28} {:.3e}", r.name, r.max_rel_err);
                worst = worst.max(r.max_rel_err);
            }
            if worst >= 1e-3 {
                return Err(Error::Argument(format!(
                    "gradient check failed: max relative error {worst:.3e}"
                )));
            }
            println!("all ops under 1e-3");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Divergence { epoch, value }) => {
            eprintln!("error: training diverged at epoch {epoch} (loss {value})");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
