use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deca_core::data::{generate_synthetic, load_dataset, parse_views, GenParams, SamplerParams, Split, ViewTag};
use deca_core::model::{Domain, Variant};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::experiments::{ablation_ladder, median, transfer_study};
use crate::pipeline::{evaluate_checkpoint, train_model, transfer, write_json, write_jsonl, write_latents};

#[derive(Debug, Parser)]
#[command(name = "deca", version, about = "Capsule autoencoder for 3D human pose estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic multi-view pose dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one view.
    Eval(EvalArgs),
    /// Evaluate a model trained on one view on another view.
    Transfer(TransferArgs),
    /// Dump per-joint latent entities as CSV.
    InspectLatent(InspectArgs),
    /// Train and evaluate several variants over several seeds.
    Ladder(LadderArgs),
    /// Repeat a viewpoint transfer over several seeds.
    TransferStudy(TransferStudyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub num: usize,
    #[arg(long, default_value = "front,top")]
    pub views: String,
    #[arg(long, default_value_t = 15)]
    pub joints: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long, default_value = "depth")]
    pub domain: Domain,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict training to one view (front, top or free); all views if omitted.
    #[arg(long)]
    pub train_view: Option<ViewTag>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub view: Option<ViewTag>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub train_view: ViewTag,
    #[arg(long)]
    pub test_view: ViewTag,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub view: Option<ViewTag>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct LadderArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub view: Option<ViewTag>,
    #[arg(long, default_value = "D1,D2,D3")]
    pub variants: String,
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransferStudyArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub train_view: ViewTag,
    #[arg(long)]
    pub test_view: ViewTag,
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    #[arg(long)]
    pub report: PathBuf,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    let v: Vec<T> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|_| CliError::Usage(format!("bad {what} {p:?}"))))
        .collect::<CliResult<_>>()?;
    if v.is_empty() {
        return Err(CliError::Usage(format!("empty {what} list")));
    }
    Ok(v)
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let params = GenParams {
        num: a.num,
        views: parse_views(&a.views)?,
        joints: a.joints,
        resolution: [a.res, a.res],
        domain: a.domain,
        seed: a.seed,
        test_fraction: a.test_fraction,
        sampler: SamplerParams::default(),
    };
    let m = generate_synthetic(&params, &a.out)?;
    println!("wrote {} samples to {}", m.samples.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&a.config)?;
    let ds = load_dataset(&a.data)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(format!("cannot create {}", a.out.display()), e))?;
    let log_path = a.out.join("train_log.jsonl");
    let file = if resume.is_some() {
        std::fs::OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    };
    let mut log = BufWriter::new(file.map_err(|e| CliError::io(format!("cannot open {}", log_path.display()), e))?);
    let ck = train_model(&cfg, &ds, a.train_view, resume, |e| {
        println!("epoch {} loss {:.5}", e.epoch, e.loss_total);
        write_jsonl(&mut log, e)
    })?;
    drop(log);
    ck.save(&a.out)?;
    println!("saved checkpoint at step {} to {}", ck.step, a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let r = evaluate_checkpoint(&ck, &ds, a.view, a.split.split())?;
    write_json(&a.report, &r)?;
    println!("mpjpe {:.2} mm, pa-mpjpe {:.2} mm, mAP@0.10 {:.4}", r.mpjpe_mm, r.mpjpe_pa_mm, r.map_010);
    Ok(())
}

fn transfer_cmd(a: &TransferArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let r = transfer(&ck, &ds, a.train_view, a.test_view)?;
    write_json(&a.report, &r)?;
    println!(
        "{} -> {}: mpjpe {:.2} mm (mean-pose baseline {:.2} mm)",
        a.train_view, a.test_view, r.model.mpjpe_mm, r.mean_pose_baseline.mpjpe_mm
    );
    Ok(())
}

fn inspect(a: &InspectArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let n = write_latents(&ck, &ds, a.view, a.split.split(), &a.out)?;
    println!("wrote {n} entities to {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct LadderSummary {
    runs: Vec<crate::experiments::LadderRun>,
    median_map_010: Vec<(Variant, f64)>,
}

fn ladder(a: &LadderArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&a.config)?;
    let ds = load_dataset(&a.data)?;
    let variants: Vec<Variant> = parse_list(&a.variants, "variant")?;
    let seeds: Vec<u64> = parse_list(&a.seeds, "seed")?;
    let runs = ablation_ladder(&cfg, &ds, a.view, &variants, &seeds, |r, _| {
        println!("{:?} seed {}: mAP@0.10 {:.4}", r.variant, r.seed, r.test.map_010);
    })?;
    let median_map_010 = variants
        .iter()
        .map(|&v| {
            let m: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(|r| r.test.map_010).collect();
            (v, median(&m))
        })
        .collect();
    write_json(&a.report, &LadderSummary { runs, median_map_010 })
}

fn transfer_study_cmd(a: &TransferStudyArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&a.config)?;
    let ds = load_dataset(&a.data)?;
    let seeds: Vec<u64> = parse_list(&a.seeds, "seed")?;
    let runs = transfer_study(&cfg, &ds, a.train_view, a.test_view, &seeds)?;
    for r in &runs {
        println!(
            "seed {}: mpjpe {:.2} mm, baseline {:.2} mm",
            r.seed, r.report.model.mpjpe_mm, r.report.mean_pose_baseline.mpjpe_mm
        );
    }
    write_json(&a.report, &runs)
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Transfer(a) => transfer_cmd(a),
        Command::InspectLatent(a) => inspect(a),
        Command::Ladder(a) => ladder(a),
        Command::TransferStudy(a) => transfer_study_cmd(a),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
/// Failures print `deca: error[<category>]: <message>` on one line.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("deca: error[usage]: {first}");
            return 2;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("deca: error[{}]: {}", e.category(), one_line(&e.to_string()));
            1
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

