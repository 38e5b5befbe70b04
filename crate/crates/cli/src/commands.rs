use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use stfmar_core::format::FormatError;
use stfmar_core::mar::MemoryBank;
use stfmar_core::params::ParamStore;
use stfmar_core::pipeline::{
    estimate_cost, generate_synthetic, miou, miou_many, partition_sweep, rebuild_bank,
    sliding_window_infer, train_multistage, write_metrics_log, write_pgm, Clip, Dataset, Segmenter,
};
use stfmar_core::selftest::{run_selftest, Fault};

use crate::config::RunConfig;

/// Environment variable that plants a deliberate defect in `selftest`.
pub const FAULT_ENV: &str = "STFMAR_SELFTEST_FAULT";

#[derive(Debug)]
pub enum Failure {
    /// Bad invocation or configuration.
    Usage(String),
    /// Data, artifact or I/O trouble.
    Data(String),
    /// At least one selftest check failed.
    Selftest(usize),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Selftest(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) => f.write_str(m),
            Failure::Selftest(n) => write!(f, "{n} selftest check(s) failed"),
        }
    }
}

impl From<stfmar_core::Error> for Failure {
    fn from(e: stfmar_core::Error) -> Self {
        match e {
            stfmar_core::Error::Config(m) => Failure::Usage(m),
            e => Failure::Data(e.to_string()),
        }
    }
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn artifact_failure(path: &Path) -> impl FnOnce(FormatError) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

pub type Outcome = Result<(), Failure>;

/// Reads and validates a config file, or the defaults when none is given.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

pub fn check_config(cfg: &RunConfig) -> Outcome {
    let errs = cfg.validate();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "invalid configuration:\n  {}",
            errs.join("\n  ")
        )))
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, Failure> {
    let dir = cfg.paths.out_dir.as_path();
    fs::create_dir_all(dir).map_err(io_failure(dir))?;
    Ok(dir)
}

fn dataset(cfg: &RunConfig, seed: u64) -> Result<Dataset, Failure> {
    Ok(generate_synthetic(seed, &cfg.data)?)
}

fn segmenter(cfg: &RunConfig) -> Result<Segmenter, Failure> {
    Ok(Segmenter::new(
        &cfg.model,
        cfg.data.classes,
        cfg.data.height,
        cfg.data.width,
    )?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(io_failure(path))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Outcome {
    let mut out = BufWriter::new(File::create(path).map_err(io_failure(path))?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Failure::Data(e.to_string()))?;
        out.write_all(b"\n").map_err(io_failure(path))?;
    }
    out.flush().map_err(io_failure(path))
}

pub fn train(cfg: &RunConfig) -> Outcome {
    let dir = out_dir(cfg)?;
    let data = dataset(cfg, cfg.seed)?;
    let run = train_multistage(&data, &cfg.model, &cfg.train, cfg.seed)?;

    let metrics = cfg.out_path(&cfg.paths.metrics);
    let mut log = Vec::new();
    write_metrics_log(&run.log, &mut log).map_err(io_failure(&metrics))?;
    write_file(&metrics, &log)?;
    let params = cfg.out_path(&cfg.paths.params);
    run.store.save(&params).map_err(artifact_failure(&params))?;
    let bank = cfg.out_path(&cfg.paths.bank);
    run.bank.save(&bank).map_err(artifact_failure(&bank))?;

    for stage in 1..=3u8 {
        if let Some(last) = run.log.iter().rev().find(|r| r.stage == stage) {
            println!(
                "stage {stage}: val mIoU {:.4} after {} epochs",
                last.miou, last.epoch
            );
        }
    }
    println!(
        "wrote {}, {} and {} in {}",
        cfg.paths.params.display(),
        cfg.paths.bank.display(),
        cfg.paths.metrics.display(),
        dir.display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
}

pub struct InferArgs {
    pub params: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub data_seed: Option<u64>,
    pub split: Split,
    pub clip: usize,
}

#[derive(Serialize)]
struct FrameRecord {
    frame: usize,
    map: String,
    miou: f64,
}

#[derive(Serialize)]
struct ClipRecord {
    split: &'static str,
    clip: usize,
    frames: usize,
    miou: f64,
}

fn select_clip(data: &Dataset, split: Split, index: usize) -> Result<&Clip, Failure> {
    let (name, clips) = match split {
        Split::Train => ("train", &data.train),
        Split::Val => ("val", &data.val),
    };
    clips.get(index).ok_or_else(|| {
        Failure::Usage(format!(
            "clip {index} out of range: the {name} split has {} clips",
            clips.len()
        ))
    })
}

fn load_params(path: &Path) -> Result<ParamStore, Failure> {
    ParamStore::load(path).map_err(artifact_failure(path))
}

pub fn infer(cfg: &RunConfig, args: &InferArgs) -> Outcome {
    let dir = out_dir(cfg)?;
    let params_path = args
        .params
        .clone()
        .unwrap_or_else(|| cfg.out_path(&cfg.paths.params));
    let bank_path = args
        .bank
        .clone()
        .unwrap_or_else(|| cfg.out_path(&cfg.paths.bank));
    let store = load_params(&params_path)?;
    let bank = MemoryBank::load(&bank_path).map_err(artifact_failure(&bank_path))?;
    let model = segmenter(cfg)?;
    let data = dataset(cfg, args.data_seed.unwrap_or(cfg.seed))?;
    let clip = select_clip(&data, args.split, args.clip)?;

    let maps = sliding_window_infer(&model, &store, &bank, clip)?;
    let gts: Vec<_> = clip
        .labels
        .iter()
        .map(|l| l.subsample(cfg.model.stride))
        .collect();
    let map_dir = dir.join("maps");
    fs::create_dir_all(&map_dir).map_err(io_failure(&map_dir))?;
    let mut records = Vec::with_capacity(maps.len());
    for (t, (map, gt)) in maps.iter().zip(&gts).enumerate() {
        let name = format!("frame_{t:03}.pgm");
        let path = map_dir.join(&name);
        write_pgm(map, model.classes, &path).map_err(artifact_failure(&path))?;
        records.push(FrameRecord {
            frame: t,
            map: format!("maps/{name}"),
            miou: miou(map, gt, model.classes)?.miou,
        });
    }
    let clip_miou = miou_many(maps.iter().zip(&gts), model.classes)?;
    write_jsonl(&dir.join("infer.jsonl"), &records)?;
    let summary = ClipRecord {
        split: match args.split {
            Split::Train => "train",
            Split::Val => "val",
        },
        clip: args.clip,
        frames: maps.len(),
        miou: clip_miou,
    };
    write_jsonl(&dir.join("infer_summary.jsonl"), &[summary])?;
    println!("wrote {} maps to {}", maps.len(), map_dir.display());
    println!("clip mIoU {clip_miou:.6}");
    Ok(())
}

pub fn build_memory(cfg: &RunConfig, params: Option<&Path>, output: Option<&Path>) -> Outcome {
    let dir = out_dir(cfg)?;
    let name = output.unwrap_or(&cfg.paths.bank);
    let mut probe = cfg.clone();
    probe.paths.bank = name.to_path_buf();
    check_config(&probe)?;
    let params_path = params.map_or_else(|| cfg.out_path(&cfg.paths.params), Path::to_path_buf);
    let store = load_params(&params_path)?;
    let model = segmenter(cfg)?;
    let data = dataset(cfg, cfg.seed)?;
    let bank = rebuild_bank(&model, &store, &data.train)?;
    let path = dir.join(name);
    bank.save(&path).map_err(artifact_failure(&path))?;
    println!(
        "wrote {} with {} keys ({} classes x {}) of dimension {}",
        path.display(),
        bank.keys().rows(),
        bank.classes(),
        bank.keys_per_class(),
        bank.dim()
    );
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Outcome {
    let dir = out_dir(cfg)?;
    let cost = cfg.cost_config();
    let r = estimate_cost(&cost);
    println!(
        "volume T={} H={} W={} partition {}x{}: N = {} tokens",
        cost.frames, cost.height, cost.width, cost.partition.b_h, cost.partition.b_w, r.tokens
    );
    println!("dense affinity entries  {}", r.dense_entries());
    println!(
        "icsa affinity entries   {} (long {} + short {})",
        r.icsa.total_entries(),
        r.icsa.long_entries,
        r.icsa.short_entries
    );
    println!(
        "reduction  {:.1}x summed, {:.1}x largest map",
        r.reduction(),
        r.peak_reduction()
    );
    println!(
        "macs: stf {}  mar {}  classifier {}",
        r.stf_macs, r.mar_macs, r.classifier_macs
    );
    let path = dir.join("partition_sweep.jsonl");
    write_jsonl(&path, &partition_sweep(&cost))?;
    println!("partition sweep written to {}", path.display());
    Ok(())
}

pub fn fault_from_env() -> Result<Option<Fault>, Failure> {
    match std::env::var(FAULT_ENV) {
        Err(_) => Ok(None),
        Ok(v) if v.is_empty() => Ok(None),
        Ok(v) if v == "permutation" => Ok(Some(Fault::FlipPermutationIndex)),
        Ok(v) => Err(Failure::Usage(format!(
            "{FAULT_ENV}: unknown fault `{v}` (known: permutation)"
        ))),
    }
}

pub fn selftest() -> Outcome {
    let outcomes = run_selftest(fault_from_env()?);
    for o in &outcomes {
        println!(
            "{} {:<32} {:>7.2}s  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.seconds,
            o.detail
        );
    }
    match outcomes.iter().filter(|o| !o.passed).count() {
        0 => Ok(()),
        n => Err(Failure::Selftest(n)),
    }
}
