//! Command-line front end. Metrics go to the given writer as `key=value`
//! lines; progress and errors go to standard error.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, unreadable or invalid
//! inputs), 2 runtime or numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::codebook::{decode, Codebook};
use crate::config::RunConfig;
use crate::connectivity::{AttentionKind, Block, FocalBlocks};
use crate::error::Error;
use crate::experiment::{self, ExperimentConfig};
use crate::fewshot::file_hash;
use crate::layout::{canonicalize, Layout, PatchGrid};
use crate::model::{load_checkpoint, save_checkpoint, write_trace};
use crate::sampler::sample_sequence;

#[derive(Debug, Parser)]
#[command(name = "focalgen", about = "Layout-conditioned patch-token generation with focal attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct MaskFlags {
    /// causal, grid:K, grid:full, focal or focal-minus-{oo,op,pp}
    #[arg(long)]
    attention: Option<String>,
    /// Disable one focal block (falls back to the causal block).
    #[arg(long = "ablate-block")]
    ablate_block: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the corpus, fit the codebook, train one model and evaluate it.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        mask: MaskFlags,
    },
    /// Train every attention variant under identical settings.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated subset of variants.
        #[arg(long)]
        variants: Option<String>,
    },
    /// Generate token grids (and renders) for a layout file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        /// Defaults to `codebook.fgcb` next to the checkpoint.
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of samples, using seeds `seed..seed + count`.
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        mask: MaskFlags,
    },
    /// Extend a checkpoint to the novel category and fine-tune on a few shots.
    Fewshot {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write a mask as a PGM image (white = allowed).
    Maskviz {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, default_value = "8x8")]
        grid: String,
        /// Output file; `.pgm` gets the image, anything else the pair list.
        #[arg(long, default_value = "mask.pgm")]
        out: PathBuf,
        #[command(flatten)]
        mask: MaskFlags,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage<T>(r: crate::Result<T>, what: &Path) -> Result<T, Failure> {
    r.map_err(|e| Failure::Usage(format!("{}: {e}", what.display())))
}

fn resolve_attention(flags: &MaskFlags, default: AttentionKind) -> Result<AttentionKind, Failure> {
    let mut kind = match &flags.attention {
        Some(s) => s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?,
        None => default,
    };
    if let Some(b) = &flags.ablate_block {
        let block: Block = b.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
        let blocks = match kind {
            AttentionKind::Focal(blocks) => blocks,
            _ => FocalBlocks::ALL,
        };
        let off = FocalBlocks::without(block);
        kind = AttentionKind::Focal(FocalBlocks {
            object_object: blocks.object_object && off.object_object,
            object_patch: blocks.object_patch && off.object_patch,
            patch_patch: blocks.patch_patch && off.patch_patch,
        });
    }
    Ok(kind)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = usage(RunConfig::load(path), path)?;
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    Ok(cfg)
}

fn load_layout(path: &Path) -> Result<Layout, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let layout = usage(Layout::parse(&text, &experiment::categories()), path)?;
    Ok(canonicalize(&layout))
}

/// Runs the tool on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::Train { config, seed, out: dir, mask } => {
            let mut cfg = load_config(&config, seed)?;
            cfg.experiment.attention = resolve_attention(&mask, cfg.experiment.attention)?;
            cmd_train(&cfg.experiment, &dir, out)
        }
        Command::Ablate { config, seed, out: dir, variants } => {
            let cfg = load_config(&config, seed)?;
            let variants = match variants {
                Some(list) => list
                    .split(',')
                    .map(|s| s.parse().map_err(|e: Error| Failure::Usage(e.to_string())))
                    .collect::<Result<Vec<AttentionKind>, _>>()?,
                None => AttentionKind::ablation_set(),
            };
            cmd_ablate(&cfg.experiment, &variants, &dir, out)
        }
        Command::Sample { checkpoint, layout, codebook, seed, count, temperature, out: dir, mask } => {
            let attention = resolve_attention(&mask, AttentionKind::FOCAL)?;
            cmd_sample(&checkpoint, &layout, codebook.as_deref(), seed, count, temperature, attention, &dir, out)
        }
        Command::Fewshot { config, checkpoint, seed, shots, out: dir } => {
            let mut cfg = load_config(&config, None)?;
            if let Some(s) = seed {
                cfg.fewshot.seed = s;
            }
            if let Some(n) = shots {
                cfg.fewshot.shots = n;
            }
            cmd_fewshot(&cfg, &checkpoint, &dir, out)
        }
        Command::Maskviz { layout, grid, out: file, mask } => {
            let attention = resolve_attention(&mask, AttentionKind::FOCAL)?;
            cmd_maskviz(&layout, &grid, attention, &file, out)
        }
    }
}

fn cmd_train(cfg: &ExperimentConfig, dir: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let cats = experiment::categories();
    std::fs::create_dir_all(dir)?;
    let prep = experiment::prepare(cfg, &cats)?;
    prep.train.write_dir(&dir.join("dataset"), &cats, Some(&prep.codebook))?;
    prep.codebook.save(dir.join("codebook.fgcb"))?;
    let trained = experiment::train_attention(cfg, &cats, &prep, cfg.attention, &mut |s, l| {
        if s % 100 == 0 {
            eprintln!("step {s} loss {l:.5}");
        }
    })?;
    save_checkpoint(dir.join("checkpoint.fgck"), &trained.params, &cfg.model)?;
    write_trace(dir.join("trace.txt"), &trained.trace)?;
    let score = experiment::evaluate(&trained.params, cfg, &cats, &prep, cfg.attention)?;
    let lines = [
        format!("attention={}", cfg.attention),
        format!("seed={}", cfg.seed),
        format!("steps={}", trained.trace.len()),
        format!("final_loss={:.17e}", trained.trace.last().copied().unwrap_or(f64::NAN)),
        format!("consistency={score:.6}"),
        format!("checkpoint={}", dir.join("checkpoint.fgck").display()),
    ];
    emit(out, Some(&dir.join("metrics.txt")), &lines)
}

fn emit(out: &mut dyn Write, file: Option<&Path>, lines: &[String]) -> Result<(), Failure> {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    out.write_all(text.as_bytes())?;
    if let Some(f) = file {
        std::fs::write(f, text)?;
    }
    Ok(())
}

fn cmd_ablate(
    cfg: &ExperimentConfig,
    variants: &[AttentionKind],
    dir: &Path,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    let cats = experiment::categories();
    std::fs::create_dir_all(dir)?;
    let prep = experiment::prepare(cfg, &cats)?;
    let grid = cfg.model.grid;
    let mut lines = Vec::new();
    let mut any_failed = false;
    for &v in variants {
        if v == AttentionKind::GridFull {
            let mut same = true;
            for l in prep.train.layouts.iter().chain(&prep.eval.layouts) {
                let a = v.build(l, grid, &cats)?;
                let b = AttentionKind::Causal.build(l, grid, &cats)?;
                same &= a.patch_block() == b.patch_block();
            }
            lines.push(format!("variant={v} patch_block_equals_causal={same}"));
            out.write_all(format!("{}\n", lines.last().unwrap()).as_bytes())?;
        }
        eprintln!("training {v}");
        let row = experiment::train_attention(cfg, &cats, &prep, v, &mut |_, _| {}).and_then(|t| {
            let score = experiment::evaluate(&t.params, cfg, &cats, &prep, v)?;
            write_trace(dir.join(format!("trace_{}.txt", v.to_string().replace(':', "_"))), &t.trace)?;
            Ok((t.trace.last().copied().unwrap_or(f64::NAN), score))
        });
        match row {
            Ok((loss, score)) => {
                lines.push(format!("variant={v} status=ok final_loss={loss:.6} consistency={score:.6}"));
            }
            Err(e) => {
                any_failed = true;
                lines.push(format!("variant={v} status=failed error={}", e.to_string().replace(' ', "_")));
            }
        }
        out.write_all(format!("{}\n", lines.last().unwrap()).as_bytes())?;
    }
    std::fs::write(dir.join("ablation.txt"), lines.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    if any_failed {
        return Err(Failure::Runtime("one or more variants failed".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint: &Path,
    layout_path: &Path,
    codebook: Option<&Path>,
    seed: u64,
    count: u64,
    temperature: f64,
    attention: AttentionKind,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    let (params, cfg) = usage(load_checkpoint(checkpoint), checkpoint)?;
    let layout = load_layout(layout_path)?;
    let cb_path = match codebook {
        Some(p) => Some(p.to_path_buf()),
        None => {
            let p = checkpoint.with_file_name("codebook.fgcb");
            p.exists().then_some(p)
        }
    };
    let cb = match &cb_path {
        Some(p) => Some(usage(Codebook::load(p), p)?),
        None => None,
    };
    let cats = experiment::categories();
    let mask = attention.build(&layout, cfg.grid, &cats)?;
    std::fs::create_dir_all(dir)?;
    let mut lines = Vec::new();
    for s in seed..seed + count {
        let tokens = sample_sequence(&params, &layout, &mask, &cfg, s, temperature)?;
        let tok_path = dir.join(format!("sample_{s}.txt"));
        std::fs::write(&tok_path, tokens.to_grid_text(cfg.grid))?;
        let mut line = format!("seed={s} tokens={}", tok_path.display());
        if let Some(cb) = &cb {
            let img_path = dir.join(format!("sample_{s}.ppm"));
            decode(&tokens, cb, cfg.grid)?.write_ppm(&img_path)?;
            let score = crate::scenegen::consistency_score(&tokens, &layout, cb, &cats, cfg.grid)?;
            line.push_str(&format!(" image={} consistency={score:.6}", img_path.display()));
        }
        lines.push(line);
    }
    emit(out, None, &lines)
}

fn cmd_fewshot(cfg: &RunConfig, checkpoint: &Path, dir: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let hash_before = usage(file_hash(checkpoint), checkpoint)?;
    let (base, model_cfg) = usage(load_checkpoint(checkpoint), checkpoint)?;
    let mut exp = cfg.experiment.clone();
    exp.model = model_cfg;
    let cats = experiment::categories();
    std::fs::create_dir_all(dir)?;
    let prep = experiment::prepare(&exp, &cats)?;
    let report = experiment::run_fewshot(&base, &exp, &cfg.fewshot, &cats, &prep)?;
    let identical = experiment::base_outputs_match(&base, &report.model, &exp, &cats, &prep)?;
    report.model.save_delta(dir.join("fewshot.fgfs"))?;
    write_trace(dir.join("fewshot_trace.txt"), &report.trace)?;
    let hash_after = file_hash(checkpoint)?;
    let lines = [
        format!("shots={}", cfg.fewshot.shots),
        format!("base_checkpoint_hash_before={hash_before}"),
        format!("base_checkpoint_hash_after={hash_after}"),
        format!("base_checkpoint_unchanged={}", hash_before == hash_after),
        format!("base_params_unchanged={}", report.base_hash_before == report.base_hash_after),
        format!("base_outputs_identical={}", identical),
        format!("novel_consistency_before={:.6}", report.novel_before),
        format!("novel_consistency_after={:.6}", report.novel_after),
        format!("delta={}", dir.join("fewshot.fgfs").display()),
    ];
    emit(out, Some(&dir.join("fewshot_metrics.txt")), &lines)
}

fn parse_grid(s: &str) -> Result<PatchGrid, Failure> {
    let (r, c) = s.split_once(['x', 'X']).unwrap_or((s, s));
    let bad = || Failure::Usage(format!("bad grid `{s}` (expected RxC)"));
    let r = r.trim().parse().map_err(|_| bad())?;
    let c = c.trim().parse().map_err(|_| bad())?;
    PatchGrid::new(r, c).map_err(|_| bad())
}

fn cmd_maskviz(
    layout_path: &Path,
    grid: &str,
    attention: AttentionKind,
    file: &Path,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    let layout = load_layout(layout_path)?;
    let grid = parse_grid(grid)?;
    let mask = attention.build(&layout, grid, &experiment::categories())?;
    if file.extension().is_some_and(|e| e == "pgm") {
        std::fs::write(file, mask.to_pgm())?;
    } else {
        std::fs::write(file, mask.to_pairs_text())?;
    }
    let lines = [
        format!("attention={attention}"),
        format!("objects={}", mask.n_objects()),
        format!("patches={}", mask.n_patches()),
        format!("allowed={}", mask.count_allowed()),
        format!("file={}", file.display()),
    ];
    emit(out, None, &lines)
}
