//! Command implementations behind the `fewseg` binary.
//!
//! Exit-code contract: 0 success, 1 usage/config error, 2 numerical failure.
//! Every command is deterministic under a fixed seed and writes its
//! effective configuration next to its outputs.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fewseg_core::episodes::{self, Episode};
use fewseg_core::matching::{MatchingVariant, NormVariant};
use fewseg_core::model::{
    self, evaluate, flops_proxy, load_checkpoint, save_checkpoint, train, ModelError, ModelState,
    TrainConfig,
};
use fewseg_core::tensor::{Tensor, TensorError};
use fewseg_core::{gradcheck, pnm};

use config::{ConfigError, RunConfig};

pub const OUT_ROOT_ENV: &str = "FEWSEG_OUT_ROOT";

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, config, or IO: exit code 1.
    Usage(String),
    /// Non-finite numerics or failed gradient verification: exit code 2.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("io error: {e}"))
    }
}

fn from_model(e: ModelError) -> CliError {
    match &e {
        ModelError::NonFiniteLoss { .. } | ModelError::Tensor(TensorError::NonFinite { .. }) => {
            CliError::Numeric(e.to_string())
        }
        _ => CliError::Usage(e.to_string()),
    }
}

type Result<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

/// Flags mirroring the configuration keys one-to-one (`--key value`), on top
/// of an optional `key=value` file.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Plain-text key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "seed", overrides_with = "seed")]
    pub seed: Option<String>,
    #[arg(long = "image_size", overrides_with = "image_size")]
    pub image_size: Option<String>,
    #[arg(long = "stages", overrides_with = "stages")]
    pub stages: Option<String>,
    #[arg(long = "channels", overrides_with = "channels")]
    pub channels: Option<String>,
    #[arg(long = "corr_temperature", overrides_with = "corr_temperature")]
    pub corr_temperature: Option<String>,
    #[arg(long = "distill_temperature", overrides_with = "distill_temperature")]
    pub distill_temperature: Option<String>,
    #[arg(long = "t2_scaling", overrides_with = "t2_scaling")]
    pub t2_scaling: Option<String>,
    #[arg(long = "lambda_distill", overrides_with = "lambda_distill")]
    pub lambda_distill: Option<String>,
    #[arg(long = "lr", overrides_with = "lr")]
    pub lr: Option<String>,
    #[arg(long = "grad_clip", overrides_with = "grad_clip")]
    pub grad_clip: Option<String>,
    #[arg(long = "epochs", overrides_with = "epochs")]
    pub epochs: Option<String>,
    #[arg(long = "episodes_per_epoch", overrides_with = "episodes_per_epoch")]
    pub episodes_per_epoch: Option<String>,
    #[arg(long = "eval_episodes", overrides_with = "eval_episodes")]
    pub eval_episodes: Option<String>,
    #[arg(long = "batch_size", overrides_with = "batch_size")]
    pub batch_size: Option<String>,
    #[arg(long = "kshot", overrides_with = "kshot")]
    pub kshot: Option<String>,
    #[arg(long = "optimizer", overrides_with = "optimizer")]
    pub optimizer: Option<String>,
    #[arg(long = "matching", overrides_with = "matching")]
    pub matching: Option<String>,
    #[arg(long = "normalization", overrides_with = "normalization")]
    pub normalization: Option<String>,
    #[arg(long = "use_distill", overrides_with = "use_distill")]
    pub use_distill: Option<String>,
    #[arg(long = "use_prior", overrides_with = "use_prior")]
    pub use_prior: Option<String>,
    #[arg(long = "decoder_norm", overrides_with = "decoder_norm")]
    pub decoder_norm: Option<String>,
    #[arg(long = "support_mask_ablation", overrides_with = "support_mask_ablation")]
    pub support_mask_ablation: Option<String>,
    #[arg(long = "miou", overrides_with = "miou")]
    pub miou: Option<String>,
    #[arg(long = "classes", overrides_with = "classes")]
    pub classes: Option<String>,
    #[arg(long = "folds", overrides_with = "folds")]
    pub folds: Option<String>,
    #[arg(long = "fold", overrides_with = "fold")]
    pub fold: Option<String>,
    #[arg(long = "max_distractors", overrides_with = "max_distractors")]
    pub max_distractors: Option<String>,
    #[arg(long = "min_radius", overrides_with = "min_radius")]
    pub min_radius: Option<String>,
    #[arg(long = "max_radius", overrides_with = "max_radius")]
    pub max_radius: Option<String>,
    #[arg(long = "noise", overrides_with = "noise")]
    pub noise: Option<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        let overrides: [(&str, &Option<String>); 30] = [
            ("seed", &self.seed),
            ("image_size", &self.image_size),
            ("stages", &self.stages),
            ("channels", &self.channels),
            ("corr_temperature", &self.corr_temperature),
            ("distill_temperature", &self.distill_temperature),
            ("t2_scaling", &self.t2_scaling),
            ("lambda_distill", &self.lambda_distill),
            ("lr", &self.lr),
            ("grad_clip", &self.grad_clip),
            ("epochs", &self.epochs),
            ("episodes_per_epoch", &self.episodes_per_epoch),
            ("eval_episodes", &self.eval_episodes),
            ("batch_size", &self.batch_size),
            ("kshot", &self.kshot),
            ("optimizer", &self.optimizer),
            ("matching", &self.matching),
            ("normalization", &self.normalization),
            ("use_distill", &self.use_distill),
            ("use_prior", &self.use_prior),
            ("decoder_norm", &self.decoder_norm),
            ("support_mask_ablation", &self.support_mask_ablation),
            ("miou", &self.miou),
            ("classes", &self.classes),
            ("folds", &self.folds),
            ("fold", &self.fold),
            ("max_distractors", &self.max_distractors),
            ("min_radius", &self.min_radius),
            ("max_radius", &self.max_radius),
            ("noise", &self.noise),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.apply(key, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GridName {
    /// Cross-attention vs cosine correlation with each normalization.
    Matching,
    /// Stage counts 1 through 4.
    Stages,
    /// Distillation temperatures 0.5, 1, 2, 5.
    Temperature,
    /// Distillation on/off, paired seeds.
    Distill,
    /// Support mask kept/removed, paired seeds.
    SupportMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Test,
    Train,
}

#[derive(Parser, Debug)]
#[command(
    name = "fewseg",
    about = "Few-shot segmentation benchmark: hierarchical correlation matching with distillation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on the fold's train classes; writes checkpoint, metrics CSV,
    /// and the effective config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (resolved under $FEWSEG_OUT_ROOT if relative).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: mIoU per fold, mean, FB-IoU.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid and emit a comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        grid: GridName,
        #[arg(long)]
        out: PathBuf,
        /// Seeds per variant (defaults: 1; 5 for distill/support-mask).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Verify every operation group against finite differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-stage correlation heatmaps and mask images for one episode.
    Heatmaps {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out } => cmd_train(&cfg.resolve()?, &resolve_out(&out)?),
        Command::Eval {
            cfg,
            checkpoint,
            out,
        } => cmd_eval(&cfg.resolve()?, &checkpoint, &resolve_out(&out)?),
        Command::Ablate {
            cfg,
            grid,
            out,
            seeds,
        } => cmd_ablate(&cfg.resolve()?, grid, seeds, &resolve_out(&out)?),
        Command::Gradcheck { cfg, out } => {
            let out = out.map(|o| resolve_out(&o)).transpose()?;
            cmd_gradcheck(&cfg.resolve()?, out.as_deref())
        }
        Command::Heatmaps {
            cfg,
            checkpoint,
            episode_seed,
            split,
            out,
        } => cmd_heatmaps(
            &cfg.resolve()?,
            &checkpoint,
            episode_seed,
            split,
            &resolve_out(&out)?,
        ),
    }
}

/// Relative output paths land under `$FEWSEG_OUT_ROOT` when it is set.
fn resolve_out(out: &Path) -> Result<PathBuf> {
    let resolved = if out.is_relative() {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(out),
            None => out.to_path_buf(),
        }
    } else {
        out.to_path_buf()
    };
    std::fs::create_dir_all(&resolved)?;
    Ok(resolved)
}

fn write_effective_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::write(dir.join("config.txt"), cfg.serialize())?;
    Ok(())
}

fn validated(cfg: &RunConfig) -> Result<TrainConfig> {
    let tc = cfg.to_train_config();
    tc.validate().map_err(from_model)?;
    Ok(tc)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn metrics_csv(log: &[model::EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,ce,kl,heldout_miou,fbiou\n");
    for row in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.epoch, row.train_loss, row.ce, row.kl, row.heldout_miou, row.fbiou
        );
    }
    out
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let tc = validated(cfg)?;
    write_effective_config(cfg, out)?;
    let started = Instant::now();
    let outcome = train::<f64>(&tc).map_err(from_model)?;
    for row in &outcome.log {
        println!(
            "epoch {}: train_loss={:.4} ce={:.4} kl={:.4} heldout_miou={:.4} fbiou={:.4}",
            row.epoch, row.train_loss, row.ce, row.kl, row.heldout_miou, row.fbiou
        );
    }
    std::fs::write(out.join("metrics.csv"), metrics_csv(&outcome.log))?;
    save_checkpoint(&outcome.state, &out.join("checkpoint.ckpt"))
        .map_err(|e| from_model(e.into()))?;
    println!(
        "trained fold {} in {:.1}s; artifacts in {}",
        tc.fold,
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn print_table(headers: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let line = |cells: Vec<String>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            let _ = write!(s, "{:<w$}  ", c, w = widths[i]);
        }
        println!("{}", s.trim_end());
    };
    line(headers.iter().map(|h| h.to_string()).collect());
    line(widths.iter().map(|w| "-".repeat(*w)).collect());
    for row in rows {
        line(row.clone());
    }
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let tc = validated(cfg)?;
    write_effective_config(cfg, out)?;
    let state: ModelState<f64> =
        load_checkpoint(&tc, checkpoint).map_err(|e| from_model(e.into()))?;
    let splits = episodes::fold_splits(tc.num_classes, tc.num_folds);
    let seeds = model::eval_seeds(&tc);
    let mut rows = Vec::new();
    let mut csv = String::from("fold,trained,miou,fbiou\n");
    let mut mious = Vec::new();
    for (f, split) in splits.iter().enumerate() {
        let (report, fb, _) =
            evaluate(&state, &tc, &split.test, &seeds, tc.kshot).map_err(from_model)?;
        let trained = if f == tc.fold { "*" } else { "" };
        let _ = writeln!(csv, "{f},{},{},{}", f == tc.fold, report.miou, fb);
        rows.push(vec![
            format!("fold-{f}{trained}"),
            format!("{:.4}", report.miou),
            format!("{:.4}", fb),
        ]);
        mious.push(report.miou);
        for class in report.excluded {
            eprintln!("warning: class {class} had zero union on fold {f}; excluded from mIoU");
        }
    }
    let mean = mious.iter().sum::<f64>() / mious.len() as f64;
    let _ = writeln!(csv, "mean,,{mean},");
    rows.push(vec!["mean".into(), format!("{mean:.4}"), String::new()]);
    std::fs::write(out.join("eval.csv"), csv)?;
    println!("evaluation of {} (K={})", checkpoint.display(), tc.kshot);
    print_table(&["fold (* = trained)", "mIoU", "FB-IoU"], &rows);
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct VariantOutcome {
    name: String,
    seed: u64,
    miou: f64,
    fbiou: f64,
    params: usize,
    fwd_ms: f64,
    flops: u64,
}

/// Train one variant and measure it on the held-out fold.
fn run_variant(tc: &TrainConfig, name: &str) -> Result<VariantOutcome> {
    let outcome = train::<f64>(tc).map_err(from_model)?;
    let split = tc.fold_split();
    let seeds = model::eval_seeds(tc);
    let (report, fb, _) =
        evaluate(&outcome.state, tc, &split.test, &seeds, tc.kshot).map_err(from_model)?;
    // mean forward time over a few held-out episodes
    let registry = tc.registry();
    let ep_cfg = tc.episode_config(tc.kshot);
    let timing_eps: Vec<Episode<f64>> = seeds
        .iter()
        .take(8)
        .map(|&s| episodes::sample_episode(&registry, &split.test, &ep_cfg, s))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| from_model(e.into()))?;
    let t0 = Instant::now();
    for ep in &timing_eps {
        model::infer(&outcome.state, ep, tc).map_err(from_model)?;
    }
    let fwd_ms = t0.elapsed().as_secs_f64() * 1e3 / timing_eps.len() as f64;
    Ok(VariantOutcome {
        name: name.to_string(),
        seed: tc.seed,
        miou: report.miou,
        fbiou: fb,
        params: outcome.state.param_count(),
        fwd_ms,
        flops: flops_proxy(tc),
    })
}

fn grid_variants(cfg: &RunConfig, grid: GridName) -> Vec<(String, RunConfig)> {
    let mut variants = Vec::new();
    match grid {
        GridName::Matching => {
            for (name, m, n) in [
                ("ca", MatchingVariant::CrossAttention, NormVariant::None),
                ("cos", MatchingVariant::Correlation, NormVariant::None),
                ("cos_sm", MatchingVariant::Correlation, NormVariant::Softmax),
                (
                    "cos_inv_sm",
                    MatchingVariant::Correlation,
                    NormVariant::InverseSoftmax,
                ),
            ] {
                let mut v = cfg.clone();
                v.matching = m;
                v.normalization = n;
                variants.push((name.to_string(), v));
            }
        }
        GridName::Stages => {
            let base = &cfg.channels;
            for s in 1..=4usize {
                let mut channels = Vec::with_capacity(s);
                for l in 0..s {
                    channels.push(match base.get(l) {
                        Some(&c) => c,
                        None => channels[l - 1] + 8,
                    });
                }
                let mut v = cfg.clone();
                v.stages = s;
                v.channels = channels;
                if v.to_train_config().validate().is_ok() {
                    variants.push((format!("s{s}"), v));
                }
            }
        }
        GridName::Temperature => {
            for t in [0.5, 1.0, 2.0, 5.0] {
                let mut v = cfg.clone();
                v.distill_temperature = t;
                variants.push((format!("T{t}"), v));
            }
        }
        GridName::Distill => {
            for (name, on) in [("distill_on", true), ("distill_off", false)] {
                let mut v = cfg.clone();
                v.use_distill = on;
                variants.push((name.to_string(), v));
            }
        }
        GridName::SupportMask => {
            for (name, ablate) in [("with_mask", false), ("without_mask", true)] {
                let mut v = cfg.clone();
                v.support_mask_ablation = ablate;
                variants.push((name.to_string(), v));
            }
        }
    }
    variants
}

fn cmd_ablate(cfg: &RunConfig, grid: GridName, seeds: Option<usize>, out: &Path) -> Result<()> {
    let paired = matches!(grid, GridName::Distill | GridName::SupportMask);
    let n_seeds = seeds.unwrap_or(if paired { 5 } else { 1 });
    write_effective_config(cfg, out)?;
    let variants = grid_variants(cfg, grid);
    let mut outcomes: Vec<VariantOutcome> = Vec::new();
    for (name, vcfg) in &variants {
        for s in 0..n_seeds {
            let mut seeded = vcfg.clone();
            seeded.seed = cfg.seed + s as u64;
            let tc = validated(&seeded)?;
            let outcome = run_variant(&tc, name)?;
            println!(
                "variant {name} seed {}: miou={:.4} fbiou={:.4} params={} fwd={:.1}ms",
                seeded.seed, outcome.miou, outcome.fbiou, outcome.params, outcome.fwd_ms
            );
            outcomes.push(outcome);
        }
    }

    let mut csv = String::from("variant,seed,miou,fbiou,params,fwd_ms,flops_proxy\n");
    for o in &outcomes {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            o.name, o.seed, o.miou, o.fbiou, o.params, o.fwd_ms, o.flops
        );
    }
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            vec![
                o.name.clone(),
                o.seed.to_string(),
                format!("{:.4}", o.miou),
                format!("{:.4}", o.fbiou),
                o.params.to_string(),
                format!("{:.1}", o.fwd_ms),
                format!("{:.3}", o.flops as f64 / 1e9),
            ]
        })
        .collect();
    print_table(
        &["variant", "seed", "mIoU", "FB-IoU", "params", "fwd ms", "GMAC proxy"],
        &rows,
    );

    if paired && variants.len() == 2 {
        let name_a = &variants[0].0;
        let name_b = &variants[1].0;
        let mut deltas = Vec::new();
        let mut delta_csv = String::from("seed,delta_miou\n");
        for s in 0..n_seeds {
            let seed = cfg.seed + s as u64;
            let a = outcomes
                .iter()
                .find(|o| o.seed == seed && &o.name == name_a)
                .unwrap();
            let b = outcomes
                .iter()
                .find(|o| o.seed == seed && &o.name == name_b)
                .unwrap();
            let d = a.miou - b.miou;
            let _ = writeln!(delta_csv, "{seed},{d}");
            deltas.push(d);
        }
        let mean: f64 = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let _ = writeln!(delta_csv, "mean,{mean}");
        println!(
            "per-seed mIoU deltas ({name_a} - {name_b}): {:?}, mean {mean:.4}",
            deltas.iter().map(|d| (d * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
        std::fs::write(out.join("deltas.csv"), delta_csv)?;
    }
    std::fs::write(out.join("ablate.csv"), csv)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn cmd_gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    validated(cfg)?;
    let report = gradcheck::run_suite(gradcheck::DEFAULT_H, gradcheck::DEFAULT_TOL);
    let mut text = String::new();
    for g in &report.groups {
        let _ = writeln!(
            text,
            "{:<20} max_rel_err={:<12.3e} {}",
            g.group,
            g.max_rel_err,
            if g.passed { "PASS" } else { "FAIL" }
        );
    }
    print!("{text}");
    if let Some(dir) = out {
        write_effective_config(cfg, dir)?;
        std::fs::write(dir.join("gradcheck.txt"), &text)?;
    }
    if report.all_passed() {
        println!("all gradient groups within {:.0e}", report.tol);
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient verification failed: max rel err {:.3e} >= {:.0e}",
            report.max_rel_err(),
            report.tol
        )))
    }
}

// ---------------------------------------------------------------------------
// heatmaps
// ---------------------------------------------------------------------------

fn overlay_rgb(image: &Tensor<f64>, heat: &Tensor<f64>) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let gray = pnm::gray_from_map(heat);
    let mut out = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        let v = gray[p] as f64 / 255.0;
        let heat_rgb = [v, 0.1 * v, 1.0 - v];
        for ch in 0..3 {
            let base = image.data()[ch * h * w + p].clamp(0.0, 1.0);
            out[p * 3 + ch] = ((0.45 * base + 0.55 * heat_rgb[ch]) * 255.0).round() as u8;
        }
    }
    out
}

fn cmd_heatmaps(
    cfg: &RunConfig,
    checkpoint: &Path,
    episode_seed: u64,
    split: SplitName,
    out: &Path,
) -> Result<()> {
    let tc = validated(cfg)?;
    write_effective_config(cfg, out)?;
    let state: ModelState<f64> =
        load_checkpoint(&tc, checkpoint).map_err(|e| from_model(e.into()))?;
    let registry = tc.registry();
    let fold = tc.fold_split();
    let classes = match split {
        SplitName::Test => fold.test,
        SplitName::Train => fold.train,
    };
    let episode: Episode<f64> =
        episodes::sample_episode(&registry, &classes, &tc.episode_config(tc.kshot), episode_seed)
            .map_err(|e| from_model(e.into()))?;
    let infer = model::infer(&state, &episode, &tc).map_err(from_model)?;

    let (h, w) = tc.image_hw;
    let mut written: Vec<String> = Vec::new();
    for (l, map) in infer.reduced_maps.iter().enumerate() {
        let (gh, gw) = (map.shape()[0], map.shape()[1]);
        let name = format!("stage_{}.pgm", l + 1);
        pnm::write_pgm(&out.join(&name), gw, gh, &pnm::gray_from_map(map))?;
        written.push(name);

        let up = fewseg_core::tensor::bilinear_resize3(&map.reshaped(vec![1, gh, gw]).unwrap(), h, w)
            .map_err(|e| from_model(e.into()))?
            .reshaped(vec![h, w])
            .unwrap();
        let name = format!("stage_{}_overlay.ppm", l + 1);
        pnm::write_ppm(&out.join(&name), w, h, &overlay_rgb(&episode.query_image, &up))?;
        written.push(name);
    }
    pnm::write_pgm(
        &out.join("pred_mask.pgm"),
        w,
        h,
        &pnm::gray_from_mask(&infer.prediction),
    )?;
    written.push("pred_mask.pgm".into());
    pnm::write_pgm(
        &out.join("gt_mask.pgm"),
        w,
        h,
        &pnm::gray_from_mask(&episode.query_mask),
    )?;
    written.push("gt_mask.pgm".into());
    pnm::write_ppm(
        &out.join("query.ppm"),
        w,
        h,
        &pnm::rgb_from_image(&episode.query_image),
    )?;
    written.push("query.ppm".into());

    let mut manifest = String::new();
    let _ = writeln!(manifest, "episode_seed={episode_seed}");
    let _ = writeln!(manifest, "class={}", episode.class_id);
    let _ = writeln!(manifest, "stages={}", infer.reduced_maps.len());
    for name in &written {
        let _ = writeln!(manifest, "file={name}");
    }
    std::fs::write(out.join("manifest.txt"), manifest)?;
    println!(
        "wrote {} stage heatmaps plus masks for class {} to {}",
        infer.reduced_maps.len(),
        episode.class_id,
        out.display()
    );
    Ok(())
}
