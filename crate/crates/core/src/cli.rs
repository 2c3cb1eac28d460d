//! Command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{class_correlations, generate_memory_disabled, image_grid, slot_image, slot_preferences, top_slots};
use crate::autodiff::{Distribution, RngStream, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::{image_dims, prepare_eval_data, sha256_hex, LoadedConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{
    count_params, impute, linear_probe, make_mask, recognition_features, test_loglik, MaskKind, ParamCount, ProbeConfig,
};
use crate::layers::CompositionKind;
use crate::model::{generate, ArchConfig, Nets};
use crate::training::{fit, TrainingState};

#[derive(Debug, Parser)]
#[command(name = "memdgm", version, about = "Memory-augmented variational autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from an experiment configuration.
    Train(TrainArgs),
    /// Importance-sampled test log-likelihood.
    Eval(EvalArgs),
    /// Random samples as an image grid.
    Generate(GenerateArgs),
    /// Fill in masked pixels and report the MSE.
    Impute(ImputeArgs),
    /// Slot preferences, correlations, top slots, slot images, disabled memories.
    Analyze(AnalyzeArgs),
    /// Linear classifier on recognition features.
    Probe(ProbeArgs),
    /// Closed-form trainable parameter count.
    CountParams(CountArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (defaults to `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Importance samples (defaults to `evaluation.k`).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples evaluated at once.
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Grid rows and columns (default: near-square).
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Memory layers to switch off (1-based, comma separated).
    #[arg(long, value_delimiter = ',')]
    pub disable: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Noise kinds: rect12, rand0.6, half (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "rect12,rand0.6,half")]
    pub noise: Vec<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of test images.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// One of the built-in architectures (see `--preset list`).
    #[arg(long)]
    pub preset: Option<String>,
}

/// Named architectures.
pub fn preset(name: &str) -> Option<ArchConfig> {
    Some(match name {
        "mnist-mem" => ArchConfig::mnist_mem(),
        "mnist-vae" => ArchConfig::mnist_vae(),
        "mnist-vae-530" => ArchConfig::mnist_vae_530(),
        "mnist-vis" => ArchConfig::mnist_vis(),
        "ocr-mem" => ArchConfig::ocr_mem(),
        "ocr-vae" => ArchConfig::ocr_vae(),
        "frey-mem" => ArchConfig::frey_mem(),
        _ => return None,
    })
}

pub const PRESETS: [&str; 7] = ["mnist-vae", "mnist-vae-530", "mnist-mem", "mnist-vis", "ocr-vae", "ocr-mem", "frey-mem"];

fn out_dir(arg: &Option<PathBuf>, loaded: &LoadedConfig) -> Result<PathBuf> {
    let dir = arg.clone().unwrap_or_else(|| loaded.config.output.dir.clone());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_checkpoint(path: &Path, loaded: Option<&LoadedConfig>) -> Result<Checkpoint<f32>> {
    let ck = Checkpoint::<f32>::load(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if let Some(l) = loaded {
        if ck.nets.model.arch != l.config.arch {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different architecture than the configuration's [arch] block",
                path.display()
            )));
        }
    }
    Ok(ck)
}

fn rows_cols(n: usize, rows: Option<usize>, cols: Option<usize>) -> (usize, usize) {
    match (rows, cols) {
        (Some(r), Some(c)) => (r, c),
        (Some(r), None) => (r, n.div_ceil(r.max(1))),
        (None, Some(c)) => (n.div_ceil(c.max(1)), c),
        (None, None) => {
            let c = (n as f64).sqrt().ceil().max(1.0) as usize;
            (n.div_ceil(c), c)
        }
    }
}

fn tensor_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
}

fn write_grid(path: &Path, t: &Tensor<f32>, height: usize, width: usize, rows: Option<usize>, cols: Option<usize>) -> Result<()> {
    let (r, c) = rows_cols(t.rows(), rows, cols);
    fs::write(path, image_grid(&tensor_rows(t), r, c, height, width)?)?;
    Ok(())
}

fn test_or_train(splits: crate::config::Splits) -> Dataset {
    splits.test.unwrap_or(splits.train)
}

pub fn run_train(args: &TrainArgs) -> Result<String> {
    let loaded = LoadedConfig::load(&args.config)?;
    let mut cfg = loaded.config.train_config();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = Some(e);
    }
    cfg.validate()?;
    let out = out_dir(&args.out, &loaded)?;
    let splits = loaded.load_data()?;
    let valid = match &splits.valid {
        Some(v) => Some(prepare_eval_data(v, &cfg.arch, loaded.config.evaluation.seed)?),
        None => None,
    };
    let resume = match &args.checkpoint {
        Some(p) => Some(TrainingState::from_checkpoint(load_checkpoint(p, Some(&loaded))?)?),
        None => None,
    };
    let ckpt_path = out.join("model.ckpt");
    let started = Instant::now();
    let quiet = args.quiet;
    let outcome = fit(&splits.train.images, valid.as_ref(), &cfg, resume, Some(&ckpt_path), |r| {
        if !quiet {
            let valid = r.valid_bound.map(|v| format!(" valid={v:.4}")).unwrap_or_default();
            eprintln!("epoch {:>4} lr={:.3e} loss={:.4} bound={:.4} penalty={:.4}{valid}", r.epoch, r.lr, r.loss, r.bound, r.penalty);
        }
    })?;
    let mut history = String::from("epoch\tlr\tloss\tbound\tpenalty\tvalid_bound\n");
    for r in &outcome.history {
        let v = r.valid_bound.map(|v| format!("{v}")).unwrap_or_default();
        writeln!(history, "{}\t{}\t{}\t{}\t{}\t{v}", r.epoch, r.lr, r.loss, r.bound, r.penalty).unwrap();
    }
    let history_path = out.join("history.tsv");
    if args.checkpoint.is_some() && history_path.exists() {
        let previous = fs::read_to_string(&history_path)?;
        let appended: String = history.lines().skip(1).map(|l| format!("{l}\n")).collect();
        fs::write(&history_path, previous + &appended)?;
    } else {
        fs::write(&history_path, &history)?;
    }
    let last = outcome.history.last();
    let mut summary = String::new();
    writeln!(summary, "config_sha256={}", loaded.sha256).unwrap();
    writeln!(summary, "seed={}", cfg.seed).unwrap();
    writeln!(summary, "train_images={}", splits.train.len()).unwrap();
    writeln!(summary, "epochs_completed={}", outcome.state.epoch).unwrap();
    writeln!(summary, "trainable_params={}", count_params(&cfg.arch)?.total()).unwrap();
    if let Some(r) = last {
        writeln!(summary, "final_loss={}", r.loss).unwrap();
        writeln!(summary, "final_bound={}", r.bound).unwrap();
    }
    writeln!(summary, "seconds={:.1}", started.elapsed().as_secs_f64()).unwrap();
    writeln!(summary, "checkpoint={}", ckpt_path.display()).unwrap();
    fs::write(out.join("summary.txt"), &summary)?;
    Ok(summary)
}

pub fn run_eval(args: &EvalArgs) -> Result<String> {
    let loaded = LoadedConfig::load(&args.config)?;
    let ck = load_checkpoint(&args.checkpoint, Some(&loaded))?;
    let k = args.k.unwrap_or(loaded.config.evaluation.k);
    let seed = args.seed.unwrap_or(loaded.config.evaluation.seed);
    let chunk = args.chunk.unwrap_or(loaded.config.evaluation.chunk);
    let test = test_or_train(loaded.load_data()?);
    let x = prepare_eval_data(&test, &ck.nets.model.arch, seed)?;
    let started = Instant::now();
    let report = test_loglik(&x, &ck.nets, seed, k, chunk)?;
    let mut text = String::new();
    writeln!(text, "dataset={}", test.name).unwrap();
    writeln!(text, "images={}", test.len()).unwrap();
    writeln!(text, "k={k}").unwrap();
    writeln!(text, "seed={seed}").unwrap();
    writeln!(text, "config_sha256={}", loaded.sha256).unwrap();
    writeln!(text, "checkpoint_epoch={}", ck.epoch).unwrap();
    writeln!(text, "test_loglik_nats={:.6}", report.mean).unwrap();
    writeln!(text, "seconds={:.1}", started.elapsed().as_secs_f64()).unwrap();
    let out = out_dir(&args.out, &loaded)?;
    fs::write(out.join("eval.txt"), &text)?;
    Ok(text)
}

pub fn run_generate(args: &GenerateArgs) -> Result<String> {
    let ck = load_checkpoint(&args.checkpoint, None)?;
    if args.n == 0 {
        return Err(Error::invalid("--n must be positive"));
    }
    let (h, w) = image_dims(ck.nets.model.arch.input_dim);
    let mut rng = RngStream::new(args.seed, "generate");
    let images = generate(&ck.nets, args.n, &mut rng, &args.disable)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("samples.pgm");
    write_grid(&path, &images, h, w, args.rows, args.cols)?;
    Ok(format!("samples={}\nseed={}\nimage={}\n", args.n, args.seed, path.display()))
}

pub fn run_impute(args: &ImputeArgs) -> Result<String> {
    let loaded = LoadedConfig::load(&args.config)?;
    let ck = load_checkpoint(&args.checkpoint, Some(&loaded))?;
    let seed = args.seed.unwrap_or(loaded.config.evaluation.seed);
    let steps = args.steps.unwrap_or(loaded.config.evaluation.impute_steps);
    let test = test_or_train(loaded.load_data()?).head(args.n)?;
    let x = prepare_eval_data(&test, &ck.nets.model.arch, seed)?;
    let out = out_dir(&args.out, &loaded)?;
    write_grid(&out.join("impute_data.pgm"), &x, test.height, test.width, None, None)?;
    let mut text = String::new();
    writeln!(text, "images={}\nsteps={steps}\nseed={seed}", x.rows()).unwrap();
    for noise in &args.noise {
        let kind: MaskKind = noise.parse()?;
        let mut rng = RngStream::new(seed, format!("impute/{kind}"));
        let masks = (0..x.rows()).map(|_| make_mask(kind, test.height, test.width, &mut rng)).collect::<Result<Vec<_>>>()?;
        let trace = impute(&x, &masks, &ck.nets, &mut rng, steps, false)?;
        let mut csv = String::from("step,mse\n");
        for s in 0..trace.mse.len() {
            writeln!(csv, "{s},{}", trace.mean_mse(s)).unwrap();
        }
        fs::write(out.join(format!("impute_{kind}_mse.csv")), csv)?;
        write_grid(&out.join(format!("impute_{kind}_noisy.pgm")), &trace.images[0], test.height, test.width, None, None)?;
        write_grid(&out.join(format!("impute_{kind}_result.pgm")), trace.images.last().unwrap(), test.height, test.width, None, None)?;
        writeln!(text, "{kind}: initial_mse={:.6} final_mse={:.6}", trace.mean_mse(0), trace.mean_mse(steps)).unwrap();
    }
    fs::write(out.join("impute.txt"), &text)?;
    Ok(text)
}

fn labeled(data: &Dataset) -> Result<&[u8]> {
    data.labels.as_deref().ok_or_else(|| Error::invalid(format!("dataset {} has no labels", data.name)))
}

pub fn run_analyze(args: &AnalyzeArgs) -> Result<String> {
    let loaded = LoadedConfig::load(&args.config)?;
    let ck = load_checkpoint(&args.checkpoint, Some(&loaded))?;
    let nets = &ck.nets;
    let arch = &nets.model.arch;
    let seed = args.seed.unwrap_or(loaded.config.evaluation.seed);
    let test = test_or_train(loaded.load_data()?);
    let labels = labeled(&test)?;
    let x = prepare_eval_data(&test, arch, seed)?;
    let out = out_dir(&args.out, &loaded)?;
    let mut text = String::new();
    let prefs = slot_preferences(nets, &x, labels, &mut RngStream::new(seed, "analyze/preferences"))?;
    for p in &prefs {
        let l = p.layer;
        fs::write(out.join(format!("layer{l}_preferences.tsv")), p.to_tsv())?;
        match class_correlations(p) {
            Ok(c) => fs::write(out.join(format!("layer{l}_correlation_edges.tsv")), c.edges_tsv())?,
            Err(e) => writeln!(text, "layer {l}: correlations skipped: {e}").unwrap(),
        }
        let k = 3.min(p.slots);
        let mut table = String::from("class");
        for r in 1..=k {
            write!(table, "\trank{r}_slot\trank{r}_activation").unwrap();
        }
        table.push('\n');
        for (c, row) in top_slots(p, k)?.iter().enumerate() {
            write!(table, "{c}").unwrap();
            for (s, a) in row {
                write!(table, "\t{s}\t{a:.4}").unwrap();
            }
            table.push('\n');
        }
        fs::write(out.join(format!("layer{l}_top_slots.tsv")), &table)?;
        writeln!(text, "layer {l}: {} classes × {} slots", p.classes, p.slots).unwrap();
        if arch.composition == CompositionKind::Summation {
            let images: Vec<Tensor<f32>> = (0..p.slots).map(|s| slot_image(nets, l, s)).collect::<Result<_>>()?;
            let rows: Vec<Vec<f64>> = images.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
            let (r, c) = rows_cols(rows.len(), None, None);
            fs::write(out.join(format!("layer{l}_slots.pgm")), image_grid(&rows, r, c, test.height, test.width)?)?;
        }
    }
    if arch.composition != CompositionKind::Summation {
        writeln!(text, "slot images skipped: they need summation composition (this model uses the element-wise MLP)").unwrap();
    }
    let z: Tensor<f32> = RngStream::new(seed, "analyze/disabled").draw(Distribution::Gaussian, &[100, arch.latent_dim])?;
    let memory_layers: Vec<usize> = prefs.iter().map(|p| p.layer).collect();
    let mut sets: Vec<(String, Vec<usize>)> = vec![("none".into(), vec![])];
    sets.extend(memory_layers.iter().map(|&l| (format!("{l}"), vec![l])));
    if memory_layers.len() > 1 {
        sets.push(("all".into(), memory_layers.clone()));
    }
    let baseline = generate_memory_disabled(nets, &z, &[])?;
    for (name, set) in sets {
        let imgs = generate_memory_disabled(nets, &z, &set)?;
        let diff = imgs.data().iter().zip(baseline.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / imgs.numel() as f64;
        write_grid(&out.join(format!("disabled_{name}.pgm")), &imgs, test.height, test.width, Some(10), Some(10))?;
        writeln!(text, "memory disabled [{name}]: mean |Δpixel| = {diff:.6}").unwrap();
    }
    fs::write(out.join("analyze.txt"), &text)?;
    Ok(text)
}

pub fn run_probe(args: &ProbeArgs) -> Result<String> {
    let loaded = LoadedConfig::load(&args.config)?;
    let ck = load_checkpoint(&args.checkpoint, Some(&loaded))?;
    let splits = loaded.load_data()?;
    let seed = loaded.config.evaluation.seed;
    let train = &splits.train;
    let test = splits.test.as_ref().ok_or_else(|| Error::config("dataset.test", "the probe needs a test split"))?;
    let arch = &ck.nets.model.arch;
    let ftr = recognition_features(&ck.nets, &prepare_eval_data(train, arch, seed)?)?;
    let fte = recognition_features(&ck.nets, &prepare_eval_data(test, arch, seed)?)?;
    let r = linear_probe(&ftr, labeled(train)?, &fte, labeled(test)?, ProbeConfig::default())?;
    let text = format!(
        "features={}\ntrain_accuracy={:.4}\ntest_accuracy={:.4}\ntest_error={:.4}\niterations={}\n",
        ftr.cols(),
        r.train_accuracy,
        r.test_accuracy,
        1.0 - r.test_accuracy,
        r.iterations
    );
    let out = out_dir(&args.out, &loaded)?;
    fs::write(out.join("probe.txt"), &text)?;
    Ok(text)
}

pub fn format_count(arch: &ArchConfig, c: &ParamCount) -> String {
    let mut t = String::new();
    let widths: Vec<String> = arch.widths.iter().map(|w| w.to_string()).collect();
    writeln!(t, "architecture: {}-{}-{} slots {:?}", arch.input_dim, widths.join("-"), arch.latent_dim, arch.slots).unwrap();
    for (name, v) in [
        ("recognition dense", c.recognition_dense),
        ("recognition heads", c.recognition_heads),
        ("generative dense", c.generative_dense),
        ("output head", c.output_head),
        ("batch norm", c.batchnorm),
        ("memory", c.memory),
        ("output log-variance", c.output_logvar),
    ] {
        writeln!(t, "{name:<20} {v:>10}").unwrap();
    }
    writeln!(t, "{:<20} {:>10}  (~{}k)", "total", c.total(), (c.total() as f64 / 1000.0).round()).unwrap();
    t
}

pub fn run_count_params(args: &CountArgs) -> Result<String> {
    let arch = match (&args.config, &args.preset) {
        (Some(p), _) => LoadedConfig::load(p)?.config.arch,
        (None, Some(name)) if name == "list" => return Ok(PRESETS.join("\n") + "\n"),
        (None, Some(name)) => preset(name).ok_or_else(|| Error::invalid(format!("unknown preset `{name}`; known: {}", PRESETS.join(", "))))?,
        (None, None) => {
            let mut t = String::new();
            for name in PRESETS {
                let arch = preset(name).unwrap();
                writeln!(t, "{name:<14} {:>10}", count_params(&arch)?.total()).unwrap();
            }
            return Ok(t);
        }
    };
    Ok(format_count(&arch, &count_params(&arch)?))
}

pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Generate(a) => run_generate(a),
        Command::Impute(a) => run_impute(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Probe(a) => run_probe(a),
        Command::CountParams(a) => run_count_params(a),
    }
}

/// Hash of a file's contents, for reports.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// The dataset-free part of a checkpoint, for callers that only sample.
pub fn load_nets(path: &Path) -> Result<Nets<f32>> {
    Ok(load_checkpoint(path, None)?.nets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn count_table() {
        let t = run_count_params(&CountArgs { config: None, preset: Some("ocr-mem".into()) }).unwrap();
        assert!(t.contains("207528"), "{t}");
        assert!(t.contains("(~208k)"));
        let all = run_count_params(&CountArgs { config: None, preset: None }).unwrap();
        assert_eq!(all.lines().count(), PRESETS.len());
        assert!(run_count_params(&CountArgs { config: None, preset: Some("nope".into()) }).is_err());
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(rows_cols(100, None, None), (10, 10));
        assert_eq!(rows_cols(1, None, None), (1, 1));
        assert_eq!(rows_cols(7, None, None), (3, 3));
        assert_eq!(rows_cols(7, Some(1), None), (1, 7));
    }
}
