//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::cae::{pretrain_stack, PretrainSchedule};
use crate::config::RunConfig;
use crate::data::{self, pnm, read_manifest, select, write_dataset, LabeledDataset, Role, MANIFEST_NAME};
use crate::deconv::{reconstruct_from_layer, render_signed, ReconstructionRequest, WeightSource};
use crate::error::{Error, Result};
use crate::layers::gradcheck::grad_check_groups;
use crate::layers::LayerKind;
use crate::metrics::{binary_metrics, confusion, Report};
use crate::network::{
    build_network, finetune, input_dims, load_model, save_model, NetworkConfig, NetworkProbe,
};
use crate::tensor::Tensor4;

#[derive(Parser, Debug)]
#[command(name = "hypercae", version, about = "Hyperlayer convolutional auto-encoder classifier")]
pub struct Cli {
    /// INI config file; missing keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the training and the data seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Start from the full-size 100x100 geometry instead of the desk preset.
    #[arg(long, global = true)]
    pub paper_scale: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset as PGM files plus a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy layer-wise auto-encoder pretraining on the training folds.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Supervised fine-tuning; starts from random weights without --model-in.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_in: Option<PathBuf>,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Classification metrics on one partition.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = RoleArg::Test)]
        role: RoleArg,
        /// Per-sample `index<TAB>label<TAB>prediction` lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Write the key=value block here as well.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Reconstruct an image from one convolutional scale.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long, value_enum, default_value_t = WeightsArg::Tied)]
        weights: WeightsArg,
        /// Output prefix; writes PREFIX.pgm and PREFIX.ppm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameterized layer.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ScaleArg::Reduced)]
        scale: ScaleArg,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RoleArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WeightsArg {
    Tied,
    Pretrained,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScaleArg {
    Reduced,
    Desk,
    Paper,
    /// The network from --config / --paper-scale.
    Config,
}

/// Largest error tolerated for layers with spatial structure.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Largest error tolerated for fully connected layers.
pub const GRADCHECK_DENSE_TOL: f64 = 1e-5;
const GRADCHECK_BATCH: usize = 4;

fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let base = if cli.paper_scale {
        RunConfig::paper_scale()
    } else {
        RunConfig::desk()
    };
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse_with_base(&fs::read_to_string(path)?, base)?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.network.training.seed = seed;
        cfg.data.seed = seed;
    }
    Ok(cfg)
}

fn load_data(dir: &Path) -> Result<LabeledDataset> {
    read_manifest(dir.join(MANIFEST_NAME))
}

struct Log {
    file: Option<String>,
    path: Option<PathBuf>,
}

impl Log {
    fn new(path: Option<&PathBuf>) -> Self {
        Log {
            file: path.map(|_| String::new()),
            path: path.cloned(),
        }
    }

    fn line(&mut self, out: &mut dyn Write, text: String) -> Result<()> {
        writeln!(out, "{text}")?;
        if let Some(buf) = &mut self.file {
            buf.push_str(&text);
            buf.push('\n');
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let (Some(buf), Some(path)) = (self.file, self.path) {
            fs::write(path, buf)?;
        }
        Ok(())
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path, force: bool, out: &mut dyn Write) -> Result<()> {
    if out_dir.exists() && !force && fs::read_dir(out_dir)?.next().is_some() {
        return Err(Error::usage(format!(
            "{} is not empty (use --force to overwrite)",
            out_dir.display()
        )));
    }
    let ds = data::generate_synthetic(&cfg.data)?;
    write_dataset(out_dir, &ds)?;
    let counts = ds.class_counts();
    writeln!(
        out,
        "wrote {} images ({} normal, {} vacuoles) to {}",
        ds.len(),
        counts[0],
        counts.get(1).copied().unwrap_or(0),
        out_dir.display()
    )?;
    Ok(())
}

pub fn cmd_pretrain(
    cfg: &RunConfig,
    data_dir: &Path,
    model_out: &Path,
    log_path: Option<&PathBuf>,
    out: &mut dyn Write,
) -> Result<()> {
    let train = select(&load_data(data_dir)?, Role::Train);
    let t = &cfg.network.training;
    let schedule = PretrainSchedule {
        epochs: t.epochs_pretrain,
        learning_rate: t.lr_pretrain,
        batch_size: t.batch_size,
        seed: t.seed,
        tied: t.tied,
    };
    let (stack, report) = pretrain_stack(&cfg.network, &train.images, &schedule)?;
    let mut log = Log::new(log_path);
    for (k, losses) in report.layers.iter().enumerate() {
        for (e, loss) in losses.iter().enumerate() {
            log.line(out, format!("layer={} epoch={} loss={loss}", k + 1, e + 1))?;
        }
    }
    let model = build_network(&cfg.network, Some(&stack), t.seed)?;
    save_model(&model, model_out)?;
    log.finish()
}

pub fn cmd_finetune(
    cfg: &RunConfig,
    data_dir: &Path,
    model_in: Option<&Path>,
    model_out: &Path,
    log_path: Option<&PathBuf>,
    out: &mut dyn Write,
) -> Result<()> {
    let ds = load_data(data_dir)?;
    let (train, val) = (select(&ds, Role::Train), select(&ds, Role::Val));
    let mut model = match model_in {
        Some(p) => load_model(p)?,
        None => build_network(&cfg.network, None, cfg.network.training.seed)?,
    };
    let trace = finetune(&mut model, &train, &val, &cfg.network.training)?;
    let mut log = Log::new(log_path);
    for e in &trace.epochs {
        log.line(
            out,
            format!(
                "epoch={} train_nll={} val_nll={} val_error_rate={}",
                e.epoch, e.train_nll, e.val_nll, e.val_error_rate
            ),
        )?;
    }
    log.line(out, format!("selected epoch={}", trace.selected_epoch))?;
    save_model(&model, model_out)?;
    log.finish()
}

fn role_of(r: RoleArg) -> Role {
    match r {
        RoleArg::Train => Role::Train,
        RoleArg::Val => Role::Val,
        RoleArg::Test => Role::Test,
    }
}

pub fn cmd_eval(
    model_path: &Path,
    data_dir: &Path,
    role: RoleArg,
    predictions: Option<&Path>,
    report_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_model(model_path)?;
    let set = select(&load_data(data_dir)?, role_of(role));
    if set.is_empty() {
        return Err(Error::usage("selected partition is empty"));
    }
    let preds = crate::network::predict_set(&model, &set)?;
    let classes = model.config.classes;
    let c = confusion(&preds, &set.labels, classes)?;
    let report = Report {
        confusion: &c,
        metrics: binary_metrics(&c, 1)?,
        class_names: &set.class_names,
    };
    write!(out, "{report}")?;
    if let Some(p) = predictions {
        let mut text = String::new();
        for (i, (y, p)) in set.labels.iter().zip(&preds).enumerate() {
            text.push_str(&format!("{i}\t{y}\t{p}\n"));
        }
        fs::write(p, text)?;
    }
    if let Some(p) = report_path {
        fs::write(p, report.key_values())?;
    }
    Ok(())
}

pub fn cmd_reconstruct(
    model_path: &Path,
    image: &Path,
    layer: usize,
    weights: WeightsArg,
    out_prefix: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_model(model_path)?;
    if layer == 0 || layer > model.config.convs.len() {
        return Err(Error::usage(format!(
            "layer {layer} out of range: model has {} convolutional scales",
            model.config.convs.len()
        )));
    }
    let img = pnm::read_pgm(image)?;
    let recon = reconstruct_from_layer(&ReconstructionRequest {
        model: &model,
        image: &img,
        from_layer: layer,
        weight_source: match weights {
            WeightsArg::Tied => WeightSource::FinetunedTied,
            WeightsArg::Pretrained => WeightSource::PretrainedDecoder,
        },
    })?;
    let gray = out_prefix.with_extension("pgm");
    let signed = out_prefix.with_extension("ppm");
    pnm::write_pgm(&gray, &recon)?;
    pnm::write_ppm(&signed, &render_signed(&recon)?)?;
    writeln!(out, "wrote {} and {}", gray.display(), signed.display())?;
    Ok(())
}

fn gradcheck_batch(config: &NetworkConfig, seed: u64) -> Result<(Tensor4, Vec<usize>)> {
    let spec = data::SynthSpec {
        image_size: config.input_rows,
        n_normal: GRADCHECK_BATCH / 2,
        n_abnormal: 1,
        seed,
        ..data::SynthSpec::default()
    };
    if config.input_rows != config.input_cols {
        return Err(Error::config("gradient check needs square inputs"));
    }
    let ds = data::generate_synthetic(&spec)?;
    let idx: Vec<usize> = (0..GRADCHECK_BATCH).map(|i| i * (ds.len() - 1) / (GRADCHECK_BATCH - 1)).collect();
    let batch = Tensor4::stack(idx.iter().map(|&i| &ds.images[i]))?;
    debug_assert_eq!(batch.dims(), input_dims(config, GRADCHECK_BATCH));
    Ok((batch, idx.iter().map(|&i| ds.labels[i]).collect()))
}

/// Returns whether every layer met its tolerance.
pub fn cmd_gradcheck(config: &NetworkConfig, seed: u64, eps: f64, corrupt: bool, out: &mut dyn Write) -> Result<bool> {
    let model = build_network(config, None, seed)?;
    let (batch, labels) = gradcheck_batch(config, seed)?;
    let dense: Vec<bool> = model
        .layers
        .iter()
        .filter(|l| l.param_count() > 0)
        .map(|l| matches!(l, LayerKind::Dense(_) | LayerKind::SoftmaxOut(_)))
        .collect();
    let mut probe = NetworkProbe::new(model, batch, labels);
    probe.corrupt = corrupt;
    let reports = grad_check_groups(&mut probe, eps, seed)?;
    let mut ok = true;
    for (r, &is_dense) in reports.iter().zip(&dense) {
        let tol = if is_dense { GRADCHECK_DENSE_TOL } else { GRADCHECK_TOL };
        let pass = r.max_rel_error < tol;
        ok &= pass;
        writeln!(
            out,
            "{}: params={} checked={} max_rel_error={:.3e} tol={:.0e} {}",
            r.name,
            r.params,
            r.checked,
            r.max_rel_error,
            tol,
            if pass { "ok" } else { "FAIL" }
        )?;
    }
    Ok(ok)
}

pub fn run_cli(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = load_run_config(cli)?;
    match &cli.command {
        Command::GenData { out: dir } => cmd_gen_data(&cfg, dir, cli.force, out),
        Command::Pretrain { data, model_out, log } => cmd_pretrain(&cfg, data, model_out, log.as_ref(), out),
        Command::Finetune {
            data,
            model_in,
            model_out,
            log,
        } => cmd_finetune(&cfg, data, model_in.as_deref(), model_out, log.as_ref(), out),
        Command::Eval {
            model,
            data,
            role,
            predictions,
            report,
        } => cmd_eval(model, data, *role, predictions.as_deref(), report.as_deref(), out),
        Command::Reconstruct {
            model,
            image,
            layer,
            weights,
            out: prefix,
        } => cmd_reconstruct(model, image, *layer, *weights, prefix, out),
        Command::Gradcheck {
            scale,
            eps,
            corrupt_gradient,
        } => {
            let network = match scale {
                ScaleArg::Reduced => NetworkConfig::reduced(),
                ScaleArg::Desk => NetworkConfig::desk(),
                ScaleArg::Paper => NetworkConfig::paper(),
                ScaleArg::Config => cfg.network.clone(),
            };
            if cmd_gradcheck(&network, cfg.network.training.seed, *eps, *corrupt_gradient, out)? {
                Ok(())
            } else {
                Err(Error::Numeric("gradient check failed".into()))
            }
        }
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match run_cli(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
