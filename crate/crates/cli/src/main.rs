use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qrnn::bitpack::bench_qmatvec;
use qrnn::cells::Model;
use qrnn::config::{self, RunConfig};
use qrnn::modelio::{self, Checkpoint};
use qrnn::quantizers::{self, QuantConfig, FULL_PRECISION_BITS};
use qrnn::training::{evaluate_classifier, evaluate_lm, Dataset, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "qrnn",
    version,
    about = "Balanced low-bit quantized GRU/LSTM training and inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set quant.weight_bits=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut v = self.set.clone();
        if let Some(s) = self.seed {
            v.push(format!("train.seed={s}"));
        }
        v
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, best.ckpt, last.ckpt and config.toml.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "valid")]
        split: String,
    },
    /// Compare balanced and unbalanced quantization of every weight matrix.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory for inspect.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the packed quantized model file.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory; the model is written to `model.brnn`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time packed against dense matrix-vector products.
    Bench {
        #[arg(long, default_value_t = 256)]
        rows: usize,
        #[arg(long, default_value_t = 1024)]
        cols: usize,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
        /// Weight/activation bit-width pairs, e.g. `1x1,2x2`.
        #[arg(long, default_value = "1x1,2x2,2x3,3x3,4x4")]
        bits: String,
        /// Directory for bench.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common, out } => train(&common, &out),
        Command::Eval { common, ckpt, split } => eval(&common, &ckpt, &split),
        Command::Inspect { common, ckpt, out } => inspect(&common, &ckpt, out.as_deref()),
        Command::Export { common, ckpt, out } => export(&common, &ckpt, &out),
        Command::Bench {
            rows,
            cols,
            repeats,
            bits,
            out,
        } => bench(rows, cols, repeats, &bits, out.as_deref()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(common: &Common, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides())?;
    let prepared = config::prepare(&cfg.data, cfg.train.seed)?;
    config::finalize_model(&mut cfg.model, &prepared);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.toml"), &cfg.to_toml())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = Model::new(cfg.model.clone(), &cfg.quant, &mut rng)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    trainer.checkpoint_dir = Some(out.to_path_buf());
    trainer.vocab = prepared.vocab.clone();
    let result = trainer.run(&prepared.dataset);
    if result.is_ok() && trainer.state.log.records.last().map(|r| r.step) != Some(trainer.state.step) {
        trainer.evaluate(&prepared.dataset)?;
    }
    write(&out.join("metrics.csv"), &trainer.state.log.to_csv())?;
    modelio::save_checkpoint(&trainer.checkpoint(), &out.join("last.ckpt"))?;
    result?;

    let metric = if cfg.model.is_classifier() { "accuracy" } else { "ppw" };
    let value = trainer.state.log.last("valid", metric).unwrap_or(f64::NAN);
    println!(
        "steps={} valid_{metric}={value:.6} out={}",
        trainer.state.step,
        out.display()
    );
    Ok(())
}

/// Run config for a checkpoint: `--config` if given, else `config.toml` beside it.
fn checkpoint_config(common: &Common, ckpt: &Path) -> Result<RunConfig> {
    let beside = ckpt.parent().map(|d| d.join("config.toml"));
    let path = match (&common.config, beside) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(p)) if p.exists() => Some(p),
        _ => None,
    };
    Ok(RunConfig::load(path.as_deref(), &common.overrides())?)
}

fn eval(common: &Common, ckpt_path: &Path, split: &str) -> Result<()> {
    let ckpt = modelio::load_checkpoint(ckpt_path)?;
    let cfg = checkpoint_config(common, ckpt_path)?;
    let data = config::load_split(&cfg.data, split, cfg.train.seed, ckpt.vocab.as_ref())?;
    let t = &ckpt.train;
    match data {
        Dataset::Lm { valid, .. } => {
            let s = evaluate_lm(&ckpt.model, &valid, t.batch_size, t.unroll)?;
            println!("split={split} loss={:.6} ppw={:.6}", s.mean_loss(), s.perplexity());
        }
        Dataset::Classify { valid, .. } => {
            let s = evaluate_classifier(&ckpt.model, &valid, t.batch_size, t.seq_len)?;
            println!("split={split} loss={:.6} accuracy={:.6}", s.mean_loss(), s.accuracy());
        }
    }
    Ok(())
}

/// Quantization settings of the checkpoint with `quant.*` overrides applied.
fn quant_for(common: &Common, ckpt: &Checkpoint) -> Result<QuantConfig> {
    let base = RunConfig {
        quant: ckpt.model.quant.clone(),
        ..RunConfig::default()
    };
    Ok(RunConfig::resolve(Some(&base.to_toml()), &common.overrides())?.quant)
}

fn inspect(common: &Common, ckpt_path: &Path, out: Option<&Path>) -> Result<()> {
    let ckpt = modelio::load_checkpoint(ckpt_path)?;
    let quant = quant_for(common, &ckpt)?;
    if quant.weight_bits == FULL_PRECISION_BITS {
        bail!("checkpoint is full precision; choose a width with --set quant.weight_bits=K");
    }
    let mut csv = String::from("matrix,quantizer,bits,bin_counts,normalized_entropy,max_abs_error\n");
    let mut table = format!(
        "{:<12} {:<10} {:>8} {:>10}  {}\n",
        "matrix", "quantizer", "entropy", "max_err", "bin_counts"
    );
    for (name, w) in ckpt.model.params.weight_matrices() {
        for balanced in [true, false] {
            let q = QuantConfig {
                balanced,
                ..quant.clone()
            };
            let (_, meta) = quantizers::quantize_weights(w, &q).with_context(|| format!("quantizing {name}"))?;
            let r = quantizers::balance_report(&meta, w);
            let kind = if balanced { "balanced" } else { "unbalanced" };
            let bins = r.bin_counts.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
            writeln!(
                csv,
                "{name},{kind},{},{bins},{:.6},{:.6e}",
                q.weight_bits, r.normalized_entropy, r.max_abs_error
            )?;
            writeln!(
                table,
                "{name:<12} {kind:<10} {:>8.4} {:>10.3e}  [{bins}]",
                r.normalized_entropy, r.max_abs_error
            )?;
        }
    }
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write(&dir.join("inspect.csv"), &csv)?;
    }
    Ok(())
}

fn export(common: &Common, ckpt_path: &Path, out: &Path) -> Result<()> {
    let ckpt = modelio::load_checkpoint(ckpt_path)?;
    let quant = quant_for(common, &ckpt)?;
    fs::create_dir_all(out)?;
    let path = out.join("model.brnn");
    let s = modelio::export_quantized(&ckpt.model, &quant, &path)?;
    println!(
        "wrote {} total_bytes={} weight_payload_bytes={} row_sum_bytes={} weight_f32_bytes={} ratio={:.4}",
        path.display(),
        s.total_bytes,
        s.weight_payload_bytes,
        s.row_sum_bytes,
        s.weight_f32_bytes,
        s.weight_payload_bytes as f64 / s.weight_f32_bytes as f64
    );
    Ok(())
}

fn parse_bits(list: &str) -> Result<Vec<(u8, u8)>> {
    list.split(',')
        .map(|p| {
            let (w, a) = p
                .trim()
                .split_once('x')
                .with_context(|| format!("bad bit pair {p:?}, expected WxA"))?;
            Ok((w.parse()?, a.parse()?))
        })
        .collect()
}

fn bench(rows: usize, cols: usize, repeats: usize, bits: &str, out: Option<&Path>) -> Result<()> {
    let mut csv = String::from("k_w,k_a,rows,cols,packed_ops_s,dense_ops_s,agreement\n");
    for (kw, ka) in parse_bits(bits)? {
        let r = bench_qmatvec(rows, cols, kw, ka, repeats)?;
        writeln!(
            csv,
            "{kw},{ka},{rows},{cols},{:.0},{:.0},{}",
            r.packed_ops_per_sec, r.dense_ops_per_sec, r.agreement
        )?;
    }
    print!("{csv}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write(&dir.join("bench.csv"), &csv)?;
    }
    Ok(())
}
