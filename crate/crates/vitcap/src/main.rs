//! Command-line front end for the captioning pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/IO error, 3 numeric
//! error. Every run echoes its effective configuration — defaults
//! included — as one JSON line on standard error before doing work.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use vitcap::checkpoint::{load_checkpoint, save_checkpoint};
use vitcap::data::{decode_ppm, load_manifest, preprocess_image, synth_fixture};
use vitcap::decode::{beam_decode, encode_to_tensor, greedy_decode};
use vitcap::heatmap::{render_heatmap, similarity_matrix};
use vitcap::metrics::{evaluate_corpus, EvalPair};
use vitcap::model::ModelConfig;
use vitcap::train::{caption_loss, history_jsonl, TrainConfig};
use vitcap::{tensor, text, train, Error, Result};

#[derive(Parser)]
#[command(
    name = "vitcap",
    version,
    about = "Desk-scale image captioning: patch-transformer encoder, autoregressive decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic image-caption fixture.
    Synth {
        /// Output directory for images and manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// Number of image-caption pairs.
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a captioner and write a checkpoint plus loss history.
    Train {
        /// Dataset manifest (JSON).
        #[arg(long)]
        manifest: PathBuf,
        /// Model config JSON; omitted fields use defaults.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Training config JSON; omitted fields use defaults.
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Checkpoint output path; history goes to <out>.history.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Caption one image with a trained checkpoint.
    Caption {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// PPM image to caption.
        #[arg(long)]
        image: PathBuf,
        /// Beam width; omitted means greedy decoding.
        #[arg(long)]
        beam: Option<usize>,
        /// Length-normalization exponent for beam search.
        #[arg(long, default_value_t = 0.7)]
        alpha: f64,
    },
    /// Score hypothesis captions against reference files.
    Eval {
        /// Hypotheses, one caption per line.
        #[arg(long)]
        hyps: PathBuf,
        /// Reference file, one caption per line; repeatable.
        #[arg(long, required = true)]
        refs: Vec<PathBuf>,
        /// Where to write the metric report JSON.
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Model config JSON; omitted fields use defaults.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Seed for parameters, probe image, and coordinate sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finite-difference step, in (0, 1e-2].
        #[arg(long, default_value_t = 1e-3)]
        h: f64,
    },
    /// Render the image-to-caption similarity heatmap for a dataset.
    Heatmap {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset manifest (JSON).
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for sim.csv and sim.ppm.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too; they exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, pairs, seed } => cmd_synth(&out, pairs, seed),
        Command::Train {
            manifest,
            model_config,
            train_config,
            out,
            seed,
        } => cmd_train(
            &manifest,
            model_config.as_deref(),
            train_config.as_deref(),
            &out,
            seed,
        ),
        Command::Caption {
            ckpt,
            image,
            beam,
            alpha,
        } => cmd_caption(&ckpt, &image, beam, alpha),
        Command::Eval { hyps, refs, report } => cmd_eval(&hyps, &refs, &report),
        Command::Gradcheck {
            model_config,
            seed,
            h,
        } => cmd_gradcheck(model_config.as_deref(), seed, h),
        Command::Heatmap {
            ckpt,
            manifest,
            out,
        } => cmd_heatmap(&ckpt, &manifest, &out),
    }
}

/// Reads a JSON config file, or falls back to the type's default.
fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Io(p.display().to_string(), e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: invalid config: {e}", p.display())))
        }
    }
}

fn echo_config(value: serde_json::Value) {
    eprintln!("{value}");
}

fn cmd_synth(out: &Path, pairs: usize, seed: u64) -> Result<()> {
    echo_config(serde_json::json!({
        "command": "synth",
        "out": out.display().to_string(),
        "pairs": pairs,
        "seed": seed,
    }));
    let manifest = synth_fixture(out, pairs, seed)?;
    println!("{}", vitcap::data::describe_manifest(&manifest));
    Ok(())
}

fn history_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".history.jsonl");
    PathBuf::from(name)
}

fn cmd_train(
    manifest_path: &Path,
    model_config: Option<&Path>,
    train_config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let model_cfg: ModelConfig = load_config(model_config)?;
    let mut train_cfg: TrainConfig = load_config(train_config)?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    echo_config(serde_json::json!({
        "command": "train",
        "manifest": manifest_path.display().to_string(),
        "model_config": serde_json::to_value(&model_cfg).expect("config serializes"),
        "train_config": serde_json::to_value(&train_cfg).expect("config serializes"),
        "out": out.display().to_string(),
    }));

    let manifest = load_manifest(manifest_path)?;
    let outcome = train::train(&manifest, &model_cfg, &train_cfg)?;

    save_checkpoint(
        &outcome.params,
        &outcome.model,
        &outcome.vocab,
        &train_cfg,
        out,
    )?;
    let hist = history_path(out);
    std::fs::write(&hist, history_jsonl(&outcome.history))
        .map_err(|e| Error::Io(hist.display().to_string(), e))?;

    let last = outcome
        .history
        .last()
        .expect("training ran at least one epoch");
    println!(
        "trained {} epochs (final train loss {:.6}{}{}); wrote {} and {}",
        outcome.history.len(),
        last.train_loss,
        match last.val_loss {
            Some(v) => format!(", val loss {v:.6}"),
            None => String::new(),
        },
        if outcome.stopped_early {
            ", stopped early"
        } else {
            ""
        },
        out.display(),
        hist.display()
    );
    Ok(())
}

fn cmd_caption(ckpt: &Path, image: &Path, beam: Option<usize>, alpha: f64) -> Result<()> {
    echo_config(serde_json::json!({
        "command": "caption",
        "ckpt": ckpt.display().to_string(),
        "image": image.display().to_string(),
        "mode": match beam { Some(_) => "beam", None => "greedy" },
        "beam": beam,
        "alpha": alpha,
    }));
    let ck = load_checkpoint(ckpt)?;
    let raw = decode_ppm(image)?;
    let img = preprocess_image(&raw, ck.model.image_size)?;
    let memory = encode_to_tensor(&ck.params, &ck.model, &img)?;
    let ids = match beam {
        None => greedy_decode(&ck.params, &ck.model, &memory)?,
        Some(k) => beam_decode(&ck.params, &ck.model, &memory, k, alpha)?,
    };
    println!("{}", text::decode(&ck.vocab, &ids)?);
    Ok(())
}

fn read_caption_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(path.display().to_string(), e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn cmd_eval(hyps: &Path, refs: &[PathBuf], report: &Path) -> Result<()> {
    echo_config(serde_json::json!({
        "command": "eval",
        "hyps": hyps.display().to_string(),
        "refs": refs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>(),
        "report": report.display().to_string(),
    }));
    let hyp_lines = read_caption_lines(hyps)?;
    let ref_files: Vec<Vec<String>> = refs
        .iter()
        .map(|r| read_caption_lines(r))
        .collect::<Result<_>>()?;
    for (path, lines) in refs.iter().zip(&ref_files) {
        if lines.len() != hyp_lines.len() {
            return Err(Error::Data(format!(
                "line-count mismatch: {} has {} lines, {} has {}",
                hyps.display(),
                hyp_lines.len(),
                path.display(),
                lines.len()
            )));
        }
    }
    let pairs: Vec<EvalPair> = hyp_lines
        .iter()
        .enumerate()
        .map(|(i, hyp)| {
            let rs: Vec<String> = ref_files.iter().map(|f| f[i].clone()).collect();
            EvalPair::from_captions(hyp, &rs)
        })
        .collect::<Result<_>>()?;
    let rep = evaluate_corpus(&pairs)?;
    let json = serde_json::to_string_pretty(&rep).expect("report serializes");
    std::fs::write(report, format!("{json}\n"))
        .map_err(|e| Error::Io(report.display().to_string(), e))?;
    println!("{json}");
    Ok(())
}

fn cmd_gradcheck(model_config: Option<&Path>, seed: u64, h: f64) -> Result<()> {
    let cfg: ModelConfig = load_config(model_config)?;
    cfg.validate()?;
    let min_coords = 200;
    echo_config(serde_json::json!({
        "command": "gradcheck",
        "model_config": serde_json::to_value(&cfg).expect("config serializes"),
        "seed": seed,
        "h": h,
        "min_coords": min_coords,
    }));

    let mut params = vitcap::model::init_params(&cfg, seed)?;
    let (img, ids) = train::probe_example(&cfg, seed);
    let report = tensor::grad_check(
        &mut params,
        |p| caption_loss(p, &cfg, &img, &ids),
        |p| {
            let mut tape = tensor::Tape::new();
            let loss = train::caption_graph(&mut tape, p, &cfg, &img, &ids)?;
            let value = tape.scalar_value(loss)?;
            tape.backward(loss)?;
            tape.write_grads(p)?;
            Ok(value)
        },
        h,
        min_coords,
        seed,
    )?;
    println!(
        "max relative error {:.3e} over {} coordinates (worst: {}[{}])",
        report.max_rel_error, report.coords_checked, report.worst_tensor, report.worst_index
    );
    if report.max_rel_error >= 1e-4 {
        return Err(Error::Numeric(format!(
            "gradient check failed: relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            report.max_rel_error,
            report.worst_tensor,
            report.worst_index,
            report.analytic_at_worst,
            report.numeric_at_worst
        )));
    }
    Ok(())
}

fn cmd_heatmap(ckpt: &Path, manifest_path: &Path, out: &Path) -> Result<()> {
    echo_config(serde_json::json!({
        "command": "heatmap",
        "ckpt": ckpt.display().to_string(),
        "manifest": manifest_path.display().to_string(),
        "out": out.display().to_string(),
    }));
    let ck = load_checkpoint(ckpt)?;
    let manifest = load_manifest(manifest_path)?;

    let mut images = Vec::new();
    let mut captions = Vec::new();
    for bag in &manifest.bags {
        let raw = decode_ppm(&manifest.image_path(bag, 0))?;
        let img = preprocess_image(&raw, ck.model.image_size)?;
        let memory = encode_to_tensor(&ck.params, &ck.model, &img)?;
        let ids = greedy_decode(&ck.params, &ck.model, &memory)?;
        captions.push(text::decode(&ck.vocab, &ids)?);
        images.push(img);
    }

    let m = similarity_matrix(&ck.params, &ck.model, &ck.vocab, &images, &captions)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io(out.display().to_string(), e))?;
    render_heatmap(&m, out)?;
    println!(
        "wrote {}x{} similarity matrix to {} (sim.csv, sim.ppm)",
        m.n_images(),
        m.n_captions(),
        out.display()
    );
    Ok(())
}
