use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tpskg::data::generate_dataset;
use tpskg::io::{
    csv_text, load_checkpoint, metrics_line, pgm_bytes, read_checkpoint_header,
    read_dataset, read_metrics, save_checkpoint, write_atomic, write_dataset, RunConfig,
};
use tpskg::rollout::{average_heads, class_token_map, rollout};
use tpskg::suppression::build_mask_top_k;
use tpskg::train::evaluate;
use tpskg::{Dataset, Error, Model, Real, Trainer};

#[derive(Parser)]
#[command(name = "tpskg", version, about = "Train and inspect the toy peak-suppression / knowledge-guidance transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, metrics and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Dataset directory from `gen-data`; generated in memory otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Add wall-clock milliseconds to each metrics line.
        #[arg(long)]
        timing: bool,
    },
    /// Top-1 accuracy and confusion matrix of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        split: Split,
        /// Confusion matrix CSV; defaults next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Attention, rollout, patch map and suppression mask of one image.
    ExportAttn {
        #[arg(long)]
        ckpt: PathBuf,
        /// Index into the chosen split.
        #[arg(long)]
        image: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Knowledge embeddings and image representations as CSV.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of training images to include.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write the synthetic dataset described by a config file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Contract(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> tpskg::Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
            data,
            timing,
        } => {
            let cfg = RunConfig::load(&config)?;
            match cfg.precision {
                32 => train::<f32>(&cfg, &out, resume.as_deref(), data.as_deref(), timing),
                _ => train::<f64>(&cfg, &out, resume.as_deref(), data.as_deref(), timing),
            }
        }
        Command::Eval {
            ckpt,
            split,
            out,
            data,
        } => with_precision(&ckpt, |bits| match bits {
            32 => eval::<f32>(&ckpt, split, out.as_deref(), data.as_deref()),
            _ => eval::<f64>(&ckpt, split, out.as_deref(), data.as_deref()),
        }),
        Command::ExportAttn {
            ckpt,
            image,
            out,
            split,
            data,
        } => with_precision(&ckpt, |bits| match bits {
            32 => export_attn::<f32>(&ckpt, image, &out, split, data.as_deref()),
            _ => export_attn::<f64>(&ckpt, image, &out, split, data.as_deref()),
        }),
        Command::ExportEmbeddings {
            ckpt,
            out,
            samples,
            data,
        } => with_precision(&ckpt, |bits| match bits {
            32 => export_embeddings::<f32>(&ckpt, &out, samples, data.as_deref()),
            _ => export_embeddings::<f64>(&ckpt, &out, samples, data.as_deref()),
        }),
        Command::GenData { spec, out } => {
            let cfg = RunConfig::load(&spec)?;
            let spec = cfg.dataset();
            let (train, test) = generate_dataset(&spec)?;
            write_dataset(&out, &spec, &train, &test)?;
            println!(
                "wrote {} train and {} test images to {}",
                train.len(),
                test.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn with_precision(
    ckpt: &Path,
    f: impl FnOnce(u32) -> tpskg::Result<()>,
) -> tpskg::Result<()> {
    f(read_checkpoint_header(ckpt)?.precision)
}

fn threads() -> tpskg::Result<usize> {
    match std::env::var("TPSKG_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config {
                key: "TPSKG_THREADS".into(),
                msg: format!("expected a positive integer, got `{v}`"),
            }),
    }
}

/// Generated splits, or the ones stored in `dir` after checking they match
/// the config.
fn load_data(cfg: &RunConfig, dir: Option<&Path>) -> tpskg::Result<(Dataset, Dataset)> {
    let Some(dir) = dir else {
        return generate_dataset(&cfg.dataset());
    };
    let (manifest, train, test) = read_dataset(dir)?;
    if manifest.spec != cfg.dataset() {
        return Err(Error::Config {
            key: "data".into(),
            msg: format!(
                "dataset in {} was generated from a different spec",
                dir.display()
            ),
        });
    }
    Ok((train, test))
}

fn create_dir(dir: &Path) -> tpskg::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> tpskg::Result<()> {
    write_atomic(path, text.as_bytes())
}

fn train<T: Real>(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    data: Option<&Path>,
    timing: bool,
) -> tpskg::Result<()> {
    let (train, test) = load_data(cfg, data)?;
    let hash = cfg.hash();
    let mut trainer = match resume {
        Some(ckpt) => {
            let (saved, trainer) = load_checkpoint::<T>(ckpt)?;
            if saved.hash() != hash {
                return Err(Error::Config {
                    key: "resume".into(),
                    msg: format!("{} was written with a different config", ckpt.display()),
                });
            }
            trainer
        }
        None => Trainer::new(Model::<T>::new(&cfg.model(), cfg.mode)?, cfg.train())?,
    };
    trainer.threads = threads()?;
    trainer.record_wall_time = timing;

    create_dir(&out.join("checkpoints"))?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    let metrics_path = out.join("metrics.jsonl");
    let mut lines: Vec<String> = Vec::new();
    if resume.is_some() && metrics_path.exists() {
        for rec in read_metrics(&metrics_path)? {
            if rec.config_hash == hash && rec.metrics.epoch <= trainer.epoch {
                lines.push(metrics_line(&hash, &rec.metrics));
            }
        }
    }
    write_text(&metrics_path, &join_lines(&lines))?;

    trainer.run(&train, &test, |t, m| {
        lines.push(metrics_line(&hash, m));
        write_text(&metrics_path, &join_lines(&lines))?;
        let ckpt = out.join("checkpoints").join(format!("epoch-{:04}.bin", t.epoch));
        save_checkpoint(&ckpt, cfg, t)?;
        println!(
            "epoch {:>3}  loss {:.4}  train {:.3}  test {:.3}",
            m.epoch, m.loss_total, m.train_acc, m.test_acc
        );
        Ok(())
    })?;
    save_checkpoint(&out.join("final.bin"), cfg, &trainer)?;

    let train_eval = evaluate(&trainer.model, &train, trainer.threads)?;
    let test_eval = evaluate(&trainer.model, &test, trainer.threads)?;
    let summary = serde_json::json!({
        "mode": cfg.mode,
        "config_hash": hash,
        "epochs": trainer.epoch,
        "steps": trainer.step,
        "train_accuracy": train_eval.accuracy,
        "test_accuracy": test_eval.accuracy,
        "train_knowledge_accuracy": train_eval.knowledge_accuracy,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&out.join("summary.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn join_lines(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

fn pick(split: Split, train: Dataset, test: Dataset) -> Dataset {
    match split {
        Split::Train => train,
        Split::Test => test,
    }
}

fn eval<T: Real>(
    ckpt: &Path,
    split: Split,
    out: Option<&Path>,
    data: Option<&Path>,
) -> tpskg::Result<()> {
    let (cfg, trainer) = load_checkpoint::<T>(ckpt)?;
    let (train, test) = load_data(&cfg, data)?;
    let name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let data = pick(split, train, test);
    let ev = evaluate(&trainer.model, &data, threads()?)?;
    let out = out.map_or_else(
        || ckpt.with_file_name(format!("confusion-{name}.csv")),
        Path::to_path_buf,
    );
    let text = csv_text(
        &cfg.hash(),
        &["rows: true class, columns: predicted class"],
        &ev.confusion,
    );
    write_text(&out, &text)?;
    println!("split {name}");
    println!("images {}", data.len());
    println!("accuracy {}", ev.accuracy);
    if let Some(k) = ev.knowledge_accuracy {
        println!("knowledge_accuracy {k}");
    }
    println!("confusion {}", out.display());
    Ok(())
}

fn export_attn<T: Real>(
    ckpt: &Path,
    image: usize,
    out: &Path,
    split: Split,
    data: Option<&Path>,
) -> tpskg::Result<()> {
    let (cfg, trainer) = load_checkpoint::<T>(ckpt)?;
    let (train, test) = load_data(&cfg, data)?;
    let data = pick(split, train, test);
    if image >= data.len() {
        return Err(Error::Index {
            what: "image",
            index: image,
            len: data.len(),
        });
    }
    let model = &trainer.model;
    let mc = cfg.model();
    let result = model.infer(&data.image::<T>(image))?;
    let attn = &result.attention;
    let hash = cfg.hash();
    let t = mc.tokens();
    let square = |m: &[f64]| -> Vec<Vec<f64>> { m.chunks(t).map(<[f64]>::to_vec).collect() };
    let grid = |v: &[f64]| -> Vec<Vec<f64>> { v.chunks(mc.grid_w()).map(<[f64]>::to_vec).collect() };

    create_dir(out)?;
    for l in 0..attn.layers() {
        let avg = average_heads(attn, l)?;
        write_text(
            &out.join(format!("attention-layer{}.csv", l + 1)),
            &csv_text(&hash, &["head-averaged attention; rows: queries, columns: keys"], &square(&avg)),
        )?;
    }
    let r = rollout(attn)?;
    write_text(
        &out.join("rollout.csv"),
        &csv_text(&hash, &["attention rollout through all layers"], &square(&r.matrix)),
    )?;
    let map = class_token_map(&r);
    write_text(
        &out.join("patch-map.csv"),
        &csv_text(&hash, &["class-token rollout per patch, patch grid layout"], &grid(&map.values)),
    )?;
    write_atomic(
        &out.join("patch-map.pgm"),
        &pgm_bytes(&map.values, mc.grid_h(), mc.grid_w(), mc.patch),
    )?;
    let mask = build_mask_top_k(&map, cfg.top_k)?;
    let bits: Vec<u8> = mask.bits()[1..].iter().map(|&b| u8::from(b)).collect();
    let bit_rows: Vec<Vec<u8>> = bits.chunks(mc.grid_w()).map(<[u8]>::to_vec).collect();
    write_text(
        &out.join("mask.csv"),
        &csv_text(&hash, &["1 = kept, 0 = suppressed; patch grid layout"], &bit_rows),
    )?;
    println!(
        "image {image} label {} predicted {} suppressed patch {:?}",
        data.labels[image],
        result.artifacts.prediction(),
        mask.suppressed().iter().map(|i| i - 1).collect::<Vec<_>>()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn export_embeddings<T: Real>(
    ckpt: &Path,
    out: &Path,
    samples: usize,
    data: Option<&Path>,
) -> tpskg::Result<()> {
    let (cfg, trainer) = load_checkpoint::<T>(ckpt)?;
    let model = &trainer.model;
    let Some(head) = model.knowledge_head() else {
        return Err(Error::Config {
            key: "mode".into(),
            msg: format!(
                "checkpoint was trained in mode `{}` without knowledge embeddings",
                cfg.mode
            ),
        });
    };
    let (train, _) = load_data(&cfg, data)?;
    let k = model.store.get(head.embeddings);
    let d = cfg.embed_dim;
    let mut rows: Vec<Vec<String>> = k
        .data()
        .chunks(d)
        .enumerate()
        .map(|(g, row)| {
            let mut r: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            r.push(g.to_string());
            r
        })
        .collect();
    let n = samples.min(train.len());
    for i in 0..n {
        let y = model.infer(&train.image::<T>(i))?.artifacts.y;
        let mut r: Vec<String> = y.iter().map(|&v| T::lit(v).to_string()).collect();
        r.push(train.labels[i].to_string());
        rows.push(r);
    }
    let layout = format!(
        "first {} rows: knowledge embeddings; next {n} rows: image representations of training images 0..{n}",
        cfg.classes
    );
    let text = csv_text(&cfg.hash(), &[&layout, "columns: d0..d(D-1), label"], &rows);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(out, &text)?;
    println!("wrote {} embeddings and {n} samples to {}", cfg.classes, out.display());
    Ok(())
}
