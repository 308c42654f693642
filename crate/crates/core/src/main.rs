use std::path::PathBuf;
use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use czc_core::buffer::{read_manifest, ExemplarStore, MemoryBudget};
use czc_core::codec::{self, checkpoint, measure_bpp, Bitstream, CodecTrainConfig};
use czc_core::datamodel::RgbImage;
use czc_core::desk::{self, DeskConfig};
use czc_core::harness::{self, ExperimentConfig};
use czc_core::Result;

/// Class-incremental learning with compressed, CAM-composited exemplars.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an incremental experiment.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Train a codec on a directory of same-sized images (or the desk corpus) and save it.
    TrainCodec {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compress one image into a bitstream container.
    Encode {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Reconstruct an image from a bitstream container.
    Decode {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print a stored exemplar buffer's manifest with costs.
    InspectStore {
        #[arg(long)]
        store: PathBuf,
    },
    /// Write the synthetic desk corpus as PNG files.
    GenDesk {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_png(path: &std::path::Path) -> Result<RgbImage> {
    Ok(RgbImage::from_dynamic(&image::open(path)?))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, mode, seed, out, set } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            cfg.apply_overrides(set.iter().map(String::as_str))?;
            if let Some(m) = mode {
                cfg.set("mode", &m)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            let report = harness::run(&cfg)?;
            println!("phase,classes_seen,top1,exemplars,mean_bpp,buffer_bits,budget_bits");
            for r in &report.rows {
                println!(
                    "{},{},{:.4},{},{:.3},{},{}",
                    r.phase, r.classes_seen, r.top1, r.exemplar_count, r.mean_bpp, r.buffer_bits, r.budget_bits
                );
            }
            println!("avg {:.4} last {:.4} -> {}", report.avg, report.last, cfg.out.display());
        }
        Command::TrainCodec { data, out, epochs, seed } => {
            let images: Vec<RgbImage> = match data {
                Some(dir) => {
                    let ds = czc_core::datamodel::ingest_directory(&dir, &Default::default())?;
                    ds.train.into_iter().map(|s| s.image).collect()
                }
                None => desk::generate(&DeskConfig { train_per_class: 100, test_per_class: 0, seed, ..Default::default() })?
                    .train
                    .into_iter()
                    .map(|s| s.image)
                    .collect(),
            };
            let refs: Vec<&RgbImage> = images.iter().collect();
            let cfg = CodecTrainConfig { epochs, seed, batch_size: 8, ..Default::default() };
            let (mut model, log) = codec::train_initial(&refs, &cfg)?;
            model.freeze_decoder_side();
            checkpoint::save(&model, &out)?;
            println!("final loss {:.3}, digest {:016x}", log.epoch_losses.last().unwrap_or(&f64::NAN), model.frozen_digest());
        }
        Command::Encode { codec: ckpt, input, output } => {
            let model = checkpoint::load(&ckpt)?;
            let b = codec::encode(&model, &load_png(&input)?)?;
            std::fs::write(&output, b.to_bytes())?;
            println!("{} bytes, {:.3} bpp", b.byte_len(), measure_bpp(&b));
        }
        Command::Decode { codec: ckpt, input, output } => {
            let model = checkpoint::load(&ckpt)?;
            let b = Bitstream::from_bytes(&std::fs::read(&input)?)?;
            codec::decode(&model, &b)?.save_png(&output)?;
        }
        Command::InspectStore { store } => {
            let entries = read_manifest(&store)?;
            let loaded = ExemplarStore::load(&store, MemoryBudget::bits(u64::MAX))?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "file,class,phase,cost_bits,mode,source_id")?;
            for e in &entries {
                writeln!(out, "{},{},{},{},{},{}", e.file, e.class, e.phase, e.cost_bits, e.mode, e.source_id)?;
            }
            writeln!(out, "{} records, {} bits, {} classes", loaded.len(), loaded.used_bits(), loaded.classes().len())?;
        }
        Command::GenDesk { out, classes, train_per_class, test_per_class, size, seed } => {
            let ds = desk::generate(&DeskConfig { classes, train_per_class, test_per_class, size, seed })?;
            desk::write_corpus(&ds, &out)?;
            println!("{} train / {} test images in {}", ds.train.len(), ds.test.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CZC_LOG", "info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed downstream pipe (e.g. `| head`) is not a failure.
        Err(czc_core::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
