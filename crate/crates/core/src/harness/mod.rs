//! Experiment orchestration: config, dataset, incremental run, reports.

mod config;
mod report;

pub use config::{DatasetSource, ExperimentConfig};
pub use report::{emit_plots, read_csv, PhaseRow, PlotData, RunReport, Summary};

use crate::cil::{prepare_codecs, run_incremental_with_codecs, IncrementalRun};
use crate::codec::{checkpoint, CodecModel};
use crate::datamodel::{build_task_sequence, ingest_directory, shuffle_classes, Dataset, IngestOptions, ProtocolConfig, TaskSequence};
use crate::desk;
use crate::error::{Error, Result};

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Desk(d) => desk::generate(d),
        DatasetSource::Directory { path, resize, test_fraction } => {
            ingest_directory(path, &IngestOptions { resize: *resize, test_fraction: *test_fraction, manifest: None })
        }
    }
}

/// Task sequence plus the protocol with its raw reference dims resolved.
pub fn build_sequence(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(TaskSequence, ProtocolConfig)> {
    let first = ds.train.first().ok_or_else(|| Error::EmptyInput("dataset has no training images".into()))?;
    let mut protocol = cfg.protocol.clone();
    if protocol.raw_reference_dims == (0, 0) {
        protocol.raw_reference_dims = (first.image.height, first.image.width);
    }
    let order = shuffle_classes(ds.num_classes(), cfg.class_order_seed.unwrap_or(cfg.seed))?;
    Ok((build_task_sequence(ds, &order, &protocol)?, protocol))
}

/// Seeds the classifier and codec from `cfg.seed`.
pub fn seeded(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.train.seed = cfg.seed;
    c.codec.train.seed = cfg.seed;
    c
}

/// Runs the experiment with precomputed codec snapshots (if the mode needs
/// them) and writes every output file.
pub fn run_with(
    cfg: &ExperimentConfig,
    sequence: &TaskSequence,
    protocol: &ProtocolConfig,
    codecs: Option<&[CodecModel]>,
) -> Result<(RunReport, IncrementalRun)> {
    let cfg = seeded(cfg);
    let owned;
    let codecs = match codecs {
        Some(c) => Some(c),
        None if cfg.mode.uses_codec() => {
            owned = prepare_codecs(sequence, &cfg.codec)?;
            Some(owned.as_slice())
        }
        None => None,
    };
    let run = run_incremental_with_codecs(sequence, protocol, &cfg.train, &cfg.codec, cfg.mode, codecs)?;
    let report = RunReport::new(cfg.mode.name(), cfg.seed, &cfg.digest(), &run.results)?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    report.write(&cfg.out)?;
    emit_plots(&[&report], &cfg.out)?;
    run.store.save(&cfg.out.join("store"))?;
    if let Some(last) = codecs.and_then(|c| c.last()) {
        checkpoint::save(last, &cfg.out.join("codec.ckpt"))?;
    }
    Ok((report, run))
}

/// Loads the data, runs every phase and writes the report, metrics, plots,
/// exemplar store and final codec into `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let (sequence, protocol) = build_sequence(cfg, &ds)?;
    Ok(run_with(cfg, &sequence, &protocol, None)?.0)
}
