use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Result;
use serde_json::json;

use sensorformer::checkpoint::read_metadata;
use sensorformer::dataset::read_frame_csv;
use sensorformer::model::count_parameters;
use sensorformer::preprocess::{apply_minmax, bin_index, check_bins, fit_minmax};
use sensorformer::{Checkpoint, Error, OutputHead, Pooling};

use crate::args::InspectArgs;
use crate::manifest::RunRecord;

pub fn run(a: InspectArgs) -> Result<()> {
    let mut rec = RunRecord::start("inspect");
    let report = match (&a.checkpoint, &a.data) {
        (Some(path), _) => {
            rec.input(path);
            checkpoint_report(path)?
        }
        (None, Some(path)) => {
            rec.input(path);
            data_report(path, a.bins, a.winsor)?
        }
        (None, None) => unreachable!("clap requires one of --checkpoint / --data"),
    };
    print!("{report}");
    if let Some(m) = &a.manifest {
        rec.finish(m, None, &json!({ "bins": a.bins, "winsor": a.winsor }))?;
    }
    Ok(())
}

fn checkpoint_report(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read `{}`: {e}", path.display())))?;
    let meta = read_metadata(&bytes)?;
    let ck = Checkpoint::<f32>::from_bytes(&bytes)?;
    let mut out = String::new();
    writeln!(out, "checkpoint {}", path.display())?;
    writeln!(out, "format version {} ({})", meta.format_version, meta.dtype)?;
    match ck.model.head {
        OutputHead::Parallel => writeln!(out, "mode pretraining, {} parallel bin heads", ck.model.config.n_dims)?,
        OutputHead::Classifier { num_classes, pooling } => {
            let pool = match pooling {
                Pooling::Mean => "mean",
                Pooling::FirstPosition => "first-position",
            };
            writeln!(out, "mode downstream, {num_classes} classes, {pool} pooling")?
        }
    }
    writeln!(out, "parameters {}", count_parameters(&ck.model.params))?;
    writeln!(out, "config {}", serde_json::to_string(&ck.model.config)?)?;
    writeln!(out, "scaler winsor fraction {}", ck.scaler.winsor_fraction)?;
    for (d, s) in ck.scaler.dims.iter().enumerate() {
        writeln!(out, "  d{d} min {} max {} mean {}", s.x_min, s.x_max, s.mean)?;
    }
    Ok(out)
}

fn data_report(path: &Path, bins: usize, winsor: f64) -> Result<String> {
    check_bins(bins)?;
    let frame = read_frame_csv(path)?;
    let n = frame.dims();
    let mut out = String::new();
    writeln!(out, "data {}", path.display())?;
    writeln!(out, "rows {} dims {}", frame.timesteps(), n)?;
    match frame.labels() {
        Some(l) => {
            let classes = l.iter().max().map_or(0, |m| m + 1);
            writeln!(out, "labels yes, {classes} classes")?
        }
        None => writeln!(out, "labels no")?,
    }
    for d in 0..n {
        let col: Vec<f64> = frame.column(d).into_iter().filter(|v| !v.is_nan()).collect();
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = col.iter().sum::<f64>() / col.len().max(1) as f64;
        writeln!(out, "d{d} min {min} max {max} mean {mean} missing {}", frame.missing_fraction(d))?;
    }
    let scaler = fit_minmax(&frame, winsor)?;
    let scaled = apply_minmax(frame.values(), &scaler)?;
    writeln!(out, "bin occupancy k={bins} winsor={winsor}")?;
    for d in 0..n {
        let mut counts = vec![0usize; bins];
        for t in 0..frame.timesteps() {
            if !frame.is_missing(t, d) {
                counts[bin_index(scaled[t * n + d], bins)] += 1;
            }
        }
        let line: Vec<String> = counts.iter().map(usize::to_string).collect();
        writeln!(out, "d{d}: {}", line.join(" "))?;
    }
    Ok(out)
}
