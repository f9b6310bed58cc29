use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use tcn_core::signal::{write_signals, SignalFormat, SynthSpec};
use tcn_core::{
    evaluate, normalize, purity, read_samples, synth_dataset, train, window_samples, AlarmConfig,
    AlarmMonitor, EvalReport, Preprocessing, ScoringConfig, SignalSet, TcnError, TcnModel,
    TrainConfig,
};

use crate::args::{ClassifyArgs, EvaluateArgs, ExportPlotArgs, SynthArgs, TrainArgs};
use crate::output::{write_plot_header, write_plot_rows, VerdictRecord, VerdictWriter};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Expands each input into its signal files: a file stands for itself, a
/// directory for its regular files in name order.
pub fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<Vec<PathBuf>>> {
    paths.iter().map(|p| expand_input(p)).collect()
}

fn expand_input(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(path).map_err(|e| TcnError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if !meta.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|e| TcnError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| TcnError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let p = entry.path();
        let hidden = p
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if p.is_file() && !hidden {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn format_for(path: &Path, explicit: Option<SignalFormat>) -> SignalFormat {
    explicit
        .or_else(|| SignalFormat::from_extension(path))
        .unwrap_or(SignalFormat::Csv)
}

/// Reads, windows and normalizes one file. An empty file yields no windows.
fn prepare_file(
    path: &Path,
    format: Option<SignalFormat>,
    pre: &Preprocessing,
) -> Result<Option<SignalSet>> {
    let samples = read_samples(path, format_for(path, format))?;
    if samples.is_empty() {
        return Ok(None);
    }
    let tag = path.display().to_string();
    let set = window_samples(&samples, pre.window_len, pre.hop, pre.sample_rate, Some(&tag))?;
    Ok(Some(normalize(&set, pre.normalization)))
}

fn prepare_files(
    files: &[PathBuf],
    format: Option<SignalFormat>,
    pre: &Preprocessing,
) -> Result<Vec<SignalSet>> {
    let mut sets = Vec::new();
    for f in files {
        if let Some(set) = prepare_file(f, format, pre)? {
            sets.push(set);
        }
    }
    Ok(sets)
}

pub fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let w = &args.window;
    let pre = Preprocessing {
        window_len: w.window,
        hop: w.hop.unwrap_or(w.window),
        normalization: w.normalize,
        sample_rate: w.sample_rate,
    };
    let k = args.k.unwrap_or(args.input.data.len());
    let mut cfg = TrainConfig::new(k, pre, args.seed);
    cfg.step1_epochs = args.epochs1;
    cfg.step1_lr = args.lr;
    cfg.step3_epochs = args.epochs3;
    cfg.scoring = ScoringConfig {
        threshold_quantile: args.threshold_quantile,
        failure_ratio: args.failure_ratio,
    };
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<TcnModel> {
    let cfg = train_config(args)?;
    cfg.scoring.validate()?;
    if cfg.preprocessing.hop == 0 || cfg.preprocessing.hop > cfg.preprocessing.window_len {
        return Err(TcnError::InvalidConfig(format!(
            "hop must lie in 1..={}",
            cfg.preprocessing.window_len
        ))
        .into());
    }
    let mut groups = Vec::new();
    let mut labels = Vec::new();
    for (label, files) in expand_inputs(&args.input.data)?.iter().enumerate() {
        for set in prepare_files(files, args.input.format, &cfg.preprocessing)? {
            labels.extend(std::iter::repeat_n(label, set.count()));
            groups.push(set);
        }
    }
    if groups.is_empty() {
        return Err(TcnError::InsufficientSamples {
            needed: cfg.preprocessing.window_len,
            found: 0,
        }
        .into());
    }
    let data = SignalSet::concat(&groups)?;
    let (model, summary) = train(&data, &cfg)?;
    model.save(&args.model)?;

    let s1 = &summary.step1;
    writeln!(out, "signals: {}", data.count())?;
    writeln!(
        out,
        "step 1: mse {:.6} -> {:.6} (best epoch {} of {})",
        s1.initial_loss, s1.best_loss, s1.best_epoch, cfg.step1_epochs
    )?;
    writeln!(
        out,
        "step 2: J = {:.6} after {} restarts",
        summary.kmeans_j, cfg.kmeans_restarts
    )?;
    let s3 = &summary.step3;
    writeln!(
        out,
        "step 3: CI {:.6} -> {:.6} (best epoch {} of {})",
        s3.initial_ci, s3.best_ci, s3.best_epoch, cfg.step3_epochs
    )?;
    for (k, c) in model.stats.clusters.iter().enumerate() {
        writeln!(
            out,
            "cluster {k}: members {}, sigma {:.6}, threshold {:.6}, failure {:.6}",
            c.members, c.sigma, c.threshold, c.failure
        )?;
    }
    if args.input.data.len() > 1 {
        writeln!(out, "purity: {:.4}", purity(&summary.assignments, &labels)?)?;
    }
    writeln!(out, "model written to {}", args.model.display())?;
    Ok(model)
}

pub fn cmd_classify(args: &ClassifyArgs, out: &mut dyn Write) -> Result<usize> {
    let model = TcnModel::load(&args.model)?;
    let alarm_cfg = AlarmConfig {
        window: args.alarm_window,
        fault_fraction: args.alarm_fraction,
    };
    let mut monitor = AlarmMonitor::new(alarm_cfg)?;
    let mut writer = VerdictWriter::new(out, args.emit, model.k());
    writer.header()?;
    let mut index = 0;
    for files in expand_inputs(&args.input.data)? {
        for set in prepare_files(&files, args.input.format, &model.preprocessing)? {
            for signal in &set {
                let verdict = model.classify(signal)?;
                let alarm = monitor.push(verdict.outcome).is_some();
                writer.write(&VerdictRecord::new(index, &verdict, alarm))?;
                index += 1;
            }
        }
    }
    writer.finish()?;
    Ok(index)
}

fn load_groups(
    dirs: &[PathBuf],
    format: Option<SignalFormat>,
    pre: &Preprocessing,
) -> Result<Vec<(String, SignalSet)>> {
    let mut groups = Vec::new();
    for dir in dirs {
        let files = expand_input(dir)?;
        let mut found = false;
        for f in &files {
            if let Some(set) = prepare_file(f, format, pre)? {
                let name = f
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| f.display().to_string());
                groups.push((name, set));
                found = true;
            }
        }
        if !found {
            return Err(TcnError::InsufficientSamples {
                needed: pre.window_len,
                found: 0,
            }
            .into());
        }
    }
    Ok(groups)
}

pub fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<EvalReport> {
    let model = TcnModel::load(&args.model)?;
    let pristine = load_groups(&args.pristine, args.format, &model.preprocessing)?;
    let faults = load_groups(&args.faults, args.format, &model.preprocessing)?;
    let report = evaluate(&model, &pristine, &faults)?;
    if args.json {
        serde_json::to_writer_pretty(&mut *out, &report)?;
        writeln!(out)?;
    } else {
        write_report(&report, out)?;
    }
    Ok(report)
}

fn write_report(r: &EvalReport, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "pristine groups (accepted / rejected / total):")?;
    for g in &r.pristine {
        writeln!(out, "  {}: {} / {} / {}", g.name, g.accepted, g.rejected, g.signals)?;
    }
    if !r.faults.is_empty() {
        writeln!(out, "fault groups (detected / missed / total):")?;
        for g in &r.faults {
            writeln!(out, "  {}: {} / {} / {}", g.name, g.rejected, g.accepted, g.signals)?;
        }
    }
    let c = &r.confusion;
    writeln!(
        out,
        "pristine acceptance: {}/{} ({:.1}%)",
        c.pristine_accepted,
        c.pristine_accepted + c.pristine_rejected,
        100.0 * c.pristine_acceptance()
    )?;
    if !r.faults.is_empty() {
        writeln!(
            out,
            "fault detection: {}/{} ({:.1}%)",
            c.fault_detected,
            c.fault_detected + c.fault_missed,
            100.0 * c.fault_detection()
        )?;
    }
    writeln!(out, "misclassified: {}", c.misclassified())
}

pub fn cmd_export_plot(args: &ExportPlotArgs, out: &mut dyn Write) -> Result<usize> {
    let model = TcnModel::load(&args.model)?;
    write_plot_header(out)?;
    let mut index = 0;
    for files in expand_inputs(&args.input.data)? {
        for set in prepare_files(&files, args.input.format, &model.preprocessing)? {
            for signal in &set {
                let verdict = model.classify(signal)?;
                write_plot_rows(out, index, &verdict.probs, &model.stats)?;
                index += 1;
            }
        }
    }
    Ok(index)
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let per_condition = args.train + args.holdout;
    if args.train == 0 {
        return Err(TcnError::InvalidConfig("--train must be positive".into()).into());
    }
    if args.faults > per_condition {
        return Err(TcnError::InvalidConfig(format!(
            "--faults may not exceed --train + --holdout ({per_condition})"
        ))
        .into());
    }
    let mut spec = SynthSpec::three_condition(per_condition, args.seed);
    spec.window_len = args.window;
    let data = synth_dataset(&spec)?;
    let faults = data.faults.unwrap_or_default();
    let dirs = ["train", "holdout", "faults"].map(|d| args.out.join(d));
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| TcnError::Io {
            path: d.clone(),
            source: e,
        })?;
    }
    let write = |path: PathBuf, set: &SignalSet, range: std::ops::Range<usize>| -> Result<()> {
        if range.is_empty() {
            return Ok(());
        }
        let part = SignalSet::new(set.signals()[range].to_vec())?;
        Ok(write_signals(&path, SignalFormat::Csv, &part)?)
    };
    for (c, set) in data.conditions.iter().enumerate() {
        let name = format!("condition_{c}.csv");
        write(dirs[0].join(&name), set, 0..args.train)?;
        write(dirs[1].join(&name), set, args.train..per_condition)?;
    }
    for (c, set) in faults.iter().enumerate() {
        write(dirs[2].join(format!("fault_{c}.csv")), set, 0..args.faults)?;
    }
    writeln!(
        out,
        "wrote {} conditions to {} ({} train, {} holdout, {} fault windows each)",
        data.conditions.len(),
        args.out.display(),
        args.train,
        args.holdout,
        args.faults
    )?;
    Ok(())
}

/// Opens `path` for writing, or standard output when absent.
pub fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| TcnError::Io {
            path: p.to_path_buf(),
            source: e,
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}
