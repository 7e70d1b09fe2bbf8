use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use lambdarc::controller::{load_weights, save_weights, ControllerWeights, TENSORS};
use lambdarc::metrics::{alignment_report, bd_rate, delta_r, RdPoint};
use lambdarc::pipeline::{encode_sequence, mean_p_rate, read_frames_csv, sequence_quality, write_frames_csv, FrameRecord, Mode};
use lambdarc::plant::{load_trace, CodecPlant, SyntheticSequence, TracePlant, TraceTable};
use lambdarc::train::{
    compare_gradients, episode_backward, episode_targets, record_episode, train, write_log_csv, Episode, GroupReport,
    TrainSetup,
};

use crate::config::{sequence_config, ExperimentConfig};

/// One plant instance of an experiment.
struct Dataset {
    label: String,
    plant: Box<dyn CodecPlant>,
    /// Nominal λ for a target rate; synthetic plants only.
    nominal: Option<lambdarc::plant::SyntheticCodecParams>,
}

fn dataset_labels(cfg: &ExperimentConfig) -> Vec<String> {
    if cfg.plant.trace.is_some() {
        vec!["trace".into()]
    } else {
        (0..cfg.sequence.count as u64)
            .map(|i| format!("seq{}", cfg.seed + cfg.sequence.offset + i))
            .collect()
    }
}

fn load_datasets(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    if let Some(path) = &cfg.plant.trace {
        let table = load_trace(path)?;
        if table.len() < cfg.sequence.num_frames {
            bail!(
                "trace {} has {} frames but sequence.num_frames = {}",
                path.display(),
                table.len(),
                cfg.sequence.num_frames
            );
        }
        return Ok(vec![Dataset {
            label: "trace".into(),
            plant: Box::new(TracePlant::new(table)),
            nominal: None,
        }]);
    }
    (0..cfg.sequence.count as u64)
        .map(|i| {
            let params = cfg.plant.synthetic(cfg.seed + cfg.sequence.offset + i);
            let seq = SyntheticSequence::generate(params, cfg.sequence.num_frames)?;
            Ok(Dataset {
                label: format!("seq{}", params.seed),
                plant: Box::new(seq),
                nominal: Some(params),
            })
        })
        .collect()
}

fn frames_path(run: &Path, label: &str, mode: Mode, target: f64) -> PathBuf {
    run.join(format!("{mode}_{label}")).join(format!("frames_{target}.csv"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn csv_bytes<F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>>(f: F) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        f(&mut w)?;
        w.flush()?;
    }
    Ok(buf)
}

pub const SUMMARY_HEADER: [&str; 6] = ["dataset", "mode", "target", "avg_bpp", "delta_r_pct", "avg_quality"];

struct SummaryRow {
    dataset: String,
    mode: Mode,
    target: f64,
    avg_bpp: f64,
    delta_r_pct: f64,
    avg_quality: f64,
}

impl SummaryRow {
    fn from_records(dataset: &str, mode: Mode, target: f64, records: &[FrameRecord]) -> Result<Self> {
        let avg_bpp = mean_p_rate(records).context("run has no P-frames")?;
        Ok(Self {
            dataset: dataset.into(),
            mode,
            target,
            avg_bpp,
            delta_r_pct: delta_r(avg_bpp, target)?,
            avg_quality: sequence_quality(records).context("run has no P-frames")?,
        })
    }

    fn fields(&self) -> [String; 6] {
        [
            self.dataset.clone(),
            self.mode.to_string(),
            self.target.to_string(),
            self.avg_bpp.to_string(),
            self.delta_r_pct.to_string(),
            self.avg_quality.to_string(),
        ]
    }
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let bytes = csv_bytes(|w| {
        w.write_record(SUMMARY_HEADER)?;
        rows.iter().try_for_each(|r| w.write_record(r.fields()))
    })?;
    write_file(path, &bytes)
}

fn load_controller(cfg: &ExperimentConfig) -> Result<Option<ControllerWeights>> {
    if !cfg.needs_weights() {
        return Ok(None);
    }
    let path = cfg
        .control
        .weights
        .as_ref()
        .context("control.weights: required when modes include pi_gru")?;
    let w = load_weights(path).with_context(|| format!("loading controller weights {}", path.display()))?;
    Ok(Some(w))
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.targets.is_empty() {
        bail!("targets: simulate needs at least one target");
    }
    let weights = load_controller(cfg)?;
    let datasets = load_datasets(cfg)?;
    let mut jobs = Vec::new();
    for (d, ds) in datasets.iter().enumerate() {
        for &mode in &cfg.modes {
            for &target in &cfg.targets {
                let fixed = match (mode, cfg.sequence.fixed_lambda, ds.nominal) {
                    (Mode::FixedLambda, Some(l), _) => Some(l),
                    (Mode::FixedLambda, None, Some(p)) => Some(p.nominal_lambda_for_rate(target)),
                    (Mode::FixedLambda, None, None) => {
                        bail!("sequence.fixed_lambda: required for fixed_lambda runs on a trace plant")
                    }
                    _ => None,
                };
                jobs.push((d, mode, target, fixed));
            }
        }
    }
    let run = cfg.run_dir();
    let control = cfg.control.setup();
    let rows = jobs
        .par_iter()
        .map(|&(d, mode, target, fixed)| -> Result<SummaryRow> {
            let ds = &datasets[d];
            let seq = sequence_config(cfg, mode, target, fixed);
            let w = if mode == Mode::PiGru { weights.as_ref() } else { None };
            let records = encode_sequence(ds.plant.as_ref(), &seq, &control, w)
                .with_context(|| format!("{} {mode} target {target}", ds.label))?;
            let mut buf = Vec::new();
            write_frames_csv(&records, &mut buf)?;
            write_file(&frames_path(&run, &ds.label, mode, target), &buf)?;
            SummaryRow::from_records(&ds.label, mode, target, &records)
        })
        .collect::<Result<Vec<_>>>()?;
    write_summary(&run.join("summary.csv"), &rows)?;
    println!("simulate: {} runs written to {}", rows.len(), run.display());
    Ok(())
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.plant.trace.is_some() {
        bail!("plant.trace: training needs the synthetic plant");
    }
    let corpus = (0..cfg.train.corpus_size as u64)
        .map(|i| SyntheticSequence::generate(cfg.plant.synthetic(cfg.seed + i), cfg.sequence.num_frames))
        .collect::<lambdarc::Result<Vec<_>>>()?;
    let config = cfg.train.config(cfg.seed);
    let setup = TrainSetup {
        corpus: &corpus,
        // The sequence target is replaced per episode by the pre-encoded rate.
        sequence: sequence_config(cfg, Mode::PiGru, 1.0, None),
        control: cfg.control.setup(),
        config: &config,
        loss: cfg.train.loss(),
    };
    let init = ControllerWeights::init(cfg.seed, cfg.control.residual_max);
    println!("controller parameters: {}", init.parameter_count());
    let outcome = train(&setup, init)?;
    let run = cfg.run_dir();
    std::fs::create_dir_all(&run).with_context(|| format!("creating {}", run.display()))?;
    save_weights(&outcome.weights, &run.join("weights.json"))?;
    let mut buf = Vec::new();
    write_log_csv(&outcome.log, &mut buf)?;
    write_file(&run.join("train_log.csv"), &buf)?;
    let val: Vec<_> = outcome.log.iter().filter(|r| r.split == "validation").collect();
    if let (Some(first), Some(best)) = (val.first(), val.iter().find(|r| r.epoch == outcome.best_epoch)) {
        println!(
            "train: validation loss {:.6} -> {:.6} (best epoch {})",
            first.loss_total, best.loss_total, outcome.best_epoch
        );
    }
    println!("train: weights written to {}", run.join("weights.json").display());
    Ok(())
}

fn read_run(path: &Path, num_frames: usize) -> Result<Vec<FrameRecord>> {
    let file = std::fs::File::open(path).with_context(|| format!("missing run output {}", path.display()))?;
    let records = read_frames_csv(file).with_context(|| format!("reading {}", path.display()))?;
    if records.len() != num_frames {
        bail!(
            "inconsistent run output {}: {} frames, expected {num_frames}",
            path.display(),
            records.len()
        );
    }
    Ok(records)
}

pub fn eval(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.targets.is_empty() {
        bail!("targets: eval needs at least one target");
    }
    let run = cfg.run_dir();
    let labels = dataset_labels(cfg);
    let mut summary = Vec::new();
    let mut alignment = Vec::new();
    for label in &labels {
        for &mode in &cfg.modes {
            for &target in &cfg.targets {
                let records = read_run(&frames_path(&run, label, mode, target), cfg.sequence.num_frames)?;
                summary.push(SummaryRow::from_records(label, mode, target, &records)?);
                let rep = alignment_report(&records);
                alignment.push([
                    label.clone(),
                    mode.to_string(),
                    target.to_string(),
                    rep.groups.len().to_string(),
                    rep.skipped_nonpositive.to_string(),
                    (100.0 * rep.mean_abs_deviation).to_string(),
                    (100.0 * rep.max_ratio_deviation).to_string(),
                ]);
            }
        }
    }

    // (dataset, mode) -> RD points over targets.
    let mut curves: BTreeMap<(&str, Mode), Vec<RdPoint>> = BTreeMap::new();
    for r in &summary {
        curves.entry((r.dataset.as_str(), r.mode)).or_default().push(RdPoint {
            rate: r.avg_bpp,
            quality: r.avg_quality,
        });
    }
    let mut bd_rows = Vec::new();
    let mut skipped = Vec::new();
    for &anchor in &cfg.modes {
        for &test in &cfg.modes {
            let mut values = Vec::new();
            for label in &labels {
                let a = &curves[&(label.as_str(), anchor)];
                let t = &curves[&(label.as_str(), test)];
                match bd_rate(a, t) {
                    Ok(v) => {
                        values.push(v);
                        bd_rows.push([label.clone(), anchor.to_string(), test.to_string(), v.to_string()]);
                    }
                    Err(e) => {
                        skipped.push(format!("{label} {anchor} vs {test}: {e}"));
                        bd_rows.push([label.clone(), anchor.to_string(), test.to_string(), String::new()]);
                    }
                }
            }
            let mean = if values.len() == labels.len() {
                (values.iter().sum::<f64>() / values.len() as f64).to_string()
            } else {
                String::new()
            };
            bd_rows.push(["mean".into(), anchor.to_string(), test.to_string(), mean]);
        }
    }
    for s in &skipped {
        eprintln!("eval: BD-rate left empty for {s}");
    }

    write_summary(&run.join("eval_summary.csv"), &summary)?;
    let bytes = csv_bytes(|w| {
        w.write_record(["dataset", "anchor", "test", "bd_rate_pct"])?;
        bd_rows.iter().try_for_each(|r| w.write_record(r))
    })?;
    write_file(&run.join("bdrate.csv"), &bytes)?;
    let bytes = csv_bytes(|w| {
        w.write_record([
            "dataset",
            "mode",
            "target",
            "minigops",
            "skipped_nonpositive",
            "mean_abs_dev_pct",
            "max_ratio_dev_pct",
        ])?;
        alignment.iter().try_for_each(|r| w.write_record(r))
    })?;
    write_file(&run.join("alignment.csv"), &bytes)?;
    println!("eval: {} runs evaluated in {}", summary.len(), run.display());
    Ok(())
}

/// Merge per-sequence reports, keeping the worst coordinate of each group.
fn merge_reports(acc: &mut Vec<GroupReport>, next: Vec<GroupReport>) {
    if acc.is_empty() {
        *acc = next;
        return;
    }
    for (a, n) in acc.iter_mut().zip(next) {
        a.checked += n.checked;
        if n.max_rel_error.is_nan() || n.max_rel_error > a.max_rel_error {
            a.max_rel_error = n.max_rel_error;
            a.worst_tensor = n.worst_tensor;
            a.worst_pair = n.worst_pair;
        }
    }
}

pub fn gradcheck(cfg: &ExperimentConfig, corrupt_group: Option<&str>) -> Result<()> {
    if cfg.plant.trace.is_some() {
        bail!("plant.trace: gradcheck needs the synthetic plant");
    }
    if let Some(g) = corrupt_group {
        if !TENSORS.iter().any(|t| t.group() == g) {
            bail!("unknown weight group `{g}`");
        }
    }
    let g = &cfg.gradcheck;
    let setup = cfg.control.setup();
    let seq = sequence_config(cfg, Mode::PiGru, 1.0, None);
    let lw = cfg.train.loss();
    let mut reports = Vec::new();
    for i in 0..g.sequences as u64 {
        let seed = cfg.seed + i;
        let plant = SyntheticSequence::generate(cfg.plant.synthetic(seed), cfg.sequence.num_frames)?;
        let weights = ControllerWeights::init_random_head(seed, cfg.control.residual_max);
        let ep = Episode {
            sequence: 0,
            start: g.episode_start,
            len: g.episode_len,
            lambda_pre: g.lambda_pre,
        };
        let (rate, target) = episode_targets(&plant, &seq, &ep)?;
        let tape = record_episode(&plant, &seq, &setup, &weights, rate, ep.start, ep.len)?;
        let mut analytic = episode_backward(&weights, &tape, &target, &lw);
        if let Some(group) = corrupt_group {
            let mut offset = 0;
            for t in TENSORS {
                if t.group() == group {
                    analytic[offset..offset + t.len()].iter_mut().for_each(|v| *v = 1.5 * *v + 1e-3);
                }
                offset += t.len();
            }
        }
        let rep = compare_gradients(
            &plant,
            &weights,
            &tape,
            &target,
            &lw,
            &setup.bounds,
            &analytic,
            &cfg.gradcheck_config(seed),
        )?;
        merge_reports(&mut reports, rep);
    }

    let bytes = csv_bytes(|w| {
        w.write_record(["group", "max_rel_error", "worst_tensor", "analytic", "numeric", "checked"])?;
        reports.iter().try_for_each(|r| {
            w.write_record([
                r.group.to_string(),
                r.max_rel_error.to_string(),
                r.worst_tensor.to_string(),
                r.worst_pair.0.to_string(),
                r.worst_pair.1.to_string(),
                r.checked.to_string(),
            ])
        })
    })?;
    write_file(&cfg.run_dir().join("gradcheck.csv"), &bytes)?;

    println!("{:<8} {:>14} {:>8}  worst tensor", "group", "max rel error", "checked");
    for r in &reports {
        println!("{:<8} {:>14.3e} {:>8}  {}", r.group, r.max_rel_error, r.checked, r.worst_tensor);
    }
    let failed: Vec<&GroupReport> = reports
        .iter()
        .filter(|r| !(r.max_rel_error < g.tolerance))
        .collect();
    if let Some(first) = failed.first() {
        let names: Vec<&str> = failed.iter().map(|r| r.group).collect();
        bail!(
            "gradient check failed for weight group {}: max relative error {:.3e} >= tolerance {:.1e} (worst tensor {})",
            names.join(", "),
            first.max_rel_error,
            g.tolerance,
            first.worst_tensor
        );
    }
    println!("gradcheck: all groups below {:.1e}", g.tolerance);
    Ok(())
}

pub fn gen_trace(cfg: &ExperimentConfig) -> Result<()> {
    let params = cfg.plant.synthetic(cfg.seed + cfg.sequence.offset);
    let seq = SyntheticSequence::generate(params, cfg.sequence.num_frames)?;
    let table = TraceTable::sample(&seq, &cfg.gen_trace.lambda_grid)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    let path = cfg.run_dir().join("trace.csv");
    write_file(&path, &buf)?;
    println!("gen-trace: {} frames x {} λ values written to {}", table.len(), cfg.gen_trace.lambda_grid.len(), path.display());
    Ok(())
}
