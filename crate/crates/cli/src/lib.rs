//! `rainsense` command-line pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use rainsense_core::csi::empirical_distribution;
use rainsense_core::dataio::{fmt_f64, load_dataset, save_dataset, verify_split, write_csv};
use rainsense_core::dataset::{generate_dataset_with_threads, ClassRequest};
use rainsense_core::mpc::{
    average_normalized_curve, detection_threshold, extract_mpcs, fit_power_law, mpc_summary,
    select_frames, GAMMA_N_DB, GAMMA_P_DB,
};
use rainsense_core::{
    ChannelConfig, Condition, LabeledDataset, PdpFrame, RainLabel, Record, SimulationPlan, Split,
};
use rainsense_models::train::train_with_progress;
use rainsense_models::{evaluate, Arch, Model, Normalizer, TrainRecipe};

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "rainsense",
    version,
    about = "Rain sensing from OFDM channel state information"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a labelled dataset from a scenario config.
    Simulate(SimulateArgs),
    /// Instantaneous and windowed RSS tables, PDF and CDF.
    AnalyzeRss(AnalyzeArgs),
    /// Per-class average PDP and one example snapshot per class.
    AnalyzePdp(AnalyzeArgs),
    /// Multipath components of example snapshots and per-class statistics.
    ExtractMpc(MpcArgs),
    /// Power-law decay fit per class.
    FitPowerlaw(FitArgs),
    /// Train a classifier on the training split of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval(EvalArgs),
    /// Write every analysis table for a dataset into one directory.
    ExportPlots(ExportArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    sample_interval_ns: f64,
}

#[derive(Args, Debug)]
struct MpcArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    sample_interval_ns: f64,
    /// PDP noise floor N0 in dB; estimated from each PDP tail when omitted.
    #[arg(long, allow_hyphen_values = true)]
    noise_floor_db: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shift each PDP so its strongest tap becomes the reference tap.
    #[arg(long)]
    align_peak: bool,
    /// Also write the per-tap average normalized curve here.
    #[arg(long)]
    curve_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "raingaugenet")]
    arch: String,
    #[arg(long, default_value = "full")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Floor for PDP taps before conversion to dB.
    #[arg(long, allow_hyphen_values = true)]
    pdp_floor_db: Option<f64>,
    /// Per-epoch training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 3000)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    sample_interval_ns: f64,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    use rainsense_core::Error as C;
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<C>() {
            return match c {
                C::Config(_) | C::MissingKey(_) | C::UnknownKey { .. } => EXIT_CONFIG,
                C::Io { .. } => EXIT_IO,
                _ => EXIT_FAILURE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_FAILURE
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(&a),
        Command::AnalyzeRss(a) => analyze_rss(&load(&a.input)?, &a.out_dir),
        Command::AnalyzePdp(a) => analyze_pdp(&load(&a.input)?, &a.out_dir, a.sample_interval_ns),
        Command::ExtractMpc(a) => extract_mpc(
            &load(&a.input)?,
            &a.out_dir,
            a.sample_interval_ns,
            a.noise_floor_db,
        ),
        Command::FitPowerlaw(a) => {
            let ds = load(&a.input)?;
            fit_powerlaw(
                &ds,
                &a.out,
                a.frames,
                a.seed,
                a.align_peak,
                a.curve_out.as_deref(),
            )
        }
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::ExportPlots(a) => {
            let ds = load(&a.input)?;
            analyze_rss(&ds, &a.out_dir)?;
            analyze_pdp(&ds, &a.out_dir, a.sample_interval_ns)?;
            extract_mpc(&ds, &a.out_dir, a.sample_interval_ns, None)?;
            fit_powerlaw(
                &ds,
                &a.out_dir.join("powerlaw_fit.csv"),
                a.frames,
                a.seed,
                false,
                Some(&a.out_dir.join("powerlaw_curve.csv")),
            )
        }
    }
}

fn load(path: &Path) -> anyhow::Result<LabeledDataset> {
    let ds = load_dataset(path)?;
    if ds.is_empty() {
        bail!("{} holds no records", path.display());
    }
    Ok(ds)
}

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Worker threads from `RAINSENSE_THREADS`, default 1.
pub fn thread_count() -> anyhow::Result<usize> {
    match std::env::var("RAINSENSE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("RAINSENSE_THREADS must be a positive integer, got `{v}`"),
        },
    }
}

fn simulate(a: &SimulateArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.config)
        .with_context(|| format!("cannot read config {}", a.config.display()))?;
    let plan = SimulationPlan::from_config_str(&text)
        .with_context(|| format!("in {}", a.config.display()))?;
    let classes: Vec<ClassRequest> = plan
        .scenarios
        .iter()
        .map(|s| ClassRequest {
            scenario: s.clone(),
            train_count: plan.train_count,
            test_count: plan.test_count,
        })
        .collect();
    let ds = generate_dataset_with_threads(
        &classes,
        &plan.channel,
        plan.window,
        plan.session_len,
        a.seed,
        thread_count()?,
    )?;
    let report = verify_split(&ds);
    if !report.is_clean() {
        bail!(
            "generated dataset has {} train/test overlaps",
            report.violations.len()
        );
    }
    save_dataset(&ds, &a.out)?;
    println!(
        "wrote {} records ({} train, {} test) to {}",
        ds.len(),
        ds.split(Split::Train).count(),
        ds.split(Split::Test).count(),
        a.out.display()
    );
    Ok(())
}

/// Records grouped by class in timestamp order.
fn by_class(ds: &LabeledDataset) -> BTreeMap<RainLabel, Vec<&Record>> {
    let mut m: BTreeMap<RainLabel, Vec<&Record>> = BTreeMap::new();
    for r in &ds.records {
        m.entry(r.label).or_default().push(r);
    }
    for v in m.values_mut() {
        v.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    m
}

fn analyze_rss(ds: &LabeledDataset, dir: &Path) -> anyhow::Result<()> {
    out_dir(dir)?;
    let mut series = Vec::new();
    let mut windows = Vec::new();
    let mut dist = Vec::new();
    let mut summary = Vec::new();
    for (label, recs) in by_class(ds) {
        let mut values = Vec::new();
        let mut vars = Vec::new();
        for r in recs {
            let Some(rss) = &r.rss else { continue };
            for (k, v) in rss.iter().enumerate() {
                series.push(vec![
                    label.name().into(),
                    fmt_f64(r.timestamp + k as f64),
                    fmt_f64(*v),
                ]);
            }
            let n = rss.len() as f64;
            let mean = rss.iter().sum::<f64>() / n;
            let var = rss.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            windows.push(vec![
                label.name().into(),
                fmt_f64(r.timestamp),
                fmt_f64(mean),
                fmt_f64(var),
            ]);
            values.extend_from_slice(rss);
            vars.push(var);
        }
        if values.len() < 2 {
            continue;
        }
        let (hist, ecdf) = empirical_distribution(&values, 50)?;
        for (x, d) in hist.bin_centers().iter().zip(&hist.density) {
            dist.push(vec![
                label.name().into(),
                "pdf".into(),
                fmt_f64(*x),
                fmt_f64(*d),
            ]);
        }
        for (x, p) in ecdf.steps() {
            dist.push(vec![
                label.name().into(),
                "cdf".into(),
                fmt_f64(x),
                fmt_f64(p),
            ]);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mean_var = vars.iter().sum::<f64>() / vars.len() as f64;
        summary.push(vec![label.name().into(), fmt_f64(mean), fmt_f64(mean_var)]);
    }
    if series.is_empty() {
        bail!("dataset carries no RSS windows");
    }
    write_csv(
        dir.join("rss_series.csv"),
        &["class", "t", "rss_db"],
        &series,
    )?;
    write_csv(
        dir.join("rss_windowed.csv"),
        &["class", "window_start", "mean_db", "var_db2"],
        &windows,
    )?;
    write_csv(
        dir.join("rss_distribution.csv"),
        &["class", "kind", "x_db", "value"],
        &dist,
    )?;
    write_csv(
        dir.join("rss_summary.csv"),
        &["class", "mean_db", "mean_window_var_db2"],
        &summary,
    )?;
    Ok(())
}

fn db(p: f64) -> f64 {
    10.0 * p.log10()
}

fn analyze_pdp(ds: &LabeledDataset, dir: &Path, ts_ns: f64) -> anyhow::Result<()> {
    out_dir(dir)?;
    let mut avg_rows = Vec::new();
    let mut example_rows = Vec::new();
    for (label, recs) in by_class(ds) {
        let n_taps = recs[0].pdp.n_taps();
        let mut sum = vec![0.0; n_taps];
        let mut count = 0usize;
        for r in &recs {
            for s in 0..r.pdp.n_snapshots() {
                for (t, acc) in sum.iter_mut().enumerate() {
                    *acc += r.pdp.get(t, s);
                }
                count += 1;
            }
        }
        for (t, s) in sum.iter().enumerate() {
            avg_rows.push(vec![
                label.name().into(),
                t.to_string(),
                fmt_f64(t as f64 * ts_ns),
                fmt_f64(db(s / count as f64)),
            ]);
        }
        for (t, p) in recs[0].pdp.column(0).iter().enumerate() {
            example_rows.push(vec![
                label.name().into(),
                t.to_string(),
                fmt_f64(t as f64 * ts_ns),
                fmt_f64(db(*p)),
            ]);
        }
    }
    let header = ["class", "tap", "delay_ns", "power_db"];
    write_csv(dir.join("pdp_average.csv"), &header, &avg_rows)?;
    write_csv(dir.join("pdp_example.csv"), &header, &example_rows)?;
    Ok(())
}

fn class_frames(recs: &[&Record]) -> Vec<PdpFrame> {
    recs.iter().flat_map(|r| r.frames()).collect()
}

fn extract_mpc(ds: &LabeledDataset, dir: &Path, ts_ns: f64, n0: Option<f64>) -> anyhow::Result<()> {
    out_dir(dir)?;
    let ts = ts_ns * 1e-9;
    let mut comp_rows = Vec::new();
    let mut sum_rows = Vec::new();
    for (label, recs) in by_class(ds) {
        let frames = class_frames(&recs);
        let first = &frames[0];
        let th = detection_threshold(first, GAMMA_P_DB, GAMMA_N_DB, n0)?;
        let set = extract_mpcs(first, th, ts);
        for ((i, d), p) in set.tap_indices.iter().zip(&set.delays_s).zip(&set.powers) {
            comp_rows.push(vec![
                label.name().into(),
                i.to_string(),
                fmt_f64(d * 1e9),
                fmt_f64(db(*p)),
                fmt_f64(th),
            ]);
        }
        let s = mpc_summary(&frames, n0, ts)?;
        sum_rows.push(vec![
            label.name().into(),
            fmt_f64(s.total_power_db),
            fmt_f64(s.max_power_db),
            fmt_f64(s.rms_delay_spread_s * 1e9),
            fmt_f64(s.mean_components),
            s.frames.to_string(),
        ]);
    }
    write_csv(
        dir.join("mpc_components.csv"),
        &["class", "tap", "delay_ns", "power_db", "threshold_db"],
        &comp_rows,
    )?;
    write_csv(
        dir.join("mpc_summary.csv"),
        &[
            "class",
            "total_power_db",
            "max_power_db",
            "rms_delay_spread_ns",
            "mean_components",
            "frames",
        ],
        &sum_rows,
    )?;
    Ok(())
}

/// Drops the taps before the strongest one.
pub fn align_to_peak(frame: &PdpFrame) -> PdpFrame {
    let peak = frame.taps.iter().enumerate().fold(
        0,
        |best, (i, p)| if *p > frame.taps[best] { i } else { best },
    );
    PdpFrame {
        t: frame.t,
        taps: frame.taps[peak..].to_vec(),
    }
}

fn fit_powerlaw(
    ds: &LabeledDataset,
    out: &Path,
    n_frames: usize,
    seed: u64,
    align: bool,
    curve_out: Option<&Path>,
) -> anyhow::Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    let mut rows = Vec::new();
    let mut curve_rows = Vec::new();
    for (label, recs) in by_class(ds) {
        let all = class_frames(&recs);
        let mut picked: Vec<PdpFrame> = select_frames(all.len(), n_frames, seed)
            .into_iter()
            .map(|i| all[i].clone())
            .collect();
        if align {
            picked = picked.iter().map(align_to_peak).collect();
        }
        let fit = fit_power_law(&picked).with_context(|| format!("fitting {}", label.name()))?;
        rows.push(vec![
            label.name().into(),
            fmt_f64(fit.eta0_db),
            fmt_f64(fit.decay_factor),
            fmt_f64(fit.rmse_db),
        ]);
        if curve_out.is_some() {
            for (x, y) in average_normalized_curve(&picked)? {
                if y.is_finite() {
                    curve_rows.push(vec![
                        label.name().into(),
                        fmt_f64(x),
                        fmt_f64(y),
                        fmt_f64(fit.predict_db(10f64.powf(x / 10.0))),
                    ]);
                }
            }
        }
    }
    write_csv(out, &["scenario", "eta0_db", "n_pdp", "rmse_db"], &rows)?;
    if let Some(path) = curve_out {
        write_csv(
            path,
            &["scenario", "log_delay_db", "mean_power_db", "fit_power_db"],
            &curve_rows,
        )?;
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<()> {
    let arch = Arch::from_name(&a.arch).with_context(|| {
        let names: Vec<&str> = Arch::ALL.iter().map(|a| a.name()).collect();
        format!(
            "unknown architecture `{}` (expected one of {})",
            a.arch,
            names.join(", ")
        )
    })?;
    let ds = load(&a.input)?;
    let train = ds.subset(Split::Train).records;
    if train.is_empty() {
        bail!("{} has no training records", a.input.display());
    }
    let floor = a
        .pdp_floor_db
        .unwrap_or_else(|| ChannelConfig::default().pdp_noise_floor_db());
    let normalizer = Normalizer::fit(&train, floor)?;
    let mut model = Model::new(arch, &a.preset, a.seed, normalizer)?;
    let mut recipe = TrainRecipe {
        seed: a.seed,
        ..TrainRecipe::default()
    };
    if let Some(e) = a.epochs {
        recipe.epochs = e;
    }
    if let Some(b) = a.batch {
        recipe.batch = b;
    }
    if let Some(lr) = a.lr {
        recipe.lr = lr;
    }
    let metrics = train_with_progress(&mut model, &train, &recipe, |m| {
        eprintln!(
            "epoch {:>3}  lr {:.5}  loss {:.4}  train acc {:.2}",
            m.epoch + 1,
            m.lr,
            m.loss,
            m.accuracy
        )
    })?;
    model.save(&a.out)?;
    if let Some(log) = &a.log {
        let rows: Vec<Vec<String>> = metrics
            .iter()
            .map(|m| {
                vec![
                    (m.epoch + 1).to_string(),
                    fmt_f64(m.lr),
                    fmt_f64(m.loss),
                    fmt_f64(m.accuracy),
                ]
            })
            .collect();
        write_csv(log, &["epoch", "lr", "loss", "train_accuracy"], &rows)?;
    }
    Ok(())
}

/// Accuracy rows `(condition, class, accuracy, average)` per condition.
fn eval_cmd(a: &EvalArgs) -> anyhow::Result<()> {
    let mut model = Model::load(&a.model)?;
    let ds = load(&a.input)?;
    let mut test = ds.subset(Split::Test).records;
    if test.is_empty() {
        test = ds.records;
    }
    let mut by_cond: BTreeMap<u8, Vec<Record>> = BTreeMap::new();
    for r in test {
        by_cond.entry(r.condition.code()).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (code, recs) in by_cond {
        let cond = Condition::from_code(code).expect("stored condition code");
        let table = evaluate(&mut model, &recs)?;
        for label in RainLabel::ALL {
            let acc = table.per_class[label.index()];
            if acc.is_nan() {
                continue;
            }
            rows.push(vec![
                cond.name().into(),
                label.name().into(),
                format!("{acc:.2}"),
                format!("{:.2}", table.average),
            ]);
        }
    }
    let header = ["condition", "class", "accuracy", "average"];
    match &a.out {
        Some(p) => write_csv(p, &header, &rows)?,
        None => {
            println!("{}", header.join(","));
            for r in rows {
                println!("{}", r.join(","));
            }
        }
    }
    Ok(())
}
