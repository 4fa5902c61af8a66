//! Subcommand bodies. Each resolves its config, does the work, writes its
//! outputs and finishes with a manifest in the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use serde::{Deserialize, Serialize};

use lppls_core::bench::{self, BenchConfig, Models};
use lppls_core::calibration::{CalibrationResult, Method};
use lppls_core::forecast::{self, format_calendar, parse_calendar, ForecastConfig, IngestOptions, RawSeries};
use lppls_core::lm::{lm_fit, LmConfig};
use lppls_core::mlnn::{mlnn_fit, MlnnConfig};
use lppls_core::model::{eval_lppls, Affine, Series};
use lppls_core::noise::{gen_dataset, Dataset, NoiseKind, ScenarioSpec, WINDOW_LEN};
use lppls_core::plnn::{plnn_infer, plnn_train, sweep, PlnnModel, TrainConfig};

use crate::config::{self, checked, usage};
use crate::manifest::Recorder;

pub struct Context {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub print_config: bool,
}

impl Context {
    /// Load the config; `Ok(None)` means it was printed and the run should stop.
    fn resolve<T>(&self, subcommand: &str, adjust: impl FnOnce(&mut T)) -> anyhow::Result<Option<T>>
    where
        T: Serialize + serde::de::DeserializeOwned + Default,
    {
        let mut cfg: T = config::load(self.config.as_deref(), subcommand)?;
        adjust(&mut cfg);
        if self.print_config {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            return Ok(None);
        }
        Ok(Some(cfg))
    }
}

fn out_dir(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub spec: ScenarioSpec,
    pub count: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            spec: ScenarioSpec::default(),
            count: 10_000,
        }
    }
}

pub fn generate(
    ctx: &Context,
    kind: Option<NoiseKind>,
    count: Option<usize>,
    n: Option<usize>,
    csv: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let Some(cfg) = ctx.resolve("generate", |c: &mut GenerateConfig| {
        if let Some(k) = kind {
            c.spec.noise_kind = k;
        }
        if let Some(k) = count {
            c.count = k;
        }
        if let Some(n) = n {
            c.spec.n = n;
        }
        if let Some(s) = ctx.seed {
            c.spec.seed = s;
        }
    })?
    else {
        return Ok(());
    };
    checked(cfg.spec.validate().map_err(|e| e.within("/spec")))?;
    out_dir(out)?;
    let rec = Recorder::new("generate", &cfg, ctx.seed)?;
    let data = gen_dataset(&cfg.spec, cfg.count)?;
    data.save(&out.join("dataset.bin"))?;
    if csv {
        data.write_csv(std::fs::File::create(out.join("dataset.csv"))?)?;
    }
    rec.finish(out)?;
    println!(
        "wrote {} {} series of {} points to {} (sha256 {})",
        data.len(),
        cfg.spec.noise_kind,
        data.width(),
        out.display(),
        data.content_hash()?
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub lm: LmConfig,
    pub mlnn: MlnnConfig,
    /// Points the window is resampled to.
    pub n: usize,
    pub ingest: IngestOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            mlnn: MlnnConfig::default(),
            n: WINDOW_LEN,
            ingest: IngestOptions::default(),
        }
    }
}

fn calendar_arg(raw: &RawSeries, arg: &str, flag: &str) -> anyhow::Result<f64> {
    let (v, kind) =
        parse_calendar(arg).ok_or_else(|| usage(format!("{flag}: cannot parse {arg:?} as a date or index")))?;
    if kind != raw.kind {
        return Err(usage(format!(
            "{flag}: {arg:?} does not match the date format of the input"
        )));
    }
    Ok(v)
}

/// Ingest the CSV and resample the requested window to `n` points.
fn load_window(series: &crate::SeriesArgs, ingest: &IngestOptions, n: usize) -> anyhow::Result<(RawSeries, Series)> {
    let opts = IngestOptions {
        log_values: ingest.log_values || series.log_values,
        ..ingest.clone()
    };
    let raw =
        forecast::ingest_csv(&series.input, &opts).with_context(|| format!("reading {}", series.input.display()))?;
    let t1 = match &series.t1 {
        Some(s) => calendar_arg(&raw, s, "--t1")?,
        None => raw.dates[0],
    };
    let t2 = match &series.t2 {
        Some(s) => calendar_arg(&raw, s, "--t2")?,
        None => raw.dates[raw.dates.len() - 1],
    };
    let s = forecast::resample(&raw, t1, t2, n)?;
    Ok((raw, s))
}

#[derive(Serialize)]
struct FitReport<'a> {
    method: Method,
    t1: String,
    t2: String,
    n: usize,
    tc_calendar: f64,
    tc_date: String,
    time_map: Affine,
    value_map: Affine,
    result: &'a CalibrationResult,
}

#[derive(Serialize)]
struct CurveRow {
    time: f64,
    observed: f64,
    fitted: f64,
}

fn write_fit(out: &Path, raw: &RawSeries, series: &Series, r: &CalibrationResult) -> anyhow::Result<()> {
    let tm = series.time_map;
    let tc = r.calendar_tc(&tm);
    write_json(
        &out.join("fit.json"),
        &FitReport {
            method: r.method,
            t1: format_calendar(tm.apply(0.0), raw.kind),
            t2: format_calendar(tm.apply(1.0), raw.kind),
            n: series.len(),
            tc_calendar: tc,
            tc_date: format_calendar(tc, raw.kind),
            time_map: tm,
            value_map: series.value_map,
            result: r,
        },
    )?;
    let mut w = csv::Writer::from_path(out.join("fit.csv"))?;
    let observed = series.raw_values();
    for (i, t) in series.times().iter().enumerate() {
        w.serialize(CurveRow {
            time: tm.apply(*t),
            observed: observed[i],
            fitted: series.value_map.apply(eval_lppls(&r.params, *t)?),
        })?;
    }
    w.flush()?;
    println!(
        "{}: tc = {:.6} (calendar {}), m = {:.4}, omega = {:.4}, mse = {:.3e}, converged = {}",
        r.method,
        r.params.tc,
        format_calendar(tc, raw.kind),
        r.params.m,
        r.params.omega,
        r.final_mse,
        r.converged
    );
    Ok(())
}

pub fn fit(ctx: &Context, subcommand: &str, series: &crate::SeriesArgs, out: &Path) -> anyhow::Result<()> {
    let Some(cfg) = ctx.resolve(subcommand, |c: &mut FitConfig| {
        if let Some(s) = ctx.seed {
            c.lm.seed = s;
            c.mlnn.seed = s;
        }
    })?
    else {
        return Ok(());
    };
    checked(cfg.lm.validate().map_err(|e| e.within("/lm")))?;
    checked(cfg.mlnn.validate().map_err(|e| e.within("/mlnn")))?;
    let (raw, s) = load_window(series, &cfg.ingest, cfg.n)?;
    out_dir(out)?;
    let mut rec = Recorder::new(subcommand, &cfg, ctx.seed)?;
    rec.input(&series.input);
    let r = if subcommand == "fit-lm" {
        lm_fit(&s, &cfg.lm)?
    } else {
        mlnn_fit(&s, &cfg.mlnn)?
    };
    write_fit(out, &raw, &s, &r)?;
    rec.finish(out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlnnConfig {
    pub train: TrainConfig,
    /// Noise of the generated datasets (ignored with `--train`).
    pub kind: NoiseKind,
    pub count: usize,
    pub val_count: usize,
    /// Seed of the generated training set; validation uses `data_seed + 1`.
    pub data_seed: u64,
    /// Optional hyperparameter grid. When nonempty every entry is trained
    /// and the one with the lowest final validation loss is kept.
    pub sweep: Vec<TrainConfig>,
}

impl Default for TrainPlnnConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            kind: NoiseKind::White,
            count: 10_000,
            val_count: 2_000,
            data_seed: 0,
            sweep: Vec::new(),
        }
    }
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
}

#[derive(Serialize)]
struct SweepRow {
    index: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    hidden: String,
    val_loss: f64,
}

pub fn model_file(kind: NoiseKind) -> String {
    format!("plnn_{kind}.bin")
}

pub fn train_plnn(
    ctx: &Context,
    kind: Option<NoiseKind>,
    train: Option<&Path>,
    val: Option<&Path>,
    count: Option<usize>,
    epochs: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    let Some(mut cfg) = ctx.resolve("train-plnn", |c: &mut TrainPlnnConfig| {
        if let Some(k) = kind {
            c.kind = k;
        }
        if let Some(n) = count {
            c.count = n;
        }
        if let Some(e) = epochs {
            c.train.epochs = e;
        }
        if let Some(s) = ctx.seed {
            c.train.seed = s;
            c.data_seed = s;
        }
    })?
    else {
        return Ok(());
    };
    checked(cfg.train.validate().map_err(|e| e.within("/train")))?;
    for (i, c) in cfg.sweep.iter().enumerate() {
        checked(c.validate().map_err(|e| e.within(&format!("/sweep/{i}"))))?;
    }
    if val.is_some() && train.is_none() {
        bail!(usage("--val requires --train"));
    }
    out_dir(out)?;
    let mut rec = Recorder::new("train-plnn", &cfg, ctx.seed)?;
    let spec = |seed| ScenarioSpec {
        seed,
        ..ScenarioSpec::with_kind(cfg.kind)
    };
    let (train_set, val_set) = match train {
        Some(p) => {
            rec.input(p);
            let t = Dataset::load(p).with_context(|| format!("loading {}", p.display()))?;
            let v = match val {
                Some(q) => {
                    rec.input(q);
                    Dataset::load(q).with_context(|| format!("loading {}", q.display()))?
                }
                None => gen_dataset(&spec(cfg.data_seed.wrapping_add(1)), 0)?,
            };
            (t, v)
        }
        None => (
            gen_dataset(&spec(cfg.data_seed), cfg.count)?,
            gen_dataset(&spec(cfg.data_seed.wrapping_add(1)), cfg.val_count)?,
        ),
    };
    if !cfg.sweep.is_empty() {
        let results = sweep(&train_set, &val_set, &cfg.sweep)?;
        let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
        for (i, (c, v)) in results.iter().enumerate() {
            w.serialize(SweepRow {
                index: i,
                epochs: c.epochs,
                batch_size: c.batch_size,
                learning_rate: c.learning_rate,
                hidden: c.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("-"),
                val_loss: *v,
            })?;
        }
        w.flush()?;
        let (best, _) = results
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty sweep");
        cfg.train = best.clone();
    }
    let trained = plnn_train(&train_set, &val_set, &cfg.train)?;
    let kind = trained.model.provenance.noise_kind;
    trained.model.save(&out.join(model_file(kind)))?;
    trained.best_val.save(&out.join(format!("plnn_{kind}_best_val.bin")))?;
    let p = &trained.model.provenance;
    let mut w = csv::Writer::from_path(out.join("loss.csv"))?;
    for (e, (t, v)) in p.train_loss.iter().zip(&p.val_loss).enumerate() {
        w.serialize(LossRow {
            epoch: e + 1,
            train_loss: *t,
            val_loss: *v,
        })?;
    }
    w.flush()?;
    rec.config = serde_json::to_value(&cfg)?;
    rec.finish(out)?;
    println!(
        "trained {} on {} examples: validation loss {:.4} -> {:.4} (best epoch {})",
        trained.model.method(),
        p.train_count,
        p.val_loss[0],
        p.val_loss[p.val_loss.len() - 1],
        trained.best_val.provenance.epoch
    );
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub ingest: IngestOptions,
}

pub fn infer(ctx: &Context, model: &Path, series: &crate::SeriesArgs, out: &Path) -> anyhow::Result<()> {
    let Some(cfg) = ctx.resolve("infer", |_: &mut InferConfig| {})? else {
        return Ok(());
    };
    let m = PlnnModel::load(model).with_context(|| format!("loading {}", model.display()))?;
    let (raw, s) = load_window(series, &cfg.ingest, m.net.inputs())?;
    out_dir(out)?;
    let mut rec = Recorder::new("infer", &cfg, ctx.seed)?;
    rec.input(model);
    rec.input(&series.input);
    let r = plnn_infer(&m, &s)?;
    write_fit(out, &raw, &s, &r)?;
    rec.finish(out)?;
    Ok(())
}

/// Load every `plnn_<kind>.bin` present in `dir`.
fn load_models(dir: &Path, rec: &mut Recorder) -> anyhow::Result<Models> {
    let mut models = BTreeMap::new();
    for kind in NoiseKind::ALL {
        let path = dir.join(model_file(kind));
        if path.is_file() {
            let m = PlnnModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
            if m.provenance.noise_kind != kind {
                bail!(
                    "{} holds a model trained on {} noise",
                    path.display(),
                    m.provenance.noise_kind
                );
            }
            rec.input(&path);
            models.insert(kind, m);
        }
    }
    if models.is_empty() {
        bail!(usage(format!("no plnn_<kind>.bin models in {}", dir.display())));
    }
    Ok(models)
}

fn check_models(methods: &[Method], models: &Models) -> anyhow::Result<()> {
    for m in methods {
        if let Some(k) = m.plnn_kind() {
            if !models.contains_key(&k) {
                bail!(usage(format!("method {m} needs {} (pass --models)", model_file(k))));
            }
        }
    }
    Ok(())
}

pub fn bench(
    ctx: &Context,
    models_dir: Option<&Path>,
    scenarios: Option<usize>,
    methods: Option<Vec<Method>>,
    regimes: Option<Vec<NoiseKind>>,
    svg: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let explicit = methods.is_some() || ctx.config.is_some();
    let Some(mut cfg) = ctx.resolve("bench", |c: &mut BenchConfig| {
        if let Some(n) = scenarios {
            c.scenarios_per_regime = n;
        }
        if let Some(m) = methods {
            c.methods = m;
        }
        if let Some(r) = regimes {
            c.regimes = r;
        }
        if let Some(s) = ctx.seed {
            c.seed = s;
            c.lm.seed = s;
            c.mlnn.seed = s;
        }
    })?
    else {
        return Ok(());
    };
    out_dir(out)?;
    let mut rec = Recorder::new("bench", &cfg, ctx.seed)?;
    let models = match models_dir {
        Some(d) => load_models(d, &mut rec)?,
        None => Models::new(),
    };
    if !explicit {
        // default method list: only the P-LNN variants that have a model
        cfg.methods
            .retain(|m| m.plnn_kind().is_none_or(|k| models.contains_key(&k)));
    }
    checked(cfg.validate())?;
    check_models(&cfg.methods, &models)?;
    rec.config = serde_json::to_value(&cfg)?;
    let records = bench::run_benchmark(&cfg, &models)?;
    bench::write_outputs(&records, out, svg)?;
    rec.finish(out)?;
    for t in bench::timing_summary(&records) {
        println!(
            "{:<12} mean {:>10.4} ms  std {:>10.4} ms  ({} fits)",
            t.method.as_str(),
            t.mean * 1e3,
            t.std * 1e3,
            t.count
        );
    }
    for d in bench::dominance_report(&records)
        .iter()
        .filter(|d| d.metric == bench::Metric::Tc)
    {
        println!(
            "{} |dtc|, {} vs {}: {:?} (margins {:.3} / {:.3})",
            d.regime, d.a, d.b, d.verdict, d.margin_a, d.margin_b
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastCmdConfig {
    pub forecast: ForecastConfig,
    pub ingest: IngestOptions,
}

pub struct ForecastArgs {
    pub input: PathBuf,
    pub t2: String,
    pub windows: Option<usize>,
    pub models: Option<PathBuf>,
    pub methods: Option<Vec<Method>>,
    pub log_values: bool,
    pub annotate: Vec<String>,
    pub svg: bool,
}

pub fn forecast(ctx: &Context, args: ForecastArgs, out: &Path) -> anyhow::Result<()> {
    let Some(cfg) = ctx.resolve("forecast", |c: &mut ForecastCmdConfig| {
        if let Some(w) = args.windows {
            c.forecast.plan.windows = w;
        }
        if let Some(m) = args.methods.clone() {
            c.forecast.methods = m;
        }
        if args.log_values {
            c.ingest.log_values = true;
        }
        if let Some(s) = ctx.seed {
            c.forecast.lm.seed = s;
            c.forecast.mlnn.seed = s;
        }
    })?
    else {
        return Ok(());
    };
    checked(cfg.forecast.validate())?;
    let raw =
        forecast::ingest_csv(&args.input, &cfg.ingest).with_context(|| format!("reading {}", args.input.display()))?;
    let t2 = calendar_arg(&raw, &args.t2, "--t2")?;
    let bands = args
        .annotate
        .iter()
        .map(|a| {
            let (x, y) = a
                .split_once(',')
                .ok_or_else(|| usage(format!("--annotate expects start,end, got {a:?}")))?;
            Ok((
                calendar_arg(&raw, x, "--annotate")?,
                calendar_arg(&raw, y, "--annotate")?,
            ))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    out_dir(out)?;
    let mut rec = Recorder::new("forecast", &cfg, ctx.seed)?;
    rec.input(&args.input);
    let models = match &args.models {
        Some(d) => load_models(d, &mut rec)?,
        None => Models::new(),
    };
    check_models(&cfg.forecast.methods, &models)?;
    let set = forecast::forecast(&raw, t2, &cfg.forecast, &models).map_err(|e| match e {
        lppls_core::LpplsError::InvalidConfig { .. } => usage(e.to_string()),
        e => e.into(),
    })?;
    forecast::write_outputs(&set, &raw, out, args.svg, &bands)?;
    rec.finish(out)?;
    for s in &set.summaries {
        let med = s
            .median_tc
            .map_or_else(|| "n/a".to_string(), |v| format_calendar(v, raw.kind));
        let shape = match &s.density {
            forecast::Density::Atoms { values, .. } => format!("{} atom(s)", values.len()),
            forecast::Density::Kde { bandwidth, .. } => format!("KDE, bandwidth {bandwidth:.3e}"),
            forecast::Density::Empty => "empty".into(),
        };
        println!(
            "{}: median tc {med}, {} valid, {} failed, density {shape}",
            s.method, s.valid, s.failed
        );
    }
    for r in set.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "window {} ({}): {}",
            r.window,
            r.method,
            r.error.as_deref().unwrap_or_default()
        );
    }
    Ok(())
}
