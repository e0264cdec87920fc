use std::fs;
use std::path::{Path, PathBuf};

use head_core::dataset::{generate_dataset, Dataset, Split, Splits};
use head_core::detector::{evaluate_detector, train_detector, ConfusionReport, DetectorModel};
use head_core::diffusion::make_schedule;
use head_core::runtime::{measure_campaign, measure_operating_point, predicted_campaign_saving, RunPolicy};
use head_core::scene::{Catalog, MixtureSpec};
use head_core::timesaver::{
    closed_form_saving, expected_cost_closed_form, monte_carlo_cost, sweep_probability, sweep_tlast, write_csv,
    AttemptDistribution, OperatingPoint, PolicyParams,
};
use head_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, PromptSet};
use crate::{report, CliError, Command};

type Result<T> = std::result::Result<T, CliError>;

pub const SNAPSHOT_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "detector.txt";

pub fn dispatch(command: Command) -> Result<()> {
    let common = match &command {
        Command::MakeDataset { common, .. }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Simulate { common, .. }
        | Command::SweepTlast { common, .. }
        | Command::SweepP { common, .. }
        | Command::Run { common, .. }
        | Command::Report { common, .. } => common.clone(),
    };
    if common.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if common.out.is_some() {
        config.out = common.out.clone();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", common.jobs)))?;
    pool.install(|| run(command, config))
}

fn run(command: Command, mut config: ExperimentConfig) -> Result<()> {
    match command {
        Command::MakeDataset {
            catalog,
            seeds_per_prompt,
            global_seed,
            faithfulness,
            steps,
            critical_steps,
            ..
        } => {
            let d = &mut config.dataset;
            set(&mut d.seeds_per_prompt, seeds_per_prompt);
            set(&mut d.global_seed, global_seed);
            set(&mut d.faithfulness, faithfulness);
            set(&mut d.steps, steps);
            set(&mut d.critical_steps, critical_steps);
            if catalog.is_some() {
                config.catalog = catalog;
            }
            make_dataset(&config)
        }
        Command::Train {
            dataset,
            variant,
            steps,
            seed,
            epochs,
            lr,
            l2,
            target_recall,
            ..
        } => {
            let d = &mut config.detector;
            set(&mut d.variant, variant);
            set(&mut d.steps, steps);
            set(&mut d.seed, seed);
            set(&mut d.epochs, epochs);
            set(&mut d.lr, lr);
            set(&mut d.l2, l2);
            if target_recall.is_some() {
                d.target_recall = target_recall;
            }
            train(&config, &dataset)
        }
        Command::Eval { dataset, model, split, .. } => {
            set(&mut config.detector.eval_split, split);
            eval(&config, &dataset, &model)
        }
        Command::Simulate {
            p,
            recall,
            tn_rate,
            f,
            objects,
            trials,
            seed,
            ..
        } => {
            set(&mut config.timesaver.completeness, p);
            set(&mut config.timesaver.trials, trials);
            set(&mut config.timesaver.seed, seed);
            simulate(&config, recall, tn_rate, f, objects)
        }
        Command::SweepTlast {
            dataset,
            models,
            split,
            p,
            trials,
            seed,
            ..
        } => {
            set(&mut config.detector.eval_split, split);
            set(&mut config.timesaver.completeness, p);
            set(&mut config.timesaver.trials, trials);
            set(&mut config.timesaver.seed, seed);
            sweep_t(&config, &dataset, &models)
        }
        Command::SweepP {
            dataset,
            models,
            split,
            p_grid,
            ..
        } => {
            set(&mut config.detector.eval_split, split);
            set(&mut config.timesaver.p_grid, p_grid);
            sweep_p(&config, &dataset, &models)
        }
        Command::Run {
            dataset,
            model,
            runs,
            root_seed,
            eval_seeds,
            prompts,
            max_restarts,
            ..
        } => {
            let r = &mut config.runtime;
            set(&mut r.runs_per_prompt, runs);
            set(&mut r.root_seed, root_seed);
            set(&mut r.eval_seeds_per_prompt, eval_seeds);
            set(&mut r.prompts, prompts);
            set(&mut r.max_restarts, max_restarts);
            live_run(&config, &dataset, &model)
        }
        Command::Report { input, .. } => render_report(&config, &input),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn out_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = config
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("an output directory is required (--out)".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    write_file(dir, name, text.as_bytes())
}

/// Effective configuration plus resolved inputs; the output directory itself
/// is left out so reruns into different directories compare equal.
fn write_snapshot(dir: &Path, command: &str, config: &ExperimentConfig, inputs: serde_json::Value) -> Result<()> {
    config.validate()?;
    let mut cfg = config.clone();
    cfg.out = None;
    write_json(dir, SNAPSHOT_FILE, &json!({ "command": command, "inputs": inputs, "config": cfg }))
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} is not a directory", path.display())))
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    require_dir(path)?;
    Ok(Dataset::load(path)?)
}

fn load_model(path: &Path) -> Result<DetectorModel> {
    let file = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| CliError::Usage(format!("cannot read model {}: {e}", file.display())))?;
    Ok(DetectorModel::from_text(&text)?)
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn make_dataset(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let catalog = match &config.catalog {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read catalog {}: {e}", path.display())))?;
            Catalog::parse(&text)?
        }
        None => Catalog::builtin(),
    };
    let out = out_dir(config)?;
    let dataset = generate_dataset(&config.dataset, &catalog)?;
    dataset.save(&out)?;
    let stats = dataset.stats();
    write_json(&out, "stats.json", &stats)?;
    write_snapshot(&out, "make-dataset", config, json!({}))?;
    println!("prompts {}", dataset.prompts.len());
    println!("samples {}", stats.samples);
    println!("complete_fraction {:.4}", stats.complete_fraction);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    variant: String,
    steps: &'a [usize],
    threshold: f64,
    train_loss: f64,
    splits: &'a Splits,
    validation: ConfusionReport,
    test: ConfusionReport,
}

fn train(config: &ExperimentConfig, dataset_dir: &Path) -> Result<()> {
    config.validate()?;
    let dataset = load_dataset(dataset_dir)?;
    let out = out_dir(config)?;
    let d = &config.detector;
    let trained = train_detector(&dataset, d.variant, &d.steps, &d.hyper())?;
    let model = &trained.model;
    let validation = evaluate_detector(model, &dataset, trained.splits.get(Split::Validation))?;
    let test = evaluate_detector(model, &dataset, trained.splits.get(Split::Test))?;
    write_file(&out, MODEL_FILE, model.to_text().as_bytes())?;
    write_json(
        &out,
        "train.json",
        &TrainSummary {
            variant: model.variant.to_string(),
            steps: &model.steps,
            threshold: model.threshold,
            train_loss: trained.train_loss,
            splits: &trained.splits,
            validation: validation.clone(),
            test,
        },
    )?;
    write_snapshot(&out, "train", config, json!({ "dataset": dataset_dir }))?;
    println!("variant {} t_last {}", model.variant, model.t_last());
    println!("threshold {:.4}", model.threshold);
    println!("validation recall {} tn_rate {}", fmt_rate(validation.recall()), fmt_rate(validation.tn_rate()));
    Ok(())
}

fn eval_prompts(config: &ExperimentConfig, dataset: &Dataset, set: PromptSet) -> Vec<usize> {
    let splits = Splits::by_prompt(dataset.prompts.len(), config.detector.seed);
    set.select(&splits, dataset.prompts.len())
}

fn eval(config: &ExperimentConfig, dataset_dir: &Path, model_path: &Path) -> Result<()> {
    config.validate()?;
    let dataset = load_dataset(dataset_dir)?;
    let model = load_model(model_path)?;
    let out = out_dir(config)?;
    let prompts = eval_prompts(config, &dataset, config.detector.eval_split);
    let report = evaluate_detector(&model, &dataset, &prompts)?;
    write_json(&out, "eval.json", &report)?;
    write_snapshot(&out, "eval", config, json!({ "dataset": dataset_dir, "model": model_path }))?;
    println!("t_last {}", model.t_last());
    println!("recall {}", fmt_rate(report.recall()));
    println!("tn_rate {}", fmt_rate(report.tn_rate()));
    Ok(())
}

fn broadcast(values: Vec<f64>, n: usize, what: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        len if len == n => Ok(values),
        len => Err(CliError::Usage(format!("{len} {what} values for {n} objects"))),
    }
}

#[derive(Serialize)]
struct SimulationSummary {
    p: f64,
    objects: usize,
    f: f64,
    recall: Vec<f64>,
    tn_rate: Vec<f64>,
    expected_cost_head: f64,
    expected_cost_baseline: f64,
    saving: f64,
    monte_carlo: Option<head_core::timesaver::SimReport>,
}

fn simulate(config: &ExperimentConfig, recall: Vec<f64>, tn_rate: Vec<f64>, f: f64, objects: Option<usize>) -> Result<()> {
    config.validate()?;
    let n = objects.unwrap_or_else(|| recall.len().max(tn_rate.len()));
    if n == 0 {
        return Err(CliError::Usage("--objects must be at least 1".into()));
    }
    let params = PolicyParams::new(f, broadcast(recall, n, "recall")?, broadcast(tn_rate, n, "tn-rate")?)?;
    let ts = &config.timesaver;
    let dist = AttemptDistribution::symmetric_completeness(ts.completeness, n)?;
    let e_head = expected_cost_closed_form(&dist, &params)?;
    let saving = closed_form_saving(&dist, &params)?;
    let mc = if ts.trials > 0 {
        Some(monte_carlo_cost(&dist, &params, ts.trials, ts.seed)?)
    } else {
        None
    };
    println!("expected_cost_head {e_head:.4}");
    println!("expected_cost_baseline {:.4}", dist.baseline_cost());
    println!("saving {saving:.4}");
    if let Some(mc) = &mc {
        let (lo, hi) = mc.saving_ci();
        println!("mc_saving {:.4} ci95 [{lo:.4}, {hi:.4}] trials {}", mc.relative_saving, mc.trials);
    }
    if config.out.is_some() {
        let out = out_dir(config)?;
        let summary = SimulationSummary {
            p: ts.completeness,
            objects: n,
            f,
            recall: params.recall.clone(),
            tn_rate: params.tn_rate.clone(),
            expected_cost_head: e_head,
            expected_cost_baseline: dist.baseline_cost(),
            saving,
            monte_carlo: mc,
        };
        write_json(&out, "simulation.json", &summary)?;
        write_snapshot(&out, "simulate", config, json!({ "recall": params.recall, "tn_rate": params.tn_rate, "f": f, "objects": n }))?;
    }
    Ok(())
}

/// Pooled operating point of each model on the configured evaluation prompts.
fn operating_points(config: &ExperimentConfig, dataset: &Dataset, models: &[PathBuf]) -> Result<Vec<OperatingPoint>> {
    let prompts = eval_prompts(config, dataset, config.detector.eval_split);
    let objects = dataset.prompts.iter().map(|p| p.targets.len()).max().unwrap_or(1);
    let mut points: Vec<OperatingPoint> = Vec::new();
    for path in models {
        let model = load_model(path)?;
        let report = evaluate_detector(&model, dataset, &prompts)?;
        let (Some(r), Some(tn)) = (report.recall(), report.tn_rate()) else {
            return Err(Error::DegenerateLabels.into());
        };
        if points.iter().any(|p| p.t_last == model.t_last()) {
            return Err(CliError::Usage(format!("two models share t_last = {}", model.t_last())));
        }
        points.push(OperatingPoint::symmetric(model.t_last(), r, tn, objects));
    }
    points.sort_by_key(|p| p.t_last);
    Ok(points)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    Ok(buf)
}

fn sweep_t(config: &ExperimentConfig, dataset_dir: &Path, models: &[PathBuf]) -> Result<()> {
    config.validate()?;
    let dataset = load_dataset(dataset_dir)?;
    let points = operating_points(config, &dataset, models)?;
    let out = out_dir(config)?;
    let ts = &config.timesaver;
    let objects = points.first().map_or(1, |p| p.recall.len());
    let dist = AttemptDistribution::symmetric_completeness(ts.completeness, objects)?;
    let rows = sweep_tlast(&points, &dist, dataset.config.steps, ts.trials.max(1), ts.seed)?;
    let bytes = csv_bytes(&rows)?;
    write_file(&out, "sweep_tlast.csv", &bytes)?;
    write_snapshot(&out, "sweep-tlast", config, json!({ "dataset": dataset_dir, "models": models }))?;
    print!("{}", report::render_csv("sweep_tlast.csv", &bytes)?);
    Ok(())
}

fn sweep_p(config: &ExperimentConfig, dataset_dir: &Path, models: &[PathBuf]) -> Result<()> {
    config.validate()?;
    let dataset = load_dataset(dataset_dir)?;
    let points = operating_points(config, &dataset, models)?;
    let out = out_dir(config)?;
    let rows = sweep_probability(&points, &config.timesaver.p_grid, dataset.config.steps)?;
    let bytes = csv_bytes(&rows)?;
    write_file(&out, "sweep_p.csv", &bytes)?;
    write_snapshot(&out, "sweep-p", config, json!({ "dataset": dataset_dir, "models": models }))?;
    print!("{}", report::render_csv("sweep_p.csv", &bytes)?);
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    t_last: usize,
    prompts: Vec<usize>,
    runs: usize,
    measured_recall: Vec<f64>,
    measured_tn_rate: Vec<f64>,
    predicted_saving: f64,
    empirical_saving: f64,
    ci_lo: f64,
    ci_hi: f64,
}

fn live_run(config: &ExperimentConfig, dataset_dir: &Path, model_path: &Path) -> Result<()> {
    config.validate()?;
    let dataset = load_dataset(dataset_dir)?;
    let model = load_model(model_path)?;
    let out = out_dir(config)?;
    let rt = &config.runtime;
    let schedule = make_schedule(dataset.config.steps)?;
    let ids = eval_prompts(config, &dataset, rt.prompts);
    let prompts: Vec<(usize, MixtureSpec)> = ids
        .iter()
        .map(|&p| Ok((p, dataset.mixture(p)?)))
        .collect::<head_core::Result<_>>()?;
    let threshold = dataset.config.label_threshold;
    let (point, _) = measure_operating_point(&model, &prompts, rt.eval_seeds_per_prompt, rt.eval_seed, &schedule, threshold)?;
    let predicted = predicted_campaign_saving(&prompts, &point, schedule.steps())?;
    let mut baseline = RunPolicy::baseline(threshold);
    let mut head = RunPolicy::head(model.clone(), threshold);
    baseline.max_restarts = rt.max_restarts;
    head.max_restarts = rt.max_restarts;
    let report = measure_campaign(&prompts, &baseline, &head, rt.runs_per_prompt, rt.root_seed, &schedule, rt.bootstrap)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_file(&out, "campaign.csv", &csv)?;
    write_json(
        &out,
        "run.json",
        &RunSummary {
            t_last: model.t_last(),
            prompts: ids,
            runs: report.runs(),
            measured_recall: point.recall.clone(),
            measured_tn_rate: point.tn_rate.clone(),
            predicted_saving: predicted,
            empirical_saving: report.pooled_saving,
            ci_lo: report.pooled_ci.0,
            ci_hi: report.pooled_ci.1,
        },
    )?;
    write_snapshot(&out, "run", config, json!({ "dataset": dataset_dir, "model": model_path }))?;
    println!("runs {}", report.runs());
    println!("predicted_saving {predicted:.4}");
    println!(
        "empirical_saving {:.4} ci95 [{:.4}, {:.4}]",
        report.pooled_saving, report.pooled_ci.0, report.pooled_ci.1
    );
    Ok(())
}

fn render_report(config: &ExperimentConfig, inputs: &[PathBuf]) -> Result<()> {
    let mut text = String::new();
    for dir in inputs {
        require_dir(dir)?;
        for name in report::KNOWN_CSVS {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            text.push_str(&format!("== {} ==\n", path.display()));
            text.push_str(&report::render_csv(name, &bytes)?);
            text.push('\n');
        }
    }
    if text.is_empty() {
        return Err(CliError::Usage("no sweep or campaign CSVs found in the inputs".into()));
    }
    print!("{text}");
    if config.out.is_some() {
        let out = out_dir(config)?;
        write_file(&out, "report.txt", text.as_bytes())?;
        write_snapshot(&out, "report", config, json!({ "input": inputs }))?;
    }
    Ok(())
}
