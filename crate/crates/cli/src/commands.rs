use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lcdr_core::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use lcdr_core::dataio::{self, read_canonical, write_canonical, IngestOptions, SourceFormat};
use lcdr_core::metrics::{evaluate, MetricPair};
use lcdr_core::pipeline::{run_seed, PipelineConfig};
use lcdr_core::recommender::write_scores_tsv;
use lcdr_core::synthlab::{self, SynthConfig};
use lcdr_core::{Error, InteractionDataset, Method, MetricsReport, RunConfig, SeedMetrics, Split};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::overrides::{self, parse_seeds};
use crate::rundir::{self, prepare, write, write_json};
use crate::{Cli, CliError, Command};

/// Stored next to the snapshot so `eval` can rebuild the exact splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunMeta {
    config_hash: String,
    method: Method,
    dataset: String,
    data_path: PathBuf,
    seeds: Vec<u64>,
    /// Per-seed re-split fraction of the unbiased records, if used.
    resplit: Option<f64>,
}

const RUN_META: &str = "run.json";

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest { format, input, threshold, val_fraction, split_seed, num_users, num_items } => {
            let opts = IngestOptions { num_users: *num_users, num_items: *num_items };
            ingest(cli, format, input, *threshold, *val_fraction, *split_seed, opts)
        }
        Command::Train { data, method, lambda, resplit } => {
            let mut cfg = load_config(cli)?;
            if let Some(m) = method {
                cfg.run.method = m.parse().map_err(|e: Error| CliError::Input(e.to_string()))?;
            }
            if let Some(l) = lambda {
                overrides::set(&mut cfg, "train", "lambda", *l)?;
            }
            cfg.validate()?;
            let out = require_out(cli)?;
            let report = train(&cfg, data.as_deref(), *resplit, &out, cli.force)?;
            print!("{}", summary_line(&report, &cfg.hash()));
            Ok(())
        }
        Command::Eval { run, data, split } => eval(run, data.as_deref(), split),
        Command::Sweep { data, param, values, resplit } => sweep(cli, data.as_deref(), param, values, *resplit),
        Command::Report { runs, baseline } => report(cli, runs, baseline.as_deref()),
        Command::Simulate { synth_config, val_fraction } => simulate(cli, synth_config.as_deref(), *val_fraction),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = overrides::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.run.seeds = vec![s];
    }
    if let Some(spec) = &cli.seeds {
        cfg.run.seeds = parse_seeds(spec)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(cli: &Cli) -> Result<PathBuf, CliError> {
    cli.out.clone().ok_or_else(|| CliError::Input("--out is required for this command".into()))
}

fn ingest(
    cli: &Cli,
    format: &str,
    input: &Path,
    threshold: f64,
    val_fraction: f64,
    split_seed: u64,
    opts: IngestOptions,
) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let out = require_out(cli)?;
    rundir::prepare_flat(&out, cli.force)?;
    let fmt: SourceFormat = format.parse()?;
    let ingested = dataio::ingest_with(fmt, input, opts)?;
    let mut dataset = dataio::binarize(ingested.dataset, threshold);
    let already_split = dataset.records.iter().all(|r| r.split.is_some());
    if !already_split {
        dataset = dataio::split(dataset, val_fraction, split_seed)?;
    }
    for w in &ingested.report.warnings {
        log::warn!("{w}");
    }
    let mut prov = BTreeMap::new();
    prov.insert("source_format".into(), json!(format));
    prov.insert("input".into(), json!(input.display().to_string()));
    prov.insert("rating_threshold".into(), json!(threshold));
    prov.insert("val_fraction".into(), json!(val_fraction));
    prov.insert("split_seed".into(), json!(split_seed));
    prov.insert("config_hash".into(), json!(cfg.hash()));
    let manifest = write_canonical(&out, &dataset, Some(&ingested.report), prov)?;
    println!(
        "{} users, {} items, {} biased, {} unbiased (val {}, test {})",
        manifest.num_users,
        manifest.num_items,
        manifest.counts.biased,
        manifest.counts.unbiased,
        manifest.counts.val,
        manifest.counts.test
    );
    Ok(())
}

fn data_path(cfg: &RunConfig, flag: Option<&Path>) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data.path.clone())
        .ok_or_else(|| CliError::Input("no dataset: pass --data or set [data] path".into()))
}

fn dataset_for_seed(base: &InteractionDataset, resplit: Option<f64>, seed: u64) -> Result<InteractionDataset, CliError> {
    match resplit {
        Some(f) => Ok(dataio::split(base.clone(), f, seed)?),
        None => Ok(base.clone()),
    }
}

/// Trains every configured seed into `out` and returns the aggregated report.
fn train(
    cfg: &RunConfig,
    data: Option<&Path>,
    resplit: Option<f64>,
    out: &Path,
    force: bool,
) -> Result<MetricsReport, CliError> {
    let path = data_path(cfg, data)?;
    let base = read_canonical(&path)?;
    prepare(out, force)?;
    let hash = cfg.hash();
    write(&out.join(rundir::SNAPSHOT), cfg.to_toml())?;
    let meta = RunMeta {
        config_hash: hash.clone(),
        method: cfg.run.method,
        dataset: cfg.data.name.clone(),
        data_path: path,
        seeds: cfg.run.seeds.clone(),
        resplit,
    };
    write_json(&out.join(RUN_META), &meta)?;

    let pipe = PipelineConfig::from(cfg);
    let mut per_seed = Vec::new();
    for &seed in &cfg.run.seeds {
        let dataset = dataset_for_seed(&base, resplit, seed)?;
        let outcome = match run_seed(&dataset, cfg.run.method, &pipe, seed) {
            Ok(o) => o,
            Err(Error::Numerical(msg)) => {
                let text = format!("method: {}\nseed: {seed}\nconfig_hash: {hash}\n{msg}\n", cfg.run.method);
                write(&out.join(rundir::DIAGNOSTICS), text)?;
                return Err(CliError::Numerical(format!(
                    "seed {seed} aborted: {msg} (see {})",
                    out.join(rundir::DIAGNOSTICS).display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash: hash.clone(),
            method: outcome.method,
            seed,
            ivae: outcome.ivae.clone(),
            lcvae: outcome.lcvae.clone(),
            recommender: outcome.recommender.clone(),
        }
        .save(&rundir::checkpoint(out, seed))?;
        write(&rundir::stage_log(out, seed, 1), rundir::jsonl(&outcome.stage_one_log)?)?;
        write(&rundir::stage_log(out, seed, 2), rundir::jsonl(&outcome.rec_log.epochs)?)?;
        write_json(
            &rundir::seed_metrics(out, seed),
            &json!({
                "config_hash": hash,
                "method": outcome.method,
                "seed": seed,
                "val": outcome.val,
                "test": outcome.test,
                "chosen_lr": outcome.chosen.0,
                "chosen_weight_decay": outcome.chosen.1,
                "best_epoch": outcome.rec_log.best_epoch,
                "stage_one_ms": outcome.stage_one_ms,
                "stage_two_ms": outcome.stage_two_ms,
            }),
        )?;
        per_seed.push(outcome.seed_metrics());
    }
    let report = MetricsReport::from_seeds(cfg.run.method.as_str(), &cfg.data.name, cfg.run.k, per_seed)?;
    write_report(out, &report, &hash)?;
    Ok(report)
}

fn write_report(out: &Path, report: &MetricsReport, hash: &str) -> Result<(), CliError> {
    let mut value = serde_json::to_value(report).map_err(|e| CliError::Input(e.to_string()))?;
    value["config_hash"] = json!(hash);
    write_json(&out.join(rundir::REPORT_JSON), &value)?;
    write(&out.join(rundir::REPORT_CSV), report.to_csv())
}

fn summary_line(r: &MetricsReport, hash: &str) -> String {
    format!(
        "{} on {}: NDCG@{k} {:.4} ± {:.4}, Recall@{k} {:.4} ± {:.4} over {} seeds [config {hash}]\n",
        r.method,
        r.dataset,
        r.mean.ndcg,
        r.std.ndcg,
        r.mean.recall,
        r.std.recall,
        r.per_seed.len(),
        k = r.k
    )
}

fn eval(run: &Path, data: Option<&Path>, split: &str) -> Result<(), CliError> {
    let split = match split {
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(CliError::Input(format!("split must be val or test, got '{other}'"))),
    };
    let cfg = RunConfig::from_toml(&rundir::read(&run.join(rundir::SNAPSHOT))?)?;
    let meta: RunMeta = serde_json::from_str(&rundir::read(&run.join(RUN_META))?)
        .map_err(|e| CliError::Input(format!("{}: {e}", run.join(RUN_META).display())))?;
    let path = data.map(Path::to_path_buf).unwrap_or(meta.data_path.clone());
    let base = read_canonical(&path)?;
    let scores_dir = run.join("scores");
    rundir::mkdir(&scores_dir)?;
    let mut per_seed = Vec::new();
    for &seed in &meta.seeds {
        let ck = Checkpoint::load(&rundir::checkpoint(run, seed))?;
        if ck.config_hash != meta.config_hash {
            return Err(CliError::Input(format!(
                "checkpoint for seed {seed} has config {} but the run has {}",
                ck.config_hash, meta.config_hash
            )));
        }
        let dataset = dataset_for_seed(&base, meta.resplit, seed)?;
        let rec = &ck.recommender;
        let r = evaluate(|u, i| rec.score(u, i).unwrap_or(f64::NEG_INFINITY), &dataset, split, cfg.run.k)?;
        write_scores_tsv(rec, &dataset, split, &scores_dir.join(format!("seed_{seed}.{}.tsv", split.as_str())))?;
        per_seed.push(SeedMetrics {
            seed,
            ndcg_at_k: r.ndcg,
            recall_at_k: r.recall,
            users_evaluated: r.users_evaluated,
            users_skipped: r.users_skipped,
        });
    }
    let report = MetricsReport::from_seeds(meta.method.as_str(), &meta.dataset, cfg.run.k, per_seed)?;
    print!("{}", report.to_csv());
    print!("{}", summary_line(&report, &meta.config_hash));
    Ok(())
}

fn sweep(cli: &Cli, data: Option<&Path>, param: &str, values: &[f64], resplit: Option<f64>) -> Result<(), CliError> {
    if param != "lambda" {
        return Err(CliError::Input(format!("unsupported sweep parameter '{param}' (only lambda)")));
    }
    let base = load_config(cli)?;
    let out = require_out(cli)?;
    rundir::prepare_flat(&out, cli.force)?;
    let mut csv = String::from("param,value,ndcg_mean,ndcg_std,recall_mean,recall_std,config_hash\n");
    for &v in values {
        let mut cfg = base.clone();
        overrides::set(&mut cfg, "train", "lambda", v)?;
        cfg.validate()?;
        let report = train(&cfg, data, resplit, &out.join(format!("lambda_{v}")), cli.force)?;
        csv.push_str(&format!(
            "{param},{v},{},{},{},{},{}\n",
            report.mean.ndcg,
            report.std.ndcg,
            report.mean.recall,
            report.std.recall,
            cfg.hash()
        ));
    }
    write(&out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn load_report(run: &Path) -> Result<MetricsReport, CliError> {
    let path = run.join(rundir::REPORT_JSON);
    serde_json::from_str(&rundir::read(&path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn report(cli: &Cli, runs: &[PathBuf], baseline: Option<&Path>) -> Result<(), CliError> {
    let base = baseline.map(load_report).transpose()?;
    let mut rows = Vec::new();
    for run in runs {
        let mut r = load_report(run)?;
        if let (Some(b), Some(bpath)) = (&base, baseline) {
            if r.seeds() != b.seeds() {
                return Err(CliError::Input(format!(
                    "seed sets differ: {} has {:?}, baseline {} has {:?}",
                    run.display(),
                    r.seeds(),
                    bpath.display(),
                    b.seeds()
                )));
            }
            if run.as_path() != bpath {
                r.compare_to(b)?;
            }
        }
        rows.push((run.display().to_string(), r));
    }
    let with_p = base.is_some();
    let (md, csv) = render_table(&rows, with_p);
    print!("{md}");
    if let Some(out) = &cli.out {
        rundir::prepare_flat(out, cli.force)?;
        write(&out.join("report.md"), md)?;
        write(&out.join("report.csv"), csv)?;
    }
    Ok(())
}

fn fmt_p(p: Option<MetricPair>, f: fn(&MetricPair) -> f64) -> String {
    p.map(|p| format!("{:.3e}", f(&p))).unwrap_or_else(|| "-".into())
}

fn render_table(rows: &[(String, MetricsReport)], with_p: bool) -> (String, String) {
    let k = rows.first().map(|r| r.1.k).unwrap_or(5);
    let mut md = format!("| run | method | dataset | seeds | NDCG@{k} | Recall@{k} |");
    let mut csv = String::from("run,method,dataset,seeds,ndcg_mean,ndcg_std,recall_mean,recall_std");
    if with_p {
        md.push_str(" p (NDCG) | p (Recall) |");
        csv.push_str(",p_ndcg,p_recall");
    }
    md.push('\n');
    csv.push('\n');
    md.push_str(if with_p { "|---|---|---|---|---|---|---|---|\n" } else { "|---|---|---|---|---|---|\n" });
    for (name, r) in rows {
        md.push_str(&format!(
            "| {name} | {} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |",
            r.method,
            r.dataset,
            r.per_seed.len(),
            r.mean.ndcg,
            r.std.ndcg,
            r.mean.recall,
            r.std.recall
        ));
        csv.push_str(&format!(
            "{name},{},{},{},{},{},{},{}",
            r.method,
            r.dataset,
            r.per_seed.len(),
            r.mean.ndcg,
            r.std.ndcg,
            r.mean.recall,
            r.std.recall
        ));
        if with_p {
            let p = r.p_value_vs_baseline;
            md.push_str(&format!(" {} | {} |", fmt_p(p, |p| p.ndcg), fmt_p(p, |p| p.recall)));
            csv.push_str(&format!(
                ",{},{}",
                p.map(|p| p.ndcg.to_string()).unwrap_or_default(),
                p.map(|p| p.recall.to_string()).unwrap_or_default()
            ));
        }
        md.push('\n');
        csv.push('\n');
    }
    (md, csv)
}

fn simulate(cli: &Cli, synth: Option<&Path>, val_fraction: f64) -> Result<(), CliError> {
    let mut cfg = match synth {
        Some(p) => SynthConfig::from_toml(&rundir::read(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = require_out(cli)?;
    rundir::prepare_flat(&out, cli.force)?;
    let (dataset, truth) = synthlab::generate(&cfg)?;
    let dataset = dataio::split(dataset, val_fraction, cfg.seed)?;
    let cfg_json = serde_json::to_value(&cfg).map_err(|e| CliError::Input(e.to_string()))?;
    let hash = &dataio::sha256_hex(cfg_json.to_string().as_bytes())[..16];
    let mut prov = BTreeMap::new();
    prov.insert("source_format".into(), json!("synthetic"));
    prov.insert("synth_config".into(), cfg_json);
    prov.insert("val_fraction".into(), json!(val_fraction));
    prov.insert("config_hash".into(), json!(hash));
    let manifest = write_canonical(&out, &dataset, None, prov)?;
    synthlab::write_ground_truth_tsv(&truth, &out.join("ground_truth.tsv"))?;
    let mut clean = String::new();
    for (u, w) in truth.w_clean.iter().enumerate() {
        let cols: Vec<String> = w.iter().map(|v| v.to_string()).collect();
        clean.push_str(&format!("{u}\t{}\n", cols.join(",")));
    }
    write(&out.join("proxies_clean.tsv"), clean)?;
    println!(
        "{} users, {} items, {} biased, {} unbiased, offset {:.4} [config {hash}]",
        manifest.num_users, manifest.num_items, manifest.counts.biased, manifest.counts.unbiased, truth.exposure_offset
    );
    Ok(())
}
