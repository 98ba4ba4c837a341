//! Command-line orchestration: `gen-data`, `slice`, `train`, `eval`,
//! `compare`, and the end-to-end `demo`.
//!
//! Every option can come from a flat `key = value` config file (`--config`);
//! command-line flags override file values, which override defaults. The
//! resolved configuration is echoed to `config.echo` in the output
//! directory, and replaying that echo reproduces the run byte for byte.
//! Artifacts are write-once: a command refuses to overwrite its outputs
//! (the content-addressed `embeddings.cache` beside a dataset is the one
//! deliberate exception).
//!
//! `PROMPTSEG_THREADS` caps worker parallelism; results do not depend on it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use clap::{Arg, ArgAction, ArgMatches, Command};

use promptseg_core::data::{
    generate_dataset, read_manifest, read_sample, read_volume, slice_volume, split_dataset,
    write_manifest, write_sample, DatasetManifest, Sample, Split, SyntheticConfig,
};
use promptseg_core::metrics::MetricReport;
use promptseg_core::model::{
    init_model, load_checkpoint, save_checkpoint, EmbeddingCache, ModelConfig,
};
use promptseg_core::rng::rng_for;
use promptseg_core::trainer::{
    compare_models, evaluate_model, train, TrainConfig, TrainMode,
};
use promptseg_core::{Error, PerturbSpec, Result};

/// Entry point; returns the process exit code (0 success, 1 validation
/// error, 2 runtime failure).
pub fn run_cli(argv: &[String]) -> i32 {
    if let Err(code) = init_thread_pool() {
        return code;
    }
    let cmd = build_command();
    let matches = match cmd.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            // clap renders its own usage/help text
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { 0 } else { 1 };
        }
    };
    let result = match matches.subcommand() {
        Some(("gen-data", sub)) => cmd_gen_data(sub),
        Some(("slice", sub)) => cmd_slice(sub),
        Some(("train", sub)) => cmd_train(sub),
        Some(("eval", sub)) => cmd_eval(sub),
        Some(("compare", sub)) => cmd_compare(sub),
        Some(("demo", sub)) => cmd_demo(sub),
        _ => {
            eprintln!("error: missing subcommand (try --help)");
            return 1;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_thread_pool() -> std::result::Result<(), i32> {
    static POOL: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    let outcome = POOL.get_or_init(|| {
        let Ok(raw) = std::env::var("PROMPTSEG_THREADS") else {
            return Ok(());
        };
        let threads: usize = raw
            .parse()
            .map_err(|_| format!("PROMPTSEG_THREADS must be a positive integer, got '{raw}'"))?;
        if threads == 0 {
            return Err("PROMPTSEG_THREADS must be >= 1".to_string());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| format!("thread pool: {e}"))
    });
    if let Err(msg) = outcome {
        eprintln!("error: {msg}");
        return Err(1);
    }
    Ok(())
}

/// Option spec: long name and default value (None = required).
struct Spec {
    key: &'static str,
    default: Option<&'static str>,
    is_flag: bool,
    repeatable: bool,
}

const fn opt(key: &'static str, default: &'static str) -> Spec {
    Spec {
        key,
        default: Some(default),
        is_flag: false,
        repeatable: false,
    }
}

const fn required(key: &'static str) -> Spec {
    Spec {
        key,
        default: None,
        is_flag: false,
        repeatable: false,
    }
}

const fn flag(key: &'static str) -> Spec {
    Spec {
        key,
        default: Some("false"),
        is_flag: true,
        repeatable: false,
    }
}

const fn repeatable(key: &'static str) -> Spec {
    Spec {
        key,
        default: None,
        is_flag: false,
        repeatable: true,
    }
}

const GEN_DATA_SPECS: &[Spec] = &[
    required("out"),
    opt("count", "100"),
    opt("seed", "0"),
    opt("image-size", "64"),
    opt("noise-std", "0.05"),
];

const SLICE_SPECS: &[Spec] = &[
    required("volume"),
    required("out"),
    opt("slices", "4"),
    opt("seed", "0"),
];

const MODEL_SPECS: &[Spec] = &[
    opt("patch-size", "8"),
    opt("embed-dim", "64"),
    opt("encoder-depth", "2"),
    opt("encoder-heads", "4"),
    opt("decoder-depth", "2"),
    opt("decoder-heads", "4"),
    opt("logit-grid", "32"),
    opt("pe-seed", "0"),
    opt("pe-scale", "1"),
];

const TRAIN_ONLY_SPECS: &[Spec] = &[
    required("data"),
    required("out"),
    opt("mode", "cotrain"),
    opt("seed", "0"),
    opt("epochs", "8"),
    opt("batch-size", "4"),
    opt("lr", "0.0001"),
    opt("radius-organ", "5"),
    opt("radius-lesion", "2"),
    opt("eval-every", "1"),
    flag("no-cache"),
    flag("unfreeze-encoder"),
    flag("freeze-prompt-encoder"),
    flag("freeze-decoder"),
];

const EVAL_SPECS: &[Spec] = &[
    required("checkpoint"),
    required("data"),
    required("out"),
    opt("split", "test"),
    opt("tau", "1"),
    opt("roles", "lesion,organ"),
];

const COMPARE_SPECS: &[Spec] = &[required("out"), repeatable("report")];

const DEMO_SPECS: &[Spec] = &[
    required("out"),
    opt("count", "64"),
    opt("seed", "7"),
    opt("epochs", "6"),
    opt("batch-size", "4"),
    opt("lr", "0.001"),
    opt("image-size", "64"),
];

fn args_for(specs: &[Spec]) -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("flat key = value config file; flags override file values")];
    for s in specs {
        let mut a = Arg::new(s.key).long(s.key).value_name("VALUE");
        if s.is_flag {
            a = a.action(ArgAction::SetTrue).value_name(None::<&str>);
        } else if s.repeatable {
            a = a.action(ArgAction::Append);
        }
        args.push(a);
    }
    args
}

fn build_command() -> Command {
    Command::new("promptseg")
        .about("Box-prompt segmentation co-training at desk scale")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-data")
                .about("Generate a synthetic organ/lesion dataset with a 70/15/15 split")
                .args(args_for(GEN_DATA_SPECS)),
        )
        .subcommand(
            Command::new("slice")
                .about("Slice a labeled 3-D volume (SEGV1, 3-D blocks) into 2-D samples")
                .args(args_for(SLICE_SPECS)),
        )
        .subcommand(
            Command::new("train")
                .about("Fine-tune on a dataset in cotrain or single-prompt mode")
                .args(args_for(TRAIN_ONLY_SPECS))
                .args(args_for(MODEL_SPECS).into_iter().skip(1)),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint on a dataset split")
                .args(args_for(EVAL_SPECS)),
        )
        .subcommand(
            Command::new("compare")
                .about("Compare evaluation reports into a table and bar chart")
                .args(args_for(COMPARE_SPECS)),
        )
        .subcommand(
            Command::new("demo")
                .about("End to end: generate data, train all arms, evaluate, compare")
                .args(args_for(DEMO_SPECS)),
        )
}

/// Resolved options with command-line > config-file > default precedence.
struct Opts {
    effective: BTreeMap<String, String>,
}

impl Opts {
    fn resolve(matches: &ArgMatches, specs: &[&[Spec]]) -> Result<Opts> {
        let mut file_values = BTreeMap::new();
        if let Some(path) = matches.get_one::<String>("config") {
            file_values = parse_config_file(Path::new(path))?;
        }
        let mut effective = BTreeMap::new();
        let mut known = std::collections::BTreeSet::new();
        for spec in specs.iter().flat_map(|s| s.iter()) {
            known.insert(spec.key.to_string());
            let from_cli = matches.value_source(spec.key)
                == Some(clap::parser::ValueSource::CommandLine);
            let value = if from_cli {
                if spec.is_flag {
                    Some("true".to_string())
                } else if spec.repeatable {
                    Some(
                        matches
                            .get_many::<String>(spec.key)
                            .unwrap()
                            .cloned()
                            .collect::<Vec<_>>()
                            .join(","),
                    )
                } else {
                    matches.get_one::<String>(spec.key).cloned()
                }
            } else if let Some(v) = file_values.get(spec.key) {
                Some(v.clone())
            } else {
                spec.default.map(str::to_string)
            };
            match value {
                Some(v) => {
                    effective.insert(spec.key.to_string(), v);
                }
                None => {
                    return Err(Error::Validation(format!(
                        "missing required option --{}",
                        spec.key
                    )))
                }
            }
        }
        for key in file_values.keys() {
            if !known.contains(key) {
                return Err(Error::Validation(format!(
                    "unknown config file key '{key}'"
                )));
            }
        }
        Ok(Opts { effective })
    }

    fn raw(&self, key: &str) -> &str {
        &self.effective[key]
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e| Error::Validation(format!("option --{key}: {e}")))
    }

    fn get_flag(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Validation(format!(
                "option --{key} must be true or false, got '{other}'"
            ))),
        }
    }

    /// `key = value` lines, sorted; replaying this file reproduces the run.
    fn echo(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        for (k, v) in &self.effective {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            field: format!("config file line {}", ln + 1),
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

/// Create the directory (if needed) and refuse to overwrite the target file.
fn fresh_path(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    if path.exists() {
        return Err(Error::Validation(format!(
            "refusing to overwrite existing {}",
            path.display()
        )));
    }
    Ok(path)
}

fn write_fresh(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = fresh_path(dir, name)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, DatasetManifest)> {
    let manifest = read_manifest(&dir.join("manifest.txt"))?;
    let samples = manifest
        .entries
        .iter()
        .map(|(id, _)| read_sample(&dir.join("samples").join(format!("{id}.segv"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, manifest))
}

fn write_dataset(dir: &Path, samples: &[Sample], manifest: &DatasetManifest) -> Result<()> {
    let manifest_path = fresh_path(dir, "manifest.txt")?;
    let samples_dir = dir.join("samples");
    std::fs::create_dir_all(&samples_dir)?;
    for s in samples {
        let path = samples_dir.join(format!("{}.segv", s.case_id));
        if path.exists() {
            return Err(Error::Validation(format!(
                "refusing to overwrite existing {}",
                path.display()
            )));
        }
        write_sample(s, &path)?;
    }
    write_manifest(manifest, &manifest_path)?;
    Ok(())
}

fn cmd_gen_data(matches: &ArgMatches) -> Result<()> {
    let opts = Opts::resolve(matches, &[GEN_DATA_SPECS])?;
    let out = PathBuf::from(opts.raw("out"));
    let config = SyntheticConfig {
        image_size: opts.get("image-size")?,
        noise_std: opts.get("noise-std")?,
        count: opts.get("count")?,
        seed: opts.get("seed")?,
        ..Default::default()
    };
    let (samples, manifest) = generate_dataset(&config)?;
    write_dataset(&out, &samples, &manifest)?;
    write_fresh(&out, "config.echo", opts.echo().as_bytes())?;
    println!(
        "wrote {} samples to {} (train/val/test = {}/{}/{})",
        samples.len(),
        out.display(),
        manifest.ids_for(Split::Train).len(),
        manifest.ids_for(Split::Val).len(),
        manifest.ids_for(Split::Test).len(),
    );
    Ok(())
}

fn cmd_slice(matches: &ArgMatches) -> Result<()> {
    let opts = Opts::resolve(matches, &[SLICE_SPECS])?;
    let out = PathBuf::from(opts.raw("out"));
    let seed: u64 = opts.get("seed")?;
    let volume = read_volume(Path::new(opts.raw("volume")))?;
    let mut rng = rng_for(seed, "slice", 0);
    let outcome = slice_volume(&volume, opts.get("slices")?, &mut rng)?;
    if outcome.shortfall {
        eprintln!(
            "warning: only {} eligible slices were available",
            outcome.samples.len()
        );
    }
    let ids: Vec<String> = outcome.samples.iter().map(|s| s.case_id.clone()).collect();
    let mut manifest = split_dataset(&ids, (0.70, 0.15, 0.15), seed)?;
    manifest.dataset = "sliced".into();
    manifest
        .params
        .insert("volume".into(), volume.case_id.clone());
    manifest
        .params
        .insert("slices".into(), opts.raw("slices").to_string());
    write_dataset(&out, &outcome.samples, &manifest)?;
    write_fresh(&out, "config.echo", opts.echo().as_bytes())?;
    println!(
        "sliced {} samples from volume {} into {}",
        outcome.samples.len(),
        volume.case_id,
        out.display()
    );
    Ok(())
}

fn model_config_from(opts: &Opts, image_size: usize) -> Result<ModelConfig> {
    let config = ModelConfig {
        image_size,
        patch_size: opts.get("patch-size")?,
        embed_dim: opts.get("embed-dim")?,
        encoder_depth: opts.get("encoder-depth")?,
        encoder_heads: opts.get("encoder-heads")?,
        decoder_depth: opts.get("decoder-depth")?,
        decoder_heads: opts.get("decoder-heads")?,
        logit_grid: opts.get("logit-grid")?,
        pe_seed: opts.get("pe-seed")?,
        pe_scale: opts.get("pe-scale")?,
    };
    config.validate()?;
    Ok(config)
}

fn cmd_train(matches: &ArgMatches) -> Result<()> {
    let opts = Opts::resolve(matches, &[TRAIN_ONLY_SPECS, MODEL_SPECS])?;
    let out = PathBuf::from(opts.raw("out"));
    let data_dir = PathBuf::from(opts.raw("data"));
    let (samples, manifest) = load_dataset(&data_dir)?;
    if samples.is_empty() {
        return Err(Error::Validation("dataset is empty".into()));
    }
    let config = model_config_from(&opts, samples[0].height())?;
    let seed: u64 = opts.get("seed")?;
    let train_cfg = TrainConfig {
        mode: TrainMode::parse(opts.raw("mode"))?,
        epochs: opts.get("epochs")?,
        batch_size: opts.get("batch-size")?,
        learning_rate: opts.get("lr")?,
        seed,
        perturb: PerturbSpec::new()
            .with("organ", opts.get("radius-organ")?)
            .with("lesion", opts.get("radius-lesion")?),
        freeze_encoder: !opts.get_flag("unfreeze-encoder")?,
        freeze_prompt_encoder: opts.get_flag("freeze-prompt-encoder")?,
        freeze_decoder: opts.get_flag("freeze-decoder")?,
        eval_every: opts.get("eval-every")?,
        checkpoint_dir: Some(out.clone()),
        embedding_cache: !opts.get_flag("no-cache")?,
        ..Default::default()
    };

    let params = init_model::<f32>(&config, seed)?;
    let cache_path = data_dir.join("embeddings.cache");
    let cache: EmbeddingCache<f32> = EmbeddingCache::load(&cache_path)?;
    let (best, record) = train(&params, &config, &train_cfg, &samples, &manifest, Some(&cache))?;
    if train_cfg.embedding_cache && train_cfg.freeze_encoder {
        // the cache is content-addressed, so refreshing it beside the
        // dataset never invalidates other runs
        cache.save(&cache_path)?;
    }

    let checkpoint_path = fresh_path(&out, "checkpoint.bin")?;
    save_checkpoint(&best, &config, &checkpoint_path)?;
    write_fresh(&out, "record.csv", record.to_csv().as_bytes())?;
    write_fresh(&out, "config.echo", opts.echo().as_bytes())?;
    println!(
        "trained {} for {} epochs (best epoch {}, {:.1}s); checkpoint at {}",
        opts.raw("mode"),
        train_cfg.epochs,
        record.best_epoch,
        record.wall_time_secs,
        checkpoint_path.display()
    );
    Ok(())
}

fn cmd_eval(matches: &ArgMatches) -> Result<()> {
    let opts = Opts::resolve(matches, &[EVAL_SPECS])?;
    let out = PathBuf::from(opts.raw("out"));
    let data_dir = PathBuf::from(opts.raw("data"));
    let (params, config) = load_checkpoint::<f32>(Path::new(opts.raw("checkpoint")))?;
    let (samples, manifest) = load_dataset(&data_dir)?;
    let split = Split::parse(opts.raw("split"))?;
    let ids: std::collections::BTreeSet<&str> = manifest.ids_for(split).into_iter().collect();
    let selected: Vec<Sample> = samples
        .into_iter()
        .filter(|s| ids.contains(s.case_id.as_str()))
        .collect();
    let roles: Vec<String> = opts
        .raw("roles")
        .split(',')
        .map(|r| r.trim().to_string())
        .filter(|r| !r.is_empty())
        .collect();
    let tau: f64 = opts.get("tau")?;
    let cache: EmbeddingCache<f32> = EmbeddingCache::load(&data_dir.join("embeddings.cache"))?;
    let report = evaluate_model(&params, &config, &selected, &roles, tau, Some(&cache))?;
    write_fresh(&out, "metrics.csv", report.to_csv().as_bytes())?;
    write_fresh(&out, "config.echo", opts.echo().as_bytes())?;
    for agg in &report.aggregates {
        println!(
            "{}: iou {:.4}  dsc {:.4}  nsd {:.4}  assd {:.4}",
            agg.role, agg.mean[0], agg.mean[1], agg.mean[2], agg.mean[3]
        );
    }
    Ok(())
}

fn cmd_compare(matches: &ArgMatches) -> Result<()> {
    let opts = Opts::resolve(matches, &[COMPARE_SPECS])?;
    let out = PathBuf::from(opts.raw("out"));
    let mut reports = BTreeMap::new();
    for entry in opts.raw("report").split(',') {
        let entry = entry.trim();
        if entry.is_empty() {
            continue;
        }
        let (name, path) = entry.split_once('=').ok_or_else(|| {
            Error::Validation(format!("--report expects name=path, got '{entry}'"))
        })?;
        let text = std::fs::read_to_string(path)?;
        if reports
            .insert(name.to_string(), MetricReport::from_csv(&text)?)
            .is_some()
        {
            return Err(Error::Validation(format!("duplicate report name '{name}'")));
        }
    }
    if reports.is_empty() {
        return Err(Error::Validation("compare needs at least one --report".into()));
    }
    let outputs = compare_models(&reports)?;
    write_fresh(&out, "comparison.csv", outputs.csv.as_bytes())?;
    write_fresh(&out, "comparison.svg", outputs.svg.as_bytes())?;
    write_fresh(&out, "config.echo", opts.echo().as_bytes())?;
    println!("compared {} arms into {}", reports.len(), out.display());
    Ok(())
}

fn cmd_demo(matches: &ArgMatches) -> Result<()> {
    let opts = Opts::resolve(matches, &[DEMO_SPECS])?;
    let out = PathBuf::from(opts.raw("out"));
    let seed: u64 = opts.get("seed")?;
    let run = |args: Vec<String>| -> Result<()> {
        let mut argv = vec!["promptseg".to_string()];
        argv.extend(args);
        match run_cli(&argv) {
            0 => Ok(()),
            1 => Err(Error::Validation("demo step failed".into())),
            _ => Err(Error::NanLoss("demo step failed at runtime".into())),
        }
    };
    let data_dir = out.join("data");
    run(vec![
        "gen-data".into(),
        "--out".into(),
        data_dir.display().to_string(),
        "--count".into(),
        opts.raw("count").into(),
        "--seed".into(),
        seed.to_string(),
        "--image-size".into(),
        opts.raw("image-size").into(),
    ])?;

    let arms = [
        ("cotrain", "cotrain"),
        ("single:lesion", "single_lesion"),
        ("single:organ", "single_organ"),
    ];
    let mut reports: Vec<(String, PathBuf)> = Vec::new();
    for (mode, dir_name) in arms {
        let arm_dir = out.join("arms").join(dir_name);
        run(vec![
            "train".into(),
            "--data".into(),
            data_dir.display().to_string(),
            "--out".into(),
            arm_dir.display().to_string(),
            "--mode".into(),
            mode.into(),
            "--seed".into(),
            seed.to_string(),
            "--epochs".into(),
            opts.raw("epochs").into(),
            "--batch-size".into(),
            opts.raw("batch-size").into(),
            "--lr".into(),
            opts.raw("lr").into(),
        ])?;
        let eval_dir = out.join("eval").join(dir_name);
        run(vec![
            "eval".into(),
            "--checkpoint".into(),
            arm_dir.join("checkpoint.bin").display().to_string(),
            "--data".into(),
            data_dir.display().to_string(),
            "--split".into(),
            "test".into(),
            "--out".into(),
            eval_dir.display().to_string(),
        ])?;
        reports.push((dir_name.to_string(), eval_dir.join("metrics.csv")));
    }

    // untrained baseline: the shared initialization with zero steps
    let (samples, _) = load_dataset(&data_dir)?;
    let config = ModelConfig {
        image_size: samples[0].height(),
        ..Default::default()
    };
    let baseline_dir = out.join("arms").join("baseline");
    let baseline_ckpt = fresh_path(&baseline_dir, "checkpoint.bin")?;
    save_checkpoint(&init_model::<f32>(&config, seed)?, &config, &baseline_ckpt)?;
    let eval_dir = out.join("eval").join("baseline");
    run(vec![
        "eval".into(),
        "--checkpoint".into(),
        baseline_ckpt.display().to_string(),
        "--data".into(),
        data_dir.display().to_string(),
        "--split".into(),
        "test".into(),
        "--out".into(),
        eval_dir.display().to_string(),
    ])?;
    reports.push(("baseline".to_string(), eval_dir.join("metrics.csv")));

    let report_arg = reports
        .iter()
        .map(|(name, path)| format!("{name}={}", path.display()))
        .collect::<Vec<_>>()
        .join(",");
    let compare_dir = out.join("compare");
    run(vec![
        "compare".into(),
        "--out".into(),
        compare_dir.display().to_string(),
        "--report".into(),
        report_arg,
    ])?;
    write_fresh(&out, "config.echo", opts.echo().as_bytes())?;
    println!("demo complete; see {}/comparison.csv", compare_dir.display());
    Ok(())
}

