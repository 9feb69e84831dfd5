use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mmprecode::experiment::{
    load_models, run_baselines, run_pipeline, run_robustness, save_models, snr_db_from_noise_var,
    write_baselines_csv, write_pipeline_csv, write_robustness_csv, ExperimentConfig, ModelManifest,
};
use mmprecode::pcsi::{online_update, verify_lemma1, write_lemma1_csv, LabelSource, OnlineConfig};
use mmprecode::rng::{derive, derive_named};
use mmprecode::scene::{generate_scene, Scene, SensorFlags};
use mmprecode::vfl::{
    build_dataset, evaluate, kib, offline_train, overhead_report, write_history_csv, zf_reference,
    DataSource, GradientSource, MessageKind, Observation, OverheadParams,
};
use mmprecode::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "mmprecode",
    version,
    about = "Sensing-aided FDD precoding experiments"
)]
struct Cli {
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Validate inputs and print the resolved configuration without computing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scene generation.
    Scene {
        #[command(subcommand)]
        action: SceneAction,
    },
    /// Offline federated training on a scene; writes a state directory.
    TrainOffline {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Label-free online update of a state directory. Vehicles listed under
    /// `online.joining` in the state's config are added to the scene first.
    UpdateOnline {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        labels: Option<Labels>,
    },
    /// MF, ZF and WMMSE sum rates over the configured (K, SNR) sweep.
    Baselines {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Monte Carlo check of the pilot-fit error bound.
    VerifyLemma1 {
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 9)]
        m: usize,
        /// Comma-separated list.
        #[arg(long, value_delimiter = ',', default_value = "1.5")]
        alpha: Vec<f64>,
        #[arg(long, default_value_t = 10.0)]
        snr_db: f64,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    /// Sum rate of clean-trained models under corrupted sensing.
    Robustness {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated corruption levels (default: the config's sweep levels).
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<String>>,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Scene generation, offline training and online updating end to end.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Summarize result CSVs, or print the feedback overhead table.
    Report {
        /// CSV files written by this tool.
        inputs: Vec<PathBuf>,
        /// Print the overhead table for the given config (or the defaults).
        #[arg(long)]
        overhead: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum SceneAction {
    /// Generate a scene from a config's `[scene]` section.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Also write a human-readable JSON export next to the binary file.
        #[arg(long)]
        text: bool,
    },
}

#[derive(Args, Debug)]
struct SeedArgs {
    /// Number of seeds, derived from the master seed.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Labels {
    Pcsi,
    Uplink,
    True,
}

impl From<Labels> for LabelSource {
    fn from(l: Labels) -> Self {
        match l {
            Labels::Pcsi => LabelSource::Pcsi,
            Labels::Uplink => LabelSource::UplinkEstimate,
            Labels::True => LabelSource::TrueChannel,
        }
    }
}

const STATE_CONFIG: &str = "config.toml";
const STATE_MODELS: &str = "models";

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: could not configure {t} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Numerical(_) | Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn seed_list(master: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| derive(master, i)).collect()
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

/// Write to `path`, or to stdout when no path was given.
fn emit(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            create_parent(p)?;
            let mut w = io::BufWriter::new(fs::File::create(p)?);
            f(&mut w)?;
            w.flush()?;
            Ok(())
        }
        None => f(&mut io::stdout().lock()),
    }
}

fn dry_run_report(cfg: &ExperimentConfig) {
    println!("# config {} valid", cfg.hash());
    print!("{}", cfg.to_toml());
}

fn read_scene(path: &Path) -> Result<Scene> {
    Scene::read_binary(io::BufReader::new(fs::File::open(path)?))
}

/// Point the config at the fleet of `scene` and revalidate.
fn adopt_fleet(cfg: &mut ExperimentConfig, scene: &Scene) -> Result<()> {
    cfg.scene.vehicles = scene.vehicles.iter().map(|v| v.sensors).collect();
    cfg.system.k = scene.num_vehicles();
    cfg.validate()
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Scene {
            action: SceneAction::Generate { config, text },
        } => {
            let cfg = load_config(config, cli.seed)?;
            if cli.dry_run {
                dry_run_report(&cfg);
                return Ok(());
            }
            let scene = generate_scene(&cfg.scene, derive_named(cfg.seed, "scene"))?;
            let out = out_path(cli, "scene.bin");
            create_parent(&out)?;
            scene.write_binary(io::BufWriter::new(fs::File::create(&out)?))?;
            if *text {
                fs::write(out.with_extension("json"), scene.to_json())?;
            }
            eprintln!(
                "wrote {} ({} vehicles)",
                out.display(),
                scene.num_vehicles()
            );
            Ok(())
        }
        Command::TrainOffline { scene, config } => {
            let mut cfg = load_config(config, cli.seed)?;
            let scene = read_scene(scene)?;
            adopt_fleet(&mut cfg, &scene)?;
            if cli.dry_run {
                dry_run_report(&cfg);
                return Ok(());
            }
            train_offline(cli, &cfg, &scene)
        }
        Command::UpdateOnline {
            scene,
            state,
            epochs,
            labels,
        } => {
            let mut cfg = load_config(&state.join(STATE_CONFIG), cli.seed)?;
            let mut scene = read_scene(scene)?;
            if !cfg.online.joining.is_empty() {
                let mut fleet: Vec<SensorFlags> =
                    scene.vehicles.iter().map(|v| v.sensors).collect();
                fleet.extend(&cfg.online.joining);
                scene = scene.with_fleet(&fleet, derive_named(cfg.seed, "online-placement"))?;
            }
            cfg.online.joining.clear();
            if let Some(e) = epochs {
                cfg.online.epochs = *e;
            }
            if let Some(l) = labels {
                cfg.online.labels = (*l).into();
            }
            adopt_fleet(&mut cfg, &scene)?;
            if cli.dry_run {
                dry_run_report(&cfg);
                return Ok(());
            }
            update_online(cli, &cfg, &scene, state)
        }
        Command::Baselines { config, seeds } => {
            let cfg = load_config(config, cli.seed)?;
            if cli.dry_run {
                dry_run_report(&cfg);
                return Ok(());
            }
            let rows = run_baselines(&cfg, &seed_list(cfg.seed, seeds.seeds))?;
            emit(cli.out.as_deref(), |w| write_baselines_csv(w, &rows))
        }
        Command::VerifyLemma1 {
            n,
            m,
            alpha,
            snr_db,
            trials,
        } => {
            let noise_var = 10f64.powf(-snr_db / 10.0);
            if cli.dry_run {
                for &a in alpha {
                    if a.is_nan() || a <= 1.0 || *m == 0 || m > n || *trials == 0 {
                        return Err(Error::Config(format!(
                            "need alpha > 1, 1 <= M <= N and trials >= 1 (alpha {a}, M {m}, N {n})"
                        )));
                    }
                }
                println!("# verify-lemma1 N={n} M={m} alpha={alpha:?} snr_db={snr_db} trials={trials} valid");
                return Ok(());
            }
            let seed = cli.seed.unwrap_or(0);
            let reports = alpha
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    verify_lemma1(*n, *m, 1.0, noise_var, a, *trials, derive(seed, i as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            emit(cli.out.as_deref(), |w| write_lemma1_csv(w, &reports))
        }
        Command::Robustness {
            config,
            levels,
            seeds,
        } => {
            let cfg = load_config(config, cli.seed)?;
            let levels = levels.clone().unwrap_or_else(|| cfg.sweep.levels.clone());
            for l in &levels {
                mmprecode::scene::CorruptionConfig::level(l)?;
            }
            if cli.dry_run {
                dry_run_report(&cfg);
                return Ok(());
            }
            let rows = run_robustness(&cfg, &levels, &seed_list(cfg.seed, seeds.seeds))?;
            emit(cli.out.as_deref(), |w| write_robustness_csv(w, &rows))
        }
        Command::Pipeline { config, seeds } => {
            let cfg = load_config(config, cli.seed)?;
            if cli.dry_run {
                dry_run_report(&cfg);
                return Ok(());
            }
            let out = out_path(cli, "pipeline");
            fs::create_dir_all(&out)?;
            fs::write(out.join(STATE_CONFIG), cfg.to_toml())?;
            let rows = run_pipeline(&cfg, &seed_list(cfg.seed, seeds.seeds), Some(&out))?;
            emit(Some(&out.join("summary.csv")), |w| {
                write_pipeline_csv(w, &rows)
            })?;
            write_pipeline_csv(io::stdout().lock(), &rows)
        }
        Command::Report {
            inputs,
            overhead,
            config,
        } => {
            let cfg = match config {
                Some(c) => Some(load_config(c, cli.seed)?),
                None => None,
            };
            if cli.dry_run {
                return Ok(());
            }
            report(cli, inputs, *overhead, cfg.as_ref())
        }
    }
}

fn train_offline(cli: &Cli, cfg: &ExperimentConfig, scene: &Scene) -> Result<()> {
    let out = out_path(cli, "state");
    fs::create_dir_all(&out)?;
    let channel = cfg.channel();
    let train = cfg.training_config()?;
    let obs = Observation {
        channel: &channel,
        features: &cfg.features,
        corruption: None,
    };
    let manifest = ModelManifest {
        flags: cfg.scene.vehicles.clone(),
        model: cfg.model.clone(),
        features: cfg.features,
        n: channel.n(),
        training: train.clone(),
    };
    let mut models = manifest.fresh(derive_named(cfg.seed, "models"))?;
    let fixed;
    let source = if cfg.training.fresh_samples {
        DataSource::Fresh {
            scene,
            obs,
            per_epoch: cfg.training.samples,
        }
    } else {
        fixed = build_dataset(
            scene,
            obs,
            &train,
            cfg.training.samples,
            derive_named(cfg.seed, "train"),
        )?;
        DataSource::Fixed(&fixed)
    };
    let outcome = offline_train(
        &mut models,
        &source,
        &train,
        derive_named(cfg.seed, "offline"),
    )?;
    let test = build_dataset(
        scene,
        obs,
        &train,
        cfg.training.test_samples,
        derive_named(cfg.seed, "test"),
    )?;
    let eval = evaluate(&models, &test, &train, true)?;
    let zf = zf_reference(&test, train.power, train.noise_var)?;

    fs::write(out.join(STATE_CONFIG), cfg.to_toml())?;
    write_history_csv(fs::File::create(out.join("history.csv"))?, &outcome.history)?;
    save_models(&out.join(STATE_MODELS), &manifest, &models)?;
    let summary = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "k": models.len(),
        "n": channel.n(),
        "snr_db": snr_db_from_noise_var(train.power, train.noise_var),
        "epochs": train.epochs,
        "sum_rate": eval.mean_sum_rate,
        "min_rate": eval.mean_min_rate,
        "per_user": eval.per_user,
        "zf_sum_rate": zf,
        "upload_bytes": outcome.ledger.bytes(MessageKind::PrecoderUpload),
        "gradient_bytes": outcome.ledger.bytes(MessageKind::GradientUnicast),
    });
    fs::write(out.join("summary.json"), format!("{summary:#}\n"))?;
    println!(
        "offline: sum rate {:.4} (ZF with true CSI {:.4}), min rate {:.4}",
        eval.mean_sum_rate, zf, eval.mean_min_rate
    );
    Ok(())
}

fn update_online(cli: &Cli, cfg: &ExperimentConfig, scene: &Scene, state: &Path) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| state.join("online"));
    fs::create_dir_all(&out)?;
    let (manifest, mut models) = load_models(&state.join(STATE_MODELS))?;
    let fleet: Vec<SensorFlags> = scene.vehicles.iter().map(|v| v.sensors).collect();
    if models.len() > fleet.len() {
        // Vehicles that left: the remaining ones keep their models in order.
        models.truncate(fleet.len());
    }
    if fleet[..models.len()] != manifest.flags[..models.len()] {
        return Err(Error::Config(
            "the scene's leading vehicles must carry the same sensors as the trained fleet".into(),
        ));
    }
    let mut train = cfg.training_config()?;
    train.epochs = cfg.online.epochs;
    let grown = ModelManifest {
        flags: fleet.clone(),
        training: train.clone(),
        ..manifest
    };
    let joining = grown.fresh(derive_named(cfg.seed, "joining"))?;
    let existing = models.len();
    models.extend(joining.into_iter().skip(existing));

    let channel = cfg.channel();
    let obs = Observation {
        channel: &channel,
        features: &cfg.features,
        corruption: None,
    };
    let online = OnlineConfig {
        epochs: cfg.online.epochs,
        samples: cfg.online.samples,
        labels: cfg.online.labels,
        fresh_samples: cfg.online.fresh_samples,
    };
    let (_, outcome) = online_update(
        scene,
        &mut models,
        obs,
        &train,
        &cfg.pcsi,
        &online,
        derive_named(cfg.seed, "online"),
    )?;
    let test = build_dataset(
        scene,
        obs,
        &train,
        cfg.training.test_samples,
        derive_named(cfg.seed, "online-test"),
    )?;
    let eval = evaluate(&models, &test, &train, true)?;

    fs::write(out.join(STATE_CONFIG), cfg.to_toml())?;
    write_history_csv(fs::File::create(out.join("history.csv"))?, &outcome.history)?;
    save_models(&out.join(STATE_MODELS), &grown, &models)?;
    let true_gradients = outcome
        .ledger
        .gradient_sources()
        .filter(|s| *s == GradientSource::TrueChannel)
        .count();
    let summary = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "k": models.len(),
        "joined": models.len() - existing,
        "labels": format!("{:?}", cfg.online.labels),
        "epochs": cfg.online.epochs,
        "initial_sum_rate": outcome.initial_sum_rate,
        "sum_rate": eval.mean_sum_rate,
        "min_rate": eval.mean_min_rate,
        "zf_sum_rate": outcome.zf_sum_rate,
        "label_nmse": outcome.label_nmse,
        "teacher_loss": outcome.teacher_loss,
        "selector_loss": outcome.simulator.selector_loss,
        "fit_loss": outcome.simulator.fit_loss,
        "gradients_from_true_channels": true_gradients,
    });
    fs::write(out.join("summary.json"), format!("{summary:#}\n"))?;
    println!(
        "online: sum rate {:.4} -> {:.4} (ZF with true CSI {:.4}), label NMSE {:.4}",
        outcome.initial_sum_rate, eval.mean_sum_rate, outcome.zf_sum_rate, outcome.label_nmse
    );
    Ok(())
}

/// A parsed CSV file: header plus rows of raw fields.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
        .collect::<Vec<_>>();
    if let Some(bad) = rows.iter().position(|r| r.len() != header.len()) {
        return Err(Error::Format(format!(
            "{}: row {} has the wrong width",
            path.display(),
            bad + 2
        )));
    }
    Ok(Table { header, rows })
}

/// Mean and sample standard deviation of `value` grouped by the `keys` columns,
/// in first-appearance order.
fn summarize(t: &Table, keys: &[&str], value: &str, w: &mut dyn Write) -> Result<()> {
    let col = |name: &str| {
        t.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing column {name}")))
    };
    let key_cols = keys.iter().map(|k| col(k)).collect::<Result<Vec<_>>>()?;
    let vcol = col(value)?;
    let mut groups: Vec<(Vec<String>, Vec<f64>)> = Vec::new();
    for r in &t.rows {
        let key: Vec<String> = key_cols.iter().map(|&c| r[c].clone()).collect();
        let v: f64 = r[vcol]
            .parse()
            .map_err(|_| Error::Format(format!("non-numeric {value}: {}", r[vcol])))?;
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(v),
            None => groups.push((key, vec![v])),
        }
    }
    writeln!(w, "{},count,mean_{value},std_{value}", keys.join(","))?;
    for (key, vals) in groups {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        writeln!(w, "{},{},{mean},{}", key.join(","), vals.len(), var.sqrt())?;
    }
    Ok(())
}

fn report(
    cli: &Cli,
    inputs: &[PathBuf],
    overhead: bool,
    cfg: Option<&ExperimentConfig>,
) -> Result<()> {
    if !overhead && inputs.is_empty() {
        return Err(Error::Config(
            "nothing to report: give CSV files or --overhead".into(),
        ));
    }
    emit(cli.out.as_deref(), |w| {
        if overhead {
            let p = cfg.map_or_else(OverheadParams::default, ExperimentConfig::overhead_params);
            let r = overhead_report(&p);
            writeln!(w, "phase,bytes,kib")?;
            for (phase, b) in [
                ("vfl_upload_total", r.vfl_upload_bytes),
                ("d1_per_user", r.d1_bytes_per_user),
                ("d2_per_user", r.d2_bytes_per_user),
            ] {
                writeln!(w, "{phase},{b},{}", kib(b))?;
            }
        }
        for path in inputs {
            let t = read_table(path)?;
            writeln!(w, "# {}", path.display())?;
            let has = |c: &str| t.header.iter().any(|h| h == c);
            if has("scheme") {
                summarize(&t, &["scheme", "K", "N", "snr_db"], "sum_rate", w)?;
            } else if has("level") {
                summarize(&t, &["level"], "relative", w)?;
            } else if has("phase") {
                summarize(&t, &["phase", "k"], "sum_rate", w)?;
            } else if has("epoch") {
                let last = t
                    .rows
                    .last()
                    .ok_or_else(|| Error::Format("empty history".into()))?;
                writeln!(w, "{}", t.header.join(","))?;
                writeln!(w, "{}", last.join(","))?;
            } else if has("violation_rate") {
                writeln!(w, "{}", t.header.join(","))?;
                for r in &t.rows {
                    writeln!(w, "{}", r.join(","))?;
                }
            } else {
                return Err(Error::Format(format!(
                    "{}: unrecognized columns",
                    path.display()
                )));
            }
        }
        Ok(())
    })
}
