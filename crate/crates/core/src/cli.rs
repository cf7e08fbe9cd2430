//! Command-line driver: `train`, `evaluate`, `generate`, `diagnose`.
//!
//! Training settings resolve in three layers: built-in defaults, then an
//! optional flat `key = value` config file, then long flags with the same
//! snake_case names. The resolved values are written to `config.ini` in the
//! output directory.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::dataio::{
    gamma_split, generate_synthetic, load_interactions, read_pairs, write_pairs, InteractionSet, Split, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{encoder_alignment_uniformity, evaluate, fn_identification_rate, hardness_popularity_profile};
use crate::rng::substream;
use crate::trainer::{run_training, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "advrec",
    version,
    about = "Contrastive recommender training with learned negative hardness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, metrics.jsonl and config.ini.
    Train(TrainArgs),
    /// Print top-K metrics of a checkpoint as JSON.
    Evaluate(EvalArgs),
    /// Write a synthetic biased-exposure dataset.
    Generate(GenArgs),
    /// Write a diagnostic CSV for one or more checkpoints.
    Diagnose(DiagArgs),
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct DataArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

macro_rules! override_flags {
    ($($field:ident),* $(,)?) => {
        #[derive(Args, Debug)]
        #[command(rename_all = "snake_case")]
        struct TrainArgs {
            /// Flat `key = value` config file; flags override it.
            #[arg(long)]
            config: Option<PathBuf>,
            #[arg(long)]
            out: Option<String>,
            #[arg(long)]
            train: Option<String>,
            #[arg(long)]
            valid: Option<String>,
            #[arg(long)]
            test: Option<String>,
            $(
                #[arg(long)]
                $field: Option<String>,
            )*
        }

        impl TrainArgs {
            fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
                vec![
                    ("out", &self.out),
                    ("train", &self.train),
                    ("valid", &self.valid),
                    ("test", &self.test),
                    $((stringify!($field), &self.$field),)*
                ]
            }
        }
    };
}

override_flags!(
    encoder,
    dim,
    layers,
    tau,
    hardness_model,
    strategy,
    lr,
    lr_adv,
    batch_size,
    n_negatives,
    k_weight,
    e_adv_max,
    t_adv_interval,
    max_epochs,
    eval_every,
    patience,
    k_eval,
    seed,
);

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 20)]
    k_eval: usize,
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_users: usize,
    #[arg(long, default_value_t = 1000)]
    n_items: usize,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    relevance_quantile: f64,
    #[arg(long, default_value_t = 1.0)]
    exposure_bias_strength: f64,
    #[arg(long, default_value_t = 1.0)]
    zipf_exponent: f64,
    #[arg(long, default_value_t = 0.3)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    fn_plant_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Re-split all generated interactions with a long-tail test split.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 100)]
    n0: usize,
    #[arg(long, default_value_t = 50)]
    groups: usize,
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct DiagArgs {
    /// Repeat for one CSV row (or row block) per snapshot.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = ["profile", "fnrate", "alignuniform"])]
    which: String,
    #[arg(long)]
    out: PathBuf,
    /// Planted false negatives in raw ids (fnrate only).
    #[arg(long)]
    planted_fn: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    n_negatives: usize,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value_t = 2000)]
    batches: usize,
    #[arg(long, default_value_t = 5)]
    resamples: usize,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 5000)]
    max_pairs: usize,
    #[arg(long, default_value_t = 1000)]
    max_entities: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                3
            } else {
                2
            }
        }
    }
}

/// Reads a flat `key = value` file. Blank lines, `#`/`;` comments and
/// `[section]` headers are ignored.
pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') || line.starts_with('[') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            msg: "expected `key = value`".into(),
        })?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::BadParam(format!("`{key}`: cannot parse `{value}`")))
}

/// Applies one setting to a config; `Ok(false)` for keys it does not own.
pub fn apply_setting(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "encoder" => cfg.encoder = value.parse()?,
        "dim" => cfg.dim = parse_value(key, value)?,
        "layers" => cfg.layers = parse_value(key, value)?,
        "tau" => cfg.tau = parse_value(key, value)?,
        "hardness_model" => cfg.hardness_model = value.parse()?,
        "strategy" => cfg.strategy = value.parse()?,
        "lr" => cfg.lr = parse_value(key, value)?,
        "lr_adv" => cfg.lr_adv = parse_value(key, value)?,
        "batch_size" => cfg.batch_size = parse_value(key, value)?,
        "n_negatives" => cfg.n_negatives = parse_value(key, value)?,
        "k_weight" => cfg.k_weight = parse_value(key, value)?,
        "e_adv_max" => cfg.e_adv_max = parse_value(key, value)?,
        "t_adv_interval" => cfg.t_adv_interval = parse_value(key, value)?,
        "max_epochs" => cfg.max_epochs = parse_value(key, value)?,
        "eval_every" => cfg.eval_every = parse_value(key, value)?,
        "patience" => cfg.patience = parse_value(key, value)?,
        "k_eval" => cfg.k_eval = parse_value(key, value)?,
        "seed" => cfg.seed = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Config as `key = value` lines, in a fixed order.
pub fn config_lines(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("encoder", cfg.encoder.name().to_string()),
        ("dim", cfg.dim.to_string()),
        ("layers", cfg.layers.to_string()),
        ("tau", cfg.tau.to_string()),
        ("hardness_model", cfg.hardness_model.name().to_string()),
        ("strategy", cfg.strategy.name().to_string()),
        ("lr", cfg.lr.to_string()),
        ("lr_adv", cfg.lr_adv.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("n_negatives", cfg.n_negatives.to_string()),
        ("k_weight", cfg.k_weight.to_string()),
        ("e_adv_max", cfg.e_adv_max.to_string()),
        ("t_adv_interval", cfg.t_adv_interval.to_string()),
        ("max_epochs", cfg.max_epochs.to_string()),
        ("eval_every", cfg.eval_every.to_string()),
        ("patience", cfg.patience.to_string()),
        ("k_eval", cfg.k_eval.to_string()),
        ("seed", cfg.seed.to_string()),
    ]
}

fn required(settings: &BTreeMap<String, String>, key: &str) -> Result<PathBuf> {
    settings
        .get(key)
        .map(PathBuf::from)
        .ok_or_else(|| Error::BadParam(format!("missing `{key}` (flag --{key} or config key)")))
}

fn load_data(train: &Path, valid: &Path, test: &Path) -> Result<InteractionSet> {
    load_interactions(train, valid, test)
}

fn data_paths(d: &DataArgs) -> Result<(PathBuf, PathBuf, PathBuf)> {
    let get = |p: &Option<PathBuf>, k: &str| p.clone().ok_or_else(|| Error::BadParam(format!("missing --{k}")));
    Ok((get(&d.train, "train")?, get(&d.valid, "valid")?, get(&d.test, "test")?))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut settings = match &a.config {
        Some(p) => read_config(p)?,
        None => BTreeMap::new(),
    };
    for (key, value) in a.overrides() {
        if let Some(v) = value {
            settings.insert(key.to_string(), v.clone());
        }
    }
    let mut cfg = TrainConfig::default();
    for (key, value) in &settings {
        if !apply_setting(&mut cfg, key, value)? && !["out", "train", "valid", "test"].contains(&key.as_str()) {
            return Err(Error::BadParam(format!("unknown config key `{key}`")));
        }
    }
    cfg.validate()?;
    let (train, valid, test) = (
        required(&settings, "train")?,
        required(&settings, "valid")?,
        required(&settings, "test")?,
    );
    let out = required(&settings, "out")?;
    let set = load_data(&train, &valid, &test)?;
    create_dir(&out)?;

    let mut snapshot = String::new();
    for (key, path) in [("train", &train), ("valid", &valid), ("test", &test), ("out", &out)] {
        snapshot.push_str(&format!("{key} = {}\n", path.display()));
    }
    for (key, value) in config_lines(&cfg) {
        snapshot.push_str(&format!("{key} = {value}\n"));
    }
    write_file(&out.join("config.ini"), &snapshot)?;

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut io_err = None;
    let outcome = run_training(&set, &cfg, &mut |r| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  recall@{} {:.5}  ndcg@{} {:.5}  e_adv {}",
            r.epoch, r.loss, r.k, r.recall, r.k, r.ndcg, r.e_adv
        );
        if let Err(e) = writeln!(metrics, "{}", r.to_line()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&metrics_path, e));
    }
    write_checkpoint(&out.join("best.ckpt"), &outcome.best_encoder, &outcome.best_hardness)?;
    write_checkpoint(&out.join("final.ckpt"), &outcome.state.encoder, &outcome.state.hardness)?;
    eprintln!("best epoch {} of {}", outcome.best_epoch, outcome.state.epoch);
    Ok(())
}

fn cmd_evaluate(a: &EvalArgs) -> Result<()> {
    let (train, valid, test) = data_paths(&a.data)?;
    let split: Split = a.split.parse()?;
    let set = load_data(&train, &valid, &test)?;
    let (encoder, _) = read_checkpoint(&a.checkpoint, Some(&set))?;
    let r = evaluate(&encoder, &set, split, a.k_eval, None)?;
    let mut m = serde_json::Map::new();
    m.insert("split".into(), json!(split.name()));
    m.insert(format!("hr@{}", r.k), json!(r.hr));
    m.insert(format!("recall@{}", r.k), json!(r.recall));
    m.insert(format!("ndcg@{}", r.k), json!(r.ndcg));
    m.insert("n_users".into(), json!(r.n_users));
    println!("{}", serde_json::Value::Object(m));
    Ok(())
}

fn raw_pairs(pairs: &[(usize, usize)]) -> Vec<(u64, u64)> {
    pairs.iter().map(|&(u, i)| (u as u64, i as u64)).collect()
}

fn cmd_generate(a: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_users: a.n_users,
        n_items: a.n_items,
        latent_dim: a.latent_dim,
        relevance_quantile: a.relevance_quantile,
        exposure_bias_strength: a.exposure_bias_strength,
        zipf_exponent: a.zipf_exponent,
        train_fraction: a.train_fraction,
        fn_plant_rate: a.fn_plant_rate,
        seed: a.seed,
    };
    let data = generate_synthetic(&spec)?;
    create_dir(&a.out)?;
    let mut manifest = serde_json::Map::new();
    let (set, planted) = match a.gamma {
        None => (data.set, data.planted_fn),
        Some(gamma) => {
            let mut pool = Vec::new();
            for split in [Split::Train, Split::Valid, Split::Test] {
                pool.extend(data.set.pairs(split));
            }
            let mut rng = substream(a.seed, "generate.gamma");
            let g = gamma_split(spec.n_users, spec.n_items, &pool, gamma, a.groups, a.n0, &mut rng)?;
            let planted: Vec<(usize, usize)> = data
                .planted_fn
                .into_iter()
                .filter(|&(u, i)| g.set.positives(Split::Test, u).binary_search(&i).is_ok())
                .collect();
            manifest.insert("gamma".into(), json!(gamma));
            manifest.insert("n0".into(), json!(a.n0));
            manifest.insert("groups".into(), json!(a.groups));
            manifest.insert("quotas".into(), json!(g.quotas));
            manifest.insert("drawn".into(), json!(g.drawn));
            (g.set, planted)
        }
    };
    set.write_dir(&a.out)?;
    write_pairs(&a.out.join("planted_fn.tsv"), &raw_pairs(&planted))?;
    let mut ini = String::new();
    for (k, v) in [
        ("n_users", spec.n_users.to_string()),
        ("n_items", spec.n_items.to_string()),
        ("latent_dim", spec.latent_dim.to_string()),
        ("relevance_quantile", spec.relevance_quantile.to_string()),
        ("exposure_bias_strength", spec.exposure_bias_strength.to_string()),
        ("zipf_exponent", spec.zipf_exponent.to_string()),
        ("train_fraction", spec.train_fraction.to_string()),
        ("fn_plant_rate", spec.fn_plant_rate.to_string()),
        ("seed", spec.seed.to_string()),
    ] {
        ini.push_str(&format!("{k} = {v}\n"));
    }
    if let Some(g) = a.gamma {
        ini.push_str(&format!("gamma = {g}\nn0 = {}\ngroups = {}\n", a.n0, a.groups));
    }
    write_file(&a.out.join("spec.ini"), &ini)?;
    manifest.insert("n_users".into(), json!(set.n_users()));
    manifest.insert("n_items".into(), json!(set.n_items()));
    for split in [Split::Train, Split::Valid, Split::Test] {
        manifest.insert(format!("n_{}", split.name()), json!(set.n_pairs(split)));
    }
    manifest.insert("n_planted_fn".into(), json!(planted.len()));
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(manifest)).expect("json map");
    write_file(&a.out.join("manifest.json"), &(text + "\n"))
}

fn snapshot_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_diagnose(a: &DiagArgs) -> Result<()> {
    let (train, valid, test) = data_paths(&a.data)?;
    let set = load_data(&train, &valid, &test)?;
    let planted = match (&a.which[..], &a.planted_fn) {
        ("fnrate", Some(p)) => set.map_raw_pairs(&read_pairs(p)?),
        _ => Vec::new(),
    };
    if a.which == "fnrate" && planted.is_empty() {
        return Err(Error::EmptyFnList);
    }
    let mut csv = match &a.which[..] {
        "profile" => "snapshot,bin,mean_p,count,uniform\n".to_string(),
        "fnrate" => "snapshot,rate,n_pairs,resamples\n".to_string(),
        _ => "snapshot,align,uniform\n".to_string(),
    };
    for ck in &a.checkpoint {
        let (encoder, hardness) = read_checkpoint(ck, Some(&set))?;
        let name = snapshot_name(ck);
        let mut rng = substream(a.seed, &format!("diagnose.{}", a.which));
        match &a.which[..] {
            "profile" => {
                let prof =
                    hardness_popularity_profile(&hardness, &encoder, &set, a.bins, a.batches, a.n_negatives, &mut rng)?;
                for b in prof {
                    csv.push_str(&format!(
                        "{name},{},{:e},{},{:e}\n",
                        b.bin,
                        b.mean_p,
                        b.count,
                        1.0 / a.n_negatives as f64
                    ));
                }
            }
            "fnrate" => {
                let rate = fn_identification_rate(
                    &hardness,
                    &planted,
                    &encoder,
                    &set,
                    a.n_negatives,
                    a.resamples,
                    &mut rng,
                )?;
                csv.push_str(&format!("{name},{rate:e},{},{}\n", planted.len(), a.resamples));
            }
            _ => {
                let split: Split = a.split.parse()?;
                let (align, uniform) =
                    encoder_alignment_uniformity(&encoder, &set, split, a.max_pairs, a.max_entities, &mut rng)?;
                csv.push_str(&format!("{name},{align:e},{uniform:e}\n"));
            }
        }
    }
    create_dir(&a.out)?;
    write_file(&a.out.join(format!("{}.csv", a.which)), &csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_settings() {
        let cfg = TrainConfig {
            lr: 3e-4,
            strategy: crate::trainer::HardnessStrategy::Reverse,
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        for (k, v) in config_lines(&cfg) {
            assert!(apply_setting(&mut back, k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!apply_setting(&mut back, "nope", "1").unwrap());
        assert!(apply_setting(&mut back, "lr", "abc").is_err());
    }

    #[test]
    fn read_config_skips_comments_and_reports_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ini");
        std::fs::write(&p, "# c\n[train]\nlr = 0.5\n\nseed=3\n").unwrap();
        let m = read_config(&p).unwrap();
        assert_eq!(m["lr"], "0.5");
        assert_eq!(m["seed"], "3");
        std::fs::write(&p, "lr 0.5\n").unwrap();
        assert!(matches!(read_config(&p), Err(Error::Parse { line: 1, .. })));
    }
}
