//! Command-line front end for the place-recognition pipeline. All logic
//! lives in the library; this binary only parses flags, resolves them
//! against an optional key=value config file, and wires files together.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use vpr::backbone::{backbone_forward, AdapterMode};
use vpr::bench::{benchmark_rerank, write_bench_csv, BenchConfig, Precision};
use vpr::config::{get_parsed, load_config_file};
use vpr::dataset::load_split;
use vpr::features::{FeatureFile, FeatureRecord};
use vpr::gradcheck::{check_model_gradients, random_batch, GradCheckConfig};
use vpr::heatmap::{channel_mean_map, write_heatmap_csv, write_heatmap_pgm};
use vpr::imageio::read_ppm;
use vpr::index::{recall_at_n, two_stage_query, MatchThresholds, PlaceIndex, QueryFeatures, RankedQuery, RerankMode};
use vpr::loss::LossConfig;
use vpr::manifest::{load_manifest, ManifestEntry, Split};
use vpr::model::{Model, ModelConfig};
use vpr::trainer::{count_parameters, train, write_history_csv, MiningConfig, TrainConfig};
use vpr::world::{generate_synth_world, write_synth_world, SynthWorldConfig};
use vpr::{Error, Result};

#[derive(Parser)]
#[command(name = "vpr", version, about = "Two-stage visual place recognition: global retrieval plus local-feature re-ranking")]
struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Arithmetic width for benchmark kernels (f32 or f64).
    #[arg(long, global = true)]
    precision: Option<String>,
    /// Flat key=value config file; explicit flags win over file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world of places with variants and aliased pairs.
    Synth(SynthArgs),
    /// Extract global and local features for every manifest entry.
    Extract(ExtractArgs),
    /// Build a searchable index file from extracted features.
    Index(IndexArgs),
    /// Run two-stage queries against an index.
    Query(QueryArgs),
    /// Compute Recall@N for a query set.
    Evaluate(EvaluateArgs),
    /// Fine-tune adapters and the local head on a training split.
    Train(TrainArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Report parameter counts under a freeze policy.
    Params(ParamsArgs),
    /// Measure re-ranking cost scaling in k and grid size.
    Bench(BenchArgs),
    /// Emit the channel-mean heatmap of an image's feature map.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (images/ plus manifest.jsonl).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    places: Option<usize>,
    #[arg(long)]
    variants: Option<usize>,
    #[arg(long)]
    aliasing_pairs: Option<usize>,
    #[arg(long)]
    spacing_m: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Manifest written by `synth` (or hand-made, same schema).
    #[arg(long)]
    manifest: PathBuf,
    /// Output feature file.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to extract with; omitted means a fresh seeded model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Restrict to one split (database, query, train, val); default all.
    #[arg(long)]
    split: Option<String>,
    /// Fill the fresh model's adapters with noise of this std dev.
    #[arg(long)]
    random_adapters: Option<f64>,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    /// Index file to search.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Database feature file to search instead (keeps patch grids, which
    /// the index format does not store; required for --rerank patches).
    #[arg(long)]
    db_features: Option<PathBuf>,
    /// Feature file holding the queries.
    #[arg(long)]
    queries: PathBuf,
    /// Query a single record id; default runs every record.
    #[arg(long)]
    id: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    /// dense, patches or none.
    #[arg(long)]
    rerank: Option<String>,
    /// CSV destination; default stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    db_features: Option<PathBuf>,
    #[arg(long)]
    queries: PathBuf,
    /// Comma-separated N values.
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    dist_m: Option<f64>,
    #[arg(long)]
    heading_deg: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// dense, patches or none (default none: global-only ranking).
    #[arg(long)]
    rerank: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Where the best checkpoint is written.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// none, serial_only, parallel_only or both (fresh models only).
    #[arg(long)]
    adapter_mode: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epoch_queries: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Comma-separated frozen groups; default freezes the backbone when
    /// adapters are enabled.
    #[arg(long)]
    freeze: Option<String>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    positive_radius_m: Option<f64>,
    #[arg(long)]
    negative_radius_m: Option<f64>,
    #[arg(long)]
    negative_pool: Option<usize>,
    #[arg(long)]
    hard_negatives: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    kink_tol: Option<f64>,
    /// Triplets in the probed batch.
    #[arg(long)]
    triplets: Option<usize>,
    /// Negatives per triplet.
    #[arg(long)]
    negatives: Option<usize>,
    /// Maximum accepted relative error.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct ParamsArgs {
    /// desk or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    adapter_mode: Option<String>,
    /// Comma-separated frozen groups; default policy for the model.
    #[arg(long)]
    freeze: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated candidate counts.
    #[arg(long)]
    k: Option<String>,
    /// Comma-separated grid sides (locations are side^2).
    #[arg(long)]
    sides: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    /// PPM image to map.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_pgm: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

/// Flag values resolved against the config file: explicit flag, then file
/// key (the flag's long name), then the built-in default.
struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: &Option<PathBuf>) -> Result<Settings> {
        Ok(Settings {
            map: match path {
                Some(p) => load_config_file(p)?,
                None => BTreeMap::new(),
            },
        })
    }

    fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        Ok(match flag {
            Some(v) => v,
            None => get_parsed(&self.map, key)?.unwrap_or(default),
        })
    }

    fn get_opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        Ok(match flag {
            Some(v) => Some(v),
            None => get_parsed(&self.map, key)?,
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(&cli.config)?;
    let seed = settings.get("seed", cli.seed, 17)?;
    let precision = Precision::parse(&settings.get("precision", cli.precision, "f64".to_string())?)?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a, &settings, seed),
        Command::Extract(a) => cmd_extract(a, &settings, seed),
        Command::Index(a) => cmd_index(a),
        Command::Query(a) => cmd_query(a, &settings),
        Command::Evaluate(a) => cmd_evaluate(a, &settings),
        Command::Train(a) => cmd_train(a, &settings, seed),
        Command::Gradcheck(a) => cmd_gradcheck(a, &settings, seed),
        Command::Params(a) => cmd_params(a, &settings),
        Command::Bench(a) => cmd_bench(a, &settings, seed, precision),
        Command::Heatmap(a) => cmd_heatmap(a, seed),
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("cannot parse '{t}' as an integer")))
        })
        .collect()
}

fn load_or_init_model(checkpoint: &Option<PathBuf>, config: ModelConfig, seed: u64) -> Result<Model> {
    match checkpoint {
        Some(p) => Model::load(p),
        None => Model::init(config, seed),
    }
}

fn cmd_synth(a: SynthArgs, s: &Settings, seed: u64) -> Result<()> {
    let defaults = SynthWorldConfig::default();
    let config = SynthWorldConfig {
        num_places: s.get("places", a.places, defaults.num_places)?,
        variants_per_place: s.get("variants", a.variants, defaults.variants_per_place)?,
        aliasing_pairs: s.get("aliasing-pairs", a.aliasing_pairs, defaults.aliasing_pairs)?,
        place_spacing_m: s.get("spacing-m", a.spacing_m, defaults.place_spacing_m)?,
        image_size: s.get("image-size", a.image_size, defaults.image_size)?,
        seed,
        ..defaults
    };
    let world = generate_synth_world(&config)?;
    write_synth_world(&a.out, &world)?;
    println!(
        "wrote {} images ({} places x {} variants) to {}",
        world.images.len(),
        config.num_places,
        config.variants_per_place,
        a.out.display()
    );
    Ok(())
}

fn manifest_entries(path: &Path, split: Option<Split>) -> Result<(PathBuf, Vec<ManifestEntry>)> {
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = load_manifest(path)?;
    if let Some(split) = split {
        entries.retain(|e| e.split == split);
    }
    Ok((root, entries))
}

fn cmd_extract(a: ExtractArgs, s: &Settings, seed: u64) -> Result<()> {
    let split = match s.get_opt("split", a.split)? {
        None => None,
        Some(ref t) if t == "all" => None,
        Some(t) => Some(Split::parse(&t)?),
    };
    let (root, entries) = manifest_entries(&a.manifest, split)?;
    if entries.is_empty() {
        return Err(Error::invalid("no manifest entries selected"));
    }
    let mut model = load_or_init_model(&a.checkpoint, ModelConfig::desk(), seed)?;
    if let Some(std) = s.get_opt("random-adapters", a.random_adapters)? {
        model.randomize_adapters(seed, std);
    }
    let records: Vec<FeatureRecord> = entries
        .par_iter()
        .map(|e| {
            let img = read_ppm(&root.join(&e.image_path))?;
            let f = model.extract(&img)?;
            Ok(FeatureRecord {
                id: e.id,
                lat: e.lat,
                lon: e.lon,
                heading: e.heading_deg,
                global: f.global,
                local: f.local,
                patches: f.patches,
            })
        })
        .collect::<Result<_>>()?;
    let first = &records[0];
    let mut file = FeatureFile::new(
        first.global.len(),
        (first.local.height(), first.local.width(), first.local.channels()),
        (first.patches.height(), first.patches.width(), first.patches.channels()),
    );
    for r in records {
        file.push(r)?;
    }
    file.save(&a.out)?;
    println!("extracted {} records to {}", file.records().len(), a.out.display());
    Ok(())
}

fn cmd_index(a: IndexArgs) -> Result<()> {
    let features = FeatureFile::load(&a.features)?;
    let index = features.build_index()?;
    index.save(&a.out)?;
    println!("indexed {} records to {}", index.len(), a.out.display());
    Ok(())
}

/// An index from either an .svpr file or a feature file. Only the latter
/// carries patch grids, so the patches re-rank mode needs it.
fn open_index(index: &Option<PathBuf>, db_features: &Option<PathBuf>) -> Result<PlaceIndex> {
    match (index, db_features) {
        (Some(p), None) => PlaceIndex::load(p),
        (None, Some(p)) => FeatureFile::load(p)?.build_index(),
        _ => Err(Error::invalid(
            "pass exactly one of --index and --db-features",
        )),
    }
}

fn cmd_query(a: QueryArgs, s: &Settings) -> Result<()> {
    let k = s.get("k", a.k, 100)?;
    let mode = RerankMode::parse(&s.get("rerank", a.rerank, "dense".to_string())?)?;
    let index = open_index(&a.index, &a.db_features)?;
    let queries = FeatureFile::load(&a.queries)?;
    let selected: Vec<&FeatureRecord> = match a.id {
        Some(id) => vec![queries
            .record_by_id(id)
            .ok_or_else(|| Error::invalid(format!("no query record with id {id}")))?],
        None => queries.records().iter().collect(),
    };
    let mut out = String::from("query_id,rank,result_id,global_distance,match_count\n");
    for q in selected {
        let result = two_stage_query(
            &index,
            &QueryFeatures {
                global: &q.global,
                local: Some(&q.local),
                patches: Some(&q.patches),
            },
            k,
            mode,
        )?;
        for (rank, hit) in result.hits.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{:.6},{}\n",
                q.id,
                rank + 1,
                hit.id,
                hit.global_distance,
                hit.match_count
            ));
        }
    }
    match a.out {
        Some(p) => std::fs::write(p, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, s: &Settings) -> Result<()> {
    let ns = parse_usize_list(&s.get("n", a.n, "1,5,10".to_string())?)?;
    let thresholds = MatchThresholds {
        distance_m: s.get("dist-m", a.dist_m, 25.0)?,
        heading_deg: s.get_opt("heading-deg", a.heading_deg)?,
    };
    let k = s.get("k", a.k, 100)?;
    let mode = RerankMode::parse(&s.get("rerank", a.rerank, "none".to_string())?)?;
    let index = open_index(&a.index, &a.db_features)?;
    let queries = FeatureFile::load(&a.queries)?;
    if queries.records().is_empty() {
        return Err(Error::invalid("query feature file is empty"));
    }
    let ranked: Vec<RankedQuery> = queries
        .records()
        .par_iter()
        .map(|q| {
            let result = two_stage_query(
                &index,
                &QueryFeatures {
                    global: &q.global,
                    local: Some(&q.local),
                    patches: Some(&q.patches),
                },
                k,
                mode,
            )?;
            Ok(RankedQuery {
                lat: q.lat,
                lon: q.lon,
                heading: q.heading,
                ranked_ids: result.hits.iter().map(|h| h.id).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let recalls = recall_at_n(&index, &ranked, &thresholds, &ns)?;
    let mut out = String::from("N,recall_percent\n");
    for (n, r) in recalls {
        out.push_str(&format!("{n},{r:.4}\n"));
    }
    match a.out {
        Some(p) => std::fs::write(p, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, s: &Settings, seed: u64) -> Result<()> {
    let mut config = ModelConfig::desk();
    if let Some(mode) = s.get_opt("adapter-mode", a.adapter_mode)? {
        config.backbone.adapter_mode = AdapterMode::parse(&mode)?;
    }
    let mut model = load_or_init_model(&a.checkpoint, config, seed)?;

    let mut train_cfg = TrainConfig::desk_default(seed, &model.config);
    train_cfg.learning_rate = s.get("lr", a.lr, train_cfg.learning_rate)?;
    train_cfg.batch_size = s.get("batch-size", a.batch_size, train_cfg.batch_size)?;
    train_cfg.epoch_queries = s.get("epoch-queries", a.epoch_queries, train_cfg.epoch_queries)?;
    train_cfg.patience_epochs = s.get("patience", a.patience, train_cfg.patience_epochs)?;
    train_cfg.max_epochs = s.get("max-epochs", a.max_epochs, train_cfg.max_epochs)?;
    if let Some(freeze) = s.get_opt("freeze", a.freeze)? {
        train_cfg.freeze_policy = freeze
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.trim().to_string())
            .collect::<BTreeSet<String>>();
    }

    let defaults = MiningConfig::default();
    let mining = MiningConfig {
        positive_radius_m: s.get("positive-radius-m", a.positive_radius_m, defaults.positive_radius_m)?,
        negative_radius_m: s.get("negative-radius-m", a.negative_radius_m, defaults.negative_radius_m)?,
        negative_pool: s.get("negative-pool", a.negative_pool, defaults.negative_pool)?,
        hard_negatives: s.get("hard-negatives", a.hard_negatives, defaults.hard_negatives)?,
    };
    let loss_cfg = LossConfig {
        margin: s.get("margin", a.margin, 0.1)?,
        lambda: s.get("lambda", a.lambda, 1.0)?,
    };

    let (root, entries) = manifest_entries(&a.manifest, None)?;
    let train_set = load_split(&root, &entries, Split::Train)?;
    let val_db = load_split(&root, &entries, Split::Database)?;
    let val_queries = load_split(&root, &entries, Split::Val)?;

    let outcome = train(
        &mut model,
        &train_set,
        &val_db,
        &val_queries,
        &train_cfg,
        &mining,
        &loss_cfg,
    )?;
    outcome.best.save(&a.out)?;
    if let Some(p) = &a.history {
        write_history_csv(p, &outcome.history)?;
    }
    for st in &outcome.history {
        println!(
            "epoch {}: loss {:.6}, val R@1 {:.2}, val R@5 {:.2} ({:.1}s)",
            st.epoch, st.train_loss, st.val_r1, st.val_r5, st.wall_seconds
        );
    }
    println!(
        "best epoch {} (val R@5 {:.2}) saved to {}",
        outcome.best_epoch,
        outcome.best_val_r5,
        a.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, s: &Settings, seed: u64) -> Result<()> {
    let defaults = GradCheckConfig::default();
    let cfg = GradCheckConfig {
        samples: s.get("samples", a.samples, defaults.samples)?,
        step: s.get("step", a.step, defaults.step)?,
        kink_tol: s.get("kink-tol", a.kink_tol, defaults.kink_tol)?,
        seed,
        ..defaults
    };
    let tol = s.get("tol", a.tol, 1e-4)?;
    let triplets = s.get("triplets", a.triplets, 2)?;
    let negatives = s.get("negatives", a.negatives, 2)?;

    let mut model = Model::init(ModelConfig::desk(), seed)?;
    model.randomize_adapters(seed.wrapping_add(1), 0.05);
    let batch = random_batch(&model.config, triplets, negatives, seed.wrapping_add(2));
    let report = check_model_gradients(&model, &batch, &LossConfig::default(), &cfg)?;
    println!(
        "checked {} coordinates ({} skipped at kinks), max relative error {:.3e} at {}",
        report.checked,
        report.skipped,
        report.max_rel_err,
        report.worst_label.as_deref().unwrap_or("n/a")
    );
    if report.max_rel_err >= tol {
        return Err(Error::invalid(format!(
            "gradient check failed: {:.3e} >= {tol:.1e}",
            report.max_rel_err
        )));
    }
    Ok(())
}

fn cmd_params(a: ParamsArgs, s: &Settings) -> Result<()> {
    let preset = s.get("preset", a.preset, "desk".to_string())?;
    let mut config = match preset.as_str() {
        "desk" => ModelConfig::desk(),
        "paper" => ModelConfig::vit_large(),
        other => return Err(Error::invalid(format!("unknown preset '{other}'"))),
    };
    if let Some(mode) = s.get_opt("adapter-mode", a.adapter_mode)? {
        config.backbone.adapter_mode = AdapterMode::parse(&mode)?;
    }
    let model = Model::init(config, 0)?;
    let policy = match s.get_opt("freeze", a.freeze)? {
        Some(freeze) => freeze
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.trim().to_string())
            .collect(),
        None => TrainConfig::default_freeze(&model.config),
    };
    let report = count_parameters(&model, &policy);
    println!("group,params,frozen");
    for (name, count, frozen) in &report.groups {
        println!("{name},{count},{frozen}");
    }
    println!(
        "total {} = tunable {} + frozen {} (tunable ratio {:.5})",
        report.total_params,
        report.tunable_params,
        report.frozen_params,
        report.tunable_params as f64 / report.total_params as f64
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs, s: &Settings, seed: u64, precision: Precision) -> Result<()> {
    let defaults = BenchConfig::default();
    let cfg = BenchConfig {
        k_values: parse_usize_list(&s.get("k", a.k, "10,25,50,100".to_string())?)?,
        grid_sides: parse_usize_list(&s.get("sides", a.sides, "8,15,29".to_string())?)?,
        local_dim: s.get("dim", a.dim, defaults.local_dim)?,
        queries: s.get("queries", a.queries, defaults.queries)?,
        repeats: s.get("repeats", a.repeats, defaults.repeats)?,
        precision,
        seed,
        ..defaults
    };
    let report = benchmark_rerank(&cfg)?;
    println!("sweep,k,locations,per_query_seconds");
    for r in &report.rows {
        println!("{},{},{},{:.9}", r.sweep, r.k, r.locations, r.per_query_seconds);
    }
    println!(
        "slope vs k: {:.3} (expect ~1), slope vs locations: {:.3} (expect ~2)",
        report.slope_k, report.slope_locations
    );
    if let Some(p) = &a.out {
        write_bench_csv(p, &report)?;
    }
    Ok(())
}

fn cmd_heatmap(a: HeatmapArgs, seed: u64) -> Result<()> {
    if a.out_pgm.is_none() && a.out_csv.is_none() {
        return Err(Error::invalid("pass --out-pgm and/or --out-csv"));
    }
    let model = load_or_init_model(&a.checkpoint, ModelConfig::desk(), seed)?;
    let img = read_ppm(&a.image)?;
    let out = backbone_forward(&img, &model.backbone, &model.config.backbone)?;
    let map = channel_mean_map(&out.feature_map)?;
    if let Some(p) = &a.out_pgm {
        write_heatmap_pgm(p, &map)?;
    }
    if let Some(p) = &a.out_csv {
        write_heatmap_csv(p, &map)?;
    }
    println!("heatmap {}x{} written", map.height, map.width);
    Ok(())
}
