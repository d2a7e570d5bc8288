use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use voxlang::geometry::{load_pointcloud, voxelize, VoxelGrid};
use voxlang::harness::{self, Config, DataSpec, Dataset, Preset, TrainData, TrainState};
use voxlang::metrics::{evaluate, recall_at_k};
use voxlang::router::dump::{PredictionDump, SceneRecord, ShapeRecord};
use voxlang::tensor::{AdamW, AdamWConfig};

#[derive(Parser)]
#[command(name = "voxlang", version, about = "Point-cloud and language model toolkit")]
struct Cli {
    /// Config file of `key = value` lines applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model checkpoint to load.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, its manifest and a ground-truth dump.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 16)]
        shapes: usize,
        #[arg(long, default_value_t = 2)]
        min_instances: usize,
        #[arg(long, default_value_t = 4)]
        max_instances: usize,
        /// Referring sentences per scene.
        #[arg(long, default_value_t = 2)]
        referrals: usize,
    },
    /// Train from scratch, resume from `--checkpoint`, or finetune it.
    Train {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Finetune schedule applied to the checkpoint's weights.
        #[arg(long)]
        finetune: Option<String>,
        /// Stop after this many total steps.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Score a prediction dump against a ground-truth dump.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Manifest supplying class names for the per-class breakdown.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Semantic segmentation.
    InferSeg(Source),
    /// Instance segmentation.
    InferInst(Source),
    /// Grounded segmentation of referring sentences.
    Ground {
        #[command(flatten)]
        source: Source,
        /// Sentence to ground (with `--input`); repeatable.
        #[arg(long = "sentence")]
        sentences: Vec<String>,
    },
    /// Caption shapes.
    Caption {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
    },
    /// Shape-text similarity and recall.
    Retrieve {
        #[command(flatten)]
        source: Source,
        /// Candidate text (with `--input`); repeatable.
        #[arg(long = "text")]
        texts: Vec<String>,
    },
    /// Classify shapes against the class names.
    Classify(Source),
}

#[derive(Args)]
struct Source {
    /// Point cloud file (UPC); repeatable for `retrieve`.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    input: Vec<PathBuf>,
    /// Run over every scene or shape in a dataset manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write the prediction dump here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn usage_error(msg: &str) -> ! {
    Cli::command().error(clap::error::ErrorKind::MissingRequiredArgument, msg).exit()
}

fn load_config(cli: &Cli) -> Result<Config> {
    let preset = match cli.preset {
        PresetArg::Paper => Preset::Paper,
        PresetArg::Desk => Preset::Desk,
    };
    let mut c = Config::load(preset, cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn load_model(cli: &Cli) -> Result<TrainState> {
    let Some(path) = &cli.checkpoint else {
        usage_error("this command requires --checkpoint");
    };
    TrainState::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned())
}

fn emit_dump(dump: &PredictionDump, output: &Option<PathBuf>) -> Result<()> {
    match output {
        Some(p) => dump.save(p)?,
        None => print!("{}", dump.to_text()),
    }
    Ok(())
}

/// Named voxel grids from `--input` files or the manifest's scenes/shapes.
fn grids(src: &Source, voxel: f64, shapes: bool) -> Result<Vec<(String, VoxelGrid)>> {
    if let Some(m) = &src.manifest {
        let ds = Dataset::load(m)?;
        let clouds = if shapes { &ds.shape_clouds } else { &ds.scene_clouds };
        let names: Vec<String> = if shapes {
            ds.manifest.shapes.iter().map(|s| s.name.clone()).collect()
        } else {
            ds.manifest.scenes.iter().map(|s| s.name.clone()).collect()
        };
        return names
            .into_iter()
            .zip(clouds)
            .map(|(n, c)| Ok((n, voxelize(c, voxel)?)))
            .collect();
    }
    src.input
        .iter()
        .map(|p| Ok((stem(p), voxelize(&load_pointcloud(p)?, voxel)?)))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::GenData {
            out,
            scenes,
            shapes,
            min_instances,
            max_instances,
            referrals,
        } => {
            let c = load_config(&cli)?;
            let spec = DataSpec {
                scenes: *scenes,
                min_instances: *min_instances,
                max_instances: *max_instances,
                referrals: *referrals,
                shapes: *shapes,
                scene_voxel: c.scene_voxel,
                shape_voxel: c.shape_voxel,
            };
            let ds = harness::generate(&spec, c.seed)?;
            let manifest = ds.save(out)?;
            ds.ground_truth(c.scene_voxel)?.save(out.join("gt.dump"))?;
            println!("{}", manifest.display());
        }
        Command::Train {
            data,
            out,
            finetune,
            stop_at,
        } => {
            if cli.checkpoint.is_some() && cli.config.is_some() {
                bail!("--config cannot change a checkpoint's configuration");
            }
            let ds = Dataset::load(data)?;
            let mut state = match (&cli.checkpoint, finetune) {
                (None, Some(_)) => usage_error("--finetune requires --checkpoint"),
                (None, None) => TrainState::init(load_config(&cli)?, &ds)?,
                (Some(_), None) => load_model(&cli)?,
                (Some(_), Some(name)) => {
                    let mut st = load_model(&cli)?;
                    st.config.apply_finetune(name)?;
                    if let Some(s) = cli.seed {
                        st.config.seed = s;
                    }
                    st.step = 0;
                    st.optimizer = AdamW::new(
                        AdamWConfig {
                            weight_decay: st.config.train.weight_decay,
                            ..AdamWConfig::default()
                        },
                        &st.store,
                    );
                    st
                }
            };
            let data = TrainData::new(ds, &state.config)?;
            let rows = harness::train(&mut state, &data, out, *stop_at)?;
            let last = rows.last().map_or(f64::NAN, |r| r.total);
            if cli.json {
                println!("{{\"steps\": {}, \"final_total\": {}}}", state.step, if last.is_finite() { format!("{last:?}") } else { "null".into() });
            } else {
                println!("trained to step {}; last total loss {last:.6}", state.step);
            }
        }
        Command::Eval { pred, gt, manifest, csv } => {
            let p = PredictionDump::load(pred)?;
            let g = PredictionDump::load(gt)?;
            let names = match manifest {
                Some(m) => Dataset::load(m)?.manifest.classes,
                None => {
                    let k = g
                        .scenes
                        .iter()
                        .flat_map(|s| s.semantic.iter().flatten().copied().chain(s.instances.iter().map(|i| i.class)))
                        .chain(g.shapes.iter().filter_map(|s| s.class))
                        .chain(p.scenes.iter().flat_map(|s| s.semantic.iter().flatten().copied()))
                        .max()
                        .map_or(0, |m| m + 1);
                    (0..k).map(|i| i.to_string()).collect()
                }
            };
            let report = evaluate(&p, &g, &names)?;
            if let Some(c) = csv {
                std::fs::write(c, report.to_csv()).with_context(|| format!("writing {}", c.display()))?;
            }
            if cli.json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::InferSeg(src) | Command::InferInst(src) => {
            let st = load_model(&cli)?;
            let semantic = matches!(cli.command, Command::InferSeg(_));
            let mut dump = PredictionDump::default();
            for (name, grid) in grids(src, st.config.scene_voxel, false)? {
                let mut rec = SceneRecord {
                    name,
                    voxels: grid.len(),
                    ..SceneRecord::default()
                };
                if semantic {
                    rec.semantic = Some(st.model.infer_semantic(&st.store, &grid, seed)?);
                } else {
                    rec.instances = st.model.infer_instances(&st.store, &grid, seed)?;
                }
                dump.scenes.push(rec);
            }
            emit_dump(&dump, &src.output)?;
        }
        Command::Ground { source, sentences } => {
            let st = load_model(&cli)?;
            let per_scene: Vec<Vec<String>> = match &source.manifest {
                Some(m) => Dataset::load(m)?
                    .manifest
                    .scenes
                    .iter()
                    .map(|s| s.referrals.iter().map(|r| r.sentence.clone()).collect())
                    .collect(),
                None if sentences.is_empty() => usage_error("ground --input requires at least one --sentence"),
                None => vec![sentences.clone(); source.input.len()],
            };
            let mut dump = PredictionDump::default();
            for ((name, grid), sents) in grids(source, st.config.scene_voxel, false)?.into_iter().zip(per_scene) {
                let masks = if sents.is_empty() {
                    Vec::new()
                } else {
                    st.model.ground(&st.store, &grid, &sents, seed)?
                };
                dump.scenes.push(SceneRecord {
                    name,
                    voxels: grid.len(),
                    referrals: masks.into_iter().enumerate().collect(),
                    ..SceneRecord::default()
                });
            }
            emit_dump(&dump, &source.output)?;
        }
        Command::Caption { source, max_len } => {
            let st = load_model(&cli)?;
            let shapes = grids(source, st.config.shape_voxel, true)?;
            if source.manifest.is_none() && source.output.is_none() {
                for (_, g) in &shapes {
                    println!("{}", st.model.caption(&st.store, g, *max_len, seed)?);
                }
            } else {
                let mut dump = PredictionDump::default();
                for (name, g) in &shapes {
                    dump.shapes.push(ShapeRecord {
                        name: name.clone(),
                        caption: Some(st.model.caption(&st.store, g, *max_len, seed)?),
                        ..ShapeRecord::default()
                    });
                }
                emit_dump(&dump, &source.output)?;
            }
        }
        Command::Classify(src) => {
            let st = load_model(&cli)?;
            let shapes = grids(src, st.config.shape_voxel, true)?;
            if src.manifest.is_none() && src.output.is_none() {
                for (_, g) in &shapes {
                    println!("{}", st.model.classes[st.model.classify_shape(&st.store, g, seed)?]);
                }
            } else {
                let mut dump = PredictionDump::default();
                for (name, g) in &shapes {
                    dump.shapes.push(ShapeRecord {
                        name: name.clone(),
                        class: Some(st.model.classify_shape(&st.store, g, seed)?),
                        ..ShapeRecord::default()
                    });
                }
                emit_dump(&dump, &src.output)?;
            }
        }
        Command::Retrieve { source, texts } => {
            let st = load_model(&cli)?;
            let texts: Vec<String> = match &source.manifest {
                Some(m) => Dataset::load(m)?.manifest.shapes.iter().map(|s| s.caption.clone()).collect(),
                None if texts.is_empty() => usage_error("retrieve --input requires at least one --text"),
                None => texts.clone(),
            };
            let shapes = grids(source, st.config.shape_voxel, true)?;
            let refs: Vec<&VoxelGrid> = shapes.iter().map(|(_, g)| g).collect();
            let sim = st.model.similarity(&st.store, &refs, &texts, seed)?;
            let rows: Vec<Vec<f64>> = (0..sim.rows()).map(|r| sim.row(r).to_vec()).collect();
            let dump = PredictionDump {
                similarity: rows.clone(),
                ..PredictionDump::default()
            };
            if let Some(p) = &source.output {
                dump.save(p)?;
            }
            if rows.len() == texts.len() {
                let (r1, r5) = (recall_at_k(&rows, 1)?, recall_at_k(&rows, 5)?);
                if cli.json {
                    println!("{{\"r1\": {r1:?}, \"r5\": {r5:?}}}");
                } else {
                    println!("R@1 = {r1:.6}\nR@5 = {r5:.6}");
                }
            } else if source.output.is_none() {
                print!("{}", dump.to_text());
            }
        }
    }
    Ok(())
}
