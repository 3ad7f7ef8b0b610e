//! The `nep` command line.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nep_core::data::{
    edit_triples, parse_edit_shard, parse_t2i_shard, run_benchmark, write_dataset, BenchMode, EditTriple, SceneSpec,
    ShardKind,
};
use nep_core::edit::{encode_text, generate, nep_edit, EditRequest};
use nep_core::model::{load_checkpoint, save_checkpoint, SamplerConfig};
use nep_core::recipe::{train_desk_critic, train_stage1, train_stage2, DeskRecipe};
use nep_core::sequence::{sample_order, TextVocab};
use nep_core::tokenizer::{decode_tokens, encode_image, read_mask_png, read_rgb_png, TokenizerConfig};
use nep_core::tts::{Critic, RefineConfig, Refiner};
use nep_core::NepError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::engine::Engine;
use crate::server::{serve, AppState};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] NepError),
    #[error("bad --config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "nep", version, about = "Any-order image-token generation, mask-scoped editing and refinement")]
pub struct Cli {
    /// Seed for data, training and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON overrides (inline, or a path to a JSON file) for the command's configuration.
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Output path (file or directory, depending on the command).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shard (JSON lines).
    MakeData {
        #[arg(long, default_value = "t2i")]
        kind: String,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Random-order text-to-image pretraining (stage 1).
    TrainT2i {
        /// Text-to-image shard; drawn from the recipe when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Editing fine-tune (stage 2) from a stage-1 checkpoint.
    TrainEdit {
        #[arg(long)]
        ckpt: PathBuf,
        /// Editing shard; drawn from the recipe when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Text-to-image shard used for rehearsal and inpainting samples.
        #[arg(long)]
        t2i_data: Option<PathBuf>,
    },
    /// Fit the refinement critic.
    TrainCritic,
    /// Text-to-image sampling.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Decode in a random order instead of raster order.
        #[arg(long)]
        random_order: bool,
    },
    /// Mask-scoped editing of an image.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "")]
        instruction: String,
    },
    /// Critic-guided test-time refinement.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        critic: PathBuf,
        /// A scene caption.
        #[arg(long)]
        prompt: String,
        /// Starting image; generated from the prompt when absent.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Tokens revised per round.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        candidates: Option<usize>,
        /// Writes one PNG per round plus `trajectory.json`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Editing benchmark on a shard or on freshly drawn edits.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value = "nep")]
        mode: String,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        critic: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        workers: Option<usize>,
    },
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Merges the `--config` object into `base`. Keys absent from `base` are rejected.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: &T, config: Option<&str>) -> CliResult<T> {
    let Some(raw) = config else {
        return serde_json::from_value(serde_json::to_value(base).map_err(NepError::from)?).map_err(|e| CliError::Config(e.to_string()));
    };
    let text = if raw.trim_start().starts_with('{') { raw.to_string() } else { std::fs::read_to_string(raw)? };
    let patch: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let mut value = serde_json::to_value(base).map_err(NepError::from)?;
    merge(&mut value, &patch, "")?;
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

fn merge(base: &mut Value, patch: &Value, path: &str) -> CliResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(CliError::Config(format!("unknown key {here}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

fn out_path(cli_out: &Option<PathBuf>, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn print_json(v: &impl Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v).map_err(NepError::from)?);
    Ok(())
}

fn log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn read_scenes(path: &Path) -> CliResult<Vec<SceneSpec>> {
    Ok(parse_t2i_shard(&std::fs::read_to_string(path)?)?.into_iter().map(|e| e.scene).collect())
}

fn read_triples(path: &Path) -> CliResult<Vec<EditTriple>> {
    Ok(parse_edit_shard(&std::fs::read_to_string(path)?)?.iter().map(|e| e.triple()).collect())
}

/// Recipe with the global seed folded into its data and training seeds.
fn recipe(cli: &Cli) -> CliResult<DeskRecipe> {
    let mut r = DeskRecipe::default();
    r.data_seed = r.data_seed.wrapping_add(cli.seed);
    r.pretrain.seed = r.pretrain.seed.wrapping_add(cli.seed);
    r.finetune.seed = r.finetune.seed.wrapping_add(cli.seed);
    r.critic_train.seed = r.critic_train.seed.wrapping_add(cli.seed);
    apply_overrides(&r, cli.config.as_deref())
}

pub fn run(cli: Cli) -> CliResult<()> {
    let vocab = TextVocab::default();
    match &cli.command {
        Command::MakeData { kind, count } => {
            let kind: ShardKind = kind.parse()?;
            let out = out_path(&cli.out, "shard.jsonl");
            write_dataset(kind, *count, cli.seed, &out)?;
            print_json(&json!({"out": out, "count": count, "seed": cli.seed}))
        }
        Command::TrainT2i { data } => {
            let r = recipe(&cli)?;
            let scenes = match data {
                Some(p) => read_scenes(p)?,
                None => r.scenes(),
            };
            let trainer = train_stage1(&r, &scenes, &vocab)?;
            let out = out_path(&cli.out, "stage1.nep");
            save_checkpoint(&trainer.model, &TokenizerConfig::default(), serde_json::to_value(&r.pretrain).map_err(NepError::from)?, &out)?;
            trainer.log.write_jsonl(&log_path(&out))?;
            print_json(&json!({"out": out, "final_loss": trainer.log.losses().last(), "params": trainer.model.num_params()}))
        }
        Command::TrainEdit { ckpt, data, t2i_data } => {
            let r = recipe(&cli)?;
            let (stage1, header) = load_checkpoint(ckpt)?;
            if stage1.config().edit_extension {
                return Err(CliError::Usage("train-edit expects a stage-1 checkpoint".into()));
            }
            let triples = match data {
                Some(p) => read_triples(p)?,
                None => r.triples(),
            };
            let scenes = match t2i_data {
                Some(p) => read_scenes(p)?,
                None => r.scenes(),
            };
            let trainer = train_stage2(&r, &stage1, &triples, &scenes, &vocab)?;
            let out = out_path(&cli.out, "stage2.nep");
            save_checkpoint(&trainer.model, &header.tokenizer, serde_json::to_value(&r.finetune).map_err(NepError::from)?, &out)?;
            trainer.log.write_jsonl(&log_path(&out))?;
            print_json(&json!({
                "out": out,
                "final_loss": trainer.log.losses().last(),
                "params": trainer.model.num_params(),
                "added_params": trainer.model.num_params() - stage1.num_params(),
            }))
        }
        Command::TrainCritic => {
            let r = recipe(&cli)?;
            let (critic, losses) = train_desk_critic(&r)?;
            let out = out_path(&cli.out, "critic.nepc");
            critic.save(&out)?;
            print_json(&json!({"out": out, "final_loss": losses.last()}))
        }
        Command::Generate { ckpt, prompt, random_order } => {
            let sampler: SamplerConfig = apply_overrides(&SamplerConfig::default(), cli.config.as_deref())?;
            let (model, header) = load_checkpoint(ckpt)?;
            let text = encode_text(prompt, &vocab, model.config().text_len)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
            let order = random_order.then(|| sample_order(model.config().grid_len, &mut rng, 0.0));
            let g = generate(&model, &text, order.as_ref(), &sampler, &mut rng)?;
            let out = out_path(&cli.out, "generated.png");
            decode_tokens(&g.grid, &header.tokenizer)?.save(&out).map_err(NepError::from)?;
            print_json(&json!({"out": out, "steps": g.steps, "logprob_sum": g.logprobs.iter().sum::<f64>()}))
        }
        Command::Edit { ckpt, image, mask, instruction } => {
            let sampler: SamplerConfig = apply_overrides(&SamplerConfig::default(), cli.config.as_deref())?;
            let (model, header) = load_checkpoint(ckpt)?;
            let req = EditRequest {
                source: read_rgb_png(image)?,
                mask: mask.as_deref().map(read_mask_png).transpose()?,
                instruction: instruction.clone(),
                sampler,
                seed: cli.seed,
            };
            let r = nep_edit(&model, &header.tokenizer, &vocab, &req)?;
            let out = out_path(&cli.out, "edited.png");
            r.image.save(&out).map_err(NepError::from)?;
            let summary = json!({"l_e": r.edit_len(), "steps": r.steps, "logprob_sum": r.logprob_sum()});
            let mut sidecar = out.as_os_str().to_owned();
            sidecar.push(".json");
            std::fs::write(&sidecar, serde_json::to_vec_pretty(&summary).map_err(NepError::from)?)?;
            print_json(&json!({"out": out, "sidecar": PathBuf::from(sidecar), "summary": summary}))
        }
        Command::Refine { ckpt, critic, prompt, image, rounds, k, candidates, out_dir } => {
            let mut cfg: RefineConfig = apply_overrides(&RefineConfig::default(), cli.config.as_deref())?;
            cfg.rounds = rounds.unwrap_or(cfg.rounds);
            cfg.k = k.unwrap_or(cfg.k);
            cfg.candidates = candidates.unwrap_or(cfg.candidates);
            let (model, header) = load_checkpoint(ckpt)?;
            let critic = Critic::load(critic)?;
            let tok = header.tokenizer;
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
            let sampler = SamplerConfig::default();
            let initial = match image {
                Some(p) => encode_image(&read_rgb_png(p)?, &tok)?,
                None => generate(&model, &encode_text(prompt, &vocab, model.config().text_len)?, None, &sampler, &mut rng)?.grid,
            };
            let refiner = Refiner { model: &model, tok: &tok, vocab: &vocab, critic: &critic, sampler, parallel: true };
            let traj = refiner.refine_loop(&initial, prompt, &cfg, &mut rng)?;
            let out = out_path(&cli.out, "refined.png");
            decode_tokens(&traj.last().expect("initial point").grid, &tok)?.save(&out).map_err(NepError::from)?;
            let rounds: Vec<Value> = traj.iter().map(|p| json!({"round": p.round, "reward": p.reward, "accepted": p.accepted})).collect();
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir)?;
                for p in &traj {
                    decode_tokens(&p.grid, &tok)?.save(dir.join(format!("round_{}.png", p.round))).map_err(NepError::from)?;
                }
                std::fs::write(dir.join("trajectory.json"), serde_json::to_vec_pretty(&rounds).map_err(NepError::from)?)?;
            }
            print_json(&json!({"out": out, "trajectory": rounds}))
        }
        Command::Eval { ckpt, data, count, mode } => {
            let sampler: SamplerConfig = apply_overrides(&SamplerConfig::greedy(), cli.config.as_deref())?;
            let mode: BenchMode = mode.parse()?;
            let (model, header) = load_checkpoint(ckpt)?;
            let triples = match data {
                Some(p) => read_triples(p)?,
                None => edit_triples(*count, DeskRecipe::default().heldout_seed().wrapping_add(cli.seed)),
            };
            let report = run_benchmark(&model, &header.tokenizer, &vocab, &triples, mode, &sampler, cli.seed)?;
            if let Some(out) = &cli.out {
                std::fs::write(out, serde_json::to_vec_pretty(&report).map_err(NepError::from)?)?;
            }
            print_json(&report.aggregate)
        }
        Command::Serve { ckpt, critic, port, workers } => {
            let engine = Engine::load(ckpt.as_deref(), critic.as_deref())?;
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let state = AppState::new(engine, workers);
            let addr = SocketAddr::from(([0, 0, 0, 0], *port));
            eprintln!("listening on {addr} with {workers} workers");
            tokio::runtime::Runtime::new()?.block_on(serve(state, addr))?;
            Ok(())
        }
    }
}
