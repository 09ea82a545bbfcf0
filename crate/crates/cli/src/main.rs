use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use discovla_core::data::{generate_synthetic_corpus, write_feature_file, write_pseudo_captions, Corpus, FeatureTable};
use discovla_core::encoders::{count_trainable_params, ModelConfig};
use discovla_core::train::{prepare_corpus, run_ablation, run_evaluation, run_training, Checkpoint, Postprocess, RunConfig, PRESETS};
use discovla_core::Tensor;

#[derive(Parser, Debug)]
#[command(name = "discovla", version, about = "Parameter-efficient video-text retrieval at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a preset and write trace, checkpoint and metrics to out_dir.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on its held-out split or on a saved corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Saved corpus to evaluate in full instead of the checkpoint's held-out split.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PostprocessArg::None)]
        postprocess: PostprocessArg,
        /// Write the metrics record as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-frame video features of the evaluated corpus here.
        #[arg(long)]
        export_features: Option<PathBuf>,
    },
    /// Train several presets on one corpus and print a comparison table.
    Ablate {
        #[arg(long, required = true)]
        seed: u64,
        #[arg(long, required = true)]
        out_dir: PathBuf,
        /// Comma-separated preset names.
        #[arg(long, required = true, value_delimiter = ',')]
        preset: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print trainable-parameter counts of presets.
    CountParams {
        #[arg(long, value_enum, default_value_t = Scale::Clip)]
        scale: Scale,
        /// Presets to report; all when omitted.
        #[arg(long, value_delimiter = ',')]
        preset: Vec<String>,
    },
    /// Write a synthetic corpus (JSON) and its pseudo captions (TSV).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        captions_out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(clap::Args, Debug, Default)]
struct ConfigArgs {
    /// `key = value` file with RunConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Field overrides as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PostprocessArg {
    None,
    Dsl,
}

impl From<PostprocessArg> for Postprocess {
    fn from(p: PostprocessArg) -> Self {
        match p {
            PostprocessArg::None => Postprocess::None,
            PostprocessArg::Dsl => Postprocess::Dsl,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scale {
    Clip,
    Desk,
}

/// Splits `--key value` / `--key=value` tokens into pairs; dashes in keys become underscores.
fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let Some(body) = tok.strip_prefix("--") else {
            bail!("expected --key, got {tok:?}");
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_owned(), v.to_owned()),
            None => {
                let v = it.next().with_context(|| format!("missing value for --{body}"))?;
                (body.to_owned(), v.clone())
            }
        };
        pairs.push((key.replace('-', "_"), value));
    }
    Ok(pairs)
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::desk();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_kv(&text).with_context(|| format!("in config {}", path.display()))?;
        }
        let mut pairs = parse_overrides(&self.overrides)?;
        pairs.extend_from_slice(extra);
        cfg.apply_pairs(&pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn export_features(checkpoint: &Checkpoint, corpus: &Corpus, path: &Path) -> Result<()> {
    let model = checkpoint.restore()?;
    let mut ids = Vec::with_capacity(corpus.len());
    let mut values = Vec::new();
    for r in &corpus.records {
        let (v_img, _) = model.encode_video(&r.frames)?;
        ids.push(r.video_id.clone());
        values.extend_from_slice(v_img.data());
    }
    let table = FeatureTable::new(ids, Tensor::new([corpus.len(), model.config.frames, model.config.d_embed], values)?)?;
    write_feature_file(path, &table)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve(&[])?;
            log::info!("training preset {} into {}", cfg.preset, cfg.out_dir.display());
            let (_, record) = run_training(&cfg)?;
            print!("{}{}", record.t2v.to_kv(), record.v2t.to_kv());
            println!("trainable_params={}", record.trainable_params);
            println!("out_dir={}", cfg.out_dir.display());
        }
        Command::Eval { checkpoint, corpus, postprocess, out, export_features: features } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let corpus = match corpus {
                Some(p) => Corpus::load(&p).with_context(|| format!("loading corpus {}", p.display()))?,
                None => prepare_corpus(&ck.config)?.1,
            };
            let (t2v, v2t) = run_evaluation(&ck, &corpus, postprocess.into())?;
            print!("{}{}", t2v.to_kv(), v2t.to_kv());
            if let Some(path) = out {
                write_json(&path, &serde_json::json!({ "t2v": t2v, "v2t": v2t }))?;
            }
            if let Some(path) = features {
                export_features(&ck, &corpus, &path)?;
            }
        }
        Command::Ablate { seed, out_dir, preset, config } => {
            let base = config.resolve(&[("out_dir".into(), out_dir.display().to_string())])?;
            let names: Vec<&str> = preset.iter().map(String::as_str).collect();
            let table = run_ablation(&base, &names, seed)?;
            let text = table.render();
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("ablation.txt"), &text)?;
            write_json(&out_dir.join("ablation.json"), &serde_json::to_value(&table)?)?;
            print!("{text}");
        }
        Command::CountParams { scale, preset } => {
            let dims = match scale {
                Scale::Clip => ModelConfig::clip_b32(),
                Scale::Desk => ModelConfig::desk(),
            };
            let names: Vec<&str> = if preset.is_empty() { PRESETS.to_vec() } else { preset.iter().map(String::as_str).collect() };
            for name in names {
                let cfg = RunConfig::preset(name)?;
                println!("{name}\t{}", count_trainable_params(&dims, cfg.flags()));
            }
        }
        Command::GenData { out, captions_out, config } => {
            let cfg = config.resolve(&[])?;
            let corpus = generate_synthetic_corpus(&cfg.synthetic_params(), &cfg.model)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            corpus.save(&out)?;
            if let Some(path) = captions_out {
                let items: Vec<(&str, &[String])> = corpus
                    .records
                    .iter()
                    .filter_map(|r| r.pseudo_captions.as_deref().map(|c| (r.video_id.as_str(), c)))
                    .collect();
                write_pseudo_captions(&path, items)?;
            }
            println!("records={}", corpus.len());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
