use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use specrecon::forward_model::{read_pair_set, TrainingPair};
use specrecon::ptnet::{save_weights, Branches, PtnetConfig, PtnetModel};
use specrecon::training::{train, TrainConfig};

use crate::config::FlatConfig;
use crate::{absolute, Outcome, RunContext};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training pair set written by `simulate`
    #[arg(long)]
    pub pairs: PathBuf,
    /// Validation pair set; the best checkpoint is chosen on its MRAE
    #[arg(long)]
    pub val: Option<PathBuf>,
}

impl TrainArgs {
    pub(crate) fn absolutize(&mut self) -> Result<()> {
        absolute(&mut self.pairs)?;
        if let Some(v) = &mut self.val {
            absolute(v)?;
        }
        Ok(())
    }
}

const MODEL_KEYS: [&str; 9] = [
    "bands",
    "base_channels",
    "downsample_factor",
    "ra_blocks_per_branch",
    "ra_inner_channels",
    "eca_kernel",
    "patch_height",
    "patch_width",
    "branches",
];

const TRAIN_KEYS: [&str; 15] = [
    "batch_size",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "lr_init",
    "epochs",
    "restart_period",
    "loss_alpha",
    "loss_quant_bits",
    "seed",
    "gradient_centralization",
    "lookahead",
    "lookahead_k",
    "lookahead_alpha",
];

/// Model configuration from the flat config; band count and patch size
/// default to what the pair set holds.
fn model_config(cfg: &FlatConfig, pairs: &[TrainingPair]) -> Result<PtnetConfig> {
    let first = &pairs[0];
    let data = (first.cube.bands(), first.cube.height(), first.cube.width());
    let mut m = PtnetConfig::new(data.0, data.1, data.2);
    macro_rules! field {
        ($($name:ident),*) => {$(
            if let Some(v) = cfg.usize(stringify!($name))? {
                m.$name = v;
            }
        )*};
    }
    field!(bands, base_channels, downsample_factor, ra_blocks_per_branch, ra_inner_channels, eca_kernel, patch_height, patch_width);
    if let Some(b) = cfg.string("branches")? {
        m.branches = b.parse::<Branches>().context("config field `branches`")?;
    }
    if (m.bands, m.patch_height, m.patch_width) != data {
        bail!(
            "config asks for {} bands at {}x{} (HxW) but the pair set holds {} bands at {}x{}",
            m.bands, m.patch_height, m.patch_width, data.0, data.1, data.2
        );
    }
    m.validate()?;
    Ok(m)
}

fn train_config(cfg: &FlatConfig, seed: Option<u64>) -> Result<TrainConfig> {
    let mut t = TrainConfig::default();
    macro_rules! field {
        ($get:ident: $($name:ident),*) => {$(
            if let Some(v) = cfg.$get(stringify!($name))? {
                t.$name = v as _;
            }
        )*};
    }
    field!(usize: batch_size, epochs, restart_period);
    field!(f64: beta1, beta2, eps, weight_decay, lr_init, loss_alpha, lookahead_alpha);
    field!(u64: loss_quant_bits, seed, lookahead_k);
    if let Some(v) = cfg.bool("gradient_centralization")? {
        t.gradient_centralization = v;
    }
    if let Some(v) = cfg.bool("lookahead")? {
        t.lookahead = v;
    }
    if let Some(s) = seed {
        t.seed = s;
    }
    t.validate()?;
    Ok(t)
}

fn resolved(m: &PtnetConfig, t: &TrainConfig) -> FlatConfig {
    let mut r = FlatConfig::default();
    for (name, value) in m.fields() {
        if name != "branches" {
            r.set(name, value as i64);
        }
    }
    r.set("branches", m.branches.to_string());
    r.set("batch_size", t.batch_size as i64);
    r.set("beta1", t.beta1);
    r.set("beta2", t.beta2);
    r.set("eps", t.eps);
    r.set("weight_decay", t.weight_decay);
    r.set("lr_init", t.lr_init);
    r.set("epochs", t.epochs as i64);
    r.set("restart_period", t.restart_period as i64);
    r.set("loss_alpha", t.loss_alpha);
    r.set("loss_quant_bits", t.loss_quant_bits as i64);
    r.set("seed", t.seed as i64);
    r.set("gradient_centralization", t.gradient_centralization);
    r.set("lookahead", t.lookahead);
    r.set("lookahead_k", t.lookahead_k as i64);
    r.set("lookahead_alpha", t.lookahead_alpha);
    r
}

pub fn run(args: &TrainArgs, ctx: &RunContext) -> Result<Outcome> {
    let known: Vec<&str> = MODEL_KEYS.iter().chain(&TRAIN_KEYS).copied().collect();
    ctx.config.check_known(&known)?;
    let pairs = read_pair_set(&args.pairs)
        .with_context(|| format!("reading pair set {}", args.pairs.display()))?;
    if pairs.is_empty() {
        bail!("pair set {} is empty", args.pairs.display());
    }
    let val = match &args.val {
        Some(dir) => read_pair_set(dir).with_context(|| format!("reading pair set {}", dir.display()))?,
        None => Vec::new(),
    };
    let model_cfg = model_config(ctx.config, &pairs)?;
    let train_cfg = train_config(ctx.config, ctx.common.seed)?;

    let mut model = PtnetModel::<f32>::new(model_cfg.clone(), train_cfg.seed)?;
    let mut log = std::fs::File::create(ctx.stage.path("train_log.jsonl"))?;
    let mut log_err = None;
    let report = train(&mut model, &pairs, &val, &train_cfg, |entry| {
        if log_err.is_none() {
            log_err = writeln!(log, "{}", entry.to_json_line()).err();
        }
        let val = entry
            .val_mrae
            .map(|m| format!(" val_mrae {m:.5}"))
            .unwrap_or_default();
        eprintln!("epoch {:>4} step {:>6} loss {:.5}{val}", entry.epoch, entry.step, entry.loss);
    })?;
    if let Some(e) = log_err {
        return Err(e).context("writing train_log.jsonl");
    }
    save_weights(&model, ctx.stage.path("final.ptn"))?;
    save_weights(&report.best_model, ctx.stage.path("best.ptn"))?;
    match (report.best_epoch, report.best_val_mrae) {
        (Some(e), Some(m)) => println!("best validation MRAE {m:.6} at epoch {e}"),
        _ => println!("trained {} epochs", report.epochs.len()),
    }
    Ok(Outcome {
        resolved: resolved(&model_cfg, &train_cfg),
    })
}
