//! Drivers behind the CLI subcommands. Each function is deterministic given
//! its arguments and seeds, and returns a plain error for the binary to map
//! to an exit code.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use stepsr_core::codec::{encode_image, encode_text, fit_codebook, Control, TokenSequence};
use stepsr_core::policy::{Model, PolicyConfig, PolicyParams};
use stepsr_core::rewards::{decode_pyramid, GroupScorer, RewardToggles};
use stepsr_core::trace::{parse_trace, StepMode, TraceLayout, PROMPT};
use stepsr_core::train::{train_coldstart, train_grpo, GrpoConfig, ScorerKind};

use crate::ckpt::{load_checkpoint, save_checkpoint};
use crate::codebook_io::{load_codebook, save_codebook};
use crate::dataset::{load_bundles, load_png, read_config_file, read_dataset, write_dataset, RunConfig};
use crate::evalkit::{run_benchmark, write_grpo_log, write_report};
use crate::expert::ExpertScorer;

/// Generation-scorer selection mirroring the `--gen-scorer` flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenScorerChoice {
    Composite,
    Fidelity,
    Noref,
    Expert,
}

impl GenScorerChoice {
    fn kind(self) -> ScorerKind {
        match self {
            GenScorerChoice::Fidelity => ScorerKind::FidelityOnly,
            GenScorerChoice::Noref => ScorerKind::NorefOnly,
            _ => ScorerKind::Composite,
        }
    }
}

/// Everything `grpo` needs beyond its four paths.
#[derive(Debug, Clone)]
pub struct GrpoOpts {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub iterations: usize,
    pub max_response_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub steps_mode: Option<StepMode>,
    pub toggles: RewardToggles,
    pub gen_scorer: GenScorerChoice,
    pub expert_cmd: Option<String>,
    pub log_path: Option<PathBuf>,
}

pub fn gen_data(config: Option<&Path>, out: &Path, count: usize, seed: u64) -> Result<()> {
    let cfg = match config {
        Some(path) => read_config_file(path).context("reading config")?,
        None => RunConfig::default(),
    };
    write_dataset(out, &cfg, count, seed).context("writing dataset")?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

pub fn fit_codebook_cmd(data: &Path, k: usize, iters: usize, seed: u64, out: &Path) -> Result<()> {
    let (cfg, metas) = read_dataset(data).context("reading dataset")?;
    let images = metas
        .iter()
        .map(|m| load_png(&data.join("hq").join(format!("{:06}.png", m.id))))
        .collect::<Result<Vec<_>, _>>()
        .context("loading hq images")?;
    let cb = fit_codebook(&images, cfg.patch_size, k, iters, seed)
        .map_err(|e| anyhow::anyhow!("{e}"))
        .context("fitting codebook")?;
    save_codebook(out, &cb).context("saving codebook")?;
    println!(
        "fit k={k} patch={} codebook, final mse {:.6}",
        cfg.patch_size,
        cb.objective_curve.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn policy_config(cfg: &RunConfig, vocab_size: usize) -> PolicyConfig {
    PolicyConfig {
        vocab_size,
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        n_blocks: cfg.n_blocks,
        max_len: cfg.max_len,
    }
}

pub fn coldstart_cmd(
    data: &Path,
    codebook: &Path,
    steps: usize,
    out: &Path,
    lr: f64,
    seed: u64,
) -> Result<()> {
    let cb = load_codebook(codebook).context("loading codebook")?;
    let (cfg, bundles) = load_bundles(data, &cb).context("loading dataset")?;
    let layout = cfg.layout();
    let mut params = PolicyParams::init(policy_config(&cfg, cb.vocab_size()), seed)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let curve = train_coldstart(&mut params, &bundles, &layout, steps, lr)
        .map_err(|e| anyhow::anyhow!("{e}"))
        .context("cold-start training")?;
    save_checkpoint(out, &params, None).context("saving checkpoint")?;
    println!(
        "cold-start {} steps on {} bundles, final loss {:.4} nats/token",
        steps,
        bundles.len(),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn grpo_cmd(
    data: &Path,
    codebook: &Path,
    init: &Path,
    out: &Path,
    opts: &GrpoOpts,
) -> Result<()> {
    let cb = load_codebook(codebook).context("loading codebook")?;
    let (mut cfg, metas) = read_dataset(data).context("reading dataset")?;
    if let Some(mode) = opts.steps_mode {
        cfg.steps = mode;
    }
    let bundles = metas
        .iter()
        .map(|m| crate::dataset::bundle_from_meta(m, &cb, cfg.steps))
        .collect::<Result<Vec<_>, _>>()
        .context("building bundles")?;
    let layout = cfg.layout();
    let (params, _) = load_checkpoint(init).context("loading initial checkpoint")?;

    let grpo_cfg = GrpoConfig {
        group_size: opts.group_size,
        clip_eps: opts.clip_eps,
        kl_beta: opts.kl_beta,
        lr: opts.lr,
        batch_size: opts.batch_size,
        epochs: opts.epochs,
        iterations: opts.iterations,
        max_response_tokens: opts.max_response_tokens,
        temperature: opts.temperature,
        adv_delta: 1e-8,
        toggles: opts.toggles,
        seed: opts.seed,
    };

    let mut expert = opts
        .expert_cmd
        .as_deref()
        .map(ExpertScorer::new);
    if opts.gen_scorer == GenScorerChoice::Expert && expert.is_none() {
        bail!("--gen-scorer expert requires --expert-cmd");
    }
    let expert_dyn: Option<&mut dyn GroupScorer> = match (opts.gen_scorer, expert.as_mut()) {
        (GenScorerChoice::Expert, Some(e)) => Some(e),
        _ => None,
    };

    let (trained, log) = train_grpo(
        &grpo_cfg,
        &bundles,
        &params,
        &cb,
        &layout,
        opts.gen_scorer.kind(),
        expert_dyn,
        Some(&mut |row| {
            println!(
                "iter {:4}  total {:.3}  form {:.3}  deg {:.3}  und {:.3}  gen {:.3}  kl {:.5}",
                row.iteration, row.mean_total, row.mean_form, row.mean_deg, row.mean_und,
                row.mean_gen, row.kl_mean
            );
        }),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))
    .context("grpo training")?;

    save_checkpoint(out, &trained, None).context("saving checkpoint")?;
    let log_path = opts
        .log_path
        .clone()
        .unwrap_or_else(|| default_log_path(out));
    write_grpo_log(&log_path, &log).context("writing training log")?;
    println!("wrote {} and log {}", out.display(), log_path.display());
    Ok(())
}

/// `<checkpoint>.log.csv` next to the output checkpoint.
pub fn default_log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".log.csv");
    ckpt.with_file_name(name)
}

pub fn eval_cmd(ckpt: &Path, data: &Path, codebook: &Path, report: &Path) -> Result<()> {
    let cb = load_codebook(codebook).context("loading codebook")?;
    let (cfg, bundles) = load_bundles(data, &cb).context("loading dataset")?;
    let (params, _) = load_checkpoint(ckpt).context("loading checkpoint")?;
    let rows = run_benchmark(&params, &bundles, &cb, &cfg.layout(), params.cfg.max_len)
        .context("running benchmark")?;
    write_report(report, &rows).context("writing report")?;
    let n = rows.len() as f64;
    println!(
        "evaluated {} samples: mean psnr_y {:.2} dB, mean ssim_y {:.4}, mean reward {:.3}",
        rows.len(),
        rows.iter().map(|r| r.psnr_y).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim_y).sum::<f64>() / n,
        rows.iter().map(|r| r.rewards.total).sum::<f64>() / n
    );
    Ok(())
}

pub fn trace_cmd(ckpt: &Path, codebook: &Path, image_path: &Path, out: &Path) -> Result<()> {
    let cb = load_codebook(codebook).context("loading codebook")?;
    let (params, _) = load_checkpoint(ckpt).context("loading checkpoint")?;
    let lr = load_png(image_path).context("loading input image")?;
    if lr.width != lr.height {
        bail!("input image must be square, got {}x{}", lr.width, lr.height);
    }
    let layout = TraceLayout {
        hq_size: lr.width * 4,
        patch_size: cb.patch_size,
    };

    let mut query = TokenSequence::new();
    query.push_control(Control::Bos);
    query.extend_from(&encode_text(PROMPT));
    query.extend_from(&encode_image(&lr, &cb).map_err(|e| anyhow::anyhow!("{e}"))?);

    let model = Model::<f32>::from_params(&params);
    let (ids, _) = model
        .sample_sequence(&query.ids, 0.0, params.cfg.max_len, Control::Eos.id(), 0)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut response = TokenSequence::new();
    for &id in &ids[query.len()..] {
        response.push(id);
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let token_list = response
        .ids
        .iter()
        .map(|id| id.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    fs::write(out.join("tokens.txt"), token_list + "\n").context("writing tokens.txt")?;

    let trace = parse_trace(&response, &layout)
        .map_err(|e| anyhow::anyhow!("response does not parse as a trace: {e}"))?;
    fs::write(out.join("degradation.txt"), trace.degradation_text.clone() + "\n")
        .context("writing degradation.txt")?;
    let pyramid = decode_pyramid(&trace, &cb, &layout)
        .ok_or_else(|| anyhow::anyhow!("trace image tokens failed to decode"))?;
    for (i, (step, img)) in trace.steps.iter().zip(&pyramid).enumerate() {
        let k = i + 1;
        fs::write(out.join(format!("step{k}.txt")), step.text.clone() + "\n")
            .with_context(|| format!("writing step{k}.txt"))?;
        image::save_buffer(
            out.join(format!("step{k}.png")),
            &img.data,
            img.width as u32,
            img.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .with_context(|| format!("writing step{k}.png"))?;
    }
    println!(
        "dumped {}-step trace to {}",
        trace.steps.len(),
        out.display()
    );
    Ok(())
}
