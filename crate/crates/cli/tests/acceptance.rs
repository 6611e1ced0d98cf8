//! Acceptance gate: one test per criterion, each printing a single
//! `PASS criterion N: ...` or `FAIL criterion N: ...` line (run with
//! `--nocapture` to see them). The behavioral criteria (7, 8, 9) share one
//! expensive fixture: a 16-scene world with a fitted codebook and a
//! cold-started policy.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use stepsr::ckpt::{load_checkpoint, save_checkpoint};
use stepsr::codebook_io::load_codebook;
use stepsr::dataset::{bundle_from_meta, read_dataset};
use stepsr::evalkit::read_grpo_log;
use stepsr_core::codec::{
    decode_image, decode_text, encode_image, encode_text, fit_codebook, role_of, Codebook,
    Role, TokenSequence, IMAGE_BASE,
};
use stepsr_core::degrade::{sample_recipe, summarize, ComponentKind, DegradationRecipe};
use stepsr_core::image::RgbImage;
use stepsr_core::metrics::{psnr_y, ssim_y};
use stepsr_core::policy::{Gradient, Model, PolicyConfig, PolicyParams};
use stepsr_core::rewards::{
    reward_degradation, reward_format, reward_understanding, total_rewards, RewardBreakdown,
    RewardToggles, Scorer,
};
use stepsr_core::rng::{derive_seed, SeededRng};
use stepsr_core::scenegen::{generate_scene, BBox, SceneConfig, SceneObject, ShapeKind, TextureKind};
use stepsr_core::trace::{
    build_gt_trace, parse_trace, render_trace, GtBundle, StepMode, Trace, TraceLayout, TraceStep,
};
use stepsr_core::train::{
    coldstart_loss_and_grad_ids, compute_advantages, grpo_objective_and_grad_t, kl_token,
    rollout_with_model, surrogate_term, train_coldstart, train_grpo, GrpoConfig, RolloutGroup,
    ScorerKind,
};

// ---------------------------------------------------------------------------
// Reporting helpers
// ---------------------------------------------------------------------------

macro_rules! check {
    ($fails:ident, $cond:expr, $($msg:tt)+) => {
        if !$cond {
            $fails.push(format!($($msg)+));
        }
    };
}

fn finish(n: usize, desc: &str, fails: Vec<String>) {
    if fails.is_empty() {
        println!("PASS criterion {n}: {desc}");
    } else {
        println!("FAIL criterion {n}: {desc}");
        panic!("criterion {n} failed:\n  {}", fails.join("\n  "));
    }
}

// ---------------------------------------------------------------------------
// Shared world for the behavioral criteria (7, 8, 9)
// ---------------------------------------------------------------------------

struct World {
    cb: Codebook,
    layout: TraceLayout,
    policy_cfg: PolicyConfig,
    /// 16 training bundles: scene seeds and recipe seeds derived from base 1.
    train: Vec<GtBundle>,
    /// Held-out queries: the same scenes under fresh degradation recipes.
    heldout: Vec<GtBundle>,
    /// Cold-start policy: 1300 supervised steps over the training bundles.
    cold: PolicyParams,
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let scene_cfg = SceneConfig {
            image_size: 32,
            min_objects: 1,
            max_objects: 2,
        };
        let scenes: Vec<_> = (0..16u64)
            .map(|i| generate_scene(derive_seed(1, 2 * i), &scene_cfg).unwrap())
            .collect();
        let hqs: Vec<RgbImage> = scenes.iter().map(|s| s.image.clone()).collect();
        let cb = fit_codebook(&hqs, 4, 32, 10, 7).unwrap();
        let layout = TraceLayout {
            hq_size: 32,
            patch_size: 4,
        };
        let train: Vec<GtBundle> = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let recipe = sample_recipe(derive_seed(1, 2 * i as u64 + 1));
                build_gt_trace(s, &recipe, &cb, StepMode::Three).unwrap()
            })
            .collect();
        let heldout: Vec<GtBundle> = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let recipe = sample_recipe(derive_seed(5000, i as u64));
                build_gt_trace(s, &recipe, &cb, StepMode::Three).unwrap()
            })
            .collect();
        let policy_cfg = PolicyConfig {
            vocab_size: cb.vocab_size(),
            d_model: 32,
            n_heads: 2,
            n_blocks: 1,
            max_len: 512,
        };
        let mut cold = PolicyParams::init(policy_cfg, 3).unwrap();
        train_coldstart(&mut cold, &train, &layout, 1300, 1e-3).unwrap();
        World {
            cb,
            layout,
            policy_cfg,
            train,
            heldout,
            cold,
        }
    })
}

/// Mean total reward of sampled rollout groups on the held-out queries —
/// the same quantity GRPO optimizes, measured off-policy-update.
fn heldout_mean_reward(w: &World, params: &PolicyParams) -> f64 {
    let cfg = GrpoConfig {
        group_size: 3,
        temperature: 0.6,
        max_response_tokens: 300,
        ..GrpoConfig::default()
    };
    let model = Model::<f32>::from_params(params);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, bundle) in w.heldout.iter().enumerate() {
        let group = rollout_with_model(
            &model,
            bundle,
            &w.cb,
            &w.layout,
            &cfg,
            Scorer::Composite,
            derive_seed(777, i as u64),
        )
        .unwrap();
        for r in &group.rewards {
            total += r.total;
            count += 1;
        }
    }
    total / count as f64
}

// ---------------------------------------------------------------------------
// Finite-difference machinery (criteria 1 and 4)
// ---------------------------------------------------------------------------

fn tiny_cfg() -> PolicyConfig {
    PolicyConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        max_len: 16,
    }
}

/// Worst relative error between `grad` and central finite differences of
/// `value` over every parameter. Perturbations use the realized f32 step so
/// the divisor matches the storage precision.
fn fd_worst_rel(
    params: &PolicyParams,
    grad: &Gradient<f64>,
    value: &dyn Fn(&PolicyParams) -> f64,
    h: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (ai, arr) in grad.arrays().iter().enumerate() {
        for ei in 0..arr.len() {
            let analytic = arr[ei];
            let mut pp = params.clone();
            let base = pp.tensors.arrays()[ai][ei];
            pp.tensors.arrays_mut()[ai][ei] = ((base as f64) + h) as f32;
            let up_x = pp.tensors.arrays()[ai][ei] as f64;
            let up = value(&pp);
            pp.tensors.arrays_mut()[ai][ei] = ((base as f64) - h) as f32;
            let dn_x = pp.tensors.arrays()[ai][ei] as f64;
            let dn = value(&pp);
            let fd = (up - dn) / (up_x - dn_x);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            let rel = (analytic - fd).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Builds a rollout group whose old log-probs are the current ones shifted
/// by fixed per-token offsets, so the ratios are known constants at the
/// unperturbed parameters.
fn offset_group(
    model: &Model<f64>,
    members: Vec<Vec<u32>>,
    prompt_len: usize,
    offsets: &[f64],
    advantages: Vec<f64>,
) -> RolloutGroup {
    let old_log_probs: Vec<Vec<f64>> = members
        .iter()
        .map(|ids| {
            model
                .sequence_log_prob(ids, prompt_len)
                .unwrap()
                .iter()
                .enumerate()
                .map(|(t, lp)| lp - offsets[t % offsets.len()])
                .collect()
        })
        .collect();
    let rewards = vec![RewardBreakdown::zero(); members.len()];
    RolloutGroup {
        members,
        prompt_len,
        old_log_probs,
        rewards,
        advantages,
    }
}

#[test]
fn criterion_01_gradient_correctness() {
    let desc = "cold-start and GRPO gradients match finite differences";
    let mut fails = Vec::new();
    let started = Instant::now();

    let cfg = tiny_cfg();
    let params = PolicyParams::init(cfg, 4).unwrap();
    check!(
        fails,
        params.tensors.numel() <= 5_000,
        "policy has {} parameters, budget is 5000",
        params.tensors.numel()
    );

    // (a) cold-start cross-entropy.
    let ids = [0u32, 5, 2, 8, 1, 3, 7, 4];
    let value_a = |p: &PolicyParams| -> f64 {
        coldstart_loss_and_grad_ids(&Model::<f64>::from_params(p), &ids, 2)
            .unwrap()
            .0
    };
    let (_, grad_a) =
        coldstart_loss_and_grad_ids(&Model::<f64>::from_params(&params), &ids, 2).unwrap();
    let worst_a = fd_worst_rel(&params, &grad_a, &value_a, 1e-4);
    check!(fails, worst_a < 1e-4, "cold-start worst rel error {worst_a:.3e} >= 1e-4");

    // (b) GRPO objective with clipping and the KL penalty active. The ratio
    // offsets keep every token away from the clip boundaries so the
    // objective is smooth at the evaluation point.
    let base = Model::<f64>::from_params(&params);
    let ref_params = PolicyParams::init(cfg, 9).unwrap();
    let ref_model = Model::<f64>::from_params(&ref_params);
    let members = vec![
        vec![0u32, 5, 2, 8, 1, 3],
        vec![0, 5, 7, 7, 2, 9, 4],
        vec![0, 5, 1, 6, 3],
    ];
    let offsets = [0.15, -0.25, 0.05, 0.3, -0.1];
    let advantages = compute_advantages(&[1.7, 0.4, -0.9], 1e-8);
    let group = offset_group(&base, members, 2, &offsets, advantages);
    let gcfg = GrpoConfig {
        group_size: 3,
        kl_beta: 0.03,
        ..GrpoConfig::default()
    };
    let value_b = |p: &PolicyParams| -> f64 {
        grpo_objective_and_grad_t(&Model::<f64>::from_params(p), &ref_model, &group, &gcfg)
            .unwrap()
            .0
    };
    let (_, grad_b) = grpo_objective_and_grad_t(&base, &ref_model, &group, &gcfg).unwrap();
    // Smaller step than (a): the exp-of-ratio terms carry more curvature,
    // so the central-difference truncation error needs extra headroom.
    let worst_b = fd_worst_rel(&params, &grad_b, &value_b, 5e-5);
    check!(fails, worst_b < 1e-4, "GRPO worst rel error {worst_b:.3e} >= 1e-4");

    let elapsed = started.elapsed().as_secs_f64();
    check!(fails, elapsed < 60.0, "finite differences took {elapsed:.1}s, budget 60s");
    finish(1, desc, fails);
}

#[test]
fn criterion_02_advantage_normalization() {
    let desc = "group advantages are zero-mean, unit-std, with a zero-variance guard";
    let mut fails = Vec::new();
    let delta = 1e-8;
    let mut rng = SeededRng::new(123);
    for trial in 0..10_000 {
        let rewards = [
            rng.uniform_range(0.0, 4.0),
            rng.uniform_range(0.0, 4.0),
            rng.uniform_range(0.0, 4.0),
        ];
        let mean = rewards.iter().sum::<f64>() / 3.0;
        let std =
            (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / 3.0).sqrt();
        let adv = compute_advantages(&rewards, delta);
        let a_mean = adv.iter().sum::<f64>() / 3.0;
        check!(fails, a_mean.abs() < 1e-6, "trial {trial}: |mean| = {:.3e}", a_mean.abs());
        if std > delta {
            let a_std = (adv.iter().map(|a| a * a).sum::<f64>() / 3.0).sqrt();
            check!(
                fails,
                (a_std - 1.0).abs() < 1e-4,
                "trial {trial}: |popstd - 1| = {:.3e}",
                (a_std - 1.0).abs()
            );
        }
        if !fails.is_empty() {
            break;
        }
    }
    let constant = compute_advantages(&[2.5, 2.5, 2.5], delta);
    check!(fails, constant == vec![0.0, 0.0, 0.0], "constant rewards gave {constant:?}");
    finish(2, desc, fails);
}

#[test]
fn criterion_03_kl_estimator() {
    let desc = "KL estimator is nonnegative, zero at ratio 1, exact at the fixtures";
    let mut fails = Vec::new();
    let mut rng = SeededRng::new(31);
    let span = 3.0 * (10.0f64).ln();
    let mut min_seen = f64::INFINITY;
    for _ in 0..100_000 {
        let ratio = rng.uniform_range(-span, span).exp();
        let v = kl_token(1e-3, 1e-3 * ratio).unwrap();
        if v < min_seen {
            min_seen = v;
        }
    }
    check!(fails, min_seen >= -1e-12, "estimator dipped to {min_seen:.3e}");
    let at_one = kl_token(0.5, 0.5).unwrap();
    check!(fails, at_one == 0.0, "ratio 1 gave {at_one}");
    let at_two = kl_token(0.5, 1.0).unwrap();
    check!(
        fails,
        (at_two - 0.306853).abs() < 1e-6,
        "ratio 2 gave {at_two:.6}, want 0.306853"
    );
    let at_half = kl_token(1.0, 0.5).unwrap();
    check!(
        fails,
        (at_half - 0.193147).abs() < 1e-6,
        "ratio 0.5 gave {at_half:.6}, want 0.193147"
    );
    finish(3, desc, fails);
}

#[test]
fn criterion_04_clipping_semantics() {
    let desc = "clipped tokens contribute zero gradient; surrogate fixtures exact";
    let mut fails = Vec::new();

    let s1 = surrogate_term(1.3, 1.0, 0.2);
    check!(fails, (s1 - 1.2).abs() < 1e-12, "surrogate(1.3, +1, 0.2) = {s1}, want 1.2");
    let s2 = surrogate_term(0.7, -1.0, 0.2);
    check!(fails, (s2 + 0.8).abs() < 1e-12, "surrogate(0.7, -1, 0.2) = {s2}, want -0.8");

    // Two members, both fully clipped: rho = 1.5 with A = +1 and
    // rho = 1/1.5 with A = -1, beta = 0. Every token weight is zero, so the
    // analytic gradient vanishes and the objective is locally flat.
    let cfg = tiny_cfg();
    let params = PolicyParams::init(cfg, 4).unwrap();
    let model = Model::<f64>::from_params(&params);
    let members = vec![vec![0u32, 5, 2, 8, 1], vec![0, 5, 9, 3, 7]];
    let lp0 = model.sequence_log_prob(&members[0], 2).unwrap();
    let lp1 = model.sequence_log_prob(&members[1], 2).unwrap();
    let shift = (1.5f64).ln();
    let group = RolloutGroup {
        members: members.clone(),
        prompt_len: 2,
        old_log_probs: vec![
            lp0.iter().map(|lp| lp - shift).collect(),
            lp1.iter().map(|lp| lp + shift).collect(),
        ],
        rewards: vec![RewardBreakdown::zero(); 2],
        advantages: vec![1.0, -1.0],
    };
    let gcfg = GrpoConfig {
        group_size: 2,
        kl_beta: 0.0,
        ..GrpoConfig::default()
    };
    let (obj, grad) = grpo_objective_and_grad_t(&model, &model, &group, &gcfg).unwrap();
    // Hand value: member 1 gives 1.2 per token, member 2 gives -0.8, three
    // response tokens each, averaged over G * T = 6 slots.
    check!(fails, (obj - 0.2).abs() < 1e-9, "objective {obj:.9}, want 0.2");
    let max_abs = grad
        .arrays()
        .iter()
        .flat_map(|a| a.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    check!(fails, max_abs < 1e-15, "analytic gradient max |g| = {max_abs:.3e}");

    // Finite-difference probe on the leading entries of every array.
    let value = |p: &PolicyParams| -> f64 {
        grpo_objective_and_grad_t(&Model::<f64>::from_params(p), &model, &group, &gcfg)
            .unwrap()
            .0
    };
    let h = 1e-4f64;
    let n_arrays = params.tensors.arrays().len();
    for ai in 0..n_arrays {
        let len = params.tensors.arrays()[ai].len();
        for ei in 0..len.min(4) {
            let mut pp = params.clone();
            let base = pp.tensors.arrays()[ai][ei];
            pp.tensors.arrays_mut()[ai][ei] = ((base as f64) + h) as f32;
            let up = value(&pp);
            pp.tensors.arrays_mut()[ai][ei] = ((base as f64) - h) as f32;
            let dn = value(&pp);
            let fd = (up - dn) / (2.0 * h);
            check!(
                fails,
                fd.abs() < 1e-6,
                "array {ai} element {ei}: fd slope {fd:.3e} on clipped objective"
            );
        }
    }
    finish(4, desc, fails);
}

// ---------------------------------------------------------------------------
// Reward and discretization exactness (criteria 5, 6)
// ---------------------------------------------------------------------------

fn small_fixture() -> (GtBundle, Codebook, TraceLayout) {
    let scene_cfg = SceneConfig {
        image_size: 32,
        min_objects: 1,
        max_objects: 2,
    };
    let imgs: Vec<RgbImage> = (0..4)
        .map(|s| generate_scene(s, &scene_cfg).unwrap().image)
        .collect();
    let cb = fit_codebook(&imgs, 4, 16, 4, 7).unwrap();
    let scene = generate_scene(2, &scene_cfg).unwrap();
    let bundle = build_gt_trace(&scene, &sample_recipe(3), &cb, StepMode::Three).unwrap();
    let layout = TraceLayout {
        hq_size: 32,
        patch_size: 4,
    };
    (bundle, cb, layout)
}

fn fixture_object(kind: ShapeKind) -> SceneObject {
    SceneObject {
        name: kind.name().to_string(),
        synonyms: kind.synonyms().iter().map(|s| s.to_string()).collect(),
        kind,
        bbox: BBox { x: 0, y: 0, w: 8, h: 8 },
        color: [220, 40, 40],
        color_name: "red".to_string(),
        texture: TextureKind::Solid,
    }
}

#[test]
fn criterion_05_reward_exactness() {
    let desc = "reward fractions, format mutations, and parse gating are exact";
    let mut fails = Vec::new();

    // Degradation 3/4 = 0.75: one level flipped against the ground truth.
    let recipe = DegradationRecipe {
        blur_sigma: 1.5,
        noise_sigma: 5.0,
        jpeg_quality: 40.0,
        resize_jitter: 1.0,
        rng_seed: 0,
    };
    let summary = summarize(&recipe).unwrap();
    check!(
        fails,
        summary.text == "[blur: medium, noise: light, jpeg: heavy, resize: keep]",
        "summary text is {:?}",
        summary.text
    );
    let (deg, dm) =
        reward_degradation("[blur: medium, noise: light, jpeg: heavy, resize: enlarge]", &summary);
    check!(fails, deg == 0.75 && dm.correct == 3, "3/4 labels gave {deg} ({dm:?})");

    // Understanding 2/3: circle and square named, stripes missed.
    let objects = [
        fixture_object(ShapeKind::Circle),
        fixture_object(ShapeKind::Square),
        fixture_object(ShapeKind::Stripes),
    ];
    let (und, cov) =
        reward_understanding("a blurry scene with a circle and a square", &objects);
    check!(
        fails,
        (und - 2.0 / 3.0).abs() < 1e-12 && cov.covered == 2,
        "2/3 coverage gave {und} ({cov:?})"
    );
    let (syn, _) = reward_understanding("a disc next to a box", &objects[..2]);
    check!(fails, syn == 1.0, "synonym coverage gave {syn}");

    // Format: 1 on the rendered GT trace, 0 under every single control-token
    // deletion.
    let (bundle, cb, layout) = small_fixture();
    let rendered = render_trace(&bundle.trace, &layout).unwrap();
    check!(fails, reward_format(&rendered, &layout) == 1.0, "GT trace scored non-1");
    let mut mutations = 0usize;
    for (pos, &id) in rendered.ids.iter().enumerate() {
        if role_of(id) != Role::Control {
            continue;
        }
        let mut mutated = TokenSequence::new();
        for (i, &other) in rendered.ids.iter().enumerate() {
            if i != pos {
                mutated.push(other);
            }
        }
        mutations += 1;
        if reward_format(&mutated, &layout) != 0.0 {
            fails.push(format!("deleting control at position {pos} still parsed"));
        }
    }
    check!(fails, mutations == 15, "expected 15 control tokens, found {mutations}");

    // Parse-failure gating: the broken member scores zero everywhere.
    let mut broken = TokenSequence::new();
    for &id in &rendered.ids[1..] {
        broken.push(id);
    }
    let group = [rendered.clone(), broken];
    let rewards = total_rewards(
        &group,
        &bundle,
        &cb,
        &layout,
        Scorer::Composite,
        &RewardToggles::default(),
    )
    .unwrap();
    check!(fails, rewards[1] == RewardBreakdown::zero(), "gated member got {:?}", rewards[1]);
    check!(
        fails,
        rewards[0].form == 1.0 && rewards[0].deg == 1.0 && rewards[0].und == 1.0,
        "GT member got {:?}",
        rewards[0]
    );
    check!(
        fails,
        (rewards[0].total - (2.0 + rewards[0].deg + rewards[0].gen)).abs() < 1e-12,
        "total is not the component sum: {:?}",
        rewards[0]
    );
    finish(5, desc, fails);
}

#[test]
fn criterion_06_discretization_boundaries() {
    let desc = "degradation level boundaries are bit-exact and deterministic";
    let mut fails = Vec::new();

    let base = DegradationRecipe {
        blur_sigma: 1.5,
        noise_sigma: 5.0,
        jpeg_quality: 40.0,
        resize_jitter: 1.0,
        rng_seed: 0,
    };
    let label = |recipe: &DegradationRecipe, kind: ComponentKind| -> &'static str {
        summarize(recipe)
            .unwrap()
            .levels
            .iter()
            .find(|(k, _)| *k == kind)
            .unwrap()
            .1
    };

    // Noise thirds of [0, 30]: the boundary values land in the upper bin,
    // the closed top end is heavy.
    for (sigma, want) in [(0.0, "light"), (9.9999, "light"), (10.0, "medium"), (20.0, "heavy"), (30.0, "heavy")] {
        let r = DegradationRecipe { noise_sigma: sigma, ..base };
        let got = label(&r, ComponentKind::Noise);
        check!(fails, got == want, "noise {sigma} -> {got}, want {want}");
    }
    // Blur thirds of [0.2, 3.0], computed exactly as the implementation does.
    let blur_third = (3.0 - 0.2) / 3.0;
    for (sigma, want) in [
        (0.2, "light"),
        (0.2 + blur_third, "medium"),
        (0.2 + 2.0 * blur_third, "heavy"),
        (3.0, "heavy"),
    ] {
        let r = DegradationRecipe { blur_sigma: sigma, ..base };
        let got = label(&r, ComponentKind::Blur);
        check!(fails, got == want, "blur {sigma} -> {got}, want {want}");
    }
    // JPEG quality thirds of [30, 95] run heavy -> light.
    let jpeg_third = (95.0 - 30.0) / 3.0;
    for (q, want) in [
        (30.0, "heavy"),
        (30.0 + jpeg_third, "medium"),
        (30.0 + 2.0 * jpeg_third, "light"),
        (95.0, "light"),
    ] {
        let r = DegradationRecipe { jpeg_quality: q, ..base };
        let got = label(&r, ComponentKind::Jpeg);
        check!(fails, got == want, "jpeg {q} -> {got}, want {want}");
    }
    // Resize thirds of [0.5, 1.5]: shrink / keep / enlarge.
    let resize_third = 1.0 / 3.0;
    for (j, want) in [
        (0.5, "shrink"),
        (1.0, "keep"),
        (0.5 + resize_third, "keep"),
        (0.5 + 2.0 * resize_third, "enlarge"),
        (1.5, "enlarge"),
    ] {
        let r = DegradationRecipe { resize_jitter: j, ..base };
        let got = label(&r, ComponentKind::Resize);
        check!(fails, got == want, "resize {j} -> {got}, want {want}");
    }

    check!(
        fails,
        summarize(&base).unwrap() == summarize(&base).unwrap(),
        "summarize is not deterministic"
    );
    check!(
        fails,
        sample_recipe(9) == sample_recipe(9),
        "sample_recipe is not deterministic"
    );
    finish(6, desc, fails);
}

// ---------------------------------------------------------------------------
// Behavioral criteria on the shared world (7, 8, 9)
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_coldstart_memorization() {
    let desc = "8 bundles memorized to < 0.1 nats/token within 2000 steps";
    let mut fails = Vec::new();
    let w = world();
    let started = Instant::now();
    let mut params = PolicyParams::init(w.policy_cfg, 3).unwrap();
    let curve = train_coldstart(&mut params, &w.train[..8], &w.layout, 2000, 1e-3).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let tail = &curve[curve.len() - 8..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    check!(fails, tail_mean < 0.1, "final-pass mean CE {tail_mean:.4} nats/token >= 0.1");
    check!(fails, elapsed < 300.0, "memorization took {elapsed:.0}s, budget 300s");
    finish(7, desc, fails);
}

#[test]
fn criterion_08_grpo_improvement() {
    let desc = "GRPO lifts held-out reward >= 20% and learns format first";
    let mut fails = Vec::new();
    let w = world();

    let before = heldout_mean_reward(w, &w.cold);
    let cfg = GrpoConfig {
        group_size: 3,
        clip_eps: 0.2,
        kl_beta: 0.05,
        lr: 5e-5,
        batch_size: 8,
        epochs: 1,
        iterations: 200,
        max_response_tokens: 300,
        temperature: 0.6,
        adv_delta: 1e-8,
        toggles: RewardToggles::default(),
        seed: 11,
    };
    let started = Instant::now();
    let (trained, log) = train_grpo(
        &cfg,
        &w.train,
        &w.cold,
        &w.cb,
        &w.layout,
        ScorerKind::Composite,
        None,
        None,
    )
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    // Keep the training curve around for post-mortem inspection.
    let curve_path = std::env::temp_dir().join("stepsr_acceptance_c8.csv");
    let _ = stepsr::evalkit::write_grpo_log(&curve_path, &log);
    let after = heldout_mean_reward(w, &trained);
    println!(
        "  held-out sampled reward: {before:.3} -> {after:.3} ({:+.1}% relative, {elapsed:.0}s)",
        100.0 * (after - before) / before
    );
    check!(
        fails,
        after >= 1.2 * before,
        "held-out reward {after:.3} < 1.2 * {before:.3}"
    );
    check!(fails, elapsed < 1800.0, "GRPO took {elapsed:.0}s, budget 1800s");

    // Format learned first: by the iteration where mean_form first reaches
    // 0.95, format has gained >= 0.5 over its early baseline while the
    // parse-conditional generation quality has barely moved.
    let i_form = log.iter().position(|r| r.mean_form >= 0.95);
    match i_form {
        None => fails.push("mean_form never reached 0.95".to_string()),
        Some(i_form) => {
            println!("  mean_form first >= 0.95 at iteration {i_form}");
            let form: Vec<f64> = log.iter().map(|r| r.mean_form).collect();
            let window = 15usize.min(i_form + 1);
            let base_form = form[..window].iter().sum::<f64>() / window as f64;
            let form_gain = form[i_form] - base_form;
            check!(fails, form_gain >= 0.5, "format gain {form_gain:.3} < 0.5 by iter {i_form}");

            // Parse-conditional generation quality (mean_gen / mean_form) is
            // only meaningful where a reasonable share of members parses, so
            // the baseline starts at the first such iteration.
            let cond: Vec<f64> = (0..=i_form)
                .filter(|&i| form[i] >= 0.15)
                .map(|i| log[i].mean_gen / form[i])
                .collect();
            if cond.len() >= 6 {
                let k = 5usize.min(cond.len() / 2);
                let base_cond = cond[..k].iter().sum::<f64>() / k as f64;
                let peak_cond = cond
                    .windows(k)
                    .map(|win| win.iter().sum::<f64>() / k as f64)
                    .fold(f64::NEG_INFINITY, f64::max);
                let cond_gain = peak_cond - base_cond;
                println!(
                    "  form gain {form_gain:.3} (base {base_form:.3}); conditional gen gain {cond_gain:.3} (base {base_cond:.3})"
                );
                check!(
                    fails,
                    cond_gain < 0.15,
                    "generation improved by {cond_gain:.3} before format was learned"
                );
            } else {
                // Format jumped from unparseable to learned almost at once;
                // generation had no room to improve first.
                println!("  format crossed 0.95 with under {} parse-reliable iterations", cond.len());
            }
        }
    }
    finish(8, desc, fails);
}

#[test]
fn criterion_09_kl_anchoring() {
    let desc = "beta = 1000 keeps every parameter within 1e-3 of the reference";
    let mut fails = Vec::new();
    let w = world();
    let run = |kl_beta: f64| -> f64 {
        let cfg = GrpoConfig {
            group_size: 3,
            clip_eps: 0.2,
            kl_beta,
            lr: 2e-5,
            batch_size: 8,
            epochs: 1,
            iterations: 50,
            max_response_tokens: 300,
            temperature: 0.6,
            adv_delta: 1e-8,
            toggles: RewardToggles::default(),
            seed: 11,
        };
        let (trained, _) = train_grpo(
            &cfg,
            &w.train,
            &w.cold,
            &w.cb,
            &w.layout,
            ScorerKind::Composite,
            None,
            None,
        )
        .unwrap();
        trained.tensors.max_abs_diff(&w.cold.tensors)
    };
    let anchored = run(1000.0);
    let free = run(0.0);
    println!("  max |theta - theta_ref|: anchored {anchored:.3e}, free {free:.3e}");
    check!(fails, anchored < 1e-3, "anchored drift {anchored:.3e} >= 1e-3");
    check!(
        fails,
        anchored < free,
        "anchored drift {anchored:.3e} not below unanchored {free:.3e}"
    );
    finish(9, desc, fails);
}

// ---------------------------------------------------------------------------
// Round trips and metric fixtures (criteria 10, 11)
// ---------------------------------------------------------------------------

fn random_text(rng: &mut SeededRng, alphabet: &[u8], max_len: usize) -> String {
    let len = rng.below(max_len + 1);
    (0..len)
        .map(|_| alphabet[rng.below(alphabet.len())] as char)
        .collect()
}

#[test]
fn criterion_10_round_trips() {
    let desc = "trace, checkpoint, text, and codec round trips hold";
    let mut fails = Vec::new();

    // 1000 random traces render/parse to identity in both modes.
    let layout = TraceLayout {
        hq_size: 32,
        patch_size: 4,
    };
    let mut rng = SeededRng::new(77);
    for trial in 0..1000 {
        let n_steps = 2 + rng.below(2);
        let counts = layout.expected_counts(n_steps).unwrap();
        let trace = Trace {
            degradation_text: random_text(&mut rng, b"abcdefghijklmnopqrstuvwxyz :,[]", 24),
            steps: counts
                .iter()
                .map(|&n| TraceStep {
                    text: random_text(&mut rng, b"abcdefghijklmnopqrstuvwxyz ", 16),
                    image_tokens: (0..n).map(|_| IMAGE_BASE + rng.below(32) as u32).collect(),
                })
                .collect(),
        };
        let seq = render_trace(&trace, &layout).unwrap();
        match parse_trace(&seq, &layout) {
            Ok(back) if back == trace => {}
            other => {
                fails.push(format!("trial {trial}: round trip broke: {other:?}"));
                break;
            }
        }
    }

    // Checkpoint save/load is bit-exact.
    let cfg = PolicyConfig {
        vocab_size: 300,
        d_model: 16,
        n_heads: 2,
        n_blocks: 2,
        max_len: 64,
    };
    let params = PolicyParams::init(cfg, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rt.ckpt");
    save_checkpoint(&path, &params, None).unwrap();
    let (loaded, opt) = load_checkpoint(&path).unwrap();
    check!(fails, opt.is_none(), "phantom optimizer state appeared");
    let mut bit_exact = loaded.cfg == params.cfg;
    for (a, b) in params.tensors.arrays().iter().zip(loaded.tensors.arrays()) {
        bit_exact &= a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    check!(fails, bit_exact, "checkpoint round trip is not bit-exact");

    // Text codec byte identity.
    for text in [
        "",
        "plain ascii with [brackets: and, commas]",
        "múltï-byte ünïcode ✓",
        stepsr_core::trace::PROMPT,
    ] {
        let seq = encode_text(text);
        let back = decode_text(&seq.ids).unwrap();
        check!(fails, back == text, "text codec broke on {text:?}");
    }

    // Codec reconstruction fixpoint on 100 random images: one encode/decode
    // pass projects onto codebook patches, after which the projection is
    // stable.
    let scene_cfg = SceneConfig {
        image_size: 32,
        min_objects: 1,
        max_objects: 2,
    };
    let imgs: Vec<RgbImage> = (0..4)
        .map(|s| generate_scene(s, &scene_cfg).unwrap().image)
        .collect();
    let cb = fit_codebook(&imgs, 4, 16, 4, 7).unwrap();
    for trial in 0..100 {
        let mut img = RgbImage::new(32, 32);
        for v in img.data.iter_mut() {
            *v = rng.below(256) as u8;
        }
        let e1 = encode_image(&img, &cb).unwrap();
        let d1 = decode_image(&e1.ids, &cb, 32, 32).unwrap();
        let e2 = encode_image(&d1, &cb).unwrap();
        let d2 = decode_image(&e2.ids, &cb, 32, 32).unwrap();
        if d1.data != d2.data {
            fails.push(format!("trial {trial}: codec fixpoint broke"));
            break;
        }
    }
    finish(10, desc, fails);
}

#[test]
fn criterion_11_metric_fixtures() {
    let desc = "PSNR/SSIM analytic fixtures and PSNR noise monotonicity hold";
    let mut fails = Vec::new();

    let gray = |v: u8| RgbImage::filled(16, 16, [v, v, v]);
    let p_same = psnr_y(&gray(90), &gray(90)).unwrap();
    check!(fails, p_same == 100.0, "identical PSNR {p_same}, want the 100 dB cap");
    let p_bw = psnr_y(&gray(0), &gray(255)).unwrap();
    check!(fails, p_bw.abs() < 1e-9, "black/white PSNR {p_bw:.3e}, want 0");
    // Uniform offset of 10 luma levels: PSNR = 10 log10(255^2 / 100).
    let p_ten = psnr_y(&gray(100), &gray(110)).unwrap();
    let want = 10.0 * (255.0f64 * 255.0 / 100.0).log10();
    check!(fails, (p_ten - want).abs() < 1e-6, "offset-10 PSNR {p_ten:.6}, want {want:.6}");

    let s_same = ssim_y(&gray(128), &gray(128)).unwrap();
    check!(fails, (s_same - 1.0).abs() < 1e-9, "identical SSIM {s_same}");
    // Zero-variance black vs white: SSIM = C1 / (255^2 + C1).
    let c1 = (0.01f64 * 255.0) * (0.01 * 255.0);
    let s_bw = ssim_y(&gray(0), &gray(255)).unwrap();
    let want_bw = c1 / (255.0 * 255.0 + c1);
    check!(fails, (s_bw - want_bw).abs() < 1e-6, "black/white SSIM {s_bw:.2e}, want {want_bw:.2e}");

    // Spearman rank correlation of PSNR against 20 increasing noise levels.
    let mut rng = SeededRng::new(42);
    let mut base = RgbImage::new(32, 32);
    for v in base.data.iter_mut() {
        *v = rng.below(256) as u8;
    }
    let mut psnrs = Vec::new();
    for level in 0..20u64 {
        let sigma = 2.0 * (level + 1) as f64;
        let mut noise_rng = SeededRng::new(500 + level);
        let mut noisy = base.clone();
        for v in noisy.data.iter_mut() {
            *v = stepsr_core::image::quantize_u8(*v as f64 + sigma * noise_rng.normal());
        }
        psnrs.push(psnr_y(&base, &noisy).unwrap());
    }
    let mut order: Vec<usize> = (0..20).collect();
    order.sort_by(|&i, &j| psnrs[i].partial_cmp(&psnrs[j]).unwrap());
    let mut rank = vec![0usize; 20];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let n = 20.0f64;
    let d2: f64 = rank
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let d = r as f64 - i as f64;
            d * d
        })
        .sum();
    let rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
    check!(fails, rho < -0.95, "Spearman(noise, PSNR) = {rho:.3}, want < -0.95");
    finish(11, desc, fails);
}

// ---------------------------------------------------------------------------
// Ablation plumbing through the real binary (criterion 12)
// ---------------------------------------------------------------------------

fn run_bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_stepsr"))
        .args(args)
        .output()
        .expect("spawning the stepsr binary")
}

fn expect_ok(fails: &mut Vec<String>, label: &str, out: &std::process::Output) -> bool {
    if out.status.code() == Some(0) {
        true
    } else {
        fails.push(format!(
            "{label}: exit {:?}, stderr: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
        false
    }
}

fn reward_column(row: &stepsr_core::train::GrpoLogRow, name: &str) -> f64 {
    match name {
        "deg" => row.mean_deg,
        "und" => row.mean_und,
        "gen" => row.mean_gen,
        other => panic!("unknown column {other}"),
    }
}

#[test]
fn criterion_12_ablation_plumbing() {
    let desc = "reward toggles, step modes, and scorer choices plumb through the CLI";
    let mut fails = Vec::new();

    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    std::fs::write(
        dir.path().join("run.cfg"),
        "image_size = 32\nmin_objects = 1\nmax_objects = 2\nd_model = 16\nn_heads = 2\n\
         n_blocks = 1\nmax_len = 512\npatch_size = 4\nsteps = \"three\"\n",
    )
    .unwrap();
    let cfg = p("run.cfg");
    let data = p("data");
    let cb = p("cb.vqcb");
    let cold = p("cold.ckpt");

    let ok = expect_ok(
        &mut fails,
        "gen-data",
        &run_bin(&["gen-data", "--config", &cfg, "--out", &data, "--count", "4", "--seed", "1"]),
    );
    if ok {
        for id in 0..4 {
            for (sub, ext) in [("hq", "png"), ("lr", "png"), ("meta", "json")] {
                let f = dir.path().join("data").join(sub).join(format!("{id:06}.{ext}"));
                check!(fails, f.exists(), "missing dataset file {}", f.display());
            }
        }
    }
    let ok = ok
        && expect_ok(
            &mut fails,
            "fit-codebook",
            &run_bin(&[
                "fit-codebook", "--data", &data, "--k", "16", "--iters", "4", "--seed", "7",
                "--out", &cb,
            ]),
        )
        && expect_ok(
            &mut fails,
            "coldstart",
            &run_bin(&[
                "coldstart", "--data", &data, "--codebook", &cb, "--steps", "1500", "--out",
                &cold, "--lr", "1e-3", "--seed", "3",
            ]),
        );
    if !ok {
        finish(12, desc, fails);
        return;
    }

    let grpo = |extra: &[&str], iterations: &str, out: &str, log: &str| -> std::process::Output {
        let mut args = vec![
            "grpo", "--data", &data, "--codebook", &cb, "--init", &cold, "--out", out,
            "--group", "3", "--batch", "4", "--iterations", iterations, "--max-response", "300",
            "--temperature", "0.7", "--seed", "5", "--log", log,
        ];
        args.extend_from_slice(extra);
        run_bin(&args)
    };

    // Baseline plus one run per --no-reward-* flag, all with the same seed:
    // the first iteration's rollouts coincide, so the toggled column must be
    // the only one that changes.
    let base_out = p("g_base.ckpt");
    let base_log = p("g_base.csv");
    if expect_ok(&mut fails, "grpo baseline", &grpo(&[], "2", &base_out, &base_log)) {
        let base_rows = read_grpo_log(Path::new(&base_log)).unwrap();
        check!(fails, base_rows.len() == 2, "baseline log has {} rows", base_rows.len());
        for col in ["deg", "und", "gen"] {
            let flag = format!("--no-reward-{col}");
            let out = p(&format!("g_no_{col}.ckpt"));
            let log = p(&format!("g_no_{col}.csv"));
            if !expect_ok(&mut fails, &flag, &grpo(&[&flag], "2", &out, &log)) {
                continue;
            }
            let rows = read_grpo_log(Path::new(&log)).unwrap();
            check!(
                fails,
                rows.iter().all(|r| reward_column(r, col) == 0.0),
                "{flag}: mean_{col} column is not all zero"
            );
            check!(
                fails,
                reward_column(&base_rows[0], col) > 0.0,
                "baseline mean_{col} is zero at iteration 0; the toggle check is vacuous"
            );
            for other in ["deg", "und", "gen"] {
                if other == col {
                    continue;
                }
                let a = reward_column(&rows[0], other);
                let b = reward_column(&base_rows[0], other);
                check!(
                    fails,
                    (a - b).abs() < 1e-9,
                    "{flag}: mean_{other} changed at iteration 0 ({a} vs {b})"
                );
            }
        }
    }

    // --steps-mode two runs, and the two-step grammar holds on this dataset.
    if expect_ok(
        &mut fails,
        "--steps-mode two",
        &grpo(&["--steps-mode", "two"], "1", &p("g_two.ckpt"), &p("g_two.csv")),
    ) {
        let cb_loaded = load_codebook(Path::new(&cb)).unwrap();
        let (_, metas) = read_dataset(Path::new(&data)).unwrap();
        let bundle = bundle_from_meta(&metas[0], &cb_loaded, StepMode::Two).unwrap();
        check!(fails, bundle.trace.steps.len() == 2, "two-step bundle has {} steps", bundle.trace.steps.len());
        let layout = TraceLayout { hq_size: 32, patch_size: 4 };
        let seq = render_trace(&bundle.trace, &layout).unwrap();
        match parse_trace(&seq, &layout) {
            Ok(t) => check!(fails, t.steps.len() == 2, "reparsed two-step trace has {} steps", t.steps.len()),
            Err(e) => fails.push(format!("two-step GT trace failed to parse: {e}")),
        }
    }

    // Every generation-scorer choice runs to completion.
    expect_ok(
        &mut fails,
        "--gen-scorer fidelity",
        &grpo(&["--gen-scorer", "fidelity"], "1", &p("g_fid.ckpt"), &p("g_fid.csv")),
    );
    expect_ok(
        &mut fails,
        "--gen-scorer noref",
        &grpo(&["--gen-scorer", "noref"], "1", &p("g_nr.ckpt"), &p("g_nr.csv")),
    );
    let stub = r#"while read line; do echo '{"scores":[0.5,0.5,0.5]}'; done"#;
    expect_ok(
        &mut fails,
        "--gen-scorer expert",
        &grpo(
            &["--gen-scorer", "expert", "--expert-cmd", stub],
            "1",
            &p("g_ex.ckpt"),
            &p("g_ex.csv"),
        ),
    );

    // Usage errors exit 1.
    let missing = grpo(&["--gen-scorer", "expert"], "1", &p("g_bad.ckpt"), &p("g_bad.csv"));
    check!(
        fails,
        missing.status.code() == Some(1),
        "expert without --expert-cmd exited {:?}, want 1",
        missing.status.code()
    );
    let unknown = run_bin(&["grpo", "--bogus"]);
    check!(
        fails,
        unknown.status.code() == Some(1),
        "unknown flag exited {:?}, want 1",
        unknown.status.code()
    );
    finish(12, desc, fails);
}
