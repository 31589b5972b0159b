//! Weakness-aware sample mining: a second ("crucial") conditioning pathway
//! initialized from the base one and fine-tuned so that generated targets
//! minimize the downstream model's in-box vs out-of-box confidence gap,
//! fused with the base pathway's attention output by a trade-off lambda.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    forward_diffuse, randn_like, CompositeLatent, CondKV, CondTensors, NoiseSchedule, PathwayKV,
    PathwayTensors,
};
use crate::downstream::Segmenter;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{collect_grads, Adam, Bound, ParamStore};
use crate::safe::{
    compose_prompt, compose_prompt_with, safe_attention, Conditioner, SafeModel, SceneBatchItem,
    TMPL_PREFIX,
};
use crate::scenegen::ScarceScene;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CRUCIAL_PREFIX: &str = "crucial";
pub const CRUCIAL_TMPL_PREFIX: &str = "crucial.tmpl";

/// Copies the base pathway (extractors, K/V maps) and the template rows into
/// an independent crucial pathway. Deterministic: a pure copy.
pub fn init_from_safe(safe: &SafeModel, store: &mut ParamStore) -> Result<Conditioner> {
    for name in safe.cond.param_names() {
        if !store.contains(&name) {
            return Err(Error::Checkpoint(format!("missing base parameter {name}")));
        }
    }
    let src = store.clone();
    src.copy_prefixed(&format!("{}.", safe.cond.prefix), store, &format!("{CRUCIAL_PREFIX}."));
    src.copy_prefixed(&format!("{TMPL_PREFIX}."), store, &format!("{CRUCIAL_TMPL_PREFIX}."));
    Conditioner::attach(CRUCIAL_PREFIX, &safe.model, &safe.enc_config)
}

/// The crucial prompt p^c for a prepared scene, on-tape.
pub fn crucial_prompt(
    safe: &SafeModel,
    crucial: &Conditioner,
    tape: &mut Tape,
    bound: &Bound,
    features: &[Tensor],
) -> Result<(Var, usize, usize)> {
    let pstar = crucial.extract_pstar(tape, bound, features)?;
    Ok(compose_prompt_with(tape, bound, &safe.model, pstar, CRUCIAL_TMPL_PREFIX))
}

/// Two-pathway conditioning: crucial output weighted by lambda, base output
/// by (1 - lambda). Fusion happens at the attention-output level inside the
/// denoiser.
pub fn fused_cond(
    safe: &SafeModel,
    crucial: &Conditioner,
    tape: &mut Tape,
    bound: &Bound,
    features: &[Tensor],
    lambda: f64,
) -> Result<CondKV> {
    check_lambda(lambda)?;
    let (p_c, start, len) = crucial_prompt(safe, crucial, tape, bound, features)?;
    let pstar_u = safe.cond.extract_pstar(tape, bound, features)?;
    let (p_u, _, _) = compose_prompt(tape, bound, &safe.model, pstar_u);
    let (wk_c, wv_c) = crucial.kv_vars(bound);
    let (wk_u, wv_u) = safe.cond.kv_vars(bound);
    Ok(CondKV {
        pathways: vec![
            PathwayKV { prompt: p_c, wk: wk_c, wv: wv_c, weight: lambda },
            PathwayKV { prompt: p_u, wk: wk_u, wv: wv_u, weight: 1.0 - lambda },
        ],
        pstar_start: start,
        pstar_len: len,
    })
}

/// Frozen two-pathway conditioning tensors for the sampler.
pub fn fused_cond_tensors(
    safe: &SafeModel,
    crucial: &Conditioner,
    store: &ParamStore,
    encoder: &Encoder,
    enc_store: &ParamStore,
    reference: &Tensor,
    lambda: f64,
) -> Result<CondTensors> {
    check_lambda(lambda)?;
    let features = encoder.features(enc_store, reference);
    let mut tape = Tape::new();
    let bound = Bound::bind(store, &mut tape);
    let kv = fused_cond(safe, crucial, &mut tape, &bound, &features, lambda)?;
    Ok(CondTensors {
        pathways: kv
            .pathways
            .iter()
            .map(|p| PathwayTensors {
                prompt: tape.value(p.prompt).clone(),
                wk: p.wk.iter().map(|&v| tape.value(v).clone()).collect(),
                wv: p.wv.iter().map(|&v| tape.value(v).clone()).collect(),
                weight: p.weight,
            })
            .collect(),
        pstar_start: kv.pstar_start,
        pstar_len: kv.pstar_len,
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("lambda {lambda} outside [0,1]")));
    }
    Ok(())
}

/// lambda * Attn(Q, K^c, V^c) + (1 - lambda) * Attn(Q, K^u, V^u), pure
/// tensor form. K/V come from projecting each prompt through its own maps.
#[allow(clippy::too_many_arguments)]
pub fn fused_attention(
    q: &Tensor,
    p_u: &Tensor,
    wk_u: &Tensor,
    wv_u: &Tensor,
    p_c: &Tensor,
    wk_c: &Tensor,
    wv_c: &Tensor,
    lambda: f64,
    scale: f64,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    let (out_u, _) = safe_attention(q, p_u, wk_u, wv_u, scale);
    let (out_c, _) = safe_attention(q, p_c, wk_c, wv_c, scale);
    Ok(Tensor::new(
        out_u.shape(),
        out_u
            .data()
            .iter()
            .zip(out_c.data())
            .map(|(u, c)| lambda * c + (1.0 - lambda) * u)
            .collect(),
    ))
}

// ---- differentiable generation path ----

/// One-step clean-image estimate from a noisy latent and a predicted noise,
/// composited with the background outside the box mask. Differentiable with
/// respect to everything upstream of `eps_pred`.
pub fn estimate_clean_image(
    tape: &mut Tape,
    nu_t: Var,
    eps_pred: Var,
    t: usize,
    sched: &NoiseSchedule,
    mask: &Tensor,
    background: &Tensor,
) -> Result<Var> {
    if t == 0 {
        return Err(Error::Argument("clean-image estimate needs t >= 1".into()));
    }
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::Argument("alpha_bar must be positive".into()));
    }
    let shape = tape.value(nu_t).shape().to_vec();
    if mask.data().len() != tape.value(nu_t).data().len() {
        return Err(Error::Argument("mask size mismatch".into()));
    }
    // x0_hat = (nu_t - sqrt(1-ab) eps) / sqrt(ab)
    let scaled_eps = tape.scale(eps_pred, -(1.0 - ab).sqrt());
    let num = tape.add(nu_t, scaled_eps);
    let x0 = tape.scale(num, 1.0 / ab.sqrt());
    // composite: m * x0 + (1-m) * background
    let m = tape.leaf(mask.reshaped(&shape));
    let masked_x0 = tape.mul(x0, m);
    let outside = Tensor::new(
        &shape,
        background
            .data()
            .iter()
            .zip(mask.data())
            .map(|(b, m)| b * (1.0 - m))
            .collect(),
    );
    let outside = tape.leaf(outside);
    Ok(tape.add(masked_x0, outside))
}

// ---- feedback gap ----

/// Squared difference between the in-box and out-of-box mean confidence,
/// with delta guarding the denominators. `f` and `mask` are flat and equal
/// sized; the mask must be binary with both regions non-empty.
pub fn feedback_gap(tape: &mut Tape, f: Var, mask: &Tensor, delta: f64) -> Result<Var> {
    if delta <= 0.0 {
        return Err(Error::Argument("delta must be positive".into()));
    }
    let n = tape.value(f).data().len();
    if mask.data().len() != n {
        return Err(Error::Argument("mask size mismatch".into()));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Argument("mask must be binary".into()));
    }
    let inside: f64 = mask.data().iter().sum();
    if inside == n as f64 {
        return Err(Error::Argument("degenerate mask: all ones".into()));
    }
    if inside == 0.0 {
        return Err(Error::Argument("degenerate mask: empty".into()));
    }
    let shape = tape.value(f).shape().to_vec();
    let m = mask.reshaped(&shape);
    let inv = Tensor::new(&shape, mask.data().iter().map(|v| 1.0 - v).collect());
    let in_sum = tape.weighted_sum(f, &m);
    let out_sum = tape.weighted_sum(f, &inv);
    let in_mean = tape.scale(in_sum, 1.0 / (inside + delta));
    let out_mean = tape.scale(out_sum, 1.0 / (n as f64 - inside + delta));
    let diff = tape.sub(in_mean, out_mean);
    Ok(tape.mul(diff, diff))
}

/// Plain-number form for reports.
pub fn feedback_gap_value(f: &Tensor, mask: &Tensor, delta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let fv = tape.leaf(f.clone());
    let gap = feedback_gap(&mut tape, fv, mask, delta)?;
    Ok(tape.value(gap).item())
}

/// L^c = feedback_gap + weighted ||p^c||_1. The literal contract uses weight
/// 1; training configs may downweight the regularizer.
pub fn wasm_loss(
    tape: &mut Tape,
    f: Var,
    mask: &Tensor,
    delta: f64,
    prompt: Var,
    l1_weight: f64,
) -> Result<(Var, Var, Var)> {
    let gap = feedback_gap(tape, f, mask, delta)?;
    let l1 = tape.abs_sum(prompt);
    let weighted = tape.scale(l1, l1_weight);
    let total = tape.add(gap, weighted);
    Ok((total, gap, l1))
}

// ---- Stage 2 training ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WasmTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub lambda: f64,
}

impl Default for WasmTrainConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 1e-3, seed: 0, lambda: 0.5 }
    }
}

pub struct WasmTrainReport {
    pub losses: Vec<f64>,
    pub gaps: Vec<f64>,
    pub l1: Vec<f64>,
}

/// One Stage 2 loss evaluation: diffuse a reference scene to timestep `t`,
/// predict noise with fused conditioning, estimate the clean image, score it
/// with the frozen downstream model, and compute the confidence gap plus the
/// prompt regularizer.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss(
    safe: &SafeModel,
    crucial: &Conditioner,
    seg: &Segmenter,
    tape: &mut Tape,
    bound: &Bound,
    item: &SceneBatchItem,
    background: &Tensor,
    t: usize,
    eps: &Tensor,
    lambda: f64,
    l1_weight: f64,
) -> Result<(Var, Var, Var)> {
    let nu_t_val = forward_diffuse(&item.nu0, t, eps, &safe.sched)?;
    let composite = CompositeLatent::compose(&nu_t_val, &item.mask3, &item.masked, t)?;
    let z = tape.leaf(composite.channels);
    let cond = fused_cond(safe, crucial, tape, bound, &item.features, lambda)?;
    let prompt = cond.pathways[0].prompt;
    let eps_pred = safe.denoiser.forward(tape, bound, z, t, &cond, None, false);
    let nu_t = tape.leaf(nu_t_val);
    let x0 = estimate_clean_image(tape, nu_t, eps_pred, t, &safe.sched, &item.mask3, background)?;
    let logits = seg.logits(tape, bound, x0);
    let probs = tape.sigmoid(logits);
    let n: usize = tape.value(probs).data().len();
    let flat = tape.reshape(probs, &[n]);
    let mask_flat = item.mask3.reshaped(&[n]);
    wasm_loss(tape, flat, &mask_flat, safe.model.delta, prompt, l1_weight)
}

/// Stage 2: only the crucial pathway (extractors, K/V maps, template rows)
/// is optimized; denoiser, base pathway, encoder, and downstream model stay
/// frozen. Returns the loss curve.
pub fn train_wasm(
    safe: &SafeModel,
    crucial: &Conditioner,
    seg: &Segmenter,
    store: &mut ParamStore,
    scenes: &[ScarceScene],
    items: &[SceneBatchItem],
    cfg: &WasmTrainConfig,
) -> Result<WasmTrainReport> {
    if scenes.is_empty() || scenes.len() != items.len() {
        return Err(Error::State("need prepared items for every training scene".into()));
    }
    check_lambda(cfg.lambda)?;
    let frozen_before = frozen_hash(store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut report = WasmTrainReport { losses: Vec::new(), gaps: Vec::new(), l1: Vec::new() };
    for _ in 0..cfg.steps {
        let i = rng.gen_range(0..items.len());
        let t = rng.gen_range(1..=safe.sched.t_train);
        let n = safe.model.image_size;
        let eps = randn_like(&[1, n, n], &mut rng);
        let mut tape = Tape::new();
        let bound = Bound::bind(store, &mut tape);
        let (total, gap, l1) = stage2_loss(
            safe,
            crucial,
            seg,
            &mut tape,
            &bound,
            &items[i],
            &scenes[i].background,
            t,
            &eps,
            cfg.lambda,
            safe.model.l1_weight,
        )?;
        report.losses.push(tape.value(total).item());
        report.gaps.push(tape.value(gap).item());
        report.l1.push(tape.value(l1).item());
        let grads = tape.backward(total);
        let g: BTreeMap<String, Tensor> = collect_grads(&tape, &bound, &grads, |name| {
            name.starts_with("crucial.")
        });
        opt.step(store, &g);
    }
    let frozen_after = frozen_hash(store);
    if frozen_before != frozen_after {
        return Err(Error::State("frozen parameters changed during Stage 2".into()));
    }
    Ok(report)
}

/// Hash of every parameter outside the crucial pathway.
pub fn frozen_hash(store: &ParamStore) -> String {
    let mut frozen = ParamStore::new();
    for (name, t) in store.iter() {
        if !name.starts_with("crucial.") {
            frozen.insert(name, t.clone());
        }
    }
    frozen.content_hash()
}

/// Mean feedback gap over a fixed probe set, with frozen parameters.
#[allow(clippy::too_many_arguments)]
pub fn probe_gap(
    safe: &SafeModel,
    crucial: &Conditioner,
    seg: &Segmenter,
    store: &ParamStore,
    scenes: &[ScarceScene],
    items: &[SceneBatchItem],
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for (scene, item) in scenes.iter().zip(items) {
        let t = rng.gen_range(1..=safe.sched.t_train);
        let n = safe.model.image_size;
        let eps = randn_like(&[1, n, n], &mut rng);
        let mut tape = Tape::new();
        let bound = Bound::bind(store, &mut tape);
        let (_, gap, _) = stage2_loss(
            safe,
            crucial,
            seg,
            &mut tape,
            &bound,
            item,
            &scene.background,
            t,
            &eps,
            lambda,
            safe.model.l1_weight,
        )?;
        acc += tape.value(gap).item();
    }
    Ok(acc / scenes.len() as f64)
}
