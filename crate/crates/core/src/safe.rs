//! Scene-agnostic feature extraction: maps reference-image encoder features
//! into prompt token rows, fuses them with a learned template, and supplies
//! per-layer key/value projections for the denoiser's cross-attention.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::diffusion::{
    cross_attention, forward_diffuse, noise_mse, randn_like, CompositeLatent, CondKV, CondTensors,
    Denoiser, NoiseSchedule, PathwayKV, PathwayTensors, ATTN_LAYERS,
};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{collect_grads, init_linear, linear, Adam, Bound, ParamStore};
use crate::scenegen::ScarceScene;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Evenly spaced layer indices: Gamma picks out of n layers, first and last
/// always included when Gamma > 1.
pub fn selected_layers(n: usize, gamma: usize) -> Result<Vec<usize>> {
    if gamma == 0 || gamma > n {
        return Err(Error::Config(format!("gamma {gamma} out of range for {n} layers")));
    }
    if gamma == 1 {
        return Ok(vec![n / 2]);
    }
    let mut out = Vec::with_capacity(gamma);
    for i in 0..gamma {
        // round(i * (n-1) / (gamma-1)) in integer arithmetic
        let idx = (i * (n - 1) * 2 + (gamma - 1)) / (2 * (gamma - 1));
        out.push(idx);
    }
    out.dedup();
    if out.len() != gamma {
        return Err(Error::Config(format!("gamma {gamma} collapses on {n} layers")));
    }
    Ok(out)
}

/// Conditioning pathway definition: which parameter prefix holds the
/// per-layer extractors and key/value maps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conditioner {
    pub prefix: String,
    pub selected: Vec<usize>,
    pub enc_width: usize,
    pub token_dim: usize,
}

impl Conditioner {
    pub fn init(
        prefix: &str,
        model: &ModelConfig,
        enc: &EncoderConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let selected = selected_layers(enc.layers, model.gamma)?;
        let q = model.token_dim;
        let d = model.denoiser_config().attn_dim;
        for &j in &selected {
            store.insert(&format!("{prefix}.ext{j}.w"), init_linear(&[enc.width, q], rng));
            store.insert(&format!("{prefix}.ext{j}.b"), Tensor::zeros(&[q]));
        }
        for a in 0..ATTN_LAYERS {
            store.insert(&format!("{prefix}.kv{a}.wk"), init_linear(&[q, d], rng));
            store.insert(&format!("{prefix}.kv{a}.wv"), init_linear(&[q, d], rng));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            selected,
            enc_width: enc.width,
            token_dim: q,
        })
    }

    /// Rebuilds the descriptor for parameters already present in a store.
    pub fn attach(prefix: &str, model: &ModelConfig, enc: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            prefix: prefix.to_string(),
            selected: selected_layers(enc.layers, model.gamma)?,
            enc_width: enc.width,
            token_dim: model.token_dim,
        })
    }

    /// p*: one projected token row per selected encoder layer, `[Gamma, q]`.
    /// `features` holds all encoder layers' pooled features (frozen).
    pub fn extract_pstar(&self, tape: &mut Tape, bound: &Bound, features: &[Tensor]) -> Result<Var> {
        let p = &self.prefix;
        let mut rows = Vec::with_capacity(self.selected.len());
        for &j in &self.selected {
            let f = features
                .get(j)
                .ok_or_else(|| Error::Config(format!("selected layer {j} out of range")))?;
            if f.shape() != [1, self.enc_width] {
                return Err(Error::Argument(format!(
                    "layer {j} feature shape {:?} != [1,{}]",
                    f.shape(),
                    self.enc_width
                )));
            }
            let fv = tape.leaf(f.clone());
            let w = bound.var(&format!("{p}.ext{j}.w"));
            let b = bound.var(&format!("{p}.ext{j}.b"));
            rows.push(linear(tape, fv, w, b));
        }
        Ok(tape.concat_rows(&rows))
    }

    /// Key/value maps for all cross-attention layers, bound on this tape.
    pub fn kv_vars(&self, bound: &Bound) -> (Vec<Var>, Vec<Var>) {
        let p = &self.prefix;
        let wk = (0..ATTN_LAYERS).map(|a| bound.var(&format!("{p}.kv{a}.wk"))).collect();
        let wv = (0..ATTN_LAYERS).map(|a| bound.var(&format!("{p}.kv{a}.wv"))).collect();
        (wk, wv)
    }

    pub fn param_names(&self) -> Vec<String> {
        let p = &self.prefix;
        let mut names = Vec::new();
        for &j in &self.selected {
            names.push(format!("{p}.ext{j}.w"));
            names.push(format!("{p}.ext{j}.b"));
        }
        for a in 0..ATTN_LAYERS {
            names.push(format!("{p}.kv{a}.wk"));
            names.push(format!("{p}.kv{a}.wv"));
        }
        names
    }
}

// ---- template composition ----

pub const TMPL_PREFIX: &str = "tmpl";
pub const NULL_PROMPT: &str = "null.prompt";

/// Inserts the learned template embedding table (one row per non-placeholder
/// token, keyed by template position) and the learned null prompt.
pub fn init_shared_prompts(model: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let q = model.token_dim;
    for (i, tok) in model.template.iter().enumerate() {
        if tok != "{}" {
            store.insert(&format!("{TMPL_PREFIX}.{i}"), init_linear(&[1, q], rng));
        }
    }
    store.insert(NULL_PROMPT, init_linear(&[model.token_count(), q], rng));
}

/// Position of the placeholder token in the template.
pub fn placeholder_index(model: &ModelConfig) -> usize {
    model
        .template
        .iter()
        .position(|t| t == "{}")
        .expect("validated template has a placeholder")
}

/// Composes the final prompt `[l, q]`: template rows with the placeholder
/// replaced by the Gamma rows of p*. Returns the prompt and the p* span.
pub fn compose_prompt(
    tape: &mut Tape,
    bound: &Bound,
    model: &ModelConfig,
    pstar: Var,
) -> (Var, usize, usize) {
    compose_prompt_with(tape, bound, model, pstar, TMPL_PREFIX)
}

/// Same composition against an alternative template table (the crucial
/// pathway trains its own copy of the template rows).
pub fn compose_prompt_with(
    tape: &mut Tape,
    bound: &Bound,
    model: &ModelConfig,
    pstar: Var,
    tmpl_prefix: &str,
) -> (Var, usize, usize) {
    let start = placeholder_index(model);
    let gamma = tape.value(pstar).shape()[0];
    let mut rows = Vec::new();
    for (i, tok) in model.template.iter().enumerate() {
        if tok == "{}" {
            rows.push(pstar);
        } else {
            rows.push(bound.var(&format!("{tmpl_prefix}.{i}")));
        }
    }
    let prompt = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) };
    (prompt, start, gamma)
}

/// Single-pathway conditioning from a composed prompt.
pub fn cond_from_prompt(
    cond: &Conditioner,
    bound: &Bound,
    prompt: Var,
    pstar_start: usize,
    pstar_len: usize,
) -> CondKV {
    let (wk, wv) = cond.kv_vars(bound);
    CondKV {
        pathways: vec![PathwayKV { prompt, wk, wv, weight: 1.0 }],
        pstar_start,
        pstar_len,
    }
}

/// Unconditional pathway: the learned null prompt through the base KV maps.
pub fn null_cond(cond: &Conditioner, bound: &Bound, model: &ModelConfig) -> CondKV {
    let prompt = bound.var(NULL_PROMPT);
    cond_from_prompt(cond, bound, prompt, placeholder_index(model), model.gamma)
}

/// Frozen conditioning tensors for the sampler: extracts p* from a reference
/// image and composes the prompt with the current parameter values.
pub fn cond_tensors(
    cond: &Conditioner,
    store: &ParamStore,
    model: &ModelConfig,
    encoder: &Encoder,
    enc_store: &ParamStore,
    reference: &Tensor,
) -> Result<CondTensors> {
    let features = encoder.features(enc_store, reference);
    let mut tape = Tape::new();
    let bound = Bound::bind(store, &mut tape);
    let pstar = cond.extract_pstar(&mut tape, &bound, &features)?;
    let (prompt, start, len) = compose_prompt(&mut tape, &bound, model, pstar);
    let p = &cond.prefix;
    Ok(CondTensors {
        pathways: vec![PathwayTensors {
            prompt: tape.value(prompt).clone(),
            wk: (0..ATTN_LAYERS).map(|a| store.get(&format!("{p}.kv{a}.wk")).clone()).collect(),
            wv: (0..ATTN_LAYERS).map(|a| store.get(&format!("{p}.kv{a}.wv")).clone()).collect(),
            weight: 1.0,
        }],
        pstar_start: start,
        pstar_len: len,
    })
}

pub fn null_cond_tensors(cond: &Conditioner, store: &ParamStore, model: &ModelConfig) -> CondTensors {
    let p = &cond.prefix;
    CondTensors {
        pathways: vec![PathwayTensors {
            prompt: store.get(NULL_PROMPT).clone(),
            wk: (0..ATTN_LAYERS).map(|a| store.get(&format!("{p}.kv{a}.wk")).clone()).collect(),
            wv: (0..ATTN_LAYERS).map(|a| store.get(&format!("{p}.kv{a}.wv")).clone()).collect(),
            weight: 1.0,
        }],
        pstar_start: placeholder_index(model),
        pstar_len: model.gamma,
    }
}

/// Cross-attention with the prompt projected through one layer's K/V maps:
/// softmax(Q (p W^K)^T * scale) (p W^V).
pub fn safe_attention(q: &Tensor, prompt: &Tensor, wk: &Tensor, wv: &Tensor, scale: f64) -> (Tensor, Tensor) {
    let k = matmul_plain(prompt, wk);
    let v = matmul_plain(prompt, wv);
    cross_attention(q, &k, &v, scale)
}

fn matmul_plain(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(b.shape()[0], k, "matmul inner dim");
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out.data_mut()[i * n + j] = acc;
        }
    }
    out
}

// ---- loss ----

/// Denoising MSE plus the weighted entrywise L1 of the prompt. The literal
/// contract uses weight 1; training configs may downweight the L1 term.
/// Returns (total, mse, l1) so both terms can be logged separately.
pub fn conditioned_loss(
    tape: &mut Tape,
    eps_true: Var,
    eps_pred: Var,
    prompt: Var,
    l1_weight: f64,
    l1_span: Option<(usize, usize)>,
) -> (Var, Var, Var) {
    let mse = noise_mse(tape, eps_true, eps_pred);
    let reg_target = match l1_span {
        Some((start, len)) => tape.slice_rows(prompt, start, len),
        None => prompt,
    };
    let l1 = tape.abs_sum(reg_target);
    let weighted = tape.scale(l1, l1_weight);
    let total = tape.add(mse, weighted);
    (total, mse, l1)
}

// ---- training ----
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Freeze the denoiser and train only the conditioning pathway.
    pub freeze_denoiser: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 400, lr: 2e-3, seed: 0, freeze_denoiser: false }
    }
}

pub struct TrainReport {
    pub losses: Vec<f64>,
    pub mse: Vec<f64>,
    pub l1: Vec<f64>,
}

pub const DENOISER_PREFIX: &str = "den";
pub const SAFE_PREFIX: &str = "safe";

/// Everything Stage 1 trains lives in one store under these prefixes.
pub struct SafeModel {
    pub model: ModelConfig,
    pub enc_config: EncoderConfig,
    pub denoiser: Denoiser,
    pub cond: Conditioner,
    pub sched: NoiseSchedule,
}

impl SafeModel {
    pub fn init(model: ModelConfig, enc: EncoderConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let denoiser = Denoiser::init(model.denoiser_config(), DENOISER_PREFIX, store, &mut rng);
        let cond = Conditioner::init(SAFE_PREFIX, &model, &enc, store, &mut rng)?;
        init_shared_prompts(&model, store, &mut rng);
        let sched = NoiseSchedule::linear(model.t_train, model.beta_min, model.beta_max)?;
        Ok(Self { model, enc_config: enc, denoiser, cond, sched })
    }

    /// Reconstructs the model around parameters loaded from a checkpoint.
    pub fn attach(model: ModelConfig, enc: EncoderConfig) -> Result<Self> {
        model.validate()?;
        let denoiser = Denoiser {
            config: model.denoiser_config(),
            prefix: DENOISER_PREFIX.to_string(),
        };
        let cond = Conditioner::attach(SAFE_PREFIX, &model, &enc)?;
        let sched = NoiseSchedule::linear(model.t_train, model.beta_min, model.beta_max)?;
        Ok(Self { model, enc_config: enc, denoiser, cond, sched })
    }
}

pub struct SceneBatchItem {
    pub nu0: Tensor,
    pub mask3: Tensor,
    pub masked: Tensor,
    pub features: Vec<Tensor>,
}

pub fn prepare_scene(scene: &ScarceScene, encoder: &Encoder, enc_store: &ParamStore) -> SceneBatchItem {
    let n = scene.spec.image_size;
    let nu0 = scene.reference.reshaped(&[1, n, n]);
    let mask3 = scene.bbox_mask.reshaped(&[1, n, n]);
    let masked = crate::diffusion::mask_latent(&nu0, &mask3);
    let features = encoder.features(enc_store, &scene.reference);
    SceneBatchItem { nu0, mask3, masked, features }
}

/// One training step's loss for a prepared scene at timestep `t` with noise
/// `eps`. When `drop_cond` is set the learned null prompt is used instead of
/// the reference-derived prompt (classifier-free guidance branch).
#[allow(clippy::too_many_arguments)]
pub fn step_loss(
    safe: &SafeModel,
    tape: &mut Tape,
    bound: &Bound,
    item: &SceneBatchItem,
    t: usize,
    eps: &Tensor,
    drop_cond: bool,
    l1_weight: f64,
    l1_span_full: bool,
) -> Result<(Var, Var, Var)> {
    let nu_t = forward_diffuse(&item.nu0, t, eps, &safe.sched)?;
    let composite = CompositeLatent::compose(&nu_t, &item.mask3, &item.masked, t)?;
    let z = tape.leaf(composite.channels);
    let (cond, prompt, span) = if drop_cond {
        let kv = null_cond(&safe.cond, bound, &safe.model);
        let prompt = kv.pathways[0].prompt;
        (kv, prompt, (placeholder_index(&safe.model), safe.model.gamma))
    } else {
        let pstar = safe.cond.extract_pstar(tape, bound, &item.features)?;
        let (prompt, start, len) = compose_prompt(tape, bound, &safe.model, pstar);
        (cond_from_prompt(&safe.cond, bound, prompt, start, len), prompt, (start, len))
    };
    let pred = safe.denoiser.forward(tape, bound, z, t, &cond, None, false);
    let eps_v = tape.leaf(eps.clone());
    let l1_span = if l1_span_full { None } else { Some(span) };
    Ok(conditioned_loss(tape, eps_v, pred, prompt, l1_weight, l1_span))
}

/// Stage 1 training: jointly optimizes the denoiser (unless frozen), the
/// extractors, the template table, the null prompt, and the K/V maps. The
/// vision encoder stays frozen throughout.
pub fn train_safe(
    safe: &SafeModel,
    store: &mut ParamStore,
    scenes: &[ScarceScene],
    encoder: &Encoder,
    enc_store: &ParamStore,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if scenes.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let items: Vec<SceneBatchItem> =
        scenes.iter().map(|s| prepare_scene(s, encoder, enc_store)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport { losses: Vec::new(), mse: Vec::new(), l1: Vec::new() };
    let freeze = cfg.freeze_denoiser;
    for _ in 0..cfg.steps {
        let item = &items[rng.gen_range(0..items.len())];
        let t = rng.gen_range(1..=safe.sched.t_train);
        let n = safe.model.image_size;
        let eps = randn_like(&[1, n, n], &mut rng);
        let drop_cond = rng.gen::<f64>() < safe.model.cfg_drop_prob;
        let mut tape = Tape::new();
        let bound = Bound::bind(store, &mut tape);
        let (total, mse, l1) = step_loss(
            safe,
            &mut tape,
            &bound,
            item,
            t,
            &eps,
            drop_cond,
            safe.model.l1_weight,
            safe.model.l1_on_full_prompt,
        )?;
        report.losses.push(tape.value(total).item());
        report.mse.push(tape.value(mse).item());
        report.l1.push(tape.value(l1).item());
        let grads = tape.backward(total);
        let g: BTreeMap<String, Tensor> = collect_grads(&tape, &bound, &grads, |name| {
            !name.starts_with("enc.") && (!freeze || !name.starts_with("den."))
        });
        opt.step(store, &g);
    }
    Ok(report)
}

/// Mean loss over a fixed probe batch; used to verify training progress
/// without the stochasticity of the step-by-step curve.
pub fn probe_loss(
    safe: &SafeModel,
    store: &ParamStore,
    items: &[SceneBatchItem],
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for item in items {
        let t = rng.gen_range(1..=safe.sched.t_train);
        let n = safe.model.image_size;
        let eps = randn_like(&[1, n, n], &mut rng);
        let mut tape = Tape::new();
        let bound = Bound::bind(store, &mut tape);
        let (total, _, _) = step_loss(
            safe,
            &mut tape,
            &bound,
            item,
            t,
            &eps,
            false,
            safe.model.l1_weight,
            safe.model.l1_on_full_prompt,
        )?;
        acc += tape.value(total).item();
    }
    Ok(acc / items.len() as f64)
}

/// Checkpoint metadata recorded alongside Stage 1 parameters.
pub fn safe_meta(safe: &SafeModel, enc_hash: &str) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("model_config".into(), safe.model.to_json());
    meta.insert("encoder_config".into(), serde_json::to_string(&safe.enc_config).unwrap());
    meta.insert(
        "selected_layers".into(),
        serde_json::to_string(&safe.cond.selected).unwrap(),
    );
    meta.insert("encoder_hash".into(), enc_hash.to_string());
    meta
}
