//! Downstream segmenter F: a small encoder-decoder trained with per-pixel
//! binary cross-entropy. Frozen after training, it serves both as the
//! evaluation endpoint and as the feedback source for sample mining.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{collect_grads, init_conv, Adam, Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub channels: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self { channels: 8 }
    }
}

pub const SEG_PREFIX: &str = "seg";

pub struct Segmenter {
    pub config: SegmenterConfig,
}

impl Segmenter {
    pub fn init(config: SegmenterConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        if config.channels == 0 {
            return Err(Error::Config("segmenter channels must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let conv = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, co: usize, ci: usize| {
            store.insert(&format!("{SEG_PREFIX}.{name}.w"), init_conv(&[co, ci, 3, 3], rng));
            store.insert(&format!("{SEG_PREFIX}.{name}.b"), Tensor::zeros(&[co]));
        };
        conv(store, &mut rng, "e0", c, 1);
        conv(store, &mut rng, "e1", c, c);
        conv(store, &mut rng, "m0", 2 * c, c);
        conv(store, &mut rng, "d0", c, 3 * c);
        conv(store, &mut rng, "out", 1, c);
        Ok(Self { config })
    }

    /// Reconstructs the model around parameters loaded from a checkpoint.
    pub fn attach(config: SegmenterConfig) -> Self {
        Self { config }
    }

    fn conv(&self, tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Var {
        let w = bound.var(&format!("{SEG_PREFIX}.{name}.w"));
        let b = bound.var(&format!("{SEG_PREFIX}.{name}.b"));
        let y = tape.conv3x3(x, w);
        tape.add_bias_chan(y, b)
    }

    /// Per-pixel logits `[1,H,W]` for an image `[1,H,W]` (or `[H,W]`,
    /// reshaped by the caller). The input must be at least 2x2.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Var {
        let e0 = self.conv(tape, bound, "e0", image);
        let e0 = tape.silu(e0);
        let e1 = self.conv(tape, bound, "e1", e0);
        let e1 = tape.silu(e1);
        let p = tape.avg_pool2(e1);
        let m = self.conv(tape, bound, "m0", p);
        let m = tape.silu(m);
        let up = tape.upsample2(m);
        let cat = tape.concat_chan(up, e1);
        let d = self.conv(tape, bound, "d0", cat);
        let d = tape.silu(d);
        self.conv(tape, bound, "out", d)
    }

    /// Probability map in [0,1], shape `[H,W]`, deterministic.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let chw = as_chw(image)?;
        let (h, w) = (chw.shape()[1], chw.shape()[2]);
        let mut tape = Tape::new();
        let bound = Bound::bind(store, &mut tape);
        let x = tape.leaf(chw);
        let logits = self.logits(&mut tape, &bound, x);
        let probs = tape.sigmoid(logits);
        Ok(tape.value(probs).reshaped(&[h, w]))
    }
}

fn as_chw(image: &Tensor) -> Result<Tensor> {
    match image.shape() {
        [h, w] => Ok(image.reshaped(&[1, *h, *w])),
        [1, _, _] => Ok(image.clone()),
        s => Err(Error::Argument(format!("expected a grayscale image, got shape {s:?}"))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self { steps: 400, lr: 3e-3, seed: 0 }
    }
}

/// Trains F on (image, binary mask) pairs; one image per step.
pub fn train_segmenter(
    seg: &Segmenter,
    store: &mut ParamStore,
    images: &[Tensor],
    masks: &[Tensor],
    cfg: &SegTrainConfig,
) -> Result<Vec<f64>> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(Error::Config("need equal, non-empty images and masks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let i = rng.gen_range(0..images.len());
        let chw = as_chw(&images[i])?;
        let target = masks[i].reshaped(&[chw.shape()[1] * chw.shape()[2]]);
        let mut tape = Tape::new();
        let bound = Bound::bind(store, &mut tape);
        let x = tape.leaf(chw.clone());
        let logits = seg.logits(&mut tape, &bound, x);
        let flat = tape.reshape(logits, &[target.data().len()]);
        let loss = tape.bce_logits(flat, &target);
        losses.push(tape.value(loss).item());
        let grads = tape.backward(loss);
        let g: BTreeMap<String, Tensor> = collect_grads(&tape, &bound, &grads, |_| true);
        opt.step(store, &g);
    }
    Ok(losses)
}

/// Mean BCE on a fixed probe set; used for progress checks.
pub fn probe_bce(seg: &Segmenter, store: &ParamStore, images: &[Tensor], masks: &[Tensor]) -> Result<f64> {
    let mut acc = 0.0;
    for (img, mask) in images.iter().zip(masks) {
        let chw = as_chw(img)?;
        let target = mask.reshaped(&[chw.shape()[1] * chw.shape()[2]]);
        let mut tape = Tape::new();
        let bound = Bound::bind(store, &mut tape);
        let x = tape.leaf(chw);
        let logits = seg.logits(&mut tape, &bound, x);
        let flat = tape.reshape(logits, &[target.data().len()]);
        let loss = tape.bce_logits(flat, &target);
        acc += tape.value(loss).item();
    }
    Ok(acc / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::pixel_ap;
    use crate::scenegen::{gen_scene, Domain, SceneSpec, TargetStyle};

    fn easy_scene(seed: u64) -> (Tensor, Tensor) {
        let spec = SceneSpec {
            domain: Domain::Grid,
            target_style: TargetStyle::Spot,
            subtlety: 0.0,
            image_size: 16,
            seed,
        };
        let s = gen_scene(&spec, seed).unwrap();
        (s.reference, s.gt_mask)
    }

    #[test]
    fn predict_is_deterministic_in_range_and_same_size() {
        let mut store = ParamStore::new();
        let seg = Segmenter::init(SegmenterConfig::default(), &mut store, 0).unwrap();
        let (img, _) = easy_scene(1);
        let a = seg.predict(&store, &img).unwrap();
        let b = seg.predict(&store, &img).unwrap();
        assert_eq!(a.shape(), &[16, 16]);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn training_reduces_probe_loss_and_is_deterministic() {
        let pairs: Vec<(Tensor, Tensor)> = (0..4).map(easy_scene).collect();
        let images: Vec<Tensor> = pairs.iter().map(|(i, _)| i.clone()).collect();
        let masks: Vec<Tensor> = pairs.iter().map(|(_, m)| m.clone()).collect();
        let run = || {
            let mut store = ParamStore::new();
            let seg = Segmenter::init(SegmenterConfig { channels: 4 }, &mut store, 3).unwrap();
            let before = probe_bce(&seg, &store, &images, &masks).unwrap();
            let cfg = SegTrainConfig { steps: 200, lr: 3e-3, seed: 4 };
            train_segmenter(&seg, &mut store, &images, &masks, &cfg).unwrap();
            let after = probe_bce(&seg, &store, &images, &masks).unwrap();
            (before, after, store.content_hash())
        };
        let (before, after, h1) = run();
        assert!(after < before, "bce {before} -> {after}");
        let (_, _, h2) = run();
        assert_eq!(h1, h2);
    }

    #[test]
    fn trained_model_ranks_easy_targets_above_half_ap() {
        let train: Vec<(Tensor, Tensor)> = (0..6).map(easy_scene).collect();
        let images: Vec<Tensor> = train.iter().map(|(i, _)| i.clone()).collect();
        let masks: Vec<Tensor> = train.iter().map(|(_, m)| m.clone()).collect();
        let mut store = ParamStore::new();
        let seg = Segmenter::init(SegmenterConfig { channels: 6 }, &mut store, 5).unwrap();
        let cfg = SegTrainConfig { steps: 300, lr: 3e-3, seed: 6 };
        train_segmenter(&seg, &mut store, &images, &masks, &cfg).unwrap();
        let test: Vec<(Tensor, Tensor)> = (100..108).map(easy_scene).collect();
        let preds: Vec<Tensor> =
            test.iter().map(|(i, _)| seg.predict(&store, i).unwrap()).collect();
        let gts: Vec<Tensor> = test.iter().map(|(_, m)| m.clone()).collect();
        let ap = pixel_ap(&preds, &gts).unwrap();
        assert!(ap > 0.5, "ap {ap}");

        // background-only probe scores lower mean confidence than a target image
        let spec = SceneSpec {
            domain: Domain::Grid,
            target_style: TargetStyle::Spot,
            subtlety: 0.0,
            image_size: 16,
            seed: 200,
        };
        let s = gen_scene(&spec, 200).unwrap();
        let bg_mean = seg.predict(&store, &s.background).unwrap().data().iter().sum::<f64>();
        let tg_mean = seg.predict(&store, &s.reference).unwrap().data().iter().sum::<f64>();
        assert!(bg_mean < tg_mean, "bg {bg_mean} vs target {tg_mean}");
    }
}
