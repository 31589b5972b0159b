//! Frozen vision encoder: a small convolutional stack that doubles as a
//! domain classifier. Per-layer pooled features feed the reference-image
//! conditioning pipeline; the classifier head backs the quality metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{collect_grads, init_conv, init_linear, linear, Adam, Bound, ParamStore};
use crate::scenegen::ALL_DOMAINS;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of conv layers N.
    pub layers: usize,
    /// Channel width of every layer.
    pub width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 8, width: 8 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 {
            return Err(Error::Config("encoder layers and width must be positive".into()));
        }
        Ok(())
    }
}

/// Spatial pooling happens after these layer indices (0-based) so receptive
/// fields grow with depth while shallow layers stay high-resolution.
fn pool_after(layer: usize, total: usize) -> bool {
    layer < total - 1 && layer % 2 == 1 && layer < 6
}

pub struct Encoder {
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn init(config: EncoderConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.width;
        for i in 0..config.layers {
            let cin = if i == 0 { 1 } else { c };
            store.insert(&format!("enc.l{i}.w"), init_conv(&[c, cin, 3, 3], &mut rng));
            store.insert(&format!("enc.l{i}.b"), Tensor::zeros(&[c]));
        }
        store.insert("enc.head.w", init_linear(&[c, ALL_DOMAINS.len()], &mut rng));
        store.insert("enc.head.b", Tensor::zeros(&[ALL_DOMAINS.len()]));
        Ok(Self { config })
    }

    /// Reconstructs the model around parameters loaded from a checkpoint.
    pub fn attach(config: EncoderConfig) -> Self {
        Self { config }
    }

    /// Runs the stack on one grayscale image `[1,H,W]`. Returns the pooled
    /// per-layer features (each `[1,width]`) and the classifier logits
    /// `[1,domains]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: Var) -> (Vec<Var>, Var) {
        let mut x = image;
        let mut gaps = Vec::with_capacity(self.config.layers);
        for i in 0..self.config.layers {
            let w = bound.var(&format!("enc.l{i}.w"));
            let b = bound.var(&format!("enc.l{i}.b"));
            x = tape.conv3x3(x, w);
            x = tape.add_bias_chan(x, b);
            x = tape.silu(x);
            gaps.push(tape.global_avg_pool(x));
            if pool_after(i, self.config.layers) {
                x = tape.avg_pool2(x);
            }
        }
        let last = *gaps.last().expect("at least one layer");
        let logits = linear(tape, last, bound.var("enc.head.w"), bound.var("enc.head.b"));
        (gaps, logits)
    }

    /// Accepts images as `[H,W]` or `[1,H,W]`.
    fn as_chw(image: &Tensor) -> Tensor {
        match image.shape() {
            [h, w] => image.reshaped(&[1, *h, *w]),
            [1, _, _] => image.clone(),
            s => panic!("encoder expects a grayscale image, got shape {s:?}"),
        }
    }

    /// Frozen feature extraction: per-layer pooled features as plain tensors.
    pub fn features(&self, store: &ParamStore, image: &Tensor) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let bound = Bound::bind(store, &mut tape);
        let img = tape.leaf(Self::as_chw(image));
        let (gaps, _) = self.forward(&mut tape, &bound, img);
        gaps.iter().map(|g| tape.value(*g).clone()).collect()
    }

    /// Softmax class probabilities over the scene domains.
    pub fn classify(&self, store: &ParamStore, image: &Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = Bound::bind(store, &mut tape);
        let img = tape.leaf(Self::as_chw(image));
        let (_, logits) = self.forward(&mut tape, &bound, img);
        let probs = tape.softmax_rows(logits);
        tape.value(probs).data().to_vec()
    }

    pub fn predicted_domain(&self, store: &ParamStore, image: &Tensor) -> usize {
        let probs = self.classify(store, image);
        probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

pub struct EncoderTrainReport {
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains the encoder as a domain classifier on `(image, domain index)`
/// pairs. Once trained the parameters are frozen for all later stages.
pub fn train_encoder(
    encoder: &Encoder,
    store: &mut ParamStore,
    images: &[Tensor],
    labels: &[usize],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<EncoderTrainReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Argument("need equal, non-empty images and labels".into()));
    }
    let batch = images.len().min(8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(lr);
    let mut losses = Vec::with_capacity(steps);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for _ in 0..steps {
        order.shuffle(&mut rng);
        let picks = &order[..batch];
        let mut tape = Tape::new();
        let bound = Bound::bind(store, &mut tape);
        let mut logit_rows = Vec::with_capacity(batch);
        let mut batch_labels = Vec::with_capacity(batch);
        for &i in picks {
            let img = tape.leaf(Encoder::as_chw(&images[i]));
            let (_, logits) = encoder.forward(&mut tape, &bound, img);
            logit_rows.push(logits);
            batch_labels.push(labels[i]);
        }
        let all = tape.concat_rows(&logit_rows);
        let loss = tape.softmax_ce(all, &batch_labels);
        losses.push(tape.value(loss).item());
        let grads = tape.backward(loss);
        let g: BTreeMap<String, Tensor> = collect_grads(&tape, &bound, &grads, |_| true);
        opt.step(store, &g);
    }
    let mut correct = 0usize;
    for (img, &lab) in images.iter().zip(labels) {
        if encoder.predicted_domain(store, img) == lab {
            correct += 1;
        }
    }
    Ok(EncoderTrainReport {
        losses,
        train_accuracy: correct as f64 / images.len() as f64,
    })
}
