//! Criterion benchmarks for the hot paths: sampling, one training step,
//! metric computation, and annotation refinement.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cruxgen_core::annotate::{annotate, AnnotateConfig};
use cruxgen_core::config::ModelConfig;
use cruxgen_core::diffusion::{randn_like, sample, SampleModel, SamplerConfig};
use cruxgen_core::encoder::{Encoder, EncoderConfig};
use cruxgen_core::metrics::{f1_max, pixel_ap};
use cruxgen_core::nn::{collect_grads, Bound, ParamStore};
use cruxgen_core::safe::{cond_tensors, null_cond_tensors, step_loss, SafeModel, SceneBatchItem};
use cruxgen_core::scenegen::BBox;
use cruxgen_core::tape::Tape;
use cruxgen_core::tensor::Tensor;

fn small_model() -> (SafeModel, Encoder, ParamStore, ParamStore) {
    let model = ModelConfig {
        image_size: 16,
        t_train: 50,
        base_channels: 4,
        attn_dim: 4,
        time_dim: 8,
        token_dim: 8,
        gamma: 2,
        ..ModelConfig::default()
    };
    let enc_config = EncoderConfig { layers: 4, width: 4 };
    let mut store = ParamStore::new();
    let safe = SafeModel::init(model, enc_config.clone(), &mut store, 1).unwrap();
    let mut enc_store = ParamStore::new();
    let encoder = Encoder::init(enc_config, &mut enc_store, 2).unwrap();
    (safe, encoder, store, enc_store)
}

fn bench_sampler(c: &mut Criterion) {
    let (safe, encoder, store, enc_store) = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let background = randn_like(&[16, 16], &mut rng).map(|v| 0.5 + 0.2 * v);
    let reference = randn_like(&[16, 16], &mut rng).map(|v| 0.5 + 0.2 * v);
    let mask = BBox { x0: 4, y0: 4, x1: 11, y1: 11 }.to_mask(16);
    let cond =
        cond_tensors(&safe.cond, &store, &safe.model, &encoder, &enc_store, &reference).unwrap();
    let uncond = null_cond_tensors(&safe.cond, &store, &safe.model);
    let model = SampleModel { denoiser: &safe.denoiser, store: &store, sched: &safe.sched };
    let config = SamplerConfig { steps: 6, guidance: 2.0, ..SamplerConfig::default() };
    c.bench_function("sample_16px_6steps", |b| {
        b.iter(|| sample(&model, &background, &mask, &cond, &uncond, &config).unwrap())
    });
    let (_, trace) = sample(&model, &background, &mask, &cond, &uncond, &config).unwrap();
    c.bench_function("annotate_refine5", |b| {
        b.iter(|| annotate(&trace, 16, &AnnotateConfig { iterations: 5, tau: 0.5 }).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let (safe, encoder, mut store, enc_store) = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reference = randn_like(&[16, 16], &mut rng).map(|v| 0.5 + 0.2 * v);
    let bbox = BBox { x0: 4, y0: 4, x1: 11, y1: 11 };
    let mask3 = bbox.to_mask(16).reshaped(&[1, 16, 16]);
    let nu0 = reference.reshaped(&[1, 16, 16]);
    let masked = cruxgen_core::diffusion::mask_latent(&nu0, &mask3);
    let features = encoder.features(&enc_store, &reference);
    let item = SceneBatchItem { nu0, mask3, masked, features };
    let eps = randn_like(&[1, 16, 16], &mut rng);
    c.bench_function("train_step_loss_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = Bound::bind(&store, &mut tape);
            let (total, _, _) =
                step_loss(&safe, &mut tape, &bound, &item, 9, &eps, false, 1e-3, true).unwrap();
            let grads = tape.backward(total);
            collect_grads(&tape, &bound, &grads, |_| true)
        })
    });
    // keep the store mutable borrow meaningful for future training benches
    let _ = store.content_hash();
    let _ = &mut store;
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for _ in 0..32 {
        let mut p = Tensor::zeros(&[64, 64]);
        let mut t = Tensor::zeros(&[64, 64]);
        for i in 0..64 * 64 {
            p.data_mut()[i] = rng.gen();
            t.data_mut()[i] = if rng.gen::<f64>() < 0.2 { 1.0 } else { 0.0 };
        }
        preds.push(p);
        truths.push(t);
    }
    c.bench_function("pixel_ap_32x64x64", |b| b.iter(|| pixel_ap(&preds, &truths).unwrap()));
    c.bench_function("f1_max_32x64x64", |b| b.iter(|| f1_max(&preds, &truths).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_sampler, bench_train_step, bench_metrics
}
criterion_main!(benches);
