//! Experiment orchestration: synthetic dataset generation, confidence-gap
//! reports, augmentation curves, diversity/quality analogs, cross-domain
//! transfer, and low-dimensional embedding exports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{annotate, AnnotateConfig};
use crate::diffusion::{sample, SampleModel, SamplerConfig};
use crate::downstream::{train_segmenter, SegTrainConfig, Segmenter, SegmenterConfig};
use crate::embed2d::{tsne, TsneConfig};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::imageio::{image_hash, load_gray, load_mask, save_gray, save_mask};
use crate::metrics::{f1_max, pixel_ap};
use crate::nn::ParamStore;
use crate::plot::plot_scatter;
use crate::safe::{cond_tensors, null_cond_tensors, SafeModel};
use crate::scenegen::{load_scene, BBox, Domain, SceneEntry};
use crate::tensor::Tensor;
use crate::safe::Conditioner;
use crate::wasm::{feedback_gap_value, frozen_hash, fused_cond_tensors};

// ---- synthetic manifest ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathwayTag {
    Easy,
    Crucial,
}

/// Tagging rule: the SAFE-only pathway (λ=0) produces easy samples;
/// any fused pathway produces crucial ones.
pub fn tag_for_lambda(lambda: f64) -> PathwayTag {
    if lambda == 0.0 {
        PathwayTag::Easy
    } else {
        PathwayTag::Crucial
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub id: String,
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub reference_id: String,
    pub domain: Domain,
    pub bbox: BBox,
    pub lambda: f64,
    pub seed: u64,
    /// Seed the reverse sampler ran with; lets the trace be replayed.
    pub sampler_seed: u64,
    pub tag: PathwayTag,
    pub image_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub seed: u64,
    pub lambda: f64,
    pub image_size: usize,
    pub safe_hash: String,
    pub wasm_hash: String,
    pub samples: Vec<SyntheticSample>,
}

impl SyntheticManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

// ---- generation ----

/// Everything needed to run the trained generator: Stage 1 model, crucial
/// pathway, the shared parameter store, and the frozen vision encoder.
pub struct Generator<'a> {
    pub safe: &'a SafeModel,
    pub crucial: &'a Conditioner,
    pub store: &'a ParamStore,
    pub encoder: &'a Encoder,
    pub enc_store: &'a ParamStore,
}

impl Generator<'_> {
    /// Conditioning tensors for the requested pathway: SAFE-only at λ=0,
    /// output-level fusion otherwise.
    pub fn conditioning(&self, reference: &Tensor, lambda: f64) -> Result<crate::diffusion::CondTensors> {
        if lambda == 0.0 {
            cond_tensors(
                &self.safe.cond,
                self.store,
                &self.safe.model,
                self.encoder,
                self.enc_store,
                reference,
            )
        } else {
            fused_cond_tensors(
                self.safe,
                self.crucial,
                self.store,
                self.encoder,
                self.enc_store,
                reference,
                lambda,
            )
        }
    }
}

/// Random axis-aligned target box: side length in [size/5 max 2, size/2].
pub fn sample_box(size: usize, rng: &mut ChaCha8Rng) -> BBox {
    let lo = (size / 5).max(2);
    let hi = (size / 2).max(lo + 1);
    let w = rng.gen_range(lo..=hi);
    let h = rng.gen_range(lo..=hi);
    let x0 = rng.gen_range(0..=size - w);
    let y0 = rng.gen_range(0..=size - h);
    BBox { x0, y0, x1: x0 + w - 1, y1: y0 + h - 1 }
}

pub struct GenerateConfig {
    pub n: usize,
    pub lambda: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub annotate: AnnotateConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n: 200,
            lambda: 0.5,
            seed: 0,
            sampler: SamplerConfig::default(),
            annotate: AnnotateConfig::default(),
        }
    }
}

/// Generate `n` synthetic image/annotation pairs onto disk. Each sample
/// picks a reference scene and a fresh target box, runs the inpainting
/// sampler with the requested conditioning, and extracts its annotation
/// from the final-step attention trace. Deterministic per seed.
pub fn generate_dataset(
    gen: &Generator,
    refs: &[&SceneEntry],
    out_dir: &Path,
    cfg: &GenerateConfig,
) -> Result<SyntheticManifest> {
    if refs.is_empty() {
        return Err(Error::Argument("background/reference pool is empty".into()));
    }
    if cfg.n == 0 {
        return Err(Error::Argument("sample count must be positive".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let n = gen.safe.model.image_size;
    let safe_hash = gen.store.content_hash();
    let wasm_hash = frozen_hash(gen.store);
    let tag = tag_for_lambda(cfg.lambda);
    let model = SampleModel {
        denoiser: &gen.safe.denoiser,
        store: gen.store,
        sched: &gen.safe.sched,
    };
    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let sample_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let entry = refs[rng.gen_range(0..refs.len())];
        let scene = load_scene(entry)?;
        if scene.spec.image_size != n {
            return Err(Error::State(format!(
                "scene {} has size {}, generator expects {n}",
                entry.id, scene.spec.image_size
            )));
        }
        let bbox = sample_box(n, &mut rng);
        let mask = bbox.to_mask(n);
        let cond = gen.conditioning(&scene.reference, cfg.lambda)?;
        let uncond = null_cond_tensors(&gen.safe.cond, gen.store, &gen.safe.model);
        let mut sampler = cfg.sampler.clone();
        sampler.seed = rng.gen();
        let sampler_seed = sampler.seed;
        let (img, trace) = sample(&model, &scene.background, &mask, &cond, &uncond, &sampler)?;
        let (annot, _) = annotate(&trace, n, &cfg.annotate)?;
        let id = format!("syn-{:?}-{i:05}", tag).to_lowercase();
        let image_path = out_dir.join(format!("{id}.png"));
        let annot_path = out_dir.join(format!("{id}-annot.png"));
        save_gray(&image_path, &img)?;
        save_mask(&annot_path, &annot)?;
        samples.push(SyntheticSample {
            id,
            image: image_path,
            annotation: annot_path,
            reference_id: entry.id.clone(),
            domain: scene.spec.domain,
            bbox,
            lambda: cfg.lambda,
            seed: sample_seed,
            sampler_seed,
            tag,
            image_hash: image_hash(&img),
        });
    }
    Ok(SyntheticManifest {
        seed: cfg.seed,
        lambda: cfg.lambda,
        image_size: n,
        safe_hash,
        wasm_hash,
        samples,
    })
}

// ---- confidence-gap report ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapGroup {
    pub tag: PathwayTag,
    pub count: usize,
    pub mean_gap: f64,
    pub median_gap: f64,
    pub mean_in_box_confidence: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapReport {
    pub groups: Vec<GapGroup>,
    pub per_sample: Vec<(String, f64, f64)>,
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN gaps"));
    let k = sorted.len();
    if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    }
}

/// Per-sample feedback gap (against the requested target box) and in-box
/// mean confidence under the frozen downstream model, aggregated per
/// pathway tag.
pub fn confidence_gap_report(
    seg: &Segmenter,
    seg_store: &ParamStore,
    manifests: &[&SyntheticManifest],
    delta: f64,
) -> Result<GapReport> {
    let total: usize = manifests.iter().map(|m| m.samples.len()).sum();
    if total == 0 {
        return Err(Error::Argument("no samples in any manifest".into()));
    }
    let mut per_tag: BTreeMap<&'static str, (PathwayTag, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut per_sample = Vec::with_capacity(total);
    for m in manifests {
        let size = m.image_size;
        for s in &m.samples {
            let img = load_gray(&s.image)?;
            let f = seg.predict(seg_store, &img)?;
            let mask = s.bbox.to_mask(size);
            let gap = feedback_gap_value(&f, &mask, delta)?;
            let mut in_box = 0.0;
            let mut in_n = 0.0;
            for p in 0..size * size {
                if mask.data()[p] > 0.5 {
                    in_box += f.data()[p];
                    in_n += 1.0;
                }
            }
            let conf = in_box / in_n;
            per_sample.push((s.id.clone(), gap, conf));
            let key = match s.tag {
                PathwayTag::Easy => "easy",
                PathwayTag::Crucial => "crucial",
            };
            let e = per_tag.entry(key).or_insert((s.tag, Vec::new(), Vec::new()));
            e.1.push(gap);
            e.2.push(conf);
        }
    }
    let groups = per_tag
        .into_values()
        .map(|(tag, mut gaps, confs)| {
            let count = gaps.len();
            let mean_gap = gaps.iter().sum::<f64>() / count as f64;
            let mean_conf = confs.iter().sum::<f64>() / count as f64;
            GapGroup {
                tag,
                count,
                mean_gap,
                median_gap: median(&mut gaps),
                mean_in_box_confidence: mean_conf,
            }
        })
        .collect();
    Ok(GapReport { groups, per_sample })
}

// ---- augmentation curve ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvePoint {
    pub source: PathwayTag,
    pub size: usize,
    pub seeds: Vec<u64>,
    pub ap_mean: f64,
    pub ap_sd: Option<f64>,
    pub f1_mean: f64,
    pub f1_sd: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub sizes: Vec<usize>,
    pub points: Vec<CurvePoint>,
}

pub struct AugmentationConfig {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub segmenter: SegmenterConfig,
    pub train: SegTrainConfig,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            sizes: vec![0, 50, 100, 200],
            seeds: vec![0, 1, 2],
            segmenter: SegmenterConfig::default(),
            train: SegTrainConfig::default(),
        }
    }
}

fn mean_sd(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

fn load_real_pairs(entries: &[&SceneEntry]) -> Result<Vec<(Tensor, Tensor)>> {
    entries
        .iter()
        .map(|e| {
            let scene = load_scene(e)?;
            Ok((scene.reference, scene.gt_mask))
        })
        .collect()
}

/// Train fresh downstream models on real data plus increasing amounts of
/// synthetic data (labeled with the extracted annotations), and evaluate
/// on a held-out test split. Hard-errors on any train/test content overlap.
pub fn augmentation_curve(
    real_train: &[&SceneEntry],
    easy: &SyntheticManifest,
    crucial: &SyntheticManifest,
    test: &[&SceneEntry],
    cfg: &AugmentationConfig,
) -> Result<AugmentationReport> {
    if real_train.is_empty() || test.is_empty() {
        return Err(Error::Argument("need non-empty real train and test splits".into()));
    }
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    for (name, m) in [("easy", easy), ("crucial", crucial)] {
        if m.samples.len() < *sizes.last().unwrap_or(&0) {
            return Err(Error::Argument(format!(
                "{name} manifest has {} samples, largest size is {}",
                m.samples.len(),
                sizes.last().unwrap()
            )));
        }
    }

    let test_pairs = load_real_pairs(test)?;
    let test_hashes: std::collections::BTreeSet<String> =
        test_pairs.iter().map(|(img, _)| image_hash(img)).collect();

    let real_pairs = load_real_pairs(real_train)?;
    for (img, _) in &real_pairs {
        if test_hashes.contains(&image_hash(img)) {
            return Err(Error::State("train/test leakage: real training image appears in the test split".into()));
        }
    }

    let mut synth: BTreeMap<&'static str, Vec<(Tensor, Tensor)>> = BTreeMap::new();
    for (name, m) in [("easy", easy), ("crucial", crucial)] {
        let mut pairs = Vec::with_capacity(m.samples.len());
        for s in &m.samples {
            if test_hashes.contains(&s.image_hash) {
                return Err(Error::State("train/test leakage: synthetic image matches a test image".into()));
            }
            pairs.push((load_gray(&s.image)?, load_mask(&s.annotation)?));
        }
        synth.insert(name, pairs);
    }

    let (test_imgs, test_masks): (Vec<Tensor>, Vec<Tensor>) = test_pairs.into_iter().unzip();
    let mut points = Vec::new();
    for (name, tag) in [("easy", PathwayTag::Easy), ("crucial", PathwayTag::Crucial)] {
        for &size in &sizes {
            let mut aps = Vec::new();
            let mut f1s = Vec::new();
            for &seed in &cfg.seeds {
                let mut images: Vec<Tensor> = real_pairs.iter().map(|(i, _)| i.clone()).collect();
                let mut masks: Vec<Tensor> = real_pairs.iter().map(|(_, m)| m.clone()).collect();
                for (img, mask) in synth[name].iter().take(size) {
                    images.push(img.clone());
                    masks.push(mask.clone());
                }
                let mut store = ParamStore::new();
                let seg = Segmenter::init(cfg.segmenter.clone(), &mut store, seed)?;
                let mut train = cfg.train.clone();
                train.seed = seed;
                train_segmenter(&seg, &mut store, &images, &masks, &train)?;
                let preds: Vec<Tensor> = test_imgs
                    .iter()
                    .map(|img| seg.predict(&store, img))
                    .collect::<Result<_>>()?;
                aps.push(pixel_ap(&preds, &test_masks)?);
                f1s.push(f1_max(&preds, &test_masks)?);
            }
            let (ap_mean, ap_sd) = mean_sd(&aps);
            let (f1_mean, f1_sd) = mean_sd(&f1s);
            points.push(CurvePoint {
                source: tag,
                size,
                seeds: cfg.seeds.clone(),
                ap_mean,
                ap_sd,
                f1_mean,
                f1_sd,
            });
        }
    }
    Ok(AugmentationReport { sizes, points })
}

// ---- diversity / quality analogs ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiversityReport {
    pub ic_dist_analog: f64,
    pub kid_analog: f64,
    pub is_analog: f64,
    pub clusters_used: usize,
    pub warnings: Vec<String>,
}

/// Flattened per-layer pooled features from the frozen vision encoder.
pub fn feature_vector(encoder: &Encoder, enc_store: &ParamStore, image: &Tensor) -> Vec<f64> {
    encoder
        .features(enc_store, image)
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Polynomial kernel (x·y/d + 1)^3 used by the distribution-distance analog.
fn poly_kernel(a: &[f64], b: &[f64]) -> f64 {
    let d = a.len() as f64;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared MMD with the polynomial kernel.
pub fn mmd2_unbiased(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (xs.len(), ys.len());
    if m < 2 || n < 2 {
        return Err(Error::Argument("MMD needs at least two samples per side".into()));
    }
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += poly_kernel(&xs[i], &xs[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += poly_kernel(&ys[i], &ys[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for x in xs {
        for y in ys {
            kxy += poly_kernel(x, y);
        }
    }
    Ok(kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64 - 2.0 * kxy / (m * n) as f64)
}

/// Diversity and distribution-quality analogs over encoder features:
/// intra-cluster pairwise distance (clusters share a reference), unbiased
/// MMD² against real images, and an exponentiated-KL score from the
/// domain classifier. All values carry the "-analog" suffix in reports.
pub fn diversity_quality(
    manifest: &SyntheticManifest,
    real: &[&SceneEntry],
    encoder: &Encoder,
    enc_store: &ParamStore,
) -> Result<DiversityReport> {
    if manifest.samples.len() < 2 {
        return Err(Error::Argument("need at least two synthetic samples".into()));
    }
    let mut warnings = Vec::new();

    // features and posteriors per synthetic sample
    let mut feats = Vec::with_capacity(manifest.samples.len());
    let mut posteriors = Vec::with_capacity(manifest.samples.len());
    let mut clusters: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        let img = load_gray(&s.image)?;
        feats.push(feature_vector(encoder, enc_store, &img));
        posteriors.push(encoder.classify(enc_store, &img));
        clusters.entry(&s.reference_id).or_default().push(i);
    }

    // IC-dist-analog: mean pairwise distance within reference clusters
    let mut cluster_means = Vec::new();
    for (id, idx) in &clusters {
        if idx.len() < 2 {
            warnings.push(format!("cluster {id} has a single sample; excluded from IC-dist-analog"));
            continue;
        }
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                acc += euclid(&feats[idx[a]], &feats[idx[b]]);
                cnt += 1.0;
            }
        }
        cluster_means.push(acc / cnt);
    }
    if cluster_means.is_empty() {
        return Err(Error::Argument("no reference cluster has at least two samples".into()));
    }
    let ic_dist = cluster_means.iter().sum::<f64>() / cluster_means.len() as f64;

    // KID-analog against real reference images
    let real_feats: Vec<Vec<f64>> = real
        .iter()
        .map(|e| {
            let scene = load_scene(e)?;
            Ok(feature_vector(encoder, enc_store, &scene.reference))
        })
        .collect::<Result<_>>()?;
    let kid = mmd2_unbiased(&feats, &real_feats)?;

    // IS-analog = exp(mean KL(posterior || marginal))
    let k = posteriors[0].len();
    let mut marginal = vec![0.0; k];
    for p in &posteriors {
        for (m, &v) in marginal.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut marginal {
        *m /= posteriors.len() as f64;
    }
    let eps = 1e-12;
    let mean_kl = posteriors
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .map(|(&pi, &mi)| if pi > eps { pi * ((pi / (mi + eps)).ln()) } else { 0.0 })
                .sum::<f64>()
        })
        .sum::<f64>()
        / posteriors.len() as f64;
    let is_analog = mean_kl.exp();

    Ok(DiversityReport {
        ic_dist_analog: ic_dist,
        kid_analog: kid,
        is_analog,
        clusters_used: cluster_means.len(),
        warnings,
    })
}

// ---- annotation geometry helpers ----

/// Pixels of the largest 4-connected component of a binary mask, or None
/// if the mask is empty.
pub fn dominant_component(mask: &Tensor) -> Option<Vec<(usize, usize)>> {
    let shape = mask.shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let mut seen = vec![false; h * w];
    let mut best: Vec<(usize, usize)> = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.data()[start] < 0.5 {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            comp.push((y, x));
            let mut push = |q: usize| {
                if !seen[q] && mask.data()[q] >= 0.5 {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    if best.is_empty() {
        None
    } else {
        Some(best)
    }
}

/// Whether every pixel lies inside `bbox` dilated by `dilation` pixels.
pub fn component_inside(bbox: BBox, dilation: usize, pixels: &[(usize, usize)], size: usize) -> bool {
    let x0 = bbox.x0.saturating_sub(dilation);
    let y0 = bbox.y0.saturating_sub(dilation);
    let x1 = (bbox.x1 + dilation).min(size - 1);
    let y1 = (bbox.y1 + dilation).min(size - 1);
    pixels.iter().all(|&(y, x)| x >= x0 && x <= x1 && y >= y0 && y <= y1)
}

/// Centroid of the positive pixels of a mask, or None if empty.
pub fn mask_center(mask: &Tensor) -> Option<(f64, f64)> {
    let shape = mask.shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let mut cy = 0.0;
    let mut cx = 0.0;
    let mut n = 0.0;
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] >= 0.5 {
                cy += y as f64;
                cx += x as f64;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        None
    } else {
        Some((cy / n, cx / n))
    }
}

// ---- cross-domain transfer ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferReport {
    pub reference_domain: Domain,
    pub background_domain: Domain,
    pub count: usize,
    /// Fraction of samples whose outside-box pixels equal the background.
    pub compositing_ok_fraction: f64,
    /// Fraction of samples whose annotation center lies inside the box.
    pub center_in_box_fraction: f64,
    pub mean_in_box_confidence: Option<f64>,
    /// Parameter hash before and after — must match (no retraining).
    pub params_hash: String,
}

/// Generate targets in domain A's style onto domain B backgrounds, with no
/// additional training. Checks the unified-model contract (parameter hash
/// unchanged), the compositing contract, and annotation placement.
#[allow(clippy::too_many_arguments)]
pub fn cross_domain_transfer(
    gen: &Generator,
    refs_a: &[&SceneEntry],
    backgrounds_b: &[&SceneEntry],
    seg: Option<(&Segmenter, &ParamStore)>,
    n_samples: usize,
    lambda: f64,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(Vec<(Tensor, Tensor, BBox)>, TransferReport)> {
    if refs_a.is_empty() || backgrounds_b.is_empty() {
        return Err(Error::Argument("need non-empty reference and background pools".into()));
    }
    let dom_a = refs_a[0].spec.domain;
    let dom_b = backgrounds_b[0].spec.domain;
    if dom_a == dom_b {
        return Err(Error::Argument("transfer requires two distinct domains".into()));
    }
    let hash_before = gen.store.content_hash();
    let n = gen.safe.model.image_size;
    let model = SampleModel {
        denoiser: &gen.safe.denoiser,
        store: gen.store,
        sched: &gen.safe.sched,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outputs = Vec::with_capacity(n_samples);
    let mut composited_ok = 0usize;
    let mut centered = 0usize;
    let mut conf_acc = 0.0;
    for _ in 0..n_samples {
        let r = load_scene(refs_a[rng.gen_range(0..refs_a.len())])?;
        let b = load_scene(backgrounds_b[rng.gen_range(0..backgrounds_b.len())])?;
        let bbox = sample_box(n, &mut rng);
        let mask = bbox.to_mask(n);
        let cond = gen.conditioning(&r.reference, lambda)?;
        let uncond = null_cond_tensors(&gen.safe.cond, gen.store, &gen.safe.model);
        let mut sc = sampler.clone();
        sc.seed = rng.gen();
        let (img, trace) = sample(&model, &b.background, &mask, &cond, &uncond, &sc)?;
        let (annot, _) = annotate(&trace, n, &AnnotateConfig::default())?;
        let outside_ok = (0..n * n).all(|p| {
            mask.data()[p] > 0.5 || img.data()[p] == b.background.data()[p]
        });
        if outside_ok {
            composited_ok += 1;
        }
        if let Some((cy, cx)) = mask_center(&annot) {
            if cx >= bbox.x0 as f64 && cx <= bbox.x1 as f64 && cy >= bbox.y0 as f64 && cy <= bbox.y1 as f64 {
                centered += 1;
            }
        }
        if let Some((seg, seg_store)) = seg {
            let f = seg.predict(seg_store, &img)?;
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for p in 0..n * n {
                if mask.data()[p] > 0.5 {
                    acc += f.data()[p];
                    cnt += 1.0;
                }
            }
            conf_acc += acc / cnt;
        }
        outputs.push((img, annot, bbox));
    }
    let hash_after = gen.store.content_hash();
    if hash_before != hash_after {
        return Err(Error::State("parameters changed during transfer generation".into()));
    }
    let report = TransferReport {
        reference_domain: dom_a,
        background_domain: dom_b,
        count: n_samples,
        compositing_ok_fraction: composited_ok as f64 / n_samples as f64,
        center_in_box_fraction: centered as f64 / n_samples as f64,
        mean_in_box_confidence: seg.map(|_| conf_acc / n_samples as f64),
        params_hash: hash_after,
    };
    Ok((outputs, report))
}

// ---- embedding export ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub group_names: Vec<String>,
    pub group_sizes: Vec<usize>,
    /// Per-group 2D coordinates, in group order.
    pub coords: Vec<Vec<(f64, f64)>>,
    /// Distance from each group centroid to the first group's centroid, in
    /// the original (pre-embedding) feature space.
    pub feature_centroid_dist_to_first: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn centroid(feats: &[Vec<f64>]) -> Vec<f64> {
    let d = feats[0].len();
    let mut c = vec![0.0; d];
    for f in feats {
        for (ci, &fi) in c.iter_mut().zip(f) {
            *ci += fi;
        }
    }
    for ci in &mut c {
        *ci /= feats.len() as f64;
    }
    c
}

/// Embed labeled feature groups into 2D with a deterministic neighbor
/// embedding, write a scatter plot and the raw coordinates as JSON.
pub fn export_embedding_plot(
    groups: &[(String, Vec<Vec<f64>>)],
    tsne_cfg: &TsneConfig,
    plot_path: &Path,
    coords_path: &Path,
) -> Result<EmbeddingReport> {
    if groups.len() < 2 {
        return Err(Error::Argument("need at least two groups to embed".into()));
    }
    let mut warnings = Vec::new();
    for (name, feats) in groups {
        if feats.is_empty() {
            return Err(Error::Argument(format!("group {name} is empty")));
        }
        if feats.len() < 5 {
            warnings.push(format!("group {name} has fewer than 5 samples"));
        }
    }
    let all: Vec<Vec<f64>> = groups.iter().flat_map(|(_, f)| f.iter().cloned()).collect();
    let embedded = tsne(&all, tsne_cfg)?;
    let mut coords = Vec::with_capacity(groups.len());
    let mut offset = 0usize;
    for (_, feats) in groups {
        let mut g = Vec::with_capacity(feats.len());
        for i in 0..feats.len() {
            g.push((embedded.data()[(offset + i) * 2], embedded.data()[(offset + i) * 2 + 1]));
        }
        offset += feats.len();
        coords.push(g);
    }
    plot_scatter(plot_path, &coords)?;

    let first_centroid = centroid(&groups[0].1);
    let dists: Vec<f64> =
        groups.iter().map(|(_, f)| euclid(&centroid(f), &first_centroid)).collect();

    let report = EmbeddingReport {
        group_names: groups.iter().map(|(n, _)| n.clone()).collect(),
        group_sizes: groups.iter().map(|(_, f)| f.len()).collect(),
        coords,
        feature_centroid_dist_to_first: dists,
        warnings,
    };
    std::fs::write(coords_path, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::encoder::EncoderConfig;
    use crate::scenegen::{build_dataset, DatasetConfig, SPLIT_SCARCE_TRAIN, SPLIT_TEST};
    use crate::wasm::init_from_safe;
    use tempfile::tempdir;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            t_train: 50,
            base_channels: 4,
            attn_dim: 4,
            time_dim: 8,
            token_dim: 8,
            gamma: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_enc() -> EncoderConfig {
        EncoderConfig { layers: 4, width: 4 }
    }

    struct Fixture {
        store: ParamStore,
        enc_store: ParamStore,
        safe: SafeModel,
        crucial: Conditioner,
        encoder: Encoder,
        manifest: crate::scenegen::DatasetManifest,
        _dir: tempfile::TempDir,
    }

    fn fixture() -> Fixture {
        let dir = tempdir().unwrap();
        let ds = DatasetConfig { image_size: 16, scenes_per_domain: 4, hard_per_domain: 1, ..DatasetConfig::default() };
        let manifest = build_dataset(dir.path(), &ds).unwrap();
        let mut store = ParamStore::new();
        let safe = SafeModel::init(tiny_model(), tiny_enc(), &mut store, 7).unwrap();
        let crucial = init_from_safe(&safe, &mut store).unwrap();
        let mut enc_store = ParamStore::new();
        let encoder = Encoder::init(tiny_enc(), &mut enc_store, 3).unwrap();
        Fixture { store, enc_store, safe, crucial, encoder, manifest, _dir: dir }
    }

    fn quick_sampler() -> SamplerConfig {
        SamplerConfig { steps: 4, guidance: 1.5, ..SamplerConfig::default() }
    }

    #[test]
    fn generate_counts_tags_and_determinism() {
        let fx = fixture();
        let gen = Generator {
            safe: &fx.safe,
            crucial: &fx.crucial,
            store: &fx.store,
            encoder: &fx.encoder,
            enc_store: &fx.enc_store,
        };
        let refs = fx.manifest.split(SPLIT_SCARCE_TRAIN).unwrap();
        let out = tempdir().unwrap();
        let cfg = GenerateConfig { n: 3, lambda: 0.5, seed: 9, sampler: quick_sampler(), ..GenerateConfig::default() };
        let m1 = generate_dataset(&gen, &refs, &out.path().join("a"), &cfg).unwrap();
        assert_eq!(m1.samples.len(), 3);
        assert!(m1.samples.iter().all(|s| s.tag == PathwayTag::Crucial));
        assert!(m1.samples.iter().all(|s| s.image.exists() && s.annotation.exists()));

        let m2 = generate_dataset(&gen, &refs, &out.path().join("b"), &cfg).unwrap();
        let h1: Vec<_> = m1.samples.iter().map(|s| &s.image_hash).collect();
        let h2: Vec<_> = m2.samples.iter().map(|s| &s.image_hash).collect();
        assert_eq!(h1, h2);

        let easy_cfg = GenerateConfig { n: 2, lambda: 0.0, seed: 9, sampler: quick_sampler(), ..GenerateConfig::default() };
        let me = generate_dataset(&gen, &refs, &out.path().join("c"), &easy_cfg).unwrap();
        assert!(me.samples.iter().all(|s| s.tag == PathwayTag::Easy));
    }

    #[test]
    fn gap_report_groups_and_constant_model() {
        let fx = fixture();
        let gen = Generator {
            safe: &fx.safe,
            crucial: &fx.crucial,
            store: &fx.store,
            encoder: &fx.encoder,
            enc_store: &fx.enc_store,
        };
        let refs = fx.manifest.split(SPLIT_SCARCE_TRAIN).unwrap();
        let out = tempdir().unwrap();
        let e = generate_dataset(
            &gen,
            &refs,
            &out.path().join("e"),
            &GenerateConfig { n: 2, lambda: 0.0, seed: 1, sampler: quick_sampler(), ..GenerateConfig::default() },
        )
        .unwrap();
        let c = generate_dataset(
            &gen,
            &refs,
            &out.path().join("c"),
            &GenerateConfig { n: 2, lambda: 0.5, seed: 1, sampler: quick_sampler(), ..GenerateConfig::default() },
        )
        .unwrap();
        let mut seg_store = ParamStore::new();
        let seg = Segmenter::init(SegmenterConfig { channels: 4 }, &mut seg_store, 0).unwrap();
        // zero the output head so the model is constant
        let w = seg_store.get_mut("seg.out.w");
        for v in w.data_mut() {
            *v = 0.0;
        }
        let b = seg_store.get_mut("seg.out.b");
        for v in b.data_mut() {
            *v = 0.0;
        }
        let report = confidence_gap_report(&seg, &seg_store, &[&e, &c], 1e-12).unwrap();
        assert_eq!(report.groups.len(), 2);
        for g in &report.groups {
            assert!(g.mean_gap.abs() < 1e-9, "constant model gap {}", g.mean_gap);
            assert!((g.mean_in_box_confidence - 0.5).abs() < 1e-12);
        }
        assert!(confidence_gap_report(&seg, &seg_store, &[], 0.01).is_err());
    }

    #[test]
    fn augmentation_shapes_and_baseline() {
        let fx = fixture();
        let gen = Generator {
            safe: &fx.safe,
            crucial: &fx.crucial,
            store: &fx.store,
            encoder: &fx.encoder,
            enc_store: &fx.enc_store,
        };
        let refs = fx.manifest.split(SPLIT_SCARCE_TRAIN).unwrap();
        let out = tempdir().unwrap();
        let mk = |lambda: f64, sub: &str| {
            generate_dataset(
                &gen,
                &refs,
                &out.path().join(sub),
                &GenerateConfig { n: 2, lambda, seed: 4, sampler: quick_sampler(), ..GenerateConfig::default() },
            )
            .unwrap()
        };
        let easy = mk(0.0, "easy");
        let crucial = mk(0.5, "crucial");
        let train = fx.manifest.split(SPLIT_SCARCE_TRAIN).unwrap();
        let test = fx.manifest.split(SPLIT_TEST).unwrap();
        let cfg = AugmentationConfig {
            sizes: vec![0, 2],
            seeds: vec![0],
            segmenter: SegmenterConfig { channels: 4 },
            train: SegTrainConfig { steps: 10, lr: 3e-3, seed: 0 },
        };
        let report = augmentation_curve(&train, &easy, &crucial, &test, &cfg).unwrap();
        assert_eq!(report.points.len(), 4); // |sizes| x 2 sources
        let zeros: Vec<&CurvePoint> = report.points.iter().filter(|p| p.size == 0).collect();
        assert_eq!(zeros.len(), 2);
        assert_eq!(zeros[0].ap_mean, zeros[1].ap_mean);
        assert_eq!(zeros[0].f1_mean, zeros[1].f1_mean);
    }

    #[test]
    fn augmentation_detects_leakage() {
        let fx = fixture();
        let gen = Generator {
            safe: &fx.safe,
            crucial: &fx.crucial,
            store: &fx.store,
            encoder: &fx.encoder,
            enc_store: &fx.enc_store,
        };
        let refs = fx.manifest.split(SPLIT_SCARCE_TRAIN).unwrap();
        let out = tempdir().unwrap();
        let mk = |sub: &str| {
            generate_dataset(
                &gen,
                &refs,
                &out.path().join(sub),
                &GenerateConfig { n: 2, lambda: 0.5, seed: 4, sampler: quick_sampler(), ..GenerateConfig::default() },
            )
            .unwrap()
        };
        let easy = mk("easy");
        let crucial = mk("crucial");
        let train = fx.manifest.split(SPLIT_TEST).unwrap(); // same as test -> leakage
        let test = fx.manifest.split(SPLIT_TEST).unwrap();
        let cfg = AugmentationConfig {
            sizes: vec![0],
            seeds: vec![0],
            segmenter: SegmenterConfig { channels: 4 },
            train: SegTrainConfig { steps: 2, lr: 3e-3, seed: 0 },
        };
        let err = augmentation_curve(&train, &easy, &crucial, &test, &cfg).unwrap_err();
        assert!(err.to_string().contains("leakage"), "{err}");
    }

    #[test]
    fn diversity_fixtures() {
        let fx = fixture();
        let refs = fx.manifest.split(SPLIT_SCARCE_TRAIN).unwrap();
        // hand-build a manifest with one duplicated image per reference
        let out = tempdir().unwrap();
        let mut samples = Vec::new();
        for (i, e) in refs.iter().take(2).enumerate() {
            let scene = load_scene(e).unwrap();
            for j in 0..2 {
                let p = out.path().join(format!("d{i}{j}.png"));
                save_gray(&p, &scene.reference).unwrap();
                samples.push(SyntheticSample {
                    id: format!("d{i}{j}"),
                    image: p.clone(),
                    annotation: p.clone(),
                    reference_id: e.id.clone(),
                    domain: e.spec.domain,
                    bbox: e.bbox,
                    lambda: 0.5,
                    seed: 0,
                    sampler_seed: 0,
                    tag: PathwayTag::Crucial,
                    image_hash: image_hash(&scene.reference),
                });
            }
        }
        let manifest = SyntheticManifest {
            seed: 0,
            lambda: 0.5,
            image_size: 16,
            safe_hash: String::new(),
            wasm_hash: String::new(),
            samples,
        };
        let report = diversity_quality(&manifest, &refs, &fx.encoder, &fx.enc_store).unwrap();
        // duplicated images within each cluster -> zero intra-cluster distance
        assert!(report.ic_dist_analog.abs() < 1e-12);
        assert!(report.is_analog >= 1.0 - 1e-9);
        assert_eq!(report.clusters_used, 2);
    }

    #[test]
    fn kid_analog_self_distance_near_zero() {
        let fx = fixture();
        let feats: Vec<Vec<f64>> = fx
            .manifest
            .scenes
            .values()
            .map(|e| {
                let s = load_scene(e).unwrap();
                feature_vector(&fx.encoder, &fx.enc_store, &s.reference)
            })
            .collect();
        // same population split in half: the estimator should be zero on
        // average, so its mean over resamples stays within 3 sd of zero
        let mut vals = Vec::new();
        for seed in 0..20u64 {
            let mut idx: Vec<usize> = (0..feats.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.gen_range(0..=i));
            }
            let half = idx.len() / 2;
            let xs: Vec<Vec<f64>> = idx[..half].iter().map(|&i| feats[i].clone()).collect();
            let ys: Vec<Vec<f64>> = idx[half..].iter().map(|&i| feats[i].clone()).collect();
            vals.push(mmd2_unbiased(&xs, &ys).unwrap());
        }
        let (mean, sd) = mean_sd(&vals);
        assert!(mean.abs() < 3.0 * sd.unwrap(), "self MMD mean {mean}, sd {sd:?}");
    }

    #[test]
    fn component_helpers() {
        let mut m = Tensor::zeros(&[8, 8]);
        // 3-pixel component plus a 1-pixel speck
        for &(y, x) in &[(2usize, 2usize), (2, 3), (3, 2)] {
            m.data_mut()[y * 8 + x] = 1.0;
        }
        m.data_mut()[7 * 8 + 7] = 1.0;
        let comp = dominant_component(&m).unwrap();
        assert_eq!(comp.len(), 3);
        let bbox = BBox { x0: 2, y0: 2, x1: 3, y1: 3 };
        assert!(component_inside(bbox, 0, &comp, 8));
        assert!(!component_inside(BBox { x0: 5, y0: 5, x1: 6, y1: 6 }, 1, &comp, 8));
        let (cy, cx) = mask_center(&m).unwrap();
        assert!((cy - (2.0 + 2.0 + 3.0 + 7.0) / 4.0).abs() < 1e-12);
        assert!((cx - (2.0 + 3.0 + 2.0 + 7.0) / 4.0).abs() < 1e-12);
        assert!(mask_center(&Tensor::zeros(&[4, 4])).is_none());
        assert!(dominant_component(&Tensor::zeros(&[4, 4])).is_none());
    }

    #[test]
    fn transfer_contract() {
        let fx = fixture();
        let gen = Generator {
            safe: &fx.safe,
            crucial: &fx.crucial,
            store: &fx.store,
            encoder: &fx.encoder,
            enc_store: &fx.enc_store,
        };
        let all: Vec<&SceneEntry> = fx.manifest.scenes.values().collect();
        let refs_a: Vec<&SceneEntry> =
            all.iter().copied().filter(|e| e.spec.domain == Domain::Stripes).collect();
        let bg_b: Vec<&SceneEntry> =
            all.iter().copied().filter(|e| e.spec.domain == Domain::Grid).collect();
        let (outs, report) =
            cross_domain_transfer(&gen, &refs_a, &bg_b, None, 2, 0.5, &quick_sampler(), 11).unwrap();
        assert_eq!(outs.len(), 2);
        assert_eq!(report.compositing_ok_fraction, 1.0);
        assert_eq!(report.params_hash, fx.store.content_hash());
        // same-domain transfer rejected
        assert!(cross_domain_transfer(&gen, &refs_a, &refs_a, None, 1, 0.5, &quick_sampler(), 0).is_err());
    }

    #[test]
    fn embedding_export_shapes() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |c: f64, n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..4).map(|_| c + rng.gen::<f64>() * 0.1).collect()).collect()
        };
        let groups = vec![
            ("real-bg".to_string(), mk(0.0, 6, &mut rng)),
            ("real-target".to_string(), mk(5.0, 6, &mut rng)),
            ("easy".to_string(), mk(4.0, 4, &mut rng)),
            ("crucial".to_string(), mk(1.0, 6, &mut rng)),
        ];
        let plot = dir.path().join("embed.png");
        let coords = dir.path().join("coords.json");
        let cfg = TsneConfig { perplexity: 3.0, iterations: 50, ..TsneConfig::default() };
        let report = export_embedding_plot(&groups, &cfg, &plot, &coords).unwrap();
        assert_eq!(report.group_sizes, vec![6, 6, 4, 6]);
        assert_eq!(report.coords.iter().map(|g| g.len()).sum::<usize>(), 22);
        assert!(plot.exists() && coords.exists());
        assert_eq!(report.warnings.len(), 1); // the 4-sample group
        // crucial centroid nearer the background centroid than easy's
        assert!(report.feature_centroid_dist_to_first[3] < report.feature_centroid_dist_to_first[2]);
    }
}
