//! Pixel annotation extraction: averages the prompt-token cross-attention
//! maps recorded at the final sampling step, iteratively refines them with
//! self-attention, and thresholds the result into a binary mask.

use serde::{Deserialize, Serialize};

use crate::diffusion::AttentionTrace;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    /// Refinement iteration count I.
    pub iterations: usize,
    /// Binarization threshold on the max-normalized map.
    pub tau: f64,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self { iterations: 5, tau: 0.5 }
    }
}

fn max_normalize(v: &mut [f64]) {
    let max = v.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for x in v {
            *x /= max;
        }
    }
}

/// Nearest-neighbor upsample of a flattened `res x res` vector to
/// `target x target`.
fn upsample_vec(v: &[f64], res: usize, target: usize) -> Result<Vec<f64>> {
    if res * res != v.len() {
        return Err(Error::Argument(format!("vector length {} is not {res}^2", v.len())));
    }
    if target % res != 0 {
        return Err(Error::Argument(format!("target {target} not a multiple of {res}")));
    }
    let k = target / res;
    let mut out = vec![0.0; target * target];
    for y in 0..target {
        for x in 0..target {
            out[y * target + x] = v[(y / k) * res + x / k];
        }
    }
    Ok(out)
}

/// Upsamples a row-stochastic `[res^2, res^2]` attention matrix to
/// `[target^2, target^2]`: each source column's mass is split evenly over
/// the k^2 target positions it expands to, keeping rows stochastic.
fn upsample_self_map(map: &Tensor, res: usize, target: usize) -> Result<Tensor> {
    let p = res * res;
    if map.shape() != [p, p] {
        return Err(Error::Argument(format!("self map shape {:?} != [{p},{p}]", map.shape())));
    }
    if target % res != 0 {
        return Err(Error::Argument(format!("target {target} not a multiple of {res}")));
    }
    let k = target / res;
    let q = target * target;
    let split = 1.0 / (k * k) as f64;
    let mut out = Tensor::zeros(&[q, q]);
    for iy in 0..target {
        for ix in 0..target {
            let row_src = (iy / k) * res + ix / k;
            for jy in 0..target {
                for jx in 0..target {
                    let col_src = (jy / k) * res + jx / k;
                    out.data_mut()[(iy * target + ix) * q + jy * target + jx] =
                        map.data()[row_src * p + col_src] * split;
                }
            }
        }
    }
    Ok(out)
}

/// Initial cross map: the p*-token columns of every recorded final-step
/// cross map, averaged over tokens and layers at the full image resolution,
/// then max-normalized. Returns a flattened `image_size^2` vector.
pub fn init_cross_map(trace: &AttentionTrace, image_size: usize) -> Result<Tensor> {
    if trace.cross_maps.is_empty() {
        return Err(Error::Argument("trace has no cross-attention maps".into()));
    }
    if trace.pstar_len == 0 {
        return Err(Error::Argument("trace has no prompt-token span".into()));
    }
    let n2 = image_size * image_size;
    let mut acc = vec![0.0; n2];
    for cm in &trace.cross_maps {
        let p = cm.res * cm.res;
        let tokens = cm.map.shape()[1];
        if cm.map.shape()[0] != p {
            return Err(Error::Argument("cross map rows do not match its resolution".into()));
        }
        if trace.pstar_start + trace.pstar_len > tokens {
            return Err(Error::Argument("prompt-token span exceeds cross map width".into()));
        }
        // mean over the p* token columns
        let mut v = vec![0.0; p];
        for (pos, slot) in v.iter_mut().enumerate() {
            let mut s = 0.0;
            for tok in trace.pstar_start..trace.pstar_start + trace.pstar_len {
                s += cm.map.data()[pos * tokens + tok];
            }
            *slot = s / trace.pstar_len as f64;
        }
        let up = upsample_vec(&v, cm.res, image_size)?;
        for (a, u) in acc.iter_mut().zip(&up) {
            *a += u;
        }
    }
    let count = trace.cross_maps.len() as f64;
    for a in &mut acc {
        *a /= count;
    }
    max_normalize(&mut acc);
    Ok(Tensor::new(&[n2], acc))
}

/// Self-attention maps averaged across recorded layers at the full image
/// resolution; stays row-stochastic.
pub fn averaged_self_map(trace: &AttentionTrace, image_size: usize) -> Result<Tensor> {
    if trace.self_maps.is_empty() {
        return Err(Error::Argument("trace has no self-attention maps".into()));
    }
    let q = image_size * image_size;
    let mut acc = Tensor::zeros(&[q, q]);
    for sm in &trace.self_maps {
        let up = upsample_self_map(&sm.map, sm.res, image_size)?;
        for (a, u) in acc.data_mut().iter_mut().zip(up.data()) {
            *a += u;
        }
    }
    let count = trace.self_maps.len() as f64;
    for a in acc.data_mut() {
        *a /= count;
    }
    Ok(acc)
}

/// Iterative refinement: v <- A^sa v, max-normalized after each iteration
/// (or once at the end when `defer_normalization` is set). I=0 returns the
/// input unchanged.
pub fn refine(a_sa: &Tensor, v: &Tensor, iterations: usize, defer_normalization: bool) -> Result<Tensor> {
    let n = v.data().len();
    if a_sa.shape() != [n, n] {
        return Err(Error::Argument(format!(
            "self map shape {:?} does not match vector length {n}",
            a_sa.shape()
        )));
    }
    let mut cur = v.data().to_vec();
    for _ in 0..iterations {
        let mut next = vec![0.0; n];
        for (i, slot) in next.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..n {
                s += a_sa.data()[i * n + j] * cur[j];
            }
            *slot = s;
        }
        if !defer_normalization {
            max_normalize(&mut next);
        }
        cur = next;
    }
    if defer_normalization && iterations > 0 {
        max_normalize(&mut cur);
    }
    Ok(Tensor::new(&[n], cur))
}

/// Thresholds the refined map (>= tau is positive) and nearest-neighbor
/// upsamples to `target_resolution`. Returns a binary `[target, target]`
/// mask.
pub fn binarize(map: &Tensor, tau: f64, target_resolution: usize) -> Result<Tensor> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::Argument("tau must lie in (0,1)".into()));
    }
    let n = map.data().len();
    let res = (n as f64).sqrt() as usize;
    if res * res != n {
        return Err(Error::Argument("map length is not a perfect square".into()));
    }
    let bin: Vec<f64> = map.data().iter().map(|&v| if v >= tau { 1.0 } else { 0.0 }).collect();
    let up = upsample_vec(&bin, res, target_resolution)?;
    Ok(Tensor::new(&[target_resolution, target_resolution], up))
}

/// Full pipeline: trace -> initial cross map -> refinement -> binary mask.
/// Returns the mask and the refined (pre-threshold) map.
pub fn annotate(trace: &AttentionTrace, image_size: usize, cfg: &AnnotateConfig) -> Result<(Tensor, Tensor)> {
    let a0 = init_cross_map(trace, image_size)?;
    let a_sa = averaged_self_map(trace, image_size)?;
    let refined = refine(&a_sa, &a0, cfg.iterations, false)?;
    let mask = binarize(&refined, cfg.tau, image_size)?;
    Ok((mask, refined))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{CrossMap, SelfMap};

    fn trace_with(cross: Vec<CrossMap>, selfm: Vec<SelfMap>, start: usize, len: usize) -> AttentionTrace {
        AttentionTrace {
            timestep: 1,
            self_maps: selfm,
            cross_maps: cross,
            pstar_start: start,
            pstar_len: len,
            per_step_cross: Vec::new(),
        }
    }

    #[test]
    fn single_token_single_layer_is_the_normalized_map() {
        let cm = CrossMap {
            layer: 0,
            res: 2,
            weight: 1.0,
            map: Tensor::new(&[4, 1], vec![0.2, 0.4, 0.1, 0.3]),
        };
        let tr = trace_with(vec![cm], vec![], 0, 1);
        let a0 = init_cross_map(&tr, 2).unwrap();
        let expect = [0.5, 1.0, 0.25, 0.75];
        for (a, e) in a0.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_maps_average_to_themselves() {
        let m = Tensor::new(&[4, 1], vec![0.1, 0.2, 0.4, 0.3]);
        let cm = |_: usize| CrossMap { layer: 0, res: 2, weight: 1.0, map: m.clone() };
        let one = init_cross_map(&trace_with(vec![cm(0)], vec![], 0, 1), 2).unwrap();
        let two = init_cross_map(&trace_with(vec![cm(0), cm(1)], vec![], 0, 1), 2).unwrap();
        assert_eq!(one.data(), two.data());
    }

    #[test]
    fn disjoint_unit_maps_average_to_all_ones() {
        let a = CrossMap { layer: 0, res: 1, weight: 1.0, map: Tensor::new(&[1, 2], vec![1.0, 0.0]) };
        let b = CrossMap { layer: 1, res: 1, weight: 1.0, map: Tensor::new(&[1, 2], vec![0.0, 1.0]) };
        // two tokens, both in the p* span: per-map token means are 0.5 and
        // 0.5; across maps average is 0.5; normalized -> 1
        let tr = trace_with(vec![a, b], vec![], 0, 2);
        let v = init_cross_map(&tr, 1).unwrap();
        assert_eq!(v.data(), &[1.0]);
    }

    #[test]
    fn empty_trace_is_an_argument_error() {
        let tr = trace_with(vec![], vec![], 0, 1);
        assert!(init_cross_map(&tr, 2).is_err());
    }

    #[test]
    fn refine_zero_iterations_is_identity() {
        let a = Tensor::new(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]);
        let v = Tensor::new(&[2], vec![0.7, 0.3]);
        let out = refine(&a, &v, 0, false).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn identity_self_map_is_a_fixed_point() {
        let eye = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let v = Tensor::new(&[3], vec![1.0, 0.5, 0.25]);
        for iters in [1, 3, 5] {
            let out = refine(&eye, &v, iters, false).unwrap();
            assert_eq!(out.data(), v.data());
        }
    }

    #[test]
    fn hand_product_matches() {
        let a = Tensor::new(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]);
        let v = Tensor::new(&[2], vec![1.0, 0.0]);
        let out = refine(&a, &v, 1, false).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0]); // [0.5,0.5] max-normalized
    }

    #[test]
    fn range_is_non_increasing_before_normalization() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        // random row-stochastic matrix
        let n = 6;
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.01).collect();
            let s: f64 = row.iter().sum();
            for j in 0..n {
                a.data_mut()[i * n + j] = row[j] / s;
            }
        }
        let mut v = Tensor::new(&[n], (0..n).map(|_| rng.gen::<f64>()).collect());
        let mut range = {
            let max = v.data().iter().cloned().fold(f64::MIN, f64::max);
            let min = v.data().iter().cloned().fold(f64::MAX, f64::min);
            max - min
        };
        for _ in 0..5 {
            v = refine(&a, &v, 1, true).unwrap();
            // undo the final normalization to inspect the raw product range
            let raw = refine(&a, &v, 0, true).unwrap();
            let max = raw.data().iter().cloned().fold(f64::MIN, f64::max);
            let min = raw.data().iter().cloned().fold(f64::MAX, f64::min);
            assert!(max - min <= range + 1e-12);
            range = max - min;
        }
    }

    #[test]
    fn deferred_normalization_composes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = 4;
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.01).collect();
            let s: f64 = row.iter().sum();
            for j in 0..n {
                a.data_mut()[i * n + j] = row[j] / s;
            }
        }
        let v = Tensor::new(&[n], (0..n).map(|_| rng.gen::<f64>()).collect());
        let whole = refine(&a, &v, 5, true).unwrap();
        let part = refine(&a, &v, 2, true).unwrap();
        let composed = refine(&a, &part, 3, true).unwrap();
        for (w, c) in whole.data().iter().zip(composed.data()) {
            assert!((w - c).abs() < 1e-9, "{w} vs {c}");
        }
    }

    #[test]
    fn binarize_matches_comparison_semantics() {
        let all_one = Tensor::new(&[4], vec![1.0; 4]);
        let m = binarize(&all_one, 0.5, 2).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
        let all_zero = Tensor::new(&[4], vec![0.0; 4]);
        let m = binarize(&all_zero, 0.5, 2).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        let v = Tensor::new(&[4], vec![0.2, 0.6, 0.5, 0.0]);
        let m = binarize(&v, 0.5, 2).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(binarize(&v, 0.0, 2).is_err());
        assert!(binarize(&v, 1.0, 2).is_err());
    }

    #[test]
    fn binarize_upsamples_nearest() {
        let v = Tensor::new(&[4], vec![0.9, 0.1, 0.1, 0.9]);
        let m = binarize(&v, 0.5, 4).unwrap();
        assert_eq!(m.shape(), &[4, 4]);
        // top-left 2x2 block and bottom-right 2x2 block are ones
        for y in 0..4 {
            for x in 0..4 {
                let expect = if (y < 2) == (x < 2) { 1.0 } else { 0.0 };
                assert_eq!(m.data()[y * 4 + x], expect, "({y},{x})");
            }
        }
    }

    #[test]
    fn upsampled_self_map_stays_row_stochastic() {
        let a = Tensor::new(&[4, 4], {
            let mut d = vec![0.0; 16];
            for i in 0..4 {
                for j in 0..4 {
                    d[i * 4 + j] = if i == j { 0.7 } else { 0.1 };
                }
            }
            d
        });
        let up = upsample_self_map(&a, 2, 4).unwrap();
        assert_eq!(up.shape(), &[16, 16]);
        for i in 0..16 {
            let s: f64 = (0..16).map(|j| up.data()[i * 16 + j]).sum();
            assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
        }
    }
}
