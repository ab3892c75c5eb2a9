//! Reference implementations used as test oracles. They follow the original
//! MATLAB evaluation scripts line by line with plain loops and share no code
//! with the library.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = f64::EPSILON;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (N - 1); a single value has spread 0.
fn std_sample(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

fn object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    let sigma = std_sample(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = mean(pred);
    let y = mean(gt);
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for i in 0..pred.len() {
        sx += (pred[i] - x).powi(2);
        sy += (gt[i] - y).powi(2);
        sxy += (pred[i] - x) * (gt[i] - y);
    }
    sx /= n - 1.0 + EPS;
    sy /= n - 1.0 + EPS;
    sxy /= n - 1.0 + EPS;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_measure(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let (rows, cols) = pred.dim();
    let gtf: Vec<f64> = gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    let y = mean(&gtf);
    if y == 0.0 {
        return 1.0 - mean(pred.as_slice().unwrap());
    }
    if y == 1.0 {
        return mean(pred.as_slice().unwrap());
    }

    // Object term.
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if gt[(r, c)] {
                fg.push(pred[(r, c)]);
            } else {
                bg.push(1.0 - pred[(r, c)]);
            }
        }
    }
    let s_object = y * object(&fg) + (1.0 - y) * object(&bg);

    // Region term, 1-based centroid as in the original.
    let total: f64 = gtf.iter().sum();
    let mut sx = 0.0;
    let mut sy = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            if gt[(r, c)] {
                sx += (c + 1) as f64;
                sy += (r + 1) as f64;
            }
        }
    }
    let cx = round_half_away(sx / total);
    let cy = round_half_away(sy / total);
    let area = (rows * cols) as f64;
    let quads = [
        (0..cy, 0..cx),
        (0..cy, cx..cols),
        (cy..rows, 0..cx),
        (cy..rows, cx..cols),
    ];
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((cols - cx) * cy) as f64 / area;
    let w3 = (cx * (rows - cy)) as f64 / area;
    let weights = [w1, w2, w3, 1.0 - w1 - w2 - w3];
    let mut s_region = 0.0;
    for (q, (rr, cc)) in quads.into_iter().enumerate() {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for r in rr.clone() {
            for c in cc.clone() {
                p.push(pred[(r, c)]);
                g.push(if gt[(r, c)] { 1.0 } else { 0.0 });
            }
        }
        if p.is_empty() {
            continue;
        }
        s_region += weights[q] * ssim(&p, &g);
    }
    (0.5 * s_object + 0.5 * s_region).max(0.0)
}

/// Nearest foreground pixel by exhaustive search; ties go to the smallest
/// (row, col).
pub fn brute_nearest(gt: &Array2<bool>) -> (Array2<f64>, Array2<(usize, usize)>) {
    let (rows, cols) = gt.dim();
    let fg: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&p| gt[p])
        .collect();
    let mut dist = Array2::zeros((rows, cols));
    let mut idx = Array2::from_elem((rows, cols), (0, 0));
    for r in 0..rows {
        for c in 0..cols {
            let mut best = (usize::MAX, 0, 0);
            for &(fr, fc) in &fg {
                let d2 = fr.abs_diff(r).pow(2) + fc.abs_diff(c).pow(2);
                best = best.min((d2, fr, fc));
            }
            dist[(r, c)] = (best.0 as f64).sqrt();
            idx[(r, c)] = (best.1, best.2);
        }
    }
    (dist, idx)
}

/// 7x7 Gaussian with sigma 5, normalized to unit sum.
fn gaussian_kernel() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (x, y) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / 50.0).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

pub fn weighted_f_beta(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let (rows, cols) = pred.dim();
    let e = Array2::from_shape_fn((rows, cols), |p| (pred[p] - if gt[p] { 1.0 } else { 0.0 }).abs());
    let (dst, idxt) = brute_nearest(gt);
    let et = Array2::from_shape_fn((rows, cols), |p| if gt[p] { e[p] } else { e[idxt[p]] });

    // Correlation with zero padding, same-size output.
    let k = gaussian_kernel();
    let mut ea = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            let mut acc = 0.0;
            for (i, krow) in k.iter().enumerate() {
                for (j, kv) in krow.iter().enumerate() {
                    let (rr, cc) = (r + i as isize - 3, c + j as isize - 3);
                    if rr >= 0 && cc >= 0 && rr < rows as isize && cc < cols as isize {
                        acc += kv * et[(rr as usize, cc as usize)];
                    }
                }
            }
            ea[(r as usize, c as usize)] = acc;
        }
    }

    let mut tpw = 0.0;
    let mut fpw = 0.0;
    let mut ew_fg = 0.0;
    let mut n_fg = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let p = (r, c);
            let min_e = if gt[p] && ea[p] < e[p] { ea[p] } else { e[p] };
            let b = if gt[p] {
                1.0
            } else {
                2.0 - (0.5f64.ln() / 5.0 * dst[p]).exp()
            };
            let ew = min_e * b;
            if gt[p] {
                ew_fg += ew;
                n_fg += 1.0;
            } else {
                fpw += ew;
            }
        }
    }
    tpw += n_fg - ew_fg;
    let recall = 1.0 - ew_fg / n_fg;
    let precision = tpw / (EPS + tpw + fpw);
    2.0 * recall * precision / (EPS + recall + precision)
}

/// Enhanced alignment over all pixels of two binary maps, pixel by pixel.
pub fn enhanced_alignment(fm: &Array2<bool>, gt: &Array2<bool>) -> f64 {
    let n = gt.len() as f64;
    let f = |b: bool| if b { 1.0 } else { 0.0 };
    let n_gt: f64 = gt.iter().map(|&g| f(g)).sum();
    let mut total = 0.0;
    if n_gt == 0.0 {
        for &v in fm.iter() {
            total += 1.0 - f(v);
        }
    } else if n_gt == n {
        for &v in fm.iter() {
            total += f(v);
        }
    } else {
        let mu_fm: f64 = fm.iter().map(|&v| f(v)).sum::<f64>() / n;
        let mu_gt = n_gt / n;
        for (a, b) in fm.iter().zip(gt.iter()) {
            let af = f(*a) - mu_fm;
            let ag = f(*b) - mu_gt;
            let align = 2.0 * ag * af / (ag * ag + af * af + EPS);
            total += (align + 1.0) * (align + 1.0) / 4.0;
        }
    }
    total / n
}

/// Random 16x16-style pair: one or two ellipses for ground truth and a noisy
/// soft prediction loosely correlated with it.
pub fn random_pair(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (Array2<f64>, Array2<bool>) {
    loop {
        let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=2))
            .map(|_| {
                (
                    rng.random_range(0.0..rows as f64),
                    rng.random_range(0.0..cols as f64),
                    rng.random_range(1.5..(rows as f64 / 2.5).max(2.0)),
                    rng.random_range(1.5..(cols as f64 / 2.5).max(2.0)),
                )
            })
            .collect();
        let gt = Array2::from_shape_fn((rows, cols), |(r, c)| {
            blobs.iter().any(|&(cr, cc, ar, ac)| {
                ((r as f64 - cr) / ar).powi(2) + ((c as f64 - cc) / ac).powi(2) <= 1.0
            })
        });
        let fg = gt.iter().filter(|&&g| g).count();
        if fg == 0 || fg == gt.len() {
            continue;
        }
        let quality: f64 = rng.random_range(0.0..1.0);
        let pred = gt.mapv(|g| {
            let base = if g { quality } else { 1.0 - quality };
            (0.5 * base + 0.5 * rng.random_range(0.0..1.0)).clamp(0.0, 1.0)
        });
        return (pred, gt);
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small model used wherever the tests train end to end. Full-batch SGD
/// with clipping converges on the 4-sample fixture well within 300 steps.
pub const TOY_CONFIG: &str = r#"
[model]
image_size = 64
patch_size = 8
width = 64
depth = 2
heads = 4
embed_dim = 64
decoder_heads = 4
decoder_mlp_dim = 128

[injector]
d_dec = 64

[train]
initial_lr = 0.1
batch_size = 4
max_grad_norm = 1.0
total_steps = 300
"#;

pub fn toy_config() -> mlkg::config::RunConfig {
    let cfg: mlkg::config::RunConfig = toml::from_str(TOY_CONFIG).unwrap();
    cfg.validate().unwrap();
    cfg
}

/// The 4-sample training fixture (2 classes x 2 photos, 64 px) with stub
/// knowledge for every photo.
pub fn fixture_samples(
    root: &std::path::Path,
) -> (Vec<mlkg::dataset::CamouflagedSample>, mlkg::knowledge::KnowledgeCache) {
    use mlkg::dataset::{load_dataset, load_sample, make_synthetic_fixture, FixtureConfig, Split};
    use mlkg::knowledge::{generate_bundle, KnowledgeCache, RetryPolicy, StubBackend};
    let cfg = FixtureConfig {
        n_classes: 2,
        n_per_class: 2,
        size: 64,
        seed: 7,
    };
    make_synthetic_fixture(root, &cfg).unwrap();
    let index = load_dataset(root, Split::Train).unwrap();
    let samples: Vec<_> = index.samples.iter().map(|d| load_sample(d).unwrap()).collect();
    let mut cache = KnowledgeCache::default();
    for s in &samples {
        let b = generate_bundle(&s.t_ref, Some(&s.photo), &s.image_id, &StubBackend, RetryPolicy::default()).unwrap();
        cache.store(&b).unwrap();
    }
    (samples, cache)
}
