use ndarray::{Array2, ArrayView2};

use super::{check_shapes, MetricError};

const EPS: f64 = f64::EPSILON;
const BETA2: f64 = 1.0;
const KERNEL_SIZE: usize = 7;
const KERNEL_SIGMA: f64 = 5.0;

/// Euclidean distance transform to the nearest `true` pixel.
///
/// Returns the distance and the `(row, col)` of that pixel for every
/// position. Ties are broken by the smaller row, then the smaller column.
/// `mask` must contain at least one `true` pixel.
pub fn nearest_foreground(mask: ArrayView2<bool>) -> (Array2<f64>, Array2<(usize, usize)>) {
    let (h, w) = mask.dim();
    // Per column: nearest foreground row for every row, preferring the upper one.
    let mut col_near: Array2<Option<usize>> = Array2::from_elem((h, w), None);
    for c in 0..w {
        let mut above = vec![None; h];
        let mut last = None;
        for r in 0..h {
            if mask[(r, c)] {
                last = Some(r);
            }
            above[r] = last;
        }
        let mut below = None;
        for r in (0..h).rev() {
            if mask[(r, c)] {
                below = Some(r);
            }
            col_near[(r, c)] = match (above[r], below) {
                (Some(a), Some(b)) => Some(if r - a <= b - r { a } else { b }),
                (a, b) => a.or(b),
            };
        }
    }

    let mut dist = Array2::zeros((h, w));
    let mut index = Array2::from_elem((h, w), (0, 0));
    for r in 0..h {
        for c in 0..w {
            let mut best: Option<(usize, usize, usize)> = None; // (d², row, col)
            for off in 0..w {
                let dc2 = off * off;
                if let Some((bd, _, _)) = best {
                    if dc2 > bd {
                        break;
                    }
                }
                let cands = if off == 0 {
                    [Some(c), None]
                } else {
                    [c.checked_sub(off), (c + off < w).then_some(c + off)]
                };
                for cc in cands.into_iter().flatten() {
                    if let Some(rr) = col_near[(r, cc)] {
                        let cand = (dc2 + r.abs_diff(rr).pow(2), rr, cc);
                        if best.map_or(true, |b| cand < b) {
                            best = Some(cand);
                        }
                    }
                }
            }
            let (d2, rr, cc) = best.expect("mask has a foreground pixel");
            dist[(r, c)] = (d2 as f64).sqrt();
            index[(r, c)] = (rr, cc);
        }
    }
    (dist, index)
}

/// Normalized 1-D Gaussian; its outer product is the normalized 2-D kernel.
fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Same-size correlation with the separable Gaussian, zero padding.
fn gaussian_filter(x: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = gaussian_1d(KERNEL_SIZE, KERNEL_SIGMA);
    let half = (KERNEL_SIZE / 2) as isize;
    let mut tmp = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let cc = c as isize + i as isize - half;
                if (0..w as isize).contains(&cc) {
                    acc += kv * x[(r, cc as usize)];
                }
            }
            tmp[(r, c)] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let rr = r as isize + i as isize - half;
                if (0..h as isize).contains(&rr) {
                    acc += kv * tmp[(rr as usize, c)];
                }
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Weighted F-measure (β² = 1). Undefined for an empty ground truth.
pub fn weighted_f_beta(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    if !gt.iter().any(|&g| g) {
        return Err(MetricError::EmptyGroundTruth);
    }
    let e = Array2::from_shape_fn(gt.dim(), |ix| (pred[ix] - f64::from(u8::from(gt[ix]))).abs());
    let (dst, idx) = nearest_foreground(gt);
    let et = Array2::from_shape_fn(gt.dim(), |ix| if gt[ix] { e[ix] } else { e[idx[ix]] });
    let ea = gaussian_filter(et.view());

    let decay = 0.5f64.ln() / 5.0;
    let (mut sum_in, mut n_in, mut fp) = (0.0, 0.0, 0.0);
    for (ix, &g) in gt.indexed_iter() {
        if g {
            sum_in += e[ix].min(ea[ix]);
            n_in += 1.0;
        } else {
            fp += e[ix] * (2.0 - (decay * dst[ix]).exp());
        }
    }
    let tp = n_in - sum_in;
    let recall = 1.0 - sum_in / n_in;
    let precision = tp / (EPS + tp + fp);
    Ok((1.0 + BETA2) * recall * precision / (EPS + recall + BETA2 * precision))
}
