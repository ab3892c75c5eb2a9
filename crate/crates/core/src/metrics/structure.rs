use ndarray::{s, ArrayView2};

use super::{check_shapes, MetricError};

const EPS: f64 = f64::EPSILON;
const ALPHA: f64 = 0.5;

/// Structure measure: `α·S_object + (1−α)·S_region` with α = 0.5.
pub fn s_measure(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    let n = gt.len() as f64;
    let fg = gt.iter().filter(|&&g| g).count() as f64;
    let mean_pred = pred.mean().unwrap_or(0.0);
    if fg == 0.0 {
        return Ok(1.0 - mean_pred);
    }
    if fg == n {
        return Ok(mean_pred);
    }
    let q = ALPHA * s_object(pred, gt) + (1.0 - ALPHA) * s_region(pred, gt);
    Ok(q.max(0.0))
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn s_object(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    let u = fg.len() as f64 / gt.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// 1-based centroid, rounded half away from zero. `(x, y)` = (columns, rows)
/// in the left/top quadrants.
fn centroid(gt: ArrayView2<bool>) -> (usize, usize) {
    let (rows, cols) = gt.dim();
    let mut total = 0.0;
    let (mut sx, mut sy) = (0.0, 0.0);
    for ((r, c), &g) in gt.indexed_iter() {
        if g {
            total += 1.0;
            sx += (c + 1) as f64;
            sy += (r + 1) as f64;
        }
    }
    if total == 0.0 {
        return ((cols as f64 / 2.0).round() as usize, (rows as f64 / 2.0).round() as usize);
    }
    ((sx / total).round() as usize, (sy / total).round() as usize)
}

fn ssim(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 0.0;
    }
    let x = pred.sum() / n;
    let y = gt.iter().filter(|&&g| g).count() as f64 / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let dx = p - x;
        let dy = f64::from(u8::from(g)) - y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let denom = n - 1.0 + EPS;
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> f64 {
    let (h, w) = gt.dim();
    let (x, y) = centroid(gt);
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = ((w - x) * y) as f64 / area;
    let w3 = (x * (h - y)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quads = [
        (s![..y, ..x], w1),
        (s![..y, x..], w2),
        (s![y.., ..x], w3),
        (s![y.., x..], w4),
    ];
    quads
        .into_iter()
        .map(|(sl, wt)| {
            let (p, g) = (pred.slice(sl), gt.slice(sl));
            if p.is_empty() {
                0.0
            } else {
                wt * ssim(p, g)
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = Array2::from_shape_fn((10, 12), |(r, c)| (2..7).contains(&r) && (3..9).contains(&c));
        let pred = gt.mapv(|g| f64::from(u8::from(g)));
        let s = s_measure(pred.view(), gt.view()).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn degenerate_ground_truths() {
        let gt = Array2::from_elem((4, 4), false);
        let zeros = Array2::zeros((4, 4));
        assert_eq!(s_measure(zeros.view(), gt.view()).unwrap(), 1.0);
        let pred = Array2::from_elem((4, 4), 0.25);
        assert_eq!(s_measure(pred.view(), gt.view()).unwrap(), 0.75);
        let gt = Array2::from_elem((4, 4), true);
        assert_eq!(s_measure(pred.view(), gt.view()).unwrap(), 0.25);
    }

    #[test]
    fn centroid_rounds_half_away() {
        // Foreground in columns 1 and 2 (1-based 2, 3): mean 2.5 rounds to 3.
        let gt = Array2::from_shape_fn((3, 4), |(_, c)| c == 1 || c == 2);
        assert_eq!(centroid(gt.view()), (3, 2));
    }
}
