use ndarray::{ArrayView2, Zip};

use super::{check_shapes, MetricError};

const EPS: f64 = f64::EPSILON;

/// Adaptive threshold: twice the mean prediction, capped at 1.
pub fn adaptive_threshold(pred: ArrayView2<f64>) -> f64 {
    (2.0 * pred.mean().unwrap_or(0.0)).min(1.0)
}

/// Enhanced-alignment measure of two binary maps, averaged over all pixels.
pub fn enhanced_alignment(fm: ArrayView2<bool>, gt: ArrayView2<bool>) -> f64 {
    let n = gt.len() as f64;
    let as_f = |b: bool| f64::from(u8::from(b));
    let fg = gt.iter().filter(|&&g| g).count();
    let total: f64 = if fg == 0 {
        fm.iter().map(|&f| 1.0 - as_f(f)).sum()
    } else if fg == gt.len() {
        fm.iter().map(|&f| as_f(f)).sum()
    } else {
        let mu_fm = fm.iter().filter(|&&f| f).count() as f64 / n;
        let mu_gt = fg as f64 / n;
        let mut sum = 0.0;
        Zip::from(&fm).and(&gt).for_each(|&f, &g| {
            let af = as_f(f) - mu_fm;
            let ag = as_f(g) - mu_gt;
            let align = 2.0 * ag * af / (ag * ag + af * af + EPS);
            sum += (align + 1.0).powi(2) / 4.0;
        });
        sum
    };
    total / n
}

/// Adaptive E-measure: binarize with [`adaptive_threshold`] (`>=`), then
/// score the enhanced alignment. Zero-valued pixels never binarize to
/// foreground, so an all-zero prediction stays empty.
pub fn e_measure_adaptive(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    let th = adaptive_threshold(pred);
    let fm = pred.mapv(|p| p >= th && p > 0.0);
    Ok(enhanced_alignment(fm.view(), gt))
}
