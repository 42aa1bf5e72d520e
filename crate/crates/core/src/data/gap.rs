use super::dataset::PairedSet;
use super::render::luminance;
use crate::model::ModalityId;

/// Pearson correlation between band values and RGB luminance, pooled over
/// every pixel of every pair of band `m`. `None` when there are no pairs or
/// either side is constant.
pub fn luminance_correlation(set: &PairedSet, m: ModalityId) -> Option<f64> {
    let (mut n, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0f64, 0f64, 0f64, 0f64, 0f64, 0f64);
    for p in set.get(m) {
        let (_, h, w) = p.rgb.dim();
        for y in 0..h {
            for x in 0..w {
                let l = luminance(p.rgb[[0, y, x]], p.rgb[[1, y, x]], p.rgb[[2, y, x]]) as f64;
                let v = p.ms[[0, y, x]] as f64;
                n += 1.0;
                sx += v;
                sy += l;
                sxx += v * v;
                syy += l * l;
                sxy += v * l;
            }
        }
    }
    if n == 0.0 {
        return None;
    }
    let cov = sxy / n - sx / n * sy / n;
    let vx = sxx / n - (sx / n).powi(2);
    let vy = syy / n - (sy / n).powi(2);
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
