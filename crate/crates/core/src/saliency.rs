//! Gradient-weighted class activation maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LogitTarget, NetworkSpec, ParamSet};
use crate::tensor::Tensor;

/// Guards the XGradCAM normalizer against all-zero feature maps.
pub const XGRADCAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CamMethod {
    /// `α_f = Σ g·A / (Σ A + ε)`.
    #[default]
    XGradCam,
    /// `α_f = mean(g)`.
    GradCam,
}

impl std::str::FromStr for CamMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xgradcam" => Ok(CamMethod::XGradCam),
            "gradcam" => Ok(CamMethod::GradCam),
            _ => Err(Error::Config(format!("unknown saliency method `{s}` (xgradcam|gradcam)"))),
        }
    }
}

impl std::fmt::Display for CamMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CamMethod::XGradCam => "xgradcam",
            CamMethod::GradCam => "gradcam",
        })
    }
}

/// Nonnegative `h × w` localization map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || values.len() != h * w {
            return Err(Error::Input(format!("heatmap {h}x{w} with {} values", values.len())));
        }
        Ok(Heatmap { h, w, values })
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Self {
        Heatmap {
            h,
            w,
            values: vec![v; h * w],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.w + c]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Highest logit, lowest index on ties.
pub fn target_class(logits: &[f64]) -> Result<usize> {
    nn::argmax(logits).ok_or_else(|| Error::Input("empty logits".into()))
}

/// Combines `k` feature maps of size `h × w` with their gradients into a heatmap.
pub fn cam_from_maps(maps: &[f64], grads: &[f64], k: usize, h: usize, w: usize, method: CamMethod) -> Heatmap {
    let p = h * w;
    assert_eq!(maps.len(), k * p);
    assert_eq!(grads.len(), k * p);
    let mut out = vec![0.0; p];
    for f in 0..k {
        let a = &maps[f * p..(f + 1) * p];
        let g = &grads[f * p..(f + 1) * p];
        let alpha = match method {
            CamMethod::XGradCam => {
                let num: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
                let den: f64 = a.iter().sum::<f64>() + XGRADCAM_EPS;
                num / den
            }
            CamMethod::GradCam => g.iter().sum::<f64>() / p as f64,
        };
        if alpha == 0.0 {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(a) {
            *o += alpha * x;
        }
    }
    for v in &mut out {
        // max() also maps -0.0 and NaN-free negatives to +0.0
        *v = v.max(0.0);
    }
    Heatmap { h, w, values: out }
}

/// Heatmaps for every sample of a `[N, C, H, W]` batch, each for its own
/// predicted class. Returns the heatmaps and the target classes.
pub fn cam_batch(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor, method: CamMethod) -> Result<(Vec<Heatmap>, Vec<usize>)> {
    let g = nn::feature_gradients(spec, params, batch, LogitTarget::Predicted)?;
    let [k, h, w] = spec.cam_shape()?;
    let maps = (0..batch.shape()[0])
        .map(|s| cam_from_maps(g.feature_maps.outer(s), g.grad.outer(s), k, h, w, method))
        .collect();
    Ok((maps, g.targets))
}

/// Heatmap of one `[C, H, W]` input at the saliency layer's resolution.
pub fn cam(spec: &NetworkSpec, params: &ParamSet, x: &[f64], method: CamMethod) -> Result<Heatmap> {
    let [c, h, w] = spec.input;
    let batch = Tensor::new(vec![1, c, h, w], x.to_vec())
        .map_err(|_| Error::shape(0, format!("input has {} values, expected {}", x.len(), c * h * w)))?;
    let (mut maps, _) = cam_batch(spec, params, &batch, method)?;
    Ok(maps.remove(0))
}

/// Bilinear upsampling with aligned corners.
pub fn upsample(map: &Heatmap, h: usize, w: usize) -> Result<Heatmap> {
    if h < map.h || w < map.w {
        return Err(Error::Input(format!(
            "cannot upsample {}x{} to smaller {h}x{w}",
            map.h, map.w
        )));
    }
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if out == 1 || inp == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let lo = (x.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, x - lo as f64)
    };
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        let (r0, r1, fr) = coord(r, h, map.h);
        for c in 0..w {
            let (c0, c1, fc) = coord(c, w, map.w);
            let top = map.at(r0, c0) * (1.0 - fc) + map.at(r0, c1) * fc;
            let bot = map.at(r1, c0) * (1.0 - fc) + map.at(r1, c1) * fc;
            values.push(top * (1.0 - fr) + bot * fr);
        }
    }
    Ok(Heatmap { h, w, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_class_rules() {
        assert_eq!(target_class(&[0.1, 2.0, -1.0]).unwrap(), 1);
        assert_eq!(target_class(&[1.0, 1.0]).unwrap(), 0);
        assert!(target_class(&[]).is_err());
    }

    #[test]
    fn identical_maps_with_constant_gradient_give_constant_heatmap() {
        let (k, h, w) = (3, 2, 2);
        let maps = vec![0.7; k * h * w];
        let grads = vec![0.25; k * h * w];
        for m in [CamMethod::XGradCam, CamMethod::GradCam] {
            let hm = cam_from_maps(&maps, &grads, k, h, w, m);
            assert!(hm.values.iter().all(|&v| (v - hm.values[0]).abs() < 1e-15));
            assert!(hm.values[0] > 0.0);
        }
    }

    #[test]
    fn single_map_with_unit_gradient_recovers_map() {
        let f = vec![0.0, 1.5, 2.0, 0.5];
        let hm = cam_from_maps(&f, &[1.0; 4], 1, 2, 2, CamMethod::XGradCam);
        let alpha = 4.0 / (4.0 + XGRADCAM_EPS);
        for (a, b) in hm.values.iter().zip(&f) {
            assert!((a - alpha * b).abs() < 1e-15);
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_maps_give_zero_heatmap() {
        let hm = cam_from_maps(&[0.0; 8], &[3.0; 8], 2, 2, 2, CamMethod::XGradCam);
        assert!(hm.values.iter().all(|&v| v == 0.0 && v.is_sign_positive()));
    }

    #[test]
    fn upsample_constant_and_identity() {
        let one = Heatmap::new(1, 1, vec![2.5]).unwrap();
        let up = upsample(&one, 5, 7).unwrap();
        assert!(up.values.iter().all(|&v| v == 2.5));
        let m = Heatmap::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(upsample(&m, 2, 3).unwrap(), m);
        assert!(upsample(&m, 1, 3).is_err());
    }

    #[test]
    fn upsample_aligned_corners() {
        let m = Heatmap::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = upsample(&m, 4, 4).unwrap();
        for r in 0..4 {
            let row = &up.values[r * 4..(r + 1) * 4];
            for (got, want) in row.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]) {
                assert!((got - want).abs() < 1e-15);
            }
        }
    }
}
