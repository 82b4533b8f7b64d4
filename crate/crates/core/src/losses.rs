//! Training objective: photometric L2 plus distortion, opacity-entropy and
//! auxiliary-feature L1 regularizers. Every per-ray term is averaged over the
//! batch before weighting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opacity floor applied before the logarithm.
pub const OPACITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_o: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 0.005,
            lambda_o: 0.005,
            lambda_r: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_d, self.lambda_o, self.lambda_r]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Mean over rays of the squared color error.
pub fn photometric_loss(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::contract(
            "prediction and target batches differ in size",
        ));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|k| (p[k] - t[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(s / pred.len() as f64)
}

/// Distortion of one ray with bins `[s0_i, s1_i]` sorted along the ray, in
/// O(N) via running sums of weights and weighted midpoints.
pub fn distortion_loss(w: &[f64], s0: &[f64], s1: &[f64]) -> f64 {
    let (mut cross, mut own) = (0.0, 0.0);
    let (mut acc_w, mut acc_wm) = (0.0, 0.0);
    for i in 0..w.len() {
        let m = 0.5 * (s0[i] + s1[i]);
        cross += w[i] * (m * acc_w - acc_wm);
        acc_w += w[i];
        acc_wm += w[i] * m;
        own += w[i] * w[i] * (s1[i] - s0[i]);
    }
    2.0 * cross + own / 3.0
}

/// Gradient of [`distortion_loss`] with respect to the weights:
/// `2 Σ_j w_j |m_i - m_j| + (2/3) w_i (s1_i - s0_i)`.
pub fn distortion_grad(w: &[f64], s0: &[f64], s1: &[f64], out: &mut Vec<f64>) {
    let n = w.len();
    out.clear();
    out.resize(n, 0.0);
    let (tot_w, tot_wm) = w
        .iter()
        .zip(s0.iter().zip(s1))
        .fold((0.0, 0.0), |(a, b), (wi, (l, r))| {
            (a + wi, b + wi * 0.5 * (l + r))
        });
    let (mut before_w, mut before_wm) = (0.0, 0.0);
    for i in 0..n {
        let m = 0.5 * (s0[i] + s1[i]);
        let after_w = tot_w - before_w - w[i];
        let after_wm = tot_wm - before_wm - w[i] * m;
        let dist = (m * before_w - before_wm) + (after_wm - m * after_w);
        out[i] = 2.0 * dist + 2.0 / 3.0 * w[i] * (s1[i] - s0[i]);
        before_w += w[i];
        before_wm += w[i] * m;
    }
}

/// `-o ln o` with `o` clamped to `[1e-6, 1]`.
pub fn opacity_entropy(o: f64) -> f64 {
    let c = o.clamp(OPACITY_FLOOR, 1.0);
    -c * c.ln()
}

/// Derivative of [`opacity_entropy`]; zero where the clamp is active.
pub fn opacity_entropy_grad(o: f64) -> f64 {
    if o < OPACITY_FLOOR || o > 1.0 {
        0.0
    } else {
        -(o.ln() + 1.0)
    }
}

/// Mean over points of the L1 norm of their auxiliary features.
pub fn spatial_l1(features: &[Vec<f64>]) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    features
        .iter()
        .map(|f| f.iter().map(|v| v.abs()).sum::<f64>())
        .sum::<f64>()
        / features.len() as f64
}

/// Batch-mean loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub photometric: f64,
    pub distortion: f64,
    pub opacity: f64,
    pub l1: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.photometric, self.distortion, self.opacity, self.l1]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    terms.photometric
        + w.lambda_d * terms.distortion
        + w.lambda_o * terms.opacity
        + w.lambda_r * terms.l1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(w: &[f64], s0: &[f64], s1: &[f64]) -> f64 {
        let mid: Vec<f64> = s0.iter().zip(s1).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut cross = 0.0;
        for i in 0..w.len() {
            for j in 0..w.len() {
                cross += w[i] * w[j] * (mid[i] - mid[j]).abs();
            }
        }
        cross
            + (0..w.len())
                .map(|i| w[i] * w[i] * (s1[i] - s0[i]))
                .sum::<f64>()
                / 3.0
    }

    fn random_ray(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = rng.gen_range(1..40);
        let mut edges: Vec<f64> = (0..n + 1).map(|_| rng.gen::<f64>()).collect();
        edges.sort_by(f64::total_cmp);
        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() / n as f64).collect();
        (w, edges[..n].to_vec(), edges[1..].to_vec())
    }

    #[test]
    fn photometric_cases() {
        assert_eq!(
            photometric_loss(&[[0.2, 0.3, 0.4]], &[[0.2, 0.3, 0.4]]).unwrap(),
            0.0
        );
        assert_eq!(
            photometric_loss(&[[0.0; 3]; 2], &[[1.0; 3]; 2]).unwrap(),
            3.0
        );
        assert!((photometric_loss(&[[0.1, 0.0, 0.0]], &[[0.0; 3]]).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn distortion_cases() {
        assert_eq!(distortion_loss(&[0.0, 0.0], &[0.0, 0.5], &[0.5, 1.0]), 0.0);
        assert!((distortion_loss(&[1.0], &[0.0], &[0.3]) - 0.1).abs() < 1e-15);
        let v = distortion_loss(&[0.5, 0.5], &[0.0, 0.5], &[0.5, 1.0]);
        assert!((v - (0.25 + 1.0 / 12.0)).abs() < 1e-15);
        assert!((v - 0.33333).abs() < 1e-5);
    }

    #[test]
    fn fast_distortion_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let (w, a, b) = random_ray(&mut rng);
            let (f, s) = (distortion_loss(&w, &a, &b), brute(&w, &a, &b));
            assert!((f - s).abs() <= 1e-6 * s.abs().max(1e-12));
        }
    }

    #[test]
    fn distortion_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Vec::new();
        for _ in 0..50 {
            let (w, a, b) = random_ray(&mut rng);
            distortion_grad(&w, &a, &b, &mut g);
            for i in 0..w.len() {
                let h = 1e-6;
                let mut p = w.clone();
                p[i] += h;
                let mut m = w.clone();
                m[i] -= h;
                let fd = (brute(&p, &a, &b) - brute(&m, &a, &b)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(opacity_entropy(1.0), 0.0);
        assert!((opacity_entropy(0.5) - 0.346_573_590_279_972_6).abs() < 1e-12);
        assert!(opacity_entropy(0.0) <= 1e-6 * 1e6f64.ln() + 1e-18);
        let e = std::f64::consts::E;
        let peak = opacity_entropy(1.0 / e);
        assert!((peak - 1.0 / e).abs() < 1e-12);
        for i in 0..=1000 {
            let o = i as f64 / 1000.0;
            assert!(opacity_entropy(o) >= 0.0 && opacity_entropy(o) <= peak + 1e-15);
        }
        for o in [0.1, 0.5, 0.9] {
            let fd = (opacity_entropy(o + 1e-7) - opacity_entropy(o - 1e-7)) / 2e-7;
            assert!((fd - opacity_entropy_grad(o)).abs() < 1e-6);
        }
    }

    #[test]
    fn l1_cases() {
        assert_eq!(spatial_l1(&[vec![0.0; 4]]), 0.0);
        assert_eq!(spatial_l1(&[vec![0.5, -0.5]]), 1.0);
        let f = vec![vec![0.1, -0.7], vec![0.3, 0.2]];
        let f2: Vec<Vec<f64>> = f
            .iter()
            .map(|v| v.iter().map(|x| 2.0 * x).collect())
            .collect();
        assert!((spatial_l1(&f2) - 2.0 * spatial_l1(&f)).abs() < 1e-15);
    }

    #[test]
    fn total_cases() {
        let t = LossTerms {
            photometric: 0.7,
            distortion: 3.0,
            opacity: 2.0,
            l1: 9.0,
        };
        let zero = LossWeights {
            lambda_d: 0.0,
            lambda_o: 0.0,
            lambda_r: 0.0,
        };
        assert_eq!(total_loss(&t, &zero), 0.7);
        let ones = LossTerms {
            photometric: 1.0,
            distortion: 1.0,
            opacity: 1.0,
            l1: 1.0,
        };
        assert!((total_loss(&ones, &LossWeights::default()) - 1.011).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn single_bin_self_term_scales_with_width(w in 0.0f64..1.0, width in 1e-3f64..0.5, c in 0.1f64..1.0) {
            let a = distortion_loss(&[w], &[0.2], &[0.2 + width]);
            prop_assert!((a - w * w * width / 3.0).abs() < 1e-15);
            let b = distortion_loss(&[w], &[0.2], &[0.2 + c * width]);
            prop_assert!((b - c * a).abs() < 1e-12);
        }

        #[test]
        fn cross_term_is_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, a, b) = random_ray(&mut rng);
            let mut idx: Vec<usize> = (0..w.len()).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.gen_range(0..=i));
            }
            let pw: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
            let pa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
            let pb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            let x = brute(&w, &a, &b);
            prop_assert!((x - brute(&pw, &pa, &pb)).abs() < 1e-12);
        }
    }
}
