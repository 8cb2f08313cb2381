//! Training objectives: reconstruction, mask supervision, frozen-feature
//! perceptual distance, the adversarial terms at two scales, and the
//! weighted total.

use crate::config::{AdvMode, LossWeights};
use crate::error::{Error, Result};
use crate::pipeline::{PerceptualCache, PerceptualNet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean absolute difference over all elements.
pub fn l1_mean<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    a.mean_abs_diff(b)
}

/// Gradient of `scale * mean|a - b|` w.r.t. `a`.
pub fn l1_mean_backward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, scale: S) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let n = S::from_f64_c(a.len() as f64);
    let k = scale / n;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            if x > y {
                k
            } else if x < y {
                -k
            } else {
                S::zero()
            }
        })
        .collect();
    Tensor::from_vec(a.shape(), data)
}

// ---------------------------------------------------------------------------
// Perceptual loss on frozen random features
// ---------------------------------------------------------------------------

pub struct PerceptualPair<S: Scalar> {
    pub value: S,
    real_stages: [Tensor<S>; 3],
    synth_stages: [Tensor<S>; 3],
    synth_cache: PerceptualCache<S>,
}

/// Distance between a real and a synthesized image in the frozen random
/// feature space: sum over stages of mean absolute feature differences.
pub fn perceptual_pair<S: Scalar>(
    net: &PerceptualNet<S>,
    real: &Tensor<S>,
    synth: &Tensor<S>,
) -> Result<PerceptualPair<S>> {
    let (real_stages, _) = net.forward(real)?;
    let (synth_stages, synth_cache) = net.forward(synth)?;
    let mut value = S::zero();
    for (r, s) in real_stages.iter().zip(&synth_stages) {
        value += l1_mean(s, r)?;
    }
    Ok(PerceptualPair {
        value,
        real_stages,
        synth_stages,
        synth_cache,
    })
}

/// Gradient of `scale * perceptual distance` w.r.t. the synthesized image.
pub fn perceptual_pair_backward<S: Scalar>(
    net: &PerceptualNet<S>,
    pair: &PerceptualPair<S>,
    scale: S,
) -> Result<Tensor<S>> {
    let g1 = l1_mean_backward(&pair.synth_stages[0], &pair.real_stages[0], scale)?;
    let g2 = l1_mean_backward(&pair.synth_stages[1], &pair.real_stages[1], scale)?;
    let g3 = l1_mean_backward(&pair.synth_stages[2], &pair.real_stages[2], scale)?;
    net.backward_data(&pair.synth_cache, [&g1, &g2, &g3])
}

/// Forward-only perceptual loss over both image pairs (full and foreground).
pub fn perceptual_loss<S: Scalar>(
    net: &PerceptualNet<S>,
    y: &Tensor<S>,
    y_hat: &Tensor<S>,
    y_fg: &Tensor<S>,
    y_fg_hat: &Tensor<S>,
) -> Result<S> {
    Ok(perceptual_pair(net, y_fg, y_fg_hat)?.value + perceptual_pair(net, y, y_hat)?.value)
}

// ---------------------------------------------------------------------------
// Adversarial losses over two-scale patch score maps
// ---------------------------------------------------------------------------

fn mean_sq_minus<S: Scalar>(scores: &Tensor<S>, target: S) -> S {
    let n = S::from_f64_c(scores.len() as f64);
    let half = S::from_f64_c(0.5);
    let sum: S = scores.data().iter().map(|&v| (v - target) * (v - target)).sum();
    half * sum / n
}

fn mean_sq_minus_grad<S: Scalar>(scores: &Tensor<S>, target: S, scale: S) -> Tensor<S> {
    let n = S::from_f64_c(scores.len() as f64);
    let k = scale / n;
    Tensor::from_vec(
        scores.shape(),
        scores.data().iter().map(|&v| k * (v - target)).collect(),
    )
    .expect("same shape")
}

/// Discriminator objective on one scale pair. Returns the loss and the
/// gradients w.r.t. the real and fake score maps.
pub fn disc_loss_scale<S: Scalar>(
    mode: AdvMode,
    real: &Tensor<S>,
    fake: &Tensor<S>,
    scale: S,
) -> (S, Tensor<S>, Tensor<S>) {
    match mode {
        AdvMode::Lsgan => {
            let v = mean_sq_minus(real, S::one()) + mean_sq_minus(fake, S::zero());
            let gr = mean_sq_minus_grad(real, S::one(), scale);
            let gf = mean_sq_minus_grad(fake, S::zero(), scale);
            (v, gr, gf)
        }
        AdvMode::Logistic => {
            // -E[log sig(real)] - E[log(1 - sig(fake))]
            let n_r = S::from_f64_c(real.len() as f64);
            let n_f = S::from_f64_c(fake.len() as f64);
            let mut v = S::zero();
            let mut gr = Tensor::zeros(real.shape());
            let mut gf = Tensor::zeros(fake.shape());
            for (i, &s) in real.data().iter().enumerate() {
                v += -stable_log_sigmoid(s) / n_r;
                gr.data_mut()[i] = scale * (sigmoid(s) - S::one()) / n_r;
            }
            for (i, &s) in fake.data().iter().enumerate() {
                v += -stable_log_sigmoid(-s) / n_f; // log(1-sig(s)) = log sig(-s)
                gf.data_mut()[i] = scale * sigmoid(s) / n_f;
            }
            (v, gr, gf)
        }
    }
}

/// Generator objective on one scale. Returns the loss and the gradient
/// w.r.t. the fake score map.
pub fn gen_loss_scale<S: Scalar>(mode: AdvMode, fake: &Tensor<S>, scale: S) -> (S, Tensor<S>) {
    match mode {
        AdvMode::Lsgan => (
            mean_sq_minus(fake, S::one()),
            mean_sq_minus_grad(fake, S::one(), scale),
        ),
        AdvMode::Logistic => {
            // the saturating printed form: generator minimizes
            // E[log(1 - sig(fake))]
            let n = S::from_f64_c(fake.len() as f64);
            let mut v = S::zero();
            let mut g = Tensor::zeros(fake.shape());
            for (i, &s) in fake.data().iter().enumerate() {
                v += stable_log_sigmoid(-s) / n;
                g.data_mut()[i] = -scale * sigmoid(s) / n;
            }
            (v, g)
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn stable_log_sigmoid<S: Scalar>(x: S) -> S {
    // log sig(x) = -softplus(-x); softplus(t) = max(t, 0) + ln(1 + e^{-|t|})
    let t = -x;
    let m = if t > S::zero() { t } else { S::zero() };
    -(m + (S::one() + (-t.abs()).exp()).ln())
}

/// Average a per-scale objective over both discriminator scales.
pub fn average_scales<S: Scalar>(values: [S; 2]) -> S {
    (values[0] + values[1]) / S::from_f64_c(2.0)
}

// ---------------------------------------------------------------------------
// Total objective
// ---------------------------------------------------------------------------

/// Per-term loss values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub fg: f64,
    pub bg: f64,
    pub per: f64,
    pub recon: f64,
    pub mask: f64,
    pub rot: f64,
    pub total: f64,
}

impl LossReport {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"fg\":{},\"bg\":{},\"per\":{},\"recon\":{},\"mask\":{},\"rot\":{},\"total\":{}}}",
            self.fg, self.bg, self.per, self.recon, self.mask, self.rot, self.total
        )
    }
}

/// Weighted sum of the six terms. A non-finite term is rejected with its
/// name.
pub fn total_loss(
    terms: (f64, f64, f64, f64, f64, f64),
    weights: &LossWeights,
) -> Result<LossReport> {
    let (fg, bg, per, recon, mask, rot) = terms;
    for (name, v) in [
        ("fg", fg),
        ("bg", bg),
        ("per", per),
        ("recon", recon),
        ("mask", mask),
        ("rot", rot),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss term {name}"),
            });
        }
    }
    let total = weights.fg * fg
        + weights.bg * bg
        + weights.per * per
        + weights.recon * recon
        + weights.mask * mask
        + weights.rot * rot;
    Ok(LossReport {
        fg,
        bg,
        per,
        recon,
        mask,
        rot,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetConfig;
    use crate::pipeline::Generator;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_examples() {
        let x = Tensor::<f64>::from_fn(&[3, 4, 4], |i| 0.2 * i[0] as f64 - 0.1);
        assert_eq!(l1_mean(&x, &x).unwrap(), 0.0);
        let y = x.map(|v| v + 0.1);
        assert!((l1_mean(&y, &x).unwrap() - 0.1).abs() < 1e-12);
        // two refs with errors a and b average to (a+b)/2
        let (a, b) = (0.3, 0.07);
        let avg = (l1_mean(&x.map(|v| v + a), &x).unwrap() + l1_mean(&x.map(|v| v + b), &x).unwrap()) / 2.0;
        assert!((avg - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn l1_gradcheck() {
        use crate::gradcheck::{grad_check, FD_STEP};
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| 0.4 * i[1] as f64 - 0.5);
        let b = Tensor::<f64>::from_fn(&[2, 3], |i| 0.1 * i[0] as f64 + 0.2);
        let err = grad_check(
            &[a.clone()],
            |xs| Ok(l1_mean(&xs[0], &b)?),
            |xs| Ok(vec![l1_mean_backward(&xs[0], &b, 1.0)?]),
            FD_STEP,
        )
        .unwrap();
        assert!(err <= 1e-9, "l1 grad: {err}");
    }

    #[test]
    fn perceptual_zero_and_symmetry() {
        let cfg = NetConfig {
            resolution: 16,
            levels: 1,
            volume_depth: 2,
            channels: vec![2],
            keypoints: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::<f64>::new(&cfg, &mut rng);
        let a = Tensor::<f64>::from_fn(&[3, 16, 16], |i| 0.05 * (i[1] as f64) - 0.3);
        let b = Tensor::<f64>::from_fn(&[3, 16, 16], |i| 0.4 - 0.02 * (i[2] as f64));
        assert_eq!(perceptual_loss(&g.perceptual, &a, &a, &b, &b).unwrap(), 0.0);
        let ab = perceptual_pair(&g.perceptual, &a, &b).unwrap().value;
        let ba = perceptual_pair(&g.perceptual, &b, &a).unwrap().value;
        assert!((ab - ba).abs() < 1e-12, "absolute difference is symmetric");
    }

    #[test]
    fn perceptual_matches_direct_oracle() {
        let cfg = NetConfig {
            resolution: 16,
            levels: 1,
            volume_depth: 2,
            channels: vec![2],
            keypoints: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Generator::<f64>::new(&cfg, &mut rng);
        let a = Tensor::<f64>::from_fn(&[3, 16, 16], |i| 0.03 * (i[1] as f64 + i[2] as f64) - 0.4);
        let b = a.map(|v| 0.8 * v + 0.05);
        let got = perceptual_pair(&g.perceptual, &a, &b).unwrap().value;
        // independent recomputation from the stage outputs
        let (sa, _) = g.perceptual.forward(&a).unwrap();
        let (sb, _) = g.perceptual.forward(&b).unwrap();
        let mut expect = 0.0;
        for (x, y) in sa.iter().zip(&sb) {
            let n = x.len() as f64;
            let s: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).sum();
            expect += s / n;
        }
        assert!((got - expect).abs() <= 1e-6 * (1.0 + expect));
    }

    #[test]
    fn lsgan_closed_form_examples() {
        let ones = Tensor::<f64>::full(&[1, 4, 4], 1.0);
        let zeros = Tensor::<f64>::zeros(&[1, 4, 4]);
        let (d, _, _) = disc_loss_scale(AdvMode::Lsgan, &ones, &zeros, 1.0);
        assert_eq!(d, 0.0);
        let (g, _) = gen_loss_scale(AdvMode::Lsgan, &zeros, 1.0);
        assert!((g - 0.5).abs() < 1e-12);
        let half = Tensor::<f64>::full(&[1, 2, 2], 0.5);
        let (d, _, _) = disc_loss_scale(AdvMode::Lsgan, &half, &half, 1.0);
        assert!((d - 0.25).abs() < 1e-12);
        let (g, _) = gen_loss_scale(AdvMode::Lsgan, &half, 1.0);
        assert!((g - 0.125).abs() < 1e-12);
    }

    #[test]
    fn adversarial_gradchecks() {
        use crate::gradcheck::{grad_check, FD_STEP};
        for mode in [AdvMode::Lsgan, AdvMode::Logistic] {
            let fake = Tensor::<f64>::from_fn(&[1, 3, 3], |i| 0.3 * i[1] as f64 - 0.4);
            let err = grad_check(
                &[fake],
                |xs| Ok(gen_loss_scale(mode, &xs[0], 1.0).0),
                |xs| Ok(vec![gen_loss_scale(mode, &xs[0], 1.0).1]),
                FD_STEP,
            )
            .unwrap();
            assert!(err <= 1e-6, "{mode:?} generator grad: {err}");

            let real = Tensor::<f64>::from_fn(&[1, 3, 3], |i| 0.5 - 0.2 * i[2] as f64);
            let fake = Tensor::<f64>::from_fn(&[1, 3, 3], |i| -0.1 + 0.15 * i[1] as f64);
            let err = grad_check(
                &[real.clone(), fake.clone()],
                |xs| Ok(disc_loss_scale(mode, &xs[0], &xs[1], 1.0).0),
                |xs| {
                    let (_, gr, gf) = disc_loss_scale(mode, &xs[0], &xs[1], 1.0);
                    Ok(vec![gr, gf])
                },
                FD_STEP,
            )
            .unwrap();
            assert!(err <= 1e-6, "{mode:?} disc grad: {err}");
        }
    }

    #[test]
    fn logistic_mode_has_correct_directions() {
        // a confident-real score lowers the discriminator's real penalty
        let hi = Tensor::<f64>::full(&[1, 1, 1], 3.0);
        let lo = Tensor::<f64>::full(&[1, 1, 1], -3.0);
        let (d_good, _, _) = disc_loss_scale(AdvMode::Logistic, &hi, &lo, 1.0);
        let (d_bad, _, _) = disc_loss_scale(AdvMode::Logistic, &lo, &hi, 1.0);
        assert!(d_good < d_bad);
        // generator wants fakes scored high
        let (g_fooled, _) = gen_loss_scale(AdvMode::Logistic, &hi, 1.0);
        let (g_caught, _) = gen_loss_scale(AdvMode::Logistic, &lo, 1.0);
        assert!(g_fooled < g_caught);
    }

    #[test]
    fn total_loss_paper_weights() {
        let w = LossWeights::default();
        let report = total_loss((1.0, 1.0, 1.0, 1.0, 1.0, 1.0), &w).unwrap();
        assert_eq!(report.total, 15.0, "all terms 1 with unit weights except per=10");
        let zero = LossWeights {
            fg: 0.0,
            bg: 0.0,
            per: 0.0,
            recon: 0.0,
            mask: 0.0,
            rot: 0.0,
        };
        assert_eq!(total_loss((1.0, 2.0, 3.0, 4.0, 5.0, 6.0), &zero).unwrap().total, 0.0);
        let single = LossWeights {
            fg: 0.0,
            bg: 0.0,
            per: 0.0,
            recon: 2.5,
            mask: 0.0,
            rot: 0.0,
        };
        assert_eq!(total_loss((0.0, 0.0, 0.0, 0.4, 0.0, 0.0), &single).unwrap().total, 1.0);
    }

    #[test]
    fn total_loss_rejects_nan_naming_term() {
        let w = LossWeights::default();
        let err = total_loss((1.0, f64::NAN, 1.0, 1.0, 1.0, 1.0), &w).unwrap_err();
        assert!(format!("{err}").contains("bg"), "{err}");
    }

    #[test]
    fn total_loss_linear_in_each_term() {
        let w = LossWeights::default();
        let base = total_loss((0.0, 0.0, 0.0, 0.0, 0.0, 0.0), &w).unwrap().total;
        let bumped = total_loss((0.0, 0.0, 0.7, 0.0, 0.0, 0.0), &w).unwrap().total;
        assert!((bumped - base - 10.0 * 0.7).abs() < 1e-12);
    }
}
