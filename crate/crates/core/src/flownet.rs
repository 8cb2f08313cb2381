//! The learned flow network: a foreground image plus source/target keypoint
//! heatmaps go in, a dense 3D backward-warp field at the finest bottleneck
//! resolution comes out. The offset head is zero-initialized, so a fresh
//! network predicts exactly the identity flow.

use rand::Rng;

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::kernels::{fold_2d_to_3d, unfold_3d_to_2d, Activation};
use crate::nn::{Conv2d, Conv2dCache, Conv3d, Conv3dCache, Parameter};
use crate::pose::{pose_to_heatmaps, Pose};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, split_channels, Tensor};
use crate::volwarp::{
    downsample_flow, downsample_flow_backward, identity_flow, FeatureVolume, FlowField,
};

/// Channels of the folded 3D feature inside the flow trunk.
const FLOW_VOL_CHANNELS: usize = 4;

pub struct FlowNet<S: Scalar> {
    c1: Conv2d<S>,
    c2: Conv2d<S>,
    c3: Conv2d<S>,
    c4: Conv2d<S>,
    v1: Conv3d<S>,
    head: Conv3d<S>,
    cfg: NetConfig,
}

pub struct FlowNetCache<S: Scalar> {
    c1: Conv2dCache<S>,
    c2: Conv2dCache<S>,
    c3: Conv2dCache<S>,
    c4: Conv2dCache<S>,
    v1: Conv3dCache<S>,
    head: Conv3dCache<S>,
    in_channels: [usize; 3],
}

impl<S: Scalar> FlowNet<S> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let k = cfg.keypoints;
        let cin = 3 + 2 * k;
        let d = cfg.volume_depth;
        let lr = Some(Activation::LeakyRelu);
        FlowNet {
            c1: Conv2d::new("flow.c1", cin, 16, 3, 2, lr, rng),
            c2: Conv2d::new("flow.c2", 16, 32, 3, 2, lr, rng),
            c3: Conv2d::new("flow.c3", 32, 48, 3, 1, lr, rng),
            c4: Conv2d::new("flow.c4", 48, FLOW_VOL_CHANNELS * d, 1, 1, None, rng),
            v1: Conv3d::new(
                "flow.v1",
                FLOW_VOL_CHANNELS,
                8,
                [3, 3, 3],
                [1, 1, 1],
                lr,
                rng,
            ),
            head: Conv3d::new("flow.head", 8, 3, [3, 3, 3], [1, 1, 1], None, rng).zero_init(),
            cfg: cfg.clone(),
        }
    }

    /// Predict the backward flow warping content seen in `x_fg` (pose `p_s`)
    /// into pose `p_t`, at the finest bottleneck resolution.
    pub fn forward(
        &self,
        x_fg: &Tensor<S>,
        p_s: &Pose,
        p_t: &Pose,
    ) -> Result<(FlowField<S>, FlowNetCache<S>)> {
        let r = self.cfg.resolution;
        if x_fg.shape() != [3, r, r] {
            return Err(Error::shape(
                format!("[3, {r}, {r}] (configured base grid)"),
                format!("{:?}", x_fg.shape()),
            ));
        }
        let hs = pose_to_heatmaps::<S>(p_s, r, r);
        let ht = pose_to_heatmaps::<S>(p_t, r, r);
        self.forward_with_heatmaps(x_fg, &hs, &ht)
    }

    /// Same as `forward` with precomputed heatmaps (training caches them).
    pub fn forward_with_heatmaps(
        &self,
        x_fg: &Tensor<S>,
        heat_s: &Tensor<S>,
        heat_t: &Tensor<S>,
    ) -> Result<(FlowField<S>, FlowNetCache<S>)> {
        let x = concat_channels(&[x_fg, heat_s, heat_t])?;
        let (y1, c1) = self.c1.forward(&x)?;
        let (y2, c2) = self.c2.forward(&y1)?;
        let (y3, c3) = self.c3.forward(&y2)?;
        let (y4, c4) = self.c4.forward(&y3)?;
        let folded = fold_2d_to_3d(&y4, self.cfg.volume_depth)?;
        let (y5, v1) = self.v1.forward(&folded)?;
        let (offset, head) = self.head.forward(&y5)?;
        let [d, h, w] = self.cfg.base_grid();
        let mut flow = identity_flow::<S>(d, h, w);
        flow.tensor.add_assign(&offset)?;
        Ok((
            flow,
            FlowNetCache {
                c1,
                c2,
                c3,
                c4,
                v1,
                head,
                in_channels: [3, heat_s.shape()[0], heat_t.shape()[0]],
            },
        ))
    }

    /// Accumulate parameter gradients; returns the gradient w.r.t. `x_fg`.
    pub fn backward(&mut self, cache: &FlowNetCache<S>, grad_flow: &Tensor<S>) -> Result<Tensor<S>> {
        let g5 = self.head.backward(&cache.head, grad_flow)?;
        let g_folded = self.v1.backward(&cache.v1, &g5)?;
        let g4 = unfold_3d_to_2d(&g_folded)?;
        let g3 = self.c4.backward(&cache.c4, &g4)?;
        let g2 = self.c3.backward(&cache.c3, &g3)?;
        let g1 = self.c2.backward(&cache.c2, &g2)?;
        let gx = self.c1.backward(&cache.c1, &g1)?;
        let parts = split_channels(&gx, &cache.in_channels)?;
        Ok(parts.into_iter().next().expect("x_fg gradient"))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.c1.visit_params(f);
        self.c2.visit_params(f);
        self.c3.visit_params(f);
        self.c4.visit_params(f);
        self.v1.visit_params(f);
        self.head.visit_params(f);
    }
}

/// One flow per bottleneck resolution: level 0 is the base flow, each
/// coarser level is the flow re-gridded at half extents.
pub fn flows_for_resolutions<S: Scalar>(base: &FlowField<S>, m: usize) -> Result<Vec<FlowField<S>>> {
    if m == 0 {
        return Err(Error::invalid("need at least one resolution"));
    }
    let [d, h, w] = base.extents();
    let div = 1 << (m - 1);
    if d % div != 0 || h % div != 0 || w % div != 0 {
        return Err(Error::invalid(format!(
            "base extents {:?} not divisible by 2^(m-1) = {div}",
            base.extents()
        )));
    }
    let mut flows = Vec::with_capacity(m);
    flows.push(base.clone());
    for i in 1..m {
        let next = downsample_flow(&flows[i - 1])?;
        flows.push(next);
    }
    Ok(flows)
}

/// Fold per-level flow gradients back onto the base flow.
pub fn flows_for_resolutions_backward<S: Scalar>(
    grads: Vec<Option<Tensor<S>>>,
    flows: &[FlowField<S>],
) -> Result<Tensor<S>> {
    let m = flows.len();
    assert_eq!(grads.len(), m);
    let mut acc: Option<Tensor<S>> = None;
    for i in (0..m).rev() {
        let mut g = match (grads[i].clone(), acc) {
            (Some(mut g), Some(a)) => {
                g.add_assign(&a)?;
                g
            }
            (Some(g), None) => g,
            (None, Some(a)) => a,
            (None, None) => {
                acc = None;
                continue;
            }
        };
        if i > 0 {
            g = downsample_flow_backward(&g, &flows[i - 1])?;
        } else {
            return Ok(g);
        }
        acc = Some(g);
    }
    Ok(Tensor::zeros(flows[0].tensor.shape()))
}

/// Interpolate a flow field at the cell centers of an arbitrary grid, used
/// to carry one base flow onto the anisotropic encoder grids.
pub fn flow_at_extents<S: Scalar>(flow: &FlowField<S>, extents: [usize; 3]) -> FlowField<S> {
    if flow.extents() == extents {
        return flow.clone();
    }
    let target = identity_flow::<S>(extents[0], extents[1], extents[2]);
    let vol = FeatureVolume {
        tensor: flow.tensor.clone(),
    };
    FlowField {
        tensor: crate::volwarp::resample(&vol, &target).tensor,
    }
}

/// Gradient of `flow_at_extents` w.r.t. the source flow.
pub fn flow_at_extents_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    flow: &FlowField<S>,
    extents: [usize; 3],
) -> Result<Tensor<S>> {
    if flow.extents() == extents {
        return Ok(grad_out.clone());
    }
    let target = identity_flow::<S>(extents[0], extents[1], extents[2]);
    let vol = FeatureVolume {
        tensor: flow.tensor.clone(),
    };
    let (gf, _) = crate::volwarp::resample_backward(grad_out, &vol, &target)?;
    Ok(gf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            resolution: 16,
            levels: 2,
            volume_depth: 4,
            channels: vec![4, 8],
            keypoints: 3,
        }
    }

    fn rand_pose(seed: u64, k: usize) -> Pose {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Pose::new(
            (0..k)
                .map(|_| [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)])
                .collect(),
        )
    }

    #[test]
    fn fresh_network_predicts_identity_flow() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = FlowNet::<f32>::new(&cfg, &mut rng);
        let x = Tensor::<f32>::from_fn(&[3, 16, 16], |i| (i[1] as f32 - 8.0) / 8.0);
        let (flow, _) = net
            .forward(&x, &rand_pose(1, 3), &rand_pose(2, 3))
            .unwrap();
        let id = identity_flow::<f32>(4, 4, 4);
        assert_eq!(flow.tensor.data(), id.tensor.data(), "zero-init head");
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = FlowNet::<f32>::new(&cfg, &mut rng);
        // make the head nonzero so determinism is meaningful
        net.head.w.value.fill(0.01);
        let x = Tensor::<f32>::from_fn(&[3, 16, 16], |i| (i[2] as f32) * 0.05);
        let (a, _) = net.forward(&x, &rand_pose(5, 3), &rand_pose(6, 3)).unwrap();
        let (b, _) = net.forward(&x, &rand_pose(5, 3), &rand_pose(6, 3)).unwrap();
        assert_eq!(a.tensor.data(), b.tensor.data());
    }

    #[test]
    fn rejects_wrong_resolution() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = FlowNet::<f32>::new(&cfg, &mut rng);
        let x = Tensor::<f32>::zeros(&[3, 8, 8]);
        assert!(net.forward(&x, &rand_pose(1, 3), &rand_pose(2, 3)).is_err());
    }

    #[test]
    fn flows_for_resolutions_shapes_and_identity() {
        let base = identity_flow::<f64>(4, 8, 8);
        let flows = flows_for_resolutions(&base, 3).unwrap();
        assert_eq!(flows.len(), 3);
        assert_eq!(flows[0].extents(), [4, 8, 8]);
        assert_eq!(flows[1].extents(), [2, 4, 4]);
        assert_eq!(flows[2].extents(), [1, 2, 2]);
        for (f, n) in flows.iter().zip([4usize, 2, 1]) {
            let id = identity_flow::<f64>(n, 2 * n, 2 * n);
            for (a, b) in f.tensor.data().iter().zip(id.tensor.data()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn flows_for_resolutions_single_level_is_base() {
        let base = identity_flow::<f64>(4, 4, 4);
        let flows = flows_for_resolutions(&base, 1).unwrap();
        assert_eq!(flows.len(), 1);
        assert_eq!(flows[0].tensor.data(), base.tensor.data());
    }

    #[test]
    fn coarse_rotation_close_to_direct_rotation() {
        let base = crate::volwarp::rotation_flow::<f64>(35.0, 8, 8, 8);
        let flows = flows_for_resolutions(&base, 2).unwrap();
        let direct = crate::volwarp::rotation_flow::<f64>(35.0, 4, 4, 4);
        for (a, b) in flows[1].tensor.data().iter().zip(direct.tensor.data()) {
            assert!((a - b).abs() <= 1e-4);
        }
    }

    #[test]
    fn flows_for_resolutions_rejects_indivisible() {
        let base = identity_flow::<f64>(6, 6, 6);
        assert!(flows_for_resolutions(&base, 3).is_err());
    }

    #[test]
    fn flownet_param_gradcheck() {
        use crate::gradcheck::{grad_check, weighted_sum, FD_STEP};
        let cfg = NetConfig {
            resolution: 8,
            levels: 1,
            volume_depth: 2,
            channels: vec![2],
            keypoints: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = FlowNet::<f64>::new(&cfg, &mut rng);
        // nonzero head so its gradient is exercised
        for v in net.head.w.value.data_mut() {
            *v = 0.02;
        }
        let x = Tensor::<f64>::from_fn(&[3, 8, 8], |i| {
            0.1 * (i[0] as f64) + 0.03 * (i[1] as f64) - 0.02 * (i[2] as f64)
        });
        let p_s = rand_pose(11, 2);
        let p_t = rand_pose(12, 2);
        let g = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |i| 0.2 - 0.05 * (i[0] as f64 + i[3] as f64));

        // check the head weight and the first conv weight
        let head_w = net.head.w.value.clone();
        let c1_w = net.c1.w.value.clone();
        let err = grad_check(
            &[head_w, c1_w, x.clone()],
            |inputs| {
                let mut n2 = FlowNet::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
                n2.head.w.value = inputs[0].clone();
                n2.c1.w.value = inputs[1].clone();
                let (flow, _) = n2.forward(&inputs[2], &p_s, &p_t)?;
                Ok(weighted_sum(&flow.tensor, &g))
            },
            |inputs| {
                let mut n2 = FlowNet::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
                n2.head.w.value = inputs[0].clone();
                n2.c1.w.value = inputs[1].clone();
                let (_, cache) = n2.forward(&inputs[2], &p_s, &p_t)?;
                let gx = n2.backward(&cache, &g)?;
                Ok(vec![n2.head.w.grad.clone(), n2.c1.w.grad.clone(), gx])
            },
            FD_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "flownet end-to-end grad check: {err}");
    }
}
