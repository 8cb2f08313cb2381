//! The full synthesis path: multi-resolution 2D->3D encoder, warped-skip 3D
//! decoder, per-level occupancy decoders, background network, compositing
//! and the three conditional multi-scale patch discriminators.

use rand::Rng;

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::kernels::{downsample2x, downsample2x_backward, fold_2d_to_3d, unfold_3d_to_2d, Activation};
use crate::nn::{Conv2d, Conv2dCache, Conv3d, Conv3dCache, Parameter, Upsample2x};
use crate::pose::{pose_to_heatmaps, Pose};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, split_channels, Tensor};
use crate::volwarp::{aggregate, resample, rotation_flow, FeatureVolume, FlowField};
use crate::flownet::{flow_at_extents, flows_for_resolutions, FlowNet};

// ---------------------------------------------------------------------------
// Enc2D
// ---------------------------------------------------------------------------

pub struct Enc2d<S: Scalar> {
    c1: Conv2d<S>,
    c2: Conv2d<S>,
    c3: Conv2d<S>,
    c4: Conv2d<S>,
}

pub struct Enc2dCache<S: Scalar> {
    c1: Conv2dCache<S>,
    c2: Conv2dCache<S>,
    c3: Conv2dCache<S>,
    c4: Conv2dCache<S>,
}

impl<S: Scalar> Enc2d<S> {
    fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let lr = Some(Activation::LeakyRelu);
        let out = cfg.channels[0] * cfg.volume_depth;
        Enc2d {
            c1: Conv2d::new("enc2d.c1", 3, 16, 3, 2, lr, rng),
            c2: Conv2d::new("enc2d.c2", 16, 32, 3, 2, lr, rng),
            c3: Conv2d::new("enc2d.c3", 32, 64, 3, 1, lr, rng),
            c4: Conv2d::new("enc2d.c4", 64, out, 1, 1, None, rng),
        }
    }

    fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Enc2dCache<S>)> {
        let (y1, c1) = self.c1.forward(x)?;
        let (y2, c2) = self.c2.forward(&y1)?;
        let (y3, c3) = self.c3.forward(&y2)?;
        let (y4, c4) = self.c4.forward(&y3)?;
        Ok((y4, Enc2dCache { c1, c2, c3, c4 }))
    }

    fn backward(&mut self, cache: &Enc2dCache<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let g3 = self.c4.backward(&cache.c4, grad)?;
        let g2 = self.c3.backward(&cache.c3, &g3)?;
        let g1 = self.c2.backward(&cache.c2, &g2)?;
        self.c1.backward(&cache.c1, &g1)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.c1.visit_params(f);
        self.c2.visit_params(f);
        self.c3.visit_params(f);
        self.c4.visit_params(f);
    }
}

// ---------------------------------------------------------------------------
// Enc3D: one volume per resolution, depth fixed, spatial extents halved
// ---------------------------------------------------------------------------

pub struct Enc3d<S: Scalar> {
    levels: Vec<Conv3d<S>>,
}

pub struct Enc3dCache<S: Scalar> {
    levels: Vec<Conv3dCache<S>>,
}

impl<S: Scalar> Enc3d<S> {
    fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let lr = Some(Activation::LeakyRelu);
        let mut levels = Vec::with_capacity(cfg.levels);
        levels.push(Conv3d::new(
            "enc3d.l0",
            cfg.channels[0],
            cfg.channels[0],
            [1, 3, 3],
            [1, 1, 1],
            lr,
            rng,
        ));
        for i in 1..cfg.levels {
            levels.push(Conv3d::new(
                &format!("enc3d.l{i}"),
                cfg.channels[i - 1],
                cfg.channels[i],
                [3, 3, 3],
                [1, 2, 2],
                lr,
                rng,
            ));
        }
        Enc3d { levels }
    }

    fn forward(&self, folded: &Tensor<S>) -> Result<(Vec<FeatureVolume<S>>, Enc3dCache<S>)> {
        let mut out = Vec::with_capacity(self.levels.len());
        let mut caches = Vec::with_capacity(self.levels.len());
        let mut x = folded.clone();
        for layer in &self.levels {
            let (y, c) = layer.forward(&x)?;
            caches.push(c);
            out.push(FeatureVolume::new(y.clone())?);
            x = y;
        }
        Ok((out, Enc3dCache { levels: caches }))
    }

    /// `grads` carries one optional gradient per level.
    fn backward(&mut self, cache: &Enc3dCache<S>, grads: Vec<Option<Tensor<S>>>) -> Result<Tensor<S>> {
        let m = self.levels.len();
        assert_eq!(grads.len(), m);
        let mut acc: Option<Tensor<S>> = None;
        for i in (0..m).rev() {
            let g = match (grads[i].clone(), acc.take()) {
                (Some(mut g), Some(a)) => {
                    g.add_assign(&a)?;
                    g
                }
                (Some(g), None) => g,
                (None, Some(a)) => a,
                (None, None) => continue,
            };
            acc = Some(self.levels[i].backward(&cache.levels[i], &g)?);
        }
        acc.ok_or_else(|| Error::invalid("encoder backward needs at least one level gradient"))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        for l in &mut self.levels {
            l.visit_params(f);
        }
    }
}

// ---------------------------------------------------------------------------
// Dec3D: coarse-to-fine with warped skip connections
// ---------------------------------------------------------------------------

pub struct Dec3d<S: Scalar> {
    /// stage_convs[i] consumes the features at level i; index m-1 is the
    /// entry stage, index 0 the output stage.
    stage_convs: Vec<Conv3d<S>>,
    up: Upsample2x<3>,
}

pub struct Dec3dCache<S: Scalar> {
    convs: Vec<Option<Conv3dCache<S>>>,
    up_shapes: Vec<Vec<usize>>,
    concat_splits: Vec<[usize; 2]>,
}

impl<S: Scalar> Dec3d<S> {
    fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let lr = Some(Activation::LeakyRelu);
        let m = cfg.levels;
        let ch = &cfg.channels;
        let mut stage_convs = Vec::with_capacity(m);
        let c0_in = if m == 1 { ch[0] } else { 2 * ch[0] };
        stage_convs.push(Conv3d::new(
            "dec3d.s0",
            c0_in,
            ch[0],
            [1, 3, 3],
            [1, 1, 1],
            lr,
            rng,
        ));
        for i in 1..m {
            let cin = if i == m - 1 { ch[i] } else { 2 * ch[i] };
            stage_convs.push(Conv3d::new(
                &format!("dec3d.s{i}"),
                cin,
                ch[i - 1],
                [3, 3, 3],
                [1, 1, 1],
                lr,
                rng,
            ));
        }
        Dec3d {
            stage_convs,
            up: Upsample2x::<3>,
        }
    }

    /// `warped` is finest-first; every level must carry its configured
    /// channel count.
    fn forward(&self, warped: &[FeatureVolume<S>]) -> Result<(Tensor<S>, Dec3dCache<S>)> {
        let m = self.stage_convs.len();
        if warped.len() != m {
            return Err(Error::shape(
                format!("{m} bottleneck levels"),
                format!("{}", warped.len()),
            ));
        }
        let mut convs: Vec<Option<Conv3dCache<S>>> = (0..m).map(|_| None).collect();
        let mut up_shapes = Vec::new();
        let mut concat_splits = Vec::new();
        let mut x = warped[m - 1].tensor.clone();
        for i in (1..m).rev() {
            let (y, c) = self.stage_convs[i].forward(&x)?;
            convs[i] = Some(c);
            let (u, shape) = self.up.forward(&y)?;
            up_shapes.push(shape);
            concat_splits.push([u.shape()[0], warped[i - 1].tensor.shape()[0]]);
            x = concat_channels(&[&u, &warped[i - 1].tensor])?;
        }
        let (y, c) = self.stage_convs[0].forward(&x)?;
        convs[0] = Some(c);
        Ok((
            y,
            Dec3dCache {
                convs,
                up_shapes,
                concat_splits,
            },
        ))
    }

    /// Returns gradients w.r.t. every warped level, finest first.
    fn backward(&mut self, cache: &Dec3dCache<S>, grad: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let m = self.stage_convs.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..m).map(|_| None).collect();
        let mut g = self.stage_convs[0].backward(cache.convs[0].as_ref().unwrap(), grad)?;
        for (step, i) in (1..m).enumerate() {
            // undo, in reverse, the concat -> up -> conv chain of level i
            let idx = cache.concat_splits.len() - 1 - step;
            let parts = split_channels(&g, &cache.concat_splits[idx])?;
            grads[i - 1] = Some(parts[1].clone());
            let gu = self.up.backward(&cache.up_shapes[idx], &parts[0])?;
            g = self.stage_convs[i].backward(cache.convs[i].as_ref().unwrap(), &gu)?;
        }
        grads[m - 1] = Some(g);
        Ok(grads.into_iter().map(|g| g.unwrap()).collect())
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        for c in &mut self.stage_convs {
            c.visit_params(f);
        }
    }
}

// ---------------------------------------------------------------------------
// Dec2D
// ---------------------------------------------------------------------------

pub struct Dec2d<S: Scalar> {
    c1: Conv2d<S>,
    c2: Conv2d<S>,
    c3: Conv2d<S>,
    c4: Conv2d<S>,
    c5: Conv2d<S>,
    up: Upsample2x<2>,
}

pub struct Dec2dCache<S: Scalar> {
    vol_shape: Vec<usize>,
    c1: Conv2dCache<S>,
    c2: Conv2dCache<S>,
    c3: Conv2dCache<S>,
    c4: Conv2dCache<S>,
    c5: Conv2dCache<S>,
    up1_shape: Vec<usize>,
    up2_shape: Vec<usize>,
}

impl<S: Scalar> Dec2d<S> {
    fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let lr = Some(Activation::LeakyRelu);
        let cin = cfg.channels[0] * cfg.volume_depth;
        Dec2d {
            c1: Conv2d::new("dec2d.c1", cin, 32, 1, 1, lr, rng),
            c2: Conv2d::new("dec2d.c2", 32, 32, 3, 1, lr, rng),
            c3: Conv2d::new("dec2d.c3", 32, 16, 3, 1, lr, rng),
            c4: Conv2d::new("dec2d.c4", 16, 8, 3, 1, lr, rng),
            c5: Conv2d::new("dec2d.c5", 8, 3, 3, 1, Some(Activation::Tanh), rng),
            up: Upsample2x::<2>,
        }
    }

    fn forward(&self, volume: &Tensor<S>) -> Result<(Tensor<S>, Dec2dCache<S>)> {
        let flat = unfold_3d_to_2d(volume)?;
        let (y1, c1) = self.c1.forward(&flat)?;
        let (y2, c2) = self.c2.forward(&y1)?;
        let (u1, up1_shape) = self.up.forward(&y2)?;
        let (y3, c3) = self.c3.forward(&u1)?;
        let (u2, up2_shape) = self.up.forward(&y3)?;
        let (y4, c4) = self.c4.forward(&u2)?;
        let (y5, c5) = self.c5.forward(&y4)?;
        Ok((
            y5,
            Dec2dCache {
                vol_shape: volume.shape().to_vec(),
                c1,
                c2,
                c3,
                c4,
                c5,
                up1_shape,
                up2_shape,
            },
        ))
    }

    fn backward(&mut self, cache: &Dec2dCache<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let g4 = self.c5.backward(&cache.c5, grad)?;
        let g_u2 = self.c4.backward(&cache.c4, &g4)?;
        let g3 = self.up.backward(&cache.up2_shape, &g_u2)?;
        let g_u1 = self.c3.backward(&cache.c3, &g3)?;
        let g2 = self.up.backward(&cache.up1_shape, &g_u1)?;
        let g1 = self.c2.backward(&cache.c2, &g2)?;
        let g_flat = self.c1.backward(&cache.c1, &g1)?;
        g_flat.reshape(&cache.vol_shape)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.c1.visit_params(f);
        self.c2.visit_params(f);
        self.c3.visit_params(f);
        self.c4.visit_params(f);
        self.c5.visit_params(f);
    }
}

// ---------------------------------------------------------------------------
// Occupancy decoder and depth projection
// ---------------------------------------------------------------------------

/// Alpha-composite per-cell occupancies along depth:
/// `w(h,w) = 1 - prod_d (1 - o(d,h,w))`.
pub fn occupancy_project<S: Scalar>(o: &Tensor<S>) -> Result<Tensor<S>> {
    let (d, h, w) = match *o.shape() {
        [d, h, w] => (d, h, w),
        _ => return Err(Error::shape("[D, H, W]", format!("{:?}", o.shape()))),
    };
    let mut out = Tensor::zeros(&[h, w]);
    let od = o.data();
    let data = out.data_mut();
    for hw in 0..h * w {
        let mut transparent = S::one();
        for zd in 0..d {
            transparent = transparent * (S::one() - od[zd * h * w + hw]);
        }
        data[hw] = S::one() - transparent;
    }
    Ok(out)
}

/// `dw/do_k = prod_{d != k} (1 - o_d)`, via prefix/suffix products.
pub fn occupancy_project_backward<S: Scalar>(o: &Tensor<S>, grad_w: &Tensor<S>) -> Result<Tensor<S>> {
    let (d, h, w) = match *o.shape() {
        [d, h, w] => (d, h, w),
        _ => return Err(Error::shape("[D, H, W]", format!("{:?}", o.shape()))),
    };
    if grad_w.shape() != [h, w] {
        return Err(Error::shape(
            format!("[{h}, {w}]"),
            format!("{:?}", grad_w.shape()),
        ));
    }
    let mut grad_o = Tensor::zeros(o.shape());
    let od = o.data();
    let gw = grad_w.data();
    let g = grad_o.data_mut();
    let mut prefix = vec![S::one(); d + 1];
    let mut suffix = vec![S::one(); d + 1];
    for hw in 0..h * w {
        for zd in 0..d {
            prefix[zd + 1] = prefix[zd] * (S::one() - od[zd * h * w + hw]);
        }
        suffix[d] = S::one();
        for zd in (0..d).rev() {
            suffix[zd] = suffix[zd + 1] * (S::one() - od[zd * h * w + hw]);
        }
        for zd in 0..d {
            g[zd * h * w + hw] = gw[hw] * prefix[zd] * suffix[zd + 1];
        }
    }
    Ok(grad_o)
}

pub struct OccDec<S: Scalar> {
    c1: Conv3d<S>,
    head: Conv3d<S>,
}

pub struct OccCache<S: Scalar> {
    c1: Conv3dCache<S>,
    head: Conv3dCache<S>,
    o: Tensor<S>,
}

impl<S: Scalar> OccDec<S> {
    fn new(level: usize, cin: usize, rng: &mut impl Rng) -> Self {
        OccDec {
            c1: Conv3d::new(
                &format!("occ{level}.c1"),
                cin,
                4,
                [1, 3, 3],
                [1, 1, 1],
                Some(Activation::LeakyRelu),
                rng,
            ),
            head: Conv3d::new(
                &format!("occ{level}.head"),
                4,
                1,
                [1, 1, 1],
                [1, 1, 1],
                Some(Activation::Sigmoid),
                rng,
            ),
        }
    }

    /// Returns the occupancy volume `o` in (0,1) and the projected 2D mask.
    pub fn forward(&self, vol: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>, OccCache<S>)> {
        let (y1, c1) = self.c1.forward(vol)?;
        let (o_raw, head) = self.head.forward(&y1)?;
        let s = o_raw.shape().to_vec();
        let o = o_raw.reshape(&[s[1], s[2], s[3]])?;
        let mask = occupancy_project(&o)?;
        Ok((
            o.clone(),
            mask,
            OccCache { c1, head, o },
        ))
    }

    /// Backpropagate gradients arriving at the projected mask (and
    /// optionally directly at `o`); returns the gradient w.r.t. the input
    /// volume.
    pub fn backward(
        &mut self,
        cache: &OccCache<S>,
        grad_mask: Option<&Tensor<S>>,
        grad_o: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        let mut g_o = match grad_mask {
            Some(gm) => occupancy_project_backward(&cache.o, gm)?,
            None => Tensor::zeros(cache.o.shape()),
        };
        if let Some(go) = grad_o {
            g_o.add_assign(go)?;
        }
        let s = g_o.shape().to_vec();
        let g_raw = g_o.reshape(&[1, s[0], s[1], s[2]])?;
        let g1 = self.head.backward(&cache.head, &g_raw)?;
        self.c1.backward(&cache.c1, &g1)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.c1.visit_params(f);
        self.head.visit_params(f);
    }
}

// ---------------------------------------------------------------------------
// Background network
// ---------------------------------------------------------------------------

pub struct BgNet<S: Scalar> {
    c1: Conv2d<S>,
    c2: Conv2d<S>,
    c3: Conv2d<S>,
    up: Upsample2x<2>,
}

pub struct BgCache<S: Scalar> {
    c1: Conv2dCache<S>,
    c2: Conv2dCache<S>,
    c3: Conv2dCache<S>,
    up_shape: Vec<usize>,
}

impl<S: Scalar> BgNet<S> {
    fn new(rng: &mut impl Rng) -> Self {
        let lr = Some(Activation::LeakyRelu);
        BgNet {
            c1: Conv2d::new("bg.c1", 3, 8, 3, 2, lr, rng),
            c2: Conv2d::new("bg.c2", 8, 16, 3, 1, lr, rng),
            c3: Conv2d::new("bg.c3", 16, 3, 3, 1, Some(Activation::Tanh), rng),
            up: Upsample2x::<2>,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, BgCache<S>)> {
        let (y1, c1) = self.c1.forward(x)?;
        let (y2, c2) = self.c2.forward(&y1)?;
        let (u, up_shape) = self.up.forward(&y2)?;
        let (y3, c3) = self.c3.forward(&u)?;
        Ok((
            y3,
            BgCache {
                c1,
                c2,
                c3,
                up_shape,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BgCache<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let g_u = self.c3.backward(&cache.c3, grad)?;
        let g2 = self.up.backward(&cache.up_shape, &g_u)?;
        let g1 = self.c2.backward(&cache.c2, &g2)?;
        self.c1.backward(&cache.c1, &g1)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.c1.visit_params(f);
        self.c2.visit_params(f);
        self.c3.visit_params(f);
    }
}

// ---------------------------------------------------------------------------
// Frozen random perceptual feature extractor
// ---------------------------------------------------------------------------

pub struct PerceptualNet<S: Scalar> {
    c1: Conv2d<S>,
    c2: Conv2d<S>,
    c3: Conv2d<S>,
}

pub struct PerceptualCache<S: Scalar> {
    c1: Conv2dCache<S>,
    c2: Conv2dCache<S>,
    c3: Conv2dCache<S>,
}

impl<S: Scalar> PerceptualNet<S> {
    fn new(rng: &mut impl Rng) -> Self {
        let lr = Some(Activation::LeakyRelu);
        PerceptualNet {
            c1: Conv2d::new("per.c1", 3, 16, 3, 2, lr, rng),
            c2: Conv2d::new("per.c2", 16, 32, 3, 2, lr, rng),
            c3: Conv2d::new("per.c3", 32, 64, 3, 2, lr, rng),
        }
    }

    pub fn forward(&self, img: &Tensor<S>) -> Result<([Tensor<S>; 3], PerceptualCache<S>)> {
        let (y1, c1) = self.c1.forward(img)?;
        let (y2, c2) = self.c2.forward(&y1)?;
        let (y3, c3) = self.c3.forward(&y2)?;
        Ok(([y1, y2, y3], PerceptualCache { c1, c2, c3 }))
    }

    /// Weights never train: only the image gradient is produced.
    pub fn backward_data(
        &self,
        cache: &PerceptualCache<S>,
        grad_stages: [&Tensor<S>; 3],
    ) -> Result<Tensor<S>> {
        let mut g2 = self.c3.backward_data(&cache.c3, grad_stages[2])?;
        g2.add_assign(grad_stages[1])?;
        let mut g1 = self.c2.backward_data(&cache.c2, &g2)?;
        g1.add_assign(grad_stages[0])?;
        self.c1.backward_data(&cache.c1, &g1)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.c1.visit_params(f);
        self.c2.visit_params(f);
        self.c3.visit_params(f);
    }
}

// ---------------------------------------------------------------------------
// Discriminators
// ---------------------------------------------------------------------------

pub struct PatchDisc<S: Scalar> {
    c1: Conv2d<S>,
    c2: Conv2d<S>,
    c3: Conv2d<S>,
    head: Conv2d<S>,
}

pub struct PatchDiscCache<S: Scalar> {
    c1: Conv2dCache<S>,
    c2: Conv2dCache<S>,
    c3: Conv2dCache<S>,
    head: Conv2dCache<S>,
}

impl<S: Scalar> PatchDisc<S> {
    fn new(name: &str, cin: usize, rng: &mut impl Rng) -> Self {
        let lr = Some(Activation::LeakyRelu);
        PatchDisc {
            c1: Conv2d::new(&format!("{name}.c1"), cin, 12, 3, 2, lr, rng),
            c2: Conv2d::new(&format!("{name}.c2"), 12, 24, 3, 2, lr, rng),
            c3: Conv2d::new(&format!("{name}.c3"), 24, 48, 3, 2, lr, rng),
            head: Conv2d::new(&format!("{name}.head"), 48, 1, 3, 1, None, rng),
        }
    }

    fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, PatchDiscCache<S>)> {
        let (y1, c1) = self.c1.forward(x)?;
        let (y2, c2) = self.c2.forward(&y1)?;
        let (y3, c3) = self.c3.forward(&y2)?;
        let (score, head) = self.head.forward(&y3)?;
        Ok((score, PatchDiscCache { c1, c2, c3, head }))
    }

    fn backward(&mut self, cache: &PatchDiscCache<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let g3 = self.head.backward(&cache.head, grad)?;
        let g2 = self.c3.backward(&cache.c3, &g3)?;
        let g1 = self.c2.backward(&cache.c2, &g2)?;
        self.c1.backward(&cache.c1, &g1)
    }

    fn backward_data(&self, cache: &PatchDiscCache<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let g3 = self.head.backward_data(&cache.head, grad)?;
        let g2 = self.c3.backward_data(&cache.c3, &g3)?;
        let g1 = self.c2.backward_data(&cache.c2, &g2)?;
        self.c1.backward_data(&cache.c1, &g1)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.c1.visit_params(f);
        self.c2.visit_params(f);
        self.c3.visit_params(f);
        self.head.visit_params(f);
    }
}

/// Conditional patch discriminator scoring the channel concatenation of
/// condition and image at full and half resolution.
pub struct MultiScaleDisc<S: Scalar> {
    pub full: PatchDisc<S>,
    pub half: PatchDisc<S>,
    cond_channels: usize,
}

pub struct MultiScaleDiscCache<S: Scalar> {
    full: PatchDiscCache<S>,
    half: PatchDiscCache<S>,
    input_shape: Vec<usize>,
    cond_channels: usize,
}

impl<S: Scalar> MultiScaleDisc<S> {
    fn new(name: &str, cond_channels: usize, rng: &mut impl Rng) -> Self {
        MultiScaleDisc {
            full: PatchDisc::new(&format!("{name}.full"), cond_channels + 3, rng),
            half: PatchDisc::new(&format!("{name}.half"), cond_channels + 3, rng),
            cond_channels,
        }
    }

    /// Raw (pre-sigmoid) patch score maps at two scales.
    pub fn forward(
        &self,
        cond: &Tensor<S>,
        image: &Tensor<S>,
    ) -> Result<([Tensor<S>; 2], MultiScaleDiscCache<S>)> {
        if cond.shape()[0] != self.cond_channels {
            return Err(Error::shape(
                format!("condition with {} channels", self.cond_channels),
                format!("{:?}", cond.shape()),
            ));
        }
        if image.shape().len() != 3 || image.shape()[0] != 3 {
            return Err(Error::shape("[3, H, W]", format!("{:?}", image.shape())));
        }
        let x = concat_channels(&[cond, image])?;
        let x_half = downsample2x(&x, 2)?;
        let (s_full, full) = self.full.forward(&x)?;
        let (s_half, half) = self.half.forward(&x_half)?;
        Ok((
            [s_full, s_half],
            MultiScaleDiscCache {
                full,
                half,
                input_shape: x.shape().to_vec(),
                cond_channels: self.cond_channels,
            },
        ))
    }

    /// Discriminator-side backward: accumulates parameter gradients.
    pub fn backward(
        &mut self,
        cache: &MultiScaleDiscCache<S>,
        grad_scores: [&Tensor<S>; 2],
    ) -> Result<()> {
        self.full.backward(&cache.full, grad_scores[0])?;
        self.half.backward(&cache.half, grad_scores[1])?;
        Ok(())
    }

    /// Generator-side backward: parameters untouched, returns the gradient
    /// w.r.t. the image portion of the input.
    pub fn backward_image(
        &self,
        cache: &MultiScaleDiscCache<S>,
        grad_scores: [&Tensor<S>; 2],
    ) -> Result<Tensor<S>> {
        let mut gx = self.full.backward_data(&cache.full, grad_scores[0])?;
        let gx_half = self.half.backward_data(&cache.half, grad_scores[1])?;
        gx.add_assign(&downsample2x_backward(&gx_half, &cache.input_shape, 2)?)?;
        let parts = split_channels(&gx, &[cache.cond_channels, 3])?;
        Ok(parts.into_iter().nth(1).expect("image gradient"))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.full.visit_params(f);
        self.half.visit_params(f);
    }
}

/// The three conditional discriminators.
pub struct Discriminators<S: Scalar> {
    pub fg: MultiScaleDisc<S>,
    pub bg: MultiScaleDisc<S>,
    pub rot: MultiScaleDisc<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscKind {
    Fg,
    Bg,
    Rot,
}

impl<S: Scalar> Discriminators<S> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        Discriminators {
            fg: MultiScaleDisc::new("d_fg", cfg.keypoints, rng),
            bg: MultiScaleDisc::new("d_bg", cfg.keypoints, rng),
            rot: MultiScaleDisc::new("d_rot", 3, rng),
        }
    }

    pub fn kind(&self, kind: DiscKind) -> &MultiScaleDisc<S> {
        match kind {
            DiscKind::Fg => &self.fg,
            DiscKind::Bg => &self.bg,
            DiscKind::Rot => &self.rot,
        }
    }

    pub fn kind_mut(&mut self, kind: DiscKind) -> &mut MultiScaleDisc<S> {
        match kind {
            DiscKind::Fg => &mut self.fg,
            DiscKind::Bg => &mut self.bg,
            DiscKind::Rot => &mut self.rot,
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.fg.visit_params(f);
        self.bg.visit_params(f);
        self.rot.visit_params(f);
    }
}

// ---------------------------------------------------------------------------
// Compositing
// ---------------------------------------------------------------------------

/// `y = w * y_fg + (1 - w) * y_bg` per pixel per channel. `w` must lie in
/// `[0, 1]`.
pub fn composite<S: Scalar>(
    y_fg: &Tensor<S>,
    y_bg: &Tensor<S>,
    w: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (c, h, wd) = match *y_fg.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("[C, H, W]", format!("{:?}", y_fg.shape()))),
    };
    if y_bg.shape() != y_fg.shape() {
        return Err(Error::shape(
            format!("{:?}", y_fg.shape()),
            format!("{:?}", y_bg.shape()),
        ));
    }
    if w.shape() != [h, wd] {
        return Err(Error::shape(format!("[{h}, {wd}]"), format!("{:?}", w.shape())));
    }
    if w.data().iter().any(|&v| v < S::zero() || v > S::one()) {
        return Err(Error::invalid("confidence map outside [0, 1]"));
    }
    let mut out = Tensor::zeros(y_fg.shape());
    let (fg, bg, wm) = (y_fg.data(), y_bg.data(), w.data());
    let od = out.data_mut();
    for ch in 0..c {
        let base = ch * h * wd;
        for i in 0..h * wd {
            od[base + i] = wm[i] * fg[base + i] + (S::one() - wm[i]) * bg[base + i];
        }
    }
    Ok(out)
}

/// Gradients of `composite` w.r.t. foreground, background and mask.
pub fn composite_backward<S: Scalar>(
    grad: &Tensor<S>,
    y_fg: &Tensor<S>,
    y_bg: &Tensor<S>,
    w: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (c, h, wd) = (y_fg.shape()[0], y_fg.shape()[1], y_fg.shape()[2]);
    let mut g_fg = Tensor::zeros(y_fg.shape());
    let mut g_bg = Tensor::zeros(y_bg.shape());
    let mut g_w = Tensor::zeros(w.shape());
    let (fg, bg, wm, gd) = (y_fg.data(), y_bg.data(), w.data(), grad.data());
    {
        let (gf, gb, gw) = (g_fg.data_mut(), g_bg.data_mut(), g_w.data_mut());
        for ch in 0..c {
            let base = ch * h * wd;
            for i in 0..h * wd {
                let g = gd[base + i];
                gf[base + i] = g * wm[i];
                gb[base + i] = g * (S::one() - wm[i]);
                gw[i] += g * (fg[base + i] - bg[base + i]);
            }
        }
    }
    Ok((g_fg, g_bg, g_w))
}

// ---------------------------------------------------------------------------
// Generator bundle and full synthesis
// ---------------------------------------------------------------------------

pub struct Generator<S: Scalar> {
    pub enc2d: Enc2d<S>,
    pub enc3d: Enc3d<S>,
    pub dec3d: Dec3d<S>,
    pub dec2d: Dec2d<S>,
    pub occ: Vec<OccDec<S>>,
    pub flow: FlowNet<S>,
    pub bg: BgNet<S>,
    pub perceptual: PerceptualNet<S>,
    pub cfg: NetConfig,
    /// Warp the finer skip levels by the predicted flow (ablation switch).
    pub warp_skips: bool,
}

pub struct EncodeCache<S: Scalar> {
    pub e2d: Enc2dCache<S>,
    pub e3d: Enc3dCache<S>,
    pub folded_shape: Vec<usize>,
}

pub struct DecodeCache<S: Scalar> {
    pub d3: Dec3dCache<S>,
    pub d2: Dec2dCache<S>,
}

impl<S: Scalar> Generator<S> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let enc2d = Enc2d::new(cfg, rng);
        let enc3d = Enc3d::new(cfg, rng);
        let dec3d = Dec3d::new(cfg, rng);
        let dec2d = Dec2d::new(cfg, rng);
        let occ = (0..cfg.levels)
            .map(|i| OccDec::new(i, cfg.channels[i], rng))
            .collect();
        let flow = FlowNet::new(cfg, rng);
        let bg = BgNet::new(rng);
        let perceptual = PerceptualNet::new(rng);
        Generator {
            enc2d,
            enc3d,
            dec3d,
            dec2d,
            occ,
            flow,
            bg,
            perceptual,
            cfg: cfg.clone(),
            warp_skips: true,
        }
    }

    /// Encode a foreground image into the multi-resolution bottleneck.
    pub fn encode(&self, x_fg: &Tensor<S>) -> Result<(Vec<FeatureVolume<S>>, EncodeCache<S>)> {
        let r = self.cfg.resolution;
        if x_fg.shape() != [3, r, r] {
            return Err(Error::shape(
                format!("[3, {r}, {r}]"),
                format!("{:?}", x_fg.shape()),
            ));
        }
        let (flat, e2d) = self.enc2d.forward(x_fg)?;
        let folded = fold_2d_to_3d(&flat, self.cfg.volume_depth)?;
        let folded_shape = folded.shape().to_vec();
        let (levels, e3d) = self.enc3d.forward(&folded)?;
        Ok((
            levels,
            EncodeCache {
                e2d,
                e3d,
                folded_shape,
            },
        ))
    }

    /// Backward through the encoder given per-level volume gradients.
    pub fn encode_backward(
        &mut self,
        cache: &EncodeCache<S>,
        grads: Vec<Option<Tensor<S>>>,
    ) -> Result<Tensor<S>> {
        let g_folded = self.enc3d.backward(&cache.e3d, grads)?;
        let g_flat = unfold_3d_to_2d(&g_folded)?;
        self.enc2d.backward(&cache.e2d, &g_flat)
    }

    /// Decode warped bottleneck levels into a foreground image in [-1, 1].
    pub fn decode(&self, warped: &[FeatureVolume<S>]) -> Result<(Tensor<S>, DecodeCache<S>)> {
        let (feats, d3) = self.dec3d.forward(warped)?;
        let (img, d2) = self.dec2d.forward(&feats)?;
        Ok((img, DecodeCache { d3, d2 }))
    }

    /// Backward through the decoder; returns gradients per warped level.
    pub fn decode_backward(
        &mut self,
        cache: &DecodeCache<S>,
        grad_img: &Tensor<S>,
    ) -> Result<Vec<Tensor<S>>> {
        let g_feats = self.dec2d.backward(&cache.d2, grad_img)?;
        self.dec3d.backward(&cache.d3, &g_feats)
    }

    /// Upsample a bottleneck-resolution mask to image resolution.
    pub fn upsample_mask(&self, mask: &Tensor<S>) -> Result<(Tensor<S>, Vec<Vec<usize>>)> {
        let mut m = mask.clone();
        let mut shapes = Vec::new();
        while m.shape()[0] < self.cfg.resolution {
            shapes.push(m.shape().to_vec());
            m = crate::kernels::upsample2x(&m, 2)?;
        }
        Ok((m, shapes))
    }

    pub fn upsample_mask_backward(
        &self,
        shapes: &[Vec<usize>],
        grad: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let mut g = grad.clone();
        for shape in shapes.iter().rev() {
            g = crate::kernels::upsample2x_backward(&g, shape, 2)?;
        }
        Ok(g)
    }

    /// Per-level warp flows for a base flow, honoring the skip-warp switch.
    pub fn level_flows(&self, base: &FlowField<S>) -> Result<Vec<FlowField<S>>> {
        let mut flows = flows_for_resolutions(base, self.cfg.levels)?;
        if !self.warp_skips {
            // finer skip levels pass through unwarped; the entry (coarsest)
            // level keeps the pose flow
            for (i, f) in flows.iter_mut().enumerate() {
                if i + 1 < self.cfg.levels {
                    let [d, h, w] = self.cfg.warp_extents(i);
                    *f = crate::volwarp::identity_flow(d, h, w);
                }
            }
        }
        Ok(flows)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        self.enc2d.visit_params(f);
        self.enc3d.visit_params(f);
        self.dec3d.visit_params(f);
        self.dec2d.visit_params(f);
        for o in &mut self.occ {
            o.visit_params(f);
        }
        self.flow.visit_params(f);
        self.bg.visit_params(f);
        self.perceptual.visit_params(f);
    }

    /// Full inference path: encode references, aggregate into the first
    /// reference's pose, warp to the target pose (optionally composed with a
    /// rigid rotation), decode, and composite over the estimated background.
    pub fn synthesize(
        &self,
        refs_fg: &[Tensor<S>],
        ref_poses: &[Pose],
        target_pose: &Pose,
        rotation_deg: Option<f64>,
        ref_full: &Tensor<S>,
    ) -> Result<SynthesisResult<S>> {
        if refs_fg.is_empty() {
            return Err(Error::invalid("synthesize needs at least one reference"));
        }
        if refs_fg.len() != ref_poses.len() {
            return Err(Error::invalid(format!(
                "got {} reference images but {} poses",
                refs_fg.len(),
                ref_poses.len()
            )));
        }
        let m = self.cfg.levels;

        // encode every reference
        let mut per_ref: Vec<Vec<FeatureVolume<S>>> = Vec::with_capacity(refs_fg.len());
        for x in refs_fg {
            let (levels, _) = self.encode(x)?;
            per_ref.push(levels);
        }

        // aggregate into the canonical (first reference) pose
        let agg: Vec<FeatureVolume<S>> = if refs_fg.len() == 1 {
            per_ref.pop().expect("one reference")
        } else {
            let mut base_flows = Vec::new();
            for j in 1..refs_fg.len() {
                let (fl, _) = self.flow.forward(&refs_fg[j], &ref_poses[j], &ref_poses[0])?;
                base_flows.push(fl);
            }
            let mut agg = Vec::with_capacity(m);
            for i in 0..m {
                let vols: Vec<FeatureVolume<S>> =
                    per_ref.iter().map(|r| r[i].clone()).collect();
                let extents = vols[0].extents();
                let flows: Vec<FlowField<S>> = base_flows
                    .iter()
                    .map(|f| flow_at_extents(f, extents))
                    .collect();
                agg.push(aggregate(&vols, &flows)?);
            }
            agg
        };

        // target warp, optionally composed with a rigid rotation
        let (mut base, _) = self.flow.forward(&refs_fg[0], &ref_poses[0], target_pose)?;
        if let Some(theta) = rotation_deg {
            let [d, h, w] = self.cfg.base_grid();
            base = crate::volwarp::compose(&base, &rotation_flow(theta, d, h, w))?;
        }
        let flows = self.level_flows(&base)?;
        let warped: Vec<FeatureVolume<S>> = agg
            .iter()
            .zip(&flows)
            .map(|(f, t)| resample(f, t))
            .collect();

        let (y_fg, _) = self.decode(&warped)?;
        let (_, mask0, _) = self.occ[0].forward(&warped[0].tensor)?;
        let (mask, _) = self.upsample_mask(&mask0)?;
        let (y_bg, _) = self.bg.forward(ref_full)?;
        let comp = composite(&y_fg, &y_bg, &mask)?;
        Ok(SynthesisResult {
            composite: comp,
            foreground: y_fg,
            background: y_bg,
            mask,
        })
    }
}

pub struct SynthesisResult<S: Scalar> {
    pub composite: Tensor<S>,
    pub foreground: Tensor<S>,
    pub background: Tensor<S>,
    pub mask: Tensor<S>,
}

/// Heatmap condition for the fg/bg discriminators at image resolution.
pub fn disc_condition<S: Scalar>(pose: &Pose, resolution: usize) -> Tensor<S> {
    pose_to_heatmaps(pose, resolution, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> NetConfig {
        NetConfig {
            resolution: 64,
            levels: 3,
            volume_depth: 16,
            channels: vec![8, 16, 32],
            keypoints: 12,
        }
    }

    fn tiny() -> NetConfig {
        NetConfig {
            resolution: 8,
            levels: 2,
            volume_depth: 4,
            channels: vec![2, 3],
            keypoints: 2,
        }
    }

    fn pose(seed: u64, k: usize) -> Pose {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Pose::new(
            (0..k)
                .map(|_| [rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7)])
                .collect(),
        )
    }

    #[test]
    fn encoder_produces_documented_shapes() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::<f32>::new(&cfg, &mut rng);
        let x = Tensor::<f32>::from_fn(&[3, 64, 64], |i| ((i[1] + i[2]) % 7) as f32 * 0.1 - 0.3);
        let (levels, _) = g.encode(&x).unwrap();
        assert_eq!(levels[0].tensor.shape(), &[8, 16, 16, 16]);
        assert_eq!(levels[1].tensor.shape(), &[16, 16, 8, 8]);
        assert_eq!(levels[2].tensor.shape(), &[32, 16, 4, 4]);
    }

    #[test]
    fn encoder_zero_image_zero_bias_gives_zero_volumes() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Generator::<f32>::new(&cfg, &mut rng);
        let x = Tensor::<f32>::zeros(&[3, 64, 64]);
        let (levels, _) = g.encode(&x).unwrap();
        for l in &levels {
            assert!(l.tensor.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoder_rejects_wrong_extents() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Generator::<f32>::new(&cfg, &mut rng);
        assert!(g.encode(&Tensor::<f32>::zeros(&[3, 32, 32])).is_err());
    }

    #[test]
    fn decode_output_matches_image_extents_and_range() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Generator::<f32>::new(&cfg, &mut rng);
        let x = Tensor::<f32>::from_fn(&[3, 64, 64], |i| (i[2] as f32 / 32.0) - 1.0);
        let (levels, _) = g.encode(&x).unwrap();
        // identity-warp onto the cube grids
        let flows = g
            .level_flows(&crate::volwarp::identity_flow(16, 16, 16))
            .unwrap();
        let warped: Vec<_> = levels.iter().zip(&flows).map(|(f, t)| resample(f, t)).collect();
        let (img, _) = g.decode(&warped).unwrap();
        assert_eq!(img.shape(), &[3, 64, 64]);
        assert!(img.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn decode_rejects_level_mismatch() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Generator::<f32>::new(&cfg, &mut rng);
        let one = FeatureVolume::new(Tensor::<f32>::zeros(&[32, 4, 4, 4])).unwrap();
        assert!(g.decode(&[one]).is_err());
    }

    #[test]
    fn occupancy_projection_closed_forms() {
        // o == 0 everywhere -> w == 0
        let o = Tensor::<f64>::zeros(&[3, 2, 2]);
        let w = occupancy_project(&o).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));

        // one opaque cell on a ray -> w == 1
        let mut o = Tensor::<f64>::zeros(&[3, 1, 1]);
        o.data_mut()[1] = 1.0;
        let w = occupancy_project(&o).unwrap();
        assert_eq!(w.data()[0], 1.0);

        // two half-occupied cells -> w = 1 - 0.5^2 = 0.75
        let mut o = Tensor::<f64>::zeros(&[2, 1, 1]);
        o.data_mut()[0] = 0.5;
        o.data_mut()[1] = 0.5;
        let w = occupancy_project(&o).unwrap();
        assert!((w.data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn occupancy_projection_is_monotone() {
        let mut s = 3u64;
        let mut lcg = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64)
        };
        let o = Tensor::<f64>::from_fn(&[4, 3, 3], |_| lcg() * 0.9);
        let w = occupancy_project(&o).unwrap();
        for k in 0..o.len() {
            let mut o2 = o.clone();
            o2.data_mut()[k] = (o2.data()[k] + 0.05).min(1.0);
            let w2 = occupancy_project(&o2).unwrap();
            for (a, b) in w2.data().iter().zip(w.data()) {
                assert!(a + 1e-12 >= *b, "increasing occupancy never decreases the mask");
            }
        }
    }

    #[test]
    fn occupancy_projection_gradcheck() {
        use crate::gradcheck::{grad_check, weighted_sum, FD_STEP};
        let o = Tensor::<f64>::from_fn(&[3, 2, 2], |i| 0.1 + 0.18 * (i[0] + i[1] + i[2]) as f64);
        let g = Tensor::<f64>::from_fn(&[2, 2], |i| 0.3 + 0.2 * i[0] as f64);
        let err = grad_check(
            &[o],
            |xs| Ok(weighted_sum(&occupancy_project(&xs[0])?, &g)),
            |xs| Ok(vec![occupancy_project_backward(&xs[0], &g)?]),
            FD_STEP,
        )
        .unwrap();
        assert!(err <= 1e-8, "occupancy projection grad check: {err}");
    }

    #[test]
    fn composite_identities() {
        let fg = Tensor::<f64>::from_fn(&[3, 2, 2], |i| i[0] as f64 * 0.3 - 0.2);
        let bg = Tensor::<f64>::from_fn(&[3, 2, 2], |i| 0.9 - i[2] as f64 * 0.4);
        let ones = Tensor::<f64>::full(&[2, 2], 1.0);
        let zeros = Tensor::<f64>::zeros(&[2, 2]);
        assert_eq!(composite(&fg, &bg, &ones).unwrap().data(), fg.data());
        assert_eq!(composite(&fg, &bg, &zeros).unwrap().data(), bg.data());
        let half = Tensor::<f64>::full(&[2, 2], 0.5);
        let fg1 = Tensor::<f64>::full(&[3, 2, 2], 1.0);
        let bg0 = Tensor::<f64>::zeros(&[3, 2, 2]);
        let c = composite(&fg1, &bg0, &half).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn composite_rejects_out_of_range_mask() {
        let fg = Tensor::<f64>::zeros(&[3, 2, 2]);
        let bg = Tensor::<f64>::zeros(&[3, 2, 2]);
        let w = Tensor::<f64>::full(&[2, 2], 1.5);
        assert!(composite(&fg, &bg, &w).is_err());
    }

    #[test]
    fn composite_exact_blend_in_f64() {
        let mut s = 9u64;
        let mut lcg = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64)
        };
        let fg = Tensor::<f64>::from_fn(&[3, 4, 4], |_| lcg() * 2.0 - 1.0);
        let bg = Tensor::<f64>::from_fn(&[3, 4, 4], |_| lcg() * 2.0 - 1.0);
        let w = Tensor::<f64>::from_fn(&[4, 4], |_| lcg());
        let c = composite(&fg, &bg, &w).unwrap();
        for ch in 0..3 {
            for i in 0..16 {
                let expect = w.data()[i] * fg.data()[ch * 16 + i]
                    + (1.0 - w.data()[i]) * bg.data()[ch * 16 + i];
                assert_eq!(c.data()[ch * 16 + i], expect, "0 ulp: same expression");
            }
        }
    }

    #[test]
    fn background_net_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Generator::<f32>::new(&cfg(), &mut rng);
        let x = Tensor::<f32>::from_fn(&[3, 64, 64], |i| (i[1] as f32 / 64.0) - 0.5);
        let (y, _) = g.bg.forward(&x).unwrap();
        assert_eq!(y.shape(), &[3, 64, 64]);
        assert!(y.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn discriminator_score_map_shapes() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Discriminators::<f32>::new(&cfg, &mut rng);
        let cond = disc_condition::<f32>(&pose(1, 12), 64);
        let img = Tensor::<f32>::from_fn(&[3, 64, 64], |i| (i[2] as f32 / 32.0) - 1.0);
        let (scores, _) = d.fg.forward(&cond, &img).unwrap();
        assert_eq!(scores[0].shape(), &[1, 8, 8]);
        assert_eq!(scores[1].shape(), &[1, 4, 4]);
    }

    #[test]
    fn discriminator_zero_head_gives_zero_scores() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut d = Discriminators::<f32>::new(&cfg, &mut rng);
        d.rot.full.head.w.value.fill(0.0);
        d.rot.half.head.w.value.fill(0.0);
        let condition = Tensor::<f32>::from_fn(&[3, 64, 64], |i| i[0] as f32 * 0.2);
        let img = Tensor::<f32>::from_fn(&[3, 64, 64], |i| 0.3 - i[1] as f32 * 0.01);
        let (scores, _) = d.rot.forward(&condition, &img).unwrap();
        assert!(scores[0].data().iter().all(|&v| v == 0.0));
        assert!(scores[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminator_rejects_condition_channel_mismatch() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Discriminators::<f32>::new(&cfg, &mut rng);
        let bad_cond = Tensor::<f32>::zeros(&[5, 64, 64]);
        let img = Tensor::<f32>::zeros(&[3, 64, 64]);
        assert!(d.fg.forward(&bad_cond, &img).is_err());
    }

    #[test]
    fn synthesize_zero_rotation_matches_plain_call() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = Generator::<f32>::new(&cfg, &mut rng);
        let x = Tensor::<f32>::from_fn(&[3, 8, 8], |i| ((i[1] * 8 + i[2]) % 5) as f32 * 0.1 - 0.2);
        let (p0, pt) = (pose(2, 2), pose(3, 2));
        let a = g
            .synthesize(&[x.clone()], &[p0.clone()], &pt, None, &x)
            .unwrap();
        let b = g
            .synthesize(&[x.clone()], &[p0], &pt, Some(0.0), &x)
            .unwrap();
        assert_eq!(a.composite.data(), b.composite.data(), "bit-exact");
        assert_eq!(a.mask.data(), b.mask.data());
    }

    #[test]
    fn synthesize_identical_refs_match_single_ref_with_fresh_flow() {
        // zero-init flow head means aggregation flows are exactly identity
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Generator::<f32>::new(&cfg, &mut rng);
        let x = Tensor::<f32>::from_fn(&[3, 8, 8], |i| (i[1] as f32 - 4.0) * 0.1);
        let p = pose(4, 2);
        let pt = pose(5, 2);
        let single = g.synthesize(&[x.clone()], &[p.clone()], &pt, None, &x).unwrap();
        let triple = g
            .synthesize(
                &[x.clone(), x.clone(), x.clone()],
                &[p.clone(), p.clone(), p.clone()],
                &pt,
                None,
                &x,
            )
            .unwrap();
        for (a, b) in single.composite.data().iter().zip(triple.composite.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn synthesize_with_zero_init_flow_equals_plain_autoencode() {
        // with an untrained flow the warp is the identity, so synthesis is
        // exactly decode(encode(x)) on the cube grids
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = Generator::<f32>::new(&cfg, &mut rng);
        let x = Tensor::<f32>::from_fn(&[3, 8, 8], |i| ((i[2] % 4) as f32) * 0.2 - 0.3);
        let p = pose(6, 2);
        let out = g
            .synthesize(&[x.clone()], &[p.clone()], &p, None, &x)
            .unwrap();
        let (levels, _) = g.encode(&x).unwrap();
        let flows = g
            .level_flows(&crate::volwarp::identity_flow(
                cfg.volume_depth,
                cfg.base_spatial(),
                cfg.base_spatial(),
            ))
            .unwrap();
        let warped: Vec<_> = levels.iter().zip(&flows).map(|(f, t)| resample(f, t)).collect();
        let (img, _) = g.decode(&warped).unwrap();
        assert_eq!(out.foreground.data(), img.data(), "bit-identical");
    }

    #[test]
    fn synthesize_rejects_empty_refs() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = Generator::<f32>::new(&cfg, &mut rng);
        let x = Tensor::<f32>::zeros(&[3, 8, 8]);
        assert!(g.synthesize(&[], &[], &pose(1, 2), None, &x).is_err());
    }
}
