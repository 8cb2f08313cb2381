//! Training loop and evaluation. One step draws a mini-batch of
//! (identity, reference frames, target frame) tuples, alternates one
//! discriminator update and one generator update over the full objective
//! (two adversarial image terms, a rotation adversarial branch, perceptual,
//! reconstruction and mask supervision), and logs every term.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::TrainState;

use crate::dataset::LoadedDataset;
use crate::error::{Error, Result};
use crate::kernels::downsample2x;
use crate::losses::{
    average_scales, disc_loss_scale, gen_loss_scale, l1_mean, l1_mean_backward, perceptual_pair,
    perceptual_pair_backward, total_loss, LossReport,
};
use crate::metrics::{mask_iou, psnr, ssim};
use crate::pipeline::{composite, composite_backward, disc_condition, DiscKind};
use crate::pose::Pose;
use crate::scalar::Scalar;
use crate::puppet::foreground_image;
use crate::tensor::Tensor;
use crate::volwarp::{
    aggregate, aggregate_backward, identity_flow, resample, resample_backward, rotation_flow,
    FeatureVolume, FlowField,
};
use crate::flownet::{
    flow_at_extents, flow_at_extents_backward, flows_for_resolutions,
    flows_for_resolutions_backward,
};

/// Everything drawn for one batch element before any network runs.
#[derive(Clone, Debug)]
struct ItemPlan {
    identity: usize,
    refs: Vec<usize>,
    target: usize,
    rotation_deg: f64,
}

/// Data tensors of one batch element.
struct ItemData {
    fg_refs: Vec<Tensor<f32>>,
    ref_poses: Vec<Pose>,
    full_ref0: Tensor<f32>,
    masks_refs: Vec<Tensor<f32>>,
    fg_target: Tensor<f32>,
    full_target: Tensor<f32>,
    target_pose: Pose,
}

fn gather_item(ds: &LoadedDataset, plan: &ItemPlan) -> ItemData {
    let id = plan.identity;
    let mut fg_refs = Vec::with_capacity(plan.refs.len());
    let mut ref_poses = Vec::with_capacity(plan.refs.len());
    let mut masks_refs = Vec::with_capacity(plan.refs.len());
    for &f in &plan.refs {
        let rgb = ds.frame_rgb(id, f);
        let mask = ds.frame_mask(id, f);
        fg_refs.push(foreground_image(&rgb, &mask));
        ref_poses.push(ds.identities[id].frames[f].pose.clone());
        masks_refs.push(mask);
    }
    let full_ref0 = ds.frame_rgb(id, plan.refs[0]);
    let rgb_t = ds.frame_rgb(id, plan.target);
    let mask_t = ds.frame_mask(id, plan.target);
    ItemData {
        fg_refs,
        ref_poses,
        full_ref0,
        masks_refs,
        fg_target: foreground_image(&rgb_t, &mask_t),
        full_target: rgb_t,
        target_pose: ds.identities[id].frames[plan.target].pose.clone(),
    }
}

/// Forward caches of one batch element's generator pass.
struct ItemForward {
    data: ItemData,
    rotation_deg: f64,
    enc_caches: Vec<crate::pipeline::EncodeCache<f32>>,
    ref_levels: Vec<Vec<FeatureVolume<f32>>>,
    // occupancy on every ref's encoder levels (mask loss)
    occ_ref_caches: Vec<Vec<crate::pipeline::OccCache<f32>>>,
    occ_ref_masks: Vec<Vec<Tensor<f32>>>,
    gt_pooled: Vec<Vec<Tensor<f32>>>,
    // aggregation
    agg_levels: Vec<FeatureVolume<f32>>,
    agg_flow_caches: Vec<crate::flownet::FlowNetCache<f32>>,
    agg_base_flows: Vec<FlowField<f32>>,
    agg_level_flows: Vec<Vec<FlowField<f32>>>, // [ref-1][level]
    // target warp
    flow_t_cache: crate::flownet::FlowNetCache<f32>,
    raw_flows_t: Vec<FlowField<f32>>, // unablated downsample chain
    flows_t: Vec<FlowField<f32>>,     // possibly identity at skip levels
    warped: Vec<FeatureVolume<f32>>,
    dec_cache: crate::pipeline::DecodeCache<f32>,
    y_fg: Tensor<f32>,
    occ_t_cache: crate::pipeline::OccCache<f32>,
    mask_shapes: Vec<Vec<usize>>,
    w_img: Tensor<f32>,
    bg_cache: crate::pipeline::BgCache<f32>,
    y_bg: Tensor<f32>,
    y: Tensor<f32>,
    // reconstruction branch
    recon_ref_caches: Vec<crate::pipeline::DecodeCache<f32>>,
    recon_ref_imgs: Vec<Tensor<f32>>,
    recon_agg_cache: Option<crate::pipeline::DecodeCache<f32>>,
    recon_agg_img: Option<Tensor<f32>>,
    id_flows: Vec<FlowField<f32>>,
    recon_value: f64,
    mask_value: f64,
    // rotation branch
    rot_flows: Vec<FlowField<f32>>,
    rot_dec_cache: Option<crate::pipeline::DecodeCache<f32>>,
    y_rot: Option<Tensor<f32>>,
}

fn forward_item(state: &TrainState, data: ItemData, rotation_deg: f64) -> Result<ItemForward> {
    let gen = &state.generator;
    let cfg = &gen.cfg;
    let m = cfg.levels;
    let n_refs = data.fg_refs.len();

    // encode references and run the per-level occupancy decoders
    let mut enc_caches = Vec::with_capacity(n_refs);
    let mut ref_levels = Vec::with_capacity(n_refs);
    let mut occ_ref_caches = Vec::with_capacity(n_refs);
    let mut occ_ref_masks = Vec::with_capacity(n_refs);
    let mut gt_pooled = Vec::with_capacity(n_refs);
    for (x, gt_mask) in data.fg_refs.iter().zip(&data.masks_refs) {
        let (levels, cache) = gen.encode(x)?;
        let mut occ_caches = Vec::with_capacity(m);
        let mut occ_masks = Vec::with_capacity(m);
        let mut pooled = Vec::with_capacity(m);
        let mut gt = gt_mask.clone();
        // pool the ground-truth mask to the finest grid, then per level
        for _ in 0..(cfg.resolution / cfg.base_spatial()).trailing_zeros() {
            gt = downsample2x(&gt, 2)?;
        }
        for (i, level) in levels.iter().enumerate() {
            let (_, w_i, c) = gen.occ[i].forward(&level.tensor)?;
            occ_caches.push(c);
            occ_masks.push(w_i);
            pooled.push(gt.clone());
            if i + 1 < m {
                gt = downsample2x(&gt, 2)?;
            }
        }
        enc_caches.push(cache);
        ref_levels.push(levels);
        occ_ref_caches.push(occ_caches);
        occ_ref_masks.push(occ_masks);
        gt_pooled.push(pooled);
    }

    // mask loss value
    let mut mask_value = 0.0;
    for (masks, pooled) in occ_ref_masks.iter().zip(&gt_pooled) {
        for (w_i, gt_i) in masks.iter().zip(pooled) {
            mask_value += l1_mean(w_i, gt_i)?.as_f64();
        }
    }
    mask_value /= (n_refs * m) as f64;

    // aggregate everything into the first reference's pose
    let mut agg_flow_caches = Vec::new();
    let mut agg_base_flows = Vec::new();
    let mut agg_level_flows = Vec::new();
    let agg_levels: Vec<FeatureVolume<f32>> = if n_refs == 1 {
        ref_levels[0].clone()
    } else {
        for j in 1..n_refs {
            let (fl, c) = gen
                .flow
                .forward(&data.fg_refs[j], &data.ref_poses[j], &data.ref_poses[0])?;
            let per_level: Vec<FlowField<f32>> = (0..m)
                .map(|i| flow_at_extents(&fl, ref_levels[0][i].extents()))
                .collect();
            agg_base_flows.push(fl);
            agg_flow_caches.push(c);
            agg_level_flows.push(per_level);
        }
        (0..m)
            .map(|i| {
                let vols: Vec<FeatureVolume<f32>> =
                    ref_levels.iter().map(|r| r[i].clone()).collect();
                let flows: Vec<FlowField<f32>> =
                    agg_level_flows.iter().map(|lf| lf[i].clone()).collect();
                aggregate(&vols, &flows)
            })
            .collect::<Result<_>>()?
    };

    // target warp
    let (flow_t, flow_t_cache) =
        gen.flow
            .forward(&data.fg_refs[0], &data.ref_poses[0], &data.target_pose)?;
    let raw_flows_t = flows_for_resolutions(&flow_t, m)?;
    let flows_t = if gen.warp_skips {
        raw_flows_t.clone()
    } else {
        raw_flows_t
            .iter()
            .enumerate()
            .map(|(i, f)| {
                if i + 1 < m {
                    let [d, h, w] = cfg.warp_extents(i);
                    identity_flow(d, h, w)
                } else {
                    f.clone()
                }
            })
            .collect()
    };
    let warped: Vec<FeatureVolume<f32>> = agg_levels
        .iter()
        .zip(&flows_t)
        .map(|(f, t)| resample(f, t))
        .collect();
    let (y_fg, dec_cache) = gen.decode(&warped)?;
    let (_, w0, occ_t_cache) = gen.occ[0].forward(&warped[0].tensor)?;
    let (w_img, mask_shapes) = gen.upsample_mask(&w0)?;
    let (y_bg, bg_cache) = gen.bg.forward(&data.full_ref0)?;
    let y = composite(&y_fg, &y_bg, &w_img)?;

    // reconstruction branch: every reference autoencoded through the
    // identity warp onto the cube grids, plus the aggregate against ref 0
    let id_flows: Vec<FlowField<f32>> = (0..m)
        .map(|i| {
            let [d, h, w] = cfg.warp_extents(i);
            identity_flow(d, h, w)
        })
        .collect();
    let mut recon_ref_caches = Vec::with_capacity(n_refs);
    let mut recon_ref_imgs = Vec::with_capacity(n_refs);
    let mut recon_value = 0.0;
    for (j, levels) in ref_levels.iter().enumerate() {
        let rw: Vec<FeatureVolume<f32>> = levels
            .iter()
            .zip(&id_flows)
            .map(|(f, t)| resample(f, t))
            .collect();
        let (img, c) = gen.decode(&rw)?;
        recon_value += l1_mean(&img, &data.fg_refs[j])?.as_f64();
        recon_ref_caches.push(c);
        recon_ref_imgs.push(img);
    }
    recon_value /= n_refs as f64;
    let (recon_agg_cache, recon_agg_img) = if n_refs == 1 {
        // the aggregate equals the single reference's bottleneck bit for
        // bit, so its decode is the one already computed
        recon_value += l1_mean(&recon_ref_imgs[0], &data.fg_refs[0])?.as_f64();
        (None, None)
    } else {
        let rw: Vec<FeatureVolume<f32>> = agg_levels
            .iter()
            .zip(&id_flows)
            .map(|(f, t)| resample(f, t))
            .collect();
        let (img, c) = gen.decode(&rw)?;
        recon_value += l1_mean(&img, &data.fg_refs[0])?.as_f64();
        (Some(c), Some(img))
    };

    // rotation branch
    let (rot_flows, rot_dec_cache, y_rot) = if state.config.rotation_loss {
        let rot_flows: Vec<FlowField<f32>> = (0..m)
            .map(|i| {
                let [d, h, w] = cfg.warp_extents(i);
                rotation_flow(rotation_deg, d, h, w)
            })
            .collect();
        let rw: Vec<FeatureVolume<f32>> = agg_levels
            .iter()
            .zip(&rot_flows)
            .map(|(f, t)| resample(f, t))
            .collect();
        let (img, c) = gen.decode(&rw)?;
        (rot_flows, Some(c), Some(img))
    } else {
        (Vec::new(), None, None)
    };

    Ok(ItemForward {
        data,
        rotation_deg,
        enc_caches,
        ref_levels,
        occ_ref_caches,
        occ_ref_masks,
        gt_pooled,
        agg_levels,
        agg_flow_caches,
        agg_base_flows,
        agg_level_flows,
        flow_t_cache,
        raw_flows_t,
        flows_t,
        warped,
        dec_cache,
        y_fg,
        occ_t_cache,
        mask_shapes,
        w_img,
        bg_cache,
        y_bg,
        y,
        recon_ref_caches,
        recon_ref_imgs,
        recon_agg_cache,
        recon_agg_img,
        id_flows,
        recon_value,
        mask_value,
        rot_flows,
        rot_dec_cache,
        y_rot,
    })
}

/// Discriminator update for one item; returns the three d-loss values.
fn disc_step_item(state: &mut TrainState, fwd: &ItemForward, inv_batch: f32) -> Result<[f64; 3]> {
    let mode = state.config.adv_mode;
    let weights = state.config.loss_weights;
    let res = state.config.resolution;
    let cond_t = disc_condition::<f32>(&fwd.data.target_pose, res);
    let mut values = [0.0f64; 3];
    let half = 0.5f32;

    let pairs: Vec<(DiscKind, Tensor<f32>, &Tensor<f32>, &Tensor<f32>, f64)> = {
        let mut v = vec![
            (
                DiscKind::Fg,
                cond_t.clone(),
                &fwd.data.fg_target,
                &fwd.y_fg,
                weights.fg,
            ),
            (
                DiscKind::Bg,
                cond_t.clone(),
                &fwd.data.full_target,
                &fwd.y,
                weights.bg,
            ),
        ];
        if let Some(y_rot) = &fwd.y_rot {
            v.push((
                DiscKind::Rot,
                fwd.data.fg_refs[0].clone(),
                &fwd.data.fg_target,
                y_rot,
                weights.rot,
            ));
        }
        v
    };

    for (kind, cond, real, fake, weight) in pairs {
        let disc = state.discs.kind(kind);
        let (s_real, c_real) = disc.forward(&cond, real)?;
        let (s_fake, c_fake) = disc.forward(&cond, fake)?;
        let scale = half * inv_batch * weight as f32;
        let (v0, gr0, gf0) = disc_loss_scale(mode, &s_real[0], &s_fake[0], scale);
        let (v1, gr1, gf1) = disc_loss_scale(mode, &s_real[1], &s_fake[1], scale);
        let value = average_scales([v0, v1]).as_f64();
        let disc = state.discs.kind_mut(kind);
        disc.backward(&c_real, [&gr0, &gr1])?;
        disc.backward(&c_fake, [&gf0, &gf1])?;
        let idx = match kind {
            DiscKind::Fg => 0,
            DiscKind::Bg => 1,
            DiscKind::Rot => 2,
        };
        values[idx] = value;
    }
    Ok(values)
}

/// Generator losses and full backward for one item; returns the
/// per-term loss values (fg, bg, per, recon, mask, rot).
fn gen_step_item(
    state: &mut TrainState,
    fwd: &ItemForward,
    inv_batch: f32,
) -> Result<(f64, f64, f64, f64, f64, f64)> {
    let mode = state.config.adv_mode;
    let weights = state.config.loss_weights;
    let res = state.config.resolution;
    let m = state.generator.cfg.levels;
    let n_refs = fwd.data.fg_refs.len();
    let cond_t = disc_condition::<f32>(&fwd.data.target_pose, res);

    // adversarial terms through the (already updated) discriminators
    let adv = |state: &TrainState,
               kind: DiscKind,
               cond: &Tensor<f32>,
               fake: &Tensor<f32>,
               weight: f64|
     -> Result<(f64, Tensor<f32>)> {
        let disc = state.discs.kind(kind);
        let (scores, cache) = disc.forward(cond, fake)?;
        let scale = 0.5 * inv_batch * weight as f32;
        let (v0, g0) = gen_loss_scale(mode, &scores[0], scale);
        let (v1, g1) = gen_loss_scale(mode, &scores[1], scale);
        let g_img = disc.backward_image(&cache, [&g0, &g1])?;
        Ok((average_scales([v0, v1]).as_f64(), g_img))
    };

    let (l_fg, g_yfg_adv) = adv(state, DiscKind::Fg, &cond_t, &fwd.y_fg, weights.fg)?;
    let (l_bg, g_y_adv) = adv(state, DiscKind::Bg, &cond_t, &fwd.y, weights.bg)?;
    let (l_rot, g_yrot_adv) = match &fwd.y_rot {
        Some(y_rot) => {
            let (v, g) = adv(state, DiscKind::Rot, &fwd.data.fg_refs[0], y_rot, weights.rot)?;
            (v, Some(g))
        }
        None => (0.0, None),
    };

    // perceptual on both pairs
    let per_fg = perceptual_pair(&state.generator.perceptual, &fwd.data.fg_target, &fwd.y_fg)?;
    let per_full = perceptual_pair(&state.generator.perceptual, &fwd.data.full_target, &fwd.y)?;
    let l_per = (per_fg.value + per_full.value) as f64;
    let per_scale = (weights.per as f32) * inv_batch;
    let g_yfg_per =
        perceptual_pair_backward(&state.generator.perceptual, &per_fg, per_scale)?;
    let g_y_per = perceptual_pair_backward(&state.generator.perceptual, &per_full, per_scale)?;

    // composite backward
    let mut g_y = g_y_adv;
    g_y.add_assign(&g_y_per)?;
    let (g_yfg_comp, g_ybg, g_wimg) = composite_backward(&g_y, &fwd.y_fg, &fwd.y_bg, &fwd.w_img)?;

    // gradient accumulators
    let mut g_agg: Vec<Tensor<f32>> = fwd
        .agg_levels
        .iter()
        .map(|f| Tensor::zeros(f.tensor.shape()))
        .collect();
    let mut g_levels: Vec<Vec<Option<Tensor<f32>>>> = fwd
        .ref_levels
        .iter()
        .map(|levels| levels.iter().map(|_| None).collect())
        .collect();

    let gen = &mut state.generator;

    // rotation branch backward
    if let (Some(g_yrot), Some(cache)) = (&g_yrot_adv, &fwd.rot_dec_cache) {
        let grads = gen.decode_backward(cache, g_yrot)?;
        for (i, g) in grads.iter().enumerate() {
            let (gf, _) = resample_backward(g, &fwd.agg_levels[i], &fwd.rot_flows[i])?;
            g_agg[i].add_assign(&gf)?;
        }
    }

    // background net
    gen.bg.backward(&fwd.bg_cache, &g_ybg)?;

    // composite mask path
    let g_w0 = gen.upsample_mask_backward(&fwd.mask_shapes, &g_wimg)?;
    let g_warped0_occ = gen.occ[0].backward(&fwd.occ_t_cache, Some(&g_w0), None)?;

    // main decode path
    let mut g_yfg = g_yfg_adv;
    g_yfg.add_assign(&g_yfg_per)?;
    g_yfg.add_assign(&g_yfg_comp)?;
    let mut g_warped = gen.decode_backward(&fwd.dec_cache, &g_yfg)?;
    g_warped[0].add_assign(&g_warped0_occ)?;

    // back through the target warp
    let mut g_flows_t: Vec<Option<Tensor<f32>>> = vec![None; m];
    for i in 0..m {
        let (gf, gt) = resample_backward(&g_warped[i], &fwd.agg_levels[i], &fwd.flows_t[i])?;
        g_agg[i].add_assign(&gf)?;
        if gen.warp_skips || i == m - 1 {
            g_flows_t[i] = Some(gt);
        }
    }
    let g_flow_t_base = flows_for_resolutions_backward(g_flows_t, &fwd.raw_flows_t)?;
    gen.flow.backward(&fwd.flow_t_cache, &g_flow_t_base)?;

    // reconstruction backward
    let recon_scale = (weights.recon as f32) * inv_batch;
    for (j, cache) in fwd.recon_ref_caches.iter().enumerate() {
        let mut scale = recon_scale / n_refs as f32;
        if n_refs == 1 {
            // the aggregate term reuses this same decode
            scale += recon_scale;
        }
        let g_img = l1_mean_backward(&fwd.recon_ref_imgs[j], &fwd.data.fg_refs[j], scale)?;
        let grads = gen.decode_backward(cache, &g_img)?;
        for (i, g) in grads.iter().enumerate() {
            let (gf, _) = resample_backward(g, &fwd.ref_levels[j][i], &fwd.id_flows[i])?;
            match &mut g_levels[j][i] {
                Some(acc) => acc.add_assign(&gf)?,
                slot => *slot = Some(gf),
            }
        }
    }
    if let (Some(cache), Some(img)) = (&fwd.recon_agg_cache, &fwd.recon_agg_img) {
        let g_img = l1_mean_backward(img, &fwd.data.fg_refs[0], recon_scale)?;
        let grads = gen.decode_backward(cache, &g_img)?;
        for (i, g) in grads.iter().enumerate() {
            let (gf, _) = resample_backward(g, &fwd.agg_levels[i], &fwd.id_flows[i])?;
            g_agg[i].add_assign(&gf)?;
        }
    }

    // aggregation backward
    if n_refs == 1 {
        for (i, g) in g_agg.into_iter().enumerate() {
            match &mut g_levels[0][i] {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
    } else {
        let mut g_base_flows: Vec<Tensor<f32>> = fwd
            .agg_base_flows
            .iter()
            .map(|f| Tensor::zeros(f.tensor.shape()))
            .collect();
        for i in 0..m {
            let vols: Vec<FeatureVolume<f32>> =
                fwd.ref_levels.iter().map(|r| r[i].clone()).collect();
            let flows: Vec<FlowField<f32>> =
                fwd.agg_level_flows.iter().map(|lf| lf[i].clone()).collect();
            let (g_vols, g_fl) = aggregate_backward(&g_agg[i], &vols, &flows)?;
            for (j, gv) in g_vols.into_iter().enumerate() {
                match &mut g_levels[j][i] {
                    Some(acc) => acc.add_assign(&gv)?,
                    slot => *slot = Some(gv),
                }
            }
            let extents = vols[0].extents();
            for (j, gf) in g_fl.into_iter().enumerate() {
                let g_base =
                    flow_at_extents_backward(&gf, &fwd.agg_base_flows[j], extents)?;
                g_base_flows[j].add_assign(&g_base)?;
            }
        }
        for (cache, g_base) in fwd.agg_flow_caches.iter().zip(&g_base_flows) {
            gen.flow.backward(cache, g_base)?;
        }
    }

    // mask supervision backward
    let l_mask = fwd.mask_value;
    let mask_scale = (weights.mask as f32) * inv_batch / (n_refs * m) as f32;
    for j in 0..n_refs {
        for i in 0..m {
            let g_w = l1_mean_backward(&fwd.occ_ref_masks[j][i], &fwd.gt_pooled[j][i], mask_scale)?;
            let g_vol = gen.occ[i].backward(&fwd.occ_ref_caches[j][i], Some(&g_w), None)?;
            match &mut g_levels[j][i] {
                Some(acc) => acc.add_assign(&g_vol)?,
                slot => *slot = Some(g_vol),
            }
        }
    }

    // encoders
    for (j, cache) in fwd.enc_caches.iter().enumerate() {
        let grads = std::mem::take(&mut g_levels[j]);
        gen.encode_backward(cache, grads)?;
    }

    Ok((l_fg, l_bg, l_per, fwd.recon_value, l_mask, l_rot))
}

fn zero_grads(state: &mut TrainState, which: Which) {
    let z = &mut |p: &mut crate::nn::Parameter<f32>| p.zero_grad();
    match which {
        Which::Generator => state.generator.visit_params(z),
        Which::Discriminators => state.discs.visit_params(z),
    }
}

#[derive(Clone, Copy)]
enum Which {
    Generator,
    Discriminators,
}

/// One full training step over a drawn batch: discriminator update, then
/// generator update. Returns the mean generator loss report and the mean
/// discriminator values.
pub fn train_step(
    state: &mut TrainState,
    ds: &LoadedDataset,
) -> Result<(LossReport, [f64; 3])> {
    let b = state.config.batch_size;
    let inv_batch = 1.0 / b as f32;

    // draw all randomness up front in a fixed order
    let n_id = ds.identities.len();
    let mut plans = Vec::with_capacity(b);
    for _ in 0..b {
        let identity = state.rng.gen_range(0..n_id);
        let n_frames = ds.identities[identity].frames.len();
        let n_refs = state
            .rng
            .gen_range(state.config.refs_min..=state.config.refs_max)
            .min(n_frames.saturating_sub(1).max(1));
        let mut chosen: Vec<usize> = Vec::with_capacity(n_refs + 1);
        while chosen.len() < (n_refs + 1).min(n_frames) {
            let f = state.rng.gen_range(0..n_frames);
            if !chosen.contains(&f) {
                chosen.push(f);
            }
        }
        while chosen.len() < n_refs + 1 {
            chosen.push(chosen[0]); // tiny datasets reuse frames
        }
        let target = chosen.pop().unwrap();
        let rotation_deg = state.rng.gen_range(-180.0..180.0);
        plans.push(ItemPlan {
            identity,
            refs: chosen,
            target,
            rotation_deg,
        });
    }

    // generator forward for the whole batch
    let mut forwards = Vec::with_capacity(b);
    for plan in &plans {
        let data = gather_item(ds, plan);
        forwards.push(forward_item(state, data, plan.rotation_deg)?);
    }

    // discriminator update
    zero_grads(state, Which::Discriminators);
    let mut d_values = [0.0f64; 3];
    for fwd in &forwards {
        let v = disc_step_item(state, fwd, inv_batch)?;
        for (acc, x) in d_values.iter_mut().zip(v) {
            *acc += x / b as f64;
        }
    }
    state.adam_d.begin_step();
    let mut opt_err: Option<Error> = None;
    {
        let adam = &mut state.adam_d;
        state.discs.visit_params(&mut |p| {
            if opt_err.is_none() {
                if let Err(e) = adam.apply(p) {
                    opt_err = Some(e);
                }
            }
        });
    }
    if let Some(e) = opt_err {
        return Err(e);
    }

    // generator update
    zero_grads(state, Which::Generator);
    let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for fwd in &forwards {
        let (fg, bg, per, recon, mask, rot) = gen_step_item(state, fwd, inv_batch)?;
        sums.0 += fg / b as f64;
        sums.1 += bg / b as f64;
        sums.2 += per / b as f64;
        sums.3 += recon / b as f64;
        sums.4 += mask / b as f64;
        sums.5 += rot / b as f64;
    }
    let report = total_loss(sums, &state.config.loss_weights)?;
    state.adam_g.begin_step();
    let mut opt_err: Option<Error> = None;
    {
        let adam = &mut state.adam_g;
        state.generator.visit_params(&mut |p| {
            if opt_err.is_none() {
                if let Err(e) = adam.apply(p) {
                    opt_err = Some(e);
                }
            }
        });
    }
    if let Some(e) = opt_err {
        return Err(e);
    }

    state.step += 1;
    Ok((report, d_values))
}

/// Run (or resume) training to `state.config.steps`, checkpointing and
/// logging under `out_dir`.
pub fn train(state: &mut TrainState, ds: &LoadedDataset, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    while state.step < state.config.steps {
        let step_before = state.step;
        let (report, d_values) = train_step(state, ds).map_err(|e| {
            Error::invalid(format!("training aborted at step {step_before}: {e}"))
        })?;
        if state.step % state.config.log_interval.max(1) == 0 || state.step == state.config.steps {
            writeln!(
                log,
                "{{\"step\":{},\"loss\":{},\"d\":{{\"fg\":{},\"bg\":{},\"rot\":{}}}}}",
                state.step,
                report.to_json(),
                d_values[0],
                d_values[1],
                d_values[2]
            )?;
        }
        if state.config.checkpoint_interval > 0
            && state.step % state.config.checkpoint_interval == 0
            && state.step < state.config.steps
        {
            state.save(&out_dir.join(format!("ckpt_{:06}.fgtb", state.step)))?;
        }
    }
    state.save(&out_dir.join("final.fgtb"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, Clone, Debug)]
pub struct FrameMetrics {
    pub identity: usize,
    pub frame: usize,
    pub ssim: f64,
    pub ssim_fg: f64,
    pub l1: f64,
    pub l1_fg: f64,
    pub psnr: f64,
    pub mask_iou: f64,
}

#[derive(serde::Serialize, Clone, Debug)]
pub struct EvalReport {
    pub n_refs: usize,
    pub frames: usize,
    pub mean_ssim: f64,
    pub mean_ssim_fg: f64,
    pub mean_l1: f64,
    pub mean_l1_fg: f64,
    pub mean_psnr: f64,
    pub mean_mask_iou: f64,
    pub mean_bg_l1: f64,
    pub per_frame: Vec<FrameMetrics>,
}

/// Same-identity retargeting protocol: the first `n_refs` frames of each
/// identity are the references; every later frame is synthesized from its
/// pose and scored against ground truth.
pub fn evaluate(
    state: &TrainState,
    ds: &LoadedDataset,
    n_refs: usize,
    max_frames_per_identity: Option<usize>,
) -> Result<EvalReport> {
    if n_refs == 0 {
        return Err(Error::invalid("need at least one reference"));
    }
    let gen = &state.generator;
    let mut per_frame = Vec::new();
    let mut bg_l1_sum = 0.0;
    let mut bg_count = 0usize;
    for (id, identity) in ds.identities.iter().enumerate() {
        if identity.frames.len() <= n_refs {
            continue;
        }
        let refs_fg: Vec<Tensor<f32>> = (0..n_refs)
            .map(|f| foreground_image(&ds.frame_rgb(id, f), &ds.frame_mask(id, f)))
            .collect();
        let ref_poses: Vec<Pose> = (0..n_refs)
            .map(|f| identity.frames[f].pose.clone())
            .collect();
        let full_ref0 = ds.frame_rgb(id, 0);

        let (y_bg, _) = gen.bg.forward(&full_ref0)?;
        bg_l1_sum += l1_mean(&y_bg, &ds.background(id))?.as_f64();
        bg_count += 1;

        let last = max_frames_per_identity
            .map(|m| (n_refs + m).min(identity.frames.len()))
            .unwrap_or(identity.frames.len());
        for frame in n_refs..last {
            let target_pose = identity.frames[frame].pose.clone();
            let out = gen.synthesize(&refs_fg, &ref_poses, &target_pose, None, &full_ref0)?;
            let gt_rgb = ds.frame_rgb(id, frame);
            let gt_mask = ds.frame_mask(id, frame);
            let gt_fg = foreground_image(&gt_rgb, &gt_mask);
            per_frame.push(FrameMetrics {
                identity: id,
                frame,
                ssim: ssim(&out.composite, &gt_rgb)?,
                ssim_fg: ssim(&out.foreground, &gt_fg)?,
                l1: l1_mean(&out.composite, &gt_rgb)?.as_f64(),
                l1_fg: l1_mean(&out.foreground, &gt_fg)?.as_f64(),
                psnr: psnr(&out.composite, &gt_rgb)?,
                mask_iou: mask_iou(&out.mask, &gt_mask)?,
            });
        }
    }
    if per_frame.is_empty() {
        return Err(Error::invalid(
            "no evaluable frames (identities need more frames than references)",
        ));
    }
    let n = per_frame.len() as f64;
    let mean = |f: &dyn Fn(&FrameMetrics) -> f64| per_frame.iter().map(|m| f(m)).sum::<f64>() / n;
    Ok(EvalReport {
        n_refs,
        frames: per_frame.len(),
        mean_ssim: mean(&|m| m.ssim),
        mean_ssim_fg: mean(&|m| m.ssim_fg),
        mean_l1: mean(&|m| m.l1),
        mean_l1_fg: mean(&|m| m.l1_fg),
        mean_psnr: mean(&|m| m.psnr),
        mean_mask_iou: mean(&|m| m.mask_iou),
        mean_bg_l1: bg_l1_sum / bg_count.max(1) as f64,
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_dataset;
    use crate::config::RunConfig;

    fn tmp_dir(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("puppetflow_train_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        fs::create_dir_all(&d).unwrap();
        d
    }

    fn smoke_config() -> RunConfig {
        RunConfig {
            resolution: 32,
            levels: 2,
            volume_depth: 8,
            channels: vec![4, 8],
            keypoints: 12,
            steps: 2,
            batch_size: 2,
            refs_min: 1,
            refs_max: 2,
            seed: 3,
            checkpoint_interval: 0,
            log_interval: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn two_steps_on_tiny_dataset_stay_finite() {
        let dir = tmp_dir("smoke");
        make_dataset(2, 4, 32, &dir.join("data"), 7).unwrap();
        let ds = LoadedDataset::load(&dir.join("data/manifest.json")).unwrap();
        let mut state = TrainState::new(smoke_config()).unwrap();
        for _ in 0..2 {
            let (report, d) = train_step(&mut state, &ds).unwrap();
            assert!(report.total.is_finite());
            assert!(d.iter().all(|v| v.is_finite()));
        }
        assert_eq!(state.step, 2);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn resume_matches_uninterrupted_run_bit_exactly() {
        let dir = tmp_dir("resume");
        make_dataset(2, 4, 32, &dir.join("data"), 9).unwrap();
        let ds = LoadedDataset::load(&dir.join("data/manifest.json")).unwrap();

        // uninterrupted: 4 steps
        let mut cfg = smoke_config();
        cfg.steps = 4;
        let mut full = TrainState::new(cfg.clone()).unwrap();
        for _ in 0..4 {
            train_step(&mut full, &ds).unwrap();
        }

        // interrupted: 2 steps, checkpoint, reload, 2 more
        let mut half = TrainState::new(cfg).unwrap();
        for _ in 0..2 {
            train_step(&mut half, &ds).unwrap();
        }
        let ckpt = dir.join("mid.fgtb");
        half.save(&ckpt).unwrap();
        let mut resumed = TrainState::load(&ckpt).unwrap();
        for _ in 0..2 {
            train_step(&mut resumed, &ds).unwrap();
        }

        let collect = |state: &mut TrainState| {
            let mut out: Vec<(String, Vec<f32>)> = Vec::new();
            state
                .generator
                .visit_params(&mut |p| out.push((p.name.clone(), p.value.data().to_vec())));
            state
                .discs
                .visit_params(&mut |p| out.push((p.name.clone(), p.value.data().to_vec())));
            out
        };
        let a = collect(&mut full);
        let b = collect(&mut resumed);
        assert_eq!(a.len(), b.len());
        for ((n1, v1), (n2, v2)) in a.iter().zip(&b) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2, "parameter {n1} must match bit for bit");
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn evaluate_reports_all_metrics() {
        let dir = tmp_dir("eval");
        make_dataset(1, 4, 32, &dir.join("data"), 11).unwrap();
        let ds = LoadedDataset::load(&dir.join("data/manifest.json")).unwrap();
        let state = TrainState::new(smoke_config()).unwrap();
        let report = evaluate(&state, &ds, 1, None).unwrap();
        assert_eq!(report.frames, 3);
        assert!(report.mean_ssim.is_finite());
        assert!(report.mean_l1 >= 0.0);
        assert!((0.0..=1.0).contains(&report.mean_mask_iou));
        fs::remove_dir_all(&dir).unwrap();
    }
}
