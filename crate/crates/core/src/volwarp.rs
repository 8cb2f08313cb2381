//! Flow-field algebra and the differentiable trilinear sampling layer.
//!
//! Coordinates are normalized per axis: -1 is the center of the first cell,
//! +1 the center of the last cell; a single-cell axis uses coordinate 0.
//! Reads outside the volume see zeros (fading linearly over one cell
//! spacing). Sampling is piecewise linear with breakpoints exactly at cell
//! centers, so warping with the identity flow reproduces the input bit for
//! bit.

use crate::error::{Error, Result};
use crate::kernels::axpy;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Implicit feature volume `[C, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume<S: Scalar> {
    pub tensor: Tensor<S>,
}

impl<S: Scalar> FeatureVolume<S> {
    pub fn new(tensor: Tensor<S>) -> Result<Self> {
        if tensor.shape().len() != 4 {
            return Err(Error::shape("[C, D, H, W]", format!("{:?}", tensor.shape())));
        }
        Ok(FeatureVolume { tensor })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    /// Grid extents as `[D, H, W]`.
    pub fn extents(&self) -> [usize; 3] {
        let s = self.tensor.shape();
        [s[1], s[2], s[3]]
    }
}

/// Backward-warp field `[3, D, H, W]`; channel order is `(u, v, w)` =
/// normalized (width, height, depth) sample coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<S: Scalar> {
    pub tensor: Tensor<S>,
}

impl<S: Scalar> FlowField<S> {
    pub fn new(tensor: Tensor<S>) -> Result<Self> {
        match *tensor.shape() {
            [3, _, _, _] => Ok(FlowField { tensor }),
            _ => Err(Error::shape("[3, D, H, W]", format!("{:?}", tensor.shape()))),
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.tensor.shape();
        [s[1], s[2], s[3]]
    }
}

/// Normalized center coordinates of an axis with `n` cells.
pub fn axis_centers<S: Scalar>(n: usize) -> Vec<S> {
    if n == 1 {
        return vec![S::zero()];
    }
    let den = S::from_f64_c((n - 1) as f64);
    (0..n)
        .map(|k| (S::from_f64_c(2.0 * k as f64) - den) / den)
        .collect()
}

/// The flow for which resampling is the identity.
pub fn identity_flow<S: Scalar>(d: usize, h: usize, w: usize) -> FlowField<S> {
    let cd = axis_centers::<S>(d);
    let ch = axis_centers::<S>(h);
    let cw = axis_centers::<S>(w);
    let mut t = Tensor::zeros(&[3, d, h, w]);
    {
        let data = t.data_mut();
        let vol = d * h * w;
        for zd in 0..d {
            for yh in 0..h {
                for xw in 0..w {
                    let cell = (zd * h + yh) * w + xw;
                    data[cell] = cw[xw];
                    data[vol + cell] = ch[yh];
                    data[2 * vol + cell] = cd[zd];
                }
            }
        }
    }
    FlowField { tensor: t }
}

/// Backward flow rotating volume content by `theta_deg` about the vertical
/// (height) axis through the volume center: each target cell reads from its
/// position rotated in the width-depth plane.
pub fn rotation_flow<S: Scalar>(theta_deg: f64, d: usize, h: usize, w: usize) -> FlowField<S> {
    let rad = theta_deg.to_radians();
    let (sin_t, cos_t) = (S::from_f64_c(rad.sin()), S::from_f64_c(rad.cos()));
    let cd = axis_centers::<S>(d);
    let ch = axis_centers::<S>(h);
    let cw = axis_centers::<S>(w);
    let mut t = Tensor::zeros(&[3, d, h, w]);
    {
        let data = t.data_mut();
        let vol = d * h * w;
        for zd in 0..d {
            for yh in 0..h {
                for xw in 0..w {
                    let (u, wc) = (cw[xw], cd[zd]);
                    let cell = (zd * h + yh) * w + xw;
                    data[cell] = u * cos_t - wc * sin_t;
                    data[vol + cell] = ch[yh];
                    data[2 * vol + cell] = u * sin_t + wc * cos_t;
                }
            }
        }
    }
    FlowField { tensor: t }
}

/// Localization of one normalized coordinate against an axis: the value is
/// `w0*f[j0] + w1*f[j1]` (missing indices read zero) and its derivative
/// w.r.t. the coordinate is `(f[j1] - f[j0]) * inv_d`.
#[derive(Clone, Copy, Debug)]
struct AxisLoc<S> {
    j0: Option<usize>,
    j1: Option<usize>,
    w0: S,
    w1: S,
    inv_d: S,
}

fn locate<S: Scalar>(c: S, centers: &[S]) -> AxisLoc<S> {
    let n = centers.len();
    let zero = AxisLoc {
        j0: None,
        j1: None,
        w0: S::zero(),
        w1: S::zero(),
        inv_d: S::zero(),
    };
    if !c.is_finite() {
        return zero;
    }
    if n == 1 {
        let one = S::one();
        let a = c.abs();
        if a <= one {
            return AxisLoc {
                j0: Some(0),
                j1: None,
                w0: one,
                w1: S::zero(),
                inv_d: S::zero(),
            };
        }
        let two = S::from_f64_c(2.0);
        let t = (a - one) / two;
        if t >= one {
            return zero;
        }
        let sign = if c > S::zero() { S::one() } else { -S::one() };
        return AxisLoc {
            j0: Some(0),
            j1: None,
            w0: one - t,
            w1: S::zero(),
            inv_d: sign / two,
        };
    }

    // Find the largest interior segment j <= n-2 with centers[j] <= c, so a
    // coordinate exactly on a cell center gets its value (and the one-sided
    // derivative) from the containing interior segment rather than the
    // zero-padding fade.
    let delta = centers[1] - centers[0];
    let est = ((c - centers[0]) / delta).as_f64();
    let mut j = est.floor().clamp(-1.0, (n - 2) as f64) as isize;
    while j >= 0 && c < centers[j as usize] {
        j -= 1;
    }
    while j + 1 <= (n - 2) as isize && c >= centers[(j + 1) as usize] {
        j += 1;
    }

    if j < 0 {
        // left fade toward virtual zeros
        let s = (c - centers[0]) / delta; // s <= 0
        if s <= -S::one() {
            return zero;
        }
        return AxisLoc {
            j0: None,
            j1: Some(0),
            w0: S::zero(),
            w1: S::one() + s,
            inv_d: S::one() / delta,
        };
    }
    let j = j as usize;
    if c > centers[n - 1] {
        let s = (c - centers[n - 1]) / delta; // s > 0
        if s >= S::one() {
            return zero;
        }
        return AxisLoc {
            j0: Some(n - 1),
            j1: None,
            w0: S::one() - s,
            w1: S::zero(),
            inv_d: S::one() / delta,
        };
    }
    let d = centers[j + 1] - centers[j];
    let t = (c - centers[j]) / d;
    AxisLoc {
        j0: Some(j),
        j1: Some(j + 1),
        w0: S::one() - t,
        w1: t,
        inv_d: S::one() / d,
    }
}

/// Trilinearly sample `f` at the coordinates of `flow`; the flow's extents
/// define the output grid.
pub fn resample<S: Scalar>(f: &FeatureVolume<S>, flow: &FlowField<S>) -> FeatureVolume<S> {
    let [fd, fh, fw] = f.extents();
    let [d, h, w] = flow.extents();
    let c = f.channels();
    let centers_d = axis_centers::<S>(fd);
    let centers_h = axis_centers::<S>(fh);
    let centers_w = axis_centers::<S>(fw);

    let mut out = Tensor::zeros(&[c, d, h, w]);
    let src = f.tensor.data();
    let fl = flow.tensor.data();
    let cells = d * h * w;
    let src_vol = fd * fh * fw;
    {
        let od = out.data_mut();
        for cell in 0..cells {
            let lu = locate(fl[cell], &centers_w);
            let lv = locate(fl[cells + cell], &centers_h);
            let lw = locate(fl[2 * cells + cell], &centers_d);
            // corner offsets and weights within the source volume
            let mut corners: [(usize, S); 8] = [(0, S::zero()); 8];
            let mut n_corners = 0;
            for (dj, dw) in [(lw.j0, lw.w0), (lw.j1, lw.w1)] {
                let Some(dj) = dj else { continue };
                for (hj, hw) in [(lv.j0, lv.w0), (lv.j1, lv.w1)] {
                    let Some(hj) = hj else { continue };
                    for (wj, ww) in [(lu.j0, lu.w0), (lu.j1, lu.w1)] {
                        let Some(wj) = wj else { continue };
                        corners[n_corners] = ((dj * fh + hj) * fw + wj, dw * hw * ww);
                        n_corners += 1;
                    }
                }
            }
            for ch in 0..c {
                let base = ch * src_vol;
                let mut acc = S::zero();
                for &(off, wgt) in &corners[..n_corners] {
                    acc += wgt * src[base + off];
                }
                od[ch * cells + cell] = acc;
            }
        }
    }
    FeatureVolume { tensor: out }
}

/// Gradients of `resample` w.r.t. the source volume and the flow field.
pub fn resample_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    f: &FeatureVolume<S>,
    flow: &FlowField<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let [fd, fh, fw] = f.extents();
    let [d, h, w] = flow.extents();
    let c = f.channels();
    if grad_out.shape() != [c, d, h, w] {
        return Err(Error::shape(
            format!("[{c}, {d}, {h}, {w}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let centers_d = axis_centers::<S>(fd);
    let centers_h = axis_centers::<S>(fh);
    let centers_w = axis_centers::<S>(fw);

    let mut grad_f = Tensor::zeros(f.tensor.shape());
    let mut grad_t = Tensor::zeros(flow.tensor.shape());
    let src = f.tensor.data();
    let fl = flow.tensor.data();
    let gd = grad_out.data();
    let cells = d * h * w;
    let src_vol = fd * fh * fw;
    let gfd = grad_f.data_mut();
    let gtd = grad_t.data_mut();

    for cell in 0..cells {
        let lu = locate(fl[cell], &centers_w);
        let lv = locate(fl[cells + cell], &centers_h);
        let lw = locate(fl[2 * cells + cell], &centers_d);

        let mut gu = S::zero();
        let mut gv = S::zero();
        let mut gw = S::zero();
        for ch in 0..c {
            let g = gd[ch * cells + cell];
            if g == S::zero() {
                continue;
            }
            let base = ch * src_vol;
            // per-axis partial sums for the coordinate gradient
            let mut du = S::zero();
            let mut dv = S::zero();
            let mut dwc = S::zero();
            for (dj, dw) in [(lw.j0, lw.w0), (lw.j1, lw.w1)] {
                let Some(dj) = dj else { continue };
                for (hj, hw) in [(lv.j0, lv.w0), (lv.j1, lv.w1)] {
                    let Some(hj) = hj else { continue };
                    let row = base + (dj * fh + hj) * fw;
                    let v0 = lu.j0.map_or(S::zero(), |j| src[row + j]);
                    let v1 = lu.j1.map_or(S::zero(), |j| src[row + j]);
                    // scatter into grad_f
                    if let Some(j) = lu.j0 {
                        gfd[row + j] += g * dw * hw * lu.w0;
                    }
                    if let Some(j) = lu.j1 {
                        gfd[row + j] += g * dw * hw * lu.w1;
                    }
                    let along_u = v0 * lu.w0 + v1 * lu.w1;
                    du += dw * hw * (v1 - v0);
                    // dv needs the sign of the H corner, dwc of the D corner
                    let h_sign = if Some(hj) == lv.j0 { -S::one() } else { S::one() };
                    dv += dw * h_sign * along_u;
                    let d_sign = if Some(dj) == lw.j0 { -S::one() } else { S::one() };
                    dwc += hw * d_sign * along_u;
                }
            }
            gu += g * du * lu.inv_d;
            gv += g * dv * lv.inv_d;
            gw += g * dwc * lw.inv_d;
        }
        gtd[cell] = gu;
        gtd[cells + cell] = gv;
        gtd[2 * cells + cell] = gw;
    }
    Ok((grad_f, grad_t))
}

/// Chain two backward warps: resampling by the result equals resampling by
/// `outer` then by `inner` (up to interpolation error). Exact at cell
/// centers, so composing with the identity is a bit-exact copy.
pub fn compose<S: Scalar>(outer: &FlowField<S>, inner: &FlowField<S>) -> Result<FlowField<S>> {
    if outer.extents() != inner.extents() {
        return Err(Error::shape(
            format!("{:?}", outer.extents()),
            format!("{:?}", inner.extents()),
        ));
    }
    let vol = FeatureVolume {
        tensor: outer.tensor.clone(),
    };
    Ok(FlowField {
        tensor: resample(&vol, inner).tensor,
    })
}

/// Flow at half extents representing the same warp: the field interpolated
/// at the coarse grid's cell centers. (Normalized coordinates are
/// resolution independent, so values need no rescaling.)
pub fn downsample_flow<S: Scalar>(flow: &FlowField<S>) -> Result<FlowField<S>> {
    let [d, h, w] = flow.extents();
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "downsample_flow needs even extents, got {:?}",
            flow.extents()
        )));
    }
    let coarse = identity_flow::<S>(d / 2, h / 2, w / 2);
    let vol = FeatureVolume {
        tensor: flow.tensor.clone(),
    };
    Ok(FlowField {
        tensor: resample(&vol, &coarse).tensor,
    })
}

/// Gradient of `downsample_flow` w.r.t. the fine flow.
pub fn downsample_flow_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    flow: &FlowField<S>,
) -> Result<Tensor<S>> {
    let [d, h, w] = flow.extents();
    let coarse = identity_flow::<S>(d / 2, h / 2, w / 2);
    let vol = FeatureVolume {
        tensor: flow.tensor.clone(),
    };
    let (grad_f, _) = resample_backward(grad_out, &vol, &coarse)?;
    Ok(grad_f)
}

/// Mean of the first volume and all remaining volumes warped into its pose:
/// `f_a = (1/N) (f_1 + sum_i resample(f_i, T_i))`.
pub fn aggregate<S: Scalar>(
    volumes: &[FeatureVolume<S>],
    flows: &[FlowField<S>],
) -> Result<FeatureVolume<S>> {
    if volumes.is_empty() {
        return Err(Error::invalid("aggregate needs at least one volume"));
    }
    if flows.len() + 1 != volumes.len() {
        return Err(Error::invalid(format!(
            "aggregate needs N-1 flows for N volumes, got {} for {}",
            flows.len(),
            volumes.len()
        )));
    }
    let shape = volumes[0].tensor.shape().to_vec();
    for v in volumes {
        if v.tensor.shape() != shape {
            return Err(Error::shape(
                format!("{:?}", shape),
                format!("{:?}", v.tensor.shape()),
            ));
        }
    }
    if volumes.len() == 1 {
        return Ok(volumes[0].clone());
    }
    let mut acc = volumes[0].tensor.clone();
    for (v, t) in volumes[1..].iter().zip(flows) {
        let warped = resample(v, t);
        acc.add_assign(&warped.tensor)?;
    }
    let inv_n = S::one() / S::from_f64_c(volumes.len() as f64);
    Ok(FeatureVolume {
        tensor: acc.scale(inv_n),
    })
}

/// Gradients of `aggregate` w.r.t. every input volume and flow.
pub fn aggregate_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    volumes: &[FeatureVolume<S>],
    flows: &[FlowField<S>],
) -> Result<(Vec<Tensor<S>>, Vec<Tensor<S>>)> {
    if volumes.len() == 1 {
        return Ok((vec![grad_out.clone()], vec![]));
    }
    let inv_n = S::one() / S::from_f64_c(volumes.len() as f64);
    let scaled = grad_out.scale(inv_n);
    let mut grad_vols = vec![scaled.clone()];
    let mut grad_flows = Vec::with_capacity(flows.len());
    for (v, t) in volumes[1..].iter().zip(flows) {
        let (gf, gt) = resample_backward(&scaled, v, t)?;
        grad_vols.push(gf);
        grad_flows.push(gt);
    }
    Ok((grad_vols, grad_flows))
}

/// `y += a * x` for tensors, used by the aggregation pipeline.
pub fn add_scaled_volume<S: Scalar>(acc: &mut Tensor<S>, a: S, x: &Tensor<S>) {
    axpy(acc.data_mut(), a, x.data());
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(state: &mut u64) -> f64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_volume(shape: &[usize], seed: u64) -> FeatureVolume<f64> {
        let mut s = seed.wrapping_add(0x9e3779b97f4a7c15);
        FeatureVolume::new(Tensor::from_fn(shape, |_| lcg(&mut s))).unwrap()
    }

    #[test]
    fn identity_flow_corner_centers() {
        let t = identity_flow::<f64>(2, 2, 2);
        for v in t.tensor.data() {
            assert!(v.abs() == 1.0, "2-cell axes have centers at +-1");
        }
    }

    #[test]
    fn identity_flow_single_cell_uses_zero() {
        let t = identity_flow::<f64>(1, 1, 1);
        assert_eq!(t.tensor.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn resample_identity_is_bit_exact() {
        let f = rand_volume(&[3, 4, 5, 6], 1);
        let id = identity_flow::<f64>(4, 5, 6);
        let out = resample(&f, &id);
        assert_eq!(out.tensor.data(), f.tensor.data());
    }

    #[test]
    fn resample_identity_bit_exact_f32() {
        let f64v = rand_volume(&[2, 16, 16, 16], 2);
        let f = FeatureVolume::new(f64v.tensor.cast::<f32>()).unwrap();
        let id = identity_flow::<f32>(16, 16, 16);
        let out = resample(&f, &id);
        assert_eq!(out.tensor.data(), f.tensor.data());
    }

    #[test]
    fn resample_far_out_of_range_is_zero() {
        let f = rand_volume(&[2, 3, 3, 3], 3);
        let flow = FlowField::new(Tensor::full(&[3, 3, 3, 3], 5.0)).unwrap();
        let out = resample(&f, &flow);
        assert!(out.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resample_depth_midpoint_blends() {
        let f = FeatureVolume::new(
            Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![0.0, 10.0]).unwrap(),
        )
        .unwrap();
        let flow = FlowField::new(Tensor::zeros(&[3, 1, 1, 1])).unwrap();
        let out = resample(&f, &flow);
        assert!((out.tensor.data()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_zero_equals_identity() {
        let r = rotation_flow::<f64>(0.0, 4, 3, 4);
        let id = identity_flow::<f64>(4, 3, 4);
        for (a, b) in r.tensor.data().iter().zip(id.tensor.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rotation_full_turn_equals_identity() {
        let r = rotation_flow::<f64>(360.0, 4, 4, 4);
        let id = identity_flow::<f64>(4, 4, 4);
        for (a, b) in r.tensor.data().iter().zip(id.tensor.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn rotation_quarter_turn_moves_delta_voxel() {
        // single nonzero cell at normalized (u,v,w) = (1,0,0)
        let mut vol = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        vol.data_mut()[(1 * 3 + 1) * 3 + 2] = 1.0; // d=1 (w=0), h=1 (v=0), w=2 (u=1)
        let f = FeatureVolume::new(vol).unwrap();
        let out = resample(&f, &rotation_flow(90.0, 3, 3, 3));
        // expect the mass at (u,v,w) = (0,0,-1): d=0, h=1, w=1
        let got = out.tensor.data()[(0 * 3 + 1) * 3 + 1];
        assert!(got > 0.999, "mass should relocate, got {got}");
        let total: f64 = out.tensor.data().iter().sum();
        assert!((total - got).abs() < 1e-9, "no mass elsewhere");
    }

    #[test]
    fn compose_with_identity_is_bit_exact() {
        let mut s = 77u64;
        let t = FlowField::new(Tensor::from_fn(&[3, 3, 4, 5], |_| lcg(&mut s) * 1.5)).unwrap();
        let id = identity_flow::<f64>(3, 4, 5);
        let c = compose(&t, &id).unwrap();
        assert_eq!(c.tensor.data(), t.tensor.data());
        let ii = compose(&id, &id).unwrap();
        assert_eq!(ii.tensor.data(), id.tensor.data());
    }

    #[test]
    fn compose_rotations_adds_angles() {
        let (t1, t2) = (25.0, 40.0);
        let a = rotation_flow::<f64>(t1, 6, 6, 6);
        let b = rotation_flow::<f64>(t2, 6, 6, 6);
        let c = compose(&a, &b).unwrap();
        let direct = rotation_flow::<f64>(t1 + t2, 6, 6, 6);
        let centers = axis_centers::<f64>(6);
        let cells = 6 * 6 * 6;
        for zd in 0..6 {
            for yh in 0..6 {
                for xw in 0..6 {
                    let r = (centers[xw].powi(2) + centers[zd].powi(2)).sqrt();
                    if r > 0.99 {
                        continue; // stays inside the square under both rotations
                    }
                    let cell = (zd * 6 + yh) * 6 + xw;
                    for ch in 0..3 {
                        let e = (c.tensor.data()[ch * cells + cell]
                            - direct.tensor.data()[ch * cells + cell])
                            .abs();
                        assert!(e <= 1e-4, "interior coordinate error {e}");
                    }
                }
            }
        }
    }

    #[test]
    fn downsample_identity_gives_coarse_identity() {
        let fine = identity_flow::<f64>(4, 4, 4);
        let coarse = downsample_flow(&fine).unwrap();
        let expect = identity_flow::<f64>(2, 2, 2);
        for (a, b) in coarse.tensor.data().iter().zip(expect.tensor.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn downsample_rotation_matches_coarse_rotation() {
        let fine = rotation_flow::<f64>(30.0, 4, 4, 4);
        let coarse = downsample_flow(&fine).unwrap();
        let expect = rotation_flow::<f64>(30.0, 2, 2, 2);
        for (a, b) in coarse.tensor.data().iter().zip(expect.tensor.data()) {
            assert!((a - b).abs() <= 1e-4);
        }
    }

    #[test]
    fn downsample_constant_flow_stays_constant() {
        let t = FlowField::new(Tensor::<f64>::full(&[3, 4, 4, 4], 0.37)).unwrap();
        let c = downsample_flow(&t).unwrap();
        assert!(c.tensor.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn downsample_rejects_odd_extents() {
        let t = identity_flow::<f64>(3, 4, 4);
        assert!(downsample_flow(&t).is_err());
    }

    #[test]
    fn aggregate_single_volume_is_bit_exact() {
        let f = rand_volume(&[2, 3, 3, 3], 9);
        let a = aggregate(&[f.clone()], &[]).unwrap();
        assert_eq!(a.tensor.data(), f.tensor.data());
    }

    #[test]
    fn aggregate_identical_pair_identity_flow() {
        let f = rand_volume(&[2, 3, 3, 3], 10);
        let id = identity_flow::<f64>(3, 3, 3);
        let a = aggregate(&[f.clone(), f.clone()], &[id]).unwrap();
        for (x, y) in a.tensor.data().iter().zip(f.tensor.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_matches_direct_mean_oracle() {
        let vols: Vec<_> = (0..3).map(|i| rand_volume(&[2, 4, 4, 4], 20 + i)).collect();
        let id = identity_flow::<f64>(4, 4, 4);
        let a = aggregate(&vols, &[id.clone(), id]).unwrap();
        for i in 0..a.tensor.len() {
            let mean = (vols[0].tensor.data()[i] + vols[1].tensor.data()[i] + vols[2].tensor.data()[i]) / 3.0;
            assert!((a.tensor.data()[i] - mean).abs() <= 1e-6);
        }
    }

    #[test]
    fn resample_is_linear_in_source() {
        let f = rand_volume(&[2, 4, 4, 4], 30);
        let g = rand_volume(&[2, 4, 4, 4], 31);
        let mut s = 99u64;
        let flow = FlowField::new(Tensor::from_fn(&[3, 4, 4, 4], |_| lcg(&mut s) * 1.2)).unwrap();
        let (a, b) = (1.3, -0.7);
        let mut combo = f.tensor.scale(a);
        combo.add_scaled(b, &g.tensor).unwrap();
        let lhs = resample(&FeatureVolume::new(combo).unwrap(), &flow);
        let mut rhs = resample(&f, &flow).tensor.scale(a);
        rhs.add_scaled(b, &resample(&g, &flow).tensor).unwrap();
        for (x, y) in lhs.tensor.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn resample_respects_mass_bound() {
        let f = rand_volume(&[2, 4, 4, 4], 40);
        let mut s = 123u64;
        let flow = FlowField::new(Tensor::from_fn(&[3, 5, 5, 5], |_| lcg(&mut s) * 2.0)).unwrap();
        let out = resample(&f, &flow);
        assert!(out.tensor.max_abs() <= f.tensor.max_abs() + 1e-12);
    }

    #[test]
    fn rotation_cycle_recovers_smoothed_volume() {
        // band-limit a random volume by repeated down/up resizing
        let raw = rand_volume(&[1, 16, 16, 16], 50);
        let down = crate::kernels::downsample2x(&raw.tensor, 3).unwrap();
        let down2 = crate::kernels::downsample2x(&down, 3).unwrap();
        let up = crate::kernels::upsample2x(&down2, 3).unwrap();
        let smooth = FeatureVolume::new(crate::kernels::upsample2x(&up, 3).unwrap()).unwrap();
        let theta = 50.0;
        let once = resample(&smooth, &rotation_flow(theta, 16, 16, 16));
        let back = resample(&once, &rotation_flow(-theta, 16, 16, 16));
        let centers = axis_centers::<f64>(16);
        let mut num = 0.0;
        let mut den = 0.0;
        for zd in 0..16 {
            for yh in 0..16 {
                for xw in 0..16 {
                    let r = (centers[xw].powi(2) + centers[zd].powi(2)).sqrt();
                    if r > 0.7 {
                        continue;
                    }
                    let i = (zd * 16 + yh) * 16 + xw;
                    let d = back.tensor.data()[i] - smooth.tensor.data()[i];
                    num += d * d;
                    den += smooth.tensor.data()[i].powi(2);
                }
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 0.05, "interior rotation cycle error {rel}");
    }

    #[test]
    fn resample_backward_identity_passes_gradient_through() {
        let f = rand_volume(&[2, 3, 3, 3], 60);
        let id = identity_flow::<f64>(3, 3, 3);
        let mut s = 7u64;
        let g = Tensor::from_fn(&[2, 3, 3, 3], |_| lcg(&mut s));
        let (gf, gt) = resample_backward(&g, &f, &id).unwrap();
        assert_eq!(gf.data(), g.data());
        // constant volume has zero spatial derivative
        let cf = FeatureVolume::new(Tensor::full(&[2, 3, 3, 3], 4.2)).unwrap();
        let (_, gt_const) = resample_backward(&g, &cf, &id).unwrap();
        assert!(gt_const.data().iter().all(|&v| v.abs() < 1e-12));
        let _ = gt;
    }

    #[test]
    fn resample_gradients_match_finite_differences() {
        use crate::gradcheck::{grad_check, weighted_sum, FD_STEP};
        let f = rand_volume(&[2, 3, 4, 3], 70);
        // sample points strictly inside cells, away from kinks
        let mut s = 5u64;
        let flow = FlowField::new(Tensor::from_fn(&[3, 3, 3, 3], |_| {
            0.25 + 0.4 * lcg(&mut s)
        }))
        .unwrap();
        let mut s2 = 55u64;
        let g = Tensor::from_fn(&[2, 3, 3, 3], |_| lcg(&mut s2));

        let err = grad_check(
            &[f.tensor.clone(), flow.tensor.clone()],
            |xs| {
                let fv = FeatureVolume::new(xs[0].clone())?;
                let fl = FlowField::new(xs[1].clone())?;
                Ok(weighted_sum(&resample(&fv, &fl).tensor, &g))
            },
            |xs| {
                let fv = FeatureVolume::new(xs[0].clone())?;
                let fl = FlowField::new(xs[1].clone())?;
                let (gf, gt) = resample_backward(&g, &fv, &fl)?;
                Ok(vec![gf, gt])
            },
            FD_STEP,
        )
        .unwrap();
        assert!(err <= 1e-5, "resample grad check failed: {err}");
    }
}
