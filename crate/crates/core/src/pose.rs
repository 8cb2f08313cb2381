//! Keypoint poses and their heatmap encoding, the conditioning signal for
//! the flow network and the discriminators.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gaussian footprint of a keypoint, in cells of the target grid.
pub const HEATMAP_SIGMA: f64 = 1.5;

/// 2D keypoints in normalized image coordinates, `u` (width) and `v`
/// (height) in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub keypoints: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
}

impl Pose {
    pub fn new(keypoints: Vec<[f64; 2]>) -> Self {
        let visibility = vec![true; keypoints.len()];
        Pose {
            keypoints,
            visibility,
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Render one isotropic Gaussian per keypoint onto a `[K, H, W]` grid.
/// Invisible keypoints produce an all-zero channel; visible ones are
/// rendered even when (partially) outside the frame.
pub fn pose_to_heatmaps<S: Scalar>(pose: &Pose, h: usize, w: usize) -> Tensor<S> {
    let k = pose.len();
    let mut t = Tensor::zeros(&[k, h, w]);
    let inv_two_sigma2 = 1.0 / (2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA);
    {
        let data = t.data_mut();
        let mut col = vec![0.0f64; h];
        let mut row = vec![0.0f64; w];
        for (ki, (kp, &vis)) in pose.keypoints.iter().zip(&pose.visibility).enumerate() {
            if !vis {
                continue;
            }
            // keypoint position in cell units under the cell-center convention
            let pw = (kp[0] + 1.0) / 2.0 * (w.max(2) - 1) as f64;
            let ph = (kp[1] + 1.0) / 2.0 * (h.max(2) - 1) as f64;
            // the isotropic Gaussian separates into per-axis factors
            for (yh, c) in col.iter_mut().enumerate() {
                let dy = yh as f64 - ph;
                *c = (-dy * dy * inv_two_sigma2).exp();
            }
            for (xw, r) in row.iter_mut().enumerate() {
                let dx = xw as f64 - pw;
                *r = (-dx * dx * inv_two_sigma2).exp();
            }
            for yh in 0..h {
                for xw in 0..w {
                    data[(ki * h + yh) * w + xw] = S::from_f64_c(col[yh] * row[xw]);
                }
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_keypoint_peaks_at_one() {
        let pose = Pose::new(vec![[0.0, 0.0]]);
        let hm = pose_to_heatmaps::<f64>(&pose, 5, 5);
        assert_eq!(hm.data()[2 * 5 + 2], 1.0);
        assert!(hm.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn invisible_keypoint_is_zero_channel() {
        let mut pose = Pose::new(vec![[0.0, 0.0], [0.5, 0.5]]);
        pose.visibility[1] = false;
        let hm = pose_to_heatmaps::<f64>(&pose, 4, 4);
        assert!(hm.data()[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn off_center_keypoint_matches_closed_form() {
        let pose = Pose::new(vec![[0.3, -0.45]]);
        let (h, w) = (6usize, 8usize);
        let hm = pose_to_heatmaps::<f64>(&pose, h, w);
        let pw = (0.3 + 1.0) / 2.0 * (w - 1) as f64;
        let ph = (-0.45 + 1.0) / 2.0 * (h - 1) as f64;
        for yh in 0..h {
            for xw in 0..w {
                let d2 = (yh as f64 - ph).powi(2) + (xw as f64 - pw).powi(2);
                let expected = (-d2 / (2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA)).exp();
                assert!((hm.data()[yh * w + xw] - expected).abs() <= 1e-6);
            }
        }
    }
}
