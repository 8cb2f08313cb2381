//! Synthetic articulated puppet: capsule skeleton, forward kinematics and
//! an orthographic rasterizer with Lambertian-style depth shading. Supplies
//! images, binary masks, keypoints, pose parameters and clean background
//! plates, all deterministic from the seed.
//!
//! World coordinates: x right, y up, z toward the viewer, one unit = half
//! the frame. The image row coordinate is v = -y. The azimuth rotates the
//! figure about the vertical axis through its root, matching the volume
//! rotation model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pose::Pose;
use crate::tensor::Tensor;

/// Vertical world position of the pelvis for a centered figure.
pub const PELVIS_BASE_Y: f64 = -0.15;

/// Minimum shading factor at capsule silhouette edges. Keeps every
/// foreground pixel strictly brighter than any background color, so the
/// mask is exactly the set of pixels that differ from the plate.
pub const SHADE_FLOOR: f64 = 0.45;

/// Names of the 12 keypoints, in channel order.
pub const KEYPOINT_NAMES: [&str; 12] = [
    "pelvis", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
    "l_knee", "l_ankle", "r_knee", "r_ankle",
];

pub const KEYPOINT_COUNT: usize = 12;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    Flat { color: [f64; 3] },
    VerticalGradient { top: [f64; 3], bottom: [f64; 3] },
}

/// Per-identity capsule geometry and coloring.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct PuppetSpec {
    pub torso_len: f64,
    pub torso_radius: f64,
    pub head_len: f64,
    pub head_radius: f64,
    pub shoulder_offset: f64,
    pub hip_offset: f64,
    pub upper_arm_len: f64,
    pub lower_arm_len: f64,
    pub arm_radius: f64,
    pub upper_leg_len: f64,
    pub lower_leg_len: f64,
    pub leg_radius: f64,
    /// Colors for torso, head, l/r upper arm, l/r lower arm, l/r upper leg,
    /// l/r lower leg.
    pub colors: [[f64; 3]; 10],
    pub background: Background,
}

/// Joint-angle limits in radians.
#[derive(Clone, Copy, Debug)]
pub struct AngleLimits {
    pub shoulder: (f64, f64),
    pub elbow: (f64, f64),
    pub hip: (f64, f64),
    pub knee: (f64, f64),
    pub neck: (f64, f64),
    pub torso: (f64, f64),
}

impl Default for AngleLimits {
    fn default() -> Self {
        let d90 = std::f64::consts::FRAC_PI_2;
        AngleLimits {
            shoulder: (-d90, d90),
            elbow: (0.0, 150f64.to_radians()),
            hip: (-d90, d90),
            knee: (0.0, 150f64.to_radians()),
            neck: (-30f64.to_radians(), 30f64.to_radians()),
            torso: (-20f64.to_radians(), 20f64.to_radians()),
        }
    }
}

/// Angles are `[l_shoulder, r_shoulder, l_elbow, r_elbow, l_hip, r_hip,
/// l_knee, r_knee, neck, torso]`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct PuppetPose {
    pub angles: [f64; 10],
    pub azimuth_deg: f64,
    pub root_offset: [f64; 2],
}

impl PuppetPose {
    pub fn canonical() -> Self {
        PuppetPose {
            angles: [0.0; 10],
            azimuth_deg: 0.0,
            root_offset: [0.0, 0.0],
        }
    }
}

/// One rendered frame.
pub struct PuppetSample {
    /// `[3, H, W]` in [-1, 1].
    pub rgb: Tensor<f32>,
    /// `[H, W]` in {0, 1}.
    pub mask: Tensor<f32>,
    /// Projected joints in normalized image coordinates.
    pub keypoints: Pose,
    pub pose: PuppetPose,
    /// Clean plate `[3, H, W]` in [-1, 1].
    pub background: Tensor<f32>,
}

struct Capsule {
    p0: [f64; 3],
    p1: [f64; 3],
    radius: f64,
    color: [f64; 3],
}

fn rot2(p: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [p[0] * c - p[1] * s, p[0] * s + p[1] * c]
}

/// Forward kinematics in the body plane, then azimuth rotation about the
/// root's vertical axis. Returns the capsules and the 12 keypoints.
fn skeleton(spec: &PuppetSpec, pose: &PuppetPose) -> (Vec<Capsule>, Vec<[f64; 2]>) {
    let [lsh, rsh, lel, rel, lhip, rhip, lknee, rknee, neck_a, torso_a] = pose.angles;
    let root = [pose.root_offset[0], PELVIS_BASE_Y + pose.root_offset[1]];

    let torso_dir = rot2([0.0, 1.0], torso_a);
    let neck = [root[0] + torso_dir[0] * spec.torso_len, root[1] + torso_dir[1] * spec.torso_len];
    let head_dir = rot2(torso_dir, neck_a);
    let head = [neck[0] + head_dir[0] * spec.head_len, neck[1] + head_dir[1] * spec.head_len];

    // torso-local horizontal axis
    let torso_perp = [torso_dir[1], -torso_dir[0]];
    let l_shoulder = [neck[0] - torso_perp[0] * spec.shoulder_offset, neck[1] - torso_perp[1] * spec.shoulder_offset];
    let r_shoulder = [neck[0] + torso_perp[0] * spec.shoulder_offset, neck[1] + torso_perp[1] * spec.shoulder_offset];

    let down = [0.0, -1.0];
    let arm = |shoulder: [f64; 2], sh_angle: f64, el_angle: f64, side: f64| {
        let ua_dir = rot2(down, side * sh_angle);
        let elbow = [shoulder[0] + ua_dir[0] * spec.upper_arm_len, shoulder[1] + ua_dir[1] * spec.upper_arm_len];
        let la_dir = rot2(ua_dir, side * el_angle);
        let wrist = [elbow[0] + la_dir[0] * spec.lower_arm_len, elbow[1] + la_dir[1] * spec.lower_arm_len];
        (elbow, wrist)
    };
    let (l_elbow, l_wrist) = arm(l_shoulder, lsh, lel, 1.0);
    let (r_elbow, r_wrist) = arm(r_shoulder, rsh, rel, -1.0);

    let l_hip = [root[0] - spec.hip_offset, root[1]];
    let r_hip = [root[0] + spec.hip_offset, root[1]];
    let leg = |hip: [f64; 2], hip_angle: f64, knee_angle: f64, side: f64| {
        let ul_dir = rot2(down, side * hip_angle);
        let knee = [hip[0] + ul_dir[0] * spec.upper_leg_len, hip[1] + ul_dir[1] * spec.upper_leg_len];
        let ll_dir = rot2(ul_dir, side * knee_angle);
        let ankle = [knee[0] + ll_dir[0] * spec.lower_leg_len, knee[1] + ll_dir[1] * spec.lower_leg_len];
        (knee, ankle)
    };
    let (l_knee, l_ankle) = leg(l_hip, lhip, lknee, 1.0);
    let (r_knee, r_ankle) = leg(r_hip, rhip, rknee, -1.0);

    let segs: [([f64; 2], [f64; 2], f64); 10] = [
        (root, neck, spec.torso_radius),
        (neck, head, spec.head_radius),
        (l_shoulder, l_elbow, spec.arm_radius),
        (l_elbow, l_wrist, spec.arm_radius),
        (r_shoulder, r_elbow, spec.arm_radius),
        (r_elbow, r_wrist, spec.arm_radius),
        (l_hip, l_knee, spec.leg_radius),
        (l_knee, l_ankle, spec.leg_radius),
        (r_hip, r_knee, spec.leg_radius),
        (r_knee, r_ankle, spec.leg_radius),
    ];

    // azimuth rotation about the vertical line through the root
    let az = pose.azimuth_deg.to_radians();
    let (s, c) = az.sin_cos();
    let lift = |p: [f64; 2]| -> [f64; 3] {
        let dx = p[0] - root[0];
        [root[0] + dx * c, p[1], dx * s]
    };

    let capsules = segs
        .iter()
        .zip(spec.colors.iter())
        .map(|(&(a, b, r), &color)| Capsule {
            p0: lift(a),
            p1: lift(b),
            radius: r,
            color,
        })
        .collect();

    let kps = [
        root, head, l_shoulder, l_elbow, l_wrist, r_shoulder, r_elbow, r_wrist, l_knee, l_ankle,
        r_knee, r_ankle,
    ];
    let keypoints = kps
        .iter()
        .map(|&p| {
            let q = lift(p);
            [q[0], -q[1]]
        })
        .collect();
    (capsules, keypoints)
}

/// Ray-capsule test for the orthographic ray through `(x, y)`: distance to
/// the projected segment, plus the front-surface depth when hit.
fn hit(c: &Capsule, x: f64, y: f64) -> Option<(f64, f64)> {
    let ax = c.p0[0];
    let ay = c.p0[1];
    let bx = c.p1[0];
    let by = c.p1[1];
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (px, py) = (ax + t * dx, ay + t * dy);
    let d2 = (x - px) * (x - px) + (y - py) * (y - py);
    let r2 = c.radius * c.radius;
    if d2 > r2 {
        return None;
    }
    let bulge = (r2 - d2).sqrt();
    let z = c.p0[2] + t * (c.p1[2] - c.p0[2]) + bulge;
    let shade = SHADE_FLOOR + (1.0 - SHADE_FLOOR) * (bulge / c.radius);
    Some((z, shade))
}

fn background_color(bg: &Background, h: usize, n: usize) -> [f64; 3] {
    match bg {
        Background::Flat { color } => *color,
        Background::VerticalGradient { top, bottom } => {
            let t = if n > 1 { h as f64 / (n - 1) as f64 } else { 0.0 };
            [
                top[0] + (bottom[0] - top[0]) * t,
                top[1] + (bottom[1] - top[1]) * t,
                top[2] + (bottom[2] - top[2]) * t,
            ]
        }
    }
}

/// Rasterize one frame. Deterministic; the mask is exactly the coverage
/// set of the capsules.
pub fn render(spec: &PuppetSpec, pose: &PuppetPose, resolution: usize) -> PuppetSample {
    assert!(resolution >= 16, "resolution must be >= 16");
    let n = resolution;
    let (capsules, kps) = skeleton(spec, pose);

    let mut rgb = Tensor::<f32>::zeros(&[3, n, n]);
    let mut mask = Tensor::<f32>::zeros(&[n, n]);
    let mut bg_plate = Tensor::<f32>::zeros(&[3, n, n]);

    let to_unit = |i: usize| (2.0 * i as f64 - (n - 1) as f64) / (n - 1) as f64;
    for h in 0..n {
        let v = to_unit(h);
        let y = -v;
        let bg = background_color(&spec.background, h, n);
        for w in 0..n {
            let x = to_unit(w);
            let mut best: Option<(f64, [f64; 3])> = None;
            for c in &capsules {
                if let Some((z, shade)) = hit(c, x, y) {
                    let shaded = [c.color[0] * shade, c.color[1] * shade, c.color[2] * shade];
                    if best.map_or(true, |(bz, _)| z > bz) {
                        best = Some((z, shaded));
                    }
                }
            }
            let color = best.map(|(_, c)| c).unwrap_or(bg);
            for ch in 0..3 {
                rgb.data_mut()[(ch * n + h) * n + w] = (2.0 * color[ch] - 1.0) as f32;
                bg_plate.data_mut()[(ch * n + h) * n + w] = (2.0 * bg[ch] - 1.0) as f32;
            }
            if best.is_some() {
                mask.data_mut()[h * n + w] = 1.0;
            }
        }
    }

    PuppetSample {
        rgb,
        mask,
        keypoints: Pose::new(kps),
        pose: pose.clone(),
        background: bg_plate,
    }
}

/// Saturated capsule color: one channel in [0.7, 1], the rest in [0, 0.6].
fn sample_color(rng: &mut impl Rng) -> [f64; 3] {
    let hi = rng.gen_range(0.7..1.0);
    let mid = rng.gen_range(0.0..0.6);
    let lo = rng.gen_range(0.0..0.6);
    match rng.gen_range(0..3) {
        0 => [hi, mid, lo],
        1 => [lo, hi, mid],
        _ => [mid, lo, hi],
    }
}

/// Dark background color, strictly separated from shaded capsule colors.
fn sample_bg_color(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.gen_range(0.02..0.25),
        rng.gen_range(0.02..0.25),
        rng.gen_range(0.02..0.25),
    ]
}

pub fn sample_spec(rng: &mut impl Rng) -> PuppetSpec {
    let background = if rng.gen_bool(0.5) {
        Background::Flat {
            color: sample_bg_color(rng),
        }
    } else {
        Background::VerticalGradient {
            top: sample_bg_color(rng),
            bottom: sample_bg_color(rng),
        }
    };
    let mut colors = [[0.0; 3]; 10];
    for c in &mut colors {
        *c = sample_color(rng);
    }
    PuppetSpec {
        torso_len: rng.gen_range(0.42..0.52),
        torso_radius: rng.gen_range(0.10..0.13),
        head_len: rng.gen_range(0.16..0.22),
        head_radius: rng.gen_range(0.10..0.13),
        shoulder_offset: rng.gen_range(0.10..0.14),
        hip_offset: rng.gen_range(0.07..0.10),
        upper_arm_len: rng.gen_range(0.20..0.26),
        lower_arm_len: rng.gen_range(0.18..0.24),
        arm_radius: rng.gen_range(0.035..0.05),
        upper_leg_len: rng.gen_range(0.24..0.30),
        lower_leg_len: rng.gen_range(0.22..0.28),
        leg_radius: rng.gen_range(0.04..0.06),
        colors,
        background,
    }
}

/// Uniform joint angles within limits, azimuth uniform in [-180, 180).
pub fn sample_pose(rng: &mut impl Rng, limits: &AngleLimits) -> PuppetPose {
    let mut angles = [0.0; 10];
    let pairs = [
        limits.shoulder,
        limits.shoulder,
        limits.elbow,
        limits.elbow,
        limits.hip,
        limits.hip,
        limits.knee,
        limits.knee,
        limits.neck,
        limits.torso,
    ];
    for (a, (lo, hi)) in angles.iter_mut().zip(pairs) {
        *a = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    }
    PuppetPose {
        angles,
        azimuth_deg: rng.gen_range(-180.0..180.0),
        root_offset: [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)],
    }
}

/// Foreground image: puppet pixels kept, background replaced by -1.
pub fn foreground_image(rgb: &Tensor<f32>, mask: &Tensor<f32>) -> Tensor<f32> {
    let n = mask.shape()[0] * mask.shape()[1];
    let mut out = rgb.clone();
    for ch in 0..3 {
        for i in 0..n {
            if mask.data()[i] == 0.0 {
                out.data_mut()[ch * n + i] = -1.0;
            }
        }
    }
    out
}
