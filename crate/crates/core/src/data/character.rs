use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use super::{canonical_parents, stream_rng, DEFAULT_JOINTS, TEMPLATE_JOINTS};
use crate::error::{Error, Result};
use crate::geometry::{Mesh, PointCloud, Skeleton, SkinWeights, SurfaceSampler, Vec3};

/// Template rest offsets in metres (y up, +x to the character's left).
const TEMPLATE_OFFSETS: [[f64; 3]; TEMPLATE_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.2, 0.0],
    [0.1, -0.08, 0.0],
    [-0.1, -0.08, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, 0.25, 0.0],
    [0.18, 0.15, 0.0],
    [-0.18, 0.15, 0.0],
    [0.28, 0.0, 0.0],
    [-0.28, 0.0, 0.0],
];

/// End of the bone a joint owns when none of its children are present.
const TEMPLATE_TIPS: [[f64; 3]; TEMPLATE_JOINTS] = [
    [0.0, 0.2, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, 0.2, 0.0],
    [0.28, 0.0, 0.0],
    [-0.28, 0.0, 0.0],
    [0.25, 0.0, 0.0],
    [-0.25, 0.0, 0.0],
];

const TEMPLATE_RADII: [f64; TEMPLATE_JOINTS] = [
    0.09, 0.1, 0.075, 0.075, 0.11, 0.055, 0.055, 0.09, 0.05, 0.05, 0.04, 0.04,
];

#[derive(Debug, Clone, PartialEq)]
pub struct CharacterConfig {
    pub joints: usize,
    pub global_scale: (f64, f64),
    pub bone_jitter: (f64, f64),
    pub radius_scale: (f64, f64),
    /// Softmin temperature as a fraction of the mean bone length.
    pub tau_factor: f64,
    /// Latitude rings per hemisphere of each capsule.
    pub rings: usize,
    /// Vertices around each ring.
    pub segments: usize,
}

impl Default for CharacterConfig {
    fn default() -> Self {
        Self {
            joints: DEFAULT_JOINTS,
            global_scale: (0.85, 1.15),
            bone_jitter: (0.9, 1.1),
            radius_scale: (0.8, 1.25),
            tau_factor: 0.05,
            rings: 4,
            segments: 12,
        }
    }
}

impl CharacterConfig {
    pub fn with_joints(joints: usize) -> Self {
        Self {
            joints,
            ..Self::default()
        }
    }
}

/// A bone segment owned by `joint`, thickened by `radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct Capsule {
    pub joint: usize,
    pub start: Vec3,
    pub end: Vec3,
    pub radius: f64,
}

impl Capsule {
    pub fn distance(&self, p: &Vec3) -> f64 {
        segment_distance(p, &self.start, &self.end)
    }

    fn mesh(&self, rings: usize, segments: usize) -> Mesh {
        let axis = (self.end - self.start).normalize();
        let helper = if axis.x.abs() < 0.9 {
            Vec3::x()
        } else {
            Vec3::y()
        };
        let v = axis.cross(&helper).normalize();
        let w = axis.cross(&v);
        let r = self.radius;
        let mut vertices = vec![self.end + axis * r];
        // rings from the end pole down to the start pole
        for i in 0..2 * rings {
            let (alpha, centre) = if i < rings {
                ((i + 1) as f64 * FRAC_PI_2 / rings as f64, self.end)
            } else {
                (
                    FRAC_PI_2 + (i - rings) as f64 * FRAC_PI_2 / rings as f64,
                    self.start,
                )
            };
            for k in 0..segments {
                let theta = 2.0 * PI * k as f64 / segments as f64;
                let radial = v * theta.cos() + w * theta.sin();
                vertices.push(centre + (axis * alpha.cos() + radial * alpha.sin()) * r);
            }
        }
        let south = vertices.len();
        vertices.push(self.start - axis * r);

        let ring = |i: usize, k: usize| 1 + i * segments + k % segments;
        let mut triangles = Vec::new();
        for k in 0..segments {
            triangles.push([0, ring(0, k), ring(0, k + 1)]);
        }
        for i in 0..2 * rings - 1 {
            for k in 0..segments {
                triangles.push([ring(i, k), ring(i + 1, k), ring(i + 1, k + 1)]);
                triangles.push([ring(i, k), ring(i + 1, k + 1), ring(i, k + 1)]);
            }
        }
        for k in 0..segments {
            triangles.push([south, ring(2 * rings - 1, k + 1), ring(2 * rings - 1, k)]);
        }
        Mesh {
            vertices,
            triangles,
        }
    }
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Articulated capsule body in T-pose with analytic skinning weights.
#[derive(Debug, Clone)]
pub struct SyntheticCharacter {
    pub skeleton: Skeleton,
    pub capsules: Vec<Capsule>,
    pub mesh: Mesh,
    /// Softmin temperature of the ground-truth weights, metres.
    pub tau: f64,
    pub seed: u64,
}

impl SyntheticCharacter {
    pub fn generate(config: &CharacterConfig, seed: u64) -> Result<Self> {
        let parents = canonical_parents(config.joints)?;
        if config.rings == 0 || config.segments < 3 {
            return Err(Error::arg(
                "capsule tessellation needs rings >= 1 and segments >= 3",
            ));
        }
        let mut rng = stream_rng(seed, 0);
        let mut draw = |range: (f64, f64)| {
            if range.0 < range.1 {
                rng.random_range(range.0..range.1)
            } else {
                range.0
            }
        };
        let scale = draw(config.global_scale);
        let radius_scale = draw(config.radius_scale) * scale;
        let mut offsets = [Vec3::zeros(); TEMPLATE_JOINTS];
        let mut tips = [Vec3::zeros(); TEMPLATE_JOINTS];
        for j in 0..TEMPLATE_JOINTS {
            offsets[j] = Vec3::from(TEMPLATE_OFFSETS[j]) * scale * draw(config.bone_jitter);
            tips[j] = Vec3::from(TEMPLATE_TIPS[j]) * scale * draw(config.bone_jitter);
        }
        let radii: Vec<f64> = TEMPLATE_RADII.iter().map(|r| r * radius_scale).collect();

        let j = config.joints;
        let skeleton = Skeleton::from_rest(parents.clone(), offsets[..j].to_vec(), Vec3::zeros())?;

        let pos = skeleton.joint_positions();
        let mut capsules = Vec::new();
        for a in 0..j {
            let children: Vec<usize> = (0..j).filter(|&c| parents[c] == Some(a)).collect();
            if children.is_empty() {
                capsules.push(Capsule {
                    joint: a,
                    start: pos[a],
                    end: pos[a] + tips[a],
                    radius: radii[a],
                });
            }
            for c in children {
                capsules.push(Capsule {
                    joint: a,
                    start: pos[a],
                    end: pos[c],
                    radius: radii[a],
                });
            }
        }
        // lowest capsule point rests on the ground plane y = 0
        let lowest = capsules
            .iter()
            .map(|c| c.start.y.min(c.end.y) - c.radius)
            .fold(f64::INFINITY, f64::min);
        let lift = Vec3::new(0.0, -lowest, 0.0);
        for c in &mut capsules {
            c.start += lift;
            c.end += lift;
        }
        let skeleton = skeleton.translated(lift);
        let mut mesh = Mesh::default();
        for c in &capsules {
            mesh.append(&c.mesh(config.rings, config.segments));
        }
        let tau = config.tau_factor * skeleton.mean_bone_length();
        Ok(Self {
            skeleton,
            capsules,
            mesh,
            tau,
            seed,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    /// Vertical extent of the T-pose mesh.
    pub fn height(&self) -> f64 {
        let (lo, hi) = self
            .mesh
            .vertices
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v.y), hi.max(v.y))
            });
        hi - lo
    }

    /// Ground-truth weights: softmin over joints of the distance from each
    /// point to the nearest bone segment that joint owns.
    pub fn gt_weights(&self, points: &[Vec3]) -> SkinWeights {
        let j = self.joint_count();
        let mut data = Vec::with_capacity(points.len() * j);
        let mut d = vec![0.0; j];
        for p in points {
            d.fill(f64::INFINITY);
            for c in &self.capsules {
                d[c.joint] = d[c.joint].min(c.distance(p));
            }
            let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
            let e: Vec<f64> = d.iter().map(|x| (-(x - dmin) / self.tau).exp()).collect();
            let s: f64 = e.iter().sum();
            data.extend(e.iter().map(|x| x / s));
        }
        SkinWeights::new(j, data).expect("softmin rows lie on the simplex")
    }

    /// `n` uniform surface samples of the T-pose body.
    pub fn tpose_cloud(&self, n: usize, seed: u64) -> Result<PointCloud> {
        PointCloud::new(SurfaceSampler::new(&self.mesh)?.sample_points(n, seed))
    }
}
