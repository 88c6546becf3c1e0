//! Fused forward/backward kernels for the kinematic ops of [`super::Graph`].
//!
//! Rotation matrices are stored as 9 row-major values.

use super::tensor::Tensor;
use crate::error::{Error, Result};

type M3 = [f64; 9];

fn mat_mul(a: &[f64], b: &[f64]) -> M3 {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
    c
}

/// `a * b^T`
fn mat_mul_bt(a: &[f64], b: &[f64]) -> M3 {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] =
                a[i * 3] * b[j * 3] + a[i * 3 + 1] * b[j * 3 + 1] + a[i * 3 + 2] * b[j * 3 + 2];
        }
    }
    c
}

/// `a^T * b`
fn mat_mul_at(a: &[f64], b: &[f64]) -> M3 {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = a[i] * b[j] + a[3 + i] * b[3 + j] + a[6 + i] * b[6 + j];
        }
    }
    c
}

fn mat_vec(a: &[f64], v: &[f64]) -> [f64; 3] {
    [
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    ]
}

fn mat_t_vec(a: &[f64], v: &[f64]) -> [f64; 3] {
    [
        a[0] * v[0] + a[3] * v[1] + a[6] * v[2],
        a[1] * v[0] + a[4] * v[1] + a[7] * v[2],
        a[2] * v[0] + a[5] * v[1] + a[8] * v[2],
    ]
}

pub(crate) fn quat_to_rotmat(q: &[f64]) -> M3 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

pub(super) fn quat_to_rotmat_forward(q: &Tensor) -> Tensor {
    let n = q.rows();
    let mut out = Vec::with_capacity(n * 9);
    for r in 0..n {
        out.extend_from_slice(&quat_to_rotmat(q.row(r)));
    }
    let mut shape = q.shape().to_vec();
    *shape.last_mut().unwrap() = 9;
    Tensor::new(&shape, out).unwrap()
}

pub(super) fn quat_to_rotmat_backward(q: &[f64], g: &[f64], gq: &mut [f64]) {
    for (r, (qr, gr)) in q.chunks(4).zip(g.chunks(9)).enumerate() {
        let (w, x, y, z) = (qr[0], qr[1], qr[2], qr[3]);
        // d R / d w, x, y, z, each row-major 3x3
        let dw = [
            0.0,
            -2.0 * z,
            2.0 * y,
            2.0 * z,
            0.0,
            -2.0 * x,
            -2.0 * y,
            2.0 * x,
            0.0,
        ];
        let dx = [
            0.0,
            2.0 * y,
            2.0 * z,
            2.0 * y,
            -4.0 * x,
            -2.0 * w,
            2.0 * z,
            2.0 * w,
            -4.0 * x,
        ];
        let dy = [
            -4.0 * y,
            2.0 * x,
            2.0 * w,
            2.0 * x,
            0.0,
            2.0 * z,
            -2.0 * w,
            2.0 * z,
            -4.0 * y,
        ];
        let dz = [
            -4.0 * z,
            -2.0 * w,
            2.0 * x,
            2.0 * w,
            -4.0 * z,
            2.0 * y,
            2.0 * x,
            2.0 * y,
            0.0,
        ];
        for (k, d) in [dw, dx, dy, dz].iter().enumerate() {
            gq[r * 4 + k] += d.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

fn frame_dims(t: &Tensor, joints: usize, width: usize, op: &'static str) -> Result<usize> {
    if joints == 0 || !t.numel().is_multiple_of(joints * width) {
        return Err(Error::shape(
            op,
            format!("{:?} for {joints} joints", t.shape()),
        ));
    }
    Ok(t.numel() / (joints * width))
}

pub(super) fn world_rotations_forward(local: &Tensor, parents: &[Option<usize>]) -> Result<Tensor> {
    let j = parents.len();
    let frames = frame_dims(local, j, 9, "world_rotations")?;
    let l = local.data();
    let mut out = vec![0.0; l.len()];
    for f in 0..frames {
        let base = f * j * 9;
        for k in 0..j {
            let lk = &l[base + k * 9..base + k * 9 + 9];
            let w = match parents[k] {
                None => lk.try_into().unwrap(),
                Some(p) => mat_mul(&out[base + p * 9..base + p * 9 + 9], lk),
            };
            out[base + k * 9..base + k * 9 + 9].copy_from_slice(&w);
        }
    }
    Tensor::new(&[frames, j, 9], out)
}

pub(super) fn world_rotations_backward(
    local: &[f64],
    world: &[f64],
    parents: &[Option<usize>],
    g: &[f64],
    gl: &mut [f64],
) {
    let j = parents.len();
    let mut gw = g.to_vec();
    for f in 0..local.len() / (j * 9) {
        let base = f * j * 9;
        for k in (0..j).rev() {
            let gk: M3 = gw[base + k * 9..base + k * 9 + 9].try_into().unwrap();
            let lk = &local[base + k * 9..base + k * 9 + 9];
            match parents[k] {
                None => {
                    gl[base + k * 9..base + k * 9 + 9]
                        .iter_mut()
                        .zip(&gk)
                        .for_each(|(a, b)| *a += b);
                }
                Some(p) => {
                    let wp = &world[base + p * 9..base + p * 9 + 9];
                    // W_k = W_p L_k
                    let dl = mat_mul_at(wp, &gk);
                    let dp = mat_mul_bt(&gk, lk);
                    gl[base + k * 9..base + k * 9 + 9]
                        .iter_mut()
                        .zip(&dl)
                        .for_each(|(a, b)| *a += b);
                    gw[base + p * 9..base + p * 9 + 9]
                        .iter_mut()
                        .zip(&dp)
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

fn offset_of(offsets: &Tensor, frame: usize, joint: usize, joints: usize) -> &[f64] {
    let base = if offsets.numel() == joints * 3 {
        0
    } else {
        frame * joints * 3
    };
    &offsets.data()[base + joint * 3..base + joint * 3 + 3]
}

pub(super) fn fk_positions_forward(
    world: &Tensor,
    root: &Tensor,
    offsets: &Tensor,
    parents: &[Option<usize>],
) -> Result<Tensor> {
    let j = parents.len();
    let frames = frame_dims(world, j, 9, "fk_positions")?;
    if root.numel() != frames * 3 {
        return Err(Error::shape(
            "fk_positions",
            format!("root {:?} for {frames} frames", root.shape()),
        ));
    }
    if offsets.numel() != j * 3 && offsets.numel() != frames * j * 3 {
        return Err(Error::shape(
            "fk_positions",
            format!("offsets {:?}", offsets.shape()),
        ));
    }
    let w = world.data();
    let mut out = vec![0.0; frames * j * 3];
    for f in 0..frames {
        let base = f * j * 3;
        for k in 0..j {
            let p = match parents[k] {
                None => [
                    root.data()[f * 3],
                    root.data()[f * 3 + 1],
                    root.data()[f * 3 + 2],
                ],
                Some(p) => {
                    let wp = &w[(f * j + p) * 9..(f * j + p) * 9 + 9];
                    let o = mat_vec(wp, offset_of(offsets, f, k, j));
                    [
                        out[base + p * 3] + o[0],
                        out[base + p * 3 + 1] + o[1],
                        out[base + p * 3 + 2] + o[2],
                    ]
                }
            };
            out[base + k * 3..base + k * 3 + 3].copy_from_slice(&p);
        }
    }
    Tensor::new(&[frames, j, 3], out)
}

pub(super) fn fk_positions_backward(
    world: &[f64],
    offsets: &Tensor,
    parents: &[Option<usize>],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let j = parents.len();
    let frames = world.len() / (j * 9);
    let mut gw = vec![0.0; world.len()];
    let mut groot = vec![0.0; frames * 3];
    let mut gp = g.to_vec();
    for f in 0..frames {
        let base = f * j * 3;
        for k in (0..j).rev() {
            let gk = [gp[base + k * 3], gp[base + k * 3 + 1], gp[base + k * 3 + 2]];
            match parents[k] {
                None => groot[f * 3..f * 3 + 3].copy_from_slice(&gk),
                Some(p) => {
                    for a in 0..3 {
                        gp[base + p * 3 + a] += gk[a];
                    }
                    let o = offset_of(offsets, f, k, j);
                    let wb = (f * j + p) * 9;
                    for r in 0..3 {
                        for c in 0..3 {
                            gw[wb + r * 3 + c] += gk[r] * o[c];
                        }
                    }
                }
            }
        }
    }
    (gw, groot)
}

pub(super) fn lbs_forward(
    points: &Tensor,
    weights: &Tensor,
    rots: &Tensor,
    pos: &Tensor,
    tpose: &Tensor,
) -> Result<Tensor> {
    let v = points.rows();
    let j = weights.cols();
    if points.cols() != 3
        || weights.rows() != v
        || rots.numel() != j * 9
        || pos.numel() != j * 3
        || tpose.numel() != j * 3
    {
        return Err(Error::shape(
            "lbs",
            format!(
                "points {:?}, weights {:?}, rots {:?}, pos {:?}, tpose {:?}",
                points.shape(),
                weights.shape(),
                rots.shape(),
                pos.shape(),
                tpose.shape()
            ),
        ));
    }
    let (r, p, c) = (rots.data(), pos.data(), tpose.data());
    let mut out = vec![0.0; v * 3];
    for i in 0..v {
        let x = points.row(i);
        let w = weights.row(i);
        for k in 0..j {
            let d = [x[0] - c[k * 3], x[1] - c[k * 3 + 1], x[2] - c[k * 3 + 2]];
            let y = mat_vec(&r[k * 9..k * 9 + 9], &d);
            for a in 0..3 {
                out[i * 3 + a] += w[k] * (y[a] + p[k * 3 + a]);
            }
        }
    }
    Tensor::new(&[v, 3], out)
}

/// Gradients for `(points, weights, rots, pos)`.
pub(super) fn lbs_backward(
    points: &[f64],
    weights: &[f64],
    rots: &[f64],
    pos: &[f64],
    tpose: &[f64],
    g: &[f64],
) -> [Vec<f64>; 4] {
    let v = points.len() / 3;
    let j = pos.len() / 3;
    let mut gx = vec![0.0; points.len()];
    let mut gwt = vec![0.0; weights.len()];
    let mut gr = vec![0.0; rots.len()];
    let mut gpos = vec![0.0; pos.len()];
    for i in 0..v {
        let gi = &g[i * 3..i * 3 + 3];
        for k in 0..j {
            let rk = &rots[k * 9..k * 9 + 9];
            let d = [
                points[i * 3] - tpose[k * 3],
                points[i * 3 + 1] - tpose[k * 3 + 1],
                points[i * 3 + 2] - tpose[k * 3 + 2],
            ];
            let y = mat_vec(rk, &d);
            let w = weights[i * j + k];
            gwt[i * j + k] += (0..3).map(|a| gi[a] * (y[a] + pos[k * 3 + a])).sum::<f64>();
            for a in 0..3 {
                gpos[k * 3 + a] += w * gi[a];
                for b in 0..3 {
                    gr[k * 9 + a * 3 + b] += w * gi[a] * d[b];
                }
            }
            let back = mat_t_vec(rk, gi);
            for a in 0..3 {
                gx[i * 3 + a] += w * back[a];
            }
        }
    }
    [gx, gwt, gr, gpos]
}
