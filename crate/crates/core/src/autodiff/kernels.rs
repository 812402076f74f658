//! Volumetric kernels used by the graph ops.
//!
//! Convolution is lowered to `im2col` + GEMM. All loops run in a fixed order
//! on the calling thread, so results are bitwise reproducible.

use crate::scalar::Scalar;

/// Geometry of a same-padded cubic convolution over `[c, x, y, z]` data.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub dims: [usize; 3],
    pub k: usize,
}

impl ConvGeom {
    fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }
}

/// Valid output range along one axis for kernel tap `t` with padding `p`.
#[inline]
fn span(n: usize, t: usize, p: usize) -> (usize, usize) {
    // source index = out + t - p must lie in [0, n)
    let lo = p.saturating_sub(t);
    let hi = (n + p).saturating_sub(t).min(n);
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let [nx, ny, nz] = g.dims;
    let (k, p, n) = (g.k, g.k / 2, g.voxels());
    cols.fill(T::zero());
    let mut row = 0;
    for ci in 0..g.c_in {
        let src = &input[ci * n..(ci + 1) * n];
        for a in 0..k {
            let (x0, x1) = span(nx, a, p);
            for b in 0..k {
                let (y0, y1) = span(ny, b, p);
                for c in 0..k {
                    let (z0, z1) = span(nz, c, p);
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for x in x0..x1 {
                        let sx = x + a - p;
                        for y in y0..y1 {
                            let sy = y + b - p;
                            let d = (x * ny + y) * nz;
                            let s = (sx * ny + sy) * nz;
                            let sz = z0 + c - p;
                            let len = z1 - z0;
                            dst[d + z0..d + z0 + len].copy_from_slice(&src[s + sz..s + sz + len]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], grad_in: &mut [T]) {
    let [nx, ny, nz] = g.dims;
    let (k, p, n) = (g.k, g.k / 2, g.voxels());
    let mut row = 0;
    for ci in 0..g.c_in {
        let dst = &mut grad_in[ci * n..(ci + 1) * n];
        for a in 0..k {
            let (x0, x1) = span(nx, a, p);
            for b in 0..k {
                let (y0, y1) = span(ny, b, p);
                for c in 0..k {
                    let (z0, z1) = span(nz, c, p);
                    let src = &cols[row * n..(row + 1) * n];
                    for x in x0..x1 {
                        let sx = x + a - p;
                        for y in y0..y1 {
                            let sy = y + b - p;
                            let s = (x * ny + y) * nz;
                            let d = (sx * ny + sy) * nz;
                            let sz = z0 + c - p;
                            for (o, i) in dst[d + sz..d + sz + (z1 - z0)]
                                .iter_mut()
                                .zip(&src[s + z0..s + z1])
                            {
                                *o += *i;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let n = g.voxels();
    let mut cols = vec![T::zero(); g.rows() * n];
    im2col(g, input, &mut cols);
    let mut out = vec![T::zero(); g.c_out * n];
    for (co, chunk) in out.chunks_mut(n).enumerate() {
        chunk.fill(bias[co]);
    }
    T::gemm(g.c_out, g.rows(), n, T::one(), kernel, false, &cols, false, T::one(), &mut out);
    out
}

/// Gradients of a convolution given the upstream gradient. Each requested
/// slot is accumulated into.
pub(crate) fn conv3d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let n = g.voxels();
    let rows = g.rows();
    if let Some(gb) = grad_bias {
        for (co, chunk) in grad_out.chunks(n).enumerate() {
            gb[co] += chunk.iter().copied().sum::<T>();
        }
    }
    if let Some(gk) = grad_kernel {
        let mut cols = vec![T::zero(); rows * n];
        im2col(g, input, &mut cols);
        T::gemm(g.c_out, n, rows, T::one(), grad_out, false, &cols, true, T::one(), gk);
    }
    if let Some(gi) = grad_input {
        let mut dcols = vec![T::zero(); rows * n];
        T::gemm(rows, g.c_out, n, T::one(), kernel, true, grad_out, false, T::zero(), &mut dcols);
        col2im(g, &dcols, gi);
    }
}

/// 2x2x2 max pooling with stride 2. Returns values and the flat input index
/// of each maximum (first in scan order on ties).
pub(crate) fn maxpool3d_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> (Vec<T>, Vec<usize>) {
    let [c, nx, ny, nz] = dims;
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let mut out = Vec::with_capacity(c * ox * oy * oz);
    let mut arg = Vec::with_capacity(out.capacity());
    for ch in 0..c {
        let base = ch * nx * ny * nz;
        for x in 0..ox {
            for y in 0..oy {
                for z in 0..oz {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                let i = base + ((2 * x + dx) * ny + 2 * y + dy) * nz + 2 * z + dz;
                                let v = input[i];
                                if best == usize::MAX || v > best_v {
                                    best = i;
                                    best_v = v;
                                }
                            }
                        }
                    }
                    out.push(best_v);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour x2 upsampling along every spatial axis.
pub(crate) fn upsample3d_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> Vec<T> {
    let [c, nx, ny, nz] = dims;
    let (ux, uy, uz) = (2 * nx, 2 * ny, 2 * nz);
    let mut out = vec![T::zero(); c * ux * uy * uz];
    for ch in 0..c {
        for x in 0..ux {
            for y in 0..uy {
                let dst = ((ch * ux + x) * uy + y) * uz;
                let src = ((ch * nx + x / 2) * ny + y / 2) * nz;
                for z in 0..uz {
                    out[dst + z] = input[src + z / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample3d_backward<T: Scalar>(dims: [usize; 4], grad_out: &[T], grad_in: &mut [T]) {
    let [c, nx, ny, nz] = dims;
    let (ux, uy, uz) = (2 * nx, 2 * ny, 2 * nz);
    for ch in 0..c {
        for x in 0..ux {
            for y in 0..uy {
                let src = ((ch * ux + x) * uy + y) * uz;
                let dst = ((ch * nx + x / 2) * ny + y / 2) * nz;
                for z in 0..uz {
                    grad_in[dst + z / 2] += grad_out[src + z];
                }
            }
        }
    }
}
