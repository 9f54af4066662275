//! Layout operations: reshape, permute, concat, slicing, padding and the
//! sub-pixel rearrangements.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Shape, Tensor};

fn permuted_shape(shape: Shape, perm: [usize; 4]) -> Shape {
    [shape[perm[0]], shape[perm[1]], shape[perm[2]], shape[perm[3]]]
}

/// Gather `src` into `dst` laid out in the permuted order.
fn permute_into(src: &[crate::tensor::Real], shape: Shape, perm: [usize; 4], dst: &mut [crate::tensor::Real]) {
    let strides = [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1];
    let out = permuted_shape(shape, perm);
    let ps = [strides[perm[0]], strides[perm[1]], strides[perm[2]], strides[perm[3]]];
    let mut o = 0;
    for a in 0..out[0] {
        for b in 0..out[1] {
            for c in 0..out[2] {
                let base = a * ps[0] + b * ps[1] + c * ps[2];
                for d in 0..out[3] {
                    dst[o] = src[base + d * ps[3]];
                    o += 1;
                }
            }
        }
    }
}

fn inverse_perm(perm: [usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<'p> Graph<'p> {
    pub fn reshape(&self, a: Var, shape: Shape) -> Result<Var> {
        let av = self.value(a);
        if numel(shape) != av.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: av.shape(),
                rhs: shape,
            });
        }
        let from = av.shape();
        let out = (*av).clone().reshape(shape)?;
        Ok(self.push(out, &[a], move |g, sink| {
            let gr = g.clone().reshape(from).expect("same element count");
            sink.add(a, gr);
        }))
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: [usize; 4]) -> Result<Var> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p > 3 || seen[p] {
                return Err(Error::invalid("permute", format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        let av = self.value(a);
        let shape = av.shape();
        let mut out = Tensor::zeros(permuted_shape(shape, perm));
        permute_into(av.data(), shape, perm, out.data_mut());
        let inv = inverse_perm(perm);
        let out_shape = out.shape();
        Ok(self.push(out, &[a], move |g, sink| {
            let mut back = Tensor::zeros(shape);
            permute_into(g.data(), out_shape, inv, back.data_mut());
            sink.add(a, back);
        }))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        if axis > 3 {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let base = self.shape(first);
        let values: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            for d in 0..4 {
                if d != axis && s[d] != base[d] {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: base,
                        rhs: s,
                    });
                }
            }
            total += s[axis];
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let mut out = Tensor::zeros(out_shape);
        {
            let dst = out.data_mut();
            let mut o = 0;
            for i in 0..outer {
                for (v, &len) in values.iter().zip(&sizes) {
                    let chunk = len * inner;
                    dst[o..o + chunk].copy_from_slice(&v.data()[i * chunk..(i + 1) * chunk]);
                    o += chunk;
                }
            }
        }
        let parts = parts.to_vec();
        Ok(self.push(out, &parts.clone(), move |g, sink| {
            let gd = g.data();
            let mut o = 0;
            for i in 0..outer {
                for (&p, &len) in parts.iter().zip(&sizes) {
                    let chunk = len * inner;
                    if sink.wants(p) {
                        let dst = &mut sink.slot(p).data_mut()[i * chunk..(i + 1) * chunk];
                        for (d, &v) in dst.iter_mut().zip(&gd[o..o + chunk]) {
                            *d += v;
                        }
                    }
                    o += chunk;
                }
            }
        }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape();
        if axis > 3 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} out of bounds for axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape;
        out_shape[axis] = len;
        let mut out = Tensor::zeros(out_shape);
        for i in 0..outer {
            let src = &av.data()[(i * full + start) * inner..(i * full + start + len) * inner];
            out.data_mut()[i * len * inner..(i + 1) * len * inner].copy_from_slice(src);
        }
        Ok(self.push(out, &[a], move |g, sink| {
            let ga = sink.slot(a).data_mut();
            for i in 0..outer {
                let dst = &mut ga[(i * full + start) * inner..(i * full + start + len) * inner];
                for (d, &v) in dst.iter_mut().zip(&g.data()[i * len * inner..(i + 1) * len * inner]) {
                    *d += v;
                }
            }
        }))
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)`.
    pub fn crop2d(&self, a: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let rows = self.slice(a, 2, y0, h)?;
        self.slice(rows, 3, x0, w)
    }

    /// Zero padding on the bottom and right edges.
    pub fn pad2d(&self, a: Var, bottom: usize, right: usize) -> Var {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        if bottom == 0 && right == 0 {
            return a;
        }
        let (oh, ow) = (h + bottom, w + right);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for p in 0..n * c {
            for y in 0..h {
                out.data_mut()[(p * oh + y) * ow..(p * oh + y) * ow + w]
                    .copy_from_slice(&av.data()[(p * h + y) * w..(p * h + y + 1) * w]);
            }
        }
        self.push(out, &[a], move |g, sink| {
            let ga = sink.slot(a).data_mut();
            for p in 0..n * c {
                for y in 0..h {
                    let src = &g.data()[(p * oh + y) * ow..(p * oh + y) * ow + w];
                    for (d, &v) in ga[(p * h + y) * w..(p * h + y + 1) * w].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        })
    }

    /// Sub-pixel rearrangement `(N, C*s*s, H, W) -> (N, C, s*H, s*W)`;
    /// output `(c, y*s+i, x*s+j)` reads input channel `c*s*s + i*s + j`.
    pub fn pixel_shuffle(&self, a: Var, s: usize) -> Result<Var> {
        let [n, cin, h, w] = self.shape(a);
        if s == 0 || cin % (s * s) != 0 {
            return Err(Error::invalid(
                "pixel_shuffle",
                format!("{cin} channels not divisible by scale^2 = {}", s * s),
            ));
        }
        let c = cin / (s * s);
        let av = self.value(a);
        let out = shuffle_forward(&av, s);
        let out_shape = [n, c, h * s, w * s];
        debug_assert_eq!(out.shape(), out_shape);
        Ok(self.push(out, &[a], move |g, sink| {
            sink.add(a, unshuffle_forward(g, s));
        }))
    }

    /// Inverse of [`Graph::pixel_shuffle`]: `(N, C, s*H, s*W) -> (N, C*s*s, H, W)`.
    pub fn space_to_depth(&self, a: Var, s: usize) -> Result<Var> {
        let [_, _, h, w] = self.shape(a);
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::invalid(
                "space_to_depth",
                format!("spatial size {h}x{w} not divisible by {s}"),
            ));
        }
        let av = self.value(a);
        let out = unshuffle_forward(&av, s);
        Ok(self.push(out, &[a], move |g, sink| {
            sink.add(a, shuffle_forward(g, s));
        }))
    }

    /// Nearest-neighbour resize to `oh x ow`.
    pub fn upsample_nearest(&self, a: Var, oh: usize, ow: usize) -> Var {
        let av = self.value(a);
        let [n, c, h, w] = av.shape();
        let ys: Vec<usize> = (0..oh).map(|y| (y * h / oh).min(h - 1)).collect();
        let xs: Vec<usize> = (0..ow).map(|x| (x * w / ow).min(w - 1)).collect();
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for p in 0..n * c {
            for (y, &sy) in ys.iter().enumerate() {
                for (x, &sx) in xs.iter().enumerate() {
                    out.data_mut()[(p * oh + y) * ow + x] = av.data()[(p * h + sy) * w + sx];
                }
            }
        }
        self.push(out, &[a], move |g, sink| {
            let ga = sink.slot(a).data_mut();
            for p in 0..n * c {
                for (y, &sy) in ys.iter().enumerate() {
                    for (x, &sx) in xs.iter().enumerate() {
                        ga[(p * h + sy) * w + sx] += g.data()[(p * oh + y) * ow + x];
                    }
                }
            }
        })
    }
}

fn shuffle_forward(t: &Tensor, s: usize) -> Tensor {
    let [n, cin, h, w] = t.shape();
    let c = cin / (s * s);
    let (oh, ow) = (h * s, w * s);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = t.data();
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let ic = ch * s * s + i * s + j;
                    let plane = &src[((b * cin + ic) * h) * w..((b * cin + ic) * h + h) * w];
                    for y in 0..h {
                        let row = ((b * c + ch) * oh + y * s + i) * ow;
                        for x in 0..w {
                            dst[row + x * s + j] = plane[y * w + x];
                        }
                    }
                }
            }
        }
    }
    out
}

fn unshuffle_forward(t: &Tensor, s: usize) -> Tensor {
    let [n, c, oh, ow] = t.shape();
    let (h, w) = (oh / s, ow / s);
    let cin = c * s * s;
    let mut out = Tensor::zeros([n, cin, h, w]);
    let src = t.data();
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let ic = ch * s * s + i * s + j;
                    for y in 0..h {
                        let row = ((b * c + ch) * oh + y * s + i) * ow;
                        for x in 0..w {
                            dst[((b * cin + ic) * h + y) * w + x] = src[row + x * s + j];
                        }
                    }
                }
            }
        }
    }
    out
}
