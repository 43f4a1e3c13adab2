//! Matrix, normalisation and indexing operations.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, IxDyn};

use super::{Arr, Tape, Var};

impl Tape {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul2(&self, a: Var, b: Var) -> Var {
        let (da, db) = (self.data(a), self.data(b));
        let a2 = da.view().into_dimensionality::<Ix2>().expect("matmul2: a not 2-d");
        let b2 = db.view().into_dimensionality::<Ix2>().expect("matmul2: b not 2-d");
        assert_eq!(a2.shape()[1], b2.shape()[0], "matmul2: inner dims");
        let out = a2.dot(&b2).into_dyn();
        let (da, db) = (Rc::clone(&da), Rc::clone(&db));
        self.push(out, vec![a, b], Box::new(move |g, needs| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let a2 = da.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = db.view().into_dimensionality::<Ix2>().unwrap();
            vec![
                needs[0].then(|| g2.dot(&b2.t()).into_dyn()),
                needs[1].then(|| a2.t().dot(&g2).into_dyn()),
            ]
        }))
    }

    /// Batched matmul: `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let (da, db) = (self.data(a), self.data(b));
        let a3 = da.view().into_dimensionality::<Ix3>().expect("bmm: a not 3-d");
        let b3 = db.view().into_dimensionality::<Ix3>().expect("bmm: b not 3-d");
        let (bn, m, k) = (a3.shape()[0], a3.shape()[1], a3.shape()[2]);
        assert_eq!(b3.shape()[0], bn, "bmm: batch dims");
        assert_eq!(b3.shape()[1], k, "bmm: inner dims");
        let n = b3.shape()[2];
        let mut out = ndarray::Array3::<f32>::zeros((bn, m, n));
        for i in 0..bn {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        let (da, db) = (Rc::clone(&da), Rc::clone(&db));
        self.push(out.into_dyn(), vec![a, b], Box::new(move |g, needs| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let a3 = da.view().into_dimensionality::<Ix3>().unwrap();
            let b3 = db.view().into_dimensionality::<Ix3>().unwrap();
            let ga = needs[0].then(|| {
                let mut ga = ndarray::Array3::<f32>::zeros((bn, m, k));
                for i in 0..bn {
                    ga.index_axis_mut(Axis(0), i).assign(
                        &g3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i).t()),
                    );
                }
                ga.into_dyn()
            });
            let gb = needs[1].then(|| {
                let mut gb = ndarray::Array3::<f32>::zeros((bn, k, n));
                for i in 0..bn {
                    gb.index_axis_mut(Axis(0), i).assign(
                        &a3.index_axis(Axis(0), i).t().dot(&g3.index_axis(Axis(0), i)),
                    );
                }
                gb.into_dyn()
            });
            vec![ga, gb]
        }))
    }

    /// Adds a `[C]` bias over the last axis of `x`.
    pub fn add_bias_last(&self, x: Var, b: Var) -> Var {
        let (dx, db) = (self.data(x), self.data(b));
        let c = *dx.shape().last().expect("add_bias_last: scalar input");
        assert_eq!(db.shape(), [c], "add_bias_last: bias shape");
        let mut out = (*dx).clone();
        let bs = db.as_slice().unwrap().to_vec();
        for row in out.rows_mut() {
            // rows() iterates over the last axis
            ndarray::Zip::from(row).and(&ndarray::aview1(&bs)).for_each(|o, &bi| *o += bi);
        }
        self.push(out, vec![x, b], Box::new(move |g, needs| {
            let gx = needs[0].then(|| g.clone());
            let gb = needs[1].then(|| {
                let flat = g.view().into_shape_with_order((g.len() / c, c)).unwrap();
                let mut acc = vec![0.0f64; c];
                for row in flat.rows() {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v as f64;
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[c]), acc.iter().map(|&v| v as f32).collect())
                    .unwrap()
            });
            vec![gx, gb]
        }))
    }

    /// Adds `t [B, C]` to `x [B, C, H, W]`, broadcasting over space.
    pub fn add_chan_bc(&self, x: Var, t: Var) -> Var {
        let (dx, dt) = (self.data(x), self.data(t));
        let (b, c) = (dx.shape()[0], dx.shape()[1]);
        assert_eq!(dt.shape(), [b, c], "add_chan_bc: shape");
        let hw: usize = dx.shape()[2..].iter().product();
        let mut out = (*dx).clone();
        {
            let mut flat = out.view_mut().into_shape_with_order((b, c, hw)).unwrap();
            let t2 = dt.view().into_dimensionality::<Ix2>().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let add = t2[[bi, ci]];
                    flat.index_axis_mut(Axis(0), bi)
                        .index_axis_mut(Axis(0), ci)
                        .mapv_inplace(|v| v + add);
                }
            }
        }
        self.push(out, vec![x, t], Box::new(move |g, needs| {
            let gx = needs[0].then(|| g.clone());
            let gt = needs[1].then(|| {
                let flat = g.view().into_shape_with_order((b, c, hw)).unwrap();
                let mut out = Array2::<f32>::zeros((b, c));
                for bi in 0..b {
                    for ci in 0..c {
                        let s: f64 = flat
                            .index_axis(Axis(0), bi)
                            .index_axis(Axis(0), ci)
                            .iter()
                            .map(|&v| v as f64)
                            .sum();
                        out[[bi, ci]] = s as f32;
                    }
                }
                out.into_dyn()
            });
            vec![gx, gt]
        }))
    }

    /// `x [.., D_in] -> [.., D_out]` through `w [D_in, D_out]` plus optional bias.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let d_in = *xs.last().unwrap();
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, d_in]);
        let y = self.matmul2(flat, w);
        let d_out = self.shape(w)[1];
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(d_out);
        let y = self.reshape(y, &out_shape);
        match b {
            Some(b) => self.add_bias_last(y, b),
            None => y,
        }
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Var {
        let dx = self.data(x);
        let c = *dx.shape().last().expect("softmax_last: scalar input");
        let rows = dx.len() / c;
        let mut out = (*dx).clone();
        {
            let mut flat = out.view_mut().into_shape_with_order((rows, c)).unwrap();
            for mut row in flat.rows_mut() {
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f64;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    denom += *v as f64;
                }
                let inv = (1.0 / denom) as f32;
                row.mapv_inplace(|v| v * inv);
            }
        }
        let saved = out.clone();
        self.push(out, vec![x], Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = g.clone();
                let mut gx2 = gx.view_mut().into_shape_with_order((rows, c)).unwrap();
                let y2 = saved.view().into_shape_with_order((rows, c)).unwrap();
                for (mut grow, yrow) in gx2.rows_mut().into_iter().zip(y2.rows()) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(&g, &y)| (g * y) as f64).sum();
                    let dot = dot as f32;
                    ndarray::Zip::from(&mut grow).and(yrow).for_each(|gi, &yi| {
                        *gi = yi * (*gi - dot);
                    });
                }
                gx
            })]
        }))
    }

    /// Layer norm over the last axis with per-feature affine parameters.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let (dx, dgamma, dbeta) = (self.data(x), self.data(gamma), self.data(beta));
        let c = *dx.shape().last().expect("layer_norm: scalar input");
        assert_eq!(dgamma.shape(), [c], "layer_norm: gamma shape");
        assert_eq!(dbeta.shape(), [c], "layer_norm: beta shape");
        let rows = dx.len() / c;
        let mut xhat = (*dx).clone();
        let mut inv_sigma = vec![0.0f32; rows];
        {
            let mut flat = xhat.view_mut().into_shape_with_order((rows, c)).unwrap();
            for (r, mut row) in flat.rows_mut().into_iter().enumerate() {
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps as f64).sqrt();
                inv_sigma[r] = inv as f32;
                row.mapv_inplace(|v| ((v as f64 - mean) * inv) as f32);
            }
        }
        let mut out = xhat.clone();
        {
            let mut flat = out.view_mut().into_shape_with_order((rows, c)).unwrap();
            let gs = dgamma.as_slice().unwrap();
            let bs = dbeta.as_slice().unwrap();
            for mut row in flat.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = *v * gs[j] + bs[j];
                }
            }
        }
        let dgamma = Rc::clone(&dgamma);
        self.push(out, vec![x, gamma, beta], Box::new(move |g, needs| {
            let g2 = g.view().into_shape_with_order((rows, c)).unwrap();
            let xh = xhat.view().into_shape_with_order((rows, c)).unwrap();
            let gs = dgamma.as_slice().unwrap();
            let gx = needs[0].then(|| {
                let mut gx = ArrayD::<f32>::zeros(IxDyn(g.shape()));
                let mut gx2 = gx.view_mut().into_shape_with_order((rows, c)).unwrap();
                for r in 0..rows {
                    let grow = g2.row(r);
                    let xrow = xh.row(r);
                    let mut mean_gh = 0.0f64;
                    let mut mean_ghx = 0.0f64;
                    for j in 0..c {
                        let gh = (grow[j] * gs[j]) as f64;
                        mean_gh += gh;
                        mean_ghx += gh * xrow[j] as f64;
                    }
                    mean_gh /= c as f64;
                    mean_ghx /= c as f64;
                    let inv = inv_sigma[r] as f64;
                    let mut out_row = gx2.row_mut(r);
                    for j in 0..c {
                        let gh = (grow[j] * gs[j]) as f64;
                        out_row[j] = ((gh - mean_gh - xrow[j] as f64 * mean_ghx) * inv) as f32;
                    }
                }
                gx
            });
            let ggamma = needs[1].then(|| {
                let mut acc = vec![0.0f64; c];
                for r in 0..rows {
                    for j in 0..c {
                        acc[j] += (g2[[r, j]] * xh[[r, j]]) as f64;
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[c]), acc.iter().map(|&v| v as f32).collect())
                    .unwrap()
            });
            let gbeta = needs[2].then(|| {
                let mut acc = vec![0.0f64; c];
                for r in 0..rows {
                    for j in 0..c {
                        acc[j] += g2[[r, j]] as f64;
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[c]), acc.iter().map(|&v| v as f32).collect())
                    .unwrap()
            });
            vec![gx, ggamma, gbeta]
        }))
    }

    /// Group norm over `[B, C, H, W]` with `groups` channel groups.
    pub fn group_norm(&self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f32) -> Var {
        let (dx, dgamma, dbeta) = (self.data(x), self.data(gamma), self.data(beta));
        let shape = dx.shape().to_vec();
        assert_eq!(shape.len(), 4, "group_norm: expected [B, C, H, W]");
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(c % groups == 0, "group_norm: channels not divisible by groups");
        assert_eq!(dgamma.shape(), [c]);
        assert_eq!(dbeta.shape(), [c]);
        let cg = c / groups;
        let group_len = cg * h * w;
        let mut xhat = (*dx).clone();
        let mut inv_sigma = vec![0.0f32; b * groups];
        {
            let mut flat = xhat.view_mut().into_shape_with_order((b * groups, group_len)).unwrap();
            for (r, mut row) in flat.rows_mut().into_iter().enumerate() {
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / group_len as f64;
                let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
                    / group_len as f64;
                let inv = 1.0 / (var + eps as f64).sqrt();
                inv_sigma[r] = inv as f32;
                row.mapv_inplace(|v| ((v as f64 - mean) * inv) as f32);
            }
        }
        let mut out = xhat.clone();
        {
            let gs = dgamma.as_slice().unwrap();
            let bs = dbeta.as_slice().unwrap();
            let mut v4 = out.view_mut().into_shape_with_order((b, c, h * w)).unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let (gm, bt) = (gs[ci], bs[ci]);
                    v4.index_axis_mut(Axis(0), bi)
                        .index_axis_mut(Axis(0), ci)
                        .mapv_inplace(|v| v * gm + bt);
                }
            }
        }
        let dgamma = Rc::clone(&dgamma);
        self.push(out, vec![x, gamma, beta], Box::new(move |g, needs| {
            let gs = dgamma.as_slice().unwrap();
            let g3 = g.view().into_shape_with_order((b, c, h * w)).unwrap();
            let xh3 = xhat.view().into_shape_with_order((b, c, h * w)).unwrap();
            let gx = needs[0].then(|| {
                let mut gx = ArrayD::<f32>::zeros(IxDyn(&shape));
                let mut gx3 = gx.view_mut().into_shape_with_order((b, c, h * w)).unwrap();
                for bi in 0..b {
                    for gi in 0..groups {
                        let c0 = gi * cg;
                        let mut mean_gh = 0.0f64;
                        let mut mean_ghx = 0.0f64;
                        for ci in c0..c0 + cg {
                            for s in 0..h * w {
                                let gh = (g3[[bi, ci, s]] * gs[ci]) as f64;
                                mean_gh += gh;
                                mean_ghx += gh * xh3[[bi, ci, s]] as f64;
                            }
                        }
                        mean_gh /= group_len as f64;
                        mean_ghx /= group_len as f64;
                        let inv = inv_sigma[bi * groups + gi] as f64;
                        for ci in c0..c0 + cg {
                            for s in 0..h * w {
                                let gh = (g3[[bi, ci, s]] * gs[ci]) as f64;
                                gx3[[bi, ci, s]] =
                                    ((gh - mean_gh - xh3[[bi, ci, s]] as f64 * mean_ghx) * inv)
                                        as f32;
                            }
                        }
                    }
                }
                gx
            });
            let ggamma = needs[1].then(|| {
                let mut acc = vec![0.0f64; c];
                for bi in 0..b {
                    for ci in 0..c {
                        for s in 0..h * w {
                            acc[ci] += (g3[[bi, ci, s]] * xh3[[bi, ci, s]]) as f64;
                        }
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[c]), acc.iter().map(|&v| v as f32).collect())
                    .unwrap()
            });
            let gbeta = needs[2].then(|| {
                let mut acc = vec![0.0f64; c];
                for bi in 0..b {
                    for ci in 0..c {
                        for s in 0..h * w {
                            acc[ci] += g3[[bi, ci, s]] as f64;
                        }
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[c]), acc.iter().map(|&v| v as f32).collect())
                    .unwrap()
            });
            vec![gx, ggamma, gbeta]
        }))
    }

    /// Row gather: `out[m, :] = table[indices[m], :]`. Gradient scatters back
    /// by addition, so repeated indices accumulate.
    pub fn index_select0(&self, table: Var, indices: &[usize]) -> Var {
        let dt = self.data(table);
        assert_eq!(dt.ndim(), 2, "index_select0: table must be 2-d");
        let (k, d) = (dt.shape()[0], dt.shape()[1]);
        let t2 = dt.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<f32>::zeros((indices.len(), d));
        for (m, &i) in indices.iter().enumerate() {
            assert!(i < k, "index_select0: index {i} out of range {k}");
            out.row_mut(m).assign(&t2.row(i));
        }
        let idx = indices.to_vec();
        self.push(out.into_dyn(), vec![table], Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gt = Array2::<f32>::zeros((k, d));
                for (m, &i) in idx.iter().enumerate() {
                    let mut row = gt.row_mut(i);
                    row += &g2.row(m);
                }
                gt.into_dyn()
            })]
        }))
    }

    /// Per-row token windows: `out[r, j, :] = ctx[rows[r].0, rows[r].1 + j, :]`.
    /// Used to hand each frame its own slice of an audio token sequence.
    pub fn gather_windows(&self, ctx: Var, rows: &[(usize, usize)], width: usize) -> Var {
        let dc = self.data(ctx);
        assert_eq!(dc.ndim(), 3, "gather_windows: ctx must be [B, T, D]");
        let (b, t, d) = (dc.shape()[0], dc.shape()[1], dc.shape()[2]);
        let c3 = dc.view().into_dimensionality::<Ix3>().unwrap();
        let mut out = ndarray::Array3::<f32>::zeros((rows.len(), width, d));
        for (r, &(bi, start)) in rows.iter().enumerate() {
            assert!(bi < b && start + width <= t, "gather_windows: window out of range");
            out.index_axis_mut(Axis(0), r)
                .assign(&c3.slice(ndarray::s![bi, start..start + width, ..]));
        }
        let rows = rows.to_vec();
        self.push(out.into_dyn(), vec![ctx], Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut gc = ndarray::Array3::<f32>::zeros((b, t, d));
                for (r, &(bi, start)) in rows.iter().enumerate() {
                    let mut slot = gc.slice_mut(ndarray::s![bi, start..start + width, ..]);
                    slot += &g3.index_axis(Axis(0), r);
                }
                gc.into_dyn()
            })]
        }))
    }

    /// Residual add gated by a constant row mask: rows where `m` is nonzero
    /// get `hidden + update`; rows where `m` is zero are copied through with
    /// no arithmetic at all, so they stay bitwise identical to `hidden`.
    /// `m` has the same shape as `hidden` except a trailing axis of 1.
    pub fn masked_residual(&self, hidden: Var, update: Var, m: &Arr) -> Var {
        let dh = self.data(hidden);
        let du = self.data(update);
        let hs = dh.shape().to_vec();
        assert_eq!(du.shape(), &hs[..], "masked_residual: operand shapes differ");
        assert_eq!(m.shape()[..m.ndim() - 1], hs[..hs.len() - 1], "masked_residual: mask shape");
        assert_eq!(m.shape()[m.ndim() - 1], 1, "masked_residual: mask last axis must be 1");
        let mb = m
            .broadcast(IxDyn(&hs))
            .expect("masked_residual: broadcast failed")
            .to_owned();
        let mut out = (*dh).clone();
        ndarray::Zip::from(&mut out)
            .and(&mb)
            .and(&*du)
            .for_each(|o, &mv, &uv| {
                if mv != 0.0 {
                    *o += uv;
                }
            });
        self.push(out, vec![hidden, update], Box::new(move |g, needs| {
            let gh = needs[0].then(|| g.clone());
            let gu = needs[1].then(|| g * &mb);
            vec![gh, gu]
        }))
    }
}
