//! 2-d convolution via im2col + GEMM, plus nearest-neighbour upsampling.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, Ix4, IxDyn};

use super::{Tape, Var};

/// Lowers one `[C, H, W]` sample into a `[C*kh*kw, OH*OW]` patch matrix.
fn im2col(
    x: &ndarray::ArrayView3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<f32>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut dst = col.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the image.
fn col2im(
    col: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f32> {
    let mut x = ndarray::Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = col.row(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    /// `x [B, Cin, H, W]` * `w [Cout, Cin, kh, kw]` -> `[B, Cout, OH, OW]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (dx, dw) = (self.data(x), self.data(w));
        let x4 = dx.view().into_dimensionality::<Ix4>().expect("conv2d: x not 4-d");
        let w4 = dw.view().into_dimensionality::<Ix4>().expect("conv2d: w not 4-d");
        let (bn, cin, h, wd) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let (cout, wcin, kh, kw) = (w4.shape()[0], w4.shape()[1], w4.shape()[2], w4.shape()[3]);
        assert_eq!(cin, wcin, "conv2d: channel mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let w2 = w4
            .to_shape((cout, cin * kh * kw))
            .expect("conv2d: weight reshape")
            .to_owned();
        let bias: Option<Vec<f32>> = b.map(|bv| {
            let db = self.data(bv);
            assert_eq!(db.shape(), [cout], "conv2d: bias shape");
            db.as_slice().unwrap().to_vec()
        });
        let mut out = ndarray::Array4::<f32>::zeros((bn, cout, oh, ow));
        for bi in 0..bn {
            let col = im2col(&x4.index_axis(ndarray::Axis(0), bi), kh, kw, stride, pad, oh, ow);
            let y = w2.dot(&col);
            let mut dst = out.index_axis_mut(ndarray::Axis(0), bi);
            let mut dst2 = dst.view_mut().into_shape_with_order((cout, oh * ow)).unwrap();
            dst2.assign(&y);
            if let Some(bs) = &bias {
                for (co, mut row) in dst2.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|v| v + bs[co]);
                }
            }
        }

        let parents: Vec<Var> = match b {
            Some(bv) => vec![x, w, bv],
            None => vec![x, w],
        };
        let (dx, dw) = (Rc::clone(&dx), Rc::clone(&dw));
        self.push(out.into_dyn(), parents, Box::new(move |g, needs| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let x4 = dx.view().into_dimensionality::<Ix4>().unwrap();
            let w4 = dw.view().into_dimensionality::<Ix4>().unwrap();
            let w2 = w4.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
            let need_x = needs[0];
            let need_w = needs[1];
            let need_b = needs.len() > 2 && needs[2];

            let mut gx = need_x.then(|| ndarray::Array4::<f32>::zeros((bn, cin, h, wd)));
            let mut gw = need_w.then(|| Array2::<f32>::zeros((cout, cin * kh * kw)));
            for bi in 0..bn {
                let g2 = g4
                    .index_axis(ndarray::Axis(0), bi)
                    .to_shape((cout, oh * ow))
                    .unwrap()
                    .to_owned();
                if need_x {
                    let gcol = w2.t().dot(&g2);
                    let gxi = col2im(&gcol, cin, h, wd, kh, kw, stride, pad, oh, ow);
                    gx.as_mut().unwrap().index_axis_mut(ndarray::Axis(0), bi).assign(&gxi);
                }
                if need_w {
                    let col =
                        im2col(&x4.index_axis(ndarray::Axis(0), bi), kh, kw, stride, pad, oh, ow);
                    *gw.as_mut().unwrap() += &g2.dot(&col.t());
                }
            }
            let gb = need_b.then(|| {
                let mut acc = vec![0.0f64; cout];
                for bi in 0..bn {
                    for co in 0..cout {
                        let s: f64 = g4
                            .index_axis(ndarray::Axis(0), bi)
                            .index_axis(ndarray::Axis(0), co)
                            .iter()
                            .map(|&v| v as f64)
                            .sum();
                        acc[co] += s;
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[cout]), acc.iter().map(|&v| v as f32).collect())
                    .unwrap()
            });

            let mut contribs = vec![
                gx.map(|a| a.into_dyn()),
                gw.map(|a| {
                    a.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn()
                }),
            ];
            if needs.len() > 2 {
                contribs.push(gb);
            }
            contribs
        }))
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&self, x: Var) -> Var {
        let dx = self.data(x);
        let x4 = dx.view().into_dimensionality::<Ix4>().expect("upsample2x: x not 4-d");
        let (b, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let mut out = ndarray::Array4::<f32>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        out[[bi, ci, y, xx]] = x4[[bi, ci, y / 2, xx / 2]];
                    }
                }
            }
        }
        self.push(out.into_dyn(), vec![x], Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ndarray::Array4::<f32>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[[bi, ci, y / 2, xx / 2]] += g4[[bi, ci, y, xx]];
                            }
                        }
                    }
                }
                gx.into_dyn()
            })]
        }))
    }
}
