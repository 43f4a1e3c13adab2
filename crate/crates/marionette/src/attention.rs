//! Single-head cross-attention with optional region gating, and the latent
//! region masks built from keypoints.
//!
//! Every attention site in the model goes through [`masked_cross_attention`];
//! its contract is that rows whose mask entry is zero come back
//! bitwise-identical to the input.

use ndarray::IxDyn;
use thiserror::Error;

use crate::skeleton::{face_joints, hand_joint_names, Skeleton2D};
use crate::tensor::{init, init_rng, name_seed, Arr, Frame, ParamSet, Var};

#[derive(Debug, Error)]
pub enum AttnError {
    #[error("expected shape {want}, got {got:?}")]
    BadShape { want: String, got: Vec<usize> },
    #[error("attention context has zero tokens")]
    EmptyContext,
    #[error("mask invalid: {0}")]
    BadMask(String),
    #[error("geometry invalid: {0}")]
    BadGeometry(String),
}

/// Which latent region a mask selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Head,
    Hand,
    Mouth,
}

/// Binary gate over latent tokens, `[batch, n_latent, 1]`, entries in {0, 1}.
#[derive(Debug, Clone)]
pub struct RegionMask {
    data: Arr,
    region: Region,
}

impl RegionMask {
    pub fn new(data: Arr, region: Region) -> Result<Self, AttnError> {
        if data.ndim() != 3 || data.shape()[2] != 1 {
            return Err(AttnError::BadMask(format!(
                "mask must be [batch, n, 1], got {:?}",
                data.shape()
            )));
        }
        if !data.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(AttnError::BadMask("mask entries must be 0 or 1".into()));
        }
        Ok(RegionMask { data, region })
    }

    pub fn ones(batch: usize, n: usize, region: Region) -> Self {
        RegionMask {
            data: Arr::from_elem(IxDyn(&[batch, n, 1]), 1.0),
            region,
        }
    }

    pub fn data(&self) -> &Arr {
        &self.data
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_latent(&self) -> usize {
        self.data.shape()[1]
    }

    /// Repeat a batch-1 mask across `batch` rows.
    pub fn tiled(&self, batch: usize) -> RegionMask {
        assert_eq!(self.batch(), 1, "tiled: source mask must have batch 1");
        let n = self.n_latent();
        let mut data = Arr::zeros(IxDyn(&[batch, n, 1]));
        for b in 0..batch {
            for i in 0..n {
                data[[b, i, 0]] = self.data[[0, i, 0]];
            }
        }
        RegionMask {
            data,
            region: self.region,
        }
    }

    /// Fraction of cells set.
    pub fn coverage(&self) -> f64 {
        let total = (self.batch() * self.n_latent()) as f64;
        self.data.iter().map(|&v| v as f64).sum::<f64>() / total
    }

    /// Concatenate batch-1 masks into one batched mask. All inputs must
    /// share the region and token count.
    pub fn stack(masks: &[RegionMask]) -> RegionMask {
        assert!(!masks.is_empty(), "stack: no masks");
        let n = masks[0].n_latent();
        let region = masks[0].region;
        let mut data = Arr::zeros(IxDyn(&[masks.len(), n, 1]));
        for (b, m) in masks.iter().enumerate() {
            assert_eq!(m.batch(), 1, "stack: sources must have batch 1");
            assert_eq!(m.n_latent(), n, "stack: token counts differ");
            assert_eq!(m.region, region, "stack: regions differ");
            for i in 0..n {
                data[[b, i, 0]] = m.data[[0, i, 0]];
            }
        }
        RegionMask { data, region }
    }

    /// All-zero gate: the gated stream is disabled everywhere.
    pub fn zeros(batch: usize, n: usize, region: Region) -> Self {
        RegionMask {
            data: Arr::zeros(IxDyn(&[batch, n, 1])),
            region,
        }
    }
}

/// Handles to one attention layer's projection weights.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Register one attention layer's projections under `prefix`. All maps are
/// bias-free; `zero_out` zero-initializes the output projection so the layer
/// starts as an identity residual.
pub fn register_attention(
    params: &mut ParamSet,
    prefix: &str,
    c_hidden: usize,
    d_ctx: usize,
    d_k: usize,
    seed: u64,
    zero_out: bool,
) {
    let rng_for = |suffix: &str| init_rng(name_seed(seed, prefix), suffix);
    params.add(
        &format!("{prefix}.wq"),
        init::linear_xavier(&mut rng_for("wq"), &[c_hidden, d_k]),
    );
    params.add(
        &format!("{prefix}.wk"),
        init::linear_xavier(&mut rng_for("wk"), &[d_ctx, d_k]),
    );
    params.add(
        &format!("{prefix}.wv"),
        init::linear_xavier(&mut rng_for("wv"), &[d_ctx, d_k]),
    );
    let wo = if zero_out {
        init::zeros(&[d_k, c_hidden])
    } else {
        init::linear_xavier(&mut rng_for("wo"), &[d_k, c_hidden])
    };
    params.add(&format!("{prefix}.wo"), wo);
}

/// Fetch the four projection handles registered under `prefix`.
pub fn attention_weights(f: &Frame, prefix: &str) -> AttnWeights {
    AttnWeights {
        wq: f.p_name(&format!("{prefix}.wq")),
        wk: f.p_name(&format!("{prefix}.wk")),
        wv: f.p_name(&format!("{prefix}.wv")),
        wo: f.p_name(&format!("{prefix}.wo")),
    }
}

/// Residual single-head scaled-dot-product cross-attention, gated by an
/// optional row mask:
/// `out = hidden + gate(softmax(QKᵀ/√d_k)·V·Wo)`.
/// With a mask, rows whose gate is zero are returned bitwise-identical to
/// `hidden`. Queries come from `hidden` `[B, N, C]`, keys/values from
/// `context` `[B, M, D]`. Pass `hidden` as the context for self-attention.
pub fn masked_cross_attention(
    f: &Frame,
    hidden: Var,
    context: Var,
    mask: Option<&RegionMask>,
    w: &AttnWeights,
) -> Result<Var, AttnError> {
    let hs = f.shape(hidden);
    let cs = f.shape(context);
    if hs.len() != 3 {
        return Err(AttnError::BadShape {
            want: "[B, N, C]".into(),
            got: hs,
        });
    }
    if cs.len() != 3 || cs[0] != hs[0] {
        return Err(AttnError::BadShape {
            want: format!("[{}, M, D]", hs[0]),
            got: cs,
        });
    }
    if cs[1] == 0 {
        return Err(AttnError::EmptyContext);
    }
    if let Some(m) = mask {
        if m.batch() != hs[0] || m.n_latent() != hs[1] {
            return Err(AttnError::BadMask(format!(
                "mask {}x{} does not fit hidden {}x{}",
                m.batch(),
                m.n_latent(),
                hs[0],
                hs[1]
            )));
        }
    }
    let d_k = f.shape(w.wq)[1];
    let q = f.linear(hidden, w.wq, None); // [B, N, dk]
    let k = f.linear(context, w.wk, None); // [B, M, dk]
    let v = f.linear(context, w.wv, None); // [B, M, dk]
    let kt = f.permute(k, &[0, 2, 1]); // [B, dk, M]
    let scores = f.bmm(q, kt); // [B, N, M]
    let scores = f.scale(scores, 1.0 / (d_k as f32).sqrt());
    let weights = f.softmax_last(scores);
    let mixed = f.bmm(weights, v); // [B, N, dk]
    let update = f.linear(mixed, w.wo, None); // [B, N, C]
    Ok(match mask {
        Some(m) => f.masked_residual(hidden, update, m.data()),
        None => f.add(hidden, update),
    })
}

fn bbox_of(points: &[(f64, f64)]) -> Option<(f64, f64, f64, f64)> {
    let mut it = points.iter();
    let &(x0, y0) = it.next()?;
    let mut bb = (x0, y0, x0, y0);
    for &(x, y) in it {
        bb.0 = bb.0.min(x);
        bb.1 = bb.1.min(y);
        bb.2 = bb.2.max(x);
        bb.3 = bb.3.max(y);
    }
    Some(bb)
}

fn mark_box(
    mask: &mut Arr,
    bb: (f64, f64, f64, f64),
    dilation: f64,
    latent_hw: (usize, usize),
    frame_hw: (usize, usize),
) {
    let (lh, lw) = latent_hw;
    let (fh, fw) = frame_hw;
    let diag = (bb.2 - bb.0).hypot(bb.3 - bb.1);
    let pad = dilation * diag;
    // Dilate, then clamp into the frame so off-screen keypoints still select
    // their nearest cells.
    let x0 = (bb.0 - pad).clamp(0.0, fw as f64 - 1e-9);
    let x1 = (bb.2 + pad).clamp(0.0, fw as f64 - 1e-9);
    let y0 = (bb.1 - pad).clamp(0.0, fh as f64 - 1e-9);
    let y1 = (bb.3 + pad).clamp(0.0, fh as f64 - 1e-9);
    let sx = fw / lw;
    let sy = fh / lh;
    let cx0 = (x0 as usize) / sx;
    let cx1 = (x1 as usize) / sx;
    let cy0 = (y0 as usize) / sy;
    let cy1 = (y1 as usize) / sy;
    for cy in cy0..=cy1.min(lh - 1) {
        for cx in cx0..=cx1.min(lw - 1) {
            mask[[0, cy * lw + cx, 0]] = 1.0;
        }
    }
}

fn keypoint_mask(
    skel: &Skeleton2D,
    groups: &[Vec<String>],
    latent_hw: (usize, usize),
    frame_hw: (usize, usize),
    dilation: f64,
    region: Region,
) -> Result<(RegionMask, bool), AttnError> {
    let (lh, lw) = latent_hw;
    let (fh, fw) = frame_hw;
    if lh == 0 || lw == 0 || fh % lh != 0 || fw % lw != 0 {
        return Err(AttnError::BadGeometry(format!(
            "latent {lh}x{lw} must divide frame {fh}x{fw}"
        )));
    }
    let mut data = Arr::zeros(IxDyn(&[1, lh * lw, 1]));
    let mut any = false;
    for names in groups {
        let pts: Vec<(f64, f64)> = names.iter().filter_map(|n| skel.confident(n)).collect();
        if let Some(bb) = bbox_of(&pts) {
            mark_box(&mut data, bb, dilation, latent_hw, frame_hw);
            any = true;
        }
    }
    let mask = RegionMask::new(data, region)?;
    Ok((mask, !any))
}

/// Latent-grid mask covering the dilated bounding box of the face keypoints.
/// Returns the mask and a flag that is true when no face keypoint was
/// confident (the mask is then all zeros).
pub fn head_mask_from_keypoints(
    skel: &Skeleton2D,
    latent_hw: (usize, usize),
    frame_hw: (usize, usize),
    dilation: f64,
) -> Result<(RegionMask, bool), AttnError> {
    keypoint_mask(
        skel,
        &[face_joints()],
        latent_hw,
        frame_hw,
        dilation,
        Region::Head,
    )
}

/// Latent-grid mask covering each hand's dilated keypoint box (wrist plus the
/// hand cluster, per side). Flag semantics match the head variant.
pub fn hand_mask_from_keypoints(
    skel: &Skeleton2D,
    latent_hw: (usize, usize),
    frame_hw: (usize, usize),
    dilation: f64,
) -> Result<(RegionMask, bool), AttnError> {
    let mut left = hand_joint_names("left");
    left.push("left_wrist".to_string());
    let mut right = hand_joint_names("right");
    right.push("right_wrist".to_string());
    keypoint_mask(
        skel,
        &[left, right],
        latent_hw,
        frame_hw,
        dilation,
        Region::Hand,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::random_skeleton;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn attn_fixture(
        seed: u64,
        b: usize,
        n: usize,
        m: usize,
        c: usize,
        d: usize,
    ) -> (ParamSet, Arr, Arr) {
        let mut params = ParamSet::new();
        register_attention(&mut params, "attn", c, d, 8, seed, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let hidden = Arr::from_shape_simple_fn(IxDyn(&[b, n, c]), || rng.gen_range(-1.0f32..1.0));
        let context = Arr::from_shape_simple_fn(IxDyn(&[b, m, d]), || rng.gen_range(-1.0f32..1.0));
        (params, hidden, context)
    }

    #[test]
    fn zero_mask_returns_hidden_bitwise_and_full_mask_matches_unmasked() {
        let (params, hidden, context) = attn_fixture(1, 2, 5, 7, 6, 4);
        let f = Frame::new(&params);
        let w = attention_weights(&f, "attn");
        let hv = f.constant(hidden.clone());
        let cv = f.constant(context.clone());

        let zeros = RegionMask::new(Arr::zeros(IxDyn(&[2, 5, 1])), Region::Head).unwrap();
        let gated = masked_cross_attention(&f, hv, cv, Some(&zeros), &w).unwrap();
        for (a, b) in f.value(gated).iter().zip(hidden.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let ones = RegionMask::ones(2, 5, Region::Head);
        let full = masked_cross_attention(&f, hv, cv, Some(&ones), &w).unwrap();
        let plain = masked_cross_attention(&f, hv, cv, None, &w).unwrap();
        assert_eq!(
            f.value(full).as_slice().unwrap(),
            f.value(plain).as_slice().unwrap()
        );
    }

    #[test]
    fn masked_rows_follow_independent_dense_oracle() {
        let (params, hidden, context) = attn_fixture(7, 1, 4, 3, 5, 4);
        let f = Frame::new(&params);
        let w = attention_weights(&f, "attn");
        let hv = f.constant(hidden.clone());
        let cv = f.constant(context.clone());
        let mut mdata = Arr::zeros(IxDyn(&[1, 4, 1]));
        mdata[[0, 1, 0]] = 1.0;
        mdata[[0, 3, 0]] = 1.0;
        let mask = RegionMask::new(mdata.clone(), Region::Hand).unwrap();
        let out = masked_cross_attention(&f, hv, cv, Some(&mask), &w).unwrap();
        let out = f.value(out);

        // dense oracle in f64
        let get2 = |v: Var| -> Vec<Vec<f64>> {
            let a = f.value(v);
            let (r, c) = (a.shape()[0], a.shape()[1]);
            (0..r)
                .map(|i| (0..c).map(|j| a[[i, j]] as f64).collect())
                .collect()
        };
        let wq = get2(w.wq);
        let wk = get2(w.wk);
        let wv = get2(w.wv);
        let wo = get2(w.wo);
        let dk = wq[0].len();
        for nq in 0..4 {
            let q: Vec<f64> = (0..dk)
                .map(|j| (0..5).map(|i| hidden[[0, nq, i]] as f64 * wq[i][j]).sum())
                .collect();
            let mut scores: Vec<f64> = (0..3)
                .map(|mi| {
                    let k: Vec<f64> = (0..dk)
                        .map(|j| (0..4).map(|i| context[[0, mi, i]] as f64 * wk[i][j]).sum())
                        .collect();
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for s in scores.iter_mut() {
                *s = (*s - mx).exp() / z;
            }
            for cc in 0..5 {
                let mut upd = 0.0f64;
                for j in 0..dk {
                    let mixed: f64 = (0..3)
                        .map(|mi| {
                            let vj: f64 =
                                (0..4).map(|i| context[[0, mi, i]] as f64 * wv[i][j]).sum();
                            scores[mi] * vj
                        })
                        .sum();
                    upd += mixed * wo[j][cc];
                }
                let want = if mdata[[0, nq, 0]] != 0.0 {
                    hidden[[0, nq, cc]] as f64 + upd
                } else {
                    hidden[[0, nq, cc]] as f64
                };
                assert_abs_diff_eq!(out[[0, nq, cc]] as f64, want, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn empty_context_is_rejected() {
        let (params, hidden, _) = attn_fixture(3, 1, 4, 2, 5, 4);
        let f = Frame::new(&params);
        let w = attention_weights(&f, "attn");
        let hv = f.constant(hidden);
        let cv = f.constant(Arr::zeros(IxDyn(&[1, 0, 4])));
        assert!(matches!(
            masked_cross_attention(&f, hv, cv, None, &w),
            Err(AttnError::EmptyContext)
        ));
    }

    #[test]
    fn perturbing_context_moves_only_masked_rows() {
        let (params, hidden, context) = attn_fixture(9, 1, 6, 4, 5, 4);
        let f = Frame::new(&params);
        let w = attention_weights(&f, "attn");
        let hv = f.constant(hidden.clone());
        let mut mdata = Arr::zeros(IxDyn(&[1, 6, 1]));
        mdata[[0, 0, 0]] = 1.0;
        mdata[[0, 4, 0]] = 1.0;
        let mask = RegionMask::new(mdata.clone(), Region::Head).unwrap();

        let out1 = {
            let cv = f.constant(context.clone());
            f.value(masked_cross_attention(&f, hv, cv, Some(&mask), &w).unwrap())
        };
        let out2 = {
            let cv = f.constant(&context + 0.37);
            f.value(masked_cross_attention(&f, hv, cv, Some(&mask), &w).unwrap())
        };
        for n in 0..6 {
            let row_changed = (0..5).any(|c| out1[[0, n, c]] != out2[[0, n, c]]);
            assert_eq!(row_changed, mdata[[0, n, 0]] != 0.0, "row {n}");
        }
    }

    #[test]
    fn self_attention_accepts_hidden_as_context() {
        let (mut params, hidden, _) = attn_fixture(11, 2, 6, 6, 5, 4);
        // self-attention projects from the hidden width on both sides
        register_attention(&mut params, "selfattn", 5, 5, 8, 11, false);
        let f = Frame::new(&params);
        let w = attention_weights(&f, "selfattn");
        let hv = f.constant(hidden.clone());
        let out = masked_cross_attention(&f, hv, hv, None, &w).unwrap();
        assert_eq!(f.shape(out), vec![2, 6, 5]);
        // the residual branch moved every row somewhere
        let moved = f
            .value(out)
            .iter()
            .zip(hidden.iter())
            .any(|(a, b)| a != b);
        assert!(moved);
    }

    #[test]
    fn head_mask_covers_face_box_and_flags_missing_faces() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let skel = random_skeleton(&mut rng, 14.0, (32.0, 36.0));
        let (mask, missing) = head_mask_from_keypoints(&skel, (8, 8), (64, 64), 0.25).unwrap();
        assert!(!missing);
        assert!(mask.coverage() > 0.0);
        let (nx, ny, _) = skel.get("nose").unwrap();
        let cell = ((ny as usize / 8).min(7), (nx as usize / 8).min(7));
        assert_eq!(mask.data()[[0, cell.0 * 8 + cell.1, 0]], 1.0);
        // far bottom corner stays clear
        assert_eq!(mask.data()[[0, 63, 0]], 0.0);

        // growing dilation never clears cells
        let (bigger, _) = head_mask_from_keypoints(&skel, (8, 8), (64, 64), 0.5).unwrap();
        for i in 0..64 {
            assert!(bigger.data()[[0, i, 0]] >= mask.data()[[0, i, 0]]);
        }

        let empty = Skeleton2D::new();
        let (mask, missing) = head_mask_from_keypoints(&empty, (8, 8), (64, 64), 0.25).unwrap();
        assert!(missing);
        assert_eq!(mask.coverage(), 0.0);

        assert!(head_mask_from_keypoints(&skel, (7, 8), (64, 64), 0.25).is_err());
    }

    #[test]
    fn keypoints_spanning_frame_fill_mask() {
        let mut skel = Skeleton2D::new();
        skel.set("left_eye", 0.5, 0.5, 1.0);
        skel.set("right_eye", 63.5, 63.5, 1.0);
        let (mask, _) = head_mask_from_keypoints(&skel, (4, 4), (64, 64), 0.0).unwrap();
        assert_eq!(mask.coverage(), 1.0);
    }

    #[test]
    fn hand_mask_marks_both_hands_separately() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let skel = random_skeleton(&mut rng, 14.0, (32.0, 36.0));
        let (mask, missing) = hand_mask_from_keypoints(&skel, (16, 16), (64, 64), 0.2).unwrap();
        assert!(!missing);
        for side in ["left", "right"] {
            let (wx, wy, _) = skel.get(&format!("{side}_hand_00")).unwrap();
            let cell = ((wy as usize / 4).min(15), (wx as usize / 4).min(15));
            assert_eq!(
                mask.data()[[0, cell.0 * 16 + cell.1, 0]],
                1.0,
                "{side} hand root uncovered"
            );
        }
        // hands near the lap should not force full coverage
        assert!(mask.coverage() < 0.9);
    }

    #[test]
    fn tiled_mask_repeats_rows() {
        let mut data = Arr::zeros(IxDyn(&[1, 3, 1]));
        data[[0, 2, 0]] = 1.0;
        let mask = RegionMask::new(data, Region::Mouth).unwrap();
        let tiled = mask.tiled(4);
        assert_eq!(tiled.batch(), 4);
        for b in 0..4 {
            assert_eq!(tiled.data()[[b, 0, 0]], 0.0);
            assert_eq!(tiled.data()[[b, 2, 0]], 1.0);
        }
        assert_abs_diff_eq!(tiled.coverage(), 1.0 / 3.0, epsilon = 1e-12);
    }
}
