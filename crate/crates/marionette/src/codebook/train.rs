//! Training step, evaluation helpers and the data-seeded codebook init.

use ndarray::{Array3, IxDyn};
use rand::Rng;

use super::quantize::{codes_to_vectors, nearest_codes, quantize_ste};
use super::{decode, encode, CodebookConfig};
use crate::tensor::{init_rng, Adam, Arr, Frame, ParamSet};

/// Loss breakdown of one optimisation step.
#[derive(Debug, Clone)]
pub struct VqStepReport {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// Codeword chosen per grid cell of this batch.
    pub codes: Array3<usize>,
}

fn check_batch(cfg: &CodebookConfig, batch: &Arr) {
    let s = batch.shape();
    assert_eq!(s.len(), 4, "batch must be [B, C, H, W]");
    assert_eq!(
        &s[1..],
        &[cfg.in_channels, cfg.image_size, cfg.image_size],
        "batch does not match the configured crop size"
    );
}

/// One optimisation step on a crop batch `[B, in, H, H]`: reconstruction
/// plus codebook plus weighted commitment loss.
pub fn vq_training_step(
    params: &mut ParamSet,
    opt: &mut Adam,
    cfg: &CodebookConfig,
    batch: &Arr,
) -> VqStepReport {
    check_batch(cfg, batch);
    let (grads, report) = {
        let f = Frame::new(params);
        let x = f.constant(batch.clone());
        let z_e = encode(&f, cfg, x);
        let q = quantize_ste(&f, z_e, f.p_name("cb.book"));
        let xh = decode(&f, cfg, q.z_q);
        let recon = f.mse(xh, x);
        let penalty = f.scale(q.commitment_loss, cfg.beta);
        let loss = f.add(recon, f.add(q.codebook_loss, penalty));
        let mut g = f.backward(loss);
        let grads = f.param_grads(&mut g);
        let report = VqStepReport {
            total: f.value(loss)[[]] as f64,
            recon: f.value(recon)[[]] as f64,
            codebook: f.value(q.codebook_loss)[[]] as f64,
            commitment: f.value(q.commitment_loss)[[]] as f64,
            codes: q.codes,
        };
        (grads, report)
    };
    for (id, g) in grads {
        params.accumulate_grad(id, g);
    }
    opt.step(params);
    report
}

/// Quantized reconstruction of a batch, plus the chosen codes.
pub fn reconstruct(params: &ParamSet, cfg: &CodebookConfig, batch: &Arr) -> (Arr, Array3<usize>) {
    check_batch(cfg, batch);
    let f = Frame::new(params);
    let x = f.constant(batch.clone());
    let z_e = encode(&f, cfg, x);
    let q = quantize_ste(&f, z_e, f.p_name("cb.book"));
    let xh = decode(&f, cfg, q.z_q);
    (f.value(xh), q.codes)
}

/// Mean squared reconstruction error, accumulated in f64.
pub fn reconstruction_mse(params: &ParamSet, cfg: &CodebookConfig, batch: &Arr) -> f64 {
    let (xh, _) = reconstruct(params, cfg, batch);
    batch
        .iter()
        .zip(xh.iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// Encoder outputs of a batch flattened to `[B * g * g, D]`, for seeding the
/// codebook from real data.
pub fn encoder_vectors(params: &ParamSet, cfg: &CodebookConfig, batch: &Arr) -> Arr {
    check_batch(cfg, batch);
    let f = Frame::new(params);
    let x = f.constant(batch.clone());
    let z = encode(&f, cfg, x); // [B, D, g, g]
    let s = f.shape(z);
    let t = f.permute(z, &[0, 2, 3, 1]);
    let t = f.reshape(t, &[s[0] * s[2] * s[3], s[1]]);
    f.value(t)
}

/// Replace the codebook with rows sampled from `vectors` `[N, D]`. With
/// `N >= K` the rows are distinct samples; otherwise sampling repeats with a
/// small jitter so no two codewords start identical.
pub fn seed_codebook_from_vectors(params: &mut ParamSet, vectors: &Arr, seed: u64) {
    let (k, d) = {
        let book = params.get_by_name("cb.book").expect("codebook registered");
        (book.shape()[0], book.shape()[1])
    };
    assert_eq!(vectors.ndim(), 2, "vectors must be [N, D]");
    let n = vectors.shape()[0];
    assert_eq!(vectors.shape()[1], d, "vector dim must match the codebook");
    assert!(n > 0, "need at least one seed vector");

    let mut rng = init_rng(seed, "cb.book.seed");
    let mut book = Arr::zeros(IxDyn(&[k, d]));
    if n >= k {
        let picks = rand::seq::index::sample(&mut rng, n, k);
        for (row, src) in picks.into_iter().enumerate() {
            for di in 0..d {
                book[[row, di]] = vectors[[src, di]];
            }
        }
    } else {
        for row in 0..k {
            let src = rng.gen_range(0..n);
            for di in 0..d {
                book[[row, di]] = vectors[[src, di]] + rng.gen_range(-1e-3f32..1e-3);
            }
        }
    }
    params.set_value_by_name("cb.book", book);
}

/// Encode crops and return their quantized codeword sequences as
/// cross-attention context: `([B, g*g, D], codes)`. Values are exact
/// codebook rows.
pub fn hand_tokens(
    params: &ParamSet,
    cfg: &CodebookConfig,
    crops: &Arr,
) -> (Arr, Array3<usize>) {
    check_batch(cfg, crops);
    let f = Frame::new(params);
    let x = f.constant(crops.clone());
    let z_e = encode(&f, cfg, x);
    let book = params.get_by_name("cb.book").expect("codebook registered");
    let codes = nearest_codes(&f.data(z_e), book);
    let vecs = codes_to_vectors(&codes, book); // [B, D, g, g]
    let (b, gh, gw) = codes.dim();
    let d = book.shape()[1];
    let mut out = Arr::zeros(IxDyn(&[b, gh * gw, d]));
    for bi in 0..b {
        for y in 0..gh {
            for x in 0..gw {
                for di in 0..d {
                    out[[bi, y * gw + x, di]] = vecs[[bi, di, y, x]];
                }
            }
        }
    }
    (out, codes)
}
