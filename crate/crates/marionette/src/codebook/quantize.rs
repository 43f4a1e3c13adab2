//! Exact nearest-codeword quantization with a straight-through gradient.

use ndarray::Array3;

use crate::tensor::{Arr, Frame, Var};

/// Nearest codeword for every grid vector: `[B, D, gh, gw] x [K, D] ->
/// [B, gh, gw]`. Distances are exact up to f64: squared differences
/// accumulate in f64 in dimension order, and the scan keeps the first
/// minimum (strict less-than), so ties break toward the lower index.
pub fn nearest_codes(z_e: &Arr, book: &Arr) -> Array3<usize> {
    assert_eq!(z_e.ndim(), 4, "nearest_codes: vectors must be [B, D, gh, gw]");
    assert_eq!(book.ndim(), 2, "nearest_codes: codebook must be [K, D]");
    let (b, d, gh, gw) = (z_e.shape()[0], z_e.shape()[1], z_e.shape()[2], z_e.shape()[3]);
    let k = book.shape()[0];
    assert_eq!(book.shape()[1], d, "nearest_codes: code dim mismatch");
    assert!(k > 0, "nearest_codes: empty codebook");
    let mut out = Array3::<usize>::zeros((b, gh, gw));
    for bi in 0..b {
        for y in 0..gh {
            for x in 0..gw {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for ki in 0..k {
                    let mut acc = 0.0f64;
                    for di in 0..d {
                        let diff = z_e[[bi, di, y, x]] as f64 - book[[ki, di]] as f64;
                        acc += diff * diff;
                    }
                    if acc < best_d {
                        best_d = acc;
                        best = ki;
                    }
                }
                out[[bi, y, x]] = best;
            }
        }
    }
    out
}

/// Gather codeword vectors for an index grid: `[B, gh, gw] -> [B, D, gh, gw]`.
pub fn codes_to_vectors(codes: &Array3<usize>, book: &Arr) -> Arr {
    let (b, gh, gw) = codes.dim();
    let d = book.shape()[1];
    let mut out = Arr::zeros(ndarray::IxDyn(&[b, d, gh, gw]));
    for bi in 0..b {
        for y in 0..gh {
            for x in 0..gw {
                let k = codes[[bi, y, x]];
                for di in 0..d {
                    out[[bi, di, y, x]] = book[[k, di]];
                }
            }
        }
    }
    out
}

/// Everything the training step needs from one quantization.
pub struct Quantized {
    /// Decoder input: codeword values, gradient routed straight to `z_e`.
    pub z_q: Var,
    /// Chosen codeword per grid cell.
    pub codes: Array3<usize>,
    /// Pulls selected codewords toward the (frozen) encoder output.
    pub codebook_loss: Var,
    /// Pulls the encoder output toward the (frozen) selected codewords.
    pub commitment_loss: Var,
}

/// Quantize encoder output `z_e` `[B, D, gh, gw]` against the codebook var
/// `book` `[K, D]`, wiring the straight-through estimator and both
/// vector-quantization losses.
pub fn quantize_ste(f: &Frame, z_e: Var, book: Var) -> Quantized {
    let ze = f.data(z_e);
    let bk = f.data(book);
    let codes = nearest_codes(&ze, &bk);
    let (b, gh, gw) = codes.dim();
    let d = bk.shape()[1];

    let flat: Vec<usize> = codes.iter().copied().collect();
    let rows = f.index_select0(book, &flat); // [B*gh*gw, D], differentiable in book
    let sel = f.reshape(rows, &[b, gh, gw, d]);
    let sel = f.permute(sel, &[0, 3, 1, 2]); // [B, D, gh, gw]

    let z_q = f.straight_through(z_e, &f.value(sel));
    let codebook_loss = f.mse(sel, f.detach(z_e));
    let commitment_loss = f.mse(z_e, f.detach(sel));
    Quantized {
        z_q,
        codes,
        codebook_loss,
        commitment_loss,
    }
}

/// Running codeword usage statistics.
#[derive(Debug, Clone)]
pub struct CodeStats {
    counts: Vec<u64>,
    total: u64,
}

impl CodeStats {
    pub fn new(codewords: usize) -> Self {
        CodeStats {
            counts: vec![0; codewords],
            total: 0,
        }
    }

    pub fn record<I: IntoIterator<Item = usize>>(&mut self, codes: I) {
        for c in codes {
            self.counts[c] += 1;
            self.total += 1;
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Codewords selected at least once.
    pub fn active(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Fraction of the codebook in use.
    pub fn usage(&self) -> f64 {
        self.active() as f64 / self.counts.len() as f64
    }

    /// Exponentiated entropy of the empirical code distribution; `K` when
    /// uniform, `1` when a single code dominates.
    pub fn perplexity(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let n = self.total as f64;
        let h: f64 = self
            .counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        h.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamSet;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_from_vectors(vectors: &[Vec<f32>]) -> Arr {
        // lay n vectors out as a [1, D, 1, n] grid
        let d = vectors[0].len();
        let n = vectors.len();
        let mut z = Arr::zeros(IxDyn(&[1, d, 1, n]));
        for (i, v) in vectors.iter().enumerate() {
            for (di, &x) in v.iter().enumerate() {
                z[[0, di, 0, i]] = x;
            }
        }
        z
    }

    #[test]
    fn nearest_codes_match_hand_example() {
        let book = ndarray::arr2(&[[0.0f32, 0.0], [1.0, 0.0], [0.0, 2.0]]).into_dyn();
        let z = grid_from_vectors(&[
            vec![0.4, 0.0],  // d² = .16 / .36 / 4.16  -> 0
            vec![0.8, 0.1],  // d² = .65 / .05 / 4.25  -> 1
            vec![0.2, 1.2],  // d² = 1.48 / 2.08 / .68 -> 2
        ]);
        let codes = nearest_codes(&z, &book);
        assert_eq!(codes[[0, 0, 0]], 0);
        assert_eq!(codes[[0, 0, 1]], 1);
        assert_eq!(codes[[0, 0, 2]], 2);
    }

    #[test]
    fn ties_break_toward_the_lower_index() {
        // exact midpoint between rows 0 and 1, and duplicated rows 2/3
        let book = ndarray::arr2(&[[0.0f32, 0.0], [1.0, 0.0], [5.0, 5.0], [5.0, 5.0]]).into_dyn();
        let z = grid_from_vectors(&[vec![0.5, 0.0], vec![5.0, 5.0]]);
        let codes = nearest_codes(&z, &book);
        assert_eq!(codes[[0, 0, 0]], 0);
        assert_eq!(codes[[0, 0, 1]], 2);
    }

    #[test]
    fn codes_to_vectors_reads_codebook_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let book = Arr::from_shape_simple_fn(IxDyn(&[5, 3]), || rng.gen_range(-1.0f32..1.0));
        let codes = ndarray::arr3(&[[[4usize, 0], [2, 2]]]);
        let v = codes_to_vectors(&codes, &book);
        assert_eq!(v.shape(), &[1, 3, 2, 2]);
        for y in 0..2 {
            for x in 0..2 {
                for d in 0..3 {
                    assert_eq!(v[[0, d, y, x]].to_bits(), book[[codes[[0, y, x]], d]].to_bits());
                }
            }
        }
    }

    #[test]
    fn ste_routes_decoder_gradient_to_encoder_output() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ze_id = params.add(
            "ze",
            Arr::from_shape_simple_fn(IxDyn(&[1, 2, 2, 2]), || rng.gen_range(-1.0f32..1.0)),
        );
        params.add(
            "book",
            Arr::from_shape_simple_fn(IxDyn(&[4, 2]), || rng.gen_range(-1.0f32..1.0)),
        );
        let f = Frame::new(&params);
        let z_e = f.p(ze_id);
        let book = f.p_name("book");
        let q = quantize_ste(&f, z_e, book);
        // loss = mean(z_q^2): d/dz_q = 2 z_q / N, and STE hands that to z_e
        let loss = f.mean_all(f.mul(q.z_q, q.z_q));
        let mut grads = f.backward(loss);
        let got = grads.take(z_e).expect("z_e gradient");
        let zq = f.value(q.z_q);
        let n = zq.len() as f32;
        for (g, &v) in got.iter().zip(zq.iter()) {
            assert_abs_diff_eq!(*g, 2.0 * v / n, epsilon = 1e-6);
        }
    }

    #[test]
    fn codebook_loss_touches_only_selected_rows() {
        let mut params = ParamSet::new();
        // vectors sit near rows 0 and 2; rows 1 and 3 are far away
        params.add(
            "book",
            ndarray::arr2(&[[0.0f32, 0.0], [50.0, 0.0], [1.0, 1.0], [0.0, 50.0]]).into_dyn(),
        );
        let f = Frame::new(&params);
        let z = grid_from_vectors(&[vec![0.1, -0.2], vec![0.9, 1.1]]);
        let z_e = f.constant(z);
        let book = f.p_name("book");
        let q = quantize_ste(&f, z_e, book);
        assert_eq!(q.codes[[0, 0, 0]], 0);
        assert_eq!(q.codes[[0, 0, 1]], 2);
        let mut grads = f.backward(q.codebook_loss);
        let g = grads.take(book).expect("book gradient");
        for d in 0..2 {
            assert_ne!(g[[0, d]], 0.0);
            assert_eq!(g[[1, d]], 0.0);
            assert_ne!(g[[2, d]], 0.0);
            assert_eq!(g[[3, d]], 0.0);
        }
    }

    #[test]
    fn commitment_loss_matches_distance_to_selected_codes() {
        let mut params = ParamSet::new();
        params.add("book", ndarray::arr2(&[[0.0f32, 0.0], [2.0, 0.0]]).into_dyn());
        let f = Frame::new(&params);
        let z = grid_from_vectors(&[vec![0.3, 0.4]]); // nearest: row 0
        let z_e = f.constant(z);
        let book = f.p_name("book");
        let q = quantize_ste(&f, z_e, book);
        // mse over 2 dims: (0.3² + 0.4²)/2
        let want = (0.09 + 0.16) / 2.0;
        assert_abs_diff_eq!(f.value(q.commitment_loss)[[]] as f64, want, epsilon = 1e-6);
        assert_abs_diff_eq!(f.value(q.codebook_loss)[[]] as f64, want, epsilon = 1e-6);
    }

    #[test]
    fn stats_track_usage_and_perplexity() {
        let mut s = CodeStats::new(4);
        assert_eq!(s.perplexity(), 0.0);
        s.record([0usize, 1, 2, 3]);
        assert_eq!(s.active(), 4);
        assert_abs_diff_eq!(s.usage(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.perplexity(), 4.0, epsilon = 1e-9);

        let mut s = CodeStats::new(4);
        s.record(std::iter::repeat(2usize).take(10));
        assert_eq!(s.active(), 1);
        assert_abs_diff_eq!(s.usage(), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.perplexity(), 1.0, epsilon = 1e-9);
    }
}
