//! Hand-detail codebook: a convolutional encoder/decoder pair around an
//! exact nearest-codeword quantizer. Trained on hand crops, its quantized
//! bottleneck vectors later serve as cross-attention context for the
//! denoiser's hand regions.

mod io;
mod quantize;
mod train;

pub use io::{load_codebook_checkpoint, save_codebook_checkpoint, CodebookCheckpoint, CODEBOOK_KIND};
pub use quantize::{codes_to_vectors, nearest_codes, quantize_ste, CodeStats, Quantized};
pub use train::{
    encoder_vectors, hand_tokens, reconstruction_mse, reconstruct, seed_codebook_from_vectors,
    vq_training_step, VqStepReport,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{attention_weights, masked_cross_attention, register_attention};
use crate::tensor::{init, init_rng, name_seed, Frame, ParamSet, Var};

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Container(#[from] crate::container::ContainerError),
}

/// Sizes of the codebook model. The defaults are full production scale;
/// [`CodebookConfig::toy`] is the size the test suite trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookConfig {
    /// Number of codewords (K).
    pub codewords: usize,
    /// Dimension of each codeword (D).
    pub code_dim: usize,
    /// Side length of the square input crop.
    pub image_size: usize,
    /// Side length of the quantized token grid.
    pub grid: usize,
    /// Input channels.
    pub in_channels: usize,
    /// Channel width at full resolution; doubles per level, capped at 4x.
    pub base_width: usize,
    /// Group count for the normalisation layers.
    pub groups: usize,
    /// Self-attention over the bottleneck grid.
    pub bottleneck_attn: bool,
    /// Commitment loss weight.
    pub beta: f32,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            codewords: 1024,
            code_dim: 256,
            image_size: 256,
            grid: 16,
            in_channels: 3,
            base_width: 128,
            groups: 32,
            bottleneck_attn: true,
            beta: 0.25,
        }
    }
}

impl CodebookConfig {
    /// The size the test suite can train in minutes on one core.
    pub fn toy() -> Self {
        CodebookConfig {
            codewords: 64,
            code_dim: 32,
            image_size: 64,
            grid: 16,
            in_channels: 3,
            base_width: 32,
            groups: 8,
            bottleneck_attn: true,
            beta: 0.25,
        }
    }

    pub fn validate(&self) -> Result<(), CodebookError> {
        let bad = |msg: String| Err(CodebookError::BadConfig(msg));
        if self.grid == 0 || self.image_size == 0 {
            return bad("grid and image_size must be positive".into());
        }
        if self.image_size % self.grid != 0 {
            return bad(format!(
                "grid {} must divide image size {}",
                self.grid, self.image_size
            ));
        }
        let ratio = self.image_size / self.grid;
        if !ratio.is_power_of_two() {
            return bad(format!(
                "image size / grid must be a power of two, got {ratio}"
            ));
        }
        if self.base_width == 0 || self.base_width % self.groups != 0 {
            return bad(format!(
                "groups {} must divide base width {}",
                self.groups, self.base_width
            ));
        }
        if self.codewords == 0 || self.code_dim == 0 || self.in_channels == 0 {
            return bad("codewords, code_dim and in_channels must be positive".into());
        }
        Ok(())
    }

    /// Number of stride-2 stages between image and grid resolution.
    pub fn n_down(&self) -> usize {
        (self.image_size / self.grid).trailing_zeros() as usize
    }

    /// Channel widths per resolution level, full resolution first.
    pub fn widths(&self) -> Vec<usize> {
        let cap = self.base_width * 4;
        let mut out = vec![self.base_width];
        for _ in 0..self.n_down() {
            out.push((out.last().unwrap() * 2).min(cap));
        }
        out
    }
}

fn register_res_block(params: &mut ParamSet, prefix: &str, c: usize, seed: u64) {
    params.add(&format!("{prefix}.n1.g"), init::ones(&[c]));
    params.add(&format!("{prefix}.n1.b"), init::zeros(&[c]));
    let mut rng = init_rng(seed, &format!("{prefix}.c1.w"));
    params.add(
        &format!("{prefix}.c1.w"),
        init::conv_kaiming(&mut rng, &[c, c, 3, 3]),
    );
    params.add(&format!("{prefix}.c1.b"), init::zeros(&[c]));
    params.add(&format!("{prefix}.n2.g"), init::ones(&[c]));
    params.add(&format!("{prefix}.n2.b"), init::zeros(&[c]));
    // the closing conv starts at zero, so every block begins as an identity
    params.add(&format!("{prefix}.c2.w"), init::zeros(&[c, c, 3, 3]));
    params.add(&format!("{prefix}.c2.b"), init::zeros(&[c]));
}

fn register_conv(params: &mut ParamSet, name: &str, cout: usize, cin: usize, seed: u64) {
    let mut rng = init_rng(seed, &format!("{name}.w"));
    params.add(
        &format!("{name}.w"),
        init::conv_kaiming(&mut rng, &[cout, cin, 3, 3]),
    );
    params.add(&format!("{name}.b"), init::zeros(&[cout]));
}

/// Register every parameter of the codebook model under the `cb.` prefix.
pub fn register_codebook_model(params: &mut ParamSet, cfg: &CodebookConfig, seed: u64) {
    cfg.validate().expect("invalid codebook config");
    let widths = cfg.widths();
    let last = *widths.last().unwrap();

    register_conv(params, "cb.enc.stem", widths[0], cfg.in_channels, seed);
    for i in 0..cfg.n_down() {
        register_res_block(params, &format!("cb.enc.res{i}"), widths[i], seed);
        register_conv(params, &format!("cb.enc.down{i}"), widths[i + 1], widths[i], seed);
    }
    register_res_block(params, "cb.enc.mid", last, seed);
    if cfg.bottleneck_attn {
        register_attention(params, "cb.enc.attn", last, last, last, seed, true);
    }
    register_conv(params, "cb.enc.out", cfg.code_dim, last, seed);

    let mut rng = init_rng(seed, "cb.book");
    params.add(
        "cb.book",
        init::normal(&mut rng, &[cfg.codewords, cfg.code_dim], 1.0 / (cfg.code_dim as f32).sqrt()),
    );

    register_conv(params, "cb.dec.stem", last, cfg.code_dim, seed);
    if cfg.bottleneck_attn {
        register_attention(params, "cb.dec.attn", last, last, last, seed, true);
    }
    register_res_block(params, "cb.dec.mid", last, seed);
    for i in (0..cfg.n_down()).rev() {
        register_conv(params, &format!("cb.dec.up{i}"), widths[i], widths[i + 1], seed);
        register_res_block(params, &format!("cb.dec.res{i}"), widths[i], seed);
    }
    register_conv(params, "cb.dec.out", cfg.in_channels, widths[0], seed);

    let _ = name_seed(seed, "cb"); // keep the seed path uniform for tooling
}

fn conv(f: &Frame, name: &str, x: Var, stride: usize) -> Var {
    f.conv2d(
        x,
        f.p_name(&format!("{name}.w")),
        Some(f.p_name(&format!("{name}.b"))),
        stride,
        1,
    )
}

fn res_block(f: &Frame, prefix: &str, x: Var, groups: usize) -> Var {
    let h = f.group_norm(
        x,
        groups,
        f.p_name(&format!("{prefix}.n1.g")),
        f.p_name(&format!("{prefix}.n1.b")),
        1e-5,
    );
    let h = f.silu(h);
    let h = conv(f, &format!("{prefix}.c1"), h, 1);
    let h = f.group_norm(
        h,
        groups,
        f.p_name(&format!("{prefix}.n2.g")),
        f.p_name(&format!("{prefix}.n2.b")),
        1e-5,
    );
    let h = f.silu(h);
    let h = conv(f, &format!("{prefix}.c2"), h, 1);
    f.add(x, h)
}

/// Self-attention over the spatial grid of a `[B, C, H, W]` feature map.
fn attn_2d(f: &Frame, prefix: &str, x: Var) -> Var {
    let s = f.shape(x);
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let t = f.reshape(x, &[b, c, h * w]);
    let t = f.permute(t, &[0, 2, 1]);
    let wts = attention_weights(f, prefix);
    let t = masked_cross_attention(f, t, t, None, &wts).expect("self-attention shapes");
    let t = f.permute(t, &[0, 2, 1]);
    f.reshape(t, &[b, c, h, w])
}

/// Encode `[B, in, H, H]` crops to continuous grid vectors `[B, D, g, g]`.
pub fn encode(f: &Frame, cfg: &CodebookConfig, x: Var) -> Var {
    let mut h = conv(f, "cb.enc.stem", x, 1);
    for i in 0..cfg.n_down() {
        h = res_block(f, &format!("cb.enc.res{i}"), h, cfg.groups);
        h = conv(f, &format!("cb.enc.down{i}"), h, 2);
    }
    h = res_block(f, "cb.enc.mid", h, cfg.groups);
    if cfg.bottleneck_attn {
        h = attn_2d(f, "cb.enc.attn", h);
    }
    conv(f, "cb.enc.out", h, 1)
}

/// Decode grid vectors `[B, D, g, g]` back to `[B, in, H, H]`.
pub fn decode(f: &Frame, cfg: &CodebookConfig, z: Var) -> Var {
    let mut h = conv(f, "cb.dec.stem", z, 1);
    if cfg.bottleneck_attn {
        h = attn_2d(f, "cb.dec.attn", h);
    }
    h = res_block(f, "cb.dec.mid", h, cfg.groups);
    for i in (0..cfg.n_down()).rev() {
        h = f.upsample2x(h);
        h = conv(f, &format!("cb.dec.up{i}"), h, 1);
        h = res_block(f, &format!("cb.dec.res{i}"), h, cfg.groups);
    }
    conv(f, "cb.dec.out", h, 1)
}
