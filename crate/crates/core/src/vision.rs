//! Toy vision expert encoders and token reduction.
//!
//! An encoder is a patch embedding (linear projection of flattened patches
//! plus a learned per-position embedding) followed by two pre-norm attention
//! blocks. Each expert then reduces its raw token grid with one of:
//!   - pixel unshuffle (space-to-depth): r×r blocks concatenate along the
//!     channel axis, trading 4× tokens for 4× width at r = 2;
//!   - bilinear resize (align-corners) of the token grid;
//!   - no reduction.
//!
//! Every `encode` call bumps a process-wide counter so tests can assert how
//! many encoder forwards an inference actually performed.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, Linear, Param};
use crate::optim::{adamw_step, OptimizerConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

static ENCODE_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of encoder forwards performed by this process so far.
pub fn encode_calls() -> u64 {
    ENCODE_CALLS.load(Ordering::Relaxed)
}

// ─── Images ──────────────────────────────────────────────────────────────

/// H×W×C image, row-major with channels fastest, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> ImageTensor {
        assert_eq!(data.len(), h * w * c, "image buffer length mismatch");
        assert!(
            data.iter().all(|&v| (0.0..=1.0).contains(&v)),
            "image values must lie in [0,1]"
        );
        ImageTensor { h, w, c, data }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> ImageTensor {
        ImageTensor::new(h, w, c, vec![value; h * w * c])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    /// Mean over all pixels of the channel average — used by the data
    /// generator's luminance checks.
    pub fn mean_luminance(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

// ─── Feature maps ────────────────────────────────────────────────────────

/// Token grid produced by an encoder: grid_h × grid_w tokens of `width`
/// channels, stored as a (grid_h·grid_w) × width matrix in row-major grid
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub width: usize,
    pub tokens: Tensor,
}

impl FeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, tokens: Tensor) -> FeatureMap {
        assert_eq!(tokens.rows(), grid_h * grid_w, "token count/grid mismatch");
        FeatureMap {
            grid_h,
            grid_w,
            width: tokens.cols(),
            tokens,
        }
    }

    pub fn token_count(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

// ─── Encoder specs ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum Reduction {
    None,
    /// Space-to-depth with the given block edge r.
    PixelUnshuffle(usize),
    /// Align-corners bilinear resize of the token grid to (h, w).
    Bilinear { h: usize, w: usize },
}

/// Static geometry of one expert encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub name: String,
    /// Square input resolution in pixels.
    pub resolution: usize,
    pub patch: usize,
    pub width: usize,
    pub reduction: Reduction,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.patch == 0 || self.resolution % self.patch != 0 {
            return Err(Error::Config(format!(
                "encoder {}: resolution {} not divisible by patch {}",
                self.name, self.resolution, self.patch
            )));
        }
        if self.width == 0 {
            return Err(Error::Config(format!("encoder {}: zero width", self.name)));
        }
        let g = self.raw_grid();
        match self.reduction {
            Reduction::None => {}
            Reduction::PixelUnshuffle(r) => {
                if r == 0 || g % r != 0 {
                    return Err(Error::Config(format!(
                        "encoder {}: grid {g} not divisible by unshuffle factor {r}",
                        self.name
                    )));
                }
            }
            Reduction::Bilinear { h, w } => {
                if h == 0 || w == 0 {
                    return Err(Error::Config(format!(
                        "encoder {}: bilinear target {h}x{w} must be at least 1x1",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tokens per side before reduction.
    pub fn raw_grid(&self) -> usize {
        self.resolution / self.patch
    }

    pub fn raw_tokens(&self) -> usize {
        self.raw_grid() * self.raw_grid()
    }

    pub fn post_tokens(&self) -> usize {
        let g = self.raw_grid();
        match self.reduction {
            Reduction::None => g * g,
            Reduction::PixelUnshuffle(r) => (g / r) * (g / r),
            Reduction::Bilinear { h, w } => h * w,
        }
    }

    /// Channel width after reduction (unshuffle multiplies width by r²).
    pub fn post_width(&self) -> usize {
        match self.reduction {
            Reduction::PixelUnshuffle(r) => self.width * r * r,
            _ => self.width,
        }
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        self.patch * self.patch * channels
    }
}

// ─── Patchify ────────────────────────────────────────────────────────────

/// Flatten an image into patch vectors: one row per patch in row-major grid
/// order; within a patch, pixels run row-major with channels fastest.
pub fn patchify(img: &ImageTensor, patch: usize) -> Tensor {
    assert!(img.h % patch == 0 && img.w % patch == 0, "patch must divide image");
    let (gh, gw) = (img.h / patch, img.w / patch);
    let dim = patch * patch * img.c;
    let mut out = Tensor::zeros(&[gh * gw, dim]);
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            let mut i = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..img.c {
                        row[i] = img.pixel(py * patch + dy, px * patch + dx, ch);
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

// ─── Encoder ─────────────────────────────────────────────────────────────

const ENCODER_BLOCKS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub patch_proj: Linear, // patch_dim × width
    pub pos: Param,         // raw_tokens × width
    pub blocks: Vec<AttentionBlock>,
}

pub struct EncoderCache {
    patch_cache: crate::nn::LinearCache,
    block_caches: Vec<crate::nn::AttentionCache>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, channels: usize, rng: &mut Rng) -> Result<Encoder> {
        spec.validate()?;
        let name = spec.name.clone();
        let patch_proj = Linear::new(
            &format!("encoder.{name}.patch"),
            spec.patch_dim(channels),
            spec.width,
            rng,
        );
        let pos = Param::matrix(
            format!("encoder.{name}.pos"),
            spec.raw_tokens(),
            spec.width,
            rng,
        );
        let blocks = (0..ENCODER_BLOCKS)
            .map(|i| {
                AttentionBlock::new(
                    &format!("encoder.{name}.block{i}"),
                    spec.width,
                    1,
                    false,
                    rng,
                )
            })
            .collect();
        Ok(Encoder {
            spec,
            patch_proj,
            pos,
            blocks,
        })
    }

    /// Forward from pre-extracted patch vectors, keeping caches for prefit.
    pub fn forward_tokens(&self, patches: &Tensor) -> Result<(Tensor, EncoderCache)> {
        let (mut x, patch_cache) = self.patch_proj.forward(patches)?;
        x.add_assign(&self.pos.value)?;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, cache) = blk.forward(&x)?;
            x = y;
            block_caches.push(cache);
        }
        Ok((
            x,
            EncoderCache {
                patch_cache,
                block_caches,
            },
        ))
    }

    /// Backward from a feature gradient; accumulates into this encoder's
    /// parameter grads (the patch-pixel gradient is discarded).
    pub fn backward_tokens(&mut self, cache: &EncoderCache, dfeat: &Tensor) -> Result<()> {
        let mut dx = dfeat.clone();
        for (blk, bc) in self.blocks.iter_mut().zip(&cache.block_caches).rev() {
            dx = blk.backward(bc, &dx)?;
        }
        self.pos.grad.add_assign(&dx)?;
        self.patch_proj.backward(&cache.patch_cache, &dx)?;
        Ok(())
    }

    /// Full encoder forward: raw (un-reduced) feature map for an image at
    /// exactly the spec resolution.
    pub fn encode(&self, img: &ImageTensor) -> Result<FeatureMap> {
        if img.h != self.spec.resolution || img.w != self.spec.resolution {
            return Err(Error::Config(format!(
                "encoder {} expects {}x{} input, got {}x{}",
                self.spec.name, self.spec.resolution, self.spec.resolution, img.h, img.w
            )));
        }
        ENCODE_CALLS.fetch_add(1, Ordering::Relaxed);
        let patches = patchify(img, self.spec.patch);
        let (feat, _) = self.forward_tokens(&patches)?;
        let g = self.spec.raw_grid();
        Ok(FeatureMap::new(g, g, feat))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.patch_proj.params();
        p.push(&self.pos);
        for b in &self.blocks {
            p.extend(b.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.patch_proj.params_mut();
        p.push(&mut self.pos);
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p
    }
}

/// Encode an image, bilinearly resizing it to the encoder's resolution first
/// if it arrives at a different size.
pub fn encode_resized(enc: &Encoder, img: &ImageTensor) -> Result<FeatureMap> {
    if img.h == enc.spec.resolution && img.w == enc.spec.resolution {
        enc.encode(img)
    } else {
        enc.encode(&resize_image(img, enc.spec.resolution, enc.spec.resolution)?)
    }
}

// ─── Token reduction ─────────────────────────────────────────────────────

/// Space-to-depth: each r×r block of tokens becomes one token whose channel
/// vector is the concatenation of the block's D-vectors in row-major block
/// order, original channels fastest. 1024 tokens at r=2 become 256 tokens
/// of 4× the width; the map is a pure index permutation and thus invertible.
pub fn pixel_unshuffle(fmap: &FeatureMap, r: usize) -> Result<FeatureMap> {
    if r == 0 || fmap.grid_h % r != 0 || fmap.grid_w % r != 0 {
        return Err(Error::Config(format!(
            "pixel_unshuffle: grid {}x{} not divisible by r={r}",
            fmap.grid_h, fmap.grid_w
        )));
    }
    let (gh, gw, d) = (fmap.grid_h / r, fmap.grid_w / r, fmap.width);
    let mut out = Tensor::zeros(&[gh * gw, d * r * r]);
    for i in 0..gh {
        for j in 0..gw {
            let row = out.row_mut(i * gw + j);
            for di in 0..r {
                for dj in 0..r {
                    let src = fmap.tokens.row((i * r + di) * fmap.grid_w + (j * r + dj));
                    let off = (di * r + dj) * d;
                    row[off..off + d].copy_from_slice(src);
                }
            }
        }
    }
    Ok(FeatureMap::new(gh, gw, out))
}

/// Inverse of [`pixel_unshuffle`] (depth-to-space).
pub fn pixel_shuffle(fmap: &FeatureMap, r: usize) -> Result<FeatureMap> {
    if r == 0 || fmap.width % (r * r) != 0 {
        return Err(Error::Config(format!(
            "pixel_shuffle: width {} not divisible by r²={}",
            fmap.width,
            r * r
        )));
    }
    let d = fmap.width / (r * r);
    let (gh, gw) = (fmap.grid_h * r, fmap.grid_w * r);
    let mut out = Tensor::zeros(&[gh * gw, d]);
    for i in 0..fmap.grid_h {
        for j in 0..fmap.grid_w {
            let src = fmap.tokens.row(i * fmap.grid_w + j);
            for di in 0..r {
                for dj in 0..r {
                    let off = (di * r + dj) * d;
                    out.row_mut((i * r + di) * gw + (j * r + dj))
                        .copy_from_slice(&src[off..off + d]);
                }
            }
        }
    }
    Ok(FeatureMap::new(gh, gw, out))
}

/// Align-corners bilinear resampling of a (h, w, channels) grid stored
/// row-major with channels fastest. Output index i maps to source
/// coordinate i·(h−1)/(h'−1); a single-row/column target samples index 0.
fn bilinear_grid(
    src: &[f64],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow * c];
    let sy = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let sx = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    for oy in 0..oh {
        let y = oy as f64 * sy;
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for ox in 0..ow {
            let x = ox as f64 * sx;
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            for ch in 0..c {
                let v00 = src[(y0 * w + x0) * c + ch];
                let v01 = src[(y0 * w + x1) * c + ch];
                let v10 = src[(y1 * w + x0) * c + ch];
                let v11 = src[(y1 * w + x1) * c + ch];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out[(oy * ow + ox) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Align-corners bilinear resize of a token grid, each channel interpolated
/// independently (e.g. a 30×30 grid of 900 tokens down to 24×24 = 576).
pub fn bilinear_resize(fmap: &FeatureMap, oh: usize, ow: usize) -> Result<FeatureMap> {
    if oh == 0 || ow == 0 {
        return Err(Error::Config(format!(
            "bilinear_resize: target {oh}x{ow} must be at least 1x1"
        )));
    }
    if (oh != fmap.grid_h || ow != fmap.grid_w) && (fmap.grid_h < 2 || fmap.grid_w < 2) {
        return Err(Error::Config(format!(
            "bilinear_resize: source grid {}x{} too small to resample",
            fmap.grid_h, fmap.grid_w
        )));
    }
    let data = bilinear_grid(
        fmap.tokens.data(),
        fmap.grid_h,
        fmap.grid_w,
        fmap.width,
        oh,
        ow,
    );
    Ok(FeatureMap::new(
        oh,
        ow,
        Tensor::from_vec(&[oh * ow, fmap.width], data),
    ))
}

/// Bilinear image resize (same align-corners convention as feature maps).
pub fn resize_image(img: &ImageTensor, oh: usize, ow: usize) -> Result<ImageTensor> {
    if oh == 0 || ow == 0 {
        return Err(Error::Config(format!(
            "resize_image: target {oh}x{ow} must be at least 1x1"
        )));
    }
    if (oh != img.h || ow != img.w) && (img.h < 2 || img.w < 2) {
        return Err(Error::Config(format!(
            "resize_image: source {}x{} too small to resample",
            img.h, img.w
        )));
    }
    let data = bilinear_grid(img.data(), img.h, img.w, img.c, oh, ow);
    Ok(ImageTensor::new(oh, ow, img.c, data))
}

/// Apply an encoder spec's declared reduction to its raw feature map.
pub fn reduce(fmap: &FeatureMap, spec: &EncoderSpec) -> Result<FeatureMap> {
    match spec.reduction {
        Reduction::None => Ok(fmap.clone()),
        Reduction::PixelUnshuffle(r) => pixel_unshuffle(fmap, r),
        Reduction::Bilinear { h, w } => bilinear_resize(fmap, h, w),
    }
}

// ─── Prefit (masked-patch reconstruction) ────────────────────────────────

/// Masked patches are replaced by this constant grey before embedding.
const MASK_FILL: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PrefitConfig {
    pub steps: usize,
    pub batch: usize,
    pub mask_fraction: f64,
    pub optimizer: OptimizerConfig,
}

impl PrefitConfig {
    pub fn desk() -> PrefitConfig {
        PrefitConfig {
            steps: 300,
            batch: 8,
            mask_fraction: 0.5,
            optimizer: OptimizerConfig::with_lr(1e-3),
        }
    }
}

/// Fit an encoder to its home domain by masked-patch reconstruction: hide a
/// random subset of patches, encode, and regress the hidden pixels from the
/// masked positions' features through a throwaway linear head. Returns the
/// per-step loss trace. Images are resized to the spec resolution as needed.
pub fn prefit(
    enc: &mut Encoder,
    images: &[ImageTensor],
    cfg: &PrefitConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::Config("prefit: empty image set".into()));
    }
    cfg.optimizer.validate()?;
    let channels = images[0].c;
    let patch_dim = enc.spec.patch_dim(channels);
    let mut head = Linear::new(
        &format!("encoder.{}.recon", enc.spec.name),
        enc.spec.width,
        patch_dim,
        rng,
    );

    // Patch extraction is deterministic, so do it once up front.
    let prepared: Vec<Tensor> = images
        .iter()
        .map(|img| {
            let img = if img.h == enc.spec.resolution && img.w == enc.spec.resolution {
                img.clone()
            } else {
                resize_image(img, enc.spec.resolution, enc.spec.resolution)?
            };
            Ok(patchify(&img, enc.spec.patch))
        })
        .collect::<Result<_>>()?;

    let tokens = enc.spec.raw_tokens();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch {
            let patches = &prepared[rng.below(prepared.len())];

            let mut masked = patches.clone();
            let mut mask = vec![false; tokens];
            let mut any = false;
            for t in 0..tokens {
                if rng.next_f64() < cfg.mask_fraction {
                    mask[t] = true;
                    any = true;
                    masked.row_mut(t).fill(MASK_FILL);
                }
            }
            if !any {
                let t = rng.below(tokens);
                mask[t] = true;
                masked.row_mut(t).fill(MASK_FILL);
            }
            let n_masked = mask.iter().filter(|&&m| m).count();

            let (feat, cache) = enc.forward_tokens(&masked)?;
            let (recon, head_cache) = head.forward(&feat)?;

            // MSE over masked patches only.
            let denom = (n_masked * patch_dim) as f64;
            let mut drecon = Tensor::zeros(recon.shape());
            let mut loss = 0.0;
            for t in 0..tokens {
                if !mask[t] {
                    continue;
                }
                for i in 0..patch_dim {
                    let diff = recon.at(t, i) - patches.at(t, i);
                    loss += diff * diff / denom;
                    drecon.row_mut(t)[i] = 2.0 * diff / denom;
                }
            }
            loss_sum += loss;

            let dfeat = head.backward(&head_cache, &drecon)?;
            enc.backward_tokens(&cache, &dfeat)?;
        }

        let scale = 1.0 / cfg.batch as f64;
        for p in enc.params_mut().into_iter().chain(head.params_mut()) {
            p.grad.scale(scale);
            adamw_step(p, &cfg.optimizer)?;
            p.zero_grad();
        }
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: format!("prefit.{}", enc.spec.name),
                step,
            });
        }
        trace.push(loss);
    }
    // Prefit ends here; the reconstruction head is dropped and the encoder
    // is frozen by the caller. Optimizer moments are cleared so the
    // checkpoint only carries values.
    for p in enc.params_mut() {
        p.reset_moments();
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn desk_general_spec() -> EncoderSpec {
        EncoderSpec {
            name: "general".into(),
            resolution: 32,
            patch: 4,
            width: 32,
            reduction: Reduction::PixelUnshuffle(2),
        }
    }

    fn random_fmap(gh: usize, gw: usize, d: usize, seed: u64) -> FeatureMap {
        let mut rng = Rng::new(seed);
        let mut t = Tensor::zeros(&[gh * gw, d]);
        for v in t.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        FeatureMap::new(gh, gw, t)
    }

    #[test]
    fn patchify_orders_pixels_row_major_channels_fastest() {
        // 2×2 image, 1 channel, patch 1: four patches in reading order.
        let img = ImageTensor::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]);
        let p = patchify(&img, 1);
        assert_eq!(p.shape(), &[4, 1]);
        assert_eq!(p.data(), &[0.1, 0.2, 0.3, 0.4]);

        // Patch 2 over the same image: a single patch in scan order.
        let p = patchify(&img, 2);
        assert_eq!(p.shape(), &[1, 4]);
        assert_eq!(p.data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn encode_produces_the_raw_token_grid() {
        let mut rng = Rng::new(1);
        let enc = Encoder::new(desk_general_spec(), 3, &mut rng).unwrap();
        let img = ImageTensor::filled(32, 32, 3, 0.25);
        let f = enc.encode(&img).unwrap();
        assert_eq!((f.grid_h, f.grid_w, f.width), (8, 8, 32));
        assert_eq!(f.token_count(), 64);
    }

    #[test]
    fn encode_rejects_wrong_resolution() {
        let mut rng = Rng::new(1);
        let enc = Encoder::new(desk_general_spec(), 3, &mut rng).unwrap();
        let img = ImageTensor::filled(30, 30, 3, 0.25);
        assert!(matches!(enc.encode(&img), Err(Error::Config(_))));
    }

    #[test]
    fn encode_bumps_the_forward_counter() {
        let mut rng = Rng::new(2);
        let enc = Encoder::new(desk_general_spec(), 3, &mut rng).unwrap();
        let img = ImageTensor::filled(32, 32, 3, 0.5);
        let before = encode_calls();
        enc.encode(&img).unwrap();
        enc.encode(&img).unwrap();
        assert_eq!(encode_calls() - before, 2);
    }

    #[test]
    fn full_scale_spec_arithmetic_matches_reference_geometry() {
        // 448px at patch 14 → 32×32 = 1024 raw tokens → 256 after unshuffle.
        let general = EncoderSpec {
            name: "general".into(),
            resolution: 448,
            patch: 14,
            width: 1024,
            reduction: Reduction::PixelUnshuffle(2),
        };
        assert_eq!(general.raw_tokens(), 1024);
        assert_eq!(general.post_tokens(), 256);
        assert_eq!(general.post_width(), 4096);

        // 420px at patch 30 → 14×14 = 196 tokens, kept as-is.
        let formula = EncoderSpec {
            name: "formula".into(),
            resolution: 420,
            patch: 30,
            width: 768,
            reduction: Reduction::None,
        };
        assert_eq!(formula.raw_tokens(), 196);
        assert_eq!(formula.post_tokens(), 196);

        // 960px at patch 32 → 30×30 = 900 tokens → 24×24 = 576 bilinear.
        let chart = EncoderSpec {
            name: "chart".into(),
            resolution: 960,
            patch: 32,
            width: 1024,
            reduction: Reduction::Bilinear { h: 24, w: 24 },
        };
        assert_eq!(chart.raw_tokens(), 900);
        assert_eq!(chart.post_tokens(), 576);
    }

    #[test]
    fn pixel_unshuffle_two_by_two_concatenates_in_reading_order() {
        let f = FeatureMap::new(2, 2, Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let out = pixel_unshuffle(&f, 2).unwrap();
        assert_eq!((out.grid_h, out.grid_w, out.width), (1, 1, 4));
        assert_eq!(out.tokens.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_unshuffle_keeps_original_channels_fastest() {
        // 2×2 grid, 2 channels: token (i,j) has channels (10·i+j, +0.5).
        let mut t = Tensor::zeros(&[4, 2]);
        for i in 0..2 {
            for j in 0..2 {
                t.row_mut(i * 2 + j)[0] = (10 * i + j) as f64;
                t.row_mut(i * 2 + j)[1] = (10 * i + j) as f64 + 0.5;
            }
        }
        let out = pixel_unshuffle(&FeatureMap::new(2, 2, t), 2).unwrap();
        assert_eq!(
            out.tokens.data(),
            &[0.0, 0.5, 1.0, 1.5, 10.0, 10.5, 11.0, 11.5]
        );
    }

    #[test]
    fn pixel_unshuffle_rejects_non_divisible_grid() {
        let f = random_fmap(3, 3, 2, 0);
        assert!(matches!(pixel_unshuffle(&f, 2), Err(Error::Config(_))));
    }

    #[test]
    fn pixel_shuffle_inverts_unshuffle_bit_exactly() {
        let f = random_fmap(4, 4, 2, 9);
        let down = pixel_unshuffle(&f, 2).unwrap();
        let back = pixel_shuffle(&down, 2).unwrap();
        assert_eq!(back, f);
    }

    /// Independent scalar oracle for align-corners bilinear sampling.
    fn bilinear_oracle(f: &FeatureMap, oy: usize, ox: usize, ch: usize, oh: usize, ow: usize) -> f64 {
        let y = if oh > 1 {
            oy as f64 * (f.grid_h - 1) as f64 / (oh - 1) as f64
        } else {
            0.0
        };
        let x = if ow > 1 {
            ox as f64 * (f.grid_w - 1) as f64 / (ow - 1) as f64
        } else {
            0.0
        };
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(f.grid_h - 1), (x0 + 1).min(f.grid_w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let v = |yy: usize, xx: usize| f.tokens.at(yy * f.grid_w + xx, ch);
        v(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + v(y0, x1) * (1.0 - fy) * fx
            + v(y1, x0) * fy * (1.0 - fx)
            + v(y1, x1) * fy * fx
    }

    #[test]
    fn bilinear_identity_size_is_bit_exact() {
        let f = random_fmap(5, 7, 3, 2);
        let out = bilinear_resize(&f, 5, 7).unwrap();
        assert_eq!(out.tokens.data(), f.tokens.data());
    }

    #[test]
    fn bilinear_two_by_two_to_three_by_three_center_is_corner_mean() {
        let f = FeatureMap::new(2, 2, Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let out = bilinear_resize(&f, 3, 3).unwrap();
        assert!((out.tokens.at(4, 0) - 2.5).abs() < 1e-12);
        // Corners are preserved exactly under align-corners.
        assert_eq!(out.tokens.at(0, 0), 1.0);
        assert_eq!(out.tokens.at(2, 0), 2.0);
        assert_eq!(out.tokens.at(6, 0), 3.0);
        assert_eq!(out.tokens.at(8, 0), 4.0);
    }

    #[test]
    fn bilinear_thirty_to_twentyfour_matches_scalar_oracle() {
        // The full-scale chart geometry: 900 tokens down to 576.
        let f = random_fmap(30, 30, 4, 3);
        let out = bilinear_resize(&f, 24, 24).unwrap();
        assert_eq!(out.token_count(), 576);
        for oy in 0..24 {
            for ox in 0..24 {
                for ch in 0..4 {
                    let want = bilinear_oracle(&f, oy, ox, ch, 24, 24);
                    let got = out.tokens.at(oy * 24 + ox, ch);
                    assert!(
                        (got - want).abs() < 1e-10,
                        "mismatch at ({oy},{ox},{ch}): {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn bilinear_rejects_empty_target() {
        let f = random_fmap(4, 4, 1, 4);
        assert!(matches!(bilinear_resize(&f, 0, 3), Err(Error::Config(_))));
    }

    #[test]
    fn reduce_dispatches_per_spec() {
        let spec = EncoderSpec {
            name: "chart".into(),
            resolution: 960,
            patch: 32,
            width: 4,
            reduction: Reduction::Bilinear { h: 24, w: 24 },
        };
        let f = random_fmap(30, 30, 4, 5);
        assert_eq!(reduce(&f, &spec).unwrap().token_count(), 576);
    }

    #[test]
    fn prefit_reduces_reconstruction_loss() {
        let mut rng = Rng::new(6);
        let spec = EncoderSpec {
            name: "tiny".into(),
            resolution: 16,
            patch: 4,
            width: 16,
            reduction: Reduction::None,
        };
        let mut enc = Encoder::new(spec, 3, &mut rng).unwrap();
        // Structured images: vertical gradients with a per-image offset.
        let images: Vec<ImageTensor> = (0..12)
            .map(|k| {
                let mut img = ImageTensor::filled(16, 16, 3, 0.0);
                for y in 0..16 {
                    for x in 0..16 {
                        for ch in 0..3 {
                            let v = (y as f64 / 15.0 + k as f64 * 0.03 + ch as f64 * 0.1) % 1.0;
                            img.set_pixel(y, x, ch, v);
                        }
                    }
                }
                img
            })
            .collect();
        let cfg = PrefitConfig {
            steps: 60,
            batch: 4,
            mask_fraction: 0.5,
            optimizer: OptimizerConfig::with_lr(1e-3),
        };
        let trace = prefit(&mut enc, &images, &cfg, &mut rng).unwrap();
        let head: f64 = trace[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = trace[trace.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head * 0.8,
            "prefit failed to learn: head {head}, tail {tail}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn unshuffle_then_shuffle_is_identity(
            gh in 1usize..4, gw in 1usize..4, d in 1usize..4, r in 1usize..3, seed in 0u64..100
        ) {
            let f = random_fmap(gh * r, gw * r, d, seed);
            let round = pixel_shuffle(&pixel_unshuffle(&f, r).unwrap(), r).unwrap();
            prop_assert_eq!(round, f);
        }

        #[test]
        fn bilinear_output_stays_within_channel_bounds(
            oh in 1usize..8, ow in 1usize..8, seed in 0u64..100
        ) {
            let f = random_fmap(4, 5, 2, seed);
            let out = bilinear_resize(&f, oh, ow).unwrap();
            for ch in 0..2 {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for t in 0..f.token_count() {
                    lo = lo.min(f.tokens.at(t, ch));
                    hi = hi.max(f.tokens.at(t, ch));
                }
                for t in 0..out.token_count() {
                    let v = out.tokens.at(t, ch);
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn bilinear_is_linear_in_its_input(
            seed in 0u64..100, a in -2.0f64..2.0, b in -2.0f64..2.0
        ) {
            let f1 = random_fmap(4, 4, 2, seed);
            let f2 = random_fmap(4, 4, 2, seed.wrapping_add(7777));
            let mut combined = f1.clone();
            for (c, (x, y)) in combined
                .tokens
                .data_mut()
                .iter_mut()
                .zip(f1.tokens.data().iter().zip(f2.tokens.data()))
            {
                *c = a * x + b * y;
            }
            let lhs = bilinear_resize(&combined, 3, 6).unwrap();
            let r1 = bilinear_resize(&f1, 3, 6).unwrap();
            let r2 = bilinear_resize(&f2, 3, 6).unwrap();
            for i in 0..lhs.tokens.numel() {
                let want = a * r1.tokens.data()[i] + b * r2.tokens.data()[i];
                prop_assert!((lhs.tokens.data()[i] - want).abs() < 1e-9);
            }
        }
    }
}
