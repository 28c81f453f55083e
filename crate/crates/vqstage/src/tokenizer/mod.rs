//! Toy vector-quantized image tokenizer.
//!
//! A strided conv encoder turns an H×W image into (H/f)·(W/f) features of
//! dimension d, each quantized to its nearest codebook entry; a mirrored
//! decoder reconstructs pixels from the quantized grid. The codebook is
//! maintained by exponential moving averages by default; the quantization
//! error per token is kept around as a difficulty score for stage planning.

mod codebook;
mod dataset_file;

pub use codebook::{quantize, Codebook, QuantizationResult};
pub use dataset_file::{load_token_dataset, save_token_dataset, TokenDataset};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::nn::{
    fs, load_params, save_params, AdamW, Conv2d, Linear, LrSchedule, NodeId, ParamSet, Scalar,
    Tape, TapeParams, Tensor,
};
use crate::synth::{Dataset, Split};
use crate::TokenId;

#[derive(Clone, Debug)]
pub struct VqConfig {
    /// Commitment weight β.
    pub beta: f64,
    /// Codebook size K.
    pub codebook_size: usize,
    /// Feature dimension d.
    pub embed_dim: usize,
    /// Spatial compression factor f; must be a power of two.
    pub downsample: usize,
    /// EMA decay γ for codebook maintenance.
    pub ema_decay: f64,
    /// EMA updates by default; false keeps the codebook-gradient loss term.
    pub use_ema: bool,
    /// Width of the first conv stage; later stages double up to a cap.
    pub base_channels: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        // Desk-scale geometry: 32x32 images, f=4, L=64 tokens.
        VqConfig {
            beta: 0.25,
            codebook_size: 128,
            embed_dim: 32,
            downsample: 4,
            ema_decay: 0.99,
            use_ema: true,
            base_channels: 32,
        }
    }
}

impl VqConfig {
    /// Production-scale reference geometry: 512x512 images compressed 16x
    /// into 32x32 token grids over a 16384-entry codebook of dimension 256.
    pub fn production_scale() -> Self {
        VqConfig {
            beta: 0.25,
            codebook_size: 16384,
            embed_dim: 256,
            downsample: 16,
            ema_decay: 0.99,
            use_ema: true,
            base_channels: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::InvalidArgument("beta must be positive".into()));
        }
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(Error::InvalidArgument(format!(
                "downsample factor {} must be a power of two >= 2",
                self.downsample
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::InvalidArgument("codebook needs at least 2 entries".into()));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    fn channels(&self) -> Vec<usize> {
        let cap = 2 * self.base_channels;
        (0..self.stages()).map(|i| (self.base_channels << i).min(cap)).collect()
    }

    pub fn tokens_per_image(&self, height: usize, width: usize) -> usize {
        (height / self.downsample) * (width / self.downsample)
    }
}

pub struct Tokenizer<T: Scalar> {
    pub cfg: VqConfig,
    pub params: ParamSet<T>,
    pub codebook: Codebook<T>,
    enc_convs: Vec<Conv2d>,
    enc_proj: Linear,
    dec_proj: Linear,
    dec_convs: Vec<Conv2d>,
    dec_out: Conv2d,
}

impl<T: Scalar> Tokenizer<T> {
    pub fn new(cfg: VqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::nn::rng::substream(seed, 0x746f6b);
        let mut params = ParamSet::new();
        let chans = cfg.channels();

        let mut enc_convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in chans.iter().enumerate() {
            enc_convs
                .push(Conv2d::init(&mut params, &format!("enc.conv{i}"), c_in, c_out, 3, 2, 1, &mut rng));
            c_in = c_out;
        }
        let top = *chans.last().unwrap();
        let enc_proj = Linear::init(&mut params, "enc.proj", top, cfg.embed_dim, 0.02, true, &mut rng);
        let dec_proj = Linear::init(&mut params, "dec.proj", cfg.embed_dim, top, 0.02, true, &mut rng);
        let mut dec_convs = Vec::new();
        let mut c_in = top;
        for (i, &c_out) in chans.iter().rev().enumerate() {
            dec_convs
                .push(Conv2d::init(&mut params, &format!("dec.conv{i}"), c_in, c_out, 3, 1, 1, &mut rng));
            c_in = c_out;
        }
        let dec_out = Conv2d::init(&mut params, "dec.out", c_in, 3, 3, 1, 1, &mut rng);

        let entries = Tensor::randn(vec![cfg.codebook_size, cfg.embed_dim], 0.05, &mut rng);
        let codebook = Codebook::new(entries, cfg.ema_decay);
        Ok(Tokenizer { cfg, params, codebook, enc_convs, enc_proj, dec_proj, dec_convs, dec_out })
    }

    /// Re-seeds the codebook from observed encoder features (sampled with
    /// replacement); warm start that avoids dead entries.
    pub fn init_codebook_from(&mut self, features: &[T], rng: &mut impl Rng) {
        let d = self.cfg.embed_dim;
        let n = features.len() / d;
        if n == 0 {
            return;
        }
        let k = self.cfg.codebook_size;
        let mut entries = Vec::with_capacity(k * d);
        for _ in 0..k {
            let pick = rng.gen_range(0..n);
            for j in 0..d {
                // Tiny jitter separates duplicated picks.
                let noise = fs::<T>(rng.gen_range(-0.01..0.01));
                entries.push(features[pick * d + j] + noise);
            }
        }
        self.codebook =
            Codebook::with_primed_accumulators(Tensor::new(vec![k, d], entries), self.cfg.ema_decay);
    }

    fn check_geometry(&self, height: usize, width: usize) -> Result<()> {
        let f = self.cfg.downsample;
        if height % f != 0 || width % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} not divisible by downsample factor {f}"
            )));
        }
        Ok(())
    }

    fn images_tensor(images: &[&ImageGrid]) -> Tensor<T> {
        let h = images[0].height;
        let w = images[0].width;
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            assert_eq!(img.height, h, "mixed image sizes in one batch");
            assert_eq!(img.width, w);
            data.extend(img.data().iter().map(|&v| fs::<T>(v as f64)));
        }
        Tensor::new(vec![images.len(), 3, h, w], data)
    }

    /// Encoder graph: [B,3,H,W] -> feature rows [B*L, d] in raster order.
    fn encode_graph(&self, tape: &mut Tape<T>, p: &TapeParams, imgs: NodeId) -> NodeId {
        let mut x = imgs;
        for conv in &self.enc_convs {
            x = conv.forward(tape, p, x);
            x = tape.relu(x);
        }
        // A 1x1 im2col flattens [B,C,h',w'] into raster rows [B*L, C].
        let rows = tape.im2col(x, 1, 1, 1, 0);
        self.enc_proj.forward(tape, p, rows)
    }

    /// Decoder graph: feature rows [B*L, d] -> [B,3,H,W].
    fn decode_graph(
        &self,
        tape: &mut Tape<T>,
        p: &TapeParams,
        rows: NodeId,
        batch: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> NodeId {
        let rows = self.dec_proj.forward(tape, p, rows);
        let mut x = tape.rows_to_chw(rows, batch, grid_h, grid_w);
        x = tape.relu(x);
        for conv in &self.dec_convs {
            x = tape.upsample2x(x);
            x = conv.forward(tape, p, x);
            x = tape.relu(x);
        }
        self.dec_out.forward(tape, p, x)
    }

    /// Frozen-weight encode: one d-vector per f×f patch, raster order.
    pub fn encode_images(&self, images: &[&ImageGrid]) -> Result<Vec<T>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        self.check_geometry(images[0].height, images[0].width)?;
        let mut tape = Tape::new();
        let p = self.params.inject(&mut tape, false);
        let imgs = tape.constant(Self::images_tensor(images));
        let feats = self.encode_graph(&mut tape, &p, imgs);
        Ok(tape.value(feats).data().to_vec())
    }

    /// Encode + quantize a batch; one result per image.
    pub fn tokenize_images(&self, images: &[&ImageGrid]) -> Result<Vec<QuantizationResult>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let l = self.cfg.tokens_per_image(images[0].height, images[0].width);
        let feats = self.encode_images(images)?;
        let all = quantize(&feats, self.cfg.embed_dim, &self.codebook.entries)?;
        let mut out = Vec::with_capacity(images.len());
        for i in 0..images.len() {
            out.push(QuantizationResult {
                tokens: all.tokens[i * l..(i + 1) * l].to_vec(),
                errors: all.errors[i * l..(i + 1) * l].to_vec(),
            });
        }
        Ok(out)
    }

    /// Mean-pooled encoder features, one d-vector per image; the feature
    /// space used by the toy Fréchet metric.
    pub fn pooled_features(&self, images: &[&ImageGrid]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let l = self.cfg.tokens_per_image(images[0].height, images[0].width);
        let d = self.cfg.embed_dim;
        let feats = self.encode_images(images)?;
        let mut out = Vec::with_capacity(images.len());
        for i in 0..images.len() {
            let mut pooled = vec![0.0f64; d];
            for pos in 0..l {
                for j in 0..d {
                    pooled[j] += feats[(i * l + pos) * d + j].to_f64_c();
                }
            }
            for v in &mut pooled {
                *v /= l as f64;
            }
            out.push(pooled);
        }
        Ok(out)
    }

    /// Decodes token grids (all the same length) into clamped [0,1] images.
    pub fn decode_tokens_batch(&self, grids: &[&[TokenId]]) -> Result<Vec<ImageGrid>> {
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let l = grids[0].len();
        let side = (l as f64).sqrt() as usize;
        assert_eq!(side * side, l, "token grid length {l} is not square");
        let d = self.cfg.embed_dim;
        let k = self.codebook.len();
        let mut rows = Vec::with_capacity(grids.len() * l * d);
        for grid in grids {
            assert_eq!(grid.len(), l, "mixed grid lengths in one batch");
            for &t in grid.iter() {
                if t as usize >= k {
                    return Err(Error::TokenOutOfRange { token: t as u32, codebook: k });
                }
                rows.extend_from_slice(
                    &self.codebook.entries.data()[t as usize * d..(t as usize + 1) * d],
                );
            }
        }
        let mut tape = Tape::new();
        let p = self.params.inject(&mut tape, false);
        let rows = tape.constant(Tensor::new(vec![grids.len() * l, d], rows));
        let out = self.decode_graph(&mut tape, &p, rows, grids.len(), side, side);
        let t = tape.value(out);
        let h = t.shape()[2];
        let w = t.shape()[3];
        let plane = 3 * h * w;
        let mut images = Vec::with_capacity(grids.len());
        for i in 0..grids.len() {
            let data: Vec<f32> =
                t.data()[i * plane..(i + 1) * plane].iter().map(|v| v.to_f64_c() as f32).collect();
            let mut img = ImageGrid::from_data(h, w, data);
            img.clamp01();
            images.push(img);
        }
        Ok(images)
    }

    pub fn decode_tokens(&self, tokens: &[TokenId]) -> Result<ImageGrid> {
        Ok(self.decode_tokens_batch(&[tokens])?.remove(0))
    }

    /// Builds the training loss on the tape. Returns the loss node plus this
    /// batch's quantization (for the EMA update) and the raw feature node
    /// (whose values feed the same update).
    pub fn build_loss(
        &self,
        tape: &mut Tape<T>,
        p: &TapeParams,
        codebook_node: NodeId,
        images: &[&ImageGrid],
    ) -> Result<(NodeId, QuantizationResult, NodeId)> {
        self.check_geometry(images[0].height, images[0].width)?;
        let l = self.cfg.tokens_per_image(images[0].height, images[0].width);
        let batch = images.len();
        let grid = images[0].height / self.cfg.downsample;
        let grid_w = images[0].width / self.cfg.downsample;
        let imgs = tape.constant(Self::images_tensor(images));
        let feats = self.encode_graph(tape, p, imgs);

        let q = {
            let cb_view = tape.value(codebook_node).clone();
            quantize(tape.value(feats).data(), self.cfg.embed_dim, &cb_view)?
        };
        let ids: Vec<u32> = q.tokens.iter().map(|&t| t as u32).collect();
        let z_q = tape.embed(codebook_node, &ids);

        // Straight-through: decoder gradient flows to the encoder unchanged.
        let detour = tape.sub(z_q, feats);
        let detour = tape.stop_grad(detour);
        let z_st = tape.add(feats, detour);

        let recon = self.decode_graph(tape, p, z_st, batch, grid, grid_w);
        let recon_term = tape.l1_loss(recon, imgs);

        let n_feat = fs::<T>((batch * l) as f64);
        let sg_zq = tape.stop_grad(z_q);
        let commit = tape.sum_sq_diff(feats, sg_zq);
        let commit = tape.scale(commit, fs::<T>(self.cfg.beta) / n_feat);
        let mut loss = tape.add(recon_term, commit);

        if !self.cfg.use_ema {
            // Codebook pull toward encoder output; replaced by the EMA update
            // in the default mode.
            let sg_feats = tape.stop_grad(feats);
            let cb_term = tape.sum_sq_diff(sg_feats, z_q);
            let cb_term = tape.scale(cb_term, T::one() / n_feat);
            loss = tape.add(loss, cb_term);
        }
        Ok((loss, q, feats))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let combined = self.combined_params();
        save_params(&combined, path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut combined = self.combined_params();
        load_params(&mut combined, path)?;
        let cb_id = combined.id_of("codebook.entries").unwrap();
        self.codebook =
            Codebook::with_primed_accumulators(combined.tensor(cb_id).clone(), self.cfg.ema_decay);
        for idx in 0..self.params.len() {
            let id = crate::nn::ParamId(idx);
            let name = self.params.name(id).to_string();
            let src = combined.id_of(&name).unwrap();
            *self.params.tensor_mut(id) = combined.tensor(src).clone();
        }
        Ok(())
    }

    fn combined_params(&self) -> ParamSet<T> {
        let mut combined = ParamSet::new();
        for (name, t) in self.params.iter() {
            combined.add(name, t.clone());
        }
        combined.add("codebook.entries", self.codebook.entries.clone());
        combined
    }
}

#[derive(Clone, Debug)]
pub struct VqTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig { steps: 2500, batch: 32, lr: 2e-3 }
    }
}

/// Trains a tokenizer on the dataset's train split. Single-threaded,
/// deterministic in (dataset, config, seed). Returns the tokenizer and the
/// per-step total loss.
pub fn train_tokenizer(
    dataset: &Dataset,
    cfg: VqConfig,
    train: &VqTrainConfig,
    seed: u64,
) -> Result<(Tokenizer<f32>, Vec<f64>)> {
    let mut tok = Tokenizer::<f32>::new(cfg, seed)?;
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("dataset has no train split".into()));
    }
    let mut rng = crate::nn::rng::substream(seed, 0x76717472);

    // Warm-start the codebook from real encoder features.
    {
        let first: Vec<&ImageGrid> =
            train_idx.iter().take(train.batch.max(8)).map(|&i| &dataset.samples[i].image).collect();
        let feats = tok.encode_images(&first)?;
        tok.init_codebook_from(&feats, &mut rng);
    }

    let mut opt = AdamW::new(&tok.params, 0.9, 0.96, 0.0);
    let schedule = LrSchedule::cosine(train.lr, train.steps);
    let mut aux_cb_opt: Option<(ParamSet<f32>, AdamW<f32>)> = if !tok.cfg.use_ema {
        let mut ps = ParamSet::new();
        ps.add("codebook.entries", tok.codebook.entries.clone());
        let opt = AdamW::new(&ps, 0.9, 0.96, 0.0);
        Some((ps, opt))
    } else {
        None
    };

    let mut losses = Vec::with_capacity(train.steps as usize);
    for step in 0..train.steps {
        let batch: Vec<&ImageGrid> = (0..train.batch)
            .map(|_| &dataset.samples[*train_idx.choose(&mut rng).unwrap()].image)
            .collect();
        let mut tape = Tape::new();
        let p = tok.params.inject(&mut tape, true);
        let cb_node = match &aux_cb_opt {
            Some((ps, _)) => tape.param(ps.tensor(crate::nn::ParamId(0)).clone()),
            None => tape.constant(tok.codebook.entries.clone()),
        };
        let (loss, q, feats) = tok.build_loss(&mut tape, &p, cb_node, &batch)?;
        losses.push(tape.value(loss).item() as f64);
        tape.backward(loss);
        let grads = tok.params.collect_grads(&tape, &p);
        let lr = schedule.rate(step);
        opt.step(&mut tok.params, &grads, lr)?;

        if let Some((ps, cb_opt)) = &mut aux_cb_opt {
            let g = tape
                .grad(cb_node)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tok.codebook.entries.numel()]);
            cb_opt.step(ps, &[g], lr)?;
            let entries = ps.tensor(crate::nn::ParamId(0)).clone();
            tok.codebook = Codebook::with_primed_accumulators(entries, tok.cfg.ema_decay);
        } else {
            let feat_values = tape.value(feats).data().to_vec();
            tok.codebook.ema_update(&feat_values, &q.tokens);
        }
    }
    Ok((tok, losses))
}

/// Fills `tokens` and `errors` on every sample.
pub fn tokenize_dataset(tok: &Tokenizer<f32>, dataset: &mut Dataset) -> Result<()> {
    let chunk = 64;
    let n = dataset.samples.len();
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let images: Vec<&ImageGrid> = (at..hi).map(|i| &dataset.samples[i].image).collect();
        let results = tok.tokenize_images(&images)?;
        for (offset, q) in results.into_iter().enumerate() {
            dataset.samples[at + offset].tokens = Some(q.tokens);
            dataset.samples[at + offset].errors = Some(q.errors);
        }
        at = hi;
    }
    Ok(())
}

/// Mean round-trip PSNR of decode(quantize(encode(img))) over a set. Each
/// image's PSNR is capped at 60 dB so exact hits don't blow up the mean.
pub fn roundtrip_psnr(tok: &Tokenizer<f32>, images: &[&ImageGrid]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in images.chunks(64) {
        let qs = tok.tokenize_images(chunk)?;
        let grids: Vec<&[TokenId]> = qs.iter().map(|q| q.tokens.as_slice()).collect();
        let recons = tok.decode_tokens_batch(&grids)?;
        for (img, recon) in chunk.iter().zip(&recons) {
            total += recon.psnr(img).min(60.0);
        }
    }
    Ok(total / images.len() as f64)
}

/// Fraction of tokens recovered by quantize(encode(decode(tokens))).
pub fn token_roundtrip_fidelity(tok: &Tokenizer<f32>, grids: &[&[TokenId]]) -> Result<f64> {
    let decoded = tok.decode_tokens_batch(grids)?;
    let refs: Vec<&ImageGrid> = decoded.iter().collect();
    let requantized = tok.tokenize_images(&refs)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (orig, q) in grids.iter().zip(&requantized) {
        hits += orig.iter().zip(&q.tokens).filter(|(a, b)| a == b).count();
        total += orig.len();
    }
    Ok(hits as f64 / total.max(1) as f64)
}


// Test-only shims exposing the private graphs to integration diagnostics.
#[doc(hidden)]
impl<T: Scalar> Tokenizer<T> {
    pub fn debug_encode(&self, tape: &mut Tape<T>, p: &TapeParams, images: &[&ImageGrid]) -> NodeId {
        let imgs = tape.constant(Self::images_tensor(images));
        self.encode_graph(tape, p, imgs)
    }
    pub fn debug_decode(
        &self,
        tape: &mut Tape<T>,
        p: &TapeParams,
        rows: NodeId,
        batch: usize,
        gh: usize,
        gw: usize,
    ) -> NodeId {
        self.decode_graph(tape, p, rows, batch, gh, gw)
    }
    pub fn debug_images_tensor(images: &[&ImageGrid]) -> Tensor<T> {
        Self::images_tensor(images)
    }
}
