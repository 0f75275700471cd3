//! Patch-wise vector-quantization tokenizer for small procedural images.
//!
//! Each `patch x patch` block is flattened, projected linearly to a latent,
//! and snapped to its nearest codebook row. Decoding maps each code back to a
//! patch through a second linear map. Training minimizes reconstruction MSE
//! plus a commitment term, with straight-through gradients to the encoder and
//! an exponential-moving-average codebook.

use std::f64::consts::TAU;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::linalg::{add_bias, matmul, matmul_nt, matmul_tn_acc, sum_rows_into};

/// Pixels in `[0, 1]`, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ToyImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Tokenizer(format!("{channels} channels; expected 1 or 3")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!("{} pixel values for a {height}x{width}x{channels} image", data.len())));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Reads a binary or ASCII PGM/PPM file.
    pub fn read(path: &Path) -> Result<Self> {
        let img = ImageReader::open(path)?.with_guessed_format()?.decode()?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().channel_count() == 1 {
            let data = img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Self::new(h, w, 1, data)
        } else {
            let data = img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Self::new(h, w, 3, data)
        }
    }

    /// Writes binary PPM (3 channels) or PGM (1 channel).
    pub fn write(&self, path: &Path) -> Result<()> {
        let (subtype, color) = if self.channels == 1 {
            (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
        } else {
            (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        PnmEncoder::new(file).with_subtype(subtype).write_image(
            &self.to_bytes(),
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn mse(&self, other: &ToyImage) -> Result<f64> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::Shape("image dimensions differ".into()));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        Ok(s / self.data.len() as f64)
    }

    /// Peak signal-to-noise ratio in dB for unit-range pixels.
    pub fn psnr(&self, other: &ToyImage) -> Result<f64> {
        let mse = self.mse(other)?;
        Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
    }
}

/// A smooth, class-dependent test image: two-color oriented stripes over a
/// vertical gradient. Orientation, frequency and colors depend on the class;
/// phase and a small color jitter are random.
pub fn procedural_image<R: Rng>(
    class_id: usize,
    num_classes: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> ToyImage {
    let c = class_id as f64 / num_classes.max(1) as f64;
    let angle = c * std::f64::consts::PI + rng.random_range(-0.2..0.2);
    let freq = 1.0 + (class_id % 3) as f64 * 0.5;
    let phase = rng.random_range(0.0..TAU);
    let hue = |t: f64| {
        [0.5 + 0.4 * (TAU * t).cos(), 0.5 + 0.4 * (TAU * (t + 0.33)).cos(), 0.5 + 0.4 * (TAU * (t + 0.67)).cos()]
    };
    let a = hue(c + rng.random_range(-0.03..0.03));
    let b = hue(c + 0.5);
    let (dr, dc) = (angle.sin(), angle.cos());
    let mut data = Vec::with_capacity(height * width * 3);
    for r in 0..height {
        for col in 0..width {
            let (y, x) = (r as f64 / height as f64, col as f64 / width as f64);
            let s = 0.5 + 0.5 * (TAU * freq * (y * dr + x * dc) + phase).sin();
            let shade = 0.85 + 0.15 * y;
            for ch in 0..3 {
                data.push(((a[ch] * s + b[ch] * (1.0 - s)) * shade) as f32);
            }
        }
    }
    ToyImage { height, width, channels: 3, data }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqConfig {
    pub vocab_size: usize,
    pub latent_dim: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the commitment term.
    pub commitment: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            latent_dim: 16,
            patch_size: 4,
            channels: 3,
            epochs: 10,
            batch_size: 64,
            lr: 3e-3,
            commitment: 0.25,
            ema_decay: 0.99,
            seed: 0,
        }
    }
}

/// Encoder, codebook and decoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct VqTokenizer {
    pub vocab_size: usize,
    pub latent_dim: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// `vocab_size x latent_dim`
    pub codebook: Vec<f32>,
    /// `patch_dim x latent_dim`
    pub enc_w: Vec<f32>,
    pub enc_b: Vec<f32>,
    /// `latent_dim x patch_dim`
    pub dec_w: Vec<f32>,
    pub dec_b: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VqEpoch {
    pub loss: f64,
    pub recon_mse: f64,
    pub commitment: f64,
    pub usage: f64,
    pub reseeded: usize,
}

impl VqTokenizer {
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let (v, d, p) = (self.vocab_size, self.latent_dim, self.patch_dim());
        let ok = self.codebook.len() == v * d
            && self.enc_w.len() == p * d
            && self.enc_b.len() == d
            && self.dec_w.len() == d * p
            && self.dec_b.len() == p;
        if !ok || v == 0 || d == 0 || self.patch_size == 0 {
            return Err(Error::Tokenizer("tensor shapes do not match the declared sizes".into()));
        }
        if !self.codebook.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { stage: "codebook".into(), layer: None });
        }
        Ok(())
    }

    fn check_image(&self, img: &ToyImage) -> Result<()> {
        if img.channels != self.channels {
            return Err(Error::Tokenizer(format!(
                "image has {} channels, tokenizer expects {}",
                img.channels, self.channels
            )));
        }
        if !img.height.is_multiple_of(self.patch_size) || !img.width.is_multiple_of(self.patch_size) {
            return Err(Error::Tokenizer(format!(
                "{}x{} image not divisible by patch size {}",
                img.height, img.width, self.patch_size
            )));
        }
        Ok(())
    }

    /// Flattened patches in row-major patch order.
    pub fn patches(&self, img: &ToyImage) -> Result<Vec<f32>> {
        self.check_image(img)?;
        let ps = self.patch_size;
        let (gh, gw) = (img.height / ps, img.width / ps);
        let mut out = Vec::with_capacity(gh * gw * self.patch_dim());
        for pr in 0..gh {
            for pc in 0..gw {
                for r in 0..ps {
                    for c in 0..ps {
                        out.extend_from_slice(img.pixel(pr * ps + r, pc * ps + c));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Latents (`n x latent_dim`) for `n` flattened patches.
    pub fn encode_latents(&self, patches: &[f32]) -> Vec<f32> {
        let n = patches.len() / self.patch_dim();
        let mut z = vec![0.0; n * self.latent_dim];
        matmul(patches, &self.enc_w, &mut z, n, self.patch_dim(), self.latent_dim);
        add_bias(&mut z, &self.enc_b);
        z
    }

    /// Index of the nearest code in L2; ties go to the lower index.
    pub fn nearest(&self, z: &[f32]) -> usize {
        let d = self.latent_dim;
        let mut best = (0, f32::INFINITY);
        for (k, code) in self.codebook.chunks(d).enumerate() {
            let dist: f32 = code.iter().zip(z).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best.0
    }

    pub fn encode(&self, img: &ToyImage) -> Result<TokenGrid> {
        let patches = self.patches(img)?;
        let z = self.encode_latents(&patches);
        let ids = z.chunks(self.latent_dim).map(|zi| self.nearest(zi) as u32).collect();
        TokenGrid::new(img.height / self.patch_size, img.width / self.patch_size, self.vocab_size, ids)
    }

    /// Unclamped patch for code `k`.
    pub fn decode_code(&self, k: usize) -> Vec<f32> {
        let d = self.latent_dim;
        let mut out = self.dec_b.clone();
        matmul_acc_row(&self.codebook[k * d..(k + 1) * d], &self.dec_w, &mut out);
        out
    }

    pub fn decode(&self, grid: &TokenGrid) -> Result<ToyImage> {
        if grid.vocab_size() != self.vocab_size {
            return Err(Error::Tokenizer(format!(
                "grid vocabulary {} differs from codebook size {}",
                grid.vocab_size(),
                self.vocab_size
            )));
        }
        let ps = self.patch_size;
        let ch = self.channels;
        let (h, w) = (grid.height() * ps, grid.width() * ps);
        let mut data = vec![0.0; h * w * ch];
        let decoded: Vec<Vec<f32>> = (0..self.vocab_size).map(|k| self.decode_code(k)).collect();
        for gr in 0..grid.height() {
            for gc in 0..grid.width() {
                let patch = &decoded[grid.get(gr, gc) as usize];
                for r in 0..ps {
                    for c in 0..ps {
                        let dst = ((gr * ps + r) * w + gc * ps + c) * ch;
                        let src = (r * ps + c) * ch;
                        for k in 0..ch {
                            data[dst + k] = patch[src + k].clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        ToyImage::new(h, w, ch, data)
    }

    /// Whether every pair of codes is farther apart than `1e-6` in L2.
    pub fn codes_distinct(&self) -> bool {
        let d = self.latent_dim;
        for i in 0..self.vocab_size {
            for j in i + 1..self.vocab_size {
                let a = &self.codebook[i * d..(i + 1) * d];
                let b = &self.codebook[j * d..(j + 1) * d];
                let dist: f32 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
                if dist.sqrt() <= 1e-6 {
                    return false;
                }
            }
        }
        true
    }

    /// Rank of the decoder's `latent_dim x patch_dim` weight matrix.
    pub fn decoder_rank(&self) -> usize {
        rank(&self.dec_w, self.latent_dim, self.patch_dim(), 1e-6)
    }

    /// Mean reconstruction error of decoding the given codes against the
    /// given patches, as a mean squared error per pixel value.
    pub fn code_recon_mse(&self, ids: &[u32], patches: &[f32]) -> f64 {
        let p = self.patch_dim();
        let mut s = 0.0;
        for (k, x) in ids.iter().zip(patches.chunks(p)) {
            let y = self.decode_code(*k as usize);
            s += y.iter().zip(x).map(|(&a, &b)| ((a.clamp(0.0, 1.0) - b) as f64).powi(2)).sum::<f64>();
        }
        s / patches.len().max(1) as f64
    }
}

fn matmul_acc_row(x: &[f32], w: &[f32], out: &mut [f32]) {
    let n = out.len();
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += xi * wv;
        }
    }
}

fn rank(m: &[f32], rows: usize, cols: usize, tol: f64) -> usize {
    let mut a: Vec<f64> = m.iter().map(|&v| v as f64).collect();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let piv = (r..rows).max_by(|&i, &j| a[i * cols + c].abs().total_cmp(&a[j * cols + c].abs())).unwrap();
        if a[piv * cols + c].abs() <= tol * scale {
            continue;
        }
        for k in 0..cols {
            a.swap(r * cols + k, piv * cols + k);
        }
        for i in r + 1..rows {
            let f = a[i * cols + c] / a[r * cols + c];
            for k in c..cols {
                a[i * cols + k] -= f * a[r * cols + k];
            }
        }
        r += 1;
    }
    r
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, p: &mut [f32], g: &[f32], lr: f64, t: i32) {
        let (b1, b2) = (0.9f32, 0.999f32);
        let c1 = 1.0 - 0.9f64.powi(t);
        let c2 = 1.0 - 0.999f64.powi(t);
        let step = (lr / c1) as f32;
        let inv_c2 = (1.0 / c2) as f32;
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= step * self.m[i] / ((self.v[i] * inv_c2).sqrt() + 1e-8);
        }
    }
}

/// Trainer state kept across epochs so fine-tuning can resume.
pub struct VqTrainer {
    pub tok: VqTokenizer,
    pub cfg: VqConfig,
    rng: ChaCha8Rng,
    ema_count: Vec<f32>,
    ema_sum: Vec<f32>,
    opt_enc_w: Adam,
    opt_enc_b: Adam,
    opt_dec_w: Adam,
    opt_dec_b: Adam,
    t: i32,
}

impl VqTrainer {
    /// Random encoder/decoder; codebook seeded from encoder outputs of
    /// randomly chosen training patches.
    pub fn new(cfg: VqConfig, patches: &[f32]) -> Result<Self> {
        let p = cfg.patch_size * cfg.patch_size * cfg.channels;
        if cfg.vocab_size == 0 || cfg.latent_dim == 0 || cfg.patch_size == 0 || cfg.batch_size == 0 {
            return Err(Error::Config("tokenizer sizes must be positive".into()));
        }
        if patches.is_empty() || !patches.len().is_multiple_of(p) {
            return Err(Error::Tokenizer("no training patches".into()));
        }
        let d = cfg.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let nrm = |s: f64| Normal::new(0.0, s).unwrap();
        let enc_w: Vec<f32> = (0..p * d).map(|_| nrm(1.0 / (p as f64).sqrt()).sample(&mut rng) as f32).collect();
        let dec_w: Vec<f32> = (0..d * p).map(|_| nrm(1.0 / (d as f64).sqrt()).sample(&mut rng) as f32).collect();
        let mut tok = VqTokenizer {
            vocab_size: cfg.vocab_size,
            latent_dim: d,
            patch_size: cfg.patch_size,
            channels: cfg.channels,
            codebook: vec![0.0; cfg.vocab_size * d],
            enc_w,
            enc_b: vec![0.0; d],
            dec_w,
            dec_b: vec![0.5; p],
        };
        let z = tok.encode_latents(patches);
        let n = z.len() / d;
        let jitter = nrm(1e-3);
        for k in 0..cfg.vocab_size {
            let i = rng.random_range(0..n);
            for j in 0..d {
                tok.codebook[k * d + j] = z[i * d + j] + jitter.sample(&mut rng) as f32;
            }
        }
        Ok(Self {
            ema_count: vec![1.0; cfg.vocab_size],
            ema_sum: tok.codebook.clone(),
            opt_enc_w: Adam::new(p * d),
            opt_enc_b: Adam::new(d),
            opt_dec_w: Adam::new(d * p),
            opt_dec_b: Adam::new(p),
            tok,
            cfg,
            rng,
            t: 0,
        })
    }

    /// One pass over `patches`. `codes`, when given, fixes the code of each
    /// patch and freezes encoder and codebook, so only the decoder learns.
    pub fn epoch(&mut self, patches: &[f32], codes: Option<&[u32]>) -> Result<VqEpoch> {
        let tok = &mut self.tok;
        let (d, p, v) = (tok.latent_dim, tok.patch_dim(), tok.vocab_size);
        let n = patches.len() / p;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut used = vec![0usize; v];
        let mut tot = VqEpoch::default();
        let beta = self.cfg.commitment as f32;
        let gamma = self.cfg.ema_decay as f32;
        for chunk in order.chunks(self.cfg.batch_size) {
            let b = chunk.len();
            let x: Vec<f32> = chunk.iter().flat_map(|&i| patches[i * p..(i + 1) * p].iter().copied()).collect();
            let z = tok.encode_latents(&x);
            let ks: Vec<usize> = match codes {
                Some(c) => chunk.iter().map(|&i| c[i] as usize).collect(),
                None => z.chunks(d).map(|zi| tok.nearest(zi)).collect(),
            };
            let zq: Vec<f32> = ks.iter().flat_map(|&k| tok.codebook[k * d..(k + 1) * d].iter().copied()).collect();
            let mut y = vec![0.0; b * p];
            matmul(&zq, &tok.dec_w, &mut y, b, d, p);
            add_bias(&mut y, &tok.dec_b);

            let mut recon = 0.0f64;
            let mut commit = 0.0f64;
            let mut dy = vec![0.0f32; b * p];
            let inv = 1.0 / (b * p) as f32;
            for i in 0..b * p {
                let e = y[i] - x[i];
                recon += (e * e) as f64;
                dy[i] = 2.0 * e * inv;
            }
            let mut dz = vec![0.0f32; b * d];
            let cinv = 1.0 / (b * d) as f32;
            for i in 0..b * d {
                let e = z[i] - zq[i];
                commit += (e * e) as f64;
                dz[i] = 2.0 * beta * e * cinv;
            }
            let mut g_dec_w = vec![0.0; d * p];
            let mut g_dec_b = vec![0.0; p];
            matmul_tn_acc(&zq, &dy, &mut g_dec_w, d, b, p);
            sum_rows_into(&dy, &mut g_dec_b);
            self.t += 1;
            let lr = self.cfg.lr;
            self.opt_dec_w.step(&mut tok.dec_w, &g_dec_w, lr, self.t);
            self.opt_dec_b.step(&mut tok.dec_b, &g_dec_b, lr, self.t);
            tot.recon_mse += recon;
            tot.commitment += commit;
            for &k in &ks {
                used[k] += 1;
            }
            if codes.is_some() {
                continue;
            }

            // straight-through: the reconstruction gradient at zq flows to z
            let mut dzq = vec![0.0; b * d];
            matmul_nt(&dy, &tok.dec_w, &mut dzq, b, p, d, false);
            dz.iter_mut().zip(&dzq).for_each(|(a, &g)| *a += g);
            let mut g_enc_w = vec![0.0; p * d];
            let mut g_enc_b = vec![0.0; d];
            matmul_tn_acc(&x, &dz, &mut g_enc_w, p, b, d);
            sum_rows_into(&dz, &mut g_enc_b);
            self.opt_enc_w.step(&mut tok.enc_w, &g_enc_w, lr, self.t);
            self.opt_enc_b.step(&mut tok.enc_b, &g_enc_b, lr, self.t);

            let mut cnt = vec![0.0f32; v];
            let mut sum = vec![0.0f32; v * d];
            for (i, &k) in ks.iter().enumerate() {
                cnt[k] += 1.0;
                for j in 0..d {
                    sum[k * d + j] += z[i * d + j];
                }
            }
            for k in 0..v {
                self.ema_count[k] = gamma * self.ema_count[k] + (1.0 - gamma) * cnt[k];
                for j in 0..d {
                    let s = &mut self.ema_sum[k * d + j];
                    *s = gamma * *s + (1.0 - gamma) * sum[k * d + j];
                }
            }
            let total: f32 = self.ema_count.iter().sum();
            for k in 0..v {
                // Laplace smoothing keeps rarely used codes finite
                let c = (self.ema_count[k] + 1e-5) / (total + v as f32 * 1e-5) * total;
                for j in 0..d {
                    tok.codebook[k * d + j] = self.ema_sum[k * d + j] / c;
                }
            }
        }
        let live = used.iter().filter(|&&u| u > 0).count();
        if live == 0 {
            return Err(Error::Tokenizer("every code is dead".into()));
        }
        tot.recon_mse /= (n * p) as f64;
        tot.commitment /= (n * d) as f64;
        tot.loss = tot.recon_mse + self.cfg.commitment * tot.commitment;
        tot.usage = live as f64 / v as f64;
        if codes.is_none() {
            let z = tok.encode_latents(patches);
            let nrm = Normal::new(0.0, 1e-3).unwrap();
            for k in (0..v).filter(|&k| used[k] == 0) {
                let i = self.rng.random_range(0..n);
                for j in 0..d {
                    tok.codebook[k * d + j] = z[i * d + j] + nrm.sample(&mut self.rng) as f32;
                }
                self.ema_count[k] = 1.0;
                self.ema_sum[k * d..(k + 1) * d].copy_from_slice(&tok.codebook[k * d..(k + 1) * d]);
                tot.reseeded += 1;
            }
        }
        if !tok.codebook.iter().chain(&tok.dec_w).chain(&tok.enc_w).all(|x| x.is_finite()) {
            return Err(Error::NonFinite { stage: "tokenizer training".into(), layer: None });
        }
        Ok(tot)
    }
}

/// Trains a tokenizer on `images` and returns it with per-epoch metrics.
pub fn vq_train(images: &[ToyImage], cfg: &VqConfig) -> Result<(VqTokenizer, Vec<VqEpoch>)> {
    if images.is_empty() {
        return Err(Error::Tokenizer("no training images".into()));
    }
    let probe = VqTokenizer {
        vocab_size: cfg.vocab_size,
        latent_dim: cfg.latent_dim,
        patch_size: cfg.patch_size,
        channels: cfg.channels,
        codebook: Vec::new(),
        enc_w: Vec::new(),
        enc_b: Vec::new(),
        dec_w: Vec::new(),
        dec_b: Vec::new(),
    };
    let mut patches = Vec::new();
    for img in images {
        patches.extend(probe.patches(img)?);
    }
    let mut trainer = VqTrainer::new(cfg.clone(), &patches)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        metrics.push(trainer.epoch(&patches, None)?);
    }
    Ok((trainer.tok, metrics))
}

pub fn vq_encode(img: &ToyImage, tok: &VqTokenizer) -> Result<TokenGrid> {
    tok.encode(img)
}

pub fn vq_decode(grid: &TokenGrid, tok: &VqTokenizer) -> Result<ToyImage> {
    tok.decode(grid)
}
