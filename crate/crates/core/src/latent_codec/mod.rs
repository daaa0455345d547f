//! Variational tile codec: compresses `a×a×3` entity tiles into `l×l×c`
//! latents (`l = a/f`) and reconstructs them.

mod latent_graph;

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::entity_graph::EntityGraph;
use crate::error::{Error, Result};
use crate::nn::{Bound, ConvSpec, ParamId, ParamStore, Tape, Tensor, Var};

pub use latent_graph::{LatentGraph, LATENT_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Tile side `a`.
    pub tile: usize,
    /// Downsampling factor `f`.
    pub factor: usize,
    /// Latent channels `c`.
    pub latent_channels: usize,
    /// KL weight `λ`.
    pub kl_weight: f64,
    /// Feature channels of the hidden convolutions.
    pub hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            tile: 64,
            factor: 2,
            latent_channels: 4,
            kl_weight: 1e-4,
            hidden: 32,
        }
    }
}

impl CodecConfig {
    pub fn latent_side(&self) -> usize {
        self.tile / self.factor
    }

    /// Flattened latent width `l·l·c`.
    pub fn latent_dim(&self) -> usize {
        self.latent_side() * self.latent_side() * self.latent_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.factor == 0 || !self.tile.is_multiple_of(self.factor) {
            return Err(Error::InvalidParameter(format!(
                "factor {} must divide tile side {}",
                self.factor, self.tile
            )));
        }
        if self.latent_channels == 0 || self.hidden == 0 {
            return Err(Error::InvalidParameter("latent and hidden channels must be positive".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::InvalidParameter("KL weight must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

/// A latent code in `l×l×c` (row, column, channel) order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEntity {
    pub side: usize,
    pub channels: usize,
    pub z: Vec<f64>,
    pub mu: Option<Vec<f64>>,
    pub logvar: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
}

/// `L_rec + λ·D_KL` with `L_rec` the per-pixel MSE and `D_KL` the Gaussian
/// KL to the standard normal, summed over latent elements and averaged over
/// `n_entities`.
pub fn vae_loss(
    x: &[f64],
    x_hat: &[f64],
    mu: &[f64],
    logvar: &[f64],
    n_entities: usize,
    kl_weight: f64,
) -> Result<VaeLoss> {
    if x.len() != x_hat.len() || mu.len() != logvar.len() {
        return Err(Error::Shape("vae_loss operands differ in length".into()));
    }
    if n_entities == 0 || x.is_empty() {
        return Err(Error::InvalidInput("vae_loss needs at least one entity".into()));
    }
    if [x, x_hat, mu, logvar].iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("vae_loss input contains NaN or infinity".into()));
    }
    let rec = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    let kl = 0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
            .sum::<f64>()
        / n_entities as f64;
    Ok(VaeLoss {
        total: rec + kl_weight * kl,
        rec,
        kl,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    stride: usize,
    pad: usize,
    upsample: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let w = store.normal(format!("{name}.weight"), &[cout, cin, kernel, kernel], gain / fan_in.sqrt(), rng);
        let b = store.zeros(format!("{name}.bias"), &[cout]);
        Self {
            w,
            b,
            kernel,
            stride,
            pad,
            upsample: 1,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let x = if self.upsample > 1 { tape.upsample(x, self.upsample) } else { x };
        tape.conv2d(
            x,
            p[self.w],
            p[self.b],
            ConvSpec {
                stride: self.stride,
                pad: self.pad,
            },
        )
    }
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while n > 1 {
        while n.is_multiple_of(p) {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    out
}

/// Strided convolutional VAE reaching exactly the configured downsampling
/// factor (one patchifying convolution per prime factor).
#[derive(Debug, Clone)]
pub struct Codec {
    config: CodecConfig,
    params: ParamStore,
    encoder: Vec<ConvLayer>,
    encoder_head: ConvLayer,
    decoder: Vec<ConvLayer>,
    decoder_head: ConvLayer,
}

#[derive(Serialize, Deserialize)]
struct CodecCheckpoint {
    kind: String,
    config: CodecConfig,
    params: ParamStore,
}

/// Per-batch output of [`Codec::forward_batch`].
pub struct CodecForward {
    pub total: Var,
    pub rec: Var,
    pub kl: Var,
    pub mu: Var,
    pub logvar: Var,
    pub reconstruction: Var,
}

fn hwc_to_chw(src: &[f64], side: usize, ch: usize, dst: &mut [f64]) {
    for y in 0..side {
        for x in 0..side {
            for c in 0..ch {
                dst[(c * side + y) * side + x] = src[(y * side + x) * ch + c];
            }
        }
    }
}

fn chw_to_hwc(src: &[f64], side: usize, ch: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for c in 0..ch {
        for y in 0..side {
            for x in 0..side {
                out[(y * side + x) * ch + c] = src[(c * side + y) * side + x];
            }
        }
    }
    out
}

/// `u8` RGB tile to `[0, 1]` values in the same layout.
pub fn normalize_tile(tile: &[u8]) -> Vec<f64> {
    tile.iter().map(|&v| v as f64 / 255.0).collect()
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let c = config.latent_channels;
        let factors = prime_factors(config.factor);
        let gain = 2f64.sqrt();
        let mut encoder = vec![ConvLayer::new(&mut params, "enc.in", 3, h, 3, 1, 1, gain, &mut rng)];
        for (i, &p) in factors.iter().enumerate() {
            encoder.push(ConvLayer::new(&mut params, &format!("enc.down{i}"), h, h, p, p, 0, gain, &mut rng));
        }
        let encoder_head = ConvLayer::new(&mut params, "enc.out", h, 2 * c, 3, 1, 1, 0.5, &mut rng);
        let mut decoder = vec![ConvLayer::new(&mut params, "dec.in", c, h, 3, 1, 1, gain, &mut rng)];
        for (i, &p) in factors.iter().rev().enumerate() {
            let mut layer = ConvLayer::new(&mut params, &format!("dec.up{i}"), h, h, 3, 1, 1, gain, &mut rng);
            layer.upsample = p;
            decoder.push(layer);
        }
        let decoder_head = ConvLayer::new(&mut params, "dec.out", h, 3, 3, 1, 1, 1.0, &mut rng);
        Ok(Self {
            config,
            params,
            encoder,
            encoder_head,
            decoder,
            decoder_head,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_tile_len(&self, len: usize) -> Result<()> {
        let a = self.config.tile;
        if len != a * a * 3 {
            return Err(Error::Shape(format!("expected a {a}x{a}x3 tile ({} values), got {len}", a * a * 3)));
        }
        Ok(())
    }

    /// Stacks HWC tiles in `[0, 1]` into a `[B, 3, a, a]` tensor.
    pub fn batch_tensor(&self, tiles: &[&[f64]]) -> Result<Tensor> {
        let a = self.config.tile;
        let mut t = Tensor::zeros(&[tiles.len(), 3, a, a]);
        for (i, tile) in tiles.iter().enumerate() {
            self.check_tile_len(tile.len())?;
            hwc_to_chw(tile, a, 3, &mut t.data[i * 3 * a * a..(i + 1) * 3 * a * a]);
        }
        Ok(t)
    }

    /// Returns `(μ, log σ²)`, each `[B, c, l, l]`.
    pub fn encoder_forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> (Var, Var) {
        let mut h = x;
        for layer in &self.encoder {
            h = layer.forward(tape, p, h);
            h = tape.gelu(h);
        }
        let out = self.encoder_head.forward(tape, p, h);
        let c = self.config.latent_channels;
        (tape.slice_channels(out, 0, c), tape.slice_channels(out, c, c))
    }

    /// `[B, c, l, l]` latents to `[B, 3, a, a]` reconstructions in `(0, 1)`.
    pub fn decoder_forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Var {
        let mut h = z;
        for layer in &self.decoder {
            h = layer.forward(tape, p, h);
            h = tape.gelu(h);
        }
        let out = self.decoder_head.forward(tape, p, h);
        tape.sigmoid(out)
    }

    /// Stochastic encode, decode, and `L_VAE` for a batch of tiles.
    pub fn forward_batch(&self, tape: &mut Tape, p: &Bound, tiles: &[&[f64]], rng: &mut impl Rng) -> Result<CodecForward> {
        let x = tape.constant(self.batch_tensor(tiles)?);
        let (mu, logvar) = self.encoder_forward(tape, p, x);
        let shape = tape.shape(mu).to_vec();
        let n: usize = shape.iter().product();
        let eps = Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())?;
        let eps = tape.constant(eps);
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let noise = tape.mul(std, eps);
        let z = tape.add(mu, noise);
        let recon = self.decoder_forward(tape, p, z);
        let rec = tape.mse(recon, x);
        let kl = tape.kl(mu, logvar, tiles.len());
        let weighted = tape.scale(kl, self.config.kl_weight);
        let total = tape.add(rec, weighted);
        Ok(CodecForward {
            total,
            rec,
            kl,
            mu,
            logvar,
            reconstruction: recon,
        })
    }

    /// Encodes one HWC tile in `[0, 1]`. The deterministic path returns
    /// `z = μ`; the stochastic path samples `z = μ + σ·ε`.
    pub fn encode_entity(&self, tile: &[f64], stochastic: bool, rng: &mut impl Rng) -> Result<LatentEntity> {
        self.check_tile_len(tile.len())?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(self.batch_tensor(&[tile])?);
        let (mu, logvar) = self.encoder_forward(&mut tape, &p, x);
        let (l, c) = (self.config.latent_side(), self.config.latent_channels);
        let mu = chw_to_hwc(&tape.value(mu).data, l, c);
        let logvar = chw_to_hwc(&tape.value(logvar).data, l, c);
        let z = if stochastic {
            mu.iter()
                .zip(&logvar)
                .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
                .collect()
        } else {
            mu.clone()
        };
        Ok(LatentEntity {
            side: l,
            channels: c,
            z,
            mu: Some(mu),
            logvar: Some(logvar),
        })
    }

    /// Decodes a latent into an HWC `a×a×3` tile estimate in `[0, 1]`.
    pub fn decode_latent(&self, z: &LatentEntity) -> Result<Vec<f64>> {
        let (l, c) = (self.config.latent_side(), self.config.latent_channels);
        if z.side != l || z.channels != c || z.z.len() != l * l * c {
            return Err(Error::Shape(format!(
                "latent {}x{}x{} does not match codec {l}x{l}x{c}",
                z.side, z.side, z.channels
            )));
        }
        let mut chw = vec![0.0; z.z.len()];
        hwc_to_chw(&z.z, l, c, &mut chw);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let zv = tape.constant(Tensor::new(vec![1, c, l, l], chw)?);
        let out = self.decoder_forward(&mut tape, &p, zv);
        Ok(chw_to_hwc(&tape.value(out).data, self.config.tile, 3))
    }

    /// Mean-path latents (HWC-flattened) for a batch of `u8` tiles.
    pub fn encode_tiles(&self, tiles: &[&[u8]]) -> Result<Vec<Vec<f64>>> {
        let (l, c) = (self.config.latent_side(), self.config.latent_channels);
        let mut out = Vec::with_capacity(tiles.len());
        for chunk in tiles.chunks(64) {
            let norm: Vec<Vec<f64>> = chunk.iter().map(|t| normalize_tile(t)).collect();
            let refs: Vec<&[f64]> = norm.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let x = tape.constant(self.batch_tensor(&refs)?);
            let (mu, _) = self.encoder_forward(&mut tape, &p, x);
            let d = l * l * c;
            for row in tape.value(mu).data.chunks(d) {
                out.push(chw_to_hwc(row, l, c));
            }
        }
        Ok(out)
    }

    /// Encodes every vertex and edge tile with the deterministic path.
    pub fn encode_graph(&self, g: &EntityGraph) -> Result<LatentGraph> {
        if g.tile != self.config.tile {
            return Err(Error::Shape(format!(
                "graph tile side {} does not match codec tile side {}",
                g.tile, self.config.tile
            )));
        }
        let vt: Vec<&[u8]> = (0..g.num_vertices()).map(|i| g.vertex_tile(i)).collect();
        let et: Vec<&[u8]> = (0..g.num_edges()).map(|i| g.edge_tile(i)).collect();
        let flat = |rows: Vec<Vec<f64>>| rows.into_iter().flatten().map(|v| v as f32).collect::<Vec<f32>>();
        Ok(LatentGraph {
            side: self.config.latent_side(),
            channels: self.config.latent_channels,
            vertex_latents: flat(self.encode_tiles(&vt)?),
            edge_latents: flat(self.encode_tiles(&et)?),
            edge_index: g.edge_index.clone(),
            degrees: g.degrees.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ck = CodecCheckpoint {
            kind: "codec".into(),
            config: self.config,
            params: self.params.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: CodecCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.kind != "codec" {
            return Err(Error::Format(format!("expected a codec checkpoint, found {}", ck.kind)));
        }
        let mut codec = Self::new(ck.config, 0)?;
        codec.params.load_from(&ck.params)?;
        Ok(codec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(tile: usize, factor: usize, c: usize) -> Codec {
        Codec::new(
            CodecConfig {
                tile,
                factor,
                latent_channels: c,
                hidden: 4,
                ..CodecConfig::default()
            },
            7,
        )
        .unwrap()
    }

    fn tile(a: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..a * a * 3).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn deterministic_path_is_repeatable() {
        let codec = small(8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = tile(8, 1);
        let a = codec.encode_entity(&t, false, &mut rng).unwrap();
        let b = codec.encode_entity(&t, false, &mut rng).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(Some(&a.z), a.mu.as_ref());
        let s = codec.encode_entity(&t, true, &mut rng).unwrap();
        assert_ne!(s.z, a.z);
    }

    #[test]
    fn default_configuration_shapes() {
        let codec = Codec::new(
            CodecConfig {
                hidden: 2,
                ..CodecConfig::default()
            },
            0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = codec.encode_entity(&tile(64, 2), false, &mut rng).unwrap();
        assert_eq!((z.side, z.channels, z.z.len()), (32, 4, 32 * 32 * 4));
        assert!(z.z.iter().all(|v| v.is_finite()));
        let x = codec.decode_latent(&z).unwrap();
        assert_eq!(x.len(), 64 * 64 * 3);
    }

    #[test]
    fn shape_contract_for_every_divisor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (a, f) in [(6, 1), (6, 2), (6, 3), (6, 6), (12, 4), (10, 5)] {
            let codec = small(a, f, 3);
            let z = codec.encode_entity(&tile(a, 4), true, &mut rng).unwrap();
            assert_eq!(z.side, a / f);
            assert_eq!(z.z.len(), (a / f) * (a / f) * 3);
            let x = codec.decode_latent(&z).unwrap();
            assert_eq!(x.len(), a * a * 3);
        }
    }

    #[test]
    fn decoded_values_are_bounded() {
        let codec = small(8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let z = LatentEntity {
                side: 4,
                channels: 2,
                z: (0..32).map(|_| 10.0 * rng.sample::<f64, _>(StandardNormal)).collect(),
                mu: None,
                logvar: None,
            };
            let x = codec.decode_latent(&z).unwrap();
            assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn shape_errors() {
        let codec = small(8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(codec.encode_entity(&[0.0; 10], false, &mut rng), Err(Error::Shape(_))));
        let bad = LatentEntity {
            side: 3,
            channels: 2,
            z: vec![0.0; 18],
            mu: None,
            logvar: None,
        };
        assert!(matches!(codec.decode_latent(&bad), Err(Error::Shape(_))));
        assert!(CodecConfig { tile: 8, factor: 3, ..CodecConfig::default() }.validate().is_err());
    }

    #[test]
    fn vae_loss_worked_cases() {
        let zero = vae_loss(&[0.3, 0.7], &[0.3, 0.7], &[0.0], &[0.0], 1, 1.0).unwrap();
        assert_eq!(zero.total, 0.0);
        let kl = vae_loss(&[0.0], &[0.0], &[1.0], &[0.0], 1, 1.0).unwrap();
        assert!((kl.kl - 0.5).abs() < 1e-15);
        let rec = vae_loss(&[0.0; 4], &[1.0; 4], &[0.0], &[0.0], 1, 0.5).unwrap();
        assert_eq!(rec.rec, 1.0);
        assert!(matches!(vae_loss(&[f64::NAN], &[0.0], &[0.0], &[0.0], 1, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn kl_is_zero_only_at_standard_normal() {
        let at = |m: f64, lv: f64| vae_loss(&[0.0], &[0.0], &[m, 0.0], &[lv, 0.0], 1, 1.0).unwrap().kl;
        assert_eq!(at(0.0, 0.0), 0.0);
        for (m, lv) in [(1e-3, 0.0), (0.0, 1e-3), (0.0, -0.5), (-2.0, 1.0)] {
            assert!(at(m, lv) > 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let codec = small(8, 2, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.json");
        codec.save(&path).unwrap();
        let back = Codec::load(&path).unwrap();
        assert_eq!(back.params(), codec.params());
        assert_eq!(back.config(), codec.config());
    }
}
