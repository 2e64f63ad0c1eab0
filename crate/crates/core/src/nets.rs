//! Backbone, consistency student and feature discriminator.
//!
//! The backbone is a small transformer over frame tokens. Each clip frame
//! (and each conditioning frame) is flattened and encoded to one token; the
//! token sequence is `[reference, past frames, clip frames]`. Every block
//! runs audio cross-attention (clip frame `f` attends only to its own audio
//! window), temporal self-attention across all tokens, and an MLP.
//!
//! The same architecture serves the frozen teacher, which predicts noise,
//! and the student, whose raw output is read as a clean-clip estimate and
//! blended with the input through the consistency skip/output scalings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Array, Graph, ParamStore, Prng, Var};
use crate::schedule::CmCoeffs;
use crate::solver::{DataModel, EpsModel};
use crate::synthdata::{DataConfig, TrainingTuple, AUDIO_DIM, CHANNELS};

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Token width.
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    /// Size of the sinusoidal timestep embedding.
    pub time_dim: usize,
    pub mlp_ratio: usize,
    /// Hidden channels of each discriminator head.
    pub disc_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 2,
            depth: 2,
            time_dim: 32,
            mlp_ratio: 2,
            disc_channels: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: &str| Error::Config {
            path: format!("model.{path}"),
            message: message.to_string(),
        };
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(fail("heads", "width must be a positive multiple of heads"));
        }
        if self.depth == 0 {
            return Err(fail("depth", "need at least one block"));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(fail("time_dim", "must be even and at least 2"));
        }
        if self.mlp_ratio == 0 || self.disc_channels == 0 {
            return Err(fail("mlp_ratio", "must be positive"));
        }
        Ok(())
    }
}

/// Clip geometry the networks are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub past: usize,
    pub window: usize,
}

impl Geometry {
    pub fn from_data(cfg: &DataConfig) -> Self {
        Self {
            channels: CHANNELS,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            past: cfg.past_frames,
            window: cfg.window(),
        }
    }

    pub fn frame_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    /// Conditioning tokens ahead of the clip frames.
    fn context(&self) -> usize {
        1 + self.past
    }

    fn tokens(&self) -> usize {
        self.context() + self.frames
    }
}

/// Conditioning inputs for one clip. The null flags swap the reference or
/// the audio for learned placeholders; past frames are always used.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// `(F, 2m + 1, 4)`.
    pub audio: Array,
    /// `(c, h, w)`.
    pub reference: Array,
    /// `(c, P, h, w)`.
    pub past: Array,
    pub null_audio: bool,
    pub null_reference: bool,
}

impl Conditioning {
    pub fn new(audio: Array, reference: Array, past: Array) -> Self {
        Self {
            audio,
            reference,
            past,
            null_audio: false,
            null_reference: false,
        }
    }

    pub fn from_tuple(t: &TrainingTuple) -> Self {
        Self::new(t.audio.clone(), t.reference.clone(), t.past.clone())
    }

    /// Same past frames with audio and reference nulled.
    pub fn unconditional(&self) -> Self {
        Self {
            null_audio: true,
            null_reference: true,
            ..self.clone()
        }
    }

    /// Replace the past frames with the last `P` frames of `clip`.
    pub fn with_past_from(&self, clip: &Array) -> Result<Self> {
        let p = self.past.shape()[1];
        let f = clip.shape()[1];
        if f < p {
            return Err(Error::invalid(format!(
                "clip of {f} frames cannot supply {p} past frames"
            )));
        }
        Ok(Self {
            past: clip.slice_axis(1, f - p, p)?,
            ..self.clone()
        })
    }

    fn check(&self, geo: &Geometry) -> Result<()> {
        let expect_audio = [geo.frames, geo.window, AUDIO_DIM];
        let expect_ref = [geo.channels, geo.height, geo.width];
        let expect_past = [geo.channels, geo.past, geo.height, geo.width];
        if self.audio.shape() != expect_audio {
            return Err(Error::shape(
                "conditioning audio",
                self.audio.shape(),
                &expect_audio,
            ));
        }
        if self.reference.shape() != expect_ref {
            return Err(Error::shape(
                "conditioning reference",
                self.reference.shape(),
                &expect_ref,
            ));
        }
        if self.past.shape() != expect_past {
            return Err(Error::shape(
                "conditioning past",
                self.past.shape(),
                &expect_past,
            ));
        }
        Ok(())
    }
}

/// Parameters of one network registered on a graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Register every entry of `store`; `trainable` selects which ones
    /// receive gradients.
    pub fn new<'a>(
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = store
            .iter()
            .map(|(name, a)| (name.clone(), g.param(name, a, trainable(name))))
            .collect();
        Self { vars }
    }

    /// Register the entries of `store` whose names start with `prefix`,
    /// looked up by the name without the prefix.
    pub fn subset<'a>(
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        prefix: &str,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = store
            .iter()
            .filter_map(|(name, a)| {
                let short = name.strip_prefix(prefix)?;
                Some((short.to_string(), g.param(name, a, trainable(short))))
            })
            .collect();
        Self { vars }
    }

    pub fn all<'a>(g: &mut Graph<'a>, store: &'a ParamStore) -> Self {
        Self::new(g, store, |_| true)
    }

    pub fn frozen<'a>(g: &mut Graph<'a>, store: &'a ParamStore) -> Self {
        Self::new(g, store, |_| false)
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }
}

/// Parameters of the temporal and audio attention layers.
pub fn is_attention_param(name: &str) -> bool {
    name.contains(".audio.") || name.contains(".self.")
}

/// Backbone output and the intermediate frame features read by the
/// discriminator.
pub struct BackboneOut {
    pub output: Var,
    /// `[F, width]` frame tokens after the first block's temporal attention
    /// and after the last block.
    pub taps: Vec<Var>,
}

fn linear(g: &mut Graph<'_>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Multi-head attention over column slices of already-projected inputs.
fn attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let d = g.value(q).shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let s = g.matmul_nt(qh, kh)?;
        let mut s = g.scale(s, scale)?;
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let a = g.softmax(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    if heads == 1 {
        return Ok(outs[0]);
    }
    g.concat(&outs, 1)
}

/// `(c, n, h, w)` to `[n, c h w]`.
fn frames_to_rows(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let s = g.value(x).shape().to_vec();
    let p = g.permute(x, &[1, 0, 2, 3])?;
    g.reshape(p, &[s[1], s[0] * s[2] * s[3]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub geo: Geometry,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, geo: Geometry) -> Result<Self> {
        cfg.validate()?;
        if geo.frames < 3 {
            return Err(Error::invalid(
                "the discriminator needs clips of at least 3 frames",
            ));
        }
        Ok(Self { cfg, geo })
    }

    pub fn init(&self, rng: &mut Prng) -> ParamStore {
        let (d, td, din, w) = (
            self.cfg.width,
            self.cfg.time_dim,
            self.geo.frame_size(),
            self.geo.window,
        );
        let hidden = d * self.cfg.mlp_ratio;
        let mut p = ParamStore::new();
        let mut dense =
            |p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64| {
                let std = gain / (fan_in as f64).sqrt();
                p.insert(
                    format!("{name}.w"),
                    rng.normal_array(&[fan_in, fan_out]).scale(std),
                );
                p.insert(format!("{name}.b"), Array::zeros(&[fan_out]));
            };
        dense(&mut p, "enc", din, d, 1.0);
        dense(&mut p, "time", td, d, 1.0);
        dense(&mut p, "dec", d, din, 0.2);
        for l in 0..self.cfg.depth {
            let b = format!("blocks.{l}");
            dense(&mut p, &format!("{b}.audio.q"), d, d, 1.0);
            dense(&mut p, &format!("{b}.audio.k"), AUDIO_DIM, d, 1.0);
            dense(&mut p, &format!("{b}.audio.v"), AUDIO_DIM, d, 1.0);
            dense(&mut p, &format!("{b}.audio.o"), d, d, 0.5);
            dense(&mut p, &format!("{b}.self.q"), d, d, 1.0);
            dense(&mut p, &format!("{b}.self.k"), d, d, 1.0);
            dense(&mut p, &format!("{b}.self.v"), d, d, 1.0);
            dense(&mut p, &format!("{b}.self.o"), d, d, 0.5);
            dense(&mut p, &format!("{b}.mlp.up"), d, hidden, 1.0);
            dense(&mut p, &format!("{b}.mlp.down"), hidden, d, 0.5);
        }
        for l in 0..self.cfg.depth {
            p.insert(
                format!("blocks.{l}.audio.slot"),
                rng.normal_array(&[w, d]).scale(0.1),
            );
        }
        p.insert("pos", rng.normal_array(&[self.geo.tokens(), d]).scale(0.1));
        p.insert("null.reference", rng.normal_array(&[1, d]).scale(0.1));
        p.insert("null.audio", rng.normal_array(&[1, AUDIO_DIM]).scale(0.1));
        p.insert("gate.w", Array::zeros(&[td, din]));
        p.insert("gate.b", Array::zeros(&[din]));
        p
    }

    /// Zero the input skip gate, leaving only the decoder path.
    pub fn zero_gate(&self, p: &mut ParamStore) {
        for name in ["gate.w", "gate.b"] {
            if let Some(a) = p.get_mut(name) {
                a.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// One-hot `[F (2m+1), 2m+1]` map from audio tokens to window slots.
    fn slot_tiling(&self) -> Array {
        let (f, w) = (self.geo.frames, self.geo.window);
        let mut a = Array::zeros(&[f * w, w]);
        for r in 0..f * w {
            a.data_mut()[r * w + r % w] = 1.0;
        }
        a
    }

    /// Additive mask letting clip frame `f` see only its own audio window.
    fn window_mask(&self) -> Array {
        let (f, w) = (self.geo.frames, self.geo.window);
        let mut a = Array::full(&[f, f * w], MASKED);
        for r in 0..f {
            for c in r * w..(r + 1) * w {
                a.data_mut()[r * f * w + c] = 0.0;
            }
        }
        a
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        x_t: Var,
        t: usize,
        cond: &Conditioning,
    ) -> Result<BackboneOut> {
        cond.check(&self.geo)?;
        let geo = self.geo;
        if g.value(x_t).shape() != geo.clip_shape() {
            return Err(Error::shape(
                "backbone input",
                g.value(x_t).shape(),
                &geo.clip_shape(),
            ));
        }
        let (d, heads, fw) = (self.cfg.width, self.cfg.heads, geo.frames * geo.window);
        let ctx = geo.context();

        let frames_in = frames_to_rows(g, x_t)?;
        let past = g.constant(cond.past.clone());
        let past = frames_to_rows(g, past)?;
        let rows = g.concat(&[past, frames_in], 0)?;
        let enc = linear(g, p, rows, "enc")?;
        let enc = g.relu(enc)?;
        let ref_tok = if cond.null_reference {
            p.get("null.reference")?
        } else {
            let r = g.constant(cond.reference.clone().reshape(&[1, geo.frame_size()])?);
            let r = linear(g, p, r, "enc")?;
            g.relu(r)?
        };
        let tokens = g.concat(&[ref_tok, enc], 0)?;
        let pos = p.get("pos")?;
        let tokens = g.add(tokens, pos)?;
        let temb = g.constant(
            crate::ndcore::sinusoidal_embedding(t as f64, self.cfg.time_dim)
                .reshape(&[1, self.cfg.time_dim])?,
        );
        let tproj = linear(g, p, temb, "time")?;
        let tproj = g.reshape(tproj, &[d])?;
        let mut tokens = g.add_row(tokens, tproj)?;

        let audio = if cond.null_audio {
            let ones = g.constant(Array::ones(&[fw, 1]));
            let null = p.get("null.audio")?;
            g.matmul(ones, null)?
        } else {
            g.constant(cond.audio.clone().reshape(&[fw, AUDIO_DIM])?)
        };
        let tiling = g.constant(self.slot_tiling());
        let mask = g.constant(self.window_mask());

        let mut taps = Vec::with_capacity(2);
        for l in 0..self.cfg.depth {
            let b = format!("blocks.{l}");
            // audio cross-attention on clip frames
            let head = g.slice(tokens, 0, 0, ctx)?;
            let frames = g.slice(tokens, 0, ctx, geo.frames)?;
            let h = g.layer_norm(frames)?;
            let q = linear(g, p, h, &format!("{b}.audio.q"))?;
            let slots = g.matmul(tiling, p.get(&format!("{b}.audio.slot"))?)?;
            let k = linear(g, p, audio, &format!("{b}.audio.k"))?;
            let k = g.add(k, slots)?;
            let v = linear(g, p, audio, &format!("{b}.audio.v"))?;
            let v = g.add(v, slots)?;
            let a = attention(g, q, k, v, heads, Some(mask))?;
            let a = linear(g, p, a, &format!("{b}.audio.o"))?;
            let frames = g.add(frames, a)?;
            tokens = g.concat(&[head, frames], 0)?;

            // temporal self-attention over all tokens
            let h = g.layer_norm(tokens)?;
            let q = linear(g, p, h, &format!("{b}.self.q"))?;
            let k = linear(g, p, h, &format!("{b}.self.k"))?;
            let v = linear(g, p, h, &format!("{b}.self.v"))?;
            let a = attention(g, q, k, v, heads, None)?;
            let a = linear(g, p, a, &format!("{b}.self.o"))?;
            tokens = g.add(tokens, a)?;
            if l == 0 {
                taps.push(g.slice(tokens, 0, ctx, geo.frames)?);
            }

            let h = g.layer_norm(tokens)?;
            let h = linear(g, p, h, &format!("{b}.mlp.up"))?;
            let h = g.relu(h)?;
            let h = linear(g, p, h, &format!("{b}.mlp.down"))?;
            tokens = g.add(tokens, h)?;
        }
        let frames = g.slice(tokens, 0, ctx, geo.frames)?;
        taps.push(frames);

        let h = g.layer_norm(frames)?;
        let out = linear(g, p, h, "dec")?;
        let gate = linear(g, p, temb, "gate")?;
        let gate = g.reshape(gate, &[geo.frame_size()])?;
        let skip = g.mul_row(frames_in, gate)?;
        let out = g.add(out, skip)?;
        let out = g.reshape(out, &[geo.frames, geo.channels, geo.height, geo.width])?;
        let output = g.permute(out, &[1, 0, 2, 3])?;
        Ok(BackboneOut { output, taps })
    }
}

/// Consistency function `c_skip(t) x_t + c_out(t) F(x_t, t, c)`.
pub fn consistency_output(
    g: &mut Graph<'_>,
    backbone: &Backbone,
    p: &Bound,
    coeffs: &CmCoeffs,
    x_t: Var,
    t: usize,
    cond: &Conditioning,
) -> Result<Var> {
    let raw = backbone.forward(g, p, x_t, t, cond)?.output;
    let (skip, out) = coeffs.coeffs(t);
    let a = g.scale(x_t, skip)?;
    let b = g.scale(raw, out)?;
    g.add(a, b)
}

/// Per-tap temporal convolution heads over backbone frame features; the
/// score is the mean over taps of the position-averaged head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub width: usize,
    pub channels: usize,
    pub taps: usize,
}

const DISC_SLOPE: f64 = 0.2;
const DISC_KERNEL: usize = 3;

impl Discriminator {
    pub fn new(cfg: &BackboneConfig) -> Self {
        Self {
            width: cfg.width,
            channels: cfg.disc_channels,
            taps: 2,
        }
    }

    pub fn init(&self, rng: &mut Prng) -> ParamStore {
        let mut p = ParamStore::new();
        let fan = DISC_KERNEL * self.width;
        for i in 0..self.taps {
            p.insert(
                format!("tap{i}.conv.w"),
                rng.normal_array(&[fan, self.channels])
                    .scale(1.0 / (fan as f64).sqrt()),
            );
            p.insert(format!("tap{i}.conv.b"), Array::zeros(&[self.channels]));
            p.insert(
                format!("tap{i}.head.w"),
                rng.normal_array(&[self.channels, 1])
                    .scale(1.0 / (self.channels as f64).sqrt()),
            );
            p.insert(format!("tap{i}.head.b"), Array::zeros(&[1]));
        }
        p
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, taps: &[Var]) -> Result<Var> {
        if taps.len() != self.taps {
            return Err(Error::invalid(format!(
                "expected {} feature taps, got {}",
                self.taps,
                taps.len()
            )));
        }
        let mut scores = Vec::with_capacity(self.taps);
        for (i, &tap) in taps.iter().enumerate() {
            let n = g.value(tap).shape()[0];
            if n < DISC_KERNEL {
                return Err(Error::invalid(format!(
                    "{n} frames is shorter than the discriminator kernel"
                )));
            }
            let positions = n - DISC_KERNEL + 1;
            let shifted = (0..DISC_KERNEL)
                .map(|o| g.slice(tap, 0, o, positions))
                .collect::<Result<Vec<_>>>()?;
            let cols = g.concat(&shifted, 1)?;
            let h = linear(g, p, cols, &format!("tap{i}.conv"))?;
            let h = g.leaky_relu(h, DISC_SLOPE)?;
            let s = linear(g, p, h, &format!("tap{i}.head"))?;
            scores.push(g.mean(s)?);
        }
        let mut total = scores[0];
        for &s in &scores[1..] {
            total = g.add(total, s)?;
        }
        g.scale(total, 1.0 / self.taps as f64)
    }
}

/// Frozen noise predictor.
pub struct EpsNet<'a> {
    pub backbone: &'a Backbone,
    pub params: &'a ParamStore,
}

impl EpsModel for EpsNet<'_> {
    fn eps(&self, x_t: &Array, t: usize, cond: &Conditioning) -> Result<Array> {
        let mut g = Graph::no_grad();
        let p = Bound::frozen(&mut g, self.params);
        let x = g.constant(x_t.clone());
        let out = self.backbone.forward(&mut g, &p, x, t, cond)?.output;
        Ok(g.value(out).clone())
    }
}

/// Frozen consistency (clean-clip) predictor.
pub struct ConsistencyNet<'a> {
    pub backbone: &'a Backbone,
    pub params: &'a ParamStore,
    pub coeffs: CmCoeffs,
}

impl DataModel for ConsistencyNet<'_> {
    fn x0(&self, x_t: &Array, t: usize, cond: &Conditioning) -> Result<Array> {
        let mut g = Graph::no_grad();
        let p = Bound::frozen(&mut g, self.params);
        let x = g.constant(x_t.clone());
        let out = consistency_output(&mut g, self.backbone, &p, &self.coeffs, x, t, cond)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::grad_check;

    fn small() -> (Backbone, Conditioning, Prng) {
        let cfg = BackboneConfig {
            width: 8,
            heads: 2,
            depth: 2,
            time_dim: 4,
            mlp_ratio: 2,
            disc_channels: 3,
        };
        let geo = Geometry {
            channels: 2,
            frames: 4,
            height: 2,
            width: 2,
            past: 2,
            window: 3,
        };
        let mut rng = Prng::new(7);
        let cond = Conditioning::new(
            rng.normal_array(&[4, 3, AUDIO_DIM]),
            rng.normal_array(&[2, 2, 2]),
            rng.normal_array(&[2, 2, 2, 2]),
        );
        (Backbone::new(cfg, geo).unwrap(), cond, rng)
    }

    fn run(b: &Backbone, p: &ParamStore, x: &Array, t: usize, cond: &Conditioning) -> Array {
        EpsNet {
            backbone: b,
            params: p,
        }
        .eps(x, t, cond)
        .unwrap()
    }

    #[test]
    fn output_shape_and_zero_gate() {
        let (b, cond, mut rng) = small();
        let mut p = b.init(&mut rng);
        let x = rng.normal_array(&[2, 4, 2, 2]);
        let y = run(&b, &p, &x, 500, &cond);
        assert_eq!(y.shape(), &[2, 4, 2, 2]);
        let n = p.get("gate.b").unwrap().len();
        p.insert("gate.b", Array::new(vec![n], vec![0.5; n]).unwrap());
        assert!(run(&b, &p, &x, 500, &cond).max_abs_diff(&y).unwrap() > 1e-6);
        b.zero_gate(&mut p);
        assert_eq!(run(&b, &p, &x, 500, &cond), y);
        for name in ["dec.w", "dec.b"] {
            p.get_mut(name)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        assert!(run(&b, &p, &x, 500, &cond).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditioning_changes_output() {
        let (b, cond, mut rng) = small();
        let p = b.init(&mut rng);
        let x = rng.normal_array(&[2, 4, 2, 2]);
        let full = run(&b, &p, &x, 300, &cond);
        let unc = run(&b, &p, &x, 300, &cond.unconditional());
        assert!(full.max_abs_diff(&unc).unwrap() > 1e-6);
        let mut other = cond.clone();
        other.audio = rng.normal_array(&[4, 3, AUDIO_DIM]);
        assert!(run(&b, &p, &x, 300, &other).max_abs_diff(&full).unwrap() > 1e-6);
        assert!(run(&b, &p, &x, 301, &cond).max_abs_diff(&full).unwrap() > 1e-9);
    }

    #[test]
    fn audio_window_is_local() {
        // changing the audio window of the last frame must not move frame 0
        // before the temporal attention mixes frames; check via the first
        // tap's audio path only: zero self-attention output weights
        let (b, cond, mut rng) = small();
        let mut p = b.init(&mut rng);
        for l in 0..2 {
            for n in ["w", "b"] {
                let name = format!("blocks.{l}.self.o.{n}");
                p.get_mut(&name)
                    .unwrap()
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let x = rng.normal_array(&[2, 4, 2, 2]);
        let base = run(&b, &p, &x, 100, &cond);
        let mut other = cond.clone();
        for v in other.audio.data_mut()[3 * 3 * AUDIO_DIM..].iter_mut() {
            *v += 1.0;
        }
        let moved = run(&b, &p, &x, 100, &other);
        let f0 = |a: &Array| a.slice_axis(1, 0, 3).unwrap();
        assert!(f0(&base).max_abs_diff(&f0(&moved)).unwrap() < 1e-12);
        let last = |a: &Array| a.slice_axis(1, 3, 1).unwrap();
        assert!(last(&base).max_abs_diff(&last(&moved)).unwrap() > 1e-6);
    }

    #[test]
    fn consistency_boundary_is_identity() {
        let (b, cond, mut rng) = small();
        let p = b.init(&mut rng);
        let x = rng.normal_array(&[2, 4, 2, 2]);
        let net = ConsistencyNet {
            backbone: &b,
            params: &p,
            coeffs: CmCoeffs::new(0.5, 1000),
        };
        assert_eq!(net.x0(&x, 0, &cond).unwrap(), x);
    }

    #[test]
    fn backbone_and_discriminator_gradients() {
        let (b, cond, mut rng) = small();
        let mut p = b.init(&mut rng);
        // nonzero gate so its gradient path is exercised
        p.insert("gate.w", rng.normal_array(&[4, 8]).scale(0.3));
        let disc = Discriminator::new(&b.cfg);
        let dp = disc.init(&mut rng);
        let mut all = p.prefixed("net/");
        all.extend(dp.prefixed("disc/"));
        let x = rng.normal_array(&[2, 4, 2, 2]);
        let target = rng.normal_array(&[2, 4, 2, 2]);
        let unc = cond.unconditional();
        let report = grad_check(
            |g, ps| {
                let bp = Bound::subset(g, ps, "net/", |_| true);
                let dpb = Bound::subset(g, ps, "disc/", |_| true);
                let xv = g.constant(x.clone());
                let o1 = b.forward(g, &bp, xv, 640, &cond)?;
                let o2 = b.forward(g, &bp, xv, 640, &unc)?;
                let tv = g.constant(target.clone());
                let r = g.sub(o1.output, tv)?;
                let sq = g.mul(r, r)?;
                let l1 = g.mean(sq)?;
                let r2 = g.mul(o2.output, o2.output)?;
                let l2 = g.mean(r2)?;
                let s = disc.forward(g, &dpb, &o1.taps)?;
                let l = g.add(l1, l2)?;
                g.add(l, s)
            },
            &all,
            1e-4,
        )
        .unwrap();
        assert!(
            report.pass_fraction() == 1.0,
            "{:?}",
            report
                .params
                .iter()
                .filter(|c| c.failing > 0)
                .collect::<Vec<_>>()
        );
    }
}
