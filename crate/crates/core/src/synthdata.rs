//! Procedural toy avatar videos.
//!
//! Channel 0 carries a Gaussian "head" blob whose per-frame displacement is
//! the `(dx, dy)` part of the audio track; channel 1 carries a fixed
//! horizontal "mouth" stripe whose brightness is the audio amplitude. All
//! values lie in `[-1, 1]` with `-1` as background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Array, Prng};

pub const CHANNELS: usize = 2;
pub const AUDIO_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Clip length `F`.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub video_length: usize,
    pub train_videos: usize,
    pub heldout_videos: usize,
    pub blob_sigma: f64,
    pub past_frames: usize,
    /// Audio window radius `m`; each frame sees `2m + 1` feature vectors.
    pub audio_radius: usize,
    /// Clips never start before this frame.
    pub start_margin: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 8,
            width: 8,
            video_length: 48,
            train_videos: 256,
            heldout_videos: 100,
            blob_sigma: 1.2,
            past_frames: 4,
            audio_radius: 2,
            start_margin: 7,
        }
    }
}

impl DataConfig {
    pub fn window(&self) -> usize {
        2 * self.audio_radius + 1
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [CHANNELS, self.frames, self.height, self.width]
    }

    pub fn frame_size(&self) -> usize {
        CHANNELS * self.height * self.width
    }

    /// Shortest video that fits two fragments after the start margin.
    pub fn min_length(&self) -> usize {
        2 * self.frames + self.start_margin
    }

    /// Row and column range of the mouth stripe.
    pub fn stripe(&self) -> (usize, std::ops::Range<usize>) {
        let row = self.height.saturating_sub(2);
        let lo = self.width / 4;
        (row, lo..self.width - lo)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: String| Error::Config {
            path: format!("data.{path}"),
            message,
        };
        if self.frames < 2 {
            return Err(fail("frames", "clip length must be at least 2".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(fail("height", "frames must be at least 4x4".into()));
        }
        if self.past_frames == 0 || self.past_frames > self.start_margin {
            return Err(fail(
                "past_frames",
                "need 1 <= past_frames <= start_margin".into(),
            ));
        }
        if self.video_length < self.min_length() {
            return Err(fail(
                "video_length",
                format!(
                    "need at least {} frames, got {}",
                    self.min_length(),
                    self.video_length
                ),
            ));
        }
        if self.train_videos == 0 || self.heldout_videos == 0 {
            return Err(fail("train_videos", "video counts must be positive".into()));
        }
        if self.blob_sigma.is_nan() || self.blob_sigma <= 0.0 {
            return Err(fail("blob_sigma", "must be positive".into()));
        }
        Ok(())
    }
}

/// Per-frame audio features `[amplitude, dx, dy, phase]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    pub features: Vec<[f64; AUDIO_DIM]>,
}

impl AudioTrack {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn amplitude(&self) -> Vec<f64> {
        self.features.iter().map(|f| f[0]).collect()
    }

    /// Windows `[A^{f-m}, ..., A^{f+m}]` for `count` frames starting at
    /// `start`, shaped `(count, 2m + 1, 4)`. Indices outside the track repeat
    /// the nearest edge frame.
    pub fn windows(&self, start: i64, count: usize, radius: usize) -> Array {
        let w = 2 * radius + 1;
        let last = self.features.len() as i64 - 1;
        let mut data = Vec::with_capacity(count * w * AUDIO_DIM);
        for f in 0..count as i64 {
            for o in -(radius as i64)..=radius as i64 {
                let idx = (start + f + o).clamp(0, last) as usize;
                data.extend_from_slice(&self.features[idx]);
            }
        }
        Array::from_parts(vec![count, w, AUDIO_DIM], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    /// `(c, length, h, w)`.
    pub frames: Array,
    pub audio: AudioTrack,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One frame, shaped `(c, h, w)`.
    pub fn frame(&self, idx: usize) -> Result<Array> {
        let s = self.frames.shape();
        let f = self.frames.slice_axis(1, idx, 1)?;
        f.reshape(&[s[0], s[2], s[3]])
    }

    /// Frames `[start, start + len)`, shaped `(c, len, h, w)`.
    pub fn clip(&self, start: usize, len: usize) -> Result<Array> {
        self.frames.slice_axis(1, start, len)
    }
}

/// Smooth seeded audio: amplitude in `[0, 1]`, velocities of a bounded
/// head trajectory, and the phase of the dominant amplitude oscillation.
pub fn gen_audio(rng: &mut Prng, length: usize, cfg: &DataConfig) -> (AudioTrack, (f64, f64)) {
    let w1 = rng.uniform_range(0.5, 1.1);
    let p1 = rng.uniform_range(0.0, std::f64::consts::TAU);
    let w2 = rng.uniform_range(0.15, 0.4);
    let p2 = rng.uniform_range(0.0, std::f64::consts::TAU);
    let cy = (cfg.height as f64 - 1.0) / 2.0;
    let cx = (cfg.width as f64 - 1.0) / 2.0;
    let reach = 0.3 * cfg.height.min(cfg.width) as f64;
    let (ay, ax) = (
        rng.uniform_range(0.3, 1.0) * reach,
        rng.uniform_range(0.3, 1.0) * reach,
    );
    let (ny, nx) = (rng.uniform_range(0.1, 0.35), rng.uniform_range(0.1, 0.35));
    let (qy, qx) = (
        rng.uniform_range(0.0, std::f64::consts::TAU),
        rng.uniform_range(0.0, std::f64::consts::TAU),
    );
    let pos = |f: f64| (cy + ay * (ny * f + qy).sin(), cx + ax * (nx * f + qx).sin());
    let features = (0..length)
        .map(|f| {
            let ff = f as f64;
            let amp =
                (0.5 + 0.3 * (w1 * ff + p1).sin() + 0.2 * (w2 * ff + p2).sin()).clamp(0.0, 1.0);
            let (y0, x0) = pos(ff);
            let (y1, x1) = pos(ff + 1.0);
            [amp, x1 - x0, y1 - y0, (w1 * ff + p1).cos()]
        })
        .collect();
    (AudioTrack { features }, pos(0.0))
}

/// Render frames from an audio track. The blob starts at `start_pos`
/// (`(y, x)`) and moves by `(dy, dx)` of each frame's audio features.
pub fn render_video(audio: &AudioTrack, start_pos: (f64, f64), cfg: &DataConfig) -> Array {
    let (h, w, len) = (cfg.height, cfg.width, audio.len());
    let (stripe_row, stripe_cols) = cfg.stripe();
    let mut data = vec![-1.0; CHANNELS * len * h * w];
    let two_s2 = 2.0 * cfg.blob_sigma * cfg.blob_sigma;
    let (mut y, mut x) = start_pos;
    for f in 0..len {
        let head = &mut data[f * h * w..(f + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 - y).powi(2) + (j as f64 - x).powi(2);
                head[i * w + j] = -1.0 + 2.0 * (-d2 / two_s2).exp();
            }
        }
        let amp = audio.features[f][0];
        let mouth = &mut data[(len + f) * h * w..(len + f + 1) * h * w];
        for j in stripe_cols.clone() {
            mouth[stripe_row * w + j] = -1.0 + 2.0 * amp;
        }
        x += audio.features[f][1];
        y += audio.features[f][2];
    }
    Array::from_parts(vec![CHANNELS, len, h, w], data)
}

pub fn gen_video(seed: u64, length: usize, cfg: &DataConfig) -> Result<Video> {
    if length < cfg.min_length() {
        return Err(Error::invalid(format!(
            "video length {length} shorter than two clips plus margin ({})",
            cfg.min_length()
        )));
    }
    let mut rng = Prng::new(seed);
    let (audio, start) = gen_audio(&mut rng, length, cfg);
    let frames = render_video(&audio, start, cfg);
    Ok(Video { frames, audio })
}

/// One training example `(x0, a, r, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    /// `(c, F, h, w)`.
    pub x0: Array,
    /// `(F, 2m + 1, 4)`.
    pub audio: Array,
    /// `(c, h, w)`.
    pub reference: Array,
    /// `(c, P, h, w)`, the frames immediately before the clip.
    pub past: Array,
    pub start: i64,
    pub reference_index: usize,
}

/// Frames `[start, start + len)` where indices before 0 are `fill`.
fn padded_clip(video: &Video, start: i64, len: usize, fill: &Array) -> Result<Array> {
    let s = video.frames.shape();
    let fill = fill.clone().reshape(&[s[0], 1, s[2], s[3]])?;
    let mut parts = Vec::with_capacity(len);
    let lead = (-start).clamp(0, len as i64) as usize;
    let owned = if lead < len {
        vec![video.clip((start + lead as i64) as usize, len - lead)?]
    } else {
        Vec::new()
    };
    for _ in 0..lead {
        parts.push(&fill);
    }
    parts.extend(owned.iter());
    Array::concat(&parts, 1)
}

pub fn make_tuple_with_reference(
    video: &Video,
    start: i64,
    reference_index: usize,
    cfg: &DataConfig,
) -> Result<TrainingTuple> {
    let len = video.len() as i64;
    if start + cfg.frames as i64 > len {
        return Err(Error::invalid(format!(
            "clip [{start}, {}) overruns video of {len} frames",
            start + cfg.frames as i64
        )));
    }
    if reference_index >= video.len() {
        return Err(Error::invalid(format!(
            "reference frame {reference_index} out of range"
        )));
    }
    let reference = video.frame(reference_index)?;
    let x0 = padded_clip(video, start, cfg.frames, &reference)?;
    let past = padded_clip(
        video,
        start - cfg.past_frames as i64,
        cfg.past_frames,
        &reference,
    )?;
    Ok(TrainingTuple {
        x0,
        audio: video.audio.windows(start, cfg.frames, cfg.audio_radius),
        reference,
        past,
        start,
        reference_index,
    })
}

/// Clip at `start` with a uniformly drawn reference frame.
pub fn make_tuple(
    video: &Video,
    start: usize,
    rng: &mut Prng,
    cfg: &DataConfig,
) -> Result<TrainingTuple> {
    if start < cfg.start_margin {
        return Err(Error::invalid(format!(
            "clip start {start} inside the {}-frame start margin",
            cfg.start_margin
        )));
    }
    let reference_index = rng.uniform_int(0, video.len() - 1);
    make_tuple_with_reference(video, start as i64, reference_index, cfg)
}

/// Two consecutive equal-length fragments sharing one reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentPair {
    pub current: TrainingTuple,
    pub next: TrainingTuple,
}

/// Fragments `[start_n, start_n + F)` and `[start_n + F, start_n + 2F)`.
///
/// A negative `start_n` is allowed: the missing leading frames of the first
/// fragment (and its past frames) are the reference frame repeated. The
/// second fragment must respect the start margin.
pub fn make_fragment_pair(
    video: &Video,
    start_n: i64,
    rng: &mut Prng,
    cfg: &DataConfig,
) -> Result<FragmentPair> {
    let f = cfg.frames as i64;
    if start_n + 2 * f > video.len() as i64 {
        return Err(Error::invalid(format!(
            "fragment pair at {start_n} overruns video of {} frames",
            video.len()
        )));
    }
    if start_n + f < cfg.start_margin as i64 {
        return Err(Error::invalid(format!(
            "second fragment start {} inside the start margin",
            start_n + f
        )));
    }
    let reference_index = rng.uniform_int(0, video.len() - 1);
    Ok(FragmentPair {
        current: make_tuple_with_reference(video, start_n, reference_index, cfg)?,
        next: make_tuple_with_reference(video, start_n + f, reference_index, cfg)?,
    })
}

/// A fixed collection of generated videos.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<Video>,
    pub cfg: DataConfig,
}

/// Stream ids for the per-video seed lists of the two splits.
const TRAIN_SPLIT_STREAM: u64 = 100;
const HELDOUT_SPLIT_STREAM: u64 = 101;

impl Dataset {
    fn generate(root_seed: u64, stream: u64, count: usize, cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let mut seeds = Prng::with_stream_id(root_seed, stream);
        let videos = (0..count)
            .map(|_| gen_video(seeds.next_u64(), cfg.video_length, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            videos,
            cfg: cfg.clone(),
        })
    }

    pub fn train(root_seed: u64, cfg: &DataConfig) -> Result<Self> {
        Self::generate(root_seed, TRAIN_SPLIT_STREAM, cfg.train_videos, cfg)
    }

    pub fn heldout(root_seed: u64, cfg: &DataConfig) -> Result<Self> {
        Self::generate(root_seed, HELDOUT_SPLIT_STREAM, cfg.heldout_videos, cfg)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Draw order: video index, clip start, reference index.
    pub fn sample_tuple(&self, rng: &mut Prng) -> Result<TrainingTuple> {
        let v = &self.videos[rng.uniform_int(0, self.videos.len() - 1)];
        let start = rng.uniform_int(self.cfg.start_margin, v.len() - self.cfg.frames);
        make_tuple(v, start, rng, &self.cfg)
    }

    /// Draw order: video index, start of the second fragment, reference index.
    pub fn sample_pair(&self, rng: &mut Prng) -> Result<FragmentPair> {
        let v = &self.videos[rng.uniform_int(0, self.videos.len() - 1)];
        let next_start = rng.uniform_int(self.cfg.start_margin, v.len() - self.cfg.frames);
        make_fragment_pair(
            v,
            next_start as i64 - self.cfg.frames as i64,
            rng,
            &self.cfg,
        )
    }
}

/// Pearson correlation, `None` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 1e-24 || sbb <= 1e-24 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig::default()
    }

    fn flat_audio(len: usize, amp: f64, dx: f64, dy: f64) -> AudioTrack {
        AudioTrack {
            features: vec![[amp, dx, dy, 0.0]; len],
        }
    }

    #[test]
    fn zero_amplitude_gives_background_mouth() {
        let c = cfg();
        let v = render_video(&flat_audio(30, 0.0, 0.1, 0.0), (3.5, 2.0), &c);
        let mouth = v.slice_axis(0, 1, 1).unwrap();
        assert!(mouth.data().iter().all(|&x| (x + 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_velocity_blob_is_static() {
        let c = cfg();
        let v = render_video(&flat_audio(30, 0.5, 0.0, 0.0), (3.5, 3.5), &c);
        let head = v.slice_axis(0, 0, 1).unwrap();
        for f in 1..30 {
            let a = head.slice_axis(1, f, 1).unwrap();
            let b = head.slice_axis(1, f - 1, 1).unwrap();
            assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
        }
    }

    #[test]
    fn mouth_tracks_amplitude() {
        let c = cfg();
        for seed in 0..100 {
            let v = gen_video(seed, c.video_length, &c).unwrap();
            let mouth = v.frames.slice_axis(0, 1, 1).unwrap();
            let per_frame: Vec<f64> = (0..v.len())
                .map(|f| mouth.slice_axis(1, f, 1).unwrap().mean())
                .collect();
            let r = pearson(&per_frame, &v.audio.amplitude()).unwrap();
            assert!(r > 0.99, "seed {seed}: {r}");
            assert!(v.frames.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn too_short_video_rejected() {
        let c = cfg();
        assert!(gen_video(0, c.min_length() - 1, &c).is_err());
        assert!(gen_video(0, c.min_length(), &c).is_ok());
    }

    #[test]
    fn tuple_indices() {
        let c = cfg();
        let v = gen_video(3, c.video_length, &c).unwrap();
        let mut rng = Prng::new(0);
        let t = make_tuple(&v, 7, &mut rng, &c).unwrap();
        assert_eq!(t.past, v.clip(3, 4).unwrap());
        assert_eq!(t.x0, v.clip(7, 8).unwrap());
        // window of clip frame 0 covers video frames 5..=9
        let w0 = t.audio.slice_axis(0, 0, 1).unwrap();
        let expect: Vec<f64> = (5..=9).flat_map(|i| v.audio.features[i]).collect();
        assert_eq!(w0.data(), &expect[..]);
        assert!(make_tuple(&v, 6, &mut rng, &c).is_err());
        assert!(make_tuple(&v, v.len() - 7, &mut rng, &c).is_err());
    }

    #[test]
    fn audio_edges_repeat() {
        let c = cfg();
        let v = gen_video(4, c.video_length, &c).unwrap();
        let w = v.audio.windows(0, 1, 2);
        let first = v.audio.features[0];
        assert_eq!(&w.data()[0..4], &first);
        assert_eq!(&w.data()[4..8], &first);
    }

    #[test]
    fn reference_index_is_uniform() {
        let c = cfg();
        let v = gen_video(5, c.video_length, &c).unwrap();
        let mut rng = Prng::new(9);
        let mut counts = vec![0usize; v.len()];
        let draws = 48_000;
        for _ in 0..draws {
            counts[make_tuple(&v, 10, &mut rng, &c).unwrap().reference_index] += 1;
        }
        let expected = draws as f64 / v.len() as f64;
        for (i, &n) in counts.iter().enumerate() {
            assert!(
                (n as f64 - expected).abs() < 0.15 * expected,
                "frame {i}: {n}"
            );
        }
    }

    #[test]
    fn fragment_pair_adjacency_and_padding() {
        let c = cfg();
        let v = gen_video(6, c.video_length, &c).unwrap();
        let mut rng = Prng::new(1);
        let pair = make_fragment_pair(&v, 7, &mut rng, &c).unwrap();
        assert_eq!(pair.next.start, 15);
        assert_eq!(pair.current.x0.shape(), &[2, 8, 8, 8]);
        assert_eq!(pair.next.x0.shape(), &[2, 8, 8, 8]);
        let joined = Array::concat(&[&pair.current.x0, &pair.next.x0], 1).unwrap();
        assert_eq!(joined, v.clip(7, 16).unwrap());

        let under = make_fragment_pair(&v, -1, &mut rng, &c).unwrap();
        let r = under
            .current
            .reference
            .clone()
            .reshape(&[2, 1, 8, 8])
            .unwrap();
        assert_eq!(under.current.x0.slice_axis(1, 0, 1).unwrap(), r);
        assert_eq!(
            under.current.x0.slice_axis(1, 1, 7).unwrap(),
            v.clip(0, 7).unwrap()
        );
        for f in 0..4 {
            assert_eq!(under.current.past.slice_axis(1, f, 1).unwrap(), r);
        }
        assert!(make_fragment_pair(&v, -2, &mut rng, &c).is_err());
        assert!(make_fragment_pair(&v, v.len() as i64 - 15, &mut rng, &c).is_err());
    }

    #[test]
    fn sampled_tuples_respect_margin() {
        let mut c = cfg();
        c.train_videos = 4;
        let d = Dataset::train(1, &c).unwrap();
        let mut rng = Prng::new(2);
        for _ in 0..500 {
            assert!(d.sample_tuple(&mut rng).unwrap().start >= 7);
            let p = d.sample_pair(&mut rng).unwrap();
            assert!(p.next.start >= 7);
            assert_eq!(p.next.start - p.current.start, 8);
        }
    }
}
