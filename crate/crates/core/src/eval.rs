//! Sample-quality metrics: a Fréchet distance on fixed random projections,
//! frame-difference motion heatmaps, a mouth-stripe lip-sync correlation,
//! identity distance to the reference frame, and rank correlation.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::ndcore::{Array, Prng};
use crate::synthdata::{pearson, DataConfig};

pub const MIN_FRECHET_CLIPS: usize = 20;

/// Fixed Gaussian projection of flattened clips.
#[derive(Debug, Clone)]
pub struct Projection {
    matrix: DMatrix<f64>,
    pub seed: u64,
}

impl Projection {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = Prng::new(seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let matrix = DMatrix::from_fn(output_dim, input_dim, |_, _| rng.normal() * scale);
        Self { matrix, seed }
    }

    pub fn project(&self, clip: &Array) -> Result<DVector<f64>> {
        if clip.len() != self.matrix.ncols() {
            return Err(Error::invalid(format!(
                "projection expects {} values, clip has {}",
                self.matrix.ncols(),
                clip.len()
            )));
        }
        Ok(&self.matrix * DVector::from_column_slice(clip.data()))
    }
}

/// Mean and covariance (unbiased) of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FrechetStats {
    pub fn from_features(feats: &[DVector<f64>]) -> Result<Self> {
        if feats.len() < 2 {
            return Err(Error::invalid("need at least two feature vectors"));
        }
        let n = feats.len();
        let dim = feats[0].len();
        let mut mean = DVector::zeros(dim);
        for f in feats {
            mean += f;
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for f in feats {
            let d = f - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(Self {
            mean,
            cov,
            count: n,
        })
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a C_b)^{1/2})`, with the trace of
/// the cross term taken as `tr((C_a^{1/2} C_b C_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> f64 {
    let dm = (&a.mean - &b.mean).norm_squared();
    let sa = sym_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let cross: f64 = sym_sqrt(&inner).trace();
    let value = dm + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    value.max(0.0)
}

pub fn clip_stats(clips: &[Array], proj: &Projection) -> Result<FrechetStats> {
    let feats = clips
        .iter()
        .map(|c| proj.project(c))
        .collect::<Result<Vec<_>>>()?;
    FrechetStats::from_features(&feats)
}

/// Fréchet distance between two clip sets under `proj`.
pub fn toy_frechet(a: &[Array], b: &[Array], proj: &Projection) -> Result<f64> {
    for (name, set) in [("first", a), ("second", b)] {
        if set.len() < MIN_FRECHET_CLIPS {
            return Err(Error::invalid(format!(
                "{name} set has {} clips, need at least {MIN_FRECHET_CLIPS}",
                set.len()
            )));
        }
    }
    if a[0].shape() != b[0].shape() {
        return Err(Error::shape("toy_frechet", a[0].shape(), b[0].shape()));
    }
    Ok(frechet_distance(
        &clip_stats(a, proj)?,
        &clip_stats(b, proj)?,
    ))
}

/// Per-pixel sum over frames and channels of `|x^{f+1} - x^f|`, shaped `(h, w)`.
pub fn motion_heatmap(clip: &Array) -> Result<Array> {
    let s = clip.shape();
    if s.len() != 4 || s[1] < 2 {
        return Err(Error::invalid(format!(
            "heatmap needs a (c, F >= 2, h, w) clip, got {s:?}"
        )));
    }
    let (c, f, hw) = (s[0], s[1], s[2] * s[3]);
    let d = clip.data();
    let mut out = vec![0.0; hw];
    for ch in 0..c {
        for k in 0..f - 1 {
            let a = &d[(ch * f + k) * hw..(ch * f + k + 1) * hw];
            let b = &d[(ch * f + k + 1) * hw..(ch * f + k + 2) * hw];
            for (o, (p, q)) in out.iter_mut().zip(a.iter().zip(b)) {
                *o += (q - p).abs();
            }
        }
    }
    Array::new(vec![s[2], s[3]], out)
}

pub fn heatmap_mass(clip: &Array) -> Result<f64> {
    Ok(motion_heatmap(clip)?.sum())
}

/// Correlation between mouth-stripe brightness and audio amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipSync {
    pub correlation: f64,
    /// One of the two series was constant; the correlation is reported as 0.
    pub degenerate: bool,
}

/// Per-frame mean of channel 1 over the stripe region, one value per frame.
pub fn stripe_brightness(clip: &Array, cfg: &DataConfig) -> Result<Vec<f64>> {
    let s = clip.shape();
    if s.len() != 4 || s[0] < 2 || s[2] != cfg.height || s[3] != cfg.width {
        return Err(Error::invalid(format!(
            "clip shape {s:?} does not match the data config"
        )));
    }
    let (f, h, w) = (s[1], s[2], s[3]);
    let (row, cols) = cfg.stripe();
    let d = clip.data();
    Ok((0..f)
        .map(|k| {
            let base = ((f + k) * h + row) * w;
            cols.clone().map(|j| d[base + j]).sum::<f64>() / cols.len() as f64
        })
        .collect())
}

pub fn lip_sync(clip: &Array, amplitude: &[f64], cfg: &DataConfig) -> Result<LipSync> {
    let b = stripe_brightness(clip, cfg)?;
    if b.len() != amplitude.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} amplitude values",
            b.len(),
            amplitude.len()
        )));
    }
    Ok(match pearson(&b, amplitude) {
        Some(r) => LipSync {
            correlation: r,
            degenerate: false,
        },
        None => LipSync {
            correlation: 0.0,
            degenerate: true,
        },
    })
}

/// Amplitudes of the centre of each audio window `(F, 2m + 1, 4)`.
pub fn window_amplitudes(audio: &Array) -> Vec<f64> {
    let s = audio.shape();
    let (w, dim) = (s[1], s[2]);
    (0..s[0])
        .map(|f| audio.data()[(f * w + w / 2) * dim])
        .collect()
}

/// Mean absolute difference between every frame of `clip` and `reference`.
pub fn identity_distance(clip: &Array, reference: &Array) -> Result<f64> {
    let s = clip.shape();
    let r = reference.shape();
    if s.len() != 4 || r != [s[0], s[2], s[3]] {
        return Err(Error::shape("identity_distance", s, r));
    }
    let (c, f, hw) = (s[0], s[1], s[2] * s[3]);
    let mut acc = 0.0;
    for ch in 0..c {
        for k in 0..f {
            let frame = &clip.data()[(ch * f + k) * hw..(ch * f + k + 1) * hw];
            let refc = &reference.data()[ch * hw..(ch + 1) * hw];
            acc += frame
                .iter()
                .zip(refc)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        }
    }
    Ok(acc / clip.len() as f64)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties); `None` when either
/// input is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}

/// Binary greyscale image, values scaled so the maximum maps to 255
/// (all-zero images stay black).
pub fn write_pgm(path: &Path, image: &Array) -> Result<()> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::invalid(format!("PGM needs a 2-d array, got {s:?}")));
    }
    let max = image.data().iter().cloned().fold(0.0, f64::max);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", s[1], s[0])?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v.max(0.0) / max * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Tile a clip `(c, F, h, w)` into a `(c h, F w)` image with values mapped
/// from `[-1, 1]` to `[0, 1]`.
pub fn clip_grid(clip: &Array) -> Result<Array> {
    let s = clip.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!(
            "clip grid needs (c, F, h, w), got {s:?}"
        )));
    }
    let (c, f, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; c * h * f * w];
    for ch in 0..c {
        for k in 0..f {
            for i in 0..h {
                for j in 0..w {
                    let v = clip.data()[((ch * f + k) * h + i) * w + j];
                    out[(ch * h + i) * (f * w) + k * w + j] = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
                }
            }
        }
    }
    Array::new(vec![c * h, f * w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_video, render_video, AudioTrack};

    #[test]
    fn frechet_basic_laws() {
        let mut rng = Prng::new(1);
        let a: Vec<Array> = (0..40).map(|_| rng.normal_array(&[2, 2, 2, 2])).collect();
        let b: Vec<Array> = (0..40)
            .map(|_| rng.normal_array(&[2, 2, 2, 2]).map(|v| v * 2.0 + 1.0))
            .collect();
        let p = Projection::new(16, 6, 3);
        assert!(toy_frechet(&a, &a, &p).unwrap() < 1e-8);
        let ab = toy_frechet(&a, &b, &p).unwrap();
        let ba = toy_frechet(&b, &a, &p).unwrap();
        assert!(ab > 0.1 && (ab - ba).abs() < 1e-8);
        assert!(toy_frechet(&a[..10], &b, &p).is_err());
    }

    #[test]
    fn point_masses_give_squared_distance() {
        let m = |x: f64| FrechetStats {
            mean: DVector::from_vec(vec![x, 0.0, 0.0]),
            cov: DMatrix::zeros(3, 3),
            count: 30,
        };
        assert!((frechet_distance(&m(0.0), &m(2.5)) - 6.25).abs() < 1e-12);
    }

    #[test]
    fn heatmap_of_moving_blob() {
        let cfg = DataConfig::default();
        let still = AudioTrack {
            features: vec![[0.5, 0.0, 0.0, 0.0]; 24],
        };
        let clip = render_video(&still, (3.5, 3.5), &cfg);
        assert_eq!(heatmap_mass(&clip).unwrap(), 0.0);
        let moving = AudioTrack {
            features: vec![[0.5, 1.0, 0.0, 0.0]; 6],
        };
        let mut cfg_mv = cfg.clone();
        cfg_mv.blob_sigma = 0.5;
        let clip = render_video(&moving, (3.0, 0.0), &cfg_mv)
            .slice_axis(1, 0, 5)
            .unwrap();
        let hm = motion_heatmap(&clip).unwrap();
        let row: f64 = (0..8).map(|j| hm.data()[3 * 8 + j]).sum();
        assert!(row > 0.6 * hm.sum(), "{row} of {}", hm.sum());
        // additivity: heatmap mass is the clip's L1 temporal variation
        let mut tv = 0.0;
        for ch in 0..2 {
            for k in 0..4 {
                let a = clip
                    .slice_axis(1, k, 1)
                    .unwrap()
                    .slice_axis(0, ch, 1)
                    .unwrap();
                let b = clip
                    .slice_axis(1, k + 1, 1)
                    .unwrap()
                    .slice_axis(0, ch, 1)
                    .unwrap();
                tv += b
                    .sub(&a)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>();
            }
        }
        assert!((tv - hm.sum()).abs() < 1e-9);
    }

    #[test]
    fn lip_sync_on_ground_truth_and_degenerate_audio() {
        let cfg = DataConfig::default();
        let v = gen_video(11, 48, &cfg).unwrap();
        let clip = v.clip(10, 8).unwrap();
        let amp = &v.audio.amplitude()[10..18];
        assert!(lip_sync(&clip, amp, &cfg).unwrap().correlation > 0.99);
        let flat = vec![0.5; 8];
        let ls = lip_sync(&clip, &flat, &cfg).unwrap();
        assert!(ls.degenerate && ls.correlation == 0.0);
    }

    #[test]
    fn spearman_ranks() {
        assert!(
            (spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs()
                < 1e-12
        );
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(
            &p,
            &Array::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        )
        .unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(*bytes.last().unwrap(), 255);
        assert_eq!(bytes.len(), 11 + 6);
    }
}
