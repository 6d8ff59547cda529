//! Site-occupancy classifier: a 81-50-25-12-1 perceptron on 9×9 regions of
//! interest, with a synthetic training corpus and a versioned binary format.

use std::io::{Read, Write};

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imager::{degrade, render_image, CameraModel, SyntheticImage};
use crate::lattice::{LatticeGeometry, SiteIndex};
use crate::par::{self, Execution};
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

pub const ROI: usize = 9;
pub const INPUT: usize = ROI * ROI;
pub const LAYERS: [usize; 5] = [INPUT, 50, 25, 12, 1];
const HALF: i64 = (ROI / 2) as i64;
const MAGIC: &[u8; 8] = b"WPMLP\0\0\x01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major `out × in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    pub layers: Vec<Layer>,
    /// Raw counts are mapped to `(x − mean) / scale`.
    pub norm_mean: f64,
    pub norm_scale: f64,
}

impl MlpWeights {
    pub fn zeros() -> Self {
        let layers = LAYERS
            .windows(2)
            .map(|s| Layer { w: vec![0.0; s[0] * s[1]], b: vec![0.0; s[1]], n_in: s[0], n_out: s[1] })
            .collect();
        Self { layers, norm_mean: 0.0, norm_scale: 1.0 }
    }

    /// He-initialised weights, zero biases.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut w = Self::zeros();
        for l in &mut w.layers {
            let d = Normal::new(0.0, (2.0 / l.n_in as f64).sqrt()).expect("finite");
            l.w.iter_mut().for_each(|x| *x = d.sample(rng));
        }
        w
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().map(|x| (x - self.norm_mean) / self.norm_scale).collect()
    }

    /// Flat binary: magic, layer count, then per layer `(n_in, n_out)` as
    /// little-endian u64, the normalisation pair, then every weight matrix
    /// (row-major) followed by its bias, as little-endian f64.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&(self.layers.len() as u64).to_le_bytes())?;
        for l in &self.layers {
            out.write_all(&(l.n_in as u64).to_le_bytes())?;
            out.write_all(&(l.n_out as u64).to_le_bytes())?;
        }
        out.write_all(&self.norm_mean.to_le_bytes())?;
        out.write_all(&self.norm_scale.to_le_bytes())?;
        for l in &self.layers {
            for x in l.w.iter().chain(&l.b) {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("weights", "bad magic or version"));
        }
        let mut u = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut u)?;
            Ok(u64::from_le_bytes(u))
        };
        let n = next_u64(&mut input)? as usize;
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            shapes.push((next_u64(&mut input)? as usize, next_u64(&mut input)? as usize));
        }
        let want: Vec<(usize, usize)> = LAYERS.windows(2).map(|s| (s[0], s[1])).collect();
        if shapes != want {
            return Err(Error::format("weights", format!("shape table {shapes:?} does not match {want:?}")));
        }
        let next_f64 = |r: &mut R| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let norm_mean = next_f64(&mut input)?;
        let norm_scale = next_f64(&mut input)?;
        let mut layers = Vec::with_capacity(n);
        for (n_in, n_out) in shapes {
            let mut w = Vec::with_capacity(n_in * n_out);
            for _ in 0..n_in * n_out {
                w.push(next_f64(&mut input)?);
            }
            let mut b = Vec::with_capacity(n_out);
            for _ in 0..n_out {
                b.push(next_f64(&mut input)?);
            }
            layers.push(Layer { w, b, n_in, n_out });
        }
        Ok(Self { layers, norm_mean, norm_scale })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Activations of every layer; the last entry holds the output logit.
fn forward_trace(w: &MlpWeights, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = vec![x.to_vec()];
    for (k, l) in w.layers.iter().enumerate() {
        let inp = acts.last().expect("non-empty");
        let mut z = l.b.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &l.w[o * l.n_in..(o + 1) * l.n_in];
            *zo += row.iter().zip(inp).map(|(a, b)| a * b).sum::<f64>();
        }
        if k + 1 < w.layers.len() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(z);
    }
    acts
}

/// Occupation probability of a normalised ROI.
pub fn forward(w: &MlpWeights, roi: &[f64]) -> f64 {
    sigmoid(forward_trace(w, roi).last().expect("output")[0])
}

/// Probability from raw counts, applying the stored normalisation.
pub fn classify_raw(w: &MlpWeights, raw: &[f64]) -> f64 {
    forward(w, &w.normalize(raw))
}

/// Binary cross-entropy of one sample and its gradient, accumulated into `grad`
/// (same layout as the layers: weights then biases). Returns the loss.
pub fn backprop(w: &MlpWeights, x: &[f64], label: bool, grad: &mut [f64]) -> f64 {
    let acts = forward_trace(w, x);
    let z = acts.last().expect("output")[0];
    let y = if label { 1.0 } else { 0.0 };
    // BCE from the logit: softplus(z) − y·z
    let loss = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() } - y * z;
    let mut delta = vec![sigmoid(z) - y];
    let offsets: Vec<usize> = w
        .layers
        .iter()
        .scan(0, |acc, l| {
            let o = *acc;
            *acc += l.w.len() + l.b.len();
            Some(o)
        })
        .collect();
    for k in (0..w.layers.len()).rev() {
        let l = &w.layers[k];
        let inp = &acts[k];
        let g = &mut grad[offsets[k]..offsets[k] + l.w.len() + l.b.len()];
        for o in 0..l.n_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            for i in 0..l.n_in {
                g[o * l.n_in + i] += d * inp[i];
            }
            g[l.w.len() + o] += d;
        }
        if k > 0 {
            let mut prev = vec![0.0; l.n_in];
            for o in 0..l.n_out {
                let d = delta[o];
                for i in 0..l.n_in {
                    prev[i] += l.w[o * l.n_in + i] * d;
                }
            }
            // ReLU derivative on the hidden activation feeding this layer
            for (p, a) in prev.iter_mut().zip(inp) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    loss
}

/// Parameters as one flat vector, in the gradient layout.
pub fn flatten(w: &MlpWeights) -> Vec<f64> {
    w.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect()
}

pub fn unflatten(w: &mut MlpWeights, p: &[f64]) {
    let mut k = 0;
    for l in &mut w.layers {
        let nw = l.w.len();
        l.w.copy_from_slice(&p[k..k + nw]);
        k += nw;
        let nb = l.b.len();
        l.b.copy_from_slice(&p[k..k + nb]);
        k += nb;
    }
}

/// Whether the ROI around `site` (pixels) lies inside a `width × height` frame.
pub fn roi_fits(width: usize, height: usize, site: &Vector2<f64>) -> bool {
    let (cx, cy) = (site.x.round() as i64, site.y.round() as i64);
    cx - HALF >= 0 && cy - HALF >= 0 && cx + HALF < width as i64 && cy + HALF < height as i64
}

/// 9×9 raw counts centred on the pixel nearest to `site` (pixels). `None`
/// when the window would leave the frame.
pub fn extract_roi(img: &SyntheticImage, site: &Vector2<f64>) -> Option<Vec<f64>> {
    if !roi_fits(img.width, img.height, site) {
        return None;
    }
    let (cx, cy) = (site.x.round() as i64, site.y.round() as i64);
    let mut out = Vec::with_capacity(INPUT);
    for y in cy - HALF..=cy + HALF {
        for x in cx - HALF..=cx + HALF {
            out.push(img.get(x as usize, y as usize) as f64);
        }
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSample {
    /// Raw counts; normalised on use.
    pub pixels: Vec<f64>,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Factor by which the per-atom SNR is worse than the nominal camera.
    pub snr_factor: f64,
    /// Filling fraction of the training frames.
    pub filling: f64,
    pub frames: usize,
    /// Size of each training frame in lattice sites per side.
    pub sites_per_side: i64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { snr_factor: 2.5, filling: 0.1, frames: 400, sites_per_side: 12 }
    }
}

/// Balanced ROI corpus from randomly filled frames rendered with a degraded
/// camera. Frames are independent work units with their own RNG streams.
pub fn generate_corpus(
    geom: &LatticeGeometry,
    camera: &CameraModel,
    spec: &CorpusSpec,
    seed: u64,
    unit_offset: u64,
    exec: Execution,
) -> Result<Vec<RoiSample>> {
    if !(spec.filling > 0.0 && spec.filling < 1.0) {
        return Err(Error::Config(format!("filling must be in (0, 1), got {}", spec.filling)));
    }
    let cam = degrade(camera, spec.snr_factor)?;
    let n = spec.sites_per_side;
    // a small square camera around the frame's sites
    let frames = par::try_map_indexed(exec, spec.frames, |f| -> Result<Vec<RoiSample>> {
        let mut rng = stream(seed, Purpose::Corpus, unit_offset + f as u64);
        let sites: Vec<SiteIndex> = (0..n).flat_map(|j| (-j / 2..n - j / 2).map(move |i| SiteIndex::new(i, j))).collect();
        let occupied: Vec<SiteIndex> = sites.iter().copied().filter(|_| rng.random::<f64>() < spec.filling).collect();
        let img = render_image(geom, &occupied, &cam, &mut rng)?;
        let set: std::collections::HashSet<SiteIndex> = occupied.iter().copied().collect();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for s in &sites {
            let p = cam.to_pixels(&geom.site_position(*s));
            if let Some(pixels) = extract_roi(&img, &p) {
                let sample = RoiSample { pixels, label: set.contains(s) };
                if sample.label { pos.push(sample) } else { neg.push(sample) }
            }
        }
        // balance the classes within the frame
        neg.shuffle(&mut rng);
        neg.truncate(pos.len());
        pos.extend(neg);
        Ok(pos)
    })?;
    Ok(frames.into_iter().flatten().collect())
}

/// Camera framing the corpus sites, with the lattice origin in a corner.
pub fn corpus_camera(geom: &LatticeGeometry, nominal: &CameraModel, spec: &CorpusSpec) -> CameraModel {
    let side = spec.sites_per_side as f64 * geom.spacing() / nominal.pixel_pitch;
    let size = (side + 2.0 * ROI as f64).ceil() as usize;
    CameraModel { width: size, height: size, offset: [ROI as f64, ROI as f64], ..*nominal }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub holdout_fraction: f64,
    /// Accuracy below which training is reported as failed.
    pub min_accuracy: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { epochs: 30, batch: 32, learning_rate: 0.01, momentum: 0.9, holdout_fraction: 0.2, min_accuracy: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub weights: MlpWeights,
    pub holdout_accuracy: f64,
    /// Mean training loss per epoch.
    pub learning_curve: Vec<f64>,
    pub train_size: usize,
    pub holdout_size: usize,
}

pub fn accuracy(w: &MlpWeights, samples: &[RoiSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let right = samples.iter().filter(|s| (classify_raw(w, &s.pixels) > 0.5) == s.label).count();
    right as f64 / samples.len() as f64
}

/// Momentum SGD on binary cross-entropy.
pub fn train(corpus: &[RoiSample], params: &TrainParams, seed: u64) -> Result<TrainReport> {
    if corpus.len() < 10 {
        return Err(Error::Training { reason: "corpus too small".into(), last_loss: f64::NAN });
    }
    let mut rng = stream(seed, Purpose::Training, 0);
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut rng);
    let n_hold = ((corpus.len() as f64 * params.holdout_fraction).round() as usize).clamp(1, corpus.len() - 1);
    let (hold_idx, train_idx) = idx.split_at(n_hold);
    let holdout: Vec<RoiSample> = hold_idx.iter().map(|&k| corpus[k].clone()).collect();
    let mut train_set: Vec<usize> = train_idx.to_vec();

    let mut w = MlpWeights::random(&mut rng);
    let all: Vec<f64> = train_set.iter().flat_map(|&k| corpus[k].pixels.iter().copied()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / all.len() as f64;
    w.norm_mean = mean;
    w.norm_scale = var.sqrt().max(1e-12);
    let inputs: Vec<Vec<f64>> = corpus.iter().map(|s| w.normalize(&s.pixels)).collect();

    let mut params_flat = flatten(&w);
    let mut velocity = vec![0.0; params_flat.len()];
    let mut grad = vec![0.0; params_flat.len()];
    let mut curve = Vec::with_capacity(params.epochs);
    for _ in 0..params.epochs {
        train_set.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_set.chunks(params.batch.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &k in batch {
                epoch_loss += backprop(&w, &inputs[k], corpus[k].label, &mut grad);
            }
            let scale = params.learning_rate / batch.len() as f64;
            for ((p, v), g) in params_flat.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = params.momentum * *v - scale * g;
                *p += *v;
            }
            unflatten(&mut w, &params_flat);
        }
        let l = epoch_loss / train_set.len() as f64;
        if !l.is_finite() {
            return Err(Error::Training { reason: "loss diverged".into(), last_loss: l });
        }
        curve.push(l);
    }
    let acc = accuracy(&w, &holdout);
    if acc < params.min_accuracy {
        return Err(Error::Training {
            reason: format!("held-out accuracy {acc:.4} below {:.4}; learning curve {curve:?}", params.min_accuracy),
            last_loss: curve.last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok(TrainReport { weights: w, holdout_accuracy: acc, learning_curve: curve, train_size: train_set.len(), holdout_size: n_hold })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_one_half() {
        let w = MlpWeights::zeros();
        assert_eq!(forward(&w, &[3.0; INPUT]), 0.5);
        assert_eq!(w.n_params(), 81 * 50 + 50 + 50 * 25 + 25 + 25 * 12 + 12 + 12 + 1);
    }

    #[test]
    fn binary_round_trip() {
        let mut rng = stream(1, Purpose::Training, 0);
        let w = MlpWeights::random(&mut rng);
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert_eq!(MlpWeights::read_from(&buf[..]).unwrap(), w);
        buf[0] = b'X';
        assert!(MlpWeights::read_from(&buf[..]).is_err());
    }
}
