use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, VideoRecord};
use super::sample_frames_uniform;
use super::tokenizer::HashTokenizer;
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Parameters of the planted-correspondence generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub seed: u64,
    pub size: usize,
    pub latent_dim: usize,
    /// Observation noise on both sides; 0 makes matched latents identical.
    pub noise_scale: f64,
    /// Spread of per-frame sub-latents around the video latent.
    pub frame_spread: f64,
    /// Quantization levels per latent coordinate in captions.
    pub bins: usize,
}

impl SyntheticParams {
    pub fn desk(seed: u64) -> Self {
        Self { seed, size: 512, latent_dim: 8, noise_scale: 0.1, frame_spread: 0.5, bins: 6 }
    }
}

/// Negative squared distance between a text latent and a video latent.
pub fn latent_affinity(text: &[f64], video: &[f64]) -> f64 {
    -text.iter().zip(video).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn bin(x: f64, bins: usize) -> usize {
    let u = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    ((u * bins as f64) as usize).min(bins - 1)
}

/// Caption words for a latent whose coordinates have standard deviation `sd`.
fn describe(latent: &[f64], sd: f64, bins: usize) -> String {
    latent
        .iter()
        .enumerate()
        .map(|(j, &x)| format!("d{j}b{}", bin(x / sd, bins)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Draws `params.size` clips. Each clip has a content latent `z`; the video and
/// the captions observe noisy copies of it. Frames carry sub-latents spread
/// around the video latent and centred on it, and every frame's pseudo
/// caption describes the matching sub-latent.
pub fn generate_synthetic_corpus(params: &SyntheticParams, config: &ModelConfig) -> Result<Corpus> {
    if params.size < 2 {
        return Err(Error::Config(format!("corpus size must be >= 2, got {}", params.size)));
    }
    if params.latent_dim == 0 || params.bins < 2 {
        return Err(Error::Config("latent_dim must be >= 1 and bins >= 2".into()));
    }
    if !(params.noise_scale >= 0.0) || !(params.frame_spread >= 0.0) {
        return Err(Error::Config("noise_scale and frame_spread must be >= 0".into()));
    }
    let (f, t, d, l) = (config.frames, config.tokens_per_frame(), config.d_input, params.latent_dim);
    if l + 1 > config.max_caption_len {
        return Err(Error::Config(format!(
            "captions of {} words plus end token exceed max_caption_len {}",
            l, config.max_caption_len
        )));
    }
    let tokenizer = HashTokenizer::new(params.seed, config.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    // one mixing matrix per token position, [d_input, latent_dim]
    let mixing: Vec<Tensor> = (0..t).map(|_| Tensor::randn([d, l], 1.0 / (l as f64).sqrt(), &mut rng)).collect();
    let sigma = params.noise_scale;
    let shrink = 1.0 / (1.0 + sigma * sigma).sqrt();
    let frame_sd = (1.0 + params.frame_spread * params.frame_spread).sqrt();

    let mut records = Vec::with_capacity(params.size);
    for i in 0..params.size {
        let z = normal_vec(l, &mut rng);
        let observe = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let e = normal_vec(l, rng);
            z.iter().zip(e).map(|(a, b)| (a + sigma * b) * shrink).collect()
        };
        let zv = observe(&mut rng);
        let zt = observe(&mut rng);

        let raw_len = f + rng.random_range(0..=f);
        let offsets: Vec<Vec<f64>> = (0..raw_len).map(|_| normal_vec(l, &mut rng)).collect();
        let picked = sample_frames_uniform(raw_len, f)?;
        let mut sub: Vec<Vec<f64>> = picked.iter().map(|&k| offsets[k].clone()).collect();
        for j in 0..l {
            let mean = sub.iter().map(|u| u[j]).sum::<f64>() / f as f64;
            sub.iter_mut().for_each(|u| u[j] -= mean);
        }

        let mut data = Vec::with_capacity(f * t * d);
        for u in &sub {
            let zf: Vec<f64> = zv.iter().zip(u).map(|(a, b)| a + params.frame_spread * b).collect();
            for a in &mixing {
                for row in a.rows() {
                    let clean: f64 = row.iter().zip(&zf).map(|(x, y)| x * y).sum();
                    let n: f64 = rng.sample(StandardNormal);
                    data.push(clean + sigma * n);
                }
            }
        }
        let caption = describe(&zt, 1.0, params.bins);
        let pseudo: Vec<String> = sub
            .iter()
            .map(|u| {
                let lat: Vec<f64> = zt.iter().zip(u).map(|(a, b)| a + params.frame_spread * b).collect();
                describe(&lat, frame_sd, params.bins)
            })
            .collect();
        let mut rec = VideoRecord {
            video_id: format!("video{i:05}"),
            frames: Tensor::new([f, t, d], data)?,
            caption_tokens: tokenizer.encode(&caption),
            caption,
            pseudo_captions: None,
            pseudo_tokens: None,
            text_latent: Some(zt),
            video_latent: Some(zv),
        };
        rec.set_pseudo_captions(pseudo, &tokenizer);
        records.push(rec);
    }
    Ok(Corpus { frames: f, tokens_per_frame: t, d_input: d, tokenizer, records })
}
