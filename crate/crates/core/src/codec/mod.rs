//! Synthetic invertible latent codec.
//!
//! Each token owns a fixed codeword in a content subspace; each speaker owns a
//! unit vector in a separate speaker subspace appended after the content
//! dimensions. A frame is `[codeword(token) ; speaker_scale·speaker] + noise`,
//! with noise drawn uniformly from a ball of radius `noise_scale`. Decoding
//! classifies the content part of every frame to its nearest codeword and
//! collapses runs, so content recovery can be scored exactly.

mod corpus;

pub use corpus::{
    generate_corpus, read_dataset, write_dataset, Corpus, DatasetSidecar, Utterance,
};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub vocab_size: usize,
    /// Total latent width: content dimensions followed by `speaker_dim` speaker dimensions.
    pub latent_dim: usize,
    pub speaker_dim: usize,
    /// Inclusive `[min, max]` frames per token.
    pub frames_per_token: [usize; 2],
    pub speaker_count: usize,
    pub speaker_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            latent_dim: 16,
            speaker_dim: 4,
            frames_per_token: [2, 4],
            speaker_count: 8,
            speaker_scale: 1.0,
            noise_scale: 0.05,
            seed: 1234,
        }
    }
}

impl CodecConfig {
    pub fn content_dim(&self) -> usize {
        self.latent_dim.saturating_sub(self.speaker_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return err(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        let [lo, hi] = self.frames_per_token;
        if lo == 0 || lo > hi {
            return err(format!("frames_per_token must satisfy 1 <= min <= max, got [{lo}, {hi}]"));
        }
        if self.speaker_count == 0 {
            return err("speaker_count must be >= 1".into());
        }
        if self.speaker_dim == 0 || self.content_dim() == 0 {
            return err(format!(
                "latent_dim {} must leave room for both content and {} speaker dims",
                self.latent_dim, self.speaker_dim
            ));
        }
        if !(self.speaker_scale >= 0.0) || !(self.noise_scale >= 0.0) {
            return err("speaker_scale and noise_scale must be non-negative".into());
        }
        Ok(())
    }

    /// Rejection threshold for codeword separation. Strictly above `4·noise_scale`
    /// and never below half the expected Gaussian spread.
    fn separation_floor(&self) -> f64 {
        (4.0 * self.noise_scale).max(0.5 * (self.content_dim() as f64).sqrt())
    }
}

/// Token ids in `[0, vocab_size)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        TokenSequence(self.0.iter().chain(&other.0).copied().collect())
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// `T × D` latent frames, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    dim: usize,
    data: Vec<f32>,
}

impl LatentSequence {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::dim("LatentSequence", format!("multiple of {dim}"), data.len()));
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn slice(&self, start: usize, len: usize) -> LatentSequence {
        LatentSequence {
            dim: self.dim,
            data: self.data[start * self.dim..(start + len) * self.dim].to_vec(),
        }
    }

    pub fn concat(&self, other: &LatentSequence) -> Result<LatentSequence> {
        if self.dim != other.dim {
            return Err(Error::dim("LatentSequence::concat", self.dim, other.dim));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(LatentSequence { dim: self.dim, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Unit-norm speaker direction in the speaker subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerVector(Vec<f32>);

impl SpeakerVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        let n = values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("speaker vector norm {n} != 1")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

pub struct LatentCodec {
    config: CodecConfig,
    /// `vocab × content_dim`
    codewords: Vec<Vec<f64>>,
    speakers: Vec<SpeakerVector>,
}

impl LatentCodec {
    pub fn new(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let cd = config.content_dim();
        let floor = config.separation_floor();
        let mut rng = rng::stream_rng(config.seed, &[stream::CODEWORDS]);
        let mut codewords: Vec<Vec<f64>> = Vec::with_capacity(config.vocab_size);
        let mut attempts = 0usize;
        while codewords.len() < config.vocab_size {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(format!(
                    "cannot place {} codewords {floor:.3} apart in {cd} dimensions",
                    config.vocab_size
                )));
            }
            let cand: Vec<f64> = (0..cd).map(|_| StandardNormal.sample(&mut rng)).collect();
            if codewords.iter().all(|c| dist(c, &cand) > floor) {
                codewords.push(cand);
            }
        }

        let mut rng = rng::stream_rng(config.seed, &[stream::SPEAKERS]);
        let speakers = (0..config.speaker_count)
            .map(|_| {
                let v: Vec<f64> = (0..config.speaker_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = norm(&v).max(1e-12);
                let unit: Vec<f32> = v.iter().map(|x| (x / n) as f32).collect();
                // renormalize in f32 so the unit-norm invariant holds at storage precision
                let n32 = unit.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                SpeakerVector(unit.iter().map(|x| (*x as f64 / n32) as f32).collect())
            })
            .collect();
        Ok(Self {
            config,
            codewords,
            speakers,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn codeword(&self, token: u32) -> &[f64] {
        &self.codewords[token as usize]
    }

    pub fn speaker(&self, id: usize) -> Result<&SpeakerVector> {
        self.speakers
            .get(id)
            .ok_or_else(|| Error::Validation(format!("speaker {id} >= {}", self.config.speaker_count)))
    }

    /// Smallest distance between any two codewords.
    pub fn min_codeword_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.codewords.len() {
            for j in i + 1..self.codewords.len() {
                best = best.min(dist(&self.codewords[i], &self.codewords[j]));
            }
        }
        best
    }

    pub fn encode(&self, tokens: &TokenSequence, speaker: usize, durations: &[usize], seed: u64) -> Result<LatentSequence> {
        if tokens.is_empty() {
            return Err(Error::Validation("cannot encode an empty token sequence".into()));
        }
        if durations.len() != tokens.len() {
            return Err(Error::Validation(format!(
                "{} durations for {} tokens",
                durations.len(),
                tokens.len()
            )));
        }
        let [lo, hi] = self.config.frames_per_token;
        if let Some(d) = durations.iter().find(|&&d| d < lo || d > hi) {
            return Err(Error::Validation(format!("duration {d} outside [{lo}, {hi}]")));
        }
        if let Some(t) = tokens.ids().iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Validation(format!("token {t} >= vocab {}", self.config.vocab_size)));
        }
        let spk = self.speaker(speaker)?;
        let d = self.config.latent_dim;
        let cd = self.config.content_dim();
        let total: usize = durations.iter().sum();
        let mut rng = rng::stream_rng(seed, &[stream::ENCODE_NOISE]);
        let mut data = Vec::with_capacity(total * d);
        for (&tok, &dur) in tokens.ids().iter().zip(durations) {
            let cw = self.codeword(tok);
            for _ in 0..dur {
                let eta = unit_ball_sample(&mut rng, d);
                for j in 0..d {
                    let base = if j < cd {
                        cw[j]
                    } else {
                        self.config.speaker_scale * spk.0[j - cd] as f64
                    };
                    data.push((base + self.config.noise_scale * eta[j]) as f32);
                }
            }
        }
        LatentSequence::new(d, data)
    }

    /// Nearest codeword of every frame, before run collapse.
    pub fn frame_labels(&self, latents: &LatentSequence) -> Vec<u32> {
        let cd = self.config.content_dim();
        (0..latents.frames())
            .map(|i| {
                let f = &latents.frame(i)[..cd];
                let mut best = (f64::INFINITY, 0u32);
                for (k, cw) in self.codewords.iter().enumerate() {
                    let d2: f64 = f.iter().zip(cw).map(|(&a, &b)| (a as f64 - b).powi(2)).sum();
                    if d2 < best.0 {
                        best = (d2, k as u32);
                    }
                }
                best.1
            })
            .collect()
    }

    pub fn decode(&self, latents: &LatentSequence) -> TokenSequence {
        let mut out: Vec<u32> = Vec::new();
        for l in self.frame_labels(latents) {
            if out.last() != Some(&l) {
                out.push(l);
            }
        }
        TokenSequence(out)
    }

    /// Decodes `continuation` as the frames that follow `context`: a run that
    /// starts inside `context` and crosses into `continuation` belongs to the
    /// context and is not reported again.
    pub fn decode_continuation(&self, context: &LatentSequence, continuation: &LatentSequence) -> TokenSequence {
        let last = if context.frames() > 0 {
            self.frame_labels(&context.slice(context.frames() - 1, 1)).first().copied()
        } else {
            None
        };
        let mut out: Vec<u32> = Vec::new();
        let mut prev = last;
        for l in self.frame_labels(continuation) {
            if prev != Some(l) {
                out.push(l);
            }
            prev = Some(l);
        }
        TokenSequence(out)
    }

    /// Cosine between the mean speaker-subspace frame and speaker `id`'s vector.
    pub fn speaker_cosine(&self, latents: &LatentSequence, id: usize) -> Result<f64> {
        let spk = self.speaker(id)?;
        let cd = self.config.content_dim();
        let frames = latents.frames().max(1) as f64;
        let mut mean = vec![0.0f64; self.config.speaker_dim];
        for i in 0..latents.frames() {
            for (m, &v) in mean.iter_mut().zip(&latents.frame(i)[cd..]) {
                *m += v as f64 / frames;
            }
        }
        let dot: f64 = mean.iter().zip(spk.values()).map(|(a, &b)| a * b as f64).sum();
        Ok(dot / norm(&mean).max(1e-12))
    }
}

/// Levenshtein distance.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `edit_distance(reference, hypothesis) / |reference|`.
pub fn token_error_rate(reference: &TokenSequence, hypothesis: &TokenSequence) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Validation("token error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference.ids(), hypothesis.ids()) as f64 / reference.len() as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Uniform sample from the closed unit ball in `d` dimensions.
fn unit_ball_sample<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&g).max(1e-300);
    let r: f64 = rng.random::<f64>().powf(1.0 / d as f64);
    g.into_iter().map(|x| x / n * r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quiet() -> CodecConfig {
        CodecConfig {
            noise_scale: 0.0,
            speaker_scale: 0.0,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn single_token_zero_noise_repeats_codeword() {
        let codec = LatentCodec::new(quiet()).unwrap();
        let l = codec.encode(&TokenSequence(vec![3]), 0, &[2], 9).unwrap();
        assert_eq!(l.frames(), 2);
        assert_eq!(l.frame(0), l.frame(1));
        let cd = codec.config().content_dim();
        for (a, b) in l.frame(0)[..cd].iter().zip(codec.codeword(3)) {
            assert_eq!(*a, *b as f32);
        }
        assert!(l.frame(0)[cd..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frame_distance_equals_codeword_distance() {
        let codec = LatentCodec::new(quiet()).unwrap();
        let l = codec.encode(&TokenSequence(vec![1, 5]), 2, &[2, 2], 0).unwrap();
        let fd: f64 = l
            .frame(0)
            .iter()
            .zip(l.frame(2))
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((fd - dist(codec.codeword(1), codec.codeword(5))).abs() < 1e-5);
    }

    #[test]
    fn seeded_encoding_is_bit_identical() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let t = TokenSequence(vec![0, 4, 2]);
        let a = codec.encode(&t, 1, &[2, 3, 4], 42).unwrap();
        let b = codec.encode(&t, 1, &[2, 3, 4], 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, codec.encode(&t, 1, &[2, 3, 4], 43).unwrap());
    }

    #[test]
    fn out_of_range_duration_is_rejected() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        assert!(matches!(
            codec.encode(&TokenSequence(vec![1]), 0, &[5], 0),
            Err(Error::Validation(_))
        ));
        assert!(codec.encode(&TokenSequence(vec![1]), 99, &[2], 0).is_err());
    }

    #[test]
    fn zero_latents_collapse_to_one_token() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let decoded = codec.decode(&LatentSequence::zeros(7, 16));
        assert_eq!(decoded.len(), 1);
    }

    #[test]
    fn codewords_are_separated_beyond_four_noise_scales() {
        let cfg = CodecConfig {
            noise_scale: 0.5,
            ..CodecConfig::default()
        };
        let codec = LatentCodec::new(cfg).unwrap();
        assert!(codec.min_codeword_distance() > 4.0 * 0.5);
    }

    #[test]
    fn speaker_vectors_are_unit_norm() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        for i in 0..8 {
            let n: f64 = codec.speaker(i).unwrap().values().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn speaker_cosine_of_clean_encoding_is_one() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let l = codec.encode(&TokenSequence(vec![1, 2, 3]), 5, &[2, 2, 2], 1).unwrap();
        assert!(codec.speaker_cosine(&l, 5).unwrap() > 0.99);
    }

    #[test]
    fn ter_examples() {
        let r = TokenSequence(vec![1, 2, 3]);
        assert_eq!(token_error_rate(&r, &r).unwrap(), 0.0);
        assert!((token_error_rate(&r, &TokenSequence(vec![1, 3])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // ab -> cde: two substitutions and one insertion
        let t = token_error_rate(&TokenSequence(vec![0, 1]), &TokenSequence(vec![2, 3, 4])).unwrap();
        assert_eq!(t, 1.5);
        assert!(token_error_rate(&TokenSequence(vec![]), &r).is_err());
    }

    #[test]
    fn continuation_decode_skips_run_crossing_the_boundary() {
        let codec = LatentCodec::new(quiet()).unwrap();
        let full = codec.encode(&TokenSequence(vec![1, 2, 3]), 0, &[2, 3, 2], 0).unwrap();
        // cut inside token 2's run
        let ctx = full.slice(0, 3);
        let cont = full.slice(3, 4);
        assert_eq!(codec.decode(&cont).ids(), &[2, 3]);
        assert_eq!(codec.decode_continuation(&ctx, &cont).ids(), &[3]);
    }

    fn seq_strategy() -> impl Strategy<Value = (Vec<u32>, Vec<usize>)> {
        prop::collection::vec((0u32..16, 2usize..=4), 1..20).prop_map(|v| {
            let mut toks: Vec<u32> = Vec::new();
            let mut durs = Vec::new();
            for (t, d) in v {
                if toks.last() != Some(&t) {
                    toks.push(t);
                    durs.push(d);
                }
            }
            (toks, durs)
        })
    }

    proptest! {
        #[test]
        fn round_trip_without_noise((toks, durs) in seq_strategy(), spk in 0usize..8, seed in any::<u64>()) {
            let codec = LatentCodec::new(CodecConfig { noise_scale: 0.0, ..CodecConfig::default() }).unwrap();
            let t = TokenSequence(toks);
            let l = codec.encode(&t, spk, &durs, seed).unwrap();
            prop_assert_eq!(codec.decode(&l), t);
        }

        #[test]
        fn edit_distance_is_a_metric(a in prop::collection::vec(0u32..4, 0..8),
                                     b in prop::collection::vec(0u32..4, 0..8),
                                     c in prop::collection::vec(0u32..4, 0..8)) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }
    }
}
