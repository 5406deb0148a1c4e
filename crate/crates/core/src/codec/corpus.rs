use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CodecConfig, LatentCodec, LatentSequence, TokenSequence};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

const MAGIC: &[u8; 8] = b"ATTSDSET";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: u32,
    pub speaker: u32,
    pub tokens: TokenSequence,
    pub latents: LatentSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CodecConfig,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.latents.frames()).sum()
    }

    pub fn get(&self, id: u32) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

/// JSON sidecar stored next to every dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub format_version: u32,
    pub codec: CodecConfig,
    pub utterances: usize,
    pub frames: usize,
}

/// Random utterances without immediate token repeats. Utterance `i` draws from
/// its own stream, so the result depends only on `(seed, i)`.
pub fn generate_corpus(
    codec: &LatentCodec,
    utterance_count: usize,
    length_range: [usize; 2],
    first_id: u32,
    seed: u64,
) -> Result<Corpus> {
    let [lo, hi] = length_range;
    if lo == 0 || lo > hi {
        return Err(Error::Validation(format!("length range must satisfy 1 <= min <= max, got [{lo}, {hi}]")));
    }
    let cfg = codec.config();
    let [dlo, dhi] = cfg.frames_per_token;
    let mut utterances = Vec::with_capacity(utterance_count);
    for i in 0..utterance_count {
        let id = first_id + i as u32;
        let mut r = rng::stream_rng(seed, &[stream::UTTERANCE, id as u64]);
        let len = r.random_range(lo..=hi);
        let speaker = r.random_range(0..cfg.speaker_count);
        let mut ids: Vec<u32> = Vec::with_capacity(len);
        while ids.len() < len {
            let t = r.random_range(0..cfg.vocab_size as u32);
            if ids.last() != Some(&t) {
                ids.push(t);
            }
        }
        let durations: Vec<usize> = (0..len).map(|_| r.random_range(dlo..=dhi)).collect();
        let tokens = TokenSequence(ids);
        let noise_seed = rng::derive(seed, &[stream::ENCODE_NOISE, id as u64]);
        let latents = codec.encode(&tokens, speaker, &durations, noise_seed)?;
        utterances.push(Utterance {
            id,
            speaker: speaker as u32,
            tokens,
            latents,
        });
    }
    Ok(Corpus {
        config: cfg.clone(),
        utterances,
    })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the binary dataset and its JSON sidecar.
///
/// Layout (little endian): magic, `u32` version, `u32` count, then per record
/// `u32` utterance id, `u32` speaker id, `u32` token count, `u32` frame count,
/// token ids as `u32`, frames as row-major `f32`.
pub fn write_dataset(path: &Path, corpus: &Corpus) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&FORMAT_VERSION.to_le_bytes())?;
    put(&(corpus.utterances.len() as u32).to_le_bytes())?;
    for u in &corpus.utterances {
        if u.latents.dim() != corpus.config.latent_dim {
            return Err(Error::Validation(format!(
                "utterance {} has latent dim {} != {}",
                u.id,
                u.latents.dim(),
                corpus.config.latent_dim
            )));
        }
        put(&u.id.to_le_bytes())?;
        put(&u.speaker.to_le_bytes())?;
        put(&(u.tokens.len() as u32).to_le_bytes())?;
        put(&(u.latents.frames() as u32).to_le_bytes())?;
        for t in u.tokens.ids() {
            put(&t.to_le_bytes())?;
        }
        for v in u.latents.data() {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let sidecar = DatasetSidecar {
        format_version: FORMAT_VERSION,
        codec: corpus.config.clone(),
        utterances: corpus.utterances.len(),
        frames: corpus.total_frames(),
    };
    let sp = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&sp, json + "\n").map_err(|e| Error::io(sp, e))
}

pub fn read_dataset(path: &Path) -> Result<Corpus> {
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let sidecar: DatasetSidecar = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: sp.clone(),
        reason: e.to_string(),
    })?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut u32_at = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = u32_at()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32_at()? as usize;
    if count != sidecar.utterances {
        return Err(bad(format!("{count} records but sidecar says {}", sidecar.utterances)));
    }
    let dim = sidecar.codec.latent_dim;
    let mut utterances = Vec::with_capacity(count);
    for _ in 0..count {
        let id = u32_at()?;
        let speaker = u32_at()?;
        let ntok = u32_at()? as usize;
        let nframes = u32_at()? as usize;
        let ids = (0..ntok).map(|_| u32_at()).collect::<Result<Vec<u32>>>()?;
        let data = (0..nframes * dim)
            .map(|_| u32_at().map(f32::from_bits))
            .collect::<Result<Vec<f32>>>()?;
        utterances.push(Utterance {
            id,
            speaker,
            tokens: TokenSequence(ids),
            latents: LatentSequence::new(dim, data)?,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after last record".into()));
    }
    Ok(Corpus {
        config: sidecar.codec,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codec() -> LatentCodec {
        LatentCodec::new(CodecConfig::default()).unwrap()
    }

    #[test]
    fn same_seed_same_corpus() {
        let c = codec();
        let a = generate_corpus(&c, 20, [8, 24], 0, 5).unwrap();
        let b = generate_corpus(&c, 20, [8, 24], 0, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus() {
        let c = codec();
        assert!(generate_corpus(&c, 0, [8, 24], 0, 5).unwrap().utterances.is_empty());
    }

    #[test]
    fn no_immediate_repeats_and_lengths_in_range() {
        let c = codec();
        let corpus = generate_corpus(&c, 200, [3, 6], 0, 1).unwrap();
        for u in &corpus.utterances {
            assert!((3..=6).contains(&u.tokens.len()));
            assert!(u.tokens.ids().windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn length_histogram_covers_full_range() {
        let c = codec();
        let corpus = generate_corpus(&c, 2000, [8, 24], 0, 77).unwrap();
        let mut seen = [0usize; 25];
        for u in &corpus.utterances {
            seen[u.tokens.len()] += 1;
        }
        assert!((8..=24).all(|l| seen[l] > 0), "{seen:?}");
        assert_eq!(seen[..8].iter().sum::<usize>(), 0);
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.atd");
        let corpus = generate_corpus(&codec(), 15, [2, 9], 100, 3).unwrap();
        write_dataset(&p, &corpus).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back, corpus);
        let bytes = fs::read(&p).unwrap();
        write_dataset(&p, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.atd");
        write_dataset(&p, &generate_corpus(&codec(), 3, [2, 3], 0, 3).unwrap()).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_dataset(&p).is_err());
    }
}
