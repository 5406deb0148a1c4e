//! Synthetic codec: encode tokens to latent frames, decode them back, and
//! score a corrupted hypothesis with the token error rate.

use architts::codec::{generate_corpus, read_dataset, token_error_rate, write_dataset, CodecConfig, LatentCodec, TokenSequence};

pub fn main() -> architts::Result<()> {
    let codec = LatentCodec::new(CodecConfig::default())?;
    println!(
        "vocab {}, latent dim {}, min codeword distance {:.3}",
        codec.config().vocab_size,
        codec.config().latent_dim,
        codec.min_codeword_distance()
    );

    let tokens = TokenSequence(vec![3, 7, 1, 12, 5]);
    let latents = codec.encode(&tokens, 2, &[2, 4, 3, 2, 3], 42)?;
    let decoded = codec.decode(&latents);
    println!("{} frames, decoded {:?}", latents.frames(), decoded.ids());
    assert_eq!(decoded, tokens);
    println!("speaker cosine vs speaker 2: {:.4}", codec.speaker_cosine(&latents, 2)?);

    let hyp = TokenSequence(vec![3, 1, 12, 5, 9]);
    println!("TER of {:?}: {:.3}", hyp.ids(), token_error_rate(&tokens, &hyp)?);

    let corpus = generate_corpus(&codec, 50, [8, 24], 0, 1)?;
    let dir = std::env::temp_dir().join(format!("architts-codec-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| architts::Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("corpus.bin");
    write_dataset(&path, &corpus)?;
    let back = read_dataset(&path)?;
    assert_eq!(back, corpus);
    println!("wrote and re-read {} utterances ({} frames)", back.utterances.len(), back.total_frames());
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
