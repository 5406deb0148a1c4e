//! The semantic aligner maps a token sequence plus `N` mask slots to `N`
//! text-aligned feature frames, optionally through a vector quantizer.

use architts::aligner::AlignerConfig;
use architts::codec::TokenSequence;
use architts::model::{ArchiTts, ModelConfig};
use architts::numerics::Tape;

pub fn main() -> architts::Result<()> {
    let tokens = TokenSequence(vec![4, 9, 2, 11]);
    for vq_enabled in [false, true] {
        let cfg = ModelConfig {
            aligner: AlignerConfig {
                vq_enabled,
                ..ModelConfig::default().aligner
            },
            ..ModelConfig::default()
        };
        let (model, params) = ArchiTts::build::<f32>(&cfg, 0)?;
        let mut tape = Tape::frozen(&params);
        let out = model.semantic(&mut tape, &tokens, 10)?;
        let (rows, cols) = tape.shape(out.z);
        println!("vq {vq_enabled}: z is {rows}x{cols}");
        if let Some(idx) = &out.vq_indices {
            println!("  codebook indices {idx:?}");
        }
    }
    let model = ArchiTts::build::<f32>(&ModelConfig::default(), 0)?.0;
    let pos = model.aligner.positions(tokens.len(), 6);
    let fmt: Vec<String> = pos.iter().map(|p| format!("{p:.1}")).collect();
    println!("rotary positions [start, text.., end, frames..]: {}", fmt.join(" "));
    Ok(())
}
