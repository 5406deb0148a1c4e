//! Runs every example end to end so they cannot rot.

#[path = "../examples/codec_round_trip.rs"]
mod codec_round_trip;
#[path = "../examples/ctc_oracle.rs"]
mod ctc_oracle;
#[path = "../examples/gradient_check.rs"]
mod gradient_check;
#[path = "../examples/sampler_oracle.rs"]
mod sampler_oracle;
#[path = "../examples/semantic_alignment.rs"]
mod semantic_alignment;
#[path = "../examples/train_tiny.rs"]
mod train_tiny;
#[path = "../examples/verify_suite.rs"]
mod verify_suite;
#[path = "../examples/zero_shot.rs"]
mod zero_shot;

#[test]
fn codec_round_trip_example() {
    codec_round_trip::main().unwrap();
}

#[test]
fn ctc_oracle_example() {
    ctc_oracle::main().unwrap();
}

#[test]
fn gradient_check_example() {
    gradient_check::main().unwrap();
}

#[test]
fn sampler_oracle_example() {
    sampler_oracle::main().unwrap();
}

#[test]
fn semantic_alignment_example() {
    semantic_alignment::main().unwrap();
}

#[test]
fn train_tiny_example() {
    train_tiny::main().unwrap();
}

#[test]
fn verify_suite_example() {
    verify_suite::main();
}

#[test]
fn zero_shot_example() {
    zero_shot::main().unwrap();
}
