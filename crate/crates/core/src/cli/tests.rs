use std::path::Path;

use clap::Parser;

use super::*;
use crate::codec::CodecConfig;
use crate::model::ModelConfig;
use crate::training::TrainingConfig;

fn tiny_config(root: &Path) -> RunConfig {
    RunConfig {
        paths: Paths {
            dataset: root.join("data/train.bin"),
            test_dataset: root.join("data/test.bin"),
            checkpoints: root.join("ckpt"),
            reports: root.join("reports"),
        },
        codec: CodecConfig {
            vocab_size: 5,
            latent_dim: 4,
            speaker_dim: 2,
            speaker_count: 3,
            ..CodecConfig::default()
        },
        corpus: CorpusSettings {
            train_utterances: 12,
            test_utterances: 3,
            length_range: [3, 5],
            seed: 5,
        },
        model: ModelConfig::tiny(8, 1, 1, 1),
        training: TrainingConfig {
            steps: 8,
            batch_size: 2,
            warmup_steps: 1,
            log_every: 1,
            checkpoint_every: 4,
            ..TrainingConfig::default()
        },
        sampler: SamplerSettings::default(),
        bench: BenchSettings::default(),
    }
}

fn plan_args(argv: &[&str]) -> PlanArgs {
    let mut full = vec!["architts", "synth", "--ref-id", "0"];
    full.extend_from_slice(argv);
    match Cli::try_parse_from(full).unwrap().command {
        Command::Synth(a) => a.plan,
        _ => unreachable!(),
    }
}

#[test]
fn flag_overrides_file_overrides_default() {
    let default = RunConfig::default();
    assert_eq!(default.sampler.nfe, 32);
    let file = RunConfig::from_toml("[sampler]\nnfe = 16\ntimeshift = 2.0\n").unwrap();
    assert_eq!((file.sampler.nfe, file.sampler.timeshift, file.sampler.cfg_strength), (16, 2.0, 4.0));
    let flagged = apply_plan(file.clone(), &plan_args(&["--nfe", "8"])).unwrap();
    assert_eq!((flagged.sampler.nfe, flagged.sampler.timeshift), (8, 2.0));
    let untouched = apply_plan(file.clone(), &plan_args(&[])).unwrap();
    assert_eq!(untouched, file);
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [RunConfig::default(), tiny_config(dir.path())] {
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
    let err = RunConfig::from_toml("[sampler]\nnfee = 3\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(exit_code(&err), EXIT_USAGE);
    let err = RunConfig::from_toml("[codec]\nlatent_dim = 8\n").unwrap_err();
    assert!(err.to_string().contains("does not match codec"), "{err}");
}

#[test]
fn report_dir_environment_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "[paths]\nreports = \"from-file\"\n").unwrap();
    std::env::set_var(REPORT_DIR_ENV, "/tmp/from-env");
    let cfg = RunConfig::load(Some(&path));
    std::env::remove_var(REPORT_DIR_ENV);
    assert_eq!(cfg.unwrap().paths.reports, PathBuf::from("/tmp/from-env"));
    assert_eq!(RunConfig::load(Some(&path)).unwrap().paths.reports, PathBuf::from("from-file"));
    let err = RunConfig::load(Some(&dir.path().join("missing.toml"))).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_IO);
}

#[test]
fn paper_plan_flags_parse() {
    let a = plan_args(&["--nfe", "32", "--cfg", "4.0", "--timeshift", "3.0", "--sharing-ratio", "0.75"]);
    let cfg = apply_plan(RunConfig::default(), &a).unwrap();
    let plan = cfg.sampler.plan().unwrap();
    assert_eq!((plan.nfe, plan.recompute, plan.cfg_strength, plan.timeshift), (32, 8, 4.0, 3.0));
    assert!(Cli::try_parse_from(["architts", "synth"]).is_err());
    assert!(Cli::try_parse_from(["architts", "frobnicate"]).is_err());
    assert_eq!(exit_code(&Error::Lookup("x".into())), EXIT_USAGE);
    assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_FAILURE);
}

#[test]
fn gen_corpus_is_byte_identical_and_consistent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cb) = (tiny_config(a.path()), tiny_config(b.path()));
    let sa = cmd_gen_corpus(&ca).unwrap();
    cmd_gen_corpus(&cb).unwrap();
    for (x, y) in [(&ca.paths.dataset, &cb.paths.dataset), (&ca.paths.test_dataset, &cb.paths.test_dataset)] {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    let back = read_dataset(&ca.paths.dataset).unwrap();
    assert_eq!(back.config, ca.codec);
    assert_eq!(back.total_frames(), sa.train_frames);
    let test = read_dataset(&ca.paths.test_dataset).unwrap();
    assert_eq!(test.utterances[0].id, 12);

    let mut empty = tiny_config(a.path());
    empty.corpus.train_utterances = 0;
    empty.paths.dataset = a.path().join("empty.bin");
    cmd_gen_corpus(&empty).unwrap();
    assert!(read_dataset(&empty.paths.dataset).unwrap().utterances.is_empty());
}

fn metrics_without_time(path: &Path) -> Vec<MetricsRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut m: MetricsRecord = serde_json::from_str(l).unwrap();
            m.wall_time = 0.0;
            m
        })
        .collect()
}

#[test]
fn train_resume_synth_and_bench_end_to_end() {
    let full_dir = tempfile::tempdir().unwrap();
    let full = tiny_config(full_dir.path());
    cmd_gen_corpus(&full).unwrap();
    cmd_train(&full, false, None, |_| {}).unwrap();

    let split_dir = tempfile::tempdir().unwrap();
    let split = tiny_config(split_dir.path());
    cmd_gen_corpus(&split).unwrap();
    assert_eq!(cmd_train(&split, false, Some(4), |_| {}).unwrap().step, 4);
    assert!(!final_checkpoint(&split).exists());
    assert_eq!(cmd_train(&split, true, None, |_| {}).unwrap().step, 8);

    let m = metrics_without_time(&metrics_path(&full));
    assert_eq!(m.len(), 8);
    assert_eq!(m, metrics_without_time(&metrics_path(&split)));
    assert_eq!(fs::read(final_checkpoint(&full)).unwrap(), fs::read(final_checkpoint(&split)).unwrap());
    for line in fs::read_to_string(metrics_path(&full)).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "lr", "cfm", "dir", "ctc", "total", "grad_norm", "wall_time"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    // synthesis: paper plan flags, determinism, missing utterance
    let synth_args = |out: &str, argv: &[&str]| {
        let mut full_argv = vec!["architts", "synth", "--ref-id", "13", "--out", out];
        full_argv.extend_from_slice(argv);
        match Cli::try_parse_from(full_argv).unwrap().command {
            Command::Synth(a) => a,
            _ => unreachable!(),
        }
    };
    let root = full_dir.path();
    let out1 = root.join("a.lat").to_string_lossy().into_owned();
    let out2 = root.join("b.lat").to_string_lossy().into_owned();
    let a1 = synth_args(&out1, &["--sharing-ratio", "0.75", "--seed", "3"]);
    let a2 = synth_args(&out2, &["--sharing-ratio", "0.75", "--seed", "3"]);
    let r1 = cmd_synth(&apply_plan(full.clone(), &a1.plan).unwrap(), &a1).unwrap();
    let r2 = cmd_synth(&apply_plan(full.clone(), &a2.plan).unwrap(), &a2).unwrap();
    assert_eq!((r1.report.plan.recompute, r1.report.encoder_evals, r1.report.decoder_evals), (8, 16, 64));
    assert_eq!(fs::read(&r1.latents_path).unwrap(), fs::read(&r2.latents_path).unwrap());
    assert!(r1.report.token_error_rate.is_some());
    let lat = read_latents(&r1.latents_path).unwrap();
    assert_eq!(lat.frames(), r1.report.duration.d);
    let written: SynthesisReport = serde_json::from_str(&fs::read_to_string(&r1.report_path).unwrap()).unwrap();
    assert_eq!(written.plan, r1.report.plan);

    let own = synth_args(&out1, &["--gen-tokens", "1,2,3"]);
    let r = cmd_synth(&apply_plan(full.clone(), &own.plan).unwrap(), &own).unwrap();
    assert_eq!(r.report.token_error_rate, None);
    let missing = synth_args(&out1, &[]);
    let missing = SynthArgs { ref_id: 999, ..missing };
    assert!(matches!(cmd_synth(&full, &missing), Err(Error::Lookup(_))));

    // sharing benchmark
    let mut bench_cfg = full.clone();
    bench_cfg.bench.utterances = Some(2);
    let table = cmd_bench_sharing(&bench_cfg, &final_checkpoint(&full), Weights::Ema).unwrap();
    assert_eq!(table.rows.len(), 6);
    for r in &table.rows {
        assert_eq!(r.encoder_evals, 2 * r.recompute);
        assert_eq!(r.decoder_evals, 2 * r.nfe);
    }
    for nfe in [16, 32] {
        let evals: Vec<usize> = table.rows.iter().filter(|r| r.nfe == nfe).map(|r| r.encoder_evals).collect();
        assert!(evals.windows(2).all(|w| w[0] > w[1]), "{evals:?}");
    }
    let (model, params) = load_weights(&final_checkpoint(&full), Weights::Ema).unwrap();
    let codec = LatentCodec::new(full.codec.clone()).unwrap();
    let test = read_dataset(&full.paths.test_dataset).unwrap();
    let plain = evaluate_continuations(&model, &params, &codec, &test.utterances[..2], &SamplerPlan { nfe: 16, ..full.sampler.plan().unwrap() }.with_sharing_ratio(0.0).unwrap(), 0.3).unwrap();
    let row0 = &table.rows[0];
    assert_eq!((row0.ratio, row0.nfe), (0.0, 16));
    assert_eq!((row0.token_error_rate, row0.speaker_cosine), (plain.ter, plain.speaker_cosine));
    let csv = fs::read_to_string(full.paths.reports.join("bench_sharing.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), BenchTable::CSV_HEADER);
    assert_eq!(csv.lines().count(), 7);
    let mut empty = bench_cfg.clone();
    empty.bench.utterances = Some(0);
    assert!(matches!(cmd_bench_sharing(&empty, &final_checkpoint(&full), Weights::Ema), Err(Error::Validation(_))));
}

#[test]
fn verify_passes_and_catches_an_injected_ctc_fault() {
    let report = verify::run_verify(3);
    assert!(report.passed, "{:#?}", report.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>());
    let broken = verify::run_verify_with(3, verify::off_by_one_ctc_loss);
    assert!(!broken.passed);
    let ctc = broken.checks.iter().find(|c| c.name == "ctc_oracle").unwrap();
    assert!(!ctc.passed);
    let seed = ctc.failing_seed.expect("failing seed reported");
    // the reported seed reproduces the failure
    let inst = verify::ctc_oracle_instance(seed);
    let brute = crate::ctc::ctc_brute_force(&inst).unwrap();
    let bad = verify::off_by_one_ctc_loss(&inst);
    assert!(bad.map_or(true, |l| (l - brute).abs() > 1e-6));
    assert!(broken.checks.iter().filter(|c| c.name != "ctc_oracle").all(|c| c.passed));
}
