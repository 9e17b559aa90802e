use mars_core::pipeline::*;
use mars_core::Error;
use std::path::Path;

fn setup(dir: &Path, count: usize) -> (RunConfig, DatasetManifest) {
    let mut cfg = RunConfig::desk_scale();
    cfg.train.tokenizer_steps = 12;
    cfg.train.ar_steps = 12;
    cfg.train.checkpoint_every = 5;
    cfg.griffin_lim.iters = 8;
    cfg.metrics.classifier.steps = 50;
    let clip = cfg.data.frames * cfg.stft.hop;
    let mpath = write_synthetic_dataset(&dir.join("data"), count, 0.5, 16000, 4).unwrap();
    let (m, _) = ingest(&mpath, &cfg.data, clip).unwrap();
    (cfg, m)
}

#[test]
fn stages_run_in_order_and_resume_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, m) = setup(dir.path(), 8);
    let out = dir.path().join("run");

    assert_eq!(run_evaluate(&m, &cfg, &out, EvalMode::Reconstruction).unwrap_err().category(), "missing-prerequisite");
    preprocess(&m, &cfg, &out).unwrap();
    let e = run_train_ar(&m, &cfg, &out, None).unwrap_err();
    assert!(e.to_string().contains("tokenizer checkpoint required"), "{e}");

    let full = run_train_tokenizer(&m, &cfg, &out, None).unwrap();
    assert_eq!((full.start_step, full.end_step), (0, 12));
    let uninterrupted = std::fs::read(&full.checkpoint).unwrap();

    let out2 = dir.path().join("run2");
    preprocess(&m, &cfg, &out2).unwrap();
    let part = run_train_tokenizer(&m, &cfg, &out2, Some(7)).unwrap();
    assert_eq!(part.end_step, 7);
    let rest = run_train_tokenizer(&m, &cfg, &out2, None).unwrap();
    assert_eq!((rest.start_step, rest.end_step), (7, 12));
    assert_eq!(std::fs::read(&rest.checkpoint).unwrap(), uninterrupted);
    assert!(out.join("checkpoints/tokenizer-000005.ckpt").exists());

    let ar = run_train_ar(&m, &cfg, &out, None).unwrap();
    assert!(ar.last_loss.unwrap() < ar.first_loss.unwrap());
    assert!(out.join("tokens").read_dir().unwrap().count() > 0);

    let a = run_generate(&cfg, &out, 2, "guitar", 7).unwrap();
    let first: Vec<Vec<u8>> = a.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let b = run_generate(&cfg, &out, 2, "guitar", 7).unwrap();
    assert_eq!(a, b);
    for (p, bytes) in b.iter().zip(&first) {
        assert_eq!(&std::fs::read(p).unwrap(), bytes);
    }
    let meta: GenerationMeta =
        serde_json::from_str(&std::fs::read_to_string(a[1].with_extension("json")).unwrap()).unwrap();
    assert_eq!((meta.clip_seed, meta.samples), (8, 8192));
    assert_eq!(meta.config_hash, cfg.hash_hex());
    let e = run_generate(&cfg, &out, 1, "kazoo", 0).unwrap_err();
    assert!(matches!(e, Error::InvalidInput(_)) && e.to_string().contains("vocal"));

    let rec = run_evaluate(&m, &cfg, &out, EvalMode::Reconstruction).unwrap();
    assert!(rec.mse.as_ref().unwrap().value > 0.0);
    assert_eq!(rec.mse.as_ref().unwrap().reference_count, 2);
    let gen = run_evaluate(&m, &cfg, &out, EvalMode::Generation).unwrap();
    assert_eq!(gen.extra["error_matching"], "nearest_neighbor");
    let text = std::fs::read_to_string(out.join("reports/generation.txt")).unwrap();
    assert!(text.contains("fad.provenance = provider=mel_stats"));

    let mut other = cfg.clone();
    other.train.ar_steps = 13;
    assert_eq!(run_generate(&other, &out, 1, "guitar", 0).unwrap_err().category(), "config");
}

#[test]
fn self_comparison_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, m) = setup(dir.path(), 8);
    let clip = cfg.data.frames * cfg.stft.hop;
    let waves: Vec<_> = m.records.iter().map(|r| load_clip(&m, r, &cfg.data, clip).unwrap()).collect();
    let labelled = LabelledClips {
        waves: waves.clone(),
        pitch: m.records.iter().map(|r| r.pitch).collect(),
        instrument: m.records.iter().map(|r| m.instrument_index(r, &cfg.data)).collect(),
    };
    let r = evaluate_sets(&waves, &waves, true, &labelled, &cfg, "identity").unwrap();
    for (name, v) in [
        ("mse", &r.mse),
        ("mae", &r.mae),
        ("fad", &r.fad),
        ("pkid", &r.pkid),
        ("ikid", &r.ikid),
        ("ndb", &r.ndb_over_k),
    ] {
        assert_eq!(v.as_ref().unwrap().value, 0.0, "{name}");
    }
    assert_eq!(r.fad.as_ref().unwrap().reference_count, 8);
    let e = evaluate_sets(&waves[..1], &waves[..1], true, &labelled, &cfg, "x").unwrap_err();
    assert!(e.to_string().contains("insufficient samples"));
}
