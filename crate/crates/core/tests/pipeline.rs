use std::path::{Path, PathBuf};

use dima_core::data::{load_volume, DatasetManifest};
use dima_core::metrics::MetricsReport;
use dima_core::pipeline::*;
use ndarray::Array3;

fn tiny_config(root: &Path) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json");
    let mut cfg = RunConfig::load(&path, &[]).unwrap();
    cfg.dataset_manifest = root.join("phantom/manifest.json");
    cfg.output_dir = root.join("out");
    cfg
}

fn read_dir_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn overrides_reach_nested_fields_and_bad_values_are_config_errors() {
    let text = r#"{"dataset_manifest": "m.json"}"#;
    let o = [
        parse_override("corrector.trainer.max_epochs=7").unwrap(),
        parse_override("seed=42").unwrap(),
    ];
    let cfg = RunConfig::from_json(text, &o).unwrap();
    assert_eq!(cfg.corrector.trainer.max_epochs, 7);
    assert_eq!(cfg.seed, 42);
    for bad in [
        "schedule.timesteps=0",
        "ddpm.model.time_conditioned=false",
        "plane=oblique",
        "seed.x=1",
    ] {
        let err = RunConfig::from_json(text, &[parse_override(bad).unwrap()]).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{bad}");
    }
    assert_eq!(parse_override("novalue").unwrap_err().exit_code(), 2);
    assert_eq!(
        RunConfig::load(Path::new("/nonexistent.json"), &[])
            .unwrap_err()
            .exit_code(),
        2
    );
}

#[test]
fn config_hash_tracks_content() {
    let text = r#"{"dataset_manifest": "m.json"}"#;
    let a = RunConfig::from_json(text, &[]).unwrap();
    let b = RunConfig::from_json(text, &[parse_override("seed=1").unwrap()]).unwrap();
    assert_eq!(a.hash(), RunConfig::from_json(text, &[]).unwrap().hash());
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn null_artifact_and_impulse_response() {
    let v = Array3::from_shape_fn((8, 24, 8), |(x, y, z)| {
        ((x * 7 + y * 3 + z) % 11) as f32 / 11.0
    });
    assert_eq!(
        gaussian_blur(&apply_ghosting(&v, 6, &[0.0, 0.0, 0.0]), 0.0),
        v
    );

    let mut imp = Array3::<f32>::zeros((8, 24, 8));
    imp[[4, 12, 3]] = 1.0;
    let g = apply_ghosting(&imp, 6, &[0.25, 0.25]);
    let spikes: Vec<(usize, f32)> = g
        .indexed_iter()
        .filter(|(_, &v)| v != 0.0)
        .map(|((_, y, _), &v)| (y, v))
        .collect();
    assert_eq!(spikes, vec![(6, 0.25), (12, 1.0), (18, 0.25)]);
    assert_eq!(ghost_offsets(4, 5), vec![5, -5, 10, -10]);
}

#[test]
fn phantom_corpus_is_seeded() {
    let spec = PhantomSpec {
        size: [16, 16, 8],
        corpus_size: 4,
        ..Default::default()
    };
    let rng = dima_core::RngStream::new(9, 0);
    let a = generate_phantom(&spec, &rng).unwrap();
    let b = generate_phantom(&spec, &rng).unwrap();
    let c = generate_phantom(&spec, &dima_core::RngStream::new(10, 0)).unwrap();
    assert_eq!(a.len(), 4);
    for (pa, pb) in a.iter().zip(&b) {
        assert_eq!(pa.len(), 2);
        for (sa, sb) in pa.iter().zip(pb) {
            assert_eq!(sa.volume, sb.volume);
        }
        assert!(pa[0].degradation.is_none());
        assert!(pa[1].degradation.is_some());
    }
    assert_ne!(a[0][0].volume, c[0][0].volume);
    assert!(generate_phantom(
        &PhantomSpec {
            ghost_amplitude: 0.95,
            ..spec
        },
        &rng
    )
    .is_err());
}

#[test]
fn report_tables_group_by_source() {
    use dima_core::data::Plane;
    use dima_core::metrics::MetricRecord;
    let rec = |p: &str, s: f64| MetricRecord {
        patient: p.into(),
        plane: Plane::Transversal,
        slice: 0,
        ssim: s,
        nmse: 0.1,
        psnr: 30.0,
    };
    let a = MetricsReport::new(vec![rec("A", 0.5), rec("B", 0.7)]);
    let b = MetricsReport::new(vec![rec("A", 0.9)]);
    let (summary, plot) = report_tables(
        &[("deg".into(), a), ("cor".into(), b)],
        &[Grouping::Source, Grouping::Patient],
    );
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(
        rows[0],
        "group,n,ssim_mean,ssim_std,nmse_mean,nmse_std,psnr_mean,psnr_std"
    );
    assert!(rows[1].starts_with("deg,2,0.6,"));
    assert!(rows[2].starts_with("cor,1,0.9,0,"));
    assert_eq!(rows.len(), 1 + 2 + 3);
    assert_eq!(plot.lines().count(), 1 + 3 * 3 * 2);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path());

    // nothing trained yet
    assert_eq!(run(Command::Simulate, &cfg).unwrap_err().exit_code(), 3);
    assert_eq!(run(Command::TrainDdpm, &cfg).unwrap_err().exit_code(), 3);

    run(Command::Phantom, &cfg).unwrap();
    let manifest = DatasetManifest::load(&cfg.dataset_manifest).unwrap();
    assert_eq!(manifest.patients.len(), 12);
    let first = root
        .path()
        .join("phantom")
        .join(&manifest.patients[0].scans[0].path);
    assert_eq!(load_volume(&first).unwrap().voxels.dim(), (16, 16, 8));

    for c in [
        Command::TrainDdpm,
        Command::Simulate,
        Command::TrainCorrector,
        Command::Evaluate,
        Command::Report,
    ] {
        run(c, &cfg).unwrap_or_else(|e| panic!("{}: {e}", c.as_str()));
    }
    let out = &cfg.output_dir;
    assert!(read_dir_names(&out.join(STAGE_DDPM)).contains(&CHECKPOINT_FILE.to_string()));
    assert!(read_dir_names(&out.join(STAGE_SIMULATE)).contains(&PAIRS_FILE.to_string()));
    assert!(read_dir_names(out).iter().all(|n| !n.ends_with(".partial")));
    let eval = out.join(STAGE_EVALUATE);
    let degraded = MetricsReport::read(&eval.join("degraded.csv")).unwrap();
    // 3 test patients, 4 slices each
    assert_eq!(degraded.records.len(), 12);
    let summary = std::fs::read_to_string(out.join(STAGE_REPORT).join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("corrected,")));

    for stage in [
        STAGE_DDPM,
        STAGE_SIMULATE,
        STAGE_CORRECTOR,
        STAGE_EVALUATE,
        STAGE_REPORT,
    ] {
        let m = verify_stage(&out.join(stage), &[]).unwrap();
        assert_eq!(m.config_hash, cfg.hash());
    }

    // a changed checkpoint is refused downstream
    let ckpt: PathBuf = out.join(STAGE_CORRECTOR).join(CHECKPOINT_FILE);
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    assert_eq!(run(Command::Evaluate, &cfg).unwrap_err().exit_code(), 3);
}
