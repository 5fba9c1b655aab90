use std::path::PathBuf;

use memotion::checkpoint::load_checkpoint;
use memotion::dataset::TaskHead;
use memotion::models::Architecture;
use memotion::pipeline::{
    prepare, rerun_manifest, run_train, PipelineError, RunManifest, RunPaths, TrainRequest,
};
use memotion::synth::{synthetic_corpus, SyntheticConfig};
use memotion::training::evaluate;

fn fixture(dir: &std::path::Path, records: usize) -> (PathBuf, PathBuf) {
    synthetic_corpus(&SyntheticConfig {
        records,
        image_dim: 16,
        seed: 3,
        ..SyntheticConfig::default()
    })
    .write_to(dir)
    .unwrap()
}

fn request(corpus: PathBuf, images: PathBuf) -> TrainRequest {
    let mut req = TrainRequest::new(corpus, Architecture::Mnn1, TaskHead::A, 11);
    req.image_embeddings = Some(images);
    req.model.image_dim = 16;
    req.model.d_semantic = 12;
    req.model.lstm_hidden = 8;
    req.model.image_proj = 8;
    req.model.dense_hidden = 8;
    req.model.seq_len = 12;
    req.train.epochs = 3;
    req.train.batch_size = 8;
    req
}

#[test]
fn saved_model_scores_its_reported_dev_f1() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, images) = fixture(dir.path(), 80);
    let req = request(corpus, images);
    let paths = RunPaths::beside(dir.path().join("m.mmck"));
    let run = run_train(&req, &paths, |_| {}).unwrap();

    let data = prepare(&req).unwrap();
    let from_disk = load_checkpoint(&paths.checkpoint).unwrap();
    let live = evaluate(&run.model, &data.dev).unwrap();
    let loaded = evaluate(&from_disk, &data.dev).unwrap();
    assert_eq!(live.macro_f1, run.report.best_dev_macro_f1());
    assert_eq!(loaded.macro_f1, live.macro_f1);
    assert_eq!(loaded.micro_f1, run.report.best_dev_micro_f1());
}

#[test]
fn manifest_round_trips_and_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, images) = fixture(dir.path(), 40);
    let req = request(corpus.clone(), images);
    let paths = RunPaths::beside(dir.path().join("m.mmck"));
    let run = run_train(&req, &paths, |_| {}).unwrap();

    let text = run.manifest.to_json();
    let parsed = RunManifest::from_json(&text).unwrap();
    assert_eq!(parsed, run.manifest);
    assert_eq!(RunManifest::load(&paths.manifest).unwrap(), run.manifest);
    assert_eq!(parsed.to_request().unwrap(), req);

    let mut bytes = std::fs::read(&corpus).unwrap();
    bytes.extend_from_slice(b"\n");
    std::fs::write(&corpus, bytes).unwrap();
    match rerun_manifest(&parsed, None) {
        Err(PipelineError::DigestMismatch { role, .. }) => assert_eq!(role, "corpus"),
        other => panic!(
            "expected digest mismatch, got {:?}",
            other.map(|r| r.report)
        ),
    }
}
