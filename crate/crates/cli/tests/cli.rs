use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Instant;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_memotion"));
    c.env_remove("MEMOTION_DATA_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, records: usize) -> (PathBuf, PathBuf) {
    let o = run(&[
        "synth",
        "--records",
        &records.to_string(),
        "--seed",
        "5",
        "--out-dir",
        p(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (dir.join("corpus.csv"), dir.join("images.memb"))
}

#[test]
fn normalize_reads_stdin() {
    let mut child = bin()
        .arg("normalize")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"Visit GrumpyCatPics.com now\n#10YearChallenge gng ASAP\nNooooo suuuppperrr\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(
        stdout(&o),
        "visit now\n10 year challenge going as soon as possible\nno super\n"
    );
}

#[test]
fn train_predict_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, images) = synth(dir.path(), 60);
    let ckpt = dir.path().join("mnn1.mmck");

    let start = Instant::now();
    let o = run(&[
        "train",
        "--corpus",
        p(&corpus),
        "--task",
        "a",
        "--arch",
        "mnn1",
        "--image-embeddings",
        p(&images),
        "--seed",
        "3",
        "--out",
        p(&ckpt),
        "--quiet",
        "--json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs() < 60);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["report"]["train_loss"].as_array().unwrap().len(), 10);
    assert!(memotion::checkpoint::load_checkpoint(&ckpt).is_ok());

    // Same manifest, same bytes.
    let again = dir.path().join("again.mmck");
    let manifest = dir.path().join("mnn1.manifest.json");
    let o = run(&["train", "--from-manifest", p(&manifest), "--out", p(&again)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(&again).unwrap()
    );

    let pred = dir.path().join("pred.csv");
    let o = run(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--corpus",
        p(&corpus),
        "--image-embeddings",
        p(&images),
        "--out",
        p(&pred),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&pred).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "id,sentiment,humorous,sarcastic,offensive,motivational,humour_scale,sarcasm_scale,offense_scale"
    );
    assert_eq!(lines.count(), 60);

    let o = run(&[
        "evaluate",
        "--gold",
        p(&corpus),
        "--pred",
        p(&pred),
        "--task",
        "a",
        "--json",
    ]);
    assert_eq!(code(&o), 0);
    let ev: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let score = ev["score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score));
}

#[test]
fn missing_image_file_is_missing_modality() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _) = synth(dir.path(), 12);
    let out = dir.path().join("m.mmck");
    let o = run(&[
        "train",
        "--corpus",
        p(&corpus),
        "--task",
        "a",
        "--arch",
        "mnn1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("image-embedding"));
    let o = run(&[
        "train",
        "--corpus",
        p(&corpus),
        "--task",
        "a",
        "--arch",
        "mnn2",
        "--image-embeddings",
        p(&dir.path().join("nope.memb")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 3);
    assert!(!out.exists());
}

#[test]
fn distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = d.join("m.mmck");
    let train = |corpus: &Path| {
        run(&[
            "train",
            "--corpus",
            p(corpus),
            "--task",
            "a",
            "--arch",
            "bilstm",
            "--epochs",
            "1",
            "--out",
            p(&out),
        ])
    };

    // bad arguments
    assert_eq!(code(&run(&["train", "--task", "a"])), 2);
    assert_eq!(
        code(&run(&[
            "evaluate", "--gold", "g", "--pred", "p", "--task", "z"
        ])),
        2
    );
    // missing input
    assert_eq!(code(&train(&d.join("absent.csv"))), 3);
    // schema: no sentiment column
    let no_col = d.join("nocol.csv");
    std::fs::write(&no_col, "id,image,description\na,a.jpg,hi\n").unwrap();
    assert_eq!(code(&train(&no_col)), 4);
    // head/label mismatch: the column exists but nothing maps, or one class only
    let junk = d.join("junk.csv");
    std::fs::write(
        &junk,
        "id,image,description,sentiment\na,a.jpg,hi,maybe\nb,b.jpg,yo,perhaps\n",
    )
    .unwrap();
    assert_eq!(code(&train(&junk)), 6);
    let single = d.join("single.csv");
    let rows: String = (0..10)
        .map(|i| format!("m{i},m{i}.jpg,caption {i},positive\n"))
        .collect();
    std::fs::write(&single, format!("id,image,description,sentiment\n{rows}")).unwrap();
    assert_eq!(code(&train(&single)), 6);
    // bad config value
    let cfg = d.join("bad.cfg");
    std::fs::write(&cfg, "lstm_hidden = lots\n").unwrap();
    let (corpus, _) = synth(d, 12);
    let o = run(&[
        "train",
        "--corpus",
        p(&corpus),
        "--task",
        "a",
        "--arch",
        "bilstm",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn evaluate_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gold = d.join("gold.csv");
    std::fs::write(
        &gold,
        "id,image,description,sentiment,humorous,sarcastic,offensive,motivational,humour_scale,sarcasm_scale,offense_scale\n\
         a,a.jpg,x,positive,yes,no,no,no,funny,not_sarcastic,not_offensive\n\
         b,b.jpg,x,positive,yes,no,no,no,funny,not_sarcastic,not_offensive\n\
         c,c.jpg,x,negative,no,no,no,no,not_funny,not_sarcastic,not_offensive\n\
         d,d.jpg,x,negative,no,no,no,no,not_funny,not_sarcastic,not_offensive\n",
    )
    .unwrap();
    let header = "id,sentiment,humorous,sarcastic,offensive,motivational,humour_scale,sarcasm_scale,offense_scale\n";
    let perfect = d.join("perfect.csv");
    std::fs::write(
        &perfect,
        format!(
            "{header}d,negative,no,no,no,no,not_funny,not_sarcastic,not_offensive\n\
             a,positive,yes,no,no,no,funny,not_sarcastic,not_offensive\n\
             b,positive,yes,no,no,no,funny,not_sarcastic,not_offensive\n\
             c,negative,no,no,no,no,not_funny,not_sarcastic,not_offensive\n"
        ),
    )
    .unwrap();
    let eval = |pred: &Path, task: &str, extra: &[&str]| {
        let mut args = vec![
            "evaluate",
            "--gold",
            p(&gold),
            "--pred",
            p(pred),
            "--task",
            task,
            "--json",
        ];
        args.extend_from_slice(extra);
        run(&args)
    };
    let score = |o: &Output| -> f64 {
        assert_eq!(code(o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_str::<serde_json::Value>(&stdout(o)).unwrap()["score"]
            .as_f64()
            .unwrap()
    };
    // gold = pred: every present class scores 1, the absent neutral class 0
    assert!((score(&eval(&perfect, "a", &[])) - 2.0 / 3.0).abs() < 1e-12);
    // B heads: humour perfect, sarcasm/offense/motivational only ever "no"
    assert!((score(&eval(&perfect, "b", &[])) - (1.0 + 0.5 + 0.5 + 0.5) / 4.0).abs() < 1e-12);
    assert!(
        (score(&eval(&perfect, "b", &["--exclude-motivational"])) - (1.0 + 0.5 + 0.5) / 3.0).abs()
            < 1e-12
    );

    // two-by-two all-ones confusion on the humour head
    let swapped = d.join("swapped.csv");
    std::fs::write(
        &swapped,
        format!(
            "{header}a,positive,yes,no,no,no,funny,not_sarcastic,not_offensive\n\
             b,positive,no,no,no,no,funny,not_sarcastic,not_offensive\n\
             c,negative,yes,no,no,no,not_funny,not_sarcastic,not_offensive\n\
             d,negative,no,no,no,no,not_funny,not_sarcastic,not_offensive\n"
        ),
    )
    .unwrap();
    let o = eval(&swapped, "b", &[]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["heads"][0]["head"], "BHumour");
    assert!((v["heads"][0]["scores"]["macro_f1"].as_f64().unwrap() - 0.5).abs() < 1e-12);

    // one prediction short
    let short = d.join("short.csv");
    std::fs::write(
        &short,
        format!("{header}a,positive,yes,no,no,no,funny,not_sarcastic,not_offensive\n"),
    )
    .unwrap();
    let o = eval(&short, "a", &[]);
    assert_ne!(code(&o), 0);
    assert_eq!(code(&o), 4);
}

#[test]
fn predict_accepts_unlabeled_corpus_and_several_heads() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (corpus, images) = synth(d, 24);
    let mut ckpts = Vec::new();
    for head in ["a", "b-sarcasm", "c-motivational"] {
        let out = d.join(format!("{head}.mmck"));
        let o = run(&[
            "train",
            "--corpus",
            p(&corpus),
            "--task",
            head,
            "--arch",
            "bilstm",
            "--epochs",
            "1",
            "--out",
            p(&out),
            "--quiet",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        ckpts.push(out);
    }
    let unlabeled = d.join("unlabeled.csv");
    std::fs::write(
        &unlabeled,
        "id,image,description\nx,x.jpg,awesome cat\ny,y.jpg,\nz,z.jpg,whatever monday\n",
    )
    .unwrap();
    let pred = d.join("pred.csv");
    let mut args = vec!["predict"];
    for c in &ckpts {
        args.extend_from_slice(&["--checkpoint", p(c)]);
    }
    args.extend_from_slice(&[
        "--corpus",
        p(&unlabeled),
        "--image-embeddings",
        p(&images),
        "--out",
        p(&pred),
    ]);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&pred).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(["positive", "neutral", "negative"].contains(&r[1]));
        assert!(["yes", "no"].contains(&r[3]));
        assert!(["yes", "no"].contains(&r[5]));
        assert_eq!((r[2], r[4], r[6]), ("", "", ""));
    }

    // two checkpoints for one head
    let o = run(&[
        "predict",
        "--checkpoint",
        p(&ckpts[0]),
        "--checkpoint",
        p(&ckpts[0]),
        "--corpus",
        p(&unlabeled),
        "--out",
        p(&pred),
    ]);
    assert_eq!(code(&o), 4);
}

#[test]
fn stats_vocab_gridsearch_and_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 30);

    let o = bin()
        .args(["stats", "--corpus", "corpus.csv", "--task", "c", "--json"])
        .env("MEMOTION_DATA_DIR", d)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["records"], 30);
    assert_eq!(v["heads"].as_array().unwrap().len(), 4);
    let total: u64 = v["heads"][0]["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(total, 30);
    assert_eq!(code(&run(&["stats", "--corpus", "corpus.csv"])), 3);

    let vocab = d.join("vocab.txt");
    let corpus = d.join("corpus.csv");
    assert_eq!(
        code(&run(&[
            "build-vocab",
            "--corpus",
            p(&corpus),
            "--out",
            p(&vocab)
        ])),
        0
    );
    let tokens = std::fs::read_to_string(&vocab).unwrap();
    let tokens: Vec<&str> = tokens.lines().collect();
    assert_eq!(&tokens[..2], &["<pad>", "<unk>"]);
    assert!(tokens.contains(&"awesome"));

    let cfg = d.join("grid.cfg");
    std::fs::write(
        &cfg,
        "grid_lstm_layers = 1\ngrid_epochs = 1, 2\ngrid_learning_rates = 0.001\nd_semantic = 8\nlstm_hidden = 4\nseq_len = 12\n",
    )
    .unwrap();
    let ckpt = d.join("best.mmck");
    let table = d.join("table.json");
    let o = run(&[
        "gridsearch",
        "--corpus",
        p(&corpus),
        "--task",
        "a",
        "--arch",
        "bilstm",
        "--config",
        p(&cfg),
        "--threads",
        "2",
        "--out",
        p(&ckpt),
        "--table",
        p(&table),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&table).unwrap()).unwrap();
    assert_eq!(v["results"].as_array().unwrap().len(), 2);
    assert!(memotion::checkpoint::load_checkpoint(&ckpt).is_ok());
}
