use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hypercae::data::{pnm, write_dataset, LabeledDataset};
use hypercae::layers::LayerKind;
use hypercae::metrics::parse_key_values;
use hypercae::network::{build_network, save_model, NetworkConfig};
use hypercae::tensor::{Dims4, Tensor4};

const TINY: &str = "\
[network]
input_rows = 16
input_cols = 16
conv_maps = 3,4,5
conv_filters = 5,3,3
dense = 8,6
[hyper]
out_neurons = 12
[training]
epochs_pretrain = 3
epochs_finetune = 4
batch_size = 16
lr_finetune = 0.05
[data]
image_size = 16
n_normal = 60
n_abnormal = 8
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hypercae"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.ini");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    bin().arg("--config").arg(&cfg).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        Workspace { _tmp: tmp, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        run(&self.root, args)
    }
}

#[test]
fn gen_data_counts_determinism_and_overwrite_guard() {
    let ws = Workspace::new();
    let (a, b) = (ws.path("a"), ws.path("b"));
    ok(&ws.run(&["gen-data", "--out", p(&a)]));
    ok(&ws.run(&["gen-data", "--out", p(&b)]));
    let manifest = fs::read(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest, fs::read(b.join("manifest.tsv")).unwrap());
    assert_eq!(String::from_utf8(manifest).unwrap().lines().count(), 60 + 4 * 8);
    assert_eq!(fs::read(a.join("img_00070.pgm")).unwrap(), fs::read(b.join("img_00070.pgm")).unwrap());
    let again = ws.run(&["gen-data", "--out", p(&a)]);
    assert_eq!(again.status.code(), Some(2));
    ok(&ws.run(&["--force", "gen-data", "--out", p(&a)]));
    let other_seed = ws.path("c");
    ok(&ws.run(&["--seed", "7", "gen-data", "--out", p(&other_seed)]));
    assert_ne!(fs::read(a.join("img_00000.pgm")).unwrap(), fs::read(other_seed.join("img_00000.pgm")).unwrap());
}

#[test]
fn pretrain_finetune_eval_reconstruct_pipeline() {
    let ws = Workspace::new();
    let data = ws.path("data");
    ok(&ws.run(&["gen-data", "--out", p(&data)]));

    let (pre, pre_log) = (ws.path("pre.hypn"), ws.path("pre.log"));
    ok(&ws.run(&["pretrain", "--data", p(&data), "--model-out", p(&pre), "--log", p(&pre_log)]));
    let log = fs::read_to_string(&pre_log).unwrap();
    assert_eq!(log.lines().count(), 3 * 3);
    assert!(log.lines().all(|l| l.starts_with("layer=") && l.contains(" epoch=") && l.contains(" loss=")));
    let loss = |l: &str| l.rsplit("loss=").next().unwrap().parse::<f64>().unwrap();
    let layer1: Vec<&str> = log.lines().filter(|l| l.starts_with("layer=1 ")).collect();
    assert!(loss(layer1[2]) < loss(layer1[0]));
    let model = hypercae::network::load_model(&pre).unwrap();
    assert!(model.provenance.pretrained && model.decoders.is_some());

    let (fine, fine_log) = (ws.path("fine.hypn"), ws.path("fine.log"));
    ok(&ws.run(&[
        "finetune", "--data", p(&data), "--model-in", p(&pre), "--model-out", p(&fine), "--log", p(&fine_log),
    ]));
    let log = fs::read_to_string(&fine_log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4 + 1);
    assert!(lines[..4].iter().all(|l| l.starts_with("epoch=") && l.contains("val_error_rate=")));
    assert!(lines[4].starts_with("selected epoch="));

    let (preds, report) = (ws.path("preds.tsv"), ws.path("report.txt"));
    let out = ok(&ws.run(&[
        "eval", "--model", p(&fine), "--data", p(&data), "--role", "test", "--predictions", p(&preds), "--report",
        p(&report),
    ]));
    let kv = parse_key_values(&fs::read_to_string(&report).unwrap());
    let keys: Vec<&str> = kv.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(keys, ["accuracy", "precision", "recall", "specificity", "error_rate", "n"]);
    assert!(out.contains("accuracy="));
    let rows: Vec<(usize, usize)> = fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<usize> = l.split('\t').map(|v| v.parse().unwrap()).collect();
            (f[1], f[2])
        })
        .collect();
    let get = |k: &str| kv.iter().find(|(n, _)| n == k).unwrap().1.clone();
    assert_eq!(get("n").parse::<usize>().unwrap(), rows.len());
    let correct = rows.iter().filter(|(y, q)| y == q).count();
    let acc: f64 = get("accuracy").parse().unwrap();
    assert!((acc - correct as f64 / rows.len() as f64).abs() < 1e-6);
    let err: f64 = get("error_rate").parse().unwrap();
    assert!((err - 100.0 * (1.0 - correct as f64 / rows.len() as f64)).abs() < 1e-4);

    let recon = ws.path("recon");
    for (layer, weights) in [("1", "tied"), ("3", "tied"), ("2", "pretrained")] {
        ok(&ws.run(&[
            "reconstruct", "--model", p(&fine), "--image", p(&data.join("img_00000.pgm")), "--layer", layer,
            "--weights", weights, "--out", p(&recon),
        ]));
        let gray = pnm::decode_pgm(&fs::read(recon.with_extension("pgm")).unwrap()).unwrap();
        assert_eq!((gray.rows, gray.cols), (16, 16));
        let rgb = pnm::decode_ppm(&fs::read(recon.with_extension("ppm")).unwrap()).unwrap();
        assert_eq!((rgb.rows, rgb.cols), (16, 16));
        assert!(rgb.pixels.iter().all(|px| px[2] == 0 && (px[0] == 0 || px[1] == 0)));
    }
    let bad = ws.run(&[
        "reconstruct", "--model", p(&fine), "--image", p(&data.join("img_00000.pgm")), "--layer", "4", "--out",
        p(&recon),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let ws = Workspace::new();
    let data = ws.path("data");
    ok(&ws.run(&["gen-data", "--out", p(&data)]));
    let mut outputs = Vec::new();
    for k in 0..2 {
        let pre = ws.path(&format!("pre{k}.hypn"));
        let fine = ws.path(&format!("fine{k}.hypn"));
        let pre_log = ws.path(&format!("pre{k}.log"));
        let fine_log = ws.path(&format!("fine{k}.log"));
        ok(&ws.run(&["pretrain", "--data", p(&data), "--model-out", p(&pre), "--log", p(&pre_log)]));
        ok(&ws.run(&[
            "finetune", "--data", p(&data), "--model-in", p(&pre), "--model-out", p(&fine), "--log", p(&fine_log),
        ]));
        outputs.push([pre, fine, pre_log, fine_log].map(|f| fs::read(f).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn constant_predictor_on_balanced_set_scores_half() {
    let ws = Workspace::new();
    let mut cfg = NetworkConfig::reduced();
    cfg.input_rows = 16;
    cfg.input_cols = 16;
    let mut model = build_network(&cfg, None, 3).unwrap();
    let last = model.layers.len() - 1;
    if let LayerKind::SoftmaxOut(d) = &mut model.layers[last] {
        d.weights.iter_mut().for_each(|w| *w = 0.0);
        d.bias = vec![5.0, 0.0];
    }
    let model_path = ws.path("const.hypn");
    save_model(&model, &model_path).unwrap();
    let images = vec![Tensor4::zeros(Dims4::new(1, 1, 16, 16)).unwrap(); 24];
    let labels: Vec<usize> = (0..24).map(|i| i % 2).collect();
    let mut ds = LabeledDataset::new(images, labels, vec!["normal".into(), "vacuoles".into()]).unwrap();
    ds.fold = (0..24).map(|i| i / 4).map(|f| f % 6).collect();
    let data = ws.path("data");
    write_dataset(&data, &ds).unwrap();
    let report = ws.path("r.txt");
    ok(&ws.run(&["eval", "--model", p(&model_path), "--data", p(&data), "--report", p(&report)]));
    let kv = parse_key_values(&fs::read_to_string(&report).unwrap());
    assert_eq!(kv[0], ("accuracy".to_string(), "0.500000".to_string()));
    assert_eq!(kv[1], ("precision".to_string(), "undefined".to_string()));
    assert_eq!(kv[5], ("n".to_string(), "4".to_string()));
}

#[test]
fn gradcheck_command() {
    let out = bin().arg("gradcheck").output().unwrap();
    let text = ok(&out);
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().all(|l| l.ends_with(" ok")));
    let bad = bin().args(["gradcheck", "--corrupt-gradient"]).output().unwrap();
    assert_ne!(bad.status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(bin().output().unwrap().status.code(), Some(2));
    assert_eq!(bin().args(["eval", "--model"]).output().unwrap().status.code(), Some(2));
    let ws = Workspace::new();
    fs::write(ws.path("bad.ini"), "[network]\nwhat = 3\n").unwrap();
    let out = bin().arg("--config").arg(ws.path("bad.ini")).arg("gradcheck").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = ws.run(&["eval", "--model", p(&ws.path("missing.hypn")), "--data", p(&ws.root)]);
    assert_eq!(out.status.code(), Some(2));
}
