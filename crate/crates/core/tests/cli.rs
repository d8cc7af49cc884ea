use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndels::image::ImageRgb;

const TINY: &str = r#"
name = "tiny"
initial_lr = 1e-3
decay_every = 2
total_epochs = 3
crop = 32
resize = [32, 32]
augment = false
batch_size = 2

[llm]
base_channels = 8

[dhm]
upper_channels = [4, 4, 8, 8, 8]
upper_out = 4
lower_width = 8
rcams = 1
rcabs_per_rcam = 1
rcab_reduction = 4
fa_reduction = 2

[disc]
channels = [8, 8]
hidden = 8

[extractor]
kind = "random_conv"
seed = 0
widths = [4]
"#;

fn ndels(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ndels"))
        .args(args)
        .env("NDELS_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = ndels(args);
    assert!(
        out.status.success(),
        "ndels {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ndels(args).status.code().expect("exit code")
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("tiny.toml"), TINY).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn synth(&self, name: &str, seed: u64) {
        run_ok(&[
            "synth",
            "--builtin-scenes",
            "4",
            "--size",
            "32x32",
            "--seed",
            &seed.to_string(),
            "--out",
            &self.s(name),
        ]);
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible() {
    let ws = Workspace::new();
    ws.synth("a", 5);
    ws.synth("b", 5);
    let (a, b) = (files(&ws.path("a")), files(&ws.path("b")));
    assert!(a.iter().any(|(p, _)| p.ends_with("manifest.json")));
    assert_eq!(a, b);
}

#[test]
fn usage_and_config_errors_exit_1() {
    let ws = Workspace::new();
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["synth", "--out", &ws.s("d")]), 1);
    assert_eq!(
        code(&["synth", "--builtin-scenes", "2", "--size", "0x4", "--out", &ws.s("d")]),
        1
    );
    ws.synth("data", 0);
    std::fs::write(ws.path("bad.toml"), "initial_lr = -1.0\n").unwrap();
    assert_eq!(
        code(&[
            "train",
            "llm",
            "--data",
            &ws.s("data"),
            "--out",
            &ws.s("runs"),
            "--config",
            &ws.s("bad.toml")
        ]),
        1
    );
    std::fs::write(ws.path("unknown.toml"), "learning_rate = 1.0\n").unwrap();
    assert_eq!(
        code(&[
            "train",
            "llm",
            "--data",
            &ws.s("data"),
            "--out",
            &ws.s("runs"),
            "--config",
            &ws.s("unknown.toml")
        ]),
        1
    );
    assert_eq!(
        code(&[
            "infer",
            "--input",
            &ws.s("data"),
            "--out",
            &ws.s("o"),
            "--llm",
            &ws.s("none.ckpt"),
            "--dhm",
            &ws.s("none.ckpt")
        ]),
        1
    );
    assert_eq!(
        code(&[
            "eval",
            "--identity",
            "--data",
            &ws.s("data"),
            "--out",
            &ws.s("m.json"),
            "--alpha",
            "2"
        ]),
        1
    );
}

#[test]
fn data_errors_exit_2() {
    let ws = Workspace::new();
    assert_eq!(
        code(&["synth", "--pairs-dir", &ws.s("missing"), "--out", &ws.s("d")]),
        2
    );
    assert_eq!(
        code(&["train", "llm", "--data", &ws.s("missing"), "--out", &ws.s("runs")]),
        2
    );
    assert_eq!(
        code(&[
            "eval",
            "--identity",
            "--data",
            &ws.s("missing"),
            "--out",
            &ws.s("m.json")
        ]),
        2
    );
    assert_eq!(
        code(&["ablate", "--identity", "--data", &ws.s("missing"), "--out", &ws.s("ab")]),
        2
    );
    assert_eq!(
        code(&[
            "infer",
            "--identity",
            "--input",
            &ws.s("missing.png"),
            "--out",
            &ws.s("o.png")
        ]),
        2
    );
    std::fs::write(ws.path("junk.png"), b"not a png").unwrap();
    assert_eq!(
        code(&[
            "infer",
            "--identity",
            "--input",
            &ws.s("junk.png"),
            "--out",
            &ws.s("o.png")
        ]),
        2
    );
}

#[test]
fn numerical_failures_map_to_exit_3() {
    assert_eq!(ndels::error::Error::NonFinite("loss".into()).exit_code(), 3);
}

#[test]
fn synth_reads_pair_directories() {
    let ws = Workspace::new();
    for (i, name) in ["street", "bridge"].iter().enumerate() {
        let (bright, dark) = ndels::synth::builtin_pair(24, 40, i as u64).unwrap();
        bright.save(ws.path(&format!("pairs/{name}/bright.png"))).unwrap();
        dark.save(ws.path(&format!("pairs/{name}/dark.png"))).unwrap();
    }
    run_ok(&[
        "synth",
        "--pairs-dir",
        &ws.s("pairs"),
        "--count",
        "3",
        "--out",
        &ws.s("data"),
    ]);
    let train = ndels::synth::load_split(&ws.path("data"), ndels::synth::Split::Train).unwrap();
    let val = ndels::synth::load_split(&ws.path("data"), ndels::synth::Split::Val).unwrap();
    assert_eq!(train.len() + val.len(), 3);
    assert!(train.iter().chain(&val).all(|(_, t)| t.dims() == (24, 40)));
}

#[test]
fn train_resume_infer_eval_ablate() {
    let ws = Workspace::new();
    ws.synth("data", 1);
    let data = ws.s("data");
    let cfg = ws.s("tiny.toml");

    let log = run_ok(&[
        "train",
        "llm",
        "--data",
        &data,
        "--out",
        &ws.s("runs"),
        "--config",
        &cfg,
    ]);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch ")).count(), 3);
    let full = ws.path("runs/tiny/epoch_3.ckpt");
    assert!(full.is_file());

    // stopping after epoch 1 and resuming reproduces the uninterrupted run
    run_ok(&[
        "train",
        "llm",
        "--data",
        &data,
        "--out",
        &ws.s("runs"),
        "--config",
        &cfg,
        "--name",
        "part",
        "--epochs",
        "3",
        "--resume",
        &ws.s("runs/tiny/epoch_1.ckpt"),
    ]);
    assert_eq!(
        std::fs::read(&full).unwrap(),
        std::fs::read(ws.path("runs/part/epoch_3.ckpt")).unwrap()
    );

    run_ok(&[
        "train",
        "dhm",
        "--data",
        &data,
        "--out",
        &ws.s("runs"),
        "--config",
        &cfg,
        "--name",
        "deh",
        "--epochs",
        "1",
    ]);
    let llm = ws.s("runs/tiny/epoch_3.ckpt");
    let dhm = ws.s("runs/deh/epoch_1.ckpt");
    assert_eq!(
        code(&[
            "infer",
            "--input",
            &data,
            "--out",
            &ws.s("o"),
            "--llm",
            &dhm,
            "--dhm",
            &dhm
        ]),
        1
    );
    assert_eq!(
        code(&[
            "infer",
            "--input",
            &data,
            "--out",
            &ws.s("o"),
            "--llm",
            &llm,
            "--dhm",
            &llm
        ]),
        1
    );

    let night = ndels::synth::builtin_pair(36, 52, 9).unwrap().1;
    night.save(ws.path("night.png")).unwrap();
    for out in ["a.png", "b.png"] {
        run_ok(&[
            "infer",
            "--input",
            &ws.s("night.png"),
            "--out",
            &ws.s(out),
            "--llm",
            &llm,
            "--dhm",
            &dhm,
        ]);
    }
    assert_eq!(
        std::fs::read(ws.path("a.png")).unwrap(),
        std::fs::read(ws.path("b.png")).unwrap()
    );
    assert_eq!(ImageRgb::load(ws.path("a.png")).unwrap().dims(), (36, 52));

    let written = run_ok(&[
        "infer",
        "--input",
        &ws.s("night.png"),
        "--out",
        &ws.s("c.png"),
        "--llm",
        &llm,
        "--dhm",
        &dhm,
        "--dump-stages",
        "--no-emsr",
    ]);
    for tag in ["llm", "dhm", "enhanced", "emsr"] {
        assert!(ws.path(&format!("c_{tag}.png")).is_file(), "missing {tag} stage");
    }
    assert_eq!(written.lines().count(), 5);

    for out in ["m1.json", "m2.json"] {
        run_ok(&[
            "eval",
            "--data",
            &data,
            "--split",
            "train",
            "--resize",
            "none",
            "--llm",
            &llm,
            "--dhm",
            &dhm,
            "--out",
            &ws.s(out),
        ]);
    }
    let m1 = std::fs::read(ws.path("m1.json")).unwrap();
    assert_eq!(m1, std::fs::read(ws.path("m2.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&m1).unwrap();
    assert!(report["mean_psnr"].as_f64().unwrap() > 0.0);

    run_ok(&[
        "ablate",
        "--data",
        &data,
        "--split",
        "train",
        "--resize",
        "none",
        "--llm",
        &llm,
        "--dhm",
        &dhm,
        "--out",
        &ws.s("ab"),
    ]);
    let grid: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.path("ab/ablation.json")).unwrap()).unwrap();
    assert_eq!(grid["cells"].as_array().unwrap().len(), 9);
}
