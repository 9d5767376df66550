//! Helpers shared by the CLI integration tests.
#![allow(dead_code)]

pub mod world;

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use axum::routing::post;
use axum::{Json, Router};
use serde_json::Value;

use world::World;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/e2e")
}

pub fn finer() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_finer"));
    c.env("FINER_LOG", "warn");
    c
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("finer binary runs")
}

/// One pipeline step: name, output directory and arguments.
pub fn pipeline_steps(out: &Path, captions: &Path) -> Vec<(&'static str, PathBuf, Vec<String>)> {
    let p = |s: &str| out.join(s).display().to_string();
    let c = captions.display().to_string();
    vec![
        ("extract-sg", out.join("sg"), vec!["extract-sg".into(), "--captions".into(), c.clone(), "--out".into(), p("sg"), "--audit-sample".into(), "2".into()]),
        ("neg-gen", out.join("neg"), vec!["neg-gen".into(), "--sg".into(), p("sg/scene_graphs.jsonl"), "--out".into(), p("neg")]),
        (
            "build-mcq",
            out.join("mcq"),
            vec!["build-mcq".into(), "--sg".into(), p("sg/scene_graphs.jsonl"), "--neg".into(), p("neg/negative_sets.jsonl"), "--out".into(), p("mcq")],
        ),
        (
            "evaluate",
            out.join("eval"),
            vec![
                "evaluate".into(),
                "--mcq".into(),
                p("mcq/mcqs.jsonl"),
                "--binary".into(),
                p("mcq/binary_queries.jsonl"),
                "--baselines".into(),
                "--out".into(),
                p("eval"),
            ],
        ),
        ("build-dpo", out.join("dpo"), vec!["build-dpo".into(), "--captions".into(), c, "--out".into(), p("dpo")]),
    ]
}

/// Runs every step with `config`; returns each step's output.
pub fn run_pipeline(config: &Path, out: &Path, replay: bool, extra: &[&str]) -> Vec<(&'static str, Output)> {
    let captions = fixture_dir().join("captions.jsonl");
    pipeline_steps(out, &captions)
        .into_iter()
        .map(|(name, _, args)| {
            let mut cmd = finer();
            cmd.arg("--config").arg(config).args(&args).args(extra);
            if replay {
                cmd.arg("--replay");
            }
            let o = run(&mut cmd);
            (name, o)
        })
        .collect()
}

/// Every file under `root` except run manifests, keyed by relative path.
pub fn artifact_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let e = e.unwrap();
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else if e.file_name() != "run_manifest.json" {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// First differing file between two artifact trees, if any.
pub fn first_difference(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Option<String> {
    for k in a.keys().chain(b.keys()) {
        match (a.get(k), b.get(k)) {
            (Some(x), Some(y)) if x == y => {}
            (Some(x), Some(y)) => {
                let (x, y) = (String::from_utf8_lossy(x), String::from_utf8_lossy(y));
                let line = x.lines().zip(y.lines()).position(|(p, q)| p != q).unwrap_or(x.lines().count().min(y.lines().count()));
                let show = |s: &str| s.lines().nth(line).unwrap_or("<eof>").chars().take(400).collect::<String>();
                return Some(format!("{k} differs at line {}:\n  {}\n  {}", line + 1, show(&x), show(&y)));
            }
            (None, _) => return Some(format!("{k} only in second tree")),
            (_, None) => return Some(format!("{k} only in first tree")),
        }
    }
    None
}

/// Starts the fake chat-completions server; returns its base URL.
pub fn start_fake_server(world: World) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    let world = Arc::new(world);
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let app = Router::new().route(
                "/v1/chat/completions",
                post(move |Json(body): Json<Value>| {
                    let w = world.clone();
                    async move { Json(w.respond(&body)) }
                }),
            );
            let l = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(l, app).await.unwrap();
        });
    });
    format!("http://{addr}/v1")
}

pub fn load_world() -> World {
    let dir = fixture_dir();
    World::load(
        &std::fs::read_to_string(dir.join("world.json")).unwrap(),
        &std::fs::read_to_string(dir.join("captions.jsonl")).unwrap(),
    )
}
