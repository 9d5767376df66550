//! Regenerates the shipped replay cache and golden outputs. Runs only with
//! `FINER_RECORD_FIXTURES=1`; otherwise it is a no-op.

mod support;

use finer_cli::config::RunConfig;

#[test]
fn record_e2e_fixtures() {
    if std::env::var("FINER_RECORD_FIXTURES").as_deref() != Ok("1") {
        eprintln!("set FINER_RECORD_FIXTURES=1 to re-record fixtures/e2e");
        return;
    }
    let dir = support::fixture_dir();
    let cache = dir.join("cache");
    let golden = dir.join("golden");
    for d in [&cache, &golden] {
        if d.exists() {
            std::fs::remove_dir_all(d).unwrap();
        }
    }

    let base_url = support::start_fake_server(support::load_world());
    let mut cfg = RunConfig::parse(&std::fs::read_to_string(dir.join("config.toml")).unwrap()).unwrap();
    for e in &mut cfg.endpoints {
        e.base_url = Some(base_url.clone());
        e.model = Some("fixture-world".into());
    }
    cfg.paths.cache_dir = Some(cache.clone());
    let tmp = tempfile::tempdir().unwrap();
    let live_cfg = tmp.path().join("config.toml");
    std::fs::write(&live_cfg, toml::to_string(&cfg).unwrap()).unwrap();

    let live_out = tmp.path().join("live");
    for (name, o) in support::run_pipeline(&live_cfg, &live_out, false, &[]) {
        assert!(o.status.success(), "{name} failed while recording: {}", String::from_utf8_lossy(&o.stderr));
    }
    for (name, o) in support::run_pipeline(&dir.join("config.toml"), &golden, true, &[]) {
        assert!(o.status.success(), "{name} failed in replay: {}", String::from_utf8_lossy(&o.stderr));
    }
    let live = support::artifact_files(&live_out);
    let replayed = support::artifact_files(&golden);
    assert_eq!(support::first_difference(&live, &replayed), None, "replay must reproduce the live run");
    for d in ["sg", "neg", "mcq", "eval", "dpo"] {
        std::fs::remove_file(golden.join(d).join("run_manifest.json")).unwrap();
    }
}
