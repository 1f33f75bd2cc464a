use std::path::Path;

use swinbird::config::RunConfig;

#[test]
fn shipped_configs_match_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk", "smoke", "full"] {
        let cfg = RunConfig::load(&dir.join(format!("{name}.json"))).unwrap();
        assert_eq!(cfg, RunConfig::preset(name).unwrap(), "{name}");
    }
}

#[test]
fn partial_config_overrides_a_preset() {
    let cfg = RunConfig::from_json_str(r#"{"preset": "smoke", "model": {"neck": {"window": 3}}}"#).unwrap();
    assert_eq!(cfg.model.neck.window, 3);
    assert_eq!(cfg.train.epochs, RunConfig::smoke().train.epochs);
}
