use a2rnet::config::RunConfig;
use a2rnet::labels::LabelMode;
use a2rnet::network::{AttentionMode, SigmaMode};
use a2rnet::Error;
use std::path::PathBuf;

#[test]
fn defaults_validate_and_roundtrip() {
    let cfg = RunConfig::default();
    cfg.validate().unwrap();
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert_eq!(cfg.eval_budget().iterations, 20);
    assert_eq!(cfg.train.budget.iterations, 3);
}

#[test]
fn sections_keys_and_fractions() {
    let text = "\
# toy run
[network]
base_channels = 8
[attention]
taylor_order = 3
sigma_mode = fixed(0.5)
d_s = 12
mode = phi_normalized
[budget]
epsilon = 8/255
alpha = 2/255
eval_iterations = 7
[train]
adversarial = false
seed = 11
[labels]
mode = analytic_weighted
w_ir = 0.25
cache_dir = labels
[data]
manifest = data/manifest.csv
";
    let cfg = RunConfig::parse(text).unwrap();
    assert_eq!(cfg.network.base_channels, 8);
    assert_eq!(cfg.network.attention.taylor_order, 3);
    assert_eq!(cfg.network.attention.sigma_mode, SigmaMode::Fixed(0.5));
    assert_eq!(cfg.network.attention.d_s, Some(12.0));
    assert_eq!(cfg.network.attention.mode, AttentionMode::PhiNormalized);
    assert_eq!(cfg.train.budget.epsilon, 8.0 / 255.0);
    assert_eq!(cfg.train.budget.alpha, 2.0 / 255.0);
    assert_eq!(cfg.eval_budget().iterations, 7);
    assert!(!cfg.train.adversarial);
    assert_eq!(cfg.train.seed, 11);
    assert_eq!(cfg.labels.mode, LabelMode::AnalyticWeighted { w_ir: 0.25 });
    assert_eq!(cfg.label_cache, Some(PathBuf::from("labels")));
    assert_eq!(cfg.manifest, Some(PathBuf::from("data/manifest.csv")));
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn errors_carry_line_numbers() {
    let cases = [
        ("[network]\nbase_channels = 6\n", None),
        ("[network]\nbase = 8\n", Some(2)),
        ("[nope]\nx = 1\n", Some(2)),
        ("base_channels = 8\n", Some(1)),
        ("[budget]\n\nepsilon = abc\n", Some(3)),
        ("[train]\nepochs 3\n", Some(2)),
        ("[labels]\nmode = analytic_max\nw_ir = 0.2\n", Some(3)),
    ];
    for (text, line) in cases {
        match RunConfig::parse(text).unwrap_err() {
            Error::Validation { line: l, .. } => assert_eq!(l, line, "{text}"),
            other => panic!("unexpected {other} for {text}"),
        }
    }
}

#[test]
fn semantic_validation() {
    assert!(RunConfig::parse("[budget]\nalpha = 8/255\n").is_err());
    assert!(RunConfig::parse("[budget]\niterations = 0\n").is_err());
    assert!(RunConfig::parse("[budget]\nepsilon = 0\n").is_ok());
    assert!(RunConfig::parse("[labels]\nmode = analytic_weighted\nw_ir = 2\n").is_err());
    assert!(RunConfig::parse("[weights]\nssim_window = 4\n").is_err());
    assert!(RunConfig::parse("[data]\neval_batch = 0\n").is_err());
}

#[test]
fn overrides_apply_in_order() {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&["train.epochs=2", "train.epochs=3", "labels.mode=analytic_max", "budget.epsilon=0"])
        .unwrap();
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.labels.mode, LabelMode::AnalyticMax);
    assert_eq!(cfg.train.budget.epsilon, 0.0);
    assert!(cfg.apply_overrides(&["train.epochs"]).is_err());
    assert!(cfg.apply_overrides(&["epochs=3"]).is_err());
    assert!(cfg.apply_overrides(&["network.base_channels=5"]).is_err());
}

#[test]
fn load_reads_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "[train]\nepochs = 4\n").unwrap();
    assert_eq!(RunConfig::load(&path).unwrap().train.epochs, 4);
    assert!(matches!(RunConfig::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}
