use mutualseg_cli::{parse_config, split_override, CliError, Command, Precision};

fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn empty_train_config_resolves_published_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let cfg = parse_config(Command::Train, Some(""), &kv(&[("data_root", root)])).unwrap();
    let t = &cfg.training;
    assert_eq!((t.lambda_cyc, t.lambda_kd1, t.lambda_kd2), (10.0, 0.5, 1.0));
    assert_eq!(t.lr, 2e-4);
    assert_eq!(t.segmentor_decay, 0.9);
    assert_eq!(cfg.precision, Precision::F32);
    let echo = cfg.to_kv();
    assert!(echo.contains("lambda_cyc=10\n"));
    assert!(echo.contains("lr=0.0002\n"));
}

#[test]
fn override_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let file = format!("data_root={root}\nepochs=3\n# comment\n\nlr=0.001\n");
    let cfg = parse_config(Command::Train, Some(&file), &kv(&[("epochs", "7")])).unwrap();
    assert_eq!(cfg.training.epochs, 7);
    assert_eq!(cfg.training.lr, 0.001);
}

#[test]
fn unknown_key_is_named() {
    let err = parse_config(Command::Synth, Some("data_root=x\nlambda_foo=1\n"), &[]).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)));
    assert!(err.to_string().contains("lambda_foo"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn type_mismatch_is_named() {
    let err = parse_config(Command::Synth, None, &kv(&[("data_root", "x"), ("n_target", "lots")])).unwrap_err();
    assert!(err.to_string().contains("n_target"), "{err}");
    let err = parse_config(Command::Synth, None, &kv(&[("data_root", "x"), ("lambda_kd1", "-1")])).unwrap_err();
    assert!(err.to_string().contains("lambda_kd1"), "{err}");
}

#[test]
fn missing_required_paths() {
    let err = parse_config(Command::Eval, None, &[]).unwrap_err();
    assert!(err.to_string().contains("checkpoint"), "{err}");
    let err = parse_config(Command::Synth, None, &[]).unwrap_err();
    assert!(err.to_string().contains("data_root"), "{err}");
    let err = parse_config(Command::Train, None, &kv(&[("data_root", "/definitely/not/here")])).unwrap_err();
    assert!(err.to_string().contains("data_root"), "{err}");
}

#[test]
fn echo_round_trips() {
    let cfg = parse_config(
        Command::Sweep,
        None,
        &kv(&[("sweep_counts", "5,10"), ("seeds", "3,4"), ("mode", "no_iam"), ("precision", "f64")]),
    )
    .unwrap();
    let again = parse_config(Command::Sweep, Some(&cfg.to_kv()), &[]).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn split_override_requires_equals() {
    assert_eq!(split_override("a=b=c").unwrap(), ("a".to_string(), "b=c".to_string()));
    assert!(split_override("novalue").is_err());
}
