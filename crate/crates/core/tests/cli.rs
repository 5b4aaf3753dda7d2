mod common;

use common::*;

#[test]
fn pipeline_writes_expected_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (inputs, out) = (tmp.path().join("in"), tmp.path().join("out"));
    std::fs::create_dir_all(&inputs).unwrap();
    pipeline(&inputs, &out);

    let files = snapshot(&out);
    for name in [
        "simulate/manifest.json",
        "simulate/images.f32",
        "simulate/outcomes.csv",
        "simulate/truth.csv",
        "simulate/oracle.json",
        "simulate/grid.json",
        "fit/model.bin",
        "fit/trace.csv",
        "fit/summary.json",
        "tarnet/model.bin",
        "predict/predictions.csv",
        "predict/policy.csv",
        "salience/salience/image5_cluster2_direction.pgm",
        "salience/salience/image0_cluster2_magnitude.f64",
        "map/map_scores.csv",
        "map/run.json",
    ] {
        assert!(files.contains_key(std::path::Path::new(name)), "missing {name}");
    }

    let map = String::from_utf8(files[std::path::Path::new("map/map_scores.csv")].clone()).unwrap();
    let lines: Vec<&str> = map.lines().collect();
    assert_eq!(lines[0], "row,col,mean_prob_1,mean_prob_2,sd_prob_1,sd_prob_2,tau_q05,tau_q50,tau_q95");
    assert_eq!(lines.len(), 17);
    assert_eq!(lines[16].split(',').take(2).collect::<Vec<_>>(), ["3", "3"]);

    let policy = String::from_utf8(files[std::path::Path::new("predict/policy.csv")].clone()).unwrap();
    let treated = policy.lines().skip(1).filter(|l| l.ends_with(",1")).count();
    assert_eq!(treated, 10);

    let pred = String::from_utf8(files[std::path::Path::new("predict/predictions.csv")].clone()).unwrap();
    assert_eq!(pred.lines().count(), 41);
    for line in pred.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert!((v[1] + v[2] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn repeated_invocations_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let inputs = tmp.path().join("in");
    std::fs::create_dir_all(&inputs).unwrap();
    pipeline(&inputs, &tmp.path().join("a"));
    pipeline(&inputs, &tmp.path().join("b"));
    let (a, b) = (snapshot(&tmp.path().join("a")), snapshot(&tmp.path().join("b")));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{} differs between runs", name.display());
    }
}

#[test]
fn run_json_replays_the_recorded_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (sim, fit) = write_configs(tmp.path());
    let first = tmp.path().join("sim1");
    run(&["simulate", "--config", p(&sim), "--seed", "11", "--nu", "0.1", "--out", p(&first)]);
    let second = tmp.path().join("sim2");
    run(&["simulate", "--config", p(&first.join("run.json")), "--nu", "0.1", "--out", p(&second)]);
    assert_eq!(snapshot(&first), snapshot(&second));

    let manifest = first.join("manifest.json");
    let f1 = tmp.path().join("fit1");
    run(&["fit", "--config", p(&fit), "--seed", "4", "--k", "3", "--data", p(&manifest), "--out", p(&f1)]);
    let f2 = tmp.path().join("fit2");
    run(&["fit", "--config", p(&f1.join("run.json")), "--data", p(&manifest), "--out", p(&f2)]);
    assert_eq!(snapshot(&f1), snapshot(&f2));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (sim, _) = write_configs(tmp.path());
    let out = tmp.path().join("sim");
    assert_eq!(run_code(&["--help"]), 0);
    assert_eq!(run_code(&["frobnicate"]), 2);
    assert_eq!(run_code(&["simulate"]), 2);
    assert_eq!(run_code(&["simulate", "--out", p(&out), "--seed", "x"]), 2);
    assert_eq!(run_code(&["simulate", "--config", p(&sim), "--out", p(&out)]), 0);
    // Existing outputs are not overwritten without --force.
    assert_eq!(run_code(&["simulate", "--config", p(&sim), "--out", p(&out)]), 1);
    assert_eq!(run_code(&["simulate", "--config", p(&sim), "--out", p(&out), "--force"]), 0);
    assert_eq!(
        run_code(&["simulate", "--config", p(&sim), "--grid", "4by4", "--out", p(&tmp.path().join("g"))]),
        1
    );
    assert_eq!(
        run_code(&["simulate", "--config", p(&tmp.path().join("missing.json")), "--out", p(&tmp.path().join("m"))]),
        1
    );
    std::fs::write(tmp.path().join("bad.json"), r#"{"n": 40, "colour": 3}"#).unwrap();
    assert_eq!(
        run_code(&["simulate", "--config", p(&tmp.path().join("bad.json")), "--out", p(&tmp.path().join("b"))]),
        1
    );
    let manifest = out.join("manifest.json");
    assert_eq!(
        run_code(&["fit", "--data", p(&manifest), "--kind", "forest", "--out", p(&tmp.path().join("f"))]),
        1
    );
}

#[test]
fn corrupted_dataset_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (sim, fit) = write_configs(tmp.path());
    let data = tmp.path().join("sim");
    run(&["simulate", "--config", p(&sim), "--out", p(&data)]);
    let images = data.join("images.f32");
    let mut bytes = std::fs::read(&images).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&images, &bytes).unwrap();
    let code = run_code(&[
        "fit",
        "--config",
        p(&fit),
        "--data",
        p(&data.join("manifest.json")),
        "--out",
        p(&tmp.path().join("f")),
    ]);
    assert_eq!(code, 1);
}
