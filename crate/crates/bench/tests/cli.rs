use std::path::Path;
use std::process::{Command, Output};

fn shiftbench(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftbench"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

const CONFIG: &str = "\
[task]
generator = two_moons
n_src = 60
n_tgt = 60
[task]
generator = toy1d
n_target = 40
[methods]
list = source_only, fixmatch
[train]
seeds = 0
total_steps = 40
eval_every = 20
hidden_dims = 8
feature_dim = 4
";

#[test]
fn gen_train_adist_and_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.ini");
    std::fs::write(&cfg, CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");

    let o = shiftbench(&out, &["gen", "--config", cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("two_moons_rot30_seed0.csv").exists());
    assert!(out.join("toy1d_c0.25_d0.75_seed0.csv").exists());

    let o = shiftbench(&out, &["train", "--config", cfg, "--method", "fixmatch"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["history.csv", "model.ckpt", "boundary.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ckpt = out.join("model.ckpt");
    let o = shiftbench(&out, &["adist", "--checkpoint", ckpt.to_str().unwrap(), "--config", cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("proxy_a_distance,") && text.contains("bound_gap,"), "{text}");

    let svg = dir.path().join("b.svg");
    let o = shiftbench(
        &out,
        &["plot", "--kind", "boundary", "--checkpoint", ckpt.to_str().unwrap(), "--config", cfg, "--output", svg.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn bench_writes_results_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.ini");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let o = shiftbench(&out, &["bench", "--config", cfg.to_str().unwrap(), "--format", "txt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().contains("fixmatch"));
    let results = out.join("results.csv");
    assert!(std::fs::read_to_string(&results).unwrap().lines().nth(1).unwrap().starts_with("method,"));
    assert_eq!(std::fs::read_dir(out.join("runs")).unwrap().count(), 4);
    assert!(out.join("plots/two_moons_rot30_convergence.svg").exists());

    for kind in ["convergence", "adist_bars", "table"] {
        let svg = dir.path().join(format!("{kind}.svg"));
        let o = shiftbench(
            &out,
            &["plot", "--kind", kind, "--input", results.to_str().unwrap(), "--output", svg.to_str().unwrap()],
        );
        assert!(o.status.success(), "{kind}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn failures_set_exit_code_and_bad_configs_report_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.ini");
    std::fs::write(&cfg, CONFIG.replace("source_only, fixmatch", "importance_weighting")).unwrap();
    let out = dir.path().join("out");
    let o = shiftbench(&out, &["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(std::fs::read_to_string(out.join("failures.txt")).unwrap().contains("importance_weighting"));

    std::fs::write(&cfg, "[train]\nseeds = 0\n[methods]\nlist = magic\n").unwrap();
    let o = shiftbench(&out, &["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("magic") && err.contains("fixmatch"), "{err}");
}
