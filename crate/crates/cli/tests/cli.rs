use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_polymer");

fn write_config(dir: &Path, lambda: f64, extra: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(
        &p,
        format!(
            "schema_version = 1\nseed = 3\n[model]\nd = 1\nlambda = {lambda}\nbeta = 0.0\n[potential]\nfamily = \"constant_zero\"\n[budgets]\nm_max = 12\nn_max = 30\ntable = \"markov\"\n{extra}"
        ),
    )
    .unwrap();
    p
}

fn polymer(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).env_remove("POLYMER_SEED").output().unwrap()
}

#[test]
fn renewal_matches_the_free_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2.5, "");
    let out = dir.path().join("out");
    let o = polymer(&["renewal", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--serial"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("renewal/renewal.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let p = &v["payload"];
    let gap = (p["exp_minus_xi"].as_f64().unwrap() - p["free_root"].as_f64().unwrap()).abs();
    assert!(gap < 1e-6, "{gap}");
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    assert!(out.join("renewal/timing.json").exists());

    // Final plotted point sits inside the fitted envelope.
    let csv = std::fs::read_to_string(out.join("renewal/t_convergence.csv")).unwrap();
    let last: Vec<f64> = csv.lines().last().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    assert!(last[2] <= last[1] && last[1] <= last[3]);
}

#[test]
fn exit_codes_and_no_output_on_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), 1.2, "");
    let o = polymer(&["renewal", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    let cfg = write_config(dir.path(), 2.5, "bogus = 1\n");
    let o = polymer(&["renewal", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(dir.path(), 2.5, "node_budget = 10\n[experiment]\nensemble = \"t\"\nheights = [4]\n");
    let o = polymer(&["enumerate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn serial_reruns_are_identical_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2.5, "replicas = 3\n[experiment]\nensemble = \"t\"\nheights = [3]\n");
    let cfg = cfg.to_str().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = Command::new(BIN)
            .args(["enumerate", "--config", cfg, "--out", out.to_str().unwrap(), "--serial"])
            .env("POLYMER_SEED", seed)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (
            std::fs::read(out.join("enumerate/enumerate.json")).unwrap(),
            std::fs::read(out.join("enumerate/weights.csv")).unwrap(),
        )
    };
    let a = run("a", "7");
    let b = run("b", "7");
    assert_eq!(a, b);
    let c = run("c", "8");
    assert_ne!(a.0, c.0);
    assert!(String::from_utf8_lossy(&a.1).starts_with("# config_hash="));
}

fn column_sum(path: &Path) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(2).map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum()
}

#[test]
fn histogram_overlays_are_normalised() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.toml");
    std::fs::write(
        &p,
        "schema_version = 1\n[model]\nd = 1\nlambda = 2.5\nbeta = 0.3\n[potential]\nfamily = \"two_point\"\nv = 1.0\nrho = 0.2\n[budgets]\nreplicas = 4\nm_max = 6\nn_max = 12\nmax_len = 30\nmax_excess = 2\ntable = \"enumerate\"\n[experiment]\nheights = [4, 8]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = polymer(&["diffusive", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["histogram_empirical.csv", "histogram_gaussian.csv"] {
        let s = column_sum(&out.join("diffusive").join(name));
        assert!((s - 1.0).abs() < 1e-9, "{name}: {s}");
    }
}
