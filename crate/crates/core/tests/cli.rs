use std::path::Path;
use std::process::{Command, Output};

use ifs_collage::bound::{w2_distance, Estimate};
use ifs_collage::cli::read_cloud;
use ifs_collage::geometry::PointCloud;
use ifs_collage::ot::SinkhornConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifs-collage")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(
        &p,
        r#"
[dataset]
kind = "two_moons"
n = 256
noise = 0.1
radius = 2.0
seed = 3

[reference]
kind = "two_moons"
n = 4000
noise = 0.1
radius = 2.0
seed = 4

[train]
epochs = 3
batch_size = 128

[bound]
mc_batches = 2
mc_batch_size = 64
burn_in = 20
"#,
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

fn value(summary: &str, key: &str) -> f64 {
    let line = summary.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no `{key}` in {summary}"));
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn sierpinski_writes_iterates_and_chaos_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let s = ok(&["--out", out.to_str().unwrap(), "sierpinski"]);
    let csvs = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "csv").count();
    assert_eq!(csvs, 10);
    assert!(value(&s, "hausdorff") <= 0.02);
    let dim = value(&s, "box-counting");
    assert!((1.5..=1.67).contains(&dim), "{dim}");
    assert_eq!(read_cloud(&out.join("hutchinson_T8.csv")).unwrap().len(), 6561);

    let out0 = dir.path().join("s0");
    ok(&["--out", out0.to_str().unwrap(), "sierpinski", "--iters", "0"]);
    let names: Vec<_> = std::fs::read_dir(&out0).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec!["hutchinson_T0.csv"]);
}

#[test]
fn lyapunov_example_reports_exponents_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    ok(&["--out", out.to_str().unwrap(), "appendix-c", "--p", "0.5,0.6,0.7"]);
    let text = std::fs::read_to_string(out.join("appendix_c.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert!(rows[0][1].abs() < 0.01);
    assert!((rows[1][1] + 0.1386).abs() <= 0.01);
    assert!((rows[1][3] - 1.1).abs() < 1e-12);
    assert!(rows[1][4].abs() < 1e-3 && rows[1][5] > 1e3);
    assert!((rows[2][3] - 0.95).abs() < 1e-12 && rows[2][5] < 1.0 && rows[2][4].abs() < 1.0);
    let traj = std::fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 3 * 81);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    assert_eq!(run(&["--config", bad.to_str().unwrap(), "sierpinski"]).status.code(), Some(2));
    assert_eq!(run(&["--config", "/definitely/missing.toml", "sierpinski"]).status.code(), Some(4));
    assert_eq!(run(&["--out", dir.path().to_str().unwrap(), "attractor", "--checkpoint", "/missing.ckpt"]).status.code(), Some(4));
    assert_eq!(run(&["two-moons-train", "--arch", "transformer", "--cap", "0.5"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

fn chunk_distances(a: &PointCloud, b: &PointCloud, chunks: usize) -> Estimate {
    let per = a.len().min(b.len()) / chunks;
    let cfg = SinkhornConfig { max_iters: 300, tol: 1e-4, anneal_iters: 10, ..SinkhornConfig::default() };
    let v: Vec<f64> = (0..chunks)
        .map(|k| {
            let idx: Vec<usize> = (k * per..(k + 1) * per).collect();
            w2_distance(&a.select(&idx), &b.select(&idx), &cfg).unwrap()
        })
        .collect();
    Estimate::from_samples(&v)
}

#[test]
fn train_then_sample_attractor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("t");
    let s = ok(&["--config", &cfg, "--out", out.to_str().unwrap(), "--plot", "two-moons-train", "--arch", "moe", "--cap", "0.9"]);
    assert!(s.contains("loss"));
    for f in ["collage.csv", "attractor.csv", "model.ckpt", "model.ckpt.layout.json", "model.ckpt.state.json", "loss.svg", "attractor.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("collage.csv")).unwrap();
    assert!(log.starts_with("epoch,loss,w2_estimate,sup_c,wallclock_ms\n"));
    assert_eq!(log.lines().count(), 4);

    let ckpt = out.join("model.ckpt");
    let sample = |seed: &str, name: &str, burn: &str| {
        let o = dir.path().join(name);
        ok(&["--out", o.to_str().unwrap(), "--seed", seed, "attractor", "--checkpoint", ckpt.to_str().unwrap(), "--burn-in", burn]);
        (o.join("attractor.csv"), read_cloud(&o.join("attractor.csv")).unwrap())
    };
    let (p1, a1) = sample("1", "a1", "100");
    let (p1b, _) = sample("1", "a1b", "100");
    let (_, a2) = sample("2", "a2", "100");
    assert_eq!(a1.len(), 4096);
    assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p1b).unwrap());

    // Same invariant law from both seeds: the cross-seed distance matches
    // the distance between two halves of one run.
    let half: Vec<usize> = (0..2048).collect();
    let rest: Vec<usize> = (2048..4096).collect();
    let within = chunk_distances(&a1.select(&half), &a1.select(&rest), 4);
    let cross = chunk_distances(&a1.select(&half), &a2.select(&rest), 4);
    let se = (within.se.powi(2) + cross.se.powi(2)).sqrt();
    assert!((cross.mean - within.mean).abs() < 2.0 * se + 1e-3, "cross {cross:?} within {within:?}");

    // burn_in 0 returns the (noised) initial draws.
    let (_, a0) = sample("1", "a0", "0");
    assert_eq!(a0.len(), 4096);
}

#[test]
fn deterministic_architectures_run_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for (arch, extra) in [("resnet", None), ("transformer", Some("2"))] {
        let out = dir.path().join(arch);
        let mut args = vec!["--config", &cfg, "--out", out.to_str().unwrap(), "two-moons-train", "--arch", arch];
        if let Some(e) = extra {
            args.extend(["--embed", e]);
        }
        ok(&args);
        let att = read_cloud(&out.join("attractor.csv")).unwrap();
        assert_eq!(att.dim(), 2);
    }
}

#[test]
fn bound_sweep_single_cap_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("b1");
    let b = dir.path().join("b2");
    ok(&["--config", &cfg, "--out", a.to_str().unwrap(), "bound-sweep", "--caps", "0.5"]);
    ok(&["--config", &cfg, "--out", b.to_str().unwrap(), "bound-sweep", "--caps", "0.5"]);
    let text = std::fs::read_to_string(a.join("bound.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("cap,epsilon,stat_term,bound,gen_estimate,mc_se\n0.5,"));
    assert_eq!(text, std::fs::read_to_string(b.join("bound.csv")).unwrap());
    assert_eq!(run(&["--config", &cfg, "--out", a.to_str().unwrap(), "bound-sweep", "--caps", "1.5"]).status.code(), Some(2));
}
