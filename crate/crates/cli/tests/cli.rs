//! End-to-end tests of the `osaka` binary: pretrain -> run -> report flow,
//! exit codes, and file layout.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn osaka() -> Command {
    Command::new(env!("CARGO_BIN_EXE_osaka"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn tiny_config(dir: &Path, with_pretrained: bool) -> PathBuf {
    let ckpt = dir.join("pre.ckpt").display().to_string();
    let learners = if with_pretrained {
        format!(
            r#"[ {{ "kind": "online_adam", "eta": 0.001 }},
                 {{ "kind": "maml", "eta": 0.001, "pretrain_checkpoint": "{ckpt}" }} ]"#
        )
    } else {
        r#"[ { "kind": "online_adam", "eta": 0.001 },
             { "name": "cmaml_scratch", "kind": "cmaml", "eta": 0.01, "gamma": 1.0 } ]"#
            .to_string()
    };
    let json = format!(
        r#"{{
        "version": 1,
        "stream": {{
            "alpha": 0.95, "episode_length": 300, "mixture": [0.5, 0.25, 0.25],
            "ways": 5, "samples_per_step": 10, "dim": 16, "noise": 0.3,
            "pools": {{ "n_pretrain": 64, "n_ood": 64, "mu_shift": 1.0 }}, "seed": 7
        }},
        "model": {{ "hidden_dims": [32], "activation": "relu", "seed": 5 }},
        "pretrain": {{ "epochs": 40, "meta_batch": 4, "shots": 5, "eta": 0.002,
                       "inner_lr_init": 0.05, "first_order": true,
                       "checkpoint": "{ckpt}" }},
        "learners": {learners},
        "seeds": [11, 12],
        "output_dir": "{out}"
    }}"#,
        out = dir.join("out").display()
    );
    let path = dir.join("cfg.json");
    std::fs::write(&path, json).unwrap();
    path
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("osaka_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn pretrain_run_report_pipeline() {
    let dir = temp_dir("pipeline");
    let cfg = tiny_config(&dir, true);

    let out = run(osaka().args(["pretrain", "-c"]).arg(&cfg));
    assert!(
        out.status.success(),
        "pretrain failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.join("pre.ckpt").exists());
    let manifest = dir.join("pre.ckpt.manifest.json");
    assert!(manifest.exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
    assert!(manifest["final_meta_loss"].is_number());
    assert_eq!(manifest["epochs"], 40);

    let out = run(osaka().args(["run", "-c"]).arg(&cfg).args(["--jobs", "2"]));
    assert!(
        out.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let outdir = dir.join("out");
    // 2 learners x 2 seeds -> 4 trace files + 2 summary JSONs.
    for name in ["online_adam", "maml"] {
        for seed in [11, 12] {
            assert!(outdir.join(format!("trace_{name}_{seed}.csv")).exists());
        }
        assert!(outdir.join(format!("summary_{name}.json")).exists());
    }
    for seed in [11, 12] {
        assert!(outdir.join(format!("truth_{seed}.csv")).exists());
    }

    let out = run(osaka().arg("report").arg(&outdir).args(["--smooth", "20"]));
    assert!(
        out.status.success(),
        "report failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(outdir.join("report.txt").exists());
    assert!(outdir.join("curves.svg").exists());
    assert!(outdir.join("pr_scatter.svg").exists());
    let table = std::fs::read_to_string(outdir.join("report.txt")).unwrap();
    assert!(table.contains("online_adam"));
    assert!(table.contains("maml"));
}

#[test]
fn run_without_checkpoint_is_a_config_error() {
    let dir = temp_dir("missingckpt");
    let cfg = tiny_config(&dir, true);
    // No pretrain step: checkpoint is missing.
    let out = run(osaka().args(["run", "-c"]).arg(&cfg));
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("checkpoint"), "unexpected error: {msg}");
    // No episode output was produced.
    assert!(!dir.join("out").exists());
}

#[test]
fn bad_config_and_bad_usage_exit_one() {
    let dir = temp_dir("badcfg");
    let path = dir.join("broken.json");
    std::fs::write(&path, "{ not json").unwrap();
    let out = run(osaka().args(["run", "-c"]).arg(&path));
    assert_eq!(out.status.code(), Some(1));

    let out = run(osaka().arg("definitely-not-a-subcommand"));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = temp_dir("determinism");
    let cfg = tiny_config(&dir, false);
    let out = run(osaka().args(["run", "-c"]).arg(&cfg).args(["--jobs", "2"]));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let outdir = dir.join("out");
    let snapshot: Vec<(PathBuf, Vec<u8>)> = std::fs::read_dir(&outdir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    let out = run(osaka().args(["run", "-c"]).arg(&cfg).args(["--jobs", "1"]));
    assert!(out.status.success());
    for (path, bytes) in snapshot {
        assert_eq!(
            std::fs::read(&path).unwrap(),
            bytes,
            "{} changed",
            path.display()
        );
    }
}

#[test]
fn osaka_seed_overrides_profile_seed() {
    let dir = temp_dir("envseed");
    let cfg = tiny_config(&dir, false);
    let out = run(osaka().args(["run", "-c"]).arg(&cfg));
    assert!(out.status.success());
    let base = std::fs::read(dir.join("out").join("trace_online_adam_11.csv")).unwrap();

    let out = run(osaka()
        .args(["run", "-c"])
        .arg(&cfg)
        .env("OSAKA_SEED", "99"));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let overridden = std::fs::read(dir.join("out").join("trace_online_adam_11.csv")).unwrap();
    // A different profile seed draws different prototype pools, so the same
    // episode seed produces different observations and losses.
    assert_ne!(base, overridden);
}

#[test]
fn pretrain_first_order_flag_lands_in_manifest() {
    let dir = temp_dir("foflag");
    let cfg = tiny_config(&dir, true);
    let out = run(osaka()
        .args(["pretrain", "-c"])
        .arg(&cfg)
        .arg("--second-order"));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("pre.ckpt.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["pretrain"]["first_order"], false);

    let out = run(osaka()
        .args(["pretrain", "-c"])
        .arg(&cfg)
        .arg("--first-order"));
    assert!(out.status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("pre.ckpt.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["pretrain"]["first_order"], true);
}

#[test]
fn alpha_flag_overrides_profile() {
    let dir = temp_dir("alphaflag");
    let cfg = tiny_config(&dir, false);
    let out = run(osaka()
        .args(["run", "-c"])
        .arg(&cfg)
        .args(["--alpha", "0.90"]));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let echo: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("out").join("config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(echo["stream"]["alpha"], 0.90);

    // An invalid alpha is a configuration error.
    let out = run(osaka()
        .args(["run", "-c"])
        .arg(&cfg)
        .args(["--alpha", "1.5"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn search_writes_ranked_trials_and_best_config() {
    let dir = temp_dir("search");
    let ckptless = r#"[ { "kind": "online_adam", "eta": 0.001 } ]"#;
    let json = format!(
        r#"{{
        "version": 1,
        "stream": {{
            "alpha": 0.9, "episode_length": 150, "mixture": [0.5, 0.25, 0.25],
            "ways": 5, "samples_per_step": 10, "dim": 16, "noise": 0.3,
            "pools": {{ "n_pretrain": 64, "n_ood": 64, "mu_shift": 1.0 }}, "seed": 3
        }},
        "model": {{ "hidden_dims": [16], "activation": "relu", "seed": 5 }},
        "learners": {ckptless},
        "seeds": [1],
        "output_dir": "{out}",
        "search": {{ "budget": 3 }}
    }}"#,
        out = dir.join("out").display()
    );
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, json).unwrap();

    let out = run(osaka()
        .args(["search", "-c"])
        .arg(&cfg)
        .args(["--budget", "3", "--jobs", "2"]));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.join("out").join("search_trials.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4, "header + 3 trials:\n{csv}");
    assert!(lines[0].starts_with("rank,trial,kind"));

    let best: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("out").join("best_config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(best["learners"].as_array().unwrap().len(), 1);

    // Ranked by mean accuracy, descending.
    let means: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(15).unwrap().parse().unwrap())
        .collect();
    for pair in means.windows(2) {
        assert!(pair[0] >= pair[1]);
    }
}

#[test]
fn report_names_malformed_file_and_line() {
    let dir = temp_dir("badtrace");
    let outdir = dir.join("out");
    std::fs::create_dir_all(&outdir).unwrap();
    // Minimal summary so the directory is a run dir.
    std::fs::write(
        outdir.join("summary_x.json"),
        r#"{ "name": "x", "kind": "online_adam", "gamma": 1.0, "lambda": 1.0,
             "config_hash": "h", "per_seed": [], "aggregate": {} }"#,
    )
    .unwrap();
    std::fs::write(
        outdir.join("trace_x_0.csv"),
        "t,loss,acc,context_id,family,true_boundary,detected_boundary,modulation\ngarbage\n",
    )
    .unwrap();
    let out = run(osaka().arg("report").arg(&outdir));
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(
        msg.contains("trace_x_0.csv") && msg.contains(":2"),
        "missing location: {msg}"
    );
}
