use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use wavjepa::ingest::{write_clip, SoundClip};

fn wavjepa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavjepa")).args(args).env_remove("WAVJEPA_DEVICE").output().unwrap()
}

fn json_stdout(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn error_line(o: &Output) -> Value {
    assert!(!o.status.success());
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap();
    serde_json::from_str(line).unwrap()
}

fn tone(freq: f64, seconds: f64) -> SoundClip {
    let n = (seconds * 16_000.0) as usize;
    SoundClip::mono((0..n).map(|t| 0.5 * (2.0 * std::f64::consts::PI * freq * t as f64 / 16_000.0).sin()).collect(), 16_000).unwrap()
}

fn tiny_run(dir: &Path, steps: u64) -> (String, String) {
    let mut manifest = String::new();
    for (i, f) in [220.0, 330.0, 440.0].iter().enumerate() {
        let p = dir.join(format!("clip{i}.wav"));
        write_clip(&p, &tone(*f, 1.5)).unwrap();
        manifest.push_str(&format!("clip{i}.wav\n"));
    }
    std::fs::write(dir.join("files.txt"), manifest).unwrap();
    let cfg = format!("profile = \"tiny\"\n[trainer]\ntotal_steps = {steps}\nwarmup_steps = 1\ncheckpoint_every = 2\nbatch_size = 2\n");
    std::fs::write(dir.join("run.toml"), cfg).unwrap();
    (dir.join("files.txt").display().to_string(), dir.join("run.toml").display().to_string())
}

#[test]
fn missing_subcommand_and_bad_flags_exit_2() {
    assert_eq!(wavjepa(&[]).status.code(), Some(2));
    assert_eq!(wavjepa(&["sampler-stats", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(wavjepa(&["sampler-stats", "--n", "many"]).status.code(), Some(2));
    assert_eq!(wavjepa(&["launch"]).status.code(), Some(2));
}

#[test]
fn sampler_stats_is_deterministic() {
    let args = ["sampler-stats", "--n", "200", "--trials", "1000", "--seed", "7"];
    let a = wavjepa(&args);
    let b = wavjepa(&args);
    assert_eq!(a.stdout, b.stdout);
    let v = json_stdout(&a);
    assert_eq!(v["stats"]["trials"], 1000);
    assert_eq!(v["stats"]["invariant_violations"], 0);
    let cov = v["stats"]["target_percent"]["mean"].as_f64().unwrap();
    assert!((15.0..30.0).contains(&cov));
    let threaded = wavjepa(&["--threads", "1", "sampler-stats", "--n", "200", "--trials", "1000", "--seed", "7"]);
    assert_eq!(threaded.stdout, a.stdout);
}

#[test]
fn invalid_sampler_flags_report_config_error() {
    let e = error_line(&wavjepa(&["sampler-stats", "--p-context", "1.5", "--trials", "10"]));
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("p_context"));
}

#[test]
fn pretrain_inspect_probe_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, cfg) = tiny_run(dir.path(), 4);
    let out = dir.path().join("out");
    let out_s = out.display().to_string();
    let v = json_stdout(&wavjepa(&["pretrain", "--config", &cfg, "--manifest", &manifest, "--out", &out_s]));
    assert_eq!(v["end_step"], 4);
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let ckpt = out.join("ckpt-4.bin").display().to_string();
    let info = json_stdout(&wavjepa(&["inspect-ckpt", &ckpt]));
    assert_eq!(info["step"], 4);
    assert_eq!(info["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(info["profile"], "tiny");
    let p = &info["params"];
    assert!(p["context_encoder"].as_u64().unwrap() > 0);
    assert_eq!(p["context_encoder"], p["target_encoder"]);

    let probe = json_stdout(&wavjepa(&["probe", "--ckpt", &ckpt, "--task", "tone4", "--seed", "1", "--per-class", "4"]));
    assert_eq!(probe["report"]["task"], "tone4");
    let acc = probe["report"]["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    let lines: Vec<&str> = metrics.lines().take(2).collect();
    std::fs::write(resumed.join("metrics.jsonl"), lines.join("\n") + "\n").unwrap();
    let mid = out.join("ckpt-2.bin").display().to_string();
    let r = resumed.display().to_string();
    json_stdout(&wavjepa(&["pretrain", "--config", &cfg, "--manifest", &manifest, "--out", &r, "--resume", &mid]));
    assert_eq!(std::fs::read_to_string(resumed.join("metrics.jsonl")).unwrap(), metrics);
    assert_eq!(std::fs::read(resumed.join("ckpt-4.bin")).unwrap(), std::fs::read(out.join("ckpt-4.bin")).unwrap());
}

#[test]
fn pretrain_errors_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, cfg) = tiny_run(dir.path(), 2);
    let out = dir.path().join("out").display().to_string();
    let o = Command::new(env!("CARGO_BIN_EXE_wavjepa"))
        .args(["pretrain", "--config", &cfg, "--manifest", &manifest, "--out", &out])
        .env("WAVJEPA_DEVICE", "cuda")
        .output()
        .unwrap();
    assert!(error_line(&o)["message"].as_str().unwrap().contains("WAVJEPA_DEVICE"));

    std::fs::write(dir.path().join("bad.toml"), "profile = \"tiny\"\n[nat]\nenabled = true\n").unwrap();
    let bad = dir.path().join("bad.toml").display().to_string();
    let e = error_line(&wavjepa(&["pretrain", "--config", &bad, "--manifest", &manifest, "--out", &out]));
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("sin2d"));

    let e = error_line(&wavjepa(&["inspect-ckpt", &dir.path().join("missing.bin").display().to_string()]));
    assert_eq!(e["error"], "io");
}

#[test]
fn score_table() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("scores.csv");
    std::fs::write(&p, "model,task,score\nHEAR-Naive,a,10\nm,a,30\nbest,a,50\nHEAR-Naive,b,5\nm,b,1\nbest,b,4\n").unwrap();
    let v = json_stdout(&wavjepa(&["score", "--table", &p.display().to_string(), "--model", "m"]));
    assert!((v["score"].as_f64().unwrap() - 25.0).abs() < 1e-12);
    assert_eq!(v["tasks"].as_array().unwrap().len(), 2);
}

#[test]
fn mix_scenes_writes_wav_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_clip(d.join("src.wav"), &tone(440.0, 1.0)).unwrap();
    write_clip(d.join("noise.wav"), &tone(97.0, 1.2)).unwrap();
    let brir = SoundClip::new(vec![vec![1.0, 0.3, 0.1], vec![0.0, 0.8, 0.2]], 16_000).unwrap();
    write_clip(d.join("brir.wav"), &brir).unwrap();
    std::fs::write(d.join("scenes.tsv"), "source\tbrir\tnoises\tnoise_brirs\tsnr_db\tdiffuse\nsrc.wav\tbrir.wav\tnoise.wav\tbrir.wav\t12\tfalse\n").unwrap();
    let manifest = d.join("scenes.tsv").display().to_string();
    let run = |name: &str| {
        let out = d.join(name);
        let v = json_stdout(&wavjepa(&["mix-scenes", "--manifest", &manifest, "--out", &out.display().to_string()]));
        assert_eq!(v["scenes"].as_array().unwrap().len(), 1);
        out
    };
    let a = run("a");
    let b = run("b");
    let side: Value = serde_json::from_str(&std::fs::read_to_string(a.join("scene-0000.json")).unwrap()).unwrap();
    assert!((side["report"]["achieved_snr_db"].as_f64().unwrap() - 12.0).abs() < 0.01);
    let wav = wavjepa::ingest::load_clip(a.join("scene-0000.wav")).unwrap();
    assert_eq!(wav.num_channels(), 2);
    assert_eq!(wav.len(), 16_000);
    assert_eq!(std::fs::read(a.join("scene-0000.wav")).unwrap(), std::fs::read(b.join("scene-0000.wav")).unwrap());
}
