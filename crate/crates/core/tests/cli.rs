use std::path::Path;
use std::process::{Command, Output};

fn globe(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_globe"))
        .args(args)
        .env("GLOBE_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn summary(dir: &Path, policy: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join(format!("{policy}_summary.json"))).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_s");
    v
}

#[test]
fn run_is_deterministic_and_honours_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = globe(&["run", "--policy", "globe", "-T", "200", "--seed", "7"], dir);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(summary(&a, "globe"), summary(&b, "globe"));
    let slots_a = std::fs::read_to_string(a.join("globe_slots.csv")).unwrap();
    assert_eq!(slots_a, std::fs::read_to_string(b.join("globe_slots.csv")).unwrap());
    assert!(slots_a.starts_with("t,total_cost,c_tx,c_com,c_grid,B_1,B_2,B_3,B_4,B_5,dropped_tx,dropped_comp,avg_cost,avg_B\n"));
    assert_eq!(slots_a.lines().count(), 201);
    let s = summary(&a, "globe");
    assert_eq!(s["slots"], 200);
    assert_eq!(s["config_digest"].as_str().unwrap().len(), 64);

    // --out wins over the environment variable
    let c = tmp.path().join("c");
    let o = globe(&["run", "-T", "20", "--out", c.to_str().unwrap()], &a);
    assert!(o.status.success());
    assert!(c.join("globe_summary.json").exists());
}

#[test]
fn all_policies_share_one_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let o = globe(&["run", "--policy", "all", "-T", "100"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for p in ["globe", "so_ng", "mo_g", "mo_ng"] {
        let s = summary(tmp.path(), p);
        assert_eq!(s["policy"], p);
        assert_eq!(s.get("note").is_some(), p != "globe");
    }
}

#[test]
fn trace_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = tmp.path().join("rec");
    assert!(globe(&["trace", "record", "-T", "60"], &rec).status.success());
    let rep = tmp.path().join("rep");
    let trace = rec.join("trace.csv");
    let o = globe(&["trace", "replay", "--trace", trace.to_str().unwrap()], &rep);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let live = tmp.path().join("live");
    assert!(globe(&["run", "-T", "60"], &live).status.success());
    assert_eq!(summary(&rep, "globe"), summary(&live, "globe"));

    // replaying past the end of the trace is an error
    let o = globe(&["trace", "replay", "--trace", trace.to_str().unwrap(), "-T", "61"], &rep);
    assert!(!o.status.success());
}

#[test]
fn sweep_snapshot_and_convergence_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = globe(&["sweep", "--axis", "grid_price_mean", "--values", "none,1", "--replicates", "2", "-T", "50"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("sweep_grid_price_mean_globe.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("axis_value,mean_cost,ci95,mean_battery,theta"));
    assert!(lines.next().unwrap().starts_with("none,"));

    let o = globe(&["sweep", "--axis", "v", "--values", "50", "-T", "50"], tmp.path());
    assert!(!o.status.success());

    let o = globe(&["snapshot", "--slot", "5", "-T", "10", "--policy", "so_ng"], tmp.path());
    assert!(o.status.success());
    let snap = std::fs::read_to_string(tmp.path().join("snapshot_so_ng_t5.csv")).unwrap();
    assert_eq!(snap.lines().count(), 6);
    let o = globe(&["snapshot", "--slot", "10", "-T", "10"], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("out of range"));

    let o = globe(&["convergence", "-T", "20", "--dump-slot", "3"], tmp.path());
    assert!(o.status.success());
    let log = std::fs::read_to_string(tmp.path().join("convergence_t3.csv")).unwrap();
    assert!(log.starts_with("k,gamma_1,gamma_2,gamma_3,gamma_4,gamma_5,qp_obj,lp_obj,max_violation\n"));
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("convergence_summary.json")).unwrap()).unwrap();
    assert_eq!(s["slots"], 20);
}

#[test]
fn bad_configs_exit_with_field_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let preset = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/presets/paper_vi.cfg")).unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, preset.replace("n_bs = 5", "n_bs = 0")).unwrap();
    let o = globe(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("network.n_bs"));

    // a fixed battery too small for V names the bound
    std::fs::write(&cfg, preset.replace("battery_headroom = 1.05", "battery_headroom = 1.05\nbattery_cap = 500.0")).unwrap();
    let o = globe(&["run", "--config", cfg.to_str().unwrap(), "-T", "5"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("B_max"), "{}", String::from_utf8_lossy(&o.stderr));
}
