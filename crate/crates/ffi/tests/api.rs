use std::ffi::{CStr, CString};
use std::ptr;

use prunelab_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(pl_last_error()) }.to_string_lossy().into_owned()
}

fn build(seed: u64) -> *mut PlModel {
    let mut m = ptr::null_mut();
    let status = unsafe { pl_model_build(c("mini_conv").as_ptr(), 10, 16, seed, &mut m) };
    assert_eq!(status, PlStatus::Ok, "{}", last_error());
    m
}

fn counts(m: *const PlModel) -> (usize, usize) {
    let (mut d, mut r) = (0, 0);
    assert_eq!(unsafe { pl_model_counts(m, &mut d, &mut r) }, PlStatus::Ok);
    (d, r)
}

#[test]
fn prune_save_load_round_trip() {
    let m = build(1);
    let (d, r) = counts(m);
    assert_eq!(d, r);
    let mut pruned = 0;
    assert_eq!(unsafe { pl_model_prune(m, 0.2, &mut pruned) }, PlStatus::Ok);
    assert_eq!(pruned, (0.2 * d as f64 + 0.5).floor() as usize);
    assert_eq!(counts(m), (d, d - pruned));

    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("m.ckpt").to_str().unwrap());
    assert_eq!(unsafe { pl_model_save(m, path.as_ptr()) }, PlStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { pl_model_load(path.as_ptr(), &mut back) }, PlStatus::Ok, "{}", last_error());
    assert_eq!(counts(back), (d, d - pruned));

    let images = vec![0.25f32; 2 * 3 * 16 * 16];
    let mut a = vec![0f32; 20];
    let mut b = vec![0f32; 20];
    unsafe {
        assert_eq!(pl_model_predict(m, images.as_ptr(), images.len(), 2, a.as_mut_ptr(), a.len()), PlStatus::Ok);
        assert_eq!(pl_model_predict(back, images.as_ptr(), images.len(), 2, b.as_mut_ptr(), b.len()), PlStatus::Ok);
        assert_eq!(pl_model_predict(m, images.as_ptr(), images.len(), 2, b.as_mut_ptr(), 19), PlStatus::Shape);
        pl_model_free(m);
        pl_model_free(back);
    }
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn sparsity_json_counts_pruned_weights() {
    let m = build(2);
    let mut s = ptr::null_mut();
    unsafe {
        for _ in 0..3 {
            assert_eq!(pl_model_prune(m, 0.5, ptr::null_mut()), PlStatus::Ok);
        }
        assert_eq!(pl_model_sparsity_json(m, 0.0, &mut s), PlStatus::Ok);
        let json: serde_json::Value = serde_json::from_str(CStr::from_ptr(s).to_str().unwrap()).unwrap();
        pl_string_free(s);
        let (d, r) = counts(m);
        let frac = json["global_fraction"].as_f64().unwrap();
        assert!((frac - (d - r) as f64 / d as f64).abs() < 1e-12, "{frac}");
        assert_eq!(json["epsilon"].as_f64().unwrap(), f32::MIN_POSITIVE as f64);
        pl_model_free(m);
    }
}

#[test]
fn failures_report_status_and_message() {
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(pl_model_build(c("resnet").as_ptr(), 10, 16, 0, &mut m), PlStatus::Config);
        assert!(last_error().contains("resnet"));
        assert!(m.is_null());
        assert_eq!(pl_model_build(ptr::null(), 10, 16, 0, &mut m), PlStatus::NullPointer);
        assert_eq!(pl_model_load(c("/nonexistent/x.ckpt").as_ptr(), &mut m), PlStatus::Io);
        assert_eq!(pl_model_prune(ptr::null_mut(), 0.2, ptr::null_mut()), PlStatus::NullPointer);

        let ok = build(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        let path = c(p.to_str().unwrap());
        assert_eq!(pl_model_save(ok, path.as_ptr()), PlStatus::Ok);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'N';
        std::fs::write(&p, &bytes).unwrap();
        assert_eq!(pl_model_load(path.as_ptr(), &mut m), PlStatus::BadMagic);
        bytes[0] = b'T';
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert_eq!(pl_model_load(path.as_ptr(), &mut m), PlStatus::Truncated);
        assert!(m.is_null());

        assert_eq!(pl_model_prune(ok, 1.5, ptr::null_mut()), PlStatus::InvalidArgument);
        assert!(last_error().contains("rate"));
        let mut n = 0;
        assert_eq!(pl_model_counts(ok, &mut n, &mut n), PlStatus::Ok);
        assert_eq!(last_error(), "");
        pl_model_free(ok);
    }
}

#[test]
fn runs_an_experiment_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("e.toml");
    std::fs::write(
        &cfg,
        r#"
id = "ffi"
seeds = [0]
output = "out"
init_schemes = ["winning_ticket"]
[data]
kind = "synthetic"
train = 32
test = 16
classes = 4
size = 8
[arch]
name = "mini_conv"
[[tasks]]
kind = "labels"
[train]
epochs = 1
batch_size = 16
[train.schedule]
base_lr = 0.05
[imp]
max_iterations = 2
report_iterations = [1]
rewind_samples = 16
"#,
    )
    .unwrap();
    let path = c(cfg.to_str().unwrap());
    let mut computed = 0;
    assert_eq!(unsafe { pl_run_experiment(path.as_ptr(), 1, &mut computed) }, PlStatus::Ok, "{}", last_error());
    assert_eq!(computed, 3);
    assert!(dir.path().join("out/records.csv").exists());
    assert_eq!(unsafe { pl_run_experiment(path.as_ptr(), 1, &mut computed) }, PlStatus::Ok);
    assert_eq!(computed, 0);

    std::fs::write(&cfg, "id = \"x\"\nbogus = 1\n").unwrap();
    assert_eq!(unsafe { pl_run_experiment(path.as_ptr(), 1, ptr::null_mut()) }, PlStatus::Config);
}
