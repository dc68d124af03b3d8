use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;
use std::sync::Arc;

use trafficaps::model::{save_model, Architecture, Model, ModelConfig};
use trafficaps::raster::{Normalizer, SpeedFrame};
use trafficaps_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(tc_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn param_count_matches_core() {
    let mut n = 0u64;
    let arch = cstr("capsnet_nlstm");
    assert_eq!(unsafe { tc_param_count(arch.as_ptr(), 1, &mut n) }, TcStatus::Ok);
    assert_eq!(n, 28_477_526);
    assert_eq!(last_error(), "");
    let arch = cstr("cnn_lstm");
    assert_eq!(unsafe { tc_param_count(arch.as_ptr(), 1, &mut n) }, TcStatus::Ok);
    assert_eq!(n, 53_062_230);
    assert_eq!(unsafe { tc_param_count(arch.as_ptr(), 0, &mut n) }, TcStatus::Ok);
    assert_eq!(n, ModelConfig::desk(Architecture::CnnLstm).param_count().unwrap());

    let bad = cstr("mlp");
    assert_eq!(unsafe { tc_param_count(bad.as_ptr(), 0, &mut n) }, TcStatus::Config);
    assert!(last_error().contains("mlp"));
    assert_eq!(unsafe { tc_param_count(ptr::null(), 0, &mut n) }, TcStatus::NullPointer);
    assert_eq!(unsafe { tc_param_count(arch.as_ptr(), 0, ptr::null_mut()) }, TcStatus::NullPointer);
}

#[test]
fn missing_model_file_is_reported() {
    let mut m = ptr::null_mut();
    let p = cstr("/nonexistent/model.ckpt");
    assert_eq!(unsafe { tc_model_load(p.as_ptr(), &mut m) }, TcStatus::MissingCheckpoint);
    assert!(m.is_null());
    assert!(!last_error().is_empty());
    unsafe { tc_model_free(ptr::null_mut()) };
}

#[test]
fn predict_matches_core_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::desk(Architecture::LstmStack);
    cfg.hidden = 6;
    let (model, store) = Model::init::<f32>(&cfg, 5).unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&path, &cfg, &store).unwrap();

    let mut h = ptr::null_mut();
    let p = cstr(path.to_str().unwrap());
    assert_eq!(unsafe { tc_model_load(p.as_ptr(), &mut h) }, TcStatus::Ok);
    let mut info = TcModelInfo::default();
    assert_eq!(unsafe { tc_model_info(h, &mut info) }, TcStatus::Ok);
    assert_eq!(
        (info.rows, info.cols, info.lag, info.links, info.horizons),
        (cfg.grid.0, cfg.grid.1, cfg.lag, cfg.links, cfg.horizons.len())
    );
    let mut hs = vec![0usize; info.horizons];
    assert_eq!(unsafe { tc_model_horizons(h, hs.as_mut_ptr(), hs.len()) }, TcStatus::Ok);
    assert_eq!(hs, cfg.horizons);

    let cells = info.rows * info.cols;
    let frames: Vec<f32> = (0..info.lag * cells).map(|i| ((i * 37) % 81) as f32).collect();
    let mut out = vec![0.0f64; info.horizons * info.links];
    let st = unsafe { tc_model_predict(h, frames.as_ptr(), frames.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(st, TcStatus::Ok, "{}", last_error());

    let norm = Normalizer::new(cfg.v_max).unwrap();
    let input: Vec<_> = frames
        .chunks(cells)
        .map(|v| {
            Arc::new(norm.normalize_frame(&SpeedFrame {
                timestamp: 0,
                rows: info.rows,
                cols: info.cols,
                values: v.to_vec(),
            }))
        })
        .collect();
    let want: Vec<f64> = model.predict(&store, &input).unwrap().into_values().flatten().collect();
    assert_eq!(out, want);

    let st = unsafe { tc_model_predict(h, frames.as_ptr(), frames.len() - 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, TcStatus::Shape);
    let st = unsafe { tc_model_predict(h, frames.as_ptr(), frames.len(), out.as_mut_ptr(), out.len() - 1) };
    assert_eq!(st, TcStatus::BufferTooSmall);
    let st = unsafe { tc_model_predict(h, ptr::null(), frames.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(st, TcStatus::NullPointer);
    unsafe { tc_model_free(h) };
}

#[test]
fn network_rasterizes_link_speeds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.txt");
    std::fs::write(
        &path,
        "1, 39.9000 116.3000; 39.9000 116.3009\n2, 39.9000 116.3009; 39.9005 116.3009\n",
    )
    .unwrap();
    let mut net = ptr::null_mut();
    let p = cstr(path.to_str().unwrap());
    assert_eq!(unsafe { tc_network_load(p.as_ptr(), 1e-4, 1e-4, &mut net) }, TcStatus::Ok);
    let (mut r, mut c, mut l) = (0, 0, 0);
    assert_eq!(unsafe { tc_network_dims(net, &mut r, &mut c, &mut l) }, TcStatus::Ok);
    assert_eq!((r, c, l), (5, 9, 2));

    let speeds = [30.0, 60.0];
    let mut frame = vec![-1.0f32; r * c];
    let st = unsafe { tc_network_rasterize(net, speeds.as_ptr(), 2, frame.as_mut_ptr(), frame.len()) };
    assert_eq!(st, TcStatus::Ok, "{}", last_error());
    // bottom row is the southern link, the eastern column the other one
    assert_eq!(frame[(r - 1) * c + 3], 30.0);
    assert_eq!(frame[2 * c + c - 1], 60.0);
    assert_eq!(frame[2 * c + 3], 0.0);

    let st = unsafe { tc_network_rasterize(net, speeds.as_ptr(), 1, frame.as_mut_ptr(), frame.len()) };
    assert_eq!(st, TcStatus::Shape);
    let bad = [30.0, f64::NAN];
    let st = unsafe { tc_network_rasterize(net, bad.as_ptr(), 2, frame.as_mut_ptr(), frame.len()) };
    assert_eq!(st, TcStatus::InvalidArgument);
    unsafe { tc_network_free(net) };

    std::fs::write(&path, "1, nonsense\n").unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { tc_network_load(p.as_ptr(), 1e-4, 1e-4, &mut net) }, TcStatus::Parse);
    assert!(net.is_null());
    assert!(last_error().contains("net.txt:1"), "{}", last_error());
}

#[test]
fn errors_are_per_thread() {
    let bad = cstr("mlp");
    let mut n = 0;
    unsafe { tc_param_count(bad.as_ptr(), 0, &mut n) };
    assert!(!last_error().is_empty());
    std::thread::spawn(|| assert_eq!(last_error(), "")).join().unwrap();
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/trafficaps.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "tc_last_error",
        "tc_param_count",
        "tc_model_load",
        "tc_model_predict",
        "tc_model_free",
        "tc_network_rasterize",
        "typedef struct TcModel TcModel",
    ] {
        assert!(text.contains(f), "{f}");
    }
    let Ok(_) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"trafficaps.h\"\nint main(void) { uint64_t n; TcModel *m = 0;\n\
         return tc_param_count(\"dcnn\", 0, &n) == TC_STATUS_OK && m == 0 ? 0 : 1; }\n",
    )
    .unwrap();
    let o = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
