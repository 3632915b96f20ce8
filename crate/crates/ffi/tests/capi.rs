use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use egcl::ann::{HnswIndex, HnswParams};
use egcl::learner::{infer, init_params, ModelConfig};
use egcl::levels::Level;
use egcl::synth::{PyramidFeatures, SPATIAL};
use egcl::tensor::Tensor;
use egcl_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(egcl_last_error()) }.to_str().unwrap().to_string()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn small_index(dir: &Path) -> std::path::PathBuf {
    let items = vec![
        (10, unit(&[1.0, 0.0, 0.0])),
        (11, unit(&[0.0, 1.0, 0.0])),
        (12, unit(&[0.0, 0.0, 1.0])),
        (13, unit(&[1.0, 1.0, 0.0])),
    ];
    let idx = HnswIndex::from_vectors(Level::P3, items, &HnswParams::default()).unwrap();
    let path = dir.join("index_l3.egnx");
    idx.save(&path).unwrap();
    path
}

#[test]
fn index_roundtrip_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&small_index(dir.path()));
    let mut handle: *mut EgclIndex = ptr::null_mut();
    unsafe {
        assert_eq!(egcl_index_load(path.as_ptr(), &mut handle), EgclStatus::Ok);
        assert!(!handle.is_null());
        let (mut len, mut level, mut dim) = (0usize, 0u32, 0usize);
        assert_eq!(egcl_index_info(handle, &mut len, &mut level, &mut dim), EgclStatus::Ok);
        assert_eq!((len, level, dim), (4, 3, 3));

        let q = unit(&[0.9, 0.1, 0.0]);
        let (mut id, mut dot, mut d) = (0u32, 0.0, 0.0);
        assert_eq!(egcl_index_nearest(handle, q.as_ptr(), 3, &mut id, &mut dot, &mut d), EgclStatus::Ok);
        assert_eq!(id, 10);
        assert!((dot - q[0]).abs() < 1e-15);
        assert!((d - (1.0 - 1.0 / (1.0 + (-dot).exp()))).abs() < 1e-15);

        let mut avg = f64::NAN;
        assert_eq!(egcl_index_average_distance(handle, q.as_ptr(), 3, &mut avg), EgclStatus::Ok);
        assert!(avg > 0.0 && avg < 1.0);

        let short = [1.0, 0.0];
        assert_eq!(
            egcl_index_nearest(handle, short.as_ptr(), 2, &mut id, &mut dot, &mut d),
            EgclStatus::ShapeMismatch
        );
        assert!(!last_error().is_empty());
        egcl_index_free(handle);
        egcl_index_free(ptr::null_mut());
    }
}

#[test]
fn load_failures_leave_a_null_handle() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.egnx");
    std::fs::write(&bad, b"not an index").unwrap();
    let mut handle: *mut EgclIndex = ptr::dangling_mut::<EgclIndex>();
    unsafe {
        assert_eq!(egcl_index_load(cpath(&bad).as_ptr(), &mut handle), EgclStatus::MalformedFile);
        assert!(handle.is_null());
        let missing = cpath(&dir.path().join("missing.egnx"));
        assert_eq!(egcl_index_load(missing.as_ptr(), &mut handle), EgclStatus::Io);
        assert_eq!(egcl_index_load(ptr::null(), &mut handle), EgclStatus::NullPointer);
        assert_eq!(last_error(), "path is null");
        assert_eq!(egcl_index_load(missing.as_ptr(), ptr::null_mut()), EgclStatus::NullPointer);
        let mut m: *mut EgclModel = ptr::null_mut();
        assert_eq!(egcl_model_load(cpath(&bad).as_ptr(), &mut m), EgclStatus::MalformedFile);
        assert!(m.is_null());
    }
}

#[test]
fn model_inference_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        channels: [2, 3, 2, 2],
        hidden: 5,
        embed_dim: 4,
        transform: true,
    };
    let store = init_params(&cfg, 3).unwrap();
    let path = dir.path().join("m.egcp");
    store.save(&path).unwrap();

    let level = Level::P3;
    let n = 3 * SPATIAL * SPATIAL;
    let feats: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let mut levels = cfg.channels.map(|c| Tensor::zeros(&[c, SPATIAL, SPATIAL]));
    levels[level.index()] = Tensor::new(vec![3, SPATIAL, SPATIAL], feats.clone()).unwrap();
    let (p_ref, emb_ref) = infer(&store, level, &PyramidFeatures::new(levels).unwrap()).unwrap();
    let emb_ref = emb_ref.unwrap();

    unsafe {
        let mut m: *mut EgclModel = ptr::null_mut();
        assert_eq!(egcl_model_load(cpath(&path).as_ptr(), &mut m), EgclStatus::Ok);
        let (mut c, mut d) = (0usize, 0usize);
        assert_eq!(egcl_model_info(m, 3, &mut c, &mut d), EgclStatus::Ok);
        assert_eq!((c, d), (3, 4));
        assert_eq!(egcl_model_info(m, 6, &mut c, &mut d), EgclStatus::InvalidArgument);

        let mut p = 0.0;
        let mut emb = [0.0; 4];
        let mut emb_len = 0usize;
        let st = egcl_model_infer(m, 3, feats.as_ptr(), n, &mut p, emb.as_mut_ptr(), 4, &mut emb_len);
        assert_eq!(st, EgclStatus::Ok, "{}", last_error());
        assert_eq!(p.to_bits(), p_ref.to_bits());
        assert_eq!(emb_len, 4);
        assert_eq!(emb.to_vec(), emb_ref);

        let st = egcl_model_infer(m, 3, feats.as_ptr(), n, &mut p, emb.as_mut_ptr(), 2, &mut emb_len);
        assert_eq!(st, EgclStatus::BufferTooSmall);
        assert_eq!(emb_len, 4);
        let st = egcl_model_infer(m, 2, feats.as_ptr(), n, &mut p, emb.as_mut_ptr(), 4, &mut emb_len);
        assert_eq!(st, EgclStatus::ShapeMismatch);
        egcl_model_free(m);
    }
}

#[test]
fn infonce_with_identical_vectors_is_ln_of_b_plus_one() {
    let e = unit(&[1.0, 2.0, 2.0]);
    let negs: Vec<f64> = e.iter().cycle().take(9).copied().collect();
    let mut loss = 0.0;
    unsafe {
        assert_eq!(
            egcl_infonce(e.as_ptr(), e.as_ptr(), negs.as_ptr(), 3, 3, 0.1, &mut loss),
            EgclStatus::Ok
        );
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(
            egcl_infonce(e.as_ptr(), e.as_ptr(), negs.as_ptr(), 3, 3, 0.0, &mut loss),
            EgclStatus::InvalidArgument
        );
        assert_eq!(
            egcl_infonce(e.as_ptr(), ptr::null(), negs.as_ptr(), 3, 3, 0.1, &mut loss),
            EgclStatus::NullPointer
        );
    }
}

#[test]
fn fused_confidence() {
    let mut c = 0.0;
    unsafe {
        assert_eq!(egcl_fuse_confidence(0.8, 0.3, 0.4, 0.2, 0.1, EGCL_SCORE_VERBATIM, &mut c), EgclStatus::Ok);
        assert!((c - (0.7 * 0.8 + 0.2 * 0.3 + 0.1 * 0.4)).abs() < 1e-15);
        assert_eq!(egcl_fuse_confidence(0.8, 0.3, 0.4, 0.2, 0.1, EGCL_SCORE_SIMILARITY, &mut c), EgclStatus::Ok);
        assert!((c - (0.7 * 0.8 + 0.2 * 0.7 + 0.1 * 0.6)).abs() < 1e-15);
        assert_eq!(egcl_fuse_confidence(0.8, 0.3, 0.4, 0.7, 0.4, 0, &mut c), EgclStatus::InvalidArgument);
        assert_eq!(egcl_fuse_confidence(0.8, 0.3, 0.4, 0.2, 0.1, 7, &mut c), EgclStatus::InvalidArgument);
    }
}

#[test]
fn mr2_hand_case() {
    // One image, two pedestrians, a TP at 0.9 then a FP at 0.5: the curve is
    // (fppi 0, mr 0.5) then (fppi 1, mr 0.5), so every anchor reads 0.5.
    let conf = [0.9, 0.5];
    let tp = [1u8, 0];
    let mut v = 0.0;
    let mut anchors = [0.0; EGCL_ANCHOR_COUNT];
    unsafe {
        assert_eq!(egcl_mr2(conf.as_ptr(), tp.as_ptr(), 2, 2, 1, &mut v, anchors.as_mut_ptr()), EgclStatus::Ok);
        assert!((v - 0.5).abs() < 1e-12);
        assert!(anchors.iter().all(|a| (a - 0.5).abs() < 1e-12));

        assert_eq!(egcl_mr2(ptr::null(), ptr::null(), 0, 3, 4, &mut v, ptr::null_mut()), EgclStatus::Ok);
        assert_eq!(v, 1.0);
        assert_eq!(egcl_mr2(conf.as_ptr(), tp.as_ptr(), 2, 0, 1, &mut v, ptr::null_mut()), EgclStatus::InvalidArgument);
        assert_eq!(egcl_mr2(conf.as_ptr(), tp.as_ptr(), 2, 2, 0, &mut v, ptr::null_mut()), EgclStatus::InvalidArgument);

        let mut a = [0.0; EGCL_ANCHOR_COUNT];
        assert_eq!(egcl_fppi_anchors(a.as_mut_ptr()), EgclStatus::Ok);
        for (i, x) in a.iter().enumerate() {
            assert!((x - 10f64.powf(-2.0 + 0.25 * i as f64)).abs() < 1e-12);
        }
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(egcl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
