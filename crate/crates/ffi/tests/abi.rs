use std::ffi::{CStr, CString};
use std::ptr;

use scarlet_kit_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sk_last_error()) }.to_string_lossy().into_owned()
}

fn t1() -> *mut SkSpace {
    let name = CString::new("t1").unwrap();
    let mut space = ptr::null_mut();
    assert_eq!(unsafe { sk_space_resolve(name.as_ptr(), &mut space) }, SkStatus::Ok);
    assert!(!space.is_null());
    space
}

#[test]
fn cost_matches_the_core_crate() {
    let space = t1();
    let mut layers = 0;
    assert_eq!(unsafe { sk_space_num_layers(space, &mut layers) }, SkStatus::Ok);
    assert_eq!(layers, 4);
    let genes = [1usize; 4];
    let (mut madds, mut params) = (0u64, 0u64);
    let st = unsafe { sk_arch_cost(space, genes.as_ptr(), genes.len(), &mut madds, &mut params) };
    assert_eq!(st, SkStatus::Ok);
    let spec = scarlet_kit::space::SpaceSpec::t1();
    let arch = scarlet_kit::space::Architecture::new(genes.to_vec());
    assert_eq!(madds, scarlet_kit::space::count_madds(&spec, &arch).unwrap());
    assert_eq!(params, scarlet_kit::space::count_params(&spec, &arch).unwrap());
    unsafe { sk_space_free(space) };
}

#[test]
fn out_of_range_gene_is_reported() {
    let space = t1();
    let genes = [0usize, 0, 9, 0];
    let (mut m, mut p) = (0, 0);
    let st = unsafe { sk_arch_cost(space, genes.as_ptr(), 4, &mut m, &mut p) };
    assert_ne!(st, SkStatus::Ok);
    assert!(!last_error().is_empty());
    unsafe { sk_space_free(space) };
}

#[test]
fn null_pointers_are_rejected() {
    let mut out = 0.0;
    let st = unsafe { sk_kendall_tau(ptr::null(), ptr::null(), 3, &mut out) };
    assert_eq!(st, SkStatus::NullPointer);
    assert!(last_error().contains("null"), "{}", last_error());
    let st = unsafe { sk_space_resolve(ptr::null(), ptr::null_mut()) };
    assert_eq!(st, SkStatus::NullPointer);
    unsafe {
        sk_space_free(ptr::null_mut());
        sk_supernet_free(ptr::null_mut());
    }
}

#[test]
fn unknown_space_is_a_config_error() {
    let name = CString::new("no-such-space").unwrap();
    let mut space = ptr::null_mut();
    let st = unsafe { sk_space_resolve(name.as_ptr(), &mut space) };
    assert_ne!(st, SkStatus::Ok);
    assert!(space.is_null());
}

#[test]
fn kendall_tau_through_the_abi() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let rev = [4.0, 3.0, 2.0, 1.0];
    let mut tau = 0.0;
    assert_eq!(unsafe { sk_kendall_tau(a.as_ptr(), a.as_ptr(), 4, &mut tau) }, SkStatus::Ok);
    assert!((tau - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { sk_kendall_tau(a.as_ptr(), rev.as_ptr(), 4, &mut tau) }, SkStatus::Ok);
    assert!((tau + 1.0).abs() < 1e-12);
    let st = unsafe { sk_kendall_tau(a.as_ptr(), a.as_ptr(), 1, &mut tau) };
    assert_eq!(st, SkStatus::InvalidArgument);
}

#[test]
fn fold_pointwise_matches_hand_computation() {
    // w1: 2 -> 1 channels, w2: 1x1 kernel, 1 -> 1
    let w1 = [2.0f32, 3.0];
    let w2 = [5.0f32];
    let mut out = [0.0f32; 2];
    let st = unsafe { sk_fold_pointwise(w1.as_ptr(), 1, 2, w2.as_ptr(), 1, 1, out.as_mut_ptr()) };
    assert_eq!(st, SkStatus::Ok);
    assert_eq!(out, [10.0, 15.0]);
}

#[test]
fn supernet_inference_and_accuracy() {
    let space = t1();
    let mut els = ptr::null_mut();
    assert_eq!(unsafe { sk_space_with_stabilizers(space, true, &mut els) }, SkStatus::Ok);
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { sk_supernet_new(els, 3, &mut net) }, SkStatus::Ok);
    let n = 5;
    let input: Vec<f32> = (0..n * 3 * 16 * 16).map(|i| ((i * 7) % 11) as f32 / 11.0).collect();
    let genes = [0usize, 2, 1, 2];
    let mut logits = vec![0.0f32; n * 4];
    let st = unsafe { sk_supernet_infer(net, genes.as_ptr(), 4, input.as_ptr(), n, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, SkStatus::Ok, "{}", last_error());
    assert!(logits.iter().all(|v| v.is_finite()));

    let labels: Vec<u32> = logits
        .chunks(4)
        .map(|r| (0..4).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap() as u32)
        .collect();
    let mut acc = 0.0;
    let st = unsafe { sk_supernet_accuracy(net, genes.as_ptr(), 4, input.as_ptr(), labels.as_ptr(), n, &mut acc) };
    assert_eq!(st, SkStatus::Ok);
    assert_eq!(acc, 1.0);

    let mut short = vec![0.0f32; 3];
    let st = unsafe { sk_supernet_infer(net, genes.as_ptr(), 4, input.as_ptr(), n, short.as_mut_ptr(), 3) };
    assert_eq!(st, SkStatus::InvalidArgument);
    unsafe {
        sk_supernet_free(net);
        sk_space_free(els);
        sk_space_free(space);
    }
}

#[test]
fn supernet_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = scarlet_kit::space::SpaceSpec::t1();
    let core = scarlet_kit::space::build_supernet(&spec, 9).unwrap();
    core.save(dir.path(), "net").unwrap();
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    let name = CString::new("net").unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { sk_supernet_load(d.as_ptr(), name.as_ptr(), &mut net) }, SkStatus::Ok);
    let input = vec![0.5f32; 3 * 16 * 16];
    let genes = [1usize, 0, 2, 1];
    let mut logits = [0.0f32; 4];
    let st = unsafe { sk_supernet_infer(net, genes.as_ptr(), 4, input.as_ptr(), 1, logits.as_mut_ptr(), 4) };
    assert_eq!(st, SkStatus::Ok);
    let x = scarlet_kit::engine::Tensor::from_vec(core.input_shape(1), input).unwrap();
    let want = core
        .infer_path(&scarlet_kit::space::Architecture::new(genes.to_vec()), &x)
        .unwrap();
    assert_eq!(&logits[..], want.data());

    let missing = CString::new("absent").unwrap();
    let mut none = ptr::null_mut();
    let st = unsafe { sk_supernet_load(d.as_ptr(), missing.as_ptr(), &mut none) };
    assert_eq!(st, SkStatus::Io);
    unsafe { sk_supernet_free(net) };
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/scarlet_kit.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in ["sk_last_error", "sk_kendall_tau", "sk_fold_pointwise", "sk_supernet_infer", "SK_STATUS_OK"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
