use std::ffi::{c_char, CString};
use std::ptr;

use opflow::{GaussianProcessSpec, ModelConfig, OpFlowModel, PartitionMode};
use opflow_ffi::*;

fn saved_model(dir: &tempfile::TempDir) -> (CString, OpFlowModel) {
    let latent = GaussianProcessSpec::new(0.1, 0.5).unwrap();
    let config = ModelConfig {
        blocks: 2,
        modes: 4,
        width: 4,
        depth: 1,
        ..ModelConfig::new(1, 1, PartitionMode::Domain, latent)
    };
    let model = OpFlowModel::new_random(config, 7).unwrap();
    let path = dir.path().join("m.opfl");
    opflow::checkpoint::save(&model, &path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), model)
}

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let n = unsafe { opflow_last_error(buf.as_mut_ptr() as *mut c_char, buf.len()) };
    buf.truncate(n.min(255));
    String::from_utf8(buf).unwrap()
}

#[test]
fn load_sample_invert_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (path, reference) = saved_model(&dir);
    let mut handle: *mut OpflowModel = ptr::null_mut();
    assert_eq!(unsafe { opflow_model_load(path.as_ptr(), &mut handle) }, OpflowStatus::Ok);
    assert!(!handle.is_null());

    let (mut channels, mut dims, mut params) = (0usize, 0usize, 0usize);
    assert_eq!(
        unsafe { opflow_model_info(handle, &mut channels, &mut dims, &mut params) },
        OpflowStatus::Ok
    );
    assert_eq!((channels, dims, params), (1, 1, reference.parameter_count()));

    let res = [16usize];
    let count = 3;
    let mut u = vec![0.0; count * 16];
    let st = unsafe { opflow_model_sample(handle, 1, res.as_ptr(), count, 11, u.as_mut_ptr(), u.len()) };
    assert_eq!(st, OpflowStatus::Ok);
    let direct = reference.sample(&opflow::Grid::line(16).unwrap(), count, 11).unwrap();
    assert_eq!(u, direct.values());

    let mut a = vec![0.0; u.len()];
    let mut logdet = vec![0.0; count];
    let st = unsafe {
        opflow_model_inverse(handle, 1, res.as_ptr(), count, u.as_ptr(), a.as_mut_ptr(), a.len(), logdet.as_mut_ptr())
    };
    assert_eq!(st, OpflowStatus::Ok);
    let mut back = vec![0.0; u.len()];
    let st = unsafe { opflow_model_forward(handle, 1, res.as_ptr(), count, a.as_ptr(), back.as_mut_ptr(), back.len()) };
    assert_eq!(st, OpflowStatus::Ok);
    let err = u.iter().zip(&back).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "round trip error {err}");

    let mut ll = vec![0.0; count];
    let st = unsafe { opflow_model_log_likelihood(handle, 1, res.as_ptr(), count, u.as_ptr(), ll.as_mut_ptr()) };
    assert_eq!(st, OpflowStatus::Ok);
    assert!(ll.iter().all(|v| v.is_finite()));

    unsafe { opflow_model_free(handle) };
}

#[test]
fn errors_become_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(&dir);
    let mut handle: *mut OpflowModel = ptr::null_mut();

    let missing = CString::new(dir.path().join("nope.opfl").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { opflow_model_load(missing.as_ptr(), &mut handle) }, OpflowStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("nope.opfl"));

    let junk = dir.path().join("junk.opfl");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { opflow_model_load(junk.as_ptr(), &mut handle) }, OpflowStatus::Format);

    assert_eq!(unsafe { opflow_model_load(ptr::null(), &mut handle) }, OpflowStatus::NullPointer);
    assert_eq!(
        unsafe { opflow_model_info(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) },
        OpflowStatus::NullPointer
    );

    assert_eq!(unsafe { opflow_model_load(path.as_ptr(), &mut handle) }, OpflowStatus::Ok);
    let res = [16usize];
    let mut small = vec![0.0; 10];
    let st = unsafe { opflow_model_sample(handle, 1, res.as_ptr(), 2, 1, small.as_mut_ptr(), small.len()) };
    assert_eq!(st, OpflowStatus::BufferTooSmall);
    assert!(last_error().contains("32"));

    let bad = [0usize];
    let st = unsafe { opflow_model_sample(handle, 1, bad.as_ptr(), 1, 1, small.as_mut_ptr(), small.len()) };
    assert_ne!(st, OpflowStatus::Ok);

    // success clears the message
    let mut info = 0usize;
    assert_eq!(unsafe { opflow_model_info(handle, &mut info, ptr::null_mut(), ptr::null_mut()) }, OpflowStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe { opflow_model_free(handle) };
    unsafe { opflow_model_free(ptr::null_mut()) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/opflow.h")).unwrap();
    for name in [
        "opflow_model_load",
        "opflow_model_free",
        "opflow_model_sample",
        "opflow_model_inverse",
        "opflow_model_forward",
        "opflow_model_log_likelihood",
        "opflow_last_error",
        "OPFLOW_STATUS_OK",
        "typedef struct OpflowModel OpflowModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
