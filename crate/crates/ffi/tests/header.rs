use std::ffi::{CStr, CString};
use std::ptr;

use asg_ffi::*;

const HEADER: &str = include_str!("../include/asg.h");
const SOURCE: &str = include_str!("../src/lib.rs");

#[test]
fn header_declares_every_exported_function() {
    let exported: Vec<&str> = SOURCE
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exported.len() >= 20);
    for name in exported {
        assert!(HEADER.contains(&format!("{name}(")), "header lacks {name}");
    }
}

#[test]
fn header_has_status_codes_and_opaque_handles() {
    for s in [
        "ASG_STATUS_OK = 0",
        "ASG_STATUS_NULL_POINTER = 1",
        "ASG_STATUS_INVALID_ARGUMENT = 2",
        "ASG_STATUS_PANIC = 7",
        "typedef struct AsgModel AsgModel;",
        "typedef struct AsgDataset AsgDataset;",
        "typedef struct AsgPolicy AsgPolicy;",
        "#ifndef ASG_H",
    ] {
        assert!(HEADER.contains(s), "header lacks {s}");
    }
}

#[test]
fn dataset_and_model_round_trip_through_the_abi() {
    unsafe {
        let mut data = ptr::null_mut();
        assert_eq!(asg_dataset_generate(AsgDomain::RealTarget, 1, 0, 3, &mut data), AsgStatus::Ok);
        let mut n = 0;
        assert_eq!(asg_dataset_len(data, &mut n), AsgStatus::Ok);
        assert_eq!(n, 3);
        let px = asg_image_size() * asg_image_size();
        let mut images = vec![0f32; 3 * px];
        let mut class = 0u32;
        for i in 0..3 {
            assert_eq!(asg_dataset_sample(data, i, images[i * px..].as_mut_ptr(), px, &mut class), AsgStatus::Ok);
            assert!(class < 4);
        }
        assert_eq!(
            asg_dataset_sample(data, 3, images.as_mut_ptr(), px, &mut class),
            AsgStatus::InvalidArgument
        );
        assert!(!asg_last_error().is_null());
        asg_dataset_free(data);

        let arch = CString::new("toy_cnn").unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(asg_model_new(arch.as_ptr(), 2, &mut model), AsgStatus::Ok);
        let mut k = 0;
        assert_eq!(asg_model_new_logits_per_image(model, &mut k), AsgStatus::Ok);
        let mut logits = vec![0f32; 3 * k];
        assert_eq!(asg_model_forward_new(model, images.as_ptr(), 3, logits.as_mut_ptr(), logits.len()), AsgStatus::Ok);
        assert!(logits.iter().all(|v| v.is_finite()));
        // undersized output buffers are refused
        assert_eq!(
            asg_model_forward_new(model, images.as_ptr(), 3, logits.as_mut_ptr(), k),
            AsgStatus::InvalidArgument
        );
        asg_model_free(model);
    }
}

#[test]
fn errors_carry_messages() {
    unsafe {
        let bogus = CString::new("resnet").unwrap();
        let mut model = ptr::null_mut();
        assert_ne!(asg_model_new(bogus.as_ptr(), 0, &mut model), AsgStatus::Ok);
        assert!(model.is_null());
        let msg = CStr::from_ptr(asg_last_error()).to_string_lossy().into_owned();
        assert!(msg.contains("resnet"), "{msg}");
        let missing = CString::new("/nonexistent/config.toml").unwrap();
        assert_eq!(asg_run_config(missing.as_ptr()), AsgStatus::Config);
        assert_eq!(asg_run_config(ptr::null()), AsgStatus::NullPointer);
        assert!(CStr::from_ptr(asg_version()).to_str().unwrap().starts_with("0."));
    }
}
