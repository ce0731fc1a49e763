//! C ABI over `asg-core`.
//!
//! Every fallible function returns an [`AsgStatus`]; on failure the message
//! is available from [`asg_last_error`] until the next call on the same
//! thread. Handles are opaque, owned by the caller, and released with the
//! matching `_free` function. Handles are not thread-safe: use each one from
//! a single thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use asg_core::benchmark::{generate_range, Dataset, DomainKind, DomainSpec, IMAGE_SIZE};
use asg_core::harness::{self, RunConfig};
use asg_core::nets::{ActionMode, Architecture, Checkpoint, Classifier, DualHeadModel, PolicyNetwork};
use asg_core::rng;
use asg_core::tensor::{no_grad, Tensor};
use asg_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Format = 4,
    Io = 5,
    Runtime = 6,
    Panic = 7,
}

/// Domain selector for [`asg_dataset_generate`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsgDomain {
    Base = 0,
    SyntheticSource = 1,
    RealTarget = 2,
}

/// Dual-head model: live backbone, new head, frozen reference.
pub struct AsgModel {
    inner: DualHeadModel,
}

/// Rendered image set.
pub struct AsgDataset {
    inner: Dataset,
}

/// Recurrent learning-rate policy.
pub struct AsgPolicy {
    inner: PolicyNetwork,
    rng: rng::Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AsgStatus {
    match e {
        Error::Config(_) => AsgStatus::Config,
        Error::Format(_) => AsgStatus::Format,
        Error::Io(_) => AsgStatus::Io,
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => {
            AsgStatus::InvalidArgument
        }
        Error::Stage { source, .. } => status_of(source),
        _ => AsgStatus::Runtime,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (AsgStatus, String)>) -> AsgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AsgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            AsgStatus::Panic
        }
    }
}

fn core<T>(r: asg_core::Result<T>) -> Result<T, (AsgStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (AsgStatus, String) {
    (AsgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (AsgStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (AsgStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (AsgStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (AsgStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn asg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map(|c| c.as_ptr()).unwrap_or(ptr::null()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn asg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Side length of the square single-channel images.
#[no_mangle]
pub extern "C" fn asg_image_size() -> usize {
    IMAGE_SIZE
}

/// Randomly initialized model of a registered architecture.
///
/// # Safety
/// `arch` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn asg_model_new(arch: *const c_char, seed: u64, out: *mut *mut AsgModel) -> AsgStatus {
    guard(|| {
        let arch = str_arg(arch, "arch")?;
        let out = out_ptr(out, "out")?;
        let inner = core(DualHeadModel::build(arch, seed))?;
        *out = Box::into_raw(Box::new(AsgModel { inner }));
        Ok(())
    })
}

/// Model around a saved reference classifier (as written by `asg pretrain`)
/// with a fresh new head.
///
/// # Safety
/// `arch` and `path` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn asg_model_from_reference(
    arch: *const c_char,
    path: *const c_char,
    new_head_seed: u64,
    out: *mut *mut AsgModel,
) -> AsgStatus {
    guard(|| {
        let arch = core(Architecture::by_name(str_arg(arch, "arch")?))?;
        let path = str_arg(path, "path")?;
        let out = out_ptr(out, "out")?;
        let ck = core(Checkpoint::load(Path::new(path)))?;
        let classifier = core(Classifier::from_checkpoint(&arch, &ck))?;
        let inner = DualHeadModel::from_pretrained(&classifier, new_head_seed);
        *out = Box::into_raw(Box::new(AsgModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn asg_model_free(model: *mut AsgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of optimization coordinates.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn asg_model_num_coordinates(model: *const AsgModel, out: *mut usize) -> AsgStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out_ptr(out, "out")? = m.inner.coordinate_map().len();
        Ok(())
    })
}

/// Number of new-head logits per image (classes × output positions).
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn asg_model_new_logits_per_image(model: *const AsgModel, out: *mut usize) -> AsgStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let a = &m.inner.arch;
        let positions = match a.kind {
            asg_core::nets::ArchKind::ToyCnn => 1,
            asg_core::nets::ArchKind::ToyDenseNet => a.dense_output_size(a.image_size).pow(2),
        };
        *out_ptr(out, "out")? = a.new_classes * positions;
        Ok(())
    })
}

fn forward_into(
    images: &[f32],
    n: usize,
    out: &mut [f32],
    f: impl FnOnce(&Tensor) -> asg_core::Result<Tensor>,
) -> Result<(), (AsgStatus, String)> {
    let x = core(Tensor::new(&[n, 1, IMAGE_SIZE, IMAGE_SIZE], images.to_vec()))?;
    let y = core(no_grad(|| f(&x)))?;
    if y.numel() != out.len() {
        return Err((
            AsgStatus::InvalidArgument,
            format!("output buffer holds {} values, result has {}", out.len(), y.numel()),
        ));
    }
    out.copy_from_slice(&y.values());
    Ok(())
}

/// New-head logits for `n` images of `asg_image_size()²` pixels each.
///
/// # Safety
/// `images` must hold `n · size²` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn asg_model_forward_new(
    model: *const AsgModel,
    images: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> AsgStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if images.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let imgs = std::slice::from_raw_parts(images, n * IMAGE_SIZE * IMAGE_SIZE);
        let out = std::slice::from_raw_parts_mut(out, out_len);
        forward_into(imgs, n, out, |x| m.inner.forward_new(x))
    })
}

/// Old-task logits through the live backbone (`n × old_classes`).
///
/// # Safety
/// As [`asg_model_forward_new`].
#[no_mangle]
pub unsafe extern "C" fn asg_model_forward_old(
    model: *const AsgModel,
    images: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> AsgStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if images.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let imgs = std::slice::from_raw_parts(images, n * IMAGE_SIZE * IMAGE_SIZE);
        let out = std::slice::from_raw_parts_mut(out, out_len);
        forward_into(imgs, n, out, |x| m.inner.forward_old_live(x))
    })
}

/// Save every named model tensor as an ASG1 checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn asg_model_save(model: *const AsgModel, path: *const c_char) -> AsgStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let path = str_arg(path, "path")?;
        let named = m.inner.named_tensors();
        let ck = Checkpoint::from_tensors(named.iter().map(|(n, t)| (n.as_str(), t)));
        core(ck.save(Path::new(path)))
    })
}

/// Render samples `start .. start + count` of a domain.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn asg_dataset_generate(
    domain: AsgDomain,
    seed: u64,
    start: u64,
    count: u64,
    out: *mut *mut AsgDataset,
) -> AsgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let kind = match domain {
            AsgDomain::Base => DomainKind::Base,
            AsgDomain::SyntheticSource => DomainKind::SyntheticSource,
            AsgDomain::RealTarget => DomainKind::RealTarget,
        };
        let end = start
            .checked_add(count)
            .ok_or_else(|| (AsgStatus::InvalidArgument, "sample range overflows".to_string()))?;
        let inner = core(generate_range(&DomainSpec::new(kind, seed), start, end))?;
        *out = Box::into_raw(Box::new(AsgDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `data` must be NULL or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn asg_dataset_free(data: *mut AsgDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// # Safety
/// `data` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn asg_dataset_len(data: *const AsgDataset, out: *mut usize) -> AsgStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(data, "dataset")?.inner.len();
        Ok(())
    })
}

/// Copy image `index` (`size²` floats) and its class label.
///
/// # Safety
/// `pixels` must hold `pixels_len` floats; `class_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn asg_dataset_sample(
    data: *const AsgDataset,
    index: usize,
    pixels: *mut f32,
    pixels_len: usize,
    class_out: *mut u32,
) -> AsgStatus {
    guard(|| {
        let d = &handle(data, "dataset")?.inner;
        if index >= d.len() {
            return Err((
                AsgStatus::InvalidArgument,
                format!("index {index} out of range for {} samples", d.len()),
            ));
        }
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let s = d.sample(index);
        if pixels_len != s.image.len() {
            return Err((
                AsgStatus::InvalidArgument,
                format!("pixel buffer holds {pixels_len} values, image has {}", s.image.len()),
            ));
        }
        std::slice::from_raw_parts_mut(pixels, pixels_len).copy_from_slice(&s.image);
        *out_ptr(class_out, "class_out")? = s.class as u32;
        Ok(())
    })
}

/// Load a policy saved by an `l2o_train` run.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn asg_policy_load(path: *const c_char, seed: u64, out: *mut *mut AsgPolicy) -> AsgStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_ptr(out, "out")?;
        let ck = core(Checkpoint::load(Path::new(path)))?;
        let inner = core(PolicyNetwork::from_checkpoint(&ck))?;
        *out = Box::into_raw(Box::new(AsgPolicy {
            inner,
            rng: rng::stream(seed, "ffi-policy", 0),
        }));
        Ok(())
    })
}

/// # Safety
/// `policy` must be NULL or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn asg_policy_free(policy: *mut AsgPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Observation length and number of controlled coordinates.
///
/// # Safety
/// `policy` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn asg_policy_dims(
    policy: *const AsgPolicy,
    obs_dim: *mut usize,
    coordinates: *mut usize,
) -> AsgStatus {
    guard(|| {
        let p = &handle(policy, "policy")?.inner;
        *out_ptr(obs_dim, "obs_dim")? = p.obs_dim;
        *out_ptr(coordinates, "coordinates")? = p.coordinates();
        Ok(())
    })
}

/// Zero the recurrent state.
///
/// # Safety
/// `policy` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn asg_policy_reset(policy: *mut AsgPolicy) -> AsgStatus {
    guard(|| {
        out_ptr(policy, "policy")?.inner.reset_state();
        Ok(())
    })
}

/// One frozen policy step: writes one action index in 0..categories per
/// coordinate. `greedy` != 0 takes the argmax, otherwise samples.
///
/// # Safety
/// `obs` must hold `obs_len` floats and `actions` `actions_len` entries.
#[no_mangle]
pub unsafe extern "C" fn asg_policy_act(
    policy: *mut AsgPolicy,
    obs: *const f32,
    obs_len: usize,
    greedy: i32,
    actions: *mut u32,
    actions_len: usize,
) -> AsgStatus {
    guard(|| {
        let p = out_ptr(policy, "policy")?;
        if obs.is_null() || actions.is_null() {
            return Err(null("buffer"));
        }
        if actions_len != p.inner.coordinates() {
            return Err((
                AsgStatus::InvalidArgument,
                format!("action buffer holds {actions_len}, policy has {} coordinates", p.inner.coordinates()),
            ));
        }
        let obs = std::slice::from_raw_parts(obs, obs_len);
        let mode = if greedy != 0 { ActionMode::Greedy } else { ActionMode::Sampled };
        let step = core(no_grad(|| p.inner.step(obs, mode, &mut p.rng)))?;
        let out = std::slice::from_raw_parts_mut(actions, actions_len);
        for (o, &a) in out.iter_mut().zip(&step.action.indices) {
            *o = a as u32;
        }
        Ok(())
    })
}

/// Run the experiment described by a config file, writing its logs.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn asg_run_config(config_path: *const c_char) -> AsgStatus {
    guard(|| {
        let path = str_arg(config_path, "config_path")?;
        let cfg = core(RunConfig::from_file(Path::new(path)))?;
        core(harness::run_experiment(&cfg)).map(|_| ())
    })
}

/// Run the invariant checks; `failed` receives the number of failures.
///
/// # Safety
/// `failed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn asg_verify(seed: u64, failed: *mut usize) -> AsgStatus {
    guard(|| {
        let out = out_ptr(failed, "failed")?;
        *out = harness::verify::run_all(seed).iter().filter(|r| !r.passed).count();
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = asg_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn unknown_arch_sets_error() {
        let mut m: *mut AsgModel = ptr::null_mut();
        let st = unsafe { asg_model_new(c"resnet".as_ptr(), 0, &mut m) };
        assert_eq!(st, AsgStatus::InvalidArgument);
        assert!(m.is_null());
        assert!(last_error().contains("resnet"));
    }

    #[test]
    fn null_handles_rejected() {
        let mut n = 0usize;
        let st = unsafe { asg_model_num_coordinates(ptr::null(), &mut n) };
        assert_eq!(st, AsgStatus::NullPointer);
        unsafe { asg_model_free(ptr::null_mut()) };
    }

    #[test]
    fn forward_through_handles() {
        let mut m: *mut AsgModel = ptr::null_mut();
        assert_eq!(unsafe { asg_model_new(c"toy_cnn".as_ptr(), 1, &mut m) }, AsgStatus::Ok);
        assert!(asg_last_error().is_null());
        let mut coords = 0;
        assert_eq!(unsafe { asg_model_num_coordinates(m, &mut coords) }, AsgStatus::Ok);
        assert_eq!(coords, 5);

        let mut d: *mut AsgDataset = ptr::null_mut();
        assert_eq!(
            unsafe { asg_dataset_generate(AsgDomain::RealTarget, 3, 0, 2, &mut d) },
            AsgStatus::Ok
        );
        let px = asg_image_size() * asg_image_size();
        let mut images = vec![0.0f32; 2 * px];
        for i in 0..2 {
            let mut class = 99;
            let st = unsafe { asg_dataset_sample(d, i, images[i * px..].as_mut_ptr(), px, &mut class) };
            assert_eq!(st, AsgStatus::Ok);
            assert_eq!(class as usize, i % 4);
        }
        let mut per = 0;
        assert_eq!(unsafe { asg_model_new_logits_per_image(m, &mut per) }, AsgStatus::Ok);
        let mut logits = vec![0.0f32; 2 * per];
        let st = unsafe { asg_model_forward_new(m, images.as_ptr(), 2, logits.as_mut_ptr(), logits.len()) };
        assert_eq!(st, AsgStatus::Ok);
        assert!(logits.iter().all(|v| v.is_finite()));
        let mut short = vec![0.0f32; 3];
        let st = unsafe { asg_model_forward_new(m, images.as_ptr(), 2, short.as_mut_ptr(), 3) };
        assert_eq!(st, AsgStatus::InvalidArgument);
        unsafe {
            asg_dataset_free(d);
            asg_model_free(m);
        }
    }

    #[test]
    fn policy_round_trip_through_file() {
        let dir = std::env::temp_dir().join(format!("asg-ffi-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("policy.asg1");
        let p = PolicyNetwork::new(10, 5, 8, 11, 4).unwrap();
        p.to_checkpoint().save(&path).unwrap();
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        let mut h: *mut AsgPolicy = ptr::null_mut();
        assert_eq!(unsafe { asg_policy_load(cpath.as_ptr(), 0, &mut h) }, AsgStatus::Ok);
        let (mut od, mut nc) = (0, 0);
        assert_eq!(unsafe { asg_policy_dims(h, &mut od, &mut nc) }, AsgStatus::Ok);
        assert_eq!((od, nc), (10, 5));
        let obs = [0.5f32; 10];
        let mut a = [0u32; 5];
        let mut b = [0u32; 5];
        unsafe {
            assert_eq!(asg_policy_act(h, obs.as_ptr(), 10, 1, a.as_mut_ptr(), 5), AsgStatus::Ok);
            asg_policy_reset(h);
            assert_eq!(asg_policy_act(h, obs.as_ptr(), 10, 1, b.as_mut_ptr(), 5), AsgStatus::Ok);
            asg_policy_free(h);
        }
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| x <= 10));
        std::fs::remove_dir_all(&dir).ok();
    }
}
