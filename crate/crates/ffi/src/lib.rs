//! C interface. Every function returns an [`IfsStatus`]; on failure the
//! message is available from [`ifs_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ifs_collage::arch::{ArchConfig, Model, MoeConfig};
use ifs_collage::cli::{CliError, FailureKind};
use ifs_collage::geometry::{generate, DatasetSpec, PointCloud};
use ifs_collage::ifs::{collage_bound, sample_attractor, RandomIfs, StochasticIfs};
use ifs_collage::ot::{exact_w2, sinkhorn_divergence, SinkhornConfig};
use ifs_collage::train::{load_model, to_state_space, TrainConfig, Trainer};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IfsStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Numeric = 3,
    Io = 4,
    Panic = 5,
}

/// Point cloud with uniform or explicit weights.
pub struct IfsCloud(PointCloud);

/// Trained or loaded architecture.
pub struct IfsModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(IfsStatus, String);

impl<E: Into<CliError>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e: CliError = e.into();
        let status = match e.kind {
            FailureKind::Config => IfsStatus::Config,
            FailureKind::Numeric => IfsStatus::Numeric,
            FailureKind::Io => IfsStatus::Io,
        };
        Failure(status, e.message)
    }
}

fn null(what: &str) -> Failure {
    Failure(IfsStatus::NullPointer, format!("{what} is null"))
}

fn config(msg: impl Into<String>) -> Failure {
    Failure(IfsStatus::Config, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IfsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            IfsStatus::Ok
        }
        Ok(Err(Failure(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            IfsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p).to_str().map(Some).map_err(|_| config(format!("{what} is not UTF-8")))
}

unsafe fn out<T>(p: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

unsafe fn cloud_ref<'a>(p: *const IfsCloud, what: &str) -> Result<&'a PointCloud, Failure> {
    p.as_ref().map(|c| &c.0).ok_or_else(|| null(what))
}

unsafe fn model_ref<'a>(p: *const IfsModel) -> Result<&'a Model, Failure> {
    p.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ifs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Copies `n * dim` coordinates into a new uniform cloud.
///
/// # Safety
/// `coords` must point to `n * dim` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifs_cloud_new(coords: *const f64, n: usize, dim: usize, out_cloud: *mut *mut IfsCloud) -> IfsStatus {
    guard(|| {
        if coords.is_null() {
            return Err(null("coords"));
        }
        let len = n.checked_mul(dim).ok_or_else(|| config("n * dim overflows"))?;
        let v = std::slice::from_raw_parts(coords, len).to_vec();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(config("coordinates must be finite"));
        }
        let c = PointCloud::new(dim, v)?;
        out(out_cloud, boxed(IfsCloud(c)), "out_cloud")
    })
}

/// # Safety
/// `cloud` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ifs_cloud_free(cloud: *mut IfsCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// # Safety
/// `cloud` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifs_cloud_shape(cloud: *const IfsCloud, out_n: *mut usize, out_dim: *mut usize) -> IfsStatus {
    guard(|| {
        let c = cloud_ref(cloud, "cloud")?;
        out(out_n, c.len(), "out_n")?;
        out(out_dim, c.dim(), "out_dim")
    })
}

/// Copies the coordinates into `buf`, which holds `capacity` doubles.
///
/// # Safety
/// `buf` must point to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ifs_cloud_copy_coords(cloud: *const IfsCloud, buf: *mut f64, capacity: usize) -> IfsStatus {
    guard(|| {
        let c = cloud_ref(cloud, "cloud")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let src = c.coords();
        if capacity < src.len() {
            return Err(config(format!("buffer holds {capacity} values, cloud has {}", src.len())));
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
        Ok(())
    })
}

/// Noisy two-moons sample (noise 0.1, radius 2).
///
/// # Safety
/// `out_cloud` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifs_two_moons(n: usize, seed: u64, out_cloud: *mut *mut IfsCloud) -> IfsStatus {
    guard(|| {
        let c = generate(&DatasetSpec::two_moons(n, seed))?;
        out(out_cloud, boxed(IfsCloud(c)), "out_cloud")
    })
}

/// Chaos-game sample of the Sierpinski gasket.
///
/// # Safety
/// `out_cloud` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifs_sierpinski_chaos(n: usize, burn_in: usize, seed: u64, out_cloud: *mut *mut IfsCloud) -> IfsStatus {
    guard(|| {
        let c = sample_attractor(&StochasticIfs::sierpinski(), n, burn_in, seed, false)?;
        out(out_cloud, boxed(IfsCloud(c)), "out_cloud")
    })
}

/// Debiased Sinkhorn divergence on the distance scale.
///
/// # Safety
/// Both clouds must be live handles; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifs_sinkhorn_distance(
    a: *const IfsCloud,
    b: *const IfsCloud,
    blur: f64,
    max_iters: usize,
    out_value: *mut f64,
) -> IfsStatus {
    guard(|| {
        let cfg = SinkhornConfig { blur, max_iters, ..SinkhornConfig::default() };
        let r = sinkhorn_divergence(cloud_ref(a, "a")?, cloud_ref(b, "b")?, &cfg)?;
        out(out_value, r.value, "out_value")
    })
}

/// Exact W2 between small clouds.
///
/// # Safety
/// Both clouds must be live handles; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifs_exact_w2(a: *const IfsCloud, b: *const IfsCloud, out_value: *mut f64) -> IfsStatus {
    guard(|| {
        let r = exact_w2(cloud_ref(a, "a")?, cloud_ref(b, "b")?)?;
        out(out_value, r.value, "out_value")
    })
}

/// `epsilon / (1 - c)`.
///
/// # Safety
/// `out_bound` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifs_collage_bound(epsilon: f64, c: f64, out_bound: *mut f64) -> IfsStatus {
    guard(|| {
        let b = collage_bound(epsilon, c)?;
        out(out_bound, b.bound, "out_bound")
    })
}

/// Trains a model on `data`. `arch_toml` holds an architecture table
/// (`kind = "moe"` etc.) and `train_toml` a training table; either may be
/// null for the two-moons mixture defaults. When `checkpoint` is non-null the
/// result is saved there.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `data` must be live;
/// `out_model` and `out_final_loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifs_train(
    arch_toml: *const c_char,
    train_toml: *const c_char,
    data: *const IfsCloud,
    checkpoint: *const c_char,
    out_model: *mut *mut IfsModel,
    out_final_loss: *mut f64,
) -> IfsStatus {
    guard(|| {
        let data = cloud_ref(data, "data")?;
        let cfg: TrainConfig = match str_arg(train_toml, "train_toml")? {
            Some(s) => toml::from_str(s).map_err(|e| config(format!("train_toml: {e}")))?,
            None => TrainConfig::default(),
        };
        let arch: ArchConfig = match str_arg(arch_toml, "arch_toml")? {
            Some(s) => toml::from_str(s).map_err(|e| config(format!("arch_toml: {e}")))?,
            None => ArchConfig::Moe(MoeConfig::two_moons(cfg.contraction_cap.unwrap_or(0.9), cfg.sigma)),
        };
        let ckpt = str_arg(checkpoint, "checkpoint")?.map(PathBuf::from);
        use rand::SeedableRng;
        let model = arch.build(&mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let state = to_state_space(data, model.dim())?;
        let mut t = Trainer::new(model, cfg)?;
        t.run(&state)?;
        if let Some(p) = &ckpt {
            t.save_checkpoint(p)?;
        }
        let loss = t.report().last().map(|r| r.loss).unwrap_or(f64::NAN);
        let (model, _) = t.into_parts();
        out(out_final_loss, loss, "out_final_loss")?;
        out(out_model, boxed(IfsModel(model)), "out_model")
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifs_model_load(path: *const c_char, out_model: *mut *mut IfsModel) -> IfsStatus {
    guard(|| {
        let p = str_arg(path, "path")?.ok_or_else(|| null("path"))?;
        let m = load_model(std::path::Path::new(p))?;
        out(out_model, boxed(IfsModel(m)), "out_model")
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ifs_model_free(model: *mut IfsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// State dimension and parameter count.
///
/// # Safety
/// `model` must be live; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifs_model_info(model: *const IfsModel, out_dim: *mut usize, out_params: *mut usize) -> IfsStatus {
    guard(|| {
        let m = model_ref(model)?;
        out(out_dim, m.dim(), "out_dim")?;
        out(out_params, m.param_count(), "out_params")
    })
}

/// Certified contraction constant, or a negative value when none exists.
///
/// # Safety
/// `model` must be live; `out_cap` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifs_model_certified_cap(model: *const IfsModel, out_cap: *mut f64) -> IfsStatus {
    guard(|| {
        let m = model_ref(model)?;
        out(out_cap, m.certified_cap().unwrap_or(-1.0), "out_cap")
    })
}

/// `n` attractor samples after `burn_in` Markov steps. Uncertified models
/// are refused unless `allow_uncertified` is non-zero.
///
/// # Safety
/// `model` must be live; `out_cloud` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifs_model_sample_attractor(
    model: *const IfsModel,
    n: usize,
    burn_in: usize,
    seed: u64,
    allow_uncertified: i32,
    out_cloud: *mut *mut IfsCloud,
) -> IfsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let c = sample_attractor(m, n, burn_in, seed, allow_uncertified != 0)?;
        out(out_cloud, boxed(IfsCloud(c)), "out_cloud")
    })
}
