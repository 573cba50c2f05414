//! C ABI over the blockprune library.
//!
//! Every fallible function returns a [`BpStatus`]; on failure the message is
//! available from [`bp_last_error`] on the same thread. Objects are opaque
//! handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use blockprune::data::{load_cifar10_binary, synth_dataset, Dataset};
use blockprune::model::{build_network, Network, NetworkSpec};
use blockprune::prune::{evaluate_accuracy, greedy_prune, importance_direct};
use blockprune::tensor::Tensor;
use blockprune::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Config = 10,
    Parse = 11,
    Spec = 12,
    Build = 13,
    Validity = 14,
    Range = 15,
    Budget = 16,
    Format = 17,
    CorruptRecord = 18,
    Dataset = 19,
    Checkpoint = 20,
    Dimension = 21,
    Contract = 22,
    Diverged = 23,
    Io = 24,
    Panic = 99,
}

impl From<&Error> for BpStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => BpStatus::Config,
            Error::Parse { .. } => BpStatus::Parse,
            Error::Spec(_) => BpStatus::Spec,
            Error::Build(_) => BpStatus::Build,
            Error::Validity { .. } => BpStatus::Validity,
            Error::Range(_) => BpStatus::Range,
            Error::Budget { .. } => BpStatus::Budget,
            Error::Format { .. } => BpStatus::Format,
            Error::CorruptRecord { .. } => BpStatus::CorruptRecord,
            Error::Dataset(_) => BpStatus::Dataset,
            Error::Checkpoint(_) => BpStatus::Checkpoint,
            Error::Dimension(_) => BpStatus::Dimension,
            Error::Contract(_) => BpStatus::Contract,
            Error::Diverged { .. } => BpStatus::Diverged,
            Error::Io(_) => BpStatus::Io,
        }
    }
}

/// Opaque network handle.
pub struct BpNetwork(Network);

/// Opaque dataset handle.
pub struct BpDataset(Dataset);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BpLatency {
    pub runs: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub min_us: f64,
    pub max_us: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(BpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(BpStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> BpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            BpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(BpStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(BpStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if len < need {
        return Err(Fail(
            BpStatus::BufferTooSmall,
            format!("{what} holds {len} values but {need} are needed"),
        ));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn bp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a named preset (`resnet20`, `resnet56`, `desk`, `mini`) with
/// seeded initialization.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_network_new(name: *const c_char, seed: u64, out: *mut *mut BpNetwork) -> BpStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let spec = NetworkSpec::preset(str_arg(name, "name")?)?;
        *out = boxed(BpNetwork(build_network(&spec, seed)?));
        Ok(())
    })
}

/// Builds a network from a text spec file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_network_from_spec_file(
    path: *const c_char,
    seed: u64,
    out: *mut *mut BpNetwork,
) -> BpStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let spec = NetworkSpec::read(Path::new(str_arg(path, "path")?))?;
        *out = boxed(BpNetwork(build_network(&spec, seed)?));
        Ok(())
    })
}

/// # Safety
/// `net` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bp_network_free(net: *mut BpNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bp_network_load_checkpoint(net: *mut BpNetwork, path: *const c_char) -> BpStatus {
    guard(|| {
        let net = out(net, "net")?;
        net.0.load_checkpoint(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `net` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bp_network_save_checkpoint(net: *const BpNetwork, path: *const c_char) -> BpStatus {
    guard(|| {
        obj(net, "net")?.0.save_checkpoint(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `net` must be a live handle; `params` and `flops` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_network_cost(net: *const BpNetwork, params: *mut u64, flops: *mut u64) -> BpStatus {
    guard(|| {
        let net = &obj(net, "net")?.0;
        *out(params, "params")? = net.param_count() as u64;
        *out(flops, "flops")? = net.flops();
        Ok(())
    })
}

/// Writes the per-sample input shape `[C, H, W]` and the class count.
///
/// # Safety
/// `net` must be a live handle; `shape` must hold 3 values; `classes` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn bp_network_shape(net: *const BpNetwork, shape: *mut usize, classes: *mut usize) -> BpStatus {
    guard(|| {
        let spec = obj(net, "net")?.0.spec();
        slice_out(shape, 3, 3, "shape")?.copy_from_slice(&spec.input_shape);
        *out(classes, "classes")? = spec.num_classes;
        Ok(())
    })
}

/// Copies the removable block indices into `indices` (capacity `cap`) and
/// their count into `len`. With too small a buffer, `len` still receives the
/// required count and `BufferTooSmall` is returned.
///
/// # Safety
/// `net` must be a live handle; `indices` must hold `cap` values; `len` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_network_valid_blocks(
    net: *const BpNetwork,
    indices: *mut usize,
    cap: usize,
    len: *mut usize,
) -> BpStatus {
    guard(|| {
        let valid = obj(net, "net")?.0.valid_blocks();
        *out(len, "len")? = valid.len();
        slice_out(indices, cap, valid.len(), "indices")?[..valid.len()].copy_from_slice(&valid);
        Ok(())
    })
}

/// Returns a new network with the listed blocks removed; `net` is untouched.
///
/// # Safety
/// `net` must be a live handle; `indices` must hold `n` values (or be NULL
/// when `n` is 0); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_network_prune(
    net: *const BpNetwork,
    indices: *const usize,
    n: usize,
    out: *mut *mut BpNetwork,
) -> BpStatus {
    guard(|| {
        let net = &obj(net, "net")?.0;
        let out = self::out(out, "out")?;
        let indices = if n == 0 {
            &[][..]
        } else if indices.is_null() {
            return Err(null("indices"));
        } else {
            std::slice::from_raw_parts(indices, n)
        };
        *out = boxed(BpNetwork(net.prune_set(indices)?));
        Ok(())
    })
}

/// Eval-mode forward pass over `batch` images laid out `[N, C, H, W]`;
/// writes `N × classes` logits.
///
/// # Safety
/// `input` must hold `batch·C·H·W` floats; `logits` must hold `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn bp_network_logits(
    net: *const BpNetwork,
    input: *const f32,
    batch: usize,
    logits: *mut f32,
    cap: usize,
) -> BpStatus {
    guard(|| {
        let net = &obj(net, "net")?.0;
        let [c, h, w] = net.spec().input_shape;
        let n = batch * c * h * w;
        if input.is_null() && n > 0 {
            return Err(null("input"));
        }
        let data = if n == 0 { Vec::new() } else { std::slice::from_raw_parts(input, n).to_vec() };
        let y = net.logits(&Tensor::new(&[batch, c, h, w], data)?)?;
        slice_out(logits, cap, y.numel(), "logits")?[..y.numel()].copy_from_slice(y.data());
        Ok(())
    })
}

/// # Safety
/// `net` must be a live handle; `report` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_measure_latency(
    net: *const BpNetwork,
    runs: usize,
    warmup: usize,
    report: *mut BpLatency,
) -> BpStatus {
    guard(|| {
        let r = blockprune::bench::measure_latency(&obj(net, "net")?.0, runs, warmup)?;
        *out(report, "report")? = BpLatency {
            runs: r.runs,
            mean_us: r.mean_us,
            median_us: r.median_us,
            p95_us: r.p95_us,
            min_us: r.min_us,
            max_us: r.max_us,
        };
        Ok(())
    })
}

/// Seeded synthetic dataset of `classes × per_class` images of shape
/// `[c, h, w]`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_dataset_synth(
    classes: usize,
    per_class: usize,
    c: usize,
    h: usize,
    w: usize,
    seed: u64,
    out: *mut *mut BpDataset,
) -> BpStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        *out = boxed(BpDataset(synth_dataset(classes, per_class, [c, h, w], seed)?));
        Ok(())
    })
}

/// Loads one CIFAR-10 binary batch file (pixels scaled to `[0, 1]`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_dataset_load_cifar10(path: *const c_char, out: *mut *mut BpDataset) -> BpStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        *out = boxed(BpDataset(load_cifar10_binary(&[str_arg(path, "path")?])?));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_dataset_len(ds: *const BpDataset, len: *mut usize) -> BpStatus {
    guard(|| {
        *out(len, "len")? = obj(ds, "ds")?.0.len();
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bp_dataset_free(ds: *mut BpDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `net` and `ds` must be live handles; `accuracy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_evaluate_accuracy(
    net: *const BpNetwork,
    ds: *const BpDataset,
    accuracy: *mut f64,
) -> BpStatus {
    guard(|| {
        *out(accuracy, "accuracy")? = evaluate_accuracy(&obj(net, "net")?.0, &obj(ds, "ds")?.0)?;
        Ok(())
    })
}

/// Direct-removal importance: for every valid block (in index order) writes
/// its index and the validation accuracy with that block removed.
///
/// # Safety
/// `indices` and `accuracies` must each hold `cap` values; `len` and
/// `base_accuracy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_importance_direct(
    net: *const BpNetwork,
    ds: *const BpDataset,
    indices: *mut usize,
    accuracies: *mut f64,
    cap: usize,
    len: *mut usize,
    base_accuracy: *mut f64,
) -> BpStatus {
    guard(|| {
        let t = importance_direct(&obj(net, "net")?.0, &obj(ds, "ds")?.0)?;
        let n = t.entries.len();
        *out(len, "len")? = n;
        *out(base_accuracy, "base_accuracy")? = t.base_accuracy;
        let idx = slice_out(indices, cap, n, "indices")?;
        let acc = slice_out(accuracies, cap, n, "accuracies")?;
        for (k, &(i, a)) in t.entries.iter().enumerate() {
            idx[k] = i;
            acc[k] = a;
        }
        Ok(())
    })
}

/// Greedy pruning of `k` blocks without fine-tuning. Writes the removal
/// order and the accuracy after each step, and the pruned network to `out`.
///
/// # Safety
/// `removed` and `accuracies` must hold `k` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_greedy_prune(
    net: *const BpNetwork,
    ds: *const BpDataset,
    k: usize,
    removed: *mut usize,
    accuracies: *mut f64,
    out: *mut *mut BpNetwork,
) -> BpStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let run = greedy_prune(&obj(net, "net")?.0, &obj(ds, "ds")?.0, k, None)?;
        let rem = slice_out(removed, k, k, "removed")?;
        let acc = slice_out(accuracies, k, k, "accuracies")?;
        for (s, step) in run.trajectory.steps.iter().enumerate() {
            rem[s] = step.removed;
            acc[s] = step.acc_raw;
        }
        *out = boxed(BpNetwork(run.network));
        Ok(())
    })
}
