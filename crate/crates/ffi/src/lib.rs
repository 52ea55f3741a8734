//! C ABI over `mtmil`.
//!
//! Objects cross the boundary as opaque handles created by `*_open`/`*_load`/`*_new`
//! and released by the matching `*_free`. Every fallible call returns an
//! [`MtmilStatus`]; on failure the message is kept per thread and read back with
//! [`mtmil_last_error_message`]. Panics never unwind into C, they surface as
//! `MTMIL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;
use std::slice;

use mtmil::error::Error;
use mtmil::feature_store::{read_bag, read_manifest, CohortManifest, FeatureBag};
use mtmil::stats::{paired_t_one_tailed, roc_auc, wilcoxon_signed_rank_one_tailed};
use mtmil::trainer::{predict, BagIndex, FoldModels, Scoring};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtmilStatus {
    Ok = 0,
    NullPointer = 1,
    /// A string argument is not valid UTF-8.
    InvalidString = 2,
    /// An index or length argument is out of range.
    InvalidArgument = 3,
    /// The output buffer is too small; the required size was written back.
    BufferTooSmall = 4,
    Config = 10,
    /// I/O, format or shape problem in the inputs.
    Data = 11,
    Infeasible = 12,
    Numeric = 13,
    Panic = 99,
}

/// One-tailed paired tests of `a > b`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtmilPairedTest {
    T = 0,
    Wilcoxon = 1,
}

/// Cohort manifest of a feature store directory; bags are read on demand.
pub struct MtmilStore {
    dir: PathBuf,
    manifest: CohortManifest,
}

/// One bag of tile features.
pub struct MtmilBag {
    bag: FeatureBag,
}

/// The fold models of one training run, used as an ensemble.
pub struct MtmilModel {
    models: FoldModels,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MtmilStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => MtmilStatus::Config,
            3 => MtmilStatus::Data,
            4 => MtmilStatus::Infeasible,
            _ => MtmilStatus::Numeric,
        };
        Failure(status, format!("{}: {e}", e.code()))
    }
}

fn fail<T>(status: MtmilStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, recording its error and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MtmilStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtmilStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            MtmilStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        fail(MtmilStatus::NullPointer, format!("{name} is NULL"))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(MtmilStatus::InvalidString, format!("{name} is not valid UTF-8")))
}

/// Slice view that accepts NULL for empty input.
unsafe fn slice_arg<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn slice_out<'a, T>(p: *mut T, n: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts_mut(p, n))
}

/// Copies `s` NUL-terminated into `buf`; `len_out` receives the length without the NUL.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, len_out: *mut usize) -> Result<(), Failure> {
    if !len_out.is_null() {
        *len_out = s.len();
    }
    if cap < s.len() + 1 {
        return fail(MtmilStatus::BufferTooSmall, format!("need {} bytes, buffer holds {cap}", s.len() + 1));
    }
    non_null(buf, "buf")?;
    ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

unsafe fn put<T>(out: *mut T, v: T, name: &str) -> Result<(), Failure> {
    non_null(out, name)?;
    *out = v;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mtmil_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mtmil_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Opens the feature store directory `dir` and reads its manifest.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mtmil_store_open(dir: *const c_char, out: *mut *mut MtmilStore) -> MtmilStatus {
    guard(|| {
        non_null(out, "out")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let manifest = read_manifest(&dir)?;
        *out = Box::into_raw(Box::new(MtmilStore { dir, manifest }));
        Ok(())
    })
}

/// # Safety
/// `store` must come from [`mtmil_store_open`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn mtmil_store_free(store: *mut MtmilStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of bags in the manifest.
///
/// # Safety
/// `store` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtmil_store_len(store: *const MtmilStore, out: *mut usize) -> MtmilStatus {
    guard(|| {
        non_null(store, "store")?;
        put(out, (*store).manifest.len(), "out")
    })
}

/// Copies the id of bag `index` (manifest order) into `buf`.
///
/// # Safety
/// `store` must be a live handle; `buf` must hold `cap` bytes; `len_out` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn mtmil_store_bag_id(
    store: *const MtmilStore,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    len_out: *mut usize,
) -> MtmilStatus {
    guard(|| {
        non_null(store, "store")?;
        let rows = (*store).manifest.rows();
        let row = rows.get(index).ok_or_else(|| {
            Failure(MtmilStatus::InvalidArgument, format!("bag index {index} out of range ({} bags)", rows.len()))
        })?;
        write_str(&row.bag_id, buf, cap, len_out)
    })
}

/// Reads bag `bag_id` from the store.
///
/// # Safety
/// `store` must be a live handle, `bag_id` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtmil_store_read_bag(
    store: *const MtmilStore,
    bag_id: *const c_char,
    out: *mut *mut MtmilBag,
) -> MtmilStatus {
    guard(|| {
        non_null(store, "store")?;
        non_null(out, "out")?;
        let id = str_arg(bag_id, "bag_id")?;
        let bag = read_bag(Path::new(&(*store).dir), id)?;
        *out = Box::into_raw(Box::new(MtmilBag { bag }));
        Ok(())
    })
}

/// Builds a bag from `n_tiles * dim` row-major features. The id keys the
/// inference tile sample, so use the store id to reproduce CLI scores.
///
/// # Safety
/// `bag_id` must be NUL-terminated and `features` hold `n_tiles * dim` floats.
#[no_mangle]
pub unsafe extern "C" fn mtmil_bag_new(
    bag_id: *const c_char,
    features: *const f32,
    n_tiles: usize,
    dim: usize,
    out: *mut *mut MtmilBag,
) -> MtmilStatus {
    guard(|| {
        non_null(out, "out")?;
        let id = str_arg(bag_id, "bag_id")?;
        let len = n_tiles
            .checked_mul(dim)
            .ok_or_else(|| Failure(MtmilStatus::InvalidArgument, "n_tiles * dim overflows".into()))?;
        let feats = slice_arg(features, len, "features")?.to_vec();
        let bag = FeatureBag::new(id, n_tiles, dim, feats)?;
        *out = Box::into_raw(Box::new(MtmilBag { bag }));
        Ok(())
    })
}

/// # Safety
/// `bag` must come from this library and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn mtmil_bag_free(bag: *mut MtmilBag) {
    if !bag.is_null() {
        drop(Box::from_raw(bag));
    }
}

/// Tile count and feature width of a bag.
///
/// # Safety
/// `bag` must be a live handle; both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn mtmil_bag_shape(bag: *const MtmilBag, n_tiles: *mut usize, dim: *mut usize) -> MtmilStatus {
    guard(|| {
        non_null(bag, "bag")?;
        put(n_tiles, (*bag).bag.n_tiles(), "n_tiles")?;
        put(dim, (*bag).bag.dim(), "dim")
    })
}

/// Borrowed row-major features, valid while the bag lives. NULL for a NULL bag.
///
/// # Safety
/// `bag` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn mtmil_bag_features(bag: *const MtmilBag) -> *const f32 {
    if bag.is_null() {
        return ptr::null();
    }
    (*bag).bag.features().as_ptr()
}

/// Loads the fold models written by `mtmil train --out dir`.
///
/// # Safety
/// `dir` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtmil_model_load(dir: *const c_char, out: *mut *mut MtmilModel) -> MtmilStatus {
    guard(|| {
        non_null(out, "out")?;
        let dir = str_arg(dir, "dir")?;
        let models = FoldModels::load(Path::new(dir))?;
        *out = Box::into_raw(Box::new(MtmilModel { models }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mtmil_model_load`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn mtmil_model_free(model: *mut MtmilModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of tasks (output heads) and the expected feature width.
///
/// # Safety
/// `model` must be a live handle; both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn mtmil_model_shape(model: *const MtmilModel, n_tasks: *mut usize, dim: *mut usize) -> MtmilStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &(*model).models;
        put(n_tasks, m.tasks.len(), "n_tasks")?;
        put(dim, m.folds[0].params.dims().dim, "dim")
    })
}

/// Copies the target id of head `task` into `buf`.
///
/// # Safety
/// `model` must be a live handle; `buf` must hold `cap` bytes; `len_out` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn mtmil_model_task_id(
    model: *const MtmilModel,
    task: usize,
    buf: *mut c_char,
    cap: usize,
    len_out: *mut usize,
) -> MtmilStatus {
    guard(|| {
        non_null(model, "model")?;
        let tasks = &(*model).models.tasks;
        let t = tasks.get(task).ok_or_else(|| {
            Failure(MtmilStatus::InvalidArgument, format!("task {task} out of range ({} tasks)", tasks.len()))
        })?;
        write_str(t, buf, cap, len_out)
    })
}

/// Ensemble scores for one bag: the mean positive probability over fold models
/// per task into `probs` (`n_tasks` values) and fold-0 attention per tile into
/// `attention` (`n_tiles` values, 0 for tiles left out of the inference sample).
///
/// # Safety
/// `model` and `bag` must be live handles; the buffers must hold the stated counts.
#[no_mangle]
pub unsafe extern "C" fn mtmil_model_predict(
    model: *const MtmilModel,
    bag: *const MtmilBag,
    probs: *mut f64,
    n_tasks: usize,
    attention: *mut f64,
    n_tiles: usize,
) -> MtmilStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(bag, "bag")?;
        let (models, bag) = (&(*model).models, &(*bag).bag);
        if n_tasks != models.tasks.len() {
            return fail(MtmilStatus::InvalidArgument, format!("n_tasks {n_tasks}, model has {}", models.tasks.len()));
        }
        if n_tiles != bag.n_tiles() {
            return fail(MtmilStatus::InvalidArgument, format!("n_tiles {n_tiles}, bag has {}", bag.n_tiles()));
        }
        let probs = slice_out(probs, n_tasks, "probs")?;
        let attention = slice_out(attention, n_tiles, "attention")?;
        let bags = std::slice::from_ref(bag);
        let set = predict(models, &BagIndex::new(bags), &[bag.id()], Scoring::Ensemble)?;
        let p = &set.bags[0];
        probs.copy_from_slice(&p.probs);
        attention.fill(0.0);
        for (&k, &a) in p.tiles.iter().zip(&p.attention) {
            attention[k] = a;
        }
        Ok(())
    })
}

/// Exact ROC-AUC with tied scores counted as half; `labels` nonzero means positive.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtmil_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> MtmilStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let l: Vec<bool> = slice_arg(labels, n, "labels")?.iter().map(|&v| v != 0).collect();
        put(out, roc_auc(s, &l)?, "out")
    })
}

/// One-tailed paired test that `a` exceeds `b`.
///
/// # Safety
/// `a` and `b` must hold `n` values; both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn mtmil_paired_test(
    a: *const f64,
    b: *const f64,
    n: usize,
    test: MtmilPairedTest,
    statistic: *mut f64,
    p_value: *mut f64,
) -> MtmilStatus {
    guard(|| {
        let (a, b) = (slice_arg(a, n, "a")?, slice_arg(b, n, "b")?);
        let r = match test {
            MtmilPairedTest::T => paired_t_one_tailed(a, b)?,
            MtmilPairedTest::Wilcoxon => wilcoxon_signed_rank_one_tailed(a, b)?,
        };
        put(statistic, r.statistic, "statistic")?;
        put(p_value, r.p_value, "p_value")
    })
}
