//! C ABI over `evoloss`.
//!
//! Objects are opaque handles created by constructor functions
//! (`evl_weights_zeros`, `evl_dataset_generate`, ...) and released with the
//! matching `*_free`. Every fallible function returns an [`EvlStatus`]; on
//! failure a message is stored per thread and can be read with
//! [`evl_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use evoloss::cluster;
use evoloss::config::RunConfig;
use evoloss::evolution::{evolve, EvolutionConfig, EvolutionHistory, StubFitness};
use evoloss::fitness::evaluate_fitness;
use evoloss::rng;
use evoloss::synth::{gen_dataset, read_dataset, write_dataset, DatasetSpec, MultiModalClip};
use evoloss::tensor::Tensor;
use evoloss::weights::{total_loss, ComponentLosses, LossKey, LossWeights, NUM_WEIGHTS};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidWeights = 3,
    Format = 4,
    Io = 5,
    Runtime = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Number of coordinates in a weight vector.
pub const EVL_NUM_WEIGHTS: usize = 16;

const _: () = assert!(EVL_NUM_WEIGHTS == NUM_WEIGHTS);

pub struct EvlWeights(LossWeights);

pub struct EvlDataset {
    spec: DatasetSpec,
    clips: Vec<MultiModalClip>,
}

pub struct EvlHistory(EvolutionHistory);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &evoloss::Error) -> EvlStatus {
    match e {
        evoloss::Error::InvalidWeights(_) => EvlStatus::InvalidWeights,
        evoloss::Error::Format { .. } => EvlStatus::Format,
        evoloss::Error::Io { .. } => EvlStatus::Io,
        evoloss::Error::Config(_) | evoloss::Error::InvalidSpec(_) | evoloss::Error::Clustering(_) => {
            EvlStatus::InvalidArgument
        }
        _ => EvlStatus::Runtime,
    }
}

struct Fail(EvlStatus, String);

impl From<evoloss::Error> for Fail {
    fn from(e: evoloss::Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(EvlStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(EvlStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EvlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EvlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            EvlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies `text` plus a NUL terminator into `buf` when it fits. `needed`
/// (if non-null) receives the full size including the terminator.
unsafe fn write_string(text: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Fail> {
    let bytes = text.as_bytes();
    if let Some(n) = needed.as_mut() {
        *n = bytes.len() + 1;
    }
    if buf.is_null() || len < bytes.len() + 1 {
        return Err(Fail(EvlStatus::BufferTooSmall, format!("need {} bytes", bytes.len() + 1)));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Copies the calling thread's last error message (empty after a success)
/// into `buf`. Returns the size needed including the terminator; nothing is
/// written when `len` is too small.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn evl_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let need = e.len() + 1;
        if !buf.is_null() && len >= need {
            ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), e.len());
            *buf.add(e.len()) = 0;
        }
        need
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn evl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// All-zero weight vector.
#[no_mangle]
pub extern "C" fn evl_weights_zeros() -> *mut EvlWeights {
    Box::into_raw(Box::new(EvlWeights(LossWeights::zeros())))
}

/// Weight vector with coordinates drawn uniformly from `[0, 1]`.
#[no_mangle]
pub extern "C" fn evl_weights_random(seed: u64) -> *mut EvlWeights {
    let mut r = rng::rng(seed, &[rng::stream::RANDOM_WEIGHTS]);
    Box::into_raw(Box::new(EvlWeights(LossWeights::random(&mut r))))
}

/// Parses canonical `KEY = value` text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evl_weights_parse(text: *const c_char, out: *mut *mut EvlWeights) -> EvlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let w = LossWeights::parse_canonical(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(EvlWeights(w)));
        Ok(())
    })
}

/// Canonical text of `w`; see [`evl_last_error`] for the buffer protocol.
///
/// # Safety
/// `w` must be a live handle; `buf` null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn evl_weights_to_string(
    w: *const EvlWeights,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> EvlStatus {
    guard(|| {
        let w = in_arg(w, "weights")?;
        write_string(&w.0.to_canonical_string(), buf, len, needed)
    })
}

/// Copies the sixteen coordinates, in canonical order, into `values`.
///
/// # Safety
/// `w` must be a live handle; `values` valid for `EVL_NUM_WEIGHTS` doubles.
#[no_mangle]
pub unsafe extern "C" fn evl_weights_values(w: *const EvlWeights, values: *mut f64) -> EvlStatus {
    guard(|| {
        let w = in_arg(w, "weights")?;
        if values.is_null() {
            return Err(null("values"));
        }
        ptr::copy_nonoverlapping(w.0.values().as_ptr(), values, NUM_WEIGHTS);
        Ok(())
    })
}

/// # Safety
/// `w` must be a live handle; `key` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evl_weights_get(w: *const EvlWeights, key: *const c_char, out: *mut f64) -> EvlStatus {
    guard(|| {
        let w = in_arg(w, "weights")?;
        let k: LossKey = str_arg(key, "key")?.parse()?;
        *out_arg(out, "out")? = w.0[k];
        Ok(())
    })
}

/// Sets one coordinate. The value is stored as given; use
/// [`evl_weights_validate`] to check the box constraint.
///
/// # Safety
/// `w` must be a live handle; `key` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn evl_weights_set(w: *mut EvlWeights, key: *const c_char, value: f64) -> EvlStatus {
    guard(|| {
        let w = out_arg(w, "weights")?;
        let k: LossKey = str_arg(key, "key")?.parse()?;
        w.0[k] = value;
        Ok(())
    })
}

/// `EVL_STATUS_OK` when every coordinate is finite and in `[0, 1]`.
///
/// # Safety
/// `w` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn evl_weights_validate(w: *const EvlWeights) -> EvlStatus {
    guard(|| Ok(in_arg(w, "weights")?.0.validate()?))
}

/// # Safety
/// `w` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn evl_weights_free(w: *mut EvlWeights) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Weighted total `Σ w_k · components_k` over the sixteen components.
///
/// # Safety
/// `w` must be a live handle; `components` valid for `EVL_NUM_WEIGHTS`
/// doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evl_total_loss(w: *const EvlWeights, components: *const f64, out: *mut f64) -> EvlStatus {
    guard(|| {
        let w = in_arg(w, "weights")?;
        let c = slice_arg(components, NUM_WEIGHTS, "components")?;
        let c = ComponentLosses::from_array(c.try_into().expect("length checked"));
        *out_arg(out, "out")? = total_loss(&w.0, &c);
        Ok(())
    })
}

/// k-means with k-means++ seeding on `n × d` row-major `points`.
///
/// # Safety
/// `points` valid for `n·d` doubles; `assignments` for `n` entries; `wcss`
/// writable or null.
#[no_mangle]
pub unsafe extern "C" fn evl_kmeans(
    points: *const f64,
    n: usize,
    d: usize,
    k: usize,
    seed: u64,
    restarts: usize,
    assignments: *mut usize,
    wcss: *mut f64,
) -> EvlStatus {
    guard(|| {
        if n == 0 || d == 0 {
            return Err(invalid("n and d must be positive"));
        }
        let data = slice_arg(points, n * d, "points")?.to_vec();
        if assignments.is_null() {
            return Err(null("assignments"));
        }
        let t = Tensor::matrix(n, d, data)?;
        let km = cluster::kmeans(&t, k, seed, restarts)?;
        ptr::copy_nonoverlapping(km.assignments.as_ptr(), assignments, n);
        if let Some(w) = wcss.as_mut() {
            *w = km.wcss;
        }
        Ok(())
    })
}

/// Normalized mutual information of two labelings of length `n`.
///
/// # Safety
/// `a` and `b` valid for `n` entries; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evl_nmi(a: *const usize, b: *const usize, n: usize, out: *mut f64) -> EvlStatus {
    guard(|| {
        let v = cluster::nmi(slice_arg(a, n, "a")?, slice_arg(b, n, "b")?)?;
        *out_arg(out, "out")? = v;
        Ok(())
    })
}

/// Adjusted Rand index of two labelings of length `n`.
///
/// # Safety
/// `a` and `b` valid for `n` entries; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evl_ari(a: *const usize, b: *const usize, n: usize, out: *mut f64) -> EvlStatus {
    guard(|| {
        let v = cluster::ari(slice_arg(a, n, "a")?, slice_arg(b, n, "b")?)?;
        *out_arg(out, "out")? = v;
        Ok(())
    })
}

/// Generates a synthetic dataset.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evl_dataset_generate(
    n_clips: usize,
    classes: usize,
    frames: usize,
    height: usize,
    width: usize,
    audio_len: usize,
    seed: u64,
    out: *mut *mut EvlDataset,
) -> EvlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let spec = DatasetSpec {
            n_clips,
            classes,
            frames,
            height,
            width,
            audio_len,
            seed,
        };
        let clips = gen_dataset(&spec)?;
        *out = Box::into_raw(Box::new(EvlDataset { spec, clips }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn evl_dataset_len(ds: *const EvlDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.clips.len())
}

/// Class of clip `index`.
///
/// # Safety
/// `ds` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evl_dataset_class(ds: *const EvlDataset, index: usize, out: *mut usize) -> EvlStatus {
    guard(|| {
        let ds = in_arg(ds, "dataset")?;
        let clip = ds
            .clips
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range")))?;
        *out_arg(out, "out")? = clip.class_id;
        Ok(())
    })
}

/// Writes the dataset in the binary exchange format.
///
/// # Safety
/// `ds` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn evl_dataset_write(ds: *const EvlDataset, path: *const c_char) -> EvlStatus {
    guard(|| {
        let ds = in_arg(ds, "dataset")?;
        let path = str_arg(path, "path")?;
        let io = |e: std::io::Error| Fail::from(evoloss::Error::io(path, e));
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        write_dataset(&mut w, &ds.spec, &ds.clips).map_err(io)?;
        w.flush().map_err(io)
    })
}

/// Reads a dataset written by [`evl_dataset_write`].
///
/// # Safety
/// `path` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evl_dataset_read(path: *const c_char, out: *mut *mut EvlDataset) -> EvlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let f = File::open(path).map_err(|e| Fail::from(evoloss::Error::io(path, e)))?;
        let (spec, clips) = read_dataset(BufReader::new(f))?;
        *out = Box::into_raw(Box::new(EvlDataset { spec, clips }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn evl_dataset_free(ds: *mut EvlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains under `w` with the settings of a TOML run configuration (null or
/// empty for defaults) and returns the clustering fitness and ARI.
///
/// # Safety
/// `w` must be a live handle; `config_toml` null or NUL-terminated;
/// `fitness` writable; `ari` writable or null.
#[no_mangle]
pub unsafe extern "C" fn evl_evaluate_fitness(
    w: *const EvlWeights,
    config_toml: *const c_char,
    fitness: *mut f64,
    ari: *mut f64,
) -> EvlStatus {
    guard(|| {
        let w = in_arg(w, "weights")?;
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::parse(str_arg(config_toml, "config")?)?
        };
        let out = out_arg(fitness, "fitness")?;
        let r = evaluate_fitness(&w.0, &cfg.corpus()?, &cfg.fitness_config())?;
        *out = r.fitness;
        if let Some(a) = ari.as_mut() {
            *a = r.ari;
        }
        Ok(())
    })
}

/// Runs the evolutionary search with the stub fitness `f(w) = w[key]`.
///
/// # Safety
/// `key` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evl_evolve_stub(
    population_size: usize,
    rounds: usize,
    top_fraction: f64,
    seed: u64,
    workers: usize,
    key: *const c_char,
    out: *mut *mut EvlHistory,
) -> EvlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let key: LossKey = str_arg(key, "key")?.parse()?;
        let cfg = EvolutionConfig {
            population_size,
            rounds,
            top_fraction,
            seed,
            workers: workers.max(1),
        };
        let h = evolve(&cfg, &StubFitness { key }, &mut |_| Ok(()))?;
        *out = Box::into_raw(Box::new(EvlHistory(h)));
        Ok(())
    })
}

/// Number of evaluated individuals.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn evl_history_len(h: *const EvlHistory) -> usize {
    h.as_ref().map_or(0, |h| h.0.individuals.len())
}

/// Number of best-so-far entries (rounds + 1).
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn evl_history_rounds(h: *const EvlHistory) -> usize {
    h.as_ref().map_or(0, |h| h.0.best_so_far.len())
}

/// Best-so-far fitness after round `round` (0 is the initial population).
///
/// # Safety
/// `h` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evl_history_best_so_far(h: *const EvlHistory, round: usize, out: *mut f64) -> EvlStatus {
    guard(|| {
        let h = in_arg(h, "history")?;
        let v = h
            .0
            .best_so_far
            .get(round)
            .ok_or_else(|| invalid(format!("round {round} out of range")))?;
        *out_arg(out, "out")? = *v;
        Ok(())
    })
}

/// Weights of the fittest individual, as a new handle.
///
/// # Safety
/// `h` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn evl_history_best_weights(h: *const EvlHistory, out: *mut *mut EvlWeights) -> EvlStatus {
    guard(|| {
        let h = in_arg(h, "history")?;
        let out = out_arg(out, "out")?;
        let best = h.0.best().ok_or_else(|| invalid("empty history"))?;
        *out = Box::into_raw(Box::new(EvlWeights(best.weights)));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn evl_history_free(h: *mut EvlHistory) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}
