//! C ABI over the acmap engine.
//!
//! Objects are opaque handles created by `*_new` and released by `*_free`.
//! Every fallible call returns an [`AcmapStatus`]; on failure the message is
//! kept per thread and read with [`acmap_last_error_message`]. Output
//! pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use acmap::adapter::{init_adapter, AdapterWeights};
use acmap::backbone::{build_backbone, Backbone, BackboneConfig, Nonlinearity};
use acmap::classifier::ClassifierWeights;
use acmap::merging::{MergeLimit, MergeOutcome, MergeTrail};
use acmap::numerics::Matrix;
use acmap::prototype::{centroid_map, centroid_shift, PrototypeMatrix, SubspaceTag};
use acmap::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcmapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Degenerate = 4,
    Numeric = 5,
    Config = 6,
    Data = 7,
    Format = 8,
    Alignment = 9,
    IncompleteStore = 10,
    IncompleteArtifacts = 11,
    Divergence = 12,
    Io = 13,
    Panic = 14,
}

/// What a merge call did.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcmapMergeOutcome {
    /// First task: the snapshot is the task adapter itself.
    Initialized = 0,
    /// Running average updated.
    Merged = 1,
    /// Past the early-stop threshold; only the task counter advanced.
    Frozen = 2,
}

/// Frozen feature extractor.
pub struct AcmapBackbone(Backbone);
/// Adapter weights for every block.
pub struct AcmapAdapter(AdapterWeights);
/// Running merge with optional initial-weight replacement.
pub struct AcmapTrail(MergeTrail);
/// Cosine classifier over prototype rows.
pub struct AcmapClassifier(ClassifierWeights);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AcmapStatus {
    match e {
        Error::Shape(_) => AcmapStatus::Shape,
        Error::DegenerateVector(_) => AcmapStatus::Degenerate,
        Error::Numeric(_) => AcmapStatus::Numeric,
        Error::Config(_) => AcmapStatus::Config,
        Error::Data(_) => AcmapStatus::Data,
        Error::Format { .. } => AcmapStatus::Format,
        Error::Alignment(_) => AcmapStatus::Alignment,
        Error::IncompleteStore(_) => AcmapStatus::IncompleteStore,
        Error::IncompleteArtifacts(_) => AcmapStatus::IncompleteArtifacts,
        Error::Divergence { .. } => AcmapStatus::Divergence,
        Error::Aborted { source, .. } => status_of(source),
        Error::Io { .. } => AcmapStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Engine(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Engine(e)
    }
}

type FfiResult = std::result::Result<(), Fail>;

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> FfiResult) -> AcmapStatus {
    let (status, message) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            return AcmapStatus::Ok;
        }
        Ok(Err(Fail::Null(what))) => (AcmapStatus::NullPointer, format!("null pointer: {what}")),
        Ok(Err(Fail::Arg(m))) => (AcmapStatus::InvalidArgument, m),
        Ok(Err(Fail::Engine(e))) => (status_of(&e), e.to_string()),
        Err(_) => (AcmapStatus::Panic, "internal panic".to_string()),
    };
    set_last_error(message);
    status
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &'static str) -> FfiResult {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`). Returns the full message length
/// including the terminator, or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn acmap_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap) - 1;
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Seeded random frozen backbone. `nonlinearity`: 0 ReLU, 1 GELU.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn acmap_backbone_new(
    input_dim: usize,
    embed_dim: usize,
    n_blocks: usize,
    hidden_dim: usize,
    nonlinearity: u32,
    seed: u64,
    out: *mut *mut AcmapBackbone,
) -> AcmapStatus {
    guard(|| {
        let nonlinearity = match nonlinearity {
            0 => Nonlinearity::Relu,
            1 => Nonlinearity::Gelu,
            n => return Err(Fail::Arg(format!("unknown nonlinearity code {n}"))),
        };
        let bb = build_backbone(&BackboneConfig {
            input_dim,
            embed_dim,
            n_blocks,
            hidden_dim,
            nonlinearity,
            seed,
        })?;
        put(out, AcmapBackbone(bb), "out")
    })
}

/// # Safety
/// `bb` must come from [`acmap_backbone_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn acmap_backbone_free(bb: *mut AcmapBackbone) {
    free(bb)
}

/// Feature dimension d.
///
/// # Safety
/// `bb` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn acmap_backbone_embed_dim(bb: *const AcmapBackbone) -> usize {
    bb.as_ref().map_or(0, |b| b.0.embed_dim())
}

/// Features of one input. `adapter` may be null for the plain backbone.
///
/// # Safety
/// `x` holds `x_len` values, `out` has room for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn acmap_backbone_forward(
    bb: *const AcmapBackbone,
    adapter: *const AcmapAdapter,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> AcmapStatus {
    guard(|| {
        let bb = as_ref(bb, "backbone")?;
        let adapter = adapter.as_ref().map(|a| &a.0);
        let x = slice(x, x_len, "x")?;
        if out_len != bb.0.embed_dim() {
            return Err(Fail::Arg(format!("out_len {out_len} != embed dim {}", bb.0.embed_dim())));
        }
        let out = slice_mut(out, out_len, "out")?;
        let f = bb.0.forward_features(adapter, x)?;
        out.copy_from_slice(&f);
        Ok(())
    })
}

/// Fresh adapter shaped for `bb` (zero up-projection, so it starts as the
/// identity on features).
///
/// # Safety
/// `bb` must be a live handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn acmap_adapter_new(
    bb: *const AcmapBackbone,
    bottleneck: usize,
    scale: f64,
    seed: u64,
    out: *mut *mut AcmapAdapter,
) -> AcmapStatus {
    guard(|| {
        let bb = as_ref(bb, "backbone")?;
        let a = init_adapter(bb.0.n_blocks(), bb.0.embed_dim(), bottleneck, scale, None, seed)?;
        put(out, AcmapAdapter(a), "out")
    })
}

/// # Safety
/// `a` must be a live handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn acmap_adapter_clone(a: *const AcmapAdapter, out: *mut *mut AcmapAdapter) -> AcmapStatus {
    guard(|| {
        let a = as_ref(a, "adapter")?;
        put(out, AcmapAdapter(a.0.clone()), "out")
    })
}

/// # Safety
/// `a` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn acmap_adapter_free(a: *mut AcmapAdapter) {
    free(a)
}

/// Number of scalar parameters, or 0 for null.
///
/// # Safety
/// `a` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn acmap_adapter_param_count(a: *const AcmapAdapter) -> usize {
    a.as_ref().map_or(0, |a| a.0.param_count())
}

/// Copies all parameters (each block's down then up matrix, row-major).
///
/// # Safety
/// `buf` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn acmap_adapter_get_params(a: *const AcmapAdapter, buf: *mut f64, len: usize) -> AcmapStatus {
    guard(|| {
        let a = as_ref(a, "adapter")?;
        if len != a.0.param_count() {
            return Err(Fail::Arg(format!("len {len} != param count {}", a.0.param_count())));
        }
        let buf = slice_mut(buf, len, "buf")?;
        let mut at = 0;
        for m in a.0.matrices() {
            buf[at..at + m.data().len()].copy_from_slice(m.data());
            at += m.data().len();
        }
        Ok(())
    })
}

/// Overwrites all parameters in the layout of [`acmap_adapter_get_params`].
///
/// # Safety
/// `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn acmap_adapter_set_params(a: *mut AcmapAdapter, buf: *const f64, len: usize) -> AcmapStatus {
    guard(|| {
        let a = as_mut(a, "adapter")?;
        if len != a.0.param_count() {
            return Err(Fail::Arg(format!("len {len} != param count {}", a.0.param_count())));
        }
        let buf = slice(buf, len, "buf")?;
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(Fail::Arg("parameters must be finite".into()));
        }
        let mut at = 0;
        for m in a.0.matrices_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&buf[at..at + n]);
            at += n;
        }
        Ok(())
    })
}

/// Merge trail starting from `init`. `early_stop` 0 means unbounded;
/// `initial_weight_replacement` nonzero makes θ_1 the init for later tasks.
///
/// # Safety
/// `init` must be a live handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn acmap_trail_new(
    init: *const AcmapAdapter,
    early_stop: usize,
    initial_weight_replacement: u8,
    out: *mut *mut AcmapTrail,
) -> AcmapStatus {
    guard(|| {
        let init = as_ref(init, "init")?;
        let limit = match early_stop {
            0 => MergeLimit::Unbounded,
            l => MergeLimit::Tasks(l),
        };
        let trail = MergeTrail::new(init.0.clone(), limit, initial_weight_replacement != 0)?;
        put(out, AcmapTrail(trail), "out")
    })
}

/// # Safety
/// `trail` must come from [`acmap_trail_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn acmap_trail_free(trail: *mut AcmapTrail) {
    free(trail)
}

/// Whether the next task trains and merges (1) or reuses the frozen
/// snapshot (0).
///
/// # Safety
/// `trail` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn acmap_trail_next_merges(trail: *const AcmapTrail) -> u8 {
    trail.as_ref().map_or(0, |t| u8::from(t.0.next_merges()))
}

/// Folds the next task adapter into the running average, or only advances
/// the counter once past the threshold.
///
/// # Safety
/// `trail` and `theta` must be live handles; `outcome` may be null.
#[no_mangle]
pub unsafe extern "C" fn acmap_trail_merge(
    trail: *mut AcmapTrail,
    theta: *const AcmapAdapter,
    outcome: *mut AcmapMergeOutcome,
) -> AcmapStatus {
    guard(|| {
        let trail = as_mut(trail, "trail")?;
        let theta = as_ref(theta, "theta")?;
        let o = if trail.0.next_merges() {
            match trail.0.merge_step(&theta.0)? {
                MergeOutcome::Initialized => AcmapMergeOutcome::Initialized,
                MergeOutcome::Merged => AcmapMergeOutcome::Merged,
                MergeOutcome::Frozen => AcmapMergeOutcome::Frozen,
            }
        } else {
            trail.0.advance_frozen()?;
            AcmapMergeOutcome::Frozen
        };
        if !outcome.is_null() {
            *outcome = o;
        }
        Ok(())
    })
}

/// Tasks processed so far, frozen ones included.
///
/// # Safety
/// `trail` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn acmap_trail_task_count(trail: *const AcmapTrail) -> usize {
    trail.as_ref().map_or(0, |t| t.0.merge_count())
}

/// Merged snapshots kept, `min(t, L)`.
///
/// # Safety
/// `trail` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn acmap_trail_snapshot_count(trail: *const AcmapTrail) -> usize {
    trail.as_ref().map_or(0, |t| t.0.snapshots().len())
}

/// Copy of the current merged adapter.
///
/// # Safety
/// `trail` must be a live handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn acmap_trail_current(trail: *const AcmapTrail, out: *mut *mut AcmapAdapter) -> AcmapStatus {
    guard(|| {
        let trail = as_ref(trail, "trail")?;
        let cur = trail
            .0
            .current()
            .ok_or_else(|| Fail::Engine(Error::IncompleteArtifacts("nothing merged yet".into())))?;
        put(out, AcmapAdapter(cur.clone()), "out")
    })
}

/// Copy of the initialization later task adapters start from.
///
/// # Safety
/// `trail` must be a live handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn acmap_trail_init_weights(
    trail: *const AcmapTrail,
    out: *mut *mut AcmapAdapter,
) -> AcmapStatus {
    guard(|| {
        let trail = as_ref(trail, "trail")?;
        put(out, AcmapAdapter(trail.0.init_weights().clone()), "out")
    })
}

/// Cosine classifier from `rows x cols` prototype rows (row-major) and one
/// class id per row.
///
/// # Safety
/// `weights` holds `rows * cols` values and `class_ids` holds `rows`.
#[no_mangle]
pub unsafe extern "C" fn acmap_classifier_new(
    weights: *const f64,
    rows: usize,
    cols: usize,
    class_ids: *const u64,
    out: *mut *mut AcmapClassifier,
) -> AcmapStatus {
    guard(|| {
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Fail::Arg("rows * cols overflows".into()))?;
        let w = slice(weights, len, "weights")?;
        if class_ids.is_null() && rows > 0 {
            return Err(Fail::Null("class_ids"));
        }
        let ids: Vec<usize> = if rows == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(class_ids, rows).iter().map(|&c| c as usize).collect()
        };
        let m = Matrix::from_vec(rows, cols, w.to_vec())?;
        put(out, AcmapClassifier(ClassifierWeights::new(m, ids)?), "out")
    })
}

/// # Safety
/// `clf` must come from [`acmap_classifier_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn acmap_classifier_free(clf: *mut AcmapClassifier) {
    free(clf)
}

/// Predicted class id; cosine logits are written when `logits` is non-null
/// (`logits_len` must then equal the row count).
///
/// # Safety
/// `feature` holds `len` values; `logits` is null or has `logits_len` slots.
#[no_mangle]
pub unsafe extern "C" fn acmap_classifier_predict(
    clf: *const AcmapClassifier,
    feature: *const f64,
    len: usize,
    class_id: *mut u64,
    logits: *mut f64,
    logits_len: usize,
) -> AcmapStatus {
    guard(|| {
        let clf = as_ref(clf, "classifier")?;
        let f = slice(feature, len, "feature")?;
        if class_id.is_null() {
            return Err(Fail::Null("class_id"));
        }
        let (c, l) = clf.0.predict(f)?;
        if !logits.is_null() {
            if logits_len != l.len() {
                return Err(Fail::Arg(format!("logits_len {logits_len} != {} classes", l.len())));
            }
            slice_mut(logits, logits_len, "logits")?.copy_from_slice(&l);
        }
        *class_id = c as u64;
        Ok(())
    })
}

/// Centroid mapping: shifts `n_old x dim` old prototypes by the mean
/// displacement between the current task's prototypes in the new
/// (`current_new`) and old (`current_old`) subspaces, both `n_cur x dim`.
///
/// # Safety
/// Buffers hold the stated number of values; `out` has `n_old * dim` slots.
#[no_mangle]
pub unsafe extern "C" fn acmap_centroid_map(
    old: *const f64,
    n_old: usize,
    current_new: *const f64,
    current_old: *const f64,
    n_cur: usize,
    dim: usize,
    out: *mut f64,
) -> AcmapStatus {
    guard(|| {
        let size = |n: usize| n.checked_mul(dim).ok_or_else(|| Fail::Arg("size overflows".into()));
        let matrix = |p: *const f64, n: usize, what: &'static str, tag: SubspaceTag, task: usize| {
            let data = slice(p, size(n)?, what)?.to_vec();
            let m = Matrix::from_vec(n, dim, data)?;
            Ok::<_, Fail>(PrototypeMatrix::new(task, tag, (0..n).collect(), m)?)
        };
        let old = matrix(old, n_old, "old", SubspaceTag::Merged(1), 1)?;
        let cur_new = matrix(current_new, n_cur, "current_new", SubspaceTag::Merged(2), 2)?;
        let cur_old = matrix(current_old, n_cur, "current_old", SubspaceTag::Merged(1), 2)?;
        let shift = centroid_shift(&cur_new, &cur_old)?;
        let mapped = centroid_map(&old, &shift)?;
        slice_mut(out, size(n_old)?, "out")?.copy_from_slice(mapped.rows.data());
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn acmap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
