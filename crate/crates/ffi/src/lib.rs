//! C ABI over the scoring side of `egcl`: exemplar indices, checkpoint
//! inference, InfoNCE, confidence fusion and MR-2.
//!
//! Every function returns an [`EgclStatus`]. On failure the message is kept
//! per thread and read with [`egcl_last_error`]. Handles are opaque and must be
//! released with their `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use egcl::ann::HnswIndex;
use egcl::eval::{fppi_anchors, mr2, ScoreMode, ScoreWeights, SceneMatch, ANCHOR_COUNT};
use egcl::learner::{infer, infer_config, ModelConfig};
use egcl::levels::Level;
use egcl::params::ParamStore;
use egcl::synth::{PyramidFeatures, SPATIAL};
use egcl::tensor::Tensor;
use egcl::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EgclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    MalformedFile = 4,
    Io = 5,
    EmptyIndex = 6,
    Numerical = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Other = 10,
}

pub const EGCL_SCORE_VERBATIM: u32 = 0;
pub const EGCL_SCORE_SIMILARITY: u32 = 1;
pub const EGCL_ANCHOR_COUNT: usize = 9;
const _: () = assert!(EGCL_ANCHOR_COUNT == ANCHOR_COUNT);

/// Opaque handle to one level's exemplar graph.
pub struct EgclIndex(HnswIndex);

/// Opaque handle to a loaded checkpoint.
pub struct EgclModel {
    store: ParamStore,
    config: ModelConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> EgclStatus {
    match e.root() {
        Error::InvalidArgument(_) | Error::Config { .. } | Error::UnknownBox | Error::MissingParameter(_) => {
            EgclStatus::InvalidArgument
        }
        Error::Shape { .. } => EgclStatus::ShapeMismatch,
        Error::Format { .. } | Error::MissingEmbeddings(_) | Error::MissingLevel(_) => EgclStatus::MalformedFile,
        Error::Io(_) => EgclStatus::Io,
        Error::EmptyIndex => EgclStatus::EmptyIndex,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::ZeroNorm => EgclStatus::Numerical,
        _ => EgclStatus::Other,
    }
}

struct Failure(EgclStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(EgclStatus::NullPointer, format!("{what} is null"))
}

/// Runs `body`, recording any failure or panic as the thread's last error.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> EgclStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            EgclStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EgclStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Failure(EgclStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn egcl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn egcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an index file written by `egcl index`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_index` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn egcl_index_load(path: *const c_char, out_index: *mut *mut EgclIndex) -> EgclStatus {
    guard(|| {
        let slot = out(out_index, "out_index")?;
        *slot = std::ptr::null_mut();
        let idx = HnswIndex::load(&path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(EgclIndex(idx)));
        Ok(())
    })
}

/// # Safety
/// `index` must come from [`egcl_index_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn egcl_index_free(index: *mut EgclIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Node count, pyramid level (2..=5) and embedding dimension of an index.
///
/// # Safety
/// `index` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn egcl_index_info(
    index: *const EgclIndex,
    out_len: *mut usize,
    out_level: *mut u32,
    out_dim: *mut usize,
) -> EgclStatus {
    guard(|| {
        let idx = &index.as_ref().ok_or_else(|| null("index"))?.0;
        *out(out_len, "out_len")? = idx.len();
        *out(out_level, "out_level")? = u32::from(idx.level().id());
        *out(out_dim, "out_dim")? = idx.ids().first().and_then(|id| idx.embedding(*id)).map_or(0, <[f64]>::len);
        Ok(())
    })
}

/// Nearest exemplar to a unit query: its id, dot product and `1 - sigmoid(dot)`.
///
/// # Safety
/// `query` must hold `dim` doubles; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn egcl_index_nearest(
    index: *const EgclIndex,
    query: *const f64,
    dim: usize,
    out_id: *mut u32,
    out_dot: *mut f64,
    out_distance: *mut f64,
) -> EgclStatus {
    guard(|| {
        let idx = &index.as_ref().ok_or_else(|| null("index"))?.0;
        let q = slice(query, dim, "query")?;
        let r = idx.nearest(q)?;
        *out(out_id, "out_id")? = r.exemplar_id;
        *out(out_dot, "out_dot")? = r.dot;
        *out(out_distance, "out_distance")? = r.d_c;
        Ok(())
    })
}

/// Mean `1 - sigmoid(dot)` from the query to the top-layer exemplars.
///
/// # Safety
/// `query` must hold `dim` doubles; `out_distance` must be valid.
#[no_mangle]
pub unsafe extern "C" fn egcl_index_average_distance(
    index: *const EgclIndex,
    query: *const f64,
    dim: usize,
    out_distance: *mut f64,
) -> EgclStatus {
    guard(|| {
        let idx = &index.as_ref().ok_or_else(|| null("index"))?.0;
        *out(out_distance, "out_distance")? = idx.average_distance(slice(query, dim, "query")?)?;
        Ok(())
    })
}

/// Loads a checkpoint written by `egcl train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn egcl_model_load(path: *const c_char, out_model: *mut *mut EgclModel) -> EgclStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = std::ptr::null_mut();
        let store = ParamStore::load(&path_arg(path)?)?;
        let config = infer_config(&store)?;
        *slot = Box::into_raw(Box::new(EgclModel { store, config }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`egcl_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn egcl_model_free(model: *mut EgclModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input channels expected at `level` (2..=5) and the embedding dimension
/// (0 for a model without a transformation).
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn egcl_model_info(
    model: *const EgclModel,
    level: u32,
    out_channels: *mut usize,
    out_embed_dim: *mut usize,
) -> EgclStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let level = level_arg(level)?;
        *out(out_channels, "out_channels")? = m.config.channels[level.index()];
        *out(out_embed_dim, "out_embed_dim")? = if m.config.transform { m.config.embed_dim } else { 0 };
        Ok(())
    })
}

fn level_arg(level: u32) -> Result<Level, Failure> {
    u8::try_from(level)
        .ok()
        .and_then(|l| Level::from_id(l).ok())
        .ok_or_else(|| Failure(EgclStatus::InvalidArgument, format!("level {level} is not in 2..=5")))
}

/// Classification probability and, when the model has a projection, the unit
/// embedding of one proposal's `[C, 7, 7]` features at `level`. Other levels
/// are fed zeros. `out_embedding` may be null when `embedding_capacity` is 0;
/// `out_embedding_len` receives the embedding length (0 without projection).
///
/// # Safety
/// `features` must hold `features_len` doubles and `out_embedding` at least
/// `embedding_capacity`; the remaining out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn egcl_model_infer(
    model: *const EgclModel,
    level: u32,
    features: *const f64,
    features_len: usize,
    out_probability: *mut f64,
    out_embedding: *mut f64,
    embedding_capacity: usize,
    out_embedding_len: *mut usize,
) -> EgclStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let level = level_arg(level)?;
        let c = m.config.channels[level.index()];
        let data = slice(features, features_len, "features")?;
        if data.len() != c * SPATIAL * SPATIAL {
            return Err(Failure(
                EgclStatus::ShapeMismatch,
                format!("level {} expects {} values, got {}", level.id(), c * SPATIAL * SPATIAL, data.len()),
            ));
        }
        let mut levels = m.config.channels.map(|ch| Tensor::zeros(&[ch, SPATIAL, SPATIAL]));
        levels[level.index()] = Tensor::new(vec![c, SPATIAL, SPATIAL], data.to_vec())?;
        let pyramid = PyramidFeatures::new(levels)?;
        let (p, emb) = infer(&m.store, level, &pyramid)?;
        let emb = emb.unwrap_or_default();
        *out(out_embedding_len, "out_embedding_len")? = emb.len();
        if emb.len() > embedding_capacity {
            return Err(Failure(
                EgclStatus::BufferTooSmall,
                format!("embedding needs {} doubles, buffer holds {embedding_capacity}", emb.len()),
            ));
        }
        if !emb.is_empty() {
            if out_embedding.is_null() {
                return Err(null("out_embedding"));
            }
            std::ptr::copy_nonoverlapping(emb.as_ptr(), out_embedding, emb.len());
        }
        *out(out_probability, "out_probability")? = p;
        Ok(())
    })
}

/// InfoNCE of one anchor against one positive and `num_negatives` negatives,
/// all `dim`-dimensional; negatives are stored row after row.
///
/// # Safety
/// Input pointers must hold the stated number of doubles; `out_loss` must be valid.
#[no_mangle]
pub unsafe extern "C" fn egcl_infonce(
    anchor: *const f64,
    positive: *const f64,
    negatives: *const f64,
    num_negatives: usize,
    dim: usize,
    tau: f64,
    out_loss: *mut f64,
) -> EgclStatus {
    guard(|| {
        let total = num_negatives
            .checked_mul(dim)
            .ok_or_else(|| Failure(EgclStatus::InvalidArgument, "negatives size overflows".into()))?;
        let e = slice(anchor, dim, "anchor")?;
        let p = slice(positive, dim, "positive")?;
        let n = slice(negatives, total, "negatives")?;
        let rows: Vec<&[f64]> = if dim == 0 { Vec::new() } else { n.chunks(dim).collect() };
        *out(out_loss, "out_loss")? = egcl::learner::infonce(e, p, &rows, tau)?;
        Ok(())
    })
}

/// Collaborative confidence `(1 - mu - lambda) p + mu c + lambda a`, where `c`
/// and `a` are the distances ([`EGCL_SCORE_VERBATIM`]) or one minus them
/// ([`EGCL_SCORE_SIMILARITY`]).
///
/// # Safety
/// `out_confidence` must be valid.
#[no_mangle]
pub unsafe extern "C" fn egcl_fuse_confidence(
    p_cls: f64,
    d_c: f64,
    d_a: f64,
    mu: f64,
    lambda: f64,
    mode: u32,
    out_confidence: *mut f64,
) -> EgclStatus {
    guard(|| {
        let mode = match mode {
            EGCL_SCORE_VERBATIM => ScoreMode::Verbatim,
            EGCL_SCORE_SIMILARITY => ScoreMode::Similarity,
            other => return Err(Failure(EgclStatus::InvalidArgument, format!("unknown score mode {other}"))),
        };
        let w = ScoreWeights { mu, lambda, mode };
        *out(out_confidence, "out_confidence")? = w.fuse(p_cls, d_c, d_a)?;
        Ok(())
    })
}

/// Log-average miss rate over FPPI in [0.01, 1] from already matched
/// detections: `confidences[i]` with `true_positive[i]` (0 or 1), pooled over
/// `num_images` images holding `num_ground_truth` pedestrians. When
/// `out_anchor_miss_rates` is not null it receives the 9 sampled miss rates.
///
/// # Safety
/// The detection arrays must hold `count` elements and `out_anchor_miss_rates`,
/// if given, [`EGCL_ANCHOR_COUNT`] doubles.
#[no_mangle]
pub unsafe extern "C" fn egcl_mr2(
    confidences: *const f64,
    true_positive: *const u8,
    count: usize,
    num_ground_truth: usize,
    num_images: usize,
    out_mr2: *mut f64,
    out_anchor_miss_rates: *mut f64,
) -> EgclStatus {
    guard(|| {
        if num_images == 0 {
            return Err(Failure(EgclStatus::InvalidArgument, "num_images must be positive".into()));
        }
        let conf = slice(confidences, count, "confidences")?;
        let tp: &[u8] = if count == 0 {
            &[]
        } else if true_positive.is_null() {
            return Err(null("true_positive"));
        } else {
            std::slice::from_raw_parts(true_positive, count)
        };
        let matched = tp.iter().filter(|t| **t != 0).count();
        if matched > num_ground_truth {
            return Err(Failure(
                EgclStatus::InvalidArgument,
                format!("{matched} true positives exceed {num_ground_truth} ground truths"),
            ));
        }
        if conf.iter().any(|c| c.is_nan()) {
            return Err(Failure(EgclStatus::Numerical, "NaN confidence".into()));
        }
        // The pooled curve only needs per-image counts summed, so one image
        // carries every detection and the rest are empty.
        let mut scenes = vec![
            SceneMatch {
                confidences: Vec::new(),
                true_positive: Vec::new(),
                num_gt: 0,
            };
            num_images
        ];
        scenes[0] = SceneMatch {
            confidences: conf.to_vec(),
            true_positive: tp.iter().map(|t| *t != 0).collect(),
            num_gt: num_ground_truth,
        };
        let curve = mr2(&scenes)?;
        *out(out_mr2, "out_mr2")? = curve.mr2;
        if !out_anchor_miss_rates.is_null() {
            std::ptr::copy_nonoverlapping(curve.anchor_miss_rates.as_ptr(), out_anchor_miss_rates, ANCHOR_COUNT);
        }
        Ok(())
    })
}

/// The 9 FPPI anchors, written to `out_anchors`.
///
/// # Safety
/// `out_anchors` must hold [`EGCL_ANCHOR_COUNT`] doubles.
#[no_mangle]
pub unsafe extern "C" fn egcl_fppi_anchors(out_anchors: *mut f64) -> EgclStatus {
    guard(|| {
        if out_anchors.is_null() {
            return Err(null("out_anchors"));
        }
        std::ptr::copy_nonoverlapping(fppi_anchors().as_ptr(), out_anchors, ANCHOR_COUNT);
        Ok(())
    })
}
