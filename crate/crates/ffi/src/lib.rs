//! C ABI over the `mmrel` library.
//!
//! Every fallible function returns an [`MmrelStatus`]. On failure a message
//! is available from [`mmrel_last_error`] on the same thread. Handles are
//! opaque; free them with the matching `*_free` function. Strings returned
//! through `char **` out-parameters are owned by the caller and must be
//! released with [`mmrel_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mmrel::embedding::{event_attention_weights, similarity, Embedding, FrameCache, ToyEncoder};
use mmrel::evaluation::{relation_prf, LabeledPairSet};
use mmrel::eventgraph::{graphs_to_records, load_corpus, Document, Label, PairKey};
use mmrel::merp::{class_weights, predict_graph, MerpModel};
use mmrel::pipeline::{load_model, PipelineConfig};
use mmrel::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmrelStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    MissingInput = 3,
    DataError = 4,
    ConfigError = 5,
    IoError = 6,
    Panic = 7,
}

/// Precision, recall and F1 of one relation type, with raw counts.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MmrelPrf {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// A loaded, validated corpus.
pub struct MmrelCorpus {
    docs: Vec<Document>,
}

/// A trained model with the encoder and frame cache it predicts with.
pub struct MmrelPredictor {
    config: PipelineConfig,
    encoder: ToyEncoder,
    frames: FrameCache,
    model: MerpModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let clean = message.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap_or_default());
}

fn status_of(e: &Error) -> MmrelStatus {
    match e {
        Error::MissingInput { .. } => MmrelStatus::MissingInput,
        Error::Io { .. } => MmrelStatus::IoError,
        Error::Parse { .. } | Error::Validation { .. } | Error::Data { .. } | Error::Predictor { .. } => {
            MmrelStatus::DataError
        }
        Error::Config(_) => MmrelStatus::ConfigError,
        Error::Argument(_) | Error::Frozen => MmrelStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and panics for [`mmrel_last_error`].
fn guard<F>(f: F) -> MmrelStatus
where
    F: FnOnce() -> Result<(), (MmrelStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MmrelStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MmrelStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (MmrelStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (MmrelStatus, String) {
    (MmrelStatus::NullPointer, format!("{name} is null"))
}

fn invalid(message: impl Into<String>) -> (MmrelStatus, String) {
    (MmrelStatus::InvalidArgument, message.into())
}

unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a Path, (MmrelStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not UTF-8")))?;
    Ok(Path::new(s))
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), (MmrelStatus, String)> {
    let c = CString::new(s).map_err(|_| invalid("string contains NUL"))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn label_from(code: u8) -> Result<Label, (MmrelStatus, String)> {
    Label::from_index(code as usize).ok_or_else(|| invalid(format!("label code {code} is not 0, 1 or 2")))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn mmrel_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mmrel_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Scaled cosine similarity of two `dim`-long vectors.
///
/// # Safety
/// `a` and `b` must point to `dim` doubles; `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn mmrel_similarity(
    a: *const f64,
    b: *const f64,
    dim: usize,
    scale: f64,
    out: *mut f64,
) -> MmrelStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("a, b or out"));
        }
        let a = Embedding::new(std::slice::from_raw_parts(a, dim).to_vec());
        let b = Embedding::new(std::slice::from_raw_parts(b, dim).to_vec());
        *out = similarity(&a, &b, scale).map_err(lib_err)?;
        Ok(())
    })
}

/// Event-focused attention weights over `len` tokens centred on `k`.
///
/// # Safety
/// `out` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mmrel_attention_weights(len: usize, k: usize, p: f64, out: *mut f64) -> MmrelStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let w = event_attention_weights(len, k, p).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&w);
        Ok(())
    })
}

/// Inverse-frequency class weights for counts in Hierarchical, Identical, NoRel order.
///
/// # Safety
/// `counts` and `out` must each point to three elements.
#[no_mangle]
pub unsafe extern "C" fn mmrel_class_weights(counts: *const usize, out: *mut f64) -> MmrelStatus {
    guard(|| {
        if counts.is_null() || out.is_null() {
            return Err(null("counts or out"));
        }
        let c = std::slice::from_raw_parts(counts, 3);
        let w = class_weights([c[0], c[1], c[2]]).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, 3).copy_from_slice(&w);
        Ok(())
    })
}

/// P/R/F1 for `label` over `n` aligned pairs. Label codes: 0 Hierarchical, 1 Identical, 2 NoRel.
///
/// # Safety
/// `gold` and `pred` must point to `n` bytes; `out` to one [`MmrelPrf`].
#[no_mangle]
pub unsafe extern "C" fn mmrel_relation_prf(
    gold: *const u8,
    pred: *const u8,
    n: usize,
    label: u8,
    out: *mut MmrelPrf,
) -> MmrelStatus {
    guard(|| {
        if gold.is_null() || pred.is_null() || out.is_null() {
            return Err(null("gold, pred or out"));
        }
        let t = label_from(label)?;
        let to_set = |codes: &[u8]| -> Result<LabeledPairSet, (MmrelStatus, String)> {
            codes
                .iter()
                .enumerate()
                .map(|(i, c)| Ok((PairKey::new("", i.to_string(), ""), label_from(*c)?)))
                .collect()
        };
        let g = to_set(std::slice::from_raw_parts(gold, n))?;
        let p = to_set(std::slice::from_raw_parts(pred, n))?;
        let r = relation_prf(&g, &p, t);
        *out = MmrelPrf {
            true_positives: r.true_positives,
            predicted: r.predicted,
            gold: r.gold,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        };
        Ok(())
    })
}

/// Loads and validates a corpus file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrel_corpus_open(path: *const c_char, out: *mut *mut MmrelCorpus) -> MmrelStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let docs = load_corpus(path_arg(path, "path")?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MmrelCorpus { docs }));
        Ok(())
    })
}

/// Number of documents; 0 for null.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmrel_corpus_len(corpus: *const MmrelCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.docs.len())
}

/// Id of document `index`, as a new string.
///
/// # Safety
/// `corpus` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrel_corpus_doc_id(
    corpus: *const MmrelCorpus,
    index: usize,
    out: *mut *mut c_char,
) -> MmrelStatus {
    guard(|| {
        let c = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let doc = c
            .docs
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range")))?;
        out_string(doc.doc_id.clone(), out)
    })
}

/// # Safety
/// `corpus` must be null or a handle from [`mmrel_corpus_open`] that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mmrel_corpus_free(corpus: *mut MmrelCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Loads the model, encoder and frame cache named by a pipeline config file.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrel_predictor_open(
    config_path: *const c_char,
    out: *mut *mut MmrelPredictor,
) -> MmrelStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = PipelineConfig::load(path_arg(config_path, "config_path")?).map_err(lib_err)?;
        config.validate().map_err(lib_err)?;
        let encoder = config.build_encoder().map_err(lib_err)?;
        let frames = config.load_frames().map_err(lib_err)?;
        let model = load_model(&config).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MmrelPredictor {
            config,
            encoder,
            frames,
            model,
        }));
        Ok(())
    })
}

/// Predicts relations for document `index` of `corpus` and returns them as a
/// JSON array of relation records.
///
/// # Safety
/// `predictor` and `corpus` must be live handles; `json_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmrel_predictor_predict(
    predictor: *const MmrelPredictor,
    corpus: *const MmrelCorpus,
    index: usize,
    json_out: *mut *mut c_char,
) -> MmrelStatus {
    guard(|| {
        let p = predictor.as_ref().ok_or_else(|| null("predictor"))?;
        let c = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        if json_out.is_null() {
            return Err(null("json_out"));
        }
        let doc = c
            .docs
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range")))?;
        let enc_cfg = p.config.encoder.config();
        let featurizer =
            mmrel::embedding::Featurizer::new(&p.encoder, &p.frames, &enc_cfg).map_err(lib_err)?;
        let graph = predict_graph(doc, &p.model, &featurizer, p.config.eval.prune).map_err(lib_err)?;
        let records = graphs_to_records(&[graph], "prediction");
        let json = serde_json::to_string(&records).map_err(|e| invalid(e.to_string()))?;
        out_string(json, json_out)
    })
}

/// # Safety
/// `predictor` must be null or a handle from [`mmrel_predictor_open`] that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mmrel_predictor_free(predictor: *mut MmrelPredictor) {
    if !predictor.is_null() {
        drop(Box::from_raw(predictor));
    }
}

/// Null-terminated version string.
#[no_mangle]
pub extern "C" fn mmrel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(status_of(&Error::Config("x".into())), MmrelStatus::ConfigError);
        assert_eq!(
            status_of(&Error::Data {
                doc_id: "d".into(),
                message: "m".into()
            }),
            MmrelStatus::DataError
        );
    }

    #[test]
    fn panics_become_status_codes() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, MmrelStatus::Panic);
        let msg = unsafe { CStr::from_ptr(mmrel_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "internal panic");
    }
}
