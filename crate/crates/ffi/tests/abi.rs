use std::ffi::{CStr, CString};
use std::ptr;

use mmrel::pipeline::{self, PipelineConfig};
use mmrel::synthetic::SyntheticSpec;
use mmrel_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mmrel_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn scalar_functions() {
    let a = [1.0, 0.0, 0.0];
    let b = [1.0, 1.0, 0.0];
    let mut out = 0.0;
    let s = unsafe { mmrel_similarity(a.as_ptr(), b.as_ptr(), 3, 100.0, &mut out) };
    assert_eq!(s, MmrelStatus::Ok);
    assert!((out - 100.0 / 2f64.sqrt()).abs() < 1e-9);

    let zero = [0.0; 3];
    let s = unsafe { mmrel_similarity(a.as_ptr(), zero.as_ptr(), 3, 100.0, &mut out) };
    assert_eq!(s, MmrelStatus::InvalidArgument);
    assert!(!last_error().is_empty());

    let mut w = [0.0; 5];
    assert_eq!(unsafe { mmrel_attention_weights(5, 2, 1.0, w.as_mut_ptr()) }, MmrelStatus::Ok);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w[2] > w[1] && w[1] > w[0]);

    let counts = [10usize, 10, 80];
    let mut cw = [0.0; 3];
    assert_eq!(unsafe { mmrel_class_weights(counts.as_ptr(), cw.as_mut_ptr()) }, MmrelStatus::Ok);
    assert!((cw[2] - 100.0 / 240.0).abs() < 1e-12);

    let gold = [0u8, 0, 1, 2];
    let pred = [0u8, 1, 1, 2];
    let mut prf = MmrelPrf::default();
    assert_eq!(unsafe { mmrel_relation_prf(gold.as_ptr(), pred.as_ptr(), 4, 0, &mut prf) }, MmrelStatus::Ok);
    assert_eq!((prf.precision, prf.recall), (1.0, 0.5));
    assert_eq!(unsafe { mmrel_relation_prf(gold.as_ptr(), pred.as_ptr(), 4, 7, &mut prf) }, MmrelStatus::InvalidArgument);
    assert_eq!(unsafe { mmrel_relation_prf(ptr::null(), pred.as_ptr(), 4, 0, &mut prf) }, MmrelStatus::NullPointer);
}

#[test]
fn corpus_and_predictor_handles() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_docs: 20,
        n_eval_docs: 4,
        ..SyntheticSpec::default()
    };
    pipeline::gen_synthetic(&spec, dir.path()).unwrap();
    let config_path = dir.path().join("pipeline.toml");
    let mut cfg = PipelineConfig::load(&config_path).unwrap();
    cfg.merp.epochs = 2;
    pipeline::pseudo_label(&cfg).unwrap();
    pipeline::train_commonsense(&cfg).unwrap();
    pipeline::train(&cfg).unwrap();

    let missing = CString::new(dir.path().join("nope.jsonl").to_str().unwrap()).unwrap();
    let mut corpus = ptr::null_mut();
    assert_eq!(unsafe { mmrel_corpus_open(missing.as_ptr(), &mut corpus) }, MmrelStatus::MissingInput);
    assert!(corpus.is_null());

    let path = CString::new(dir.path().join("eval_corpus.jsonl").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mmrel_corpus_open(path.as_ptr(), &mut corpus) }, MmrelStatus::Ok);
    assert_eq!(unsafe { mmrel_corpus_len(corpus) }, 4);
    let mut id = ptr::null_mut();
    assert_eq!(unsafe { mmrel_corpus_doc_id(corpus, 0, &mut id) }, MmrelStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(id) }.to_str().unwrap(), "syn-eval-0000");
    unsafe { mmrel_string_free(id) };
    assert_eq!(unsafe { mmrel_corpus_doc_id(corpus, 9, &mut id) }, MmrelStatus::InvalidArgument);

    let cfg_c = CString::new(config_path.to_str().unwrap()).unwrap();
    let mut predictor = ptr::null_mut();
    assert_eq!(unsafe { mmrel_predictor_open(cfg_c.as_ptr(), &mut predictor) }, MmrelStatus::Ok, "{}", last_error());
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { mmrel_predictor_predict(predictor, corpus, 0, &mut json) }, MmrelStatus::Ok, "{}", last_error());
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe { mmrel_string_free(json) };
    let records: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    assert!(records.iter().all(|r| r["doc_id"] == "syn-eval-0000"));

    unsafe {
        mmrel_predictor_free(predictor);
        mmrel_corpus_free(corpus);
        mmrel_corpus_free(ptr::null_mut());
    }
    assert_eq!(unsafe { mmrel_corpus_len(ptr::null()) }, 0);
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/mmrel.h");
    for name in [
        "mmrel_last_error",
        "mmrel_string_free",
        "mmrel_similarity",
        "mmrel_attention_weights",
        "mmrel_class_weights",
        "mmrel_relation_prf",
        "mmrel_corpus_open",
        "mmrel_corpus_len",
        "mmrel_corpus_doc_id",
        "mmrel_corpus_free",
        "mmrel_predictor_open",
        "mmrel_predictor_predict",
        "mmrel_predictor_free",
        "mmrel_version",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    let v = unsafe { CStr::from_ptr(mmrel_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
