use std::ffi::{CStr, CString};
use std::ptr;

use wlas::corpus::{build_dataset, DatasetConfig};
use wlas::decoding::{decode, BeamConfig};
use wlas::model::{Checkpoint, Mode, Model, ModelConfig, ModelInputs};
use wlas_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        assert_eq!(wlas_last_error(buf.as_mut_ptr(), buf.len(), ptr::null_mut()), WlasStatus::Ok);
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(wlas_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn load_errors_map_to_status_codes() {
    let mut handle: *mut WlasModel = ptr::null_mut();
    unsafe {
        assert_eq!(wlas_model_load(ptr::null(), &mut handle), WlasStatus::NullPointer);
        let missing = CString::new("/nonexistent/x.ckpt").unwrap();
        assert_eq!(wlas_model_load(missing.as_ptr(), &mut handle), WlasStatus::Io);
        assert!(last_error().contains("nonexistent"));
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"garbage").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(wlas_model_load(junk.as_ptr(), &mut handle), WlasStatus::Format);
        assert!(handle.is_null());
        wlas_model_free(ptr::null_mut());
    }
}

#[test]
fn transcription_matches_the_library() {
    let mut dc = DatasetConfig {
        train: 2,
        val: 0,
        test: 0,
        audio_only: 0,
        ..DatasetConfig::default()
    };
    dc.synth.height = 16;
    dc.synth.width = 16;
    let ds = build_dataset(&dc).unwrap();
    let model = Model::new(ModelConfig::tiny(ds.vocab.len(), 16, 16), ds.vocab.clone(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::new(model.clone(), serde_json::Value::Null).save(&path).unwrap();

    let utt = &ds.train[0];
    let beam = BeamConfig {
        width: 2,
        ..BeamConfig::default()
    };
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut WlasModel = ptr::null_mut();
    unsafe {
        assert_eq!(wlas_model_load(cpath.as_ptr(), &mut handle), WlasStatus::Ok);
        let (mut h, mut w, mut v) = (0, 0, 0);
        assert_eq!(wlas_model_info(handle, &mut h, &mut w, &mut v), WlasStatus::Ok);
        assert_eq!((h, w, v), (16, 16, ds.vocab.len()));

        let video = utt.video.as_ref().unwrap();
        let audio: Vec<f32> = utt.audio.frames().data().iter().map(|&x| x as f32).collect();
        let audio64 = wlas::features::AudioFeatures::new(
            wlas::NdArray::new(
                vec![utt.audio.len(), 13],
                audio.iter().map(|&x| f64::from(x)).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        for (mode, m) in [(WlasMode::Both, Mode::Both), (WlasMode::Lips, Mode::Lips), (WlasMode::Audio, Mode::Audio)] {
            let inputs = ModelInputs::new(Some(video), &audio64, m, &model.config).unwrap();
            let expected = decode(&model, &inputs, &beam).unwrap().text;
            let mut out = vec![0 as std::ffi::c_char; 256];
            let mut written = 0usize;
            let status = wlas_transcribe(
                handle,
                video.pixels.as_ptr(),
                video.frames,
                16,
                16,
                audio.as_ptr(),
                utt.audio.len(),
                mode,
                2,
                out.as_mut_ptr(),
                out.len(),
                &mut written,
            );
            assert_eq!(status, WlasStatus::Ok, "{}", last_error());
            let got = CStr::from_ptr(out.as_ptr()).to_str().unwrap();
            assert_eq!(written, got.len());
            assert_eq!(got, expected);
        }

        let mut tiny = [0 as std::ffi::c_char; 1];
        let mut need = 0usize;
        let status = wlas_transcribe(
            handle,
            video.pixels.as_ptr(),
            video.frames,
            16,
            16,
            audio.as_ptr(),
            utt.audio.len(),
            WlasMode::Both,
            1,
            tiny.as_mut_ptr(),
            tiny.len(),
            &mut need,
        );
        if need > 0 {
            assert_eq!(status, WlasStatus::BufferTooSmall);
        }

        let status = wlas_transcribe(
            handle,
            video.pixels.as_ptr(),
            video.frames,
            8,
            8,
            audio.as_ptr(),
            utt.audio.len(),
            WlasMode::Both,
            1,
            tiny.as_mut_ptr(),
            tiny.len(),
            &mut need,
        );
        assert_eq!(status, WlasStatus::Shape);
        assert_eq!(
            wlas_transcribe(handle, ptr::null(), 0, 0, 0, ptr::null(), 4, WlasMode::Audio, 1, tiny.as_mut_ptr(), 1, &mut need),
            WlasStatus::NullPointer
        );
        wlas_model_free(handle);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/wlas.h")).unwrap();
    for f in ["wlas_model_load", "wlas_model_free", "wlas_model_info", "wlas_transcribe", "wlas_last_error", "wlas_version", "WLAS_STATUS_BUFFER_TOO_SMALL"] {
        assert!(header.contains(f), "{f}");
    }
}
