//! C interface: load a checkpoint, transcribe one utterance.
//!
//! Every function returns a [`WlasStatus`]; on failure the message is kept
//! per thread and read back with [`wlas_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use wlas::corpus::VideoClip;
use wlas::decoding::{decode, BeamConfig};
use wlas::features::{AudioFeatures, MFCC_DIM};
use wlas::model::{Checkpoint, Mode, Model, ModelInputs};
use wlas::{Error, NdArray};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WlasStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WlasMode {
    Audio = 0,
    Lips = 1,
    Both = 2,
}

impl From<WlasMode> for Mode {
    fn from(m: WlasMode) -> Mode {
        match m {
            WlasMode::Audio => Mode::Audio,
            WlasMode::Lips => Mode::Lips,
            WlasMode::Both => Mode::Both,
        }
    }
}

/// Opaque model handle.
pub struct WlasModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend_from_slice(msg.as_bytes());
    });
}

fn status_of(err: &Error) -> WlasStatus {
    match err {
        Error::Io { .. } => WlasStatus::Io,
        Error::Format { .. } | Error::Json(_) => WlasStatus::Format,
        Error::Shape { .. } => WlasStatus::Shape,
        Error::InvalidInput(_) | Error::Config(_) | Error::Vocabulary { .. } => WlasStatus::InvalidArgument,
        _ => WlasStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (WlasStatus, String)>) -> WlasStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WlasStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            WlasStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (WlasStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (WlasStatus, String) {
    (WlasStatus::NullPointer, format!("{what} is null"))
}

/// Copies `bytes` plus a NUL terminator into `buf`; `written` receives the
/// length without the terminator, or the required length on overflow.
unsafe fn copy_out(bytes: &[u8], buf: *mut c_char, cap: usize, written: *mut usize) -> Result<(), (WlasStatus, String)> {
    if !written.is_null() {
        *written = bytes.len();
    }
    if buf.is_null() || cap < bytes.len() + 1 {
        return Err((
            WlasStatus::BufferTooSmall,
            format!("buffer of {cap} bytes, need {}", bytes.len() + 1),
        ));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wlas_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf`.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn wlas_last_error(buf: *mut c_char, cap: usize, written: *mut usize) -> WlasStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match copy_out(&msg, buf, cap, written) {
        Ok(()) => WlasStatus::Ok,
        Err((s, _)) => s,
    }
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wlas_model_load(path: *const c_char, out: *mut *mut WlasModel) -> WlasStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (WlasStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ckpt = Checkpoint::load(Path::new(p)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(WlasModel { model: ckpt.model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`wlas_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wlas_model_free(model: *mut WlasModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Frame height and width the model expects, and its vocabulary size.
///
/// # Safety
/// `model` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn wlas_model_info(
    model: *const WlasModel,
    height: *mut usize,
    width: *mut usize,
    vocab_size: *mut usize,
) -> WlasStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = &m.model.config;
        for (p, v) in [(height, c.input_height), (width, c.input_width), (vocab_size, c.vocab_size)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Transcribes one utterance into `out` (NUL-terminated UTF-8).
///
/// `video` holds `frames × height × width` grayscale bytes and may be null
/// (treated as absent, zeros to the encoder). `audio` holds
/// `audio_frames × 13` MFCC values, row-major.
///
/// # Safety
/// Buffers must be valid for the stated sizes; `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn wlas_transcribe(
    model: *const WlasModel,
    video: *const u8,
    frames: usize,
    height: usize,
    width: usize,
    audio: *const f32,
    audio_frames: usize,
    mode: WlasMode,
    beam_width: usize,
    out: *mut c_char,
    out_cap: usize,
    written: *mut usize,
) -> WlasStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if audio.is_null() {
            return Err(null("audio"));
        }
        if audio_frames == 0 || beam_width == 0 {
            return Err((WlasStatus::InvalidArgument, "audio_frames and beam_width must be positive".into()));
        }
        let samples = std::slice::from_raw_parts(audio, audio_frames * MFCC_DIM);
        let feats = NdArray::new(vec![audio_frames, MFCC_DIM], samples.iter().map(|&x| f64::from(x)).collect())
            .and_then(AudioFeatures::new)
            .map_err(lib_err)?;
        let clip = if video.is_null() {
            None
        } else {
            Some(VideoClip {
                frames,
                height,
                width,
                pixels: std::slice::from_raw_parts(video, frames * height * width).to_vec(),
            })
        };
        let inputs = ModelInputs::new(clip.as_ref(), &feats, mode.into(), &m.config).map_err(lib_err)?;
        let beam = BeamConfig {
            width: beam_width,
            ..BeamConfig::default()
        };
        let text = decode(m, &inputs, &beam).map_err(lib_err)?.text;
        copy_out(text.as_bytes(), out, out_cap, written)
    })
}
