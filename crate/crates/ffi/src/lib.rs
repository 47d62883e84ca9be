//! C ABI over the localization engine.
//!
//! Every fallible function returns a [`GeolocStatus`]; on failure the
//! calling thread's last error message is available from
//! [`geoloc_last_error_message`]. Engines are opaque handles created by
//! [`geoloc_engine_open`] and released with [`geoloc_engine_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use geoloc::geo::{evaluate_trajectory, geo_to_pixel, pixel_to_geo, GeoPoint, GeoRef};
use geoloc::pipeline::{localize_frame, Database, FrameStatus, Models, PipelineConfig};
use geoloc::store::FrameEntry;
use geoloc::GeolocError;

/// Result codes. Configuration and data-format errors use the same values
/// as the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeolocStatus {
    Ok = 0,
    Failure = 1,
    Config = 2,
    DataFormat = 3,
    NullArgument = 4,
    InvalidArgument = 5,
    Io = 6,
    Panic = 7,
}

/// How a frame's position was obtained.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeolocFrameStatus {
    /// Fine homography.
    Ok = 0,
    /// Center of the coarse satellite region.
    FineFail = 1,
    /// Center of the best retrieved tile.
    RetrievalOnly = 2,
    /// The image could not be read; no position.
    InputError = 3,
}

impl From<FrameStatus> for GeolocFrameStatus {
    fn from(s: FrameStatus) -> Self {
        match s {
            FrameStatus::Ok => GeolocFrameStatus::Ok,
            FrameStatus::FineFail => GeolocFrameStatus::FineFail,
            FrameStatus::RetrievalOnly => GeolocFrameStatus::RetrievalOnly,
            FrameStatus::InputError => GeolocFrameStatus::InputError,
        }
    }
}

/// Position estimate for one frame. Coordinates are NaN and `tile_id` is
/// -1 when `has_estimate` is false.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GeolocFix {
    pub status: GeolocFrameStatus,
    pub has_estimate: bool,
    pub lat: f64,
    pub lon: f64,
    /// Frame center in map pixels.
    pub map_x: f64,
    pub map_y: f64,
    pub tile_id: i64,
    pub inliers: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GeolocMetrics {
    pub frames: usize,
    pub success_rate: f64,
    /// Mean error over non-drift frames in meters; NaN when all drifted.
    pub mle_m: f64,
    pub drift_frames: usize,
}

/// Geographic anchor of a map: latitude and longitude of the top-left
/// pixel and meters per pixel along x (east) and y (south).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GeolocGeoRef {
    pub lat0: f64,
    pub lon0: f64,
    pub gx: f64,
    pub gy: f64,
}

/// Loaded tile database, models and pipeline settings.
pub struct GeolocEngine {
    db: Database,
    models: Models,
    cfg: PipelineConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(GeolocStatus, String);

impl From<GeolocError> for Failure {
    fn from(e: GeolocError) -> Self {
        let status = match &e {
            GeolocError::Config(_) => GeolocStatus::Config,
            GeolocError::Io { .. } => GeolocStatus::Io,
            e if e.is_data_format() => GeolocStatus::DataFormat,
            _ => GeolocStatus::Failure,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> GeolocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GeolocStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            GeolocStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(GeolocStatus::NullArgument, format!("{name} is null"))
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(GeolocStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller passes null or a valid, writable pointer.
    unsafe { p.as_mut() }.ok_or_else(|| null(name))
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn geoloc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn geoloc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opens the tile database in `db_dir`. `config_json` is null for the
/// defaults, or a JSON object with pipeline settings.
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn geoloc_engine_open(
    db_dir: *const c_char,
    config_json: *const c_char,
    out: *mut *mut GeolocEngine,
) -> GeolocStatus {
    guarded(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let dir = read_str(db_dir, "db_dir")?;
        let cfg: PipelineConfig = if config_json.is_null() {
            PipelineConfig::default()
        } else {
            serde_json::from_str(read_str(config_json, "config_json")?)
                .map_err(|e| Failure(GeolocStatus::Config, format!("invalid pipeline config: {e}")))?
        };
        cfg.validate()?;
        let db = Database::open(dir)?;
        let models = Models::from_config(&cfg)?;
        *out = Box::into_raw(Box::new(GeolocEngine { db, models, cfg }));
        Ok(())
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` is null or came from [`geoloc_engine_open`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn geoloc_engine_free(engine: *mut GeolocEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Localizes the PNG frame at `image_path`. An unreadable image is not an
/// error: it yields a fix with status `INPUT_ERROR` and no estimate.
///
/// # Safety
/// `engine` came from [`geoloc_engine_open`]; `image_path` is null or
/// NUL-terminated; `out` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn geoloc_localize(
    engine: *const GeolocEngine,
    image_path: *const c_char,
    out: *mut GeolocFix,
) -> GeolocStatus {
    guarded(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let path = PathBuf::from(read_str(image_path, "image_path")?);
        let out = out_ref(out, "out")?;
        let frame = FrameEntry {
            frame_id: path.display().to_string(),
            image: Some(path),
            features: None,
            descriptor: None,
            gt_lat: f64::NAN,
            gt_lon: f64::NAN,
            timestamp: 0.0,
        };
        let r = localize_frame(&frame, &engine.db, &engine.models, &engine.cfg)?;
        let est = r.estimate.unwrap_or(GeoPoint::new(f64::NAN, f64::NAN));
        let px = r.map_pixel.unwrap_or([f64::NAN; 2]);
        *out = GeolocFix {
            status: r.status.into(),
            has_estimate: r.estimate.is_some(),
            lat: est.lat,
            lon: est.lon,
            map_x: px[0],
            map_y: px[1],
            tile_id: r.tile_id.map_or(-1, i64::from),
            inliers: r.inliers,
        };
        Ok(())
    })
}

/// Trajectory metrics for `len` per-frame localization errors in meters.
///
/// # Safety
/// `errors` points to `len` readable values; `out` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn geoloc_evaluate(
    errors: *const f64,
    len: usize,
    out: *mut GeolocMetrics,
) -> GeolocStatus {
    guarded(|| {
        if errors.is_null() {
            return Err(null("errors"));
        }
        let out = out_ref(out, "out")?;
        let errors = std::slice::from_raw_parts(errors, len);
        let e = evaluate_trajectory(errors)
            .map_err(|e| Failure(GeolocStatus::InvalidArgument, e.to_string()))?;
        *out = GeolocMetrics {
            frames: e.frames(),
            success_rate: e.success_rate,
            mle_m: e.mle.unwrap_or(f64::NAN),
            drift_frames: e.drift.iter().filter(|&&d| d).count(),
        };
        Ok(())
    })
}

fn georef(r: &GeolocGeoRef) -> Result<GeoRef, Failure> {
    GeoRef::new(r.lat0, r.lon0, r.gx, r.gy)
        .map_err(|e| Failure(GeolocStatus::InvalidArgument, e.to_string()))
}

/// Latitude and longitude of map pixel `(x, y)`.
///
/// # Safety
/// `lat` and `lon` are null or writable.
#[no_mangle]
pub unsafe extern "C" fn geoloc_pixel_to_geo(
    anchor: GeolocGeoRef,
    x: f64,
    y: f64,
    lat: *mut f64,
    lon: *mut f64,
) -> GeolocStatus {
    guarded(|| {
        let (lat, lon) = (out_ref(lat, "lat")?, out_ref(lon, "lon")?);
        let g = pixel_to_geo(&georef(&anchor)?, [x, y])
            .map_err(|e| Failure(GeolocStatus::InvalidArgument, e.to_string()))?;
        (*lat, *lon) = (g.lat, g.lon);
        Ok(())
    })
}

/// Map pixel of a latitude and longitude.
///
/// # Safety
/// `x` and `y` are null or writable.
#[no_mangle]
pub unsafe extern "C" fn geoloc_geo_to_pixel(
    anchor: GeolocGeoRef,
    lat: f64,
    lon: f64,
    x: *mut f64,
    y: *mut f64,
) -> GeolocStatus {
    guarded(|| {
        let (x, y) = (out_ref(x, "x")?, out_ref(y, "y")?);
        let p = geo_to_pixel(&georef(&anchor)?, GeoPoint::new(lat, lon))
            .map_err(|e| Failure(GeolocStatus::InvalidArgument, e.to_string()))?;
        (*x, *y) = (p[0], p[1]);
        Ok(())
    })
}
