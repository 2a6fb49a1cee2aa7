//! C interface to the nym recommender.
//!
//! Objects are opaque handles created by `blc_*_new`/`blc_fit*` and released
//! with the matching `*_free`. Every fallible call returns a [`BlcStatus`];
//! on failure, [`blc_last_error`] describes the error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use blc::blc::{predict_local, run_blc, run_blc_adaptive, AdaptiveConfig, BlcFit, Schedule};
use blc::factorization::Hyperparams;
use blc::metrics::{guessing_probability, rmse};
use blc::ratings::{load_triplets, Format, RatingTriplet, SparseRatings};
use blc::Error;

/// Result of a call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Divergence = 4,
    Io = 5,
    Panic = 6,
}

/// A set of (user, item, rating) triplets.
pub struct BlcRatings {
    inner: SparseRatings,
}

/// A trained nym model.
pub struct BlcModel {
    fit: BlcFit,
}

/// Model and schedule settings for [`blc_fit`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct BlcFitConfig {
    pub d: usize,
    pub nyms: usize,
    pub sigma2: f64,
    pub sigma2_u: f64,
    pub sigma2_v: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub init_std: f64,
    /// Fraction of users choosing their nym between factorizations.
    pub period: f64,
    pub passes: usize,
    pub seed: u64,
    pub reseed_idle: bool,
}

impl BlcFitConfig {
    fn hyper(&self) -> Hyperparams {
        Hyperparams {
            d: self.d,
            sigma2: self.sigma2,
            sigma2_u: self.sigma2_u,
            sigma2_v: self.sigma2_v,
            epsilon: self.epsilon,
            max_iters: self.max_iters,
            init_std: self.init_std,
            seed: self.seed,
        }
    }

    fn schedule(&self) -> Schedule {
        Schedule {
            factorization_period: self.period,
            passes: self.passes,
            seed: self.seed,
            update_nyms: true,
            reseed_idle: self.reseed_idle,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> BlcStatus {
    match err {
        Error::Parse { .. } | Error::Duplicate { .. } => BlcStatus::Parse,
        Error::InvalidArgument(_) | Error::Config(_) | Error::Empty(_) => BlcStatus::InvalidArgument,
        Error::Divergence { .. } | Error::Singular { .. } => BlcStatus::Divergence,
        Error::Io(_) => BlcStatus::Io,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (BlcStatus, String)>) -> BlcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BlcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BlcStatus::Panic
        }
    }
}

fn lib(err: Error) -> (BlcStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(name: &str) -> (BlcStatus, String) {
    (BlcStatus::NullPointer, format!("{name} is null"))
}

fn invalid(msg: impl Into<String>) -> (BlcStatus, String) {
    (BlcStatus::InvalidArgument, msg.into())
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, (BlcStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn write<T>(out: *mut T, value: T, name: &str) -> Result<(), (BlcStatus, String)> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn blc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library defaults: d = 4, 5 nyms, σ² = 1, prior variances 1000,
/// ε = 1e-4, 200 iterations, period 0.1, 30 passes, seed 0.
#[no_mangle]
pub extern "C" fn blc_fit_config_default() -> BlcFitConfig {
    let h = Hyperparams::default();
    let s = Schedule::default();
    BlcFitConfig {
        d: h.d,
        nyms: 5,
        sigma2: h.sigma2,
        sigma2_u: h.sigma2_u,
        sigma2_v: h.sigma2_v,
        epsilon: h.epsilon,
        max_iters: h.max_iters,
        init_std: h.init_std,
        period: s.factorization_period,
        passes: s.passes,
        seed: s.seed,
        reseed_idle: s.reseed_idle,
    }
}

/// Builds a ratings set from parallel arrays of dense 0-based ids.
///
/// # Safety
/// `users`, `items` and `values` must each point to `len` readable elements
/// (they may be NULL when `len` is 0). `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blc_ratings_new(
    n_users: usize,
    n_items: usize,
    users: *const u32,
    items: *const u32,
    values: *const f64,
    len: usize,
    out: *mut *mut BlcRatings,
) -> BlcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let slice = |p: *const u32, name: &str| -> Result<&[u32], (BlcStatus, String)> {
            if len == 0 {
                Ok(&[][..])
            } else if p.is_null() {
                Err(null(name))
            } else {
                Ok(std::slice::from_raw_parts(p, len))
            }
        };
        let (u, i) = (slice(users, "users")?, slice(items, "items")?);
        let v: &[f64] = if len == 0 {
            &[]
        } else if values.is_null() {
            return Err(null("values"));
        } else {
            std::slice::from_raw_parts(values, len)
        };
        let triplets = (0..len)
            .map(|k| RatingTriplet::new(u[k] as usize, i[k] as usize, v[k]))
            .collect();
        let inner = SparseRatings::new(n_users, n_items, triplets).map_err(lib)?;
        write(out, Box::into_raw(Box::new(BlcRatings { inner })), "out")
    })
}

/// Loads a ratings file. `format` is "csv", "tab" or "movielens".
/// External ids are re-indexed densely in order of first appearance.
///
/// # Safety
/// `path` and `format` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blc_ratings_load(
    path: *const c_char,
    format: *const c_char,
    out: *mut *mut BlcRatings,
) -> BlcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(deref(path, "path")?)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let format: Format = CStr::from_ptr(deref(format, "format")?)
            .to_str()
            .map_err(|_| invalid("format is not UTF-8"))?
            .parse()
            .map_err(lib)?;
        let file = File::open(path).map_err(|e| lib(e.into()))?;
        let inner = load_triplets(BufReader::new(file), format).map_err(lib)?;
        write(out, Box::into_raw(Box::new(BlcRatings { inner })), "out")
    })
}

/// Number of ratings, or 0 for NULL.
///
/// # Safety
/// `ratings` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blc_ratings_len(ratings: *const BlcRatings) -> usize {
    ratings.as_ref().map_or(0, |r| r.inner.len())
}

/// Number of users, or 0 for NULL.
///
/// # Safety
/// `ratings` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blc_ratings_num_users(ratings: *const BlcRatings) -> usize {
    ratings.as_ref().map_or(0, |r| r.inner.n_users())
}

/// Number of items, or 0 for NULL.
///
/// # Safety
/// `ratings` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blc_ratings_num_items(ratings: *const BlcRatings) -> usize {
    ratings.as_ref().map_or(0, |r| r.inner.n_items())
}

/// # Safety
/// `ratings` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn blc_ratings_free(ratings: *mut BlcRatings) {
    if !ratings.is_null() {
        drop(Box::from_raw(ratings));
    }
}

/// Trains with a fixed nym count.
///
/// # Safety
/// `ratings` and `config` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blc_fit(
    ratings: *const BlcRatings,
    config: *const BlcFitConfig,
    out: *mut *mut BlcModel,
) -> BlcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let r = deref(ratings, "ratings")?;
        let c = deref(config, "config")?;
        let fit = run_blc(&r.inner, c.nyms, &c.hyper(), &c.schedule()).map_err(lib)?;
        write(out, Box::into_raw(Box::new(BlcModel { fit })), "out")
    })
}

/// Trains starting from one nym, doubling until the training error per
/// rating drops below `error_threshold` or `max_nyms` would be exceeded.
/// `config.nyms` is ignored.
///
/// # Safety
/// `ratings` and `config` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blc_fit_adaptive(
    ratings: *const BlcRatings,
    config: *const BlcFitConfig,
    error_threshold: f64,
    max_nyms: usize,
    out: *mut *mut BlcModel,
) -> BlcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let r = deref(ratings, "ratings")?;
        let c = deref(config, "config")?;
        let adaptive = AdaptiveConfig {
            enabled: true,
            error_threshold,
            max_nyms,
        };
        let fit = run_blc_adaptive(&r.inner, &c.hyper(), &c.schedule(), &adaptive)
            .map_err(lib)?
            .fit;
        write(out, Box::into_raw(Box::new(BlcModel { fit })), "out")
    })
}

fn check_user_item(fit: &BlcFit, user: usize, item: usize) -> Result<(), (BlcStatus, String)> {
    if user >= fit.assignment.n_users() || item >= fit.model.n_items() {
        return Err(invalid(format!("user {user} or item {item} out of range")));
    }
    Ok(())
}

/// Predicted rating of `item` for `user`.
///
/// # Safety
/// `model` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blc_model_predict(
    model: *const BlcModel,
    user: usize,
    item: usize,
    out: *mut f64,
) -> BlcStatus {
    guard(|| {
        let m = deref(model, "model")?;
        check_user_item(&m.fit, user, item)?;
        write(out, m.fit.predict(user, item), "out")
    })
}

/// Prediction refined with the user's own ratings from `ratings`, anchored
/// to their nym with weight `w` and prior variance `sigma2_l`.
///
/// # Safety
/// `model` and `ratings` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blc_model_predict_local(
    model: *const BlcModel,
    ratings: *const BlcRatings,
    user: usize,
    item: usize,
    w: f64,
    sigma2_l: f64,
    out: *mut f64,
) -> BlcStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let r = deref(ratings, "ratings")?;
        check_user_item(&m.fit, user, item)?;
        if user >= r.inner.n_users() {
            return Err(invalid("user out of range for ratings"));
        }
        let nym = m.fit.assignment.nym_of(user);
        let local = predict_local(&m.fit.model, r.inner.user_ratings(user), nym, w, sigma2_l)
            .map_err(lib)?;
        write(out, local.predict(item), "out")
    })
}

/// Nym held by `user`.
///
/// # Safety
/// `model` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blc_model_nym_of(
    model: *const BlcModel,
    user: usize,
    out: *mut usize,
) -> BlcStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if user >= m.fit.assignment.n_users() {
            return Err(invalid(format!("user {user} out of range")));
        }
        write(out, m.fit.assignment.nym_of(user), "out")
    })
}

/// Number of nyms, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blc_model_num_nyms(model: *const BlcModel) -> usize {
    model.as_ref().map_or(0, |m| m.fit.model.n_nyms())
}

/// Largest nym's share of users.
///
/// # Safety
/// `model` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blc_model_guessing_probability(
    model: *const BlcModel,
    out: *mut f64,
) -> BlcStatus {
    guard(|| {
        let m = deref(model, "model")?;
        write(out, guessing_probability(&m.fit.assignment).map_err(lib)?, "out")
    })
}

/// Root mean square error of the model's predictions on `test`.
///
/// # Safety
/// `model` and `test` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blc_model_rmse(
    model: *const BlcModel,
    test: *const BlcRatings,
    out: *mut f64,
) -> BlcStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let t = deref(test, "test")?;
        if t.inner.n_users() > m.fit.assignment.n_users() || t.inner.n_items() > m.fit.model.n_items() {
            return Err(invalid("test set is larger than the model"));
        }
        write(out, rmse(|u, i| m.fit.predict(u, i), &t.inner).map_err(lib)?, "out")
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn blc_model_free(model: *mut BlcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
