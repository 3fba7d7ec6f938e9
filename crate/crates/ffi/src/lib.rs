//! C ABI over the `qkdnet` library.
//!
//! Every fallible call returns a [`QkdStatus`]. On failure a description is
//! kept per thread and can be read with [`qkd_last_error`]. Strings returned
//! through `char **` out-parameters are owned by the caller and must be
//! released with [`qkd_string_free`]; handles have their own free functions.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use qkdnet::harness::{self, RunOptions, RunOutput, Scenario};
use qkdnet::protocol::otp_xor;
use qkdnet::qusec::compute_relay_path;
use qkdnet::{load_topology, AppId, NodeId, Topology, WeightPolicy};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkdStatus {
    Ok = 0,
    /// A scenario ran but an expectation failed, or two traces differ.
    ExpectationFailed = 1,
    /// Invalid topology, scenario or trace input.
    ConfigError = 2,
    NullArgument = 3,
    InvalidUtf8 = 4,
    NotFound = 5,
    LengthMismatch = 6,
    Panic = 7,
}

/// Opaque loaded topology.
pub struct QkdTopology {
    inner: Arc<Topology>,
}

/// Opaque finished scenario run.
pub struct QkdRun {
    output: RunOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(QkdStatus, String);

type FfiResult<T> = Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<QkdStatus>) -> QkdStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            QkdStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Fail(QkdStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(QkdStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> FfiResult<()> {
    if out.is_null() {
        return Err(Fail(QkdStatus::NullArgument, "output pointer is null".into()));
    }
    let c = CString::new(s).map_err(|_| Fail(QkdStatus::ConfigError, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn config(e: impl std::fmt::Display) -> Fail {
    Fail(QkdStatus::ConfigError, e.to_string())
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn qkd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn qkd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates a topology JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn qkd_topology_load(json: *const c_char, out: *mut *mut QkdTopology) -> QkdStatus {
    guard(|| {
        let json = text(json, "json")?;
        if out.is_null() {
            return Err(Fail(QkdStatus::NullArgument, "out is null".into()));
        }
        let topo = load_topology(json).map_err(config)?;
        *out = Box::into_raw(Box::new(QkdTopology { inner: Arc::new(topo) }));
        Ok(QkdStatus::Ok)
    })
}

/// # Safety
/// `topo` must come from [`qkd_topology_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn qkd_topology_free(topo: *mut QkdTopology) {
    if !topo.is_null() {
        drop(Box::from_raw(topo));
    }
}

unsafe fn topology<'a>(p: *const QkdTopology) -> FfiResult<&'a QkdTopology> {
    p.as_ref().ok_or_else(|| Fail(QkdStatus::NullArgument, "topology is null".into()))
}

/// Writes the node hosting `app` to `node_out`.
///
/// # Safety
/// Pointers must be valid; `app` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qkd_topology_resolve_app(
    topo: *const QkdTopology,
    app: *const c_char,
    node_out: *mut *mut c_char,
) -> QkdStatus {
    guard(|| {
        let t = topology(topo)?;
        let app = AppId::from(text(app, "app")?);
        let node = t.inner.resolve_app(&app).map_err(|e| Fail(QkdStatus::NotFound, e.to_string()))?;
        put_string(node_out, node.to_string())?;
        Ok(QkdStatus::Ok)
    })
}

/// Computes the relay path between two nodes as JSON
/// (`{"nodes":[..],"links":[..],"kms":[..],"cost":..}`). `policy` may be NULL
/// to use the topology's own weight policy.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qkd_compute_path(
    topo: *const QkdTopology,
    src: *const c_char,
    dst: *const c_char,
    policy: *const c_char,
    json_out: *mut *mut c_char,
) -> QkdStatus {
    guard(|| {
        let t = topology(topo)?;
        let src = NodeId::from(text(src, "src")?);
        let dst = NodeId::from(text(dst, "dst")?);
        let policy = if policy.is_null() {
            t.inner.weight_policy()
        } else {
            text(policy, "policy")?.parse::<WeightPolicy>().map_err(config)?
        };
        let path = compute_relay_path(&t.inner, &src, &dst, policy)
            .map_err(|e| Fail(QkdStatus::NotFound, e.to_string()))?;
        put_string(json_out, serde_json::to_string(&path).map_err(config)?)?;
        Ok(QkdStatus::Ok)
    })
}

/// Runs a scenario on `topo`. On `Ok` or `ExpectationFailed` a run handle is
/// written to `out`; inspect it with the `qkd_run_*` functions. Relative
/// paths inside the scenario resolve against the working directory.
///
/// # Safety
/// Pointers must be valid; `scenario_json` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qkd_run_scenario(
    topo: *const QkdTopology,
    scenario_json: *const c_char,
    seed: u64,
    out: *mut *mut QkdRun,
) -> QkdStatus {
    guard(|| {
        let t = topology(topo)?;
        let sc = Scenario::parse(text(scenario_json, "scenario")?).map_err(config)?;
        if out.is_null() {
            return Err(Fail(QkdStatus::NullArgument, "out is null".into()));
        }
        let output = harness::run(Arc::clone(&t.inner), &sc, &RunOptions::seeded(seed)).map_err(config)?;
        let status = if output.report.passed() {
            QkdStatus::Ok
        } else {
            set_error(output.report.failures.join("; "));
            QkdStatus::ExpectationFailed
        };
        *out = Box::into_raw(Box::new(QkdRun { output }));
        Ok(status)
    })
}

unsafe fn run_ref<'a>(p: *const QkdRun) -> FfiResult<&'a QkdRun> {
    p.as_ref().ok_or_else(|| Fail(QkdStatus::NullArgument, "run is null".into()))
}

/// Raw JSON-lines trace of a run.
///
/// # Safety
/// `run` must come from [`qkd_run_scenario`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qkd_run_trace(run: *const QkdRun, out: *mut *mut c_char) -> QkdStatus {
    guard(|| {
        put_string(out, run_ref(run)?.output.trace_text())?;
        Ok(QkdStatus::Ok)
    })
}

/// Final report of a run as JSON.
///
/// # Safety
/// `run` must come from [`qkd_run_scenario`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qkd_run_report(run: *const QkdRun, out: *mut *mut c_char) -> QkdStatus {
    guard(|| {
        let json = serde_json::to_string(&run_ref(run)?.output.report).map_err(config)?;
        put_string(out, json)?;
        Ok(QkdStatus::Ok)
    })
}

/// 0 when every expectation held, 1 otherwise, -1 for a null handle.
///
/// # Safety
/// `run` must be null or come from [`qkd_run_scenario`].
#[no_mangle]
pub unsafe extern "C" fn qkd_run_exit_code(run: *const QkdRun) -> i32 {
    run.as_ref().map_or(-1, |r| r.output.exit_code())
}

/// # Safety
/// `run` must come from [`qkd_run_scenario`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn qkd_run_free(run: *mut QkdRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// `out[i] = a[i] ^ b[i]` for `i < len`. `out` may alias `a` or `b`.
///
/// # Safety
/// All three buffers must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn qkd_otp_xor(a: *const u8, b: *const u8, len: usize, out: *mut u8) -> QkdStatus {
    guard(|| {
        if len == 0 {
            return Ok(QkdStatus::Ok);
        }
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(Fail(QkdStatus::NullArgument, "buffer is null".into()));
        }
        let x = std::slice::from_raw_parts(a, len).to_vec();
        let y = std::slice::from_raw_parts(b, len);
        let z = otp_xor(&x, y).map_err(|e| Fail(QkdStatus::LengthMismatch, e.to_string()))?;
        ptr::copy_nonoverlapping(z.as_ptr(), out, len);
        Ok(QkdStatus::Ok)
    })
}

/// Compares two JSON-lines traces after canonicalization. Returns `Ok` when
/// they match and `ExpectationFailed` otherwise; if `diff_out` is not NULL the
/// diff is written there as JSON.
///
/// # Safety
/// `expected` and `actual` must be NUL-terminated; `diff_out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn qkd_trace_diff(
    expected: *const c_char,
    actual: *const c_char,
    diff_out: *mut *mut c_char,
) -> QkdStatus {
    guard(|| {
        let d = harness::trace_compare(text(expected, "expected")?, text(actual, "actual")?).map_err(config)?;
        if !diff_out.is_null() {
            put_string(diff_out, serde_json::to_string(&d).map_err(config)?)?;
        }
        Ok(if d.is_empty() { QkdStatus::Ok } else { QkdStatus::ExpectationFailed })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MESH4: &str = include_str!("../../core/scenarios/mesh4.json");

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    unsafe fn take(p: *mut c_char) -> String {
        let s = CStr::from_ptr(p).to_str().unwrap().to_owned();
        qkd_string_free(p);
        s
    }

    unsafe fn load(json: &str) -> *mut QkdTopology {
        let mut t = ptr::null_mut();
        assert_eq!(qkd_topology_load(c(json).as_ptr(), &mut t), QkdStatus::Ok);
        t
    }

    #[test]
    fn topology_lifecycle_and_lookup() {
        unsafe {
            let t = load(MESH4);
            let mut node = ptr::null_mut();
            assert_eq!(qkd_topology_resolve_app(t, c("APP_B").as_ptr(), &mut node), QkdStatus::Ok);
            assert_eq!(take(node), "N4");
            assert_eq!(qkd_topology_resolve_app(t, c("APP_Z").as_ptr(), &mut node), QkdStatus::NotFound);
            assert!(!qkd_last_error().is_null());
            qkd_topology_free(t);
        }
    }

    #[test]
    fn invalid_topology_reports_config_error() {
        unsafe {
            let mut t = ptr::null_mut();
            assert_eq!(qkd_topology_load(c("{").as_ptr(), &mut t), QkdStatus::ConfigError);
            assert!(t.is_null());
            let msg = CStr::from_ptr(qkd_last_error()).to_str().unwrap();
            assert!(msg.contains("parse"), "{msg}");
            assert_eq!(qkd_topology_load(ptr::null(), &mut t), QkdStatus::NullArgument);
        }
    }

    #[test]
    fn path_as_json() {
        unsafe {
            let t = load(MESH4);
            let mut out = ptr::null_mut();
            let st = qkd_compute_path(t, c("N1").as_ptr(), c("N4").as_ptr(), ptr::null(), &mut out);
            assert_eq!(st, QkdStatus::Ok);
            let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
            assert_eq!(v["kms"], serde_json::json!(["KMS_1b", "KMS_3b", "KMS_3d", "KMS_4d"]));
            let st = qkd_compute_path(t, c("N1").as_ptr(), c("N4").as_ptr(), c("fastest").as_ptr(), &mut out);
            assert_eq!(st, QkdStatus::ConfigError);
            qkd_topology_free(t);
        }
    }

    #[test]
    fn scenario_run_and_self_diff() {
        let scenario = r#"{"events":[
            {"event":"get_key","app":"APP_A","target":"APP_B","label":"a"},
            {"event":"get_key_with_id","at":1,"app":"APP_B","target":"APP_A","key_of":"a","label":"b"}],
            "expect":{"keys_equal":[["a","b"]],"message_counts":{"RelayPathInstall":4}}}"#;
        unsafe {
            let t = load(MESH4);
            let mut run = ptr::null_mut();
            assert_eq!(qkd_run_scenario(t, c(scenario).as_ptr(), 5, &mut run), QkdStatus::Ok);
            assert_eq!(qkd_run_exit_code(run), 0);
            let mut trace = ptr::null_mut();
            assert_eq!(qkd_run_trace(run, &mut trace), QkdStatus::Ok);
            let trace = take(trace);
            assert_eq!(trace.lines().count(), 22);
            let mut report = ptr::null_mut();
            assert_eq!(qkd_run_report(run, &mut report), QkdStatus::Ok);
            assert!(take(report).contains("\"failures\":[]"));
            let ct = c(&trace);
            assert_eq!(qkd_trace_diff(ct.as_ptr(), ct.as_ptr(), ptr::null_mut()), QkdStatus::Ok);
            let short = c(trace.lines().next().unwrap());
            let mut d = ptr::null_mut();
            assert_eq!(qkd_trace_diff(ct.as_ptr(), short.as_ptr(), &mut d), QkdStatus::ExpectationFailed);
            assert!(take(d).contains("\"index\":1"));
            qkd_run_free(run);
            qkd_topology_free(t);
        }
    }

    #[test]
    fn failed_expectation_still_returns_a_run() {
        unsafe {
            let t = load(MESH4);
            let mut run = ptr::null_mut();
            let sc = c(r#"{"events":[{"event":"get_key","app":"APP_A","target":"APP_B","label":"a"}],
                          "expect":{"statuses":{"a":"failed_no_key"}}}"#);
            assert_eq!(qkd_run_scenario(t, sc.as_ptr(), 0, &mut run), QkdStatus::ExpectationFailed);
            assert_eq!(qkd_run_exit_code(run), 1);
            qkd_run_free(run);
            let bad = c(r#"{"events":[{"event":"get_key","app":"NOPE","target":"APP_B"}]}"#);
            assert_eq!(qkd_run_scenario(t, bad.as_ptr(), 0, &mut run), QkdStatus::ConfigError);
            qkd_topology_free(t);
        }
    }

    #[test]
    fn xor_in_place() {
        let mut a = [0xFFu8, 0x0F, 0x00];
        let b = [0x0Fu8, 0x0F, 0xAA];
        unsafe {
            let pa = a.as_mut_ptr();
            assert_eq!(qkd_otp_xor(pa, b.as_ptr(), 3, pa), QkdStatus::Ok);
            assert_eq!(qkd_otp_xor(ptr::null(), b.as_ptr(), 3, pa), QkdStatus::NullArgument);
        }
        assert_eq!(a, [0xF0, 0x00, 0xAA]);
    }
}
