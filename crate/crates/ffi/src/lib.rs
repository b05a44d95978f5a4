//! C ABI over the wdro-opf library.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_new`/`*_load`/`*_solve` call and released with the matching `*_free`.
//! Functions return a [`WdroStatus`]; on failure the message is kept per
//! thread and can be read with [`wdro_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use wdro_opf::case_io::{load_case, parse_case, CaseFormat, Network};
use wdro_opf::opfcore::{solve_with_enforcement, Method, Solution, SolveConfig, StrategyFile};
use wdro_opf::simlab::{evaluate_strategy, generate_samples, EvalModel, RngProtocol};
use wdro_opf::wasserstein::ForecastErrors;
use wdro_opf::Error;

/// Result codes. The non-zero values match the command-line exit statuses.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WdroStatus {
    Ok = 0,
    Infeasible = 2,
    SolverFailure = 3,
    InputError = 4,
    NullPointer = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A parsed network case.
pub struct WdroNetwork {
    net: Network,
}

/// A set of forecast-error samples (per-unit), one row per sample.
pub struct WdroSamples {
    samples: ForecastErrors,
}

/// A solved operating strategy together with the inputs that produced it.
pub struct WdroSolution {
    solution: Solution,
    file: StrategyFile,
}

/// Summary of a Monte Carlo evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct WdroEvaluation {
    pub trials: u64,
    pub failed: u64,
    pub lowest_reliability: f64,
    pub mean_cost: f64,
    pub cost_std_error: f64,
}

/// Scalar results of a solve.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct WdroSolveSummary {
    pub objective: f64,
    pub worst_case_cost: f64,
    pub generation_cost: f64,
    pub reserve_cost: f64,
    pub epsilon: f64,
    pub kkt_residual: f64,
    pub rounds: u32,
    pub converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> WdroStatus {
    match e.exit_code() {
        2 => WdroStatus::Infeasible,
        3 => WdroStatus::SolverFailure,
        _ => WdroStatus::InputError,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (WdroStatus, String)>) -> WdroStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            WdroStatus::Ok
        }
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            WdroStatus::Panic
        }
    }
}

fn lib(e: Error) -> (WdroStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (WdroStatus, String) {
    (WdroStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (WdroStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (WdroStatus::InputError, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (WdroStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, (WdroStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated).
/// Returns the message length without the terminator; 0 when there is none.
/// The copy is truncated when `len` is too small.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn wdro_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            0
        }
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Loads a case file (MATPOWER `.m` or JSON, chosen by extension).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wdro_network_load(path: *const c_char, out: *mut *mut WdroNetwork) -> WdroStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let net = load_case(Path::new(str_arg(path, "path")?)).map_err(lib)?;
        *out = Box::into_raw(Box::new(WdroNetwork { net }));
        Ok(())
    })
}

/// Parses a case from text; `json` selects the JSON format instead of MATPOWER.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wdro_network_parse(text: *const c_char, json: bool, out: *mut *mut WdroNetwork) -> WdroStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let format = if json { CaseFormat::NativeJson } else { CaseFormat::MatpowerM };
        let net = parse_case(str_arg(text, "text")?, format).map_err(lib)?;
        *out = Box::into_raw(Box::new(WdroNetwork { net }));
        Ok(())
    })
}

/// Number of buses, generators and wind farms.
///
/// # Safety
/// `net` must come from this library; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn wdro_network_dims(net: *const WdroNetwork, n_buses: *mut usize, n_generators: *mut usize, n_wind: *mut usize) -> WdroStatus {
    guard(|| {
        let net = &in_arg(net, "net")?.net;
        *out_arg(n_buses, "n_buses")? = net.n_buses();
        *out_arg(n_generators, "n_generators")? = net.n_generators();
        *out_arg(n_wind, "n_wind")? = net.n_wind();
        Ok(())
    })
}

/// # Safety
/// `net` must be null or come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn wdro_network_free(net: *mut WdroNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Wraps `n_samples` rows of `n_farms` per-unit errors (row-major).
///
/// # Safety
/// `data` must point to `n_farms * n_samples` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wdro_samples_new(data: *const f64, n_farms: usize, n_samples: usize, out: *mut *mut WdroSamples) -> WdroStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let len = n_farms.checked_mul(n_samples).ok_or((WdroStatus::InputError, "sample size overflows".into()))?;
        if data.is_null() && len > 0 {
            return Err(null("data"));
        }
        let values = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(data, len).to_vec() };
        let samples = ForecastErrors::new(n_farms, values).map_err(lib)?;
        *out = Box::into_raw(Box::new(WdroSamples { samples }));
        Ok(())
    })
}

/// Draws samples for the network's farms from a JSON generation protocol,
/// for example `{"distribution":"laplace","scale_fraction":0.1,"seed":1}`.
///
/// # Safety
/// `net` must come from this library; `protocol_json` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn wdro_samples_generate(net: *const WdroNetwork, protocol_json: *const c_char, n_samples: usize, out: *mut *mut WdroSamples) -> WdroStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let net = &in_arg(net, "net")?.net;
        let protocol = RngProtocol::from_json(str_arg(protocol_json, "protocol_json")?).map_err(lib)?;
        let samples = generate_samples(&protocol, net, n_samples).map_err(lib)?;
        *out = Box::into_raw(Box::new(WdroSamples { samples }));
        Ok(())
    })
}

/// Number of samples held.
///
/// # Safety
/// `samples` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn wdro_samples_len(samples: *const WdroSamples) -> usize {
    samples.as_ref().map_or(0, |s| s.samples.len())
}

/// # Safety
/// `samples` must be null or come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn wdro_samples_free(samples: *mut WdroSamples) {
    if !samples.is_null() {
        drop(Box::from_raw(samples));
    }
}

/// Solves the chance-constrained dispatch. `method` is one of `wdro`, `ro`,
/// `mdro`, `gsp`, `dc`; `rho` is applied to every constraint family.
/// `cache_dir` may be null to disable the sizing cache.
///
/// # Safety
/// Handles must come from this library; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn wdro_solve(
    net: *const WdroNetwork,
    samples: *const WdroSamples,
    method: *const c_char,
    rho: f64,
    beta: f64,
    sigma_max: f64,
    cache_dir: *const c_char,
    out: *mut *mut WdroSolution,
) -> WdroStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let net = &in_arg(net, "net")?.net;
        let samples = &in_arg(samples, "samples")?.samples;
        let method: Method = str_arg(method, "method")?.parse().map_err(lib)?;
        let cache_dir = if cache_dir.is_null() { None } else { Some(str_arg(cache_dir, "cache_dir")?.into()) };
        let config = SolveConfig { method, rho: [rho; 4], beta, sigma_max, cache_dir, ..SolveConfig::default() };
        let solution = solve_with_enforcement(net, samples, &config).map_err(lib)?;
        let file = StrategyFile::new(net, samples, &config, &solution);
        *out = Box::into_raw(Box::new(WdroSolution { solution, file }));
        Ok(())
    })
}

/// # Safety
/// `sol` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wdro_solution_summary(sol: *const WdroSolution, out: *mut WdroSolveSummary) -> WdroStatus {
    guard(|| {
        let r = &in_arg(sol, "sol")?.solution.report;
        *out_arg(out, "out")? = WdroSolveSummary {
            objective: r.objective,
            worst_case_cost: r.worst_case_exact,
            generation_cost: r.generation_cost,
            reserve_cost: r.reserve_cost,
            epsilon: r.epsilon,
            kkt_residual: r.kkt_residual,
            rounds: r.rounds as u32,
            converged: r.converged,
        };
        Ok(())
    })
}

/// Copies per-generator setpoints, participation factors and reserves
/// (per-unit). Each non-null array must hold `len >= n_generators` doubles.
///
/// # Safety
/// Every non-null array must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wdro_solution_generators(
    sol: *const WdroSolution,
    pg: *mut f64,
    alpha: *mut f64,
    r_up: *mut f64,
    r_down: *mut f64,
    len: usize,
) -> WdroStatus {
    guard(|| {
        let s = &in_arg(sol, "sol")?.solution.strategy;
        if len < s.pg.len() {
            return Err((WdroStatus::BufferTooSmall, format!("need {} entries, got {len}", s.pg.len())));
        }
        for (dst, src) in [(pg, &s.pg), (alpha, &s.alpha), (r_up, &s.r_up), (r_down, &s.r_dn)] {
            if !dst.is_null() {
                ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
            }
        }
        Ok(())
    })
}

/// Strategy file JSON as written by the command line. Release with
/// [`wdro_string_free`].
///
/// # Safety
/// `sol` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wdro_solution_json(sol: *const WdroSolution, out: *mut *mut c_char) -> WdroStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let json = in_arg(sol, "sol")?.file.to_json().map_err(lib)?;
        *out = CString::new(json).expect("json has no nul bytes").into_raw();
        Ok(())
    })
}

/// # Safety
/// `sol` must be null or come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn wdro_solution_free(sol: *mut WdroSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn wdro_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Monte Carlo evaluation; `model` is one of `full-ac`, `approx`, `lpf`, `dc`.
///
/// # Safety
/// Handles must come from this library; `model` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn wdro_evaluate(
    net: *const WdroNetwork,
    sol: *const WdroSolution,
    samples: *const WdroSamples,
    model: *const c_char,
    out: *mut WdroEvaluation,
) -> WdroStatus {
    guard(|| {
        let net = &in_arg(net, "net")?.net;
        let sol = in_arg(sol, "sol")?;
        let samples = &in_arg(samples, "samples")?.samples;
        let model: EvalModel = str_arg(model, "model")?.parse().map_err(lib)?;
        let strategy = sol.file.strategy_for(net).map_err(lib)?;
        let rep = evaluate_strategy(net, &strategy, samples, model).map_err(lib)?;
        *out_arg(out, "out")? = WdroEvaluation {
            trials: rep.trials,
            failed: rep.failed,
            lowest_reliability: rep.lowest_reliability,
            mean_cost: rep.mean_cost,
            cost_std_error: rep.cost_std_error,
        };
        Ok(())
    })
}
