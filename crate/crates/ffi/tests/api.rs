use std::ffi::{c_char, CStr, CString};
use std::ptr;
use wdro_opf_ffi::*;

const CASE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/ieee14_wind.m");

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe { wdro_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn load() -> *mut WdroNetwork {
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { wdro_network_load(cstr(CASE).as_ptr(), &mut net) }, WdroStatus::Ok);
    net
}

#[test]
fn solve_and_evaluate_through_the_c_api() {
    unsafe {
        let net = load();
        let (mut nb, mut ng, mut nw) = (0, 0, 0);
        assert_eq!(wdro_network_dims(net, &mut nb, &mut ng, &mut nw), WdroStatus::Ok);
        assert_eq!((nb, ng, nw), (14, 5, 4));

        let mut train = ptr::null_mut();
        let proto = cstr(r#"{"distribution":"laplace","seed":4}"#);
        assert_eq!(wdro_samples_generate(net, proto.as_ptr(), 300, &mut train), WdroStatus::Ok);
        assert_eq!(wdro_samples_len(train), 300);

        let mut sol = ptr::null_mut();
        let status = wdro_solve(net, train, cstr("wdro").as_ptr(), 0.05, 0.9, 10.0, ptr::null(), &mut sol);
        assert_eq!(status, WdroStatus::Ok, "{}", last_error());
        let mut sum = WdroSolveSummary::default();
        assert_eq!(wdro_solution_summary(sol, &mut sum), WdroStatus::Ok);
        assert!(sum.converged && sum.objective > 0.0 && sum.kkt_residual < 1e-6);

        let mut alpha = vec![0.0; ng];
        let mut pg = vec![0.0; ng];
        assert_eq!(wdro_solution_generators(sol, pg.as_mut_ptr(), alpha.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), ng), WdroStatus::Ok);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let mut small = vec![0.0; 2];
        assert_eq!(wdro_solution_generators(sol, small.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), 2), WdroStatus::BufferTooSmall);

        let mut json = ptr::null_mut();
        assert_eq!(wdro_solution_json(sol, &mut json), WdroStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        wdro_string_free(json);
        assert!(text.contains("\"case_hash\""));

        let mut eval = ptr::null_mut();
        let proto = cstr(r#"{"distribution":"laplace","seed":5}"#);
        assert_eq!(wdro_samples_generate(net, proto.as_ptr(), 2000, &mut eval), WdroStatus::Ok);
        let mut rep = WdroEvaluation::default();
        assert_eq!(wdro_evaluate(net, sol, eval, cstr("approx").as_ptr(), &mut rep), WdroStatus::Ok);
        assert_eq!(rep.trials, 2000);
        assert!(rep.lowest_reliability > 0.9 && rep.mean_cost.is_finite());

        wdro_samples_free(eval);
        wdro_samples_free(train);
        wdro_solution_free(sol);
        wdro_network_free(net);
    }
}

#[test]
fn errors_are_reported_with_codes_and_messages() {
    unsafe {
        let mut net = ptr::null_mut();
        assert_eq!(wdro_network_load(cstr("/nonexistent/case.m").as_ptr(), &mut net), WdroStatus::InputError);
        assert!(net.is_null());
        assert!(last_error().contains("i/o"));

        assert_eq!(wdro_network_load(ptr::null(), &mut net), WdroStatus::NullPointer);
        assert_eq!(wdro_network_parse(cstr("mpc.bus = [").as_ptr(), false, &mut net), WdroStatus::InputError);

        let net = load();
        let mut s = ptr::null_mut();
        let data = [0.01, -0.01, 0.0, 0.02];
        assert_eq!(wdro_samples_new(data.as_ptr(), 4, 1, &mut s), WdroStatus::Ok);
        let mut sol = ptr::null_mut();
        assert_eq!(wdro_solve(net, s, cstr("lp").as_ptr(), 0.05, 0.9, 10.0, ptr::null(), &mut sol), WdroStatus::InputError);
        assert!(last_error().contains("unknown method"));
        // A single sample is not enough.
        assert_eq!(wdro_solve(net, s, cstr("wdro").as_ptr(), 0.05, 0.9, 10.0, ptr::null(), &mut sol), WdroStatus::InputError);
        assert!(sol.is_null());
        wdro_samples_free(s);
        wdro_network_free(net);
        // Null handles are ignored by the release functions.
        wdro_network_free(ptr::null_mut());
        wdro_solution_free(ptr::null_mut());
        wdro_string_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/wdro_opf.h")).unwrap();
    for name in ["wdro_network_load", "wdro_samples_generate", "wdro_solve", "wdro_evaluate", "wdro_last_error", "WDRO_STATUS_INFEASIBLE = 2"] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let Ok(cc) = which_cc() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"wdro_opf.h\"\nint main(void) { WdroNetwork *n = 0; WdroStatus s = wdro_network_load(\"x.m\", &n); wdro_network_free(n); return s == WDRO_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
