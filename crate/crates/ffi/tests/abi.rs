use std::ffi::{c_char, CStr, CString};
use std::ptr;

use numprobe::planted;
use numprobe::tensorio;
use numprobe_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    np_string_free(s);
    out
}

unsafe fn last_error() -> Option<String> {
    let p = np_last_error();
    (!p.is_null()).then(|| CStr::from_ptr(p).to_string_lossy().into_owned())
}

#[test]
fn numerals_round_trip() {
    unsafe {
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(np_numeral_parse(c("570").as_ptr(), &mut a), NpStatus::Ok);
        assert_eq!(np_numeral_parse(c("5.8 × 10^2").as_ptr(), &mut b), NpStatus::Ok);
        let mut v = 0.0;
        assert_eq!(np_numeral_log2(a, &mut v), NpStatus::Ok);
        assert!((v - 9.154818109052104).abs() < 1e-12);
        let mut order = 0;
        assert_eq!(np_numeral_compare(a, b, &mut order), NpStatus::Ok);
        assert_eq!(order, -1);
        let mut text = ptr::null_mut();
        assert_eq!(np_numeral_render(a, 2, -1, &mut text), NpStatus::Ok);
        assert_eq!(take(text), "5.7 × 10^2");
        assert_eq!(np_numeral_render(b, 0, -1, &mut text), NpStatus::Ok);
        assert_eq!(take(text), "580");
        assert_eq!(np_numeral_render(b, 7, -1, &mut text), NpStatus::InvalidArgument);
        np_numeral_free(a);
        np_numeral_free(b);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut n = ptr::null_mut();
        assert_eq!(np_numeral_parse(c("-3").as_ptr(), &mut n), NpStatus::Parse);
        assert!(n.is_null());
        assert!(last_error().is_some());
        assert_eq!(np_numeral_parse(ptr::null(), &mut n), NpStatus::NullPointer);
        assert_eq!(last_error().as_deref(), Some("text is null"));
        assert_eq!(
            np_numeral_parse(c("12").as_ptr(), ptr::null_mut()),
            NpStatus::NullPointer
        );
        let bad = [0xffu8, 0];
        assert_eq!(np_numeral_parse(bad.as_ptr().cast(), &mut n), NpStatus::InvalidUtf8);
        // success clears the message
        assert_eq!(np_numeral_parse(c("12").as_ptr(), &mut n), NpStatus::Ok);
        assert_eq!(last_error(), None);
        np_numeral_free(n);
        np_numeral_free(ptr::null_mut());
        np_string_free(ptr::null_mut());

        let mut m = ptr::null_mut();
        assert_eq!(np_matrix_read(c("/nonexistent/x.hstn").as_ptr(), &mut m), NpStatus::Io);
        let mut metrics = NpRegressionMetrics::default();
        assert_eq!(
            np_regression_metrics(ptr::null(), ptr::null(), 0, &mut metrics),
            NpStatus::Metrics
        );
    }
}

#[test]
fn probe_through_the_abi_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.hstn");
    let h = planted::planted_magnitude_states(3, 400, 8, 0.05);
    tensorio::write_matrix(&h, &path).unwrap();
    let expected = numprobe::probes::fit_probe(&h, numprobe::probes::ProbeKind::MagnitudeReg, 1.0).unwrap();
    let expected = numprobe::probes::predict_regression(&expected, &h).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(np_matrix_read(c(path.to_str().unwrap()).as_ptr(), &mut m), NpStatus::Ok);
        let (mut n, mut d, mut layer) = (0, 0, -1);
        assert_eq!(np_matrix_dims(m, &mut n, &mut d, &mut layer), NpStatus::Ok);
        assert_eq!((n, d, layer), (400, 8, 0));

        let mut probe = ptr::null_mut();
        assert_eq!(np_probe_fit(m, 0, 1.0, &mut probe), NpStatus::Ok);
        let mut scores = vec![0.0; n];
        assert_eq!(
            np_probe_predict(probe, m, scores.as_mut_ptr(), n - 1),
            NpStatus::BufferTooSmall
        );
        assert_eq!(np_probe_predict(probe, m, scores.as_mut_ptr(), n), NpStatus::Ok);
        assert_eq!(scores, expected);

        let saved = c(dir.path().join("p.json").to_str().unwrap());
        assert_eq!(np_probe_save(probe, saved.as_ptr()), NpStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(np_probe_load(saved.as_ptr(), &mut back), NpStatus::Ok);
        let mut again = vec![0.0; n];
        assert_eq!(np_probe_predict(back, m, again.as_mut_ptr(), n), NpStatus::Ok);
        assert_eq!(again, scores);

        // the classifier needs labels this matrix lacks
        let mut cls = ptr::null_mut();
        assert_eq!(np_probe_fit(m, 2, 1.0, &mut cls), NpStatus::Probe);
        assert_eq!(np_probe_fit(m, 9, 1.0, &mut cls), NpStatus::InvalidArgument);

        let copy = c(dir.path().join("copy.hstn").to_str().unwrap());
        assert_eq!(np_matrix_write(m, copy.as_ptr()), NpStatus::Ok);
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("copy.hstn")).unwrap()
        );
        np_probe_free(probe);
        np_probe_free(back);
        np_matrix_free(m);
    }
}

#[test]
fn prompts_responses_and_metrics() {
    unsafe {
        let mut prompt = ptr::null_mut();
        assert_eq!(
            np_make_prompt(c("570").as_ptr(), c("5.8 × 10^2").as_ptr(), 0, 0, &mut prompt),
            NpStatus::Ok
        );
        let spec = numprobe::dataset::PromptSpec::zero_shot(numprobe::dataset::Variant::IntSci);
        assert_eq!(
            take(prompt),
            numprobe::dataset::make_prompt_from_surfaces("570", "5.8 × 10^2", &spec).unwrap()
        );
        assert_eq!(
            np_make_prompt(c("1").as_ptr(), c("2").as_ptr(), 5, 0, &mut prompt),
            NpStatus::InvalidArgument
        );

        let mut side = 9;
        for (answer, want) in [(" 5.8 × 10^2", 1), ("570", 0), ("dunno", -1)] {
            assert_eq!(
                np_parse_response(
                    c(answer).as_ptr(),
                    c("570").as_ptr(),
                    c("5.8 × 10^2").as_ptr(),
                    &mut side
                ),
                NpStatus::Ok
            );
            assert_eq!(side, want, "{answer}");
        }

        let gold = [8.0, 16.0, 1024.0];
        let pred = [3.0, 4.5, 10.0];
        let mut m = NpRegressionMetrics::default();
        assert_eq!(
            np_regression_metrics(pred.as_ptr(), gold.as_ptr(), 3, &mut m),
            NpStatus::Ok
        );
        let lib = numprobe::metrics::regression_metrics(&pred, &gold).unwrap();
        assert_eq!((m.mse, m.aacc, m.r_squared), (lib.mse, lib.aacc, lib.r_squared));
    }
}

/// The generated header is valid C and declares every exported function.
#[test]
fn header_compiles_and_is_complete() {
    let root = env!("CARGO_MANIFEST_DIR");
    let header = std::fs::read_to_string(format!("{root}/include/numprobe.h")).unwrap();
    let source = std::fs::read_to_string(format!("{root}/src/lib.rs")).unwrap();
    for line in source.lines().filter(|l| l.contains("extern \"C\" fn np_")) {
        let name = line.split("fn ").nth(1).unwrap().split('(').next().unwrap();
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args([
            "-std=c99",
            "-Wall",
            "-Werror",
            "-fsyntax-only",
            "-x",
            "c",
            &format!("{root}/include/numprobe.h"),
        ])
        .status()
    else {
        eprintln!("no C compiler, syntax check skipped");
        return;
    };
    assert!(status.success());
}
