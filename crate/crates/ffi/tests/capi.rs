use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use measeval_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(s: *mut std::ffi::c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    measeval_string_free(s);
    out
}

unsafe fn last_error() -> String {
    let p = measeval_last_error();
    assert!(!p.is_null());
    CStr::from_ptr(p).to_string_lossy().into_owned()
}

const PARAGRAPH: &str = "The averaged power extracted during one cycle increased by 22% from 48.4 MW to 59.0 MW (Fig. 10e).";

#[test]
fn builds_prompts_from_builtin_examples() {
    unsafe {
        let examples = measeval_examples_builtin();
        assert!(measeval_examples_len(examples) > 0);
        let mut out = ptr::null_mut();
        let status = measeval_build_prompt(examples, c("D").as_ptr(), c(PARAGRAPH).as_ptr(), &mut out);
        assert_eq!(status, MeasevalStatus::Ok);
        let prompt = take(out);
        assert!(prompt.ends_with(&format!("Text:\n{PARAGRAPH}\n\nData:\n")));
        measeval_examples_free(examples);
    }
}

#[test]
fn custom_examples_and_parse_errors() {
    unsafe {
        let mut examples = ptr::null_mut();
        let text = c("Text:\nHeated to 300 K.\n\nData:\nQuantity: 300 K\nUnit: K\n<|endoftext|>\n");
        assert_eq!(measeval_examples_parse(text.as_ptr(), &mut examples), MeasevalStatus::Ok);
        assert_eq!(measeval_examples_len(examples), 1);
        measeval_examples_free(examples);

        let mut none = ptr::null_mut();
        assert_eq!(measeval_examples_parse(c("").as_ptr(), &mut none), MeasevalStatus::ParseFailed);
        assert!(none.is_null());
        assert!(!last_error().is_empty());
    }
}

#[test]
fn budget_matches_the_defaults() {
    unsafe {
        let budget = measeval_budget_default();
        assert_eq!((budget.token_limit, budget.max_tokens_cap, budget.safety_margin), (2049, 350, 0));
        let mut n = 0;
        assert_eq!(measeval_compute_max_tokens(1700, budget, &mut n), MeasevalStatus::Ok);
        assert_eq!(n, 349);
        assert_eq!(measeval_compute_max_tokens(2049, budget, &mut n), MeasevalStatus::OversizedPrompt);
        assert!(last_error().contains("2049"));

        assert_eq!(measeval_estimate_tokens(c("abcde").as_ptr(), &mut n), MeasevalStatus::Ok);
        assert_eq!(n, 2);
        assert!(measeval_last_error().is_null());
    }
}

#[test]
fn extracts_and_scores_through_tsv() {
    unsafe {
        let completion = c("Quantity: 22%\nUnit: %\nProperty: averaged power extracted\n\n\
                            Quantity: 22%\nUnit: %\nProperty: averaged power extracted\n<|endoftext|>");
        let mut tsv = ptr::null_mut();
        let mut stats = MeasevalExtractStats::default();
        let status = measeval_extract(
            c("D").as_ptr(),
            c(PARAGRAPH).as_ptr(),
            completion.as_ptr(),
            ptr::null(),
            &mut tsv,
            &mut stats,
        );
        assert_eq!(status, MeasevalStatus::Ok);
        assert_eq!((stats.blocks, stats.dedup_removed, stats.annotations, stats.dropped), (2, 1, 2, 0));
        let pred = take(tsv);
        assert_eq!(pred.lines().count(), 3);

        let pred = c(&pred);
        let mut report = ptr::null_mut();
        assert_eq!(measeval_score(pred.as_ptr(), pred.as_ptr(), &mut report), MeasevalStatus::Ok);
        let mut overall = MeasevalClassScore::default();
        assert_eq!(measeval_report_overall(report, &mut overall), MeasevalStatus::Ok);
        assert_eq!((overall.f_measure, overall.n_gold), (1.0, 4));
        let mut unit = MeasevalClassScore::default();
        assert_eq!(measeval_report_class(report, c("Unit").as_ptr(), &mut unit), MeasevalStatus::Ok);
        assert_eq!(unit.n_pred, 1);
        assert_eq!(
            measeval_report_class(report, c("Qualifier").as_ptr(), &mut unit),
            MeasevalStatus::NotFound
        );
        assert_eq!(
            measeval_report_class(report, c("Nope").as_ptr(), &mut unit),
            MeasevalStatus::InvalidArgument
        );
        let mut rendered = ptr::null_mut();
        assert_eq!(measeval_report_render(report, 1, &mut rendered), MeasevalStatus::Ok);
        assert!(take(rendered).lines().any(|l| l.starts_with("overall\t1.000\t1.000\t1.000")));
        measeval_report_free(report);
    }
}

#[test]
fn unknown_predicted_documents_are_rejected() {
    let header = "docId\tannotSet\tannotType\tstartOffset\tendOffset\tannotId\ttext\tother\n";
    let gold = c(&format!("{header}A\t1\tQuantity\t0\t1\t1\tx\t\n"));
    let pred = c(&format!("{header}B\t1\tQuantity\t0\t1\t1\tx\t\n"));
    unsafe {
        let mut report = ptr::null_mut();
        assert_eq!(measeval_score(gold.as_ptr(), pred.as_ptr(), &mut report), MeasevalStatus::UnknownDocument);
        assert!(report.is_null());
        assert_eq!(
            measeval_score(gold.as_ptr(), c("not a tsv").as_ptr(), &mut report),
            MeasevalStatus::ParseFailed
        );
    }
}

#[test]
fn null_and_invalid_arguments_are_reported() {
    unsafe {
        let mut n = 0;
        assert_eq!(measeval_estimate_tokens(ptr::null(), &mut n), MeasevalStatus::NullArgument);
        assert_eq!(last_error(), "text is null");
        assert_eq!(measeval_estimate_tokens(c("x").as_ptr(), ptr::null_mut()), MeasevalStatus::NullArgument);
        let bad = [0xffu8, 0];
        assert_eq!(measeval_estimate_tokens(bad.as_ptr().cast(), &mut n), MeasevalStatus::InvalidUtf8);
        let mut out = ptr::null_mut();
        assert_eq!(
            measeval_build_prompt(ptr::null(), c("D").as_ptr(), c("t").as_ptr(), &mut out),
            MeasevalStatus::NullArgument
        );
        measeval_string_free(ptr::null_mut());
        measeval_examples_free(ptr::null_mut());
        measeval_report_free(ptr::null_mut());
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/measeval.h")
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(header()).unwrap();
    let source = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

/// Compiles and runs a small C program against the static library.
#[test]
fn c_program_links_against_the_static_library() {
    let Ok(exe) = std::env::current_exe() else { return };
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libmeaseval_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let dir = std::env::temp_dir().join(format!("measeval-capi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let src = dir.join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "measeval.h"
int main(void) {
    MeasevalExamples *ex = measeval_examples_builtin();
    char *prompt = NULL;
    if (measeval_build_prompt(ex, "D", "Held at 4 K.", &prompt) != MEASEVAL_STATUS_OK) return 1;
    size_t tokens = 0, max_tokens = 0;
    measeval_estimate_tokens(prompt, &tokens);
    if (measeval_compute_max_tokens(tokens, measeval_budget_default(), &max_tokens) != MEASEVAL_STATUS_OK) return 2;
    printf("%zu %zu\n", tokens, max_tokens);
    measeval_string_free(prompt);
    measeval_examples_free(ex);
    return measeval_estimate_tokens(NULL, &tokens) == MEASEVAL_STATUS_NULL_ARGUMENT ? 0 : 3;
}
"#,
    )
    .unwrap();
    let bin = dir.join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{out:?}");
    let line = String::from_utf8(out.stdout).unwrap();
    let nums: Vec<usize> = line.split_whitespace().map(|n| n.parse().unwrap()).collect();
    assert_eq!(nums.len(), 2);
    assert_eq!(nums[0] + nums[1], 2049.min(nums[0] + 350));
    let _ = std::fs::remove_dir_all(&dir);
}
