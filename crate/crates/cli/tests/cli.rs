// SPDX-License-Identifier: Apache-2.0

//! End-to-end checks of the `tsm` binary: exit codes, output shape, and
//! the secrecy rules of the payload tooling.

use std::process::{Command, Output};

fn tsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn bundled_boot_scenario_passes() {
    let out = tsm(&["run", "--bundled", "boot"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("verdict: pass"), "{text}");
    assert!(text.contains("result == 1"), "{text}");
}

#[test]
fn failing_expectation_sets_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wrong.scn");
    std::fs::write(
        &path,
        "tsm-scenario v1\n\n[machine]\nmemory_base = 0x80000000\nmemory_size = 0x80000000\n\
         confidential_base = 0xc0000000\nconfidential_size = 0x40000000\nharts = 1\n\n\
         [image boot]\npage gpa=0x0 fill=5a perms=rwx\nfdt vharts=1\ntap mode=auto\n\n\
         [script]\nhart 0 promote boot\nexpect result == 99\n",
    )
    .unwrap();
    let out = tsm(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("FAIL"), "{text}");
    assert!(text.contains("verdict: fail"), "{text}");
}

#[test]
fn malformed_scenario_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.scn");
    std::fs::write(&path, "tsm-scenario v1\n\n[machine]\nfrobnicate = 1\n").unwrap();
    let out = tsm(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn corpus_lists_and_prints_scenarios() {
    let list = tsm(&["corpus"]);
    assert!(list.status.success());
    let names = stdout(&list);
    for expected in ["boot", "lifecycle", "sharing", "irq", "tap-bitflip"] {
        assert!(names.contains(expected), "{names}");
    }

    let one = tsm(&["corpus", "lifecycle"]);
    assert!(one.status.success());
    assert!(stdout(&one).contains("tsm-scenario v1"));

    let missing = tsm(&["corpus", "nonesuch"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn trace_flag_writes_the_rendered_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("boot.trace");
    let out = tsm(&["run", "--bundled", "boot", "--trace", path.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success());
    let trace = std::fs::read_to_string(&path).unwrap();
    assert!(trace.contains("ev=call side=hyp ext=0x54565331 fid=0"), "{trace}");
    assert!(trace.contains("ev=switch from=hyp to=tsm residue=1"), "{trace}");
}

#[test]
fn threaded_run_of_a_single_hart_scenario_matches() {
    let out = tsm(&["run", "--bundled", "sharing", "--threads", "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("verdict: pass"));
}

#[test]
fn suite_defends_everything() {
    let out = tsm(&["suite", "--fuzz-cases", "25"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("verdict: defended"), "{text}");
    assert!(!text.contains("BREACHED"), "{text}");
    assert!(text.contains("0 leaked"), "{text}");
}

#[test]
fn allocator_report_prints_the_overhead_arithmetic() {
    let out = tsm(&["report", "--allocator"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("1 token(s), 9 token bytes"), "{text}");
    assert!(text.contains("262144 tokens, 2359296 token bytes (2.25 MiB)"), "{text}");
}

#[test]
fn tap_tooling_round_trips_and_keeps_secrets_off_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demo.tap");
    let secret_hex = "726f746174652d6d65";

    let create = tsm(&[
        "tap", "create", "--out", path.to_str().unwrap(),
        "--secret", &format!("3:{secret_hex}"),
        "--seed", "7",
    ]);
    assert!(create.status.success(), "{}", String::from_utf8_lossy(&create.stderr));

    // Inspection parses the header only; the secret must never appear.
    let inspect = tsm(&["tap", "inspect", path.to_str().unwrap()]);
    assert!(inspect.status.success());
    let header = stdout(&inspect);
    assert!(header.contains("test-kem"), "{header}");
    assert!(header.contains("ml-kem-768"), "{header}");
    assert!(header.contains("not opened"), "{header}");
    assert!(!header.contains(secret_hex), "secret leaked: {header}");

    // Unsealing shows lengths by default and bytes only on request.
    let unseal = tsm(&["tap", "unseal", path.to_str().unwrap()]);
    assert!(unseal.status.success());
    let closed = stdout(&unseal);
    assert!(closed.contains("index 3: 9 bytes"), "{closed}");
    assert!(!closed.contains(secret_hex), "secret leaked: {closed}");

    let open = tsm(&["tap", "unseal", path.to_str().unwrap(), "--show-secrets"]);
    assert!(open.status.success());
    assert!(stdout(&open).contains(secret_hex));
}

#[test]
fn tampered_tap_refuses_to_unseal() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tampered.tap");
    let create = tsm(&["tap", "create", "--out", path.to_str().unwrap(), "--seed", "9"]);
    assert!(create.status.success());

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01; // inside the authentication tag
    std::fs::write(&path, &bytes).unwrap();

    let unseal = tsm(&["tap", "unseal", path.to_str().unwrap()]);
    assert_eq!(unseal.status.code(), Some(2));
    let err = String::from_utf8_lossy(&unseal.stderr);
    assert!(err.contains("authentication"), "{err}");
}
