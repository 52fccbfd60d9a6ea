// SPDX-License-Identifier: Apache-2.0

//! Scenario execution: walk the script in order, dispatch calls and guest
//! events, evaluate expectations, and produce a verdict plus the final
//! trace.
//!
//! The single-threaded runner is the authoritative mode: directives
//! execute strictly in script order, so a scenario yields a byte-identical
//! trace on every run. The threaded runner drives each hardware hart from
//! its own thread to exercise the concurrency contracts; cross-hart
//! interleaving is then scheduler-dependent, but each hart's own event
//! subsequence still equals its script order, and every expectation that
//! binds to a call forces completion of that call before it is judged.

use std::collections::BTreeMap;
use std::sync::mpsc;

use crate::abi::{tvm_fid, SbiCall, SbiError, SbiRet, EXT_TVM};
use crate::machine::AccessDomain;
use crate::scenario::{CallSpec, Check, Directive, LoadedScenario};
use crate::trace::TraceEvent;

/// One evaluated expectation.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub line: usize,
    pub description: String,
    pub passed: bool,
    /// What actually happened, when the check failed.
    pub detail: String,
}

/// The result of running a scenario script to completion.
#[derive(Debug)]
pub struct RunOutcome {
    /// True iff every expectation matched.
    pub verdict: bool,
    pub checks: Vec<CheckOutcome>,
    /// Rendered trace, one event per line under the version header.
    pub trace: String,
    pub events: Vec<TraceEvent>,
    /// Calls dispatched (hypervisor calls and pokes).
    pub calls: usize,
}

fn resolve_call(spec: &CallSpec, images: &BTreeMap<String, crate::tvm::PromoteArgs>) -> SbiCall {
    match spec {
        CallSpec::Promote { image } => {
            let args = &images[image];
            SbiCall::new(
                EXT_TVM,
                tvm_fid::PROMOTE,
                &[args.boot_state_addr, args.root_addr, args.fdt_addr, args.tap_addr],
            )
        }
        CallSpec::Raw(call) => *call,
    }
}

/// A poke is an ordinary hypervisor-domain write: allowed into
/// non-confidential memory, denied elsewhere. The denial is reported to
/// the script as `Denied` so it can be asserted with `expect error`.
fn poke_ret(loaded: &LoadedScenario, addr: u64, bytes: &[u8]) -> SbiRet {
    loaded.tsm.with_machine(|m| match m.write(AccessDomain::Hypervisor, addr, bytes) {
        Ok(()) => SbiRet::ok(0),
        Err(_) => SbiRet::err(SbiError::Denied),
    })
}

fn judge_call(check: &Check, got: SbiRet) -> (String, bool, String) {
    match check {
        Check::Result { value } => (
            format!("result == {value}"),
            got == SbiRet::ok(*value),
            format!("got error={} value={}", got.error, got.value),
        ),
        Check::Error { error } => (
            format!("error == {}", error.name()),
            got == SbiRet::err(*error),
            format!("got error={} value={}", got.error, got.value),
        ),
        _ => unreachable!("judge_call only sees result/error checks"),
    }
}

fn judge_trace(check: &Check, trace: &str) -> Option<CheckOutcomeSeed> {
    match check {
        Check::TraceHas { pattern } => Some(CheckOutcomeSeed {
            description: format!("trace has \"{pattern}\""),
            passed: trace.contains(pattern),
            detail: "pattern absent from the trace".to_string(),
        }),
        Check::TraceLacks { pattern } => Some(CheckOutcomeSeed {
            description: format!("trace lacks \"{pattern}\""),
            passed: !trace.contains(pattern),
            detail: "pattern present in the trace".to_string(),
        }),
        _ => None,
    }
}

struct CheckOutcomeSeed {
    description: String,
    passed: bool,
    detail: String,
}

/// Run the script in strict order on the calling thread. Trace
/// expectations are evaluated against the final trace; everything else is
/// judged at its place in the script.
pub fn run(loaded: &LoadedScenario) -> RunOutcome {
    let tsm = &loaded.tsm;
    let mut checks: Vec<CheckOutcome> = Vec::new();
    let mut deferred: Vec<(usize, Check)> = Vec::new();
    let mut free_reports: BTreeMap<&str, u64> = BTreeMap::new();
    let mut last_call: Option<SbiRet> = None;
    let mut calls = 0usize;

    for directive in &loaded.script {
        match directive {
            Directive::HypCall { hart, call, .. } => {
                last_call = Some(tsm.hyp_call(*hart, resolve_call(call, &loaded.images)));
                calls += 1;
            }
            Directive::GuestQueue { tvm, vhart, action, .. } => {
                tsm.queue_guest_actions(*tvm, *vhart, [action.clone()]);
            }
            Directive::AdvanceClock { ticks, .. } => {
                tsm.advance_clock(*ticks);
            }
            Directive::Poke { line: _, addr, bytes } => {
                last_call = Some(poke_ret(loaded, *addr, bytes));
                calls += 1;
            }
            Directive::ReportFree { name, .. } => {
                free_reports.insert(name, tsm.allocator().free_bytes());
            }
            Directive::Expect { line, check } => match check {
                Check::Result { .. } | Check::Error { .. } => {
                    let got = last_call.expect("parser guarantees a preceding call");
                    let (description, passed, detail) = judge_call(check, got);
                    checks.push(CheckOutcome { line: *line, description, passed, detail });
                }
                Check::FreeEquals { name } => {
                    let reported = free_reports[name.as_str()];
                    let now = tsm.allocator().free_bytes();
                    checks.push(CheckOutcome {
                        line: *line,
                        description: format!("free == {name}"),
                        passed: now == reported,
                        detail: format!("free bytes {now} != {name} {reported}"),
                    });
                }
                Check::TraceHas { .. } | Check::TraceLacks { .. } => {
                    deferred.push((*line, check.clone()));
                }
            },
        }
    }

    finish(loaded, checks, deferred, calls)
}

/// Run the script with one worker thread per hardware hart. The main
/// thread walks the script in order: calls are dispatched asynchronously
/// to their hart's worker, everything else executes inline. A result or
/// error expectation joins the call it binds to.
pub fn run_threaded(loaded: &LoadedScenario) -> RunOutcome {
    let tsm = &loaded.tsm;
    let hart_count = tsm.hart_count();
    let mut checks: Vec<CheckOutcome> = Vec::new();
    let mut deferred: Vec<(usize, Check)> = Vec::new();
    let mut free_reports: BTreeMap<&str, u64> = BTreeMap::new();
    let mut calls = 0usize;

    type Job = (SbiCall, mpsc::Sender<SbiRet>);

    std::thread::scope(|scope| {
        let mut workers: Vec<mpsc::Sender<Job>> = Vec::with_capacity(hart_count);
        for hart in 0..hart_count {
            let (tx, rx) = mpsc::channel::<Job>();
            workers.push(tx);
            scope.spawn(move || {
                while let Ok((call, reply)) = rx.recv() {
                    // The scenario may have ended without an expect on
                    // this call; a dropped receiver is fine.
                    let _ = reply.send(tsm.hyp_call(hart, call));
                }
            });
        }

        let mut last_call: Option<mpsc::Receiver<SbiRet>> = None;
        for directive in &loaded.script {
            match directive {
                Directive::HypCall { hart, call, .. } => {
                    let (reply_tx, reply_rx) = mpsc::channel();
                    workers[*hart]
                        .send((resolve_call(call, &loaded.images), reply_tx))
                        .expect("worker alive for the whole scope");
                    last_call = Some(reply_rx);
                    calls += 1;
                }
                Directive::GuestQueue { tvm, vhart, action, .. } => {
                    tsm.queue_guest_actions(*tvm, *vhart, [action.clone()]);
                }
                Directive::AdvanceClock { ticks, .. } => {
                    tsm.advance_clock(*ticks);
                }
                Directive::Poke { line: _, addr, bytes } => {
                    let ret = poke_ret(loaded, *addr, bytes);
                    let (tx, rx) = mpsc::channel();
                    tx.send(ret).expect("local channel");
                    last_call = Some(rx);
                    calls += 1;
                }
                Directive::ReportFree { name, .. } => {
                    free_reports.insert(name, tsm.allocator().free_bytes());
                }
                Directive::Expect { line, check } => match check {
                    Check::Result { .. } | Check::Error { .. } => {
                        let got = last_call
                            .as_ref()
                            .expect("parser guarantees a preceding call")
                            .recv()
                            .expect("worker answers every job");
                        let (description, passed, detail) = judge_call(check, got);
                        checks.push(CheckOutcome { line: *line, description, passed, detail });
                    }
                    Check::FreeEquals { name } => {
                        let reported = free_reports[name.as_str()];
                        let now = tsm.allocator().free_bytes();
                        checks.push(CheckOutcome {
                            line: *line,
                            description: format!("free == {name}"),
                            passed: now == reported,
                            detail: format!("free bytes {now} != {name} {reported}"),
                        });
                    }
                    Check::TraceHas { .. } | Check::TraceLacks { .. } => {
                        deferred.push((*line, check.clone()));
                    }
                },
            }
        }
        // Closing the job channels ends the workers; the scope joins them.
        drop(workers);
    });

    finish(loaded, checks, deferred, calls)
}

fn finish(
    loaded: &LoadedScenario,
    mut checks: Vec<CheckOutcome>,
    deferred: Vec<(usize, Check)>,
    calls: usize,
) -> RunOutcome {
    let trace = loaded.tsm.render_trace();
    for (line, check) in deferred {
        let seed = judge_trace(&check, &trace).expect("only trace checks are deferred");
        checks.push(CheckOutcome {
            line,
            description: seed.description,
            passed: seed.passed,
            detail: seed.detail,
        });
    }
    checks.sort_by_key(|c| c.line);
    RunOutcome {
        verdict: checks.iter().all(|c| c.passed),
        checks,
        trace,
        events: loaded.tsm.trace_events(),
        calls,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{load, parse};
    use crate::trace::audit_all;

    const MACHINE: &str = "\
tsm-scenario v1

[machine]
memory_base = 0x80000000
memory_size = 0x80000000
confidential_base = 0xc0000000
confidential_size = 0x40000000
harts = 1
";

    fn boot_image(name: &str, vharts: u32) -> String {
        format!(
            "
[image {name}]
page gpa=0x0 fill=5a perms=rwx
page gpa=0x1000 lazy perms=rw
fdt vharts={vharts}
tap mode=auto
"
        )
    }

    fn run_text(text: &str) -> RunOutcome {
        run(&load(&parse(text).expect("parse")).expect("load"))
    }

    #[test]
    fn benign_script_passes_every_expectation() {
        let text = format!(
            "{MACHINE}{}
[script]
report free as pristine
hart 0 promote boot
expect result == 1
guest 1.0 read 0x10
guest 1.0 write 0x1000 0xfeed
guest 1.0 timer 5000
hart 0 run 1 0
expect result == 8
expect trace has \"ev=enter tvm=1 vhart=0\"
expect trace has \"act=read:0x10=0x5a5a5a5a5a5a5a5a\"
expect trace has \"ev=map tvm=1 vhart=0 gpa=0x1000\"
expect trace has \"reason=idle p0=0x0 p1=0x0 p2=0x0 p3=0x0 timer=5000\"
expect trace lacks \"stray=1\"
hart 0 destroy 1
expect result == 0
expect trace has \"ev=teardown tvm=1\"
",
            boot_image("boot", 1)
        );
        let outcome = run_text(&text);
        for check in &outcome.checks {
            assert!(check.passed, "line {}: {} — {}", check.line, check.description, check.detail);
        }
        assert!(outcome.verdict);
        assert_eq!(outcome.calls, 3);
        audit_all(&outcome.events).unwrap();
    }

    #[test]
    fn failed_expectations_carry_line_and_actual_value() {
        let text = format!(
            "{MACHINE}{}
[script]
hart 0 promote boot
expect result == 99
expect trace has \"ev=unicorn\"
",
            boot_image("boot", 1)
        );
        let outcome = run_text(&text);
        assert!(!outcome.verdict);
        let result_check = &outcome.checks[0];
        assert!(!result_check.passed);
        assert!(result_check.line > 0);
        assert_eq!(result_check.description, "result == 99");
        assert!(result_check.detail.contains("value=1"), "{}", result_check.detail);
        let trace_check = &outcome.checks[1];
        assert!(!trace_check.passed);
        assert!(trace_check.description.contains("ev=unicorn"));
    }

    #[test]
    fn conservation_of_memory_is_scriptable() {
        // A promotion that fails attestation must leave the allocator
        // exactly as it found it — asserted from the script itself.
        let text = format!(
            "{MACHINE}
[image poisoned]
page gpa=0x0 fill=5a perms=rwx
tap mode=mismatch

[script]
report free as pristine
hart 0 promote poisoned
expect error == AttestationFailed
expect free == pristine
"
        );
        let outcome = run_text(&text);
        assert!(outcome.verdict, "{:#?}", outcome.checks);
    }

    #[test]
    fn poke_is_domain_checked() {
        let text = format!(
            "{MACHINE}
[script]
poke 0xa0000000 deadbeef
expect result == 0
poke 0xc0000000 deadbeef
expect error == Denied
"
        );
        let outcome = run_text(&text);
        assert!(outcome.verdict, "{:#?}", outcome.checks);
    }

    #[test]
    fn reruns_render_byte_identical_traces() {
        let text = format!(
            "{MACHINE}{}
[script]
hart 0 promote boot
guest 1.0 read 0x10
guest 1.0 share 0x4000 0xa1000000
guest 1.0 timer 400
hart 0 run 1 0
advance_clock 500
hart 0 run 1 0
hart 0 destroy 1
",
            boot_image("boot", 1)
        );
        let scenario = parse(&text).unwrap();
        let first = run(&load(&scenario).unwrap());
        let second = run(&load(&scenario).unwrap());
        assert_eq!(first.trace, second.trace);
        assert!(!first.trace.is_empty());
    }

    #[test]
    fn threaded_runs_keep_per_hart_subsequences() {
        // Two harts drive two independent TVMs concurrently.
        let machine2 = MACHINE.replace("harts = 1", "harts = 2");
        let text = format!(
            "{machine2}{}{}
[script]
hart 0 promote alpha
expect result == 1
hart 1 promote beta
expect result == 2
guest 1.0 read 0x10
guest 2.0 write 0x1000 0x77
hart 0 run 1 0
expect result == 8
hart 1 run 2 0
expect result == 8
hart 0 destroy 1
expect result == 0
hart 1 destroy 2
expect result == 0
",
            boot_image("alpha", 1),
            boot_image("beta", 1)
        );
        let scenario = parse(&text).unwrap();

        let per_hart = |outcome: &RunOutcome| -> Vec<Vec<String>> {
            let mut lanes = vec![Vec::new(); 2];
            for event in &outcome.events {
                // Strip the global sequence number; it depends on the
                // cross-hart interleaving.
                let line = event.to_line();
                let stripped = line.split_once(" hart=").expect("rendered event").1.to_string();
                lanes[event.hart].push(stripped);
            }
            lanes
        };

        let a = run_threaded(&load(&scenario).unwrap());
        let b = run_threaded(&load(&scenario).unwrap());
        assert!(a.verdict, "{:#?}", a.checks);
        assert!(b.verdict, "{:#?}", b.checks);
        assert_eq!(per_hart(&a), per_hart(&b));
        audit_all(&a.events).unwrap();
        audit_all(&b.events).unwrap();

        // And the threaded lanes match the single-threaded reference.
        let reference = run(&load(&scenario).unwrap());
        assert!(reference.verdict);
        assert_eq!(per_hart(&reference), per_hart(&a));
    }
}
