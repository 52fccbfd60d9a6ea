// SPDX-License-Identifier: Apache-2.0

//! The promotion attack suite: every row stages one adversarial
//! technique against a fresh security manager and records whether the
//! defense held and whether confidential memory was conserved. Rows are
//! a mix of bundled scenario scripts and programmatic drivers for the
//! attacks the scenario grammar cannot express (forged tokens, raw table
//! corruption, true concurrency).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::abi::{tvm_fid, SbiCall, SbiError, SbiRet, EXT_TVM};
use crate::allocator::{Error as AllocError, PageToken};
use crate::corpus;
use crate::gstage::{pte, ROOT_TABLE_BYTES};
use crate::machine::PageSize;
use crate::runner;
use crate::scenario::{load, parse, LoadedScenario};
use crate::tsm::GuestAction;
use crate::tvm::PromoteArgs;

/// One attack technique and what happened when it was tried.
#[derive(Debug, Clone)]
pub struct AttackReport {
    pub name: &'static str,
    /// What the adversary attempts.
    pub technique: &'static str,
    /// The contracted defense.
    pub expected: &'static str,
    /// What was observed.
    pub observed: String,
    /// The defense held.
    pub defended: bool,
    /// Confidential free bytes ended exactly where they started.
    pub conserved: bool,
}

impl AttackReport {
    pub fn passed(&self) -> bool {
        self.defended && self.conserved
    }
}

/// Outcome of throwing random malformed page tables at promotion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableFuzzReport {
    pub cases: usize,
    /// Promotions refused outright.
    pub rejected: usize,
    /// Promotions that produced a TVM (torn down again immediately).
    pub survived: usize,
    /// Cases after which confidential free bytes did not return to the
    /// pre-case level. Must be zero.
    pub leaked: usize,
}

/// A small two-hart machine with one promotable image staged, no script.
const ARENA: &str = "\
tsm-scenario v1

[machine]
memory_base = 0x8000_0000
memory_size = 0x8000_0000
confidential_base = 0xc000_0000
confidential_size = 0x4000_0000
harts = 2

[image boot]
page gpa=0x0 fill=5a perms=rwx
page gpa=0x1000 lazy perms=rw
fdt vharts=2
tap mode=auto
";

/// Non-confidential scratch space outside the image staging area, for
/// hand-crafted page tables. 16 KiB aligned as a root table must be.
const SCRATCH_ROOT: u64 = 0xa000_0000;

fn arena() -> LoadedScenario {
    load(&parse(ARENA).expect("arena text parses")).expect("arena loads")
}

fn promote_call(args: &PromoteArgs) -> SbiCall {
    SbiCall::new(
        EXT_TVM,
        tvm_fid::PROMOTE,
        &[args.boot_state_addr, args.root_addr, args.fdt_addr, args.tap_addr],
    )
}

/// Run every attack row.
pub fn run_attack_suite() -> Vec<AttackReport> {
    let mut rows = Vec::new();
    for (name, technique, expected, text) in scenario_rows() {
        rows.push(run_scenario_row(name, technique, expected, text));
    }
    rows.push(table_loop_row());
    rows.push(arg_straddle_row());
    rows.push(replayed_token_row());
    rows.push(destroy_while_running_row());
    rows.push(double_promote_isolation_row());
    rows
}

type ScenarioRow = (&'static str, &'static str, &'static str, &'static str);

fn scenario_rows() -> Vec<ScenarioRow> {
    vec![
        (
            "pte-confidential",
            "guest page-table leaf targets a confidential frame",
            "InvalidAddress, walk released",
            corpus::ATTACK_PTE_CONFIDENTIAL,
        ),
        (
            "tap-bitflip",
            "one bit of the sealed attestation payload flipped",
            "AuthFailure, nothing registered",
            corpus::ATTACK_TAP_BITFLIP,
        ),
        (
            "tap-foreign",
            "sealed payload addressed to a key we do not hold",
            "NoMatchingLockbox",
            corpus::ATTACK_TAP_FOREIGN,
        ),
        (
            "tap-mismatch",
            "reference measurements cover different code than staged",
            "AttestationFailed",
            corpus::ATTACK_TAP_MISMATCH,
        ),
        (
            "irq-unfiltered",
            "interrupt injected without a guest allow-list entry",
            "silently filtered, never delivered",
            corpus::ATTACK_IRQ_UNFILTERED,
        ),
        (
            "flow-violation",
            "guest-only and hypervisor-only calls from the wrong side",
            "FlowViolation on both",
            corpus::ATTACK_FLOW,
        ),
    ]
}

fn run_scenario_row(
    name: &'static str,
    technique: &'static str,
    expected: &'static str,
    text: &'static str,
) -> AttackReport {
    let loaded = load(&parse(text).expect("bundled scenario parses")).expect("bundled scenario loads");
    let free_before = loaded.tsm.allocator().free_bytes();
    let outcome = runner::run(&loaded);
    let free_after = loaded.tsm.allocator().free_bytes();
    let observed = match outcome.checks.iter().find(|c| !c.passed) {
        None => format!("all {} expectations held", outcome.checks.len()),
        Some(c) => format!("line {}: {} — {}", c.line, c.description, c.detail),
    };
    AttackReport {
        name,
        technique,
        expected,
        observed,
        defended: outcome.verdict,
        conserved: free_after == free_before,
    }
}

/// A root-table entry pointing back at the root itself. An unbounded
/// walker would copy tables forever; ours must refuse the revisit.
fn table_loop_row() -> AttackReport {
    let loaded = arena();
    let tsm = &loaded.tsm;
    let free_before = tsm.allocator().free_bytes();

    let mut table = vec![0u8; ROOT_TABLE_BYTES as usize];
    let looped = pte::encode(SCRATCH_ROOT, pte::V);
    table[..8].copy_from_slice(&looped.to_le_bytes());
    tsm.with_machine(|m| m.poke(SCRATCH_ROOT, &table));

    let mut args = loaded.images["boot"].clone();
    args.root_addr = SCRATCH_ROOT;
    let ret = tsm.hyp_call(0, promote_call(&args));

    let defended = ret == SbiRet::err(SbiError::MalformedTable);
    AttackReport {
        name: "table-loop",
        technique: "page-table entry loops back to its own root",
        expected: "MalformedTable, bounded walk",
        observed: format!("promotion returned error={} value={}", ret.error, ret.value),
        defended,
        conserved: tsm.allocator().free_bytes() == free_before,
    }
}

/// Promotion arguments whose byte ranges start in hypervisor memory but
/// run past its end. Partial reads across the boundary must never happen.
fn arg_straddle_row() -> AttackReport {
    let loaded = arena();
    let tsm = &loaded.tsm;
    let free_before = tsm.allocator().free_bytes();
    let confidential_base = tsm.with_machine(|m| m.layout().confidential.start);

    let mut boot_straddle = loaded.images["boot"].clone();
    boot_straddle.boot_state_addr = confidential_base - 16;
    let first = tsm.hyp_call(0, promote_call(&boot_straddle));

    let mut fdt_straddle = loaded.images["boot"].clone();
    fdt_straddle.fdt_addr = confidential_base - 2;
    let second = tsm.hyp_call(0, promote_call(&fdt_straddle));

    let want = SbiRet::err(SbiError::InvalidAddress);
    AttackReport {
        name: "arg-straddle",
        technique: "promotion argument blobs straddle the memory boundary",
        expected: "InvalidAddress for both",
        observed: format!(
            "boot-state straddle error={}, fdt straddle error={}",
            first.error, second.error
        ),
        defended: first == want && second == want,
        conserved: tsm.allocator().free_bytes() == free_before,
    }
}

/// A released page token replayed through deallocation. The allocator's
/// ownership record must reject the identifier the second time.
fn replayed_token_row() -> AttackReport {
    let loaded = arena();
    let tsm = &loaded.tsm;
    let alloc = tsm.allocator();
    let free_before = alloc.free_bytes();

    let token = alloc.allocate(PageSize::Size4KiB).expect("arena has free pages");
    let addr = token.address();
    tsm.with_machine(|m| alloc.deallocate(token, m)).expect("first release is genuine");

    let forged = PageToken::forge_for_tests(addr, PageSize::Size4KiB);
    let replay = tsm.with_machine(|m| alloc.deallocate(forged, m));
    let never_minted = PageToken::forge_for_tests(addr + 0x10_0000, PageSize::Size4KiB);
    let fabricated = tsm.with_machine(|m| alloc.deallocate(never_minted, m));

    let defended = matches!(replay, Err(AllocError::ForeignToken { .. }))
        && matches!(fabricated, Err(AllocError::ForeignToken { .. }));
    AttackReport {
        name: "replayed-token",
        technique: "released and never-minted token identifiers replayed",
        expected: "ForeignToken for both",
        observed: format!("replay: {replay:?}; fabricated: {fabricated:?}"),
        defended,
        conserved: alloc.free_bytes() == free_before,
    }
}

/// Destroying a TVM while one of its virtual harts is executing. The
/// descriptor lock must surface TvmBusy instead of ripping pages out
/// from under the running hart.
fn destroy_while_running_row() -> AttackReport {
    let loaded = arena();
    let tsm = &loaded.tsm;
    let free_before = tsm.allocator().free_bytes();

    let promoted = tsm.hyp_call(0, promote_call(&loaded.images["boot"]));
    if !promoted.is_ok() {
        return AttackReport {
            name: "destroy-while-running",
            technique: "destroy issued while a virtual hart executes",
            expected: "TvmBusy until the hart exits",
            observed: format!("setup promotion failed: error={}", promoted.error),
            defended: false,
            conserved: tsm.allocator().free_bytes() == free_before,
        };
    }
    let tvm = promoted.value;

    tsm.queue_guest_actions(tvm, 0, [GuestAction::Park]);
    let (while_running, rerun, exit, teardown) = std::thread::scope(|scope| {
        let runner = scope.spawn(|| tsm.hyp_call(0, SbiCall::new(EXT_TVM, tvm_fid::RUN, &[tvm, 0, 0])));
        tsm.await_parked(tvm, 0);
        // The vhart is live inside the confidential domain on hart 0.
        let while_running = tsm.hyp_call(1, SbiCall::new(EXT_TVM, tvm_fid::DESTROY, &[tvm]));
        let rerun = tsm.hyp_call(1, SbiCall::new(EXT_TVM, tvm_fid::RUN, &[tvm, 0, 0]));
        tsm.unpark(tvm, 0);
        let exit = runner.join().expect("running hart exits cleanly");
        let teardown = tsm.hyp_call(1, SbiCall::new(EXT_TVM, tvm_fid::DESTROY, &[tvm]));
        (while_running, rerun, exit, teardown)
    });

    let defended = while_running == SbiRet::err(SbiError::TvmBusy)
        && rerun == SbiRet::err(SbiError::AlreadyAvailable)
        && exit.is_ok()
        && teardown == SbiRet::ok(0);
    AttackReport {
        name: "destroy-while-running",
        technique: "destroy issued while a virtual hart executes",
        expected: "TvmBusy until the hart exits",
        observed: format!(
            "destroy while running: error={}; re-run: error={}; after exit: error={}",
            while_running.error, rerun.error, teardown.error
        ),
        defended,
        conserved: tsm.allocator().free_bytes() == free_before,
    }
}

/// Two TVMs promoted from the same staged frames. Their confidential
/// copies must be distinct and writes in one must be invisible to the
/// other.
fn double_promote_isolation_row() -> AttackReport {
    let loaded = arena();
    let tsm = &loaded.tsm;
    let free_before = tsm.allocator().free_bytes();

    let first = tsm.hyp_call(0, promote_call(&loaded.images["boot"]));
    let second = tsm.hyp_call(0, promote_call(&loaded.images["boot"]));
    let (a, b) = (first.value, second.value);

    // Same guest address, both code pages: the backings must differ.
    let backing = |tvm| {
        tsm.with_descriptor(tvm, |d| match d.tables.translate(0).expect("code page maps") {
            crate::gstage::Translation::Confidential(addr) => addr,
            other => panic!("code page is {other:?}"),
        })
        .expect("descriptor exists")
    };
    let distinct = first.is_ok() && second.is_ok() && backing(a) != backing(b);

    // A write in the first TVM's lazy page must not appear in the second.
    tsm.queue_guest_actions(a, 0, [GuestAction::Write { gpa: 0x1000, value: 0x41 }]);
    tsm.hyp_call(0, SbiCall::new(EXT_TVM, tvm_fid::RUN, &[a, 0, 0]));
    tsm.queue_guest_actions(b, 0, [GuestAction::Read { gpa: 0x1000 }]);
    tsm.hyp_call(0, SbiCall::new(EXT_TVM, tvm_fid::RUN, &[b, 0, 0]));
    let cross_read_zero =
        tsm.trace_contains(&format!("ev=guest tvm={b} vhart=0 act=read:0x1000=0x0"));

    let destroy_a = tsm.hyp_call(0, SbiCall::new(EXT_TVM, tvm_fid::DESTROY, &[a]));
    let destroy_b = tsm.hyp_call(0, SbiCall::new(EXT_TVM, tvm_fid::DESTROY, &[b]));

    AttackReport {
        name: "double-promote",
        technique: "two TVMs promoted from identical staged frames",
        expected: "distinct backings, no cross-visibility",
        observed: format!(
            "ids {a} and {b}; distinct backing: {distinct}; sibling read saw zero: {cross_read_zero}"
        ),
        defended: distinct && cross_read_zero && destroy_a.is_ok() && destroy_b.is_ok(),
        conserved: tsm.allocator().free_bytes() == free_before,
    }
}

/// Throw `cases` random malformed page tables at promotion on one shared
/// manager. After every case — refusal or teardown — the confidential
/// free-byte count must return exactly to its pre-case level.
pub fn fuzz_malformed_tables(seed: u64, cases: usize) -> TableFuzzReport {
    let loaded = arena();
    let tsm = &loaded.tsm;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut report = TableFuzzReport { cases, rejected: 0, survived: 0, leaked: 0 };

    // Scratch space: one root table plus four child table frames.
    let child_base = SCRATCH_ROOT + ROOT_TABLE_BYTES;
    let mut args = loaded.images["boot"].clone();
    args.root_addr = SCRATCH_ROOT;
    let (nc_start, nc_end) = tsm.with_machine(|m| {
        let nc = m.layout().non_confidential;
        (nc.start, nc.end)
    });

    for _ in 0..cases {
        let table_bytes = random_tables(&mut rng, child_base, nc_start, nc_end);
        tsm.with_machine(|m| {
            m.poke(SCRATCH_ROOT, &table_bytes.0);
            for (i, child) in table_bytes.1.iter().enumerate() {
                m.poke(child_base + i as u64 * 4096, child);
            }
        });

        let free_before = tsm.allocator().free_bytes();
        let ret = tsm.hyp_call(0, promote_call(&args));
        if ret.is_ok() {
            report.survived += 1;
            tsm.hyp_call(0, SbiCall::new(EXT_TVM, tvm_fid::DESTROY, &[ret.value]));
        } else {
            report.rejected += 1;
        }
        if tsm.allocator().free_bytes() != free_before {
            report.leaked += 1;
        }
    }
    report
}

type RawTables = (Vec<u8>, [Vec<u8>; 4]);

/// One random table forest: a 16 KiB root and four 4 KiB children filled
/// with a mix of zeros, pointers into the children, and hostile entries —
/// loops, confidential targets, out-of-memory targets, reserved bits,
/// misaligned large leaves, and occasionally well-formed leaves.
fn random_tables(rng: &mut ChaCha20Rng, child_base: u64, nc_start: u64, nc_end: u64) -> RawTables {
    let mut root = vec![0u8; ROOT_TABLE_BYTES as usize];
    let mut children: [Vec<u8>; 4] = std::array::from_fn(|_| vec![0u8; 4096]);

    let put = |buf: &mut [u8], index: usize, raw: u64| {
        buf[index * 8..index * 8 + 8].copy_from_slice(&raw.to_le_bytes());
    };
    let random_entry = |rng: &mut ChaCha20Rng, depth: usize| -> u64 {
        match rng.gen_range(0..10) {
            // Pointer to one of the scratch children (valid shape).
            0..=2 => pte::encode(child_base + rng.gen_range(0..4u64) * 4096, pte::V),
            // Loop back to the root or a child already on the path.
            3 => pte::encode(SCRATCH_ROOT, pte::V),
            // Leaf into hypervisor memory: valid unless misaligned for
            // its level — both cases appear since depth varies.
            4..=5 => {
                let page = rng.gen_range(nc_start / 4096..nc_end / 4096) * 4096;
                pte::encode(page, pte::V | pte::R | pte::W | (pte::X * rng.gen_range(0..2)))
            }
            // Leaf into confidential memory or past the end of memory.
            6 => pte::encode(
                if rng.gen_bool(0.5) { nc_end } else { 0xffff_f000 },
                pte::V | pte::R | pte::W,
            ),
            // Reserved bits set.
            7 => pte::encode(nc_start, pte::V | pte::R) | (1 << 54) | (1 << 63),
            // Invalid entry carrying payload.
            8 => (rng.gen::<u64>() << 1) & !pte::V,
            // Plain garbage; more likely deeper down.
            _ => {
                if depth > 0 && rng.gen_bool(0.5) {
                    rng.gen::<u64>()
                } else {
                    0
                }
            }
        }
    };

    for _ in 0..rng.gen_range(1..8) {
        let index = rng.gen_range(0..2048);
        let raw = random_entry(rng, 0);
        put(&mut root, index, raw);
    }
    for child in &mut children {
        for _ in 0..rng.gen_range(0..6) {
            let index = rng.gen_range(0..512);
            let raw = random_entry(rng, 1);
            put(child, index, raw);
        }
    }
    (root, children)
}
