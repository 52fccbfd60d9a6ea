// SPDX-License-Identifier: Apache-2.0

//! The security manager's finite state machine: ABI dispatch, lightweight
//! and security-domain context switches, the three VM lifecycle calls
//! (promote/run/destroy), and the scripted guest execution loop.
//!
//! # Flows
//!
//! Each hardware hart is, at any instant, serving exactly one of two flows:
//!
//! * **non-confidential** — the hypervisor's world; the three lifecycle
//!   calls (`promote`, `run`, `destroy`) are accepted here and nothing else;
//! * **confidential** — one virtual hart of one confidential VM; guest
//!   calls (page sharing, secret retrieval, interrupt allowance, hart
//!   lifecycle, IPIs, fences, timers) are accepted here and nothing else.
//!
//! A call raised in the wrong flow is answered with
//! [`SbiError::FlowViolation`] — the event is rejected but the trace keeps
//! the attempt.
//!
//! # Transactions
//!
//! Every excursion into the security manager emits the same trace bracket
//! (see [`crate::trace`]): the caller's state is saved to its confidential
//! save area, the call is routed, the handler runs, the destination state
//! is restored, and a write-set summary is emitted. Handlers communicate
//! results by writing into saved register state, never directly into
//! another domain's live registers — the restore step is what exposes a
//! return value, and the exit report written for the hypervisor is the
//! single, audited reclassification channel out of a confidential flow.
//!
//! # Guest execution
//!
//! There is no instruction emulator. A running virtual hart consumes
//! [`GuestAction`]s from its queue: memory touches, outbound calls, an
//! arriving external interrupt, or parking (for cross-thread tests). The
//! queue running dry is an idle exit. Everything a handler does is
//! deterministic given the queues and the clock, so a fixed scenario
//! yields a byte-identical trace.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use crate::abi::{
    hsm_fid, ipi_fid, rfence_fid, time_fid, tvm_fid, ExitReason, SbiCall, SbiError, SbiRet,
    EXT_HSM, EXT_IPI, EXT_RFENCE, EXT_TIME, EXT_TVM,
};
use crate::allocator::{PageAllocator, PageToken};
use crate::fixtures;
use crate::gstage::{self, Translation};
use crate::hart::{DomainTag, HartArchState, A0, A1, CANONICAL_STATE_BYTES};
use crate::hsm::{self, Delivered, RunEntry};
use crate::kem::KemSecretKey;
use crate::machine::{
    AccessDomain, AccessKind, Machine, MachineConfig, PageSize, TvmId, PAGE_BYTES,
};
use crate::trace::{EventBody, Phase, Side, Trace, TraceEvent};
use crate::tvm::{self, PromoteArgs, TvmDescriptor, TvmLifecycle};

/// Which flow a hart is serving. The confidential variant names the
/// virtual hart whose world is loaded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    NonConfidential,
    Confidential { tvm: TvmId, vhart: u64 },
}

/// Per-hart dispatcher state. The save area holds the hypervisor's
/// registers while the hart serves a call or a confidential flow.
#[derive(Debug, Clone)]
pub struct FsmContext {
    pub flow: Flow,
    /// Confidential base of this hart's hypervisor save area.
    hyp_save_area: u64,
    /// Simulated microarchitectural residue has been cleared since the
    /// last domain change.
    pub residue_clear: bool,
    /// Cached guest translations; emptied on every security-domain
    /// transition and by remote fences.
    pub tlb_entries: usize,
}

/// One scripted step of guest execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GuestAction {
    /// Read eight bytes at a guest-physical address.
    Read { gpa: u64 },
    /// Write eight bytes at a guest-physical address.
    Write { gpa: u64, value: u64 },
    /// Raise an outbound call.
    Ecall(SbiCall),
    /// A hardware external interrupt arrives while the guest executes;
    /// the security manager routes it out to the hypervisor.
    Irq { irq: u64 },
    /// Spin in guest context until [`Tsm::unpark`] — lets a test hold a
    /// virtual hart mid-run from another thread.
    Park,
}

struct TvmTable {
    next_id: TvmId,
    slots: BTreeMap<TvmId, Arc<Mutex<Option<TvmDescriptor>>>>,
}

/// The security manager instance: machine, allocator, descriptor table,
/// per-hart dispatcher contexts, trace, and the scripted guest queues.
///
/// Lock order (outer to inner): per-hart context, descriptor table, one
/// TVM slot, machine; trace/queues/park-set are leaves. `run` holds a
/// TVM's slot only transiently between guest actions, so a concurrent
/// `destroy` can observe the busy virtual hart and refuse.
pub struct Tsm {
    machine: Mutex<Machine>,
    alloc: PageAllocator,
    tvms: Mutex<TvmTable>,
    contexts: Vec<Mutex<FsmContext>>,
    trace: Mutex<Trace>,
    keystore: Vec<KemSecretKey>,
    clock: AtomicU64,
    queues: Mutex<BTreeMap<(TvmId, u64), VecDeque<GuestAction>>>,
    parked: Mutex<BTreeSet<(TvmId, u64)>>,
    parked_cv: Condvar,
    /// Tokens backing the per-hart hypervisor save areas, held for the
    /// manager's lifetime.
    _hyp_save_tokens: Vec<PageToken>,
}

impl Tsm {
    /// Build the machine, claim one confidential save area per hardware
    /// hart, and start with an empty descriptor table. The keystore is the
    /// fixture set, so any payload sealed to the fixture recipients opens.
    pub fn new(config: MachineConfig) -> Result<Tsm, crate::machine::Error> {
        let machine = Machine::build(config.clone())?;
        let confidential = machine.layout().confidential;
        let natural = PageSize::largest_fitting(confidential.len(), PageSize::Size1GiB)
            .expect("machine validated the confidential region");
        let alloc = PageAllocator::init(confidential, natural);

        let mut save_tokens = Vec::with_capacity(config.hart_count);
        let mut contexts = Vec::with_capacity(config.hart_count);
        for _ in 0..config.hart_count {
            let token = alloc.allocate(PageSize::Size4KiB).map_err(|_| {
                crate::machine::Error::Config(
                    "confidential region too small for hypervisor save areas",
                )
            })?;
            // The address check: a save area must be confidential memory.
            machine
                .validate_confidential(token.address(), CANONICAL_STATE_BYTES as u64)
                .expect("allocator tokens are confidential");
            contexts.push(Mutex::new(FsmContext {
                flow: Flow::NonConfidential,
                hyp_save_area: token.address(),
                residue_clear: true,
                tlb_entries: 0,
            }));
            save_tokens.push(token);
        }

        Ok(Tsm {
            machine: Mutex::new(machine),
            alloc,
            tvms: Mutex::new(TvmTable { next_id: 1, slots: BTreeMap::new() }),
            contexts,
            trace: Mutex::new(Trace::new()),
            keystore: fixtures::fixture_keystore(),
            clock: AtomicU64::new(0),
            queues: Mutex::new(BTreeMap::new()),
            parked: Mutex::new(BTreeSet::new()),
            parked_cv: Condvar::new(),
            _hyp_save_tokens: save_tokens,
        })
    }

    pub fn hart_count(&self) -> usize {
        self.contexts.len()
    }

    pub fn allocator(&self) -> &PageAllocator {
        &self.alloc
    }

    /// Run a closure against the machine (scenario staging, oracles).
    pub fn with_machine<R>(&self, f: impl FnOnce(&mut Machine) -> R) -> R {
        f(&mut self.machine.lock().unwrap())
    }

    /// Inspect a live TVM's descriptor; `None` if no such TVM.
    pub fn with_descriptor<R>(&self, tvm: TvmId, f: impl FnOnce(&TvmDescriptor) -> R) -> Option<R> {
        let slot = self.tvms.lock().unwrap().slots.get(&tvm).cloned()?;
        let guard = slot.lock().unwrap();
        guard.as_ref().map(f)
    }

    pub fn live_tvms(&self) -> Vec<TvmId> {
        self.tvms.lock().unwrap().slots.keys().copied().collect()
    }

    /// Snapshot of a hart's dispatcher context. Blocks while that hart is
    /// mid-call, so it always observes a quiescent state.
    pub fn context(&self, hart: usize) -> FsmContext {
        self.contexts[hart].lock().unwrap().clone()
    }

    pub fn now(&self) -> u64 {
        self.clock.load(Ordering::SeqCst)
    }

    /// Advance the simulated clock; returns the new value.
    pub fn advance_clock(&self, ticks: u64) -> u64 {
        self.clock.fetch_add(ticks, Ordering::SeqCst) + ticks
    }

    /// Append scripted actions to one virtual hart's execution queue.
    pub fn queue_guest_actions(
        &self,
        tvm: TvmId,
        vhart: u64,
        actions: impl IntoIterator<Item = GuestAction>,
    ) {
        let mut queues = self.queues.lock().unwrap();
        queues.entry((tvm, vhart)).or_default().extend(actions);
    }

    /// Block until the given virtual hart reaches a `Park` action.
    pub fn await_parked(&self, tvm: TvmId, vhart: u64) {
        let mut parked = self.parked.lock().unwrap();
        while !parked.contains(&(tvm, vhart)) {
            parked = self.parked_cv.wait(parked).unwrap();
        }
    }

    /// Release a parked virtual hart.
    pub fn unpark(&self, tvm: TvmId, vhart: u64) {
        let mut parked = self.parked.lock().unwrap();
        parked.remove(&(tvm, vhart));
        self.parked_cv.notify_all();
    }

    pub fn trace_events(&self) -> Vec<TraceEvent> {
        self.trace.lock().unwrap().events().to_vec()
    }

    pub fn render_trace(&self) -> String {
        self.trace.lock().unwrap().render()
    }

    pub fn trace_contains(&self, needle: &str) -> bool {
        self.trace.lock().unwrap().contains(needle)
    }

    /// Dispatch one hypervisor call on a hardware hart and run it to
    /// completion. For `run` this spans the whole guest excursion; the
    /// return value of an exiting `run` is the exit reason code.
    pub fn hyp_call(&self, hart: usize, call: SbiCall) -> SbiRet {
        let mut ctx_guard = self.contexts[hart].lock().unwrap();
        let ctx = &mut *ctx_guard;
        debug_assert!(
            matches!(ctx.flow, Flow::NonConfidential),
            "hypervisor calls arrive only between transactions"
        );

        {
            let mut m = self.machine.lock().unwrap();
            let live = m.hart_mut(hart);
            live.set_domain(DomainTag::Hypervisor);
            call.store(live);
        }
        self.emit(hart, EventBody::Call {
            side: Side::Hyp,
            ext: call.ext,
            fid: call.fid,
            args: call.args,
        });
        self.switch_line(hart, ctx, Side::Hyp, Side::Tsm);
        {
            let mut m = self.machine.lock().unwrap();
            self.stash_live_state(&mut m, ctx.hyp_save_area, hart);
        }
        self.emit(hart, EventBody::Phase { step: Phase::Save });
        self.emit(hart, EventBody::Phase { step: Phase::Route });

        match (call.ext, call.fid) {
            (EXT_TVM, tvm_fid::PROMOTE) => self.handle_promote(hart, ctx, &call),
            (EXT_TVM, tvm_fid::RUN) => self.handle_run(hart, ctx, &call),
            (EXT_TVM, tvm_fid::DESTROY) => self.handle_destroy(hart, ctx, &call),
            // Guest-only calls raised from the hypervisor side: rejected,
            // but the bracket (and so the attempt) stays in the trace.
            (EXT_TVM, tvm_fid::SHARE_PAGE | tvm_fid::RETRIEVE_SECRET | tvm_fid::ALLOW_INTERRUPT)
            | (EXT_HSM | EXT_IPI | EXT_RFENCE | EXT_TIME, _) => {
                self.ret_to_hyp(hart, ctx, SbiRet::err(SbiError::FlowViolation))
            }
            (EXT_TVM, _) => self.ret_to_hyp(hart, ctx, SbiRet::err(SbiError::NotSupported)),
            _ => self.ret_to_hyp(hart, ctx, SbiRet::err(SbiError::NotSupported)),
        }
    }

    // ------------------------------------------------------------------
    // Hypervisor-flow handlers
    // ------------------------------------------------------------------

    fn handle_promote(&self, hart: usize, ctx: &mut FsmContext, call: &SbiCall) -> SbiRet {
        let args = PromoteArgs {
            boot_state_addr: call.args[0],
            root_addr: call.args[1],
            fdt_addr: call.args[2],
            tap_addr: call.args[3],
        };
        // The table lock is held across the whole promotion: promotions
        // serialize, and an id is never observable half-built.
        let mut table = self.tvms.lock().unwrap();
        let id = table.next_id;
        let outcome = {
            let mut m = self.machine.lock().unwrap();
            tvm::promote(&mut m, &self.alloc, &self.keystore, id, &args)
        };
        match outcome {
            Ok((desc, info)) => {
                table.next_id += 1;
                table.slots.insert(id, Arc::new(Mutex::new(Some(desc))));
                drop(table);
                self.emit(hart, EventBody::Phase { step: Phase::Construct });
                self.emit(hart, EventBody::Promote {
                    step: "walk",
                    fields: vec![
                        ("tvm", id.to_string()),
                        ("data_tokens", info.data_tokens.to_string()),
                        ("table_tokens", info.table_tokens.to_string()),
                        ("fdt_tokens", info.fdt_tokens.to_string()),
                    ],
                });
                self.emit(hart, EventBody::Promote {
                    step: "measure",
                    fields: vec![("pages", info.measured_pages.to_string())],
                });
                self.emit(hart, EventBody::Promote {
                    step: "attest",
                    fields: vec![
                        ("verdict", "match".to_string()),
                        ("secrets", info.secrets.to_string()),
                        ("vharts", info.vhart_count.to_string()),
                    ],
                });
                self.emit(hart, EventBody::Hsm { tvm: id, vhart: 0, from: "stopped", to: "started" });
                self.ret_to_hyp(hart, ctx, SbiRet::ok(id))
            }
            Err(e) => {
                drop(table);
                self.emit(hart, EventBody::Promote {
                    step: "abort",
                    fields: vec![("err", e.name().to_string())],
                });
                self.ret_to_hyp(hart, ctx, SbiRet::err(e))
            }
        }
    }

    fn handle_destroy(&self, hart: usize, ctx: &mut FsmContext, call: &SbiCall) -> SbiRet {
        let tvm = call.args[0];
        let mut table = self.tvms.lock().unwrap();
        let Some(slot) = table.slots.get(&tvm).cloned() else {
            drop(table);
            return self.ret_to_hyp(hart, ctx, SbiRet::err(SbiError::NoSuchTvm));
        };
        let mut guard = slot.lock().unwrap();
        let busy = match guard.as_ref() {
            None => {
                drop(guard);
                drop(table);
                return self.ret_to_hyp(hart, ctx, SbiRet::err(SbiError::NoSuchTvm));
            }
            Some(desc) => !desc.running.is_empty(),
        };
        if busy {
            drop(guard);
            drop(table);
            return self.ret_to_hyp(hart, ctx, SbiRet::err(SbiError::TvmBusy));
        }
        let desc = guard.take().expect("checked above");
        table.slots.remove(&tvm);
        drop(guard);
        drop(table);

        let released = {
            let mut m = self.machine.lock().unwrap();
            tvm::destroy(&mut m, &self.alloc, desc)
        };
        self.emit(hart, EventBody::Phase { step: Phase::Destruct });
        self.emit(hart, EventBody::Teardown { tvm, tokens: released });
        self.ret_to_hyp(hart, ctx, SbiRet::ok(0))
    }

    fn handle_run(&self, hart: usize, ctx: &mut FsmContext, call: &SbiCall) -> SbiRet {
        let tvm = call.args[0];
        let vhart_arg = call.args[1];
        // Interrupt injection request rides in a2: zero is none, else the
        // identifier plus one.
        let inject = call.args[2];

        let Some(slot) = self.tvms.lock().unwrap().slots.get(&tvm).cloned() else {
            return self.ret_to_hyp(hart, ctx, SbiRet::err(SbiError::NoSuchTvm));
        };

        // World-switch in, under the slot lock.
        {
            let mut guard = slot.lock().unwrap();
            let Some(desc) = guard.as_mut() else {
                drop(guard);
                return self.ret_to_hyp(hart, ctx, SbiRet::err(SbiError::NoSuchTvm));
            };
            if desc.lifecycle == TvmLifecycle::Poisoned {
                drop(guard);
                return self.ret_to_hyp(hart, ctx, SbiRet::err(SbiError::InvalidState));
            }
            if vhart_arg >= desc.vharts.len() as u64 {
                drop(guard);
                return self.ret_to_hyp(hart, ctx, SbiRet::err(SbiError::InvalidParam));
            }
            let vhart = vhart_arg as usize;
            if desc.running.contains(&vhart) {
                drop(guard);
                return self.ret_to_hyp(hart, ctx, SbiRet::err(SbiError::AlreadyAvailable));
            }

            let mut m = self.machine.lock().unwrap();
            let entry = match hsm::run_entry(&mut m, desc, vhart) {
                Ok(entry) => entry,
                Err(e) => {
                    drop(m);
                    drop(guard);
                    return self.ret_to_hyp(hart, ctx, SbiRet::err(e));
                }
            };
            match entry {
                RunEntry::InitBoot { .. } => self.emit(hart, EventBody::Hsm {
                    tvm,
                    vhart: vhart_arg,
                    from: "start-pending",
                    to: "started",
                }),
                RunEntry::Resume => self.emit(hart, EventBody::Hsm {
                    tvm,
                    vhart: vhart_arg,
                    from: "suspended",
                    to: "started",
                }),
                RunEntry::Continue => {}
            }
            if let Some(kind) = hsm::take_fence(desc, vhart) {
                ctx.tlb_entries = 0;
                self.emit(hart, EventBody::Fence { tvm, vhart: vhart_arg, act: "apply", kind });
            }
            let now = self.now();
            if let Some(cmp) = hsm::check_timer(&mut m, desc, vhart, now) {
                self.emit(hart, EventBody::Timer { tvm, vhart: vhart_arg, act: "fire", cmp, now });
            }
            if inject != 0 {
                let irq = inject - 1;
                let act = if hsm::inject_external(&mut m, desc, vhart, irq) {
                    "inject"
                } else {
                    "filter-drop"
                };
                self.emit(hart, EventBody::Irq { tvm, vhart: vhart_arg, irq, act });
            }
            for delivered in hsm::deliver_pending(&mut m, desc, vhart) {
                let irq = match delivered {
                    Delivered::External(id) => id,
                    other => other.bit(),
                };
                self.emit(hart, EventBody::Irq { tvm, vhart: vhart_arg, irq, act: "deliver" });
            }

            let staged = desc.vharts[vhart].staged_ret.take();
            desc.running.insert(vhart);

            self.emit(hart, EventBody::Phase { step: Phase::Transform });
            self.emit(hart, EventBody::Phase { step: Phase::Restore });
            let guest_state = desc.load_vhart_state(&mut m, vhart);
            *m.hart_mut(hart) = guest_state;
            self.emit_wset(hart, &mut m);
            drop(m);
            let side = Side::Guest { tvm, vhart: vhart_arg };
            self.switch_line(hart, ctx, Side::Tsm, side);
            match staged {
                Some((error, value)) => {
                    self.emit(hart, EventBody::Ret { side, error, value })
                }
                None => self.emit(hart, EventBody::Enter { tvm, vhart: vhart_arg }),
            }
        }

        self.guest_loop(hart, ctx, &slot, tvm, vhart_arg as usize)
    }

    // ------------------------------------------------------------------
    // Guest execution
    // ------------------------------------------------------------------

    /// Consume the virtual hart's action queue until an exit. The slot
    /// lock is retaken per action so a concurrent destroy can observe the
    /// running hart.
    fn guest_loop(
        &self,
        hart: usize,
        ctx: &mut FsmContext,
        slot: &Arc<Mutex<Option<TvmDescriptor>>>,
        tvm: TvmId,
        vhart: usize,
    ) -> SbiRet {
        let side = Side::Guest { tvm, vhart: vhart as u64 };
        loop {
            let action = {
                let mut queues = self.queues.lock().unwrap();
                queues.get_mut(&(tvm, vhart as u64)).and_then(|q| q.pop_front())
            };
            let Some(action) = action else {
                // Out of scripted work: idle exit.
                let mut guard = slot.lock().unwrap();
                let desc = guard.as_mut().expect("descriptor present while running");
                let mut m = self.machine.lock().unwrap();
                self.open_guest_bracket(hart, ctx, &mut m, desc, vhart);
                return self.exit_to_hyp(hart, ctx, &mut m, desc, vhart, ExitReason::Idle, None);
            };
            match action {
                GuestAction::Park => {
                    self.emit(hart, EventBody::Guest {
                        tvm,
                        vhart: vhart as u64,
                        act: "park".to_string(),
                    });
                    let mut parked = self.parked.lock().unwrap();
                    parked.insert((tvm, vhart as u64));
                    self.parked_cv.notify_all();
                    while parked.contains(&(tvm, vhart as u64)) {
                        parked = self.parked_cv.wait(parked).unwrap();
                    }
                }
                GuestAction::Read { gpa } => {
                    let mut guard = slot.lock().unwrap();
                    let desc = guard.as_mut().expect("descriptor present while running");
                    let mut m = self.machine.lock().unwrap();
                    if let Some(ret) =
                        self.guest_access(hart, ctx, &mut m, desc, vhart, gpa, None)
                    {
                        return ret;
                    }
                }
                GuestAction::Write { gpa, value } => {
                    let mut guard = slot.lock().unwrap();
                    let desc = guard.as_mut().expect("descriptor present while running");
                    let mut m = self.machine.lock().unwrap();
                    if let Some(ret) =
                        self.guest_access(hart, ctx, &mut m, desc, vhart, gpa, Some(value))
                    {
                        return ret;
                    }
                }
                GuestAction::Irq { irq } => {
                    let mut guard = slot.lock().unwrap();
                    let desc = guard.as_mut().expect("descriptor present while running");
                    let mut m = self.machine.lock().unwrap();
                    self.open_guest_bracket(hart, ctx, &mut m, desc, vhart);
                    self.emit(hart, EventBody::Irq {
                        tvm,
                        vhart: vhart as u64,
                        irq,
                        act: "route-out",
                    });
                    return self.exit_to_hyp(
                        hart,
                        ctx,
                        &mut m,
                        desc,
                        vhart,
                        ExitReason::ExternalInterrupt { irq },
                        None,
                    );
                }
                GuestAction::Ecall(call) => {
                    let mut guard = slot.lock().unwrap();
                    let desc = guard.as_mut().expect("descriptor present while running");
                    let mut m = self.machine.lock().unwrap();
                    call.store(m.hart_mut(hart));
                    self.emit(hart, EventBody::Call {
                        side,
                        ext: call.ext,
                        fid: call.fid,
                        args: call.args,
                    });
                    self.open_guest_bracket(hart, ctx, &mut m, desc, vhart);
                    if let Some((reason, staged)) =
                        self.guest_ecall(hart, ctx, &mut m, desc, vhart, &call)
                    {
                        return self.exit_to_hyp(hart, ctx, &mut m, desc, vhart, reason, staged);
                    }
                }
            }
        }
    }

    /// One guest memory touch. Lazily zero pages are materialized in a
    /// handler bracket on first touch; unmapped or denied accesses exit
    /// with a page fault. Returns the final call result when the touch
    /// ended the run.
    fn guest_access(
        &self,
        hart: usize,
        ctx: &mut FsmContext,
        m: &mut Machine,
        desc: &mut TvmDescriptor,
        vhart: usize,
        gpa: u64,
        write: Option<u64>,
    ) -> Option<SbiRet> {
        let tvm = desc.id;
        if matches!(desc.tables.translate(gpa), Ok(Translation::LazyZero)) {
            self.open_guest_bracket(hart, ctx, m, desc, vhart);
            match gstage::materialize_zero_page(&mut desc.tables, &self.alloc, gpa) {
                Ok((base, token)) => {
                    if let Some(token) = token {
                        m.grant_tvm_page(tvm, token.address());
                        desc.owned_tokens.push(token);
                    }
                    self.emit(hart, EventBody::Map {
                        tvm,
                        vhart: vhart as u64,
                        gpa: gpa & !(PAGE_BYTES - 1),
                        npa: base,
                    });
                    self.emit(hart, EventBody::Phase { step: Phase::Construct });
                    self.reenter_guest(hart, ctx, m, desc, vhart);
                }
                Err(_) => {
                    // Out of confidential memory mid-run: the VM is dead.
                    desc.lifecycle = TvmLifecycle::Poisoned;
                    return Some(self.exit_to_hyp(
                        hart,
                        ctx,
                        m,
                        desc,
                        vhart,
                        ExitReason::TvmKilled,
                        None,
                    ));
                }
            }
        }
        let target = match desc.tables.translate(gpa) {
            Ok(Translation::Confidential(pa)) | Ok(Translation::Shared(pa)) => pa,
            _ => {
                self.open_guest_bracket(hart, ctx, m, desc, vhart);
                return Some(self.exit_to_hyp(
                    hart,
                    ctx,
                    m,
                    desc,
                    vhart,
                    ExitReason::GuestPageFault { gpa },
                    None,
                ));
            }
        };
        let outcome = match write {
            Some(value) => m
                .write(AccessDomain::Tvm(tvm), target, &value.to_be_bytes())
                .map(|()| format!("write:{gpa:#x}<={value:#x}")),
            None => {
                let mut bytes = [0u8; 8];
                m.read(AccessDomain::Tvm(tvm), target, &mut bytes)
                    .map(|()| format!("read:{gpa:#x}={:#x}", u64::from_be_bytes(bytes)))
            }
        };
        match outcome {
            Ok(act) => {
                ctx.tlb_entries += 1;
                self.emit(hart, EventBody::Guest { tvm, vhart: vhart as u64, act });
                None
            }
            Err(_) => {
                // The access strayed off the granted page set (a straddle
                // into foreign memory): a protection trap, reported as a
                // guest page fault.
                self.open_guest_bracket(hart, ctx, m, desc, vhart);
                Some(self.exit_to_hyp(
                    hart,
                    ctx,
                    m,
                    desc,
                    vhart,
                    ExitReason::GuestPageFault { gpa },
                    None,
                ))
            }
        }
    }

    /// Route one guest call. `None` means the call was answered and the
    /// guest resumed; `Some` carries the exit reason and the return value
    /// staged for the guest's next entry.
    #[allow(clippy::type_complexity)]
    fn guest_ecall(
        &self,
        hart: usize,
        ctx: &mut FsmContext,
        m: &mut Machine,
        desc: &mut TvmDescriptor,
        vhart: usize,
        call: &SbiCall,
    ) -> Option<(ExitReason, Option<(i64, u64)>)> {
        let tvm = desc.id;
        let v = vhart as u64;
        match (call.ext, call.fid) {
            (EXT_TVM, tvm_fid::SHARE_PAGE) => {
                let (gpa, npa) = (call.args[0], call.args[1]);
                let ret = match tvm::share_page(m, desc, gpa, npa) {
                    Ok(()) => {
                        self.emit(hart, EventBody::Map { tvm, vhart: v, gpa, npa });
                        SbiRet::ok(0)
                    }
                    Err(e) => SbiRet::err(e),
                };
                self.close_to_guest(hart, ctx, m, desc, vhart, ret.is_ok(), ret);
                None
            }
            (EXT_TVM, tvm_fid::RETRIEVE_SECRET) => {
                let ret = match tvm::retrieve_secret(
                    m,
                    &self.alloc,
                    desc,
                    call.args[0],
                    call.args[1],
                    call.args[2],
                ) {
                    Ok(len) => SbiRet::ok(len),
                    Err(e) => SbiRet::err(e),
                };
                self.close_to_guest(hart, ctx, m, desc, vhart, ret.is_ok(), ret);
                None
            }
            (EXT_TVM, tvm_fid::ALLOW_INTERRUPT) => {
                let irq = call.args[0];
                let ret = match tvm::allow_interrupt(desc, irq) {
                    Ok(()) => {
                        self.emit(hart, EventBody::Irq { tvm, vhart: v, irq, act: "allow" });
                        SbiRet::ok(0)
                    }
                    Err(e) => SbiRet::err(e),
                };
                self.close_to_guest(hart, ctx, m, desc, vhart, ret.is_ok(), ret);
                None
            }
            // Hypervisor-only lifecycle calls raised from inside a guest.
            (EXT_TVM, tvm_fid::PROMOTE | tvm_fid::RUN | tvm_fid::DESTROY) => {
                self.close_to_guest(
                    hart,
                    ctx,
                    m,
                    desc,
                    vhart,
                    false,
                    SbiRet::err(SbiError::FlowViolation),
                );
                None
            }
            (EXT_HSM, hsm_fid::HART_START) => {
                match hsm::hart_start(desc, call.args[0], call.args[1], call.args[2]) {
                    Ok(target) => {
                        self.emit(hart, EventBody::Hsm {
                            tvm,
                            vhart: target as u64,
                            from: "stopped",
                            to: "start-pending",
                        });
                        // The hypervisor schedules the new hart; the
                        // starter learns success on its own re-entry.
                        Some((
                            ExitReason::VhartStartRequested { vhart: target as u64 },
                            Some((0, 0)),
                        ))
                    }
                    Err(e) => {
                        self.close_to_guest(hart, ctx, m, desc, vhart, false, SbiRet::err(e));
                        None
                    }
                }
            }
            (EXT_HSM, hsm_fid::HART_STOP) => match hsm::hart_stop(m, desc, vhart) {
                Ok(()) => {
                    self.emit(hart, EventBody::Hsm {
                        tvm,
                        vhart: v,
                        from: "started",
                        to: "stopped",
                    });
                    Some((ExitReason::VhartStopped { vhart: v }, None))
                }
                Err(e) => {
                    self.close_to_guest(hart, ctx, m, desc, vhart, false, SbiRet::err(e));
                    None
                }
            },
            (EXT_HSM, hsm_fid::HART_SUSPEND) => match hsm::hart_suspend(desc, vhart) {
                Ok(()) => {
                    self.emit(hart, EventBody::Hsm {
                        tvm,
                        vhart: v,
                        from: "started",
                        to: "suspended",
                    });
                    Some((ExitReason::Suspended { vhart: v }, Some((0, 0))))
                }
                Err(e) => {
                    self.close_to_guest(hart, ctx, m, desc, vhart, false, SbiRet::err(e));
                    None
                }
            },
            (EXT_IPI, ipi_fid::SEND_IPI) => {
                let ret = match hsm::send_ipi(m, desc, call.args[0]) {
                    Ok(targets) => {
                        for target in targets {
                            self.emit(hart, EventBody::Ipi {
                                tvm,
                                from_vhart: v,
                                to_vhart: target as u64,
                            });
                        }
                        SbiRet::ok(0)
                    }
                    Err(e) => SbiRet::err(e),
                };
                self.close_to_guest(hart, ctx, m, desc, vhart, ret.is_ok(), ret);
                None
            }
            (EXT_RFENCE, fid @ (rfence_fid::FENCE_I | rfence_fid::SFENCE_VMA)) => {
                let kind = if fid == rfence_fid::FENCE_I { "fence.i" } else { "sfence.vma" };
                let ret = match hsm::remote_fence(desc, call.args[0], kind) {
                    Ok(targets) => {
                        for target in targets {
                            self.emit(hart, EventBody::Fence {
                                tvm,
                                vhart: target as u64,
                                act: "pend",
                                kind,
                            });
                        }
                        SbiRet::ok(0)
                    }
                    Err(e) => SbiRet::err(e),
                };
                self.close_to_guest(hart, ctx, m, desc, vhart, ret.is_ok(), ret);
                None
            }
            (EXT_TIME, time_fid::SET_TIMER) => {
                let deadline = call.args[0];
                hsm::program_timer(m, desc, vhart, deadline);
                self.emit(hart, EventBody::Timer {
                    tvm,
                    vhart: v,
                    act: "arm",
                    cmp: deadline,
                    now: self.now(),
                });
                self.close_to_guest(hart, ctx, m, desc, vhart, true, SbiRet::ok(0));
                None
            }
            // A known extension with a function this interface does not
            // define: answered, not forwarded.
            (EXT_TVM | EXT_HSM | EXT_IPI | EXT_RFENCE | EXT_TIME, _) => {
                self.close_to_guest(
                    hart,
                    ctx,
                    m,
                    desc,
                    vhart,
                    false,
                    SbiRet::err(SbiError::NotSupported),
                );
                None
            }
            // A foreign extension: forwarded to the hypervisor wholesale.
            _ => Some((
                ExitReason::GuestEcall {
                    ext: call.ext,
                    fid: call.fid,
                    arg0: call.args[0],
                    arg1: call.args[1],
                },
                Some((0, 0)),
            )),
        }
    }

    // ------------------------------------------------------------------
    // Bracket plumbing
    // ------------------------------------------------------------------

    fn emit(&self, hart: usize, body: EventBody) {
        self.trace.lock().unwrap().push(hart, body);
    }

    /// Emit a switch line and update flow/residue/TLB model state. The
    /// TLB model empties whenever the flow (the non-manager side of the
    /// world) changes — a security-domain transition.
    fn switch_line(&self, hart: usize, ctx: &mut FsmContext, from: Side, to: Side) {
        let new_flow = match to {
            Side::Hyp => Some(Flow::NonConfidential),
            Side::Guest { tvm, vhart } => Some(Flow::Confidential { tvm, vhart }),
            Side::Tsm => None,
        };
        if let Some(flow) = new_flow {
            if flow != ctx.flow {
                ctx.tlb_entries = 0;
            }
            ctx.flow = flow;
        }
        ctx.residue_clear = true;
        self.emit(hart, EventBody::Switch { from, to, residue_cleared: true });
    }

    /// Encode the live hart state into a confidential save area.
    fn stash_live_state(&self, m: &mut Machine, area: u64, hart: usize) {
        let state = m.hart(hart).clone();
        let dst = m
            .validate_confidential(area, CANONICAL_STATE_BYTES as u64)
            .expect("save areas are confidential");
        m.write_confidential(&dst, 0, &state.encode_canonical());
    }

    /// Load the hypervisor's saved state back into the live hart.
    fn load_hyp_state(&self, m: &mut Machine, area: u64, hart: usize) {
        let src = m
            .validate_confidential(area, CANONICAL_STATE_BYTES as u64)
            .expect("save areas are confidential");
        let mut bytes = [0u8; CANONICAL_STATE_BYTES];
        m.read_confidential(&src, 0, &mut bytes);
        let state = HartArchState::decode_canonical(&bytes, DomainTag::Hypervisor)
            .expect("save areas always hold canonical state");
        *m.hart_mut(hart) = state;
    }

    /// Write a call result into the return-register slots of a saved
    /// state: handlers answer through saved state, and the restore step
    /// is what exposes the answer.
    fn poke_saved_ret(&self, m: &mut Machine, area: u64, ret: SbiRet) {
        let dst = m
            .validate_confidential(area, CANONICAL_STATE_BYTES as u64)
            .expect("save areas are confidential");
        m.write_confidential(&dst, (A0 * 8) as u64, &(ret.error as u64).to_be_bytes());
        m.write_confidential(&dst, (A1 * 8) as u64, &ret.value.to_be_bytes());
    }

    /// Write an exit report into the hypervisor's saved state — the
    /// explicit reclassification channel out of a confidential flow.
    fn poke_saved_exit(&self, m: &mut Machine, area: u64, reason: &ExitReason, timer: u64) {
        let src = m
            .validate_confidential(area, CANONICAL_STATE_BYTES as u64)
            .expect("save areas are confidential");
        let mut bytes = [0u8; CANONICAL_STATE_BYTES];
        m.read_confidential(&src, 0, &mut bytes);
        let mut state = HartArchState::decode_canonical(&bytes, DomainTag::Hypervisor)
            .expect("save areas always hold canonical state");
        reason.store(&mut state, timer);
        m.write_confidential(&src, 0, &state.encode_canonical());
    }

    /// Summarize and drain the access log into a `wset` line: confidential
    /// and stray counts of the security manager's own writes since the
    /// last summary. Guest and hypervisor accesses are not handler writes
    /// and are skipped.
    fn emit_wset(&self, hart: usize, m: &mut Machine) {
        let confidential = m.layout().confidential;
        let mut conf = 0usize;
        let mut stray = 0usize;
        for record in m.take_access_log() {
            if record.domain == AccessDomain::Tsm && record.kind == AccessKind::Write {
                if confidential.contains_range(record.addr, record.len) {
                    conf += 1;
                } else {
                    stray += 1;
                }
            }
        }
        self.emit(hart, EventBody::Wset { side: Side::Tsm, conf, nc: 0, stray });
    }

    /// Open a handler bracket from guest context: switch in, save the
    /// guest's live state to its confidential save area, mark the save
    /// and route phases. (A preceding call line, if any, is the caller's.)
    fn open_guest_bracket(
        &self,
        hart: usize,
        ctx: &mut FsmContext,
        m: &mut Machine,
        desc: &TvmDescriptor,
        vhart: usize,
    ) {
        let side = Side::Guest { tvm: desc.id, vhart: vhart as u64 };
        self.switch_line(hart, ctx, side, Side::Tsm);
        let state = m.hart(hart).clone();
        desc.store_vhart_state(m, vhart, &state);
        self.emit(hart, EventBody::Phase { step: Phase::Save });
        self.emit(hart, EventBody::Phase { step: Phase::Route });
    }

    /// Close a bracket back into the same guest with a call result: the
    /// answer is poked into the saved state, the restore step reloads it,
    /// and the ret line hands control back.
    #[allow(clippy::too_many_arguments)]
    fn close_to_guest(
        &self,
        hart: usize,
        ctx: &mut FsmContext,
        m: &mut Machine,
        desc: &TvmDescriptor,
        vhart: usize,
        transformed: bool,
        ret: SbiRet,
    ) {
        self.poke_saved_ret(m, desc.vharts[vhart].save_area, ret);
        if transformed {
            self.emit(hart, EventBody::Phase { step: Phase::Transform });
        }
        self.emit(hart, EventBody::Phase { step: Phase::Restore });
        let state = desc.load_vhart_state(m, vhart);
        *m.hart_mut(hart) = state;
        self.emit_wset(hart, m);
        let side = Side::Guest { tvm: desc.id, vhart: vhart as u64 };
        self.switch_line(hart, ctx, Side::Tsm, side);
        self.emit(hart, EventBody::Ret { side, error: ret.error, value: ret.value });
    }

    /// Close a bracket back into the same guest with no call to answer
    /// (page materialization): restore and re-enter.
    fn reenter_guest(
        &self,
        hart: usize,
        ctx: &mut FsmContext,
        m: &mut Machine,
        desc: &TvmDescriptor,
        vhart: usize,
    ) {
        self.emit(hart, EventBody::Phase { step: Phase::Restore });
        let state = desc.load_vhart_state(m, vhart);
        *m.hart_mut(hart) = state;
        self.emit_wset(hart, m);
        let side = Side::Guest { tvm: desc.id, vhart: vhart as u64 };
        self.switch_line(hart, ctx, Side::Tsm, side);
        self.emit(hart, EventBody::Enter { tvm: desc.id, vhart: vhart as u64 });
    }

    /// Close the open bracket toward the hypervisor with an exit report.
    /// The guest's state is already saved (or scrubbed, after a stop);
    /// a staged return value for the guest's next entry is poked into its
    /// saved registers here.
    #[allow(clippy::too_many_arguments)]
    fn exit_to_hyp(
        &self,
        hart: usize,
        ctx: &mut FsmContext,
        m: &mut Machine,
        desc: &mut TvmDescriptor,
        vhart: usize,
        reason: ExitReason,
        staged: Option<(i64, u64)>,
    ) -> SbiRet {
        if let Some((error, value)) = staged {
            self.poke_saved_ret(m, desc.vharts[vhart].save_area, SbiRet { error, value });
        }
        desc.vharts[vhart].staged_ret = staged;
        desc.running.remove(&vhart);
        let timer = desc.vharts[vhart].disclosed_timer;
        self.poke_saved_exit(m, ctx.hyp_save_area, &reason, timer);
        self.emit(hart, EventBody::Phase { step: Phase::Restore });
        self.load_hyp_state(m, ctx.hyp_save_area, hart);
        self.emit_wset(hart, m);
        self.switch_line(hart, ctx, Side::Tsm, Side::Hyp);
        self.emit(hart, EventBody::Exit {
            tvm: desc.id,
            vhart: vhart as u64,
            reason: reason.name(),
            payload: reason.payload(),
            timer,
        });
        self.emit(hart, EventBody::Ret { side: Side::Hyp, error: 0, value: reason.code() });
        SbiRet::ok(reason.code())
    }

    /// Close the open bracket toward the hypervisor with a plain call
    /// result (every non-run call, and run calls that fail validation).
    fn ret_to_hyp(&self, hart: usize, ctx: &mut FsmContext, ret: SbiRet) -> SbiRet {
        {
            let mut m = self.machine.lock().unwrap();
            self.poke_saved_ret(&mut m, ctx.hyp_save_area, ret);
            self.emit(hart, EventBody::Phase { step: Phase::Restore });
            self.load_hyp_state(&mut m, ctx.hyp_save_area, hart);
            self.emit_wset(hart, &mut m);
        }
        self.switch_line(hart, ctx, Side::Tsm, Side::Hyp);
        self.emit(hart, EventBody::Ret { side: Side::Hyp, error: ret.error, value: ret.value });
        ret
    }
}
