// SPDX-License-Identifier: Apache-2.0

//! Virtual-hart lifecycle, inter-processor interrupts, remote fences,
//! one-shot timers with an explicit disclosure channel, and the
//! external-interrupt injection filter.
//!
//! The lifecycle is a four-state machine with exactly five edges:
//!
//! ```text
//!   Stopped --start--> StartPending --run--> Started
//!   Started --stop--> Stopped          (registers scrubbed)
//!   Started --suspend--> Suspended     (registers retained)
//!   Suspended --run--> Started
//! ```
//!
//! The pure transition functions in this module are the whole edge set;
//! everything else (save-area writes, pending bits, scrubbing) is layered
//! on top of them, so a model check over the pure functions covers the
//! real code path.
//!
//! Interrupt pending/enable state is architectural and lives in each
//! hart's save-area control registers; delivery happens at execution
//! entry, where every bit that is both pending and enabled is handed to
//! the guest and cleared. The identifier of a pending external interrupt
//! rides in descriptor control state beside the pending bit, standing in
//! for the dedicated identifier register of the modeled hardware.
//!
//! Timers disclose exactly one datum to the hypervisor: the deadline the
//! guest last programmed, captured at program time. Nothing else —
//! firing, disarming, clock position — leaves the confidential domain.

use crate::abi::SbiError;
use crate::hart::{Csr, HartArchState, IP_EXTERNAL, IP_SOFT, IP_TIMER};
use crate::machine::Machine;
use crate::tvm::{HsmState, TvmDescriptor};

/// Lifecycle-layer errors, mapped onto ABI error codes at the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsmError {
    InvalidParam,
    AlreadyAvailable,
    InvalidState,
    NotStarted,
}

impl From<HsmError> for SbiError {
    fn from(e: HsmError) -> SbiError {
        match e {
            HsmError::InvalidParam => SbiError::InvalidParam,
            HsmError::AlreadyAvailable => SbiError::AlreadyAvailable,
            HsmError::InvalidState => SbiError::InvalidState,
            HsmError::NotStarted => SbiError::HartNotStarted,
        }
    }
}

/// Stopped → StartPending: the only edge into the pending state.
pub fn start_transition(s: HsmState, pc: u64, opaque: u64) -> Result<HsmState, HsmError> {
    match s {
        HsmState::Stopped => Ok(HsmState::StartPending { pc, opaque }),
        _ => Err(HsmError::AlreadyAvailable),
    }
}

/// Started → Stopped. The caller scrubs the registers.
pub fn stop_transition(s: HsmState) -> Result<HsmState, HsmError> {
    match s {
        HsmState::Started => Ok(HsmState::Stopped),
        _ => Err(HsmError::InvalidState),
    }
}

/// Started → Suspended. Registers are retained.
pub fn suspend_transition(s: HsmState) -> Result<HsmState, HsmError> {
    match s {
        HsmState::Started => Ok(HsmState::Suspended),
        _ => Err(HsmError::InvalidState),
    }
}

/// What beginning execution means for the lifecycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunEntry {
    /// First entry after a start request: boot at `pc` with the starter's
    /// argument in the second argument register.
    InitBoot { pc: u64, opaque: u64 },
    /// Re-entry from suspend; registers as they were.
    Resume,
    /// Plain re-entry of an already started hart.
    Continue,
}

/// The run edge of the lifecycle machine.
pub fn run_entry_transition(s: HsmState) -> Result<(HsmState, RunEntry), HsmError> {
    match s {
        HsmState::StartPending { pc, opaque } => Ok((HsmState::Started, RunEntry::InitBoot { pc, opaque })),
        HsmState::Suspended => Ok((HsmState::Started, RunEntry::Resume)),
        HsmState::Started => Ok((HsmState::Started, RunEntry::Continue)),
        HsmState::Stopped => Err(HsmError::NotStarted),
    }
}

/// One delivered interrupt, reported so the caller can trace it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivered {
    Soft,
    Timer,
    /// Carries the injected identifier.
    External(u64),
}

impl Delivered {
    /// The pending-bit position, which doubles as the trace identifier
    /// for the two fixed classes.
    pub fn bit(&self) -> u64 {
        match self {
            Delivered::Soft => 1,
            Delivered::Timer => 5,
            Delivered::External(_) => 9,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Delivered::Soft => "soft",
            Delivered::Timer => "timer",
            Delivered::External(_) => "external",
        }
    }
}

/// Start request against another virtual hart: the target must be
/// stopped and the entry point must translate (mapped or lazily zero).
pub fn hart_start(
    desc: &mut TvmDescriptor,
    target: u64,
    start_gpa: u64,
    opaque: u64,
) -> Result<usize, SbiError> {
    if target >= desc.vharts.len() as u64 {
        return Err(SbiError::InvalidParam);
    }
    let target = target as usize;
    desc.tables.translate(start_gpa).map_err(|_| SbiError::InvalidParam)?;
    let next = start_transition(desc.vharts[target].hsm, start_gpa, opaque)?;
    desc.vharts[target].hsm = next;
    Ok(target)
}

/// A started hart powers itself off; nothing survives in its save area.
pub fn hart_stop(machine: &mut Machine, desc: &mut TvmDescriptor, vhart: usize) -> Result<(), SbiError> {
    let next = stop_transition(desc.vharts[vhart].hsm)?;
    desc.vharts[vhart].hsm = next;
    desc.scrub_vhart(machine, vhart);
    desc.vharts[vhart].timer_armed = false;
    desc.vharts[vhart].pending_ext_irq = None;
    desc.vharts[vhart].pending_fence = None;
    desc.vharts[vhart].staged_ret = None;
    Ok(())
}

/// A started hart suspends itself; registers are retained for resume.
pub fn hart_suspend(desc: &mut TvmDescriptor, vhart: usize) -> Result<(), SbiError> {
    let next = suspend_transition(desc.vharts[vhart].hsm)?;
    desc.vharts[vhart].hsm = next;
    Ok(())
}

/// Apply the run edge and, on the first entry after a start request,
/// materialize the boot register state: entry point in the program
/// counter, own hart id and the starter's argument in the first two
/// argument registers, and all interrupt classes enabled so pending
/// events reach a freshly started hart.
pub fn run_entry(machine: &mut Machine, desc: &mut TvmDescriptor, vhart: usize) -> Result<RunEntry, SbiError> {
    let (next, entry) = run_entry_transition(desc.vharts[vhart].hsm)?;
    desc.vharts[vhart].hsm = next;
    if let RunEntry::InitBoot { pc, opaque } = entry {
        let mut state = HartArchState::new();
        state.set_csr(Csr::Pc, pc);
        state.set_csr(Csr::Ie, IP_SOFT | IP_TIMER | IP_EXTERNAL);
        state.set_gpr(10, vhart as u64);
        state.set_gpr(11, opaque);
        desc.store_vhart_state(machine, vhart, &state);
    }
    Ok(entry)
}

/// Validate a vhart bitmask: no bit at or above the hart count.
fn check_mask(desc: &TvmDescriptor, mask: u64) -> Result<(), SbiError> {
    let count = desc.vharts.len() as u32;
    if count < 64 && (mask >> count) != 0 {
        return Err(SbiError::InvalidParam);
    }
    Ok(())
}

/// Send a software interrupt to every hart in the mask (self included).
/// Returns the targets so the caller can trace each send.
pub fn send_ipi(machine: &mut Machine, desc: &mut TvmDescriptor, mask: u64) -> Result<Vec<usize>, SbiError> {
    check_mask(desc, mask)?;
    let mut targets = Vec::new();
    for vhart in 0..desc.vharts.len() {
        if mask & (1 << vhart) != 0 {
            let ip = desc.vhart_csr(machine, vhart, Csr::Ip);
            desc.set_vhart_csr(machine, vhart, Csr::Ip, ip | IP_SOFT);
            targets.push(vhart);
        }
    }
    Ok(targets)
}

/// Mark every hart in the mask as needing a flush of cached translation
/// state before it next executes. Returns the targets for tracing.
pub fn remote_fence(desc: &mut TvmDescriptor, mask: u64, kind: &'static str) -> Result<Vec<usize>, SbiError> {
    check_mask(desc, mask)?;
    let mut targets = Vec::new();
    for vhart in 0..desc.vharts.len() {
        if mask & (1 << vhart) != 0 {
            desc.vharts[vhart].pending_fence = Some(kind);
            targets.push(vhart);
        }
    }
    Ok(targets)
}

/// Take a pending fence for application at execution entry.
pub fn take_fence(desc: &mut TvmDescriptor, vhart: usize) -> Option<&'static str> {
    desc.vharts[vhart].pending_fence.take()
}

/// Program this hart's one-shot timer and disclose the deadline. This is
/// the single point where timer state crosses to the hypervisor side.
pub fn program_timer(machine: &mut Machine, desc: &mut TvmDescriptor, vhart: usize, deadline: u64) {
    desc.set_vhart_csr(machine, vhart, Csr::TimerCmp, deadline);
    desc.vharts[vhart].timer_armed = true;
    desc.vharts[vhart].disclosed_timer = deadline;
}

/// Fire the timer if armed and due: pend the timer interrupt and disarm.
/// Returns the deadline that fired.
pub fn check_timer(machine: &mut Machine, desc: &mut TvmDescriptor, vhart: usize, now: u64) -> Option<u64> {
    if !desc.vharts[vhart].timer_armed {
        return None;
    }
    let cmp = desc.vhart_csr(machine, vhart, Csr::TimerCmp);
    if now < cmp {
        return None;
    }
    desc.vharts[vhart].timer_armed = false;
    let ip = desc.vhart_csr(machine, vhart, Csr::Ip);
    desc.set_vhart_csr(machine, vhart, Csr::Ip, ip | IP_TIMER);
    Some(cmp)
}

/// Hypervisor-requested injection of external interrupt `irq`. Allowed
/// identifiers become pending; everything else is dropped. Returns
/// whether the interrupt was accepted.
pub fn inject_external(machine: &mut Machine, desc: &mut TvmDescriptor, vhart: usize, irq: u64) -> bool {
    if !desc.allowed_irqs.contains(&irq) {
        return false;
    }
    let ip = desc.vhart_csr(machine, vhart, Csr::Ip);
    desc.set_vhart_csr(machine, vhart, Csr::Ip, ip | IP_EXTERNAL);
    desc.vharts[vhart].pending_ext_irq = Some(irq);
    true
}

/// Hand every pending-and-enabled interrupt to the guest and clear its
/// pending bit. Order is fixed: software, timer, external.
pub fn deliver_pending(machine: &mut Machine, desc: &mut TvmDescriptor, vhart: usize) -> Vec<Delivered> {
    let ip = desc.vhart_csr(machine, vhart, Csr::Ip);
    let ie = desc.vhart_csr(machine, vhart, Csr::Ie);
    let firing = ip & ie;
    if firing == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    if firing & IP_SOFT != 0 {
        out.push(Delivered::Soft);
    }
    if firing & IP_TIMER != 0 {
        out.push(Delivered::Timer);
    }
    if firing & IP_EXTERNAL != 0 {
        let irq = desc.vharts[vhart].pending_ext_irq.take().unwrap_or(0);
        out.push(Delivered::External(irq));
    }
    desc.set_vhart_csr(machine, vhart, Csr::Ip, ip & !firing);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::PageAllocator;
    use crate::gstage::LeafState;
    use crate::machine::{AddrInterval, MachineConfig, PageSize};

    const GIB: u64 = 1 << 30;

    fn rig(vharts: usize) -> (Machine, PageAllocator, TvmDescriptor) {
        let mut m = Machine::build(MachineConfig {
            memory_base: 0x8000_0000,
            memory_size: 2 * GIB,
            confidential_base: 0xC000_0000,
            confidential_size: GIB,
            hart_count: 1,
        })
        .unwrap();
        let alloc = PageAllocator::init(AddrInterval::new(0xC000_0000, GIB), PageSize::Size1GiB);
        let mut desc = TvmDescriptor::synthetic(
            1,
            vharts,
            &[(0x0, LeafState::Mapped(0xC800_0000)), (0x1000, LeafState::LazyZero)],
        );
        for v in 0..vharts {
            let token = alloc.allocate(PageSize::Size4KiB).unwrap();
            desc.vharts[v].save_area = token.address();
            desc.owned_tokens.push(token);
        }
        // The boot hart is live with an interrupt-receptive register
        // file, as right after promoting an image whose measured boot
        // state enables all three classes.
        desc.vharts[0].hsm = HsmState::Started;
        let mut boot = HartArchState::new();
        boot.set_csr(Csr::Ie, IP_SOFT | IP_TIMER | IP_EXTERNAL);
        desc.store_vhart_state(&mut m, 0, &boot);
        (m, alloc, desc)
    }

    #[test]
    fn pure_transitions_cover_exactly_the_five_edges() {
        let pend = HsmState::StartPending { pc: 4, opaque: 7 };
        assert_eq!(start_transition(HsmState::Stopped, 4, 7), Ok(pend));
        assert_eq!(start_transition(HsmState::Started, 4, 7), Err(HsmError::AlreadyAvailable));
        assert_eq!(start_transition(pend, 4, 7), Err(HsmError::AlreadyAvailable));
        assert_eq!(start_transition(HsmState::Suspended, 4, 7), Err(HsmError::AlreadyAvailable));

        assert_eq!(stop_transition(HsmState::Started), Ok(HsmState::Stopped));
        assert_eq!(stop_transition(HsmState::Stopped), Err(HsmError::InvalidState));
        assert_eq!(stop_transition(pend), Err(HsmError::InvalidState));
        assert_eq!(stop_transition(HsmState::Suspended), Err(HsmError::InvalidState));

        assert_eq!(suspend_transition(HsmState::Started), Ok(HsmState::Suspended));
        assert_eq!(suspend_transition(HsmState::Suspended), Err(HsmError::InvalidState));

        assert_eq!(
            run_entry_transition(pend),
            Ok((HsmState::Started, RunEntry::InitBoot { pc: 4, opaque: 7 }))
        );
        assert_eq!(run_entry_transition(HsmState::Suspended), Ok((HsmState::Started, RunEntry::Resume)));
        assert_eq!(run_entry_transition(HsmState::Started), Ok((HsmState::Started, RunEntry::Continue)));
        assert_eq!(run_entry_transition(HsmState::Stopped), Err(HsmError::NotStarted));
    }

    #[test]
    fn start_validates_target_and_entry_point() {
        let (_m, _a, mut desc) = rig(2);
        // Nonexistent target, unmapped entry, then a good start.
        assert_eq!(hart_start(&mut desc, 2, 0x0, 0), Err(SbiError::InvalidParam));
        assert_eq!(hart_start(&mut desc, 1, 0x8000, 0), Err(SbiError::InvalidParam));
        hart_start(&mut desc, 1, 0x1000, 0xABCD).unwrap();
        assert_eq!(desc.vharts[1].hsm, HsmState::StartPending { pc: 0x1000, opaque: 0xABCD });
        // Starting again while pending: the hart is already claimed.
        assert_eq!(hart_start(&mut desc, 1, 0x0, 0), Err(SbiError::AlreadyAvailable));
    }

    #[test]
    fn first_run_entry_boots_with_id_argument_and_open_interrupts() {
        let (mut m, _a, mut desc) = rig(2);
        hart_start(&mut desc, 1, 0x1000, 0xABCD).unwrap();
        let entry = run_entry(&mut m, &mut desc, 1).unwrap();
        assert_eq!(entry, RunEntry::InitBoot { pc: 0x1000, opaque: 0xABCD });
        assert_eq!(desc.vharts[1].hsm, HsmState::Started);
        let state = desc.load_vhart_state(&mut m, 1);
        assert_eq!(state.csr(Csr::Pc), 0x1000);
        assert_eq!(state.gpr(10), 1);
        assert_eq!(state.gpr(11), 0xABCD);
        assert_eq!(state.csr(Csr::Ie), IP_SOFT | IP_TIMER | IP_EXTERNAL);
    }

    #[test]
    fn suspend_retains_registers_and_stop_scrubs_them() {
        let (mut m, _a, mut desc) = rig(1);
        desc.set_vhart_csr(&mut m, 0, Csr::Pc, 0x4444);
        let before = desc.load_vhart_state(&mut m, 0);

        hart_suspend(&mut desc, 0).unwrap();
        assert_eq!(desc.vharts[0].hsm, HsmState::Suspended);
        assert_eq!(run_entry(&mut m, &mut desc, 0).unwrap(), RunEntry::Resume);
        assert_eq!(desc.load_vhart_state(&mut m, 0), before, "resume must see pre-suspend state");

        hart_stop(&mut m, &mut desc, 0).unwrap();
        assert_eq!(desc.vharts[0].hsm, HsmState::Stopped);
        assert!(m.range_is_zero(desc.vharts[0].save_area, 4096), "stop must scrub");
        assert_eq!(run_entry(&mut m, &mut desc, 0), Err(SbiError::HartNotStarted));
    }

    #[test]
    fn ipi_pends_and_delivers_exactly_once() {
        let (mut m, _a, mut desc) = rig(3);
        // Bit 3 is out of range for three harts.
        assert_eq!(send_ipi(&mut m, &mut desc, 0b1000), Err(SbiError::InvalidParam));
        // Self plus hart 2.
        let targets = send_ipi(&mut m, &mut desc, 0b101).unwrap();
        assert_eq!(targets, vec![0, 2]);
        assert_eq!(deliver_pending(&mut m, &mut desc, 0), vec![Delivered::Soft]);
        // Second entry: nothing pending any more.
        assert_eq!(deliver_pending(&mut m, &mut desc, 0), vec![]);
        // Hart 2 has the bit pending but its enable register is zero
        // until it boots, so nothing is handed over.
        assert_eq!(deliver_pending(&mut m, &mut desc, 2), vec![]);
        hart_start(&mut desc, 2, 0x0, 0).unwrap();
        run_entry(&mut m, &mut desc, 2).unwrap();
        // Boot replaced the register file; the pending bit was in the old
        // save area and is gone. Re-send to the now-live hart.
        send_ipi(&mut m, &mut desc, 0b100).unwrap();
        assert_eq!(deliver_pending(&mut m, &mut desc, 2), vec![Delivered::Soft]);
    }

    #[test]
    fn timer_is_one_shot_and_only_reprogramming_updates_disclosure() {
        let (mut m, _a, mut desc) = rig(1);
        program_timer(&mut m, &mut desc, 0, 1000);
        assert_eq!(desc.vharts[0].disclosed_timer, 1000);
        assert_eq!(check_timer(&mut m, &mut desc, 0, 999), None);
        // Reprogram before expiry: only the new deadline fires.
        program_timer(&mut m, &mut desc, 0, 2000);
        assert_eq!(check_timer(&mut m, &mut desc, 0, 1500), None);
        assert_eq!(check_timer(&mut m, &mut desc, 0, 2000), Some(2000));
        assert_eq!(deliver_pending(&mut m, &mut desc, 0), vec![Delivered::Timer]);
        // One-shot: no refire, and the disclosure still shows the last
        // programmed value rather than tracking the disarm.
        assert_eq!(check_timer(&mut m, &mut desc, 0, 9999), None);
        assert_eq!(desc.vharts[0].disclosed_timer, 2000);
    }

    #[test]
    fn external_injection_respects_the_allowed_set() {
        let (mut m, _a, mut desc) = rig(1);
        assert!(!inject_external(&mut m, &mut desc, 0, 9), "nothing allowed yet");
        assert_eq!(deliver_pending(&mut m, &mut desc, 0), vec![]);
        desc.allowed_irqs.insert(9);
        assert!(inject_external(&mut m, &mut desc, 0, 9));
        assert!(!inject_external(&mut m, &mut desc, 0, 10), "only 9 is allowed");
        assert_eq!(deliver_pending(&mut m, &mut desc, 0), vec![Delivered::External(9)]);
        assert_eq!(deliver_pending(&mut m, &mut desc, 0), vec![]);
    }

    #[test]
    fn fences_pend_per_hart_and_apply_once() {
        let (mut m, _a, mut desc) = rig(2);
        assert_eq!(remote_fence(&mut desc, 0, "fence.i").unwrap(), vec![]);
        assert_eq!(remote_fence(&mut desc, 0b100, "fence.i"), Err(SbiError::InvalidParam));
        assert_eq!(remote_fence(&mut desc, 0b11, "sfence.vma").unwrap(), vec![0, 1]);
        assert_eq!(take_fence(&mut desc, 0), Some("sfence.vma"));
        assert_eq!(take_fence(&mut desc, 0), None, "applied fences do not linger");
        // A suspended hart keeps its pending fence until it resumes.
        hart_start(&mut desc, 1, 0x0, 0).unwrap();
        run_entry(&mut m, &mut desc, 1).unwrap();
        hart_suspend(&mut desc, 1).unwrap();
        run_entry(&mut m, &mut desc, 1).unwrap();
        assert_eq!(take_fence(&mut desc, 1), Some("sfence.vma"));
    }

    #[test]
    fn delivery_order_is_soft_timer_external() {
        let (mut m, _a, mut desc) = rig(1);
        desc.allowed_irqs.insert(3);
        send_ipi(&mut m, &mut desc, 1).unwrap();
        program_timer(&mut m, &mut desc, 0, 10);
        check_timer(&mut m, &mut desc, 0, 10).unwrap();
        inject_external(&mut m, &mut desc, 0, 3);
        assert_eq!(
            deliver_pending(&mut m, &mut desc, 0),
            vec![Delivered::Soft, Delivered::Timer, Delivered::External(3)]
        );
    }
}
