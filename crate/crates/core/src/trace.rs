// SPDX-License-Identifier: Apache-2.0

//! Execution tracing and trace-level security audits.
//!
//! Every dispatcher transaction emits a fixed shape of events, so the
//! trace is not just a debugging aid but checkable evidence. Rendered
//! traces are line-oriented: a `tsm-trace v1` header, then one event per
//! line as space-separated `key=value` pairs with a strictly increasing
//! `seq`. Rendering is deterministic, so a fixed seed yields a
//! byte-identical trace.
//!
//! # Transaction shape
//!
//! Per hardware hart, execution alternates between three sides —
//! hypervisor, security manager, guest — and every excursion into the
//! security manager has the same bracket:
//!
//! ```text
//! call                       (from hypervisor or guest)
//! switch from=<caller> to=tsm residue=1
//! phase step=save
//! phase step=route
//!   ... handler events (construct/transform/destruct phases,
//!       lifecycle, interrupt, timer, promotion events) ...
//! phase step=restore
//! wset conf=<n> nc=<m> stray=<k>
//! switch from=tsm to=<target> residue=1
//! enter / ret / exit+ret     (depending on target and call)
//! ```
//!
//! A guest memory touch that faults enters the same bracket without a
//! `call` line. The four checks over this shape:
//!
//! * **grammar** — brackets are complete and well-ordered per hart;
//! * **mediation** — every switch has the security manager on one side:
//!   the hypervisor and a guest never touch directly;
//! * **residue** — every switch that crosses a security domain records
//!   that residual state was cleared;
//! * **write confinement** — no handler wrote outside its allowed zones
//!   (every `wset` line reports zero strays).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::machine::TvmId;

/// Which side of the world is executing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Hyp,
    Tsm,
    Guest { tvm: TvmId, vhart: u64 },
}

impl Side {
    /// Security-domain label: virtual harts of one confidential VM share
    /// a domain; the hypervisor and the security manager are their own.
    pub fn domain_label(&self) -> String {
        match self {
            Side::Hyp => "hyp".into(),
            Side::Tsm => "tsm".into(),
            Side::Guest { tvm, .. } => format!("tvm{tvm}"),
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::Hyp => write!(f, "hyp"),
            Side::Tsm => write!(f, "tsm"),
            Side::Guest { tvm, vhart } => write!(f, "tvm{tvm}.v{vhart}"),
        }
    }
}

/// Dispatcher phases, in their required order around handler work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Save,
    Route,
    Construct,
    Transform,
    Destruct,
    Restore,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Save => "save",
            Phase::Route => "route",
            Phase::Construct => "construct",
            Phase::Transform => "transform",
            Phase::Destruct => "destruct",
            Phase::Restore => "restore",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventBody {
    /// A binary-interface call was raised by `side`.
    Call { side: Side, ext: u64, fid: u64, args: [u64; 6] },
    /// Control returned to `side` with an error code and value.
    Ret { side: Side, error: i64, value: u64 },
    /// Security-domain switch.
    Switch { from: Side, to: Side, residue_cleared: bool },
    /// Dispatcher phase marker.
    Phase { step: Phase },
    /// A guest began (or resumed) executing.
    Enter { tvm: TvmId, vhart: u64 },
    /// Exit report delivered to the hypervisor.
    Exit { tvm: TvmId, vhart: u64, reason: &'static str, payload: [u64; 4], timer: u64 },
    /// One guest action executed.
    Guest { tvm: TvmId, vhart: u64, act: String },
    /// Virtual-hart lifecycle transition.
    Hsm { tvm: TvmId, vhart: u64, from: &'static str, to: &'static str },
    /// Interrupt bookkeeping: inject, filter-drop, pend, deliver.
    Irq { tvm: TvmId, vhart: u64, irq: u64, act: &'static str },
    /// Timer bookkeeping: arm or fire.
    Timer { tvm: TvmId, vhart: u64, act: &'static str, cmp: u64, now: u64 },
    /// Inter-processor interrupt between virtual harts.
    Ipi { tvm: TvmId, from_vhart: u64, to_vhart: u64 },
    /// Remote fence bookkeeping: pend or apply.
    Fence { tvm: TvmId, vhart: u64, act: &'static str, kind: &'static str },
    /// Promotion progress: step name plus stable detail fields.
    Promote { step: &'static str, fields: Vec<(&'static str, String)> },
    /// A lazily zero guest page was materialized and mapped.
    Map { tvm: TvmId, vhart: u64, gpa: u64, npa: u64 },
    /// A confidential VM was torn down and its tokens released.
    Teardown { tvm: TvmId, tokens: usize },
    /// Handler write-set summary for one transaction.
    Wset { side: Side, conf: usize, nc: usize, stray: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub hart: usize,
    pub body: EventBody,
}

impl TraceEvent {
    pub fn to_line(&self) -> String {
        let mut s = format!("seq={} hart={}", self.seq, self.hart);
        match &self.body {
            EventBody::Call { side, ext, fid, args } => {
                write!(s, " ev=call side={side} ext={ext:#x} fid={fid}").unwrap();
                for (i, a) in args.iter().enumerate() {
                    write!(s, " a{i}={a:#x}").unwrap();
                }
            }
            EventBody::Ret { side, error, value } => {
                write!(s, " ev=ret side={side} err={error} val={value:#x}").unwrap();
            }
            EventBody::Switch { from, to, residue_cleared } => {
                write!(s, " ev=switch from={from} to={to} residue={}", u8::from(*residue_cleared))
                    .unwrap();
            }
            EventBody::Phase { step } => {
                write!(s, " ev=phase step={}", step.name()).unwrap();
            }
            EventBody::Enter { tvm, vhart } => {
                write!(s, " ev=enter tvm={tvm} vhart={vhart}").unwrap();
            }
            EventBody::Exit { tvm, vhart, reason, payload, timer } => {
                write!(s, " ev=exit tvm={tvm} vhart={vhart} reason={reason}").unwrap();
                for (i, p) in payload.iter().enumerate() {
                    write!(s, " p{i}={p:#x}").unwrap();
                }
                write!(s, " timer={timer}").unwrap();
            }
            EventBody::Guest { tvm, vhart, act } => {
                write!(s, " ev=guest tvm={tvm} vhart={vhart} act={act}").unwrap();
            }
            EventBody::Hsm { tvm, vhart, from, to } => {
                write!(s, " ev=hsm tvm={tvm} vhart={vhart} from={from} to={to}").unwrap();
            }
            EventBody::Irq { tvm, vhart, irq, act } => {
                write!(s, " ev=irq tvm={tvm} vhart={vhart} irq={irq} act={act}").unwrap();
            }
            EventBody::Timer { tvm, vhart, act, cmp, now } => {
                write!(s, " ev=timer tvm={tvm} vhart={vhart} act={act} cmp={cmp} now={now}").unwrap();
            }
            EventBody::Ipi { tvm, from_vhart, to_vhart } => {
                write!(s, " ev=ipi tvm={tvm} from={from_vhart} to={to_vhart}").unwrap();
            }
            EventBody::Fence { tvm, vhart, act, kind } => {
                write!(s, " ev=fence tvm={tvm} vhart={vhart} act={act} kind={kind}").unwrap();
            }
            EventBody::Promote { step, fields } => {
                write!(s, " ev=promote step={step}").unwrap();
                for (k, v) in fields {
                    write!(s, " {k}={v}").unwrap();
                }
            }
            EventBody::Map { tvm, vhart, gpa, npa } => {
                write!(s, " ev=map tvm={tvm} vhart={vhart} gpa={gpa:#x} npa={npa:#x}").unwrap();
            }
            EventBody::Teardown { tvm, tokens } => {
                write!(s, " ev=teardown tvm={tvm} tokens={tokens}").unwrap();
            }
            EventBody::Wset { side, conf, nc, stray } => {
                write!(s, " ev=wset side={side} conf={conf} nc={nc} stray={stray}").unwrap();
            }
        }
        s
    }
}

pub const TRACE_HEADER: &str = "tsm-trace v1";

/// An append-only event log with global sequence numbers.
#[derive(Debug, Default)]
pub struct Trace {
    next_seq: u64,
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Trace {
        Trace::default()
    }

    pub fn push(&mut self, hart: usize, body: EventBody) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.push(TraceEvent { seq, hart, body });
        seq
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn render(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for ev in &self.events {
            out.push_str(&ev.to_line());
            out.push('\n');
        }
        out
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.events.iter().any(|e| e.to_line().contains(needle))
    }
}

/// One failed check: where and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub seq: u64,
    pub hart: usize,
    pub reason: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "trace violation at seq {} (hart {}): {}", self.seq, self.hart, self.reason)
    }
}

fn violation(ev: &TraceEvent, reason: impl Into<String>) -> Violation {
    Violation { seq: ev.seq, hart: ev.hart, reason: reason.into() }
}

/// Per-hart dispatcher state for the grammar DFA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GState {
    /// Hypervisor executing.
    Hyp,
    /// A call was raised; the switch into the security manager is due.
    AwaitEntry { caller: Side },
    /// Inside the security manager.
    Tsm { caller: Side, step: TsmStep },
    /// The closing switch happened; a ret/enter/exit is due.
    AwaitHandoff { target: Side },
    /// An exit report was produced; the closing ret is due.
    AwaitExitRet,
    /// Guest executing.
    Guest { tvm: TvmId, vhart: u64, entered: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TsmStep {
    ExpectSave,
    ExpectRoute,
    Middle,
    ExpectWset,
    ExpectSwitch,
}

/// Check the transaction grammar: every security-manager excursion is a
/// complete, well-ordered bracket, and each hart both starts and ends in
/// the hypervisor.
pub fn check_grammar(events: &[TraceEvent]) -> Result<(), Violation> {
    let mut states: BTreeMap<usize, GState> = BTreeMap::new();
    let mut last_seq: Option<u64> = None;
    for ev in events {
        if let Some(prev) = last_seq {
            if ev.seq <= prev {
                return Err(violation(ev, format!("sequence not strictly increasing after {prev}")));
            }
        }
        last_seq = Some(ev.seq);
        let state = states.entry(ev.hart).or_insert(GState::Hyp);
        *state = step_grammar(*state, ev)?;
    }
    for (hart, state) in states {
        if state != GState::Hyp {
            return Err(Violation {
                seq: last_seq.unwrap_or(0),
                hart,
                reason: format!("hart ended mid-transaction in state {state:?}"),
            });
        }
    }
    Ok(())
}

fn step_grammar(state: GState, ev: &TraceEvent) -> Result<GState, Violation> {
    use EventBody as B;
    let bad = |why: &str| Err(violation(ev, format!("{why} in state {state:?}")));
    match state {
        GState::Hyp => match &ev.body {
            B::Call { side: Side::Hyp, .. } => Ok(GState::AwaitEntry { caller: Side::Hyp }),
            _ => bad("only a hypervisor call may start a transaction"),
        },
        GState::Guest { tvm, vhart, .. } => match &ev.body {
            B::Guest { tvm: t, vhart: v, .. } if *t == tvm && *v == vhart => Ok(state),
            B::Call { side: side @ Side::Guest { tvm: t, vhart: v }, .. }
                if *t == tvm && *v == vhart =>
            {
                Ok(GState::AwaitEntry { caller: *side })
            }
            B::Switch { from: Side::Guest { tvm: t, vhart: v }, to: Side::Tsm, .. }
                if *t == tvm && *v == vhart =>
            {
                Ok(GState::Tsm {
                    caller: Side::Guest { tvm, vhart },
                    step: TsmStep::ExpectSave,
                })
            }
            _ => bad("guest may only act, call, or switch into the security manager"),
        },
        GState::AwaitEntry { caller } => match &ev.body {
            B::Switch { from, to: Side::Tsm, .. } if *from == caller => {
                Ok(GState::Tsm { caller, step: TsmStep::ExpectSave })
            }
            _ => bad("a call must be followed by a switch into the security manager"),
        },
        GState::Tsm { caller, step } => {
            let next_step = match (step, &ev.body) {
                (TsmStep::ExpectSave, B::Phase { step: Phase::Save }) => TsmStep::ExpectRoute,
                (TsmStep::ExpectRoute, B::Phase { step: Phase::Route }) => TsmStep::Middle,
                (TsmStep::Middle, B::Phase { step: Phase::Construct })
                | (TsmStep::Middle, B::Phase { step: Phase::Transform })
                | (TsmStep::Middle, B::Phase { step: Phase::Destruct }) => TsmStep::Middle,
                (TsmStep::Middle, B::Phase { step: Phase::Restore }) => TsmStep::ExpectWset,
                // Handler work is legal only between route and restore.
                (TsmStep::Middle, B::Hsm { .. })
                | (TsmStep::Middle, B::Irq { .. })
                | (TsmStep::Middle, B::Timer { .. })
                | (TsmStep::Middle, B::Ipi { .. })
                | (TsmStep::Middle, B::Fence { .. })
                | (TsmStep::Middle, B::Promote { .. })
                | (TsmStep::Middle, B::Map { .. })
                | (TsmStep::Middle, B::Teardown { .. }) => TsmStep::Middle,
                (TsmStep::ExpectWset, B::Wset { side: Side::Tsm, .. }) => TsmStep::ExpectSwitch,
                (TsmStep::ExpectSwitch, B::Switch { from: Side::Tsm, to, .. }) => {
                    return Ok(GState::AwaitHandoff { target: *to });
                }
                _ => return bad("event out of order inside the security manager"),
            };
            Ok(GState::Tsm { caller, step: next_step })
        }
        GState::AwaitHandoff { target } => match (&ev.body, target) {
            (B::Ret { side, .. }, Side::Hyp) if *side == Side::Hyp => Ok(GState::Hyp),
            (B::Exit { .. }, Side::Hyp) => Ok(GState::AwaitExitRet),
            (B::Ret { side, .. }, Side::Guest { tvm, vhart }) if *side == target => {
                Ok(GState::Guest { tvm, vhart, entered: true })
            }
            (B::Enter { tvm: t, vhart: v }, Side::Guest { tvm, vhart })
                if *t == tvm && *v == vhart =>
            {
                Ok(GState::Guest { tvm, vhart, entered: true })
            }
            _ => bad("handoff must be a ret, enter, or exit matching the switch target"),
        },
        GState::AwaitExitRet => match &ev.body {
            B::Ret { side: Side::Hyp, .. } => Ok(GState::Hyp),
            _ => bad("an exit report must be followed by the closing ret"),
        },
    }
}

/// Every switch must have the security manager on exactly one side: the
/// hypervisor and guests never hand control to each other directly.
pub fn audit_mediation(events: &[TraceEvent]) -> Result<(), Violation> {
    for ev in events {
        if let EventBody::Switch { from, to, .. } = &ev.body {
            let tsm_sides = usize::from(*from == Side::Tsm) + usize::from(*to == Side::Tsm);
            if tsm_sides != 1 {
                return Err(violation(
                    ev,
                    format!("unmediated switch {from} -> {to}"),
                ));
            }
        }
    }
    Ok(())
}

/// Every switch that crosses security domains must record that residual
/// state was cleared before the destination ran.
pub fn audit_residue(events: &[TraceEvent]) -> Result<(), Violation> {
    for ev in events {
        if let EventBody::Switch { from, to, residue_cleared } = &ev.body {
            if from.domain_label() != to.domain_label() && !residue_cleared {
                return Err(violation(
                    ev,
                    format!("switch {from} -> {to} without residue clearing"),
                ));
            }
        }
    }
    Ok(())
}

/// No handler may have written outside its allowed zones.
pub fn audit_write_confinement(events: &[TraceEvent]) -> Result<(), Violation> {
    for ev in events {
        if let EventBody::Wset { stray, .. } = &ev.body {
            if *stray != 0 {
                return Err(violation(ev, format!("{stray} stray writes outside the handler's zone")));
            }
        }
    }
    Ok(())
}

/// Grammar plus all three audits.
pub fn audit_all(events: &[TraceEvent]) -> Result<(), Violation> {
    check_grammar(events)?;
    audit_mediation(events)?;
    audit_residue(events)?;
    audit_write_confinement(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A complete, benign run transaction on hart 0: call, handler,
    /// guest executes one action and goes idle, exit.
    fn benign_run() -> Vec<TraceEvent> {
        let g = Side::Guest { tvm: 1, vhart: 0 };
        let bodies = vec![
            // run call: hyp -> tsm -> guest
            EventBody::Call { side: Side::Hyp, ext: 0x5456_5331, fid: 1, args: [1, 0, 0, 0, 0, 0] },
            EventBody::Switch { from: Side::Hyp, to: Side::Tsm, residue_cleared: true },
            EventBody::Phase { step: Phase::Save },
            EventBody::Phase { step: Phase::Route },
            EventBody::Phase { step: Phase::Transform },
            EventBody::Phase { step: Phase::Restore },
            EventBody::Wset { side: Side::Tsm, conf: 1, nc: 0, stray: 0 },
            EventBody::Switch { from: Side::Tsm, to: g, residue_cleared: true },
            EventBody::Enter { tvm: 1, vhart: 0 },
            // guest acts, then runs out of work: guest -> tsm -> hyp
            EventBody::Guest { tvm: 1, vhart: 0, act: "read:0x1000".into() },
            EventBody::Switch { from: g, to: Side::Tsm, residue_cleared: true },
            EventBody::Phase { step: Phase::Save },
            EventBody::Phase { step: Phase::Route },
            EventBody::Phase { step: Phase::Transform },
            EventBody::Phase { step: Phase::Restore },
            EventBody::Wset { side: Side::Tsm, conf: 1, nc: 0, stray: 0 },
            EventBody::Switch { from: Side::Tsm, to: Side::Hyp, residue_cleared: true },
            EventBody::Exit { tvm: 1, vhart: 0, reason: "idle", payload: [0; 4], timer: 0 },
            EventBody::Ret { side: Side::Hyp, error: 0, value: 0 },
        ];
        let mut trace = Trace::new();
        for b in bodies {
            trace.push(0, b);
        }
        trace.events().to_vec()
    }

    #[test]
    fn benign_transaction_passes_everything() {
        let events = benign_run();
        audit_all(&events).unwrap();
    }

    #[test]
    fn rendering_is_stable_and_greppable() {
        let events = benign_run();
        let mut t = Trace::new();
        for e in &events {
            t.push(e.hart, e.body.clone());
        }
        let text = t.render();
        assert!(text.starts_with("tsm-trace v1\n"));
        assert!(text.contains("ev=call side=hyp ext=0x54565331 fid=1"));
        assert!(text.contains("ev=switch from=tsm to=tvm1.v0 residue=1"));
        assert!(text.contains("ev=exit tvm=1 vhart=0 reason=idle"));
        // Two renders are byte-identical.
        assert_eq!(text, t.render());
    }

    #[test]
    fn grammar_rejects_truncated_and_disordered_brackets() {
        // Truncated: ends inside the security manager.
        let mut events = benign_run();
        events.truncate(5);
        assert!(check_grammar(&events).is_err());

        // Disordered: route before save.
        let mut events = benign_run();
        events.swap(2, 3);
        // Re-number so the sequence check is not what fails.
        for (i, e) in events.iter_mut().enumerate() {
            e.seq = i as u64;
        }
        assert!(check_grammar(&events).is_err());

        // A handler event outside the bracket.
        let mut t = Trace::new();
        t.push(0, EventBody::Hsm { tvm: 1, vhart: 0, from: "stopped", to: "started" });
        assert!(check_grammar(t.events()).is_err());

        // Duplicate sequence numbers.
        let mut events = benign_run();
        let seq = events[3].seq;
        events[4].seq = seq;
        assert!(check_grammar(&events).is_err());
    }

    #[test]
    fn mediation_audit_catches_direct_handoff() {
        let mut t = Trace::new();
        t.push(0, EventBody::Switch {
            from: Side::Hyp,
            to: Side::Guest { tvm: 1, vhart: 0 },
            residue_cleared: true,
        });
        let err = audit_mediation(t.events()).unwrap_err();
        assert!(err.reason.contains("unmediated"));
        // Grammar would reject it too: a switch cannot start a transaction.
        assert!(check_grammar(t.events()).is_err());
    }

    #[test]
    fn residue_audit_catches_uncleared_switch() {
        let mut events = benign_run();
        for e in &mut events {
            if let EventBody::Switch { residue_cleared, .. } = &mut e.body {
                *residue_cleared = false;
                break;
            }
        }
        let err = audit_residue(&events).unwrap_err();
        assert!(err.reason.contains("without residue clearing"));
    }

    #[test]
    fn write_confinement_audit_catches_strays() {
        let mut events = benign_run();
        for e in &mut events {
            if let EventBody::Wset { stray, .. } = &mut e.body {
                *stray = 2;
                break;
            }
        }
        let err = audit_write_confinement(&events).unwrap_err();
        assert!(err.reason.contains("stray"));
    }

    #[test]
    fn guest_call_returning_to_guest_is_well_formed() {
        let g = Side::Guest { tvm: 3, vhart: 1 };
        let mut t = Trace::new();
        // hyp run -> guest
        for b in [
            EventBody::Call { side: Side::Hyp, ext: 0x5456_5331, fid: 1, args: [3, 1, 0, 0, 0, 0] },
            EventBody::Switch { from: Side::Hyp, to: Side::Tsm, residue_cleared: true },
            EventBody::Phase { step: Phase::Save },
            EventBody::Phase { step: Phase::Route },
            EventBody::Phase { step: Phase::Transform },
            EventBody::Phase { step: Phase::Restore },
            EventBody::Wset { side: Side::Tsm, conf: 0, nc: 0, stray: 0 },
            EventBody::Switch { from: Side::Tsm, to: g, residue_cleared: true },
            EventBody::Enter { tvm: 3, vhart: 1 },
            // guest sets a timer: call returns to the guest
            EventBody::Call { side: g, ext: 0x5449_4D45, fid: 0, args: [100, 0, 0, 0, 0, 0] },
            EventBody::Switch { from: g, to: Side::Tsm, residue_cleared: true },
            EventBody::Phase { step: Phase::Save },
            EventBody::Phase { step: Phase::Route },
            EventBody::Timer { tvm: 3, vhart: 1, act: "arm", cmp: 100, now: 0 },
            EventBody::Phase { step: Phase::Transform },
            EventBody::Phase { step: Phase::Restore },
            EventBody::Wset { side: Side::Tsm, conf: 1, nc: 0, stray: 0 },
            EventBody::Switch { from: Side::Tsm, to: g, residue_cleared: true },
            EventBody::Ret { side: g, error: 0, value: 0 },
            // out of work: idle exit
            EventBody::Switch { from: g, to: Side::Tsm, residue_cleared: true },
            EventBody::Phase { step: Phase::Save },
            EventBody::Phase { step: Phase::Route },
            EventBody::Phase { step: Phase::Transform },
            EventBody::Phase { step: Phase::Restore },
            EventBody::Wset { side: Side::Tsm, conf: 1, nc: 0, stray: 0 },
            EventBody::Switch { from: Side::Tsm, to: Side::Hyp, residue_cleared: true },
            EventBody::Exit { tvm: 3, vhart: 1, reason: "idle", payload: [0; 4], timer: 100 },
            EventBody::Ret { side: Side::Hyp, error: 0, value: 0 },
        ] {
            t.push(2, b);
        }
        audit_all(t.events()).unwrap();
    }

    #[test]
    fn multi_hart_traces_are_checked_per_hart() {
        // Interleave two copies of the benign transaction on harts 0 and 1.
        let one = benign_run();
        let mut t = Trace::new();
        for e in &one {
            t.push(0, e.body.clone());
            t.push(1, e.body.clone());
        }
        audit_all(t.events()).unwrap();
    }
}
