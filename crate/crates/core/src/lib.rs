// SPDX-License-Identifier: Apache-2.0

//! Deterministic user-level model of a TEE security manager for RISC-V-style
//! confidential virtualization.
//!
//! The crate models, at desk scale and with no privileged hardware, the
//! security manager that sits between a hypervisor and its confidential
//! guests:
//!
//! * [`machine`] — statically partitioned physical memory, typed addresses,
//!   PMP-style per-domain access rules, per-hart register files.
//! * [`allocator`] — exclusive page tokens over confidential memory with
//!   split/merge in a size-hierarchy tree and zero-on-free.
//! * [`gstage`] — validation-and-copy of hypervisor-built guest page tables
//!   into confidential memory, guest-physical translation, lazy zero pages.
//! * [`attestation`] — measurement registers, the sealed attestation-payload
//!   format (lockboxes + AES-GCM-256), and local-attestation verification.
//! * [`tsm`] — the dual-flow finite-state machine: ABI dispatch, lightweight
//!   and security-domain context switches, single-call VM promotion, TVM
//!   execution, teardown.
//! * [`hsm`] — virtual-hart lifecycle, IPIs, remote fences, timers, and
//!   external-interrupt filtering.
//! * [`scenario`]/[`runner`]/[`suite`] — the line-oriented scenario format,
//!   its deterministic runner, and the bundled adversarial suite.
//!
//! Everything is deterministic given a scenario and a seed: two runs produce
//! byte-identical traces.

pub mod abi;
pub mod allocator;
pub mod attestation;
pub mod corpus;
pub mod fixtures;
pub mod gstage;
pub mod hart;
pub mod hsm;
pub mod kem;
pub mod machine;
pub mod runner;
pub mod scenario;
pub mod suite;
pub mod trace;
pub mod tsm;
pub mod tvm;
