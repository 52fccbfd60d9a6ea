// SPDX-License-Identifier: Apache-2.0

//! The bundled scenario corpus: benign lifecycle scripts that double as
//! format documentation, and adversarial scripts whose expectations are
//! the isolation contract. Everything here ships inside the library so
//! the CLI, the attack suite, and the test targets all replay the same
//! bytes.

/// Benign boot — the golden-trace scenario.
pub const BOOT: &str = include_str!("../scenarios/boot.scn");
/// Full virtual-hart lifecycle: start, IPI, fence, timer, suspend, stop.
pub const LIFECYCLE: &str = include_str!("../scenarios/lifecycle.scn");
/// Shared pages, sealed-secret retrieval, foreign-call forwarding.
pub const SHARING: &str = include_str!("../scenarios/sharing.scn");
/// Interrupt filtering and routing in both directions.
pub const IRQ: &str = include_str!("../scenarios/irq.scn");

/// Page-table leaf aimed into confidential memory.
pub const ATTACK_PTE_CONFIDENTIAL: &str = include_str!("../scenarios/attack_pte_confidential.scn");
/// Sealed attestation payload with one flipped bit.
pub const ATTACK_TAP_BITFLIP: &str = include_str!("../scenarios/attack_tap_bitflip.scn");
/// Sealed payload addressed to a recipient we hold no key for.
pub const ATTACK_TAP_FOREIGN: &str = include_str!("../scenarios/attack_tap_foreign.scn");
/// Reference measurements that do not match the staged pages.
pub const ATTACK_TAP_MISMATCH: &str = include_str!("../scenarios/attack_tap_mismatch.scn");
/// Interrupt injection without a guest allow-list entry.
pub const ATTACK_IRQ_UNFILTERED: &str = include_str!("../scenarios/attack_irq_unfiltered.scn");
/// Calls issued from the wrong security domain.
pub const ATTACK_FLOW: &str = include_str!("../scenarios/attack_flow.scn");

/// The benign corpus, in replay order.
pub fn benign() -> &'static [(&'static str, &'static str)] {
    &[("boot", BOOT), ("lifecycle", LIFECYCLE), ("sharing", SHARING), ("irq", IRQ)]
}

/// The adversarial corpus, in replay order.
pub fn adversarial() -> &'static [(&'static str, &'static str)] {
    &[
        ("pte-confidential", ATTACK_PTE_CONFIDENTIAL),
        ("tap-bitflip", ATTACK_TAP_BITFLIP),
        ("tap-foreign", ATTACK_TAP_FOREIGN),
        ("tap-mismatch", ATTACK_TAP_MISMATCH),
        ("irq-unfiltered", ATTACK_IRQ_UNFILTERED),
        ("flow-violation", ATTACK_FLOW),
    ]
}

/// Every bundled scenario.
pub fn all() -> Vec<(&'static str, &'static str)> {
    benign().iter().chain(adversarial()).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::run;
    use crate::scenario::{load, parse};
    use crate::trace::audit_all;

    #[test]
    fn every_bundled_scenario_parses_loads_and_passes() {
        for (name, text) in all() {
            let scenario = parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            let loaded = load(&scenario).unwrap_or_else(|e| panic!("{name}: {e:?}"));
            let outcome = run(&loaded);
            for check in &outcome.checks {
                assert!(
                    check.passed,
                    "{name} line {}: {} — {}",
                    check.line, check.description, check.detail
                );
            }
            audit_all(&outcome.events).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn corpus_covers_every_abi_function() {
        use crate::abi::{EXT_HSM, EXT_IPI, EXT_RFENCE, EXT_TIME, EXT_TVM};
        let mut calls = std::collections::BTreeSet::new();
        for (_, text) in all() {
            let outcome = run(&load(&parse(text).unwrap()).unwrap());
            for line in outcome.trace.lines() {
                if let Some(rest) = line.split_once(" ev=call ").map(|(_, r)| r) {
                    let ext = rest.split("ext=").nth(1).unwrap().split(' ').next().unwrap();
                    let fid = rest.split("fid=").nth(1).unwrap().split(' ').next().unwrap();
                    let ext = u64::from_str_radix(ext.trim_start_matches("0x"), 16).unwrap();
                    calls.insert((ext, fid.parse::<u64>().unwrap()));
                }
            }
        }
        let required = [
            (EXT_TVM, 0), // promote
            (EXT_TVM, 1), // run
            (EXT_TVM, 2), // destroy
            (EXT_TVM, 3), // share page
            (EXT_TVM, 4), // retrieve secret
            (EXT_TVM, 5), // allow interrupt
            (EXT_HSM, 0), // hart start
            (EXT_HSM, 1), // hart stop
            (EXT_HSM, 3), // hart suspend
            (EXT_IPI, 0), // send ipi
            (EXT_RFENCE, 0),
            (EXT_RFENCE, 1),
            (EXT_TIME, 0),
        ];
        for (ext, fid) in required {
            assert!(
                calls.contains(&(ext, fid)),
                "corpus never exercises ext={ext:#x} fid={fid}"
            );
        }
    }
}
