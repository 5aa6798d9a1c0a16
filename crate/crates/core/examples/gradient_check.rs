//! Tape gradients of every objective against central differences.

use evbracket::checks::{gradient_check, tiny_instance};
use evbracket::objectives::{NetSet, ObjectiveKind, Target};

fn main() -> evbracket::Result<()> {
    let inst = tiny_instance(1)?;
    for kind in ObjectiveKind::ALL {
        let nets = NetSet::init(kind, 6, 2, &[8], 42)?;
        for target in [Target::Value, Target::Loss] {
            let r = gradient_check(
                kind,
                &nets,
                Some(&inst.model),
                &inst.batch,
                2,
                7,
                1e-5,
                target,
            )?;
            println!(
                "{kind:<9} {target:?}: {} coords, {:.1}% within 1e-4, worst {:.2e} -> {}",
                r.coordinates,
                100.0 * r.fraction_within,
                r.worst_relative_error,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(())
}
