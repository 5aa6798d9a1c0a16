//! Train one objective on synthetic data and write JSON-lines metrics.
//!
//! Usage: cargo run --release --example train_objective [OBJECTIVE] [metrics.jsonl]

use evbracket::objectives::ObjectiveKind;
use evbracket::trainer::{train, TrainConfig};

fn main() -> evbracket::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind: ObjectiveKind = args.next().as_deref().unwrap_or("ELBO").parse()?;
    let mut cfg = TrainConfig::synthetic(kind, 1);
    cfg.epochs = 50;
    cfg.metrics = args.next().map(Into::into);
    print!("{}", cfg.to_toml()?);

    let report = train(&cfg)?;
    for r in &report.rows {
        println!(
            "epoch {:3}  {kind} {:9.4}  gap {:7.4}  exact {:9.4}",
            r.epoch,
            r.value,
            r.gap,
            r.exact_evidence.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
