//! All five objectives evaluated with the exact P-PCA decoder, once with a
//! random encoder and once with the exact posterior encoder.

use evbracket::objectives::{
    ppca_decoder_net, ppca_encoder_net, NetRefs, NetSet, ObjectiveKind, Problem,
};
use evbracket::trainer::generate_synthetic;

fn main() -> evbracket::Result<()> {
    let (data, model) = generate_synthetic(8, 2, 0.2, 500, 2)?;
    let evidence = model.mean_evidence(data.points())?;
    let dec = ppca_decoder_net(&model)?;
    let exact = ppca_encoder_net(&model)?;
    let random = NetSet::init(ObjectiveKind::Elbo, 8, 2, &[16], 3)?.enc_v;
    println!("exact mean log-evidence {evidence:.4}");
    println!("objective  encoders        value      gap");
    for kind in ObjectiveKind::ALL {
        for (label, v, aux) in [
            ("V=random,U=W", &random, &exact),
            ("V=W,U=random", &exact, &random),
        ] {
            let nets = NetRefs {
                enc_v: v,
                enc_aux: kind.needs_aux_encoder().then_some(aux),
                dec: &dec,
                dec_aux: kind.needs_aux_decoder().then_some(&dec),
            };
            let est = Problem::new(kind, nets, Some(&model))?.evaluate(data.points(), 32, 1)?;
            println!("{kind:<10} {label}  {:9.4} {:8.4}", est.value, est.gap);
        }
    }
    Ok(())
}
