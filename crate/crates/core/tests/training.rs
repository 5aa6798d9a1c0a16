//! Trainer behaviour on small synthetic problems.

use evbracket::objectives::{eubo, ppca_decoder_net, ppca_encoder_net, NetSet, ObjectiveKind};
use evbracket::trainer::{
    initial_nets, prepare_data, train, train_bracket, train_on, DecoderMode, TrainConfig,
};

fn small(kind: ObjectiveKind, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::synthetic(kind, seed);
    cfg.n_x = 6;
    cfg.n_z = 2;
    cfg.hidden = vec![8];
    cfg.data = evbracket::trainer::DataSource::Synthetic {
        sigma: 0.3,
        n_points: 250,
    };
    cfg.epochs = 3;
    cfg.batch_size = 25;
    cfg.learning_rate = 0.01;
    cfg.eval_every = 1;
    cfg.eval_mc_samples = 16;
    cfg
}

#[test]
fn zero_learning_rate_changes_nothing() {
    for kind in ObjectiveKind::ALL {
        let mut cfg = small(kind, 3);
        cfg.epochs = 1;
        cfg.learning_rate = 0.0;
        let data = prepare_data(&cfg).unwrap();
        let report = train_on(&cfg, kind, &data, None).unwrap();
        let init = initial_nets(&cfg, kind).unwrap();
        assert_eq!(
            report.nets.as_ref().unwrap().params(),
            init.params(),
            "{kind}"
        );
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].value, report.rows[1].value, "{kind}");
    }
}

#[test]
fn rows_are_ordered_and_finite() {
    for kind in ObjectiveKind::ALL {
        let report = train(&small(kind, 4)).unwrap();
        assert!(!report.aborted);
        let epochs: Vec<usize> = report.rows.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3]);
        for r in &report.rows {
            assert!(r.value.is_finite() && r.gap.is_finite() && r.exact_evidence.is_some());
            assert!((r.value - (r.recon - r.regu + r.extra)).abs() < 1e-9);
        }
    }
}

#[test]
fn lower_bounds_stay_below_exact_evidence() {
    for kind in [ObjectiveKind::Elbo, ObjectiveKind::VaeC] {
        let mut cfg = small(kind, 5);
        cfg.epochs = 6;
        cfg.eval_mc_samples = 64;
        for r in train(&cfg).unwrap().rows {
            let se = r.paired_std_error.unwrap();
            assert!(
                r.value <= r.exact_evidence.unwrap() + 3.0 * se,
                "{kind} epoch {}",
                r.epoch
            );
        }
    }
}

#[test]
fn divergent_training_ends_with_a_diagnostic_row() {
    let mut cfg = small(ObjectiveKind::Elbo, 6);
    cfg.optimizer = evbracket::nets::OptimizerKind::Sgd;
    cfg.learning_rate = 1e12;
    cfg.epochs = 20;
    let report = train(&cfg).unwrap();
    assert!(report.aborted);
    let last = report.last().unwrap();
    assert!(last.diagnostic.is_some());
    assert!(report.rows[..report.rows.len() - 1]
        .iter()
        .all(|r| r.diagnostic.is_none()));
}

#[test]
fn bracket_is_reproducible_and_matches_solo_runs() {
    let mut cfg = small(ObjectiveKind::Elbo, 8);
    cfg.partner = Some(ObjectiveKind::Eubo);
    let a = train_bracket(&cfg).unwrap();
    let b = train_bracket(&cfg).unwrap();
    assert_eq!(a.lower.rows, b.lower.rows);
    assert_eq!(a.upper.rows, b.upper.rows);
    let mut solo = cfg.clone();
    solo.objective = ObjectiveKind::Eubo;
    solo.partner = None;
    assert_eq!(train(&solo).unwrap().rows, a.upper.rows);
    assert_eq!(a.status.widths.len(), 4);
}

#[test]
fn fixed_ppca_decoder_is_not_trained() {
    let mut cfg = small(ObjectiveKind::Eubo, 9);
    cfg.hidden = vec![];
    cfg.decoder = DecoderMode::Ppca;
    let data = prepare_data(&cfg).unwrap();
    let report = train_on(&cfg, ObjectiveKind::Eubo, &data, None).unwrap();
    let nets = report.nets.unwrap();
    assert_eq!(nets.dec, ppca_decoder_net(&data.fitted).unwrap());
}

#[test]
fn eubo_upper_bounds_only_with_an_exact_auxiliary_encoder() {
    let (data, model) = evbracket::trainer::generate_synthetic(6, 2, 0.3, 300, 10).unwrap();
    let dec = ppca_decoder_net(&model).unwrap();
    let exact = ppca_encoder_net(&model).unwrap();
    let v = NetSet::init(ObjectiveKind::Elbo, 6, 2, &[8], 11)
        .unwrap()
        .enc_v;
    let ev = model.mean_evidence(data.points()).unwrap();
    let paired_se = |per_point: &[f64]| {
        let d: Vec<f64> = (0..data.len())
            .map(|i| per_point[i] - model.evidence_logpdf(data.row(i)).unwrap())
            .collect();
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) / n).sqrt()
    };
    // U = W: the upper bound holds for any V
    let good = eubo(&v, &exact, &dec, data.points(), 32, 1).unwrap();
    assert!(good.value >= ev - 3.0 * paired_se(&good.per_point));
    // U = V ≠ W: the "upper bound" is just the ELBO and lies below
    let tied = eubo(&v, &v, &dec, data.points(), 32, 1).unwrap();
    assert!(tied.value < ev - 3.0 * paired_se(&tied.per_point));
}
