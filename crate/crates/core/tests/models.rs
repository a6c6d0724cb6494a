use qta_core::checks::toy_problem;
use qta_core::data::{gen_routing, SplitDataset, SyntheticConfig};
use qta_core::encoders::Vocab;
use qta_core::error::Error;
use qta_core::fusion::{comparable_type_embedding_dim, qt_param_count, QuestionTypeSet};
use qta_core::models::*;
use qta_core::numerics::{ScalarMode, Tape};

fn routing(spt: usize) -> SplitDataset {
    gen_routing(&SyntheticConfig {
        samples_per_type: spt,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn model_for(data: &SplitDataset, arch: Architecture, seed: u64) -> Model {
    let vocab = Vocab::build(data.train.samples.iter().map(|s| s.question.as_str()));
    let types = QuestionTypeSet::new(data.meta.types.clone()).unwrap();
    let mut spec = ModelSpec::new(arch);
    spec.sources = data.meta.sources.clone();
    spec.seed = seed;
    build_model(&spec, &vocab, &types, &data.meta.answers).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn construction_is_seeded() {
    let d = routing(10);
    let a = model_for(&d, Architecture::CatLQta, 3);
    let b = model_for(&d, Architecture::CatLQta, 3);
    let c = model_for(&d, Architecture::CatLQta, 4);
    assert_eq!(a.params().flatten(), b.params().flatten());
    assert_ne!(a.params().flatten(), c.params().flatten());
}

#[test]
fn architecture_parameter_layout() {
    let d = routing(10);
    let cat1 = model_for(&d, Architecture::Cat1, 0);
    assert!(cat1.params().iter().all(|(_, n, _)| !n.starts_with("lstm")));
    assert!(cat1.frozen_table().is_some());

    let qta = model_for(&d, Architecture::CatLQta, 0);
    let w = qta.params().by_name("qta.w").unwrap();
    assert_eq!(w.shape(), &[64, 6]);
    assert!(w.data().iter().all(|&v| v == 1.0));
    assert!(qta.frozen_table().is_none());

    let catl = model_for(&d, Architecture::CatL, 0);
    assert_eq!(qta.num_parameters(), catl.num_parameters() + 64 * 6);

    let m = model_for(&d, Architecture::CatLQtaM, 0);
    assert_eq!(m.num_parameters(), qta.num_parameters() + 64 * 6 + 6);
    assert!(matches!(
        predict_type(&qta, &qta.encode(&d.test).unwrap()[0]),
        Err(Error::Config(_))
    ));
}

#[test]
fn comparable_qt_embedding_matches_qta_budget() {
    let (m, n, hidden) = (64, 6, 128);
    let e = comparable_type_embedding_dim(m, n, hidden);
    let diff = (qt_param_count(n, e, hidden) as i64 - (m * n) as i64).abs();
    assert!(diff <= (n + hidden) as i64 / 2 + 1, "E={e}, diff {diff}");
}

#[test]
fn all_ones_gate_reduces_to_plain_concatenation() {
    let d = routing(10);
    let catl = model_for(&d, Architecture::CatL, 7);
    let mut qta = model_for(&d, Architecture::CatLQta, 7);
    qta.copy_shared_params(&catl);
    let samples = catl.encode(&d.test).unwrap();
    let a = catl.predict(&samples, GateMode::GroundTruth).unwrap();
    let b = qta.predict(&samples, GateMode::GroundTruth).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.answer_probs, y.answer_probs);
    }
}

#[test]
fn zero_lambda_is_the_single_task_objective() {
    let d = routing(10);
    let m = model_for(&d, Architecture::CatLQtaM, 1);
    let mut qta = model_for(&d, Architecture::CatLQta, 1);
    qta.copy_shared_params(&m);
    let samples = m.encode(&d.train).unwrap();
    let batch: Vec<&EncodedSample> = samples.iter().take(16).collect();
    let (lm, _) = m.loss_and_grads(&batch, 0.0).unwrap();
    let (lq, _) = qta.loss_and_grads(&batch, 0.0).unwrap();
    assert_eq!(lm, lq);
    let (mixed, _) = m.loss_and_grads(&batch, 0.5).unwrap();
    assert_ne!(mixed, lm);
}

#[test]
fn inference_gates_with_the_predicted_type() {
    let d = routing(10);
    let m = model_for(&d, Architecture::CatLQtaM, 2);
    let samples = m.encode(&d.test).unwrap();
    let batch: Vec<&EncodedSample> = samples.iter().collect();
    let mut tape = Tape::new();
    let out = m.forward_on_tape(&mut tape, &batch, GateMode::Predicted).unwrap();
    let logits = tape.value(out.type_logits.unwrap()).clone();
    for (r, &g) in out.gate_types.iter().enumerate() {
        assert_eq!(g, argmax(logits.row(r)));
    }
    let mut tape = Tape::new();
    let out = m.forward_on_tape(&mut tape, &batch, GateMode::GroundTruth).unwrap();
    assert!(out.gate_types.iter().zip(&samples).all(|(g, s)| *g == s.question_type));
    // An untrained type head disagrees with the truth somewhere.
    assert!(samples.iter().any(|s| predict_type(&m, s).unwrap() != s.question_type));
}

#[test]
fn training_is_deterministic() {
    let d = routing(20);
    let run = || {
        let mut m = model_for(&d, Architecture::CatLQtaM, 0);
        let curve = train(&mut m, &d.train, &cfg(2)).unwrap();
        (curve, m.params().flatten())
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let d = routing(10);
    let mut m = model_for(&d, Architecture::CatLQta, 0);
    let before = m.params().flatten();
    let c = TrainConfig {
        learning_rate: 0.0,
        ..cfg(1)
    };
    train(&mut m, &d.train, &c).unwrap();
    assert_eq!(m.params().flatten(), before);
}

#[test]
fn first_epoch_reduces_loss_on_a_fixed_batch() {
    let d = routing(20);
    let mut m = model_for(&d, Architecture::CatLQta, 0);
    let samples = m.encode(&d.train).unwrap();
    let batch: Vec<&EncodedSample> = samples.iter().take(32).collect();
    let before = m.loss_and_grads(&batch, 0.2).unwrap().0;
    train(&mut m, &d.train, &cfg(1)).unwrap();
    let after = m.loss_and_grads(&batch, 0.2).unwrap().0;
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn frozen_tables_never_move() {
    let d = routing(10);
    for (arch, variant) in [(Architecture::Cat1, TextVariant::Plain), (Architecture::CatL, TextVariant::Nmt)] {
        let vocab = Vocab::build(d.train.samples.iter().map(|s| s.question.as_str()));
        let types = QuestionTypeSet::new(d.meta.types.clone()).unwrap();
        let mut spec = ModelSpec::new(arch);
        spec.sources = d.meta.sources.clone();
        spec.text_variant = variant;
        let mut m = build_model(&spec, &vocab, &types, &d.meta.answers).unwrap();
        let before = m.frozen_table().unwrap().clone();
        train(&mut m, &d.train, &cfg(1)).unwrap();
        assert_eq!(m.frozen_table().unwrap(), &before);
    }
}

#[test]
fn every_architecture_overfits_one_sample() {
    for arch in Architecture::ALL {
        let (spec, vocab, types, answers, samples) = toy_problem(arch, 0).unwrap();
        let mut m = build_model(&spec, &vocab, &types, &answers).unwrap();
        let one = vec![samples[0].clone()];
        let c = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 1,
            ..cfg(1500)
        };
        let curve = train_with(&mut m, &one, &c, |_, _, _| Ok(())).unwrap();
        let (loss, _) = m.loss_and_grads(&[&one[0]], c.lambda).unwrap();
        assert!(loss < 0.01, "{}: final loss {loss}, curve start {}", arch.name(), curve[0]);
    }
}

#[test]
fn divergence_is_reported() {
    let (spec, vocab, types, answers, samples) = toy_problem(Architecture::CatL, 0).unwrap();
    let mut m = build_model(&spec, &vocab, &types, &answers).unwrap();
    let c = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 1e300,
        ..cfg(5)
    };
    assert!(matches!(
        train_with(&mut m, &samples, &c, |_, _, _| Ok(())),
        Err(Error::Divergence { .. })
    ));
}

#[test]
fn checkpoint_round_trip() {
    let d = routing(10);
    let dir = tempfile::tempdir().unwrap();
    for arch in [Architecture::CatLQtaM, Architecture::Cat1, Architecture::CatQt] {
        let mut m = model_for(&d, arch, 9);
        let c = TrainConfig {
            scalar_mode: ScalarMode::F32,
            ..cfg(1)
        };
        train(&mut m, &d.train, &c).unwrap();
        let path = dir.path().join(format!("{}.qtac", arch.name()));
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params().flatten(), m.params().flatten());
        assert_eq!(back.frozen_table(), m.frozen_table());
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.vocab(), m.vocab());
        let samples = m.encode(&d.test).unwrap();
        assert_eq!(
            back.predict(&samples, GateMode::Predicted).unwrap(),
            m.predict(&samples, GateMode::Predicted).unwrap()
        );
        assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let d = routing(10);
    let bytes = encode_checkpoint(&model_for(&d, Architecture::CatLQta, 0)).unwrap();
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_checkpoint(&long).is_err());
}

#[test]
fn parallel_chunked_prediction_matches_one_batch() {
    let d = routing(40);
    let m = model_for(&d, Architecture::CatLQtaM, 5);
    let samples = m.encode(&d.test).unwrap();
    let chunked = m.predict(&samples, GateMode::Predicted).unwrap();
    let refs: Vec<&EncodedSample> = samples.iter().collect();
    let whole = m.forward_batch(&refs, GateMode::Predicted).unwrap();
    for (a, b) in chunked.iter().zip(&whole) {
        assert_eq!(a.answer(), b.answer());
        let diff = a.answer_probs.iter().zip(&b.answer_probs).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

#[test]
fn unknown_labels_fail_encoding() {
    let d = routing(10);
    let m = model_for(&d, Architecture::CatLQta, 0);
    let mut ds = d.test.clone();
    ds.samples[0].answer = "mystery".into();
    assert!(matches!(m.encode(&ds), Err(Error::Data(_))));
}

#[test]
fn norm_report_identity_and_scaling() {
    use qta_core::metrics::norm_report;
    let d = routing(10);
    let mut m = model_for(&d, Architecture::CatLQta, 0);
    let samples = m.encode(&d.test).unwrap();
    let r = norm_report(&m, &samples).unwrap();
    assert_eq!(r.rows.len(), 12);
    assert!(r.rows.iter().all(|row| row.difference == 0.0 && row.mean_abs_weight == 1.0));

    let id = m.params().id("qta.w").unwrap();
    let w = m.params_mut().get_mut(id);
    for v in &mut w.data_mut()[..32 * 6] {
        *v = 2.0;
    }
    let scaled = norm_report(&m, &samples).unwrap();
    for (a, b) in r.rows.iter().zip(&scaled.rows) {
        if a.block == "resnet-like" {
            assert!((b.gated_norm - 2.0 * a.raw_norm).abs() < 1e-12);
        } else {
            assert_eq!(b.gated_norm, a.raw_norm);
        }
    }
    let csv = scaled.to_csv();
    assert_eq!(csv.lines().count(), 13);
    assert!(norm_report(&model_for(&d, Architecture::CatL, 0), &samples).is_err());
}
