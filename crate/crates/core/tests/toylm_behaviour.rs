use numprobe::dataset::{generate_cross_notation, make_prompt, PromptSpec, Side, Variant};
use numprobe::probes::{self, ProbeKind};
use numprobe::tensorio::{self, TokenRole};
use numprobe::toylm::*;

fn small(seed: u64) -> ToyConfig {
    ToyConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        context_len: 96,
        seed,
    }
}

fn examples(n: usize) -> Vec<Example> {
    let data = generate_cross_notation(3, Variant::IntSci);
    Example::from_problems(&data.train[..n], &PromptSpec::zero_shot(Variant::IntSci)).unwrap()
}

#[test]
fn memorizes_a_repeated_sequence() {
    let one = examples(1).remove(0);
    let corpus = vec![one.clone(); 2_000];
    let train = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let (model, log) = train_lm(&small(1), &train, &corpus).unwrap();
    assert_eq!(log.rows.len(), 500);
    let loss = mean_lm_loss(&model, &[one], LossMode::AllTokens).unwrap();
    assert!(loss < 0.05, "loss {loss} nats/token after 500 steps");
}

#[test]
fn training_improves_and_is_deterministic() {
    let corpus = examples(400);
    let cfg = small(2);
    let before = mean_lm_loss(&ToyModel::new(cfg.clone()).unwrap(), &corpus, LossMode::AllTokens).unwrap();
    let (a, log_a) = train_lm(&cfg, &TrainConfig::default(), &corpus).unwrap();
    let (b, log_b) = train_lm(&cfg, &TrainConfig::default(), &corpus).unwrap();
    let after = mean_lm_loss(&a, &corpus, LossMode::AllTokens).unwrap();
    assert!(after < before, "{after} vs {before}");
    assert_eq!(a.params, b.params);
    assert_eq!(log_a, log_b);
    let (c, _) = train_lm(&small(3), &TrainConfig::default(), &corpus).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn states_have_model_width_and_respect_causality() {
    let model = ToyModel::new(small(4)).unwrap();
    let prompt = "Q: Which is larger, 570 or 5.8 × 10^2? A:";
    let v = hidden_states(&model, prompt, 2, TokenRole::LastPromptToken).unwrap();
    assert_eq!(v.len(), 32);
    for bad in [0, 3] {
        assert!(matches!(
            hidden_states(&model, prompt, bad, TokenRole::LastPromptToken),
            Err(ToyError::LayerOutOfRange { .. })
        ));
    }
    // same prefix, different continuation: states up to the shared prefix agree
    let other = "Q: Which is larger, 570 or 9.1 × 10^7? A:";
    let shared = prompt.chars().zip(other.chars()).take_while(|(a, b)| a == b).count();
    for layer in 1..=2 {
        for pos in [0, shared / 2, shared - 1] {
            assert_eq!(
                hidden_state_at(&model, prompt, layer, pos).unwrap(),
                hidden_state_at(&model, other, layer, pos).unwrap()
            );
        }
        assert_ne!(
            hidden_state_at(&model, prompt, layer, shared).unwrap(),
            hidden_state_at(&model, other, layer, shared).unwrap()
        );
    }
    // the numeral role reads the last digit of the second operand
    let at_numeral = hidden_states(&model, prompt, 1, TokenRole::LastNumeralToken).unwrap();
    let pos = prompt.chars().count() - "? A:".len() - 1;
    assert_eq!(at_numeral, hidden_state_at(&model, prompt, 1, pos).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let (mut model, _) = train_lm(&small(5), &TrainConfig::default(), &examples(64)).unwrap();
    init_probe_head(&mut model, &examples(200), 0.9, 1.0, 1.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ToyError::Checkpoint(_))));
}

/// Exported states survive the tensor file format and give the same probe.
#[test]
fn export_round_trip_gives_identical_probe() {
    let model = ToyModel::new(small(6)).unwrap();
    let data = generate_cross_notation(3, Variant::IntSci);
    let spec = PromptSpec::zero_shot(Variant::IntSci);
    let problems = &data.train[..300];
    let dir = tempfile::tempdir().unwrap();
    for role in [TokenRole::LastPromptToken, TokenRole::LastNumeralToken] {
        let mats = export_hidden_states(&model, problems, &spec, &[1, 2], role).unwrap();
        assert_eq!(mats.len(), 2);
        let rows = if role == TokenRole::LastNumeralToken { 600 } else { 300 };
        assert_eq!((mats[1].n, mats[1].d, mats[1].layer), (rows, 32, 2));
        let path = dir.path().join(format!("{role}.bin"));
        tensorio::write_matrix(&mats[1], &path).unwrap();
        let back = tensorio::read_matrix(&path).unwrap();
        assert_eq!(back, mats[1]);
        let kind = if role == TokenRole::LastNumeralToken {
            ProbeKind::MagnitudeReg
        } else {
            ProbeKind::Classifier
        };
        let p1 = probes::fit_probe(&mats[1], kind, 1.0).unwrap();
        let p2 = probes::fit_probe(&back, kind, 1.0).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(
            probes::evaluate_probe(&p1, &mats[1]).unwrap(),
            probes::evaluate_probe(&p2, &back).unwrap()
        );
    }
    // first numeral row of each problem carries the first operand's magnitude
    let mats = export_hidden_states(&model, problems, &spec, &[1], TokenRole::LastNumeralToken).unwrap();
    assert_eq!(mats[0].labels[0].value_log2, Some(problems[0].a.log2_magnitude()));
    assert_eq!(mats[0].labels[1].value_log2, Some(problems[0].b.log2_magnitude()));
}

#[test]
fn finetune_protocol() {
    let train = examples(256);
    let (base, _) = train_lm(&small(7), &TrainConfig::default(), &train).unwrap();

    let probe_cfg = FinetuneConfig {
        epochs: 2,
        ..FinetuneConfig::default()
    };
    assert!(matches!(
        finetune(&base, &train, &probe_cfg),
        Err(ToyError::UninitializedProbe)
    ));
    let negative = FinetuneConfig {
        beta: -1.0,
        ..probe_cfg.clone()
    };
    assert!(matches!(
        finetune(&base, &train, &negative),
        Err(ToyError::InvalidConfig(_))
    ));

    let mut headed = base.clone();
    let init = init_probe_head(&mut headed, &train, 0.9, 1.0, 1.0).unwrap();
    assert_eq!(init.layer, 2);
    let plain_cfg = FinetuneConfig {
        beta: 0.0,
        ..probe_cfg.clone()
    };
    let (plain, plain_log) = finetune(&headed, &train, &plain_cfg).unwrap();
    let (probed, probed_log) = finetune(&headed, &train, &probe_cfg).unwrap();
    // β=0 is plain finetuning: total equals the LM term on every step
    assert!(plain_log.rows.iter().all(|r| r.l_total == r.l_lm));
    // both arms take the same first step count from the same start
    assert_eq!(plain_log.rows.len(), probed_log.rows.len());
    assert_ne!(plain.params, probed.params);
    let cls = probed_log.epoch_cls();
    assert!(cls.last().unwrap() < cls.first().unwrap(), "{cls:?}");
    // rerun is bit-identical
    let (again, _) = finetune(&headed, &train, &probe_cfg).unwrap();
    assert_eq!(again.params, probed.params);
}

#[test]
fn verbal_eval_with_reference_generators() {
    let data = generate_cross_notation(8, Variant::IntSci);
    let spec = PromptSpec::zero_shot(Variant::IntSci);
    let test = &data.test[..400];
    let second = test.iter().filter(|p| p.gold == Side::Second).count() as f64 / test.len() as f64;
    let echo = verbal_eval(&EchoModel, test, &spec).unwrap();
    assert_eq!(echo.accuracy, second);
    assert_eq!(echo.unparsed, 0);
    assert_eq!(verbal_eval(&GoldOracle, test, &spec).unwrap().accuracy, 1.0);

    let scored = score_responses(test.iter().take(3).map(|p| (p, "I don't know".to_string())));
    assert_eq!((scored.accuracy, scored.unparsed), (0.0, 3));
    assert!(scored.predictions().iter().all(Option::is_none));
}

#[test]
fn greedy_decoding_of_a_trained_model_is_reproducible() {
    let (model, _) = train_lm(&small(9), &TrainConfig::default(), &examples(128)).unwrap();
    let data = generate_cross_notation(3, Variant::IntSci);
    let spec = PromptSpec::zero_shot(Variant::IntSci);
    let a = verbal_eval(&model, &data.test[..20], &spec).unwrap();
    let b = verbal_eval(&model, &data.test[..20], &spec).unwrap();
    assert_eq!(a.to_records(), b.to_records());
    for r in &a.records {
        assert!(r.response.chars().count() <= MAX_ANSWER_TOKENS);
        assert!(!r.response.contains('\n'));
    }
    assert!(make_prompt(&data.test[0], &spec).unwrap().ends_with("A:"));
}
