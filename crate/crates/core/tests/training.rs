use dseb::audio::FrontendConfig;
use dseb::autodiff::{AdamState, Tape, Tensor};
use dseb::data::{synth_generate, SynthConfig, CLASS_COUNTS};
use dseb::models::{
    embed_set, encode, summed_cross_entropy, train_adversarial, train_baseline, train_bottleneck,
    AdversaryParams, BottleneckConfig, EncoderParams, EncoderShape, ModelInput, ParamTree,
    TrainConfig, TrainItem, TrainMode, TrainingSet,
};
use dseb::rng::{stream, stream_rng};
use dseb::Error;

fn synth_set(n_speakers: usize, seed: u64) -> TrainingSet {
    let synth = synth_generate(&SynthConfig {
        n_speakers,
        utterances_per_speaker: 4,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    TrainingSet {
        items: synth
            .utterances
            .iter()
            .map(|u| TrainItem {
                id: u.id.clone(),
                speaker_id: synth.speakers[u.speaker].id.clone(),
                input: ModelInput::Features(u.features.clone()),
                labels: Some(synth.speakers[u.speaker].demographics.class_ids()),
            })
            .collect(),
    }
}

fn small_config(mode: TrainMode, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(mode);
    cfg.encoder = EncoderShape {
        input_dim: 16,
        hidden: 16,
        embed_dim: 12,
    };
    cfg.projection_hidden = 16;
    cfg.projection_dim = 8;
    cfg.batch_size = 32;
    cfg.epochs = epochs;
    cfg.learning_rate = 1e-3;
    cfg.seed = 5;
    cfg
}

fn bottleneck_mode(k: usize, lambdas: [f64; 3], gamma: f64) -> TrainMode {
    TrainMode::Bottleneck(BottleneckConfig {
        k,
        lambdas,
        gamma,
        freeze_encoder: true,
    })
}

#[test]
fn zero_epochs_return_the_seeded_initialization() {
    let cfg = small_config(TrainMode::Baseline, 0);
    let model = train_baseline(&synth_set(20, 1), &cfg).unwrap();
    let init = EncoderParams::init(cfg.encoder, &mut stream_rng(cfg.seed, stream::ENCODER_INIT));
    assert_eq!(model.encoder, init);
}

#[test]
fn contrastive_loss_falls_on_clustered_data() {
    let model = train_baseline(&synth_set(30, 2), &small_config(TrainMode::Baseline, 30)).unwrap();
    let epochs = &model.trace.epochs;
    assert!(epochs.last().unwrap().contrastive < epochs[0].contrastive);
}

#[test]
fn every_mode_is_deterministic() {
    let set = synth_set(20, 3);
    let base = small_config(TrainMode::Baseline, 3);
    assert_eq!(
        train_baseline(&set, &base).unwrap(),
        train_baseline(&set, &base).unwrap()
    );

    let adv = small_config(TrainMode::Adversarial { lambda_adv: 1.0 }, 3);
    assert_eq!(
        train_adversarial(&set, &adv).unwrap(),
        train_adversarial(&set, &adv).unwrap()
    );

    let pretrained = train_baseline(&set, &base).unwrap().encoder;
    let bn = small_config(bottleneck_mode(4, [0.5, 0.05, 0.05], 1.0), 3);
    assert_eq!(
        train_bottleneck(&set, &pretrained, &bn).unwrap(),
        train_bottleneck(&set, &pretrained, &bn).unwrap()
    );
}

#[test]
fn zero_lambda_matches_the_baseline_trajectory() {
    let set = synth_set(20, 4);
    for adversary_steps in [0, 2] {
        let mut base = small_config(TrainMode::Baseline, 4);
        base.adversary_steps = adversary_steps;
        let mut adv = base.clone();
        adv.mode = TrainMode::Adversarial { lambda_adv: 0.0 };
        let a = train_baseline(&set, &base).unwrap();
        let b = train_adversarial(&set, &adv).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.head, b.head);
    }
}

#[test]
fn adversarial_training_needs_every_label() {
    let mut set = synth_set(10, 5);
    set.items[3].labels = None;
    let missing = set.items[3].id.clone();
    let cfg = small_config(TrainMode::Adversarial { lambda_adv: 1.0 }, 1);
    match train_adversarial(&set, &cfg) {
        Err(Error::MissingLabel(id)) => assert_eq!(id, missing),
        other => panic!("expected a missing-label error, got {other:?}"),
    }
}

#[test]
fn adversary_alone_recovers_planted_gender() {
    let set = synth_set(60, 6);
    let cfg = small_config(TrainMode::Baseline, 0);
    let encoder = EncoderParams::init(cfg.encoder, &mut stream_rng(6, stream::ENCODER_INIT));
    let z = embed_set(&encoder, &set, &FrontendConfig::default(), 0).unwrap();
    let labels: Vec<[usize; 3]> = set.items.iter().map(|i| i.labels.unwrap()).collect();
    let weights = set.class_weights();

    let mut adversaries = AdversaryParams::init(
        z.cols(),
        CLASS_COUNTS,
        &mut stream_rng(6, stream::ADVERSARY_INIT),
    );
    let mut adam = AdamState::new(1e-2, adversaries.named("").into_iter().map(|(_, t)| t));
    for _ in 0..300 {
        let mut tape = Tape::new();
        let adv = adversaries.bind(&mut tape, true);
        let input = tape.constant(z.clone());
        let logits = adv.logits(&mut tape, input, [1.0; 3]).unwrap();
        let loss = summed_cross_entropy(&mut tape, logits, &labels, &weights).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g: Vec<Tensor> = adv
            .named("")
            .into_iter()
            .map(|(_, &v)| grads.get_or_zeros(v, tape.value(v)))
            .collect();
        adam.step(&mut adversaries.params_mut(), &g);
    }

    let mut tape = Tape::new();
    let adv = adversaries.bind(&mut tape, false);
    let input = tape.constant(z);
    let logits = adv.logits(&mut tape, input, [1.0; 3]).unwrap();
    let gender_logits = tape.value(logits[0]);
    let correct = (0..gender_logits.rows())
        .filter(|&i| {
            let row = gender_logits.row(i);
            usize::from(row[1] > row[0]) == labels[i][0]
        })
        .count();
    let accuracy = correct as f64 / labels.len() as f64;
    assert!(accuracy >= 0.95, "adversary training accuracy {accuracy}");
}

#[test]
fn reversed_gradient_opposes_the_adversary() {
    // One toy step: the adversary-side gradient on the shared input and the
    // gradient the encoder receives through the GRL point in opposite
    // directions, and stepping along the latter raises the adversary loss.
    let set = synth_set(10, 7);
    let z = embed_set(
        &EncoderParams::init(
            small_config(TrainMode::Baseline, 0).encoder,
            &mut stream_rng(7, 1),
        ),
        &set,
        &FrontendConfig::default(),
        0,
    )
    .unwrap();
    let labels: Vec<[usize; 3]> = set.items.iter().map(|i| i.labels.unwrap()).collect();
    let weights = set.class_weights();
    let adversaries = AdversaryParams::init(z.cols(), CLASS_COUNTS, &mut stream_rng(7, 3));
    let gradient = |z: &Tensor, lambda: Option<f64>| {
        let mut tape = Tape::new();
        let adv = adversaries.bind(&mut tape, false);
        let zv = tape.param(z.clone());
        let logits = match lambda {
            Some(l) => adv.logits(&mut tape, zv, [l; 3]).unwrap(),
            None => {
                let heads: Vec<_> = adv
                    .heads
                    .iter()
                    .map(|h| h.forward(&mut tape, zv).unwrap())
                    .collect();
                [heads[0], heads[1], heads[2]]
            }
        };
        let loss = summed_cross_entropy(&mut tape, logits, &labels, &weights).unwrap();
        let value = tape.value(loss).item();
        (value, tape.backward(loss).unwrap().get(zv).unwrap().clone())
    };
    let (before, adversary_side) = gradient(&z, None);
    let (_, encoder_side) = gradient(&z, Some(1.0));
    let dot: f64 = adversary_side
        .data()
        .iter()
        .zip(encoder_side.data())
        .map(|(a, b)| a * b)
        .sum();
    assert!(dot < 0.0);

    let mut stepped = z.clone();
    stepped
        .data_mut()
        .iter_mut()
        .zip(encoder_side.data())
        .for_each(|(v, g)| *v -= 1e-3 * g);
    let (after, _) = gradient(&stepped, None);
    assert!(after > before, "adversary loss {before} -> {after}");
}

#[test]
fn bottleneck_training_fits_the_demo_branch_and_decorrelates() {
    let set = synth_set(40, 8);
    let pretrained = train_baseline(&set, &small_config(TrainMode::Baseline, 5))
        .unwrap()
        .encoder;
    let cfg = small_config(bottleneck_mode(4, [0.0; 3], 1.0), 30);
    let epochs = train_bottleneck(&set, &pretrained, &cfg)
        .unwrap()
        .trace
        .epochs;
    let (first, last) = (&epochs[0], epochs.last().unwrap());
    assert!(
        last.demo < first.demo,
        "demo loss {} -> {}",
        first.demo,
        last.demo
    );
    assert!(
        last.covariance < first.covariance,
        "covariance {} -> {}",
        first.covariance,
        last.covariance
    );
}

#[test]
fn bottleneck_rejects_k_at_least_d() {
    let set = synth_set(10, 9);
    let pretrained = train_baseline(&set, &small_config(TrainMode::Baseline, 0))
        .unwrap()
        .encoder;
    let cfg = small_config(bottleneck_mode(12, [0.5, 0.05, 0.05], 1.0), 1);
    assert!(matches!(
        train_bottleneck(&set, &pretrained, &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn pooling_ignores_frame_order_and_duplication() {
    let set = synth_set(4, 10);
    let encoder = EncoderParams::init(
        small_config(TrainMode::Baseline, 0).encoder,
        &mut stream_rng(10, 1),
    );
    let ModelInput::Features(frames) = &set.items[0].input else {
        unreachable!()
    };
    let spec = |t: Tensor| dseb::audio::LogMelSpectrogram {
        frames: t,
        frame_rate: 100.0,
    };
    let rows: Vec<Vec<f64>> = (0..frames.rows()).map(|r| frames.row(r).to_vec()).collect();
    let reference = encode(&spec(frames.clone()), &encoder).unwrap();

    let mut reversed = rows.clone();
    reversed.reverse();
    let doubled: Vec<Vec<f64>> = rows.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
    for variant in [reversed, doubled] {
        let z = encode(&spec(Tensor::from_rows(&variant).unwrap()), &encoder).unwrap();
        for (a, b) in z.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
