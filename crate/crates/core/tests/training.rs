use fsner::corpus::{parse_conll, Schema, TaggedCorpus};
use fsner::optim::{adam_step, Block, OptimizerState};
use fsner::synth::{learnability_world, transfer_benchmark, Generation};
use fsner::training::{
    batch_gradient, build_vocab, fresh_checkpoint, pretrain_transfer, run_scheme, self_train, train_linear, Scheme,
    TrainConfig,
};
use fsner::{Checkpoint, Error, Head, Parallelism};

fn small_config(scheme: Scheme, seed: u64) -> TrainConfig {
    TrainConfig {
        scheme,
        learning_rate: 0.03,
        epochs: 2,
        batch_size: 4,
        embed_dim: 8,
        hidden_dim: 12,
        episode_types: 2,
        support_per_type: 1,
        query_per_type: 1,
        source_epochs: Some(1),
        ..TrainConfig::full_data(seed)
    }
}

fn unlabeled_text(corpus: &TaggedCorpus) -> Vec<Vec<String>> {
    corpus.sentences().iter().map(|s| s.tokens().to_vec()).collect()
}

#[test]
fn every_scheme_is_deterministic() {
    let bench = transfer_benchmark(5);
    let labeled = fsner::corpus::sample_fewshot(&bench.target_train, 2, 1).unwrap();
    let unlabeled = unlabeled_text(&bench.target_test.with_sentences(bench.target_test.sentences()[..30].to_vec()));
    let source = bench.source.with_sentences(bench.source.sentences()[..60].to_vec());
    for scheme in Scheme::ALL {
        let config = small_config(scheme, 9);
        let a = run_scheme(&labeled, Some(&source), Some(&unlabeled), &config).unwrap();
        let b = run_scheme(&labeled, Some(&source), Some(&unlabeled), &config).unwrap();
        assert_eq!(a.checkpoint.to_json(), b.checkpoint.to_json(), "{scheme}");
        assert_eq!(a.stages, b.stages, "{scheme}");
        assert!(a.stages.iter().all(|s| s.losses.iter().all(|l| l.is_finite())));
        let other = run_scheme(&labeled, Some(&source), Some(&unlabeled), &small_config(scheme, 10)).unwrap();
        assert_ne!(a.checkpoint.to_json(), other.checkpoint.to_json(), "{scheme}");
    }
}

#[test]
fn zero_lambda_self_training_is_supervised_training() {
    let world = learnability_world();
    let labeled = world.corpus(12, &Generation::default(), 1);
    let unlabeled = unlabeled_text(&world.corpus(40, &Generation::default(), 2));
    let config = TrainConfig {
        lambda_u: 0.0,
        ..small_config(Scheme::LcSt, 3)
    };
    let vocab = build_vocab(labeled.sentences().iter().map(|s| s.tokens()).chain(unlabeled.iter().map(Vec::as_slice)));
    let init = fresh_checkpoint(vocab, labeled.labels(), &config).unwrap();
    let st = self_train(&labeled, &unlabeled, &config, None).unwrap();
    let sup = train_linear(&labeled, &config, Some(&init)).unwrap();
    assert_eq!(st.student.checkpoint, sup.checkpoint);
    assert_eq!(st.student.checkpoint.to_json(), sup.checkpoint.to_json());

    // Empty unlabeled text reduces to plain supervised training as well.
    let st = self_train(&labeled, &[], &TrainConfig { lambda_u: 0.5, ..config.clone() }, None).unwrap();
    let sup = train_linear(&labeled, &TrainConfig { lambda_u: 0.5, ..config }, None).unwrap();
    assert_eq!(st.student.checkpoint.to_json(), sup.checkpoint.to_json());
}

#[test]
fn gradient_descent_decreases_loss() {
    let corpus = parse_conll("John B-PER\nlives O\nin O\nParis B-LOC\n\nthe O\nACME B-ORG\nboard O\n\n", Schema::Bio).unwrap();
    let config = TrainConfig {
        embed_dim: 6,
        hidden_dim: 8,
        ..TrainConfig::full_data(2)
    };
    let ckpt = fresh_checkpoint(build_vocab(corpus.sentences().iter().map(|s| s.tokens())), corpus.labels(), &config).unwrap();
    let mut encoder = ckpt.encoder.clone();
    let Head::Linear(mut head) = ckpt.head.clone() else { unreachable!() };
    let lr = 0.01;
    let mut last = f64::INFINITY;
    for _ in 0..20 {
        let g = batch_gradient(&encoder, &head, corpus.sentences(), false, Parallelism::Sequential).unwrap();
        let loss = g.loss / g.tokens as f64;
        assert!(loss < last, "loss went from {last} to {loss}");
        last = loss;
        let scale = lr / g.tokens as f64;
        let dense = [
            g.encoder.dense_embedding(encoder.vocab().rows(), encoder.embed_dim()),
            g.encoder.context_weights.clone(),
            g.encoder.context_bias.clone(),
        ];
        for ((_, values), grad) in encoder.blocks_mut().into_iter().zip(&dense) {
            values.iter_mut().zip(grad).for_each(|(v, d)| *v -= scale * d);
        }
        for ((_, values), grad) in head.blocks_mut().into_iter().zip([&g.head_weights, &g.head_bias]) {
            values.iter_mut().zip(grad).for_each(|(v, d)| *v -= scale * d);
        }
    }
}

#[test]
fn training_reduces_loss_with_adam() {
    let corpus = learnability_world().corpus(60, &Generation::default(), 8);
    let report = train_linear(&corpus, &small_config(Scheme::Lc, 1), None).unwrap();
    assert_eq!(report.losses.len(), 3);
    assert!(report.losses[2] < report.losses[0]);
    assert_eq!(report.steps, 2 * 15);
}

#[test]
fn stages_chain_through_checkpoints() {
    let bench = transfer_benchmark(2);
    let source = bench.source.with_sentences(bench.source.sentences()[..80].to_vec());
    let labeled = fsner::corpus::sample_fewshot(&bench.target_train, 2, 0).unwrap();
    let config = small_config(Scheme::LcNsp, 4);
    let transfer = pretrain_transfer(&source, &labeled, &config).unwrap();
    assert_eq!(transfer.target.checkpoint.tags(), labeled.labels().tag_vocabulary());

    // A transferred checkpoint can seed self-training directly.
    let unlabeled = unlabeled_text(&bench.target_test);
    let st = self_train(&labeled, &unlabeled[..20], &config, Some(&transfer.target.checkpoint)).unwrap();
    assert_eq!(st.soft_labeled, 20);
    assert_eq!(st.teacher.checkpoint.encoder.vocab(), transfer.target.checkpoint.encoder.vocab());
}

#[test]
fn checkpoints_roundtrip_bit_exactly() {
    let corpus = learnability_world().corpus(20, &Generation::default(), 1);
    let ckpt = train_linear(&corpus, &small_config(Scheme::Lc, 7), None).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_json(), ckpt.to_json());
}

#[test]
fn non_finite_gradients_are_rejected() {
    let mut values = vec![1.0, 2.0];
    let grad = vec![0.5, f64::NAN];
    let mut state = OptimizerState::new(0.1, 0.0, 10).unwrap();
    let err = adam_step(
        &mut state,
        &mut [Block {
            name: "w",
            values: &mut values,
            grad: &grad,
        }],
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { ref block } if block == "w"));
    assert!(err.is_numeric());
    assert_eq!(values, [1.0, 2.0]);
    assert_eq!(state.step(), 0);
}

#[test]
fn student_matches_or_beats_teacher_on_average() {
    let bench = transfer_benchmark(0);
    let (mut teacher, mut student) = (0.0, 0.0);
    for seed in 0..10 {
        let labeled = fsner::corpus::sample_fewshot(&bench.target_train, 5, seed).unwrap();
        let unlabeled: Vec<Vec<String>> = bench
            .target_train
            .sentences()
            .iter()
            .filter(|s| !labeled.sentences().contains(s))
            .take(10 * labeled.len())
            .map(|s| s.tokens().to_vec())
            .collect();
        let config = TrainConfig {
            learning_rate: 0.03,
            ..TrainConfig::five_shot(seed)
        };
        let r = self_train(&labeled, &unlabeled, &config, None).unwrap();
        let f1 = |c: &Checkpoint| {
            let tagger = fsner::Tagger::from_checkpoint(c, None).unwrap();
            fsner::eval::evaluate(&tagger, &bench.target_test, Schema::Bio).unwrap().f1
        };
        teacher += f1(&r.teacher.checkpoint);
        student += f1(&r.student.checkpoint);
    }
    assert!(student >= teacher, "student {} < teacher {}", student / 10.0, teacher / 10.0);
}
