use hydra_peft::autodiff::Op;
use hydra_peft::train::{finetune, pretrain, Split, SyntheticTaskSpec, TrainConfig};
use hydra_peft::{AdapterSpec, MicroTransformer, Mode, ModelConfig, Placement, Role, Rng, Site};

fn small_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        mlp_hidden: 32,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn tokens(n: usize, seed: u64, cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            (0..cfg.seq_len)
                .map(|p| if p == 0 { 0 } else { 1 + rng.below(cfg.vocab - 1) })
                .collect()
        })
        .collect()
}

fn quick(epochs: usize, n: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        train_examples: n,
        eval_examples: 32,
        ..TrainConfig::finetune_default()
    }
}

#[test]
fn installing_adapters_leaves_logits_unchanged() {
    for seed in 0..5 {
        let cfg = small_config();
        let base = MicroTransformer::build(&cfg.without_adapters(), &mut Rng::new(seed)).unwrap();
        let x = tokens(4, seed + 10, &cfg);
        let before = base.logits(&x).unwrap();
        for placement in [Placement::projections(), Placement::of(&[Site::MsaQkv, Site::MlpOut])] {
            for spec in [AdapterSpec::lora(4), AdapterSpec::seq_lora(4), AdapterSpec::hydra(4)] {
                let mut m = base.clone();
                m.install_adapters(&placement, &spec, &mut Rng::new(seed + 99)).unwrap();
                m.set_mode(Mode::Finetune);
                assert_eq!(m.logits(&x).unwrap(), before);
            }
        }
    }
}

#[test]
fn build_is_deterministic_and_placement_independent() {
    let cfg = small_config();
    let a = MicroTransformer::build(&cfg, &mut Rng::new(3)).unwrap();
    let b = MicroTransformer::build(&cfg, &mut Rng::new(3)).unwrap();
    assert_eq!(a, b);
    let plain = MicroTransformer::build(&cfg.without_adapters(), &mut Rng::new(3)).unwrap();
    assert_eq!(a.blocks[0].proj.base(), plain.blocks[0].proj.base());
    assert_eq!(a.head, plain.head);
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = small_config();
    let model = MicroTransformer::build(&cfg, &mut Rng::new(1)).unwrap();
    let mut cx = model.context(false, Rng::new(0));
    let out = model.forward(&mut cx, &tokens(3, 2, &cfg), false).unwrap();
    assert_eq!(out.attention.len(), cfg.blocks * 3 * cfg.heads);
    for &p in &out.attention {
        assert!(matches!(cx.tape.op(p), Op::SoftmaxRows));
        let probs = cx.tape.value(p);
        for r in 0..probs.rows() {
            let s: f64 = probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(probs.row(r).iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn finetune_leaves_frozen_weights_untouched() {
    let cfg = small_config();
    let mut model = MicroTransformer::build(&cfg, &mut Rng::new(4)).unwrap();
    model.set_mode(Mode::Finetune);
    let before = model.clone();
    let task = SyntheticTaskSpec::target();
    let train = task.generate(Split::Train, 64).unwrap();
    let eval = task.generate(Split::Test, 32).unwrap();
    finetune(&mut model, &train, &eval, &quick(2, 64)).unwrap();

    let after = model.named_params();
    let mut changed_adapter = false;
    for ((name, old, role), (_, new, _)) in before.named_params().into_iter().zip(after) {
        match role {
            Role::Frozen => assert_eq!(old, new, "{name} moved"),
            Role::Adapter => changed_adapter |= old != new,
            Role::Head => {}
        }
    }
    assert!(changed_adapter);
}

#[test]
fn fold_all_matches_trained_model() {
    let cfg = ModelConfig::default();
    let mut model = MicroTransformer::build(&cfg, &mut Rng::new(8)).unwrap();
    model.set_mode(Mode::Finetune);
    let task = SyntheticTaskSpec::target();
    let train = task.generate(Split::Train, 64).unwrap();
    finetune(&mut model, &train, &task.generate(Split::Test, 16).unwrap(), &quick(2, 64)).unwrap();

    let folded = model.fold_all();
    assert!(folded.adapted_layers().is_empty());
    assert_eq!(folded.param_count(Role::Adapter), 0);
    let probes = tokens(64, 5, &cfg);
    let diff = folded.logits(&probes).unwrap().max_abs_diff(&model.logits(&probes).unwrap()).unwrap();
    assert!(diff <= 1e-10, "{diff:e}");
}

#[test]
fn training_reduces_loss() {
    let cfg = small_config();
    let mut model = MicroTransformer::build(&cfg.without_adapters(), &mut Rng::new(2)).unwrap();
    let task = SyntheticTaskSpec::source();
    let train = task.generate(Split::Train, 128).unwrap();
    let eval = task.generate(Split::Test, 64).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        train_examples: 128,
        ..TrainConfig::pretrain_default()
    };
    let rec = pretrain(&mut model, &train, &eval, &cfg).unwrap();
    assert!(rec.train_loss[2] < rec.train_loss[0], "{:?}", rec.train_loss);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let run = || {
        let cfg = small_config();
        let mut model = MicroTransformer::build(&cfg, &mut Rng::new(6)).unwrap();
        model.set_mode(Mode::Finetune);
        let task = SyntheticTaskSpec::target();
        let train = task.generate(Split::Train, 64).unwrap();
        let eval = task.generate(Split::Test, 32).unwrap();
        let rec = finetune(&mut model, &train, &eval, &quick(2, 64)).unwrap();
        (rec.train_loss, rec.eval_accuracy, model)
    };
    let (l1, a1, m1) = run();
    let (l2, a2, m2) = run();
    assert_eq!(l1, l2);
    assert_eq!(a1, a2);
    assert_eq!(m1, m2);
}

#[test]
fn pretrain_mode_ignores_adapters() {
    let cfg = small_config();
    let mut model = MicroTransformer::build(&cfg, &mut Rng::new(9)).unwrap();
    let h = model.hydra_mut(0, Site::MlpOut).unwrap();
    let up = Rng::new(1).gaussian_matrix(16, 2, 1.0);
    h.set_up_projections(Some(up.clone()), Some(up)).unwrap();
    let x = tokens(2, 1, &cfg);
    let plain = model.logits(&x).unwrap();
    model.set_mode(Mode::Finetune);
    assert_ne!(model.logits(&x).unwrap(), plain);
}
