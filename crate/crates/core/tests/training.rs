use bg_triplex::data::synth_dataset;
use bg_triplex::evaluation::PcchSelector;
use bg_triplex::model::{ModelConfig, ModelParams};
use bg_triplex::training::{
    adam_step, cross_validate, loss_branch, lr_at, select_genes, targets_for, train, AdamState, FoldStrategy,
    TrainConfig, TrainSlide,
};
use proptest::prelude::*;

/// Textbook bias-corrected Adam on one scalar.
fn adam_oracle(theta: &mut f64, m: &mut f64, v: &mut f64, t: i32, g: f64, lr: f64) {
    *m = 0.9 * *m + 0.1 * g;
    *v = 0.999 * *v + 0.001 * g * g;
    let mh = *m / (1.0 - 0.9f64.powi(t));
    let vh = *v / (1.0 - 0.999f64.powi(t));
    *theta -= lr * mh / (vh.sqrt() + 1e-8);
}

#[test]
fn adam_follows_hand_recurrence_on_square() {
    let mut p = vec![1.0, -3.0];
    let mut st = AdamState::new(2);
    let mut want = [(1.0, 0.0, 0.0), (-3.0, 0.0, 0.0)];
    for t in 1..=10 {
        let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        for (th, m, v) in want.iter_mut() {
            let g = 2.0 * *th;
            adam_oracle(th, m, v, t, g, 0.1);
        }
        for (got, w) in p.iter().zip(&want) {
            assert!((got - w.0).abs() <= 1e-15);
        }
    }
    // Early Adam steps move each weight by about lr regardless of scale.
    assert!((p[0] - 0.0).abs() < 1.0 && p[1] > -3.0 + 0.9);
}

#[test]
fn lr_schedule_constants() {
    let c = TrainConfig::default();
    assert_eq!([lr_at(0, &c), lr_at(50, &c), lr_at(100, &c)], [1e-4, 9e-5, 8.1e-5]);
}

fn small_model(ds: &bg_triplex::data::SpotDataset, cfg: &TrainConfig, n_genes: usize) -> ModelParams {
    ModelParams::init(ModelConfig::new(8, 2, cfg.d_context, n_genes, ds.stream_dims()), cfg.seed).unwrap()
}

#[test]
fn training_is_independent_of_thread_count() {
    let (ds, _) = synth_dataset(3, 4, 6, 0.05, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 5,
        d_context: 3,
        ..Default::default()
    };
    let sel = select_genes(&[&ds], cfg.k_genes).unwrap();
    let slide = TrainSlide {
        data: &ds,
        targets: targets_for(&ds, &sel).unwrap(),
    };
    let run_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&[slide.clone()], small_model(&ds, &cfg, 6), &cfg).unwrap())
    };
    let (a, b) = (run_with(1), run_with(3));
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
}

#[test]
fn mismatched_window_is_a_config_error() {
    let (ds, _) = synth_dataset(2, 2, 3, 0.0, 1).unwrap();
    let cfg = TrainConfig {
        d_context: 3,
        ..Default::default()
    };
    let params = ModelParams::init(ModelConfig::new(8, 2, 5, 3, ds.stream_dims()), 0).unwrap();
    let slide = TrainSlide {
        data: &ds,
        targets: targets_for(&ds, &select_genes(&[&ds], 3).unwrap()).unwrap(),
    };
    assert!(matches!(train(&[slide], params, &cfg), Err(bg_triplex::Error::Config(_))));
}

#[test]
fn every_slide_is_held_out_once() {
    let sets: Vec<_> = (1..=3).map(|s| synth_dataset(3, 3, 5, 0.05, s).unwrap().0).collect();
    let cfg = TrainConfig {
        epochs: 1,
        d_context: 3,
        ..Default::default()
    };
    let template = ModelConfig::new(8, 2, 3, 1, sets[0].stream_dims());
    let r = cross_validate(&sets, &template, &cfg, &FoldStrategy::LeaveOneSlideOut, PcchSelector::Predictive, 50)
        .unwrap();
    let held: Vec<String> = r.folds.iter().flat_map(|f| f.held_out.clone()).collect();
    assert_eq!(held, vec!["synth-1", "synth-2", "synth-3"]);
    let groups = FoldStrategy::Groups(vec!["p1".into(), "p2".into(), "p1".into()]);
    let g = cross_validate(&sets, &template, &cfg, &groups, PcchSelector::Predictive, 50).unwrap();
    assert_eq!(g.folds[0].held_out, vec!["synth-1", "synth-3"]);
    assert_eq!(g.folds.len(), 2);
}

proptest! {
    #[test]
    fn branch_loss_is_linear_in_lambda(
        p in prop::collection::vec(-3.0f64..3.0, 4),
        g in prop::collection::vec(-3.0f64..3.0, 4),
        f in prop::collection::vec(-3.0f64..3.0, 4),
        lambda in 0.0f64..=1.0,
    ) {
        let t = |v: Vec<f64>| bg_triplex::numerics::Tensor::matrix(1, 4, v).unwrap();
        let (p, g, f) = (t(p), t(g), t(f));
        let l0 = loss_branch(&p, &g, &f, 0.0).unwrap();
        let l1 = loss_branch(&p, &g, &f, 1.0).unwrap();
        let l = loss_branch(&p, &g, &f, lambda).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!((l - ((1.0 - lambda) * l0 + lambda * l1)).abs() <= 1e-12);
    }

    #[test]
    fn lr_never_increases(lr in 1e-6f64..1.0, decay in 0.1f64..1.0, step in 1usize..20, e in 0usize..200) {
        let c = TrainConfig { lr, decay, step_size: step, ..Default::default() };
        prop_assert!(lr_at(e + 1, &c) <= lr_at(e, &c));
        prop_assert_eq!(lr_at(e, &c), lr * decay.powi((e / step) as i32));
    }
}
