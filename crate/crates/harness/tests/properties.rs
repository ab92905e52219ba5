use mist_core::features::TaskKind;
use mist_core::selection::SelectorKind;
use mist_harness::cost::cost_estimate;
use mist_harness::{Ablation, ModelKind, TrainConfig};
use proptest::prelude::*;

fn model_kind() -> impl Strategy<Value = ModelKind> {
    proptest::sample::select(ModelKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_toml_round_trip(
        model in model_kind(),
        multi in any::<bool>(),
        segments in 2usize..6,
        t in 1usize..5,
        lr in 1e-5f64..1e-1,
        wd in 0.0f64..0.1,
        seed in 0..=i64::MAX as u64,
        noise in 0.0f64..0.5,
    ) {
        let cfg = TrainConfig {
            model,
            task: if multi { TaskKind::MultiEventOrder } else { TaskKind::SingleEvent },
            segments,
            frames: segments * t,
            lr,
            weight_decay: wd,
            seed,
            noise_std: noise,
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn mist_is_cheaper_than_dense_attention(
        segments in 2usize..9,
        t in 1usize..5,
        patches in 4usize..17,
        top_j in 1usize..4,
        layers in 1usize..3,
    ) {
        let cfg = TrainConfig {
            segments,
            frames: segments * t,
            patches,
            top_k: 1,
            top_j,
            layers,
            ..TrainConfig::default()
        };
        let r = cost_estimate(&cfg).unwrap();
        prop_assert_eq!(r.n_mist, segments + t * top_j + cfg.words);
        prop_assert_eq!(r.n_dense, segments * t * patches + cfg.words);
        // Quadratic cost is monotone in the token count.
        if layers * r.n_mist * r.n_mist < r.n_dense * r.n_dense {
            prop_assert!(r.quadratic_macs < r.dense_quadratic_macs);
        }
    }

    #[test]
    fn ablated_token_counts(top_k in 1usize..3, top_j in 1usize..6) {
        let base = TrainConfig { top_k, top_j, ..TrainConfig::default() };
        let (k, t, n, m) = (8, 4, 16, 8);
        let tokens = |ablation| cost_estimate(&TrainConfig { ablation, ..base.clone() }).unwrap().n_mist;
        prop_assert_eq!(tokens(Ablation::None), k + top_k * t * top_j + m);
        prop_assert_eq!(tokens(Ablation::NoSs), k * t * top_j + m);
        prop_assert_eq!(tokens(Ablation::NoRs), k + top_k * t * n + m);
        prop_assert_eq!(tokens(Ablation::NoSta), k + top_k * t * top_j);
    }
}

#[test]
fn invalid_combinations_rejected() {
    let huge_seed = TrainConfig {
        seed: u64::MAX,
        ..TrainConfig::default()
    };
    assert!(huge_seed.validate().is_err());
    let ablated_baseline = TrainConfig {
        model: ModelKind::Meanpool,
        ablation: Ablation::NoSs,
        ..TrainConfig::default()
    };
    assert!(ablated_baseline.validate().is_err());
    let too_many = TrainConfig {
        selector: SelectorKind::GumbelWithoutReplacement,
        top_j: 17,
        ..TrainConfig::default()
    };
    assert!(too_many.validate().is_err());
    let uneven = TrainConfig {
        frames: 30,
        ..TrainConfig::default()
    };
    assert!(uneven.validate().is_err());
}
