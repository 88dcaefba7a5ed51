use crossformer_cli::config::RunConfig;
use crossformer_core::dpb::PositionKind;
use crossformer_core::model::{pyramid, AttentionMode, ModelSpec};
use crossformer_core::train::TrainConfig;
use proptest::prelude::*;

fn run_config() -> impl Strategy<Value = RunConfig> {
    let model = (
        "[A-Za-z][A-Za-z0-9_-]{0,10}",
        1usize..4,
        1usize..3,
        prop::collection::vec((1usize..3, 1usize..4, 1usize..4), 4),
        prop::sample::select(vec![PositionKind::Ape, PositionKind::Rpb, PositionKind::Dpb, PositionKind::DpbResidual]),
        prop::sample::select(vec![AttentionMode::Lsda, AttentionMode::SdaOnly, AttentionMode::PvtLike]),
        (1usize..4, 2usize..20, 0.0f64..0.9, 1usize..5),
    )
        .prop_map(|(name, heads0, base, rows, position, attention, (cin, classes, dp, ratio))| {
            let d0 = 8 * heads0 * base;
            let rows = core::array::from_fn(|s| {
                let (blocks, g, i) = rows[s];
                (d0 << s, heads0 << s, blocks, g, i)
            });
            ModelSpec {
                name,
                stages: pyramid(&[4, 8], &[2, 4], rows).unwrap(),
                in_channels: cin,
                num_classes: classes,
                position,
                attention,
                input_size: (64, 128),
                drop_path: dp,
                mlp_ratio: ratio,
            }
        });
    let train = (any::<u64>(), 1usize..64, 1usize..9, 0usize..600, 0usize..8, 1e-6f64..1.0, 0.0f64..0.2, any::<bool>())
        .prop_map(|(seed, samples, classes, steps, batch, lr, wd, stop)| TrainConfig {
            seed,
            samples,
            classes,
            steps,
            batch,
            lr,
            min_lr: lr / 7.0,
            warmup: steps / 10,
            weight_decay: wd,
            stop_at_full_accuracy: stop,
        });
    (model, train).prop_map(|(model, train)| RunConfig { model, train })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn emit_then_parse_is_identity(cfg in run_config()) {
        let text = cfg.emit();
        let back: RunConfig = text.parse().unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.emit(), text);
    }
}

#[test]
fn comments_and_blank_lines() {
    let cfg: RunConfig = "# toy with APE\n\nvariant = toy\n  bias = ape  \n# done\n".parse().unwrap();
    assert_eq!(cfg.model.position, PositionKind::Ape);
}

#[test]
fn loads_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    let cfg = RunConfig::variant(crossformer_core::model::Variant::Toy, crossformer_core::model::Task::Classification);
    std::fs::write(&path, cfg.emit()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}
