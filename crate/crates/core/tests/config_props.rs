use hypercae::config::RunConfig;
use hypercae::layers::TapPoint;
use hypercae::network::Fusion;
use proptest::prelude::*;

fn run_config() -> impl Strategy<Value = RunConfig> {
    (
        (1usize..4, 1usize..4, any::<bool>(), any::<bool>()),
        (1e-4f64..1.0, 1usize..100, any::<u64>(), 0usize..20),
        (8usize..64, 0usize..50, 0usize..3, 0.0f64..=1.0, -1.0f64..=1.0),
    )
        .prop_map(|((m, w, top, pre), (lr, batch, seed, patience), (size, n, cmax, contrast, intensity))| {
            let mut c = RunConfig::desk();
            c.network.convs[0].maps = m * 3;
            c.network.hyper.weights = vec![w as u32 + 2, w as u32, 1];
            c.network.hyper.fusion = if top { Fusion::TopOnly } else { Fusion::Hyper };
            c.network.hyper.tap_point = if pre { TapPoint::PrePool } else { TapPoint::PostPool };
            c.network.training.lr_finetune = lr;
            c.network.training.batch_size = batch;
            c.network.training.seed = seed;
            c.network.training.early_stop_patience = patience;
            c.data.image_size = size;
            c.data.n_abnormal = n;
            c.data.vacuole_count = (0, cmax);
            c.data.contrast = contrast;
            c.data.vacuole_intensity = intensity;
            c.data.seed = seed.rotate_left(7);
            c
        })
}

proptest! {
    #[test]
    fn canonical_round_trip(c in run_config()) {
        let text = c.to_canonical();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_canonical(), text);
    }
}

#[test]
fn every_default_key_is_written() {
    let text = RunConfig::desk().to_canonical();
    for key in [
        "input_rows", "conv_maps", "conv_filters", "conv_strides", "pool", "dense", "classes", "fusion", "out_neurons",
        "weights", "tap_point", "lr_pretrain", "lr_finetune", "batch_size", "epochs_pretrain", "epochs_finetune",
        "early_stop_patience", "tied", "image_size", "n_normal", "n_abnormal", "vacuole_count", "vacuole_radius",
        "vacuole_intensity", "grain_scale", "contrast",
    ] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key}");
    }
}

#[test]
fn unknown_keys_and_sections_rejected() {
    assert!(RunConfig::parse("[network]\nbogus = 1\n").is_err());
    assert!(RunConfig::parse("[nope]\n").is_err());
    assert!(RunConfig::parse("[data]\nimage_size = many\n").is_err());
}
