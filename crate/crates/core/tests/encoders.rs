use candle_core::{DType, Device, IndexOp, Tensor};
use lipsync::encoders::{AudioEncoder, EncoderConfig, VisualEncoder};
use lipsync::nn::{Mode, ParamBuilder};
use proptest::prelude::*;

fn cfg() -> EncoderConfig {
    EncoderConfig {
        width_multiplier: 1.0 / 32.0,
        residual_blocks_per_stage: 0,
        visual_residual_blocks: vec![0, 1, 0, 0, 0],
        ..Default::default()
    }
}

/// Columns whose features changed between two encoder outputs `(1, t, d)`.
fn changed_columns(a: &Tensor, b: &Tensor) -> Vec<usize> {
    let t = a.dim(1).unwrap();
    (0..t)
        .filter(|&i| {
            let d = (a.i((0, i)).unwrap() - b.i((0, i)).unwrap())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            d > 0.0
        })
        .collect()
}

fn within(cols: &[usize], centre: usize, radius: usize) -> bool {
    cols.iter().all(|&c| c.abs_diff(centre) <= radius)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn visual_changes_stay_inside_the_receptive_field(t in 0usize..15, seed in 0u64..1000) {
        let pb = ParamBuilder::new(seed, DType::F64);
        let enc = VisualEncoder::new(&pb, &cfg()).unwrap();
        let x = Tensor::rand(0f64, 1.0, (1, 3, 15, 48, 96), &Device::Cpu).unwrap();
        let bump = Tensor::rand(0f64, 1.0, (1, 3, 1, 48, 96), &Device::Cpu).unwrap();
        let mut frames: Vec<Tensor> = (0..15).map(|i| x.narrow(2, i, 1).unwrap()).collect();
        frames[t] = bump;
        let y = Tensor::cat(&frames, 2).unwrap();
        let (a, b) = (enc.forward(&x, &Mode::Eval).unwrap(), enc.forward(&y, &Mode::Eval).unwrap());
        let cols = changed_columns(&a, &b);
        prop_assert_eq!(enc.temporal_radius(), 6);
        prop_assert!(cols.contains(&t));
        prop_assert!(within(&cols, t, enc.temporal_radius()), "{cols:?} around {t}");
    }

    #[test]
    fn audio_changes_stay_inside_the_receptive_field(t in 0usize..24, seed in 0u64..1000) {
        let pb = ParamBuilder::new(seed, DType::F64);
        let enc = AudioEncoder::new(&pb, &cfg()).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 1, 1, 80, 24), &Device::Cpu).unwrap();
        let mut cols: Vec<Tensor> = (0..24).map(|i| x.narrow(4, i, 1).unwrap()).collect();
        cols[t] = (&cols[t] + 1.5).unwrap();
        let y = Tensor::cat(&cols, 4).unwrap();
        let (a, b) = (enc.forward(&x, &Mode::Eval).unwrap(), enc.forward(&y, &Mode::Eval).unwrap());
        let changed = changed_columns(&a, &b);
        prop_assert_eq!(enc.temporal_radius(), 6);
        prop_assert!(changed.contains(&t));
        prop_assert!(within(&changed, t, enc.temporal_radius()), "{changed:?} around {t}");
    }
}
