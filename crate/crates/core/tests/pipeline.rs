use proptest::prelude::*;
use qornn::fxp::{calibrate_activations, input_scale, FxpModel, OverflowPolicy};
use qornn::numerics::{gram_residual, sample_uniform_orthogonal, Matrix, RngState};
use qornn::ortho::{bjorck, diagnose, BjorckConfig};
use qornn::quantize::{code_range, quantize_codes, step, QuantSpec};
use qornn::rnn::{Activation, Checkpoint, LossKind, Mode, RnnConfig, RnnParams};
use qornn::tasks::{naive_baseline, CopyTask, Dataset, TaskKind, COPY_N_I, COPY_N_O};
use qornn::train::{
    evaluate, init_params, train, InitKind, OptimizerConfig, Schedule, Strategy, StrategyConfig, TrainConfig,
};

fn copy_cfg() -> RnnConfig {
    RnnConfig {
        activation: Activation::Relu,
        mode: Mode::ManyToMany,
        loss: LossKind::CrossEntropy,
    }
}

fn trained_copy(bits: u32) -> (RnnParams, StrategyConfig, CopyTask) {
    let data = CopyTask::new(3, 256, 7);
    let mut rng = RngState::new(7);
    let mut p = init_params(COPY_N_I, 16, COPY_N_O, Activation::Relu, InitKind::Henaff, &mut rng).unwrap();
    let strategy = StrategyConfig::new(Strategy::SteBjorck { bits });
    let tc = TrainConfig {
        epochs: 30,
        batch_size: 32,
        optimizer: OptimizerConfig::adam(1e-2),
        schedule: Schedule::Constant,
        seed: 7,
        max_steps_per_epoch: None,
        eval_batch_size: 128,
        record_wall_time: false,
    };
    train(&mut p, &copy_cfg(), &strategy, &tc, &data, &data, &mut ()).unwrap();
    (p, strategy, data)
}

#[test]
fn training_beats_the_baseline_and_checkpoints_round_trip() {
    let (p, strategy, data) = trained_copy(8);
    let transform = strategy.eval_transform().unwrap();
    let e = evaluate(&p, &transform, &copy_cfg(), &data, 64).unwrap();
    assert!(e.loss < naive_baseline(TaskKind::Copy { t0: 3 }).unwrap());

    let ck = Checkpoint::new(p, copy_cfg(), transform.clone(), 7).unwrap();
    let mut bytes = Vec::new();
    ck.write(&mut bytes).unwrap();
    let back = Checkpoint::read(bytes.as_slice()).unwrap();
    let e2 = evaluate(&back.params, &back.header.transform, &back.header.config, &data, 64).unwrap();
    assert_eq!(e.loss.to_bits(), e2.loss.to_bits());
}

#[test]
fn exported_integer_model_reproduces_itself() {
    let (p, strategy, data) = trained_copy(6);
    let transform = strategy.eval_transform().unwrap();
    let task = TaskKind::Copy { t0: 3 };
    let calib = calibrate_activations(&p, &transform, &copy_cfg(), 8, 2, input_scale(task), &[&data], 64).unwrap();
    let model = FxpModel::build(&p, &transform, &copy_cfg(), &calib, OverflowPolicy::Saturate).unwrap();
    let batch = data.batch(&(0..64).collect::<Vec<_>>()).unwrap();
    let a = model.forward(&batch.inputs).unwrap();
    assert_eq!(a, model.float_reference(&batch.inputs).unwrap());

    let mut bytes = Vec::new();
    model.write(&mut bytes).unwrap();
    let back = FxpModel::read(bytes.as_slice()).unwrap();
    assert_eq!(back.forward(&batch.inputs).unwrap(), a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quantized_orthogonal_matrices_obey_the_bounds(n in 2usize..24, bits in 2u32..9, seed in any::<u64>()) {
        let w = sample_uniform_orthogonal(n, &mut RngState::new(seed));
        let q = quantize_codes(&w, &QuantSpec::new(bits).unwrap()).dequantize();
        prop_assert!(diagnose(&q, bits).unwrap().within_bounds(1e-9));
    }

    #[test]
    fn codes_stay_in_range_within_half_a_step(bits in 2u32..12, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let w = Matrix::from_fn(5, 7, |_, _| rng.normal());
        let q = quantize_codes(&w, &QuantSpec::new(bits).unwrap());
        let (lo, hi) = code_range(bits);
        prop_assert!(q.codes.iter().all(|&c| (lo..=hi).contains(&c)));
        let d = step(q.alpha, bits);
        // Half a step inside the grid, a full step in the cell above the top code.
        let top = hi as f64 * d;
        for (x, y) in w.as_slice().iter().zip(q.dequantize().as_slice()) {
            let bound = if *x > top { d } else { d / 2.0 };
            prop_assert!((x - y).abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn bjorck_orthogonalizes_well_conditioned_matrices(n in 2usize..16, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let w = sample_uniform_orthogonal(n, &mut rng)
            .add(&Matrix::from_fn(n, n, |_, _| 0.05 * rng.normal()))
            .unwrap();
        let b = bjorck(&w, &BjorckConfig::default()).unwrap();
        prop_assert!(gram_residual(&b).unwrap() < 1e-8);
    }
}
