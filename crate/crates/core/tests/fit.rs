use med::fit::{fit, format_g6, Adam, FitConfig, FitError, StopMode, TRACE_HEADER};
use med::image::{psnr, read_png, ImageBuffer, Mask};
use med::net::{MedSpec, SkipMode};
use med::rng::Rng;
use med::tasks::{degrade_noise, TaskKind, TaskSpec};
use med::tensor::{Shape, Tensor};
use proptest::prelude::*;

fn cat32() -> ImageBuffer {
    read_png(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/chelsea64.png"))
        .unwrap()
        .crop(16, 16, 32, 32)
        .unwrap()
}

fn small_net() -> MedSpec {
    MedSpec::ed(4, SkipMode::IntraSkip).with_base_channels(8)
}

#[test]
fn denoising_fit_halves_the_loss() {
    let clean = cat32();
    let noisy = degrade_noise(&clean, 25.0, &mut Rng::new(1));
    let task = TaskSpec::denoise(noisy).with_reference(clean);
    let config = FitConfig::for_task(TaskKind::Denoise).with_iterations(500);
    let run = fit(&small_net(), &task, &config).unwrap();
    assert_eq!(run.losses.len(), 501);
    let (first, last) = (run.losses[0], run.losses[500]);
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    // Monotone while descending; on the plateau Adam steps rise about as
    // often as they fall.
    let steps = run.losses[..=200]
        .windows(2)
        .filter(|w| w[1] <= w[0])
        .count();
    assert!(steps >= 160, "loss fell on {steps} of the first 200 steps");
    assert_eq!(run.restored.dims(), (32, 32));
    assert!(run.final_row().psnr.unwrap() > run.trace[0].psnr.unwrap());
}

#[test]
fn fits_replay_bit_for_bit() {
    let clean = cat32();
    let task =
        TaskSpec::denoise(degrade_noise(&clean, 25.0, &mut Rng::new(2))).with_reference(clean);
    let config = FitConfig::for_task(TaskKind::Denoise)
        .with_iterations(30)
        .with_trace_every(10);
    let spec = MedSpec::med(4, &[3], SkipMode::FullSkip, true).with_base_channels(4);
    let a = fit(&spec, &task, &config).unwrap();
    let b = fit(&spec, &task, &config).unwrap();
    assert_eq!(a.restored, b.restored);
    assert_eq!(
        a.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.trace_csv(), b.trace_csv());
    let c = fit(&spec, &task, &config.clone().with_seed(1)).unwrap();
    assert_ne!(a.losses, c.losses);
}

#[test]
fn trace_rows_land_on_the_grid_and_the_last_iteration() {
    let task = TaskSpec::denoise(cat32());
    for (n, every, want) in [
        (120, 50, vec![0, 50, 100, 120]),
        (100, 25, vec![0, 25, 50, 75, 100]),
        (3, 10, vec![0, 3]),
    ] {
        let config = FitConfig::for_task(TaskKind::Denoise)
            .with_iterations(n)
            .with_trace_every(every);
        let spec = MedSpec::ed(2, SkipMode::NoSkip).with_base_channels(2);
        let run = fit(&spec, &task, &config).unwrap();
        let its: Vec<usize> = run.trace.iter().map(|r| r.iteration).collect();
        assert_eq!(its, want);
        let csv = run.trace_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        // No reference, so the metric columns stay empty.
        assert!(lines.all(|l| l.ends_with(",,")));
    }
}

#[test]
fn odd_sizes_are_padded_and_cropped_back() {
    let clean = read_png(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/assets/astronaut64.png"
    ))
    .unwrap()
    .crop(3, 5, 30, 27)
    .unwrap();
    let task = TaskSpec::inpaint(clean.clone(), Mask::with_rect_hole(30, 27, 10, 10, 6, 6))
        .with_reference(clean);
    let config = FitConfig::for_task(TaskKind::Inpaint).with_iterations(5);
    let run = fit(
        &MedSpec::ed(4, SkipMode::IntraSkip).with_base_channels(2),
        &task,
        &config,
    )
    .unwrap();
    assert_eq!(run.restored.dims(), (30, 27));
    assert_eq!(
        (run.geometry.padded_width, run.geometry.padded_height),
        (32, 32)
    );
}

#[test]
fn best_psnr_returns_the_best_traced_iterate() {
    let clean = cat32();
    let task = TaskSpec::denoise(degrade_noise(&clean, 50.0, &mut Rng::new(3)))
        .with_reference(clean.clone());
    let mut config = FitConfig::for_task(TaskKind::Denoise)
        .with_iterations(200)
        .with_trace_every(20);
    config.stop_mode = StopMode::BestPsnr;
    let run = fit(&small_net(), &task, &config).unwrap();
    let best = run.best_row().unwrap();
    assert_eq!(run.selected_iteration, best.iteration);
    assert!(run
        .trace
        .iter()
        .all(|r| r.psnr.unwrap() <= best.psnr.unwrap()));
    assert!((psnr(&run.restored, &clean).unwrap() - best.psnr.unwrap()).abs() < 1e-9);

    config.stop_mode = StopMode::BestPsnr;
    let err = fit(&small_net(), &TaskSpec::denoise(cat32()), &config).unwrap_err();
    assert!(matches!(err, FitError::Config { ref field, .. } if field == "stop_mode"));
}

#[test]
fn runaway_learning_rates_abort_numerically() {
    let task = TaskSpec::denoise(cat32());
    let mut config = FitConfig::for_task(TaskKind::Denoise).with_iterations(300);
    config.learning_rate = 1e30;
    let err = fit(&small_net(), &task, &config).unwrap_err();
    assert!(err.is_numerical(), "{err}");
}

#[test]
fn invalid_configs_name_the_field() {
    let task = TaskSpec::denoise(cat32());
    let field = |mutate: fn(&mut FitConfig)| {
        let mut c = FitConfig::for_task(TaskKind::Denoise);
        mutate(&mut c);
        match fit(&small_net(), &task, &c) {
            Err(FitError::Config { field, .. }) => field,
            other => panic!(
                "expected a config error, got {:?}",
                other.map(|r| r.selected_iteration)
            ),
        }
    };
    assert_eq!(field(|c| c.iterations = 0), "iterations");
    assert_eq!(field(|c| c.learning_rate = -1.0), "learning_rate");
    assert_eq!(field(|c| c.beta1 = 1.0), "beta1");
    assert_eq!(field(|c| c.trace_every = 0), "trace_every");
    assert_eq!(
        field(|c| c.input_mode = med::fit::InputMode::ConcatFlash),
        "input_mode"
    );
}

#[test]
fn adam_matches_a_scalar_recurrence() {
    // Minimize (p - 3)^2 from p = 0 and replay the update rule in f64.
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut adam = Adam::new(lr, b1, b2, eps);
    let mut params = vec![Tensor::from_vec(Shape::image(1, 1, 1), vec![0.0f32]).unwrap()];
    let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=50 {
        let g = 2.0 * (params[0].data()[0] as f64 - 3.0);
        let grad = Tensor::from_vec(Shape::image(1, 1, 1), vec![g as f32]).unwrap();
        adam.step(&mut params, &[&grad]).unwrap();
        let g = 2.0 * (p - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        p -= lr * m_hat / (v_hat.sqrt() + eps);
        assert!(
            (params[0].data()[0] as f64 - p).abs() < 1e-4,
            "step {t}: {} vs {p}",
            params[0].data()[0]
        );
    }
    assert_eq!(adam.steps(), 50);
    let bad = Tensor::from_vec(Shape::image(1, 1, 1), vec![f32::NAN]).unwrap();
    let before = params[0].clone();
    assert_eq!(adam.step(&mut params, &[&bad]), Err(0));
    assert_eq!(params[0], before);
}

#[test]
fn g6_formatting() {
    let cases = [
        (0.0, "0"),
        (1.0, "1"),
        (-2.5, "-2.5"),
        (0.0001, "0.0001"),
        (0.00001, "1e-05"),
        (123456.7, "123457"),
        (1234567.0, "1.23457e+06"),
        (0.1 + 0.2, "0.3"),
        (20.123456789, "20.1235"),
        (f64::NAN, "nan"),
        (f64::INFINITY, "inf"),
    ];
    for (v, want) in cases {
        assert_eq!(format_g6(v), want, "{v}");
    }
}

proptest! {
    #[test]
    fn g6_keeps_six_significant_digits(m in -1.0f64..1.0, e in -12i32..12) {
        let v = m * 10f64.powi(e);
        let s = format_g6(v);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - v).abs() <= 5e-6 * v.abs() + f64::MIN_POSITIVE, "{} -> {}", v, s);
        prop_assert!(!s.contains('.') || !s.split('e').next().unwrap().ends_with('0'));
    }
}
