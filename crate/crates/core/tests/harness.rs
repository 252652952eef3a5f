use std::path::PathBuf;

use med::fit::TraceRow;
use med::harness::{
    check_axis, curves_csv, resolve_workers, summary_csv, Axis, HarnessError, RunMetrics,
    VariantOutcome, SUMMARY_HEADER,
};
use med::net::{MedSpec, SkipMode};
use proptest::prelude::*;

fn key(r: Result<(), HarnessError>) -> String {
    match r {
        Err(HarnessError::Invalid { key, .. }) => key,
        other => panic!("expected an invalid plan, got {other:?}"),
    }
}

#[test]
fn axis_rules() {
    let med = |k: usize, e: &[usize], s: SkipMode, c: bool| {
        MedSpec::med(k, e, s, c).with_base_channels(4)
    };
    let depth = [
        MedSpec::ed(5, SkipMode::IntraSkip).with_base_channels(4),
        MedSpec::ed(7, SkipMode::IntraSkip).with_base_channels(4),
        med(5, &[4, 3], SkipMode::FullSkip, false),
    ];
    check_axis(Axis::Depth, &depth).unwrap();
    assert_eq!(
        key(check_axis(
            Axis::Depth,
            &[
                depth[0].clone(),
                MedSpec::ed(5, SkipMode::NoSkip).with_base_channels(4)
            ]
        )),
        "variants[1].skip"
    );

    let skip = [
        med(5, &[4, 3], SkipMode::NoSkip, false),
        med(5, &[4, 3], SkipMode::InterSkipDecEnc, false),
    ];
    check_axis(Axis::Skip, &skip).unwrap();
    assert_eq!(
        key(check_axis(
            Axis::Skip,
            &[skip[0].clone(), med(5, &[4, 3], SkipMode::NoSkip, true)]
        )),
        "variants[1].cascade"
    );

    check_axis(
        Axis::Cascade,
        &[skip[0].clone(), med(5, &[4, 3], SkipMode::NoSkip, true)],
    )
    .unwrap();
    assert_eq!(key(check_axis(Axis::Cascade, &skip)), "variants[1].skip");

    check_axis(
        Axis::Composition,
        &[
            med(5, &[4], SkipMode::NoSkip, false),
            med(5, &[3, 2], SkipMode::NoSkip, false),
        ],
    )
    .unwrap();
    assert_eq!(
        key(check_axis(
            Axis::Composition,
            &[
                med(5, &[4], SkipMode::NoSkip, false),
                med(6, &[4], SkipMode::NoSkip, false)
            ]
        )),
        "variants[1].generator_depth"
    );
    assert_eq!(
        key(check_axis(
            Axis::Skip,
            &[skip[0].clone(), skip[1].clone().with_base_channels(8)]
        )),
        "variants[1].base_channels"
    );
    assert_eq!(key(check_axis(Axis::Skip, &[])), "variants");
}

fn outcome(name: &str, psnrs: &[(usize, f64)]) -> VariantOutcome {
    let trace: Vec<TraceRow> = psnrs
        .iter()
        .map(|&(iteration, p)| TraceRow {
            iteration,
            loss: 0.01,
            psnr: Some(p),
            ssim: Some(0.5),
        })
        .collect();
    let best = trace
        .iter()
        .max_by(|a, b| a.psnr.partial_cmp(&b.psnr).unwrap())
        .unwrap();
    let last = trace.last().unwrap();
    let metrics = RunMetrics {
        variant: name.into(),
        parameter_count: 1234,
        selected_iteration: last.iteration,
        final_loss: 0.01,
        final_psnr: last.psnr,
        final_ssim: last.ssim,
        best_psnr: best.psnr,
        best_iteration: Some(best.iteration),
        wall_time_s: 1.23456,
    };
    VariantOutcome {
        name: name.into(),
        dir: PathBuf::from(name),
        result: Ok((metrics, trace)),
    }
}

#[test]
fn summary_and_curves_layout() {
    let variants = vec![
        outcome("EDS5", &[(0, 10.0), (50, 20.5), (100, 20.25)]),
        VariantOutcome {
            name: "MEDS".into(),
            dir: PathBuf::from("x"),
            result: Err("numerical abort: \"nan\", here".into()),
        },
        outcome("EDS5", &[(0, 11.0), (50, 19.0)]),
    ];
    let summary = summary_csv(&variants);
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], SUMMARY_HEADER);
    assert_eq!(lines[1], "EDS5,20.25,20.5,50,0.5,1234,1.235,ok");
    assert_eq!(
        lines[2],
        "MEDS,,,,,,,\"failed: numerical abort: \"\"nan\"\", here\""
    );
    assert_eq!(lines.len(), 4);

    let curves = curves_csv(&variants);
    assert_eq!(
        curves,
        "iteration,EDS5#0,MEDS,EDS5#2\n0,10,,11\n50,20.5,,19\n100,20.25,,\n"
    );
}

#[test]
fn worker_count_must_be_positive() {
    assert_eq!(resolve_workers(Some(3)).unwrap(), 3);
    assert!(resolve_workers(Some(0)).is_err());
}

proptest! {
    #[test]
    fn summary_has_one_row_per_variant(ok in proptest::collection::vec(any::<bool>(), 0..12)) {
        let variants: Vec<VariantOutcome> = ok
            .iter()
            .enumerate()
            .map(|(i, &ok)| {
                if ok {
                    outcome(&format!("V{i}"), &[(0, 1.0), (5, 2.0)])
                } else {
                    VariantOutcome { name: format!("V{i}"), dir: PathBuf::new(), result: Err("boom".into()) }
                }
            })
            .collect();
        let summary = summary_csv(&variants);
        prop_assert_eq!(summary.lines().count(), 1 + ok.len());
        let curves = curves_csv(&variants);
        prop_assert_eq!(curves.lines().next().unwrap().split(',').count(), 1 + ok.len());
    }
}
