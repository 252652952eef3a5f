use med::autodiff::{Graph, OpKind};
use med::net::{classify, config_count, LinkCounts, MedNetwork, MedSpec, NetError, SkipMode};
use med::tensor::{Shape, Tensor};
use proptest::prelude::*;

/// Width of encoder stage `i`, written out from the doubling rule.
fn width(base: usize, i: usize) -> usize {
    match i {
        0 | 1 => base,
        2 => 2 * base,
        _ => 4 * base,
    }
}

/// Scalar parameters of one block, counted layer by layer.
fn block_params(depth: usize, base: usize, in_ch: usize, intra: bool) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
    let bn = |c: usize| 2 * c;
    let mut n = 0;
    for i in 1..=depth {
        let cin = if i == 1 { in_ch } else { width(base, i - 1) };
        n += conv(cin, width(base, i), 3) + bn(width(base, i));
    }
    for j in 1..=depth {
        let (cin, cout) = (width(base, depth - j + 1), width(base, depth - j));
        n += conv(cin, cout, 3) + bn(cout);
        if intra && j < depth {
            n += conv(2 * cout, cout, 1);
        }
    }
    n + conv(width(base, 0), 3, 3)
}

#[test]
fn single_block_parameter_count() {
    for depth in 2..=6 {
        for base in [1, 4, 32] {
            for (skip, intra) in [(SkipMode::NoSkip, false), (SkipMode::IntraSkip, true)] {
                let net = MedNetwork::build(&MedSpec::ed(depth, skip).with_base_channels(base), 3)
                    .unwrap();
                assert_eq!(
                    net.parameter_count(),
                    block_params(depth, base, 3, intra),
                    "depth {depth} base {base}"
                );
            }
        }
    }
}

#[test]
fn plain_three_level_parameter_count() {
    // No links: three independent blocks, enhancers fed the 3-channel head
    // below them.
    let base = 4;
    let spec = MedSpec::med(5, &[4, 3], SkipMode::NoSkip, false).with_base_channels(base);
    let net = MedNetwork::build(&spec, 32).unwrap();
    let want = block_params(5, base, 32, false)
        + block_params(4, base, 3, false)
        + block_params(3, base, 3, false);
    assert_eq!(net.parameter_count(), want);
}

#[test]
fn parameters_depend_only_on_the_seed() {
    let spec = MedSpec::med(4, &[3], SkipMode::FullSkip, true).with_base_channels(2);
    let a = MedNetwork::build(&spec.clone().with_seed(7), 3).unwrap();
    let b = MedNetwork::build(&spec.clone().with_seed(7), 3).unwrap();
    let c = MedNetwork::build(&spec.with_seed(8), 3).unwrap();
    let flat = |n: &MedNetwork| {
        n.params()
            .iter()
            .flat_map(|p| p.data().to_vec())
            .collect::<Vec<f32>>()
    };
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
    assert_eq!(a.param_names(), c.param_names());
}

#[test]
fn invalid_specs_name_the_field() {
    let field = |spec: MedSpec| match MedNetwork::build(&spec, 3) {
        Err(NetError::InvalidSpec { field, .. }) => field,
        other => panic!("expected an invalid spec, got {other:?}"),
    };
    assert_eq!(field(MedSpec::ed(1, SkipMode::NoSkip)), "generator_depth");
    assert_eq!(
        field(MedSpec::med(4, &[4], SkipMode::NoSkip, false)),
        "enhancer_depths[0]"
    );
    assert_eq!(
        field(MedSpec::med(5, &[4, 3, 2], SkipMode::NoSkip, false)),
        "enhancer_depths"
    );
    assert_eq!(field(MedSpec::ed(4, SkipMode::FullSkip)), "skip");
    assert_eq!(field(MedSpec::ed(4, SkipMode::InterSkipEncEnc)), "skip");
    let mut cascade = MedSpec::ed(4, SkipMode::NoSkip);
    cascade.cascade = true;
    assert_eq!(field(cascade), "cascade");
    assert_eq!(
        field(MedSpec::ed(4, SkipMode::NoSkip).with_base_channels(0)),
        "base_channels"
    );
}

#[test]
fn variant_names() {
    let names: Vec<&str> = [false, true]
        .iter()
        .flat_map(|&c| {
            [SkipMode::NoSkip, SkipMode::IntraSkip, SkipMode::FullSkip]
                .map(|s| classify(s, c).unwrap())
        })
        .collect();
    assert_eq!(names, ["MED", "MEDS", "MEDSF", "MEDC", "MEDSC", "MEDSFC"]);
    assert!(classify(SkipMode::InterSkipDecEnc, false).is_err());
    assert_eq!(MedSpec::ed(5, SkipMode::IntraSkip).variant_name(), "EDS5");
    assert_eq!(MedSpec::ed(5, SkipMode::NoSkip).variant_name(), "ED5");
    assert_eq!(
        MedSpec::med(5, &[4], SkipMode::FullSkip, false).variant_name(),
        "MEDSF*"
    );
    assert_eq!(config_count(5).unwrap(), 40);
    assert_eq!(config_count(2).unwrap(), 10);
    assert!(config_count(1).is_err());
}

fn spec_strategy() -> impl Strategy<Value = MedSpec> {
    (
        2usize..=6,
        0usize..=2,
        0usize..5,
        any::<bool>(),
        1usize..=2,
        any::<u64>(),
    )
        .prop_flat_map(|(k, n_enh, skip, cascade, base, seed)| {
            let n_enh = if k == 2 { 0 } else { n_enh };
            let enh = proptest::collection::vec(2usize..k.max(3), n_enh);
            (
                Just(k),
                enh,
                Just(skip),
                Just(cascade),
                Just(base),
                Just(seed),
            )
        })
        .prop_map(|(k, enh, skip, cascade, base, seed)| {
            let skip = if enh.is_empty() {
                [SkipMode::NoSkip, SkipMode::IntraSkip][skip % 2]
            } else {
                SkipMode::ALL[skip]
            };
            MedSpec::med(k, &enh, skip, cascade && !enh.is_empty())
                .with_base_channels(base)
                .with_seed(seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn heads_follow_the_resolution_ladder(spec in spec_strategy()) {
        let net = MedNetwork::build(&spec, 3).unwrap();
        let d = net.required_divisor();
        let heads = net.evaluate(&Tensor::full(Shape::image(3, d, 2 * d), 0.05)).unwrap();
        prop_assert_eq!(heads.len(), spec.levels());
        for (l, h) in heads.iter().enumerate() {
            prop_assert_eq!(h.shape(), Shape::image(3, d >> l, (2 * d) >> l));
            prop_assert!(h.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn built_links_match_the_closed_form(spec in spec_strategy()) {
        let net = MedNetwork::build(&spec, 3).unwrap();
        let links = net.links();
        prop_assert_eq!(links, LinkCounts::expected(&spec));
        prop_assert_eq!(net.introspect(), spec.clone());

        let d = net.required_divisor();
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::full(Shape::image(3, d, d), 0.05));
        net.forward(&mut g, z).unwrap();
        prop_assert_eq!(g.count(OpKind::ConcatChannels), links.total());
        prop_assert_eq!(g.count(OpKind::Sigmoid), spec.levels());
    }

    #[test]
    fn indivisible_inputs_are_rejected(spec in spec_strategy()) {
        let net = MedNetwork::build(&spec, 3).unwrap();
        let d = net.required_divisor();
        let err = net.evaluate(&Tensor::full(Shape::image(3, d + 2, d), 0.5)).unwrap_err();
        let is_indivisible = matches!(err, NetError::Indivisible { .. });
        prop_assert!(is_indivisible);
    }
}
