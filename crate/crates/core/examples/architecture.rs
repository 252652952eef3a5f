//! Builds the named network variants and prints their wiring.
//!
//! cargo run --example architecture

use med::net::{config_count, from_name, LinkCounts, MedNetwork, MedSpec, SkipMode, VARIANT_NAMES};
use med::tensor::{Shape, Tensor};

fn describe(spec: &MedSpec) -> Result<(), Box<dyn std::error::Error>> {
    let net = MedNetwork::build(spec, 3)?;
    let links = net.links();
    assert_eq!(links, LinkCounts::expected(spec));
    let d = net.required_divisor();
    let heads = net.evaluate(&Tensor::full(Shape::image(3, d, d), 0.5))?;
    let sizes: Vec<String> = heads
        .iter()
        .map(|h| format!("{}x{}", h.shape().height(), h.shape().width()))
        .collect();
    println!(
        "{:<8} depths {}{:?}  links intra {} enc-enc {} dec-enc {} cascade {}  params {:>7}  heads on {d}x{d}: {}",
        spec.variant_name(),
        spec.generator_depth,
        spec.enhancer_depths,
        links.intra,
        links.inter_enc_enc,
        links.inter_dec_enc,
        links.cascade,
        net.parameter_count(),
        sizes.join(" ")
    );
    assert_eq!(&net.introspect(), spec);
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (name, _, _) in VARIANT_NAMES {
        let (skip, cascade) = from_name(name).expect("known variant name");
        describe(&MedSpec::med(5, &[4, 3], skip, cascade).with_base_channels(8))?;
    }
    describe(&MedSpec::med(5, &[4], SkipMode::FullSkip, false).with_base_channels(8))?;
    describe(&MedSpec::med(5, &[4, 3], SkipMode::InterSkipEncEnc, false).with_base_channels(8))?;
    describe(&MedSpec::med(5, &[4, 3], SkipMode::InterSkipDecEnc, true).with_base_channels(8))?;
    for k in 5..=7 {
        describe(&MedSpec::ed(k, SkipMode::IntraSkip).with_base_channels(8))?;
    }
    for k in 2..=6 {
        println!("structures for generator depth {k}: {}", config_count(k)?);
    }
    let json = serde_json::to_string(&MedSpec::med(5, &[4, 3], SkipMode::FullSkip, true))?;
    println!("spec JSON: {json}");
    Ok(())
}
