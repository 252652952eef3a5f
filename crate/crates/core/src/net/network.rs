//! Building and evaluating med networks on an autodiff [`Graph`].

use crate::autodiff::{Graph, NodeId};
use crate::rng::{Rng, Stream};
use crate::tensor::{Element, Shape, Tensor};

use super::spec::{EdSpec, MedSpec, SkipMode};
use super::NetError;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct Stage {
    conv: Conv,
    norm: Norm,
}

/// Output of a stage somewhere in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    Encoder { level: usize, stage: usize },
    Decoder { level: usize, stage: usize },
}

/// Concat of a stage output with an earlier tap, folded back to the
/// stage width by a 1×1 convolution.
#[derive(Clone, Copy, Debug)]
struct Merge {
    source: Tap,
    conv: Conv,
}

#[derive(Clone, Debug)]
struct Level {
    depth: usize,
    cascade: bool,
    encoders: Vec<Stage>,
    /// Inter-level link arriving after encoder stage `i` (index `i - 1`).
    enc_merges: Vec<Option<Merge>>,
    decoders: Vec<Stage>,
    /// Intra link arriving after decoder stage `j` (index `j - 1`).
    dec_merges: Vec<Option<Merge>>,
    head: Conv,
}

/// Concat links a network carries, by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LinkCounts {
    pub intra: usize,
    pub inter_enc_enc: usize,
    pub inter_dec_enc: usize,
    pub cascade: usize,
}

impl LinkCounts {
    /// Closed-form counts for a valid spec.
    pub fn expected(spec: &MedSpec) -> Self {
        let mut c = LinkCounts::default();
        for l in 0..spec.levels() {
            if spec.skip.has_intra() {
                c.intra += spec.depth(l) - 1;
            }
            if l + 1 < spec.levels() {
                let (k, next) = (spec.depth(l), spec.depth(l + 1));
                if spec.skip.has_inter_enc_enc() {
                    c.inter_enc_enc += (k - 1).min(next);
                }
                if spec.skip.has_inter_dec_enc() {
                    c.inter_dec_enc += (k - 2).min(next);
                }
            }
        }
        if spec.cascade {
            c.cascade = spec.enhancer_depths.len();
        }
        c
    }

    pub fn total(&self) -> usize {
        self.intra + self.inter_enc_enc + self.inter_dec_enc + self.cascade
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// One node per parameter tensor, in [`MedNetwork::params`] order.
    pub params: Vec<NodeId>,
    /// Heads G, E¹, E² at full, half and quarter resolution.
    pub heads: Vec<NodeId>,
}

/// A built network: its structure plus the current parameter values.
#[derive(Clone, Debug)]
pub struct MedNetwork {
    spec: MedSpec,
    input_channels: usize,
    levels: Vec<Level>,
    params: Vec<Tensor<f32>>,
    names: Vec<String>,
}

struct Builder {
    rng: Rng,
    params: Vec<Tensor<f32>>,
    names: Vec<String>,
}

impl Builder {
    fn conv(&mut self, name: String, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Conv {
        let fan_in = (in_ch * k * k) as f64;
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let bound = gain * (3.0 / fan_in).sqrt();
        let shape = Shape::new(out_ch, in_ch, k, k);
        let rng = &mut self.rng;
        let w = Tensor::from_fn(shape, |_| rng.uniform(-bound, bound) as f32);
        let w = self.push(format!("{name}.weight"), w);
        let b = self.push(
            format!("{name}.bias"),
            Tensor::zeros(Shape::image(out_ch, 1, 1)),
        );
        Conv { w, b, stride }
    }

    fn norm(&mut self, name: String, ch: usize) -> Norm {
        let gamma = self.push(
            format!("{name}.gamma"),
            Tensor::full(Shape::image(ch, 1, 1), 1.0),
        );
        let beta = self.push(
            format!("{name}.beta"),
            Tensor::zeros(Shape::image(ch, 1, 1)),
        );
        Norm { gamma, beta }
    }

    fn stage(&mut self, name: String, in_ch: usize, out_ch: usize, stride: usize) -> Stage {
        Stage {
            conv: self.conv(format!("{name}.conv"), in_ch, out_ch, KERNEL, stride),
            norm: self.norm(format!("{name}.bn"), out_ch),
        }
    }

    fn merge(&mut self, name: String, source: Tap, own: usize, incoming: usize) -> Merge {
        Merge {
            source,
            conv: self.conv(name, own + incoming, own, 1, 1),
        }
    }

    fn push(&mut self, name: String, t: Tensor<f32>) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }
}

impl MedNetwork {
    /// Builds the network and draws its initial parameters from the
    /// parameter stream of `spec.seed`.
    pub fn build(spec: &MedSpec, input_channels: usize) -> Result<Self, NetError> {
        spec.validate()?;
        if input_channels == 0 {
            return Err(NetError::InvalidSpec {
                field: "input_channels".into(),
                reason: "must be >= 1".into(),
            });
        }
        let mut b = Builder {
            rng: Rng::stream(spec.seed, Stream::Parameters),
            params: Vec::new(),
            names: Vec::new(),
        };
        let mut levels: Vec<Level> = Vec::new();
        for l in 0..spec.levels() {
            let ed = if l == 0 {
                spec.generator()
            } else {
                spec.enhancers()[l - 1]
            };
            let cascade = l > 0 && spec.cascade;
            let in_channels = match (l, cascade) {
                (0, _) => input_channels,
                (_, false) => 3,
                (_, true) => 3 + input_channels,
            };
            let prefix = if l == 0 {
                "g".to_string()
            } else {
                format!("e{l}")
            };
            let k = ed.depth;

            let mut encoders = Vec::with_capacity(k);
            let mut enc_merges = Vec::with_capacity(k);
            for i in 1..=k {
                let in_ch = if i == 1 {
                    in_channels
                } else {
                    ed.channels(i - 1)
                };
                encoders.push(b.stage(format!("{prefix}.enc{i}"), in_ch, ed.channels(i), 2));
                let merge = l
                    .checked_sub(1)
                    .and_then(|prev| inter_source(spec, &levels[prev], prev, i))
                    .map(|(source, ch)| {
                        b.merge(format!("{prefix}.enc{i}.merge"), source, ed.channels(i), ch)
                    });
                enc_merges.push(merge);
            }

            let mut decoders = Vec::with_capacity(k);
            let mut dec_merges = Vec::with_capacity(k);
            for j in 1..=k {
                let (in_ch, out_ch) = (ed.channels(k - j + 1), ed.channels(k - j));
                decoders.push(b.stage(format!("{prefix}.dec{j}"), in_ch, out_ch, 1));
                let merge = (spec.skip.has_intra() && j < k).then(|| {
                    let source = Tap::Encoder {
                        level: l,
                        stage: k - j,
                    };
                    b.merge(
                        format!("{prefix}.dec{j}.merge"),
                        source,
                        out_ch,
                        ed.channels(k - j),
                    )
                });
                dec_merges.push(merge);
            }
            let head = b.conv(format!("{prefix}.head"), ed.channels(0), 3, KERNEL, 1);
            levels.push(Level {
                depth: k,
                cascade,
                encoders,
                enc_merges,
                decoders,
                dec_merges,
                head,
            });
        }
        Ok(MedNetwork {
            spec: spec.clone(),
            input_channels,
            levels,
            params: b.params,
            names: b.names,
        })
    }

    pub fn spec(&self) -> &MedSpec {
        &self.spec
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn head_count(&self) -> usize {
        self.levels.len()
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn required_divisor(&self) -> usize {
        self.spec.required_divisor()
    }

    /// Concat links present in the built structure.
    pub fn links(&self) -> LinkCounts {
        let mut c = LinkCounts::default();
        for level in &self.levels {
            c.intra += level.dec_merges.iter().flatten().count();
            for m in level.enc_merges.iter().flatten() {
                match m.source {
                    Tap::Encoder { .. } => c.inter_enc_enc += 1,
                    Tap::Decoder { .. } => c.inter_dec_enc += 1,
                }
            }
            c.cascade += usize::from(level.cascade);
        }
        c
    }

    /// Recovers the spec from the built structure alone.
    pub fn introspect(&self) -> MedSpec {
        let links = self.links();
        let skip = match (
            links.intra > 0,
            links.inter_enc_enc > 0,
            links.inter_dec_enc > 0,
        ) {
            (true, true, _) => SkipMode::FullSkip,
            (true, false, _) => SkipMode::IntraSkip,
            (false, true, _) => SkipMode::InterSkipEncEnc,
            (false, false, true) => SkipMode::InterSkipDecEnc,
            (false, false, false) => SkipMode::NoSkip,
        };
        let g = &self.levels[0];
        let base_channels = self.params[g.encoders[0].conv.w].shape().batch();
        MedSpec {
            generator_depth: g.depth,
            enhancer_depths: self.levels[1..].iter().map(|l| l.depth).collect(),
            skip,
            cascade: self.levels[1..].iter().any(|l| l.cascade),
            base_channels,
            seed: self.spec.seed,
        }
    }

    /// Places every parameter on `graph` as a gradient-tracking leaf.
    pub fn bind<T: Element>(&self, graph: &mut Graph<T>) -> Vec<NodeId> {
        self.params.iter().map(|p| graph.param(p.cast())).collect()
    }

    /// Binds the parameters and evaluates every head for input `z`.
    pub fn forward<T: Element>(
        &self,
        graph: &mut Graph<T>,
        z: NodeId,
    ) -> Result<Forward, NetError> {
        let params = self.bind(graph);
        let heads = self.forward_with(graph, &params, z)?;
        Ok(Forward { params, heads })
    }

    /// Evaluates every head with parameters already on `graph`.
    pub fn forward_with<T: Element>(
        &self,
        graph: &mut Graph<T>,
        params: &[NodeId],
        z: NodeId,
    ) -> Result<Vec<NodeId>, NetError> {
        if params.len() != self.params.len() {
            return Err(NetError::Input(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let zs = graph.shape(z);
        let d = self.required_divisor();
        if zs.batch() != 1 || zs.channels() != self.input_channels {
            return Err(NetError::Input(format!(
                "expected a (1,{},h,w) input, got {zs}",
                self.input_channels
            )));
        }
        if !zs.height().is_multiple_of(d) || !zs.width().is_multiple_of(d) {
            return Err(NetError::Indivisible {
                height: zs.height(),
                width: zs.width(),
                divisor: d,
            });
        }

        let mut enc_taps: Vec<Vec<NodeId>> = Vec::new();
        let mut dec_taps: Vec<Vec<NodeId>> = Vec::new();
        let mut heads = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            let mut x = if l == 0 {
                z
            } else {
                let prev = graph.downsample_area(heads[l - 1], 2)?;
                if level.cascade {
                    let zl = graph.downsample_area(z, 1 << l)?;
                    graph.concat_channels(prev, zl)?
                } else {
                    prev
                }
            };
            let mut encs = Vec::with_capacity(level.depth);
            for (stage, merge) in level.encoders.iter().zip(&level.enc_merges) {
                x = apply_stage(graph, params, stage, x)?;
                if let Some(m) = merge {
                    let src = tap(&enc_taps, &dec_taps, m.source);
                    x = apply_merge(graph, params, m, x, src)?;
                }
                encs.push(x);
            }
            let mut decs = Vec::with_capacity(level.depth);
            for (stage, merge) in level.decoders.iter().zip(&level.dec_merges) {
                let up = graph.upsample_bilinear(x, 2)?;
                x = apply_stage(graph, params, stage, up)?;
                if let Some(m) = merge {
                    let Tap::Encoder { stage: i, .. } = m.source else {
                        unreachable!("intra links start at an encoder stage")
                    };
                    x = apply_merge(graph, params, m, x, encs[i - 1])?;
                }
                decs.push(x);
            }
            let h = graph.conv2d(x, params[level.head.w], params[level.head.b], 1)?;
            heads.push(graph.sigmoid(h)?);
            enc_taps.push(encs);
            dec_taps.push(decs);
        }
        Ok(heads)
    }

    /// Evaluates heads as plain `f32` tensors.
    pub fn evaluate(&self, z: &Tensor<f32>) -> Result<Vec<Tensor<f32>>, NetError> {
        let mut g = Graph::<f32>::new();
        let zn = g.constant(z.clone());
        let f = self.forward(&mut g, zn)?;
        Ok(f.heads.iter().map(|&h| g.value(h).clone()).collect())
    }
}

/// Inter-level link into encoder stage `i` of level `prev + 1`, if the
/// spec asks for one and a source of matching resolution exists.
fn inter_source(spec: &MedSpec, prev: &Level, prev_index: usize, i: usize) -> Option<(Tap, usize)> {
    let k = prev.depth;
    let ed: EdSpec = if prev_index == 0 {
        spec.generator()
    } else {
        spec.enhancers()[prev_index - 1]
    };
    if spec.skip.has_inter_enc_enc() && i < k {
        // Encoder stage i+1 of the previous level sits at the same scale.
        let stage = i + 1;
        return Some((
            Tap::Encoder {
                level: prev_index,
                stage,
            },
            ed.channels(stage),
        ));
    }
    if spec.skip.has_inter_dec_enc() && i + 1 < k {
        let stage = k - 1 - i;
        return Some((
            Tap::Decoder {
                level: prev_index,
                stage,
            },
            ed.channels(k - stage),
        ));
    }
    None
}

fn tap(enc: &[Vec<NodeId>], dec: &[Vec<NodeId>], t: Tap) -> NodeId {
    match t {
        Tap::Encoder { level, stage } => enc[level][stage - 1],
        Tap::Decoder { level, stage } => dec[level][stage - 1],
    }
}

fn apply_stage<T: Element>(
    g: &mut Graph<T>,
    p: &[NodeId],
    s: &Stage,
    x: NodeId,
) -> Result<NodeId, NetError> {
    let c = g.conv2d(x, p[s.conv.w], p[s.conv.b], s.conv.stride)?;
    let n = g.batch_norm(c, p[s.norm.gamma], p[s.norm.beta], BN_EPS)?;
    Ok(g.leaky_relu(n, LEAKY_SLOPE)?)
}

fn apply_merge<T: Element>(
    g: &mut Graph<T>,
    p: &[NodeId],
    m: &Merge,
    x: NodeId,
    src: NodeId,
) -> Result<NodeId, NetError> {
    let cat = g.concat_channels(x, src)?;
    Ok(g.conv2d(cat, p[m.conv.w], p[m.conv.b], m.conv.stride)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OpKind;

    fn concat_nodes(spec: &MedSpec, size: usize) -> usize {
        let net = MedNetwork::build(spec, 3).unwrap();
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::full(Shape::image(3, size, size), 0.3));
        net.forward(&mut g, z).unwrap();
        g.count(OpKind::ConcatChannels)
    }

    #[test]
    fn three_level_heads_follow_the_ladder() {
        let spec = MedSpec::med(5, &[4, 3], SkipMode::IntraSkip, false).with_base_channels(2);
        let net = MedNetwork::build(&spec, 3).unwrap();
        let heads = net
            .evaluate(&Tensor::full(Shape::image(3, 64, 64), 0.5))
            .unwrap();
        let sizes: Vec<_> = heads.iter().map(|h| h.shape()).collect();
        assert_eq!(
            sizes,
            [
                Shape::image(3, 64, 64),
                Shape::image(3, 32, 32),
                Shape::image(3, 16, 16)
            ]
        );
        assert!(heads
            .iter()
            .all(|h| h.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn intra_skip_depth_five_has_four_links() {
        let spec = MedSpec::ed(5, SkipMode::IntraSkip).with_base_channels(2);
        assert_eq!(concat_nodes(&spec, 32), 4);
        assert_eq!(
            concat_nodes(&MedSpec::ed(5, SkipMode::NoSkip).with_base_channels(2), 32),
            0
        );
    }

    #[test]
    fn graph_concat_count_matches_closed_form() {
        for skip in SkipMode::ALL {
            for cascade in [false, true] {
                let spec = MedSpec::med(5, &[4, 3], skip, cascade).with_base_channels(2);
                let net = MedNetwork::build(&spec, 3).unwrap();
                let expected = LinkCounts::expected(&spec);
                assert_eq!(net.links(), expected, "{skip:?} {cascade}");
                assert_eq!(
                    concat_nodes(&spec, 64),
                    expected.total(),
                    "{skip:?} {cascade}"
                );
            }
        }
    }

    #[test]
    fn introspect_round_trips() {
        for skip in SkipMode::ALL {
            for cascade in [false, true] {
                let spec = MedSpec::med(4, &[3, 2], skip, cascade)
                    .with_base_channels(3)
                    .with_seed(9);
                assert_eq!(MedNetwork::build(&spec, 5).unwrap().introspect(), spec);
            }
        }
    }

    #[test]
    fn zero_head_weights_give_one_half() {
        let spec = MedSpec::ed(2, SkipMode::NoSkip).with_base_channels(2);
        let mut net = MedNetwork::build(&spec, 3).unwrap();
        let head_w = net
            .param_names()
            .iter()
            .position(|n| n == "g.head.weight")
            .unwrap();
        net.params_mut()[head_w].data_mut().fill(0.0);
        let heads = net
            .evaluate(&Tensor::full(Shape::image(3, 8, 8), 0.2))
            .unwrap();
        assert!(heads[0].data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let net =
            MedNetwork::build(&MedSpec::ed(3, SkipMode::NoSkip).with_base_channels(2), 3).unwrap();
        let err = net
            .evaluate(&Tensor::zeros(Shape::image(3, 12, 16)))
            .unwrap_err();
        assert!(matches!(err, NetError::Indivisible { divisor: 8, .. }));
    }
}
