//! Model assembly: CardioCaps and the two CNN baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::autodiff::{Tape, Tensor, Var, NORM_EPS};
use crate::capsule::{
    classify, dynamic_routing, AffineKind, AffineTransform, AttentionProjection, CapsuleBank, FcDecoder, Linear,
    Prediction, PrimaryCapsules, RegressionHead, RoutingMethod, RoutingSpec,
};
use crate::data::{SampleBatch, POSITIVE_CLASS};
use crate::error::{Error, Result};
use crate::objectives::{
    cardiocaps_loss, one_hot, weighted_cross_entropy, Auxiliary, LossParts, MarginLossParams, WeightedLossParams,
};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    CardioCaps,
    /// Two conv layers, each followed by 2×2 max pooling.
    Cnn1,
    /// Two conv layers with a single 2×2 max pool after the last.
    Cnn2,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cardiocaps" => Ok(Architecture::CardioCaps),
            "cnn1" => Ok(Architecture::Cnn1),
            "cnn2" => Ok(Architecture::Cnn2),
            other => Err(Error::config(format!("unknown architecture `{other}`"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::CardioCaps => "cardiocaps",
            Architecture::Cnn1 => "cnn1",
            Architecture::Cnn2 => "cnn2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Channels of the first conv layer and of the primary capsule conv.
    pub hidden_dim: usize,
    pub conv_kernel: usize,
    pub primary_stride: usize,
    pub d_primary: usize,
    pub d_digit: usize,
    pub n_classes: usize,
    pub affine_kind: AffineKind,
    pub routing: RoutingSpec,
    pub margin: MarginLossParams,
    pub loss: WeightedLossParams,
    /// Kernel of the CNN baselines' conv layers (padded to keep size).
    pub cnn_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::CardioCaps,
            hidden_dim: 32,
            conv_kernel: 9,
            primary_stride: 2,
            d_primary: 8,
            d_digit: 16,
            n_classes: 2,
            affine_kind: AffineKind::Shared,
            routing: RoutingSpec::default(),
            margin: MarginLossParams::default(),
            loss: WeightedLossParams::default(),
            cnn_kernel: 3,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: 16 hidden channels, otherwise the defaults.
    pub fn small() -> Self {
        ModelConfig {
            hidden_dim: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        self.loss.validate()?;
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("conv_kernel", self.conv_kernel),
            ("primary_stride", self.primary_stride),
            ("d_primary", self.d_primary),
            ("d_digit", self.d_digit),
            ("cnn_kernel", self.cnn_kernel),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if self.n_classes != 2 {
            return Err(Error::config("only binary classification is supported (n_classes = 2)"));
        }
        if self.cnn_kernel.is_multiple_of(2) {
            return Err(Error::config("cnn_kernel must be odd"));
        }
        if self.routing.method == RoutingMethod::Dynamic && self.routing.iterations == 0 {
            return Err(Error::config("dynamic routing needs at least one iteration"));
        }
        Ok(())
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, n_classes]`: digit-capsule lengths or CNN logits.
    pub scores: Var,
    pub digits: Option<CapsuleBank>,
    /// `[B]`
    pub regression: Option<Var>,
    /// `[B, C·H·W]`
    pub reconstruction: Option<Var>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

impl ConvLayer {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        ConvLayer {
            weight: store.add(format!("{name}.weight"), Tensor::uniform([c_out, c_in, k, k], bound, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::uniform([1, c_out, 1, 1], bound, rng)),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, padding: usize) -> Result<Var> {
        let y = tape.conv2d(x, p.var(self.weight), 1, padding)?;
        let y = tape.add(y, p.var(self.bias))?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CapsBody {
    conv: ConvLayer,
    primary: PrimaryCapsules,
    affine: AffineTransform,
    attention: Option<AttentionProjection>,
    regression: RegressionHead,
    decoder: FcDecoder,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CnnBody {
    convs: Vec<ConvLayer>,
    pool_every: bool,
    head: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum Body {
    Caps(CapsBody),
    Cnn(CnnBody),
}

/// A built model: configuration, parameters and layer wiring.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    pub config: ModelConfig,
    /// `[C, H, W]`
    pub input_shape: [usize; 3],
    pub params: ParamStore,
    body: Body,
}

const POOL: usize = 2;
/// Stream of the experiment seed reserved for parameter initialization.
pub const INIT_STREAM: u64 = 1 << 48;

/// Builds a model for `[C, H, W]` inputs with parameters drawn from `seed`.
pub fn build_model(cfg: &ModelConfig, input_shape: [usize; 3], seed: u64) -> Result<Network> {
    cfg.validate()?;
    let [c, h, w] = input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let mut store = ParamStore::new();
    let body = match cfg.architecture {
        Architecture::CardioCaps => {
            let k = cfg.conv_kernel;
            if h < k || w < k {
                return Err(Error::config(format!("conv kernel {k} does not fit a {h}x{w} input")));
            }
            let (fh, fw) = (h - k + 1, w - k + 1);
            let conv = ConvLayer::new(&mut store, "conv", c, cfg.hidden_dim, k, &mut rng);
            let primary = PrimaryCapsules::new(
                &mut store,
                cfg.hidden_dim,
                cfg.hidden_dim,
                cfg.d_primary,
                k,
                cfg.primary_stride,
                &mut rng,
            )?;
            let grid = primary.grid_for(fh, fw).ok_or_else(|| {
                Error::config(format!(
                    "primary kernel {k} does not fit the {fh}x{fw} feature map from a {h}x{w} input"
                ))
            })?;
            let n_in = grid.n_caps();
            let affine = AffineTransform::new(
                &mut store,
                cfg.affine_kind,
                n_in,
                cfg.d_primary,
                cfg.n_classes,
                cfg.d_digit,
                Some(grid),
                &mut rng,
            )?;
            let attention = match cfg.routing.method {
                RoutingMethod::Attention => Some(AttentionProjection::new(&mut store, cfg.d_digit, &mut rng)),
                RoutingMethod::Dynamic => None,
            };
            let regression = RegressionHead::new(&mut store, cfg.n_classes, cfg.d_digit, &mut rng);
            let decoder = FcDecoder::new(&mut store, cfg.n_classes, cfg.d_digit, c * h * w, &mut rng);
            Body::Caps(CapsBody {
                conv,
                primary,
                affine,
                attention,
                regression,
                decoder,
            })
        }
        Architecture::Cnn1 | Architecture::Cnn2 => {
            let pool_every = cfg.architecture == Architecture::Cnn1;
            let widths = [cfg.hidden_dim, 2 * cfg.hidden_dim];
            let (mut sh, mut sw, mut ch) = (h, w, c);
            let mut convs = Vec::new();
            for (i, &width) in widths.iter().enumerate() {
                convs.push(ConvLayer::new(&mut store, &format!("conv{}", i + 1), ch, width, cfg.cnn_kernel, &mut rng));
                ch = width;
                if pool_every || i + 1 == widths.len() {
                    if sh < POOL || sw < POOL {
                        return Err(Error::config(format!("cannot pool a {sh}x{sw} feature map")));
                    }
                    sh /= POOL;
                    sw /= POOL;
                }
            }
            let head = Linear::new(&mut store, "head", ch * sh * sw, cfg.n_classes, &mut rng);
            Body::Cnn(CnnBody { convs, pool_every, head })
        }
    };
    Ok(Network {
        config: cfg.clone(),
        input_shape,
        params: store,
        body,
    })
}

impl Network {
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Replaces the parameters, checking names and shapes.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::config(format!(
                "parameter count {} does not match model's {}",
                params.len(),
                self.params.len()
            )));
        }
        for id in self.params.ids() {
            if params.name(id) != self.params.name(id) || params.get(id).shape() != self.params.get(id).shape() {
                return Err(Error::config(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    self.params.name(id),
                    self.params.get(id).shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// `images` is `[B, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<Forward> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::dim("forward", &s, &self.input_shape));
        }
        match &self.body {
            Body::Caps(m) => {
                let features = m.conv.forward(tape, p, images, 0)?;
                let u = m.primary.forward(tape, p, features)?;
                let votes = m.affine.compute_votes(tape, p, &u)?;
                let (digits, _) = match &m.attention {
                    Some(att) => att.route(tape, p, &votes, &self.config.routing)?,
                    None => dynamic_routing(tape, &votes, self.config.routing.iterations)?,
                };
                let scores = tape.vector_norm(digits.activations, NORM_EPS)?;
                let regression = m.regression.forward(tape, p, &digits)?;
                let reconstruction = m.decoder.forward(tape, p, &digits)?;
                Ok(Forward {
                    scores,
                    digits: Some(digits),
                    regression: Some(regression),
                    reconstruction: Some(reconstruction),
                })
            }
            Body::Cnn(m) => {
                let mut x = images;
                let pad = self.config.cnn_kernel / 2;
                for (i, conv) in m.convs.iter().enumerate() {
                    x = conv.forward(tape, p, x, pad)?;
                    if m.pool_every || i + 1 == m.convs.len() {
                        x = tape.max_pool2d(x, POOL)?;
                    }
                }
                let b = s[0];
                let n = tape.value(x).len() / b;
                let flat = tape.reshape(x, &[b, n])?;
                Ok(Forward {
                    scores: m.head.forward(tape, p, flat)?,
                    digits: None,
                    regression: None,
                    reconstruction: None,
                })
            }
        }
    }

    /// Training objective for one batch. Auxiliary terms enter only when their
    /// coefficient is positive.
    pub fn loss(&self, tape: &mut Tape, out: &Forward, batch: &SampleBatch, weights: &WeightedLossParams) -> Result<LossParts> {
        match self.body {
            Body::Caps(_) => {
                let targets = one_hot(&batch.labels, self.config.n_classes);
                let b = batch.labels.len();
                let flat = batch.images.reshape([b, batch.images.len() / b])?;
                let aux = Auxiliary {
                    regression: out.regression.filter(|_| weights.lambda_reg > 0.0).map(|v| (v, &batch.y_reg)),
                    reconstruction: out.reconstruction.filter(|_| weights.lambda_recon > 0.0).map(|v| (v, &flat)),
                };
                cardiocaps_loss(tape, out.scores, &targets, aux, &self.config.margin, weights)
            }
            Body::Cnn(_) => {
                weights.validate()?;
                let cls = weighted_cross_entropy(tape, out.scores, &batch.labels, &weights.class_weights())?;
                Ok(LossParts {
                    total: cls,
                    classification: cls,
                    regression: None,
                    reconstruction: None,
                })
            }
        }
    }

    /// Class and positive-class score per sample: the positive digit capsule's
    /// length for CardioCaps, the softmax probability for the CNNs.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &p, x)?;
        match self.body {
            Body::Caps(_) => {
                let digits = out.digits.expect("capsule forward yields digits");
                classify(tape.value(digits.activations), POSITIVE_CLASS)
            }
            Body::Cnn(_) => {
                let probs = tape.softmax(out.scores, 1)?;
                let c = self.config.n_classes;
                Ok(tape
                    .value(probs)
                    .data()
                    .chunks(c)
                    .map(|row| {
                        let mut class = 0;
                        for k in 1..c {
                            if row[k] > row[class] {
                                class = k;
                            }
                        }
                        Prediction {
                            class,
                            score: row[POSITIVE_CLASS],
                        }
                    })
                    .collect())
            }
        }
    }
}

/// Finite-difference check of the full training loss with respect to every
/// parameter of `net` on one batch.
pub fn gradcheck_network(
    net: &Network,
    batch: &SampleBatch,
    weights: &WeightedLossParams,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let inputs: Vec<Tensor> = net.params.ids().map(|id| net.params.get(id).clone()).collect();
    check_gradients(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let x = tape.constant(batch.images.clone());
            let out = net.forward(tape, &p, x)?;
            Ok(net.loss(tape, &out, batch, weights)?.total)
        },
        &inputs,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cfg: &ModelConfig, input: [usize; 3]) -> (Vec<usize>, Option<Vec<usize>>) {
        let net = build_model(cfg, input, 1).unwrap();
        let mut tape = Tape::new();
        let p = net.params.bind(&mut tape, true);
        let mut shape = vec![2];
        shape.extend_from_slice(&input);
        let x = tape.constant(Tensor::full(shape, 0.5));
        let out = net.forward(&mut tape, &p, x).unwrap();
        let digits = out.digits.map(|d| tape.shape(d.activations).to_vec());
        (tape.shape(out.scores).to_vec(), digits)
    }

    #[test]
    fn default_digit_bank_shape() {
        let (scores, digits) = run(&ModelConfig::default(), [1, 32, 32]);
        assert_eq!(scores, vec![2, 2]);
        assert_eq!(digits, Some(vec![2, 2, 16]));
    }

    #[test]
    fn small_preset_has_128_primary_capsules() {
        let net = build_model(&ModelConfig::small(), [1, 32, 32], 0).unwrap();
        match &net.body {
            Body::Caps(m) => assert_eq!(m.affine.n_in, 128),
            Body::Cnn(_) => unreachable!(),
        }
    }

    #[test]
    fn baselines_emit_two_logits() {
        for arch in [Architecture::Cnn1, Architecture::Cnn2] {
            let cfg = ModelConfig {
                architecture: arch,
                hidden_dim: 4,
                ..ModelConfig::default()
            };
            assert_eq!(run(&cfg, [1, 16, 16]).0, vec![2, 2]);
        }
    }

    #[test]
    fn dynamic_and_conv_variants_build() {
        let cfg = ModelConfig {
            hidden_dim: 8,
            affine_kind: AffineKind::Conv,
            routing: RoutingSpec::dynamic(2),
            ..ModelConfig::default()
        };
        assert_eq!(run(&cfg, [3, 24, 24]).1, Some(vec![2, 2, 16]));
    }

    #[test]
    fn rejects_inputs_too_small() {
        match build_model(&ModelConfig::small(), [1, 12, 12], 0) {
            Err(Error::Config(msg)) => assert!(msg.contains("4x4"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&ModelConfig::small(), [1, 32, 32], 7).unwrap();
        let b = build_model(&ModelConfig::small(), [1, 32, 32], 7).unwrap();
        assert_eq!(a.params, b.params);
    }
}
