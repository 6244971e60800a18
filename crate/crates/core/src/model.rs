//! Image encoders, the frozen text stub, prompt banks, the clothes projection
//! and BNNeck classifier heads.
//!
//! All parameters of a model live in one [`ParamStore`] under group prefixes
//! (`raw_encoder/`, `shield_encoder/`, `text_encoder/`, `prompt_bank/`,
//! `proj_c`, `head_id/`, `head_id_s/`). Layers are thin descriptors that read
//! their tensors from the store while recording a [`Graph`].

use rand::Rng;

use crate::archive::Archive;
use crate::data::Image;
use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm1d, Conv2d, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::seeding::stream_rng;
use crate::tensor::Tensor;

pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

pub const RAW_ENCODER: &str = "raw_encoder";
pub const SHIELD_ENCODER: &str = "shield_encoder";
pub const TEXT_ENCODER: &str = "text_encoder";
pub const PROMPT_BANK: &str = "prompt_bank";
pub const PROJ_C: &str = "proj_c";
pub const HEAD_ID: &str = "head_id";
pub const HEAD_ID_S: &str = "head_id_s";

pub const IDENTITY_TEMPLATE: [&str; 5] = ["a", "photo", "of", "a", "person"];
pub const CLOTHES_TEMPLATE: [&str; 4] = ["a", "photo", "of", "clothes"];

/// `[n,3,H,W]` batch in the encoder's normalization.
pub fn images_to_tensor<T: Scalar>(images: &[Image]) -> Result<Tensor<T>> {
    let (h, w) = images.first().map_or((0, 0), Image::size);
    contract!(images.iter().all(|im| im.size() == (h, w)), "images in a batch differ in size");
    let plane = h * w;
    let mut data = vec![T::zero(); images.len() * 3 * plane];
    for (n, im) in images.iter().enumerate() {
        for (p, px) in im.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                let v = (f64::from(px[c]) / 255.0 - CLIP_MEAN[c]) / CLIP_STD[c];
                data[(n * 3 + c) * plane + p] = T::lit(v);
            }
        }
    }
    Tensor::new([images.len(), 3, h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Raw,
    Shielding,
}

impl Stream {
    pub fn prefix(self) -> &'static str {
        match self {
            Stream::Raw => RAW_ENCODER,
            Stream::Shielding => SHIELD_ENCODER,
        }
    }
}

/// Small convolutional image encoder:
/// conv3x3/2 -> relu -> conv3x3/2 -> relu -> avg-pool to a fixed grid -> linear.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderHandle {
    pub stream: Stream,
    pub feature_dim: usize,
    pub trainable: bool,
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    grid: (usize, usize),
}

impl EncoderHandle {
    pub fn toy(stream: Stream, feature_dim: usize, widths: (usize, usize)) -> Self {
        let p = stream.prefix();
        let grid = (8, 4);
        Self {
            stream,
            feature_dim,
            trainable: true,
            conv1: Conv2d {
                name: format!("{p}/conv1"),
                cin: 3,
                cout: widths.0,
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            conv2: Conv2d {
                name: format!("{p}/conv2"),
                cin: widths.0,
                cout: widths.1,
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            fc: Linear {
                name: format!("{p}/fc"),
                din: widths.1 * grid.0 * grid.1,
                dout: feature_dim,
                bias: true,
            },
            grid,
        }
    }

    pub fn prefix(&self) -> &'static str {
        self.stream.prefix()
    }

    /// Input height and width must be multiples of these.
    pub fn size_multiple(&self) -> (usize, usize) {
        (4 * self.grid.0, 4 * self.grid.1)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        self.fc.init(store, (1.0 / self.fc.din as f64).sqrt(), rng);
    }

    /// `[n,3,H,W] -> [n,C]`; parameters receive gradients iff `trainable`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<Var> {
        let shape = g.shape(images).to_vec();
        let (mh, mw) = self.size_multiple();
        contract!(
            shape.len() == 4 && shape[1] == 3 && shape[2] % mh == 0 && shape[3] % mw == 0 && shape[2] > 0,
            "encoder expects [n,3,H,W] with H,W multiples of {mh}x{mw}, got {shape:?}"
        );
        let x = self.conv1.forward(g, store, images, self.trainable)?;
        let x = g.relu(x);
        let x = self.conv2.forward(g, store, x, self.trainable)?;
        let x = g.relu(x);
        let (h, w) = (shape[2] / 4, shape[3] / 4);
        let x = g.avg_pool2d(x, h / self.grid.0, w / self.grid.1)?;
        let x = g.reshape(x, [shape[0], self.fc.din])?;
        self.fc.forward(g, store, x, self.trainable)
    }

    /// Gradient-free forward on a prepared batch.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let frozen = Self {
            trainable: false,
            ..self.clone()
        };
        let x = g.constant(images.clone());
        let f = frozen.forward(&mut g, store, x)?;
        Ok(g.value(f).clone())
    }

    pub fn encode_images<T: Scalar>(&self, store: &ParamStore<T>, images: &[Image]) -> Result<Tensor<T>> {
        if images.is_empty() {
            return Ok(Tensor::zeros([0, self.feature_dim]));
        }
        self.encode(store, &images_to_tensor(images)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Identity,
    Clothes,
}

impl PromptKind {
    pub fn bank_name(self) -> &'static str {
        match self {
            PromptKind::Identity => "prompt_bank/identity",
            PromptKind::Clothes => "prompt_bank/clothes",
        }
    }

    fn template_name(self) -> &'static str {
        match self {
            PromptKind::Identity => "text_encoder/identity_template",
            PromptKind::Clothes => "text_encoder/clothes_template",
        }
    }

    fn template_words(self) -> &'static [&'static str] {
        match self {
            PromptKind::Identity => &IDENTITY_TEMPLATE,
            PromptKind::Clothes => &CLOTHES_TEMPLATE,
        }
    }
}

/// Frozen text stub: mean-pools the template word embeddings together with
/// the learnable tokens, then applies a fixed random affine map to C dims.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub d_tok: usize,
    pub feature_dim: usize,
    pub tokens: usize,
}

impl TextEncoder {
    const WEIGHT: &'static str = "text_encoder/weight";
    const BIAS: &'static str = "text_encoder/bias";

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let mut rng = stream_rng(seed, TEXT_ENCODER, &[]);
        store.insert(
            Self::WEIGHT,
            Tensor::randn([self.d_tok, self.feature_dim], (1.0 / self.d_tok as f64).sqrt(), &mut rng),
        );
        store.insert(Self::BIAS, Tensor::randn([self.feature_dim], 0.01, &mut rng));
        for kind in [PromptKind::Identity, PromptKind::Clothes] {
            let mut sum = vec![T::zero(); self.d_tok];
            for w in kind.template_words() {
                let mut wr = stream_rng(seed, &format!("word:{w}"), &[]);
                let emb: Tensor<T> = Tensor::randn([self.d_tok], 0.02, &mut wr);
                for (s, &e) in sum.iter_mut().zip(emb.data()) {
                    *s += e;
                }
            }
            store.insert(kind.template_name(), Tensor::new([self.d_tok], sum).expect("length d_tok"));
        }
    }

    /// Map token rows `[n, M*d_tok]` to prompt features `[n, C]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, kind: PromptKind, tokens: Var) -> Result<Var> {
        let (m, d) = (self.tokens, self.d_tok);
        contract!(g.shape(tokens).len() == 2 && g.shape(tokens)[1] == m * d, "token rows must be [n, M*d_tok]");
        let denom = T::from_usize_lossy(kind.template_words().len() + m);
        let pool = Tensor::from_fn([m * d, d], |i| {
            let (r, c) = (i / d, i % d);
            if r % d == c {
                T::one() / denom
            } else {
                T::zero()
            }
        });
        let pool = g.constant(pool);
        let template = store.get(kind.template_name())?.map(|v| v / denom);
        let template = g.constant(template);
        let pooled = g.matmul(tokens, pool)?;
        let pooled = g.add_row(pooled, template)?;
        let w = g.param(Self::WEIGHT, store.get(Self::WEIGHT)?, false);
        let b = g.param(Self::BIAS, store.get(Self::BIAS)?, false);
        let y = g.matmul(pooled, w)?;
        g.add_row(y, b)
    }
}

/// Learnable token rows, one per identity and one per clothes class.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub num_identities: usize,
    pub num_clothes: usize,
    pub tokens: usize,
    pub d_tok: usize,
    pub trainable: bool,
}

impl PromptBank {
    pub fn count(&self, kind: PromptKind) -> usize {
        match kind {
            PromptKind::Identity => self.num_identities,
            PromptKind::Clothes => self.num_clothes,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for kind in [PromptKind::Identity, PromptKind::Clothes] {
            store.insert(
                kind.bank_name(),
                Tensor::randn([self.count(kind), self.tokens * self.d_tok], 0.02, rng),
            );
        }
    }

    /// Prompt features for `labels` (or for every class when `None`).
    pub fn features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        text: &TextEncoder,
        kind: PromptKind,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        let count = self.count(kind);
        let bank = g.param(kind.bank_name(), store.get(kind.bank_name())?, self.trainable);
        let rows = match labels {
            Some(l) => {
                if let Some(bad) = l.iter().find(|&&x| x >= count) {
                    return Err(Error::Contract(format!("{kind:?} label {bad} out of range ({count} classes)")));
                }
                g.gather_rows(bank, l)?
            }
            None => bank,
        };
        text.forward(g, store, kind, rows)
    }

    /// Feature of one prompt, without gradient bookkeeping.
    pub fn encode_prompt<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        text: &TextEncoder,
        kind: PromptKind,
        label: usize,
    ) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let v = self.features(&mut g, store, text, kind, Some(&[label]))?;
        Ok(g.value(v).data().to_vec())
    }

    /// `[count, C]` features of every prompt of `kind`.
    pub fn all_features<T: Scalar>(&self, store: &ParamStore<T>, text: &TextEncoder, kind: PromptKind) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let frozen = Self {
            trainable: false,
            ..self.clone()
        };
        let v = frozen.features(&mut g, store, text, kind, None)?;
        Ok(g.value(v).clone())
    }
}

/// Row-wise `features x proj`.
pub fn project_clothes<T: Scalar>(features: &Tensor<T>, proj: &Tensor<T>) -> Result<Tensor<T>> {
    contract!(
        proj.shape().len() == 2 && proj.shape()[0] == proj.shape()[1],
        "projection must be square, got {:?}",
        proj.shape()
    );
    contract!(
        features.shape().len() == 2 && features.shape()[1] == proj.shape()[0],
        "feature dim {:?} does not match projection {:?}",
        features.shape(),
        proj.shape()
    );
    features.matmul(proj)
}

/// BNNeck head: batch norm (shift frozen at zero) then a bias-free linear
/// classifier. Triplet terms use the features entering the head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub prefix: String,
    pub bn: BatchNorm1d,
    pub classifier: Linear,
}

impl ClassifierHead {
    pub fn new(prefix: &str, feature_dim: usize, classes: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            bn: BatchNorm1d {
                name: format!("{prefix}/bn"),
                dim: feature_dim,
                eps: 1e-5,
                momentum: 0.1,
                train_shift: false,
            },
            classifier: Linear {
                name: format!("{prefix}/classifier"),
                din: feature_dim,
                dout: classes,
                bias: false,
            },
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.bn.init(store);
        self.classifier.init(store, 0.001, rng);
    }

    /// Logits from batch statistics; running statistics are updated.
    pub fn forward_train<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, features: Var, trainable: bool) -> Result<Var> {
        let z = self.bn.forward_train(g, store, features, trainable, true)?;
        self.classifier.forward(g, store, z, trainable)
    }

    pub fn forward_eval<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let z = self.bn.forward_eval(g, store, features)?;
        self.classifier.forward(g, store, z, false)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub conv_widths: (usize, usize),
    pub d_tok: usize,
    pub prompt_tokens: usize,
    pub num_identities: usize,
    pub num_clothes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 4 {
            return Err(Error::Config(format!("feature_dim must be at least 4, got {}", self.feature_dim)));
        }
        if self.conv_widths.0 == 0 || self.conv_widths.1 == 0 || self.d_tok == 0 || self.prompt_tokens == 0 {
            return Err(Error::Config("model widths and token counts must be positive".into()));
        }
        if self.num_identities == 0 || self.num_clothes == 0 {
            return Err(Error::Config("model needs at least one identity and one clothes class".into()));
        }
        Ok(())
    }
}

/// The two image encoders plus the text stub, sharing one store.
pub struct ToyEncoders<T> {
    pub store: ParamStore<T>,
    pub raw: EncoderHandle,
    pub shielding: EncoderHandle,
    pub text: TextEncoder,
}

pub fn build_toy_encoders<T: Scalar>(feature_dim: usize, seed: u64) -> Result<ToyEncoders<T>> {
    build_encoders(feature_dim, (8, 16), 64, 4, seed)
}

fn build_encoders<T: Scalar>(
    feature_dim: usize,
    widths: (usize, usize),
    d_tok: usize,
    tokens: usize,
    seed: u64,
) -> Result<ToyEncoders<T>> {
    contract!(feature_dim >= 4, "feature_dim must be at least 4, got {feature_dim}");
    let mut store = ParamStore::new();
    let raw = EncoderHandle::toy(Stream::Raw, feature_dim, widths);
    let shielding = EncoderHandle::toy(Stream::Shielding, feature_dim, widths);
    raw.init(&mut store, &mut stream_rng(seed, RAW_ENCODER, &[]));
    // Both streams start from the same weights, as from one pretrained backbone.
    let names: Vec<String> = store.names_with_prefix(RAW_ENCODER).cloned().collect();
    for n in names {
        let t = store.get(&n)?.clone();
        store.insert(n.replacen(RAW_ENCODER, SHIELD_ENCODER, 1), t);
    }
    let text = TextEncoder {
        d_tok,
        feature_dim,
        tokens,
    };
    text.init(&mut store, seed);
    Ok(ToyEncoders {
        store,
        raw,
        shielding,
        text,
    })
}

/// Everything trained by the two stages.
#[derive(Clone, Debug)]
pub struct CcafModel<T> {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore<T>,
    pub raw: EncoderHandle,
    pub shield: EncoderHandle,
    pub text: TextEncoder,
    pub bank: PromptBank,
    pub head_id: ClassifierHead,
    pub head_id_s: ClassifierHead,
}

impl<T: Scalar> CcafModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.feature_dim;
        let enc = build_encoders::<T>(c, config.conv_widths, config.d_tok, config.prompt_tokens, seed)?;
        let mut store = enc.store;
        let bank = PromptBank {
            num_identities: config.num_identities,
            num_clothes: config.num_clothes,
            tokens: config.prompt_tokens,
            d_tok: config.d_tok,
            trainable: true,
        };
        bank.init(&mut store, &mut stream_rng(seed, PROMPT_BANK, &[]));
        store.insert(
            PROJ_C,
            Tensor::randn([c, c], (1.0 / c as f64).sqrt(), &mut stream_rng(seed, PROJ_C, &[])),
        );
        let head_id = ClassifierHead::new(HEAD_ID, c, config.num_identities);
        let head_id_s = ClassifierHead::new(HEAD_ID_S, c, config.num_identities);
        head_id.init(&mut store, &mut stream_rng(seed, HEAD_ID, &[]));
        head_id_s.init(&mut store, &mut stream_rng(seed, HEAD_ID_S, &[]));
        Ok(Self {
            config,
            seed,
            store,
            raw: enc.raw,
            shield: enc.shielding,
            text: enc.text,
            bank,
            head_id,
            head_id_s,
        })
    }

    pub fn checksum(&self, group: &str) -> String {
        self.store.checksum(group)
    }

    /// Copy every parameter into an archive along with the model metadata.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        let c = &self.config;
        a.set_meta("C", c.feature_dim);
        a.set_meta("M", c.prompt_tokens);
        a.set_meta("K", c.num_identities);
        a.set_meta("K_c", c.num_clothes);
        a.set_meta("d_tok", c.d_tok);
        a.set_meta("conv_widths", format!("{},{}", c.conv_widths.0, c.conv_widths.1));
        a.set_meta("seed", self.seed);
        a.set_meta("dtype", T::dtype_name());
        for (name, t) in self.store.iter() {
            a.insert(name.clone(), t);
        }
        a
    }

    pub fn config_from_archive(a: &Archive) -> Result<ModelConfig> {
        let widths = a.meta("conv_widths")?;
        let (w0, w1) = widths
            .split_once(',')
            .and_then(|(x, y)| Some((x.parse().ok()?, y.parse().ok()?)))
            .ok_or_else(|| Error::Corruption(format!("bad conv_widths `{widths}`")))?;
        Ok(ModelConfig {
            feature_dim: a.meta_parse("C")?,
            conv_widths: (w0, w1),
            d_tok: a.meta_parse("d_tok")?,
            prompt_tokens: a.meta_parse("M")?,
            num_identities: a.meta_parse("K")?,
            num_clothes: a.meta_parse("K_c")?,
        })
    }

    /// Rebuild a model from an archive written by [`Self::to_archive`].
    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config = Self::config_from_archive(a)?;
        let seed = a.meta_parse("seed")?;
        let mut model = Self::new(config, seed)?;
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let t: Tensor<T> = a.get(&name)?;
            let slot = model.store.get_mut(&name)?;
            if slot.shape() != t.shape() {
                return Err(Error::Corruption(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }
}
