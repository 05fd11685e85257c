//! The full network: four partial-convolution encoder blocks, a two-stage
//! dilated bottleneck, four decoder stages with skip fusion, a sigmoid RGB
//! head and a multi-scale classification head.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmarcError};
use crate::params::{ParamId, ParamStore};
use crate::pconv::{self, MaskPair, Masked, PConvBlock};
use crate::tensor::kernels::Padding;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Prefix shared by every classification-head parameter name.
pub const HEAD_PREFIX: &str = "cls_head.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub bottleneck_channels: [usize; 2],
    pub num_classes: usize,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
    pub se_ratio: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::scaled(224, 64)
    }
}

impl ArchConfig {
    /// Widths proportional to `base`: bottleneck `16·base, 32·base`, one
    /// hidden head layer of `8·base`.
    pub fn scaled(input_size: usize, base: usize) -> Self {
        Self {
            input_size,
            base_channels: base,
            bottleneck_channels: [16 * base, 32 * base],
            num_classes: 4,
            head_hidden: vec![8 * base],
            dropout: 0.25,
            se_ratio: 16,
        }
    }

    /// 64×64 input, base width 16.
    pub fn desk() -> Self {
        Self::scaled(64, 16)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            errs.push(format!("input_size {} must be a positive multiple of 16", self.input_size));
        }
        if self.base_channels < 4 {
            errs.push(format!("base_channels {} must be >= 4", self.base_channels));
        }
        if self.bottleneck_channels.contains(&0) {
            errs.push("bottleneck_channels must be positive".into());
        }
        if self.num_classes < 2 {
            errs.push(format!("num_classes {} must be >= 2", self.num_classes));
        }
        if self.head_hidden.contains(&0) {
            errs.push("head_hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.se_ratio == 0 {
            errs.push("se_ratio must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SmarcError::Config(errs))
        }
    }

    /// Encoder block widths, shallow to deep.
    pub fn encoder_widths(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b]
    }

    /// Length of the concatenated GAP vector feeding the class head.
    pub fn cls_features(&self) -> usize {
        let w = self.encoder_widths();
        w[2] + w[3] + self.bottleneck_channels[1]
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub name: String,
    pub up_weight: ParamId,
    pub up_bias: ParamId,
    pub block: PConvBlock,
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct SmarcModel<T: Real = f32> {
    pub cfg: ArchConfig,
    pub params: ParamStore<T>,
    pub encoder: Vec<PConvBlock>,
    pub bottleneck: Vec<PConvBlock>,
    /// `dec4` first, `dec1` last.
    pub decoder: Vec<DecoderStage>,
    pub rgb_head: DenseLayer,
    pub cls_head: Vec<DenseLayer>,
}

/// Tensors produced by [`SmarcModel::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T: Real = f32> {
    pub reconstruction: Tensor<T>,
    pub class_logits: Tensor<T>,
    pub class_probs: Tensor<T>,
    pub final_mask: Tensor<T>,
}

/// Tape nodes of one forward pass, plus the shape of every named stage.
#[derive(Clone, Debug)]
pub struct ForwardVars<T: Real = f32> {
    pub reconstruction: Var,
    pub logits: Var,
    pub probs: Var,
    pub final_mask: Tensor<T>,
    pub trace: Vec<(String, Vec<usize>)>,
}

struct Encoded<T: Real> {
    /// `(s_i^y, s_i^m)` before pooling.
    skips: Vec<Masked<T>>,
    deepest: Masked<T>,
}

impl<T: Real> SmarcModel<T> {
    pub fn build(cfg: ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let r = cfg.se_ratio;

        let widths = cfg.encoder_widths();
        let mut encoder = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            encoder.push(PConvBlock::new(&mut params, &format!("enc{}", i + 1), cin, w, 1, r, &mut rng)?);
            cin = w;
        }

        let [b1, b2] = cfg.bottleneck_channels;
        let bottleneck = vec![
            PConvBlock::new(&mut params, "bottle1", cin, b1, 2, r, &mut rng)?,
            PConvBlock::new(&mut params, "bottle2", b1, b2, 4, r, &mut rng)?,
        ];
        cin = b2;

        let mut decoder = Vec::with_capacity(4);
        for level in (1..=4).rev() {
            let f = widths[level - 1];
            let name = format!("dec{level}");
            let up_weight = params.add_kernel(format!("{name}.up.weight"), &[3, 3, f, cin], 9 * cin, &mut rng)?;
            let up_bias = params.add_bias(format!("{name}.up.bias"), f)?;
            let block = PConvBlock::new(&mut params, &name, 2 * f, f, 1, r, &mut rng)?;
            decoder.push(DecoderStage {
                name,
                up_weight,
                up_bias,
                block,
            });
            cin = f;
        }

        let rgb_head = DenseLayer {
            weight: params.add_kernel("rgb_head.weight", &[1, 1, cin, 3], cin, &mut rng)?,
            bias: params.add_bias("rgb_head.bias", 3)?,
        };

        let mut cls_head = Vec::new();
        let mut fin = cfg.cls_features();
        for (i, &u) in cfg.head_hidden.iter().enumerate() {
            let name = format!("{HEAD_PREFIX}dense{}", i + 1);
            cls_head.push(DenseLayer {
                weight: params.add_kernel(format!("{name}.weight"), &[fin, u], fin, &mut rng)?,
                bias: params.add_bias(format!("{name}.bias"), u)?,
            });
            fin = u;
        }
        cls_head.push(DenseLayer {
            weight: params.add_kernel(format!("{HEAD_PREFIX}out.weight"), &[fin, cfg.num_classes], fin, &mut rng)?,
            bias: params.add_bias(format!("{HEAD_PREFIX}out.bias"), cfg.num_classes)?,
        });

        Ok(Self {
            cfg,
            params,
            encoder,
            bottleneck,
            decoder,
            rgb_head,
            cls_head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// `true` for every parameter outside the classification head.
    pub fn trunk_frozen_set(&self) -> Arc<Vec<bool>> {
        Arc::new(self.params.iter().map(|(_, p)| !p.name.starts_with(HEAD_PREFIX)).collect())
    }

    fn check_input(&self, input: &MaskPair<T>) -> Result<()> {
        let (_, h, w, c) = input.features.nhwc("forward")?;
        let s = self.cfg.input_size;
        if h != s || w != s || c != 3 {
            return Err(SmarcError::invalid(
                "forward",
                format!("expected B×{s}×{s}×3 input, got {:?}", input.features.shape()),
            ));
        }
        if input.mask.shape() != [input.features.shape()[0], s, s, 1] {
            return Err(SmarcError::shape("forward mask", input.features.shape(), input.mask.shape()));
        }
        input.mask.check_binary("forward")
    }

    fn encode(&self, g: &mut Graph<T>, x: Masked<T>, trace: &mut Vec<(String, Vec<usize>)>) -> Result<Encoded<T>> {
        let mut skips = Vec::with_capacity(4);
        let mut cur = x;
        for (i, block) in self.encoder.iter().enumerate() {
            let s = block.apply(g, &self.params, &cur)?;
            trace.push((format!("s{}.y", i + 1), g.shape(s.features).to_vec()));
            trace.push((format!("s{}.m", i + 1), s.mask.shape().to_vec()));
            cur = pconv::downsample(g, &s)?;
            trace.push((format!("x{}", i + 1), g.shape(cur.features).to_vec()));
            trace.push((format!("m{}", i + 1), cur.mask.shape().to_vec()));
            skips.push(s);
        }
        Ok(Encoded { skips, deepest: cur })
    }

    fn bottleneck(&self, g: &mut Graph<T>, deepest: &Masked<T>, trace: &mut Vec<(String, Vec<usize>)>) -> Result<Masked<T>> {
        let mut cur = deepest.clone();
        for (i, block) in self.bottleneck.iter().enumerate() {
            cur = block.apply(g, &self.params, &cur)?;
            trace.push((format!("bottle{}", i + 1), g.shape(cur.features).to_vec()));
        }
        trace.push(("b".into(), g.shape(cur.features).to_vec()));
        trace.push(("b_m".into(), cur.mask.shape().to_vec()));
        Ok(cur)
    }

    fn decode(
        &self,
        g: &mut Graph<T>,
        b: &Masked<T>,
        skips: &[Masked<T>],
        trace: &mut Vec<(String, Vec<usize>)>,
    ) -> Result<Masked<T>> {
        let mut cur = b.clone();
        for (stage, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let (_, h, w, _) = g.value(cur.features).nhwc("decode")?;
            let skip_shape = g.shape(skip.features).to_vec();
            if skip_shape[1] != 2 * h || skip_shape[2] != 2 * w {
                return Err(SmarcError::invalid(
                    "decode",
                    format!("stage {}: {h}×{w} input cannot meet skip {skip_shape:?}", stage.name),
                ));
            }
            let wv = g.param(&self.params, stage.up_weight);
            let bv = g.param(&self.params, stage.up_bias);
            let up = g.conv_transpose2d(cur.features, wv, Some(bv), 2, (2 * h, 2 * w))?;
            let up_mask = pconv::mask_upsample(&cur.mask)?;
            let fused = g.concat(up, skip.features)?;
            let mask = pconv::mask_merge(&up_mask, &skip.mask)?;
            cur = stage.block.apply(g, &self.params, &Masked { features: fused, mask })?;
            trace.push((format!("{}.y", stage.name), g.shape(cur.features).to_vec()));
        }
        trace.push(("y".into(), g.shape(cur.features).to_vec()));
        trace.push(("m".into(), cur.mask.shape().to_vec()));
        Ok(cur)
    }

    /// Builds the forward pass on `g`. Dropout is active only when `dropout_rng`
    /// is given.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        input: &MaskPair<T>,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardVars<T>> {
        self.check_input(input)?;
        let mut trace = vec![
            ("input".to_string(), input.features.shape().to_vec()),
            ("input.m".to_string(), input.mask.shape().to_vec()),
        ];
        let x = Masked::input(g, input);
        let enc = self.encode(g, x, &mut trace)?;
        let b = self.bottleneck(g, &enc.deepest, &mut trace)?;
        let y = self.decode(g, &b, &enc.skips, &mut trace)?;

        let w = g.param(&self.params, self.rgb_head.weight);
        let bias = g.param(&self.params, self.rgb_head.bias);
        let rgb = g.conv2d(y.features, w, Some(bias), 1, 1, Padding::Same)?;
        let reconstruction = g.sigmoid(rgb)?;
        trace.push(("reconstruction".into(), g.shape(reconstruction).to_vec()));

        let p3 = g.global_avg_pool(enc.skips[2].features)?;
        let p4 = g.global_avg_pool(enc.skips[3].features)?;
        let pb = g.global_avg_pool(b.features)?;
        let f = g.concat(p3, p4)?;
        let mut h = g.concat(f, pb)?;
        trace.push(("f_cls".into(), g.shape(h).to_vec()));
        let (last, hidden) = self.cls_head.split_last().expect("head has an output layer");
        for layer in hidden {
            let w = g.param(&self.params, layer.weight);
            let b = g.param(&self.params, layer.bias);
            h = g.dense(h, w, Some(b))?;
            h = g.relu(h)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                h = g.dropout(h, self.cfg.dropout, rng)?;
            }
        }
        let w = g.param(&self.params, last.weight);
        let b = g.param(&self.params, last.bias);
        let logits = g.dense(h, w, Some(b))?;
        let probs = g.softmax(logits)?;
        trace.push(("probs".into(), g.shape(probs).to_vec()));

        Ok(ForwardVars {
            reconstruction,
            logits,
            probs,
            final_mask: y.mask,
            trace,
        })
    }

    /// Forward pass without gradient bookkeeping beyond the tape itself.
    pub fn forward(&self, input: &MaskPair<T>, dropout_rng: Option<&mut dyn RngCore>) -> Result<ModelOutput<T>> {
        let mut g = Graph::new();
        let fv = self.forward_graph(&mut g, input, dropout_rng)?;
        Ok(ModelOutput {
            reconstruction: g.value(fv.reconstruction).clone(),
            class_logits: g.value(fv.logits).clone(),
            class_probs: g.value(fv.probs).clone(),
            final_mask: fv.final_mask,
        })
    }
}

/// Millions of parameters divided by seconds per image.
pub fn param_throughput(param_count: usize, seconds_per_image: f64) -> f64 {
    param_count as f64 / 1e6 / seconds_per_image
}

/// Millions of parameters divided by the total timed seconds over the set.
pub fn param_throughput_total(param_count: usize, total_seconds: f64) -> f64 {
    param_count as f64 / 1e6 / total_seconds
}

/// Named stage shapes of a batch-1 forward pass, by shape arithmetic alone.
/// Names match [`ForwardVars::trace`].
pub fn shape_trace(cfg: &ArchConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let s = cfg.input_size;
    let widths = cfg.encoder_widths();
    let mut t: Vec<(String, Vec<usize>)> = vec![
        ("input".into(), vec![1, s, s, 3]),
        ("input.m".into(), vec![1, s, s, 1]),
    ];
    let mut hw = s;
    for (i, &c) in widths.iter().enumerate() {
        t.push((format!("s{}.y", i + 1), vec![1, hw, hw, c]));
        t.push((format!("s{}.m", i + 1), vec![1, hw, hw, 1]));
        hw /= 2;
        t.push((format!("x{}", i + 1), vec![1, hw, hw, c]));
        t.push((format!("m{}", i + 1), vec![1, hw, hw, 1]));
    }
    for (i, &c) in cfg.bottleneck_channels.iter().enumerate() {
        t.push((format!("bottle{}", i + 1), vec![1, hw, hw, c]));
    }
    t.push(("b".into(), vec![1, hw, hw, cfg.bottleneck_channels[1]]));
    t.push(("b_m".into(), vec![1, hw, hw, 1]));
    for level in (1..=4).rev() {
        hw *= 2;
        t.push((format!("dec{level}.y"), vec![1, hw, hw, widths[level - 1]]));
    }
    t.push(("y".into(), vec![1, s, s, widths[0]]));
    t.push(("m".into(), vec![1, s, s, 1]));
    t.push(("reconstruction".into(), vec![1, s, s, 3]));
    t.push(("f_cls".into(), vec![1, cfg.cls_features()]));
    t.push(("probs".into(), vec![1, cfg.num_classes]));
    Ok(t)
}

/// The masks every stage of the network would carry for `mask`
/// (`B×S×S×1`), computed without any weights.
pub fn mask_path<T: Real>(cfg: &ArchConfig, mask: &Tensor<T>) -> Result<Vec<(String, Tensor<T>)>> {
    cfg.validate()?;
    let block = |m: &Tensor<T>, dilation: usize| -> Result<Tensor<T>> {
        let m = pconv::propagate_mask(m, 3, dilation)?;
        pconv::propagate_mask(&m, 3, dilation)
    };
    let mut out = Vec::new();
    let mut skips = Vec::new();
    let mut cur = mask.clone();
    for i in 1..=4 {
        let s = block(&cur, 1)?;
        out.push((format!("s{i}.m"), s.clone()));
        cur = pconv::mask_pool(&s)?;
        out.push((format!("m{i}"), cur.clone()));
        skips.push(s);
    }
    cur = block(&cur, 2)?;
    cur = block(&cur, 4)?;
    out.push(("b_m".into(), cur.clone()));
    for (level, skip) in (1..=4).rev().zip(skips.iter().rev()) {
        let merged = pconv::mask_merge(&pconv::mask_upsample(&cur)?, skip)?;
        cur = block(&merged, 1)?;
        out.push((format!("dec{level}.m"), cur.clone()));
    }
    out.push(("m".into(), cur));
    Ok(out)
}
