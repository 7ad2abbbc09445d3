//! Dual-branch segmentation network: hierarchical transformer backbone, a
//! fixed-resolution spatial branch, gated fusion with offset resampling and
//! an upsampling decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use stormtail_core::{Error, Result};

use crate::graph::{ConvSpec, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Stride of this stage relative to the previous one.
    pub downsample: usize,
    /// Key/value spatial reduction of the attention layers.
    pub sr_ratio: usize,
}

impl StageConfig {
    pub const fn new(embed_dim: usize, depth: usize, heads: usize, downsample: usize, sr_ratio: usize) -> Self {
        Self {
            embed_dim,
            depth,
            heads,
            downsample,
            sr_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Backbone and spatial branch fused at the spatial resolution.
    DualPath,
    /// Backbone features only, fused at the first stage's resolution.
    BackboneOnly,
    /// Spatial branch only.
    SpatialOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub architecture: Architecture,
    pub backbone_stages: Vec<StageConfig>,
    pub spatial_branch_dim: usize,
    pub spatial_branch_depth: usize,
    pub spatial_branch_heads: usize,
    pub spatial_branch_sr: usize,
    pub spatial_resolution_factor: usize,
    /// Width of each per-branch 1x1 projection ahead of the fusion concat.
    pub projection_dim: usize,
    /// Channel count of the fused map.
    pub fusion_dim: usize,
    pub fusion_groups: usize,
    pub se_reduction: usize,
    /// UpBlock widths; the last entry repeats when more blocks are needed.
    pub decoder_dims: Vec<usize>,
    pub mlp_ratio: usize,
    /// Offset resampling in the fusion stage.
    pub resample: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl ModelConfig {
    /// Two-stage configuration sized for 32x32 desk runs.
    pub fn small() -> Self {
        Self {
            in_channels: stormtail_core::data::NUM_CHANNELS,
            num_classes: 6,
            architecture: Architecture::DualPath,
            backbone_stages: vec![StageConfig::new(16, 1, 1, 4, 2), StageConfig::new(32, 1, 2, 2, 1)],
            spatial_branch_dim: 16,
            spatial_branch_depth: 1,
            spatial_branch_heads: 1,
            spatial_branch_sr: 4,
            spatial_resolution_factor: 2,
            projection_dim: 16,
            fusion_dim: 32,
            fusion_groups: 4,
            se_reduction: 4,
            decoder_dims: vec![16],
            mlp_ratio: 2,
            resample: true,
        }
    }

    /// Four-stage configuration with the b0 widths for 64x64 grids.
    pub fn reference() -> Self {
        Self {
            backbone_stages: vec![
                StageConfig::new(32, 2, 1, 4, 8),
                StageConfig::new(64, 2, 2, 2, 4),
                StageConfig::new(160, 2, 5, 2, 2),
                StageConfig::new(256, 2, 8, 2, 1),
            ],
            spatial_branch_dim: 64,
            spatial_branch_depth: 2,
            spatial_branch_heads: 2,
            spatial_branch_sr: 8,
            projection_dim: 64,
            fusion_dim: 128,
            decoder_dims: vec![64],
            mlp_ratio: 4,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad("model needs input channels and at least 2 classes".into());
        }
        if self.backbone_stages.is_empty() && self.architecture != Architecture::SpatialOnly {
            return bad("backbone needs at least one stage".into());
        }
        for (i, s) in self.backbone_stages.iter().enumerate() {
            if s.depth == 0 {
                return bad(format!("backbone stage {i} has depth 0"));
            }
            if s.embed_dim == 0 || s.heads == 0 || s.embed_dim % s.heads != 0 {
                return bad(format!("backbone stage {i}: heads must divide embed_dim"));
            }
            if s.downsample == 0 || s.sr_ratio == 0 {
                return bad(format!("backbone stage {i}: downsample and sr_ratio must be positive"));
            }
        }
        if self.architecture != Architecture::BackboneOnly {
            if self.spatial_branch_depth == 0 {
                return bad("spatial branch depth must be at least 1".into());
            }
            if self.spatial_branch_heads == 0 || !self.spatial_branch_dim.is_multiple_of(self.spatial_branch_heads) {
                return bad("spatial branch heads must divide its dim".into());
            }
            if self.spatial_branch_sr == 0 {
                return bad("spatial branch sr_ratio must be positive".into());
            }
        }
        let f = self.spatial_resolution_factor;
        if f == 0 || !f.is_power_of_two() {
            return bad(format!("spatial_resolution_factor {f} must be a power of two"));
        }
        if let Some(first) = self.backbone_stages.first() {
            if self.architecture == Architecture::DualPath && f > first.downsample {
                return bad(format!(
                    "spatial_resolution_factor {f} exceeds the smallest backbone downsample factor {}",
                    first.downsample
                ));
            }
            if self.architecture == Architecture::BackboneOnly && !first.downsample.is_power_of_two() {
                return bad("first backbone stride must be a power of two".into());
            }
        }
        if self.fusion_groups == 0 || !self.fusion_dim.is_multiple_of(self.fusion_groups) {
            return bad(format!(
                "fusion_groups {} must divide fusion_dim {}",
                self.fusion_groups, self.fusion_dim
            ));
        }
        if self.projection_dim == 0 || self.se_reduction == 0 || self.mlp_ratio == 0 {
            return bad("projection_dim, se_reduction and mlp_ratio must be positive".into());
        }
        if self.decoder_upsamples() > 0 && (self.decoder_dims.is_empty() || self.decoder_dims.contains(&0)) {
            return bad("decoder_dims must be nonempty and positive".into());
        }
        Ok(())
    }

    /// Cumulative stride of every backbone stage.
    pub fn stage_strides(&self) -> Vec<usize> {
        self.backbone_stages
            .iter()
            .scan(1, |acc, s| {
                *acc *= s.downsample;
                Some(*acc)
            })
            .collect()
    }

    /// Stride of the map entering the decoder.
    pub fn fusion_stride(&self) -> usize {
        match self.architecture {
            Architecture::BackboneOnly => self.backbone_stages[0].downsample,
            _ => self.spatial_resolution_factor,
        }
    }

    pub fn decoder_upsamples(&self) -> usize {
        self.fusion_stride().trailing_zeros() as usize
    }

    fn decoder_dim(&self, i: usize) -> usize {
        self.decoder_dims[i.min(self.decoder_dims.len() - 1)]
    }

    /// Rejects input sizes the strides and reductions do not divide.
    pub fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                actual: channels,
            });
        }
        let mut checks: Vec<(usize, usize, String)> = Vec::new();
        if self.architecture != Architecture::SpatialOnly {
            for (i, (s, st)) in self.stage_strides().iter().zip(&self.backbone_stages).enumerate() {
                checks.push((*s, st.sr_ratio, format!("backbone stage {i}")));
            }
        }
        if self.architecture != Architecture::BackboneOnly {
            checks.push((self.spatial_resolution_factor, self.spatial_branch_sr, "spatial branch".into()));
        }
        for (stride, sr, what) in checks {
            if !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
                return Err(Error::Config(format!("{h}x{w} input is not divisible by the {what} stride {stride}")));
            }
            if !(h / stride).is_multiple_of(sr) || !(w / stride).is_multiple_of(sr) {
                return Err(Error::Config(format!(
                    "{what} map {}x{} is not divisible by sr_ratio {sr}",
                    h / stride,
                    w / stride
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    spec: ConvSpec,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    heads: usize,
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    sr: Option<(Conv, Norm)>,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    dw: Conv,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Stage {
    embed: Conv,
    embed_norm: Norm,
    blocks: Vec<Block>,
    norm: Norm,
}

#[derive(Debug, Clone)]
struct Fusion {
    projections: Vec<Conv>,
    se1: Linear,
    se2: Linear,
    fuse: Conv,
    direction: Option<Conv>,
    magnitude: Option<Conv>,
}

#[derive(Debug, Clone)]
struct Layers {
    stages: Vec<Stage>,
    spatial: Option<Stage>,
    fusion: Fusion,
    up: Vec<Conv>,
    classifier: Conv,
    spatial_head: Option<Conv>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    tally: Vec<(String, usize)>,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        // Truncated at two standard deviations.
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(&mut self.rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        self.store.add(name, Tensor::new(shape, data))
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f64) -> ParamId {
        let n = shape.iter().product();
        self.store.add(name, Tensor::new(shape, vec![value; n]))
    }

    fn record(&mut self, layer: &str, scalars: usize) {
        self.tally.push((layer.to_string(), scalars));
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec, bias: bool) -> Conv {
        let cpg = if spec.groups == 1 { cin } else { 1 };
        let fan_out = k * k * cout / spec.groups;
        let w = self.normal(format!("{name}.weight"), vec![cout, cpg, k, k], (2.0 / fan_out as f64).sqrt());
        let b = bias.then(|| self.constant(format!("{name}.bias"), vec![cout], 0.0));
        self.record(name, cout * cpg * k * k + if bias { cout } else { 0 });
        Conv { w, b, spec }
    }

    fn zero_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let w = self.constant(format!("{name}.weight"), vec![cout, cin, k, k], 0.0);
        let b = self.constant(format!("{name}.bias"), vec![cout], 0.0);
        self.record(name, cout * cin * k * k + cout);
        Conv {
            w,
            b: Some(b),
            spec: ConvSpec::same(k),
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let w = self.normal(format!("{name}.weight"), vec![dout, din], 0.02);
        let b = self.constant(format!("{name}.bias"), vec![dout], 0.0);
        self.record(name, din * dout + dout);
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let g = self.constant(format!("{name}.weight"), vec![d], 1.0);
        let b = self.constant(format!("{name}.bias"), vec![d], 0.0);
        self.record(name, 2 * d);
        Norm { g, b }
    }

    fn block(&mut self, name: &str, d: usize, heads: usize, sr: usize, mlp_ratio: usize) -> Block {
        let hidden = d * mlp_ratio;
        Block {
            heads,
            norm1: self.norm(&format!("{name}.norm1"), d),
            q: self.linear(&format!("{name}.attn.q"), d, d),
            k: self.linear(&format!("{name}.attn.k"), d, d),
            v: self.linear(&format!("{name}.attn.v"), d, d),
            sr: (sr > 1).then(|| {
                (
                    self.conv(&format!("{name}.attn.sr"), d, d, sr, ConvSpec::new(sr, 0, 1), true),
                    self.norm(&format!("{name}.attn.sr_norm"), d),
                )
            }),
            proj: self.linear(&format!("{name}.attn.proj"), d, d),
            norm2: self.norm(&format!("{name}.norm2"), d),
            fc1: self.linear(&format!("{name}.ffn.fc1"), d, hidden),
            dw: self.conv(&format!("{name}.ffn.dw"), hidden, hidden, 3, ConvSpec::new(1, 1, hidden), true),
            fc2: self.linear(&format!("{name}.ffn.fc2"), hidden, d),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn stage(
        &mut self,
        name: &str,
        cin: usize,
        d: usize,
        depth: usize,
        heads: usize,
        stride: usize,
        sr: usize,
        mlp: usize,
    ) -> Stage {
        let k = (2 * stride - 1).max(3);
        Stage {
            embed: self.conv(&format!("{name}.embed"), cin, d, k, ConvSpec::new(stride, k / 2, 1), true),
            embed_norm: self.norm(&format!("{name}.embed_norm"), d),
            blocks: (0..depth).map(|i| self.block(&format!("{name}.block{i}"), d, heads, sr, mlp)).collect(),
            norm: self.norm(&format!("{name}.norm"), d),
        }
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub main_logits: Var,
    pub spatial_logits: Option<Var>,
    /// Penultimate decoder features at full resolution.
    pub embedding: Var,
    pub backbone: Vec<Var>,
    pub spatial_features: Option<Var>,
    pub fusion: Option<FusionVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub gates: Var,
    pub z: Var,
    pub s: Var,
    pub d: Var,
    pub a: Var,
    pub o: Var,
    pub fused: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layers: Layers,
    tally: Vec<(String, usize)>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tally: Vec::new(),
        };
        let c = &config;
        let use_backbone = c.architecture != Architecture::SpatialOnly;
        let use_spatial = c.architecture != Architecture::BackboneOnly;
        let mut stages = Vec::new();
        if use_backbone {
            let mut cin = c.in_channels;
            for (i, s) in c.backbone_stages.iter().enumerate() {
                stages.push(b.stage(&format!("stage{i}"), cin, s.embed_dim, s.depth, s.heads, s.downsample, s.sr_ratio, c.mlp_ratio));
                cin = s.embed_dim;
            }
        }
        let spatial = use_spatial.then(|| {
            b.stage(
                "spatial",
                c.in_channels,
                c.spatial_branch_dim,
                c.spatial_branch_depth,
                c.spatial_branch_heads,
                c.spatial_resolution_factor,
                c.spatial_branch_sr,
                c.mlp_ratio,
            )
        });
        let mut branch_dims: Vec<usize> = if use_backbone {
            c.backbone_stages.iter().map(|s| s.embed_dim).collect()
        } else {
            Vec::new()
        };
        if use_spatial {
            branch_dims.push(c.spatial_branch_dim);
        }
        let projections = branch_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| b.conv(&format!("fusion.proj{i}"), d, c.projection_dim, 1, ConvSpec::new(1, 0, 1), true))
            .collect::<Vec<_>>();
        let cat = c.projection_dim * projections.len();
        let hidden = (cat / c.se_reduction).max(1);
        let se1 = b.linear("fusion.se1", cat, hidden);
        let se2 = b.linear("fusion.se2", hidden, cat);
        let fuse = b.conv("fusion.conv", cat, c.fusion_dim, 3, ConvSpec::same(3), true);
        let with_offsets = c.architecture == Architecture::DualPath;
        // Zero-initialised directions start the resampling at the identity.
        let direction = with_offsets.then(|| b.zero_conv("offset.direction", c.fusion_dim + 8, 2 * c.fusion_groups, 3));
        let magnitude =
            with_offsets.then(|| b.conv("offset.magnitude", c.fusion_dim + 8, 2 * c.fusion_groups, 3, ConvSpec::same(3), true));
        let mut cin = c.fusion_dim;
        let mut up = Vec::new();
        for i in 0..c.decoder_upsamples() {
            let d = c.decoder_dim(i);
            up.push(b.conv(&format!("decoder.up{i}"), cin, d, 3, ConvSpec::same(3), true));
            cin = d;
        }
        let classifier = b.conv("decoder.classifier", cin, c.num_classes, 1, ConvSpec::new(1, 0, 1), true);
        let spatial_head = (c.architecture == Architecture::DualPath)
            .then(|| b.conv("spatial_head", c.spatial_branch_dim, c.num_classes, 1, ConvSpec::new(1, 0, 1), true));
        let tally = std::mem::take(&mut b.tally);
        Ok(Self {
            config,
            params,
            layers: Layers {
                stages,
                spatial,
                fusion: Fusion {
                    projections,
                    se1,
                    se2,
                    fuse,
                    direction,
                    magnitude,
                },
                up,
                classifier,
                spatial_head,
            },
            tally,
        })
    }

    /// Rebuilds the layer layout for `config` and adopts stored parameters,
    /// checking every name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameter arrays", model.params.len()),
                actual: format!("{}", params.len()),
            });
        }
        for id in model.params.ids() {
            let name = model.params.name(id).to_string();
            let src = params.find(&name).ok_or_else(|| Error::InvalidSchema(format!("missing parameter {name}")))?;
            let t = params.get(src);
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} {:?}", model.params.get(id).shape()),
                    actual: format!("{:?}", t.shape()),
                });
            }
            *model.params.get_mut(id) = t.clone();
        }
        Ok(model)
    }

    /// Scalar count per layer as recorded during construction.
    pub fn layer_tally(&self) -> &[(String, usize)] {
        &self.tally
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ModelOutput> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                expected: "[C, H, W] input".into(),
                actual: format!("{shape:?}"),
            });
        }
        let c = &self.config;
        c.check_input(shape[0], shape[1], shape[2])?;
        let (h, w) = (shape[1], shape[2]);
        let mut backbone = Vec::new();
        let mut cur = x;
        for st in &self.layers.stages {
            cur = stage_forward(g, st, cur);
            backbone.push(cur);
        }
        let spatial_features = self.layers.spatial.as_ref().map(|st| stage_forward(g, st, x));
        let stride = c.fusion_stride();
        let (fh, fw) = (h / stride, w / stride);

        let f = &self.layers.fusion;
        let mut branches = backbone.clone();
        branches.extend(spatial_features);
        let projected: Vec<Var> = branches
            .iter()
            .zip(&f.projections)
            .map(|(&v, p)| {
                let y = conv(g, p, v);
                g.resize(y, fh, fw)
            })
            .collect();
        let cat = g.concat(&projected);
        let pooled = g.global_avg_pool(cat);
        let s1 = linear(g, &f.se1, pooled);
        let s1 = g.gelu(s1);
        let s2 = linear(g, &f.se2, s1);
        let gates = g.sigmoid(s2);
        let gated = g.scale_channels(cat, gates);
        let z = conv(g, &f.fuse, gated);
        let mut fused = z;
        let mut fusion = None;
        if let (Some(dc), Some(mc)) = (&f.direction, &f.magnitude) {
            let s = g.neighbor_similarity(z);
            let zs = g.concat(&[z, s]);
            let d = conv(g, dc, zs);
            let m = conv(g, mc, zs);
            let a = g.sigmoid(m);
            let o = g.mul(d, a);
            if c.resample {
                fused = g.deform_resample(z, o, c.fusion_groups);
            }
            fusion = Some(FusionVars {
                gates,
                z,
                s,
                d,
                a,
                o,
                fused,
            });
        }

        let mut y = fused;
        let (mut yh, mut yw) = (fh, fw);
        for blk in &self.layers.up {
            yh *= 2;
            yw *= 2;
            let r = g.resize(y, yh, yw);
            let cv = conv(g, blk, r);
            y = g.gelu(cv);
        }
        let embedding = y;
        let main_logits = conv(g, &self.layers.classifier, y);
        let spatial_logits = match (&self.layers.spatial_head, spatial_features) {
            (Some(head), Some(sf)) => {
                let l = conv(g, head, sf);
                Some(g.resize(l, h, w))
            }
            _ => None,
        };
        Ok(ModelOutput {
            main_logits,
            spatial_logits,
            embedding,
            backbone,
            spatial_features,
            fusion,
        })
    }

    /// Direction-branch parameters of the offset generator.
    pub fn offset_direction_params(&self) -> Vec<ParamId> {
        self.layers
            .fusion
            .direction
            .iter()
            .flat_map(|c| std::iter::once(c.w).chain(c.b))
            .collect()
    }

    /// Random perturbation of every parameter, for tests that need a model
    /// away from its symmetric initialisation.
    pub fn jitter<R: Rng>(&mut self, scale: f64, rng: &mut R) {
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += scale * rng.random_range(-1.0..1.0));
        }
    }
}

fn conv(g: &mut Graph, c: &Conv, x: Var) -> Var {
    let w = g.param(c.w);
    let b = c.b.map(|b| g.param(b));
    g.conv2d(x, w, b, c.spec)
}

fn linear(g: &mut Graph, l: &Linear, x: Var) -> Var {
    let w = g.param(l.w);
    let b = g.param(l.b);
    g.linear(x, w, Some(b))
}

fn norm(g: &mut Graph, n: &Norm, x: Var) -> Var {
    let gp = g.param(n.g);
    let bp = g.param(n.b);
    g.layer_norm(x, gp, bp)
}

fn stage_forward(g: &mut Graph, st: &Stage, x: Var) -> Var {
    let e = conv(g, &st.embed, x);
    let (h, w) = (g.value(e).dim(1), g.value(e).dim(2));
    let t = g.to_tokens(e);
    let mut t = norm(g, &st.embed_norm, t);
    for b in &st.blocks {
        t = block_forward(g, b, t, h, w);
    }
    let t = norm(g, &st.norm, t);
    g.to_chw(t, h, w)
}

fn block_forward(g: &mut Graph, b: &Block, x: Var, h: usize, w: usize) -> Var {
    let n1 = norm(g, &b.norm1, x);
    let q = linear(g, &b.q, n1);
    let kv_in = match &b.sr {
        Some((sr, srn)) => {
            let m = g.to_chw(n1, h, w);
            let r = conv(g, sr, m);
            let t = g.to_tokens(r);
            norm(g, srn, t)
        }
        None => n1,
    };
    let k = linear(g, &b.k, kv_in);
    let v = linear(g, &b.v, kv_in);
    let a = g.attention(q, k, v, b.heads);
    let a = linear(g, &b.proj, a);
    let x = g.add(x, a);
    let n2 = norm(g, &b.norm2, x);
    let f = linear(g, &b.fc1, n2);
    let m = g.to_chw(f, h, w);
    let m = conv(g, &b.dw, m);
    let m = g.gelu(m);
    let t = g.to_tokens(m);
    let f = linear(g, &b.fc2, t);
    g.add(x, f)
}
