//! ResUNet encoder and convolutional reconstruction head, with explicit
//! forward caches and reverse-mode gradients.

use super::layers::{
    concat, leaky_relu, leaky_relu_backward, split_channels, upsample2, upsample2_backward, Conv,
    InstanceNorm, NormCache,
};
use super::ModelConfig;
use crate::tensor::{Feature, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Fan-in scaled Gaussian, std = sqrt(2 / fan_in).
    He { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDecl {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Default)]
struct Builder {
    decls: Vec<ParamDecl>,
    block_norm: bool,
}

impl Builder {
    fn declare(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.decls.push(ParamDecl { name, shape, init });
        self.decls.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool) -> Conv {
        let weight = self.declare(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel],
            Init::He { fan_in: cin * kernel * kernel },
        );
        let bias = bias.then(|| self.declare(format!("{name}.bias"), vec![cout], Init::Zeros));
        Conv { weight, bias, cin, cout, kernel, stride }
    }

    fn conv_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ConvBlock {
        if !self.block_norm {
            let conv = self.conv(&format!("{name}.conv"), cin, cout, 3, stride, true);
            return ConvBlock { conv, norm: None };
        }
        // no conv bias: the following normalization removes it
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3, stride, false);
        let g = self.declare(format!("{name}.norm.gamma"), vec![cout], Init::Ones);
        let b = self.declare(format!("{name}.norm.beta"), vec![cout], Init::Zeros);
        ConvBlock {
            conv,
            norm: Some(InstanceNorm { affine: Some((g, b)), channels: cout }),
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ResBlock {
        let first = self.conv_block(&format!("{name}.block1"), cin, cout, stride);
        let second = self.conv_block(&format!("{name}.block2"), cout, cout, 1);
        let proj = (cin != cout || stride != 1)
            .then(|| self.conv(&format!("{name}.proj"), cin, cout, 1, stride, true));
        ResBlock { first, second, proj }
    }
}

/// 3x3 conv, instance norm (optional), leaky ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Option<InstanceNorm>,
}

pub struct BlockCache<T> {
    input: Feature<T>,
    norm: Option<NormCache<T>>,
    output: Feature<T>,
}

impl ConvBlock {
    fn forward<T: Real>(&self, p: &[Vec<T>], x: Feature<T>, keep: bool) -> (Feature<T>, Option<BlockCache<T>>) {
        let h = self.conv.forward(p, &x);
        let (n, norm) = match &self.norm {
            Some(layer) => layer.forward(p, &h, keep),
            None => (h, None),
        };
        let out = leaky_relu(n);
        let cache = keep.then(|| BlockCache {
            input: x,
            norm,
            output: out.clone(),
        });
        (out, cache)
    }

    fn backward<T: Real>(&self, p: &[Vec<T>], g: &mut [Vec<T>], cache: &BlockCache<T>, dy: Feature<T>) -> Feature<T> {
        let mut d = leaky_relu_backward(&cache.output, dy);
        if let (Some(layer), Some(nc)) = (&self.norm, &cache.norm) {
            d = layer.backward(p, g, nc, &d);
        }
        self.conv.backward(p, g, &cache.input, &d)
    }
}

/// Two conv blocks with an identity or strided 1x1 projection skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub first: ConvBlock,
    pub second: ConvBlock,
    pub proj: Option<Conv>,
}

pub struct ResCache<T> {
    first: BlockCache<T>,
    second: BlockCache<T>,
}

impl ResBlock {
    fn forward<T: Real>(&self, p: &[Vec<T>], x: Feature<T>, keep: bool) -> (Feature<T>, Option<ResCache<T>>) {
        let mut skip = match &self.proj {
            Some(conv) => conv.forward(p, &x),
            None => x.clone(),
        };
        let (h, c1) = self.first.forward(p, x, keep);
        let (h, c2) = self.second.forward(p, h, keep);
        skip.add_assign(&h);
        let cache = c1.zip(c2).map(|(first, second)| ResCache { first, second });
        (skip, cache)
    }

    fn backward<T: Real>(&self, p: &[Vec<T>], g: &mut [Vec<T>], cache: &ResCache<T>, dy: Feature<T>) -> Feature<T> {
        let dh = self.second.backward(p, g, &cache.second, dy.clone());
        let mut dx = self.first.backward(p, g, &cache.first, dh);
        match &self.proj {
            Some(conv) => dx.add_assign(&conv.backward(p, g, &cache.first.input, &dy)),
            None => dx.add_assign(&dy),
        }
        dx
    }
}

/// One row of the layer table: component, layer name, block count, spatial
/// size and filter description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub component: &'static str,
    pub name: &'static str,
    pub blocks: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub filters: String,
}

fn row(component: &'static str, name: &'static str, blocks: Option<usize>, f: &Feature<impl Real>, filters: String) -> ShapeRow {
    ShapeRow { component, name, blocks, height: f.height, width: f.width, filters }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stem: ConvBlock,
    pub stages: Vec<Vec<ResBlock>>,
    /// Decoder levels from coarsest to finest, two conv blocks each.
    pub decoder: Vec<[ConvBlock; 2]>,
    pub out_norm: InstanceNorm,
}

pub struct EncoderCache<T> {
    stem: BlockCache<T>,
    stages: Vec<Vec<ResCache<T>>>,
    decoder: Vec<[BlockCache<T>; 2]>,
    /// Channel count of the upsampled part of each decoder concat.
    up_channels: Vec<usize>,
    out_norm: NormCache<T>,
}

impl Encoder {
    pub fn forward<T: Real>(
        &self,
        p: &[Vec<T>],
        x: Feature<T>,
        keep: bool,
        mut trace: Option<&mut Vec<ShapeRow>>,
    ) -> (Feature<T>, Option<EncoderCache<T>>) {
        const C: &str = "encoder";
        let mut push = |r: ShapeRow| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(r);
            }
        };
        push(row(C, "Noise Mixture", Some(1), &x, x.channels.to_string()));
        let (mut h, stem_cache) = self.stem.forward(p, x, keep);
        push(row(C, "Stem (ConvBlocks)", Some(1), &h, h.channels.to_string()));

        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (o, c) = block.forward(p, h, keep);
                h = o;
                caches.extend(c);
            }
            push(row(C, "ResidualBlocks", Some(stage.len()), &h, h.channels.to_string()));
            stage_caches.push(caches);
            stage_outputs.push(h.clone());
        }

        let mut dec_caches = Vec::with_capacity(self.decoder.len());
        let mut up_channels = Vec::with_capacity(self.decoder.len());
        let n = stage_outputs.len();
        for (level, blocks) in self.decoder.iter().enumerate() {
            let skip = &stage_outputs[n - 2 - level];
            let up = upsample2(&h);
            up_channels.push(up.channels);
            let cat = concat(&up, skip);
            push(row(C, "Upsample&Concat", None, &cat, format!("{}+{}", up.channels, skip.channels)));
            let (o, c1) = blocks[0].forward(p, cat, keep);
            let (o, c2) = blocks[1].forward(p, o, keep);
            push(row(C, "ConvBlocks", Some(2), &o, o.channels.to_string()));
            h = o;
            if let (Some(a), Some(b)) = (c1, c2) {
                dec_caches.push([a, b]);
            }
        }
        let (z, norm_cache) = self.out_norm.forward(p, &h, keep);
        push(row(C, "InstanceNorm", Some(1), &z, z.channels.to_string()));

        let cache = match (stem_cache, norm_cache) {
            (Some(stem), Some(out_norm)) => Some(EncoderCache {
                stem,
                stages: stage_caches,
                decoder: dec_caches,
                up_channels,
                out_norm,
            }),
            _ => None,
        };
        (z, cache)
    }

    /// Accumulates encoder parameter gradients for upstream gradient `dz`.
    pub fn backward<T: Real>(&self, p: &[Vec<T>], g: &mut [Vec<T>], cache: &EncoderCache<T>, dz: &Feature<T>) {
        let mut d = self.out_norm.backward(p, g, &cache.out_norm, dz);
        let n = self.stages.len();
        let mut skip_grads: Vec<Option<Feature<T>>> = vec![None; n];
        for level in (0..self.decoder.len()).rev() {
            let [c1, c2] = &cache.decoder[level];
            let blocks = &self.decoder[level];
            let dd = blocks[1].backward(p, g, c2, d);
            let dcat = blocks[0].backward(p, g, c1, dd);
            let (dup, dskip) = split_channels(dcat, cache.up_channels[level]);
            skip_grads[n - 2 - level] = Some(dskip);
            d = upsample2_backward(&dup);
        }
        for s in (0..n).rev() {
            if let Some(extra) = skip_grads[s].take() {
                d.add_assign(&extra);
            }
            for (block, c) in self.stages[s].iter().zip(&cache.stages[s]).rev() {
                d = block.backward(p, g, c, d);
            }
        }
        let _ = self.stem.backward(p, g, &cache.stem, d);
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub blocks: Vec<ConvBlock>,
    pub out: Conv,
}

pub struct ReconCache<T> {
    blocks: Vec<BlockCache<T>>,
    out_input: Feature<T>,
}

impl Reconstruction {
    pub fn forward<T: Real>(
        &self,
        p: &[Vec<T>],
        z: Feature<T>,
        keep: bool,
        mut trace: Option<&mut Vec<ShapeRow>>,
    ) -> (Feature<T>, Option<ReconCache<T>>) {
        const C: &str = "reconstruction";
        if let Some(t) = trace.as_deref_mut() {
            t.push(row(C, "Noise Mixture", Some(1), &z, z.channels.to_string()));
        }
        let mut h = z;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (o, c) = b.forward(p, h, keep);
            h = o;
            caches.extend(c);
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(row(C, "ConvBlocks", Some(self.blocks.len()), &h, h.channels.to_string()));
        }
        let out = self.out.forward(p, &h);
        if let Some(t) = trace {
            t.push(row(C, "Conv", Some(1), &out, out.channels.to_string()));
        }
        let cache = keep.then_some(ReconCache { blocks: caches, out_input: h });
        (out, cache)
    }

    /// Accumulates reconstruction gradients; returns the gradient w.r.t. the
    /// (mixed) latent input.
    pub fn backward<T: Real>(&self, p: &[Vec<T>], g: &mut [Vec<T>], cache: &ReconCache<T>, dy: &Feature<T>) -> Feature<T> {
        let mut d = self.out.backward(p, g, &cache.out_input, dy);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = b.backward(p, g, c, d);
        }
        d
    }
}

/// Complete layer graph plus the ordered parameter declarations.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub encoder: Encoder,
    pub recon: Reconstruction,
    pub decls: Vec<ParamDecl>,
    /// Parameters `[0, encoder_len)` belong to the encoder.
    pub encoder_len: usize,
}

impl Architecture {
    pub fn build(cfg: &ModelConfig) -> Architecture {
        let mut b = Builder { decls: Vec::new(), block_norm: cfg.block_norm };
        let stem = b.conv_block("encoder.stem", cfg.input_channels, cfg.base_width, 1);
        let mut cin = cfg.base_width;
        let mut stages = Vec::new();
        for (s, (&width, &count)) in cfg.stage_widths.iter().zip(&cfg.stage_blocks).enumerate() {
            let blocks = (0..count)
                .map(|i| {
                    let stride = if s > 0 && i == 0 { 2 } else { 1 };
                    let rb = b.res_block(&format!("encoder.stage{}.res{}", s + 1, i + 1), cin, width, stride);
                    cin = width;
                    rb
                })
                .collect();
            stages.push(blocks);
        }
        let n = cfg.stage_widths.len();
        let mut decoder = Vec::new();
        for level in 0..n - 1 {
            let skip = cfg.stage_widths[n - 2 - level];
            let out = if level == n - 2 { cfg.latent_channels } else { skip };
            let name = format!("encoder.up{}", level + 1);
            let first = b.conv_block(&format!("{name}.block1"), cin + skip, out, 1);
            let second = b.conv_block(&format!("{name}.block2"), out, out, 1);
            decoder.push([first, second]);
            cin = out;
        }
        let encoder = Encoder {
            stem,
            stages,
            decoder,
            out_norm: InstanceNorm { affine: None, channels: cfg.latent_channels },
        };
        let encoder_len = b.decls.len();
        let blocks = (0..cfg.recon_blocks)
            .map(|i| b.conv_block(&format!("recon.block{}", i + 1), cfg.latent_channels, cfg.latent_channels, 1))
            .collect();
        let out = b.conv("recon.out", cfg.latent_channels, 1, 3, 1, true);
        Architecture {
            encoder,
            recon: Reconstruction { blocks, out },
            decls: b.decls,
            encoder_len,
        }
    }

    fn block_macs(b: &ConvBlock, h: usize, w: usize) -> (u64, usize, usize) {
        let (ho, wo) = b.conv.out_dims(h, w);
        (b.conv.macs(h, w), ho, wo)
    }

    /// Convolution multiply-accumulates of one inference forward pass
    /// (encoder plus reconstruction) at input size `h x w`.
    pub fn forward_macs(&self, h: usize, w: usize) -> u64 {
        let mut total = 0;
        let (m, mut h, mut w) = Self::block_macs(&self.encoder.stem, h, w);
        total += m;
        let mut dims = Vec::new();
        for stage in &self.encoder.stages {
            for rb in stage {
                if let Some(p) = &rb.proj {
                    total += p.macs(h, w);
                }
                let (m1, h1, w1) = Self::block_macs(&rb.first, h, w);
                let (m2, h2, w2) = Self::block_macs(&rb.second, h1, w1);
                total += m1 + m2;
                (h, w) = (h2, w2);
            }
            dims.push((h, w));
        }
        for blocks in &self.encoder.decoder {
            (h, w) = (h * 2, w * 2);
            for b in blocks {
                let (m, ho, wo) = Self::block_macs(b, h, w);
                total += m;
                (h, w) = (ho, wo);
            }
        }
        for b in &self.recon.blocks {
            total += b.conv.macs(h, w);
        }
        total + self.recon.out.macs(h, w)
    }
}
