use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::dse::DseBlock;
use crate::error::{Error, Result};
use crate::lasea::{LaseaBlock, SampleMode};
use crate::layers::{Conv2d, GroupNorm};
use crate::ops::ConvGeometry;
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

use super::config::{check_input_size, check_train_size, ModelConfig};

/// Prefixes of every auxiliary-stream attention-block and bottleneck-block
/// parameter.
pub const DSE_PREFIX: &str = "dse.";
pub const LASEA_PREFIX: &str = "lasea.";

/// `relu(gn(conv3(relu(gn(conv3(x))))) + shortcut(x))`, with a 1x1
/// projection shortcut when the widths differ.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub norm1: GroupNorm,
    pub conv2: Conv2d,
    pub norm2: GroupNorm,
    pub shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        ResBlock {
            conv1: Conv2d::same3(store, rng, &format!("{name}.conv1"), cin, cout),
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cout),
            conv2: Conv2d::same3(store, rng, &format!("{name}.conv2"), cout, cout),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            shortcut: (cin != cout).then(|| Conv2d::pointwise(store, rng, &format!("{name}.shortcut"), cin, cout)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = self.norm1.forward(g, y)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, y)?;
        let y = self.norm2.forward(g, y)?;
        let s = match &self.shortcut {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        let y = g.add(y, s)?;
        Ok(g.relu(y))
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.conv1.flops(h, w) + self.conv2.flops(h, w) + self.shortcut.as_ref().map_or(0, |s| s.flops(h, w))
    }
}

/// `relu(gn(conv(x)))`; every plain convolution outside the attention
/// blocks and the prediction heads is one of these.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvUnit {
    pub fn new(store: &mut ParamStore, conv: Conv2d, name: &str) -> Self {
        let norm = GroupNorm::new(store, &format!("{name}.norm"), conv.out_channels);
        ConvUnit { conv, norm }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        Ok(g.relu(y))
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.conv.flops(h, w)
    }
}

#[derive(Clone, Debug)]
pub struct AuxStage {
    /// Patch embedding at stage 1, strided 2x2 downsampling after.
    pub entry: ConvUnit,
    pub blocks: Vec<DseBlock>,
    pub fusion: ConvUnit,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub fusion: ConvUnit,
    pub block: ResBlock,
    pub head: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stem: ConvUnit,
    pub primary: Vec<ResBlock>,
    pub auxiliary: Option<Vec<AuxStage>>,
    pub bottleneck: ResBlock,
    pub lasea: Option<LaseaBlock>,
    /// Finest level first.
    pub decoder: Vec<DecoderStage>,
}

/// Encoder features at each of the four stages, finest first.
pub struct Encoded {
    pub stages: Vec<Var>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let widths = config.stage_channels();
        let stem = Conv2d::same3(s, rng, "stem", 3, widths[0]);
        let stem = ConvUnit::new(s, stem, "stem");
        let mut primary = Vec::new();
        for i in 0..4 {
            let cin = if i == 0 { widths[0] } else { widths[i - 1] };
            primary.push(ResBlock::new(s, rng, &format!("primary{}", i + 1), cin, widths[i]));
        }
        let auxiliary = if config.auxiliary_branch {
            let mut stages = Vec::new();
            for i in 0..4 {
                let entry = if i == 0 {
                    let c = Conv2d::same3(s, rng, "aux.embed", 3, widths[0]);
                    ConvUnit::new(s, c, "aux.embed")
                } else {
                    let geom = ConvGeometry {
                        stride: 2,
                        padding: 0,
                        dilation: 1,
                        groups: 1,
                    };
                    let name = format!("aux.down{}", i + 1);
                    let c = Conv2d::new(s, rng, &name, widths[i - 1], widths[i], 2, geom, true);
                    ConvUnit::new(s, c, &name)
                };
                let blocks = (0..config.dse_depths[i])
                    .map(|j| {
                        let name = format!("{DSE_PREFIX}stage{}.{}", i + 1, j + 1);
                        DseBlock::new(s, rng, &name, widths[i], config.state_dim)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let name = format!("fuse{}", i + 1);
                let fusion = Conv2d::pointwise(s, rng, &name, 2 * widths[i], widths[i]);
                let fusion = ConvUnit::new(s, fusion, &name);
                stages.push(AuxStage { entry, blocks, fusion });
            }
            Some(stages)
        } else {
            None
        };
        let bc = config.bottleneck_channels();
        let bottleneck = ResBlock::new(s, rng, "bottleneck", widths[3], bc);
        let lasea = if config.lasea {
            Some(LaseaBlock::new(s, rng, LASEA_PREFIX.trim_end_matches('.'), bc)?)
        } else {
            None
        };
        let mut decoder = Vec::new();
        for i in 0..4 {
            let below = if i == 3 { bc } else { widths[i + 1] };
            let name = format!("decoder{}", i + 1);
            let fusion = Conv2d::pointwise(s, rng, &format!("{name}.fuse"), below + widths[i], widths[i]);
            decoder.push(DecoderStage {
                fusion: ConvUnit::new(s, fusion, &format!("{name}.fuse")),
                block: ResBlock::new(s, rng, &format!("{name}.block"), widths[i], widths[i]),
                head: (i < config.supervision_levels)
                    .then(|| Conv2d::pointwise(s, rng, &format!("{name}.head"), widths[i], 1)),
            });
        }
        Ok(Model {
            config,
            store,
            stem,
            primary,
            auxiliary,
            bottleneck,
            lasea,
            decoder,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn check_input(&self, shape: Shape, mode: SampleMode) -> Result<()> {
        if shape.c != 3 {
            return Err(Error::invalid("model input", format!("expected 3 channels, got {}", shape.c)));
        }
        match (mode, self.lasea.is_some()) {
            (SampleMode::Train(_), true) => check_train_size(shape.h, shape.w),
            _ => check_input_size(shape.h, shape.w),
        }
    }

    /// Per-stage fused encoder features.
    pub fn encode(&self, g: &mut Graph<'_>, image: Var) -> Result<Encoded> {
        let mut stages = Vec::with_capacity(4);
        let mut r = self.stem.forward(g, image)?;
        let mut aux = image;
        for i in 0..4 {
            if i > 0 {
                r = g.max_pool2(r)?;
            }
            r = self.primary[i].forward(g, r)?;
            if let Some(aux_stages) = &self.auxiliary {
                let st = &aux_stages[i];
                aux = st.entry.forward(g, aux)?;
                for b in &st.blocks {
                    aux = b.forward(g, aux)?;
                }
                let cat = g.concat(&[r, aux])?;
                r = st.fusion.forward(g, cat)?;
            }
            stages.push(r);
        }
        Ok(Encoded { stages })
    }

    /// Max-pool, widen, optional attention block, upsample back to the
    /// coarsest stage resolution.
    pub fn bottleneck(&self, g: &mut Graph<'_>, r5: Var, mode: SampleMode) -> Result<Var> {
        let y = g.max_pool2(r5)?;
        let mut y = self.bottleneck.forward(g, y)?;
        if let Some(l) = &self.lasea {
            y = l.forward(g, y, mode)?;
        }
        g.upsample(y, 2)
    }

    /// Confidence maps, finest first, one per supervised level.
    pub fn decode(&self, g: &mut Graph<'_>, b: Var, enc: &Encoded) -> Result<Vec<Var>> {
        let mut maps = vec![None; self.config.supervision_levels];
        let mut up = b;
        for i in (0..4).rev() {
            let st = &self.decoder[i];
            let cat = g.concat(&[up, enc.stages[i]])?;
            let y = st.fusion.forward(g, cat)?;
            let d = st.block.forward(g, y)?;
            if let Some(head) = &st.head {
                let logits = head.forward(g, d)?;
                maps[i] = Some(g.sigmoid(logits));
            }
            if i > 0 {
                up = g.upsample(d, 2)?;
            }
        }
        Ok(maps.into_iter().map(|m| m.expect("head per supervised level")).collect())
    }

    pub fn forward(&self, g: &mut Graph<'_>, image: Var, mode: SampleMode) -> Result<Vec<Var>> {
        self.check_input(g.shape(image), mode)?;
        let enc = self.encode(g, image)?;
        let b = self.bottleneck(g, enc.stages[3], mode)?;
        self.decode(g, b, &enc)
    }

    /// Finest confidence map `N x 1 x H x W` at inference.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(image.clone());
        let maps = self.forward(&mut g, x, SampleMode::Inference)?;
        Ok(g.value(maps[0]).clone())
    }

    /// Analytic FLOPs of one `h x w` forward: `2 * MACs` of every convolution
    /// plus the scan recurrences. Pooling, resampling, normalization and
    /// pointwise activations are not counted.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let size = |i: usize| (h >> i, w >> i);
        let mut total = self.stem.flops(h, w);
        for i in 0..4 {
            let (sh, sw) = size(i);
            total += self.primary[i].flops(sh, sw);
            if let Some(aux) = &self.auxiliary {
                let st = &aux[i];
                let (eh, ew) = if i == 0 { (h, w) } else { size(i - 1) };
                total += st.entry.flops(eh, ew);
                total += st.blocks.iter().map(|b| b.flops(sh, sw)).sum::<u64>();
                total += st.fusion.flops(sh, sw);
            }
        }
        let (bh, bw) = size(4);
        total += self.bottleneck.flops(bh, bw);
        total += self.lasea.as_ref().map_or(0, |l| l.flops(bh, bw));
        for (i, st) in self.decoder.iter().enumerate() {
            let (sh, sw) = size(i);
            total += st.fusion.flops(sh, sw) + st.block.flops(sh, sw);
            total += st.head.as_ref().map_or(0, |hd| hd.flops(sh, sw));
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            dse_depths: [1, 1, 0, 1],
            state_dim: 4,
            input_height: 32,
            input_width: 32,
            ..ModelConfig::default()
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng)
    }

    #[test]
    fn stage_shapes_and_map_count() {
        let m = Model::new(small(), 1).unwrap();
        let mut g = Graph::inference(&m.store);
        let x = g.input(image(64, 48, 2));
        let enc = m.encode(&mut g, x).unwrap();
        let dims: Vec<_> = enc.stages.iter().map(|&v| g.shape(v)).collect();
        assert_eq!(
            dims,
            vec![
                Shape::new(1, 4, 64, 48),
                Shape::new(1, 8, 32, 24),
                Shape::new(1, 16, 16, 12),
                Shape::new(1, 32, 8, 6)
            ]
        );
        let b = m.bottleneck(&mut g, enc.stages[3], SampleMode::Inference).unwrap();
        assert_eq!(g.shape(b), Shape::new(1, 64, 8, 6));
        let maps = m.decode(&mut g, b, &enc).unwrap();
        assert_eq!(maps.len(), 4);
        assert_eq!(g.shape(maps[0]), Shape::new(1, 1, 64, 48));
        assert_eq!(g.shape(maps[3]), Shape::new(1, 1, 8, 6));
        let (lo, hi) = g.value(maps[0]).min_max();
        assert!(lo > 0.0 && hi < 1.0);
    }

    #[test]
    fn analytic_flops_match_graph_count() {
        for cfg in [small(), small().baseline()] {
            let m = Model::new(cfg, 3).unwrap();
            let mut g = Graph::inference(&m.store);
            let x = g.input(image(32, 48, 4));
            m.forward(&mut g, x, SampleMode::Inference).unwrap();
            assert_eq!(g.flops(), m.flops(32, 48));
        }
    }

    #[test]
    fn zero_heads_give_one_half() {
        let mut m = Model::new(small(), 5).unwrap();
        for st in &m.decoder {
            let head = st.head.as_ref().unwrap();
            m.store.get_mut(head.weight).fill(0.0);
            m.store.get_mut(head.bias.unwrap()).fill(0.0);
        }
        let p = m.predict(&image(32, 32, 1)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn input_size_rules() {
        let m = Model::new(small(), 5).unwrap();
        assert!(m.predict(&image(40, 32, 1)).is_err());
        let mut g = Graph::inference(&m.store);
        let x = g.input(image(32, 32, 1));
        let err = m.forward(&mut g, x, SampleMode::Train(0)).unwrap_err();
        assert!(err.to_string().contains("at least 48x48"), "{err}");
        let x = g.input(image(48, 48, 1));
        assert!(m.forward(&mut g, x, SampleMode::Train(0)).is_ok());
    }

    #[test]
    fn fewer_supervision_levels_emit_fewer_maps() {
        let cfg = ModelConfig {
            supervision_levels: 2,
            loss_weights: vec![0.5, 0.5],
            ..small()
        };
        let m = Model::new(cfg, 0).unwrap();
        let mut g = Graph::inference(&m.store);
        let x = g.input(image(32, 32, 1));
        let maps = m.forward(&mut g, x, SampleMode::Inference).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(g.shape(maps[1]), Shape::new(1, 1, 16, 16));
    }

    #[test]
    fn residual_block_with_zero_convs_is_relu() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rb = ResBlock::new(&mut store, &mut rng, "rb", 3, 3);
        store.zero_all();
        let x = Tensor::uniform(Shape::new(1, 3, 4, 4), -1.0, 1.0, &mut rng);
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let y = rb.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x.map(|v| v.max(0.0)));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(small(), 9).unwrap();
        let b = Model::new(small(), 9).unwrap();
        assert_eq!(a.store, b.store);
        let c = Model::new(small(), 10).unwrap();
        assert_ne!(a.store, c.store);
    }
}
