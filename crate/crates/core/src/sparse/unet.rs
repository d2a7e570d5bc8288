use std::rc::Rc;

use rand::Rng;

use super::{build_kernel_map, parent, sparse_conv, CoordSet, KernelMap, SparseVoxelTensor, Window};
use crate::error::{Error, Result};
use crate::nn::{kaiming_bound, uniform_tensor, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Channel width per resolution level, finest first.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    /// Common width every stage is projected to.
    pub hidden_dim: usize,
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.channels.len()
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

impl ConvLayer {
    fn new(store: &mut ParamStore, name: &str, window: Window, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let k = window.volume();
        let bound = kaiming_bound(k * cin);
        ConvLayer {
            weight: store.register(format!("{name}.weight"), uniform_tensor(&[k, cin, cout], bound, rng)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[1, cout])),
        }
    }

    fn apply<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: &SparseVoxelTensor<'t>,
        map: &KernelMap,
        out: &Level,
    ) -> Result<SparseVoxelTensor<'t>> {
        let y = sparse_conv(x, tape.param(store, self.weight), map, Rc::clone(&out.coords), out.stride)?;
        Ok(SparseVoxelTensor {
            features: y.features.add_row(tape.param(store, self.bias))?,
            ..y
        })
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvLayer,
    b: ConvLayer,
}

struct Level {
    stride: i32,
    coords: Rc<CoordSet>,
    same: KernelMap,
}

fn relu(x: SparseVoxelTensor<'_>) -> Result<SparseVoxelTensor<'_>> {
    Ok(SparseVoxelTensor {
        features: x.features.relu()?,
        ..x
    })
}

/// One projected feature map of the encoder.
#[derive(Clone, Debug)]
pub struct StageMap<'t> {
    pub stride: i32,
    pub coords: Rc<CoordSet>,
    /// `N_s × C` after projection.
    pub features: Var<'t>,
}

/// Stage maps ordered coarse to fine; the last one is at input resolution.
#[derive(Clone, Debug)]
pub struct EncoderOutputs<'t> {
    pub stages: Vec<StageMap<'t>>,
}

impl<'t> EncoderOutputs<'t> {
    /// Full-resolution map used as point embeddings by the mask head.
    pub fn point_embeddings(&self) -> &StageMap<'t> {
        self.stages.last().expect("encoder has stages")
    }

    /// Maps the decoder cross-attends to (all but the last).
    pub fn decoder_levels(&self) -> &[StageMap<'t>] {
        &self.stages[..self.stages.len() - 1]
    }

    /// For every full-resolution voxel, its row in `stages[stage]`.
    pub fn ancestor_rows(&self, stage: usize) -> Vec<usize> {
        let target = &self.stages[stage];
        let steps = target.stride.trailing_zeros();
        self.point_embeddings()
            .coords
            .coords()
            .iter()
            .map(|c| {
                let mut p = *c;
                for _ in 0..steps {
                    p = parent(&p);
                }
                target.coords.get(&p).expect("every voxel has an ancestor")
            })
            .collect()
    }
}

/// Sparse U-Net: stride-2 downsampling with residual blocks, transposed
/// convolutions back up with skip concatenation, and a linear projection of
/// every decoder-side stage to the common width.
#[derive(Clone, Debug)]
pub struct SparseUNet {
    pub config: EncoderConfig,
    stem: ConvLayer,
    blocks: Vec<Vec<ResBlock>>,
    downs: Vec<ConvLayer>,
    ups: Vec<ConvLayer>,
    fuses: Vec<ConvLayer>,
    projections: Vec<Linear>,
}

impl SparseUNet {
    pub fn new(store: &mut ParamStore, name: &str, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let ch = &config.channels;
        if ch.len() < 2 || ch.contains(&0) {
            return Err(Error::Input("encoder needs at least two nonzero stages".into()));
        }
        let stem = ConvLayer::new(store, &format!("{name}.stem"), Window::CUBE3, config.in_channels, ch[0], rng);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for (l, &c) in ch.iter().enumerate() {
            let level: Vec<ResBlock> = (0..config.res_blocks)
                .map(|r| ResBlock {
                    a: ConvLayer::new(store, &format!("{name}.enc{l}.res{r}.a"), Window::CUBE3, c, c, rng),
                    b: ConvLayer::new(store, &format!("{name}.enc{l}.res{r}.b"), Window::CUBE3, c, c, rng),
                })
                .collect();
            blocks.push(level);
            if l + 1 < ch.len() {
                downs.push(ConvLayer::new(store, &format!("{name}.down{l}"), Window::CORNER2, c, ch[l + 1], rng));
            }
        }
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        for l in (0..ch.len() - 1).rev() {
            ups.push(ConvLayer::new(store, &format!("{name}.up{l}"), Window::CORNER2, ch[l + 1], ch[l], rng));
            fuses.push(ConvLayer::new(store, &format!("{name}.fuse{l}"), Window::CUBE3, 2 * ch[l], ch[l], rng));
        }
        // stage order is coarse to fine: bottleneck first
        let projections = (0..ch.len())
            .map(|s| {
                let width = ch[ch.len() - 1 - s];
                Linear::new(store, &format!("{name}.proj{s}"), width, config.hidden_dim, true, rng)
            })
            .collect();
        Ok(SparseUNet {
            config,
            stem,
            blocks,
            downs,
            ups,
            fuses,
            projections,
        })
    }

    fn residual<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: SparseVoxelTensor<'t>,
        blocks: &[ResBlock],
        level: &Level,
    ) -> Result<SparseVoxelTensor<'t>> {
        let mut x = x;
        for block in blocks {
            let h = relu(block.a.apply(tape, store, &x, &level.same, level)?)?;
            let h = block.b.apply(tape, store, &h, &level.same, level)?;
            x = SparseVoxelTensor {
                features: x.features.add(h.features)?.relu()?,
                ..x
            };
        }
        Ok(x)
    }

    /// Runs the network over input voxels (`coords` rows aligned with
    /// `features` rows, `N × in_channels`).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        coords: Rc<CoordSet>,
        features: Var<'t>,
    ) -> Result<EncoderOutputs<'t>> {
        if coords.is_empty() {
            return Err(Error::Input("encoder input has no voxels".into()));
        }
        if features.rows() != coords.len() || features.cols() != self.config.in_channels {
            return Err(Error::shape(
                "encode",
                format!("{} coords with features {:?}", coords.len(), features.shape()),
            ));
        }
        let depth = self.config.channels.len();
        let mut levels: Vec<Level> = Vec::with_capacity(depth);
        let mut down_maps = Vec::with_capacity(depth - 1);
        let mut current = coords;
        for l in 0..depth {
            let same = build_kernel_map(&current, &current, Window::CUBE3, 1);
            levels.push(Level {
                stride: 1 << l,
                coords: Rc::clone(&current),
                same,
            });
            if l + 1 < depth {
                let next = Rc::new(current.downsample());
                down_maps.push(build_kernel_map(&current, &next, Window::CORNER2, 2));
                current = next;
            }
        }

        let input = SparseVoxelTensor {
            stride: 1,
            coords: Rc::clone(&levels[0].coords),
            features,
        };
        let x = relu(self.stem.apply(tape, store, &input, &levels[0].same, &levels[0])?)?;
        let mut x = self.residual(tape, store, x, &self.blocks[0], &levels[0])?;
        let mut skips = vec![x.clone()];
        for l in 0..depth - 1 {
            x = relu(self.downs[l].apply(tape, store, &x, &down_maps[l], &levels[l + 1])?)?;
            x = self.residual(tape, store, x, &self.blocks[l + 1], &levels[l + 1])?;
            skips.push(x.clone());
        }

        let mut raw = vec![x.clone()];
        let mut y = x;
        for (i, l) in (0..depth - 1).rev().enumerate() {
            let up_map = down_maps[l].transposed();
            let up = relu(self.ups[i].apply(tape, store, &y, &up_map, &levels[l])?)?;
            let cat = SparseVoxelTensor {
                features: tape.concat_cols(&[up.features, skips[l].features])?,
                ..up
            };
            y = relu(self.fuses[i].apply(tape, store, &cat, &levels[l].same, &levels[l])?)?;
            raw.push(y.clone());
        }

        let stages = raw
            .into_iter()
            .zip(&self.projections)
            .map(|(s, proj)| {
                Ok(StageMap {
                    stride: s.stride,
                    coords: s.coords,
                    features: proj.forward(tape, store, s.features)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderOutputs { stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(store: &mut ParamStore) -> SparseUNet {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = EncoderConfig {
            in_channels: 3,
            channels: vec![4, 6, 8],
            res_blocks: 1,
            hidden_dim: 5,
        };
        SparseUNet::new(store, "enc", cfg, &mut rng).unwrap()
    }

    #[test]
    fn one_voxel_scene() {
        let mut store = ParamStore::new();
        let net = net(&mut store);
        let tape = Tape::new();
        let coords = Rc::new(CoordSet::new(vec![[0, 4, 4, 4]]).unwrap());
        let feats = tape.constant(Tensor::row_vector(&[0.2, 0.4, 0.6]));
        let out = net.forward(&tape, &store, coords, feats).unwrap();
        assert_eq!(out.stages.len(), 3);
        for s in &out.stages {
            assert_eq!(s.features.shape(), vec![1, 5]);
        }
        assert_eq!(out.stages.iter().map(|s| s.stride).collect::<Vec<_>>(), vec![4, 2, 1]);
    }

    #[test]
    fn empty_input_rejected() {
        let mut store = ParamStore::new();
        let net = net(&mut store);
        let tape = Tape::new();
        let coords = Rc::new(CoordSet::new(vec![]).unwrap());
        let feats = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(net.forward(&tape, &store, coords, feats).is_err());
    }
}
