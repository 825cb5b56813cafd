use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::block::{BlockId, BlockKind};
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Registry entry of one selectable block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub id: BlockId,
    /// Flattened dimension D.
    pub dim: usize,
    /// Indices into the parameter tensor list.
    pub tensors: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub wq: Vec<usize>,
    pub wk: Vec<usize>,
    pub wv: Vec<usize>,
    pub wo: Vec<usize>,
    pub fc_w: usize,
    pub fc_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

/// Tensor ordering: selectable blocks in canonical [`BlockId`] order, then
/// embeddings and layer norms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub(crate) blocks: Vec<BlockInfo>,
    pub(crate) layers: Vec<LayerSlots>,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    shapes: Vec<Vec<usize>>,
    names: Vec<String>,
    block_of: Vec<Option<usize>>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, dh, f) = (cfg.d_model, cfg.d_head(), cfg.d_ff);
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        let mut names = Vec::new();
        let mut block_of = Vec::new();
        let mut blocks = Vec::new();
        let mut layers = Vec::new();

        let mut push = |shape: Vec<usize>, name: String, block: Option<usize>| {
            shapes.push(shape);
            names.push(name);
            block_of.push(block);
            shapes.len() - 1
        };

        for l in 0..cfg.n_layers {
            let mut slots = LayerSlots {
                wq: vec![],
                wk: vec![],
                wv: vec![],
                wo: vec![],
                fc_w: 0,
                fc_b: 0,
                proj_w: 0,
                proj_b: 0,
                ln1_g: 0,
                ln1_b: 0,
                ln2_g: 0,
                ln2_b: 0,
            };
            for kind in BlockKind::ATTENTION {
                for h in 0..cfg.n_heads {
                    let id = BlockId::head(l, kind, h);
                    let shape = if kind == BlockKind::Wo { vec![dh, d] } else { vec![d, dh] };
                    let idx = push(shape, id.to_string(), Some(blocks.len()));
                    blocks.push(BlockInfo {
                        id,
                        dim: d * dh,
                        tensors: vec![idx],
                    });
                    match kind {
                        BlockKind::Wk => slots.wk.push(idx),
                        BlockKind::Wq => slots.wq.push(idx),
                        BlockKind::Wv => slots.wv.push(idx),
                        _ => slots.wo.push(idx),
                    }
                }
            }
            let id = BlockId::mlp(l, BlockKind::Cfc);
            slots.fc_w = push(vec![d, f], format!("{id}.weight"), Some(blocks.len()));
            slots.fc_b = push(vec![f], format!("{id}.bias"), Some(blocks.len()));
            blocks.push(BlockInfo {
                id,
                dim: d * f + f,
                tensors: vec![slots.fc_w, slots.fc_b],
            });
            let id = BlockId::mlp(l, BlockKind::Cproj);
            slots.proj_w = push(vec![f, d], format!("{id}.weight"), Some(blocks.len()));
            slots.proj_b = push(vec![d], format!("{id}.bias"), Some(blocks.len()));
            blocks.push(BlockInfo {
                id,
                dim: f * d + d,
                tensors: vec![slots.proj_w, slots.proj_b],
            });
            layers.push(slots);
        }

        let tok_emb = push(vec![cfg.vocab_size, d], "tok_emb".into(), None);
        let pos_emb = push(vec![cfg.context_len, d], "pos_emb".into(), None);
        for (l, slots) in layers.iter_mut().enumerate() {
            slots.ln1_g = push(vec![d], format!("L{l}.ln1.gain"), None);
            slots.ln1_b = push(vec![d], format!("L{l}.ln1.bias"), None);
            slots.ln2_g = push(vec![d], format!("L{l}.ln2.gain"), None);
            slots.ln2_b = push(vec![d], format!("L{l}.ln2.bias"), None);
        }
        let lnf_g = push(vec![d], "lnf.gain".into(), None);
        let lnf_b = push(vec![d], "lnf.bias".into(), None);

        Self {
            blocks,
            layers,
            tok_emb,
            pos_emb,
            lnf_g,
            lnf_b,
            shapes,
            names,
            block_of,
        }
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn block(&self, id: BlockId) -> Option<&BlockInfo> {
        self.blocks.binary_search_by(|b| b.id.cmp(&id)).ok().map(|i| &self.blocks[i])
    }

    pub fn tensor_count(&self) -> usize {
        self.shapes.len()
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Registry block owning tensor `i`, if any.
    pub fn block_of(&self, i: usize) -> Option<BlockId> {
        self.block_of[i].map(|b| self.blocks[b].id)
    }

    fn is_gain(&self, i: usize) -> bool {
        self.names[i].ends_with(".gain")
    }

    fn is_bias(&self, i: usize) -> bool {
        self.names[i].ends_with(".bias")
    }
}

/// All learnable tensors of the model, in [`Layout`] order.
#[derive(Clone, Debug)]
pub struct ModelParameters<F: Real = f32> {
    config: ModelConfig,
    layout: Arc<Layout>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> PartialEq for ModelParameters<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl ModelParameters<f32> {
    /// Scaled-normal weights, unit layer-norm gains, zero biases.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = rng::substream(config.seed, rng::INIT);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        let tensors = (0..layout.tensor_count())
            .map(|i| {
                let shape = layout.shape(i).to_vec();
                let n: usize = shape.iter().product();
                let data: Vec<f32> = if layout.is_gain(i) {
                    vec![1.0; n]
                } else if layout.is_bias(i) {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            layout: Arc::new(layout),
            tensors,
        })
    }
}

impl<F: Real> ModelParameters<F> {
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if tensors.len() != layout.tensor_count() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                layout.tensor_count(),
                tensors.len()
            )));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != layout.shape(i) {
                return Err(Error::Shape(format!(
                    "{}: expected {:?}, got {:?}",
                    layout.name(i),
                    layout.shape(i),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            layout: Arc::new(layout),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Concatenated values of one block's tensors.
    pub fn block_values(&self, id: BlockId) -> Option<Vec<F>> {
        let info = self.layout.block(id)?;
        Some(
            info.tensors
                .iter()
                .flat_map(|&i| self.tensors[i].data().iter().copied())
                .collect(),
        )
    }

    pub fn flatten(&self) -> Vec<F> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn cast<G: Real>(&self) -> ModelParameters<G> {
        ModelParameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn same_shape(&self, other: &ModelParameters<F>) -> bool {
        self.config == other.config
    }
}
