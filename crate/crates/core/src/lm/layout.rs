//! Flat parameter layout: every tensor lives at a fixed offset in one
//! contiguous buffer, which keeps the optimizer, gradient checker and file
//! format indifferent to the architecture.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one transformer block's tensors.
#[derive(Debug, Clone, Copy)]
pub struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_proj: usize,
    pub b_proj: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_out: usize,
    pub b_out: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub wte: usize,
    pub wpe: usize,
    pub blocks: Vec<BlockOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub total: usize,
    pub specs: Vec<TensorSpec>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let (v, c, d, f) = (cfg.vocab_size, cfg.context_len, cfg.d_model, cfg.d_ff);
        let mut specs = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| -> usize {
            let offset = total;
            total += shape.iter().product::<usize>();
            specs.push(TensorSpec { name, shape, offset });
            offset
        };
        let wte = add("wte".into(), vec![v, d]);
        let wpe = add("wpe".into(), vec![c, d]);
        let blocks = (0..cfg.n_layers)
            .map(|l| BlockOffsets {
                ln1_g: add(format!("h{l}.ln1.g"), vec![d]),
                ln1_b: add(format!("h{l}.ln1.b"), vec![d]),
                w_qkv: add(format!("h{l}.attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: add(format!("h{l}.attn.b_qkv"), vec![3 * d]),
                w_proj: add(format!("h{l}.attn.w_proj"), vec![d, d]),
                b_proj: add(format!("h{l}.attn.b_proj"), vec![d]),
                ln2_g: add(format!("h{l}.ln2.g"), vec![d]),
                ln2_b: add(format!("h{l}.ln2.b"), vec![d]),
                w_fc: add(format!("h{l}.mlp.w_fc"), vec![d, f]),
                b_fc: add(format!("h{l}.mlp.b_fc"), vec![f]),
                w_out: add(format!("h{l}.mlp.w_out"), vec![f, d]),
                b_out: add(format!("h{l}.mlp.b_out"), vec![d]),
            })
            .collect();
        let lnf_g = add("lnf.g".into(), vec![d]);
        let lnf_b = add("lnf.b".into(), vec![d]);
        Layout {
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            total,
            specs,
        }
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_contiguous() {
        let cfg = ModelConfig {
            n_layers: 2,
            vocab_size: 10,
            ..ModelConfig::default()
        };
        let layout = Layout::new(&cfg);
        let mut next = 0;
        for s in &layout.specs {
            assert_eq!(s.offset, next, "{}", s.name);
            next += s.len();
        }
        assert_eq!(next, layout.total);
        assert_eq!(layout.specs.len(), 2 + 12 * 2 + 2);
    }
}
