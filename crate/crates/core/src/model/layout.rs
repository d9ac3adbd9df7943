use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorKind {
    Base,
    LoraA,
    LoraB,
}

/// Which tensors receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainScope {
    /// Only the low-rank adapters; every base weight is frozen.
    #[default]
    Lora,
    /// Every base weight; adapters stay frozen.
    Full,
}

impl TrainScope {
    pub fn trains(self, kind: TensorKind) -> bool {
        match self {
            TrainScope::Lora => kind != TensorKind::Base,
            TrainScope::Full => kind == TensorKind::Base,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Tensor indices of one transformer block. Weight matrices are stored as
/// (out, in); adapters as A: (rank, in) and B: (out, rank).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub lora_q_a: usize,
    pub lora_q_b: usize,
    pub lora_v_a: usize,
    pub lora_v_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub wte: usize,
    pub wpe: usize,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head: usize,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    offset: usize,
}

impl Builder {
    fn push(&mut self, name: String, rows: usize, cols: usize, kind: TensorKind) -> usize {
        self.tensors.push(TensorSpec {
            name,
            offset: self.offset,
            rows,
            cols,
            kind,
        });
        self.offset += rows * cols;
        self.tensors.len() - 1
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let r = cfg.lora_rank;
        let ff = 4 * d;
        let mut b = Builder {
            tensors: Vec::new(),
            offset: 0,
        };
        use TensorKind::*;
        let wte = b.push("wte".into(), cfg.vocab_size, d, Base);
        let wpe = b.push("wpe".into(), cfg.context_len, d, Base);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let n = |s: &str| format!("h{l}.{s}");
                BlockIds {
                    ln1_g: b.push(n("ln1.g"), 1, d, Base),
                    ln1_b: b.push(n("ln1.b"), 1, d, Base),
                    wq: b.push(n("attn.wq"), d, d, Base),
                    bq: b.push(n("attn.bq"), 1, d, Base),
                    wk: b.push(n("attn.wk"), d, d, Base),
                    bk: b.push(n("attn.bk"), 1, d, Base),
                    wv: b.push(n("attn.wv"), d, d, Base),
                    bv: b.push(n("attn.bv"), 1, d, Base),
                    wo: b.push(n("attn.wo"), d, d, Base),
                    bo: b.push(n("attn.bo"), 1, d, Base),
                    lora_q_a: b.push(n("lora.q.a"), r, d, LoraA),
                    lora_q_b: b.push(n("lora.q.b"), d, r, LoraB),
                    lora_v_a: b.push(n("lora.v.a"), r, d, LoraA),
                    lora_v_b: b.push(n("lora.v.b"), d, r, LoraB),
                    ln2_g: b.push(n("ln2.g"), 1, d, Base),
                    ln2_b: b.push(n("ln2.b"), 1, d, Base),
                    w1: b.push(n("mlp.w1"), ff, d, Base),
                    b1: b.push(n("mlp.b1"), 1, ff, Base),
                    w2: b.push(n("mlp.w2"), d, ff, Base),
                    b2: b.push(n("mlp.b2"), 1, d, Base),
                }
            })
            .collect();
        let lnf_g = b.push("lnf.g".into(), 1, d, Base);
        let lnf_b = b.push("lnf.b".into(), 1, d, Base);
        let head = b.push("head".into(), cfg.vocab_size, d, Base);
        Self {
            total: b.offset,
            tensors: b.tensors,
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            head,
        }
    }

    pub fn spec(&self, id: usize) -> &TensorSpec {
        &self.tensors[id]
    }

    pub fn mat<'a>(&self, data: &'a [f64], id: usize) -> ArrayView2<'a, f64> {
        let s = &self.tensors[id];
        ArrayView2::from_shape((s.rows, s.cols), &data[s.range()]).expect("layout shape")
    }

    pub fn mat_mut<'a>(&self, data: &'a mut [f64], id: usize) -> ArrayViewMut2<'a, f64> {
        let s = &self.tensors[id];
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut data[s.range()]).expect("layout shape")
    }

    pub fn vec<'a>(&self, data: &'a [f64], id: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.tensors[id].range()])
    }

    /// Flat ranges of the trainable tensors, in layout order.
    pub fn trainable_ranges(&self, scope: TrainScope) -> Vec<Range<usize>> {
        self.tensors
            .iter()
            .filter(|t| scope.trains(t.kind))
            .map(TensorSpec::range)
            .collect()
    }

    pub fn is_trainable(&self, id: usize, scope: TrainScope) -> bool {
        scope.trains(self.tensors[id].kind)
    }
}
