use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::EncoderConfig;

/// Attention and feed-forward parameters of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub query_w: T,
    pub query_b: T,
    pub key_w: T,
    pub key_b: T,
    pub value_w: T,
    pub value_b: T,
    pub output_w: T,
    pub output_b: T,
    pub attn_norm_gain: T,
    pub attn_norm_bias: T,
    pub ff_in_w: T,
    pub ff_in_b: T,
    pub ff_out_w: T,
    pub ff_out_b: T,
    pub ff_norm_gain: T,
    pub ff_norm_bias: T,
}

/// Every learnable buffer of the encoder and both heads, generic over the
/// storage: `Tensor` for weights, `Var` once bound to a tape, gradient or
/// optimizer-moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub segment_embedding: T,
    pub embed_norm_gain: T,
    pub embed_norm_bias: T,
    pub layers: Vec<LayerParams<T>>,
    pub pooler_w: T,
    pub pooler_b: T,
    pub pair_head_w: T,
    pub pair_head_b: T,
    pub mlm_head_w: T,
    pub mlm_head_b: T,
}

/// Role of a buffer, used to pick its initializer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
}

const LAYER_FIELDS: [(&str, ParamKind); 16] = [
    ("attention.query.weight", ParamKind::Weight),
    ("attention.query.bias", ParamKind::Bias),
    ("attention.key.weight", ParamKind::Weight),
    ("attention.key.bias", ParamKind::Bias),
    ("attention.value.weight", ParamKind::Weight),
    ("attention.value.bias", ParamKind::Bias),
    ("attention.output.weight", ParamKind::Weight),
    ("attention.output.bias", ParamKind::Bias),
    ("attention.norm.gain", ParamKind::NormGain),
    ("attention.norm.bias", ParamKind::Bias),
    ("ff.in.weight", ParamKind::Weight),
    ("ff.in.bias", ParamKind::Bias),
    ("ff.out.weight", ParamKind::Weight),
    ("ff.out.bias", ParamKind::Bias),
    ("ff.norm.gain", ParamKind::NormGain),
    ("ff.norm.bias", ParamKind::Bias),
];

impl<T> LayerParams<T> {
    fn refs(&self) -> [&T; 16] {
        [
            &self.query_w,
            &self.query_b,
            &self.key_w,
            &self.key_b,
            &self.value_w,
            &self.value_b,
            &self.output_w,
            &self.output_b,
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.ff_in_w,
            &self.ff_in_b,
            &self.ff_out_w,
            &self.ff_out_b,
            &self.ff_norm_gain,
            &self.ff_norm_bias,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.query_w,
            &mut self.query_b,
            &mut self.key_w,
            &mut self.key_b,
            &mut self.value_w,
            &mut self.value_b,
            &mut self.output_w,
            &mut self.output_b,
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.ff_in_w,
            &mut self.ff_in_b,
            &mut self.ff_out_w,
            &mut self.ff_out_b,
            &mut self.ff_norm_gain,
            &mut self.ff_norm_bias,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            query_w: it.next()?,
            query_b: it.next()?,
            key_w: it.next()?,
            key_b: it.next()?,
            value_w: it.next()?,
            value_b: it.next()?,
            output_w: it.next()?,
            output_b: it.next()?,
            attn_norm_gain: it.next()?,
            attn_norm_bias: it.next()?,
            ff_in_w: it.next()?,
            ff_in_b: it.next()?,
            ff_out_w: it.next()?,
            ff_out_b: it.next()?,
            ff_norm_gain: it.next()?,
            ff_norm_bias: it.next()?,
        })
    }
}

impl<T> EncoderParams<T> {
    /// Buffers in canonical (manifest) order.
    pub fn refs(&self) -> Vec<&T> {
        let mut out = alloc::vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.segment_embedding,
            &self.embed_norm_gain,
            &self.embed_norm_bias,
        ];
        for l in &self.layers {
            out.extend(l.refs());
        }
        out.extend([&self.pooler_w, &self.pooler_b, &self.pair_head_w, &self.pair_head_b, &self.mlm_head_w, &self.mlm_head_b]);
        out
    }

    pub fn refs_mut(&mut self) -> Vec<&mut T> {
        let mut out = alloc::vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.segment_embedding,
            &mut self.embed_norm_gain,
            &mut self.embed_norm_bias,
        ];
        for l in &mut self.layers {
            out.extend(l.refs_mut());
        }
        out.extend([
            &mut self.pooler_w,
            &mut self.pooler_b,
            &mut self.pair_head_w,
            &mut self.pair_head_b,
            &mut self.mlm_head_w,
            &mut self.mlm_head_b,
        ]);
        out
    }

    /// Rebuilds from buffers in canonical order; `None` if the count does
    /// not match `layers`.
    pub fn from_ordered(layers: usize, items: Vec<T>) -> Option<Self> {
        if items.len() != param_count(layers) {
            return None;
        }
        let mut it = items.into_iter();
        let token_embedding = it.next()?;
        let position_embedding = it.next()?;
        let segment_embedding = it.next()?;
        let embed_norm_gain = it.next()?;
        let embed_norm_bias = it.next()?;
        let mut ls = Vec::with_capacity(layers);
        for _ in 0..layers {
            ls.push(LayerParams::from_iter(&mut it)?);
        }
        Some(Self {
            token_embedding,
            position_embedding,
            segment_embedding,
            embed_norm_gain,
            embed_norm_bias,
            layers: ls,
            pooler_w: it.next()?,
            pooler_b: it.next()?,
            pair_head_w: it.next()?,
            pair_head_b: it.next()?,
            mlm_head_w: it.next()?,
            mlm_head_b: it.next()?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderParams<U> {
        let items = self.refs().into_iter().map(&mut f).collect();
        EncoderParams::from_ordered(self.layers.len(), items).expect("same layout")
    }
}

pub(crate) fn param_count(layers: usize) -> usize {
    5 + 16 * layers + 6
}

/// Canonical buffer names, shapes and initializer roles for a config.
pub fn layout(config: &EncoderConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let h = config.hidden;
    let f = config.ff_dim;
    let mut out = alloc::vec![
        (String::from("embeddings.token"), alloc::vec![config.vocab_size, h], ParamKind::Weight),
        (String::from("embeddings.position"), alloc::vec![config.max_positions, h], ParamKind::Weight),
        (String::from("embeddings.segment"), alloc::vec![config.segment_types, h], ParamKind::Weight),
        (String::from("embeddings.norm.gain"), alloc::vec![h], ParamKind::NormGain),
        (String::from("embeddings.norm.bias"), alloc::vec![h], ParamKind::Bias),
    ];
    for l in 0..config.layers {
        for (name, kind) in LAYER_FIELDS {
            let shape = match name {
                "ff.in.weight" => alloc::vec![h, f],
                "ff.in.bias" => alloc::vec![f],
                "ff.out.weight" => alloc::vec![f, h],
                n if n.ends_with("weight") => alloc::vec![h, h],
                _ => alloc::vec![h],
            };
            out.push((format!("layers.{l}.{name}"), shape, kind));
        }
    }
    out.extend([
        (String::from("pooler.weight"), alloc::vec![h, h], ParamKind::Weight),
        (String::from("pooler.bias"), alloc::vec![h], ParamKind::Bias),
        (String::from("pair_head.weight"), alloc::vec![h, 2], ParamKind::Weight),
        (String::from("pair_head.bias"), alloc::vec![2], ParamKind::Bias),
        (String::from("mlm_head.weight"), alloc::vec![h, config.vocab_size], ParamKind::Weight),
        (String::from("mlm_head.bias"), alloc::vec![config.vocab_size], ParamKind::Bias),
    ]);
    out
}
