//! Tape-graph construction for the encoder, prompt encoder, and decoder.
//!
//! The same builders serve inference (parameters bound as constants) and
//! training (trainable groups bound as differentiable leaves), so the two
//! paths are numerically identical by construction.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ParamGroup, Parameters};
use crate::autodiff::{NodeId, SparseMap, Tape};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Parameter tensors bound into a tape, trainable groups as leaves and the
/// rest as constants.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    /// Bind according to the parameters' per-group trainable flags.
    pub fn bind<S: Scalar>(tape: &mut Tape<S>, params: &Parameters<S>) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, tensor) in params.tensors() {
            let id = if params.is_trainable(ParamGroup::of(name)) {
                tape.leaf(tensor.clone())
            } else {
                tape.constant(tensor.clone())
            };
            ids.insert(name.to_string(), id);
        }
        BoundParams { ids }
    }

    /// Bind everything as constants (inference).
    pub fn bind_frozen<S: Scalar>(tape: &mut Tape<S>, params: &Parameters<S>) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, tensor) in params.tensors() {
            ids.insert(name.to_string(), tape.constant(tensor.clone()));
        }
        BoundParams { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor '{name}'"))
    }

    /// (name, node) pairs in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    bp: &BoundParams,
    x: NodeId,
    w: &str,
    b: &str,
) -> NodeId {
    let wx = tape.matmul(x, bp.id(w));
    tape.add_row(wx, bp.id(b))
}

fn layer_norm_affine<S: Scalar>(
    tape: &mut Tape<S>,
    bp: &BoundParams,
    x: NodeId,
    prefix: &str,
) -> NodeId {
    let normed = tape.layer_norm(x, S::from_f64(LN_EPS));
    let scaled = tape.mul_row(normed, bp.id(&format!("{prefix}.gain")));
    tape.add_row(scaled, bp.id(&format!("{prefix}.bias")))
}

fn mlp<S: Scalar>(tape: &mut Tape<S>, bp: &BoundParams, x: NodeId, prefix: &str) -> NodeId {
    let h = linear(tape, bp, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
    let h = tape.gelu(h);
    linear(tape, bp, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

/// `[n, D] -> [heads, n, dh]` axis permutation.
fn split_heads<S: Scalar>(tape: &mut Tape<S>, x: NodeId, heads: usize) -> NodeId {
    let shape = tape.value(x).shape().to_vec();
    let (n, d) = (shape[0], shape[1]);
    let dh = d / heads;
    let mut index = Vec::with_capacity(n * d);
    for h in 0..heads {
        for i in 0..n {
            for c in 0..dh {
                index.push((i * d + h * dh + c) as u32);
            }
        }
    }
    tape.gather(x, Rc::new(index), vec![heads, n, dh])
}

/// `[heads, n, dh] -> [n, D]` inverse permutation.
fn merge_heads<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> NodeId {
    let shape = tape.value(x).shape().to_vec();
    let (heads, n, dh) = (shape[0], shape[1], shape[2]);
    let d = heads * dh;
    let mut index = Vec::with_capacity(n * d);
    for i in 0..n {
        for h in 0..heads {
            for c in 0..dh {
                index.push(((h * n + i) * dh + c) as u32);
            }
        }
    }
    tape.gather(x, Rc::new(index), vec![n, d])
}

/// Standard multi-head attention with separate query/key/value inputs.
fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    bp: &BoundParams,
    prefix: &str,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    heads: usize,
) -> NodeId {
    let q = linear(tape, bp, q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
    let k = linear(tape, bp, k_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
    let v = linear(tape, bp, v_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
    let d = tape.value(q).shape()[1];
    let dh = d / heads;
    let qh = split_heads(tape, q, heads);
    let kh = split_heads(tape, k, heads);
    let vh = split_heads(tape, v, heads);
    let kt = tape.transpose_last(kh);
    let scores = tape.batch_matmul(qh, kt);
    let scaled = tape.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()));
    let attn = tape.softmax(scaled);
    let ctx = tape.batch_matmul(attn, vh);
    let merged = merge_heads(tape, ctx);
    linear(tape, bp, merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

/// Random-Fourier positional encoding of points in the unit square:
/// `pe(x) = [sin(2*pi*Bx), cos(2*pi*Bx)]` with `B` a fixed `(D/2) x 2`
/// Gaussian matrix (std `pe_scale`) drawn once from `pe_seed`.
pub fn fourier_position_encoding<S: Scalar>(
    points: &[(f64, f64)],
    pe_seed: u64,
    pe_scale: f64,
    embed_dim: usize,
) -> Result<Tensor<S>> {
    if embed_dim == 0 || embed_dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "fourier encoding needs even embed_dim, got {embed_dim}"
        )));
    }
    for &(x, y) in points {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Validation(format!(
                "fourier encoding expects coordinates in [0,1], got ({x}, {y})"
            )));
        }
    }
    let half = embed_dim / 2;
    let normal = Normal::new(0.0, pe_scale)
        .map_err(|e| Error::InvalidConfig(format!("pe_scale: {e}")))?;
    let mut rng = rng_for(pe_seed, "fourier-pe", 0);
    // row-major (half x 2)
    let freq: Vec<f64> = (0..half * 2).map(|_| normal.sample(&mut rng)).collect();

    let tau = std::f64::consts::TAU;
    let mut data = Vec::with_capacity(points.len() * embed_dim);
    for &(x, y) in points {
        for j in 0..half {
            let phase = tau * (freq[j * 2] * x + freq[j * 2 + 1] * y);
            data.push(S::from_f64(phase.sin()));
        }
        for j in 0..half {
            let phase = tau * (freq[j * 2] * x + freq[j * 2 + 1] * y);
            data.push(S::from_f64(phase.cos()));
        }
    }
    Tensor::new(vec![points.len(), embed_dim], data)
}

/// Positional encoding of the embedding grid's patch centers, `[G*G, D]`.
pub fn image_grid_encoding<S: Scalar>(config: &ModelConfig) -> Result<Tensor<S>> {
    let g = config.grid_size();
    let mut points = Vec::with_capacity(g * g);
    for row in 0..g {
        for col in 0..g {
            points.push((
                (col as f64 + 0.5) / g as f64,
                (row as f64 + 0.5) / g as f64,
            ));
        }
    }
    fourier_position_encoding(&points, config.pe_seed, config.pe_scale, config.embed_dim)
}

/// Flatten an image into per-patch rows, `[G*G, patch*patch]`.
fn patchify<S: Scalar>(image: &Tensor<S>, config: &ModelConfig) -> Tensor<S> {
    let size = config.image_size;
    let p = config.patch_size;
    let g = config.grid_size();
    let mut data = Vec::with_capacity(size * size);
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                for px in 0..p {
                    data.push(image.data()[(gy * p + py) * size + gx * p + px]);
                }
            }
        }
    }
    Tensor::new(vec![g * g, p * p], data).unwrap()
}

/// ViT-style encoder: patch embedding + learned positions, then pre-norm
/// attention/MLP blocks and a final norm. Output `[G*G, D]`.
pub fn encode_image_graph<S: Scalar>(
    tape: &mut Tape<S>,
    bp: &BoundParams,
    config: &ModelConfig,
    image: &Tensor<S>,
) -> Result<NodeId> {
    if image.shape() != [config.image_size, config.image_size] {
        return Err(Error::shape(
            "encode_image",
            format!("{0}x{0}", config.image_size),
            format!("{:?}", image.shape()),
        ));
    }
    let patches = tape.constant(patchify(image, config));
    let mut x = linear(tape, bp, patches, "encoder.patch_embed.weight", "encoder.patch_embed.bias");
    x = tape.add(x, bp.id("encoder.pos_embed"));
    for l in 0..config.encoder_depth {
        let pre = layer_norm_affine(tape, bp, x, &format!("encoder.block{l}.ln1"));
        let attn_out = attention(
            tape,
            bp,
            &format!("encoder.block{l}.attn"),
            pre,
            pre,
            pre,
            config.encoder_heads,
        );
        x = tape.add(x, attn_out);
        let pre = layer_norm_affine(tape, bp, x, &format!("encoder.block{l}.ln2"));
        let mlp_out = mlp(tape, bp, pre, &format!("encoder.block{l}.mlp"));
        x = tape.add(x, mlp_out);
    }
    Ok(layer_norm_affine(tape, bp, x, "encoder.ln_out"))
}

/// Corner tokens for each box: Fourier encoding of the two normalized
/// corners plus the learned corner-role embeddings. One `[2, D]` node per
/// box.
pub fn prompt_tokens_graph<S: Scalar>(
    tape: &mut Tape<S>,
    bp: &BoundParams,
    config: &ModelConfig,
    boxes: &[crate::geometry::BBox],
    image_size: usize,
) -> Result<Vec<NodeId>> {
    if boxes.is_empty() {
        return Err(Error::Validation("prompt encoding: empty prompt list".into()));
    }
    let corner = bp.id("prompt_encoder.corner_embed");
    let mut out = Vec::with_capacity(boxes.len());
    for b in boxes {
        b.validate(image_size, image_size)?;
        let s = image_size as f64;
        let points = [
            (b.xmin as f64 / s, b.ymin as f64 / s),
            (b.xmax as f64 / s, b.ymax as f64 / s),
        ];
        let pe: Tensor<S> =
            fourier_position_encoding(&points, config.pe_seed, config.pe_scale, config.embed_dim)?;
        let pe_node = tape.constant(pe);
        out.push(tape.add(pe_node, corner));
    }
    Ok(out)
}

/// Pixel-shuffle permutation for one 2x upsampling stage:
/// `[g*g, 4*c] -> [(2g)*(2g), c]` where the 4 columns-per-channel block of a
/// patch becomes its 2x2 output pixels.
fn pixel_shuffle_2x<S: Scalar>(tape: &mut Tape<S>, x: NodeId, g: usize, c: usize) -> NodeId {
    let g2 = 2 * g;
    let mut index = vec![0u32; g2 * g2 * c];
    for gy in 0..g {
        for gx in 0..g {
            for dy in 0..2 {
                for dx in 0..2 {
                    for ch in 0..c {
                        let src = ((gy * g + gx) * 4 + dy * 2 + dx) * c + ch;
                        let dst = ((2 * gy + dy) * g2 + (2 * gx + dx)) * c + ch;
                        index[dst] = src as u32;
                    }
                }
            }
        }
    }
    tape.gather(x, Rc::new(index), vec![g2 * g2, c])
}

/// Bilinear interpolation map from an `l x l` grid to an `n x n` grid with
/// half-pixel centers, as a sparse linear op.
fn bilinear_map(l: usize, n: usize) -> SparseMap {
    let scale = l as f64 / n as f64;
    let mut entries = Vec::with_capacity(n * n * 4);
    let clamp = |v: isize| -> usize { v.clamp(0, l as isize - 1) as usize };
    for oy in 0..n {
        let sy = (oy as f64 + 0.5) * scale - 0.5;
        let y0 = sy.floor() as isize;
        let wy = sy - y0 as f64;
        for ox in 0..n {
            let sx = (ox as f64 + 0.5) * scale - 0.5;
            let x0 = sx.floor() as isize;
            let wx = sx - x0 as f64;
            let out = (oy * n + ox) as u32;
            let taps = [
                (clamp(y0), clamp(x0), (1.0 - wy) * (1.0 - wx)),
                (clamp(y0), clamp(x0 + 1), (1.0 - wy) * wx),
                (clamp(y0 + 1), clamp(x0), wy * (1.0 - wx)),
                (clamp(y0 + 1), clamp(x0 + 1), wy * wx),
            ];
            for (ty, tx, w) in taps {
                if w != 0.0 {
                    entries.push((out, (ty * l + tx) as u32, w));
                }
            }
        }
    }
    SparseMap {
        entries,
        in_len: l * l,
        out_len: n * n,
    }
}

/// One two-way attention block, SAM-style: token self-attention, token ->
/// image cross-attention, token MLP, then image -> token cross-attention
/// writing back into the image features. Post-norm residuals throughout.
#[allow(clippy::too_many_arguments)]
fn two_way_block<S: Scalar>(
    tape: &mut Tape<S>,
    bp: &BoundParams,
    prefix: &str,
    queries: NodeId,
    keys: NodeId,
    query_pe: NodeId,
    key_pe: NodeId,
    heads: usize,
    first_layer: bool,
) -> (NodeId, NodeId) {
    let mut q = if first_layer {
        attention(tape, bp, &format!("{prefix}.self_attn"), queries, queries, queries, heads)
    } else {
        let qp = tape.add(queries, query_pe);
        let attn_out = attention(tape, bp, &format!("{prefix}.self_attn"), qp, qp, queries, heads);
        tape.add(queries, attn_out)
    };
    q = layer_norm_affine(tape, bp, q, &format!("{prefix}.norm1"));

    let qp = tape.add(q, query_pe);
    let kp = tape.add(keys, key_pe);
    let attn_out = attention(tape, bp, &format!("{prefix}.t2i_attn"), qp, kp, keys, heads);
    let mut q = tape.add(q, attn_out);
    q = layer_norm_affine(tape, bp, q, &format!("{prefix}.norm2"));

    let mlp_out = mlp(tape, bp, q, &format!("{prefix}.mlp"));
    let mut q = tape.add(q, mlp_out);
    q = layer_norm_affine(tape, bp, q, &format!("{prefix}.norm3"));

    let qp = tape.add(q, query_pe);
    let kp = tape.add(keys, key_pe);
    let attn_out = attention(tape, bp, &format!("{prefix}.i2t_attn"), kp, qp, q, heads);
    let mut k = tape.add(keys, attn_out);
    k = layer_norm_affine(tape, bp, k, &format!("{prefix}.norm4"));

    (q, k)
}

/// Decode each prompt independently into a `[H*W]` logit node. The graph per
/// prompt: two-way transformer over [mask token | corner tokens] and the
/// image features, learned 2x upsampling of the updated image features to
/// the logit grid, a per-pixel dot product with the mapped mask token, and a
/// bilinear resize to image resolution.
pub fn decode_masks_graph<S: Scalar>(
    tape: &mut Tape<S>,
    bp: &BoundParams,
    config: &ModelConfig,
    embedding: NodeId,
    prompts: &[NodeId],
) -> Result<Vec<NodeId>> {
    if prompts.is_empty() {
        return Err(Error::Validation("decode: no prompts".into()));
    }
    let g = config.grid_size();
    let d = config.embed_dim;
    if tape.value(embedding).shape() != [g * g, d] {
        return Err(Error::shape(
            "decode embedding",
            format!("[{}, {}]", g * g, d),
            format!("{:?}", tape.value(embedding).shape()),
        ));
    }
    let image_pe = image_grid_encoding::<S>(config)?;
    let image_pe = tape.constant(image_pe);
    let heads = config.decoder_heads;
    let stages = config.upsample_stages();
    let resize = if config.logit_grid == config.image_size {
        None
    } else {
        Some(Rc::new(bilinear_map(config.logit_grid, config.image_size)))
    };

    let mut channels = Vec::with_capacity(prompts.len());
    for &prompt in prompts {
        if tape.value(prompt).shape() != [2, d] {
            return Err(Error::shape(
                "decode prompt tokens",
                format!("[2, {d}]"),
                format!("{:?}", tape.value(prompt).shape()),
            ));
        }
        let tokens = {
            let mask_token = bp.id("decoder.mask_token");
            tape.concat_rows(vec![mask_token, prompt])
        };
        let mut queries = tokens;
        let mut keys = embedding;
        for l in 0..config.decoder_depth {
            let (q, k) = two_way_block(
                tape,
                bp,
                &format!("decoder.block{l}"),
                queries,
                keys,
                tokens,
                image_pe,
                heads,
                l == 0,
            );
            queries = q;
            keys = k;
        }
        // final token -> image attention
        let qp = tape.add(queries, tokens);
        let kp = tape.add(keys, image_pe);
        let attn_out = attention(tape, bp, "decoder.final_attn", qp, kp, keys, heads);
        let mut q = tape.add(queries, attn_out);
        q = layer_norm_affine(tape, bp, q, "decoder.final_norm");

        // mask token through its head MLP
        let mask_tok = tape.slice_rows(q, 0, 1);
        let h = linear(tape, bp, mask_tok, "decoder.mask_mlp.w1", "decoder.mask_mlp.b1");
        let h = tape.gelu(h);
        let head = linear(tape, bp, h, "decoder.mask_mlp.w2", "decoder.mask_mlp.b2");

        // learned upsampling of the updated image features
        let mut feat = keys;
        let mut side = g;
        for i in 1..=stages {
            let c_out = config.upsample_channels(i);
            let expanded = linear(
                tape,
                bp,
                feat,
                &format!("decoder.up{i}.weight"),
                &format!("decoder.up{i}.bias"),
            );
            feat = pixel_shuffle_2x(tape, expanded, side, c_out);
            side *= 2;
            if i < stages {
                feat = layer_norm_affine(tape, bp, feat, &format!("decoder.up{i}.norm"));
            }
            feat = tape.gelu(feat);
        }

        // per-pixel dot with the mask token
        let head_t = tape.transpose_last(head);
        let low = tape.matmul(feat, head_t);
        let low_flat = tape.reshape(low, vec![config.logit_grid * config.logit_grid]);
        let full = match &resize {
            Some(map) => tape.sparse_linear(
                low_flat,
                map.clone(),
                vec![config.image_size * config.image_size],
            ),
            None => low_flat,
        };
        channels.push(full);
    }
    Ok(channels)
}
