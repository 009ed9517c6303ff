//! Frozen transformer encoder with prefix injection.
//!
//! The encoder is never trained. Gradients flow backward through it only to
//! reach the prefix rows of the current prompt pool.

mod attention;
mod backbone;

pub use attention::{moe_gates, moe_oracle, msa_forward, prefix_attention, prefix_attention_heads, PrefixBundle, PrefixPair};
pub use backbone::{EncoderConfig, FrozenBackbone, LayerWeights, E1_MARKER, E2_MARKER, RESERVED_TOKENS};

use attention::{attention_heads, attention_heads_backward, AttentionCache};

use crate::error::{Error, Result};
use crate::numkit::{matmul_into, matmul_nt_into, Mat};

const NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct BlockCache {
    attn: AttentionCache,
    ffn_pre: Mat,
    ffn_act: Mat,
    normed: Mat,
    inv_std: Vec<f64>,
}

/// Activations retained by [`encode_cached`] for [`backward`].
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
}

/// Gradients of a scalar with respect to the prefix rows of each layer.
#[derive(Clone, Debug)]
pub struct PrefixGrads {
    pub layers: Vec<PrefixPair>,
}

fn embed(tokens: &[u32], backbone: &FrozenBackbone) -> Result<Mat> {
    let cfg = backbone.config();
    if tokens.is_empty() || tokens.len() > cfg.max_seq {
        return Err(Error::Input(format!(
            "sequence of {} tokens (max {})",
            tokens.len(),
            cfg.max_seq
        )));
    }
    let d = cfg.d_model;
    let mut x = Mat::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        if t >= cfg.vocab {
            return Err(Error::Input(format!("token id {t} outside vocabulary of {}", cfg.vocab)));
        }
        let row = x.row_mut(i);
        for ((o, e), p) in row
            .iter_mut()
            .zip(backbone.token_embedding.row(t))
            .zip(backbone.position_embedding.row(i))
        {
            *o = e + p;
        }
    }
    Ok(x)
}

fn check_bundle(bundle: &PrefixBundle, backbone: &FrozenBackbone) -> Result<()> {
    let cfg = backbone.config();
    if bundle.layers.len() != cfg.layers {
        return Err(Error::dim(format!(
            "bundle covers {} layers, encoder has {}",
            bundle.layers.len(),
            cfg.layers
        )));
    }
    for pair in &bundle.layers {
        if pair.keys.dims() != pair.values.dims() {
            return Err(Error::dim("prefix key/value row counts differ"));
        }
        if !pair.is_empty() && pair.keys.cols() != cfg.d_model {
            return Err(Error::dim(format!(
                "prefix width {} vs model width {}",
                pair.keys.cols(),
                cfg.d_model
            )));
        }
    }
    Ok(())
}

fn run(tokens: &[u32], bundle: Option<&PrefixBundle>, backbone: &FrozenBackbone, keep: bool) -> Result<(Mat, Option<ForwardCache>)> {
    let cfg = backbone.config();
    if let Some(b) = bundle {
        check_bundle(b, backbone)?;
    }
    backbone.count_pass(bundle.is_some());
    let mut x = embed(tokens, backbone)?;
    let n = x.rows();
    let d = cfg.d_model;
    let empty = PrefixPair::empty(d);
    let mut blocks = Vec::new();
    for (l, w) in backbone.layers.iter().enumerate() {
        let prefix = match bundle {
            Some(b) if cfg.injects(l) => &b.layers[l],
            _ => &empty,
        };
        let (heads, attn) = attention_heads(w, cfg.heads, &x, prefix);
        let mut r = Mat::zeros(n, d);
        matmul_into(&heads, &w.wo, &mut r);
        for (o, xi) in r.as_mut_slice().iter_mut().zip(x.as_slice()) {
            *o += xi;
        }
        let mut ffn_pre = Mat::zeros(n, cfg.ffn_hidden);
        matmul_into(&r, &w.w1, &mut ffn_pre);
        let mut ffn_act = ffn_pre.clone();
        ffn_act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
        let mut u = Mat::zeros(n, d);
        matmul_into(&ffn_act, &w.w2, &mut u);
        for (o, ri) in u.as_mut_slice().iter_mut().zip(r.as_slice()) {
            *o += ri;
        }
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = u.row_mut(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        if keep {
            blocks.push(BlockCache {
                attn,
                ffn_pre,
                ffn_act,
                normed: u.clone(),
                inv_std,
            });
        }
        x = u;
    }
    Ok((x, keep.then_some(ForwardCache { blocks })))
}

/// Hidden states `N × d` for a token sequence, with the bundle's prefix
/// rows injected at the configured layers. `None` is the plain backbone.
pub fn encode(tokens: &[u32], bundle: Option<&PrefixBundle>, backbone: &FrozenBackbone) -> Result<Mat> {
    Ok(run(tokens, bundle, backbone, false)?.0)
}

/// [`encode`], also returning the activations needed by [`backward`].
pub fn encode_cached(tokens: &[u32], bundle: Option<&PrefixBundle>, backbone: &FrozenBackbone) -> Result<(Mat, ForwardCache)> {
    let (h, c) = run(tokens, bundle, backbone, true)?;
    Ok((h, c.expect("cache requested")))
}

/// Back-propagates `d_hidden` (gradient of a scalar with respect to the
/// final hidden states) to the prefix rows of every layer.
pub fn backward(backbone: &FrozenBackbone, cache: &ForwardCache, d_hidden: &Mat) -> PrefixGrads {
    let cfg = backbone.config();
    let d = cfg.d_model;
    let mut layers = vec![PrefixPair::empty(d); cfg.layers];
    let mut dy = d_hidden.clone();
    for (l, block) in cache.blocks.iter().enumerate().rev() {
        let w = &backbone.layers[l];
        let n = dy.rows();
        // normalization
        let mut du = Mat::zeros(n, d);
        for i in 0..n {
            let g = dy.row(i);
            let y = block.normed.row(i);
            let mg = g.iter().sum::<f64>() / d as f64;
            let mgy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let s = block.inv_std[i];
            for ((o, &gi), &yi) in du.row_mut(i).iter_mut().zip(g).zip(y) {
                *o = s * (gi - mg - yi * mgy);
            }
        }
        // feed-forward with residual
        let mut dact = Mat::zeros(n, cfg.ffn_hidden);
        matmul_nt_into(&du, &w.w2, &mut dact);
        for ((g, &pre), _) in dact
            .as_mut_slice()
            .iter_mut()
            .zip(block.ffn_pre.as_slice())
            .zip(block.ffn_act.as_slice())
        {
            *g *= gelu_grad(pre);
        }
        let mut dr = Mat::zeros(n, d);
        matmul_nt_into(&dact, &w.w1, &mut dr);
        for (o, g) in dr.as_mut_slice().iter_mut().zip(du.as_slice()) {
            *o += g;
        }
        // attention with residual
        let mut dheads = Mat::zeros(n, d);
        matmul_nt_into(&dr, &w.wo, &mut dheads);
        let grads = attention_heads_backward(w, cfg.heads, &block.attn, &dheads);
        if grads.prefix_keys.rows() > 0 {
            layers[l] = PrefixPair {
                keys: grads.prefix_keys,
                values: grads.prefix_values,
            };
        }
        let mut dx = grads.input;
        for (o, g) in dx.as_mut_slice().iter_mut().zip(dr.as_slice()) {
            *o += g;
        }
        dy = dx;
    }
    PrefixGrads { layers }
}

/// Concatenation of the hidden rows at the two entity positions.
pub fn relation_feature(hidden: &Mat, e1_pos: usize, e2_pos: usize) -> Result<Vec<f64>> {
    let n = hidden.rows();
    if e1_pos >= n || e2_pos >= n {
        return Err(Error::Input(format!(
            "entity positions ({e1_pos}, {e2_pos}) outside sequence of {n}"
        )));
    }
    let mut f = Vec::with_capacity(2 * hidden.cols());
    f.extend_from_slice(hidden.row(e1_pos));
    f.extend_from_slice(hidden.row(e2_pos));
    Ok(f)
}

/// Mean of the hidden rows.
pub fn mean_pool(hidden: &Mat) -> Vec<f64> {
    let n = hidden.rows() as f64;
    let mut q = vec![0.0; hidden.cols()];
    for i in 0..hidden.rows() {
        for (a, b) in q.iter_mut().zip(hidden.row(i)) {
            *a += b / n;
        }
    }
    q
}

/// Query feature `q(x)`: mean-pooled unprompted hidden states.
pub fn query_feature(tokens: &[u32], backbone: &FrozenBackbone) -> Result<Vec<f64>> {
    Ok(mean_pool(&encode(tokens, None, backbone)?))
}

/// One unprompted pass, shared by prompt selection (`query`) and the
/// unprompted voter (`feature`).
#[derive(Clone, Debug, PartialEq)]
pub struct UnpromptedView {
    pub query: Vec<f64>,
    pub feature: Vec<f64>,
}

impl UnpromptedView {
    pub fn compute(tokens: &[u32], e1_pos: usize, e2_pos: usize, backbone: &FrozenBackbone) -> Result<Self> {
        let hidden = encode(tokens, None, backbone)?;
        Ok(UnpromptedView {
            query: mean_pool(&hidden),
            feature: relation_feature(&hidden, e1_pos, e2_pos)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{dot, Rng};

    fn small() -> FrozenBackbone {
        FrozenBackbone::new(EncoderConfig::new(8, 2, 2, 6, 20), 4).unwrap()
    }

    fn random_bundle(bb: &FrozenBackbone, rows: usize, rng: &mut Rng) -> PrefixBundle {
        let d = bb.config().d_model;
        PrefixBundle {
            layers: (0..bb.config().layers)
                .map(|_| {
                    PrefixPair::new(
                        Mat::from_fn(rows, d, |_, _| rng.normal()),
                        Mat::from_fn(rows, d, |_, _| rng.normal()),
                    )
                    .unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let bb = small();
        let b = random_bundle(&bb, 2, &mut Rng::new(1));
        let t = [0, 5, 7, 1, 9];
        assert_eq!(encode(&t, Some(&b), &bb).unwrap(), encode(&t, Some(&b), &bb).unwrap());
    }

    #[test]
    fn unknown_token_rejected() {
        let bb = small();
        assert!(matches!(encode(&[0, 20], None, &bb), Err(Error::Input(_))));
        assert!(matches!(encode(&[0; 7], None, &bb), Err(Error::Input(_))));
    }

    #[test]
    fn empty_bundle_equals_plain_backbone() {
        let bb = small();
        let t = [3, 4, 0, 1];
        let empty = PrefixBundle::empty(2, 8);
        assert_eq!(encode(&t, Some(&empty), &bb).unwrap(), encode(&t, None, &bb).unwrap());
    }

    #[test]
    fn prefixes_skip_non_injected_layers() {
        let mut cfg = EncoderConfig::new(8, 2, 2, 6, 20);
        cfg.prefix_layers = vec![1];
        let bb = FrozenBackbone::new(cfg, 4).unwrap();
        let mut rng = Rng::new(2);
        let mut b = random_bundle(&bb, 2, &mut rng);
        let t = [2, 0, 6, 1];
        let before = encode(&t, Some(&b), &bb).unwrap();
        b.layers[0].keys.as_mut_slice()[0] += 10.0;
        assert_eq!(before, encode(&t, Some(&b), &bb).unwrap());
        b.layers[1].keys.as_mut_slice()[0] += 10.0;
        assert_ne!(before, encode(&t, Some(&b), &bb).unwrap());
    }

    // One-layer, one-head encoder evaluated by hand on two tokens.
    #[test]
    fn hand_computed_two_token_forward() {
        let mut cfg = EncoderConfig::new(2, 1, 1, 2, 4);
        cfg.ffn_hidden = 1;
        let mut bb = FrozenBackbone::new(cfg, 0).unwrap();
        bb.token_embedding = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0; 2], vec![0.0; 2]]).unwrap();
        bb.position_embedding = Mat::zeros(2, 2);
        let l = &mut bb.layers[0];
        l.wq = Mat::identity(2);
        l.wk = Mat::identity(2);
        l.wv = Mat::identity(2);
        l.wo = Mat::identity(2);
        l.w1 = Mat::zeros(2, 1);
        l.w2 = Mat::zeros(1, 2);
        let h = encode(&[0, 1], None, &bb).unwrap();
        // scores: x0·x0/√2 = 1/√2, x0·x1 = 0 → a = σ(1/√2)
        let a = 1.0 / (1.0 + (-(0.5f64).sqrt()).exp());
        // row 0 before norm: x0 + a·x0 + (1−a)·x1 = (1 + a, 1 − a)
        let (u0, u1) = (1.0 + a, 1.0 - a);
        let mean = (u0 + u1) / 2.0;
        let var = ((u0 - mean).powi(2) + (u1 - mean).powi(2)) / 2.0;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        assert!((h[(0, 0)] - (u0 - mean) * s).abs() < 1e-12);
        assert!((h[(0, 1)] - (u1 - mean) * s).abs() < 1e-12);
        // symmetric for row 1
        assert!((h[(1, 0)] - h[(0, 1)]).abs() < 1e-12);
    }

    #[test]
    fn relation_feature_examples() {
        let h = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(relation_feature(&h, 0, 1).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(relation_feature(&h, 1, 1).unwrap(), vec![3.0, 4.0, 3.0, 4.0]);
        assert!(relation_feature(&h, 0, 2).is_err());
    }

    // With one layer and no positional signal, permuting context tokens only
    // permutes the attention keys; recomputing directly gives the same feature.
    #[test]
    fn context_permutation_is_recomputed_consistently() {
        let mut cfg = EncoderConfig::new(8, 2, 1, 6, 20);
        cfg.prefix_layers = vec![0];
        let mut bb = FrozenBackbone::new(cfg, 8).unwrap();
        bb.position_embedding = Mat::zeros(6, 8);
        let a = [0, 1, 5, 6, 7, 9];
        let b = [0, 1, 9, 7, 6, 5];
        let fa = relation_feature(&encode(&a, None, &bb).unwrap(), 0, 1).unwrap();
        let fb = relation_feature(&encode(&b, None, &bb).unwrap(), 0, 1).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn query_of_single_token_is_its_hidden_row() {
        let bb = small();
        let h = encode(&[7], None, &bb).unwrap();
        assert_eq!(query_feature(&[7], &bb).unwrap(), h.row(0).to_vec());
        assert_eq!(query_feature(&[3, 4, 5], &bb).unwrap(), query_feature(&[3, 4, 5], &bb).unwrap());
    }

    #[test]
    fn unprompted_view_is_one_pass() {
        let bb = small();
        let before = bb.unprompted_passes();
        let v = UnpromptedView::compute(&[0, 4, 1, 6], 0, 2, &bb).unwrap();
        assert_eq!(bb.unprompted_passes(), before + 1);
        assert_eq!(v.query, query_feature(&[0, 4, 1, 6], &bb).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let bb = small();
        let mut rng = Rng::new(21);
        let bundle = random_bundle(&bb, 3, &mut rng);
        let tokens = [0, 6, 3, 1, 11];
        let probe = Mat::from_fn(5, 8, |_, _| rng.normal());
        let f = |b: &PrefixBundle| dot(encode(&tokens, Some(b), &bb).unwrap().as_slice(), probe.as_slice());
        let (_, cache) = encode_cached(&tokens, Some(&bundle), &bb).unwrap();
        let g = backward(&bb, &cache, &probe);
        let h = 1e-5;
        for l in 0..2 {
            for idx in [0, 5, 13, 23] {
                for which in 0..2 {
                    let mut p = bundle.clone();
                    let mut m = bundle.clone();
                    let (pp, mm, an) = if which == 0 {
                        (&mut p.layers[l].keys, &mut m.layers[l].keys, g.layers[l].keys.as_slice()[idx])
                    } else {
                        (&mut p.layers[l].values, &mut m.layers[l].values, g.layers[l].values.as_slice()[idx])
                    };
                    pp.as_mut_slice()[idx] += h;
                    mm.as_mut_slice()[idx] -= h;
                    let fd = (f(&p) - f(&m)) / (2.0 * h);
                    assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "layer {l} idx {idx}: {fd} vs {an}");
                }
            }
        }
    }
}
