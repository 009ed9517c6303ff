//! Multi-head self-attention with optional prefix rows, and the explicit
//! mixture-of-experts form of a prefixed attention head.

use serde::{Deserialize, Serialize};

use super::backbone::{FrozenBackbone, LayerWeights};
use crate::error::{Error, Result};
use crate::numkit::{dot, matmul_into, matmul_nt_into, softmax, softmax_in_place, Mat};

/// Prefix key and value rows for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixPair {
    pub keys: Mat,
    pub values: Mat,
}

impl PrefixPair {
    pub fn empty(d: usize) -> Self {
        PrefixPair {
            keys: Mat::zeros(0, d),
            values: Mat::zeros(0, d),
        }
    }

    pub fn new(keys: Mat, values: Mat) -> Result<Self> {
        if keys.dims() != values.dims() {
            return Err(Error::dim(format!(
                "prefix keys {:?} vs values {:?}",
                keys.dims(),
                values.dims()
            )));
        }
        Ok(PrefixPair { keys, values })
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Prefix rows for every layer of the encoder; layers that receive no
/// prompt hold empty pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixBundle {
    pub layers: Vec<PrefixPair>,
}

impl PrefixBundle {
    pub fn empty(n_layers: usize, d: usize) -> Self {
        PrefixBundle {
            layers: vec![PrefixPair::empty(d); n_layers],
        }
    }

    pub fn rows(&self, layer: usize) -> usize {
        self.layers.get(layer).map_or(0, PrefixPair::len)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(PrefixPair::is_empty)
    }
}

/// Everything the backward pass of one attention layer needs.
pub(crate) struct AttentionCache {
    input: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Attention weights per head, `N × (P + N)`.
    weights: Vec<Mat>,
    prefix_rows: usize,
}

pub(crate) struct AttentionGrads {
    pub input: Mat,
    pub prefix_keys: Mat,
    pub prefix_values: Mat,
}

fn check_prefix(x: &Mat, prefix: &PrefixPair, d: usize) -> Result<()> {
    if x.cols() != d {
        return Err(Error::dim(format!("input width {} vs model width {d}", x.cols())));
    }
    if prefix.keys.dims() != prefix.values.dims() {
        return Err(Error::dim("prefix key/value row counts differ"));
    }
    if !prefix.is_empty() && prefix.keys.cols() != d {
        return Err(Error::dim(format!(
            "prefix width {} vs model width {d}",
            prefix.keys.cols()
        )));
    }
    Ok(())
}

/// Per-head outputs `h̃_1 … h̃_m` (before `W^O`) and the cache for backward.
pub(crate) fn attention_heads(
    w: &LayerWeights,
    heads: usize,
    x: &Mat,
    prefix: &PrefixPair,
) -> (Mat, AttentionCache) {
    let n = x.rows();
    let d = x.cols();
    let p = prefix.len();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut q = Mat::zeros(n, d);
    matmul_into(x, &w.wq, &mut q);
    let keys_in = if p == 0 { x.clone() } else { Mat::vstack(&prefix.keys, x).expect("checked widths") };
    let values_in = if p == 0 { x.clone() } else { Mat::vstack(&prefix.values, x).expect("checked widths") };
    let mut k = Mat::zeros(p + n, d);
    matmul_into(&keys_in, &w.wk, &mut k);
    let mut v = Mat::zeros(p + n, d);
    matmul_into(&values_in, &w.wv, &mut v);

    let mut out = Mat::zeros(n, d);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let mut a = Mat::zeros(n, p + n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let row = a.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                *s = scale * dot(qi, &k.row(j)[cols.clone()]);
            }
            softmax_in_place(row);
        }
        for i in 0..n {
            let ai = a.row(i).to_vec();
            let orow = &mut out.row_mut(i)[cols.clone()];
            for (j, &aij) in ai.iter().enumerate() {
                let vj = &v.row(j)[cols.clone()];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += aij * vv;
                }
            }
        }
        weights.push(a);
    }
    let cache = AttentionCache {
        input: x.clone(),
        q,
        k,
        v,
        weights,
        prefix_rows: p,
    };
    (out, cache)
}

/// Backward through [`attention_heads`]: `d_heads` is the gradient of the
/// concatenated head outputs (`N × d`).
pub(crate) fn attention_heads_backward(w: &LayerWeights, heads: usize, cache: &AttentionCache, d_heads: &Mat) -> AttentionGrads {
    let n = cache.input.rows();
    let d = cache.input.cols();
    let p = cache.prefix_rows;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut dq = Mat::zeros(n, d);
    let mut dk_all = Mat::zeros(p + n, d);
    let mut dv_all = Mat::zeros(p + n, d);
    let mut da = vec![0.0; p + n];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let a = &cache.weights[h];
        for i in 0..n {
            let dhi = &d_heads.row(i)[cols.clone()];
            let ai = a.row(i);
            // dA = dH · Vᵀ ; dV += Aᵀ · dH
            for j in 0..p + n {
                da[j] = dot(dhi, &cache.v.row(j)[cols.clone()]);
                let dvj = &mut dv_all.row_mut(j)[cols.clone()];
                for (g, &x) in dvj.iter_mut().zip(dhi) {
                    *g += ai[j] * x;
                }
            }
            let inner: f64 = ai.iter().zip(&da).map(|(x, y)| x * y).sum();
            for j in 0..p + n {
                let ds = ai[j] * (da[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &cache.k.row(j)[cols.clone()];
                let dqi = &mut dq.row_mut(i)[cols.clone()];
                for (g, &x) in dqi.iter_mut().zip(kj) {
                    *g += ds * x;
                }
                let qi = &cache.q.row(i)[cols.clone()];
                let dkj = &mut dk_all.row_mut(j)[cols.clone()];
                for (g, &x) in dkj.iter_mut().zip(qi) {
                    *g += ds * x;
                }
            }
        }
    }

    let mut input = Mat::zeros(n, d);
    matmul_nt_into(&dq, &w.wq, &mut input);
    let mut tmp = Mat::zeros(p + n, d);
    matmul_nt_into(&dk_all, &w.wk, &mut tmp);
    let mut prefix_keys = Mat::zeros(p, d);
    for j in 0..p {
        prefix_keys.row_mut(j).copy_from_slice(tmp.row(j));
    }
    for i in 0..n {
        for (g, x) in input.row_mut(i).iter_mut().zip(tmp.row(p + i)) {
            *g += x;
        }
    }
    matmul_nt_into(&dv_all, &w.wv, &mut tmp);
    let mut prefix_values = Mat::zeros(p, d);
    for j in 0..p {
        prefix_values.row_mut(j).copy_from_slice(tmp.row(j));
    }
    for i in 0..n {
        for (g, x) in input.row_mut(i).iter_mut().zip(tmp.row(p + i)) {
            *g += x;
        }
    }
    AttentionGrads {
        input,
        prefix_keys,
        prefix_values,
    }
}

/// `Concat(h_1 … h_m) · W^O` for one layer of the backbone.
pub fn msa_forward(x: &Mat, backbone: &FrozenBackbone, layer: usize) -> Result<Mat> {
    prefix_attention(x, &PrefixPair::empty(backbone.config().d_model), backbone, layer)
}

/// Multi-head attention whose keys and values are `[P^K; X]` and `[P^V; X]`.
/// Queries come from `X` alone, so the output keeps `X`'s row count.
pub fn prefix_attention(x: &Mat, prefix: &PrefixPair, backbone: &FrozenBackbone, layer: usize) -> Result<Mat> {
    let heads = prefix_attention_heads(x, prefix, backbone, layer)?;
    let w = backbone.layer(layer)?;
    let mut out = Mat::zeros(x.rows(), x.cols());
    matmul_into(&heads, &w.wo, &mut out);
    Ok(out)
}

/// Concatenated head outputs of [`prefix_attention`] before `W^O`; head
/// `i` occupies columns `[i·d_v, (i+1)·d_v)`.
pub fn prefix_attention_heads(x: &Mat, prefix: &PrefixPair, backbone: &FrozenBackbone, layer: usize) -> Result<Mat> {
    let cfg = backbone.config();
    check_prefix(x, prefix, cfg.d_model)?;
    if x.rows() > cfg.max_seq {
        return Err(Error::dim(format!("{} tokens exceed max_seq {}", x.rows(), cfg.max_seq)));
    }
    let w = backbone.layer(layer)?;
    Ok(attention_heads(w, cfg.heads, x, prefix).0)
}

/// One attention head computed as a mixture of experts.
///
/// Token `j` contributes the expert `f_j(X) = W^Vᵀ x_j` and prefix row `j'`
/// the expert `f_{N+j'} = W^Vᵀ p^V_{j'}`. Output row `i` mixes all `N + L`
/// experts with softmax gates over the scores
/// `s_{i,j} = x_iᵀ W^Q W^Kᵀ x_j / √d_v` and
/// `s_{i,N+j'} = x_iᵀ W^Q W^Kᵀ p^K_{j'} / √d_v`.
pub fn moe_oracle(x: &Mat, prefix: &PrefixPair, backbone: &FrozenBackbone, layer: usize, head: usize) -> Result<Mat> {
    let gates = moe_gates(x, prefix, backbone, layer, head)?;
    let cfg = backbone.config();
    let dv = cfg.head_dim();
    let w = backbone.layer(layer)?;
    let wv = FrozenBackbone::head_block(&w.wv, head, dv);
    let n = x.rows();

    let expert = |input: &[f64]| -> Vec<f64> { (0..dv).map(|c| (0..input.len()).map(|r| wv[(r, c)] * input[r]).sum()).collect() };
    let pretrained: Vec<Vec<f64>> = (0..n).map(|j| expert(x.row(j))).collect();
    let prefix_experts: Vec<Vec<f64>> = (0..prefix.len()).map(|j| expert(prefix.values.row(j))).collect();

    let mut out = Mat::zeros(n, dv);
    for i in 0..n {
        let g = gates.row(i);
        let row = out.row_mut(i);
        for (j, f) in pretrained.iter().enumerate() {
            for (o, v) in row.iter_mut().zip(f) {
                *o += g[j] * v;
            }
        }
        for (jp, f) in prefix_experts.iter().enumerate() {
            for (o, v) in row.iter_mut().zip(f) {
                *o += g[n + jp] * v;
            }
        }
    }
    Ok(out)
}

/// Gate weights of [`moe_oracle`]: row `i` holds the `N` pre-trained expert
/// gates followed by the `L` prefix expert gates.
pub fn moe_gates(x: &Mat, prefix: &PrefixPair, backbone: &FrozenBackbone, layer: usize, head: usize) -> Result<Mat> {
    let cfg = backbone.config();
    check_prefix(x, prefix, cfg.d_model)?;
    if head >= cfg.heads {
        return Err(Error::Parameter(format!("head {head} of {}", cfg.heads)));
    }
    let w = backbone.layer(layer)?;
    let dv = cfg.head_dim();
    let wq = FrozenBackbone::head_block(&w.wq, head, dv);
    let wk = FrozenBackbone::head_block(&w.wk, head, dv);
    // bilinear form W^Q W^Kᵀ shared by every score function of this head
    let bilinear = wq.matmul(&wk.transpose())?;
    let n = x.rows();
    let l = prefix.len();
    let inv = 1.0 / (dv as f64).sqrt();
    let score = |xi: &[f64], y: &[f64]| -> f64 {
        let mut s = 0.0;
        for (a, &xa) in xi.iter().enumerate() {
            s += xa * dot(bilinear.row(a), y);
        }
        s * inv
    };
    let mut gates = Mat::zeros(n, n + l);
    for i in 0..n {
        let xi = x.row(i);
        let mut s: Vec<f64> = (0..n).map(|j| score(xi, x.row(j))).collect();
        s.extend((0..l).map(|j| score(xi, prefix.keys.row(j))));
        gates.row_mut(i).copy_from_slice(&softmax(&s)?);
    }
    Ok(gates)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::numkit::Rng;

    fn backbone(d: usize, heads: usize, seed: u64) -> FrozenBackbone {
        FrozenBackbone::new(EncoderConfig::new(d, heads, 2, 8, 16), seed).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.normal())
    }

    /// Straight-line MSA written from the textbook definition.
    fn reference_msa(x: &Mat, w: &LayerWeights, heads: usize) -> Mat {
        let d = x.cols();
        let dk = d / heads;
        let mut concat = Mat::zeros(x.rows(), d);
        for h in 0..heads {
            let wq = FrozenBackbone::head_block(&w.wq, h, dk);
            let wk = FrozenBackbone::head_block(&w.wk, h, dk);
            let wv = FrozenBackbone::head_block(&w.wv, h, dk);
            let q = x.matmul(&wq).unwrap();
            let k = x.matmul(&wk).unwrap();
            let v = x.matmul(&wv).unwrap();
            let mut s = q.matmul(&k.transpose()).unwrap();
            for i in 0..s.rows() {
                let row: Vec<f64> = s.row(i).iter().map(|v| v / (dk as f64).sqrt()).collect();
                s.row_mut(i).copy_from_slice(&softmax(&row).unwrap());
            }
            let o = s.matmul(&v).unwrap();
            for i in 0..x.rows() {
                concat.row_mut(i)[h * dk..(h + 1) * dk].copy_from_slice(o.row(i));
            }
        }
        concat.matmul(&w.wo).unwrap()
    }

    #[test]
    fn single_token_identity_value_path_returns_input() {
        let cfg = EncoderConfig::new(3, 1, 1, 4, 8);
        let mut bb = FrozenBackbone::new(cfg, 0).unwrap();
        bb.layers[0].wq = Mat::zeros(3, 3);
        bb.layers[0].wk = Mat::zeros(3, 3);
        bb.layers[0].wv = Mat::identity(3);
        bb.layers[0].wo = Mat::identity(3);
        let x = Mat::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        assert_eq!(msa_forward(&x, &bb, 0).unwrap(), x);
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let bb = backbone(8, 2, 1);
        let row = vec![0.1, -0.3, 0.8, 0.0, 1.2, -0.7, 0.4, 0.2];
        let x = Mat::from_rows(&[row.clone(), row]).unwrap();
        let y = msa_forward(&x, &bb, 0).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn matches_reference_msa() {
        let bb = backbone(8, 2, 11);
        let mut rng = Rng::new(5);
        let x = random(4, 8, &mut rng);
        for layer in 0..2 {
            let ours = msa_forward(&x, &bb, layer).unwrap();
            let theirs = reference_msa(&x, bb.layer(layer).unwrap(), 2);
            assert!(ours.max_abs_diff(&theirs) < 1e-12);
        }
    }

    #[test]
    fn empty_prefix_reduces_exactly() {
        let bb = backbone(8, 4, 2);
        let x = random(5, 8, &mut Rng::new(1));
        let a = msa_forward(&x, &bb, 1).unwrap();
        let b = prefix_attention(&x, &PrefixPair::empty(8), &bb, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn suppressed_prefixes_leave_output_unchanged() {
        // Prefix keys pointing against every query get vanishing weight.
        let cfg = EncoderConfig::new(4, 1, 1, 4, 8);
        let mut bb = FrozenBackbone::new(cfg, 7).unwrap();
        bb.layers[0].wq = Mat::identity(4);
        bb.layers[0].wk = Mat::identity(4);
        let x = Mat::from_rows(&[vec![1.0, 0.2, 0.0, 0.1], vec![0.8, -0.1, 0.3, 0.0], vec![1.1, 0.0, -0.2, 0.2]]).unwrap();
        let keys = Mat::from_rows(&[vec![-1e3, 0.0, 0.0, 0.0], vec![-2e3, 0.0, 0.0, 0.0]]).unwrap();
        let values = Mat::from_rows(&[x.row(0).to_vec(), x.row(1).to_vec()]).unwrap();
        let prefix = PrefixPair::new(keys, values).unwrap();
        let a = msa_forward(&x, &bb, 0).unwrap();
        let b = prefix_attention(&x, &prefix, &bb, 0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn moe_matches_prefix_attention_heads() {
        let bb = backbone(8, 2, 3);
        let mut rng = Rng::new(17);
        let x = random(6, 8, &mut rng);
        let prefix = PrefixPair::new(random(3, 8, &mut rng), random(3, 8, &mut rng)).unwrap();
        let heads = prefix_attention_heads(&x, &prefix, &bb, 0).unwrap();
        for h in 0..2 {
            let oracle = moe_oracle(&x, &prefix, &bb, 0, h).unwrap();
            for i in 0..6 {
                for c in 0..4 {
                    assert!((heads[(i, h * 4 + c)] - oracle[(i, c)]).abs() < 1e-10);
                }
            }
            let gates = moe_gates(&x, &prefix, &bb, 0, h).unwrap();
            for i in 0..6 {
                assert!((gates.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moe_single_token_no_prefix_is_value_projection() {
        let bb = backbone(4, 1, 9);
        let x = Mat::from_rows(&[vec![0.3, -0.2, 0.9, 1.0]]).unwrap();
        let out = moe_oracle(&x, &PrefixPair::empty(4), &bb, 0, 0).unwrap();
        let wv = &bb.layer(0).unwrap().wv;
        for c in 0..4 {
            let expect: f64 = (0..4).map(|r| wv[(r, c)] * x[(0, r)]).sum();
            assert!((out[(0, c)] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn prefix_shape_errors() {
        let bb = backbone(8, 2, 3);
        let x = Mat::zeros(2, 8);
        let bad = PrefixPair {
            keys: Mat::zeros(1, 6),
            values: Mat::zeros(1, 6),
        };
        assert!(matches!(prefix_attention(&x, &bad, &bb, 0), Err(Error::Dimension(_))));
        assert!(PrefixPair::new(Mat::zeros(2, 8), Mat::zeros(1, 8)).is_err());
        assert!(matches!(msa_forward(&Mat::zeros(9, 8), &bb, 0), Err(Error::Dimension(_))));
    }
}
