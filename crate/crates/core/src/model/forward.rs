//! Forward pass with activation caching and the matching reverse pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::layout::TrainScope;
use super::TinyLm;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub(crate) struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    tq: Array2<f64>,
    tv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn_masks: Vec<Option<Array2<f64>>>,
    o: Array2<f64>,
    proj_mask: Option<Array2<f64>>,
    ln2: LnCache,
    a2: Array2<f64>,
    u: Array2<f64>,
    z: Array2<f64>,
    mlp_mask: Option<Array2<f64>>,
}

pub(crate) struct Cache {
    pub(crate) ids: Vec<u32>,
    emb_mask: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    pub(crate) hidden: Array2<f64>,
    pub(crate) logits: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut rstd = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            xhat[[i, j]] = (row[j] - mean) * r;
        }
    }
    let y = &xhat * &g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns dx and accumulates dg/db when requested.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    param_grads: Option<(&mut [f64], &mut [f64])>,
) -> Array2<f64> {
    let (t, d) = dy.dim();
    if let Some((dg, db)) = param_grads {
        for i in 0..t {
            for j in 0..d {
                dg[j] += dy[[i, j]] * cache.xhat[[i, j]];
                db[j] += dy[[i, j]];
            }
        }
    }
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * cache.xhat[[i, j]];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            dx[[i, j]] = cache.rstd[i] * (dxh - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_K * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Inverted dropout mask (entries 0 or 1/(1-p)).
fn dropout_mask<R: Rng>(rng: &mut Option<&mut R>, shape: (usize, usize), p: f64) -> Option<Array2<f64>> {
    let rng = rng.as_mut()?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

/// y = x W^T + b
fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += &b;
    y
}

/// dW += dy^T x
fn acc_weight_grad(grads: &mut [f64], model: &TinyLm, id: usize, dy: &Array2<f64>, x: &Array2<f64>) {
    let mut g = model.layout.mat_mut(grads, id);
    general_mat_mul(1.0, &dy.t(), x, 1.0, &mut g);
}

fn acc_bias_grad(grads: &mut [f64], model: &TinyLm, id: usize, dy: &Array2<f64>) {
    let range = model.layout.spec(id).range();
    for (g, s) in grads[range].iter_mut().zip(dy.sum_axis(Axis(0)).iter()) {
        *g += s;
    }
}

fn split_pair<'a>(grads: &'a mut [f64], model: &TinyLm, a: usize, b: usize) -> (&'a mut [f64], &'a mut [f64]) {
    let ra = model.layout.spec(a).range();
    let rb = model.layout.spec(b).range();
    debug_assert_eq!(ra.end, rb.start);
    let (left, right) = grads.split_at_mut(rb.start);
    (&mut left[ra], &mut right[..rb.end - rb.start])
}

impl TinyLm {
    /// Runs the network over `ids` (already validated). Dropout is active
    /// only when an RNG is supplied.
    pub(crate) fn forward_cached<R: Rng>(&self, ids: &[u32], mut rng: Option<&mut R>) -> Cache {
        let cfg = &self.config;
        let lay = &self.layout;
        let p = &self.params;
        let t = ids.len();
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let drop = cfg.dropout;

        let wte = lay.mat(p, lay.wte);
        let wpe = lay.mat(p, lay.wpe);
        let mut h = Array2::zeros((t, d));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = h.row_mut(i);
            row += &wte.row(id as usize);
            row += &wpe.row(i);
        }
        let emb_mask = dropout_mask(&mut rng, (t, d), drop);
        apply_mask(&mut h, &emb_mask);

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for ids_b in &lay.blocks {
            let (a, ln1) = layer_norm(&h, lay.vec(p, ids_b.ln1_g), lay.vec(p, ids_b.ln1_b));
            let tq = a.dot(&lay.mat(p, ids_b.lora_q_a).t());
            let tv = a.dot(&lay.mat(p, ids_b.lora_v_a).t());
            let mut q = linear(&a, lay.mat(p, ids_b.wq), lay.vec(p, ids_b.bq));
            q += &tq.dot(&lay.mat(p, ids_b.lora_q_b).t());
            let k = linear(&a, lay.mat(p, ids_b.wk), lay.vec(p, ids_b.bk));
            let mut v = linear(&a, lay.mat(p, ids_b.wv), lay.vec(p, ids_b.bv));
            v += &tv.dot(&lay.mat(p, ids_b.lora_v_b).t());

            let mut o = Array2::zeros((t, d));
            let mut probs = Vec::with_capacity(heads);
            let mut attn_masks = Vec::with_capacity(heads);
            for hh in 0..heads {
                let cols = s![.., hh * dh..(hh + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut sc = qh.dot(&kh.t());
                for i in 0..t {
                    let mut row = sc.row_mut(i);
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..=i {
                        row[j] *= scale;
                        m = m.max(row[j]);
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        row[j] = (row[j] - m).exp();
                        z += row[j];
                    }
                    for j in 0..=i {
                        row[j] /= z;
                    }
                    for j in i + 1..t {
                        row[j] = 0.0;
                    }
                }
                let mask = dropout_mask(&mut rng, (t, t), drop);
                let oh = match &mask {
                    Some(m) => (&sc * m).dot(&vh),
                    None => sc.dot(&vh),
                };
                o.slice_mut(cols).assign(&oh);
                probs.push(sc);
                attn_masks.push(mask);
            }
            let mut proj = linear(&o, lay.mat(p, ids_b.wo), lay.vec(p, ids_b.bo));
            let proj_mask = dropout_mask(&mut rng, (t, d), drop);
            apply_mask(&mut proj, &proj_mask);
            h += &proj;

            let (a2, ln2) = layer_norm(&h, lay.vec(p, ids_b.ln2_g), lay.vec(p, ids_b.ln2_b));
            let u = linear(&a2, lay.mat(p, ids_b.w1), lay.vec(p, ids_b.b1));
            let z = u.mapv(gelu);
            let mut m = linear(&z, lay.mat(p, ids_b.w2), lay.vec(p, ids_b.b2));
            let mlp_mask = dropout_mask(&mut rng, (t, d), drop);
            apply_mask(&mut m, &mlp_mask);
            h += &m;

            blocks.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                tq,
                tv,
                probs,
                attn_masks,
                o,
                proj_mask,
                ln2,
                a2,
                u,
                z,
                mlp_mask,
            });
        }
        let (hidden, lnf) = layer_norm(&h, lay.vec(p, lay.lnf_g), lay.vec(p, lay.lnf_b));
        let logits = hidden.dot(&lay.mat(p, lay.head).t());
        Cache {
            ids: ids.to_vec(),
            emb_mask,
            blocks,
            lnf,
            hidden,
            logits,
        }
    }

    /// Back-propagates `dlogits` and returns the full-size gradient buffer;
    /// only tensors trainable under the model's scope are filled.
    pub(crate) fn backward(&self, cache: &Cache, dlogits: &Array2<f64>) -> Vec<f64> {
        let cfg = &self.config;
        let lay = &self.layout;
        let p = &self.params;
        let scope = cfg.scope;
        let full = scope == TrainScope::Full;
        let t = cache.ids.len();
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = vec![0.0; lay.total];

        if full {
            acc_weight_grad(&mut grads, self, lay.head, dlogits, &cache.hidden);
        }
        let dhidden = dlogits.dot(&lay.mat(p, lay.head));
        let mut dh_res = {
            let pg = full.then(|| split_pair(&mut grads, self, lay.lnf_g, lay.lnf_b));
            layer_norm_backward(&dhidden, &cache.lnf, lay.vec(p, lay.lnf_g), pg)
        };

        for (l, (ids_b, bc)) in lay.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            // MLP branch.
            let mut dm = dh_res.clone();
            apply_mask(&mut dm, &bc.mlp_mask);
            if full {
                acc_weight_grad(&mut grads, self, ids_b.w2, &dm, &bc.z);
                acc_bias_grad(&mut grads, self, ids_b.b2, &dm);
            }
            let mut du = dm.dot(&lay.mat(p, ids_b.w2));
            du.zip_mut_with(&bc.u, |g, &u| *g *= gelu_grad(u));
            if full {
                acc_weight_grad(&mut grads, self, ids_b.w1, &du, &bc.a2);
                acc_bias_grad(&mut grads, self, ids_b.b1, &du);
            }
            let da2 = du.dot(&lay.mat(p, ids_b.w1));
            {
                let pg = full.then(|| split_pair(&mut grads, self, ids_b.ln2_g, ids_b.ln2_b));
                dh_res += &layer_norm_backward(&da2, &bc.ln2, lay.vec(p, ids_b.ln2_g), pg);
            }

            // Attention branch.
            let mut dproj = dh_res.clone();
            apply_mask(&mut dproj, &bc.proj_mask);
            if full {
                acc_weight_grad(&mut grads, self, ids_b.wo, &dproj, &bc.o);
                acc_bias_grad(&mut grads, self, ids_b.bo, &dproj);
            }
            let d_o = dproj.dot(&lay.mat(p, ids_b.wo));
            let mut dq = Array2::zeros((t, d));
            let mut dk = Array2::zeros((t, d));
            let mut dv = Array2::zeros((t, d));
            for hh in 0..heads {
                let cols = s![.., hh * dh..(hh + 1) * dh];
                let doh = d_o.slice(cols);
                let probs = &bc.probs[hh];
                let dropped;
                let p_eff = match &bc.attn_masks[hh] {
                    Some(m) => {
                        dropped = probs * m;
                        &dropped
                    }
                    None => probs,
                };
                dv.slice_mut(cols).assign(&p_eff.t().dot(&doh));
                let mut dp = doh.dot(&bc.v.slice(cols).t());
                if let Some(m) = &bc.attn_masks[hh] {
                    dp *= m;
                }
                // Softmax backward on the causal rows.
                let mut ds = Array2::zeros((t, t));
                for i in 0..t {
                    let dot: f64 = (0..=i).map(|j| dp[[i, j]] * probs[[i, j]]).sum();
                    for j in 0..=i {
                        ds[[i, j]] = probs[[i, j]] * (dp[[i, j]] - dot) * scale;
                    }
                }
                dq.slice_mut(cols).assign(&ds.dot(&bc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&bc.q.slice(cols)));
            }

            let needs_input_grad = full || l > 0;
            let mut da = Array2::zeros((t, d));
            // q and v carry the adapters; k does not.
            for (dy, w, b, la, lb, tcache) in [
                (&dq, ids_b.wq, ids_b.bq, ids_b.lora_q_a, ids_b.lora_q_b, &bc.tq),
                (&dv, ids_b.wv, ids_b.bv, ids_b.lora_v_a, ids_b.lora_v_b, &bc.tv),
            ] {
                if full {
                    acc_weight_grad(&mut grads, self, w, dy, &bc.a);
                    acc_bias_grad(&mut grads, self, b, dy);
                }
                let dt = dy.dot(&lay.mat(p, lb));
                if scope == TrainScope::Lora {
                    acc_weight_grad(&mut grads, self, lb, dy, tcache);
                    acc_weight_grad(&mut grads, self, la, &dt, &bc.a);
                }
                if needs_input_grad {
                    general_mat_mul(1.0, dy, &lay.mat(p, w), 1.0, &mut da);
                    general_mat_mul(1.0, &dt, &lay.mat(p, la), 1.0, &mut da);
                }
            }
            if !needs_input_grad {
                break;
            }
            if full {
                acc_weight_grad(&mut grads, self, ids_b.wk, &dk, &bc.a);
                acc_bias_grad(&mut grads, self, ids_b.bk, &dk);
            }
            general_mat_mul(1.0, &dk, &lay.mat(p, ids_b.wk), 1.0, &mut da);
            {
                let pg = full.then(|| split_pair(&mut grads, self, ids_b.ln1_g, ids_b.ln1_b));
                dh_res += &layer_norm_backward(&da, &bc.ln1, lay.vec(p, ids_b.ln1_g), pg);
            }
        }

        if full {
            let mut dx = dh_res;
            apply_mask(&mut dx, &cache.emb_mask);
            let wte = lay.spec(lay.wte).clone();
            let wpe = lay.spec(lay.wpe).clone();
            for (i, &id) in cache.ids.iter().enumerate() {
                let row = dx.row(i);
                let te = wte.offset + id as usize * d;
                let pe = wpe.offset + i * d;
                for j in 0..d {
                    grads[te + j] += row[j];
                    grads[pe + j] += row[j];
                }
            }
        }
        grads
    }
}
