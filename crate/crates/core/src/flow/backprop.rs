//! Hand-derived reverse pass for the training configuration of [`ToyModel`]:
//! one image plus one (padded) prompt, full joint attention, no negative
//! tokens. The forward here mirrors [`ToyModel::velocity_plain`] and keeps the
//! intermediates the backward pass needs.

use crate::error::Result;
use crate::flow::data::Prompt;
use crate::flow::model::{time_features, ToyModel};
use crate::mmdit::{gelu, gelu_grad, BlockParams, StreamParams, LN_EPS};
use crate::tensor::{softmax_rows, Matrix};

struct LnCache {
    xhat: Matrix,
    inv: Vec<f64>,
}

fn ln_forward(x: &Matrix, g: &Matrix, b: &Matrix) -> (Matrix, LnCache) {
    let n = x.cols() as f64;
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv.push(s);
        for c in 0..x.cols() {
            let xh = (row[c] - mean) * s;
            xhat.set(r, c, xh);
            y.set(r, c, xh * g.get(0, c) + b.get(0, c));
        }
    }
    (y, LnCache { xhat, inv })
}

fn ln_backward(dy: &Matrix, cache: &LnCache, g: &Matrix, dg: &mut Matrix, db: &mut Matrix) -> Matrix {
    let n = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), n);
    let mut dxhat = vec![0.0; n];
    for r in 0..dy.rows() {
        let xhat = cache.xhat.row(r);
        let dyr = dy.row(r);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..n {
            dxhat[c] = dyr[c] * g.get(0, c);
            dg.data_mut()[c] += dyr[c] * xhat[c];
            db.data_mut()[c] += dyr[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xhat[c];
        }
        m1 /= n as f64;
        m2 /= n as f64;
        let s = cache.inv[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * (dxhat[c] - m1 - xhat[c] * m2);
        }
    }
    dx
}

fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut y = x.matmul(w)?;
    y.add_row_broadcast(b)?;
    Ok(y)
}

/// `dW += xᵀ dy`, `db += Σ dy`, returns `dy Wᵀ`.
fn linear_backward(x: &Matrix, dy: &Matrix, w: &Matrix, dw: &mut Matrix, db: Option<&mut Matrix>) -> Result<Matrix> {
    dw.add_scaled(&x.t_matmul(dy)?, 1.0)?;
    if let Some(db) = db {
        db.add_scaled(&dy.sum_rows(), 1.0)?;
    }
    dy.matmul_t(w)
}

struct MlpCache {
    ln: LnCache,
    h: Matrix,
    pre: Matrix,
    act: Matrix,
}

fn mlp_forward(x: &Matrix, p: &StreamParams) -> Result<(Matrix, MlpCache)> {
    let (h, ln) = ln_forward(x, &p.ln2_g, &p.ln2_b);
    let pre = linear(&h, &p.w1, &p.b1)?;
    let act = pre.map(gelu);
    let mut out = linear(&act, &p.w2, &p.b2)?;
    out.add_scaled(x, 1.0)?;
    Ok((out, MlpCache { ln, h, pre, act }))
}

fn mlp_backward(dy: &Matrix, c: &MlpCache, p: &StreamParams, g: &mut StreamParams) -> Result<Matrix> {
    let dact = linear_backward(&c.act, dy, &p.w2, &mut g.w2, Some(&mut g.b2))?;
    let dpre = dact.zip_with(&c.pre, "gelu_backward", |d, x| d * gelu_grad(x))?;
    let dh = linear_backward(&c.h, &dpre, &p.w1, &mut g.w1, Some(&mut g.b1))?;
    let mut dx = ln_backward(&dh, &c.ln, &p.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
    dx.add_scaled(dy, 1.0)?;
    Ok(dx)
}

struct BlockCache {
    n_img: usize,
    ln_img: LnCache,
    ln_txt: LnCache,
    h_img: Matrix,
    h_txt: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Vec<Matrix>,
    z: Matrix,
    mlp_img: MlpCache,
    mlp_txt: MlpCache,
}

fn block_forward(x_img: &Matrix, x_txt: &Matrix, p: &BlockParams) -> Result<(Matrix, Matrix, BlockCache)> {
    let n_img = x_img.rows();
    let (h_img, ln_img) = ln_forward(x_img, &p.img.ln1_g, &p.img.ln1_b);
    let (h_txt, ln_txt) = ln_forward(x_txt, &p.txt.ln1_g, &p.txt.ln1_b);
    let q = h_img.matmul(&p.img.wq)?.concat_rows(&h_txt.matmul(&p.txt.wq)?)?;
    let k = h_img.matmul(&p.img.wk)?.concat_rows(&h_txt.matmul(&p.txt.wk)?)?;
    let v = h_img.matmul(&p.img.wv)?.concat_rows(&h_txt.matmul(&p.txt.wv)?)?;
    let d = p.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut z = Matrix::zeros(q.rows(), q.cols());
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let cols = h * d..(h + 1) * d;
        let a = softmax_rows(&q.slice_cols(cols.clone()).matmul_t(&k.slice_cols(cols.clone()))?.scale(scale));
        z.set_cols(h * d, &a.matmul(&v.slice_cols(cols))?);
        weights.push(a);
    }
    let total = z.rows();
    let mut mid_img = linear(&z.slice_rows(0..n_img), &p.img.wo, &p.img.bo)?;
    mid_img.add_scaled(x_img, 1.0)?;
    let mut mid_txt = linear(&z.slice_rows(n_img..total), &p.txt.wo, &p.txt.bo)?;
    mid_txt.add_scaled(x_txt, 1.0)?;
    let (out_img, mlp_img) = mlp_forward(&mid_img, &p.img)?;
    let (out_txt, mlp_txt) = mlp_forward(&mid_txt, &p.txt)?;
    Ok((
        out_img,
        out_txt,
        BlockCache {
            n_img,
            ln_img,
            ln_txt,
            h_img,
            h_txt,
            q,
            k,
            v,
            weights,
            z,
            mlp_img,
            mlp_txt,
        },
    ))
}

fn block_backward(
    d_img: &Matrix,
    d_txt: &Matrix,
    c: &BlockCache,
    p: &BlockParams,
    g: &mut BlockParams,
) -> Result<(Matrix, Matrix)> {
    let n_img = c.n_img;
    let total = c.z.rows();
    let dmid_img = mlp_backward(d_img, &c.mlp_img, &p.img, &mut g.img)?;
    let dmid_txt = mlp_backward(d_txt, &c.mlp_txt, &p.txt, &mut g.txt)?;

    let dz_img = linear_backward(&c.z.slice_rows(0..n_img), &dmid_img, &p.img.wo, &mut g.img.wo, Some(&mut g.img.bo))?;
    let dz_txt = linear_backward(&c.z.slice_rows(n_img..total), &dmid_txt, &p.txt.wo, &mut g.txt.wo, Some(&mut g.txt.bo))?;
    let dz = dz_img.concat_rows(&dz_txt)?;

    let d = p.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Matrix::zeros(c.q.rows(), c.q.cols());
    let mut dk = Matrix::zeros(c.k.rows(), c.k.cols());
    let mut dv = Matrix::zeros(c.v.rows(), c.v.cols());
    for (h, a) in c.weights.iter().enumerate() {
        let cols = h * d..(h + 1) * d;
        let dz_h = dz.slice_cols(cols.clone());
        let v_h = c.v.slice_cols(cols.clone());
        dv.set_cols(h * d, &a.t_matmul(&dz_h)?);
        let da = dz_h.matmul_t(&v_h)?;
        let mut ds = Matrix::zeros(a.rows(), a.cols());
        for r in 0..a.rows() {
            let inner: f64 = a.row(r).iter().zip(da.row(r)).map(|(x, y)| x * y).sum();
            for (o, (&w, &g)) in ds.row_mut(r).iter_mut().zip(a.row(r).iter().zip(da.row(r))) {
                *o = w * (g - inner) * scale;
            }
        }
        dq.set_cols(h * d, &ds.matmul(&c.k.slice_cols(cols.clone()))?);
        dk.set_cols(h * d, &ds.t_matmul(&c.q.slice_cols(cols))?);
    }

    let mut dx = Vec::with_capacity(2);
    for (rows, h, ln, sp, sg, dmid) in [
        (0..n_img, &c.h_img, &c.ln_img, &p.img, &mut g.img, &dmid_img),
        (n_img..total, &c.h_txt, &c.ln_txt, &p.txt, &mut g.txt, &dmid_txt),
    ] {
        let mut dh = linear_backward(h, &dq.slice_rows(rows.clone()), &sp.wq, &mut sg.wq, None)?;
        dh.add_scaled(&linear_backward(h, &dk.slice_rows(rows.clone()), &sp.wk, &mut sg.wk, None)?, 1.0)?;
        dh.add_scaled(&linear_backward(h, &dv.slice_rows(rows), &sp.wv, &mut sg.wv, None)?, 1.0)?;
        let mut dxs = ln_backward(&dh, ln, &sp.ln1_g, &mut sg.ln1_g, &mut sg.ln1_b);
        dxs.add_scaled(dmid, 1.0)?;
        dx.push(dxs);
    }
    let dx_txt = dx.pop().expect("two streams");
    let dx_img = dx.pop().expect("two streams");
    Ok((dx_img, dx_txt))
}

struct ModelCache {
    feats: Matrix,
    time_pre: Matrix,
    time_act: Matrix,
    blocks: Vec<BlockCache>,
    out_ln: LnCache,
    out_h: Matrix,
}

/// Training-path forward: predicted velocity in patch layout.
pub fn predict(model: &ToyModel, patches: &Matrix, t: f64, prompt: &Prompt) -> Result<Matrix> {
    Ok(forward(model, patches, t, prompt)?.0)
}

fn forward(model: &ToyModel, patches: &Matrix, t: f64, prompt: &Prompt) -> Result<(Matrix, ModelCache)> {
    let feats = time_features(t, model.config.time_features);
    let time_pre = linear(&feats, &model.time_w1, &model.time_b1)?;
    let time_act = time_pre.map(gelu);
    let temb = linear(&time_act, &model.time_w2, &model.time_b2)?;

    let mut x_img = linear(patches, &model.patch_w, &model.patch_b)?;
    x_img.add_scaled(&model.pos_emb, 1.0)?;
    x_img.add_row_broadcast(&temb)?;
    let mut x_txt = model.embed_prompt(prompt);

    let mut blocks = Vec::with_capacity(model.blocks.len());
    for p in &model.blocks {
        let (img, txt, cache) = block_forward(&x_img, &x_txt, p)?;
        x_img = img;
        x_txt = txt;
        blocks.push(cache);
    }
    let (out_h, out_ln) = ln_forward(&x_img, &model.out_ln_g, &model.out_ln_b);
    let mut pred = linear(&out_h, &model.out_w, &model.out_b)?;
    pred.add_scaled(&patches.matmul(&model.skip_w)?, 1.0)?;
    Ok((
        pred,
        ModelCache {
            feats,
            time_pre,
            time_act,
            blocks,
            out_ln,
            out_h,
        },
    ))
}

/// Mean squared error between the predicted and target velocity.
pub fn loss(model: &ToyModel, patches: &Matrix, t: f64, prompt: &Prompt, target: &Matrix) -> Result<f64> {
    let pred = predict(model, patches, t, prompt)?;
    let n = pred.data().len() as f64;
    Ok(pred.sub(target)?.data().iter().map(|e| e * e).sum::<f64>() / n)
}

/// Loss plus gradients accumulated (added) into `grads`.
pub fn loss_and_grad(
    model: &ToyModel,
    patches: &Matrix,
    t: f64,
    prompt: &Prompt,
    target: &Matrix,
    grads: &mut ToyModel,
) -> Result<f64> {
    let (pred, cache) = forward(model, patches, t, prompt)?;
    let err = pred.sub(target)?;
    let n = err.data().len() as f64;
    let loss = err.data().iter().map(|e| e * e).sum::<f64>() / n;
    let dpred = err.scale(2.0 / n);
    grads.skip_w.add_scaled(&patches.t_matmul(&dpred)?, 1.0)?;

    let dh = linear_backward(&cache.out_h, &dpred, &model.out_w, &mut grads.out_w, Some(&mut grads.out_b))?;
    let mut d_img = ln_backward(&dh, &cache.out_ln, &model.out_ln_g, &mut grads.out_ln_g, &mut grads.out_ln_b);
    let mut d_txt = Matrix::zeros(prompt.ids().len(), model.config.dim);
    for (l, c) in cache.blocks.iter().enumerate().rev() {
        let (di, dt) = block_backward(&d_img, &d_txt, c, &model.blocks[l], &mut grads.blocks[l])?;
        d_img = di;
        d_txt = dt;
    }

    linear_backward(patches, &d_img, &model.patch_w, &mut grads.patch_w, Some(&mut grads.patch_b))?;
    grads.pos_emb.add_scaled(&d_img, 1.0)?;
    let dtemb = d_img.sum_rows();
    let dact = linear_backward(&cache.time_act, &dtemb, &model.time_w2, &mut grads.time_w2, Some(&mut grads.time_b2))?;
    let dpre = dact.zip_with(&cache.time_pre, "gelu_backward", |d, x| d * gelu_grad(x))?;
    linear_backward(&cache.feats, &dpre, &model.time_w1, &mut grads.time_w1, Some(&mut grads.time_b1))?;

    for (r, &id) in prompt.ids().iter().enumerate() {
        let row = grads.tok_emb.row_mut(id as usize);
        for (g, &d) in row.iter_mut().zip(d_txt.row(r)) {
            *g += d;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::model::ModelConfig;
    use crate::mmdit::Probe;
    use crate::tensor::Rng;

    fn micro() -> ToyModel {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            patch: 4,
            mlp_ratio: 2,
            time_features: 4,
        };
        let mut m = ToyModel::init(cfg, 9).unwrap();
        // Non-trivial norm and bias parameters so their gradients are exercised.
        let mut rng = Rng::new(10);
        for (name, t) in m.tensors_mut() {
            if name.ends_with("_g") {
                *t = Matrix::random_uniform(1, t.cols(), 0.5, 1.5, &mut rng);
            } else if name.ends_with("_b") || name.ends_with("b1") || name.ends_with("b2") || name.ends_with("bo") {
                *t = Matrix::random_normal(t.rows(), t.cols(), 0.1, &mut rng);
            }
        }
        m.out_w = Matrix::random_normal(8, 48, 0.3, &mut rng);
        m.skip_w = Matrix::random_normal(48, 48, 0.1, &mut rng);
        m
    }

    #[test]
    fn training_forward_matches_inference_forward() {
        let m = ToyModel::init(ModelConfig { layers: 2, ..ModelConfig::default() }, 4).unwrap();
        let mut rng = Rng::new(5);
        let x = Matrix::random_normal(16, 48, 1.0, &mut rng);
        let p = Prompt::parse("a red circle").unwrap();
        let a = predict(&m, &x, 0.3, &p).unwrap();
        let b = m.velocity_plain(&x, 0.3, &p, &mut Probe::default()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn gradients_match_central_differences() {
        let model = micro();
        let mut rng = Rng::new(6);
        let x = Matrix::random_normal(16, 48, 1.0, &mut rng);
        let target = Matrix::random_normal(16, 48, 1.0, &mut rng);
        let prompt = Prompt::parse("a green cross").unwrap();
        let t = 0.37;
        let mut grads = model.zeros_like();
        loss_and_grad(&model, &x, t, &prompt, &target, &mut grads).unwrap();

        let h = 1e-5;
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, g)| g.data().to_vec()).collect();
        for (ti, name) in names.iter().enumerate() {
            // a strided subset keeps the unit test quick; the acceptance suite checks every entry
            let len = analytic[ti].len();
            let stride = (len / 12).max(1);
            for i in (0..len).step_by(stride) {
                let mut plus = model.clone();
                plus.tensors_mut()[ti].1.data_mut()[i] += h;
                let mut minus = model.clone();
                minus.tensors_mut()[ti].1.data_mut()[i] -= h;
                let fd = (loss(&plus, &x, t, &prompt, &target).unwrap() - loss(&minus, &x, t, &prompt, &target).unwrap()) / (2.0 * h);
                let a = analytic[ti][i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {a:e} vs fd {fd:e}");
            }
        }
    }
}
