use ndarray::{s, Array2, ArrayD, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{relu2, relu_backward2, LayerNorm, Linear, Mode, Visitor};
use super::spec::{ArchitectureSpec, BlockKind, InputShape, LayerRef, StemSpec};
use super::tensor::{Float, Param};
use super::NetError;

struct AttentionCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    hidden: Array2<F>,
}

/// Pre-norm encoder block on `(batch · tokens, model_dim)` activations:
/// `h₁ = h + Attn(LN₁ h)`, `y = h₁ + MLP(LN₂ h₁)`.
pub struct EncoderBlock<F> {
    pub id: LayerRef,
    heads: usize,
    ln1: LayerNorm<F>,
    wq: Linear<F>,
    wk: Linear<F>,
    wv: Linear<F>,
    wo: Linear<F>,
    ln2: LayerNorm<F>,
    fc1: Linear<F>,
    fc2: Linear<F>,
    pub(crate) zero_branch: bool,
    cache: Option<AttentionCache<F>>,
}

impl<F: Float> EncoderBlock<F> {
    fn new<R: Rng>(id: LayerRef, model_dim: usize, heads: usize, ff_dim: usize, rng: &mut R) -> Self {
        Self {
            id,
            heads,
            ln1: LayerNorm::new(model_dim),
            wq: Linear::new(model_dim, model_dim, rng),
            wk: Linear::new(model_dim, model_dim, rng),
            wv: Linear::new(model_dim, model_dim, rng),
            wo: Linear::new(model_dim, model_dim, rng),
            ln2: LayerNorm::new(model_dim),
            fc1: Linear::new(model_dim, ff_dim, rng),
            fc2: Linear::new(ff_dim, model_dim, rng),
            zero_branch: false,
            cache: None,
        }
    }

    fn forward(&mut self, h: &Array2<F>, tokens: usize, mode: Mode) -> Array2<F> {
        if self.zero_branch {
            return h.clone();
        }
        let a = self.ln1.forward(h, mode);
        let q = self.wq.forward(&a, mode);
        let k = self.wk.forward(&a, mode);
        let v = self.wv.forward(&a, mode);
        let d = q.ncols();
        let dh = d / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let batch = h.nrows() / tokens;
        let mut o = Array2::<F>::zeros(h.raw_dim());
        let mut probs = Vec::with_capacity(if mode.records() { batch * self.heads } else { 0 });
        for i in 0..batch {
            let rows = i * tokens..(i + 1) * tokens;
            for j in 0..self.heads {
                let cols = j * dh..(j + 1) * dh;
                let qs = q.slice(s![rows.clone(), cols.clone()]);
                let ks = k.slice(s![rows.clone(), cols.clone()]);
                let vs = v.slice(s![rows.clone(), cols.clone()]);
                let mut p = qs.dot(&ks.t()) * scale;
                softmax_rows(&mut p);
                o.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vs));
                if mode.records() {
                    probs.push(p);
                }
            }
        }
        let z = self.wo.forward(&o, mode);
        let h1 = h + &z;
        let b = self.ln2.forward(&h1, mode);
        let u = relu2(self.fc1.forward(&b, mode));
        let m = self.fc2.forward(&u, mode);
        if mode.records() {
            self.cache = Some(AttentionCache {
                q,
                k,
                v,
                probs,
                hidden: u,
            });
        }
        h1 + m
    }

    fn backward(&mut self, dy: &Array2<F>, tokens: usize) -> Array2<F> {
        if self.zero_branch {
            return dy.clone();
        }
        let AttentionCache {
            q,
            k,
            v,
            probs,
            hidden,
        } = self.cache.take().expect("encoder backward without recorded forward");
        let dm = self.fc2.backward(dy);
        let du = relu_backward2(&dm, &hidden);
        let db = self.fc1.backward(&du);
        let dh1 = dy + &self.ln2.backward(&db);

        let dout = self.wo.backward(&dh1);
        let d = q.ncols();
        let dh = d / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let batch = dy.nrows() / tokens;
        let mut dq = Array2::<F>::zeros(q.raw_dim());
        let mut dk = Array2::<F>::zeros(k.raw_dim());
        let mut dv = Array2::<F>::zeros(v.raw_dim());
        for i in 0..batch {
            let rows = i * tokens..(i + 1) * tokens;
            for j in 0..self.heads {
                let cols = j * dh..(j + 1) * dh;
                let p = &probs[i * self.heads + j];
                let qs = q.slice(s![rows.clone(), cols.clone()]);
                let ks = k.slice(s![rows.clone(), cols.clone()]);
                let vs = v.slice(s![rows.clone(), cols.clone()]);
                let dos = dout.slice(s![rows.clone(), cols.clone()]);
                let dp = dos.dot(&vs.t());
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dos));
                let mut ds = p * &dp;
                let row_sums = ds.sum_axis(Axis(1));
                for ((mut dr, pr), &rs) in ds.rows_mut().into_iter().zip(p.rows()).zip(row_sums.iter()) {
                    dr.zip_mut_with(&pr, |x, &pp| *x = *x - pp * rs);
                }
                ds *= scale;
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qs));
            }
        }
        let mut da = self.wq.backward(&dq);
        da += &self.wk.backward(&dk);
        da += &self.wv.backward(&dv);
        dh1.clone() + self.ln1.backward(&da)
    }

    fn visit(&mut self, f: &mut Visitor<'_, F>) {
        let p = self.id.to_string();
        self.ln1.visit(&format!("{p}.ln1"), f);
        self.wq.visit(&format!("{p}.attn.q"), f);
        self.wk.visit(&format!("{p}.attn.k"), f);
        self.wv.visit(&format!("{p}.attn.v"), f);
        self.wo.visit(&format!("{p}.attn.o"), f);
        self.ln2.visit(&format!("{p}.ln2"), f);
        self.fc1.visit(&format!("{p}.mlp.fc1"), f);
        self.fc2.visit(&format!("{p}.mlp.fc2"), f);
    }
}

fn softmax_rows<F: Float>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Encoder over per-feature tokens with mean pooling before the classifier.
pub struct TabularTransformer<F> {
    tokens: usize,
    model_dim: usize,
    embed_w: Param<F>,
    embed_b: Param<F>,
    pub(crate) blocks: Vec<EncoderBlock<F>>,
    final_ln: LayerNorm<F>,
    head: Linear<F>,
    input: Option<Array2<F>>,
}

impl<F: Float> TabularTransformer<F> {
    pub fn new<R: Rng>(spec: &ArchitectureSpec, rng: &mut R) -> Result<Self, NetError> {
        let InputShape::Tabular { features } = spec.input else {
            return Err(NetError::Spec("transformer needs tabular input".into()));
        };
        let StemSpec::FeatureEmbedding { model_dim } = spec.stem else {
            return Err(NetError::Spec("transformer needs a feature embedding".into()));
        };
        let unit = Normal::new(0.0, 1.0).expect("valid");
        let small = Normal::new(0.0, 0.1).expect("valid");
        let draw = |dist: &Normal<f64>, rng: &mut R| {
            let data: Vec<F> = (0..features * model_dim).map(|_| F::of(dist.sample(rng))).collect();
            Param::trainable(ArrayD::from_shape_vec(vec![features, model_dim], data).expect("shape"))
        };
        let embed_w = draw(&unit, rng);
        let embed_b = draw(&small, rng);
        let blocks = spec
            .blocks()
            .map(|b| match b.kind {
                BlockKind::TransformerEncoder {
                    model_dim,
                    heads,
                    ff_dim,
                } => EncoderBlock::new(b.id, model_dim, heads, ff_dim, rng),
                _ => unreachable!("validated spec"),
            })
            .collect();
        let head = Linear::new(model_dim, spec.head.classes, rng);
        Ok(Self {
            tokens: features,
            model_dim,
            embed_w,
            embed_b,
            blocks,
            final_ln: LayerNorm::new(model_dim),
            head,
            input: None,
        })
    }

    pub fn features(&mut self, x: ArrayView2<'_, F>, mode: Mode) -> Array2<F> {
        let n = x.nrows();
        let (t, d) = (self.tokens, self.model_dim);
        let w = self.embed_w.mat();
        let b = self.embed_b.mat();
        let mut h = Array2::<F>::zeros((n * t, d));
        for i in 0..n {
            for tt in 0..t {
                let xv = x[[i, tt]];
                let mut row = h.row_mut(i * t + tt);
                for j in 0..d {
                    row[j] = xv * w[[tt, j]] + b[[tt, j]];
                }
            }
        }
        if mode.records() {
            self.input = Some(x.to_owned());
        }
        for block in &mut self.blocks {
            h = block.forward(&h, t, mode);
        }
        let h = self.final_ln.forward(&h, mode);
        let mut pooled = Array2::<F>::zeros((n, d));
        let inv = F::of(1.0 / t as f64);
        for i in 0..n {
            let mean = h.slice(s![i * t..(i + 1) * t, ..]).sum_axis(Axis(0));
            pooled.row_mut(i).assign(&(mean * inv));
        }
        pooled
    }

    pub fn forward(&mut self, x: ArrayView2<'_, F>, mode: Mode) -> Array2<F> {
        let feats = self.features(x, mode);
        self.head.forward(&feats, mode)
    }

    pub fn backward(&mut self, dlogits: &Array2<F>) -> Array2<F> {
        let dfeat = self.head.backward(dlogits);
        let n = dfeat.nrows();
        let (t, d) = (self.tokens, self.model_dim);
        let inv = F::of(1.0 / t as f64);
        let mut dh = Array2::<F>::zeros((n * t, d));
        for i in 0..n {
            for tt in 0..t {
                dh.row_mut(i * t + tt).assign(&(&dfeat.row(i) * inv));
            }
        }
        let mut dh = self.final_ln.backward(&dh);
        for block in self.blocks.iter_mut().rev() {
            dh = block.backward(&dh, t);
        }
        let x = self.input.take().expect("recorded");
        let mut dx = Array2::<F>::zeros((n, t));
        let w = self.embed_w.mat().to_owned();
        {
            let mut gw = self.embed_w.grad_mat();
            for i in 0..n {
                for tt in 0..t {
                    let row = dh.row(i * t + tt);
                    let xv = x[[i, tt]];
                    let mut acc = F::zero();
                    for j in 0..d {
                        gw[[tt, j]] += xv * row[j];
                        acc += row[j] * w[[tt, j]];
                    }
                    dx[[i, tt]] = acc;
                }
            }
        }
        let mut gb = self.embed_b.grad_mat();
        for i in 0..n {
            for tt in 0..t {
                let row = dh.row(i * t + tt);
                gb.row_mut(tt).zip_mut_with(&row, |g, &v| *g += v);
            }
        }
        dx
    }

    pub fn visit(&mut self, f: &mut Visitor<'_, F>) {
        f("embed.weight".into(), &mut self.embed_w);
        f("embed.bias".into(), &mut self.embed_b);
        for block in &mut self.blocks {
            block.visit(f);
        }
        self.final_ln.visit("final_ln", f);
        self.head.visit("head", f);
    }
}
