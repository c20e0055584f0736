//! Bias-free, normalisation-free residual CNN with hand-derived gradients.
//!
//! Structure: 3×3 stem conv + ReLU, then per stage a 3×3 stride-2 conv +
//! ReLU followed by residual blocks `y = x + W₂·relu(W₁·x)` (pointwise
//! bottleneck, no bias), global average pooling and an affine classifier.
//! A block whose weights are all zero is exactly the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub channels: usize,
    pub hidden: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stem: usize,
    pub stages: Vec<StageShape>,
    pub classes: usize,
}

/// Indices of every parameter tensor in the flat parameter list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub stem: usize,
    pub down: Vec<usize>,
    /// `(w1, w2)` per block per stage.
    pub blocks: Vec<Vec<(usize, usize)>>,
    pub head_w: usize,
    pub head_b: usize,
    pub count: usize,
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

impl NetShape {
    pub fn layout(&self) -> ParamLayout {
        let mut next = 0;
        let mut take = || {
            next += 1;
            next - 1
        };
        let stem = take();
        let mut down = Vec::new();
        let mut blocks = Vec::new();
        for st in &self.stages {
            down.push(take());
            blocks.push((0..st.blocks).map(|_| (take(), take())).collect());
        }
        let head_w = take();
        let head_b = take();
        ParamLayout {
            stem,
            down,
            blocks,
            head_w,
            head_b,
            count: next,
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut v = vec![vec![self.stem, self.in_channels, 3, 3]];
        let mut prev = self.stem;
        for st in &self.stages {
            v.push(vec![st.channels, prev, 3, 3]);
            for _ in 0..st.blocks {
                v.push(vec![st.hidden, st.channels]);
                v.push(vec![st.channels, st.hidden]);
            }
            prev = st.channels;
        }
        v.push(vec![self.classes, prev]);
        v.push(vec![self.classes]);
        v
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(self.stem, |s| s.channels)
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Seeded initialisation: He-normal convs and bottleneck inputs, damped
    /// residual outputs, small classifier.
    pub fn init_params<T: Scalar>(&self, rng: &mut Rng) -> Vec<Tensor<T>> {
        let layout = self.layout();
        let shapes = self.param_shapes();
        let mut out = Vec::with_capacity(shapes.len());
        for (i, s) in shapes.iter().enumerate() {
            let fan_in: usize = s[1..].iter().product::<usize>().max(1);
            let t = if i == layout.head_b {
                Tensor::zeros(s)
            } else if i == layout.head_w {
                rng.normal_tensor(s, (1.0 / fan_in as f64).sqrt())
            } else if layout.blocks.iter().flatten().any(|&(_, w2)| w2 == i) {
                rng.normal_tensor(s, 0.25 * (1.0 / fan_in as f64).sqrt())
            } else {
                rng.normal_tensor(s, (2.0 / fan_in as f64).sqrt())
            };
            out.push(t);
        }
        out
    }

    pub fn check_params<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<()> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::shape("network params", shapes.len(), params.len()));
        }
        for (p, s) in params.iter().zip(&shapes) {
            if p.shape() != s.as_slice() {
                return Err(Error::shape("network params", format!("{s:?}"), format!("{:?}", p.shape())));
            }
        }
        Ok(())
    }
}

/// `out[oc, oy, ox] = Σ w[oc, ic, ky, kx] · x[ic, oy·s + ky − 1, ox·s + kx − 1]`, zero padding 1.
fn conv3x3<T: Scalar>(x: &[T], cin: usize, h: usize, w: usize, wt: &[T], cout: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let mut out = vec![0.0f64; cout * oh * ow];
    let xf: Vec<f64> = x.iter().map(|v| v.f64()).collect();
    for oc in 0..cout {
        let wo = &wt[oc * cin * 9..(oc + 1) * cin * 9];
        for ic in 0..cin {
            let k = &wo[ic * 9..ic * 9 + 9];
            if k.iter().all(|v| v.is_zero()) {
                continue;
            }
            let kf: [f64; 9] = std::array::from_fn(|i| k[i].f64());
            let xc = &xf[ic * h * w..(ic + 1) * h * w];
            for oy in 0..oh {
                let orow = &mut out[(oc * oh + oy) * ow..(oc * oh + oy + 1) * ow];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xr = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let base = (ox * stride) as isize - 1;
                        let mut acc = 0.0;
                        for kx in 0..3 {
                            let ix = base + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += kf[ky * 3 + kx] * xr[ix as usize];
                            }
                        }
                        *o += acc;
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Accumulates ∂L/∂w into `dw` and returns ∂L/∂x (if requested).
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[T],
    cout: usize,
    stride: usize,
    dout: &[f64],
    dw: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let mut dx = if want_dx { vec![0.0f64; cin * h * w] } else { Vec::new() };
    for oc in 0..cout {
        let d = &dout[oc * oh * ow..(oc + 1) * oh * ow];
        if d.iter().all(|&v| v == 0.0) {
            continue;
        }
        for ic in 0..cin {
            let widx = (oc * cin + ic) * 9;
            let kf: [f64; 9] = std::array::from_fn(|i| wt[widx + i].f64());
            let mut gk = [0.0f64; 9];
            let xc = &x[ic * h * w..(ic + 1) * h * w];
            for oy in 0..oh {
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let g = d[oy * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ix = ix as usize;
                            gk[ky * 3 + kx] += g * xc[iy * w + ix].f64();
                            if want_dx {
                                dx[(ic * h + iy) * w + ix] += g * kf[ky * 3 + kx];
                            }
                        }
                    }
                }
            }
            for (a, b) in dw[widx..widx + 9].iter_mut().zip(gk) {
                *a += b;
            }
        }
    }
    dx
}

/// `out[o, p] = Σ_c w[o, c] · x[c, p]` for a `[c × p]` activation map.
fn pointwise<T: Scalar>(x: &[f64], c: usize, p: usize, wt: &[T], o: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; o * p];
    for oi in 0..o {
        let orow = &mut out[oi * p..(oi + 1) * p];
        for ci in 0..c {
            let wv = wt[oi * c + ci].f64();
            if wv == 0.0 {
                continue;
            }
            for (a, &xv) in orow.iter_mut().zip(&x[ci * p..(ci + 1) * p]) {
                *a += wv * xv;
            }
        }
    }
    out
}

fn round_to<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

fn relu_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

struct BlockCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

struct StageCache<T: Scalar> {
    input: Vec<T>,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    down_out: Vec<f64>,
    blocks: Vec<BlockCache>,
}

struct ForwardCache<T: Scalar> {
    stem_out: Vec<f64>,
    stages: Vec<StageCache<T>>,
    last: Vec<f64>,
    last_hw: (usize, usize),
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

/// A network instance: shape plus flat parameters in [`ParamLayout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar = f32> {
    pub shape: NetShape,
    pub params: Vec<Tensor<T>>,
}

/// Result of a batch loss evaluation.
#[derive(Debug, Clone)]
pub struct BatchGrad<T: Scalar> {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(shape: NetShape, params: Vec<Tensor<T>>) -> Result<Self> {
        shape.check_params(&params)?;
        Ok(Self { shape, params })
    }

    pub fn init(shape: NetShape, rng: &mut Rng) -> Self {
        let params = shape.init_params(rng);
        Self { shape, params }
    }

    fn forward_cached(&self, x: &[T]) -> Result<ForwardCache<T>> {
        let sh = &self.shape;
        if x.len() != sh.input_len() {
            return Err(Error::shape("network input", sh.input_len(), x.len()));
        }
        let layout = sh.layout();
        let (mut h, mut w) = (sh.height, sh.width);
        let (mut stem_out, _, _) = conv3x3(x, sh.in_channels, h, w, self.params[layout.stem].data(), sh.stem, 1);
        relu_inplace(&mut stem_out);
        let mut cur: Vec<f64> = stem_out.clone();
        let mut cur_c = sh.stem;
        let mut stages = Vec::with_capacity(sh.stages.len());
        for (s, st) in sh.stages.iter().enumerate() {
            let input: Vec<T> = round_to(&cur);
            let (mut down_out, oh, ow) =
                conv3x3(&input, cur_c, h, w, self.params[layout.down[s]].data(), st.channels, 2);
            relu_inplace(&mut down_out);
            let p = oh * ow;
            let mut act = down_out.clone();
            let mut blocks = Vec::with_capacity(st.blocks);
            for &(w1, w2) in &layout.blocks[s] {
                let mut hidden = pointwise(&act, st.channels, p, self.params[w1].data(), st.hidden);
                relu_inplace(&mut hidden);
                let delta = pointwise(&hidden, st.hidden, p, self.params[w2].data(), st.channels);
                let next: Vec<f64> = act.iter().zip(&delta).map(|(a, d)| a + d).collect();
                blocks.push(BlockCache { input: act, hidden });
                act = next;
            }
            stages.push(StageCache {
                input,
                in_hw: (h, w),
                out_hw: (oh, ow),
                down_out,
                blocks,
            });
            cur = act;
            cur_c = st.channels;
            h = oh;
            w = ow;
        }
        let p = h * w;
        let pooled: Vec<f64> = (0..cur_c)
            .map(|c| cur[c * p..(c + 1) * p].iter().sum::<f64>() / p as f64)
            .collect();
        let hw = self.params[layout.head_w].data();
        let hb = self.params[layout.head_b].data();
        let logits = (0..sh.classes)
            .map(|k| {
                let row = &hw[k * cur_c..(k + 1) * cur_c];
                hb[k].f64() + row.iter().zip(&pooled).map(|(a, b)| a.f64() * b).sum::<f64>()
            })
            .collect();
        Ok(ForwardCache {
            stem_out,
            stages,
            last: cur,
            last_hw: (h, w),
            pooled,
            logits,
        })
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.logits)
    }

    /// Pooled pre-classifier features.
    pub fn features(&self, x: &[T]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.pooled)
    }

    pub fn predict(&self, x: &[T]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Mean softmax cross-entropy over `(image, label)` pairs and its
    /// gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[(&[T], usize)]) -> Result<BatchGrad<T>> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let sh = &self.shape;
        let layout = sh.layout();
        let mut acc: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut loss = 0.0;
        let mut correct = 0;
        let scale = 1.0 / batch.len() as f64;
        for &(x, label) in batch {
            if label >= sh.classes {
                return Err(Error::InvalidInput(format!("label {label} >= {} classes", sh.classes)));
            }
            let cache = self.forward_cached(x)?;
            let probs = softmax(&cache.logits);
            loss += -probs[label].max(1e-300).ln() * scale;
            if argmax(&cache.logits) == label {
                correct += 1;
            }
            let dlogits: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(k, &p)| (p - if k == label { 1.0 } else { 0.0 }) * scale)
                .collect();
            self.backward(x, &cache, &dlogits, &mut acc, &layout);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        let grads = acc
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| Tensor::new(p.shape().to_vec(), round_to(&g)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchGrad { loss, correct, grads })
    }

    fn backward(&self, x: &[T], cache: &ForwardCache<T>, dlogits: &[f64], acc: &mut [Vec<f64>], layout: &ParamLayout) {
        let sh = &self.shape;
        let c_last = sh.feature_dim();
        let hw = self.params[layout.head_w].data();
        let mut dpooled = vec![0.0; c_last];
        for (k, &g) in dlogits.iter().enumerate() {
            acc[layout.head_b][k] += g;
            for c in 0..c_last {
                acc[layout.head_w][k * c_last + c] += g * cache.pooled[c];
                dpooled[c] += g * hw[k * c_last + c].f64();
            }
        }
        let (lh, lw) = cache.last_hw;
        let p = lh * lw;
        let mut dact: Vec<f64> = (0..c_last * p).map(|i| dpooled[i / p] / p as f64).collect();
        debug_assert_eq!(cache.last.len(), dact.len());

        for s in (0..sh.stages.len()).rev() {
            let st = &sh.stages[s];
            let sc = &cache.stages[s];
            let (oh, ow) = sc.out_hw;
            let p = oh * ow;
            for (b, &(w1, w2)) in layout.blocks[s].iter().enumerate().rev() {
                let bc = &sc.blocks[b];
                let w1d = self.params[w1].data();
                let w2d = self.params[w2].data();
                // y = x + W2 r,  r = relu(W1 x)
                let mut dr = vec![0.0; st.hidden * p];
                for o in 0..st.channels {
                    let dy = &dact[o * p..(o + 1) * p];
                    for hd in 0..st.hidden {
                        let r = &bc.hidden[hd * p..(hd + 1) * p];
                        let mut g = 0.0;
                        for (a, b) in dy.iter().zip(r) {
                            g += a * b;
                        }
                        acc[w2][o * st.hidden + hd] += g;
                        let wv = w2d[o * st.hidden + hd].f64();
                        if wv != 0.0 {
                            for (d, &y) in dr[hd * p..(hd + 1) * p].iter_mut().zip(dy) {
                                *d += wv * y;
                            }
                        }
                    }
                }
                for (d, &r) in dr.iter_mut().zip(&bc.hidden) {
                    if r <= 0.0 {
                        *d = 0.0;
                    }
                }
                for hd in 0..st.hidden {
                    let du = &dr[hd * p..(hd + 1) * p];
                    if du.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for c in 0..st.channels {
                        let xin = &bc.input[c * p..(c + 1) * p];
                        let mut g = 0.0;
                        for (a, b) in du.iter().zip(xin) {
                            g += a * b;
                        }
                        acc[w1][hd * st.channels + c] += g;
                        let wv = w1d[hd * st.channels + c].f64();
                        if wv != 0.0 {
                            for (d, &u) in dact[c * p..(c + 1) * p].iter_mut().zip(du) {
                                *d += wv * u;
                            }
                        }
                    }
                }
            }
            // through relu(down conv)
            for (d, &o) in dact.iter_mut().zip(&sc.down_out) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
            let cin = if s == 0 { sh.stem } else { sh.stages[s - 1].channels };
            let (ih, iw) = sc.in_hw;
            dact = conv3x3_backward(
                &sc.input,
                cin,
                ih,
                iw,
                self.params[layout.down[s]].data(),
                st.channels,
                2,
                &dact,
                &mut acc[layout.down[s]],
                true,
            );
        }
        for (d, &o) in dact.iter_mut().zip(&cache.stem_out) {
            if o <= 0.0 {
                *d = 0.0;
            }
        }
        conv3x3_backward(
            x,
            sh.in_channels,
            sh.height,
            sh.width,
            self.params[layout.stem].data(),
            sh.stem,
            1,
            &dact,
            &mut acc[layout.stem],
            false,
        );
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            shape: self.shape.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Copy the leading `sub` corner of `full` (every axis is prefix-sliced).
pub fn extract_prefix<T: Scalar>(full: &Tensor<T>, sub: &[usize]) -> Result<Tensor<T>> {
    let fs = full.shape();
    if fs.len() != sub.len() || sub.iter().zip(fs).any(|(a, b)| a > b) {
        return Err(Error::shape("extract_prefix", format!("prefix of {fs:?}"), format!("{sub:?}")));
    }
    let n: usize = sub.iter().product();
    let mut data = Vec::with_capacity(n);
    for flat in 0..n {
        data.push(full.data()[map_index(flat, sub, fs)]);
    }
    Tensor::new(sub.to_vec(), data)
}

/// Place `sub` in the leading corner of a zero tensor of shape `full`.
pub fn scatter_prefix<T: Scalar>(sub: &Tensor<T>, full: &[usize]) -> Result<Tensor<T>> {
    let ss = sub.shape();
    if ss.len() != full.len() || ss.iter().zip(full).any(|(a, b)| a > b) {
        return Err(Error::shape("scatter_prefix", format!("prefix of {full:?}"), format!("{ss:?}")));
    }
    let mut out = Tensor::zeros(full);
    for (flat, &v) in sub.data().iter().enumerate() {
        out.data_mut()[map_index(flat, ss, full)] = v;
    }
    Ok(out)
}

fn map_index(flat: usize, from: &[usize], to: &[usize]) -> usize {
    let mut rem = flat;
    let mut idx = 0;
    let mut stride = 1;
    for d in (0..from.len()).rev() {
        let i = rem % from[d];
        rem /= from[d];
        idx += i * stride;
        stride *= to[d];
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_shape() -> NetShape {
        NetShape {
            in_channels: 1,
            height: 6,
            width: 6,
            stem: 3,
            stages: vec![
                StageShape { channels: 4, hidden: 3, blocks: 2 },
                StageShape { channels: 5, hidden: 4, blocks: 1 },
            ],
            classes: 3,
        }
    }

    #[test]
    fn layout_matches_shapes() {
        let sh = tiny_shape();
        let l = sh.layout();
        assert_eq!(l.count, sh.param_shapes().len());
        assert_eq!(l.blocks[0], vec![(2, 3), (4, 5)]);
        assert_eq!(l.head_b, l.count - 1);
    }

    #[test]
    fn zero_block_is_identity() {
        let sh = tiny_shape();
        let mut rng = Rng::new(5);
        let net = Network::<f64>::init(sh.clone(), &mut rng);
        let mut zeroed = net.clone();
        let l = sh.layout();
        let (w1, w2) = l.blocks[0][1];
        zeroed.params[w1].fill(0.0);
        zeroed.params[w2].fill(0.0);
        let mut removed_shape = sh.clone();
        removed_shape.stages[0].blocks = 1;
        let mut removed_params = net.params.clone();
        removed_params.drain(w1..=w2);
        let removed = Network::new(removed_shape, removed_params).unwrap();
        let x: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(zeroed.logits(&x).unwrap(), removed.logits(&x).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::numerics::grad_check;
        for seed in 0..4u64 {
            let sh = tiny_shape();
            let mut rng = Rng::new(seed);
            let net = Network::<f64>::init(sh.clone(), &mut rng);
            let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..36).map(|_| rng.normal()).collect()).collect();
            let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 3)).collect();
            let g = net.loss_and_grad(&batch).unwrap();
            let err = grad_check(
                |p| Network::new(sh.clone(), p.to_vec()).unwrap().loss_and_grad(&batch).unwrap().loss,
                &net.params,
                &g.grads,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn prefix_extract_scatter() {
        let t = Tensor::<f32>::from_fn(&[3, 4], |i| i as f32);
        let e = extract_prefix(&t, &[2, 3]).unwrap();
        assert_eq!(e.data(), &[0., 1., 2., 4., 5., 6.]);
        let s = scatter_prefix(&e, &[3, 4]).unwrap();
        assert_eq!(s.data(), &[0., 1., 2., 0., 4., 5., 6., 0., 0., 0., 0., 0.]);
        assert!(extract_prefix(&t, &[4, 1]).is_err());
    }

    #[test]
    fn rejects_wrong_input_length() {
        let mut rng = Rng::new(1);
        let net = Network::<f32>::init(tiny_shape(), &mut rng);
        assert!(net.logits(&[0.0; 5]).is_err());
    }
}
