use ndarray::{s, concatenate, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{softmax_rows, PosteriorModel, MASKED_LOGIT};
use crate::error::{config, validation, Result};
use crate::path_data::{Token, Vocab};
use crate::rng::stream_rng;

const LN_EPS: f64 = 1e-5;
/// Rows per forward pass when evaluating without gradients.
const INFERENCE_CHUNK: usize = 1024;

/// Shape of a step-aware denoiser. Token embeddings live directly in the
/// hidden dimension: one table per position, summed over positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralDenoiserSpec {
    pub vocab: Vocab,
    pub seq_len: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Frequencies in each sinusoidal embedding (sin and cos each).
    #[serde(default = "default_frequencies")]
    pub frequencies: usize,
    #[serde(default = "default_cond")]
    pub cond_dim: usize,
}

fn default_hidden() -> usize {
    128
}
fn default_depth() -> usize {
    2
}
fn default_frequencies() -> usize {
    8
}
fn default_cond() -> usize {
    64
}

impl NeuralDenoiserSpec {
    pub fn new(vocab: Vocab, seq_len: usize) -> Self {
        Self {
            vocab,
            seq_len,
            hidden: default_hidden(),
            depth: default_depth(),
            frequencies: default_frequencies(),
            cond_dim: default_cond(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.seq_len == 0 || self.hidden == 0 || self.frequencies == 0 || self.cond_dim == 0 {
            return Err(config(format!("degenerate network shape {self:?}")));
        }
        Ok(())
    }

    fn angular(&self) -> Vec<f64> {
        // Geometric from 1 to 64 rad per unit input.
        let k = self.frequencies;
        (0..k)
            .map(|j| if k == 1 { 1.0 } else { 64f64.powf(j as f64 / (k - 1) as f64) })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    offset: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone)]
struct BlockSlots {
    mod_w: Slot,
    mod_b: Slot,
    fc1_w: Slot,
    fc1_b: Slot,
    fc2_w: Slot,
    fc2_b: Slot,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Slot,
    embed_b: Slot,
    time_w: Slot,
    time_b: Slot,
    step_w: Slot,
    step_b: Slot,
    fuse_w: Slot,
    fuse_b: Slot,
    blocks: Vec<BlockSlots>,
    final_w: Slot,
    final_b: Slot,
    head_w: Slot,
    head_b: Slot,
    names: Vec<(String, Slot)>,
    total: usize,
}

impl Layout {
    fn new(spec: &NeuralDenoiserSpec) -> Self {
        let (h, c, f) = (spec.hidden, spec.cond_dim, 2 * spec.frequencies);
        let out = spec.seq_len * spec.vocab.size;
        let mut names = Vec::new();
        let mut total = 0;
        let mut slot = |name: String, rows: usize, cols: usize| {
            let s = Slot { offset: total, rows, cols };
            total += rows * cols;
            names.push((name, s));
            s
        };
        let embed = slot("embed".into(), out, h);
        let embed_b = slot("embed_bias".into(), 1, h);
        let time_w = slot("time.weight".into(), f, c);
        let time_b = slot("time.bias".into(), 1, c);
        let step_w = slot("step.weight".into(), f, c);
        let step_b = slot("step.bias".into(), 1, c);
        let fuse_w = slot("fuse.weight".into(), 2 * c, c);
        let fuse_b = slot("fuse.bias".into(), 1, c);
        let blocks = (0..spec.depth)
            .map(|l| BlockSlots {
                mod_w: slot(format!("block{l}.modulation.weight"), c, 2 * h),
                mod_b: slot(format!("block{l}.modulation.bias"), 1, 2 * h),
                fc1_w: slot(format!("block{l}.fc1.weight"), h, h),
                fc1_b: slot(format!("block{l}.fc1.bias"), 1, h),
                fc2_w: slot(format!("block{l}.fc2.weight"), h, h),
                fc2_b: slot(format!("block{l}.fc2.bias"), 1, h),
            })
            .collect();
        let final_w = slot("final.modulation.weight".into(), c, 2 * h);
        let final_b = slot("final.modulation.bias".into(), 1, 2 * h);
        let head_w = slot("head.weight".into(), h, out);
        let head_b = slot("head.bias".into(), 1, out);
        Self {
            embed,
            embed_b,
            time_w,
            time_b,
            step_w,
            step_b,
            fuse_w,
            fuse_b,
            blocks,
            final_w,
            final_b,
            head_w,
            head_b,
            names,
            total,
        }
    }
}

fn mat<'a>(p: &'a [f64], s: Slot) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &p[s.offset..s.offset + s.rows * s.cols]).expect("slot shape")
}

fn vec1<'a>(p: &'a [f64], s: Slot) -> ArrayView1<'a, f64> {
    ArrayView1::from(&p[s.offset..s.offset + s.cols])
}

fn mat_mut<'a>(p: &'a mut [f64], s: Slot) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut p[s.offset..s.offset + s.rows * s.cols])
        .expect("slot shape")
}

fn vec_mut<'a>(p: &'a mut [f64], s: Slot) -> ArrayViewMut1<'a, f64> {
    ArrayViewMut1::from(&mut p[s.offset..s.offset + s.cols])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// `upstream * silu'(pre)`.
fn silu_back(upstream: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut out = upstream.clone();
    out.zip_mut_with(pre, |g, &x| {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    });
    out
}

fn affine(x: &Array2<f64>, p: &[f64], w: Slot, b: Slot) -> Array2<f64> {
    x.dot(&mat(p, w)) + &vec1(p, b)
}

fn sinusoid(values: impl Iterator<Item = f64>, freqs: &[f64]) -> Array2<f64> {
    let rows: Vec<f64> = values
        .flat_map(|x| {
            let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.iter().map(|w| (w * x).sin_cos()).unzip();
            sin.into_iter().chain(cos)
        })
        .collect();
    let k = 2 * freqs.len();
    Array2::from_shape_vec((rows.len() / k, k), rows).expect("feature shape")
}

/// Step-size coordinate: `-log2(h) / 10`, so the grid `2^-10..=1` maps to `[0, 1]`.
fn step_coordinate(h: f64) -> f64 {
    -h.log2() / 10.0
}

struct Norm {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>) -> Norm {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let i = *inv;
        row.mapv_inplace(|v| v * i);
    }
    Norm { xhat, inv_std }
}

fn layer_norm_back(norm: &Norm, dxhat: &Array2<f64>) -> Array2<f64> {
    let n = dxhat.ncols() as f64;
    let mut dx = dxhat.clone();
    for ((mut row, xh), &inv) in dx.axis_iter_mut(Axis(0)).zip(norm.xhat.rows()).zip(&norm.inv_std) {
        let mean_g = row.sum() / n;
        let mean_gx = row.iter().zip(xh).map(|(g, x)| g * x).sum::<f64>() / n;
        row.zip_mut_with(&xh, |g, &x| *g = inv * (*g - mean_g - x * mean_gx));
    }
    dx
}

/// Shift/scale modulation applied to a normalized activation.
struct Modulated {
    norm: Norm,
    scale: Array2<f64>,
    y: Array2<f64>,
}

fn modulate(x: &Array2<f64>, modv: &Array2<f64>, h: usize) -> Modulated {
    let norm = layer_norm(x);
    let shift = modv.slice(s![.., ..h]);
    let scale = modv.slice(s![.., h..]).to_owned();
    let y = &norm.xhat * &scale.mapv(|v| 1.0 + v) + &shift;
    Modulated { norm, scale, y }
}

/// Returns `(dx, dmod)` given the gradient at the modulated output.
fn modulate_back(m: &Modulated, dy: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let dshift = dy.clone();
    let dscale = dy * &m.norm.xhat;
    let dxhat = dy * &m.scale.mapv(|v| 1.0 + v);
    let dmod = concatenate![Axis(1), dshift, dscale];
    (layer_norm_back(&m.norm, &dxhat), dmod)
}

struct BlockCache {
    modulated: Modulated,
    a1: Array2<f64>,
    s1: Array2<f64>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    tokens: Vec<Token>,
    ft: Array2<f64>,
    fh: Array2<f64>,
    pre_t: Array2<f64>,
    pre_h: Array2<f64>,
    cat: Array2<f64>,
    pre_c: Array2<f64>,
    c: Array2<f64>,
    blocks: Vec<BlockCache>,
    last: Modulated,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.c.nrows()
    }
}

/// Small adaptive-LayerNorm MLP conditioned on `t` and `log2 h`.
#[derive(Debug, Clone)]
pub struct NeuralDenoiser {
    spec: NeuralDenoiserSpec,
    layout: Layout,
    params: Vec<f64>,
}

impl NeuralDenoiser {
    /// Fresh parameters: uniform fan-in/fan-out weights, zero biases, zero
    /// modulation and a zero output head.
    pub fn new(spec: NeuralDenoiserSpec, seed: u64) -> Result<Self> {
        spec.check()?;
        let layout = Layout::new(&spec);
        let mut params = vec![0.0; layout.total];
        let mut rng = stream_rng(seed, 0);
        let mut fill = |p: &mut [f64], s: Slot, bound: f64| {
            for v in &mut p[s.offset..s.offset + s.rows * s.cols] {
                *v = rng.random_range(-bound..=bound);
            }
        };
        let xavier = |s: Slot| (6.0 / (s.rows + s.cols) as f64).sqrt();
        fill(&mut params, layout.embed, (3.0 / spec.seq_len as f64).sqrt());
        for s in [layout.time_w, layout.step_w, layout.fuse_w] {
            fill(&mut params, s, xavier(s));
        }
        for b in &layout.blocks {
            fill(&mut params, b.fc1_w, xavier(b.fc1_w));
            fill(&mut params, b.fc2_w, xavier(b.fc2_w));
        }
        Ok(Self { spec, layout, params })
    }

    pub fn from_params(spec: NeuralDenoiserSpec, params: Vec<f64>) -> Result<Self> {
        spec.check()?;
        let layout = Layout::new(&spec);
        if params.len() != layout.total {
            return Err(config(format!(
                "parameter vector has {} entries, network needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { spec, layout, params })
    }

    pub fn spec(&self) -> &NeuralDenoiserSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(config(format!(
                "parameter vector has {} entries, network needs {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// `(name, [rows, cols])` for every parameter tensor, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, [usize; 2])> {
        self.layout.names.iter().map(|(n, s)| (n.clone(), [s.rows, s.cols])).collect()
    }

    fn check_inputs(&self, zs: &[&[Token]], t: &[f64], h: &[f64]) -> Result<()> {
        if zs.len() != t.len() || zs.len() != h.len() {
            return Err(validation("batch inputs have different lengths"));
        }
        for z in zs {
            if z.len() != self.spec.seq_len {
                return Err(config(format!(
                    "state has length {}, network expects {}",
                    z.len(),
                    self.spec.seq_len
                )));
            }
            self.spec.vocab.check(z)?;
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(validation(format!("time {bad} outside [0, 1]")));
        }
        if let Some(bad) = h.iter().find(|h| !(**h > 0.0 && **h <= 1.0)) {
            return Err(validation(format!("step size {bad} outside (0, 1]")));
        }
        Ok(())
    }

    /// Logits for a batch as a `B x (L * |V|)` array, plus the cache needed
    /// by [`NeuralDenoiser::backward`].
    pub fn forward_batch(&self, zs: &[&[Token]], t: &[f64], h: &[f64]) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_inputs(zs, t, h)?;
        let p = &self.params[..];
        let lay = &self.layout;
        let (hid, v) = (self.spec.hidden, self.spec.vocab.size);
        let freqs = self.spec.angular();

        let ft = sinusoid(t.iter().copied(), &freqs);
        let fh = sinusoid(h.iter().map(|&h| step_coordinate(h)), &freqs);
        let pre_t = affine(&ft, p, lay.time_w, lay.time_b);
        let pre_h = affine(&fh, p, lay.step_w, lay.step_b);
        let cat = concatenate![Axis(1), silu(&pre_t), silu(&pre_h)];
        let pre_c = affine(&cat, p, lay.fuse_w, lay.fuse_b);
        let c = silu(&pre_c);

        let embed = mat(p, lay.embed);
        let mut x = Array2::zeros((zs.len(), hid));
        let mut tokens = Vec::with_capacity(zs.len() * self.spec.seq_len);
        for (mut row, z) in x.axis_iter_mut(Axis(0)).zip(zs) {
            row.assign(&vec1(p, lay.embed_b));
            for (i, &a) in z.iter().enumerate() {
                row += &embed.row(i * v + a as usize);
            }
            tokens.extend_from_slice(z);
        }

        let mut blocks = Vec::with_capacity(lay.blocks.len());
        for b in &lay.blocks {
            let modulated = modulate(&x, &affine(&c, p, b.mod_w, b.mod_b), hid);
            let a1 = affine(&modulated.y, p, b.fc1_w, b.fc1_b);
            let s1 = silu(&a1);
            x = x + affine(&s1, p, b.fc2_w, b.fc2_b);
            blocks.push(BlockCache { modulated, a1, s1 });
        }
        let last = modulate(&x, &affine(&c, p, lay.final_w, lay.final_b), hid);
        let mut logits = affine(&last.y, p, lay.head_w, lay.head_b);
        if let Some(m) = self.spec.vocab.mask_id {
            for i in 0..self.spec.seq_len {
                logits.column_mut(i * v + m as usize).fill(MASKED_LOGIT);
            }
        }
        let cache = ForwardCache { tokens, ft, fh, pre_t, pre_h, cat, pre_c, c, blocks, last };
        Ok((logits, cache))
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient at the `B x (L * |V|)` logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> Result<Vec<f64>> {
        let lay = &self.layout;
        let p = &self.params[..];
        let (hid, v, len) = (self.spec.hidden, self.spec.vocab.size, self.spec.seq_len);
        let bsz = cache.batch_size();
        if dlogits.dim() != (bsz, len * v) {
            return Err(config(format!("logit gradient has shape {:?}", dlogits.dim())));
        }
        let mut grads = vec![0.0; lay.total];
        let mut dl = dlogits.clone();
        if let Some(m) = self.spec.vocab.mask_id {
            for i in 0..len {
                dl.column_mut(i * v + m as usize).fill(0.0);
            }
        }

        mat_mut(&mut grads, lay.head_w).assign(&cache.last.y.t().dot(&dl));
        vec_mut(&mut grads, lay.head_b).assign(&dl.sum_axis(Axis(0)));
        let dy = dl.dot(&mat(p, lay.head_w).t());
        let (mut dx, dmod) = modulate_back(&cache.last, &dy);
        mat_mut(&mut grads, lay.final_w).assign(&cache.c.t().dot(&dmod));
        vec_mut(&mut grads, lay.final_b).assign(&dmod.sum_axis(Axis(0)));
        let mut dc = dmod.dot(&mat(p, lay.final_w).t());

        for (b, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            // x_next = x + fc2(silu(fc1(modulated(x))))
            mat_mut(&mut grads, b.fc2_w).assign(&bc.s1.t().dot(&dx));
            vec_mut(&mut grads, b.fc2_b).assign(&dx.sum_axis(Axis(0)));
            let da1 = silu_back(&dx.dot(&mat(p, b.fc2_w).t()), &bc.a1);
            mat_mut(&mut grads, b.fc1_w).assign(&bc.modulated.y.t().dot(&da1));
            vec_mut(&mut grads, b.fc1_b).assign(&da1.sum_axis(Axis(0)));
            let dy = da1.dot(&mat(p, b.fc1_w).t());
            let (dx_branch, dmod) = modulate_back(&bc.modulated, &dy);
            mat_mut(&mut grads, b.mod_w).assign(&cache.c.t().dot(&dmod));
            vec_mut(&mut grads, b.mod_b).assign(&dmod.sum_axis(Axis(0)));
            dc += &dmod.dot(&mat(p, b.mod_w).t());
            dx += &dx_branch;
        }

        {
            let mut de = mat_mut(&mut grads, lay.embed);
            for (row, z) in dx.rows().into_iter().zip(cache.tokens.chunks(len)) {
                for (i, &a) in z.iter().enumerate() {
                    let mut target = de.row_mut(i * v + a as usize);
                    target += &row;
                }
            }
        }
        vec_mut(&mut grads, lay.embed_b).assign(&dx.sum_axis(Axis(0)));

        let dpre_c = silu_back(&dc, &cache.pre_c);
        mat_mut(&mut grads, lay.fuse_w).assign(&cache.cat.t().dot(&dpre_c));
        vec_mut(&mut grads, lay.fuse_b).assign(&dpre_c.sum_axis(Axis(0)));
        let dcat = dpre_c.dot(&mat(p, lay.fuse_w).t());
        let c = self.spec.cond_dim;
        let dpre_t = silu_back(&dcat.slice(s![.., ..c]).to_owned(), &cache.pre_t);
        let dpre_h = silu_back(&dcat.slice(s![.., c..]).to_owned(), &cache.pre_h);
        mat_mut(&mut grads, lay.time_w).assign(&cache.ft.t().dot(&dpre_t));
        vec_mut(&mut grads, lay.time_b).assign(&dpre_t.sum_axis(Axis(0)));
        mat_mut(&mut grads, lay.step_w).assign(&cache.fh.t().dot(&dpre_h));
        vec_mut(&mut grads, lay.step_b).assign(&dpre_h.sum_axis(Axis(0)));
        debug_assert_eq!(hid, cache.last.y.ncols());
        Ok(grads)
    }

}

impl PosteriorModel for NeuralDenoiser {
    fn vocab(&self) -> Vocab {
        self.spec.vocab
    }

    fn logits(&self, z: &[Token], t: f64, h: f64) -> Result<Array2<f64>> {
        Ok(self.logits_batch(&[z], &[t], &[h])?.index_axis_move(Axis(0), 0))
    }

    fn logits_batch(&self, zs: &[&[Token]], t: &[f64], h: &[f64]) -> Result<Array3<f64>> {
        self.check_inputs(zs, t, h)?;
        let (len, v) = (self.spec.seq_len, self.spec.vocab.size);
        let mut out = Array2::zeros((zs.len(), len * v));
        for start in (0..zs.len()).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(zs.len());
            let (flat, _) = self.forward_batch(&zs[start..end], &t[start..end], &h[start..end])?;
            out.slice_mut(s![start..end, ..]).assign(&flat);
        }
        Ok(out.into_shape_with_order((zs.len(), len, v)).expect("logit shape"))
    }

    fn posterior_batch(&self, zs: &[&[Token]], t: &[f64], h: &[f64], temperature: f64) -> Result<Array3<f64>> {
        let mut out = self.logits_batch(zs, t, h)?;
        for mut l in out.outer_iter_mut() {
            let p = softmax_rows(l.view(), temperature);
            l.assign(&p);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(mask: bool) -> NeuralDenoiserSpec {
        NeuralDenoiserSpec {
            vocab: if mask { Vocab::with_mask(4) } else { Vocab::plain(5) },
            seq_len: 3,
            hidden: 6,
            depth: 2,
            frequencies: 2,
            cond_dim: 4,
        }
    }

    fn randomized(spec: NeuralDenoiserSpec, seed: u64) -> NeuralDenoiser {
        let base = NeuralDenoiser::new(spec, seed).unwrap();
        let mut rng = stream_rng(seed, 99);
        let params = base.params().iter().map(|_| rng.random_range(-0.6..0.6)).collect();
        NeuralDenoiser::from_params(spec, params).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let net = NeuralDenoiser::new(NeuralDenoiserSpec::new(Vocab::plain(7), 4), 3).unwrap();
        let l = net.logits(&[1, 2, 3, 6], 0.4, 0.25).unwrap();
        assert_eq!(l.dim(), (4, 7));
        assert!(l.iter().all(|&v| v == 0.0));

        let net = NeuralDenoiser::new(NeuralDenoiserSpec::new(Vocab::with_mask(3), 2), 3).unwrap();
        let l = net.logits(&[3, 0], 0.4, 0.25).unwrap();
        for row in l.rows() {
            assert_eq!(row.to_vec(), vec![0.0, 0.0, 0.0, MASKED_LOGIT]);
        }
    }

    #[test]
    fn forward_is_deterministic_and_step_aware() {
        let net = randomized(tiny_spec(false), 5);
        let a = net.logits(&[0, 4, 2], 0.3, 0.125).unwrap();
        let b = net.logits(&[0, 4, 2], 0.3, 0.125).unwrap();
        assert_eq!(a, b);
        let c = net.logits(&[0, 4, 2], 0.3, 0.5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let net = randomized(tiny_spec(true), 8);
        let zs: Vec<&[Token]> = vec![&[0, 4, 1], &[4, 4, 4], &[3, 2, 1]];
        let batch = net.logits_batch(&zs, &[0.1, 0.5, 0.9], &[1.0, 0.25, 0.001]).unwrap();
        for (i, z) in zs.iter().enumerate() {
            let single = net.logits(z, [0.1, 0.5, 0.9][i], [1.0, 0.25, 0.001][i]).unwrap();
            for (a, b) in single.iter().zip(batch.index_axis(Axis(0), i).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let spec = tiny_spec(false);
        assert!(matches!(
            NeuralDenoiser::from_params(spec, vec![0.0; 3]),
            Err(crate::error::Error::Config(_))
        ));
        let net = NeuralDenoiser::new(spec, 1).unwrap();
        assert!(matches!(net.logits(&[0, 1], 0.5, 0.5), Err(crate::error::Error::Config(_))));
    }

    /// Scalar loss with curvature in the logits: sum(r * l) + 0.5 * sum(l^2).
    fn probe_loss(net: &NeuralDenoiser, zs: &[&[Token]], t: &[f64], h: &[f64], r: &Array2<f64>) -> f64 {
        let (l, _) = net.forward_batch(zs, t, h).unwrap();
        let mut total = 0.0;
        for ((&li, &ri), col) in l.iter().zip(r.iter()).zip((0..l.len()).map(|k| k % l.ncols())) {
            let masked = net.spec.vocab.mask_id.is_some_and(|m| col % net.spec.vocab.size == m as usize);
            if !masked {
                total += ri * li + 0.5 * li * li;
            }
        }
        total
    }

    #[test]
    fn gradients_match_central_differences() {
        for mask in [false, true] {
            let mut net = randomized(tiny_spec(mask), 21);
            let zs: Vec<&[Token]> = vec![&[0, 3, 1], &[2, 2, 4], &[1, 0, 3]];
            let (t, h) = ([0.05, 0.6, 0.97], [1.0, 0.0625, 2f64.powi(-10)]);
            let (logits, cache) = net.forward_batch(&zs, &t, &h).unwrap();
            let mut rng = stream_rng(4, 4);
            let r = logits.mapv(|_| rng.random_range(-1.0..1.0));
            let dl = &r + &logits;
            let analytic = net.backward(&cache, &dl).unwrap();
            let eps = 1e-5;
            let mut worst: f64 = 0.0;
            for k in 0..analytic.len() {
                let orig = net.params[k];
                net.params[k] = orig + eps;
                let up = probe_loss(&net, &zs, &t, &h, &r);
                net.params[k] = orig - eps;
                let down = probe_loss(&net, &zs, &t, &h, &r);
                net.params[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let scale = analytic[k].abs().max(numeric.abs()).max(1e-7);
                worst = worst.max((analytic[k] - numeric).abs() / scale);
            }
            assert!(worst <= 1e-3, "max relative error {worst}");
        }
    }
}
