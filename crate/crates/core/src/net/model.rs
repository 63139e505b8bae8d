//! Encoder-decoder network as an ordered layer list.
//!
//! `Down` stashes its input on a skip stack before pooling; `Up` upsamples and
//! concatenates the most recent stashed activation. The final layer is a
//! convolution to three channels followed by an implicit per-pixel softmax.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::tensor::{Real, Tensor4};
use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, Category, GridSpec, LabelGrid};
use crate::lovasz::ProbMap;

pub const OUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(ConvParams<T>),
    Relu,
    Down,
    Up,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccNet<T> {
    pub layers: Vec<Layer<T>>,
    pub widths: Vec<usize>,
    pub seed: u64,
}

/// Per-convolution gradients (or velocities), in layer order.
pub type ParamSet<T> = Vec<ConvParams<T>>;

impl<T: Real> OccNet<T> {
    /// Builds the layer list for `widths` (one pooling stage per width after
    /// the first) and draws fan-in scaled uniform weights from `seed`.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("invalid channel widths {widths:?}")));
        }
        let depth = widths.len() - 1;
        let mut layers = Vec::new();
        let conv = |layers: &mut Vec<Layer<T>>, i: usize, o: usize, relu: bool| {
            layers.push(Layer::Conv(ConvParams::zeros(i, o)));
            if relu {
                layers.push(Layer::Relu);
            }
        };
        let mut c = 1;
        for &w in &widths[..depth] {
            conv(&mut layers, c, w, true);
            conv(&mut layers, w, w, true);
            layers.push(Layer::Down);
            c = w;
        }
        conv(&mut layers, c, widths[depth], true);
        conv(&mut layers, widths[depth], widths[depth], true);
        c = widths[depth];
        for &w in widths[..depth].iter().rev() {
            layers.push(Layer::Up);
            conv(&mut layers, c + w, w, true);
            conv(&mut layers, w, w, true);
            c = w;
        }
        conv(&mut layers, c, OUT_CHANNELS, false);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut layers {
            if let Layer::Conv(p) = layer {
                let bound = (6.0 / (9 * p.in_ch) as f64).sqrt();
                for w in &mut p.weight {
                    *w = T::of(rng.gen_range(-bound..bound));
                }
            }
        }
        let net = Self {
            layers,
            widths: widths.to_vec(),
            seed,
        };
        net.validate()?;
        Ok(net)
    }

    /// Number of pooling stages.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Down)).count()
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvParams<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(p) => Some(p),
            _ => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut ConvParams<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(p) => Some(p),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.convs().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet<T> {
        self.convs().map(|p| ConvParams::zeros(p.in_ch, p.out_ch)).collect()
    }

    /// Checks channel flow, skip wiring and the 3-channel head.
    pub fn validate(&self) -> Result<()> {
        let mut c = 1;
        let mut skips = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(p) => {
                    if p.in_ch != c || p.weight.len() != p.in_ch * p.out_ch * 9 || p.bias.len() != p.out_ch {
                        return Err(Error::Shape(format!("layer {i}: convolution does not fit {c} input channels")));
                    }
                    c = p.out_ch;
                }
                Layer::Relu => {}
                Layer::Down => skips.push(c),
                Layer::Up => {
                    let s = skips
                        .pop()
                        .ok_or_else(|| Error::Shape(format!("layer {i}: upsample without a matching downsample")))?;
                    c += s;
                }
            }
        }
        if !skips.is_empty() {
            return Err(Error::Shape("decoder does not mirror encoder".into()));
        }
        match self.layers.last() {
            Some(Layer::Conv(p)) if p.out_ch == OUT_CHANNELS => Ok(()),
            _ => Err(Error::Shape(format!("network must end in a {OUT_CHANNELS}-channel convolution"))),
        }
    }

    pub fn cast<U: Real>(&self) -> OccNet<U> {
        OccNet {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(p) => Layer::Conv(p.cast()),
                    Layer::Relu => Layer::Relu,
                    Layer::Down => Layer::Down,
                    Layer::Up => Layer::Up,
                })
                .collect(),
            widths: self.widths.clone(),
            seed: self.seed,
        }
    }

    /// Runs the network on an already padded batch, recording what backward needs.
    pub fn forward_tape(&self, x: Tensor4<T>) -> Result<Tape<T>> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pool_args = Vec::new();
        let mut skip_channels = Vec::new();
        let mut skips: Vec<usize> = Vec::new();
        let mut cur = x;
        for layer in &self.layers {
            let next = match layer {
                Layer::Conv(p) => conv3x3_forward(&cur, p)?,
                Layer::Relu => relu_forward(&cur),
                Layer::Down => {
                    skips.push(inputs.len());
                    let (y, arg) = maxpool2x2_forward(&cur)?;
                    pool_args.push(arg);
                    y
                }
                Layer::Up => {
                    let src = skips.pop().ok_or_else(|| Error::Shape("unbalanced skip wiring".into()))?;
                    skip_channels.push(cur.channels());
                    let up = upsample2x_forward(&cur);
                    concat_channels(&up, &inputs[src])?
                }
            };
            inputs.push(cur);
            cur = next;
        }
        let probs = softmax_channels(&cur);
        Ok(Tape {
            inputs,
            pool_args,
            skip_channels,
            probs,
        })
    }

    /// Parameter gradients given d loss / d probabilities for a taped forward.
    pub fn backward(&self, tape: &Tape<T>, grad_probs: &Tensor4<T>) -> Result<ParamSet<T>> {
        let mut grads: Vec<ConvParams<T>> = Vec::new();
        let mut g = softmax_backward(&tape.probs, grad_probs);
        let mut pool_i = tape.pool_args.len();
        let mut up_i = tape.skip_channels.len();
        let mut skip_grads: Vec<Tensor4<T>> = Vec::new();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.inputs[li];
            g = match layer {
                Layer::Conv(p) => {
                    let cg = conv3x3_backward(x, p, &g, li > 0)?;
                    grads.push(ConvParams {
                        in_ch: p.in_ch,
                        out_ch: p.out_ch,
                        weight: cg.weight,
                        bias: cg.bias,
                    });
                    cg.input
                }
                Layer::Relu => relu_backward(x, &g),
                Layer::Up => {
                    up_i -= 1;
                    let (g_up, g_skip) = concat_backward(&g, tape.skip_channels[up_i]);
                    skip_grads.push(g_skip);
                    upsample2x_backward(&g_up)
                }
                Layer::Down => {
                    pool_i -= 1;
                    let mut gx = maxpool2x2_backward(x.shape, &tape.pool_args[pool_i], &g);
                    let gs = skip_grads.pop().ok_or_else(|| Error::Shape("unbalanced skip wiring".into()))?;
                    gx.add_assign(&gs);
                    gx
                }
            };
        }
        grads.reverse();
        Ok(grads)
    }

    /// Class probabilities for a batch of equally sized binary inputs.
    pub fn forward_batch(&self, spec: &GridSpec, inputs: &[&BinaryGrid]) -> Result<Vec<ProbMap>> {
        let x = pad_batch::<T>(spec, inputs, self.depth())?;
        let tape = self.forward_tape(x)?;
        Ok(crop_probs(spec, &tape.probs))
    }

    pub fn forward(&self, spec: &GridSpec, input: &BinaryGrid) -> Result<ProbMap> {
        Ok(self.forward_batch(spec, &[input])?.remove(0))
    }

    /// Per-cell argmax; exact ties resolve to the lowest class index.
    pub fn infer(&self, spec: &GridSpec, input: &BinaryGrid) -> Result<LabelGrid> {
        Ok(argmax_labels(&self.forward(spec, input)?))
    }
}

pub fn argmax_labels(probs: &ProbMap) -> LabelGrid {
    let cells = probs.probs.iter().map(|p| Category::from_class_index(argmax3(p))).collect();
    LabelGrid::from_cells(probs.spec, cells).expect("probability map matches its spec")
}

pub(crate) fn argmax3(p: &[f64; 3]) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if p[k] > p[best] {
            best = k;
        }
    }
    best
}

/// Activations recorded by [`OccNet::forward_tape`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    /// Input of every layer, in layer order.
    pub inputs: Vec<Tensor4<T>>,
    pub pool_args: Vec<Vec<u32>>,
    /// Channels of the upsampled half of each concatenation.
    pub skip_channels: Vec<usize>,
    pub probs: Tensor4<T>,
}

impl<T: Real> Tape<T> {
    /// Sign pattern of every ReLU input and every pooling argmax. Two inputs
    /// with equal signatures lie in the same piecewise-smooth region.
    pub fn signature(&self, layers: &[Layer<T>]) -> (Vec<bool>, Vec<u32>) {
        let mut relu = Vec::new();
        for (l, x) in layers.iter().zip(&self.inputs) {
            if matches!(l, Layer::Relu) {
                relu.extend(x.data.iter().map(|&v| v > T::zero()));
            }
        }
        (relu, self.pool_args.concat())
    }
}

/// Smallest multiple of `m` that is at least `n`.
pub fn padded_len(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Packs binary grids into a 1-channel batch, reflect-padded at the far edges
/// to a multiple of `2^depth`.
pub fn pad_batch<T: Real>(spec: &GridSpec, inputs: &[&BinaryGrid], depth: usize) -> Result<Tensor4<T>> {
    let m = 1usize << depth;
    let (h, w) = (spec.height, spec.width);
    let (ph, pw) = (padded_len(h, m), padded_len(w, m));
    let mut x = Tensor4::zeros([inputs.len(), 1, ph, pw]);
    for (b, grid) in inputs.iter().enumerate() {
        if !grid.fits(spec) {
            return Err(Error::Shape(format!(
                "input grid {}x{} does not match spec {h}x{w}",
                grid.height, grid.width
            )));
        }
        let plane = x.plane_mut(b, 0);
        for u in 0..ph {
            for v in 0..pw {
                if *grid.get(reflect(u, h), reflect(v, w)) {
                    plane[u * pw + v] = T::one();
                }
            }
        }
    }
    Ok(x)
}

/// Crops a padded probability batch back to `spec`.
pub fn crop_probs<T: Real>(spec: &GridSpec, probs: &Tensor4<T>) -> Vec<ProbMap> {
    let [n, _, _, pw] = probs.shape;
    (0..n)
        .map(|b| {
            let planes = [probs.plane(b, 0), probs.plane(b, 1), probs.plane(b, 2)];
            let cells = (0..spec.height)
                .flat_map(|u| (0..spec.width).map(move |v| u * pw + v))
                .map(|i| [planes[0][i].f64(), planes[1][i].f64(), planes[2][i].f64()])
                .collect();
            ProbMap {
                spec: *spec,
                probs: cells,
            }
        })
        .collect()
}

/// Embeds per-cell gradients for the unpadded region into a padded batch tensor.
pub fn pad_grads<T: Real>(spec: &GridSpec, grads: &[Vec<[f64; 3]>], padded: [usize; 4]) -> Tensor4<T> {
    let mut g = Tensor4::zeros(padded);
    let pw = padded[3];
    for (b, cells) in grads.iter().enumerate() {
        for k in 0..OUT_CHANNELS {
            let plane = g.plane_mut(b, k);
            for u in 0..spec.height {
                for v in 0..spec.width {
                    plane[u * pw + v] = T::of(cells[u * spec.width + v][k]);
                }
            }
        }
    }
    g
}
