//! Convolutional feature extractors.
//!
//! A backbone maps a single-channel image to a stack of feature maps and can
//! back-propagate gradients through itself. Parameters live in a flat slice
//! owned by the model so the optimizer and checkpoints treat them uniformly.

use std::fmt::Debug;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Dense `channels x height x width` activations, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

/// Boundary between the image and the classification head.
///
/// `forward` returns one activation per layer; the last is the map that the
/// head pools. `backward` starts from the gradient of that last map and walks
/// down to `stop`, the index of the activation whose gradient is wanted
/// (`None` for the input, which is skipped). Parameter gradients are
/// accumulated into `grads` when given.
pub trait Backbone: Send + Sync + Debug {
    fn name(&self) -> &str;

    fn param_count(&self) -> usize;

    fn init_params(&self, params: &mut [f32], rng: &mut dyn rand::RngCore);

    fn out_channels(&self) -> usize;

    fn layer_names(&self) -> Vec<String>;

    fn forward(&self, params: &[f32], input: &FeatureMap) -> Vec<FeatureMap>;

    fn backward(
        &self,
        params: &[f32],
        input: &FeatureMap,
        acts: &[FeatureMap],
        grad_top: FeatureMap,
        stop: Option<usize>,
        grads: Option<&mut [f32]>,
    ) -> Option<FeatureMap>;

    /// Layer specs for checkpointing; `None` for backbones that cannot be
    /// rebuilt from a spec list.
    fn conv_specs(&self) -> Option<Vec<ConvSpec>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride,
        }
    }
}

/// Default CPU backbone: five strided convolutions with ReLU.
/// For a 299x299 input the maps are 150, 75, 38, 19 and 10 pixels wide and
/// the last layer sees a 65-pixel receptive field; 61,440 parameters.
pub const TOY_CNN: [ConvSpec; 5] = [
    ConvSpec::new(8, 5, 2),
    ConvSpec::new(16, 3, 2),
    ConvSpec::new(32, 3, 2),
    ConvSpec::new(64, 3, 2),
    ConvSpec::new(64, 3, 2),
];

#[derive(Debug, Clone)]
struct ConvLayer {
    spec: ConvSpec,
    in_channels: usize,
    pad: usize,
    w_off: usize,
    b_off: usize,
}

impl ConvLayer {
    fn patch_len(&self) -> usize {
        self.in_channels * self.spec.kernel * self.spec.kernel
    }

    fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad).saturating_sub(self.spec.kernel) / self.spec.stride + 1
    }
}

/// Stack of zero-padded strided convolutions, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvStack {
    name: String,
    layers: Vec<ConvLayer>,
    n_params: usize,
}

impl ConvStack {
    pub fn new(name: impl Into<String>, in_channels: usize, specs: &[ConvSpec]) -> Self {
        let mut layers = Vec::with_capacity(specs.len());
        let mut offset = 0;
        let mut c = in_channels;
        for spec in specs {
            assert!(spec.kernel >= 1 && spec.stride >= 1 && spec.out_channels >= 1);
            let w = spec.out_channels * c * spec.kernel * spec.kernel;
            layers.push(ConvLayer {
                spec: *spec,
                in_channels: c,
                pad: spec.kernel / 2,
                w_off: offset,
                b_off: offset + w,
            });
            offset += w + spec.out_channels;
            c = spec.out_channels;
        }
        ConvStack {
            name: name.into(),
            layers,
            n_params: offset,
        }
    }

    pub fn toy() -> Self {
        ConvStack::new("toy-cnn", 1, &TOY_CNN)
    }

    /// (weights, bias) of layer `i` as slices into `params`.
    pub fn layer_params<'p>(&self, params: &'p [f32], i: usize) -> (&'p [f32], &'p [f32]) {
        let l = &self.layers[i];
        (
            &params[l.w_off..l.b_off],
            &params[l.b_off..l.b_off + l.spec.out_channels],
        )
    }

    pub fn layer_params_mut<'p>(
        &self,
        params: &'p mut [f32],
        i: usize,
    ) -> (&'p mut [f32], &'p mut [f32]) {
        let l = &self.layers[i];
        let (w, rest) = params[l.w_off..].split_at_mut(l.b_off - l.w_off);
        (w, &mut rest[..l.spec.out_channels])
    }
}

fn im2col(layer: &ConvLayer, input: &FeatureMap, oh: usize, ow: usize) -> Vec<f32> {
    let k = layer.spec.kernel;
    let s = layer.spec.stride;
    let p = layer.pad as isize;
    let (h, w) = (input.height as isize, input.width as isize);
    let cols_n = oh * ow;
    let mut cols = vec![0.0f32; layer.patch_len() * cols_n];
    for c in 0..layer.in_channels {
        let plane = input.plane(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &plane[iy as usize * input.width..(iy as usize + 1) * input.width];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < w {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(layer: &ConvLayer, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> FeatureMap {
    let k = layer.spec.kernel;
    let s = layer.spec.stride;
    let p = layer.pad as isize;
    let cols_n = oh * ow;
    let mut out = FeatureMap::zeros(layer.in_channels, h, w);
    for c in 0..layer.in_channels {
        let plane = &mut out.data[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

impl Backbone for ConvStack {
    fn name(&self) -> &str {
        &self.name
    }

    fn param_count(&self) -> usize {
        self.n_params
    }

    fn init_params(&self, params: &mut [f32], rng: &mut dyn rand::RngCore) {
        for (i, l) in self.layers.iter().enumerate() {
            let std = (2.0 / l.patch_len() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let (w, b) = self.layer_params_mut(params, i);
            for v in w.iter_mut() {
                *v = normal.sample(rng) as f32;
            }
            b.fill(0.0);
        }
    }

    fn out_channels(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.spec.out_channels)
            .unwrap_or(1)
    }

    fn layer_names(&self) -> Vec<String> {
        (1..=self.layers.len()).map(|i| format!("conv{i}")).collect()
    }

    fn forward(&self, params: &[f32], input: &FeatureMap) -> Vec<FeatureMap> {
        let mut acts: Vec<FeatureMap> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &acts[i - 1] };
            let (oh, ow) = (l.out_dim(x.height), l.out_dim(x.width));
            let cols = im2col(l, x, oh, ow);
            let (w, b) = self.layer_params(params, i);
            let mut out = FeatureMap::zeros(l.spec.out_channels, oh, ow);
            {
                let wv = ArrayView2::from_shape((l.spec.out_channels, l.patch_len()), w)
                    .expect("weight shape");
                let cv = ArrayView2::from_shape((l.patch_len(), oh * ow), &cols).expect("cols shape");
                let mut ov = ArrayViewMut2::from_shape((l.spec.out_channels, oh * ow), &mut out.data)
                    .expect("output shape");
                general_mat_mul(1.0, &wv, &cv, 0.0, &mut ov);
            }
            let n = oh * ow;
            for (c, bias) in b.iter().enumerate() {
                for v in &mut out.data[c * n..(c + 1) * n] {
                    *v = (*v + bias).max(0.0);
                }
            }
            acts.push(out);
        }
        acts
    }

    fn backward(
        &self,
        params: &[f32],
        input: &FeatureMap,
        acts: &[FeatureMap],
        grad_top: FeatureMap,
        stop: Option<usize>,
        mut grads: Option<&mut [f32]>,
    ) -> Option<FeatureMap> {
        let mut grad = grad_top;
        for i in (0..self.layers.len()).rev() {
            if stop == Some(i) {
                return Some(grad);
            }
            let l = &self.layers[i];
            let out = &acts[i];
            let n = out.spatial();
            // through ReLU
            for (g, a) in grad.data.iter_mut().zip(&out.data) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            let x = if i == 0 { input } else { &acts[i - 1] };
            let need_input_grad = i > 0;
            let cols = if grads.is_some() || need_input_grad {
                Some(im2col(l, x, out.height, out.width))
            } else {
                None
            };
            let gv = ArrayView2::from_shape((l.spec.out_channels, n), &grad.data).expect("grad shape");
            if let (Some(g), Some(cols)) = (grads.as_deref_mut(), cols.as_ref()) {
                let cv = ArrayView2::from_shape((l.patch_len(), n), cols).expect("cols shape");
                let (dw, db) = self.layer_params_mut(g, i);
                let mut dwv = ArrayViewMut2::from_shape((l.spec.out_channels, l.patch_len()), dw)
                    .expect("dw shape");
                general_mat_mul(1.0, &gv, &cv.t(), 1.0, &mut dwv);
                for (c, d) in db.iter_mut().enumerate() {
                    *d += grad.data[c * n..(c + 1) * n].iter().sum::<f32>();
                }
            }
            if !need_input_grad {
                break;
            }
            let (w, _) = self.layer_params(params, i);
            let wv = ArrayView2::from_shape((l.spec.out_channels, l.patch_len()), w).expect("weight shape");
            let mut dcols = vec![0.0f32; l.patch_len() * n];
            {
                let mut dv = ArrayViewMut2::from_shape((l.patch_len(), n), &mut dcols).expect("dcols shape");
                general_mat_mul(1.0, &wv.t(), &gv, 0.0, &mut dv);
            }
            grad = col2im(l, &dcols, x.height, x.width, out.height, out.width);
        }
        None
    }

    fn conv_specs(&self) -> Option<Vec<ConvSpec>> {
        Some(self.layers.iter().map(|l| l.spec).collect())
    }
}
