//! Gradient-weighted class activation maps.
//!
//! Gradients are taken with respect to the node's pre-sigmoid logit so a
//! saturated prediction still yields a usable map. The target layer defaults
//! to the last backbone layer and can be chosen by name.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, ModelInput};
use crate::model::Model;
use crate::synth::GlyphBox;
use crate::taxonomy::NodeId;

/// Attention map in `[0, 1]` at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub image_id: String,
    pub node: NodeId,
    pub values: Array2<f64>,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Mean heat inside and outside a box; `None` if either region is empty.
    pub fn inside_outside(&self, b: &GlyphBox) -> Option<(f64, f64)> {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for ((y, x), v) in self.values.indexed_iter() {
            if b.contains(x, y) {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
        (ni > 0 && no > 0).then(|| (si / ni as f64, so / no as f64))
    }

    /// True when the box holds more heat on average than its surroundings.
    pub fn localizes(&self, b: &GlyphBox) -> bool {
        self.inside_outside(b).is_some_and(|(i, o)| i > o)
    }

    pub fn file_name(&self) -> String {
        format!("{}__{}.png", sanitize(&self.image_id), self.node)
    }

    pub fn to_gray(&self) -> GrayImage {
        let (h, w) = self.values.dim();
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([to_u8(self.values[[y as usize, x as usize]])])
        })
    }

    /// Heatmap blended over the model input, which is min-max scaled to gray.
    pub fn overlay(&self, input: &ModelInput) -> Result<RgbImage> {
        let px = input.pixels();
        if px.dim() != self.values.dim() {
            return Err(Error::DimensionMismatch(format!(
                "input {:?} vs heatmap {:?}",
                px.dim(),
                self.values.dim()
            )));
        }
        let lo = px.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = px.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let range = if hi > lo { hi - lo } else { 1.0 };
        let (h, w) = px.dim();
        Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let g = (px[[y, x]] as f64 - lo) / range;
            let v = self.values[[y, x]];
            let c = colormap(v);
            let a = 0.6 * v;
            Rgb([0, 1, 2].map(|k| to_u8((1.0 - a) * g + a * c[k])))
        }))
    }

    /// Writes `heatmaps/<file_name>` and `overlays/<file_name>` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, input: &ModelInput) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        let heat = dir.join("heatmaps");
        let over = dir.join("overlays");
        std::fs::create_dir_all(&heat)?;
        std::fs::create_dir_all(&over)?;
        let hp = heat.join(self.file_name());
        let op = over.join(self.file_name());
        let img_err = |e: image::ImageError| Error::Image {
            image_id: self.image_id.clone(),
            message: e.to_string(),
        };
        self.to_gray().save(&hp).map_err(img_err)?;
        self.overlay(input)?.save(&op).map_err(img_err)?;
        Ok((hp, op))
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Blue to red through green and yellow.
fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Raw GradCAM map for output `output` at backbone layer `layer`, before
/// upsampling: `ReLU(sum_k w_k A_k)` with `w_k` the spatial mean gradient.
pub fn gradcam_raw(model: &Model, input: &ModelInput, output: usize, layer: usize) -> Result<Array2<f64>> {
    let (act, grad) = model.layer_gradient(input, output, layer)?;
    let n = act.spatial();
    let mut cam = vec![0.0f64; n];
    for c in 0..act.channels {
        let g = grad.plane(c);
        let weight = g.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        if weight == 0.0 {
            continue;
        }
        for (m, a) in cam.iter_mut().zip(act.plane(c)) {
            *m += weight * *a as f64;
        }
    }
    Ok(Array2::from_shape_vec((act.height, act.width), cam.into_iter().map(|v| v.max(0.0)).collect())
        .expect("map shape"))
}

/// GradCAM for `node`, upsampled to the input size and scaled to max 1.
///
/// `outputs` are the model's output ids in column order. `layer` names a
/// backbone layer; `None` picks the last one.
pub fn gradcam(
    model: &Model,
    input: &ModelInput,
    image_id: &str,
    node: &NodeId,
    outputs: &[NodeId],
    layer: Option<&str>,
) -> Result<Heatmap> {
    let output = outputs
        .iter()
        .position(|o| o == node)
        .ok_or_else(|| Error::InvalidInput(format!("model has no output for node {node}")))?;
    let layer = match layer {
        Some(name) => model.layer_index(name)?,
        None => model
            .layer_names()
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::invalid("model has no convolutional layers"))?,
    };
    let raw = gradcam_raw(model, input, output, layer)?;
    let mut values = resize_bilinear(raw.view(), input.height(), input.width());
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    } else {
        values.fill(0.0);
    }
    Ok(Heatmap {
        image_id: image_id.to_string(),
        node: node.clone(),
        values,
    })
}
