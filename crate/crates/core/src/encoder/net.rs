//! Explicit forward pass and exact reverse-mode gradients.
//!
//! Layout conventions: batches are stored as flat `f64` buffers, image planes
//! row-major, channel-major within an item (`[item][channel][y][x]`). The
//! forward pass keeps post-ReLU activations per block so the backward pass
//! can rebuild ReLU masks without storing pre-activations.

use crate::error::{Error, Result};
use crate::imaging::{ParticleImage, IMAGE_SIDE};

use super::{EmbeddingBatch, EncoderConfig, EncoderParams, Space};

/// Gradients shaped exactly like [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub conv_w: Vec<Vec<f64>>,
    pub conv_b: Vec<Vec<f64>>,
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut in_ch = 1usize;
        for b in &config.conv_blocks {
            conv_w.push(vec![0.0; b.out_channels * in_ch * b.kernel * b.kernel]);
            conv_b.push(vec![0.0; b.out_channels]);
            in_ch = b.out_channels;
        }
        let f = config.feature_dim;
        let p = config.proj_dim;
        Self {
            conv_w,
            conv_b,
            fc1_w: vec![0.0; f * f],
            fc1_b: vec![0.0; f],
            fc2_w: vec![0.0; p * f],
            fc2_b: vec![0.0; p],
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = Vec::new();
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            t.push(w);
            t.push(b);
        }
        t.push(&self.fc1_w);
        t.push(&self.fc1_b);
        t.push(&self.fc2_w);
        t.push(&self.fc2_b);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut t: Vec<&mut Vec<f64>> = Vec::new();
        for (w, b) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            t.push(w);
            t.push(b);
        }
        t.push(&mut self.fc1_w);
        t.push(&mut self.fc1_b);
        t.push(&mut self.fc2_w);
        t.push(&mut self.fc2_b);
        t
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Every intermediate the backward pass needs.
pub(crate) struct ForwardTrace {
    pub batch: usize,
    /// Downsampled input planes, batch × input_size².
    pub input: Vec<f64>,
    /// Post-ReLU activations per block, batch × channels × side².
    pub acts: Vec<Vec<f64>>,
    /// Pooled backbone features, batch × feature_dim.
    pub features: Vec<f64>,
    /// Post-ReLU hidden layer of the projection head, batch × feature_dim.
    pub hidden: Vec<f64>,
    /// L2 norms of the pre-normalization projection rows (floored away
    /// from zero).
    pub proj_norms: Vec<f64>,
    /// Normalized projection rows, batch × proj_dim.
    pub proj: Vec<f64>,
}

/// Run the full forward pass and keep all intermediates.
pub(crate) fn trace_forward(params: &EncoderParams, images: &[ParticleImage]) -> Result<ForwardTrace> {
    if images.is_empty() {
        return Err(Error::InsufficientData("forward pass needs a non-empty batch".into()));
    }
    let cfg = &params.config;
    let batch = images.len();
    let s = cfg.input_size;

    let mut input = vec![0.0f64; batch * s * s];
    for (b, img) in images.iter().enumerate() {
        downsample_box(img, s, &mut input[b * s * s..(b + 1) * s * s]);
    }
    // Center intensities around zero; [0,1] inputs keep first-layer
    // activations one-sided and condition the whole stack poorly.
    for v in input.iter_mut() {
        *v -= 0.5;
    }

    let sizes = cfg.plane_sizes();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(cfg.conv_blocks.len());
    let mut in_ch = 1usize;
    {
        let mut current: &[f64] = &input;
        for (li, block) in cfg.conv_blocks.iter().enumerate() {
            let in_side = sizes[li];
            let out_side = sizes[li + 1];
            let mut out = vec![0.0f64; batch * block.out_channels * out_side * out_side];
            conv_forward(
                current,
                &mut out,
                &params.conv_w[li],
                &params.conv_b[li],
                batch,
                in_ch,
                in_side,
                block.out_channels,
                out_side,
                block.kernel,
                block.stride,
            );
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            acts.push(out);
            current = acts.last().unwrap();
            in_ch = block.out_channels;
        }
    }

    // Global average pooling.
    let f = cfg.feature_dim;
    let last_side = *sizes.last().unwrap();
    let plane = last_side * last_side;
    let last = acts.last().unwrap();
    let mut features = vec![0.0f64; batch * f];
    for b in 0..batch {
        for c in 0..f {
            let off = (b * f + c) * plane;
            let sum: f64 = last[off..off + plane].iter().sum();
            features[b * f + c] = sum / plane as f64;
        }
    }

    // Projection head: fc1 + ReLU, fc2, L2 normalization.
    let p = cfg.proj_dim;
    let mut hidden = vec![0.0f64; batch * f];
    for b in 0..batch {
        let x = &features[b * f..(b + 1) * f];
        for o in 0..f {
            let row = &params.fc1_w[o * f..(o + 1) * f];
            let mut acc = params.fc1_b[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            hidden[b * f + o] = acc.max(0.0);
        }
    }
    let mut proj = vec![0.0f64; batch * p];
    for b in 0..batch {
        let h = &hidden[b * f..(b + 1) * f];
        for o in 0..p {
            let row = &params.fc2_w[o * f..(o + 1) * f];
            let mut acc = params.fc2_b[o];
            for (w, hi) in row.iter().zip(h) {
                acc += w * hi;
            }
            proj[b * p + o] = acc;
        }
    }
    let mut proj_norms = vec![0.0f64; batch];
    for b in 0..batch {
        let row = &mut proj[b * p..(b + 1) * p];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
        for v in row.iter_mut() {
            *v /= norm;
        }
        proj_norms[b] = norm;
    }

    Ok(ForwardTrace {
        batch,
        input,
        acts,
        features,
        hidden,
        proj_norms,
        proj,
    })
}

/// Forward pass returning embeddings in the requested space.
pub fn forward(params: &EncoderParams, images: &[ParticleImage], space: Space) -> Result<EmbeddingBatch> {
    params.config.validate()?;
    let trace = trace_forward(params, images)?;
    if space == Space::Projection {
        // A projection row can only be exactly zero when every hidden unit
        // is dead and the output bias is zero; normalization is undefined
        // there and the caller should hear about it rather than get NaNs.
        for (i, &n) in trace.proj_norms.iter().enumerate() {
            if n < 1e-15 {
                return Err(Error::NonFinite(format!(
                    "projection row {i} is the zero vector; L2 normalization undefined"
                )));
            }
        }
    }
    trace.embeddings(&params.config, space)
}

impl ForwardTrace {
    pub(crate) fn embeddings(&self, cfg: &EncoderConfig, space: Space) -> Result<EmbeddingBatch> {
        match space {
            Space::Backbone => EmbeddingBatch::new(
                self.features.clone(),
                self.batch,
                cfg.feature_dim,
                space,
                false,
            ),
            Space::Projection => EmbeddingBatch::new(
                self.proj.clone(),
                self.batch,
                cfg.proj_dim,
                space,
                true,
            ),
        }
    }
}

/// Exact reverse-mode gradients of the forward map with respect to every
/// parameter tensor, given the upstream gradient on the output of `space`.
pub fn backward(
    params: &EncoderParams,
    images: &[ParticleImage],
    upstream: &[f64],
    space: Space,
) -> Result<EncoderGrads> {
    params.config.validate()?;
    let trace = trace_forward(params, images)?;
    trace_backward(params, &trace, upstream, space)
}

/// Backward pass from a stored trace. `upstream` must be batch × (output dim
/// of `space`), finite.
pub(crate) fn trace_backward(
    params: &EncoderParams,
    trace: &ForwardTrace,
    upstream: &[f64],
    space: Space,
) -> Result<EncoderGrads> {
    let cfg = &params.config;
    let batch = trace.batch;
    let f = cfg.feature_dim;
    let p = cfg.proj_dim;

    let expected = match space {
        Space::Backbone => batch * f,
        Space::Projection => batch * p,
    };
    if upstream.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} values, expected {expected}",
            upstream.len()
        )));
    }
    if upstream.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("upstream gradient".into()));
    }

    let mut grads = EncoderGrads::zeros(cfg);
    let mut g_features = vec![0.0f64; batch * f];

    match space {
        Space::Backbone => g_features.copy_from_slice(upstream),
        Space::Projection => {
            // Through L2 normalization: dL/du = (g - (g·y) y) / ||u||.
            let mut g_proj_raw = vec![0.0f64; batch * p];
            for b in 0..batch {
                let y = &trace.proj[b * p..(b + 1) * p];
                let g = &upstream[b * p..(b + 1) * p];
                let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                let inv = 1.0 / trace.proj_norms[b];
                for o in 0..p {
                    g_proj_raw[b * p + o] = (g[o] - dot * y[o]) * inv;
                }
            }
            // fc2: u = W2 h + b2.
            let mut g_hidden = vec![0.0f64; batch * f];
            for b in 0..batch {
                let h = &trace.hidden[b * f..(b + 1) * f];
                let gu = &g_proj_raw[b * p..(b + 1) * p];
                for o in 0..p {
                    let g = gu[o];
                    grads.fc2_b[o] += g;
                    let wrow = &params.fc2_w[o * f..(o + 1) * f];
                    let grow = &mut grads.fc2_w[o * f..(o + 1) * f];
                    for i in 0..f {
                        grow[i] += g * h[i];
                        g_hidden[b * f + i] += g * wrow[i];
                    }
                }
            }
            // fc1 + ReLU: h = relu(W1 x + b1).
            for b in 0..batch {
                let x = &trace.features[b * f..(b + 1) * f];
                for o in 0..f {
                    if trace.hidden[b * f + o] <= 0.0 {
                        continue;
                    }
                    let g = g_hidden[b * f + o];
                    grads.fc1_b[o] += g;
                    let wrow = &params.fc1_w[o * f..(o + 1) * f];
                    let grow = &mut grads.fc1_w[o * f..(o + 1) * f];
                    for i in 0..f {
                        grow[i] += g * x[i];
                        g_features[b * f + i] += g * wrow[i];
                    }
                }
            }
        }
    }

    // Global average pooling backprop into the last activation plane.
    let sizes = cfg.plane_sizes();
    let last_side = *sizes.last().unwrap();
    let plane = last_side * last_side;
    let mut g_act = vec![0.0f64; batch * f * plane];
    for b in 0..batch {
        for c in 0..f {
            let g = g_features[b * f + c] / plane as f64;
            let off = (b * f + c) * plane;
            for v in g_act[off..off + plane].iter_mut() {
                *v = g;
            }
        }
    }

    // Conv blocks in reverse.
    for li in (0..cfg.conv_blocks.len()).rev() {
        let block = &cfg.conv_blocks[li];
        let in_side = sizes[li];
        let out_side = sizes[li + 1];
        let in_ch = if li == 0 { 1 } else { cfg.conv_blocks[li - 1].out_channels };
        let input: &[f64] = if li == 0 { &trace.input } else { &trace.acts[li - 1] };

        // ReLU mask on this block's output.
        let act = &trace.acts[li];
        for (g, &a) in g_act.iter_mut().zip(act.iter()) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }

        let mut g_input = vec![0.0f64; batch * in_ch * in_side * in_side];
        conv_backward(
            input,
            &g_act,
            &params.conv_w[li],
            &mut grads.conv_w[li],
            &mut grads.conv_b[li],
            &mut g_input,
            batch,
            in_ch,
            in_side,
            block.out_channels,
            out_side,
            block.kernel,
            block.stride,
        );
        g_act = g_input;
    }

    Ok(grads)
}

/// Box-filter downsample of a 200×200 image onto an s×s grid with exact
/// fractional-area weights.
pub(crate) fn downsample_box(img: &ParticleImage, s: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), s * s);
    if s == IMAGE_SIDE {
        for (o, &p) in out.iter_mut().zip(img.pixels()) {
            *o = p as f64;
        }
        return;
    }
    let ratio = IMAGE_SIDE as f64 / s as f64;
    // Per-axis spans: (first source index, weights).
    let mut spans: Vec<(usize, Vec<f64>)> = Vec::with_capacity(s);
    for o in 0..s {
        let start = o as f64 * ratio;
        let end = (o as f64 + 1.0) * ratio;
        let first = start.floor() as usize;
        let last = (end.ceil() as usize).min(IMAGE_SIDE);
        let mut weights = Vec::with_capacity(last - first);
        for i in first..last {
            let lo = (i as f64).max(start);
            let hi = ((i + 1) as f64).min(end);
            weights.push((hi - lo).max(0.0));
        }
        spans.push((first, weights));
    }
    let inv_area = 1.0 / (ratio * ratio);
    let px = img.pixels();
    for oy in 0..s {
        let (y0, wy) = &spans[oy];
        for ox in 0..s {
            let (x0, wx) = &spans[ox];
            let mut acc = 0.0f64;
            for (dy, wyv) in wy.iter().enumerate() {
                let row = (y0 + dy) * IMAGE_SIDE;
                let mut racc = 0.0f64;
                for (dx, wxv) in wx.iter().enumerate() {
                    racc += wxv * px[row + x0 + dx] as f64;
                }
                acc += wyv * racc;
            }
            out[oy * s + ox] = acc * inv_area;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    output: &mut [f64],
    weights: &[f64],
    biases: &[f64],
    batch: usize,
    in_ch: usize,
    in_side: usize,
    out_ch: usize,
    out_side: usize,
    kernel: usize,
    stride: usize,
) {
    let pad = kernel / 2;
    let in_plane = in_side * in_side;
    let out_plane = out_side * out_side;
    for b in 0..batch {
        let in_base = b * in_ch * in_plane;
        let out_base = b * out_ch * out_plane;
        for oc in 0..out_ch {
            let out_off = out_base + oc * out_plane;
            output[out_off..out_off + out_plane].fill(biases[oc]);
            for ic in 0..in_ch {
                let in_off = in_base + ic * in_plane;
                let w_off = (oc * in_ch + ic) * kernel * kernel;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let w = weights[w_off + ky * kernel + kx];
                        if w == 0.0 {
                            continue;
                        }
                        // Valid output ranges for this kernel tap.
                        let (oy0, oy1) = tap_range(out_side, in_side, ky, pad, stride);
                        let (ox0, ox1) = tap_range(out_side, in_side, kx, pad, stride);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let in_row = in_off + iy * in_side;
                            let out_row = out_off + oy * out_side;
                            for ox in ox0..ox1 {
                                let ix = ox * stride + kx - pad;
                                output[out_row + ox] += w * input[in_row + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output index range [o0, o1) for which `o*stride + k - pad` lands inside
/// [0, in_side).
#[inline]
fn tap_range(out_side: usize, in_side: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    // o*stride + k - pad >= 0  =>  o >= ceil((pad - k) / stride)
    let o0 = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o*stride + k - pad <= in_side - 1  =>  o <= (in_side - 1 + pad - k) / stride
    let upper = in_side - 1 + pad;
    let o1 = if upper < k { 0 } else { ((upper - k) / stride + 1).min(out_side) };
    (o0.min(o1), o1)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    g_output: &[f64],
    weights: &[f64],
    g_weights: &mut [f64],
    g_biases: &mut [f64],
    g_input: &mut [f64],
    batch: usize,
    in_ch: usize,
    in_side: usize,
    out_ch: usize,
    out_side: usize,
    kernel: usize,
    stride: usize,
) {
    let pad = kernel / 2;
    let in_plane = in_side * in_side;
    let out_plane = out_side * out_side;
    for b in 0..batch {
        let in_base = b * in_ch * in_plane;
        let out_base = b * out_ch * out_plane;
        for oc in 0..out_ch {
            let out_off = out_base + oc * out_plane;
            let g_out = &g_output[out_off..out_off + out_plane];
            g_biases[oc] += g_out.iter().sum::<f64>();
            for ic in 0..in_ch {
                let in_off = in_base + ic * in_plane;
                let w_off = (oc * in_ch + ic) * kernel * kernel;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let w = weights[w_off + ky * kernel + kx];
                        let mut gw = 0.0f64;
                        let (oy0, oy1) = tap_range(out_side, in_side, ky, pad, stride);
                        let (ox0, ox1) = tap_range(out_side, in_side, kx, pad, stride);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let in_row = in_off + iy * in_side;
                            let out_row = oy * out_side;
                            for ox in ox0..ox1 {
                                let ix = ox * stride + kx - pad;
                                let g = g_out[out_row + ox];
                                gw += g * input[in_row + ix];
                                g_input[in_row + ix] += g * w;
                            }
                        }
                        g_weights[w_off + ky * kernel + kx] += gw;
                    }
                }
            }
        }
    }
}
