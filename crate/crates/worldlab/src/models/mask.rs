//! Loss masks restrict which pixels the image term scores, either by
//! cropping to a centered square or by area-averaging down to a coarser
//! grid. Models still see full frames; only the loss narrows.

use crate::tensor::Tensor;

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMaskSpec {
    None,
    /// Keep a centered square covering this fraction of each side.
    Crop(f64),
    /// Downsample to a square grid covering this fraction of each side.
    Resize(f64),
}

impl LossMaskSpec {
    pub fn parse(kind: &str, fraction: f64) -> Result<Self, ModelError> {
        match kind {
            "none" => Ok(Self::None),
            "crop" => Ok(Self::Crop(fraction)),
            "resize" => Ok(Self::Resize(fraction)),
            other => Err(ModelError::UnknownDesign(format!("loss mask `{other}`"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Crop(_) => "crop",
            Self::Resize(_) => "resize",
        }
    }
}

pub(crate) fn crop_side(fraction: f64, image_size: usize) -> Result<usize, ModelError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ModelError::InvalidMaskFraction(fraction));
    }
    Ok(((fraction * image_size as f64).round() as usize).clamp(1, image_size))
}

/// Apply a mask spec to a single `[H, W, C]` frame. Returns the masked
/// target and a `[H, W, 1]` weight map with ones over the scored region of
/// the original frame.
pub fn apply_loss_mask(
    frame: &Tensor,
    mask: &LossMaskSpec,
) -> Result<(Tensor, Tensor), ModelError> {
    assert_eq!(frame.shape.len(), 3, "expected a single [H, W, C] frame");
    let (h, w, c) = (frame.shape[0], frame.shape[1], frame.shape[2]);
    assert_eq!(h, w, "frames are square");
    match mask {
        LossMaskSpec::None => Ok((
            frame.clone(),
            Tensor::full(vec![h, w, 1], 1.0),
        )),
        LossMaskSpec::Crop(f) => {
            let side = crop_side(*f, h)?;
            let off = (h - side) / 2;
            let mut out = Vec::with_capacity(side * side * c);
            let mut weights = vec![0.0; h * w];
            for y in 0..side {
                for x in 0..side {
                    let (sy, sx) = (y + off, x + off);
                    weights[sy * w + sx] = 1.0;
                    let base = (sy * w + sx) * c;
                    out.extend_from_slice(&frame.data[base..base + c]);
                }
            }
            Ok((
                Tensor::new(vec![side, side, c], out),
                Tensor::new(vec![h, w, 1], weights),
            ))
        }
        LossMaskSpec::Resize(f) => {
            let side = crop_side(*f, h)?;
            Ok((
                area_average(frame, side),
                Tensor::full(vec![h, w, 1], 1.0),
            ))
        }
    }
}

/// Area-average a `[H, W, C]` frame down to `[side, side, C]`. Each output
/// cell averages the source pixels its footprint overlaps, weighted by
/// overlap, so any side shrink is exact.
pub fn area_average(frame: &Tensor, side: usize) -> Tensor {
    let (h, w, c) = (frame.shape[0], frame.shape[1], frame.shape[2]);
    let (sy, sx) = (h as f64 / side as f64, w as f64 / side as f64);
    let mut out = vec![0.0; side * side * c];
    for oy in 0..side {
        let y_lo = oy as f64 * sy;
        let y_hi = y_lo + sy;
        for ox in 0..side {
            let x_lo = ox as f64 * sx;
            let x_hi = x_lo + sx;
            let mut acc = vec![0.0; c];
            let mut total = 0.0;
            for y in y_lo.floor() as usize..(y_hi.ceil() as usize).min(h) {
                let wy = (y_hi.min(y as f64 + 1.0) - y_lo.max(y as f64)).max(0.0);
                for x in x_lo.floor() as usize..(x_hi.ceil() as usize).min(w) {
                    let wx = (x_hi.min(x as f64 + 1.0) - x_lo.max(x as f64)).max(0.0);
                    let weight = wy * wx;
                    total += weight;
                    let base = (y * w + x) * c;
                    for ch in 0..c {
                        acc[ch] += weight * frame.data[base + ch];
                    }
                }
            }
            let base = (oy * side + ox) * c;
            for ch in 0..c {
                out[base + ch] = acc[ch] / total;
            }
        }
    }
    Tensor::new(vec![side, side, c], out)
}
