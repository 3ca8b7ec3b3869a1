//! Flat-shaded rasterizer. Shapes are drawn by per-pixel containment tests
//! with no anti-aliasing, so identical states always produce identical bits
//! and shapes clip for free at the image border.

use crate::tensor::Tensor;

use super::{EnvState, Task};

const BG: [f64; 3] = [0.08, 0.08, 0.10];

struct Canvas {
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&BG);
        }
        Self { size, data }
    }

    fn put(&mut self, row: usize, col: usize, color: [f64; 3]) {
        let o = (row * self.size + col) * 3;
        self.data[o..o + 3].copy_from_slice(&color);
    }

    /// Disc centered at (cx, cy) in pixel units, y growing downward.
    fn disc(&mut self, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
        for row in 0..self.size {
            for col in 0..self.size {
                let dx = col as f64 + 0.5 - cx;
                let dy = row as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r * r {
                    self.put(row, col, color);
                }
            }
        }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [f64; 3]) {
        for row in 0..self.size {
            for col in 0..self.size {
                let px = col as f64 + 0.5;
                let py = row as f64 + 0.5;
                if px >= x0 && px <= x1 && py >= y0 && py <= y1 {
                    self.put(row, col, color);
                }
            }
        }
    }

    /// Thick segment from (x0, y0) along (dx, dy), unit direction expected.
    fn rod(&mut self, x0: f64, y0: f64, dx: f64, dy: f64, len: f64, half_w: f64, color: [f64; 3]) {
        for row in 0..self.size {
            for col in 0..self.size {
                let px = col as f64 + 0.5 - x0;
                let py = row as f64 + 0.5 - y0;
                let t = (px * dx + py * dy).clamp(0.0, len);
                let rx = px - t * dx;
                let ry = py - t * dy;
                if rx * rx + ry * ry <= half_w * half_w {
                    self.put(row, col, color);
                }
            }
        }
    }
}

pub fn rasterize(state: &EnvState, size: usize) -> Tensor {
    let s = size as f64;
    let mut c = Canvas::new(size);
    match state.task {
        Task::PendulumSwingup => {
            let theta = state.phys[0];
            let (cx, cy) = (s / 2.0, s / 2.0);
            let (dx, dy) = (theta.sin(), -theta.cos());
            let len = 0.38 * s;
            c.rod(cx, cy, dx, dy, len, 0.06 * s, [0.75, 0.75, 0.78]);
            c.disc(cx + dx * len, cy + dy * len, 0.10 * s, [0.95, 0.35, 0.25]);
            c.disc(cx, cy, 0.05 * s, [0.50, 0.50, 0.55]);
        }
        Task::PointReacherSparse => {
            let (px, py) = (state.phys[0] * s, state.phys[1] * s);
            let (tx, ty) = (state.phys[4] * s, state.phys[5] * s);
            let half = 0.10 * s;
            c.rect(tx - half, ty - half, tx + half, ty + half, [0.30, 0.85, 0.35]);
            c.disc(px, py, 0.09 * s, [0.95, 0.60, 0.20]);
        }
        Task::CartpoleBalance => {
            // viewport shows world x in [-1.25, 1.25]; the cart's reachable
            // range is wider, so it can leave the picture entirely
            let to_px = |x: f64| (x + 1.25) / 2.5 * s;
            c.rect(0.0, 0.78 * s, s, 0.82 * s, [0.30, 0.30, 0.35]);
            let cart_x = to_px(state.phys[0]);
            let cart_y = 0.75 * s;
            c.rect(
                cart_x - 0.09 * s,
                cart_y - 0.05 * s,
                cart_x + 0.09 * s,
                cart_y + 0.05 * s,
                [0.20, 0.55, 0.90],
            );
            let theta = state.phys[2];
            c.rod(
                cart_x,
                cart_y - 0.05 * s,
                theta.sin(),
                -theta.cos(),
                0.30 * s,
                0.05 * s,
                [0.95, 0.80, 0.30],
            );
        }
    }
    Tensor::new(vec![size, size, 3], c.data)
}
