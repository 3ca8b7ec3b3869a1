//! Direct 2d convolution kernels. Shapes here are tiny (16x16 frames, a
//! handful of channels), so plain loops over contiguous channel slices beat
//! anything clever.

use super::Tensor;

fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

pub fn forward(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, h, w, cin) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (kh, kw, _, cout) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    let (oh, ow) = (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad));
    let mut out = vec![0.0; b * oh * ow * cout];
    for bi in 0..b {
        for oi in 0..oh {
            for oj in 0..ow {
                let acc = &mut out[((bi * oh + oi) * ow + oj) * cout..][..cout];
                for ki in 0..kh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let px = &x.data[((bi * h + ii as usize) * w + jj as usize) * cin..][..cin];
                        let krow = &kernel.data[((ki * kw + kj) * cin) * cout..][..cin * cout];
                        for (ci, &xv) in px.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let kslice = &krow[ci * cout..(ci + 1) * cout];
                            for (a, &kv) in acc.iter_mut().zip(kslice) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, cout], out)
}

pub fn backward_input(
    x_shape: &[usize],
    kernel: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (b, h, w, cin) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (kh, kw, cout) = (kernel.shape[0], kernel.shape[1], kernel.shape[3]);
    let (oh, ow) = (gy.shape[1], gy.shape[2]);
    let mut dx = vec![0.0; b * h * w * cin];
    for bi in 0..b {
        for oi in 0..oh {
            for oj in 0..ow {
                let grow = &gy.data[((bi * oh + oi) * ow + oj) * cout..][..cout];
                for ki in 0..kh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let dpx =
                            &mut dx[((bi * h + ii as usize) * w + jj as usize) * cin..][..cin];
                        let krow = &kernel.data[((ki * kw + kj) * cin) * cout..][..cin * cout];
                        for (ci, d) in dpx.iter_mut().enumerate() {
                            let kslice = &krow[ci * cout..(ci + 1) * cout];
                            let mut acc = 0.0;
                            for (&g, &kv) in grow.iter().zip(kslice) {
                                acc += g * kv;
                            }
                            *d += acc;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn backward_kernel(
    x: &Tensor,
    kernel_shape: &[usize],
    gy: &Tensor,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (b, h, w, cin) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (kh, kw, cout) = (kernel_shape[0], kernel_shape[1], kernel_shape[3]);
    let (oh, ow) = (gy.shape[1], gy.shape[2]);
    let mut dk = vec![0.0; kh * kw * cin * cout];
    for bi in 0..b {
        for oi in 0..oh {
            for oj in 0..ow {
                let grow = &gy.data[((bi * oh + oi) * ow + oj) * cout..][..cout];
                for ki in 0..kh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let px = &x.data[((bi * h + ii as usize) * w + jj as usize) * cin..][..cin];
                        let drow = &mut dk[((ki * kw + kj) * cin) * cout..][..cin * cout];
                        for (ci, &xv) in px.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let dslice = &mut drow[ci * cout..(ci + 1) * cout];
                            for (d, &g) in dslice.iter_mut().zip(grow) {
                                *d += xv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}
