//! Reference implementations the criteria are checked against. None of them
//! call into the library's convolution, selection or FLOPs code.

use std::cell::Cell;

use ssprop_core::{ConvLayer, Tensor4};

/// Direct loop convolution with explicit bounds checks.
pub fn naive_forward(layer: &ConvLayer<f64>, x: &Tensor4<f64>) -> (Vec<f64>, [usize; 4]) {
    let [bt, cin, h, w] = x.dims();
    let g = layer.geometry();
    let cout = layer.out_channels();
    let ho = (h + 2 * g.padding - g.kernel) / g.stride + 1;
    let wo = (w + 2 * g.padding - g.kernel) / g.stride + 1;
    let wt = layer.weights();
    let mut y = vec![0.0; bt * cout * ho * wo];
    for b in 0..bt {
        for q in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = layer.bias()[q];
                    for c in 0..cin {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let r = (i * g.stride + ki) as isize - g.padding as isize;
                                let s = (j * g.stride + kj) as isize - g.padding as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                    continue;
                                }
                                acc += wt.get(q, c, ki, kj) * x.get(b, c, r as usize, s as usize);
                            }
                        }
                    }
                    y[((b * cout + q) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (y, [bt, cout, ho, wo])
}

/// Central differences of `Σ conv(x) ⊙ r` with respect to input, weights and
/// bias, concatenated in that order.
pub fn central_differences(
    layer: &ConvLayer<f64>,
    x: &Tensor4<f64>,
    r: &[f64],
    step: f64,
) -> Vec<f64> {
    let loss = |l: &ConvLayer<f64>, x: &Tensor4<f64>| -> f64 {
        naive_forward(l, x)
            .0
            .iter()
            .zip(r)
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut out = Vec::new();
    let mut xp = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        xp.data_mut()[i] = v + step;
        let up = loss(layer, &xp);
        xp.data_mut()[i] = v - step;
        let down = loss(layer, &xp);
        xp.data_mut()[i] = v;
        out.push((up - down) / (2.0 * step));
    }
    let mut lp = layer.clone();
    for i in 0..layer.weights().len() {
        let v = layer.weights().data()[i];
        lp.weights_mut().data_mut()[i] = v + step;
        let up = loss(&lp, x);
        lp.weights_mut().data_mut()[i] = v - step;
        let down = loss(&lp, x);
        lp.weights_mut().data_mut()[i] = v;
        out.push((up - down) / (2.0 * step));
    }
    for i in 0..layer.out_channels() {
        let v = layer.bias()[i];
        lp.bias_mut()[i] = v + step;
        let up = loss(&lp, x);
        lp.bias_mut()[i] = v - step;
        let down = loss(&lp, x);
        lp.bias_mut()[i] = v;
        out.push((up - down) / (2.0 * step));
    }
    out
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let d = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n = na.max(nb);
    if n == 0.0 {
        d
    } else {
        d / n
    }
}

/// Channels kept at drop rate `d`: the largest mean |grad_y| first, lower
/// index on ties, at least one.
pub fn top_channels(gy: &Tensor4<f64>, d: f64) -> Vec<usize> {
    let [bt, cout, h, w] = gy.dims();
    let mean: Vec<f64> = (0..cout)
        .map(|q| {
            (0..bt)
                .flat_map(|b| gy.plane(b, q).iter().map(|v| v.abs()))
                .sum::<f64>()
                / (bt * h * w) as f64
        })
        .collect();
    let keep = (cout - (d * cout as f64).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..cout).collect();
    order.sort_by(|&a, &b| mean[b].partial_cmp(&mean[a]).unwrap().then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

pub fn zero_other_channels(gy: &Tensor4<f64>, kept: &[usize]) -> Tensor4<f64> {
    let mut out = gy.clone();
    let [bt, cout, _, _] = gy.dims();
    for b in 0..bt {
        for q in (0..cout).filter(|q| !kept.contains(q)) {
            out.plane_mut(b, q).fill(0.0);
        }
    }
    out
}

pub struct Counter(Cell<u64>);

impl Counter {
    pub fn new() -> Self {
        Counter(Cell::new(0))
    }

    pub fn count(&self) -> u64 {
        self.0.get()
    }

    fn add(&self, a: f64, b: f64) -> f64 {
        self.0.set(self.0.get() + 1);
        a + b
    }

    fn mul(&self, a: f64, b: f64) -> f64 {
        self.0.set(self.0.get() + 1);
        a * b
    }
}

/// Loop backward counting each addition and multiplication on the
/// gradient path. Padding taps multiply the zero they read, as the
/// columnized product does. Returns input, weight and bias gradients.
pub fn counted_backward(
    layer: &ConvLayer<f64>,
    x: &Tensor4<f64>,
    gy: &Tensor4<f64>,
    ops: &Counter,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [bt, cin, h, w] = x.dims();
    let [_, cout, ho, wo] = gy.dims();
    let g = layer.geometry();
    let k = g.kernel;
    let wt = layer.weights();
    let n = cin * k * k;
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; cout];
    let mut cols = vec![0.0; bt * ho * wo * n];
    let tap = |i: usize, j: usize, ki: usize, kj: usize| {
        let r = (i * g.stride + ki) as isize - g.padding as isize;
        let s = (j * g.stride + kj) as isize - g.padding as isize;
        (r >= 0 && s >= 0 && r < h as isize && s < w as isize).then_some((r as usize, s as usize))
    };
    for b in 0..bt {
        for i in 0..ho {
            for j in 0..wo {
                for (q, gbq) in gb.iter_mut().enumerate() {
                    let gv = gy.get(b, q, i, j);
                    *gbq = ops.add(*gbq, gv);
                    for c in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let xv = tap(i, j, ki, kj).map_or(0.0, |(r, s)| x.get(b, c, r, s));
                                let wi = ((q * cin + c) * k + ki) * k + kj;
                                gw[wi] = ops.add(gw[wi], ops.mul(gv, xv));
                                let ci = ((b * ho + i) * wo + j) * n + (c * k + ki) * k + kj;
                                cols[ci] = ops.add(cols[ci], ops.mul(gv, wt.data()[wi]));
                            }
                        }
                    }
                }
            }
        }
    }
    // Scattering the columns back onto the input is bookkeeping, not counted.
    let mut gi = vec![0.0; x.len()];
    for b in 0..bt {
        for i in 0..ho {
            for j in 0..wo {
                for c in 0..cin {
                    for ki in 0..k {
                        for kj in 0..k {
                            if let Some((r, s)) = tap(i, j, ki, kj) {
                                gi[x.offset(b, c, r, s)] +=
                                    cols[((b * ho + i) * wo + j) * n + (c * k + ki) * k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (gi, gw, gb)
}
