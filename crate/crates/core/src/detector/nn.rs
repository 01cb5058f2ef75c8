//! A minimal reverse-mode engine for the handful of layer types the
//! detector needs: 2-D convolution (optionally fused with ReLU), nearest
//! upsampling and addition. Convolutions run as im2col + GEMM.

use std::collections::BTreeMap;

/// A `c × h × w` activation, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }
}

/// A named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub type ParamMap = BTreeMap<String, Param>;
pub type GradMap = BTreeMap<String, Vec<f64>>;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

enum Op {
    Conv {
        name: String,
        geom: ConvGeom,
        relu: bool,
        input: NodeId,
        output: NodeId,
        cols: Vec<f64>,
        input_grad: bool,
    },
    Upsample {
        input: NodeId,
        output: NodeId,
        factor: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
        output: NodeId,
    },
}

/// Forward activations plus what backward needs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor3>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&self, id: NodeId) -> &Tensor3 {
        &self.nodes[id]
    }

    pub fn input(&mut self, t: Tensor3) -> NodeId {
        self.nodes.push(t);
        self.nodes.len() - 1
    }

    /// Square convolution with weights `{name}.weight` of shape
    /// `[out, in, k, k]` and bias `{name}.bias`.
    pub fn conv(
        &mut self,
        params: &ParamMap,
        name: &str,
        x: NodeId,
        stride: usize,
        relu: bool,
        input_grad: bool,
    ) -> NodeId {
        let weight = &params[&format!("{name}.weight")];
        let bias = &params[&format!("{name}.bias")];
        let (out_c, in_c, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
        let inp = &self.nodes[x];
        assert_eq!(inp.c, in_c, "{name}: input has {} channels, expected {in_c}", inp.c);
        let pad = k / 2;
        let out_h = (inp.h + 2 * pad - k) / stride + 1;
        let out_w = (inp.w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            in_c,
            out_c,
            k,
            stride,
            pad,
            in_h: inp.h,
            in_w: inp.w,
            out_h,
            out_w,
        };
        let cols = im2col(&inp.data, &geom);
        let n = out_h * out_w;
        let ckk = in_c * k * k;
        let mut out = Vec::with_capacity(out_c * n);
        for &b in &bias.data {
            out.extend(std::iter::repeat_n(b, n));
        }
        // out (O × n) += W (O × ckk) · cols (ckk × n)
        unsafe {
            matrixmultiply::dgemm(
                out_c,
                ckk,
                n,
                1.0,
                weight.data.as_ptr(),
                ckk as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        if relu {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        self.nodes.push(Tensor3 {
            c: out_c,
            h: out_h,
            w: out_w,
            data: out,
        });
        let output = self.nodes.len() - 1;
        self.ops.push(Op::Conv {
            name: name.to_string(),
            geom,
            relu,
            input: x,
            output,
            cols,
            input_grad,
        });
        output
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        let inp = &self.nodes[x];
        let (c, h, w) = (inp.c, inp.h * factor, inp.w * factor);
        let mut out = Tensor3::zeros(c, h, w);
        for ci in 0..c {
            for y in 0..h {
                let src = &inp.data[(ci * inp.h + y / factor) * inp.w..][..inp.w];
                let dst = &mut out.data[(ci * h + y) * w..][..w];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / factor];
                }
            }
        }
        self.nodes.push(out);
        let output = self.nodes.len() - 1;
        self.ops.push(Op::Upsample { input: x, output, factor });
        output
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a], &self.nodes[b]);
        assert_eq!((ta.c, ta.h, ta.w), (tb.c, tb.h, tb.w), "add: shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor3 { data, ..*ta };
        self.nodes.push(out);
        let output = self.nodes.len() - 1;
        self.ops.push(Op::Add { a, b, output });
        output
    }

    /// Backpropagates the given output gradients; returns parameter gradients
    /// keyed like the parameter map.
    pub fn backward(&self, params: &ParamMap, seeds: Vec<(NodeId, Vec<f64>)>) -> GradMap {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            assert_eq!(g.len(), self.nodes[id].data.len());
            accumulate(&mut grads[id], g);
        }
        let mut pgrads = GradMap::new();
        for op in self.ops.iter().rev() {
            match op {
                Op::Add { a, b, output } => {
                    if let Some(g) = grads[*output].take() {
                        accumulate(&mut grads[*a], g.clone());
                        accumulate(&mut grads[*b], g);
                    }
                }
                Op::Upsample { input, output, factor } => {
                    if let Some(g) = grads[*output].take() {
                        let inp = &self.nodes[*input];
                        let (h, w) = (inp.h * factor, inp.w * factor);
                        let mut gi = vec![0.0; inp.data.len()];
                        for ci in 0..inp.c {
                            for y in 0..h {
                                let src = &g[(ci * h + y) * w..][..w];
                                let dst = &mut gi[(ci * inp.h + y / factor) * inp.w..][..inp.w];
                                for (xo, v) in src.iter().enumerate() {
                                    dst[xo / factor] += v;
                                }
                            }
                        }
                        accumulate(&mut grads[*input], gi);
                    }
                }
                Op::Conv {
                    name,
                    geom,
                    relu,
                    input,
                    output,
                    cols,
                    input_grad,
                } => {
                    let Some(mut g) = grads[*output].take() else { continue };
                    if *relu {
                        for (gv, &o) in g.iter_mut().zip(&self.nodes[*output].data) {
                            if o <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                    let n = geom.out_h * geom.out_w;
                    let ckk = geom.in_c * geom.k * geom.k;
                    let weight = &params[&format!("{name}.weight")];

                    let gw = pgrads
                        .entry(format!("{name}.weight"))
                        .or_insert_with(|| vec![0.0; weight.len()]);
                    // dW (O × ckk) += dOut (O × n) · colsᵀ (n × ckk)
                    unsafe {
                        matrixmultiply::dgemm(
                            geom.out_c,
                            n,
                            ckk,
                            1.0,
                            g.as_ptr(),
                            n as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            n as isize,
                            1.0,
                            gw.as_mut_ptr(),
                            ckk as isize,
                            1,
                        );
                    }
                    let gb = pgrads
                        .entry(format!("{name}.bias"))
                        .or_insert_with(|| vec![0.0; geom.out_c]);
                    for (o, b) in gb.iter_mut().enumerate() {
                        *b += g[o * n..(o + 1) * n].iter().sum::<f64>();
                    }

                    if *input_grad {
                        // dCols (ckk × n) = Wᵀ (ckk × O) · dOut (O × n)
                        let mut dcols = vec![0.0; ckk * n];
                        unsafe {
                            matrixmultiply::dgemm(
                                ckk,
                                geom.out_c,
                                n,
                                1.0,
                                weight.data.as_ptr(),
                                1,
                                ckk as isize,
                                g.as_ptr(),
                                n as isize,
                                1,
                                0.0,
                                dcols.as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                        accumulate(&mut grads[*input], col2im(&dcols, geom));
                    }
                }
            }
        }
        pgrads
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.in_c * g.k * g.k * n];
    for ci in 0..g.in_c {
        let plane = &input[ci * g.in_h * g.in_w..][..g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..][..n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..][..g.in_w];
                    let drow = &mut dst[oy * g.out_w..][..g.out_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_h * g.out_w;
    let mut out = vec![0.0; g.in_c * g.in_h * g.in_w];
    for ci in 0..g.in_c {
        let plane = &mut out[ci * g.in_h * g.in_w..][..g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..][..n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..][..g.in_w];
                    let srow = &src[oy * g.out_w..][..g.out_w];
                    for (ox, v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}
