//! Fully connected scalar energy network.
//!
//! Parameters live in one flat vector, layer by layer: the row-major weight
//! matrix (`out x in`) followed by the bias. Hidden layers use softplus, the
//! output layer is affine and one-dimensional.
//!
//! Besides `U` and `∇ₓU`, the network provides [`ScalarNetEnergy::directional_param_grad`]:
//! the parameter gradient of `v·∇ₓU(x)`. Score-matching losses only depend on
//! the parameters through `∇ₓU`, so every loss gradient is a sum of these
//! terms with `v = ∂loss/∂(∇ₓU)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EnergyField;
use crate::error::{Error, Result};
use crate::rng::{NoiseStream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Softplus,
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `(softplus(z), sigmoid(z))` from a single exponential.
#[inline]
fn softplus_sigmoid(z: f64) -> (f64, f64) {
    let e = (-z.abs()).exp();
    let sp = z.max(0.0) + e.ln_1p();
    let sg = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, sg)
}

/// Dot product with four independent accumulators so it vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarNetEnergy {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

fn layers_of(widths: &[usize]) -> Vec<Layer> {
    let mut off = 0;
    widths
        .windows(2)
        .map(|w| {
            let l = Layer { fan_in: w[0], fan_out: w[1], w: off, b: off + w[0] * w[1] };
            off += w[0] * w[1] + w[1];
            l
        })
        .collect()
}

impl ScalarNetEnergy {
    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn validate_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("invalid layer widths {widths:?}")));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::invalid("the last layer width must be 1"));
        }
        Ok(())
    }

    pub fn new(widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        Self::validate_widths(&widths)?;
        let want = Self::param_count(&widths);
        if params.len() != want {
            return Err(Error::invalid(format!("expected {want} parameters, got {}", params.len())));
        }
        Ok(Self { widths, activation: Activation::Softplus, params })
    }

    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization for weights and biases.
    pub fn init(widths: Vec<usize>, seed: u64) -> Result<Self> {
        Self::validate_widths(&widths)?;
        let mut params = Vec::with_capacity(Self::param_count(&widths));
        let stream = NoiseStream::new(seed, Purpose::Init);
        for (i, l) in layers_of(&widths).iter().enumerate() {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            let mut rng = stream.rng(i as u64, 0);
            for _ in 0..(l.fan_in * l.fan_out + l.fan_out) {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Self::new(widths, params)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index of the output bias, the parameter that shifts `U` by a constant.
    pub fn output_bias_index(&self) -> usize {
        self.params.len() - 1
    }

    /// Forward pass storing each layer's input and activation slope.
    fn forward(&self, layers: &[Layer], x: &[f64], h_in: &mut Vec<Vec<f64>>, s1s: &mut Vec<Vec<f64>>) -> f64 {
        let p = &self.params;
        let hidden = layers.len() - 1;
        h_in.clear();
        s1s.clear();
        h_in.push(x.to_vec());
        for l in &layers[..hidden] {
            let h = &h_in[h_in.len() - 1];
            let mut nh = vec![0.0; l.fan_out];
            let mut s1 = vec![0.0; l.fan_out];
            for j in 0..l.fan_out {
                let z = p[l.b + j] + dot(&p[l.w + j * l.fan_in..l.w + (j + 1) * l.fan_in], h);
                (nh[j], s1[j]) = softplus_sigmoid(z);
            }
            h_in.push(nh);
            s1s.push(s1);
        }
        let out = layers[hidden];
        p[out.b] + dot(&p[out.w..out.w + out.fan_in], &h_in[hidden])
    }

    /// Input gradient from a stored forward pass.
    fn backward_input(&self, layers: &[Layer], s1s: &[Vec<f64>], grad: &mut [f64]) {
        let p = &self.params;
        let hidden = layers.len() - 1;
        let out = layers[hidden];
        let mut delta = p[out.w..out.w + out.fan_in].to_vec();
        for li in (0..hidden).rev() {
            let l = layers[li];
            let mut nd = vec![0.0; l.fan_in];
            for j in 0..l.fan_out {
                axpy(&mut nd, delta[j] * s1s[li][j], &p[l.w + j * l.fan_in..l.w + (j + 1) * l.fan_in]);
            }
            delta = nd;
        }
        grad.copy_from_slice(&delta);
    }

    /// Parameter gradient of `J = v·∇ₓU` given a stored forward pass.
    fn directional_from_tape(
        &self,
        layers: &[Layer],
        h_in: &[Vec<f64>],
        s1s: &[Vec<f64>],
        v: &[f64],
        scale: f64,
        acc: &mut [f64],
    ) -> f64 {
        let p = &self.params;
        let hidden = layers.len() - 1;

        // Tangent forward pass.
        let mut hd_in: Vec<Vec<f64>> = Vec::with_capacity(hidden + 1);
        let mut s2zd: Vec<Vec<f64>> = Vec::with_capacity(hidden);
        hd_in.push(v.to_vec());
        for (li, l) in layers[..hidden].iter().enumerate() {
            let hd = &hd_in[li];
            let s1 = &s1s[li];
            let mut nhd = vec![0.0; l.fan_out];
            let mut s2 = vec![0.0; l.fan_out];
            for j in 0..l.fan_out {
                let zd = dot(&p[l.w + j * l.fan_in..l.w + (j + 1) * l.fan_in], hd);
                nhd[j] = s1[j] * zd;
                s2[j] = s1[j] * (1.0 - s1[j]) * zd;
            }
            hd_in.push(nhd);
            s2zd.push(s2);
        }
        let out = layers[hidden];
        let hd_last = &hd_in[hidden];
        let w_out = &p[out.w..out.w + out.fan_in];
        let j_val = dot(w_out, hd_last);
        axpy(&mut acc[out.w..out.w + out.fan_in], scale, hd_last);

        // Reverse pass: adjoints of hidden activations (a_h) and tangents (a_hd).
        let mut a_hd = w_out.to_vec();
        let mut a_h = vec![0.0; out.fan_in];
        for li in (0..hidden).rev() {
            let l = layers[li];
            let s1 = &s1s[li];
            let s2 = &s2zd[li];
            let mut a_zd = vec![0.0; l.fan_out];
            let mut a_z = vec![0.0; l.fan_out];
            for j in 0..l.fan_out {
                a_zd[j] = s1[j] * a_hd[j];
                a_z[j] = s2[j] * a_hd[j] + s1[j] * a_h[j];
            }
            let (h, hd) = (&h_in[li], &hd_in[li]);
            for j in 0..l.fan_out {
                let (cz, czd) = (scale * a_z[j], scale * a_zd[j]);
                let row = &mut acc[l.w + j * l.fan_in..l.w + (j + 1) * l.fan_in];
                for ((r, hdi), hi) in row.iter_mut().zip(hd).zip(h) {
                    *r += czd * hdi + cz * hi;
                }
                acc[l.b + j] += cz;
            }
            if li > 0 {
                let mut nh = vec![0.0; l.fan_in];
                let mut nhd = vec![0.0; l.fan_in];
                for j in 0..l.fan_out {
                    let row = &p[l.w + j * l.fan_in..l.w + (j + 1) * l.fan_in];
                    axpy(&mut nh, a_z[j], row);
                    axpy(&mut nhd, a_zd[j], row);
                }
                a_h = nh;
                a_hd = nhd;
            }
        }
        j_val
    }

    /// Parameter gradient of `J(θ) = v·∇ₓU(x; θ)`, scaled by `scale` and
    /// added into `acc`. Returns `J`.
    pub fn directional_param_grad(&self, x: &[f64], v: &[f64], scale: f64, acc: &mut [f64]) -> f64 {
        debug_assert_eq!(acc.len(), self.params.len());
        let layers = layers_of(&self.widths);
        let (mut h_in, mut s1s) = (Vec::new(), Vec::new());
        self.forward(&layers, x, &mut h_in, &mut s1s);
        self.directional_from_tape(&layers, &h_in, &s1s, v, scale, acc)
    }

    /// Evaluates `g = ∇ₓU(x)`, lets `choose` fill the direction `v` from it,
    /// then adds `scale · ∇_θ(v·∇ₓU)` into `acc`. One forward pass serves both.
    /// Returns whatever `choose` returned.
    pub fn gradient_then_directional<F>(&self, x: &[f64], scale: f64, acc: &mut [f64], choose: F) -> f64
    where
        F: FnOnce(&[f64], &mut [f64]) -> f64,
    {
        debug_assert_eq!(acc.len(), self.params.len());
        let layers = layers_of(&self.widths);
        let (mut h_in, mut s1s) = (Vec::new(), Vec::new());
        self.forward(&layers, x, &mut h_in, &mut s1s);
        let d = x.len();
        let mut g = vec![0.0; d];
        self.backward_input(&layers, &s1s, &mut g);
        let mut v = vec![0.0; d];
        let out = choose(&g, &mut v);
        self.directional_from_tape(&layers, &h_in, &s1s, &v, scale, acc);
        out
    }

    /// Parameter gradient of `U(x)` itself (used only for checks).
    pub fn energy_param_grad(&self, x: &[f64], acc: &mut [f64]) -> f64 {
        let layers = layers_of(&self.widths);
        let hidden = layers.len() - 1;
        let p = &self.params;
        let mut h_in = vec![x.to_vec()];
        let mut s1s = Vec::new();
        for l in &layers[..hidden] {
            let h = &h_in[h_in.len() - 1];
            let mut nh = vec![0.0; l.fan_out];
            let mut s1 = vec![0.0; l.fan_out];
            for j in 0..l.fan_out {
                let row = &p[l.w + j * l.fan_in..l.w + (j + 1) * l.fan_in];
                let z = p[l.b + j] + row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
                (nh[j], s1[j]) = softplus_sigmoid(z);
            }
            h_in.push(nh);
            s1s.push(s1);
        }
        let out = layers[hidden];
        let w_out = &p[out.w..out.w + out.fan_in];
        let u = p[out.b] + w_out.iter().zip(&h_in[hidden]).map(|(a, b)| a * b).sum::<f64>();
        for (a, h) in acc[out.w..out.w + out.fan_in].iter_mut().zip(&h_in[hidden]) {
            *a += h;
        }
        acc[out.b] += 1.0;
        let mut delta = w_out.to_vec();
        for li in (0..hidden).rev() {
            let l = layers[li];
            let e: Vec<f64> = delta.iter().zip(&s1s[li]).map(|(d, s)| d * s).collect();
            for j in 0..l.fan_out {
                for i in 0..l.fan_in {
                    acc[l.w + j * l.fan_in + i] += e[j] * h_in[li][i];
                }
                acc[l.b + j] += e[j];
            }
            let mut nd = vec![0.0; l.fan_in];
            for j in 0..l.fan_out {
                for i in 0..l.fan_in {
                    nd[i] += p[l.w + j * l.fan_in + i] * e[j];
                }
            }
            delta = nd;
        }
        u
    }
}

impl EnergyField for ScalarNetEnergy {
    fn dim(&self) -> usize {
        self.widths[0]
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let layers = layers_of(&self.widths);
        let p = &self.params;
        let mut h = x.to_vec();
        for l in &layers[..layers.len() - 1] {
            let mut nh = vec![0.0; l.fan_out];
            for (j, o) in nh.iter_mut().enumerate() {
                let row = &p[l.w + j * l.fan_in..l.w + (j + 1) * l.fan_in];
                let z = p[l.b + j] + dot(row, &h);
                *o = softplus(z);
            }
            h = nh;
        }
        let out = layers[layers.len() - 1];
        p[out.b] + dot(&p[out.w..out.w + out.fan_in], &h)
    }

    fn energy_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let layers = layers_of(&self.widths);
        let (mut h_in, mut s1s) = (Vec::new(), Vec::new());
        let u = self.forward(&layers, x, &mut h_in, &mut s1s);
        self.backward_input(&layers, &s1s, grad);
        u
    }
}
