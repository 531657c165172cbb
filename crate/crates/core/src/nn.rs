//! Small forward-only building blocks shared by the learned-map stand-ins:
//! per-cell linear maps, 3×3 convolutions and seeded initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::BevGrid;
use crate::{Error, Result};

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Deterministic RNG for a `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Affine map `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform weights in `±scale / sqrt(inputs)`, zero bias.
    pub fn random(inputs: usize, outputs: usize, scale: f32, rng: &mut impl Rng) -> Self {
        let bound = scale / (inputs as f32).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.random_range(-bound..=bound)).collect();
        Dense {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    /// `gain * I` padded with zeros when the shapes differ.
    pub fn identity(inputs: usize, outputs: usize, gain: f32) -> Self {
        let mut d = Self::zeros(inputs, outputs);
        for i in 0..inputs.min(outputs) {
            d.weight[i * inputs + i] = gain;
        }
        d
    }

    pub fn set(&mut self, out: usize, inp: usize, v: f32) {
        self.weight[out * self.inputs + inp] = v;
    }

    pub fn get(&self, out: usize, inp: usize) -> f32 {
        self.weight[out * self.inputs + inp]
    }

    #[inline]
    pub fn apply_into(&self, x: &[f32], y: &mut [f32]) {
        debug_assert_eq!(x.len(), self.inputs);
        for (o, yo) in y.iter_mut().enumerate().take(self.outputs) {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            *yo = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>();
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let mut y = vec![0.0; self.outputs];
        self.apply_into(x, &mut y);
        y
    }

    /// Applies the map to every cell of `grid`.
    pub fn apply_grid(&self, grid: &BevGrid) -> Result<BevGrid> {
        if grid.channels() != self.inputs {
            return Err(Error::shape("Dense::apply_grid channels", self.inputs, grid.channels()));
        }
        let mut data = vec![0.0; grid.spec().cells() * self.outputs];
        data.par_chunks_mut(self.outputs)
            .zip(grid.data().par_chunks(self.inputs))
            .for_each(|(y, x)| self.apply_into(x, y));
        grid.with_data(self.outputs, data)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// 3×3 convolution with zero padding; weights indexed `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv3x3 {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Conv3x3 {
            inputs,
            outputs,
            weight: vec![0.0; outputs * inputs * 9],
            bias: vec![0.0; outputs],
        }
    }

    pub fn random(inputs: usize, outputs: usize, scale: f32, rng: &mut impl Rng) -> Self {
        let bound = scale / ((inputs * 9) as f32).sqrt();
        let weight = (0..outputs * inputs * 9).map(|_| rng.random_range(-bound..=bound)).collect();
        Conv3x3 {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    /// Sets the center tap for `(out, in)`.
    pub fn set_center(&mut self, out: usize, inp: usize, v: f32) {
        self.weight[((out * self.inputs + inp) * 3 + 1) * 3 + 1] = v;
    }

    pub fn forward(&self, grid: &BevGrid) -> Result<BevGrid> {
        if grid.channels() != self.inputs {
            return Err(Error::shape("Conv3x3 channels", self.inputs, grid.channels()));
        }
        let (h, w) = (grid.height(), grid.width());
        let (ci, co) = (self.inputs, self.outputs);
        let mut data = vec![0.0f32; h * w * co];
        data.par_chunks_mut(w * co).enumerate().for_each(|(r, row)| {
            for c in 0..w {
                let out = &mut row[c * co..(c + 1) * co];
                out.copy_from_slice(&self.bias);
                for ky in 0..3 {
                    let rr = r as isize + ky as isize - 1;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let cc = c as isize + kx as isize - 1;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let x = grid.at(rr as usize, cc as usize);
                        for (o, acc) in out.iter_mut().enumerate() {
                            let base = o * ci * 9 + ky * 3 + kx;
                            let mut s = 0.0;
                            for (i, xv) in x.iter().enumerate() {
                                s += self.weight[base + i * 9] * xv;
                            }
                            *acc += s;
                        }
                    }
                }
            }
        });
        grid.with_data(co, data)
    }
}

/// Convolutions with ReLU between consecutive layers (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStack {
    pub layers: Vec<Conv3x3>,
}

impl ConvStack {
    pub fn forward(&self, grid: &BevGrid) -> Result<BevGrid> {
        let mut x = grid.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i + 1 < self.layers.len() {
                x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(x)
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Concatenates per-cell channels of grids with identical raster geometry.
pub fn concat_channels(grids: &[&BevGrid]) -> Result<BevGrid> {
    let first = grids[0];
    let total: usize = grids.iter().map(|g| g.channels()).sum();
    for g in grids {
        if g.height() != first.height() || g.width() != first.width() {
            return Err(Error::shape(
                "concat_channels",
                format!("{}x{}", first.height(), first.width()),
                format!("{}x{}", g.height(), g.width()),
            ));
        }
    }
    let cells = first.spec().cells();
    let mut data = Vec::with_capacity(cells * total);
    for i in 0..cells {
        for g in grids {
            let ch = g.channels();
            data.extend_from_slice(&g.data()[i * ch..(i + 1) * ch]);
        }
    }
    first.with_data(total, data)
}

/// Random Fourier features of cell position: `φ(p)·φ(q) ≈ gain²·exp(−|p−q|²/2ℓ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalCode {
    pub frequencies: Vec<[f64; 2]>,
    pub phases: Vec<f64>,
    pub gain: f64,
}

impl PositionalCode {
    pub fn new(dims: usize, length_m: f64, gain: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0x706f_73);
        let normal = rand_distr::Normal::new(0.0, 1.0 / length_m).unwrap();
        let frequencies = (0..dims)
            .map(|_| [rand_distr::Distribution::sample(&normal, &mut rng), rand_distr::Distribution::sample(&normal, &mut rng)])
            .collect();
        let phases = (0..dims).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        PositionalCode { frequencies, phases, gain }
    }

    pub fn dims(&self) -> usize {
        self.phases.len()
    }

    pub fn encode_into(&self, x: f64, y: f64, out: &mut [f32]) {
        let scale = self.gain * (2.0 / self.dims() as f64).sqrt();
        for ((o, w), b) in out.iter_mut().zip(&self.frequencies).zip(&self.phases) {
            *o = (scale * (w[0] * x + w[1] * y + b).cos()) as f32;
        }
    }

    /// Adds the code of every cell center to channels `first..first + dims`.
    pub fn add_to(&self, grid: &mut BevGrid, first: usize) -> Result<()> {
        let c = grid.channels();
        if first + self.dims() > c {
            return Err(Error::shape("positional code channels", format!("<= {c}"), first + self.dims()));
        }
        let spec = *grid.spec();
        let mut code = vec![0.0f32; self.dims()];
        for r in 0..spec.height {
            for col in 0..spec.width {
                let (x, y) = spec.cell_center(r, col);
                self.encode_into(x, y, &mut code);
                for (v, e) in grid.at_mut(r, col)[first..].iter_mut().zip(&code) {
                    *v += e;
                }
            }
        }
        Ok(())
    }
}
