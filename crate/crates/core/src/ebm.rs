//! The time-dependent energy model
//! `log p(t, x) = -(x . NN1(t, x) + NN2(t, x)) + F(t)`.
//!
//! `NN1` and `NN2` share one tanh MLP trunk whose last layer has `d + 1`
//! outputs. `F(t) = w_F . tau(t) + b_F` is a linear head on the sinusoidal
//! time features `tau`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Bindings, Graph, NodeId, Tensor};
use crate::math::stream_rng;

const MAGIC: &[u8; 4] = b"EBDL";
const VERSION: u8 = 1;
const INIT_SCHEME: &str = "uniform(+-1/sqrt(fan_in)), zero bias";

/// Default step of the central difference used for `d/dt log p`.
pub const TIME_STEP: f64 = 1e-3;

/// Sinusoidal time features with `m` frequencies spaced geometrically from
/// 1 to 1000.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub m: usize,
}

impl TimeEmbedding {
    pub fn frequencies(&self) -> Vec<f64> {
        if self.m == 1 {
            return vec![1.0];
        }
        (0..self.m)
            .map(|k| 1000f64.powf(k as f64 / (self.m - 1) as f64))
            .collect()
    }

    pub fn dim(&self) -> usize {
        2 * self.m
    }

    /// `[sin(w_1 t) .. sin(w_m t), cos(w_1 t) .. cos(w_m t)]` per row.
    pub fn embed(&self, ts: &[f64]) -> Tensor {
        let w = self.frequencies();
        let mut out = Tensor::zeros(ts.len(), self.dim());
        for (r, t) in ts.iter().enumerate() {
            for (k, wk) in w.iter().enumerate() {
                out.data[r * 2 * self.m + k] = (wk * t).sin();
                out.data[r * 2 * self.m + self.m + k] = (wk * t).cos();
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d: usize,
    pub width: usize,
    /// Number of linear layers in the trunk (at least 2).
    pub depth: usize,
    /// Frequency count of the time embedding.
    pub m: usize,
}

impl ModelSpec {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            width: 64,
            depth: 4,
            m: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.width == 0 || self.m == 0 || self.depth < 2 {
            return Err(Error::Config(format!(
                "model needs d, width, m >= 1 and depth >= 2, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn embedding(&self) -> TimeEmbedding {
        TimeEmbedding { m: self.m }
    }

    /// Parameter shapes in storage order: trunk `(W, b)` pairs, then the
    /// free-energy head `(w_F, b_F)`.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.d + 2 * self.m];
        dims.extend(std::iter::repeat(self.width).take(self.depth - 1));
        dims.push(self.d + 1);
        let mut shapes = Vec::new();
        for w in dims.windows(2) {
            shapes.push((w[0], w[1]));
            shapes.push((1, w[1]));
        }
        shapes.push((2 * self.m, 1));
        shapes.push((1, 1));
        shapes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel {
    spec: ModelSpec,
    seed: u64,
    params: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    d: usize,
    width: usize,
    depth: usize,
    m: usize,
    seed: u64,
    shapes: Vec<(usize, usize)>,
    init: String,
}

impl EnergyModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(seed, 0x5eed);
        let shapes = spec.param_shapes();
        let params = shapes
            .iter()
            .map(|&(r, c)| {
                if r == 1 {
                    Tensor::zeros(r, c)
                } else {
                    let a = 1.0 / (r as f64).sqrt();
                    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-a..a)).collect())
                }
            })
            .collect();
        Ok(Self { spec, seed, params })
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.spec.d
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let shapes = self.spec.param_shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != *s) {
            return Err(Error::Shape("parameter list does not match the model layout".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Index of the free-energy bias `b_F` in the parameter list.
    pub fn bias_index(&self) -> usize {
        self.params.len() - 1
    }

    /// Index of the free-energy weights `w_F`.
    pub fn head_weight_index(&self) -> usize {
        self.params.len() - 2
    }

    /// Declare the parameter leaves in a graph (once per graph).
    pub fn param_nodes(&self, g: &mut Graph) -> Vec<NodeId> {
        self.spec
            .param_shapes()
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| g.param(i, r, c))
            .collect()
    }

    /// Build `log p` as a `[B, 1]` node from `x: [B, d]` and the embedded
    /// times `tau: [B, 2m]`.
    pub fn build_log_density(&self, g: &mut Graph, p: &[NodeId], x: NodeId, tau: NodeId) -> NodeId {
        let (energy, free) = self.build_parts(g, p, x, tau);
        g.sub(free, energy)
    }

    /// The energy `x . NN1 + NN2` and the free-energy head `F`, both `[B, 1]`.
    fn build_parts(&self, g: &mut Graph, p: &[NodeId], x: NodeId, tau: NodeId) -> (NodeId, NodeId) {
        let (b, d) = g.shape(x);
        assert_eq!(d, self.spec.d, "model input dimension");
        let mut h = g.concat_cols(&[x, tau]);
        let layers = self.spec.depth;
        for l in 0..layers {
            let z = g.matmul(h, p[2 * l]);
            let bias = g.broadcast_rows(p[2 * l + 1], b);
            let a = g.add(z, bias);
            h = if l + 1 < layers { g.tanh(a) } else { a };
        }
        let nn1 = g.slice_cols(h, 0, d);
        let nn2 = g.slice_cols(h, d, 1);
        let xn = g.mul(x, nn1);
        let quad = g.sum_cols(xn);
        let energy = g.add(quad, nn2);
        let fw = g.matmul(tau, p[2 * layers]);
        let fb = g.broadcast_rows(p[2 * layers + 1], b);
        let free = g.add(fw, fb);
        (energy, free)
    }

    fn check_batch(&self, t: &[f64], x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.d {
            return Err(Error::dims(self.spec.d, x.ncols()));
        }
        if t.len() != x.nrows() {
            return Err(Error::dims(x.nrows(), t.len()));
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::domain(format!("time {bad} outside [0, 1]")));
        }
        Ok(())
    }

    /// Unnormalized log-density at per-row times.
    pub fn log_density(&self, t: &[f64], x: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_batch(t, x)?;
        let mut g = Graph::new();
        let xn = g.input(x.nrows(), x.ncols());
        let tau = g.input(x.nrows(), self.spec.embedding().dim());
        let p = self.param_nodes(&mut g);
        let lp = self.build_log_density(&mut g, &p, xn, tau);
        let inputs = [Tensor::from_array(x), self.spec.embedding().embed(t)];
        let out = g.eval(Bindings { inputs: &inputs, params: &self.params }, &[lp])?;
        Ok(out.into_iter().next().unwrap().data)
    }

    /// The energy `U(t, x)` without the free-energy head, at per-row times.
    pub fn energy(&self, t: &[f64], x: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_batch(t, x)?;
        let mut g = Graph::new();
        let xn = g.input(x.nrows(), x.ncols());
        let tau = g.input(x.nrows(), self.spec.embedding().dim());
        let p = self.param_nodes(&mut g);
        let (energy, _) = self.build_parts(&mut g, &p, xn, tau);
        let inputs = [Tensor::from_array(x), self.spec.embedding().embed(t)];
        let out = g.eval(Bindings { inputs: &inputs, params: &self.params }, &[energy])?;
        Ok(out.into_iter().next().unwrap().data)
    }

    /// The free-energy head `F(t)`.
    pub fn free_energy(&self, t: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::zeros((t.len(), self.spec.d));
        self.check_batch(t, x.view())?;
        let mut g = Graph::new();
        let xn = g.input(t.len(), self.spec.d);
        let tau = g.input(t.len(), self.spec.embedding().dim());
        let p = self.param_nodes(&mut g);
        let (_, free) = self.build_parts(&mut g, &p, xn, tau);
        let inputs = [Tensor::from_array(x.view()), self.spec.embedding().embed(t)];
        let out = g.eval(Bindings { inputs: &inputs, params: &self.params }, &[free])?;
        Ok(out.into_iter().next().unwrap().data)
    }

    /// `grad_x log p` at per-row times.
    pub fn score(&self, t: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(t, x)?;
        let mut g = Graph::new();
        let (b, d) = x.dim();
        let xn = g.input(b, d);
        let tau = g.input(b, self.spec.embedding().dim());
        let p = self.param_nodes(&mut g);
        let lp = self.build_log_density(&mut g, &p, xn, tau);
        let ones = g.filled(b, 1, 1.0);
        let s = g.vjp(lp, ones, &[xn])[0];
        let inputs = [Tensor::from_array(x), self.spec.embedding().embed(t)];
        let out = g.eval(Bindings { inputs: &inputs, params: &self.params }, &[s])?;
        Ok(out[0].to_array())
    }

    /// Central difference `(log p(t + h) - log p(t - h)) / 2h`.
    pub fn time_derivative(&self, t: &[f64], x: ArrayView2<f64>, h: f64) -> Result<Vec<f64>> {
        if let Some(bad) = t.iter().find(|t| **t - h < 0.0 || **t + h > 1.0) {
            return Err(Error::domain(format!(
                "time derivative stencil at t = {bad} with h = {h} leaves [0, 1]"
            )));
        }
        let up: Vec<f64> = t.iter().map(|t| t + h).collect();
        let down: Vec<f64> = t.iter().map(|t| t - h).collect();
        let a = self.log_density(&up, x)?;
        let b = self.log_density(&down, x)?;
        Ok(a.iter().zip(&b).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            d: self.spec.d,
            width: self.spec.width,
            depth: self.spec.depth,
            m: self.spec.m,
            seed: self.seed,
            shapes: self.spec.param_shapes(),
            init: INIT_SCHEME.into(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(9 + json.len() + 8 * self.n_params());
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in &self.params {
            for v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err("bad magic bytes".into());
        }
        if bytes[4] != VERSION {
            return Err(format!("unsupported version {}", bytes[4]));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = &bytes[9..];
        if body.len() < hlen {
            return Err("truncated header".into());
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| format!("bad header: {e}"))?;
        let spec = ModelSpec {
            d: header.d,
            width: header.width,
            depth: header.depth,
            m: header.m,
        };
        spec.validate().map_err(|e| e.to_string())?;
        if header.shapes != spec.param_shapes() {
            return Err("parameter shapes do not match the declared architecture".into());
        }
        let count: usize = header.shapes.iter().map(|(r, c)| r * c).sum();
        let payload = &body[hlen..];
        if payload.len() != 8 * count {
            return Err(format!(
                "header declares {count} parameters but payload holds {} bytes",
                payload.len()
            ));
        }
        let mut vals = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let params = header
            .shapes
            .iter()
            .map(|&(r, c)| Tensor::new(r, c, vals.by_ref().take(r * c).collect()))
            .collect();
        Ok(Self {
            spec,
            seed: header.seed,
            params,
        })
    }
}
