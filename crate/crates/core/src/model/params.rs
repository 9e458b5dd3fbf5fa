use ndarray::{Array1, Array2};

use super::ModelConfig;
use crate::rng::SplitMix64;

/// Weights of one pre-norm decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    /// Fused query/key/value projection, `D x 3D`.
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, ff: usize) -> Self {
        Self {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            w_qkv: Array2::zeros((d, 3 * d)),
            b_qkv: Array1::zeros(3 * d),
            w_out: Array2::zeros((d, d)),
            b_out: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w_ff1: Array2::zeros((d, ff)),
            b_ff1: Array1::zeros(ff),
            w_ff2: Array2::zeros((ff, d)),
            b_ff2: Array1::zeros(d),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self::zeros(self.w_out.nrows(), self.w_ff1.ncols())
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64])) {
        for (name, t) in [
            ("ln1_gain", self.ln1_gain.as_slice().unwrap()),
            ("ln1_bias", self.ln1_bias.as_slice().unwrap()),
            ("w_qkv", self.w_qkv.as_slice().unwrap()),
            ("b_qkv", self.b_qkv.as_slice().unwrap()),
            ("w_out", self.w_out.as_slice().unwrap()),
            ("b_out", self.b_out.as_slice().unwrap()),
            ("ln2_gain", self.ln2_gain.as_slice().unwrap()),
            ("ln2_bias", self.ln2_bias.as_slice().unwrap()),
            ("w_ff1", self.w_ff1.as_slice().unwrap()),
            ("b_ff1", self.b_ff1.as_slice().unwrap()),
            ("w_ff2", self.w_ff2.as_slice().unwrap()),
            ("b_ff2", self.b_ff2.as_slice().unwrap()),
        ] {
            f(&format!("{prefix}.{name}"), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (name, t) in [
            ("ln1_gain", self.ln1_gain.as_slice_mut().unwrap()),
            ("ln1_bias", self.ln1_bias.as_slice_mut().unwrap()),
            ("w_qkv", self.w_qkv.as_slice_mut().unwrap()),
            ("b_qkv", self.b_qkv.as_slice_mut().unwrap()),
            ("w_out", self.w_out.as_slice_mut().unwrap()),
            ("b_out", self.b_out.as_slice_mut().unwrap()),
            ("ln2_gain", self.ln2_gain.as_slice_mut().unwrap()),
            ("ln2_bias", self.ln2_bias.as_slice_mut().unwrap()),
            ("w_ff1", self.w_ff1.as_slice_mut().unwrap()),
            ("b_ff1", self.b_ff1.as_slice_mut().unwrap()),
            ("w_ff2", self.w_ff2.as_slice_mut().unwrap()),
            ("b_ff2", self.b_ff2.as_slice_mut().unwrap()),
        ] {
            f(&format!("{prefix}.{name}"), t);
        }
    }
}

/// All trainable tensors of the composition transformer.
///
/// Gradients use the same type, so every tensor has a congruent slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub category_emb: Array2<f64>,
    /// One table per box corner coordinate `(x1, y1, x2, y2)`, `B x D` each.
    pub coord_emb: [Array2<f64>; 4],
    /// `(K + 1) x D`; the last row is the start symbol fed to the first patch.
    pub token_emb: Array2<f64>,
    /// Object slots `0..max_objects`, then one slot per patch.
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    pub w_head: Array2<f64>,
    pub b_head: Array1<f64>,
}

impl ModelParams {
    /// Every tensor zero, layer-norm gains included. Such a model predicts the
    /// uniform distribution everywhere.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let ff = cfg.ff_dim();
        Self {
            category_emb: Array2::zeros((cfg.n_categories, d)),
            coord_emb: std::array::from_fn(|_| Array2::zeros((cfg.coord_bins, d))),
            token_emb: Array2::zeros((cfg.vocab_size + 1, d)),
            pos_emb: Array2::zeros((cfg.max_positions(), d)),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(d, ff)).collect(),
            lnf_gain: Array1::zeros(d),
            lnf_bias: Array1::zeros(d),
            w_head: Array2::zeros((d, cfg.vocab_size)),
            b_head: Array1::zeros(cfg.vocab_size),
        }
    }

    /// Gaussian weights (`std`), zero biases, unit layer-norm gains. Residual
    /// output projections are scaled down by `sqrt(2 * n_layers)`.
    pub fn init(cfg: &ModelConfig, seed: u64, std: f64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = SplitMix64::stream(seed, 0x1417);
        let resid = std / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        p.visit_mut(&mut |name, t| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            let scale = match leaf {
                n if n.ends_with("gain") => {
                    t.fill(1.0);
                    return;
                }
                n if n.starts_with("b_") || n.ends_with("bias") => return,
                "w_out" | "w_ff2" => resid,
                _ => std,
            };
            for v in t.iter_mut() {
                *v = scale * rng.normal();
            }
        });
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.fill(0.0));
        z
    }

    /// Visits every tensor in a fixed order with a stable dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [f64])) {
        f("category_emb", self.category_emb.as_slice().unwrap());
        for (i, t) in self.coord_emb.iter().enumerate() {
            f(&format!("coord_emb.{i}"), t.as_slice().unwrap());
        }
        f("token_emb", self.token_emb.as_slice().unwrap());
        f("pos_emb", self.pos_emb.as_slice().unwrap());
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}"), f);
        }
        f("lnf_gain", self.lnf_gain.as_slice().unwrap());
        f("lnf_bias", self.lnf_bias.as_slice().unwrap());
        f("w_head", self.w_head.as_slice().unwrap());
        f("b_head", self.b_head.as_slice().unwrap());
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("category_emb", self.category_emb.as_slice_mut().unwrap());
        for (i, t) in self.coord_emb.iter_mut().enumerate() {
            f(&format!("coord_emb.{i}"), t.as_slice_mut().unwrap());
        }
        f("token_emb", self.token_emb.as_slice_mut().unwrap());
        f("pos_emb", self.pos_emb.as_slice_mut().unwrap());
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), f);
        }
        f("lnf_gain", self.lnf_gain.as_slice_mut().unwrap());
        f("lnf_bias", self.lnf_bias.as_slice_mut().unwrap());
        f("w_head", self.w_head.as_slice_mut().unwrap());
        f("b_head", self.b_head.as_slice_mut().unwrap());
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    /// Flat copy of every scalar in visit order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut offset = 0;
        let mut out = f64::NAN;
        self.visit(&mut |_, t| {
            if index >= offset && index < offset + t.len() {
                out = t[index - offset];
            }
            offset += t.len();
        });
        out
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            if index >= offset && index < offset + t.len() {
                t[index - offset] = value;
            }
            offset += t.len();
        });
    }

    /// Name of the tensor holding flat scalar `index`.
    pub fn name_of_flat(&self, index: usize) -> String {
        let mut offset = 0;
        let mut out = String::new();
        self.visit(&mut |name, t| {
            if index >= offset && index < offset + t.len() {
                out = name.to_string();
            }
            offset += t.len();
        });
        out
    }
}

/// Anything an optimizer can update: a fixed ordered list of flat tensors.
pub trait Parameters {
    fn for_each(&self, f: &mut dyn FnMut(&[f64]));
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));
}

impl Parameters for ModelParams {
    fn for_each(&self, f: &mut dyn FnMut(&[f64])) {
        self.visit(&mut |_, t| f(t));
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.visit_mut(&mut |_, t| f(t));
    }
}

impl Parameters for LayerParams {
    fn for_each(&self, f: &mut dyn FnMut(&[f64])) {
        self.visit("", &mut |_, t| f(t));
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.visit_mut("", &mut |_, t| f(t));
    }
}
