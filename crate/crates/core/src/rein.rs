//! Rein: per-layer low-rank learnable token banks with one MLP shared across
//! layers.
//!
//! Each backbone layer `i` owns tokens `T_i = A_i B_i` (`m x c`, rank `r`)
//! and a gate `lambda_i`. A layer output `f` is refined as
//!
//! ```text
//! S     = row_softmax(f T_i^T / sqrt(c))      (n x m)
//! delta = mlp_shared(S T_i)                   (n x c)
//! f_o   = f + lambda_i * delta
//! ```
//!
//! Gates start at zero, so a fresh adapter leaves the backbone untouched.
//! Object queries for the decode head are the layer mean of `T_i W_q`.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureMap};
use crate::error::{Error, Result};
use crate::params::{Archive, ParamGroup, ParamSet};
use crate::tape::{Tape, Var};

/// Half-width of the uniform initialization of the token factors.
pub const TOKEN_INIT_SCALE: f64 = 0.02;
pub const DEFAULT_REIN_LR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub layers: usize,
    pub tokens: usize,
    pub rank: usize,
    pub width: usize,
    pub hidden: usize,
    pub query_dim: usize,
    pub seed: u64,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("adapter needs at least one layer".into()));
        }
        if self.tokens == 0 || self.width == 0 || self.hidden == 0 || self.query_dim == 0 || self.rank == 0 {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        let max = self.tokens.min(self.width);
        if self.rank > max {
            return Err(Error::Rank { rank: self.rank, max });
        }
        Ok(())
    }

    /// `L (m r + r c + 1) + (c h + h + h c + c) + c d_q`.
    pub fn expected_count(&self) -> usize {
        let (l, m, r, c, h, dq) = (self.layers, self.tokens, self.rank, self.width, self.hidden, self.query_dim);
        l * (m * r + r * c + 1) + (c * h + h + h * c + c) + c * dq
    }
}

/// One layer's low-rank token factors and gate.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBank {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub gate: f64,
    pub layer_index: usize,
}

/// The MLP applied at every layer: `gelu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedMlp {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryBank {
    /// `m x d_q` object queries.
    pub q: Array2<f64>,
}

#[derive(Clone, Copy, Debug)]
struct BankIdx {
    a: usize,
    b: usize,
    gate: usize,
}

#[derive(Clone, Debug)]
pub struct Adapter {
    cfg: AdapterConfig,
    params: ParamSet,
    banks: Vec<BankIdx>,
    mlp: [usize; 4],
    w_q: usize,
}

/// Adapter parameters bound on a tape, with the materialized tokens.
pub(crate) struct BoundAdapter {
    pub vars: Vec<Var>,
    pub tokens: Vec<Var>,
}

pub fn init_adapter(layers: usize, tokens: usize, rank: usize, width: usize, hidden: usize, query_dim: usize, seed: u64) -> Result<Adapter> {
    Adapter::new(AdapterConfig {
        layers,
        tokens,
        rank,
        width,
        hidden,
        query_dim,
        seed,
    })
}

impl Adapter {
    pub fn new(cfg: AdapterConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let (m, r, c, h, dq) = (cfg.tokens, cfg.rank, cfg.width, cfg.hidden, cfg.query_dim);
        let mut uniform = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-TOKEN_INIT_SCALE..TOKEN_INIT_SCALE))
        };
        let mut banks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let a = params.push(format!("rein.layers.{l}.token_a"), uniform(m, r));
            let b = params.push(format!("rein.layers.{l}.token_b"), uniform(r, c));
            let gate = params.push(format!("rein.layers.{l}.gate"), Array2::zeros((1, 1)));
            banks.push(BankIdx { a, b, gate });
        }
        let mut normal = |rows: usize, cols: usize| {
            let d = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).unwrap();
            Array2::from_shape_fn((rows, cols), |_| d.sample(&mut rng))
        };
        let w1 = normal(c, h);
        let w2 = normal(h, c);
        let wq = normal(c, dq);
        let mlp = [
            params.push("rein.mlp.w1", w1),
            params.push("rein.mlp.b1", Array2::zeros((1, h))),
            params.push("rein.mlp.w2", w2),
            params.push("rein.mlp.b2", Array2::zeros((1, c))),
        ];
        let w_q = params.push("rein.query_proj", wq);
        Ok(Self {
            cfg,
            params,
            banks,
            mlp,
            w_q,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn num_layers(&self) -> usize {
        self.banks.len()
    }

    pub fn bank(&self, layer: usize) -> TokenBank {
        let idx = self.banks[layer];
        TokenBank {
            a: self.params.get(idx.a).clone(),
            b: self.params.get(idx.b).clone(),
            gate: self.params.get(idx.gate)[[0, 0]],
            layer_index: layer,
        }
    }

    pub fn set_bank(&mut self, bank: &TokenBank) -> Result<()> {
        let idx = *self
            .banks
            .get(bank.layer_index)
            .ok_or_else(|| Error::Validation(format!("no layer {}", bank.layer_index)))?;
        let (m, r, c) = (self.cfg.tokens, self.cfg.rank, self.cfg.width);
        if bank.a.dim() != (m, r) || bank.b.dim() != (r, c) {
            return Err(Error::shape(
                "set_bank",
                format!("A {m}x{r}, B {r}x{c}"),
                format!("A {:?}, B {:?}", bank.a.dim(), bank.b.dim()),
            ));
        }
        if !bank.gate.is_finite() {
            return Err(Error::Validation("gate must be finite".into()));
        }
        *self.params.get_mut(idx.a) = bank.a.clone();
        *self.params.get_mut(idx.b) = bank.b.clone();
        self.params.get_mut(idx.gate)[[0, 0]] = bank.gate;
        Ok(())
    }

    pub fn set_gate(&mut self, layer: usize, gate: f64) {
        self.params.get_mut(self.banks[layer].gate)[[0, 0]] = gate;
    }

    pub fn shared_mlp(&self) -> SharedMlp {
        let [w1, b1, w2, b2] = self.mlp.map(|i| self.params.get(i).clone());
        SharedMlp { w1, b1, w2, b2 }
    }

    pub fn set_shared_mlp(&mut self, mlp: &SharedMlp) -> Result<()> {
        let parts = [&mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2];
        for (i, p) in self.mlp.iter().zip(parts) {
            if self.params.get(*i).dim() != p.dim() {
                return Err(Error::shape("set_shared_mlp", format!("{:?}", self.params.get(*i).dim()), format!("{:?}", p.dim())));
            }
        }
        for (i, p) in self.mlp.iter().zip(parts) {
            *self.params.get_mut(*i) = p.clone();
        }
        Ok(())
    }

    pub fn query_projection(&self) -> &Array2<f64> {
        self.params.get(self.w_q)
    }

    pub(crate) fn set_params(&mut self, params: ParamSet) -> Result<()> {
        if params.infos() != self.params.infos() {
            return Err(Error::Format("adapter parameter manifest does not match config".into()));
        }
        self.params = params;
        Ok(())
    }

    pub(crate) fn check_compatible(&self, backbone: &Backbone) -> Result<()> {
        let bc = backbone.config();
        if self.cfg.layers != bc.layers {
            return Err(Error::shape("adapter layers", bc.layers, self.cfg.layers));
        }
        if self.cfg.width != bc.width {
            return Err(Error::shape("adapter width", bc.width, self.cfg.width));
        }
        Ok(())
    }

    pub(crate) fn bind<'a>(&'a self, tape: &mut Tape<'a>, requires_grad: bool) -> BoundAdapter {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(&p.value, requires_grad)).collect();
        let tokens = self
            .banks
            .iter()
            .map(|b| tape.matmul(vars[b.a], vars[b.b]))
            .collect();
        BoundAdapter { vars, tokens }
    }

    /// Refines the stacked `(batch * n) x c` layer output `f` of `layer`.
    pub(crate) fn refine_tape(&self, tape: &mut Tape<'_>, bound: &BoundAdapter, layer: usize, f: Var) -> Var {
        let mlp = self.mlp.map(|i| bound.vars[i]);
        let gate = bound.vars[self.banks[layer].gate];
        refine_vars(tape, f, bound.tokens[layer], mlp, gate)
    }

    /// `m x d_q` queries: the mean over layers of `T_i W_q`.
    pub(crate) fn queries_tape(&self, tape: &mut Tape<'_>, bound: &BoundAdapter) -> Var {
        let wq = bound.vars[self.w_q];
        let mut acc = tape.matmul(bound.tokens[0], wq);
        for &t in &bound.tokens[1..] {
            let p = tape.matmul(t, wq);
            acc = tape.add(acc, p);
        }
        tape.scale(acc, 1.0 / bound.tokens.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(&self.cfg).expect("config serializes");
        let mut archive = Archive::new("rein_adapter", meta);
        archive.add_set("rein", &self.params, true);
        archive.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::load(path)?;
        if archive.kind != "rein_adapter" {
            return Err(Error::Format(format!("expected a rein_adapter archive, found `{}`", archive.kind)));
        }
        let cfg: AdapterConfig = serde_json::from_value(archive.meta.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let mut adapter = Self::new(cfg)?;
        adapter.set_params(archive.group_set("rein"))?;
        Ok(adapter)
    }
}

fn refine_vars(tape: &mut Tape<'_>, f: Var, tokens: Var, [w1, b1, w2, b2]: [Var; 4], gate: Var) -> Var {
    let c = tape.shape(tokens).1;
    let logits = tape.matmul_nt(f, tokens);
    let logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
    let sim = tape.softmax_rows(logits);
    let mixed = tape.matmul(sim, tokens);
    let h = tape.matmul(mixed, w1);
    let h = tape.add_row(h, b1);
    let h = tape.gelu(h);
    let delta = tape.matmul(h, w2);
    let delta = tape.add_row(delta, b2);
    tape.gated_add(f, delta, gate)
}

/// `A B`, an `m x c` matrix of rank at most `r`.
pub fn materialize_tokens(bank: &TokenBank) -> Array2<f64> {
    bank.a.dot(&bank.b)
}

/// Applies one layer's refinement to a feature map.
pub fn refine(f: &FeatureMap, bank: &TokenBank, mlp: &SharedMlp) -> Result<FeatureMap> {
    let c = bank.b.ncols();
    if f.width() != c {
        return Err(Error::shape("refine feature width", c, f.width()));
    }
    if mlp.w1.nrows() != c || mlp.w2.ncols() != c {
        return Err(Error::shape("refine mlp width", c, format!("{}/{}", mlp.w1.nrows(), mlp.w2.ncols())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f.rows());
    let a = tape.param(&bank.a, false);
    let b = tape.param(&bank.b, false);
    let t = tape.matmul(a, b);
    let mlp = [&mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2].map(|p| tape.param(p, false));
    let gate = tape.constant(Array2::from_elem((1, 1), bank.gate));
    let out = refine_vars(&mut tape, x, t, mlp, gate);
    Ok(FeatureMap::from_rows(tape.value(out), f.batch(), f.grid_h, f.grid_w))
}

/// Row-softmax similarity between features and tokens, `(batch * n) x m`.
pub fn token_similarity(f: &FeatureMap, bank: &TokenBank) -> Result<Array2<f64>> {
    let c = bank.b.ncols();
    if f.width() != c {
        return Err(Error::shape("token_similarity feature width", c, f.width()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f.rows());
    let t = tape.constant(materialize_tokens(bank));
    let logits = tape.matmul_nt(x, t);
    let logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
    let s = tape.softmax_rows(logits);
    Ok(tape.value(s).clone())
}

pub fn extract_queries(adapter: &Adapter) -> QueryBank {
    let mut tape = Tape::new();
    let bound = adapter.bind(&mut tape, false);
    let q = adapter.queries_tape(&mut tape, &bound);
    QueryBank { q: tape.value(q).clone() }
}

/// The single trainable group holding every adapter parameter.
pub fn trainable_parameters(adapter: &Adapter) -> ParamGroup {
    ParamGroup::from_set("rein", &adapter.params, true, DEFAULT_REIN_LR)
}
