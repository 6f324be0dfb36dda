//! Small seeded vision backbones exposing per-layer token features.
//!
//! Both kinds patchify the input with a linear stem and then run `layers`
//! residual blocks at constant resolution, so every layer emits a
//! `(batch * n) x width` token matrix over a `grid x grid` raster. A hook is
//! called on each layer's output before it enters the next layer.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{read_weights, ParamGroup, ParamSet};
use crate::rein::Adapter;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    VitTiny,
    ConvTiny,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit_tiny" => Ok(Self::VitTiny),
            "conv_tiny" => Ok(Self::ConvTiny),
            other => Err(Error::Config(format!("unknown backbone kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub layers: usize,
    pub width: usize,
    pub patch_size: usize,
    pub input_size: usize,
    pub seed: u64,
    /// Attention heads (vit_tiny only).
    pub heads: usize,
    /// Hidden width of each block's MLP as a multiple of `width`.
    pub mlp_ratio: usize,
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind, layers: usize, width: usize, patch_size: usize, input_size: usize, seed: u64) -> Self {
        Self {
            kind,
            layers,
            width,
            patch_size,
            input_size,
            seed,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.input_size == 0 {
            return fail("patch_size and input_size must be positive".into());
        }
        if !self.input_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "input_size not divisible by patch_size ({} % {} != 0)",
                self.input_size, self.patch_size
            ));
        }
        if self.layers < 2 {
            return fail(format!("layers must be >= 2, got {}", self.layers));
        }
        if self.width < 8 {
            return fail(format!("width must be >= 8, got {}", self.width));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if self.kind == BackboneKind::VitTiny && (self.heads == 0 || !self.width.is_multiple_of(self.heads)) {
            return fail(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// Tokens per image.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Per-layer token features, `batch x n x c`, over a `grid_h x grid_w` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl FeatureMap {
    pub fn from_rows(rows: &Array2<f64>, batch: usize, grid_h: usize, grid_w: usize) -> Self {
        let n = grid_h * grid_w;
        let data = rows
            .clone()
            .into_shape_with_order((batch, n, rows.ncols()))
            .expect("rows are batch * n");
        Self { data, grid_h, grid_w }
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Stacked `(batch * n) x c` view used on the tape.
    pub fn rows(&self) -> Array2<f64> {
        let (b, n, c) = self.data.dim();
        self.data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * n, c))
            .unwrap()
    }
}

const KERNEL: usize = 7;
const LN_GAIN: &str = "gamma";

#[derive(Clone, Debug)]
enum Block {
    Vit {
        ln1: (usize, usize),
        qkv: (usize, usize),
        proj: (usize, usize),
        ln2: (usize, usize),
        fc1: (usize, usize),
        fc2: (usize, usize),
    },
    Conv {
        dw: (usize, usize),
        ln: (usize, usize),
        pw1: (usize, usize),
        pw2: (usize, usize),
    },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    params: ParamSet,
    stem: (usize, usize),
    pos: Option<usize>,
    stem_norm: Option<(usize, usize)>,
    blocks: Vec<Block>,
    norm: (usize, usize),
    frozen_digest: Option<String>,
}

/// Builds a backbone with deterministic initialization from `cfg.seed`.
pub fn build_backbone(cfg: &BackboneConfig) -> Result<Backbone> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let c = cfg.width;
    let hidden = c * cfg.mlp_ratio;
    // residual branch outputs are damped so the random stack stays well conditioned
    let out_std = 1.0 / (2.0 * cfg.layers as f64).sqrt();

    let mut normal = |rows: usize, cols: usize, std: f64| {
        let d = Normal::new(0.0, std).unwrap();
        Array2::from_shape_fn((rows, cols), |_| d.sample(&mut rng))
    };
    let linear = |params: &mut ParamSet, name: &str, w: Array2<f64>| {
        let fan_out = w.ncols();
        let wi = params.push(format!("{name}.weight"), w);
        let bi = params.push(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        (wi, bi)
    };
    let norm_params = |params: &mut ParamSet, name: &str| {
        let g = params.push(format!("{name}.{LN_GAIN}"), Array2::ones((1, c)));
        let b = params.push(format!("{name}.beta"), Array2::zeros((1, c)));
        (g, b)
    };

    let pd = cfg.patch_dim();
    let w = normal(pd, c, 1.0 / (pd as f64).sqrt());
    let stem = linear(&mut params, "backbone.stem", w);
    let (pos, stem_norm) = match cfg.kind {
        BackboneKind::VitTiny => {
            let p = normal(cfg.tokens(), c, 0.02);
            (Some(params.push("backbone.pos_embed", p)), None)
        }
        BackboneKind::ConvTiny => (None, Some(norm_params(&mut params, "backbone.stem_norm"))),
    };
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let pre = format!("backbone.blocks.{l}");
        let block = match cfg.kind {
            BackboneKind::VitTiny => {
                let ln1 = norm_params(&mut params, &format!("{pre}.ln1"));
                let w = normal(c, 3 * c, 1.0 / (c as f64).sqrt());
                let qkv = linear(&mut params, &format!("{pre}.attn.qkv"), w);
                let w = normal(c, c, out_std / (c as f64).sqrt());
                let proj = linear(&mut params, &format!("{pre}.attn.proj"), w);
                let ln2 = norm_params(&mut params, &format!("{pre}.ln2"));
                let w = normal(c, hidden, 1.0 / (c as f64).sqrt());
                let fc1 = linear(&mut params, &format!("{pre}.mlp.fc1"), w);
                let w = normal(hidden, c, out_std / (hidden as f64).sqrt());
                let fc2 = linear(&mut params, &format!("{pre}.mlp.fc2"), w);
                Block::Vit { ln1, qkv, proj, ln2, fc1, fc2 }
            }
            BackboneKind::ConvTiny => {
                let kk = KERNEL * KERNEL;
                let w = normal(kk, c, 1.0 / (kk as f64).sqrt());
                let dw = linear(&mut params, &format!("{pre}.dwconv"), w);
                let ln = norm_params(&mut params, &format!("{pre}.norm"));
                let w = normal(c, hidden, 1.0 / (c as f64).sqrt());
                let pw1 = linear(&mut params, &format!("{pre}.pwconv1"), w);
                let w = normal(hidden, c, out_std / (hidden as f64).sqrt());
                let pw2 = linear(&mut params, &format!("{pre}.pwconv2"), w);
                Block::Conv { dw, ln, pw1, pw2 }
            }
        };
        blocks.push(block);
    }
    let norm = norm_params(&mut params, "backbone.norm");
    Ok(Backbone {
        cfg: cfg.clone(),
        params,
        stem,
        pos,
        stem_norm,
        blocks,
        norm,
        frozen_digest: None,
    })
}

/// Flattens `batch x H x W x 3` images into `(batch * n) x (p * p * 3)`
/// patch rows in raster order.
pub fn patchify(images: ArrayView4<f32>, patch: usize) -> Array2<f64> {
    let (b, h, w, ch) = images.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((b * gh * gw, patch * patch * ch));
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let mut row = out.row_mut(bi * gh * gw + gy * gw + gx);
                let mut k = 0;
                for py in 0..patch {
                    for px in 0..patch {
                        for c in 0..ch {
                            row[k] = images[[bi, gy * patch + py, gx * patch + px, c]] as f64;
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub(crate) fn set_params(&mut self, params: ParamSet) -> Result<()> {
        if params.infos() != self.params.infos() {
            return Err(Error::Format("backbone parameter manifest does not match config".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Index of the first parameter of each block, i.e. the layer boundaries
    /// in parameter order.
    pub fn layer_boundaries(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Vit { ln1, .. } => ln1.0,
                Block::Conv { dw, .. } => dw.0,
            })
            .collect()
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    /// Marks the backbone frozen, records a digest of its parameters and
    /// returns its (single) parameter group.
    pub fn freeze(&mut self) -> Vec<ParamGroup> {
        self.frozen_digest = Some(self.digest());
        vec![ParamGroup::from_set("backbone", &self.params, false, 0.0)]
    }

    pub fn frozen_digest(&self) -> Option<&str> {
        self.frozen_digest.as_deref()
    }

    /// Checks the current parameters against the digest taken by [`freeze`](Self::freeze).
    pub fn verify_frozen(&self) -> Result<()> {
        match &self.frozen_digest {
            Some(d) if *d == self.digest() => Ok(()),
            Some(_) => Err(Error::Validation("frozen backbone parameters changed".into())),
            None => Err(Error::Validation("backbone was never frozen".into())),
        }
    }

    /// Loads parameters from a weight-import directory. Every listed name must
    /// exist with a matching shape; unlisted parameters keep their values.
    pub fn import_weights(&mut self, dir: &Path) -> Result<usize> {
        let weights = read_weights(dir)?;
        for (name, value) in &weights {
            let idx = self
                .params
                .index_of(name)
                .ok_or_else(|| Error::Ingestion(format!("unknown backbone parameter `{name}`")))?;
            let cur = self.params.get(idx);
            if cur.dim() != value.dim() {
                return Err(Error::shape("import_weights", format!("{:?}", cur.dim()), format!("{:?}", value.dim())));
            }
        }
        for (name, value) in weights.iter() {
            let idx = self.params.index_of(name).unwrap();
            *self.params.get_mut(idx) = value.clone();
        }
        Ok(weights.len())
    }

    pub(crate) fn bind<'a>(&'a self, tape: &mut Tape<'a>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(&p.value, requires_grad)).collect()
    }

    fn linear<'a>(tape: &mut Tape<'a>, vars: &[Var], x: Var, (w, b): (usize, usize)) -> Var {
        let y = tape.matmul(x, vars[w]);
        tape.add_row(y, vars[b])
    }

    fn norm<'a>(tape: &mut Tape<'a>, vars: &[Var], x: Var, (g, b): (usize, usize)) -> Var {
        let y = tape.layer_norm(x);
        let y = tape.mul_row(y, vars[g]);
        tape.add_row(y, vars[b])
    }

    /// Runs the stacked patch rows through every layer. `hook(tape, layer, f)`
    /// maps each layer output to the next layer's input. Returns the per-layer
    /// hooked outputs and the final normalized features.
    pub(crate) fn forward_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        vars: &[Var],
        patches: Var,
        hook: &mut dyn FnMut(&mut Tape<'a>, usize, Var) -> Var,
    ) -> (Vec<Var>, Var) {
        let n = self.cfg.tokens();
        let batch = tape.shape(patches).0 / n;
        let grid = self.cfg.grid();
        let mut x = Self::linear(tape, vars, patches, self.stem);
        if let Some(pos) = self.pos {
            let tiled = tape.tile_rows(vars[pos], batch);
            x = tape.add(x, tiled);
        }
        if let Some(sn) = self.stem_norm {
            x = Self::norm(tape, vars, x, sn);
        }
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            x = match block {
                Block::Vit { ln1, qkv, proj, ln2, fc1, fc2 } => {
                    let h = Self::norm(tape, vars, x, *ln1);
                    let qkv_out = Self::linear(tape, vars, h, *qkv);
                    let c = self.cfg.width;
                    let heads = self.cfg.heads;
                    let d = c / heads;
                    let scale = 1.0 / (d as f64).sqrt();
                    let mut outs = Vec::with_capacity(heads);
                    for hd in 0..heads {
                        let q = tape.slice_cols(qkv_out, hd * d, d);
                        let k = tape.slice_cols(qkv_out, c + hd * d, d);
                        let v = tape.slice_cols(qkv_out, 2 * c + hd * d, d);
                        let s = tape.block_matmul_nt(q, k, n);
                        let s = tape.scale(s, scale);
                        let p = tape.softmax_rows(s);
                        outs.push(tape.block_matmul(p, v, n, n));
                    }
                    let att = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
                    let att = Self::linear(tape, vars, att, *proj);
                    let x = tape.add(x, att);
                    let h = Self::norm(tape, vars, x, *ln2);
                    let h = Self::linear(tape, vars, h, *fc1);
                    let h = tape.gelu(h);
                    let h = Self::linear(tape, vars, h, *fc2);
                    tape.add(x, h)
                }
                Block::Conv { dw, ln, pw1, pw2 } => {
                    let h = tape.depthwise_conv(x, vars[dw.0], grid, grid, KERNEL);
                    let h = tape.add_row(h, vars[dw.1]);
                    let h = Self::norm(tape, vars, h, *ln);
                    let h = Self::linear(tape, vars, h, *pw1);
                    let h = tape.gelu(h);
                    let h = Self::linear(tape, vars, h, *pw2);
                    tape.add(x, h)
                }
            };
            x = hook(tape, l, x);
            layers.push(x);
        }
        let out = Self::norm(tape, vars, x, self.norm);
        (layers, out)
    }

    fn check_images(&self, images: &ArrayView4<f32>) -> Result<()> {
        let (_, h, w, ch) = images.dim();
        let s = self.cfg.input_size;
        if (h, w, ch) != (s, s, 3) {
            return Err(Error::shape("backbone input", format!("(_, {s}, {s}, 3)"), format!("(_, {h}, {w}, {ch})")));
        }
        Ok(())
    }
}

/// Runs the backbone on a `batch x H x W x 3` image batch, passing every
/// layer's output through `adapter` (when given) before the next layer.
pub fn forward_with_adapter(
    backbone: &Backbone,
    images: ArrayView4<f32>,
    adapter: Option<&Adapter>,
) -> Result<(Vec<FeatureMap>, FeatureMap)> {
    backbone.check_images(&images)?;
    if let Some(a) = adapter {
        a.check_compatible(backbone)?;
    }
    let batch = images.dim().0;
    let grid = backbone.cfg.grid();
    let mut tape = Tape::new();
    let vars = backbone.bind(&mut tape, false);
    let patches = tape.constant(patchify(images, backbone.cfg.patch_size));
    let (layers, out) = match adapter {
        Some(a) => {
            let bound = a.bind(&mut tape, false);
            backbone.forward_tape(&mut tape, &vars, patches, &mut |t, l, f| a.refine_tape(t, &bound, l, f))
        }
        None => backbone.forward_tape(&mut tape, &vars, patches, &mut |_, _, f| f),
    };
    let to_map = |v: Var| FeatureMap::from_rows(tape.value(v), batch, grid, grid);
    Ok((layers.into_iter().map(to_map).collect(), to_map(out)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    pub(crate) fn vit_cfg() -> BackboneConfig {
        BackboneConfig::new(BackboneKind::VitTiny, 4, 32, 8, 64, 7)
    }

    fn random_images(batch: usize, size: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((batch, size, size, 3), |_| rng.random::<f32>())
    }

    #[test]
    fn vit_layer_shapes_follow_patch_grid() {
        let bb = build_backbone(&vit_cfg()).unwrap();
        assert_eq!(bb.num_layers(), 4);
        assert_eq!(bb.layer_boundaries().len(), 4);
        let (layers, out) = forward_with_adapter(&bb, random_images(2, 64, 1).view(), None).unwrap();
        assert_eq!(layers.len(), 4);
        for f in layers.iter().chain(std::iter::once(&out)) {
            assert_eq!(f.data.dim(), (2, 64, 32));
            assert_eq!(f.grid_h * f.grid_w, 64);
            assert!(f.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = build_backbone(&vit_cfg()).unwrap();
        let b = build_backbone(&vit_cfg()).unwrap();
        assert_eq!(a.params(), b.params());
        let mut other = vit_cfg();
        other.seed = 8;
        assert_ne!(build_backbone(&other).unwrap().digest(), a.digest());
    }

    #[test]
    fn invalid_configs_name_the_violation() {
        let mut cfg = vit_cfg();
        cfg.patch_size = 7;
        let err = build_backbone(&cfg).unwrap_err().to_string();
        assert!(err.contains("input_size not divisible by patch_size"), "{err}");
        let mut cfg = vit_cfg();
        cfg.layers = 1;
        assert!(build_backbone(&cfg).unwrap_err().to_string().contains("layers"));
        let mut cfg = vit_cfg();
        cfg.width = 4;
        assert!(build_backbone(&cfg).unwrap_err().to_string().contains("width"));
    }

    #[test]
    fn samples_in_a_batch_are_independent() {
        for kind in [BackboneKind::VitTiny, BackboneKind::ConvTiny] {
            let mut cfg = vit_cfg();
            cfg.kind = kind;
            let bb = build_backbone(&cfg).unwrap();
            let one = random_images(1, 64, 3);
            let two = ndarray::concatenate(ndarray::Axis(0), &[one.view(), one.view()]).unwrap();
            let (layers, out) = forward_with_adapter(&bb, two.view(), None).unwrap();
            for f in layers.iter().chain(std::iter::once(&out)) {
                assert_eq!(f.data.index_axis(ndarray::Axis(0), 0), f.data.index_axis(ndarray::Axis(0), 1));
            }
            let (_, single) = forward_with_adapter(&bb, one.view(), None).unwrap();
            assert_eq!(single.data.index_axis(ndarray::Axis(0), 0), out.data.index_axis(ndarray::Axis(0), 0));
        }
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let bb = build_backbone(&vit_cfg()).unwrap();
        let err = forward_with_adapter(&bb, random_images(1, 32, 0).view(), None).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }

    #[test]
    fn freeze_records_verifiable_digest() {
        let mut bb = build_backbone(&vit_cfg()).unwrap();
        assert!(bb.verify_frozen().is_err());
        let groups = bb.freeze();
        assert_eq!(groups.len(), 1);
        assert!(!groups[0].trainable);
        assert_eq!(groups[0].count(), bb.param_count());
        bb.verify_frozen().unwrap();
        bb.params_mut().get_mut(0)[[0, 0]] += 1.0;
        assert!(bb.verify_frozen().is_err());
    }

    #[test]
    fn weight_import_round_trips_and_rejects_unknown_names() {
        let src = build_backbone(&vit_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        crate::params::export_weights(src.params(), dir.path()).unwrap();
        let mut other_cfg = vit_cfg();
        other_cfg.seed = 99;
        let mut dst = build_backbone(&other_cfg).unwrap();
        let n = dst.import_weights(dir.path()).unwrap();
        assert_eq!(n, src.params().len());
        for (a, b) in src.params().iter().zip(dst.params().iter()) {
            assert_eq!(a.value.mapv(|v| v as f32 as f64), b.value);
        }

        let mut extra = ParamSet::new();
        extra.push("backbone.nope", Array2::zeros((1, 1)));
        let dir2 = tempfile::tempdir().unwrap();
        crate::params::export_weights(&extra, dir2.path()).unwrap();
        assert!(matches!(dst.import_weights(dir2.path()), Err(Error::Ingestion(_))));
    }
}
