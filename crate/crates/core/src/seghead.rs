//! Query-based binary mask head.
//!
//! Each query embeds into feature space through a two-layer MLP; its mask
//! logits are the dot products with every token feature, upsampled to the
//! input resolution. A per-query classifier scores {foreground, no-object}
//! and the semantic foreground probability is
//! `clamp(sum_q p_fg(q) * sigmoid(mask_q), 0, 1)`.

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamSet};
use crate::rein::QueryBank;
use crate::tape::{Resampler, Tape, Var};

pub const DEFAULT_HEAD_LR: f64 = 1e-4;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub query_dim: usize,
    pub width: usize,
    pub num_queries: usize,
    /// Output pixels per feature cell along each axis.
    pub upsample_factor: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SegHead {
    cfg: HeadConfig,
    params: ParamSet,
    // mask_mlp: fc1 (w, b), fc2 (w, b); cls (w, b)
    idx: [usize; 6],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    /// `m x H x W`
    pub per_query_mask_logits: Array3<f64>,
    /// `m x 2`, columns `[foreground, no-object]`
    pub per_query_class_logits: Array2<f64>,
    /// `H x W` in `[0, 1]`
    pub semantic_prob: Array2<f64>,
}

impl MaskPrediction {
    pub fn binarize(&self, threshold: f64) -> Array2<bool> {
        self.semantic_prob.mapv(|p| p >= threshold)
    }
}

/// Tape handles for one head evaluation.
pub(crate) struct HeadOutputs {
    /// `(batch * H * W) x m`
    pub mask_logits: Var,
    /// `m x 2`
    pub class_logits: Var,
    /// `(batch * H * W) x 1`
    pub semantic: Var,
}

impl SegHead {
    pub fn new(cfg: HeadConfig) -> Result<Self> {
        if cfg.query_dim == 0 || cfg.width == 0 || cfg.num_queries == 0 || cfg.upsample_factor == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut normal = |rows: usize, cols: usize| {
            let d = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).unwrap();
            Array2::from_shape_fn((rows, cols), |_| d.sample(&mut rng))
        };
        let dq = cfg.query_dim;
        let mut params = ParamSet::new();
        let fc1_w = params.push("head.mask_mlp.fc1.weight", normal(dq, dq));
        let fc1_b = params.push("head.mask_mlp.fc1.bias", Array2::zeros((1, dq)));
        let fc2_w = params.push("head.mask_mlp.fc2.weight", normal(dq, cfg.width));
        let fc2_b = params.push("head.mask_mlp.fc2.bias", Array2::zeros((1, cfg.width)));
        let cls_w = params.push("head.cls.weight", normal(dq, 2));
        // bias the classifier so the summed foreground mass starts below 1
        let prior = -(cfg.num_queries as f64).ln();
        let cls_b = params.push("head.cls.bias", Array2::from_shape_vec((1, 2), vec![prior, 0.0]).unwrap());
        Ok(Self {
            cfg,
            params,
            idx: [fc1_w, fc1_b, fc2_w, fc2_b, cls_w, cls_b],
        })
    }

    pub fn config(&self) -> &HeadConfig {
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
            return Err(Error::Format("head parameter manifest does not match config".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn param_group(&self) -> ParamGroup {
        ParamGroup::from_set("head", &self.params, true, DEFAULT_HEAD_LR)
    }

    /// Mutable access to a head parameter by name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        let i = self.params.index_of(name)?;
        Some(self.params.get_mut(i))
    }

    pub(crate) fn bind<'a>(&'a self, tape: &mut Tape<'a>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(&p.value, requires_grad)).collect()
    }

    /// `features`: `(batch * n) x c`; `queries`: `m x d_q`.
    pub(crate) fn predict_tape(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        features: Var,
        queries: Var,
        resampler: &Resampler,
    ) -> HeadOutputs {
        let [fc1_w, fc1_b, fc2_w, fc2_b, cls_w, cls_b] = self.idx.map(|i| vars[i]);
        let h = tape.matmul(queries, fc1_w);
        let h = tape.add_row(h, fc1_b);
        let h = tape.gelu(h);
        let emb = tape.matmul(h, fc2_w);
        let emb = tape.add_row(emb, fc2_b);
        let grid_logits = tape.matmul_nt(features, emb);
        let mask_logits = tape.resample(grid_logits, resampler);
        let class_logits = tape.matmul(queries, cls_w);
        let class_logits = tape.add_row(class_logits, cls_b);
        let class_prob = tape.softmax_rows(class_logits);
        let fg = tape.slice_cols(class_prob, 0, 1);
        let masks = tape.sigmoid(mask_logits);
        let semantic = tape.matmul(masks, fg);
        let semantic = tape.clamp01(semantic);
        HeadOutputs {
            mask_logits,
            class_logits,
            semantic,
        }
    }

    pub fn resampler(&self, grid_h: usize, grid_w: usize, mode: Upsampling) -> Resampler {
        let (h, w) = (grid_h * self.cfg.upsample_factor, grid_w * self.cfg.upsample_factor);
        match mode {
            Upsampling::Bilinear => Resampler::bilinear(grid_h, grid_w, h, w),
            Upsampling::Nearest => Resampler::nearest(grid_h, grid_w, h, w),
        }
    }

    /// Decodes one mask prediction per image in `final_features`.
    pub fn predict(&self, final_features: &FeatureMap, queries: &QueryBank, mode: Upsampling) -> Result<Vec<MaskPrediction>> {
        if final_features.width() != self.cfg.width {
            return Err(Error::shape("head feature width", self.cfg.width, final_features.width()));
        }
        if queries.q.ncols() != self.cfg.query_dim {
            return Err(Error::shape("head query width", self.cfg.query_dim, queries.q.ncols()));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let f = tape.constant(final_features.rows());
        let q = tape.param(&queries.q, false);
        let r = self.resampler(final_features.grid_h, final_features.grid_w, mode);
        let out = self.predict_tape(&mut tape, &vars, f, q, &r);
        Ok(split_predictions(
            tape.value(out.mask_logits),
            tape.value(out.class_logits),
            tape.value(out.semantic),
            (r.out_h, r.out_w),
        ))
    }
}

pub(crate) fn split_predictions(
    mask_logits: &Array2<f64>,
    class_logits: &Array2<f64>,
    semantic: &Array2<f64>,
    (h, w): (usize, usize),
) -> Vec<MaskPrediction> {
    let px = h * w;
    let m = mask_logits.ncols();
    (0..mask_logits.nrows() / px)
        .map(|b| {
            let rows = mask_logits.slice(s![b * px..(b + 1) * px, ..]);
            let per_query = rows.t().as_standard_layout().into_owned().into_shape_with_order((m, h, w)).unwrap();
            let sem = semantic
                .slice(s![b * px..(b + 1) * px, 0])
                .to_owned()
                .into_shape_with_order((h, w))
                .unwrap();
            MaskPrediction {
                per_query_mask_logits: per_query,
                per_query_class_logits: class_logits.clone(),
                semantic_prob: sem,
            }
        })
        .collect()
}

/// Semantic probability recomputed from per-query outputs.
pub fn semantic_probability(per_query_mask_logits: &Array3<f64>, per_query_class_logits: &Array2<f64>) -> Array2<f64> {
    let (m, h, w) = per_query_mask_logits.dim();
    let mut out = Array2::zeros((h, w));
    for q in 0..m {
        let (a, b) = (per_query_class_logits[[q, 0]], per_query_class_logits[[q, 1]]);
        let mx = a.max(b);
        let pf = (a - mx).exp() / ((a - mx).exp() + (b - mx).exp());
        out.zip_mut_with(&per_query_mask_logits.index_axis(ndarray::Axis(0), q), |o, &l| {
            *o += pf * crate::tape::sigmoid(l)
        });
    }
    out.mapv_inplace(|v: f64| v.clamp(0.0, 1.0));
    out
}

pub(crate) fn check_binary(gt: &Array2<f64>) -> Result<()> {
    if let Some(v) = gt.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("ground-truth mask must be binary, found {v}")));
    }
    Ok(())
}

/// `BCE(p, gt) + 1 - soft_dice(p, gt)` for one prediction.
pub fn loss(pred: &MaskPrediction, gt: &Array2<f64>) -> Result<f64> {
    if pred.semantic_prob.dim() != gt.dim() {
        return Err(Error::shape("loss", format!("{:?}", pred.semantic_prob.dim()), format!("{:?}", gt.dim())));
    }
    check_binary(gt)?;
    Ok(crate::tape::seg_loss_value(
        pred.semantic_prob.iter().copied(),
        gt.iter().copied(),
        gt.len(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const MASK_MLP: [&str; 4] = [
        "head.mask_mlp.fc1.weight",
        "head.mask_mlp.fc1.bias",
        "head.mask_mlp.fc2.weight",
        "head.mask_mlp.fc2.bias",
    ];

    fn head(m: usize) -> SegHead {
        SegHead::new(HeadConfig {
            query_dim: 8,
            width: 16,
            num_queries: m,
            upsample_factor: 4,
            seed: 3,
        })
        .unwrap()
    }

    fn features(seed: u64, batch: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap {
            data: Array3::from_shape_fn((batch, 16, 16), |_| rng.random_range(-2.0..2.0)),
            grid_h: 4,
            grid_w: 4,
        }
    }

    fn queries(seed: u64, m: usize) -> QueryBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QueryBank {
            q: Array2::from_shape_fn((m, 8), |_| rng.random_range(-1.0..1.0)),
        }
    }

    fn pred_from(prob: Array2<f64>) -> MaskPrediction {
        MaskPrediction {
            per_query_mask_logits: Array3::zeros((1, prob.nrows(), prob.ncols())),
            per_query_class_logits: Array2::zeros((1, 2)),
            semantic_prob: prob,
        }
    }

    #[test]
    fn zero_queries_and_zero_mask_mlp_give_half_sigmoid() {
        let mut h = head(5);
        for name in MASK_MLP {
            h.param_mut(name).unwrap().fill(0.0);
        }
        let q = QueryBank { q: Array2::zeros((5, 8)) };
        let pred = &h.predict(&features(0, 1), &q, Upsampling::Bilinear).unwrap()[0];
        assert_eq!(pred.per_query_mask_logits.dim(), (5, 16, 16));
        assert!(pred.per_query_mask_logits.iter().all(|&v| v == 0.0));
        // zero queries: class logits equal the bias for every query
        let b = h.params().get(5).clone();
        let pf = 1.0 / (1.0 + (b[[0, 1]] - b[[0, 0]]).exp());
        let expect = 0.5 * 5.0 * pf;
        assert!(pred.semantic_prob.iter().all(|v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn confident_no_object_suppresses_foreground() {
        let mut h = head(1);
        h.param_mut("head.cls.weight").unwrap().fill(0.0);
        // p_fg = 1 / (1 + e^{x}) = 1e-6  =>  x = ln(1e6 - 1)
        let b = h.param_mut("head.cls.bias").unwrap();
        b[[0, 0]] = 0.0;
        b[[0, 1]] = (1e6f64 - 1.0).ln();
        let pred = &h.predict(&features(1, 1), &queries(1, 1), Upsampling::Bilinear).unwrap()[0];
        assert!(pred.semantic_prob.iter().all(|&v| v <= 1e-6 + 1e-15));
    }

    #[test]
    fn semantic_probability_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut h = head(6);
        for trial in 0..1000u64 {
            if trial % 100 == 0 {
                let scale = rng.random_range(0.1..10.0);
                for name in MASK_MLP {
                    h.param_mut(name).unwrap().mapv_inplace(|_| rng.random_range(-scale..scale));
                }
                for name in ["head.cls.weight", "head.cls.bias"] {
                    h.param_mut(name).unwrap().mapv_inplace(|_| rng.random_range(-3.0..3.0));
                }
            }
            let mut f = features(trial, 1);
            f.data.mapv_inplace(|v| v * 3.0);
            let pred = &h.predict(&f, &queries(trial + 7, 6), Upsampling::Bilinear).unwrap()[0];
            assert!(pred.semantic_prob.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn semantic_probability_matches_its_definition_and_ignores_query_order() {
        let h = head(4);
        let pred = &h.predict(&features(2, 1), &queries(2, 4), Upsampling::Bilinear).unwrap()[0];
        let recomputed = semantic_probability(&pred.per_query_mask_logits, &pred.per_query_class_logits);
        for (a, b) in recomputed.iter().zip(pred.semantic_prob.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut q = queries(2, 4).q;
        q.invert_axis(ndarray::Axis(0));
        let flipped = &h.predict(&features(2, 1), &QueryBank { q }, Upsampling::Bilinear).unwrap()[0];
        for (a, b) in flipped.semantic_prob.iter().zip(pred.semantic_prob.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_predictions_match_single_predictions() {
        let h = head(3);
        let f = features(4, 2);
        let q = queries(4, 3);
        let both = h.predict(&f, &q, Upsampling::Nearest).unwrap();
        let single = FeatureMap {
            data: f.data.slice(s![1..2, .., ..]).to_owned(),
            ..f.clone()
        };
        let one = h.predict(&single, &q, Upsampling::Nearest).unwrap();
        assert_eq!(both[1], one[0]);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let h = head(3);
        let bad = QueryBank { q: Array2::zeros((3, 5)) };
        assert!(matches!(h.predict(&features(0, 1), &bad, Upsampling::Bilinear), Err(Error::Shape { .. })));
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let gt = Array2::from_shape_fn((8, 8), |(y, x)| if x + y < 7 { 1.0 } else { 0.0 });
        assert_eq!(loss(&pred_from(gt.clone()), &gt).unwrap(), 0.0);
        let empty = Array2::zeros((4, 4));
        assert_eq!(loss(&pred_from(empty.clone()), &empty).unwrap(), 0.0);
    }

    #[test]
    fn inverted_prediction_is_worse_than_matching_prediction() {
        let gt = Array2::from_shape_fn((6, 6), |(y, _)| if y < 2 { 1.0 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let noise: Array2<f64> = Array2::from_shape_fn((6, 6), |_| rng.random_range(0.0..0.3));
            // p close to gt versus its complement
            let p = Array2::from_shape_fn((6, 6), |(y, x)| (gt[[y, x]] - noise[[y, x]]).abs());
            let good = loss(&pred_from(p.clone()), &gt).unwrap();
            let bad = loss(&pred_from(p.mapv(|v| 1.0 - v)), &gt).unwrap();
            assert!(bad > good);
        }
        let inverted = loss(&pred_from(gt.mapv(|v| 1.0 - v)), &gt).unwrap();
        assert!(inverted > loss(&pred_from(gt.clone()), &gt).unwrap());
        assert!(inverted > 0.0);
    }

    #[test]
    fn uniform_half_prediction_has_ln2_bce() {
        let gt = Array2::from_shape_fn((4, 4), |(y, _)| if y < 2 { 1.0 } else { 0.0 });
        let total = loss(&pred_from(Array2::from_elem((4, 4), 0.5)), &gt).unwrap();
        // numeric oracle for the Dice part: 2*4 + 1 over 8 + 8 + 1
        let dice = (2.0 * 8.0 * 0.5 + 1.0) / (8.0 + 8.0 + 1.0);
        let bce = total - (1.0 - dice);
        let oracle: f64 = -(0..16).map(|_| 0.5f64.ln()).sum::<f64>() / 16.0;
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-9);
        assert!((bce - oracle).abs() < 1e-12);
    }

    #[test]
    fn non_binary_ground_truth_is_rejected() {
        let gt = Array2::from_elem((2, 2), 0.5);
        assert!(matches!(loss(&pred_from(Array2::zeros((2, 2))), &gt), Err(Error::Validation(_))));
    }
}
