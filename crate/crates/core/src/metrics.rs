//! Challenge metrics: Dice (DSC), Jaccard (JSC), two-class mIoU and the
//! leaderboard score `0.5 * DSC + 0.5 * JSC`.
//!
//! A class that is empty in both prediction and ground truth scores 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Pixel counts for one (prediction, ground truth) pair and one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub intersection: u64,
    pub pred_area: u64,
    pub gt_area: u64,
    pub union: u64,
}

impl PairCounts {
    /// Foreground counts.
    pub fn foreground(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<Self> {
        Self::count(pred, gt, true)
    }

    pub fn background(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<Self> {
        Self::count(pred, gt, false)
    }

    fn count(pred: &Array2<bool>, gt: &Array2<bool>, class: bool) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::shape("mask pair", format!("{:?}", gt.dim()), format!("{:?}", pred.dim())));
        }
        let mut c = Self::default();
        Zip::from(pred).and(gt).for_each(|&p, &g| {
            let (p, g) = (p == class, g == class);
            c.pred_area += p as u64;
            c.gt_area += g as u64;
            c.intersection += (p && g) as u64;
        });
        c.union = c.pred_area + c.gt_area - c.intersection;
        Ok(c)
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            intersection: self.intersection + other.intersection,
            pred_area: self.pred_area + other.pred_area,
            gt_area: self.gt_area + other.gt_area,
            union: self.union + other.union,
        }
    }

    pub fn dice(&self) -> f64 {
        let denom = self.pred_area + self.gt_area;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn dsc(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    Ok(PairCounts::foreground(pred, gt)?.dice())
}

pub fn jsc(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    Ok(PairCounts::foreground(pred, gt)?.iou())
}

/// Mean of foreground and background IoU.
pub fn miou(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    let fg = PairCounts::foreground(pred, gt)?;
    let bg = PairCounts::background(pred, gt)?;
    Ok(0.5 * (fg.iou() + bg.iou()))
}

pub fn challenge_score(dsc: f64, jsc: f64) -> Result<f64> {
    for (name, v) in [("dsc", dsc), ("jsc", jsc)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!("{name} = {v} is outside [0, 1]")));
        }
    }
    Ok(0.5 * dsc + 0.5 * jsc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub dsc: f64,
    pub miou: f64,
    pub jsc: f64,
    pub score: f64,
}

impl MetricRow {
    pub fn evaluate(name: impl Into<String>, pred: &Array2<bool>, gt: &Array2<bool>) -> Result<Self> {
        let fg = PairCounts::foreground(pred, gt)?;
        let bg = PairCounts::background(pred, gt)?;
        Ok(Self::from_counts(name, fg, bg))
    }

    fn from_counts(name: impl Into<String>, fg: PairCounts, bg: PairCounts) -> Self {
        let (d, j) = (fg.dice(), fg.iou());
        Self {
            name: name.into(),
            dsc: d,
            miou: 0.5 * (fg.iou() + bg.iou()),
            jsc: j,
            score: 0.5 * d + 0.5 * j,
        }
    }

    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.6},{:.6},{:.6}", self.name, self.dsc, self.miou, self.jsc, self.score)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// Metric per image, then the arithmetic mean.
    #[default]
    PerImage,
    /// Pixel counts summed over all images, then one metric.
    Pooled,
}

pub const CSV_HEADER: &str = "name,dsc,miou,jsc,score";
pub const AGGREGATE: &str = "AGGREGATE";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub aggregate: MetricRow,
}

impl MetricReport {
    /// Builds a report whose aggregate is the per-image mean of `rows`.
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let aggregate = MetricRow {
            name: AGGREGATE.to_string(),
            dsc: mean(|r| r.dsc),
            miou: mean(|r| r.miou),
            jsc: mean(|r| r.jsc),
            score: mean(|r| r.score),
        };
        Self { rows, aggregate }
    }

    /// Evaluates named (prediction, ground truth) pairs in order.
    pub fn evaluate<'a>(pairs: impl IntoIterator<Item = (String, &'a Array2<bool>, &'a Array2<bool>)>, mode: Aggregation) -> Result<Self> {
        let mut rows = Vec::new();
        let (mut fg_all, mut bg_all) = (PairCounts::default(), PairCounts::default());
        for (name, pred, gt) in pairs {
            let fg = PairCounts::foreground(pred, gt)?;
            let bg = PairCounts::background(pred, gt)?;
            fg_all = fg_all.merge(fg);
            bg_all = bg_all.merge(bg);
            rows.push(MetricRow::from_counts(name, fg, bg));
        }
        let mut report = Self::from_rows(rows);
        if mode == Aggregation::Pooled {
            report.aggregate = MetricRow::from_counts(AGGREGATE, fg_all, bg_all);
        }
        Ok(report)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CSV_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(out, "{}", r.csv_line()).unwrap();
        }
        writeln!(out, "{}", self.aggregate.csv_line()).unwrap();
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(Error::io(path))
    }
}

/// Reads an 8-bit mask; any nonzero pixel is foreground.
pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0] > 0))
}

/// Writes a mask as 8-bit grayscale, 0 = background, 255 = foreground.
pub fn save_mask(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }]));
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Uses `<dir>/masks` when `dir` is a dataset directory.
fn mask_dir(dir: &Path) -> PathBuf {
    let masks = dir.join("masks");
    if masks.is_dir() {
        masks
    } else {
        dir.to_path_buf()
    }
}

/// Scores every prediction mask in `pred_dir` against the same-stem mask in
/// `gt_dir`. Stems present on only one side are reported as an error.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, mode: Aggregation) -> Result<MetricReport> {
    let preds = png_stems(&mask_dir(pred_dir))?;
    let gts = png_stems(&mask_dir(gt_dir))?;
    let mut unmatched: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(|k| format!("{k} (prediction only)"))
        .collect();
    unmatched.extend(gts.keys().filter(|k| !preds.contains_key(*k)).map(|k| format!("{k} (ground truth only)")));
    if !unmatched.is_empty() {
        return Err(Error::Unmatched(unmatched));
    }
    if preds.is_empty() {
        return Err(Error::Ingestion(format!("no .png masks in {}", pred_dir.display())));
    }
    let loaded: Vec<(String, Array2<bool>, Array2<bool>)> = preds
        .par_iter()
        .map(|(stem, p)| Ok((stem.clone(), load_mask(p)?, load_mask(&gts[stem])?)))
        .collect::<Result<_>>()?;
    MetricReport::evaluate(loaded.iter().map(|(s, p, g)| (s.clone(), p, g)), mode)
}

/// Orders teams by descending score, ties broken by ascending name.
pub fn rank_teams<S: AsRef<str>>(scores: &[(S, f64)]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = scores.iter().map(|(n, s)| (n.as_ref().to_string(), *s)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Parses `name,score` lines; a non-numeric first line is taken as a header.
pub fn parse_scores_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, score) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::Validation(format!("line {}: expected `name,score`", i + 1)))?;
        match score.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => out.push((name.trim().to_string(), v)),
            Ok(_) => return Err(Error::Validation(format!("line {}: score must be finite", i + 1))),
            Err(_) if out.is_empty() && i == 0 => continue,
            Err(_) => return Err(Error::Validation(format!("line {}: bad score `{}`", i + 1, score.trim()))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// 4x4 fixture with |P| = 4, |G| = 6, |P & G| = 3.
    fn fixture() -> (Array2<bool>, Array2<bool>) {
        let mut p = Array2::from_elem((4, 4), false);
        let mut g = Array2::from_elem((4, 4), false);
        for &(y, x) in &[(0, 0), (0, 1), (0, 2), (3, 3)] {
            p[[y, x]] = true;
        }
        for &(y, x) in &[(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)] {
            g[[y, x]] = true;
        }
        (p, g)
    }

    /// Naive per-pixel counting, independent of `PairCounts`.
    fn oracle(p: &Array2<bool>, g: &Array2<bool>) -> (f64, f64, f64) {
        let (mut i, mut sp, mut sg, mut ib, mut spb, mut sgb) = (0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
        for y in 0..p.nrows() {
            for x in 0..p.ncols() {
                let (a, b) = (p[[y, x]], g[[y, x]]);
                if a {
                    sp += 1;
                } else {
                    spb += 1;
                }
                if b {
                    sg += 1;
                } else {
                    sgb += 1;
                }
                if a && b {
                    i += 1;
                }
                if !a && !b {
                    ib += 1;
                }
            }
        }
        let d = if sp + sg == 0 { 1.0 } else { 2.0 * i as f64 / (sp + sg) as f64 };
        let j = if sp + sg - i == 0 { 1.0 } else { i as f64 / (sp + sg - i) as f64 };
        let jb = if spb + sgb - ib == 0 { 1.0 } else { ib as f64 / (spb + sgb - ib) as f64 };
        (d, j, 0.5 * (j + jb))
    }

    #[test]
    fn fixture_values() {
        let (p, g) = fixture();
        assert_eq!(oracle(&p, &g).0, 0.6);
        assert_eq!(dsc(&p, &g).unwrap(), 0.6);
        assert!((jsc(&p, &g).unwrap() - 3.0 / 7.0).abs() < 1e-15);
        let bg = PairCounts::background(&p, &g).unwrap();
        assert_eq!((bg.pred_area, bg.gt_area, bg.intersection), (12, 10, 9));
        let expect = 0.5 * (3.0 / 7.0 + 9.0 / 13.0);
        assert!((miou(&p, &g).unwrap() - expect).abs() < 1e-15);
        assert!((miou(&p, &g).unwrap() - 0.5604).abs() < 1e-4);
        assert!((challenge_score(0.6, 3.0 / 7.0).unwrap() - 0.514286).abs() < 1e-6);
    }

    #[test]
    fn identical_and_disjoint_masks() {
        let (p, g) = fixture();
        assert_eq!(dsc(&g, &g).unwrap(), 1.0);
        assert_eq!(jsc(&g, &g).unwrap(), 1.0);
        assert_eq!(miou(&g, &g).unwrap(), 1.0);
        let disjoint = p.mapv(|_| false);
        let mut other = disjoint.clone();
        other[[3, 3]] = true;
        let mut one = disjoint.clone();
        one[[0, 0]] = true;
        assert_eq!(dsc(&one, &other).unwrap(), 0.0);
        let empty = Array2::from_elem((4, 4), false);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert_eq!(jsc(&empty, &empty).unwrap(), 1.0);
        assert_eq!(miou(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Array2::from_elem((2, 2), true);
        let b = Array2::from_elem((2, 3), true);
        assert!(matches!(dsc(&a, &b), Err(Error::Shape { .. })));
        assert!(jsc(&a, &b).is_err());
        assert!(miou(&a, &b).is_err());
    }

    #[test]
    fn challenge_score_validates_range() {
        assert_eq!(challenge_score(1.0, 1.0).unwrap(), 1.0);
        for x in [0.0, 0.25, 0.7719, 1.0] {
            assert!((challenge_score(x, x).unwrap() - x).abs() < 1e-15);
        }
        assert!(matches!(challenge_score(1.2, 0.5), Err(Error::Validation(_))));
        assert!(challenge_score(0.5, -0.1).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let row = MetricRow {
            name: "ConvNeXt".into(),
            dsc: 0.8568,
            miou: 0.7433,
            jsc: 0.7,
            score: 0.7784,
        };
        assert!(row.csv_line().starts_with("ConvNeXt,0.856800,0.743300,"));
        let report = MetricReport::from_rows(vec![
            MetricRow { name: "a".into(), dsc: 0.4, miou: 0.4, jsc: 0.4, score: 0.4 },
            MetricRow { name: "b".into(), dsc: 0.6, miou: 0.6, jsc: 0.6, score: 0.6 },
        ]);
        assert!((report.aggregate.score - 0.5).abs() < 1e-15);
        let csv = report.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[3], "AGGREGATE,0.500000,0.500000,0.500000,0.500000");
    }

    #[test]
    fn pooled_aggregation_sums_counts() {
        let (p, g) = fixture();
        let empty = Array2::from_elem((4, 4), false);
        let report = MetricReport::evaluate(
            vec![("x".to_string(), &p, &g), ("y".to_string(), &empty, &empty)],
            Aggregation::Pooled,
        )
        .unwrap();
        assert_eq!(report.aggregate.dsc, 0.6);
        let per_image = MetricReport::evaluate(
            vec![("x".to_string(), &p, &g), ("y".to_string(), &empty, &empty)],
            Aggregation::PerImage,
        )
        .unwrap();
        assert!((per_image.aggregate.dsc - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ranking_orders_by_score_then_name() {
        let ranked = rank_teams(&[("b", 0.5), ("a", 0.5), ("c", 0.9)]);
        let names: Vec<_> = ranked.iter().map(|r| r.0.as_str()).collect();
        assert_eq!(names, ["c", "a", "b"]);
    }

    #[test]
    fn scores_csv_parsing() {
        let parsed = parse_scores_csv("name,score\nZhijian Life,0.7719\nagalaran, 0.7865\n").unwrap();
        assert_eq!(parsed, vec![("Zhijian Life".to_string(), 0.7719), ("agalaran".to_string(), 0.7865)]);
        assert!(parse_scores_csv("a,1\nb,x\n").is_err());
        assert!(parse_scores_csv("a,inf\n").is_err());
    }

    #[test]
    fn evaluate_dirs_reports_unmatched_stems() {
        let dir = tempfile::tempdir().unwrap();
        let (pd, gd) = (dir.path().join("p"), dir.path().join("g"));
        fs::create_dir_all(&pd).unwrap();
        fs::create_dir_all(&gd).unwrap();
        let (p, g) = fixture();
        save_mask(&p, &pd.join("one.png")).unwrap();
        save_mask(&g, &gd.join("one.png")).unwrap();
        save_mask(&g, &gd.join("two.png")).unwrap();
        match evaluate_dirs(&pd, &gd, Aggregation::PerImage) {
            Err(Error::Unmatched(list)) => assert_eq!(list, vec!["two (ground truth only)".to_string()]),
            other => panic!("expected unmatched error, got {other:?}"),
        }
        save_mask(&g, &pd.join("two.png")).unwrap();
        let report = evaluate_dirs(&pd, &gd, Aggregation::PerImage).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].dsc, 0.6);
        assert_eq!(report.rows[1].score, 1.0);
        let same = evaluate_dirs(&gd, &gd, Aggregation::PerImage).unwrap();
        assert!(same.rows.iter().all(|r| r.dsc == 1.0 && r.jsc == 1.0 && r.miou == 1.0 && r.score == 1.0));
    }

    fn mask_pair() -> impl Strategy<Value = (Array2<bool>, Array2<bool>)> {
        (prop::collection::vec(any::<bool>(), 256), prop::collection::vec(any::<bool>(), 256)).prop_map(|(a, b)| {
            (
                Array2::from_shape_vec((16, 16), a).unwrap(),
                Array2::from_shape_vec((16, 16), b).unwrap(),
            )
        })
    }

    proptest! {
        #[test]
        fn metrics_match_counting_oracle((p, g) in mask_pair()) {
            let (d, j, mi) = oracle(&p, &g);
            prop_assert_eq!(dsc(&p, &g).unwrap(), d);
            prop_assert_eq!(jsc(&p, &g).unwrap(), j);
            prop_assert_eq!(miou(&p, &g).unwrap(), mi);
        }

        #[test]
        fn metrics_are_symmetric_and_bounded((p, g) in mask_pair()) {
            prop_assert_eq!(dsc(&p, &g).unwrap(), dsc(&g, &p).unwrap());
            prop_assert_eq!(jsc(&p, &g).unwrap(), jsc(&g, &p).unwrap());
            for v in [dsc(&p, &g).unwrap(), jsc(&p, &g).unwrap(), miou(&p, &g).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn jaccard_follows_from_dice((p, g) in mask_pair()) {
            prop_assume!(p.iter().zip(g.iter()).any(|(a, b)| *a || *b));
            let d = dsc(&p, &g).unwrap();
            prop_assert!((jsc(&p, &g).unwrap() - d / (2.0 - d)).abs() < 1e-12);
        }

        #[test]
        fn adding_a_true_positive_never_lowers_dice((p, g) in mask_pair(), idx in 0usize..256) {
            let (y, x) = (idx / 16, idx % 16);
            prop_assume!(g[[y, x]] && !p[[y, x]]);
            let mut better = p.clone();
            better[[y, x]] = true;
            prop_assert!(dsc(&better, &g).unwrap() >= dsc(&p, &g).unwrap());
        }
    }
}
