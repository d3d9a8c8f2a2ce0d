//! Retrieval, classification, dense labeling, anchor-overlap analysis and
//! attention heatmap export.
//!
//! All rankings break ties toward the lower index.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{TokenSequence, BACKGROUND};
use crate::matrix::{dot, norm, Matrix};
use crate::relrep::{forward, relative_representation, AnchorSet};

/// Cosine similarities between two lists of unit-norm pooled vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub s: Matrix,
    pub row_ids: Vec<u32>,
    pub col_ids: Vec<u32>,
}

impl SimilarityMatrix {
    pub fn from_pooled(h_a: &[Vec<f64>], row_ids: Vec<u32>, h_b: &[Vec<f64>], col_ids: Vec<u32>) -> Result<Self> {
        if h_a.len() != row_ids.len() || h_b.len() != col_ids.len() {
            return Err(Error::usage("id lists do not match representation counts"));
        }
        let mut s = Matrix::zeros(h_a.len(), h_b.len());
        for (i, a) in h_a.iter().enumerate() {
            for (j, b) in h_b.iter().enumerate() {
                if a.len() != b.len() {
                    return Err(Error::usage("representation lengths differ"));
                }
                s[(i, j)] = dot(a, b).clamp(-1.0, 1.0);
            }
        }
        Ok(Self { s, row_ids, col_ids })
    }
}

/// Recall@k for both retrieval directions.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    /// Rows query columns.
    pub a_to_b: Vec<f64>,
    /// Columns query rows.
    pub b_to_a: Vec<f64>,
}

impl RetrievalReport {
    pub fn recall_a_to_b(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.a_to_b[i])
    }

    pub fn recall_b_to_a(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.b_to_a[i])
    }
}

/// 0-based rank of `target` among `scores` (higher first, ties to lower index).
fn rank_of(scores: impl Iterator<Item = f64> + Clone, target: usize) -> usize {
    let t = scores.clone().nth(target).expect("target in range");
    scores
        .enumerate()
        .filter(|&(j, s)| s > t || (s == t && j < target))
        .count()
}

/// `pairs` hold (row sample id, column sample id).
pub fn retrieval_eval(sim: &SimilarityMatrix, pairs: &[(u32, u32)], ks: &[usize]) -> Result<RetrievalReport> {
    if pairs.is_empty() {
        return Err(Error::usage("no pairs to evaluate"));
    }
    if ks.contains(&0) {
        return Err(Error::usage("k must be >= 1"));
    }
    let find = |ids: &[u32], id: u32, side: &str| {
        ids.iter()
            .position(|&x| x == id)
            .ok_or_else(|| Error::usage(format!("{side} id {id} missing from similarity matrix")))
    };
    let mut ranks_ab = Vec::with_capacity(pairs.len());
    let mut ranks_ba = Vec::with_capacity(pairs.len());
    let (rows, cols) = (sim.s.rows(), sim.s.cols());
    for &(ra, cb) in pairs {
        let i = find(&sim.row_ids, ra, "row")?;
        let j = find(&sim.col_ids, cb, "column")?;
        ranks_ab.push(rank_of((0..cols).map(|c| sim.s[(i, c)]), j));
        ranks_ba.push(rank_of((0..rows).map(|r| sim.s[(r, j)]), i));
    }
    let recall = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64;
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        a_to_b: ks.iter().map(|&k| recall(&ranks_ab, k)).collect(),
        b_to_a: ks.iter().map(|&k| recall(&ranks_ba, k)).collect(),
    })
}

fn argmax(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyReport {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Predicts `argmax_c h_image . h_class[c]` and scores it against `labels`.
pub fn classify_eval(image_h: &[Vec<f64>], class_h: &[Vec<f64>], labels: &[usize]) -> Result<ClassifyReport> {
    if image_h.len() != labels.len() {
        return Err(Error::usage("one label per image is required"));
    }
    if class_h.is_empty() {
        return Err(Error::usage("no classes"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= class_h.len()) {
        return Err(Error::usage(format!("label {bad} out of range for {} classes", class_h.len())));
    }
    let predictions: Vec<usize> = image_h.iter().map(|h| argmax(class_h.iter().map(|c| dot(h, c)))).collect();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 };
    Ok(ClassifyReport { accuracy, predictions })
}

/// Per-patch class predictions for one grid sample. Each patch's relative
/// representation row is L2-normalized and scored against every class `h`;
/// patches whose best score falls below `fg_threshold` are labeled background.
pub fn dense_predict(
    seq: &TokenSequence,
    anchors_v: &AnchorSet,
    class_h: &[Vec<f64>],
    fg_threshold: Option<f64>,
) -> Result<Vec<i32>> {
    if seq.grid().is_none() {
        return Err(Error::usage(format!("sample {} has no patch grid", seq.sample_id())));
    }
    if class_h.is_empty() {
        return Err(Error::usage("no classes"));
    }
    let rel = relative_representation(seq, anchors_v)?;
    Ok(rel
        .r
        .iter_rows()
        .map(|row| {
            let n = norm(row).max(crate::relrep::NORM_EPS);
            let scores: Vec<f64> = class_h.iter().map(|c| dot(row, c) / n).collect();
            let best = argmax(scores.iter().copied());
            match fg_threshold {
                Some(th) if scores[best] < th => BACKGROUND,
                _ => best as i32,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseReport {
    pub miou_fg: f64,
    /// (class, IoU) for every foreground class present in the ground truth.
    pub per_class: Vec<(i32, f64)>,
}

/// Foreground mIoU accumulated over all patches of all samples.
pub fn miou_fg(predictions: &[Vec<i32>], ground_truth: &[Vec<i32>]) -> Result<DenseReport> {
    if predictions.len() != ground_truth.len()
        || predictions.iter().zip(ground_truth).any(|(p, g)| p.len() != g.len())
    {
        return Err(Error::usage("predictions and ground truth differ in shape"));
    }
    let present: BTreeSet<i32> = ground_truth.iter().flatten().copied().filter(|&c| c != BACKGROUND).collect();
    if present.is_empty() {
        return Err(Error::usage("ground truth has no foreground patches"));
    }
    let per_class: Vec<(i32, f64)> = present
        .iter()
        .map(|&c| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (p, g) in predictions.iter().flatten().zip(ground_truth.iter().flatten()) {
                let (hp, hg) = (*p == c, *g == c);
                inter += usize::from(hp && hg);
                union += usize::from(hp || hg);
            }
            (c, inter as f64 / union as f64)
        })
        .collect();
    let miou = per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64;
    Ok(DenseReport { miou_fg: miou, per_class })
}

/// Dense labeling of many grid samples followed by [`miou_fg`].
pub fn dense_eval(
    seqs: &[TokenSequence],
    ground_truth: &[Vec<i32>],
    anchors_v: &AnchorSet,
    class_h: &[Vec<f64>],
    fg_threshold: Option<f64>,
) -> Result<DenseReport> {
    let preds = seqs
        .iter()
        .map(|s| dense_predict(s, anchors_v, class_h, fg_threshold))
        .collect::<Result<Vec<_>>>()?;
    miou_fg(&preds, ground_truth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapReport {
    pub k_top: usize,
    pub mean_hard_overlap_matched: f64,
    pub mean_hard_overlap_mismatched: f64,
    pub mean_dice_matched: f64,
    pub mean_dice_mismatched: f64,
}

impl OverlapReport {
    pub fn to_kv(&self) -> String {
        format!(
            "k_top={}\nmean_hard_overlap_matched={:?}\nmean_hard_overlap_mismatched={:?}\nmean_dice_matched={:?}\nmean_dice_mismatched={:?}\n",
            self.k_top,
            self.mean_hard_overlap_matched,
            self.mean_hard_overlap_mismatched,
            self.mean_dice_matched,
            self.mean_dice_mismatched
        )
    }
}

/// Indices of the `k` largest entries, ties to the lower index.
pub fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `|A ∩ B| / k` over top-k index sets.
pub fn hard_overlap(p_a: &[f64], p_b: &[f64], k: usize) -> f64 {
    let a: BTreeSet<usize> = top_k(p_a, k).into_iter().collect();
    let b: BTreeSet<usize> = top_k(p_b, k).into_iter().collect();
    a.intersection(&b).count() as f64 / k as f64
}

/// Soft Dice over shifted activation mass: inside the union of the two top-k
/// sets each side's activations are shifted by their minimum over the union
/// and zeroed outside their own top-k set.
pub fn soft_dice(p_a: &[f64], p_b: &[f64], k: usize) -> f64 {
    let a = top_k(p_a, k);
    let b = top_k(p_b, k);
    let union: BTreeSet<usize> = a.iter().chain(&b).copied().collect();
    let weights = |p: &[f64], top: &[usize]| -> Vec<f64> {
        let min = union.iter().map(|&i| p[i]).fold(f64::INFINITY, f64::min);
        union.iter().map(|&i| if top.contains(&i) { p[i] - min } else { 0.0 }).collect()
    };
    let wa = weights(p_a, &a);
    let wb = weights(p_b, &b);
    let denom: f64 = wa.iter().sum::<f64>() + wb.iter().sum::<f64>();
    if denom <= 0.0 {
        return hard_overlap(p_a, p_b, k);
    }
    2.0 * wa.iter().zip(&wb).map(|(x, y)| x.min(*y)).sum::<f64>() / denom
}

/// Compares top-k anchor sets of matched pairs against one uniformly drawn
/// mismatched partner per pair. `pairs` index into `p_v` and `p_l`.
pub fn anchor_overlap(
    p_v: &[Vec<f64>],
    p_l: &[Vec<f64>],
    pairs: &[(usize, usize)],
    k_top: usize,
    seed: u64,
) -> Result<OverlapReport> {
    let k = p_v.first().map_or(0, Vec::len);
    if k_top == 0 || k_top > k {
        return Err(Error::usage(format!("k_top={k_top} must be in 1..={k}")));
    }
    if pairs.is_empty() {
        return Err(Error::usage("no pairs"));
    }
    if pairs.iter().any(|&(a, b)| a >= p_v.len() || b >= p_l.len()) {
        return Err(Error::usage("pair index out of range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hm, mut hx, mut dm, mut dx) = (0.0, 0.0, 0.0, 0.0);
    let mut mismatched = 0usize;
    for (i, &(a, b)) in pairs.iter().enumerate() {
        hm += hard_overlap(&p_v[a], &p_l[b], k_top);
        dm += soft_dice(&p_v[a], &p_l[b], k_top);
        if pairs.len() > 1 {
            let mut j = rng.gen_range(0..pairs.len() - 1);
            if j >= i {
                j += 1;
            }
            let other = pairs[j].1;
            hx += hard_overlap(&p_v[a], &p_l[other], k_top);
            dx += soft_dice(&p_v[a], &p_l[other], k_top);
            mismatched += 1;
        }
    }
    let n = pairs.len() as f64;
    let nx = mismatched.max(1) as f64;
    Ok(OverlapReport {
        k_top,
        mean_hard_overlap_matched: hm / n,
        mean_hard_overlap_mismatched: hx / nx,
        mean_dice_matched: dm / n,
        mean_dice_mismatched: dx / nx,
    })
}

/// Flat file contents produced by [`render_heatmaps`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    pub anchor: usize,
    /// Binary 8-bit PGM of the vision attention column, patch resolution.
    pub vision_pgm: Vec<u8>,
    /// `row,col,alpha` with raw, unscaled values.
    pub vision_csv: String,
    /// `token,alpha,flagged` where `flagged` marks values above 0.5.
    pub text_csv: String,
    pub vision_alpha: Vec<f64>,
    pub text_alpha: Vec<f64>,
}

/// Attention values above this are flagged in the text listing.
pub const TEXT_FLAG_THRESHOLD: f64 = 0.5;

fn pgm(values: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > min {
            (255.0 * (v - min) / (max - min)).round() as u8
        } else {
            255
        }
    }));
    out
}

pub fn render_heatmaps(
    vision: &TokenSequence,
    anchors_v: &AnchorSet,
    text: &TokenSequence,
    anchors_l: &AnchorSet,
    anchor_ids: &[usize],
    tau_p: f64,
) -> Result<Vec<HeatmapSet>> {
    let (rows, cols) = vision
        .grid()
        .ok_or_else(|| Error::usage(format!("sample {} has no patch grid", vision.sample_id())))?;
    let k = anchors_v.k().min(anchors_l.k());
    if let Some(bad) = anchor_ids.iter().find(|&&a| a >= k) {
        return Err(Error::usage(format!("anchor id {bad} out of range for K={k}")));
    }
    let fv = forward(vision, anchors_v, tau_p)?;
    let fl = forward(text, anchors_l, tau_p)?;
    let av = fv.relrep.alpha.expect("forward fills alpha");
    let al = fl.relrep.alpha.expect("forward fills alpha");
    Ok(anchor_ids
        .iter()
        .map(|&a| {
            let vision_alpha = av.column(a);
            let text_alpha = al.column(a);
            let mut vision_csv = String::from("row,col,alpha\n");
            for (t, v) in vision_alpha.iter().enumerate() {
                let _ = writeln!(vision_csv, "{},{},{:?}", t / cols, t % cols, v);
            }
            let mut text_csv = String::from("token,alpha,flagged\n");
            for (t, v) in text_alpha.iter().enumerate() {
                let _ = writeln!(text_csv, "{t},{v:?},{}", u8::from(*v > TEXT_FLAG_THRESHOLD));
            }
            HeatmapSet { anchor: a, vision_pgm: pgm(&vision_alpha, rows, cols), vision_csv, text_csv, vision_alpha, text_alpha }
        })
        .collect())
}

/// Writes `anchor_<k>_vision.pgm`, `anchor_<k>_vision.csv` and
/// `anchor_<k>_text.csv` for every requested anchor under `out_dir`.
pub fn export_heatmaps(
    vision: &TokenSequence,
    anchors_v: &AnchorSet,
    text: &TokenSequence,
    anchors_l: &AnchorSet,
    anchor_ids: &[usize],
    tau_p: f64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let sets = render_heatmaps(vision, anchors_v, text, anchors_l, anchor_ids, tau_p)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let stem = format!("sample_{}", vision.sample_id());
    for set in sets {
        for (suffix, bytes) in [
            ("vision.pgm", set.vision_pgm.as_slice()),
            ("vision.csv", set.vision_csv.as_bytes()),
            ("text.csv", set.text_csv.as_bytes()),
        ] {
            let path = out_dir.join(format!("{stem}_anchor_{}_{suffix}", set.anchor));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub dataset: String,
    pub direction: String,
    pub k: Option<usize>,
    pub value: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,dataset,direction,k,value\n");
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{:?}", r.metric, r.dataset, r.direction, k, r.value);
    }
    out
}

impl RetrievalReport {
    pub fn metric_rows(&self, dataset: &str) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for (dir, vals) in [("a2b", &self.a_to_b), ("b2a", &self.b_to_a)] {
            for (&k, &v) in self.ks.iter().zip(vals.iter()) {
                rows.push(MetricRow { metric: "recall".into(), dataset: dataset.into(), direction: dir.into(), k: Some(k), value: v });
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Modality;

    fn sim(rows: Vec<Vec<f64>>) -> SimilarityMatrix {
        let n = rows.len() as u32;
        let m = rows[0].len() as u32;
        SimilarityMatrix { s: Matrix::from_rows(&rows), row_ids: (0..n).collect(), col_ids: (0..m).collect() }
    }

    fn diag_pairs(n: u32) -> Vec<(u32, u32)> {
        (0..n).map(|i| (i, i)).collect()
    }

    #[test]
    fn identity_like_gives_perfect_recall() {
        let s = sim(vec![vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.3], vec![-0.1, 0.0, 0.5]]);
        let r = retrieval_eval(&s, &diag_pairs(3), &[1]).unwrap();
        assert_eq!((r.a_to_b[0], r.b_to_a[0]), (1.0, 1.0));
    }

    #[test]
    fn constant_matrix_only_first_match_wins() {
        let s = sim(vec![vec![0.3; 4]; 4]);
        let r = retrieval_eval(&s, &diag_pairs(4), &[1, 2, 4]).unwrap();
        assert_eq!(r.a_to_b, vec![0.25, 0.5, 1.0]);
        assert_eq!(r.b_to_a, vec![0.25, 0.5, 1.0]);
    }

    #[test]
    fn missing_pair_id_rejected() {
        let s = sim(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(retrieval_eval(&s, &[(0, 7)], &[1]), Err(Error::Usage(_))));
    }

    #[test]
    fn classify_cases() {
        let classes = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = classify_eval(&classes, &classes, &[0, 1]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let r = classify_eval(&classes, &classes, &[1, 0]).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert!(classify_eval(&classes, &classes, &[0, 2]).is_err());
        // ties go to the lower class index
        let r = classify_eval(&[vec![1.0, 1.0]], &classes, &[0]).unwrap();
        assert_eq!(r.predictions, vec![0]);
    }

    #[test]
    fn miou_extremes_and_hand_count() {
        let gt = vec![vec![0, 0, 1, -1]];
        assert_eq!(miou_fg(&gt, &gt).unwrap().miou_fg, 1.0);
        assert_eq!(miou_fg(&[vec![1, 1, 0, 0]], &gt).unwrap().miou_fg, 0.0);
        // class 0: inter 1, union 3; class 1: inter 1, union 2
        let r = miou_fg(&[vec![0, 1, 1, 0]], &gt).unwrap();
        assert!((r.miou_fg - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn dense_requires_grid() {
        let seq = TokenSequence::new(0, Matrix::from_rows(&[vec![1.0, 0.0]]), None).unwrap();
        let a = AnchorSet::new(Modality::Vision, Matrix::from_rows(&[vec![1.0, 0.0]])).unwrap();
        assert!(matches!(dense_predict(&seq, &a, &[vec![1.0]], None), Err(Error::Usage(_))));
    }

    #[test]
    fn dense_threshold_marks_background() {
        let seq = TokenSequence::new(0, Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), Some((1, 2))).unwrap();
        let a = AnchorSet::new(Modality::Vision, Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        let classes = vec![vec![1.0, 0.0]];
        assert_eq!(dense_predict(&seq, &a, &classes, None).unwrap(), vec![0, 0]);
        assert_eq!(dense_predict(&seq, &a, &classes, Some(0.5)).unwrap(), vec![0, BACKGROUND]);
    }

    #[test]
    fn overlap_identity_and_disjoint() {
        let p: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        assert_eq!(hard_overlap(&p, &p, 5), 1.0);
        assert_eq!(soft_dice(&p, &p, 5), 1.0);
        let q: Vec<f64> = p.iter().map(|x| -x).collect();
        assert_eq!(hard_overlap(&p, &q, 5), 0.0);
        assert_eq!(soft_dice(&p, &q, 5), 0.0);
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k(&[0.5, 0.7, 0.5, 0.7], 3), vec![1, 3, 0]);
    }

    #[test]
    fn overlap_report_errors_and_self() {
        let p = vec![vec![0.1, 0.5, 0.2, 0.9, 0.3, 0.4]; 3];
        let pairs = vec![(0, 0), (1, 1), (2, 2)];
        let r = anchor_overlap(&p, &p, &pairs, 5, 0).unwrap();
        assert_eq!(r.mean_hard_overlap_matched, 1.0);
        assert_eq!(r.mean_dice_matched, 1.0);
        assert!(anchor_overlap(&p, &p, &pairs, 7, 0).is_err());
    }

    #[test]
    fn uniform_attention_gives_constant_graymap() {
        let img = pgm(&[0.0625; 16], 4, 4);
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert!(img[header.len()..].iter().all(|&b| b == 255));
    }

    #[test]
    fn single_token_text_is_flagged() {
        let v = TokenSequence::new(0, Matrix::from_rows(&[vec![1.0, 0.2], vec![0.3, 1.0]]), Some((1, 2))).unwrap();
        let t = TokenSequence::new(0, Matrix::from_rows(&[vec![0.5, 0.5, 0.1]]), None).unwrap();
        let av = AnchorSet::new(Modality::Vision, Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        let al = AnchorSet::new(Modality::Language, Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]])).unwrap();
        let sets = render_heatmaps(&v, &av, &t, &al, &[1], 0.03).unwrap();
        assert_eq!(sets[0].text_alpha, vec![1.0]);
        assert_eq!(sets[0].text_csv, "token,alpha,flagged\n0,1.0,1\n");
        assert!(render_heatmaps(&v, &av, &t, &al, &[2], 0.03).is_err());
    }
}
