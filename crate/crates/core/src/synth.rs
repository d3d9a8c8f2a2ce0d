//! Synthetic two-modality corpora with known concept ground truth.
//!
//! A set of unit-norm latent concepts is pushed through two fixed random
//! linear maps, one per modality. Each matched pair shares a concept subset;
//! every token is the image of one of those concepts plus isotropic noise.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{PairedDataset, TokenSequence, BACKGROUND};
use crate::matrix::{norm, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_concepts: usize,
    pub latent_dim: usize,
    pub vision_dim: usize,
    pub language_dim: usize,
    /// Inclusive range of tokens per sample. The vision side uses `vision_grid` instead when set.
    pub tokens_per_sample: (usize, usize),
    /// Inclusive range of distinct concepts per pair.
    pub concepts_per_sample: (usize, usize),
    /// Per-coordinate standard deviation of the token noise.
    pub noise_sigma: f64,
    /// Scale of a per-pair perturbation of each concept latent, shared by both
    /// sides of the pair. Zero makes every occurrence of a concept identical.
    pub instance_jitter: f64,
    /// Each noisy token is scaled by `exp(spread * N(0, 1))`, leaving its
    /// direction untouched. Zero keeps every token at its natural norm.
    pub token_scale_spread: f64,
    /// Probability that a token beyond the concept-covering ones is background.
    pub background_rate: f64,
    pub vision_grid: Option<(usize, usize)>,
    pub num_train: usize,
    pub num_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_concepts: 8,
            latent_dim: 8,
            vision_dim: 32,
            language_dim: 24,
            tokens_per_sample: (4, 8),
            concepts_per_sample: (1, 3),
            noise_sigma: 0.05,
            instance_jitter: 0.0,
            token_scale_spread: 0.0,
            background_rate: 0.0,
            vision_grid: None,
            num_train: 2000,
            num_test: 200,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Usage(m));
        if self.num_concepts < 2 {
            return fail(format!("need at least 2 concepts, got {}", self.num_concepts));
        }
        if self.latent_dim == 0 || self.latent_dim > self.vision_dim.min(self.language_dim) {
            return fail(format!(
                "latent dim {} must be in 1..=min(D_v={}, D_l={})",
                self.latent_dim, self.vision_dim, self.language_dim
            ));
        }
        let (tmin, tmax) = self.tokens_per_sample;
        if tmin == 0 || tmin > tmax {
            return fail(format!("bad token range [{tmin}, {tmax}]"));
        }
        let (cmin, cmax) = self.concepts_per_sample;
        if cmin == 0 || cmin > cmax || cmax > self.num_concepts {
            return fail(format!("bad concepts-per-sample range [{cmin}, {cmax}]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(self.instance_jitter >= 0.0 && self.instance_jitter.is_finite()) {
            return fail(format!("instance jitter must be finite and >= 0, got {}", self.instance_jitter));
        }
        if !(self.token_scale_spread >= 0.0 && self.token_scale_spread.is_finite()) {
            return fail(format!("token scale spread must be finite and >= 0, got {}", self.token_scale_spread));
        }
        if !(0.0..1.0).contains(&self.background_rate) {
            return fail(format!("background rate must be in [0, 1), got {}", self.background_rate));
        }
        if let Some((r, c)) = self.vision_grid {
            if r * c == 0 {
                return fail("vision grid must have at least one patch".into());
            }
        }
        if self.num_train + self.num_test == 0 {
            return fail("no samples requested".into());
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: PairedDataset,
    pub test: PairedDataset,
    /// `C x d` unit-norm concept latents.
    pub concepts: Matrix,
    /// `D_v x d`.
    pub vision_map: Matrix,
    /// `D_l x d`.
    pub language_map: Matrix,
}

impl SyntheticData {
    /// One noise-free single-token prompt per concept, in the language space.
    pub fn concept_prompts(&self) -> Vec<TokenSequence> {
        (0..self.concepts.rows())
            .map(|c| {
                let tok = apply(&self.language_map, self.concepts.row(c));
                TokenSequence::new(c as u32, Matrix::from_vec(1, tok.len(), tok), None)
                    .expect("prompt tokens are finite")
            })
            .collect()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let nv = norm(&v);
        if nv > 1e-6 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

fn apply(map: &Matrix, latent: &[f64]) -> Vec<f64> {
    map.iter_rows().map(|row| crate::matrix::dot(row, latent)).collect()
}

/// Gram-Schmidt column-rank check.
fn full_column_rank(m: &Matrix) -> bool {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in 0..m.cols() {
        let mut v = m.column(c);
        for b in &basis {
            let proj = crate::matrix::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let n = norm(&v);
        if n < 1e-8 {
            return false;
        }
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    true
}

fn random_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let scale = 1.0 / (rows as f64).sqrt();
    loop {
        let data = gaussian_vec(rng, rows * cols).into_iter().map(|x| x * scale).collect();
        let m = Matrix::from_vec(rows, cols, data);
        if full_column_rank(&m) {
            return m;
        }
    }
}

struct SampleDraw {
    tokens: Matrix,
    labels: Vec<i32>,
}

fn draw_side(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    map: &Matrix,
    subset: &[usize],
    latents: &[Vec<f64>],
    len: usize,
) -> SampleDraw {
    let len = len.max(subset.len());
    let mut labels: Vec<i32> = subset.iter().map(|&c| c as i32).collect();
    while labels.len() < len {
        if spec.background_rate > 0.0 && rng.gen::<f64>() < spec.background_rate {
            labels.push(BACKGROUND);
        } else {
            labels.push(subset[rng.gen_range(0..subset.len())] as i32);
        }
    }
    labels.shuffle(rng);
    let dim = map.rows();
    let mut data = Vec::with_capacity(len * dim);
    for &label in &labels {
        let latent = if label == BACKGROUND {
            unit_vec(rng, spec.latent_dim)
        } else {
            let slot = subset.iter().position(|&c| c as i32 == label).expect("label from subset");
            latents[slot].clone()
        };
        let scale = if spec.token_scale_spread > 0.0 {
            (spec.token_scale_spread * rng.sample::<f64, _>(StandardNormal)).exp()
        } else {
            1.0
        };
        for x in apply(map, &latent) {
            let noisy = if spec.noise_sigma > 0.0 {
                x + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                x
            };
            // Stored precision, so in-memory and on-disk corpora coincide.
            data.push((scale * noisy) as f32 as f64);
        }
    }
    SampleDraw { tokens: Matrix::from_vec(len, dim, data), labels }
}

/// Deterministic in `spec` (including its seed).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.latent_dim;

    let concept_rows: Vec<Vec<f64>> = (0..spec.num_concepts).map(|_| unit_vec(&mut rng, d)).collect();
    let concepts = Matrix::from_rows(&concept_rows);
    let vision_map = random_map(&mut rng, spec.vision_dim, d);
    let language_map = random_map(&mut rng, spec.language_dim, d);

    let total = spec.num_train + spec.num_test;
    let mut vision = Vec::with_capacity(total);
    let mut language = Vec::with_capacity(total);
    let mut vision_labels = Vec::with_capacity(total);
    let mut language_labels = Vec::with_capacity(total);

    let (cmin, cmax) = spec.concepts_per_sample;
    let (tmin, tmax) = spec.tokens_per_sample;
    for i in 0..total {
        let size = rng.gen_range(cmin..=cmax);
        let mut subset = sample_indices(&mut rng, spec.num_concepts, size).into_vec();
        subset.sort_unstable();
        let latents: Vec<Vec<f64>> = subset
            .iter()
            .map(|&c| {
                let base = concepts.row(c);
                if spec.instance_jitter == 0.0 {
                    return base.to_vec();
                }
                let g = gaussian_vec(&mut rng, d);
                let scale = spec.instance_jitter / (d as f64).sqrt();
                let v: Vec<f64> = base.iter().zip(&g).map(|(b, n)| b + scale * n).collect();
                let n = norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();

        let (v_len, grid) = match spec.vision_grid {
            Some((r, c)) => (r * c, Some((r, c))),
            None => (rng.gen_range(tmin..=tmax), None),
        };
        let grid = grid.filter(|&(r, c)| r * c >= subset.len());
        let v = draw_side(&mut rng, spec, &vision_map, &subset, &latents, v_len);
        let l_len = rng.gen_range(tmin..=tmax);
        let l = draw_side(&mut rng, spec, &language_map, &subset, &latents, l_len);

        vision.push(TokenSequence::new(i as u32, v.tokens, grid)?);
        language.push(TokenSequence::new(i as u32, l.tokens, None)?);
        vision_labels.push(v.labels);
        language_labels.push(l.labels);
    }

    let split = |range: std::ops::Range<usize>| -> Result<PairedDataset> {
        let n = range.len();
        PairedDataset::new(
            vision[range.clone()].to_vec(),
            language[range.clone()].to_vec(),
            (0..n).map(|i| (i, i)).collect(),
        )?
        .with_labels(vision_labels[range.clone()].to_vec(), language_labels[range].to_vec())
    };
    Ok(SyntheticData {
        train: split(0..spec.num_train)?,
        test: split(spec.num_train..total)?,
        concepts,
        vision_map,
        language_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::dot;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (norm(a) * norm(b))
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            SyntheticSpec { num_concepts: 1, concepts_per_sample: (1, 1), ..Default::default() },
            SyntheticSpec { latent_dim: 30, ..Default::default() },
            SyntheticSpec { tokens_per_sample: (0, 3), ..Default::default() },
            SyntheticSpec { noise_sigma: -0.1, ..Default::default() },
            SyntheticSpec { concepts_per_sample: (2, 9), ..Default::default() },
        ] {
            assert!(matches!(generate_synthetic(&spec), Err(Error::Usage(_))), "{spec:?}");
        }
    }

    #[test]
    fn zero_noise_pairs_are_images_of_one_latent() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            concepts_per_sample: (1, 1),
            tokens_per_sample: (1, 1),
            num_train: 20,
            num_test: 0,
            seed: 3,
            ..Default::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        for i in 0..data.train.len() {
            let (v, l) = data.train.pair(i);
            let c = data.train.vision_labels.as_ref().unwrap()[i][0];
            assert_eq!(c, data.train.language_labels.as_ref().unwrap()[i][0]);
            let latent = data.concepts.row(c as usize);
            let want_v = apply(&data.vision_map, latent);
            let want_l = apply(&data.language_map, latent);
            for (x, y) in v.tokens().row(0).iter().zip(&want_v) {
                assert!((x - y).abs() < 1e-6);
            }
            for (x, y) in l.tokens().row(0).iter().zip(&want_l) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticSpec { num_train: 30, num_test: 5, instance_jitter: 0.3, seed: 11, ..Default::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_synthetic(&SyntheticSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn zero_noise_same_concept_tokens_are_colinear() {
        let spec = SyntheticSpec { noise_sigma: 0.0, num_train: 40, num_test: 0, seed: 5, ..Default::default() };
        let data = generate_synthetic(&spec).unwrap();
        let labels = data.train.vision_labels.as_ref().unwrap();
        let mut first: Vec<Option<Vec<f64>>> = vec![None; spec.num_concepts];
        for (s, lab) in data.train.vision.iter().zip(labels) {
            for (t, &c) in lab.iter().enumerate() {
                let tok = s.tokens().row(t).to_vec();
                match &first[c as usize] {
                    None => first[c as usize] = Some(tok),
                    Some(f) => assert!((cosine(f, &tok) - 1.0).abs() < 1e-6),
                }
            }
        }
    }

    #[test]
    fn labels_cover_each_sampled_concept() {
        let spec = SyntheticSpec { num_train: 50, num_test: 0, tokens_per_sample: (1, 2), concepts_per_sample: (2, 3), ..Default::default() };
        let data = generate_synthetic(&spec).unwrap();
        for i in 0..50 {
            let mut v: Vec<i32> = data.train.vision_labels.as_ref().unwrap()[i].clone();
            let mut l: Vec<i32> = data.train.language_labels.as_ref().unwrap()[i].clone();
            v.sort_unstable();
            v.dedup();
            l.sort_unstable();
            l.dedup();
            assert_eq!(v, l);
            assert!((2..=3).contains(&v.len()));
        }
    }

    #[test]
    fn grid_and_background_labels() {
        let spec = SyntheticSpec {
            vision_grid: Some((3, 4)),
            background_rate: 0.3,
            num_train: 30,
            num_test: 0,
            ..Default::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        assert!(data.train.vision.iter().all(|s| s.grid() == Some((3, 4)) && s.len() == 12));
        let labels = data.train.vision_labels.as_ref().unwrap();
        assert!(labels.iter().flatten().any(|&c| c == BACKGROUND));
    }

    #[test]
    fn concept_structure_visible_in_cosines() {
        let spec = SyntheticSpec {
            num_concepts: 8,
            latent_dim: 8,
            vision_dim: 32,
            language_dim: 24,
            noise_sigma: 0.05,
            num_train: 60,
            num_test: 0,
            seed: 2,
            ..Default::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        for (seqs, labels) in [
            (&data.train.vision, data.train.vision_labels.as_ref().unwrap()),
            (&data.train.language, data.train.language_labels.as_ref().unwrap()),
        ] {
            let toks: Vec<(&[f64], i32)> = seqs
                .iter()
                .zip(labels)
                .flat_map(|(s, l)| (0..s.len()).map(move |t| (s.tokens().row(t), l[t])))
                .collect();
            let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
            for i in 0..toks.len() {
                for j in i + 1..toks.len() {
                    let c = cosine(toks[i].0, toks[j].0);
                    if toks[i].1 == toks[j].1 {
                        same += c;
                        ns += 1;
                    } else {
                        diff += c;
                        nd += 1;
                    }
                }
            }
            assert!(same / ns as f64 > diff / nd as f64 + 0.1, "{} vs {}", same / ns as f64, diff / nd as f64);
        }
    }
}
