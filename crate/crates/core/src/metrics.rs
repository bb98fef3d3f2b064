//! Evaluation metrics for edited images.
//!
//! * CS: cosine similarity between the image embedding and the prompt embedding.
//! * SD: squared distance between the patch self-similarity matrices of the
//!   two images, divided by the number of matrix entries.
//! * BD: squared pixel distance over background pixels, divided by the number
//!   of background pixels.
//!
//! Images are `[H, W, 3]` arrays in `[0, 1]`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backends::{cosine_similarity, JointEncoder};
use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Latent;

/// CLIP-style similarity of an image and a prompt.
pub fn clip_similarity(image: &Latent, prompt: &str, encoder: &dyn JointEncoder) -> Result<f64> {
    if prompt.trim().is_empty() {
        return Err(Error::InvalidInput("prompt is empty".into()));
    }
    let e_img = encoder.encode_image(&imageio::to_model_range(image))?;
    let e_txt = encoder.encode_text(prompt)?;
    Ok(cosine_similarity(&e_img, &e_txt))
}

/// Patch-token features of an image, one row per patch.
pub trait StructureEncoder: Send + Sync {
    fn patch_features(&self, image: &Latent) -> Result<Array2<f64>>;
}

/// Splits the image into `patch × patch` tiles and projects each flattened
/// tile with a fixed seeded Gaussian matrix. Edge tiles are zero-padded.
#[derive(Debug, Clone)]
pub struct PatchProjectionEncoder {
    patch: usize,
    dim: usize,
    seed: u64,
}

impl PatchProjectionEncoder {
    pub fn new(patch: usize, dim: usize, seed: u64) -> Result<Self> {
        if patch == 0 || dim == 0 {
            return Err(Error::InvalidInput(
                "patch size and feature dim must be positive".into(),
            ));
        }
        Ok(Self { patch, dim, seed })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    fn projection(&self, len: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (len as u64).rotate_left(32));
        let scale = 1.0 / (len as f64).sqrt();
        Array2::from_shape_fn((self.dim, len), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
    }
}

impl Default for PatchProjectionEncoder {
    fn default() -> Self {
        Self {
            patch: 4,
            dim: 16,
            seed: 0,
        }
    }
}

impl StructureEncoder for PatchProjectionEncoder {
    fn patch_features(&self, image: &Latent) -> Result<Array2<f64>> {
        let (h, w) = imageio::rgb_dims(image)?;
        let p = self.patch;
        let (ph, pw) = (h.div_ceil(p), w.div_ceil(p));
        let len = p * p * 3;
        let proj = self.projection(len);
        let mut out = Array2::zeros((ph * pw, self.dim));
        let mut tile = ndarray::Array1::zeros(len);
        for i in 0..ph {
            for j in 0..pw {
                tile.fill(0.0);
                for di in 0..p {
                    for dj in 0..p {
                        let (r, c) = (i * p + di, j * p + dj);
                        if r < h && c < w {
                            for ch in 0..3 {
                                tile[(di * p + dj) * 3 + ch] = image[[r, c, ch]];
                            }
                        }
                    }
                }
                out.row_mut(i * pw + j).assign(&proj.dot(&tile));
            }
        }
        Ok(out)
    }
}

fn cosine_rows(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Cosine similarity between every pair of rows.
pub fn self_similarity(features: &Array2<f64>) -> Array2<f64> {
    let n = features.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| cosine_rows(features.row(i), features.row(j)))
}

/// `Σ (S − S')² / n²` over the two patch self-similarity matrices.
pub fn structure_distance(src: &Latent, tgt: &Latent, encoder: &dyn StructureEncoder) -> Result<f64> {
    if src.shape() != tgt.shape() {
        return Err(Error::ShapeMismatch {
            expected: src.shape().to_vec(),
            got: tgt.shape().to_vec(),
        });
    }
    let a = self_similarity(&encoder.patch_features(src)?);
    let b = self_similarity(&encoder.patch_features(tgt)?);
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.nrows(), a.ncols()],
            got: vec![b.nrows(), b.ncols()],
        });
    }
    let total: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(total / a.len() as f64)
}

/// Squared pixel distance over background pixels (mask `true`), divided by
/// the background pixel count. A mask with no background is an error.
pub fn background_distance(src: &Latent, tgt: &Latent, mask: &Array2<bool>) -> Result<f64> {
    let (h, w) = imageio::rgb_dims(src)?;
    if src.shape() != tgt.shape() {
        return Err(Error::ShapeMismatch {
            expected: src.shape().to_vec(),
            got: tgt.shape().to_vec(),
        });
    }
    if mask.dim() != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            got: mask.shape().to_vec(),
        });
    }
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::InvalidInput("mask marks no background pixels".into()));
    }
    let mut total = 0.0;
    for ((r, c), &bg) in mask.indexed_iter() {
        if bg {
            for ch in 0..3 {
                let d = src[[r, c, ch]] - tgt[[r, c, ch]];
                total += d * d;
            }
        }
    }
    Ok(total / count as f64)
}

/// One row of a metrics manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub task: String,
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub prompt: String,
    pub mask: Option<PathBuf>,
}

/// Read a manifest CSV with columns `pair_id,src,tgt,prompt,mask` and an
/// optional `task` column. Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| {
        col(name).ok_or_else(|| Error::InvalidInput(format!("{}: manifest lacks a `{name}` column", path.display())))
    };
    let (id_c, src_c, tgt_c, prompt_c) = (need("pair_id")?, need("src")?, need("tgt")?, need("prompt")?);
    let mask_c = col("mask");
    let task_c = col("task");
    let resolve = |s: &str| {
        let p = PathBuf::from(s);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("").to_string();
        let prompt = field(prompt_c);
        if prompt.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{}: row {} has an empty prompt",
                path.display(),
                i + 2
            )));
        }
        out.push(ManifestEntry {
            pair_id: field(id_c),
            task: task_c
                .map(field)
                .filter(|t| !t.is_empty())
                .unwrap_or_else(|| "all".into()),
            src: resolve(&field(src_c)),
            tgt: resolve(&field(tgt_c)),
            prompt,
            mask: mask_c.map(field).filter(|m| !m.is_empty()).map(|m| resolve(&m)),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub pair_id: String,
    pub task: String,
    pub cs: f64,
    pub sd: f64,
    pub bd: Option<f64>,
}

/// Means of one task's rows. `bd` averages only rows that have a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSummary {
    pub task: String,
    pub count: usize,
    pub cs: f64,
    pub sd: f64,
    pub bd: Option<f64>,
    pub bd_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn summaries(&self) -> Vec<TaskSummary> {
        let mut groups: BTreeMap<&str, Vec<&MetricRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(&r.task).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|(task, rows)| {
                let n = rows.len() as f64;
                let bds: Vec<f64> = rows.iter().filter_map(|r| r.bd).collect();
                TaskSummary {
                    task: task.to_string(),
                    count: rows.len(),
                    cs: rows.iter().map(|r| r.cs).sum::<f64>() / n,
                    sd: rows.iter().map(|r| r.sd).sum::<f64>() / n,
                    bd: (!bds.is_empty()).then(|| bds.iter().sum::<f64>() / bds.len() as f64),
                    bd_count: bds.len(),
                }
            })
            .collect()
    }

    /// CSV with a `pair_id,task,cs,sd,bd,count` header, one row per pair, and
    /// one `mean` row per task whose `count` column holds the pair count.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["pair_id", "task", "cs", "sd", "bd", "count"])?;
        for r in &self.rows {
            let bd = r.bd.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([&r.pair_id, &r.task, &r.cs.to_string(), &r.sd.to_string(), &bd, ""])?;
        }
        for s in self.summaries() {
            let bd = s.bd.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                "mean",
                &s.task,
                &s.cs.to_string(),
                &s.sd.to_string(),
                &bd,
                &s.count.to_string(),
            ])?;
        }
        w.into_inner()
            .map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))
    }
}

/// Evaluate one manifest entry.
pub fn evaluate_entry(
    entry: &ManifestEntry,
    encoder: &dyn JointEncoder,
    structure: &dyn StructureEncoder,
) -> Result<MetricRow> {
    let src = imageio::load_rgb(&entry.src)?;
    let tgt = imageio::load_rgb(&entry.tgt)?;
    let bd = match &entry.mask {
        Some(m) => Some(background_distance(&src, &tgt, &imageio::load_mask(m)?)?),
        None => None,
    };
    Ok(MetricRow {
        pair_id: entry.pair_id.clone(),
        task: entry.task.clone(),
        cs: clip_similarity(&tgt, &entry.prompt, encoder)?,
        sd: structure_distance(&src, &tgt, structure)?,
        bd,
    })
}

/// Evaluate every entry, in parallel, keeping manifest order.
pub fn evaluate_manifest(
    entries: &[ManifestEntry],
    encoder: &dyn JointEncoder,
    structure: &dyn StructureEncoder,
) -> Result<MetricReport> {
    use rayon::prelude::*;
    let rows = entries
        .par_iter()
        .map(|e| {
            evaluate_entry(e, encoder, structure)
                .map_err(|err| Error::InvalidInput(format!("pair `{}`: {err}", e.pair_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::VocabularyEncoder;
    use ndarray::{Array1, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    struct HandSet(Array2<f64>);
    impl StructureEncoder for HandSet {
        fn patch_features(&self, image: &Latent) -> Result<Array2<f64>> {
            // features depend on the image only through its first pixel
            Ok(&self.0 * (1.0 + image[[0, 0, 0]]))
        }
    }

    fn brute_sd(fa: &Array2<f64>, fb: &Array2<f64>) -> f64 {
        let n = fa.nrows();
        let cos = |f: &Array2<f64>, i: usize, j: usize| {
            let mut dot = 0.0;
            let mut ni = 0.0;
            let mut nj = 0.0;
            for k in 0..f.ncols() {
                dot += f[[i, k]] * f[[j, k]];
                ni += f[[i, k]] * f[[i, k]];
                nj += f[[j, k]] * f[[j, k]];
            }
            if ni == 0.0 || nj == 0.0 {
                0.0
            } else {
                dot / (ni.sqrt() * nj.sqrt())
            }
        };
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = cos(fa, i, j) - cos(fb, i, j);
                total += d * d;
            }
        }
        total / (n * n) as f64
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[h, w, 3]), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn sd_is_zero_on_identical_images() {
        let img = random_image(1, 8, 8);
        let enc = PatchProjectionEncoder::default();
        assert_eq!(structure_distance(&img, &img, &enc).unwrap(), 0.0);
    }

    #[test]
    fn sd_matches_brute_force_with_hand_set_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        let mut other = base.clone();
        other.row_mut(2).assign(&Array1::from(vec![0.9, -0.1, 0.3, 0.0]));
        let img = random_image(2, 4, 4);
        let sd = {
            let a = self_similarity(&HandSet(base.clone()).patch_features(&img).unwrap());
            let b = self_similarity(&HandSet(other.clone()).patch_features(&img).unwrap());
            a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
        };
        assert!((sd - brute_sd(&base, &other)).abs() <= 1e-10);
        assert!(sd > 0.0);
    }

    #[test]
    fn sd_matches_brute_force_with_projection_encoder() {
        let enc = PatchProjectionEncoder::new(3, 8, 5).unwrap();
        let a = random_image(4, 7, 9);
        let b = random_image(5, 7, 9);
        let sd = structure_distance(&a, &b, &enc).unwrap();
        let oracle = brute_sd(&enc.patch_features(&a).unwrap(), &enc.patch_features(&b).unwrap());
        assert!((sd - oracle).abs() <= 1e-10);
        assert_eq!(enc.patch_features(&a).unwrap().nrows(), 3 * 3);
    }

    #[test]
    fn sd_is_invariant_to_shared_patch_permutation() {
        struct Permuted<'a>(&'a PatchProjectionEncoder, Vec<usize>);
        impl StructureEncoder for Permuted<'_> {
            fn patch_features(&self, image: &Latent) -> Result<Array2<f64>> {
                let f = self.0.patch_features(image)?;
                Ok(f.select(ndarray::Axis(0), &self.1))
            }
        }
        let enc = PatchProjectionEncoder::new(2, 6, 1).unwrap();
        let a = random_image(6, 6, 6);
        let b = random_image(7, 6, 6);
        let perm = vec![4, 1, 7, 0, 8, 2, 3, 6, 5];
        let plain = structure_distance(&a, &b, &enc).unwrap();
        let permuted = structure_distance(&a, &b, &Permuted(&enc, perm)).unwrap();
        assert!((plain - permuted).abs() < 1e-14);
    }

    #[test]
    fn sd_rejects_resolution_mismatch() {
        let enc = PatchProjectionEncoder::default();
        assert!(structure_distance(&random_image(1, 4, 4), &random_image(1, 4, 8), &enc).is_err());
    }

    #[test]
    fn bd_cases() {
        let a = random_image(8, 10, 12);
        let mut mask = Array2::from_elem((10, 12), false);
        for r in 0..10 {
            for c in 0..10 {
                mask[[r, c]] = true;
            }
        }
        assert_eq!(background_distance(&a, &a, &mask).unwrap(), 0.0);

        let mut b = a.clone();
        b[[3, 4, 1]] += 1.0;
        assert!((background_distance(&a, &b, &mask).unwrap() - 0.01).abs() < 1e-15);

        // foreground edits do not register
        let mut c = b.clone();
        c[[2, 11, 0]] = 0.0;
        c[[9, 10, 2]] = 1.0;
        assert_eq!(
            background_distance(&a, &b, &mask).unwrap(),
            background_distance(&a, &c, &mask).unwrap()
        );

        let none = Array2::from_elem((10, 12), false);
        assert!(matches!(
            background_distance(&a, &b, &none),
            Err(Error::InvalidInput(_))
        ));
        assert!(background_distance(&a, &b, &Array2::from_elem((10, 10), true)).is_err());
    }

    #[test]
    fn bd_matches_brute_force() {
        let a = random_image(9, 5, 5);
        let b = random_image(10, 5, 5);
        let mask = Array2::from_shape_fn((5, 5), |(r, c)| (r + c) % 3 != 0);
        let mut total = 0.0;
        let mut n = 0;
        for r in 0..5 {
            for c in 0..5 {
                if mask[[r, c]] {
                    n += 1;
                    for ch in 0..3 {
                        total += (a[[r, c, ch]] - b[[r, c, ch]]).powi(2);
                    }
                }
            }
        }
        assert!((background_distance(&a, &b, &mask).unwrap() - total / n as f64).abs() <= 1e-10);
    }

    #[test]
    fn cs_on_toy_embeddings() {
        let len = 2 * 2 * 3;
        let base = VocabularyEncoder::new(4, 0, len);
        let txt = base.encode_text("a dog").unwrap();
        let coincident = base
            .clone()
            .with_projection(Array2::zeros((4, len)))
            .unwrap()
            .with_bias(txt.clone())
            .unwrap();
        let img = random_image(11, 2, 2);
        let cs = clip_similarity(&img, "a dog", &coincident).unwrap();
        assert!((cs - 1.0).abs() < 1e-12);
        assert_eq!(cs, clip_similarity(&img, "a dog", &coincident).unwrap());

        let e0 = Array1::from(vec![1.0, 0.0, 0.0, 0.0]);
        let e1 = Array1::from(vec![0.0, 1.0, 0.0, 0.0]);
        let orth = VocabularyEncoder::new(4, 0, len)
            .with_token("dog", e0)
            .unwrap()
            .with_projection(Array2::zeros((4, len)))
            .unwrap()
            .with_bias(e1)
            .unwrap();
        assert_eq!(clip_similarity(&img, "dog", &orth).unwrap(), 0.0);
        assert!(clip_similarity(&img, "  ", &orth).is_err());
    }

    #[test]
    fn report_csv_has_per_task_footer() {
        let report = MetricReport {
            rows: vec![
                MetricRow {
                    pair_id: "a".into(),
                    task: "cat2dog".into(),
                    cs: 0.2,
                    sd: 0.1,
                    bd: Some(0.5),
                },
                MetricRow {
                    pair_id: "b".into(),
                    task: "cat2dog".into(),
                    cs: 0.4,
                    sd: 0.3,
                    bd: None,
                },
                MetricRow {
                    pair_id: "c".into(),
                    task: "drawing".into(),
                    cs: 0.1,
                    sd: 0.0,
                    bd: None,
                },
            ],
        };
        let s = report.summaries();
        assert_eq!(s.len(), 2);
        assert!((s[0].cs - 0.3).abs() < 1e-15);
        assert_eq!(s[0].bd, Some(0.5));
        assert_eq!(s[0].bd_count, 1);
        assert_eq!(s[1].bd, None);
        let text = String::from_utf8(report.to_csv().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "pair_id,task,cs,sd,bd,count");
        assert_eq!(lines.len(), 6);
        assert!(lines[4].starts_with("mean,cat2dog,"));
        assert!(lines[4].ends_with(",0.5,2"));
        assert!(lines[5].starts_with("mean,drawing,0.1,0,,1"));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = random_image(12, 8, 8);
        let b = random_image(13, 8, 8);
        imageio::save_rgb(&dir.path().join("a.png"), &a).unwrap();
        imageio::save_rgb(&dir.path().join("b.png"), &b).unwrap();
        let mut mask = image::GrayImage::new(8, 8);
        for x in 0..4 {
            for y in 0..8 {
                mask.put_pixel(x, y, image::Luma([255]));
            }
        }
        mask.save(dir.path().join("m.png")).unwrap();
        let manifest = dir.path().join("pairs.csv");
        std::fs::write(
            &manifest,
            "pair_id,src,tgt,prompt,mask\np1,a.png,b.png,a dog,m.png\np2,a.png,a.png,a dog,\n",
        )
        .unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].mask, None);
        assert_eq!(entries[0].task, "all");
        let enc = VocabularyEncoder::new(8, 0, 8 * 8 * 3);
        let report = evaluate_manifest(&entries, &enc, &PatchProjectionEncoder::default()).unwrap();
        assert_eq!(report.rows[1].sd, 0.0);
        assert!(report.rows[0].bd.unwrap() > 0.0);
        assert!(report.rows.iter().all(|r| (-1.0..=1.0).contains(&r.cs)));
    }
}
