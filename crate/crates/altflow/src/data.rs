//! Synthetic feature-map generation and on-disk dataset exchange.
//!
//! Synthetic normals are iid Gaussian latents pushed through a frozen stack
//! of random coupling warps, so the data manifold is exactly reachable by the
//! model family being trained. Anomalies perturb a contiguous spatial patch
//! of the finished feature map; ground-truth masks mark the patch. Because
//! the generative density is known in closed form, an oracle scorer can
//! certify that a generated task is solvable before any training happens.
//!
//! Tensors travel in a small self-describing container: an 8-byte magic,
//! a length-prefixed JSON header, then raw little-endian f64 values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::numerics::{Rng, Shape4, Tensor4};

const TENSOR_MAGIC: &[u8; 8] = b"AFTENSR1";
/// Output-layer scale of the frozen random warps. Large enough that the
/// data is visibly non-Gaussian, small enough that the warp stays
/// well-conditioned for the inverse pass.
const WARP_STRENGTH: f64 = 0.5;

const STREAM_WARP: u64 = 0x77_61_72_70; // per-role RNG stream tags
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST_NORMAL: u64 = 2;
const STREAM_TEST_ANOMALOUS: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalySpec {
    /// Fraction of channels the patch perturbs; ceil(fraction * C) channels.
    pub patch_fraction: f64,
    /// Additive offset applied inside the patch (random sign per sample).
    pub patch_magnitude: f64,
    /// Side length of the square patch.
    pub patch_size: usize,
}

impl Default for AnomalySpec {
    fn default() -> Self {
        AnomalySpec {
            patch_fraction: 0.75,
            patch_magnitude: 3.0,
            patch_size: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Planted latent offset; the mean-shift the learned base must absorb.
    pub latent_mean: f64,
    pub latent_std: f64,
    /// Number of frozen random coupling layers; 0 leaves latents untouched.
    pub warp_depth: usize,
    pub anomaly: AnomalySpec,
    pub n_train_normal: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            channels: 4,
            height: 8,
            width: 8,
            latent_mean: 2.0,
            latent_std: 0.5,
            warp_depth: 4,
            anomaly: AnomalySpec::default(),
            n_train_normal: 128,
            n_test_normal: 64,
            n_test_anomalous: 64,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid_spec("synthetic: shape must be nonzero"));
        }
        if !(self.latent_std > 0.0) || !self.latent_std.is_finite() {
            return Err(Error::invalid_spec("synthetic: latent_std must be > 0"));
        }
        if !self.latent_mean.is_finite() {
            return Err(Error::invalid_spec("synthetic: latent_mean must be finite"));
        }
        if !(self.anomaly.patch_fraction > 0.0 && self.anomaly.patch_fraction < 1.0) {
            return Err(Error::invalid_spec(
                "synthetic: patch_fraction must lie in (0, 1)",
            ));
        }
        if !self.anomaly.patch_magnitude.is_finite() {
            return Err(Error::invalid_spec(
                "synthetic: patch_magnitude must be finite",
            ));
        }
        if self.anomaly.patch_size == 0
            || self.anomaly.patch_size > self.height
            || self.anomaly.patch_size > self.width
        {
            return Err(Error::invalid_spec(
                "synthetic: patch_size must fit within (height, width)",
            ));
        }
        if self.n_train_normal == 0 || self.n_test_normal == 0 || self.n_test_anomalous == 0 {
            return Err(Error::invalid_spec("synthetic: counts must be nonzero"));
        }
        Ok(())
    }

    pub fn sample_shape(&self) -> Shape4 {
        Shape4::new(1, self.channels, self.height, self.width)
    }

    fn perturbed_channels(&self) -> usize {
        ((self.anomaly.patch_fraction * self.channels as f64).ceil() as usize)
            .clamp(1, self.channels)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// Normal samples only.
    pub train: Tensor4,
    /// Normal samples first, then anomalous ones.
    pub test: Tensor4,
    /// 0 = normal, 1 = anomalous; one entry per test sample.
    pub test_image_labels: Vec<u8>,
    /// Binary (B, 1, H, W) masks; all-zero exactly for normal samples.
    pub test_pixel_masks: Tensor4,
}

impl Dataset {
    /// Structural soundness: label/mask counts line up, masks are binary,
    /// anomalous samples have nonempty masks and normal ones empty masks.
    pub fn validate(&self) -> Result<()> {
        let t = self.test.shape();
        let m = self.test_pixel_masks.shape();
        if self.test_image_labels.len() != t.b {
            return Err(Error::format(
                "dataset",
                format!("{} labels for {} test samples", self.test_image_labels.len(), t.b),
            ));
        }
        if (m.b, m.c, m.h, m.w) != (t.b, 1, t.h, t.w) {
            return Err(Error::ShapeMismatch {
                op: "Dataset::validate",
                expected: format!("masks ({},1,{},{})", t.b, t.h, t.w),
                got: m.to_string(),
            });
        }
        let s = self.train.shape();
        if (s.c, s.h, s.w) != (t.c, t.h, t.w) {
            return Err(Error::ShapeMismatch {
                op: "Dataset::validate",
                expected: format!("test channels/plane matching train {s}"),
                got: t.to_string(),
            });
        }
        for &l in &self.test_image_labels {
            if l > 1 {
                return Err(Error::format("dataset", format!("non-binary label {l}")));
            }
        }
        let plane = m.h * m.w;
        for b in 0..m.b {
            let mask = &self.test_pixel_masks.data()[b * plane..(b + 1) * plane];
            if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::format(
                    "dataset",
                    format!("mask {b} holds a non-binary value"),
                ));
            }
            let nonempty = mask.iter().any(|&v| v == 1.0);
            match (self.test_image_labels[b], nonempty) {
                (1, false) => return Err(Error::MissingMask { index: b }),
                (0, true) => {
                    return Err(Error::format(
                        "dataset",
                        format!("normal sample {b} has a nonempty mask"),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// The frozen warp stack a dataset description implies; None when
/// warp_depth is 0. Rebuildable from the description alone, so oracle
/// scoring needs no stored state.
pub fn warp_model(spec: &SyntheticSpec) -> Result<Option<FlowModel>> {
    spec.validate()?;
    if spec.warp_depth == 0 {
        return Ok(None);
    }
    let config = FlowConfig::with_default_hidden(spec.channels, spec.warp_depth);
    let seed = Rng::new(spec.seed).derive(STREAM_WARP).next_u64();
    Ok(Some(FlowModel::random_warp(config, seed, WARP_STRENGTH)?))
}

fn sample_latents(spec: &SyntheticSpec, stream: u64, count: usize) -> Result<Tensor4> {
    let dim = spec.sample_shape().len();
    let mut data = Vec::with_capacity(count * dim);
    for i in 0..count {
        // one derived stream per sample: order and thread count irrelevant
        let mut rng = Rng::new(spec.seed).derive(stream).derive(i as u64);
        for _ in 0..dim {
            data.push(spec.latent_mean + spec.latent_std * rng.next_gaussian());
        }
    }
    Tensor4::from_vec(
        Shape4::new(count, spec.channels, spec.height, spec.width),
        data,
    )
}

fn normals(spec: &SyntheticSpec, warp: &Option<FlowModel>, stream: u64, count: usize) -> Result<Tensor4> {
    let latents = sample_latents(spec, stream, count)?;
    match warp {
        Some(w) => Ok(w.forward(&latents)?.0),
        None => Ok(latents),
    }
}

/// Generate a full synthetic dataset: warped-Gaussian normals plus test
/// anomalies carrying an additive square patch and its ground-truth mask.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let warp = warp_model(spec)?;
    let train = normals(spec, &warp, STREAM_TRAIN, spec.n_train_normal)?;
    let test_normal = normals(spec, &warp, STREAM_TEST_NORMAL, spec.n_test_normal)?;
    let clean = normals(spec, &warp, STREAM_TEST_ANOMALOUS, spec.n_test_anomalous)?;

    let s = spec.sample_shape();
    let plane = s.h * s.w;
    let k = spec.perturbed_channels();
    let mut anomalous = clean.data().to_vec();
    let mut masks = vec![0.0f64; (spec.n_test_normal + spec.n_test_anomalous) * plane];
    for b in 0..spec.n_test_anomalous {
        // a fresh derived stream per sample, disjoint from its latent stream
        let mut rng = Rng::new(spec.seed)
            .derive(STREAM_TEST_ANOMALOUS)
            .derive(b as u64)
            .derive(0xFA);
        let r0 = rng.next_below((s.h - spec.anomaly.patch_size + 1) as u64) as usize;
        let c0 = rng.next_below((s.w - spec.anomaly.patch_size + 1) as u64) as usize;
        let mut channel_order: Vec<usize> = (0..s.c).collect();
        rng.shuffle(&mut channel_order);
        let sign = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
        let delta = sign * spec.anomaly.patch_magnitude;
        for &c in channel_order.iter().take(k) {
            for r in r0..r0 + spec.anomaly.patch_size {
                for col in c0..c0 + spec.anomaly.patch_size {
                    anomalous[(b * s.c + c) * plane + r * s.w + col] += delta;
                }
            }
        }
        let mask_off = (spec.n_test_normal + b) * plane;
        for r in r0..r0 + spec.anomaly.patch_size {
            for col in c0..c0 + spec.anomaly.patch_size {
                masks[mask_off + r * s.w + col] = 1.0;
            }
        }
    }
    let anomalous = Tensor4::from_vec(
        Shape4::new(spec.n_test_anomalous, s.c, s.h, s.w),
        anomalous,
    )?;
    let test = Tensor4::concat_batch(&[&test_normal, &anomalous])?;
    let mut labels = vec![0u8; spec.n_test_normal];
    labels.extend(std::iter::repeat(1).take(spec.n_test_anomalous));
    let masks = Tensor4::from_vec(
        Shape4::new(spec.n_test_normal + spec.n_test_anomalous, 1, s.h, s.w),
        masks,
    )?;
    let ds = Dataset {
        train,
        test,
        test_image_labels: labels,
        test_pixel_masks: masks,
    };
    ds.validate()?;
    Ok(ds)
}

/// Per-location negative log density under the TRUE generative model:
/// pull samples back through the warp, score the latents against the
/// planted Gaussian, and charge each location its share of the warp's
/// log-determinant. Higher means more anomalous.
pub fn oracle_score_map(spec: &SyntheticSpec, x: &Tensor4) -> Result<Tensor4> {
    spec.validate()?;
    let warp = warp_model(spec)?;
    let (latents, logdet_map) = match &warp {
        Some(w) => {
            let l = w.inverse(x)?;
            let (_, ld) = w.forward_map(&l)?;
            (l, Some(ld))
        }
        None => (x.clone(), None),
    };
    let s = x.shape();
    let plane = s.h * s.w;
    let half_ln_2pi = (2.0 * std::f64::consts::PI).ln() / 2.0;
    let ln_sigma = spec.latent_std.ln();
    let mut out = vec![0.0f64; s.b * plane];
    for b in 0..s.b {
        for p in 0..plane {
            let mut acc = 0.0;
            for c in 0..s.c {
                let t = (latents.data()[(b * s.c + c) * plane + p] - spec.latent_mean)
                    / spec.latent_std;
                acc += -half_ln_2pi - ln_sigma - 0.5 * t * t;
            }
            if let Some(ld) = &logdet_map {
                // density of x picks up -logdet of the latent->data direction
                acc -= ld.data()[b * plane + p];
            }
            out[b * plane + p] = -acc;
        }
    }
    Tensor4::from_vec(Shape4::new(s.b, 1, s.h, s.w), out)
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: [usize; 4],
    endianness: String,
}

/// Write a tensor in the container format: magic, u64 little-endian header
/// length, JSON header, then the payload as little-endian f64.
pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    let header = serde_json::to_vec(&TensorHeader {
        dtype: "f64".to_string(),
        shape: [s.b, s.c, s.h, s.w],
        endianness: "little".to_string(),
    })
    .expect("header serialization is infallible");
    let mut bytes = Vec::with_capacity(16 + header.len() + 8 * t.data().len());
    bytes.extend_from_slice(TENSOR_MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    let disp = || path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(disp(), e))?;
    if bytes.len() < 16 || &bytes[..8] != TENSOR_MAGIC {
        return Err(Error::format(disp(), "bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(Error::format(disp(), "truncated header"));
    }
    let header: TensorHeader = serde_json::from_slice(&bytes[16..16 + hlen])
        .map_err(|e| Error::format(disp(), format!("malformed header: {e}")))?;
    if header.dtype != "f64" {
        return Err(Error::format(disp(), format!("unsupported dtype {}", header.dtype)));
    }
    if header.endianness != "little" {
        return Err(Error::format(
            disp(),
            format!("unsupported endianness {}", header.endianness),
        ));
    }
    let [b, c, h, w] = header.shape;
    let shape = Shape4::new(b, c, h, w);
    let expect = 16 + hlen + 8 * shape.len();
    if bytes.len() != expect {
        return Err(Error::format(
            disp(),
            format!("payload holds {} bytes, header implies {}", bytes.len() - 16 - hlen, 8 * shape.len()),
        ));
    }
    let mut data = Vec::with_capacity(shape.len());
    for chunk in bytes[16 + hlen..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Tensor4::from_vec(shape, data)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    train: String,
    test: String,
    labels: String,
    masks: String,
}

/// Write a dataset as a directory: manifest.json naming the member files,
/// three tensor containers, and a labels CSV.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    save_tensor(dir.join("train.afts"), &ds.train)?;
    save_tensor(dir.join("test.afts"), &ds.test)?;
    save_tensor(dir.join("masks.afts"), &ds.test_pixel_masks)?;
    let labels_path = dir.join("labels.csv");
    let mut csv = String::from("sample_id,label\n");
    for (i, &l) in ds.test_image_labels.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    fs::write(&labels_path, csv).map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    let manifest = Manifest {
        format_version: 1,
        train: "train.afts".to_string(),
        test: "test.afts".to_string(),
        labels: "labels.csv".to_string(),
        masks: "masks.afts".to_string(),
    };
    let mpath = dir.join("manifest.json");
    fs::write(
        &mpath,
        serde_json::to_vec_pretty(&manifest).expect("manifest serialization is infallible"),
    )
    .map_err(|e| Error::io(mpath.display().to_string(), e))
}

fn parse_labels(path: &Path) -> Result<Vec<u8>> {
    let disp = || path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(disp(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("sample_id,label") => {}
        other => {
            return Err(Error::format(
                disp(),
                format!("expected header 'sample_id,label', got {other:?}"),
            ))
        }
    }
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| Error::format(disp(), format!("row {i} is not two fields")))?;
        if id.parse::<usize>().ok() != Some(i) {
            return Err(Error::format(disp(), format!("row {i} has sample_id {id}")));
        }
        match label {
            "0" => labels.push(0),
            "1" => labels.push(1),
            other => return Err(Error::format(disp(), format!("row {i} has label {other}"))),
        }
    }
    Ok(labels)
}

/// Load a dataset from a manifest path (or a directory holding
/// manifest.json). Validates structure, masks, and labels on the way in.
pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest_path: PathBuf = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let disp = || manifest_path.display().to_string();
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(disp(), e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(disp(), format!("malformed manifest: {e}")))?;
    if manifest.format_version != 1 {
        return Err(Error::format(
            disp(),
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let ds = Dataset {
        train: load_tensor(dir.join(&manifest.train))?,
        test: load_tensor(dir.join(&manifest.test))?,
        test_image_labels: parse_labels(&dir.join(&manifest.labels))?,
        test_pixel_masks: load_tensor(dir.join(&manifest.masks))?,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{channel_ks_report, ks_critical_5pct};
    use crate::evaluation::{auroc, pixel_auroc};
    use crate::scoring::image_score;

    fn bits(t: &Tensor4) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn same_spec_generates_bit_identical_datasets() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(bits(&a.train), bits(&b.train));
        assert_eq!(bits(&a.test), bits(&b.test));
        assert_eq!(a.test_image_labels, b.test_image_labels);
        assert_eq!(bits(&a.test_pixel_masks), bits(&b.test_pixel_masks));

        let wa = warp_model(&spec).unwrap().unwrap();
        let wb = warp_model(&spec).unwrap().unwrap();
        assert_eq!(wa.params_flat(), wb.params_flat());
    }

    #[test]
    fn generated_structure_matches_counts_and_passes_validation() {
        let spec = SyntheticSpec::default();
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.train.shape().b, spec.n_train_normal);
        assert_eq!(ds.test.shape().b, spec.n_test_normal + spec.n_test_anomalous);
        let ones: usize = ds.test_image_labels.iter().map(|&l| l as usize).sum();
        assert_eq!(ones, spec.n_test_anomalous);
        assert_eq!(&ds.test_image_labels[..spec.n_test_normal], &vec![0u8; 64][..]);
        ds.validate().unwrap();
    }

    #[test]
    fn mask_area_equals_patch_area() {
        let spec = SyntheticSpec::default();
        let ds = generate(&spec).unwrap();
        let plane = spec.height * spec.width;
        for b in spec.n_test_normal..ds.test.shape().b {
            let m = &ds.test_pixel_masks.data()[b * plane..(b + 1) * plane];
            let area: f64 = m.iter().sum();
            assert_eq!(area, (spec.anomaly.patch_size * spec.anomaly.patch_size) as f64);
        }
    }

    #[test]
    fn zero_magnitude_anomalies_are_statistically_invisible() {
        let spec = SyntheticSpec {
            anomaly: AnomalySpec {
                patch_magnitude: 0.0,
                ..AnomalySpec::default()
            },
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let maps = oracle_score_map(&spec, &ds.test).unwrap();
        let pix = pixel_auroc(&maps, &ds.test_pixel_masks).unwrap();
        assert!((pix - 0.5).abs() < 0.08, "pixel auroc {pix}");
        let labels: Vec<bool> = ds.test_image_labels.iter().map(|&l| l == 1).collect();
        let img = auroc(&image_score(&maps), &labels).unwrap();
        assert!((img - 0.5).abs() < 0.15, "image auroc {img}");
    }

    #[test]
    fn unwarped_unit_spec_is_standard_normal() {
        let spec = SyntheticSpec {
            latent_mean: 0.0,
            latent_std: 1.0,
            warp_depth: 0,
            n_train_normal: 256,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let rep = channel_ks_report(&ds.train, None).unwrap();
        let crit = ks_critical_5pct(rep.n_samples);
        assert!(rep.mean < crit, "ks mean {} vs critical {crit}", rep.mean);
    }

    #[test]
    fn inverting_the_warp_recovers_null_level_latents() {
        let spec = SyntheticSpec::default();
        let ds = generate(&spec).unwrap();
        let warp = warp_model(&spec).unwrap().unwrap();
        let latents = warp.inverse(&ds.train).unwrap();
        let standardized = latents
            .add_scalar(-spec.latent_mean)
            .unwrap()
            .mul_scalar(1.0 / spec.latent_std)
            .unwrap();
        let rep = channel_ks_report(&standardized, None).unwrap();
        let crit = ks_critical_5pct(rep.n_samples);
        assert!(rep.mean < crit, "ks mean {} vs critical {crit}", rep.mean);
        // and the raw data itself is far from standard normal
        let raw = channel_ks_report(&ds.train, None).unwrap();
        assert!(raw.mean > 3.0 * crit, "raw ks mean {}", raw.mean);
    }

    #[test]
    fn oracle_scorer_certifies_the_default_task_solvable() {
        let spec = SyntheticSpec::default();
        let ds = generate(&spec).unwrap();
        let maps = oracle_score_map(&spec, &ds.test).unwrap();
        let pix = pixel_auroc(&maps, &ds.test_pixel_masks).unwrap();
        assert!(pix > 0.95, "oracle pixel auroc {pix}");
        let labels: Vec<bool> = ds.test_image_labels.iter().map(|&l| l == 1).collect();
        let img = auroc(&image_score(&maps), &labels).unwrap();
        assert!(img > 0.9, "oracle image auroc {img}");
    }

    #[test]
    fn tensor_container_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let t = Rng::new(9).gaussian_tensor(Shape4::new(3, 2, 4, 5));
        let path = dir.path().join("t.afts");
        save_tensor(&path, &t).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn dataset_round_trips_bitwise_through_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_train_normal: 8,
            n_test_normal: 4,
            n_test_anomalous: 4,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        // both the directory and the manifest path load
        for p in [dir.path().to_path_buf(), dir.path().join("manifest.json")] {
            let back = load_features(&p).unwrap();
            assert_eq!(bits(&back.train), bits(&ds.train));
            assert_eq!(bits(&back.test), bits(&ds.test));
            assert_eq!(back.test_image_labels, ds.test_image_labels);
            assert_eq!(bits(&back.test_pixel_masks), bits(&ds.test_pixel_masks));
        }
    }

    #[test]
    fn corrupted_containers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = Rng::new(2).gaussian_tensor(Shape4::new(2, 1, 2, 2));
        let path = dir.path().join("t.afts");
        save_tensor(&path, &t).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_tensor(&path), Err(Error::Format { .. })));

        let truncated = &good[..good.len() - 4];
        fs::write(&path, truncated).unwrap();
        assert!(matches!(load_tensor(&path), Err(Error::Format { .. })));

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0u8; 8]);
        fs::write(&path, &trailing).unwrap();
        assert!(matches!(load_tensor(&path), Err(Error::Format { .. })));

        fs::write(&path, &good).unwrap();
        assert!(load_tensor(&path).is_ok());
    }

    #[test]
    fn non_binary_masks_and_missing_masks_are_rejected() {
        let spec = SyntheticSpec {
            n_train_normal: 4,
            n_test_normal: 2,
            n_test_anomalous: 2,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap();

        let mut fractional = ds.clone();
        let shape = fractional.test_pixel_masks.shape();
        let mut vals = fractional.test_pixel_masks.data().to_vec();
        vals[0] = 0.5;
        fractional.test_pixel_masks = Tensor4::from_vec(shape, vals).unwrap();
        assert!(matches!(fractional.validate(), Err(Error::Format { .. })));

        let mut missing = ds.clone();
        missing.test_pixel_masks = Tensor4::zeros(shape);
        assert!(matches!(
            missing.validate(),
            Err(Error::MissingMask { index: 2 })
        ));
    }

    #[test]
    fn label_file_validation_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        fs::write(&path, "sample_id,label\n0,0\n1,2\n").unwrap();
        assert!(matches!(parse_labels(&path), Err(Error::Format { .. })));
        fs::write(&path, "sample_id,label\n0,0\n5,1\n").unwrap();
        assert!(matches!(parse_labels(&path), Err(Error::Format { .. })));
        fs::write(&path, "wrong,header\n0,0\n").unwrap();
        assert!(matches!(parse_labels(&path), Err(Error::Format { .. })));
        fs::write(&path, "sample_id,label\n0,1\n1,0\n").unwrap();
        assert_eq!(parse_labels(&path).unwrap(), vec![1, 0]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SyntheticSpec::default();
        spec.latent_std = 0.0;
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec { .. })));

        let mut spec = SyntheticSpec::default();
        spec.anomaly.patch_size = 9;
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec { .. })));

        let mut spec = SyntheticSpec::default();
        spec.anomaly.patch_fraction = 1.0;
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec { .. })));
    }
}
