//! Image volumes, binary masks, intensity preprocessing and the on-disk case
//! directory format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const HU_MIN: f64 = -200.0;
pub const HU_MAX: f64 = 250.0;

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::Validation(format!("spacing {spacing:?} must be positive")));
    }
    Ok(())
}

/// Multi-channel volume `C×H×W×S` with voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub data: Tensor<T>,
    pub spacing: [f64; 3],
    pub id: String,
}

impl<T: Scalar> Volume<T> {
    pub fn new(data: Tensor<T>, spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        check_spacing(spacing)?;
        if data.rank() != 4 {
            return Err(Error::Dimension(format!("volume must be C×H×W×S, got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::Validation("volume intensities must be finite".into()));
        }
        Ok(Self { data, spacing, id: id.into() })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }
}

/// Clips to the soft-tissue window and maps linearly onto `[0, 1]`.
pub fn normalize_hu<T: Scalar>(v: &Volume<f32>) -> Volume<T> {
    let data = Tensor::new(
        v.data.shape().to_vec(),
        v.data
            .data()
            .iter()
            .map(|&h| lit(((h as f64).clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)))
            .collect(),
    )
    .expect("same shape");
    Volume { data, spacing: v.spacing, id: v.id.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRole {
    Organ,
    Gtv,
    Ptv,
    Prediction,
}

impl MaskRole {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskRole::Organ => "organ",
            MaskRole::Gtv => "gtv",
            MaskRole::Ptv => "ptv",
            MaskRole::Prediction => "prediction",
        }
    }
}

/// Binary `H×W×S` mask, row-major with the slice axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    pub role: MaskRole,
    data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], role: MaskRole, data: Vec<u8>) -> Result<Self> {
        check_spacing(spacing)?;
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Dimension(format!("{} mask values for grid {dims:?}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        Ok(Self { dims, spacing, role, data })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], role: MaskRole) -> Self {
        Self::new(dims, spacing, role, vec![0; dims.iter().product()]).expect("valid zero mask")
    }

    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], role: MaskRole, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(dims, spacing, role);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    if f(i, j, k) {
                        m.set(i, j, k, true);
                    }
                }
            }
        }
        m
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.index(i, j, k)] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.index(i, j, k);
        self.data[idx] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn with_role(mut self, role: MaskRole) -> Self {
        self.role = role;
        self
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn check_grid(&self, other: &MaskVolume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Dimension(format!("mask grids {:?} and {:?} differ", self.dims, other.dims)));
        }
        Ok(())
    }

    pub fn union_with(&mut self, other: &MaskVolume) -> Result<()> {
        self.check_grid(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
        Ok(())
    }

    pub fn is_subset_of(&self, other: &MaskVolume) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn intersection_count(&self, other: &MaskVolume) -> Result<usize> {
        self.check_grid(other)?;
        Ok(self.data.iter().zip(&other.data).filter(|(&a, &b)| a & b != 0).count())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(self.dims.to_vec(), self.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect())
            .expect("mask shape")
    }

    /// The `window` block at `origin`.
    pub fn crop(&self, origin: [usize; 3], window: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| origin[a] + window[a] > self.dims[a]) {
            return Err(Error::Dimension(format!("crop {origin:?}+{window:?} outside {:?}", self.dims)));
        }
        Ok(Self::from_fn(window, self.spacing, self.role, |i, j, k| self.get(origin[0] + i, origin[1] + j, origin[2] + k)))
    }

    /// Thresholds logits at 0, i.e. sigmoid strictly above 0.5.
    pub fn from_logits<T: Scalar>(logits: &Tensor<T>, spacing: [f64; 3], role: MaskRole) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("logits must be H×W×S, got {s:?}")));
        }
        let data = logits.data().iter().map(|&v| u8::from(v > T::zero())).collect();
        Self::new([s[0], s[1], s[2]], spacing, role, data)
    }
}

// ------------------------------------------------------------ case directory

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub volume: String,
    /// Role name → mask file name.
    pub masks: BTreeMap<MaskRole, String>,
    /// Record JSON file, when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<String>,
}

/// One case as stored on disk: a single-channel HU volume, masks by role and
/// an optional clinical record document.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseFiles {
    pub image: Volume<f32>,
    pub masks: BTreeMap<MaskRole, MaskVolume>,
    pub record: Option<serde_json::Value>,
}

pub fn write_case_dir(dir: &Path, case: &CaseFiles) -> Result<()> {
    fs::create_dir_all(dir)?;
    if case.image.channels() != 1 {
        return Err(Error::Format("case volumes are single-channel".into()));
    }
    let dims = case.image.dims();
    let mut bytes = Vec::with_capacity(case.image.data.numel() * 4);
    for v in case.image.data.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("image.f32"), bytes)?;
    let mut masks = BTreeMap::new();
    for (role, m) in &case.masks {
        if m.dims() != dims {
            return Err(Error::Dimension(format!("{} mask grid differs from the volume", role.as_str())));
        }
        let name = format!("{}.u8", role.as_str());
        fs::write(dir.join(&name), m.data())?;
        masks.insert(*role, name);
    }
    let record = match &case.record {
        Some(r) => {
            fs::write(dir.join("record.json"), serde_json::to_vec_pretty(r)?)?;
            Some("record.json".to_string())
        }
        None => None,
    };
    let manifest = CaseManifest {
        id: case.image.id.clone(),
        dims,
        spacing: case.image.spacing,
        dtype: "f32".into(),
        volume: "image.f32".into(),
        masks,
        record,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_case_dir(dir: &Path) -> Result<CaseFiles> {
    let manifest: CaseManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.dtype != "f32" {
        return Err(Error::Format(format!("unsupported volume dtype {}", manifest.dtype)));
    }
    let n: usize = manifest.dims.iter().product();
    let raw = fs::read(dir.join(&manifest.volume))?;
    if raw.len() != n * 4 {
        return Err(Error::Format(format!("volume file holds {} bytes, expected {}", raw.len(), n * 4)));
    }
    let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let [h, w, s] = manifest.dims;
    let image = Volume::new(Tensor::new(vec![1, h, w, s], vals)?, manifest.spacing, manifest.id.clone())?;
    let mut masks = BTreeMap::new();
    for (role, file) in &manifest.masks {
        let data = fs::read(dir.join(file))?;
        masks.insert(*role, MaskVolume::new(manifest.dims, manifest.spacing, *role, data)?);
    }
    let record = match &manifest.record {
        Some(f) => Some(serde_json::from_slice(&fs::read(dir.join(f))?)?),
        None => None,
    };
    Ok(CaseFiles { image, masks, record })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hu_window_maps_to_unit_interval() {
        let v = Volume::new(Tensor::new(vec![1, 1, 1, 4], vec![-1000.0f32, -200.0, 25.0, 400.0]).unwrap(), [1.0; 3], "x").unwrap();
        let n: Volume<f64> = normalize_hu(&v);
        assert_eq!(n.data.data(), &[0.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn logit_zero_is_background() {
        let t = Tensor::new(vec![1, 1, 3], vec![0.0f64, 1e-9, -2.0]).unwrap();
        let m = MaskVolume::from_logits(&t, [1.0; 3], MaskRole::Prediction).unwrap();
        assert_eq!(m.data(), &[0, 1, 0]);
    }

    #[test]
    fn mask_rejects_non_binary_and_bad_spacing() {
        assert!(MaskVolume::new([1, 1, 2], [1.0; 3], MaskRole::Gtv, vec![0, 2]).is_err());
        assert!(MaskVolume::new([1, 1, 2], [1.0, 0.0, 1.0], MaskRole::Gtv, vec![0, 1]).is_err());
    }

    #[test]
    fn case_dir_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("c0");
        let image = Volume::new(Tensor::from_fn(vec![1, 2, 3, 2], |i| i as f32 - 3.5), [1.0, 1.0, 3.0], "c0").unwrap();
        let mut masks = BTreeMap::new();
        masks.insert(MaskRole::Ptv, MaskVolume::from_fn([2, 3, 2], [1.0, 1.0, 3.0], MaskRole::Ptv, |i, j, _| i == j));
        let case = CaseFiles { image, masks, record: Some(serde_json::json!({"grade": 7})) };
        write_case_dir(&dir, &case).unwrap();
        assert_eq!(read_case_dir(&dir).unwrap(), case);
    }
}
