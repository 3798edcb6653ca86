//! Synthetic multicenter cohorts: per-center clinical distributions,
//! delineation policies (nodal irradiation, margins) and scanner styles over
//! a pelvic phantom.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clinical::{
    psa_cluster, record_from_json, record_to_json, risk_group, ClinicalRecord, Metastasis, NStage, PsaCluster,
    RecordMeta, RiskGroup, SubStage, TStage, TherapyIntent,
};
use crate::error::{Error, Result};
use crate::mome::CenterFlag;
use crate::tensor::Tensor;
use crate::volume::{CaseFiles, MaskRole, MaskVolume, Volume};

pub const GRID: [usize; 3] = [32, 32, 16];
pub const SPACING: [f64; 3] = [1.0, 1.0, 3.0];

pub const HU_AIR: f64 = -1000.0;
pub const HU_BODY: f64 = 20.0;
pub const HU_ORGAN: f64 = 80.0;
pub const HU_VESSEL: f64 = 200.0;

const NODE_OFFSET: f64 = 8.0;
const NODE_RADIUS: f64 = 2.0;
const VESSEL_RADIUS: f64 = 1.0;
const MAX_RETRIES: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalDists {
    /// P(T1..T4).
    pub t_stage: [f64; 4],
    pub n1: f64,
    /// P(Gleason 5..10).
    pub gleason: [f64; 6],
    pub psa_median: f64,
    /// σ of `ln psa`.
    pub psa_log_sigma: f64,
    pub prostatectomy: f64,
    /// P(postoperative | prostatectomy); the rest is salvage.
    pub postop_given_surgery: f64,
    pub age_mean: f64,
    pub age_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityStyle {
    pub noise_sigma: f64,
    /// Passes of a separable `[¼, ½, ¼]` in-plane blur.
    pub blur_passes: usize,
    pub hu_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterPolicy {
    pub center: CenterFlag,
    /// P(nodal irradiation) by risk group, low → very high.
    pub pni: [f64; 4],
    pub ptv_margin_voxels: usize,
    pub clinical: ClinicalDists,
    pub intensity: IntensityStyle,
}

impl CenterPolicy {
    pub fn pni_probability(&self, risk: RiskGroup) -> f64 {
        self.pni[risk as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.clinical;
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let sums = |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs() < 1e-9 && v.iter().all(|&p| prob(p));
        if !self.pni.iter().all(|&p| prob(p)) {
            return Err(Error::Config(format!("{}: nodal probabilities must lie in [0, 1]", self.center)));
        }
        if self.ptv_margin_voxels > 5 {
            return Err(Error::Config(format!("{}: margin {} exceeds 5 voxels", self.center, self.ptv_margin_voxels)));
        }
        if !sums(&c.t_stage) || !sums(&c.gleason) {
            return Err(Error::Config(format!("{}: categorical distributions must sum to 1", self.center)));
        }
        if !prob(c.n1) || !prob(c.prostatectomy) || !prob(c.postop_given_surgery) {
            return Err(Error::Config(format!("{}: rates must lie in [0, 1]", self.center)));
        }
        if c.psa_median <= 0.0 || c.psa_log_sigma <= 0.0 || c.age_sd <= 0.0 {
            return Err(Error::Config(format!("{}: PSA and age models need positive scales", self.center)));
        }
        if self.intensity.noise_sigma < 0.0 {
            return Err(Error::Config(format!("{}: negative noise", self.center)));
        }
        Ok(())
    }
}

fn normalized<const N: usize>(pct: [f64; N]) -> [f64; N] {
    let s: f64 = pct.iter().sum();
    pct.map(|p| p / s)
}

fn flag(name: &str) -> CenterFlag {
    CenterFlag::new(name).expect("static flag")
}

fn dists(t: [f64; 4], n1: f64, gleason: [f64; 6], psa: f64, prost: f64, postop: f64, salvage: f64) -> ClinicalDists {
    ClinicalDists {
        t_stage: normalized(t),
        n1: n1 / 100.0,
        gleason: normalized(gleason),
        psa_median: psa,
        psa_log_sigma: 1.0,
        prostatectomy: prost / 100.0,
        postop_given_surgery: postop / (postop + salvage),
        age_mean: 68.0,
        age_sd: 8.0,
    }
}

/// Centers A–C (multicenter training) and the closed centers D and E.
pub fn build_default_policies() -> BTreeMap<CenterFlag, CenterPolicy> {
    let ab_pni = [0.05, 0.7, 0.95, 1.0];
    let scanner_ab = IntensityStyle { noise_sigma: 12.0, blur_passes: 0, hu_offset: 0.0 };
    let list = [
        CenterPolicy {
            center: flag("A"),
            pni: ab_pni,
            ptv_margin_voxels: 3,
            clinical: dists([4.1, 30.6, 57.7, 7.6], 10.3, [2.6, 5.4, 41.1, 19.4, 29.1, 2.5], 39.3, 66.0, 9.6, 55.7),
            intensity: scanner_ab.clone(),
        },
        CenterPolicy {
            center: flag("B"),
            pni: ab_pni,
            ptv_margin_voxels: 3,
            clinical: dists([0.7, 40.1, 48.9, 10.2], 13.9, [0.0, 12.4, 41.6, 16.1, 25.5, 4.4], 27.7, 40.1, 10.2, 29.9),
            intensity: scanner_ab,
        },
        CenterPolicy {
            center: flag("C"),
            pni: [0.0, 0.15, 0.7, 0.9],
            ptv_margin_voxels: 1,
            clinical: dists([6.7, 52.3, 32.9, 8.1], 8.1, [0.0, 11.4, 47.0, 14.8, 23.5, 3.4], 22.2, 47.0, 2.0, 45.0),
            intensity: IntensityStyle { noise_sigma: 18.0, blur_passes: 1, hu_offset: 10.0 },
        },
        CenterPolicy {
            center: flag("D"),
            pni: [0.0, 0.2, 0.6, 0.85],
            ptv_margin_voxels: 2,
            clinical: dists([55.3, 18.5, 26.2, 0.0], 15.4, [0.0, 9.2, 58.5, 12.3, 20.0, 0.0], 12.5, 13.8, 4.6, 9.2),
            intensity: IntensityStyle { noise_sigma: 25.0, blur_passes: 2, hu_offset: -15.0 },
        },
        CenterPolicy {
            center: flag("E"),
            pni: [0.0, 0.1, 0.6, 0.85],
            ptv_margin_voxels: 1,
            clinical: dists([32.3, 30.1, 34.4, 3.2], 7.5, [0.0, 9.6, 57.0, 16.1, 16.1, 1.1], 9.5, 32.3, 21.5, 10.8),
            intensity: IntensityStyle { noise_sigma: 17.0, blur_passes: 1, hu_offset: 8.0 },
        },
    ];
    list.into_iter().map(|p| (p.center.clone(), p)).collect()
}

/// Draws a clinical record from the center's distributions.
pub fn sample_record<R: Rng + ?Sized>(d: &ClinicalDists, rng: &mut R) -> Result<ClinicalRecord> {
    let t_idx = WeightedIndex::new(d.t_stage).map_err(|e| Error::Generator(e.to_string()))?.sample(rng);
    let t_stage = [TStage::T1, TStage::T2, TStage::T3, TStage::T4][t_idx];
    let t_substage = match t_stage {
        TStage::T1 => [SubStage::A, SubStage::B, SubStage::C][WeightedIndex::new([0.1, 0.1, 0.8]).expect("static").sample(rng)],
        TStage::T2 => [SubStage::A, SubStage::B, SubStage::C][rng.random_range(0..3)],
        TStage::T3 => {
            if rng.random_bool(0.6) {
                SubStage::A
            } else {
                SubStage::B
            }
        }
        TStage::T4 => SubStage::None,
    };
    let n_stage = if rng.random_bool(d.n1) { NStage::N1 } else { NStage::N0 };
    let g_idx = WeightedIndex::new(d.gleason).map_err(|e| Error::Generator(e.to_string()))?.sample(rng);
    let gleason_grade = 5 + g_idx as u8;
    let ln = LogNormal::new(d.psa_median.ln(), d.psa_log_sigma).map_err(|e| Error::Generator(e.to_string()))?;
    let psa = (ln.sample(rng) * 100.0).round() / 100.0;
    let age = Normal::new(d.age_mean, d.age_sd).map_err(|e| Error::Generator(e.to_string()))?.sample(rng);
    let age = age.round().clamp(40.0, 90.0);
    let prostatectomy = rng.random_bool(d.prostatectomy);
    let therapy_intent = if !prostatectomy {
        TherapyIntent::Definitive
    } else if rng.random_bool(d.postop_given_surgery) {
        TherapyIntent::Postoperative
    } else {
        TherapyIntent::Salvage
    };
    let metastasis = if prostatectomy || rng.random_bool(0.4) { Metastasis::Negative } else { Metastasis::Unknown };
    let r = ClinicalRecord {
        gleason_grade,
        t_stage,
        t_substage,
        n_stage,
        metastasis,
        age,
        psa,
        prostatectomy,
        therapy_intent,
    };
    r.validate()?;
    Ok(r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCase {
    pub id: String,
    pub center: CenterFlag,
    /// Single-channel HU volume.
    pub image: Volume<f32>,
    pub organ: MaskVolume,
    pub gtv: MaskVolume,
    pub ptv: MaskVolume,
    pub record: ClinicalRecord,
    pub pni_applied: bool,
    pub seed: u64,
}

impl SyntheticCase {
    pub fn risk(&self) -> RiskGroup {
        risk_group(&self.record)
    }

    pub fn psa_cluster(&self) -> PsaCluster {
        psa_cluster(self.record.psa).expect("validated record")
    }

    pub fn to_files(&self) -> CaseFiles {
        let mut masks = BTreeMap::new();
        masks.insert(MaskRole::Organ, self.organ.clone());
        masks.insert(MaskRole::Gtv, self.gtv.clone());
        masks.insert(MaskRole::Ptv, self.ptv.clone());
        let meta = RecordMeta {
            therapy_intent: self.record.therapy_intent,
            center: Some(self.center.to_string()),
            seed: Some(self.seed),
            pni_applied: Some(self.pni_applied),
        };
        CaseFiles { image: self.image.clone(), masks, record: Some(record_to_json(&self.record, &meta)) }
    }

    pub fn from_files(files: CaseFiles) -> Result<Self> {
        let json = files.record.as_ref().ok_or_else(|| Error::Format("case has no record".into()))?;
        let (record, meta) = record_from_json(json, true)?;
        let get = |role: MaskRole| {
            files.masks.get(&role).cloned().ok_or_else(|| Error::Format(format!("case lacks the {} mask", role.as_str())))
        };
        let center = CenterFlag::new(meta.center.clone().ok_or_else(|| Error::Format("record has no center".into()))?)?;
        Ok(Self {
            id: files.image.id.clone(),
            center,
            organ: get(MaskRole::Organ)?,
            gtv: get(MaskRole::Gtv)?,
            ptv: get(MaskRole::Ptv)?,
            image: files.image,
            record,
            pni_applied: meta.pni_applied.unwrap_or(false),
            seed: meta.seed.unwrap_or(0),
        })
    }
}

/// Phantom geometry drawn once per case.
#[derive(Clone, Copy, Debug)]
struct Phantom {
    center: [f64; 3],
    radii: [f64; 3],
    body: [f64; 2],
}

fn in_ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

fn draw_phantom<R: Rng + ?Sized>(rng: &mut R) -> Phantom {
    let [h, w, s] = GRID.map(|d| d as f64);
    Phantom {
        center: [
            h / 2.0 - 0.5 + rng.random_range(-2.0..2.0),
            w / 2.0 - 0.5 + rng.random_range(-1.5..1.5),
            s / 2.0 - 0.5 + rng.random_range(-1.5..1.5),
        ],
        radii: [rng.random_range(4.5..5.5), rng.random_range(4.5..5.5), rng.random_range(2.0..2.6)],
        body: [rng.random_range(13.0..15.0), rng.random_range(13.5..15.5)],
    }
}

fn phantom_ok(p: &Phantom) -> bool {
    // organ bounding box strictly inside the grid with a one-voxel border
    (0..3).all(|a| p.center[a] - p.radii[a] >= 1.0 && p.center[a] + p.radii[a] <= GRID[a] as f64 - 2.0)
}

fn node_chain(p: &Phantom, radius: f64) -> impl Fn(usize, usize, usize) -> bool + '_ {
    move |i, j, _| {
        let di = i as f64 - p.center[0];
        [-NODE_OFFSET, NODE_OFFSET].iter().any(|off| {
            let dj = j as f64 - (p.center[1] + off);
            di * di + dj * dj <= radius * radius
        })
    }
}

/// Removes voxels with any in-plane 4-neighbor outside the mask.
pub fn erode_in_plane(m: &MaskVolume) -> MaskVolume {
    let [h, w, _] = m.dims();
    MaskVolume::from_fn(m.dims(), m.spacing(), m.role, |i, j, k| {
        m.get(i, j, k)
            && i > 0
            && j > 0
            && i + 1 < h
            && j + 1 < w
            && m.get(i - 1, j, k)
            && m.get(i + 1, j, k)
            && m.get(i, j - 1, k)
            && m.get(i, j + 1, k)
    })
}

/// Dilation by an ellipsoidal element of `margin` voxels in-plane, scaled by
/// the spacing ratio along the slice axis.
pub fn dilate(m: &MaskVolume, margin: usize) -> MaskVolume {
    if margin == 0 {
        return m.clone();
    }
    let sp = m.spacing();
    let r = [margin as f64, margin as f64 * sp[0] / sp[1], margin as f64 * sp[0] / sp[2]];
    let ext = r.map(|v| v.floor() as i64);
    let mut offsets = Vec::new();
    for a in -ext[0]..=ext[0] {
        for b in -ext[1]..=ext[1] {
            for c in -ext[2]..=ext[2] {
                let q = (a as f64 / r[0]).powi(2)
                    + (b as f64 / r[1]).powi(2)
                    + if r[2] > 0.0 { (c as f64 / r[2]).powi(2) } else { 0.0 };
                if q <= 1.0 + 1e-12 {
                    offsets.push([a, b, c]);
                }
            }
        }
    }
    let d = m.dims().map(|v| v as i64);
    let mut out = MaskVolume::zeros(m.dims(), sp, m.role);
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                if !m.get(i as usize, j as usize, k as usize) {
                    continue;
                }
                for o in &offsets {
                    let (x, y, z) = (i + o[0], j + o[1], k + o[2]);
                    if (0..d[0]).contains(&x) && (0..d[1]).contains(&y) && (0..d[2]).contains(&z) {
                        out.set(x as usize, y as usize, z as usize, true);
                    }
                }
            }
        }
    }
    out
}

fn blur_in_plane(data: &mut [f64], dims: [usize; 3]) {
    let [h, w, s] = dims;
    let idx = |i: usize, j: usize, k: usize| (i * w + j) * s + k;
    let mut tmp = data.to_vec();
    for i in 0..h {
        for j in 0..w {
            for k in 0..s {
                let a = data[idx(i.saturating_sub(1), j, k)];
                let b = data[idx((i + 1).min(h - 1), j, k)];
                tmp[idx(i, j, k)] = 0.25 * a + 0.5 * data[idx(i, j, k)] + 0.25 * b;
            }
        }
    }
    for i in 0..h {
        for j in 0..w {
            for k in 0..s {
                let a = tmp[idx(i, j.saturating_sub(1), k)];
                let b = tmp[idx(i, (j + 1).min(w - 1), k)];
                data[idx(i, j, k)] = 0.25 * a + 0.5 * tmp[idx(i, j, k)] + 0.25 * b;
            }
        }
    }
}

/// Per-case rng stream derived from the master seed and case index.
pub fn case_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Generates one case. `force_pni` overrides the Bernoulli draw (the draw is
/// still consumed, so the rest of the case is unchanged).
pub fn generate_case_with(
    policy: &CenterPolicy,
    master_seed: u64,
    index: u64,
    force_pni: Option<bool>,
) -> Result<SyntheticCase> {
    policy.validate()?;
    let mut rng = case_rng(master_seed, index);
    let record = sample_record(&policy.clinical, &mut rng)?;
    let pni_draw = rng.random_bool(policy.pni_probability(risk_group(&record)));
    let pni_applied = force_pni.unwrap_or(pni_draw);
    let mut phantom = None;
    for _ in 0..MAX_RETRIES {
        let p = draw_phantom(&mut rng);
        if phantom_ok(&p) {
            phantom = Some(p);
            break;
        }
    }
    let p = phantom.ok_or_else(|| Error::Generator("phantom kept touching the grid boundary".into()))?;
    let pos = |i: usize, j: usize, k: usize| [i as f64, j as f64, k as f64];

    let organ = MaskVolume::from_fn(GRID, SPACING, MaskRole::Organ, |i, j, k| in_ellipsoid(pos(i, j, k), p.center, p.radii));
    let gtv = if record.prostatectomy { erode_in_plane(&organ) } else { organ.clone() }.with_role(MaskRole::Gtv);
    if gtv.is_empty() {
        return Err(Error::Generator("empty target volume".into()));
    }
    let mut ptv = dilate(&gtv, policy.ptv_margin_voxels).with_role(MaskRole::Ptv);
    if pni_applied {
        let nodes = MaskVolume::from_fn(GRID, SPACING, MaskRole::Ptv, node_chain(&p, NODE_RADIUS));
        ptv.union_with(&nodes)?;
    }

    let [h, w, s] = GRID;
    let vessels = node_chain(&p, VESSEL_RADIUS);
    let mut hu = vec![0.0f64; h * w * s];
    for i in 0..h {
        for j in 0..w {
            for k in 0..s {
                let di = (i as f64 - (h as f64 / 2.0 - 0.5)) / p.body[0];
                let dj = (j as f64 - (w as f64 / 2.0 - 0.5)) / p.body[1];
                let v = if di * di + dj * dj > 1.0 {
                    HU_AIR
                } else if vessels(i, j, k) {
                    HU_VESSEL
                } else if organ.get(i, j, k) {
                    HU_ORGAN
                } else {
                    HU_BODY
                };
                hu[(i * w + j) * s + k] = v;
            }
        }
    }
    let style = &policy.intensity;
    for _ in 0..style.blur_passes {
        blur_in_plane(&mut hu, GRID);
    }
    let data: Vec<f32> = hu
        .into_iter()
        .map(|v| (v + style.hu_offset + style.noise_sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    let id = format!("{}-{:05}", policy.center, index);
    let image = Volume::new(Tensor::new(vec![1, h, w, s], data)?, SPACING, id.clone())?;
    Ok(SyntheticCase {
        id,
        center: policy.center.clone(),
        image,
        organ,
        gtv,
        ptv,
        record,
        pni_applied,
        seed: master_seed,
    })
}

pub fn generate_case(policy: &CenterPolicy, master_seed: u64, index: u64) -> Result<SyntheticCase> {
    generate_case_with(policy, master_seed, index, None)
}

/// Cases `start..start+n` of one center.
pub fn generate_cohort(policy: &CenterPolicy, master_seed: u64, start: u64, n: usize) -> Result<Vec<SyntheticCase>> {
    (start..start + n as u64).map(|i| generate_case(policy, master_seed, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: Vec<usize>,
    pub val: usize,
    /// Clusters with fewer than the requested number of cases.
    pub short_clusters: Vec<u8>,
}

/// Picks `n_per_cluster` cases from each populated PSA cluster plus one
/// validation case from the remainder. Returns indices into `cases`.
pub fn sample_fewshot<R: Rng + ?Sized>(cases: &[SyntheticCase], n_per_cluster: usize, rng: &mut R) -> Result<FewShotSplit> {
    if cases.is_empty() {
        return Err(Error::Contract("few-shot sampling needs a nonempty dataset".into()));
    }
    if !(1..=3).contains(&n_per_cluster) {
        return Err(Error::Config(format!("{n_per_cluster} shots per cluster; expected 1, 2 or 3")));
    }
    let mut by_cluster: BTreeMap<u8, Vec<usize>> = (0..5).map(|c| (c, Vec::new())).collect();
    for (i, c) in cases.iter().enumerate() {
        by_cluster.get_mut(&c.psa_cluster().0).expect("cluster 0-4").push(i);
    }
    let mut train = Vec::new();
    let mut short = Vec::new();
    for (cluster, idx) in &mut by_cluster {
        if idx.len() < n_per_cluster {
            log::warn!("PSA cluster {cluster} holds {} of {n_per_cluster} requested cases", idx.len());
            short.push(*cluster);
        }
        idx.shuffle(rng);
        train.extend(idx.iter().take(n_per_cluster).copied());
    }
    let taken: BTreeSet<usize> = train.iter().copied().collect();
    let rest: Vec<usize> = (0..cases.len()).filter(|i| !taken.contains(i)).collect();
    let val = *rest.choose(rng).ok_or_else(|| Error::Contract("no case left for validation".into()))?;
    Ok(FewShotSplit { train, val, short_clusters: short })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(c: &str) -> CenterPolicy {
        build_default_policies()[&flag(c)].clone()
    }

    #[test]
    fn default_policies_are_valid() {
        let p = build_default_policies();
        assert_eq!(p.len(), 5);
        for pol in p.values() {
            pol.validate().unwrap();
        }
        let a = &p[&flag("A")].clinical.t_stage;
        assert!((a[2] - 0.577).abs() < 1e-3 && (a[0] - 0.041).abs() < 1e-3);
        assert!((p[&flag("D")].clinical.prostatectomy - 0.138).abs() < 1e-12);
    }

    #[test]
    fn target_nesting_and_determinism() {
        for (c, i) in [("A", 0), ("C", 3), ("D", 9), ("E", 4)] {
            let case = generate_case(&policy(c), 7, i).unwrap();
            assert!(case.gtv.is_subset_of(&case.ptv));
            assert!(case.organ.intersection_count(&case.gtv).unwrap() > 0);
            assert_eq!(case, generate_case(&policy(c), 7, i).unwrap());
        }
    }

    #[test]
    fn zero_margin_without_nodes_keeps_gtv() {
        let mut p = policy("C");
        p.ptv_margin_voxels = 0;
        let case = generate_case_with(&p, 1, 2, Some(false)).unwrap();
        assert_eq!(case.ptv.data(), case.gtv.data());
    }

    #[test]
    fn nodes_enlarge_ptv() {
        let on = generate_case_with(&policy("A"), 3, 5, Some(true)).unwrap();
        let off = generate_case_with(&policy("A"), 3, 5, Some(false)).unwrap();
        assert_eq!(on.gtv, off.gtv);
        assert!(on.ptv.count() > off.ptv.count());
        assert!(off.ptv.is_subset_of(&on.ptv));
    }

    #[test]
    fn dilation_respects_anisotropy() {
        let m = MaskVolume::from_fn([9, 9, 5], SPACING, MaskRole::Gtv, |i, j, k| (i, j, k) == (4, 4, 2));
        let d1 = dilate(&m, 1);
        assert_eq!(d1.count(), 5); // in-plane cross only
        let d3 = dilate(&m, 3);
        assert!(d3.get(4, 4, 3) && d3.get(4, 4, 1) && !d3.get(4, 4, 4));
        assert!(d3.get(7, 4, 2) && !d3.get(7, 4, 3));
    }

    #[test]
    fn fewshot_counts_and_fallback() {
        let pol = policy("B");
        let cases = generate_cohort(&pol, 11, 0, 60).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_fewshot(&cases, 1, &mut rng).unwrap();
        let populated = (0..5).filter(|c| cases.iter().any(|x| x.psa_cluster().0 == *c)).count();
        assert_eq!(s.train.len(), populated);
        assert!(!s.train.contains(&s.val));
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(s, sample_fewshot(&cases, 1, &mut rng2).unwrap());
        assert!(sample_fewshot(&[], 1, &mut rng).is_err());
    }
}
