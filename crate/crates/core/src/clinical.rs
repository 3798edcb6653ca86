//! Structured clinical records, risk grouping, PSA clusters and the frozen
//! record featurizer that produces token-wise context embeddings.
//!
//! Field tokens are a fixed function of the record (the featurizer stands in
//! for a frozen language model). Prompt tokens are appended after them and
//! are the only trainable rows.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TStage {
    T1,
    T2,
    T3,
    T4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubStage {
    None,
    A,
    B,
    C,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NStage {
    N0,
    N1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metastasis {
    Negative,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TherapyIntent {
    Definitive,
    Postoperative,
    Salvage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskGroup {
    Low,
    Intermediate,
    High,
    VeryHigh,
}

impl RiskGroup {
    pub const ALL: [RiskGroup; 4] = [RiskGroup::Low, RiskGroup::Intermediate, RiskGroup::High, RiskGroup::VeryHigh];

    pub fn as_str(self) -> &'static str {
        match self {
            RiskGroup::Low => "low",
            RiskGroup::Intermediate => "intermediate",
            RiskGroup::High => "high",
            RiskGroup::VeryHigh => "very_high",
        }
    }
}

/// PSA stratum 0–4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PsaCluster(pub u8);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub gleason_grade: u8,
    pub t_stage: TStage,
    pub t_substage: SubStage,
    pub n_stage: NStage,
    pub metastasis: Metastasis,
    pub age: f64,
    pub psa: f64,
    pub prostatectomy: bool,
    pub therapy_intent: TherapyIntent,
}

impl ClinicalRecord {
    pub fn validate(&self) -> Result<()> {
        if !(5..=10).contains(&self.gleason_grade) {
            return Err(Error::Validation(format!("gleason grade {} outside 5–10", self.gleason_grade)));
        }
        if !self.psa.is_finite() || self.psa < 0.0 {
            return Err(Error::Validation(format!("psa {} must be finite and ≥ 0", self.psa)));
        }
        if !(18.0..=110.0).contains(&self.age) {
            return Err(Error::Validation(format!("age {} outside 18–110", self.age)));
        }
        Ok(())
    }

    /// Stage text in the curated template form, e.g. `pT3a, N0`.
    pub fn stage_text(&self) -> String {
        let sub = match self.t_substage {
            SubStage::None => "",
            SubStage::A => "a",
            SubStage::B => "b",
            SubStage::C => "c",
        };
        let t = match self.t_stage {
            TStage::T1 => "T1",
            TStage::T2 => "T2",
            TStage::T3 => "T3",
            TStage::T4 => "T4",
        };
        let n = match self.n_stage {
            NStage::N0 => "N0",
            NStage::N1 => "N1",
        };
        format!("{}{}{}, {}", if self.prostatectomy { "p" } else { "" }, t, sub, n)
    }

    /// The five-line curated prompt text.
    pub fn template_text(&self) -> String {
        let meta = match self.metastasis {
            Metastasis::Negative => "negative",
            Metastasis::Unknown => "unknown",
        };
        format!(
            "<Grade> {}\n<Stage> {}\n<Metastasis> {}\n<Age> {}\n<PSA> {}",
            self.gleason_grade,
            self.stage_text(),
            meta,
            self.age,
            self.psa
        )
    }
}

/// Parsed `[p]T<1-4>[a|b|c][,] N<0|1>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParsedStage {
    pub t_stage: TStage,
    pub t_substage: SubStage,
    pub n_stage: NStage,
    pub pathological: bool,
}

impl FromStr for ParsedStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("unparseable stage {s:?}"));
        let s = s.trim();
        let (pathological, rest) = match s.strip_prefix('p') {
            Some(r) => (true, r),
            None => (false, s.strip_prefix('c').unwrap_or(s)),
        };
        let rest = rest.strip_prefix('T').ok_or_else(bad)?;
        let mut chars = rest.chars();
        let t_stage = match chars.next() {
            Some('1') => TStage::T1,
            Some('2') => TStage::T2,
            Some('3') => TStage::T3,
            Some('4') => TStage::T4,
            _ => return Err(bad()),
        };
        let rest = chars.as_str();
        let (t_substage, rest) = match rest.chars().next() {
            Some('a') => (SubStage::A, &rest[1..]),
            Some('b') => (SubStage::B, &rest[1..]),
            Some('c') => (SubStage::C, &rest[1..]),
            _ => (SubStage::None, rest),
        };
        let rest = rest.trim_start_matches([',', ' ']);
        let n_stage = match rest {
            "N0" => NStage::N0,
            "N1" => NStage::N1,
            _ => return Err(bad()),
        };
        Ok(Self { t_stage, t_substage, n_stage, pathological })
    }
}

/// Risk group rule table:
///
/// | group        | condition                                   |
/// |--------------|---------------------------------------------|
/// | very high    | T4, or Gleason ≥ 9                          |
/// | high         | T3, or Gleason 8, or PSA > 20               |
/// | intermediate | T2, or Gleason 7, or 10 < PSA ≤ 20          |
/// | low          | otherwise                                   |
///
/// Rows are checked top to bottom; age and therapy intent never enter.
pub fn risk_group(r: &ClinicalRecord) -> RiskGroup {
    let g = r.gleason_grade;
    if r.t_stage == TStage::T4 || g >= 9 {
        RiskGroup::VeryHigh
    } else if r.t_stage == TStage::T3 || g == 8 || r.psa > 20.0 {
        RiskGroup::High
    } else if r.t_stage == TStage::T2 || g == 7 || (r.psa > 10.0 && r.psa <= 20.0) {
        RiskGroup::Intermediate
    } else {
        RiskGroup::Low
    }
}

/// Boundaries 5, 10, 20 and 30 ng/mL belong to the upper cluster.
pub fn psa_cluster(psa: f64) -> Result<PsaCluster> {
    if !psa.is_finite() || psa < 0.0 {
        return Err(Error::Validation(format!("psa {psa} must be finite and ≥ 0")));
    }
    let c = match psa {
        p if p < 5.0 => 0,
        p if p < 10.0 => 1,
        p if p < 20.0 => 2,
        p if p < 30.0 => 3,
        _ => 4,
    };
    Ok(PsaCluster(c))
}

// ------------------------------------------------------------------ JSON

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub therapy_intent: TherapyIntent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pni_applied: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RecordJson {
    grade: u8,
    stage: String,
    metastasis: Metastasis,
    age: f64,
    psa: f64,
    meta: RecordMeta,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

/// Serializes to the five template keys plus `meta`.
pub fn record_to_json(r: &ClinicalRecord, meta: &RecordMeta) -> serde_json::Value {
    let j = RecordJson {
        grade: r.gleason_grade,
        stage: r.stage_text(),
        metastasis: r.metastasis,
        age: r.age,
        psa: r.psa,
        meta: RecordMeta { therapy_intent: r.therapy_intent, ..meta.clone() },
        extra: BTreeMap::new(),
    };
    serde_json::to_value(j).expect("record serializes")
}

/// Parses a record; `strict` rejects keys outside the template and `meta`.
pub fn record_from_json(v: &serde_json::Value, strict: bool) -> Result<(ClinicalRecord, RecordMeta)> {
    let j: RecordJson = serde_json::from_value(v.clone())?;
    if strict && !j.extra.is_empty() {
        let keys: Vec<_> = j.extra.keys().cloned().collect();
        return Err(Error::Validation(format!("unknown record keys {keys:?}")));
    }
    let stage: ParsedStage = j.stage.parse()?;
    let r = ClinicalRecord {
        gleason_grade: j.grade,
        t_stage: stage.t_stage,
        t_substage: stage.t_substage,
        n_stage: stage.n_stage,
        metastasis: j.metastasis,
        age: j.age,
        psa: j.psa,
        prostatectomy: stage.pathological,
        therapy_intent: j.meta.therapy_intent,
    };
    r.validate()?;
    Ok((r, j.meta))
}

// ------------------------------------------------------------ featurizer

/// Frozen featurizer constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    /// Token width D.
    pub width: usize,
    /// Learnable prompt token count P.
    pub n_prompts: usize,
    /// z-score constants applied to `ln(1 + psa)`.
    pub psa_log_mean: f64,
    pub psa_log_std: f64,
    pub age_min: f64,
    pub age_max: f64,
    /// Seed of the frozen projection and field-bias tables.
    pub seed: u64,
    /// Adds one categorical token naming the center (text-prompt baseline).
    pub center_token: bool,
    /// Capacity of the center one-hot, when `center_token` is set.
    pub max_centers: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            width: 32,
            n_prompts: 8,
            psa_log_mean: 2.7,
            psa_log_std: 1.1,
            age_min: 18.0,
            age_max: 110.0,
            seed: 0x5eed_c0de,
            center_token: false,
            max_centers: 8,
        }
    }
}

pub const N_RECORD_FIELDS: usize = 5;
const STAGE_ONE_HOT: usize = 4 + 4 + 2 + 2;
const META_ONE_HOT: usize = 2;

/// Token-wise context embedding `L × D`; field rows first, then prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEmbedding<T> {
    pub tokens: Tensor<T>,
    pub n_fields: usize,
    pub n_prompts: usize,
}

impl<T: Scalar> ContextEmbedding<T> {
    pub fn len(&self) -> usize {
        self.n_fields + self.n_prompts
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.width();
        &self.tokens.data()[i * d..(i + 1) * d]
    }
}

/// Deterministic record → field-token map.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    cfg: ContextConfig,
    field_bias: Vec<f64>,
    stage_proj: Vec<f64>,
    meta_proj: Vec<f64>,
    center_proj: Vec<f64>,
    freqs: Vec<f64>,
}

impl ContextEncoder {
    pub fn new(cfg: ContextConfig) -> Result<Self> {
        if cfg.width < 2 || !cfg.width.is_multiple_of(2) {
            return Err(Error::Config(format!("context width {} must be even and ≥ 2", cfg.width)));
        }
        if cfg.psa_log_std <= 0.0 || cfg.age_max <= cfg.age_min {
            return Err(Error::Config("degenerate normalization constants".into()));
        }
        let d = cfg.width;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gauss = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let n_fields = N_RECORD_FIELDS + usize::from(cfg.center_token);
        let field_bias = gauss(n_fields * d, 0.5);
        let stage_proj = gauss(STAGE_ONE_HOT * d, 1.0);
        let meta_proj = gauss(META_ONE_HOT * d, 1.0);
        let center_proj = gauss(cfg.max_centers * d, 1.0);
        let half = d / 2;
        let freqs = (0..half)
            .map(|j| {
                let t = if half > 1 { j as f64 / (half - 1) as f64 } else { 0.0 };
                (0.5f64.ln() + t * (16.0f64.ln() - 0.5f64.ln())).exp()
            })
            .collect();
        Ok(Self { cfg, field_bias, stage_proj, meta_proj, center_proj, freqs })
    }

    pub fn config(&self) -> &ContextConfig {
        &self.cfg
    }

    pub fn n_fields(&self) -> usize {
        N_RECORD_FIELDS + usize::from(self.cfg.center_token)
    }

    /// Total token count L.
    pub fn n_tokens(&self) -> usize {
        self.n_fields() + self.cfg.n_prompts
    }

    fn sinusoid(&self, x: f64, out: &mut [f64]) {
        for (j, &w) in self.freqs.iter().enumerate() {
            out[2 * j] += (w * x).sin();
            out[2 * j + 1] += (w * x).cos();
        }
    }

    fn one_hot_proj(table: &[f64], hot: &[usize], d: usize, out: &mut [f64]) {
        for &h in hot {
            for (o, &t) in out.iter_mut().zip(&table[h * d..(h + 1) * d]) {
                *o += t;
            }
        }
    }

    /// Field-token rows for `record`; `center` is the ordinal written into the
    /// center token when that token is enabled.
    pub fn field_tokens<T: Scalar>(&self, r: &ClinicalRecord, center: Option<usize>) -> Result<Tensor<T>> {
        r.validate()?;
        let d = self.cfg.width;
        let nf = self.n_fields();
        let mut rows = vec![0.0f64; nf * d];
        for (f, row) in rows.chunks_mut(d).enumerate() {
            row.copy_from_slice(&self.field_bias[f * d..(f + 1) * d]);
        }
        // grade
        self.sinusoid((r.gleason_grade as f64 - 5.0) / 5.0, &mut rows[0..d]);
        // stage
        let t = r.t_stage as usize;
        let sub = 4 + r.t_substage as usize;
        let n = 8 + r.n_stage as usize;
        let p = 10 + usize::from(r.prostatectomy);
        Self::one_hot_proj(&self.stage_proj, &[t, sub, n, p], d, &mut rows[d..2 * d]);
        // metastasis
        Self::one_hot_proj(&self.meta_proj, &[r.metastasis as usize], d, &mut rows[2 * d..3 * d]);
        // age
        let age = (r.age - self.cfg.age_min) / (self.cfg.age_max - self.cfg.age_min);
        self.sinusoid(age, &mut rows[3 * d..4 * d]);
        // psa
        let psa = ((r.psa).ln_1p() - self.cfg.psa_log_mean) / self.cfg.psa_log_std;
        self.sinusoid(psa, &mut rows[4 * d..5 * d]);
        if self.cfg.center_token {
            let c = center.ok_or_else(|| Error::Config("center token enabled but no center given".into()))?;
            if c >= self.cfg.max_centers {
                return Err(Error::Config(format!("center ordinal {c} exceeds capacity")));
            }
            Self::one_hot_proj(&self.center_proj, &[c], d, &mut rows[5 * d..6 * d]);
        }
        Tensor::new(vec![nf, d], rows.into_iter().map(lit).collect())
    }

    /// Field tokens followed by `prompts` (`P × D`).
    pub fn encode_record<T: Scalar>(
        &self,
        r: &ClinicalRecord,
        prompts: &Tensor<T>,
        center: Option<usize>,
    ) -> Result<ContextEmbedding<T>> {
        let d = self.cfg.width;
        if prompts.rank() != 2 || prompts.shape()[1] != d || prompts.shape()[0] != self.cfg.n_prompts {
            return Err(Error::Dimension(format!(
                "prompts {:?} do not match {}×{}",
                prompts.shape(),
                self.cfg.n_prompts,
                d
            )));
        }
        let fields = self.field_tokens::<T>(r, center)?;
        let nf = fields.shape()[0];
        let mut data = fields.into_data();
        data.extend_from_slice(prompts.data());
        Ok(ContextEmbedding {
            tokens: Tensor::new(vec![nf + self.cfg.n_prompts, d], data)?,
            n_fields: nf,
            n_prompts: self.cfg.n_prompts,
        })
    }

    /// Initial prompt table, `N(0, 0.02²)` from `seed`.
    pub fn init_prompts<T: Scalar>(&self, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![self.cfg.n_prompts, self.cfg.width], |_| lit(0.02 * rng.sample::<f64, _>(StandardNormal)))
    }
}

impl fmt::Display for RiskGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Grade 7 (4+3), pT3a N0, metastasis negative, age 61, PSA 8.31.
    fn example_record() -> ClinicalRecord {
        ClinicalRecord {
            gleason_grade: 7,
            t_stage: TStage::T3,
            t_substage: SubStage::A,
            n_stage: NStage::N0,
            metastasis: Metastasis::Negative,
            age: 61.0,
            psa: 8.31,
            prostatectomy: true,
            therapy_intent: TherapyIntent::Salvage,
        }
    }

    #[test]
    fn template_record_encodes_with_five_field_tokens() {
        let enc = ContextEncoder::new(ContextConfig::default()).unwrap();
        let prompts = enc.init_prompts::<f32>(1);
        let g = enc.encode_record(&example_record(), &prompts, None).unwrap();
        assert_eq!(g.n_fields, 5);
        assert_eq!(g.len(), 5 + 8);
        assert_eq!(g.tokens.shape(), &[13, 32]);
        assert_eq!(example_record().stage_text(), "pT3a, N0");
    }

    #[test]
    fn psa_change_touches_only_psa_row() {
        let enc = ContextEncoder::new(ContextConfig::default()).unwrap();
        let prompts = enc.init_prompts::<f64>(3);
        let a = example_record();
        let b = ClinicalRecord { psa: 38.4, ..a.clone() };
        let ea = enc.encode_record(&a, &prompts, None).unwrap();
        let eb = enc.encode_record(&b, &prompts, None).unwrap();
        for i in 0..ea.len() {
            assert_eq!(ea.row(i) == eb.row(i), i != 4, "row {i}");
        }
        let ea2 = enc.encode_record(&a, &prompts, None).unwrap();
        assert_eq!(ea, ea2);
    }

    #[test]
    fn out_of_range_fields_are_rejected() {
        let enc = ContextEncoder::new(ContextConfig::default()).unwrap();
        let p = enc.init_prompts::<f32>(0);
        for r in [
            ClinicalRecord { psa: -1.0, ..example_record() },
            ClinicalRecord { age: 12.0, ..example_record() },
            ClinicalRecord { gleason_grade: 4, ..example_record() },
        ] {
            assert!(matches!(enc.encode_record(&r, &p, None), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn risk_group_examples() {
        let base = example_record();
        let r = ClinicalRecord { gleason_grade: 9, t_stage: TStage::T3, psa: 38.4, ..base.clone() };
        assert_eq!(risk_group(&r), RiskGroup::VeryHigh);
        let r = ClinicalRecord { gleason_grade: 6, t_stage: TStage::T1, psa: 4.0, ..base.clone() };
        assert_eq!(risk_group(&r), RiskGroup::Low);
        let r = ClinicalRecord { gleason_grade: 7, t_stage: TStage::T2, psa: 15.0, ..base };
        assert_eq!(risk_group(&r), RiskGroup::Intermediate);
    }

    #[test]
    fn psa_cluster_examples() {
        assert_eq!(psa_cluster(4.99).unwrap(), PsaCluster(0));
        assert_eq!(psa_cluster(5.0).unwrap(), PsaCluster(1));
        assert_eq!(psa_cluster(38.4).unwrap(), PsaCluster(4));
        assert_eq!(psa_cluster(20.0).unwrap(), PsaCluster(3));
        assert!(matches!(psa_cluster(-0.1), Err(Error::Validation(_))));
    }

    #[test]
    fn json_round_trip_and_strictness() {
        let r = example_record();
        let meta = RecordMeta { therapy_intent: r.therapy_intent, center: Some("A".into()), seed: Some(7), pni_applied: None };
        let v = record_to_json(&r, &meta);
        let obj = v.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["age", "grade", "meta", "metastasis", "psa", "stage"]);
        let (back, m) = record_from_json(&v, true).unwrap();
        assert_eq!(back, r);
        assert_eq!(m.center.as_deref(), Some("A"));

        let mut extra = v.clone();
        extra.as_object_mut().unwrap().insert("comment".into(), serde_json::json!("x"));
        assert!(matches!(record_from_json(&extra, true), Err(Error::Validation(_))));
        assert!(record_from_json(&extra, false).is_ok());
    }

    #[test]
    fn stage_parser_accepts_template_forms() {
        let s: ParsedStage = "pT3a, N0".parse().unwrap();
        assert!(s.pathological);
        assert_eq!((s.t_stage, s.t_substage, s.n_stage), (TStage::T3, SubStage::A, NStage::N0));
        let s: ParsedStage = "T4 N1".parse().unwrap();
        assert!(!s.pathological && s.t_substage == SubStage::None && s.n_stage == NStage::N1);
        assert!("T5 N0".parse::<ParsedStage>().is_err());
    }

    #[test]
    fn center_token_extends_length() {
        let enc = ContextEncoder::new(ContextConfig { center_token: true, ..Default::default() }).unwrap();
        assert_eq!(enc.n_tokens(), 14);
        let p = enc.init_prompts::<f32>(0);
        let a = enc.encode_record(&example_record(), &p, Some(0)).unwrap();
        let b = enc.encode_record(&example_record(), &p, Some(2)).unwrap();
        assert_ne!(a.row(5), b.row(5));
        assert_eq!(a.row(4), b.row(4));
        assert!(enc.encode_record(&example_record(), &p, None).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn psa_cluster_is_monotone(a in 0.0f64..500.0, b in 0.0f64..500.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(psa_cluster(lo).unwrap() <= psa_cluster(hi).unwrap());
            }

            #[test]
            fn risk_ignores_age_and_intent(age in 18.0f64..110.0, intent in 0usize..3, g in 5u8..=10, psa in 0.0f64..100.0) {
                let base = ClinicalRecord { gleason_grade: g, psa, ..example_record() };
                let intents = [TherapyIntent::Definitive, TherapyIntent::Postoperative, TherapyIntent::Salvage];
                let other = ClinicalRecord { age, therapy_intent: intents[intent], ..base.clone() };
                prop_assert_eq!(risk_group(&base), risk_group(&other));
            }
        }
    }
}
