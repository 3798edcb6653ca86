use mome::clinical::{NStage, TStage, TherapyIntent};
use mome::experiment::median;
use mome::metrics::gpr;
use mome::mome::flag;
use mome::synth::{build_default_policies, generate_case, generate_cohort, sample_record, CenterPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `|p̂ − p| ≤ 3·sqrt(p(1−p)/n)`, with a floor so p ∈ {0, 1} still demands an exact match.
fn within_3se(label: &str, hits: usize, n: usize, p: f64) {
    let phat = hits as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((phat - p).abs() <= 3.0 * se + 1e-12, "{label}: observed {phat:.4}, expected {p:.4} (3 SE = {:.4})", 3.0 * se);
}

#[test]
fn clinical_frequencies_match_policies() {
    let n = 4000;
    for (c, policy) in build_default_policies() {
        let d = &policy.clinical;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let recs: Vec<_> = (0..n).map(|_| sample_record(d, &mut rng).unwrap()).collect();
        for (i, t) in [TStage::T1, TStage::T2, TStage::T3, TStage::T4].iter().enumerate() {
            within_3se(&format!("{c} {t:?}"), recs.iter().filter(|r| r.t_stage == *t).count(), n, d.t_stage[i]);
        }
        for (i, &p) in d.gleason.iter().enumerate() {
            let g = 5 + i as u8;
            within_3se(&format!("{c} Gleason {g}"), recs.iter().filter(|r| r.gleason_grade == g).count(), n, p);
        }
        within_3se(&format!("{c} N1"), recs.iter().filter(|r| r.n_stage == NStage::N1).count(), n, d.n1);
        let surgery = recs.iter().filter(|r| r.prostatectomy).count();
        within_3se(&format!("{c} prostatectomy"), surgery, n, d.prostatectomy);
        let postop = recs.iter().filter(|r| r.therapy_intent == TherapyIntent::Postoperative).count();
        if surgery > 0 {
            within_3se(&format!("{c} postop | surgery"), postop, surgery, d.postop_given_surgery);
        }
        // Median of a log-normal is exp(μ): half the PSA draws fall below it.
        within_3se(&format!("{c} PSA < median"), recs.iter().filter(|r| r.psa < d.psa_median).count(), n, 0.5);
    }
}

#[test]
fn nodal_irradiation_follows_risk_table() {
    let policies = build_default_policies();
    let p = &policies[&flag("A")];
    let cases = generate_cohort(p, 23, 0, 2000).unwrap();
    for risk in 0..4 {
        let group: Vec<_> = cases.iter().filter(|c| c.risk() as usize == risk).collect();
        if group.len() < 30 {
            continue;
        }
        let hits = group.iter().filter(|c| c.pni_applied).count();
        within_3se(&format!("A PNI risk {risk}"), hits, group.len(), p.pni[risk]);
    }
}

fn gprs(p: &CenterPolicy, seed: u64, n: usize) -> Vec<f64> {
    (0..n as u64).map(|i| {
        let c = generate_case(p, seed, i).unwrap();
        gpr(&c.gtv, &c.ptv).unwrap().unwrap()
    })
    .collect()
}

#[test]
fn conservative_center_has_higher_median_gpr() {
    let policies = build_default_policies();
    let a = median(&gprs(&policies[&flag("A")], 3, 500)).unwrap();
    let c = median(&gprs(&policies[&flag("C")], 3, 500)).unwrap();
    assert!(a < c, "median GPR A {a:.2} should be below C {c:.2}");
}

/// Sarle's bimodality coefficient `(γ² + 1) / (κ + 3(n−1)²/((n−2)(n−3)))`
/// with sample skewness γ and excess kurtosis κ; values above 5/9 (the
/// uniform distribution's) indicate bimodality.
fn bimodality_coefficient(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let moment = |k: i32| v.iter().map(|x| (x - m).powi(k)).sum::<f64>() / n;
    let g = moment(3) / moment(2).powf(1.5);
    let k = moment(4) / moment(2).powi(2) - 3.0;
    (g * g + 1.0) / (k + 3.0 * (n - 1.0).powi(2) / ((n - 2.0) * (n - 3.0)))
}

/// A/B delineation policies over a risk-stratified cohort: 100 cases per risk
/// group and center. The clinical mix is broadened so low-risk cases occur;
/// the natural A/B mix is almost entirely nodal-irradiated.
#[test]
fn mixed_risk_ab_gpr_is_bimodal() {
    let policies = build_default_policies();
    let mut v = Vec::new();
    for c in ["A", "B"] {
        let mut p = policies[&flag(c)].clone();
        p.clinical.t_stage = [0.25; 4];
        p.clinical.gleason = [0.3, 0.3, 0.2, 0.1, 0.05, 0.05];
        p.clinical.psa_median = 8.0;
        let mut per = [0usize; 4];
        let mut i = 0;
        while per.iter().any(|&n| n < 100) {
            let case = generate_case(&p, 8, i).unwrap();
            i += 1;
            let r = case.risk() as usize;
            if per[r] < 100 {
                per[r] += 1;
                v.push(gpr(&case.gtv, &case.ptv).unwrap().unwrap());
            }
        }
    }
    let bc = bimodality_coefficient(&v);
    assert!(bc > 5.0 / 9.0, "bimodality coefficient {bc:.3}");

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let normal: Vec<f64> = (0..800).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
    assert!(bimodality_coefficient(&normal) < 5.0 / 9.0);
}
