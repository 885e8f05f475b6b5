//! Aggregated metrics, their JSON form, and table-style CSV export.

use serde::{Deserialize, Serialize};

use super::attribution::{coherence, faithfulness_area, Ablation};
use super::distances::{chamfer, emd};
use super::generation::{fid_latent, modified_is, msr, pcams, Covariance, PROB_FLOOR};
use crate::classifier::Classifier;
use crate::error::{invalid, Result};
use crate::igd::SaliencySequence;
use crate::pointcloud::PointCloud;
use crate::Scalar;

pub const METRICS_VERSION: &str = "dam-metrics-v1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_hash: String,
    pub classifier_hash: String,
    pub diffusion_hash: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub count: usize,
    pub m_is: Option<f64>,
    pub fid: Option<f64>,
    pub cd: f64,
    pub emd: f64,
    pub msr: f64,
}

/// One row of the attribution comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub method: String,
    /// Faithfulness area keyed by maximum ablation rate.
    pub faithfulness: Vec<(f64, f64)>,
    pub l_var: f64,
    pub l_d: f64,
    pub l_w: f64,
    pub l_sc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub m_is: f64,
    pub fid: f64,
    pub cd: f64,
    pub emd: f64,
    pub pcams: f64,
    pub msr: f64,
    pub fid_covariance: Covariance,
    pub symmetric_cd: bool,
    /// False if any EMD fell back to the entropic approximation.
    pub emd_exact: bool,
    pub per_class: Vec<ClassMetrics>,
    pub attribution: Vec<AttributionRow>,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationInputs {
    pub covariance: Covariance,
    pub symmetric_cd: bool,
}

impl Default for GenerationInputs {
    fn default() -> Self {
        Self { covariance: Covariance::Diagonal, symmetric_cd: false }
    }
}

struct Scored {
    class: usize,
    probs: Vec<f64>,
    latent: Vec<f64>,
    predicted: usize,
    cd: f64,
    emd: f64,
    exact: bool,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Scores generated clouds (with their target classes) against real
/// reference clouds per class. References are resampled to the generated size for EMD.
pub fn evaluate_generation<T: Scalar>(
    model: &Classifier<T>,
    generated: &[(usize, PointCloud<T>)],
    references: &[Vec<PointCloud<T>>],
    inputs: GenerationInputs,
    provenance: Provenance,
) -> Result<MetricsReport> {
    if generated.len() < 2 {
        return Err(invalid("evaluation needs at least two generated clouds"));
    }
    let mut scored = Vec::with_capacity(generated.len());
    for (k, (class, x)) in generated.iter().enumerate() {
        let refs = references.get(*class).filter(|r| !r.is_empty()).ok_or_else(|| invalid(format!("no reference clouds for class {class}")))?;
        let out = model.classify(x, None)?;
        let mut cds = Vec::new();
        let mut emds = Vec::new();
        let mut exact = true;
        for (r_i, r) in refs.iter().enumerate() {
            cds.push(chamfer(x, r, inputs.symmetric_cd)?);
            let r = if r.n_points() == x.n_points() { r.clone() } else { r.resample_fixed(x.n_points(), (k * 1000 + r_i) as u64)? };
            let e = emd(x, &r)?;
            exact &= e.exact;
            emds.push(e.value);
        }
        scored.push(Scored {
            class: *class,
            probs: out.probabilities.iter().map(|p| p.as_f64()).collect(),
            latent: out.latent.iter().map(|p| p.as_f64()).collect(),
            predicted: out.predicted(),
            cd: mean(cds.into_iter()),
            emd: mean(emds.into_iter()),
            exact,
        });
    }
    let real_latents = |class: Option<usize>| -> Result<Vec<Vec<f64>>> {
        let mut v = Vec::new();
        for (c, refs) in references.iter().enumerate() {
            if class.is_none_or(|k| k == c) {
                for r in refs {
                    v.push(model.classify(r, None)?.latent.iter().map(|p| p.as_f64()).collect());
                }
            }
        }
        Ok(v)
    };
    let probs: Vec<Vec<f64>> = scored.iter().map(|s| s.probs.clone()).collect();
    let m_is = modified_is(&probs)?;
    let gen_latents: Vec<Vec<f64>> = scored.iter().map(|s| s.latent.clone()).collect();
    let fid = fid_latent(&gen_latents, &real_latents(None)?, inputs.covariance)?;
    let cd = mean(scored.iter().map(|s| s.cd));
    let emd_v = mean(scored.iter().map(|s| s.emd));
    let preds: Vec<usize> = scored.iter().map(|s| s.predicted).collect();
    let targets: Vec<usize> = scored.iter().map(|s| s.class).collect();
    let msr_v = msr(&preds, &targets)?;
    let pc = pcams(m_is, fid.max(PROB_FLOOR), cd.max(PROB_FLOOR))?;
    let mut classes: Vec<usize> = targets.clone();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::new();
    for c in classes {
        let rows: Vec<&Scored> = scored.iter().filter(|s| s.class == c).collect();
        let probs: Vec<Vec<f64>> = rows.iter().map(|s| s.probs.clone()).collect();
        let lat: Vec<Vec<f64>> = rows.iter().map(|s| s.latent.clone()).collect();
        let real = real_latents(Some(c))?;
        per_class.push(ClassMetrics {
            class: c,
            count: rows.len(),
            m_is: modified_is(&probs).ok(),
            fid: fid_latent(&lat, &real, inputs.covariance).ok(),
            cd: mean(rows.iter().map(|s| s.cd)),
            emd: mean(rows.iter().map(|s| s.emd)),
            msr: rows.iter().filter(|s| s.predicted == c).count() as f64 / rows.len() as f64,
        });
    }
    Ok(MetricsReport {
        version: METRICS_VERSION.to_string(),
        m_is,
        fid,
        cd,
        emd: emd_v,
        pcams: pc,
        msr: msr_v,
        fid_covariance: inputs.covariance,
        symmetric_cd: inputs.symmetric_cd,
        emd_exact: scored.iter().all(|s| s.exact),
        per_class,
        attribution: Vec::new(),
        provenance,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// `Method,m-IS,FID,CD,EMD,PCAMS,mSR` rows.
pub fn generation_table_csv(rows: &[(&str, &MetricsReport)]) -> String {
    let mut s = String::from("method,m_is,fid,cd,emd,pcams,msr\n");
    for (name, r) in rows {
        s.push_str(&format!("{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n", r.m_is, r.fid, r.cd, r.emd, r.pcams, r.msr));
    }
    s
}

/// One row per method: faithfulness areas first, then the coherence terms.
pub fn attribution_table_csv(rows: &[AttributionRow]) -> String {
    let js: Vec<f64> = rows.first().map(|r| r.faithfulness.iter().map(|(j, _)| *j).collect()).unwrap_or_default();
    let mut s = String::from("method");
    for j in &js {
        s.push_str(&format!(",s_{j:.1}"));
    }
    s.push_str(",l_var,l_d,l_w,l_sc\n");
    for r in rows {
        s.push_str(&r.method);
        for (_, a) in &r.faithfulness {
            s.push_str(&format!(",{a:.6}"));
        }
        s.push_str(&format!(",{:.6e},{:.6e},{:.6e},{}\n", r.l_var, r.l_d, r.l_w, opt(r.l_sc)));
    }
    s
}

/// Mean faithfulness of each sequence's final map on its cloud, for every `j`,
/// with the mean coherence terms; `l_sc` averages only the defined values.
pub fn attribution_row<T: Scalar>(
    model: &Classifier<T>,
    method: &str,
    items: &[(PointCloud<T>, SaliencySequence)],
    js: &[f64],
    step: f64,
    ablation: Ablation,
) -> Result<AttributionRow> {
    if items.is_empty() {
        return Err(invalid("no saliency sequences to score"));
    }
    let mut faith = vec![0.0; js.len()];
    let (mut l_var, mut l_d, mut l_w) = (0.0, 0.0, 0.0);
    let mut scs = Vec::new();
    for (x, seq) in items {
        let last = seq.last().ok_or_else(|| invalid("empty saliency sequence"))?;
        for (f, &j) in faith.iter_mut().zip(js) {
            *f += faithfulness_area(model, x, &last.psi, j, step, ablation)?.area;
        }
        let c = coherence(seq)?;
        l_var += c.l_var;
        l_d += c.l_d;
        l_w += c.l_w;
        scs.extend(c.l_sc);
    }
    let k = items.len() as f64;
    Ok(AttributionRow {
        method: method.to_string(),
        faithfulness: js.iter().zip(&faith).map(|(&j, &f)| (j, f / k)).collect(),
        l_var: l_var / k,
        l_d: l_d / k,
        l_w: l_w / k,
        l_sc: (!scs.is_empty()).then(|| scs.iter().sum::<f64>() / scs.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::rng::{seeded, standard_normal};

    #[test]
    fn report_identity_and_json() {
        let cfg = ClassifierConfig { per_point_widths: vec![8, 6], head_widths: vec![6], ..ClassifierConfig::toy(2) };
        let m = Classifier::<f64>::new(cfg, 0).unwrap();
        let cloud = |s: u64, n: usize| PointCloud::new(standard_normal(&mut seeded(s), n, 3)).unwrap();
        let gen: Vec<(usize, PointCloud<f64>)> = (0..6).map(|i| (i % 2, cloud(i as u64, 16))).collect();
        let refs = vec![(0..3).map(|i| cloud(100 + i, 20)).collect(), (0..3).map(|i| cloud(200 + i, 16)).collect()];
        let r = evaluate_generation(&m, &gen, &refs, GenerationInputs::default(), Provenance::default()).unwrap();
        assert!((r.pcams - (r.m_is - (r.fid.ln() + r.cd.ln()) / 2.0)).abs() < 1e-9);
        assert_eq!(r.per_class.len(), 2);
        let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = generation_table_csv(&[("dam", &r)]);
        assert!(csv.starts_with("method,m_is"));
        assert_eq!(csv.lines().count(), 2);
    }
}
