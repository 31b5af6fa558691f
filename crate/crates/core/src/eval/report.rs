use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::features::{extract_features, ReprChoice};
use super::knn::{knn_eval, KnnWeighting, DEFAULT_KNN_K};
use super::low_shot::{low_shot_eval, LowShotResult, LowShotSpec, NORMALIZATION_ORDER};
use super::probe::{probe_sweep, ProbeConfig, ProbeHead, ProbeSweep};
use crate::data::Dataset;
use crate::error::{Result, RobError};
use crate::models::checkpoint::sha256_hex;
use crate::models::ModelBundle;

pub const DEFAULT_CROP_FRACTION: f64 = 0.875;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Knn,
    Linear,
    LowShot,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Knn, Protocol::Linear, Protocol::LowShot];
}

fn default_protocols() -> Vec<Protocol> {
    Protocol::ALL.to_vec()
}

fn default_k() -> Vec<usize> {
    DEFAULT_KNN_K.to_vec()
}

fn default_heads() -> Vec<ProbeHead> {
    ProbeHead::ALL.to_vec()
}

fn default_crop() -> f64 {
    DEFAULT_CROP_FRACTION
}

fn default_low_shot() -> Vec<usize> {
    vec![1, 5]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_protocols")]
    pub protocols: Vec<Protocol>,
    #[serde(default = "default_k")]
    pub knn_k: Vec<usize>,
    #[serde(default)]
    pub knn_weighting: KnnWeighting,
    /// Representations for the linear sweep; empty means every one the encoder supports.
    #[serde(default)]
    pub reprs: Vec<ReprChoice>,
    #[serde(default = "default_heads")]
    pub probe_heads: Vec<ProbeHead>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "default_low_shot")]
    pub low_shot_images_per_class: Vec<usize>,
    #[serde(default = "default_crop")]
    pub crop_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocols: default_protocols(),
            knn_k: default_k(),
            knn_weighting: KnnWeighting::default(),
            reprs: Vec::new(),
            probe_heads: default_heads(),
            probe: ProbeConfig::default(),
            low_shot_images_per_class: default_low_shot(),
            crop_fraction: DEFAULT_CROP_FRACTION,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(RobError::config(
                "evaluation.crop_fraction must lie in (0, 1]",
            ));
        }
        if self.knn_k.contains(&0) {
            return Err(RobError::config(
                "evaluation.knn_k entries must be positive",
            ));
        }
        if let KnnWeighting::Exponential { temperature } = self.knn_weighting {
            if !(temperature > 0.0) {
                return Err(RobError::config(
                    "evaluation.knn_weighting.temperature must be positive",
                ));
            }
        }
        if self.protocols.contains(&Protocol::Linear) && self.probe_heads.is_empty() {
            return Err(RobError::config("evaluation.probe_heads is empty"));
        }
        if !(0.0..1.0).contains(&self.probe.dropout) {
            return Err(RobError::config(
                "evaluation.probe.dropout must lie in [0, 1)",
            ));
        }
        Ok(())
    }

    /// Digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("serializable")
                .as_bytes(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnCell {
    pub repr: ReprChoice,
    pub k: usize,
    pub weighting: KnnWeighting,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowShotCell {
    pub repr: ReprChoice,
    #[serde(flatten)]
    pub result: LowShotResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub knn: Vec<KnnCell>,
    pub linear: Option<ProbeSweep>,
    pub low_shot: Vec<LowShotCell>,
    pub config: EvalConfig,
    pub config_digest: String,
    pub model_digest: Option<String>,
    pub low_shot_normalization: Vec<String>,
    pub runtime_seconds: f64,
}

impl EvalReport {
    pub fn knn_accuracy(&self, k: usize) -> Option<f64> {
        self.knn.iter().find(|c| c.k == k).map(|c| c.accuracy)
    }

    /// Copy with the runtime zeroed, for comparing repeated evaluations.
    pub fn without_runtime(&self) -> EvalReport {
        EvalReport {
            runtime_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pretty_json() + "\n").map_err(|e| RobError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| RobError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| RobError::Format {
            what: "eval report",
            reason: e.to_string(),
        })
    }
}

/// Runs the configured protocols on frozen features of `bundle`.
pub fn evaluate_bundle(
    bundle: &ModelBundle,
    train: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let start = Instant::now();
    let before = bundle.checksum();
    let supported = ReprChoice::applicable(bundle);
    let reprs = if cfg.reprs.is_empty() {
        supported
    } else {
        cfg.reprs.clone()
    };

    let mut global = None;
    if cfg.protocols.iter().any(|p| *p != Protocol::Linear) {
        global = Some((
            extract_features(bundle, train, ReprChoice::LastGlobal, cfg.crop_fraction)?,
            extract_features(bundle, test, ReprChoice::LastGlobal, cfg.crop_fraction)?,
        ));
    }

    let mut knn = Vec::new();
    if cfg.protocols.contains(&Protocol::Knn) {
        let (tr, te) = global.as_ref().expect("extracted above");
        for &k in &cfg.knn_k {
            knn.push(KnnCell {
                repr: ReprChoice::LastGlobal,
                k,
                weighting: cfg.knn_weighting,
                accuracy: knn_eval(tr, te, k, cfg.knn_weighting)?,
            });
        }
    }

    let mut linear = None;
    if cfg.protocols.contains(&Protocol::Linear) {
        let mut tables = Vec::with_capacity(reprs.len());
        for &repr in &reprs {
            tables.push((
                extract_features(bundle, train, repr, cfg.crop_fraction)?,
                extract_features(bundle, test, repr, cfg.crop_fraction)?,
            ));
        }
        linear = Some(probe_sweep(&tables, &cfg.probe_heads, &cfg.probe)?);
    }

    let mut low_shot = Vec::new();
    if cfg.protocols.contains(&Protocol::LowShot) {
        let (tr, te) = global.as_ref().expect("extracted above");
        for &ipc in &cfg.low_shot_images_per_class {
            low_shot.push(LowShotCell {
                repr: ReprChoice::LastGlobal,
                result: low_shot_eval(tr, te, &LowShotSpec::standard(ipc, cfg.seed))?,
            });
        }
    }

    if bundle.checksum() != before {
        return Err(RobError::contract("evaluation modified encoder parameters"));
    }
    Ok(EvalReport {
        knn,
        linear,
        low_shot,
        config: cfg.clone(),
        config_digest: cfg.digest(),
        model_digest: None,
        low_shot_normalization: NORMALIZATION_ORDER.iter().map(|s| s.to_string()).collect(),
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::models::{EncoderConfig, HeadConfig, Role};

    #[test]
    fn protocol_subset_and_repeatability() {
        let ds = generate_synthetic_dataset(3, 6, 16, 1).unwrap();
        let (train, test) = ds.split_stratified(0.5).unwrap();
        let bundle = ModelBundle::new(
            EncoderConfig::transformer(2, 16, 2, 4, 16),
            HeadConfig::ssl_default(16, 16, 8, 8),
            0,
            Role::Teacher,
        )
        .unwrap();
        let cfg = EvalConfig {
            protocols: vec![Protocol::Knn],
            knn_k: vec![1, 2],
            ..Default::default()
        };
        let a = evaluate_bundle(&bundle, &train, &test, &cfg).unwrap();
        assert_eq!(a.knn.len(), 2);
        assert!(a.linear.is_none() && a.low_shot.is_empty());
        let b = evaluate_bundle(&bundle, &train, &test, &cfg).unwrap();
        assert_eq!(a.without_runtime(), b.without_runtime());
    }

    #[test]
    fn defaults_report_k10_and_k20() {
        assert_eq!(EvalConfig::default().knn_k, vec![10, 20]);
    }
}
