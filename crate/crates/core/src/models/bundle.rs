use std::path::Path;

use rob_tensor::{Graph, Matrix, Var};
use serde::{Deserialize, Serialize};

use super::checkpoint::{read_arrays, write_arrays};
use super::encoder::{
    forward_encoder, init_encoder, EncoderConfig, EncoderFamily, EncoderVars, ForwardOptions,
    MaskMode,
};
use super::head::{build_student_head, head_scores, HeadConfig, HeadVariant};
use super::params::ParamStore;
use crate::data::{Image, PatchMask};
use crate::error::{Result, RobError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ROBCKPT1";
pub const ENCODER_PREFIX: &str = "encoder";
pub const HEAD_PREFIX: &str = "head";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub params: ParamStore,
    pub role: Role,
    pub frozen: bool,
}

/// Outputs of [`ModelBundle::encode`] for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub global_token: Vec<f64>,
    pub patch_tokens: Option<Matrix>,
    pub layerwise_global_tokens: Vec<Vec<f64>>,
}

/// Graph handles of one bundle pass.
pub struct BundleVars {
    pub encoder: EncoderVars,
    /// Head scores of the global token, before temperature.
    pub scores: Var,
    /// Head scores of every surviving patch token, when requested.
    pub patch_scores: Option<Var>,
}

/// Header stored with every bundle checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub role: Role,
    pub frozen: bool,
    pub step: u64,
    pub seed: u64,
    /// Names of parameters that are not trainable (e.g. copied prototypes).
    pub fixed: Vec<String>,
}

impl ModelBundle {
    pub fn new(encoder: EncoderConfig, head: HeadConfig, seed: u64, role: Role) -> Result<Self> {
        encoder.validate()?;
        head.validate()?;
        if head.in_dim != encoder.width {
            return Err(RobError::config(format!(
                "head input dim {} must equal encoder width {}",
                head.in_dim, encoder.width
            )));
        }
        let mut params = ParamStore::new();
        init_encoder(&encoder, &mut params, seed, ENCODER_PREFIX);
        head.init(&mut params, seed, HEAD_PREFIX);
        Ok(Self {
            encoder,
            head,
            params,
            role,
            frozen: role == Role::Teacher,
        })
    }

    /// Student for `teacher` with its head derived from the teacher's. The
    /// `Partial` variant gets the teacher prototypes, frozen.
    pub fn student_for(
        teacher: &ModelBundle,
        encoder: EncoderConfig,
        variant: HeadVariant,
        mlp_depth: usize,
        seed: u64,
    ) -> Result<Self> {
        let head = build_student_head(&teacher.head, variant, encoder.width, mlp_depth)?;
        let mut student = Self::new(encoder, head, seed, Role::Student)?;
        if variant == HeadVariant::Partial {
            let name = Self::prototypes_name();
            let protos = teacher
                .params
                .get(&name)
                .ok_or_else(|| RobError::contract("teacher head has no prototypes"))?
                .clone();
            *student
                .params
                .value_mut(&name)
                .expect("partial head has prototypes") = protos;
            student.params.set_trainable(&name, false);
        }
        Ok(student)
    }

    pub fn prototypes_name() -> String {
        format!("{HEAD_PREFIX}.prototypes")
    }

    /// Turns this bundle into a frozen teacher.
    pub fn into_teacher(mut self) -> Self {
        self.role = Role::Teacher;
        self.frozen = true;
        self
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn encoder_checksum(&self) -> String {
        self.params
            .checksum_filtered(|n| n.starts_with(ENCODER_PREFIX))
    }

    pub fn head_checksum(&self) -> String {
        self.params
            .checksum_filtered(|n| n.starts_with(HEAD_PREFIX))
    }

    /// Forward through encoder and head. Frozen bundles never register parameters.
    pub fn forward(
        &self,
        g: &mut Graph,
        images: &[&Image],
        opts: &mut ForwardOptions<'_>,
        with_patch_scores: bool,
    ) -> Result<BundleVars> {
        let train = opts.train && !self.frozen;
        let saved = opts.train;
        opts.train = train;
        let enc = forward_encoder(&self.encoder, &self.params, ENCODER_PREFIX, g, images, opts);
        opts.train = saved;
        let enc = enc?;
        let scores = head_scores(&self.head, &self.params, HEAD_PREFIX, g, enc.global, train);
        let patch_scores = match (with_patch_scores, enc.patch_tokens) {
            (true, Some(p)) => Some(head_scores(
                &self.head,
                &self.params,
                HEAD_PREFIX,
                g,
                p,
                train,
            )),
            (true, None) => {
                return Err(RobError::contract(
                    "patch scores need a patch_transformer encoder",
                ))
            }
            (false, _) => None,
        };
        Ok(BundleVars {
            encoder: enc,
            scores,
            patch_scores,
        })
    }

    /// Gradient-free encoding of one view.
    pub fn encode(
        &self,
        view: &Image,
        mask: Option<&PatchMask>,
        mode: MaskMode,
    ) -> Result<EncoderOutput> {
        if mask.is_some() && self.encoder.family != EncoderFamily::PatchTransformer {
            return Err(RobError::contract(
                "patch masks require a patch_transformer encoder",
            ));
        }
        let masks = [mask.cloned()];
        let mut g = Graph::new();
        let mut opts = ForwardOptions {
            masks: mask.map(|_| &masks[..]),
            mask_mode: Some(mode),
            layerwise: true,
            ..Default::default()
        };
        let vars = forward_encoder(
            &self.encoder,
            &self.params,
            ENCODER_PREFIX,
            &mut g,
            &[view],
            &mut opts,
        )?;
        Ok(EncoderOutput {
            global_token: g.value(vars.global).row(0).to_vec(),
            patch_tokens: vars.patch_tokens.map(|p| g.value(p).clone()),
            layerwise_global_tokens: vars
                .layerwise
                .iter()
                .map(|&v| g.value(v).row(0).to_vec())
                .collect(),
        })
    }

    /// Head probabilities for a batch of unmasked views.
    pub fn probabilities(&self, images: &[&Image], temperature: f64) -> Result<Matrix> {
        super::head::check_temperature(temperature)?;
        let mut g = Graph::new();
        let vars = self.forward(&mut g, images, &mut ForwardOptions::default(), false)?;
        Ok(rob_tensor::softmax_rows(
            &g.value(vars.scores).scale(1.0 / temperature),
        ))
    }

    pub fn save(&self, path: &Path, step: u64, seed: u64) -> Result<String> {
        let header = CheckpointHeader {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            role: self.role,
            frozen: self.frozen,
            step,
            seed,
            fixed: self
                .params
                .iter()
                .filter(|(_, e)| !e.trainable)
                .map(|(n, _)| n.clone())
                .collect(),
        };
        let arrays: Vec<(&str, &Matrix)> = self
            .params
            .iter()
            .map(|(n, e)| (n.as_str(), &e.value))
            .collect();
        let meta = serde_json::to_value(&header).expect("header serializes");
        write_arrays(path, CHECKPOINT_MAGIC, meta, &arrays)
    }

    /// Loads a checkpoint; returns the bundle, its header and the file digest.
    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader, String)> {
        let (meta, arrays, digest) = read_arrays(path, CHECKPOINT_MAGIC, "checkpoint")?;
        let header: CheckpointHeader =
            serde_json::from_value(meta).map_err(|e| RobError::Format {
                what: "checkpoint",
                reason: format!("header: {e}"),
            })?;
        let mut bundle = Self::new(header.encoder.clone(), header.head.clone(), 0, header.role)?;
        bundle.frozen = header.frozen;
        let mut loaded = ParamStore::new();
        for (name, m) in arrays {
            let trainable = !header.fixed.contains(&name);
            loaded.insert(&name, m, trainable);
        }
        if !bundle.params.same_layout(&loaded) {
            return Err(RobError::Format {
                what: "checkpoint",
                reason: "parameter layout does not match the stored configs".into(),
            });
        }
        bundle.params = loaded;
        Ok((bundle, header, digest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::models::head::HeadVariant;

    fn tiny() -> ModelBundle {
        let enc = EncoderConfig::transformer(2, 16, 2, 8, 32);
        let head = HeadConfig::ssl_default(16, 24, 8, 12);
        ModelBundle::new(enc, head, 7, Role::Student).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        let mut b = tiny();
        b.params
            .set_trainable(&ModelBundle::prototypes_name(), false);
        let d1 = b.save(&path, 12, 7).unwrap();
        let (back, header, d2) = ModelBundle::load(&path).unwrap();
        assert_eq!(back, b);
        assert_eq!(d1, d2);
        assert_eq!(header.step, 12);
        assert_eq!(back.checksum(), b.checksum());
    }

    #[test]
    fn head_width_must_match_encoder() {
        let enc = EncoderConfig::transformer(2, 16, 2, 8, 32);
        let head = HeadConfig::ssl_default(32, 24, 8, 12);
        assert!(ModelBundle::new(enc, head, 0, Role::Student).is_err());
    }

    #[test]
    fn probabilities_are_distributions() {
        let ds = generate_synthetic_dataset(2, 2, 32, 0).unwrap();
        let imgs: Vec<&Image> = ds.records.iter().map(|r| &r.image).collect();
        for variant in HeadVariant::ALL {
            let mut b = tiny();
            if variant == HeadVariant::Mlp {
                let head = crate::models::build_student_head(&b.head, variant, 16, 2).unwrap();
                b = ModelBundle::new(b.encoder.clone(), head, 1, Role::Student).unwrap();
            }
            let p = b.probabilities(&imgs, 0.1).unwrap();
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(p.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }
}
