//! Flat `key = value` configuration with namespaced keys.
//!
//! Every key has a default; unknown keys are rejected. Lines starting with
//! `#` and text after ` #` are comments.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Schedule;
use crate::pipeline::{build_accumulator, PipelineConfig};
use crate::propcls::{parse_merge_map, PoolSource, PropClsConfig};
use crate::propseg::{ClassPolicy, PropSegConfig};
use crate::synthbench::{BenchParams, ProposalParams, SceneParams};
use crate::toy2d::{ToyConfig, ToyParams};
use crate::train::TrainConfig;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn k(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default, help }
}

/// Every recognised key with its default.
pub const KEYS: &[KeySpec] = &[
    k("train.lr", "0.1", "initial learning rate"),
    k("train.momentum", "0.9", "SGD momentum"),
    k("train.batch_size", "64", "minibatch size"),
    k("train.epochs", "20", "training epochs"),
    k("train.lr_decay", "10", "learning-rate divisor applied every period"),
    k("train.lr_period", "10", "epochs between learning-rate decays"),
    k("train.ema", "0.999", "EMA momentum of the RBF centers"),
    k("head.type", "rbf", "uncertainty head: rbf, entropy or dropout"),
    k("head.sigma", "0.1", "RBF kernel length scale"),
    k("head.feature_dim", "32", "feature width entering the head"),
    k("head.centers", "16", "RBF centers per class"),
    k("head.mc_passes", "10", "Monte-Carlo passes of the dropout head"),
    k("bench.train_scenes", "40", "training scenes"),
    k("bench.test_scenes", "20", "test scenes"),
    k("bench.width", "64", "scene width in pixels"),
    k("bench.height", "64", "scene height in pixels"),
    k("bench.noise", "0.03", "per-pixel image noise"),
    k("bench.color_jitter", "0.05", "per-instance color shift"),
    k("bench.per_instance", "2", "jittered proposals per object"),
    k("bench.jitter", "0.1", "proposal box jitter as a fraction of box size"),
    k("bench.background_ratio", "0.5", "background proposals per object proposal"),
    k("bench.boundary_radius", "1", "boundary band radius at 28x28"),
    k("bench.iou_threshold", "0.5", "auto-label IoU threshold"),
    k("propseg.regularizer", "boundary", "none, boundary or gp"),
    k("propseg.recipe", "context", "feature recipe: appearance or context"),
    k("propseg.classes", "all", "head classes: all or bg-only"),
    k("propseg.no_conv", "false", "drop the conv layers"),
    k("propseg.conv_layers", "4", "3x3 conv layers"),
    k("propseg.conv_width", "64", "conv channels"),
    k("propseg.projection_scale", "0.02", "fixed output scale of the feature projection"),
    k("propseg.dropout_rate", "0.5", "dropout rate for the dropout head"),
    k("propseg.theta_bg", "0.5", "background score threshold of the object mask"),
    k("propseg.gp_lambda", "0.5", "gradient-penalty weight"),
    k("propseg.gp_sites", "1", "pixels per sample in the gradient penalty"),
    k("propcls.head", "rbf", "classifier head: rbf or entropy"),
    k("propcls.pool", "stack", "pooled features: stack or input"),
    k("propcls.hidden", "64", "MLP hidden width"),
    k("propcls.feature_dim", "16", "classifier feature width"),
    k("propcls.centers", "1", "RBF centers per class"),
    k("propcls.sigma", "0.1", "RBF kernel length scale"),
    k("propcls.projection_scale", "0.02", "fixed output scale of the feature projection"),
    k("propcls.merge", "", "label merges, e.g. circle:square"),
    k("propcls.lr", "0.1", "initial learning rate"),
    k("propcls.batch_size", "64", "minibatch size"),
    k("propcls.epochs", "40", "training epochs"),
    k("toy.variant", "boundary", "plain, bn, gp, bn+gp, spectral or boundary"),
    k("toy.per_class", "500", "points per blob"),
    k("toy.ood_count", "1000", "uniform outliers"),
    k("toy.hidden", "64", "hidden width"),
    k("toy.feature_dim", "16", "feature width"),
    k("toy.centers", "8", "RBF centers per class"),
    k("toy.projection_scale", "0.02", "fixed output scale of the feature projection"),
    k("toy.boundary_count", "500", "boundary points for the boundary variant"),
    k("toy.boundary_jitter", "0.3", "boundary point jitter"),
    k("toy.lr", "0.01", "initial learning rate"),
    k("toy.batch_size", "64", "minibatch size"),
    k("toy.epochs", "30", "training epochs"),
    k("toy.grid", "61", "uncertainty grid nodes per axis"),
    k("pipeline.theta_cls", "0.3", "discard proposals with u_cls below this"),
    k("pipeline.nms_iou", "0.5", "overlap suppression IoU"),
    k("pipeline.accumulator", "max", "overlap combination: max, sum or mean"),
    k("pipeline.theta_flag", "0.5", "flag detections with u_cls above this"),
    k("metrics.tpr", "0.95", "target true-positive rate of the FPR metric"),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, found `{line}`")))?;
            let key = key.trim();
            if config.values.contains_key(key) {
                return Err(Error::config(key, format!("set twice (line {})", n + 1)));
            }
            config.set(key, value.trim())?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if spec(key).is_none() {
            return Err(Error::config(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        let s = spec(key).ok_or_else(|| Error::config(key, "unknown key"))?;
        Ok(self.values.get(key).map_or(s.default, String::as_str))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| Error::config(key, format!("cannot parse `{raw}`")))
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|s| format!("{} = {}\n", s.key, self.values.get(s.key).map_or(s.default, String::as_str)))
            .collect()
    }

    fn positive<T: FromStr + PartialOrd + Default>(&self, key: &str) -> Result<T> {
        let v: T = self.get(key)?;
        if v > T::default() {
            Ok(v)
        } else {
            Err(Error::config(key, "must be positive"))
        }
    }

    fn unit(&self, key: &str) -> Result<f64> {
        let v: f64 = self.get(key)?;
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(Error::config(key, "must lie in [0, 1]"))
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let momentum = self.get::<f64>("train.momentum")?;
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        let decay: f64 = self.get("train.lr_decay")?;
        if !(decay >= 1.0) {
            return Err(Error::config("train.lr_decay", "must be at least 1"));
        }
        Ok(TrainConfig {
            learning_rate: self.positive("train.lr")?,
            momentum,
            batch_size: self.positive("train.batch_size")?,
            epochs: self.get("train.epochs")?,
            schedule: Schedule {
                decay_factor: decay,
                epoch_period: self.positive("train.lr_period")?,
            },
            ema_momentum: self.unit("train.ema")?,
        })
    }

    pub fn bench(&self) -> Result<BenchParams> {
        let iou = self.get::<f64>("bench.iou_threshold")?;
        if !(iou > 0.0 && iou < 1.0) {
            return Err(Error::config("bench.iou_threshold", "must lie in (0, 1)"));
        }
        Ok(BenchParams {
            train_scenes: self.get("bench.train_scenes")?,
            test_scenes: self.get("bench.test_scenes")?,
            scene: SceneParams {
                width: self.positive("bench.width")?,
                height: self.positive("bench.height")?,
                noise: self.get("bench.noise")?,
                color_jitter: self.get("bench.color_jitter")?,
                ..SceneParams::default()
            },
            proposals: ProposalParams {
                per_instance: self.get("bench.per_instance")?,
                jitter: self.get("bench.jitter")?,
                background_ratio: self.get("bench.background_ratio")?,
                boundary_radius: self.get("bench.boundary_radius")?,
                iou_threshold: iou,
                ..ProposalParams::default()
            },
            ..BenchParams::default()
        })
    }

    pub fn propseg(&self) -> Result<PropSegConfig> {
        Ok(PropSegConfig {
            head: self.get("head.type")?,
            regularizer: self.get("propseg.regularizer")?,
            recipe: self.get("propseg.recipe")?,
            policy: ClassPolicy::from_name(self.raw("propseg.classes")?)?,
            no_conv: self.get("propseg.no_conv")?,
            conv_layers: self.get("propseg.conv_layers")?,
            conv_width: self.get("propseg.conv_width")?,
            feature_dim: self.positive("head.feature_dim")?,
            centers_per_class: self.positive("head.centers")?,
            sigma: self.positive("head.sigma")?,
            projection_scale: self.positive("propseg.projection_scale")?,
            dropout_rate: self.get("propseg.dropout_rate")?,
            mc_passes: self.positive("head.mc_passes")?,
            theta_bg: self.get("propseg.theta_bg")?,
            gp_lambda: self.get("propseg.gp_lambda")?,
            gp_sites: self.positive("propseg.gp_sites")?,
            train: self.train()?,
        })
    }

    pub fn propcls(&self) -> Result<PropClsConfig> {
        Ok(PropClsConfig {
            head: self.get("propcls.head")?,
            pool: PoolSource::from_name(self.raw("propcls.pool")?)?,
            hidden: self.positive("propcls.hidden")?,
            feature_dim: self.positive("propcls.feature_dim")?,
            centers_per_class: self.positive("propcls.centers")?,
            sigma: self.positive("propcls.sigma")?,
            projection_scale: self.positive("propcls.projection_scale")?,
            merge: parse_merge_map(self.raw("propcls.merge")?)?,
            train: TrainConfig {
                learning_rate: self.positive("propcls.lr")?,
                batch_size: self.positive("propcls.batch_size")?,
                epochs: self.get("propcls.epochs")?,
                ..self.train()?
            },
        })
    }

    pub fn toy(&self) -> Result<(ToyParams, ToyConfig)> {
        let params = ToyParams {
            per_class: self.positive("toy.per_class")?,
            ood_count: self.get("toy.ood_count")?,
            ..ToyParams::default()
        };
        let config = ToyConfig {
            hidden: self.positive("toy.hidden")?,
            feature_dim: self.positive("toy.feature_dim")?,
            centers_per_class: self.positive("toy.centers")?,
            sigma: self.positive("head.sigma")?,
            projection_scale: self.positive("toy.projection_scale")?,
            boundary_count: self.get("toy.boundary_count")?,
            boundary_jitter: self.get("toy.boundary_jitter")?,
            gp_lambda: self.get("propseg.gp_lambda")?,
            train: TrainConfig {
                learning_rate: self.positive("toy.lr")?,
                batch_size: self.positive("toy.batch_size")?,
                epochs: self.get("toy.epochs")?,
                ..self.train()?
            },
        };
        Ok((params, config))
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let accumulator: String = self.get("pipeline.accumulator")?;
        build_accumulator(&accumulator)?;
        Ok(PipelineConfig {
            theta_cls: self.unit("pipeline.theta_cls")?,
            nms_iou: self.get("pipeline.nms_iou")?,
            accumulator,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key() {
        let c = Config::default();
        for s in KEYS {
            assert_eq!(c.raw(s.key).unwrap(), s.default);
        }
        let t = c.train().unwrap();
        assert_eq!((t.learning_rate, t.momentum, t.batch_size, t.ema_momentum), (0.1, 0.9, 64, 0.999));
        c.propseg().unwrap();
        c.propcls().unwrap();
        c.toy().unwrap();
        c.pipeline().unwrap();
        c.bench().unwrap();
    }

    #[test]
    fn toy_settings_ignore_segmenter_training_keys() {
        let mut c = Config::default();
        assert_eq!(c.toy().unwrap(), (ToyParams::default(), ToyConfig::default()));
        c.set("train.batch_size", "8").unwrap();
        c.set("train.lr", "0.5").unwrap();
        c.set("train.epochs", "3").unwrap();
        assert_eq!(c.toy().unwrap().1, ToyConfig::default());
    }

    #[test]
    fn parses_comments_and_overrides() {
        let c = Config::parse("# desk\ntrain.lr = 0.01  # smaller\n\nhead.type=entropy\n").unwrap();
        assert_eq!(c.train().unwrap().learning_rate, 0.01);
        assert_eq!(c.propseg().unwrap().head, "entropy");
        assert_eq!(Config::parse(&c.render()).unwrap().render(), c.render());
    }

    #[test]
    fn rejects_bad_input() {
        let err = |t: &str| match Config::parse(t) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(err("train.rate = 1"), "train.rate");
        assert_eq!(err("train.lr = 1\ntrain.lr = 2"), "train.lr");
        assert_eq!(err("just words"), "line 1");
        let c = Config::parse("train.lr = fast").unwrap();
        assert!(c.train().is_err());
        let c = Config::parse("train.momentum = 1").unwrap();
        assert!(c.train().is_err());
        let c = Config::parse("pipeline.accumulator = median").unwrap();
        assert!(c.pipeline().is_err());
    }
}
