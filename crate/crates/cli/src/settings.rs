//! Maps the key=value config file onto the library configuration structs.
//! Every section reader rejects unknown keys so typos fail loudly.

use voxdet_core::config::ConfigFile;
use voxdet_core::detect::{BackboneConfig, DetectionConfig, DetectorTrainConfig};
use voxdet_core::geometry::Vec3;
use voxdet_core::nn::OptimizerConfig;
use voxdet_core::shape::{DecoderConfig, EncoderConfig, FitConfig, FitConstraints, PriorTrainConfig};
use voxdet_core::synth::{SceneConfig, ShapeKind};
use voxdet_core::{Error, Result};

pub const SECTIONS: &[&str] = &[
    "scene",
    "detect",
    "backbone",
    "train-detect",
    "prior",
    "fit",
];

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub seed: u64,
    pub threads: usize,
    pub deterministic: bool,
}

pub fn load_run(cfg: &ConfigFile) -> Result<RunSettings> {
    let mut root = cfg.section("");
    let out = RunSettings {
        seed: root.get_u64("seed", 0)?,
        threads: root.get_usize("threads", 0)?,
        deterministic: root.get_bool("deterministic", false)?,
    };
    root.finish()?;
    Ok(out)
}

fn parse_classes(text: &str) -> Result<Vec<ShapeKind>> {
    text.split(',')
        .map(|t| {
            ShapeKind::parse(t.trim())
                .ok_or_else(|| Error::Config(format!("unknown shape kind '{}'", t.trim())))
        })
        .collect()
}

pub fn load_scene(cfg: &ConfigFile) -> Result<SceneConfig> {
    let mut s = cfg.section("scene");
    let default = SceneConfig::default();
    let classes = parse_classes(&s.get_string("classes", "sphere,cuboid,vehicle"))?;
    let out = SceneConfig {
        min_objects: s.get_usize("min_objects", default.min_objects)?,
        max_objects: s.get_usize("max_objects", default.max_objects)?,
        classes,
        yaw_range_deg: s.get_f64("yaw_range_deg", 30.0)?,
        ground: s.get_bool("ground", default.ground)?,
        noise_sigma: s.get_f64("noise_sigma", default.noise_sigma)?,
        rays_per_object: s.get_usize("rays_per_object", default.rays_per_object)?,
        ground_rays: s.get_usize("ground_rays", default.ground_rays)?,
        extent: s.get_f64("extent", default.extent)?,
        placement_gap: s.get_f64("placement_gap", default.placement_gap)?,
    };
    s.finish()?;
    if out.min_objects > out.max_objects {
        return Err(Error::Config("scene: min_objects > max_objects".into()));
    }
    Ok(out)
}

fn parse_vec3(text: &str, what: &str) -> Result<Vec3> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{what}: '{text}' is not x,y,z")))?;
    if parts.len() != 3 {
        return Err(Error::Config(format!("{what}: expected 3 components")));
    }
    Ok(Vec3::new(parts[0], parts[1], parts[2]))
}

pub fn load_detection(cfg: &ConfigFile) -> Result<DetectionConfig> {
    let mut s = cfg.section("detect");
    let default = DetectionConfig::default();
    let anchor = parse_vec3(&s.get_string("anchor", "1.3,1.0,0.9"), "detect.anchor")?;
    let out = DetectionConfig {
        k_neighbors: s.get_usize("k", default.k_neighbors)?,
        graph_layers: s.get_usize("graph_layers", default.graph_layers)?,
        alpha: s.get_f64("alpha", default.alpha)?,
        iou_positive_threshold: s.get_f64("iou_positive_threshold", default.iou_positive_threshold)?,
        nms_iou: s.get_f64("nms_iou", default.nms_iou)?,
        max_proposals: s.get_usize("max_proposals", default.max_proposals)?,
        min_shape_points: s.get_usize("min_shape_points", default.min_shape_points)?,
        num_classes: s.get_usize("num_classes", default.num_classes)?,
        voxel_size: s.get_f64("voxel_size", default.voxel_size)?,
        anchor_size: anchor,
        embed_dim: s.get_usize("embed_dim", default.embed_dim)?,
        use_consolidation: s.get_bool("use_consolidation", default.use_consolidation)?,
        use_dynamic_labels: s.get_bool("use_dynamic_labels", default.use_dynamic_labels)?,
    };
    s.finish()?;
    Ok(out)
}

pub fn load_backbone(cfg: &ConfigFile) -> Result<BackboneConfig> {
    let mut s = cfg.section("backbone");
    let default = BackboneConfig::desk();
    let out = BackboneConfig {
        encoder_channels: s.get_usize_list("encoder_channels", &default.encoder_channels)?,
        bottleneck_channels: s.get_usize("bottleneck_channels", default.bottleneck_channels)?,
        input_channels: 1,
        use_batchnorm: s.get_bool("use_batchnorm", true)?,
    };
    s.finish()?;
    if out.encoder_channels.is_empty() {
        return Err(Error::Config("backbone: encoder_channels is empty".into()));
    }
    Ok(out)
}

pub fn load_detector_train(cfg: &ConfigFile, seed: u64) -> Result<DetectorTrainConfig> {
    let mut s = cfg.section("train-detect");
    let augment = s.get_bool("augment", true)?;
    let out = DetectorTrainConfig {
        epochs: s.get_usize("epochs", 50)?,
        optimizer: OptimizerConfig {
            base_lr: s.get_f64("lr", 0.3)?,
            momentum: s.get_f64("momentum", 0.0)?,
            weight_decay: s.get_f64("weight_decay", 5e-4)?,
            schedule_step: s.get_usize("schedule_step", 3000)?,
            ..Default::default()
        },
        augment: augment.then_some((10.0, (0.9, 1.1))),
        seed,
    };
    s.finish()?;
    Ok(out)
}

pub struct PriorSettings {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: PriorTrainConfig,
    pub shapes: Vec<ShapeKind>,
}

pub fn load_prior(cfg: &ConfigFile, seed: u64) -> Result<PriorSettings> {
    let mut s = cfg.section("prior");
    let enc_default = EncoderConfig::desk();
    let dec_default = DecoderConfig::desk();
    let train_default = PriorTrainConfig::default();

    let plan_text = s.get_string("encoder_channels", "8:16,16:24,24:24");
    let channel_plan: Vec<(usize, usize)> = plan_text
        .split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("prior.encoder_channels: bad pair '{pair}'")))?;
            Ok((
                a.trim().parse().map_err(|_| {
                    Error::Config(format!("prior.encoder_channels: bad channel '{a}'"))
                })?,
                b.trim().parse().map_err(|_| {
                    Error::Config(format!("prior.encoder_channels: bad channel '{b}'"))
                })?,
            ))
        })
        .collect::<Result<_>>()?;

    let embed_dim = s.get_usize("embed_dim", enc_default.embed_dim)?;
    let out = PriorSettings {
        encoder: EncoderConfig {
            channel_plan,
            embed_dim,
            grid_resolution: s.get_usize("grid_resolution", enc_default.grid_resolution)?,
            fc_before_pool: s.get_bool("fc_before_pool", enc_default.fc_before_pool)?,
        },
        decoder: DecoderConfig {
            embed_dim,
            hidden: s.get_usize("hidden", dec_default.hidden)?,
            blocks: s.get_usize("blocks", dec_default.blocks)?,
        },
        train: PriorTrainConfig {
            iterations: s.get_usize("iterations", train_default.iterations)?,
            n_near: s.get_usize("n_near", train_default.n_near)?,
            n_uniform: s.get_usize("n_uniform", train_default.n_uniform)?,
            near_sigma: s.get_f64("near_sigma", train_default.near_sigma)?,
            encoder_points: s.get_usize("encoder_points", train_default.encoder_points)?,
            crop_max_fraction: s.get_f64("crop_max_fraction", train_default.crop_max_fraction)?,
            fixed_observation: s.get_bool("fixed_observation", false)?,
            optimizer: OptimizerConfig {
                base_lr: s.get_f64("lr", 0.1)?,
                momentum: s.get_f64("momentum", 0.0)?,
                weight_decay: s.get_f64("weight_decay", 5e-4)?,
                schedule_step: s.get_usize("schedule_step", 2500)?,
                ..Default::default()
            },
            seed,
        },
        shapes: parse_classes(&s.get_string("shapes", "sphere,cuboid,vehicle"))?,
    };
    s.finish()?;
    Ok(out)
}

pub fn load_fit(cfg: &ConfigFile) -> Result<(FitConfig, usize)> {
    let mut s = cfg.section("fit");
    let default = FitConfig::default();
    let delta = s.get_f64("delta", 0.1)?;
    let surface_only = s.get_bool("surface_only", false)?;
    let resolution = s.get_usize("resolution", 100)?;
    let out = FitConfig {
        constraints: if surface_only {
            FitConstraints::SurfaceOnly
        } else {
            FitConstraints::RayAugment(delta)
        },
        iterations: s.get_usize("iterations", default.iterations)?,
        lr: s.get_f64("lr", default.lr)?,
        min_points: s.get_usize("min_points", default.min_points)?,
    };
    s.finish()?;
    Ok((out, resolution))
}
