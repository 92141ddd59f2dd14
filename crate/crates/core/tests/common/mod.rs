#![allow(dead_code)]

use raddiff_core::io::{analytic_field, Primitive, ShapeSpec};
use raddiff_core::*;
use raddiff_tensor::Tensor;

pub fn sphere(name: &str, color: [f64; 3], radius: f64) -> ShapeSpec {
    ShapeSpec {
        name: name.into(),
        color,
        primitives: vec![Primitive::Sphere {
            center: [0.0; 3],
            radius,
        }],
    }
}

/// Four visibly different shapes used by the overfit experiments.
pub fn toy_shapes() -> Vec<ShapeSpec> {
    vec![
        sphere("ball", [0.9, 0.2, 0.2], 0.6),
        ShapeSpec {
            name: "crate".into(),
            color: [0.2, 0.3, 0.9],
            primitives: vec![Primitive::Box {
                center: [0.0; 3],
                half_extents: [0.5, 0.5, 0.5],
            }],
        },
        ShapeSpec {
            name: "table".into(),
            color: [0.3, 0.8, 0.3],
            primitives: vec![
                Primitive::Box {
                    center: [0.0, 0.0, 0.3],
                    half_extents: [0.7, 0.7, 0.12],
                },
                Primitive::Box {
                    center: [0.0, 0.0, -0.2],
                    half_extents: [0.15, 0.15, 0.45],
                },
            ],
        },
        ShapeSpec {
            name: "pair".into(),
            color: [0.9, 0.8, 0.2],
            primitives: vec![
                Primitive::Sphere {
                    center: [-0.4, 0.0, 0.0],
                    radius: 0.35,
                },
                Primitive::Sphere {
                    center: [0.4, 0.0, 0.0],
                    radius: 0.35,
                },
            ],
        },
    ]
}

/// Renders `f` from a spiral and packs the views as a scene.
pub fn spiral_scene(f: &RadianceField, spec: &SpiralSpec) -> Scene {
    let cfg = RenderConfig::default();
    let act = ActivationConfig::default();
    let views = spiral_trajectory(spec)
        .unwrap()
        .into_iter()
        .map(|camera| {
            let image = render_image(f, &camera, &cfg, &act).unwrap().image;
            PosedImage { camera, image }
        })
        .collect();
    Scene {
        views,
        background: None,
    }
}

pub fn toy_dataset(n: usize, views: usize, size: usize) -> Vec<TrainingSample> {
    let spec = SpiralSpec {
        n_views: views,
        width: size,
        height: size,
        ..Default::default()
    };
    toy_shapes()
        .iter()
        .map(|s| {
            let f = analytic_field(s, n, [1.0; 3]);
            let scene = spiral_scene(&f, &spec);
            TrainingSample::new(s.name.clone(), f, scene).unwrap()
        })
        .collect()
}

/// Deterministic pseudo-random field tensor with values in `[-amp, amp]`.
pub fn wavy(n: usize, amp: f64, phase: f64) -> Tensor {
    Tensor::from_fn(&[4, n, n, n], |i| amp * ((i as f64 * 0.731 + phase).sin() * 1.3).tanh())
}

/// Relative error with a floor that treats two negligible numbers as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, 1e-7)
}

pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` with respect to element `i` of `x`.
pub fn central_diff(x: &Tensor, i: usize, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    let mut p = x.clone();
    p.data_mut()[i] += h;
    let mut m = x.clone();
    m.data_mut()[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

pub fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        resnet_blocks_per_level: 1,
        attention_levels: vec![2],
        attention_head_channels: 8,
        time_embed_dim: Some(32),
    }
}
